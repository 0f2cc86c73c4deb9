//! Converter: brings incoming telemetry into the canonical envelope shape.
//!
//! Two input formats are accepted:
//!
//! * canonical JSON (anything whose first non-blank byte is `{`);
//! * a `key=value` line protocol, one record per line. Values may be
//!   double-quoted to carry spaces; `\"` and `\\` escape inside quotes.
//!
//! Line keys map onto the envelope as follows:
//!
//! | key                 | destination                                 |
//! |---------------------|---------------------------------------------|
//! | `CSP`               | `CSP` (required)                            |
//! | `data_type`         | `data_type` (required)                      |
//! | `service_name`      | `service_name`, default `"unknown"`         |
//! | `log_id`            | `log_id`, fresh seeded UUID when absent     |
//! | `error`             | `error`                                     |
//! | `<stage>_timestamp` | `timestamps.<stage>_timestamp`, line order  |
//! | anything else       | `governance_data.<key>`                     |
//!
//! Unquoted values in `governance_data` become integers, floats or booleans
//! when they parse as such; quoted values always stay strings. Without a
//! `cna_timestamp` the origin stamp is the conversion time.

use serde_json::{Map, Number, Value};
use thiserror::Error;
use uuid::Uuid;

use crate::envelope::{
    Csp, DataType, EnvelopeError, StageName, StageTimestamps, TelemetryEnvelope, FIELD_CSP, FIELD_DATA_TYPE,
    FIELD_ERROR, FIELD_LOG_ID, FIELD_SERVICE_NAME,
};
use crate::ids::IdGenerator;
use crate::time::{parse_instant, Instant};

pub const DEFAULT_SERVICE_NAME: &str = "unknown";

#[derive(Debug, Error, PartialEq)]
pub enum ConvertError {
    #[error("unrecognized format: {0}")]
    UnrecognizedFormat(String),
    #[error(transparent)]
    Invalid(#[from] EnvelopeError),
}

/// Input accepted by [`convert`].
#[derive(Debug, Clone)]
pub enum ConvertInput<'a> {
    Raw(&'a [u8]),
    Envelope(TelemetryEnvelope),
}

/// Converts one record and appends the converter stamp.
pub fn convert(
    input: ConvertInput<'_>,
    now: Instant,
    ids: &mut IdGenerator,
) -> Result<TelemetryEnvelope, ConvertError> {
    let env = match input {
        ConvertInput::Envelope(env) => env,
        ConvertInput::Raw(raw) => parse_raw(raw, now, ids)?,
    };
    Ok(env.stamp_stage(StageName::ims_converter(), now)?)
}

fn parse_raw(raw: &[u8], now: Instant, ids: &mut IdGenerator) -> Result<TelemetryEnvelope, ConvertError> {
    let first = raw.iter().find(|b| !b.is_ascii_whitespace());
    match first {
        None => Err(ConvertError::UnrecognizedFormat("empty input".into())),
        Some(b'{') => Ok(TelemetryEnvelope::parse_and_validate(raw)?),
        Some(_) => {
            let text =
                std::str::from_utf8(raw).map_err(|_| ConvertError::UnrecognizedFormat("not UTF-8 text".into()))?;
            let mut records = text.lines().filter(|l| !l.trim().is_empty());
            let line = records.next().expect("non-blank input has a line");
            if records.next().is_some() {
                return Err(ConvertError::UnrecognizedFormat(
                    "more than one record; split with records()".into(),
                ));
            }
            parse_line(line, now, ids)
        }
    }
}

/// Non-blank lines of a line-protocol document, one record each.
pub fn records(text: &str) -> impl Iterator<Item = &str> {
    text.lines().filter(|l| !l.trim().is_empty())
}

#[derive(Debug, PartialEq)]
struct Pair {
    key: String,
    value: String,
    quoted: bool,
}

fn tokenize(line: &str) -> Result<Vec<Pair>, ConvertError> {
    let bad = |why: &str| ConvertError::UnrecognizedFormat(why.to_string());
    let mut pairs = Vec::new();
    let mut chars = line.chars().peekable();
    loop {
        while chars.next_if(|c| c.is_whitespace()).is_some() {}
        if chars.peek().is_none() {
            break;
        }
        let mut key = String::new();
        while let Some(c) = chars.next_if(|&c| c != '=' && !c.is_whitespace()) {
            key.push(c);
        }
        if chars.next() != Some('=') || key.is_empty() {
            return Err(bad("expected key=value"));
        }
        if !key
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '-')
        {
            return Err(bad("keys are ASCII identifiers"));
        }
        let mut value = String::new();
        let quoted = chars.next_if_eq(&'"').is_some();
        if quoted {
            loop {
                match chars.next() {
                    None => return Err(bad("unterminated quoted value")),
                    Some('"') => break,
                    Some('\\') => match chars.next() {
                        Some(c @ ('"' | '\\')) => value.push(c),
                        _ => return Err(bad("bad escape in quoted value")),
                    },
                    Some(c) => value.push(c),
                }
            }
            if chars.peek().is_some_and(|c| !c.is_whitespace()) {
                return Err(bad("junk after quoted value"));
            }
        } else {
            while let Some(c) = chars.next_if(|c| !c.is_whitespace()) {
                value.push(c);
            }
        }
        pairs.push(Pair { key, value, quoted });
    }
    if pairs.is_empty() {
        return Err(bad("empty record"));
    }
    Ok(pairs)
}

fn scalar(value: String, quoted: bool) -> Value {
    if quoted {
        return Value::String(value);
    }
    if let Ok(i) = value.parse::<i64>() {
        return Value::from(i);
    }
    if let Some(n) = value.parse::<f64>().ok().and_then(Number::from_f64) {
        return Value::Number(n);
    }
    match value.as_str() {
        "true" => Value::Bool(true),
        "false" => Value::Bool(false),
        _ => Value::String(value),
    }
}

fn parse_line(line: &str, now: Instant, ids: &mut IdGenerator) -> Result<TelemetryEnvelope, ConvertError> {
    let missing = |f: &str| EnvelopeError::SchemaViolation(format!("missing required field {f:?}"));
    let mut csp = None;
    let mut data_type = None;
    let mut service_name = None;
    let mut log_id = None;
    let mut error = None;
    let mut stamps: Vec<(String, String)> = Vec::new();
    let mut governance_data = Map::new();

    for Pair { key, value, quoted } in tokenize(line)? {
        let dup = || EnvelopeError::SchemaViolation(format!("field {key:?} given twice"));
        match key.as_str() {
            FIELD_CSP => {
                if csp.replace(value).is_some() {
                    return Err(dup().into());
                }
            }
            FIELD_DATA_TYPE => {
                if data_type.replace(value.parse::<DataType>()?).is_some() {
                    return Err(dup().into());
                }
            }
            FIELD_SERVICE_NAME => {
                if service_name.replace(value).is_some() {
                    return Err(dup().into());
                }
            }
            FIELD_LOG_ID => {
                let id = Uuid::parse_str(&value)
                    .map_err(|_| EnvelopeError::SchemaViolation(format!("log_id {value:?} is not a UUID")))?;
                if log_id.replace(id).is_some() {
                    return Err(dup().into());
                }
            }
            FIELD_ERROR => {
                if error.replace(value).is_some() {
                    return Err(dup().into());
                }
            }
            k if k.ends_with("_timestamp") => stamps.push((key, value)),
            _ => {
                if governance_data.contains_key(&key) {
                    return Err(dup().into());
                }
                governance_data.insert(key, scalar(value, quoted));
            }
        }
    }

    let csp = csp.filter(|c| !c.is_empty()).ok_or_else(|| missing(FIELD_CSP))?;
    let data_type = data_type.ok_or_else(|| missing(FIELD_DATA_TYPE))?;
    let mut timestamps = StageTimestamps::new();
    if !stamps.iter().any(|(k, _)| k == StageName::CNA) {
        timestamps.push(StageName::cna(), now)?;
    }
    for (stage, raw) in stamps {
        let at = parse_instant(&raw).ok_or_else(|| EnvelopeError::InvalidTimestamp {
            stage: stage.clone(),
            reason: format!("{raw:?} is not a UTC RFC 3339 instant with microsecond precision"),
        })?;
        timestamps.push(StageName::new(stage)?, at)?;
    }

    Ok(TelemetryEnvelope {
        csp: Csp::new(csp),
        data_type,
        error,
        governance_data,
        log_id: log_id.unwrap_or_else(|| ids.next_uuid()),
        service_name: service_name.unwrap_or_else(|| DEFAULT_SERVICE_NAME.to_string()),
        timestamps,
    })
}
