//! Keep/drop rules evaluated against envelope fields.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::envelope::{
    TelemetryEnvelope, FIELD_CSP, FIELD_DATA_TYPE, FIELD_ERROR, FIELD_GOVERNANCE_DATA, FIELD_LOG_ID, FIELD_SERVICE_NAME,
};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FilterError {
    #[error("unknown filter field {0:?}")]
    UnknownField(String),
    #[error("in_set needs at least one value")]
    EmptySet,
}

/// A field an envelope can be filtered on.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum FieldPath {
    Csp,
    DataType,
    ServiceName,
    LogId,
    Error,
    GovernanceData(String),
}

impl FromStr for FieldPath {
    type Err = FilterError;

    fn from_str(s: &str) -> Result<Self, FilterError> {
        Ok(match s {
            FIELD_CSP => Self::Csp,
            FIELD_DATA_TYPE => Self::DataType,
            FIELD_SERVICE_NAME => Self::ServiceName,
            FIELD_LOG_ID => Self::LogId,
            FIELD_ERROR => Self::Error,
            _ => match s.strip_prefix(FIELD_GOVERNANCE_DATA).and_then(|r| r.strip_prefix('.')) {
                Some(k) if !k.is_empty() => Self::GovernanceData(k.to_string()),
                _ => return Err(FilterError::UnknownField(s.to_string())),
            },
        })
    }
}

impl fmt::Display for FieldPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Csp => f.write_str(FIELD_CSP),
            Self::DataType => f.write_str(FIELD_DATA_TYPE),
            Self::ServiceName => f.write_str(FIELD_SERVICE_NAME),
            Self::LogId => f.write_str(FIELD_LOG_ID),
            Self::Error => f.write_str(FIELD_ERROR),
            Self::GovernanceData(k) => write!(f, "{FIELD_GOVERNANCE_DATA}.{k}"),
        }
    }
}

impl Serialize for FieldPath {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FieldPath {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

impl FieldPath {
    /// String form of the field's value, or `None` when the envelope has no
    /// such field (absent payload key, null error).
    pub fn resolve(&self, env: &TelemetryEnvelope) -> Option<String> {
        match self {
            Self::Csp => Some(env.csp.as_str().to_string()),
            Self::DataType => Some(env.data_type.as_str().to_string()),
            Self::ServiceName => Some(env.service_name.clone()),
            Self::LogId => Some(env.log_id.to_string()),
            Self::Error => env.error.clone(),
            Self::GovernanceData(k) => match env.governance_data.get(k)? {
                Value::Null => None,
                Value::String(s) => Some(s.clone()),
                other => Some(other.to_string()),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Predicate {
    Equals { value: String },
    NotEquals { value: String },
    InSet { values: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterRule {
    pub field: FieldPath,
    #[serde(flatten)]
    pub predicate: Predicate,
}

impl FilterRule {
    pub fn equals(field: &str, value: &str) -> Result<Self, FilterError> {
        Ok(Self {
            field: field.parse()?,
            predicate: Predicate::Equals { value: value.into() },
        })
    }

    pub fn not_equals(field: &str, value: &str) -> Result<Self, FilterError> {
        Ok(Self {
            field: field.parse()?,
            predicate: Predicate::NotEquals { value: value.into() },
        })
    }

    pub fn in_set<S: Into<String>>(field: &str, values: impl IntoIterator<Item = S>) -> Result<Self, FilterError> {
        let rule = Self {
            field: field.parse()?,
            predicate: Predicate::InSet {
                values: values.into_iter().map(Into::into).collect(),
            },
        };
        rule.validate()?;
        Ok(rule)
    }

    pub fn validate(&self) -> Result<(), FilterError> {
        match &self.predicate {
            Predicate::InSet { values } if values.is_empty() => Err(FilterError::EmptySet),
            _ => Ok(()),
        }
    }

    /// A missing field never equals anything, so it fails `equals`/`in_set`
    /// and passes `not_equals`.
    pub fn holds(&self, env: &TelemetryEnvelope) -> bool {
        let actual = self.field.resolve(env);
        match &self.predicate {
            Predicate::Equals { value } => actual.as_deref() == Some(value),
            Predicate::NotEquals { value } => actual.as_deref() != Some(value),
            Predicate::InSet { values } => actual.is_some_and(|a| values.contains(&a)),
        }
    }
}

/// `true` (keep) iff every rule holds.
pub fn apply_filter(rules: &[FilterRule], env: &TelemetryEnvelope) -> bool {
    rules.iter().all(|r| r.holds(env))
}
