//! Oracles and randomized checks shared by the integration suites and the
//! acceptance target. Each check returns a one-line summary or the first
//! counterexample.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::PathBuf;

use chrono::Duration;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde_json::{Map, Value};
use uuid::Uuid;

use govsim::analytics::{
    assess, compute_legs, correlate_alerts, detect_drift, summarize_stats, Alert, AssessmentKind, AssessmentRule,
    DesiredState, LegCatalog, LegDelayRecord, Observation,
};
use govsim::databus::{BusConfig, BusState, Channel, DataBus, Deduplicator, PublisherId};
use govsim::envelope::{Csp, DataType, StageName, StageTimestamps, TelemetryEnvelope};
use govsim::pipeline::FilterRule;
use govsim::runner::{run_simulated, RunOptions, RunOutcome};
use govsim::scenario::{load_config, ScenarioConfig};
use govsim::storage::{ObjectStore, RetentionPolicy, StorageError};
use govsim::time::{parse_instant, Instant};

pub type Check = Result<String, String>;

pub fn fixture(name: &str) -> Vec<u8> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name);
    std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn shipped_scenario(name: &str) -> ScenarioConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name);
    load_config(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

pub fn t0() -> Instant {
    parse_instant("2024-09-06T15:00:00+00:00").unwrap()
}

pub fn at_ms(ms: i64) -> Instant {
    t0() + Duration::milliseconds(ms)
}

pub fn envelope(n: u64) -> TelemetryEnvelope {
    let mut data = Map::new();
    data.insert("n".into(), Value::from(n));
    TelemetryEnvelope {
        csp: Csp::new("AWS"),
        data_type: DataType::Metrics,
        error: None,
        governance_data: data,
        log_id: Uuid::from_u128(n as u128 + 1),
        service_name: "cna-app".into(),
        timestamps: StageTimestamps::origin(t0()),
    }
}

fn rel_close(got: f64, want: f64, tol: f64) -> bool {
    if want == 0.0 {
        got.abs() <= tol
    } else {
        ((got - want) / want).abs() <= tol
    }
}

/// Brute-force reference: plain summation for the mean, selection for the
/// median, Welford for the sample standard deviation.
pub struct OracleStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub median: f64,
    pub std: f64,
}

pub fn oracle_stats(xs: &[f64]) -> OracleStats {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let mut v = xs.to_vec();
    let (_, &mut hi, _) = v.select_nth_unstable_by(n / 2, f64::total_cmp);
    let median = if n % 2 == 1 {
        hi
    } else {
        let (_, &mut lo, _) = v.select_nth_unstable_by(n / 2 - 1, f64::total_cmp);
        (lo + hi) / 2.0
    };
    let (mut m, mut m2) = (0.0, 0.0);
    for (i, &x) in xs.iter().enumerate() {
        let d = x - m;
        m += d / (i + 1) as f64;
        m2 += d * (x - m);
    }
    let std = if n > 1 { (m2 / (n - 1) as f64).sqrt() } else { 0.0 };
    OracleStats {
        min: xs.iter().copied().fold(f64::INFINITY, f64::min),
        max: xs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean,
        median,
        std,
    }
}

pub fn random_dataset(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=10_000);
    match seed % 4 {
        0 => {
            let d = LogNormal::new(rng.random_range(2.0..7.0), rng.random_range(0.05..1.0)).unwrap();
            (0..n).map(|_| d.sample(&mut rng)).collect()
        }
        1 => (0..n).map(|_| rng.random_range(0.0..1500.0)).collect(),
        2 => {
            let d = Normal::new(1.0e6, 3.0).unwrap();
            (0..n).map(|_| d.sample(&mut rng)).collect()
        }
        _ => (0..n).map(|_| (rng.random_range(0..200_000) as f64) / 1000.0).collect(),
    }
}

pub fn check_stats_oracle(datasets: u64) -> Check {
    let tol = 1e-9;
    for seed in 0..datasets {
        let xs = random_dataset(seed);
        let got = summarize_stats(&xs).map_err(|e| format!("seed {seed}: {e}"))?;
        let want = oracle_stats(&xs);
        let pairs = [
            ("min", got.min, want.min),
            ("max", got.max, want.max),
            ("mean", got.mean, want.mean),
            ("median", got.median, want.median),
            ("std", got.std, want.std),
        ];
        for (name, g, w) in pairs {
            if !rel_close(g, w, tol) {
                return Err(format!("seed {seed} (n={}): {name} {g} vs oracle {w}", xs.len()));
            }
        }
        if got.count as usize != xs.len() {
            return Err(format!("seed {seed}: count {}", got.count));
        }
    }
    Ok(format!("{datasets} datasets within {tol:e} relative"))
}

#[derive(Debug, Clone)]
pub enum WormOp {
    Put(u8),
    Delete(u8),
    Advance(u16),
}

fn worm_op() -> impl Strategy<Value = WormOp> {
    prop_oneof![
        3 => (0u8..6).prop_map(WormOp::Put),
        3 => (0u8..6).prop_map(WormOp::Delete),
        2 => (0u16..400).prop_map(WormOp::Advance),
    ]
}

/// Runs one operation sequence against a 30-day WORM store and a model.
fn worm_sequence(ops: &[WormOp]) -> Result<(), TestCaseError> {
    let retention = RetentionPolicy::days(30);
    let store = ObjectStore::immutable(retention);
    let mut model: BTreeMap<String, (Instant, Vec<u8>)> = BTreeMap::new();
    let mut now = t0();
    for (i, op) in ops.iter().enumerate() {
        match *op {
            WormOp::Put(k) => {
                let key = format!("AWS/{k}");
                let payload = format!("v{i}").into_bytes();
                let res = store.put(&key, payload.clone(), now);
                match model.get(&key) {
                    Some((_, original)) => {
                        prop_assert_eq!(res, Err(StorageError::WriteOnceViolation(key.clone())));
                        prop_assert_eq!(&store.get(&key).unwrap().payload, original);
                    }
                    None => {
                        prop_assert!(res.is_ok());
                        model.insert(key, (now, payload));
                    }
                }
            }
            WormOp::Delete(k) => {
                let key = format!("AWS/{k}");
                let res = store.delete(&key, now);
                match model.get(&key) {
                    None => prop_assert_eq!(res, Err(StorageError::NotFound(key))),
                    Some((stored, _)) if now < *stored + retention.period => {
                        let locked = matches!(res, Err(StorageError::RetentionLocked { .. }));
                        prop_assert!(locked, "pre-retention delete of {} gave {:?}", key, res);
                        prop_assert!(store.contains(&key));
                    }
                    Some(_) => {
                        prop_assert_eq!(res, Ok(()));
                        model.remove(&key);
                    }
                }
            }
            WormOp::Advance(hours) => now += Duration::hours(hours as i64),
        }
        prop_assert_eq!(store.len(), model.len());
    }
    Ok(())
}

pub fn check_worm(cases: u32) -> Check {
    let mut runner = TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&proptest::collection::vec(worm_op(), 1..60), |ops| worm_sequence(&ops))
        .map_err(|e| e.to_string())?;
    Ok(format!("{cases} randomized operation sequences"))
}

/// Down intervals in ms for one channel.
fn outages(rng: &mut ChaCha8Rng, horizon: i64) -> Vec<(i64, i64)> {
    let mut out = Vec::new();
    let mut t = rng.random_range(0..horizon / 4);
    while t < horizon {
        let len = rng.random_range(100..6_000);
        out.push((t, t + len));
        t += len + rng.random_range(100..8_000);
    }
    out
}

fn is_down(outages: &[(i64, i64)], t: i64) -> bool {
    outages.iter().any(|&(a, b)| a <= t && t < b)
}

/// One randomized fault schedule on a bus with a publisher pair and a
/// consumer that sometimes leaves messages unacknowledged or crashes. Both
/// channels fail independently; at the end the survivor stays up.
pub fn failover_schedule(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = BusConfig::default();
    let beat = cfg.heartbeat.beat_interval.num_milliseconds();
    let bound = cfg.heartbeat.failover_bound().num_milliseconds();
    let bus = DataBus::new("ims-bus", cfg, seed, t0());
    let sub = bus.subscribe("converter", "converter");
    let publishers = [PublisherId::from("rg1-gateway"), PublisherId::from("ims-gateway")];
    let horizon = 30_000;
    let primary = outages(&mut rng, horizon);
    let auxiliary = outages(&mut rng, horizon);
    let survivor = if rng.random_bool(0.5) {
        Channel::Primary
    } else {
        Channel::Auxiliary
    };

    let mut published = BTreeSet::new();
    let mut processed = BTreeSet::new();
    let mut dedup = Deduplicator::new();
    let mut next = 0;
    let mut primary_down_since: Option<i64> = None;
    let mut detections = Vec::new();
    let mut t = 0;
    while t <= horizon + 20 * beat {
        let late = t > horizon;
        let p_down = if late {
            survivor != Channel::Primary
        } else {
            is_down(&primary, t)
        };
        let a_down = if late {
            survivor != Channel::Auxiliary
        } else {
            is_down(&auxiliary, t)
        };
        bus.set_channel_up(Channel::Primary, !p_down);
        bus.set_channel_up(Channel::Auxiliary, !a_down);
        match (p_down, primary_down_since) {
            (true, None) => primary_down_since = Some(t),
            (false, Some(_)) => primary_down_since = None,
            _ => {}
        }
        if t % beat == 0 && t > 0 {
            if let Some(e) = bus.tick(at_ms(t)) {
                if e.to == BusState::FailedOver {
                    detections.push((t, primary_down_since));
                }
            }
        }
        if !late && rng.random_bool(0.6) {
            let p = &publishers[rng.random_range(0..2)];
            if let Ok(m) = bus.publish(p, "converter", &envelope(next), at_ms(t)) {
                published.insert(m.message_id);
            }
            next += 1;
        }
        if late && t == horizon + beat {
            bus.crash(sub).map_err(|e| e.to_string())?;
        }
        for _ in 0..rng.random_range(0..3) {
            let Some(d) = bus.poll(sub).map_err(|e| e.to_string())? else {
                break;
            };
            let id = d.message.message_id;
            if dedup.admit(id) {
                processed.insert(id);
            }
            if late || rng.random_bool(0.85) {
                bus.ack(sub, id, at_ms(t)).map_err(|e| e.to_string())?;
            } else if rng.random_bool(0.5) {
                bus.nack(sub, id).map_err(|e| e.to_string())?;
            }
        }
        if !late && rng.random_bool(0.01) {
            bus.crash(sub).map_err(|e| e.to_string())?;
        }
        t += 100;
    }
    if processed != published {
        let lost = published.difference(&processed).count();
        let extra = processed.difference(&published).count();
        return Err(format!("seed {seed}: {lost} lost, {extra} unexpected"));
    }
    if !bus.is_idle() {
        return Err(format!("seed {seed}: bus not drained"));
    }
    for (at, since) in detections {
        match since {
            Some(down) if at - down <= bound => {}
            Some(down) => {
                return Err(format!(
                    "seed {seed}: detected at {at} ms, primary down since {down} ms"
                ))
            }
            None => return Err(format!("seed {seed}: failover at {at} ms with primary up")),
        }
    }
    // every outage longer than the bound must have been detected
    let events = bus.failover_events();
    for &(a, b) in primary.iter().filter(|&&(a, b)| b - a > bound && a + bound <= horizon) {
        let hit = events.iter().any(|e| {
            let at = (parse_instant(&e.at).unwrap() - t0()).num_milliseconds();
            e.to == BusState::FailedOver && at >= a && at <= a + bound
        });
        let already = bus_state_at(&events, a) == Some(BusState::FailedOver);
        if !hit && !already {
            return Err(format!("seed {seed}: outage {a}..{b} ms never detected"));
        }
    }
    Ok(())
}

fn bus_state_at(events: &[govsim::databus::FailoverEvent], ms: i64) -> Option<BusState> {
    events
        .iter()
        .rfind(|e| (parse_instant(&e.at).unwrap() - t0()).num_milliseconds() <= ms)
        .map(|e| e.to)
}

pub fn check_failover(schedules: u64) -> Check {
    for seed in 0..schedules {
        failover_schedule(seed)?;
    }
    let bound = BusConfig::default().heartbeat.failover_bound().num_milliseconds();
    Ok(format!(
        "{schedules} fault schedules, no loss, detection within {bound} ms"
    ))
}

/// Random interleaving of several publishers over two topics, with nacks,
/// consumer crashes and primary-channel drops. First deliveries per
/// (publisher, topic) must follow publish order.
pub fn fifo_interleaving(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bus = DataBus::new("bus", BusConfig::default(), seed, t0());
    let topics = ["converter", "archiver"];
    let subs: Vec<_> = topics
        .iter()
        .map(|t| bus.subscribe(&format!("{t}-consumer"), t))
        .collect();
    let publishers: Vec<PublisherId> = (0..rng.random_range(2..5))
        .map(|i| PublisherId(format!("p{i}")))
        .collect();
    let mut sent: HashMap<(String, String), Vec<Uuid>> = HashMap::new();
    let mut seen: HashMap<(String, String), Vec<Uuid>> = HashMap::new();
    let mut dedup = Deduplicator::new();
    let mut now = 0;
    let mut drain = |bus: &DataBus, i: usize, ack_all: bool, rng: &mut ChaCha8Rng, now: i64| -> Result<bool, String> {
        let Some(d) = bus.poll(subs[i]).map_err(|e| e.to_string())? else {
            return Ok(false);
        };
        let id = d.message.message_id;
        if dedup.admit(id) {
            seen.entry((d.message.publisher.0.clone(), d.message.topic.clone()))
                .or_default()
                .push(id);
        }
        if ack_all || rng.random_bool(0.8) {
            bus.ack(subs[i], id, at_ms(now)).map_err(|e| e.to_string())?;
        } else {
            bus.nack(subs[i], id).map_err(|e| e.to_string())?;
        }
        Ok(true)
    };
    for _ in 0..rng.random_range(20..120) {
        now += 50;
        match rng.random_range(0..10) {
            0..=4 => {
                let p = &publishers[rng.random_range(0..publishers.len())];
                let topic = topics[rng.random_range(0..2)];
                let m = bus
                    .publish(p, topic, &envelope(rng.random()), at_ms(now))
                    .map_err(|e| e.to_string())?;
                sent.entry((p.0.clone(), topic.to_string()))
                    .or_default()
                    .push(m.message_id);
            }
            5..=7 => {
                drain(&bus, rng.random_range(0..2), false, &mut rng, now)?;
            }
            8 => {
                bus.crash(subs[rng.random_range(0..2)]).map_err(|e| e.to_string())?;
            }
            _ => {
                let up = !bus.channel_up(Channel::Primary);
                bus.set_channel_up(Channel::Primary, up);
                bus.tick(at_ms(now));
            }
        }
    }
    bus.set_channel_up(Channel::Primary, true);
    for _ in 0..4 {
        now += 500;
        bus.tick(at_ms(now));
    }
    for (i, &sub) in subs.iter().enumerate() {
        bus.crash(sub).map_err(|e| e.to_string())?;
        while drain(&bus, i, true, &mut rng, now)? {}
    }
    if sent != seen {
        return Err(format!("seed {seed}: delivery order differs from publish order"));
    }
    Ok(())
}

pub fn check_fifo(interleavings: u64) -> Check {
    for seed in 0..interleavings {
        fifo_interleaving(seed)?;
    }
    Ok(format!("{interleavings} interleavings in publish order"))
}

pub fn random_alerts(rng: &mut ChaCha8Rng, n: usize) -> Vec<Alert> {
    (0..n)
        .map(|i| Alert {
            rule_id: format!("r{}", rng.random_range(0..3)),
            source: format!("src{}", rng.random_range(0..5)),
            observed: i as f64,
            expected: "< 1".into(),
            at: at_ms(rng.random_range(0..120_000)),
        })
        .collect()
}

/// Hand-subtracted leg delays of the four sample documents, in ms.
pub const GOLDEN_LEGS: [(&str, &[(&str, f64)]); 4] = [
    (
        "aws_metrics.json",
        &[
            ("Leg 1", 18.474),
            ("Leg 2", 45.501),
            ("Leg 3", 708.053),
            ("Leg 4", 101.697),
            ("Leg 5", 110.796),
        ],
    ),
    (
        "ibm_metrics.json",
        &[("Leg 1", 67.236), ("Leg 4", 94.911), ("Leg 5", 134.273)],
    ),
    ("aws_logs.json", &[("Leg 1", 21.714)]),
    ("ibm_logs.json", &[("Leg 1", 68.927)]),
];

pub fn check_golden() -> Check {
    let catalog = LegCatalog::reference();
    let mut compared = 0;
    for (name, want) in GOLDEN_LEGS {
        let raw = fixture(name);
        let env = TelemetryEnvelope::parse_and_validate(&raw).map_err(|e| format!("{name}: {e}"))?;
        if env.to_canonical_bytes() != String::from_utf8_lossy(&raw).trim_end().as_bytes() {
            return Err(format!("{name}: canonical bytes differ from the file"));
        }
        let rec = compute_legs(&catalog.legs, &env).map_err(|e| format!("{name}: {e}"))?;
        for &(leg, ms) in want {
            let got = rec
                .delays
                .get(leg)
                .copied()
                .ok_or_else(|| format!("{name}: no {leg}"))?;
            if (got - ms).abs() > 0.001 {
                return Err(format!("{name} {leg}: {got} ms, expected {ms} ms"));
            }
            compared += 1;
        }
    }
    Ok(format!("{compared} leg values exact to 1 us"))
}

pub fn run(cfg: &ScenarioConfig, inline_analytics: bool) -> RunOutcome {
    run_simulated(cfg, RunOptions { inline_analytics }).unwrap_or_else(|e| panic!("{e}"))
}

fn expected_chain(csp: &str) -> Vec<StageName> {
    let mut chain = vec![StageName::cna()];
    if csp == "AWS" {
        chain.push(StageName::rg_gateway(1));
        chain.push(StageName::rg_forwarder(1));
    }
    chain.extend([
        StageName::ims_gateway(),
        StageName::ims_converter(),
        StageName::ims_archiver(),
    ]);
    chain
}

/// Store contents after a two-region run: counts per kind, one key per
/// "<csp>/<log_id>", complete strictly increasing stamp chains.
pub fn check_archive(out: &RunOutcome, per_kind: usize) -> Check {
    let (m, i) = (out.mutable.len(), out.immutable.len());
    if (m, i) != (per_kind, per_kind) {
        return Err(format!("{m} mutable + {i} immutable, expected {per_kind} + {per_kind}"));
    }
    if out.report.dead_letters != 0 {
        return Err(format!("{} dead letters", out.report.dead_letters));
    }
    let mut keys = BTreeSet::new();
    for obj in out.mutable.snapshot().into_iter().chain(out.immutable.snapshot()) {
        let env = TelemetryEnvelope::parse_and_validate(&obj.payload).map_err(|e| format!("{}: {e}", obj.key))?;
        if obj.key != format!("{}/{}", env.csp, env.log_id) {
            return Err(format!("key {} does not match its envelope", obj.key));
        }
        let stages: Vec<StageName> = env.timestamps.stages().cloned().collect();
        if stages != expected_chain(env.csp.as_str()) {
            return Err(format!("{}: stamp chain {stages:?}", obj.key));
        }
        let times: Vec<Instant> = env.timestamps.iter().map(|(_, t)| *t).collect();
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(format!("{}: stamps not increasing", obj.key));
        }
        keys.insert(obj.key);
    }
    if keys.len() != 2 * per_kind {
        return Err(format!("{} distinct keys", keys.len()));
    }
    Ok(format!(
        "{m} mutable + {i} immutable, unique keys, full chains, 0 dead letters"
    ))
}

pub fn leg_means(records: &[LegDelayRecord]) -> BTreeMap<(String, String), f64> {
    let mut sums: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
    for r in records {
        for (leg, ms) in &r.delays {
            let e = sums.entry((r.csp.to_string(), leg.clone())).or_default();
            e.0 += ms;
            e.1 += 1;
        }
    }
    sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// Default latency, 500 metrics + 500 logs per CNA.
pub fn check_ordering() -> Check {
    let mut cfg = shipped_scenario("two-region.scenario");
    cfg.latency = Default::default();
    for cna in &mut cfg.cnas {
        cna.metrics = 500;
        cna.logs = 500;
    }
    let out = run(&cfg, true);
    if out.leg_records.len() != 2000 {
        return Err(format!("{} envelopes with legs", out.leg_records.len()));
    }
    let means = leg_means(&out.leg_records);
    let mean = |csp: &str, leg: &str| means[&(csp.to_string(), leg.to_string())];
    let (aws1, ibm1) = (mean("AWS", "Leg 1"), mean("IBM", "Leg 1"));
    if ibm1 <= aws1 {
        return Err(format!("IBM Leg 1 {ibm1:.3} ms <= AWS Leg 1 {aws1:.3} ms"));
    }
    let aws3 = mean("AWS", "Leg 3");
    for leg in ["Leg 1", "Leg 2", "Leg 4", "Leg 5"] {
        if mean("AWS", leg) >= aws3 {
            return Err(format!(
                "AWS {leg} {:.3} ms >= AWS Leg 3 {aws3:.3} ms",
                mean("AWS", leg)
            ));
        }
    }
    Ok(format!(
        "IBM Leg 1 {ibm1:.2} > AWS Leg 1 {aws1:.2}; AWS Leg 3 {aws3:.2} ms is the largest AWS leg"
    ))
}

fn observations(values: &[f64]) -> Vec<Observation> {
    values
        .iter()
        .enumerate()
        .map(|(i, &value)| Observation {
            source: "s".into(),
            value,
            at: at_ms(i as i64),
        })
        .collect()
}

fn rule(kind: AssessmentKind) -> AssessmentRule {
    AssessmentRule {
        id: "r".into(),
        target: "t".into(),
        kind,
    }
}

/// Explicit and range rules against direct comparisons, baseline against a
/// brute-force band.
pub fn check_assessments(seeds: u64) -> Result<(), String> {
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..200);
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(0..10) as f64).collect();
        let obs = observations(&xs);
        let observed = |kind| -> Result<Vec<f64>, String> {
            Ok(assess(&rule(kind), &obs)
                .map_err(|e| e.to_string())?
                .iter()
                .map(|a| a.observed)
                .collect())
        };
        let want: Vec<f64> = xs.iter().copied().filter(|&x| x != 5.0).collect();
        if observed(AssessmentKind::Explicit { expected: 5.0 })? != want {
            return Err(format!("seed {seed}: explicit rule"));
        }
        let want: Vec<f64> = xs.iter().copied().filter(|&x| !(2.0..=7.0).contains(&x)).collect();
        if observed(AssessmentKind::Range {
            lo: Some(2.0),
            hi: Some(7.0),
        })? != want
        {
            return Err(format!("seed {seed}: range rule"));
        }

        let d = Normal::new(100.0, 5.0).unwrap();
        let window = rng.random_range(2..100);
        let k = rng.random_range(1.0..4.0);
        let ys: Vec<f64> = (0..window + 100).map(|_| d.sample(&mut rng)).collect();
        let mean = ys[..window].iter().sum::<f64>() / window as f64;
        let var = ys[..window].iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (window - 1) as f64;
        let want: Vec<f64> = ys[window..]
            .iter()
            .copied()
            .filter(|y| (y - mean).abs() > k * var.sqrt())
            .collect();
        let got: Vec<f64> = assess(&rule(AssessmentKind::Baseline { window, k }), &observations(&ys))
            .map_err(|e| e.to_string())?
            .iter()
            .map(|a| a.observed)
            .collect();
        if got != want {
            return Err(format!(
                "seed {seed}: baseline flagged {} of {} expected",
                got.len(),
                want.len()
            ));
        }
    }
    Ok(())
}

pub fn check_correlation(seeds: u64) -> Result<(), String> {
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(0..300);
        let alerts = random_alerts(&mut rng, n);
        let window = Duration::milliseconds(rng.random_range(1..20_000));
        let incidents = correlate_alerts(&alerts, window);
        let total: usize = incidents.iter().map(|i| i.count).sum();
        if total != alerts.len() {
            return Err(format!(
                "seed {seed}: incidents hold {total} of {} alerts",
                alerts.len()
            ));
        }
    }
    Ok(())
}

/// Applies one seeded change to a desired-state document and returns the
/// field it touched.
pub fn mutate(state: &mut DesiredState, rng: &mut ChaCha8Rng) -> &'static str {
    match rng.random_range(0..8) {
        0 if !state.components.is_empty() => {
            let c = state
                .components
                .iter()
                .nth(rng.random_range(0..state.components.len()))
                .unwrap()
                .clone();
            state.components.remove(&c);
            "components"
        }
        1 => {
            state.components.insert(format!("rogue-{}", rng.random::<u16>()));
            "components"
        }
        2 => {
            state.retention_days += rng.random_range(1..1000);
            "retention_days"
        }
        3 if !state.topics.is_empty() => {
            let t = state.topics.iter().next().unwrap().clone();
            state.topics.remove(&t);
            "topics"
        }
        4 => {
            state.topics.insert(format!("shadow-{}", rng.random::<u16>()));
            "topics"
        }
        5 => {
            state.filter_rules.push(FilterRule::equals("CSP", "GCP").unwrap());
            "filter_rules"
        }
        6 if !state.leg_slos.is_empty() => {
            let k = state.leg_slos.keys().next().unwrap().clone();
            *state.leg_slos.get_mut(&k).unwrap() += 1.0;
            "leg_slos"
        }
        _ => {
            state
                .leg_slos
                .insert(format!("IBM Leg {}", rng.random_range(10..99)), 1.0);
            "leg_slos"
        }
    }
}

pub fn check_drift(seeds: u64) -> Result<(), String> {
    let desired = shipped_scenario("two-region.scenario").desired_state();
    if !detect_drift(&desired, &desired.clone()).is_empty() {
        return Err("identity reported drift".into());
    }
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut observed = desired.clone();
        let field = mutate(&mut observed, &mut rng);
        let report = detect_drift(&desired, &observed);
        if !report.items.iter().any(|i| i.field == field) {
            return Err(format!("seed {seed}: {field} mutation not flagged"));
        }
    }
    Ok(())
}

pub fn check_assess_and_drift() -> Check {
    check_assessments(500)?;
    check_correlation(500)?;
    check_drift(500)?;
    Ok(
        "500 seeds each: rule oracles agree, incident counts conserve alerts, every mutation flagged, identity clean"
            .into(),
    )
}

pub fn check_determinism(cfg: &ScenarioConfig) -> Check {
    let (a, b) = (run(cfg, false), run(cfg, false));
    if a.report.to_json() != b.report.to_json() {
        return Err("reports differ".into());
    }
    for (x, y) in [(&a.mutable, &b.mutable), (&a.immutable, &b.immutable)] {
        if x.snapshot() != y.snapshot() {
            return Err(format!("{:?} store contents differ", x.kind()));
        }
    }
    Ok(format!(
        "identical reports and {} archived objects",
        a.report.archived.total
    ))
}
