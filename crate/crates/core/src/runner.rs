//! Discrete-event runner: wires a scenario into live components and drives
//! them to quiescence on a simulated (or wall) clock.
//!
//! Topology per scenario:
//!
//! ```text
//! queued CNA -> rg<k>-gateway -> rg<k> bus "ingress" -> rg<k>-forwarder --+
//! direct CNA ----------------------------------------------------------+--> ims-gateway
//! ims-gateway -> ims bus "converter" -> converter (+ filter, aggregator)
//!             -> ims bus "archiver" -> archiver -> mutable / immutable store
//! ```
//!
//! Each consumer processes one delivery at a time. A forwarder moves on once
//! it has dispatched a message and acknowledges it when the governance
//! gateway answers. Events at equal times are
//! ordered by kind (faults, ticks, emissions, arrivals, processing, pumps)
//! and then by scheduling order.

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::path::Path;
use std::sync::Arc;

use chrono::Duration;
use serde::Serialize;
use thiserror::Error;
use uuid::Uuid;

use crate::analytics::{
    assess, compute_legs, correlate_alerts, export_report, Alert, Incident, LegDelayRecord, Observation, ObservedState,
    ReportFormat,
};
use crate::cna_sim::{emission_time, generate_envelope, CnaConfig, EmissionSchedule, IngestionPath};
use crate::databus::{
    Channel, DataBus, Deduplicator, Delivery, FailoverEvent, PublisherId, SubscriptionId, TOPIC_ARCHIVER,
    TOPIC_CONVERTER, TOPIC_INGRESS,
};
use crate::dead_letter::DeadLetterSink;
use crate::envelope::{DataType, StageName, TelemetryEnvelope};
use crate::gateway::{prepare_forward, Gateway, GatewayConfig, GatewayCounters, GatewayError, RetryPolicy};
use crate::ids::{mix_seed, IdGenerator};
use crate::latency::HopSampler;
use crate::pipeline::{apply_filter, convert, Aggregator, ArchiveError, Archiver, ConvertInput, FieldPath};
use crate::scenario::{self, ConfigError, ScenarioConfig};
use crate::storage::{ObjectStore, StoreKind};
use crate::time::{format_instant, micros_since_epoch, Clock, Instant, SimClock};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    InvalidConfig(#[from] ConfigError),
    #[error("no quiescence by {at}: {pending}")]
    Timeout { at: String, pending: String },
    #[error("event queue drained with work outstanding: {0}")]
    Deadlock(String),
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Run leg analytics, assessments and correlation before returning.
    pub inline_analytics: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct EmittedCounts {
    pub total: u64,
    pub metrics: u64,
    pub logs: u64,
    /// Accepted by the first gateway.
    pub acknowledged: u64,
    /// Gave up after the retry budget.
    pub failed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ArchivedCounts {
    pub total: u64,
    pub mutable: u64,
    pub immutable: u64,
    /// Deliveries of an already archived log_id.
    pub duplicate_deliveries: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct BusCounters {
    pub published: u64,
    pub delivered: u64,
    pub redelivered: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct BatchCounts {
    pub full: u64,
    pub partial: u64,
}

/// Partition of emitted log_ids by fate.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Conservation {
    pub emitted: u64,
    pub archived: u64,
    pub dead_lettered: u64,
    pub filtered_out: u64,
    pub undelivered: u64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub seed: u64,
    pub started_at: String,
    pub finished_at: String,
    pub emitted: EmittedCounts,
    pub gateways: BTreeMap<String, GatewayCounters>,
    pub forwarded: u64,
    pub converted: u64,
    pub filtered_out: u64,
    pub batches: BatchCounts,
    pub archived: ArchivedCounts,
    pub dead_letters: u64,
    pub duplicates_suppressed: u64,
    pub buses: BTreeMap<String, BusCounters>,
    pub failover_events: Vec<FailoverEvent>,
    pub alerts: u64,
    pub incidents: u64,
    pub assessment_errors: Vec<String>,
    pub conservation: Conservation,
    pub archived_keys: Vec<String>,
}

impl RunReport {
    pub fn to_json(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("report serializes");
        out.push(b'\n');
        out
    }
}

#[derive(Debug)]
pub struct RunOutcome {
    pub report: RunReport,
    pub mutable: Arc<ObjectStore>,
    pub immutable: Arc<ObjectStore>,
    pub dead_letters: Arc<DeadLetterSink>,
    pub observed: ObservedState,
    /// Filled when inline analytics ran.
    pub leg_records: Vec<LegDelayRecord>,
    pub alerts: Vec<Alert>,
    pub incidents: Vec<Incident>,
}

impl RunOutcome {
    /// Writes `report.json`, `store/`, `dead-letters.jsonl`,
    /// `observed-state.json` and, after inline analytics, `stats.json`,
    /// `boxplot.csv`, `alerts.json` and `incidents.json`.
    pub fn write_outputs(&self, dir: &Path) -> io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.report.to_json())?;
        let store = dir.join("store");
        self.mutable.persist_to_dir(&store)?;
        self.immutable.persist_to_dir(&store)?;
        std::fs::write(dir.join("dead-letters.jsonl"), self.dead_letters.to_json_lines())?;
        let mut observed = serde_json::to_vec_pretty(&self.observed).expect("state serializes");
        observed.push(b'\n');
        std::fs::write(dir.join("observed-state.json"), observed)?;
        if !self.leg_records.is_empty() {
            for (name, format) in [
                ("stats.json", ReportFormat::StatsJson),
                ("boxplot.csv", ReportFormat::BoxplotCsv),
            ] {
                let bytes = export_report(&self.leg_records, format).expect("records are non-empty");
                std::fs::write(dir.join(name), bytes)?;
            }
            let json = |v: &dyn erased::Json| {
                let mut b = v.to_json();
                b.push(b'\n');
                b
            };
            std::fs::write(dir.join("alerts.json"), json(&self.alerts))?;
            std::fs::write(dir.join("incidents.json"), json(&self.incidents))?;
        }
        Ok(())
    }
}

mod erased {
    pub trait Json {
        fn to_json(&self) -> Vec<u8>;
    }

    impl<T: serde::Serialize> Json for T {
        fn to_json(&self) -> Vec<u8> {
            serde_json::to_vec_pretty(self).expect("serializes")
        }
    }
}

/// Runs on a fresh simulated clock starting at the scenario start.
pub fn run_simulated(cfg: &ScenarioConfig, opts: RunOptions) -> Result<RunOutcome, RunError> {
    let clock = SimClock::starting_at(cfg.start_instant());
    run_scenario(cfg, &clock, opts)
}

pub fn run_scenario(cfg: &ScenarioConfig, clock: &dyn Clock, opts: RunOptions) -> Result<RunOutcome, RunError> {
    cfg.validate()?;
    let mut sim = Sim::wire(cfg, clock);
    sim.run()?;
    Ok(sim.finish(opts))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Target {
    Rg(u32),
    Ims,
}

#[derive(Debug, Clone)]
enum Sender {
    Cna {
        cna: usize,
        log_id: Uuid,
    },
    Forwarder {
        consumer: usize,
        message_id: Uuid,
        epoch: u64,
        log_id: Uuid,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Forwarder(u32),
    Converter,
    Archiver,
}

#[derive(Debug)]
enum Event {
    Fault {
        component: String,
        up: bool,
    },
    Tick {
        bus: usize,
    },
    Emit {
        cna: usize,
        index: usize,
    },
    Arrive {
        target: Target,
        bytes: Arc<Vec<u8>>,
        sender: Sender,
        attempt: u32,
    },
    Process {
        consumer: usize,
        epoch: u64,
        delivery: Box<Delivery>,
    },
    Pump {
        consumer: usize,
    },
}

impl Event {
    fn rank(&self) -> u8 {
        match self {
            Self::Fault { .. } => 0,
            Self::Tick { .. } => 1,
            Self::Emit { .. } => 2,
            Self::Arrive { .. } => 3,
            Self::Process { .. } => 4,
            Self::Pump { .. } => 5,
        }
    }
}

#[derive(Debug, Clone)]
enum Component {
    Gateway(Target),
    Channel(usize, Channel),
    Consumer(usize),
    Store(StoreKind),
    Analytics(usize),
}

struct Consumer {
    role: Role,
    bus: usize,
    sub: SubscriptionId,
    up: bool,
    busy: bool,
    epoch: u64,
    pump_at: Option<i64>,
    latency: HopSampler,
}

struct Emitter {
    cfg: CnaConfig,
    target: Target,
    schedule: Vec<DataType>,
    ids: IdGenerator,
    hop: HopSampler,
}

#[derive(Default)]
struct Fates {
    emitted: BTreeSet<Uuid>,
    archived: BTreeSet<Uuid>,
    dead: BTreeSet<Uuid>,
    filtered: BTreeSet<Uuid>,
    failed: BTreeSet<Uuid>,
}

impl Fates {
    fn conservation(&self) -> Conservation {
        let parts = [&self.archived, &self.dead, &self.filtered, &self.failed];
        let total: usize = parts.iter().map(|p| p.len()).sum();
        let union: BTreeSet<&Uuid> = parts.iter().flat_map(|p| p.iter()).collect();
        let holds = total == union.len()
            && union.len() == self.emitted.len()
            && union.iter().all(|id| self.emitted.contains(id));
        Conservation {
            emitted: self.emitted.len() as u64,
            archived: self.archived.len() as u64,
            dead_lettered: self.dead.len() as u64,
            filtered_out: self.filtered.len() as u64,
            undelivered: self.failed.len() as u64,
            holds,
        }
    }
}

struct Sim<'a> {
    cfg: &'a ScenarioConfig,
    clock: &'a dyn Clock,
    start: Instant,
    origin_us: i64,
    last_us: i64,
    deadline_us: i64,
    queue: BTreeMap<(i64, u8, u64), Event>,
    seq: u64,
    work: usize,
    beat_us: i64,
    retry_us: i64,
    retry: RetryPolicy,

    /// `rg_count` resource-group buses followed by the ingestion bus.
    buses: Vec<Arc<DataBus>>,
    rg_gateways: Vec<Gateway>,
    ims_gateway: Gateway,
    cross_rg: Vec<HopSampler>,
    consumers: Vec<Consumer>,
    emitters: Vec<Emitter>,
    components: BTreeMap<String, Component>,
    down: BTreeSet<String>,
    da_up: Vec<bool>,
    alerts_sub: SubscriptionId,
    incidents_sub: SubscriptionId,

    mutable: Arc<ObjectStore>,
    immutable: Arc<ObjectStore>,
    archiver: Archiver,
    dead_letters: Arc<DeadLetterSink>,
    converter_ids: IdGenerator,
    dedup: Deduplicator<Uuid>,
    aggregator: Aggregator,

    fates: Fates,
    counts: EmittedCounts,
    forwarded: u64,
    converted: u64,
    batches: BatchCounts,
    archived: ArchivedCounts,
    duplicates_suppressed: u64,
}

fn us(d: Duration) -> i64 {
    d.num_microseconds().expect("duration fits in microseconds")
}

impl<'a> Sim<'a> {
    fn wire(cfg: &'a ScenarioConfig, clock: &'a dyn Clock) -> Self {
        let start = cfg.start_instant();
        let origin_us = micros_since_epoch(&start);
        let seed = cfg.seed;
        let bus_cfg = cfg.bus.to_config();
        let n = cfg.rg_count;
        let dead_letters = Arc::new(DeadLetterSink::new());
        let mut components = BTreeMap::new();

        let mut buses = Vec::new();
        for k in 1..=n {
            buses.push(Arc::new(DataBus::new(
                format!("rg{k}-bus"),
                bus_cfg,
                mix_seed(seed, 1000 + k as u64),
                start,
            )));
            components.insert(
                scenario::rg_primary_bus(k),
                Component::Channel(k as usize - 1, Channel::Primary),
            );
            components.insert(
                scenario::rg_auxiliary_bus(k),
                Component::Channel(k as usize - 1, Channel::Auxiliary),
            );
        }
        let ims = buses.len();
        buses.push(Arc::new(DataBus::new("ims-bus", bus_cfg, mix_seed(seed, 2000), start)));
        components.insert(
            scenario::IMS_PRIMARY_BUS.into(),
            Component::Channel(ims, Channel::Primary),
        );
        components.insert(
            scenario::IMS_AUXILIARY_BUS.into(),
            Component::Channel(ims, Channel::Auxiliary),
        );

        let rg_gateways = (1..=n)
            .map(|k| {
                components.insert(scenario::rg_gateway(k), Component::Gateway(Target::Rg(k)));
                Gateway::new(
                    GatewayConfig {
                        stage_name: StageName::rg_gateway(k),
                        rg_id: scenario::rg_gateway(k),
                        topic: TOPIC_INGRESS.into(),
                        publisher: PublisherId(scenario::rg_gateway(k)),
                    },
                    buses[k as usize - 1].clone(),
                    dead_letters.clone(),
                )
            })
            .collect();
        components.insert(scenario::IMS_GATEWAY.into(), Component::Gateway(Target::Ims));
        let ims_gateway = Gateway::new(
            GatewayConfig {
                stage_name: StageName::ims_gateway(),
                rg_id: scenario::IMS_GATEWAY.into(),
                topic: TOPIC_CONVERTER.into(),
                publisher: PublisherId(scenario::IMS_GATEWAY.into()),
            },
            buses[ims].clone(),
            dead_letters.clone(),
        );

        let lat = &cfg.latency;
        let mut consumers = Vec::new();
        let mut add = |role: Role, name: String, bus: usize, topic: &str, sampler: HopSampler| {
            let sub = buses[bus].subscribe(&name, topic);
            components.insert(name, Component::Consumer(consumers.len()));
            consumers.push(Consumer {
                role,
                bus,
                sub,
                up: true,
                busy: false,
                epoch: 0,
                pump_at: None,
                latency: sampler,
            });
        };
        for k in 1..=n {
            let sampler = HopSampler::new(lat.queue_dwell, mix_seed(seed, 3000 + k as u64));
            add(
                Role::Forwarder(k),
                scenario::rg_forwarder(k),
                k as usize - 1,
                TOPIC_INGRESS,
                sampler,
            );
        }
        add(
            Role::Converter,
            scenario::CONVERTER.into(),
            ims,
            TOPIC_CONVERTER,
            HopSampler::new(lat.converter, mix_seed(seed, 4000)),
        );
        add(
            Role::Archiver,
            scenario::ARCHIVER.into(),
            ims,
            TOPIC_ARCHIVER,
            HopSampler::new(lat.archiver, mix_seed(seed, 4001)),
        );
        let alerts_sub = buses[ims].subscribe("da-correlator", &cfg.analytics.alerts_topic);
        let incidents_sub = buses[ims].subscribe("da-incident-log", &cfg.analytics.incidents_topic);
        for j in 1..=cfg.da_count {
            components.insert(scenario::da_analytics(j), Component::Analytics(j as usize - 1));
        }

        let cross_rg = (1..=n)
            .map(|k| HopSampler::new(lat.cross_rg, mix_seed(seed, 5000 + k as u64)))
            .collect();
        let emitters = cfg
            .cnas
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let c = cfg.cna_config(i);
                let (target, dist) = match spec.path {
                    IngestionPath::Queued => (Target::Rg(spec.rg.expect("validated")), lat.intra_region),
                    IngestionPath::Direct => (Target::Ims, lat.inter_region),
                };
                Emitter {
                    schedule: EmissionSchedule::new(&c).collect(),
                    ids: IdGenerator::seeded(mix_seed(c.seed, 0x1d)),
                    hop: HopSampler::new(dist, mix_seed(c.seed, 0x1a7)),
                    cfg: c,
                    target,
                }
            })
            .collect();

        let mutable = Arc::new(ObjectStore::mutable());
        let immutable = Arc::new(ObjectStore::immutable(cfg.retention_policy()));
        components.insert(scenario::MUTABLE_STORE.into(), Component::Store(StoreKind::Mutable));
        components.insert(scenario::IMMUTABLE_STORE.into(), Component::Store(StoreKind::Immutable));

        let mut sim = Self {
            cfg,
            clock,
            start,
            origin_us,
            last_us: origin_us,
            deadline_us: 0,
            queue: BTreeMap::new(),
            seq: 0,
            work: 0,
            beat_us: cfg.bus.beat_interval_ms as i64 * 1000,
            retry_us: cfg.runner.retry_interval_ms as i64 * 1000,
            retry: RetryPolicy::default(),
            buses,
            rg_gateways,
            ims_gateway,
            cross_rg,
            consumers,
            emitters,
            components,
            down: BTreeSet::new(),
            da_up: vec![true; cfg.da_count as usize],
            alerts_sub,
            incidents_sub,
            archiver: Archiver::new(mutable.clone(), immutable.clone()),
            mutable,
            immutable,
            dead_letters,
            converter_ids: IdGenerator::seeded(mix_seed(seed, 6000)),
            dedup: Deduplicator::new(),
            aggregator: Aggregator::new(cfg.aggregation_window()),
            fates: Fates::default(),
            counts: EmittedCounts::default(),
            forwarded: 0,
            converted: 0,
            batches: BatchCounts::default(),
            archived: ArchivedCounts::default(),
            duplicates_suppressed: 0,
        };
        sim.seed_events();
        sim
    }

    fn seed_events(&mut self) {
        let mut horizon = self.origin_us;
        for i in 0..self.emitters.len() {
            let e = &self.emitters[i];
            if e.schedule.is_empty() {
                continue;
            }
            let last = emission_time(self.start, e.cfg.cadence, e.schedule.len() as u64 - 1);
            horizon = horizon.max(micros_since_epoch(&last));
            self.schedule(self.origin_us, Event::Emit { cna: i, index: 0 });
        }
        for f in self.cfg.faults.clone() {
            let down = self.origin_us + f.down_at_ms as i64 * 1000;
            self.schedule(
                down,
                Event::Fault {
                    component: f.component.clone(),
                    up: false,
                },
            );
            horizon = horizon.max(down);
            if let Some(up_ms) = f.up_at_ms {
                let up = self.origin_us + up_ms as i64 * 1000;
                self.schedule(
                    up,
                    Event::Fault {
                        component: f.component,
                        up: true,
                    },
                );
                horizon = horizon.max(up);
            }
        }
        self.deadline_us = horizon + self.cfg.runner.quiesce_budget_ms as i64 * 1000;
        for bus in 0..self.buses.len() {
            self.schedule(self.origin_us + self.beat_us, Event::Tick { bus });
        }
    }

    fn schedule(&mut self, at_us: i64, event: Event) {
        if !matches!(event, Event::Tick { .. }) {
            self.work += 1;
        }
        self.seq += 1;
        self.queue.insert((at_us, event.rank(), self.seq), event);
    }

    fn schedule_pump(&mut self, consumer: usize, at_us: i64) {
        if self.consumers[consumer]
            .pump_at
            .is_some_and(|p| p <= at_us && p >= self.last_us)
        {
            return;
        }
        self.consumers[consumer].pump_at = Some(at_us);
        self.schedule(at_us, Event::Pump { consumer });
    }

    fn pump_bus(&mut self, bus: usize, at_us: i64) {
        for c in 0..self.consumers.len() {
            if self.consumers[c].bus == bus {
                self.schedule_pump(c, at_us);
            }
        }
    }

    fn quiescent(&self) -> bool {
        self.work == 0 && self.consumers.iter().all(|c| !c.busy) && self.buses.iter().all(|b| b.is_idle())
    }

    fn pending(&self) -> String {
        let mut parts = vec![format!("{} scheduled events", self.work)];
        for c in &self.consumers {
            let bus = &self.buses[c.bus];
            let (q, f) = (bus.queued_len(c.sub), bus.inflight_len(c.sub));
            if q + f > 0 || c.busy {
                let name = bus.subscriber_of(c.sub).map(|(s, _)| s).unwrap_or_default();
                parts.push(format!(
                    "{name}: {q} queued, {f} in flight{}",
                    if c.up { "" } else { " (down)" }
                ));
            }
        }
        parts.join("; ")
    }

    fn run(&mut self) -> Result<(), RunError> {
        while !self.quiescent() {
            let Some(((at_us, _, _), event)) = self.queue.pop_first() else {
                return Err(RunError::Deadlock(self.pending()));
            };
            if at_us > self.deadline_us {
                return Err(RunError::Timeout {
                    at: format_instant(&crate::time::from_micros(at_us)),
                    pending: self.pending(),
                });
            }
            if !matches!(event, Event::Tick { .. }) {
                self.work -= 1;
            }
            self.last_us = at_us;
            self.clock.advance_to(crate::time::from_micros(at_us));
            let now = self.clock.now();
            match event {
                Event::Fault { component, up } => self.on_fault(&component, up, at_us),
                Event::Tick { bus } => self.on_tick(bus, now, at_us),
                Event::Emit { cna, index } => self.on_emit(cna, index, now, at_us),
                Event::Arrive {
                    target,
                    bytes,
                    sender,
                    attempt,
                } => self.on_arrive(target, bytes, sender, attempt, now, at_us),
                Event::Process {
                    consumer,
                    epoch,
                    delivery,
                } => self.on_process(consumer, epoch, *delivery, now, at_us),
                Event::Pump { consumer } => self.on_pump(consumer, at_us),
            }
        }
        Ok(())
    }

    fn on_fault(&mut self, component: &str, up: bool, at_us: i64) {
        if up {
            self.down.remove(component);
        } else {
            self.down.insert(component.to_string());
        }
        match self.components.get(component).cloned().expect("validated component") {
            Component::Gateway(Target::Ims) => self.ims_gateway.set_available(up),
            Component::Gateway(Target::Rg(k)) => self.rg_gateways[k as usize - 1].set_available(up),
            Component::Channel(bus, ch) => {
                self.buses[bus].set_channel_up(ch, up);
                if up {
                    self.pump_bus(bus, at_us);
                }
            }
            Component::Consumer(c) => {
                let consumer = &mut self.consumers[c];
                consumer.up = up;
                if up {
                    self.schedule_pump(c, at_us);
                } else {
                    consumer.busy = false;
                    consumer.epoch += 1;
                    let _ = self.buses[consumer.bus].crash(consumer.sub);
                }
            }
            Component::Store(kind) => self.archiver.store(kind).set_available(up),
            Component::Analytics(j) => self.da_up[j] = up,
        }
    }

    fn on_tick(&mut self, bus: usize, now: Instant, at_us: i64) {
        self.buses[bus].tick(now);
        for c in 0..self.consumers.len() {
            let consumer = &self.consumers[c];
            if consumer.bus == bus && consumer.up && !consumer.busy && self.buses[bus].has_deliverable(consumer.sub) {
                self.schedule_pump(c, at_us);
            }
        }
        self.schedule(at_us + self.beat_us, Event::Tick { bus });
    }

    fn on_emit(&mut self, cna: usize, index: usize, now: Instant, at_us: i64) {
        let e = &mut self.emitters[cna];
        let kind = e.schedule[index];
        let env = generate_envelope(&e.cfg, kind, now, &mut e.ids).expect("emitters produce metrics and logs");
        let hop = us(e.hop.sample());
        let target = e.target;
        let next = (index + 1 < e.schedule.len())
            .then(|| micros_since_epoch(&emission_time(self.start, e.cfg.cadence, index as u64 + 1)));
        self.fates.emitted.insert(env.log_id);
        self.counts.total += 1;
        match kind {
            DataType::Metrics => self.counts.metrics += 1,
            _ => self.counts.logs += 1,
        }
        let sender = Sender::Cna {
            cna,
            log_id: env.log_id,
        };
        let bytes = Arc::new(env.to_canonical_bytes());
        self.schedule(
            at_us + hop,
            Event::Arrive {
                target,
                bytes,
                sender,
                attempt: 0,
            },
        );
        if let Some(next_us) = next {
            self.schedule(next_us, Event::Emit { cna, index: index + 1 });
        }
    }

    fn on_arrive(
        &mut self,
        target: Target,
        bytes: Arc<Vec<u8>>,
        sender: Sender,
        attempt: u32,
        now: Instant,
        at_us: i64,
    ) {
        let (gateway, bus) = match target {
            Target::Ims => (&self.ims_gateway, self.buses.len() - 1),
            Target::Rg(k) => (&self.rg_gateways[k as usize - 1], k as usize - 1),
        };
        let outcome = gateway.ingest_push(&bytes, now);
        if outcome.is_ok() {
            self.pump_bus(bus, at_us);
        }
        match sender {
            Sender::Cna { cna, log_id } => match outcome {
                Ok(_) => self.counts.acknowledged += 1,
                Err(GatewayError::Rejected(_)) => {
                    self.fates.dead.insert(log_id);
                }
                Err(_) if attempt + 1 < self.retry.attempts => {
                    let backoff = us(self.retry.backoff(attempt + 1));
                    let hop = us(self.emitters[cna].hop.sample());
                    self.schedule(
                        at_us + backoff + hop,
                        Event::Arrive {
                            target,
                            bytes,
                            sender,
                            attempt: attempt + 1,
                        },
                    );
                }
                Err(_) => {
                    self.counts.failed += 1;
                    self.fates.failed.insert(log_id);
                }
            },
            Sender::Forwarder {
                consumer,
                message_id,
                epoch,
                log_id,
            } => {
                let c = &self.consumers[consumer];
                if c.epoch != epoch {
                    // the forwarder crashed meanwhile; its delivery was requeued
                    return;
                }
                let (fwd_bus, sub) = (self.buses[c.bus].clone(), c.sub);
                let resume = match outcome {
                    Ok(_) => {
                        self.forwarded += 1;
                        let _ = fwd_bus.ack(sub, message_id, now);
                        at_us
                    }
                    Err(GatewayError::Rejected(_)) => {
                        self.fates.dead.insert(log_id);
                        let _ = fwd_bus.ack(sub, message_id, now);
                        at_us
                    }
                    Err(_) => {
                        let _ = fwd_bus.nack(sub, message_id);
                        at_us + self.retry_us
                    }
                };
                self.schedule_pump(consumer, resume);
            }
        }
    }

    fn on_pump(&mut self, consumer: usize, at_us: i64) {
        let c = &mut self.consumers[consumer];
        if c.pump_at == Some(at_us) {
            c.pump_at = None;
        }
        if !c.up || c.busy {
            return;
        }
        let Ok(Some(delivery)) = self.buses[c.bus].poll(c.sub) else {
            return;
        };
        c.busy = true;
        let epoch = c.epoch;
        let delay = us(c.latency.sample());
        self.schedule(
            at_us + delay,
            Event::Process {
                consumer,
                epoch,
                delivery: Box::new(delivery),
            },
        );
    }

    fn dead_letter(&mut self, reason: String, env: Option<&TelemetryEnvelope>, raw: &[u8], now: Instant) {
        self.dead_letters.record(reason, raw, now);
        if let Some(env) = env {
            self.fates.dead.insert(env.log_id);
        }
    }

    fn on_process(&mut self, consumer: usize, epoch: u64, delivery: Delivery, now: Instant, at_us: i64) {
        let c = &self.consumers[consumer];
        if c.epoch != epoch || !c.up {
            return;
        }
        let (role, bus, sub) = (c.role, self.buses[c.bus].clone(), c.sub);
        let message_id = delivery.message.message_id;
        let env = match bus.resolve(&delivery.message) {
            Ok(env) => env,
            Err(e) => {
                self.dead_letter(format!("{role:?}: {e}"), None, message_id.as_bytes(), now);
                let _ = bus.ack(sub, message_id, now);
                return self.release(consumer, at_us);
            }
        };
        match role {
            Role::Forwarder(k) => match prepare_forward(&StageName::rg_forwarder(k), &env, now) {
                Ok(bytes) => {
                    let hop = us(self.cross_rg[k as usize - 1].sample());
                    let sender = Sender::Forwarder {
                        consumer,
                        message_id,
                        epoch,
                        log_id: env.log_id,
                    };
                    // the delivery stays in flight until the governance gateway answers
                    self.schedule(
                        at_us + hop,
                        Event::Arrive {
                            target: Target::Ims,
                            bytes: Arc::new(bytes),
                            sender,
                            attempt: 0,
                        },
                    );
                }
                Err(e) => {
                    self.dead_letter(
                        format!("rg{k}-forwarder: {e}"),
                        Some(&env),
                        &env.to_compact_bytes(),
                        now,
                    );
                    let _ = bus.ack(sub, message_id, now);
                }
            },
            Role::Converter => {
                if self.dedup.contains(&message_id) {
                    self.dedup.admit(message_id);
                    self.duplicates_suppressed += 1;
                    let _ = bus.ack(sub, message_id, now);
                    return self.release(consumer, at_us);
                }
                match convert(ConvertInput::Envelope(env.clone()), now, &mut self.converter_ids) {
                    Err(e) => {
                        self.dead_letter(format!("converter: {e}"), Some(&env), &env.to_compact_bytes(), now);
                        self.dedup.admit(message_id);
                        let _ = bus.ack(sub, message_id, now);
                    }
                    Ok(converted) if !apply_filter(&self.cfg.filters, &converted) => {
                        self.fates.filtered.insert(converted.log_id);
                        self.converted += 1;
                        self.dedup.admit(message_id);
                        let _ = bus.ack(sub, message_id, now);
                    }
                    Ok(converted) => {
                        let publisher = PublisherId(scenario::CONVERTER.into());
                        if bus.publish(&publisher, TOPIC_ARCHIVER, &converted, now).is_err() {
                            let _ = bus.nack(sub, message_id);
                            return self.release(consumer, at_us + self.retry_us);
                        }
                        self.converted += 1;
                        self.dedup.admit(message_id);
                        if self.aggregator.push(converted).is_some() {
                            self.batches.full += 1;
                        }
                        let _ = bus.ack(sub, message_id, now);
                        let ims = self.buses.len() - 1;
                        self.pump_bus(ims, at_us);
                    }
                }
            }
            Role::Archiver => match self.archiver.archive(&env, now) {
                Ok(done) => {
                    if done.created {
                        self.fates.archived.insert(env.log_id);
                        self.archived.total += 1;
                        match done.object.kind {
                            StoreKind::Mutable => self.archived.mutable += 1,
                            StoreKind::Immutable => self.archived.immutable += 1,
                        }
                    } else {
                        self.archived.duplicate_deliveries += 1;
                    }
                    let _ = bus.ack(sub, message_id, now);
                }
                Err(e @ ArchiveError::Storage(_)) if e.is_retryable() => {
                    let _ = bus.nack(sub, message_id);
                    return self.release(consumer, at_us + self.retry_us);
                }
                Err(e) => {
                    self.dead_letter(format!("archiver: {e}"), Some(&env), &env.to_compact_bytes(), now);
                    let _ = bus.ack(sub, message_id, now);
                }
            },
        }
        self.release(consumer, at_us);
    }

    fn release(&mut self, consumer: usize, resume_us: i64) {
        self.consumers[consumer].busy = false;
        self.schedule_pump(consumer, resume_us);
    }

    fn finish(mut self, opts: RunOptions) -> RunOutcome {
        let now = self.clock.now();
        for batch in std::mem::take(&mut self.aggregator).close() {
            if batch.partial {
                self.batches.partial += 1;
            }
        }
        let (leg_records, alerts, incidents, assessment_errors) = if opts.inline_analytics {
            self.analytics(now)
        } else {
            Default::default()
        };

        let mut gateways = BTreeMap::new();
        for g in self.rg_gateways.iter().chain([&self.ims_gateway]) {
            gateways.insert(g.config().rg_id.clone(), g.counters());
        }
        let mut buses = BTreeMap::new();
        let mut failover_events = Vec::new();
        let mut topics = BTreeSet::new();
        for b in &self.buses {
            let (published, delivered, redelivered) = b.counters();
            buses.insert(
                b.name().to_string(),
                BusCounters {
                    published,
                    delivered,
                    redelivered,
                },
            );
            failover_events.extend(b.failover_events());
            topics.extend(b.topics());
        }
        let mut archived_keys: Vec<String> = self.mutable.keys();
        archived_keys.extend(self.immutable.keys());
        archived_keys.sort();

        let report = RunReport {
            seed: self.cfg.seed,
            started_at: format_instant(&self.start),
            finished_at: format_instant(&now),
            emitted: self.counts.clone(),
            gateways,
            forwarded: self.forwarded,
            converted: self.converted,
            filtered_out: self.fates.filtered.len() as u64,
            batches: self.batches.clone(),
            archived: self.archived.clone(),
            dead_letters: self.dead_letters.len() as u64,
            duplicates_suppressed: self.duplicates_suppressed,
            buses,
            failover_events,
            alerts: alerts.len() as u64,
            incidents: incidents.len() as u64,
            assessment_errors,
            conservation: self.fates.conservation(),
            archived_keys,
        };
        let observed = ObservedState {
            components: self
                .components
                .keys()
                .filter(|c| !self.down.contains(*c))
                .cloned()
                .collect(),
            retention_days: self.immutable.retention().map_or(0, |r| r.period_days()),
            topics,
            filter_rules: self.cfg.filters.clone(),
            leg_slos: self.cfg.slo.clone(),
        };
        RunOutcome {
            report,
            mutable: self.mutable,
            immutable: self.immutable,
            dead_letters: self.dead_letters,
            observed,
            leg_records,
            alerts,
            incidents,
        }
    }

    /// Post-quiescence analytics pass: legs over every archived envelope,
    /// assessments spread over the analytics groups, alerts and incidents
    /// routed through the bus.
    fn analytics(&mut self, now: Instant) -> (Vec<LegDelayRecord>, Vec<Alert>, Vec<Incident>, Vec<String>) {
        let catalog = self.cfg.leg_catalog();
        let mut envelopes: Vec<TelemetryEnvelope> = self
            .mutable
            .snapshot()
            .into_iter()
            .chain(self.immutable.snapshot())
            .filter_map(|o| TelemetryEnvelope::parse_and_validate(&o.payload).ok())
            .collect();
        envelopes.sort_by_key(|e| (e.timestamps.get(StageName::CNA), e.log_id));
        let mut errors = Vec::new();
        let mut records = Vec::new();
        for env in &envelopes {
            match compute_legs(&catalog.legs, env) {
                Ok(r) if !r.delays.is_empty() => records.push(r),
                Ok(_) => {}
                Err(e) => errors.push(format!("{}: {e}", env.canonical_key())),
            }
        }

        let ims = self.buses.len() - 1;
        let bus = self.buses[ims].clone();
        let mut ids = IdGenerator::seeded(mix_seed(self.cfg.seed, 0xda));
        let mut raised = Vec::new();
        for (i, rule) in self.cfg.assessments.iter().enumerate() {
            let j = i % self.da_up.len();
            if !self.da_up[j] {
                errors.push(format!("{}: {} is down", rule.id, scenario::da_analytics(j as u32 + 1)));
                continue;
            }
            let observations = observations_for(&rule.target, &envelopes, &records);
            match assess(rule, &observations) {
                Ok(alerts) => raised.extend(alerts.into_iter().map(|a| (j, a))),
                Err(e) => errors.push(format!("{}: {e}", rule.id)),
            }
        }
        for (j, alert) in &raised {
            let publisher = PublisherId(scenario::da_analytics(*j as u32 + 1));
            if let Err(e) = bus.publish(
                &publisher,
                &self.cfg.analytics.alerts_topic,
                &alert.to_envelope(&mut ids),
                now,
            ) {
                errors.push(format!("alert {}: {e}", alert.rule_id));
            }
        }
        let mut alerts = Vec::new();
        while let Ok(Some(d)) = bus.poll(self.alerts_sub) {
            if let Some(a) = bus.resolve(&d.message).ok().as_ref().and_then(Alert::from_envelope) {
                alerts.push(a);
            }
            let _ = bus.ack(self.alerts_sub, d.message.message_id, now);
        }
        let window = Duration::milliseconds(self.cfg.analytics.correlation_window_ms as i64);
        let incidents = correlate_alerts(&alerts, window);
        let correlator = PublisherId("da-correlator".into());
        for inc in &incidents {
            if let Err(e) = bus.publish(
                &correlator,
                &self.cfg.analytics.incidents_topic,
                &inc.to_envelope(&mut ids),
                now,
            ) {
                errors.push(format!("incident: {e}"));
            }
        }
        while let Ok(Some(d)) = bus.poll(self.incidents_sub) {
            let _ = bus.ack(self.incidents_sub, d.message.message_id, now);
        }
        (records, alerts, incidents, errors)
    }
}

/// Values a rule target refers to, in emission order. Leg targets read the
/// computed delays; `governance_data.<key>` targets read numeric payload values.
fn observations_for(target: &str, envelopes: &[TelemetryEnvelope], records: &[LegDelayRecord]) -> Vec<Observation> {
    let at_of: BTreeMap<Uuid, Instant> = envelopes
        .iter()
        .filter_map(|e| Some((e.log_id, e.timestamps.get(StageName::CNA)?)))
        .collect();
    if let Ok(FieldPath::GovernanceData(key)) = target.parse::<FieldPath>() {
        return envelopes
            .iter()
            .filter_map(|e| {
                Some(Observation {
                    source: format!("{} {target}", e.csp),
                    value: e.governance_data.get(&key)?.as_f64()?,
                    at: at_of.get(&e.log_id).copied()?,
                })
            })
            .collect();
    }
    records
        .iter()
        .filter_map(|r| {
            let (csp, leg) = target.split_once(' ')?;
            if csp != r.csp.as_str() {
                return None;
            }
            Some(Observation {
                source: target.to_string(),
                value: *r.delays.get(leg)?,
                at: at_of.get(&r.log_id).copied()?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::LatencyConfig;

    fn small(extra: &str) -> ScenarioConfig {
        ScenarioConfig::parse(&format!(
            r#"
seed = 42

[[cna]]
csp = "AWS"
path = "queued"
rg = 1
metrics = 10
logs = 10
cadence_ms = 50

[[cna]]
csp = "IBM"
path = "direct"
metrics = 10
logs = 10
cadence_ms = 50
{extra}"#
        ))
        .unwrap()
    }

    fn run(cfg: &ScenarioConfig) -> RunOutcome {
        run_simulated(cfg, RunOptions::default()).unwrap()
    }

    #[test]
    fn everything_reaches_storage() {
        let out = run(&small(""));
        let r = &out.report;
        assert_eq!(r.emitted.total, 40);
        assert_eq!(r.emitted.acknowledged, 40);
        assert_eq!(r.forwarded, 20);
        assert_eq!(r.archived.total, 40);
        assert_eq!(r.archived.mutable, 20);
        assert_eq!(r.archived.immutable, 20);
        assert_eq!(out.mutable.len() + out.immutable.len(), 40);
        assert_eq!(r.dead_letters, 0);
        assert!(r.conservation.holds);
        assert_eq!(r.archived_keys.len(), 40);
    }

    #[test]
    fn archived_envelopes_carry_every_stage() {
        let out = run(&small(""));
        for obj in out.mutable.snapshot().into_iter().chain(out.immutable.snapshot()) {
            let env = TelemetryEnvelope::parse_and_validate(&obj.payload).unwrap();
            let want = if env.csp.as_str() == "AWS" { 6 } else { 4 };
            assert_eq!(env.timestamps.len(), want, "{}", env.canonical_key());
        }
    }

    #[test]
    fn fixed_latencies_give_exact_legs() {
        let mut cfg = small("");
        cfg.latency = LatencyConfig::fixed(10.0);
        let out = run_simulated(&cfg, RunOptions { inline_analytics: true }).unwrap();
        assert_eq!(out.leg_records.len(), 40);
        for rec in &out.leg_records {
            for (leg, ms) in &rec.delays {
                // queue dwell adds to the forwarder leg only while the forwarder is idle
                assert!(*ms >= 10.0, "{} {leg} {ms}", rec.csp);
            }
        }
    }

    #[test]
    fn empty_scenario_is_quiet() {
        let out = run(&ScenarioConfig::default());
        assert_eq!(out.report.emitted.total, 0);
        assert!(out.report.conservation.holds);
    }

    #[test]
    fn same_seed_same_report() {
        let cfg = small("");
        assert_eq!(run(&cfg).report, run(&cfg).report);
        let mut other = cfg.clone();
        other.seed = 43;
        assert_ne!(run(&cfg).report.archived_keys, run(&other).report.archived_keys);
    }

    #[test]
    fn primary_bus_outage_fails_over() {
        let baseline = run(&small(""));
        let out = run(&small(
            "\n[[fault]]\ncomponent = \"ims-primary-bus\"\ndown_at_ms = 200\nup_at_ms = 5000\n",
        ));
        assert!(!out.report.failover_events.is_empty());
        assert_eq!(out.report.archived.total, baseline.report.archived.total);
        assert!(out.report.conservation.holds);
    }

    #[test]
    fn archiver_crash_loses_nothing() {
        let out = run(&small(
            "\n[[fault]]\ncomponent = \"archiver\"\ndown_at_ms = 300\nup_at_ms = 2000\n",
        ));
        assert_eq!(out.report.archived.total, 40);
        assert!(out.report.conservation.holds);
    }

    #[test]
    fn gateway_outage_exhausts_retries() {
        let out = run(&small(
            "\n[[fault]]\ncomponent = \"ims-gateway\"\ndown_at_ms = 0\nup_at_ms = 100000\n",
        ));
        // direct CNAs give up; queued traffic waits in its resource group
        assert_eq!(out.report.emitted.failed, 20);
        assert_eq!(out.report.archived.total, 20);
        assert!(out.report.conservation.holds);
    }

    #[test]
    fn store_down_forever_times_out() {
        let mut cfg = small("\n[[fault]]\ncomponent = \"mutable-store\"\ndown_at_ms = 0\n");
        cfg.runner.quiesce_budget_ms = 10_000;
        match run_simulated(&cfg, RunOptions::default()) {
            Err(RunError::Timeout { pending, .. }) => assert!(pending.contains("archiver"), "{pending}"),
            other => panic!("expected timeout, got {other:?}"),
        }
    }

    #[test]
    fn filters_drop_but_conserve() {
        let out = run(&small(
            "\n[[filter]]\nfield = \"CSP\"\nop = \"equals\"\nvalue = \"AWS\"\n",
        ));
        assert_eq!(out.report.archived.total, 20);
        assert_eq!(out.report.filtered_out, 20);
        assert!(out.report.conservation.holds);
    }

    #[test]
    fn observed_state_matches_desired_without_faults() {
        let cfg = small("");
        let out = run(&cfg);
        assert!(crate::analytics::detect_drift(&cfg.desired_state(), &out.observed).is_empty());
    }

    #[test]
    fn outputs_written() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_simulated(&small(""), RunOptions { inline_analytics: true }).unwrap();
        out.write_outputs(dir.path()).unwrap();
        for f in [
            "report.json",
            "dead-letters.jsonl",
            "observed-state.json",
            "stats.json",
            "boxplot.csv",
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        assert!(dir.path().join("store/mutable/AWS").is_dir());
    }
}
