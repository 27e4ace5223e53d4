//! Deterministic discrete-event simulator.
//!
//! Mobility is drawn first and does not depend on the protocol, so the whole
//! agenda (broadcasts, flushes, diagnoses, reconciliations, replays) is known
//! up front and processed in `(time, kind, entity, sequence)` order. Time is
//! kept in integer milliseconds.
//!
//! Stationary broadcast ticks that share a slot are processed as one sample:
//! totems coalesce identical (slot, beacon) pairs anyway, and the eavesdropper
//! sees the same payload at the same place. Moving ticks are processed one by
//! one.

pub mod config;
pub mod ground_truth;
pub mod mobility;
pub mod output;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::adversary::{
    infer_health_status, recover_trajectory, replay_inject, AttackParams, EavesdropLog,
    HealthInference, HexPayload, TargetPayloads, TrajectoryPoint,
};
use crate::authority::{publish, reconcile_decentralized, AuthorityError, AuthorityStore, PublishedList};
use crate::beacon::{Beacon, DeviceId, DeviceKey, SlotIndex};
use crate::device::{DeviceError, DeviceState, ExposureReport, PositiveDisclosure, Uplink};
use crate::radio::{in_range, Payload, Position, Transmission};
use crate::secure_channel::{establish_session, ChannelError, Keypair, Session, TotemDirectory};
use crate::totem::{BeaconRecord, ProtocolMode, Receipt, TotemError, TotemId, TotemState};

pub use config::{ConfigError, SimConfig};
pub use ground_truth::{GroundTruth, Place, Timing};
use mobility::{leg_samples, MobilityError, MobilityModel, Sample};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid config: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Mobility(#[from] MobilityError),
    #[error(transparent)]
    Totem(#[from] TotemError),
    #[error(transparent)]
    Authority(#[from] AuthorityError),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

/// One reconciliation round and what it published.
#[derive(Debug, Clone, PartialEq)]
pub struct Publication {
    pub diagnosed: DeviceId,
    pub diagnosis_time_s: f64,
    pub disclosure: PositiveDisclosure,
    pub list: PublishedList,
    pub shuffle_seed: u64,
    /// The published file, byte for byte.
    pub bytes: Vec<u8>,
    pub unreachable: Vec<TotemId>,
}

impl Publication {
    /// Beacons in the order they appear in the published file.
    pub fn order(&self) -> Vec<Beacon> {
        self.list.shuffled(self.shuffle_seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayOutcome {
    pub victim: DeviceId,
    pub target_totem: TotemId,
    pub at_s: f64,
    /// The payload re-emitted; absent if nothing of the victim was captured.
    pub payload: Option<HexPayload>,
    pub captured_t: Option<f64>,
    pub captured_at: Option<Position>,
    pub stored_at: Vec<TotemId>,
    pub dropped_at: Vec<TotemId>,
}

impl ReplayOutcome {
    pub fn beacon(&self) -> Option<Beacon> {
        self.payload.as_ref().and_then(|p| Beacon::from_slice(&p.0))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct AttackReport {
    pub captured_payloads: usize,
    pub health: HealthInference,
    pub trajectory: Vec<TrajectoryPoint>,
    pub replays: Vec<ReplayOutcome>,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub config: SimConfig,
    pub timing: Timing,
    pub ground_truth: GroundTruth,
    /// Final contents of the authority store (centralized) or of every
    /// totem's local store (decentralized modes), sorted.
    pub records: Vec<BeaconRecord>,
    pub publications: Vec<Publication>,
    pub exposure_reports: BTreeMap<DeviceId, ExposureReport>,
    pub eavesdrop: EavesdropLog,
    /// Emitting device per eavesdrop entry. Simulator bookkeeping only.
    pub eavesdrop_sources: Vec<DeviceId>,
    pub attack: AttackReport,
    pub flagged: BTreeSet<Beacon>,
    pub dropped_payloads: u64,
}

impl SimOutput {
    pub fn notified(&self) -> BTreeSet<DeviceId> {
        self.exposure_reports.iter().filter(|(_, r)| r.notified).map(|(d, _)| *d).collect()
    }

    pub fn published_lists(&self) -> Vec<PublishedList> {
        self.publications.iter().map(|p| p.list.clone()).collect()
    }
}

#[derive(Debug, Clone)]
enum Action {
    Flush,
    Disclose(usize),
    Reconcile(usize),
    Emit { device: usize, sample: Sample, heard: Vec<usize> },
    Replay(usize),
}

impl Action {
    fn class(&self) -> u8 {
        match self {
            Action::Flush => 0,
            Action::Disclose(_) => 1,
            Action::Reconcile(_) => 2,
            Action::Emit { .. } => 3,
            Action::Replay(_) => 4,
        }
    }

    fn entity(&self) -> u64 {
        match self {
            Action::Flush => 0,
            Action::Disclose(i) | Action::Reconcile(i) | Action::Replay(i) => *i as u64,
            Action::Emit { device, .. } => *device as u64,
        }
    }
}

#[derive(Debug, Clone)]
struct Event {
    t_ms: u64,
    seq: u64,
    action: Action,
}

impl Event {
    fn key(&self) -> (u64, u8, u64, u64) {
        (self.t_ms, self.action.class(), self.action.entity(), self.seq)
    }
}

/// Independent RNG stream per purpose, so adding draws to one never shifts another.
pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub(crate) const STREAM_KEYS: u64 = 1;
const STREAM_MOBILITY: u64 = 2;
const STREAM_TOTEMS: u64 = 3;
const STREAM_SESSIONS: u64 = 4;
const STREAM_PUBLISH: u64 = 5;

fn secs(ms: u64) -> f64 {
    ms as f64 / 1000.0
}

struct Engine<'a> {
    cfg: &'a SimConfig,
    timing: Timing,
    devices: Vec<DeviceState>,
    totems: Vec<TotemState>,
    positions: BTreeMap<TotemId, Position>,
    directory: TotemDirectory,
    authority: AuthorityStore,
    authority_keys: Option<Keypair>,
    sessions: HashMap<(usize, usize), (u64, Session)>,
    session_rng: ChaCha8Rng,
    publish_seeds: Vec<u64>,
    diagnoses: Vec<(DeviceId, u64)>,
    disclosures: Vec<Option<PositiveDisclosure>>,
    publications: Vec<Publication>,
    flagged: BTreeSet<Beacon>,
    log: EavesdropLog,
    sources: Vec<DeviceId>,
    replays: Vec<ReplayOutcome>,
}

pub fn run(cfg: &SimConfig) -> Result<SimOutput, SimError> {
    cfg.validate()?;
    let timing = Timing {
        slot_ms: cfg.slot_len_s * 1000,
        interval_ms: config::to_millis("broadcast_interval_s", cfg.broadcast_interval_s)?,
        duration_ms: config::to_millis("duration_s", cfg.duration_s)?,
        lookback_ms: cfg.lookback_days as u64 * 86_400_000,
    };

    let mut key_rng = stream(cfg.seed, STREAM_KEYS);
    let devices: Vec<DeviceState> = (0..cfg.devices.count)
        .map(|i| {
            DeviceState::new(DeviceKey::generate(DeviceId(i), &mut key_rng), cfg.slot_len_s)
                .with_risk_threshold(cfg.risk_threshold_s)
                .with_lookback_days(cfg.lookback_days)
        })
        .collect();

    let m = &cfg.devices.mobility;
    let zones = cfg.zones();
    let mut mob_rng = stream(cfg.seed, STREAM_MOBILITY);
    let mut trajectories = Vec::with_capacity(devices.len());
    if !devices.is_empty() {
        let model = MobilityModel::new(zones.clone(), m.transition.clone(), (m.dwell_s.min, m.dwell_s.max), m.speed_mps)?;
        for i in 0..devices.len() {
            let start = match &m.initial_zones {
                Some(z) => z[i],
                None => mob_rng.random_range(0..zones.len()),
            };
            trajectories.push(model.trajectory(start, timing.duration_ms, &mut mob_rng)?);
        }
    }

    let mut totem_rng = stream(cfg.seed, STREAM_TOTEMS);
    let authority_keys = cfg.encrypt_at_rest.then(|| Keypair::generate(&mut totem_rng));
    let mut directory = TotemDirectory::new();
    let mut totems = Vec::with_capacity(cfg.totems.len());
    for site in &cfg.totems {
        let mut totem = TotemState::new(site.clone(), cfg.mode, cfg.slot_len_s);
        if cfg.mode.encrypts_uplink() {
            totem = totem.with_keypair(Keypair::generate(&mut totem_rng));
            directory.insert(site.id.clone(), totem.public_key().expect("keypair installed"))?;
        }
        if let Some(keys) = &authority_keys {
            totem = totem.with_encrypt_at_rest(keys.public_bytes(), totem_rng.random())?;
        }
        totems.push(totem);
    }

    let diagnoses: Vec<(DeviceId, u64)> = cfg
        .infections
        .iter()
        .map(|inf| Ok((DeviceId(inf.device), config::to_millis("diagnosis_time_s", inf.diagnosis_time_s)?)))
        .collect::<Result<_, ConfigError>>()?;
    let ground_truth = GroundTruth::build(
        trajectories,
        &cfg.totems,
        &timing,
        cfg.epsilon_slots,
        cfg.risk_threshold_s,
        &diagnoses.iter().copied().collect(),
    );

    let mut publish_rng = stream(cfg.seed, STREAM_PUBLISH);
    let mut engine = Engine {
        cfg,
        timing,
        devices,
        positions: cfg.totems.iter().map(|t| (t.id.clone(), t.position())).collect(),
        totems,
        directory,
        authority: AuthorityStore::new(),
        authority_keys,
        sessions: HashMap::new(),
        session_rng: stream(cfg.seed, STREAM_SESSIONS),
        publish_seeds: diagnoses.iter().map(|_| publish_rng.random()).collect(),
        disclosures: vec![None; diagnoses.len()],
        diagnoses,
        publications: Vec::new(),
        flagged: BTreeSet::new(),
        log: EavesdropLog::new(),
        sources: Vec::new(),
        replays: Vec::new(),
    };

    for event in engine.agenda(&ground_truth) {
        engine.handle(event)?;
    }
    engine.finish(ground_truth)
}

impl Engine<'_> {
    fn agenda(&self, gt: &GroundTruth) -> Vec<Event> {
        let t = &self.timing;
        let mut events = Vec::new();
        let mut push = |t_ms: u64, seq: u64, action: Action| events.push(Event { t_ms, seq, action });
        for (device, legs) in gt.trajectories.iter().enumerate() {
            for leg in legs {
                for sample in leg_samples(leg, t.interval_ms, t.slot_ms, t.duration_ms) {
                    let heard = self.heard_at(&sample.at);
                    // Nobody can hear this tick, so it changes nothing.
                    if heard.is_empty() && !self.cfg.adversary.coverage.covers(&sample.at) {
                        continue;
                    }
                    push(sample.first_tick * t.interval_ms, sample.first_tick, Action::Emit { device, sample, heard });
                }
            }
        }
        if self.cfg.mode == ProtocolMode::Centralized {
            let mut boundary = t.slot_ms;
            while boundary < t.duration_ms {
                push(boundary, 0, Action::Flush);
                boundary += t.slot_ms;
            }
        }
        for (i, (_, t_ms)) in self.diagnoses.iter().enumerate() {
            push(*t_ms, 0, Action::Disclose(i));
            let end_of_tolerance = (t.slot_at(*t_ms) + self.cfg.epsilon_slots + 1) * t.slot_ms;
            push(end_of_tolerance.min(t.duration_ms), 0, Action::Reconcile(i));
        }
        for (i, r) in self.cfg.adversary.replays.iter().enumerate() {
            let at = config::to_millis("at_s", r.at_s).expect("validated");
            push(at, 0, Action::Replay(i));
        }
        events.sort_by_key(Event::key);
        events
    }

    fn handle(&mut self, event: Event) -> Result<(), SimError> {
        let now = secs(event.t_ms);
        match event.action {
            Action::Flush => self.flush(),
            Action::Disclose(i) => {
                let (device, _) = self.diagnoses[i];
                let disclosure = self.devices[device.0 as usize].disclose_positive(now)?;
                self.authority.ingest_positive(disclosure.clone(), now)?;
                self.disclosures[i] = Some(disclosure);
                Ok(())
            }
            Action::Reconcile(i) => self.reconcile(i, now),
            Action::Emit { device, sample, heard } => self.emit(device, &sample, &heard, now),
            Action::Replay(i) => self.replay(i, event.t_ms),
        }
    }

    fn flush(&mut self) -> Result<(), SimError> {
        for totem in &mut self.totems {
            match &self.authority_keys {
                Some(keys) => {
                    let batch = totem.flush_sealed()?;
                    self.authority.ingest_sealed(keys, totem.id(), &batch)?;
                }
                None => {
                    self.authority.ingest_records(totem.flush_centralized()?);
                }
            }
        }
        Ok(())
    }

    fn reconcile(&mut self, i: usize, now: f64) -> Result<(), SimError> {
        let disclosure = self.disclosures[i].clone().expect("disclosed before reconciliation");
        let (list, unreachable) = if self.cfg.mode == ProtocolMode::Centralized {
            self.flush()?;
            if self.cfg.fraud_detection {
                let flagged = self.authority.detect_fraud(self.cfg.v_max_mps, &self.positions, self.cfg.slot_len_s)?;
                self.authority.exclude(flagged.iter().copied());
                self.flagged.extend(flagged);
            }
            (self.authority.reconcile_centralized(&disclosure, self.cfg.epsilon_slots, now), Vec::new())
        } else {
            let unreachable: BTreeSet<TotemId> = self.cfg.unreachable_totems.iter().cloned().collect();
            let r = reconcile_decentralized(&disclosure, &self.totems, self.cfg.epsilon_slots, &unreachable, now)?;
            (r.list, r.unreachable)
        };
        let shuffle_seed = self.publish_seeds[i];
        let (diagnosed, t_ms) = self.diagnoses[i];
        self.publications.push(Publication {
            diagnosed,
            diagnosis_time_s: secs(t_ms),
            bytes: publish(&list, shuffle_seed),
            disclosure,
            list,
            shuffle_seed,
            unreachable,
        });
        Ok(())
    }

    fn capture(&mut self, payload: &Payload, now: f64, at: Position, device: usize) {
        if self.cfg.adversary.coverage.covers(&at) {
            self.log.record(payload.to_wire(), now, at);
            self.sources.push(DeviceId(device as u32));
        }
    }

    /// Indices of the totems within range of `at`.
    fn heard_at(&self, at: &Position) -> Vec<usize> {
        self.totems
            .iter()
            .enumerate()
            .filter(|(_, t)| in_range(at, &t.site().position(), t.site().radio_range_m))
            .map(|(i, _)| i)
            .collect()
    }

    fn emit(&mut self, device: usize, sample: &Sample, heard: &[usize], now: f64) -> Result<(), SimError> {
        let at = sample.at;

        if !self.cfg.mode.encrypts_uplink() {
            let tx = self.devices[device].broadcast_tick(now, Uplink::Clear)?;
            for &i in heard {
                self.totems[i].receive_beacon(&tx, now)?;
            }
            self.capture(&tx.payload, now, at, device);
            return Ok(());
        }

        // Privacy-enhanced: one session per (device, totem, slot), and
        // nothing on the air when no totem is around.
        for &i in heard {
            let fresh = !matches!(self.sessions.get(&(device, i)), Some((slot, _)) if *slot == sample.slot);
            if fresh {
                let id = self.totems[i].id().clone();
                let (session, enc) =
                    establish_session(&self.directory, &id, SlotIndex(sample.slot), &mut self.session_rng)?;
                let hello = Transmission::addressed(Payload::Handshake(enc), id);
                self.totems[i].receive_beacon(&hello, now)?;
                self.capture(&hello.payload, now, at, device);
                self.sessions.insert((device, i), (sample.slot, session));
            }
            let (_, session) = self.sessions.get_mut(&(device, i)).expect("session present");
            let tx = self.devices[device].broadcast_tick(now, Uplink::Secure(session))?;
            self.totems[i].receive_beacon(&tx, now)?;
            self.capture(&tx.payload, now, at, device);
        }
        Ok(())
    }

    fn replay(&mut self, i: usize, t_ms: u64) -> Result<(), SimError> {
        let directive = &self.cfg.adversary.replays[i];
        let now = secs(t_ms);
        let victim = DeviceId(directive.victim);
        let mut outcome = ReplayOutcome {
            victim,
            target_totem: directive.target_totem.clone(),
            at_s: now,
            payload: None,
            captured_t: None,
            captured_at: None,
            stored_at: Vec::new(),
            dropped_at: Vec::new(),
        };
        // The most recent data payload the victim was heard sending.
        let latest = self
            .log
            .entries()
            .iter()
            .zip(&self.sources)
            .rev()
            .find(|(e, src)| **src == victim && e.t <= now && !matches!(Payload::from_wire(&e.payload), Payload::Handshake(_)))
            .map(|(e, _)| e.clone());
        if let Some(entry) = latest {
            let target = self.cfg.totems.iter().find(|t| t.id == directive.target_totem).expect("validated");
            let replay = replay_inject(&entry.payload, target, now);
            for totem in &mut self.totems {
                let site = totem.site();
                if !in_range(&replay.at, &site.position(), site.radio_range_m) {
                    continue;
                }
                match totem.receive_beacon(&replay.transmission, now)? {
                    Receipt::Stored | Receipt::Coalesced => outcome.stored_at.push(totem.id().clone()),
                    Receipt::Dropped => outcome.dropped_at.push(totem.id().clone()),
                    Receipt::SessionOpened | Receipt::NotForUs => {}
                }
            }
            outcome.captured_t = Some(entry.t);
            outcome.captured_at = Some(entry.position());
            outcome.payload = Some(HexPayload(entry.payload));
        }
        self.replays.push(outcome);
        Ok(())
    }

    fn finish(mut self, ground_truth: GroundTruth) -> Result<SimOutput, SimError> {
        let end = secs(self.timing.duration_ms);
        let mut records: Vec<BeaconRecord> = if self.cfg.mode == ProtocolMode::Centralized {
            self.flush()?;
            self.authority.records().cloned().collect()
        } else {
            self.totems.iter().flat_map(TotemState::local_records).collect()
        };
        records.sort();

        let lists: Vec<PublishedList> = self.publications.iter().map(|p| p.list.clone()).collect();
        let diagnosed: BTreeSet<DeviceId> = self.diagnoses.iter().map(|(d, _)| *d).collect();
        let mut exposure_reports = BTreeMap::new();
        for device in self.devices.iter().filter(|d| !diagnosed.contains(&d.device_id())) {
            exposure_reports.insert(device.device_id(), device.match_lists(&lists, end)?);
        }

        let mut attack = AttackReport { captured_payloads: self.log.len(), ..AttackReport::default() };
        if self.cfg.adversary.coverage.is_active() {
            let params = AttackParams {
                slot_len: self.cfg.slot_len_s,
                epsilon: self.cfg.epsilon_slots,
                colocation_radius_m: self.cfg.colocation_radius(),
            };
            let targets: Vec<TargetPayloads> = self
                .cfg
                .adversary
                .targets
                .iter()
                .map(|t| {
                    let payloads: BTreeSet<HexPayload> = self
                        .log
                        .entries()
                        .iter()
                        .zip(&self.sources)
                        .filter(|(_, src)| src.0 == *t)
                        .map(|(e, _)| HexPayload(e.payload.clone()))
                        .collect();
                    TargetPayloads { target: DeviceId(*t).to_string(), payloads: payloads.into_iter().collect() }
                })
                .collect();
            attack.health = infer_health_status(&self.log, &lists, &targets, &params);
            attack.trajectory = recover_trajectory(&self.log, &lists, self.cfg.slot_len_s);
        }
        attack.replays = std::mem::take(&mut self.replays);

        Ok(SimOutput {
            config: self.cfg.clone(),
            timing: self.timing,
            ground_truth,
            records,
            publications: self.publications,
            exposure_reports,
            eavesdrop: self.log,
            eavesdrop_sources: self.sources,
            attack,
            flagged: self.flagged,
            dropped_payloads: self.totems.iter().map(TotemState::dropped).sum(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pinned(mode: ProtocolMode, devices: u32, slots: u64, threshold_slots: u64, infect: bool) -> SimConfig {
        let zones = vec![Position::new(0.0, 0.0)];
        let mut cfg = SimConfig::from_json(
            r#"{"seed": 9, "duration_s": 60, "totems": [{"id": "T-0001", "x": 0, "y": 0, "radio_range_m": 20}],
                "devices": {"count": 1}}"#,
        )
        .unwrap();
        cfg.mode = mode;
        cfg.slot_len_s = 60;
        cfg.duration_s = (slots * 60) as f64;
        cfg.risk_threshold_s = (threshold_slots * 60) as f64;
        cfg.devices.count = devices;
        cfg.devices.mobility.zones = Some(zones);
        cfg.devices.mobility.dwell_s = config::DwellRange { min: 1e6, max: 1e6 };
        if infect {
            cfg.infections.push(config::Infection { device: 0, diagnosis_time_s: cfg.duration_s - 1.0 });
        }
        cfg
    }

    #[test]
    fn zero_infections_publish_nothing() {
        let out = run(&pinned(ProtocolMode::Centralized, 3, 3, 1, false)).unwrap();
        assert!(out.publications.is_empty());
        assert!(out.notified().is_empty());
        assert_eq!(out.records.len(), 9);
    }

    #[test]
    fn pinned_pair_notifies_in_every_mode() {
        for mode in ProtocolMode::ALL {
            let out = run(&pinned(mode, 2, 3, 2, true)).unwrap();
            assert_eq!(out.notified(), BTreeSet::from([DeviceId(1)]), "{mode}");
            let report = &out.exposure_reports[&DeviceId(1)];
            assert_eq!(report.matched_slots.len(), 3);
            assert_eq!(out.ground_truth.true_contacts, BTreeSet::from([DeviceId(1)]));
        }
    }

    #[test]
    fn modes_publish_identical_lists() {
        let runs: Vec<SimOutput> = ProtocolMode::ALL.iter().map(|m| run(&pinned(*m, 4, 4, 2, true)).unwrap()).collect();
        for other in &runs[1..] {
            assert_eq!(other.publications[0].list.beacons, runs[0].publications[0].list.beacons);
            assert_eq!(other.records, runs[0].records);
        }
    }

    #[test]
    fn identical_seeds_give_identical_runs() {
        let mut cfg = pinned(ProtocolMode::Centralized, 5, 4, 1, true);
        cfg.devices.mobility.zones = None;
        cfg.devices.mobility.dwell_s = config::DwellRange { min: 10.0, max: 100.0 };
        let a = run(&cfg).unwrap();
        let b = run(&cfg).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.publications, b.publications);
        assert_eq!(a.ground_truth, b.ground_truth);
    }

    #[test]
    fn privacy_devices_are_silent_outside_coverage() {
        let mut cfg = pinned(ProtocolMode::PrivacyEnhanced, 2, 2, 1, false);
        cfg.devices.mobility.zones = Some(vec![Position::new(500.0, 0.0)]);
        cfg.adversary.coverage = config::Coverage::Global;
        let out = run(&cfg).unwrap();
        assert!(out.eavesdrop.is_empty());
        assert!(out.records.is_empty());
    }
}
