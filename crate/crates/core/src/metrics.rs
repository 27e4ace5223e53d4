//! Evaluation metrics: k-anonymity of published positives, notification
//! accuracy against ground truth, and the analytical device cost model.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::beacon::{Beacon, DeviceId, SlotIndex};
use crate::sim::{GroundTruth, Place, Publication, SimOutput};
use crate::totem::{BeaconRecord, TotemId};

/// Anonymity-set sizes of positive sightings.
///
/// For every published positive beacon and every totem that recorded it, `k`
/// is the number of published beacons recorded at that totem within the slot
/// tolerance, the positive included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct KAnonymityProfile {
    pub histogram: BTreeMap<usize, usize>,
    pub min: Option<usize>,
    pub median: Option<f64>,
    pub sightings: usize,
}

impl KAnonymityProfile {
    pub fn from_sizes(sizes: impl IntoIterator<Item = usize>) -> Self {
        let mut sorted: Vec<usize> = sizes.into_iter().collect();
        sorted.sort_unstable();
        let mut histogram = BTreeMap::new();
        for k in &sorted {
            *histogram.entry(*k).or_insert(0) += 1;
        }
        let median = match sorted.len() {
            0 => None,
            n if n % 2 == 1 => Some(sorted[n / 2] as f64),
            n => Some((sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0),
        };
        Self { min: sorted.first().copied(), median, sightings: sorted.len(), histogram }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,count\n");
        for (k, n) in &self.histogram {
            out.push_str(&format!("{k},{n}\n"));
        }
        out
    }
}

pub fn k_anonymity_profile(records: &[BeaconRecord], publications: &[Publication], epsilon: u64) -> KAnonymityProfile {
    let mut at: BTreeMap<(&TotemId, SlotIndex), BTreeSet<Beacon>> = BTreeMap::new();
    let mut seen: BTreeMap<Beacon, Vec<(&TotemId, SlotIndex)>> = BTreeMap::new();
    for r in records {
        at.entry((&r.totem, r.slot)).or_default().insert(r.beacon);
        seen.entry(r.beacon).or_default().push((&r.totem, r.slot));
    }
    let mut sizes = Vec::new();
    for p in publications {
        for entry in &p.disclosure.0 {
            let Some(sightings) = seen.get(&entry.beacon) else { continue };
            for (totem, slot) in sightings.iter().filter(|(_, s)| *s == entry.slot) {
                let (lo, hi) = slot.window(epsilon);
                let cluster: BTreeSet<&Beacon> = at
                    .range((*totem, lo)..=(*totem, hi))
                    .flat_map(|(_, b)| b.iter())
                    .filter(|b| p.list.contains(b))
                    .collect();
                sizes.push(cluster.len());
            }
        }
    }
    KAnonymityProfile::from_sizes(sizes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NotificationAccuracy {
    /// `None` when nobody was notified.
    pub precision: Option<f64>,
    /// `None` when there were no true contacts.
    pub recall: Option<f64>,
    pub notified: usize,
    pub true_contacts: usize,
    pub true_positives: usize,
    pub false_positives: Vec<DeviceId>,
    pub false_negatives: Vec<DeviceId>,
    /// Missed contacts that only happened where no totem could hear them.
    pub coverage_limited_misses: usize,
}

pub fn notification_accuracy(notified: &BTreeSet<DeviceId>, truth: &GroundTruth) -> NotificationAccuracy {
    let tp = notified.intersection(&truth.true_contacts).count();
    let ratio = |n: usize, d: usize| (d > 0).then(|| n as f64 / d as f64);
    let false_negatives: Vec<DeviceId> = truth.true_contacts.difference(notified).copied().collect();
    let limited = truth.coverage_limited();
    NotificationAccuracy {
        precision: ratio(tp, notified.len()),
        recall: ratio(tp, truth.true_contacts.len()),
        notified: notified.len(),
        true_contacts: truth.true_contacts.len(),
        true_positives: tp,
        false_positives: notified.difference(&truth.true_contacts).copied().collect(),
        coverage_limited_misses: false_negatives.iter().filter(|d| limited.contains(d)).count(),
        false_negatives,
    }
}

/// Radio and compute cost parameters of a broadcasting phone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostModelParams {
    pub tx_power_mw: f64,
    pub tx_time_per_beacon_s: f64,
    pub rx_power_mw: f64,
    pub scan_duty_cycle: f64,
    pub beacon_interval_s: f64,
    pub beacon_size_bytes: u32,
    pub crypto_ms_per_day: f64,
    /// Bytes kept per heard contact by scanning designs.
    pub contact_entry_bytes: u32,
    pub contacts_per_min: f64,
}

impl Default for CostModelParams {
    fn default() -> Self {
        Self::iotrace()
    }
}

/// Phone-side protocols with a scanning, storing phone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Baseline {
    BlueTrace,
    Dp3t,
    AppleGoogle,
    PeppPt,
}

impl CostModelParams {
    /// Transmit-only phone broadcasting 16-byte beacons every 500 ms. The
    /// radio figures are those of a BLE SoC at 0 dBm.
    pub fn iotrace() -> Self {
        Self {
            tx_power_mw: 31.5,
            tx_time_per_beacon_s: 0.000_866_666_7,
            rx_power_mw: 40.2,
            scan_duty_cycle: 0.5,
            beacon_interval_s: 0.5,
            beacon_size_bytes: 16,
            crypto_ms_per_day: 23.3652,
            contact_entry_bytes: 0,
            contacts_per_min: 1.0,
        }
    }

    pub fn baseline(kind: Baseline) -> Self {
        let (size, entry, crypto) = match kind {
            Baseline::BlueTrace => (140, 140, 0.0),
            Baseline::Dp3t => (24, 24, 24.8973),
            Baseline::AppleGoogle => (31, 16, 30.2039),
            Baseline::PeppPt => (30, 30, 0.0),
        };
        Self { beacon_size_bytes: size, contact_entry_bytes: entry, crypto_ms_per_day: crypto, ..Self::iotrace() }
    }

    pub fn validate(&self) -> Result<(), String> {
        let fields = [
            ("tx_power_mw", self.tx_power_mw),
            ("tx_time_per_beacon_s", self.tx_time_per_beacon_s),
            ("rx_power_mw", self.rx_power_mw),
            ("crypto_ms_per_day", self.crypto_ms_per_day),
            ("contacts_per_min", self.contacts_per_min),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(format!("{name} must be non-negative"));
        }
        if !(self.beacon_interval_s.is_finite() && self.beacon_interval_s > 0.0) {
            return Err("beacon_interval_s must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.scan_duty_cycle) {
            return Err("scan_duty_cycle must lie in [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    #[serde(rename = "rf_energy_mJ_per_min")]
    pub rf_energy_mj_per_min: f64,
    pub tx_bytes_per_min: f64,
    #[serde(rename = "contact_storage_B")]
    pub contact_storage_b: u64,
    pub crypto_ms_per_day: f64,
}

/// Per-device cost over `duration_s`. Scanning adds receive energy and
/// contact storage; a transmit-only phone has neither.
pub fn cost_report(params: &CostModelParams, duration_s: f64, scan_enabled: bool) -> Result<CostReport, String> {
    params.validate()?;
    if !(duration_s.is_finite() && duration_s >= 0.0) {
        return Err("duration must be non-negative".into());
    }
    let beacons_per_min = 60.0 / params.beacon_interval_s;
    let tx = params.tx_power_mw * params.tx_time_per_beacon_s * beacons_per_min;
    let rx = if scan_enabled { params.rx_power_mw * params.scan_duty_cycle * 60.0 } else { 0.0 };
    let storage = if scan_enabled {
        (params.contacts_per_min * duration_s / 60.0).round() as u64 * params.contact_entry_bytes as u64
    } else {
        0
    };
    Ok(CostReport {
        rf_energy_mj_per_min: tx + rx,
        tx_bytes_per_min: beacons_per_min * params.beacon_size_bytes as f64,
        contact_storage_b: storage,
        crypto_ms_per_day: params.crypto_ms_per_day,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayDetection {
    pub injected: usize,
    /// Injected beacons whose fake sighting is physically impossible.
    pub infeasible: usize,
    pub flagged_injected: usize,
    pub recall: Option<f64>,
    /// Flagged beacons that were never replayed.
    pub false_flags: usize,
}

/// Scores fraud flags against the replays actually injected. A replay counts
/// as infeasible when the victim was genuinely recorded, in the same tolerance
/// window, at a totem too far from the replay target.
pub fn replay_detection(out: &SimOutput) -> ReplayDetection {
    let cfg = &out.config;
    let t = &out.timing;
    let positions: BTreeMap<&TotemId, _> = cfg.totems.iter().map(|s| (&s.id, s.position())).collect();
    let mut injected = BTreeSet::new();
    let mut infeasible = BTreeSet::new();
    for r in out.attack.replays.iter().filter(|r| !r.stored_at.is_empty()) {
        let (Some(beacon), Some(captured_t)) = (r.beacon(), r.captured_t) else { continue };
        injected.insert(beacon);
        // The beacon belongs to the capture slot; genuine sightings are there.
        let capture_slot = (captured_t * 1000.0).round() as u64 / t.slot_ms;
        let replay_slot = (r.at_s * 1000.0).round() as u64 / t.slot_ms;
        let genuine = cfg.totems.iter().filter(|site| {
            out.ground_truth.is_present(r.victim, &Place::Totem(site.id.clone()), capture_slot)
        });
        let impossible = genuine.into_iter().any(|site| {
            r.stored_at.iter().any(|stored| {
                crate::authority::is_infeasible(
                    &positions[&site.id],
                    &positions[stored],
                    capture_slot.abs_diff(replay_slot),
                    cfg.v_max_mps,
                    cfg.slot_len_s,
                )
            })
        });
        if impossible {
            infeasible.insert(beacon);
        }
    }
    let flagged_injected = out.flagged.intersection(&infeasible).count();
    ReplayDetection {
        injected: injected.len(),
        infeasible: infeasible.len(),
        flagged_injected,
        recall: (!infeasible.is_empty()).then(|| flagged_injected as f64 / infeasible.len() as f64),
        false_flags: out.flagged.difference(&injected).count(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: String,
    pub seed: u64,
    pub devices: u32,
    pub totems: usize,
    pub records: usize,
    pub publications: usize,
    pub published_beacons: usize,
    pub dropped_payloads: u64,
    pub flagged_beacons: usize,
    pub captured_payloads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run: RunSummary,
    pub k_anonymity: KAnonymityProfile,
    pub notification_accuracy: NotificationAccuracy,
    pub cost: CostReport,
    pub replay_detection: ReplayDetection,
}

pub fn evaluate(out: &SimOutput) -> MetricsReport {
    let cfg = &out.config;
    MetricsReport {
        run: RunSummary {
            mode: cfg.mode.to_string(),
            seed: cfg.seed,
            devices: cfg.devices.count,
            totems: cfg.totems.len(),
            records: out.records.len(),
            publications: out.publications.len(),
            published_beacons: out.publications.iter().map(|p| p.list.len()).sum(),
            dropped_payloads: out.dropped_payloads,
            flagged_beacons: out.flagged.len(),
            captured_payloads: out.eavesdrop.len(),
        },
        k_anonymity: k_anonymity_profile(&out.records, &out.publications, cfg.epsilon_slots),
        notification_accuracy: notification_accuracy(&out.notified(), &out.ground_truth),
        cost: cost_report(&cfg.energy, cfg.duration_s, false).expect("validated with the config"),
        replay_detection: replay_detection(out),
    }
}
