//! Who was where, computed from trajectories alone and never from protocol
//! state. The simulator's outputs are scored against this.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Serialize, Serializer};

use super::mobility::{leg_samples, Leg};
use crate::beacon::{DeviceId, SlotIndex};
use crate::radio::in_range;
use crate::totem::{TotemId, TotemSite};

/// Where two people can meet: within a totem's radio range, or at a zone no
/// totem hears.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Place {
    Totem(TotemId),
    Zone(usize),
}

impl Place {
    pub fn is_covered(&self) -> bool {
        matches!(self, Place::Totem(_))
    }
}

impl fmt::Display for Place {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Place::Totem(id) => write!(f, "{id}"),
            Place::Zone(z) => write!(f, "zone:{z}"),
        }
    }
}

impl Serialize for Place {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

/// Simulation timing in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Timing {
    pub slot_ms: u64,
    pub interval_ms: u64,
    pub duration_ms: u64,
    pub lookback_ms: u64,
}

impl Timing {
    pub fn slot_at(&self, t_ms: u64) -> u64 {
        t_ms / self.slot_ms
    }

    /// Slots `[slot(max(0, t - lookback)), slot(t)]`.
    pub fn lookback_slots(&self, t_ms: u64) -> (u64, u64) {
        (self.slot_at(t_ms.saturating_sub(self.lookback_ms)), self.slot_at(t_ms))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct TrueExposure {
    /// Slots of co-presence with a positive, at any place.
    pub slots: BTreeSet<SlotIndex>,
    /// The subset that happened within a totem's range.
    pub covered_slots: BTreeSet<SlotIndex>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PresenceRow {
    pub place: Place,
    pub slot: SlotIndex,
    pub devices: Vec<DeviceId>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub trajectories: Vec<Vec<Leg>>,
    pub diagnosed: BTreeMap<DeviceId, f64>,
    pub presence: BTreeMap<Place, BTreeMap<u64, BTreeSet<DeviceId>>>,
    pub exposures: BTreeMap<DeviceId, TrueExposure>,
    /// Exposure over the risk threshold counting every place.
    pub true_contacts: BTreeSet<DeviceId>,
    /// Exposure over the risk threshold counting totem places only.
    pub covered_contacts: BTreeSet<DeviceId>,
    /// Unordered pairs seen at one place within the slot tolerance.
    pub co_presence: BTreeSet<(DeviceId, DeviceId)>,
}

impl GroundTruth {
    pub fn build(
        trajectories: Vec<Vec<Leg>>,
        totems: &[TotemSite],
        timing: &Timing,
        epsilon: u64,
        risk_threshold_s: f64,
        diagnoses: &BTreeMap<DeviceId, u64>,
    ) -> Self {
        let mut presence: BTreeMap<Place, BTreeMap<u64, BTreeSet<DeviceId>>> = BTreeMap::new();
        for (i, legs) in trajectories.iter().enumerate() {
            let device = DeviceId(i as u32);
            for leg in legs {
                for sample in leg_samples(leg, timing.interval_ms, timing.slot_ms, timing.duration_ms) {
                    let mut heard = false;
                    for t in totems.iter().filter(|t| in_range(&sample.at, &t.position(), t.radio_range_m)) {
                        heard = true;
                        presence
                            .entry(Place::Totem(t.id.clone()))
                            .or_default()
                            .entry(sample.slot)
                            .or_default()
                            .insert(device);
                    }
                    if let (false, Leg::Dwell { zone, .. }) = (heard, leg) {
                        presence.entry(Place::Zone(*zone)).or_default().entry(sample.slot).or_default().insert(device);
                    }
                }
            }
        }

        let mut co_presence = BTreeSet::new();
        for slots in presence.values() {
            for (s, here) in slots {
                for (_, there) in slots.range(*s..=s.saturating_add(epsilon)) {
                    for a in here {
                        for b in there.iter().filter(|b| *b != a) {
                            co_presence.insert((*a.min(b), *a.max(b)));
                        }
                    }
                }
            }
        }

        let (match_from, now_slot) = timing.lookback_slots(timing.duration_ms);
        let mut exposures: BTreeMap<DeviceId, TrueExposure> = BTreeMap::new();
        for (positive, t_ms) in diagnoses {
            let (from, to) = timing.lookback_slots(*t_ms);
            for (place, slots) in &presence {
                for (tau, _) in slots.range(from..=to).filter(|(_, d)| d.contains(positive)) {
                    let lo = tau.saturating_sub(epsilon);
                    for (s, devices) in slots.range(lo..=tau.saturating_add(epsilon)) {
                        if *s < match_from || *s > now_slot {
                            continue;
                        }
                        for d in devices.iter().filter(|d| !diagnoses.contains_key(d)) {
                            let e = exposures.entry(*d).or_default();
                            e.slots.insert(SlotIndex(*s));
                            if place.is_covered() {
                                e.covered_slots.insert(SlotIndex(*s));
                            }
                        }
                    }
                }
            }
        }

        let slot_s = timing.slot_ms as f64 / 1000.0;
        let over = |n: usize| n as f64 * slot_s >= risk_threshold_s;
        let true_contacts = exposures.iter().filter(|(_, e)| over(e.slots.len())).map(|(d, _)| *d).collect();
        let covered_contacts =
            exposures.iter().filter(|(_, e)| over(e.covered_slots.len())).map(|(d, _)| *d).collect();

        Self {
            trajectories,
            diagnosed: diagnoses.iter().map(|(d, t)| (*d, *t as f64 / 1000.0)).collect(),
            presence,
            exposures,
            true_contacts,
            covered_contacts,
            co_presence,
        }
    }

    /// True contacts only reachable at places without a totem.
    pub fn coverage_limited(&self) -> BTreeSet<DeviceId> {
        self.true_contacts.difference(&self.covered_contacts).copied().collect()
    }

    pub fn is_present(&self, device: DeviceId, place: &Place, slot: u64) -> bool {
        self.presence.get(place).and_then(|s| s.get(&slot)).is_some_and(|d| d.contains(&device))
    }

    pub fn presence_rows(&self) -> Vec<PresenceRow> {
        self.presence
            .iter()
            .flat_map(|(place, slots)| {
                slots.iter().map(move |(s, d)| PresenceRow {
                    place: place.clone(),
                    slot: SlotIndex(*s),
                    devices: d.iter().copied().collect(),
                })
            })
            .collect()
    }
}

impl Serialize for GroundTruth {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Out<'a> {
            diagnosed: &'a BTreeMap<DeviceId, f64>,
            true_contacts: &'a BTreeSet<DeviceId>,
            covered_contacts: &'a BTreeSet<DeviceId>,
            exposures: &'a BTreeMap<DeviceId, TrueExposure>,
            co_presence: &'a BTreeSet<(DeviceId, DeviceId)>,
            presence: Vec<PresenceRow>,
            trajectories: &'a [Vec<Leg>],
        }
        Out {
            diagnosed: &self.diagnosed,
            true_contacts: &self.true_contacts,
            covered_contacts: &self.covered_contacts,
            exposures: &self.exposures,
            co_presence: &self.co_presence,
            presence: self.presence_rows(),
            trajectories: &self.trajectories,
        }
        .serialize(s)
    }
}
