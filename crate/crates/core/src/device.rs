//! The user's phone. It only ever transmits; it stores nothing but its key.
//! Past beacons are regenerated from the key when they are needed for a
//! positive disclosure or for matching against a published list.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::authority::PublishedList;
use crate::beacon::{
    derive_beacon, derive_beacon_window, slot_of, Beacon, BeaconError, DeviceId, DeviceKey,
    SlotIndex,
};
use crate::radio::{Payload, Transmission};
use crate::secure_channel::{ChannelError, Session};

pub const DEFAULT_RISK_THRESHOLD_S: f64 = 900.0;
pub const DEFAULT_LOOKBACK_DAYS: u32 = 14;
pub const DEFAULT_BROADCAST_INTERVAL_S: f64 = 0.5;

const SECONDS_PER_DAY: f64 = 86_400.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DeviceError {
    #[error(transparent)]
    Time(#[from] BeaconError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

/// How a broadcast tick leaves the device.
pub enum Uplink<'a> {
    /// Basic and decentralized modes.
    Clear,
    /// Privacy-enhanced mode: sealed to the session's totem.
    Secure(&'a mut Session),
}

#[derive(Debug, Clone)]
pub struct DeviceState {
    key: DeviceKey,
    slot_len: u64,
    risk_threshold_s: f64,
    lookback_days: u32,
}

/// One `{slot, beacon}` entry of a positive disclosure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DisclosedBeacon {
    pub slot: SlotIndex,
    pub beacon: Beacon,
}

/// The beacons a diagnosed user hands over at the hospital.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PositiveDisclosure(pub Vec<DisclosedBeacon>);

impl PositiveDisclosure {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (SlotIndex, Beacon)>) -> Self {
        Self(pairs.into_iter().map(|(slot, beacon)| DisclosedBeacon { slot, beacon }).collect())
    }

    pub fn pairs(&self) -> Vec<(SlotIndex, Beacon)> {
        self.0.iter().map(|d| (d.slot, d.beacon)).collect()
    }

    pub fn beacons(&self) -> BTreeSet<Beacon> {
        self.0.iter().map(|d| d.beacon).collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExposureReport {
    pub matched_slots: BTreeSet<SlotIndex>,
    pub exposure_seconds: u64,
    pub notified: bool,
}

impl DeviceState {
    pub fn new(key: DeviceKey, slot_len: u64) -> Self {
        Self {
            key,
            slot_len,
            risk_threshold_s: DEFAULT_RISK_THRESHOLD_S,
            lookback_days: DEFAULT_LOOKBACK_DAYS,
        }
    }

    pub fn with_risk_threshold(mut self, seconds: f64) -> Self {
        self.risk_threshold_s = seconds;
        self
    }

    pub fn with_lookback_days(mut self, days: u32) -> Self {
        self.lookback_days = days;
        self
    }

    pub fn device_id(&self) -> DeviceId {
        self.key.owner()
    }

    pub fn slot_len(&self) -> u64 {
        self.slot_len
    }

    pub fn risk_threshold_s(&self) -> f64 {
        self.risk_threshold_s
    }

    /// The beacon for the slot containing `now`.
    pub fn current_beacon(&self, now: f64) -> Result<Beacon, DeviceError> {
        Ok(derive_beacon(&self.key, slot_of(now, self.slot_len)?))
    }

    pub fn broadcast_tick(&self, now: f64, uplink: Uplink<'_>) -> Result<Transmission, DeviceError> {
        let beacon = self.current_beacon(now)?;
        Ok(match uplink {
            Uplink::Clear => Transmission::broadcast(beacon),
            Uplink::Secure(session) => {
                let ct = session.encrypt_beacon(&beacon)?;
                Transmission::addressed(Payload::Sealed(ct), session.totem_id().clone())
            }
        })
    }

    fn lookback_window(&self, now: f64) -> Result<(SlotIndex, SlotIndex), DeviceError> {
        let start = (now - self.lookback_days as f64 * SECONDS_PER_DAY).max(0.0);
        Ok((slot_of(start, self.slot_len)?, slot_of(now, self.slot_len)?))
    }

    /// Every beacon broadcast over the lookback window ending at `diagnosis_time`.
    pub fn disclose_positive(&self, diagnosis_time: f64) -> Result<PositiveDisclosure, DeviceError> {
        let (from, to) = self.lookback_window(diagnosis_time)?;
        Ok(PositiveDisclosure::from_pairs(derive_beacon_window(&self.key, from, to)?))
    }

    pub fn match_published(
        &self,
        list: &PublishedList,
        now: f64,
    ) -> Result<ExposureReport, DeviceError> {
        self.match_lists(std::iter::once(list), now)
    }

    /// Matches against the union of several published lists.
    pub fn match_lists<'a>(
        &self,
        lists: impl IntoIterator<Item = &'a PublishedList>,
        now: f64,
    ) -> Result<ExposureReport, DeviceError> {
        let (from, to) = self.lookback_window(now)?;
        let own: HashMap<Beacon, SlotIndex> = derive_beacon_window(&self.key, from, to)?
            .into_iter()
            .map(|(s, b)| (b, s))
            .collect();
        let matched_slots: BTreeSet<SlotIndex> = lists
            .into_iter()
            .flat_map(|l| l.beacons.iter())
            .filter_map(|b| own.get(b).copied())
            .collect();
        let exposure_seconds = matched_slots.len() as u64 * self.slot_len;
        Ok(ExposureReport {
            notified: exposure_seconds as f64 >= self.risk_threshold_s,
            matched_slots,
            exposure_seconds,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::secure_channel::{establish_session, Keypair, Responder, TotemDirectory};
    use crate::totem::TotemId;
    use rand::SeedableRng;

    fn device(n: u8) -> DeviceState {
        DeviceState::new(DeviceKey::new([n; 16], DeviceId(n as u32)), 600)
    }

    fn list(beacons: impl IntoIterator<Item = Beacon>) -> PublishedList {
        PublishedList { beacons: beacons.into_iter().collect(), published_at: 0.0 }
    }

    #[test]
    fn broadcast_payload_follows_slots() {
        let d = device(1);
        let key = DeviceKey::new([1; 16], DeviceId(1));
        let at = |t: f64| d.broadcast_tick(t, Uplink::Clear).unwrap();
        assert_eq!(at(0.0), Transmission::broadcast(derive_beacon(&key, SlotIndex(0))));
        assert_eq!(at(0.0), at(0.5));
        assert_ne!(at(599.0), at(601.0));
    }

    #[test]
    fn secure_uplink_is_sealed_and_addressed() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let totem = TotemId::new("T-0001");
        let mut responder = Responder::new(totem.clone(), Keypair::generate(&mut rng));
        let mut dir = TotemDirectory::new();
        dir.insert(totem.clone(), responder.public_bytes()).unwrap();
        let (mut session, enc) = establish_session(&dir, &totem, SlotIndex(0), &mut rng).unwrap();
        responder.accept(&enc, SlotIndex(0)).unwrap();

        let d = device(2);
        let tx = d.broadcast_tick(3.0, Uplink::Secure(&mut session)).unwrap();
        assert_eq!(tx.to.as_ref(), Some(&totem));
        let Payload::Sealed(ct) = &tx.payload else { panic!("expected sealed payload") };
        assert_eq!(responder.open(ct).unwrap(), d.current_beacon(3.0).unwrap());
    }

    #[test]
    fn disclosure_sizes() {
        let d = device(3);
        // 14 days of 600 s slots: 2016 slot boundaries, both ends inclusive.
        assert_eq!(d.disclose_positive(30.0 * 86_400.0).unwrap().len(), 2017);
        assert_eq!(d.disclose_positive(30.0 * 86_400.0 + 123.0).unwrap().len(), 2017);
        assert_eq!(d.disclose_positive(0.0).unwrap().len(), 1);
        assert_eq!(d.disclose_positive(3000.0).unwrap().len(), 6);
    }

    #[test]
    fn disclosure_equals_broadcast_history() {
        let d = device(4);
        let disclosure = d.disclose_positive(7200.0).unwrap();
        for entry in &disclosure.0 {
            let t = entry.slot.start_seconds(600) as f64 + 1.0;
            assert_eq!(d.current_beacon(t).unwrap(), entry.beacon);
        }
    }

    #[test]
    fn empty_list_never_notifies() {
        let r = device(5).match_published(&list([]), 10_000.0).unwrap();
        assert!(r.matched_slots.is_empty());
        assert_eq!(r.exposure_seconds, 0);
        assert!(!r.notified);
    }

    #[test]
    fn three_matched_slots_over_two_slot_threshold() {
        let d = device(6).with_risk_threshold(1200.0);
        let now = 6000.0;
        let last_three: Vec<Beacon> = (8..=10).map(|s| d.current_beacon(s as f64 * 600.0).unwrap()).collect();
        let r = d.match_published(&list(last_three), now).unwrap();
        // Brute-force intersection: slots 8, 9, 10 are the last three before 6000 s.
        assert_eq!(r.matched_slots, (8..=10).map(SlotIndex).collect());
        assert_eq!(r.exposure_seconds, 1800);
        assert!(r.notified);
    }

    #[test]
    fn foreign_beacons_do_not_match() {
        let other = device(8);
        let foreign = other.disclose_positive(6000.0).unwrap().beacons();
        let r = device(7).match_published(&list(foreign), 6000.0).unwrap();
        assert!(r.matched_slots.is_empty());
        assert!(!r.notified);
    }

    #[test]
    fn lists_are_unioned() {
        let d = device(9).with_risk_threshold(1200.0);
        let a = list([d.current_beacon(0.0).unwrap()]);
        let b = list([d.current_beacon(600.0).unwrap()]);
        assert!(!d.match_published(&a, 1000.0).unwrap().notified);
        assert!(d.match_lists([&a, &b], 1000.0).unwrap().notified);
    }

    proptest::proptest! {
        #[test]
        fn threshold_monotonicity(
            picks in proptest::collection::btree_set(0u64..20, 0..20),
            lo in 0f64..20_000.0,
            bump in 0f64..20_000.0,
        ) {
            let base = device(10);
            let beacons: Vec<Beacon> = picks
                .iter()
                .map(|s| base.current_beacon(*s as f64 * 600.0).unwrap())
                .collect();
            let l = list(beacons);
            let low = base.clone().with_risk_threshold(lo).match_published(&l, 12_000.0).unwrap();
            let high = base.with_risk_threshold(lo + bump).match_published(&l, 12_000.0).unwrap();
            proptest::prop_assert!(!high.notified || low.notified);
            proptest::prop_assert_eq!(low.exposure_seconds, low.matched_slots.len() as u64 * 600);
        }
    }
}
