//! The trusted health authority: record storage, reconciliation of positive
//! disclosures against stored records in both storage modes, replay
//! detection, and publication of the flat beacon list.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::beacon::{Beacon, SlotIndex};
use crate::device::PositiveDisclosure;
use crate::radio::Position;
use crate::secure_channel::{open_sealed, ChannelError, Keypair};
use crate::totem::{BeaconRecord, SealedRecord, TotemError, TotemId, TotemState};

pub const DEFAULT_EPSILON_SLOTS: u64 = 1;
pub const DEFAULT_V_MAX_MPS: f64 = 42.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AuthorityError {
    #[error("positive disclosure is empty")]
    EmptyDisclosure,
    #[error("no position known for totem {0}")]
    MissingTotemPosition(TotemId),
    #[error("sealed record from {totem} could not be opened: {source}")]
    Sealed { totem: TotemId, source: ChannelError },
    #[error("sealed record from {0} has the wrong length")]
    SealedLength(TotemId),
    #[error("invalid published list: {0}")]
    Format(String),
    #[error(transparent)]
    Totem(#[from] TotemError),
}

/// Flat, unlabeled set of positive and negative beacons.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PublishedList {
    pub beacons: BTreeSet<Beacon>,
    pub published_at: f64,
}

#[derive(Serialize, Deserialize)]
struct PublishedFile {
    published_at: f64,
    beacons: Vec<Beacon>,
}

impl PublishedList {
    pub fn len(&self) -> usize {
        self.beacons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beacons.is_empty()
    }

    pub fn contains(&self, beacon: &Beacon) -> bool {
        self.beacons.contains(beacon)
    }

    /// Beacons in the order they appear in the serialized file for `seed`.
    pub fn shuffled(&self, seed: u64) -> Vec<Beacon> {
        let mut order: Vec<Beacon> = self.beacons.iter().copied().collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, AuthorityError> {
        let file: PublishedFile =
            serde_json::from_slice(bytes).map_err(|e| AuthorityError::Format(e.to_string()))?;
        Ok(Self { beacons: file.beacons.into_iter().collect(), published_at: file.published_at })
    }
}

/// Serializes a list as `{"published_at": t, "beacons": [...]}` in a
/// seeded shuffle order. Byte-stable for a given seed.
pub fn publish(list: &PublishedList, seed: u64) -> Vec<u8> {
    let file = PublishedFile { published_at: list.published_at, beacons: list.shuffled(seed) };
    let mut out = serde_json::to_vec(&file).expect("published list serializes");
    out.push(b'\n');
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReceivedDisclosure {
    pub disclosure: PositiveDisclosure,
    pub received_at: f64,
}

/// Result of a decentralized reconciliation round.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconciliation {
    pub list: PublishedList,
    /// Totems that could not be queried; their negatives are missing.
    pub unreachable: Vec<TotemId>,
}

#[derive(Debug, Clone, Default)]
pub struct AuthorityStore {
    records: BTreeSet<BeaconRecord>,
    by_beacon: BTreeMap<Beacon, BTreeSet<(TotemId, SlotIndex)>>,
    by_totem_slot: BTreeMap<(TotemId, SlotIndex), BTreeSet<Beacon>>,
    positives: Vec<ReceivedDisclosure>,
    excluded: BTreeSet<Beacon>,
}

impl AuthorityStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &BeaconRecord> {
        self.records.iter()
    }

    pub fn positives(&self) -> &[ReceivedDisclosure] {
        &self.positives
    }

    /// Sightings of a beacon, from the beacon index.
    pub fn sightings(&self, beacon: &Beacon) -> Vec<(TotemId, SlotIndex)> {
        self.by_beacon.get(beacon).map(|s| s.iter().cloned().collect()).unwrap_or_default()
    }

    /// Beacons held for one totem and slot, from the (totem, slot) index.
    pub fn beacons_at(&self, totem: &TotemId, slot: SlotIndex) -> Vec<Beacon> {
        self.by_totem_slot
            .get(&(totem.clone(), slot))
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default()
    }

    /// Appends a batch; returns how many triples were new.
    pub fn ingest_records(&mut self, batch: impl IntoIterator<Item = BeaconRecord>) -> usize {
        let mut added = 0;
        for record in batch {
            if self.records.contains(&record) {
                continue;
            }
            self.by_beacon
                .entry(record.beacon)
                .or_default()
                .insert((record.totem.clone(), record.slot));
            self.by_totem_slot
                .entry((record.totem.clone(), record.slot))
                .or_default()
                .insert(record.beacon);
            self.records.insert(record);
            added += 1;
        }
        added
    }

    /// Opens a sealed batch flushed by `totem` and ingests it.
    pub fn ingest_sealed(
        &mut self,
        keys: &Keypair,
        totem: &TotemId,
        batch: &[SealedRecord],
    ) -> Result<usize, AuthorityError> {
        let mut records = Vec::with_capacity(batch.len());
        for sealed in batch {
            let plain = open_sealed(keys, &sealed.0)
                .map_err(|source| AuthorityError::Sealed { totem: totem.clone(), source })?;
            if plain.len() != 24 {
                return Err(AuthorityError::SealedLength(totem.clone()));
            }
            let slot = SlotIndex(u64::from_be_bytes(plain[..8].try_into().expect("sliced")));
            let beacon = Beacon::from_slice(&plain[8..]).expect("sliced");
            records.push(BeaconRecord::new(totem.clone(), slot, beacon));
        }
        Ok(self.ingest_records(records))
    }

    /// Stores a disclosure. Returns `false` if the same beacon set is already held.
    pub fn ingest_positive(
        &mut self,
        disclosure: PositiveDisclosure,
        received_at: f64,
    ) -> Result<bool, AuthorityError> {
        if disclosure.is_empty() {
            return Err(AuthorityError::EmptyDisclosure);
        }
        let beacons = disclosure.beacons();
        if self.positives.iter().any(|p| p.disclosure.beacons() == beacons) {
            return Ok(false);
        }
        self.positives.push(ReceivedDisclosure { disclosure, received_at });
        Ok(true)
    }

    /// Marks beacons as fraudulent; they no longer seed or join windows.
    pub fn exclude(&mut self, beacons: impl IntoIterator<Item = Beacon>) {
        self.excluded.extend(beacons);
    }

    pub fn excluded(&self) -> &BTreeSet<Beacon> {
        &self.excluded
    }

    pub fn reconcile_centralized(
        &self,
        disclosure: &PositiveDisclosure,
        epsilon: u64,
        published_at: f64,
    ) -> PublishedList {
        let mut beacons = disclosure.beacons();
        for entry in &disclosure.0 {
            if self.excluded.contains(&entry.beacon) {
                continue;
            }
            let Some(sightings) = self.by_beacon.get(&entry.beacon) else { continue };
            for (totem, _) in sightings.iter().filter(|(_, s)| *s == entry.slot) {
                let (lo, hi) = entry.slot.window(epsilon);
                let window = self.by_totem_slot.range((totem.clone(), lo)..=(totem.clone(), hi));
                for (_, held) in window {
                    beacons.extend(held.iter().filter(|b| !self.excluded.contains(*b)));
                }
            }
        }
        PublishedList { beacons, published_at }
    }

    /// Flags every beacon seen at two totems farther apart than a traveller
    /// at `v_max` could cover between the two slots.
    pub fn detect_fraud(
        &self,
        v_max: f64,
        totem_positions: &BTreeMap<TotemId, Position>,
        slot_len: u64,
    ) -> Result<BTreeSet<Beacon>, AuthorityError> {
        if let Some(r) = self.records.iter().find(|r| !totem_positions.contains_key(&r.totem)) {
            return Err(AuthorityError::MissingTotemPosition(r.totem.clone()));
        }
        let mut flagged = BTreeSet::new();
        for (beacon, sightings) in &self.by_beacon {
            if sightings.len() < 2 {
                continue;
            }
            let sightings: Vec<_> = sightings.iter().collect();
            'pairs: for (i, (t1, s1)) in sightings.iter().enumerate() {
                for (t2, s2) in &sightings[i + 1..] {
                    if t1 == t2 {
                        continue;
                    }
                    if is_infeasible(
                        &totem_positions[t1],
                        &totem_positions[t2],
                        s1.distance(*s2),
                        v_max,
                        slot_len,
                    ) {
                        flagged.insert(*beacon);
                        break 'pairs;
                    }
                }
            }
        }
        Ok(flagged)
    }
}

/// The speed-infeasibility rule: distance > v_max * max(1, |dslot|) * slot_len.
pub fn is_infeasible(a: &Position, b: &Position, slot_gap: u64, v_max: f64, slot_len: u64) -> bool {
    a.distance(b) > v_max * slot_gap.max(1) as f64 * slot_len as f64
}

/// Pushes the positives to every reachable totem and unions the answers.
pub fn reconcile_decentralized<'a>(
    disclosure: &PositiveDisclosure,
    totems: impl IntoIterator<Item = &'a TotemState>,
    epsilon: u64,
    unreachable: &BTreeSet<TotemId>,
    published_at: f64,
) -> Result<Reconciliation, AuthorityError> {
    let positives = disclosure.pairs();
    let mut beacons = disclosure.beacons();
    let mut skipped = Vec::new();
    for totem in totems {
        if unreachable.contains(totem.id()) {
            skipped.push(totem.id().clone());
            continue;
        }
        beacons.extend(totem.query_window(&positives, epsilon)?.into_iter().map(|r| r.beacon));
    }
    Ok(Reconciliation { list: PublishedList { beacons, published_at }, unreachable: skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::radio::Transmission;
    use crate::totem::{ProtocolMode, TotemSite};

    fn b(c: u8) -> Beacon {
        Beacon([c; 16])
    }

    fn rec(t: &str, s: u64, c: u8) -> BeaconRecord {
        BeaconRecord::new(TotemId::new(t), SlotIndex(s), b(c))
    }

    fn disclosure(entries: &[(u64, u8)]) -> PositiveDisclosure {
        PositiveDisclosure::from_pairs(entries.iter().map(|(s, c)| (SlotIndex(*s), b(*c))))
    }

    #[test]
    fn ingest_coalesces_and_counts() {
        let mut store = AuthorityStore::new();
        assert_eq!(store.ingest_records(vec![]), 0);
        assert_eq!(store.ingest_records(vec![rec("t", 1, 1), rec("t", 1, 1)]), 1);
        assert_eq!(store.ingest_records((2..5).map(|c| rec("t", 1, c))), 3);
        assert_eq!(store.len(), 4);
    }

    #[test]
    fn indexes_agree_with_linear_scan() {
        let mut store = AuthorityStore::new();
        let batch: Vec<_> = (0..30u8).map(|i| rec(["a", "b", "c"][i as usize % 3], (i % 5) as u64, i % 7)).collect();
        store.ingest_records(batch);
        for r in store.records() {
            let scan: Vec<_> = store
                .records()
                .filter(|x| x.beacon == r.beacon)
                .map(|x| (x.totem.clone(), x.slot))
                .collect();
            assert_eq!(store.sightings(&r.beacon), scan);
            let scan: Vec<_> = store
                .records()
                .filter(|x| x.totem == r.totem && x.slot == r.slot)
                .map(|x| x.beacon)
                .collect();
            assert_eq!(store.beacons_at(&r.totem, r.slot), scan);
        }
    }

    #[test]
    fn positive_ingest_rules() {
        let mut store = AuthorityStore::new();
        assert_eq!(
            store.ingest_positive(PositiveDisclosure::default(), 0.0),
            Err(AuthorityError::EmptyDisclosure)
        );
        assert_eq!(store.ingest_positive(disclosure(&[(1, 1), (2, 2)]), 5.0), Ok(true));
        assert_eq!(store.ingest_positive(disclosure(&[(2, 2), (1, 1)]), 6.0), Ok(false));
        assert_eq!(store.positives().len(), 1);
    }

    #[test]
    fn unseen_positives_publish_alone() {
        let mut store = AuthorityStore::new();
        store.ingest_records(vec![rec("t", 5, 9)]);
        let list = store.reconcile_centralized(&disclosure(&[(5, 1), (6, 2)]), 1, 0.0);
        assert_eq!(list.beacons, [b(1), b(2)].into());
    }

    #[test]
    fn centralized_window_example() {
        let mut store = AuthorityStore::new();
        store.ingest_records(vec![rec("t", 5, b'a'), rec("t", 5, b'x'), rec("t", 6, b'y'), rec("t", 8, b'z')]);
        let list = store.reconcile_centralized(&disclosure(&[(5, b'a')]), 1, 0.0);
        assert_eq!(list.beacons, [b(b'a'), b(b'x'), b(b'y')].into());
    }

    #[test]
    fn windows_union_across_totems() {
        let mut store = AuthorityStore::new();
        store.ingest_records(vec![
            rec("t1", 5, b'a'),
            rec("t1", 4, b'p'),
            rec("t2", 5, b'a'),
            rec("t2", 6, b'q'),
            rec("t3", 5, b'r'),
        ]);
        let list = store.reconcile_centralized(&disclosure(&[(5, b'a')]), 1, 0.0);
        assert_eq!(list.beacons, [b(b'a'), b(b'p'), b(b'q')].into());
    }

    #[test]
    fn slot_must_match_to_seed_a_window() {
        let mut store = AuthorityStore::new();
        store.ingest_records(vec![rec("t", 7, b'a'), rec("t", 7, b'x')]);
        let list = store.reconcile_centralized(&disclosure(&[(5, b'a')]), 5, 0.0);
        assert_eq!(list.beacons, [b(b'a')].into());
    }

    fn positions(entries: &[(&str, f64)]) -> BTreeMap<TotemId, Position> {
        entries.iter().map(|(t, x)| (TotemId::new(*t), Position::new(*x, 0.0))).collect()
    }

    #[test]
    fn fraud_rule_examples() {
        let mut store = AuthorityStore::new();
        store.ingest_records(vec![rec("a", 3, 1), rec("near", 3, 1), rec("far", 3, 2), rec("a", 3, 2), rec("a", 3, 3)]);
        let pos = positions(&[("a", 0.0), ("near", 10_000.0), ("far", 30_000.0)]);
        // 10 km < 42 * 600 = 25.2 km: admissible. 30 km > 25.2 km: flagged.
        let flagged = store.detect_fraud(42.0, &pos, 600).unwrap();
        assert_eq!(flagged, [b(2)].into());
    }

    #[test]
    fn fraud_bound_grows_with_slot_gap() {
        let mut store = AuthorityStore::new();
        store.ingest_records(vec![rec("a", 3, 1), rec("far", 5, 1)]);
        let pos = positions(&[("a", 0.0), ("far", 30_000.0)]);
        assert!(store.detect_fraud(42.0, &pos, 600).unwrap().is_empty());
        assert!(is_infeasible(&Position::new(0.0, 0.0), &Position::new(30_000.0, 0.0), 0, 42.0, 600));
        assert!(!is_infeasible(&Position::new(0.0, 0.0), &Position::new(30_000.0, 0.0), 2, 42.0, 600));
    }

    #[test]
    fn fraud_needs_every_position() {
        let mut store = AuthorityStore::new();
        store.ingest_records(vec![rec("a", 1, 1), rec("ghost", 1, 1)]);
        assert_eq!(
            store.detect_fraud(42.0, &positions(&[("a", 0.0)]), 600),
            Err(AuthorityError::MissingTotemPosition(TotemId::new("ghost")))
        );
    }

    #[test]
    fn excluded_beacons_neither_seed_nor_join() {
        let mut store = AuthorityStore::new();
        store.ingest_records(vec![rec("t", 5, b'a'), rec("t", 5, b'x'), rec("t", 5, b'f'), rec("u", 9, b'c'), rec("u", 9, b'y')]);
        store.exclude([b(b'a'), b(b'f')]);
        let list = store.reconcile_centralized(&disclosure(&[(5, b'a'), (9, b'c')]), 0, 0.0);
        assert_eq!(list.beacons, [b(b'a'), b(b'c'), b(b'y')].into());
    }

    fn totem_with(id: &str, records: &[(u64, u8)]) -> TotemState {
        let site = TotemSite { id: TotemId::new(id), x: 0.0, y: 0.0, radio_range_m: 10.0 };
        let mut t = TotemState::new(site, ProtocolMode::Decentralized, 1);
        for (s, c) in records {
            t.receive_beacon(&Transmission::broadcast(b(*c)), *s as f64).unwrap();
        }
        t
    }

    #[test]
    fn decentralized_matches_centralized_example() {
        let d = disclosure(&[(5, b'a')]);
        let totem = totem_with("t", &[(5, b'a'), (5, b'x'), (6, b'y')]);
        let r = reconcile_decentralized(&d, [&totem], 1, &BTreeSet::new(), 0.0).unwrap();
        assert_eq!(r.list.beacons, [b(b'a'), b(b'x'), b(b'y')].into());
        assert!(r.unreachable.is_empty());

        let none = reconcile_decentralized(&d, [], 1, &BTreeSet::new(), 0.0).unwrap();
        assert_eq!(none.list.beacons, [b(b'a')].into());
    }

    #[test]
    fn unreachable_totem_loses_its_negatives() {
        let d = disclosure(&[(5, b'a')]);
        let t1 = totem_with("t1", &[(5, b'a'), (5, b'x')]);
        let t2 = totem_with("t2", &[(5, b'a'), (5, b'y')]);
        let down: BTreeSet<_> = [TotemId::new("t2")].into();
        let r = reconcile_decentralized(&d, [&t1, &t2], 0, &down, 0.0).unwrap();
        assert_eq!(r.list.beacons, [b(b'a'), b(b'x')].into());
        assert_eq!(r.unreachable, vec![TotemId::new("t2")]);
    }

    #[test]
    fn publish_is_seeded_and_flat() {
        let empty = PublishedList::default();
        assert_eq!(publish(&empty, 1), b"{\"published_at\":0.0,\"beacons\":[]}\n".to_vec());

        let list = PublishedList { beacons: (0..20).map(b).collect(), published_at: 60.0 };
        assert_eq!(publish(&list, 7), publish(&list, 7));
        assert_ne!(publish(&list, 7), publish(&list, 8));
        let back = PublishedList::from_json(&publish(&list, 8)).unwrap();
        assert_eq!(back, list);
        let text = String::from_utf8(publish(&list, 7)).unwrap();
        assert!(!text.contains("slot") && !text.contains("totem"));
    }
}
