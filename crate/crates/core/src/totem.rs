//! Edge totems: receive beacons, then either forward them to the authority
//! once per slot (centralized) or keep them and answer window queries.

use std::collections::BTreeSet;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::beacon::{slot_of, Beacon, BeaconError, SlotIndex};
use crate::radio::{Payload, Position, Transmission};
use crate::secure_channel::{seal_to, ChannelError, Keypair, Responder};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TotemId(String);

impl TotemId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    /// Conventional zero-padded id, e.g. `T-0001`.
    pub fn numbered(n: usize) -> Self {
        Self(format!("T-{n:04}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TotemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolMode {
    /// Totems forward every slot's records to the authority.
    Centralized,
    /// Totems keep records and answer positive-beacon window queries.
    Decentralized,
    /// Decentralized storage plus device-to-totem encryption on the air.
    PrivacyEnhanced,
}

impl ProtocolMode {
    pub const ALL: [ProtocolMode; 3] =
        [ProtocolMode::Centralized, ProtocolMode::Decentralized, ProtocolMode::PrivacyEnhanced];

    pub fn stores_locally(self) -> bool {
        !matches!(self, ProtocolMode::Centralized)
    }

    pub fn encrypts_uplink(self) -> bool {
        matches!(self, ProtocolMode::PrivacyEnhanced)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ProtocolMode::Centralized => "centralized",
            ProtocolMode::Decentralized => "decentralized",
            ProtocolMode::PrivacyEnhanced => "privacy_enhanced",
        }
    }
}

impl fmt::Display for ProtocolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ProtocolMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "centralized" => Ok(ProtocolMode::Centralized),
            "decentralized" => Ok(ProtocolMode::Decentralized),
            "privacy_enhanced" => Ok(ProtocolMode::PrivacyEnhanced),
            other => Err(format!(
                "unknown mode `{other}` (expected centralized, decentralized or privacy_enhanced)"
            )),
        }
    }
}

/// Storage tuple `<totem-ID, time-slot, beacon>`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BeaconRecord {
    pub totem: TotemId,
    pub slot: SlotIndex,
    pub beacon: Beacon,
}

impl BeaconRecord {
    pub fn new(totem: TotemId, slot: SlotIndex, beacon: Beacon) -> Self {
        Self { totem, slot, beacon }
    }
}

/// Placement of a totem, as written in configs and `totems.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TotemSite {
    pub id: TotemId,
    pub x: f64,
    pub y: f64,
    pub radio_range_m: f64,
}

impl TotemSite {
    pub fn position(&self) -> Position {
        Position::new(self.x, self.y)
    }
}

/// A record sealed to the authority's public key (`slot BE || beacon` inside).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SealedRecord(#[serde(with = "hex::serde")] pub Vec<u8>);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TotemError {
    #[error("`{op}` is not available in {mode} mode")]
    WrongMode { op: &'static str, mode: ProtocolMode },
    #[error("`{op}` is not available when records are encrypted at rest")]
    SealedStorage { op: &'static str },
    #[error("encryption at rest is only supported for the centralized pending buffer")]
    AtRestUnsupported,
    #[error("privacy-enhanced totem {0} has no key pair")]
    MissingKeys(TotemId),
    #[error(transparent)]
    Time(#[from] BeaconError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

/// Outcome of one reception.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Receipt {
    Stored,
    /// Same (slot, beacon) already held; coalesced.
    Coalesced,
    SessionOpened,
    /// Addressed to another totem.
    NotForUs,
    /// Undecryptable or unexpected payload; counted in `dropped`.
    Dropped,
}

#[derive(Debug, Clone)]
enum Pending {
    Plain(BTreeSet<(SlotIndex, Beacon)>),
    Sealed { authority_pk: [u8; 32], rng: ChaCha8Rng, records: Vec<SealedRecord> },
}

#[derive(Debug, Clone)]
pub struct TotemState {
    site: TotemSite,
    mode: ProtocolMode,
    slot_len: u64,
    local_store: BTreeSet<(SlotIndex, Beacon)>,
    pending: Pending,
    responder: Option<Responder>,
    dropped: u64,
}

impl TotemState {
    pub fn new(site: TotemSite, mode: ProtocolMode, slot_len: u64) -> Self {
        Self {
            site,
            mode,
            slot_len,
            local_store: BTreeSet::new(),
            pending: Pending::Plain(BTreeSet::new()),
            responder: None,
            dropped: 0,
        }
    }

    /// Installs the long-term key pair used to accept sessions.
    pub fn with_keypair(mut self, keys: Keypair) -> Self {
        self.responder = Some(Responder::new(self.site.id.clone(), keys));
        self
    }

    /// Seals every buffered record to the authority's public key. Duplicates
    /// are then coalesced by the authority on ingest rather than here.
    pub fn with_encrypt_at_rest(
        mut self,
        authority_pk: [u8; 32],
        seed: u64,
    ) -> Result<Self, TotemError> {
        if self.mode != ProtocolMode::Centralized {
            return Err(TotemError::AtRestUnsupported);
        }
        self.pending = Pending::Sealed {
            authority_pk,
            rng: ChaCha8Rng::seed_from_u64(seed),
            records: Vec::new(),
        };
        Ok(self)
    }

    pub fn id(&self) -> &TotemId {
        &self.site.id
    }

    pub fn site(&self) -> &TotemSite {
        &self.site
    }

    pub fn mode(&self) -> ProtocolMode {
        self.mode
    }

    pub fn public_key(&self) -> Option<[u8; 32]> {
        self.responder.as_ref().map(Responder::public_bytes)
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn encrypts_at_rest(&self) -> bool {
        matches!(self.pending, Pending::Sealed { .. })
    }

    pub fn pending_len(&self) -> usize {
        match &self.pending {
            Pending::Plain(set) => set.len(),
            Pending::Sealed { records, .. } => records.len(),
        }
    }

    pub fn local_len(&self) -> usize {
        self.local_store.len()
    }

    /// Records currently held in local storage, sorted.
    pub fn local_records(&self) -> Vec<BeaconRecord> {
        self.local_store
            .iter()
            .map(|(slot, beacon)| BeaconRecord::new(self.site.id.clone(), *slot, *beacon))
            .collect()
    }

    pub fn receive_beacon(&mut self, tx: &Transmission, now: f64) -> Result<Receipt, TotemError> {
        if !tx.is_for(&self.site.id) {
            return Ok(Receipt::NotForUs);
        }
        let slot = slot_of(now, self.slot_len)?;
        let beacon = match &tx.payload {
            Payload::Clear(b) if !self.mode.encrypts_uplink() => *b,
            Payload::Handshake(enc) if self.mode.encrypts_uplink() => {
                let responder = self
                    .responder
                    .as_mut()
                    .ok_or_else(|| TotemError::MissingKeys(self.site.id.clone()))?;
                responder.expire_before(SlotIndex(slot.0.saturating_sub(1)));
                return Ok(match responder.accept(enc, slot) {
                    Ok(()) => Receipt::SessionOpened,
                    Err(_) => self.drop_one(),
                });
            }
            Payload::Sealed(ct) if self.mode.encrypts_uplink() => {
                let responder = self
                    .responder
                    .as_ref()
                    .ok_or_else(|| TotemError::MissingKeys(self.site.id.clone()))?;
                match responder.open(ct) {
                    Ok(b) => b,
                    Err(_) => return Ok(self.drop_one()),
                }
            }
            _ => return Ok(self.drop_one()),
        };
        Ok(self.store(slot, beacon)?)
    }

    fn drop_one(&mut self) -> Receipt {
        self.dropped += 1;
        Receipt::Dropped
    }

    fn store(&mut self, slot: SlotIndex, beacon: Beacon) -> Result<Receipt, ChannelError> {
        let fresh = if self.mode.stores_locally() {
            self.local_store.insert((slot, beacon))
        } else {
            match &mut self.pending {
                Pending::Plain(set) => set.insert((slot, beacon)),
                Pending::Sealed { authority_pk, rng, records } => {
                    let mut plain = Vec::with_capacity(24);
                    plain.extend_from_slice(&slot.0.to_be_bytes());
                    plain.extend_from_slice(beacon.as_bytes());
                    records.push(SealedRecord(seal_to(authority_pk, &plain, rng)?));
                    true
                }
            }
        };
        Ok(if fresh { Receipt::Stored } else { Receipt::Coalesced })
    }

    /// Drains the plaintext pending buffer in (slot, beacon) order.
    pub fn flush_centralized(&mut self) -> Result<Vec<BeaconRecord>, TotemError> {
        if self.mode != ProtocolMode::Centralized {
            return Err(TotemError::WrongMode { op: "flush_centralized", mode: self.mode });
        }
        match &mut self.pending {
            Pending::Plain(set) => {
                let id = &self.site.id;
                Ok(std::mem::take(set)
                    .into_iter()
                    .map(|(slot, beacon)| BeaconRecord::new(id.clone(), slot, beacon))
                    .collect())
            }
            Pending::Sealed { .. } => Err(TotemError::SealedStorage { op: "flush_centralized" }),
        }
    }

    /// Drains the sealed pending buffer in arrival order.
    pub fn flush_sealed(&mut self) -> Result<Vec<SealedRecord>, TotemError> {
        match &mut self.pending {
            Pending::Sealed { records, .. } => Ok(std::mem::take(records)),
            Pending::Plain(_) => Err(TotemError::SealedStorage { op: "flush_sealed" }),
        }
    }

    /// Every stored record within `epsilon` slots of a positive held here,
    /// excluding the positive beacon itself. Deduplicated and sorted.
    pub fn query_window(
        &self,
        positives: &[(SlotIndex, Beacon)],
        epsilon: u64,
    ) -> Result<Vec<BeaconRecord>, TotemError> {
        if !self.mode.stores_locally() {
            return Err(TotemError::WrongMode { op: "query_window", mode: self.mode });
        }
        let mut out = BTreeSet::new();
        for (tau, positive) in positives {
            if !self.local_store.contains(&(*tau, *positive)) {
                continue;
            }
            let (lo, hi) = tau.window(epsilon);
            for (slot, beacon) in
                self.local_store.range((lo, Beacon([0; 16]))..=(hi, Beacon([0xff; 16])))
            {
                if beacon != positive {
                    out.insert((*slot, *beacon));
                }
            }
        }
        Ok(out
            .into_iter()
            .map(|(slot, beacon)| BeaconRecord::new(self.site.id.clone(), slot, beacon))
            .collect())
    }

    /// What a physical attacker reading the totem's storage would see.
    pub fn at_rest_bytes(&self) -> Vec<Vec<u8>> {
        let plain = |(slot, beacon): &(SlotIndex, Beacon)| {
            let mut v = slot.0.to_be_bytes().to_vec();
            v.extend_from_slice(beacon.as_bytes());
            v
        };
        let mut out: Vec<Vec<u8>> = self.local_store.iter().map(plain).collect();
        match &self.pending {
            Pending::Plain(set) => out.extend(set.iter().map(plain)),
            Pending::Sealed { records, .. } => out.extend(records.iter().map(|r| r.0.clone())),
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::secure_channel::{establish_session, Ciphertext, TotemDirectory};

    fn site() -> TotemSite {
        TotemSite { id: TotemId::new("t"), x: 0.0, y: 0.0, radio_range_m: 30.0 }
    }

    fn clear(n: u8) -> Transmission {
        Transmission::broadcast(Beacon([n; 16]))
    }

    #[test]
    fn duplicate_in_slot_is_coalesced() {
        let mut t = TotemState::new(site(), ProtocolMode::Decentralized, 600);
        assert_eq!(t.receive_beacon(&clear(1), 10.0).unwrap(), Receipt::Stored);
        assert_eq!(t.receive_beacon(&clear(1), 10.5).unwrap(), Receipt::Coalesced);
        assert_eq!(t.local_len(), 1);
    }

    #[test]
    fn distinct_slots_give_distinct_records() {
        let mut t = TotemState::new(site(), ProtocolMode::Decentralized, 10);
        t.receive_beacon(&clear(1), 70.0).unwrap();
        t.receive_beacon(&clear(1), 80.0).unwrap();
        let slots: Vec<_> = t.local_records().iter().map(|r| r.slot).collect();
        assert_eq!(slots, vec![SlotIndex(7), SlotIndex(8)]);
    }

    #[test]
    fn garbage_in_privacy_mode_is_dropped() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut t = TotemState::new(site(), ProtocolMode::PrivacyEnhanced, 600)
            .with_keypair(Keypair::generate(&mut rng));
        let garbage = Transmission::addressed(
            Payload::Sealed(Ciphertext::from_wire(vec![0; 46])),
            TotemId::new("t"),
        );
        assert_eq!(t.receive_beacon(&garbage, 0.0).unwrap(), Receipt::Dropped);
        // Cleartext is not accepted either.
        assert_eq!(t.receive_beacon(&clear(3), 0.0).unwrap(), Receipt::Dropped);
        assert_eq!(t.dropped(), 2);
        assert_eq!(t.local_len(), 0);
    }

    #[test]
    fn privacy_mode_decrypts_into_local_store() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut t = TotemState::new(site(), ProtocolMode::PrivacyEnhanced, 600)
            .with_keypair(Keypair::generate(&mut rng));
        let mut dir = TotemDirectory::new();
        dir.insert(t.id().clone(), t.public_key().unwrap()).unwrap();
        let (mut s, enc) = establish_session(&dir, t.id(), SlotIndex(0), &mut rng).unwrap();
        let id = t.id().clone();
        let hs = Transmission::addressed(Payload::Handshake(enc), id.clone());
        assert_eq!(t.receive_beacon(&hs, 1.0).unwrap(), Receipt::SessionOpened);
        let b = Beacon([5; 16]);
        for now in [1.0, 1.5] {
            let tx = Transmission::addressed(Payload::Sealed(s.encrypt_beacon(&b).unwrap()), id.clone());
            t.receive_beacon(&tx, now).unwrap();
        }
        assert_eq!(t.local_records(), vec![BeaconRecord::new(id, SlotIndex(0), b)]);
    }

    #[test]
    fn flush_drains_in_order() {
        let mut t = TotemState::new(site(), ProtocolMode::Centralized, 600);
        assert!(t.flush_centralized().unwrap().is_empty());
        for n in [3, 1, 2] {
            t.receive_beacon(&clear(n), 5.0).unwrap();
        }
        let flushed = t.flush_centralized().unwrap();
        assert_eq!(flushed.len(), 3);
        assert!(flushed.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(t.pending_len(), 0);
        assert_eq!(t.local_len(), 0);
        assert!(t.flush_centralized().unwrap().is_empty());
    }

    #[test]
    fn mode_guards() {
        let mut d = TotemState::new(site(), ProtocolMode::Decentralized, 600);
        assert!(matches!(d.flush_centralized(), Err(TotemError::WrongMode { .. })));
        let c = TotemState::new(site(), ProtocolMode::Centralized, 600);
        assert!(matches!(c.query_window(&[], 1), Err(TotemError::WrongMode { .. })));
        assert!(matches!(
            TotemState::new(site(), ProtocolMode::Decentralized, 600).with_encrypt_at_rest([9; 32], 0),
            Err(TotemError::AtRestUnsupported)
        ));
    }

    fn store_with(records: &[(u64, u8)]) -> TotemState {
        let mut t = TotemState::new(site(), ProtocolMode::Decentralized, 1);
        for (slot, b) in records {
            t.receive_beacon(&clear(*b), *slot as f64).unwrap();
        }
        t
    }

    /// Brute-force window filter used as the oracle below.
    fn oracle(store: &[(u64, u8)], positive: (u64, u8), eps: u64) -> Vec<(u64, u8)> {
        if !store.contains(&positive) {
            return vec![];
        }
        let mut out: Vec<_> = store
            .iter()
            .filter(|(s, b)| s.abs_diff(positive.0) <= eps && *b != positive.1)
            .copied()
            .collect();
        out.sort();
        out.dedup();
        out
    }

    #[test]
    fn query_window_examples() {
        let store = [(5, b'a'), (5, b'b'), (6, b'c')];
        let t = store_with(&store);
        let pos = |s: u64, b: u8| vec![(SlotIndex(s), Beacon([b; 16]))];
        let as_pairs = |v: Vec<BeaconRecord>| -> Vec<(u64, u8)> {
            v.into_iter().map(|r| (r.slot.0, r.beacon.0[0])).collect()
        };
        assert!(t.query_window(&pos(5, b'z'), 1).unwrap().is_empty());
        assert_eq!(as_pairs(t.query_window(&pos(5, b'a'), 0).unwrap()), vec![(5, b'b')]);
        assert_eq!(oracle(&store, (5, b'a'), 0), vec![(5, b'b')]);
        assert_eq!(
            as_pairs(t.query_window(&pos(5, b'a'), 1).unwrap()),
            vec![(5, b'b'), (6, b'c')]
        );
        assert_eq!(oracle(&store, (5, b'a'), 1), vec![(5, b'b'), (6, b'c')]);
    }

    #[test]
    fn encrypt_at_rest_hides_beacons() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let authority = Keypair::generate(&mut rng);
        let mut t = TotemState::new(site(), ProtocolMode::Centralized, 600)
            .with_encrypt_at_rest(authority.public_bytes(), 11)
            .unwrap();
        let beacons: Vec<Beacon> = (1..=4).map(|n| Beacon([n * 17; 16])).collect();
        for b in &beacons {
            t.receive_beacon(&Transmission::broadcast(*b), 0.0).unwrap();
        }
        for blob in t.at_rest_bytes() {
            for b in &beacons {
                assert!(!blob.windows(16).any(|w| w == b.as_bytes()));
            }
        }
        assert!(matches!(t.flush_centralized(), Err(TotemError::SealedStorage { .. })));
        assert_eq!(t.flush_sealed().unwrap().len(), 4);
    }

    proptest::proptest! {
        #[test]
        fn query_window_matches_oracle(
            store in proptest::collection::vec((0u64..20, 0u8..6), 0..40),
            positive in (0u64..20, 0u8..6),
            eps in 0u64..4,
        ) {
            let t = store_with(&store);
            let got: Vec<(u64, u8)> = t
                .query_window(&[(SlotIndex(positive.0), Beacon([positive.1; 16]))], eps)
                .unwrap()
                .into_iter()
                .map(|r| (r.slot.0, r.beacon.0[0]))
                .collect();
            proptest::prop_assert_eq!(got, oracle(&store, positive, eps));
        }
    }
}
