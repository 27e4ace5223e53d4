//! Time-slot arithmetic and ephemeral beacon derivation.
//!
//! A beacon is the AES-128 encryption of the slot index under the device key.
//! The cipher input is the canonical block `[0u8; 8] || slot.to_be_bytes()`, so
//! a device can regenerate any past beacon from its key alone and never needs
//! to keep a history.

use std::fmt;
use std::str::FromStr;

use aes::cipher::generic_array::GenericArray;
use aes::cipher::{BlockEncrypt, KeyInit};
use aes::Aes128;
use rand::RngCore;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Length of a beacon on the air, in bytes.
pub const BEACON_LEN: usize = 16;

/// Default slot length: ten minutes.
pub const DEFAULT_SLOT_LEN_S: u64 = 600;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BeaconError {
    #[error("slot length must be a positive number of seconds")]
    ZeroSlotLength,
    #[error("timestamp {0} is not a finite, non-negative number of seconds")]
    InvalidTimestamp(f64),
    #[error("empty slot window: from {from} is after to {to}")]
    EmptyWindow { from: u64, to: u64 },
    #[error("invalid beacon encoding: {0}")]
    Encoding(String),
}

/// Count of slots since time zero of the simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SlotIndex(pub u64);

impl SlotIndex {
    pub fn get(self) -> u64 {
        self.0
    }

    /// Absolute slot distance.
    pub fn distance(self, other: SlotIndex) -> u64 {
        self.0.abs_diff(other.0)
    }

    /// Inclusive window `[self - radius, self + radius]`, saturating at zero.
    pub fn window(self, radius: u64) -> (SlotIndex, SlotIndex) {
        (
            SlotIndex(self.0.saturating_sub(radius)),
            SlotIndex(self.0.saturating_add(radius)),
        )
    }

    /// Start of this slot, in seconds.
    pub fn start_seconds(self, slot_len: u64) -> u64 {
        self.0 * slot_len
    }
}

impl fmt::Display for SlotIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Quantizes a timestamp (seconds since simulation start) onto its slot.
pub fn slot_of(timestamp: f64, slot_len: u64) -> Result<SlotIndex, BeaconError> {
    if slot_len == 0 {
        return Err(BeaconError::ZeroSlotLength);
    }
    if !timestamp.is_finite() || timestamp < 0.0 {
        return Err(BeaconError::InvalidTimestamp(timestamp));
    }
    Ok(SlotIndex((timestamp / slot_len as f64).floor() as u64))
}

/// Simulation-internal device identifier. Never leaves the simulation layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DeviceId(pub u32);

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "D-{:04}", self.0)
    }
}

/// 128-bit beacon-generation secret held by one device.
///
/// Intentionally not `Serialize`: the key never appears in any artifact.
#[derive(Clone, PartialEq, Eq)]
pub struct DeviceKey {
    key: [u8; 16],
    owner: DeviceId,
}

impl DeviceKey {
    pub fn new(key: [u8; 16], owner: DeviceId) -> Self {
        Self { key, owner }
    }

    pub fn generate<R: RngCore + ?Sized>(owner: DeviceId, rng: &mut R) -> Self {
        let mut key = [0u8; 16];
        rng.fill_bytes(&mut key);
        Self { key, owner }
    }

    /// Parses a 32-character hex key, as taken by the `match` subcommand.
    pub fn from_hex(hex_key: &str, owner: DeviceId) -> Result<Self, BeaconError> {
        let bytes = hex::decode(hex_key.trim()).map_err(|e| BeaconError::Encoding(e.to_string()))?;
        let key: [u8; 16] = bytes
            .try_into()
            .map_err(|_| BeaconError::Encoding("device key must be 16 bytes".into()))?;
        Ok(Self { key, owner })
    }

    pub fn owner(&self) -> DeviceId {
        self.owner
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.key
    }

    fn cipher(&self) -> Aes128 {
        Aes128::new(GenericArray::from_slice(&self.key))
    }
}

impl fmt::Debug for DeviceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DeviceKey")
            .field("owner", &self.owner)
            .finish_non_exhaustive()
    }
}

/// A 16-byte ephemeral identifier.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Beacon(pub [u8; BEACON_LEN]);

impl Beacon {
    pub fn as_bytes(&self) -> &[u8; BEACON_LEN] {
        &self.0
    }

    pub fn from_slice(bytes: &[u8]) -> Option<Self> {
        bytes.try_into().ok().map(Beacon)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for Beacon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Beacon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Beacon({})", self.to_hex())
    }
}

impl FromStr for Beacon {
    type Err = BeaconError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 2 * BEACON_LEN {
            return Err(BeaconError::Encoding(format!(
                "beacon must be {} hex characters, got {}",
                2 * BEACON_LEN,
                s.len()
            )));
        }
        let bytes = hex::decode(s).map_err(|e| BeaconError::Encoding(e.to_string()))?;
        Ok(Beacon::from_slice(&bytes).expect("length checked above"))
    }
}

impl Serialize for Beacon {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Beacon {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = <std::borrow::Cow<'de, str>>::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Raw AES-128 single-block encryption.
pub fn encrypt_block(key: &[u8; 16], block: [u8; 16]) -> [u8; 16] {
    let cipher = Aes128::new(GenericArray::from_slice(key));
    let mut block = GenericArray::from(block);
    cipher.encrypt_block(&mut block);
    block.into()
}

fn slot_block(slot: SlotIndex) -> [u8; 16] {
    let mut block = [0u8; 16];
    block[8..].copy_from_slice(&slot.0.to_be_bytes());
    block
}

pub fn derive_beacon(key: &DeviceKey, slot: SlotIndex) -> Beacon {
    Beacon(encrypt_block(&key.key, slot_block(slot)))
}

/// Beacons for every slot in `[from, to]`, in slot order.
pub fn derive_beacon_window(
    key: &DeviceKey,
    from: SlotIndex,
    to: SlotIndex,
) -> Result<Vec<(SlotIndex, Beacon)>, BeaconError> {
    if from > to {
        return Err(BeaconError::EmptyWindow { from: from.0, to: to.0 });
    }
    let cipher = key.cipher();
    Ok((from.0..=to.0)
        .map(|s| {
            let slot = SlotIndex(s);
            let mut block = GenericArray::from(slot_block(slot));
            cipher.encrypt_block(&mut block);
            (slot, Beacon(block.into()))
        })
        .collect())
}
