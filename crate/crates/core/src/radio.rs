//! Over-the-air payloads and the disc radio model.

use serde::{Deserialize, Serialize};

use crate::beacon::{Beacon, BEACON_LEN};
use crate::secure_channel::{Ciphertext, Encapsulation, ENCAPSULATION_LEN};
use crate::totem::TotemId;

/// Planar simulation coordinates in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Position) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn lerp(&self, other: &Position, frac: f64) -> Position {
        Position {
            x: self.x + (other.x - self.x) * frac,
            y: self.y + (other.y - self.y) * frac,
        }
    }
}

/// Disc reception: in range iff distance <= range.
pub fn in_range(emitter: &Position, receiver: &Position, range_m: f64) -> bool {
    emitter.distance(receiver) <= range_m
}

/// What a device puts on the air.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    /// Basic and decentralized modes: the bare 16-byte beacon.
    Clear(Beacon),
    /// Privacy-enhanced mode: key encapsulation opening a session with a totem.
    Handshake(Encapsulation),
    /// Privacy-enhanced mode: a beacon sealed under a session key.
    Sealed(Ciphertext),
}

impl Payload {
    /// Raw bytes as captured by an eavesdropper.
    pub fn to_wire(&self) -> Vec<u8> {
        match self {
            Payload::Clear(b) => b.as_bytes().to_vec(),
            Payload::Handshake(enc) => enc.as_bytes().to_vec(),
            Payload::Sealed(ct) => ct.as_bytes().to_vec(),
        }
    }

    /// Classifies captured bytes by length. Anything that is neither a bare
    /// beacon nor an encapsulation is handed to the totem as a sealed frame,
    /// which rejects it if malformed.
    pub fn from_wire(bytes: &[u8]) -> Payload {
        match bytes.len() {
            BEACON_LEN => Payload::Clear(Beacon::from_slice(bytes).expect("length matched")),
            ENCAPSULATION_LEN => {
                Payload::Handshake(Encapsulation(bytes.try_into().expect("length matched")))
            }
            _ => Payload::Sealed(Ciphertext::from_wire(bytes.to_vec())),
        }
    }
}

/// One emission. `to` is set for link-layer addressed privacy-enhanced traffic;
/// cleartext beacons are broadcast to every totem in range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transmission {
    pub payload: Payload,
    pub to: Option<TotemId>,
}

impl Transmission {
    pub fn broadcast(beacon: Beacon) -> Self {
        Self { payload: Payload::Clear(beacon), to: None }
    }

    pub fn addressed(payload: Payload, to: TotemId) -> Self {
        Self { payload, to: Some(to) }
    }

    /// Whether a totem with this id should process the transmission at all.
    pub fn is_for(&self, totem: &TotemId) -> bool {
        self.to.as_ref().is_none_or(|t| t == totem)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disc_model_is_inclusive() {
        let a = Position::new(0.0, 0.0);
        assert!(in_range(&a, &Position::new(3.0, 4.0), 5.0));
        assert!(!in_range(&a, &Position::new(3.0, 4.01), 5.0));
    }

    #[test]
    fn wire_classification() {
        let b = Beacon([7; 16]);
        assert_eq!(Payload::from_wire(&Payload::Clear(b).to_wire()), Payload::Clear(b));
        let enc = Encapsulation([1; 32]);
        assert_eq!(
            Payload::from_wire(&Payload::Handshake(enc).to_wire()),
            Payload::Handshake(enc)
        );
        assert!(matches!(Payload::from_wire(&[0u8; 5]), Payload::Sealed(_)));
    }

    #[test]
    fn addressing() {
        let t1 = TotemId::new("T-0001");
        let t2 = TotemId::new("T-0002");
        assert!(Transmission::broadcast(Beacon([0; 16])).is_for(&t1));
        let tx = Transmission::addressed(Payload::Handshake(Encapsulation([0; 32])), t1.clone());
        assert!(tx.is_for(&t1));
        assert!(!tx.is_for(&t2));
    }
}
