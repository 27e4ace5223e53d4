//! Edge-assisted BLE contact tracing.
//!
//! Phones only broadcast AES-derived ephemeral beacons. Fixed totems collect
//! them and either forward them to a health authority or keep them locally.
//! When a user is diagnosed, the authority publishes the positive beacons
//! together with every negative beacon heard at the same totem within a slot
//! window, and phones match their own regenerated beacons against the list.
//!
//! The crate contains the protocol entities, the adversary models used to
//! evaluate them, a deterministic simulator and the evaluation metrics.

pub mod adversary;
pub mod authority;
pub mod beacon;
pub mod cli;
pub mod device;
pub mod metrics;
pub mod radio;
pub mod secure_channel;
pub mod sim;
pub mod totem;
