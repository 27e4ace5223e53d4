//! Device-to-totem encryption for the privacy-enhanced mode.
//!
//! Sessions are opened with an ephemeral-static X25519 key encapsulation
//! against the totem's public key taken from the device's local directory.
//! HKDF-SHA256 turns the shared secret into a 128-bit session key and an
//! 8-byte session id. Beacons are then sealed with AES-128-GCM.
//!
//! Frame layout on the air:
//!
//! ```text
//! u16 BE body length || nonce (12) || ciphertext (16) || tag (16)
//! nonce = session id (8) || counter (u32 BE)
//! ```
//!
//! The same encapsulation construction seals records at rest to the
//! authority's public key ([`seal_to`] / [`open_sealed`]).

use std::collections::BTreeMap;

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes128Gcm, Nonce};
use hkdf::Hkdf;
use rand::RngCore;
use sha2::Sha256;
use thiserror::Error;
use x25519_dalek::{PublicKey, StaticSecret};

use crate::beacon::{Beacon, SlotIndex, BEACON_LEN};
use crate::totem::TotemId;

pub const ENCAPSULATION_LEN: usize = 32;
pub const SESSION_ID_LEN: usize = 8;
const NONCE_LEN: usize = 12;
const TAG_LEN: usize = 16;
const FRAME_BODY_LEN: usize = NONCE_LEN + BEACON_LEN + TAG_LEN;

const SESSION_KEY_INFO: &[u8] = b"iotrace/v1/session-key";
const SESSION_ID_INFO: &[u8] = b"iotrace/v1/session-id";
const AT_REST_INFO: &[u8] = b"iotrace/v1/at-rest";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChannelError {
    #[error("totem {0} is not in the directory")]
    UnknownTotem(TotemId),
    #[error("totem {0} appears twice in the directory")]
    DuplicateTotem(TotemId),
    #[error("nonce space exhausted; re-establish the session")]
    NonceExhausted,
    #[error("malformed frame")]
    Malformed,
    #[error("no session for this frame")]
    UnknownSession,
    #[error("authentication failed")]
    Authentication,
    #[error("key agreement produced a low-order point")]
    NonContributory,
}

/// Long-term X25519 key pair (totems in privacy-enhanced mode, and the
/// authority for at-rest sealing).
#[derive(Clone)]
pub struct Keypair {
    secret: StaticSecret,
    public: PublicKey,
}

impl Keypair {
    pub fn generate<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut bytes = [0u8; 32];
        rng.fill_bytes(&mut bytes);
        let secret = StaticSecret::from(bytes);
        let public = PublicKey::from(&secret);
        Self { secret, public }
    }

    pub fn public_bytes(&self) -> [u8; 32] {
        self.public.to_bytes()
    }
}

impl std::fmt::Debug for Keypair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Keypair(pub={})", hex::encode(self.public.as_bytes()))
    }
}

/// Static map of totem ids to public keys shipped to every device.
#[derive(Debug, Clone, Default)]
pub struct TotemDirectory {
    entries: BTreeMap<TotemId, [u8; 32]>,
}

impl TotemDirectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: TotemId, public_key: [u8; 32]) -> Result<(), ChannelError> {
        if self.entries.contains_key(&id) {
            return Err(ChannelError::DuplicateTotem(id));
        }
        self.entries.insert(id, public_key);
        Ok(())
    }

    pub fn get(&self, id: &TotemId) -> Option<&[u8; 32]> {
        self.entries.get(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Ephemeral public key sent over the air to open a session.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Encapsulation(pub [u8; ENCAPSULATION_LEN]);

impl Encapsulation {
    pub fn as_bytes(&self) -> &[u8; ENCAPSULATION_LEN] {
        &self.0
    }
}

/// A sealed beacon frame exactly as it travels on the air.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ciphertext(Vec<u8>);

impl Ciphertext {
    pub fn from_wire(bytes: Vec<u8>) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    fn parse(&self) -> Result<([u8; NONCE_LEN], &[u8]), ChannelError> {
        let bytes = &self.0;
        if bytes.len() < 2 {
            return Err(ChannelError::Malformed);
        }
        let len = u16::from_be_bytes([bytes[0], bytes[1]]) as usize;
        if len != FRAME_BODY_LEN || bytes.len() != 2 + len {
            return Err(ChannelError::Malformed);
        }
        let nonce: [u8; NONCE_LEN] = bytes[2..2 + NONCE_LEN].try_into().expect("sliced");
        Ok((nonce, &bytes[2 + NONCE_LEN..]))
    }

    /// Session id carried in the nonce prefix.
    pub fn session_id(&self) -> Result<[u8; SESSION_ID_LEN], ChannelError> {
        let (nonce, _) = self.parse()?;
        Ok(nonce[..SESSION_ID_LEN].try_into().expect("sliced"))
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct SessionKey {
    key: [u8; 16],
    id: [u8; SESSION_ID_LEN],
}

impl SessionKey {
    pub fn id(&self) -> [u8; SESSION_ID_LEN] {
        self.id
    }
}

impl std::fmt::Debug for SessionKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "SessionKey(id={})", hex::encode(self.id))
    }
}

fn derive_session_key(shared: &[u8; 32], enc: &[u8; 32], recipient: &[u8; 32]) -> SessionKey {
    let mut salt = [0u8; 64];
    salt[..32].copy_from_slice(enc);
    salt[32..].copy_from_slice(recipient);
    let hk = Hkdf::<Sha256>::new(Some(&salt), shared);
    let mut key = [0u8; 16];
    let mut id = [0u8; SESSION_ID_LEN];
    hk.expand(SESSION_KEY_INFO, &mut key).expect("16 bytes is a valid HKDF length");
    hk.expand(SESSION_ID_INFO, &mut id).expect("8 bytes is a valid HKDF length");
    SessionKey { key, id }
}

fn encapsulate<R: RngCore + ?Sized>(
    recipient: &[u8; 32],
    rng: &mut R,
) -> Result<(SessionKey, Encapsulation), ChannelError> {
    let mut eph = [0u8; 32];
    rng.fill_bytes(&mut eph);
    let eph = StaticSecret::from(eph);
    let enc = PublicKey::from(&eph).to_bytes();
    let shared = eph.diffie_hellman(&PublicKey::from(*recipient));
    if !shared.was_contributory() {
        return Err(ChannelError::NonContributory);
    }
    Ok((derive_session_key(shared.as_bytes(), &enc, recipient), Encapsulation(enc)))
}

/// Recovers the session key from an encapsulation. A foreign or garbage
/// encapsulation yields an unrelated key, which later fails authentication.
pub fn decapsulate(keys: &Keypair, enc: &Encapsulation) -> Result<SessionKey, ChannelError> {
    let shared = keys.secret.diffie_hellman(&PublicKey::from(enc.0));
    if !shared.was_contributory() {
        return Err(ChannelError::NonContributory);
    }
    Ok(derive_session_key(shared.as_bytes(), &enc.0, &keys.public_bytes()))
}

/// Device side of one (device, totem, slot) session.
#[derive(Debug, Clone)]
pub struct Session {
    totem_id: TotemId,
    key: SessionKey,
    established_slot: SlotIndex,
    counter: u32,
}

pub fn establish_session<R: RngCore + ?Sized>(
    directory: &TotemDirectory,
    totem_id: &TotemId,
    slot: SlotIndex,
    rng: &mut R,
) -> Result<(Session, Encapsulation), ChannelError> {
    let pk = directory
        .get(totem_id)
        .ok_or_else(|| ChannelError::UnknownTotem(totem_id.clone()))?;
    let (key, enc) = encapsulate(pk, rng)?;
    let session = Session { totem_id: totem_id.clone(), key, established_slot: slot, counter: 0 };
    Ok((session, enc))
}

impl Session {
    pub fn totem_id(&self) -> &TotemId {
        &self.totem_id
    }

    pub fn established_slot(&self) -> SlotIndex {
        self.established_slot
    }

    pub fn counter(&self) -> u32 {
        self.counter
    }

    pub fn key(&self) -> &SessionKey {
        &self.key
    }

    pub fn encrypt_beacon(&mut self, beacon: &Beacon) -> Result<Ciphertext, ChannelError> {
        if self.counter == u32::MAX {
            return Err(ChannelError::NonceExhausted);
        }
        self.counter += 1;
        let mut nonce = [0u8; NONCE_LEN];
        nonce[..SESSION_ID_LEN].copy_from_slice(&self.key.id);
        nonce[SESSION_ID_LEN..].copy_from_slice(&self.counter.to_be_bytes());
        let cipher = Aes128Gcm::new(&self.key.key.into());
        let sealed = cipher
            .encrypt(
                Nonce::from_slice(&nonce),
                Payload { msg: beacon.as_bytes(), aad: self.totem_id.as_str().as_bytes() },
            )
            .expect("AES-GCM encryption of 16 bytes cannot fail");
        let mut frame = Vec::with_capacity(2 + FRAME_BODY_LEN);
        frame.extend_from_slice(&(FRAME_BODY_LEN as u16).to_be_bytes());
        frame.extend_from_slice(&nonce);
        frame.extend_from_slice(&sealed);
        Ok(Ciphertext(frame))
    }

    #[cfg(test)]
    pub(crate) fn set_counter(&mut self, counter: u32) {
        self.counter = counter;
    }
}

/// Opens a sealed frame addressed to `totem_id` with a known session key.
pub fn decrypt_beacon(
    key: &SessionKey,
    totem_id: &TotemId,
    ct: &Ciphertext,
) -> Result<Beacon, ChannelError> {
    let (nonce, body) = ct.parse()?;
    let cipher = Aes128Gcm::new(&key.key.into());
    let plain = cipher
        .decrypt(
            Nonce::from_slice(&nonce),
            Payload { msg: body, aad: totem_id.as_str().as_bytes() },
        )
        .map_err(|_| ChannelError::Authentication)?;
    Beacon::from_slice(&plain).ok_or(ChannelError::Malformed)
}

/// Totem side: long-term keys plus the sessions opened by nearby devices.
#[derive(Debug, Clone)]
pub struct Responder {
    totem_id: TotemId,
    keys: Keypair,
    sessions: BTreeMap<[u8; SESSION_ID_LEN], (SessionKey, SlotIndex)>,
}

impl Responder {
    pub fn new(totem_id: TotemId, keys: Keypair) -> Self {
        Self { totem_id, keys, sessions: BTreeMap::new() }
    }

    pub fn public_bytes(&self) -> [u8; 32] {
        self.keys.public_bytes()
    }

    pub fn accept(&mut self, enc: &Encapsulation, slot: SlotIndex) -> Result<(), ChannelError> {
        let key = decapsulate(&self.keys, enc)?;
        self.sessions.insert(key.id, (key, slot));
        Ok(())
    }

    pub fn open(&self, ct: &Ciphertext) -> Result<Beacon, ChannelError> {
        let sid = ct.session_id()?;
        let (key, _) = self.sessions.get(&sid).ok_or(ChannelError::UnknownSession)?;
        decrypt_beacon(key, &self.totem_id, ct)
    }

    /// Forgets sessions established before `slot`.
    pub fn expire_before(&mut self, slot: SlotIndex) {
        self.sessions.retain(|_, (_, s)| *s >= slot);
    }

    pub fn session_count(&self) -> usize {
        self.sessions.len()
    }
}

/// Seals `plaintext` to a recipient public key: `enc || nonce || ct || tag`.
pub fn seal_to<R: RngCore + ?Sized>(
    recipient: &[u8; 32],
    plaintext: &[u8],
    rng: &mut R,
) -> Result<Vec<u8>, ChannelError> {
    let (key, enc) = encapsulate(recipient, rng)?;
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let cipher = Aes128Gcm::new(&key.key.into());
    let sealed = cipher
        .encrypt(Nonce::from_slice(&nonce), Payload { msg: plaintext, aad: AT_REST_INFO })
        .expect("AES-GCM encryption cannot fail for short inputs");
    let mut out = Vec::with_capacity(ENCAPSULATION_LEN + NONCE_LEN + sealed.len());
    out.extend_from_slice(&enc.0);
    out.extend_from_slice(&nonce);
    out.extend_from_slice(&sealed);
    Ok(out)
}

pub fn open_sealed(keys: &Keypair, sealed: &[u8]) -> Result<Vec<u8>, ChannelError> {
    if sealed.len() < ENCAPSULATION_LEN + NONCE_LEN + TAG_LEN {
        return Err(ChannelError::Malformed);
    }
    let enc = Encapsulation(sealed[..ENCAPSULATION_LEN].try_into().expect("sliced"));
    let key = decapsulate(keys, &enc)?;
    let nonce = &sealed[ENCAPSULATION_LEN..ENCAPSULATION_LEN + NONCE_LEN];
    let cipher = Aes128Gcm::new(&key.key.into());
    cipher
        .decrypt(
            Nonce::from_slice(nonce),
            Payload { msg: &sealed[ENCAPSULATION_LEN + NONCE_LEN..], aad: AT_REST_INFO },
        )
        .map_err(|_| ChannelError::Authentication)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn setup() -> (TotemDirectory, Responder, Responder, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let t1 = TotemId::new("T-0001");
        let t2 = TotemId::new("T-0002");
        let r1 = Responder::new(t1.clone(), Keypair::generate(&mut rng));
        let r2 = Responder::new(t2.clone(), Keypair::generate(&mut rng));
        let mut dir = TotemDirectory::new();
        dir.insert(t1, r1.public_bytes()).unwrap();
        dir.insert(t2, r2.public_bytes()).unwrap();
        (dir, r1, r2, rng)
    }

    #[test]
    fn unknown_totem_is_rejected() {
        let (dir, _, _, mut rng) = setup();
        let err = establish_session(&dir, &TotemId::new("T-9999"), SlotIndex(0), &mut rng)
            .unwrap_err();
        assert_eq!(err, ChannelError::UnknownTotem(TotemId::new("T-9999")));
    }

    #[test]
    fn duplicate_directory_entry_is_rejected() {
        let (mut dir, r1, _, _) = setup();
        assert!(dir.insert(TotemId::new("T-0001"), r1.public_bytes()).is_err());
    }

    #[test]
    fn decapsulation_recovers_device_key() {
        let (dir, r1, _, mut rng) = setup();
        let (session, enc) =
            establish_session(&dir, &TotemId::new("T-0001"), SlotIndex(3), &mut rng).unwrap();
        let recovered = decapsulate(&r1.keys, &enc).unwrap();
        assert_eq!(&recovered, session.key());
    }

    #[test]
    fn sessions_are_fresh() {
        let (dir, _, _, mut rng) = setup();
        let t1 = TotemId::new("T-0001");
        let keys: HashSet<[u8; 16]> = (0..1000)
            .map(|_| establish_session(&dir, &t1, SlotIndex(0), &mut rng).unwrap().0.key.key)
            .collect();
        assert_eq!(keys.len(), 1000);
    }

    #[test]
    fn round_trip_and_nonce_freshness() {
        let (dir, mut r1, _, mut rng) = setup();
        let t1 = TotemId::new("T-0001");
        let (mut session, enc) = establish_session(&dir, &t1, SlotIndex(0), &mut rng).unwrap();
        r1.accept(&enc, SlotIndex(0)).unwrap();
        let b = Beacon([0x42; 16]);
        let c1 = session.encrypt_beacon(&b).unwrap();
        let c2 = session.encrypt_beacon(&b).unwrap();
        assert_ne!(c1, c2);
        assert_eq!(session.counter(), 2);
        assert_eq!(c1.as_bytes().len(), 2 + FRAME_BODY_LEN);
        assert_eq!(r1.open(&c1).unwrap(), b);
        assert_eq!(r1.open(&c2).unwrap(), b);
        assert_eq!(decrypt_beacon(session.key(), &t1, &c1).unwrap(), b);
    }

    #[test]
    fn tampered_frame_fails_authentication() {
        let (dir, mut r1, _, mut rng) = setup();
        let t1 = TotemId::new("T-0001");
        let (mut session, enc) = establish_session(&dir, &t1, SlotIndex(0), &mut rng).unwrap();
        r1.accept(&enc, SlotIndex(0)).unwrap();
        let mut bytes = session.encrypt_beacon(&Beacon([1; 16])).unwrap().as_bytes().to_vec();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        assert_eq!(r1.open(&Ciphertext::from_wire(bytes)), Err(ChannelError::Authentication));
        assert_eq!(r1.open(&Ciphertext::from_wire(vec![1, 2, 3])), Err(ChannelError::Malformed));
    }

    #[test]
    fn wrong_totem_cannot_open() {
        let (dir, _, mut r2, mut rng) = setup();
        let t1 = TotemId::new("T-0001");
        let (mut session, enc) = establish_session(&dir, &t1, SlotIndex(0), &mut rng).unwrap();
        let ct = session.encrypt_beacon(&Beacon([9; 16])).unwrap();
        // Without the handshake the session is unknown.
        assert_eq!(r2.open(&ct), Err(ChannelError::UnknownSession));
        // Replaying the handshake at the wrong totem derives an unrelated key.
        r2.accept(&enc, SlotIndex(0)).unwrap();
        assert!(r2.open(&ct).is_err());
    }

    #[test]
    fn nonce_exhaustion() {
        let (dir, _, _, mut rng) = setup();
        let (mut session, _) =
            establish_session(&dir, &TotemId::new("T-0001"), SlotIndex(0), &mut rng).unwrap();
        session.set_counter(u32::MAX - 1);
        assert!(session.encrypt_beacon(&Beacon([0; 16])).is_ok());
        assert_eq!(session.encrypt_beacon(&Beacon([0; 16])), Err(ChannelError::NonceExhausted));
    }

    #[test]
    fn expiry_drops_old_sessions() {
        let (dir, mut r1, _, mut rng) = setup();
        let t1 = TotemId::new("T-0001");
        for slot in 0..3 {
            let (_, enc) = establish_session(&dir, &t1, SlotIndex(slot), &mut rng).unwrap();
            r1.accept(&enc, SlotIndex(slot)).unwrap();
        }
        r1.expire_before(SlotIndex(2));
        assert_eq!(r1.session_count(), 1);
    }

    #[test]
    fn sealing_at_rest_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let authority = Keypair::generate(&mut rng);
        let other = Keypair::generate(&mut rng);
        let sealed = seal_to(&authority.public_bytes(), b"secret record", &mut rng).unwrap();
        assert_eq!(open_sealed(&authority, &sealed).unwrap(), b"secret record");
        assert!(open_sealed(&other, &sealed).is_err());
        assert!(!sealed.windows(6).any(|w| w == b"secret"));
    }
}
