//! Eavesdropping adversaries and the replay injector.
//!
//! The adversary captures raw over-the-air payloads tagged with time and
//! location, then correlates them with published lists. In basic mode the
//! captured payloads are the beacons themselves, so membership tests succeed
//! but are diluted by the negatives published next to each positive. With the
//! secure channel the captures are ciphertexts and nothing matches.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::authority::PublishedList;
use crate::beacon::{slot_of, Beacon, SlotIndex};
use crate::radio::{Payload, Position, Transmission};
use crate::totem::TotemSite;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One captured payload: `{"payload": hex, "t": s, "x": m, "y": m}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EavesdropEntry {
    #[serde(with = "hex::serde")]
    pub payload: Vec<u8>,
    pub t: f64,
    pub x: f64,
    pub y: f64,
}

impl EavesdropEntry {
    pub fn position(&self) -> Position {
        Position::new(self.x, self.y)
    }

    fn beacon(&self) -> Option<Beacon> {
        Beacon::from_slice(&self.payload)
    }
}

/// Append-only capture log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EavesdropLog {
    entries: Vec<EavesdropEntry>,
}

impl EavesdropLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, payload: Vec<u8>, t: f64, at: Position) {
        self.entries.push(EavesdropEntry { payload, t, x: at.x, y: at.y });
    }

    pub fn entries(&self) -> &[EavesdropEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self, LogError> {
        let mut entries = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry = serde_json::from_str(&line)
                .map_err(|e| LogError::Parse { line: i + 1, message: e.to_string() })?;
            entries.push(entry);
        }
        Ok(Self { entries })
    }
}

/// Public protocol parameters the adversary reasons with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackParams {
    pub slot_len: u64,
    pub epsilon: u64,
    /// Captures closer than this are treated as co-located.
    pub colocation_radius_m: f64,
}

/// Payloads captured near one known user (`targets.json` entry).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetPayloads {
    pub target: String,
    pub payloads: Vec<HexPayload>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HexPayload(#[serde(with = "hex::serde")] pub Vec<u8>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetVerdict {
    pub target: String,
    pub positive: bool,
    /// `1/k` for the tightest reconstructed cluster containing a match.
    pub confidence: Option<f64>,
    pub cluster_size: Option<usize>,
    /// Members of that cluster (all published, one of them the target's).
    pub cluster: Vec<Beacon>,
    /// Index of the published list the match came from.
    pub list_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct HealthInference {
    pub verdicts: Vec<TargetVerdict>,
}

struct SlotIndexedLog<'a> {
    by_slot: BTreeMap<SlotIndex, Vec<&'a EavesdropEntry>>,
}

impl<'a> SlotIndexedLog<'a> {
    fn new(log: &'a EavesdropLog, slot_len: u64) -> Self {
        let mut by_slot: BTreeMap<SlotIndex, Vec<&EavesdropEntry>> = BTreeMap::new();
        for e in &log.entries {
            if let Ok(slot) = slot_of(e.t, slot_len) {
                by_slot.entry(slot).or_default().push(e);
            }
        }
        Self { by_slot }
    }

    /// Published beacons captured within `radius` of `at` and `epsilon` slots of `slot`.
    fn cluster(
        &self,
        list: &PublishedList,
        at: Position,
        slot: SlotIndex,
        params: &AttackParams,
    ) -> BTreeSet<Beacon> {
        let (lo, hi) = slot.window(params.epsilon);
        self.by_slot
            .range(lo..=hi)
            .flat_map(|(_, entries)| entries.iter())
            .filter(|e| e.position().distance(&at) <= params.colocation_radius_m)
            .filter_map(|e| e.beacon())
            .filter(|b| list.contains(b))
            .collect()
    }
}

/// Targeted health-status attack.
///
/// A target is declared positive iff one of its captured payloads, read as a
/// beacon, is in a published list. The confidence is `1/k` where `k` is the
/// number of published beacons captured alongside it, because nothing in the
/// list distinguishes the positive from the negatives next to it.
pub fn infer_health_status(
    log: &EavesdropLog,
    lists: &[PublishedList],
    targets: &[TargetPayloads],
    params: &AttackParams,
) -> HealthInference {
    let index = SlotIndexedLog::new(log, params.slot_len);
    let mut verdicts = Vec::with_capacity(targets.len());
    for target in targets {
        let wanted: BTreeSet<&[u8]> = target.payloads.iter().map(|p| p.0.as_slice()).collect();
        let mut best: Option<(usize, BTreeSet<Beacon>)> = None;
        for e in log.entries.iter().filter(|e| wanted.contains(e.payload.as_slice())) {
            let (Some(beacon), Ok(slot)) = (e.beacon(), slot_of(e.t, params.slot_len)) else {
                continue;
            };
            for (li, list) in lists.iter().enumerate() {
                if !list.contains(&beacon) {
                    continue;
                }
                let cluster = index.cluster(list, e.position(), slot, params);
                if best.as_ref().is_none_or(|(_, c)| cluster.len() < c.len()) {
                    best = Some((li, cluster));
                }
            }
        }
        verdicts.push(match best {
            Some((li, cluster)) => TargetVerdict {
                target: target.target.clone(),
                positive: true,
                confidence: Some(1.0 / cluster.len() as f64),
                cluster_size: Some(cluster.len()),
                cluster: cluster.into_iter().collect(),
                list_index: Some(li),
            },
            None => TargetVerdict {
                target: target.target.clone(),
                positive: false,
                confidence: None,
                cluster_size: None,
                cluster: Vec::new(),
                list_index: None,
            },
        });
    }
    HealthInference { verdicts }
}

/// The adversary's single best guess for which cluster member is the positive:
/// the member listed first in the published file. With an unbiased shuffle
/// this is right with probability `1/k`.
pub fn pinpoint_guess(cluster: &[Beacon], published_order: &[Beacon]) -> Option<Beacon> {
    let members: BTreeSet<&Beacon> = cluster.iter().collect();
    published_order.iter().find(|b| members.contains(b)).copied()
}

/// A place and slot where published beacons were captured on the air.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub x: f64,
    pub y: f64,
    pub slot: SlotIndex,
    pub t_first: f64,
    /// Distinct published beacons captured here in this slot.
    pub candidates: usize,
}

/// Location-privacy attack: every (place, slot) where a published beacon was
/// heard. Over-approximates the positive users' movements by the co-located
/// negatives.
pub fn recover_trajectory(
    log: &EavesdropLog,
    lists: &[PublishedList],
    slot_len: u64,
) -> Vec<TrajectoryPoint> {
    let published: BTreeSet<Beacon> = lists.iter().flat_map(|l| l.beacons.iter().copied()).collect();
    let mut points: BTreeMap<(SlotIndex, u64, u64), (Position, f64, BTreeSet<Beacon>)> =
        BTreeMap::new();
    for e in &log.entries {
        let (Some(beacon), Ok(slot)) = (e.beacon(), slot_of(e.t, slot_len)) else { continue };
        if !published.contains(&beacon) {
            continue;
        }
        let key = (slot, e.x.to_bits(), e.y.to_bits());
        let entry = points.entry(key).or_insert_with(|| (e.position(), e.t, BTreeSet::new()));
        entry.1 = entry.1.min(e.t);
        entry.2.insert(beacon);
    }
    let mut out: Vec<TrajectoryPoint> = points
        .into_iter()
        .map(|((slot, _, _), (pos, t_first, beacons))| TrajectoryPoint {
            x: pos.x,
            y: pos.y,
            slot,
            t_first,
            candidates: beacons.len(),
        })
        .collect();
    out.sort_by(|a, b| {
        (a.slot, a.t_first).partial_cmp(&(b.slot, b.t_first)).expect("finite times")
    });
    out
}

/// A captured payload re-emitted elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct Replay {
    pub transmission: Transmission,
    pub at: Position,
    pub time: f64,
}

/// Re-emits `payload` at `target`'s location. Cleartext beacons are broadcast;
/// anything else is addressed to the target totem.
pub fn replay_inject(payload: &[u8], target: &TotemSite, time: f64) -> Replay {
    let transmission = match Payload::from_wire(payload) {
        Payload::Clear(b) => Transmission::broadcast(b),
        other => Transmission::addressed(other, target.id.clone()),
    };
    Replay { transmission, at: target.position(), time }
}
