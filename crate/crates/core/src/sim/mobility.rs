//! Zone-hopping mobility: dwell at a zone for a uniform random time, pick the
//! next zone from a Markov row, walk there in a straight line.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::radio::Position;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MobilityError {
    #[error("transition matrix must be {expected}x{expected}")]
    Shape { expected: usize },
    #[error("row {row} sums to {sum}, not 1")]
    RowSum { row: usize, sum: f64 },
    #[error("row {row} has a negative or non-finite entry")]
    Entry { row: usize },
    #[error("dwell range must satisfy 0 <= min <= max, max > 0")]
    Dwell,
    #[error("speed must be positive")]
    Speed,
    #[error("zone {0} does not exist")]
    Zone(usize),
}

pub(crate) fn check_transition(rows: &[Vec<f64>], n: usize) -> Result<(), MobilityError> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(MobilityError::Shape { expected: n });
    }
    for (row, r) in rows.iter().enumerate() {
        if r.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(MobilityError::Entry { row });
        }
        let sum: f64 = r.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(MobilityError::RowSum { row, sum });
        }
    }
    Ok(())
}

/// One piece of a trajectory, in integer milliseconds, half-open `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Leg {
    Dwell { zone: usize, at: Position, start_ms: u64, end_ms: u64 },
    Transit { from: Position, to: Position, start_ms: u64, end_ms: u64 },
}

impl Leg {
    pub fn start_ms(&self) -> u64 {
        match self {
            Leg::Dwell { start_ms, .. } | Leg::Transit { start_ms, .. } => *start_ms,
        }
    }

    pub fn end_ms(&self) -> u64 {
        match self {
            Leg::Dwell { end_ms, .. } | Leg::Transit { end_ms, .. } => *end_ms,
        }
    }

    pub fn position_at(&self, t_ms: u64) -> Position {
        match self {
            Leg::Dwell { at, .. } => *at,
            Leg::Transit { from, to, start_ms, end_ms } => {
                let span = (end_ms - start_ms) as f64;
                from.lerp(to, (t_ms.saturating_sub(*start_ms)) as f64 / span)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MobilityModel {
    zones: Vec<Position>,
    transition: Vec<Vec<f64>>,
    dwell_min_ms: u64,
    dwell_max_ms: u64,
    speed_mps: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MobilityState {
    pub zone: usize,
}

impl MobilityModel {
    pub fn new(
        zones: Vec<Position>,
        transition: Option<Vec<Vec<f64>>>,
        dwell_s: (f64, f64),
        speed_mps: f64,
    ) -> Result<Self, MobilityError> {
        let n = zones.len();
        let transition = transition.unwrap_or_else(|| vec![vec![1.0 / n as f64; n]; n]);
        check_transition(&transition, n)?;
        let (min, max) = dwell_s;
        if !(min.is_finite() && max.is_finite() && min >= 0.0 && max > 0.0 && min <= max) {
            return Err(MobilityError::Dwell);
        }
        if !(speed_mps.is_finite() && speed_mps > 0.0) {
            return Err(MobilityError::Speed);
        }
        Ok(Self {
            zones,
            transition,
            dwell_min_ms: (min * 1000.0).round() as u64,
            dwell_max_ms: ((max * 1000.0).round() as u64).max(1),
            speed_mps,
        })
    }

    pub fn zones(&self) -> &[Position] {
        &self.zones
    }

    /// Moves to the next zone drawn from the current zone's row.
    pub fn next_position<R: Rng + ?Sized>(&self, state: &mut MobilityState, rng: &mut R) -> Position {
        let row = &self.transition[state.zone];
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut next = row.iter().rposition(|p| *p > 0.0).unwrap_or(state.zone);
        for (i, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                next = i;
                break;
            }
        }
        state.zone = next;
        self.zones[next]
    }

    fn dwell<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        rng.random_range(self.dwell_min_ms..=self.dwell_max_ms).max(1)
    }

    /// Legs covering `[0, duration_ms)`, starting at `initial_zone`.
    pub fn trajectory<R: Rng + ?Sized>(
        &self,
        initial_zone: usize,
        duration_ms: u64,
        rng: &mut R,
    ) -> Result<Vec<Leg>, MobilityError> {
        if initial_zone >= self.zones.len() {
            return Err(MobilityError::Zone(initial_zone));
        }
        let mut legs = Vec::new();
        let mut state = MobilityState { zone: initial_zone };
        let mut t = 0u64;
        while t < duration_ms {
            let end = (t + self.dwell(rng)).min(duration_ms);
            match legs.last_mut() {
                Some(Leg::Dwell { zone, end_ms, .. }) if *zone == state.zone => *end_ms = end,
                _ => legs.push(Leg::Dwell {
                    zone: state.zone,
                    at: self.zones[state.zone],
                    start_ms: t,
                    end_ms: end,
                }),
            }
            t = end;
            if t >= duration_ms {
                break;
            }
            let from = self.zones[state.zone];
            let to = self.next_position(&mut state, rng);
            let travel = (from.distance(&to) / self.speed_mps * 1000.0).ceil() as u64;
            if travel > 0 {
                legs.push(Leg::Transit { from, to, start_ms: t, end_ms: t + travel });
                t += travel;
            }
        }
        Ok(legs)
    }
}

/// A maximal group of broadcast ticks sharing one slot and one position.
/// Stationary ticks collapse into one sample; moving ticks are one each.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub first_tick: u64,
    pub count: u64,
    pub slot: u64,
    pub at: Position,
}

/// Broadcast ticks `k * interval_ms < duration_ms` falling in `leg`.
pub fn leg_samples(leg: &Leg, interval_ms: u64, slot_ms: u64, duration_ms: u64) -> Vec<Sample> {
    let start = leg.start_ms();
    let end = leg.end_ms().min(duration_ms);
    if start >= end {
        return Vec::new();
    }
    let first = start.div_ceil(interval_ms);
    let Some(last) = end.div_ceil(interval_ms).checked_sub(1) else { return Vec::new() };
    if first > last {
        return Vec::new();
    }
    let mut out = Vec::new();
    match leg {
        Leg::Dwell { at, .. } => {
            let mut k = first;
            while k <= last {
                let slot = k * interval_ms / slot_ms;
                let slot_last = ((slot + 1) * slot_ms).div_ceil(interval_ms) - 1;
                let k_end = slot_last.min(last);
                out.push(Sample { first_tick: k, count: k_end - k + 1, slot, at: *at });
                k = k_end + 1;
            }
        }
        Leg::Transit { .. } => {
            for k in first..=last {
                let t = k * interval_ms;
                out.push(Sample { first_tick: k, count: 1, slot: t / slot_ms, at: leg.position_at(t) });
            }
        }
    }
    out
}
