//! Scenario description for one simulator run.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::authority::{DEFAULT_EPSILON_SLOTS, DEFAULT_V_MAX_MPS};
use crate::beacon::DEFAULT_SLOT_LEN_S;
use crate::device::{DEFAULT_BROADCAST_INTERVAL_S, DEFAULT_LOOKBACK_DAYS, DEFAULT_RISK_THRESHOLD_S};
use crate::metrics::CostModelParams;
use crate::radio::Position;
use crate::totem::{ProtocolMode, TotemId, TotemSite};

/// A configuration problem, located by its JSON path.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("{field}: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self { field: field.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    #[serde(default = "default_mode")]
    pub mode: ProtocolMode,
    #[serde(default = "default_slot_len")]
    pub slot_len_s: u64,
    #[serde(default = "default_broadcast_interval")]
    pub broadcast_interval_s: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon_slots: u64,
    #[serde(default = "default_risk_threshold")]
    pub risk_threshold_s: f64,
    #[serde(default = "default_lookback")]
    pub lookback_days: u32,
    pub duration_s: f64,
    #[serde(default = "default_v_max")]
    pub v_max_mps: f64,
    /// Run replay detection before centralized reconciliation.
    #[serde(default = "default_true")]
    pub fraud_detection: bool,
    /// Seal the centralized pending buffer to the authority key.
    #[serde(default)]
    pub encrypt_at_rest: bool,
    pub totems: Vec<TotemSite>,
    pub devices: DeviceConfig,
    #[serde(default)]
    pub infections: Vec<Infection>,
    #[serde(default)]
    pub adversary: AdversaryConfig,
    /// Totems that do not answer decentralized window queries.
    #[serde(default)]
    pub unreachable_totems: Vec<TotemId>,
    #[serde(default)]
    pub energy: CostModelParams,
}

fn default_mode() -> ProtocolMode {
    ProtocolMode::Centralized
}
fn default_slot_len() -> u64 {
    DEFAULT_SLOT_LEN_S
}
fn default_broadcast_interval() -> f64 {
    DEFAULT_BROADCAST_INTERVAL_S
}
fn default_epsilon() -> u64 {
    DEFAULT_EPSILON_SLOTS
}
fn default_risk_threshold() -> f64 {
    DEFAULT_RISK_THRESHOLD_S
}
fn default_lookback() -> u32 {
    DEFAULT_LOOKBACK_DAYS
}
fn default_v_max() -> f64 {
    DEFAULT_V_MAX_MPS
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceConfig {
    pub count: u32,
    #[serde(default)]
    pub mobility: MobilityConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MobilityConfig {
    /// Meeting places. Defaults to one zone per totem, plus the outside zone.
    #[serde(default)]
    pub zones: Option<Vec<Position>>,
    /// Add a zone far from every totem (only used with default zones).
    #[serde(default = "default_true")]
    pub outside_zone: bool,
    /// Row-stochastic zone transition matrix; uniform when absent.
    #[serde(default)]
    pub transition: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_dwell")]
    pub dwell_s: DwellRange,
    #[serde(default = "default_speed")]
    pub speed_mps: f64,
    /// Starting zone per device; sampled uniformly when absent.
    #[serde(default)]
    pub initial_zones: Option<Vec<usize>>,
}

impl Default for MobilityConfig {
    fn default() -> Self {
        Self {
            zones: None,
            outside_zone: true,
            transition: None,
            dwell_s: default_dwell(),
            speed_mps: default_speed(),
            initial_zones: None,
        }
    }
}

/// Uniform dwell-time distribution, seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DwellRange {
    pub min: f64,
    pub max: f64,
}

fn default_dwell() -> DwellRange {
    DwellRange { min: 300.0, max: 1800.0 }
}
fn default_speed() -> f64 {
    10.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Infection {
    pub device: u32,
    pub diagnosis_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct AdversaryConfig {
    #[serde(default)]
    pub coverage: Coverage,
    /// Devices the targeted eavesdropper follows.
    #[serde(default)]
    pub targets: Vec<u32>,
    #[serde(default)]
    pub replays: Vec<ReplayDirective>,
    /// Co-location radius for cluster reconstruction; defaults to the
    /// largest totem radio range.
    #[serde(default)]
    pub colocation_radius_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Coverage {
    #[default]
    None,
    Global,
    Discs(Vec<Disc>),
}

impl Coverage {
    pub fn covers(&self, at: &Position) -> bool {
        match self {
            Coverage::None => false,
            Coverage::Global => true,
            Coverage::Discs(discs) => {
                discs.iter().any(|d| Position::new(d.x, d.y).distance(at) <= d.r)
            }
        }
    }

    pub fn is_active(&self) -> bool {
        !matches!(self, Coverage::None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Disc {
    pub x: f64,
    pub y: f64,
    pub r: f64,
}

/// Replay the victim's latest captured payload at `target_totem` at `at_s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayDirective {
    pub victim: u32,
    pub at_s: f64,
    pub target_totem: TotemId,
}

/// Converts seconds to whole milliseconds, rejecting sub-millisecond values.
pub(crate) fn to_millis(field: &str, seconds: f64) -> Result<u64, ConfigError> {
    if !seconds.is_finite() || seconds < 0.0 {
        return Err(ConfigError::new(field, "must be a finite, non-negative number of seconds"));
    }
    let ms = (seconds * 1000.0).round();
    if (ms / 1000.0 - seconds).abs() > 1e-9 {
        return Err(ConfigError::new(field, "must be a whole number of milliseconds"));
    }
    Ok(ms as u64)
}

impl SimConfig {
    /// Parses a JSON config; errors carry the path of the offending field.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: SimConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let message = inner.to_string();
            // serde reports missing fields against the enclosing object.
            let field = match message.strip_prefix("missing field `") {
                Some(rest) => {
                    let name = rest.split('`').next().unwrap_or_default();
                    if path == "." { name.to_string() } else { format!("{path}.{name}") }
                }
                None => path,
            };
            ConfigError::new(field, message)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.slot_len_s == 0 {
            return Err(ConfigError::new("slot_len_s", "must be positive"));
        }
        let interval = to_millis("broadcast_interval_s", self.broadcast_interval_s)?;
        if interval == 0 {
            return Err(ConfigError::new("broadcast_interval_s", "must be positive"));
        }
        let duration = to_millis("duration_s", self.duration_s)?;
        if duration == 0 {
            return Err(ConfigError::new("duration_s", "must be positive"));
        }
        if !(self.risk_threshold_s.is_finite() && self.risk_threshold_s >= 0.0) {
            return Err(ConfigError::new("risk_threshold_s", "must be non-negative"));
        }
        if !(self.v_max_mps.is_finite() && self.v_max_mps > 0.0) {
            return Err(ConfigError::new("v_max_mps", "must be positive"));
        }
        if self.encrypt_at_rest && self.mode != ProtocolMode::Centralized {
            return Err(ConfigError::new(
                "encrypt_at_rest",
                "only supported in centralized mode",
            ));
        }

        let mut ids = BTreeSet::new();
        for (i, t) in self.totems.iter().enumerate() {
            if !ids.insert(&t.id) {
                return Err(ConfigError::new(format!("totems[{i}].id"), format!("duplicate id {}", t.id)));
            }
            if !(t.radio_range_m.is_finite() && t.radio_range_m > 0.0) {
                return Err(ConfigError::new(format!("totems[{i}].radio_range_m"), "must be positive"));
            }
            if !(t.x.is_finite() && t.y.is_finite()) {
                return Err(ConfigError::new(format!("totems[{i}]"), "coordinates must be finite"));
            }
        }
        for (i, id) in self.unreachable_totems.iter().enumerate() {
            if !ids.contains(id) {
                return Err(ConfigError::new(format!("unreachable_totems[{i}]"), format!("unknown totem {id}")));
            }
        }

        let mut diagnosed = BTreeSet::new();
        for (i, inf) in self.infections.iter().enumerate() {
            if inf.device >= self.devices.count {
                return Err(ConfigError::new(
                    format!("infections[{i}].device"),
                    format!("device {} does not exist", inf.device),
                ));
            }
            if !diagnosed.insert(inf.device) {
                return Err(ConfigError::new(format!("infections[{i}].device"), "device diagnosed twice"));
            }
            let t = to_millis(&format!("infections[{i}].diagnosis_time_s"), inf.diagnosis_time_s)?;
            if t >= duration {
                return Err(ConfigError::new(
                    format!("infections[{i}].diagnosis_time_s"),
                    "must be before the end of the run",
                ));
            }
        }

        let adv = &self.adversary;
        if let Coverage::Discs(discs) = &adv.coverage {
            for (i, d) in discs.iter().enumerate() {
                if !(d.r.is_finite() && d.r > 0.0) {
                    return Err(ConfigError::new(format!("adversary.coverage.discs[{i}].r"), "must be positive"));
                }
            }
        }
        for (i, t) in adv.targets.iter().enumerate() {
            if *t >= self.devices.count {
                return Err(ConfigError::new(format!("adversary.targets[{i}]"), format!("device {t} does not exist")));
            }
        }
        for (i, r) in adv.replays.iter().enumerate() {
            if r.victim >= self.devices.count {
                return Err(ConfigError::new(
                    format!("adversary.replays[{i}].victim"),
                    format!("device {} does not exist", r.victim),
                ));
            }
            if !ids.contains(&r.target_totem) {
                return Err(ConfigError::new(
                    format!("adversary.replays[{i}].target_totem"),
                    format!("unknown totem {}", r.target_totem),
                ));
            }
            let t = to_millis(&format!("adversary.replays[{i}].at_s"), r.at_s)?;
            if t >= duration {
                return Err(ConfigError::new(format!("adversary.replays[{i}].at_s"), "must be before the end of the run"));
            }
        }
        if let Some(r) = adv.colocation_radius_m {
            if !(r.is_finite() && r >= 0.0) {
                return Err(ConfigError::new("adversary.colocation_radius_m", "must be non-negative"));
            }
        }

        self.energy.validate().map_err(|m| ConfigError::new("energy", m))?;
        self.validate_mobility()
    }

    fn validate_mobility(&self) -> Result<(), ConfigError> {
        let m = &self.devices.mobility;
        let zones = self.zones();
        if zones.is_empty() && self.devices.count > 0 {
            return Err(ConfigError::new("devices.mobility.zones", "at least one zone is required"));
        }
        if !(m.dwell_s.min.is_finite() && m.dwell_s.min >= 0.0) {
            return Err(ConfigError::new("devices.mobility.dwell_s.min", "dwell time must be non-negative"));
        }
        if !(m.dwell_s.max.is_finite() && m.dwell_s.max > 0.0 && m.dwell_s.max >= m.dwell_s.min) {
            return Err(ConfigError::new("devices.mobility.dwell_s.max", "must be positive and at least min"));
        }
        to_millis("devices.mobility.dwell_s.min", m.dwell_s.min.round())?;
        if !(m.speed_mps.is_finite() && m.speed_mps > 0.0) {
            return Err(ConfigError::new("devices.mobility.speed_mps", "must be positive"));
        }
        if let Some(rows) = &m.transition {
            super::mobility::check_transition(rows, zones.len())
                .map_err(|e| ConfigError::new("devices.mobility.transition", e.to_string()))?;
        }
        if let Some(init) = &m.initial_zones {
            if init.len() != self.devices.count as usize {
                return Err(ConfigError::new("devices.mobility.initial_zones", "need one zone per device"));
            }
            if let Some((i, z)) = init.iter().enumerate().find(|(_, z)| **z >= zones.len()) {
                return Err(ConfigError::new(
                    format!("devices.mobility.initial_zones[{i}]"),
                    format!("zone {z} does not exist"),
                ));
            }
        }
        Ok(())
    }

    /// Zone positions in index order.
    pub fn zones(&self) -> Vec<Position> {
        let m = &self.devices.mobility;
        if let Some(z) = &m.zones {
            return z.clone();
        }
        let mut zones: Vec<Position> = self.totems.iter().map(TotemSite::position).collect();
        if m.outside_zone {
            zones.push(self.outside_position());
        }
        zones
    }

    /// A point well clear of every totem's radio range.
    fn outside_position(&self) -> Position {
        let (min_x, min_y, reach) = self.totems.iter().fold((0.0f64, 0.0f64, 0.0f64), |acc, t| {
            (acc.0.min(t.x), acc.1.min(t.y), acc.2.max(t.radio_range_m))
        });
        Position::new(min_x - 1000.0 - 2.0 * reach, min_y - 1000.0 - 2.0 * reach)
    }

    pub fn colocation_radius(&self) -> f64 {
        self.adversary.colocation_radius_m.unwrap_or_else(|| {
            self.totems.iter().map(|t| t.radio_range_m).fold(0.0, f64::max)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "seed": 1,
        "duration_s": 1200,
        "totems": [{"id": "T-0001", "x": 0, "y": 0, "radio_range_m": 30}],
        "devices": {"count": 2}
    }"#;

    #[test]
    fn defaults_apply() {
        let cfg = SimConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.mode, ProtocolMode::Centralized);
        assert_eq!(cfg.slot_len_s, 600);
        assert_eq!(cfg.broadcast_interval_s, 0.5);
        assert_eq!(cfg.epsilon_slots, 1);
        assert_eq!(cfg.risk_threshold_s, 900.0);
        assert_eq!(cfg.lookback_days, 14);
        assert_eq!(cfg.v_max_mps, 42.0);
        assert_eq!(cfg.zones().len(), 2);
        let outside = cfg.zones()[1];
        assert!(outside.distance(&Position::new(0.0, 0.0)) > 1000.0);
    }

    #[test]
    fn missing_field_is_named() {
        let err = SimConfig::from_json(r#"{"seed": 1, "totems": [], "devices": {"count": 1}}"#).unwrap_err();
        assert_eq!(err.field, "duration_s");
        let err = SimConfig::from_json(
            r#"{"seed": 1, "duration_s": 10, "totems": [{"id": "a", "x": 0, "y": 0}], "devices": {"count": 1}}"#,
        )
        .unwrap_err();
        assert_eq!(err.field, "totems[0].radio_range_m");
    }

    #[test]
    fn type_errors_carry_the_path() {
        let err = SimConfig::from_json(
            r#"{"seed": 1, "duration_s": 10, "totems": [], "devices": {"count": "many"}}"#,
        )
        .unwrap_err();
        assert_eq!(err.field, "devices.count");
    }

    fn with(patch: impl FnOnce(&mut SimConfig)) -> Result<(), ConfigError> {
        let mut cfg = SimConfig::from_json(MINIMAL).unwrap();
        patch(&mut cfg);
        cfg.validate()
    }

    #[test]
    fn semantic_validation() {
        assert_eq!(with(|c| c.slot_len_s = 0).unwrap_err().field, "slot_len_s");
        assert_eq!(with(|c| c.broadcast_interval_s = 0.0001).unwrap_err().field, "broadcast_interval_s");
        assert_eq!(
            with(|c| c.infections.push(Infection { device: 5, diagnosis_time_s: 1.0 })).unwrap_err().field,
            "infections[0].device"
        );
        assert_eq!(
            with(|c| c.infections.push(Infection { device: 0, diagnosis_time_s: 1200.0 })).unwrap_err().field,
            "infections[0].diagnosis_time_s"
        );
        assert_eq!(
            with(|c| c.devices.mobility.dwell_s.min = -1.0).unwrap_err().field,
            "devices.mobility.dwell_s.min"
        );
        assert_eq!(
            with(|c| c.devices.mobility.transition = Some(vec![vec![0.5, 0.4], vec![0.0, 1.0]]))
                .unwrap_err()
                .field,
            "devices.mobility.transition"
        );
        assert_eq!(
            with(|c| {
                c.mode = ProtocolMode::Decentralized;
                c.encrypt_at_rest = true;
            })
            .unwrap_err()
            .field,
            "encrypt_at_rest"
        );
        assert_eq!(
            with(|c| c.totems.push(c.totems[0].clone())).unwrap_err().field,
            "totems[1].id"
        );
    }
}
