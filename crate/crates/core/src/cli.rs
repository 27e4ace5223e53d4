//! Command-line front end. Exit status: 0 on success, 1 on runtime failure,
//! 2 on bad usage or malformed input.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::adversary::{
    infer_health_status, recover_trajectory, AttackParams, EavesdropLog, HealthInference, LogError,
    TargetPayloads, TrajectoryPoint,
};
use crate::authority::{publish, AuthorityStore, PublishedList, DEFAULT_EPSILON_SLOTS, DEFAULT_V_MAX_MPS};
use crate::beacon::{DeviceId, DeviceKey, DEFAULT_SLOT_LEN_S};
use crate::device::{DeviceState, PositiveDisclosure, DEFAULT_LOOKBACK_DAYS, DEFAULT_RISK_THRESHOLD_S};
use crate::sim::{self, SimConfig};
use crate::totem::{BeaconRecord, ProtocolMode, TotemSite};

const FORMATS: &str = "\
File formats:
  config.json        simulator scenario
                     {\"seed\":1,\"mode\":\"centralized\",\"slot_len_s\":600,\"duration_s\":7200,\"totems\":[{\"id\":\"T-0001\",\"x\":0,\"y\":0,\"radio_range_m\":30}],\"devices\":{\"count\":20},\"infections\":[{\"device\":0,\"diagnosis_time_s\":3600}]}
  records.jsonl      one stored sighting per line
                     {\"totem\":\"T-0001\",\"slot\":12,\"beacon\":\"69c4e0d86a7b0430d8cdb78070b4c55a\"}
  disclosure.json    beacons handed over by a positive user
                     [{\"slot\":12,\"beacon\":\"69c4e0d86a7b0430d8cdb78070b4c55a\"}]
  published.json     list released by the authority
                     {\"published_at\":7800.0,\"beacons\":[\"69c4e0d86a7b0430d8cdb78070b4c55a\"]}
  totems.json        totem sites
                     [{\"id\":\"T-0001\",\"x\":0.0,\"y\":0.0,\"radio_range_m\":30.0}]
  eavesdrop.jsonl    one captured payload per line
                     {\"payload\":\"69c4e0d86a7b0430d8cdb78070b4c55a\",\"t\":7203.5,\"x\":1.0,\"y\":2.0}
  targets.json       payloads captured next to known people
                     [{\"target\":\"alice\",\"payloads\":[\"69c4e0d86a7b0430d8cdb78070b4c55a\"]}]

Exit status: 0 success, 1 runtime failure, 2 usage or input error.";

#[derive(Debug, Parser)]
#[command(name = "iotrace", version, about = "Edge-assisted BLE contact tracing toolkit", after_long_help = FORMATS)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a simulated scenario and write its artifacts to a directory.
    Simulate(SimulateArgs),
    /// Build the published list for one disclosure from stored records.
    Reconcile(ReconcileArgs),
    /// Flag beacons sighted at totems too far apart to be genuine.
    DetectFraud(DetectFraudArgs),
    /// Match a device key against published lists.
    Match(MatchArgs),
    /// Run the eavesdropper's health-status and trajectory attacks.
    Attack(AttackArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario file (config.json).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Override the scenario seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the protocol mode.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<ProtocolMode>,
    /// Replace artifacts in a non-empty output directory.
    #[arg(long)]
    pub overwrite: bool,
    /// Run seeds A..B (end exclusive) in parallel, one subdirectory each.
    /// `seeds=A..B` is accepted too.
    #[arg(long, value_name = "A..B", value_parser = parse_range, conflicts_with = "seed")]
    pub sweep: Option<(u64, u64)>,
}

#[derive(Debug, Args)]
pub struct ReconcileArgs {
    /// Stored sightings (records.jsonl).
    #[arg(long)]
    pub records: PathBuf,
    /// The positive user's beacons (disclosure.json).
    #[arg(long, alias = "disclosure")]
    pub positives: PathBuf,
    #[arg(long, default_value_t = DEFAULT_EPSILON_SLOTS)]
    pub epsilon: u64,
    /// Timestamp written into the list.
    #[arg(long, default_value_t = 0.0)]
    pub published_at: f64,
    /// Shuffle seed for the published order.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Beacons to leave out (JSON array of hex, as written by detect-fraud).
    #[arg(long)]
    pub exclude: Option<PathBuf>,
    /// Write the list here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DetectFraudArgs {
    #[arg(long)]
    pub records: PathBuf,
    /// Totem sites (totems.json).
    #[arg(long)]
    pub totems: PathBuf,
    #[arg(long, default_value_t = DEFAULT_V_MAX_MPS)]
    pub v_max: f64,
    #[arg(long, default_value_t = DEFAULT_SLOT_LEN_S)]
    pub slot_len: u64,
}

#[derive(Debug, Args)]
pub struct MatchArgs {
    /// 128-bit device key, 32 hex digits.
    #[arg(long)]
    pub key: String,
    /// Published lists (published.json); may be repeated.
    #[arg(long, required = true)]
    pub published: Vec<PathBuf>,
    /// Matching time, seconds since the epoch of the run.
    #[arg(long)]
    pub now: f64,
    #[arg(long, default_value_t = DEFAULT_RISK_THRESHOLD_S)]
    pub threshold: f64,
    #[arg(long, default_value_t = DEFAULT_SLOT_LEN_S)]
    pub slot_len: u64,
    #[arg(long, default_value_t = DEFAULT_LOOKBACK_DAYS)]
    pub lookback_days: u32,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    /// Captured payloads (eavesdrop.jsonl).
    #[arg(long)]
    pub log: PathBuf,
    /// Published lists; may be repeated.
    #[arg(long, required = true)]
    pub published: Vec<PathBuf>,
    /// Payloads per known person (targets.json). Without it only the
    /// trajectory attack runs.
    #[arg(long)]
    pub targets: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SLOT_LEN_S)]
    pub slot_len: u64,
    #[arg(long, default_value_t = DEFAULT_EPSILON_SLOTS)]
    pub epsilon: u64,
    /// Captures within this distance count as co-located.
    #[arg(long, default_value_t = 30.0)]
    pub radius: f64,
}

fn parse_mode(s: &str) -> Result<ProtocolMode, String> {
    s.parse::<ProtocolMode>().map_err(|e| e.to_string())
}

fn parse_range(s: &str) -> Result<(u64, u64), String> {
    let s = s.strip_prefix("seeds=").unwrap_or(s);
    let (a, b) = s.split_once("..").ok_or("expected A..B")?;
    let a: u64 = a.trim().parse().map_err(|e| format!("{a}: {e}"))?;
    let b: u64 = b.trim().parse().map_err(|e| format!("{b}: {e}"))?;
    if a >= b {
        return Err("range is empty".into());
    }
    Ok((a, b))
}

#[derive(Debug, Error)]
pub enum CliError {
    /// Malformed input: exit status 2.
    #[error("{0}")]
    Input(String),
    /// Anything else: exit status 1.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let bytes = read(path)?;
    let de = &mut serde_json::Deserializer::from_slice(&bytes);
    serde_path_to_error::deserialize(de).map_err(|e| CliError::Input(format!("{}: {} at {}", path.display(), e.inner(), e.path())))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let file = File::open(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| CliError::Input(format!("{}: line {}: {e}", path.display(), i + 1)))?;
        out.push(item);
    }
    Ok(out)
}

fn read_published(paths: &[PathBuf]) -> Result<Vec<PublishedList>, CliError> {
    paths
        .iter()
        .map(|p| PublishedList::from_json(&read(p)?).map_err(|e| CliError::Input(format!("{}: {e}", p.display()))))
        .collect()
}

fn emit_json<T: Serialize>(value: &T, out: &mut dyn Write) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("output serializes");
    bytes.push(b'\n');
    out.write_all(&bytes).map_err(|e| CliError::Runtime(e.to_string()))
}

fn load_config(args: &SimulateArgs) -> Result<SimConfig, CliError> {
    let text = String::from_utf8(read(&args.config)?)
        .map_err(|_| CliError::Input(format!("{}: not UTF-8", args.config.display())))?;
    let mut cfg = SimConfig::from_json(&text).map_err(|e| CliError::Input(format!("{}: {e}", args.config.display())))?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = args.mode {
        cfg.mode = mode;
    }
    cfg.validate().map_err(|e| CliError::Input(format!("{}: {e}", args.config.display())))?;
    Ok(cfg)
}

fn simulate_one(cfg: &SimConfig, dir: &Path, overwrite: bool) -> Result<sim::SimOutput, CliError> {
    let out = sim::run(cfg).map_err(|e| CliError::Runtime(e.to_string()))?;
    out.write_dir(dir, overwrite).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(out)
}

fn cmd_simulate(args: &SimulateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = load_config(args)?;
    let summaries: Vec<(u64, crate::metrics::RunSummary)> = match args.sweep {
        None => {
            let run = simulate_one(&cfg, &args.out, args.overwrite)?;
            vec![(cfg.seed, crate::metrics::evaluate(&run).run)]
        }
        Some((a, b)) => (a..b)
            .into_par_iter()
            .map(|seed| {
                let cfg = SimConfig { seed, ..cfg.clone() };
                let run = simulate_one(&cfg, &args.out.join(format!("seed_{seed}")), args.overwrite)?;
                Ok((seed, crate::metrics::evaluate(&run).run))
            })
            .collect::<Result<_, CliError>>()?,
    };
    for (seed, s) in summaries {
        writeln!(
            out,
            "seed {seed}: {} records, {} publications, {} published beacons",
            s.records, s.publications, s.published_beacons
        )
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    Ok(())
}

fn load_store(records: &Path) -> Result<AuthorityStore, CliError> {
    let mut store = AuthorityStore::new();
    store.ingest_records(read_jsonl::<BeaconRecord>(records)?);
    Ok(store)
}

fn cmd_reconcile(args: &ReconcileArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut store = load_store(&args.records)?;
    let disclosure: PositiveDisclosure = read_json(&args.positives)?;
    if disclosure.is_empty() {
        return Err(CliError::Input(format!("{}: disclosure is empty", args.positives.display())));
    }
    if let Some(path) = &args.exclude {
        let excluded: Vec<crate::beacon::Beacon> = read_json(path)?;
        store.exclude(excluded);
    }
    let list = store.reconcile_centralized(&disclosure, args.epsilon, args.published_at);
    let bytes = publish(&list, args.seed);
    match &args.out {
        Some(path) => fs::write(path, bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display()))),
        None => out.write_all(&bytes).map_err(|e| CliError::Runtime(e.to_string())),
    }
}

fn cmd_detect_fraud(args: &DetectFraudArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let store = load_store(&args.records)?;
    let sites: Vec<TotemSite> = read_json(&args.totems)?;
    if args.slot_len == 0 || !(args.v_max > 0.0) {
        return Err(CliError::Input("--slot-len and --v-max must be positive".into()));
    }
    let positions: BTreeMap<_, _> = sites.iter().map(|s| (s.id.clone(), s.position())).collect();
    let flagged = store
        .detect_fraud(args.v_max, &positions, args.slot_len)
        .map_err(|e| CliError::Input(e.to_string()))?;
    emit_json(&flagged, out)
}

fn cmd_match(args: &MatchArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let key = DeviceKey::from_hex(&args.key, DeviceId(0)).map_err(|e| CliError::Input(format!("--key: {e}")))?;
    if args.slot_len == 0 {
        return Err(CliError::Input("--slot-len must be positive".into()));
    }
    let lists = read_published(&args.published)?;
    let device = DeviceState::new(key, args.slot_len)
        .with_risk_threshold(args.threshold)
        .with_lookback_days(args.lookback_days);
    let report = device.match_lists(&lists, args.now).map_err(|e| CliError::Input(e.to_string()))?;
    emit_json(&report, out)
}

#[derive(Serialize)]
struct AttackOutput {
    health: HealthInference,
    trajectory: Vec<TrajectoryPoint>,
}

fn cmd_attack(args: &AttackArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let file = File::open(&args.log).map_err(|e| CliError::Runtime(format!("{}: {e}", args.log.display())))?;
    let log = EavesdropLog::read_jsonl(BufReader::new(file)).map_err(|e| match e {
        LogError::Parse { .. } => CliError::Input(format!("{}: {e}", args.log.display())),
        LogError::Io(_) => CliError::Runtime(format!("{}: {e}", args.log.display())),
    })?;
    if args.slot_len == 0 {
        return Err(CliError::Input("--slot-len must be positive".into()));
    }
    let lists = read_published(&args.published)?;
    let targets: Vec<TargetPayloads> = match &args.targets {
        Some(p) => read_json(p)?,
        None => Vec::new(),
    };
    let params = AttackParams { slot_len: args.slot_len, epsilon: args.epsilon, colocation_radius_m: args.radius };
    emit_json(
        &AttackOutput {
            health: infer_health_status(&log, &lists, &targets, &params),
            trajectory: recover_trajectory(&log, &lists, args.slot_len),
        },
        out,
    )
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a, out),
        Command::Reconcile(a) => cmd_reconcile(a, out),
        Command::DetectFraud(a) => cmd_detect_fraud(a, out),
        Command::Match(a) => cmd_match(a, out),
        Command::Attack(a) => cmd_attack(a, out),
    }
}

/// Parses `std::env::args`, runs, and returns the process exit status.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let stdout = std::io::stdout();
    match execute(&cli, &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn ranges_parse() {
        assert_eq!(parse_range("3..7"), Ok((3, 7)));
        assert_eq!(parse_range("seeds=0..2"), Ok((0, 2)));
        assert!(parse_range("7..3").is_err());
        assert!(parse_range("x").is_err());
    }

    #[test]
    fn malformed_jsonl_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.jsonl");
        fs::write(
            &path,
            "{\"totem\":\"T-0001\",\"slot\":1,\"beacon\":\"00000000000000000000000000000000\"}\n{oops\n",
        )
        .unwrap();
        let err = read_jsonl::<BeaconRecord>(&path).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
