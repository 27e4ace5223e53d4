//! Writes a run to an output directory. Every file is a pure function of the
//! run, so equal seeds give byte-identical directories.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use super::SimOutput;
use crate::beacon::DeviceId;
use crate::metrics::evaluate;
use crate::totem::TotemId;

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("{0} already exists and is not empty (use --overwrite)")]
    NotEmpty(PathBuf),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Serialize)]
struct PublicationIndex<'a> {
    index: usize,
    diagnosed: DeviceId,
    diagnosis_time_s: f64,
    published_at: f64,
    disclosed: usize,
    published: usize,
    unreachable: &'a [TotemId],
    file: String,
}

fn json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("output serializes");
    out.push(b'\n');
    out
}

fn is_ours(name: &str) -> bool {
    const FIXED: [&str; 10] = [
        "config.json",
        "ground_truth.json",
        "records.jsonl",
        "publications.json",
        "exposure_reports.json",
        "eavesdrop.jsonl",
        "attack_report.json",
        "fraud_flags.json",
        "metrics.json",
        "k_anonymity.csv",
    ];
    FIXED.contains(&name)
        || ((name.starts_with("disclosure_") || name.starts_with("published_")) && name.ends_with(".json"))
}

impl SimOutput {
    /// Every artifact as `(file name, bytes)`, in a fixed order.
    pub fn artifacts(&self) -> Vec<(String, Vec<u8>)> {
        let mut files = Vec::new();
        files.push(("config.json".to_string(), json(&self.config)));
        files.push(("ground_truth.json".to_string(), json(&self.ground_truth)));

        let mut records = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut records, r).expect("record serializes");
            records.push(b'\n');
        }
        files.push(("records.jsonl".to_string(), records));

        let mut index = Vec::new();
        for (i, p) in self.publications.iter().enumerate() {
            let name = format!("published_{i:03}.json");
            files.push((format!("disclosure_{i:03}.json"), json(&p.disclosure)));
            files.push((name.clone(), p.bytes.clone()));
            index.push(PublicationIndex {
                index: i,
                diagnosed: p.diagnosed,
                diagnosis_time_s: p.diagnosis_time_s,
                published_at: p.list.published_at,
                disclosed: p.disclosure.len(),
                published: p.list.len(),
                unreachable: &p.unreachable,
                file: name,
            });
        }
        files.push(("publications.json".to_string(), json(&index)));
        files.push(("exposure_reports.json".to_string(), json(&self.exposure_reports)));

        let mut log = Vec::new();
        self.eavesdrop.write_jsonl(&mut log).expect("writing to memory");
        files.push(("eavesdrop.jsonl".to_string(), log));
        files.push(("attack_report.json".to_string(), json(&self.attack)));
        files.push(("fraud_flags.json".to_string(), json(&self.flagged)));

        let metrics = evaluate(self);
        files.push(("k_anonymity.csv".to_string(), metrics.k_anonymity.to_csv().into_bytes()));
        files.push(("metrics.json".to_string(), json(&metrics)));
        files
    }

    /// Writes all artifacts into `dir`, creating it if needed. A non-empty
    /// directory is refused unless `overwrite`, in which case stale artifacts
    /// of an earlier run are removed first.
    pub fn write_dir(&self, dir: &Path, overwrite: bool) -> Result<Vec<PathBuf>, OutputError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| OutputError::Io { path, source }
        };
        if dir.exists() {
            let entries: Vec<_> = fs::read_dir(dir).map_err(io(dir))?.collect::<Result<_, _>>().map_err(io(dir))?;
            if !entries.is_empty() && !overwrite {
                return Err(OutputError::NotEmpty(dir.to_path_buf()));
            }
            for e in entries {
                if e.file_name().to_str().is_some_and(is_ours) {
                    fs::remove_file(e.path()).map_err(io(&e.path()))?;
                }
            }
        } else {
            fs::create_dir_all(dir).map_err(io(dir))?;
        }
        let mut written = Vec::new();
        for (name, bytes) in self.artifacts() {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(io(&path))?;
            written.push(path);
        }
        Ok(written)
    }
}
