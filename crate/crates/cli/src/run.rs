//! Run directories: one subdirectory per stage holding the config snapshot,
//! an input digest, metrics, checkpoints, reports and timings. A stage is
//! sealed by a `FINALIZED` marker and refuses to be rewritten afterwards.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use emotok_core::numerics::Params;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

pub const CONFIG_FILE: &str = "config.toml";
pub const INPUTS_FILE: &str = "inputs.sha256";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMINGS_FILE: &str = "timings.json";
pub const FINALIZED: &str = "FINALIZED";

pub const PRETRAIN: &str = "pretrain";
pub const FINETUNE: &str = "finetune";
pub const EVAL: &str = "eval";

pub fn is_finalized(dir: &Path) -> bool {
    dir.join(FINALIZED).is_file()
}

/// Fails unless `root/stage` exists and is finalized.
pub fn require_finalized(root: &Path, stage: &str, hint: &str) -> Result<PathBuf> {
    let dir = root.join(stage);
    if !is_finalized(&dir) {
        bail!("{} has no finalized {stage} stage; {hint}", root.display());
    }
    Ok(dir)
}

/// Config snapshot of an earlier run: `dir` is a stage directory or a run root.
pub fn config_from_run(dir: &Path) -> Result<ExperimentConfig> {
    let candidates = [
        dir.to_path_buf(),
        dir.join(EVAL),
        dir.join(FINETUNE),
        dir.join(PRETRAIN),
    ];
    let path = candidates
        .iter()
        .map(|d| d.join(CONFIG_FILE))
        .find(|p| p.is_file())
        .with_context(|| format!("{} holds no {CONFIG_FILE} snapshot", dir.display()))?;
    let text = fs::read_to_string(&path)?;
    ExperimentConfig::parse(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Sequential content digest over labelled byte strings.
#[derive(Clone, Default)]
pub struct InputDigest(Sha256);

impl InputDigest {
    pub fn add(&mut self, label: &str, bytes: &[u8]) {
        self.0.update((label.len() as u64).to_le_bytes());
        self.0.update(label.as_bytes());
        self.0.update((bytes.len() as u64).to_le_bytes());
        self.0.update(bytes);
    }

    pub fn add_file(&mut self, label: &str, path: &Path) -> Result<()> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.add(label, &bytes);
        Ok(())
    }

    pub fn hex(self) -> String {
        hex(&self.0.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 over parameter names, shapes and the exact bits of every value.
pub fn params_digest(params: &Params) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.iter() {
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex(&h.finalize())
}

#[derive(Serialize)]
struct Timings<'a> {
    started_unix: f64,
    finished_unix: f64,
    phases: &'a [(String, f64)],
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

/// An open, not yet finalized stage directory.
pub struct StageDir {
    path: PathBuf,
    started: f64,
    phase_start: Instant,
    phases: Vec<(String, f64)>,
    resumed: bool,
}

impl StageDir {
    /// Opens `root/stage` for writing. An unfinished directory left by an
    /// identical config is reused (and reported as resumed); one left by a
    /// different config is refused.
    pub fn open(root: &Path, stage: &str, config: &ExperimentConfig) -> Result<Self> {
        let path = root.join(stage);
        if is_finalized(&path) {
            bail!(
                "{} is finalized and cannot be rewritten; choose a new --out-dir",
                path.display()
            );
        }
        let snapshot = config.to_toml();
        let existing = path.join(CONFIG_FILE);
        let resumed = existing.is_file();
        if resumed && fs::read_to_string(&existing)? != snapshot {
            bail!(
                "{} holds an unfinished run with a different config; choose a new --out-dir",
                path.display()
            );
        }
        fs::create_dir_all(&path).with_context(|| format!("creating {}", path.display()))?;
        fs::write(&existing, snapshot)?;
        Ok(Self {
            path,
            started: unix_now(),
            phase_start: Instant::now(),
            phases: Vec::new(),
            resumed,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn resumed(&self) -> bool {
        self.resumed
    }

    pub fn write_inputs_digest(&self, digest: InputDigest) -> Result<String> {
        let h = digest.hex();
        fs::write(self.file(INPUTS_FILE), format!("{h}\n"))?;
        Ok(h)
    }

    /// Replaces the metrics log with `lines`.
    pub fn reset_metrics(&self, lines: &[String]) -> Result<()> {
        let mut text = lines.join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        fs::write(self.file(METRICS_FILE), text)?;
        Ok(())
    }

    pub fn append_metric(&self, record: &impl Serialize) -> Result<()> {
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.file(METRICS_FILE))?;
        writeln!(f, "{}", serde_json::to_string(record)?)?;
        Ok(())
    }

    pub fn metric_lines(&self) -> Result<Vec<String>> {
        match fs::read_to_string(self.file(METRICS_FILE)) {
            Ok(t) => Ok(t.lines().map(str::to_string).collect()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(e) => Err(e.into()),
        }
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(self.file(name), text)?;
        Ok(())
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<()> {
        fs::write(self.file(name), text)?;
        Ok(())
    }

    /// Closes the current timing phase under `name`.
    pub fn phase(&mut self, name: &str) {
        let now = Instant::now();
        self.phases
            .push((name.to_string(), (now - self.phase_start).as_secs_f64()));
        self.phase_start = now;
    }

    pub fn finalize(self) -> Result<PathBuf> {
        let timings = Timings {
            started_unix: self.started,
            finished_unix: unix_now(),
            phases: &self.phases,
        };
        fs::write(
            self.file(TIMINGS_FILE),
            serde_json::to_string_pretty(&timings)?,
        )?;
        fs::write(self.file(FINALIZED), "")?;
        Ok(self.path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(seed: u64) -> ExperimentConfig {
        ExperimentConfig::parse(&format!(
            "seed = {seed}\n[data]\nmanifests = [\"m.toml\"]\n"
        ))
        .unwrap()
    }

    #[test]
    fn finalized_stage_is_immutable() {
        let root = tempfile::tempdir().unwrap();
        let mut s = StageDir::open(root.path(), "pretrain", &config(1)).unwrap();
        assert!(!s.resumed());
        s.append_metric(&serde_json::json!({"epoch": 0})).unwrap();
        s.phase("train");
        s.finalize().unwrap();
        let err = StageDir::open(root.path(), "pretrain", &config(1))
            .err()
            .unwrap();
        assert!(err.to_string().contains("finalized"), "{err}");
        assert_eq!(config_from_run(root.path()).unwrap(), config(1));
    }

    #[test]
    fn unfinished_stage_resumes_only_with_same_config() {
        let root = tempfile::tempdir().unwrap();
        drop(StageDir::open(root.path(), "eval", &config(1)).unwrap());
        assert!(StageDir::open(root.path(), "eval", &config(1))
            .unwrap()
            .resumed());
        assert!(StageDir::open(root.path(), "eval", &config(2)).is_err());
    }

    #[test]
    fn digest_depends_on_labels_and_bytes() {
        let run = |pairs: &[(&str, &[u8])]| {
            let mut d = InputDigest::default();
            pairs.iter().for_each(|(l, b)| d.add(l, b));
            d.hex()
        };
        assert_eq!(run(&[("a", b"x")]), run(&[("a", b"x")]));
        assert_ne!(run(&[("a", b"x")]), run(&[("a", b"y")]));
        assert_ne!(run(&[("ab", b"")]), run(&[("a", b"b")]));
    }
}
