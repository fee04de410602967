//! Argument parsing and verb dispatch.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use emotok_core::bridge::Granularity;
use emotok_core::evalkit::OutputFormat;
use emotok_core::skeldata::{load_dataset, synthesize_dataset, Dataset, SynthProfile};

use crate::config::{BackendKind, ExperimentConfig, Overrides, Strategy, TaskOrder};
use crate::pipeline;
use crate::run::{config_from_run, CONFIG_FILE};

#[derive(Debug, Parser)]
#[command(
    name = "emotok",
    version,
    about = "Skeleton-based emotion recognition and description"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Reuse the config snapshot of an earlier run (root or stage directory).
    #[arg(long, global = true, conflicts_with = "config")]
    pub from_run: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run root (pretrain, finetune, eval, describe) or dataset directory (synth).
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Use the full-scale schedules and adapter rank.
    #[arg(long, global = true)]
    pub paper_scale: bool,
    #[arg(long, global = true, value_enum)]
    pub backend: Option<BackendKind>,
    /// Endpoint of the remote backend.
    #[arg(long, global = true)]
    pub endpoint: Option<String>,
    #[arg(long, global = true, value_enum)]
    pub order: Option<TaskOrder>,
    #[arg(long, global = true, value_parser = parse_granularity)]
    pub granularity: Option<Granularity>,
    #[arg(long, global = true, value_enum)]
    pub strategy: Option<Strategy>,
    /// Recognition answer template: A, B or C.
    #[arg(long, global = true, value_parser = parse_format)]
    pub format: Option<OutputFormat>,
    /// Suppress progress messages.
    #[arg(long, short, global = true)]
    pub quiet: bool,
}

fn parse_granularity(s: &str) -> std::result::Result<Granularity, String> {
    s.parse().map_err(|e: emotok_core::Error| e.to_string())
}

fn parse_format(s: &str) -> std::result::Result<OutputFormat, String> {
    s.parse().map_err(|e: emotok_core::Error| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (manifest plus sample files).
    Synth {
        /// emilya-like, kdae-like or egbm-like.
        #[arg(long)]
        profile: String,
        #[arg(long, default_value_t = 20)]
        samples_per_label: usize,
        /// Keep only the first N labels of the profile.
        #[arg(long)]
        labels: Option<usize>,
    },
    /// Load and validate a dataset manifest.
    Ingest {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Skeleton-text alignment pretraining.
    Pretrain,
    /// Base decoder training plus adapter fine-tuning in the configured task order.
    Finetune,
    /// Generate on the evaluation split and score the outputs.
    Eval,
    /// Recognise and describe a single sample file.
    Describe {
        #[arg(long)]
        sample: PathBuf,
        /// Dataset whose skeleton layout the sample uses.
        #[arg(long)]
        dataset: Option<String>,
    },
}

impl GlobalArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            paper_scale: self.paper_scale,
            backend: self.backend,
            endpoint: self.endpoint.clone(),
            order: self.order,
            granularity: self.granularity,
            strategy: self.strategy,
            format: self.format,
        }
    }

    /// The effective config: file or snapshot, then command-line overrides.
    pub fn experiment(&self) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.from_run) {
            (Some(path), None) => ExperimentConfig::load(path)?,
            (None, Some(dir)) => config_from_run(dir)?,
            _ => bail!("pass --config <file> or --from-run <dir>"),
        };
        cfg.apply(&self.overrides());
        Ok(cfg)
    }

    /// Run root: `--out-dir`, else the root of `--from-run`.
    pub fn run_root(&self) -> Result<PathBuf> {
        if let Some(d) = &self.out_dir {
            return Ok(d.clone());
        }
        match &self.from_run {
            Some(dir) if dir.join(CONFIG_FILE).is_file() => Ok(dir
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from("."))),
            Some(dir) => Ok(dir.clone()),
            None => bail!("pass --out-dir <run directory>"),
        }
    }
}

/// Text report of a loaded dataset.
pub fn ingest_report(dataset: &Dataset) -> String {
    let m = &dataset.manifest;
    let frames: Vec<usize> = dataset.sequences.iter().map(|s| s.frame_count()).collect();
    let (lo, hi) = (
        frames.iter().min().copied().unwrap_or(0),
        frames.iter().max().copied().unwrap_or(0),
    );
    let mean = frames.iter().sum::<usize>() as f64 / frames.len().max(1) as f64;
    let described = m.samples.iter().filter(|s| s.description.is_some()).count();
    let mut out = format!(
        "dataset {}: ok\njoints: {} ({} bones{})\nfps: {}\nsamples: {} ({} with descriptions)\nframes: min {lo}, max {hi}, mean {mean:.1}\nlabels:\n",
        m.name,
        m.joint_count,
        m.edges_or_default().len(),
        if m.edges.is_some() { "" } else { ", default tree" },
        m.fps,
        m.samples.len(),
        described,
    );
    for l in &m.labels {
        let n = m.samples.iter().filter(|s| &s.label == l).count();
        out.push_str(&format!("  {l}: {n}\n"));
    }
    out
}

/// Runs one verb; results go to `out`, progress to stderr unless quiet.
pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let g = &cli.global;
    let quiet = g.quiet;
    let mut log = |msg: &str| {
        if !quiet {
            eprintln!("{msg}");
        }
    };
    match &cli.command {
        Command::Synth {
            profile,
            samples_per_label,
            labels,
        } => {
            let seed = g.seed.context("synth needs --seed")?;
            let dir = g.out_dir.as_ref().context("synth needs --out-dir")?;
            let mut p = SynthProfile::named(profile, *samples_per_label, seed)?;
            if let Some(k) = labels {
                if *k == 0 || *k > p.labels.len() {
                    bail!("--labels must lie in 1..={}", p.labels.len());
                }
                p.labels.truncate(*k);
            }
            let data = synthesize_dataset(&p)?;
            let manifest = data.write_to(dir)?;
            writeln!(out, "{}", manifest.display())?;
        }
        Command::Ingest { manifest } => {
            let data = load_dataset(manifest)?;
            write!(out, "{}", ingest_report(&data))?;
        }
        Command::Pretrain => {
            let cfg = g.experiment()?;
            let outcome = pipeline::run_pretrain(&cfg, &g.run_root()?, &mut log)?;
            for m in &outcome.report.models {
                let acc: Vec<String> = m
                    .accuracy
                    .iter()
                    .map(|a| match a.test {
                        Some(t) => format!("{} train {:.4} test {t:.4}", a.dataset, a.train),
                        None => format!("{} train {:.4}", a.dataset, a.train),
                    })
                    .collect();
                writeln!(out, "{} -> {}: {}", m.name, m.checkpoint, acc.join("; "))?;
            }
            writeln!(out, "finalized {}", outcome.dir.display())?;
        }
        Command::Finetune => {
            let cfg = g.experiment()?;
            let outcome = pipeline::run_finetune(&cfg, &g.run_root()?, &mut log)?;
            for s in &outcome.report.stages {
                let acc = s
                    .recognition_accuracy
                    .map_or("n/a".to_string(), |a| format!("{a:.4}"));
                writeln!(
                    out,
                    "{:?}: {} exchanges, {} steps, final loss {}, recognition accuracy {acc}",
                    s.task,
                    s.exchanges,
                    s.steps,
                    s.final_loss
                        .map_or("n/a".to_string(), |l| format!("{l:.4}")),
                )?;
            }
            if outcome.report.forgetting_check {
                let drop = outcome
                    .report
                    .recognition_drop
                    .map_or("n/a".to_string(), |d| format!("{d:.4}"));
                writeln!(out, "forgetting check: recognition accuracy drop {drop}")?;
            }
            writeln!(out, "finalized {}", outcome.dir.display())?;
        }
        Command::Eval => {
            let cfg = g.experiment()?;
            let outcome = pipeline::run_eval(&cfg, &g.run_root()?, &mut log)?;
            for line in outcome.report.summary_lines() {
                writeln!(out, "{line}")?;
            }
            writeln!(out, "finalized {}", outcome.dir.display())?;
        }
        Command::Describe { sample, dataset } => {
            let cfg = g.experiment()?;
            let d = pipeline::run_describe(&cfg, &g.run_root()?, sample, dataset.as_deref())?;
            writeln!(out, "label: {}", d.label)?;
            match &d.description {
                Some(text) => writeln!(out, "description: {text}")?,
                None => writeln!(
                    out,
                    "description: (none; no single emotion was recognised in {:?})",
                    d.recognition_text
                )?,
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn global_flags_parse_after_the_verb() {
        let cli = Cli::try_parse_from([
            "emotok",
            "finetune",
            "--config",
            "c.toml",
            "--order",
            "r-d",
            "--format",
            "C",
            "--granularity",
            "spatiotemporal",
            "--backend",
            "tiny",
            "--seed",
            "9",
        ])
        .unwrap();
        let o = cli.global.overrides();
        assert_eq!(o.order, Some(TaskOrder::RecognitionFirst));
        assert_eq!(o.format, Some(OutputFormat::C));
        assert_eq!(o.granularity, Some(Granularity::Spatiotemporal));
        assert_eq!(o.seed, Some(9));
    }

    #[test]
    fn config_and_from_run_conflict() {
        assert!(
            Cli::try_parse_from(["emotok", "eval", "--config", "a", "--from-run", "b"]).is_err()
        );
        assert!(Cli::try_parse_from(["emotok", "eval", "--format", "D"]).is_err());
    }
}
