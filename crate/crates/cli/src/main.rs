//! `lfvg`: synthesize feature stores, train language-free grounding models,
//! run inference, evaluation and ablations, and replay recorded runs.
//!
//! Exit codes: 0 success, 1 failed check (ordering or replay mismatch),
//! 2 usage or input error, 3 numeric failure.

mod commands;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use lfvg::embedding::{AlignmentConfig, SynthShape};
use lfvg::evaluation::{AblationSuite, Benchmark};
use lfvg::proposal::{MergePolicy, DEFAULT_K};
use lfvg::training::{SelectionStrategy, TrainConfig, TrainMode};
use lfvg::Parallelism;

use commands::{AblateRun, EvalRun, ImportCheckRun, InferRun, Invocation, ProposalsRun, QuerySource, SynthRun, TrainRun};
use manifest::{build_id, hash_outputs, RunManifest};

const SEED_ENV: &str = "LFVG_SEED";

#[derive(Parser)]
#[command(name = "lfvg", version, about = "Language-free zero-shot temporal grounding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic feature store.
    Synth(SynthArgs),
    /// Load and validate a feature store.
    ImportCheck {
        #[arg(long)]
        data: PathBuf,
    },
    /// Dump the similarity matrix, cluster labels and proposals as JSON.
    Proposals(ProposalArgs),
    /// Train a grounding model on the videos of a store.
    Train(TrainArgs),
    /// Ground one query in one video.
    Infer(InferArgs),
    /// Evaluate a checkpoint on the queries of a store.
    Eval(EvalArgs),
    /// Run an ablation suite on the synthetic benchmark.
    Ablate(AblateArgs),
    /// Rerun a recorded run and compare output hashes.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    videos: usize,
    #[arg(long, default_value_t = 32)]
    segments: usize,
    #[arg(long, default_value_t = 5)]
    events: usize,
    #[arg(long, default_value_t = 2)]
    frames_per_segment: usize,
    #[arg(long, default_value_t = 2)]
    min_event_len: usize,
    /// Video and query feature dimension.
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 16)]
    latent_dim: usize,
    #[arg(long, default_value_t = 0.1)]
    align_noise: f64,
    #[arg(long, default_value_t = 0.05)]
    obs_noise: f64,
    #[arg(long, default_value_t = 0.3)]
    clutter: f64,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ProposalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    video: Option<String>,
    #[arg(long, default_value_t = DEFAULT_K)]
    k: usize,
    #[arg(long, default_value_t = 2)]
    max_merge: usize,
    #[arg(long, default_value_t = 2)]
    min_len: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    LanguageFree,
    UpperBound,
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectionArg {
    Transformer,
    Random,
}

/// Hyperparameters shared by `train` and `ablate`: preset, then JSON config
/// file, then individual flags.
#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    preset: Option<String>,
    /// JSON object whose keys override the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    selection: Option<SelectionArg>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    n_frames: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    xi: Option<f64>,
    #[arg(long)]
    t_max: Option<usize>,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    no_reg_loss: bool,
    #[arg(long)]
    no_att_loss: bool,
    /// Run single-threaded.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    video: String,
    /// Query id in the store.
    #[arg(long, conflicts_with = "query_blob")]
    query: Option<String>,
    /// Standalone LFVG blob holding query features.
    #[arg(long, requires = "row")]
    query_blob: Option<PathBuf>,
    #[arg(long)]
    row: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "oracle")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Score the ground truth itself instead of a checkpoint.
    #[arg(long)]
    oracle: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    suite: AblationSuite,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long)]
    assert_orderings: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training videos of the benchmark.
    #[arg(long)]
    videos: Option<usize>,
    /// Held-out videos whose queries are evaluated.
    #[arg(long)]
    test_videos: Option<usize>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => Ok(Some(s.trim().parse().with_context(|| format!("{SEED_ENV}={s:?} is not an unsigned integer"))?)),
        Err(_) => Ok(None),
    }
}

fn resolve_seed(flag: Option<u64>) -> Result<u64> {
    Ok(match flag {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    })
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).with_context(|| format!("resolving {}", p.display()))
}

fn parallelism(sequential: bool) -> Parallelism {
    if sequential {
        Parallelism::Sequential
    } else {
        Parallelism::Rayon
    }
}

impl ConfigArgs {
    fn resolve(&self, default_preset: &str, seed: Option<u64>) -> Result<TrainConfig> {
        let base = TrainConfig::preset(self.preset.as_deref().unwrap_or(default_preset))?;
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                let overrides: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
                let serde_json::Value::Object(overrides) = overrides else {
                    anyhow::bail!(lfvg::Error::invalid(format!("config {} must be a JSON object", path.display())));
                };
                let mut merged = serde_json::to_value(&base)?;
                let fields = merged.as_object_mut().expect("config serializes to an object");
                for (k, v) in overrides {
                    if !fields.contains_key(&k) {
                        anyhow::bail!(lfvg::Error::invalid(format!("unknown config key {k:?} in {}", path.display())));
                    }
                    fields.insert(k, v);
                }
                serde_json::from_value(merged).map_err(|e| lfvg::Error::invalid(format!("config {}: {e}", path.display())))?
            }
            None => base,
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if let Some(m) = self.mode {
            cfg.mode = match m {
                ModeArg::LanguageFree => TrainMode::LanguageFree,
                ModeArg::UpperBound => TrainMode::UpperBound,
            };
        }
        if let Some(s) = self.selection {
            cfg.selection = match s {
                SelectionArg::Transformer => SelectionStrategy::Transformer,
                SelectionArg::Random => SelectionStrategy::Random,
            };
        }
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {$(if let Some(v) = self.$flag { cfg.$field = v; })*};
        }
        set!(epochs => epochs, batch_size => batch_size, hidden => hidden, lr => learning_rate, lambda => lambda,
             n_frames => n_frames, k => k, xi => xi, t_max => t_max);
        if self.grad_clip.is_some() {
            cfg.grad_clip = self.grad_clip;
        }
        if self.no_reg_loss {
            cfg.use_reg_loss = false;
        }
        if self.no_att_loss {
            cfg.use_att_loss = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn resolve(command: Command) -> Result<Invocation> {
    Ok(match command {
        Command::Synth(a) => Invocation::Synth(SynthRun {
            out: absolute(&a.out)?,
            alignment: AlignmentConfig {
                latent_dim: a.latent_dim,
                video_dim: a.dim,
                query_dim: a.dim,
                align_noise_sigma: a.align_noise,
                obs_noise_sigma: a.obs_noise,
                clutter_fraction: a.clutter,
                seed: resolve_seed(a.seed)?,
                ..AlignmentConfig::default()
            },
            shape: SynthShape {
                n_videos: a.videos,
                segments_per_video: a.segments,
                events_per_video: a.events,
                frames_per_segment: a.frames_per_segment,
                min_event_len: a.min_event_len,
            },
        }),
        Command::ImportCheck { data } => Invocation::ImportCheck(ImportCheckRun { data: absolute(&data)? }),
        Command::Proposals(a) => Invocation::Proposals(ProposalsRun {
            data: absolute(&a.data)?,
            video: a.video,
            k: a.k,
            policy: MergePolicy { max_merge: a.max_merge, min_len: a.min_len },
            seed: resolve_seed(a.seed)?,
            out: a.out.as_deref().map(absolute).transpose()?,
        }),
        Command::Train(a) => {
            let seed = resolve_seed(a.seed)?;
            Invocation::Train(TrainRun {
                data: absolute(&a.data)?,
                out: absolute(&a.out)?,
                config: a.cfg.resolve("desk", Some(seed))?,
                parallelism: parallelism(a.cfg.sequential),
            })
        }
        Command::Infer(a) => {
            let query = match (a.query, a.query_blob, a.row) {
                (Some(id), None, _) => QuerySource::Store { id },
                (None, Some(path), Some(row)) => QuerySource::Blob { path: absolute(&path)?, row },
                _ => anyhow::bail!(lfvg::Error::invalid("give --query ID or --query-blob PATH --row N")),
            };
            Invocation::Infer(InferRun {
                checkpoint: absolute(&a.checkpoint)?,
                data: absolute(&a.data)?,
                video: a.video,
                query,
                out: a.out.as_deref().map(absolute).transpose()?,
            })
        }
        Command::Eval(a) => Invocation::Eval(EvalRun {
            checkpoint: if a.oracle { None } else { a.checkpoint.as_deref().map(absolute).transpose()? },
            data: absolute(&a.data)?,
            out: a.out.as_deref().map(absolute).transpose()?,
            parallelism: parallelism(a.sequential),
        }),
        Command::Ablate(a) => {
            let mut bench = Benchmark::default();
            if let Some(n) = a.videos {
                bench.shape.n_videos = n;
            }
            if let Some(n) = a.test_videos {
                bench.n_test = n;
            }
            if let Some(s) = env_seed()? {
                bench.alignment.seed = s;
            }
            Invocation::Ablate(AblateRun {
                suite: a.suite,
                bench,
                base: a.cfg.resolve("bench", None)?,
                seeds: a.seeds,
                assert_orderings: a.assert_orderings,
                out: a.out.as_deref().map(absolute).transpose()?,
                parallelism: parallelism(a.cfg.sequential),
            })
        }
        Command::Replay { .. } => unreachable!("replay is handled before resolution"),
    })
}

/// Runs an invocation and records its manifest; returns the exit code.
fn run(inv: Invocation) -> Result<u8> {
    let start = Instant::now();
    let outcome = inv.execute()?;
    if let Some(path) = &outcome.manifest {
        let m = RunManifest {
            command: inv.name().into(),
            seed: inv.seed(),
            invocation: inv,
            build: build_id(),
            inputs: outcome.inputs.clone(),
            outputs: hash_outputs(&outcome.outputs)?,
            duration_s: start.elapsed().as_secs_f64(),
        };
        m.write(path)?;
        eprintln!("manifest: {}", path.display());
    }
    Ok(outcome.exit_code as u8)
}

fn replay(path: &Path) -> Result<u8> {
    let recorded = RunManifest::read(path)?;
    let outcome = recorded.invocation.execute()?;
    let now = hash_outputs(&outcome.outputs)?;
    let mut mismatches = 0;
    for old in &recorded.outputs {
        match now.iter().find(|n| n.path == old.path) {
            Some(n) if n.sha256 == old.sha256 => {}
            Some(_) => {
                mismatches += 1;
                eprintln!("differs: {}", old.path.display());
            }
            None => {
                mismatches += 1;
                eprintln!("missing: {}", old.path.display());
            }
        }
    }
    if now.len() != recorded.outputs.len() {
        mismatches += 1;
        eprintln!("replay produced {} outputs, the manifest lists {}", now.len(), recorded.outputs.len());
    }
    if mismatches > 0 {
        eprintln!("replay of {} is not bit-identical", recorded.command);
        return Ok(1);
    }
    println!("replay of {}: {} outputs bit-identical", recorded.command, now.len());
    Ok(outcome.exit_code as u8)
}

fn exit_code_for(err: &anyhow::Error) -> u8 {
    let numeric = err.chain().any(|e| e.downcast_ref::<lfvg::Error>().is_some_and(|e| e.is_numeric()));
    if numeric {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Replay { manifest } => replay(&manifest),
        other => resolve(other).and_then(run),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_failures_map_to_exit_three() {
        let e = anyhow::Error::from(lfvg::Error::NonFiniteLoss { step: 7 }).context("training");
        assert_eq!(exit_code_for(&e), 3);
        assert!(format!("{e:#}").contains("step 7"));
        assert_eq!(exit_code_for(&anyhow::Error::from(lfvg::Error::invalid("bad"))), 2);
        assert_eq!(exit_code_for(&anyhow::anyhow!("io")), 2);
    }

    #[test]
    fn config_file_keys_override_the_preset_and_flags_win() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"epochs": 3, "hidden": 16}"#).unwrap();
        let cli = Cli::parse_from(["lfvg", "train", "--data", "d", "--out", "o", "--config", path.to_str().unwrap(), "--hidden", "8"]);
        let Command::Train(a) = cli.command else { panic!() };
        let cfg = a.cfg.resolve("desk", Some(4)).unwrap();
        assert_eq!((cfg.epochs, cfg.hidden, cfg.seed, cfg.batch_size), (3, 8, 4, TrainConfig::desk().batch_size));

        std::fs::write(&path, r#"{"epochs": 3, "bogus": 1}"#).unwrap();
        assert!(a.cfg.resolve("desk", None).is_err());
    }
}
