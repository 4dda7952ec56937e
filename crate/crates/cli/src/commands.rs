//! Resolved invocations and their execution. Everything a command needs is
//! materialized here, so a manifest alone can rerun it.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use lfvg::embedding::{generate_synthetic_dataset, AlignmentConfig, Dataset, SynthShape, TemporalInterval, VideoRecord};
use lfvg::evaluation::{evaluate_with, AblationSuite, Ablator, Benchmark, IntervalPredictor};
use lfvg::proposal::{events_from_labels, kmeans_cluster, merge_consecutive, similarity_matrix, MergePolicy, TemporalProposal};
use lfvg::store::{export_feature_store, import_feature_store, load_checkpoint, read_blob, read_manifest, save_checkpoint, MANIFEST_FILE};
use lfvg::training::{train_with, write_loss_csv, TrainConfig};
use lfvg::{Error, Parallelism};

use crate::manifest::write_atomic;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Invocation {
    Synth(SynthRun),
    ImportCheck(ImportCheckRun),
    Proposals(ProposalsRun),
    Train(TrainRun),
    Infer(InferRun),
    Eval(EvalRun),
    Ablate(AblateRun),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthRun {
    pub out: PathBuf,
    pub alignment: AlignmentConfig,
    pub shape: SynthShape,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportCheckRun {
    pub data: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalsRun {
    pub data: PathBuf,
    pub video: Option<String>,
    pub k: usize,
    pub policy: MergePolicy,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub data: PathBuf,
    pub out: PathBuf,
    pub config: TrainConfig,
    pub parallelism: Parallelism,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuerySource {
    /// A query record of the store, by id.
    Store { id: String },
    /// Row `row` of a standalone LFVG blob.
    Blob { path: PathBuf, row: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferRun {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub video: String,
    pub query: QuerySource,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    /// `None` evaluates the ground-truth oracle.
    pub checkpoint: Option<PathBuf>,
    pub data: PathBuf,
    pub out: Option<PathBuf>,
    pub parallelism: Parallelism,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblateRun {
    pub suite: AblationSuite,
    pub bench: Benchmark,
    pub base: TrainConfig,
    pub seeds: Vec<u64>,
    pub assert_orderings: bool,
    pub out: Option<PathBuf>,
    pub parallelism: Parallelism,
}

/// What a run produced; `exit_code` is nonzero only for soft failures such
/// as a violated ordering.
#[derive(Debug, Default)]
pub struct Outcome {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub exit_code: i32,
}

impl Invocation {
    pub fn name(&self) -> &'static str {
        match self {
            Invocation::Synth(_) => "synth",
            Invocation::ImportCheck(_) => "import-check",
            Invocation::Proposals(_) => "proposals",
            Invocation::Train(_) => "train",
            Invocation::Infer(_) => "infer",
            Invocation::Eval(_) => "eval",
            Invocation::Ablate(_) => "ablate",
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Invocation::Synth(r) => Some(r.alignment.seed),
            Invocation::Proposals(r) => Some(r.seed),
            Invocation::Train(r) => Some(r.config.seed),
            Invocation::Ablate(r) => r.seeds.first().copied(),
            _ => None,
        }
    }

    pub fn execute(&self) -> Result<Outcome> {
        match self {
            Invocation::Synth(r) => synth(r),
            Invocation::ImportCheck(r) => import_check(r),
            Invocation::Proposals(r) => proposals(r),
            Invocation::Train(r) => train(r),
            Invocation::Infer(r) => infer(r),
            Invocation::Eval(r) => eval(r),
            Invocation::Ablate(r) => ablate(r),
        }
    }
}

fn sibling_manifest(file: &Path) -> PathBuf {
    let mut s = file.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn dir_manifest(dir: &Path) -> PathBuf {
    dir.join("run_manifest.json")
}

fn load_store(path: &Path) -> Result<Dataset> {
    import_feature_store(path).with_context(|| format!("loading feature store {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_atomic(path, &serde_json::to_vec_pretty(value)?)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn synth(r: &SynthRun) -> Result<Outcome> {
    let data = generate_synthetic_dataset(&r.alignment, &r.shape)?;
    ensure_dir(&r.out)?;
    export_feature_store(&data, &r.out)?;
    let m = read_manifest(&r.out)?;
    let mut outputs = vec![r.out.join(MANIFEST_FILE)];
    for v in &m.videos {
        outputs.push(r.out.join(&v.segment_blob));
        outputs.push(r.out.join(&v.frame_blob));
    }
    if let Some(q) = m.queries.first() {
        outputs.push(r.out.join(&q.feature_blob));
    }
    println!("wrote {} videos and {} queries to {}", data.videos.len(), data.queries.len(), r.out.display());
    Ok(Outcome { outputs, manifest: Some(dir_manifest(&r.out)), ..Outcome::default() })
}

fn import_check(r: &ImportCheckRun) -> Result<Outcome> {
    let data = load_store(&r.data)?;
    let events = data.videos.iter().filter(|v| v.hidden_events.is_some()).count();
    println!(
        "ok: {} videos (feature dims {} / {}), {} queries, {} videos with events",
        data.videos.len(),
        data.video_dim().unwrap_or(0),
        data.query_dim().unwrap_or(0),
        data.queries.len(),
        events
    );
    Ok(Outcome { inputs: vec![r.data.clone()], ..Outcome::default() })
}

#[derive(Serialize)]
struct VideoProposals {
    video_id: String,
    similarity: Vec<Vec<f64>>,
    labels: Vec<usize>,
    inertia: f64,
    proposals: Vec<TemporalProposal>,
}

fn video_proposals(v: &VideoRecord, r: &ProposalsRun) -> Result<VideoProposals> {
    let t = v.num_segments();
    let sim = similarity_matrix(&v.segment_features)?;
    let km = kmeans_cluster(&v.segment_features, r.k, r.seed).with_context(|| format!("clustering video {}", v.id))?;
    let mut proposals = merge_consecutive(&events_from_labels(&km.labels), r.policy, t);
    if proposals.is_empty() {
        proposals.push(TemporalProposal::new(0, t - 1, t, 1));
    }
    Ok(VideoProposals {
        video_id: v.id.clone(),
        similarity: sim.as_tensor().iter_rows().map(|row| row.to_vec()).collect(),
        labels: km.labels,
        inertia: km.inertia,
        proposals,
    })
}

fn proposals(r: &ProposalsRun) -> Result<Outcome> {
    let data = load_store(&r.data)?;
    let videos: Vec<&VideoRecord> = match &r.video {
        Some(id) => vec![data.videos.iter().find(|v| &v.id == id).ok_or_else(|| Error::invalid(format!("no video {id} in the store")))?],
        None => data.videos.iter().collect(),
    };
    let all = videos.into_iter().map(|v| video_proposals(v, r)).collect::<Result<Vec<_>>>()?;
    let mut outcome = Outcome { inputs: vec![r.data.clone()], ..Outcome::default() };
    match &r.out {
        Some(path) => {
            write_json(path, &all)?;
            let n: usize = all.iter().map(|v| v.proposals.len()).sum();
            println!("wrote {n} proposals for {} videos to {}", all.len(), path.display());
            outcome.outputs.push(path.clone());
            outcome.manifest = Some(sibling_manifest(path));
        }
        None => println!("{}", serde_json::to_string_pretty(&all)?),
    }
    Ok(outcome)
}

pub const LOSS_CSV: &str = "loss.csv";

fn train(r: &TrainRun) -> Result<Outcome> {
    let data = load_store(&r.data)?;
    let view = data.training_view();
    let out = train_with(&view, &r.config, r.parallelism)?;
    ensure_dir(&r.out)?;
    save_checkpoint(&r.out, &out.model, &r.config)?;
    let csv = r.out.join(LOSS_CSV);
    write_loss_csv(&csv, &out.curve)?;
    let mut outputs: Vec<PathBuf> = fs::read_dir(&r.out)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "lfvg" || e == "csv") || p.file_name().is_some_and(|n| n == "header.json"))
        .collect();
    outputs.sort();
    let last = out.epoch_means.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained {} steps over {} epochs (final epoch mean loss {last:.5}, {} pairs skipped); checkpoint in {}",
        out.curve.len(),
        r.config.epochs,
        out.skipped_pairs,
        r.out.display()
    );
    Ok(Outcome { inputs: vec![r.data.clone()], outputs, manifest: Some(dir_manifest(&r.out)), exit_code: 0 })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct InferResult {
    pub video_id: String,
    pub t_s: f64,
    pub t_e: f64,
    pub t_s_seconds: f64,
    pub t_e_seconds: f64,
    pub attention: Vec<f64>,
}

fn query_feature(r: &InferRun, data: &Dataset) -> Result<Vec<f64>> {
    let raw = match &r.query {
        QuerySource::Store { id } => {
            data.queries.iter().find(|q| &q.id == id).ok_or_else(|| Error::invalid(format!("no query {id} in the store")))?.feature.clone()
        }
        QuerySource::Blob { path, row } => {
            let blob = read_blob(path, &format!("query blob {}", path.display()))?;
            if *row >= blob.rows() {
                return Err(Error::invalid(format!("query row {row} outside a {}-row blob", blob.rows())).into());
            }
            blob.row(*row).to_vec()
        }
    };
    let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return Err(Error::invalid("query feature is zero").into());
    }
    Ok(raw.into_iter().map(|x| x / n).collect())
}

fn infer(r: &InferRun) -> Result<Outcome> {
    let data = load_store(&r.data)?;
    let (model, _) = load_checkpoint(&r.checkpoint)?;
    let video = data.videos.iter().find(|v| v.id == r.video).ok_or_else(|| Error::invalid(format!("no video {} in the store", r.video)))?;
    let q = query_feature(r, &data)?;
    let o = model.grounding.forward(&model.grounding_params, &video.segment_features, &q)?;
    let result = InferResult {
        video_id: video.id.clone(),
        t_s: o.prediction.start,
        t_e: o.prediction.end,
        t_s_seconds: o.prediction.start * video.duration_s,
        t_e_seconds: o.prediction.end * video.duration_s,
        attention: o.attention,
    };
    println!("{}", serde_json::to_string_pretty(&result)?);
    let mut outcome = Outcome { inputs: vec![r.checkpoint.clone(), r.data.clone()], ..Outcome::default() };
    if let QuerySource::Blob { path, .. } = &r.query {
        outcome.inputs.push(path.clone());
    }
    if let Some(path) = &r.out {
        write_json(path, &result)?;
        outcome.outputs.push(path.clone());
        outcome.manifest = Some(sibling_manifest(path));
    }
    Ok(outcome)
}

/// Predicts each query's own annotated interval.
struct GroundTruthOracle<'a>(&'a Dataset);

impl IntervalPredictor for GroundTruthOracle<'_> {
    fn predict(&self, video: &VideoRecord, query: &[f64]) -> lfvg::Result<TemporalInterval> {
        self.0
            .queries
            .iter()
            .find(|q| q.video_id == video.id && q.feature == query)
            .map(|q| q.gt_interval)
            .ok_or_else(|| Error::Evaluation(format!("oracle has no query for video {}", video.id)))
    }
}

fn eval(r: &EvalRun) -> Result<Outcome> {
    let data = load_store(&r.data)?;
    if data.queries.is_empty() {
        bail!(Error::invalid(format!("store {} has no queries to evaluate", r.data.display())));
    }
    let mut outcome = Outcome { inputs: vec![r.data.clone()], ..Outcome::default() };
    let result = match &r.checkpoint {
        Some(c) => {
            outcome.inputs.push(c.clone());
            let (model, _) = load_checkpoint(c)?;
            evaluate_with(&model, &data, r.parallelism)?
        }
        None => evaluate_with(&GroundTruthOracle(&data), &data, r.parallelism)?,
    };
    print!("{}", result.table());
    match &r.out {
        Some(path) => {
            write_json(path, &result)?;
            outcome.outputs.push(path.clone());
            outcome.manifest = Some(sibling_manifest(path));
        }
        None => println!("{}", serde_json::to_string_pretty(&result)?),
    }
    Ok(outcome)
}

fn ablate(r: &AblateRun) -> Result<Outcome> {
    let mut ablator = Ablator::new(r.bench.clone(), r.parallelism);
    let report = ablator.run_suite(r.suite, &r.base, &r.seeds)?;
    print!("{}", report.table());
    println!("{} models trained", ablator.trainings());
    if !report.configs_consistent {
        return Err(anyhow!("variants differ from the base config beyond the varied field"));
    }
    let mut outcome = Outcome::default();
    if let Some(dir) = &r.out {
        ensure_dir(dir)?;
        let (json, txt, csv) = (dir.join("report.json"), dir.join("report.txt"), dir.join("report.csv"));
        write_json(&json, &report)?;
        write_atomic(&txt, report.table().as_bytes())?;
        write_atomic(&csv, report.csv().as_bytes())?;
        outcome.outputs = vec![json, txt, csv];
        outcome.manifest = Some(dir_manifest(dir));
    }
    if r.assert_orderings && !report.all_orderings_hold() {
        eprintln!("error: expected orderings failed");
        outcome.exit_code = 1;
    }
    Ok(outcome)
}
