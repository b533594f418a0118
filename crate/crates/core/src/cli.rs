//! The `czsl` command line: dataset preparation, training, calibration,
//! evaluation, oracle baselines and score export.
//!
//! Exit codes: 0 success, 2 usage error, 3 input error, 4 numerical
//! divergence, 5 a run that needs `--oracle` was attempted without it.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::components::{
    Component, ContextModel, Dims, ModelConfig, ScorerSet, Selection, VisualScoring, VisualSlot,
};
use crate::datamodel::{
    ingest_scenes, make_instances, split_domains, split_images, DataDir, FeatureBank, OracleAccess, Part,
    RetrievalDomain, SceneDataset, SplitFile, DEFAULT_MIN_COUNT,
};
use crate::diffprims::{Activation, Checkpoint};
use crate::embeddings::{ClassEmbeddings, EmbeddingTable};
use crate::error::Error;
use crate::inference::{
    calibrate, export_component_scores, write_score_csv, AlphaGrid, CalibrationResult, CalibrationWeights,
    EvaluationSet,
};
use crate::metrics::{per_class_fr, Quartiles};
use crate::oracles::{
    bayes_triples, build_image_cooc, build_text_cooc, true_prior_triples, CooccurrenceTable, DEFAULT_SMOOTHING,
    DEFAULT_TEXT_WINDOW,
};
use crate::synthgen::{choose_ambiguity_pairs, generate, WorldSpec};
use crate::training::{loss_csv, parse_config_text, train, TrainConfig};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INPUT: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;
pub const EXIT_ORACLE: i32 = 5;

pub const REPORT_SCHEMA: &str = "czr-1";
pub const MODEL_FILE: &str = "model.czpm";
pub const MODEL_CONFIG_FILE: &str = "model.json";
pub const LOSS_FILE: &str = "losses.csv";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Lib(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Lib(Error::Divergence { .. }) => EXIT_DIVERGENCE,
            CliError::Lib(Error::OracleRequired(_)) => EXIT_ORACLE,
            CliError::Lib(_) => EXIT_INPUT,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Debug, Parser)]
#[command(name = "czsl", version, about = "Context-aware zero-shot classification of image regions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world into a data directory.
    GenSynth(GenSynthArgs),
    /// Filter a scene file and write a data directory (without splits).
    Ingest(IngestArgs),
    /// Draw the source/target domains and the image splits.
    Split(SplitArgs),
    /// Train model components.
    Train(TrainArgs),
    /// Tune the combination exponents on the validation split.
    Calibrate(CalibrateArgs),
    /// Rank test instances and write a report.
    Eval(EvalArgs),
    /// Evaluate a count-based oracle.
    OracleEval(OracleEvalArgs),
    /// Export per-component scores of positive and negative classes.
    ExportScores(ExportArgs),
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub classes: usize,
    #[arg(long, default_value_t = 2000)]
    pub scenes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1.1)]
    pub zipf: f64,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 24)]
    pub visual_dim: usize,
    #[arg(long, default_value_t = 5)]
    pub themes: usize,
    #[arg(long, default_value_t = 20.0)]
    pub concentration: f64,
    #[arg(long, default_value_t = 0.3)]
    pub visual_noise: f64,
    #[arg(long, default_value_t = 0.1)]
    pub embedding_noise: f64,
    #[arg(long, default_value_t = 4.0)]
    pub objects_mean: f64,
    #[arg(long, default_value_t = 8)]
    pub max_objects: usize,
    #[arg(long, default_value_t = 1.0)]
    pub theme_weight: f64,
    #[arg(long, default_value_t = 1.0)]
    pub frequency_signal: f64,
    #[arg(long, default_value_t = 0.5)]
    pub p_sup: f64,
    /// Number of visually indistinguishable target-domain class pairs.
    #[arg(long, default_value_t = 0)]
    pub ambiguous_pairs: usize,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub scenes: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Binary feature bank for objects given by `feature_ref`.
    #[arg(long, requires = "feature_index")]
    pub feature_bank: Option<PathBuf>,
    #[arg(long, requires = "feature_bank")]
    pub feature_index: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MIN_COUNT)]
    pub min_count: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    pub p_sup: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train/val/test fractions.
    #[arg(long, default_value = "0.7,0.1,0.2")]
    pub ratios: String,
    /// Comma-separated labels forced into the source domain.
    #[arg(long, default_value = "")]
    pub forced_source: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Output model directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated subset of prior, visual, context, joint.
    #[arg(long)]
    pub components: String,
    /// sh, sl, tl, their `+` unions, th-union (oracle) or i.
    #[arg(long)]
    pub context_model: Option<String>,
    /// Uniform negatives for the visual objectives and no prior at inference.
    #[arg(long)]
    pub devise: bool,
    /// Allow models that read target-domain labels.
    #[arg(long)]
    pub oracle: bool,
    /// Start from an existing model directory.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// `key = value` configuration file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub l2_weight: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub hidden: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Comma-separated subset of context, visual, joint, prior.
    #[arg(long)]
    pub select: Option<String>,
    #[arg(long, default_value = "target")]
    pub mode: String,
    /// Comma-separated exponent values tried for every active component.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub oracle: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, conflicts_with = "alpha")]
    pub calibration: Option<PathBuf>,
    /// Exponents `alpha_c,alpha_v,alpha_p` when no calibration file is given.
    #[arg(long)]
    pub alpha: Option<String>,
    #[arg(long)]
    pub select: Option<String>,
    #[arg(long, default_value = "target")]
    pub mode: String,
    #[arg(long, default_value = "1,5,10")]
    pub ks: String,
    #[arg(long)]
    pub oracle: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct OracleEvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// true-prior, visual-bayes or textual-bayes.
    #[arg(long)]
    pub oracle: String,
    /// Trained model whose visual component joins the Bayes oracles.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Whitespace-tokenized text for textual-bayes.
    #[arg(long)]
    pub tokens: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TEXT_WINDOW)]
    pub window: usize,
    #[arg(long, default_value_t = DEFAULT_SMOOTHING)]
    pub smoothing: f64,
    #[arg(long, default_value = "target")]
    pub mode: String,
    #[arg(long, default_value = "1,5,10")]
    pub ks: String,
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "target")]
    pub mode: String,
    #[arg(long, default_value = "test")]
    pub part: String,
    /// Instances exported (first N of the split).
    #[arg(long, default_value_t = 500)]
    pub limit: usize,
    #[arg(long, default_value_t = 1)]
    pub negatives: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub oracle: bool,
    #[arg(long)]
    pub out: PathBuf,
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Provenance of one command run, written next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub elapsed_ms: u128,
}

pub fn sha256_file(path: &Path) -> crate::Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

struct Run {
    command: &'static str,
    args: Vec<String>,
    start: Instant,
    inputs: Vec<PathBuf>,
}

impl Run {
    fn input(&mut self, p: &Path) {
        self.inputs.push(p.to_path_buf());
    }

    fn finish(
        self,
        manifest_path: &Path,
        config: serde_json::Value,
        seed: Option<u64>,
        outputs: &[PathBuf],
    ) -> CliResult<RunManifest> {
        let digest = |ps: &[PathBuf]| -> crate::Result<Vec<FileDigest>> {
            ps.iter()
                .map(|p| {
                    Ok(FileDigest {
                        path: p.display().to_string(),
                        sha256: sha256_file(p)?,
                    })
                })
                .collect()
        };
        let manifest = RunManifest {
            command: self.command.to_string(),
            args: self.args,
            config,
            seed,
            inputs: digest(&self.inputs)?,
            outputs: digest(outputs)?,
            elapsed_ms: self.start.elapsed().as_millis(),
        };
        write_json(manifest_path, &manifest)?;
        Ok(manifest)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> crate::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> crate::Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn create_dir(p: &Path) -> crate::Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn sibling_manifest(file: &Path) -> PathBuf {
    let mut name = file.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    file.with_file_name(name)
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassReport {
    pub label: String,
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Evaluation report, schema `czr-1`. Holds no paths or timings, so equal
/// inputs give byte-identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub schema: String,
    pub model: String,
    pub mode: RetrievalDomain,
    pub oracle: bool,
    pub n: usize,
    pub count: usize,
    /// Mean First Relevant in percent, two decimals.
    pub mfr: f64,
    pub recall_at: BTreeMap<String, f64>,
    pub mrr: f64,
    pub calibration: CalibrationWeights,
    pub quartile_rule: String,
    pub per_class: Vec<ClassReport>,
}

impl Report {
    pub fn validate(&self) -> crate::Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("report: {m}")));
        if self.schema != REPORT_SCHEMA {
            return bad("unknown schema");
        }
        if self.n < 2 || self.count == 0 {
            return bad("needs n >= 2 and at least one instance");
        }
        if !(0.0..=200.0).contains(&self.mfr) || !(0.0..=1.0).contains(&self.mrr) {
            return bad("mfr or mrr out of range");
        }
        if self.recall_at.values().any(|r| !(0.0..=1.0).contains(r)) {
            return bad("recall out of range");
        }
        if self.per_class.iter().map(|c| c.count).sum::<usize>() != self.count {
            return bad("per-class counts do not sum to count");
        }
        Ok(())
    }

    pub fn load(path: &Path) -> crate::Result<Self> {
        let r: Report = read_json(path)?;
        r.validate()?;
        Ok(r)
    }
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn build_report(
    set: &EvaluationSet,
    weights: CalibrationWeights,
    ks: &[usize],
    mode: RetrievalDomain,
    model: String,
    oracle: bool,
    dataset: &SceneDataset,
) -> crate::Result<Report> {
    let ranks = set.ranks(&weights)?;
    let summary = crate::metrics::aggregate(&ranks, set.n(), ks)?;
    let per_class = per_class_fr(&set.truth, &ranks, set.n())?
        .into_iter()
        .map(|c| {
            let Quartiles { min, q1, median, q3, max } = c.fr;
            ClassReport {
                label: dataset.vocab().label(c.class).to_string(),
                count: c.count,
                min,
                q1,
                median,
                q3,
                max,
            }
        })
        .collect();
    Ok(Report {
        schema: REPORT_SCHEMA.into(),
        model,
        mode,
        oracle,
        n: summary.n,
        count: summary.count,
        mfr: round2(summary.mfr),
        recall_at: summary.recall_at.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        mrr: summary.mrr,
        calibration: weights,
        quartile_rule: crate::metrics::QUARTILE_RULE.into(),
        per_class,
    })
}

// ---------------------------------------------------------------------------
// Helpers

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> CliResult<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|_| usage(format!("bad {what} `{p}`"))))
        .collect()
}

fn parse_mode(s: &str) -> CliResult<RetrievalDomain> {
    s.parse().map_err(|e: Error| usage(e.to_string()))
}

fn parse_part(s: &str) -> CliResult<Part> {
    match s {
        "train" => Ok(Part::Train),
        "val" => Ok(Part::Val),
        "test" => Ok(Part::Test),
        other => Err(usage(format!("unknown split `{other}`"))),
    }
}

fn parse_grid(s: Option<&str>) -> CliResult<AlphaGrid> {
    match s {
        None => Ok(AlphaGrid::default()),
        Some(s) => Ok(AlphaGrid::uniform(&parse_list::<f64>(s, "grid value")?)),
    }
}

fn parse_ks(s: &str) -> CliResult<Vec<usize>> {
    let ks: Vec<usize> = parse_list(s, "k")?;
    if ks.contains(&0) {
        return Err(usage("k must be positive"));
    }
    Ok(ks)
}

pub fn selection_name(s: Selection) -> String {
    let mut parts = Vec::new();
    if s.context {
        parts.push("context");
    }
    match s.visual {
        VisualSlot::Visual => parts.push("visual"),
        VisualSlot::Joint => parts.push("joint"),
        VisualSlot::None => {}
    }
    if s.prior {
        parts.push("prior");
    }
    parts.join(",")
}

/// Data directory with the target labels locked unless `oracle` is set.
fn load_data(run: &mut Run, dir: &Path, oracle: bool) -> CliResult<(SceneDataset, EmbeddingTable, ClassEmbeddings)> {
    let dd = DataDir::new(dir);
    run.input(&dd.scenes());
    run.input(&dd.embeddings());
    run.input(&dd.splits());
    let (ds, table) = dd.load()?;
    if !oracle {
        ds.poison_target_labels();
    }
    let emb = table.align(ds.vocab())?;
    Ok((ds, table, emb))
}

fn load_model(run: &mut Run, dir: &Path, oracle: bool) -> CliResult<ScorerSet> {
    let cfg_path = dir.join(MODEL_CONFIG_FILE);
    let ck_path = dir.join(MODEL_FILE);
    run.input(&cfg_path);
    run.input(&ck_path);
    let config: ModelConfig = read_json(&cfg_path)?;
    if config.oracle && !oracle {
        return Err(Error::OracleRequired(format!(
            "model context `{}` reads target-domain labels; pass --oracle",
            config.context_model
        ))
        .into());
    }
    let ck = Checkpoint::load(&ck_path)?;
    Ok(ScorerSet::from_checkpoint(config, &ck)?)
}

/// Selection used when none is given: the trained components, fused
/// baseline preferred for the visual slot; DeViSE models drop the prior.
fn default_selection(config: &ModelConfig) -> CliResult<Selection> {
    let t = &config.trained;
    let sel = Selection {
        context: t.contains(&Component::Context),
        visual: if t.contains(&Component::Joint) {
            VisualSlot::Joint
        } else if t.contains(&Component::Visual) {
            VisualSlot::Visual
        } else {
            VisualSlot::None
        },
        prior: t.contains(&Component::Prior) && !config.devise,
    };
    if !sel.context && !sel.prior && sel.visual == VisualSlot::None {
        return Err(usage("model has no trained component to evaluate"));
    }
    Ok(sel)
}

fn resolve_selection(config: &ModelConfig, select: Option<&str>) -> CliResult<Selection> {
    let mut sel = match select {
        Some(s) => s.parse().map_err(|e: Error| usage(e.to_string()))?,
        None => default_selection(config)?,
    };
    if config.devise {
        sel.prior = false;
    }
    let need = |on: bool, c: Component| -> CliResult<()> {
        if on && !config.trained.contains(&c) {
            return Err(usage(format!("component `{}` is not trained in this model", c.name())));
        }
        Ok(())
    };
    need(sel.context, Component::Context)?;
    need(sel.prior, Component::Prior)?;
    need(sel.visual == VisualSlot::Visual, Component::Visual)?;
    need(sel.visual == VisualSlot::Joint, Component::Joint)?;
    Ok(sel)
}

fn model_name(config: &ModelConfig, sel: Selection) -> String {
    let mut name = format!("{} [context model {}]", selection_name(sel), config.context_model);
    if config.devise {
        name.push_str(" devise");
    }
    name
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub selection: String,
    pub mode: RetrievalDomain,
    pub grid: AlphaGrid,
    pub result: CalibrationResult,
}

// ---------------------------------------------------------------------------
// Commands

fn cmd_gen_synth(run: Run, a: &GenSynthArgs) -> CliResult<()> {
    let mut spec = WorldSpec {
        n_classes: a.classes,
        zipf_exponent: a.zipf,
        d: a.dim,
        d_visual: a.visual_dim,
        n_themes: a.themes,
        theme_concentration: a.concentration,
        visual_noise_sigma: a.visual_noise,
        embedding_noise_sigma: a.embedding_noise,
        objects_per_scene_mean: a.objects_mean,
        max_objects_per_scene: a.max_objects,
        n_scenes: a.scenes,
        seed: a.seed,
        theme_weight: a.theme_weight,
        frequency_signal: a.frequency_signal,
        p_sup: a.p_sup,
        ambiguity_pairs: Vec::new(),
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    if a.ambiguous_pairs > 0 {
        spec.ambiguity_pairs = choose_ambiguity_pairs(&spec, a.ambiguous_pairs)?;
        if spec.ambiguity_pairs.len() < a.ambiguous_pairs {
            return Err(usage(format!(
                "only {} ambiguous pairs fit in the target domain",
                spec.ambiguity_pairs.len()
            )));
        }
    }
    let world = generate(&spec)?;
    let dd = DataDir::new(&a.out);
    dd.save(&world.dataset, &world.embeddings)?;
    world.truth.save(&dd.world_truth())?;
    let vocab = world.dataset.vocab();
    let n_objects: usize = world.dataset.scenes().iter().map(|s| s.objects.len()).sum();
    println!(
        "world: {} classes ({} source, {} target), {} scenes, {} objects, {} ambiguous pairs",
        vocab.len(),
        vocab.source_classes().len(),
        vocab.target_classes().len(),
        world.dataset.scenes().len(),
        n_objects,
        spec.ambiguity_pairs.len()
    );
    let outputs = [dd.scenes(), dd.embeddings(), dd.splits(), dd.world_truth()];
    let seed = spec.seed;
    run.finish(
        &a.out.join("gen-synth.manifest.json"),
        serde_json::to_value(&spec).map_err(Error::from)?,
        Some(seed),
        &outputs,
    )?;
    Ok(())
}

fn cmd_ingest(mut run: Run, a: &IngestArgs) -> CliResult<()> {
    run.input(&a.scenes);
    run.input(&a.embeddings);
    let table = EmbeddingTable::load(&a.embeddings)?;
    let bank = match (&a.feature_bank, &a.feature_index) {
        (Some(b), Some(i)) => {
            run.input(b);
            run.input(i);
            Some(FeatureBank::load(b, i)?)
        }
        _ => None,
    };
    let ing = ingest_scenes(&a.scenes, bank.as_ref(), Some(&table), a.min_count)?;
    println!(
        "ingested {} scenes, {} classes kept, {} classes dropped, {} scenes dropped",
        ing.scenes.len(),
        ing.vocab.len(),
        ing.dropped_classes.len(),
        ing.dropped_scenes
    );
    let dd = DataDir::new(&a.out);
    create_dir(&a.out)?;
    crate::datamodel::write_scenes(&dd.scenes(), &ing.scenes, &ing.vocab)?;
    let mut kept = EmbeddingTable::new(table.dim());
    for label in ing.vocab.labels() {
        kept.insert(label.clone(), table.get(label).expect("aligned").to_vec())?;
    }
    kept.write(dd.embeddings())?;
    let config = serde_json::json!({ "min_count": a.min_count, "dropped_classes": ing.dropped_classes });
    run.finish(&a.out.join("ingest.manifest.json"), config, None, &[dd.scenes(), dd.embeddings()])?;
    Ok(())
}

fn cmd_split(mut run: Run, a: &SplitArgs) -> CliResult<()> {
    let ratios: Vec<f64> = parse_list(&a.ratios, "ratio")?;
    let [tr, va, te] = ratios[..] else {
        return Err(usage("--ratios takes three values"));
    };
    if !(a.p_sup > 0.0 && a.p_sup <= 1.0) {
        return Err(usage("--p-sup must lie in (0, 1]"));
    }
    let dd = DataDir::new(&a.data);
    run.input(&dd.scenes());
    let ing = ingest_scenes(&dd.scenes(), None, None, 0)?;
    let forced: Vec<String> = a
        .forced_source
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect();
    let vocab = split_domains(&ing.vocab, a.p_sup, a.seed, &forced)?;
    let partition = split_images(ing.scenes.len(), (tr, va, te), a.seed)?;
    let ds = SceneDataset::new(ing.scenes, vocab, ing.d_visual, partition)?;
    SplitFile::from_dataset(&ds).write(&dd.splits())?;
    println!(
        "domains: {} source / {} target; images: {}/{}/{}",
        ds.vocab().source_classes().len(),
        ds.vocab().target_classes().len(),
        ds.partition().train.len(),
        ds.partition().val.len(),
        ds.partition().test.len()
    );
    let config = serde_json::json!({ "p_sup": a.p_sup, "ratios": [tr, va, te], "forced_source": forced });
    run.finish(&a.data.join("split.manifest.json"), config, Some(a.seed), &[dd.splits()])?;
    Ok(())
}

fn cmd_train(mut run: Run, a: &TrainArgs) -> CliResult<()> {
    let components: Vec<Component> = parse_list(&a.components, "component")?;
    if components.is_empty() {
        return Err(usage("--components is empty"));
    }
    let mut tc = TrainConfig::default();
    let mut model_keys: BTreeMap<String, String> = BTreeMap::new();
    if let Some(path) = &a.config {
        run.input(path);
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (k, v) in parse_config_text(&text, path)? {
            if !tc.set(&k, &v).map_err(|e| usage(e.to_string()))? {
                match k.as_str() {
                    "hidden" | "activation" | "context_model" | "visual_scoring" => {
                        model_keys.insert(k, v);
                    }
                    _ => return Err(usage(format!("unknown config key `{k}`"))),
                }
            }
        }
    }
    if let Some(v) = a.epochs {
        tc.epochs = v;
    }
    if let Some(v) = a.lr {
        tc.adam.lr = v;
    }
    if let Some(v) = a.l2_weight {
        tc.l2_weight = v;
    }
    if let Some(v) = a.batch_size {
        tc.batch_size = v;
    }
    if let Some(v) = a.seed {
        tc.seed = v;
    }
    if a.devise {
        tc.devise = true;
    }
    tc.validate().map_err(|e| usage(e.to_string()))?;
    if let Some(h) = a.hidden {
        model_keys.insert("hidden".into(), h.to_string());
    }
    if let Some(m) = &a.context_model {
        model_keys.insert("context_model".into(), m.clone());
    }
    let context_model: Option<ContextModel> = model_keys
        .get("context_model")
        .map(|m| m.parse().map_err(|e: Error| usage(e.to_string())))
        .transpose()?;
    if context_model.is_some_and(|m| m.needs_oracle()) && !a.oracle {
        return Err(Error::OracleRequired("context model th-union needs --oracle".into()).into());
    }

    let (ds, _, emb) = load_data(&mut run, &a.data, a.oracle)?;
    let mut scorers = match &a.init {
        Some(dir) => {
            let s = load_model(&mut run, dir, a.oracle)?;
            if context_model.is_some_and(|m| m != s.config.context_model) {
                return Err(usage("--context-model differs from the --init model"));
            }
            if s.config.dims.d != emb.dim() || s.config.dims.d_visual != ds.d_visual() {
                return Err(Error::dim("model dimensions", emb.dim(), s.config.dims.d).into());
            }
            s
        }
        None => {
            let hidden = match model_keys.get("hidden") {
                Some(h) => h.parse().map_err(|_| usage(format!("bad hidden width `{h}`")))?,
                None => emb.dim(),
            };
            let dims = Dims {
                d: emb.dim(),
                d_visual: ds.d_visual(),
                hidden,
            };
            let mut cfg = ModelConfig::new(dims, context_model.unwrap_or(ContextModel::SH), tc.seed);
            if let Some(act) = model_keys.get("activation") {
                cfg.activation = act.parse::<Activation>().map_err(|e| usage(e.to_string()))?;
            }
            if let Some(vs) = model_keys.get("visual_scoring") {
                cfg.visual_scoring = match vs.as_str() {
                    "cosine" => VisualScoring::Cosine,
                    "dot" => VisualScoring::Dot,
                    other => return Err(usage(format!("unknown visual scoring `{other}`"))),
                };
            }
            cfg.oracle = a.oracle;
            ScorerSet::init(cfg)?
        }
    };
    scorers.config.devise |= tc.devise;
    let report = train(&mut scorers, &components, &ds, &emb, &tc)?;
    create_dir(&a.out)?;
    let ck_path = a.out.join(MODEL_FILE);
    let cfg_path = a.out.join(MODEL_CONFIG_FILE);
    let loss_path = a.out.join(LOSS_FILE);
    scorers.to_checkpoint().save(&ck_path)?;
    write_json(&cfg_path, &scorers.config)?;
    std::fs::write(&loss_path, loss_csv(&report.curves)).map_err(|e| Error::io(&loss_path, e))?;
    for c in &components {
        if let Some(last) = report.curve(*c).last() {
            println!("{}: final loss {last:.6}", c.name());
        }
    }
    let config = serde_json::json!({ "train": tc, "model": scorers.config, "components": a.components });
    run.finish(
        &a.out.join("train.manifest.json"),
        config,
        Some(tc.seed),
        &[ck_path, cfg_path, loss_path],
    )?;
    if let Some((component, epoch)) = report.divergence {
        return Err(Error::Divergence {
            component: component.name().to_string(),
            epoch,
        }
        .into());
    }
    Ok(())
}

fn evaluation_set(
    scorers: &ScorerSet,
    sel: Selection,
    ds: &SceneDataset,
    emb: &ClassEmbeddings,
    part: Part,
    mode: RetrievalDomain,
) -> CliResult<EvaluationSet> {
    let instances = make_instances(ds, part, mode);
    if instances.is_empty() {
        return Err(Error::Empty("no instances in the requested split and mode").into());
    }
    let candidates = mode.candidates(ds.vocab());
    if candidates.len() < 2 {
        return Err(usage(format!("mode {} has fewer than 2 candidate classes", mode.as_str())));
    }
    Ok(EvaluationSet::from_scorers(scorers, sel, &instances, &candidates, emb)?)
}

fn cmd_calibrate(mut run: Run, a: &CalibrateArgs) -> CliResult<()> {
    let mode = parse_mode(&a.mode)?;
    let grid = parse_grid(a.grid.as_deref())?;
    let scorers = load_model(&mut run, &a.model, a.oracle)?;
    let sel = resolve_selection(&scorers.config, a.select.as_deref())?;
    let (ds, _, emb) = load_data(&mut run, &a.data, a.oracle)?;
    let set = evaluation_set(&scorers, sel, &ds, &emb, Part::Val, mode)?;
    let result = calibrate(&set, &grid, sel).map_err(|e| match e {
        Error::InvalidArgument(m) => usage(m),
        other => other.into(),
    })?;
    let w = result.weights;
    println!(
        "alpha = ({}, {}, {}), validation MFR {:.2} over {} grid points",
        w.alpha_c, w.alpha_v, w.alpha_p, result.validation_mfr, result.evaluated
    );
    let file = CalibrationFile {
        selection: selection_name(sel),
        mode,
        grid,
        result,
    };
    write_json(&a.out, &file)?;
    run.finish(
        &sibling_manifest(&a.out),
        serde_json::json!({ "selection": file.selection, "mode": mode }),
        Some(scorers.config.seed),
        std::slice::from_ref(&a.out),
    )?;
    Ok(())
}

fn cmd_eval(mut run: Run, a: &EvalArgs) -> CliResult<()> {
    let mode = parse_mode(&a.mode)?;
    let ks = parse_ks(&a.ks)?;
    let scorers = load_model(&mut run, &a.model, a.oracle)?;
    let (sel, weights) = match (&a.calibration, &a.alpha) {
        (Some(path), _) => {
            run.input(path);
            let file: CalibrationFile = read_json(path)?;
            let sel = resolve_selection(&scorers.config, Some(a.select.as_deref().unwrap_or(&file.selection)))?;
            (sel, file.result.weights)
        }
        (None, Some(alpha)) => {
            let v: Vec<f64> = parse_list(alpha, "alpha")?;
            let [c, vv, p] = v[..] else {
                return Err(usage("--alpha takes three values"));
            };
            if [c, vv, p].iter().any(|x| !(*x >= 0.0)) {
                return Err(usage("exponents must be nonnegative"));
            }
            (resolve_selection(&scorers.config, a.select.as_deref())?, CalibrationWeights::new(c, vv, p))
        }
        (None, None) => return Err(usage("eval needs --calibration or --alpha")),
    };
    let weights = weights.masked(sel);
    let (ds, _, emb) = load_data(&mut run, &a.data, a.oracle)?;
    let set = evaluation_set(&scorers, sel, &ds, &emb, Part::Test, mode)?;
    let report = build_report(
        &set,
        weights,
        &ks,
        mode,
        model_name(&scorers.config, sel),
        scorers.config.oracle,
        &ds,
    )?;
    println!(
        "{} mode {}: MFR {:.2} over {} instances, {} candidates, MRR {:.4}",
        report.model,
        mode.as_str(),
        report.mfr,
        report.count,
        report.n,
        report.mrr
    );
    write_json(&a.out, &report)?;
    run.finish(
        &sibling_manifest(&a.out),
        serde_json::json!({ "selection": selection_name(sel), "mode": mode, "ks": ks }),
        Some(scorers.config.seed),
        std::slice::from_ref(&a.out),
    )?;
    Ok(())
}

fn cmd_oracle_eval(mut run: Run, a: &OracleEvalArgs) -> CliResult<()> {
    let mode = parse_mode(&a.mode)?;
    let ks = parse_ks(&a.ks)?;
    let grid = parse_grid(a.grid.as_deref())?;
    if !(a.smoothing >= 0.0) {
        return Err(usage("--smoothing must be nonnegative"));
    }
    let kind = a.oracle.as_str();
    if !matches!(kind, "true-prior" | "visual-bayes" | "textual-bayes") {
        return Err(usage(format!("unknown oracle `{kind}`")));
    }
    let (ds, _, emb) = load_data(&mut run, &a.data, true)?;
    let access = OracleAccess::grant();
    let table: CooccurrenceTable = match kind {
        "textual-bayes" => {
            let tokens = a
                .tokens
                .as_ref()
                .ok_or_else(|| usage("textual-bayes needs --tokens"))?;
            run.input(tokens);
            build_text_cooc(tokens, a.window, ds.vocab())?
        }
        _ => build_image_cooc(&ds, access),
    };
    let scorers = match &a.model {
        Some(dir) if kind != "true-prior" => Some(load_model(&mut run, dir, true)?),
        _ => None,
    };
    if let Some(s) = &scorers {
        if !s.config.trained.contains(&Component::Visual) {
            return Err(usage("--model has no trained visual component"));
        }
    }
    let sel = match kind {
        "true-prior" => Selection::PRIOR,
        _ => Selection {
            context: true,
            visual: if scorers.is_some() { VisualSlot::Visual } else { VisualSlot::None },
            prior: true,
        },
    };
    let candidates = mode.candidates(ds.vocab());
    if candidates.len() < 2 {
        return Err(usage(format!("mode {} has fewer than 2 candidate classes", mode.as_str())));
    }
    let eps = a.smoothing;
    let score = |inst: &crate::datamodel::ZslInstance<'_>, cands: &[usize]| {
        if kind == "true-prior" {
            Ok(true_prior_triples(&table, cands, eps))
        } else {
            let visual = scorers.as_ref().map(|s| (&s.visual, &emb));
            bayes_triples(&table, inst, cands, visual, eps, access)
        }
    };
    let val = make_instances(&ds, Part::Val, mode);
    let test = make_instances(&ds, Part::Test, mode);
    if test.is_empty() {
        return Err(Error::Empty("no test instances in the requested mode").into());
    }
    let val_set = EvaluationSet::build(&val, &candidates, score)?;
    let cal = calibrate(&val_set, &grid, sel)?;
    let test_set = EvaluationSet::build(&test, &candidates, score)?;
    let report = build_report(&test_set, cal.weights, &ks, mode, kind.to_string(), true, &ds)?;
    println!(
        "{kind} mode {}: MFR {:.2} over {} instances",
        mode.as_str(),
        report.mfr,
        report.count
    );
    write_json(&a.out, &report)?;
    let config = serde_json::json!({
        "oracle": kind,
        "mode": mode,
        "window": a.window,
        "smoothing": eps,
        "alpha": cal.weights,
    });
    run.finish(&sibling_manifest(&a.out), config, None, std::slice::from_ref(&a.out))?;
    Ok(())
}

fn cmd_export(mut run: Run, a: &ExportArgs) -> CliResult<()> {
    let mode = parse_mode(&a.mode)?;
    let part = parse_part(&a.part)?;
    let scorers = load_model(&mut run, &a.model, a.oracle)?;
    for c in [Component::Visual, Component::Context, Component::Prior] {
        if !scorers.config.trained.contains(&c) {
            return Err(usage(format!("export needs a trained `{}` component", c.name())));
        }
    }
    let (ds, _, emb) = load_data(&mut run, &a.data, a.oracle)?;
    let instances: Vec<_> = make_instances(&ds, part, mode).into_iter().take(a.limit).collect();
    let candidates = mode.candidates(ds.vocab());
    let rows = export_component_scores(&scorers, &instances, &candidates, &emb, a.negatives, a.seed)?;
    write_score_csv(&a.out, &rows)?;
    println!("exported {} rows for {} instances", rows.len(), instances.len());
    run.finish(
        &sibling_manifest(&a.out),
        serde_json::json!({ "mode": mode, "part": a.part, "limit": a.limit, "negatives": a.negatives }),
        Some(a.seed),
        std::slice::from_ref(&a.out),
    )?;
    Ok(())
}

/// Parses `args` (program name first) and runs the command; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<String>,
{
    let args: Vec<String> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let name = match &cli.command {
        Command::GenSynth(_) => "gen-synth",
        Command::Ingest(_) => "ingest",
        Command::Split(_) => "split",
        Command::Train(_) => "train",
        Command::Calibrate(_) => "calibrate",
        Command::Eval(_) => "eval",
        Command::OracleEval(_) => "oracle-eval",
        Command::ExportScores(_) => "export-scores",
    };
    let run = Run {
        command: name,
        args: args.iter().skip(1).cloned().collect(),
        start: Instant::now(),
        inputs: Vec::new(),
    };
    let result = match &cli.command {
        Command::GenSynth(a) => cmd_gen_synth(run, a),
        Command::Ingest(a) => cmd_ingest(run, a),
        Command::Split(a) => cmd_split(run, a),
        Command::Train(a) => cmd_train(run, a),
        Command::Calibrate(a) => cmd_calibrate(run, a),
        Command::Eval(a) => cmd_eval(run, a),
        Command::OracleEval(a) => cmd_oracle_eval(run, a),
        Command::ExportScores(a) => cmd_export(run, a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("czsl {name}: {e}");
            e.exit_code()
        }
    }
}
