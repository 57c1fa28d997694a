//! Pipeline orchestration: each subcommand reads its upstream artifacts from
//! the output directory, writes its own artifacts plus a machine-readable
//! run summary, and fails with a named hint when a prerequisite is missing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use healstage::dataset::{
    self, generate_pairs, load_dataset, load_pairs, make_split, pairs_in, save_pairs, Cohort,
    SplitPart, SplitSpec, WoundSeries,
};
use healstage::downstream::{
    self, agreement, eval_stage, finetune, save_eval, save_finetune_history, train_baseline,
    FinetuneConfig, LabelTable, StageModel,
};
use healstage::nn::EncoderConfig;
use healstage::pretext::{
    embed_all, eval_pretext, save_history, train_pretext, EmbeddingSet, PretextConfig,
    PretextModel,
};
use healstage::stagedisc::{
    self, assign, cluster_purity, discover_stages, load_centroids, load_mapping, pca_2d,
    save_centroids, save_mapping, save_pca, save_pseudo_labels, save_stats, ClusterConfig,
    PseudoLabel,
};
use healstage::synth::{generate, SynthConfig, SynthGroundTruth, GROUND_TRUTH_FILE};

#[derive(Debug, Error)]
enum CliError {
    #[error("{artifact} not found; run `healstage {hint}` first")]
    MissingArtifact { artifact: String, hint: String },
    #[error("cannot parse config {path}: {reason}")]
    Config { path: String, reason: String },
    #[error(transparent)]
    Dataset(#[from] dataset::DatasetError),
    #[error(transparent)]
    Synth(#[from] healstage::synth::SynthError),
    #[error(transparent)]
    Pretext(#[from] healstage::pretext::PretextError),
    #[error(transparent)]
    StageDisc(#[from] stagedisc::StageDiscError),
    #[error(transparent)]
    Downstream(#[from] downstream::DownstreamError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// One-word machine-parsable class for the exit line.
    fn class(&self) -> &'static str {
        match self {
            CliError::MissingArtifact { .. } => "missing-artifact",
            CliError::Config { .. } => "config",
            CliError::Dataset(_) => "dataset",
            CliError::Synth(_) => "synth",
            CliError::Pretext(_) => "pretext",
            CliError::StageDisc(_) => "stagedisc",
            CliError::Downstream(_) => "downstream",
            CliError::Io(_) => "io",
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

/// Every tunable in one flat table. Command-line flags beat the config file,
/// which beats these defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    seed: u64,
    // synthetic data
    wounds_per_cohort: usize,
    days: u32,
    side: usize,
    aged_rate: f64,
    noise: f64,
    // split
    val_wounds_per_cohort: usize,
    test_wounds_per_cohort: usize,
    // shared training
    batch_size: usize,
    lr: f64,
    dropout: f64,
    augment: bool,
    // pretext
    epochs: usize,
    // clustering
    k: usize,
    restarts: usize,
    max_iter: usize,
    tol: f64,
    // downstream
    finetune_epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    steps_per_epoch: Option<usize>,
    freeze_encoder: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            wounds_per_cohort: 8,
            days: 16,
            side: 64,
            aged_rate: 0.7,
            noise: 0.02,
            val_wounds_per_cohort: 1,
            test_wounds_per_cohort: 1,
            batch_size: 16,
            lr: 0.001,
            dropout: 0.3,
            augment: true,
            epochs: 25,
            k: 4,
            restarts: 10,
            max_iter: 300,
            tol: 1e-6,
            finetune_epochs: 25,
            steps_per_epoch: None,
            freeze_encoder: false,
        }
    }
}

/// The config-file counterpart of [`RunConfig`]: every field optional so the
/// file may set only what it overrides.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    wounds_per_cohort: Option<usize>,
    days: Option<u32>,
    side: Option<usize>,
    aged_rate: Option<f64>,
    noise: Option<f64>,
    val_wounds_per_cohort: Option<usize>,
    test_wounds_per_cohort: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    dropout: Option<f64>,
    augment: Option<bool>,
    epochs: Option<usize>,
    k: Option<usize>,
    restarts: Option<usize>,
    max_iter: Option<usize>,
    tol: Option<f64>,
    finetune_epochs: Option<usize>,
    steps_per_epoch: Option<usize>,
    freeze_encoder: Option<bool>,
}

#[derive(Debug, Args)]
struct Overrides {
    /// Flat TOML config file; flags given here still win over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for all artifacts.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    wounds_per_cohort: Option<usize>,
    #[arg(long, global = true)]
    days: Option<u32>,
    #[arg(long, global = true)]
    side: Option<usize>,
    #[arg(long, global = true)]
    aged_rate: Option<f64>,
    #[arg(long, global = true)]
    noise: Option<f64>,
    #[arg(long, global = true)]
    val_wounds_per_cohort: Option<usize>,
    #[arg(long, global = true)]
    test_wounds_per_cohort: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    dropout: Option<f64>,
    #[arg(long, global = true)]
    augment: Option<bool>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    restarts: Option<usize>,
    #[arg(long, global = true)]
    max_iter: Option<usize>,
    #[arg(long, global = true)]
    tol: Option<f64>,
    #[arg(long, global = true)]
    finetune_epochs: Option<usize>,
    #[arg(long, global = true)]
    steps_per_epoch: Option<usize>,
    #[arg(long, global = true)]
    freeze_encoder: Option<bool>,
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig> {
        let file = match &self.config {
            None => FileConfig::default(),
            Some(path) => {
                let text =
                    std::fs::read_to_string(path).map_err(|e| CliError::Config {
                        path: path.display().to_string(),
                        reason: e.to_string(),
                    })?;
                toml::from_str(&text).map_err(|e| CliError::Config {
                    path: path.display().to_string(),
                    reason: e.to_string(),
                })?
            }
        };
        let d = RunConfig::default();
        Ok(RunConfig {
            seed: self.seed.or(file.seed).unwrap_or(d.seed),
            wounds_per_cohort: self
                .wounds_per_cohort
                .or(file.wounds_per_cohort)
                .unwrap_or(d.wounds_per_cohort),
            days: self.days.or(file.days).unwrap_or(d.days),
            side: self.side.or(file.side).unwrap_or(d.side),
            aged_rate: self.aged_rate.or(file.aged_rate).unwrap_or(d.aged_rate),
            noise: self.noise.or(file.noise).unwrap_or(d.noise),
            val_wounds_per_cohort: self
                .val_wounds_per_cohort
                .or(file.val_wounds_per_cohort)
                .unwrap_or(d.val_wounds_per_cohort),
            test_wounds_per_cohort: self
                .test_wounds_per_cohort
                .or(file.test_wounds_per_cohort)
                .unwrap_or(d.test_wounds_per_cohort),
            batch_size: self.batch_size.or(file.batch_size).unwrap_or(d.batch_size),
            lr: self.lr.or(file.lr).unwrap_or(d.lr),
            dropout: self.dropout.or(file.dropout).unwrap_or(d.dropout),
            augment: self.augment.or(file.augment).unwrap_or(d.augment),
            epochs: self.epochs.or(file.epochs).unwrap_or(d.epochs),
            k: self.k.or(file.k).unwrap_or(d.k),
            restarts: self.restarts.or(file.restarts).unwrap_or(d.restarts),
            max_iter: self.max_iter.or(file.max_iter).unwrap_or(d.max_iter),
            tol: self.tol.or(file.tol).unwrap_or(d.tol),
            finetune_epochs: self
                .finetune_epochs
                .or(file.finetune_epochs)
                .unwrap_or(d.finetune_epochs),
            steps_per_epoch: self.steps_per_epoch.or(file.steps_per_epoch),
            freeze_encoder: self
                .freeze_encoder
                .or(file.freeze_encoder)
                .unwrap_or(d.freeze_encoder),
        })
    }
}

#[derive(Debug, Parser)]
#[command(name = "healstage", about = "Self-supervised wound heal-stage pipeline")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic wound dataset plus its ground-truth tables.
    Synth,
    /// Build the wound-level split and the temporal pair list.
    Pairs,
    /// Train the Siamese temporal-order model.
    TrainPretext,
    /// Embed every image with the trained encoder.
    Embed,
    /// Cluster training-wound embeddings and map clusters to stages.
    Cluster,
    /// Assign every image a cluster and stage pseudo-label.
    PseudoLabel,
    /// Fine-tune the pretext encoder into a stage classifier.
    Finetune {
        /// Label table to train on (defaults to the pseudo-labels).
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Train the from-scratch baseline classifier.
    Baseline {
        /// Label table to train on (defaults to the pseudo-labels).
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Score pretext, classifier, and baseline on the held-out splits.
    Evaluate {
        /// Label table to score against (defaults to the pseudo-labels).
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Agreement between the pseudo-labels and an external label table.
    Agreement {
        /// External (human) label table; 3 columns: wound_id day stage.
        #[arg(long)]
        human: PathBuf,
    },
    /// Collect histories, stats, and metrics into one report directory.
    Report,
}

/// Per-run summary written next to the artifacts; `config` round-trips to
/// the effective [`RunConfig`] exactly.
#[derive(Debug, Serialize, Deserialize)]
struct RunSummary {
    subcommand: String,
    config: RunConfig,
    wall_time_s: f64,
    metrics: BTreeMap<String, serde_json::Value>,
}

fn write_summary(
    out: &Path,
    subcommand: &str,
    cfg: &RunConfig,
    started: Instant,
    metrics: BTreeMap<String, serde_json::Value>,
) -> Result<()> {
    let summary = RunSummary {
        subcommand: subcommand.to_string(),
        config: cfg.clone(),
        wall_time_s: started.elapsed().as_secs_f64(),
        metrics,
    };
    let path = out.join(format!("{}_run.json", subcommand.replace('-', "_")));
    std::fs::write(path, serde_json::to_string_pretty(&summary)?.as_bytes())?;
    Ok(())
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Config {
            path: "run summary".into(),
            reason: e.to_string(),
        }
    }
}

fn require(path: PathBuf, hint: &str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::MissingArtifact {
            artifact: path.display().to_string(),
            hint: hint.to_string(),
        })
    }
}

fn data_dir(out: &Path) -> PathBuf {
    out.join("data")
}

fn load_series(out: &Path, cfg: &RunConfig) -> Result<Vec<WoundSeries>> {
    require(data_dir(out).join("manifest.json"), "synth")?;
    Ok(load_dataset(&data_dir(out), cfg.side)?)
}

fn load_split(out: &Path) -> Result<SplitSpec> {
    let path = require(out.join("split.json"), "pairs")?;
    let text = std::fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| CliError::Config {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

fn pretext_config(cfg: &RunConfig) -> PretextConfig {
    PretextConfig {
        encoder: EncoderConfig {
            input_side: cfg.side,
            ..Default::default()
        },
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
        lr: cfg.lr,
        dropout: cfg.dropout,
        augment: cfg.augment,
        seed: cfg.seed,
    }
}

fn finetune_config(cfg: &RunConfig) -> FinetuneConfig {
    FinetuneConfig {
        encoder: EncoderConfig {
            input_side: cfg.side,
            ..Default::default()
        },
        batch_size: cfg.batch_size,
        epochs: cfg.finetune_epochs,
        steps_per_epoch: cfg.steps_per_epoch,
        lr: cfg.lr,
        dropout: cfg.dropout,
        freeze_encoder: cfg.freeze_encoder,
        augment: cfg.augment,
        seed: cfg.seed,
    }
}

fn json_f64(v: f64) -> serde_json::Value {
    serde_json::Number::from_f64(v)
        .map(serde_json::Value::Number)
        .unwrap_or(serde_json::Value::Null)
}

fn cmd_synth(out: &Path, cfg: &RunConfig) -> Result<BTreeMap<String, serde_json::Value>> {
    let synth_cfg = SynthConfig {
        wounds_per_cohort: cfg.wounds_per_cohort,
        days: cfg.days,
        side: cfg.side,
        aged_rate: cfg.aged_rate,
        noise: cfg.noise,
        seed: cfg.seed,
    };
    let truth = generate(&synth_cfg, &data_dir(out))?;
    // ground truth re-expressed as a 3-column label table, so the agreement
    // and baseline subcommands have a reference without external input
    let mut table = String::from("wound_id day stage\n");
    for ((wound_id, day), stage) in &truth.stages {
        table.push_str(&format!("{wound_id} {day} {stage}\n"));
    }
    std::fs::write(data_dir(out).join("true_labels.txt"), table)?;
    let mut m = BTreeMap::new();
    m.insert(
        "images".into(),
        serde_json::Value::from(truth.stages.len()),
    );
    m.insert(
        "wounds".into(),
        serde_json::Value::from(2 * cfg.wounds_per_cohort),
    );
    Ok(m)
}

fn cmd_pairs(out: &Path, cfg: &RunConfig) -> Result<BTreeMap<String, serde_json::Value>> {
    let series = load_series(out, cfg)?;
    let split = make_split(
        &series,
        cfg.val_wounds_per_cohort,
        cfg.test_wounds_per_cohort,
        cfg.seed,
    )?;
    let pairs = generate_pairs(&series);
    std::fs::write(out.join("split.json"), serde_json::to_string_pretty(&split)?)?;
    save_pairs(&out.join("pairs.txt"), &pairs)?;
    let mut m = BTreeMap::new();
    m.insert("pairs_total".into(), serde_json::Value::from(pairs.len()));
    for part in [SplitPart::Train, SplitPart::Val, SplitPart::Test] {
        let n = pairs_in(&pairs, &split, part).len();
        m.insert(format!("pairs_{}", part.as_str()), serde_json::Value::from(n));
        let images: usize = series
            .iter()
            .filter(|s| split.part_of(&s.wound_id) == Some(part))
            .map(|s| s.images.len())
            .sum();
        m.insert(format!("images_{}", part.as_str()), serde_json::Value::from(images));
    }
    Ok(m)
}

fn cmd_train_pretext(out: &Path, cfg: &RunConfig) -> Result<BTreeMap<String, serde_json::Value>> {
    let series = load_series(out, cfg)?;
    let split = load_split(out)?;
    let pairs = load_pairs(&require(out.join("pairs.txt"), "pairs")?)?;
    let train: Vec<_> = pairs_in(&pairs, &split, SplitPart::Train)
        .into_iter()
        .cloned()
        .collect();
    let val: Vec<_> = pairs_in(&pairs, &split, SplitPart::Val)
        .into_iter()
        .cloned()
        .collect();
    let (model, history) = train_pretext(&series, &train, &val, &pretext_config(cfg))?;
    model.save(&out.join("pretext.ckpt"))?;
    save_history(&out.join("pretext_history.txt"), &history)?;
    let last = history.last().expect("epochs > 0");
    let best_val = history
        .iter()
        .map(|h| h.val_acc)
        .fold(f64::NAN, f64::max);
    let mut m = BTreeMap::new();
    m.insert("train_pairs".into(), serde_json::Value::from(train.len()));
    m.insert("val_pairs".into(), serde_json::Value::from(val.len()));
    m.insert("final_train_acc".into(), json_f64(last.train_acc));
    m.insert("best_val_acc".into(), json_f64(best_val));
    Ok(m)
}

fn cmd_embed(out: &Path, cfg: &RunConfig) -> Result<BTreeMap<String, serde_json::Value>> {
    let series = load_series(out, cfg)?;
    let ckpt = require(out.join("pretext.ckpt"), "train-pretext")?;
    let model = PretextModel::load(&ckpt, &pretext_config(cfg))?;
    let embeddings = embed_all(&model, &series)?;
    embeddings.save(&out.join("embeddings.txt"))?;
    let mut m = BTreeMap::new();
    m.insert(
        "embeddings".into(),
        serde_json::Value::from(embeddings.records.len()),
    );
    Ok(m)
}

fn cmd_cluster(out: &Path, cfg: &RunConfig) -> Result<BTreeMap<String, serde_json::Value>> {
    let series = load_series(out, cfg)?;
    let split = load_split(out)?;
    let embeddings = EmbeddingSet::load(&require(out.join("embeddings.txt"), "embed")?)?;
    let cohorts: BTreeMap<String, Cohort> = series
        .iter()
        .map(|s| (s.wound_id.clone(), s.cohort))
        .collect();
    let cluster_cfg = ClusterConfig {
        k: cfg.k,
        restarts: cfg.restarts,
        max_iter: cfg.max_iter,
        tol: cfg.tol,
        seed: cfg.seed,
    };
    let discovery = discover_stages(&embeddings, &cohorts, &split, &cluster_cfg)?;
    save_centroids(&out.join("centroids.txt"), &discovery.model)?;
    save_stats(&out.join("cluster_stats.txt"), &discovery.stats)?;
    save_mapping(&out.join("cluster_mapping.txt"), &discovery.mapping)?;
    let points: Vec<Vec<f64>> = embeddings
        .records
        .iter()
        .map(|r| r.embedding.clone())
        .collect();
    let pca = pca_2d(&points)?;
    save_pca(&out.join("pca.txt"), &embeddings, &pca)?;

    let mut m = BTreeMap::new();
    m.insert("inertia".into(), json_f64(discovery.model.inertia));
    m.insert("pc1_variance".into(), json_f64(pca.explained[0]));
    m.insert("pc2_variance".into(), json_f64(pca.explained[1]));

    // with synthetic ground truth on disk, report cluster purity vs the
    // true stages (mapped through the discovered cluster -> stage order)
    let truth_path = data_dir(out).join(GROUND_TRUTH_FILE);
    if truth_path.exists() {
        let truth = SynthGroundTruth::load(&truth_path)?;
        let truth_stages: Vec<usize> = embeddings
            .records
            .iter()
            .map(|r| truth.stage_of(&r.wound_id, r.day).unwrap_or(0))
            .collect();
        let purity = cluster_purity(&discovery.assignments, &truth_stages, cfg.k);
        std::fs::write(out.join("purity.txt"), format!("purity {purity:.6}\n"))?;
        m.insert("purity".into(), json_f64(purity));
    }
    Ok(m)
}

fn cmd_pseudo_label(out: &Path, _cfg: &RunConfig) -> Result<BTreeMap<String, serde_json::Value>> {
    let embeddings = EmbeddingSet::load(&require(out.join("embeddings.txt"), "embed")?)?;
    let centroids = load_centroids(&require(out.join("centroids.txt"), "cluster")?)?;
    let mapping = load_mapping(&require(out.join("cluster_mapping.txt"), "cluster")?)?;
    let labels: Vec<PseudoLabel> = embeddings
        .records
        .iter()
        .map(|r| {
            // centroids live in magnitude-compressed space
            let cluster = assign(&centroids, &stagedisc::compress_magnitude(&r.embedding));
            PseudoLabel {
                wound_id: r.wound_id.clone(),
                day: r.day,
                cluster,
                stage: mapping[cluster] as usize,
            }
        })
        .collect();
    save_pseudo_labels(&out.join("pseudo_labels.txt"), &labels)?;
    let mut m = BTreeMap::new();
    m.insert("labels".into(), serde_json::Value::from(labels.len()));
    for stage in 0..4usize {
        let n = labels.iter().filter(|l| l.stage == stage).count();
        m.insert(
            format!("stage_{}", stagedisc::STAGE_NAMES[stage]),
            serde_json::Value::from(n),
        );
    }
    Ok(m)
}

fn load_labels(out: &Path, labels: &Option<PathBuf>) -> Result<LabelTable> {
    let path = match labels {
        Some(p) => p.clone(),
        None => require(out.join("pseudo_labels.txt"), "pseudo-label")?,
    };
    Ok(LabelTable::load(&path)?)
}

fn history_metrics(history: &[downstream::FinetuneStats]) -> BTreeMap<String, serde_json::Value> {
    let mut m = BTreeMap::new();
    if let Some(last) = history.last() {
        m.insert("final_train_acc".into(), json_f64(last.train_acc));
    }
    let best_val = history.iter().map(|h| h.val_acc).fold(f64::NAN, f64::max);
    m.insert("best_val_acc".into(), json_f64(best_val));
    m
}

fn cmd_finetune(
    out: &Path,
    cfg: &RunConfig,
    labels: &Option<PathBuf>,
) -> Result<BTreeMap<String, serde_json::Value>> {
    let series = load_series(out, cfg)?;
    let split = load_split(out)?;
    let table = load_labels(out, labels)?;
    let ckpt = require(out.join("pretext.ckpt"), "train-pretext")?;
    let pretext = PretextModel::load(&ckpt, &pretext_config(cfg))?;
    let (model, history) = finetune(pretext.encoder, &series, &split, &table, &finetune_config(cfg))?;
    model.save(&out.join("stage.ckpt"))?;
    save_finetune_history(&out.join("finetune_history.txt"), &history)?;
    Ok(history_metrics(&history))
}

fn cmd_baseline(
    out: &Path,
    cfg: &RunConfig,
    labels: &Option<PathBuf>,
) -> Result<BTreeMap<String, serde_json::Value>> {
    let series = load_series(out, cfg)?;
    let split = load_split(out)?;
    let table = load_labels(out, labels)?;
    let (model, history) = train_baseline(&series, &split, &table, &finetune_config(cfg))?;
    model.save(&out.join("baseline.ckpt"))?;
    save_finetune_history(&out.join("baseline_history.txt"), &history)?;
    Ok(history_metrics(&history))
}

fn cmd_evaluate(
    out: &Path,
    cfg: &RunConfig,
    labels: &Option<PathBuf>,
) -> Result<BTreeMap<String, serde_json::Value>> {
    let series = load_series(out, cfg)?;
    let split = load_split(out)?;
    let table = load_labels(out, labels)?;
    let mut m = BTreeMap::new();
    let mut sections: Vec<(String, downstream::StageEval)> = Vec::new();

    // pretext pair accuracy on the held-out splits
    let pretext_path = require(out.join("pretext.ckpt"), "train-pretext")?;
    let mut pretext = PretextModel::load(&pretext_path, &pretext_config(cfg))?;
    let pairs = load_pairs(&require(out.join("pairs.txt"), "pairs")?)?;
    let mut pretext_lines = String::new();
    for part in [SplitPart::Val, SplitPart::Test] {
        let subset: Vec<_> = pairs_in(&pairs, &split, part).into_iter().cloned().collect();
        if subset.is_empty() {
            continue;
        }
        let (acc, loss) = eval_pretext(&mut pretext, &subset, &series)?;
        pretext_lines.push_str(&format!(
            "[pretext_{}]\ncount {}\naccuracy {:.6}\nloss {:.6}\n",
            part.as_str(),
            subset.len(),
            acc,
            loss
        ));
        m.insert(format!("pretext_{}_acc", part.as_str()), json_f64(acc));
    }

    let stage_path = require(out.join("stage.ckpt"), "finetune")?;
    let mut stage = StageModel::load(&stage_path, &finetune_config(cfg))?;
    for part in [SplitPart::Val, SplitPart::Test] {
        let ev = eval_stage(&mut stage, &series, &split, part, &table)?;
        m.insert(format!("finetune_{}_acc", part.as_str()), json_f64(ev.accuracy));
        sections.push((format!("finetune_{}", part.as_str()), ev));
    }
    let baseline_path = out.join("baseline.ckpt");
    if baseline_path.exists() {
        let mut baseline = StageModel::load(&baseline_path, &finetune_config(cfg))?;
        for part in [SplitPart::Val, SplitPart::Test] {
            let ev = eval_stage(&mut baseline, &series, &split, part, &table)?;
            m.insert(format!("baseline_{}_acc", part.as_str()), json_f64(ev.accuracy));
            sections.push((format!("baseline_{}", part.as_str()), ev));
        }
    }
    let refs: Vec<(&str, &downstream::StageEval)> =
        sections.iter().map(|(n, e)| (n.as_str(), e)).collect();
    save_eval(&out.join("metrics.txt"), &refs)?;
    // prepend the pretext sections so metrics.txt holds the whole evaluation
    let existing = std::fs::read_to_string(out.join("metrics.txt"))?;
    std::fs::write(out.join("metrics.txt"), format!("{pretext_lines}{existing}"))?;
    Ok(m)
}

fn cmd_agreement(out: &Path, human: &Path) -> Result<BTreeMap<String, serde_json::Value>> {
    let split = load_split(out)?;
    let pseudo = LabelTable::load(&require(out.join("pseudo_labels.txt"), "pseudo-label")?)?;
    let human_table = LabelTable::load(&require(human.to_path_buf(), "synth (or supply labels)")?)?;
    let report = agreement(&pseudo, &human_table, &split)?;
    let mut text = String::from("part agreement count\n");
    for (part, frac, n) in &report.per_part {
        text.push_str(&format!("{} {:.6} {}\n", part.as_str(), frac, n));
    }
    text.push_str(&format!("overall {:.6} {}\n", report.overall, report.count));
    std::fs::write(out.join("agreement.txt"), text)?;
    let mut m = BTreeMap::new();
    m.insert("overall".into(), json_f64(report.overall));
    for (part, frac, _) in &report.per_part {
        m.insert(format!("agreement_{}", part.as_str()), json_f64(*frac));
    }
    Ok(m)
}

fn cmd_report(out: &Path) -> Result<BTreeMap<String, serde_json::Value>> {
    let report_dir = out.join("report");
    std::fs::create_dir_all(&report_dir)?;
    let files = [
        "pretext_history.txt",
        "finetune_history.txt",
        "baseline_history.txt",
        "cluster_stats.txt",
        "cluster_mapping.txt",
        "pca.txt",
        "metrics.txt",
        "agreement.txt",
        "purity.txt",
    ];
    let mut copied = 0usize;
    let mut index = String::from("files aggregated into this report:\n");
    for f in files {
        let src = out.join(f);
        if src.exists() {
            std::fs::copy(&src, report_dir.join(f))?;
            index.push_str(&format!("  {f}\n"));
            copied += 1;
        }
    }
    if copied == 0 {
        return Err(CliError::MissingArtifact {
            artifact: "any report input".into(),
            hint: "evaluate".into(),
        });
    }
    std::fs::write(report_dir.join("index.txt"), index)?;
    let mut m = BTreeMap::new();
    m.insert("files".into(), serde_json::Value::from(copied));
    Ok(m)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.overrides.resolve()?;
    let out = &cli.overrides.out;
    std::fs::create_dir_all(out)?;
    let started = Instant::now();
    let (name, metrics) = match &cli.command {
        Command::Synth => ("synth", cmd_synth(out, &cfg)?),
        Command::Pairs => ("pairs", cmd_pairs(out, &cfg)?),
        Command::TrainPretext => ("train-pretext", cmd_train_pretext(out, &cfg)?),
        Command::Embed => ("embed", cmd_embed(out, &cfg)?),
        Command::Cluster => ("cluster", cmd_cluster(out, &cfg)?),
        Command::PseudoLabel => ("pseudo-label", cmd_pseudo_label(out, &cfg)?),
        Command::Finetune { labels } => ("finetune", cmd_finetune(out, &cfg, labels)?),
        Command::Baseline { labels } => ("baseline", cmd_baseline(out, &cfg, labels)?),
        Command::Evaluate { labels } => ("evaluate", cmd_evaluate(out, &cfg, labels)?),
        Command::Agreement { human } => ("agreement", cmd_agreement(out, human)?),
        Command::Report => ("report", cmd_report(out)?),
    };
    for (key, value) in &metrics {
        println!("{key} {value}");
    }
    write_summary(out, name, &cfg, started, metrics)?;
    Ok(())
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error[{}]: {e}", e.class());
        std::process::exit(match e {
            CliError::Config { .. } => 2,
            _ => 1,
        });
    }
}
