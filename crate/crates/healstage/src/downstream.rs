//! Downstream stage classification: fine-tune the pretext encoder (or train
//! a from-scratch baseline with the identical architecture) on per-image
//! stage labels, and score predictions against a label table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::{augment, SplitPart, SplitSpec, WoundImage, WoundSeries};
use crate::nn::{
    harvest_grads, load_into, save_checkpoint, stage_params, Adam, Encoder, EncoderConfig, NnError,
    Param, StageHead, STAGE_CLASSES,
};
use crate::stagedisc::PseudoLabel;
use crate::tensor::Tape;

#[derive(Debug, Error)]
pub enum DownstreamError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("no label for image ({wound_id}, day {day})")]
    MissingLabel { wound_id: String, day: u32 },
    #[error("no {0} images available")]
    NoImages(&'static str),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("malformed label file: {0}")]
    BadLabels(String),
    #[error("label tables cover different images; only in first: {only_a:?}, only in second: {only_b:?}")]
    KeyMismatch {
        only_a: Vec<String>,
        only_b: Vec<String>,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DownstreamError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelSource {
    Pseudo,
    Human,
}

/// Stage label per (wound_id, day) key, loaded from either a pseudo-label
/// export (4 columns, with the raw cluster) or a human annotation file
/// (3 columns).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelTable {
    pub source: LabelSource,
    map: BTreeMap<(String, u32), usize>,
}

impl LabelTable {
    pub fn from_pseudo(labels: &[PseudoLabel]) -> Self {
        LabelTable {
            source: LabelSource::Pseudo,
            map: labels
                .iter()
                .map(|l| ((l.wound_id.clone(), l.day), l.stage))
                .collect(),
        }
    }

    /// Column count distinguishes the two formats: `wound_id day cluster
    /// stage` is a pseudo-label export, `wound_id day stage` is human.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| DownstreamError::BadLabels("empty file".into()))?;
        let ncols = header.split_whitespace().count();
        let source = match ncols {
            4 => LabelSource::Pseudo,
            3 => LabelSource::Human,
            n => {
                return Err(DownstreamError::BadLabels(format!(
                    "expected 3 or 4 columns, header has {n}"
                )))
            }
        };
        let mut map = BTreeMap::new();
        for (i, line) in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != ncols {
                return Err(DownstreamError::BadLabels(format!(
                    "line {}: expected {ncols} fields, got {}",
                    i + 1,
                    f.len()
                )));
            }
            let bad = |w: &str| DownstreamError::BadLabels(format!("line {}: bad {w}", i + 1));
            let day: u32 = f[1].parse().map_err(|_| bad("day"))?;
            let stage: usize = f[ncols - 1].parse().map_err(|_| bad("stage"))?;
            if stage >= STAGE_CLASSES {
                return Err(bad("stage (out of range)"));
            }
            map.insert((f[0].to_string(), day), stage);
        }
        Ok(LabelTable { source, map })
    }

    pub fn get(&self, wound_id: &str, day: u32) -> Option<usize> {
        self.map.get(&(wound_id.to_string(), day)).copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = &(String, u32)> {
        self.map.keys()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub encoder: EncoderConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// `None` means one step per training wound.
    pub steps_per_epoch: Option<usize>,
    pub lr: f64,
    pub dropout: f64,
    pub freeze_encoder: bool,
    pub augment: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            encoder: EncoderConfig::default(),
            batch_size: 16,
            epochs: 25,
            steps_per_epoch: None,
            lr: 0.001,
            dropout: 0.3,
            freeze_encoder: false,
            augment: true,
            seed: 0,
        }
    }
}

#[derive(Debug)]
pub struct StageModel {
    pub encoder: Encoder,
    pub head: StageHead,
}

impl StageModel {
    fn all_params(&self) -> Vec<&Param> {
        self.encoder.params.iter().chain(self.head.params.iter()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.all_params().iter().map(|p| p.numel()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(save_checkpoint(path, &self.all_params())?)
    }

    pub fn load(path: &Path, cfg: &FinetuneConfig) -> Result<Self> {
        let mut model = StageModel {
            encoder: Encoder::build(cfg.encoder.clone(), cfg.seed)?,
            head: StageHead::build(cfg.dropout, cfg.seed.wrapping_add(1)),
        };
        let mut refs: Vec<&mut Param> = model
            .encoder
            .params
            .iter_mut()
            .chain(model.head.params.iter_mut())
            .collect();
        load_into(path, &mut refs)?;
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

/// Accuracy plus the 4x4 confusion matrix (`confusion[truth][pred]`).
#[derive(Debug, Clone, PartialEq)]
pub struct StageEval {
    pub accuracy: f64,
    pub loss: f64,
    pub confusion: [[usize; STAGE_CLASSES]; STAGE_CLASSES],
    pub count: usize,
}

fn labelled_images<'a>(
    series: &'a [WoundSeries],
    split: &SplitSpec,
    part: SplitPart,
    labels: &LabelTable,
) -> Result<Vec<(&'a WoundImage, usize)>> {
    let mut out = Vec::new();
    for s in series {
        if split.part_of(&s.wound_id) != Some(part) {
            continue;
        }
        for img in &s.images {
            let stage = labels
                .get(&img.wound_id, img.day)
                .ok_or_else(|| DownstreamError::MissingLabel {
                    wound_id: img.wound_id.clone(),
                    day: img.day,
                })?;
            out.push((img, stage));
        }
    }
    Ok(out)
}

fn batch_leaf(
    tape: &mut Tape,
    images: &[&WoundImage],
    aug_seeds: Option<&[u64]>,
) -> Result<crate::tensor::TensorId> {
    let (h, w) = (images[0].height, images[0].width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for (i, img) in images.iter().enumerate() {
        match aug_seeds {
            Some(seeds) => data.extend(augment(img, seeds[i]).to_chw()),
            None => data.extend(img.to_chw()),
        }
    }
    Ok(tape
        .leaf(&[images.len(), 3, h, w], data, false)
        .map_err(NnError::from)?)
}

struct StepEval {
    loss: f64,
    correct: usize,
    predictions: Vec<usize>,
}

fn run_stage_batch(
    model: &mut StageModel,
    images: &[&WoundImage],
    targets: &[usize],
    train: bool,
    freeze_encoder: bool,
    aug_rng: Option<&mut ChaCha8Rng>,
    dropout_rng: &mut ChaCha8Rng,
    adam: Option<&mut Adam>,
) -> Result<StepEval> {
    let seeds: Option<Vec<u64>> =
        aug_rng.map(|rng| (0..images.len()).map(|_| rng.random()).collect());
    let mut tape = Tape::new();
    let x = batch_leaf(&mut tape, images, seeds.as_deref())?;
    let enc_ids = stage_params(&mut tape, &model.encoder.params, train && !freeze_encoder)?;
    let head_ids = stage_params(&mut tape, &model.head.params, train)?;
    let emb = model.encoder.forward(&mut tape, x, &enc_ids)?;
    let probs = model
        .head
        .forward(&mut tape, emb, &head_ids, train, dropout_rng)?;
    let loss_id = tape.cce_loss(probs, targets).map_err(NnError::from)?;
    let loss = tape.value(loss_id)[0];

    let pvals = tape.value(probs);
    let predictions: Vec<usize> = (0..images.len())
        .map(|i| {
            let row = &pvals[i * STAGE_CLASSES..(i + 1) * STAGE_CLASSES];
            row.iter()
                .enumerate()
                .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
                .map(|(c, _)| c)
                .unwrap()
        })
        .collect();
    let correct = predictions
        .iter()
        .zip(targets)
        .filter(|(p, t)| p == t)
        .count();

    if let Some(adam) = adam {
        tape.backward(loss_id).map_err(NnError::from)?;
        if !freeze_encoder {
            harvest_grads(&tape, &enc_ids, &mut model.encoder.params);
        }
        harvest_grads(&tape, &head_ids, &mut model.head.params);
        if freeze_encoder {
            adam.step(model.head.params.iter_mut())?;
        } else {
            adam.step(
                model
                    .encoder
                    .params
                    .iter_mut()
                    .chain(model.head.params.iter_mut()),
            )?;
        }
        for p in model
            .encoder
            .params
            .iter_mut()
            .chain(model.head.params.iter_mut())
        {
            p.zero_grad();
        }
    }
    Ok(StepEval {
        loss,
        correct,
        predictions,
    })
}

fn train_stage_model(
    mut model: StageModel,
    series: &[WoundSeries],
    split: &SplitSpec,
    labels: &LabelTable,
    cfg: &FinetuneConfig,
) -> Result<(StageModel, Vec<FinetuneStats>)> {
    let train_imgs = labelled_images(series, split, SplitPart::Train, labels)?;
    if train_imgs.is_empty() {
        return Err(DownstreamError::NoImages("training"));
    }
    let val_imgs = labelled_images(series, split, SplitPart::Val, labels)?;
    let steps = cfg
        .steps_per_epoch
        .unwrap_or_else(|| split.train.len().max(1));

    let mut adam = if cfg.freeze_encoder {
        let refs: Vec<&Param> = model.head.params.iter().collect();
        Adam::new(cfg.lr, &refs)
    } else {
        let refs = model.all_params();
        Adam::new(cfg.lr, &refs)
    };
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(4));

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Vec<Param>, Vec<Param>)> = None;
    let mut order: Vec<usize> = (0..train_imgs.len()).collect();
    for epoch in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            order.swap(i, shuffle_rng.random_range(0..=i));
        }
        let mut train_loss = 0.0;
        let mut train_correct = 0usize;
        let mut train_seen = 0usize;
        for step in 0..steps {
            // wrap around the shuffled order when an epoch needs more
            // samples than there are training images
            let batch_idx: Vec<usize> = (0..cfg.batch_size)
                .map(|b| order[(step * cfg.batch_size + b) % order.len()])
                .collect();
            let images: Vec<&WoundImage> = batch_idx.iter().map(|&i| train_imgs[i].0).collect();
            let targets: Vec<usize> = batch_idx.iter().map(|&i| train_imgs[i].1).collect();
            let aug = if cfg.augment { Some(&mut aug_rng) } else { None };
            let ev = run_stage_batch(
                &mut model,
                &images,
                &targets,
                true,
                cfg.freeze_encoder,
                aug,
                &mut dropout_rng,
                Some(&mut adam),
            )?;
            if !ev.loss.is_finite() {
                return Err(DownstreamError::NonFiniteLoss { epoch, step });
            }
            train_loss += ev.loss * images.len() as f64;
            train_correct += ev.correct;
            train_seen += images.len();
        }
        let (val_loss, val_acc) = if val_imgs.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let ev = eval_images(&mut model, &val_imgs)?;
            (ev.loss, ev.accuracy)
        };
        let stats = FinetuneStats {
            epoch,
            train_loss: train_loss / train_seen as f64,
            train_acc: train_correct as f64 / train_seen as f64,
            val_loss,
            val_acc,
        };
        let score = if val_acc.is_nan() { stats.train_acc } else { val_acc };
        if best.as_ref().map_or(true, |(b, _, _)| score > *b) {
            best = Some((score, model.encoder.params.clone(), model.head.params.clone()));
        }
        history.push(stats);
    }
    if let Some((_, enc, head)) = best {
        model.encoder.params = enc;
        model.head.params = head;
    }
    Ok((model, history))
}

/// Fine-tune: start from an already-trained encoder (typically loaded from
/// the pretext checkpoint) plus a freshly initialized stage head.
pub fn finetune(
    encoder: Encoder,
    series: &[WoundSeries],
    split: &SplitSpec,
    labels: &LabelTable,
    cfg: &FinetuneConfig,
) -> Result<(StageModel, Vec<FinetuneStats>)> {
    let model = StageModel {
        encoder,
        head: StageHead::build(cfg.dropout, cfg.seed.wrapping_add(1)),
    };
    train_stage_model(model, series, split, labels, cfg)
}

/// Baseline with the identical architecture and training recipe but a
/// freshly initialized encoder, so any accuracy gap isolates the value of
/// the pretext weights.
pub fn train_baseline(
    series: &[WoundSeries],
    split: &SplitSpec,
    labels: &LabelTable,
    cfg: &FinetuneConfig,
) -> Result<(StageModel, Vec<FinetuneStats>)> {
    let model = StageModel {
        encoder: Encoder::build(cfg.encoder.clone(), cfg.seed)?,
        head: StageHead::build(cfg.dropout, cfg.seed.wrapping_add(1)),
    };
    train_stage_model(model, series, split, labels, cfg)
}

fn eval_images(model: &mut StageModel, images: &[(&WoundImage, usize)]) -> Result<StageEval> {
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(0);
    let mut loss = 0.0;
    let mut confusion = [[0usize; STAGE_CLASSES]; STAGE_CLASSES];
    let mut correct = 0usize;
    for chunk in images.chunks(32) {
        let imgs: Vec<&WoundImage> = chunk.iter().map(|(i, _)| *i).collect();
        let targets: Vec<usize> = chunk.iter().map(|(_, t)| *t).collect();
        let ev = run_stage_batch(
            model,
            &imgs,
            &targets,
            false,
            false,
            None,
            &mut dropout_rng,
            None,
        )?;
        loss += ev.loss * imgs.len() as f64;
        correct += ev.correct;
        for (&t, &p) in targets.iter().zip(&ev.predictions) {
            confusion[t][p] += 1;
        }
    }
    Ok(StageEval {
        accuracy: correct as f64 / images.len() as f64,
        loss: loss / images.len() as f64,
        confusion,
        count: images.len(),
    })
}

/// Top-1 accuracy, mean loss, and confusion matrix over one split part.
pub fn eval_stage(
    model: &mut StageModel,
    series: &[WoundSeries],
    split: &SplitSpec,
    part: SplitPart,
    labels: &LabelTable,
) -> Result<StageEval> {
    let images = labelled_images(series, split, part, labels)?;
    if images.is_empty() {
        return Err(DownstreamError::NoImages("evaluation"));
    }
    eval_images(model, &images)
}

/// Agreement between two label tables, per split part and overall.
#[derive(Debug, Clone, PartialEq)]
pub struct AgreementReport {
    /// (part, agreement fraction, image count); parts with no images are
    /// omitted.
    pub per_part: Vec<(SplitPart, f64, usize)>,
    pub overall: f64,
    pub count: usize,
}

/// Fraction of images on which the two tables assign the same stage. The
/// tables must cover the same (wound_id, day) keys.
pub fn agreement(a: &LabelTable, b: &LabelTable, split: &SplitSpec) -> Result<AgreementReport> {
    let keys_a: Vec<&(String, u32)> = a.keys().collect();
    let keys_b: Vec<&(String, u32)> = b.keys().collect();
    if keys_a != keys_b {
        let fmt = |k: &&(String, u32)| format!("({}, day {})", k.0, k.1);
        return Err(DownstreamError::KeyMismatch {
            only_a: keys_a.iter().filter(|k| !keys_b.contains(k)).map(fmt).collect(),
            only_b: keys_b.iter().filter(|k| !keys_a.contains(k)).map(fmt).collect(),
        });
    }
    let mut hits: BTreeMap<Option<SplitPart>, (usize, usize)> = BTreeMap::new();
    for k in keys_a {
        let part = split.part_of(&k.0);
        let cell = hits.entry(part).or_default();
        cell.1 += 1;
        if a.get(&k.0, k.1) == b.get(&k.0, k.1) {
            cell.0 += 1;
        }
    }
    let mut per_part = Vec::new();
    let mut agree = 0usize;
    let mut total = 0usize;
    for part in [SplitPart::Train, SplitPart::Val, SplitPart::Test] {
        if let Some(&(h, n)) = hits.get(&Some(part)) {
            per_part.push((part, h as f64 / n as f64, n));
        }
    }
    for (h, n) in hits.values() {
        agree += h;
        total += n;
    }
    Ok(AgreementReport {
        per_part,
        overall: agree as f64 / total.max(1) as f64,
        count: total,
    })
}

/// Write a fine-tuning history as column text.
pub fn save_finetune_history(path: &Path, history: &[FinetuneStats]) -> std::io::Result<()> {
    let mut out = String::from("epoch train_loss train_acc val_loss val_acc\n");
    for h in history {
        writeln!(
            out,
            "{} {:.6} {:.6} {:.6} {:.6}",
            h.epoch, h.train_loss, h.train_acc, h.val_loss, h.val_acc
        )
        .unwrap();
    }
    std::fs::write(path, out)
}

/// Write an evaluation (accuracy, loss, confusion matrix) as column text.
pub fn save_eval(path: &Path, evals: &[(&str, &StageEval)]) -> std::io::Result<()> {
    let mut out = String::new();
    for (name, ev) in evals {
        writeln!(out, "[{name}]").unwrap();
        writeln!(out, "count {}", ev.count).unwrap();
        writeln!(out, "accuracy {:.6}", ev.accuracy).unwrap();
        writeln!(out, "loss {:.6}", ev.loss).unwrap();
        writeln!(out, "confusion (rows truth, cols predicted)").unwrap();
        for row in &ev.confusion {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            writeln!(out, "{}", cells.join(" ")).unwrap();
        }
    }
    std::fs::write(path, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Cohort;
    use crate::pretext::{embed_all, PretextConfig, PretextModel};

    /// Day-gradient series (same construction as the pretext tests) with a
    /// stage label derived from the day quartile, so stages are visually
    /// separable.
    fn staged_series(n_wounds: usize, days: u32, side: usize) -> (Vec<WoundSeries>, LabelTable) {
        let mut series = Vec::new();
        let mut pseudo = Vec::new();
        for wi in 0..n_wounds {
            let wound_id = format!("w{wi:02}");
            let images = (0..days)
                .map(|d| {
                    let t = d as f64 / (days - 1) as f64;
                    let mut pixels = vec![0.0; side * side * 3];
                    for y in 0..side {
                        for x in 0..side {
                            let radial = (((y as f64 - side as f64 / 2.0).powi(2)
                                + (x as f64 - side as f64 / 2.0).powi(2))
                                .sqrt()
                                / side as f64)
                                .min(1.0);
                            let v = (0.2 + 0.6 * t * radial + 0.1 * (wi as f64 / 8.0)).min(1.0);
                            for c in 0..3 {
                                pixels[(y * side + x) * 3 + c] = v;
                            }
                        }
                    }
                    WoundImage {
                        wound_id: wound_id.clone(),
                        cohort: Cohort::Young,
                        day: d,
                        height: side,
                        width: side,
                        pixels,
                    }
                })
                .collect();
            for d in 0..days {
                pseudo.push(PseudoLabel {
                    wound_id: wound_id.clone(),
                    day: d,
                    cluster: 0,
                    stage: (d as usize * STAGE_CLASSES / days as usize).min(STAGE_CLASSES - 1),
                });
            }
            series.push(WoundSeries {
                wound_id,
                cohort: Cohort::Young,
                images,
            });
        }
        (series, LabelTable::from_pseudo(&pseudo))
    }

    fn all_train_split(series: &[WoundSeries]) -> SplitSpec {
        let mut split = SplitSpec::default();
        for s in series {
            split.train.insert(s.wound_id.clone());
        }
        split
    }

    fn tiny_cfg(seed: u64) -> FinetuneConfig {
        FinetuneConfig {
            encoder: EncoderConfig {
                input_side: 16,
                ..Default::default()
            },
            epochs: 2,
            augment: false,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn label_table_roundtrip_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let pseudo = dir.path().join("pseudo.txt");
        std::fs::write(&pseudo, "wound_id day cluster stage\nw00 0 2 0\nw00 5 1 3\n").unwrap();
        let t = LabelTable::load(&pseudo).unwrap();
        assert_eq!(t.source, LabelSource::Pseudo);
        assert_eq!(t.get("w00", 5), Some(3));

        let human = dir.path().join("human.txt");
        std::fs::write(&human, "wound_id day stage\nw00 0 1\n").unwrap();
        let h = LabelTable::load(&human).unwrap();
        assert_eq!(h.source, LabelSource::Human);
        assert_eq!(h.get("w00", 0), Some(1));
        assert_eq!(h.len(), 1);
    }

    #[test]
    fn label_table_rejects_bad_stage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.txt");
        std::fs::write(&p, "wound_id day stage\nw00 0 7\n").unwrap();
        assert!(matches!(
            LabelTable::load(&p),
            Err(DownstreamError::BadLabels(_))
        ));
    }

    #[test]
    fn untrained_accuracy_near_chance() {
        let (series, labels) = staged_series(4, 8, 16);
        let split = all_train_split(&series);
        let cfg = tiny_cfg(3);
        let mut model = StageModel {
            encoder: Encoder::build(cfg.encoder.clone(), cfg.seed).unwrap(),
            head: StageHead::build(cfg.dropout, cfg.seed + 1),
        };
        let ev = eval_stage(&mut model, &series, &split, SplitPart::Train, &labels).unwrap();
        assert!(ev.accuracy <= 0.55, "untrained accuracy {}", ev.accuracy);
    }

    #[test]
    fn overfits_training_images() {
        let (series, labels) = staged_series(2, 8, 16);
        let split = all_train_split(&series);
        let cfg = FinetuneConfig {
            epochs: 150,
            steps_per_epoch: Some(1),
            ..tiny_cfg(7)
        };
        let (mut model, _) = train_baseline(&series, &split, &labels, &cfg).unwrap();
        let ev = eval_stage(&mut model, &series, &split, SplitPart::Train, &labels).unwrap();
        assert_eq!(ev.accuracy, 1.0, "failed to overfit the training set");
    }

    #[test]
    fn zero_epoch_finetune_preserves_encoder() {
        let (series, labels) = staged_series(2, 4, 16);
        let split = all_train_split(&series);
        let pcfg = PretextConfig {
            encoder: EncoderConfig {
                input_side: 16,
                ..Default::default()
            },
            seed: 11,
            ..Default::default()
        };
        let pretext = PretextModel::new(&pcfg).unwrap();
        let before = embed_all(&pretext, &series).unwrap();
        let cfg = FinetuneConfig {
            epochs: 0,
            ..tiny_cfg(11)
        };
        let (model, _) = finetune(pretext.encoder, &series, &split, &labels, &cfg).unwrap();
        let carried = PretextModel {
            encoder: model.encoder,
            head: pretext.head,
        };
        let after = embed_all(&carried, &series).unwrap();
        assert_eq!(before, after, "encoder changed before any optimizer step");
    }

    #[test]
    fn finetuned_and_baseline_param_counts_match() {
        let cfg = tiny_cfg(0);
        let a = StageModel {
            encoder: Encoder::build(cfg.encoder.clone(), 0).unwrap(),
            head: StageHead::build(cfg.dropout, 1),
        };
        let b = StageModel {
            encoder: Encoder::build(cfg.encoder.clone(), 99).unwrap(),
            head: StageHead::build(cfg.dropout, 100),
        };
        assert_eq!(a.param_count(), b.param_count());
    }

    #[test]
    fn confusion_trace_matches_accuracy() {
        let (series, labels) = staged_series(3, 8, 16);
        let split = all_train_split(&series);
        let cfg = tiny_cfg(5);
        let mut model = StageModel {
            encoder: Encoder::build(cfg.encoder.clone(), 2).unwrap(),
            head: StageHead::build(cfg.dropout, 3),
        };
        let ev = eval_stage(&mut model, &series, &split, SplitPart::Train, &labels).unwrap();
        let trace: usize = (0..STAGE_CLASSES).map(|i| ev.confusion[i][i]).sum();
        let total: usize = ev.confusion.iter().flatten().sum();
        assert_eq!(total, ev.count);
        assert!((ev.accuracy - trace as f64 / total as f64).abs() < 1e-12);
    }

    #[test]
    fn missing_label_names_the_image() {
        let (series, _) = staged_series(1, 4, 16);
        let split = all_train_split(&series);
        let empty = LabelTable {
            source: LabelSource::Human,
            map: BTreeMap::new(),
        };
        let cfg = tiny_cfg(0);
        let err = train_baseline(&series, &split, &empty, &cfg).unwrap_err();
        match err {
            DownstreamError::MissingLabel { wound_id, day } => {
                assert_eq!(wound_id, "w00");
                assert_eq!(day, 0);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn agreement_fixture_three_of_four() {
        let mk = |stages: [usize; 4]| LabelTable {
            source: LabelSource::Human,
            map: (0..4u32)
                .map(|d| (("w00".to_string(), d), stages[d as usize]))
                .collect(),
        };
        let a = mk([0, 1, 2, 3]);
        let b = mk([0, 1, 2, 0]);
        let mut split = SplitSpec::default();
        split.train.insert("w00".into());
        let rep = agreement(&a, &b, &split).unwrap();
        assert_eq!(rep.overall, 0.75);
        assert_eq!(rep.per_part, vec![(SplitPart::Train, 0.75, 4)]);
    }

    #[test]
    fn agreement_overall_is_weighted_average() {
        let mut map_a = BTreeMap::new();
        let mut map_b = BTreeMap::new();
        // train wound: 2 images, 1 agrees; test wound: 3 images, 3 agree
        for (wid, days, agree) in [("tr", 2u32, 1u32), ("te", 3, 3)] {
            for d in 0..days {
                map_a.insert((wid.to_string(), d), 1usize);
                map_b.insert((wid.to_string(), d), if d < agree { 1 } else { 2 });
            }
        }
        let a = LabelTable { source: LabelSource::Pseudo, map: map_a };
        let b = LabelTable { source: LabelSource::Human, map: map_b };
        let mut split = SplitSpec::default();
        split.train.insert("tr".into());
        split.test.insert("te".into());
        let rep = agreement(&a, &b, &split).unwrap();
        let weighted: f64 = rep
            .per_part
            .iter()
            .map(|(_, f, n)| f * *n as f64)
            .sum::<f64>()
            / rep.count as f64;
        assert!((rep.overall - weighted).abs() < 1e-12);
        assert_eq!(rep.overall, 4.0 / 5.0);
    }

    #[test]
    fn agreement_rejects_key_mismatch() {
        let a = LabelTable {
            source: LabelSource::Pseudo,
            map: [(("w00".to_string(), 0u32), 0usize)].into(),
        };
        let b = LabelTable {
            source: LabelSource::Human,
            map: [(("w01".to_string(), 0u32), 0usize)].into(),
        };
        let err = agreement(&a, &b, &SplitSpec::default()).unwrap_err();
        match err {
            DownstreamError::KeyMismatch { only_a, only_b } => {
                assert_eq!(only_a, vec!["(w00, day 0)"]);
                assert_eq!(only_b, vec!["(w01, day 0)"]);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let cfg = tiny_cfg(13);
        let model = StageModel {
            encoder: Encoder::build(cfg.encoder.clone(), cfg.seed).unwrap(),
            head: StageHead::build(cfg.dropout, cfg.seed + 1),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stage.ckpt");
        model.save(&path).unwrap();
        let loaded = StageModel::load(&path, &cfg).unwrap();
        for (a, b) in model.all_params().iter().zip(loaded.all_params()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
