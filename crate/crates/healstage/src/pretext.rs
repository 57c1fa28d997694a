//! Siamese temporal-coherency training: learn to tell whether an image pair
//! runs forward or backward in time, then reuse the shared encoder to embed
//! every image.
//!
//! Both branch positions evaluate the same encoder parameters; a pair batch
//! is two forward passes over one set of staged leaves, so the gradients of
//! the two branches accumulate on the same tensors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::{augment, ImagePair, WoundImage, WoundSeries};
use crate::nn::{
    harvest_grads, load_into, save_checkpoint, stage_params, Adam, Encoder, EncoderConfig, NnError,
    Param, PretextHead, EMBEDDING_DIM,
};
use crate::tensor::Tape;

#[derive(Debug, Error)]
pub enum PretextError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("no {0} pairs provided")]
    NoPairs(&'static str),
    #[error("pair references unknown image ({wound_id}, day {day})")]
    UnknownImage { wound_id: String, day: u32 },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed embeddings file: {0}")]
    BadEmbeddings(String),
}

pub type Result<T> = std::result::Result<T, PretextError>;

#[derive(Debug, Clone, PartialEq)]
pub struct PretextConfig {
    pub encoder: EncoderConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub dropout: f64,
    pub augment: bool,
    pub seed: u64,
}

impl Default for PretextConfig {
    fn default() -> Self {
        PretextConfig {
            encoder: EncoderConfig::default(),
            batch_size: 16,
            epochs: 25,
            lr: 0.001,
            dropout: 0.3,
            augment: true,
            seed: 0,
        }
    }
}

pub struct PretextModel {
    pub encoder: Encoder,
    pub head: PretextHead,
}

impl PretextModel {
    pub fn new(cfg: &PretextConfig) -> Result<Self> {
        Ok(PretextModel {
            encoder: Encoder::build(cfg.encoder.clone(), cfg.seed)?,
            head: PretextHead::build(cfg.dropout, cfg.seed.wrapping_add(1)),
        })
    }

    fn all_params(&self) -> Vec<&Param> {
        self.encoder.params.iter().chain(self.head.params.iter()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(save_checkpoint(path, &self.all_params())?)
    }

    pub fn load(path: &Path, cfg: &PretextConfig) -> Result<Self> {
        let mut model = Self::new(cfg)?;
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
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

/// Per-image 16-d feature vectors with (wound_id, day) provenance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingSet {
    pub records: Vec<EmbeddingRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub wound_id: String,
    pub day: u32,
    pub embedding: Vec<f64>,
}

impl EmbeddingSet {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from("wound_id day");
        for i in 0..EMBEDDING_DIM {
            write!(out, " e{i}").unwrap();
        }
        out.push('\n');
        for r in &self.records {
            write!(out, "{} {}", r.wound_id, r.day).unwrap();
            for v in &r.embedding {
                write!(out, " {v}").unwrap();
            }
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 2 + EMBEDDING_DIM {
                return Err(PretextError::BadEmbeddings(format!(
                    "line {}: expected {} fields, got {}",
                    i + 1,
                    2 + EMBEDDING_DIM,
                    f.len()
                )));
            }
            let bad = |w: &str| PretextError::BadEmbeddings(format!("line {}: bad {w}", i + 1));
            records.push(EmbeddingRecord {
                wound_id: f[0].to_string(),
                day: f[1].parse().map_err(|_| bad("day"))?,
                embedding: f[2..]
                    .iter()
                    .map(|v| v.parse().map_err(|_| bad("value")))
                    .collect::<Result<_>>()?,
            });
        }
        Ok(EmbeddingSet { records })
    }
}

type ImageIndex<'a> = BTreeMap<(&'a str, u32), &'a WoundImage>;

fn index_images(series: &[WoundSeries]) -> ImageIndex<'_> {
    let mut idx = BTreeMap::new();
    for s in series {
        for img in &s.images {
            idx.insert((s.wound_id.as_str(), img.day), img);
        }
    }
    idx
}

fn lookup<'a>(idx: &ImageIndex<'a>, wound_id: &str, day: u32) -> Result<&'a WoundImage> {
    idx.get(&(wound_id, day))
        .copied()
        .ok_or_else(|| PretextError::UnknownImage {
            wound_id: wound_id.to_string(),
            day,
        })
}

/// Stack images (optionally augmented with per-sample seeds) into an NCHW
/// leaf buffer.
fn batch_pixels(images: &[&WoundImage], aug_seeds: Option<&[u64]>) -> (Vec<usize>, Vec<f64>) {
    let (h, w) = (images[0].height, images[0].width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for (i, img) in images.iter().enumerate() {
        match aug_seeds {
            Some(seeds) => data.extend(augment(img, seeds[i]).to_chw()),
            None => data.extend(img.to_chw()),
        }
    }
    (vec![images.len(), 3, h, w], data)
}

struct BatchEval {
    loss: f64,
    correct: usize,
}

#[allow(clippy::too_many_arguments)]
fn run_batch(
    model: &mut PretextModel,
    idx: &ImageIndex,
    batch: &[&ImagePair],
    train: bool,
    aug_rng: Option<&mut ChaCha8Rng>,
    dropout_rng: &mut ChaCha8Rng,
    adam: Option<&mut Adam>,
) -> Result<BatchEval> {
    let mut imgs_a = Vec::with_capacity(batch.len());
    let mut imgs_b = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    for p in batch {
        imgs_a.push(lookup(idx, &p.wound_id, p.day_a)?);
        imgs_b.push(lookup(idx, &p.wound_id, p.day_b)?);
        targets.push(if p.positive { 1.0 } else { 0.0 });
    }
    // each pair member gets its own augmentation seed
    let seeds: Option<(Vec<u64>, Vec<u64>)> = aug_rng.map(|rng| {
        (
            (0..batch.len()).map(|_| rng.random()).collect(),
            (0..batch.len()).map(|_| rng.random()).collect(),
        )
    });
    let (shape_a, data_a) = batch_pixels(&imgs_a, seeds.as_ref().map(|s| s.0.as_slice()));
    let (shape_b, data_b) = batch_pixels(&imgs_b, seeds.as_ref().map(|s| s.1.as_slice()));

    let mut tape = Tape::new();
    let xa = tape.leaf(&shape_a, data_a, false).map_err(NnError::from)?;
    let xb = tape.leaf(&shape_b, data_b, false).map_err(NnError::from)?;
    let enc_ids = stage_params(&mut tape, &model.encoder.params, train)?;
    let head_ids = stage_params(&mut tape, &model.head.params, train)?;
    let ea = model.encoder.forward(&mut tape, xa, &enc_ids)?;
    let eb = model.encoder.forward(&mut tape, xb, &enc_ids)?;
    let probs = model
        .head
        .forward(&mut tape, ea, eb, &head_ids, train, dropout_rng)?;
    let loss_id = tape.bce_loss(probs, &targets).map_err(NnError::from)?;
    let loss = tape.value(loss_id)[0];

    let correct = tape
        .value(probs)
        .iter()
        .zip(&targets)
        .filter(|(&p, &y)| (p > 0.5) == (y == 1.0))
        .count();

    if let Some(adam) = adam {
        tape.backward(loss_id).map_err(NnError::from)?;
        harvest_grads(&tape, &enc_ids, &mut model.encoder.params);
        harvest_grads(&tape, &head_ids, &mut model.head.params);
        adam.step(
            model
                .encoder
                .params
                .iter_mut()
                .chain(model.head.params.iter_mut()),
        )?;
        for p in model
            .encoder
            .params
            .iter_mut()
            .chain(model.head.params.iter_mut())
        {
            p.zero_grad();
        }
    }
    Ok(BatchEval { loss, correct })
}

/// Train the Siamese model over shuffled pair batches, recording per-epoch
/// train/val loss and accuracy and retaining the weights from the epoch with
/// the highest validation accuracy (ties go to the earliest epoch).
pub fn train_pretext(
    series: &[WoundSeries],
    pairs_train: &[ImagePair],
    pairs_val: &[ImagePair],
    cfg: &PretextConfig,
) -> Result<(PretextModel, Vec<EpochStats>)> {
    if pairs_train.is_empty() {
        return Err(PretextError::NoPairs("training"));
    }
    let idx = index_images(series);
    let mut model = PretextModel::new(cfg)?;
    let mut adam = {
        let refs = model.all_params();
        Adam::new(cfg.lr, &refs)
    };
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(4));

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Vec<Param>, Vec<Param>)> = None;
    let mut order: Vec<usize> = (0..pairs_train.len()).collect();
    for epoch in 0..cfg.epochs {
        for i in (1..order.len()).rev() {
            order.swap(i, shuffle_rng.random_range(0..=i));
        }
        let mut train_loss = 0.0;
        let mut train_correct = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&ImagePair> = chunk.iter().map(|&i| &pairs_train[i]).collect();
            let aug = if cfg.augment { Some(&mut aug_rng) } else { None };
            let ev = run_batch(
                &mut model,
                &idx,
                &batch,
                true,
                aug,
                &mut dropout_rng,
                Some(&mut adam),
            )?;
            if !ev.loss.is_finite() {
                return Err(PretextError::NonFiniteLoss { epoch, batch: bi });
            }
            train_loss += ev.loss * batch.len() as f64;
            train_correct += ev.correct;
        }
        let n_train = pairs_train.len() as f64;
        let (val_loss, val_acc) = if pairs_val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            eval_pretext(&mut model, pairs_val, series).map(|(a, l)| (l, a))?
        };
        let stats = EpochStats {
            epoch,
            train_loss: train_loss / n_train,
            train_acc: train_correct as f64 / n_train,
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

/// Accuracy and mean loss over a pair set in eval mode (no dropout, no
/// augmentation).
pub fn eval_pretext(
    model: &mut PretextModel,
    pairs: &[ImagePair],
    series: &[WoundSeries],
) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(PretextError::NoPairs("evaluation"));
    }
    let idx = index_images(series);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(0);
    let mut loss = 0.0;
    let mut correct = 0usize;
    for chunk in pairs.chunks(32) {
        let batch: Vec<&ImagePair> = chunk.iter().collect();
        let ev = run_batch(model, &idx, &batch, false, None, &mut dropout_rng, None)?;
        loss += ev.loss * batch.len() as f64;
        correct += ev.correct;
    }
    Ok((correct as f64 / pairs.len() as f64, loss / pairs.len() as f64))
}

/// One 16-d embedding per image via the shared encoder branch; eval mode,
/// never augmented.
pub fn embed_all(model: &PretextModel, series: &[WoundSeries]) -> Result<EmbeddingSet> {
    let mut records = Vec::new();
    let images: Vec<&WoundImage> = series.iter().flat_map(|s| s.images.iter()).collect();
    for chunk in images.chunks(32) {
        let (shape, data) = batch_pixels(chunk, None);
        let mut tape = Tape::new();
        let x = tape.leaf(&shape, data, false).map_err(NnError::from)?;
        let ids = stage_params(&mut tape, &model.encoder.params, false)?;
        let emb = model.encoder.forward(&mut tape, x, &ids)?;
        let vals = tape.value(emb);
        for (i, img) in chunk.iter().enumerate() {
            records.push(EmbeddingRecord {
                wound_id: img.wound_id.clone(),
                day: img.day,
                embedding: vals[i * EMBEDDING_DIM..(i + 1) * EMBEDDING_DIM].to_vec(),
            });
        }
    }
    Ok(EmbeddingSet { records })
}

/// Write a training history as column text.
pub fn save_history(path: &Path, history: &[EpochStats]) -> std::io::Result<()> {
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
