//! Layers, the densely-connected image encoder, task heads, the Adam
//! optimizer, and the on-disk checkpoint format.
//!
//! The encoder is a miniature DenseNet-style network: inside a dense block,
//! layer i sees the channel-concatenation of the block input and every
//! previous layer output. It ends in global average pooling and a dense
//! projection to a 16-dimensional embedding.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{Tape, TensorError, TensorId};

pub const EMBEDDING_DIM: usize = 16;

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{layer}: non-positive spatial extent {extent} (input too small for this config)")]
    SpatialCollapse { layer: String, extent: isize },
    #[error("non-finite gradient in parameter '{0}'")]
    NonFiniteGrad(String),
    #[error("checkpoint parameter mismatch: missing {missing:?}, extra {extra:?}, mis-shaped {mismatched:?}")]
    CheckpointMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
        mismatched: Vec<String>,
    },
    #[error("malformed checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// A named trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Param {
            name: name.into(),
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    /// He-uniform initialization: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
    pub fn he_uniform(name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(name, shape);
        let limit = (6.0 / fan_in as f64).sqrt();
        for v in &mut p.data {
            *v = rng.random_range(-limit..limit);
        }
        p
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Put parameters on a tape as (optionally trainable) leaves.
pub fn stage_params(tape: &mut Tape, params: &[Param], trainable: bool) -> Result<Vec<TensorId>> {
    params
        .iter()
        .map(|p| Ok(tape.leaf(&p.shape, p.data.clone(), trainable)?))
        .collect()
}

/// Read tape gradients back into the parameter accumulators.
pub fn harvest_grads(tape: &Tape, ids: &[TensorId], params: &mut [Param]) {
    for (p, &id) in params.iter_mut().zip(ids) {
        if let Some(g) = tape.grad(id) {
            for (a, v) in p.grad.iter_mut().zip(g) {
                *a += v;
            }
        }
    }
}

// ---- encoder ---------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub input_side: usize,
    pub input_channels: usize,
    pub stem_channels: usize,
    pub blocks: usize,
    pub layers_per_block: usize,
    pub growth: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_side: 64,
            input_channels: 3,
            stem_channels: 16,
            blocks: 2,
            layers_per_block: 3,
            growth: 8,
        }
    }
}

/// Image encoder: stem conv (stride 2) + max-pool, then dense blocks joined
/// by 1x1-conv + pool transitions, global average pooling, and a dense layer
/// to [`EMBEDDING_DIM`] units.
#[derive(Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub params: Vec<Param>,
}

impl Encoder {
    pub fn build(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut side = check_extent("stem conv", conv_out(cfg.input_side, 3, 2, 1))?;
        side = pool_out("stem max-pool", side)?;

        let (ci, sc) = (cfg.input_channels, cfg.stem_channels);
        params.push(Param::he_uniform("stem.w", &[sc, ci, 3, 3], ci * 9, &mut rng));
        params.push(Param::zeros("stem.b", &[sc]));

        let mut channels = sc;
        for b in 0..cfg.blocks {
            for l in 0..cfg.layers_per_block {
                let cin = channels + l * cfg.growth;
                params.push(Param::he_uniform(
                    format!("block{b}.layer{l}.w"),
                    &[cfg.growth, cin, 3, 3],
                    cin * 9,
                    &mut rng,
                ));
                params.push(Param::zeros(format!("block{b}.layer{l}.b"), &[cfg.growth]));
            }
            channels += cfg.layers_per_block * cfg.growth;
            if b + 1 < cfg.blocks {
                let half = channels.div_ceil(2);
                params.push(Param::he_uniform(
                    format!("trans{b}.w"),
                    &[half, channels, 1, 1],
                    channels,
                    &mut rng,
                ));
                params.push(Param::zeros(format!("trans{b}.b"), &[half]));
                channels = half;
                side = pool_out(&format!("transition {b} max-pool"), side)?;
            }
        }
        params.push(Param::he_uniform(
            "embed.w",
            &[channels, EMBEDDING_DIM],
            channels,
            &mut rng,
        ));
        params.push(Param::zeros("embed.b", &[EMBEDDING_DIM]));
        Ok(Encoder { cfg, params })
    }

    /// Forward a `[n, c, side, side]` batch to `[n, 16]` embeddings using
    /// already-staged parameter leaves (see [`stage_params`]). Two calls with
    /// the same `param_ids` share weights, which is what makes the Siamese
    /// branches one encoder.
    pub fn forward(&self, tape: &mut Tape, input: TensorId, param_ids: &[TensorId]) -> Result<TensorId> {
        let mut pi = param_ids.iter().copied();
        let mut next = || pi.next().expect("param id count matches build order");
        let (w, b) = (next(), next());
        let mut x = tape.conv2d(input, w, b, 2, 1)?;
        x = tape.relu(x)?;
        x = tape.max_pool2d(x, 2)?;
        for blk in 0..self.cfg.blocks {
            for _ in 0..self.cfg.layers_per_block {
                let (w, bi) = (next(), next());
                let y = tape.conv2d(x, w, bi, 1, 1)?;
                let y = tape.relu(y)?;
                x = tape.concat(x, y)?;
            }
            if blk + 1 < self.cfg.blocks {
                let (w, bi) = (next(), next());
                x = tape.conv2d(x, w, bi, 1, 0)?;
                x = tape.relu(x)?;
                x = tape.max_pool2d(x, 2)?;
            }
        }
        let pooled = tape.global_avg_pool(x)?;
        let (w, bi) = (next(), next());
        let proj = tape.matmul(pooled, w)?;
        Ok(tape.add_bias(proj, bi)?)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Param::numel).sum()
    }

    /// Channels entering global average pooling.
    pub fn final_channels(&self) -> usize {
        self.params[self.params.len() - 2].shape[0]
    }
}

fn conv_out(side: usize, k: usize, stride: usize, pad: usize) -> isize {
    (side as isize + 2 * pad as isize - k as isize) / stride as isize + 1
}

fn check_extent(layer: &str, extent: isize) -> Result<usize> {
    if extent <= 0 {
        Err(NnError::SpatialCollapse {
            layer: layer.to_string(),
            extent,
        })
    } else {
        Ok(extent as usize)
    }
}

fn pool_out(layer: &str, side: usize) -> Result<usize> {
    check_extent(layer, (side / 2) as isize)
}

// ---- heads -----------------------------------------------------------------

/// Binary temporal-validity head: concat(two 16-d embeddings) -> dropout ->
/// dense(1) -> sigmoid.
pub struct PretextHead {
    pub params: Vec<Param>,
    pub dropout: f64,
}

impl PretextHead {
    pub fn build(dropout: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 2 * EMBEDDING_DIM;
        PretextHead {
            params: vec![
                Param::he_uniform("pretext.w", &[d, 1], d, &mut rng),
                Param::zeros("pretext.b", &[1]),
            ],
            dropout,
        }
    }

    /// `emb_a`, `emb_b`: `[n, 16]`. Returns `[n, 1]` probabilities in (0,1).
    pub fn forward(
        &self,
        tape: &mut Tape,
        emb_a: TensorId,
        emb_b: TensorId,
        param_ids: &[TensorId],
        train: bool,
        rng: &mut impl Rng,
    ) -> Result<TensorId> {
        for e in [emb_a, emb_b] {
            let s = tape.shape(e);
            if s.len() != 2 || s[1] != EMBEDDING_DIM {
                return Err(TensorError::InvalidShape {
                    op: "pretext_head",
                    shape: s.to_vec(),
                    reason: format!("expected [n, {EMBEDDING_DIM}] embedding"),
                }
                .into());
            }
        }
        let mut x = tape.concat(emb_a, emb_b)?;
        if train && self.dropout > 0.0 {
            x = tape.dropout(x, self.dropout, rng)?;
        }
        let z = tape.matmul(x, param_ids[0])?;
        let z = tape.add_bias(z, param_ids[1])?;
        Ok(tape.sigmoid(z)?)
    }
}

/// 4-way stage head: dropout -> dense(4) -> softmax.
#[derive(Debug)]
pub struct StageHead {
    pub params: Vec<Param>,
    pub dropout: f64,
}

pub const STAGE_CLASSES: usize = 4;

impl StageHead {
    pub fn build(dropout: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        StageHead {
            params: vec![
                Param::he_uniform("stage.w", &[EMBEDDING_DIM, STAGE_CLASSES], EMBEDDING_DIM, &mut rng),
                Param::zeros("stage.b", &[STAGE_CLASSES]),
            ],
            dropout,
        }
    }

    /// `emb`: `[n, 16]`. Returns `[n, 4]` probabilities summing to 1 per row.
    pub fn forward(
        &self,
        tape: &mut Tape,
        emb: TensorId,
        param_ids: &[TensorId],
        train: bool,
        rng: &mut impl Rng,
    ) -> Result<TensorId> {
        let s = tape.shape(emb);
        if s.len() != 2 || s[1] != EMBEDDING_DIM {
            return Err(TensorError::InvalidShape {
                op: "stage_head",
                shape: s.to_vec(),
                reason: format!("expected [n, {EMBEDDING_DIM}] embedding"),
            }
            .into());
        }
        let mut x = emb;
        if train && self.dropout > 0.0 {
            x = tape.dropout(x, self.dropout, rng)?;
        }
        let z = tape.matmul(x, param_ids[0])?;
        let z = tape.add_bias(z, param_ids[1])?;
        Ok(tape.softmax(z)?)
    }
}

// ---- optimizer -------------------------------------------------------------

/// Adam with bias correction; default parameters beta1=0.9, beta2=0.999,
/// eps=1e-8.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &[&Param]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    /// One update over `params`, in the same order `new` saw them.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Param>) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (pi, p) in params.into_iter().enumerate() {
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(NnError::NonFiniteGrad(p.name.clone()));
            }
            let (m, v) = (&mut self.m[pi], &mut self.v[pi]);
            for i in 0..p.data.len() {
                let g = p.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

// ---- checkpoints -----------------------------------------------------------

const CKPT_MAGIC: &str = "healstage-checkpoint v1";

/// Write parameters as a plain-text header (name, shape, f32 offset) followed
/// by a little-endian f32 binary section.
pub fn save_checkpoint(path: &Path, params: &[&Param]) -> Result<()> {
    let mut header = String::new();
    writeln!(header, "{CKPT_MAGIC}").unwrap();
    let mut offset = 0usize;
    for p in params {
        let dims: Vec<String> = p.shape.iter().map(|d| d.to_string()).collect();
        writeln!(header, "{} {} {}", p.name, dims.join("x"), offset).unwrap();
        offset += p.numel();
    }
    writeln!(header, "data {offset}").unwrap();
    let mut f = std::fs::File::create(path)?;
    f.write_all(header.as_bytes())?;
    let mut bytes = Vec::with_capacity(offset * 4);
    for p in params {
        for &v in &p.data {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    f.write_all(&bytes)?;
    Ok(())
}

/// Read a checkpoint back as (name, shape, values) records.
pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Vec<usize>, Vec<f64>)>> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    let bad = |m: &str| NnError::BadCheckpoint(format!("{m} in {}", path.display()));

    // header is everything up to and including the "data N" line
    let mut pos = 0usize;
    let mut lines: Vec<String> = Vec::new();
    loop {
        let end = raw[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("missing data marker"))?;
        let line = std::str::from_utf8(&raw[pos..pos + end])
            .map_err(|_| bad("non-utf8 header"))?
            .to_string();
        pos += end + 1;
        let done = line.starts_with("data ");
        lines.push(line);
        if done {
            break;
        }
    }
    if lines.first().map(String::as_str) != Some(CKPT_MAGIC) {
        return Err(bad("bad magic"));
    }
    let total: usize = lines
        .last()
        .unwrap()
        .strip_prefix("data ")
        .unwrap()
        .trim()
        .parse()
        .map_err(|_| bad("bad data count"))?;
    if raw.len() - pos < total * 4 {
        return Err(bad("truncated binary section"));
    }
    let mut out = Vec::new();
    for line in &lines[1..lines.len() - 1] {
        let mut it = line.split_whitespace();
        let name = it.next().ok_or_else(|| bad("short header line"))?.to_string();
        let shape: Vec<usize> = it
            .next()
            .ok_or_else(|| bad("missing shape"))?
            .split('x')
            .map(|d| d.parse().map_err(|_| bad("bad shape")))
            .collect::<Result<_>>()?;
        let offset: usize = it
            .next()
            .ok_or_else(|| bad("missing offset"))?
            .parse()
            .map_err(|_| bad("bad offset"))?;
        let n: usize = shape.iter().product();
        if offset + n > total {
            return Err(bad("offset past data section"));
        }
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let at = pos + (offset + i) * 4;
            let v = f32::from_le_bytes(raw[at..at + 4].try_into().unwrap());
            data.push(v as f64);
        }
        out.push((name, shape, data));
    }
    Ok(out)
}

/// Load a checkpoint into an existing parameter list, failing with the full
/// list of missing / extra / mis-shaped names on any architecture mismatch.
pub fn load_into(path: &Path, params: &mut [&mut Param]) -> Result<()> {
    let loaded = load_checkpoint(path)?;
    let mut missing = Vec::new();
    let mut mismatched = Vec::new();
    let mut used = vec![false; loaded.len()];
    for p in params.iter() {
        match loaded.iter().position(|(n, _, _)| n == &p.name) {
            None => missing.push(p.name.clone()),
            Some(i) => {
                used[i] = true;
                if loaded[i].1 != p.shape {
                    mismatched.push(p.name.clone());
                }
            }
        }
    }
    let extra: Vec<String> = loaded
        .iter()
        .zip(&used)
        .filter(|(_, &u)| !u)
        .map(|((n, _, _), _)| n.clone())
        .collect();
    if !(missing.is_empty() && extra.is_empty() && mismatched.is_empty()) {
        return Err(NnError::CheckpointMismatch {
            missing,
            extra,
            mismatched,
        });
    }
    for p in params.iter_mut() {
        let (_, _, data) = loaded.iter().find(|(n, _, _)| n == &p.name).unwrap();
        p.data.copy_from_slice(data);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check_op, OpKind};

    #[test]
    fn dense_block_channel_arithmetic() {
        for (layers, growth, cin) in [(3usize, 8usize, 16usize), (4, 12, 24), (2, 6, 10)] {
            let cfg = EncoderConfig {
                layers_per_block: layers,
                growth,
                stem_channels: cin,
                blocks: 1,
                ..Default::default()
            };
            let enc = Encoder::build(cfg, 0).unwrap();
            assert_eq!(enc.final_channels(), cin + layers * growth);
        }
    }

    #[test]
    fn default_encoder_embeds_to_16_under_1m_params() {
        let enc = Encoder::build(EncoderConfig::default(), 42).unwrap();
        assert!(enc.param_count() < 1_000_000, "params {}", enc.param_count());

        let mut tape = Tape::new();
        let n = 2 * 64 * 64 * 3;
        let data: Vec<f64> = (0..n).map(|i| (i % 17) as f64 / 17.0).collect();
        let x = tape.leaf(&[2, 3, 64, 64], data, false).unwrap();
        let ids = stage_params(&mut tape, &enc.params, false).unwrap();
        let emb = enc.forward(&mut tape, x, &ids).unwrap();
        assert_eq!(tape.shape(emb), &[2, EMBEDDING_DIM]);
        assert!(tape.value(emb).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn tiny_input_collapses_with_layer_name() {
        let cfg = EncoderConfig {
            input_side: 4,
            blocks: 3,
            ..Default::default()
        };
        let err = Encoder::build(cfg, 0).unwrap_err().to_string();
        assert!(err.contains("transition"), "{err}");
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let enc = Encoder::build(EncoderConfig { input_side: 16, ..Default::default() }, 3).unwrap();
        let data: Vec<f64> = (0..16 * 16 * 3).map(|i| (i % 31) as f64 / 31.0).collect();
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(&[1, 3, 16, 16], data.clone(), false).unwrap();
            let ids = stage_params(&mut tape, &enc.params, false).unwrap();
            let emb = enc.forward(&mut tape, x, &ids).unwrap();
            tape.value(emb).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn pretext_head_zero_weights_gives_half() {
        let mut head = PretextHead::build(0.3, 0);
        for p in &mut head.params {
            p.data.fill(0.0);
        }
        let mut tape = Tape::new();
        let a = tape.leaf(&[1, 16], vec![0.7; 16], false).unwrap();
        let b = tape.leaf(&[1, 16], vec![-1.3; 16], false).unwrap();
        let ids = stage_params(&mut tape, &head.params, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = head.forward(&mut tape, a, b, &ids, false, &mut rng).unwrap();
        assert!((tape.value(p)[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn pretext_head_is_order_sensitive_with_asymmetric_weights() {
        let mut head = PretextHead::build(0.0, 0);
        // first half weights 1, second half -1: swapping inputs flips the sign
        for i in 0..16 {
            head.params[0].data[i] = 1.0;
            head.params[0].data[16 + i] = -1.0;
        }
        let mut tape = Tape::new();
        let a = tape.leaf(&[1, 16], vec![0.3; 16], false).unwrap();
        let b = tape.leaf(&[1, 16], vec![0.9; 16], false).unwrap();
        let ids = stage_params(&mut tape, &head.params, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pab = head.forward(&mut tape, a, b, &ids, false, &mut rng).unwrap();
        let pba = head.forward(&mut tape, b, a, &ids, false, &mut rng).unwrap();
        let (vab, vba) = (tape.value(pab)[0], tape.value(pba)[0]);
        assert!((vab - vba).abs() > 1e-6, "{vab} vs {vba}");
        assert!(vab > 0.0 && vab < 1.0);
    }

    #[test]
    fn pretext_head_rejects_wrong_width() {
        let head = PretextHead::build(0.0, 0);
        let mut tape = Tape::new();
        let a = tape.leaf(&[1, 8], vec![0.0; 8], false).unwrap();
        let b = tape.leaf(&[1, 16], vec![0.0; 16], false).unwrap();
        let ids = stage_params(&mut tape, &head.params, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(head.forward(&mut tape, a, b, &ids, false, &mut rng).is_err());
    }

    #[test]
    fn stage_head_zero_weights_uniform_and_shift_invariant() {
        let mut head = StageHead::build(0.3, 0);
        for p in &mut head.params {
            p.data.fill(0.0);
        }
        let mut tape = Tape::new();
        let e = tape.leaf(&[1, 16], vec![0.4; 16], false).unwrap();
        let ids = stage_params(&mut tape, &head.params, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = head.forward(&mut tape, e, &ids, false, &mut rng).unwrap();
        for &v in tape.value(p) {
            assert!((v - 0.25).abs() < 1e-12);
        }

        // adding a constant to all logits (via the bias) keeps the argmax
        let mut head2 = StageHead::build(0.0, 1);
        head2.params[1].data = vec![0.1, -0.2, 0.3, 0.0];
        let argmax = |bias_shift: f64| {
            let mut h = StageHead {
                params: head2.params.clone(),
                dropout: 0.0,
            };
            for v in &mut h.params[1].data {
                *v += bias_shift;
            }
            let mut tape = Tape::new();
            let e = tape.leaf(&[1, 16], vec![0.4; 16], false).unwrap();
            let ids = stage_params(&mut tape, &h.params, false).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let p = h.forward(&mut tape, e, &ids, false, &mut rng).unwrap();
            let vals = tape.value(p);
            let sum: f64 = vals.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            (0..4).max_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap()).unwrap()
        };
        assert_eq!(argmax(0.0), argmax(5.0));
    }

    #[test]
    fn adam_first_step_magnitude() {
        let mut p = Param::zeros("w", &[1]);
        p.data[0] = 1.0;
        p.grad[0] = 1.0; // d(w^2/2)/dw at w=1
        let mut adam = Adam::new(0.001, &[&p]);
        adam.step([&mut p]).unwrap();
        assert!((p.data[0] - 0.999).abs() < 1e-6, "w1 = {}", p.data[0]);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn adam_zero_grad_no_move() {
        let mut p = Param::zeros("w", &[3]);
        p.data = vec![1.0, -2.0, 0.5];
        let before = p.data.clone();
        let mut adam = Adam::new(0.01, &[&p]);
        adam.step([&mut p]).unwrap();
        assert_eq!(p.data, before);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut p = Param::zeros("w", &[1]);
        p.data[0] = 1.0;
        let mut adam = Adam::new(0.1, &[&p]);
        for _ in 0..100 {
            p.zero_grad();
            p.grad[0] = 2.0 * p.data[0]; // d(w^2)/dw
            adam.step([&mut p]).unwrap();
        }
        assert!(p.data[0].abs() < 0.1, "w = {}", p.data[0]);
    }

    #[test]
    fn adam_rejects_non_finite_grad() {
        let mut p = Param::zeros("w", &[1]);
        p.grad[0] = f64::NAN;
        let mut adam = Adam::new(0.1, &[&p]);
        let err = adam.step([&mut p]).unwrap_err().to_string();
        assert!(err.contains("'w'"), "{err}");
    }

    #[test]
    fn loss_gradients_pass_grad_check() {
        for seed in 0..5 {
            let e = grad_check_op(OpKind::BceLoss, &[vec![6, 1]], seed).unwrap();
            assert!(e < 1e-4, "bce err {e}");
            let e = grad_check_op(OpKind::CceLoss, &[vec![5, 4]], seed).unwrap();
            assert!(e < 1e-4, "cce err {e}");
        }
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let dir = std::env::temp_dir().join(format!("healstage-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.ckpt");

        let enc = Encoder::build(EncoderConfig { input_side: 16, ..Default::default() }, 9).unwrap();
        let refs: Vec<&Param> = enc.params.iter().collect();
        save_checkpoint(&path, &refs).unwrap();

        let mut enc2 = Encoder::build(EncoderConfig { input_side: 16, ..Default::default() }, 10).unwrap();
        let mut refs2: Vec<&mut Param> = enc2.params.iter_mut().collect();
        load_into(&path, &mut refs2).unwrap();
        for (a, b) in enc.params.iter().zip(&enc2.params) {
            for (x, y) in a.data.iter().zip(&b.data) {
                // stored as f32
                assert!((x - y).abs() < 1e-6);
            }
        }

        // architecture mismatch reports names
        let mut enc3 = Encoder::build(
            EncoderConfig { input_side: 16, growth: 4, ..Default::default() },
            0,
        )
        .unwrap();
        let mut refs3: Vec<&mut Param> = enc3.params.iter_mut().collect();
        let err = load_into(&path, &mut refs3).unwrap_err().to_string();
        assert!(err.contains("mis-shaped") && err.contains("block0.layer0.w"), "{err}");
        std::fs::remove_dir_all(&dir).ok();
    }
}
