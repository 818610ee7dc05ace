//! Frozen toy encoders.
//!
//! Both encoders stand in for a pretrained contrastive vision/text model:
//! their weights are drawn once from a seeded Gaussian and never trained.
//! The visual side exposes the feature map after every block so the decoder
//! can tap intermediate levels; the text side encodes short token sequences
//! into unit-norm joint-space vectors and accepts pre-embedded rows so
//! learnable context tokens can be spliced into a sentence.

use std::collections::HashMap;
use std::path::Path;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::image::{ImageBuf, CHANNELS};
use crate::nn::{self, AttentionTensors};
use crate::numcore::{numel, Tape, Tensor};
use crate::rng;

// ---- frozen weight storage ----

/// One immutable weight array. `Rc` storage lets every forward pass enter it
/// onto a tape without copying.
#[derive(Debug, Clone)]
pub(crate) struct FrozenTensor {
    data: Rc<[f64]>,
    shape: Vec<usize>,
}

impl FrozenTensor {
    fn gaussian(seed: u64, name: &str, shape: &[usize], sigma: f64) -> Self {
        let mut rng = rng::seeded_rng(seed, &format!("frozen/{name}"));
        Self {
            data: rng::gaussian(&mut rng, numel(shape), sigma).into(),
            shape: shape.to_vec(),
        }
    }

    fn full(shape: &[usize], fill: f64) -> Self {
        Self {
            data: vec![fill; numel(shape)].into(),
            shape: shape.to_vec(),
        }
    }

    fn bind(&self, tape: &Tape) -> Tensor {
        tape.constant_shared(self.data.clone(), &self.shape)
            .expect("frozen shapes are construction-validated")
    }

    fn visit(&self, out: &mut Vec<Rc<[f64]>>) {
        out.push(self.data.clone());
    }
}

struct FrozenAttention {
    wq: FrozenTensor,
    wk: FrozenTensor,
    wv: FrozenTensor,
    wo: FrozenTensor,
    bias: FrozenTensor,
}

impl FrozenAttention {
    fn new(seed: u64, prefix: &str, dim: usize, sigma: f64) -> Self {
        let mat = |n: &str| FrozenTensor::gaussian(seed, &format!("{prefix}/{n}"), &[dim, dim], sigma);
        Self {
            wq: mat("wq"),
            wk: mat("wk"),
            wv: mat("wv"),
            wo: mat("wo"),
            bias: FrozenTensor::full(&[dim], 0.0),
        }
    }

    fn bind(&self, tape: &Tape) -> AttentionTensors {
        let b = || self.bias.bind(tape);
        AttentionTensors {
            wq: self.wq.bind(tape),
            bq: b(),
            wk: self.wk.bind(tape),
            bk: b(),
            wv: self.wv.bind(tape),
            bv: b(),
            wo: self.wo.bind(tape),
            bo: b(),
        }
    }

    fn visit(&self, out: &mut Vec<Rc<[f64]>>) {
        for t in [&self.wq, &self.wk, &self.wv, &self.wo, &self.bias] {
            t.visit(out);
        }
    }
}

/// Pre-LN transformer block with frozen weights: layer norms at identity,
/// Gaussian attention/FFN matrices, zero biases.
struct FrozenBlock {
    ln1_w: FrozenTensor,
    ln1_b: FrozenTensor,
    attn: FrozenAttention,
    ln2_w: FrozenTensor,
    ln2_b: FrozenTensor,
    ffn_w1: FrozenTensor,
    ffn_b1: FrozenTensor,
    ffn_w2: FrozenTensor,
    ffn_b2: FrozenTensor,
}

const LN_EPS: f64 = 1e-5;

impl FrozenBlock {
    fn new(seed: u64, prefix: &str, dim: usize, sigma: f64) -> Self {
        let hidden = 4 * dim;
        Self {
            ln1_w: FrozenTensor::full(&[dim], 1.0),
            ln1_b: FrozenTensor::full(&[dim], 0.0),
            attn: FrozenAttention::new(seed, &format!("{prefix}/attn"), dim, sigma),
            ln2_w: FrozenTensor::full(&[dim], 1.0),
            ln2_b: FrozenTensor::full(&[dim], 0.0),
            ffn_w1: FrozenTensor::gaussian(seed, &format!("{prefix}/ffn_w1"), &[dim, hidden], sigma),
            ffn_b1: FrozenTensor::full(&[hidden], 0.0),
            ffn_w2: FrozenTensor::gaussian(seed, &format!("{prefix}/ffn_w2"), &[hidden, dim], sigma),
            ffn_b2: FrozenTensor::full(&[dim], 0.0),
        }
    }

    fn forward(&self, tape: &Tape, x: &Tensor, heads: usize) -> Result<Tensor> {
        let normed = x.layer_norm(&self.ln1_w.bind(tape), &self.ln1_b.bind(tape), LN_EPS)?;
        let attended = self.attn.bind(tape).apply(&normed, &normed, heads)?;
        let x = x.add(&attended)?;
        let normed = x.layer_norm(&self.ln2_w.bind(tape), &self.ln2_b.bind(tape), LN_EPS)?;
        let fed = nn::ffn(
            &normed,
            &self.ffn_w1.bind(tape),
            &self.ffn_b1.bind(tape),
            &self.ffn_w2.bind(tape),
            &self.ffn_b2.bind(tape),
        )?;
        x.add(&fed)
    }

    fn visit(&self, out: &mut Vec<Rc<[f64]>>) {
        for t in [&self.ln1_w, &self.ln1_b] {
            t.visit(out);
        }
        self.attn.visit(out);
        for t in [
            &self.ln2_w,
            &self.ln2_b,
            &self.ffn_w1,
            &self.ffn_b1,
            &self.ffn_w2,
            &self.ffn_b2,
        ] {
            t.visit(out);
        }
    }
}

fn fingerprint_arrays(arrays: &[Rc<[f64]>]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for a in arrays {
        h = h.wrapping_mul(0x1000_0000_01b3) ^ rng::fingerprint(a);
    }
    h
}

// ---- visual encoder ----

/// One block's output sequence: `tokens` rows of width `width`, class slot
/// first, then patches in raster order.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub tokens: usize,
    pub width: usize,
    pub data: Rc<[f64]>,
}

impl FeatureMap {
    pub fn bind(&self, tape: &Tape) -> Tensor {
        tape.constant_shared(self.data.clone(), &[self.tokens, self.width])
            .expect("map shape is internally consistent")
    }
}

#[derive(Debug, Clone)]
pub struct VisualConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub num_blocks: usize,
    pub heads: usize,
    pub seed: u64,
}

impl Default for VisualConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            width: 32,
            num_blocks: 12,
            heads: 4,
            seed: 0,
        }
    }
}

pub struct VisualEncoder {
    cfg: VisualConfig,
    patch_w: FrozenTensor,
    patch_b: FrozenTensor,
    class_token: FrozenTensor,
    pos: FrozenTensor,
    blocks: Vec<FrozenBlock>,
}

const FROZEN_SIGMA: f64 = 0.02;

impl VisualEncoder {
    pub fn new(cfg: VisualConfig) -> Result<Self> {
        if cfg.image_size == 0 || cfg.patch_size == 0 || cfg.image_size % cfg.patch_size != 0 {
            return Err(Error::InvalidConfig(format!(
                "image size {} not divisible by patch size {}",
                cfg.image_size, cfg.patch_size
            )));
        }
        let tokens = cfg.num_tokens();
        let patch_dim = cfg.patch_size * cfg.patch_size * CHANNELS;
        let seed = cfg.seed;
        Ok(Self {
            patch_w: FrozenTensor::gaussian(seed, "vis/patch_w", &[patch_dim, cfg.width], FROZEN_SIGMA),
            patch_b: FrozenTensor::full(&[cfg.width], 0.0),
            class_token: FrozenTensor::gaussian(seed, "vis/class", &[1, cfg.width], FROZEN_SIGMA),
            pos: FrozenTensor::gaussian(seed, "vis/pos", &[tokens, cfg.width], FROZEN_SIGMA),
            blocks: (0..cfg.num_blocks)
                .map(|i| FrozenBlock::new(seed, &format!("vis/blk{i}"), cfg.width, FROZEN_SIGMA))
                .collect(),
            cfg,
        })
    }

    pub fn config(&self) -> &VisualConfig {
        &self.cfg
    }

    /// Raster-order patch rows, each flattened y-major then x then channel.
    fn patchify(&self, img: &ImageBuf) -> Vec<f64> {
        let ps = self.cfg.patch_size;
        let per_side = self.cfg.image_size / ps;
        let mut out = Vec::with_capacity(per_side * per_side * ps * ps * CHANNELS);
        for py in 0..per_side {
            for px in 0..per_side {
                for y in 0..ps {
                    for x in 0..ps {
                        for c in 0..CHANNELS {
                            out.push(img.get(px * ps + x, py * ps + y, c));
                        }
                    }
                }
            }
        }
        out
    }

    /// Run the frozen tower, returning every block's output map in order
    /// (index b holds the map after block b+1).
    pub fn encode_image(&self, img: &ImageBuf) -> Result<Vec<FeatureMap>> {
        if img.width() != self.cfg.image_size || img.height() != self.cfg.image_size {
            return Err(Error::ImageDims {
                expected: self.cfg.image_size * self.cfg.image_size * CHANNELS,
                got: img.width() * img.height() * CHANNELS,
            });
        }
        let ps = self.cfg.patch_size;
        let per_side = self.cfg.image_size / ps;
        let num_patches = per_side * per_side;
        let tape = Tape::new();
        let patches = tape.constant(self.patchify(img), &[num_patches, ps * ps * CHANNELS])?;
        let embedded = nn::linear(&patches, &self.patch_w.bind(&tape), &self.patch_b.bind(&tape))?;
        let seq = Tensor::concat(&[self.class_token.bind(&tape), embedded], 0)?;
        let mut x = seq.add(&self.pos.bind(&tape))?;
        let mut maps = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            x = blk.forward(&tape, &x, self.cfg.heads)?;
            maps.push(FeatureMap {
                tokens: self.cfg.num_tokens(),
                width: self.cfg.width,
                data: x.value().to_vec().into(),
            });
        }
        Ok(maps)
    }

    /// Stable digest of every frozen array, for before/after-training checks.
    pub fn weights_fingerprint(&self) -> u64 {
        let mut arrays = Vec::new();
        for t in [&self.patch_w, &self.patch_b, &self.class_token, &self.pos] {
            t.visit(&mut arrays);
        }
        for b in &self.blocks {
            b.visit(&mut arrays);
        }
        fingerprint_arrays(&arrays)
    }
}

impl VisualConfig {
    pub fn num_tokens(&self) -> usize {
        let per_side = self.image_size / self.patch_size;
        per_side * per_side + 1
    }
}

// ---- token vocabulary ----

/// Whitespace tokenizer over a fixed word list; line index is the token id.
#[derive(Debug, Clone)]
pub struct TokenVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl TokenVocab {
    pub fn from_lines(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut index = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let tok = line.trim();
            if tok.is_empty() {
                return Err(Error::InvalidVocabulary(format!("empty token at line {}", i + 1)));
            }
            if index.insert(tok.to_string(), i).is_some() {
                return Err(Error::InvalidVocabulary(format!("duplicate token {tok:?}")));
            }
            tokens.push(tok.to_string());
        }
        if tokens.is_empty() {
            return Err(Error::InvalidVocabulary("no tokens".into()));
        }
        Ok(Self { tokens, index })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_lines(&std::fs::read_to_string(path)?)
    }

    /// Word list committed with the crate; covers the builtin vocabulary,
    /// the builtin description bank, and the prompt scaffold words.
    pub fn builtin() -> Self {
        Self::from_lines(include_str!("../fixtures/tokens.txt")).expect("builtin token list parses")
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn tokenize(&self, phrase: &str) -> Result<Vec<usize>> {
        phrase.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

// ---- text encoder ----

/// One slice of a sentence: either frozen-table lookups by id or rows already
/// on the caller's tape (the learnable context tokens).
pub enum TokenSlot {
    Id(usize),
    Embedded(Tensor),
}

#[derive(Debug, Clone)]
pub struct TextConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            width: 32,
            depth: 2,
            heads: 4,
            max_len: 16,
            seed: 0,
        }
    }
}

pub struct TextEncoder {
    cfg: TextConfig,
    vocab_size: usize,
    table: FrozenTensor,
    pos: FrozenTensor,
    blocks: Vec<FrozenBlock>,
}

impl TextEncoder {
    pub fn new(cfg: TextConfig, vocab_size: usize) -> Result<Self> {
        if vocab_size == 0 {
            return Err(Error::InvalidVocabulary("no tokens".into()));
        }
        let seed = cfg.seed;
        Ok(Self {
            vocab_size,
            table: FrozenTensor::gaussian(seed, "txt/table", &[vocab_size, cfg.width], FROZEN_SIGMA),
            pos: FrozenTensor::gaussian(seed, "txt/pos", &[cfg.max_len, cfg.width], FROZEN_SIGMA),
            blocks: (0..cfg.depth)
                .map(|i| FrozenBlock::new(seed, &format!("txt/blk{i}"), cfg.width, FROZEN_SIGMA))
                .collect(),
            cfg,
        })
    }

    pub fn config(&self) -> &TextConfig {
        &self.cfg
    }

    /// Run the transformer over a sentence assembled from frozen lookups
    /// and caller-supplied embedded rows, returning the per-position
    /// representations `[len, width]` on `tape`; gradient flows only into
    /// the embedded slots.
    pub fn encode_positions(&self, tape: &Tape, slots: &[TokenSlot]) -> Result<Tensor> {
        let mut rows: Vec<Tensor> = Vec::new();
        let mut len = 0usize;
        for slot in slots {
            match slot {
                TokenSlot::Id(id) => {
                    if *id >= self.vocab_size {
                        return Err(Error::UnknownToken(format!("id {id}")));
                    }
                    let start = id * self.cfg.width;
                    let row = tape.constant(
                        self.table.data[start..start + self.cfg.width].to_vec(),
                        &[1, self.cfg.width],
                    )?;
                    rows.push(row);
                    len += 1;
                }
                TokenSlot::Embedded(t) => {
                    if t.shape().len() != 2 || t.shape()[1] != self.cfg.width {
                        return Err(Error::InvalidShape {
                            op: "encode_slots",
                            expected: "[k, width] embedded rows",
                            got: t.shape().to_vec(),
                        });
                    }
                    len += t.shape()[0];
                    rows.push(t.clone());
                }
            }
        }
        if len == 0 {
            return Err(Error::EmptyTokenSequence);
        }
        if len > self.cfg.max_len {
            return Err(Error::SequenceTooLong {
                len,
                max: self.cfg.max_len,
            });
        }
        let seq = Tensor::concat(&rows, 0)?;
        let pos = tape.constant(
            self.pos.data[..len * self.cfg.width].to_vec(),
            &[len, self.cfg.width],
        )?;
        let mut x = seq.add(&pos)?;
        for blk in &self.blocks {
            x = blk.forward(tape, &x, self.cfg.heads)?;
        }
        Ok(x)
    }

    /// Sequence embedding: mean pooling over all positions, projected to
    /// the unit sphere. Callers that need a subsequence pooled (to keep
    /// shared scaffold tokens from washing out the informative ones) use
    /// `encode_positions` and pool themselves.
    pub fn encode_slots(&self, tape: &Tape, slots: &[TokenSlot]) -> Result<Tensor> {
        let x = self.encode_positions(tape, slots)?;
        x.mean_axis(0)?.reshape(&[1, self.cfg.width])?.l2_normalize()
    }

    /// Pure value-path encoding of a plain id sequence.
    pub fn encode_ids(&self, ids: &[usize]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let slots: Vec<TokenSlot> = ids.iter().map(|&i| TokenSlot::Id(i)).collect();
        Ok(self.encode_slots(&tape, &slots)?.value().to_vec())
    }

    pub fn weights_fingerprint(&self) -> u64 {
        let mut arrays = Vec::new();
        self.table.visit(&mut arrays);
        self.pos.visit(&mut arrays);
        for b in &self.blocks {
            b.visit(&mut arrays);
        }
        fingerprint_arrays(&arrays)
    }
}
