//! Set-prediction decoder.
//!
//! One stack of cross-attention layers is applied independently to each
//! requested feature level; the weights are shared, so "per-level decoding"
//! means running the same decoder several times with different key/value
//! sets. Each run turns M learned queries into M interaction hypotheses:
//! a confidence, a human box, an object box (all sigmoid-squashed), and a
//! unit-norm joint-space embedding for text classification.

use crate::encoders::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::{self, AttentionIds};
use crate::numcore::{GradSession, ParamId, ParamStore, Tape, Tensor};

#[derive(Debug, Clone)]
pub struct DecoderConfig {
    pub num_layers: usize,
    pub num_queries: usize,
    pub width: usize,
    pub text_width: usize,
    pub heads: usize,
    /// 1-based visual block indices to decode from, strictly increasing.
    pub levels: Vec<usize>,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            num_queries: 10,
            width: 32,
            text_width: 32,
            heads: 4,
            levels: vec![6, 9, 12],
        }
    }
}

/// Rank normalization of a level's position within the level set: position
/// `pos` of `k` maps to `(pos+1)/(k+1)`, strictly inside (0,1).
pub fn normalized_level(pos: usize, k: usize) -> Result<f64> {
    if pos >= k {
        return Err(Error::LevelPosOutOfRange { pos, num_levels: k });
    }
    Ok((pos + 1) as f64 / (k + 1) as f64)
}

struct LayerIds {
    ln1_w: ParamId,
    ln1_b: ParamId,
    self_attn: AttentionIds,
    ln2_w: ParamId,
    ln2_b: ParamId,
    cross_attn: AttentionIds,
    ln3_w: ParamId,
    ln3_b: ParamId,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
}

const LN_EPS: f64 = 1e-5;
const INIT_SIGMA: f64 = 0.02;

/// Outputs of box head: confidence plus two cxcywh boxes.
pub const BOX_HEAD_OUTPUTS: usize = 9;

pub struct HoiDecoder {
    cfg: DecoderConfig,
    queries: ParamId,
    layers: Vec<LayerIds>,
    box_w1: ParamId,
    box_b1: ParamId,
    box_w2: ParamId,
    box_b2: ParamId,
    cls_w: ParamId,
}

/// One level's decoded tensors, still attached to the step tape.
pub struct LevelOutput {
    /// 1-based visual block index this level reads from.
    pub level: usize,
    /// Rank of the level within the configured level set.
    pub level_pos: usize,
    /// Normalized level index in (0,1).
    pub lv: f64,
    /// `[M, 9]` sigmoided rows: confidence, human box, object box.
    pub boxes: Tensor,
    /// `[M, text_width]` unit-norm classification embeddings.
    pub embed: Tensor,
}

impl HoiDecoder {
    pub fn register(store: &mut ParamStore, cfg: DecoderConfig, seed: u64) -> Result<Self> {
        if cfg.levels.is_empty() || cfg.levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::BadLevelSet(cfg.levels.clone()));
        }
        if cfg.num_layers == 0 || cfg.num_queries == 0 {
            return Err(Error::InvalidConfig(
                "decoder needs at least one layer and one query".into(),
            ));
        }
        let c = cfg.width;
        let queries = store.add_gaussian("dec/queries", &[cfg.num_queries, c], seed, INIT_SIGMA)?;
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for i in 0..cfg.num_layers {
            let p = format!("dec/l{i}");
            layers.push(LayerIds {
                ln1_w: store.add_full(&format!("{p}/ln1_w"), &[c], 1.0)?,
                ln1_b: store.add_full(&format!("{p}/ln1_b"), &[c], 0.0)?,
                self_attn: AttentionIds::register(store, &format!("{p}/self"), c, seed, INIT_SIGMA)?,
                ln2_w: store.add_full(&format!("{p}/ln2_w"), &[c], 1.0)?,
                ln2_b: store.add_full(&format!("{p}/ln2_b"), &[c], 0.0)?,
                cross_attn: AttentionIds::register(store, &format!("{p}/cross"), c, seed, INIT_SIGMA)?,
                ln3_w: store.add_full(&format!("{p}/ln3_w"), &[c], 1.0)?,
                ln3_b: store.add_full(&format!("{p}/ln3_b"), &[c], 0.0)?,
                ffn_w1: store.add_gaussian(&format!("{p}/ffn_w1"), &[c, 4 * c], seed, INIT_SIGMA)?,
                ffn_b1: store.add_full(&format!("{p}/ffn_b1"), &[4 * c], 0.0)?,
                ffn_w2: store.add_gaussian(&format!("{p}/ffn_w2"), &[4 * c, c], seed, INIT_SIGMA)?,
                ffn_b2: store.add_full(&format!("{p}/ffn_b2"), &[c], 0.0)?,
            });
        }
        Ok(Self {
            queries,
            layers,
            box_w1: store.add_gaussian("head/box/w1", &[c, c], seed, INIT_SIGMA)?,
            box_b1: store.add_full("head/box/b1", &[c], 0.0)?,
            box_w2: store.add_gaussian("head/box/w2", &[c, BOX_HEAD_OUTPUTS], seed, INIT_SIGMA)?,
            box_b2: store.add_full("head/box/b2", &[BOX_HEAD_OUTPUTS], 0.0)?,
            cls_w: store.add_gaussian("head/cls/w", &[c, cfg.text_width], seed, INIT_SIGMA)?,
            cfg,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    /// Run the shared stack over every configured level of `maps` (indexed
    /// by block, so level L reads `maps[L-1]`).
    pub fn decode(
        &self,
        tape: &Tape,
        sess: &mut GradSession,
        store: &ParamStore,
        maps: &[FeatureMap],
    ) -> Result<Vec<LevelOutput>> {
        let k = self.cfg.levels.len();
        let mut outputs = Vec::with_capacity(k);
        for (pos, &level) in self.cfg.levels.iter().enumerate() {
            if level == 0 || level > maps.len() {
                return Err(Error::LevelOutOfRange {
                    level,
                    available: maps.len(),
                });
            }
            let map = &maps[level - 1];
            let hidden = self.run_stack(tape, sess, store, map)?;
            outputs.push(LevelOutput {
                level,
                level_pos: pos,
                lv: normalized_level(pos, k)?,
                boxes: self.box_head(tape, sess, store, &hidden)?,
                embed: self.cls_head(tape, sess, store, &hidden)?,
            });
        }
        Ok(outputs)
    }

    fn run_stack(
        &self,
        tape: &Tape,
        sess: &mut GradSession,
        store: &ParamStore,
        map: &FeatureMap,
    ) -> Result<Tensor> {
        let keys_pos = tape.constant(
            nn::sinusoidal_pos_enc(map.tokens, map.width),
            &[map.tokens, map.width],
        )?;
        let values = map.bind(tape);
        let keys = values.add(&keys_pos)?;
        let mut x = sess.leaf(store, self.queries);
        for layer in &self.layers {
            let ln = |sess: &mut GradSession, w, b, x: &Tensor| -> Result<Tensor> {
                x.layer_norm(&sess.leaf(store, w), &sess.leaf(store, b), LN_EPS)
            };
            let normed = ln(sess, layer.ln1_w, layer.ln1_b, &x)?;
            let self_at = layer.self_attn.bind(sess, store);
            x = x.add(&self_at.apply(&normed, &normed, self.cfg.heads)?)?;
            let normed = ln(sess, layer.ln2_w, layer.ln2_b, &x)?;
            let cross_at = layer.cross_attn.bind(sess, store);
            x = x.add(&cross_at.apply_kv(&normed, &keys, &values, self.cfg.heads)?)?;
            let normed = ln(sess, layer.ln3_w, layer.ln3_b, &x)?;
            let fed = nn::ffn(
                &normed,
                &sess.leaf(store, layer.ffn_w1),
                &sess.leaf(store, layer.ffn_b1),
                &sess.leaf(store, layer.ffn_w2),
                &sess.leaf(store, layer.ffn_b2),
            )?;
            x = x.add(&fed)?;
        }
        Ok(x)
    }

    fn box_head(
        &self,
        _tape: &Tape,
        sess: &mut GradSession,
        store: &ParamStore,
        hidden: &Tensor,
    ) -> Result<Tensor> {
        let pre = nn::ffn(
            hidden,
            &sess.leaf(store, self.box_w1),
            &sess.leaf(store, self.box_b1),
            &sess.leaf(store, self.box_w2),
            &sess.leaf(store, self.box_b2),
        )?;
        Ok(pre.sigmoid())
    }

    fn cls_head(
        &self,
        _tape: &Tape,
        sess: &mut GradSession,
        store: &ParamStore,
        hidden: &Tensor,
    ) -> Result<Tensor> {
        // Bias-free projection: a constant offset would survive the row
        // normalization and mask per-query variation in the embeddings.
        hidden.matmul(&sess.leaf(store, self.cls_w))?.l2_normalize()
    }
}

// ---- value-side snapshot ----

/// One decoded hypothesis with plain values, as consumed by the matcher,
/// the losses' pairing step, and inference.
#[derive(Debug, Clone)]
pub struct HoiPrediction {
    pub human_box: [f64; 4],
    pub object_box: [f64; 4],
    pub confidence: f64,
    /// Fused classification logits over the active class list.
    pub logits: Vec<f64>,
    pub level_pos: usize,
    pub lv: f64,
    pub query: usize,
}

/// All hypotheses for one image, flattened level-major: the prediction for
/// level position `p`, query `q` sits at row `p * num_queries + q`. Cost
/// matrices and loss assembly index rows in exactly this order.
#[derive(Debug, Clone)]
pub struct PredictionSet {
    pub predictions: Vec<HoiPrediction>,
    pub num_levels: usize,
    pub num_queries: usize,
}

impl PredictionSet {
    /// Snapshot decoded tensors plus their fused logits (one `[M, N]`
    /// tensor per level, aligned with `outputs`).
    pub fn from_outputs(outputs: &[LevelOutput], logits: &[Tensor]) -> Self {
        assert_eq!(outputs.len(), logits.len(), "one logit matrix per level");
        let mut predictions = Vec::new();
        let mut num_queries = 0;
        for (out, lg) in outputs.iter().zip(logits) {
            let m = out.boxes.shape()[0];
            num_queries = m;
            let n = lg.shape()[1];
            let bx = out.boxes.value();
            let lv_vals = lg.value();
            for q in 0..m {
                let row = &bx[q * 9..(q + 1) * 9];
                predictions.push(HoiPrediction {
                    confidence: row[0],
                    human_box: [row[1], row[2], row[3], row[4]],
                    object_box: [row[5], row[6], row[7], row[8]],
                    logits: lv_vals[q * n..(q + 1) * n].to_vec(),
                    level_pos: out.level_pos,
                    lv: out.lv,
                    query: q,
                });
            }
        }
        Self {
            predictions,
            num_levels: outputs.len(),
            num_queries,
        }
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }
}
