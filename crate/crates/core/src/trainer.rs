//! Run orchestration: configuration, the optimization loop, checkpoints,
//! inference, and ablation sweeps.
//!
//! The learnable surface is deliberately small: decoder weights, prediction
//! heads, the prompt context tokens, and the two fusion scales. Both
//! encoders are frozen at construction and never enter the parameter store,
//! so nothing can update them by construction; a fingerprint check at the
//! end of every run documents that.
//!
//! Determinism contract: a run is a pure function of (config, dataset).
//! Batch composition at step `s` comes from its own derived stream, so it
//! depends on nothing but the seed and `s`; resuming from a checkpoint at
//! step `k` therefore replays the exact trajectory the uninterrupted run
//! would have taken from step `k` on, bit for bit.

use std::cell::RefCell;
use std::collections::{HashMap, VecDeque};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderConfig, HoiDecoder, LevelOutput, PredictionSet};
use crate::encoders::{TextConfig, TextEncoder, TokenVocab, VisualConfig, VisualEncoder};
use crate::error::{Error, Result};
use crate::evalkit::{self, Detection, EvalReport, SMALL_BUCKET_MAX};
use crate::losses::{total_loss, LossInputs, LossReport, FOCAL_ALPHA, FOCAL_GAMMA};
use crate::matching::{
    build_cost_matrix, gt_distance, hungarian, Assignment, DistanceType, MatchStrategy,
    MatchWeights,
};
use crate::numcore::{sigmoid, AdamW, GradSession, NamedArrays, ParamId, ParamStore, Tape, Tensor};
use crate::rng::seeded_rng;
use crate::semantics::{
    fuse_logits, ClassSet, DescriptionBank, TextBank, TextBankBuilder, Vocabulary,
    NUM_CONJUNCT_TOKENS, NUM_PREFIX_TOKENS,
};
use crate::synthgen::{Dataset, SceneRecord, Split};

/// Patch edge of the frozen visual encoder.
pub const PATCH_SIZE: usize = 8;
/// Block count of the frozen visual encoder; decoding levels index into
/// these blocks 1-based.
pub const VISUAL_BLOCKS: usize = 12;
/// Depth of the frozen text encoder.
pub const TEXT_DEPTH: usize = 2;
/// Longest token sequence the text encoder accepts.
pub const TEXT_MAX_LEN: usize = 16;
/// Initial value of the learned name-logit scale. Cosine similarities live
/// in [-1, 1], far too flat for a focal objective to bite, so the scale
/// starts at a contrastive-style inverse temperature and is learned from
/// there.
pub const ALPHA_HOI_INIT: f64 = 10.0;
/// Initial value of the learned description-logit scale.
pub const ALPHA_B_INIT: f64 = 1.0;
/// Init spread of the learnable prompt context tokens.
const CTX_SIGMA: f64 = 0.02;
const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
const ADAM_EPS: f64 = 1e-8;

// ---- configuration ----

/// Everything a run needs, serializable as a single JSON document. Every
/// field has a default, so `{}` is a valid config; unknown keys are
/// rejected rather than silently ignored.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Loss and matching-cost weights.
    pub weights: MatchWeights,
    pub distance: DistanceType,
    pub strategy: MatchStrategy,
    /// Exponent on confidence in the final detection score.
    pub score_gamma: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    /// 1-based visual blocks to decode from, strictly increasing.
    pub levels: Vec<usize>,
    pub num_queries: usize,
    pub decoder_layers: usize,
    /// Channel width shared by both encoders and the decoder.
    pub width: usize,
    pub heads: usize,
    pub image_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Optimizer steps to run; the desk-scale stand-in for an epoch count.
    pub steps: usize,
    pub batch_size: usize,
    /// When false the description branch does not exist: its fusion scale
    /// is never created and logits come from name prompts alone.
    pub use_descriptions: bool,
    /// Detections kept per image at inference.
    pub top_k: usize,
    pub seed: u64,
    /// Seed of the frozen encoders, independent of the run seed.
    pub encoder_seed: u64,
    pub data_dir: Option<PathBuf>,
    pub bank_path: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    /// Reference preset: box/IoU/class/distance weights 5/2/5/5, score
    /// exponent 2, focal (2, 0.25), levels {6, 9, 12}, 4 decoder layers,
    /// learning rate 1e-4. The full-scale schedule this preset belongs to
    /// (tens of epochs over a large corpus) is documented here as the
    /// source of the numbers, not an executed target; `steps` and
    /// `batch_size` default to a desk-scale run.
    fn default() -> Self {
        Self {
            weights: MatchWeights::default(),
            distance: DistanceType::Absolute,
            strategy: MatchStrategy::LowSmall,
            score_gamma: 2.0,
            focal_gamma: FOCAL_GAMMA,
            focal_alpha: FOCAL_ALPHA,
            levels: vec![6, 9, 12],
            num_queries: 10,
            decoder_layers: 4,
            width: 32,
            heads: 4,
            image_size: 32,
            lr: 1e-4,
            weight_decay: 1e-4,
            steps: 200,
            batch_size: 8,
            use_descriptions: true,
            top_k: 20,
            seed: 7,
            encoder_seed: 0,
            data_dir: None,
            bank_path: None,
            out_dir: None,
        }
    }
}

impl RunConfig {
    /// The reference preset; same as `Default`.
    pub fn paper() -> Self {
        Self::default()
    }

    /// Desk-scale preset: identical to the reference preset except for a
    /// learning rate that lets a 200-step run move the box heads, which
    /// the reference rate cannot do in so few steps.
    pub fn toy() -> Self {
        Self {
            lr: 1e-2,
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        let w = &self.weights;
        for (name, v) in [
            ("lambda_box", w.lambda_box),
            ("lambda_iou", w.lambda_iou),
            ("lambda_cls", w.lambda_cls),
            ("lambda_d", w.lambda_d),
            ("score_gamma", self.score_gamma),
            ("focal_gamma", self.focal_gamma),
            ("weight_decay", self.weight_decay),
        ] {
            if !v.is_finite() || v < 0.0 {
                return fail(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !self.focal_alpha.is_finite() || !(0.0..=1.0).contains(&self.focal_alpha) {
            return fail(format!("focal_alpha must lie in [0, 1], got {}", self.focal_alpha));
        }
        if self.levels.is_empty() || self.levels.windows(2).any(|p| p[0] >= p[1]) {
            return fail(format!("levels must be non-empty and strictly increasing, got {:?}", self.levels));
        }
        if self.levels[0] == 0 || *self.levels.last().unwrap() > VISUAL_BLOCKS {
            return fail(format!(
                "levels must lie in 1..={VISUAL_BLOCKS}, got {:?}",
                self.levels
            ));
        }
        if self.num_queries == 0 || self.decoder_layers == 0 {
            return fail("num_queries and decoder_layers must be at least 1".into());
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return fail(format!(
                "width must be a positive multiple of heads, got width {} heads {}",
                self.width, self.heads
            ));
        }
        if self.image_size == 0 || self.image_size % PATCH_SIZE != 0 {
            return fail(format!(
                "image_size must be a positive multiple of {PATCH_SIZE}, got {}",
                self.image_size
            ));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return fail("steps and batch_size must be at least 1".into());
        }
        if self.top_k == 0 {
            return fail("top_k must be at least 1".into());
        }
        Ok(())
    }
}

// ---- model assembly ----

/// The assembled model: frozen encoders, learnable decoder and prompt
/// state, and a cache of visual features keyed by image id.
pub struct Pipeline {
    cfg: RunConfig,
    vocab: Vocabulary,
    tokens: TokenVocab,
    bank: DescriptionBank,
    visual: VisualEncoder,
    text: TextEncoder,
    /// `[num_interactions, width]` description embeddings, encoded once at
    /// construction; per-step banks slice rows out of this.
    desc_matrix: Rc<[f64]>,
    store: ParamStore,
    decoder: HoiDecoder,
    ctx_pre: ParamId,
    ctx_con: ParamId,
    alpha_hoi: ParamId,
    alpha_b: Option<ParamId>,
    train_classes: ClassSet,
    maps_cache: RefCell<HashMap<usize, Rc<Vec<crate::encoders::FeatureMap>>>>,
}

impl Pipeline {
    pub fn new(
        cfg: RunConfig,
        vocab: Vocabulary,
        bank: DescriptionBank,
        tokens: TokenVocab,
    ) -> Result<Self> {
        cfg.validate()?;
        vocab.validate()?;
        let visual = VisualEncoder::new(VisualConfig {
            image_size: cfg.image_size,
            patch_size: PATCH_SIZE,
            width: cfg.width,
            num_blocks: VISUAL_BLOCKS,
            heads: cfg.heads,
            seed: cfg.encoder_seed,
        })?;
        let text = TextEncoder::new(
            TextConfig {
                width: cfg.width,
                depth: TEXT_DEPTH,
                heads: cfg.heads,
                max_len: TEXT_MAX_LEN,
                seed: cfg.encoder_seed,
            },
            tokens.len(),
        )?;
        let desc_matrix =
            TextBankBuilder::new(&text, &vocab, &bank, &tokens)?.description_matrix()?;

        let mut store = ParamStore::new();
        let decoder = HoiDecoder::register(
            &mut store,
            DecoderConfig {
                num_layers: cfg.decoder_layers,
                num_queries: cfg.num_queries,
                width: cfg.width,
                text_width: cfg.width,
                heads: cfg.heads,
                levels: cfg.levels.clone(),
            },
            cfg.seed,
        )?;
        let ctx_pre = store.add_gaussian(
            "ctx/pre",
            &[NUM_PREFIX_TOKENS, cfg.width],
            cfg.seed,
            CTX_SIGMA,
        )?;
        let ctx_con = store.add_gaussian(
            "ctx/con",
            &[NUM_CONJUNCT_TOKENS, cfg.width],
            cfg.seed,
            CTX_SIGMA,
        )?;
        let alpha_hoi = store.add("fusion/alpha_hoi", &[1], vec![ALPHA_HOI_INIT])?;
        let alpha_b = if cfg.use_descriptions {
            Some(store.add("fusion/alpha_b", &[1], vec![ALPHA_B_INIT])?)
        } else {
            None
        };
        let train_classes = ClassSet::seen(&vocab);
        Ok(Self {
            cfg,
            vocab,
            tokens,
            bank,
            visual,
            text,
            desc_matrix,
            store,
            decoder,
            ctx_pre,
            ctx_con,
            alpha_hoi,
            alpha_b,
            train_classes,
            maps_cache: RefCell::new(HashMap::new()),
        })
    }

    /// Assemble against a dataset's vocabulary, loading the description
    /// bank from `cfg.bank_path` when set and falling back to the builtin
    /// bank otherwise.
    pub fn for_dataset(cfg: RunConfig, data: &Dataset) -> Result<Self> {
        let bank = match &cfg.bank_path {
            Some(p) => DescriptionBank::load(p, &data.vocab)?,
            None => DescriptionBank::builtin(&data.vocab)?,
        };
        Self::new(cfg, data.vocab.clone(), bank, TokenVocab::builtin())
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn train_classes(&self) -> &ClassSet {
        &self.train_classes
    }

    /// Combined fingerprint of both frozen encoders.
    pub fn frozen_fingerprint(&self) -> u64 {
        self.visual.weights_fingerprint() ^ self.text.weights_fingerprint().rotate_left(32)
    }

    fn maps_for(&self, scene: &SceneRecord) -> Result<Rc<Vec<crate::encoders::FeatureMap>>> {
        if let Some(maps) = self.maps_cache.borrow().get(&scene.image_id) {
            return Ok(maps.clone());
        }
        let maps = Rc::new(self.visual.encode_image(&scene.image)?);
        self.maps_cache
            .borrow_mut()
            .insert(scene.image_id, maps.clone());
        Ok(maps)
    }

    /// Build both text matrices and the fusion scales on the given tape.
    /// Name rows are differentiable w.r.t. the context tokens; description
    /// rows are constants sliced from the precomputed matrix.
    pub fn build_bank(
        &self,
        tape: &Tape,
        sess: &mut GradSession,
        classes: &ClassSet,
    ) -> Result<TextBank> {
        let builder = TextBankBuilder::new(&self.text, &self.vocab, &self.bank, &self.tokens)?;
        let ctx_pre = sess.leaf(&self.store, self.ctx_pre);
        let ctx_con = sess.leaf(&self.store, self.ctx_con);
        let t_hoi = builder.hoi_matrix(tape, &ctx_pre, &ctx_con, classes)?;
        let width = self.cfg.width;
        let mut flat = Vec::with_capacity(classes.len() * width);
        for &id in classes.ids() {
            flat.extend_from_slice(&self.desc_matrix[id * width..(id + 1) * width]);
        }
        let t_b = tape.constant(flat, &[classes.len(), width])?;
        Ok(TextBank {
            t_hoi,
            t_b,
            alpha_hoi: sess.leaf(&self.store, self.alpha_hoi),
            alpha_b: self.alpha_b.map(|id| sess.leaf(&self.store, id)),
        })
    }

    /// Decode one image against an already-built bank: per-level outputs
    /// plus the fused `[M, N]` logit matrix for each level.
    pub fn forward_image(
        &self,
        tape: &Tape,
        sess: &mut GradSession,
        scene: &SceneRecord,
        bank: &TextBank,
    ) -> Result<(Vec<LevelOutput>, Vec<Tensor>)> {
        let maps = self.maps_for(scene)?;
        let outputs = self.decoder.decode(tape, sess, &self.store, &maps)?;
        let logits = outputs
            .iter()
            .map(|o| fuse_logits(&o.embed, bank))
            .collect::<Result<Vec<_>>>()?;
        Ok((outputs, logits))
    }

    /// Full per-image objective. The bank must cover exactly the training
    /// classes. Matching is solved per image unless a fixed assignment is
    /// supplied (useful when probing the loss as a function of the
    /// parameters, where the assignment must be held constant).
    pub fn image_loss(
        &self,
        tape: &Tape,
        sess: &mut GradSession,
        scene: &SceneRecord,
        bank: &TextBank,
        fixed: Option<&Assignment>,
    ) -> Result<(Tensor, LossReport, Assignment)> {
        if self.train_classes.is_empty() {
            return Err(Error::InvalidConfig(
                "vocabulary has no seen interactions to train on".into(),
            ));
        }
        if bank.t_hoi.shape()[0] != self.train_classes.len() {
            return Err(Error::InvalidConfig(
                "text bank rows must match the training class list".into(),
            ));
        }
        let (outputs, logits) = self.forward_image(tape, sess, scene, bank)?;
        let assignment = match fixed {
            Some(a) => a.clone(),
            None => {
                let preds = PredictionSet::from_outputs(&outputs, &logits);
                let cost = build_cost_matrix(
                    &preds,
                    &scene.hois,
                    &self.train_classes,
                    &self.cfg.weights,
                    self.cfg.distance,
                    self.cfg.strategy,
                )?;
                hungarian(&cost)?
            }
        };
        let (loss, report) = total_loss(
            tape,
            &LossInputs {
                outputs: &outputs,
                logits: &logits,
                gts: &scene.hois,
                assignment: &assignment,
                classes: &self.train_classes,
                weights: &self.cfg.weights,
                distance: self.cfg.distance,
                strategy: self.cfg.strategy,
                focal_gamma: self.cfg.focal_gamma,
                focal_alpha: self.cfg.focal_alpha,
            },
        )?;
        Ok((loss, report, assignment))
    }
}

// ---- training loop ----

#[derive(Debug)]
struct StepOutcome {
    report: LossReport,
    /// (level position, absolute center distance) per matched pair.
    pairs: Vec<(usize, f64)>,
}

fn mean_report(image_reports: &[(usize, LossReport)]) -> LossReport {
    let n = image_reports.len().max(1) as f64;
    let mut out = LossReport {
        box_: 0.0,
        iou: 0.0,
        cls: 0.0,
        d: 0.0,
        total: 0.0,
        matched: 0,
    };
    for (_, r) in image_reports {
        out.box_ += r.box_;
        out.iou += r.iou;
        out.cls += r.cls;
        out.d += r.d;
        out.total += r.total;
        out.matched += r.matched;
    }
    out.box_ /= n;
    out.iou /= n;
    out.cls /= n;
    out.d /= n;
    out.total /= n;
    out
}

fn train_step(
    pipe: &mut Pipeline,
    opt: &mut AdamW,
    train: &Split,
    step: usize,
) -> Result<StepOutcome> {
    let batch_size = pipe.cfg.batch_size;
    let num_queries = pipe.cfg.num_queries;
    let mut rng = seeded_rng(pipe.cfg.seed, &format!("step/{step}"));
    let ids: Vec<usize> = (0..batch_size)
        .map(|_| rng.gen_range(0..train.len()))
        .collect();

    let tape = Tape::new();
    let mut sess = GradSession::new(&tape);
    let bank = pipe.build_bank(&tape, &mut sess, &pipe.train_classes)?;
    let mut loss_sum: Option<Tensor> = None;
    let mut pairs = Vec::new();
    let mut image_reports: Vec<(usize, LossReport)> = Vec::with_capacity(ids.len());
    for &i in &ids {
        let scene = &train.scenes[i];
        let (loss, report, assignment) = pipe.image_loss(&tape, &mut sess, scene, &bank, None)?;
        for &(row, col) in &assignment.pairs {
            let g = gt_distance(&scene.hois[col], DistanceType::Absolute);
            pairs.push((row / num_queries, g));
        }
        image_reports.push((scene.image_id, report));
        loss_sum = Some(match loss_sum {
            Some(acc) => acc.add(&loss)?,
            None => loss,
        });
    }
    let loss = loss_sum
        .expect("batch_size >= 1 guarantees at least one image")
        .scale(1.0 / ids.len() as f64);
    if !loss.item()?.is_finite() {
        let dump = serde_json::to_string(&image_reports)
            .unwrap_or_else(|_| "per-image reports unavailable".into());
        return Err(Error::NonFiniteLoss { step, dump });
    }
    loss.backward()?;
    sess.harvest(&mut pipe.store);
    opt.step(&mut pipe.store)?;
    Ok(StepOutcome {
        report: mean_report(&image_reports),
        pairs,
    })
}

/// Fraction of matched pairs whose membership in the lowest level
/// coincides with membership in the small-distance bucket. A matcher that
/// conditions on level and distance concentrates small-distance pairs on
/// the lowest level, driving the fraction toward one; an unconditioned
/// matcher spreads them across levels.
pub fn level_distance_agreement(pairs: &[(usize, f64)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let hits = pairs
        .iter()
        .filter(|&&(level_pos, g)| (level_pos == 0) == (g <= SMALL_BUCKET_MAX))
        .count();
    hits as f64 / pairs.len() as f64
}

#[derive(Serialize)]
struct StepLine<'a> {
    step: usize,
    #[serde(flatten)]
    report: &'a LossReport,
}

#[derive(Serialize)]
struct RunSummary<'a> {
    steps: usize,
    agreement: f64,
    #[serde(rename = "final")]
    last: Option<&'a LossReport>,
}

/// Per-run results that matter beyond the artifacts on disk.
pub struct TrainOutcome {
    /// Batch-mean loss report per executed step.
    pub reports: Vec<LossReport>,
    /// Level-distance agreement over the final epoch's matched pairs.
    pub agreement: f64,
    /// Steps executed by this invocation (fewer than `cfg.steps` when
    /// resuming).
    pub steps_run: usize,
}

/// Run the optimization loop and write `log.jsonl`, `checkpoint.bin`,
/// `config.json`, and `summary.json` into `out_dir`. With `resume`, the
/// checkpoint's parameters and optimizer state are restored first and the
/// loop continues from the recorded step.
pub fn train(
    cfg: &RunConfig,
    data: &Dataset,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<(Pipeline, TrainOutcome)> {
    let mut pipe = Pipeline::for_dataset(cfg.clone(), data)?;
    if data.train.is_empty() {
        return Err(Error::InvalidConfig("training split is empty".into()));
    }
    let mut opt = AdamW::new(cfg.lr, ADAM_BETAS, ADAM_EPS, cfg.weight_decay);
    let start = match resume {
        Some(path) => load_checkpoint(&mut pipe.store, &mut opt, path)?,
        None => 0,
    };
    if start > cfg.steps {
        return Err(Error::InvalidConfig(format!(
            "checkpoint is already at step {start}, beyond the configured {} steps",
            cfg.steps
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let frozen_before = pipe.frozen_fingerprint();

    let epoch_steps = data.train.len().div_ceil(cfg.batch_size).max(1);
    let mut window: VecDeque<Vec<(usize, f64)>> = VecDeque::with_capacity(epoch_steps);
    let mut reports = Vec::with_capacity(cfg.steps - start);
    let mut log = String::new();
    for step in start..cfg.steps {
        let outcome = match train_step(&mut pipe, &mut opt, &data.train, step) {
            Err(Error::NonFiniteLoss { step, dump }) => {
                let dump_path = out_dir.join(format!("step{step}.nan.json"));
                std::fs::write(&dump_path, dump)?;
                return Err(Error::NonFiniteLoss {
                    step,
                    dump: dump_path.display().to_string(),
                });
            }
            other => other?,
        };
        let line = serde_json::to_string(&StepLine {
            step,
            report: &outcome.report,
        })
        .expect("loss report serializes");
        log.push_str(&line);
        log.push('\n');
        if window.len() == epoch_steps {
            window.pop_front();
        }
        window.push_back(outcome.pairs);
        reports.push(outcome.report);
    }
    assert_eq!(
        frozen_before,
        pipe.frozen_fingerprint(),
        "frozen encoder weights changed during training"
    );

    let final_pairs: Vec<(usize, f64)> = window.iter().flatten().copied().collect();
    let agreement = level_distance_agreement(&final_pairs);
    std::fs::write(out_dir.join("log.jsonl"), &log)?;
    save_checkpoint(&out_dir.join("checkpoint.bin"), &pipe.store, &opt, cfg.steps)?;
    let cfg_json = serde_json::to_string_pretty(cfg).expect("config serializes");
    std::fs::write(out_dir.join("config.json"), cfg_json + "\n")?;
    let summary = serde_json::to_string_pretty(&RunSummary {
        steps: cfg.steps,
        agreement,
        last: reports.last(),
    })
    .expect("summary serializes");
    std::fs::write(out_dir.join("summary.json"), summary + "\n")?;

    Ok((
        pipe,
        TrainOutcome {
            reports,
            agreement,
            steps_run: cfg.steps - start,
        },
    ))
}

// ---- checkpoints ----

/// Write every learnable value plus optimizer state into one container:
/// `param/<name>` entries in registration order, `opt/m/<name>` and
/// `opt/v/<name>` moment estimates (present once the optimizer has
/// stepped), the scalar `opt/t`, and the completed `step` count.
pub fn save_checkpoint(path: &Path, store: &ParamStore, opt: &AdamW, step: usize) -> Result<()> {
    let mut arrays = NamedArrays::new();
    for p in store.iter() {
        arrays.push(&format!("param/{}", p.name), &p.shape, p.data.clone())?;
    }
    let (m, v) = opt.moments();
    if !m.is_empty() {
        for (p, moment) in store.iter().zip(m) {
            arrays.push(&format!("opt/m/{}", p.name), &p.shape, moment.clone())?;
        }
        for (p, moment) in store.iter().zip(v) {
            arrays.push(&format!("opt/v/{}", p.name), &p.shape, moment.clone())?;
        }
    }
    arrays.push("opt/t", &[1], vec![opt.steps_taken() as f64])?;
    arrays.push("step", &[1], vec![step as f64])?;
    arrays.write_to(path)
}

/// Restore parameters and optimizer state saved by `save_checkpoint` into
/// an already-registered store. Every registered parameter must be present
/// with its exact shape. Returns the step count the checkpoint was taken
/// at.
pub fn load_checkpoint(store: &mut ParamStore, opt: &mut AdamW, path: &Path) -> Result<usize> {
    let mut arrays = NamedArrays::read_from(path)?;
    fn take_checked(
        arrays: &mut NamedArrays,
        name: &str,
        expected: &[usize],
        owner: &str,
    ) -> Result<Vec<f64>> {
        let (shape, data) = arrays
            .take(name)
            .ok_or_else(|| Error::CheckpointMissing(name.to_string()))?;
        if shape != expected {
            return Err(Error::CheckpointShape {
                name: owner.to_string(),
                expected: expected.to_vec(),
                found: shape,
            });
        }
        Ok(data)
    }
    for p in store.iter_mut() {
        p.data = take_checked(&mut arrays, &format!("param/{}", p.name), &p.shape, &p.name)?;
        p.grad = None;
    }
    let t = take_checked(&mut arrays, "opt/t", &[1], "opt/t")?[0] as u64;
    if t > 0 {
        let metas: Vec<(String, Vec<usize>)> = store
            .iter()
            .map(|p| (p.name.clone(), p.shape.clone()))
            .collect();
        let mut m = Vec::with_capacity(metas.len());
        let mut v = Vec::with_capacity(metas.len());
        for (name, shape) in &metas {
            m.push(take_checked(&mut arrays, &format!("opt/m/{name}"), shape, name)?);
        }
        for (name, shape) in &metas {
            v.push(take_checked(&mut arrays, &format!("opt/v/{name}"), shape, name)?);
        }
        opt.restore(t, m, v);
    }
    let step = take_checked(&mut arrays, "step", &[1], "step")?[0] as usize;
    Ok(step)
}

// ---- inference ----

/// Score every decoded candidate against every class in the vocabulary and
/// keep the `top_k` highest-scoring detections per image. Output order is
/// deterministic: scores descend within an image and the candidate's
/// (level, query, class) order breaks ties.
pub fn infer(pipe: &Pipeline, split: &Split) -> Result<Vec<Detection>> {
    let classes = ClassSet::all(&pipe.vocab);
    let mut dets = Vec::new();
    for scene in &split.scenes {
        let tape = Tape::new();
        let mut sess = GradSession::frozen(&tape);
        let bank = pipe.build_bank(&tape, &mut sess, &classes)?;
        let (outputs, logits) = pipe.forward_image(&tape, &mut sess, scene, &bank)?;
        let preds = PredictionSet::from_outputs(&outputs, &logits);
        let mut cands = Vec::with_capacity(preds.len() * classes.len());
        for p in &preds.predictions {
            for (pos, &logit) in p.logits.iter().enumerate() {
                let score =
                    evalkit::final_score(sigmoid(logit), p.confidence, pipe.cfg.score_gamma);
                cands.push(Detection {
                    image_id: scene.image_id,
                    human_box: p.human_box,
                    object_box: p.object_box,
                    interaction: classes.id_at(pos),
                    score,
                });
            }
        }
        cands.sort_by(|a, b| b.score.total_cmp(&a.score));
        cands.truncate(pipe.cfg.top_k);
        dets.extend(cands);
    }
    Ok(dets)
}

/// Evaluate detections against a dataset's test split.
pub fn evaluate_detections(data: &Dataset, dets: &[Detection]) -> Result<EvalReport> {
    evalkit::evaluate(
        dets,
        &data.test.gt_images(),
        &data.vocab,
        &data.train_counts,
    )
}

// ---- ablations ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Levels,
    LambdaD,
    Distance,
    Prompts,
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "levels" => Ok(Self::Levels),
            "lambda_d" => Ok(Self::LambdaD),
            "distance_type" => Ok(Self::Distance),
            "prompts" => Ok(Self::Prompts),
            other => Err(Error::InvalidConfig(format!(
                "unknown ablation axis {other:?}; expected levels, lambda_d, distance_type, or prompts"
            ))),
        }
    }
}

impl AblationAxis {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Levels => "levels",
            Self::LambdaD => "lambda_d",
            Self::Distance => "distance_type",
            Self::Prompts => "prompts",
        }
    }

    /// The variant configs this axis sweeps, derived from a base config.
    /// Everything off-axis (seed included) is shared, so differences in the
    /// results are attributable to the axis alone.
    pub fn variants(&self, base: &RunConfig) -> Vec<(String, RunConfig)> {
        match self {
            Self::Levels => [vec![9, 12], vec![6, 9, 12], vec![3, 6, 9, 12]]
                .into_iter()
                .map(|levels| {
                    let label = format!(
                        "levels={}",
                        levels.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",")
                    );
                    let mut cfg = base.clone();
                    cfg.levels = levels;
                    (label, cfg)
                })
                .collect(),
            Self::LambdaD => [0.0, 5.0, 10.0]
                .into_iter()
                .map(|lambda_d| {
                    let mut cfg = base.clone();
                    cfg.weights.lambda_d = lambda_d;
                    (format!("lambda_d={lambda_d}"), cfg)
                })
                .collect(),
            Self::Distance => {
                let mut out = Vec::new();
                for distance in [DistanceType::Absolute, DistanceType::Relative] {
                    for strategy in [MatchStrategy::LowSmall, MatchStrategy::LowLarge] {
                        let mut cfg = base.clone();
                        cfg.distance = distance;
                        cfg.strategy = strategy;
                        out.push((format!("{distance}/{strategy}"), cfg));
                    }
                }
                out
            }
            Self::Prompts => {
                let mut names_only = base.clone();
                names_only.use_descriptions = false;
                let mut fused = base.clone();
                fused.use_descriptions = true;
                vec![
                    ("names_only".to_string(), names_only),
                    ("names_plus_descriptions".to_string(), fused),
                ]
            }
        }
    }
}

#[derive(Serialize)]
pub struct AblationRow {
    pub name: String,
    pub agreement: f64,
    pub report: EvalReport,
}

fn dir_name(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '-' })
        .collect()
}

/// Train, infer, and evaluate every variant of one axis. Each variant's
/// artifacts land in a subdirectory of `out_dir`; the comparison table is
/// written as both JSON and aligned text.
pub fn ablate(
    base: &RunConfig,
    data: &Dataset,
    axis: AblationAxis,
    out_dir: &Path,
) -> Result<Vec<AblationRow>> {
    if data.test.is_empty() {
        return Err(Error::InvalidConfig(
            "ablation needs a non-empty test split to evaluate on".into(),
        ));
    }
    let mut rows = Vec::new();
    for (name, cfg) in axis.variants(base) {
        let dir = out_dir.join(dir_name(&name));
        let (pipe, outcome) = train(&cfg, data, &dir, None)?;
        let dets = infer(&pipe, &data.test)?;
        evalkit::write_detections_jsonl(&dir.join("dets.jsonl"), &dets)?;
        let report = evaluate_detections(data, &dets)?;
        rows.push(AblationRow {
            name,
            agreement: outcome.agreement,
            report,
        });
    }
    let json = serde_json::to_string_pretty(&rows).expect("ablation rows serialize");
    std::fs::write(out_dir.join("ablation.json"), json + "\n")?;
    std::fs::write(out_dir.join("ablation.txt"), render_ablation_table(axis, &rows))?;
    Ok(rows)
}

/// Aligned text table over the mAP splits plus the agreement statistic.
pub fn render_ablation_table(axis: AblationAxis, rows: &[AblationRow]) -> String {
    let name_width = rows
        .iter()
        .map(|r| r.name.len())
        .chain(std::iter::once("variant".len()))
        .max()
        .unwrap_or(7);
    let mut out = String::new();
    let _ = writeln!(out, "axis: {}", axis.name());
    let _ = writeln!(
        out,
        "{:<name_width$}  {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "variant", "full", "seen", "unseen", "rare", "nonrare", "small", "large", "agree"
    );
    for row in rows {
        let r = &row.report;
        let _ = writeln!(
            out,
            "{:<name_width$}  {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
            row.name,
            r.full.map,
            r.seen.map,
            r.unseen.map,
            r.rare.map,
            r.non_rare.map,
            r.small.map,
            r.large.map,
            row.agreement
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate, GeneratorSpec};
    use tempfile::tempdir;

    fn tiny_dataset(train: usize, test: usize, seed: u64) -> Dataset {
        let spec = GeneratorSpec {
            train_scenes: train,
            test_scenes: test,
            ..GeneratorSpec::default()
        };
        generate(&spec, &Vocabulary::builtin(), seed).unwrap()
    }

    /// Small fast config for mechanics tests; width stays a multiple of
    /// heads and the level set exercises more than one level.
    fn tiny_config() -> RunConfig {
        RunConfig {
            levels: vec![6, 12],
            num_queries: 4,
            decoder_layers: 2,
            width: 16,
            lr: 1e-2,
            steps: 6,
            batch_size: 2,
            ..RunConfig::default()
        }
    }

    #[test]
    fn reference_preset_is_the_default() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.weights.lambda_box, 5.0);
        assert_eq!(cfg.weights.lambda_iou, 2.0);
        assert_eq!(cfg.weights.lambda_cls, 5.0);
        assert_eq!(cfg.weights.lambda_d, 5.0);
        assert_eq!(cfg.score_gamma, 2.0);
        assert_eq!(cfg.focal_gamma, 2.0);
        assert_eq!(cfg.focal_alpha, 0.25);
        assert_eq!(cfg.levels, vec![6, 9, 12]);
        assert_eq!(cfg.decoder_layers, 4);
        assert_eq!(cfg.num_queries, 10);
        assert_eq!(cfg.lr, 1e-4);
        assert!(cfg.use_descriptions);
        assert_eq!(cfg.top_k, 20);
        let toy = RunConfig::toy();
        assert_eq!(toy.lr, 1e-2);
        assert_eq!(toy.levels, cfg.levels);
        assert_eq!(toy.weights.lambda_d, cfg.weights.lambda_d);
        cfg.validate().unwrap();
        toy.validate().unwrap();
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let cases: Vec<(&str, Box<dyn Fn(&mut RunConfig)>)> = vec![
            ("width not multiple of heads", Box::new(|c| c.width = 30)),
            ("zero width", Box::new(|c| c.width = 0)),
            ("empty levels", Box::new(|c| c.levels = vec![])),
            ("level zero", Box::new(|c| c.levels = vec![0, 6])),
            ("level beyond blocks", Box::new(|c| c.levels = vec![6, 13])),
            ("non-increasing levels", Box::new(|c| c.levels = vec![6, 6])),
            ("zero lr", Box::new(|c| c.lr = 0.0)),
            ("negative lambda", Box::new(|c| c.weights.lambda_d = -1.0)),
            ("nan gamma", Box::new(|c| c.score_gamma = f64::NAN)),
            ("alpha above one", Box::new(|c| c.focal_alpha = 1.5)),
            ("zero steps", Box::new(|c| c.steps = 0)),
            ("zero batch", Box::new(|c| c.batch_size = 0)),
            ("zero top_k", Box::new(|c| c.top_k = 0)),
            ("zero queries", Box::new(|c| c.num_queries = 0)),
            ("zero layers", Box::new(|c| c.decoder_layers = 0)),
            ("image size off patch grid", Box::new(|c| c.image_size = 30)),
        ];
        for (what, poke) in cases {
            let mut cfg = RunConfig::default();
            poke(&mut cfg);
            assert!(cfg.validate().is_err(), "{what} passed validation");
        }
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"learning_rate": 0.1}"#).is_err());
        let cfg: RunConfig = serde_json::from_str("{}").unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.lr, 1e-4);
        let cfg: RunConfig = serde_json::from_str(r#"{"lr": 0.5, "seed": 3}"#).unwrap();
        assert_eq!(cfg.lr, 0.5);
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.batch_size, 8);
    }

    #[test]
    fn init_is_identical_across_loss_weights() {
        let data = tiny_dataset(4, 0, 11);
        let mut a_cfg = tiny_config();
        a_cfg.weights.lambda_d = 0.0;
        let mut b_cfg = tiny_config();
        b_cfg.weights.lambda_d = 5.0;
        let a = Pipeline::for_dataset(a_cfg, &data).unwrap();
        let b = Pipeline::for_dataset(b_cfg, &data).unwrap();
        assert_eq!(a.store.len(), b.store.len());
        for (pa, pb) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.shape, pb.shape);
            let bits_a: Vec<u64> = pa.data.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = pb.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "init of {} depends on loss weights", pa.name);
        }
    }

    #[test]
    fn name_only_configuration_has_no_description_scale() {
        let data = tiny_dataset(2, 0, 12);
        let mut cfg = tiny_config();
        cfg.use_descriptions = false;
        let pipe = Pipeline::for_dataset(cfg, &data).unwrap();
        assert!(pipe.store.lookup("fusion/alpha_b").is_none());
        assert!(pipe.store.lookup("fusion/alpha_hoi").is_some());
        assert!(pipe.alpha_b.is_none());
    }

    #[test]
    fn loss_decreases_on_the_reference_preset() {
        let data = tiny_dataset(48, 2, 7);
        let cfg = RunConfig {
            seed: 7,
            steps: 200,
            ..RunConfig::paper()
        };
        let dir = tempdir().unwrap();
        let (_, outcome) = train(&cfg, &data, dir.path(), None).unwrap();
        assert_eq!(outcome.reports.len(), 200);
        let early: f64 = outcome.reports[..5].iter().map(|r| r.total).sum::<f64>() / 5.0;
        let late: f64 = outcome.reports[195..].iter().map(|r| r.total).sum::<f64>() / 5.0;
        assert!(
            late <= 0.5 * early,
            "loss fell only from {early:.4} to {late:.4}"
        );
    }

    #[test]
    fn training_runs_are_bitwise_reproducible() {
        let data = tiny_dataset(6, 0, 13);
        let cfg = tiny_config();
        let dir_a = tempdir().unwrap();
        let dir_b = tempdir().unwrap();
        train(&cfg, &data, dir_a.path(), None).unwrap();
        train(&cfg, &data, dir_b.path(), None).unwrap();
        for file in ["log.jsonl", "checkpoint.bin", "summary.json"] {
            let a = std::fs::read(dir_a.path().join(file)).unwrap();
            let b = std::fs::read(dir_b.path().join(file)).unwrap();
            assert_eq!(a, b, "{file} differs between identical runs");
        }
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_trajectory() {
        let data = tiny_dataset(6, 0, 14);
        let full_cfg = RunConfig {
            steps: 10,
            ..tiny_config()
        };
        let half_cfg = RunConfig {
            steps: 5,
            ..tiny_config()
        };
        let dir_full = tempdir().unwrap();
        let dir_half = tempdir().unwrap();
        let dir_rest = tempdir().unwrap();
        train(&full_cfg, &data, dir_full.path(), None).unwrap();
        train(&half_cfg, &data, dir_half.path(), None).unwrap();
        let (_, rest) = train(
            &full_cfg,
            &data,
            dir_rest.path(),
            Some(&dir_half.path().join("checkpoint.bin")),
        )
        .unwrap();
        assert_eq!(rest.steps_run, 5);
        let full_ckpt = std::fs::read(dir_full.path().join("checkpoint.bin")).unwrap();
        let rest_ckpt = std::fs::read(dir_rest.path().join("checkpoint.bin")).unwrap();
        assert_eq!(full_ckpt, rest_ckpt, "resumed trajectory diverged");
        let full_log = std::fs::read_to_string(dir_full.path().join("log.jsonl")).unwrap();
        let half_log = std::fs::read_to_string(dir_half.path().join("log.jsonl")).unwrap();
        let rest_log = std::fs::read_to_string(dir_rest.path().join("log.jsonl")).unwrap();
        assert_eq!(full_log, half_log + &rest_log);
    }

    #[test]
    fn frozen_encoders_never_move_and_learnables_do() {
        let data = tiny_dataset(6, 0, 15);
        let cfg = tiny_config();
        let fresh = Pipeline::for_dataset(cfg.clone(), &data).unwrap();
        let fp = fresh.frozen_fingerprint();
        let init_queries = fresh.store.get(fresh.store.lookup("dec/queries").unwrap());
        let init_data = init_queries.data.clone();
        let dir = tempdir().unwrap();
        let (trained, _) = train(&cfg, &data, dir.path(), None).unwrap();
        assert_eq!(fp, trained.frozen_fingerprint());
        let after = trained.store.get(trained.store.lookup("dec/queries").unwrap());
        assert_ne!(init_data, after.data, "training left the queries untouched");
    }

    #[test]
    fn checkpoint_round_trips_parameters_and_optimizer() {
        let data = tiny_dataset(4, 0, 16);
        let cfg = RunConfig {
            steps: 4,
            ..tiny_config()
        };
        let dir = tempdir().unwrap();
        let (trained, _) = train(&cfg, &data, dir.path(), None).unwrap();
        let mut restored = Pipeline::for_dataset(cfg, &data).unwrap();
        let mut opt = AdamW::new(1.0, ADAM_BETAS, ADAM_EPS, 0.0);
        let step =
            load_checkpoint(&mut restored.store, &mut opt, &dir.path().join("checkpoint.bin"))
                .unwrap();
        assert_eq!(step, 4);
        assert_eq!(opt.steps_taken(), 4);
        for (a, b) in trained.store.iter().zip(restored.store.iter()) {
            assert_eq!(a.name, b.name);
            let bits_a: Vec<u64> = a.data.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "{} did not round trip", a.name);
        }
    }

    #[test]
    fn checkpoint_shape_and_missing_entries_are_reported() {
        let data = tiny_dataset(4, 0, 17);
        let cfg = RunConfig {
            steps: 2,
            ..tiny_config()
        };
        let dir = tempdir().unwrap();
        train(&cfg, &data, dir.path(), None).unwrap();
        let ckpt = dir.path().join("checkpoint.bin");

        let mut narrow_cfg = cfg.clone();
        narrow_cfg.num_queries = 3;
        let mut narrow = Pipeline::for_dataset(narrow_cfg, &data).unwrap();
        let mut opt = AdamW::new(1.0, ADAM_BETAS, ADAM_EPS, 0.0);
        let err = load_checkpoint(&mut narrow.store, &mut opt, &ckpt).unwrap_err();
        assert!(
            matches!(err, Error::CheckpointShape { ref name, .. } if name == "dec/queries"),
            "unexpected error {err:?}"
        );

        let mut names_only_cfg = cfg.clone();
        names_only_cfg.use_descriptions = false;
        let dir2 = tempdir().unwrap();
        train(&names_only_cfg, &data, dir2.path(), None).unwrap();
        let mut fused = Pipeline::for_dataset(cfg, &data).unwrap();
        let err = load_checkpoint(
            &mut fused.store,
            &mut opt,
            &dir2.path().join("checkpoint.bin"),
        )
        .unwrap_err();
        assert!(
            matches!(err, Error::CheckpointMissing(ref name) if name == "param/fusion/alpha_b"),
            "unexpected error {err:?}"
        );
    }

    #[test]
    fn non_finite_loss_aborts_with_the_step_context() {
        // an exploded logit scale overflows the focal sum to infinity while
        // every matching cost stays finite (softmax saturates instead), so
        // this lands in the trainer's own guard rather than the matcher's
        let data = tiny_dataset(4, 0, 18);
        let mut pipe = Pipeline::for_dataset(tiny_config(), &data).unwrap();
        let id = pipe.store.lookup("fusion/alpha_hoi").unwrap();
        pipe.store.get_mut(id).data[0] = 1e307;
        let mut opt = AdamW::new(1e-2, ADAM_BETAS, ADAM_EPS, 0.0);
        let err = train_step(&mut pipe, &mut opt, &data.train, 0).unwrap_err();
        match err {
            Error::NonFiniteLoss { step, dump } => {
                assert_eq!(step, 0);
                assert!(dump.contains("total"), "dump carries no reports: {dump}");
            }
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }

        // a NaN parameter poisons the cost matrix first; the matcher's own
        // guard rejects it before any update can land in the store
        let mut pipe = Pipeline::for_dataset(tiny_config(), &data).unwrap();
        let id = pipe.store.lookup("dec/queries").unwrap();
        pipe.store.get_mut(id).data[0] = f64::NAN;
        let err = train_step(&mut pipe, &mut opt, &data.train, 0).unwrap_err();
        assert!(matches!(err, Error::NonFiniteCost { .. }), "got {err:?}");
    }

    #[test]
    fn agreement_counts_level_bucket_coincidence() {
        assert_eq!(level_distance_agreement(&[]), 0.0);
        // lowest level + small distance and upper level + large distance agree
        assert_eq!(level_distance_agreement(&[(0, 0.1)]), 1.0);
        assert_eq!(level_distance_agreement(&[(2, 0.9)]), 1.0);
        // crossed combinations disagree
        assert_eq!(level_distance_agreement(&[(1, 0.1)]), 0.0);
        assert_eq!(level_distance_agreement(&[(0, 0.9)]), 0.0);
        let mixed = [(0, 0.2), (1, 0.8), (0, 0.9), (2, 0.1)];
        assert_eq!(level_distance_agreement(&mixed), 0.5);
    }

    #[test]
    fn inference_is_deterministic_and_respects_top_k() {
        let data = tiny_dataset(6, 3, 19);
        let cfg = RunConfig {
            top_k: 5,
            ..tiny_config()
        };
        let dir = tempdir().unwrap();
        let (pipe, _) = train(&cfg, &data, dir.path(), None).unwrap();
        let dets_a = infer(&pipe, &data.test).unwrap();
        let dets_b = infer(&pipe, &data.test).unwrap();
        assert_eq!(
            serde_json::to_string(&dets_a).unwrap(),
            serde_json::to_string(&dets_b).unwrap()
        );
        // 2 levels x 4 queries x 24 classes candidates per image, so every
        // image fills its quota exactly
        assert_eq!(dets_a.len(), 3 * 5);
        for scene in &data.test.scenes {
            let per: Vec<&Detection> = dets_a
                .iter()
                .filter(|d| d.image_id == scene.image_id)
                .collect();
            assert_eq!(per.len(), 5);
            for pair in per.windows(2) {
                assert!(pair[0].score >= pair[1].score);
            }
            for d in per {
                assert!(d.interaction < data.vocab.num_interactions());
                assert!((0.0..=1.0).contains(&d.score));
            }
        }
    }

    #[test]
    fn ablation_axes_enumerate_the_documented_variants() {
        let base = tiny_config();
        let levels = AblationAxis::Levels.variants(&base);
        assert_eq!(levels.len(), 3);
        assert_eq!(levels[0].1.levels, vec![9, 12]);
        assert_eq!(levels[1].1.levels, vec![6, 9, 12]);
        assert_eq!(levels[2].1.levels, vec![3, 6, 9, 12]);
        let lambda = AblationAxis::LambdaD.variants(&base);
        assert_eq!(
            lambda.iter().map(|(_, c)| c.weights.lambda_d).collect::<Vec<_>>(),
            vec![0.0, 5.0, 10.0]
        );
        assert_eq!(AblationAxis::Distance.variants(&base).len(), 4);
        let prompts = AblationAxis::Prompts.variants(&base);
        assert!(!prompts[0].1.use_descriptions && prompts[1].1.use_descriptions);
        for (label, cfg) in levels.iter().chain(&lambda).chain(&prompts) {
            assert!(!label.is_empty());
            assert_eq!(cfg.seed, base.seed, "variants must share the seed");
        }
        assert_eq!("levels".parse::<AblationAxis>().unwrap(), AblationAxis::Levels);
        assert_eq!(
            "distance_type".parse::<AblationAxis>().unwrap(),
            AblationAxis::Distance
        );
        assert!("nms".parse::<AblationAxis>().is_err());
    }

    #[test]
    fn ablate_writes_a_report_per_variant() {
        let data = tiny_dataset(8, 3, 20);
        let cfg = RunConfig {
            steps: 3,
            ..tiny_config()
        };
        let dir = tempdir().unwrap();
        let rows = ablate(&cfg, &data, AblationAxis::Prompts, dir.path()).unwrap();
        assert_eq!(rows.len(), 2);
        let table = std::fs::read_to_string(dir.path().join("ablation.txt")).unwrap();
        assert!(table.contains("names_only") && table.contains("names_plus_descriptions"));
        assert!(table.contains("axis: prompts"));
        let json = std::fs::read_to_string(dir.path().join("ablation.json")).unwrap();
        assert!(serde_json::from_str::<serde_json::Value>(&json).unwrap().is_array());
        for (label, _) in AblationAxis::Prompts.variants(&cfg) {
            let sub = dir.path().join(dir_name(&label));
            assert!(sub.join("checkpoint.bin").exists());
            assert!(sub.join("dets.jsonl").exists());
        }
        for row in &rows {
            assert!((0.0..=1.0).contains(&row.agreement));
            assert!(row.report.full.map.is_finite());
        }
    }

    #[test]
    fn training_log_lines_parse_and_count_steps() {
        let data = tiny_dataset(4, 0, 21);
        let cfg = RunConfig {
            steps: 4,
            ..tiny_config()
        };
        let dir = tempdir().unwrap();
        train(&cfg, &data, dir.path(), None).unwrap();
        let log = std::fs::read_to_string(dir.path().join("log.jsonl")).unwrap();
        let lines: Vec<&str> = log.lines().collect();
        assert_eq!(lines.len(), 4);
        for (i, line) in lines.iter().enumerate() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert_eq!(v["step"], i);
            assert!(v["total"].as_f64().unwrap().is_finite());
            assert!(v["box"].is_number() && v["cls"].is_number());
        }
        let summary: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap())
                .unwrap();
        assert!((0.0..=1.0).contains(&summary["agreement"].as_f64().unwrap()));
        assert_eq!(summary["steps"], 4);
    }
}
