//! Deterministic synthetic-scene generator. Each scene paints one to a few
//! human-object interactions as striped rectangles whose center distance is
//! drawn from a controllable near/far mixture, yielding a desk-scale corpus
//! with a seen/unseen vocabulary split: training scenes sample interactions
//! from the seen subset only (rank-skewed, so tail classes stay rare), test
//! scenes sample uniformly over the whole vocabulary.
//!
//! Every scene derives its own random stream from (base seed, split, index),
//! so generation order cannot change content and scenes could be produced in
//! parallel without changing a single bit.

use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BoxCxcywh;
use crate::error::{Error, Result};
use crate::image::{ImageBuf, CHANNELS};
use crate::matching::GroundTruthHoi;
use crate::numcore::NamedArrays;
use crate::rng::{derive_seed, seeded_rng};
use crate::semantics::Vocabulary;

const BACKGROUND: f64 = 0.1;
const STRIPE_PERIOD: usize = 4;
const STRIPE_BRIGHT: f64 = 0.9;
const STRIPE_DIM: f64 = 0.4;
const SATURATION: f64 = 0.9;
const PLACEMENT_ATTEMPTS: usize = 100;

/// Largest box edge the diagonal placement fallback can always fit: its
/// centers sit at least (1 - 1/sqrt(2)) / 2 ~ 0.1464 from every border.
const MAX_BOX_EDGE: f64 = 0.28;

/// Everything that shapes a generated dataset. The defaults describe the
/// standard toy corpus: 32x32 scenes, 1..3 interactions each, and a bimodal
/// distance mixture of a near mode U[0.05, 0.30] and a far mode U[0.70, 1.00].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSpec {
    pub image_size: usize,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub min_interactions: usize,
    pub max_interactions: usize,
    pub near_low: f64,
    pub near_high: f64,
    pub far_low: f64,
    pub far_high: f64,
    /// Probability of drawing a distance from the near mode.
    pub near_weight: f64,
    pub box_min: f64,
    pub box_max: f64,
    /// Training classes are drawn with weight 1/(1+rank)^skew over the seen
    /// list, so head classes dominate and tail classes land in the
    /// rare-count range at toy scale.
    pub skew: f64,
    /// When set, re-derives the seen/unseen flags from the generator seed by
    /// holding out floor(fraction * N) interactions; when absent the
    /// vocabulary's own flags are kept.
    pub unseen_fraction: Option<f64>,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            train_scenes: 400,
            test_scenes: 100,
            min_interactions: 1,
            max_interactions: 3,
            near_low: 0.05,
            near_high: 0.30,
            far_low: 0.70,
            far_high: 1.00,
            near_weight: 0.5,
            box_min: 0.12,
            box_max: 0.28,
            skew: 1.5,
            unseen_fraction: None,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidGeneratorSpec(msg));
        if self.image_size == 0 {
            return bad("image size must be positive".into());
        }
        if self.min_interactions == 0 || self.min_interactions > self.max_interactions {
            return bad(format!(
                "interactions per scene {}..{} is not a positive range",
                self.min_interactions, self.max_interactions
            ));
        }
        for (name, lo, hi) in [
            ("near", self.near_low, self.near_high),
            ("far", self.far_low, self.far_high),
        ] {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return bad(format!("{name} distance range [{lo}, {hi}] is not ordered in [0, 1]"));
            }
        }
        if !(0.0..=1.0).contains(&self.near_weight) {
            return bad(format!("mixture weight {} outside [0, 1]", self.near_weight));
        }
        if !(self.box_min > 0.0 && self.box_min <= self.box_max && self.box_max <= MAX_BOX_EDGE) {
            return bad(format!(
                "box edge range [{}, {}] must be positive, ordered, and at most {MAX_BOX_EDGE}",
                self.box_min, self.box_max
            ));
        }
        if self.box_min * (self.image_size as f64) < 2.0 {
            return bad(format!(
                "boxes of edge {} rasterize under two pixels at size {}",
                self.box_min, self.image_size
            ));
        }
        if self.skew < 0.0 {
            return bad(format!("class skew {} must be nonnegative", self.skew));
        }
        if let Some(f) = self.unseen_fraction {
            if !(0.0..1.0).contains(&f) {
                return bad(format!("unseen fraction {f} outside [0, 1)"));
            }
        }
        Ok(())
    }
}

/// One rendered scene with its annotations and the stream seed it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub image_id: usize,
    pub image: ImageBuf,
    pub hois: Vec<GroundTruthHoi>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Split {
    pub scenes: Vec<SceneRecord>,
}

/// A generated corpus: both splits, the effective vocabulary, and how often
/// each interaction occurs as training ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub train: Split,
    pub test: Split,
    pub train_counts: Vec<usize>,
}

/// Copy of `vocab` with exactly floor(fraction * N) interactions re-flagged
/// as unseen, chosen by a seeded shuffle. Replaces any existing flags.
pub fn hold_out(vocab: &Vocabulary, fraction: f64, seed: u64) -> Result<Vocabulary> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidGeneratorSpec(format!(
            "unseen fraction {fraction} outside [0, 1)"
        )));
    }
    let n = vocab.num_interactions();
    let held = (fraction * n as f64).floor() as usize;
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut seeded_rng(seed, "synth/unseen"));
    let mut out = vocab.clone();
    out.seen = vec![true; n];
    for &id in &ids[..held] {
        out.seen[id] = false;
    }
    Ok(out)
}

enum ClassSampler {
    Skewed {
        ids: Vec<usize>,
        dist: WeightedIndex<f64>,
    },
    Uniform {
        n: usize,
    },
}

impl ClassSampler {
    fn skewed(ids: Vec<usize>, skew: f64) -> Result<Self> {
        let weights: Vec<f64> = (0..ids.len())
            .map(|rank| 1.0 / ((1 + rank) as f64).powf(skew))
            .collect();
        let dist = WeightedIndex::new(&weights)
            .map_err(|e| Error::InvalidGeneratorSpec(format!("class weights: {e}")))?;
        Ok(Self::Skewed { ids, dist })
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        match self {
            Self::Skewed { ids, dist } => ids[dist.sample(rng)],
            Self::Uniform { n } => rng.gen_range(0..*n),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + rng.gen::<f64>() * (hi - lo)
}

fn sample_distance(spec: &GeneratorSpec, rng: &mut ChaCha8Rng) -> f64 {
    let near = rng.gen::<f64>() < spec.near_weight;
    if near {
        uniform(rng, spec.near_low, spec.near_high)
    } else {
        uniform(rng, spec.far_low, spec.far_high)
    }
}

/// Sample box sizes and centers such that the center distance is exactly
/// `g`. Random placement retries a bounded number of times, then falls back
/// to a deterministic diagonal layout, which fits for any g <= 1 as long as
/// edges stay at or under MAX_BOX_EDGE. The fallback biases placement, never
/// the distance.
fn place_pair(spec: &GeneratorSpec, g: f64, rng: &mut ChaCha8Rng) -> (BoxCxcywh, BoxCxcywh) {
    let hw = uniform(rng, spec.box_min, spec.box_max);
    let hh = uniform(rng, spec.box_min, spec.box_max);
    let ow = uniform(rng, spec.box_min, spec.box_max);
    let oh = uniform(rng, spec.box_min, spec.box_max);
    for _ in 0..PLACEMENT_ATTEMPTS {
        let hx = uniform(rng, hw / 2.0, 1.0 - hw / 2.0);
        let hy = uniform(rng, hh / 2.0, 1.0 - hh / 2.0);
        let theta = rng.gen::<f64>() * std::f64::consts::TAU;
        let ox = hx + g * theta.cos();
        let oy = hy + g * theta.sin();
        if ox >= ow / 2.0 && ox <= 1.0 - ow / 2.0 && oy >= oh / 2.0 && oy <= 1.0 - oh / 2.0 {
            return ([hx, hy, hw, hh], [ox, oy, ow, oh]);
        }
    }
    let step = g / std::f64::consts::SQRT_2;
    let c = (1.0 - step) / 2.0;
    ([c, c, hw, hh], [c + step, c + step, ow, oh])
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor() as i64;
    let f = h6 - sector as f64;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector.rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn draw_striped(img: &mut ImageBuf, b: &BoxCxcywh, hue: f64, horizontal: bool) {
    let side = img.width() as f64;
    let [cx, cy, w, h] = *b;
    let x0 = ((cx - w / 2.0) * side).round().max(0.0) as usize;
    let x1 = ((cx + w / 2.0) * side).round() as usize;
    let y0 = ((cy - h / 2.0) * side).round().max(0.0) as usize;
    let y1 = ((cy + h / 2.0) * side).round() as usize;
    for y in y0..y1.min(img.height()) {
        for x in x0..x1.min(img.width()) {
            let phase = if horizontal { y } else { x };
            let value = if phase % STRIPE_PERIOD < STRIPE_PERIOD / 2 {
                STRIPE_BRIGHT
            } else {
                STRIPE_DIM
            };
            img.set_pixel(x, y, hsv_to_rgb(hue, SATURATION, value));
        }
    }
}

/// Paint interactions onto a flat gray ground, in order, human rectangle
/// first: humans as horizontal stripes hued by action, objects as vertical
/// stripes hued by object id. Later rectangles overdraw earlier ones.
fn render_scene(spec: &GeneratorSpec, vocab: &Vocabulary, hois: &[GroundTruthHoi]) -> ImageBuf {
    let size = spec.image_size;
    let mut img = ImageBuf::new(size, size);
    img.fill_rect(0, 0, size, size, [BACKGROUND; 3]);
    for hoi in hois {
        let hue_h = hoi.action as f64 / vocab.actions.len() as f64;
        let hue_o = hoi.object as f64 / vocab.objects.len() as f64;
        draw_striped(&mut img, &hoi.human_box, hue_h, true);
        draw_striped(&mut img, &hoi.object_box, hue_o, false);
    }
    img
}

/// Build one scene from its own stream. Returns the record plus the exact
/// distances the sampler drew, one per interaction; boxes are stored
/// continuous (not pixel-snapped), so geometry preserves those draws.
fn build_scene(
    spec: &GeneratorSpec,
    vocab: &Vocabulary,
    sampler: &ClassSampler,
    image_id: usize,
    scene_seed: u64,
) -> (SceneRecord, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
    let count = rng.gen_range(spec.min_interactions..=spec.max_interactions);
    let mut hois = Vec::with_capacity(count);
    let mut sampled = Vec::with_capacity(count);
    for _ in 0..count {
        let interaction = sampler.sample(&mut rng);
        let (action, object) = vocab.interactions[interaction];
        let g = sample_distance(spec, &mut rng);
        let (human_box, object_box) = place_pair(spec, g, &mut rng);
        hois.push(GroundTruthHoi {
            human_box,
            object_box,
            action,
            object,
            interaction,
        });
        sampled.push(g);
    }
    let image = render_scene(spec, vocab, &hois);
    (
        SceneRecord {
            image_id,
            image,
            hois,
            seed: scene_seed,
        },
        sampled,
    )
}

/// Generate both splits. Image ids are globally unique: train scenes take
/// 0..train_scenes, test scenes continue from there.
pub fn generate(spec: &GeneratorSpec, vocab: &Vocabulary, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    vocab.validate()?;
    let vocab = match spec.unseen_fraction {
        Some(f) => hold_out(vocab, f, seed)?,
        None => vocab.clone(),
    };
    let seen = vocab.seen_ids();
    if seen.is_empty() {
        return Err(Error::InvalidGeneratorSpec(
            "every interaction is held out; nothing to train on".into(),
        ));
    }
    let train_sampler = ClassSampler::skewed(seen, spec.skew)?;
    let test_sampler = ClassSampler::Uniform {
        n: vocab.num_interactions(),
    };
    let mut train = Split::default();
    for i in 0..spec.train_scenes {
        let seed = derive_seed(seed, &format!("scene/train/{i}"));
        let (scene, _) = build_scene(spec, &vocab, &train_sampler, i, seed);
        train.scenes.push(scene);
    }
    let mut test = Split::default();
    for i in 0..spec.test_scenes {
        let seed = derive_seed(seed, &format!("scene/test/{i}"));
        let (scene, _) = build_scene(spec, &vocab, &test_sampler, spec.train_scenes + i, seed);
        test.scenes.push(scene);
    }
    let train_counts = interaction_counts(&train, vocab.num_interactions());
    Ok(Dataset {
        vocab,
        train,
        test,
        train_counts,
    })
}

/// Ground-truth occurrences per interaction id.
pub fn interaction_counts(split: &Split, num_interactions: usize) -> Vec<usize> {
    let mut counts = vec![0usize; num_interactions];
    for scene in &split.scenes {
        for hoi in &scene.hois {
            counts[hoi.interaction] += 1;
        }
    }
    counts
}

// ---- persistence ----

#[derive(Serialize, Deserialize)]
struct SceneLine {
    image_id: usize,
    seed: u64,
    hois: Vec<HoiLine>,
}

#[derive(Serialize, Deserialize)]
struct HoiLine {
    b_h: BoxCxcywh,
    b_o: BoxCxcywh,
    action: usize,
    object: usize,
}

impl Split {
    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    /// Per-image ground truth in the shape the evaluator consumes.
    pub fn gt_images(&self) -> Vec<(usize, Vec<GroundTruthHoi>)> {
        self.scenes
            .iter()
            .map(|s| (s.image_id, s.hois.clone()))
            .collect()
    }

    /// Write `annotations.jsonl` plus an `images.bin` array container
    /// holding each scene as `img/{id}` with shape [h, w, 3].
    pub fn export(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let ann_path = dir.join("annotations.jsonl");
        let mut lines = String::new();
        for scene in &self.scenes {
            let line = SceneLine {
                image_id: scene.image_id,
                seed: scene.seed,
                hois: scene
                    .hois
                    .iter()
                    .map(|h| HoiLine {
                        b_h: h.human_box,
                        b_o: h.object_box,
                        action: h.action,
                        object: h.object,
                    })
                    .collect(),
            };
            lines.push_str(
                &serde_json::to_string(&line)
                    .map_err(|e| Error::json(ann_path.display().to_string(), e))?,
            );
            lines.push('\n');
        }
        std::fs::write(&ann_path, lines)?;
        let mut images = NamedArrays::new();
        for scene in &self.scenes {
            images.push(
                &format!("img/{}", scene.image_id),
                &[scene.image.height(), scene.image.width(), CHANNELS],
                scene.image.data().to_vec(),
            )?;
        }
        images.write_to(dir.join("images.bin"))
    }

    /// Inverse of `export`. Interaction ids are recovered from the (action,
    /// object) pair; any record that fails to parse, names an unknown pair,
    /// or carries an out-of-square box is rejected with its line number.
    pub fn import(dir: &Path, vocab: &Vocabulary) -> Result<Split> {
        let ann_path = dir.join("annotations.jsonl");
        let path_str = ann_path.display().to_string();
        let malformed = |line: usize, msg: String| Error::MalformedRecord {
            path: path_str.clone(),
            line,
            msg,
        };
        let text = std::fs::read_to_string(&ann_path)?;
        let mut images = NamedArrays::read_from(dir.join("images.bin"))?;
        let mut scenes = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let line: SceneLine =
                serde_json::from_str(raw).map_err(|e| malformed(line_no, e.to_string()))?;
            let mut hois = Vec::with_capacity(line.hois.len());
            for h in line.hois {
                let interaction = vocab
                    .interactions
                    .iter()
                    .position(|&p| p == (h.action, h.object))
                    .ok_or_else(|| {
                        malformed(
                            line_no,
                            format!("no interaction pairs action {} with object {}", h.action, h.object),
                        )
                    })?;
                let gt = GroundTruthHoi {
                    human_box: h.b_h,
                    object_box: h.b_o,
                    action: h.action,
                    object: h.object,
                    interaction,
                };
                gt.validate(vocab)
                    .map_err(|e| malformed(line_no, e.to_string()))?;
                hois.push(gt);
            }
            let name = format!("img/{}", line.image_id);
            let (shape, data) = images
                .take(&name)
                .ok_or_else(|| malformed(line_no, format!("{name} missing from image container")))?;
            if shape.len() != 3 || shape[2] != CHANNELS {
                return Err(malformed(
                    line_no,
                    format!("{name} has shape {shape:?}, expected [h, w, 3]"),
                ));
            }
            let image = ImageBuf::from_data(shape[1], shape[0], data)?;
            scenes.push(SceneRecord {
                image_id: line.image_id,
                image,
                hois,
                seed: line.seed,
            });
        }
        Ok(Split { scenes })
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    train_counts: Vec<usize>,
}

impl Dataset {
    /// Directory layout: vocab.json, meta.json, train/, test/.
    pub fn export(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let vocab_path = dir.join("vocab.json");
        let vocab_json = serde_json::to_string_pretty(&self.vocab)
            .map_err(|e| Error::json(vocab_path.display().to_string(), e))?;
        std::fs::write(&vocab_path, vocab_json)?;
        let meta_path = dir.join("meta.json");
        let meta = Meta {
            train_counts: self.train_counts.clone(),
        };
        let meta_json = serde_json::to_string_pretty(&meta)
            .map_err(|e| Error::json(meta_path.display().to_string(), e))?;
        std::fs::write(&meta_path, meta_json)?;
        self.train.export(&dir.join("train"))?;
        self.test.export(&dir.join("test"))
    }

    pub fn import(dir: &Path) -> Result<Dataset> {
        let vocab = Vocabulary::load(&dir.join("vocab.json"))?;
        let meta_path = dir.join("meta.json");
        let meta: Meta = serde_json::from_str(&std::fs::read_to_string(&meta_path)?)
            .map_err(|e| Error::json(meta_path.display().to_string(), e))?;
        if meta.train_counts.len() != vocab.num_interactions() {
            return Err(Error::InvalidConfig(format!(
                "meta lists {} train counts for {} interactions",
                meta.train_counts.len(),
                vocab.num_interactions()
            )));
        }
        let train = Split::import(&dir.join("train"), &vocab)?;
        let test = Split::import(&dir.join("test"), &vocab)?;
        Ok(Dataset {
            vocab,
            train,
            test,
            train_counts: meta.train_counts,
        })
    }
}
