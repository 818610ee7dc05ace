//! Detection scoring and mean-average-precision evaluation.
//!
//! A detection counts as correct only when both boxes overlap their ground
//! truth with IoU strictly above 0.5 and the interaction class matches;
//! each ground truth can satisfy one detection, claimed greedily in score
//! order. AP uses all-points interpolation. The report breaks the mean
//! down by seen/unseen classes, training-frequency rarity, and ground-truth
//! human-object distance buckets.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boxes::{self, BoxCxcywh};
use crate::error::{Error, Result};
use crate::matching::GroundTruthHoi;
use crate::semantics::Vocabulary;

/// Default exponent suppressing overconfident boxes in the final score.
pub const SCORE_GAMMA: f64 = 2.0;
/// Ground-truth distance at or below which an interaction is "small".
pub const SMALL_BUCKET_MAX: f64 = 0.33;
/// Ground-truth distance at or above which an interaction is "large".
pub const LARGE_BUCKET_MIN: f64 = 0.67;

/// One scored candidate interaction in one image.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: usize,
    pub human_box: BoxCxcywh,
    pub object_box: BoxCxcywh,
    pub interaction: usize,
    pub score: f64,
}

/// Combine an interaction probability with the box confidence:
/// `s * c^gamma`.
pub fn final_score(s: f64, c: f64, gamma: f64) -> f64 {
    s * c.powf(gamma)
}

/// Both boxes overlap strictly above 0.5 and the class matches.
pub fn box_pair_hit(det: &Detection, gt: &GroundTruthHoi) -> bool {
    det.interaction == gt.interaction
        && boxes::iou(&det.human_box, &gt.human_box) > 0.5
        && boxes::iou(&det.object_box, &gt.object_box) > 0.5
}

/// Greedy matching step: claim the best still-unused ground truth this
/// detection hits (largest worst-box IoU, ties to the lowest index).
/// Returns the claimed index.
pub fn is_true_positive(
    det: &Detection,
    gts: &[GroundTruthHoi],
    used: &mut [bool],
) -> Option<usize> {
    let refs: Vec<&GroundTruthHoi> = gts.iter().collect();
    claim_best(det, &refs, used)
}

fn claim_best(det: &Detection, gts: &[&GroundTruthHoi], used: &mut [bool]) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (i, gt) in gts.iter().enumerate() {
        if used[i] || !box_pair_hit(det, gt) {
            continue;
        }
        let quality = boxes::iou(&det.human_box, &gt.human_box)
            .min(boxes::iou(&det.object_box, &gt.object_box));
        let better = match best {
            None => true,
            Some((q, _)) => quality > q,
        };
        if better {
            best = Some((quality, i));
        }
    }
    let (_, idx) = best?;
    used[idx] = true;
    Some(idx)
}

/// Area under the all-points-interpolated precision/recall curve for one
/// class, from the hit/miss sequence in descending score order.
pub fn average_precision(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 || hits.is_empty() {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    for &hit in hits {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    let mut envelope = precision;
    for i in (0..envelope.len() - 1).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&envelope) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bucket {
    All,
    Small,
    Large,
}

impl Bucket {
    fn accepts(self, gt: &GroundTruthHoi) -> bool {
        let g = boxes::center_distance(&gt.human_box, &gt.object_box);
        match self {
            Bucket::All => true,
            Bucket::Small => g <= SMALL_BUCKET_MAX,
            Bucket::Large => g >= LARGE_BUCKET_MIN,
        }
    }
}

/// AP and bookkeeping for one interaction class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassResult {
    pub interaction: usize,
    pub action: String,
    pub object: String,
    pub gt_count: usize,
    pub train_count: usize,
    /// Absent when the class has no ground truth in the evaluated split.
    pub ap: Option<f64>,
}

/// Mean AP over the classes a split covers.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitScore {
    pub map: f64,
    pub classes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: Vec<ClassResult>,
    pub full: SplitScore,
    pub seen: SplitScore,
    pub unseen: SplitScore,
    pub rare: SplitScore,
    pub non_rare: SplitScore,
    pub small: SplitScore,
    pub large: SplitScore,
    pub num_images: usize,
    pub num_detections: usize,
}

fn mean(values: &[f64]) -> SplitScore {
    if values.is_empty() {
        SplitScore {
            map: 0.0,
            classes: 0,
        }
    } else {
        SplitScore {
            map: values.iter().sum::<f64>() / values.len() as f64,
            classes: values.len(),
        }
    }
}

/// AP of one class under one bucket filter. Detections that hit an
/// out-of-bucket ground truth are dropped from the ranking instead of
/// counting as false positives; out-of-bucket truths are not consumed.
fn class_bucket_ap(
    dets: &[&Detection],
    gts_by_image: &BTreeMap<usize, Vec<&GroundTruthHoi>>,
    bucket: Bucket,
) -> Option<f64> {
    let mut in_bucket: BTreeMap<usize, Vec<&GroundTruthHoi>> = BTreeMap::new();
    let mut out_bucket: BTreeMap<usize, Vec<&GroundTruthHoi>> = BTreeMap::new();
    let mut num_gt = 0usize;
    for (&img, gts) in gts_by_image {
        for gt in gts {
            if bucket.accepts(gt) {
                in_bucket.entry(img).or_default().push(gt);
                num_gt += 1;
            } else {
                out_bucket.entry(img).or_default().push(gt);
            }
        }
    }
    if num_gt == 0 {
        return None;
    }
    let mut used: BTreeMap<usize, Vec<bool>> = in_bucket
        .iter()
        .map(|(&img, gts)| (img, vec![false; gts.len()]))
        .collect();
    let mut hits = Vec::with_capacity(dets.len());
    for det in dets {
        let matched = match in_bucket.get(&det.image_id) {
            Some(gts) => claim_best(det, gts, used.get_mut(&det.image_id).unwrap()),
            None => None,
        };
        if matched.is_some() {
            hits.push(true);
            continue;
        }
        let ignored = out_bucket
            .get(&det.image_id)
            .is_some_and(|gts| gts.iter().any(|gt| box_pair_hit(det, gt)));
        if !ignored {
            hits.push(false);
        }
    }
    Some(average_precision(&hits, num_gt))
}

/// Evaluate detections against per-image ground truth. `train_counts[i]`
/// is how often interaction `i` occurred in training; it feeds the
/// rare/non-rare split (rare: 1..=4 occurrences).
pub fn evaluate(
    dets: &[Detection],
    gt_images: &[(usize, Vec<GroundTruthHoi>)],
    vocab: &Vocabulary,
    train_counts: &[usize],
) -> Result<EvalReport> {
    let n = vocab.num_interactions();
    if train_counts.len() != n {
        return Err(Error::InvalidConfig(format!(
            "{} train counts for {n} interactions",
            train_counts.len()
        )));
    }
    let mut images: BTreeMap<usize, &Vec<GroundTruthHoi>> = BTreeMap::new();
    for (id, gts) in gt_images {
        if images.insert(*id, gts).is_some() {
            return Err(Error::InvalidConfig(format!(
                "image id {id} appears twice in the ground truth"
            )));
        }
        for gt in gts {
            if gt.interaction >= n {
                return Err(Error::InteractionOutOfRange(gt.interaction, n));
            }
        }
    }
    for det in dets {
        if det.interaction >= n {
            return Err(Error::InteractionOutOfRange(det.interaction, n));
        }
    }

    // Deterministic, input-order-independent ranking: sort by content only.
    let mut ranked: Vec<&Detection> = dets.iter().collect();
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.image_id.cmp(&b.image_id))
            .then_with(|| cmp_box(&a.human_box, &b.human_box))
            .then_with(|| cmp_box(&a.object_box, &b.object_box))
    });

    let mut per_class = Vec::with_capacity(n);
    let mut small_aps = Vec::new();
    let mut large_aps = Vec::new();
    for class in 0..n {
        let class_dets: Vec<&Detection> = ranked
            .iter()
            .filter(|d| d.interaction == class)
            .cloned()
            .collect();
        let mut gts_by_image: BTreeMap<usize, Vec<&GroundTruthHoi>> = BTreeMap::new();
        for (&img, gts) in &images {
            let of_class: Vec<&GroundTruthHoi> =
                gts.iter().filter(|g| g.interaction == class).collect();
            if !of_class.is_empty() {
                gts_by_image.insert(img, of_class);
            }
        }
        let (action, object) = vocab.interaction_name(class);
        per_class.push(ClassResult {
            interaction: class,
            action: action.to_string(),
            object: object.to_string(),
            gt_count: gts_by_image.values().map(Vec::len).sum(),
            train_count: train_counts[class],
            ap: class_bucket_ap(&class_dets, &gts_by_image, Bucket::All),
        });
        if let Some(ap) = class_bucket_ap(&class_dets, &gts_by_image, Bucket::Small) {
            small_aps.push(ap);
        }
        if let Some(ap) = class_bucket_ap(&class_dets, &gts_by_image, Bucket::Large) {
            large_aps.push(ap);
        }
    }

    let scored: Vec<&ClassResult> = per_class.iter().filter(|c| c.ap.is_some()).collect();
    let collect_aps = |pred: &dyn Fn(&ClassResult) -> bool| -> Vec<f64> {
        scored
            .iter()
            .filter(|c| pred(c))
            .map(|c| c.ap.unwrap())
            .collect()
    };
    let full = mean(&collect_aps(&|_| true));
    let seen = mean(&collect_aps(&|c| vocab.seen[c.interaction]));
    let unseen = mean(&collect_aps(&|c| !vocab.seen[c.interaction]));
    let rare = mean(&collect_aps(&|c| (1..5).contains(&c.train_count)));
    let non_rare = mean(&collect_aps(&|c| c.train_count >= 5));
    Ok(EvalReport {
        per_class,
        full,
        seen,
        unseen,
        rare,
        non_rare,
        small: mean(&small_aps),
        large: mean(&large_aps),
        num_images: images.len(),
        num_detections: dets.len(),
    })
}

fn cmp_box(a: &BoxCxcywh, b: &BoxCxcywh) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        let ord = x.total_cmp(y);
        if ord != std::cmp::Ordering::Equal {
            return ord;
        }
    }
    std::cmp::Ordering::Equal
}

impl EvalReport {
    /// Plain-text table with one row per split.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<10} {:>8} {:>9}\n",
            "split", "mAP", "classes"
        ));
        for (name, s) in [
            ("full", self.full),
            ("seen", self.seen),
            ("unseen", self.unseen),
            ("rare", self.rare),
            ("non-rare", self.non_rare),
            ("small", self.small),
            ("large", self.large),
        ] {
            out.push_str(&format!(
                "{:<10} {:>8.4} {:>9}\n",
                name, s.map, s.classes
            ));
        }
        out
    }
}

/// Read detections from JSON lines, one per line.
pub fn read_detections_jsonl(path: &Path) -> Result<Vec<Detection>> {
    let file = std::fs::File::open(path)?;
    let mut dets = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let det: Detection = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        dets.push(det);
    }
    Ok(dets)
}

pub fn write_detections_jsonl(path: &Path, dets: &[Detection]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for det in dets {
        let line = serde_json::to_string(det).map_err(|e| Error::json(path.display().to_string(), e))?;
        writeln!(file, "{line}")?;
    }
    Ok(())
}
