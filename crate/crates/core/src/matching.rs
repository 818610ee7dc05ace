//! Bipartite matching between decoded hypotheses and ground truth.
//!
//! The cost of pairing prediction i with ground truth j combines box
//! regression, generalized-IoU, classification, and a level-distance
//! constraint that steers shallow feature levels toward close human-object
//! pairs and deep levels toward distant ones. Two solvers produce the
//! optimal injective column-to-row assignment: a shortest-augmenting-path
//! Hungarian variant for production use and a subset-DP exhaustive search
//! used as its oracle. Both apply the same deterministic tie-break, so
//! their outputs can be compared for exact equality.

use serde::{Deserialize, Serialize};

use crate::boxes::{self, BoxCxcywh};
use crate::decoder::PredictionSet;
use crate::error::{Error, Result};
use crate::semantics::{ClassSet, Vocabulary};

/// How the human-object distance g is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceType {
    /// L2 distance between box centers in normalized image units.
    Absolute,
    /// Center distance divided by the diagonal of the enclosing box.
    Relative,
}

/// Which end of the level range should prefer small distances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchStrategy {
    /// Low levels match close pairs: penalty |Lv - g|.
    LowSmall,
    /// Reversed pairing: penalty |(1 - Lv) - g|.
    LowLarge,
}

impl std::fmt::Display for DistanceType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Absolute => "absolute",
            Self::Relative => "relative",
        })
    }
}

impl std::fmt::Display for MatchStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::LowSmall => "low_small",
            Self::LowLarge => "low_large",
        })
    }
}

impl std::str::FromStr for DistanceType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "absolute" => Ok(Self::Absolute),
            "relative" => Ok(Self::Relative),
            _ => Err(Error::InvalidConfig(format!(
                "unknown distance type {s:?}; expected absolute or relative"
            ))),
        }
    }
}

impl std::str::FromStr for MatchStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low_small" => Ok(Self::LowSmall),
            "low_large" => Ok(Self::LowLarge),
            _ => Err(Error::InvalidConfig(format!(
                "unknown match strategy {s:?}; expected low_small or low_large"
            ))),
        }
    }
}

/// Weights shared by the matching cost and the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchWeights {
    pub lambda_box: f64,
    pub lambda_iou: f64,
    pub lambda_cls: f64,
    pub lambda_d: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        Self {
            lambda_box: 5.0,
            lambda_iou: 2.0,
            lambda_cls: 5.0,
            lambda_d: 5.0,
        }
    }
}

/// One annotated human-object interaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthHoi {
    pub human_box: BoxCxcywh,
    pub object_box: BoxCxcywh,
    pub action: usize,
    pub object: usize,
    pub interaction: usize,
}

impl GroundTruthHoi {
    /// Boxes inside the unit square, interaction id consistent with the
    /// (action, object) pair.
    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        for b in [&self.human_box, &self.object_box] {
            let [cx, cy, w, h] = *b;
            let inside = w > 0.0
                && h > 0.0
                && cx - w / 2.0 >= 0.0
                && cy - h / 2.0 >= 0.0
                && cx + w / 2.0 <= 1.0
                && cy + h / 2.0 <= 1.0;
            if !inside {
                return Err(Error::InvalidVocabulary(format!(
                    "box {b:?} outside the unit square"
                )));
            }
        }
        if self.interaction >= vocab.num_interactions() {
            return Err(Error::InteractionOutOfRange(
                self.interaction,
                vocab.num_interactions(),
            ));
        }
        if vocab.interactions[self.interaction] != (self.action, self.object) {
            return Err(Error::InvalidVocabulary(format!(
                "interaction {} does not name action {} with object {}",
                self.interaction, self.action, self.object
            )));
        }
        Ok(())
    }
}

/// L2 distance between the centers of a human box and an object box.
pub fn ho_distance(b_h: &BoxCxcywh, b_o: &BoxCxcywh) -> f64 {
    boxes::center_distance(b_h, b_o)
}

/// Human-object distance of a ground truth under the chosen normalization.
pub fn gt_distance(gt: &GroundTruthHoi, distance: DistanceType) -> f64 {
    let d = ho_distance(&gt.human_box, &gt.object_box);
    match distance {
        DistanceType::Absolute => d,
        DistanceType::Relative => {
            let diag = boxes::enclosing_diagonal(&gt.human_box, &gt.object_box);
            if diag <= 1e-12 {
                0.0
            } else {
                d / diag
            }
        }
    }
}

/// Penalty for pairing a prediction at normalized level `lv` with a ground
/// truth at distance `g`.
pub fn distance_constraint(lv: f64, g: f64, strategy: MatchStrategy) -> f64 {
    match strategy {
        MatchStrategy::LowSmall => (lv - g).abs(),
        MatchStrategy::LowLarge => ((1.0 - lv) - g).abs(),
    }
}

/// Unweighted per-entry cost components, aligned with `CostMatrix::entries`.
#[derive(Debug, Clone)]
pub struct CostBreakdown {
    pub weights: MatchWeights,
    pub box_term: Vec<f64>,
    pub iou_term: Vec<f64>,
    pub cls_term: Vec<f64>,
    pub d_term: Vec<f64>,
}

/// Dense rows-by-cols cost matrix; rows are flattened predictions, columns
/// ground truths. Construction guarantees every entry is finite.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
    breakdown: Option<CostBreakdown>,
}

impl CostMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut entries = Vec::with_capacity(rows.len() * cols);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::InvalidConfig(format!(
                    "ragged cost matrix: row {r} has {} entries, row 0 has {cols}",
                    row.len()
                )));
            }
            for (c, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFiniteCost { row: r, col: c });
                }
                entries.push(v);
            }
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            entries,
            breakdown: None,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.cols + col]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn breakdown(&self) -> Option<&CostBreakdown> {
        self.breakdown.as_ref()
    }

    fn check_solvable(&self) -> Result<()> {
        if self.rows < self.cols {
            return Err(Error::RowsLessThanCols {
                rows: self.rows,
                cols: self.cols,
            });
        }
        Ok(())
    }
}

/// Stable softmax over a logit slice.
fn softmax_values(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / z).collect()
}

/// Assemble the full matching cost between every prediction and every
/// ground truth. The classification term is one minus the softmax
/// probability of the target class, so a perfect prediction costs exactly
/// zero in every component.
pub fn build_cost_matrix(
    preds: &PredictionSet,
    gts: &[GroundTruthHoi],
    classes: &ClassSet,
    weights: &MatchWeights,
    distance: DistanceType,
    strategy: MatchStrategy,
) -> Result<CostMatrix> {
    if gts.is_empty() {
        return Err(Error::EmptyGroundTruth);
    }
    let rows = preds.predictions.len();
    let cols = gts.len();
    let positions: Vec<usize> = gts
        .iter()
        .map(|gt| {
            classes
                .position(gt.interaction)
                .ok_or(Error::InteractionOutOfRange(gt.interaction, classes.len()))
        })
        .collect::<Result<_>>()?;
    let distances: Vec<f64> = gts.iter().map(|gt| gt_distance(gt, distance)).collect();

    let mut entries = Vec::with_capacity(rows * cols);
    let mut box_term = Vec::with_capacity(rows * cols);
    let mut iou_term = Vec::with_capacity(rows * cols);
    let mut cls_term = Vec::with_capacity(rows * cols);
    let mut d_term = Vec::with_capacity(rows * cols);
    for (r, pred) in preds.predictions.iter().enumerate() {
        let probs = softmax_values(&pred.logits);
        for (c, gt) in gts.iter().enumerate() {
            let bx = boxes::l1_box_value(&pred.human_box, &gt.human_box)
                + boxes::l1_box_value(&pred.object_box, &gt.object_box);
            let iou = boxes::giou_loss_value(&pred.human_box, &gt.human_box)
                + boxes::giou_loss_value(&pred.object_box, &gt.object_box);
            let cls = 1.0 - probs[positions[c]];
            let d = distance_constraint(pred.lv, distances[c], strategy);
            let entry = weights.lambda_box * bx
                + weights.lambda_iou * iou
                + weights.lambda_cls * cls
                + weights.lambda_d * d;
            if !entry.is_finite() {
                return Err(Error::NonFiniteCost { row: r, col: c });
            }
            box_term.push(bx);
            iou_term.push(iou);
            cls_term.push(cls);
            d_term.push(d);
            entries.push(entry);
        }
    }
    Ok(CostMatrix {
        rows,
        cols,
        entries,
        breakdown: Some(CostBreakdown {
            weights: *weights,
            box_term,
            iou_term,
            cls_term,
            d_term,
        }),
    })
}

/// An injective column-to-row assignment. `pairs` holds (row, col) sorted
/// by column; `total` sums the matched entries in that same order, so two
/// solvers that agree on the pairs agree on the total bitwise.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub total: f64,
}

impl Assignment {
    fn from_pairs(c: &CostMatrix, pairs: Vec<(usize, usize)>) -> Self {
        let total = pairs.iter().fold(0.0, |acc, &(r, col)| acc + c.at(r, col));
        Self { pairs, total }
    }

    /// Row matched to `col`, if any.
    pub fn row_for(&self, col: usize) -> Option<usize> {
        self.pairs
            .iter()
            .find(|&&(_, c)| c == col)
            .map(|&(r, _)| r)
    }

    /// Column matched to `row`, if any.
    pub fn col_for(&self, row: usize) -> Option<usize> {
        self.pairs
            .iter()
            .find(|&&(r, _)| r == row)
            .map(|&(_, c)| c)
    }
}

/// Shortest-augmenting-path assignment over a cost closure: `sub_rows` by
/// `sub_cols` with `sub_cols <= sub_rows`. Returns the row chosen for each
/// column. Potentials are maintained per column of the dual problem.
fn jv_assign(sub_rows: usize, sub_cols: usize, cost: &dyn Fn(usize, usize) -> f64) -> Vec<usize> {
    // Treat columns as the "workers" to place (there are fewer of them);
    // index 0 is a sentinel in the augmenting-path bookkeeping.
    let n = sub_cols;
    let m = sub_rows;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut assigned_col = vec![0usize; m + 1]; // column (1-based) occupying each row
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        assigned_col[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = assigned_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost(j - 1, i0 - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[assigned_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if assigned_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            assigned_col[j0] = assigned_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_of_col = vec![usize::MAX; n];
    for j in 1..=m {
        if assigned_col[j] != 0 {
            row_of_col[assigned_col[j] - 1] = j - 1;
        }
    }
    row_of_col
}

/// Optimal total of the subproblem restricted to `avail` rows and columns
/// `start_col..`, solved by augmenting paths and re-summed in column order.
fn jv_total(c: &CostMatrix, avail: &[usize], start_col: usize) -> f64 {
    let sub_cols = c.cols - start_col;
    let row_of = jv_assign(avail.len(), sub_cols, &|r, j| {
        c.at(avail[r], start_col + j)
    });
    (0..sub_cols).fold(0.0, |acc, j| acc + c.at(avail[row_of[j]], start_col + j))
}

/// Same subproblem optimum by dynamic programming over column subsets.
fn dp_total(c: &CostMatrix, avail: &[usize], start_col: usize) -> f64 {
    let k = c.cols - start_col;
    let full = (1usize << k) - 1;
    let mut dp = vec![f64::INFINITY; full + 1];
    dp[0] = 0.0;
    for &r in avail {
        // Descending masks: dp[mask ^ bit] is still the previous row's
        // value when read, so each row is used at most once.
        for mask in (1..=full).rev() {
            let mut j = mask;
            while j != 0 {
                let bit = j & j.wrapping_neg();
                let col = bit.trailing_zeros() as usize;
                let prev = dp[mask ^ bit];
                if prev.is_finite() {
                    let cand = prev + c.at(r, start_col + col);
                    if cand < dp[mask] {
                        dp[mask] = cand;
                    }
                }
                j ^= bit;
            }
        }
    }
    dp[full]
}

/// Resolve the optimal assignment to its canonical representative: for each
/// column in ascending order, keep the lowest row index that still admits
/// an optimal completion. `sub_total` supplies subproblem optima for the
/// admissibility test.
fn lex_min_pairs(
    c: &CostMatrix,
    total: f64,
    sub_total: &mut dyn FnMut(&[usize], usize) -> f64,
) -> Vec<(usize, usize)> {
    let tol = 1e-9 * (1.0 + total.abs());
    let mut avail: Vec<usize> = (0..c.rows).collect();
    let mut pairs = Vec::with_capacity(c.cols);
    let mut prefix = 0.0;
    for col in 0..c.cols {
        let mut chosen = None;
        for (ai, &r) in avail.iter().enumerate() {
            let entry = c.at(r, col);
            let completion = if col + 1 < c.cols {
                let mut rest = avail.clone();
                rest.remove(ai);
                sub_total(&rest, col + 1)
            } else {
                0.0
            };
            if prefix + entry + completion <= total + tol {
                chosen = Some((ai, r, entry));
                break;
            }
        }
        let (ai, r, entry) = chosen.expect("every column of an optimal assignment admits a row");
        avail.remove(ai);
        prefix += entry;
        pairs.push((r, col));
    }
    pairs
}

/// Minimum-cost injective assignment of every column to a distinct row,
/// canonicalized so equal-cost ties resolve to the lowest row index per
/// column (columns considered in ascending order).
pub fn hungarian(c: &CostMatrix) -> Result<Assignment> {
    c.check_solvable()?;
    if c.cols == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            total: 0.0,
        });
    }
    let all: Vec<usize> = (0..c.rows).collect();
    let total = jv_total(c, &all, 0);
    let pairs = lex_min_pairs(c, total, &mut |avail, col| jv_total(c, avail, col));
    Ok(Assignment::from_pairs(c, pairs))
}

/// Columns beyond which the exhaustive oracle refuses to run.
pub const MAX_BRUTE_COLS: usize = 8;

/// Exhaustive-search oracle for `hungarian`, sharing its tie-break.
pub fn brute_force_match(c: &CostMatrix) -> Result<Assignment> {
    c.check_solvable()?;
    if c.cols > MAX_BRUTE_COLS {
        return Err(Error::EnumerationTooLarge {
            cols: c.cols,
            max: MAX_BRUTE_COLS,
        });
    }
    if c.cols == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            total: 0.0,
        });
    }
    let all: Vec<usize> = (0..c.rows).collect();
    let total = dp_total(c, &all, 0);
    let pairs = lex_min_pairs(c, total, &mut |avail, col| dp_total(c, avail, col));
    Ok(Assignment::from_pairs(c, pairs))
}
