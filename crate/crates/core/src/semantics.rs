//! Interaction vocabulary, body-part description bank, and the dual
//! text-bank classifier.
//!
//! Every interaction category gets two text embeddings: one from its
//! action/object name wrapped in learnable context tokens (rebuilt every
//! step so gradient reaches the context), and one from a fixed body-part
//! state description (computed once and cached; no learnable parameters on
//! that path). A query embedding is classified by fusing its similarities
//! to both banks with learnable scalar weights.

use std::cell::{Cell, RefCell};
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::encoders::{TextEncoder, TokenSlot, TokenVocab};
use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor};

pub const BODY_PARTS: [&str; 6] = ["mouth", "eye", "arm", "hand", "leg", "foot"];

// ---- vocabulary ----

/// The category space: actions × objects, with the subset of valid pairs
/// enumerated, and a seen/unseen flag per pair for open-vocabulary splits.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub actions: Vec<String>,
    pub objects: Vec<String>,
    pub interactions: Vec<(usize, usize)>,
    pub seen: Vec<bool>,
}

impl Vocabulary {
    pub fn from_json(text: &str) -> Result<Self> {
        let v: Vocabulary = serde_json::from_str(text)
            .map_err(|e| Error::InvalidVocabulary(e.to_string()))?;
        v.validate()?;
        Ok(v)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// The 10-action x 8-object toy vocabulary committed with the crate.
    pub fn builtin() -> Self {
        Self::from_json(include_str!("../fixtures/vocab.json"))
            .expect("builtin vocabulary is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.actions.is_empty() || self.objects.is_empty() {
            return Err(Error::InvalidVocabulary("no actions or objects".into()));
        }
        if self.seen.len() != self.interactions.len() {
            return Err(Error::InvalidVocabulary(format!(
                "{} interactions but {} seen flags",
                self.interactions.len(),
                self.seen.len()
            )));
        }
        let mut pairs = std::collections::HashSet::new();
        for &(a, o) in &self.interactions {
            if a >= self.actions.len() || o >= self.objects.len() {
                return Err(Error::InvalidVocabulary(format!(
                    "interaction ({a},{o}) out of range"
                )));
            }
            if !pairs.insert((a, o)) {
                return Err(Error::InvalidVocabulary(format!(
                    "duplicate interaction ({a},{o})"
                )));
            }
        }
        Ok(())
    }

    pub fn num_interactions(&self) -> usize {
        self.interactions.len()
    }

    pub fn interaction_name(&self, id: usize) -> (&str, &str) {
        let (a, o) = self.interactions[id];
        (&self.actions[a], &self.objects[o])
    }

    pub fn find(&self, action: &str, object: &str) -> Option<usize> {
        self.interactions.iter().position(|&(a, o)| {
            self.actions[a] == action && self.objects[o] == object
        })
    }

    pub fn seen_ids(&self) -> Vec<usize> {
        (0..self.num_interactions()).filter(|&i| self.seen[i]).collect()
    }

    pub fn unseen_ids(&self) -> Vec<usize> {
        (0..self.num_interactions()).filter(|&i| !self.seen[i]).collect()
    }
}

/// An ordered subset of interaction ids forming the active class list for a
/// run: training uses the seen subset so unseen categories are never
/// suppressed as negatives; evaluation uses the full list.
#[derive(Debug, Clone)]
pub struct ClassSet {
    ids: Vec<usize>,
}

impl ClassSet {
    pub fn seen(vocab: &Vocabulary) -> Self {
        Self {
            ids: vocab.seen_ids(),
        }
    }

    pub fn all(vocab: &Vocabulary) -> Self {
        Self {
            ids: (0..vocab.num_interactions()).collect(),
        }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Position of a global interaction id within this class list.
    pub fn position(&self, interaction: usize) -> Option<usize> {
        self.ids.binary_search(&interaction).ok()
    }

    pub fn id_at(&self, pos: usize) -> usize {
        self.ids[pos]
    }
}

// ---- description bank ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DescriptionRecord {
    pub action: String,
    pub object: String,
    pub body_parts: Vec<String>,
    pub description: String,
}

/// Committed table mapping every interaction to its involved body parts and
/// a short state phrase. Stands in for an offline text-generation pass.
#[derive(Debug, Clone)]
pub struct DescriptionBank {
    records: Vec<DescriptionRecord>,
    by_interaction: Vec<usize>,
}

impl DescriptionBank {
    pub fn from_json(text: &str, vocab: &Vocabulary) -> Result<Self> {
        let records: Vec<DescriptionRecord> = serde_json::from_str(text)
            .map_err(|e| Error::InvalidVocabulary(format!("description bank: {e}")))?;
        Self::from_records(records, vocab)
    }

    pub fn load(path: &Path, vocab: &Vocabulary) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?, vocab)
    }

    pub fn builtin(vocab: &Vocabulary) -> Result<Self> {
        Self::from_json(include_str!("../fixtures/bank.json"), vocab)
    }

    pub fn from_records(records: Vec<DescriptionRecord>, vocab: &Vocabulary) -> Result<Self> {
        for r in &records {
            if r.body_parts.is_empty() {
                return Err(Error::UnknownBodyPart {
                    part: String::new(),
                    action: r.action.clone(),
                    object: r.object.clone(),
                });
            }
            for part in &r.body_parts {
                if !BODY_PARTS.contains(&part.as_str()) {
                    return Err(Error::UnknownBodyPart {
                        part: part.clone(),
                        action: r.action.clone(),
                        object: r.object.clone(),
                    });
                }
            }
            if r.description.trim().is_empty() {
                return Err(Error::EmptyDescription {
                    action: r.action.clone(),
                    object: r.object.clone(),
                });
            }
        }
        let mut by_interaction = Vec::with_capacity(vocab.num_interactions());
        for id in 0..vocab.num_interactions() {
            let (action, object) = vocab.interaction_name(id);
            let at = records
                .iter()
                .position(|r| r.action == action && r.object == object)
                .ok_or_else(|| Error::MissingDescription {
                    id,
                    action: action.to_string(),
                    object: object.to_string(),
                })?;
            by_interaction.push(at);
        }
        Ok(Self {
            records,
            by_interaction,
        })
    }

    pub fn record_for(&self, interaction: usize) -> &DescriptionRecord {
        &self.records[self.by_interaction[interaction]]
    }
}

/// Source of body-part descriptions. The bank satisfies it from its file;
/// an external text-generation client could satisfy the same contract.
pub trait DescriptionProvider {
    fn describe(&self, action: &str, object: &str) -> Result<(Vec<String>, String)>;
}

impl DescriptionProvider for DescriptionBank {
    fn describe(&self, action: &str, object: &str) -> Result<(Vec<String>, String)> {
        self.records
            .iter()
            .find(|r| r.action == action && r.object == object)
            .map(|r| (r.body_parts.clone(), r.description.clone()))
            .ok_or_else(|| Error::DescriptionNotFound {
                action: action.to_string(),
                object: object.to_string(),
            })
    }
}

// ---- text banks ----

pub const NUM_PREFIX_TOKENS: usize = 8;
pub const NUM_CONJUNCT_TOKENS: usize = 2;

/// Builds the two per-category embedding matrices. Name rows are rebuilt on
/// every call (they depend on the learnable context); description rows are
/// encoded once for the whole vocabulary and cached.
pub struct TextBankBuilder<'a> {
    encoder: &'a TextEncoder,
    action_tokens: Vec<Vec<usize>>,
    object_tokens: Vec<Vec<usize>>,
    description_tokens: Vec<Vec<usize>>,
    num_interactions: usize,
    interactions: Vec<(usize, usize)>,
    seen_ids: Vec<usize>,
    tb_cache: RefCell<Option<Rc<[f64]>>>,
    tb_builds: Cell<usize>,
}

impl<'a> TextBankBuilder<'a> {
    pub fn new(
        encoder: &'a TextEncoder,
        vocab: &Vocabulary,
        bank: &DescriptionBank,
        tokens: &TokenVocab,
    ) -> Result<Self> {
        let action_tokens = vocab
            .actions
            .iter()
            .map(|a| tokens.tokenize(a))
            .collect::<Result<Vec<_>>>()?;
        let object_tokens = vocab
            .objects
            .iter()
            .map(|o| tokens.tokenize(o))
            .collect::<Result<Vec<_>>>()?;
        let description_tokens = (0..vocab.num_interactions())
            .map(|id| tokens.tokenize(&bank.record_for(id).description))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            encoder,
            action_tokens,
            object_tokens,
            description_tokens,
            num_interactions: vocab.num_interactions(),
            interactions: vocab.interactions.clone(),
            seen_ids: vocab.seen_ids(),
            tb_cache: RefCell::new(None),
            tb_builds: Cell::new(0),
        })
    }

    pub fn width(&self) -> usize {
        self.encoder.config().width
    }

    /// Name-prompt rows for the given classes: each row encodes
    /// `[prefix ctx, action tokens, conjunct ctx, object tokens]` and is
    /// differentiable w.r.t. the context tensors.
    ///
    /// Rows are pooled over the action and object positions only, then
    /// centered on the mean of the seen-class rows and re-normalized. The
    /// frozen encoder gives every prompt a large shared component
    /// (scaffold tokens, positional rows) that carries no class
    /// information; centering removes it so cosine similarities actually
    /// spread. Centering on the seen mean also makes the seen rows sum to
    /// roughly zero, so no embedding direction is simultaneously far from
    /// every training class: a classifier cannot park all its mass in a
    /// blind spot, it has to discriminate. The whole vocabulary is always
    /// encoded, which keeps each class's row independent of the requested
    /// subset.
    pub fn hoi_matrix(
        &self,
        tape: &Tape,
        ctx_pre: &Tensor,
        ctx_con: &Tensor,
        classes: &ClassSet,
    ) -> Result<Tensor> {
        let width = self.width();
        let mut rows = Vec::with_capacity(self.num_interactions);
        for id in 0..self.num_interactions {
            let (a, o) = self.interactions[id];
            let mut slots = vec![TokenSlot::Embedded(ctx_pre.clone())];
            slots.extend(self.action_tokens[a].iter().map(|&t| TokenSlot::Id(t)));
            slots.push(TokenSlot::Embedded(ctx_con.clone()));
            slots.extend(self.object_tokens[o].iter().map(|&t| TokenSlot::Id(t)));
            let reps = self.encoder.encode_positions(tape, &slots)?;
            let a_len = self.action_tokens[a].len();
            let a_start = ctx_pre.shape()[0];
            let o_start = a_start + a_len + ctx_con.shape()[0];
            let o_len = reps.shape()[0] - o_start;
            let content = Tensor::concat(
                &[reps.slice(0, a_start, a_len)?, reps.slice(0, o_start, o_len)?],
                0,
            )?;
            rows.push(content.mean_axis(0)?.reshape(&[1, width])?);
        }
        let all = Tensor::concat(&rows, 0)?.l2_normalize()?;
        let n = self.num_interactions;
        let seen_rows = self
            .seen_ids
            .iter()
            .map(|&id| all.slice(0, id, 1))
            .collect::<Result<Vec<_>>>()?;
        let mean = Tensor::concat(&seen_rows, 0)?
            .mean_axis(0)?
            .reshape(&[1, width])?;
        let ones = tape.constant(vec![1.0; n], &[n, 1])?;
        let centered = all.sub(&ones.matmul(&mean)?)?.l2_normalize()?;
        let picked = classes
            .ids()
            .iter()
            .map(|&id| centered.slice(0, id, 1))
            .collect::<Result<Vec<_>>>()?;
        Tensor::concat(&picked, 0)
    }

    /// The cached description matrix over the full vocabulary, row per
    /// interaction id. Rows are centered on the seen-class mean and
    /// re-normalized, for the same conditioning reasons as `hoi_matrix`.
    pub fn description_matrix(&self) -> Result<Rc<[f64]>> {
        if let Some(cached) = self.tb_cache.borrow().as_ref() {
            return Ok(cached.clone());
        }
        let width = self.width();
        let n = self.num_interactions;
        let mut flat = Vec::with_capacity(n * width);
        for id in 0..n {
            flat.extend(self.encoder.encode_ids(&self.description_tokens[id])?);
        }
        let mut mean = vec![0.0; width];
        for &id in &self.seen_ids {
            let row = &flat[id * width..(id + 1) * width];
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / self.seen_ids.len() as f64;
            }
        }
        for row in flat.chunks_exact_mut(width) {
            for (v, m) in row.iter_mut().zip(&mean) {
                *v -= m;
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for v in row {
                *v /= norm;
            }
        }
        let matrix: Rc<[f64]> = flat.into();
        *self.tb_cache.borrow_mut() = Some(matrix.clone());
        self.tb_builds.set(self.tb_builds.get() + 1);
        Ok(matrix)
    }

    /// How many times the description matrix has actually been encoded.
    pub fn description_builds(&self) -> usize {
        self.tb_builds.get()
    }

    /// Description rows for the given classes as a tape constant.
    pub fn description_rows(&self, tape: &Tape, classes: &ClassSet) -> Result<Tensor> {
        let full = self.description_matrix()?;
        let width = self.width();
        let mut flat = Vec::with_capacity(classes.len() * width);
        for &id in classes.ids() {
            flat.extend_from_slice(&full[id * width..(id + 1) * width]);
        }
        tape.constant(flat, &[classes.len(), width])
    }
}

/// The per-step classifier state: both bank matrices bound to one tape plus
/// the fusion scalars. `alpha_b` is absent in the name-only configuration,
/// in which case the description term does not exist at all.
pub struct TextBank {
    pub t_hoi: Tensor,
    pub t_b: Tensor,
    pub alpha_hoi: Tensor,
    pub alpha_b: Option<Tensor>,
}

/// Fused interaction logits: `alpha_hoi * h T_hoi' + alpha_b * h T_b'`.
/// `h` is `[rows, width]`; result is `[rows, num_classes]`.
pub fn fuse_logits(h: &Tensor, bank: &TextBank) -> Result<Tensor> {
    let name_sim = h.matmul(&bank.t_hoi.transpose()?)?;
    let fused = name_sim.mul(&bank.alpha_hoi)?;
    match &bank.alpha_b {
        Some(alpha_b) => {
            let desc_sim = h.matmul(&bank.t_b.transpose()?)?;
            fused.add(&desc_sim.mul(alpha_b)?)
        }
        None => Ok(fused),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::TextConfig;
    use crate::numcore::gradcheck::{central_diff, max_rel_err};

    fn builtin_tokens() -> TokenVocab {
        TokenVocab::from_lines(include_str!("../fixtures/tokens.txt")).unwrap()
    }

    #[test]
    fn builtin_vocabulary_is_consistent() {
        let v = Vocabulary::builtin();
        assert_eq!(v.actions.len(), 10);
        assert_eq!(v.objects.len(), 8);
        assert_eq!(v.num_interactions(), 24);
        assert_eq!(v.unseen_ids(), vec![2, 6, 10, 18, 21]);
        // compositional holdout: every unseen action and object also occurs
        // in some seen pair
        for &u in &v.unseen_ids() {
            let (a, o) = v.interactions[u];
            assert!(v
                .interactions
                .iter()
                .zip(&v.seen)
                .any(|(&(a2, _), &s)| s && a2 == a));
            assert!(v
                .interactions
                .iter()
                .zip(&v.seen)
                .any(|(&(_, o2), &s)| s && o2 == o));
        }
    }

    #[test]
    fn vocabulary_validation_catches_bad_input() {
        assert!(Vocabulary::from_json(r#"{"actions":["a"],"objects":["o"],"interactions":[[0,0],[0,0]],"seen":[true,true]}"#).is_err());
        assert!(Vocabulary::from_json(r#"{"actions":["a"],"objects":["o"],"interactions":[[0,1]],"seen":[true]}"#).is_err());
        assert!(Vocabulary::from_json(r#"{"actions":["a"],"objects":["o"],"interactions":[[0,0]],"seen":[]}"#).is_err());
    }

    #[test]
    fn builtin_bank_covers_all_interactions() {
        let v = Vocabulary::builtin();
        let bank = DescriptionBank::builtin(&v).unwrap();
        for id in 0..v.num_interactions() {
            assert!(!bank.record_for(id).description.is_empty());
        }
    }

    #[test]
    fn bank_validation_names_the_missing_interaction() {
        let v = Vocabulary::from_json(
            r#"{"actions":["kick","hold"],"objects":["ball","cup"],
                "interactions":[[0,0],[0,1],[1,0],[1,1]],
                "seen":[true,true,true,true]}"#,
        )
        .unwrap();
        let records = vec![
            DescriptionRecord { action: "kick".into(), object: "ball".into(), body_parts: vec!["leg".into()], description: "leg extended".into() },
            DescriptionRecord { action: "kick".into(), object: "cup".into(), body_parts: vec!["leg".into()], description: "leg extended".into() },
            DescriptionRecord { action: "hold".into(), object: "cup".into(), body_parts: vec!["hand".into()], description: "hand closed".into() },
        ];
        match DescriptionBank::from_records(records, &v) {
            Err(Error::MissingDescription { id, .. }) => assert_eq!(id, 2),
            other => panic!("expected missing-description error, got {other:?}"),
        }
    }

    #[test]
    fn bank_rejects_unknown_body_part_and_empty_description() {
        let v = Vocabulary::from_json(
            r#"{"actions":["kick"],"objects":["ball"],"interactions":[[0,0]],"seen":[true]}"#,
        )
        .unwrap();
        let bad_part = vec![DescriptionRecord {
            action: "kick".into(),
            object: "ball".into(),
            body_parts: vec!["tail".into()],
            description: "leg extended".into(),
        }];
        assert!(matches!(
            DescriptionBank::from_records(bad_part, &v),
            Err(Error::UnknownBodyPart { .. })
        ));
        let empty = vec![DescriptionRecord {
            action: "kick".into(),
            object: "ball".into(),
            body_parts: vec!["leg".into()],
            description: "  ".into(),
        }];
        assert!(matches!(
            DescriptionBank::from_records(empty, &v),
            Err(Error::EmptyDescription { .. })
        ));
    }

    #[test]
    fn provider_contract_is_deterministic_pass_through() {
        let v = Vocabulary::builtin();
        let bank = DescriptionBank::builtin(&v).unwrap();
        let (parts, text) = bank.describe("kick", "ball").unwrap();
        assert_eq!(parts, vec!["leg", "foot"]);
        assert_eq!(text, "leg extended foot forward");
        assert_eq!(bank.describe("kick", "ball").unwrap(), (parts, text));
        assert!(matches!(
            bank.describe("kick", "cup"),
            Err(Error::DescriptionNotFound { .. })
        ));
    }

    fn builder_fixture(encoder: &TextEncoder) -> (Vocabulary, DescriptionBank, TokenVocab) {
        let v = Vocabulary::builtin();
        let bank = DescriptionBank::builtin(&v).unwrap();
        let _ = encoder;
        (v, bank, builtin_tokens())
    }

    #[test]
    fn description_matrix_is_cached_and_idempotent() {
        let tokens = builtin_tokens();
        let encoder = TextEncoder::new(TextConfig::default(), tokens.len()).unwrap();
        let (v, bank, tokens) = builder_fixture(&encoder);
        let builder = TextBankBuilder::new(&encoder, &v, &bank, &tokens).unwrap();
        assert_eq!(builder.description_builds(), 0);
        let a = builder.description_matrix().unwrap();
        let b = builder.description_matrix().unwrap();
        assert_eq!(builder.description_builds(), 1);
        assert!(Rc::ptr_eq(&a, &b));
        assert_eq!(a.len(), 24 * 32);
        // identical description strings produce identical rows: hold-cup (7)
        // and hold-book (8) share a phrase
        let row = |i: usize| &a[i * 32..(i + 1) * 32];
        assert_eq!(row(7), row(8));
        assert_ne!(row(0), row(7));
    }

    #[test]
    fn hoi_matrix_has_unit_rows_and_tracks_context() {
        let tokens = builtin_tokens();
        let encoder = TextEncoder::new(TextConfig::default(), tokens.len()).unwrap();
        let (v, bank, tokens) = builder_fixture(&encoder);
        let builder = TextBankBuilder::new(&encoder, &v, &bank, &tokens).unwrap();
        let classes = ClassSet::seen(&v);
        assert_eq!(classes.len(), 19);
        let tape = Tape::new();
        let ctx_pre = tape.variable(vec![0.01; 8 * 32], &[8, 32]).unwrap();
        let ctx_con = tape.variable(vec![0.01; 2 * 32], &[2, 32]).unwrap();
        let t_hoi = builder.hoi_matrix(&tape, &ctx_pre, &ctx_con, &classes).unwrap();
        assert_eq!(t_hoi.shape(), &[19, 32]);
        for r in 0..19 {
            let row = &t_hoi.value()[r * 32..(r + 1) * 32];
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-10);
        }
        t_hoi.sum().backward().unwrap();
        assert!(ctx_pre.grad().is_some());
        assert!(ctx_con.grad().is_some());
    }

    #[test]
    fn fusion_reduces_to_name_only_when_alpha_b_absent() {
        let tape = Tape::new();
        let h = tape.constant(vec![0.6, 0.8, -0.8, 0.6], &[2, 2]).unwrap();
        let t_hoi = tape.constant(vec![1.0, 0.0, 0.0, 1.0, 0.6, 0.8], &[3, 2]).unwrap();
        let t_b = tape.constant(vec![0.0, 1.0, 1.0, 0.0, 0.8, 0.6], &[3, 2]).unwrap();
        let alpha_hoi = tape.constant(vec![1.5], &[1]).unwrap();
        let name_only = TextBank {
            t_hoi: t_hoi.clone(),
            t_b: t_b.clone(),
            alpha_hoi: alpha_hoi.clone(),
            alpha_b: None,
        };
        let p = fuse_logits(&h, &name_only).unwrap();
        let direct = h.matmul(&t_hoi.transpose().unwrap()).unwrap().scale(1.5);
        assert_eq!(p.value(), direct.value());
        // alpha_b = 0 gives the same logits as no description term
        let zero_b = TextBank {
            t_hoi,
            t_b,
            alpha_hoi,
            alpha_b: Some(tape.constant(vec![0.0], &[1]).unwrap()),
        };
        let pz = fuse_logits(&h, &zero_b).unwrap();
        assert_eq!(p.value(), pz.value());
    }

    #[test]
    fn fusion_with_equal_banks_doubles_the_logits() {
        let tape = Tape::new();
        let h = tape.constant(vec![0.3, -0.4], &[1, 2]).unwrap();
        let t = tape.constant(vec![0.6, 0.8, -1.0, 0.0], &[2, 2]).unwrap();
        let one = tape.constant(vec![1.0], &[1]).unwrap();
        let bank = TextBank {
            t_hoi: t.clone(),
            t_b: t.clone(),
            alpha_hoi: one.clone(),
            alpha_b: Some(one),
        };
        let p = fuse_logits(&h, &bank).unwrap();
        let direct = h.matmul(&t.transpose().unwrap()).unwrap().scale(2.0);
        for (a, b) in p.value().iter().zip(direct.value()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn fusion_argmax_is_invariant_to_query_rescaling() {
        let tape = Tape::new();
        let h = tape.constant(vec![0.3, -0.4, 0.2, 0.9], &[1, 4]).unwrap();
        let h2 = h.scale(3.7);
        let t_hoi = tape
            .constant((0..12).map(|i| (i as f64 * 0.77).sin()).collect(), &[3, 4])
            .unwrap();
        let t_b = tape
            .constant((0..12).map(|i| (i as f64 * 1.3).cos()).collect(), &[3, 4])
            .unwrap();
        let bank = TextBank {
            t_hoi,
            t_b,
            alpha_hoi: tape.constant(vec![1.0], &[1]).unwrap(),
            alpha_b: Some(tape.constant(vec![0.5], &[1]).unwrap()),
        };
        let argmax = |t: &Tensor| {
            t.value()
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        let p1 = fuse_logits(&h, &bank).unwrap();
        let p2 = fuse_logits(&h2, &bank).unwrap();
        assert_eq!(argmax(&p1), argmax(&p2));
    }

    #[test]
    fn fusion_scalars_match_finite_differences() {
        let h_data = vec![0.3, -0.4, 0.2, 0.9, -0.1, 0.5];
        let thoi_data: Vec<f64> = (0..9).map(|i| (i as f64 * 0.7).sin()).collect();
        let tb_data: Vec<f64> = (0..9).map(|i| (i as f64 * 1.1).cos()).collect();
        let run = |alphas: &[f64], grad: bool| {
            let tape = Tape::new();
            let make = |d: &[f64], s: &[usize]| tape.constant(d.to_vec(), s).unwrap();
            let h = make(&h_data, &[2, 3]);
            let bank = TextBank {
                t_hoi: make(&thoi_data, &[3, 3]),
                t_b: make(&tb_data, &[3, 3]),
                alpha_hoi: if grad {
                    tape.variable(vec![alphas[0]], &[1]).unwrap()
                } else {
                    tape.constant(vec![alphas[0]], &[1]).unwrap()
                },
                alpha_b: Some(if grad {
                    tape.variable(vec![alphas[1]], &[1]).unwrap()
                } else {
                    tape.constant(vec![alphas[1]], &[1]).unwrap()
                }),
            };
            let p = fuse_logits(&h, &bank).unwrap();
            let loss = p.mul(&p).unwrap().sum();
            if grad {
                loss.backward().unwrap();
                let ga = bank.alpha_hoi.grad().unwrap()[0];
                let gb = bank.alpha_b.as_ref().unwrap().grad().unwrap()[0];
                (loss.item().unwrap(), Some(vec![ga, gb]))
            } else {
                (loss.item().unwrap(), None)
            }
        };
        let at = vec![1.0, 0.5];
        let (_, analytic) = run(&at, true);
        let mut f = |x: &[f64]| run(x, false).0;
        let numeric = central_diff(&mut f, &at, 1e-5);
        assert!(max_rel_err(&analytic.unwrap(), &numeric) < 1e-6);
    }
}
