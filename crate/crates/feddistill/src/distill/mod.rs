//! Group-aware distillation losses. A client's classes are split by local
//! frequency into rich and few-shot groups; softmax outputs are decomposed
//! into target, rich, and few-shot parts, and each part is distilled with its
//! own weight. Cross-model variants tie a local model to a decomposed copy of
//! the global model.

pub mod graph;

use std::collections::BTreeSet;

use thiserror::Error;

use crate::nn::{softmax_row_into, NnError};
use crate::scalar::{Scalar, LOG_EPS};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("cannot derive class groups from an empty dataset")]
    EmptyDataset,
    #[error("group threshold must lie in [0, 1], got {value}")]
    InvalidThreshold { value: Scalar },
    #[error("class {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },
}

/// Static rich/few-shot split of the label space for one client.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassGroups {
    num_classes: usize,
    rich: BTreeSet<usize>,
    threshold: Scalar,
}

impl ClassGroups {
    /// Classes whose local frequency strictly exceeds `threshold` are rich;
    /// the rest (including locally absent classes) are few-shot.
    pub fn from_counts(counts: &[usize], threshold: Scalar) -> Result<Self, DistillError> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(DistillError::InvalidThreshold { value: threshold });
        }
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(DistillError::EmptyDataset);
        }
        let rich = counts
            .iter()
            .enumerate()
            .filter(|&(_, &n)| n as Scalar / total as Scalar > threshold)
            .map(|(c, _)| c)
            .collect();
        Ok(Self { num_classes: counts.len(), rich, threshold })
    }

    /// Builds groups from an explicit rich set; used by tests and tooling.
    pub fn from_rich_set(
        num_classes: usize,
        rich: BTreeSet<usize>,
        threshold: Scalar,
    ) -> Result<Self, DistillError> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(DistillError::InvalidThreshold { value: threshold });
        }
        if let Some(&c) = rich.iter().find(|&&c| c >= num_classes) {
            return Err(DistillError::ClassOutOfRange { class: c, num_classes });
        }
        Ok(Self { num_classes, rich, threshold })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn threshold(&self) -> Scalar {
        self.threshold
    }

    pub fn is_rich(&self, class: usize) -> bool {
        self.rich.contains(&class)
    }

    pub fn rich_classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.rich.iter().copied()
    }

    pub fn few_classes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_classes).filter(|c| !self.rich.contains(c))
    }
}

/// A probability row split into target / non-target parts, with the
/// non-target remainder renormalized and lumped by group.
///
/// When the non-target mass is at or below the log floor every normalized
/// field is defined as zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposed {
    pub target_class: usize,
    /// Probability of the target class.
    pub target_prob: Scalar,
    /// 1 - target_prob.
    pub non_target_mass: Scalar,
    /// Non-target probabilities renormalized to sum to one; the target entry
    /// is zero.
    pub non_target: Vec<Scalar>,
    /// Renormalized mass of the few-shot classes other than the target.
    pub few_mass: Scalar,
    /// Renormalized mass of the rich classes other than the target.
    pub rich_mass: Scalar,
}

pub fn decompose(probs: &[Scalar], target_class: usize, groups: &ClassGroups) -> Decomposed {
    assert_eq!(probs.len(), groups.num_classes(), "probability row length mismatch");
    assert!(target_class < probs.len(), "target class out of range");
    let target_prob = probs[target_class];
    let non_target_mass = 1.0 - target_prob;
    let mut non_target = vec![0.0; probs.len()];
    let mut few_mass = 0.0;
    let mut rich_mass = 0.0;
    if non_target_mass > LOG_EPS {
        for (c, &p) in probs.iter().enumerate() {
            if c == target_class {
                continue;
            }
            let scaled = p / non_target_mass;
            non_target[c] = scaled;
            if groups.is_rich(c) {
                rich_mass += scaled;
            } else {
                few_mass += scaled;
            }
        }
    }
    Decomposed { target_class, target_prob, non_target_mass, non_target, few_mass, rich_mass }
}

/// One summand of a KL divergence, with the zero convention for a vanishing
/// first argument and the log floor on the second.
fn kl_term(p: Scalar, q: Scalar) -> Scalar {
    if p <= LOG_EPS {
        0.0
    } else {
        p * (p / q.max(LOG_EPS)).ln()
    }
}

/// Elementwise KL divergence sum over two probability rows.
pub fn kl_div(p: &[Scalar], q: &[Scalar]) -> Scalar {
    assert_eq!(p.len(), q.len());
    p.iter().zip(q).map(|(&a, &b)| kl_term(a, b)).sum()
}

/// Binary KL between (target, non-target) masses of teacher and student.
pub fn target_kd(teacher: &Decomposed, student: &Decomposed) -> Scalar {
    debug_assert_eq!(teacher.target_class, student.target_class);
    kl_term(teacher.target_prob, student.target_prob)
        + kl_term(teacher.non_target_mass, student.non_target_mass)
}

/// KL over renormalized rich classes, with all few-shot classes lumped into
/// a single event. Zero when either side has no non-target mass.
pub fn rich_kd(teacher: &Decomposed, student: &Decomposed, groups: &ClassGroups) -> Scalar {
    debug_assert_eq!(teacher.target_class, student.target_class);
    if teacher.non_target_mass <= LOG_EPS || student.non_target_mass <= LOG_EPS {
        return 0.0;
    }
    let per_class: Scalar = groups
        .rich_classes()
        .filter(|&c| c != teacher.target_class)
        .map(|c| kl_term(teacher.non_target[c], student.non_target[c]))
        .sum();
    per_class + kl_term(teacher.few_mass, student.few_mass)
}

/// Mirror image of `rich_kd`: few-shot classes individually, rich classes
/// lumped.
pub fn few_kd(teacher: &Decomposed, student: &Decomposed, groups: &ClassGroups) -> Scalar {
    debug_assert_eq!(teacher.target_class, student.target_class);
    if teacher.non_target_mass <= LOG_EPS || student.non_target_mass <= LOG_EPS {
        return 0.0;
    }
    let per_class: Scalar = groups
        .few_classes()
        .filter(|&c| c != teacher.target_class)
        .map(|c| kl_term(teacher.non_target[c], student.non_target[c]))
        .sum();
    per_class + kl_term(teacher.rich_mass, student.rich_mass)
}

/// Weights of the three group-distillation parts plus the softmax
/// temperature applied to both models' logits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupDistillConfig {
    pub alpha_t: Scalar,
    pub alpha_r: Scalar,
    pub alpha_f: Scalar,
    pub temperature: Scalar,
}

impl Default for GroupDistillConfig {
    fn default() -> Self {
        Self { alpha_t: 0.0, alpha_r: 0.5, alpha_f: 1.0, temperature: 1.0 }
    }
}

/// Weighted sum of the target, rich, and few-shot distillation terms for one
/// pair of probability rows (already at the desired temperature).
pub fn group_distill(
    teacher_probs: &[Scalar],
    student_probs: &[Scalar],
    target_class: usize,
    groups: &ClassGroups,
    cfg: &GroupDistillConfig,
) -> Scalar {
    let teacher = decompose(teacher_probs, target_class, groups);
    let student = decompose(student_probs, target_class, groups);
    cfg.alpha_t * target_kd(&teacher, &student)
        + cfg.alpha_r * rich_kd(&teacher, &student, groups)
        + cfg.alpha_f * few_kd(&teacher, &student, groups)
}

/// `group_distill` applied to logit rows, softmaxed at `cfg.temperature`.
pub fn group_distill_from_logits(
    teacher_logits: &[Scalar],
    student_logits: &[Scalar],
    target_class: usize,
    groups: &ClassGroups,
    cfg: &GroupDistillConfig,
) -> Result<Scalar, NnError> {
    if !(cfg.temperature > 0.0) {
        return Err(NnError::InvalidTemperature { value: cfg.temperature });
    }
    let mut tp = vec![0.0; teacher_logits.len()];
    let mut sp = vec![0.0; student_logits.len()];
    softmax_row_into(teacher_logits, cfg.temperature, &mut tp);
    softmax_row_into(student_logits, cfg.temperature, &mut sp);
    Ok(group_distill(&tp, &sp, target_class, groups, cfg))
}

/// Softmax outputs of every extractor/classifier pairing of two models on one
/// batch, at temperature 1. Field names read extractor-then-classifier:
/// `gl` is the local classifier applied to global features.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossPredictions {
    pub gg: Tensor,
    pub gl: Tensor,
    pub lg: Tensor,
    pub ll: Tensor,
}

use crate::nn::{softmax_rows, ModelParams};

/// Runs both extractors once and all four classifier pairings.
pub fn cross_predict(
    global: &ModelParams,
    local: &ModelParams,
    batch: &Tensor,
) -> Result<CrossPredictions, NnError> {
    let (g_ext, g_cls) = global.split();
    let (l_ext, l_cls) = local.split();
    let feat_g = g_ext.forward(batch)?;
    let feat_l = l_ext.forward(batch)?;
    Ok(CrossPredictions {
        gg: softmax_rows(&g_cls.forward(&feat_g)?, 1.0)?,
        gl: softmax_rows(&l_cls.forward(&feat_g)?, 1.0)?,
        lg: softmax_rows(&g_cls.forward(&feat_l)?, 1.0)?,
        ll: softmax_rows(&l_cls.forward(&feat_l)?, 1.0)?,
    })
}

/// Term weights of the composite local objective:
/// CE(ll) + beta_l * GD(gg, ll) + beta_e * CE(lg) + beta_fc * GD(gg, gl).
/// Terms with a weight of exactly zero are not evaluated at all.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompositeLossConfig {
    pub beta_l: Scalar,
    pub beta_e: Scalar,
    pub beta_fc: Scalar,
    pub gd: GroupDistillConfig,
}

impl Default for CompositeLossConfig {
    fn default() -> Self {
        Self { beta_l: 1.0, beta_e: 0.3, beta_fc: 0.3, gd: GroupDistillConfig::default() }
    }
}

/// Reference value of the composite objective, averaged over the batch.
pub fn composite_loss(
    preds: &CrossPredictions,
    labels: &[usize],
    groups: &ClassGroups,
    cfg: &CompositeLossConfig,
) -> Result<Scalar, NnError> {
    use crate::nn::cross_entropy_mean;
    let mut loss = cross_entropy_mean(&preds.ll, labels)?;
    let tau = cfg.gd.temperature;
    if cfg.beta_l != 0.0 {
        loss += cfg.beta_l * mean_group_distill(&preds.gg, &preds.ll, labels, groups, cfg, tau)?;
    }
    if cfg.beta_e != 0.0 {
        loss += cfg.beta_e * cross_entropy_mean(&preds.lg, labels)?;
    }
    if cfg.beta_fc != 0.0 {
        loss += cfg.beta_fc * mean_group_distill(&preds.gg, &preds.gl, labels, groups, cfg, tau)?;
    }
    Ok(loss)
}

fn mean_group_distill(
    teacher: &Tensor,
    student: &Tensor,
    labels: &[usize],
    groups: &ClassGroups,
    cfg: &CompositeLossConfig,
    tau: Scalar,
) -> Result<Scalar, NnError> {
    let (rows, cols) = teacher.dim2();
    assert_eq!(student.dim2(), (rows, cols));
    assert_eq!(labels.len(), rows);
    let t = rescale_rows(teacher, tau)?;
    let s = rescale_rows(student, tau)?;
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        total += group_distill(
            &t.data()[r * cols..(r + 1) * cols],
            &s.data()[r * cols..(r + 1) * cols],
            label,
            groups,
            &cfg.gd,
        );
    }
    Ok(total / rows as Scalar)
}

/// Moves temperature-1 probabilities to temperature `tau` by re-softmaxing
/// their clamped logs. Identity at tau = 1.
pub fn rescale_rows(probs: &Tensor, tau: Scalar) -> Result<Tensor, NnError> {
    if !(tau > 0.0) {
        return Err(NnError::InvalidTemperature { value: tau });
    }
    if tau == 1.0 {
        return Ok(probs.clone());
    }
    let (rows, cols) = probs.dim2();
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let logs: Vec<Scalar> =
            probs.data()[r * cols..(r + 1) * cols].iter().map(|&p| p.max(LOG_EPS).ln()).collect();
        softmax_row_into(&logs, tau, &mut out[r * cols..(r + 1) * cols]);
    }
    Ok(Tensor::new(vec![rows, cols], out))
}
