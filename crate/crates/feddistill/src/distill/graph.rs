//! Tape builders for the local training objectives. The teacher side of every
//! distillation term is folded into constant coefficient tensors; gradient
//! only flows through the student model.

use super::{decompose, ClassGroups, CompositeLossConfig, GroupDistillConfig};
use crate::nn::{record_model, softmax_rows, ModelParams, NnError, NodeId, Tape, TapedModel};
use crate::scalar::{Scalar, LOG_EPS};
use crate::tensor::Tensor;

/// Mean of -log probs[b, labels[b]] as tape nodes.
pub fn cross_entropy_graph(
    tape: &mut Tape,
    probs: NodeId,
    labels: &[usize],
) -> Result<NodeId, NnError> {
    let picked = tape.gather_true(probs, labels)?;
    let logs = tape.log_clamped(picked);
    let neg = tape.scale(logs, -1.0);
    Ok(tape.mean_all(neg))
}

/// Plain cross-entropy objective of a taped model on one batch. Returns
/// (features, temperature-1 probabilities, logits, loss) so callers can hang
/// more terms off the same forward pass.
pub fn local_ce_graph(
    tape: &mut Tape,
    local: &TapedModel,
    batch: &Tensor,
    labels: &[usize],
) -> Result<(NodeId, NodeId, NodeId, NodeId), NnError> {
    let x = tape.constant(batch.clone());
    let (features, logits) = local.forward(tape, x)?;
    let probs = tape.softmax_rows(logits, 1.0)?;
    let loss = cross_entropy_graph(tape, probs, labels)?;
    Ok((features, probs, logits, loss))
}

/// Batch-mean group distillation of a student node against fixed teacher
/// probabilities (both already at the loss temperature).
///
/// The value equals the pure `group_distill` mean up to the difference
/// between ln(p/q) and ln(p) - ln(q); teacher-degenerate rows contribute
/// zero through zeroed coefficients. Student rows are assumed to carry
/// non-target mass above the log floor, which softmax guarantees for any
/// realizable logit spread.
pub fn group_distill_graph(
    tape: &mut Tape,
    teacher_probs: &Tensor,
    student_probs: NodeId,
    labels: &[usize],
    groups: &ClassGroups,
    cfg: &GroupDistillConfig,
) -> Result<NodeId, NnError> {
    let (rows, cols) = teacher_probs.dim2();
    assert_eq!(tape.value(student_probs).dim2(), (rows, cols));
    assert_eq!(labels.len(), rows);

    // p log p with the zero convention.
    let plogp = |p: Scalar| if p <= LOG_EPS { 0.0 } else { p * p.ln() };
    // Coefficient of -log(student quantity); zero convention on the teacher.
    let coef = |p: Scalar| if p <= LOG_EPS { 0.0 } else { p };

    let mut const_part = vec![0.0; rows];
    let mut coef_target = vec![0.0; rows];
    let mut coef_non_target_mass = vec![0.0; rows];
    let mut coef_classes = vec![0.0; rows * cols];
    let mut coef_few_mass = vec![0.0; rows];
    let mut coef_rich_mass = vec![0.0; rows];
    let mut few_mask = vec![0.0; rows * cols];
    let mut rich_mask = vec![0.0; rows * cols];

    for (r, &label) in labels.iter().enumerate() {
        let t = decompose(&teacher_probs.data()[r * cols..(r + 1) * cols], label, groups);
        coef_target[r] = cfg.alpha_t * coef(t.target_prob);
        coef_non_target_mass[r] = cfg.alpha_t * coef(t.non_target_mass);
        const_part[r] = cfg.alpha_t * (plogp(t.target_prob) + plogp(t.non_target_mass));
        for c in 0..cols {
            if c == label {
                continue;
            }
            let alpha = if groups.is_rich(c) { cfg.alpha_r } else { cfg.alpha_f };
            coef_classes[r * cols + c] = alpha * coef(t.non_target[c]);
            const_part[r] += alpha * plogp(t.non_target[c]);
            if groups.is_rich(c) {
                rich_mask[r * cols + c] = 1.0;
            } else {
                few_mask[r * cols + c] = 1.0;
            }
        }
        coef_few_mass[r] = cfg.alpha_r * coef(t.few_mass);
        coef_rich_mass[r] = cfg.alpha_f * coef(t.rich_mass);
        const_part[r] += cfg.alpha_r * plogp(t.few_mass) + cfg.alpha_f * plogp(t.rich_mass);
    }

    let student_target = tape.gather_true(student_probs, labels)?;
    let student_mass = tape.one_minus(student_target);
    let log_target = tape.log_clamped(student_target);
    let log_mass = tape.log_clamped(student_mass);
    let normalized = tape.div_by_col(student_probs, student_mass);
    let log_normalized = tape.log_clamped(normalized);

    let few_mask = tape.constant(Tensor::new(vec![rows, cols], few_mask));
    let rich_mask = tape.constant(Tensor::new(vec![rows, cols], rich_mask));
    let few_in = tape.mul(normalized, few_mask);
    let student_few = tape.sum_rows(few_in);
    let rich_in = tape.mul(normalized, rich_mask);
    let student_rich = tape.sum_rows(rich_in);
    let log_few = tape.log_clamped(student_few);
    let log_rich = tape.log_clamped(student_rich);

    let coef_target = tape.constant(Tensor::new(vec![rows], coef_target));
    let coef_mass = tape.constant(Tensor::new(vec![rows], coef_non_target_mass));
    let coef_classes = tape.constant(Tensor::new(vec![rows, cols], coef_classes));
    let coef_few = tape.constant(Tensor::new(vec![rows], coef_few_mass));
    let coef_rich = tape.constant(Tensor::new(vec![rows], coef_rich_mass));
    let const_part = tape.constant(Tensor::new(vec![rows], const_part));

    let t1 = tape.mul(coef_target, log_target);
    let t2 = tape.mul(coef_mass, log_mass);
    let per_class = tape.mul(coef_classes, log_normalized);
    let t3 = tape.sum_rows(per_class);
    let t4 = tape.mul(coef_few, log_few);
    let t5 = tape.mul(coef_rich, log_rich);

    let s12 = tape.add(t1, t2);
    let s123 = tape.add(s12, t3);
    let s45 = tape.add(t4, t5);
    let cross = tape.add(s123, s45);
    let neg = tape.scale(cross, -1.0);
    let per_sample = tape.add(const_part, neg);
    Ok(tape.mean_all(per_sample))
}

/// Full local objective on the tape:
/// CE(ll) + beta_l GD(gg, ll) + beta_e CE(lg) + beta_fc GD(gg, gl),
/// where the first letter names the extractor and the second the classifier.
/// Zero-weighted terms record no nodes at all, so a configuration with all
/// betas zero builds exactly the plain cross-entropy graph.
pub fn composite_loss_graph(
    tape: &mut Tape,
    global: &ModelParams,
    local: &TapedModel,
    batch: &Tensor,
    labels: &[usize],
    groups: &ClassGroups,
    cfg: &CompositeLossConfig,
) -> Result<NodeId, NnError> {
    let (features_l, probs_ll, logits_ll, mut loss) = local_ce_graph(tape, local, batch, labels)?;
    if cfg.beta_l == 0.0 && cfg.beta_e == 0.0 && cfg.beta_fc == 0.0 {
        return Ok(loss);
    }

    let tau = cfg.gd.temperature;
    if !(tau > 0.0) {
        return Err(NnError::InvalidTemperature { value: tau });
    }
    let (features_g, logits_g) = global.forward(batch)?;
    let teacher_tau = softmax_rows(&logits_g, tau)?;

    if cfg.beta_l != 0.0 {
        let student_tau =
            if tau == 1.0 { probs_ll } else { tape.softmax_rows(logits_ll, tau)? };
        let gd = group_distill_graph(tape, &teacher_tau, student_tau, labels, groups, &cfg.gd)?;
        let scaled = tape.scale(gd, cfg.beta_l);
        loss = tape.add(loss, scaled);
    }
    if cfg.beta_e != 0.0 {
        let frozen_global = record_model(tape, global, false);
        let logits_lg = frozen_global.forward_classifier(tape, features_l)?;
        let probs_lg = tape.softmax_rows(logits_lg, 1.0)?;
        let ce = cross_entropy_graph(tape, probs_lg, labels)?;
        let scaled = tape.scale(ce, cfg.beta_e);
        loss = tape.add(loss, scaled);
    }
    if cfg.beta_fc != 0.0 {
        let detached_features = tape.constant(features_g);
        let logits_gl = local.forward_classifier(tape, detached_features)?;
        let probs_gl = tape.softmax_rows(logits_gl, tau)?;
        let gd = group_distill_graph(tape, &teacher_tau, probs_gl, labels, groups, &cfg.gd)?;
        let scaled = tape.scale(gd, cfg.beta_fc);
        loss = tape.add(loss, scaled);
    }
    Ok(loss)
}
