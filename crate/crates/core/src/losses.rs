//! Loss terms, exact analytic gradients, and the one-step optimizers.
//!
//! The adaptation objective is
//! `L = lambda_trg * L_st + lambda_cont * L_cont`, where `L_st` is a
//! symmetric-cross-entropy consistency loss against EMA-teacher targets
//! (averaged over an original and an augmented view) and `L_cont` is an
//! InfoNCE-style pull of adapted features toward their nearest source
//! prototype by cosine similarity.
//!
//! Gradients are taken with respect to the adapter scaling vector and the
//! backbone affine pair only; teacher outputs and prototype assignments are
//! stop-gradient constants. Everything is closed form, so the gradients are
//! checkable against central finite differences to near machine precision.

use crate::adapter::AdapterState;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::{Backbone, ClassifierHead, EmaTeacher, PrototypeBank};

/// Probability floor applied before every logarithm.
pub const PROB_FLOOR: f64 = 1e-12;
/// Feature rows with norm below this are excluded from the contrastive term.
pub const FEATURE_NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone)]
pub struct LossConfig {
    pub lambda_trg: f64,
    pub lambda_cont: f64,
    /// Contrastive temperature (softmax sharpness over prototype cosines).
    pub temperature: f64,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Weight on CE(teacher || student) inside the symmetric term.
    pub sce_weight_forward: f64,
    /// Weight on CE(student || teacher) inside the symmetric term.
    pub sce_weight_reverse: f64,
    /// Restrict the contrastive sum to the high-confidence subset.
    pub contrastive_confident_only: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_trg: 1.0,
            lambda_cont: 1.0,
            temperature: 0.1,
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            sce_weight_forward: 1.0,
            sce_weight_reverse: 1.0,
            contrastive_confident_only: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_trg < 0.0 || self.lambda_cont < 0.0 {
            return Err(Error::config("loss weights must be non-negative"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::config("adam betas must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Losses plus the exact gradients for one adaptation step.
#[derive(Debug, Clone)]
pub struct GradBundle {
    pub d_s: Vec<f64>,
    pub d_gain: Vec<f64>,
    pub d_bias: Vec<f64>,
    pub loss_st: f64,
    pub loss_cont: f64,
    pub loss_total: f64,
}

/// Numerically stable softmax of one logit row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut out: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Row-wise softmax of a logit matrix.
pub fn softmax_rows(z: &Mat) -> Mat {
    let mut out = Mat::zeros(z.rows(), z.cols());
    for i in 0..z.rows() {
        let p = softmax(z.row(i));
        out.row_mut(i).copy_from_slice(&p);
    }
    out
}

/// Symmetric cross entropy between two logit batches: the batch mean of
/// `CE(q || p) + CE(p || q)` with probabilities floored at 1e-12 before
/// the logarithm. Symmetric in its arguments by construction.
pub fn sce(student_logits: &Mat, teacher_logits: &Mat) -> Result<f64> {
    check_same_shape(student_logits, teacher_logits)?;
    Ok(weighted_sce(student_logits, teacher_logits, 1.0, 1.0))
}

fn check_same_shape(a: &Mat, b: &Mat) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::dimension(format!(
            "logit shapes differ: {}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(())
}

fn weighted_sce(student: &Mat, teacher: &Mat, w_fwd: f64, w_rev: f64) -> f64 {
    let n = student.rows();
    let mut acc = 0.0;
    for i in 0..n {
        let p = softmax(student.row(i));
        let q = softmax(teacher.row(i));
        let mut ce_fwd = 0.0; // -sum q ln p
        let mut ce_rev = 0.0; // -sum p ln q
        for c in 0..p.len() {
            ce_fwd -= q[c] * p[c].max(PROB_FLOOR).ln();
            ce_rev -= p[c] * q[c].max(PROB_FLOOR).ln();
        }
        acc += w_fwd * ce_fwd + w_rev * ce_rev;
    }
    acc / n as f64
}

/// `L_st = 1/2 SCE(y, y_ema) + 1/2 SCE(y_aug, y_ema)`.
pub fn self_training_loss(y: &Mat, y_aug: &Mat, y_ema: &Mat) -> Result<f64> {
    check_same_shape(y, y_aug)?;
    check_same_shape(y, y_ema)?;
    Ok(0.5 * sce(y, y_ema)? + 0.5 * sce(y_aug, y_ema)?)
}

/// Per-sample prototype assignment: the active class whose prototype has
/// the largest cosine similarity with the (adapted) original-view feature.
/// `None` marks samples excluded from the contrastive term: degenerate
/// feature norm in either view, or outside the restriction set.
pub fn prototype_assignments(
    f: &Mat,
    f_aug: &Mat,
    protos: &PrototypeBank,
    restrict: Option<&[usize]>,
) -> Result<Vec<Option<usize>>> {
    check_same_shape(f, f_aug)?;
    if f.cols() != protos.p.cols() {
        return Err(Error::dimension("feature and prototype dimensions differ"));
    }
    let active = protos.active_classes();
    if active.is_empty() {
        return Err(Error::Degenerate);
    }
    let allowed: Option<Vec<bool>> = restrict.map(|set| {
        let mut mask = vec![false; f.rows()];
        for &i in set {
            if i < mask.len() {
                mask[i] = true;
            }
        }
        mask
    });
    let mut out = Vec::with_capacity(f.rows());
    for i in 0..f.rows() {
        if let Some(mask) = &allowed {
            if !mask[i] {
                out.push(None);
                continue;
            }
        }
        let norm = row_norm(f.row(i));
        let norm_aug = row_norm(f_aug.row(i));
        if norm < FEATURE_NORM_FLOOR || norm_aug < FEATURE_NORM_FLOOR {
            out.push(None);
            continue;
        }
        let mut best = active[0];
        let mut best_sim = f64::NEG_INFINITY;
        for &c in &active {
            let sim = cosine(f.row(i), protos.p.row(c));
            if sim > best_sim {
                best_sim = sim;
                best = c;
            }
        }
        out.push(Some(best));
    }
    Ok(out)
}

/// InfoNCE-style prototype contrastive loss over both views, with
/// assignments chosen by this call. Zero-count prototype classes are
/// excluded from both the argmax and the softmax denominator.
pub fn prototype_contrastive_loss(
    f: &Mat,
    f_aug: &Mat,
    protos: &PrototypeBank,
    temperature: f64,
) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(Error::config("temperature must be positive"));
    }
    let assign = prototype_assignments(f, f_aug, protos, None)?;
    Ok(contrastive_value(f, f_aug, protos, temperature, &assign))
}

/// Contrastive value with externally fixed assignments (the stop-gradient
/// form used by the gradient path and the finite-difference oracle).
pub fn contrastive_value(
    f: &Mat,
    f_aug: &Mat,
    protos: &PrototypeBank,
    temperature: f64,
    assignments: &[Option<usize>],
) -> f64 {
    let active = protos.active_classes();
    let n_valid = assignments.iter().filter(|a| a.is_some()).count();
    if n_valid == 0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for (i, assigned) in assignments.iter().enumerate() {
        let Some(k) = assigned else { continue };
        for view in [f, f_aug] {
            let row = view.row(i);
            acc += info_nce_row(row, protos, &active, *k, temperature).0;
        }
    }
    acc / (2.0 * n_valid as f64)
}

/// One view's InfoNCE term and the softmax over active-class cosines.
fn info_nce_row(
    row: &[f64],
    protos: &PrototypeBank,
    active: &[usize],
    k: usize,
    temperature: f64,
) -> (f64, Vec<f64>, Vec<f64>) {
    let sims: Vec<f64> = active.iter().map(|&c| cosine(row, protos.p.row(c))).collect();
    let scaled: Vec<f64> = sims.iter().map(|s| s / temperature).collect();
    let max = scaled.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    let mut weights: Vec<f64> = scaled.iter().map(|&v| (v - max).exp()).collect();
    for w in &weights {
        sum += w;
    }
    for w in &mut weights {
        *w /= sum;
    }
    let lse = max + sum.ln();
    let k_pos = active.iter().position(|&c| c == k).expect("assignment must be active");
    let loss = lse - scaled[k_pos];
    (loss, sims, weights)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = row_norm(a);
    let nb = row_norm(b);
    if na < FEATURE_NORM_FLOOR || nb < FEATURE_NORM_FLOOR {
        return 0.0;
    }
    let mut dot = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
    }
    dot / (na * nb)
}

fn row_norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Everything the loss needs for one batch; features are recomputed from
/// the inputs so the affine gradients stay exact.
pub struct AdaptationInputs<'a> {
    pub adapter: &'a AdapterState,
    pub backbone: &'a Backbone,
    pub head: &'a ClassifierHead,
    pub teacher: &'a EmaTeacher,
    pub x: &'a Mat,
    pub x_aug: &'a Mat,
    pub protos: &'a PrototypeBank,
    /// High-confidence subset, used only when the config restricts the
    /// contrastive term.
    pub confident: Option<&'a [usize]>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossValues {
    pub loss_st: f64,
    pub loss_cont: f64,
    pub loss_total: f64,
}

struct Forward {
    act: Mat,
    act_aug: Mat,
    u: Mat,
    u_aug: Mat,
    fa: Mat,
    fa_aug: Mat,
    y: Mat,
    y_aug: Mat,
    teacher_logits: Mat,
}

fn forward(inp: &AdaptationInputs) -> Result<Forward> {
    if inp.x.rows() != inp.x_aug.rows() {
        return Err(Error::dimension("original and augmented views must have equal batch sizes"));
    }
    let act = inp.backbone.activations(inp.x)?;
    let act_aug = inp.backbone.activations(inp.x_aug)?;
    let f = inp.backbone.apply_affine(&act);
    let f_aug = inp.backbone.apply_affine(&act_aug);
    let u = inp.adapter.project(&f)?;
    let u_aug = inp.adapter.project(&f_aug)?;
    let fa = apply_adapter(&f, &u, inp.adapter);
    let fa_aug = apply_adapter(&f_aug, &u_aug, inp.adapter);
    let y = inp.head.logits(&fa)?;
    let y_aug = inp.head.logits(&fa_aug)?;
    // Teacher sees the un-adapted features through its own affine pair.
    let teacher_logits = inp.teacher.head.logits(&inp.teacher.apply_affine(&act))?;
    Ok(Forward { act, act_aug, u, u_aug, fa, fa_aug, y, y_aug, teacher_logits })
}

fn apply_adapter(f: &Mat, u: &Mat, adapter: &AdapterState) -> Mat {
    let s = adapter.scaling();
    if s.iter().all(|&x| x == 0.0) {
        return f.clone();
    }
    let scaled = Mat::from_fn(u.rows(), u.cols(), |i, j| u.get(i, j) * s[j]);
    f.add(&scaled.matmul_nt(adapter.basis()))
}

/// Assignments the gradient step will hold fixed, computed at the current
/// parameters: adapted original-view features against the prototypes.
pub fn current_assignments(inp: &AdaptationInputs) -> Result<Vec<Option<usize>>> {
    let fwd = forward(inp)?;
    prototype_assignments(&fwd.fa, &fwd.fa_aug, inp.protos, inp.confident)
}

/// Loss evaluation with fixed prototype assignments; the teacher is always
/// a constant. Used by the finite-difference oracle and the line-search
/// property test.
pub fn total_loss_at(
    inp: &AdaptationInputs,
    cfg: &LossConfig,
    assignments: &[Option<usize>],
) -> Result<LossValues> {
    let fwd = forward(inp)?;
    let loss_st = 0.5 * weighted_sce(&fwd.y, &fwd.teacher_logits, cfg.sce_weight_forward, cfg.sce_weight_reverse)
        + 0.5 * weighted_sce(&fwd.y_aug, &fwd.teacher_logits, cfg.sce_weight_forward, cfg.sce_weight_reverse);
    let loss_cont = contrastive_value(&fwd.fa, &fwd.fa_aug, inp.protos, cfg.temperature, assignments);
    Ok(LossValues {
        loss_st,
        loss_cont,
        loss_total: cfg.lambda_trg * loss_st + cfg.lambda_cont * loss_cont,
    })
}

/// Total loss and its exact analytic gradients with respect to the adapter
/// scaling vector and the backbone affine pair.
pub fn total_loss_and_grads(inp: &AdaptationInputs, cfg: &LossConfig) -> Result<GradBundle> {
    cfg.validate()?;
    let fwd = forward(inp)?;
    let assignments = prototype_assignments(&fwd.fa, &fwd.fa_aug, inp.protos, inp.confident)?;

    let b = fwd.y.rows();
    let l = fwd.fa.cols();
    let r = inp.adapter.rank();
    let active = inp.protos.active_classes();
    let n_valid = assignments.iter().filter(|a| a.is_some()).count();

    let mut loss_st = 0.0;
    let mut loss_cont = 0.0;
    let mut d_fa = Mat::zeros(b, l);
    let mut d_fa_aug = Mat::zeros(b, l);

    // Self-training term: gradient flows into the student logits of both
    // views; the teacher row is a constant target.
    let st_scale = 0.5 / b as f64;
    for (view_logits, d_fa_view) in [(&fwd.y, &mut d_fa), (&fwd.y_aug, &mut d_fa_aug)] {
        let mut d_y = Mat::zeros(b, fwd.y.cols());
        for i in 0..b {
            let p = softmax(view_logits.row(i));
            let q = softmax(fwd.teacher_logits.row(i));
            let (row_loss, row_grad) =
                sce_row_value_grad(&p, &q, cfg.sce_weight_forward, cfg.sce_weight_reverse);
            loss_st += st_scale * row_loss;
            let out = d_y.row_mut(i);
            for (g, v) in out.iter_mut().zip(row_grad) {
                *g = cfg.lambda_trg * st_scale * v;
            }
        }
        // d L / d fa = d_y W
        let contrib = d_y.matmul(&inp.head.w);
        *d_fa_view = d_fa_view.add(&contrib);
    }

    // Contrastive term on the adapted features of both views.
    if n_valid > 0 {
        let cont_scale = 1.0 / (2.0 * n_valid as f64);
        for (i, assigned) in assignments.iter().enumerate() {
            let Some(k) = assigned else { continue };
            for (view, d_view) in [(&fwd.fa, &mut d_fa), (&fwd.fa_aug, &mut d_fa_aug)] {
                let row = view.row(i);
                let (row_loss, sims, weights) =
                    info_nce_row(row, inp.protos, &active, *k, cfg.temperature);
                loss_cont += cont_scale * row_loss;
                let fnorm = row_norm(row);
                let grad_coeff = cfg.lambda_cont * cont_scale / cfg.temperature;
                let d_row = d_view.row_mut(i);
                for (pos, &c) in active.iter().enumerate() {
                    let indicator = if c == *k { 1.0 } else { 0.0 };
                    let coeff = grad_coeff * (weights[pos] - indicator);
                    if coeff == 0.0 {
                        continue;
                    }
                    let proto = inp.protos.p.row(c);
                    let pnorm = row_norm(proto);
                    // d cos / d f = (p_hat - cos * f_hat) / ||f||
                    for j in 0..l {
                        let p_hat = proto[j] / pnorm;
                        let f_hat = row[j] / fnorm;
                        d_row[j] += coeff * (p_hat - sims[pos] * f_hat) / fnorm;
                    }
                }
            }
        }
    }

    // Back through the adapter: fa = f + (u .* s) V^T.
    let s = inp.adapter.scaling();
    let v = inp.adapter.basis();
    let mut d_s = vec![0.0; r];
    let mut d_f_total = Mat::zeros(b, l);
    let mut d_f_aug_total = Mat::zeros(b, l);
    for (d_fa_view, u_view, d_f_view) in [
        (&d_fa, &fwd.u, &mut d_f_total),
        (&d_fa_aug, &fwd.u_aug, &mut d_f_aug_total),
    ] {
        let d_u = d_fa_view.matmul(v); // B x r
        for i in 0..b {
            for j in 0..r {
                d_s[j] += d_u.get(i, j) * u_view.get(i, j);
            }
        }
        let d_u_scaled = Mat::from_fn(b, r, |i, j| d_u.get(i, j) * s[j]);
        *d_f_view = d_fa_view.add(&d_u_scaled.matmul_nt(v));
    }

    // Affine pair: f = act .* gain + bias.
    let mut d_gain = vec![0.0; l];
    let mut d_bias = vec![0.0; l];
    for (d_f_view, act_view) in [(&d_f_total, &fwd.act), (&d_f_aug_total, &fwd.act_aug)] {
        for i in 0..b {
            let drow = d_f_view.row(i);
            let arow = act_view.row(i);
            for j in 0..l {
                d_gain[j] += drow[j] * arow[j];
                d_bias[j] += drow[j];
            }
        }
    }

    let loss_total = cfg.lambda_trg * loss_st + cfg.lambda_cont * loss_cont;
    Ok(GradBundle { d_s, d_gain, d_bias, loss_st, loss_cont, loss_total })
}

/// Value and logit-gradient of one row's weighted symmetric cross entropy,
/// exact for the floored objective.
fn sce_row_value_grad(p: &[f64], q: &[f64], w_fwd: f64, w_rev: f64) -> (f64, Vec<f64>) {
    let c = p.len();
    let mut ce_fwd = 0.0;
    let mut ce_rev = 0.0;
    let mut q_mass_unfloored = 0.0; // sum of q over classes where p is above the floor
    for k in 0..c {
        ce_fwd -= q[k] * p[k].max(PROB_FLOOR).ln();
        ce_rev -= p[k] * q[k].max(PROB_FLOOR).ln();
        if p[k] > PROB_FLOOR {
            q_mass_unfloored += q[k];
        }
    }
    let value = w_fwd * ce_fwd + w_rev * ce_rev;
    let mut grad = vec![0.0; c];
    for k in 0..c {
        let lq = q[k].max(PROB_FLOOR).ln();
        let fwd = p[k] * q_mass_unfloored - if p[k] > PROB_FLOOR { q[k] } else { 0.0 };
        let rev = p[k] * (-ce_rev - lq);
        grad[k] = w_fwd * fwd + w_rev * rev;
    }
    (value, grad)
}

/// First/second-moment accumulators for the Adam-style rule.
#[derive(Debug, Clone)]
pub struct OptState {
    step: u64,
    m_s: Vec<f64>,
    v_s: Vec<f64>,
    m_gain: Vec<f64>,
    v_gain: Vec<f64>,
    m_bias: Vec<f64>,
    v_bias: Vec<f64>,
}

impl OptState {
    pub fn new(rank: usize, feature_dim: usize) -> Self {
        OptState {
            step: 0,
            m_s: vec![0.0; rank],
            v_s: vec![0.0; rank],
            m_gain: vec![0.0; feature_dim],
            v_gain: vec![0.0; feature_dim],
            m_bias: vec![0.0; feature_dim],
            v_bias: vec![0.0; feature_dim],
        }
    }

    /// Moments for the scaling vector reset when the basis changes: the new
    /// coordinates are unrelated to the old ones.
    pub fn reset_scaling_moments(&mut self, rank: usize) {
        self.m_s = vec![0.0; rank];
        self.v_s = vec![0.0; rank];
    }
}

/// One step of the configured rule on `(s, gain, bias)`.
/// `update_affine = false` freezes the affine pair (and its moments).
pub fn optimizer_step(
    s: &mut [f64],
    gain: &mut [f64],
    bias: &mut [f64],
    grads: &GradBundle,
    cfg: &LossConfig,
    state: &mut OptState,
    update_affine: bool,
) {
    state.step += 1;
    match cfg.optimizer {
        OptimizerKind::Sgd => {
            sgd_group(s, &grads.d_s, cfg.lr);
            if update_affine {
                sgd_group(gain, &grads.d_gain, cfg.lr);
                sgd_group(bias, &grads.d_bias, cfg.lr);
            }
        }
        OptimizerKind::Adam => {
            let t = state.step;
            adam_group(s, &grads.d_s, &mut state.m_s, &mut state.v_s, cfg, t);
            if update_affine {
                adam_group(gain, &grads.d_gain, &mut state.m_gain, &mut state.v_gain, cfg, t);
                adam_group(bias, &grads.d_bias, &mut state.m_bias, &mut state.v_bias, cfg, t);
            }
        }
    }
}

fn sgd_group(p: &mut [f64], g: &[f64], lr: f64) {
    for (pv, &gv) in p.iter_mut().zip(g) {
        *pv -= lr * gv;
    }
}

fn adam_group(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], cfg: &LossConfig, t: u64) {
    let b1 = cfg.adam_beta1;
    let b2 = cfg.adam_beta2;
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::orthonormalize_columns;
    use crate::model::Activation;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn softmax_basics() {
        let p = softmax(&[0.0, 0.0]);
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);
        let p = softmax(&[1000.0, 0.0]);
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1] >= 0.0);
        // shift invariance
        let a = softmax(&[0.3, -1.2, 2.0]);
        let b = softmax(&[0.3 + 17.0, -1.2 + 17.0, 2.0 + 17.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn sce_uniform_is_twice_entropy() {
        // student == teacher, uniform over 4 classes: 2 * ln 4
        let z = Mat::zeros(3, 4);
        let v = sce(&z, &z).unwrap();
        assert!((v - 2.0 * 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sce_is_symmetric_and_matches_bruteforce() {
        let mut rng = StdRng::seed_from_u64(5);
        let a = Mat::from_fn(6, 5, |_, _| rng.random::<f64>() * 4.0 - 2.0);
        let b = Mat::from_fn(6, 5, |_, _| rng.random::<f64>() * 4.0 - 2.0);
        let ab = sce(&a, &b).unwrap();
        let ba = sce(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        // brute force
        let mut acc = 0.0;
        for i in 0..6 {
            let p = softmax(a.row(i));
            let q = softmax(b.row(i));
            for c in 0..5 {
                acc -= p[c] * q[c].max(1e-12).ln();
                acc -= q[c] * p[c].max(1e-12).ln();
            }
        }
        acc /= 6.0;
        assert!((ab - acc).abs() < 1e-10);
    }

    #[test]
    fn self_training_is_the_stated_average() {
        let mut rng = StdRng::seed_from_u64(6);
        let y = Mat::from_fn(4, 3, |_, _| rng.random::<f64>());
        let y_aug = Mat::from_fn(4, 3, |_, _| rng.random::<f64>());
        let y_ema = Mat::from_fn(4, 3, |_, _| rng.random::<f64>());
        let lhs = self_training_loss(&y, &y_aug, &y_ema).unwrap();
        let rhs = 0.5 * sce(&y, &y_ema).unwrap() + 0.5 * sce(&y_aug, &y_ema).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
        // constant teacher logit shift changes nothing
        let shifted = y_ema.map(|v| v + 3.7);
        assert!((self_training_loss(&y, &y_aug, &shifted).unwrap() - lhs).abs() < 1e-12);
    }

    fn two_class_protos() -> PrototypeBank {
        // P0 along e1, P1 along e2
        let p = Mat::new(2, 2, vec![2.0, 0.0, 0.0, 5.0]).unwrap();
        PrototypeBank { p, counts: vec![3, 3] }
    }

    #[test]
    fn contrastive_closed_form_two_classes() {
        let protos = two_class_protos();
        let f = Mat::new(1, 2, vec![4.0, 0.0]).unwrap(); // equals P0 up to scale
        let loss = prototype_contrastive_loss(&f, &f, &protos, 1.0).unwrap();
        let expect = (1.0 + (-1.0f64).exp()).ln();
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
    }

    #[test]
    fn contrastive_scale_invariant_and_bounded() {
        let mut rng = StdRng::seed_from_u64(9);
        let protos = PrototypeBank {
            p: Mat::from_fn(4, 6, |_, _| rng.random::<f64>() - 0.5),
            counts: vec![1, 1, 0, 1], // class 2 inactive
        };
        let f = Mat::from_fn(5, 6, |_, _| rng.random::<f64>() - 0.5);
        let f_aug = Mat::from_fn(5, 6, |_, _| rng.random::<f64>() - 0.5);
        let base = prototype_contrastive_loss(&f, &f_aug, &protos, 0.3).unwrap();
        let scaled = prototype_contrastive_loss(&f.scale(10.0), &f_aug.scale(10.0), &protos, 0.3).unwrap();
        assert!((base - scaled).abs() < 1e-10);
        assert!(base >= 0.0 && base.is_finite());
        // with both views equal, the anchor is the argmax for each view and
        // the softmax log-loss is bounded by ln(active classes)
        let same = prototype_contrastive_loss(&f, &f, &protos, 0.3).unwrap();
        assert!(same >= 0.0 && same <= 3.0f64.ln() + 1e-12);
    }

    #[test]
    fn contrastive_rejects_all_zero_prototypes() {
        let protos = PrototypeBank { p: Mat::zeros(3, 4), counts: vec![0, 0, 0] };
        let f = Mat::from_fn(2, 4, |_, _| 1.0);
        assert!(matches!(
            prototype_contrastive_loss(&f, &f, &protos, 0.5),
            Err(Error::Degenerate)
        ));
    }

    #[test]
    fn zero_norm_rows_are_excluded() {
        let protos = two_class_protos();
        let f = Mat::new(2, 2, vec![0.0, 0.0, 3.0, 0.0]).unwrap();
        let assign = prototype_assignments(&f, &f, &protos, None).unwrap();
        assert_eq!(assign, vec![None, Some(0)]);
    }

    #[test]
    fn assignment_is_scale_invariant() {
        let mut rng = StdRng::seed_from_u64(31);
        let protos = PrototypeBank {
            p: Mat::from_fn(5, 7, |_, _| rng.random::<f64>() - 0.5),
            counts: vec![2, 2, 2, 2, 2],
        };
        let f = Mat::from_fn(6, 7, |_, _| rng.random::<f64>() - 0.5);
        let a = prototype_assignments(&f, &f, &protos, None).unwrap();
        let b = prototype_assignments(&f.scale(10.0), &f.scale(10.0), &protos, None).unwrap();
        assert_eq!(a, b);
    }

    fn small_inputs(rng: &mut StdRng) -> (AdapterState, Backbone, ClassifierHead, EmaTeacher, Mat, Mat, PrototypeBank) {
        let l_in = 4;
        let l = 6;
        let c = 3;
        let r = 2;
        let b = 5;
        let basis = orthonormalize_columns(&Mat::from_fn(l, r, |_, _| rng.random::<f64>() - 0.5)).unwrap();
        let mut adapter = AdapterState::new(basis).unwrap();
        for s in adapter.scaling_mut() {
            *s = rng.random::<f64>() * 0.4 - 0.2;
        }
        let mut backbone = Backbone::new(
            Mat::from_fn(l, l_in, |_, _| rng.random::<f64>() - 0.5),
            (0..l).map(|_| rng.random::<f64>() * 0.2).collect(),
            Activation::Tanh,
        )
        .unwrap();
        for g in backbone.gain.iter_mut() {
            *g = 1.0 + rng.random::<f64>() * 0.2 - 0.1;
        }
        for a in backbone.abias.iter_mut() {
            *a = rng.random::<f64>() * 0.1;
        }
        let head = ClassifierHead::new(
            Mat::from_fn(c, l, |_, _| rng.random::<f64>() - 0.5),
            (0..c).map(|_| rng.random::<f64>() * 0.1).collect(),
        )
        .unwrap();
        let teacher = EmaTeacher::new(
            head.clone(),
            (0..l).map(|_| 1.0 + rng.random::<f64>() * 0.1).collect(),
            (0..l).map(|_| rng.random::<f64>() * 0.05).collect(),
            0.99,
        )
        .unwrap();
        let x = Mat::from_fn(b, l_in, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let x_aug = Mat::from_fn(b, l_in, |i, j| x.get(i, j) + 0.05 * (rng.random::<f64>() - 0.5));
        let protos = PrototypeBank {
            p: Mat::from_fn(c, l, |_, _| rng.random::<f64>() - 0.5),
            counts: vec![4, 4, 4],
        };
        (adapter, backbone, head, teacher, x, x_aug, protos)
    }

    #[test]
    fn zero_weights_give_zero_gradients() {
        let mut rng = StdRng::seed_from_u64(12);
        let (adapter, backbone, head, teacher, x, x_aug, protos) = small_inputs(&mut rng);
        let cfg = LossConfig { lambda_trg: 0.0, lambda_cont: 0.0, ..Default::default() };
        let inp = AdaptationInputs {
            adapter: &adapter,
            backbone: &backbone,
            head: &head,
            teacher: &teacher,
            x: &x,
            x_aug: &x_aug,
            protos: &protos,
            confident: None,
        };
        let bundle = total_loss_and_grads(&inp, &cfg).unwrap();
        assert_eq!(bundle.loss_total, 0.0);
        assert!(bundle.loss_st > 0.0);
        assert!(bundle.d_s.iter().all(|&g| g == 0.0));
        assert!(bundle.d_gain.iter().all(|&g| g == 0.0));
        assert!(bundle.d_bias.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn total_is_the_weighted_sum() {
        let mut rng = StdRng::seed_from_u64(13);
        let (adapter, backbone, head, teacher, x, x_aug, protos) = small_inputs(&mut rng);
        let cfg = LossConfig { lambda_trg: 0.7, lambda_cont: 2.5, ..Default::default() };
        let inp = AdaptationInputs {
            adapter: &adapter,
            backbone: &backbone,
            head: &head,
            teacher: &teacher,
            x: &x,
            x_aug: &x_aug,
            protos: &protos,
            confident: None,
        };
        let bundle = total_loss_and_grads(&inp, &cfg).unwrap();
        let expect = 0.7 * bundle.loss_st + 2.5 * bundle.loss_cont;
        assert!((bundle.loss_total - expect).abs() < 1e-12);
    }

    #[test]
    fn gradient_step_decreases_loss() {
        let mut rng = StdRng::seed_from_u64(14);
        let (mut adapter, backbone, head, _, x, x_aug, protos) = small_inputs(&mut rng);
        // teacher equals the current student; s = 0
        for s in adapter.scaling_mut() {
            *s = 0.0;
        }
        let teacher = EmaTeacher::new(head.clone(), backbone.gain.clone(), backbone.abias.clone(), 0.999).unwrap();
        let cfg = LossConfig::default();
        let inp = AdaptationInputs {
            adapter: &adapter,
            backbone: &backbone,
            head: &head,
            teacher: &teacher,
            x: &x,
            x_aug: &x_aug,
            protos: &protos,
            confident: None,
        };
        let assignments = current_assignments(&inp).unwrap();
        let base = total_loss_at(&inp, &cfg, &assignments).unwrap().loss_total;
        let bundle = total_loss_and_grads(&inp, &cfg).unwrap();

        // line search with halving: some small step along -grad must not increase
        let mut eta = 1e-2;
        let mut improved = false;
        for _ in 0..20 {
            let mut a2 = adapter.clone();
            for (s, g) in a2.scaling_mut().iter_mut().zip(&bundle.d_s) {
                *s -= eta * g;
            }
            let mut b2 = backbone.clone();
            for (p, g) in b2.gain.iter_mut().zip(&bundle.d_gain) {
                *p -= eta * g;
            }
            for (p, g) in b2.abias.iter_mut().zip(&bundle.d_bias) {
                *p -= eta * g;
            }
            let inp2 = AdaptationInputs {
                adapter: &a2,
                backbone: &b2,
                head: &head,
                teacher: &teacher,
                x: &x,
                x_aug: &x_aug,
                protos: &protos,
                confident: None,
            };
            let v = total_loss_at(&inp2, &cfg, &assignments).unwrap().loss_total;
            if v <= base + 1e-12 {
                improved = true;
                break;
            }
            eta *= 0.5;
        }
        assert!(improved, "no step size decreased the loss");
    }

    #[test]
    fn optimizer_step_basics() {
        let cfg_sgd = LossConfig { optimizer: OptimizerKind::Sgd, lr: 0.1, ..Default::default() };
        let mut s = vec![0.0];
        let mut gain = vec![1.0];
        let mut bias = vec![0.0];
        let mut st = OptState::new(1, 1);
        let zero = GradBundle {
            d_s: vec![0.0],
            d_gain: vec![0.0],
            d_bias: vec![0.0],
            loss_st: 0.0,
            loss_cont: 0.0,
            loss_total: 0.0,
        };
        optimizer_step(&mut s, &mut gain, &mut bias, &zero, &cfg_sgd, &mut st, true);
        assert_eq!((s[0], gain[0], bias[0]), (0.0, 1.0, 0.0));

        let g = GradBundle { d_s: vec![1.0], ..zero.clone() };
        optimizer_step(&mut s, &mut gain, &mut bias, &g, &cfg_sgd, &mut st, true);
        assert!((s[0] + 0.1).abs() < 1e-15);

        // adam first step is roughly lr * sign(g)
        let cfg_adam = LossConfig { optimizer: OptimizerKind::Adam, lr: 1e-3, ..Default::default() };
        let mut s2 = vec![0.0];
        let mut st2 = OptState::new(1, 1);
        let g2 = GradBundle { d_s: vec![-0.37], ..zero };
        optimizer_step(&mut s2, &mut gain, &mut bias, &g2, &cfg_adam, &mut st2, false);
        let expected = 1e-3 * 0.37 / (0.37 + 1e-8);
        assert!((s2[0] - expected).abs() < 1e-6, "{} vs {expected}", s2[0]);
        // adam with zero grad leaves parameters unchanged
        let zero2 = GradBundle {
            d_s: vec![0.0],
            d_gain: vec![0.0],
            d_bias: vec![0.0],
            loss_st: 0.0,
            loss_cont: 0.0,
            loss_total: 0.0,
        };
        let mut s3 = vec![0.25];
        let mut st3 = OptState::new(1, 1);
        optimizer_step(&mut s3, &mut gain, &mut bias, &zero2, &cfg_adam, &mut st3, false);
        assert_eq!(s3[0], 0.25);
    }
}
