//! Online AGOP estimation and golden-subspace maintenance.
//!
//! The estimator keeps an L x L PSD matrix `G`, seeded from the classifier
//! gram matrix `W^T W`. Each batch, samples whose max softmax probability
//! clears the confidence threshold contribute the outer product of the
//! top-logit feature gradient — for a linear head, exactly the weight row of
//! the predicted class — and the batch average folds into `G` through an
//! exponential moving average. Every `t_eig` batches the top-r eigenvectors
//! of `G` become the adapter's new basis.

use std::io::Write;

use crate::error::{Error, Result};
use crate::linalg::{cumulative_spectral_energy, sym_eig, Mat};
use crate::losses::softmax_rows;
use crate::model::ClassifierHead;

#[derive(Debug, Clone)]
pub struct AgopConfig {
    /// EMA rate in (0, 1].
    pub alpha: f64,
    /// Confidence threshold in (0, 1).
    pub tau: f64,
    /// Eigendecomposition period, in batches.
    pub t_eig: usize,
    /// Retained rank.
    pub r: usize,
}

impl AgopConfig {
    /// Defaults with the rank tied to the class count: `r = min(64, c)`.
    pub fn for_classes(c: usize) -> Self {
        AgopConfig { alpha: 0.1, tau: 0.8, t_eig: 10, r: 64.min(c) }
    }

    pub fn validate(&self, feature_dim: usize) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config(format!("alpha must be in (0, 1], got {}", self.alpha)));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::config(format!("tau must be in (0, 1), got {}", self.tau)));
        }
        if self.t_eig == 0 {
            return Err(Error::config("t_eig must be at least 1"));
        }
        if self.r == 0 || self.r > feature_dim {
            return Err(Error::config(format!(
                "rank must be in [1, {feature_dim}], got {}",
                self.r
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AgopEstimator {
    g: Mat, // L x L, symmetric PSD
    cfg: AgopConfig,
    batch_counter: usize,
    confident_total: usize,
}

/// What one observed batch contributed.
#[derive(Debug, Clone)]
pub struct BatchObservation {
    pub confident: Vec<usize>,
    pub ema_applied: bool,
}

impl AgopEstimator {
    /// `G_0 = W^T W`, counters zeroed.
    pub fn init_from_head(head: &ClassifierHead, cfg: AgopConfig) -> Result<Self> {
        cfg.validate(head.feature_dim())?;
        let g = head.w.gram();
        Ok(AgopEstimator { g, cfg, batch_counter: 0, confident_total: 0 })
    }

    pub fn g(&self) -> &Mat {
        &self.g
    }

    pub fn config(&self) -> &AgopConfig {
        &self.cfg
    }

    pub fn batch_counter(&self) -> usize {
        self.batch_counter
    }

    pub fn confident_total(&self) -> usize {
        self.confident_total
    }

    /// Count one observed batch. Every batch counts toward the refresh
    /// schedule, including batches with no confident samples.
    pub fn record_batch(&mut self) {
        self.batch_counter += 1;
    }

    pub fn due_for_refresh(&self) -> bool {
        self.batch_counter > 0 && self.batch_counter % self.cfg.t_eig == 0
    }

    /// `G <- (1 - alpha) G + alpha G_batch`.
    pub fn ema_step(&mut self, g_batch: &Mat) -> Result<()> {
        if g_batch.rows() != self.g.rows() || g_batch.cols() != self.g.cols() {
            return Err(Error::dimension(format!(
                "batch AGOP is {}x{}, expected {}x{}",
                g_batch.rows(),
                g_batch.cols(),
                self.g.rows(),
                self.g.cols()
            )));
        }
        let a = self.cfg.alpha;
        self.g = self.g.scale(1.0 - a).add(&g_batch.scale(a));
        Ok(())
    }

    /// Full per-batch wiring: count the batch, select confident samples from
    /// the given (adapted-feature) probabilities, build the batch AGOP from
    /// the pre-adaptation features, and fold it in. An empty confident set
    /// skips the EMA but still counts toward the refresh schedule.
    pub fn observe(&mut self, head: &ClassifierHead, f_pre: &Mat, probs: &Mat) -> Result<BatchObservation> {
        self.record_batch();
        let confident = confident_mask(probs, self.cfg.tau)?;
        if confident.is_empty() {
            return Ok(BatchObservation { confident, ema_applied: false });
        }
        let g_batch = batch_agop(head, f_pre, &confident)?;
        self.ema_step(&g_batch)?;
        self.confident_total += confident.len();
        Ok(BatchObservation { confident, ema_applied: true })
    }

    /// Top-r eigenvectors of the current `G`, for installation as the
    /// adapter basis.
    pub fn refresh_basis(&self) -> Result<Mat> {
        Ok(sym_eig(&self.g)?.top_vectors(self.cfg.r))
    }

    /// Eigenvalue spectrum of the current `G`, non-increasing.
    pub fn spectrum(&self) -> Result<Vec<f64>> {
        Ok(sym_eig(&self.g)?.values)
    }
}

/// Indices of rows whose maximum probability reaches `tau`. Each row must
/// already be a probability vector (sum 1 within 1e-6).
pub fn confident_mask(probs: &Mat, tau: f64) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for i in 0..probs.rows() {
        let row = probs.row(i);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Probability { row: i, sum });
        }
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        if max >= tau {
            out.push(i);
        }
    }
    Ok(out)
}

/// Gradient of the top logit with respect to the feature. For the linear
/// head this is exactly the weight row of the argmax class at `f`; ties
/// resolve to the lowest class index.
pub fn gradient_surrogate(head: &ClassifierHead, f: &[f64]) -> Result<Vec<f64>> {
    if f.len() != head.feature_dim() {
        return Err(Error::dimension(format!(
            "feature has length {}, head expects {}",
            f.len(),
            head.feature_dim()
        )));
    }
    let mut best = 0usize;
    let mut best_v = f64::NEG_INFINITY;
    for c in 0..head.classes() {
        let mut z = head.b[c];
        for (w, x) in head.w.row(c).iter().zip(f) {
            z += w * x;
        }
        if z > best_v {
            best_v = z;
            best = c;
        }
    }
    Ok(head.w.row(best).to_vec())
}

/// Average of `g_i g_i^T` over the masked samples of the pre-adaptation
/// feature batch.
pub fn batch_agop(head: &ClassifierHead, f_pre: &Mat, mask: &[usize]) -> Result<Mat> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    if f_pre.cols() != head.feature_dim() {
        return Err(Error::dimension("feature batch width does not match the head"));
    }
    let l = head.feature_dim();
    let mut acc = Mat::zeros(l, l);
    for &i in mask {
        if i >= f_pre.rows() {
            return Err(Error::dimension(format!("mask index {i} out of range")));
        }
        let g = gradient_surrogate(head, f_pre.row(i))?;
        for a in 0..l {
            let ga = g[a];
            if ga == 0.0 {
                continue;
            }
            let row = acc.row_mut(a);
            for (slot, &gb) in row.iter_mut().zip(&g) {
                *slot += ga * gb;
            }
        }
    }
    Ok(acc.scale(1.0 / mask.len() as f64))
}

/// Softmax probabilities of logits, convenience for the engine.
pub fn probabilities(logits: &Mat) -> Mat {
    softmax_rows(logits)
}

/// Write the spectrum diagnostic CSV: `k,lambda_k,kappa_k` for k = 1..L.
pub fn write_spectrum_csv(values: &[f64], mut out: impl Write) -> Result<()> {
    writeln!(out, "k,lambda,kappa")?;
    for k in 1..=values.len() {
        let kappa = cumulative_spectral_energy(values, k)?;
        writeln!(out, "{},{},{}", k, values[k - 1], kappa)?;
    }
    Ok(())
}
