//! The frozen source model: a one-layer affine backbone with an optional
//! tanh, a linear classifier head, per-class prototype anchors, and the EMA
//! teacher copy used for pseudo-label stabilization.
//!
//! After source pretraining the backbone weight matrix and the head are
//! frozen; the only trainable pieces during adaptation are the backbone's
//! per-feature affine pair (gain, bias) and the adapter's scaling vector.

use rand::rngs::StdRng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{bits_digest, Mat};
use crate::losses::softmax_rows;
use crate::stream::SourceDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative evaluated at the pre-activation `x`.
    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Feature extractor: `features = act(x W^T + b) .* gain + abias`.
///
/// `weight` and `bias` are frozen once pretraining finishes; `gain` and
/// `abias` stand in for the batch-norm affine parameters that test-time
/// adaptation is allowed to touch.
#[derive(Debug, Clone)]
pub struct Backbone {
    weight: Mat, // L x L_in
    bias: Vec<f64>,
    pub activation: Activation,
    pub gain: Vec<f64>,
    pub abias: Vec<f64>,
    pub affine_trainable: bool,
}

impl Backbone {
    pub fn new(weight: Mat, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::dimension("backbone bias length must match feature dim"));
        }
        let l = weight.rows();
        Ok(Backbone {
            weight,
            bias,
            activation,
            gain: vec![1.0; l],
            abias: vec![0.0; l],
            affine_trainable: true,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn weight(&self) -> &Mat {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    /// Pre-affine activations `act(x W^T + b)`. These are constants during
    /// adaptation (the weight is frozen), which is what makes the analytic
    /// affine gradients exact.
    pub fn activations(&self, x: &Mat) -> Result<Mat> {
        if x.cols() != self.input_dim() {
            return Err(Error::dimension(format!(
                "input has {} columns, backbone expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        let mut z = x.matmul_nt(&self.weight);
        for i in 0..z.rows() {
            let row = z.row_mut(i);
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.activation.apply(*v + self.bias[j]);
            }
        }
        Ok(z)
    }

    /// Apply the student affine pair to pre-affine activations.
    pub fn apply_affine(&self, a: &Mat) -> Mat {
        affine_transform(a, &self.gain, &self.abias)
    }

    pub fn extract_features(&self, x: &Mat) -> Result<Mat> {
        Ok(self.apply_affine(&self.activations(x)?))
    }

    /// Digest over the frozen parameters only (weight + bias).
    pub fn frozen_digest(&self) -> u64 {
        bits_digest([self.weight.data(), self.bias.as_slice()])
    }

    /// Test hook for the frozen-backbone contract: deliberately corrupts the
    /// frozen weight so the violation detector has something to catch.
    #[doc(hidden)]
    pub fn fault_perturb_frozen_weight(&mut self) {
        let v = self.weight.get(0, 0);
        self.weight.set(0, 0, v + 1e-9);
    }
}

pub(crate) fn affine_transform(a: &Mat, gain: &[f64], abias: &[f64]) -> Mat {
    debug_assert_eq!(a.cols(), gain.len());
    Mat::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) * gain[j] + abias[j])
}

/// Frozen linear classifier producing logits `f W^T + b`.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub w: Mat, // C x L
    pub b: Vec<f64>,
}

impl ClassifierHead {
    pub fn new(w: Mat, b: Vec<f64>) -> Result<Self> {
        if w.rows() < 2 {
            return Err(Error::dimension("classifier needs at least 2 classes"));
        }
        if b.len() != w.rows() {
            return Err(Error::dimension("classifier bias length must match class count"));
        }
        Ok(ClassifierHead { w, b })
    }

    pub fn classes(&self) -> usize {
        self.w.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn logits(&self, f: &Mat) -> Result<Mat> {
        if f.cols() != self.feature_dim() {
            return Err(Error::dimension(format!(
                "features have {} columns, head expects {}",
                f.cols(),
                self.feature_dim()
            )));
        }
        let mut z = f.matmul_nt(&self.w);
        for i in 0..z.rows() {
            for (j, v) in z.row_mut(i).iter_mut().enumerate() {
                *v += self.b[j];
            }
        }
        Ok(z)
    }

    pub fn frozen_digest(&self) -> u64 {
        bits_digest([self.w.data(), self.b.as_slice()])
    }
}

/// Per-class mean source embeddings; fixed semantic anchors during
/// adaptation. A class absent from the source set gets a zero row.
#[derive(Debug, Clone)]
pub struct PrototypeBank {
    pub p: Mat, // C x L
    pub counts: Vec<usize>,
}

impl PrototypeBank {
    pub fn classes(&self) -> usize {
        self.p.rows()
    }

    pub fn active_classes(&self) -> Vec<usize> {
        (0..self.counts.len()).filter(|&c| self.counts[c] > 0).collect()
    }
}

/// Slow-moving copy of the adaptable parameters. The head copy is included
/// for completeness; it stays equal to the student head because the head is
/// frozen.
#[derive(Debug, Clone)]
pub struct EmaTeacher {
    pub head: ClassifierHead,
    pub gain: Vec<f64>,
    pub abias: Vec<f64>,
    pub momentum: f64,
}

impl EmaTeacher {
    pub fn new(head: ClassifierHead, gain: Vec<f64>, abias: Vec<f64>, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::config(format!("teacher momentum must be in [0, 1], got {momentum}")));
        }
        Ok(EmaTeacher { head, gain, abias, momentum })
    }

    /// `p_ema <- m * p_ema + (1 - m) * p_student`, elementwise over the head
    /// and the affine pair.
    pub fn update(&mut self, student_head: &ClassifierHead, gain: &[f64], abias: &[f64]) -> Result<()> {
        if self.gain.len() != gain.len()
            || self.abias.len() != abias.len()
            || self.head.w.rows() != student_head.w.rows()
            || self.head.w.cols() != student_head.w.cols()
        {
            return Err(Error::dimension("teacher/student parameter shapes differ"));
        }
        let m = self.momentum;
        self.head.w = Mat::from_fn(self.head.w.rows(), self.head.w.cols(), |i, j| {
            m * self.head.w.get(i, j) + (1.0 - m) * student_head.w.get(i, j)
        });
        let blend = |t: &mut f64, s: f64| *t = m * *t + (1.0 - m) * s;
        for (t, &s) in self.head.b.iter_mut().zip(&student_head.b) {
            blend(t, s);
        }
        for (t, &s) in self.gain.iter_mut().zip(gain) {
            blend(t, s);
        }
        for (t, &s) in self.abias.iter_mut().zip(abias) {
            blend(t, s);
        }
        Ok(())
    }

    /// Teacher features on the shared frozen activations.
    pub fn apply_affine(&self, a: &Mat) -> Mat {
        affine_transform(a, &self.gain, &self.abias)
    }
}

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub feature_dim: usize,
    pub activation: Activation,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            feature_dim: 128,
            activation: Activation::Tanh,
            epochs: 200,
            lr: 0.5,
            seed: 1,
        }
    }
}

/// Full-batch gradient descent on softmax cross-entropy over both layers.
/// Converges quickly on separable blobs; stops early once the training set
/// is fit and the loss is small.
pub fn pretrain_source(dataset: &SourceDataset, cfg: &PretrainConfig) -> Result<(Backbone, ClassifierHead)> {
    let x = dataset.inputs()?;
    let labels = dataset.labels()?;
    let n = x.rows();
    let c = dataset.classes();
    let l_in = x.cols();
    let l = cfg.feature_dim;
    let mut present = vec![false; c];
    for &y in labels {
        if y >= c {
            return Err(Error::data(format!("label {y} out of range for {c} classes")));
        }
        present[y] = true;
    }
    if let Some(missing) = present.iter().position(|&p| !p) {
        return Err(Error::data(format!("class {missing} has no source samples")));
    }

    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let gauss = |scale: f64, rng: &mut StdRng| -> f64 {
        let v: f64 = StandardNormal.sample(rng);
        v * scale
    };
    let w1_scale = 1.0 / (l_in as f64).sqrt();
    let mut w1 = Mat::zeros(l, l_in);
    for i in 0..l {
        for j in 0..l_in {
            let v = gauss(w1_scale, &mut rng);
            w1.set(i, j, v);
        }
    }
    let mut b1 = vec![0.0; l];
    let w2_scale = 1.0 / (l as f64).sqrt();
    let mut w2 = Mat::zeros(c, l);
    for i in 0..c {
        for j in 0..l {
            let v = gauss(w2_scale, &mut rng);
            w2.set(i, j, v);
        }
    }
    let mut b2 = vec![0.0; c];

    let inv_n = 1.0 / n as f64;
    for epoch in 0..cfg.epochs {
        // forward
        let mut z1 = x.matmul_nt(&w1);
        for i in 0..n {
            for (j, v) in z1.row_mut(i).iter_mut().enumerate() {
                *v += b1[j];
            }
        }
        let a = z1.map(|v| cfg.activation.apply(v));
        let mut z2 = a.matmul_nt(&w2);
        for i in 0..n {
            for (j, v) in z2.row_mut(i).iter_mut().enumerate() {
                *v += b2[j];
            }
        }
        let p = softmax_rows(&z2);
        let mut loss = 0.0;
        let mut correct = 0usize;
        for i in 0..n {
            let row = p.row(i);
            loss -= row[labels[i]].max(1e-12).ln();
            if argmax(row) == labels[i] {
                correct += 1;
            }
        }
        loss *= inv_n;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("loss became non-finite at epoch {epoch}")));
        }
        if correct == n && loss < 5e-3 {
            break;
        }

        // backward
        let mut dz2 = p;
        for i in 0..n {
            let row = dz2.row_mut(i);
            row[labels[i]] -= 1.0;
            for v in row.iter_mut() {
                *v *= inv_n;
            }
        }
        let dw2 = dz2.matmul_tn(&a);
        let db2: Vec<f64> = (0..c).map(|j| dz2.col(j).iter().sum()).collect();
        let da = dz2.matmul(&w2);
        let dz1 = Mat::from_fn(n, l, |i, j| {
            da.get(i, j) * cfg.activation.derivative(z1.get(i, j) /* pre-activation incl. bias */)
        });
        let dw1 = dz1.matmul_tn(x);
        let db1: Vec<f64> = (0..l).map(|j| dz1.col(j).iter().sum()).collect();

        let lr = cfg.lr;
        w2 = w2.sub(&dw2.scale(lr));
        for (b, d) in b2.iter_mut().zip(&db2) {
            *b -= lr * d;
        }
        w1 = w1.sub(&dw1.scale(lr));
        for (b, d) in b1.iter_mut().zip(&db1) {
            *b -= lr * d;
        }
    }

    let backbone = Backbone::new(w1, b1, cfg.activation)?;
    let head = ClassifierHead::new(w2, b2)?;
    Ok((backbone, head))
}

/// Mean feature per class; absent classes get a zero prototype.
pub fn build_prototypes(backbone: &Backbone, dataset: &SourceDataset) -> Result<PrototypeBank> {
    let x = dataset.inputs()?;
    let labels = dataset.labels()?;
    let c = dataset.classes();
    let features = backbone.extract_features(x)?;
    let l = features.cols();
    let mut p = Mat::zeros(c, l);
    let mut counts = vec![0usize; c];
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::data(format!("label {y} out of range for {c} classes")));
        }
        counts[y] += 1;
        let frow = features.row(i);
        let prow = p.row_mut(y);
        for (acc, &v) in prow.iter_mut().zip(frow) {
            *acc += v;
        }
    }
    for (cls, &cnt) in counts.iter().enumerate() {
        if cnt > 0 {
            let inv = 1.0 / cnt as f64;
            for v in p.row_mut(cls).iter_mut() {
                *v *= inv;
            }
        }
    }
    Ok(PrototypeBank { p, counts })
}

/// Fraction of rows whose argmax logit matches the label.
pub fn classification_accuracy(backbone: &Backbone, head: &ClassifierHead, x: &Mat, labels: &[usize]) -> Result<f64> {
    let logits = head.logits(&backbone.extract_features(x)?)?;
    let mut correct = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        if argmax(logits.row(i)) == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len().max(1) as f64)
}

/// Index of the row maximum; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0usize;
    let mut best_v = row[0];
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}
