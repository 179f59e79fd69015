//! Synthetic continual-domain-shift streams and feature-CSV ingestion.
//!
//! A stream is an ordered sequence of batches. Each batch carries its inputs
//! plus quarantined ground truth (labels and domain id) that only the
//! metrics recorder may read; the adaptation path has no accessor for it,
//! and every read is counted so a leak is detectable after the fact.

use std::cell::Cell;
use std::io::{BufRead, Write};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Gaussian-blob source generator settings.
#[derive(Debug, Clone)]
pub struct SourceConfig {
    pub classes: usize,
    pub input_dim: usize,
    pub samples_per_class: usize,
    /// Scale of the per-class mean draw; large values give wide margins.
    pub mu_sep: f64,
    /// Within-class standard deviation.
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig {
            classes: 10,
            input_dim: 32,
            samples_per_class: 100,
            mu_sep: 3.0,
            sigma: 1.0,
            seed: 7,
        }
    }
}

/// Labeled source samples. After prototypes are built the dataset is sealed;
/// any later access errors, enforcing the source-free contract at run time.
#[derive(Debug)]
pub struct SourceDataset {
    x: Mat,
    labels: Vec<usize>,
    classes: usize,
    sealed: Cell<bool>,
}

impl SourceDataset {
    pub fn from_parts(x: Mat, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if labels.len() != x.rows() {
            return Err(Error::dimension("label count must match sample count"));
        }
        Ok(SourceDataset { x, labels, classes, sealed: Cell::new(false) })
    }

    pub fn inputs(&self) -> Result<&Mat> {
        if self.sealed.get() {
            return Err(Error::SourceSealed);
        }
        Ok(&self.x)
    }

    pub fn labels(&self) -> Result<&[usize]> {
        if self.sealed.get() {
            return Err(Error::SourceSealed);
        }
        Ok(&self.labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Drop access rights; adaptation happens strictly after this point.
    pub fn seal(&self) {
        self.sealed.set(true);
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed.get()
    }
}

/// Deterministic per-class means for a source config. The stream generator
/// shares these, so source and target have the same label function.
pub fn class_means(cfg: &SourceConfig) -> Mat {
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    Mat::from_fn(cfg.classes, cfg.input_dim, |_, _| {
        let v: f64 = StandardNormal.sample(&mut rng);
        v * cfg.mu_sep
    })
}

/// Draw `samples_per_class` Gaussian samples around each class mean.
pub fn make_source(cfg: &SourceConfig) -> Result<SourceDataset> {
    if cfg.classes < 2 {
        return Err(Error::config(format!("need at least 2 classes, got {}", cfg.classes)));
    }
    if cfg.input_dim == 0 || cfg.samples_per_class == 0 {
        return Err(Error::config("input_dim and samples_per_class must be positive"));
    }
    if cfg.sigma < 0.0 {
        return Err(Error::config("sigma must be non-negative"));
    }
    let means = class_means(cfg);
    // Separate generator so sample noise does not perturb the means.
    let mut rng = StdRng::seed_from_u64(cfg.seed.wrapping_add(0x5151_5151));
    let n = cfg.classes * cfg.samples_per_class;
    let mut data = Vec::with_capacity(n * cfg.input_dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..cfg.classes {
        for _ in 0..cfg.samples_per_class {
            labels.push(c);
            for d in 0..cfg.input_dim {
                let eps: f64 = StandardNormal.sample(&mut rng);
                data.push(means.get(c, d) + cfg.sigma * eps);
            }
        }
    }
    SourceDataset::from_parts(Mat::new(n, cfg.input_dim, data)?, labels, cfg.classes)
}

/// One target domain: a fixed affine corruption of the inputs plus noise.
/// The identity domain is (angle 0, unit scale, zero shift, zero sigma).
#[derive(Debug, Clone)]
pub struct DomainSpec {
    pub id: usize,
    /// Rotation in the (0, 1) coordinate plane, radians.
    pub rotation_angle: f64,
    /// Per-dimension multiplier, length `input_dim`, all entries positive.
    pub scale: Vec<f64>,
    /// Additive offset, length `input_dim`.
    pub shift: Vec<f64>,
    pub noise_sigma: f64,
}

impl DomainSpec {
    pub fn identity(id: usize, input_dim: usize) -> Self {
        DomainSpec {
            id,
            rotation_angle: 0.0,
            scale: vec![1.0; input_dim],
            shift: vec![0.0; input_dim],
            noise_sigma: 0.0,
        }
    }

    fn validate(&self, input_dim: usize) -> Result<()> {
        if self.scale.len() != input_dim || self.shift.len() != input_dim {
            return Err(Error::config(format!(
                "domain {} scale/shift must have length {input_dim}",
                self.id
            )));
        }
        if self.scale.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::config(format!("domain {} scale entries must be positive", self.id)));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::config(format!("domain {} noise_sigma must be non-negative", self.id)));
        }
        if self.rotation_angle != 0.0 && input_dim < 2 {
            return Err(Error::config("rotation needs at least 2 input dimensions"));
        }
        Ok(())
    }

    /// Apply the corruption to a clean sample, in place. Order: rotate in
    /// the fixed 2-plane, scale, shift. Noise is added by the caller.
    pub fn transform(&self, x: &mut [f64]) {
        if self.rotation_angle != 0.0 {
            let (s, c) = self.rotation_angle.sin_cos();
            let (x0, x1) = (x[0], x[1]);
            x[0] = c * x0 - s * x1;
            x[1] = s * x0 + c * x1;
        }
        for (v, (&sc, &sh)) in x.iter_mut().zip(self.scale.iter().zip(&self.shift)) {
            *v = *v * sc + sh;
        }
    }

    /// Inverse of `transform` (for `noise_sigma = 0` the round trip is exact
    /// up to float round-off).
    pub fn inverse_transform(&self, x: &mut [f64]) {
        for (v, (&sc, &sh)) in x.iter_mut().zip(self.scale.iter().zip(&self.shift)) {
            *v = (*v - sh) / sc;
        }
        if self.rotation_angle != 0.0 {
            let (s, c) = (-self.rotation_angle).sin_cos();
            let (x0, x1) = (x[0], x[1]);
            x[0] = c * x0 - s * x1;
            x[1] = s * x0 + c * x1;
        }
    }
}

/// Ground truth for one batch; reachable only through the counted
/// quarantine accessor.
#[derive(Debug, Clone)]
pub struct EvalInfo {
    pub labels: Vec<usize>,
    pub domain_id: usize,
}

/// Wrapper that counts every access to the evaluation payload. The engine
/// audits the counters after a run: exactly one read per batch when metrics
/// are recorded, zero otherwise.
#[derive(Debug)]
pub struct Quarantined<T> {
    value: T,
    reads: Cell<u32>,
}

impl<T> Quarantined<T> {
    fn new(value: T) -> Self {
        Quarantined { value, reads: Cell::new(0) }
    }

    /// Counted access; only evaluation code should call this.
    pub fn read_for_eval(&self) -> &T {
        self.reads.set(self.reads.get() + 1);
        &self.value
    }

    pub fn read_count(&self) -> u32 {
        self.reads.get()
    }
}

impl<T: Clone> Clone for Quarantined<T> {
    fn clone(&self) -> Self {
        // A clone is fresh evidence: its counter starts at zero.
        Quarantined::new(self.value.clone())
    }
}

/// One stream batch: inputs visible to everyone, ground truth quarantined.
#[derive(Debug, Clone)]
pub struct StreamBatch {
    x: Mat,
    pub batch_index: usize,
    eval: Quarantined<EvalInfo>,
}

impl StreamBatch {
    pub fn inputs(&self) -> &Mat {
        &self.x
    }

    /// Evaluation-only view of labels and domain id (counted).
    pub fn eval(&self) -> &Quarantined<EvalInfo> {
        &self.eval
    }

    /// Test hook for the quarantine contract: rewrites every hidden label to
    /// a different class so a behavioral test can confirm labels influence
    /// nothing but the recorded metrics.
    #[doc(hidden)]
    pub fn scramble_labels_for_tests(&mut self) {
        let max = self.eval.value.labels.iter().copied().max().unwrap_or(0);
        for y in &mut self.eval.value.labels {
            *y = (*y + 1) % (max + 2);
        }
    }
}

#[derive(Debug, Clone)]
pub struct StreamConfig {
    pub domains: Vec<DomainSpec>,
    pub batches_per_domain: usize,
    pub batch_size: usize,
    /// Number of passes over the domain sequence; rounds after the first
    /// replay the same batch data (repeated exposure to the same target).
    pub repeat: usize,
    pub seed: u64,
}

/// Generate the full stream eagerly, in delivery order, with batch indices
/// 0, 1, 2, ... and no gaps. Deterministic for a fixed (config, seed).
pub fn make_stream(stream_cfg: &StreamConfig, source_cfg: &SourceConfig) -> Result<Vec<StreamBatch>> {
    if stream_cfg.domains.is_empty() {
        return Err(Error::config("stream needs at least one domain"));
    }
    if stream_cfg.batch_size == 0 || stream_cfg.batches_per_domain == 0 {
        return Err(Error::config("batch_size and batches_per_domain must be positive"));
    }
    if stream_cfg.repeat == 0 {
        return Err(Error::config("repeat must be at least 1"));
    }
    for d in &stream_cfg.domains {
        d.validate(source_cfg.input_dim)?;
    }

    let means = class_means(source_cfg);
    let c = source_cfg.classes;
    let dim = source_cfg.input_dim;
    let b = stream_cfg.batch_size;
    let mut rng = StdRng::seed_from_u64(stream_cfg.seed);

    let per_round = stream_cfg.domains.len() * stream_cfg.batches_per_domain;
    let mut round_one: Vec<StreamBatch> = Vec::with_capacity(per_round);
    let mut batch_index = 0usize;
    for domain in &stream_cfg.domains {
        for _ in 0..stream_cfg.batches_per_domain {
            let mut labels = Vec::with_capacity(b);
            let mut data = Vec::with_capacity(b * dim);
            for _ in 0..b {
                let y = rng.random_range(0..c);
                labels.push(y);
                let start = data.len();
                for d in 0..dim {
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    data.push(means.get(y, d) + source_cfg.sigma * eps);
                }
                domain.transform(&mut data[start..]);
                if domain.noise_sigma > 0.0 {
                    for v in &mut data[start..] {
                        let eps: f64 = StandardNormal.sample(&mut rng);
                        *v += domain.noise_sigma * eps;
                    }
                }
            }
            round_one.push(StreamBatch {
                x: Mat::new(b, dim, data)?,
                batch_index,
                eval: Quarantined::new(EvalInfo { labels, domain_id: domain.id }),
            });
            batch_index += 1;
        }
    }

    let mut out = round_one.clone();
    for _ in 1..stream_cfg.repeat {
        for template in &round_one {
            let mut replay = template.clone();
            replay.batch_index = batch_index;
            batch_index += 1;
            out.push(replay);
        }
    }
    Ok(out)
}

/// A feature-space dataset read from CSV; label -1 means unlabeled.
#[derive(Debug, Clone)]
pub struct FeatureDataset {
    pub features: Mat,
    pub labels: Vec<i64>,
}

/// Parse the feature CSV format: header `label,f0,...,f{L-1}`, one sample
/// per row, `#` comment lines allowed anywhere, UTF-8.
pub fn ingest_feature_csv(reader: impl BufRead, expected_dim: Option<usize>) -> Result<FeatureDataset> {
    let mut width: Option<usize> = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<i64> = Vec::new();
    let mut saw_header = false;

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        if !saw_header {
            if !trimmed.starts_with("label") {
                return Err(Error::Parse {
                    line: line_no,
                    message: "header must start with `label`".to_string(),
                });
            }
            let dim = trimmed.split(',').count().saturating_sub(1);
            if dim == 0 {
                return Err(Error::Parse { line: line_no, message: "header has no feature columns".into() });
            }
            if let Some(expect) = expected_dim {
                if dim != expect {
                    return Err(Error::dimension(format!(
                        "header declares {dim} features, expected {expect} (line {line_no})"
                    )));
                }
            }
            width = Some(dim);
            saw_header = true;
            continue;
        }
        let dim = width.unwrap();
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(Error::dimension(format!(
                "row has {} fields, expected {} (line {line_no})",
                fields.len(),
                dim + 1
            )));
        }
        let label: i64 = fields[0]
            .trim()
            .parse()
            .map_err(|_| Error::Parse { line: line_no, message: format!("bad label `{}`", fields[0]) })?;
        if label < -1 {
            return Err(Error::Parse { line: line_no, message: format!("label must be >= -1, got {label}") });
        }
        let mut row = Vec::with_capacity(dim);
        for f in &fields[1..] {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| Error::Parse { line: line_no, message: format!("bad float `{f}`") })?;
            if !v.is_finite() {
                return Err(Error::Parse { line: line_no, message: format!("non-finite value `{f}`") });
            }
            row.push(v);
        }
        labels.push(label);
        rows.push(row);
    }

    if !saw_header {
        return Err(Error::Parse { line: 0, message: "missing header".into() });
    }
    if rows.is_empty() {
        return Err(Error::data("feature CSV has no samples"));
    }
    Ok(FeatureDataset { features: Mat::from_rows(&rows)?, labels })
}

/// Write the feature CSV format. Floats use the shortest representation
/// that round-trips exactly, so write-then-read returns identical values.
pub fn write_feature_csv(ds: &FeatureDataset, mut out: impl Write) -> Result<()> {
    write!(out, "label")?;
    for j in 0..ds.features.cols() {
        write!(out, ",f{j}")?;
    }
    writeln!(out)?;
    for i in 0..ds.features.rows() {
        write!(out, "{}", ds.labels[i])?;
        for &v in ds.features.row(i) {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn source_is_deterministic() {
        let cfg = SourceConfig::default();
        let a = make_source(&cfg).unwrap();
        let b = make_source(&cfg).unwrap();
        assert!(a.inputs().unwrap().bits_eq(b.inputs().unwrap()));
        assert_eq!(a.labels().unwrap(), b.labels().unwrap());
    }

    #[test]
    fn single_class_rejected() {
        let cfg = SourceConfig { classes: 1, ..Default::default() };
        assert!(matches!(make_source(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn sealed_dataset_refuses_access() {
        let ds = make_source(&SourceConfig::default()).unwrap();
        assert!(ds.inputs().is_ok());
        ds.seal();
        assert!(matches!(ds.inputs(), Err(Error::SourceSealed)));
        assert!(matches!(ds.labels(), Err(Error::SourceSealed)));
    }

    #[test]
    fn stream_is_deterministic_and_ordered() {
        let scfg = SourceConfig::default();
        let stream_cfg = StreamConfig {
            domains: vec![DomainSpec::identity(0, scfg.input_dim)],
            batches_per_domain: 4,
            batch_size: 8,
            repeat: 1,
            seed: 3,
        };
        let a = make_stream(&stream_cfg, &scfg).unwrap();
        let b = make_stream(&stream_cfg, &scfg).unwrap();
        assert_eq!(a.len(), 4);
        for (i, (ba, bb)) in a.iter().zip(&b).enumerate() {
            assert_eq!(ba.batch_index, i);
            assert!(ba.inputs().bits_eq(bb.inputs()));
        }
    }

    #[test]
    fn identity_domain_matches_source_distribution() {
        let scfg = SourceConfig { samples_per_class: 400, ..Default::default() };
        let stream_cfg = StreamConfig {
            domains: vec![DomainSpec::identity(0, scfg.input_dim)],
            batches_per_domain: 40,
            batch_size: 100,
            repeat: 1,
            seed: 11,
        };
        let stream = make_stream(&stream_cfg, &scfg).unwrap();
        let src = make_source(&scfg).unwrap();
        // Two-sample mean check per coordinate, 3 sigma / sqrt(n) budget.
        let dim = scfg.input_dim;
        let mut src_mean = vec![0.0; dim];
        for i in 0..src.len() {
            for (m, &v) in src_mean.iter_mut().zip(src.inputs().unwrap().row(i)) {
                *m += v;
            }
        }
        for m in &mut src_mean {
            *m /= src.len() as f64;
        }
        let n_stream: usize = stream.iter().map(|b| b.inputs().rows()).sum();
        let mut stream_mean = vec![0.0; dim];
        for b in &stream {
            for i in 0..b.inputs().rows() {
                for (m, &v) in stream_mean.iter_mut().zip(b.inputs().row(i)) {
                    *m += v;
                }
            }
        }
        for m in &mut stream_mean {
            *m /= n_stream as f64;
        }
        // per-coordinate spread ~ sqrt(sigma^2 + mu_sep^2) around 0
        let spread = (scfg.sigma.powi(2) + scfg.mu_sep.powi(2)).sqrt();
        let budget = 4.0 * spread / (n_stream.min(src.len()) as f64).sqrt();
        for d in 0..dim {
            assert!(
                (src_mean[d] - stream_mean[d]).abs() < budget,
                "coordinate {d}: {} vs {}",
                src_mean[d],
                stream_mean[d]
            );
        }
    }

    #[test]
    fn repeat_replays_identical_data() {
        let scfg = SourceConfig::default();
        let dom = DomainSpec {
            id: 0,
            rotation_angle: 0.2,
            scale: vec![1.1; scfg.input_dim],
            shift: vec![0.3; scfg.input_dim],
            noise_sigma: 0.1,
        };
        let stream_cfg = StreamConfig {
            domains: vec![dom.clone(), DomainSpec::identity(1, scfg.input_dim), dom],
            batches_per_domain: 2,
            batch_size: 4,
            repeat: 10,
            seed: 9,
        };
        let stream = make_stream(&stream_cfg, &scfg).unwrap();
        assert_eq!(stream.len(), 10 * 3 * 2);
        // round 2 replays round 1 bit-for-bit, with fresh quarantine counters
        for k in 0..6 {
            assert!(stream[k].inputs().bits_eq(stream[6 + k].inputs()));
            assert_eq!(stream[6 + k].batch_index, 6 + k);
            assert_eq!(stream[6 + k].eval().read_count(), 0);
        }
    }

    #[test]
    fn domain_transform_invertible_without_noise() {
        let dim = 5;
        let dom = DomainSpec {
            id: 0,
            rotation_angle: 0.7,
            scale: vec![0.5, 2.0, 1.5, 0.9, 1.2],
            shift: vec![1.0, -2.0, 0.0, 3.0, -0.5],
            noise_sigma: 0.0,
        };
        let original = vec![0.3, -1.2, 4.0, 0.0, 2.2];
        let mut x = original.clone();
        dom.transform(&mut x);
        dom.inverse_transform(&mut x);
        for (a, b) in x.iter().zip(&original) {
            assert!((a - b).abs() < 1e-12);
        }
        let _ = dim;
    }

    #[test]
    fn quarantine_counts_reads() {
        let scfg = SourceConfig::default();
        let stream_cfg = StreamConfig {
            domains: vec![DomainSpec::identity(0, scfg.input_dim)],
            batches_per_domain: 1,
            batch_size: 2,
            repeat: 1,
            seed: 1,
        };
        let stream = make_stream(&stream_cfg, &scfg).unwrap();
        assert_eq!(stream[0].eval().read_count(), 0);
        let info = stream[0].eval().read_for_eval();
        assert_eq!(info.labels.len(), 2);
        assert_eq!(stream[0].eval().read_count(), 1);
    }

    #[test]
    fn feature_csv_round_trip() {
        let ds = FeatureDataset {
            features: Mat::new(3, 2, vec![1.5, -2.25e-7, 0.1, 3.0, -0.0, 9.999999999999999e5]).unwrap(),
            labels: vec![0, -1, 4],
        };
        let mut buf = Vec::new();
        write_feature_csv(&ds, &mut buf).unwrap();
        let back = ingest_feature_csv(Cursor::new(&buf), Some(2)).unwrap();
        assert!(back.features.bits_eq(&ds.features));
        assert_eq!(back.labels, ds.labels);
    }

    #[test]
    fn feature_csv_errors_name_the_line() {
        let text = "# comment\nlabel,f0,f1\n0,1.0,2.0\n1,3.0\n";
        let err = ingest_feature_csv(Cursor::new(text), None).unwrap_err();
        match err {
            Error::Dimension(msg) => assert!(msg.contains("line 4"), "{msg}"),
            other => panic!("unexpected error {other:?}"),
        }
        let text2 = "label,f0\n0,not_a_number\n";
        match ingest_feature_csv(Cursor::new(text2), None).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn feature_csv_well_formed() {
        let text = "label,f0,f1,f2\n0,1.0,2e-3,-4.5\n-1,0.0,0.1,0.2\n3,9,8,7\n";
        let ds = ingest_feature_csv(Cursor::new(text), Some(3)).unwrap();
        assert_eq!(ds.features.rows(), 3);
        assert_eq!(ds.labels, vec![0, -1, 3]);
    }
}
