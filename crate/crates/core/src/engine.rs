//! The continual adaptation loop: predict, record, update the subspace,
//! take one gradient step, refresh the teacher — in that order, batch by
//! batch. Predictions are recorded before the batch's parameter update, so
//! the metrics reflect the online protocol.
//!
//! Contracts enforced at run time:
//! - frozen model: backbone weight/bias and the head are digest-checked
//!   before and after the run;
//! - label quarantine: ground truth is read exactly once per batch (by the
//!   metrics recorder) and never by the adaptation path;
//! - source-free: the run signature has no source-dataset parameter at all.

use std::io::Write;

use rand::rngs::StdRng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use crate::adapter::AdapterState;
use crate::agop::{AgopConfig, AgopEstimator};
use crate::config::{mix_seed, ExperimentConfig};
use crate::error::Result;
use crate::linalg::{bits_digest, cumulative_spectral_energy, subspace_similarity, sym_eig, Mat};
use crate::losses::{
    optimizer_step, softmax_rows, total_loss_and_grads, AdaptationInputs, LossConfig, OptState,
};
use crate::model::{argmax, Backbone, ClassifierHead, EmaTeacher, PrototypeBank};
use crate::stream::StreamBatch;

/// Deliberate contract violations for the fault-injection tests. `None` in
/// production; the other arms exist so the violation detectors can be shown
/// to fire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Corrupt the frozen backbone weight mid-run.
    PerturbBackbone,
    /// Read quarantined labels from the adaptation stage.
    PeekLabels,
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub agop: AgopConfig,
    pub loss: LossConfig,
    pub teacher_momentum: f64,
    pub sigma_aug: f64,
    pub carry_scaling: bool,
    /// Record the error after the parameter update instead of before.
    pub post_step_eval: bool,
    /// When false the metrics recorder is absent: labels are never read and
    /// no rows are produced; the adaptation trajectory must be identical.
    pub record_metrics: bool,
    pub seed: u64,
    pub fault: Fault,
}

impl EngineConfig {
    pub fn from_experiment(cfg: &ExperimentConfig) -> Self {
        EngineConfig {
            agop: cfg.agop_config(),
            loss: cfg.loss_config(),
            teacher_momentum: cfg.teacher_momentum,
            sigma_aug: cfg.sigma_aug,
            carry_scaling: cfg.carry_scaling,
            post_step_eval: cfg.post_step_eval,
            record_metrics: true,
            seed: mix_seed(cfg.seed, 0x05),
            fault: Fault::None,
        }
    }
}

/// One metrics row per batch; the CSV schema is
/// `batch,domain,err,align,kappa_r,loss_st,loss_cont,confident,eig`.
#[derive(Debug, Clone)]
pub struct BatchMetrics {
    pub batch_index: usize,
    pub domain_id: usize,
    pub error_rate: f64,
    /// Similarity of the installed basis to the top-r eigenvectors of
    /// `W^T W`; recomputed at every refresh, constant in between.
    pub alignment: f64,
    /// kappa(r) of the estimator's spectrum at the latest decomposition.
    pub kappa_r: f64,
    pub loss_st: f64,
    pub loss_cont: f64,
    pub confident_count: usize,
    pub eig_refreshed: bool,
}

pub const METRICS_HEADER: &str = "batch,domain,err,align,kappa_r,loss_st,loss_cont,confident,eig";

impl BatchMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.batch_index,
            self.domain_id,
            self.error_rate,
            self.alignment,
            self.kappa_r,
            self.loss_st,
            self.loss_cont,
            self.confident_count,
            u8::from(self.eig_refreshed)
        )
    }
}

#[derive(Debug)]
pub struct RunResult {
    pub metrics: Vec<BatchMetrics>,
    pub backbone: Backbone,
    pub adapter: AdapterState,
    pub teacher: EmaTeacher,
    pub estimator: AgopEstimator,
    /// Frozen parameters unchanged over the run.
    pub frozen_ok: bool,
    /// Ground truth read exactly as often as the recorder requires.
    pub quarantine_ok: bool,
    /// Digest of (s, gain, abias) at each batch's prediction time.
    pub pred_param_digests: Vec<u64>,
    /// Digest of (s, gain, abias) after each batch's update.
    pub post_param_digests: Vec<u64>,
}

impl RunResult {
    pub fn mean_error(&self) -> f64 {
        if self.metrics.is_empty() {
            return f64::NAN;
        }
        self.metrics.iter().map(|m| m.error_rate).sum::<f64>() / self.metrics.len() as f64
    }

    pub fn final_alignment(&self) -> f64 {
        self.metrics.last().map(|m| m.alignment).unwrap_or(f64::NAN)
    }
}

/// Full adaptation run.
pub fn run(
    cfg: &EngineConfig,
    backbone: Backbone,
    head: &ClassifierHead,
    protos: &PrototypeBank,
    stream: &[StreamBatch],
    sink: Option<&mut dyn Write>,
) -> Result<RunResult> {
    run_inner(cfg, backbone, head, protos, stream, sink, true)
}

/// Comparison arm: the identical loop with the update stages disabled, so
/// the frozen source model serves the whole stream.
pub fn run_baseline_frozen(
    cfg: &EngineConfig,
    backbone: Backbone,
    head: &ClassifierHead,
    protos: &PrototypeBank,
    stream: &[StreamBatch],
    sink: Option<&mut dyn Write>,
) -> Result<RunResult> {
    run_inner(cfg, backbone, head, protos, stream, sink, false)
}

fn run_inner(
    cfg: &EngineConfig,
    mut backbone: Backbone,
    head: &ClassifierHead,
    protos: &PrototypeBank,
    stream: &[StreamBatch],
    mut sink: Option<&mut dyn Write>,
    adapt_enabled: bool,
) -> Result<RunResult> {
    cfg.loss.validate()?;
    let frozen_start = (backbone.frozen_digest(), head.frozen_digest());
    let reads_before: Vec<u32> = stream.iter().map(|b| b.eval().read_count()).collect();

    let r = cfg.agop.r;
    let mut estimator = AgopEstimator::init_from_head(head, cfg.agop.clone())?;
    // Reference basis for the alignment diagnostic: the classifier's own
    // top-r eigenvectors. The estimator starts from the same matrix, so the
    // initial alignment is 1 by construction.
    let eig0 = sym_eig(estimator.g())?;
    let ref_basis = eig0.top_vectors(r);
    let mut adapter = AdapterState::new(eig0.top_vectors(r))?;
    let mut alignment = subspace_similarity(adapter.basis(), &ref_basis)?;
    let mut kappa_r = cumulative_spectral_energy(&eig0.values, r)?;

    let mut teacher = EmaTeacher::new(
        head.clone(),
        backbone.gain.clone(),
        backbone.abias.clone(),
        cfg.teacher_momentum,
    )?;
    let mut opt_state = OptState::new(r, backbone.feature_dim());
    let mut rng = StdRng::seed_from_u64(cfg.seed);

    let mut metrics = Vec::new();
    let mut pred_param_digests = Vec::with_capacity(stream.len());
    let mut post_param_digests = Vec::with_capacity(stream.len());
    let mut wrote_header = false;

    for batch in stream {
        let x = batch.inputs();
        let act = backbone.activations(x)?;
        let f_pre = backbone.apply_affine(&act);
        let f_adapt = adapter.adapt(&f_pre)?;
        let logits = head.logits(&f_adapt)?;
        pred_param_digests.push(param_digest(&adapter, &backbone));

        // (1) predictions and error are recorded before this batch's update
        let mut error_rate = 0.0;
        let mut domain_id = 0;
        if cfg.record_metrics && !cfg.post_step_eval {
            let info = batch.eval().read_for_eval();
            domain_id = info.domain_id;
            error_rate = batch_error(&logits, &info.labels);
        }

        let mut loss_st = 0.0;
        let mut loss_cont = 0.0;
        let mut confident_count = 0;
        let mut refreshed = false;

        if adapt_enabled {
            // (3) confidence from adapted-feature probabilities; AGOP from
            // the pre-adaptation features
            let probs = softmax_rows(&logits);
            let obs = estimator.observe(head, &f_pre, &probs)?;
            confident_count = obs.confident.len();

            // (4) periodic basis refresh, before the gradient step
            if estimator.due_for_refresh() {
                let eig = sym_eig(estimator.g())?;
                let basis = eig.top_vectors(r);
                if cfg.carry_scaling {
                    adapter.set_basis_carry(basis)?;
                } else {
                    adapter.set_basis(basis)?;
                }
                opt_state.reset_scaling_moments(r);
                alignment = subspace_similarity(adapter.basis(), &ref_basis)?;
                kappa_r = cumulative_spectral_energy(&eig.values, r)?;
                refreshed = true;
            }

            // (5) losses on both views, one optimizer step
            let x_aug = perturb_inputs(x, cfg.sigma_aug, &mut rng);
            let inputs = AdaptationInputs {
                adapter: &adapter,
                backbone: &backbone,
                head,
                teacher: &teacher,
                x,
                x_aug: &x_aug,
                protos,
                confident: if cfg.loss.contrastive_confident_only {
                    Some(obs.confident.as_slice())
                } else {
                    None
                },
            };
            let bundle = total_loss_and_grads(&inputs, &cfg.loss)?;
            loss_st = bundle.loss_st;
            loss_cont = bundle.loss_cont;
            let affine_trainable = backbone.affine_trainable;
            optimizer_step(
                adapter.scaling_mut(),
                &mut backbone.gain,
                &mut backbone.abias,
                &bundle,
                &cfg.loss,
                &mut opt_state,
                affine_trainable,
            );

            // (6) teacher follows the student
            teacher.update(head, &backbone.gain, &backbone.abias)?;

            match cfg.fault {
                Fault::PerturbBackbone if batch.batch_index == stream.len() / 2 => {
                    backbone.fault_perturb_frozen_weight();
                }
                Fault::PeekLabels => {
                    // a violating adaptation stage would read ground truth here
                    let _ = batch.eval().read_for_eval();
                }
                _ => {}
            }
        }

        if cfg.record_metrics && cfg.post_step_eval {
            let f_pre_post = backbone.apply_affine(&act);
            let logits_post = head.logits(&adapter.adapt(&f_pre_post)?)?;
            let info = batch.eval().read_for_eval();
            domain_id = info.domain_id;
            error_rate = batch_error(&logits_post, &info.labels);
        }

        post_param_digests.push(param_digest(&adapter, &backbone));

        // (7) metrics row, flushed immediately
        if cfg.record_metrics {
            let row = BatchMetrics {
                batch_index: batch.batch_index,
                domain_id,
                error_rate,
                alignment,
                kappa_r,
                loss_st,
                loss_cont,
                confident_count,
                eig_refreshed: refreshed,
            };
            if let Some(out) = sink.as_deref_mut() {
                if !wrote_header {
                    writeln!(out, "{METRICS_HEADER}")?;
                    wrote_header = true;
                }
                writeln!(out, "{}", row.csv_row())?;
                out.flush()?;
            }
            metrics.push(row);
        }
    }

    let frozen_ok = (backbone.frozen_digest(), head.frozen_digest()) == frozen_start;
    let expected_reads: u32 = if cfg.record_metrics { 1 } else { 0 };
    let quarantine_ok = stream
        .iter()
        .zip(&reads_before)
        .all(|(b, &before)| b.eval().read_count() - before == expected_reads);

    Ok(RunResult {
        metrics,
        backbone,
        adapter,
        teacher,
        estimator,
        frozen_ok,
        quarantine_ok,
        pred_param_digests,
        post_param_digests,
    })
}

fn param_digest(adapter: &AdapterState, backbone: &Backbone) -> u64 {
    bits_digest([adapter.scaling(), backbone.gain.as_slice(), backbone.abias.as_slice()])
}

fn batch_error(logits: &Mat, labels: &[usize]) -> f64 {
    let mut wrong = 0usize;
    for (i, &y) in labels.iter().enumerate() {
        if argmax(logits.row(i)) != y {
            wrong += 1;
        }
    }
    wrong as f64 / labels.len().max(1) as f64
}

fn perturb_inputs(x: &Mat, sigma: f64, rng: &mut StdRng) -> Mat {
    if sigma == 0.0 {
        return x.clone();
    }
    Mat::from_fn(x.rows(), x.cols(), |i, j| {
        let eps: f64 = StandardNormal.sample(rng);
        x.get(i, j) + sigma * eps
    })
}

/// Write a metrics CSV in one go (the engine also streams rows during the
/// run when given a sink).
pub fn write_metrics_csv(metrics: &[BatchMetrics], mut out: impl Write) -> Result<()> {
    writeln!(out, "{METRICS_HEADER}")?;
    for m in metrics {
        writeln!(out, "{}", m.csv_row())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_prototypes, pretrain_source, PretrainConfig};
    use crate::stream::{make_source, make_stream, DomainSpec, SourceConfig, StreamConfig};

    fn small_setup() -> (Backbone, ClassifierHead, PrototypeBank, Vec<StreamBatch>, EngineConfig) {
        let scfg = SourceConfig {
            classes: 4,
            input_dim: 8,
            samples_per_class: 30,
            mu_sep: 4.0,
            sigma: 1.0,
            seed: 77,
        };
        let src = make_source(&scfg).unwrap();
        let (backbone, head) = pretrain_source(
            &src,
            &PretrainConfig { feature_dim: 16, epochs: 120, ..Default::default() },
        )
        .unwrap();
        let protos = build_prototypes(&backbone, &src).unwrap();
        src.seal();
        let stream = make_stream(
            &StreamConfig {
                domains: vec![
                    DomainSpec {
                        id: 0,
                        rotation_angle: 0.2,
                        scale: vec![0.8; 8],
                        shift: vec![0.4; 8],
                        noise_sigma: 0.1,
                    },
                    DomainSpec::identity(1, 8),
                ],
                batches_per_domain: 6,
                batch_size: 16,
                repeat: 1,
                seed: 5,
            },
            &scfg,
        )
        .unwrap();
        let cfg = EngineConfig {
            agop: AgopConfig { alpha: 0.2, tau: 0.5, t_eig: 3, r: 4 },
            loss: LossConfig::default(),
            teacher_momentum: 0.99,
            sigma_aug: 0.05,
            carry_scaling: false,
            post_step_eval: false,
            record_metrics: true,
            seed: 9,
            fault: Fault::None,
        };
        (backbone, head, protos, stream, cfg)
    }

    #[test]
    fn run_emits_one_row_per_batch_and_keeps_contracts() {
        let (backbone, head, protos, stream, cfg) = small_setup();
        let res = run(&cfg, backbone, &head, &protos, &stream, None).unwrap();
        assert_eq!(res.metrics.len(), stream.len());
        assert!(res.frozen_ok);
        assert!(res.quarantine_ok);
        for (i, m) in res.metrics.iter().enumerate() {
            assert_eq!(m.batch_index, i);
            assert!((0.0..=1.0).contains(&m.error_rate));
            assert!((0.0..=1.0).contains(&m.alignment));
            assert!(m.kappa_r > 0.0 && m.kappa_r <= 1.0);
        }
        // refresh cadence: every t_eig-th batch
        for (i, m) in res.metrics.iter().enumerate() {
            assert_eq!(m.eig_refreshed, (i + 1) % cfg.agop.t_eig == 0, "batch {i}");
        }
    }

    #[test]
    fn predict_then_adapt_ordering() {
        let (backbone, head, protos, stream, cfg) = small_setup();
        let res = run(&cfg, backbone, &head, &protos, &stream, None).unwrap();
        // prediction at batch t uses the parameters produced by batch t-1
        for t in 1..stream.len() {
            assert_eq!(res.pred_param_digests[t], res.post_param_digests[t - 1], "batch {t}");
        }
        // and the update actually changes parameters
        assert_ne!(res.pred_param_digests[0], res.post_param_digests[0]);
    }

    #[test]
    fn baseline_never_updates() {
        let (backbone, head, protos, stream, cfg) = small_setup();
        let init_digest = {
            let eig0 = sym_eig(&head.w.gram()).unwrap();
            let adapter = AdapterState::new(eig0.top_vectors(cfg.agop.r)).unwrap();
            bits_digest([
                adapter.scaling(),
                backbone.gain.as_slice(),
                backbone.abias.as_slice(),
            ])
        };
        let res = run_baseline_frozen(&cfg, backbone, &head, &protos, &stream, None).unwrap();
        assert!(res.frozen_ok);
        assert!(res.quarantine_ok);
        assert!(res.pred_param_digests.iter().all(|&d| d == init_digest));
        assert!(res.post_param_digests.iter().all(|&d| d == init_digest));
        assert!(res.metrics.iter().all(|m| m.loss_st == 0.0 && m.loss_cont == 0.0));
        assert!(res.metrics.iter().all(|m| !m.eig_refreshed && m.confident_count == 0));
    }

    #[test]
    fn same_seed_same_rows_and_state() {
        let (backbone, head, protos, stream, cfg) = small_setup();
        let a = run(&cfg, backbone.clone(), &head, &protos, &stream, None).unwrap();
        let b = run(&cfg, backbone, &head, &protos, &stream, None).unwrap();
        let mut csv_a = Vec::new();
        write_metrics_csv(&a.metrics, &mut csv_a).unwrap();
        let mut csv_b = Vec::new();
        write_metrics_csv(&b.metrics, &mut csv_b).unwrap();
        assert_eq!(csv_a, csv_b);
        assert_eq!(a.post_param_digests, b.post_param_digests);
    }

    #[test]
    fn recorder_absence_does_not_change_the_trajectory() {
        let (backbone, head, protos, stream, mut cfg) = small_setup();
        let with = run(&cfg, backbone.clone(), &head, &protos, &stream, None).unwrap();
        cfg.record_metrics = false;
        let without = run(&cfg, backbone, &head, &protos, &stream, None).unwrap();
        assert!(without.metrics.is_empty());
        assert!(without.quarantine_ok);
        assert_eq!(with.post_param_digests, without.post_param_digests);
    }

    #[test]
    fn scrambled_labels_change_metrics_not_state() {
        let (backbone, head, protos, stream, cfg) = small_setup();
        let res = run(&cfg, backbone.clone(), &head, &protos, &stream, None).unwrap();
        // rebuild the stream with the same seed, then scramble labels only
        let scrambled: Vec<StreamBatch> = stream
            .iter()
            .map(|b| {
                let mut clone = b.clone();
                clone.scramble_labels_for_tests();
                clone
            })
            .collect();
        let res2 = run(&cfg, backbone, &head, &protos, &scrambled, None).unwrap();
        assert_eq!(res.post_param_digests, res2.post_param_digests);
        let err_a: Vec<f64> = res.metrics.iter().map(|m| m.error_rate).collect();
        let err_b: Vec<f64> = res2.metrics.iter().map(|m| m.error_rate).collect();
        assert_ne!(err_a, err_b);
    }

    /// Like `small_setup`, but with a first domain harsh enough that the
    /// frozen model misclassifies a solid fraction of it.
    fn heavy_setup() -> (Backbone, ClassifierHead, PrototypeBank, Vec<StreamBatch>, EngineConfig) {
        let (backbone, head, protos, _, cfg) = small_setup();
        let scfg = SourceConfig {
            classes: 4,
            input_dim: 8,
            samples_per_class: 30,
            mu_sep: 4.0,
            sigma: 1.0,
            seed: 77,
        };
        let heavy_domain = DomainSpec {
            id: 0,
            rotation_angle: 0.5,
            scale: vec![0.6; 8],
            shift: vec![4.0; 8],
            noise_sigma: 1.5,
        };
        let stream = make_stream(
            &StreamConfig {
                domains: vec![heavy_domain, DomainSpec::identity(1, 8)],
                batches_per_domain: 6,
                batch_size: 32,
                repeat: 1,
                seed: 5,
            },
            &scfg,
        )
        .unwrap();
        (backbone, head, protos, stream, cfg)
    }

    #[test]
    fn baseline_error_rises_on_the_heavy_domain() {
        let (backbone, head, protos, stream, cfg) = heavy_setup();
        let res = run_baseline_frozen(&cfg, backbone, &head, &protos, &stream, None).unwrap();
        let heavy: f64 = res.metrics[..6].iter().map(|m| m.error_rate).sum::<f64>() / 6.0;
        let clean: f64 = res.metrics[6..].iter().map(|m| m.error_rate).sum::<f64>() / 6.0;
        assert!(heavy > clean, "heavy {heavy} vs clean {clean}");
    }

    #[test]
    fn post_step_eval_changes_only_the_recorded_errors() {
        let (backbone, head, protos, stream, mut cfg) = heavy_setup();
        // a large step makes the pre/post prediction difference visible
        cfg.loss.lr = 0.2;
        let pre = run(&cfg, backbone.clone(), &head, &protos, &stream, None).unwrap();
        cfg.post_step_eval = true;
        let post = run(&cfg, backbone, &head, &protos, &stream, None).unwrap();
        assert_eq!(pre.post_param_digests, post.post_param_digests);
        let err_pre: Vec<f64> = pre.metrics.iter().map(|m| m.error_rate).collect();
        let err_post: Vec<f64> = post.metrics.iter().map(|m| m.error_rate).collect();
        assert_ne!(err_pre, err_post);
    }

    #[test]
    fn carry_scaling_takes_a_different_trajectory() {
        let (backbone, head, protos, stream, mut cfg) = small_setup();
        let plain = run(&cfg, backbone.clone(), &head, &protos, &stream, None).unwrap();
        cfg.carry_scaling = true;
        let carried = run(&cfg, backbone, &head, &protos, &stream, None).unwrap();
        assert!(carried.frozen_ok);
        assert_ne!(
            plain.post_param_digests.last(),
            carried.post_param_digests.last(),
            "carrying the scaling across refreshes must change the trajectory"
        );
    }

    #[test]
    fn frozen_affine_leaves_gain_and_bias_untouched() {
        let (mut backbone, head, protos, stream, cfg) = small_setup();
        backbone.affine_trainable = false;
        let gain0 = backbone.gain.clone();
        let abias0 = backbone.abias.clone();
        let res = run(&cfg, backbone, &head, &protos, &stream, None).unwrap();
        assert_eq!(res.backbone.gain, gain0);
        assert_eq!(res.backbone.abias, abias0);
        assert!(res.adapter.scaling().iter().any(|&s| s != 0.0), "scaling must still adapt");
    }

    #[test]
    fn zero_loss_weights_reproduce_the_baseline_errors() {
        let (backbone, head, protos, stream, mut cfg) = small_setup();
        cfg.loss.lambda_trg = 0.0;
        cfg.loss.lambda_cont = 0.0;
        let adapted = run(&cfg, backbone.clone(), &head, &protos, &stream, None).unwrap();
        let baseline = run_baseline_frozen(&cfg, backbone, &head, &protos, &stream, None).unwrap();
        // with zero gradients nothing moves, so predictions match batch by batch
        for (a, b) in adapted.metrics.iter().zip(&baseline.metrics) {
            assert_eq!(a.error_rate, b.error_rate, "batch {}", a.batch_index);
        }
        assert!(adapted.adapter.scaling().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn refresh_every_batch_keeps_alignment_at_one() {
        let (backbone, head, protos, stream, mut cfg) = small_setup();
        cfg.agop.t_eig = 1;
        let res = run(&cfg, backbone, &head, &protos, &stream, None).unwrap();
        for m in &res.metrics {
            assert!(m.eig_refreshed);
            assert!(m.alignment >= 1.0 - 1e-6, "alignment {} at batch {}", m.alignment, m.batch_index);
        }
    }

    #[test]
    fn fault_hooks_are_detected() {
        let (backbone, head, protos, stream, mut cfg) = small_setup();
        cfg.fault = Fault::PerturbBackbone;
        let res = run(&cfg, backbone.clone(), &head, &protos, &stream, None).unwrap();
        assert!(!res.frozen_ok, "backbone perturbation must be detected");

        cfg.fault = Fault::PeekLabels;
        let res2 = run(&cfg, backbone, &head, &protos, &stream, None).unwrap();
        assert!(!res2.quarantine_ok, "label peeking must be detected");
        assert!(res2.frozen_ok);
    }
}
