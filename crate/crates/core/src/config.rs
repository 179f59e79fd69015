//! Experiment configuration: a flat `key = value` file with `#` comments.
//!
//! One file describes the whole experiment: source generator, model,
//! AGOP/loss hyperparameters, and the stream manifest (domain specs in
//! order, batch counts, seed, repeat count). `default_file_contents`
//! produces a fully commented default.

use rand::rngs::StdRng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use crate::agop::AgopConfig;
use crate::error::{Error, Result};
use crate::losses::{LossConfig, OptimizerKind};
use crate::model::{Activation, PretrainConfig};
use crate::stream::{DomainSpec, SourceConfig, StreamConfig};

/// `scale` / `shift` entries in a domain line: a scalar that broadcasts to
/// every input dimension, or an explicit comma-separated vector.
#[derive(Debug, Clone, PartialEq)]
pub enum ScalarOrVec {
    Scalar(f64),
    Vec(Vec<f64>),
}

impl ScalarOrVec {
    fn expand(&self, dim: usize, what: &str) -> Result<Vec<f64>> {
        match self {
            ScalarOrVec::Scalar(v) => Ok(vec![*v; dim]),
            ScalarOrVec::Vec(v) => {
                if v.len() != dim {
                    return Err(Error::config(format!(
                        "{what} vector has length {}, expected {dim}",
                        v.len()
                    )));
                }
                Ok(v.clone())
            }
        }
    }
}

/// One explicit `domain = ...` manifest line, in presentation order.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainLine {
    pub angle: f64,
    pub scale: ScalarOrVec,
    pub shift: ScalarOrVec,
    pub noise: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub seed: u64,

    // source model
    pub classes: usize,
    pub input_dim: usize,
    pub feature_dim: usize,
    pub activation: Activation,
    pub samples_per_class: usize,
    pub mu_sep: f64,
    pub sigma_src: f64,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,

    // subspace estimation
    pub alpha: f64,
    pub tau: f64,
    pub t_eig: usize,
    /// `None` means `min(64, classes)`.
    pub rank: Option<usize>,

    // losses and optimizer
    pub lambda_trg: f64,
    pub lambda_cont: f64,
    pub temperature: f64,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub sce_weight_forward: f64,
    pub sce_weight_reverse: f64,
    pub contrastive_confident_only: bool,

    // adaptation loop
    pub teacher_momentum: f64,
    pub sigma_aug: f64,
    pub carry_scaling: bool,
    pub post_step_eval: bool,
    pub affine_trainable: bool,

    // stream manifest
    pub batch_size: usize,
    pub batches_per_domain: usize,
    pub repeat: usize,
    /// Number of auto-generated ramp domains (used when no explicit
    /// `domain =` lines are present).
    pub auto_domains: usize,
    pub domains: Vec<DomainLine>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            classes: 10,
            input_dim: 32,
            feature_dim: 128,
            activation: Activation::Tanh,
            samples_per_class: 100,
            mu_sep: 3.0,
            sigma_src: 1.0,
            pretrain_epochs: 200,
            pretrain_lr: 0.5,
            alpha: 0.1,
            tau: 0.8,
            t_eig: 10,
            rank: None,
            lambda_trg: 1.0,
            lambda_cont: 0.5,
            temperature: 0.1,
            lr: 0.01,
            optimizer: OptimizerKind::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            sce_weight_forward: 1.0,
            sce_weight_reverse: 1.0,
            contrastive_confident_only: true,
            teacher_momentum: 0.999,
            sigma_aug: 0.05,
            carry_scaling: false,
            post_step_eval: false,
            affine_trainable: true,
            batch_size: 64,
            batches_per_domain: 50,
            repeat: 1,
            auto_domains: 8,
            domains: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            };
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let Some(eq) = line.find('=') else {
                return Err(Error::config(format!("line {line_no}: expected `key = value`")));
            };
            let key = line[..eq].trim();
            let value = line[eq + 1..].trim();
            cfg.apply(key, value)
                .map_err(|e| Error::config(format!("line {line_no}: {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(value, key)?,
            "classes" => self.classes = parse_num(value, key)?,
            "input_dim" => self.input_dim = parse_num(value, key)?,
            "feature_dim" => self.feature_dim = parse_num(value, key)?,
            "activation" => {
                self.activation = match value {
                    "identity" => Activation::Identity,
                    "tanh" => Activation::Tanh,
                    other => return Err(Error::config(format!("unknown activation `{other}`"))),
                }
            }
            "samples_per_class" => self.samples_per_class = parse_num(value, key)?,
            "mu_sep" => self.mu_sep = parse_num(value, key)?,
            "sigma_src" => self.sigma_src = parse_num(value, key)?,
            "pretrain_epochs" => self.pretrain_epochs = parse_num(value, key)?,
            "pretrain_lr" => self.pretrain_lr = parse_num(value, key)?,
            "alpha" => self.alpha = parse_num(value, key)?,
            "tau" => self.tau = parse_num(value, key)?,
            "t_eig" => self.t_eig = parse_num(value, key)?,
            "rank" => {
                self.rank = if value == "auto" { None } else { Some(parse_num(value, key)?) };
            }
            "lambda_trg" => self.lambda_trg = parse_num(value, key)?,
            "lambda_cont" => self.lambda_cont = parse_num(value, key)?,
            "temperature" => self.temperature = parse_num(value, key)?,
            "lr" => self.lr = parse_num(value, key)?,
            "optimizer" => {
                self.optimizer = match value {
                    "sgd" => OptimizerKind::Sgd,
                    "adam" => OptimizerKind::Adam,
                    other => return Err(Error::config(format!("unknown optimizer `{other}`"))),
                }
            }
            "adam_beta1" => self.adam_beta1 = parse_num(value, key)?,
            "adam_beta2" => self.adam_beta2 = parse_num(value, key)?,
            "adam_eps" => self.adam_eps = parse_num(value, key)?,
            "sce_weight_forward" => self.sce_weight_forward = parse_num(value, key)?,
            "sce_weight_reverse" => self.sce_weight_reverse = parse_num(value, key)?,
            "contrastive_confident_only" => self.contrastive_confident_only = parse_bool(value, key)?,
            "teacher_momentum" => self.teacher_momentum = parse_num(value, key)?,
            "sigma_aug" => self.sigma_aug = parse_num(value, key)?,
            "carry_scaling" => self.carry_scaling = parse_bool(value, key)?,
            "post_step_eval" => self.post_step_eval = parse_bool(value, key)?,
            "affine_trainable" => self.affine_trainable = parse_bool(value, key)?,
            "batch_size" => self.batch_size = parse_num(value, key)?,
            "batches_per_domain" => self.batches_per_domain = parse_num(value, key)?,
            "repeat" => self.repeat = parse_num(value, key)?,
            "auto_domains" => self.auto_domains = parse_num(value, key)?,
            "domain" => self.domains.push(parse_domain_line(value)?),
            other => return Err(Error::config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("classes must be at least 2"));
        }
        if self.input_dim < 2 {
            return Err(Error::config("input_dim must be at least 2"));
        }
        if self.feature_dim == 0 || self.batch_size == 0 || self.batches_per_domain == 0 {
            return Err(Error::config("dimensions and batch counts must be positive"));
        }
        if self.repeat == 0 {
            return Err(Error::config("repeat must be at least 1"));
        }
        if self.domains.is_empty() && self.auto_domains == 0 {
            return Err(Error::config("need auto_domains > 0 or explicit domain lines"));
        }
        if !(0.0..=1.0).contains(&self.teacher_momentum) {
            return Err(Error::config("teacher_momentum must be in [0, 1]"));
        }
        if self.sigma_aug < 0.0 {
            return Err(Error::config("sigma_aug must be non-negative"));
        }
        self.agop_config().validate(self.feature_dim)?;
        self.loss_config().validate()?;
        Ok(())
    }

    pub fn source_config(&self) -> SourceConfig {
        SourceConfig {
            classes: self.classes,
            input_dim: self.input_dim,
            samples_per_class: self.samples_per_class,
            mu_sep: self.mu_sep,
            sigma: self.sigma_src,
            seed: mix_seed(self.seed, 0x01),
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            feature_dim: self.feature_dim,
            activation: self.activation,
            epochs: self.pretrain_epochs,
            lr: self.pretrain_lr,
            seed: mix_seed(self.seed, 0x02),
        }
    }

    pub fn effective_rank(&self) -> usize {
        self.rank.unwrap_or_else(|| 64.min(self.classes))
    }

    pub fn agop_config(&self) -> AgopConfig {
        AgopConfig { alpha: self.alpha, tau: self.tau, t_eig: self.t_eig, r: self.effective_rank() }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda_trg: self.lambda_trg,
            lambda_cont: self.lambda_cont,
            temperature: self.temperature,
            lr: self.lr,
            optimizer: self.optimizer,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            sce_weight_forward: self.sce_weight_forward,
            sce_weight_reverse: self.sce_weight_reverse,
            contrastive_confident_only: self.contrastive_confident_only,
        }
    }

    /// Expand the manifest into ordered domain specs: explicit lines win,
    /// otherwise a seeded severity ramp.
    pub fn domain_specs(&self) -> Result<Vec<DomainSpec>> {
        if !self.domains.is_empty() {
            let mut out = Vec::with_capacity(self.domains.len());
            for (id, line) in self.domains.iter().enumerate() {
                out.push(DomainSpec {
                    id,
                    rotation_angle: line.angle,
                    scale: line.scale.expand(self.input_dim, "scale")?,
                    shift: line.shift.expand(self.input_dim, "shift")?,
                    noise_sigma: line.noise,
                });
            }
            return Ok(out);
        }
        Ok(default_domains(self.auto_domains, self.input_dim, mix_seed(self.seed, 0x03)))
    }

    pub fn stream_config(&self) -> Result<StreamConfig> {
        Ok(StreamConfig {
            domains: self.domain_specs()?,
            batches_per_domain: self.batches_per_domain,
            batch_size: self.batch_size,
            repeat: self.repeat,
            seed: mix_seed(self.seed, 0x04),
        })
    }

    /// A fully commented config file with every key at its default.
    pub fn default_file_contents() -> String {
        let d = ExperimentConfig::default();
        format!(
            "\
# gold experiment configuration
# Every key is optional; the values below are the defaults.

# --- run ---
seed = {seed}

# --- source model ---
classes = {classes}
input_dim = {input_dim}
feature_dim = {feature_dim}
activation = tanh              # identity | tanh
samples_per_class = {samples_per_class}
mu_sep = {mu_sep}              # class-mean spread of the Gaussian blobs
sigma_src = {sigma_src}        # within-class standard deviation
pretrain_epochs = {pretrain_epochs}
pretrain_lr = {pretrain_lr}

# --- subspace estimation ---
alpha = {alpha}                # AGOP EMA rate, (0, 1]
tau = {tau}                    # confidence threshold, (0, 1)
t_eig = {t_eig}                # batches between eigendecompositions
rank = auto                    # retained rank; auto = min(64, classes)

# --- losses and optimizer ---
lambda_trg = {lambda_trg}
lambda_cont = {lambda_cont}
temperature = {temperature}    # contrastive temperature
lr = {lr}
optimizer = adam               # sgd | adam
adam_beta1 = {adam_beta1}
adam_beta2 = {adam_beta2}
adam_eps = {adam_eps}
sce_weight_forward = {swf}     # weight on CE(teacher || student)
sce_weight_reverse = {swr}     # weight on CE(student || teacher)
contrastive_confident_only = {conf_only}

# --- adaptation loop ---
teacher_momentum = {teacher_momentum}
sigma_aug = {sigma_aug}        # input noise for the augmented view
carry_scaling = false          # project old scaling onto a refreshed basis
post_step_eval = false         # record error after the step instead of before
affine_trainable = true

# --- stream manifest ---
batch_size = {batch_size}
batches_per_domain = {batches_per_domain}
repeat = {repeat}              # passes over the domain sequence
auto_domains = {auto_domains}  # seeded severity ramp when no explicit domains

# Explicit domains (ordered, one line each) override auto_domains.
# scale and shift accept a scalar or a comma-separated vector of length input_dim.
# domain = angle=0.2 scale=0.8 shift=0.5 noise=0.1
",
            seed = d.seed,
            classes = d.classes,
            input_dim = d.input_dim,
            feature_dim = d.feature_dim,
            samples_per_class = d.samples_per_class,
            mu_sep = d.mu_sep,
            sigma_src = d.sigma_src,
            pretrain_epochs = d.pretrain_epochs,
            pretrain_lr = d.pretrain_lr,
            alpha = d.alpha,
            tau = d.tau,
            t_eig = d.t_eig,
            lambda_trg = d.lambda_trg,
            lambda_cont = d.lambda_cont,
            temperature = d.temperature,
            lr = d.lr,
            adam_beta1 = d.adam_beta1,
            adam_beta2 = d.adam_beta2,
            adam_eps = d.adam_eps,
            swf = d.sce_weight_forward,
            swr = d.sce_weight_reverse,
            conf_only = d.contrastive_confident_only,
            teacher_momentum = d.teacher_momentum,
            sigma_aug = d.sigma_aug,
            batch_size = d.batch_size,
            batches_per_domain = d.batches_per_domain,
            repeat = d.repeat,
            auto_domains = d.auto_domains,
        )
    }
}

/// Seeded severity ramp: alternating input compression/expansion, a growing
/// shift in a random direction, a slow rotation, and increasing noise.
/// Magnitudes are matched to the default source generator (`mu_sep = 3`,
/// `sigma_src = 1`), where the ramp degrades the frozen model to a mid
/// single-digit error rate by the last domains.
pub fn default_domains(n: usize, input_dim: usize, seed: u64) -> Vec<DomainSpec> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let severity = (i + 1) as f64 / n.max(1) as f64;
        let factor = if i % 2 == 0 { 1.0 - 0.4 * severity } else { 1.0 + 0.6 * severity };
        let mut dir: Vec<f64> = (0..input_dim)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                v
            })
            .collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for v in &mut dir {
            *v /= norm;
        }
        let shift_mag = 16.0 * severity;
        out.push(DomainSpec {
            id: i,
            rotation_angle: 0.4 * severity,
            scale: vec![factor; input_dim],
            shift: dir.into_iter().map(|v| v * shift_mag).collect(),
            noise_sigma: 2.0 * severity,
        });
    }
    out
}

/// SplitMix64 over `seed ^ tag`: cheap independent sub-seeds.
pub fn mix_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E3779B97F4A7C15);
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn parse_num<T: std::str::FromStr>(value: &str, key: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("key `{key}`: cannot parse `{value}`")))
}

fn parse_bool(value: &str, key: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::config(format!("key `{key}`: expected a boolean, got `{other}`"))),
    }
}

fn parse_domain_line(value: &str) -> Result<DomainLine> {
    let mut angle = 0.0;
    let mut scale = ScalarOrVec::Scalar(1.0);
    let mut shift = ScalarOrVec::Scalar(0.0);
    let mut noise = 0.0;
    for token in value.split_whitespace() {
        let Some(eq) = token.find('=') else {
            return Err(Error::config(format!("domain token `{token}` must be key=value")));
        };
        let (k, v) = (&token[..eq], &token[eq + 1..]);
        match k {
            "angle" => angle = parse_num(v, "domain.angle")?,
            "scale" => scale = parse_scalar_or_vec(v, "domain.scale")?,
            "shift" => shift = parse_scalar_or_vec(v, "domain.shift")?,
            "noise" => noise = parse_num(v, "domain.noise")?,
            other => return Err(Error::config(format!("unknown domain field `{other}`"))),
        }
    }
    Ok(DomainLine { angle, scale, shift, noise })
}

fn parse_scalar_or_vec(value: &str, key: &str) -> Result<ScalarOrVec> {
    if value.contains(',') {
        let mut out = Vec::new();
        for part in value.split(',') {
            out.push(parse_num(part.trim(), key)?);
        }
        Ok(ScalarOrVec::Vec(out))
    } else {
        Ok(ScalarOrVec::Scalar(parse_num(value, key)?))
    }
}
