//! Adam optimizer, minibatch loops and stage orchestration.
//!
//! Stages map onto the experimental protocol: `Pretrain` fits a fresh bank
//! on source (or source+target) data, `FineTune` continues training every
//! parameter of a checkpoint on target data, `TargetOnly` trains from
//! scratch on target data, and `AutoFT` (plus its ablations) freezes the
//! checkpoint as the source bank and trains the target bank and the
//! enabled policy networks with straight-through gradients.
//!
//! Determinism: parameter init, shuffling and route sampling all derive
//! from the run seed through tagged SplitMix64 substreams, gradient
//! reduction is sequential in instance order, and evaluation is
//! noise-free, so (seed, config, data) fixes every output bit.

use serde::{Deserialize, Serialize};

use crate::dcn::{self, ArchConfig, Backbone, DcnParams};
use crate::error::{Error, Result};
use crate::features::DomainDataset;
use crate::metrics;
use crate::numerics::{DenseMatrix, SeededRng};
use crate::policy::{
    autoft_forward, straight_through_backward, AutoftGradients, AutoftModel, PolicyComponents,
    RouteBits, RouteMode,
};

// substream tags for seed derivation
const TAG_INIT: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_ROUTE: u64 = 3;

/// Training stage; decides which parameter groups are trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Pretrain,
    FineTune,
    AutoFT,
    TargetOnly,
    AblationEmbedding,
    AblationCross,
    AblationDeep,
    AblationCrossDeep,
}

impl Stage {
    /// Which policy networks an AutoFT-family stage keeps. Disabled
    /// components always route to the fine-tuned bank.
    pub fn policy_components(self) -> Option<PolicyComponents> {
        match self {
            Stage::AutoFT => Some(PolicyComponents::all()),
            Stage::AblationEmbedding => Some(PolicyComponents {
                embed: true,
                cross: false,
                deep: false,
            }),
            Stage::AblationCross => Some(PolicyComponents {
                embed: false,
                cross: true,
                deep: false,
            }),
            Stage::AblationDeep => Some(PolicyComponents {
                embed: false,
                cross: false,
                deep: true,
            }),
            Stage::AblationCrossDeep => Some(PolicyComponents {
                embed: false,
                cross: true,
                deep: true,
            }),
            _ => None,
        }
    }

    pub fn method_name(self) -> &'static str {
        match self {
            Stage::Pretrain => "Pretrain",
            Stage::FineTune => "Fine-Tune",
            Stage::AutoFT => "AutoFT",
            Stage::TargetOnly => "Target-only",
            Stage::AblationEmbedding => "AutoFT-Embedding",
            Stage::AblationCross => "AutoFT-Cross",
            Stage::AblationDeep => "AutoFT-Deep",
            Stage::AblationCrossDeep => "AutoFT-CrossDeep",
        }
    }
}

fn default_lr() -> f64 {
    1e-3
}
fn default_batch() -> usize {
    256
}
fn default_epochs() -> usize {
    30
}
fn default_lambda() -> f64 {
    1e-6
}
fn default_tau_start() -> f64 {
    5.0
}
fn default_tau_end() -> f64 {
    0.5
}
fn default_patience() -> usize {
    3
}
fn default_policy_hidden() -> usize {
    64
}
fn default_arch() -> ArchConfig {
    ArchConfig {
        embed_dim: 16,
        cross_layers: 3,
        deep_layers: vec![64, 32],
        backbone: Backbone::Dcn,
    }
}

/// Hyperparameters of one training run. Defaults are desk scale; the
/// paper-scale values (batch 8000, k = 80, deep 1024-512-256-128) are
/// reachable through the same fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub stage: Stage,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// L2 coefficient in the loss.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_tau_start")]
    pub tau_start: f64,
    #[serde(default = "default_tau_end")]
    pub tau_end: f64,
    #[serde(default)]
    pub seed: u64,
    /// Early-stopping patience in epochs.
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_arch")]
    pub arch: ArchConfig,
    #[serde(default = "default_policy_hidden")]
    pub policy_hidden: usize,
    #[serde(default)]
    pub l2_include_embeddings: bool,
    #[serde(default)]
    pub l2_include_policies: bool,
}

impl RunConfig {
    pub fn new(stage: Stage) -> Self {
        Self {
            stage,
            learning_rate: default_lr(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            lambda: default_lambda(),
            tau_start: default_tau_start(),
            tau_end: default_tau_end(),
            seed: 0,
            patience: default_patience(),
            arch: default_arch(),
            policy_hidden: default_policy_hidden(),
            l2_include_embeddings: false,
            l2_include_policies: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.tau_start <= 0.0 || self.tau_end <= 0.0 {
            return Err(Error::Config("temperatures must be > 0".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        Ok(())
    }

    /// Exponential temperature schedule from `tau_start` to `tau_end`
    /// (1-based epoch; a single-epoch run stays at `tau_start`).
    pub fn tau_at_epoch(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.tau_start;
        }
        let t = (epoch - 1) as f64 / (self.epochs - 1) as f64;
        self.tau_start * (self.tau_end / self.tau_start).powf(t)
    }
}

/// Adam with bias correction. Buffers exist only for the trainable set
/// handed in at construction; frozen parameters never get moments.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn for_shapes(trainable: &[&DenseMatrix]) -> Self {
        Self {
            m: trainable.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: trainable.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn num_buffers(&self) -> usize {
        self.m.len()
    }

    /// One bias-corrected update applied in place.
    pub fn step(
        &mut self,
        params: Vec<&mut DenseMatrix>,
        grads: &[&DenseMatrix],
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Internal(format!(
                "adam buffers for {} matrices, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(&mut self.v))
        {
            if p.len() != g.len() {
                return Err(Error::Internal("adam shape mismatch".into()));
            }
            for ((pi, &gi), (mi, vi)) in p
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Early stopping on validation AUC: stop once the best value has not
/// improved by more than 1e-4 for `patience` consecutive epochs.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    min_delta: f64,
    best_auc: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            min_delta: 1e-4,
            best_auc: f64::NEG_INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records one epoch's validation AUC; returns true when training
    /// should stop (after this epoch). Also reports whether this epoch is
    /// a new best via [`EarlyStopper::best_epoch`].
    pub fn observe(&mut self, epoch: usize, auc: f64) -> bool {
        if auc > self.best_auc + self.min_delta {
            self.best_auc = auc;
            self.best_epoch = epoch;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale >= self.patience
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_auc(&self) -> f64 {
        self.best_auc
    }

    pub fn improved_at(&self, epoch: usize) -> bool {
        self.best_epoch == epoch
    }
}

/// One line of the per-epoch metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub auc: f64,
    pub logloss: f64,
    pub tau: Option<f64>,
}

/// Outcome of a DCN-bank training run.
#[derive(Debug, Clone)]
pub struct TrainedDcn {
    pub params: DcnParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Outcome of an AutoFT training run.
#[derive(Debug, Clone)]
pub struct TrainedAutoft {
    pub model: AutoftModel,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

fn check_datasets(train: &DomainDataset, val: &DomainDataset) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Config("validation dataset is empty".into()));
    }
    Ok(())
}

fn shuffled_indices(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = SeededRng::derive(seed, &[TAG_SHUFFLE, epoch as u64]);
    rng.shuffle(&mut order);
    order
}

fn finite_or_err(loss: f64, context: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{context} produced loss {loss}")))
    }
}

/// Scores every instance with a plain bank (no routing).
pub fn score_dcn(params: &DcnParams, data: &DomainDataset) -> Result<(Vec<u8>, Vec<f64>)> {
    let mut labels = Vec::with_capacity(data.len());
    let mut scores = Vec::with_capacity(data.len());
    for inst in &data.instances {
        let (yhat, _) = dcn::forward(inst, params)?;
        labels.push(inst.label);
        scores.push(yhat);
    }
    Ok((labels, scores))
}

/// AUC/LogLoss of a plain bank on a dataset.
pub fn evaluate_dcn(params: &DcnParams, data: &DomainDataset) -> Result<(f64, f64)> {
    let (labels, scores) = score_dcn(params, data)?;
    Ok((metrics::auc(&labels, &scores)?, metrics::logloss(&labels, &scores)?))
}

/// Scores every instance with the composite model in deterministic
/// inference mode (argmax routes, no noise).
pub fn score_autoft(model: &AutoftModel, data: &DomainDataset) -> Result<(Vec<u8>, Vec<f64>, Vec<RouteBits>)> {
    let mut labels = Vec::with_capacity(data.len());
    let mut scores = Vec::with_capacity(data.len());
    let mut routes = Vec::with_capacity(data.len());
    for inst in &data.instances {
        let (yhat, tape) = autoft_forward(inst, model, RouteMode::Infer)?;
        labels.push(inst.label);
        scores.push(yhat);
        routes.push(tape.route.bits());
    }
    Ok((labels, scores, routes))
}

pub fn evaluate_autoft(model: &AutoftModel, data: &DomainDataset) -> Result<(f64, f64)> {
    let (labels, scores, _) = score_autoft(model, data)?;
    Ok((metrics::auc(&labels, &scores)?, metrics::logloss(&labels, &scores)?))
}

/// Shared minibatch loop for a fully-trainable bank.
fn train_dcn_loop(
    mut params: DcnParams,
    train: &DomainDataset,
    val: &DomainDataset,
    cfg: &RunConfig,
) -> Result<TrainedDcn> {
    check_datasets(train, val)?;
    let mut adam = AdamState::for_shapes(&params.matrices());
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut history = Vec::new();
    let mut best = params.clone();
    let mut best_epoch = 0usize;

    for epoch in 1..=cfg.epochs {
        let order = shuffled_indices(train.len(), cfg.seed, epoch);
        let mut train_labels = Vec::with_capacity(train.len());
        let mut train_scores = Vec::with_capacity(train.len());
        for batch in order.chunks(cfg.batch_size) {
            let mut grad_sum = params.zeros_like();
            let mut ce_sum = 0.0;
            for &idx in batch {
                let inst = &train.instances[idx];
                let (yhat, tape) = dcn::forward(inst, &params)?;
                // regularizer gradients are added once per batch below
                let g = dcn::backward(inst, &params, &tape, inst.label, 0.0, false);
                grad_sum.accumulate(&g, 1.0);
                ce_sum += dcn::cross_entropy(inst.label, yhat);
                train_labels.push(inst.label);
                train_scores.push(yhat);
            }
            let scale = 1.0 / batch.len() as f64;
            for m in grad_sum.matrices_mut() {
                m.scale(scale);
            }
            params.add_l2_gradient(&mut grad_sum, cfg.lambda, cfg.l2_include_embeddings);
            let batch_loss =
                ce_sum * scale + cfg.lambda * params.l2_norm_sq(cfg.l2_include_embeddings);
            finite_or_err(batch_loss, "dcn training step")?;
            adam.step(params.matrices_mut(), &grad_sum.matrices(), cfg.learning_rate)?;
        }

        let train_auc = metrics::auc(&train_labels, &train_scores)?;
        let train_ll = metrics::logloss(&train_labels, &train_scores)?;
        history.push(EpochRecord {
            epoch,
            split: "train".into(),
            auc: train_auc,
            logloss: train_ll,
            tau: None,
        });
        let (val_auc, val_ll) = evaluate_dcn(&params, val)?;
        history.push(EpochRecord {
            epoch,
            split: "validation".into(),
            auc: val_auc,
            logloss: val_ll,
            tau: None,
        });
        let stop = stopper.observe(epoch, val_auc);
        if stopper.improved_at(epoch) {
            best = params.clone();
            best_epoch = epoch;
        }
        if stop {
            break;
        }
    }
    if best_epoch == 0 {
        // zero epochs (or no improvement recorded): keep the initial bank
        best = params;
    }
    Ok(TrainedDcn {
        params: best,
        history,
        best_epoch,
    })
}

/// Trains a fresh bank (the `Pretrain` and `TargetOnly` stages). The
/// caller chooses what `train` holds: source rows, source+target rows, or
/// target rows only.
pub fn run_pretrain(
    train: &DomainDataset,
    val: &DomainDataset,
    vocab_sizes: &[usize],
    cfg: &RunConfig,
) -> Result<TrainedDcn> {
    cfg.validate()?;
    let mut init_rng = SeededRng::derive(cfg.seed, &[TAG_INIT]);
    let params = DcnParams::init(&cfg.arch, vocab_sizes, &mut init_rng)?;
    train_dcn_loop(params, train, val, cfg)
}

/// Continues training every parameter of a checkpoint on target data.
pub fn run_finetune(
    pretrained: DcnParams,
    train: &DomainDataset,
    val: &DomainDataset,
    cfg: &RunConfig,
) -> Result<TrainedDcn> {
    cfg.validate()?;
    if cfg.epochs == 0 {
        // no-op fine-tune returns the checkpoint unchanged
        return Ok(TrainedDcn {
            params: pretrained,
            history: Vec::new(),
            best_epoch: 0,
        });
    }
    train_dcn_loop(pretrained, train, val, cfg)
}

/// AutoFT training: the checkpoint becomes the frozen source bank, the
/// target bank (initialized from it) and the stage's enabled policy
/// networks train with straight-through gradients under the temperature
/// schedule. Ablation stages force disabled components to the fine-tuned
/// bank.
pub fn run_autoft(
    pretrained: DcnParams,
    train: &DomainDataset,
    val: &DomainDataset,
    cfg: &RunConfig,
) -> Result<TrainedAutoft> {
    cfg.validate()?;
    check_datasets(train, val)?;
    let components = cfg.stage.policy_components().ok_or_else(|| {
        Error::Config(format!("stage {:?} is not an AutoFT stage", cfg.stage))
    })?;
    let mut init_rng = SeededRng::derive(cfg.seed, &[TAG_INIT]);
    let mut model =
        AutoftModel::from_pretrained(pretrained, cfg.policy_hidden, components, &mut init_rng)?;
    let source_hash = model.source.byte_hash();

    let mut adam = {
        let mut trainable: Vec<&DenseMatrix> = model.target.matrices();
        trainable.extend(model.policies.matrices());
        AdamState::for_shapes(&trainable)
    };
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut history = Vec::new();
    let mut best = model.clone();
    let mut best_epoch = 0usize;

    for epoch in 1..=cfg.epochs {
        let tau = cfg.tau_at_epoch(epoch);
        let order = shuffled_indices(train.len(), cfg.seed, epoch);
        let mut train_labels = Vec::with_capacity(train.len());
        let mut train_scores = Vec::with_capacity(train.len());
        for batch in order.chunks(cfg.batch_size) {
            let mut grad_sum = AutoftGradients::zeros_like(&model);
            let mut ce_sum = 0.0;
            for &idx in batch {
                let inst = &train.instances[idx];
                // per-instance route substream: parallel reduction order
                // can never change the sampled routes
                let mut route_rng =
                    SeededRng::derive(cfg.seed, &[TAG_ROUTE, epoch as u64, idx as u64]);
                let (yhat, tape) = autoft_forward(
                    inst,
                    &model,
                    RouteMode::SampleHard {
                        tau,
                        rng: &mut route_rng,
                    },
                )?;
                let g = straight_through_backward(inst, &model, &tape, inst.label, 0.0, false, false)?;
                grad_sum.accumulate(&g, 1.0);
                ce_sum += dcn::cross_entropy(inst.label, yhat);
                train_labels.push(inst.label);
                train_scores.push(yhat);
            }
            let scale = 1.0 / batch.len() as f64;
            for m in grad_sum.target.matrices_mut() {
                m.scale(scale);
            }
            for m in grad_sum.policies.matrices_mut() {
                m.scale(scale);
            }
            model
                .target
                .add_l2_gradient(&mut grad_sum.target, cfg.lambda, cfg.l2_include_embeddings);
            if cfg.l2_include_policies {
                model.policies.add_l2_gradient(&mut grad_sum.policies, cfg.lambda);
            }
            let mut reg_term = model.target.l2_norm_sq(cfg.l2_include_embeddings);
            if cfg.l2_include_policies {
                reg_term += model.policies.l2_norm_sq();
            }
            finite_or_err(ce_sum * scale + cfg.lambda * reg_term, "autoft training step")?;

            let mut params: Vec<&mut DenseMatrix> = model.target.matrices_mut();
            params.extend(model.policies.matrices_mut());
            let mut grads: Vec<&DenseMatrix> = grad_sum.target.matrices();
            grads.extend(grad_sum.policies.matrices());
            adam.step(params, &grads, cfg.learning_rate)?;
        }

        let train_auc = metrics::auc(&train_labels, &train_scores)?;
        let train_ll = metrics::logloss(&train_labels, &train_scores)?;
        history.push(EpochRecord {
            epoch,
            split: "train".into(),
            auc: train_auc,
            logloss: train_ll,
            tau: Some(tau),
        });
        let (val_auc, val_ll) = evaluate_autoft(&model, val)?;
        history.push(EpochRecord {
            epoch,
            split: "validation".into(),
            auc: val_auc,
            logloss: val_ll,
            tau: Some(tau),
        });
        let stop = stopper.observe(epoch, val_auc);
        if stopper.improved_at(epoch) {
            best = model.clone();
            best_epoch = epoch;
        }
        if stop {
            break;
        }
    }
    if best_epoch == 0 {
        best = model;
    }
    debug_assert_eq!(best.source.byte_hash(), source_hash);
    Ok(TrainedAutoft {
        model: best,
        history,
        best_epoch,
    })
}
