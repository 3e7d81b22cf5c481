//! Training regimes for the multi-exit encoder.
//!
//! * `deebert`: stage 1 trains backbone + final classifier on `L_final`;
//!   stage 2 freezes them and trains the off-ramps on `Σ CE(y, f_i)`.
//! * `deebert_sd`: as above, with `L_sd` in stage 2.
//! * `sd_only`: one stage, everything trainable, update with `g_f + g_s`.
//! * `romebert`: one stage, update with the regularized `g*`.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::Dataset;
use crate::error::{bail, Result};
use crate::gradreg::{flatten_tape, regularize, ConflictRecord, GradVector, Layout};
use crate::inference::ExitProfile;
use crate::losses::{multi_exit_ce, sd_loss, LossBreakdown, SdConfig};
use crate::model::{forward_all_exits, ModelConfig, OwnerClass, Ownership, ParamStore, TokenBatch};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Deebert,
    DeebertSd,
    SdOnly,
    Romebert,
}

impl Regime {
    pub const ALL: [Regime; 4] = [Regime::Deebert, Regime::DeebertSd, Regime::SdOnly, Regime::Romebert];

    pub fn is_two_stage(self) -> bool {
        matches!(self, Regime::Deebert | Regime::DeebertSd)
    }

    pub fn name(self) -> &'static str {
        match self {
            Regime::Deebert => "deebert",
            Regime::DeebertSd => "deebert_sd",
            Regime::SdOnly => "sd_only",
            Regime::Romebert => "romebert",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegimeConfig {
    pub regime: Regime,
    /// One entry per stage: two for the two-stage regimes, one otherwise.
    pub epochs: Vec<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub clip_norm: f64,
    pub adam: AdamConfig,
    pub sd: SdConfig,
    pub seed: u64,
    /// Evaluate per-layer dev accuracy after every epoch.
    pub eval_each_epoch: bool,
}

impl Default for RegimeConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Romebert,
            epochs: vec![3],
            batch_size: 32,
            lr: 5e-4,
            warmup_frac: 0.1,
            clip_norm: 1.0,
            adam: AdamConfig::default(),
            sd: SdConfig::default(),
            seed: 0,
            eval_each_epoch: true,
        }
    }
}

impl RegimeConfig {
    /// Default config for `regime` with `epochs` per stage.
    pub fn for_regime(regime: Regime, epochs: usize) -> Self {
        let stages = if regime.is_two_stage() { 2 } else { 1 };
        Self {
            regime,
            epochs: vec![epochs; stages],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let want = if self.regime.is_two_stage() { 2 } else { 1 };
        if self.epochs.len() != want {
            bail!(
                Config,
                "regime {} needs {} stage epoch count(s), got {:?}",
                self.regime.name(),
                want,
                self.epochs
            );
        }
        if self.epochs.contains(&0) {
            bail!(Config, "every stage needs at least one epoch");
        }
        if self.batch_size == 0 {
            bail!(Config, "batch_size must be positive");
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.warmup_frac) || !(self.clip_norm > 0.0) {
            bail!(Config, "lr and clip_norm must be positive, warmup_frac in [0, 1)");
        }
        self.sd.validate()
    }
}

/// Ownership classes whose parameters receive no updates.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FreezeMask {
    pub frozen: BTreeSet<OwnerClass>,
}

impl FreezeMask {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn of(classes: &[OwnerClass]) -> Self {
        Self {
            frozen: classes.iter().copied().collect(),
        }
    }

    pub fn is_frozen(&self, owner: Ownership) -> bool {
        self.frozen.contains(&owner.class())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Backbone and final classifier on `L_final`.
    DeebertStage1,
    /// Off-ramps only, backbone and final classifier frozen.
    DeebertStage2,
    /// Everything trainable.
    Joint,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::DeebertStage1 => "deebert_stage1",
            Stage::DeebertStage2 => "deebert_stage2",
            Stage::Joint => "joint",
        }
    }

    pub fn mask(self) -> FreezeMask {
        match self {
            Stage::DeebertStage1 => FreezeMask::of(&[OwnerClass::OffRamp]),
            Stage::DeebertStage2 => FreezeMask::of(&[OwnerClass::Backbone, OwnerClass::FinalClassifier]),
            Stage::Joint => FreezeMask::none(),
        }
    }
}

/// Linear warmup to `base` over the first `warmup` steps, then linear decay
/// to zero at `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSchedule {
    pub base: f64,
    pub warmup: u64,
    pub total: u64,
}

impl LinearSchedule {
    pub fn new(base: f64, warmup_frac: f64, total: u64) -> Self {
        let warmup = ((total as f64) * warmup_frac).round() as u64;
        Self { base, warmup, total }
    }

    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup {
            self.base * (step + 1) as f64 / self.warmup as f64
        } else if self.total > self.warmup {
            let left = self.total.saturating_sub(step) as f64;
            self.base * left / (self.total - self.warmup) as f64
        } else {
            self.base
        }
    }
}

/// Adam with per-parameter moment buffers.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    cfg: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new<S: Scalar>(cfg: AdamConfig, store: &ParamStore<S>) -> Self {
        let zeros = || store.params().iter().map(|p| vec![T::zero(); p.value.len()]).collect();
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// One update with gradient `g` laid out like `store`; parameters that
    /// `skip` returns true for are left untouched, moments included.
    pub fn step(&mut self, store: &mut ParamStore<T>, g: &GradVector<T>, lr: f64, skip: impl Fn(Ownership) -> bool) {
        self.t += 1;
        let b1 = T::from_f64_lossy(self.cfg.beta1);
        let b2 = T::from_f64_lossy(self.cfg.beta2);
        let one = T::one();
        let c1 = one - T::from_f64_lossy(self.cfg.beta1.powi(self.t as i32));
        let c2 = one - T::from_f64_lossy(self.cfg.beta2.powi(self.t as i32));
        let eps = T::from_f64_lossy(self.cfg.eps);
        let lr = T::from_f64_lossy(lr);
        let segments = g.layout().segments();
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            if skip(p.owner) {
                continue;
            }
            let seg = &segments[i];
            let grad = &g.values()[seg.offset..seg.offset + seg.len];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let gj = grad[j];
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Gradient statistics of one joint step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub dot: f64,
    pub norm_f: f64,
    pub norm_s: f64,
    /// `g_f · g_s < 0` (whether or not the projection was applied).
    pub conflicted: bool,
}

/// Holds the parameters and optimizer state of one training stage.
pub struct Trainer<T: Scalar> {
    store: ParamStore<T>,
    cfg: RegimeConfig,
    layout: std::sync::Arc<Layout>,
    stage: Stage,
    adam: Adam<T>,
    schedule: LinearSchedule,
    step: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(store: ParamStore<T>, cfg: RegimeConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::of_store(&store);
        let adam = Adam::new(cfg.adam, &store);
        let schedule = LinearSchedule::new(cfg.lr, cfg.warmup_frac, 1);
        let stage = if cfg.regime.is_two_stage() {
            Stage::DeebertStage1
        } else {
            Stage::Joint
        };
        Ok(Self {
            store,
            cfg,
            layout,
            stage,
            adam,
            schedule,
            step: 0,
        })
    }

    /// Starts a stage: fresh Adam moments and a fresh schedule over
    /// `total_steps`.
    pub fn begin_stage(&mut self, stage: Stage, total_steps: u64) {
        self.stage = stage;
        self.adam = Adam::new(self.cfg.adam, &self.store);
        self.schedule = LinearSchedule::new(self.cfg.lr, self.cfg.warmup_frac, total_steps.max(1));
        self.step = 0;
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn into_store(self) -> ParamStore<T> {
        self.store
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn config(&self) -> &RegimeConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &std::sync::Arc<Layout> {
        &self.layout
    }

    fn expect_stage(&self, stage: Stage) -> Result<()> {
        if self.stage != stage {
            bail!(Contract, "step for {:?} called during {:?}", stage, self.stage);
        }
        Ok(())
    }

    /// Clips `g` to the configured global norm and applies one Adam step to
    /// every parameter the current stage does not freeze.
    pub fn apply(&mut self, mut g: GradVector<T>) {
        let norm = g.norm();
        if norm > self.cfg.clip_norm {
            g.scale_in_place(T::from_f64_lossy(self.cfg.clip_norm / norm));
        }
        let lr = self.schedule.lr(self.step);
        let mask = self.stage.mask();
        self.adam.step(&mut self.store, &g, lr, |o| mask.is_frozen(o));
        self.step += 1;
    }

    pub fn step_deebert_stage1(&mut self, tokens: &TokenBatch, labels: &[usize]) -> Result<LossBreakdown> {
        self.expect_stage(Stage::DeebertStage1)?;
        let mask = self.stage.mask();
        let tape = Tape::new();
        let bound = self.store.bind(&tape, |o| !mask.is_frozen(o));
        let out = forward_all_exits(&self.store, &tape, &bound, tokens)?;
        let losses = sd_loss(&tape, &out, labels, &self.cfg.sd)?;
        let g = flatten_tape(&tape.backward(losses.final_loss)?, &self.layout)?;
        let breakdown = losses.breakdown(&tape);
        drop(tape);
        self.apply(g);
        Ok(breakdown)
    }

    pub fn step_deebert_stage2(&mut self, tokens: &TokenBatch, labels: &[usize], with_sd: bool) -> Result<LossBreakdown> {
        self.expect_stage(Stage::DeebertStage2)?;
        let mask = self.stage.mask();
        let tape = Tape::new();
        let bound = self.store.bind(&tape, |o| !mask.is_frozen(o));
        let out = forward_all_exits(&self.store, &tape, &bound, tokens)?;
        let (objective, breakdown) = if with_sd {
            let losses = sd_loss(&tape, &out, labels, &self.cfg.sd)?;
            (losses.sd, losses.breakdown(&tape))
        } else {
            // Plain CE on every off-ramp: the breakdown is the γ = 0 case.
            let plain = SdConfig {
                gamma: 0.0,
                ..self.cfg.sd
            };
            let losses = sd_loss(&tape, &out, labels, &plain)?;
            (multi_exit_ce(&tape, &out, labels)?, losses.breakdown(&tape))
        };
        let g = flatten_tape(&tape.backward(objective)?, &self.layout)?;
        drop(tape);
        self.apply(g);
        Ok(breakdown)
    }

    /// `g_f` and `g_s` from one forward pass on the same batch.
    pub fn joint_gradients(
        &self,
        tokens: &TokenBatch,
        labels: &[usize],
    ) -> Result<(GradVector<T>, GradVector<T>, LossBreakdown)> {
        let tape = Tape::new();
        let bound = self.store.bind(&tape, |_| true);
        let out = forward_all_exits(&self.store, &tape, &bound, tokens)?;
        let losses = sd_loss(&tape, &out, labels, &self.cfg.sd)?;
        let g_f = flatten_tape(&tape.backward(losses.final_loss)?, &self.layout)?;
        let g_s = flatten_tape(&tape.backward(losses.sd)?, &self.layout)?;
        Ok((g_f, g_s, losses.breakdown(&tape)))
    }

    pub fn step_romebert(
        &mut self,
        tokens: &TokenBatch,
        labels: &[usize],
        use_gr: bool,
    ) -> Result<(LossBreakdown, StepDiagnostics)> {
        self.expect_stage(Stage::Joint)?;
        let (g_f, g_s, breakdown) = self.joint_gradients(tokens, labels)?;
        let (g, diag) = combine(&g_f, &g_s, use_gr)?;
        self.apply(g);
        Ok((breakdown, diag))
    }
}

/// `g*` when `use_gr`, plain `g_f + g_s` otherwise.
pub fn combine<T: Scalar>(
    g_f: &GradVector<T>,
    g_s: &GradVector<T>,
    use_gr: bool,
) -> Result<(GradVector<T>, StepDiagnostics)> {
    if use_gr {
        let r = regularize(g_f, g_s)?;
        let diag = StepDiagnostics {
            dot: r.dot,
            norm_f: r.norm_f,
            norm_s: r.norm_s,
            conflicted: r.conflicted,
        };
        Ok((r.g_star, diag))
    } else {
        let dot = g_f.dot(g_s);
        let diag = StepDiagnostics {
            dot,
            norm_f: g_f.norm(),
            norm_s: g_s.norm(),
            conflicted: dot < 0.0,
        };
        Ok((g_f.add(g_s)?, diag))
    }
}

/// One line of the per-epoch metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    pub regime: Regime,
    #[serde(rename = "L_final")]
    pub l_final: f64,
    #[serde(rename = "L_multi")]
    pub l_multi: f64,
    #[serde(rename = "L_kld")]
    pub l_kld: f64,
    pub conflict_rate: f64,
    pub per_layer_dev_acc: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub store: ParamStore<T>,
    pub log: Vec<EpochRecord>,
    pub conflicts: Vec<ConflictRecord>,
}

impl<T> TrainOutcome<T> {
    /// Fraction of joint steps on which `g_f · g_s < 0`.
    pub fn conflict_rate(&self) -> f64 {
        if self.conflicts.is_empty() {
            return 0.0;
        }
        self.conflicts.iter().filter(|c| c.conflicted).count() as f64 / self.conflicts.len() as f64
    }
}

fn stages(regime: Regime) -> Vec<Stage> {
    if regime.is_two_stage() {
        vec![Stage::DeebertStage1, Stage::DeebertStage2]
    } else {
        vec![Stage::Joint]
    }
}

/// Runs every stage of the regime from a fresh initialization of `model`.
pub fn train<T: Scalar>(
    model: &ModelConfig,
    cfg: &RegimeConfig,
    train_set: &Dataset,
    dev_set: &Dataset,
) -> Result<TrainOutcome<T>> {
    if train_set.is_empty() || dev_set.is_empty() {
        bail!(Data, "training and dev sets must be non-empty");
    }
    let store = ParamStore::<T>::init(model)?;
    train_from(store, cfg, train_set, dev_set, |_| {})
}

/// Like [`train`], starting from existing parameters; `on_epoch` sees each
/// log record as soon as its epoch finishes.
pub fn train_from<T: Scalar>(
    store: ParamStore<T>,
    cfg: &RegimeConfig,
    train_set: &Dataset,
    dev_set: &Dataset,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    if train_set.is_empty() || dev_set.is_empty() {
        bail!(Data, "training and dev sets must be non-empty");
    }
    let mut trainer = Trainer::new(store, cfg.clone())?;
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let mut log = Vec::new();
    let mut conflicts = Vec::new();
    let mut epoch = 0;
    let mut global_step = 0u64;
    for (stage, &n_epochs) in stages(cfg.regime).into_iter().zip(&cfg.epochs) {
        trainer.begin_stage(stage, (steps_per_epoch * n_epochs) as u64);
        for _ in 0..n_epochs {
            epoch += 1;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut order: Vec<usize> = (0..train_set.len()).collect();
            order.shuffle(&mut rng);
            let (mut sum_final, mut sum_multi, mut sum_kld) = (0.0, 0.0, 0.0);
            let (mut joint_steps, mut conflicted) = (0usize, 0usize);
            for chunk in order.chunks(cfg.batch_size) {
                let (tokens, labels) = train_set.batch(chunk)?;
                let b = match (cfg.regime, stage) {
                    (_, Stage::DeebertStage1) => trainer.step_deebert_stage1(&tokens, &labels)?,
                    (Regime::DeebertSd, Stage::DeebertStage2) => trainer.step_deebert_stage2(&tokens, &labels, true)?,
                    (_, Stage::DeebertStage2) => trainer.step_deebert_stage2(&tokens, &labels, false)?,
                    (regime, Stage::Joint) => {
                        let (b, d) = trainer.step_romebert(&tokens, &labels, regime == Regime::Romebert)?;
                        joint_steps += 1;
                        conflicted += d.conflicted as usize;
                        conflicts.push(ConflictRecord {
                            step: global_step,
                            dot: d.dot,
                            norm_f: d.norm_f,
                            norm_s: d.norm_s,
                            conflicted: d.conflicted,
                        });
                        b
                    }
                };
                global_step += 1;
                sum_final += b.final_loss;
                sum_multi += b.multi;
                sum_kld += b.kld;
            }
            let per_layer_dev_acc = if cfg.eval_each_epoch || epoch == cfg.epochs.iter().sum::<usize>() {
                ExitProfile::compute(trainer.store(), dev_set)?.fixed_layers()
            } else {
                Vec::new()
            };
            let n = steps_per_epoch as f64;
            log.push(EpochRecord {
                epoch,
                stage,
                regime: cfg.regime,
                l_final: sum_final / n,
                l_multi: sum_multi / n,
                l_kld: sum_kld / n,
                conflict_rate: if joint_steps == 0 {
                    0.0
                } else {
                    conflicted as f64 / joint_steps as f64
                },
                per_layer_dev_acc,
            });
            on_epoch(log.last().expect("just pushed"));
        }
    }
    Ok(TrainOutcome {
        store: trainer.into_store(),
        log,
        conflicts,
    })
}
