//! Min-max training with per-component gradient routing.
//!
//! One forward pass records every loss term on a tape, the weighted objective
//! `L = L_cls + β·L_AE + γ·L_cont − λ·L_adv` is differentiated once, and each
//! network receives the gradient of its own routed objective:
//!
//! | networks                         | objective                   | direction |
//! |----------------------------------|-----------------------------|-----------|
//! | imputer, source/target encoders  | `L`                         | descend   |
//! | source/target decoders           | `β·L_AE`                    | descend   |
//! | shared extractor                 | `L_cls + γ·L_cont − λ·L_adv`| descend   |
//! | discriminator                    | `λ·L_adv`                   | descend   |
//! | classifier                       | `L_cls`                     | descend   |
//!
//! Every routed objective except the discriminator's has the same gradient as
//! `L` restricted to that network's parameters, and the discriminator's is
//! its negation. All gradients are taken before any parameter moves.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{GradientSet, Matrix, Tape, Var};
use crate::data::{compose_batches, Batch, DomainDataset};
use crate::error::{IdianError, Result};
use crate::losses::{self, LossReport, LossWeights, PairMode};
use crate::metrics::{evaluate, EvalReport};
use crate::model::IdianModel;
use crate::nn::{Direction, NetId};
use crate::rng::{derive_seed, NoiseSource};

/// How the discriminator moves on its adversarial objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiscriminatorDirection {
    /// Descend `λ·L_adv`: the discriminator gets better at telling domains apart.
    #[default]
    MinimizeAdversarial,
    /// Ascend `λ·L_adv`, the literal update sign of the training pseudocode.
    AscendAdversarial,
}

/// Which loss terms and inputs take part in training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Switches {
    pub imputation: bool,
    pub ae_loss: bool,
    pub contrastive_loss: bool,
    pub adversarial_loss: bool,
    /// Feed source rows through the model at all.
    pub use_source: bool,
}

impl Default for Switches {
    fn default() -> Self {
        Self {
            imputation: true,
            ae_loss: true,
            contrastive_loss: true,
            adversarial_loss: true,
            use_source: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
    /// Contrastive margin.
    pub rho: f64,
    /// Learning rate.
    pub eta: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub master_seed: u64,
    pub switches: Switches,
    pub pairs: PairMode,
    pub discriminator_direction: DiscriminatorDirection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 10.0,
            gamma: 10.0,
            lambda: 10.0,
            rho: 1.0,
            eta: 0.01,
            batch_size: 128,
            epochs: 20,
            master_seed: 0,
            switches: Switches::default(),
            pairs: PairMode::Union,
            discriminator_direction: DiscriminatorDirection::MinimizeAdversarial,
        }
    }
}

impl TrainConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            beta: self.beta,
            gamma: self.gamma,
            lambda: self.lambda,
        }
    }

    fn validate_step(&self) -> Result<()> {
        let trade_offs = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda", self.lambda),
        ];
        for (name, v) in trade_offs {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(IdianError::config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(IdianError::config(format!("eta must be >= 0, got {}", self.eta)));
        }
        if !(self.rho > 0.0) {
            return Err(IdianError::config(format!("rho must be > 0, got {}", self.rho)));
        }
        let s = self.switches;
        if !s.use_source && (s.adversarial_loss || s.contrastive_loss && self.pairs == PairMode::CrossOnly) {
            return Err(IdianError::config(
                "adversarial and cross-domain contrastive losses need source data",
            ));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_step()?;
        if !(self.eta > 0.0) {
            return Err(IdianError::config("eta must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(IdianError::config("batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// Baselines and ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    TargetOnly,
    Dann,
    NoImputation,
    NoAe,
    NoContrastive,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::TargetOnly,
        Variant::Dann,
        Variant::NoImputation,
        Variant::NoAe,
        Variant::NoContrastive,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::TargetOnly => "target_only",
            Variant::Dann => "dann",
            Variant::NoImputation => "no_imputation",
            Variant::NoAe => "no_ae",
            Variant::NoContrastive => "no_contrastive",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = IdianError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                IdianError::usage(format!(
                    "unknown variant `{s}` (expected one of: {})",
                    Variant::ALL.map(Variant::name).join(", ")
                ))
            })
    }
}

/// Derives the training configuration of a baseline or ablation.
pub fn build_variant(base: &TrainConfig, variant: Variant) -> TrainConfig {
    let mut cfg = base.clone();
    let s = &mut cfg.switches;
    match variant {
        Variant::Full => {}
        Variant::TargetOnly => {
            *s = Switches {
                imputation: false,
                ae_loss: false,
                contrastive_loss: false,
                adversarial_loss: false,
                use_source: false,
            };
            cfg.alpha = 0.0;
            cfg.beta = 0.0;
            cfg.gamma = 0.0;
            cfg.lambda = 0.0;
        }
        Variant::Dann => {
            s.imputation = false;
            s.ae_loss = false;
            s.contrastive_loss = false;
            cfg.beta = 0.0;
            cfg.gamma = 0.0;
        }
        Variant::NoImputation => s.imputation = false,
        Variant::NoAe => {
            s.ae_loss = false;
            cfg.beta = 0.0;
        }
        Variant::NoContrastive => {
            s.contrastive_loss = false;
            cfg.gamma = 0.0;
        }
    }
    cfg
}

/// Turns `∇L` into per-network routed gradients (all to be descended).
pub fn route_gradients(mut grads: GradientSet, cfg: &TrainConfig) -> GradientSet {
    if cfg.discriminator_direction == DiscriminatorDirection::MinimizeAdversarial {
        for (key, g) in grads.iter_mut() {
            if key.net == NetId::Discriminator {
                g.mapv_inplace(|v| -v);
            }
        }
    }
    grads
}

/// Applies routed gradients to every network.
pub fn apply_gradients(model: &mut IdianModel, grads: &GradientSet, eta: f64) -> Result<()> {
    apply_gradients_in_order(model, grads, eta, &NetId::ALL)
}

pub fn apply_gradients_in_order(
    model: &mut IdianModel,
    grads: &GradientSet,
    eta: f64,
    order: &[NetId],
) -> Result<()> {
    for id in order {
        model.net_mut(*id).sgd_step(*id, grads, eta, Direction::Descend)?;
    }
    Ok(())
}

fn block_noise(noise: &mut NoiseSource, x: &Matrix, on: bool) -> Option<Matrix> {
    on.then(|| noise.sample(x.nrows(), x.ncols(), 0))
}

/// Taped loss terms of one batch. Disabled terms are `None`.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_cls: Var,
    pub l_ae: Option<Var>,
    pub l_cont: Option<Var>,
    pub l_adv: Option<Var>,
    /// `L_cls + β·L_AE + γ·L_cont − λ·L_adv` over the enabled terms.
    pub total: Var,
}

impl LossVars {
    pub fn report(&self, tape: &Tape) -> LossReport {
        let v = |x: Option<Var>| x.map_or(0.0, |x| tape.scalar(x));
        LossReport {
            l_cls: tape.scalar(self.l_cls),
            l_ae: v(self.l_ae),
            l_cont: v(self.l_cont),
            l_adv: v(self.l_adv),
            l_total: tape.scalar(self.total),
        }
    }
}

/// Records the forward pass of every enabled loss term on `tape`.
pub fn forward_losses(
    tape: &mut Tape,
    model: &IdianModel,
    batch: &Batch,
    cfg: &TrainConfig,
    noise: &mut NoiseSource,
) -> Result<LossVars> {
    cfg.validate_step()?;
    let s = cfg.switches;
    let bound = model.bind(tape);

    let tl_block = &batch.target_labeled;
    let eps = block_noise(noise, &tl_block.features, s.imputation);
    let tl = bound.target_block(tape, &tl_block.features, &tl_block.masks, eps.as_ref())?;
    let tu = if s.ae_loss || s.adversarial_loss {
        let b = &batch.target_unlabeled;
        let eps = block_noise(noise, &b.features, s.imputation);
        Some(bound.target_block(tape, &b.features, &b.masks, eps.as_ref())?)
    } else {
        None
    };
    let src = if s.use_source {
        Some(bound.source_block(tape, &batch.source.features)?)
    } else {
        None
    };

    let p_tl = bound.classifier.forward(tape, tl.shared)?;
    let source_cls = match &src {
        Some(src) => Some(bound.classifier.forward(tape, src.shared)?),
        None => None,
    };
    let l_cls = losses::classification(
        tape,
        (p_tl, &tl_block.labels),
        source_cls.map(|p| (p, &batch.source.labels[..])),
        cfg.alpha,
    )?;
    let mut total = l_cls;

    let l_ae = if s.ae_loss {
        let tu = tu.expect("unlabeled block computed");
        let t_in = tape.concat_rows(&[tl.input, tu.input])?;
        let t_emb = tape.concat_rows(&[tl.embedding, tu.embedding])?;
        let t_rec = bound.target_decoder.forward(tape, t_emb)?;
        let mut l_ae = losses::reconstruction_error(tape, t_in, t_rec)?;
        if let Some(src) = &src {
            let s_rec = bound.source_decoder.forward(tape, src.embedding)?;
            let l_s = losses::reconstruction_error(tape, src.input, s_rec)?;
            l_ae = tape.add(l_s, l_ae)?;
        }
        let w = tape.scale(l_ae, cfg.beta);
        total = tape.add(total, w)?;
        Some(l_ae)
    } else {
        None
    };

    let l_cont = if s.contrastive_loss {
        let (f, labels, from_source) = match &src {
            Some(src) => {
                let f = tape.concat_rows(&[src.embedding, tl.embedding])?;
                let mut labels = batch.source.labels.clone();
                labels.extend_from_slice(&tl_block.labels);
                let mut tags = vec![true; batch.source.labels.len()];
                tags.extend(std::iter::repeat_n(false, tl_block.labels.len()));
                (f, labels, tags)
            }
            None => (tl.embedding, tl_block.labels.clone(), vec![false; tl_block.labels.len()]),
        };
        let c = losses::contrastive(tape, f, &labels, &from_source, cfg.rho, cfg.pairs)?;
        let w = tape.scale(c.loss, cfg.gamma);
        total = tape.add(total, w)?;
        Some(c.loss)
    } else {
        None
    };

    let l_adv = if s.adversarial_loss {
        let src = src.as_ref().expect("validated: adversarial needs source");
        let tu = tu.expect("unlabeled block computed");
        let d_s = bound.discriminator.forward(tape, src.shared)?;
        let h_t = tape.concat_rows(&[tl.shared, tu.shared])?;
        let d_t = bound.discriminator.forward(tape, h_t)?;
        let l_adv = losses::adversarial(tape, d_s, d_t);
        let w = tape.scale(l_adv, cfg.lambda);
        total = tape.sub(total, w)?;
        Some(l_adv)
    } else {
        None
    };

    Ok(LossVars {
        l_cls,
        l_ae,
        l_cont,
        l_adv,
        total,
    })
}

/// One forward/backward pass: the loss report and the routed gradients,
/// without touching the model.
pub fn compute_step(
    model: &IdianModel,
    batch: &Batch,
    cfg: &TrainConfig,
    noise: &mut NoiseSource,
) -> Result<(LossReport, GradientSet)> {
    let mut tape = Tape::new();
    let vars = forward_losses(&mut tape, model, batch, cfg, noise)?;
    let report = vars.report(&tape);
    if !report.is_finite() {
        return Err(IdianError::numeric(format!("non-finite loss: {report:?}")));
    }
    let grads = tape.backward(vars.total)?;
    if !grads.all_finite() {
        return Err(IdianError::numeric("non-finite gradient"));
    }
    Ok((report, route_gradients(grads, cfg)))
}

/// One simultaneous update of all networks. On a non-finite loss or gradient
/// the model is left untouched and a numeric error is returned.
pub fn update_step(
    model: &mut IdianModel,
    batch: &Batch,
    cfg: &TrainConfig,
    noise: &mut NoiseSource,
) -> Result<LossReport> {
    let (report, grads) = compute_step(model, batch, cfg, noise)?;
    apply_gradients(model, &grads, cfg.eta)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub report: LossReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Component-wise mean over the epoch's completed steps.
    pub mean: LossReport,
    pub eval: Option<EvalReport>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Steps aborted on non-finite values.
    pub skipped_steps: usize,
}

impl TrainHistory {
    pub fn last_report(&self) -> Option<LossReport> {
        self.steps.last().map(|s| s.report)
    }
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len().max(1) as f64;
    let mut m = LossReport::default();
    for r in reports {
        m.l_cls += r.l_cls / n;
        m.l_ae += r.l_ae / n;
        m.l_cont += r.l_cont / n;
        m.l_adv += r.l_adv / n;
        m.l_total += r.l_total / n;
    }
    m
}

/// Trains for `cfg.epochs` epochs. `target`'s labeled prefix is the labeled
/// target pool.
pub fn train(
    model: &mut IdianModel,
    source: &DomainDataset,
    target: &DomainDataset,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    train_with_eval(model, source, target, cfg, None)
}

/// Like [`train`], optionally evaluating on `eval = (test, eval_seed)` after
/// every epoch.
pub fn train_with_eval(
    model: &mut IdianModel,
    source: &DomainDataset,
    target: &DomainDataset,
    cfg: &TrainConfig,
    eval: Option<(&DomainDataset, u64)>,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if source.dim != model.source_dim || target.dim != model.target_dim {
        return Err(IdianError::config(format!(
            "data dims ({}, {}) do not match model dims ({}, {})",
            source.dim, target.dim, model.source_dim, model.target_dim
        )));
    }
    if target.n_classes != model.n_classes || source.n_classes != model.n_classes {
        return Err(IdianError::config("class counts of data and model differ"));
    }
    if target.labeled_count == 0 {
        return Err(IdianError::config("at least one labeled target instance is required"));
    }
    let mut history = TrainHistory::default();
    if cfg.epochs == 0 {
        return Ok(history);
    }
    model.uses_imputation = cfg.switches.imputation;
    let mut noise = NoiseSource::streaming(derive_seed(cfg.master_seed, "train-noise", 0));
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let batches = compose_batches(
            source,
            target,
            cfg.batch_size,
            derive_seed(cfg.master_seed, "epoch", epoch as u64),
        )?;
        let mut reports = Vec::with_capacity(batches.len());
        for batch in &batches {
            match update_step(model, batch, cfg, &mut noise) {
                Ok(report) => {
                    history.steps.push(StepRecord {
                        step,
                        epoch,
                        report,
                    });
                    reports.push(report);
                }
                Err(IdianError::Numeric(_)) => history.skipped_steps += 1,
                Err(e) => return Err(e),
            }
            step += 1;
        }
        let eval = match eval {
            Some((test, seed)) => Some(evaluate(model, test, seed)?),
            None => None,
        };
        history.epochs.push(EpochRecord {
            epoch,
            mean: mean_report(&reports),
            eval,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(history)
}
