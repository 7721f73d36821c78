//! Mini-batch training with linear warm-up, cosine annealing, Adam, and
//! step-exact resumption.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::random_augment;
use crate::autograd::{Tape, Var};
use crate::dataset::{DatasetSplit, Domain, Token, UserSequence};
use crate::diffusion::DiffusionSchedule;
use crate::error::{DpgError, Result};
use crate::eval::{evaluate, EvalConfig, EvalReport, GuidedScorer};
use crate::network::{init_parameters, Forward, Model, ModelConfig, ParameterSet};
use crate::objectives::{diffusion_loss_var, rec_loss_var, total_loss, tri_view_cl_var, LossBreakdown, LossWeights, Targets};
use crate::optim::{clip_global_norm, Adam, AdamConfig};
use crate::rng;
use crate::tensor::Mat;

/// Which training examples a user sequence yields.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExampleMode {
    /// Every prefix predicts the item after it.
    AllPrefixes,
    /// Only the full training sequence minus its final item.
    LastOnly,
}

impl FromStr for ExampleMode {
    type Err = DpgError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" | "all-prefixes" => Ok(ExampleMode::AllPrefixes),
            "last" | "last-only" => Ok(ExampleMode::LastOnly),
            _ => Err(DpgError::InvalidArgument(format!("unknown example mode {s:?}"))),
        }
    }
}

impl fmt::Display for ExampleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExampleMode::AllPrefixes => "all-prefixes",
            ExampleMode::LastOnly => "last-only",
        })
    }
}

/// Query row for the single-domain cross-entropy terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SingleView {
    /// Last row of the fused guidance, shared by both domains.
    Fused,
    /// Last row of the target domain's own encoding.
    PerDomain,
}

impl FromStr for SingleView {
    type Err = DpgError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fused" => Ok(SingleView::Fused),
            "per-domain" | "per_domain" => Ok(SingleView::PerDomain),
            _ => Err(DpgError::InvalidArgument(format!("unknown single view {s:?}"))),
        }
    }
}

impl fmt::Display for SingleView {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SingleView::Fused => "fused",
            SingleView::PerDomain => "per-domain",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    pub w_diff: f64,
    pub w_rec: f64,
    pub w_tri_cl: f64,
    pub aug_rate: f64,
    pub normalize_cl: bool,
    pub example_mode: ExampleMode,
    pub single_view: SingleView,
    /// Validate every this many epochs; 0 disables validation.
    pub eval_every: usize,
    pub eval_negatives: usize,
    /// Reverse steps used during validation; `None` means all.
    pub eval_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 512,
            epochs: 100,
            warmup_epochs: 2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: None,
            seed: 0,
            w_diff: 1.0,
            w_rec: 1.0,
            w_tri_cl: 1.0,
            aug_rate: crate::augment::DEFAULT_AUG_RATE,
            normalize_cl: true,
            example_mode: ExampleMode::AllPrefixes,
            single_view: SingleView::Fused,
            eval_every: 1,
            eval_negatives: 999,
            eval_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DpgError::InvalidArgument(m));
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return bad(format!(
                "warmup_epochs ({}) must be below epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(self.aug_rate > 0.0 && self.aug_rate < 1.0) {
            return bad(format!("aug_rate {} outside (0, 1)", self.aug_rate));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            diff: self.w_diff,
            rec: self.w_rec,
            tri_cl: self.w_tri_cl,
        }
    }

    pub fn total_steps(&self, steps_per_epoch: usize) -> usize {
        self.epochs * steps_per_epoch
    }

    pub fn warmup_steps(&self, steps_per_epoch: usize) -> usize {
        self.warmup_epochs * steps_per_epoch
    }
}

/// Linear warm-up to `lr` then cosine decay to zero at the final step.
pub fn lr_at(step: usize, cfg: &TrainConfig, steps_per_epoch: usize) -> f64 {
    let w = cfg.warmup_steps(steps_per_epoch);
    let total = cfg.total_steps(steps_per_epoch);
    if step < w {
        return cfg.lr * (step + 1) as f64 / w as f64;
    }
    let start = w.max(1) - 1;
    let span = total.saturating_sub(1).saturating_sub(start);
    let progress = if span == 0 {
        0.0
    } else {
        ((step - start) as f64 / span as f64).min(1.0)
    };
    0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// One supervised example: a history, its next item, and the per-domain
/// targets.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub user_index: usize,
    pub history: Vec<Token>,
    /// The item diffused as `x0`.
    pub next: Token,
    pub targets: Targets,
}

/// Builds examples from one training sequence. Each example's targets are
/// the next item plus the next item of the other domain, when one follows.
pub fn examples_from(seq: &UserSequence, mode: ExampleMode) -> Vec<TrainExample> {
    let items = &seq.items;
    let ends: Vec<usize> = match mode {
        ExampleMode::AllPrefixes => (1..items.len()).collect(),
        ExampleMode::LastOnly => (items.len() >= 2).then(|| items.len() - 1).into_iter().collect(),
    };
    ends.into_iter()
        .map(|p| {
            let next = items[p];
            let mut targets = Targets::default();
            targets.set(next.domain, next.item);
            if let Some(o) = items[p + 1..].iter().find(|t| t.domain != next.domain) {
                targets.set(o.domain, o.item);
            }
            TrainExample {
                user_index: seq.user_index,
                history: items[..p].to_vec(),
                next,
                targets,
            }
        })
        .collect()
}

pub fn build_examples(train: &[UserSequence], mode: ExampleMode) -> Vec<TrainExample> {
    train.iter().flat_map(|s| examples_from(s, mode)).collect()
}

/// Example order of one epoch: a seeded permutation.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "epoch", epoch as u64));
    order
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub opt: Adam,
    pub global_step: usize,
    pub epoch: usize,
    pub best_metric: Option<f64>,
    pub best_epoch: Option<usize>,
    pub best_params: Option<ParameterSet>,
}

impl TrainState {
    pub fn new(model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> Result<Self> {
        let model = init_parameters(model_cfg, train_cfg.seed)?;
        let opt = Adam::new(train_cfg.adam(), &model.params.values);
        Ok(TrainState {
            model,
            opt,
            global_step: 0,
            epoch: 0,
            best_metric: None,
            best_epoch: None,
            best_params: None,
        })
    }

    /// The best validated parameters, or the current ones if none.
    pub fn best_model(&self) -> Model {
        let mut m = self.model.clone();
        if let Some(p) = &self.best_params {
            m.params = p.clone();
        }
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub losses: LossBreakdown,
    pub lr: f64,
}

/// Forward pass and gradients of one batch, without updating anything.
pub fn batch_gradients(
    model: &Model,
    sched: &DiffusionSchedule,
    batch: &[TrainExample],
    cfg: &TrainConfig,
    warmup: bool,
    step_seed: u64,
) -> Result<(LossBreakdown, Vec<Mat>)> {
    if batch.is_empty() {
        return Err(DpgError::MalformedExample("empty batch".into()));
    }
    let variant = model.cfg.variant;
    let d = model.cfg.d;
    let mut tape = model.tape();
    let mut r = rng::stream(step_seed, "batch", 0);

    let mut x0_rows = Vec::new();
    let mut x0_hat_rows = Vec::new();
    let mut single_rows: [Vec<Var>; 2] = [Vec::new(), Vec::new()];
    let mut fused_rows = Vec::new();
    let mut aug_rows = Vec::new();
    let use_cl = !warmup && variant.contrastive() && batch.len() >= 2;
    for (b, ex) in batch.iter().enumerate() {
        if ex.history.is_empty() || ex.targets.is_empty() {
            return Err(DpgError::MalformedExample(format!("example {b} lacks history or target")));
        }
        let mut f = Forward::new(model, &mut tape);
        let g = f.guidance(&ex.history)?;
        for dom in Domain::BOTH {
            single_rows[dom as usize].push(match cfg.single_view {
                SingleView::Fused => g.gd_last,
                SingleView::PerDomain => g.last(dom),
            });
        }
        fused_rows.push(g.gd_last);
        if !warmup {
            let t = r.random_range(1..=sched.steps());
            let eps = rng::gaussian_vec(&mut r, d);
            let x0 = f.item_embedding(ex.next);
            let ab = sched.alpha_bar(t);
            let noise = Mat::row_vector(eps.iter().map(|e| (1.0 - ab).sqrt() * e).collect());
            let scaled = f.tape.scale(x0, ab.sqrt());
            let noise = f.tape.constant(noise);
            let x_t = f.tape.add(scaled, noise);
            let x0_hat = f.denoise(x_t, t, g.memory)?;
            x0_rows.push(x0);
            x0_hat_rows.push(x0_hat);
        }
        if use_cl {
            let aug_seed: u64 = r.random();
            let aug = random_augment(&ex.history, cfg.aug_rate, aug_seed, &model.cfg.table_sizes(), model.cfg.max_seq_len)?;
            aug_rows.push(f.encode_aug(&aug)?);
        }
    }
    let targets: Vec<Targets> = batch.iter().map(|e| e.targets).collect();
    let tables = [tape.param(model.layout.emb_x), tape.param(model.layout.emb_y)];
    let single = [
        tape.concat_rows(single_rows[0].clone()),
        tape.concat_rows(single_rows[1].clone()),
    ];
    let (x0_hat, l_diff) = if warmup {
        (None, None)
    } else {
        let x0 = tape.concat_rows(x0_rows);
        let x0_hat = tape.concat_rows(x0_hat_rows);
        (Some(x0_hat), Some(diffusion_loss_var(&mut tape, x0, x0_hat)))
    };
    let l_rec = rec_loss_var(&mut tape, x0_hat, single, &targets, tables)?;
    let l_cl = if use_cl {
        let h_d = tape.concat_rows(fused_rows);
        let h_aug = tape.concat_rows(aug_rows);
        Some(tri_view_cl_var(&mut tape, x0_hat.expect("not warm-up"), h_d, h_aug, cfg.normalize_cl)?)
    } else {
        None
    };

    let value = |tape: &Tape<'_>, v: Option<Var>| v.map_or(0.0, |v| tape.scalar(v));
    let losses = total_loss(
        value(&tape, l_diff),
        tape.scalar(l_rec),
        value(&tape, l_cl),
        &cfg.weights(),
        warmup,
    )?;
    let w = cfg.weights();
    let mut parts = Vec::new();
    if let Some(l) = l_diff {
        parts.push(tape.scale(l, w.diff));
    }
    parts.push(tape.scale(l_rec, w.rec));
    if let Some(l) = l_cl {
        parts.push(tape.scale(l, w.tri_cl));
    }
    let root = tape.sum(parts);
    if !tape.scalar(root).is_finite() {
        return Err(DpgError::NonFinite(format!("loss {losses:?}")));
    }
    let grads = tape.backward(root);
    let mut out: Vec<Mat> = model.params.values.iter().map(|p| Mat::zeros(p.rows, p.cols)).collect();
    for (id, v) in tape.param_vars() {
        if let Some(g) = grads.wrt(v) {
            out[id] = g.clone();
        }
    }
    for (id, row) in model.frozen_rows() {
        out[id].row_mut(row).fill(0.0);
    }
    Ok((losses, out))
}

/// One optimizer update on `batch` at the state's current step.
pub fn train_step(
    state: &mut TrainState,
    sched: &DiffusionSchedule,
    batch: &[TrainExample],
    cfg: &TrainConfig,
    steps_per_epoch: usize,
) -> Result<StepLog> {
    let step = state.global_step;
    let warmup = step < cfg.warmup_steps(steps_per_epoch);
    let step_seed = rng::derive_seed(cfg.seed, "step", step as u64);
    let (losses, mut grads) = batch_gradients(&state.model, sched, batch, cfg, warmup, step_seed)?;
    if let Some(c) = cfg.grad_clip {
        clip_global_norm(&mut grads, c);
    }
    let lr = lr_at(step, cfg, steps_per_epoch);
    state.opt.step(&mut state.model.params.values, &grads, lr);
    if !state.model.params.is_finite() {
        return Err(DpgError::NonFinite(format!("parameters after step {step} ({losses:?})")));
    }
    state.global_step += 1;
    Ok(StepLog { step, losses, lr })
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Stop once the global step reaches this value.
    pub max_steps: Option<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct FitLog {
    pub steps: Vec<StepLog>,
    /// `(epoch, validation report)` after each validated epoch.
    pub validation: Vec<(usize, EvalReport)>,
}

pub fn steps_per_epoch(n_examples: usize, batch_size: usize) -> usize {
    n_examples.div_ceil(batch_size)
}

/// Trains from `state` until all epochs (or `opts.max_steps`) are done.
/// `on_epoch` runs after every completed epoch, e.g. to write checkpoints.
pub fn fit_with(
    split: &DatasetSplit,
    state: &mut TrainState,
    cfg: &TrainConfig,
    opts: &FitOptions,
    mut on_epoch: impl FnMut(&TrainState, &FitLog) -> Result<()>,
) -> Result<FitLog> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(DpgError::InvalidArgument("empty training split".into()));
    }
    let examples = build_examples(&split.train, cfg.example_mode);
    if examples.is_empty() {
        return Err(DpgError::InvalidArgument("no training examples".into()));
    }
    let spe = steps_per_epoch(examples.len(), cfg.batch_size);
    let sched = DiffusionSchedule::build(state.model.cfg.schedule())?;
    let mut log = FitLog::default();
    while state.epoch < cfg.epochs {
        let order = epoch_order(examples.len(), cfg.seed, state.epoch);
        let first = state.global_step - state.epoch * spe;
        for k in first..spe {
            if opts.max_steps.is_some_and(|m| state.global_step >= m) {
                return Ok(log);
            }
            let idx = &order[k * cfg.batch_size..((k + 1) * cfg.batch_size).min(order.len())];
            let batch: Vec<TrainExample> = idx.iter().map(|&i| examples[i].clone()).collect();
            log.steps.push(train_step(state, &sched, &batch, cfg, spe)?);
        }
        state.epoch += 1;
        if cfg.eval_every > 0 && state.epoch.is_multiple_of(cfg.eval_every) && !split.validation.is_empty() {
            let report = validate(&state.model, split, cfg)?;
            let metric = report.mean_ndcg10();
            if state.best_metric.is_none_or(|b| metric > b) {
                state.best_metric = Some(metric);
                state.best_epoch = Some(state.epoch);
                state.best_params = Some(state.model.params.clone());
            }
            log.validation.push((state.epoch, report));
        }
        on_epoch(state, &log)?;
    }
    Ok(log)
}

pub fn fit(split: &DatasetSplit, state: &mut TrainState, cfg: &TrainConfig) -> Result<FitLog> {
    fit_with(split, state, cfg, &FitOptions::default(), |_, _| Ok(()))
}

pub fn validate(model: &Model, split: &DatasetSplit, cfg: &TrainConfig) -> Result<EvalReport> {
    let scorer = GuidedScorer::new(model)?;
    let eval_cfg = EvalConfig {
        n_negatives: cfg.eval_negatives,
        exclude_history: true,
        n_steps: cfg.eval_steps,
        seed: cfg.seed,
    };
    evaluate(&scorer, &split.validation, &split.table_sizes(), &eval_cfg)
}

/// Appends step losses as CSV rows `step,l_diff,l_rec,l_tri_cl,l_total,lr`.
pub fn format_metrics(steps: &[StepLog], header: bool) -> String {
    let mut s = String::new();
    if header {
        s.push_str("step,l_diff,l_rec,l_tri_cl,l_total,lr\n");
    }
    for l in steps {
        s.push_str(&format!(
            "{},{:e},{:e},{:e},{:e},{:e}\n",
            l.step, l.losses.l_diff, l.losses.l_rec, l.losses.l_tri_cl, l.losses.l_total, l.lr
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Domain::{X, Y};

    fn cfg(epochs: usize, warmup: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            warmup_epochs: warmup,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule_shape() {
        let c = cfg(10, 2);
        let spe = 5;
        assert!((lr_at(0, &c, spe) - 1e-3 / 10.0).abs() < 1e-18);
        assert_eq!(lr_at(49, &c, spe), 0.0);
        // Seam: the last warm-up step reaches lr under both branches.
        let w = c.warmup_steps(spe);
        let warm = c.lr * w as f64 / w as f64;
        let start = w - 1;
        let cosine = 0.5 * c.lr * (1.0 + (std::f64::consts::PI * (start - start) as f64).cos());
        assert_eq!(lr_at(w - 1, &c, spe), warm);
        assert_eq!(warm, cosine);
        for s in w..49 {
            assert!(lr_at(s + 1, &c, spe) <= lr_at(s, &c, spe));
        }
        let c = cfg(3, 0);
        assert_eq!(lr_at(0, &c, 4), 1e-3);
        assert_eq!(lr_at(11, &c, 4), 0.0);
    }

    #[test]
    fn examples_and_targets() {
        let s = UserSequence::new(
            7,
            vec![Token::new(2, X), Token::new(3, Y), Token::new(4, X), Token::new(5, X)],
        );
        let ex = examples_from(&s, ExampleMode::AllPrefixes);
        assert_eq!(ex.len(), 3);
        assert_eq!(ex[0].history, vec![Token::new(2, X)]);
        assert_eq!(ex[0].targets, Targets { x: Some(4), y: Some(3) });
        assert_eq!(ex[1].targets, Targets { x: Some(4), y: None });
        assert_eq!(ex[2].next, Token::new(5, X));
        let last = examples_from(&s, ExampleMode::LastOnly);
        assert_eq!(last, vec![ex[2].clone()]);
    }

    #[test]
    fn epoch_order_is_permutation() {
        let mut o = epoch_order(57, 3, 4);
        assert_ne!(o, (0..57).collect::<Vec<_>>());
        o.sort();
        assert_eq!(o, (0..57).collect::<Vec<_>>());
        assert_eq!(epoch_order(57, 3, 4), epoch_order(57, 3, 4));
    }

    #[test]
    fn config_validation() {
        assert!(cfg(2, 2).validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..cfg(3, 1) }.validate().is_err());
        assert!(cfg(0, 2).validate().is_ok());
        assert!(cfg(3, 1).validate().is_ok());
    }
}
