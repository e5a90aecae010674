//! Optimization loop: AdamW with decoupled weight decay, linear warmup and
//! step decay of the learning rate, over shuffled mixed batches.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::infer::{evaluate, InferConfig};
use crate::losses::{loss_total_par, LossConfig, LossReport, StepContext};
use crate::model::{Model, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_epochs: usize,
    pub step_size_epochs: usize,
    pub gamma: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Fraction of each batch drawn from the labeled set. `None` mixes the
    /// two sets in proportion to their sizes.
    pub labeled_ratio: Option<f64>,
    /// Worker threads for per-sample forward/backward passes.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            ..TrainConfig::paper()
        }
    }
}

impl TrainConfig {
    /// The published schedule, intended for pretrained initialization.
    pub fn paper() -> Self {
        TrainConfig {
            lr: 1e-5,
            warmup_epochs: 2,
            step_size_epochs: 10,
            gamma: 0.95,
            weight_decay: 0.01,
            batch_size: 8,
            epochs: 30,
            seed: 0,
            labeled_ratio: None,
            threads: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and non-negative, got {}", self.lr)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.step_size_epochs == 0 {
            return Err(Error::Config("step_size_epochs must be at least 1".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if let Some(r) = self.labeled_ratio {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config("labeled_ratio must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// Learning rate used throughout zero-based `epoch`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.warmup_epochs {
        return cfg.lr * (epoch + 1) as f64 / cfg.warmup_epochs as f64;
    }
    let k = (epoch - cfg.warmup_epochs) / cfg.step_size_epochs;
    cfg.lr * cfg.gamma.powi(k as i32)
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates for every parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One AdamW update of `params` from the gradients held in `grads`
/// (a store with the same layout).
pub fn optimizer_step(
    params: &mut ParamStore,
    grads: &ParamStore,
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::Contract("optimizer: parameter, gradient and state layouts differ".into()));
    }
    for id in grads.ids() {
        if let Some(g) = grads.get(id).grad() {
            if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite gradient {} at index {} of parameter {}",
                    g[i],
                    i,
                    grads.name(id)
                )));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let decay = 1.0 - lr * weight_decay;
    for (k, id) in grads.ids().enumerate() {
        let n = params.get(id).numel();
        let zero = vec![0.0; n];
        let g = grads.get(id).grad().unwrap_or(&zero);
        if g.len() != n || state.m[k].len() != n {
            return Err(Error::Contract(format!("optimizer: shape mismatch for {}", params.name(id))));
        }
        let m = &mut state.m[k];
        let v = &mut state.v[k];
        let theta = params.get_mut(id).data_mut();
        for j in 0..n {
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            theta[j] = theta[j] * decay - lr * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    pub mean_total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_conll_f1: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<LossReport>,
    pub epochs: Vec<EpochSummary>,
    /// Epoch whose parameters were returned, when a validation set was used.
    pub best_epoch: Option<usize>,
}

/// Optional extras for [`fit_with`].
#[derive(Default)]
pub struct FitHooks<'a> {
    /// Model selection by CoNLL F1 on this set, evaluated after every epoch.
    pub validation: Option<(&'a [Sample], InferConfig)>,
    /// Called after every epoch with the zero-based epoch and current model.
    #[allow(clippy::type_complexity)]
    pub on_epoch_end: Option<Box<dyn FnMut(usize, &Model) -> Result<()> + 'a>>,
}

fn mask_seed(seed: u64, epoch: usize, sample: usize) -> u64 {
    let mut x = seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(epoch as u64 + 1) ^ ((sample as u64) << 20);
    // splitmix64 finalizer
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Batches of indices into `ds ++ du` for one epoch.
fn epoch_batches(n_l: usize, n_u: usize, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let n = n_l + n_u;
    match cfg.labeled_ratio {
        None => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(rng);
            idx.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect()
        }
        Some(ratio) => {
            let mut lab: Vec<usize> = (0..n_l).collect();
            let mut unl: Vec<usize> = (n_l..n).collect();
            lab.shuffle(rng);
            unl.shuffle(rng);
            let n_batches = n.div_ceil(cfg.batch_size);
            let per_l = if n_u == 0 {
                cfg.batch_size
            } else if n_l == 0 {
                0
            } else {
                ((ratio * cfg.batch_size as f64).round() as usize).min(cfg.batch_size)
            };
            let per_u = cfg.batch_size - per_l;
            let (mut il, mut iu) = (0, 0);
            (0..n_batches)
                .map(|_| {
                    let mut b = Vec::with_capacity(cfg.batch_size);
                    for _ in 0..per_l {
                        b.push(lab[il % n_l]);
                        il += 1;
                    }
                    for _ in 0..per_u {
                        b.push(unl[iu % n_u]);
                        iu += 1;
                    }
                    b
                })
                .collect()
        }
    }
}

pub fn fit(model: Model, ds: &[Sample], du: &[Sample], loss_cfg: &LossConfig, cfg: &TrainConfig) -> Result<(Model, TrainLog)> {
    fit_with(model, ds, du, loss_cfg, cfg, FitHooks::default())
}

pub fn fit_with(
    mut model: Model,
    ds: &[Sample],
    du: &[Sample],
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    mut hooks: FitHooks<'_>,
) -> Result<(Model, TrainLog)> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::Config("training needs at least one labeled sample".into()));
    }
    if let Some(s) = ds.iter().find(|s| !s.is_labeled()) {
        return Err(Error::Config(format!("sample {} in the labeled set has no labels", s.id)));
    }
    let all: Vec<Sample> = ds.iter().cloned().chain(du.iter().map(|s| s.clone().unlabeled())).collect();
    let mut grads = model.params().clone();
    let mut state = OptimizerState::new(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();
    let mut best: Option<(f64, Model, usize)> = None;
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let mut epoch_total = 0.0;
        let batches = epoch_batches(ds.len(), all.len() - ds.len(), cfg, &mut rng);
        for idx in &batches {
            let batch: Vec<Sample> = idx.iter().map(|&i| all[i].clone()).collect();
            let ctx: Vec<StepContext> = idx
                .iter()
                .map(|&i| StepContext {
                    epoch,
                    mask_seed: mask_seed(cfg.seed, epoch, i),
                })
                .collect();
            grads.zero_grad();
            let mut report = loss_total_par(&model, &batch, loss_cfg, &ctx, Some(&mut grads), cfg.threads)?;
            if !report.total.is_finite() {
                return Err(Error::Training(format!("loss became {} at step {}", report.total, step)));
            }
            optimizer_step(model.params_mut(), &grads, &mut state, lr, cfg.weight_decay)?;
            report.step = step;
            epoch_total += report.total;
            log.steps.push(report);
            step += 1;
        }
        let mut summary = EpochSummary {
            epoch,
            lr,
            mean_total: epoch_total / batches.len().max(1) as f64,
            val_conll_f1: None,
        };
        if let Some((val, icfg)) = &hooks.validation {
            let f1 = evaluate(&model, val, icfg)?.conll_f1;
            summary.val_conll_f1 = Some(f1);
            if best.as_ref().is_none_or(|b| f1 > b.0) {
                best = Some((f1, model.clone(), epoch));
            }
        }
        log.epochs.push(summary);
        if let Some(cb) = hooks.on_epoch_end.as_mut() {
            cb(epoch, &model)?;
        }
    }
    if let Some((_, m, e)) = best {
        log.best_epoch = Some(e);
        model = m;
    }
    Ok((model, log))
}
