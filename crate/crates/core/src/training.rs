//! Combined training objective (diffusion, collision, smoothness) and the
//! training loop.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetRecord, Normalizer};
use crate::denoiser::{adam_update, AdamConfig, Denoiser, DenoiserConfig, TrainState};
use crate::diffusion::{q_sample, v_target, x0_from_v, Conditioning, NoiseSchedule};
use crate::keyconfig::KeyConfigSet;
use crate::math::sqrt;
use crate::trajopt::{collision_cost_grad, smoothness_cost_grad, D_SAFE};
use crate::world::{ArmModel, Environment, Trajectory};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Sweep samples per segment in the collision loss.
    pub n_sub: usize,
    pub d_safe: f64,
    /// Global gradient-norm clip applied before the optimizer step.
    pub grad_clip: Option<f64>,
    /// Linear ramp from zero over the first steps.
    pub warmup_steps: usize,
    /// Cosine decay to zero over the run.
    pub cosine_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            w1: 1.0,
            w2: 0.05,
            w3: 0.005,
            lr: 1e-3,
            batch_size: 16,
            epochs: 100,
            seed: 0,
            n_sub: 8,
            d_safe: D_SAFE,
            grad_clip: Some(1.0),
            warmup_steps: 200,
            cosine_decay: true,
        }
    }
}

impl TrainConfig {
    /// Learning rate for the step after `step` completed ones, out of `total`.
    pub fn lr_at(&self, step: u64, total: usize) -> f64 {
        let s = step as f64 + 1.0;
        let mut lr = self.lr;
        if self.warmup_steps > 0 {
            lr *= (s / self.warmup_steps as f64).min(1.0);
        }
        if self.cosine_decay && total > 0 {
            let frac = ((s - 1.0) / total as f64).min(1.0);
            lr *= 0.5 * (1.0 + crate::math::cos(core::f64::consts::PI * frac));
        }
        lr
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w1 >= 0.0 && self.w2 >= 0.0 && self.w3 >= 0.0) {
            return Err(Error::invalid("train config", "loss weights must be non-negative"));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 || self.n_sub == 0 {
            return Err(Error::invalid("train config", "lr, batch size and n_sub must be positive"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::invalid("train config", "gradient clip must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub diff: f64,
    pub coll: f64,
    pub smooth: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn add_scaled(&mut self, o: &LossBreakdown, s: f64) {
        self.diff += s * o.diff;
        self.coll += s * o.coll;
        self.smooth += s * o.smooth;
        self.total += s * o.total;
    }
}

/// Mean losses of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: u64,
    pub epoch: usize,
    pub loss: LossBreakdown,
}

/// A dataset record in model coordinates.
#[derive(Clone, Debug)]
pub struct Example<'a> {
    pub x0: Vec<f64>,
    pub cond: Conditioning,
    pub env: &'a Environment,
}

impl<'a> Example<'a> {
    pub fn from_record(record: &'a DatasetRecord, normalizer: &Normalizer) -> Result<Self> {
        let phi = record
            .phi
            .as_ref()
            .ok_or_else(|| Error::invalid("dataset record", "missing environment representation"))?;
        Ok(Example {
            x0: normalizer.normalize(&record.tau).into_flat(),
            cond: Conditioning {
                phi: phi.as_f64(),
                q_s: normalizer.normalize_config(&record.q_s),
                q_g: normalizer.normalize_config(&record.q_g),
            },
            env: &record.env,
        })
    }
}

/// World quantities the auxiliary losses need.
#[derive(Clone, Copy, Debug)]
pub struct LossContext<'a> {
    pub arm: &'a ArmModel,
    pub normalizer: &'a Normalizer,
    pub sched: &'a NoiseSchedule,
}

/// Loss of a given velocity prediction and, when `want_grad`, its gradient
/// with respect to that prediction.
///
/// `w1·mean((v − v*)²) + w2·L_coll(x̂0) + w3·L_smooth(x̂0)`, the auxiliary terms
/// evaluated on the denormalized reconstruction `x̂0 = √ᾱ x_t − √(1 − ᾱ) v`.
#[allow(clippy::too_many_arguments)]
pub fn loss_from_prediction(
    v_pred: &[f64],
    x_t: &[f64],
    v_tgt: &[f64],
    t: usize,
    env: &Environment,
    cfg: &TrainConfig,
    ctx: &LossContext<'_>,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<Vec<f64>>)> {
    let n = v_pred.len();
    let d = ctx.normalizer.dim();
    let diff = v_pred
        .iter()
        .zip(v_tgt)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n as f64;
    let x0 = Trajectory::from_flat(d, x0_from_v(x_t, v_pred, t, ctx.sched))?;
    let q = ctx.normalizer.denormalize(&x0);
    let mut gq = if want_grad { vec![0.0; n] } else { Vec::new() };
    let coll = collision_cost_grad(
        ctx.arm,
        env,
        &q,
        cfg.d_safe,
        cfg.n_sub,
        (want_grad && cfg.w2 != 0.0).then_some((&mut gq[..], cfg.w2)),
    );
    let smooth = smoothness_cost_grad(&q, (want_grad && cfg.w3 != 0.0).then_some((&mut gq[..], cfg.w3)));
    let loss = LossBreakdown {
        diff,
        coll,
        smooth,
        total: cfg.w1 * diff + cfg.w2 * coll + cfg.w3 * smooth,
    };
    if !want_grad {
        return Ok((loss, None));
    }
    // x̂0 = √ᾱ x_t − √(1 − ᾱ) v, q = center + half_range ⊙ x̂0
    let sb = sqrt(1.0 - ctx.sched.alpha_bar(t));
    let mut g = Vec::with_capacity(n);
    for (i, (a, b)) in v_pred.iter().zip(v_tgt).enumerate() {
        let aux = gq[i] * ctx.normalizer.half_range[i % d] * -sb;
        g.push(cfg.w1 * 2.0 * (a - b) / n as f64 + aux);
    }
    Ok((loss, Some(g)))
}

/// Loss of one example at step `t` with noise `eps`; adds the parameter
/// gradient to `grad` when given.
#[allow(clippy::too_many_arguments)]
pub fn training_loss(
    net: &Denoiser,
    params: &[f64],
    ex: &Example<'_>,
    t: usize,
    eps: &[f64],
    cfg: &TrainConfig,
    ctx: &LossContext<'_>,
    grad: Option<&mut [f64]>,
) -> Result<LossBreakdown> {
    if t == 0 || t > ctx.sched.n_train_steps() {
        return Err(Error::invalid("diffusion step", "t must lie in 1..=N"));
    }
    let eps = pinned_noise(&ex.x0, eps, ctx.normalizer.dim(), t, ctx.sched);
    let x_t = q_sample(&ex.x0, &eps, t, ctx.sched);
    let v_tgt = v_target(&ex.x0, &eps, t, ctx.sched);
    let time = t as f64 / ctx.sched.n_train_steps() as f64;
    match grad {
        None => {
            let v = net.forward(params, &x_t, time, &ex.cond)?;
            Ok(loss_from_prediction(&v, &x_t, &v_tgt, t, ex.env, cfg, ctx, false)?.0)
        }
        Some(grad) => {
            let (v, cache) = net.forward_cached(params, &x_t, time, &ex.cond)?;
            let (loss, dv) = loss_from_prediction(&v, &x_t, &v_tgt, t, ex.env, cfg, ctx, true)?;
            net.backward(params, &cache, &dv.expect("gradient requested"), grad);
            Ok(loss)
        }
    }
}

/// Noise with the first and last rows replaced so that the noised trajectory
/// carries the clean endpoints, matching what the sampler feeds the network.
pub fn pinned_noise(x0: &[f64], eps: &[f64], d: usize, t: usize, sched: &NoiseSchedule) -> Vec<f64> {
    let a = sched.alpha_bar(t);
    let k = (1.0 - sqrt(a)) / sqrt(1.0 - a);
    let mut out = eps.to_vec();
    let n = out.len();
    for i in (0..d).chain(n - d..n) {
        out[i] = k * x0[i];
    }
    out
}

/// Draws `t` uniformly from `1..=N` and standard-normal noise.
pub fn draw_noise<R: Rng + ?Sized>(len: usize, sched: &NoiseSchedule, rng: &mut R) -> (usize, Vec<f64>) {
    let t = rng.random_range(1..=sched.n_train_steps());
    let eps = (0..len).map(|_| StandardNormal.sample(rng)).collect();
    (t, eps)
}

/// Trains a freshly initialized denoiser.
///
/// Runs `epochs × ⌈M / batch_size⌉` Adam steps over shuffled mini-batches and
/// returns the final state with one loss entry per step. `on_step` runs after
/// every optimizer step.
#[allow(clippy::too_many_arguments)]
pub fn train<R: Rng + ?Sized>(
    dataset: &[DatasetRecord],
    keys: &KeyConfigSet,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    denoiser_cfg: &DenoiserConfig,
    arm: &ArmModel,
    rng: &mut R,
    on_step: &mut dyn FnMut(&TrainState, &StepLoss),
) -> Result<(TrainState, Vec<StepLoss>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if denoiser_cfg.n_keys != keys.len() {
        return Err(Error::DimensionMismatch {
            expected: keys.len(),
            got: denoiser_cfg.n_keys,
        });
    }
    if denoiser_cfg.dof != arm.dof() {
        return Err(Error::DimensionMismatch {
            expected: arm.dof(),
            got: denoiser_cfg.dof,
        });
    }
    let net = Denoiser::new(*denoiser_cfg)?;
    let normalizer = Normalizer::from_arm(arm);
    let mut examples = Vec::with_capacity(dataset.len());
    for r in dataset {
        if r.tau.len() != denoiser_cfg.horizon {
            return Err(Error::DimensionMismatch {
                expected: denoiser_cfg.horizon,
                got: r.tau.len(),
            });
        }
        if r.phi.as_ref().map(|p| p.len()) != Some(keys.len()) {
            return Err(Error::invalid("dataset record", "phi is missing or has the wrong length"));
        }
        examples.push(Example::from_record(r, &normalizer)?);
    }
    let params = net.init_params(rng);
    let mut state = TrainState::new(*denoiser_cfg, params, normalizer.clone());
    let ctx = LossContext {
        arm,
        normalizer: &normalizer,
        sched,
    };
    let mut adam = AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    };
    let total = cfg.epochs * examples.len().div_ceil(cfg.batch_size);
    let len = denoiser_cfg.horizon * denoiser_cfg.dof;
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut curve = Vec::new();
    let mut grad = vec![0.0; net.n_params()];
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut mean = LossBreakdown::default();
            let w = 1.0 / batch.len() as f64;
            for &i in batch {
                let (t, eps) = draw_noise(len, sched, rng);
                let l = training_loss(&net, &state.params, &examples[i], t, &eps, cfg, &ctx, Some(&mut grad))?;
                mean.add_scaled(&l, w);
            }
            grad.iter_mut().for_each(|g| *g *= w);
            if let Some(c) = cfg.grad_clip {
                let n = crate::math::norm(&grad);
                if n > c {
                    let s = c / n;
                    grad.iter_mut().for_each(|g| *g *= s);
                }
            }
            adam.lr = cfg.lr_at(state.step, total);
            adam_update(&mut state, &grad, &adam);
            let entry = StepLoss {
                step: state.step,
                epoch,
                loss: mean,
            };
            on_step(&state, &entry);
            curve.push(entry);
        }
    }
    Ok((state, curve))
}

/// Mean loss over fixed `(example, t, ε)` draws; used to compare models on
/// identical noise.
pub fn evaluate_loss(
    net: &Denoiser,
    params: &[f64],
    examples: &[Example<'_>],
    draws: &[(usize, usize, Vec<f64>)],
    cfg: &TrainConfig,
    ctx: &LossContext<'_>,
) -> Result<LossBreakdown> {
    let mut mean = LossBreakdown::default();
    let w = 1.0 / draws.len().max(1) as f64;
    for (i, t, eps) in draws {
        let l = training_loss(net, params, &examples[*i], *t, eps, cfg, ctx, None)?;
        mean.add_scaled(&l, w);
    }
    Ok(mean)
}
