//! AdamW training with global-norm clipping, a single step decay, batch
//! gradient accumulation and horizontal-flip augmentation.

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::config::{Config, OptimConfig};
use crate::data::Clip;
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown};
use crate::model::{forward, forward_loss, Model, DIVERSITY_WEIGHT};
use crate::params::{Ctx, ParamSet};
use crate::tensor::Tensor;

/// Parameters whose name starts with this use `encoder_lr`.
pub const ENCODER_PREFIX: &str = "encoder.";

/// First and second moments per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: IndexMap<String, Tensor>,
    pub v: IndexMap<String, Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = || params.iter().map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape()))).collect();
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// Learning rates `(lr, encoder_lr)` for `epoch` (0-based) at optimiser
/// step `step` (1-based).
pub fn learning_rates(opt: &OptimConfig, epoch: usize, step: u64) -> (f64, f64) {
    let mut f = if epoch >= opt.drop_epoch { 1.0 / opt.drop_factor } else { 1.0 };
    if (step as usize) < opt.warmup_steps {
        f *= step as f64 / opt.warmup_steps as f64;
    }
    (opt.lr * f, opt.encoder_lr * f)
}

/// Global L2 norm of the accumulated gradients.
pub fn grad_norm(params: &ParamSet) -> f64 {
    params
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescale all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut ParamSet, max_norm: f64) -> f64 {
    let norm = grad_norm(params);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for (_, t) in params.iter_mut() {
            if let Some(g) = t.grad() {
                let scaled: Vec<f64> = g.iter().map(|v| v * s).collect();
                t.zero_grad();
                t.accumulate_grad(&scaled);
            }
        }
    }
    norm
}

/// One decoupled-weight-decay Adam update.
pub fn adamw_step(params: &mut ParamSet, state: &mut AdamState, opt: &OptimConfig, lrs: (f64, f64)) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let (bc1, bc2) = (1.0 - opt.beta1.powi(t), 1.0 - opt.beta2.powi(t));
    for (name, p) in params.iter_mut() {
        let Some(g) = p.grad().map(<[f64]>::to_vec) else { continue };
        let lr = if name.starts_with(ENCODER_PREFIX) { lrs.1 } else { lrs.0 };
        let m = state.m.get_mut(name).ok_or_else(|| Error::MissingParam(name.to_string()))?;
        let v = state.v.get_mut(name).ok_or_else(|| Error::MissingParam(name.to_string()))?;
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i];
            v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g[i] * g[i];
            let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + opt.eps);
            *w -= lr * (update + opt.weight_decay * *w);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub losses: LossBreakdown,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

impl StepLog {
    /// `step\tmask\tref\tdiv\ttotal`.
    pub fn line(&self) -> String {
        let l = &self.losses;
        format!("{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}", self.step, l.mask, l.reference, l.diversity, l.total)
    }
}

fn finite_all(component: &str, t: &Tensor) -> Result<()> {
    finite(component, if t.is_finite() { 0.0 } else { f64::NAN })
}

fn finite(component: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            component: component.to_string(),
        })
    }
}

pub struct Trainer {
    pub cfg: Config,
    pub model: Model,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    pub epoch: usize,
    /// Whether to apply dropout and flips.
    pub augment: bool,
}

impl Trainer {
    pub fn new(cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let model = Model::from_config(cfg)?;
        let adam = AdamState::new(&model.params);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Trainer {
            cfg: cfg.clone(),
            model,
            adam,
            rng,
            epoch: 0,
            augment: true,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step
    }

    /// Loss of one clip, gradients accumulated with weight `scale`.
    fn accumulate(&mut self, clip: &Clip, scale: f64) -> Result<LossBreakdown> {
        let flipped;
        let clip = if self.augment && self.rng.random_bool(self.cfg.optim.hflip_prob) {
            flipped = clip.hflip();
            &flipped
        } else {
            clip
        };
        let tape = Tape::new();
        let mut ctx = Ctx::new(&tape, &self.model.params);
        if self.augment {
            ctx = ctx.with_dropout(self.cfg.model.dropout, ChaCha8Rng::seed_from_u64(self.rng.next_u64()));
        }
        let text = self.model.text_features(&clip.query)?;
        let pred = forward(&ctx, &self.cfg.model, tape.constant(clip.frames.clone()), &text)?;
        finite_all("mask logits", &pred.mask_logits.value())?;
        finite_all("referring logits", &pred.ref_logits.value())?;
        let losses = total_loss(
            pred.mask_logits,
            pred.ref_logits,
            &pred.kernels,
            ctx.p(DIVERSITY_WEIGHT)?,
            &clip.gt,
            &self.cfg.loss,
        )?;
        let b = losses.breakdown();
        finite("mask loss", b.mask)?;
        finite("referring loss", b.reference)?;
        finite("diversity loss", b.diversity)?;
        finite("total loss", b.total)?;
        let grads = tape.backward(losses.total)?;
        ctx.params.accumulate(&grads, &mut self.model.params, scale)?;
        Ok(b)
    }

    /// One optimiser step over `batch`: mean loss, mean gradient.
    pub fn step(&mut self, batch: &[Clip]) -> Result<StepLog> {
        if batch.is_empty() {
            return Err(Error::contract("train_step", "empty batch"));
        }
        self.model.params.zero_grads();
        let scale = 1.0 / batch.len() as f64;
        let mut sum = LossBreakdown::default();
        for clip in batch {
            let b = self.accumulate(clip, scale)?;
            sum.mask += b.mask * scale;
            sum.reference += b.reference * scale;
            sum.diversity += b.diversity * scale;
            sum.total += b.total * scale;
        }
        let norm = clip_grad_norm(&mut self.model.params, self.cfg.optim.clip_norm);
        finite("gradient", norm)?;
        let lrs = learning_rates(&self.cfg.optim, self.epoch, self.adam.step + 1);
        adamw_step(&mut self.model.params, &mut self.adam, &self.cfg.optim, lrs)?;
        self.model.params.zero_grads();
        if !self.model.params.all_finite() {
            return Err(Error::NonFinite {
                component: "parameters".into(),
            });
        }
        Ok(StepLog {
            step: self.adam.step,
            losses: sum,
            grad_norm: norm,
        })
    }

    /// Shuffle, split into batches, step through them; then advance the
    /// epoch counter.
    pub fn epoch(&mut self, clips: &[Clip], mut log: impl FnMut(&StepLog)) -> Result<Vec<StepLog>> {
        let mut order: Vec<usize> = (0..clips.len()).collect();
        order.shuffle(&mut self.rng);
        let mut out = Vec::new();
        for chunk in order.chunks(self.cfg.optim.batch_size.max(1)) {
            let batch: Vec<Clip> = chunk.iter().map(|&i| clips[i].clone()).collect();
            let s = self.step(&batch)?;
            log(&s);
            out.push(s);
        }
        self.epoch += 1;
        Ok(out)
    }

    /// Evaluation loss of one clip without augmentation or updates.
    pub fn eval_loss(&self, clip: &Clip) -> Result<LossBreakdown> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.model.params);
        let text = self.model.text_features(&clip.query)?;
        let (_, losses) = forward_loss(&ctx, &self.cfg, tape.constant(clip.frames.clone()), &text, &clip.gt)?;
        Ok(losses.breakdown())
    }
}
