//! Loss, optimizer and the training loop.

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::CaaiNet;
use crate::params::ParamStore;
use crate::tensor::{Backward, BackwardCtx, Float, Tape, Tensor, Var};

pub const BCE_EPS: f64 = 1e-7;

struct BceOp;

impl<T: Float> Backward<T> for BceOp {
    fn name(&self) -> &'static str {
        "bce"
    }

    // The clamp is treated as identity for the gradient, which keeps
    // saturated predictions trainable.
    fn backward(&self, ctx: &BackwardCtx<'_, T>) -> Vec<Option<Tensor<T>>> {
        let (pred, gt) = (&ctx.inputs[0], &ctx.inputs[1]);
        let scale = ctx.grad.item() / T::c(pred.numel() as f64);
        let (lo, hi) = (T::c(BCE_EPS), T::c(1.0 - BCE_EPS));
        let dp = ctx.needs_grad[0].then(|| {
            pred.zip_map(gt, |p, g| {
                let p = p.max(lo).min(hi);
                scale * (p - g) / (p * (T::one() - p))
            })
            .expect("same shape")
        });
        vec![dp, None]
    }

    fn branch(&self, inputs: &[Rc<Tensor<T>>], out: &mut Vec<u64>) {
        let (lo, hi) = (T::c(BCE_EPS), T::c(1.0 - BCE_EPS));
        out.extend(
            inputs[0]
                .data()
                .iter()
                .map(|&p| u64::from(p < lo) + 2 * u64::from(p > hi)),
        );
    }
}

/// Mean binary cross-entropy with predictions clamped to `[ε, 1 − ε]`.
pub fn bce_loss<'t, T: Float>(pred: Var<'t, T>, gt: Var<'t, T>) -> Result<Var<'t, T>> {
    let (p, g) = (pred.value(), gt.value());
    if p.shape() != g.shape() {
        return Err(Error::shape("bce", p.shape(), g.shape()));
    }
    let (lo, hi) = (T::c(BCE_EPS), T::c(1.0 - BCE_EPS));
    let total = p.data().iter().zip(g.data()).fold(T::zero(), |acc, (&p, &g)| {
        let p = p.max(lo).min(hi);
        acc - (g * p.ln() + (T::one() - g) * (T::one() - p).ln())
    });
    let loss = Tensor::scalar(total / T::c(p.numel() as f64));
    Ok(pred.tape().push(loss, &[pred, gt], BceOp))
}

/// SGD with momentum and L2 weight decay:
/// `v ← μ·v + g + λ·p`, `p ← p − η·v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Tensor<T>>,
}

impl<T: Float> Sgd<T> {
    pub fn new(cfg: &TrainConfig, params: &ParamStore<T>) -> Self {
        Self {
            lr: cfg.lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            velocity: params
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape().to_vec()))
                .collect(),
        }
    }

    /// Applies one update from the gradients stored in `params`. Every
    /// parameter must have a gradient.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        if self.velocity.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer holds {} velocities for {} parameters",
                self.velocity.len(),
                params.len()
            )));
        }
        if let Some((_, p)) = params.iter().find(|(_, p)| p.grad.is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        let (lr, mu, wd) = (T::c(self.lr), T::c(self.momentum), T::c(self.weight_decay));
        for ((_, p), v) in params.iter_mut().zip(&mut self.velocity) {
            let grad = p.grad.as_ref().expect("checked above");
            for ((v, &g), w) in v.data_mut().iter_mut().zip(grad.data()).zip(p.value.data_mut()) {
                *v = mu * *v + g + wd * *w;
                *w = *w - lr * *v;
            }
        }
        Ok(())
    }
}

/// Training progress that survives a checkpoint round trip.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub epochs_done: usize,
    /// Mean training loss per completed epoch.
    pub loss_history: Vec<f64>,
    pub optimizer: Sgd<T>,
}

impl<T: Float> TrainState<T> {
    pub fn new(cfg: &TrainConfig, params: &ParamStore<T>) -> Self {
        Self {
            epochs_done: 0,
            loss_history: Vec::new(),
            optimizer: Sgd::new(cfg, params),
        }
    }
}

/// Sample order for `epoch`; a pure function of the seed and epoch index.
pub fn epoch_order(n: usize, seed: u64, epoch: usize, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
    }
    order
}

fn stack_batch<T: Float>(samples: &[&Sample<T>]) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let mut gts = Vec::with_capacity(samples.len());
    for s in samples {
        gts.push(
            s.gt.as_ref()
                .ok_or_else(|| Error::Config(format!("sample `{}` has no ground truth", s.stem)))?,
        );
    }
    let rgb: Vec<_> = samples.iter().map(|s| &s.rgb).collect();
    let depth: Vec<_> = samples.iter().map(|s| &s.depth).collect();
    Ok((Tensor::stack(&rgb)?, Tensor::stack(&depth)?, Tensor::stack(&gts)?))
}

/// Forward, backward and one optimizer update on a batch. Leaves the
/// batch gradients in `model.params`. Returns the batch loss.
pub fn train_step<T: Float>(model: &mut CaaiNet<T>, opt: &mut Sgd<T>, batch: &[&Sample<T>]) -> Result<f64> {
    let (rgb, depth, gt) = stack_batch(batch)?;
    let (loss, grads) = {
        let tape = Tape::new();
        let pred = model.forward(&tape, tape.constant(rgb), tape.constant(depth))?;
        let loss = bce_loss(pred, tape.constant(gt))?;
        let value = loss.value().item().as_f64();
        if !value.is_finite() {
            let (node, op) = tape.first_non_finite().unwrap_or((loss.id(), "bce"));
            return Err(Error::NonFinite { op, node });
        }
        (value, tape.backward(loss)?)
    };
    model.params.set_grads(&grads);
    opt.step(&mut model.params)?;
    Ok(loss)
}

/// Runs one epoch and returns its mean per-sample loss.
pub fn train_epoch<T: Float>(
    model: &mut CaaiNet<T>,
    samples: &[Sample<T>],
    cfg: &TrainConfig,
    state: &mut TrainState<T>,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let order = epoch_order(samples.len(), cfg.seed, state.epochs_done, cfg.shuffle);
    let mut total = 0.0;
    for chunk in order.chunks(cfg.batch_size) {
        let batch: Vec<&Sample<T>> = chunk.iter().map(|&i| &samples[i]).collect();
        total += train_step(model, &mut state.optimizer, &batch)? * batch.len() as f64;
    }
    let mean = total / samples.len() as f64;
    state.epochs_done += 1;
    state.loss_history.push(mean);
    Ok(mean)
}

/// Trains until `cfg.epochs` epochs are complete, resuming from `state`.
/// `on_epoch` sees the 1-based epoch number and its mean loss.
pub fn train<T: Float>(
    model: &mut CaaiNet<T>,
    samples: &[Sample<T>],
    cfg: &TrainConfig,
    state: &mut TrainState<T>,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<()> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    while state.epochs_done < cfg.epochs {
        let loss = train_epoch(model, samples, cfg, state)?;
        on_epoch(state.epochs_done, loss);
    }
    Ok(())
}
