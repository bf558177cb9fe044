//! Maximum-likelihood training: exact NLL gradients through the normalizing
//! direction, Adam with global-norm clipping, and the training loop.

use std::io::Write;

use rayon::prelude::*;

use crate::conditioner::{ConditionerHyper, ConditionerParams};
use crate::data::{Dataset, DatasetId};
use crate::flow::{log_likelihood, FlowModel, NetworkFlow};
use crate::numerics::{Matrix, Real, Rng};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub dataset: DatasetId,
    /// Dataset size before the 90/10 split.
    pub samples: usize,
    pub layers: usize,
    pub hyper: ConditionerHyper,
    pub flips: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 32,
            lr: 1e-3,
            betas: (0.9, 0.99),
            eps: 1e-8,
            grad_clip: 1.0,
            seed: 0,
            dataset: DatasetId::GradientPatches,
            samples: 4000,
            layers: 4,
            hyper: ConditionerHyper {
                seq_len: 16,
                patch_dim: 4,
                channels: 32,
                blocks: 2,
                scale_clamp: 2.0,
            },
            flips: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        let (b1, b2) = self.betas;
        let ok = self.batch >= 1
            && self.lr > 0.0
            && self.lr.is_finite()
            && b1 > 0.0
            && b1 < 1.0
            && b2 > 0.0
            && b2 < 1.0
            && self.eps > 0.0
            && self.grad_clip > 0.0
            && self.layers >= 1
            && self.samples >= 10;
        if !ok {
            return Err(Error::Contract(format!("invalid training configuration {self:?}")));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: self.eps,
            clip: self.grad_clip,
        }
    }
}

/// Loss and gradients for one sequence: `-log p(x)` through every layer.
pub fn sample_loss_and_grads<T: Real>(
    model: &NetworkFlow<T>,
    x: &Matrix<T>,
) -> Result<(f64, Vec<ConditionerParams<T>>)> {
    model.check_sequence(x)?;
    let k_layers = model.num_layers();
    let mut tapes = Vec::with_capacity(k_layers);
    let mut z = x.clone();
    let mut logdet = 0.0f64;
    for (k, layer) in model.layers().iter().enumerate().rev() {
        let y = model.orient(k, &z);
        let tape = layer.forward_tape(&y, 0)?;
        let mut u = y.clone();
        for l in 1..y.rows() {
            let (s, g) = (tape.out.s.row(l), tape.out.g.row(l));
            for (i, v) in u.row_mut(l).iter_mut().enumerate() {
                *v = (*v - g[i]) * s[i].exp();
                logdet += s[i].as_f64();
            }
        }
        z = model.orient(k, &u);
        tapes.push((y, tape));
    }
    tapes.reverse();
    let n = z.data().len() as f64;
    let sq: f64 = z.data().iter().map(|v| v.as_f64() * v.as_f64()).sum();
    let loss = 0.5 * n * (2.0 * std::f64::consts::PI).ln() + 0.5 * sq - logdet;

    // d loss / d z_K = z_K; walk back towards the data in generation order.
    let mut dz = z;
    let mut grads = Vec::with_capacity(k_layers);
    for (k, layer) in model.layers().iter().enumerate() {
        let (y, tape) = &tapes[k];
        let du = model.orient(k, &dz);
        let (rows, cols) = y.shape();
        let mut dy = Matrix::zeros(rows, cols);
        let mut ds = Matrix::zeros(rows, cols);
        let mut dg = Matrix::zeros(rows, cols);
        dy.row_mut(0).copy_from_slice(du.row(0));
        for l in 1..rows {
            for i in 0..cols {
                let e = tape.out.s.get(l, i).exp();
                let g_up = du.get(l, i);
                dy.set(l, i, g_up * e);
                ds.set(l, i, g_up * (y.get(l, i) - tape.out.g.get(l, i)) * e - T::one());
                dg.set(l, i, -(g_up * e));
            }
        }
        let (gp, dy_cond) = layer.backward(tape, &ds, &dg)?;
        dy.add_assign(&dy_cond);
        grads.push(gp);
        dz = model.orient(k, &dy);
    }
    Ok((loss, grads))
}

/// Mean negative log-likelihood over `batch` and its gradient. Per-sample
/// work runs in parallel; the reduction is in sample order.
pub fn nll_loss_and_grads<T: Real>(
    model: &NetworkFlow<T>,
    batch: &[&Matrix<T>],
) -> Result<(f64, Vec<ConditionerParams<T>>)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let per_sample: Vec<(f64, Vec<ConditionerParams<T>>)> = batch
        .par_iter()
        .map(|x| sample_loss_and_grads(model, x))
        .collect::<Result<_>>()?;
    let inv = T::one() / T::lit(batch.len() as f64);
    let mut it = per_sample.into_iter();
    let (mut loss, mut total) = it.next().expect("non-empty");
    for (l, g) in it {
        loss += l;
        for (acc, layer) in total.iter_mut().zip(&g) {
            for ((_, a), (_, b)) in acc.tensors_mut().into_iter().zip(layer.tensors()) {
                a.add_assign(b);
            }
        }
    }
    loss /= batch.len() as f64;
    for layer in &mut total {
        for (_, m) in layer.tensors_mut() {
            m.data_mut().iter_mut().for_each(|v| *v = *v * inv);
        }
    }
    if !loss.is_finite() {
        return Err(Error::Divergence { step: 0, loss });
    }
    Ok((loss, total))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
}

/// First and second moments per parameter tensor, plus the step count.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn for_layers<T: Real>(layers: &[ConditionerParams<T>]) -> Self {
        Self::new(
            layers
                .iter()
                .flat_map(|l| l.tensors().into_iter().map(|(_, m)| m.data().len())),
        )
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction. Gradients are first rescaled so
/// their global L2 norm is at most `cfg.clip`. Returns the pre-clip norm.
pub fn adam_step<T: Real>(
    state: &mut OptimizerState,
    params: &mut [&mut [T]],
    grads: &mut [&mut [T]],
    cfg: &AdamConfig,
) -> f64 {
    assert_eq!(params.len(), state.m.len());
    assert_eq!(grads.len(), state.m.len());
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > cfg.clip {
        let scale = T::lit(cfg.clip / norm);
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|v| *v = *v * scale);
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads.iter()).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        assert_eq!(p.len(), m.len());
        for j in 0..p.len() {
            let gj = g[j].as_f64();
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let update = cfg.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
            p[j] = T::lit(p[j].as_f64() - update);
        }
    }
    norm
}

fn adam_layers<T: Real>(
    state: &mut OptimizerState,
    layers: &mut [ConditionerParams<T>],
    grads: &mut [ConditionerParams<T>],
    cfg: &AdamConfig,
) -> f64 {
    let mut p: Vec<&mut [T]> = layers
        .iter_mut()
        .flat_map(|l| l.tensors_mut().into_iter().map(|(_, m)| m.data_mut()))
        .collect();
    let mut g: Vec<&mut [T]> = grads
        .iter_mut()
        .flat_map(|l| l.tensors_mut().into_iter().map(|(_, m)| m.data_mut()))
        .collect();
    adam_step(state, &mut p, &mut g, cfg)
}

/// Freshly initialized (identity) model for `cfg`.
pub fn init_model(cfg: &TrainConfig) -> Result<NetworkFlow> {
    let mut rng = Rng::new(cfg.seed);
    let layers = (0..cfg.layers)
        .map(|_| ConditionerParams::init(&mut rng, cfg.hyper))
        .collect::<Result<Vec<_>>>()?;
    FlowModel::new(layers, cfg.flips)
}

/// Mean `-log p(x)` over `samples`.
pub fn mean_nll(model: &NetworkFlow, samples: &[&Matrix<f32>]) -> Result<f64> {
    let lls: Vec<f64> = samples
        .par_iter()
        .map(|x| log_likelihood(model, x))
        .collect::<Result<_>>()?;
    Ok(-lls.iter().sum::<f64>() / lls.len() as f64)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: NetworkFlow,
    /// `(step, mean batch loss)`, one entry per step.
    pub loss_log: Vec<(usize, f64)>,
    /// Held-out NLL of the untrained (identity) model.
    pub baseline_nll: f64,
    pub heldout_nll: f64,
}

impl TrainOutcome {
    pub fn improvement(&self) -> f64 {
        (self.baseline_nll - self.heldout_nll) / self.baseline_nll.abs()
    }
}

/// Training stopped on a non-finite loss or parameter update.
#[derive(Debug, thiserror::Error)]
#[error("training diverged at step {step} (loss {loss})")]
pub struct Diverged {
    pub step: usize,
    pub loss: f64,
    pub last_finite: Box<NetworkFlow>,
    pub loss_log: Vec<(usize, f64)>,
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Diverged(#[from] Diverged),
    #[error(transparent)]
    Other(#[from] Error),
}

pub fn train(cfg: &TrainConfig) -> std::result::Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let data = Dataset::generate(cfg.dataset, cfg.seed, cfg.samples)?;
    if (data.seq_len, data.patch_dim) != (cfg.hyper.seq_len, cfg.hyper.patch_dim) {
        return Err(Error::Contract(format!(
            "dataset {} produces {}x{} sequences, model expects {}x{}",
            cfg.dataset, data.seq_len, data.patch_dim, cfg.hyper.seq_len, cfg.hyper.patch_dim
        ))
        .into());
    }
    let (train_set, held_out) = data.split();
    let mut model = init_model(cfg)?;
    let baseline_nll = mean_nll(&model, &held_out)?;
    let mut batch_rng = Rng::new(cfg.seed ^ 0x5EED_BA7C_0000_0001);
    let mut state = OptimizerState::for_layers(model.layers());
    let adam = cfg.adam();
    let mut loss_log = Vec::with_capacity(cfg.steps);

    for step in 1..=cfg.steps {
        let batch: Vec<&Matrix<f32>> = (0..cfg.batch)
            .map(|_| train_set[batch_rng.below(train_set.len())])
            .collect();
        let (loss, mut grads) = match nll_loss_and_grads(&model, &batch) {
            Ok(v) => v,
            Err(Error::Divergence { loss, .. }) => {
                return Err(Diverged {
                    step,
                    loss,
                    last_finite: Box::new(model),
                    loss_log,
                }
                .into())
            }
            Err(e) => return Err(e.into()),
        };
        let flips = model.flips();
        let mut layers = model.layers().to_vec();
        adam_layers(&mut state, &mut layers, &mut grads, &adam);
        if layers.iter().any(|l| !l.is_finite()) {
            return Err(Diverged {
                step,
                loss: f64::NAN,
                last_finite: Box::new(model),
                loss_log,
            }
            .into());
        }
        model = FlowModel::new(layers, flips)?;
        loss_log.push((step, loss));
    }
    let heldout_nll = mean_nll(&model, &held_out)?;
    Ok(TrainOutcome {
        model,
        loss_log,
        baseline_nll,
        heldout_nll,
    })
}

pub fn write_loss_csv<W: Write>(log: &[(usize, f64)], mut w: W) -> std::io::Result<()> {
    writeln!(w, "step,loss")?;
    for (s, l) in log {
        writeln!(w, "{s},{l}")?;
    }
    Ok(())
}
