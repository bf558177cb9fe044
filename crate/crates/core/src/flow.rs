//! Affine autoregressive flow layers and the stacked model.
//!
//! Layers are numbered `1..=K` in generation order; layer 1 consumes the
//! Gaussian noise. With `flip_between_layers` set, layer `k` operates on the
//! sequence with its patch order reversed whenever `k` is even, and every
//! public entry point takes and returns sequences in canonical order.

use crate::conditioner::{Conditioner, ConditionerParams};
use num_traits::{Float, Zero};

use crate::numerics::{Matrix, Real};
use crate::{Error, Result};

/// Normalizing direction of one layer:
/// `u_1 = y_1`, `u_l = (y_l - g_l) ⊙ exp(s_l)` with `(s, g)` conditioned on
/// `y_{<l-o}`. Returns `u` and `log|det ∂u/∂y| = Σ_{l≥2} Σ_d s_{l,d}`.
pub fn layer_normalize<C: Conditioner>(
    layer: &C,
    y: &Matrix<C::Scalar>,
    mask_offset: usize,
) -> Result<(Matrix<C::Scalar>, f64)> {
    check_seq(layer, y)?;
    let ss = layer.forward(y, mask_offset)?;
    let mut u = y.clone();
    let mut logdet = 0.0f64;
    for l in 1..y.rows() {
        let (s, g) = (ss.s.row(l), ss.g.row(l));
        for (k, v) in u.row_mut(l).iter_mut().enumerate() {
            *v = (*v - g[k]) * s[k].exp();
            logdet += s[k].as_f64();
        }
    }
    Ok((u, logdet))
}

/// Exact inverse of [`layer_normalize`] with `o = 0`, one position at a time
/// through the layer's incremental (KV-cached) evaluator.
pub fn layer_generate_sequential<C: Conditioner>(layer: &C, u: &Matrix<C::Scalar>) -> Result<Matrix<C::Scalar>> {
    layer_generate_masked(layer, u, 0)
}

/// Sequential generation where position `l` is conditioned only on
/// `y_{<l-o}`. `o = 0` is plain sequential generation.
pub fn layer_generate_masked<C: Conditioner>(
    layer: &C,
    u: &Matrix<C::Scalar>,
    mask_offset: usize,
) -> Result<Matrix<C::Scalar>> {
    check_seq(layer, u)?;
    let (l, d) = u.shape();
    let mut y = Matrix::zeros(l, d);
    y.row_mut(0).copy_from_slice(u.row(0));
    let mut stream = layer.stream(mask_offset);
    let mut s = vec![C::Scalar::zero(); d];
    let mut g = vec![C::Scalar::zero(); d];
    for m in 1..l {
        stream.next(&y, m, &mut s, &mut g)?;
        let ur = u.row(m);
        for (k, v) in y.row_mut(m).iter_mut().enumerate() {
            *v = ur[k] * (-s[k]).exp() + g[k];
        }
    }
    Ok(y)
}

fn check_seq<C: Conditioner>(layer: &C, m: &Matrix<C::Scalar>) -> Result<()> {
    m.check_shape(layer.seq_len(), layer.patch_dim(), "sequence")
}

/// A flow whose layers are all attention conditioners.
pub type NetworkFlow<T = f32> = FlowModel<ConditionerParams<T>>;

/// Ordered stack of layers sharing `(L, D)`. Immutable once built.
#[derive(Clone, Debug)]
pub struct FlowModel<C> {
    layers: Vec<C>,
    flip_between_layers: bool,
}

impl<C: Conditioner> FlowModel<C> {
    pub fn new(layers: Vec<C>, flip_between_layers: bool) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::Contract("a flow needs at least one layer".into()))?;
        let dims = (first.seq_len(), first.patch_dim());
        if dims.0 == 0 || dims.1 == 0 {
            return Err(Error::Contract("empty sequence shape".into()));
        }
        if let Some(k) = layers.iter().position(|c| (c.seq_len(), c.patch_dim()) != dims) {
            return Err(Error::Contract(format!(
                "layer {} has a different sequence shape",
                k + 1
            )));
        }
        Ok(Self {
            layers,
            flip_between_layers,
        })
    }

    pub fn layers(&self) -> &[C] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn seq_len(&self) -> usize {
        self.layers[0].seq_len()
    }

    pub fn patch_dim(&self) -> usize {
        self.layers[0].patch_dim()
    }

    pub fn flips(&self) -> bool {
        self.flip_between_layers
    }

    /// Whether layer `index` (0-based) sees the sequence reversed.
    pub fn is_reversed(&self, index: usize) -> bool {
        self.flip_between_layers && index % 2 == 1
    }

    /// Maps a canonical-order sequence into layer `index`'s orientation, or
    /// back (the map is an involution).
    pub fn orient(&self, index: usize, z: &Matrix<C::Scalar>) -> Matrix<C::Scalar> {
        if self.is_reversed(index) {
            z.reversed_rows()
        } else {
            z.clone()
        }
    }

    pub fn check_sequence(&self, z: &Matrix<C::Scalar>) -> Result<()> {
        z.check_shape(self.seq_len(), self.patch_dim(), "sequence")
    }
}

/// Runs the generation cascade with a caller-supplied per-layer inverse.
/// `generate(index, layer, u)` receives `u` in the layer's own orientation.
/// Returns the canonical-order output of every layer; the last is `x`.
pub fn model_generate_layers<C, F>(
    model: &FlowModel<C>,
    noise: &Matrix<C::Scalar>,
    mut generate: F,
) -> Result<Vec<Matrix<C::Scalar>>>
where
    C: Conditioner,
    F: FnMut(usize, &C, &Matrix<C::Scalar>) -> Result<Matrix<C::Scalar>>,
{
    model.check_sequence(noise)?;
    let mut outputs = Vec::with_capacity(model.num_layers());
    let mut z = noise.clone();
    for (k, layer) in model.layers().iter().enumerate() {
        let y = generate(k, layer, &model.orient(k, &z))?;
        z = model.orient(k, &y);
        outputs.push(z.clone());
    }
    Ok(outputs)
}

pub fn model_generate_with<C, F>(
    model: &FlowModel<C>,
    noise: &Matrix<C::Scalar>,
    mut generate: F,
) -> Result<Matrix<C::Scalar>>
where
    C: Conditioner,
    F: FnMut(usize, &C, &Matrix<C::Scalar>) -> Result<Matrix<C::Scalar>>,
{
    model.check_sequence(noise)?;
    let mut z = noise.clone();
    for (k, layer) in model.layers().iter().enumerate() {
        let y = generate(k, layer, &model.orient(k, &z))?;
        z = model.orient(k, &y);
    }
    Ok(z)
}

/// Sequential (KV-cached) generation through every layer.
pub fn model_generate<C: Conditioner>(model: &FlowModel<C>, noise: &Matrix<C::Scalar>) -> Result<Matrix<C::Scalar>> {
    model_generate_with(model, noise, |_, layer, u| layer_generate_sequential(layer, u))
}

/// Generation with every layer's dependency on its `o` nearest preceding
/// patches removed.
pub fn masked_generate<C: Conditioner>(
    model: &FlowModel<C>,
    noise: &Matrix<C::Scalar>,
    mask_offset: usize,
) -> Result<Matrix<C::Scalar>> {
    if mask_offset >= model.seq_len() {
        return Err(Error::Contract(format!(
            "mask offset {mask_offset} must be below the sequence length {}",
            model.seq_len()
        )));
    }
    model_generate_with(model, noise, |_, layer, u| layer_generate_masked(layer, u, mask_offset))
}

/// Data → base direction, layers `K..=1`. Returns `z_K` and the summed
/// log-determinant.
pub fn model_normalize<C: Conditioner>(
    model: &FlowModel<C>,
    x: &Matrix<C::Scalar>,
) -> Result<(Matrix<C::Scalar>, f64)> {
    model.check_sequence(x)?;
    let mut z = x.clone();
    let mut total = 0.0;
    for (k, layer) in model.layers().iter().enumerate().rev() {
        let (u, logdet) = layer_normalize(layer, &model.orient(k, &z), 0)?;
        z = model.orient(k, &u);
        total += logdet;
    }
    Ok((z, total))
}

/// Standard-normal log-density of every entry of `z`, summed.
pub fn std_normal_log_density<T: Real>(z: &Matrix<T>) -> f64 {
    let n = z.data().len() as f64;
    let sq: f64 = z.data().iter().map(|v| v.as_f64() * v.as_f64()).sum();
    -0.5 * n * (2.0 * std::f64::consts::PI).ln() - 0.5 * sq
}

pub fn log_likelihood<C: Conditioner>(model: &FlowModel<C>, x: &Matrix<C::Scalar>) -> Result<f64> {
    let (z, logdet) = model_normalize(model, x)?;
    Ok(std_normal_log_density(&z) + logdet)
}
