//! Samplers and decoding diagnostics.
//!
//! Jacobi decoding solves a layer's triangular inverse system by fixed-point
//! iteration from `z⁰ = 0`: every iteration refreshes all rows at once from
//! the previous iterate with one batched conditioner call, and stops when
//! the ∞-norm step between consecutive iterates drops below `tau`. Row `t`
//! becomes exact at iteration `t`, so `L` iterations reproduce sequential
//! decoding.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use num_traits::Float;

use crate::conditioner::Conditioner;
use crate::flow::{
    layer_generate_masked, layer_generate_sequential, model_generate_layers, model_generate_with, FlowModel,
};
use crate::numerics::{cosine_similarity, inf_norm_diff, l2_diff, Matrix, Real};
use crate::{Error, Result};

/// Default stopping threshold for Jacobi iterations.
pub const DEFAULT_TAU: f64 = 0.5;

/// Prefix-agreement tolerance used by [`prefix_property_check`].
pub const PREFIX_TOL: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DecodeMode {
    Sequential,
    Ujd,
    Sejd,
}

impl DecodeMode {
    pub const ALL: [DecodeMode; 3] = [DecodeMode::Sequential, DecodeMode::Ujd, DecodeMode::Sejd];

    pub fn name(self) -> &'static str {
        match self {
            DecodeMode::Sequential => "sequential",
            DecodeMode::Ujd => "ujd",
            DecodeMode::Sejd => "sejd",
        }
    }
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sequential" | "seq" => Ok(DecodeMode::Sequential),
            "ujd" => Ok(DecodeMode::Ujd),
            "sejd" => Ok(DecodeMode::Sejd),
            other => Err(Error::Contract(format!("unknown decode mode '{other}'"))),
        }
    }
}

/// Starting iterate for Jacobi decoding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum JacobiInit {
    #[default]
    Zeros,
    /// Warm start from the layer input.
    Input,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub tau: f64,
    /// Iteration cap per Jacobi layer; `None` means the sequence length.
    pub max_iters: Option<usize>,
    /// 1-based layers decoded sequentially in `Sejd` mode.
    pub sequential_layers: BTreeSet<usize>,
    /// Record L2 error against a sequential oracle for every Jacobi layer.
    pub trace: bool,
    pub init: JacobiInit,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Sejd,
            tau: DEFAULT_TAU,
            max_iters: None,
            sequential_layers: BTreeSet::from([1]),
            trace: false,
            init: JacobiInit::Zeros,
        }
    }
}

impl DecodeConfig {
    pub fn new(mode: DecodeMode, tau: f64) -> Self {
        Self {
            mode,
            tau,
            ..Self::default()
        }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.tau.is_nan() || self.tau < 0.0 {
            return Err(Error::Contract(format!("tau must be non-negative, got {}", self.tau)));
        }
        if self.max_iters == Some(0) {
            return Err(Error::Contract("max_iters must be at least 1".into()));
        }
        if let Some(&bad) = self.sequential_layers.iter().find(|&&k| k == 0 || k > num_layers) {
            return Err(Error::Contract(format!(
                "sequential layer {bad} outside 1..={num_layers}"
            )));
        }
        Ok(())
    }

    /// Whether the 1-based layer `k` is decoded sequentially.
    pub fn is_sequential(&self, k: usize) -> bool {
        match self.mode {
            DecodeMode::Sequential => true,
            DecodeMode::Ujd => false,
            DecodeMode::Sejd => self.sequential_layers.contains(&k),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub step_inf: f64,
    pub err_l2: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerMethod {
    Sequential,
    Jacobi,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    /// 1-based layer index.
    pub layer: usize,
    pub method: LayerMethod,
    pub records: Vec<IterRecord>,
    /// Jacobi iterations run, or the number of positions for a sequential layer.
    pub iterations_used: usize,
    /// The cap was hit with `tau > 0` before the stopping rule fired.
    pub truncated: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConvergenceTrace {
    pub layers: Vec<LayerTrace>,
}

pub const CONVERGENCE_CSV_HEADER: &str = "layer,iter,step_inf,err_l2";
pub const REDUNDANCY_CSV_HEADER: &str = "layer,cos_sim";

impl ConvergenceTrace {
    pub fn truncated_layers(&self) -> Vec<usize> {
        self.layers.iter().filter(|l| l.truncated).map(|l| l.layer).collect()
    }

    /// One row per Jacobi iteration; `err_l2` is empty without an oracle.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{CONVERGENCE_CSV_HEADER}")?;
        for lt in &self.layers {
            for r in &lt.records {
                match r.err_l2 {
                    Some(e) => writeln!(w, "{},{},{},{}", lt.layer, r.iter, r.step_inf, e)?,
                    None => writeln!(w, "{},{},{},", lt.layer, r.iter, r.step_inf)?,
                }
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("write to Vec");
        String::from_utf8(buf).expect("ascii csv")
    }
}

pub struct JacobiOutcome<T: Real> {
    pub y: Matrix<T>,
    pub trace: LayerTrace,
}

fn jacobi_update<C: Conditioner>(
    layer: &C,
    u: &Matrix<C::Scalar>,
    prev: &Matrix<C::Scalar>,
) -> Result<Matrix<C::Scalar>> {
    let ss = layer.forward(prev, 0)?;
    let mut next = Matrix::zeros(u.rows(), u.cols());
    next.row_mut(0).copy_from_slice(u.row(0));
    for l in 1..u.rows() {
        let (s, g, ur) = (ss.s.row(l), ss.g.row(l), u.row(l));
        for (k, v) in next.row_mut(l).iter_mut().enumerate() {
            *v = ur[k] * (-s[k]).exp() + g[k];
        }
    }
    Ok(next)
}

fn initial_iterate<T: Real>(u: &Matrix<T>, init: JacobiInit) -> Matrix<T> {
    match init {
        JacobiInit::Zeros => Matrix::zeros(u.rows(), u.cols()),
        JacobiInit::Input => u.clone(),
    }
}

/// Jacobi decoding of one layer. `oracle`, when given, is the exact
/// (sequential) solution used to fill the `err_l2` column.
pub fn layer_generate_jacobi<C: Conditioner>(
    layer: &C,
    u: &Matrix<C::Scalar>,
    tau: f64,
    max_iters: usize,
    oracle: Option<&Matrix<C::Scalar>>,
    init: JacobiInit,
) -> Result<JacobiOutcome<C::Scalar>> {
    u.check_shape(layer.seq_len(), layer.patch_dim(), "jacobi input")?;
    if tau.is_nan() || tau < 0.0 || max_iters == 0 {
        return Err(Error::Contract(format!("tau={tau}, max_iters={max_iters}")));
    }
    let mut prev = initial_iterate(u, init);
    let mut records = Vec::new();
    let mut converged = false;
    for t in 1..=max_iters {
        let next = jacobi_update(layer, u, &prev)?;
        let step = inf_norm_diff(&next, &prev)?.as_f64();
        let err_l2 = oracle.map(|o| l2_diff(&next, o)).transpose()?;
        records.push(IterRecord {
            iter: t,
            step_inf: step,
            err_l2,
        });
        prev = next;
        if step < tau {
            converged = true;
            break;
        }
    }
    let iterations_used = records.len();
    Ok(JacobiOutcome {
        y: prev,
        trace: LayerTrace {
            layer: 0,
            method: LayerMethod::Jacobi,
            records,
            iterations_used,
            truncated: !converged && tau > 0.0,
        },
    })
}

/// The first `n` Jacobi iterates `z¹..zⁿ` without any stopping rule.
pub fn jacobi_iterates<C: Conditioner>(
    layer: &C,
    u: &Matrix<C::Scalar>,
    n: usize,
    init: JacobiInit,
) -> Result<Vec<Matrix<C::Scalar>>> {
    u.check_shape(layer.seq_len(), layer.patch_dim(), "jacobi input")?;
    let mut out = Vec::with_capacity(n);
    let mut prev = initial_iterate(u, init);
    for _ in 0..n {
        let next = jacobi_update(layer, u, &prev)?;
        out.push(next.clone());
        prev = next;
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct DecodeOutput<T: Real> {
    pub x: Matrix<T>,
    pub trace: ConvergenceTrace,
    pub seconds: f64,
}

fn decode_untimed<C: Conditioner>(
    model: &FlowModel<C>,
    noise: &Matrix<C::Scalar>,
    cfg: &DecodeConfig,
) -> Result<(Matrix<C::Scalar>, ConvergenceTrace)> {
    let max_iters = cfg.max_iters.unwrap_or(model.seq_len());
    let mut trace = ConvergenceTrace::default();
    let x = model_generate_with(model, noise, |k, layer, u| {
        let number = k + 1;
        if cfg.is_sequential(number) {
            trace.layers.push(LayerTrace {
                layer: number,
                method: LayerMethod::Sequential,
                records: Vec::new(),
                iterations_used: u.rows(),
                truncated: false,
            });
            return layer_generate_sequential(layer, u);
        }
        let oracle = if cfg.trace {
            Some(layer_generate_sequential(layer, u)?)
        } else {
            None
        };
        let mut out = layer_generate_jacobi(layer, u, cfg.tau, max_iters, oracle.as_ref(), cfg.init)?;
        out.trace.layer = number;
        trace.layers.push(out.trace);
        Ok(out.y)
    })?;
    Ok((x, trace))
}

/// Generates one sample with the configured sampler. Truncated Jacobi layers
/// are reported through `trace.truncated_layers()`.
pub fn decode<C: Conditioner>(
    model: &FlowModel<C>,
    noise: &Matrix<C::Scalar>,
    cfg: &DecodeConfig,
) -> Result<DecodeOutput<C::Scalar>> {
    cfg.validate(model.num_layers())?;
    let start = Instant::now();
    let (x, trace) = decode_untimed(model, noise, cfg)?;
    Ok(DecodeOutput {
        x,
        trace,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug)]
pub struct BatchDecodeOutput<T: Real> {
    pub xs: Vec<Matrix<T>>,
    pub traces: Vec<ConvergenceTrace>,
    pub seconds: f64,
}

impl<T: Real> BatchDecodeOutput<T> {
    /// Mean `iterations_used` of each layer across the batch.
    pub fn mean_iterations(&self) -> Vec<f64> {
        let k = self.traces.first().map_or(0, |t| t.layers.len());
        (0..k)
            .map(|i| {
                self.traces
                    .iter()
                    .map(|t| t.layers[i].iterations_used as f64)
                    .sum::<f64>()
                    / self.traces.len() as f64
            })
            .collect()
    }
}

/// Decodes a batch; samples run concurrently and results keep input order.
pub fn decode_batch<C: Conditioner>(
    model: &FlowModel<C>,
    noises: &[Matrix<C::Scalar>],
    cfg: &DecodeConfig,
) -> Result<BatchDecodeOutput<C::Scalar>> {
    cfg.validate(model.num_layers())?;
    let start = Instant::now();
    let results: Vec<_> = noises
        .par_iter()
        .map(|n| decode_untimed(model, n, cfg))
        .collect::<Result<_>>()?;
    let seconds = start.elapsed().as_secs_f64();
    let (xs, traces) = results.into_iter().unzip();
    Ok(BatchDecodeOutput { xs, traces, seconds })
}

/// First `(iteration, row)` (both 1-based) at which a Jacobi iterate
/// disagrees with the sequential solution on a row it should already have
/// fixed, i.e. row `l ≤ t` at iteration `t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PrefixReport {
    Holds,
    Violation { iteration: usize, row: usize, error: f64 },
}

pub fn prefix_property_check<C: Conditioner>(layer: &C, u: &Matrix<C::Scalar>) -> Result<PrefixReport> {
    let oracle = layer_generate_sequential(layer, u)?;
    let iterates = jacobi_iterates(layer, u, u.rows(), JacobiInit::Zeros)?;
    for (t0, z) in iterates.iter().enumerate() {
        for l in 0..=t0 {
            let err = z
                .row(l)
                .iter()
                .zip(oracle.row(l))
                .fold(0.0f64, |m, (&a, &b)| m.max((a - b).abs().as_f64()));
            if err.is_nan() || err > PREFIX_TOL {
                return Ok(PrefixReport::Violation {
                    iteration: t0 + 1,
                    row: l + 1,
                    error: err,
                });
            }
        }
    }
    Ok(PrefixReport::Holds)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RedundancyRow {
    pub layer: usize,
    pub cos_sim: f64,
}

/// For every layer, feeds the layer the input it receives during standard
/// generation and compares its standard output against its output with the
/// `o` nearest preceding patches masked. Reports the batch-mean cosine
/// similarity per layer.
pub fn redundancy_analysis<C: Conditioner>(
    model: &FlowModel<C>,
    noises: &[Matrix<C::Scalar>],
    mask_offset: usize,
) -> Result<Vec<RedundancyRow>> {
    if mask_offset >= model.seq_len() {
        return Err(Error::Contract(format!(
            "mask offset {mask_offset} must be below the sequence length {}",
            model.seq_len()
        )));
    }
    if noises.is_empty() {
        return Err(Error::Contract(
            "redundancy analysis needs at least one noise sample".into(),
        ));
    }
    let per_sample: Vec<Vec<f64>> = noises
        .par_iter()
        .map(|noise| {
            let mut sims = Vec::with_capacity(model.num_layers());
            model_generate_layers(model, noise, |_, layer, u| {
                let standard = layer_generate_sequential(layer, u)?;
                let masked = layer_generate_masked(layer, u, mask_offset)?;
                sims.push(cosine_similarity(&standard, &masked)?);
                Ok(standard)
            })?;
            Ok(sims)
        })
        .collect::<Result<_>>()?;
    let n = per_sample.len() as f64;
    Ok((0..model.num_layers())
        .map(|k| RedundancyRow {
            layer: k + 1,
            cos_sim: per_sample.iter().map(|s| s[k]).sum::<f64>() / n,
        })
        .collect())
}

pub fn write_redundancy_csv<W: Write>(rows: &[RedundancyRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{REDUNDANCY_CSV_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{}", r.layer, r.cos_sim)?;
    }
    Ok(())
}

/// Runs Jacobi with `tau = 0` for `max_iters` iterations on every layer,
/// each fed its input from the sequential chain, recording the L2 error
/// against that layer's sequential solution.
pub fn convergence_study<C: Conditioner>(
    model: &FlowModel<C>,
    noise: &Matrix<C::Scalar>,
    max_iters: usize,
) -> Result<ConvergenceTrace> {
    if max_iters == 0 {
        return Err(Error::Contract("max_iters must be at least 1".into()));
    }
    let mut trace = ConvergenceTrace::default();
    model_generate_with(model, noise, |k, layer, u| {
        let oracle = layer_generate_sequential(layer, u)?;
        let mut out = layer_generate_jacobi(layer, u, 0.0, max_iters, Some(&oracle), JacobiInit::Zeros)?;
        out.trace.layer = k + 1;
        trace.layers.push(out.trace);
        Ok(oracle)
    })?;
    Ok(trace)
}
