//! Strict-causal conditioner producing per-position log-scale `s` and shift
//! `g` from the preceding patches.
//!
//! Architecture: each patch is embedded into a content row
//! `c_j = y_j W_in + b_in + P_j`. A separate query stream starts from the bare
//! positional embedding `h_l = P_l`, so position `l` never sees its own patch.
//! Every block is pre-norm single-head attention from the query stream onto
//! the content rows `j < l - o`, followed by a pre-norm GELU MLP. The head maps
//! the final query stream to `[s_raw | g]`, and `s = α·tanh(s_raw/α)`.
//!
//! Keys and values depend only on the content row they come from, which is
//! what makes the KV cache exact: appending row `m` never changes rows `< m`.
//! All row-level arithmetic goes through the same kernels in the batched,
//! cached and taped paths, so the three agree bit for bit.

use std::marker::PhantomData;

use crate::numerics::{vec_mat, Matrix, Real, Rng};
use crate::{Error, Result};

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConditionerHyper {
    pub seq_len: usize,
    pub patch_dim: usize,
    pub channels: usize,
    pub blocks: usize,
    pub scale_clamp: f64,
}

impl ConditionerHyper {
    pub fn validate(&self) -> Result<()> {
        let ok = self.seq_len >= 1
            && self.patch_dim >= 1
            && self.channels >= self.patch_dim
            && self.blocks >= 1
            && self.scale_clamp > 0.0
            && self.scale_clamp.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Contract(format!("invalid conditioner hyperparameters {self:?}")))
        }
    }
}

/// Per-position scale and shift, each `L×D`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleShift<T: Real> {
    pub s: Matrix<T>,
    pub g: Matrix<T>,
}

/// Anything that maps a sequence prefix to `(s, g)` for the next position.
///
/// Row `l` of the batched output must depend only on rows `1..l-1-o` of the
/// input. Implementations other than the network are analytic fixtures.
pub trait Conditioner: Send + Sync {
    type Scalar: Real;

    fn seq_len(&self) -> usize;
    fn patch_dim(&self) -> usize;

    /// Evaluates every position at once with dependency-mask offset `o`.
    fn forward(&self, y: &Matrix<Self::Scalar>, mask_offset: usize) -> Result<ScaleShift<Self::Scalar>>;

    /// Opens an incremental evaluator for one decode stream.
    fn stream(&self, mask_offset: usize) -> Box<dyn ConditionerStream<Self::Scalar> + '_>;
}

/// Incremental evaluator. `next(y, m, ..)` is called for `m = 0, 1, .., L-1`
/// in order, with rows `0..m` of `y` final; it writes `(s, g)` for row `m`.
pub trait ConditionerStream<T: Real> {
    fn next(&mut self, y: &Matrix<T>, m: usize, s: &mut [T], g: &mut [T]) -> Result<()>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T: Real> {
    pub ln1_g: Matrix<T>,
    pub ln1_b: Matrix<T>,
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub ln2_g: Matrix<T>,
    pub ln2_b: Matrix<T>,
    pub w1: Matrix<T>,
    pub b1: Matrix<T>,
    pub w2: Matrix<T>,
    pub b2: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionerParams<T: Real = f32> {
    pub hyper: ConditionerHyper,
    pub input_w: Matrix<T>,
    pub input_b: Matrix<T>,
    pub pos: Matrix<T>,
    pub blocks: Vec<BlockParams<T>>,
    pub head_w: Matrix<T>,
    pub head_b: Matrix<T>,
}

/// Shape of every tensor in canonical order, as `(name, rows, cols)`.
pub fn tensor_layout(h: &ConditionerHyper) -> Vec<(String, usize, usize)> {
    let (l, d, c) = (h.seq_len, h.patch_dim, h.channels);
    let mut out = vec![
        ("input.w".to_string(), d, c),
        ("input.b".to_string(), 1, c),
        ("pos".to_string(), l, c),
    ];
    for b in 0..h.blocks {
        for (name, r, k) in [
            ("ln1.g", 1, c),
            ("ln1.b", 1, c),
            ("attn.wq", c, c),
            ("attn.wk", c, c),
            ("attn.wv", c, c),
            ("attn.wo", c, c),
            ("ln2.g", 1, c),
            ("ln2.b", 1, c),
            ("mlp.w1", c, 4 * c),
            ("mlp.b1", 1, 4 * c),
            ("mlp.w2", 4 * c, c),
            ("mlp.b2", 1, c),
        ] {
            out.push((format!("block{b}.{name}"), r, k));
        }
    }
    out.push(("head.w".to_string(), c, 2 * d));
    out.push(("head.b".to_string(), 1, 2 * d));
    out
}

impl<T: Real> ConditionerParams<T> {
    /// Small-normal weights, unit norm gains, zero biases, and a zero output
    /// head so the layer starts as the identity map.
    pub fn init(rng: &mut Rng, hyper: ConditionerHyper) -> Result<Self> {
        hyper.validate()?;
        let mut p = Self::zeros(hyper);
        for (name, m) in p.tensors_mut() {
            if name.ends_with(".g") && name.contains("ln") {
                m.fill(T::one());
            } else if (name == "input.w" || name == "pos" || name.contains(".w")) && !name.starts_with("head") {
                *m = rng.normal_matrix(m.rows(), m.cols(), INIT_STD);
            }
        }
        Ok(p)
    }

    /// Every tensor drawn from `N(0, std^2)` (norm gains centred on 1), so
    /// the layer is a generic non-identity map. Meant for tests and
    /// benchmarks that need nontrivial dependencies without training.
    pub fn randomized(rng: &mut Rng, hyper: ConditionerHyper, std: f64) -> Result<Self> {
        hyper.validate()?;
        let mut p = Self::zeros(hyper);
        for (name, m) in p.tensors_mut() {
            let base = if name.ends_with(".g") && name.contains("ln") {
                1.0
            } else {
                0.0
            };
            let r: Matrix<T> = rng.normal_matrix(m.rows(), m.cols(), std);
            *m = r.map(|x| x + T::lit(base));
        }
        Ok(p)
    }

    pub fn zeros(hyper: ConditionerHyper) -> Self {
        let (l, d, c) = (hyper.seq_len, hyper.patch_dim, hyper.channels);
        let z = Matrix::zeros;
        let blocks = (0..hyper.blocks)
            .map(|_| BlockParams {
                ln1_g: z(1, c),
                ln1_b: z(1, c),
                wq: z(c, c),
                wk: z(c, c),
                wv: z(c, c),
                wo: z(c, c),
                ln2_g: z(1, c),
                ln2_b: z(1, c),
                w1: z(c, 4 * c),
                b1: z(1, 4 * c),
                w2: z(4 * c, c),
                b2: z(1, c),
            })
            .collect();
        Self {
            hyper,
            input_w: z(d, c),
            input_b: z(1, c),
            pos: z(l, c),
            blocks,
            head_w: z(c, 2 * d),
            head_b: z(1, 2 * d),
        }
    }

    /// Assembles params from tensors given in [`tensor_layout`] order.
    pub fn from_tensors(hyper: ConditionerHyper, tensors: Vec<Matrix<T>>) -> Result<Self> {
        hyper.validate()?;
        let layout = tensor_layout(&hyper);
        if tensors.len() != layout.len() {
            return Err(Error::Contract(format!(
                "expected {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, r, c), m) in layout.iter().zip(&tensors) {
            m.check_shape(*r, *c, name)?;
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        let (input_w, input_b, pos) = (next(), next(), next());
        let blocks = (0..hyper.blocks)
            .map(|_| BlockParams {
                ln1_g: next(),
                ln1_b: next(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                ln2_g: next(),
                ln2_b: next(),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            })
            .collect();
        let (head_w, head_b) = (next(), next());
        Ok(Self {
            hyper,
            input_w,
            input_b,
            pos,
            blocks,
            head_w,
            head_b,
        })
    }

    pub fn tensors(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = vec![
            ("input.w".to_string(), &self.input_w),
            ("input.b".to_string(), &self.input_b),
            ("pos".to_string(), &self.pos),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, m) in [
                ("ln1.g", &b.ln1_g),
                ("ln1.b", &b.ln1_b),
                ("attn.wq", &b.wq),
                ("attn.wk", &b.wk),
                ("attn.wv", &b.wv),
                ("attn.wo", &b.wo),
                ("ln2.g", &b.ln2_g),
                ("ln2.b", &b.ln2_b),
                ("mlp.w1", &b.w1),
                ("mlp.b1", &b.b1),
                ("mlp.w2", &b.w2),
                ("mlp.b2", &b.b2),
            ] {
                out.push((format!("block{i}.{name}"), m));
            }
        }
        out.push(("head.w".to_string(), &self.head_w));
        out.push(("head.b".to_string(), &self.head_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix<T>)> {
        let mut out = vec![
            ("input.w".to_string(), &mut self.input_w),
            ("input.b".to_string(), &mut self.input_b),
            ("pos".to_string(), &mut self.pos),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (name, m) in [
                ("ln1.g", &mut b.ln1_g),
                ("ln1.b", &mut b.ln1_b),
                ("attn.wq", &mut b.wq),
                ("attn.wk", &mut b.wk),
                ("attn.wv", &mut b.wv),
                ("attn.wo", &mut b.wo),
                ("ln2.g", &mut b.ln2_g),
                ("ln2.b", &mut b.ln2_b),
                ("mlp.w1", &mut b.w1),
                ("mlp.b1", &mut b.b1),
                ("mlp.w2", &mut b.w2),
                ("mlp.b2", &mut b.b2),
            ] {
                out.push((format!("block{i}.{name}"), m));
            }
        }
        out.push(("head.w".to_string(), &mut self.head_w));
        out.push(("head.b".to_string(), &mut self.head_b));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.data().len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ConditionerParams<U> {
        let mut out = ConditionerParams::<U>::zeros(self.hyper);
        for ((_, dst), (_, src)) in out.tensors_mut().into_iter().zip(self.tensors()) {
            *dst = src.cast();
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    fn scale(&self) -> T {
        T::one() / T::lit(self.hyper.channels as f64).sqrt()
    }

    fn clamp_scale(&self, raw: T) -> T {
        let a = T::lit(self.hyper.scale_clamp);
        a * (raw / a).tanh()
    }

    fn embed_row(&self, y_row: &[T], pos: usize, out: &mut [T]) {
        vec_mat(y_row, &self.input_w, out);
        for ((o, &b), &p) in out.iter_mut().zip(self.input_b.data()).zip(self.pos.row(pos)) {
            *o = *o + b + p;
        }
    }

    fn head_row(&self, h: &[T], raw: &mut [T], s: &mut [T], g: &mut [T]) {
        let d = self.hyper.patch_dim;
        vec_mat(h, &self.head_w, raw);
        for (r, &b) in raw.iter_mut().zip(self.head_b.data()) {
            *r = *r + b;
        }
        for i in 0..d {
            s[i] = self.clamp_scale(raw[i]);
            g[i] = raw[d + i];
        }
    }

    /// Batched evaluation. Allocates its own scratch.
    pub fn forward(&self, y: &Matrix<T>, mask_offset: usize) -> Result<ScaleShift<T>> {
        let mut ws = Workspace::new(&self.hyper);
        self.forward_with(y, mask_offset, &mut ws)
    }

    /// Batched evaluation reusing `ws` across calls (the Jacobi hot loop).
    pub fn forward_with(&self, y: &Matrix<T>, mask_offset: usize, ws: &mut Workspace<T>) -> Result<ScaleShift<T>> {
        let hy = &self.hyper;
        y.check_shape(hy.seq_len, hy.patch_dim, "conditioner input")?;
        if mask_offset > hy.seq_len {
            return Err(Error::Contract(format!(
                "mask offset {mask_offset} exceeds sequence length {}",
                hy.seq_len
            )));
        }
        let (l, d) = (hy.seq_len, hy.patch_dim);
        for i in 0..l {
            self.embed_row(y.row(i), i, ws.content.row_mut(i));
        }
        for (b, blk) in self.blocks.iter().enumerate() {
            for i in 0..l {
                let c_row = ws.content.row(i);
                vec_mat(c_row, &blk.wk, ws.keys[b].row_mut(i));
                vec_mat(c_row, &blk.wv, ws.values[b].row_mut(i));
            }
        }
        let mut out = ScaleShift {
            s: Matrix::zeros(l, d),
            g: Matrix::zeros(l, d),
        };
        let scale = self.scale();
        for i in 0..l {
            let allowed = i.saturating_sub(mask_offset);
            ws.row.h.copy_from_slice(self.pos.row(i));
            for (b, blk) in self.blocks.iter().enumerate() {
                block_row(blk, &mut ws.row, &ws.keys[b], &ws.values[b], allowed, scale);
            }
            let RowScratch { h, raw, .. } = &mut ws.row;
            self.head_row(h, raw, out.s.row_mut(i), out.g.row_mut(i));
        }
        Ok(out)
    }

    /// Evaluates `(s, g)` for position `m + 1` given the `m`-row prefix,
    /// appending the K/V of prefix row `m` to `cache`. The cache must hold
    /// exactly `m - 1` positions (zero when `m = 0`).
    pub fn forward_incremental(&self, cache: &mut KvCache<T>, prefix: &Matrix<T>) -> Result<(Vec<T>, Vec<T>)> {
        let m = prefix.rows();
        if prefix.cols() != self.hyper.patch_dim || m >= self.hyper.seq_len {
            return Err(Error::Contract(format!(
                "prefix {}x{} for sequence {}x{}",
                m,
                prefix.cols(),
                self.hyper.seq_len,
                self.hyper.patch_dim
            )));
        }
        let d = self.hyper.patch_dim;
        let (mut s, mut g) = (vec![T::zero(); d], vec![T::zero(); d]);
        let mut row = RowScratch::new(&self.hyper);
        self.step(cache, &mut row, prefix, m, 0, &mut s, &mut g)?;
        Ok((s, g))
    }

    pub fn new_cache(&self) -> KvCache<T> {
        KvCache::new(&self.hyper)
    }

    #[allow(clippy::too_many_arguments)]
    fn step(
        &self,
        cache: &mut KvCache<T>,
        row: &mut RowScratch<T>,
        y: &Matrix<T>,
        m: usize,
        mask_offset: usize,
        s: &mut [T],
        g: &mut [T],
    ) -> Result<()> {
        let expected = m.saturating_sub(1);
        if cache.len != expected {
            return Err(Error::CacheDesync {
                cached: cache.len,
                prefix: m,
            });
        }
        if m >= 1 {
            let j = m - 1;
            self.embed_row(y.row(j), j, &mut row.content);
            for (b, blk) in self.blocks.iter().enumerate() {
                vec_mat(&row.content, &blk.wk, cache.keys[b].row_mut(j));
                vec_mat(&row.content, &blk.wv, cache.values[b].row_mut(j));
            }
            cache.len = m;
        }
        let allowed = m.saturating_sub(mask_offset);
        let scale = self.scale();
        row.h.copy_from_slice(self.pos.row(m));
        for (b, blk) in self.blocks.iter().enumerate() {
            block_row(blk, row, &cache.keys[b], &cache.values[b], allowed, scale);
        }
        let RowScratch { h, raw, .. } = row;
        self.head_row(h, raw, s, g);
        Ok(())
    }

    /// Forward pass that records every intermediate needed by [`Self::backward`].
    pub fn forward_tape(&self, y: &Matrix<T>, mask_offset: usize) -> Result<Tape<T>> {
        let hy = &self.hyper;
        y.check_shape(hy.seq_len, hy.patch_dim, "conditioner input")?;
        let (l, d, c) = (hy.seq_len, hy.patch_dim, hy.channels);
        let mut content = Matrix::zeros(l, c);
        for i in 0..l {
            self.embed_row(y.row(i), i, content.row_mut(i));
        }
        let scale = self.scale();
        let mut h = self.pos.clone();
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let mut t = BlockTape::new(l, c);
            t.h_in = h.clone();
            for i in 0..l {
                vec_mat(content.row(i), &blk.wk, t.k.row_mut(i));
                vec_mat(content.row(i), &blk.wv, t.v.row_mut(i));
            }
            let mut tmp = vec![T::zero(); c];
            for i in 0..l {
                let allowed = i.saturating_sub(mask_offset);
                t.rstd1[i] = layer_norm_row(h.row(i), &blk.ln1_g, &blk.ln1_b, t.xhat1.row_mut(i), t.a.row_mut(i));
                vec_mat(t.a.row(i), &blk.wq, t.q.row_mut(i));
                attend_row(
                    t.q.row(i),
                    &t.k,
                    &t.v,
                    allowed,
                    scale,
                    &mut t.probs.row_mut(i)[..allowed],
                    t.att.row_mut(i),
                );
                vec_mat(t.att.row(i), &blk.wo, &mut tmp);
                let hr = h.row_mut(i);
                for (x, &u) in hr.iter_mut().zip(&tmp) {
                    *x = *x + u;
                }
                t.h_mid.row_mut(i).copy_from_slice(hr);
                t.rstd2[i] = layer_norm_row(hr, &blk.ln2_g, &blk.ln2_b, t.xhat2.row_mut(i), t.m.row_mut(i));
                vec_mat(t.m.row(i), &blk.w1, t.z1.row_mut(i));
                let (z, f) = (t.z1.row_mut(i), t.f.row_mut(i));
                for ((zv, fv), &b) in z.iter_mut().zip(f.iter_mut()).zip(blk.b1.data()) {
                    *zv = *zv + b;
                    *fv = gelu(*zv);
                }
                vec_mat(t.f.row(i), &blk.w2, &mut tmp);
                for ((x, &u), &b) in h.row_mut(i).iter_mut().zip(&tmp).zip(blk.b2.data()) {
                    *x = *x + (u + b);
                }
            }
            blocks.push(t);
        }
        let mut out = ScaleShift {
            s: Matrix::zeros(l, d),
            g: Matrix::zeros(l, d),
        };
        let mut raw = vec![T::zero(); 2 * d];
        for i in 0..l {
            self.head_row(h.row(i), &mut raw, out.s.row_mut(i), out.g.row_mut(i));
        }
        Ok(Tape {
            mask_offset,
            y: y.clone(),
            content,
            blocks,
            h_final: h,
            out,
        })
    }

    /// Reverse-mode gradients of the taped forward for cotangents `(dS, dG)`.
    /// Returns parameter gradients (same layout as `self`) and `dY`.
    pub fn backward(
        &self,
        tape: &Tape<T>,
        ds: &Matrix<T>,
        dg: &Matrix<T>,
    ) -> Result<(ConditionerParams<T>, Matrix<T>)> {
        let hy = &self.hyper;
        let (l, d, c) = (hy.seq_len, hy.patch_dim, hy.channels);
        ds.check_shape(l, d, "dS")?;
        dg.check_shape(l, d, "dG")?;
        let mut grads = ConditionerParams::zeros(*hy);
        let alpha = T::lit(hy.scale_clamp);

        let mut dout = Matrix::zeros(l, 2 * d);
        for i in 0..l {
            for k in 0..d {
                let s = tape.out.s.get(i, k) / alpha;
                dout.set(i, k, ds.get(i, k) * (T::one() - s * s));
                dout.set(i, d + k, dg.get(i, k));
            }
        }
        acc_tn(&tape.h_final, &dout, &mut grads.head_w);
        acc_colsum(&dout, &mut grads.head_b);
        let mut dh = mul_nt(&dout, &self.head_w);

        let mut dcontent = Matrix::zeros(l, c);
        let scale = self.scale();
        for (bi, blk) in self.blocks.iter().enumerate().rev() {
            let t = &tape.blocks[bi];
            let gb = &mut grads.blocks[bi];

            // h_out = h_mid + gelu(m W1 + b1) W2 + b2
            acc_tn(&t.f, &dh, &mut gb.w2);
            acc_colsum(&dh, &mut gb.b2);
            let mut dz = mul_nt(&dh, &blk.w2);
            for (g, &z) in dz.data_mut().iter_mut().zip(t.z1.data()) {
                *g = *g * gelu_grad(z);
            }
            acc_tn(&t.m, &dz, &mut gb.w1);
            acc_colsum(&dz, &mut gb.b1);
            let dm = mul_nt(&dz, &blk.w1);
            let mut dh_mid = dh;
            layer_norm_backward(
                &dm,
                &t.xhat2,
                &t.rstd2,
                &blk.ln2_g,
                &mut gb.ln2_g,
                &mut gb.ln2_b,
                &mut dh_mid,
            );

            // h_mid = h_in + att Wo
            acc_tn(&t.att, &dh_mid, &mut gb.wo);
            let datt = mul_nt(&dh_mid, &blk.wo);
            let mut dq = Matrix::zeros(l, c);
            let mut dk = Matrix::zeros(l, c);
            let mut dv = Matrix::zeros(l, c);
            let mut dp = vec![T::zero(); l];
            for i in 0..l {
                let n = i.saturating_sub(tape.mask_offset);
                if n == 0 {
                    continue;
                }
                let p = &t.probs.row(i)[..n];
                let da = datt.row(i);
                for j in 0..n {
                    dp[j] = dot(da, t.v.row(j));
                    let vj = dv.row_mut(j);
                    for (x, &g) in vj.iter_mut().zip(da) {
                        *x = *x + p[j] * g;
                    }
                }
                let mean: T = (0..n).map(|j| p[j] * dp[j]).sum();
                for j in 0..n {
                    let dscore = p[j] * (dp[j] - mean) * scale;
                    if dscore == T::zero() {
                        continue;
                    }
                    let (qi, kj) = (t.q.row(i), t.k.row(j));
                    for (x, &k) in dq.row_mut(i).iter_mut().zip(kj) {
                        *x = *x + dscore * k;
                    }
                    for (x, &q) in dk.row_mut(j).iter_mut().zip(qi) {
                        *x = *x + dscore * q;
                    }
                }
            }
            acc_tn(&t.a, &dq, &mut gb.wq);
            acc_tn(&tape.content, &dk, &mut gb.wk);
            acc_tn(&tape.content, &dv, &mut gb.wv);
            dcontent.add_assign(&mul_nt(&dk, &blk.wk));
            dcontent.add_assign(&mul_nt(&dv, &blk.wv));
            let da = mul_nt(&dq, &blk.wq);
            let mut dh_in = dh_mid;
            layer_norm_backward(
                &da,
                &t.xhat1,
                &t.rstd1,
                &blk.ln1_g,
                &mut gb.ln1_g,
                &mut gb.ln1_b,
                &mut dh_in,
            );
            dh = dh_in;
        }
        // query stream starts at pos; content = y W_in + b_in + pos
        grads.pos.add_assign(&dh);
        grads.pos.add_assign(&dcontent);
        acc_tn(&tape.y, &dcontent, &mut grads.input_w);
        acc_colsum(&dcontent, &mut grads.input_b);
        let dy = mul_nt(&dcontent, &self.input_w);
        Ok((grads, dy))
    }
}

impl<T: Real> Conditioner for ConditionerParams<T> {
    type Scalar = T;

    fn seq_len(&self) -> usize {
        self.hyper.seq_len
    }

    fn patch_dim(&self) -> usize {
        self.hyper.patch_dim
    }

    fn forward(&self, y: &Matrix<T>, mask_offset: usize) -> Result<ScaleShift<T>> {
        ConditionerParams::forward(self, y, mask_offset)
    }

    fn stream(&self, mask_offset: usize) -> Box<dyn ConditionerStream<T> + '_> {
        Box::new(NetworkStream {
            params: self,
            cache: self.new_cache(),
            row: RowScratch::new(&self.hyper),
            mask_offset,
        })
    }
}

struct NetworkStream<'a, T: Real> {
    params: &'a ConditionerParams<T>,
    cache: KvCache<T>,
    row: RowScratch<T>,
    mask_offset: usize,
}

impl<T: Real> ConditionerStream<T> for NetworkStream<'_, T> {
    fn next(&mut self, y: &Matrix<T>, m: usize, s: &mut [T], g: &mut [T]) -> Result<()> {
        self.params
            .step(&mut self.cache, &mut self.row, y, m, self.mask_offset, s, g)
    }
}

/// Keys and values of the ingested prefix rows, one pair of `L×C` buffers
/// per block. Owned by exactly one decode stream.
#[derive(Clone, Debug)]
pub struct KvCache<T: Real> {
    keys: Vec<Matrix<T>>,
    values: Vec<Matrix<T>>,
    len: usize,
}

impl<T: Real> KvCache<T> {
    pub fn new(h: &ConditionerHyper) -> Self {
        Self {
            keys: (0..h.blocks).map(|_| Matrix::zeros(h.seq_len, h.channels)).collect(),
            values: (0..h.blocks).map(|_| Matrix::zeros(h.seq_len, h.channels)).collect(),
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn key(&self, block: usize, pos: usize) -> &[T] {
        assert!(pos < self.len);
        self.keys[block].row(pos)
    }

    pub fn value(&self, block: usize, pos: usize) -> &[T] {
        assert!(pos < self.len);
        self.values[block].row(pos)
    }
}

struct RowScratch<T> {
    content: Vec<T>,
    h: Vec<T>,
    a: Vec<T>,
    xhat: Vec<T>,
    q: Vec<T>,
    att: Vec<T>,
    tmp: Vec<T>,
    hidden: Vec<T>,
    probs: Vec<T>,
    raw: Vec<T>,
}

impl<T: Real> RowScratch<T> {
    fn new(h: &ConditionerHyper) -> Self {
        let (c, l, d) = (h.channels, h.seq_len, h.patch_dim);
        let z = |n| vec![T::zero(); n];
        Self {
            content: z(c),
            h: z(c),
            a: z(c),
            xhat: z(c),
            q: z(c),
            att: z(c),
            tmp: z(c),
            hidden: z(4 * c),
            probs: z(l),
            raw: z(2 * d),
        }
    }
}

/// Reusable buffers for batched evaluation.
pub struct Workspace<T: Real> {
    content: Matrix<T>,
    keys: Vec<Matrix<T>>,
    values: Vec<Matrix<T>>,
    row: RowScratch<T>,
}

impl<T: Real> Workspace<T> {
    pub fn new(h: &ConditionerHyper) -> Self {
        Self {
            content: Matrix::zeros(h.seq_len, h.channels),
            keys: (0..h.blocks).map(|_| Matrix::zeros(h.seq_len, h.channels)).collect(),
            values: (0..h.blocks).map(|_| Matrix::zeros(h.seq_len, h.channels)).collect(),
            row: RowScratch::new(h),
        }
    }
}

/// One block applied to a single query-stream row, in place.
fn block_row<T: Real>(
    blk: &BlockParams<T>,
    r: &mut RowScratch<T>,
    keys: &Matrix<T>,
    values: &Matrix<T>,
    allowed: usize,
    scale: T,
) {
    layer_norm_row(&r.h, &blk.ln1_g, &blk.ln1_b, &mut r.xhat, &mut r.a);
    vec_mat(&r.a, &blk.wq, &mut r.q);
    attend_row(&r.q, keys, values, allowed, scale, &mut r.probs[..allowed], &mut r.att);
    vec_mat(&r.att, &blk.wo, &mut r.tmp);
    for (x, &u) in r.h.iter_mut().zip(&r.tmp) {
        *x = *x + u;
    }
    layer_norm_row(&r.h, &blk.ln2_g, &blk.ln2_b, &mut r.xhat, &mut r.a);
    vec_mat(&r.a, &blk.w1, &mut r.hidden);
    for (z, &b) in r.hidden.iter_mut().zip(blk.b1.data()) {
        *z = gelu(*z + b);
    }
    vec_mat(&r.hidden, &blk.w2, &mut r.tmp);
    for ((x, &u), &b) in r.h.iter_mut().zip(&r.tmp).zip(blk.b2.data()) {
        *x = *x + (u + b);
    }
}

/// Writes `xhat` and `out = xhat·g + b`; returns the reciprocal std.
fn layer_norm_row<T: Real>(x: &[T], g: &Matrix<T>, b: &Matrix<T>, xhat: &mut [T], out: &mut [T]) -> T {
    let n = T::lit(x.len() as f64);
    let mean = x.iter().copied().sum::<T>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let rstd = T::one() / (var + T::lit(LN_EPS)).sqrt();
    for (((xh, o), &v), (&gv, &bv)) in xhat
        .iter_mut()
        .zip(out.iter_mut())
        .zip(x)
        .zip(g.data().iter().zip(b.data()))
    {
        *xh = (v - mean) * rstd;
        *o = *xh * gv + bv;
    }
    rstd
}

/// Softmax attention of `q` over the first `n` key/value rows. Zero output
/// when `n == 0`.
fn attend_row<T: Real>(
    q: &[T],
    keys: &Matrix<T>,
    values: &Matrix<T>,
    n: usize,
    scale: T,
    probs: &mut [T],
    out: &mut [T],
) {
    out.iter_mut().for_each(|o| *o = T::zero());
    if n == 0 {
        return;
    }
    let mut max = T::neg_infinity();
    for (j, p) in probs.iter_mut().enumerate() {
        *p = dot(q, keys.row(j)) * scale;
        max = max.max(*p);
    }
    let mut total = T::zero();
    for p in probs.iter_mut() {
        *p = (*p - max).exp();
        total = total + *p;
    }
    for (j, p) in probs.iter_mut().enumerate() {
        *p = *p / total;
        for (o, &v) in out.iter_mut().zip(values.row(j)) {
            *o = *o + *p * v;
        }
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[inline]
fn gelu<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (T::lit(GELU_K) * (x + T::lit(GELU_C) * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let t = (T::lit(GELU_K) * (x + T::lit(GELU_C) * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * T::lit(GELU_K) * (T::one() + T::lit(3.0 * GELU_C) * x * x)
}

/// `out += aᵀ b`.
fn acc_tn<T: Real>(a: &Matrix<T>, b: &Matrix<T>, out: &mut Matrix<T>) {
    debug_assert_eq!(a.rows(), b.rows());
    for r in 0..a.rows() {
        let brow = b.row(r);
        for (k, &ak) in a.row(r).iter().enumerate() {
            if ak == T::zero() {
                continue;
            }
            for (o, &bv) in out.row_mut(k).iter_mut().zip(brow) {
                *o = *o + ak * bv;
            }
        }
    }
}

/// `a bᵀ`.
fn mul_nt<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let bt = b.transpose();
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        vec_mat(a.row(i), &bt, out.row_mut(i));
    }
    out
}

fn acc_colsum<T: Real>(a: &Matrix<T>, out: &mut Matrix<T>) {
    for r in 0..a.rows() {
        for (o, &v) in out.data_mut().iter_mut().zip(a.row(r)) {
            *o = *o + v;
        }
    }
}

fn layer_norm_backward<T: Real>(
    dout: &Matrix<T>,
    xhat: &Matrix<T>,
    rstd: &[T],
    gain: &Matrix<T>,
    dgain: &mut Matrix<T>,
    dbias: &mut Matrix<T>,
    dx: &mut Matrix<T>,
) {
    let n = T::lit(dout.cols() as f64);
    let mut dxhat = vec![T::zero(); dout.cols()];
    for i in 0..dout.rows() {
        let (dor, xr) = (dout.row(i), xhat.row(i));
        for k in 0..dor.len() {
            dgain.data_mut()[k] = dgain.data()[k] + dor[k] * xr[k];
            dbias.data_mut()[k] = dbias.data()[k] + dor[k];
            dxhat[k] = dor[k] * gain.data()[k];
        }
        let mean = dxhat.iter().copied().sum::<T>() / n;
        let mean_x = dxhat.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>() / n;
        for (k, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = *o + rstd[i] * (dxhat[k] - mean - xr[k] * mean_x);
        }
    }
}

pub struct BlockTape<T: Real> {
    h_in: Matrix<T>,
    xhat1: Matrix<T>,
    rstd1: Vec<T>,
    a: Matrix<T>,
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    probs: Matrix<T>,
    att: Matrix<T>,
    h_mid: Matrix<T>,
    xhat2: Matrix<T>,
    rstd2: Vec<T>,
    m: Matrix<T>,
    z1: Matrix<T>,
    f: Matrix<T>,
}

impl<T: Real> BlockTape<T> {
    fn new(l: usize, c: usize) -> Self {
        let z = Matrix::zeros;
        Self {
            h_in: z(l, c),
            xhat1: z(l, c),
            rstd1: vec![T::zero(); l],
            a: z(l, c),
            q: z(l, c),
            k: z(l, c),
            v: z(l, c),
            probs: z(l, l),
            att: z(l, c),
            h_mid: z(l, c),
            xhat2: z(l, c),
            rstd2: vec![T::zero(); l],
            m: z(l, c),
            z1: z(l, 4 * c),
            f: z(l, 4 * c),
        }
    }
}

/// Intermediates of one taped forward pass.
pub struct Tape<T: Real> {
    mask_offset: usize,
    y: Matrix<T>,
    content: Matrix<T>,
    blocks: Vec<BlockTape<T>>,
    h_final: Matrix<T>,
    pub out: ScaleShift<T>,
}

/// Analytic conditioner for hand-checkable fixtures: `g_l` is the sum of the
/// visible prefix rows and `s_l` is a constant (zero by default) for `l ≥ 2`.
#[derive(Clone, Debug)]
pub struct PrefixSum<T> {
    seq_len: usize,
    patch_dim: usize,
    log_scale: f64,
    _t: PhantomData<fn() -> T>,
}

impl<T: Real> PrefixSum<T> {
    pub fn new(seq_len: usize, patch_dim: usize) -> Self {
        Self::with_log_scale(seq_len, patch_dim, 0.0)
    }

    pub fn with_log_scale(seq_len: usize, patch_dim: usize, log_scale: f64) -> Self {
        Self {
            seq_len,
            patch_dim,
            log_scale,
            _t: PhantomData,
        }
    }
}

impl<T: Real> Conditioner for PrefixSum<T> {
    type Scalar = T;

    fn seq_len(&self) -> usize {
        self.seq_len
    }

    fn patch_dim(&self) -> usize {
        self.patch_dim
    }

    fn forward(&self, y: &Matrix<T>, mask_offset: usize) -> Result<ScaleShift<T>> {
        y.check_shape(self.seq_len, self.patch_dim, "prefix-sum input")?;
        let (l, d) = (self.seq_len, self.patch_dim);
        let mut s = Matrix::zeros(l, d);
        let mut g = Matrix::zeros(l, d);
        for i in 0..l {
            if i >= 1 {
                s.row_mut(i).iter_mut().for_each(|v| *v = T::lit(self.log_scale));
            }
            for j in 0..i.saturating_sub(mask_offset) {
                for (acc, &v) in g.row_mut(i).iter_mut().zip(y.row(j)) {
                    *acc = *acc + v;
                }
            }
        }
        Ok(ScaleShift { s, g })
    }

    fn stream(&self, mask_offset: usize) -> Box<dyn ConditionerStream<T> + '_> {
        Box::new(RecomputeStream {
            cond: self,
            mask_offset,
        })
    }
}

/// Conditioner that ignores its input: `s = g = 0` everywhere.
#[derive(Clone, Debug)]
pub struct IdentityConditioner<T> {
    seq_len: usize,
    patch_dim: usize,
    _t: PhantomData<fn() -> T>,
}

impl<T: Real> IdentityConditioner<T> {
    pub fn new(seq_len: usize, patch_dim: usize) -> Self {
        Self {
            seq_len,
            patch_dim,
            _t: PhantomData,
        }
    }
}

impl<T: Real> Conditioner for IdentityConditioner<T> {
    type Scalar = T;

    fn seq_len(&self) -> usize {
        self.seq_len
    }

    fn patch_dim(&self) -> usize {
        self.patch_dim
    }

    fn forward(&self, y: &Matrix<T>, _mask_offset: usize) -> Result<ScaleShift<T>> {
        y.check_shape(self.seq_len, self.patch_dim, "identity input")?;
        Ok(ScaleShift {
            s: Matrix::zeros(self.seq_len, self.patch_dim),
            g: Matrix::zeros(self.seq_len, self.patch_dim),
        })
    }

    fn stream(&self, mask_offset: usize) -> Box<dyn ConditionerStream<T> + '_> {
        Box::new(RecomputeStream {
            cond: self,
            mask_offset,
        })
    }
}

/// Streams by re-running the batched forward on the zero-padded prefix.
/// Quadratic, but exact for any causal conditioner; used by the fixtures.
struct RecomputeStream<'a, C> {
    cond: &'a C,
    mask_offset: usize,
}

impl<C: Conditioner> ConditionerStream<C::Scalar> for RecomputeStream<'_, C> {
    fn next(&mut self, y: &Matrix<C::Scalar>, m: usize, s: &mut [C::Scalar], g: &mut [C::Scalar]) -> Result<()> {
        let mut padded = Matrix::zeros(y.rows(), y.cols());
        for j in 0..m {
            padded.row_mut(j).copy_from_slice(y.row(j));
        }
        let out = self.cond.forward(&padded, self.mask_offset)?;
        s.copy_from_slice(out.s.row(m));
        g.copy_from_slice(out.g.row(m));
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hyper(l: usize, d: usize, c: usize, b: usize) -> ConditionerHyper {
        ConditionerHyper {
            seq_len: l,
            patch_dim: d,
            channels: c,
            blocks: b,
            scale_clamp: 2.0,
        }
    }

    /// Random params with a live head so every path is exercised.
    pub(crate) fn random_params<T: Real>(seed: u64, h: ConditionerHyper, std: f64) -> ConditionerParams<T> {
        ConditionerParams::randomized(&mut Rng::new(seed), h, std).unwrap()
    }

    #[test]
    fn init_has_zero_head_and_is_deterministic() {
        let h = hyper(8, 4, 16, 2);
        let a = ConditionerParams::<f32>::init(&mut Rng::new(7), h).unwrap();
        let b = ConditionerParams::<f32>::init(&mut Rng::new(7), h).unwrap();
        assert_eq!(a, b);
        assert!(a.head_w.data().iter().all(|&x| x == 0.0));
        assert!(a.head_b.data().iter().all(|&x| x == 0.0));
        assert!(a.pos.data().iter().any(|&x| x != 0.0));
        assert!(a.blocks[0].ln1_g.data().iter().all(|&x| x == 1.0));

        let y: Matrix<f32> = Rng::new(1).normal_matrix(8, 4, 1.0);
        let out = a.forward(&y, 0).unwrap();
        assert!(out.s.data().iter().all(|&x| x == 0.0));
        assert!(out.g.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn invalid_hyper_rejected() {
        assert!(hyper(0, 1, 1, 1).validate().is_err());
        assert!(hyper(4, 4, 2, 1).validate().is_err());
        assert!(hyper(4, 2, 4, 0).validate().is_err());
        let mut h = hyper(4, 2, 4, 1);
        h.scale_clamp = 0.0;
        assert!(h.validate().is_err());
    }

    #[test]
    fn first_row_ignores_input_and_scale_is_bounded() {
        let h = hyper(6, 3, 8, 2);
        let p = random_params::<f64>(11, h, 0.8);
        let mut rng = Rng::new(5);
        let a = p.forward(&rng.normal_matrix(6, 3, 1.0), 0).unwrap();
        let b = p.forward(&rng.normal_matrix(6, 3, 1.0), 0).unwrap();
        assert_eq!(a.s.row(0), b.s.row(0));
        assert_eq!(a.g.row(0), b.g.row(0));
        assert!(a.s.data().iter().all(|v| v.abs() <= 2.0));
    }

    #[test]
    fn strict_causality_by_perturbation() {
        let h = hyper(4, 2, 8, 2);
        let p = random_params::<f32>(3, h, 0.5);
        let y: Matrix<f32> = Rng::new(4).normal_matrix(4, 2, 1.0);
        for o in 0..3 {
            let base = p.forward(&y, o).unwrap();
            for j in 0..4 {
                let mut yp = y.clone();
                yp.row_mut(j).iter_mut().for_each(|v| *v += 1.5);
                let pert = p.forward(&yp, o).unwrap();
                for l in 0..4 {
                    // row l (0-based) may only see rows < l - o
                    if j + o >= l {
                        assert_eq!(base.s.row(l), pert.s.row(l), "o={o} j={j} l={l}");
                        assert_eq!(base.g.row(l), pert.g.row(l), "o={o} j={j} l={l}");
                    }
                }
            }
        }
    }

    #[test]
    fn incremental_matches_batched() {
        let h = hyper(8, 3, 12, 2);
        let p = random_params::<f32>(21, h, 0.4);
        let y: Matrix<f32> = Rng::new(8).normal_matrix(8, 3, 1.0);
        let full = p.forward(&y, 0).unwrap();
        let mut cache = p.new_cache();
        for m in 0..8 {
            let prefix = Matrix::from_vec(m, 3, y.data()[..m * 3].to_vec()).unwrap();
            let (s, g) = p.forward_incremental(&mut cache, &prefix).unwrap();
            assert_eq!(cache.len(), m);
            for k in 0..3 {
                assert!((s[k] - full.s.get(m, k)).abs() <= 1e-6);
                assert!((g[k] - full.g.get(m, k)).abs() <= 1e-6);
            }
            if m >= 1 {
                // cached keys equal what a full pass over rows 0..m produces
                let tape = p.forward_tape(&y, 0).unwrap();
                for j in 0..m {
                    assert_eq!(cache.key(1, j), tape.blocks[1].k.row(j));
                    assert_eq!(cache.value(0, j), tape.blocks[0].v.row(j));
                }
            }
        }
    }

    #[test]
    fn cache_desync_detected() {
        let h = hyper(8, 2, 8, 1);
        let p = random_params::<f32>(2, h, 0.3);
        let mut cache = p.new_cache();
        let prefix: Matrix<f32> = Rng::new(1).normal_matrix(3, 2, 1.0);
        assert!(matches!(
            p.forward_incremental(&mut cache, &prefix),
            Err(Error::CacheDesync { cached: 0, prefix: 3 })
        ));
    }

    #[test]
    fn taped_forward_matches_plain_forward() {
        let h = hyper(5, 2, 8, 2);
        let p = random_params::<f32>(9, h, 0.5);
        let y: Matrix<f32> = Rng::new(2).normal_matrix(5, 2, 1.0);
        for o in [0, 2] {
            assert_eq!(p.forward(&y, o).unwrap(), p.forward_tape(&y, o).unwrap().out);
        }
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let h = hyper(3, 2, 4, 1);
        let p = random_params::<f64>(1, h, 0.5);
        let y: Matrix<f64> = Rng::new(3).normal_matrix(3, 2, 1.0);
        let tape = p.forward_tape(&y, 0).unwrap();
        let z = Matrix::zeros(3, 2);
        let (gp, dy) = p.backward(&tape, &z, &z).unwrap();
        assert!(gp.tensors().iter().all(|(_, m)| m.data().iter().all(|&v| v == 0.0)));
        assert!(dy.data().iter().all(|&v| v == 0.0));
    }

    fn objective(p: &ConditionerParams<f64>, y: &Matrix<f64>, ws: &Matrix<f64>, wg: &Matrix<f64>) -> f64 {
        let out = p.forward(y, 0).unwrap();
        out.s.data().iter().zip(ws.data()).map(|(a, b)| a * b).sum::<f64>()
            + out.g.data().iter().zip(wg.data()).map(|(a, b)| a * b).sum::<f64>()
    }

    #[test]
    fn gradients_match_central_differences() {
        let h = hyper(3, 2, 4, 1);
        let p = random_params::<f64>(17, h, 0.6);
        assert!(p.num_params() <= 2000);
        let mut rng = Rng::new(23);
        let y: Matrix<f64> = rng.normal_matrix(3, 2, 1.0);
        let ws: Matrix<f64> = rng.normal_matrix(3, 2, 1.0);
        let wg: Matrix<f64> = rng.normal_matrix(3, 2, 1.0);
        let tape = p.forward_tape(&y, 0).unwrap();
        let (grads, dy) = p.backward(&tape, &ws, &wg).unwrap();
        let eps = 1e-5;

        let mut worst = 0.0f64;
        let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
        for (ti, name) in names.iter().enumerate() {
            let n = p.tensors()[ti].1.data().len();
            for e in 0..n {
                let bump = |delta: f64| {
                    let mut q = p.clone();
                    q.tensors_mut()[ti].1.data_mut()[e] += delta;
                    objective(&q, &y, &ws, &wg)
                };
                let fd = (bump(eps) - bump(-eps)) / (2.0 * eps);
                let an = grads.tensors()[ti].1.data()[e];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
                worst = worst.max(rel);
                assert!(rel < 1e-4, "{name}[{e}]: fd {fd} analytic {an}");
            }
        }
        for e in 0..6 {
            let mut yp = y.clone();
            yp.data_mut()[e] += eps;
            let mut ym = y.clone();
            ym.data_mut()[e] -= eps;
            let fd = (objective(&p, &yp, &ws, &wg) - objective(&p, &ym, &ws, &wg)) / (2.0 * eps);
            let an = dy.data()[e];
            assert!((fd - an).abs() / fd.abs().max(an.abs()).max(1e-3) < 1e-4, "dy[{e}]");
        }
        assert!(worst < 1e-4);
    }

    #[test]
    fn input_gradient_is_strictly_causal() {
        let h = hyper(4, 2, 6, 2);
        let p = random_params::<f64>(5, h, 0.6);
        let y: Matrix<f64> = Rng::new(6).normal_matrix(4, 2, 1.0);
        let tape = p.forward_tape(&y, 0).unwrap();
        for l in 0..4 {
            let mut ds = Matrix::zeros(4, 2);
            let mut dg = Matrix::zeros(4, 2);
            ds.row_mut(l).iter_mut().for_each(|v| *v = 1.0);
            dg.row_mut(l).iter_mut().for_each(|v| *v = -0.5);
            let (_, dy) = p.backward(&tape, &ds, &dg).unwrap();
            for j in l..4 {
                assert!(dy.row(j).iter().all(|&v| v == 0.0), "l={l} j={j}");
            }
        }
    }

    #[test]
    fn prefix_sum_stub_rows() {
        let c = PrefixSum::<f64>::new(3, 1);
        let y = Matrix::from_rows(&[[1.0], [2.0], [4.0]]);
        let out = c.forward(&y, 0).unwrap();
        assert_eq!(out.g.data(), &[0.0, 1.0, 3.0]);
        assert_eq!(c.forward(&y, 1).unwrap().g.data(), &[0.0, 0.0, 1.0]);
    }
}
