//! Fully-connected network with exact first derivatives and the mixed
//! parameter/tangent derivative needed by the critic update.
//!
//! All parameters live in one flat buffer. Layer `k` owns a row-major
//! `out × in` weight block followed by its `out` biases, so a
//! [`ParamGradient`] is just another buffer of the same length and optimizer
//! updates are element-wise.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::activation::Activation;
use crate::error::{check_len, Error, Result};

static NEXT_TOKEN: AtomicU64 = AtomicU64::new(1);

fn fresh_token() -> u64 {
    NEXT_TOKEN.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input_width: usize,
    pub output_width: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(input_width: usize, output_width: usize, activation: Activation) -> Self {
        Self {
            input_width,
            output_width,
            activation,
        }
    }

    fn param_count(&self) -> usize {
        self.output_width * (self.input_width + 1)
    }
}

/// Checks widths, activations and chaining of a layer stack.
pub fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::Config("network needs at least one layer".into()));
    }
    for (k, s) in specs.iter().enumerate() {
        if s.input_width == 0 || s.output_width == 0 {
            return Err(Error::Config(format!("layer {k}: widths must be >= 1")));
        }
        s.activation.validate()?;
    }
    for (k, pair) in specs.windows(2).enumerate() {
        if pair[0].output_width != pair[1].input_width {
            return Err(Error::Config(format!(
                "layer {} outputs {} values but layer {} expects {}",
                k,
                pair[0].output_width,
                k + 1,
                pair[1].input_width
            )));
        }
    }
    Ok(())
}

/// Weights and biases of a feed-forward network. Equality compares layout
/// and values; the initialization seed is metadata.
#[derive(Debug, Clone)]
pub struct MlpParams {
    specs: Vec<LayerSpec>,
    offsets: Vec<usize>,
    data: Vec<f64>,
    seed: u64,
    token: u64,
}

impl PartialEq for MlpParams {
    fn eq(&self, other: &Self) -> bool {
        self.specs == other.specs && self.data == other.data
    }
}

fn layout(specs: &[LayerSpec]) -> (Vec<usize>, usize) {
    let mut offsets = Vec::with_capacity(specs.len());
    let mut total = 0;
    for s in specs {
        offsets.push(total);
        total += s.param_count();
    }
    (offsets, total)
}

impl MlpParams {
    /// Glorot-uniform weights, zero biases, reproducible from `seed`.
    pub fn init(specs: &[LayerSpec], seed: u64) -> Result<Self> {
        validate_specs(specs)?;
        let (offsets, total) = layout(specs);
        let mut data = vec![0.0; total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (s, &off) in specs.iter().zip(&offsets) {
            let limit = (6.0 / (s.input_width + s.output_width) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
            for w in &mut data[off..off + s.input_width * s.output_width] {
                *w = dist.sample(&mut rng);
            }
        }
        Ok(Self {
            specs: specs.to_vec(),
            offsets,
            data,
            seed,
            token: fresh_token(),
        })
    }

    /// Builds parameters from a flat buffer laid out layer by layer
    /// (row-major weights, then biases).
    pub fn from_flat(specs: &[LayerSpec], data: Vec<f64>, seed: u64) -> Result<Self> {
        validate_specs(specs)?;
        let (offsets, total) = layout(specs);
        check_len("flat parameter buffer", total, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("non-finite parameter".into()));
        }
        Ok(Self {
            specs: specs.to_vec(),
            offsets,
            data,
            seed,
            token: fresh_token(),
        })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_width(&self) -> usize {
        self.specs[0].input_width
    }

    pub fn output_width(&self) -> usize {
        self.specs[self.specs.len() - 1].output_width
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    pub fn num_layers(&self) -> usize {
        self.specs.len()
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the flat buffer. Invalidates outstanding caches.
    pub fn flat_mut(&mut self) -> &mut [f64] {
        self.token = fresh_token();
        &mut self.data
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        let s = &self.specs[layer];
        let off = self.offsets[layer];
        &self.data[off..off + s.input_width * s.output_width]
    }

    #[cfg(test)]
    pub(crate) fn offset(&self, layer: usize) -> usize {
        self.offsets[layer]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        let s = &self.specs[layer];
        let off = self.offsets[layer] + s.input_width * s.output_width;
        &self.data[off..off + s.output_width]
    }

    fn max_width(&self) -> usize {
        self.specs
            .iter()
            .map(|s| s.input_width.max(s.output_width))
            .max()
            .unwrap_or(0)
    }

    /// Forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        check_len("network input", self.input_width(), input.len())?;
        let mut acts = Vec::with_capacity(self.specs.len() + 1);
        let mut pre = Vec::with_capacity(self.specs.len());
        acts.push(input.to_vec());
        for k in 0..self.specs.len() {
            let s = self.specs[k];
            let z = affine(self.weights(k), self.bias(k), &acts[k], s.output_width);
            let a = z.iter().map(|&v| s.activation.apply(v)).collect();
            pre.push(z);
            acts.push(a);
        }
        let out = acts.last().cloned().unwrap_or_default();
        Ok((
            out,
            ForwardCache {
                token: self.token,
                acts,
                pre,
            },
        ))
    }

    /// Output only, no cache. Allocation is limited to two scratch rows.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>> {
        check_len("network input", self.input_width(), input.len())?;
        let w = self.max_width();
        let mut cur = Vec::with_capacity(w);
        let mut next = Vec::with_capacity(w);
        cur.extend_from_slice(input);
        for k in 0..self.specs.len() {
            let s = self.specs[k];
            affine_into(self.weights(k), self.bias(k), &cur, &mut next);
            for v in next.iter_mut() {
                *v = s.activation.apply(*v);
            }
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    /// Scalar output for single-output networks.
    pub fn predict_scalar(&self, input: &[f64]) -> Result<f64> {
        self.require_scalar()?;
        Ok(self.predict(input)?[0])
    }

    fn require_scalar(&self) -> Result<()> {
        if self.output_width() != 1 {
            return Err(Error::Contract(format!(
                "operation needs a scalar-output network, output width is {}",
                self.output_width()
            )));
        }
        Ok(())
    }

    fn check_cache(&self, cache: &ForwardCache) -> Result<()> {
        if cache.token != self.token || cache.pre.len() != self.specs.len() {
            return Err(Error::Contract(
                "forward cache does not belong to these parameters".into(),
            ));
        }
        Ok(())
    }

    /// Gradient of `upstream · output` with respect to every parameter.
    pub fn param_grad(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<ParamGradient> {
        self.check_cache(cache)?;
        check_len("upstream gradient", self.output_width(), upstream.len())?;
        let mut grad = ParamGradient::zeros_like(self);
        self.backprop(cache, upstream, Some(&mut grad.data), None);
        Ok(grad)
    }

    /// Gradient of the scalar output with respect to the input.
    pub fn input_grad(&self, cache: &ForwardCache) -> Result<Vec<f64>> {
        self.check_cache(cache)?;
        self.require_scalar()?;
        let mut gx = vec![0.0; self.input_width()];
        self.backprop(cache, &[1.0], None, Some(&mut gx));
        Ok(gx)
    }

    /// Reverse sweep; accumulates parameter and/or input gradients.
    fn backprop(
        &self,
        cache: &ForwardCache,
        upstream: &[f64],
        mut param_out: Option<&mut [f64]>,
        input_out: Option<&mut [f64]>,
    ) {
        let mut delta = upstream.to_vec();
        for k in (0..self.specs.len()).rev() {
            let s = self.specs[k];
            for (d, &z) in delta.iter_mut().zip(&cache.pre[k]) {
                *d *= s.activation.eval1(z).1;
            }
            let a_in = &cache.acts[k];
            if let Some(g) = param_out.as_deref_mut() {
                let off = self.offsets[k];
                let (gw, gb) = g[off..off + s.param_count()].split_at_mut(s.input_width * s.output_width);
                for (o, &d) in delta.iter().enumerate() {
                    let row = &mut gw[o * s.input_width..(o + 1) * s.input_width];
                    for (gwi, &ai) in row.iter_mut().zip(a_in) {
                        *gwi += d * ai;
                    }
                    gb[o] += d;
                }
            }
            if k == 0 && input_out.is_none() {
                break;
            }
            delta = transpose_mul(self.weights(k), &delta, s.input_width);
        }
        if let Some(gx) = input_out {
            for (g, d) in gx.iter_mut().zip(&delta) {
                *g += d;
            }
        }
    }

    /// Exact directional derivative of the scalar output along `direction`
    /// by forward tangent propagation.
    pub fn directional_derivative(&self, input: &[f64], direction: &[f64]) -> Result<f64> {
        Ok(self.tangent_forward(input, direction)?.derivative())
    }

    /// Forward pass carrying a tangent; the result can be reused for
    /// [`MlpParams::mixed_param_grad_from`].
    pub fn tangent_forward(&self, input: &[f64], direction: &[f64]) -> Result<TangentCache> {
        self.require_scalar()?;
        check_len("network input", self.input_width(), input.len())?;
        check_len("tangent direction", self.input_width(), direction.len())?;
        let n = self.specs.len();
        let mut acts = Vec::with_capacity(n + 1);
        let mut tans = Vec::with_capacity(n + 1);
        let mut pre = Vec::with_capacity(n);
        let mut pre_tan = Vec::with_capacity(n);
        acts.push(input.to_vec());
        tans.push(direction.to_vec());
        for k in 0..n {
            let s = self.specs[k];
            let w = self.weights(k);
            let z = affine(w, self.bias(k), &acts[k], s.output_width);
            let zt = matvec(w, &tans[k], s.output_width);
            let mut a = Vec::with_capacity(s.output_width);
            let mut at = Vec::with_capacity(s.output_width);
            for (&zi, &zti) in z.iter().zip(&zt) {
                let (v, d) = s.activation.eval1(zi);
                a.push(v);
                at.push(d * zti);
            }
            pre.push(z);
            pre_tan.push(zt);
            acts.push(a);
            tans.push(at);
        }
        Ok(TangentCache {
            token: self.token,
            acts,
            tans,
            pre,
            pre_tan,
        })
    }

    /// Parameter gradient of the directional derivative
    /// `<d output / d input, direction>`, by forward-over-reverse.
    pub fn mixed_param_grad(&self, input: &[f64], direction: &[f64]) -> Result<ParamGradient> {
        let tc = self.tangent_forward(input, direction)?;
        let mut g = ParamGradient::zeros_like(self);
        self.mixed_param_grad_from(&tc, 1.0, &mut g)?;
        Ok(g)
    }

    /// Accumulates `scale * d(directional derivative)/d params` into `grad`.
    pub fn mixed_param_grad_from(
        &self,
        tc: &TangentCache,
        scale: f64,
        grad: &mut ParamGradient,
    ) -> Result<()> {
        if tc.token != self.token || tc.pre.len() != self.specs.len() {
            return Err(Error::Contract(
                "tangent cache does not belong to these parameters".into(),
            ));
        }
        check_len("parameter gradient", self.data.len(), grad.data.len())?;
        // adjoints of the primal activations and of the tangents
        let mut bar_a = vec![0.0];
        let mut bar_t = vec![scale];
        for k in (0..self.specs.len()).rev() {
            let s = self.specs[k];
            let mut bar_z = Vec::with_capacity(s.output_width);
            let mut bar_zt = Vec::with_capacity(s.output_width);
            for o in 0..s.output_width {
                let (_, d1, d2) = s.activation.eval2(tc.pre[k][o]);
                bar_zt.push(d1 * bar_t[o]);
                bar_z.push(d2 * tc.pre_tan[k][o] * bar_t[o] + d1 * bar_a[o]);
            }
            let off = self.offsets[k];
            let (gw, gb) = grad.data[off..off + s.param_count()]
                .split_at_mut(s.input_width * s.output_width);
            let a_in = &tc.acts[k];
            let t_in = &tc.tans[k];
            for o in 0..s.output_width {
                let row = &mut gw[o * s.input_width..(o + 1) * s.input_width];
                let (bz, bzt) = (bar_z[o], bar_zt[o]);
                for ((g, &ai), &ti) in row.iter_mut().zip(a_in).zip(t_in) {
                    *g += bz * ai + bzt * ti;
                }
                gb[o] += bz;
            }
            if k > 0 {
                let w = self.weights(k);
                bar_a = transpose_mul(w, &bar_z, s.input_width);
                bar_t = transpose_mul(w, &bar_zt, s.input_width);
            }
        }
        Ok(())
    }
}

/// Primal values recorded by [`MlpParams::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    token: u64,
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn pre_activations(&self, layer: usize) -> &[f64] {
        &self.pre[layer]
    }
}

/// Primal and tangent values recorded by [`MlpParams::tangent_forward`].
#[derive(Debug, Clone)]
pub struct TangentCache {
    token: u64,
    acts: Vec<Vec<f64>>,
    tans: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    pre_tan: Vec<Vec<f64>>,
}

impl TangentCache {
    pub fn output(&self) -> f64 {
        self.acts.last().map_or(0.0, |a| a[0])
    }

    /// The directional derivative carried by the tangent.
    pub fn derivative(&self) -> f64 {
        self.tans.last().map_or(0.0, |t| t[0])
    }
}

/// One gradient entry per parameter, in the same flat layout as [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    data: Vec<f64>,
}

impl ParamGradient {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            data: vec![0.0; params.num_params()],
        }
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            data: vec![0.0; len],
        }
    }

    pub fn from_flat(data: Vec<f64>) -> Self {
        Self { data }
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &ParamGradient, scale: f64) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn affine(w: &[f64], b: &[f64], x: &[f64], out: usize) -> Vec<f64> {
    let mut z = Vec::with_capacity(out);
    affine_into(w, b, x, &mut z);
    z
}

fn affine_into(w: &[f64], b: &[f64], x: &[f64], z: &mut Vec<f64>) {
    let n_in = x.len();
    z.clear();
    z.extend(
        w.chunks_exact(n_in)
            .zip(b)
            .map(|(row, &bi)| bi + dot(row, x)),
    );
}

fn matvec(w: &[f64], x: &[f64], out: usize) -> Vec<f64> {
    let n_in = x.len();
    let mut z = Vec::with_capacity(out);
    z.extend(w.chunks_exact(n_in).map(|row| dot(row, x)));
    z
}

/// `Wᵀ d` for a row-major `out × n_in` matrix.
fn transpose_mul(w: &[f64], d: &[f64], n_in: usize) -> Vec<f64> {
    let mut r = vec![0.0; n_in];
    for (row, &di) in w.chunks_exact(n_in).zip(d) {
        for (ri, &wi) in r.iter_mut().zip(row) {
            *ri += wi * di;
        }
    }
    r
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
