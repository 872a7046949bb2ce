//! Fully connected ReLU networks with hand-written reverse mode.
//!
//! Parameters live in one flat vector (per layer: weights row-major
//! `out × in`, then biases) so optimizers and soft target updates are plain
//! elementwise loops.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::RlError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedForwardNet {
    sizes: Vec<usize>,
    params: Vec<f64>,
    /// Fixed input normalization: the net sees `(x - shift) * scale`.
    input_shift: Vec<f64>,
    input_scale: Vec<f64>,
}

/// Per-layer activations kept by [`FeedForwardNet::forward_cached`].
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    /// `acts[0]` is the normalized input, `acts[k]` the output of layer `k`
    /// (post-ReLU for hidden layers, linear for the last).
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_next: Vec<f64>,
}

impl FeedForwardNet {
    /// Uniform `±1/√fan_in` initialization for weights and biases.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2 && sizes.iter().all(|&s| s > 0), "invalid layer sizes");
        let mut params = Vec::with_capacity(Self::param_count_for(sizes));
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..(w[0] * w[1] + w[1]) {
                params.push(rng.random_range(-bound..bound));
            }
        }
        Self::from_params(sizes, params).expect("sized correctly")
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self, RlError> {
        let expected = Self::param_count_for(sizes);
        if params.len() != expected {
            return Err(RlError::Shape {
                expected,
                got: params.len(),
            });
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params,
            input_shift: vec![0.0; sizes[0]],
            input_scale: vec![1.0; sizes[0]],
        })
    }

    pub fn with_input_normalization(mut self, shift: Vec<f64>, scale: Vec<f64>) -> Self {
        assert_eq!(shift.len(), self.sizes[0]);
        assert_eq!(scale.len(), self.sizes[0]);
        self.input_shift = shift;
        self.input_scale = scale;
        self
    }

    fn param_count_for(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("non-empty")
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn layer_offsets(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut off = 0;
        self.sizes.windows(2).map(move |w| {
            let o = off;
            off += w[0] * w[1] + w[1];
            (o, w[0], w[1])
        })
    }

    fn check_input(&self, input: &[f64]) -> Result<(), RlError> {
        if input.len() != self.input_dim() {
            return Err(RlError::Shape {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        Ok(())
    }

    pub fn forward_cached(&self, input: &[f64], cache: &mut ForwardCache) -> Result<(), RlError> {
        self.check_input(input)?;
        let layers = self.sizes.len();
        cache.acts.resize_with(layers, Vec::new);
        let first = &mut cache.acts[0];
        first.clear();
        first.extend(
            input
                .iter()
                .zip(self.input_shift.iter().zip(&self.input_scale))
                .map(|(x, (s, c))| (x - s) * c),
        );
        let last = layers - 2;
        for (k, (off, fan_in, fan_out)) in self.layer_offsets().enumerate() {
            let (prev, rest) = cache.acts.split_at_mut(k + 1);
            let x = &prev[k];
            let out = &mut rest[0];
            out.clear();
            let w = &self.params[off..off + fan_in * fan_out];
            let b = &self.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            for o in 0..fan_out {
                let z = b[o] + dot4(&w[o * fan_in..(o + 1) * fan_in], x);
                out.push(if k < last { z.max(0.0) } else { z });
            }
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, RlError> {
        let mut cache = ForwardCache::default();
        self.forward_cached(input, &mut cache)?;
        Ok(cache.acts.pop().expect("output layer"))
    }

    /// Output of the last [`Self::forward_cached`] call.
    pub fn cached_output<'a>(&self, cache: &'a ForwardCache) -> &'a [f64] {
        cache.acts.last().expect("forward was run")
    }

    /// Reverse pass after [`Self::forward_cached`]. Accumulates
    /// `upstreamᵀ ∂out/∂θ` into `param_grad` and, if given, writes
    /// `upstreamᵀ ∂out/∂input` (in raw, un-normalized input units).
    pub fn backward(
        &self,
        cache: &mut ForwardCache,
        upstream: &[f64],
        param_grad: &mut [f64],
        input_grad: Option<&mut [f64]>,
    ) {
        debug_assert_eq!(param_grad.len(), self.params.len());
        self.backward_impl(cache, upstream, Some(param_grad), input_grad);
    }

    /// Input gradient only; parameter gradients are skipped.
    pub fn backward_input(&self, cache: &mut ForwardCache, upstream: &[f64], input_grad: &mut [f64]) {
        self.backward_impl(cache, upstream, None, Some(input_grad));
    }

    fn backward_impl(
        &self,
        cache: &mut ForwardCache,
        upstream: &[f64],
        mut param_grad: Option<&mut [f64]>,
        input_grad: Option<&mut [f64]>,
    ) {
        debug_assert_eq!(upstream.len(), self.output_dim());
        let offsets: Vec<_> = self.layer_offsets().collect();
        cache.delta.clear();
        cache.delta.extend_from_slice(upstream);
        for (k, &(off, fan_in, fan_out)) in offsets.iter().enumerate().rev() {
            let x = &cache.acts[k];
            let w = &self.params[off..off + fan_in * fan_out];
            if let Some(pg) = param_grad.as_deref_mut() {
                let (gw, gb) = pg[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
                for o in 0..fan_out {
                    let d = cache.delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    let row = &mut gw[o * fan_in..(o + 1) * fan_in];
                    for (g, xi) in row.iter_mut().zip(x) {
                        *g += d * xi;
                    }
                }
            }
            if k == 0 && input_grad.is_none() {
                break;
            }
            cache.delta_next.clear();
            cache.delta_next.resize(fan_in, 0.0);
            for o in 0..fan_out {
                let d = cache.delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &w[o * fan_in..(o + 1) * fan_in];
                for (dn, wi) in cache.delta_next.iter_mut().zip(row) {
                    *dn += d * wi;
                }
            }
            if k > 0 {
                // Hidden ReLU: gradient passes only where the unit was active.
                for (dn, a) in cache.delta_next.iter_mut().zip(&cache.acts[k]) {
                    if *a <= 0.0 {
                        *dn = 0.0;
                    }
                }
            }
            std::mem::swap(&mut cache.delta, &mut cache.delta_next);
        }
        if let Some(ig) = input_grad {
            for ((g, d), c) in ig.iter_mut().zip(&cache.delta).zip(&self.input_scale) {
                *g = d * c;
            }
        }
    }

    /// Gradient of output `k` with respect to the input, at `input`.
    pub fn input_gradient(&self, input: &[f64], k: usize) -> Result<Vec<f64>, RlError> {
        let mut cache = ForwardCache::default();
        self.forward_cached(input, &mut cache)?;
        let mut up = vec![0.0; self.output_dim()];
        up[k] = 1.0;
        let mut ig = vec![0.0; self.input_dim()];
        self.backward_input(&mut cache, &up, &mut ig);
        Ok(ig)
    }

    /// Crude Lipschitz bound: product of per-layer Frobenius norms times the
    /// largest input scale.
    pub fn lipschitz_bound(&self) -> f64 {
        let scale = self.input_scale.iter().fold(0.0_f64, |a, s| a.max(s.abs()));
        self.layer_offsets()
            .map(|(off, fi, fo)| {
                self.params[off..off + fi * fo]
                    .iter()
                    .map(|w| w * w)
                    .sum::<f64>()
                    .sqrt()
            })
            .product::<f64>()
            * scale
    }
}

/// Activations for a whole batch, row-major `batch × width` per layer.
#[derive(Debug, Clone, Default)]
pub struct BatchCache {
    batch: usize,
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_next: Vec<f64>,
}

/// `C = alpha·A·B + beta·C` for row-major-strided operands.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_strides: (usize, usize), b: &[f64], b_strides: (usize, usize), beta: f64, c: &mut [f64]) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
    debug_assert!(k == 0 || b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    // SAFETY: the asserted bounds cover every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl FeedForwardNet {
    /// Forward pass over `batch` row-major inputs.
    pub fn forward_batch(&self, inputs: &[f64], batch: usize, cache: &mut BatchCache) -> Result<(), RlError> {
        if inputs.len() != batch * self.input_dim() {
            return Err(RlError::Shape {
                expected: batch * self.input_dim(),
                got: inputs.len(),
            });
        }
        let layers = self.sizes.len();
        cache.batch = batch;
        cache.acts.resize_with(layers, Vec::new);
        let d0 = self.input_dim();
        let first = &mut cache.acts[0];
        first.clear();
        first.extend(inputs.iter().enumerate().map(|(j, x)| {
            let c = j % d0;
            (x - self.input_shift[c]) * self.input_scale[c]
        }));
        let last = layers - 2;
        for (k, (off, fan_in, fan_out)) in self.layer_offsets().enumerate() {
            let (prev, rest) = cache.acts.split_at_mut(k + 1);
            let x = &prev[k];
            let out = &mut rest[0];
            let w = &self.params[off..off + fan_in * fan_out];
            let b = &self.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            out.clear();
            for _ in 0..batch {
                out.extend_from_slice(b);
            }
            // Z = X·Wᵀ + 1·bᵀ
            gemm(batch, fan_in, fan_out, x, (fan_in, 1), w, (1, fan_in), 1.0, out);
            if k < last {
                for z in out.iter_mut() {
                    *z = z.max(0.0);
                }
            }
        }
        Ok(())
    }

    /// Output of the last [`Self::forward_batch`] call, `batch × out`.
    pub fn batch_output<'a>(&self, cache: &'a BatchCache) -> &'a [f64] {
        cache.acts.last().expect("forward was run")
    }

    /// Batched reverse pass: accumulates `Σ_b upstream_bᵀ ∂out_b/∂θ` into
    /// `param_grad` and writes per-row input gradients (`batch × in`).
    pub fn backward_batch(
        &self,
        cache: &mut BatchCache,
        upstream: &[f64],
        mut param_grad: Option<&mut [f64]>,
        input_grad: Option<&mut [f64]>,
    ) {
        let batch = cache.batch;
        debug_assert_eq!(upstream.len(), batch * self.output_dim());
        let offsets: Vec<_> = self.layer_offsets().collect();
        cache.delta.clear();
        cache.delta.extend_from_slice(upstream);
        let want_input = input_grad.is_some();
        for (k, &(off, fan_in, fan_out)) in offsets.iter().enumerate().rev() {
            let x = &cache.acts[k];
            let w = &self.params[off..off + fan_in * fan_out];
            if let Some(pg) = param_grad.as_deref_mut() {
                let (gw, gb) = pg[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
                // gW += δᵀ·X
                gemm(fan_out, batch, fan_in, &cache.delta, (1, fan_out), x, (fan_in, 1), 1.0, gw);
                for row in cache.delta.chunks_exact(fan_out) {
                    for (g, d) in gb.iter_mut().zip(row) {
                        *g += d;
                    }
                }
            }
            if k == 0 && !want_input {
                break;
            }
            cache.delta_next.clear();
            cache.delta_next.resize(batch * fan_in, 0.0);
            // δ_prev = δ·W
            gemm(batch, fan_out, fan_in, &cache.delta, (fan_out, 1), w, (fan_in, 1), 0.0, &mut cache.delta_next);
            if k > 0 {
                for (dn, a) in cache.delta_next.iter_mut().zip(&cache.acts[k]) {
                    if *a <= 0.0 {
                        *dn = 0.0;
                    }
                }
            }
            std::mem::swap(&mut cache.delta, &mut cache.delta_next);
        }
        if let Some(ig) = input_grad {
            let d0 = self.input_dim();
            for (j, (g, d)) in ig.iter_mut().zip(&cache.delta).enumerate() {
                *g = d * self.input_scale[j % d0];
            }
        }
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, ra) = a.split_at(a.len() - a.len() % 4);
    let (cb, rb) = b.split_at(ca.len());
    for (x, y) in ca.chunks_exact(4).zip(cb.chunks_exact(4)) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

pub fn net_eval(net: &FeedForwardNet, input: &[f64]) -> Result<Vec<f64>, RlError> {
    net.forward(input)
}

/// Parameter and input gradients of `upstreamᵀ net(input)`.
pub fn net_backprop(
    net: &FeedForwardNet,
    input: &[f64],
    upstream: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), RlError> {
    if upstream.len() != net.output_dim() {
        return Err(RlError::Shape {
            expected: net.output_dim(),
            got: upstream.len(),
        });
    }
    let mut cache = ForwardCache::default();
    net.forward_cached(input, &mut cache)?;
    let mut pg = vec![0.0; net.param_count()];
    let mut ig = vec![0.0; net.input_dim()];
    net.backward(&mut cache, upstream, &mut pg, Some(&mut ig));
    Ok((pg, ig))
}

/// `target ← (1 - tau)·target + tau·source`.
pub fn soft_update(target: &mut [f64], source: &[f64], tau: f64) -> Result<(), RlError> {
    if target.len() != source.len() {
        return Err(RlError::Shape {
            expected: target.len(),
            got: source.len(),
        });
    }
    for (t, s) in target.iter_mut().zip(source) {
        *t = (1.0 - tau) * *t + tau * s;
    }
    Ok(())
}
