//! Network building blocks with explicit forward and backward passes.

use rand::{Rng, RngExt};

use crate::gemm::{gemm, MatMut, MatRef, NetScalar};
use crate::tensor::Act;

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: NetScalar> Param<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), value: vec![T::zero(); n], grad: vec![T::zero(); n] }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        let mut p = Self::zeros(shape);
        p.value.fill(v);
        p
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(shape);
        let bound = 1.0 / (fan_in as f64).sqrt();
        for v in &mut p.value {
            *v = T::of(rng.random_range(-bound..bound));
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

fn add_bias<T: NetScalar>(out: &mut Act<T>, bias: &[T]) {
    let w = out.w;
    let r = out.row_len();
    let mut runs = Vec::with_capacity(out.n * out.h);
    out.for_each_interior_run(|o| runs.push(o));
    for (c, &b) in bias.iter().enumerate() {
        let row = &mut out.data[c * r..(c + 1) * r];
        for &o in &runs {
            row[o..o + w].iter_mut().for_each(|v| *v += b);
        }
    }
}

fn interior_row_sums<T: NetScalar>(a: &Act<T>, into: &mut [T]) {
    let w = a.w;
    let mut runs = Vec::with_capacity(a.n * a.h);
    a.for_each_interior_run(|o| runs.push(o));
    for (c, acc) in into.iter_mut().enumerate() {
        let row = a.row(c);
        let mut s = T::zero();
        for &o in &runs {
            for &v in &row[o..o + w] {
                s += v;
            }
        }
        *acc += s;
    }
}

/// 3×3 convolution, stride 1, zero padding 1, with bias. Weight layout
/// `(out, in, ky, kx)`.
#[derive(Debug, Clone)]
pub struct Conv3x3<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: NetScalar> Conv3x3<T> {
    pub fn new(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::fan_in_uniform(&[cout, cin, 3, 3], cin * 9, rng),
            bias: Param::fan_in_uniform(&[cout], cin * 9, rng),
        }
    }

    fn dims(&self) -> (usize, usize) {
        (self.weight.shape[0], self.weight.shape[1])
    }

    /// Weights regrouped as rows `(tap, out)` over columns `in`.
    fn tap_major(&self) -> Vec<T> {
        let (co, ci) = self.dims();
        let w = &self.weight.value;
        let mut out = vec![T::zero(); 9 * co * ci];
        for o in 0..co {
            for i in 0..ci {
                for t in 0..9 {
                    out[(t * co + o) * ci + i] = w[(o * ci + i) * 9 + t];
                }
            }
        }
        out
    }

    /// Row offset of tap `t` relative to the output position.
    fn tap_shift(t: usize, wp: usize) -> isize {
        (t / 3) as isize * wp as isize + (t % 3) as isize - wp as isize - 1
    }

    pub fn forward(&self, x: &Act<T>) -> Act<T> {
        let (co, ci) = self.dims();
        assert_eq!(x.c, ci, "conv3x3 input channels");
        let r = x.row_len();
        let wp = x.w + 2;
        let lo = wp + 1;
        // Every tap applied at every position, then summed with shifts.
        let mut taps = vec![T::zero(); 9 * co * r];
        let wt = self.tap_major();
        gemm(
            9 * co,
            ci,
            r,
            MatRef::new(&wt, 0, ci, 1),
            MatRef::new(&x.data, 0, r, 1),
            T::zero(),
            MatMut::new(&mut taps, 0, r, 1),
        );
        let mut out = Act::zeros(co, x.n, x.h, x.w);
        for o in 0..co {
            let dst = &mut out.data[o * r + lo..(o + 1) * r - lo];
            for t in 0..9 {
                let start = (lo as isize + Self::tap_shift(t, wp)) as usize;
                let src = &taps[(t * co + o) * r + start..][..dst.len()];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        out.zero_borders();
        add_bias(&mut out, &self.bias.value);
        out
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(&mut self, x: &Act<T>, dy: &Act<T>, need_dx: bool) -> Option<Act<T>> {
        let (co, ci) = self.dims();
        let r = x.row_len();
        let wp = x.w + 2;
        let lo = wp + 1;
        // shifted[(t, o)](p) = dy(o, p - shift_t)
        let mut shifted = vec![T::zero(); 9 * co * r];
        for t in 0..9 {
            let start = (lo as isize + Self::tap_shift(t, wp)) as usize;
            for o in 0..co {
                let src = &dy.data[o * r + lo..(o + 1) * r - lo];
                shifted[(t * co + o) * r + start..][..src.len()].copy_from_slice(src);
            }
        }
        let mut dwt = vec![T::zero(); 9 * co * ci];
        gemm(
            9 * co,
            r,
            ci,
            MatRef::new(&shifted, 0, r, 1),
            MatRef::new(&x.data, 0, 1, r),
            T::zero(),
            MatMut::new(&mut dwt, 0, ci, 1),
        );
        let g = &mut self.weight.grad;
        for o in 0..co {
            for i in 0..ci {
                for t in 0..9 {
                    g[(o * ci + i) * 9 + t] += dwt[(t * co + o) * ci + i];
                }
            }
        }
        interior_row_sums(dy, &mut self.bias.grad);
        if !need_dx {
            return None;
        }
        let wt = self.tap_major();
        let mut dx = Act::zeros(ci, x.n, x.h, x.w);
        gemm(
            ci,
            9 * co,
            r,
            MatRef::new(&wt, 0, 1, ci),
            MatRef::new(&shifted, 0, r, 1),
            T::zero(),
            MatMut::new(&mut dx.data, 0, r, 1),
        );
        dx.zero_borders();
        Some(dx)
    }
}

/// 1×1 convolution with bias. Weight layout `(out, in)`.
#[derive(Debug, Clone)]
pub struct Conv1x1<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: NetScalar> Conv1x1<T> {
    pub fn new(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::fan_in_uniform(&[cout, cin, 1, 1], cin, rng),
            bias: Param::fan_in_uniform(&[cout], cin, rng),
        }
    }

    fn dims(&self) -> (usize, usize) {
        (self.weight.shape[0], self.weight.shape[1])
    }

    pub fn forward(&self, x: &Act<T>) -> Act<T> {
        let (co, ci) = self.dims();
        assert_eq!(x.c, ci, "conv1x1 input channels");
        let mut out = Act::zeros(co, x.n, x.h, x.w);
        let r = x.row_len();
        gemm(
            co,
            ci,
            r,
            MatRef::new(&self.weight.value, 0, ci, 1),
            MatRef::new(&x.data, 0, r, 1),
            T::zero(),
            MatMut::new(&mut out.data, 0, r, 1),
        );
        add_bias(&mut out, &self.bias.value);
        out
    }

    pub fn backward(&mut self, x: &Act<T>, dy: &Act<T>) -> Act<T> {
        let (co, ci) = self.dims();
        let r = x.row_len();
        gemm(
            co,
            r,
            ci,
            MatRef::new(&dy.data, 0, r, 1),
            MatRef::new(&x.data, 0, 1, r),
            T::one(),
            MatMut::new(&mut self.weight.grad, 0, ci, 1),
        );
        interior_row_sums(dy, &mut self.bias.grad);
        let mut dx = Act::zeros(ci, x.n, x.h, x.w);
        gemm(
            ci,
            co,
            r,
            MatRef::new(&self.weight.value, 0, 1, ci),
            MatRef::new(&dy.data, 0, r, 1),
            T::zero(),
            MatMut::new(&mut dx.data, 0, r, 1),
        );
        dx.zero_borders();
        dx
    }
}

/// 3×3 transposed convolution, stride 2, padding 1, output padding 1: doubles
/// the spatial size. Weight layout `(in, out, ky, kx)`.
#[derive(Debug, Clone)]
pub struct ConvTranspose3x3<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: NetScalar> ConvTranspose3x3<T> {
    pub fn new(cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::fan_in_uniform(&[cin, cout, 3, 3], cout * 9, rng),
            bias: Param::fan_in_uniform(&[cout], cout * 9, rng),
        }
    }

    fn dims(&self) -> (usize, usize) {
        (self.weight.shape[0], self.weight.shape[1])
    }

    /// Calls `f(tap_row, input_offset, output_offset)` for each tap hit that lands
    /// inside the output; offsets are within one channel row.
    fn for_each_hit(x: &Act<T>, out: &Act<T>, co: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (h, w) = (x.h, x.w);
        let (oh, ow) = (out.h, out.w);
        let (plane, oplane) = (x.plane(), out.plane());
        for c in 0..co {
            for t in 0..9 {
                let (ky, kx) = (t / 3, t % 3);
                let tap_row = c * 9 + t;
                for n in 0..x.n {
                    for iy in 0..h {
                        let oy = 2 * iy + ky;
                        if oy == 0 || oy > oh {
                            continue;
                        }
                        let oy = oy - 1;
                        for ix in 0..w {
                            let ox = 2 * ix + kx;
                            if ox == 0 || ox > ow {
                                continue;
                            }
                            let ox = ox - 1;
                            let i = n * plane + (iy + 1) * (w + 2) + ix + 1;
                            let o = c * out.row_len() + n * oplane + (oy + 1) * (ow + 2) + ox + 1;
                            f(tap_row, i, o);
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Act<T>) -> Act<T> {
        let (ci, co) = self.dims();
        assert_eq!(x.c, ci, "transposed conv input channels");
        let r = x.row_len();
        let mut taps = vec![T::zero(); 9 * co * r];
        gemm(
            9 * co,
            ci,
            r,
            MatRef::new(&self.weight.value, 0, 1, co * 9),
            MatRef::new(&x.data, 0, r, 1),
            T::zero(),
            MatMut::new(&mut taps, 0, r, 1),
        );
        let mut out = Act::zeros(co, x.n, 2 * x.h, 2 * x.w);
        let out_shape = Act::<T> { data: Vec::new(), ..out };
        Self::for_each_hit(x, &out_shape, co, |tap, i, o| out.data[o] += taps[tap * r + i]);
        add_bias(&mut out, &self.bias.value);
        out
    }

    pub fn backward(&mut self, x: &Act<T>, dy: &Act<T>) -> Act<T> {
        let (ci, co) = self.dims();
        let r = x.row_len();
        let mut g = vec![T::zero(); 9 * co * r];
        Self::for_each_hit(x, dy, co, |tap, i, o| g[tap * r + i] = dy.data[o]);
        gemm(
            ci,
            r,
            9 * co,
            MatRef::new(&x.data, 0, r, 1),
            MatRef::new(&g, 0, 1, r),
            T::one(),
            MatMut::new(&mut self.weight.grad, 0, co * 9, 1),
        );
        interior_row_sums(dy, &mut self.bias.grad);
        let mut dx = Act::zeros(ci, x.n, x.h, x.w);
        gemm(
            ci,
            9 * co,
            r,
            MatRef::new(&self.weight.value, 0, co * 9, 1),
            MatRef::new(&g, 0, r, 1),
            T::zero(),
            MatMut::new(&mut dx.data, 0, r, 1),
        );
        dx.zero_borders();
        dx
    }
}

/// Batch normalization over `(n, h, w)` per channel.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Act<T>,
    pub inv_std: Vec<T>,
}

impl<T: NetScalar> BatchNorm<T> {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(c: usize) -> Self {
        Self {
            gamma: Param::filled(&[c], T::one()),
            beta: Param::zeros(&[c]),
            running_mean: vec![T::zero(); c],
            running_var: vec![T::one(); c],
        }
    }

    /// Normalizes with batch statistics and updates the running estimates.
    pub fn forward_train(&mut self, x: &Act<T>) -> BnCache<T> {
        let (cache, mean, var) = self.normalize_batch(x);
        self.update_running(&mean, &var);
        cache
    }

    /// Batch-statistics normalization; also returns the batch mean and the
    /// unbiased batch variance for the running estimates.
    pub fn normalize_batch(&self, x: &Act<T>) -> (BnCache<T>, Vec<T>, Vec<T>) {
        let c = x.c;
        let w = x.w;
        let m = x.interior_count();
        let mut runs = Vec::with_capacity(x.n * x.h);
        x.for_each_interior_run(|o| runs.push(o));
        let mut xhat = Act::zeros(c, x.n, x.h, x.w);
        let mut inv_std = vec![T::zero(); c];
        let mut means = vec![T::zero(); c];
        let mut vars = vec![T::zero(); c];
        let mf = T::of(m as f64);
        for ch in 0..c {
            let row = x.row(ch);
            let mut sum = T::zero();
            for &o in &runs {
                for &v in &row[o..o + w] {
                    sum += v;
                }
            }
            let mean = sum / mf;
            let mut var = T::zero();
            for &o in &runs {
                for &v in &row[o..o + w] {
                    let d = v - mean;
                    var += d * d;
                }
            }
            var /= mf;
            let is = T::one() / (var + T::of(Self::EPS)).sqrt();
            inv_std[ch] = is;
            let out = xhat.row_mut(ch);
            for &o in &runs {
                for (d, &v) in out[o..o + w].iter_mut().zip(&row[o..o + w]) {
                    *d = (v - mean) * is;
                }
            }
            means[ch] = mean;
            vars[ch] = if m > 1 { var * mf / T::of((m - 1) as f64) } else { var };
        }
        (BnCache { xhat, inv_std }, means, vars)
    }

    pub fn update_running(&mut self, mean: &[T], var: &[T]) {
        let mom = T::of(Self::MOMENTUM);
        for ch in 0..mean.len() {
            self.running_mean[ch] = (T::one() - mom) * self.running_mean[ch] + mom * mean[ch];
            self.running_var[ch] = (T::one() - mom) * self.running_var[ch] + mom * var[ch];
        }
    }

    /// Applies `γ x̂ + β` (and an optional ReLU) to normalized values.
    pub fn affine(&self, xhat: &Act<T>, relu: bool) -> Act<T> {
        let mut y = Act::zeros(xhat.c, xhat.n, xhat.h, xhat.w);
        let w = xhat.w;
        let mut runs = Vec::with_capacity(xhat.n * xhat.h);
        xhat.for_each_interior_run(|o| runs.push(o));
        for ch in 0..xhat.c {
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            let src = xhat.row(ch);
            let dst = y.row_mut(ch);
            for &o in &runs {
                for (d, &v) in dst[o..o + w].iter_mut().zip(&src[o..o + w]) {
                    let z = g * v + b;
                    *d = if relu && z < T::zero() { T::zero() } else { z };
                }
            }
        }
        y
    }

    /// Normalized values from the running statistics.
    pub fn normalize_eval(&self, x: &Act<T>) -> Act<T> {
        let mut xhat = Act::zeros(x.c, x.n, x.h, x.w);
        let w = x.w;
        let mut runs = Vec::with_capacity(x.n * x.h);
        x.for_each_interior_run(|o| runs.push(o));
        for ch in 0..x.c {
            let mean = self.running_mean[ch];
            let is = T::one() / (self.running_var[ch] + T::of(Self::EPS)).sqrt();
            let src = x.row(ch);
            let dst = xhat.row_mut(ch);
            for &o in &runs {
                for (d, &v) in dst[o..o + w].iter_mut().zip(&src[o..o + w]) {
                    *d = (v - mean) * is;
                }
            }
        }
        xhat
    }

    /// Backward through `γ x̂ + β` (optionally preceded by ReLU masking of
    /// `dy`) and the batch normalization.
    pub fn backward(&mut self, cache: &BnCache<T>, dy: &Act<T>, relu: bool) -> Act<T> {
        let xhat = &cache.xhat;
        let w = xhat.w;
        let m = T::of(xhat.interior_count() as f64);
        let mut runs = Vec::with_capacity(xhat.n * xhat.h);
        xhat.for_each_interior_run(|o| runs.push(o));
        let mut dx = Act::zeros(xhat.c, xhat.n, xhat.h, xhat.w);
        let mut gz = vec![T::zero(); w];
        for ch in 0..xhat.c {
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            let xr = xhat.row(ch);
            let dr = dy.row(ch);
            let mut dbeta = T::zero();
            let mut dgamma = T::zero();
            for &o in &runs {
                for k in 0..w {
                    let v = xr[o + k];
                    let mut d = dr[o + k];
                    if relu && g * v + b <= T::zero() {
                        d = T::zero();
                    }
                    dbeta += d;
                    dgamma += d * v;
                }
            }
            self.gamma.grad[ch] += dgamma;
            self.beta.grad[ch] += dbeta;
            let k0 = g * cache.inv_std[ch] / m;
            let out = dx.row_mut(ch);
            for &o in &runs {
                for k in 0..w {
                    let v = xr[o + k];
                    let mut d = dr[o + k];
                    if relu && g * v + b <= T::zero() {
                        d = T::zero();
                    }
                    gz[k] = d;
                }
                for k in 0..w {
                    out[o + k] = k0 * (m * gz[k] - dbeta - xr[o + k] * dgamma);
                }
            }
        }
        dx
    }
}

/// Inverted dropout; the mask keeps interior positions with probability `1 - p`.
pub fn dropout_train<T: NetScalar>(x: &mut Act<T>, p: f64, rng: &mut impl Rng) -> Option<Vec<bool>> {
    if p <= 0.0 {
        return None;
    }
    let scale = T::of(1.0 / (1.0 - p));
    let mut mask = vec![false; x.data.len()];
    for (v, m) in x.data.iter_mut().zip(mask.iter_mut()) {
        *m = rng.random::<f64>() >= p;
        *v = if *m { *v * scale } else { T::zero() };
    }
    Some(mask)
}

pub fn dropout_backward<T: NetScalar>(dy: &mut Act<T>, mask: &Option<Vec<bool>>, p: f64) {
    if let Some(mask) = mask {
        let scale = T::of(1.0 / (1.0 - p));
        for (v, &m) in dy.data.iter_mut().zip(mask) {
            *v = if m { *v * scale } else { T::zero() };
        }
    }
}

/// 2×2 max pooling with stride 2; returns argmax offsets within each row.
pub fn maxpool_forward<T: NetScalar>(x: &Act<T>) -> (Act<T>, Vec<u32>) {
    assert!(x.h % 2 == 0 && x.w % 2 == 0, "max pooling needs even sides");
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Act::zeros(x.c, x.n, oh, ow);
    let mut arg = Vec::with_capacity(x.c * x.n * oh * ow);
    let (wp, owp) = (x.w + 2, ow + 2);
    let (plane, oplane) = (x.plane(), out.plane());
    let (r, or) = (x.row_len(), out.row_len());
    for c in 0..x.c {
        let row = &x.data[c * r..(c + 1) * r];
        for n in 0..x.n {
            for y in 0..oh {
                for xx in 0..ow {
                    let base = n * plane + (2 * y + 1) * wp + 2 * xx + 1;
                    let mut best = base;
                    for cand in [base + 1, base + wp, base + wp + 1] {
                        if row[cand] > row[best] {
                            best = cand;
                        }
                    }
                    out.data[c * or + n * oplane + (y + 1) * owp + xx + 1] = row[best];
                    arg.push(best as u32);
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool_backward<T: NetScalar>(x_shape: &Act<T>, dy: &Act<T>, arg: &[u32]) -> Act<T> {
    let mut dx = Act::zeros(x_shape.c, x_shape.n, x_shape.h, x_shape.w);
    let r = dx.row_len();
    let (oplane, owp, or) = (dy.plane(), dy.w + 2, dy.row_len());
    let mut k = 0;
    for c in 0..dy.c {
        for n in 0..dy.n {
            for y in 0..dy.h {
                for xx in 0..dy.w {
                    dx.data[c * r + arg[k] as usize] += dy.data[c * or + n * oplane + (y + 1) * owp + xx + 1];
                    k += 1;
                }
            }
        }
    }
    dx
}

/// Per-pixel softmax across channels.
pub fn softmax<T: NetScalar>(z: &Act<T>) -> Act<T> {
    let mut p = Act::zeros(z.c, z.n, z.h, z.w);
    let r = z.row_len();
    let w = z.w;
    let mut runs = Vec::new();
    z.for_each_interior_run(|o| runs.push(o));
    for &o in &runs {
        for k in o..o + w {
            let mut mx = z.data[k];
            for c in 1..z.c {
                mx = mx.max(z.data[c * r + k]);
            }
            let mut s = T::zero();
            for c in 0..z.c {
                let e = (z.data[c * r + k] - mx).exp();
                p.data[c * r + k] = e;
                s += e;
            }
            for c in 0..z.c {
                p.data[c * r + k] /= s;
            }
        }
    }
    p
}

/// Gradient with respect to logits given the gradient with respect to probabilities.
pub fn softmax_backward<T: NetScalar>(p: &Act<T>, dp: &Act<T>) -> Act<T> {
    let mut dz = Act::zeros(p.c, p.n, p.h, p.w);
    let r = p.row_len();
    let w = p.w;
    let mut runs = Vec::new();
    p.for_each_interior_run(|o| runs.push(o));
    for &o in &runs {
        for k in o..o + w {
            let mut dot = T::zero();
            for c in 0..p.c {
                dot += p.data[c * r + k] * dp.data[c * r + k];
            }
            for c in 0..p.c {
                dz.data[c * r + k] = p.data[c * r + k] * (dp.data[c * r + k] - dot);
            }
        }
    }
    dz
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_act(c: usize, n: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Act<f64> {
        let dense: Vec<f64> = (0..c * n * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        Act::from_nchw(n, c, h, w, &dense)
    }

    /// Direct definition: out[o,y,x] = b[o] + Σ w[o,i,ky,kx] x[i, y+ky-1, x+kx-1].
    fn conv3x3_oracle(x: &Act<f64>, conv: &Conv3x3<f64>) -> Vec<f64> {
        let (co, ci) = (conv.weight.shape[0], conv.weight.shape[1]);
        let dense = x.to_nchw();
        let (h, w) = (x.h as isize, x.w as isize);
        let mut out = vec![0.0; x.n * co * x.h * x.w];
        for n in 0..x.n {
            for o in 0..co {
                for y in 0..h {
                    for xx in 0..w {
                        let mut s = conv.bias.value[o];
                        for i in 0..ci {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let (sy, sx) = (y + ky as isize - 1, xx + kx as isize - 1);
                                    if sy >= 0 && sy < h && sx >= 0 && sx < w {
                                        s += conv.weight.value[((o * ci + i) * 3 + ky) * 3 + kx]
                                            * dense[((n * ci + i) * x.h + sy as usize) * x.w + sx as usize];
                                    }
                                }
                            }
                        }
                        out[((n * co + o) * x.h + y as usize) * x.w + xx as usize] = s;
                    }
                }
            }
        }
        out
    }

    /// out[o, 2i+ky-1, 2j+kx-1] += w[i_c, o, ky, kx] x[i_c, i, j], cropped to 2h×2w.
    fn conv_transpose_oracle(x: &Act<f64>, conv: &ConvTranspose3x3<f64>) -> Vec<f64> {
        let (ci, co) = (conv.weight.shape[0], conv.weight.shape[1]);
        let dense = x.to_nchw();
        let (oh, ow) = (2 * x.h, 2 * x.w);
        let mut out = vec![0.0; x.n * co * oh * ow];
        for n in 0..x.n {
            for o in 0..co {
                for v in &mut out[(n * co + o) * oh * ow..][..oh * ow] {
                    *v = conv.bias.value[o];
                }
                for i in 0..ci {
                    for y in 0..x.h {
                        for xx in 0..x.w {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let (oy, ox) = (2 * y + ky, 2 * xx + kx);
                                    if oy >= 1 && oy <= oh && ox >= 1 && ox <= ow {
                                        out[((n * co + o) * oh + oy - 1) * ow + ox - 1] += conv.weight.value
                                            [((i * co + o) * 3 + ky) * 3 + kx]
                                            * dense[((n * ci + i) * x.h + y) * x.w + xx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn conv3x3_matches_direct_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_act(3, 2, 5, 4, &mut rng);
        let conv = Conv3x3::<f64>::new(3, 4, &mut rng);
        close(&conv.forward(&x).to_nchw(), &conv3x3_oracle(&x, &conv), 1e-12);
    }

    #[test]
    fn conv_transpose_matches_direct_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_act(3, 2, 3, 4, &mut rng);
        let conv = ConvTranspose3x3::<f64>::new(3, 2, &mut rng);
        let y = conv.forward(&x);
        assert_eq!((y.h, y.w), (6, 8));
        close(&y.to_nchw(), &conv_transpose_oracle(&x, &conv), 1e-12);
    }

    /// Checks `backward` against central differences of `Σ r ⊙ forward(x)`.
    fn check_input_grad(x: &Act<f64>, forward: impl Fn(&Act<f64>) -> Act<f64>, analytic: &Act<f64>, r: &Act<f64>) {
        let dense = x.to_nchw();
        let loss = |d: &[f64]| {
            let y = forward(&Act::from_nchw(x.n, x.c, x.h, x.w, d));
            y.data.iter().zip(&r.data).map(|(a, b)| a * b).sum::<f64>()
        };
        let grad = analytic.to_nchw();
        for k in (0..dense.len()).step_by(3) {
            let mut p = dense.clone();
            p[k] += 1e-6;
            let mut m = dense.clone();
            m[k] -= 1e-6;
            let fd = (loss(&p) - loss(&m)) / 2e-6;
            assert!((fd - grad[k]).abs() < 1e-6 * fd.abs().max(1.0), "k={k}: {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn layer_input_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_act(2, 2, 4, 6, &mut rng);

        let mut conv = Conv3x3::<f64>::new(2, 3, &mut rng);
        let r = random_act(3, 2, 4, 6, &mut rng);
        let dx = conv.backward(&x, &r, true).unwrap();
        check_input_grad(&x, |a| conv.forward(a), &dx, &r);

        let mut c1 = Conv1x1::<f64>::new(2, 3, &mut rng);
        let dx = c1.backward(&x, &r);
        check_input_grad(&x, |a| c1.forward(a), &dx, &r);

        let mut ct = ConvTranspose3x3::<f64>::new(2, 3, &mut rng);
        let r2 = random_act(3, 2, 8, 12, &mut rng);
        let dx = ct.backward(&x, &r2);
        check_input_grad(&x, |a| ct.forward(a), &dx, &r2);

        let mut bn = BatchNorm::<f64>::new(2);
        bn.gamma.value = vec![1.3, -0.7];
        bn.beta.value = vec![0.1, 0.2];
        let rr = random_act(2, 2, 4, 6, &mut rng);
        let cache = bn.forward_train(&x);
        let dx = bn.backward(&cache, &rr, true);
        let bn2 = bn.clone();
        check_input_grad(&x, |a| bn2.affine(&bn2.clone().forward_train(a).xhat, true), &dx, &rr);

        let (_, arg) = maxpool_forward(&x);
        let rp = random_act(2, 2, 2, 3, &mut rng);
        let dx = maxpool_backward(&x, &rp, &arg);
        check_input_grad(&x, |a| maxpool_forward(a).0, &dx, &rp);

        let p = softmax(&x);
        let dz = softmax_backward(&p, &rr);
        check_input_grad(&x, softmax, &dz, &rr);
    }

    #[test]
    fn weight_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_act(2, 2, 4, 4, &mut rng);
        let r = random_act(3, 2, 4, 4, &mut rng);
        let mut conv = Conv3x3::<f64>::new(2, 3, &mut rng);
        conv.backward(&x, &r, false);
        let loss = |c: &Conv3x3<f64>| c.forward(&x).data.iter().zip(&r.data).map(|(a, b)| a * b).sum::<f64>();
        for k in [0, 7, 20, 53] {
            let mut p = conv.clone();
            p.weight.value[k] += 1e-6;
            let mut m = conv.clone();
            m.weight.value[k] -= 1e-6;
            let fd = (loss(&p) - loss(&m)) / 2e-6;
            assert!((fd - conv.weight.grad[k]).abs() < 1e-6 * fd.abs().max(1.0));
        }

        let r2 = random_act(3, 2, 8, 8, &mut rng);
        let mut ct = ConvTranspose3x3::<f64>::new(2, 3, &mut rng);
        ct.backward(&x, &r2);
        let loss = |c: &ConvTranspose3x3<f64>| c.forward(&x).data.iter().zip(&r2.data).map(|(a, b)| a * b).sum::<f64>();
        for k in [0, 9, 31, 53] {
            let mut p = ct.clone();
            p.weight.value[k] += 1e-6;
            let mut m = ct.clone();
            m.weight.value[k] -= 1e-6;
            let fd = (loss(&p) - loss(&m)) / 2e-6;
            assert!((fd - ct.weight.grad[k]).abs() < 1e-6 * fd.abs().max(1.0));
        }
        for k in 0..3 {
            let mut p = ct.clone();
            p.bias.value[k] += 1e-6;
            let mut m = ct.clone();
            m.bias.value[k] -= 1e-6;
            let fd = (loss(&p) - loss(&m)) / 2e-6;
            assert!((fd - ct.bias.grad[k]).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn single_conv_parameter_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = Conv3x3::<f32>::new(1, 8, &mut rng);
        assert_eq!(c.weight.len() + c.bias.len(), 80);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = random_act(5, 2, 3, 3, &mut rng);
        let p = softmax(&z).to_nchw();
        for n in 0..2 {
            for k in 0..9 {
                let s: f64 = (0..5).map(|c| p[(n * 5 + c) * 9 + k]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}
