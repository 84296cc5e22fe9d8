//! Convolution, pooling and resampling primitives with hand-written backward passes.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Accumulated gradients keyed by hierarchical parameter name.
#[derive(Clone, Debug, Default)]
pub struct Grads {
    map: BTreeMap<String, Vec<f32>>,
}

impl Grads {
    pub fn new() -> Self {
        Self::default()
    }

    /// Zero-initialized on first access.
    pub fn slot(&mut self, name: &str, len: usize) -> &mut [f32] {
        if !self.map.contains_key(name) {
            self.map.insert(name.to_string(), vec![0.0; len]);
        }
        let slot = self.map.get_mut(name).unwrap();
        debug_assert_eq!(slot.len(), len, "gradient length changed for {name}");
        slot
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.map.get(name).map(|v| v.as_slice())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.map.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn clear(&mut self) {
        self.map.clear();
    }
}

/// `C = A·B + beta·C` with optional transposition of the row-major operands.
/// `A` is logically `m×k`, `B` is `k×n`, `C` is `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    beta: f32,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Shifted copy of one row used by the 3×3 im2col: `dst[x] = src[x + dx]` or 0.
#[inline]
fn shifted_row(dst: &mut [f32], src: &[f32], dx: isize) {
    let w = dst.len();
    match dx {
        -1 => {
            dst[0] = 0.0;
            dst[1..].copy_from_slice(&src[..w - 1]);
        }
        0 => dst.copy_from_slice(src),
        _ => {
            dst[..w - 1].copy_from_slice(&src[1..]);
            dst[w - 1] = 0.0;
        }
    }
}

#[inline]
fn shifted_row_add(dst: &mut [f32], src: &[f32], dx: isize) {
    let w = dst.len();
    match dx {
        -1 => {
            for (d, s) in dst[..w - 1].iter_mut().zip(&src[1..]) {
                *d += s;
            }
        }
        0 => {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        _ => {
            for (d, s) in dst[1..].iter_mut().zip(&src[..w - 1]) {
                *d += s;
            }
        }
    }
}

fn im2col3(src: &[f32], c: usize, h: usize, w: usize, col: &mut [f32]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &src[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            let dy = ky as isize - 1;
            for kx in 0..3 {
                let dx = kx as isize - 1;
                let row = &mut col[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(0.0);
                    } else {
                        let sy = sy as usize;
                        shifted_row(out, &plane[sy * w..(sy + 1) * w], dx);
                    }
                }
            }
        }
    }
}

fn col2im3(col: &[f32], c: usize, h: usize, w: usize, dst: &mut [f32]) {
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dst[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            let dy = ky as isize - 1;
            for kx in 0..3 {
                let dx = kx as isize - 1;
                let row = &col[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    shifted_row_add(&mut plane[sy * w..(sy + 1) * w], &row[y * w..(y + 1) * w], dx);
                }
            }
        }
    }
}

/// Square convolution with stride 1 and "same" zero padding. Kernel size 1 or 3.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// `out×in×k×k`
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Conv2d {
    pub fn new<R: Rng>(
        name: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        assert!(kernel == 1 || kernel == 3, "only 1x1 and 3x3 kernels are supported");
        let fan_in = (in_channels * kernel * kernel) as f32;
        let normal = Normal::new(0.0f32, (2.0 / fan_in).sqrt()).unwrap();
        let weight = (0..out_channels * in_channels * kernel * kernel)
            .map(|_| normal.sample(rng))
            .collect();
        Self {
            name: name.into(),
            in_channels,
            out_channels,
            kernel,
            weight,
            bias: vec![0.0; out_channels],
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.c() != self.in_channels {
            return Err(Error::invalid(format!(
                "{}: expected {} input channels, got {}",
                self.name,
                self.in_channels,
                x.c()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let [n, _, h, w] = x.shape();
        let hw = h * w;
        let k = self.patch_len();
        let mut out = Tensor::zeros([n, self.out_channels, h, w]);
        let mut col = if self.kernel == 3 { vec![0.0; k * hw] } else { Vec::new() };
        for s in 0..n {
            let dst = out.sample_mut(s);
            for (co, b) in self.bias.iter().enumerate() {
                dst[co * hw..(co + 1) * hw].fill(*b);
            }
            let src = if self.kernel == 3 {
                im2col3(x.sample(s), self.in_channels, h, w, &mut col);
                &col[..]
            } else {
                x.sample(s)
            };
            gemm(self.out_channels, k, hw, &self.weight, false, src, false, dst, 1.0);
        }
        Ok(out)
    }

    /// Accumulates weight/bias gradients into `grads` and returns the input gradient.
    pub fn backward(&self, x: &Tensor, grad_out: &Tensor, grads: &mut Grads) -> Tensor {
        let grad_in = self.backward_impl(x, grad_out, Some(grads));
        grad_in
    }

    /// Input gradient only; parameters receive nothing.
    pub fn backward_input(&self, x: &Tensor, grad_out: &Tensor) -> Tensor {
        self.backward_impl(x, grad_out, None)
    }

    fn backward_impl(&self, x: &Tensor, grad_out: &Tensor, mut grads: Option<&mut Grads>) -> Tensor {
        let [n, _, h, w] = x.shape();
        let hw = h * w;
        let k = self.patch_len();
        let mut grad_in = Tensor::zeros(x.shape());
        let mut col = vec![0.0; k * hw];
        let mut dw = vec![0.0; self.weight.len()];
        let mut db = vec![0.0; self.bias.len()];
        for s in 0..n {
            let go = grad_out.sample(s);
            if grads.is_some() {
                for (co, b) in db.iter_mut().enumerate() {
                    *b += go[co * hw..(co + 1) * hw].iter().sum::<f32>();
                }
                if self.kernel == 3 {
                    im2col3(x.sample(s), self.in_channels, h, w, &mut col);
                    gemm(self.out_channels, hw, k, go, false, &col, true, &mut dw, 1.0);
                } else {
                    gemm(self.out_channels, hw, k, go, false, x.sample(s), true, &mut dw, 1.0);
                }
            }
            if self.kernel == 3 {
                gemm(k, self.out_channels, hw, &self.weight, true, go, false, &mut col, 0.0);
                col2im3(&col, self.in_channels, h, w, grad_in.sample_mut(s));
            } else {
                gemm(k, self.out_channels, hw, &self.weight, true, go, false, grad_in.sample_mut(s), 0.0);
            }
        }
        if let Some(grads) = grads.as_deref_mut() {
            for (g, d) in grads.slot(&self.weight_name(), dw.len()).iter_mut().zip(&dw) {
                *g += d;
            }
            for (g, d) in grads.slot(&self.bias_name(), db.len()).iter_mut().zip(&db) {
                *g += d;
            }
        }
        grad_in
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

pub fn relu_in_place(x: &mut Tensor) {
    x.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Gradient of ReLU given its output.
pub fn relu_backward(out: &Tensor, grad_out: &Tensor) -> Tensor {
    let mut g = grad_out.clone();
    for (gv, o) in g.data_mut().iter_mut().zip(out.data()) {
        if *o <= 0.0 {
            *gv = 0.0;
        }
    }
    g
}

/// 2×2 max pooling with stride 2. Returns the pooled tensor and the flat argmax index per output.
pub fn max_pool2(x: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let [n, c, h, w] = x.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!(
            "max pooling needs even spatial size, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let mut arg = vec![0u32; n * c * oh * ow];
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        let base = p * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let i0 = base + 2 * y * w + 2 * xx;
                let cands = [i0, i0 + 1, i0 + w, i0 + w + 1];
                let mut best = cands[0];
                for &ci in &cands[1..] {
                    if src[ci] > src[best] {
                        best = ci;
                    }
                }
                let o = p * oh * ow + y * ow + xx;
                dst[o] = src[best];
                arg[o] = best as u32;
            }
        }
    }
    Ok((out, arg))
}

pub fn max_pool2_backward(input_shape: [usize; 4], argmax: &[u32], grad_out: &Tensor) -> Tensor {
    let mut g = Tensor::zeros(input_shape);
    let gd = g.data_mut();
    for (o, &i) in argmax.iter().enumerate() {
        gd[i as usize] += grad_out.data()[o];
    }
    g
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out.data_mut()[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            let srow = &src[(y / 2) * w..(y / 2 + 1) * w];
            let drow = &mut dst[y * ow..(y + 1) * ow];
            for (xx, d) in drow.iter_mut().enumerate() {
                *d = srow[xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(grad_out: &Tensor) -> Tensor {
    let [n, c, oh, ow] = grad_out.shape();
    let (h, w) = (oh / 2, ow / 2);
    let mut g = Tensor::zeros([n, c, h, w]);
    for p in 0..n * c {
        let src = &grad_out.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut g.data_mut()[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                dst[(y / 2) * w + xx / 2] += src[y * ow + xx];
            }
        }
    }
    g
}

/// Channel concatenation `[a, b]`.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [n, ca, h, w] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    if n != nb || h != hb || w != wb {
        return Err(Error::invalid(format!(
            "channel concat mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros([n, ca + cb, h, w]);
    for s in 0..n {
        let dst = out.sample_mut(s);
        let (da, db) = dst.split_at_mut(a.sample_len());
        da.copy_from_slice(a.sample(s));
        db.copy_from_slice(b.sample(s));
    }
    Ok(out)
}

pub fn concat_channels_backward(grad: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let [n, c, h, w] = grad.shape();
    let mut ga = Tensor::zeros([n, ca, h, w]);
    let mut gb = Tensor::zeros([n, c - ca, h, w]);
    for s in 0..n {
        let src = grad.sample(s);
        let split = ca * h * w;
        ga.sample_mut(s).copy_from_slice(&src[..split]);
        gb.sample_mut(s).copy_from_slice(&src[split..]);
    }
    (ga, gb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct nested-loop convolution used as an oracle.
    fn conv_direct(conv: &Conv2d, x: &Tensor) -> Tensor {
        let [n, _, h, w] = x.shape();
        let k = conv.kernel as isize;
        let pad = k / 2;
        let mut out = Tensor::zeros([n, conv.out_channels, h, w]);
        for s in 0..n {
            for co in 0..conv.out_channels {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = conv.bias[co] as f64;
                        for ci in 0..conv.in_channels {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = y as isize + ky - pad;
                                    let sx = xx as isize + kx - pad;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    let wi = ((co * conv.in_channels + ci) * conv.kernel + ky as usize)
                                        * conv.kernel
                                        + kx as usize;
                                    acc += conv.weight[wi] as f64
                                        * x.at(s, ci, sy as usize, sx as usize) as f64;
                                }
                            }
                        }
                        out.plane_mut(s, co)[y * w + xx] = acc as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for kernel in [1, 3] {
            let mut conv = Conv2d::new("c", 3, 4, kernel, &mut rng);
            conv.bias = vec![0.1, -0.2, 0.3, 0.0];
            let x = random_tensor([2, 3, 5, 6], &mut rng);
            let fast = conv.forward(&x).unwrap();
            let slow = conv_direct(&conv, &x);
            assert!(fast.max_abs_diff(&slow) < 1e-5);
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv2d::new("c", 2, 3, 3, &mut rng);
        let x = random_tensor([2, 2, 4, 5], &mut rng);
        let probe = random_tensor([2, 3, 4, 5], &mut rng);
        let loss = |c: &Conv2d, x: &Tensor| -> f64 {
            let y = c.forward(x).unwrap();
            y.data().iter().zip(probe.data()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let mut grads = Grads::new();
        let gx = conv.backward(&x, &probe, &mut grads);
        let eps = 1e-2;
        for i in [0, 7, 19, 33] {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * eps as f64);
            assert!((fd - gx.data()[i] as f64).abs() < 1e-3, "x[{i}]: {fd} vs {}", gx.data()[i]);
        }
        let gw = grads.get("c.weight").unwrap();
        for i in [0, 5, 17, 40] {
            let mut cp = conv.clone();
            cp.weight[i] += eps;
            let mut cm = conv.clone();
            cm.weight[i] -= eps;
            let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * eps as f64);
            assert!((fd - gw[i] as f64).abs() < 1e-3, "w[{i}]: {fd} vs {}", gw[i]);
        }
        let gb = grads.get("c.bias").unwrap();
        let expected: f32 = probe.plane(0, 1).iter().chain(probe.plane(1, 1)).sum();
        assert!((gb[1] - expected).abs() < 1e-4);
    }

    #[test]
    fn pool_and_upsample_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor([1, 2, 4, 4], &mut rng);
        let (p, arg) = max_pool2(&x).unwrap();
        assert_eq!(p.shape(), [1, 2, 2, 2]);
        let g = max_pool2_backward(x.shape(), &arg, &Tensor::full(p.shape(), 1.0));
        assert_eq!(g.data().iter().sum::<f32>(), 8.0);

        let u = upsample2(&p);
        assert_eq!(u.shape(), [1, 2, 4, 4]);
        // <up(p), q> == <p, up^T(q)>
        let q = random_tensor(u.shape(), &mut rng);
        let lhs: f32 = u.data().iter().zip(q.data()).map(|(a, b)| a * b).sum();
        let back = upsample2_backward(&q);
        let rhs: f32 = p.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }

    #[test]
    fn odd_pool_rejected() {
        assert!(max_pool2(&Tensor::zeros([1, 1, 3, 4])).is_err());
    }
}
