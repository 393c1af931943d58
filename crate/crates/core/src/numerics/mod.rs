//! Dense kernels used throughout the crate: 3D convolution and pooling,
//! scaled dot-product attention, activations and linear maps.
//!
//! All arithmetic is done in `f64`. Kernels are plain nested loops, with
//! rayon used only to spread independent output cells across threads, so
//! results do not depend on the thread count.

mod tensor;

pub use tensor::Tensor;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

const AXES: [&str; 3] = ["temporal", "height", "width"];

/// Weights and geometry of a 3D convolution over `B×C×T×H×W` inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    /// `out_channels × in_channels × k_t × k_h × k_w`
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

impl Conv3dSpec {
    pub fn new(
        weights: Tensor,
        bias: Vec<f64>,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Self> {
        weights.expect_rank(5, "conv3d weights")?;
        let s = weights.shape();
        let (out_channels, in_channels) = (s[0], s[1]);
        if bias.len() != out_channels {
            return Err(Error::invalid(format!(
                "conv3d bias has {} entries, expected {out_channels}",
                bias.len()
            )));
        }
        if let Some(axis) = stride.iter().position(|&st| st == 0) {
            return Err(Error::invalid(format!(
                "conv3d {} stride must be >= 1",
                AXES[axis]
            )));
        }
        Ok(Self {
            in_channels,
            out_channels,
            kernel: [s[2], s[3], s[4]],
            stride,
            padding,
            weights,
            bias,
        })
    }

    /// Fixed-seed random weights scaled by `1/sqrt(fan_in)`, zero bias.
    pub fn random<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel.iter().product::<usize>()) as f64;
        let weights = Tensor::randn(
            &[out_channels, in_channels, kernel[0], kernel[1], kernel[2]],
            1.0 / fan_in.sqrt(),
            rng,
        );
        Self::new(weights, vec![0.0; out_channels], stride, padding)
            .expect("random conv spec is well-formed")
    }

    /// Output spatial dims for the given input dims.
    pub fn output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for axis in 0..3 {
            let padded = input[axis] + 2 * self.padding[axis];
            if padded < self.kernel[axis] {
                return Err(Error::invalid(format!(
                    "conv3d {} axis: padded size {padded} smaller than kernel {}",
                    AXES[axis], self.kernel[axis]
                )));
            }
            out[axis] = (padded - self.kernel[axis]) / self.stride[axis] + 1;
        }
        Ok(out)
    }
}

/// 3D cross-correlation of `input` (`B×C×T×H×W`) with zero padding.
pub fn conv3d(input: &Tensor, spec: &Conv3dSpec) -> Result<Tensor> {
    input.expect_rank(5, "conv3d input")?;
    let s = input.shape();
    let (batch, channels) = (s[0], s[1]);
    if channels != spec.in_channels {
        return Err(Error::invalid(format!(
            "conv3d channel axis: input has {channels} channels, spec expects {}",
            spec.in_channels
        )));
    }
    let in_dims = [s[2], s[3], s[4]];
    let [ot, oh, ow] = spec.output_dims(in_dims)?;
    let [kt, kh, kw] = spec.kernel;
    let [st, sh, sw] = spec.stride;
    let [pt, ph, pw] = spec.padding;
    let [it, ih, iw] = in_dims;
    let x = input.data();
    let w = spec.weights.data();
    let plane = ot * oh * ow;

    let mut out = vec![0.0; batch * spec.out_channels * plane];
    out.par_chunks_mut(plane)
        .enumerate()
        .for_each(|(bo, dst)| {
            let (b, o) = (bo / spec.out_channels, bo % spec.out_channels);
            for t in 0..ot {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = spec.bias[o];
                        for c in 0..channels {
                            let xbase = (b * channels + c) * it * ih * iw;
                            let wbase = (o * channels + c) * kt * kh * kw;
                            for dt in 0..kt {
                                let ti = (t * st + dt) as isize - pt as isize;
                                if ti < 0 || ti >= it as isize {
                                    continue;
                                }
                                for dy in 0..kh {
                                    let yi = (y * sh + dy) as isize - ph as isize;
                                    if yi < 0 || yi >= ih as isize {
                                        continue;
                                    }
                                    for dx in 0..kw {
                                        let xi = (xo * sw + dx) as isize - pw as isize;
                                        if xi < 0 || xi >= iw as isize {
                                            continue;
                                        }
                                        let xv = x[xbase
                                            + (ti as usize * ih + yi as usize) * iw
                                            + xi as usize];
                                        acc += xv * w[wbase + (dt * kh + dy) * kw + dx];
                                    }
                                }
                            }
                        }
                        dst[(t * oh + y) * ow + xo] = acc;
                    }
                }
            }
        });
    Tensor::new(vec![batch, spec.out_channels, ot, oh, ow], out)
}

/// Non-overlapping mean pooling over the last three axes of a `B×C×T×H×W`
/// tensor. Trailing cells that do not fill a window are dropped.
pub fn avg_pool3d(input: &Tensor, window: [usize; 3]) -> Result<Tensor> {
    input.expect_rank(5, "avg_pool3d input")?;
    let s = input.shape();
    let lead = s[0] * s[1];
    let dims = [s[2], s[3], s[4]];
    for axis in 0..3 {
        if window[axis] == 0 || window[axis] > dims[axis] {
            return Err(Error::invalid(format!(
                "avg_pool3d {} window {} does not fit input size {}",
                AXES[axis], window[axis], dims[axis]
            )));
        }
    }
    let [wt, wh, ww] = window;
    let [it, ih, iw] = dims;
    let (ot, oh, ow) = (it / wt, ih / wh, iw / ww);
    let norm = 1.0 / (wt * wh * ww) as f64;
    let x = input.data();
    let mut out = Vec::with_capacity(lead * ot * oh * ow);
    for l in 0..lead {
        let base = l * it * ih * iw;
        for t in 0..ot {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = 0.0;
                    for dt in 0..wt {
                        for dy in 0..wh {
                            let row = base + ((t * wt + dt) * ih + y * wh + dy) * iw + xo * ww;
                            acc += x[row..row + ww].iter().sum::<f64>();
                        }
                    }
                    out.push(acc * norm);
                }
            }
        }
    }
    Tensor::new(vec![s[0], s[1], ot, oh, ow], out)
}

fn check_heads(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize)> {
    q.expect_rank(3, "attention queries")?;
    k.expect_rank(3, "attention keys")?;
    v.expect_rank(3, "attention values")?;
    let (heads, head_dim) = (q.dim(1), q.dim(2));
    if k.dim(1) != heads || v.dim(1) != heads {
        return Err(Error::invalid(format!(
            "attention head count mismatch: q {heads}, k {}, v {}",
            k.dim(1),
            v.dim(1)
        )));
    }
    if k.dim(2) != head_dim {
        return Err(Error::invalid(format!(
            "attention head dim mismatch: q {head_dim}, k {}",
            k.dim(2)
        )));
    }
    if k.dim(0) != v.dim(0) {
        return Err(Error::invalid(format!(
            "attention key/value length mismatch: {} vs {}",
            k.dim(0),
            v.dim(0)
        )));
    }
    Ok((heads, head_dim))
}

/// Softmax-normalised attention weights, laid out `L_q × N_h × L_k`.
///
/// Key tensors always have at least one row (`Tensor` forbids zero dims),
/// so the context can never be empty here.
pub fn attention_weights(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    q.expect_rank(3, "attention queries")?;
    k.expect_rank(3, "attention keys")?;
    let (heads, head_dim) = (q.dim(1), q.dim(2));
    if k.dim(1) != heads || k.dim(2) != head_dim {
        return Err(Error::invalid(format!(
            "attention key shape {:?} incompatible with queries {:?}",
            k.shape(),
            q.shape()
        )));
    }
    let lk = k.dim(0);
    let scale = 1.0 / (head_dim as f64).sqrt();
    let (qd, kd) = (q.data(), k.data());
    let mut out = vec![0.0; q.dim(0) * heads * lk];
    out.par_chunks_mut(heads * lk)
        .enumerate()
        .for_each(|(i, dst)| {
            for h in 0..heads {
                let qrow = &qd[(i * heads + h) * head_dim..][..head_dim];
                let row = &mut dst[h * lk..(h + 1) * lk];
                for (j, r) in row.iter_mut().enumerate() {
                    let krow = &kd[(j * heads + h) * head_dim..][..head_dim];
                    *r = dot(qrow, krow) * scale;
                }
                softmax_in_place(row);
            }
        });
    Tensor::new(vec![q.dim(0), heads, lk], out)
}

/// `softmax(Q Kᵀ / sqrt(d_h)) V` per head.
///
/// Shapes: `Q: L_q×N_h×d_h`, `K: L_k×N_h×d_h`, `V: L_k×N_h×d_v`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (heads, head_dim) = check_heads(q, k, v)?;
    let lk = k.dim(0);
    let dv = v.dim(2);
    let scale = 1.0 / (head_dim as f64).sqrt();
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![0.0; q.dim(0) * heads * dv];
    out.par_chunks_mut(heads * dv)
        .enumerate()
        .for_each_init(
            || vec![0.0; lk],
            |logits, (i, dst)| {
                for h in 0..heads {
                    let qrow = &qd[(i * heads + h) * head_dim..][..head_dim];
                    for (j, l) in logits.iter_mut().enumerate() {
                        let krow = &kd[(j * heads + h) * head_dim..][..head_dim];
                        *l = dot(qrow, krow) * scale;
                    }
                    softmax_in_place(logits);
                    let acc = &mut dst[h * dv..(h + 1) * dv];
                    for (j, &p) in logits.iter().enumerate() {
                        let vrow = &vd[(j * heads + h) * dv..][..dv];
                        for (a, &x) in acc.iter_mut().zip(vrow) {
                            *a += p * x;
                        }
                    }
                }
            },
        );
    Tensor::new(vec![q.dim(0), heads, dv], out)
}

/// Multiply-add count of one `attention` call (QKᵀ plus the value mix).
pub fn attention_flops(lq: usize, lk: usize, heads: usize, head_dim: usize) -> u64 {
    2 * 2 * (lq * lk * heads * head_dim) as u64
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(input: &Tensor) -> Tensor {
    input.map(|x| x * sigmoid(x))
}

/// Mean/variance normalisation over the last axis of an `N×d` tensor.
pub fn layer_norm(x: &Tensor) -> Tensor {
    let d = x.dim(x.rank() - 1);
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + 1e-6).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    out
}

/// Affine map `x W + b` over the last axis, `W: in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Vec<f64>) -> Result<Self> {
        weight.expect_rank(2, "linear weight")?;
        if bias.len() != weight.dim(1) {
            return Err(Error::invalid(format!(
                "linear bias has {} entries, expected {}",
                bias.len(),
                weight.dim(1)
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn random<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let w = Tensor::randn(&[input, output], 1.0 / (input as f64).sqrt(), rng);
        Self {
            weight: w,
            bias: vec![0.0; output],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let w = Tensor::from_fn(&[dim, dim], |i| if i / dim == i % dim { 1.0 } else { 0.0 });
        Self {
            weight: w,
            bias: vec![0.0; dim],
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn out_features(&self) -> usize {
        self.weight.dim(1)
    }

    /// Applies the map to the last axis of `x`; leading axes are preserved.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (fin, fout) = (self.in_features(), self.out_features());
        let last = x.dim(x.rank() - 1);
        if last != fin {
            return Err(Error::invalid(format!(
                "linear input width {last}, expected {fin}"
            )));
        }
        let rows = x.len() / fin;
        let w = self.weight.data();
        let mut out = vec![0.0; rows * fout];
        out.par_chunks_mut(fout)
            .zip(x.data().par_chunks(fin))
            .for_each(|(dst, src)| {
                dst.copy_from_slice(&self.bias);
                for (i, &xi) in src.iter().enumerate() {
                    for (d, &wv) in dst.iter_mut().zip(&w[i * fout..(i + 1) * fout]) {
                        *d += xi * wv;
                    }
                }
            });
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = fout;
        Tensor::new(shape, out)
    }
}
