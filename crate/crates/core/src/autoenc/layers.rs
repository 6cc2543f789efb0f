//! Forward and backward kernels for the three layer kinds.
//!
//! Activations are stored per sample in HWC order (channel fastest), so a
//! stride-2 valid convolution becomes an im2col copy of contiguous channel
//! runs followed by one GEMM per chunk of samples.

use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use crate::par;

/// Samples per GEMM; bounds the size of the im2col buffers.
const CHUNK: usize = 16;
pub const STRIDE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OpKind {
    Conv,
    TransposedConv,
    FullyConnected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Spatial { h: usize, w: usize, c: usize },
    Flat(usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Spatial { h, w, c } => h * w * c,
            Shape::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn spatial(&self) -> (usize, usize, usize) {
        match *self {
            Shape::Spatial { h, w, c } => (h, w, c),
            Shape::Flat(n) => (1, 1, n),
        }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Shape::Spatial { h, w, c } => write!(f, "{h}x{w}x{c}"),
            Shape::Flat(n) => write!(f, "{n}"),
        }
    }
}

/// Static description of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub op: OpKind,
    pub in_shape: Shape,
    pub out_shape: Shape,
    pub kernel: usize,
    pub stride: usize,
    pub activation: Activation,
}

pub fn conv_out(size: usize, k: usize) -> usize {
    (size - k) / STRIDE + 1
}

pub fn tconv_out(size: usize, k: usize) -> usize {
    (size - 1) * STRIDE + k
}

impl LayerSpec {
    pub fn conv(h: usize, c_in: usize, c_out: usize, k: usize, activation: Activation) -> Self {
        let o = conv_out(h, k);
        Self {
            op: OpKind::Conv,
            in_shape: Shape::Spatial { h, w: h, c: c_in },
            out_shape: Shape::Spatial { h: o, w: o, c: c_out },
            kernel: k,
            stride: STRIDE,
            activation,
        }
    }

    pub fn tconv(h: usize, c_in: usize, c_out: usize, k: usize, activation: Activation) -> Self {
        let o = tconv_out(h, k);
        Self {
            op: OpKind::TransposedConv,
            in_shape: Shape::Spatial { h, w: h, c: c_in },
            out_shape: Shape::Spatial { h: o, w: o, c: c_out },
            kernel: k,
            stride: STRIDE,
            activation,
        }
    }

    pub fn dense(n_in: usize, n_out: usize, activation: Activation) -> Self {
        Self {
            op: OpKind::FullyConnected,
            in_shape: Shape::Flat(n_in),
            out_shape: Shape::Flat(n_out),
            kernel: 1,
            stride: 1,
            activation,
        }
    }

    /// Weight tensor dimensions as stored: conv `[c_out, k, k, c_in]`,
    /// transposed conv `[c_in, k, k, c_out]`, dense `[out, in]`.
    pub fn weight_dims(&self) -> Vec<usize> {
        let (_, _, ci) = self.in_shape.spatial();
        let (_, _, co) = self.out_shape.spatial();
        let k = self.kernel;
        match self.op {
            OpKind::Conv => vec![co, k, k, ci],
            OpKind::TransposedConv => vec![ci, k, k, co],
            OpKind::FullyConnected => vec![self.out_shape.len(), self.in_shape.len()],
        }
    }

    pub fn weight_len(&self) -> usize {
        self.weight_dims().iter().product()
    }

    pub fn bias_len(&self) -> usize {
        match self.op {
            OpKind::FullyConnected => self.out_shape.len(),
            _ => self.out_shape.spatial().2,
        }
    }

    /// Average number of inputs feeding one output, and outputs fed by one input.
    pub fn fans(&self) -> (f64, f64) {
        let k2 = (self.kernel * self.kernel) as f64;
        let (hi, wi, ci) = self.in_shape.spatial();
        let (ho, wo, co) = self.out_shape.spatial();
        let (pi, po) = ((hi * wi) as f64, (ho * wo) as f64);
        match self.op {
            OpKind::FullyConnected => (self.in_shape.len() as f64, self.out_shape.len() as f64),
            OpKind::Conv => (ci as f64 * k2, co as f64 * k2 * po / pi),
            OpKind::TransposedConv => (ci as f64 * k2 * pi / po, co as f64 * k2),
        }
    }
}

/// Copies the `k x k` patches of a stride-2 grid into rows of `cols`
/// (`out_h * out_w` rows of `k * k * c` values).
fn im2col<T: Scalar>(x: &[T], w: usize, c: usize, k: usize, out_h: usize, out_w: usize, cols: &mut [T]) {
    let r = k * k * c;
    for oy in 0..out_h {
        for ox in 0..out_w {
            let row = &mut cols[(oy * out_w + ox) * r..][..r];
            for ky in 0..k {
                let src = ((oy * STRIDE + ky) * w + ox * STRIDE) * c;
                row[ky * k * c..(ky + 1) * k * c].copy_from_slice(&x[src..src + k * c]);
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds patch rows back onto the grid.
fn col2im_add<T: Scalar>(cols: &[T], w: usize, c: usize, k: usize, out_h: usize, out_w: usize, x: &mut [T]) {
    let r = k * k * c;
    for oy in 0..out_h {
        for ox in 0..out_w {
            let row = &cols[(oy * out_w + ox) * r..][..r];
            for ky in 0..k {
                let dst = ((oy * STRIDE + ky) * w + ox * STRIDE) * c;
                for (d, &s) in x[dst..dst + k * c].iter_mut().zip(&row[ky * k * c..(ky + 1) * k * c]) {
                    *d += s;
                }
            }
        }
    }
}

fn activate<T: Scalar>(act: Activation, out: &mut [T]) {
    match act {
        Activation::Relu => out.iter_mut().for_each(|v| *v = v.relu()),
        Activation::Sigmoid => out.iter_mut().for_each(|v| *v = v.sigmoid()),
        Activation::None => {}
    }
}

/// Gradient w.r.t. pre-activation given the activation output.
fn activation_backward<T: Scalar>(act: Activation, output: &[T], d_out: &[T]) -> Vec<T> {
    match act {
        Activation::Relu => output
            .iter()
            .zip(d_out)
            .map(|(&y, &g)| if y > T::ZERO { g } else { T::ZERO })
            .collect(),
        Activation::Sigmoid => output.iter().zip(d_out).map(|(&y, &g)| g * y * (T::ONE - y)).collect(),
        Activation::None => d_out.to_vec(),
    }
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T]) {
    for row in out.chunks_exact_mut(bias.len()) {
        row.iter_mut().zip(bias).for_each(|(o, &b)| *o += b);
    }
}

fn accumulate_bias_grad<T: Scalar>(dz: &[T], db: &mut [T]) {
    for row in dz.chunks_exact(db.len()) {
        db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
    }
}

/// Forward pass of one layer over `batch` samples laid out back to back.
pub fn forward<T: Scalar>(spec: &LayerSpec, weight: &[T], bias: &[T], input: &[T], batch: usize) -> Vec<T> {
    let in_len = spec.in_shape.len();
    let out_len = spec.out_shape.len();
    debug_assert_eq!(input.len(), batch * in_len);
    let mut out = vec![T::ZERO; batch * out_len];
    let (hi, wi, ci) = spec.in_shape.spatial();
    let (ho, wo, co) = spec.out_shape.spatial();
    let k = spec.kernel;

    match spec.op {
        OpKind::FullyConnected => {
            T::gemm_raw(
                batch,
                in_len,
                out_len,
                T::ONE,
                input,
                in_len as isize,
                1,
                weight,
                1,
                in_len as isize,
                T::ZERO,
                &mut out,
                out_len as isize,
                1,
            );
        }
        OpKind::Conv => {
            let (p, r) = (ho * wo, k * k * ci);
            let mut cols = vec![T::ZERO; CHUNK.min(batch) * p * r];
            for s0 in (0..batch).step_by(CHUNK) {
                let s = CHUNK.min(batch - s0);
                let cols = &mut cols[..s * p * r];
                let x = &input[s0 * in_len..(s0 + s) * in_len];
                par::for_each_chunk_mut(cols, p * r, |i, buf| {
                    im2col(&x[i * in_len..(i + 1) * in_len], wi, ci, k, ho, wo, buf)
                });
                T::gemm_raw(
                    s * p,
                    r,
                    co,
                    T::ONE,
                    cols,
                    r as isize,
                    1,
                    weight,
                    1,
                    r as isize,
                    T::ZERO,
                    &mut out[s0 * out_len..(s0 + s) * out_len],
                    co as isize,
                    1,
                );
            }
        }
        OpKind::TransposedConv => {
            let (p, r) = (hi * wi, k * k * co);
            let mut cols = vec![T::ZERO; CHUNK.min(batch) * p * r];
            for s0 in (0..batch).step_by(CHUNK) {
                let s = CHUNK.min(batch - s0);
                let cols = &mut cols[..s * p * r];
                T::gemm_raw(
                    s * p,
                    ci,
                    r,
                    T::ONE,
                    &input[s0 * in_len..(s0 + s) * in_len],
                    ci as isize,
                    1,
                    weight,
                    r as isize,
                    1,
                    T::ZERO,
                    cols,
                    r as isize,
                    1,
                );
                let cols = &*cols;
                par::for_each_chunk_mut(&mut out[s0 * out_len..(s0 + s) * out_len], out_len, |i, o| {
                    col2im_add(&cols[i * p * r..(i + 1) * p * r], wo, co, k, hi, wi, o)
                });
            }
        }
    }
    add_bias(&mut out, bias);
    activate(spec.activation, &mut out);
    out
}

/// Backward pass of one layer. Accumulates into `dw`/`db` and returns the
/// gradient w.r.t. the layer input when `need_input_grad` is set.
#[allow(clippy::too_many_arguments)]
pub fn backward<T: Scalar>(
    spec: &LayerSpec,
    weight: &[T],
    input: &[T],
    output: &[T],
    d_out: &[T],
    batch: usize,
    dw: &mut [T],
    db: &mut [T],
    need_input_grad: bool,
) -> Option<Vec<T>> {
    let in_len = spec.in_shape.len();
    let out_len = spec.out_shape.len();
    let dz = activation_backward(spec.activation, output, d_out);
    accumulate_bias_grad(&dz, db);
    let (hi, wi, ci) = spec.in_shape.spatial();
    let (ho, wo, co) = spec.out_shape.spatial();
    let k = spec.kernel;
    let mut dx = need_input_grad.then(|| vec![T::ZERO; batch * in_len]);

    match spec.op {
        OpKind::FullyConnected => {
            T::gemm_raw(
                out_len,
                batch,
                in_len,
                T::ONE,
                &dz,
                1,
                out_len as isize,
                input,
                in_len as isize,
                1,
                T::ONE,
                dw,
                in_len as isize,
                1,
            );
            if let Some(dx) = dx.as_mut() {
                T::gemm_raw(
                    batch,
                    out_len,
                    in_len,
                    T::ONE,
                    &dz,
                    out_len as isize,
                    1,
                    weight,
                    in_len as isize,
                    1,
                    T::ZERO,
                    dx,
                    in_len as isize,
                    1,
                );
            }
        }
        OpKind::Conv => {
            let (p, r) = (ho * wo, k * k * ci);
            let mut cols = vec![T::ZERO; CHUNK.min(batch) * p * r];
            for s0 in (0..batch).step_by(CHUNK) {
                let s = CHUNK.min(batch - s0);
                let cols = &mut cols[..s * p * r];
                let x = &input[s0 * in_len..(s0 + s) * in_len];
                let dz = &dz[s0 * out_len..(s0 + s) * out_len];
                par::for_each_chunk_mut(cols, p * r, |i, buf| {
                    im2col(&x[i * in_len..(i + 1) * in_len], wi, ci, k, ho, wo, buf)
                });
                T::gemm_raw(
                    co,
                    s * p,
                    r,
                    T::ONE,
                    dz,
                    1,
                    co as isize,
                    cols,
                    r as isize,
                    1,
                    T::ONE,
                    dw,
                    r as isize,
                    1,
                );
                if let Some(dx) = dx.as_mut() {
                    T::gemm_raw(
                        s * p,
                        co,
                        r,
                        T::ONE,
                        dz,
                        co as isize,
                        1,
                        weight,
                        r as isize,
                        1,
                        T::ZERO,
                        cols,
                        r as isize,
                        1,
                    );
                    let cols = &*cols;
                    par::for_each_chunk_mut(&mut dx[s0 * in_len..(s0 + s) * in_len], in_len, |i, d| {
                        col2im_add(&cols[i * p * r..(i + 1) * p * r], wi, ci, k, ho, wo, d)
                    });
                }
            }
        }
        OpKind::TransposedConv => {
            let (p, r) = (hi * wi, k * k * co);
            let mut cols = vec![T::ZERO; CHUNK.min(batch) * p * r];
            for s0 in (0..batch).step_by(CHUNK) {
                let s = CHUNK.min(batch - s0);
                let cols = &mut cols[..s * p * r];
                let x = &input[s0 * in_len..(s0 + s) * in_len];
                let dz = &dz[s0 * out_len..(s0 + s) * out_len];
                par::for_each_chunk_mut(cols, p * r, |i, buf| {
                    im2col(&dz[i * out_len..(i + 1) * out_len], wo, co, k, hi, wi, buf)
                });
                T::gemm_raw(
                    ci,
                    s * p,
                    r,
                    T::ONE,
                    x,
                    1,
                    ci as isize,
                    cols,
                    r as isize,
                    1,
                    T::ONE,
                    dw,
                    r as isize,
                    1,
                );
                if let Some(dx) = dx.as_mut() {
                    T::gemm_raw(
                        s * p,
                        r,
                        ci,
                        T::ONE,
                        cols,
                        r as isize,
                        1,
                        weight,
                        1,
                        r as isize,
                        T::ZERO,
                        &mut dx[s0 * in_len..(s0 + s) * in_len],
                        ci as isize,
                        1,
                    );
                }
            }
        }
    }
    dx
}
