//! Layer kernels. Activations are flat, example-major, channel-major
//! within an example (`[n][c][h][w]`).

use serde::{Deserialize, Serialize};

use super::scalar::{gemm, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseGeom {
    pub inputs: usize,
    pub outputs: usize,
}

/// Valid (unpadded), stride-1 convolution with square kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kernel: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.in_h + 1 - self.kernel
    }
    pub fn out_w(&self) -> usize {
        self.in_w + 1 - self.kernel
    }
    fn patch(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }
    fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolGeom {
    pub ch: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl PoolGeom {
    pub fn out_h(&self) -> usize {
        self.in_h / 2
    }
    pub fn out_w(&self) -> usize {
        self.in_w / 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Dense(DenseGeom),
    Conv(ConvGeom),
    MaxPool(PoolGeom),
    Relu { len: usize },
}

/// A layer plus the offset of its weights and biases in the flat parameter
/// buffer (unused for parameter-free layers).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layer {
    pub kind: LayerKind,
    pub w_off: usize,
    pub b_off: usize,
}

impl Layer {
    pub fn in_len(&self) -> usize {
        match self.kind {
            LayerKind::Dense(g) => g.inputs,
            LayerKind::Conv(g) => g.in_ch * g.in_h * g.in_w,
            LayerKind::MaxPool(g) => g.ch * g.in_h * g.in_w,
            LayerKind::Relu { len } => len,
        }
    }

    pub fn out_len(&self) -> usize {
        match self.kind {
            LayerKind::Dense(g) => g.outputs,
            LayerKind::Conv(g) => g.out_ch * g.positions(),
            LayerKind::MaxPool(g) => g.ch * g.out_h() * g.out_w(),
            LayerKind::Relu { len } => len,
        }
    }

    /// (weight count, fan-in, bias count)
    pub fn param_shape(&self) -> Option<(usize, usize, usize)> {
        match self.kind {
            LayerKind::Dense(g) => Some((g.inputs * g.outputs, g.inputs, g.outputs)),
            LayerKind::Conv(g) => Some((g.out_ch * g.patch(), g.patch(), g.out_ch)),
            _ => None,
        }
    }
}

/// Per-layer data saved by the forward pass for the backward pass.
pub(crate) enum Saved<T> {
    Nothing,
    Cols(Vec<T>),
    Argmax(Vec<u32>),
}

pub(crate) fn forward<T: Scalar>(
    layer: &Layer,
    params: &[T],
    x: &[T],
    n: usize,
) -> (Vec<T>, Saved<T>) {
    match layer.kind {
        LayerKind::Dense(g) => {
            let (w, b) = dense_params(layer, g, params);
            let mut y = vec![T::zero(); n * g.outputs];
            gemm(false, true, n, g.outputs, g.inputs, T::one(), x, w, T::zero(), &mut y);
            for row in y.chunks_exact_mut(g.outputs) {
                for (v, &bias) in row.iter_mut().zip(b) {
                    *v = *v + bias;
                }
            }
            (y, Saved::Nothing)
        }
        LayerKind::Conv(g) => conv_forward(layer, g, params, x, n),
        LayerKind::MaxPool(g) => pool_forward(g, x, n),
        LayerKind::Relu { .. } => (
            x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(),
            Saved::Nothing,
        ),
    }
}

/// Back-propagates `dy` through one layer. Parameter gradients are
/// accumulated into `grad` when given; the input gradient is returned when
/// `want_dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Scalar>(
    layer: &Layer,
    params: &[T],
    x: &[T],
    y: &[T],
    saved: &Saved<T>,
    dy: &[T],
    n: usize,
    grad: Option<&mut [T]>,
    want_dx: bool,
) -> Option<Vec<T>> {
    match layer.kind {
        LayerKind::Dense(g) => {
            let (w, _) = dense_params(layer, g, params);
            if let Some(grad) = grad {
                let (gw, gb) = split_grad(layer, g.inputs * g.outputs, g.outputs, grad);
                gemm(true, false, g.outputs, g.inputs, n, T::one(), dy, x, T::one(), gw);
                for row in dy.chunks_exact(g.outputs) {
                    for (acc, &d) in gb.iter_mut().zip(row) {
                        *acc = *acc + d;
                    }
                }
            }
            want_dx.then(|| {
                let mut dx = vec![T::zero(); n * g.inputs];
                gemm(false, false, n, g.inputs, g.outputs, T::one(), dy, w, T::zero(), &mut dx);
                dx
            })
        }
        LayerKind::Conv(g) => {
            let Saved::Cols(cols) = saved else {
                unreachable!("conv forward always saves columns")
            };
            conv_backward(layer, g, params, cols, dy, n, grad, want_dx)
        }
        LayerKind::MaxPool(g) => {
            let Saved::Argmax(idx) = saved else {
                unreachable!("pool forward always saves argmax")
            };
            want_dx.then(|| {
                let in_len = g.ch * g.in_h * g.in_w;
                let out_len = g.ch * g.out_h() * g.out_w();
                let mut dx = vec![T::zero(); n * in_len];
                for img in 0..n {
                    let dxi = &mut dx[img * in_len..(img + 1) * in_len];
                    let range = img * out_len..(img + 1) * out_len;
                    for (&i, &d) in idx[range.clone()].iter().zip(&dy[range]) {
                        dxi[i as usize] = dxi[i as usize] + d;
                    }
                }
                dx
            })
        }
        LayerKind::Relu { .. } => want_dx.then(|| {
            y.iter()
                .zip(dy)
                .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
                .collect()
        }),
    }
}

fn dense_params<'a, T>(layer: &Layer, g: DenseGeom, params: &'a [T]) -> (&'a [T], &'a [T]) {
    (
        &params[layer.w_off..layer.w_off + g.inputs * g.outputs],
        &params[layer.b_off..layer.b_off + g.outputs],
    )
}

fn split_grad<'a, T>(
    layer: &Layer,
    nw: usize,
    nb: usize,
    grad: &'a mut [T],
) -> (&'a mut [T], &'a mut [T]) {
    // Weights always directly precede their biases.
    debug_assert_eq!(layer.b_off, layer.w_off + nw);
    let (w, b) = grad[layer.w_off..layer.b_off + nb].split_at_mut(nw);
    (w, b)
}

fn conv_forward<T: Scalar>(
    layer: &Layer,
    g: ConvGeom,
    params: &[T],
    x: &[T],
    n: usize,
) -> (Vec<T>, Saved<T>) {
    let (k, oh, ow) = (g.kernel, g.out_h(), g.out_w());
    let (p, kk) = (g.positions(), g.patch());
    let bp = n * p;
    let in_len = g.in_ch * g.in_h * g.in_w;

    // im2col: row r = (c, ki, kj), column = (image, oy, ox)
    let mut cols = vec![T::zero(); kk * bp];
    for img in 0..n {
        let xi = &x[img * in_len..(img + 1) * in_len];
        for c in 0..g.in_ch {
            let plane = &xi[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
            for ki in 0..k {
                for kj in 0..k {
                    let r = (c * k + ki) * k + kj;
                    let row = &mut cols[r * bp + img * p..r * bp + (img + 1) * p];
                    for oy in 0..oh {
                        let src = &plane[(oy + ki) * g.in_w + kj..][..ow];
                        row[oy * ow..(oy + 1) * ow].copy_from_slice(src);
                    }
                }
            }
        }
    }

    let w = &params[layer.w_off..layer.w_off + g.out_ch * kk];
    let b = &params[layer.b_off..layer.b_off + g.out_ch];
    let mut out = vec![T::zero(); g.out_ch * bp];
    gemm(false, false, g.out_ch, bp, kk, T::one(), w, &cols, T::zero(), &mut out);

    let mut y = vec![T::zero(); n * g.out_ch * p];
    for o in 0..g.out_ch {
        for img in 0..n {
            let src = &out[o * bp + img * p..o * bp + (img + 1) * p];
            let dst = &mut y[(img * g.out_ch + o) * p..(img * g.out_ch + o + 1) * p];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + b[o];
            }
        }
    }
    (y, Saved::Cols(cols))
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Scalar>(
    layer: &Layer,
    g: ConvGeom,
    params: &[T],
    cols: &[T],
    dy: &[T],
    n: usize,
    grad: Option<&mut [T]>,
    want_dx: bool,
) -> Option<Vec<T>> {
    let (k, oh, ow) = (g.kernel, g.out_h(), g.out_w());
    let (p, kk) = (g.positions(), g.patch());
    let bp = n * p;

    // (image, channel, position) -> (channel, image * position)
    let mut d_out = vec![T::zero(); g.out_ch * bp];
    for img in 0..n {
        for o in 0..g.out_ch {
            let src = &dy[(img * g.out_ch + o) * p..(img * g.out_ch + o + 1) * p];
            d_out[o * bp + img * p..o * bp + (img + 1) * p].copy_from_slice(src);
        }
    }

    if let Some(grad) = grad {
        let (gw, gb) = split_grad(layer, g.out_ch * kk, g.out_ch, grad);
        gemm(false, true, g.out_ch, kk, bp, T::one(), &d_out, cols, T::one(), gw);
        for (o, acc) in gb.iter_mut().enumerate() {
            *acc = *acc + d_out[o * bp..(o + 1) * bp].iter().copied().sum::<T>();
        }
    }

    if !want_dx {
        return None;
    }
    let w = &params[layer.w_off..layer.w_off + g.out_ch * kk];
    let mut d_cols = vec![T::zero(); kk * bp];
    gemm(true, false, kk, bp, g.out_ch, T::one(), w, &d_out, T::zero(), &mut d_cols);

    let in_len = g.in_ch * g.in_h * g.in_w;
    let mut dx = vec![T::zero(); n * in_len];
    for img in 0..n {
        let dxi = &mut dx[img * in_len..(img + 1) * in_len];
        for c in 0..g.in_ch {
            let plane = &mut dxi[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
            for ki in 0..k {
                for kj in 0..k {
                    let r = (c * k + ki) * k + kj;
                    let row = &d_cols[r * bp + img * p..r * bp + (img + 1) * p];
                    for oy in 0..oh {
                        let dst = &mut plane[(oy + ki) * g.in_w + kj..][..ow];
                        for (d, &s) in dst.iter_mut().zip(&row[oy * ow..(oy + 1) * ow]) {
                            *d = *d + s;
                        }
                    }
                }
            }
        }
    }
    Some(dx)
}

fn pool_forward<T: Scalar>(g: PoolGeom, x: &[T], n: usize) -> (Vec<T>, Saved<T>) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let in_len = g.ch * g.in_h * g.in_w;
    let out_len = g.ch * oh * ow;
    let mut y = Vec::with_capacity(n * out_len);
    let mut idx = Vec::with_capacity(n * out_len);
    for img in 0..n {
        let xi = &x[img * in_len..(img + 1) * in_len];
        for c in 0..g.ch {
            let base = c * g.in_h * g.in_w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * g.in_w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let j = base + (2 * oy + dy) * g.in_w + 2 * ox + dx;
                        if xi[j] > xi[best] {
                            best = j;
                        }
                    }
                    y.push(xi[best]);
                    idx.push(best as u32);
                }
            }
        }
    }
    (y, Saved::Argmax(idx))
}
