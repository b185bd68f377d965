//! Reverse-mode differentiation over an explicitly recorded operation list.
//!
//! Every op appends a node holding its forward value; [`Graph::backward`]
//! walks the list in reverse and accumulates exact gradients. Parameters
//! enter as named leaves so their gradients can be read back into a
//! [`ParamStore`](super::params::ParamStore).

use super::params::ParamStore;
use super::tensor::{Scalar, Tensor};
use crate::error::Result;
use crate::metrics;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    AddChannel { x: Var, bias: Var },
    AddRow { x: Var, bias: Var },
    Conv2d { x: Var, w: Var, dil: usize },
    Depthwise { x: Var, w: Var, dil: usize },
    Silu(Var),
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Vec<Var>),
    SliceAxis0 { x: Var, start: usize },
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SoftmaxRows(Var),
    Reshape(Var),
    PixelShuffle(Var),
    PixelUnshuffle(Var),
    Idwt2([Var; 4]),
    Clamp { x: Var, lo: T, hi: T },
    Abs(Var),
    Mean(Var),
    Sum(Var),
    Tv(Var),
    Ssim { x: Var, grad: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    param: Option<String>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one scalar output with respect to every node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

fn silu_grad<T: Scalar>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}

fn chw(shape: &[usize]) -> (usize, usize, usize) {
    assert_eq!(shape.len(), 3, "expected [C, H, W], got {shape:?}");
    (shape[0], shape[1], shape[2])
}

fn mat(shape: &[usize]) -> (usize, usize) {
    assert_eq!(shape.len(), 2, "expected [rows, cols], got {shape:?}");
    (shape[0], shape[1])
}

/// `[Cin, H, W]` -> `[Cin*k*k, H*W]` for a same-padded dilated kernel.
fn im2col<T: Scalar>(x: &[T], cin: usize, h: usize, w: usize, k: usize, dil: usize) -> Vec<T> {
    let pad = (dil * (k - 1) / 2) as isize;
    let hw = h * w;
    let mut cols = vec![T::zero(); cin * k * k * hw];
    for ci in 0..cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = (ky * dil) as isize - pad;
                let dx = (kx * dil) as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst_row = &mut dst[y * w..(y + 1) * w];
                    let x0 = (-dx).max(0) as usize;
                    let x1 = ((w as isize - dx).min(w as isize)).max(0) as usize;
                    for xo in x0..x1 {
                        dst_row[xo] = src_row[(xo as isize + dx) as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Scalar>(cols: &[T], gx: &mut [T], cin: usize, h: usize, w: usize, k: usize, dil: usize) {
    let pad = (dil * (k - 1) / 2) as isize;
    let hw = h * w;
    for ci in 0..cin {
        let plane = &mut gx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = (ky * dil) as isize - pad;
                let dx = (kx * dil) as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = (-dx).max(0) as usize;
                    let x1 = ((w as isize - dx).min(w as isize)).max(0) as usize;
                    for xo in x0..x1 {
                        plane[sy as usize * w + (xo as isize + dx) as usize] += src[y * w + xo];
                    }
                }
            }
        }
    }
}

/// Depthwise same-padded dilated convolution, `w` is `[C, k, k]`.
fn depthwise<T: Scalar>(x: &[T], wt: &[T], c: usize, h: usize, w: usize, k: usize, dil: usize) -> Vec<T> {
    let pad = (dil * (k - 1) / 2) as isize;
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let wv = wt[(ch * k + ky) * k + kx];
                let dy = (ky * dil) as isize - pad;
                let dx = (kx * dil) as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xo in 0..w {
                        let sx = xo as isize + dx;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        out[(ch * h + y) * w + xo] += wv * x[(ch * h + sy as usize) * w + sx as usize];
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn idwt2_chw<T: Scalar>(bands: [&[T]; 4], c: usize, h: usize, w: usize) -> Vec<T> {
    let half = T::of(0.5);
    let (ow, hw) = (2 * w, h * w);
    let mut out = vec![T::zero(); c * 4 * hw];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let i = ch * hw + y * w + x;
                let (a, v, hh, d) = (bands[0][i], bands[1][i], bands[2][i], bands[3][i]);
                let base = ch * 4 * hw;
                out[base + (2 * y) * ow + 2 * x] = half * (a + v + hh + d);
                out[base + (2 * y) * ow + 2 * x + 1] = half * (a + v - hh - d);
                out[base + (2 * y + 1) * ow + 2 * x] = half * (a - v + hh - d);
                out[base + (2 * y + 1) * ow + 2 * x + 1] = half * (a - v - hh + d);
            }
        }
    }
    out
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op, param: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Non-trainable input.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Trainable leaf bound to a named parameter of `store`.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let value = store.get(name)?.clone();
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].param = Some(name.to_string());
        Ok(v)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape, vb.shape, "elementwise shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        let shape = va.shape.clone();
        self.push(Tensor::new(shape, data), op)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let va = self.value(a);
        let t = Tensor::new(va.shape.clone(), va.data.iter().map(|&x| f(x)).collect());
        self.push(t, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x + c, Op::AddConst(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    /// `x[c, ...] + bias[c]`.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(bias));
        let c = vx.shape[0];
        assert_eq!(vb.numel(), c, "channel bias length");
        let inner = vx.numel() / c;
        let mut data = vx.data.clone();
        for ch in 0..c {
            let b = vb.data[ch];
            for v in &mut data[ch * inner..(ch + 1) * inner] {
                *v += b;
            }
        }
        let shape = vx.shape.clone();
        self.push(Tensor::new(shape, data), Op::AddChannel { x, bias })
    }

    /// `x[n, d] + bias[d]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(bias));
        let (n, d) = mat(&vx.shape);
        assert_eq!(vb.numel(), d, "row bias length");
        let mut data = vx.data.clone();
        for r in 0..n {
            for (v, &b) in data[r * d..(r + 1) * d].iter_mut().zip(&vb.data) {
                *v += b;
            }
        }
        self.push(Tensor::new(vec![n, d], data), Op::AddRow { x, bias })
    }

    /// Same-padded dilated convolution; `w` is `[Cout, Cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, dil: usize) -> Var {
        let (cin, h, wd) = chw(self.shape(x));
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be [Cout, Cin, k, k]");
        assert_eq!(ws[1], cin, "conv input channels");
        let (cout, k) = (ws[0], ws[2]);
        let hw = h * wd;
        let mut out = vec![T::zero(); cout * hw];
        let wv = &self.value(w).data;
        if k == 1 {
            T::gemm(cout, cin, hw, wv, false, &self.value(x).data, false, &mut out, false);
        } else {
            let cols = im2col(&self.value(x).data, cin, h, wd, k, dil);
            T::gemm(cout, cin * k * k, hw, wv, false, &cols, false, &mut out, false);
        }
        self.push(Tensor::new(vec![cout, h, wd], out), Op::Conv2d { x, w, dil })
    }

    /// Per-channel convolution; `w` is `[C, k, k]`.
    pub fn depthwise(&mut self, x: Var, w: Var, dil: usize) -> Var {
        let (c, h, wd) = chw(self.shape(x));
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 3, "depthwise weight must be [C, k, k]");
        assert_eq!(ws[0], c, "depthwise channels");
        let out = depthwise(&self.value(x).data, &self.value(w).data, c, h, wd, ws[1], dil);
        self.push(Tensor::new(vec![c, h, wd], out), Op::Depthwise { x, w, dil })
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, silu, Op::Silu(a))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let (c, h, w) = chw(self.shape(x));
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims");
        let (oh, ow) = (h / 2, w / 2);
        let q = T::of(0.25);
        let vx = &self.value(x).data;
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xo in 0..ow {
                    let i = |yy: usize, xx: usize| vx[(ch * h + yy) * w + xx];
                    out[(ch * oh + y) * ow + xo] =
                        q * (i(2 * y, 2 * xo) + i(2 * y, 2 * xo + 1) + i(2 * y + 1, 2 * xo) + i(2 * y + 1, 2 * xo + 1));
                }
            }
        }
        self.push(Tensor::new(vec![c, oh, ow], out), Op::AvgPool2(x))
    }

    /// Nearest-neighbour x2.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let (c, h, w) = chw(self.shape(x));
        let (oh, ow) = (2 * h, 2 * w);
        let vx = &self.value(x).data;
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xo in 0..ow {
                    out[(ch * oh + y) * ow + xo] = vx[(ch * h + y / 2) * w + xo / 2];
                }
            }
        }
        self.push(Tensor::new(vec![c, oh, ow], out), Op::Upsample2(x))
    }

    /// Concatenate along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let first = self.shape(parts[0]).to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.shape[1..], first[1..], "concat trailing dims");
            lead += v.shape[0];
            data.extend_from_slice(&v.data);
        }
        let mut shape = first;
        shape[0] = lead;
        self.push(Tensor::new(shape, data), Op::Concat(parts.to_vec()))
    }

    /// Rows `start..start+len` of axis 0.
    pub fn slice_axis0(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x);
        assert!(start + len <= v.shape[0], "slice out of range");
        let inner = v.numel() / v.shape[0];
        let data = v.data[start * inner..(start + len) * inner].to_vec();
        let mut shape = v.shape.clone();
        shape[0] = len;
        self.push(Tensor::new(shape, data), Op::SliceAxis0 { x, start })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = mat(self.shape(a));
        let (k2, n) = mat(self.shape(b));
        assert_eq!(k, k2, "matmul inner dims");
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            &self.value(a).data,
            false,
            &self.value(b).data,
            false,
            &mut out,
            false,
        );
        self.push(Tensor::new(vec![m, n], out), Op::MatMul(a, b))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = mat(self.shape(a));
        let (n, k2) = mat(self.shape(b));
        assert_eq!(k, k2, "matmul_nt inner dims");
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            &self.value(a).data,
            false,
            &self.value(b).data,
            true,
            &mut out,
            false,
        );
        self.push(Tensor::new(vec![m, n], out), Op::MatMulNT(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (m, n) = mat(self.shape(x));
        let v = &self.value(x).data;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v[i * n + j];
            }
        }
        self.push(Tensor::new(vec![n, m], out), Op::Transpose(x))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (m, n) = mat(self.shape(x));
        assert!(start + len <= n, "column slice out of range");
        let v = &self.value(x).data;
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&v[i * n + start..i * n + start + len]);
        }
        self.push(Tensor::new(vec![m, len], out), Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let m = self.shape(parts[0])[0];
        let widths: Vec<usize> = parts.iter().map(|&p| mat(self.shape(p)).1).collect();
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &wd) in parts.iter().zip(&widths) {
                let v = self.value(p);
                assert_eq!(v.shape[0], m, "concat_cols row count");
                out.extend_from_slice(&v.data[i * wd..(i + 1) * wd]);
            }
        }
        self.push(Tensor::new(vec![m, n], out), Op::ConcatCols(parts.to_vec()))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (m, n) = mat(self.shape(x));
        let v = &self.value(x).data;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &v[i * n..(i + 1) * n];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                sum += e;
            }
            for o in &mut out[i * n..(i + 1) * n] {
                *o = *o / sum;
            }
        }
        self.push(Tensor::new(vec![m, n], out), Op::SoftmaxRows(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x);
        assert_eq!(v.numel(), shape.iter().product::<usize>(), "reshape size");
        let t = Tensor::new(shape.to_vec(), v.data.clone());
        self.push(t, Op::Reshape(x))
    }

    /// `[4C, H, W] -> [C, 2H, 2W]`; channel `4c + 2i + j` lands at offset `(i, j)`.
    pub fn pixel_shuffle(&mut self, x: Var) -> Var {
        let (c4, h, w) = chw(self.shape(x));
        assert_eq!(c4 % 4, 0, "pixel_shuffle needs 4C channels");
        let c = c4 / 4;
        let v = &self.value(x).data;
        let mut out = vec![T::zero(); c4 * h * w];
        for ch in 0..c {
            for i in 0..2 {
                for j in 0..2 {
                    let src = ((4 * ch + 2 * i + j) * h) * w;
                    for y in 0..h {
                        for xo in 0..w {
                            out[(ch * 2 * h + 2 * y + i) * 2 * w + 2 * xo + j] = v[src + y * w + xo];
                        }
                    }
                }
            }
        }
        self.push(Tensor::new(vec![c, 2 * h, 2 * w], out), Op::PixelShuffle(x))
    }

    /// Inverse of [`Graph::pixel_shuffle`].
    pub fn pixel_unshuffle(&mut self, x: Var) -> Var {
        let (c, h2, w2) = chw(self.shape(x));
        assert!(h2 % 2 == 0 && w2 % 2 == 0, "pixel_unshuffle needs even dims");
        let (h, w) = (h2 / 2, w2 / 2);
        let v = &self.value(x).data;
        let mut out = vec![T::zero(); c * h2 * w2];
        for ch in 0..c {
            for i in 0..2 {
                for j in 0..2 {
                    let dst = ((4 * ch + 2 * i + j) * h) * w;
                    for y in 0..h {
                        for xo in 0..w {
                            out[dst + y * w + xo] = v[(ch * h2 + 2 * y + i) * w2 + 2 * xo + j];
                        }
                    }
                }
            }
        }
        self.push(Tensor::new(vec![4 * c, h, w], out), Op::PixelUnshuffle(x))
    }

    /// Haar synthesis of `[A, V, H, D]` feature maps.
    pub fn idwt2(&mut self, bands: [Var; 4]) -> Var {
        let (c, h, w) = chw(self.shape(bands[0]));
        for b in &bands[1..] {
            assert_eq!(self.shape(*b), self.shape(bands[0]), "idwt2 band shapes");
        }
        let out = idwt2_chw(
            [
                &self.value(bands[0]).data,
                &self.value(bands[1]).data,
                &self.value(bands[2]).data,
                &self.value(bands[3]).data,
            ],
            c,
            h,
            w,
        );
        self.push(Tensor::new(vec![c, 2 * h, 2 * w], out), Op::Idwt2(bands))
    }

    /// Same value, cut off from the gradient.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.input(v)
    }

    /// Clamp; gradient passes only strictly inside `(lo, hi)`.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, |v| v.max(lo).min(hi), Op::Clamp { x, lo, hi })
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.data.iter().copied().sum::<T>() / T::of(v.numel() as f64);
        self.push(Tensor::scalar(m), Op::Mean(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Anisotropic total variation of a `[C, H, W]` map: mean absolute
    /// row difference plus mean absolute column difference.
    pub fn tv(&mut self, x: Var) -> Var {
        let (c, h, w) = chw(self.shape(x));
        let v = &self.value(x).data;
        let value = tv_chw(v, c, h, w);
        self.push(Tensor::scalar(value), Op::Tv(x))
    }

    /// Mean SSIM between `x` and a fixed `[C, H, W]` target.
    pub fn ssim(&mut self, x: Var, target: &Tensor<T>, peak: f64) -> Result<Var> {
        let (c, h, w) = chw(self.shape(x));
        assert_eq!(target.shape, self.shape(x), "ssim target shape");
        let (value, grad) = metrics::ssim_planes(&self.value(x).data, &target.data, c, h, w, peak, true)?;
        let grad = grad.expect("requested gradient");
        Ok(self.push(Tensor::scalar(value), Op::Ssim { x, grad }))
    }

    /// Gradients of scalar `out` with respect to every node.
    pub fn backward(&self, out: Var) -> Gradients<T> {
        assert_eq!(self.value(out).numel(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    /// Add gradients of every parameter leaf into `store`.
    pub fn accumulate_param_grads(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) -> Result<()> {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(name), Some(g)) = (&node.param, &grads.grads[i]) {
                store.grad_mut(name)?.add_assign(g);
            }
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, delta: Vec<T>| {
            let slot = &mut grads[v.0];
            match slot {
                Some(t) => {
                    for (a, b) in t.data.iter_mut().zip(delta) {
                        *a += b;
                    }
                }
                None => *slot = Some(Tensor::new(self.nodes[v.0].value.shape.clone(), delta)),
            }
        };
        let gd = &g.data;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, gd.clone());
                acc(*b, gd.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, gd.clone());
                acc(*b, gd.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                acc(*a, gd.iter().zip(vb).map(|(&g, &y)| g * y).collect());
                acc(*b, gd.iter().zip(va).map(|(&g, &x)| g * x).collect());
            }
            Op::Scale(a, s) => acc(*a, gd.iter().map(|&x| x * *s).collect()),
            Op::AddConst(a) => acc(*a, gd.clone()),
            Op::AddChannel { x, bias } => {
                let c = self.value(*bias).numel();
                let inner = gd.len() / c;
                let gb = (0..c)
                    .map(|ch| gd[ch * inner..(ch + 1) * inner].iter().copied().sum())
                    .collect();
                acc(*x, gd.clone());
                acc(*bias, gb);
            }
            Op::AddRow { x, bias } => {
                let d = self.value(*bias).numel();
                let mut gb = vec![T::zero(); d];
                for row in gd.chunks(d) {
                    for (b, &v) in gb.iter_mut().zip(row) {
                        *b += v;
                    }
                }
                acc(*x, gd.clone());
                acc(*bias, gb);
            }
            Op::Conv2d { x, w, dil } => {
                let (cin, h, wd) = chw(self.shape(*x));
                let ws = self.shape(*w);
                let (cout, k) = (ws[0], ws[2]);
                let hw = h * wd;
                let wv = &self.value(*w).data;
                let xv = &self.value(*x).data;
                let mut gw = vec![T::zero(); wv.len()];
                if k == 1 {
                    T::gemm(cout, hw, cin, gd, false, xv, true, &mut gw, false);
                    let mut gx = vec![T::zero(); cin * hw];
                    T::gemm(cin, cout, hw, wv, true, gd, false, &mut gx, false);
                    acc(*x, gx);
                } else {
                    let cols = im2col(xv, cin, h, wd, k, *dil);
                    let rows = cin * k * k;
                    T::gemm(cout, hw, rows, gd, false, &cols, true, &mut gw, false);
                    let mut gcols = vec![T::zero(); rows * hw];
                    T::gemm(rows, cout, hw, wv, true, gd, false, &mut gcols, false);
                    let mut gx = vec![T::zero(); cin * hw];
                    col2im_add(&gcols, &mut gx, cin, h, wd, k, *dil);
                    acc(*x, gx);
                }
                acc(*w, gw);
            }
            Op::Depthwise { x, w, dil } => {
                let (c, h, wd) = chw(self.shape(*x));
                let k = self.shape(*w)[1];
                let pad = (dil * (k - 1) / 2) as isize;
                let xv = &self.value(*x).data;
                let wv = &self.value(*w).data;
                let mut gx = vec![T::zero(); xv.len()];
                let mut gw = vec![T::zero(); wv.len()];
                for ch in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let wi = (ch * k + ky) * k + kx;
                            let dy = (ky * dil) as isize - pad;
                            let dx = (kx * dil) as isize - pad;
                            let mut gsum = T::zero();
                            for y in 0..h {
                                let sy = y as isize + dy;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                for xo in 0..wd {
                                    let sx = xo as isize + dx;
                                    if sx < 0 || sx >= wd as isize {
                                        continue;
                                    }
                                    let si = (ch * h + sy as usize) * wd + sx as usize;
                                    let go = gd[(ch * h + y) * wd + xo];
                                    gsum += go * xv[si];
                                    gx[si] += go * wv[wi];
                                }
                            }
                            gw[wi] = gsum;
                        }
                    }
                }
                acc(*x, gx);
                acc(*w, gw);
            }
            Op::Silu(a) => {
                let va = &self.value(*a).data;
                acc(*a, gd.iter().zip(va).map(|(&g, &x)| g * silu_grad(x)).collect());
            }
            Op::AvgPool2(x) => {
                let (c, h, w) = chw(self.shape(*x));
                let (oh, ow) = (h / 2, w / 2);
                let q = T::of(0.25);
                let mut gx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..h {
                        for xo in 0..w {
                            gx[(ch * h + y) * w + xo] = q * gd[(ch * oh + y / 2) * ow + xo / 2];
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Upsample2(x) => {
                let (c, h, w) = chw(self.shape(*x));
                let (oh, ow) = (2 * h, 2 * w);
                let mut gx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        for xo in 0..ow {
                            gx[(ch * h + y / 2) * w + xo / 2] += gd[(ch * oh + y) * ow + xo];
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    acc(p, gd[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::SliceAxis0 { x, start } => {
                let v = self.value(*x);
                let inner = v.numel() / v.shape[0];
                let mut gx = vec![T::zero(); v.numel()];
                gx[start * inner..start * inner + gd.len()].copy_from_slice(gd);
                acc(*x, gx);
            }
            Op::MatMul(a, b) => {
                let (m, k) = mat(self.shape(*a));
                let n = self.shape(*b)[1];
                let mut ga = vec![T::zero(); m * k];
                T::gemm(m, n, k, gd, false, &self.value(*b).data, true, &mut ga, false);
                let mut gb = vec![T::zero(); k * n];
                T::gemm(k, m, n, &self.value(*a).data, true, gd, false, &mut gb, false);
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = mat(self.shape(*a));
                let n = self.shape(*b)[0];
                let mut ga = vec![T::zero(); m * k];
                T::gemm(m, n, k, gd, false, &self.value(*b).data, false, &mut ga, false);
                let mut gb = vec![T::zero(); n * k];
                T::gemm(n, m, k, gd, true, &self.value(*a).data, false, &mut gb, false);
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Transpose(x) => {
                let (m, n) = mat(self.shape(*x));
                let mut gx = vec![T::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        gx[i * n + j] = gd[j * m + i];
                    }
                }
                acc(*x, gx);
            }
            Op::SliceCols { x, start } => {
                let (m, n) = mat(self.shape(*x));
                let len = g.shape[1];
                let mut gx = vec![T::zero(); m * n];
                for i in 0..m {
                    gx[i * n + start..i * n + start + len].copy_from_slice(&gd[i * len..(i + 1) * len]);
                }
                acc(*x, gx);
            }
            Op::ConcatCols(parts) => {
                let n = g.shape[1];
                let m = g.shape[0];
                let mut off = 0;
                for &p in parts {
                    let wd = self.shape(p)[1];
                    let mut gp = Vec::with_capacity(m * wd);
                    for i in 0..m {
                        gp.extend_from_slice(&gd[i * n + off..i * n + off + wd]);
                    }
                    acc(p, gp);
                    off += wd;
                }
            }
            Op::SoftmaxRows(x) => {
                let (m, n) = mat(&g.shape);
                let y = &node.value.data;
                let mut gx = vec![T::zero(); m * n];
                for i in 0..m {
                    let r = i * n..(i + 1) * n;
                    let dot: T = y[r.clone()].iter().zip(&gd[r.clone()]).map(|(&a, &b)| a * b).sum();
                    for j in r {
                        gx[j] = y[j] * (gd[j] - dot);
                    }
                }
                acc(*x, gx);
            }
            Op::Reshape(x) => acc(*x, gd.clone()),
            Op::PixelShuffle(x) => {
                let (c4, h, w) = chw(self.shape(*x));
                let c = c4 / 4;
                let mut gx = vec![T::zero(); c4 * h * w];
                for ch in 0..c {
                    for i in 0..2 {
                        for j in 0..2 {
                            let src = ((4 * ch + 2 * i + j) * h) * w;
                            for y in 0..h {
                                for xo in 0..w {
                                    gx[src + y * w + xo] = gd[(ch * 2 * h + 2 * y + i) * 2 * w + 2 * xo + j];
                                }
                            }
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::PixelUnshuffle(x) => {
                let (c, h2, w2) = chw(self.shape(*x));
                let (h, w) = (h2 / 2, w2 / 2);
                let mut gx = vec![T::zero(); c * h2 * w2];
                for ch in 0..c {
                    for i in 0..2 {
                        for j in 0..2 {
                            let dst = ((4 * ch + 2 * i + j) * h) * w;
                            for y in 0..h {
                                for xo in 0..w {
                                    gx[(ch * h2 + 2 * y + i) * w2 + 2 * xo + j] = gd[dst + y * w + xo];
                                }
                            }
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Idwt2(bands) => {
                // orthonormal: the adjoint of synthesis is analysis
                let (c, h, w) = chw(self.shape(bands[0]));
                let (ow, hw) = (2 * w, h * w);
                let half = T::of(0.5);
                let mut out: [Vec<T>; 4] = std::array::from_fn(|_| vec![T::zero(); c * hw]);
                for ch in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            let base = ch * 4 * hw;
                            let p00 = gd[base + 2 * y * ow + 2 * x];
                            let p01 = gd[base + 2 * y * ow + 2 * x + 1];
                            let p10 = gd[base + (2 * y + 1) * ow + 2 * x];
                            let p11 = gd[base + (2 * y + 1) * ow + 2 * x + 1];
                            let i = ch * hw + y * w + x;
                            out[0][i] = half * (p00 + p01 + p10 + p11);
                            out[1][i] = half * (p00 + p01 - p10 - p11);
                            out[2][i] = half * (p00 - p01 + p10 - p11);
                            out[3][i] = half * (p00 - p01 - p10 + p11);
                        }
                    }
                }
                for (b, gb) in bands.iter().zip(out) {
                    acc(*b, gb);
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = &self.value(*x).data;
                acc(
                    *x,
                    gd.iter()
                        .zip(xv)
                        .map(|(&g, &v)| if v > *lo && v < *hi { g } else { T::zero() })
                        .collect(),
                );
            }
            Op::Abs(x) => {
                let xv = &self.value(*x).data;
                acc(
                    *x,
                    gd.iter()
                        .zip(xv)
                        .map(|(&g, &v)| {
                            if v > T::zero() {
                                g
                            } else if v < T::zero() {
                                -g
                            } else {
                                T::zero()
                            }
                        })
                        .collect(),
                );
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let v = gd[0] / T::of(n as f64);
                acc(*x, vec![v; n]);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                acc(*x, vec![gd[0]; n]);
            }
            Op::Tv(x) => {
                let (c, h, w) = chw(self.shape(*x));
                acc(*x, tv_grad_chw(&self.value(*x).data, c, h, w, gd[0]));
            }
            Op::Ssim { x, grad } => {
                acc(*x, grad.iter().map(|&v| v * gd[0]).collect());
            }
        }
    }
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

pub(crate) fn tv_chw<T: Scalar>(v: &[T], c: usize, h: usize, w: usize) -> T {
    let mut rows = T::zero();
    let mut cols = T::zero();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let i = (ch * h + y) * w + x;
                if y + 1 < h {
                    rows += (v[i + w] - v[i]).abs();
                }
                if x + 1 < w {
                    cols += (v[i + 1] - v[i]).abs();
                }
            }
        }
    }
    let mut total = T::zero();
    if h > 1 {
        total += rows / T::of((c * (h - 1) * w) as f64);
    }
    if w > 1 {
        total += cols / T::of((c * h * (w - 1)) as f64);
    }
    total
}

fn tv_grad_chw<T: Scalar>(v: &[T], c: usize, h: usize, w: usize, scale: T) -> Vec<T> {
    let mut gx = vec![T::zero(); v.len()];
    let rn = if h > 1 {
        scale / T::of((c * (h - 1) * w) as f64)
    } else {
        T::zero()
    };
    let cn = if w > 1 {
        scale / T::of((c * h * (w - 1)) as f64)
    } else {
        T::zero()
    };
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let i = (ch * h + y) * w + x;
                if y + 1 < h {
                    let s = sign(v[i + w] - v[i]) * rn;
                    gx[i + w] += s;
                    gx[i] -= s;
                }
                if x + 1 < w {
                    let s = sign(v[i + 1] - v[i]) * cn;
                    gx[i + 1] += s;
                    gx[i] -= s;
                }
            }
        }
    }
    gx
}
