//! Reverse-mode autodiff tape.
//!
//! Operations record their forward value plus a backward closure. Calling
//! [`Tape::backward`] on a scalar walks the record in reverse and accumulates
//! adjoints; gradients of leaves registered with `requires_grad` persist on
//! the tape (repeated backward calls accumulate until [`Tape::zero_grads`]).
//!
//! A tape is confined to one worker: it is not `Sync` and never shared.

use super::kernels::{self, ConvGeom};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

type BackFn<T> = Box<dyn Fn(&[T], &Tape<T>, &mut [Option<Vec<T>>])>;

struct Node<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    back: Option<BackFn<T>>,
    grad_leaf: bool,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    needs: Vec<bool>,
    grads: Vec<Option<Vec<T>>>,
}

fn acc_into<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize, add: impl FnOnce(&mut [T])) {
    let buf = slot.get_or_insert_with(|| vec![T::ZERO; len]);
    add(buf);
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            needs: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input value. Gradients accumulate only on leaves created
    /// with `requires_grad`.
    pub fn leaf(&mut self, value: &Tensor<T>, requires_grad: bool) -> VarId {
        self.push(
            value.shape().to_vec(),
            value.data().to_vec(),
            None,
            requires_grad,
        )
    }

    /// Convenience for constants (no gradient tracking).
    pub fn constant(&mut self, value: &Tensor<T>) -> VarId {
        self.leaf(value, false)
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: VarId) -> &[T] {
        &self.nodes[id.0].data
    }

    pub fn tensor(&self, id: VarId) -> Tensor<T> {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].data.clone())
            .expect("tape node is self-consistent")
    }

    pub fn numel(&self, id: VarId) -> usize {
        self.nodes[id.0].data.len()
    }

    /// Accumulated gradient of a `requires_grad` leaf, if backward reached it.
    pub fn grad(&self, id: VarId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<T>,
        back: Option<BackFn<T>>,
        grad_leaf: bool,
    ) -> VarId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let needs = grad_leaf || back.is_some();
        self.nodes.push(Node {
            shape,
            data,
            back,
            grad_leaf,
        });
        self.needs.push(needs);
        self.grads.push(None);
        VarId(self.nodes.len() - 1)
    }

    fn tracked(&self, ids: &[VarId]) -> bool {
        ids.iter().any(|id| self.needs[id.0])
    }

    /// Reverse sweep from a scalar loss. Leaf gradients accumulate across
    /// calls; intermediate adjoints are transient.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut work: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        work[loss.0] = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            let Some(g) = work[i].take() else { continue };
            if self.nodes[i].grad_leaf {
                let len = self.nodes[i].data.len();
                acc_into(&mut self.grads[i], len, |buf| {
                    for (b, &gv) in buf.iter_mut().zip(&g) {
                        *b = *b + gv;
                    }
                });
            }
            if let Some(back) = self.nodes[i].back.as_ref() {
                back(&g, self, &mut work);
            }
        }
        Ok(())
    }

    // ── elementwise helpers ─────────────────────────────────────────────

    fn unary(
        &mut self,
        x: VarId,
        f: impl Fn(T) -> T,
        // local derivative given (input, output)
        df: impl Fn(T, T) -> T + 'static,
    ) -> VarId {
        let shape = self.nodes[x.0].shape.clone();
        let data: Vec<T> = self.nodes[x.0].data.iter().map(|&v| f(v)).collect();
        let track = self.tracked(&[x]);
        let id = self.push(shape, data, None, false);
        if track {
            let out = id;
            let back: BackFn<T> = Box::new(move |g, tape, work| {
                let xv = tape.value(x);
                let yv = tape.value(out);
                let len = xv.len();
                acc_into(&mut work[x.0], len, |buf| {
                    for i in 0..len {
                        buf[i] = buf[i] + g[i] * df(xv[i], yv[i]);
                    }
                });
            });
            self.nodes[id.0].back = Some(back);
            self.needs[id.0] = true;
        }
        id
    }

    fn binary_same_shape(
        &mut self,
        a: VarId,
        b: VarId,
        op_name: &str,
        f: impl Fn(T, T) -> T,
        // local derivatives given (a, b, gout) -> (da, db)
        df: impl Fn(T, T, T) -> (T, T) + 'static,
    ) -> Result<VarId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::shape(format!(
                "{op_name}: shapes {:?} and {:?} differ",
                self.nodes[a.0].shape, self.nodes[b.0].shape
            )));
        }
        let shape = self.nodes[a.0].shape.clone();
        let data: Vec<T> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let track = self.tracked(&[a, b]);
        let id = self.push(shape, data, None, false);
        if track {
            let back: BackFn<T> = Box::new(move |g, tape, work| {
                let av = tape.value(a);
                let bv = tape.value(b);
                let len = av.len();
                acc_into(&mut work[a.0], len, |buf| {
                    for i in 0..len {
                        buf[i] = buf[i] + df(av[i], bv[i], g[i]).0;
                    }
                });
                acc_into(&mut work[b.0], len, |buf| {
                    for i in 0..len {
                        buf[i] = buf[i] + df(av[i], bv[i], g[i]).1;
                    }
                });
            });
            self.nodes[id.0].back = Some(back);
            self.needs[id.0] = true;
        }
        Ok(id)
    }

    // ── elementwise ops ─────────────────────────────────────────────────

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_same_shape(a, b, "add", |x, y| x + y, |_, _, g| (g, g))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_same_shape(a, b, "sub", |x, y| x - y, |_, _, g| (g, -g))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_same_shape(a, b, "mul", |x, y| x * y, |x, y, g| (g * y, g * x))
    }

    pub fn div(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_same_shape(
            a,
            b,
            "div",
            |x, y| x / y,
            |x, y, g| (g / y, -g * x / (y * y)),
        )
    }

    pub fn neg(&mut self, x: VarId) -> VarId {
        self.unary(x, |v| -v, |_, _| -T::ONE)
    }

    pub fn abs(&mut self, x: VarId) -> VarId {
        self.unary(
            x,
            |v| v.abs(),
            |v, _| {
                if v > T::ZERO {
                    T::ONE
                } else if v < T::ZERO {
                    -T::ONE
                } else {
                    T::ZERO
                }
            },
        )
    }

    pub fn square(&mut self, x: VarId) -> VarId {
        self.unary(x, |v| v * v, |v, _| T::from_f64(2.0) * v)
    }

    pub fn ln(&mut self, x: VarId) -> VarId {
        self.unary(x, |v| v.ln(), |v, _| T::ONE / v)
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        self.unary(x, sigmoid_val, |_, y| y * (T::ONE - y))
    }

    pub fn silu(&mut self, x: VarId) -> VarId {
        self.unary(
            x,
            |v| v * sigmoid_val(v),
            |v, _| {
                let s = sigmoid_val(v);
                s + v * s * (T::ONE - s)
            },
        )
    }

    pub fn gelu(&mut self, x: VarId) -> VarId {
        self.unary(x, gelu_val, |v, _| gelu_dval(v))
    }

    pub fn leaky_relu(&mut self, x: VarId, slope: f64) -> VarId {
        let s = T::from_f64(slope);
        self.unary(
            x,
            move |v| if v > T::ZERO { v } else { s * v },
            move |v, _| if v > T::ZERO { T::ONE } else { s },
        )
    }

    pub fn clamp(&mut self, x: VarId, lo: f64, hi: f64) -> VarId {
        let (l, h) = (T::from_f64(lo), T::from_f64(hi));
        self.unary(
            x,
            move |v| v.maxv(l).minv(h),
            move |v, _| {
                if v > l && v < h {
                    T::ONE
                } else {
                    T::ZERO
                }
            },
        )
    }

    pub fn add_scalar(&mut self, x: VarId, c: f64) -> VarId {
        let cv = T::from_f64(c);
        self.unary(x, move |v| v + cv, |_, _| T::ONE)
    }

    pub fn mul_scalar(&mut self, x: VarId, c: f64) -> VarId {
        let cv = T::from_f64(c);
        self.unary(x, move |v| v * cv, move |_, _| cv)
    }

    /// Divide every element by a one-element variable (learnable scalar).
    pub fn div_scalar_var(&mut self, x: VarId, s: VarId) -> Result<VarId> {
        if self.nodes[s.0].data.len() != 1 {
            return Err(Error::shape(format!(
                "div_scalar_var: divisor has shape {:?}, expected one element",
                self.nodes[s.0].shape
            )));
        }
        let sv = self.nodes[s.0].data[0];
        let shape = self.nodes[x.0].shape.clone();
        let data: Vec<T> = self.nodes[x.0].data.iter().map(|&v| v / sv).collect();
        let track = self.tracked(&[x, s]);
        let id = self.push(shape, data, None, false);
        if track {
            let back: BackFn<T> = Box::new(move |g, tape, work| {
                let xv = tape.value(x);
                let s0 = tape.value(s)[0];
                let len = xv.len();
                acc_into(&mut work[x.0], len, |buf| {
                    for i in 0..len {
                        buf[i] = buf[i] + g[i] / s0;
                    }
                });
                // Entries with exactly zero adjoint are skipped so masked
                // -inf scores cannot poison the temperature gradient.
                acc_into(&mut work[s.0], 1, |buf| {
                    let mut ds = T::ZERO;
                    for i in 0..len {
                        if g[i].to_f64() != 0.0 {
                            ds = ds - g[i] * xv[i] / (s0 * s0);
                        }
                    }
                    buf[0] = buf[0] + ds;
                });
            });
            self.nodes[id.0].back = Some(back);
            self.needs[id.0] = true;
        }
        Ok(id)
    }

    // ── linear algebra ──────────────────────────────────────────────────

    fn dims2(&self, x: VarId, op: &str) -> Result<(usize, usize)> {
        match self.nodes[x.0].shape[..] {
            [m, n] => Ok((m, n)),
            ref s => Err(Error::shape(format!("{op}: expected 2-d tensor, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (m, ka) = self.dims2(a, "matmul")?;
        let (kb, n) = self.dims2(b, "matmul")?;
        if ka != kb {
            return Err(Error::shape(format!(
                "matmul: inner dims {ka} and {kb} differ"
            )));
        }
        let mut data = vec![T::ZERO; m * n];
        kernels::matmul_nn(&self.nodes[a.0].data, &self.nodes[b.0].data, m, ka, n, &mut data);
        let track = self.tracked(&[a, b]);
        let id = self.push(vec![m, n], data, None, false);
        if track {
            let k = ka;
            let back: BackFn<T> = Box::new(move |g, tape, work| {
                let av = tape.value(a);
                let bv = tape.value(b);
                // da = g · bᵀ ; db = aᵀ · g
                acc_into(&mut work[a.0], m * k, |buf| {
                    kernels::matmul_nt(g, bv, m, n, k, buf);
                });
                acc_into(&mut work[b.0], k * n, |buf| {
                    kernels::matmul_tn(av, g, k, m, n, buf);
                });
            });
            self.nodes[id.0].back = Some(back);
            self.needs[id.0] = true;
        }
        Ok(id)
    }

    /// a · bᵀ for row-major a\[m,k\], b\[n,k\].
    pub fn matmul_tb(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (m, ka) = self.dims2(a, "matmul_tb")?;
        let (n, kb) = self.dims2(b, "matmul_tb")?;
        if ka != kb {
            return Err(Error::shape(format!(
                "matmul_tb: inner dims {ka} and {kb} differ"
            )));
        }
        let mut data = vec![T::ZERO; m * n];
        kernels::matmul_nt(&self.nodes[a.0].data, &self.nodes[b.0].data, m, ka, n, &mut data);
        let track = self.tracked(&[a, b]);
        let id = self.push(vec![m, n], data, None, false);
        if track {
            let k = ka;
            let back: BackFn<T> = Box::new(move |g, tape, work| {
                let av = tape.value(a);
                let bv = tape.value(b);
                // da = g · b ; db = gᵀ · a
                acc_into(&mut work[a.0], m * k, |buf| {
                    kernels::matmul_nn(g, bv, m, n, k, buf);
                });
                acc_into(&mut work[b.0], n * k, |buf| {
                    kernels::matmul_tn(g, av, n, m, k, buf);
                });
            });
            self.nodes[id.0].back = Some(back);
            self.needs[id.0] = true;
        }
        Ok(id)
    }

    pub fn transpose2d(&mut self, x: VarId) -> Result<VarId> {
        let (m, n) = self.dims2(x, "transpose2d")?;
        let xv = &self.nodes[x.0].data;
        let mut data = vec![T::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = xv[i * n + j];
            }
        }
        let track = self.tracked(&[x]);
        let id = self.push(vec![n, m], data, None, false);
        if track {
            let back: BackFn<T> = Box::new(move |g, _tape, work| {
                acc_into(&mut work[x.0], m * n, |buf| {
                    for i in 0..n {
                        for j in 0..m {
                            buf[j * n + i] = buf[j * n + i] + g[i * m + j];
                        }
                    }
                });
            });
            self.nodes[id.0].back = Some(back);
            self.needs[id.0] = true;
        }
        Ok(id)
    }

    /// x\[m,k\] · w\[k,n\] + b\[n\] broadcast over rows.
    pub fn linear(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
        let (m, kx) = self.dims2(x, "linear")?;
        let (kw, n) = self.dims2(w, "linear")?;
        if kx != kw {
            return Err(Error::shape(format!(
                "linear: input dim {kx} vs weight dim {kw}"
            )));
        }
        if self.nodes[b.0].shape != [n] {
            return Err(Error::shape(format!(
                "linear: bias shape {:?} vs output dim {n}",
                self.nodes[b.0].shape
            )));
        }
        let mut data = vec![T::ZERO; m * n];
        kernels::matmul_nn(&self.nodes[x.0].data, &self.nodes[w.0].data, m, kx, n, &mut data);
        {
            let bv = &self.nodes[b.0].data;
            for row in data.chunks_mut(n) {
                for j in 0..n {
                    row[j] = row[j] + bv[j];
                }
            }
        }
        let track = self.tracked(&[x, w, b]);
        let id = self.push(vec![m, n], data, None, false);
        if track {
            let k = kx;
            let back: BackFn<T> = Box::new(move |g, tape, work| {
                let xv = tape.value(x);
                let wv = tape.value(w);
                // dx = g · wᵀ
                acc_into(&mut work[x.0], m * k, |buf| {
                    kernels::matmul_nt(g, wv, m, n, k, buf);
                });
                // dw = xᵀ · g with x [m,k], giving [k,n]
                acc_into(&mut work[w.0], k * n, |buf| {
                    kernels::matmul_tn(xv, g, k, m, n, buf);
                });
                // db = column sums of g
                acc_into(&mut work[b.0], n, |buf| {
                    for row in g.chunks(n) {
                        for j in 0..n {
                            buf[j] = buf[j] + row[j];
                        }
                    }
                });
            });
            self.nodes[id.0].back = Some(back);
            self.needs[id.0] = true;
        }
        Ok(id)
    }

    // ── convolution and pooling ─────────────────────────────────────────

    fn dims4(&self, x: VarId, op: &str) -> Result<(usize, usize, usize, usize)> {
        match self.nodes[x.0].shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            ref s => Err(Error::shape(format!("{op}: expected 4-d tensor, got {s:?}"))),
        }
    }

    /// 2-D convolution, NCHW input, OIHW weight, optional per-channel bias.
    pub fn conv2d(
        &mut self,
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        stride: usize,
        pad: usize,
    ) -> Result<VarId> {
        let (n, c, h, wd) = self.dims4(x, "conv2d")?;
        let (o, cw, kh, kw) = self.dims4(w, "conv2d weight")?;
        if cw != c {
            return Err(Error::shape(format!(
                "conv2d: input has {c} channels but weight expects {cw}"
            )));
        }
        if let Some(bid) = b {
            if self.nodes[bid.0].shape != [o] {
                return Err(Error::shape(format!(
                    "conv2d: bias shape {:?} vs {o} output channels",
                    self.nodes[bid.0].shape
                )));
            }
        }
        let geom = ConvGeom::new(c, h, wd, kh, kw, stride, pad).ok_or_else(|| {
            Error::shape(format!(
                "conv2d: kernel {kh}x{kw} too large for input {h}x{wd} with padding {pad}"
            ))
        })?;
        let (oh, ow) = (geom.out_h, geom.out_w);
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let mut data = vec![T::ZERO; n * o * oh * ow];
        {
            let xv = &self.nodes[x.0].data;
            let wv = &self.nodes[w.0].data;
            let bv = b.map(|bid| self.nodes[bid.0].data.clone());
            let mut col = vec![T::ZERO; rows * cols];
            for ni in 0..n {
                im2col(&xv[ni * c * h * wd..(ni + 1) * c * h * wd], &geom, &mut col);
                let out = &mut data[ni * o * oh * ow..(ni + 1) * o * oh * ow];
                kernels::matmul_nn(wv, &col, o, rows, cols, out);
                if let Some(bv) = &bv {
                    for oc in 0..o {
                        let plane = &mut out[oc * cols..(oc + 1) * cols];
                        for v in plane.iter_mut() {
                            *v = *v + bv[oc];
                        }
                    }
                }
            }
        }
        let track = self.tracked(&[x, w]) || b.map(|bid| self.needs[bid.0]).unwrap_or(false);
        let id = self.push(vec![n, o, oh, ow], data, None, false);
        if track {
            let back: BackFn<T> = Box::new(move |g, tape, work| {
                let xv = tape.value(x);
                let wv = tape.value(w);
                let mut col = vec![T::ZERO; rows * cols];
                let mut dcol = vec![T::ZERO; rows * cols];
                // weight and bias grads
                {
                    acc_into(&mut work[w.0], o * rows, |dw| {
                        for ni in 0..n {
                            im2col(&xv[ni * c * h * wd..(ni + 1) * c * h * wd], &geom, &mut col);
                            let gout = &g[ni * o * oh * ow..(ni + 1) * o * oh * ow];
                            kernels::matmul_nt(gout, &col, o, cols, rows, dw);
                        }
                    });
                }
                if let Some(bid) = b {
                    acc_into(&mut work[bid.0], o, |db| {
                        for ni in 0..n {
                            let gout = &g[ni * o * oh * ow..(ni + 1) * o * oh * ow];
                            for oc in 0..o {
                                let mut s = T::ZERO;
                                for &gv in &gout[oc * cols..(oc + 1) * cols] {
                                    s = s + gv;
                                }
                                db[oc] = db[oc] + s;
                            }
                        }
                    });
                }
                // input grad
                acc_into(&mut work[x.0], n * c * h * wd, |dx| {
                    for ni in 0..n {
                        let gout = &g[ni * o * oh * ow..(ni + 1) * o * oh * ow];
                        for v in dcol.iter_mut() {
                            *v = T::ZERO;
                        }
                        kernels::matmul_tn(wv, gout, rows, o, cols, &mut dcol);
                        col2im_acc(&dcol, &geom, &mut dx[ni * c * h * wd..(ni + 1) * c * h * wd]);
                    }
                });
            });
            self.nodes[id.0].back = Some(back);
            self.needs[id.0] = true;
        }
        Ok(id)
    }

    /// Non-overlapping max pooling with a square window (stride = window).
    pub fn maxpool2d(&mut self, x: VarId, window: usize) -> Result<VarId> {
        let (n, c, h, w) = self.dims4(x, "maxpool2d")?;
        if window == 0 || h < window || w < window {
            return Err(Error::shape(format!(
                "maxpool2d: window {window} on {h}x{w} input"
            )));
        }
        let (oh, ow) = (h / window, w / window);
        let mut data = vec![T::ZERO; n * c * oh * ow];
        let mut argmax = vec![0u32; n * c * oh * ow];
        {
            let xv = &self.nodes[x.0].data;
            let mut oi = 0;
            for ni in 0..n {
                for ci in 0..c {
                    let plane = (ni * c + ci) * h * w;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = T::neg_infinity();
                            let mut best_idx = 0usize;
                            for ky in 0..window {
                                for kx in 0..window {
                                    let idx = plane + (oy * window + ky) * w + ox * window + kx;
                                    if xv[idx] > best {
                                        best = xv[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                            data[oi] = best;
                            argmax[oi] = best_idx as u32;
                            oi += 1;
                        }
                    }
                }
            }
        }
        let track = self.tracked(&[x]);
        let numel_in = n * c * h * w;
        let id = self.push(vec![n, c, oh, ow], data, None, false);
        if track {
            let back: BackFn<T> = Box::new(move |g, _tape, work| {
                acc_into(&mut work[x.0], numel_in, |buf| {
                    for (i, &gv) in g.iter().enumerate() {
                        let src = argmax[i] as usize;
                        buf[src] = buf[src] + gv;
                    }
                });
            });
            self.nodes[id.0].back = Some(back);
            self.needs[id.0] = true;
        }
        Ok(id)
    }

    /// Bilinear upsampling by an integer factor (half-pixel centers).
    pub fn upsample_bilinear2d(&mut self, x: VarId, factor: usize) -> Result<VarId> {
        let (n, c, h, w) = self.dims4(x, "upsample_bilinear2d")?;
        if factor == 0 {
            return Err(Error::shape("upsample_bilinear2d: zero factor".to_string()));
        }
        let (oh, ow) = (h * factor, w * factor);
        let ty = kernels::bilinear_taps(oh, h, factor);
        let tx = kernels::bilinear_taps(ow, w, factor);
        let mut data = vec![T::ZERO; n * c * oh * ow];
        {
            let xv = &self.nodes[x.0].data;
            for plane in 0..n * c {
                let src = &xv[plane * h * w..(plane + 1) * h * w];
                let dst = &mut data[plane * oh * ow..(plane + 1) * oh * ow];
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let v00 = src[y0 * w + x0].to_f64();
                        let v01 = src[y0 * w + x1].to_f64();
                        let v10 = src[y1 * w + x0].to_f64();
                        let v11 = src[y1 * w + x1].to_f64();
                        let top = v00 * (1.0 - fx) + v01 * fx;
                        let bot = v10 * (1.0 - fx) + v11 * fx;
                        dst[oy * ow + ox] = T::from_f64(top * (1.0 - fy) + bot * fy);
                    }
                }
            }
        }
        let track = self.tracked(&[x]);
        let numel_in = n * c * h * w;
        let id = self.push(vec![n, c, oh, ow], data, None, false);
        if track {
            let back: BackFn<T> = Box::new(move |g, _tape, work| {
                acc_into(&mut work[x.0], numel_in, |buf| {
                    for plane in 0..n * c {
                        let gsrc = &g[plane * oh * ow..(plane + 1) * oh * ow];
                        let dst = &mut buf[plane * h * w..(plane + 1) * h * w];
                        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                                let gv = gsrc[oy * ow + ox].to_f64();
                                dst[y0 * w + x0] = dst[y0 * w + x0]
                                    + T::from_f64(gv * (1.0 - fx) * (1.0 - fy));
                                dst[y0 * w + x1] =
                                    dst[y0 * w + x1] + T::from_f64(gv * fx * (1.0 - fy));
                                dst[y1 * w + x0] =
                                    dst[y1 * w + x0] + T::from_f64(gv * (1.0 - fx) * fy);
                                dst[y1 * w + x1] = dst[y1 * w + x1] + T::from_f64(gv * fx * fy);
                            }
                        }
                    }
                });
            });
            self.nodes[id.0].back = Some(back);
            self.needs[id.0] = true;
        }
        Ok(id)
    }

    // ── normalization ───────────────────────────────────────────────────

    /// Group normalization over NCHW with per-channel affine parameters.
    pub fn group_norm(
        &mut self,
        x: VarId,
        groups: usize,
        gamma: VarId,
        beta: VarId,
        eps: f64,
    ) -> Result<VarId> {
        let (n, c, h, w) = self.dims4(x, "group_norm")?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape(format!(
                "group_norm: {groups} groups do not divide {c} channels"
            )));
        }
        if self.nodes[gamma.0].shape != [c] || self.nodes[beta.0].shape != [c] {
            return Err(Error::shape(format!(
                "group_norm: affine shapes {:?}/{:?} vs {c} channels",
                self.nodes[gamma.0].shape, self.nodes[beta.0].shape
            )));
        }
        let cg = c / groups;
        let gsize = cg * h * w;
        let mut mu = vec![T::ZERO; n * groups];
        let mut istd = vec![T::ZERO; n * groups];
        let mut data = vec![T::ZERO; n * c * h * w];
        {
            let xv = &self.nodes[x.0].data;
            let gv = &self.nodes[gamma.0].data;
            let bv = &self.nodes[beta.0].data;
            for ni in 0..n {
                for gi in 0..groups {
                    let base = ni * c * h * w + gi * gsize;
                    let chunk = &xv[base..base + gsize];
                    let mean = chunk.iter().map(|v| v.to_f64()).sum::<f64>() / gsize as f64;
                    let var = chunk
                        .iter()
                        .map(|v| {
                            let d = v.to_f64() - mean;
                            d * d
                        })
                        .sum::<f64>()
                        / gsize as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    mu[ni * groups + gi] = T::from_f64(mean);
                    istd[ni * groups + gi] = T::from_f64(inv);
                    for j in 0..gsize {
                        let ci = gi * cg + j / (h * w);
                        let xh = T::from_f64((chunk[j].to_f64() - mean) * inv);
                        data[base + j] = xh * gv[ci] + bv[ci];
                    }
                }
            }
        }
        let track = self.tracked(&[x, gamma, beta]);
        let id = self.push(vec![n, c, h, w], data, None, false);
        if track {
            let back: BackFn<T> = Box::new(move |g, tape, work| {
                let xv = tape.value(x);
                let gv = tape.value(gamma);
                let hw = h * w;
                // d gamma / d beta
                acc_into(&mut work[gamma.0], c, |dgm| {
                    for ni in 0..n {
                        for gi in 0..groups {
                            let base = ni * c * hw + gi * gsize;
                            let m = mu[ni * groups + gi];
                            let is = istd[ni * groups + gi];
                            for j in 0..gsize {
                                let ci = gi * cg + j / hw;
                                let xh = (xv[base + j] - m) * is;
                                dgm[ci] = dgm[ci] + g[base + j] * xh;
                            }
                        }
                    }
                });
                acc_into(&mut work[beta.0], c, |dbt| {
                    for ni in 0..n {
                        for gi in 0..groups {
                            let base = ni * c * hw + gi * gsize;
                            for j in 0..gsize {
                                let ci = gi * cg + j / hw;
                                dbt[ci] = dbt[ci] + g[base + j];
                            }
                        }
                    }
                });
                // dx = istd (dxh - mean(dxh) - xh * mean(dxh*xh))
                acc_into(&mut work[x.0], n * c * hw, |dx| {
                    for ni in 0..n {
                        for gi in 0..groups {
                            let base = ni * c * hw + gi * gsize;
                            let m = mu[ni * groups + gi];
                            let is = istd[ni * groups + gi];
                            let mut s1 = 0.0f64;
                            let mut s2 = 0.0f64;
                            for j in 0..gsize {
                                let ci = gi * cg + j / hw;
                                let dxh = (g[base + j] * gv[ci]).to_f64();
                                let xh = ((xv[base + j] - m) * is).to_f64();
                                s1 += dxh;
                                s2 += dxh * xh;
                            }
                            s1 /= gsize as f64;
                            s2 /= gsize as f64;
                            for j in 0..gsize {
                                let ci = gi * cg + j / hw;
                                let dxh = (g[base + j] * gv[ci]).to_f64();
                                let xh = ((xv[base + j] - m) * is).to_f64();
                                dx[base + j] = dx[base + j]
                                    + T::from_f64(is.to_f64() * (dxh - s1 - xh * s2));
                            }
                        }
                    }
                });
            });
            self.nodes[id.0].back = Some(back);
            self.needs[id.0] = true;
        }
        Ok(id)
    }

    /// Layer normalization of each row of a 2-d tensor with affine params.
    pub fn layer_norm_rows(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        eps: f64,
    ) -> Result<VarId> {
        let (m, n) = self.dims2(x, "layer_norm_rows")?;
        if self.nodes[gamma.0].shape != [n] || self.nodes[beta.0].shape != [n] {
            return Err(Error::shape(format!(
                "layer_norm_rows: affine shapes {:?}/{:?} vs width {n}",
                self.nodes[gamma.0].shape, self.nodes[beta.0].shape
            )));
        }
        let mut mu = vec![T::ZERO; m];
        let mut istd = vec![T::ZERO; m];
        let mut data = vec![T::ZERO; m * n];
        {
            let xv = &self.nodes[x.0].data;
            let gv = &self.nodes[gamma.0].data;
            let bv = &self.nodes[beta.0].data;
            for i in 0..m {
                let row = &xv[i * n..(i + 1) * n];
                let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / n as f64;
                let var = row
                    .iter()
                    .map(|v| {
                        let d = v.to_f64() - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / n as f64;
                let inv = 1.0 / (var + eps).sqrt();
                mu[i] = T::from_f64(mean);
                istd[i] = T::from_f64(inv);
                for j in 0..n {
                    let xh = T::from_f64((row[j].to_f64() - mean) * inv);
                    data[i * n + j] = xh * gv[j] + bv[j];
                }
            }
        }
        let track = self.tracked(&[x, gamma, beta]);
        let id = self.push(vec![m, n], data, None, false);
        if track {
            let back: BackFn<T> = Box::new(move |g, tape, work| {
                let xv = tape.value(x);
                let gv = tape.value(gamma);
                acc_into(&mut work[gamma.0], n, |dgm| {
                    for i in 0..m {
                        for j in 0..n {
                            let xh = (xv[i * n + j] - mu[i]) * istd[i];
                            dgm[j] = dgm[j] + g[i * n + j] * xh;
                        }
                    }
                });
                acc_into(&mut work[beta.0], n, |dbt| {
                    for i in 0..m {
                        for j in 0..n {
                            dbt[j] = dbt[j] + g[i * n + j];
                        }
                    }
                });
                acc_into(&mut work[x.0], m * n, |dx| {
                    for i in 0..m {
                        let mut s1 = 0.0f64;
                        let mut s2 = 0.0f64;
                        for j in 0..n {
                            let dxh = (g[i * n + j] * gv[j]).to_f64();
                            let xh = ((xv[i * n + j] - mu[i]) * istd[i]).to_f64();
                            s1 += dxh;
                            s2 += dxh * xh;
                        }
                        s1 /= n as f64;
                        s2 /= n as f64;
                        for j in 0..n {
                            let dxh = (g[i * n + j] * gv[j]).to_f64();
                            let xh = ((xv[i * n + j] - mu[i]) * istd[i]).to_f64();
                            dx[i * n + j] = dx[i * n + j]
                                + T::from_f64(istd[i].to_f64() * (dxh - s1 - xh * s2));
                        }
                    }
                });
            });
            self.nodes[id.0].back = Some(back);
            self.needs[id.0] = true;
        }
        Ok(id)
    }

    // ── shape ops ───────────────────────────────────────────────────────

    pub fn reshape(&mut self, x: VarId, shape: &[usize]) -> Result<VarId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].data.len() {
            return Err(Error::shape(format!(
                "reshape: {:?} to {:?}",
                self.nodes[x.0].shape, shape
            )));
        }
        let data = self.nodes[x.0].data.clone();
        let track = self.tracked(&[x]);
        let id = self.push(shape.to_vec(), data, None, false);
        if track {
            let back: BackFn<T> = Box::new(move |g, _tape, work| {
                acc_into(&mut work[x.0], numel, |buf| {
                    for (b, &gv) in buf.iter_mut().zip(g) {
                        *b = *b + gv;
                    }
                });
            });
            self.nodes[id.0].back = Some(back);
            self.needs[id.0] = true;
        }
        Ok(id)
    }

    /// Concatenate along `axis`; all other dims must match.
    pub fn concat(&mut self, xs: &[VarId], axis: usize) -> Result<VarId> {
        if xs.is_empty() {
            return Err(Error::shape("concat: empty input list".to_string()));
        }
        let rank = self.nodes[xs[0].0].shape.len();
        if axis >= rank {
            return Err(Error::shape(format!(
                "concat: axis {axis} out of range for rank {rank}"
            )));
        }
        let mut out_shape = self.nodes[xs[0].0].shape.clone();
        let mut axis_total = 0;
        for &x in xs {
            let s = &self.nodes[x.0].shape;
            if s.len() != rank {
                return Err(Error::shape("concat: rank mismatch".to_string()));
            }
            for (d, (&a, &b)) in s.iter().zip(&out_shape).enumerate() {
                if d != axis && a != b {
                    return Err(Error::shape(format!(
                        "concat: dim {d} mismatch ({a} vs {b})"
                    )));
                }
            }
            axis_total += s[axis];
        }
        out_shape[axis] = axis_total;
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let numel: usize = out_shape.iter().product();
        let mut data = vec![T::ZERO; numel];
        let mut offsets = Vec::with_capacity(xs.len());
        {
            let mut axis_off = 0;
            for &x in xs {
                offsets.push(axis_off);
                let ax = self.nodes[x.0].shape[axis];
                let xv = &self.nodes[x.0].data;
                for ou in 0..outer {
                    let src = &xv[ou * ax * inner..(ou + 1) * ax * inner];
                    let dst_base = ou * axis_total * inner + axis_off * inner;
                    data[dst_base..dst_base + ax * inner].copy_from_slice(src);
                }
                axis_off += ax;
            }
        }
        let track = self.tracked(xs);
        let parts: Vec<(VarId, usize, usize)> = xs
            .iter()
            .zip(&offsets)
            .map(|(&x, &off)| (x, off, self.nodes[x.0].shape[axis]))
            .collect();
        let id = self.push(out_shape, data, None, false);
        if track {
            let back: BackFn<T> = Box::new(move |g, _tape, work| {
                for &(x, off, ax) in &parts {
                    acc_into(&mut work[x.0], outer * ax * inner, |buf| {
                        for ou in 0..outer {
                            let src_base = ou * axis_total * inner + off * inner;
                            let dst = &mut buf[ou * ax * inner..(ou + 1) * ax * inner];
                            for (d, &gv) in dst.iter_mut().zip(&g[src_base..src_base + ax * inner])
                            {
                                *d = *d + gv;
                            }
                        }
                    });
                }
            });
            self.nodes[id.0].back = Some(back);
            self.needs[id.0] = true;
        }
        Ok(id)
    }

    fn slice_axis0_like(
        &mut self,
        x: VarId,
        start: usize,
        len: usize,
        axis: usize,
        op: &str,
    ) -> Result<VarId> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(format!(
                "{op}: range {start}..{} out of bounds for shape {:?}",
                start + len,
                shape
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let ax = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = vec![T::ZERO; outer * len * inner];
        {
            let xv = &self.nodes[x.0].data;
            for ou in 0..outer {
                let src = &xv[(ou * ax + start) * inner..(ou * ax + start + len) * inner];
                data[ou * len * inner..(ou + 1) * len * inner].copy_from_slice(src);
            }
        }
        let track = self.tracked(&[x]);
        let total = outer * ax * inner;
        let id = self.push(out_shape, data, None, false);
        if track {
            let back: BackFn<T> = Box::new(move |g, _tape, work| {
                acc_into(&mut work[x.0], total, |buf| {
                    for ou in 0..outer {
                        let dst = &mut buf[(ou * ax + start) * inner..(ou * ax + start + len) * inner];
                        let src = &g[ou * len * inner..(ou + 1) * len * inner];
                        for (d, &gv) in dst.iter_mut().zip(src) {
                            *d = *d + gv;
                        }
                    }
                });
            });
            self.nodes[id.0].back = Some(back);
            self.needs[id.0] = true;
        }
        Ok(id)
    }

    /// Rows `start..start+len` of a 2-d tensor.
    pub fn slice_rows(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId> {
        self.dims2(x, "slice_rows")?;
        self.slice_axis0_like(x, start, len, 0, "slice_rows")
    }

    /// Columns `start..start+len` of a 2-d tensor.
    pub fn slice_cols(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId> {
        self.dims2(x, "slice_cols")?;
        self.slice_axis0_like(x, start, len, 1, "slice_cols")
    }

    /// Channels `start..start+len` of an NCHW tensor.
    pub fn slice_channels(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId> {
        self.dims4(x, "slice_channels")?;
        self.slice_axis0_like(x, start, len, 1, "slice_channels")
    }

    /// Batch elements `start..start+len` of an NCHW tensor.
    pub fn slice_batch(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId> {
        self.dims4(x, "slice_batch")?;
        self.slice_axis0_like(x, start, len, 0, "slice_batch")
    }

    // ── attention helpers ───────────────────────────────────────────────

    /// Replace the diagonal of a square matrix with -inf (no gradient flows
    /// to the masked entries).
    pub fn mask_diag_neg_inf(&mut self, x: VarId) -> Result<VarId> {
        let (m, n) = self.dims2(x, "mask_diag_neg_inf")?;
        if m != n {
            return Err(Error::shape(format!(
                "mask_diag_neg_inf: matrix must be square, got {m}x{n}"
            )));
        }
        let mut data = self.nodes[x.0].data.clone();
        for i in 0..m {
            data[i * n + i] = T::neg_infinity();
        }
        let track = self.tracked(&[x]);
        let id = self.push(vec![m, n], data, None, false);
        if track {
            let back: BackFn<T> = Box::new(move |g, _tape, work| {
                acc_into(&mut work[x.0], m * n, |buf| {
                    for i in 0..m {
                        for j in 0..n {
                            if i != j {
                                buf[i * n + j] = buf[i * n + j] + g[i * n + j];
                            }
                        }
                    }
                });
            });
            self.nodes[id.0].back = Some(back);
            self.needs[id.0] = true;
        }
        Ok(id)
    }

    /// Extract tokens: NCHW -> [N*H*W, C] with rows ordered (n, y, x).
    pub fn nchw_to_tokens(&mut self, x: VarId) -> Result<VarId> {
        let (n, c, h, w) = self.dims4(x, "nchw_to_tokens")?;
        let hw = h * w;
        let mut data = vec![T::ZERO; n * hw * c];
        {
            let xv = &self.nodes[x.0].data;
            for ni in 0..n {
                for ci in 0..c {
                    let plane = &xv[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                    for p in 0..hw {
                        data[(ni * hw + p) * c + ci] = plane[p];
                    }
                }
            }
        }
        let track = self.tracked(&[x]);
        let id = self.push(vec![n * hw, c], data, None, false);
        if track {
            let back: BackFn<T> = Box::new(move |g, _tape, work| {
                acc_into(&mut work[x.0], n * c * hw, |buf| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            for p in 0..hw {
                                buf[base + p] = buf[base + p] + g[(ni * hw + p) * c + ci];
                            }
                        }
                    }
                });
            });
            self.nodes[id.0].back = Some(back);
            self.needs[id.0] = true;
        }
        Ok(id)
    }

    /// Inverse of [`Tape::nchw_to_tokens`].
    pub fn tokens_to_nchw(&mut self, x: VarId, h: usize, w: usize) -> Result<VarId> {
        let (rows, c) = self.dims2(x, "tokens_to_nchw")?;
        let hw = h * w;
        if hw == 0 || rows % hw != 0 {
            return Err(Error::shape(format!(
                "tokens_to_nchw: {rows} rows not divisible by {h}x{w}"
            )));
        }
        let n = rows / hw;
        let mut data = vec![T::ZERO; n * c * hw];
        {
            let xv = &self.nodes[x.0].data;
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    for p in 0..hw {
                        data[base + p] = xv[(ni * hw + p) * c + ci];
                    }
                }
            }
        }
        let track = self.tracked(&[x]);
        let id = self.push(vec![n, c, h, w], data, None, false);
        if track {
            let back: BackFn<T> = Box::new(move |g, _tape, work| {
                acc_into(&mut work[x.0], rows * c, |buf| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            for p in 0..hw {
                                buf[(ni * hw + p) * c + ci] =
                                    buf[(ni * hw + p) * c + ci] + g[base + p];
                            }
                        }
                    }
                });
            });
            self.nodes[id.0].back = Some(back);
            self.needs[id.0] = true;
        }
        Ok(id)
    }

    // ── broadcast bias adds ─────────────────────────────────────────────

    /// Add a per-channel bias to an NCHW tensor.
    pub fn add_channel_bias(&mut self, x: VarId, bias: VarId) -> Result<VarId> {
        let (n, c, h, w) = self.dims4(x, "add_channel_bias")?;
        if self.nodes[bias.0].shape != [c] {
            return Err(Error::shape(format!(
                "add_channel_bias: bias {:?} vs {c} channels",
                self.nodes[bias.0].shape
            )));
        }
        let hw = h * w;
        let mut data = self.nodes[x.0].data.clone();
        {
            let bv = &self.nodes[bias.0].data;
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    for p in 0..hw {
                        data[base + p] = data[base + p] + bv[ci];
                    }
                }
            }
        }
        let track = self.tracked(&[x, bias]);
        let id = self.push(vec![n, c, h, w], data, None, false);
        if track {
            let back: BackFn<T> = Box::new(move |g, _tape, work| {
                acc_into(&mut work[x.0], n * c * hw, |buf| {
                    for (b, &gv) in buf.iter_mut().zip(g) {
                        *b = *b + gv;
                    }
                });
                acc_into(&mut work[bias.0], c, |buf| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            let mut s = T::ZERO;
                            for p in 0..hw {
                                s = s + g[base + p];
                            }
                            buf[ci] = buf[ci] + s;
                        }
                    }
                });
            });
            self.nodes[id.0].back = Some(back);
            self.needs[id.0] = true;
        }
        Ok(id)
    }

    // ── softmax and reductions ──────────────────────────────────────────

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: VarId, axis: usize) -> Result<VarId> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::shape(format!(
                "softmax: axis {axis} out of range for shape {:?}",
                shape
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = self.nodes[x.0].data.clone();
        for ou in 0..outer {
            for ii in 0..inner {
                let at = |j: usize| ou * len * inner + j * inner + ii;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    if data[at(j)] > mx {
                        mx = data[at(j)];
                    }
                }
                let mut sum = T::ZERO;
                for j in 0..len {
                    let e = (data[at(j)] - mx).exp();
                    data[at(j)] = e;
                    sum = sum + e;
                }
                for j in 0..len {
                    data[at(j)] = data[at(j)] / sum;
                }
            }
        }
        let track = self.tracked(&[x]);
        let id = self.push(shape, data, None, false);
        if track {
            let out = id;
            let back: BackFn<T> = Box::new(move |g, tape, work| {
                let s = tape.value(out);
                acc_into(&mut work[x.0], s.len(), |buf| {
                    for ou in 0..outer {
                        for ii in 0..inner {
                            let at = |j: usize| ou * len * inner + j * inner + ii;
                            let mut dot = T::ZERO;
                            for j in 0..len {
                                dot = dot + g[at(j)] * s[at(j)];
                            }
                            for j in 0..len {
                                buf[at(j)] = buf[at(j)] + s[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            });
            self.nodes[id.0].back = Some(back);
            self.needs[id.0] = true;
        }
        Ok(id)
    }

    pub fn sum_all(&mut self, x: VarId) -> VarId {
        let total = {
            let mut s = T::ZERO;
            for &v in &self.nodes[x.0].data {
                s = s + v;
            }
            s
        };
        let n = self.nodes[x.0].data.len();
        let track = self.tracked(&[x]);
        let id = self.push(vec![1], vec![total], None, false);
        if track {
            let back: BackFn<T> = Box::new(move |g, _tape, work| {
                let gv = g[0];
                acc_into(&mut work[x.0], n, |buf| {
                    for b in buf.iter_mut() {
                        *b = *b + gv;
                    }
                });
            });
            self.nodes[id.0].back = Some(back);
            self.needs[id.0] = true;
        }
        id
    }

    pub fn mean_all(&mut self, x: VarId) -> VarId {
        let n = self.nodes[x.0].data.len();
        let total = {
            let mut s = T::ZERO;
            for &v in &self.nodes[x.0].data {
                s = s + v;
            }
            s / T::from_f64(n as f64)
        };
        let track = self.tracked(&[x]);
        let id = self.push(vec![1], vec![total], None, false);
        if track {
            let back: BackFn<T> = Box::new(move |g, _tape, work| {
                let gv = g[0] / T::from_f64(n as f64);
                acc_into(&mut work[x.0], n, |buf| {
                    for b in buf.iter_mut() {
                        *b = *b + gv;
                    }
                });
            });
            self.nodes[id.0].back = Some(back);
            self.needs[id.0] = true;
        }
        id
    }
}

fn sigmoid_val<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

fn gelu_val<T: Scalar>(x: T) -> T {
    // tanh approximation
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    half * x * (T::ONE + (c * (x + k * x * x * x)).tanh())
}

fn gelu_dval<T: Scalar>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = T::ONE - t * t;
    let dinner = c * (T::ONE + three * k * x * x);
    half * (T::ONE + t) + half * x * sech2 * dinner
}

use kernels::{col2im_acc, im2col};
