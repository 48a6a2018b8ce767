use log::warn;

use crate::error::{NnError, Result};
use crate::kernels::{self, ConvGeom, GroupNormCache};
use crate::params::{ParamId, ParamStore};
use crate::real::{gemm, Real};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Input,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    AddChannel { x: Var, v: Var },
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Silu(Var),
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, cache: GroupNormCache<T> },
    Upsample2x(Var),
    Concat(Var, Var),
    L1(Var, Var),
    Mse(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients with respect to graph inputs created by [`Graph::input_with_grad`].
pub struct Grads<T> {
    inputs: Vec<Option<Vec<T>>>,
    /// Number of distinct parameters that received a gradient.
    pub params_reached: usize,
}

impl<T: Real> Grads<T> {
    pub fn input(&self, var: Var) -> Option<&[T]> {
        self.inputs.get(var.0).and_then(|g| g.as_deref())
    }
}

/// Tape recording one forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(msg: impl Into<String>) -> NnError {
    NnError::Shape(msg.into())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Input whose gradient is reported by [`Graph::backward`].
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, true)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id), true)
    }

    /// 2-d cross-correlation. `x: [N, Cin, H, W]`, `w: [Cout, Cin, k, k]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, kh, kw) = self.value(w).dims4()?;
        if wcin != cin || kh != kw {
            return Err(shape_err(format!(
                "conv2d weight {:?} does not fit input {:?}",
                self.value(w).shape(),
                self.value(x).shape()
            )));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(shape_err(format!("conv2d bias {:?} for {cout} outputs", self.value(b).shape())));
            }
        }
        let ho = kernels::conv_out_size(h, kh, stride, pad);
        let wo = kernels::conv_out_size(wd, kh, stride, pad);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(shape_err(format!("conv2d kernel {kh} too large for {h}x{wd} (pad {pad})")));
        };
        let geom = ConvGeom { n, cin, h, w: wd, cout, k: kh, stride, pad, ho, wo };
        let out =
            kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), b.map(|b| self.value(b).data()), &geom);
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(Tensor::new(vec![n, cout, ho, wo], out)?, Op::Conv2d { x, w, b, geom }, needs))
    }

    /// `y = x · wᵀ + b` with `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, din) = self.value(x).dims2()?;
        let (dout, win) = self.value(w).dims2()?;
        if win != din {
            return Err(shape_err(format!("linear weight [{dout}, {win}] for input width {din}")));
        }
        let mut out = vec![T::zero(); n * dout];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [dout] {
                return Err(shape_err(format!("linear bias {:?} for {dout} outputs", bv.shape())));
            }
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv.data());
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(false, true, n, dout, din, self.value(x).data(), self.value(w).data(), beta, &mut out);
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(Tensor::new(vec![n, dout], out)?, Op::Linear { x, w, b }, needs))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(format!("{what}: {:?} vs {:?}", self.value(a).shape(), self.value(b).shape())));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<T> = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), needs))
    }

    /// Adds a per-(sample, channel) vector `v: [N, C]` to every pixel of `x: [N, C, H, W]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(v).shape() != [n, c] {
            return Err(shape_err(format!("add_channel: {:?} onto [{n}, {c}, ..]", self.value(v).shape())));
        }
        let hw = h * w;
        let vv = self.value(v).data();
        let out: Vec<T> = self.value(x).data().iter().enumerate().map(|(i, &xv)| xv + vv[i / hw]).collect();
        let needs = self.needs(x) || self.needs(v);
        Ok(self.push(Tensor::new(vec![n, c, h, w], out)?, Op::AddChannel { x, v }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<T> = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| x * s).collect()).expect("same length");
        let needs = self.needs(a);
        self.push(out, Op::Scale(a, s), needs)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| x * kernels::sigmoid(x)).collect())
            .expect("same length");
        let needs = self.needs(a);
        self.push(out, Op::Silu(a), needs)
    }

    /// Group normalisation over `[N, C, H, W]` with per-channel affine `gamma`, `beta: [C]`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if groups == 0 || c % groups != 0 {
            return Err(NnError::Divisibility { channels: c, groups });
        }
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(shape_err(format!("group_norm affine parameters must be [{c}]")));
        }
        let (y, cache) = kernels::group_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            (n, c, h * w),
            groups,
        );
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(Tensor::new(vec![n, c, h, w], y)?, Op::GroupNorm { x, gamma, beta, groups, cache }, needs))
    }

    /// Nearest-neighbour 2× upsampling of `[N, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let out = kernels::upsample2x_forward(self.value(x).data(), n * c, h, w);
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![n, c, 2 * h, 2 * w], out)?, Op::Upsample2x(x), needs))
    }

    /// Concatenates along the channel axis, `a` first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(shape_err(format!("concat: {:?} vs {:?}", self.value(a).shape(), self.value(b).shape())));
        }
        let (la, lb) = (ca * h * w, cb * h * w);
        let mut out = Vec::with_capacity(n * (la + lb));
        for s in 0..n {
            out.extend_from_slice(&self.value(a).data()[s * la..(s + 1) * la]);
            out.extend_from_slice(&self.value(b).data()[s * lb..(s + 1) * lb]);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![n, ca + cb, h, w], out)?, Op::Concat(a, b), needs))
    }

    /// Mean absolute error.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "l1_loss")?;
        let n = self.value(pred).len().max(1);
        let s: f64 =
            self.value(pred).data().iter().zip(self.value(target).data()).map(|(&p, &t)| (p - t).abs().as_f64()).sum();
        let needs = self.needs(pred) || self.needs(target);
        Ok(self.push(Tensor::scalar(T::lit(s / n as f64)), Op::L1(pred, target), needs))
    }

    /// Mean squared error.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape(pred, target, "mse_loss")?;
        let n = self.value(pred).len().max(1);
        let s: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(&p, &t)| (p - t).as_f64().powi(2))
            .sum();
        let needs = self.needs(pred) || self.needs(target);
        Ok(self.push(Tensor::scalar(T::lit(s / n as f64)), Op::Mse(pred, target), needs))
    }

    /// Reverse pass from a scalar `loss`. Parameter gradients are added to
    /// `store` (they accumulate across calls until [`ParamStore::zero_grad`]).
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Grads<T>> {
        let shape = self.value(loss).shape();
        if self.value(loss).len() != 1 {
            return Err(NnError::NotScalar(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut inputs: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut reached = vec![false; store.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Input => inputs[i] = Some(g),
                Op::Param(id) => {
                    let p = store.get_mut(*id);
                    p.grad.data_mut().iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
                    reached[id.index()] = true;
                }
                Op::Conv2d { x, w, b, geom } => {
                    let mut dx = self.needs(*x).then(|| vec![T::zero(); self.value(*x).len()]);
                    let mut dw = self.needs(*w).then(|| vec![T::zero(); self.value(*w).len()]);
                    let mut db = b.filter(|b| self.needs(*b)).map(|b| vec![T::zero(); self.value(b).len()]);
                    kernels::conv2d_backward(
                        self.value(*x).data(),
                        self.value(*w).data(),
                        &g,
                        geom,
                        dx.as_deref_mut(),
                        dw.as_deref_mut(),
                        db.as_deref_mut(),
                    );
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    if let Some(b) = b {
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Linear { x, w, b } => {
                    let (n, din) = self.value(*x).dims2()?;
                    let dout = self.value(*w).shape()[0];
                    if self.needs(*x) {
                        let mut dx = vec![T::zero(); n * din];
                        gemm(false, false, n, din, dout, &g, self.value(*w).data(), T::zero(), &mut dx);
                        accumulate(&mut grads, *x, Some(dx));
                    }
                    if self.needs(*w) {
                        let mut dw = vec![T::zero(); dout * din];
                        gemm(true, false, dout, din, n, &g, self.value(*x).data(), T::zero(), &mut dw);
                        accumulate(&mut grads, *w, Some(dw));
                    }
                    if let Some(b) = b.filter(|b| self.needs(*b)) {
                        let mut db = vec![T::zero(); dout];
                        for row in g.chunks(dout) {
                            db.iter_mut().zip(row).for_each(|(a, &r)| *a += r);
                        }
                        accumulate(&mut grads, b, Some(db));
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, Some(g.clone()));
                    }
                    accumulate(&mut grads, *a, Some(g));
                }
                Op::AddChannel { x, v } => {
                    if self.needs(*v) {
                        let (n, c, h, w) = self.value(*x).dims4()?;
                        let hw = h * w;
                        let dv: Vec<T> = (0..n * c).map(|j| g[j * hw..(j + 1) * hw].iter().copied().sum()).collect();
                        accumulate(&mut grads, *v, Some(dv));
                    }
                    accumulate(&mut grads, *x, Some(g));
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let da = g.iter().zip(self.value(*b).data()).map(|(&gi, &bv)| gi * bv).collect();
                        accumulate(&mut grads, *a, Some(da));
                    }
                    if self.needs(*b) {
                        let db = g.iter().zip(self.value(*a).data()).map(|(&gi, &av)| gi * av).collect();
                        accumulate(&mut grads, *b, Some(db));
                    }
                }
                Op::Scale(a, s) => {
                    let da = g.iter().map(|&gi| gi * *s).collect();
                    accumulate(&mut grads, *a, Some(da));
                }
                Op::Sum(a) => {
                    let da = vec![g[0]; self.value(*a).len()];
                    accumulate(&mut grads, *a, Some(da));
                }
                Op::Silu(a) => {
                    let da = g
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&gi, &x)| {
                            let s = kernels::sigmoid(x);
                            gi * s * (T::one() + x * (T::one() - s))
                        })
                        .collect();
                    accumulate(&mut grads, *a, Some(da));
                }
                Op::GroupNorm { x, gamma, beta, groups, cache } => {
                    let (n, c, h, w) = self.value(*x).dims4()?;
                    let mut dx = self.needs(*x).then(|| vec![T::zero(); n * c * h * w]);
                    let mut dg = self.needs(*gamma).then(|| vec![T::zero(); c]);
                    let mut dbt = self.needs(*beta).then(|| vec![T::zero(); c]);
                    kernels::group_norm_backward(
                        &g,
                        self.value(*gamma).data(),
                        cache,
                        (n, c, h * w),
                        *groups,
                        dx.as_deref_mut(),
                        dg.as_deref_mut(),
                        dbt.as_deref_mut(),
                    );
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, dg);
                    accumulate(&mut grads, *beta, dbt);
                }
                Op::Upsample2x(x) => {
                    let (n, c, h, w) = self.value(*x).dims4()?;
                    let mut dx = vec![T::zero(); n * c * h * w];
                    kernels::upsample2x_backward(&g, n * c, h, w, &mut dx);
                    accumulate(&mut grads, *x, Some(dx));
                }
                Op::Concat(a, b) => {
                    let (n, ca, h, w) = self.value(*a).dims4()?;
                    let cb = self.value(*b).shape()[1];
                    let (la, lb) = (ca * h * w, cb * h * w);
                    let mut da = Vec::with_capacity(n * la);
                    let mut db = Vec::with_capacity(n * lb);
                    for s in 0..n {
                        let off = s * (la + lb);
                        da.extend_from_slice(&g[off..off + la]);
                        db.extend_from_slice(&g[off + la..off + la + lb]);
                    }
                    accumulate(&mut grads, *a, Some(da));
                    accumulate(&mut grads, *b, Some(db));
                }
                Op::L1(p, t) => {
                    let n = T::lit(self.value(*p).len().max(1) as f64);
                    let scale = g[0] / n;
                    let dp: Vec<T> = self
                        .value(*p)
                        .data()
                        .iter()
                        .zip(self.value(*t).data())
                        .map(|(&pv, &tv)| {
                            let d = pv - tv;
                            if d > T::zero() {
                                scale
                            } else if d < T::zero() {
                                -scale
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    if self.needs(*t) {
                        accumulate(&mut grads, *t, Some(dp.iter().map(|&v| -v).collect()));
                    }
                    accumulate(&mut grads, *p, Some(dp));
                }
                Op::Mse(p, t) => {
                    let n = T::lit(self.value(*p).len().max(1) as f64);
                    let scale = T::lit(2.0) * g[0] / n;
                    let dp: Vec<T> = self
                        .value(*p)
                        .data()
                        .iter()
                        .zip(self.value(*t).data())
                        .map(|(&pv, &tv)| scale * (pv - tv))
                        .collect();
                    if self.needs(*t) {
                        accumulate(&mut grads, *t, Some(dp.iter().map(|&v| -v).collect()));
                    }
                    accumulate(&mut grads, *p, Some(dp));
                }
            }
        }
        let params_reached = reached.iter().filter(|&&r| r).count();
        if params_reached == 0 && inputs.iter().all(Option::is_none) {
            warn!("backward: loss is not connected to any parameter or gradient-tracked input");
        }
        Ok(Grads { inputs, params_reached })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, g: Option<Vec<T>>) {
    let Some(g) = g else { return };
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn conv_ones_gives_nine_center_four_corner() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let w = g.input(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let out = g.value(y).data();
        assert_eq!(out[4], 9.0);
        assert_eq!(out[0], 4.0);
        assert_eq!(out[8], 4.0);
        assert_eq!(out[1], 6.0);
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut g = Graph::<f32>::new();
        let data: Vec<f32> = (0..2 * 5 * 4).map(|i| i as f32 * 0.25 - 3.0).collect();
        let x = g.input(Tensor::new(vec![1, 2, 5, 4], data.clone()).unwrap());
        let mut wk = vec![0.0f32; 2 * 2 * 9];
        wk[4] = 1.0; // out 0 <- in 0 center
        wk[(2 + 1) * 9 + 4] = 1.0; // out 1 <- in 1 center
        let w = g.input(Tensor::new(vec![2, 2, 3, 3], wk).unwrap());
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn stride_two_halves_size() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::full(vec![1, 1, 4, 4], 1.0));
        let w = g.input(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(vec![1, 2, 4, 4]));
        let w = g.input(Tensor::zeros(vec![1, 3, 3, 3]));
        assert!(matches!(g.conv2d(x, w, None, 1, 1), Err(NnError::Shape(_))));
    }

    #[test]
    fn upsample_replicates_blocks() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.upsample2x(x).unwrap();
        #[rustfmt::skip]
        let want = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(g.value(y).data(), &want);
    }

    #[test]
    fn downsample_of_upsample_restores_shape() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(vec![2, 3, 6, 10]));
        let up = g.upsample2x(x).unwrap();
        let w = g.input(Tensor::zeros(vec![3, 3, 3, 3]));
        let down = g.conv2d(up, w, None, 2, 1).unwrap();
        assert_eq!(g.value(down).shape(), g.value(x).shape());
    }

    #[test]
    fn group_norm_single_group_z_scores() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let gamma = g.input(t(vec![1], vec![1.0]));
        let beta = g.input(t(vec![1], vec![0.0]));
        let y = g.group_norm(x, gamma, beta, 1).unwrap();
        let out = g.value(y).data();
        let mean = out.iter().sum::<f64>() / 4.0;
        let var = out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        // ε = 1e-5 in the denominator: var = 1.25 / (1.25 + 1e-5)
        assert!((var - 1.25 / (1.25 + 1e-5)).abs() < 1e-12);
    }

    #[test]
    fn group_norm_constant_input_gives_beta() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full(vec![2, 4, 3, 3], 7.0));
        let gamma = g.input(Tensor::full(vec![4], 2.0));
        let beta = g.input(t(vec![4], vec![0.5, -1.0, 3.0, 0.0]));
        let y = g.group_norm(x, gamma, beta, 2).unwrap();
        for (i, v) in g.value(y).data().iter().enumerate() {
            let ch = (i / 9) % 4;
            assert_eq!(*v, [0.5, -1.0, 3.0, 0.0][ch]);
        }
    }

    #[test]
    fn group_norm_zero_gamma_gives_beta() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_fn(vec![1, 2, 2, 2], |i| i as f64 * 1.7 - 2.0));
        let gamma = g.input(Tensor::zeros(vec![2]));
        let beta = g.input(Tensor::full(vec![2], 0.25));
        let y = g.group_norm(x, gamma, beta, 1).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn group_norm_rejects_indivisible_channels() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(vec![1, 6, 2, 2]));
        let gamma = g.input(Tensor::full(vec![6], 1.0));
        let beta = g.input(Tensor::zeros(vec![6]));
        assert!(matches!(g.group_norm(x, gamma, beta, 4), Err(NnError::Divisibility { .. })));
    }

    #[test]
    fn silu_values_and_gradient_at_zero() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", t(vec![3], vec![0.0, 10.0, -3.0])).unwrap();
        let mut g = Graph::new();
        let x = g.param(&store, id);
        let y = g.silu(x);
        let v = g.value(y).data().to_vec();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 9.999_546_0).abs() < 1e-6);
        let s = g.sum(y);
        g.backward(s, &mut store).unwrap();
        assert!((store.get(id).grad.data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn l1_loss_value_and_subgradient() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("p", t(vec![3], vec![0.0, 0.0, 2.0])).unwrap();
        let mut g = Graph::new();
        let p = g.param(&store, id);
        let target = g.input(t(vec![3], vec![1.0, 3.0, 2.0]));
        let loss = g.l1_loss(p, target).unwrap();
        assert!((g.value(loss).data()[0] - 4.0 / 3.0).abs() < 1e-15);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(id).grad.data(), &[-1.0 / 3.0, -1.0 / 3.0, 0.0]);

        let mut g = Graph::<f64>::new();
        let p = g.input(t(vec![2], vec![0.0, 0.0]));
        let target = g.input(t(vec![2], vec![1.0, 3.0]));
        let loss = g.l1_loss(p, target).unwrap();
        assert_eq!(g.value(loss).data()[0], 2.0);
        let same = g.l1_loss(p, p).unwrap();
        assert_eq!(g.value(same).data()[0], 0.0);
    }

    #[test]
    fn l1_rejects_shape_mismatch() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::zeros(vec![2]));
        let b = g.input(Tensor::zeros(vec![3]));
        assert!(g.l1_loss(a, b).is_err());
    }

    #[test]
    fn sum_of_product_gradient_is_other_factor() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", t(vec![4], vec![0.3, -1.0, 2.0, 5.0])).unwrap();
        let xs = vec![1.5, -2.0, 0.25, 4.0];
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let x = g.input(t(vec![4], xs.clone()));
        let prod = g.mul(w, x).unwrap();
        let loss = g.sum(prod);
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(id).grad.data(), &xs[..]);
    }

    #[test]
    fn backward_twice_accumulates() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", t(vec![2], vec![1.0, 2.0])).unwrap();
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let x = g.input(t(vec![2], vec![3.0, -1.0]));
        let prod = g.mul(w, x).unwrap();
        let loss = g.sum(prod);
        g.backward(loss, &mut store).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(id).grad.data(), &[6.0, -2.0]);
        store.zero_grad();
        assert_eq!(store.get(id).grad.data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", t(vec![2], vec![1.0, 2.0])).unwrap();
        let mut g = Graph::new();
        let w = g.param(&store, id);
        assert!(matches!(g.backward(w, &mut store), Err(NnError::NotScalar(_))));
    }

    #[test]
    fn disconnected_loss_reaches_nothing() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", t(vec![1], vec![1.0])).unwrap();
        let mut g = Graph::new();
        let x = g.input(t(vec![2], vec![1.0, 2.0]));
        let loss = g.sum(x);
        let grads = g.backward(loss, &mut store).unwrap();
        assert_eq!(grads.params_reached, 0);
    }

    #[test]
    fn concat_then_backward_splits_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.input_with_grad(Tensor::full(vec![2, 1, 2, 2], 1.0));
        let b = g.input_with_grad(Tensor::full(vec![2, 2, 2, 2], 2.0));
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 3, 2, 2]);
        assert_eq!(&g.value(c).data()[..4], &[1.0; 4]);
        assert_eq!(&g.value(c).data()[4..12], &[2.0; 8]);
        let w = g.input(Tensor::from_fn(vec![2, 3, 2, 2], |i| i as f64));
        let prod = g.mul(c, w).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss, &mut ParamStore::new()).unwrap();
        assert_eq!(grads.input(a).unwrap(), &[0.0, 1.0, 2.0, 3.0, 12.0, 13.0, 14.0, 15.0]);
        assert_eq!(grads.input(b).unwrap()[0], 4.0);
    }
}
