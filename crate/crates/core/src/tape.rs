//! Reverse-mode gradient tape over the fixed op set the model needs.
//!
//! Ops are recorded in execution order, so the node list is already a
//! topological order and backward is a single reverse sweep. A tape built
//! with [`Tape::inference`] computes the same values but records nothing.

use std::borrow::Cow;

use crate::error::{CdpError, Result};
use crate::masking::AttentionMask;
use crate::tensor::{self, LayerNormStats, Real, Tensor};

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        stats: LayerNormStats<T>,
    },
    Gather {
        table: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Sum(Var),
    Mse {
        pred: Var,
        target: Var,
    },
}

struct Node<'a, T: Real> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
    recording: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<'a, T: Real> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Real> Tape<'a, T> {
    /// A recording tape.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that only evaluates; no op history is kept.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.recording;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        self.recording && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Borrowed leaf that receives a gradient.
    pub fn param(&mut self, t: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    /// Owned leaf that receives a gradient.
    pub fn param_owned(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    /// Borrowed leaf without gradient.
    pub fn constant(&mut self, t: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    /// Owned leaf without gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Cow::Owned(Tensor::zeros(&[0]))).into_owned()
    }

    fn record(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let g = self.needs(inputs);
        self.push(Cow::Owned(value), op, g)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.record(v, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::matmul_nt(self.value(a), self.value(b))?;
        Ok(self.record(v, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::add(self.value(a), self.value(b))?;
        Ok(self.record(v, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::mul(self.value(a), self.value(b))?;
        Ok(self.record(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let v = tensor::add_row(self.value(a), self.value(bias))?;
        Ok(self.record(v, Op::AddRow(a, bias), &[a, bias]))
    }

    /// `x · w + b` for `x[n,i]`, `w[i,o]`, `b[o]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_row(h, b)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = tensor::scale(self.value(a), s);
        self.record(v, Op::Scale(a, s), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = tensor::gelu(self.value(a));
        self.record(v, Op::Gelu(a), &[a])
    }

    pub fn softmax_masked(&mut self, logits: Var, mask: &AttentionMask) -> Result<Var> {
        let v = tensor::softmax_masked(self.value(logits), mask)?;
        Ok(self.record(v, Op::Softmax(logits), &[logits]))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (v, stats) = tensor::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        Ok(self.record(v, Op::LayerNorm { x, gain, bias, stats }, &[x, gain, bias]))
    }

    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let v = tensor::gather_rows(self.value(table), idx)?;
        Ok(self.record(
            v,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
            &[table],
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let vals: Vec<&Tensor<T>> = parts.iter().map(|p| self.value(*p)).collect();
        let v = tensor::concat_rows(&vals)?;
        Ok(self.record(v, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = tensor::slice_rows(self.value(x), start, len)?;
        Ok(self.record(v, Op::SliceRows { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let vals: Vec<&Tensor<T>> = parts.iter().map(|p| self.value(*p)).collect();
        let v = tensor::concat_cols(&vals)?;
        Ok(self.record(v, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = tensor::slice_cols(self.value(x), start, len)?;
        Ok(self.record(v, Op::SliceCols { x, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.record(v, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.record(v, Op::Sum(x), &[x])
    }

    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let v = Tensor::scalar(tensor::mse(self.value(pred), self.value(target))?);
        Ok(self.record(v, Op::Mse { pred, target }, &[pred, target]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.recording {
            return Err(CdpError::Contract("backward on a non-recording tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(CdpError::Contract(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let g = &g;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g.clone());
                }
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        let da = tensor::matmul_nt(g, self.value(*b))?;
                        accumulate(&mut grads, *a, da);
                    }
                    if self.nodes[b.0].requires_grad {
                        let db = tensor::matmul_tn(self.value(*a), g)?;
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::MatMulNt(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        let da = tensor::matmul(g, self.value(*b))?;
                        accumulate(&mut grads, *a, da);
                    }
                    if self.nodes[b.0].requires_grad {
                        let db = tensor::matmul_tn(g, self.value(*a))?;
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    accumulate_if(&self.nodes, &mut grads, *a, || g.clone());
                    accumulate_if(&self.nodes, &mut grads, *b, || g.clone());
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    accumulate_if(&self.nodes, &mut grads, *a, || {
                        tensor::mul(g, bv).expect("shapes checked in forward")
                    });
                    accumulate_if(&self.nodes, &mut grads, *b, || {
                        tensor::mul(g, av).expect("shapes checked in forward")
                    });
                }
                Op::AddRow(a, bias) => {
                    accumulate_if(&self.nodes, &mut grads, *a, || g.clone());
                    accumulate_if(&self.nodes, &mut grads, *bias, || {
                        let n = g.cols();
                        let mut db = vec![T::zero(); n];
                        for row in g.data().chunks(n) {
                            for (d, x) in db.iter_mut().zip(row) {
                                *d += *x;
                            }
                        }
                        Tensor::new(self.value(*bias).shape().to_vec(), db).expect("bias shape")
                    });
                }
                Op::Scale(a, s) => {
                    accumulate_if(&self.nodes, &mut grads, *a, || tensor::scale(g, *s));
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    accumulate_if(&self.nodes, &mut grads, *a, || {
                        Tensor::new(
                            x.shape().to_vec(),
                            x.data()
                                .iter()
                                .zip(g.data())
                                .map(|(xv, gv)| tensor::gelu_grad_scalar(*xv) * *gv)
                                .collect(),
                        )
                        .expect("gelu shape")
                    });
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    accumulate_if(&self.nodes, &mut grads, *a, || {
                        let c = y.cols();
                        let mut dx = Tensor::zeros(y.shape());
                        for r in 0..y.rows() {
                            let yr = y.row(r);
                            let gr = g.row(r);
                            let dot: T = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                            for j in 0..c {
                                dx.data_mut()[r * c + j] = yr[j] * (gr[j] - dot);
                            }
                        }
                        dx
                    });
                }
                Op::LayerNorm { x, gain, bias, stats } => {
                    let gv = self.value(*gain);
                    let d = gv.numel();
                    let n = g.rows();
                    if self.nodes[gain.0].requires_grad || self.nodes[bias.0].requires_grad {
                        let mut dgain = vec![T::zero(); d];
                        let mut dbias = vec![T::zero(); d];
                        for r in 0..n {
                            for j in 0..d {
                                let gij = g.data()[r * d + j];
                                dgain[j] += gij * stats.xhat.data()[r * d + j];
                                dbias[j] += gij;
                            }
                        }
                        accumulate_if(&self.nodes, &mut grads, *gain, || {
                            Tensor::new(gv.shape().to_vec(), dgain).expect("gain shape")
                        });
                        accumulate_if(&self.nodes, &mut grads, *bias, || {
                            Tensor::new(gv.shape().to_vec(), dbias).expect("bias shape")
                        });
                    }
                    accumulate_if(&self.nodes, &mut grads, *x, || {
                        let dd = T::from_usize(d).expect("dim fits");
                        let mut dx = Tensor::zeros(&[n, d]);
                        for r in 0..n {
                            let xh = &stats.xhat.data()[r * d..(r + 1) * d];
                            let dxh: Vec<T> =
                                (0..d).map(|j| g.data()[r * d + j] * gv.data()[j]).collect();
                            let s1: T = dxh.iter().copied().sum();
                            let s2: T = dxh.iter().zip(xh).map(|(a, b)| *a * *b).sum();
                            let k = stats.rstd[r] / dd;
                            for j in 0..d {
                                dx.data_mut()[r * d + j] = k * (dd * dxh[j] - s1 - xh[j] * s2);
                            }
                        }
                        dx
                    });
                }
                Op::Gather { table, idx } => {
                    accumulate_if(&self.nodes, &mut grads, *table, || {
                        let tv = self.value(*table);
                        let d = tv.cols();
                        let mut dt = Tensor::zeros(tv.shape());
                        for (r, &i) in idx.iter().enumerate() {
                            for j in 0..d {
                                dt.data_mut()[i * d + j] += g.data()[r * d + j];
                            }
                        }
                        dt
                    });
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let len = self.value(*p).rows();
                        if self.nodes[p.0].requires_grad {
                            accumulate(&mut grads, *p, tensor::slice_rows(g, start, len)?);
                        }
                        start += len;
                    }
                }
                Op::SliceRows { x, start } => {
                    accumulate_if(&self.nodes, &mut grads, *x, || {
                        let xv = self.value(*x);
                        let d = xv.cols();
                        let mut dx = Tensor::zeros(xv.shape());
                        dx.data_mut()[start * d..start * d + g.numel()].copy_from_slice(g.data());
                        dx
                    });
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let len = self.value(*p).cols();
                        if self.nodes[p.0].requires_grad {
                            accumulate(&mut grads, *p, tensor::slice_cols(g, start, len)?);
                        }
                        start += len;
                    }
                }
                Op::SliceCols { x, start } => {
                    accumulate_if(&self.nodes, &mut grads, *x, || {
                        let xv = self.value(*x);
                        let (m, d) = (xv.rows(), xv.cols());
                        let w = g.cols();
                        let mut dx = Tensor::zeros(xv.shape());
                        for r in 0..m {
                            dx.data_mut()[r * d + start..r * d + start + w].copy_from_slice(g.row(r));
                        }
                        dx
                    });
                }
                Op::Reshape(x) => {
                    accumulate_if(&self.nodes, &mut grads, *x, || {
                        g.clone()
                            .reshape(self.value(*x).shape().to_vec())
                            .expect("reshape preserves numel")
                    });
                }
                Op::Sum(x) => {
                    let s = g.data()[0];
                    accumulate_if(&self.nodes, &mut grads, *x, || {
                        Tensor::full(self.value(*x).shape(), s)
                    });
                }
                Op::Mse { pred, target } => {
                    let (p, t) = (self.value(*pred), self.value(*target));
                    let k = g.data()[0] * T::lit(2.0) / T::from_usize(p.numel().max(1)).expect("fits");
                    let diff = Tensor::new(
                        p.shape().to_vec(),
                        p.data().iter().zip(t.data()).map(|(a, b)| (*a - *b) * k).collect(),
                    )?;
                    accumulate_if(&self.nodes, &mut grads, *target, || diff.map(|v| -v));
                    accumulate_if(&self.nodes, &mut grads, *pred, || diff.clone());
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn accumulate_if<T: Real>(
    nodes: &[Node<'_, T>],
    grads: &mut [Option<Tensor<T>>],
    v: Var,
    g: impl FnOnce() -> Tensor<T>,
) {
    if nodes[v.0].requires_grad {
        accumulate(grads, v, g());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of `f` against the tape gradient for every
    /// input, relative error measured per input tensor.
    fn check(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
        let loss = f(&mut tape, &vars);
        let grads = tape.backward(loss).unwrap();
        let eval = |ins: &[Tensor<f64>]| {
            let mut t = Tape::inference();
            let vs: Vec<Var> = ins.iter().map(|x| t.input(x.clone())).collect();
            let l = f(&mut t, &vs);
            t.value(l).data()[0]
        };
        let h = 1e-5;
        for (k, inp) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).unwrap();
            let mut num = 0.0;
            let mut den = 0.0;
            for e in 0..inp.numel() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[e] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[e] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[e];
                num += (a - fd) * (a - fd);
                den += a * a + fd * fd;
            }
            let rel = num.sqrt() / den.sqrt().max(1e-12);
            assert!(rel < 1e-4, "input {k}: relative error {rel}");
        }
    }

    #[test]
    fn sum_gradient_is_ones() {
        let x = Tensor::from_fn(&[3, 2], |i| i as f64);
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let s = tape.sum(v);
        let g = tape.backward(s).unwrap();
        assert!(g.get(v).unwrap().data().iter().all(|&d| d == 1.0));
    }

    #[test]
    fn half_square_gradient_is_identity() {
        let x = Tensor::from_fn(&[4], |i| i as f64 - 1.5);
        let mut tape = Tape::new();
        let v = tape.param(&x);
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq);
        let l = tape.scale(s, 0.5);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(v).unwrap(), &x);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let x = Tensor::<f64>::zeros(&[2, 2]);
        let mut tape = Tape::new();
        let v = tape.param(&x);
        assert!(matches!(tape.backward(v), Err(CdpError::Contract(_))));
    }

    #[test]
    fn per_op_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            check(vec![rand_t(&[3, 4], &mut rng), rand_t(&[4, 2], &mut rng)], |t, v| {
                let y = t.matmul(v[0], v[1]).unwrap();
                let y2 = t.mul(y, y).unwrap();
                t.sum(y2)
            });
            check(vec![rand_t(&[3, 4], &mut rng), rand_t(&[5, 4], &mut rng)], |t, v| {
                let y = t.matmul_nt(v[0], v[1]).unwrap();
                let g = t.gelu(y);
                t.sum(g)
            });
            let mask = AttentionMask::from_fn(4, 5, |i, j| j <= i + 1);
            let w = rand_t(&[4, 5], &mut rng);
            check(vec![rand_t(&[4, 5], &mut rng)], |t, v| {
                let s = t.softmax_masked(v[0], &mask).unwrap();
                let wv = t.input(w.clone());
                let p = t.mul(s, wv).unwrap();
                t.sum(p)
            });
            let tgt = rand_t(&[3, 6], &mut rng);
            check(
                vec![
                    rand_t(&[3, 6], &mut rng),
                    rand_t(&[6], &mut rng),
                    rand_t(&[6], &mut rng),
                ],
                |t, v| {
                    let y = t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
                    let tv = t.input(tgt.clone());
                    t.mse(y, tv).unwrap()
                },
            );
            check(
                vec![rand_t(&[5, 3], &mut rng), rand_t(&[3], &mut rng), rand_t(&[2, 3], &mut rng)],
                |t, v| {
                    let g = t.gather_rows(v[0], &[4, 1, 1]).unwrap();
                    let b = t.add_row(g, v[1]).unwrap();
                    let c = t.concat_rows(&[b, v[2]]).unwrap();
                    let s = t.slice_rows(c, 1, 3).unwrap();
                    let l = t.slice_cols(s, 1, 2).unwrap();
                    let r = t.slice_cols(s, 0, 1).unwrap();
                    let cc = t.concat_cols(&[r, l]).unwrap();
                    let rs = t.reshape(cc, vec![9]).unwrap();
                    let sq = t.mul(rs, rs).unwrap();
                    let sc = t.scale(sq, 0.3);
                    t.sum(sc)
                },
            );
        }
    }

    #[test]
    fn inference_tape_records_no_gradients() {
        let x = Tensor::<f32>::zeros(&[2]);
        let mut tape = Tape::inference();
        let v = tape.param(&x);
        let s = tape.sum(v);
        assert!(tape.backward(s).is_err());
    }
}
