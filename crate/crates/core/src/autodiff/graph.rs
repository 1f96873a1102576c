//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] borrows a [`ParamStore`] for one forward pass, records every
//! operation as a node, and [`Graph::backward`] replays the nodes in reverse
//! to produce a [`Gradients`] set keyed by parameter. Gradients are then
//! folded into the store with [`ParamStore::accumulate`].

use std::borrow::Cow;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A trainable tensor together with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub requires_grad: bool,
}

/// Named parameters of one model. Order of insertion is the checkpoint order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
            requires_grad: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> Vec<ParamId> {
        (0..self.params.len()).map(ParamId).collect()
    }

    /// Ids of every parameter whose name starts with `prefix`.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .map(ParamId)
            .ok_or_else(|| Error::Integrity(format!("missing parameter `{name}`")))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    /// Mutable access to a parameter value. The caller keeps it finite.
    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.params[id.0].value.data_mut()
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::Dimension {
                op: "set_value",
                left: p.value.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub(crate) fn parts_mut(&mut self, id: ParamId) -> (&mut [f64], &[f64]) {
        let p = &mut self.params[id.0];
        (p.value.data_mut(), p.grad.data())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn accumulate(&mut self, grads: &Gradients) {
        for (p, g) in self.params.iter_mut().zip(&grads.per_param) {
            if let Some(g) = g {
                for (a, b) in p.grad.data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }

    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            p.value.round_to_f32();
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// Gradients of one backward pass, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Gradients {
    per_param: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.per_param.get(id.0).and_then(|g| g.as_deref())
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    Detach,
    /// `x · wᵀ + b` for `x: n×in`, `w: out×in`, `b: out`.
    Linear(usize, usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Square(usize),
    Abs(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Sigmoid(usize),
    SumAll(usize),
    ConcatCols(usize, usize),
    /// Mean negative log-softmax likelihood of the given row labels.
    CrossEntropy(usize, Vec<usize>),
}

struct Node<'s> {
    value: Cow<'s, Tensor>,
    op: Op,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node<'s>>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn checked(&mut self, value: Tensor, op: Op, name: &str) -> Result<Var> {
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("output of {name}")));
        }
        Ok(self.push(value, op))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let store = self.store;
        let p = store.get(id);
        let op = if p.requires_grad { Op::Param(id) } else { Op::Input };
        self.nodes.push(Node {
            value: Cow::Borrowed(&p.value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Same value as `a`, but gradients stop here.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(v, Op::Detach)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        if xt.rank() != 2 || wt.rank() != 2 || xt.cols() != wt.cols() {
            return Err(Error::Dimension {
                op: "linear",
                left: xt.shape().to_vec(),
                right: wt.shape().to_vec(),
            });
        }
        let (n, k, o) = (xt.rows(), xt.cols(), wt.rows());
        if bt.numel() != o {
            return Err(Error::Dimension {
                op: "linear bias",
                left: wt.shape().to_vec(),
                right: bt.shape().to_vec(),
            });
        }
        let (xd, wd, bd) = (xt.data(), wt.data(), bt.data());
        let mut out = vec![0.0; n * o];
        for i in 0..n {
            let xr = &xd[i * k..(i + 1) * k];
            let orow = &mut out[i * o..(i + 1) * o];
            for (j, slot) in orow.iter_mut().enumerate() {
                let wr = &wd[j * k..(j + 1) * k];
                let mut acc = bd[j];
                for (a, c) in xr.iter().zip(wr) {
                    acc += a * c;
                }
                *slot = acc;
            }
        }
        self.checked(
            Tensor::from_parts(vec![n, o], out),
            Op::Linear(x.0, w.0, b.0),
            "linear",
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.checked(v, Op::Add(a.0, b.0), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.checked(v, Op::Sub(a.0, b.0), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.checked(v, Op::Mul(a.0, b.0), "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        self.checked(v, Op::Scale(a.0, c), "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        self.checked(v, Op::AddScalar(a.0), "add_scalar")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        self.checked(v, Op::Exp(a.0), "exp")
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x * x);
        self.checked(v, Op::Square(a.0), "square")
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::abs);
        self.checked(v, Op::Abs(a.0), "abs")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(0.0));
        self.checked(v, Op::Relu(a.0), "relu")
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.checked(v, Op::LeakyRelu(a.0, slope), "leaky_relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(sigmoid);
        self.checked(v, Op::Sigmoid(a.0), "sigmoid")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        self.checked(Tensor::scalar(s), Op::SumAll(a.0), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel().max(1) as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum of all entries divided by the row count.
    pub fn batch_mean_of_sum(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).rows().max(1) as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.rank() != 2 || bt.rank() != 2 || at.rows() != bt.rows() {
            return Err(Error::Dimension {
                op: "concat_cols",
                left: at.shape().to_vec(),
                right: bt.shape().to_vec(),
            });
        }
        let (n, ca, cb) = (at.rows(), at.cols(), bt.cols());
        let mut data = Vec::with_capacity(n * (ca + cb));
        for i in 0..n {
            data.extend_from_slice(at.row(i));
            data.extend_from_slice(bt.row(i));
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, ca + cb], data),
            Op::ConcatCols(a.0, b.0),
        ))
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lt = self.value(logits);
        if lt.rank() != 2 || lt.rows() != labels.len() {
            return Err(Error::Dimension {
                op: "cross_entropy",
                left: lt.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        let c = lt.cols();
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {c} logits"
            )));
        }
        let n = labels.len().max(1) as f64;
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = lt.row(i);
            total += log_sum_exp(row) - row[y];
        }
        self.checked(
            Tensor::scalar(total / n),
            Op::CrossEntropy(logits.0, labels.to_vec()),
            "cross_entropy",
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        if !lt.data()[0].is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients {
            per_param: vec![None; self.store.len()],
        };

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let val = node.value.data();
            match &node.op {
                Op::Input | Op::Detach => {}
                Op::Param(id) => match &mut out.per_param[id.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                },
                Op::Linear(x, w, b) => {
                    let (xt, wt) = (self.value(Var(*x)), self.value(Var(*w)));
                    let (n, k, o) = (xt.rows(), xt.cols(), wt.rows());
                    let (xd, wd) = (xt.data(), wt.data());
                    let mut gx = vec![0.0; n * k];
                    let mut gw = vec![0.0; o * k];
                    let mut gb = vec![0.0; o];
                    for i in 0..n {
                        let grow = &g[i * o..(i + 1) * o];
                        let xr = &xd[i * k..(i + 1) * k];
                        let gxr = &mut gx[i * k..(i + 1) * k];
                        for (j, &gij) in grow.iter().enumerate() {
                            if gij == 0.0 {
                                continue;
                            }
                            gb[j] += gij;
                            let wr = &wd[j * k..(j + 1) * k];
                            for (a, &c) in gxr.iter_mut().zip(wr) {
                                *a += gij * c;
                            }
                            let gwr = &mut gw[j * k..(j + 1) * k];
                            for (a, &c) in gwr.iter_mut().zip(xr) {
                                *a += gij * c;
                            }
                        }
                    }
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *w, gw);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.iter().map(|v| -v).collect());
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (ad, bd) = (self.value(Var(*a)).data(), self.value(Var(*b)).data());
                    let ga = g.iter().zip(bd).map(|(x, y)| x * y).collect();
                    let gb = g.iter().zip(ad).map(|(x, y)| x * y).collect();
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g.iter().map(|v| v * c).collect()),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Exp(a) => acc(&mut grads, *a, g.iter().zip(val).map(|(x, y)| x * y).collect()),
                Op::Square(a) => {
                    let ad = self.value(Var(*a)).data();
                    acc(&mut grads, *a, g.iter().zip(ad).map(|(x, y)| 2.0 * x * y).collect())
                }
                Op::Abs(a) => {
                    let ad = self.value(Var(*a)).data();
                    let ga = g
                        .iter()
                        .zip(ad)
                        .map(|(x, &y)| if y > 0.0 { *x } else if y < 0.0 { -x } else { 0.0 })
                        .collect();
                    acc(&mut grads, *a, ga)
                }
                Op::Relu(a) => {
                    let ad = self.value(Var(*a)).data();
                    let ga = g.iter().zip(ad).map(|(x, &y)| if y > 0.0 { *x } else { 0.0 }).collect();
                    acc(&mut grads, *a, ga)
                }
                Op::LeakyRelu(a, slope) => {
                    let ad = self.value(Var(*a)).data();
                    let ga = g
                        .iter()
                        .zip(ad)
                        .map(|(x, &y)| if y > 0.0 { *x } else { slope * x })
                        .collect();
                    acc(&mut grads, *a, ga)
                }
                Op::Sigmoid(a) => {
                    let ga = g.iter().zip(val).map(|(x, s)| x * s * (1.0 - s)).collect();
                    acc(&mut grads, *a, ga)
                }
                Op::SumAll(a) => {
                    let n = self.value(Var(*a)).numel();
                    acc(&mut grads, *a, vec![g[0]; n])
                }
                Op::ConcatCols(a, b) => {
                    let (ca, cb) = (self.value(Var(*a)).cols(), self.value(Var(*b)).cols());
                    let n = self.value(Var(*a)).rows();
                    let mut ga = Vec::with_capacity(n * ca);
                    let mut gb = Vec::with_capacity(n * cb);
                    for i in 0..n {
                        let row = &g[i * (ca + cb)..(i + 1) * (ca + cb)];
                        ga.extend_from_slice(&row[..ca]);
                        gb.extend_from_slice(&row[ca..]);
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::CrossEntropy(l, labels) => {
                    let lt = self.value(Var(*l));
                    let c = lt.cols();
                    let scale = g[0] / labels.len().max(1) as f64;
                    let mut gl = Vec::with_capacity(lt.numel());
                    for (i, &y) in labels.iter().enumerate() {
                        let row = lt.row(i);
                        let lse = log_sum_exp(row);
                        for (j, &v) in row.iter().enumerate() {
                            let p = (v - lse).exp();
                            gl.push(scale * (p - if j == y { 1.0 } else { 0.0 }));
                        }
                    }
                    debug_assert_eq!(gl.len(), labels.len() * c);
                    acc(&mut grads, *l, gl);
                }
            }
        }
        Ok(out)
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], idx: usize, g: Vec<f64>) {
    match &mut grads[idx] {
        Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Row-wise softmax of a logit matrix.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let c = logits.cols();
    let mut data = Vec::with_capacity(logits.numel());
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let lse = log_sum_exp(row);
        data.extend(row.iter().map(|v| (v - lse).exp()));
    }
    Tensor::from_parts(vec![logits.rows(), c], data)
}
