//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] borrows a [`ParamStore`]; parameter `i` of the store is
//! addressed by `Var(i)` without copying its buffer. Every other node is an
//! owned activation produced by one recorded primitive. Entries are only
//! ever appended, so the tape is topologically ordered by construction and
//! [`Tape::backward`] is a single reverse sweep.

use rand::Rng;

use crate::error::{Error, Result};
use crate::signature::{self, sig_dim};
use crate::tensor::{matmul_nt_acc, matmul_raw, matmul_tn_acc, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub usize);

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct ParamId(pub usize);

impl ParamId {
    pub fn var(self) -> Var {
        Var(self.0)
    }
}

/// Named trainable tensors, addressed by [`ParamId`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor.with_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }

    /// Copy the gradients computed by `tape` into each parameter's grad slot.
    pub fn absorb_grads(&mut self, tape: &Tape<'_>) {
        for (i, t) in self.tensors.iter_mut().enumerate() {
            t.grad = Some(
                tape.grad(Var(i))
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.len()]),
            );
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    MeanRows(Var),
    Row(Var, usize),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout(Var, Vec<f64>),
    ConcatCols(Vec<Var>),
    PadCols(Var),
    MeanPadRows(Var),
    Signature {
        path: Var,
        order: usize,
        stream: bool,
        prefixes: Vec<f64>,
    },
    SquaredError(Var, f64),
    CrossEntropy {
        logits: Var,
        target: usize,
        weight: f64,
        probs: Vec<f64>,
    },
    LinComb(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Deliberate backward-rule corruption used to prove the gradient checker bites.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Halve every gradient flowing through `relu`.
    ReluHalfGrad,
}

/// Recorded forward computation.
pub struct Tape<'p> {
    params: Option<&'p ParamStore>,
    n_params: usize,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    fault: Option<Fault>,
}

impl<'p> Default for Tape<'p> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            params: None,
            n_params: 0,
            nodes: Vec::new(),
            grads: Vec::new(),
            fault: None,
        }
    }

    /// A tape whose first `store.len()` variables are the store's parameters.
    pub fn with_params(store: &'p ParamStore) -> Self {
        Self {
            params: Some(store),
            n_params: store.len(),
            nodes: Vec::new(),
            grads: Vec::new(),
            fault: None,
        }
    }

    pub fn inject_fault(&mut self, fault: Option<Fault>) {
        self.fault = fault;
    }

    /// Number of recorded entries, parameters excluded.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param(&self, id: ParamId) -> Var {
        debug_assert!(id.0 < self.n_params);
        id.var()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        if v.0 < self.n_params {
            self.params.expect("param store").get(ParamId(v.0)).data()
        } else {
            &self.nodes[v.0 - self.n_params].value
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        if v.0 < self.n_params {
            self.params.expect("param store").get(ParamId(v.0)).shape()
        } else {
            &self.nodes[v.0 - self.n_params].shape
        }
    }

    fn requires_grad(&self, v: Var) -> bool {
        v.0 < self.n_params || self.nodes[v.0 - self.n_params].requires_grad
    }

    /// Copy of a node's value as a tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("valid node")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    /// Gradient of the last [`Tape::backward`] loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Contract(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.n_params + self.nodes.len() - 1)
    }

    /// Record an input tensor; its `requires_grad` flag decides whether it receives a gradient.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 || self.shape(a).len() != 2 || self.shape(b).len() != 2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let value = matmul_raw(self.value(a), self.value(b), m, k, n);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(vec![m, n], value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        let src = self.value(a);
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                value[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(vec![n, m], value, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("add", self.shape(a), self.shape(b)));
        }
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Add(a, b), rg))
    }

    /// `x[m×n] + bias[n]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.dims2(x)?;
        if self.shape(bias) != [n] {
            return Err(Error::dim("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let value = self
            .value(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(v, c)| v + c))
            .collect();
        let rg = self.requires_grad(x) || self.requires_grad(bias);
        Ok(self.push(self.shape(x).to_vec(), value, Op::AddBias(x, bias), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("mul", self.shape(a), self.shape(b)));
        }
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).iter().map(|x| x * c).collect();
        let rg = self.requires_grad(a);
        self.push(self.shape(a).to_vec(), value, Op::Scale(a, c), rg)
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.requires_grad(a);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    /// Column means of an `m×n` matrix, shape `[1, n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        let mut value = vec![0.0; n];
        for row in self.value(a).chunks(n) {
            for (acc, v) in value.iter_mut().zip(row) {
                *acc += v;
            }
        }
        value.iter_mut().for_each(|v| *v /= m as f64);
        let rg = self.requires_grad(a);
        Ok(self.push(vec![1, n], value, Op::MeanRows(a), rg))
    }

    /// Row `i` of an `m×n` matrix, shape `[1, n]`.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        if i >= m {
            return Err(Error::Contract(format!("row {i} out of range for {m} rows")));
        }
        let value = self.value(a)[i * n..(i + 1) * n].to_vec();
        let rg = self.requires_grad(a);
        Ok(self.push(vec![1, n], value, Op::Row(a, i), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let rg = self.requires_grad(a);
        self.push(self.shape(a).to_vec(), value, Op::Relu(a), rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (_, n) = self.dims2(a)?;
        let src = self.value(a);
        if src.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax_rows input contains NaN".into()));
        }
        let mut value = Vec::with_capacity(src.len());
        for row in src.chunks(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = value.len();
            let mut total = 0.0;
            for &x in row {
                let e = (x - max).exp();
                total += e;
                value.push(e);
            }
            value[start..].iter_mut().for_each(|v| *v /= total);
        }
        let rg = self.requires_grad(a);
        Ok(self.push(self.shape(a).to_vec(), value, Op::SoftmaxRows(a), rg))
    }

    /// Normalize each row to zero mean and unit (population) variance, then apply `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let (_, d) = self.dims2(x)?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let src = self.value(x);
        let mut xhat = Vec::with_capacity(src.len());
        let mut inv_std = Vec::with_capacity(src.len() / d);
        let mut value = Vec::with_capacity(src.len());
        for row in src.chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            inv_std.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                value.push(h * g[j] + b[j]);
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(gain) || self.requires_grad(bias);
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        Ok(self.push(self.shape(x).to_vec(), value, op, rg))
    }

    /// Inverted dropout: zero with probability `p`, scale survivors by `1/(1-p)`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate must lie in [0, 1), got {p}")));
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let value = self.value(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let rg = self.requires_grad(a);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Dropout(a, mask), rg))
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols needs at least one input".into()))?;
        let (m, _) = self.dims2(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if r != m {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                value.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(vec![m, total], value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Zero-pad (or truncate) each row to `width` columns.
    pub fn pad_cols(&mut self, a: Var, width: usize) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        let mut value = vec![0.0; m * width];
        let keep = n.min(width);
        for i in 0..m {
            value[i * width..i * width + keep].copy_from_slice(&self.value(a)[i * n..i * n + keep]);
        }
        let rg = self.requires_grad(a);
        Ok(self.push(vec![m, width], value, Op::PadCols(a), rg))
    }

    /// Mean over rows, then zero-padded to `width`: the no-signature stand-in for a pooled signature.
    pub fn mean_pad_rows(&mut self, a: Var, width: usize) -> Result<Var> {
        let (m, n) = self.dims2(a)?;
        let mut value = vec![0.0; width];
        for row in self.value(a).chunks(n) {
            for (acc, v) in value.iter_mut().zip(row) {
                *acc += v / m as f64;
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push(vec![1, width], value, Op::MeanPadRows(a), rg))
    }

    /// Truncated signature of the path whose points are the rows of `path`.
    ///
    /// Stream mode returns `L × sig_dim` prefix signatures, otherwise `1 × sig_dim`.
    pub fn signature(&mut self, path: Var, order: usize, stream: bool) -> Result<Var> {
        let (len, d) = self.dims2(path)?;
        let n = sig_dim(d, order)?;
        let prefixes = signature::stream_raw(self.value(path), len, d, order);
        let (shape, value) = if stream {
            (vec![len, n], prefixes.clone())
        } else {
            (vec![1, n], prefixes[(len - 1) * n..].to_vec())
        };
        let rg = self.requires_grad(path);
        let op = Op::Signature {
            path,
            order,
            stream,
            prefixes,
        };
        Ok(self.push(shape, value, op, rg))
    }

    /// `(pred - target)²` for a single-entry prediction, shape `[1]`.
    pub fn squared_error(&mut self, pred: Var, target: f64) -> Result<Var> {
        if self.value(pred).len() != 1 {
            return Err(Error::dim("squared_error", self.shape(pred), &[1]));
        }
        let r = self.value(pred)[0] - target;
        let rg = self.requires_grad(pred);
        Ok(self.push(vec![1], vec![r * r], Op::SquaredError(pred, target), rg))
    }

    /// `weight · (logsumexp(logits) - logits[target])`, shape `[1]`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize, weight: f64) -> Result<Var> {
        let z = self.value(logits);
        if target >= z.len() {
            return Err(Error::Data(format!(
                "label {target} outside [0, {})",
                z.len()
            )));
        }
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = z.iter().map(|v| (v - max).exp()).sum();
        let lse = max + total.ln();
        let probs: Vec<f64> = z.iter().map(|v| (v - lse).exp()).collect();
        let loss = weight * (lse - z[target]);
        let rg = self.requires_grad(logits);
        let op = Op::CrossEntropy {
            logits,
            target,
            weight,
            probs,
        };
        Ok(self.push(vec![1], vec![loss], op, rg))
    }

    /// `Σ c_i · x_i` over same-shaped inputs.
    pub fn lin_comb(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let (first, _) = *terms
            .first()
            .ok_or_else(|| Error::Contract("lin_comb needs at least one term".into()))?;
        let shape = self.shape(first).to_vec();
        let mut value = vec![0.0; self.value(first).len()];
        for &(v, c) in terms {
            if self.shape(v) != shape.as_slice() {
                return Err(Error::dim("lin_comb", &shape, self.shape(v)));
            }
            for (acc, x) in value.iter_mut().zip(self.value(v)) {
                *acc += c * x;
            }
        }
        let rg = terms.iter().any(|&(v, _)| self.requires_grad(v));
        Ok(self.push(shape, value, Op::LinComb(terms.to_vec()), rg))
    }

    fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    /// Populate gradients of `loss` for every variable that requires them.
    ///
    /// Gradients accumulate across fan-out. Calling again discards the previous pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let total = self.n_params + self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; total];
        grads[loss.0] = Some(vec![1.0]);
        let lens: Vec<usize> = (0..total).map(|i| self.value(Var(i)).len()).collect();
        let needs = |tape: &Self, v: Var| tape.requires_grad(v);

        for idx in (0..self.nodes.len()).rev() {
            let id = self.n_params + idx;
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = self.dims2(*a)?;
                    let (_, n) = self.dims2(*b)?;
                    if needs(self, *a) {
                        let bv = self.value(*b);
                        matmul_nt_acc(&g, bv, Self::acc(&mut grads, *a, lens[a.0]), m, k, n);
                    }
                    if needs(self, *b) {
                        let av = self.value(*a);
                        matmul_tn_acc(av, &g, Self::acc(&mut grads, *b, lens[b.0]), m, k, n);
                    }
                }
                Op::Transpose(a) => {
                    let (m, n) = self.dims2(*a)?;
                    let ga = Self::acc(&mut grads, *a, lens[a.0]);
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if needs(self, v) {
                            let gv = Self::acc(&mut grads, v, lens[v.0]);
                            gv.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                        }
                    }
                }
                Op::AddBias(x, bias) => {
                    let n = lens[bias.0];
                    if needs(self, *x) {
                        let gx = Self::acc(&mut grads, *x, lens[x.0]);
                        gx.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                    }
                    if needs(self, *bias) {
                        let gb = Self::acc(&mut grads, *bias, n);
                        for row in g.chunks(n) {
                            gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if needs(self, *a) {
                        let bv = self.value(*b).to_vec();
                        let ga = Self::acc(&mut grads, *a, lens[a.0]);
                        for ((x, gy), bv) in ga.iter_mut().zip(&g).zip(&bv) {
                            *x += gy * bv;
                        }
                    }
                    if needs(self, *b) {
                        let av = self.value(*a).to_vec();
                        let gb = Self::acc(&mut grads, *b, lens[b.0]);
                        for ((x, gy), av) in gb.iter_mut().zip(&g).zip(&av) {
                            *x += gy * av;
                        }
                    }
                }
                Op::Scale(a, c) => {
                    let ga = Self::acc(&mut grads, *a, lens[a.0]);
                    ga.iter_mut().zip(&g).for_each(|(x, y)| *x += c * y);
                }
                Op::Sum(a) => {
                    let ga = Self::acc(&mut grads, *a, lens[a.0]);
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
                Op::MeanRows(a) => {
                    let (m, n) = self.dims2(*a)?;
                    let ga = Self::acc(&mut grads, *a, lens[a.0]);
                    for row in ga.chunks_mut(n) {
                        row.iter_mut().zip(&g).for_each(|(x, y)| *x += y / m as f64);
                    }
                }
                Op::Row(a, i) => {
                    let n = g.len();
                    let ga = Self::acc(&mut grads, *a, lens[a.0]);
                    ga[i * n..(i + 1) * n]
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(x, y)| *x += y);
                }
                Op::Relu(a) => {
                    let scale = match self.fault {
                        Some(Fault::ReluHalfGrad) => 0.5,
                        None => 1.0,
                    };
                    let av = self.value(*a).to_vec();
                    let ga = Self::acc(&mut grads, *a, lens[a.0]);
                    for ((x, gy), v) in ga.iter_mut().zip(&g).zip(&av) {
                        if *v > 0.0 {
                            *x += scale * gy;
                        }
                    }
                }
                Op::SoftmaxRows(a) => {
                    let (_, n) = self.dims2(*a)?;
                    let y = &node.value;
                    let ga = Self::acc(&mut grads, *a, lens[a.0]);
                    for ((gar, yr), gr) in ga.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            gar[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let d = lens[gain.0];
                    let gv = self.value(*gain).to_vec();
                    if needs(self, *gain) {
                        let gg = Self::acc(&mut grads, *gain, d);
                        for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                gg[j] += gr[j] * hr[j];
                            }
                        }
                    }
                    if needs(self, *bias) {
                        let gb = Self::acc(&mut grads, *bias, d);
                        for gr in g.chunks(d) {
                            gb.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                        }
                    }
                    if needs(self, *x) {
                        let gx = Self::acc(&mut grads, *x, lens[x.0]);
                        for (r, ((gxr, gr), hr)) in gx
                            .chunks_mut(d)
                            .zip(g.chunks(d))
                            .zip(xhat.chunks(d))
                            .enumerate()
                        {
                            let dh: Vec<f64> = gr.iter().zip(&gv).map(|(a, b)| a * b).collect();
                            let mean_dh = dh.iter().sum::<f64>() / d as f64;
                            let mean_dh_h =
                                dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                            for j in 0..d {
                                gxr[j] += inv_std[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                            }
                        }
                    }
                }
                Op::Dropout(a, mask) => {
                    let ga = Self::acc(&mut grads, *a, lens[a.0]);
                    for ((x, gy), m) in ga.iter_mut().zip(&g).zip(mask) {
                        *x += gy * m;
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = node.shape[1];
                    let m = node.shape[0];
                    let mut col = 0;
                    for &p in parts {
                        let w = lens[p.0] / m;
                        if needs(self, p) {
                            let gp = Self::acc(&mut grads, p, lens[p.0]);
                            for i in 0..m {
                                for j in 0..w {
                                    gp[i * w + j] += g[i * total + col + j];
                                }
                            }
                        }
                        col += w;
                    }
                }
                Op::PadCols(a) => {
                    let (m, n) = self.dims2(*a)?;
                    let width = node.shape[1];
                    let keep = n.min(width);
                    let ga = Self::acc(&mut grads, *a, lens[a.0]);
                    for i in 0..m {
                        for j in 0..keep {
                            ga[i * n + j] += g[i * width + j];
                        }
                    }
                }
                Op::MeanPadRows(a) => {
                    let (m, n) = self.dims2(*a)?;
                    let keep = n.min(g.len());
                    let ga = Self::acc(&mut grads, *a, lens[a.0]);
                    for row in ga.chunks_mut(n) {
                        for j in 0..keep {
                            row[j] += g[j] / m as f64;
                        }
                    }
                }
                Op::Signature {
                    path,
                    order,
                    stream,
                    prefixes,
                } => {
                    let (len, d) = self.dims2(*path)?;
                    let gp = signature::stream_backward_raw(
                        self.value(*path),
                        prefixes,
                        &g,
                        len,
                        d,
                        *order,
                        *stream,
                    );
                    let ga = Self::acc(&mut grads, *path, lens[path.0]);
                    ga.iter_mut().zip(&gp).for_each(|(x, y)| *x += y);
                }
                Op::SquaredError(p, target) => {
                    let r = self.value(*p)[0] - target;
                    let ga = Self::acc(&mut grads, *p, 1);
                    ga[0] += 2.0 * r * g[0];
                }
                Op::CrossEntropy {
                    logits,
                    target,
                    weight,
                    probs,
                } => {
                    let ga = Self::acc(&mut grads, *logits, probs.len());
                    for (j, p) in probs.iter().enumerate() {
                        let ind = if j == *target { 1.0 } else { 0.0 };
                        ga[j] += g[0] * weight * (p - ind);
                    }
                }
                Op::LinComb(terms) => {
                    for &(v, c) in terms {
                        if needs(self, v) {
                            let gv = Self::acc(&mut grads, v, lens[v.0]);
                            gv.iter_mut().zip(&g).for_each(|(x, y)| *x += c * y);
                        }
                    }
                }
            }
            grads[id] = Some(g);
        }
        // constants never receive gradients
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[self.n_params + i] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient for a leaf recorded from `t`, as a tensor.
    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v)
            .map(|g| Tensor::new(self.shape(v).to_vec(), g.to_vec()).expect("grad shape"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn leaf(tape: &mut Tape<'_>, shape: &[usize], data: &[f64]) -> Var {
        tape.leaf(&Tensor::new(shape.to_vec(), data.to_vec()).unwrap().with_grad())
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let i = tape.constant(&Tensor::identity(2));
        let b = tape.constant(&Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 4.0]);

        let x = tape.constant(&Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let y = tape.constant(&Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap());
        let z = tape.matmul(x, y).unwrap();
        assert_eq!(tape.value(z), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(&[2, 3]));
        let b = tape.constant(&Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::matrix(3, 2, vec![0.0, 0.0, 1.0, 0.0, 7.5, 7.5]).unwrap());
        let y = tape.softmax_rows(x).unwrap();
        let v = tape.value(y);
        assert_eq!(&v[..2], &[0.5, 0.5]);
        let e = std::f64::consts::E;
        assert!((v[2] - e / (e + 1.0)).abs() < 1e-15);
        assert!((v[3] - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert!((v[2] - 0.7311).abs() < 1e-4 && (v[3] - 0.2689).abs() < 1e-4);

        let c = tape.constant(&Tensor::vector(vec![4.0, 4.0, 4.0]));
        let s = tape.softmax_rows(c).unwrap();
        assert!(tape.value(s).iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::vector(vec![0.0, f64::NAN]));
        assert!(matches!(tape.softmax_rows(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn relu_examples() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3], &[-1.0, 0.0, 2.0]);
        let y = tape.relu(x);
        assert_eq!(tape.value(y), &[0.0, 0.0, 2.0]);
        let n = tape.constant(&Tensor::full(&[4], -3.0));
        let r = tape.relu(n);
        assert!(tape.value(r).iter().all(|&v| v == 0.0));

        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], &[-1.0, 2.0]);
        let y = tape.relu(x);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let g = tape.constant(&Tensor::full(&[3], 1.0));
        let b = tape.constant(&Tensor::zeros(&[3]));
        let x = tape.constant(&Tensor::vector(vec![1.0, 1.0, 1.0]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0, 0.0]);

        let g = tape.constant(&Tensor::full(&[2], 1.0));
        let b = tape.constant(&Tensor::zeros(&[2]));
        let x = tape.constant(&Tensor::vector(vec![0.0, 2.0]));
        let y = tape.layer_norm(x, g, b, 1e-14).unwrap();
        let v = tape.value(y);
        assert!((v[0] + 1.0).abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12);
        assert!(tape.layer_norm(x, g, b, 0.0).is_err());
    }

    #[test]
    fn layer_norm_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 16;
        let x = Tensor::uniform(&[5, d], -3.0, 3.0, &mut rng);
        let gain = Tensor::uniform(&[d], 0.5, 2.0, &mut rng);
        let bias = Tensor::uniform(&[d], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let (xv, gv, bv) = (tape.constant(&x), tape.constant(&gain), tape.constant(&bias));
        let y = tape.layer_norm(xv, gv, bv, 1e-12).unwrap();
        // with gain and bias stripped back out each row is standardized
        for row in tape.value(y).chunks(d) {
            let h: Vec<f64> = row
                .iter()
                .zip(gain.data().iter().zip(bias.data()))
                .map(|(v, (g, b))| (v - b) / g)
                .collect();
            let mean = h.iter().sum::<f64>() / d as f64;
            let var = h.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn dropout_behaviour() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::full(&[10], 2.0));
        assert_eq!(tape.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(tape.dropout(x, 0.1, false, &mut rng).unwrap(), x);
        assert!(matches!(tape.dropout(x, 1.0, true, &mut rng), Err(Error::Config(_))));
        assert!(tape.dropout(x, -0.1, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_preserves_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::full(&[1_000_000], 1.0));
        let y = tape.dropout(x, 0.1, true, &mut rng).unwrap();
        let v = tape.value(y);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        let zeros = v.iter().filter(|&&x| x == 0.0).count() as f64 / v.len() as f64;
        assert!((zeros - 0.1).abs() < 0.005);
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3], &[0.1, 0.2, 0.3]);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], &[2.0, 3.0]);
        let xx = tape.mul(x, x).unwrap();
        let s = tape.sum(xx);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0, 6.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], &[2.0, 3.0]);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        // x used twice versus two independent copies of x
        let data = [0.3, -1.4, 2.2];
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3], &data);
        let a = tape.relu(x);
        let b = tape.mul(x, x).unwrap();
        let c = tape.add(a, b).unwrap();
        let s = tape.sum(c);
        tape.backward(s).unwrap();
        let shared = tape.grad(x).unwrap().to_vec();

        let mut tape = Tape::new();
        let x1 = leaf(&mut tape, &[3], &data);
        let x2 = leaf(&mut tape, &[3], &data);
        let a = tape.relu(x1);
        let b = tape.mul(x2, x2).unwrap();
        let c = tape.add(a, b).unwrap();
        let s = tape.sum(c);
        tape.backward(s).unwrap();
        let split: Vec<f64> = tape
            .grad(x1)
            .unwrap()
            .iter()
            .zip(tape.grad(x2).unwrap())
            .map(|(p, q)| p + q)
            .collect();
        assert_eq!(shared, split);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(&Tensor::vector(vec![1.0, 2.0]));
        let x = leaf(&mut tape, &[2], &[1.0, 1.0]);
        let y = tape.mul(c, x).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn params_are_borrowed_leaves() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![1.5, -2.0]));
        let mut tape = Tape::with_params(&store);
        let wv = tape.param(w);
        let sq = tape.mul(wv, wv).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(wv).unwrap(), &[3.0, -4.0]);
        let mut store2 = store.clone();
        store2.absorb_grads(&tape);
        assert_eq!(store2.get(w).grad.as_deref(), Some(&[3.0, -4.0][..]));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let z = tape.constant(&Tensor::full(&[1, 5], 0.7));
        let ce = tape.cross_entropy(z, 2, 1.0).unwrap();
        assert!((tape.scalar(ce) - 5f64.ln()).abs() < 1e-12);
        assert!(matches!(tape.cross_entropy(z, 5, 1.0), Err(Error::Data(_))));
    }
}
