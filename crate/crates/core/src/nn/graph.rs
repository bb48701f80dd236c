//! Reverse-mode tape over the fixed layer set.
//!
//! A [`Graph`] records each kernel invocation together with whatever the
//! backward kernel needs. Parameters are referenced from a borrowed
//! [`ParameterStore`] without copying; [`Graph::backward`] returns gradients
//! aligned with that store.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::kernels::{self, ConvGeometry, GaussianStep, LstmCache};
use crate::nn::params::{Gradients, ParameterStore};
use crate::nn::tensor::Tensor;
use crate::scene::Point;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Input,
    Param(usize),
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize },
    LeakyRelu { x: Var, alpha: f64 },
    Add(Var, Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Lstm { pre: Var, row: usize, state: Option<Var>, w_hh: Var, b: Var, cache: LstmCache },
    Conv { x: Var, k: Var, b: Var, geo: ConvGeometry },
    MaxPool { x: Var, argmax: Vec<usize> },
    Scatter { items: Vec<(Var, usize)>, cells: usize },
    Head { raw: Var, step_scale: f64 },
    Nll { params: Var, targets: Vec<Point> },
    SoftmaxCe { logits: Var, class: usize },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Vec<f64>,
    op: Op,
}

pub struct Graph<'p> {
    store: &'p ParameterStore,
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParameterStore) -> Self {
        Self { store, nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn store(&self) -> &'p ParameterStore {
        self.store
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match self.nodes[v.0].op {
            Op::Param(idx) => self.store.value(idx).data(),
            _ => &self.nodes[v.0].value,
        }
    }

    fn param_shape(&self, v: Var) -> Option<&[usize]> {
        match self.nodes[v.0].op {
            Op::Param(idx) => Some(self.store.value(idx).shape()),
            _ => None,
        }
    }

    pub fn input(&mut self, data: Vec<f64>) -> Var {
        self.push(data, Op::Input)
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let idx = self.store.index_of(name).ok_or_else(|| Error::MissingParameters(name.to_string()))?;
        if let Some(v) = self.params.get(&idx) {
            return Ok(*v);
        }
        let v = self.push(Vec::new(), Op::Param(idx));
        self.params.insert(idx, v);
        Ok(v)
    }

    fn matrix_dims(&self, w: Var) -> Result<(usize, usize)> {
        match self.param_shape(w) {
            Some([out, inner]) => Ok((*out, *inner)),
            other => Err(Error::Shape(format!("expected a 2-D weight parameter, got {other:?}"))),
        }
    }

    /// Row-wise `W x + b`; `x` may hold several rows of `in` values.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (out, inner) = self.matrix_dims(w)?;
        let xv = self.value(x);
        if inner == 0 || !xv.len().is_multiple_of(inner) || xv.is_empty() {
            return Err(Error::Shape(format!("linear input of {} values for {inner} columns", xv.len())));
        }
        if let Some(b) = b {
            if self.value(b).len() != out {
                return Err(Error::Shape(format!("bias of {} values for {out} outputs", self.value(b).len())));
            }
        }
        let rows = xv.len() / inner;
        let mut y = vec![0.0; rows * out];
        kernels::linear_rows(xv, self.value(w), b.map(|b| self.value(b)), rows, inner, out, &mut y);
        Ok(self.push(y, Op::Linear { x, w, b, rows }))
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Var {
        let y = kernels::leaky_relu(self.value(x), alpha);
        self.push(y, Op::LeakyRelu { x, alpha })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() {
            return Err(Error::Shape(format!("add of {} and {} values", av.len(), bv.len())));
        }
        let y = av.iter().zip(bv).map(|(x, y)| x + y).collect();
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut y = Vec::new();
        for p in parts {
            y.extend_from_slice(self.value(*p));
        }
        self.push(y, Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.len() {
            return Err(Error::Shape(format!("slice {start}..{} of {} values", start + len, xv.len())));
        }
        let y = xv[start..start + len].to_vec();
        Ok(self.push(y, Op::Slice { x, start }))
    }

    /// One LSTM step. `pre` holds the input projection `W_ih x`, possibly for
    /// several steps; `row` selects this step's row. `state` is the packed
    /// `[h; c]` of the previous step (zeros when `None`). Returns packed `[h'; c']`.
    pub fn lstm_step(&mut self, pre: Var, row: usize, state: Option<Var>, w_hh: Var, b: Var) -> Result<Var> {
        let (four_h, hidden) = self.matrix_dims(w_hh)?;
        if four_h != 4 * hidden {
            return Err(Error::Shape(format!("recurrent weights {four_h}x{hidden}")));
        }
        let pv = self.value(pre);
        if pv.len() < (row + 1) * four_h || self.value(b).len() != four_h {
            return Err(Error::Shape("lstm pre-activation or bias size mismatch".into()));
        }
        let zeros = vec![0.0; 2 * hidden];
        let sv = match state {
            Some(s) => self.value(s),
            None => &zeros,
        };
        if sv.len() != 2 * hidden {
            return Err(Error::Shape(format!("lstm state of {} values for hidden {hidden}", sv.len())));
        }
        let (h, c, cache) = kernels::lstm_gates_forward(
            &pv[row * four_h..(row + 1) * four_h],
            &sv[..hidden],
            &sv[hidden..],
            self.value(w_hh),
            self.value(b),
        );
        let mut y = h;
        y.extend(c);
        Ok(self.push(y, Op::Lstm { pre, row, state, w_hh, b, cache }))
    }

    /// Convolution over a flat `[C,H,W]` value. Returns the output and its shape.
    pub fn conv2d(
        &mut self,
        x: Var,
        shape: [usize; 3],
        k: Var,
        b: Var,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<(Var, [usize; 3])> {
        let kshape = self.param_shape(k).ok_or_else(|| Error::Shape("conv kernels must be a parameter".into()))?;
        let geo = ConvGeometry::infer(&shape, kshape, stride, padding)?;
        if self.value(x).len() != shape.iter().product::<usize>() || self.value(b).len() != geo.out_channels {
            return Err(Error::Shape("conv input or bias size mismatch".into()));
        }
        let input = Tensor::raw(shape.to_vec(), self.value(x).to_vec());
        let kernels_t = self.store.value(self.param_index(k));
        let bias = Tensor::raw(vec![geo.out_channels], self.value(b).to_vec());
        let y = kernels::conv2d(&input, kernels_t, Some(&bias), stride, padding)?;
        let (oh, ow) = geo.output_hw();
        Ok((self.push(y.into_data(), Op::Conv { x, k, b, geo }), [geo.out_channels, oh, ow]))
    }

    pub fn max_pool2d(&mut self, x: Var, shape: [usize; 3], window: (usize, usize)) -> Result<(Var, [usize; 3])> {
        let input = Tensor::new(shape.to_vec(), self.value(x).to_vec())?;
        let (y, argmax) = kernels::max_pool2d(&input, window)?;
        let out_shape = [shape[0], shape[1] / window.0, shape[2] / window.1];
        Ok((self.push(y.into_data(), Op::MaxPool { x, argmax }), out_shape))
    }

    /// Places each item's vector (one value per channel) at its cell of a
    /// zero `[channels, cells]` map. Cells must be distinct.
    pub fn scatter(&mut self, items: &[(Var, usize)], channels: usize, cells: usize) -> Result<Var> {
        let mut y = vec![0.0; channels * cells];
        for (v, cell) in items {
            let vals = self.value(*v);
            if vals.len() != channels || *cell >= cells {
                return Err(Error::Shape(format!("scatter of {} values into cell {cell}", vals.len())));
            }
            for (ch, val) in vals.iter().enumerate() {
                y[ch * cells + cell] = *val;
            }
        }
        Ok(self.push(y, Op::Scatter { items: items.to_vec(), cells }))
    }

    /// See [`kernels::trajectory_head`].
    pub fn trajectory_head(&mut self, raw: Var, step_scale: f64) -> Result<Var> {
        if !self.value(raw).len().is_multiple_of(GaussianStep::WIDTH) {
            return Err(Error::Shape("trajectory head input must have 5 columns".into()));
        }
        let y = kernels::trajectory_head(self.value(raw), step_scale);
        Ok(self.push(y, Op::Head { raw, step_scale }))
    }

    /// Mean bivariate Gaussian NLL of `targets` under `[steps, 5]` parameters.
    pub fn gaussian_nll(&mut self, params: Var, targets: Vec<Point>) -> Result<Var> {
        let steps = gaussian_steps(self.value(params));
        let loss = kernels::bivariate_gaussian_nll(&targets, &steps)?;
        Ok(self.push(vec![loss], Op::Nll { params, targets }))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, class: usize) -> Result<Var> {
        let loss = kernels::softmax_cross_entropy(self.value(logits), class)?;
        Ok(self.push(vec![loss], Op::SoftmaxCe { logits, class }))
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let total = terms.iter().map(|(v, w)| self.value(*v)[0] * w).sum();
        self.push(vec![total], Op::WeightedSum(terms.to_vec()))
    }

    fn param_index(&self, v: Var) -> usize {
        match self.nodes[v.0].op {
            Op::Param(idx) => idx,
            _ => unreachable!("not a parameter node"),
        }
    }

    /// Gradients of the scalar `loss` with respect to every parameter of the store.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads = Gradients::zeros_like(self.store);
        let mut adj: Vec<Vec<f64>> = vec![Vec::new(); self.nodes.len()];
        adj[loss.0] = vec![1.0];
        for i in (0..=loss.0).rev() {
            if adj[i].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut adj[i]);
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(idx) => grads.get_mut(*idx).add_assign(&g),
                Op::Linear { x, w, b, rows } => {
                    let (out, inner) = self.matrix_dims(*w).expect("validated at construction");
                    let wv = self.value(*w);
                    let xv = self.value(*x);
                    let mut dx = take_or_zero(&mut adj, *x, xv.len());
                    let mut dw = take_or_zero(&mut adj, *w, wv.len());
                    let mut db = b.map(|b| take_or_zero(&mut adj, b, out));
                    kernels::linear_rows_backward(
                        xv,
                        wv,
                        &g,
                        *rows,
                        inner,
                        out,
                        Some(&mut dx),
                        Some(&mut dw),
                        db.as_deref_mut(),
                    );
                    adj[x.0] = dx;
                    adj[w.0] = dw;
                    if let (Some(b), Some(db)) = (b, db) {
                        adj[b.0] = db;
                    }
                }
                Op::LeakyRelu { x, alpha } => {
                    let d = kernels::leaky_relu_backward(self.value(*x), *alpha, &g);
                    accumulate(&mut adj, *x, &d);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, &g);
                    accumulate(&mut adj, *b, &g);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        accumulate(&mut adj, *p, &g[offset..offset + n]);
                        offset += n;
                    }
                }
                Op::Slice { x, start } => {
                    let n = self.value(*x).len();
                    let mut dx = take_or_zero(&mut adj, *x, n);
                    for (d, v) in dx[*start..*start + g.len()].iter_mut().zip(&g) {
                        *d += v;
                    }
                    adj[x.0] = dx;
                }
                Op::Lstm { pre, row, state, w_hh, b, cache } => {
                    let hidden = cache.h_prev.len();
                    let four_h = 4 * hidden;
                    let mut d_pre_all = take_or_zero(&mut adj, *pre, self.value(*pre).len());
                    let mut d_state = state.map(|s| take_or_zero(&mut adj, s, 2 * hidden)).unwrap_or_else(|| vec![0.0; 2 * hidden]);
                    let mut dw = take_or_zero(&mut adj, *w_hh, four_h * hidden);
                    let mut db = take_or_zero(&mut adj, *b, four_h);
                    let (dh, dc) = d_state.split_at_mut(hidden);
                    kernels::lstm_gates_backward(
                        cache,
                        self.value(*w_hh),
                        &g[..hidden],
                        &g[hidden..],
                        &mut d_pre_all[row * four_h..(row + 1) * four_h],
                        dh,
                        dc,
                        &mut dw,
                        &mut db,
                    );
                    adj[pre.0] = d_pre_all;
                    if let Some(s) = state {
                        adj[s.0] = d_state;
                    }
                    adj[w_hh.0] = dw;
                    adj[b.0] = db;
                }
                Op::Conv { x, k, b, geo } => {
                    let mut dx = take_or_zero(&mut adj, *x, self.value(*x).len());
                    let mut dk = take_or_zero(&mut adj, *k, self.value(*k).len());
                    let mut db = take_or_zero(&mut adj, *b, geo.out_channels);
                    kernels::conv2d_accumulate_backward(geo, self.value(*x), self.value(*k), &g, Some(&mut dx), &mut dk, &mut db);
                    adj[x.0] = dx;
                    adj[k.0] = dk;
                    adj[b.0] = db;
                }
                Op::MaxPool { x, argmax } => {
                    let mut dx = take_or_zero(&mut adj, *x, self.value(*x).len());
                    for (&idx, v) in argmax.iter().zip(&g) {
                        dx[idx] += v;
                    }
                    adj[x.0] = dx;
                }
                Op::Scatter { items, cells } => {
                    for (v, cell) in items {
                        let channels = self.value(*v).len();
                        let d: Vec<f64> = (0..channels).map(|ch| g[ch * cells + cell]).collect();
                        accumulate(&mut adj, *v, &d);
                    }
                }
                Op::Head { raw, step_scale } => {
                    let d = kernels::trajectory_head_backward(&node.value, &g, *step_scale);
                    accumulate(&mut adj, *raw, &d);
                }
                Op::Nll { params, targets } => {
                    let steps = gaussian_steps(self.value(*params));
                    let d = kernels::bivariate_gaussian_nll_backward(targets, &steps).expect("validated in forward");
                    let flat: Vec<f64> = d.iter().flat_map(|s| s.to_array().map(|v| v * g[0])).collect();
                    accumulate(&mut adj, *params, &flat);
                }
                Op::SoftmaxCe { logits, class } => {
                    let d = kernels::softmax_cross_entropy_backward(self.value(*logits), *class).expect("validated in forward");
                    let d: Vec<f64> = d.into_iter().map(|v| v * g[0]).collect();
                    accumulate(&mut adj, *logits, &d);
                }
                Op::WeightedSum(terms) => {
                    for (v, w) in terms {
                        accumulate(&mut adj, *v, &[g[0] * w]);
                    }
                }
            }
        }
        grads
    }
}

fn gaussian_steps(values: &[f64]) -> Vec<GaussianStep> {
    values.chunks_exact(GaussianStep::WIDTH).map(GaussianStep::from_slice).collect()
}

fn take_or_zero(adj: &mut [Vec<f64>], v: Var, len: usize) -> Vec<f64> {
    let cur = std::mem::take(&mut adj[v.0]);
    if cur.is_empty() {
        vec![0.0; len]
    } else {
        cur
    }
}

fn accumulate(adj: &mut [Vec<f64>], v: Var, d: &[f64]) {
    let slot = &mut adj[v.0];
    if slot.is_empty() {
        slot.extend_from_slice(d);
    } else {
        for (a, b) in slot.iter_mut().zip(d) {
            *a += b;
        }
    }
}
