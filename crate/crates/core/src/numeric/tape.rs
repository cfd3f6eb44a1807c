//! Reverse-mode differentiation over vector-valued nodes.
//!
//! Forward operations append a node holding its value and the recipe that
//! produced it. [`Tape::backward`] walks the nodes in reverse, accumulating
//! adjoints for every node and writing parameter gradients into the
//! [`ParamStore`] gradient buffers (accumulating, never overwriting).

use super::matrix::{axpy, dot, sigmoid, softmax};
use super::params::{ParamId, ParamStore};
use crate::error::{dim_err, Error, Result};

/// Lower clamp applied to both log arguments of the windowed cross-entropy.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Row(ParamId, usize),
    Col(ParamId, usize),
    Linear { terms: Vec<(ParamId, Var)>, bias: Option<ParamId> },
    Add(Var, Var),
    Mul(Var, Var),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Concat(Vec<Var>),
    Dot(Var, Var),
    Sum(Var),
    Scale(Var, f64),
    Hinge { pos: Var, neg: Var, margin: f64 },
    CrossEntropy { logits: Var, target: usize, probs: Vec<f64> },
    WindowCe { logits: Var, targets: Vec<usize>, probs: Vec<f64>, categorical: bool },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of every node reached by a backward pass.
#[derive(Debug)]
pub struct Gradients {
    adj: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` is off the loss path.
    pub fn wrt(&self, v: Var, len: usize) -> Vec<f64> {
        self.adj.get(v.0).and_then(|a| a.clone()).unwrap_or_else(|| vec![0.0; len])
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn input(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Input)
    }

    /// Whole parameter, flattened row-major.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).data().to_vec(), Op::Param(id))
    }

    /// Row `i` of a parameter matrix (embedding lookup).
    pub fn row(&mut self, store: &ParamStore, id: ParamId, i: usize) -> Result<Var> {
        let m = store.value(id);
        if i >= m.rows() {
            return Err(Error::OutOfRange(format!(
                "row {i} of {} with {} rows",
                store.name(id),
                m.rows()
            )));
        }
        Ok(self.push(m.row(i).to_vec(), Op::Row(id, i)))
    }

    /// Column `j` of a parameter matrix.
    pub fn col(&mut self, store: &ParamStore, id: ParamId, j: usize) -> Result<Var> {
        let m = store.value(id);
        if j >= m.cols() {
            return Err(Error::OutOfRange(format!(
                "column {j} of {} with {} columns",
                store.name(id),
                m.cols()
            )));
        }
        Ok(self.push(m.col(j), Op::Col(id, j)))
    }

    /// `Σ_k W_k x_k (+ b)`.
    pub fn linear(
        &mut self,
        store: &ParamStore,
        terms: &[(ParamId, Var)],
        bias: Option<ParamId>,
    ) -> Result<Var> {
        let rows = match (terms.first(), bias) {
            (Some((w, _)), _) => store.value(*w).rows(),
            (None, Some(b)) => store.value(b).len(),
            (None, None) => return dim_err("linear with no terms"),
        };
        let mut out = match bias {
            Some(b) => {
                let bv = store.value(b);
                if bv.len() != rows {
                    return dim_err(format!("bias {} has length {}, expected {rows}", store.name(b), bv.len()));
                }
                bv.data().to_vec()
            }
            None => vec![0.0; rows],
        };
        for &(w, x) in terms {
            let wm = store.value(w);
            let xv = &self.nodes[x.0].value;
            if wm.rows() != rows || wm.cols() != xv.len() {
                return dim_err(format!(
                    "{} is {}x{}, applied to length {} into {rows} outputs",
                    store.name(w),
                    wm.rows(),
                    wm.cols(),
                    xv.len()
                ));
            }
            wm.matvec_acc(xv, &mut out);
        }
        Ok(self.push(out, Op::Linear { terms: terms.to_vec(), bias }))
    }

    pub fn matvec(&mut self, store: &ParamStore, w: ParamId, x: Var) -> Result<Var> {
        self.linear(store, &[(w, x)], None)
    }

    fn same_len(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (la, lb) = (self.nodes[a.0].value.len(), self.nodes[b.0].value.len());
        if la != lb {
            return dim_err(format!("{what}: lengths {la} and {lb}"));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "add")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "mul")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| 1.0 - x).collect();
        self.push(v, Op::OneMinus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push(v, Op::Tanh(a))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut v = Vec::with_capacity(parts.iter().map(|p| self.value(*p).len()).sum());
        for p in parts {
            v.extend_from_slice(self.value(*p));
        }
        self.push(v, Op::Concat(parts.to_vec()))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "dot")?;
        let v = dot(self.value(a), self.value(b));
        Ok(self.push(vec![v], Op::Dot(a, b)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().sum();
        self.push(vec![v], Op::Sum(a))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).iter().map(|x| x * k).collect();
        self.push(v, Op::Scale(a, k))
    }

    /// Sum of scalar nodes.
    pub fn add_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        let mut it = xs.iter();
        let mut acc = *it.next().ok_or_else(|| Error::Input("empty sum".into()))?;
        for &x in it {
            acc = self.add(acc, x)?;
        }
        Ok(acc)
    }

    /// `max(0, -(pos - neg) + margin)` on scalar nodes. The subgradient at the
    /// kink is zero.
    pub fn hinge(&mut self, pos: Var, neg: Var, margin: f64) -> Var {
        let v = (-(self.scalar(pos) - self.scalar(neg)) + margin).max(0.0);
        self.push(vec![v], Op::Hinge { pos, neg, margin })
    }

    /// `-log softmax(logits)_target`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let z = self.value(logits);
        if target >= z.len() {
            return Err(Error::OutOfRange(format!("target {target} of {} classes", z.len())));
        }
        let probs = softmax(z);
        let loss = -super::matrix::log_softmax_at(z, target);
        Ok(self.push(vec![loss], Op::CrossEntropy { logits, target, probs }))
    }

    /// Windowed cross-entropy against a softmax of `logits`: for each target
    /// `t`, `-Σ_j [x_j ln ŷ_j + (1 - x_j) ln(1 - ŷ_j)]` with `x` one-hot at
    /// `t`, log arguments clamped below at [`LOG_CLAMP`]. With `categorical`
    /// the second term is dropped.
    pub fn window_ce(&mut self, logits: Var, targets: &[usize], categorical: bool) -> Result<Var> {
        let z = self.value(logits);
        if let Some(&t) = targets.iter().find(|&&t| t >= z.len()) {
            return Err(Error::OutOfRange(format!("target {t} of {} classes", z.len())));
        }
        let probs = softmax(z);
        let loss = window_ce_value(&probs, targets, categorical);
        Ok(self.push(
            vec![loss],
            Op::WindowCe { logits, targets: targets.to_vec(), probs, categorical },
        ))
    }

    /// Backpropagates from scalar `loss` with seed 1.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        self.backward_seeded(loss, 1.0, store)
    }

    /// Backpropagates `seed · ∂loss`. Parameter gradients are accumulated into `store`.
    pub fn backward_seeded(&self, loss: Var, seed: f64, store: &mut ParamStore) -> Result<Gradients> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::State("backward called before any forward operation".into()));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::State(format!("loss must be scalar, got length {}", lv.len())));
        }
        if !lv[0].is_finite() {
            return Err(Error::Diverged("loss".into()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![seed]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    axpy(1.0, &g, store.grad_mut(*id).data_mut());
                }
                Op::Row(id, r) => {
                    axpy(1.0, &g, store.grad_mut(*id).row_mut(*r));
                }
                Op::Col(id, c) => {
                    let gm = store.grad_mut(*id);
                    for (k, gk) in g.iter().enumerate() {
                        let v = gm.get(k, *c) + gk;
                        gm.set(k, *c, v);
                    }
                }
                Op::Linear { terms, bias } => {
                    if let Some(b) = bias {
                        axpy(1.0, &g, store.grad_mut(*b).data_mut());
                    }
                    for &(w, x) in terms {
                        let xv = &self.nodes[x.0].value;
                        store.grad_mut(w).add_outer(&g, xv);
                        let dx = acc(&mut adj, x, xv.len());
                        store.value(w).tmatvec_acc(&g, dx);
                    }
                }
                Op::Add(a, b) => {
                    axpy(1.0, &g, acc(&mut adj, *a, g.len()));
                    axpy(1.0, &g, acc(&mut adj, *b, g.len()));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let da = acc(&mut adj, *a, g.len());
                    for ((d, gi), bi) in da.iter_mut().zip(&g).zip(bv) {
                        *d += gi * bi;
                    }
                    let db = acc(&mut adj, *b, g.len());
                    for ((d, gi), ai) in db.iter_mut().zip(&g).zip(av) {
                        *d += gi * ai;
                    }
                }
                Op::OneMinus(a) => axpy(-1.0, &g, acc(&mut adj, *a, g.len())),
                Op::Sigmoid(a) => {
                    let da = acc(&mut adj, *a, g.len());
                    for ((d, gi), s) in da.iter_mut().zip(&g).zip(&node.value) {
                        *d += gi * s * (1.0 - s);
                    }
                }
                Op::Tanh(a) => {
                    let da = acc(&mut adj, *a, g.len());
                    for ((d, gi), t) in da.iter_mut().zip(&g).zip(&node.value) {
                        *d += gi * (1.0 - t * t);
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.nodes[p.0].value.len();
                        axpy(1.0, &g[off..off + n], acc(&mut adj, *p, n));
                        off += n;
                    }
                }
                Op::Dot(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    axpy(g[0], bv, acc(&mut adj, *a, av.len()));
                    axpy(g[0], av, acc(&mut adj, *b, bv.len()));
                }
                Op::Sum(a) => {
                    let n = self.nodes[a.0].value.len();
                    acc(&mut adj, *a, n).iter_mut().for_each(|d| *d += g[0]);
                }
                Op::Scale(a, k) => axpy(*k, &g, acc(&mut adj, *a, g.len())),
                Op::Hinge { pos, neg, margin } => {
                    let arg = -(self.scalar(*pos) - self.scalar(*neg)) + margin;
                    if arg > 0.0 {
                        acc(&mut adj, *pos, 1)[0] -= g[0];
                        acc(&mut adj, *neg, 1)[0] += g[0];
                    }
                }
                Op::CrossEntropy { logits, target, probs } => {
                    let dz = acc(&mut adj, *logits, probs.len());
                    for (j, (d, p)) in dz.iter_mut().zip(probs).enumerate() {
                        let ind = if j == *target { 1.0 } else { 0.0 };
                        *d += g[0] * (p - ind);
                    }
                }
                Op::WindowCe { logits, targets, probs, categorical } => {
                    let dz = acc(&mut adj, *logits, probs.len());
                    window_ce_logit_grad_acc(probs, targets, *categorical, g[0], dz);
                }
            }
        }
        Ok(Gradients { adj })
    }
}

fn acc(adj: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    adj[v.0].get_or_insert_with(|| vec![0.0; len])
}

#[inline]
fn clamped_ln(p: f64) -> f64 {
    p.max(LOG_CLAMP).ln()
}

#[inline]
fn clamped_ln_one_minus(p: f64) -> f64 {
    if p < 1e-3 {
        // Truncation error below p⁶/6, under one ulp of the result.
        -p * (1.0 + p * (0.5 + p * (1.0 / 3.0 + p * (0.25 + p * 0.2))))
    } else if 1.0 - p < LOG_CLAMP {
        LOG_CLAMP.ln()
    } else {
        (-p).ln_1p()
    }
}

/// Value of the windowed cross-entropy given softmax probabilities.
pub fn window_ce_value(probs: &[f64], targets: &[usize], categorical: bool) -> f64 {
    if targets.is_empty() {
        return 0.0;
    }
    let mut loss = 0.0;
    if categorical {
        for &t in targets {
            loss -= clamped_ln(probs[t]);
        }
        return loss;
    }
    let s1: f64 = probs.iter().map(|&p| clamped_ln_one_minus(p)).sum();
    for &t in targets {
        loss += -clamped_ln(probs[t]) - s1 + clamped_ln_one_minus(probs[t]);
    }
    loss
}

/// `dz += seed · ∂loss/∂z` for the windowed cross-entropy of `softmax(z)`.
pub(crate) fn window_ce_logit_grad_acc(probs: &[f64], targets: &[usize], categorical: bool, seed: f64, dz: &mut [f64]) {
    let dy = window_ce_grad_probs(probs, targets, categorical);
    // Through softmax: dz = y ⊙ (dy - <dy, y>).
    let inner = dot(&dy, probs);
    for ((d, y), gy) in dz.iter_mut().zip(probs).zip(&dy) {
        *d += seed * y * (gy - inner);
    }
}

fn window_ce_grad_probs(probs: &[f64], targets: &[usize], categorical: bool) -> Vec<f64> {
    let c = targets.len() as f64;
    let mut dy = vec![0.0; probs.len()];
    if !categorical {
        for (d, &p) in dy.iter_mut().zip(probs) {
            if 1.0 - p >= LOG_CLAMP {
                *d = c / (1.0 - p);
            }
        }
    }
    for &t in targets {
        let p = probs[t];
        if p >= LOG_CLAMP {
            dy[t] -= 1.0 / p;
        }
        if !categorical && 1.0 - p >= LOG_CLAMP {
            dy[t] -= 1.0 / (1.0 - p);
        }
    }
    dy
}
