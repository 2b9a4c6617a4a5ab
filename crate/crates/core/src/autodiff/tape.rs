use super::tensor::{ParamId, ParameterSet};
use crate::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    Lookup {
        p: ParamId,
        row: usize,
    },
    WeightedRows {
        p: ParamId,
        rows: Vec<usize>,
        weights: Vec<f64>,
    },
    Linear {
        w: ParamId,
        x: Var,
        b: Option<ParamId>,
    },
    MatVec {
        m: Var,
        x: Var,
    },
    MatTVec {
        m: Var,
        x: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    Stack(Vec<Var>),
    Sum(Var),
    Dot(Var, Var),
    Softmax(Var),
    SoftmaxXent {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
    Cosine {
        a: Var,
        b: Var,
        na: f64,
        nb: f64,
    },
    Lstm {
        x: Var,
        h: Var,
        c: Var,
        w: ParamId,
        b: ParamId,
        /// Activated gates i, f, g, o followed by tanh(c').
        cache: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    rows: usize,
    cols: usize,
    op: Op,
}

/// Gradients of one backward pass: per parameter (`None` when the parameter
/// was not reached) and per recorded node.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub(crate) params: Vec<Option<Vec<f64>>>,
    vars: Vec<Vec<f64>>,
}

impl Gradients {
    /// Gradient for `p`, or zeros of the parameter's size if unreached.
    pub fn param(&self, params: &ParameterSet, p: ParamId) -> Vec<f64> {
        self.params[p.index()]
            .clone()
            .unwrap_or_else(|| vec![0.0; params.value(p).len()])
    }

    pub fn reached(&self, p: ParamId) -> bool {
        self.params[p.index()].is_some()
    }

    /// Gradient with respect to a recorded node (zeros when unreached).
    pub fn wrt(&self, v: Var, len: usize) -> Vec<f64> {
        let g = &self.vars[v.0];
        if g.is_empty() {
            vec![0.0; len]
        } else {
            g.clone()
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax (the maximum is subtracted first).
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `ln(sum(exp(z)))`, stable.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Records a forward computation over a borrowed [`ParameterSet`] and
/// replays it in reverse to produce gradients.
pub struct Tape<'p> {
    params: &'p ParameterSet,
    nodes: Vec<Node>,
}

fn shape_err(what: &str, detail: String) -> Error {
    Error::Shape(format!("{what}: {detail}"))
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParameterSet) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p ParameterSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, rows: usize, cols: usize, op: Op) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn vec_push(&mut self, value: Vec<f64>, op: Op) -> Var {
        let n = value.len();
        self.push(value, n, 1, op)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        (self.nodes[v.0].rows, self.nodes[v.0].cols)
    }

    pub fn input(&mut self, value: Vec<f64>) -> Var {
        self.vec_push(value, Op::Input)
    }

    pub fn input_matrix(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> Result<Var> {
        if value.len() != rows * cols {
            return Err(shape_err("input_matrix", format!("{rows}x{cols} vs {}", value.len())));
        }
        Ok(self.push(value, rows, cols, Op::Input))
    }

    /// The whole parameter as a node (matrix parameters keep their shape).
    pub fn param(&mut self, p: ParamId) -> Var {
        let t = self.params.value(p);
        let (r, c) = t.dims2();
        self.push(t.data().to_vec(), r, c, Op::Param(p))
    }

    /// Row `row` of a matrix parameter.
    pub fn lookup(&mut self, p: ParamId, row: usize) -> Result<Var> {
        let t = self.params.value(p);
        let (r, _) = t.dims2();
        if row >= r {
            return Err(Error::Index(format!(
                "row {row} out of range for {} with {r} rows",
                self.params.name(p)
            )));
        }
        Ok(self.vec_push(t.row(row).to_vec(), Op::Lookup { p, row }))
    }

    /// `sum_k weights[k] * P[rows[k]]`; zeros for an empty list.
    pub fn weighted_rows(&mut self, p: ParamId, rows: &[usize], weights: &[f64]) -> Result<Var> {
        if rows.len() != weights.len() {
            return Err(shape_err("weighted_rows", format!("{} rows, {} weights", rows.len(), weights.len())));
        }
        let t = self.params.value(p);
        let (r, c) = t.dims2();
        let mut out = vec![0.0; c];
        for (&i, &w) in rows.iter().zip(weights) {
            if i >= r {
                return Err(Error::Index(format!("row {i} out of range for {}", self.params.name(p))));
            }
            for (o, v) in out.iter_mut().zip(t.row(i)) {
                *o += w * v;
            }
        }
        Ok(self.vec_push(
            out,
            Op::WeightedRows {
                p,
                rows: rows.to_vec(),
                weights: weights.to_vec(),
            },
        ))
    }

    /// `W x + b` for a parameter matrix `W` (out x in) and optional bias.
    pub fn linear(&mut self, w: ParamId, x: Var, b: Option<ParamId>) -> Result<Var> {
        let wt = self.params.value(w);
        let (out, inp) = wt.dims2();
        let xv = &self.nodes[x.0].value;
        if xv.len() != inp {
            return Err(shape_err(
                "linear",
                format!("{} is {out}x{inp}, input has {}", self.params.name(w), xv.len()),
            ));
        }
        let mut y: Vec<f64> = match b {
            Some(b) => {
                let bv = self.params.value(b).data();
                if bv.len() != out {
                    return Err(shape_err("linear", format!("bias has {}, expected {out}", bv.len())));
                }
                bv.to_vec()
            }
            None => vec![0.0; out],
        };
        let wd = wt.data();
        for (r, yr) in y.iter_mut().enumerate() {
            let row = &wd[r * inp..(r + 1) * inp];
            *yr += row.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>();
        }
        Ok(self.vec_push(y, Op::Linear { w, x, b }))
    }

    /// `M x` for a matrix node `M`.
    pub fn matvec(&mut self, m: Var, x: Var) -> Result<Var> {
        let (r, c) = self.dims(m);
        let xv = &self.nodes[x.0].value;
        if xv.len() != c {
            return Err(shape_err("matvec", format!("{r}x{c} times {}", xv.len())));
        }
        let md = &self.nodes[m.0].value;
        let y = (0..r)
            .map(|i| md[i * c..(i + 1) * c].iter().zip(xv).map(|(a, b)| a * b).sum())
            .collect();
        Ok(self.vec_push(y, Op::MatVec { m, x }))
    }

    /// `M^T x` for a matrix node `M`.
    pub fn mat_t_vec(&mut self, m: Var, x: Var) -> Result<Var> {
        let (r, c) = self.dims(m);
        let xv = &self.nodes[x.0].value;
        if xv.len() != r {
            return Err(shape_err("mat_t_vec", format!("({r}x{c})^T times {}", xv.len())));
        }
        let md = &self.nodes[m.0].value;
        let mut y = vec![0.0; c];
        for i in 0..r {
            for (yj, mij) in y.iter_mut().zip(&md[i * c..(i + 1) * c]) {
                *yj += mij * xv[i];
            }
        }
        Ok(self.vec_push(y, Op::MatTVec { m, x }))
    }

    fn same_len(&self, what: &str, a: Var, b: Var) -> Result<()> {
        let (la, lb) = (self.nodes[a.0].value.len(), self.nodes[b.0].value.len());
        if la != lb {
            return Err(shape_err(what, format!("{la} vs {lb}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, what: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_len(what, a, b)?;
        let y = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| f(*x, *y))
            .collect();
        Ok(self.vec_push(y, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let y = self.nodes[a.0].value.iter().map(|v| f(*v)).collect();
        self.vec_push(y, op)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.map(a, |v| k * v, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.map(a, |v| v + k, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |v| v.max(0.0), Op::Relu(a))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let y = parts
            .iter()
            .flat_map(|p| self.nodes[p.0].value.iter().copied())
            .collect();
        self.vec_push(y, Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if start + len > xv.len() {
            return Err(shape_err("slice", format!("{start}..{} of {}", start + len, xv.len())));
        }
        let y = xv[start..start + len].to_vec();
        Ok(self.vec_push(y, Op::Slice { x, start }))
    }

    /// Stacks equal-length vectors as the rows of a matrix node.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let Some(first) = rows.first() else {
            return Err(shape_err("stack", "no rows".into()));
        };
        let c = self.nodes[first.0].value.len();
        let mut y = Vec::with_capacity(c * rows.len());
        for r in rows {
            let v = &self.nodes[r.0].value;
            if v.len() != c {
                return Err(shape_err("stack", format!("row of {} vs {c}", v.len())));
            }
            y.extend_from_slice(v);
        }
        Ok(self.push(y, rows.len(), c, Op::Stack(rows.to_vec())))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        self.vec_push(vec![s], Op::Sum(a))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len("dot", a, b)?;
        let s = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .sum();
        Ok(self.vec_push(vec![s], Op::Dot(a, b)))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let y = softmax(&self.nodes[a.0].value);
        self.vec_push(y, Op::Softmax(a))
    }

    /// `-ln softmax(logits)[target]` as a scalar node.
    pub fn softmax_xent(&mut self, logits: Var, target: usize) -> Result<Var> {
        let z = &self.nodes[logits.0].value;
        if target >= z.len() {
            return Err(Error::Index(format!("target {target} out of range for {} classes", z.len())));
        }
        let loss = log_sum_exp(z) - z[target];
        let probs = softmax(z);
        Ok(self.vec_push(
            vec![loss],
            Op::SoftmaxXent {
                logits,
                target,
                probs,
            },
        ))
    }

    /// Cosine similarity; 0 when either vector is zero.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len("cosine", a, b)?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let na = av.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = bv.iter().map(|v| v * v).sum::<f64>().sqrt();
        let s = if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            av.iter().zip(bv).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
        };
        Ok(self.vec_push(vec![s], Op::Cosine { a, b, na, nb }))
    }

    /// One LSTM step. `w` is `4K x (dx + K)` and `b` is `4K`, gates in the
    /// order input, forget, cell, output. Returns a `2K` node `[h; c]`.
    pub fn lstm(&mut self, x: Var, h: Var, c: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let k = self.nodes[h.0].value.len();
        let dx = self.nodes[x.0].value.len();
        let wt = self.params.value(w);
        let (rows, cols) = wt.dims2();
        if rows != 4 * k || cols != dx + k || self.nodes[c.0].value.len() != k {
            return Err(shape_err(
                "lstm",
                format!(
                    "{} is {rows}x{cols}, expected {}x{} for input {dx} and hidden {k}",
                    self.params.name(w),
                    4 * k,
                    dx + k
                ),
            ));
        }
        let bv = self.params.value(b).data();
        if bv.len() != 4 * k {
            return Err(shape_err("lstm", format!("bias has {}, expected {}", bv.len(), 4 * k)));
        }
        let wd = wt.data();
        let (xv, hv, cv) = (&self.nodes[x.0].value, &self.nodes[h.0].value, &self.nodes[c.0].value);
        let mut z = bv.to_vec();
        for (r, zr) in z.iter_mut().enumerate() {
            let row = &wd[r * cols..(r + 1) * cols];
            let mut s = 0.0;
            for (a, b) in row[..dx].iter().zip(xv) {
                s += a * b;
            }
            for (a, b) in row[dx..].iter().zip(hv) {
                s += a * b;
            }
            *zr += s;
        }
        let mut cache = vec![0.0; 5 * k];
        let mut out = vec![0.0; 2 * k];
        for j in 0..k {
            let i_g = sigmoid(z[j]);
            let f_g = sigmoid(z[k + j]);
            let g_g = z[2 * k + j].tanh();
            let o_g = sigmoid(z[3 * k + j]);
            let c_new = f_g * cv[j] + i_g * g_g;
            let tc = c_new.tanh();
            cache[j] = i_g;
            cache[k + j] = f_g;
            cache[2 * k + j] = g_g;
            cache[3 * k + j] = o_g;
            cache[4 * k + j] = tc;
            out[j] = o_g * tc;
            out[k + j] = c_new;
        }
        Ok(self.vec_push(out, Op::Lstm { x, h, c, w, b, cache }))
    }

    /// [`Tape::lstm`] split into `(h, c)` nodes.
    pub fn lstm_step(&mut self, x: Var, h: Var, c: Var, w: ParamId, b: ParamId) -> Result<(Var, Var)> {
        let k = self.nodes[h.0].value.len();
        let hc = self.lstm(x, h, c, w, b)?;
        Ok((self.slice(hc, 0, k)?, self.slice(hc, k, k)?))
    }

    /// Reverse pass from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward called before any forward computation".into()));
        }
        if loss.0 >= self.nodes.len() || self.nodes[loss.0].value.len() != 1 {
            return Err(Error::State("backward needs a scalar node recorded on this tape".into()));
        }
        let mut g: Vec<Vec<f64>> = vec![Vec::new(); self.nodes.len()];
        let mut pg: Vec<Option<Vec<f64>>> = vec![None; self.params.len()];
        g[loss.0] = vec![1.0];

        fn acc(g: &mut [Vec<f64>], nodes: &[Node], v: Var, i: usize, d: f64) {
            let buf = &mut g[v.0];
            if buf.is_empty() {
                *buf = vec![0.0; nodes[v.0].value.len()];
            }
            buf[i] += d;
        }
        fn pacc<'a>(pg: &'a mut [Option<Vec<f64>>], params: &ParameterSet, p: ParamId) -> &'a mut Vec<f64> {
            pg[p.index()].get_or_insert_with(|| vec![0.0; params.value(p).len()])
        }

        for n in (0..=loss.0).rev() {
            if g[n].is_empty() {
                continue;
            }
            let gy = std::mem::take(&mut g[n]);
            let node = &self.nodes[n];
            let nodes = &self.nodes;
            match &node.op {
                Op::Input => {}
                Op::Param(p) => {
                    let buf = pacc(&mut pg, self.params, *p);
                    for (a, b) in buf.iter_mut().zip(&gy) {
                        *a += b;
                    }
                }
                Op::Lookup { p, row } => {
                    let c = gy.len();
                    let buf = pacc(&mut pg, self.params, *p);
                    for (a, b) in buf[row * c..(row + 1) * c].iter_mut().zip(&gy) {
                        *a += b;
                    }
                }
                Op::WeightedRows { p, rows, weights } => {
                    let c = gy.len();
                    let buf = pacc(&mut pg, self.params, *p);
                    for (&r, &w) in rows.iter().zip(weights) {
                        for (a, b) in buf[r * c..(r + 1) * c].iter_mut().zip(&gy) {
                            *a += w * b;
                        }
                    }
                }
                Op::Linear { w, x, b } => {
                    let wt = self.params.value(*w);
                    let (out, inp) = wt.dims2();
                    let wd = wt.data();
                    let xv = &nodes[x.0].value;
                    {
                        let gw = pacc(&mut pg, self.params, *w);
                        for r in 0..out {
                            let gr = gy[r];
                            if gr != 0.0 {
                                for (a, xv) in gw[r * inp..(r + 1) * inp].iter_mut().zip(xv) {
                                    *a += gr * xv;
                                }
                            }
                        }
                    }
                    if let Some(b) = b {
                        let gb = pacc(&mut pg, self.params, *b);
                        for (a, v) in gb.iter_mut().zip(&gy) {
                            *a += v;
                        }
                    }
                    let mut gx = vec![0.0; inp];
                    for r in 0..out {
                        let gr = gy[r];
                        if gr != 0.0 {
                            for (a, wv) in gx.iter_mut().zip(&wd[r * inp..(r + 1) * inp]) {
                                *a += gr * wv;
                            }
                        }
                    }
                    add_into(&mut g, nodes, *x, &gx);
                }
                Op::MatVec { m, x } => {
                    let (r, c) = (nodes[m.0].rows, nodes[m.0].cols);
                    let (md, xv) = (&nodes[m.0].value, &nodes[x.0].value);
                    let mut gm = vec![0.0; r * c];
                    let mut gx = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            gm[i * c + j] = gy[i] * xv[j];
                            gx[j] += md[i * c + j] * gy[i];
                        }
                    }
                    add_into(&mut g, nodes, *m, &gm);
                    add_into(&mut g, nodes, *x, &gx);
                }
                Op::MatTVec { m, x } => {
                    let (r, c) = (nodes[m.0].rows, nodes[m.0].cols);
                    let (md, xv) = (&nodes[m.0].value, &nodes[x.0].value);
                    let mut gm = vec![0.0; r * c];
                    let mut gx = vec![0.0; r];
                    for i in 0..r {
                        for j in 0..c {
                            gm[i * c + j] = xv[i] * gy[j];
                            gx[i] += md[i * c + j] * gy[j];
                        }
                    }
                    add_into(&mut g, nodes, *m, &gm);
                    add_into(&mut g, nodes, *x, &gx);
                }
                Op::Add(a, b) => {
                    add_into(&mut g, nodes, *a, &gy);
                    add_into(&mut g, nodes, *b, &gy);
                }
                Op::Sub(a, b) => {
                    add_into(&mut g, nodes, *a, &gy);
                    let neg: Vec<f64> = gy.iter().map(|v| -v).collect();
                    add_into(&mut g, nodes, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let ga: Vec<f64> = gy.iter().zip(&nodes[b.0].value).map(|(g, v)| g * v).collect();
                    let gb: Vec<f64> = gy.iter().zip(&nodes[a.0].value).map(|(g, v)| g * v).collect();
                    add_into(&mut g, nodes, *a, &ga);
                    add_into(&mut g, nodes, *b, &gb);
                }
                Op::Scale(a, k) => {
                    let ga: Vec<f64> = gy.iter().map(|v| k * v).collect();
                    add_into(&mut g, nodes, *a, &ga);
                }
                Op::AddScalar(a) => add_into(&mut g, nodes, *a, &gy),
                Op::Tanh(a) => {
                    let ga: Vec<f64> = gy.iter().zip(&node.value).map(|(g, y)| g * (1.0 - y * y)).collect();
                    add_into(&mut g, nodes, *a, &ga);
                }
                Op::Sigmoid(a) => {
                    let ga: Vec<f64> = gy.iter().zip(&node.value).map(|(g, y)| g * y * (1.0 - y)).collect();
                    add_into(&mut g, nodes, *a, &ga);
                }
                Op::Relu(a) => {
                    let ga: Vec<f64> = gy
                        .iter()
                        .zip(&nodes[a.0].value)
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect();
                    add_into(&mut g, nodes, *a, &ga);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let l = nodes[p.0].value.len();
                        add_into(&mut g, nodes, *p, &gy[off..off + l]);
                        off += l;
                    }
                }
                Op::Slice { x, start } => {
                    for (i, v) in gy.iter().enumerate() {
                        acc(&mut g, nodes, *x, start + i, *v);
                    }
                }
                Op::Stack(rows) => {
                    let c = node.cols;
                    for (i, r) in rows.iter().enumerate() {
                        add_into(&mut g, nodes, *r, &gy[i * c..(i + 1) * c]);
                    }
                }
                Op::Sum(a) => {
                    let ga = vec![gy[0]; nodes[a.0].value.len()];
                    add_into(&mut g, nodes, *a, &ga);
                }
                Op::Dot(a, b) => {
                    let ga: Vec<f64> = nodes[b.0].value.iter().map(|v| gy[0] * v).collect();
                    let gb: Vec<f64> = nodes[a.0].value.iter().map(|v| gy[0] * v).collect();
                    add_into(&mut g, nodes, *a, &ga);
                    add_into(&mut g, nodes, *b, &gb);
                }
                Op::Softmax(a) => {
                    let s = &node.value;
                    let dot: f64 = gy.iter().zip(s).map(|(g, s)| g * s).sum();
                    let ga: Vec<f64> = gy.iter().zip(s).map(|(g, s)| s * (g - dot)).collect();
                    add_into(&mut g, nodes, *a, &ga);
                }
                Op::SoftmaxXent { logits, target, probs } => {
                    let mut ga: Vec<f64> = probs.iter().map(|p| gy[0] * p).collect();
                    ga[*target] -= gy[0];
                    add_into(&mut g, nodes, *logits, &ga);
                }
                Op::Cosine { a, b, na, nb } => {
                    if *na > 0.0 && *nb > 0.0 {
                        let s = node.value[0];
                        let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                        let ga: Vec<f64> = av
                            .iter()
                            .zip(bv)
                            .map(|(x, y)| gy[0] * (y / (na * nb) - s * x / (na * na)))
                            .collect();
                        let gb: Vec<f64> = av
                            .iter()
                            .zip(bv)
                            .map(|(x, y)| gy[0] * (x / (na * nb) - s * y / (nb * nb)))
                            .collect();
                        add_into(&mut g, nodes, *a, &ga);
                        add_into(&mut g, nodes, *b, &gb);
                    }
                }
                Op::Lstm { x, h, c, w, b, cache } => {
                    let k = nodes[h.0].value.len();
                    let dx = nodes[x.0].value.len();
                    let cols = dx + k;
                    let cv = &nodes[c.0].value;
                    let mut dz = vec![0.0; 4 * k];
                    let mut dc_prev = vec![0.0; k];
                    for j in 0..k {
                        let (i_g, f_g, g_g, o_g, tc) =
                            (cache[j], cache[k + j], cache[2 * k + j], cache[3 * k + j], cache[4 * k + j]);
                        let dh = gy[j];
                        let dc = gy[k + j] + dh * o_g * (1.0 - tc * tc);
                        dz[j] = dc * g_g * i_g * (1.0 - i_g);
                        dz[k + j] = dc * cv[j] * f_g * (1.0 - f_g);
                        dz[2 * k + j] = dc * i_g * (1.0 - g_g * g_g);
                        dz[3 * k + j] = dh * tc * o_g * (1.0 - o_g);
                        dc_prev[j] = dc * f_g;
                    }
                    let wd = self.params.value(*w).data();
                    let (xv, hv) = (&nodes[x.0].value, &nodes[h.0].value);
                    {
                        let gw = pacc(&mut pg, self.params, *w);
                        for (r, &d) in dz.iter().enumerate() {
                            if d == 0.0 {
                                continue;
                            }
                            let row = &mut gw[r * cols..(r + 1) * cols];
                            for (a, v) in row[..dx].iter_mut().zip(xv) {
                                *a += d * v;
                            }
                            for (a, v) in row[dx..].iter_mut().zip(hv) {
                                *a += d * v;
                            }
                        }
                    }
                    {
                        let gb = pacc(&mut pg, self.params, *b);
                        for (a, d) in gb.iter_mut().zip(&dz) {
                            *a += d;
                        }
                    }
                    let mut gin = vec![0.0; cols];
                    for (r, &d) in dz.iter().enumerate() {
                        if d == 0.0 {
                            continue;
                        }
                        for (a, wv) in gin.iter_mut().zip(&wd[r * cols..(r + 1) * cols]) {
                            *a += d * wv;
                        }
                    }
                    add_into(&mut g, nodes, *x, &gin[..dx]);
                    add_into(&mut g, nodes, *h, &gin[dx..]);
                    add_into(&mut g, nodes, *c, &dc_prev);
                }
            }
            g[n] = gy;
        }
        Ok(Gradients { params: pg, vars: g })
    }
}

fn add_into(g: &mut [Vec<f64>], nodes: &[Node], v: Var, d: &[f64]) {
    let buf = &mut g[v.0];
    if buf.is_empty() {
        *buf = vec![0.0; nodes[v.0].value.len()];
    }
    for (a, b) in buf.iter_mut().zip(d) {
        *a += b;
    }
}
