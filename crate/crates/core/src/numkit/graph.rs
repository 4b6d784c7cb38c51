use crate::error::{Error, Result};

use super::linalg::{self, gemm};
use super::{Grads, ParamStore, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var, f64),
    Tanh(Var),
    SoftmaxRows(Var),
    LogSumExpRows(Var),
    Transpose(Var),
    Reshape(Var),
    SumAll(Var),
    MeanAll(Var),
    SumRows(Var),
    GatherCols(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    Conv1dSame(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    CosDistRows(Var, Var),
    GmmLogpdfRows {
        z: Var,
        means: Var,
        logvars: Var,
        resp: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Tape of primitive operations for one forward pass.
///
/// Values are computed eagerly as ops are recorded. Parameters are borrowed
/// from a [`ParamStore`] rather than copied. [`Graph::detach`] records a
/// value with no gradient path back to its source.
pub struct Graph<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
}

/// Gradients of the leaves of a graph after [`Graph::backward`].
pub struct Backward {
    leaf: Vec<Option<Vec<f64>>>,
}

impl Backward {
    /// Gradient accumulated at a leaf (input or parameter node).
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.leaf.get(v.0).and_then(|g| g.as_deref())
    }
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Graph::new()
    }
}

impl Graph<'static> {
    /// A graph without parameters; leaves are created with [`Graph::input`].
    pub fn new() -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
            param_nodes: Vec::new(),
        }
    }
}

impl<'p> Graph<'p> {
    pub fn with_params(store: &'p ParamStore) -> Self {
        Graph {
            store: Some(store),
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(idx)) => self
                .store
                .expect("parameter node without a store")
                .value(*idx),
            _ => unreachable!("node without value"),
        }
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.value(v).data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_of(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Leaf tensor. With `requires_grad`, its gradient is reported by
    /// [`Backward::wrt`].
    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Input, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.input(t, false)
    }

    /// Leaf bound to parameter `idx` of the borrowed store. Repeated calls
    /// return the same node.
    pub fn param(&mut self, idx: usize) -> Var {
        if let Some(v) = self.param_nodes[idx] {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let needs_grad = store.get(idx).requires_grad;
        self.nodes.push(Node {
            value: None,
            op: Op::Param(idx),
            needs_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[idx] = Some(v);
        v
    }

    /// Copy of `a` with the gradient path severed.
    pub fn detach(&mut self, a: Var) -> Var {
        let t = self.value(a).clone();
        self.push(t, Op::Input, false)
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .map_err(|_| Error::Dimension(format!("{what}: expected a matrix, got {:?}", self.shape(v))))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a)·op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (ar, ac) = self.dims2(a, "matmul lhs")?;
        let (br, bc) = self.dims2(b, "matmul rhs")?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions disagree: {m}x{k} · {k2}x{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), ta, self.data(b), tb, 0.0, &mut out);
        let ng = self.grad_of(&[a, b]);
        Ok(self.push(
            Tensor::matrix(m, n, out)?,
            Op::MatMul { a, b, ta, tb, m, k, n },
            ng,
        ))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.grad_of(&[a, b]);
        self.push(Tensor::new(shape, data).expect("shape preserved"), op, ng)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let data: Vec<f64> = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.grad_of(&[a]);
        self.push(Tensor::new(shape, data).expect("shape preserved"), op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    fn row_broadcast(&mut self, a: Var, row: Var, what: &str, mul: bool) -> Result<Var> {
        let (r, c) = self.dims2(a, what)?;
        if self.value(row).len() != c {
            return Err(Error::Dimension(format!(
                "{what}: row of length {} against {r}x{c}",
                self.value(row).len()
            )));
        }
        let rv = self.data(row);
        let mut out = self.data(a).to_vec();
        for chunk in out.chunks_mut(c.max(1)) {
            for (o, &b) in chunk.iter_mut().zip(rv) {
                if mul {
                    *o *= b;
                } else {
                    *o += b;
                }
            }
        }
        let ng = self.grad_of(&[a, row]);
        let op = if mul { Op::MulRow(a, row) } else { Op::AddRow(a, row) };
        Ok(self.push(Tensor::matrix(r, c, out)?, op, ng))
    }

    /// Adds a length-`c` vector to every row of an `r×c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, "add_row", false)
    }

    /// Multiplies every row of an `r×c` matrix elementwise by a length-`c` vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, "mul_row", true)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.map(a, Op::Scale(a, factor), |x| x * factor)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    /// `ln(x + eps)`; use `eps > 0` where `x` is a density that may underflow.
    pub fn log(&mut self, a: Var, eps: f64) -> Var {
        self.map(a, Op::Log(a, eps), |x| (x + eps).ln())
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "softmax_rows")?;
        let mut out = self.data(a).to_vec();
        if c > 0 {
            for row in out.chunks_mut(c) {
                linalg::softmax_in_place(row);
            }
        }
        let ng = self.grad_of(&[a]);
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::SoftmaxRows(a), ng))
    }

    /// Row-wise log-sum-exp, `r×c → r×1`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "logsumexp_rows")?;
        let out: Vec<f64> = (0..r)
            .map(|i| linalg::log_sum_exp(&self.data(a)[i * c..(i + 1) * c]))
            .collect();
        let ng = self.grad_of(&[a]);
        Ok(self.push(Tensor::matrix(r, 1, out)?, Op::LogSumExpRows(a), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        let ng = self.grad_of(&[a]);
        Ok(self.push(t, Op::Transpose(a), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let ng = self.grad_of(&[a]);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.data(a).iter().sum();
        let ng = self.grad_of(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s: f64 = self.data(a).iter().sum();
        let ng = self.grad_of(&[a]);
        self.push(Tensor::scalar(s / n), Op::MeanAll(a), ng)
    }

    /// Row sums, `r×c → r×1`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "sum_rows")?;
        let out: Vec<f64> = (0..r)
            .map(|i| self.data(a)[i * c..(i + 1) * c].iter().sum())
            .collect();
        let ng = self.grad_of(&[a]);
        Ok(self.push(Tensor::matrix(r, 1, out)?, Op::SumRows(a), ng))
    }

    /// Output column `j` is input column `idx[j]`. Covers permutations and
    /// contiguous slices.
    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(a, "gather_cols")?;
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(Error::Dimension(format!(
                "gather_cols: column {bad} out of range for {c} columns"
            )));
        }
        let src = self.data(a);
        let n = idx.len();
        let mut out = vec![0.0; r * n];
        for i in 0..r {
            for (j, &s) in idx.iter().enumerate() {
                out[i * n + j] = src[i * c + s];
            }
        }
        let ng = self.grad_of(&[a]);
        Ok(self.push(Tensor::matrix(r, n, out)?, Op::GatherCols(a, idx.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_cols(a, &idx)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.dims2(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_cols")?;
            if pr != r {
                return Err(Error::Dimension(format!(
                    "concat_cols: row counts {r} and {pr} differ"
                )));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.data(p);
            for i in 0..r {
                out[i * total + off..i * total + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let ng = self.grad_of(parts);
        Ok(self.push(Tensor::matrix(r, total, out)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Width-3 temporal convolution with one zero-padded step at each end.
    ///
    /// `x` is `T×C`, `w` is `[3, C, D]` (tap-major); tap 0 reads `t−1`,
    /// tap 1 reads `t`, tap 2 reads `t+1`.
    pub fn conv1d_same(&mut self, x: Var, w: Var) -> Result<Var> {
        let (t, c) = self.dims2(x, "conv1d_same input")?;
        let (taps, wc, d) = match self.shape(w) {
            &[a, b, e] => (a, b, e),
            s => {
                return Err(Error::Dimension(format!(
                    "conv1d_same kernel must be [3, C, D], got {s:?}"
                )))
            }
        };
        if taps != 3 {
            return Err(Error::Dimension(format!("conv1d_same kernel width {taps} != 3")));
        }
        if wc != c {
            return Err(Error::Dimension(format!(
                "conv1d_same: input has {c} channels, kernel expects {wc}"
            )));
        }
        let mut out = vec![0.0; t * d];
        conv_forward(t, c, d, self.data(x), self.data(w), &mut out);
        let ng = self.grad_of(&[x, w]);
        Ok(self.push(Tensor::matrix(t, d, out)?, Op::Conv1dSame(x, w), ng))
    }

    /// Per-row normalisation to zero mean and unit variance, then affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims2(x, "layer_norm")?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::Dimension("layer_norm: gain/bias width".into()));
        }
        let src = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let ng = self.grad_of(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::matrix(r, c, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Row-wise cosine distance `1 − cos(aᵢ, bᵢ)`, `r×c → r×1`. Rows where
    /// either side has norm below `1e-8` give 0 with zero gradient.
    pub fn cos_dist_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "cos_dist_rows")?;
        let (r, c) = self.dims2(a, "cos_dist_rows")?;
        let (av, bv) = (self.data(a), self.data(b));
        let out: Vec<f64> = (0..r)
            .map(|i| cosine_distance(&av[i * c..(i + 1) * c], &bv[i * c..(i + 1) * c]))
            .collect();
        let ng = self.grad_of(&[a, b]);
        Ok(self.push(Tensor::matrix(r, 1, out)?, Op::CosDistRows(a, b), ng))
    }

    /// Row-wise log-density of a diagonal Gaussian mixture, `r×c → r×1`.
    ///
    /// `means` and `logvars` are `n_c×c`; `log_weights` are fixed mixing
    /// log-coefficients.
    pub fn gmm_logpdf_rows(
        &mut self,
        z: Var,
        means: Var,
        logvars: Var,
        log_weights: &[f64],
    ) -> Result<Var> {
        let (r, c) = self.dims2(z, "gmm_logpdf_rows")?;
        let nc = log_weights.len();
        if self.shape(means) != [nc, c] || self.shape(logvars) != [nc, c] {
            return Err(Error::Dimension(format!(
                "gmm_logpdf_rows: means {:?} / logvars {:?} vs {nc} components of width {c}",
                self.shape(means),
                self.shape(logvars)
            )));
        }
        let (zv, mv, lv) = (self.data(z), self.data(means), self.data(logvars));
        let mut out = vec![0.0; r];
        let mut resp = vec![0.0; r * nc];
        for i in 0..r {
            let terms = &mut resp[i * nc..(i + 1) * nc];
            let lp = linalg::diag_gmm_log_density(&zv[i * c..(i + 1) * c], mv, lv, log_weights, terms);
            out[i] = lp;
            for t in terms.iter_mut() {
                *t = (*t - lp).exp();
            }
        }
        let ng = self.grad_of(&[z, means, logvars]);
        Ok(self.push(
            Tensor::matrix(r, 1, out)?,
            Op::GmmLogpdfRows {
                z,
                means,
                logvars,
                resp,
            },
            ng,
        ))
    }

    /// Reverse pass from a scalar `loss` seeded with `seed`.
    pub fn backward_seeded(&self, loss: Var, seed: f64) -> Result<Backward> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut leaf: Vec<Option<Vec<f64>>> = vec![None; n];
        if !self.nodes[loss.0].needs_grad {
            return Ok(Backward { leaf });
        }
        grads[loss.0] = Some(vec![seed]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input | Op::Param(_) => {
                    leaf[i] = Some(g);
                }
                op => self.propagate(Var(i), op, &g, &mut grads),
            }
        }
        Ok(Backward { leaf })
    }

    pub fn backward(&self, loss: Var) -> Result<Backward> {
        self.backward_seeded(loss, 1.0)
    }

    /// Reverse pass that adds `scale·∂loss/∂θ` into `grads` for every
    /// trainable parameter reached.
    pub fn backward_into(&self, loss: Var, scale: f64, grads: &mut Grads) -> Result<()> {
        let back = self.backward_seeded(loss, scale)?;
        for (i, g) in back.leaf.iter().enumerate() {
            if let (Some(g), Op::Param(idx)) = (g, &self.nodes[i].op) {
                for (dst, src) in grads.get_mut(*idx).iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, out: Var, op: &Op, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let len = self.value(v).len();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(buf);
        };
        match op {
            Op::Input | Op::Param(_) => unreachable!(),
            &Op::MatMul { a, b, ta, tb, m, k, n } => {
                let av = self.data(a);
                let bv = self.data(b);
                // d op(a) = g · op(b)ᵀ ; d op(b) = op(a)ᵀ · g
                acc(a, &mut |da| {
                    if ta {
                        // a stored k×m: da = op(b) · gᵀ
                        gemm(k, n, m, bv, tb, g, true, 1.0, da);
                    } else {
                        gemm(m, n, k, g, false, bv, !tb, 1.0, da);
                    }
                });
                acc(b, &mut |db| {
                    if tb {
                        // b stored n×k: db = gᵀ · op(a)
                        gemm(n, m, k, g, true, av, ta, 1.0, db);
                    } else {
                        gemm(k, m, n, av, !ta, g, false, 1.0, db);
                    }
                });
            }
            &Op::Add(a, b) => {
                acc(a, &mut |d| add_into(d, g));
                acc(b, &mut |d| add_into(d, g));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |d| add_into(d, g));
                acc(b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.data(a), self.data(b));
                acc(a, &mut |d| {
                    for ((x, gi), bi) in d.iter_mut().zip(g).zip(bv) {
                        *x += gi * bi;
                    }
                });
                acc(b, &mut |d| {
                    for ((x, gi), ai) in d.iter_mut().zip(g).zip(av) {
                        *x += gi * ai;
                    }
                });
            }
            &Op::AddRow(a, row) => {
                let c = self.value(row).len();
                acc(a, &mut |d| add_into(d, g));
                acc(row, &mut |d| {
                    for chunk in g.chunks(c.max(1)) {
                        add_into(d, chunk);
                    }
                });
            }
            &Op::MulRow(a, row) => {
                let c = self.value(row).len();
                let (av, rv) = (self.data(a), self.data(row));
                acc(a, &mut |d| {
                    for (dchunk, gchunk) in d.chunks_mut(c.max(1)).zip(g.chunks(c.max(1))) {
                        for ((x, gi), ri) in dchunk.iter_mut().zip(gchunk).zip(rv) {
                            *x += gi * ri;
                        }
                    }
                });
                acc(row, &mut |d| {
                    for (achunk, gchunk) in av.chunks(c.max(1)).zip(g.chunks(c.max(1))) {
                        for ((x, gi), ai) in d.iter_mut().zip(gchunk).zip(achunk) {
                            *x += gi * ai;
                        }
                    }
                });
            }
            &Op::Scale(a, f) => acc(a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += f * y)),
            &Op::Exp(a) => {
                let y = self.data(out);
                acc(a, &mut |d| {
                    for ((x, gi), yi) in d.iter_mut().zip(g).zip(y) {
                        *x += gi * yi;
                    }
                });
            }
            &Op::Log(a, eps) => {
                let av = self.data(a);
                acc(a, &mut |d| {
                    for ((x, gi), ai) in d.iter_mut().zip(g).zip(av) {
                        *x += gi / (ai + eps);
                    }
                });
            }
            &Op::Tanh(a) => {
                let y = self.data(out);
                acc(a, &mut |d| {
                    for ((x, gi), yi) in d.iter_mut().zip(g).zip(y) {
                        *x += gi * (1.0 - yi * yi);
                    }
                });
            }
            &Op::SoftmaxRows(a) => {
                let y = self.data(out);
                let c = self.value(out).cols();
                acc(a, &mut |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((x, gi), yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *x += yi * (gi - dot);
                        }
                    }
                });
            }
            &Op::LogSumExpRows(a) => {
                let av = self.data(a);
                let y = self.data(out);
                let c = self.value(a).cols();
                acc(a, &mut |d| {
                    for (i, (drow, arow)) in d.chunks_mut(c).zip(av.chunks(c)).enumerate() {
                        for (x, ai) in drow.iter_mut().zip(arow) {
                            *x += g[i] * (ai - y[i]).exp();
                        }
                    }
                });
            }
            &Op::Transpose(a) => {
                let (r, c) = self.value(out).dims2().expect("matrix");
                // out is r×c, a is c×r
                acc(a, &mut |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[j * r + i] += g[i * c + j];
                        }
                    }
                });
            }
            &Op::Reshape(a) => acc(a, &mut |d| add_into(d, g)),
            &Op::SumAll(a) => acc(a, &mut |d| d.iter_mut().for_each(|x| *x += g[0])),
            &Op::MeanAll(a) => {
                let n = self.value(a).len() as f64;
                acc(a, &mut |d| d.iter_mut().for_each(|x| *x += g[0] / n));
            }
            &Op::SumRows(a) => {
                let c = self.value(a).cols();
                acc(a, &mut |d| {
                    for (i, drow) in d.chunks_mut(c).enumerate() {
                        drow.iter_mut().for_each(|x| *x += g[i]);
                    }
                });
            }
            Op::GatherCols(a, idx) => {
                let c = self.value(*a).cols();
                let n = idx.len();
                acc(*a, &mut |d| {
                    for (i, grow) in g.chunks(n.max(1)).enumerate() {
                        for (j, &s) in idx.iter().enumerate() {
                            d[i * c + s] += grow[j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = self.value(out).cols();
                let r = self.value(out).rows();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    acc(p, &mut |d| {
                        for i in 0..r {
                            add_into(&mut d[i * w..(i + 1) * w], &g[i * total + off..i * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            &Op::Conv1dSame(x, w) => {
                let (t, c) = self.value(x).dims2().expect("matrix");
                let d = self.shape(w)[2];
                let (xv, wv) = (self.data(x), self.data(w));
                acc(x, &mut |dx| conv_backward_input(t, c, d, g, wv, dx));
                acc(w, &mut |dw| conv_backward_kernel(t, c, d, xv, g, dw));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = self.value(*x).cols();
                let gv = self.data(*gamma);
                acc(*x, &mut |dx| {
                    for (i, ((dxr, gr), hr)) in dx
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(xhat.chunks(c))
                        .enumerate()
                    {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let dh = gr[j] * gv[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let dh = gr[j] * gv[j];
                            dxr[j] += rstd[i] * (dh - m1 - hr[j] * m2);
                        }
                    }
                });
                acc(*gamma, &mut |dg| {
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((x, gi), hi) in dg.iter_mut().zip(gr).zip(hr) {
                            *x += gi * hi;
                        }
                    }
                });
                acc(*beta, &mut |db| {
                    for gr in g.chunks(c) {
                        add_into(db, gr);
                    }
                });
            }
            &Op::CosDistRows(a, b) => {
                let c = self.value(a).cols();
                let (av, bv) = (self.data(a), self.data(b));
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for i in 0..g.len() {
                    let (ar, br) = (&av[i * c..(i + 1) * c], &bv[i * c..(i + 1) * c]);
                    let na = ar.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let nb = br.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if na < COS_EPS || nb < COS_EPS {
                        continue;
                    }
                    let dot: f64 = ar.iter().zip(br).map(|(x, y)| x * y).sum();
                    let cos = dot / (na * nb);
                    for j in 0..c {
                        // d(1 − cos)/da = −(b/(|a||b|) − cos·a/|a|²)
                        da[i * c + j] = -g[i] * (br[j] / (na * nb) - cos * ar[j] / (na * na));
                        db[i * c + j] = -g[i] * (ar[j] / (na * nb) - cos * br[j] / (nb * nb));
                    }
                }
                acc(a, &mut |d| add_into(d, &da));
                acc(b, &mut |d| add_into(d, &db));
            }
            Op::GmmLogpdfRows {
                z,
                means,
                logvars,
                resp,
            } => {
                let c = self.value(*z).cols();
                let nc = self.value(*means).rows();
                let (zv, mv, lv) = (self.data(*z), self.data(*means), self.data(*logvars));
                let inv_var: Vec<f64> = lv.iter().map(|l| (-l).exp()).collect();
                acc(*z, &mut |dz| {
                    for i in 0..g.len() {
                        for m in 0..nc {
                            let gr = g[i] * resp[i * nc + m];
                            for j in 0..c {
                                dz[i * c + j] -= gr * (zv[i * c + j] - mv[m * c + j]) * inv_var[m * c + j];
                            }
                        }
                    }
                });
                acc(*means, &mut |dm| {
                    for i in 0..g.len() {
                        for m in 0..nc {
                            let gr = g[i] * resp[i * nc + m];
                            for j in 0..c {
                                dm[m * c + j] += gr * (zv[i * c + j] - mv[m * c + j]) * inv_var[m * c + j];
                            }
                        }
                    }
                });
                acc(*logvars, &mut |dl| {
                    for i in 0..g.len() {
                        for m in 0..nc {
                            let gr = g[i] * resp[i * nc + m];
                            for j in 0..c {
                                let diff = zv[i * c + j] - mv[m * c + j];
                                dl[m * c + j] += gr * 0.5 * (diff * diff * inv_var[m * c + j] - 1.0);
                            }
                        }
                    }
                });
            }
        }
    }
}

const COS_EPS: f64 = 1e-8;

/// `1 − cos(a, b)`, or 0 when either vector has norm below `1e-8`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < COS_EPS || nb < COS_EPS {
        return 0.0;
    }
    // ½‖a/|a| − b/|b|‖² equals 1 − cos and is exactly 0 for identical rows
    let sq: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x / na - y / nb;
            d * d
        })
        .sum();
    0.5 * sq
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn conv_forward(t: usize, c: usize, d: usize, x: &[f64], w: &[f64], out: &mut [f64]) {
    if t == 0 {
        return;
    }
    let tap = |k: usize| &w[k * c * d..(k + 1) * c * d];
    // centre tap
    gemm(t, c, d, x, false, tap(1), false, 1.0, out);
    if t > 1 {
        // y[t] += x[t−1]·W0 for t ≥ 1
        gemm(t - 1, c, d, &x[..(t - 1) * c], false, tap(0), false, 1.0, &mut out[d..]);
        // y[t] += x[t+1]·W2 for t ≤ T−2
        gemm(t - 1, c, d, &x[c..], false, tap(2), false, 1.0, &mut out[..(t - 1) * d]);
    }
}

fn conv_backward_input(t: usize, c: usize, d: usize, g: &[f64], w: &[f64], dx: &mut [f64]) {
    if t == 0 {
        return;
    }
    let tap = |k: usize| &w[k * c * d..(k + 1) * c * d];
    gemm(t, d, c, g, false, tap(1), true, 1.0, dx);
    if t > 1 {
        gemm(t - 1, d, c, &g[d..], false, tap(0), true, 1.0, &mut dx[..(t - 1) * c]);
        gemm(t - 1, d, c, &g[..(t - 1) * d], false, tap(2), true, 1.0, &mut dx[c..]);
    }
}

fn conv_backward_kernel(t: usize, c: usize, d: usize, x: &[f64], g: &[f64], dw: &mut [f64]) {
    if t == 0 {
        return;
    }
    let (w0, rest) = dw.split_at_mut(c * d);
    let (w1, w2) = rest.split_at_mut(c * d);
    gemm(c, t, d, x, true, g, false, 1.0, w1);
    if t > 1 {
        gemm(c, t - 1, d, &x[..(t - 1) * c], true, &g[d..], false, 1.0, w0);
        gemm(c, t - 1, d, &x[c..], true, &g[..(t - 1) * d], false, 1.0, w2);
    }
}
