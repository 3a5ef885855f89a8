//! Minimal reverse-mode differentiation over dense 64-bit real arrays.
//!
//! A [`Tape`] records every primitive application in topological order.
//! Tensors are at most rank 2 and are addressed through lightweight [`Var`]
//! handles. [`Tape::backward`] replays the record in exact reverse order and
//! returns gradients for every trainable leaf, so two identical
//! forward+backward passes produce bit-identical results.
//!
//! Every primitive validates shapes and rejects non-finite outputs instead
//! of propagating them.

use crate::error::{Error, Result};
use statrs::function::erf::erf;
use statrs::function::gamma::{digamma, ln_gamma};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.3989422804014327;

/// Standard normal cdf, used by the exact-Phi GELU.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / SQRT_2))
}

/// Numerically stable softplus.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// (r,c) + (1,c): the row vector is broadcast over rows.
    AddRow(Var, Var),
    /// (r,c) * (1,c) elementwise with row broadcast.
    MulRow(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Matmul(Var, Var),
    /// a * b^T without materializing the transpose.
    MatmulTb(Var, Var),
    Exp(Var),
    Ln(Var),
    Log1p(Var),
    Softplus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    LnGamma(Var),
    /// max(x, 0) with subgradient 0 on the clamped region.
    ClampMin0(Var),
    SoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    },
    ConcatRows(Var, Var),
    SliceRows {
        x: Var,
        start: usize,
        len: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<Var>),
    SumAll(Var),
    MeanAll(Var),
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward computation; owns all intermediate values.
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradient accumulators produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; zeros if `v` did not participate.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Vec<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; tape.nodes[v.0].value.len()],
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    /// Scalar value of a (1,1) tensor.
    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    fn push(
        &mut self,
        rows: usize,
        cols: usize,
        value: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var> {
        debug_assert_eq!(value.len(), rows * cols);
        if value.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite value produced by {:?}",
                op_name(&op)
            )));
        }
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A non-trainable leaf (input data).
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "constant: {} values for {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        self.push(rows, cols, data, Op::Leaf, false)
    }

    /// A trainable leaf; gradients are reported for it.
    pub fn param(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "param: {} values for {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        self.push(rows, cols, data, Op::Leaf, true)
    }

    pub fn scalar_const(&mut self, x: f64) -> Result<Var> {
        self.constant(1, 1, vec![x])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn binary_elementwise(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
        what: &str,
    ) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let (r, c) = self.shape(a);
        let value: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| f(*x, *y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(r, c, value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise(a, b, |x, y| x / y, Op::Div(a, b), "div")
    }

    /// (r,c) + (1,c) row broadcast.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let (br, bc) = self.shape(b);
        if br != 1 || bc != c {
            return Err(Error::Shape(format!("add_row: ({r},{c}) + ({br},{bc})")));
        }
        let mut value = self.nodes[a.0].value.clone();
        for i in 0..r {
            for j in 0..c {
                value[i * c + j] += self.nodes[b.0].value[j];
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(r, c, value, Op::AddRow(a, b), rg)
    }

    /// (r,c) * (1,c) elementwise row broadcast.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let (br, bc) = self.shape(b);
        if br != 1 || bc != c {
            return Err(Error::Shape(format!("mul_row: ({r},{c}) * ({br},{bc})")));
        }
        let mut value = self.nodes[a.0].value.clone();
        for i in 0..r {
            for j in 0..c {
                value[i * c + j] *= self.nodes[b.0].value[j];
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(r, c, value, Op::MulRow(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let (r, c) = self.shape(a);
        let value: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x * k).collect();
        let rg = self.rg(a);
        self.push(r, c, value, Op::Scale(a, k), rg)
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Result<Var> {
        let (r, c) = self.shape(a);
        let value: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x + k).collect();
        let rg = self.rg(a);
        self.push(r, c, value, Op::AddConst(a), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(Error::Shape(format!("matmul: ({ar},{ac}) x ({br},{bc})")));
        }
        let mut value = vec![0.0; ar * bc];
        {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            for i in 0..ar {
                for k in 0..ac {
                    let aik = av[i * ac + k];
                    if aik == 0.0 {
                        continue;
                    }
                    for j in 0..bc {
                        value[i * bc + j] += aik * bv[k * bc + j];
                    }
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(ar, bc, value, Op::Matmul(a, b), rg)
    }

    /// a (r,k) times b^T where b is (c,k); result (r,c).
    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ak) = self.shape(a);
        let (br, bk) = self.shape(b);
        if ak != bk {
            return Err(Error::Shape(format!(
                "matmul_tb: ({ar},{ak}) x ({br},{bk})^T"
            )));
        }
        let mut value = vec![0.0; ar * br];
        {
            let av = &self.nodes[a.0].value;
            let bv = &self.nodes[b.0].value;
            for i in 0..ar {
                for j in 0..br {
                    let mut s = 0.0;
                    for k in 0..ak {
                        s += av[i * ak + k] * bv[j * bk + k];
                    }
                    value[i * br + j] = s;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(ar, br, value, Op::MatmulTb(a, b), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let (r, c) = self.shape(a);
        let value: Vec<f64> = self.nodes[a.0].value.iter().map(|x| f(*x)).collect();
        let rg = self.rg(a);
        self.push(r, c, value, op, rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn log1p(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::ln_1p, Op::Log1p(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    /// Exact-Phi GELU: x * Phi(x) with Phi the standard normal cdf.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x * norm_cdf(x), Op::Gelu(a))
    }

    pub fn ln_gamma(&mut self, a: Var) -> Result<Var> {
        self.unary(a, ln_gamma, Op::LnGamma(a))
    }

    pub fn clamp_min0(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(0.0), Op::ClampMin0(a))
    }

    /// Row-wise stable softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        let mut value = vec![0.0; r * c];
        {
            let av = &self.nodes[a.0].value;
            for i in 0..r {
                let row = &av[i * c..(i + 1) * c];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..c {
                    let e = (row[j] - m).exp();
                    value[i * c + j] = e;
                    z += e;
                }
                for j in 0..c {
                    value[i * c + j] /= z;
                }
            }
        }
        let rg = self.rg(a);
        self.push(r, c, value, Op::SoftmaxRows(a), rg)
    }

    /// Row-wise layer normalization with learnable gain/bias (1,c) vectors.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gain) != (1, c) || self.shape(bias) != (1, c) {
            return Err(Error::Shape("layer_norm_rows: gain/bias must be (1,c)".into()));
        }
        let mut value = vec![0.0; r * c];
        {
            let xv = &self.nodes[x.0].value;
            let gv = &self.nodes[gain.0].value;
            let bv = &self.nodes[bias.0].value;
            for i in 0..r {
                let row = &xv[i * c..(i + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..c {
                    value[i * c + j] = gv[j] * (row[j] - mean) * inv + bv[j];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(r, c, value, Op::LayerNormRows { x, gain, bias, eps }, rg)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != bc {
            return Err(Error::Shape(format!("concat_rows: {ac} vs {bc} cols")));
        }
        let mut value = self.nodes[a.0].value.clone();
        value.extend_from_slice(&self.nodes[b.0].value);
        let rg = self.rg(a) || self.rg(b);
        self.push(ar + br, ac, value, Op::ConcatRows(a, b), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start + len > r {
            return Err(Error::Shape(format!("slice_rows: {start}+{len} > {r}")));
        }
        let value = self.nodes[x.0].value[start * c..(start + len) * c].to_vec();
        let rg = self.rg(x);
        self.push(len, c, value, Op::SliceRows { x, start, len }, rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start + len > c {
            return Err(Error::Shape(format!("slice_cols: {start}+{len} > {c}")));
        }
        let mut value = Vec::with_capacity(r * len);
        for i in 0..r {
            value.extend_from_slice(&self.nodes[x.0].value[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(x);
        self.push(r, len, value, Op::SliceCols { x, start, len }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols: no parts".into()));
        }
        let r = self.shape(parts[0]).0;
        let mut total = 0;
        for p in parts {
            if self.shape(*p).0 != r {
                return Err(Error::Shape("concat_cols: row mismatch".into()));
            }
            total += self.shape(*p).1;
        }
        let mut value = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                let c = self.shape(*p).1;
                value.extend_from_slice(&self.nodes[p.0].value[i * c..(i + 1) * c]);
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(r, total, value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.iter().sum();
        let rg = self.rg(a);
        self.push(1, 1, vec![s], Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.nodes[a.0].value.iter().sum::<f64>() / n;
        let rg = self.rg(a);
        self.push(1, 1, vec![s], Op::MeanAll(a), rg)
    }

    /// Reverse pass from a scalar loss. Errors on a non-scalar loss or when
    /// called a second time on the same tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Numeric(
                "backward called twice without re-recording".into(),
            ));
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::Shape(format!(
                "backward: loss must be scalar, got {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            let keep = matches!(self.nodes[i].op, Op::Leaf);
            self.accumulate(i, &g, &mut grads)?;
            if keep {
                grads[i] = Some(g);
            }
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if let Some(g) = &grads[i] {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient at node {i} ({})",
                        op_name(&n.op)
                    )));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn add_grad(grads: &mut [Option<Vec<f64>>], v: Var, contribution: &[f64]) {
        let slot = &mut grads[v.0];
        match slot {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    fn accumulate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let (r, c) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.rg(*a) {
                    Self::add_grad(grads, *a, g);
                }
                if self.rg(*b) {
                    Self::add_grad(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    Self::add_grad(grads, *a, g);
                }
                if self.rg(*b) {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    Self::add_grad(grads, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[b.0].value)
                        .map(|(gi, bv)| gi * bv)
                        .collect();
                    Self::add_grad(grads, *a, &da);
                }
                if self.rg(*b) {
                    let db: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].value)
                        .map(|(gi, av)| gi * av)
                        .collect();
                    Self::add_grad(grads, *b, &db);
                }
            }
            Op::Div(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                if self.rg(*a) {
                    let da: Vec<f64> = g.iter().zip(bv).map(|(gi, y)| gi / y).collect();
                    Self::add_grad(grads, *a, &da);
                }
                if self.rg(*b) {
                    let db: Vec<f64> = g
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(gi, (x, y))| -gi * x / (y * y))
                        .collect();
                    Self::add_grad(grads, *b, &db);
                }
            }
            Op::AddRow(a, b) => {
                if self.rg(*a) {
                    Self::add_grad(grads, *a, g);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            db[j] += g[i * c + j];
                        }
                    }
                    Self::add_grad(grads, *b, &db);
                }
            }
            Op::MulRow(a, b) => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                if self.rg(*a) {
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            da[i * c + j] = g[i * c + j] * bv[j];
                        }
                    }
                    Self::add_grad(grads, *a, &da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            db[j] += g[i * c + j] * av[i * c + j];
                        }
                    }
                    Self::add_grad(grads, *b, &db);
                }
            }
            Op::Scale(a, k) => {
                if self.rg(*a) {
                    let da: Vec<f64> = g.iter().map(|x| x * k).collect();
                    Self::add_grad(grads, *a, &da);
                }
            }
            Op::AddConst(a) => {
                if self.rg(*a) {
                    Self::add_grad(grads, *a, g);
                }
            }
            Op::Matmul(a, b) => {
                let (ar, ac) = self.shape(*a);
                let (_, bc) = self.shape(*b);
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                if self.rg(*a) {
                    // dA = G * B^T
                    let mut da = vec![0.0; ar * ac];
                    for i in 0..ar {
                        for k in 0..ac {
                            let mut s = 0.0;
                            for j in 0..bc {
                                s += g[i * bc + j] * bv[k * bc + j];
                            }
                            da[i * ac + k] = s;
                        }
                    }
                    Self::add_grad(grads, *a, &da);
                }
                if self.rg(*b) {
                    // dB = A^T * G
                    let mut db = vec![0.0; ac * bc];
                    for k in 0..ac {
                        for i in 0..ar {
                            let aik = av[i * ac + k];
                            if aik == 0.0 {
                                continue;
                            }
                            for j in 0..bc {
                                db[k * bc + j] += aik * g[i * bc + j];
                            }
                        }
                    }
                    Self::add_grad(grads, *b, &db);
                }
            }
            Op::MatmulTb(a, b) => {
                // out = A * B^T, out (ar, br)
                let (ar, ak) = self.shape(*a);
                let (br, _) = self.shape(*b);
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                if self.rg(*a) {
                    // dA = G * B
                    let mut da = vec![0.0; ar * ak];
                    for i in 0..ar {
                        for j in 0..br {
                            let gij = g[i * br + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for k in 0..ak {
                                da[i * ak + k] += gij * bv[j * ak + k];
                            }
                        }
                    }
                    Self::add_grad(grads, *a, &da);
                }
                if self.rg(*b) {
                    // dB = G^T * A
                    let mut db = vec![0.0; br * ak];
                    for j in 0..br {
                        for i in 0..ar {
                            let gij = g[i * br + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for k in 0..ak {
                                db[j * ak + k] += gij * av[i * ak + k];
                            }
                        }
                    }
                    Self::add_grad(grads, *b, &db);
                }
            }
            Op::Exp(a) => {
                if self.rg(*a) {
                    let da: Vec<f64> = g.iter().zip(&node.value).map(|(gi, y)| gi * y).collect();
                    Self::add_grad(grads, *a, &da);
                }
            }
            Op::Ln(a) => {
                if self.rg(*a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].value)
                        .map(|(gi, x)| gi / x)
                        .collect();
                    Self::add_grad(grads, *a, &da);
                }
            }
            Op::Log1p(a) => {
                if self.rg(*a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].value)
                        .map(|(gi, x)| gi / (1.0 + x))
                        .collect();
                    Self::add_grad(grads, *a, &da);
                }
            }
            Op::Softplus(a) => {
                if self.rg(*a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].value)
                        .map(|(gi, x)| gi * sigmoid(*x))
                        .collect();
                    Self::add_grad(grads, *a, &da);
                }
            }
            Op::Sigmoid(a) => {
                if self.rg(*a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&node.value)
                        .map(|(gi, y)| gi * y * (1.0 - y))
                        .collect();
                    Self::add_grad(grads, *a, &da);
                }
            }
            Op::Tanh(a) => {
                if self.rg(*a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&node.value)
                        .map(|(gi, y)| gi * (1.0 - y * y))
                        .collect();
                    Self::add_grad(grads, *a, &da);
                }
            }
            Op::Gelu(a) => {
                if self.rg(*a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].value)
                        .map(|(gi, x)| {
                            let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
                            gi * (norm_cdf(*x) + x * pdf)
                        })
                        .collect();
                    Self::add_grad(grads, *a, &da);
                }
            }
            Op::LnGamma(a) => {
                if self.rg(*a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].value)
                        .map(|(gi, x)| gi * digamma(*x))
                        .collect();
                    Self::add_grad(grads, *a, &da);
                }
            }
            Op::ClampMin0(a) => {
                if self.rg(*a) {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].value)
                        .map(|(gi, x)| if *x > 0.0 { *gi } else { 0.0 })
                        .collect();
                    Self::add_grad(grads, *a, &da);
                }
            }
            Op::SoftmaxRows(a) => {
                if self.rg(*a) {
                    let y = &node.value;
                    let mut da = vec![0.0; r * c];
                    for i in 0..r {
                        let dot: f64 = (0..c).map(|j| g[i * c + j] * y[i * c + j]).sum();
                        for j in 0..c {
                            da[i * c + j] = y[i * c + j] * (g[i * c + j] - dot);
                        }
                    }
                    Self::add_grad(grads, *a, &da);
                }
            }
            Op::LayerNormRows { x, gain, bias, eps } => {
                let xv = &self.nodes[x.0].value;
                let gv = &self.nodes[gain.0].value;
                let mut dx = vec![0.0; r * c];
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                for i in 0..r {
                    let row = &xv[i * c..(i + 1) * c];
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let grow = &g[i * c..(i + 1) * c];
                    let dxhat: Vec<f64> = (0..c).map(|j| grow[j] * gv[j]).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / c as f64;
                    let mean_dxhat_xhat =
                        (0..c).map(|j| dxhat[j] * xhat[j]).sum::<f64>() / c as f64;
                    for j in 0..c {
                        dx[i * c + j] =
                            inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        dgain[j] += grow[j] * xhat[j];
                        dbias[j] += grow[j];
                    }
                }
                if self.rg(*x) {
                    Self::add_grad(grads, *x, &dx);
                }
                if self.rg(*gain) {
                    Self::add_grad(grads, *gain, &dgain);
                }
                if self.rg(*bias) {
                    Self::add_grad(grads, *bias, &dbias);
                }
            }
            Op::ConcatRows(a, b) => {
                let (ar, _) = self.shape(*a);
                if self.rg(*a) {
                    Self::add_grad(grads, *a, &g[..ar * c]);
                }
                if self.rg(*b) {
                    Self::add_grad(grads, *b, &g[ar * c..]);
                }
            }
            Op::SliceRows { x, start, len } => {
                if self.rg(*x) {
                    let (xr, xc) = self.shape(*x);
                    let mut dx = vec![0.0; xr * xc];
                    dx[start * xc..(start + len) * xc].copy_from_slice(g);
                    Self::add_grad(grads, *x, &dx);
                }
            }
            Op::SliceCols { x, start, len } => {
                if self.rg(*x) {
                    let (xr, xc) = self.shape(*x);
                    let mut dx = vec![0.0; xr * xc];
                    for i in 0..xr {
                        for j in 0..*len {
                            dx[i * xc + start + j] = g[i * len + j];
                        }
                    }
                    Self::add_grad(grads, *x, &dx);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (pr, pc) = self.shape(*p);
                    if self.rg(*p) {
                        let mut dp = vec![0.0; pr * pc];
                        for i in 0..pr {
                            for j in 0..pc {
                                dp[i * pc + j] = g[i * c + offset + j];
                            }
                        }
                        Self::add_grad(grads, *p, &dp);
                    }
                    offset += pc;
                }
            }
            Op::SumAll(a) => {
                if self.rg(*a) {
                    let n = self.nodes[a.0].value.len();
                    let da = vec![g[0]; n];
                    Self::add_grad(grads, *a, &da);
                }
            }
            Op::MeanAll(a) => {
                if self.rg(*a) {
                    let n = self.nodes[a.0].value.len();
                    let da = vec![g[0] / n as f64; n];
                    Self::add_grad(grads, *a, &da);
                }
            }
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::AddRow(..) => "add_row",
        Op::MulRow(..) => "mul_row",
        Op::Scale(..) => "scale",
        Op::AddConst(..) => "add_const",
        Op::Matmul(..) => "matmul",
        Op::MatmulTb(..) => "matmul_tb",
        Op::Exp(..) => "exp",
        Op::Ln(..) => "ln",
        Op::Log1p(..) => "log1p",
        Op::Softplus(..) => "softplus",
        Op::Sigmoid(..) => "sigmoid",
        Op::Tanh(..) => "tanh",
        Op::Gelu(..) => "gelu",
        Op::LnGamma(..) => "ln_gamma",
        Op::ClampMin0(..) => "clamp_min0",
        Op::SoftmaxRows(..) => "softmax_rows",
        Op::LayerNormRows { .. } => "layer_norm_rows",
        Op::ConcatRows(..) => "concat_rows",
        Op::SliceRows { .. } => "slice_rows",
        Op::SliceCols { .. } => "slice_cols",
        Op::ConcatCols(..) => "concat_cols",
        Op::SumAll(..) => "sum_all",
        Op::MeanAll(..) => "mean_all",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn gelu_at_zero_is_zero() {
        let mut t = Tape::new();
        let x = t.constant(1, 1, vec![0.0]).unwrap();
        let y = t.gelu(x).unwrap();
        assert_eq!(t.scalar(y), 0.0);
    }

    #[test]
    fn softplus_at_zero_is_ln2() {
        let mut t = Tape::new();
        let x = t.constant(1, 1, vec![0.0]).unwrap();
        let y = t.softplus(x).unwrap();
        assert_close(t.scalar(y), std::f64::consts::LN_2, 1e-15);
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let mut t = Tape::new();
        let x = t.constant(1, 3, vec![0.0, 0.0, 0.0]).unwrap();
        let y = t.softmax_rows(x).unwrap();
        for v in t.value(y) {
            assert_close(*v, 1.0 / 3.0, 1e-15);
        }
    }

    #[test]
    fn quadratic_gradient() {
        // loss = sum(w * w), w = [1, 2] -> grad = [2, 4]
        let mut t = Tape::new();
        let w = t.param(1, 2, vec![1.0, 2.0]).unwrap();
        let sq = t.mul(w, w).unwrap();
        let loss = t.sum_all(sq).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(&t, w), vec![2.0, 4.0]);
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut t = Tape::new();
        let w = t.param(1, 2, vec![1.0, 2.0]).unwrap();
        let u = t.param(1, 2, vec![3.0, 4.0]).unwrap();
        let sq = t.mul(w, w).unwrap();
        let loss = t.sum_all(sq).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(&t, u), vec![0.0, 0.0]);
    }

    #[test]
    fn backward_twice_errors() {
        let mut t = Tape::new();
        let w = t.param(1, 1, vec![1.0]).unwrap();
        let loss = t.sum_all(w).unwrap();
        t.backward(loss).unwrap();
        assert!(t.backward(loss).is_err());
    }

    #[test]
    fn non_scalar_loss_errors() {
        let mut t = Tape::new();
        let w = t.param(1, 2, vec![1.0, 2.0]).unwrap();
        assert!(t.backward(w).is_err());
    }

    #[test]
    fn non_finite_result_is_an_error() {
        let mut t = Tape::new();
        let x = t.constant(1, 1, vec![-1.0]).unwrap();
        assert!(t.ln(x).is_err());
    }

    /// Central finite-difference check of a scalar function of one packed
    /// parameter vector.
    fn fd_check<FB>(init: Vec<f64>, rows: usize, cols: usize, build: FB, rel_tol: f64, abs_tol: f64)
    where
        FB: Fn(&mut Tape, Var) -> Var,
    {
        let eval = |data: &[f64]| -> f64 {
            let mut t = Tape::new();
            let w = t.param(rows, cols, data.to_vec()).unwrap();
            let loss = build(&mut t, w);
            t.scalar(loss)
        };
        let mut t = Tape::new();
        let w = t.param(rows, cols, init.clone()).unwrap();
        let loss = build(&mut t, w);
        let grads = t.backward(loss).unwrap();
        let analytic = grads.wrt(&t, w);
        let h = 1e-6;
        for i in 0..init.len() {
            let mut plus = init.clone();
            plus[i] += h;
            let mut minus = init.clone();
            minus[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let denom = fd.abs().max(analytic[i].abs()).max(1.0);
            let err = (analytic[i] - fd).abs();
            assert!(
                err <= abs_tol + rel_tol * denom,
                "param {i}: analytic {} vs fd {fd}",
                analytic[i]
            );
        }
    }

    #[test]
    fn finite_difference_elementwise_chain() {
        let init = vec![0.3, -0.7, 1.2, 0.05, -1.5, 2.0];
        fd_check(
            init,
            2,
            3,
            |t, w| {
                let a = t.gelu(w).unwrap();
                let b = t.softplus(a).unwrap();
                let c = t.sigmoid(b).unwrap();
                let d = t.tanh(c).unwrap();
                let e = t.log1p(d).unwrap();
                t.sum_all(e).unwrap()
            },
            1e-6,
            1e-8,
        );
    }

    #[test]
    fn finite_difference_matmul_softmax() {
        let init = vec![0.5, -0.2, 0.8, 0.1, -0.6, 0.9];
        fd_check(
            init,
            2,
            3,
            |t, w| {
                let s = t.matmul_tb(w, w).unwrap();
                let p = t.softmax_rows(s).unwrap();
                let q = t.matmul(p, w).unwrap();
                let e = t.exp(q).unwrap();
                t.mean_all(e).unwrap()
            },
            1e-5,
            1e-8,
        );
    }

    #[test]
    fn finite_difference_layer_norm() {
        let init = vec![0.5, -0.2, 0.8, 0.1, -0.6, 0.9, 0.3, 0.0];
        fd_check(
            init,
            2,
            4,
            |t, w| {
                let gain = t.param(1, 4, vec![1.1, 0.9, 1.0, 1.2]).unwrap();
                let bias = t.param(1, 4, vec![0.1, -0.1, 0.0, 0.2]).unwrap();
                let y = t.layer_norm_rows(w, gain, bias, 1e-5).unwrap();
                let z = t.gelu(y).unwrap();
                t.sum_all(z).unwrap()
            },
            1e-5,
            1e-8,
        );
    }

    #[test]
    fn finite_difference_ln_gamma() {
        let init = vec![0.7, 1.5, 3.2];
        fd_check(
            init,
            1,
            3,
            |t, w| {
                let sp = t.softplus(w).unwrap();
                let shifted = t.add_const(sp, 0.5).unwrap();
                let lg = t.ln_gamma(shifted).unwrap();
                t.sum_all(lg).unwrap()
            },
            1e-6,
            1e-8,
        );
    }

    #[test]
    fn finite_difference_slice_concat() {
        let init = vec![0.5, -0.2, 0.8, 0.1, -0.6, 0.9, 0.3, 0.4];
        fd_check(
            init,
            2,
            4,
            |t, w| {
                let left = t.slice_cols(w, 0, 2).unwrap();
                let right = t.slice_cols(w, 2, 2).unwrap();
                let prod = t.mul(left, right).unwrap();
                let top = t.slice_rows(prod, 0, 1).unwrap();
                let bottom = t.slice_rows(prod, 1, 1).unwrap();
                let joined = t.concat_cols(&[top, bottom]).unwrap();
                let stacked = t.concat_rows(joined, joined).unwrap();
                let sp = t.softplus(stacked).unwrap();
                t.mean_all(sp).unwrap()
            },
            1e-6,
            1e-8,
        );
    }

    #[test]
    fn backward_linearity() {
        // grad of (f + g) == grad f + grad g
        let init = vec![0.4, -0.9, 1.3];
        let run = |mode: u8| -> Vec<f64> {
            let mut t = Tape::new();
            let w = t.param(1, 3, init.clone()).unwrap();
            let sq = t.mul(w, w).unwrap();
            let f = t.sum_all(sq).unwrap();
            let sp = t.softplus(w).unwrap();
            let g = t.sum_all(sp).unwrap();
            let loss = match mode {
                0 => f,
                1 => g,
                _ => t.add(f, g).unwrap(),
            };
            let grads = t.backward(loss).unwrap();
            grads.wrt(&t, w)
        };
        let gf = run(0);
        let gg = run(1);
        let gsum = run(2);
        for i in 0..3 {
            assert_close(gsum[i], gf[i] + gg[i], 1e-12);
        }
    }

    #[test]
    fn deterministic_repeated_backward() {
        let run = || -> Vec<f64> {
            let mut t = Tape::new();
            let w = t.param(2, 2, vec![0.3, -0.4, 0.9, 1.7]).unwrap();
            let s = t.matmul(w, w).unwrap();
            let p = t.softmax_rows(s).unwrap();
            let loss = t.mean_all(p).unwrap();
            let g = t.backward(loss).unwrap();
            g.wrt(&t, w)
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }
}
