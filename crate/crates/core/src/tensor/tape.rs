use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::kernels::{self, gemm, row_major, transposed};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a parameter registered in a [`crate::layers::ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }
}

/// Gradient for a single parameter, either dense or as touched embedding rows.
#[derive(Clone, Debug, PartialEq)]
pub enum GradBuf {
    Dense(Vec<f64>),
    Rows {
        dim: usize,
        rows: BTreeMap<usize, Vec<f64>>,
    },
}

impl GradBuf {
    /// Adds this gradient into a dense buffer of the parameter's full size.
    pub fn add_to(&self, dense: &mut [f64]) {
        match self {
            GradBuf::Dense(g) => dense.iter_mut().zip(g).for_each(|(d, g)| *d += g),
            GradBuf::Rows { dim, rows } => {
                for (&row, g) in rows {
                    let dst = &mut dense[row * dim..(row + 1) * dim];
                    dst.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
        }
    }

    pub fn sum_squares(&self) -> f64 {
        match self {
            GradBuf::Dense(g) => g.iter().map(|v| v * v).sum(),
            GradBuf::Rows { rows, .. } => rows.values().flatten().map(|v| v * v).sum(),
        }
    }

    fn scale(&mut self, factor: f64) {
        match self {
            GradBuf::Dense(g) => g.iter_mut().for_each(|v| *v *= factor),
            GradBuf::Rows { rows, .. } => rows.values_mut().flatten().for_each(|v| *v *= factor),
        }
    }

    fn merge(&mut self, other: &GradBuf) {
        match (&mut *self, other) {
            (GradBuf::Dense(a), GradBuf::Dense(b)) => {
                a.iter_mut().zip(b).for_each(|(a, b)| *a += b)
            }
            (GradBuf::Dense(a), rows @ GradBuf::Rows { .. }) => rows.add_to(a),
            (GradBuf::Rows { dim, rows }, GradBuf::Rows { rows: other, .. }) => {
                for (&r, g) in other {
                    let dst = rows.entry(r).or_insert_with(|| vec![0.0; *dim]);
                    dst.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            (GradBuf::Rows { dim, rows }, GradBuf::Dense(b)) => {
                let mut dense = b.clone();
                for (&r, g) in rows.iter() {
                    let dst = &mut dense[r * *dim..(r + 1) * *dim];
                    dst.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                *self = GradBuf::Dense(dense);
            }
        }
    }
}

/// Parameter gradients collected from one or more backward passes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGrads {
    bufs: BTreeMap<ParamId, GradBuf>,
}

impl ParamGrads {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: ParamId) -> Option<&GradBuf> {
        self.bufs.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &GradBuf)> {
        self.bufs.iter().map(|(&id, g)| (id, g))
    }

    pub fn is_empty(&self) -> bool {
        self.bufs.is_empty()
    }

    /// Adds `other` into `self`; iteration is in parameter order, so the
    /// result does not depend on how the gradients were partitioned.
    pub fn merge(&mut self, other: &ParamGrads) {
        for (&id, g) in &other.bufs {
            match self.bufs.get_mut(&id) {
                Some(mine) => mine.merge(g),
                None => {
                    self.bufs.insert(id, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.bufs.values_mut().for_each(|g| g.scale(factor));
    }

    pub fn global_norm(&self) -> f64 {
        self.bufs
            .values()
            .map(GradBuf::sum_squares)
            .sum::<f64>()
            .sqrt()
    }

    fn add_dense(&mut self, id: ParamId, g: &[f64]) {
        match self.bufs.get_mut(&id) {
            Some(GradBuf::Dense(buf)) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            Some(other) => other.merge(&GradBuf::Dense(g.to_vec())),
            None => {
                self.bufs.insert(id, GradBuf::Dense(g.to_vec()));
            }
        }
    }

    fn add_row(&mut self, id: ParamId, dim: usize, row: usize, g: &[f64]) {
        let buf = self.bufs.entry(id).or_insert_with(|| GradBuf::Rows {
            dim,
            rows: BTreeMap::new(),
        });
        match buf {
            GradBuf::Rows { rows, .. } => {
                let dst = rows.entry(row).or_insert_with(|| vec![0.0; dim]);
                dst.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            GradBuf::Dense(dense) => {
                let dst = &mut dense[row * dim..(row + 1) * dim];
                dst.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Embedding {
        param: ParamId,
        indices: Vec<usize>,
        frozen_row: Option<usize>,
    },
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    GatherRows {
        input: Var,
        indices: Vec<usize>,
    },
    ScatterAddRows {
        input: Var,
        indices: Vec<usize>,
    },
    BatchedMatVec(Var, Var),
    Sum(Var),
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
    LstmSequence(Box<LstmCache>),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
}

/// Activations kept by [`Tape::lstm_sequence`] for the reverse pass, all in
/// processing order.
#[derive(Debug)]
struct LstmCache {
    projected: Var,
    w_hh: Var,
    hidden: usize,
    steps: usize,
    batch: usize,
    reverse: bool,
    /// Activated gates `[steps * batch, 4H]`.
    gates: Vec<f64>,
    cells: Vec<f64>,
    hiddens: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run operation record.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    param_grads: ParamGrads,
}

/// Splits a shape at `axis` into (outer count, axis length, inner count).
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    /// Copies a node out as a standalone tensor, including its gradient if
    /// backward has populated one.
    pub fn tensor(&self, v: Var) -> Tensor {
        let node = self.node(v);
        let mut t = Tensor::new(node.shape.clone(), node.value.clone())
            .expect("tape nodes have valid shapes")
            .with_requires_grad(node.needs_grad);
        if let Some(g) = self.grad(v) {
            t.set_grad(Some(g.to_vec())).unwrap();
        }
        t
    }

    /// Records an input tensor; it is differentiated iff `requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.values().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), values)?;
        Ok(self.leaf(&t))
    }

    /// Records a parameter; gradients land in [`Tape::param_grads`].
    pub fn param(&mut self, id: ParamId, value: &Tensor, trainable: bool) -> Var {
        self.push(
            value.shape().to_vec(),
            value.values().to_vec(),
            Op::Param(id),
            trainable,
        )
    }

    /// Gathers rows of an embedding table. The gradient is sparse over the
    /// looked-up rows, and `frozen_row` never receives gradient.
    pub fn embedding(
        &mut self,
        id: ParamId,
        table: &Tensor,
        indices: &[usize],
        frozen_row: Option<usize>,
        trainable: bool,
    ) -> Result<Var> {
        let shape = table.shape();
        if shape.len() != 2 {
            return Err(Error::shape("embedding", shape, &[0, 0]));
        }
        let (rows, dim) = (shape[0], shape[1]);
        let mut value = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            if i >= rows {
                return Err(Error::IndexOutOfRange {
                    what: "embedding table",
                    index: i,
                    len: rows,
                });
            }
            value.extend_from_slice(&table.values()[i * dim..(i + 1) * dim]);
        }
        if indices.is_empty() {
            return Err(Error::EmptySequence("embedding"));
        }
        Ok(self.push(
            vec![indices.len(), dim],
            value,
            Op::Embedding {
                param: id,
                indices: indices.to_vec(),
                frozen_row,
            },
            trainable,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            row_major(k),
            self.value(b),
            row_major(n),
            0.0,
            &mut out,
        );
        let needs = self.needs(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), needs))
    }

    fn zip_same(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Vec<f64>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), needs))
    }

    /// Adds a bias vector to every row (broadcast over leading axes).
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sb.len() != 1 || sa.last() != Some(&sb[0]) {
            return Err(Error::shape("add_bias", sa, sb));
        }
        let c = sb[0];
        let b = self.value(bias);
        let out = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b[i % c])
            .collect();
        let needs = self.needs(&[a, bias]);
        Ok(self.push(sa.to_vec(), out, Op::AddBias(a, bias), needs))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * factor).collect();
        let needs = self.needs(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, factor), needs)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let needs = self.needs(&[a]);
        self.push(self.shape(a).to_vec(), out, op, needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, kernels::sigmoid, Op::Sigmoid(a))
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        match act {
            Activation::Relu => self.relu(a),
            Activation::Tanh => self.tanh(a),
        }
    }

    /// Concatenates tensors of equal rank along `axis`.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or(Error::EmptySequence("concat"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut out_shape = base.clone();
        out_shape[axis] = 0;
        for &v in inputs {
            let s = self.shape(v);
            let agrees = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !agrees {
                return Err(Error::shape("concat", &base, s));
            }
            out_shape[axis] += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&out_shape, axis);
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let block = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v)[o * block..(o + 1) * block]);
            }
        }
        let needs = self.needs(inputs);
        Ok(self.push(
            out_shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            needs,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let from = self.shape(a);
        if shape.iter().product::<usize>() != from.iter().product::<usize>() || shape.contains(&0) {
            return Err(Error::Reshape {
                from: from.to_vec(),
                to: shape.to_vec(),
            });
        }
        let value = self.value(a).to_vec();
        let needs = self.needs(&[a]);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a), needs))
    }

    /// Takes `len` consecutive entries along `axis`, starting at `start`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape("narrow", &shape, &[axis, start, len]));
        }
        let (outer, dim, inner) = split_at_axis(&shape, axis);
        let src = self.value(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let needs = self.needs(&[a]);
        Ok(self.push(
            out_shape,
            out,
            Op::Narrow {
                input: a,
                axis,
                start,
            },
            needs,
        ))
    }

    /// Selects slices along the first axis; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if indices.is_empty() {
            return Err(Error::EmptySequence("gather_rows"));
        }
        let rows = shape[0];
        let width = self.value(a).len() / rows;
        let src = self.value(a);
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= rows {
                return Err(Error::IndexOutOfRange {
                    what: "gather_rows",
                    index: i,
                    len: rows,
                });
            }
            out.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let mut out_shape = shape;
        out_shape[0] = indices.len();
        let needs = self.needs(&[a]);
        Ok(self.push(
            out_shape,
            out,
            Op::GatherRows {
                input: a,
                indices: indices.to_vec(),
            },
            needs,
        ))
    }

    /// Sums row `r` of `a` into output row `indices[r]`; output has `rows` rows.
    pub fn scatter_add_rows(&mut self, a: Var, indices: &[usize], rows: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if indices.len() != shape[0] {
            return Err(Error::shape("scatter_add_rows", &shape, &[indices.len()]));
        }
        if rows == 0 {
            return Err(Error::EmptySequence("scatter_add_rows"));
        }
        let width = self.value(a).len() / shape[0];
        let mut out = vec![0.0; rows * width];
        let src = self.value(a);
        for (r, &dst) in indices.iter().enumerate() {
            if dst >= rows {
                return Err(Error::IndexOutOfRange {
                    what: "scatter_add_rows",
                    index: dst,
                    len: rows,
                });
            }
            out[dst * width..(dst + 1) * width]
                .iter_mut()
                .zip(&src[r * width..(r + 1) * width])
                .for_each(|(o, s)| *o += s);
        }
        let mut out_shape = shape;
        out_shape[0] = rows;
        let needs = self.needs(&[a]);
        Ok(self.push(
            out_shape,
            out,
            Op::ScatterAddRows {
                input: a,
                indices: indices.to_vec(),
            },
            needs,
        ))
    }

    /// `out[b] = a[b] · x[b]` for `a: [B, r, c]`, `x: [B, c]`.
    pub fn batched_matvec(&mut self, a: Var, x: Var) -> Result<Var> {
        let (sa, sx) = (self.shape(a), self.shape(x));
        if sa.len() != 3 || sx.len() != 2 || sa[0] != sx[0] || sa[2] != sx[1] {
            return Err(Error::shape("batched_matvec", sa, sx));
        }
        let (batch, r, c) = (sa[0], sa[1], sa[2]);
        let (av, xv) = (self.value(a), self.value(x));
        let mut out = vec![0.0; batch * r];
        for b in 0..batch {
            let xb = &xv[b * c..(b + 1) * c];
            for i in 0..r {
                let row = &av[(b * r + i) * c..(b * r + i + 1) * c];
                out[b * r + i] = row.iter().zip(xb).map(|(p, q)| p * q).sum();
            }
        }
        let needs = self.needs(&[a, x]);
        Ok(self.push(vec![batch, r], out, Op::BatchedMatVec(a, x), needs))
    }

    /// Runs an LSTM from zero state over time-major gate pre-activations
    /// `projected: [steps * batch, 4H]` (input projection plus bias) with
    /// recurrent weights `w_hh: [H, 4H]`, gate blocks ordered input, forget,
    /// candidate, output. Returns the final hidden state `[batch, H]`.
    pub fn lstm_sequence(
        &mut self,
        projected: Var,
        w_hh: Var,
        steps: usize,
        batch: usize,
        reverse: bool,
    ) -> Result<Var> {
        let (sp, sw) = (self.shape(projected).to_vec(), self.shape(w_hh).to_vec());
        if steps == 0 || batch == 0 {
            return Err(Error::EmptySequence("lstm_sequence"));
        }
        if sw.len() != 2 || sw[1] != 4 * sw[0] || sp.len() != 2 || sp != [steps * batch, sw[1]] {
            return Err(Error::shape("lstm_sequence", &sp, &sw));
        }
        let h = sw[0];
        let width = 4 * h;
        let (pv, wv) = (self.value(projected), self.value(w_hh));
        let mut gates = vec![0.0; steps * batch * width];
        let mut cells = vec![0.0; steps * batch * h];
        let mut hiddens = vec![0.0; steps * batch * h];
        for k in 0..steps {
            let t = if reverse { steps - 1 - k } else { k };
            let pre = &mut gates[k * batch * width..(k + 1) * batch * width];
            pre.copy_from_slice(&pv[t * batch * width..(t + 1) * batch * width]);
            if k > 0 {
                let prev = &hiddens[(k - 1) * batch * h..k * batch * h];
                gemm(
                    batch,
                    h,
                    width,
                    prev,
                    row_major(h),
                    wv,
                    row_major(width),
                    1.0,
                    pre,
                );
            }
            for b in 0..batch {
                let row = &mut gates[(k * batch + b) * width..(k * batch + b + 1) * width];
                for (j, v) in row.iter_mut().enumerate() {
                    *v = if (2 * h..3 * h).contains(&j) {
                        v.tanh()
                    } else {
                        kernels::sigmoid(*v)
                    };
                }
                for j in 0..h {
                    let (i, f, g, o) = (row[j], row[h + j], row[2 * h + j], row[3 * h + j]);
                    let c_prev = if k > 0 {
                        cells[((k - 1) * batch + b) * h + j]
                    } else {
                        0.0
                    };
                    let c = f * c_prev + i * g;
                    cells[(k * batch + b) * h + j] = c;
                    hiddens[(k * batch + b) * h + j] = o * c.tanh();
                }
            }
        }
        let out = hiddens[(steps - 1) * batch * h..].to_vec();
        let needs = self.needs(&[projected, w_hh]);
        let cache = LstmCache {
            projected,
            w_hh,
            hidden: h,
            steps,
            batch,
            reverse,
            gates,
            cells,
            hiddens,
        };
        Ok(self.push(
            vec![batch, h],
            out,
            Op::LstmSequence(Box::new(cache)),
            needs,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).iter().sum();
        let needs = self.needs(&[a]);
        self.push(vec![1], vec![total], Op::Sum(a), needs)
    }

    /// Inverted dropout: zeroes each entry with probability `p` and rescales
    /// survivors by `1/(1-p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout ratio {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = self
            .value(a)
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let needs = self.needs(&[a]);
        Ok(self.push(
            self.shape(a).to_vec(),
            out,
            Op::Dropout { input: a, mask },
            needs,
        ))
    }

    /// `-log softmax(logits)[target]` for a single logit vector.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        self.softmax_cross_entropy_rows(logits, &[target], &[1.0])
    }

    /// Weighted sum over rows of `-log softmax(row)[target]`.
    pub fn softmax_cross_entropy_rows(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let classes = *shape.last().unwrap();
        let rows = self.value(logits).len() / classes;
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::shape(
                "softmax_cross_entropy",
                &shape,
                &[targets.len()],
            ));
        }
        let values = self.value(logits);
        let mut probs = vec![0.0; values.len()];
        let mut loss = 0.0;
        for r in 0..rows {
            let t = targets[r];
            if t >= classes {
                return Err(Error::IndexOutOfRange {
                    what: "softmax_cross_entropy target",
                    index: t,
                    len: classes,
                });
            }
            let row = &values[r * classes..(r + 1) * classes];
            kernels::softmax_into(row, &mut probs[r * classes..(r + 1) * classes]);
            loss += weights[r] * kernels::neg_log_softmax(row, t);
        }
        let needs = self.needs(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            needs,
        ))
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param_grads(&self) -> &ParamGrads {
        &self.param_grads
    }

    pub fn take_param_grads(&mut self) -> ParamGrads {
        std::mem::take(&mut self.param_grads)
    }

    /// Reverse pass from a scalar loss. Gradients accumulate additively when
    /// a node feeds several consumers.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = self.node(loss);
        if node.value.len() != 1 {
            return Err(Error::NonScalarLoss(node.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut param_grads = ParamGrads::new();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.backprop_node(node, &g, &mut grads, &mut param_grads);
            }
            grads[idx] = Some(g);
        }
        self.grads = grads;
        self.param_grads = param_grads;
        Ok(())
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }

    fn backprop_lstm(&self, cache: &LstmCache, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let LstmCache {
            projected,
            w_hh,
            hidden: h,
            steps,
            batch,
            reverse,
            ref gates,
            ref cells,
            ref hiddens,
        } = *cache;
        let width = 4 * h;
        let wv = self.value(w_hh);
        let mut d_pre = vec![0.0; steps * batch * width];
        let mut dh = g.to_vec();
        let mut dc = vec![0.0; batch * h];
        for k in (0..steps).rev() {
            for b in 0..batch {
                let row = &gates[(k * batch + b) * width..(k * batch + b + 1) * width];
                let out = &mut d_pre[(k * batch + b) * width..(k * batch + b + 1) * width];
                for j in 0..h {
                    let (i, f, gg, o) = (row[j], row[h + j], row[2 * h + j], row[3 * h + j]);
                    let c = cells[(k * batch + b) * h + j];
                    let c_prev = if k > 0 {
                        cells[((k - 1) * batch + b) * h + j]
                    } else {
                        0.0
                    };
                    let tc = c.tanh();
                    let dhj = dh[b * h + j];
                    let dcj = dc[b * h + j] + dhj * o * (1.0 - tc * tc);
                    out[j] = dcj * gg * i * (1.0 - i);
                    out[h + j] = dcj * c_prev * f * (1.0 - f);
                    out[2 * h + j] = dcj * i * (1.0 - gg * gg);
                    out[3 * h + j] = dhj * tc * o * (1.0 - o);
                    dc[b * h + j] = dcj * f;
                }
            }
            if k > 0 {
                let step = &d_pre[k * batch * width..(k + 1) * batch * width];
                gemm(
                    batch,
                    width,
                    h,
                    step,
                    row_major(width),
                    wv,
                    transposed(width),
                    0.0,
                    &mut dh,
                );
            }
        }
        if let Some(gw) = self.slot(grads, w_hh) {
            if steps > 1 {
                let rows = (steps - 1) * batch;
                gemm(
                    h,
                    rows,
                    width,
                    &hiddens[..rows * h],
                    transposed(h),
                    &d_pre[batch * width..],
                    row_major(width),
                    1.0,
                    gw,
                );
            }
        }
        if let Some(gp) = self.slot(grads, projected) {
            for k in 0..steps {
                let t = if reverse { steps - 1 - k } else { k };
                let src = &d_pre[k * batch * width..(k + 1) * batch * width];
                gp[t * batch * width..(t + 1) * batch * width]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, s)| *d += s);
            }
        }
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        param_grads: &mut ParamGrads,
    ) {
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => param_grads.add_dense(*id, g),
            Op::Embedding {
                param,
                indices,
                frozen_row,
            } => {
                let dim = node.shape[1];
                for (r, &row) in indices.iter().enumerate() {
                    if Some(row) != *frozen_row {
                        param_grads.add_row(*param, dim, row, &g[r * dim..(r + 1) * dim]);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if let Some(ga) = self.slot(grads, *a) {
                    gemm(
                        m,
                        n,
                        k,
                        g,
                        row_major(n),
                        self.value(*b),
                        transposed(n),
                        1.0,
                        ga,
                    );
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm(
                        k,
                        m,
                        n,
                        self.value(*a),
                        transposed(k),
                        g,
                        row_major(n),
                        1.0,
                        gb,
                    );
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.slot(grads, *v) {
                        gv.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::AddBias(a, bias) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    let c = gb.len();
                    for row in g.chunks_exact(c) {
                        gb.iter_mut().zip(row).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let bv = self.value(*b);
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(bv) {
                        *d += s * y;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    let av = self.value(*a);
                    for ((d, s), x) in gb.iter_mut().zip(g).zip(av) {
                        *d += s * x;
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += s * f);
                }
            }
            Op::Relu(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, s), x) in ga.iter_mut().zip(g).zip(self.value(*a)) {
                        if *x > 0.0 {
                            *d += s;
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(&node.value) {
                        *d += s * (1.0 - y * y);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(&node.value) {
                        *d += s * y * (1.0 - y);
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_at_axis(&node.shape, *axis);
                let row = node.shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let block = self.shape(v)[*axis] * inner;
                    if let Some(gv) = self.slot(grads, v) {
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + block];
                            gv[o * block..(o + 1) * block]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, s)| *d += s);
                        }
                    }
                    offset += block;
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }
            Op::Narrow { input, axis, start } => {
                let in_shape = self.shape(*input).to_vec();
                if let Some(ga) = self.slot(grads, *input) {
                    let (outer, dim, inner) = split_at_axis(&in_shape, *axis);
                    let len = node.shape[*axis];
                    for o in 0..outer {
                        let base = o * dim * inner + start * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        ga[base..base + len * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::GatherRows { input, indices } => {
                if let Some(ga) = self.slot(grads, *input) {
                    let width = g.len() / indices.len();
                    for (r, &i) in indices.iter().enumerate() {
                        ga[i * width..(i + 1) * width]
                            .iter_mut()
                            .zip(&g[r * width..(r + 1) * width])
                            .for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::ScatterAddRows { input, indices } => {
                if let Some(ga) = self.slot(grads, *input) {
                    let width = ga.len() / indices.len();
                    for (r, &i) in indices.iter().enumerate() {
                        ga[r * width..(r + 1) * width]
                            .iter_mut()
                            .zip(&g[i * width..(i + 1) * width])
                            .for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::BatchedMatVec(a, x) => {
                let sa = self.shape(*a).to_vec();
                let (batch, r, c) = (sa[0], sa[1], sa[2]);
                if let Some(ga) = self.slot(grads, *a) {
                    let xv = self.value(*x);
                    for b in 0..batch {
                        for i in 0..r {
                            let gi = g[b * r + i];
                            let dst = &mut ga[(b * r + i) * c..(b * r + i + 1) * c];
                            dst.iter_mut()
                                .zip(&xv[b * c..(b + 1) * c])
                                .for_each(|(d, xj)| *d += gi * xj);
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let av = self.value(*a);
                    for b in 0..batch {
                        for i in 0..r {
                            let gi = g[b * r + i];
                            let row = &av[(b * r + i) * c..(b * r + i + 1) * c];
                            gx[b * c..(b + 1) * c]
                                .iter_mut()
                                .zip(row)
                                .for_each(|(d, aij)| *d += gi * aij);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Dropout { input, mask } => {
                if let Some(ga) = self.slot(grads, *input) {
                    for ((d, s), m) in ga.iter_mut().zip(g).zip(mask) {
                        *d += s * m;
                    }
                }
            }
            Op::LstmSequence(cache) => self.backprop_lstm(cache, g, grads),
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                if let Some(gl) = self.slot(grads, *logits) {
                    let classes = probs.len() / targets.len();
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        let scale = g[0] * w;
                        for c in 0..classes {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            gl[r * classes + c] += scale * (probs[r * classes + c] - onehot);
                        }
                    }
                }
            }
        }
    }
}
