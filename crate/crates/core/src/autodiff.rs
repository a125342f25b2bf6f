//! Reverse-mode differentiation over row-major `f64` matrices.
//!
//! A [`Graph`] records every operation as it is evaluated; [`Graph::backward`]
//! walks the record in reverse. Only the handful of operations the
//! conditioning and denoising stacks need are supported. Sequences are
//! matrices with one token per row.

use ndarray::{concatenate, s, Array2, Axis};

use crate::positions::rotate_pairs;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    Rope { x: Var, angles: Array2<f64> },
    Softmax { x: Var },
    Transpose(Var),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows { x: Var, rows: Vec<usize> },
    ScatterAddRows { base: Var, delta: Var, rows: Vec<usize> },
    Mse { pred: Var, target: Array2<f64> },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const RMS_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A value that is never differentiated.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    /// `x + row`, broadcasting a `1 x d` row over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let value = self.value(x) + self.value(row);
        self.push(value, Op::AddRow(x, row), &[x, row])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x) * factor;
        self.push(value, Op::Scale(x, factor), &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(gelu);
        self.push(value, Op::Gelu(x), &[x])
    }

    /// Row-wise RMS normalization with a `1 x d` gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Var {
        let xv = self.value(x);
        let gv = self.value(gain);
        let d = xv.ncols() as f64;
        let inv_rms: Vec<f64> = xv
            .axis_iter(Axis(0))
            .map(|row| 1.0 / (row.iter().map(|v| v * v).sum::<f64>() / d + RMS_EPS).sqrt())
            .collect();
        let mut value = xv.clone();
        for (mut row, r) in value.axis_iter_mut(Axis(0)).zip(&inv_rms) {
            row *= *r;
            row *= &gv.row(0);
        }
        self.push(value, Op::RmsNorm { x, gain, inv_rms }, &[x, gain])
    }

    /// Rotate adjacent column pairs of each row by per-row angles
    /// (`rows x cols/2`).
    pub fn rope(&mut self, x: Var, angles: Array2<f64>) -> Var {
        assert_eq!(
            self.value(x).dim(),
            (angles.nrows(), angles.ncols() * 2),
            "rope angle table shape"
        );
        let value = rotate_pairs(self.value(x).view(), angles.view(), 1.0);
        self.push(value, Op::Rope { x, angles }, &[x])
    }

    /// Row-wise softmax. Entries equal to `-inf` get probability zero; a row
    /// with no finite entry becomes all zeros.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for mut row in value.axis_iter_mut(Axis(0)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                row.fill(0.0);
                continue;
            }
            row.mapv_inplace(|v| (v - max).exp());
            let total = row.sum();
            row /= total;
        }
        self.push(value, Op::Softmax { x }, &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).t().to_owned();
        self.push(value, Op::Transpose(x), &[x])
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice(s![start..start + len, ..]).to_owned();
        self.push(value, Op::SliceRows { x, start }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(value, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        if let [only] = parts {
            return *only;
        }
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        self.push(value, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        if let [only] = parts {
            return *only;
        }
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        self.push(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let value = self.value(x).select(Axis(0), rows);
        self.push(value, Op::GatherRows { x, rows: rows.to_vec() }, &[x])
    }

    /// Copy of `base` with `delta`'s rows added at `rows`. Every other row is
    /// copied untouched.
    pub fn scatter_add_rows(&mut self, base: Var, delta: Var, rows: &[usize]) -> Var {
        let mut value = self.value(base).clone();
        let d = self.value(delta);
        for (i, &r) in rows.iter().enumerate() {
            let mut dst = value.row_mut(r);
            dst += &d.row(i);
        }
        self.push(
            value,
            Op::ScatterAddRows {
                base,
                delta,
                rows: rows.to_vec(),
            },
            &[base, delta],
        )
    }

    /// Mean squared error against a fixed target, as a `1 x 1` scalar.
    pub fn mse(&mut self, pred: Var, target: &Array2<f64>) -> Var {
        let p = self.value(pred);
        assert_eq!(p.dim(), target.dim(), "mse shape");
        let n = p.len().max(1) as f64;
        let loss = (p - target).mapv(|v| v * v).sum() / n;
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::Mse {
                pred,
                target: target.clone(),
            },
            &[pred],
        )
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Adjoints {
        assert_eq!(self.value(output).dim(), (1, 1), "backward needs a scalar output");
        self.backward_from(output, Array2::ones((1, 1)))
    }

    /// Vector-Jacobian product: reverse sweep seeded with `cotangent`, the
    /// gradient of some scalar with respect to `output`.
    pub fn backward_from(&self, output: Var, cotangent: Array2<f64>) -> Adjoints {
        assert_eq!(self.value(output).dim(), cotangent.dim(), "cotangent shape mismatch");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(cotangent);
        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            self.propagate(node, &gy, &mut grads);
            grads[id] = Some(gy);
        }
        Adjoints { grads }
    }

    fn propagate(&self, node: &Node, gy: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let needs = |v: &Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if needs(a) {
                    accumulate(&mut grads[a.0], gy.dot(&self.value(*b).t()));
                }
                if needs(b) {
                    accumulate(&mut grads[b.0], self.value(*a).t().dot(gy));
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if needs(v) {
                        accumulate(&mut grads[v.0], gy.clone());
                    }
                }
            }
            Op::AddRow(x, row) => {
                if needs(x) {
                    accumulate(&mut grads[x.0], gy.clone());
                }
                if needs(row) {
                    accumulate(&mut grads[row.0], gy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(x, f) => accumulate(&mut grads[x.0], gy * *f),
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let mut g = gy.clone();
                g.zip_mut_with(xv, |gi, &xi| *gi *= gelu_grad(xi));
                accumulate(&mut grads[x.0], g);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let d = xv.ncols() as f64;
                if needs(gain) {
                    let mut dg = Array2::zeros((1, xv.ncols()));
                    for ((gy_row, x_row), r) in gy.axis_iter(Axis(0)).zip(xv.axis_iter(Axis(0))).zip(inv_rms) {
                        for j in 0..xv.ncols() {
                            dg[[0, j]] += gy_row[j] * x_row[j] * r;
                        }
                    }
                    accumulate(&mut grads[gain.0], dg);
                }
                if needs(x) {
                    let mut dx = Array2::zeros(xv.dim());
                    for (i, r) in inv_rms.iter().enumerate() {
                        let u: Vec<f64> = (0..xv.ncols()).map(|j| gy[[i, j]] * gv[[0, j]]).collect();
                        let ux: f64 = u.iter().zip(xv.row(i)).map(|(a, b)| a * b).sum();
                        for j in 0..xv.ncols() {
                            dx[[i, j]] = r * u[j] - r * r * r * xv[[i, j]] * ux / d;
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
            }
            Op::Rope { x, angles } => {
                accumulate(&mut grads[x.0], rotate_pairs(gy.view(), angles.view(), -1.0));
            }
            Op::Softmax { x } => {
                let y = &node.value;
                let mut dx = gy * y;
                for (mut row, y_row) in dx.axis_iter_mut(Axis(0)).zip(y.axis_iter(Axis(0))) {
                    let dot: f64 = row.sum();
                    row.zip_mut_with(&y_row, |v, &yi| *v -= yi * dot);
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::Transpose(x) => accumulate(&mut grads[x.0], gy.t().to_owned()),
            Op::SliceRows { x, start } => {
                let mut g = Array2::zeros(self.value(*x).dim());
                g.slice_mut(s![*start..*start + gy.nrows(), ..]).assign(gy);
                accumulate(&mut grads[x.0], g);
            }
            Op::SliceCols { x, start } => {
                let mut g = Array2::zeros(self.value(*x).dim());
                g.slice_mut(s![.., *start..*start + gy.ncols()]).assign(gy);
                accumulate(&mut grads[x.0], g);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).nrows();
                    if needs(p) {
                        accumulate(&mut grads[p.0], gy.slice(s![offset..offset + n, ..]).to_owned());
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).ncols();
                    if needs(p) {
                        accumulate(&mut grads[p.0], gy.slice(s![.., offset..offset + n]).to_owned());
                    }
                    offset += n;
                }
            }
            Op::GatherRows { x, rows } => {
                let mut g = Array2::zeros(self.value(*x).dim());
                for (i, &r) in rows.iter().enumerate() {
                    let mut dst = g.row_mut(r);
                    dst += &gy.row(i);
                }
                accumulate(&mut grads[x.0], g);
            }
            Op::ScatterAddRows { base, delta, rows } => {
                if needs(base) {
                    accumulate(&mut grads[base.0], gy.clone());
                }
                if needs(delta) {
                    accumulate(&mut grads[delta.0], gy.select(Axis(0), rows));
                }
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred);
                let n = p.len().max(1) as f64;
                let g = (p - target) * (2.0 * gy[[0, 0]] / n);
                accumulate(&mut grads[pred.0], g);
            }
        }
    }
}

/// Gradients of one scalar with respect to every recorded node.
#[derive(Debug)]
pub struct Adjoints {
    grads: Vec<Option<Array2<f64>>>,
}

impl Adjoints {
    /// `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}
