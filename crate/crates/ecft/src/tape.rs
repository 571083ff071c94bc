//! A small reverse-mode autodiff tape over [`Tensor`] values.
//!
//! Each training example builds its own tape (a Wengert list of ops),
//! computes a scalar loss, and runs [`Tape::backward`] to obtain a flat
//! parameter gradient aligned with the [`ParamStore`]. Per-example tapes
//! keep steps embarrassingly parallel while gradient reduction stays in a
//! fixed order, so runs are bit-for-bit reproducible.

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

// some scalar operands (e.g. Affine's add, slice end bounds) are only
// needed on the forward pass but are kept in the op for Debug output
#[allow(dead_code)]
#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    /// a (m×k) @ b^T (n×k)
    MatMulTb(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    /// (m×n) + (1×n), broadcast over rows
    AddRow(Var, Var),
    /// (m×n) * (1×n), broadcast over rows
    MulRow(Var, Var),
    /// a * mul + add, elementwise scalars
    Affine(Var, f64, f64),
    /// a + constant matrix (no gradient into the constant)
    AddConst(Var),
    /// a * constant matrix, elementwise
    ScaleConst(Var, Vec<f64>),
    RowSoftmax(Var),
    RowLogSoftmax(Var),
    LayerNorm(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    /// 1 / (a + eps)
    Recip(Var, f64),
    /// gather rows of an embedding table
    Embed(ParamId, Vec<u32>),
    /// straight-through embedding: forward takes the hard rows of the
    /// table, backward routes into both the table rows and the soft
    /// relaxation (as if the input were soft @ table)
    StEmbed {
        table: ParamId,
        soft: Var,
        hard: Vec<u32>,
    },
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    /// pick scalar elements into an n×1 column
    GatherElems(Var, Vec<(usize, usize)>),
    SumAll(Var),
    MeanAll(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Tape<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
}

pub struct Grads {
    pub params: Vec<f64>,
    node_grads: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient of the loss with respect to a tape variable (inputs included).
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.node_grads[v.0].as_ref()
    }
}

const LN_EPS: f64 = 1e-8;

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows, t.cols)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let t = self.store.tensor(id);
        self.push(t, Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).matmul(self.value(b));
        self.push(t, Op::MatMul(a, b))
    }

    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).matmul_tb(self.value(b));
        self.push(t, Op::MatMulTb(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!((ta.rows, ta.cols), (tb.rows, tb.cols));
        let mut t = ta.clone();
        t.add_inplace(tb);
        self.push(t, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!((ta.rows, ta.cols), (tb.rows, tb.cols));
        let data = ta
            .data
            .iter()
            .zip(tb.data.iter())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::from_vec(data, ta.rows, ta.cols);
        self.push(t, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(tb.rows, 1);
        assert_eq!(ta.cols, tb.cols);
        let mut t = ta.clone();
        for r in 0..t.rows {
            for c in 0..t.cols {
                *t.at_mut(r, c) += tb.data[c];
            }
        }
        self.push(t, Op::AddRow(a, b))
    }

    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(tb.rows, 1);
        assert_eq!(ta.cols, tb.cols);
        let mut t = ta.clone();
        for r in 0..t.rows {
            for c in 0..t.cols {
                *t.at_mut(r, c) *= tb.data[c];
            }
        }
        self.push(t, Op::MulRow(a, b))
    }

    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data.iter().map(|x| x * mul + add).collect();
        let t = Tensor::from_vec(data, ta.rows, ta.cols);
        self.push(t, Op::Affine(a, mul, add))
    }

    pub fn add_const(&mut self, a: Var, c: &[f64]) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.len(), c.len());
        let data = ta.data.iter().zip(c.iter()).map(|(x, y)| x + y).collect();
        let t = Tensor::from_vec(data, ta.rows, ta.cols);
        self.push(t, Op::AddConst(a))
    }

    pub fn scale_const(&mut self, a: Var, c: Vec<f64>) -> Var {
        let ta = self.value(a);
        assert_eq!(ta.len(), c.len());
        let data = ta.data.iter().zip(c.iter()).map(|(x, y)| x * y).collect();
        let t = Tensor::from_vec(data, ta.rows, ta.cols);
        self.push(t, Op::ScaleConst(a, c))
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let mut t = ta.clone();
        for r in 0..t.rows {
            crate::tensor::softmax_inplace(t.row_mut(r));
        }
        self.push(t, Op::RowSoftmax(a))
    }

    pub fn row_log_softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let mut t = ta.clone();
        for r in 0..t.rows {
            let lse = crate::tensor::log_sum_exp(t.row(r));
            for x in t.row_mut(r) {
                *x -= lse;
            }
        }
        self.push(t, Op::RowLogSoftmax(a))
    }

    pub fn layer_norm(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let mut t = ta.clone();
        for r in 0..t.rows {
            let row = t.row_mut(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
        }
        self.push(t, Op::LayerNorm(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data.iter().map(|x| x.tanh()).collect();
        let t = Tensor::from_vec(data, ta.rows, ta.cols);
        self.push(t, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect();
        let t = Tensor::from_vec(data, ta.rows, ta.cols);
        self.push(t, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data.iter().map(|x| x.max(0.0)).collect();
        let t = Tensor::from_vec(data, ta.rows, ta.cols);
        self.push(t, Op::Relu(a))
    }

    pub fn recip(&mut self, a: Var, eps: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data.iter().map(|x| 1.0 / (x + eps)).collect();
        let t = Tensor::from_vec(data, ta.rows, ta.cols);
        self.push(t, Op::Recip(a, eps))
    }

    pub fn embed(&mut self, table: ParamId, ids: &[u32]) -> Var {
        let (_, d) = self.store.shape(table);
        let view = self.store.view(table);
        let mut t = Tensor::zeros(ids.len(), d);
        for (r, &id) in ids.iter().enumerate() {
            let src = &view[id as usize * d..(id as usize + 1) * d];
            t.row_mut(r).copy_from_slice(src);
        }
        self.push(t, Op::Embed(table, ids.to_vec()))
    }

    pub fn st_embed(&mut self, table: ParamId, soft: Var, hard: &[u32]) -> Var {
        let (v, d) = self.store.shape(table);
        let ts = self.value(soft);
        assert_eq!(ts.rows, hard.len());
        assert_eq!(ts.cols, v);
        let view = self.store.view(table);
        let mut t = Tensor::zeros(hard.len(), d);
        for (r, &id) in hard.iter().enumerate() {
            let src = &view[id as usize * d..(id as usize + 1) * d];
            t.row_mut(r).copy_from_slice(src);
        }
        self.push(
            t,
            Op::StEmbed {
                table,
                soft,
                hard: hard.to_vec(),
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols;
        let rows: usize = parts.iter().map(|&v| self.value(v).rows).sum();
        let mut t = Tensor::zeros(rows, cols);
        let mut r = 0;
        for &p in parts {
            let tp = self.value(p);
            assert_eq!(tp.cols, cols);
            t.data[r * cols..(r + tp.rows) * cols].copy_from_slice(&tp.data);
            r += tp.rows;
        }
        self.push(t, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, r0: usize, r1: usize) -> Var {
        let ta = self.value(a);
        assert!(r0 <= r1 && r1 <= ta.rows);
        let cols = ta.cols;
        let t = Tensor::from_vec(ta.data[r0 * cols..r1 * cols].to_vec(), r1 - r0, cols);
        self.push(t, Op::SliceRows(a, r0, r1))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&v| self.value(v).cols).sum();
        let mut t = Tensor::zeros(rows, cols);
        let mut c0 = 0;
        for &p in parts {
            let tp = self.value(p);
            assert_eq!(tp.rows, rows);
            for r in 0..rows {
                t.row_mut(r)[c0..c0 + tp.cols].copy_from_slice(tp.row(r));
            }
            c0 += tp.cols;
        }
        self.push(t, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, c0: usize, c1: usize) -> Var {
        let ta = self.value(a);
        assert!(c0 <= c1 && c1 <= ta.cols);
        let mut t = Tensor::zeros(ta.rows, c1 - c0);
        for r in 0..ta.rows {
            t.row_mut(r).copy_from_slice(&ta.row(r)[c0..c1]);
        }
        self.push(t, Op::SliceCols(a, c0, c1))
    }

    pub fn gather_elems(&mut self, a: Var, idx: &[(usize, usize)]) -> Var {
        let ta = self.value(a);
        let data = idx.iter().map(|&(r, c)| ta.at(r, c)).collect();
        let t = Tensor::from_vec(data, idx.len(), 1);
        self.push(t, Op::GatherElems(a, idx.to_vec()))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let s: f64 = ta.data.iter().sum::<f64>() / ta.len() as f64;
        self.push(Tensor::scalar(s), Op::MeanAll(a))
    }

    /// Backpropagate from a scalar loss variable.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "loss must be scalar");
        let mut node_grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut params = vec![0.0; self.store.len()];
        node_grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            let g = match node_grads[i].clone() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(pid) => {
                    let e = self.store.entry(*pid);
                    let dst = &mut params[e.offset..e.offset + e.rows * e.cols];
                    for (d, s) in dst.iter_mut().zip(g.data.iter()) {
                        *d += s;
                    }
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_tb(self.value(*b));
                    let db = self.value(*a).matmul_ta(&g);
                    accumulate(&mut node_grads, *a, da);
                    accumulate(&mut node_grads, *b, db);
                }
                Op::MatMulTb(a, b) => {
                    let da = g.matmul(self.value(*b));
                    let db = g.matmul_ta(self.value(*a));
                    accumulate(&mut node_grads, *a, da);
                    accumulate(&mut node_grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut node_grads, *a, g.clone());
                    accumulate(&mut node_grads, *b, g);
                }
                Op::Mul(a, b) => {
                    let ta = self.value(*a);
                    let tb = self.value(*b);
                    let da = Tensor::from_vec(
                        g.data.iter().zip(tb.data.iter()).map(|(x, y)| x * y).collect(),
                        g.rows,
                        g.cols,
                    );
                    let db = Tensor::from_vec(
                        g.data.iter().zip(ta.data.iter()).map(|(x, y)| x * y).collect(),
                        g.rows,
                        g.cols,
                    );
                    accumulate(&mut node_grads, *a, da);
                    accumulate(&mut node_grads, *b, db);
                }
                Op::AddRow(a, b) => {
                    let mut db = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            db.data[c] += g.at(r, c);
                        }
                    }
                    accumulate(&mut node_grads, *a, g);
                    accumulate(&mut node_grads, *b, db);
                }
                Op::MulRow(a, b) => {
                    let ta = self.value(*a);
                    let tb = self.value(*b);
                    let mut da = g.clone();
                    let mut db = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            *da.at_mut(r, c) *= tb.data[c];
                            db.data[c] += g.at(r, c) * ta.at(r, c);
                        }
                    }
                    accumulate(&mut node_grads, *a, da);
                    accumulate(&mut node_grads, *b, db);
                }
                Op::Affine(a, mul, _) => {
                    let mut da = g;
                    da.scale_inplace(*mul);
                    accumulate(&mut node_grads, *a, da);
                }
                Op::AddConst(a) => {
                    accumulate(&mut node_grads, *a, g);
                }
                Op::ScaleConst(a, c) => {
                    let da = Tensor::from_vec(
                        g.data.iter().zip(c.iter()).map(|(x, y)| x * y).collect(),
                        g.rows,
                        g.cols,
                    );
                    accumulate(&mut node_grads, *a, da);
                }
                Op::RowSoftmax(a) => {
                    let y = &node.value;
                    let mut da = Tensor::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(x, v)| x * v).sum();
                        for c in 0..g.cols {
                            *da.at_mut(r, c) = y.at(r, c) * (g.at(r, c) - dot);
                        }
                    }
                    accumulate(&mut node_grads, *a, da);
                }
                Op::RowLogSoftmax(a) => {
                    let s = &node.value;
                    let mut da = Tensor::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let gsum: f64 = g.row(r).iter().sum();
                        for c in 0..g.cols {
                            *da.at_mut(r, c) = g.at(r, c) - s.at(r, c).exp() * gsum;
                        }
                    }
                    accumulate(&mut node_grads, *a, da);
                }
                Op::LayerNorm(a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let n = x.cols as f64;
                    let mut da = Tensor::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let row = x.row(r);
                        let mean = row.iter().sum::<f64>() / n;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        let gmean: f64 = g.row(r).iter().sum::<f64>() / n;
                        let gymean: f64 = g
                            .row(r)
                            .iter()
                            .zip(y.row(r))
                            .map(|(gv, yv)| gv * yv)
                            .sum::<f64>()
                            / n;
                        for c in 0..g.cols {
                            *da.at_mut(r, c) = inv * (g.at(r, c) - gmean - y.at(r, c) * gymean);
                        }
                    }
                    accumulate(&mut node_grads, *a, da);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let da = Tensor::from_vec(
                        g.data.iter().zip(y.data.iter()).map(|(gv, yv)| gv * (1.0 - yv * yv)).collect(),
                        g.rows,
                        g.cols,
                    );
                    accumulate(&mut node_grads, *a, da);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let da = Tensor::from_vec(
                        g.data.iter().zip(y.data.iter()).map(|(gv, yv)| gv * yv * (1.0 - yv)).collect(),
                        g.rows,
                        g.cols,
                    );
                    accumulate(&mut node_grads, *a, da);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let da = Tensor::from_vec(
                        g.data.iter().zip(x.data.iter()).map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 }).collect(),
                        g.rows,
                        g.cols,
                    );
                    accumulate(&mut node_grads, *a, da);
                }
                Op::Recip(a, _) => {
                    let y = &node.value;
                    let da = Tensor::from_vec(
                        g.data.iter().zip(y.data.iter()).map(|(gv, yv)| -gv * yv * yv).collect(),
                        g.rows,
                        g.cols,
                    );
                    accumulate(&mut node_grads, *a, da);
                }
                Op::Embed(table, ids) => {
                    let e = self.store.entry(*table);
                    let d = e.cols;
                    for (r, &id) in ids.iter().enumerate() {
                        let off = e.offset + id as usize * d;
                        for c in 0..d {
                            params[off + c] += g.at(r, c);
                        }
                    }
                }
                Op::StEmbed { table, soft, hard } => {
                    let e = self.store.entry(*table);
                    let d = e.cols;
                    for (r, &id) in hard.iter().enumerate() {
                        let off = e.offset + id as usize * d;
                        for c in 0..d {
                            params[off + c] += g.at(r, c);
                        }
                    }
                    // soft path: d soft = g @ table^T
                    let table_t = self.store.tensor(*table);
                    let dsoft = g.matmul_tb(&table_t);
                    accumulate(&mut node_grads, *soft, dsoft);
                }
                Op::ConcatRows(parts) => {
                    let mut r = 0;
                    for &p in parts {
                        let rows = self.value(p).rows;
                        let part = Tensor::from_vec(
                            g.data[r * g.cols..(r + rows) * g.cols].to_vec(),
                            rows,
                            g.cols,
                        );
                        accumulate(&mut node_grads, p, part);
                        r += rows;
                    }
                }
                Op::SliceRows(a, r0, _) => {
                    let ta = self.value(*a);
                    let mut da = Tensor::zeros(ta.rows, ta.cols);
                    da.data[r0 * ta.cols..r0 * ta.cols + g.len()].copy_from_slice(&g.data);
                    accumulate(&mut node_grads, *a, da);
                }
                Op::ConcatCols(parts) => {
                    let mut c0 = 0;
                    for &p in parts {
                        let tp = self.value(p);
                        let mut part = Tensor::zeros(tp.rows, tp.cols);
                        for r in 0..tp.rows {
                            part.row_mut(r).copy_from_slice(&g.row(r)[c0..c0 + tp.cols]);
                        }
                        accumulate(&mut node_grads, p, part);
                        c0 += tp.cols;
                    }
                }
                Op::SliceCols(a, c0, _) => {
                    let ta = self.value(*a);
                    let mut da = Tensor::zeros(ta.rows, ta.cols);
                    for r in 0..g.rows {
                        da.row_mut(r)[*c0..c0 + g.cols].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut node_grads, *a, da);
                }
                Op::GatherElems(a, idx) => {
                    let ta = self.value(*a);
                    let mut da = Tensor::zeros(ta.rows, ta.cols);
                    for (k, &(r, c)) in idx.iter().enumerate() {
                        *da.at_mut(r, c) += g.data[k];
                    }
                    accumulate(&mut node_grads, *a, da);
                }
                Op::SumAll(a) => {
                    let ta = self.value(*a);
                    let da = Tensor::from_vec(vec![g.data[0]; ta.len()], ta.rows, ta.cols);
                    accumulate(&mut node_grads, *a, da);
                }
                Op::MeanAll(a) => {
                    let ta = self.value(*a);
                    let v = g.data[0] / ta.len() as f64;
                    let da = Tensor::from_vec(vec![v; ta.len()], ta.rows, ta.cols);
                    accumulate(&mut node_grads, *a, da);
                }
            }
        }
        Grads { params, node_grads }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_inplace(&g),
        slot @ None => *slot = Some(g),
    }
}
