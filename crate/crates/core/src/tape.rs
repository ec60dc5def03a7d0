//! Minimal reverse-mode differentiation over [`Mat`] values.
//!
//! A `Tape` records an eager forward computation as a flat list of nodes;
//! `backward` walks the list in reverse and accumulates gradients. The op set
//! is exactly what the encoder and the ranking loss need, nothing more.

use crate::error::{Error, Result};
use crate::tensor::{dot, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

const LAYER_NORM_EPS: f64 = 1e-6;

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// A * B^T
    MatMulTransB(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// rows of `a` plus a 1xC bias row
    AddRowBroadcast(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    LayerNormRows {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    MeanRows(NodeId),
    MaxRows {
        x: NodeId,
        argmax: Vec<usize>,
    },
    FirstRow(NodeId),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    /// Per token: word row plus the sum of its n-gram bucket rows.
    EmbedSum {
        word_table: NodeId,
        ngram_table: NodeId,
        word_ids: Vec<usize>,
        ngram_ids: Vec<Vec<usize>>,
    },
    /// out[r][j] = x[r][idx[r][j]]
    GatherCols {
        x: NodeId,
        idx: Vec<Vec<usize>>,
    },
    /// add `v` to every (i, i) entry
    DiagAddScalar(NodeId),
    /// Rx1 column of row l2 norms
    RowNorms(NodeId),
    NormalizeRows(NodeId),
    /// mean over rows of (logsumexp(row) - row[pos]); scores already margin-adjusted
    SampledSoftmaxNll {
        scores: NodeId,
        pos: Vec<usize>,
    },
}

struct Node {
    op: Op,
    value: Mat,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Mat) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn matmul_transpose(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_transpose(self.value(b))?;
        Ok(self.push(Op::MatMulTransB(a, b), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!((va.rows(), va.cols()), (vb.rows(), vb.cols()));
        let mut v = va.clone();
        v.add_assign(vb);
        self.push(Op::Add(a, b), v)
    }

    pub fn add_row_broadcast(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(bias));
        assert_eq!(vb.rows(), 1);
        assert_eq!(va.cols(), vb.cols());
        let mut v = va.clone();
        for r in 0..v.rows() {
            let brow: Vec<f64> = vb.row(0).to_vec();
            for (x, b) in v.row_mut(r).iter_mut().zip(&brow) {
                *x += b;
            }
        }
        self.push(Op::AddRowBroadcast(a, bias), v)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a).scale(k);
        self.push(Op::Scale(a, k), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            if *x < 0.0 {
                *x = 0.0;
            }
        }
        self.push(Op::Relu(a), v)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        self.push(Op::SoftmaxRows(a), v)
    }

    pub fn layer_norm_rows(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let c = vx.cols();
        assert_eq!((vg.rows(), vg.cols()), (1, c));
        assert_eq!((vb.rows(), vb.cols()), (1, c));
        let mut v = Mat::zeros(vx.rows(), c);
        for r in 0..vx.rows() {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..c {
                v.set(r, j, vg.get(0, j) * (row[j] - mean) * inv + vb.get(0, j));
            }
        }
        self.push(Op::LayerNormRows { x, gain, bias }, v)
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        assert!(va.rows() > 0);
        let mut v = Mat::zeros(1, va.cols());
        for r in 0..va.rows() {
            for j in 0..va.cols() {
                v.set(0, j, v.get(0, j) + va.get(r, j));
            }
        }
        let inv = 1.0 / va.rows() as f64;
        for x in v.data_mut() {
            *x *= inv;
        }
        self.push(Op::MeanRows(a), v)
    }

    pub fn max_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        assert!(va.rows() > 0);
        let mut v = Mat::zeros(1, va.cols());
        let mut argmax = vec![0usize; va.cols()];
        for j in 0..va.cols() {
            let mut best = va.get(0, j);
            for r in 1..va.rows() {
                if va.get(r, j) > best {
                    best = va.get(r, j);
                    argmax[j] = r;
                }
            }
            v.set(0, j, best);
        }
        self.push(Op::MaxRows { x: a, argmax }, v)
    }

    pub fn first_row(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        assert!(va.rows() > 0);
        let v = Mat::from_vec(1, va.cols(), va.row(0).to_vec());
        self.push(Op::FirstRow(a), v)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let va = self.value(a);
        assert!(start + len <= va.cols());
        let mut v = Mat::zeros(va.rows(), len);
        for r in 0..va.rows() {
            v.row_mut(r).copy_from_slice(&va.row(r)[start..start + len]);
        }
        self.push(Op::SliceCols { x: a, start }, v)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut v = Mat::zeros(rows, total);
        let mut off = 0;
        for p in parts {
            let vp = self.value(*p);
            assert_eq!(vp.rows(), rows);
            for r in 0..rows {
                v.row_mut(r)[off..off + vp.cols()].copy_from_slice(vp.row(r));
            }
            off += vp.cols();
        }
        self.push(Op::ConcatCols(parts.to_vec()), v)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let total: usize = parts.iter().map(|p| self.value(*p).rows()).sum();
        let mut v = Mat::zeros(total, cols);
        let mut off = 0;
        for p in parts {
            let vp = self.value(*p);
            assert_eq!(vp.cols(), cols);
            for r in 0..vp.rows() {
                v.row_mut(off + r).copy_from_slice(vp.row(r));
            }
            off += vp.rows();
        }
        self.push(Op::ConcatRows(parts.to_vec()), v)
    }

    pub fn embed_sum(
        &mut self,
        word_table: NodeId,
        ngram_table: NodeId,
        word_ids: &[usize],
        ngram_ids: &[Vec<usize>],
    ) -> Result<NodeId> {
        assert_eq!(word_ids.len(), ngram_ids.len());
        let (wt, nt) = (self.value(word_table), self.value(ngram_table));
        assert_eq!(wt.cols(), nt.cols());
        let d = wt.cols();
        let mut v = Mat::zeros(word_ids.len(), d);
        for (t, (&wid, ngs)) in word_ids.iter().zip(ngram_ids).enumerate() {
            if wid >= wt.rows() {
                return Err(Error::IdOutOfRange(format!(
                    "word id {wid} >= table rows {}",
                    wt.rows()
                )));
            }
            let dst = v.row_mut(t);
            dst.copy_from_slice(wt.row(wid));
            for &g in ngs {
                if g >= nt.rows() {
                    return Err(Error::IdOutOfRange(format!(
                        "ngram bucket {g} >= table rows {}",
                        nt.rows()
                    )));
                }
                for (x, y) in dst.iter_mut().zip(nt.row(g)) {
                    *x += y;
                }
            }
        }
        Ok(self.push(
            Op::EmbedSum {
                word_table,
                ngram_table,
                word_ids: word_ids.to_vec(),
                ngram_ids: ngram_ids.to_vec(),
            },
            v,
        ))
    }

    pub fn gather_cols(&mut self, a: NodeId, idx: &[Vec<usize>]) -> NodeId {
        let va = self.value(a);
        assert_eq!(va.rows(), idx.len());
        let m = idx.iter().map(|r| r.len()).max().unwrap_or(0);
        assert!(idx.iter().all(|r| r.len() == m), "ragged gather");
        let mut v = Mat::zeros(va.rows(), m);
        for (r, cols) in idx.iter().enumerate() {
            for (j, &c) in cols.iter().enumerate() {
                v.set(r, j, va.get(r, c));
            }
        }
        self.push(
            Op::GatherCols {
                x: a,
                idx: idx.to_vec(),
            },
            v,
        )
    }

    pub fn diag_add_scalar(&mut self, a: NodeId, v: f64) -> NodeId {
        let mut m = self.value(a).clone();
        let n = m.rows().min(m.cols());
        for i in 0..n {
            m.set(i, i, m.get(i, i) + v);
        }
        self.push(Op::DiagAddScalar(a), m)
    }

    pub fn row_norms(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut v = Mat::zeros(va.rows(), 1);
        for r in 0..va.rows() {
            v.set(r, 0, dot(va.row(r), va.row(r)).sqrt());
        }
        self.push(Op::RowNorms(a), v)
    }

    pub fn normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let mut v = va.clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let n = dot(row, row).sqrt();
            if n == 0.0 {
                return Err(Error::Degenerate(format!("zero-norm row {r}")));
            }
            for x in row.iter_mut() {
                *x /= n;
            }
        }
        Ok(self.push(Op::NormalizeRows(a), v))
    }

    /// Mean over rows of -log softmax at `pos[r]`, assuming any margin is
    /// already folded into `scores`.
    pub fn sampled_softmax_nll(&mut self, scores: NodeId, pos: &[usize]) -> NodeId {
        let vs = self.value(scores);
        assert_eq!(vs.rows(), pos.len());
        let mut total = 0.0;
        for (r, &p) in pos.iter().enumerate() {
            let row = vs.row(r);
            total += crate::tensor::log_sum_exp(row) - row[p];
        }
        let v = Mat::from_vec(1, 1, vec![total / pos.len() as f64]);
        self.push(
            Op::SampledSoftmaxNll {
                scores,
                pos: pos.to_vec(),
            },
            v,
        )
    }

    /// Backpropagate from a 1x1 `root`; returns one gradient per node
    /// (None where no gradient flowed).
    pub fn backward(&self, root: NodeId) -> Vec<Option<Mat>> {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let rv = &self.nodes[root.0].value;
        grads[root.0] = Some(Mat::filled(rv.rows(), rv.cols(), 1.0));
        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        grads
    }

    fn add_grad(grads: &mut [Option<Mat>], id: NodeId, g: Mat) {
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn accumulate(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ga = g.matmul_transpose(self.value(*b)).unwrap();
                let gb = self.value(*a).transpose().matmul(g).unwrap();
                Self::add_grad(grads, *a, ga);
                Self::add_grad(grads, *b, gb);
            }
            Op::MatMulTransB(a, b) => {
                // out = A B^T
                let ga = g.matmul(self.value(*b)).unwrap();
                let gb = g.transpose().matmul(self.value(*a)).unwrap();
                Self::add_grad(grads, *a, ga);
                Self::add_grad(grads, *b, gb);
            }
            Op::Add(a, b) => {
                Self::add_grad(grads, *a, g.clone());
                Self::add_grad(grads, *b, g.clone());
            }
            Op::AddRowBroadcast(a, bias) => {
                Self::add_grad(grads, *a, g.clone());
                let mut gb = Mat::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for j in 0..g.cols() {
                        gb.set(0, j, gb.get(0, j) + g.get(r, j));
                    }
                }
                Self::add_grad(grads, *bias, gb);
            }
            Op::Scale(a, k) => Self::add_grad(grads, *a, g.scale(*k)),
            Op::Relu(a) => {
                let va = self.value(*a);
                let mut ga = g.clone();
                for (x, v) in ga.data_mut().iter_mut().zip(va.data()) {
                    if *v <= 0.0 {
                        *x = 0.0;
                    }
                }
                Self::add_grad(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[i].value;
                let mut ga = Mat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let s = dot(g.row(r), y.row(r));
                    for j in 0..y.cols() {
                        ga.set(r, j, (g.get(r, j) - s) * y.get(r, j));
                    }
                }
                Self::add_grad(grads, *a, ga);
            }
            Op::LayerNormRows { x, gain, bias } => {
                let vx = self.value(*x);
                let vg = self.value(*gain);
                let c = vx.cols();
                let mut gx = Mat::zeros(vx.rows(), c);
                let mut ggain = Mat::zeros(1, c);
                let mut gbias = Mat::zeros(1, c);
                for r in 0..vx.rows() {
                    let row = vx.row(r);
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    // xhat_j = (x_j - mean) * inv
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let gy = g.row(r);
                    let mut sum_gy_gain = 0.0;
                    let mut sum_gy_gain_xhat = 0.0;
                    for j in 0..c {
                        let gg = gy[j] * vg.get(0, j);
                        sum_gy_gain += gg;
                        sum_gy_gain_xhat += gg * xhat[j];
                        ggain.set(0, j, ggain.get(0, j) + gy[j] * xhat[j]);
                        gbias.set(0, j, gbias.get(0, j) + gy[j]);
                    }
                    for j in 0..c {
                        let gg = gy[j] * vg.get(0, j);
                        let v = inv
                            * (gg - sum_gy_gain / c as f64 - xhat[j] * sum_gy_gain_xhat / c as f64);
                        gx.set(r, j, v);
                    }
                }
                Self::add_grad(grads, *x, gx);
                Self::add_grad(grads, *gain, ggain);
                Self::add_grad(grads, *bias, gbias);
            }
            Op::MeanRows(a) => {
                let va = self.value(*a);
                let inv = 1.0 / va.rows() as f64;
                let mut ga = Mat::zeros(va.rows(), va.cols());
                for r in 0..va.rows() {
                    for j in 0..va.cols() {
                        ga.set(r, j, g.get(0, j) * inv);
                    }
                }
                Self::add_grad(grads, *a, ga);
            }
            Op::MaxRows { x, argmax } => {
                let va = self.value(*x);
                let mut ga = Mat::zeros(va.rows(), va.cols());
                for (j, &r) in argmax.iter().enumerate() {
                    ga.set(r, j, g.get(0, j));
                }
                Self::add_grad(grads, *x, ga);
            }
            Op::FirstRow(a) => {
                let va = self.value(*a);
                let mut ga = Mat::zeros(va.rows(), va.cols());
                ga.row_mut(0).copy_from_slice(g.row(0));
                Self::add_grad(grads, *a, ga);
            }
            Op::SliceCols { x, start } => {
                let va = self.value(*x);
                let mut ga = Mat::zeros(va.rows(), va.cols());
                for r in 0..va.rows() {
                    ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                Self::add_grad(grads, *x, ga);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let vp = self.value(*p);
                    let mut gp = Mat::zeros(vp.rows(), vp.cols());
                    for r in 0..vp.rows() {
                        gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + vp.cols()]);
                    }
                    off += vp.cols();
                    Self::add_grad(grads, *p, gp);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let vp = self.value(*p);
                    let mut gp = Mat::zeros(vp.rows(), vp.cols());
                    for r in 0..vp.rows() {
                        gp.row_mut(r).copy_from_slice(g.row(off + r));
                    }
                    off += vp.rows();
                    Self::add_grad(grads, *p, gp);
                }
            }
            Op::EmbedSum {
                word_table,
                ngram_table,
                word_ids,
                ngram_ids,
            } => {
                // scatter-add straight into the accumulator; a dense
                // table-sized temporary per sentence would dominate runtime
                for (table, rows_of) in [
                    (*word_table, true),
                    (*ngram_table, false),
                ] {
                    if grads[table.0].is_none() {
                        let v = self.value(table);
                        grads[table.0] = Some(Mat::zeros(v.rows(), v.cols()));
                    }
                    let gt = grads[table.0].as_mut().unwrap();
                    for (t, (&wid, ngs)) in word_ids.iter().zip(ngram_ids).enumerate() {
                        let grow = g.row(t);
                        if rows_of {
                            for (x, v) in gt.row_mut(wid).iter_mut().zip(grow) {
                                *x += v;
                            }
                        } else {
                            for &b in ngs {
                                for (x, v) in gt.row_mut(b).iter_mut().zip(grow) {
                                    *x += v;
                                }
                            }
                        }
                    }
                }
            }
            Op::GatherCols { x, idx } => {
                let va = self.value(*x);
                let mut ga = Mat::zeros(va.rows(), va.cols());
                for (r, cols) in idx.iter().enumerate() {
                    for (j, &c) in cols.iter().enumerate() {
                        ga.set(r, c, ga.get(r, c) + g.get(r, j));
                    }
                }
                Self::add_grad(grads, *x, ga);
            }
            Op::DiagAddScalar(a) => Self::add_grad(grads, *a, g.clone()),
            Op::RowNorms(a) => {
                let va = self.value(*a);
                let y = &self.nodes[i].value;
                let mut ga = Mat::zeros(va.rows(), va.cols());
                for r in 0..va.rows() {
                    let n = y.get(r, 0);
                    if n == 0.0 {
                        continue;
                    }
                    let k = g.get(r, 0) / n;
                    for j in 0..va.cols() {
                        ga.set(r, j, k * va.get(r, j));
                    }
                }
                Self::add_grad(grads, *a, ga);
            }
            Op::NormalizeRows(a) => {
                let va = self.value(*a);
                let y = &self.nodes[i].value;
                let mut ga = Mat::zeros(va.rows(), va.cols());
                for r in 0..va.rows() {
                    let n = dot(va.row(r), va.row(r)).sqrt();
                    let gy = g.row(r);
                    let s = dot(gy, y.row(r));
                    for j in 0..va.cols() {
                        ga.set(r, j, (gy[j] - s * y.get(r, j)) / n);
                    }
                }
                Self::add_grad(grads, *a, ga);
            }
            Op::SampledSoftmaxNll { scores, pos } => {
                let vs = self.value(*scores);
                let scale = g.scalar() / pos.len() as f64;
                let mut gs = Mat::zeros(vs.rows(), vs.cols());
                for (r, &p) in pos.iter().enumerate() {
                    let row = vs.row(r);
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
                    for j in 0..vs.cols() {
                        let mut v = (row[j] - m).exp() / z;
                        if j == p {
                            v -= 1.0;
                        }
                        gs.set(r, j, v * scale);
                    }
                }
                Self::add_grad(grads, *scores, gs);
            }
        }
    }
}
