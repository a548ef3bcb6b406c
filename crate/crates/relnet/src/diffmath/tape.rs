//! Reverse-mode differentiation on a linear tape.
//!
//! Every forward op computes its value eagerly and records itself as a node.
//! `backward` replays the nodes in reverse exactly once, accumulating
//! vector-Jacobian products. Reduction order is fixed (index ascending)
//! everywhere so repeated runs are bit-identical on the same platform.
//!
//! One tape is single-writer; independent tapes may run on separate threads.

use super::array::{Array, Scalar};

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op<T> {
    Leaf,
    /// out = a @ b
    Matmul { a: Var, b: Var },
    /// out[r] = a[r] + b  (b is a vector broadcast over rows)
    AddRowBroadcast { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: T },
    AddScalar { a: Var },
    Tanh { a: Var },
    Relu { a: Var },
    Exp { a: Var },
    Log { a: Var },
    SoftmaxRows { a: Var },
    /// Vector layer normalization, population variance, no learned affine.
    LayerNorm { a: Var, eps: T },
    SumRows { a: Var },
    MeanRows { a: Var },
    SumAll { a: Var },
    MeanAll { a: Var },
    ConcatCols { a: Var, b: Var },
    ConcatRows { parts: Vec<Var> },
    /// Single row repeated `times` times.
    RepeatRow { a: Var, times: usize },
    /// Each row repeated `times` times consecutively (row-major grouping).
    RepeatRowsEach { a: Var, times: usize },
    /// Whole block stacked `times` times.
    TileRows { a: Var, times: usize },
    SliceCols { a: Var, start: usize, len: usize },
    Minimum { a: Var, b: Var },
    Clamp { a: Var, lo: T, hi: T },
    /// Fused multi-head dot-product attention over a token set.
    /// Saves the softmaxed weights (stacked per head) for the backward pass.
    Mhdpa {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        weights: Array<T>,
    },
}

struct Node<T> {
    value: Array<T>,
    op: Op<T>,
}

/// Wengert tape: records forward ops, replays them in reverse for gradients.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Array<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// Drop all nodes and gradients, keeping allocation capacity.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array<T>, op: Op<T>) -> Var {
        debug_assert!(value.all_finite(), "non-finite entries in tape node");
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Insert a leaf (parameter or constant input).
    pub fn leaf(&mut self, value: Array<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    // ── forward ops ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::Matmul { a, b })
    }

    /// `a` is m x n, `b` a length-n vector added to every row.
    pub fn add_row_broadcast(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let n = av.cols();
        assert_eq!(bv.len(), n, "broadcast vector length {} != cols {}", bv.len(), n);
        let mut data = av.data().to_vec();
        for r in 0..av.rows() {
            for c in 0..n {
                data[r * n + c] = data[r * n + c] + bv.data()[c];
            }
        }
        let out = Array::from_vec(av.shape().to_vec(), data);
        self.push(out, Op::AddRowBroadcast { a, b })
    }

    fn zip_elementwise(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        // A rank-1 vector and a single-row matrix are the same row.
        assert!(
            av.rows() == bv.rows() && av.cols() == bv.cols(),
            "elementwise operand shapes disagree: {:?} vs {:?}",
            av.shape(),
            bv.shape()
        );
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Array::from_vec(av.shape().to_vec(), data);
        self.push(out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_elementwise(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_elementwise(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_elementwise(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        self.zip_elementwise(a, b, |x, y| if x <= y { x } else { y }, Op::Minimum { a, b })
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale { a, c })
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar { a })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        self.push(out, Op::Tanh { a })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(out, Op::Relu { a })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.exp());
        self.push(out, Op::Exp { a })
    }

    /// Natural log. Panics on non-positive input (domain error).
    pub fn log(&mut self, a: Var) -> Var {
        assert!(
            self.value(a).data().iter().all(|&x| x > T::zero()),
            "log of non-positive input"
        );
        let out = self.value(a).map(|x| x.ln());
        self.push(out, Op::Log { a })
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let out = self
            .value(a)
            .map(|x| if x < lo { lo } else if x > hi { hi } else { x });
        self.push(out, Op::Clamp { a, lo, hi })
    }

    /// Row-wise softmax, stabilized by row-max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        let mut data = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = av.row(r);
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for c in 0..cols {
                let e = (row[c] - max).exp();
                data[r * cols + c] = e;
                sum = sum + e;
            }
            for c in 0..cols {
                data[r * cols + c] = data[r * cols + c] / sum;
            }
        }
        let out = Array::from_vec(av.shape().to_vec(), data);
        self.push(out, Op::SoftmaxRows { a })
    }

    /// Vector layer normalization with population variance and no learned
    /// affine: out = (x - mean) / sqrt(var + eps).
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Var {
        let av = self.value(a);
        assert!(av.rows() == 1, "layer_norm expects a vector, got {:?}", av.shape());
        let n = T::from_f64(av.len() as f64);
        let mean = av.data().iter().cloned().sum::<T>() / n;
        let var = av
            .data()
            .iter()
            .fold(T::zero(), |acc, &x| acc + (x - mean) * (x - mean))
            / n;
        let inv_std = T::one() / (var + eps).sqrt();
        let out = av.map(|x| (x - mean) * inv_std);
        self.push(out, Op::LayerNorm { a, eps })
    }

    /// Column-wise sum over rows, index-ascending order.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        let mut data = vec![T::zero(); cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c] = data[c] + av.data()[r * cols + c];
            }
        }
        let out = Array::vector(data);
        self.push(out, Op::SumRows { a })
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        let inv = T::one() / T::from_f64(rows as f64);
        let mut data = vec![T::zero(); cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c] = data[c] + av.data()[r * cols + c];
            }
        }
        for d in data.iter_mut() {
            *d = *d * inv;
        }
        let out = Array::vector(data);
        self.push(out, Op::MeanRows { a })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().cloned().sum::<T>();
        self.push(Array::scalar(s), Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.data().iter().cloned().sum::<T>() / T::from_f64(av.len() as f64);
        self.push(Array::scalar(s), Op::MeanAll { a })
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let rows = av.rows();
        assert_eq!(rows, bv.rows(), "concat_cols row counts disagree");
        let (ca, cb) = (av.cols(), bv.cols());
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let out = Array::matrix(rows, ca + cb, data);
        self.push(out, Op::ConcatCols { a, b })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows column counts disagree");
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let out = Array::matrix(rows, cols, data);
        self.push(out, Op::ConcatRows { parts: parts.to_vec() })
    }

    /// Repeat a single-row array `times` times.
    pub fn repeat_row(&mut self, a: Var, times: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows(), 1, "repeat_row expects a single row");
        let cols = av.cols();
        let mut data = Vec::with_capacity(times * cols);
        for _ in 0..times {
            data.extend_from_slice(av.data());
        }
        let out = Array::matrix(times, cols, data);
        self.push(out, Op::RepeatRow { a, times })
    }

    /// Repeat each row `times` times consecutively: rows come out grouped
    /// by source row (a0,a0,..,a1,a1,..).
    pub fn repeat_rows_each(&mut self, a: Var, times: usize) -> Var {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        let mut data = Vec::with_capacity(rows * times * cols);
        for r in 0..rows {
            for _ in 0..times {
                data.extend_from_slice(av.row(r));
            }
        }
        let out = Array::matrix(rows * times, cols, data);
        self.push(out, Op::RepeatRowsEach { a, times })
    }

    /// Stack the whole block `times` times (a0,..,am,a0,..,am,..).
    pub fn tile_rows(&mut self, a: Var, times: usize) -> Var {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        let mut data = Vec::with_capacity(rows * times * cols);
        for _ in 0..times {
            data.extend_from_slice(av.data());
        }
        let out = Array::matrix(rows * times, cols, data);
        self.push(out, Op::TileRows { a, times })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        assert!(start + len <= cols, "slice_cols out of range");
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&av.row(r)[start..start + len]);
        }
        let out = Array::matrix(rows, len, data);
        self.push(out, Op::SliceCols { a, start, len })
    }

    /// Multi-head dot-product attention over `n` tokens.
    ///
    /// `q`, `k`, `v` are n x d with d divisible by `heads`. Scores are scaled
    /// by 1/sqrt(d_head), softmaxed per row, applied to values, and head
    /// outputs are concatenated back to n x d.
    pub fn mhdpa(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let n = qv.rows();
        let d = qv.cols();
        assert_eq!(kv.shape(), qv.shape(), "q/k shapes disagree");
        assert_eq!(vv.shape(), qv.shape(), "q/v shapes disagree");
        assert!(heads > 0 && d % heads == 0, "token width {} not divisible by {} heads", d, heads);
        let dh = d / heads;
        let scale = T::one() / T::from_f64(dh as f64).sqrt();

        let mut weights = vec![T::zero(); heads * n * n];
        let mut out = vec![T::zero(); n * d];
        for h in 0..heads {
            let off = h * dh;
            let wbase = h * n * n;
            // scores, then stabilized softmax per row
            for i in 0..n {
                let qi = &qv.row(i)[off..off + dh];
                for j in 0..n {
                    let kj = &kv.row(j)[off..off + dh];
                    let mut dot = T::zero();
                    for t in 0..dh {
                        dot = dot + qi[t] * kj[t];
                    }
                    weights[wbase + i * n + j] = dot * scale;
                }
                let row = &mut weights[wbase + i * n..wbase + (i + 1) * n];
                let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for w in row.iter_mut() {
                    *w = (*w - max).exp();
                    sum = sum + *w;
                }
                for w in row.iter_mut() {
                    *w = *w / sum;
                }
            }
            // mix values
            for i in 0..n {
                for j in 0..n {
                    let w = weights[wbase + i * n + j];
                    let vj = &vv.row(j)[off..off + dh];
                    for t in 0..dh {
                        out[i * d + off + t] = out[i * d + off + t] + w * vj[t];
                    }
                }
            }
        }
        let value = Array::matrix(n, d, out);
        let weights = Array::matrix(heads * n, n, weights);
        self.push(value, Op::Mhdpa { q, k, v, heads, weights })
    }

    /// Saved attention weights of an [`Tape::mhdpa`] node, stacked per head
    /// as a (heads * n) x n matrix. Diagnostics only.
    pub fn mhdpa_weights(&self, v: Var) -> &Array<T> {
        match &self.nodes[v.0].op {
            Op::Mhdpa { weights, .. } => weights,
            _ => panic!("mhdpa_weights on a non-attention node"),
        }
    }

    // ── backward ────────────────────────────────────────────────────

    /// Gradient of `v` after [`Tape::backward`]; `None` if no gradient
    /// flowed to it (treat as exactly zero).
    pub fn grad(&self, v: Var) -> Option<&Array<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or a zero array of its shape.
    pub fn grad_or_zeros(&self, v: Var) -> Array<T> {
        match self.grad(v) {
            Some(g) => g.clone(),
            None => Array::zeros(self.value(v).shape().to_vec()),
        }
    }

    /// Reverse sweep from a scalar `loss`. Each node is visited exactly once.
    pub fn backward(&mut self, loss: Var) {
        assert!(
            self.value(loss).is_scalar(),
            "backward requires a scalar loss, got shape {:?}",
            self.value(loss).shape()
        );
        self.grads.clear();
        self.grads.resize(self.nodes.len(), None);
        self.grads[loss.0] = Some(Array::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            let Some(d_out) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &d_out);
            self.grads[i] = Some(d_out);
        }
    }

    fn backward_node(&mut self, i: usize, d_out: &Array<T>) {
        // Split borrows: values are read from nodes, gradients written to grads.
        macro_rules! val {
            ($v:expr) => {
                &self.nodes[$v.0].value
            };
        }
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let da = matmul_nt(d_out, val!(b));
                let db = matmul_tn(val!(a), d_out);
                accumulate(&mut self.grads, a, da);
                accumulate(&mut self.grads, b, db);
            }
            Op::AddRowBroadcast { a, b } => {
                let (a, b) = (*a, *b);
                let cols = d_out.cols();
                let mut db = vec![T::zero(); cols];
                for r in 0..d_out.rows() {
                    for c in 0..cols {
                        db[c] = db[c] + d_out.data()[r * cols + c];
                    }
                }
                accumulate(&mut self.grads, a, d_out.clone());
                accumulate(&mut self.grads, b, Array::vector(db));
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                accumulate(&mut self.grads, a, d_out.clone());
                accumulate(&mut self.grads, b, d_out.clone());
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                accumulate(&mut self.grads, a, d_out.clone());
                accumulate(&mut self.grads, b, d_out.map(|x| -x));
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let da = zip_map(d_out, val!(b), |d, y| d * y);
                let db = zip_map(d_out, val!(a), |d, x| d * x);
                accumulate(&mut self.grads, a, da);
                accumulate(&mut self.grads, b, db);
            }
            Op::Minimum { a, b } => {
                let (a, b) = (*a, *b);
                let (av, bv) = (val!(a), val!(b));
                let da = zip3_map(d_out, av, bv, |d, x, y| if x <= y { d } else { T::zero() });
                let db = zip3_map(d_out, av, bv, |d, x, y| if x <= y { T::zero() } else { d });
                accumulate(&mut self.grads, a, da);
                accumulate(&mut self.grads, b, db);
            }
            Op::Scale { a, c } => {
                let (a, c) = (*a, *c);
                accumulate(&mut self.grads, a, d_out.map(|x| x * c));
            }
            Op::AddScalar { a } => {
                let a = *a;
                accumulate(&mut self.grads, a, d_out.clone());
            }
            Op::Tanh { a } => {
                let a = *a;
                let da = zip_map(d_out, &self.nodes[i].value, |d, y| d * (T::one() - y * y));
                accumulate(&mut self.grads, a, da);
            }
            Op::Relu { a } => {
                let a = *a;
                let da = zip_map(d_out, val!(a), |d, x| if x > T::zero() { d } else { T::zero() });
                accumulate(&mut self.grads, a, da);
            }
            Op::Exp { a } => {
                let a = *a;
                let da = zip_map(d_out, &self.nodes[i].value, |d, y| d * y);
                accumulate(&mut self.grads, a, da);
            }
            Op::Log { a } => {
                let a = *a;
                let da = zip_map(d_out, val!(a), |d, x| d / x);
                accumulate(&mut self.grads, a, da);
            }
            Op::Clamp { a, lo, hi } => {
                let (a, lo, hi) = (*a, *lo, *hi);
                let da = zip_map(d_out, val!(a), |d, x| {
                    if x >= lo && x <= hi {
                        d
                    } else {
                        T::zero()
                    }
                });
                accumulate(&mut self.grads, a, da);
            }
            Op::SoftmaxRows { a } => {
                let a = *a;
                let y = &self.nodes[i].value;
                let (rows, cols) = (y.rows(), y.cols());
                let mut da = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    let yr = y.row(r);
                    let dr = &d_out.data()[r * cols..(r + 1) * cols];
                    let dot = yr
                        .iter()
                        .zip(dr)
                        .fold(T::zero(), |acc, (&yy, &dd)| acc + yy * dd);
                    for c in 0..cols {
                        da[r * cols + c] = yr[c] * (dr[c] - dot);
                    }
                }
                accumulate(&mut self.grads, a, Array::from_vec(y.shape().to_vec(), da));
            }
            Op::LayerNorm { a, eps } => {
                let (a, eps) = (*a, *eps);
                let x = val!(a);
                let y = &self.nodes[i].value;
                let n = T::from_f64(x.len() as f64);
                let mean = x.data().iter().cloned().sum::<T>() / n;
                let var = x
                    .data()
                    .iter()
                    .fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean))
                    / n;
                let inv_std = T::one() / (var + eps).sqrt();
                let mean_d = d_out.data().iter().cloned().sum::<T>() / n;
                let mean_dy = d_out
                    .data()
                    .iter()
                    .zip(y.data())
                    .fold(T::zero(), |acc, (&d, &yy)| acc + d * yy)
                    / n;
                let da: Vec<T> = d_out
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&d, &yy)| inv_std * (d - mean_d - yy * mean_dy))
                    .collect();
                accumulate(&mut self.grads, a, Array::from_vec(x.shape().to_vec(), da));
            }
            Op::SumRows { a } => {
                let a = *a;
                let x = val!(a);
                let (rows, cols) = (x.rows(), x.cols());
                let mut da = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    da.extend_from_slice(d_out.data());
                }
                accumulate(&mut self.grads, a, Array::from_vec(x.shape().to_vec(), da));
            }
            Op::MeanRows { a } => {
                let a = *a;
                let x = val!(a);
                let (rows, cols) = (x.rows(), x.cols());
                let inv = T::one() / T::from_f64(rows as f64);
                let mut da = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    da.extend(d_out.data().iter().map(|&d| d * inv));
                }
                accumulate(&mut self.grads, a, Array::from_vec(x.shape().to_vec(), da));
            }
            Op::SumAll { a } => {
                let a = *a;
                let x = val!(a);
                let d = d_out.item();
                accumulate(&mut self.grads, a, Array::from_vec(x.shape().to_vec(), vec![d; x.len()]));
            }
            Op::MeanAll { a } => {
                let a = *a;
                let x = val!(a);
                let d = d_out.item() / T::from_f64(x.len() as f64);
                accumulate(&mut self.grads, a, Array::from_vec(x.shape().to_vec(), vec![d; x.len()]));
            }
            Op::ConcatCols { a, b } => {
                let (a, b) = (*a, *b);
                let (ca, cb) = (val!(a).cols(), val!(b).cols());
                let rows = d_out.rows();
                let mut da = Vec::with_capacity(rows * ca);
                let mut db = Vec::with_capacity(rows * cb);
                for r in 0..rows {
                    let row = d_out.row(r);
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                let (sa, sb) = (val!(a).shape().to_vec(), val!(b).shape().to_vec());
                accumulate(&mut self.grads, a, Array::from_vec(sa, da));
                accumulate(&mut self.grads, b, Array::from_vec(sb, db));
            }
            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let cols = d_out.cols();
                let mut offset = 0;
                for p in parts {
                    let pv_rows = self.nodes[p.0].value.rows();
                    let shape = self.nodes[p.0].value.shape().to_vec();
                    let slice =
                        d_out.data()[offset * cols..(offset + pv_rows) * cols].to_vec();
                    accumulate(&mut self.grads, p, Array::from_vec(shape, slice));
                    offset += pv_rows;
                }
            }
            Op::RepeatRow { a, times } => {
                let (a, times) = (*a, *times);
                let cols = d_out.cols();
                let mut da = vec![T::zero(); cols];
                for r in 0..times {
                    for c in 0..cols {
                        da[c] = da[c] + d_out.data()[r * cols + c];
                    }
                }
                let shape = self.nodes[a.0].value.shape().to_vec();
                accumulate(&mut self.grads, a, Array::from_vec(shape, da));
            }
            Op::RepeatRowsEach { a, times } => {
                let (a, times) = (*a, *times);
                let x_rows = self.nodes[a.0].value.rows();
                let cols = d_out.cols();
                let mut da = vec![T::zero(); x_rows * cols];
                for r in 0..x_rows {
                    for t in 0..times {
                        let src = (r * times + t) * cols;
                        for c in 0..cols {
                            da[r * cols + c] = da[r * cols + c] + d_out.data()[src + c];
                        }
                    }
                }
                let shape = self.nodes[a.0].value.shape().to_vec();
                accumulate(&mut self.grads, a, Array::from_vec(shape, da));
            }
            Op::TileRows { a, times } => {
                let (a, times) = (*a, *times);
                let x_rows = self.nodes[a.0].value.rows();
                let cols = d_out.cols();
                let mut da = vec![T::zero(); x_rows * cols];
                for t in 0..times {
                    for r in 0..x_rows {
                        let src = (t * x_rows + r) * cols;
                        for c in 0..cols {
                            da[r * cols + c] = da[r * cols + c] + d_out.data()[src + c];
                        }
                    }
                }
                let shape = self.nodes[a.0].value.shape().to_vec();
                accumulate(&mut self.grads, a, Array::from_vec(shape, da));
            }
            Op::SliceCols { a, start, len } => {
                let (a, start, len) = (*a, *start, *len);
                let x = val!(a);
                let (rows, cols) = (x.rows(), x.cols());
                let mut da = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    for c in 0..len {
                        da[r * cols + start + c] = d_out.data()[r * len + c];
                    }
                }
                accumulate(&mut self.grads, a, Array::from_vec(x.shape().to_vec(), da));
            }
            Op::Mhdpa { q, k, v, heads, weights } => {
                let (q, k, v, heads) = (*q, *k, *v, *heads);
                let (qv, kv, vv) = (val!(q), val!(k), val!(v));
                let n = qv.rows();
                let d = qv.cols();
                let dh = d / heads;
                let scale = T::one() / T::from_f64(dh as f64).sqrt();
                let w = weights.data();

                let mut dq = vec![T::zero(); n * d];
                let mut dk = vec![T::zero(); n * d];
                let mut dv = vec![T::zero(); n * d];
                let mut dw = vec![T::zero(); n * n];
                let mut ds = vec![T::zero(); n * n];
                for h in 0..heads {
                    let off = h * dh;
                    let wbase = h * n * n;
                    // dV[j] += sum_i w[i][j] * dO[i]; dW[i][j] = dO[i] . V[j]
                    for i in 0..n {
                        let doi = &d_out.row(i)[off..off + dh];
                        for j in 0..n {
                            let wij = w[wbase + i * n + j];
                            let vj = &vv.row(j)[off..off + dh];
                            let mut dot = T::zero();
                            for t in 0..dh {
                                dv[j * d + off + t] = dv[j * d + off + t] + wij * doi[t];
                                dot = dot + doi[t] * vj[t];
                            }
                            dw[i * n + j] = dot;
                        }
                    }
                    // softmax VJP per row: dS = W o (dW - rowdot)
                    for i in 0..n {
                        let wr = &w[wbase + i * n..wbase + (i + 1) * n];
                        let dwr = &dw[i * n..(i + 1) * n];
                        let dot = wr
                            .iter()
                            .zip(dwr)
                            .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                        for j in 0..n {
                            ds[i * n + j] = wr[j] * (dwr[j] - dot) * scale;
                        }
                    }
                    // dQ[i] += sum_j dS[i][j] * K[j]; dK[j] += sum_i dS[i][j] * Q[i]
                    for i in 0..n {
                        let qi = &qv.row(i)[off..off + dh];
                        for j in 0..n {
                            let s = ds[i * n + j];
                            let kj = &kv.row(j)[off..off + dh];
                            for t in 0..dh {
                                dq[i * d + off + t] = dq[i * d + off + t] + s * kj[t];
                                dk[j * d + off + t] = dk[j * d + off + t] + s * qi[t];
                            }
                        }
                    }
                }
                accumulate(&mut self.grads, q, Array::matrix(n, d, dq));
                accumulate(&mut self.grads, k, Array::matrix(n, d, dk));
                accumulate(&mut self.grads, v, Array::matrix(n, d, dv));
            }
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Array<T>>], v: Var, g: Array<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            debug_assert_eq!(existing.len(), g.len());
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e = *e + *x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn zip_map<T: Scalar>(a: &Array<T>, b: &Array<T>, f: impl Fn(T, T) -> T) -> Array<T> {
    debug_assert_eq!(a.len(), b.len());
    Array::from_vec(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn zip3_map<T: Scalar>(
    a: &Array<T>,
    b: &Array<T>,
    c: &Array<T>,
    f: impl Fn(T, T, T) -> T,
) -> Array<T> {
    Array::from_vec(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .zip(c.data())
            .map(|((&x, &y), &z)| f(x, y, z))
            .collect(),
    )
}

/// a @ b^T
fn matmul_nt<T: Scalar>(a: &Array<T>, b: &Array<T>) -> Array<T> {
    let (m, k) = (a.rows(), a.cols());
    let (n, k2) = (b.rows(), b.cols());
    debug_assert_eq!(k, k2);
    let bt = transpose(b);
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, a.data(), bt.data(), &mut out);
    Array::matrix(m, n, out)
}

/// a^T @ b
fn matmul_tn<T: Scalar>(a: &Array<T>, b: &Array<T>) -> Array<T> {
    let (k, m) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    debug_assert_eq!(k, k2);
    let at = transpose(a);
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, at.data(), b.data(), &mut out);
    Array::matrix(m, n, out)
}

fn transpose<T: Scalar>(a: &Array<T>) -> Array<T> {
    let (r, c) = (a.rows(), a.cols());
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data()[i * c + j];
        }
    }
    Array::matrix(c, r, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn identity_loss_gradient_is_one() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(Array::scalar(3.0));
        tape.backward(p);
        assert_eq!(tape.grad(p).unwrap().item(), 1.0);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(Array::scalar(3.0));
        let sq = tape.mul(p, p);
        tape.backward(sq);
        assert_eq!(tape.grad(p).unwrap().item(), 6.0);
    }

    #[test]
    fn tanh_derivative_at_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Array::scalar(0.0));
        let y = tape.tanh(x);
        assert_eq!(tape.value(y).item(), 0.0);
        tape.backward(y);
        assert!(close(tape.grad(x).unwrap().item(), 1.0, 1e-12));
    }

    #[test]
    fn relu_clips_negative() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Array::scalar(-3.0));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).item(), 0.0);
    }

    #[test]
    fn softmax_symmetry_and_shift_invariance() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Array::matrix(2, 2, vec![0.0, 0.0, 1000.0, 1000.0]));
        let y = tape.softmax_rows(a);
        for v in tape.value(y).data() {
            assert!(close(*v, 0.5, 1e-12));
        }
    }

    #[test]
    fn softmax_hand_value() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Array::matrix(1, 2, vec![0.0, 3.0f64.ln()]));
        let y = tape.softmax_rows(a);
        let out = tape.value(y).data();
        assert!(close(out[0], 0.25, 1e-12));
        assert!(close(out[1], 0.75, 1e-12));
    }

    #[test]
    fn layer_norm_constant_input_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Array::vector(vec![5.0, 5.0, 5.0]));
        let y = tape.layer_norm(x, 1e-5);
        for v in tape.value(y).data() {
            assert_eq!(*v, 0.0);
        }
    }

    #[test]
    fn layer_norm_hand_value() {
        // var([1,2,3]) = 2/3 (population)
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Array::vector(vec![1.0, 2.0, 3.0]));
        let y = tape.layer_norm(x, 1e-5);
        let out = tape.value(y).data();
        let expect = 1.0 / (2.0f64 / 3.0 + 1e-5).sqrt();
        assert!(close(out[0], -expect, 1e-9));
        assert!(close(out[1], 0.0, 1e-12));
        assert!(close(out[2], expect, 1e-9));
        assert!((expect - 1.2247).abs() < 1e-3);
    }

    #[test]
    fn sum_rows_hand_value_and_single_row() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Array::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let s = tape.sum_rows(a);
        assert_eq!(tape.value(s).data(), &[4.0, 6.0]);

        let single = tape.leaf(Array::matrix(1, 3, vec![7.0, 8.0, 9.0]));
        let s1 = tape.sum_rows(single);
        assert_eq!(tape.value(s1).data(), &[7.0, 8.0, 9.0]);
    }

    #[test]
    fn sum_rows_gradient_broadcasts() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Array::matrix(3, 2, vec![1.0; 6]));
        let s = tape.sum_rows(a);
        let w = tape.leaf(Array::vector(vec![2.0, 5.0]));
        let weighted = tape.mul(s, w);
        let loss = tape.sum_all(weighted);
        tape.backward(loss);
        let g = tape.grad(a).unwrap();
        for r in 0..3 {
            assert_eq!(g.row(r), &[2.0, 5.0]);
        }
    }

    #[test]
    fn matmul_gradient_matches_hand_result() {
        // loss = sum(A @ B): dA = row-sums of B broadcast, dB = col-sums of A.
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Array::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(Array::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(a, b);
        let loss = tape.sum_all(c);
        tape.backward(loss);
        let ga = tape.grad(a).unwrap();
        assert_eq!(ga.data(), &[11.0, 15.0, 11.0, 15.0]);
        let gb = tape.grad(b).unwrap();
        assert_eq!(gb.data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn unused_parameter_has_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(Array::scalar(1.0));
        let q = tape.leaf(Array::scalar(2.0));
        let loss = tape.mul(p, p);
        tape.backward(loss);
        assert!(tape.grad(q).is_none());
        assert_eq!(tape.grad_or_zeros(q).item(), 0.0);
    }

    #[test]
    #[should_panic(expected = "scalar loss")]
    fn backward_on_non_scalar_panics() {
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(Array::vector(vec![1.0, 2.0]));
        tape.backward(v);
    }

    #[test]
    #[should_panic(expected = "log of non-positive")]
    fn log_of_non_positive_panics() {
        let mut tape = Tape::<f64>::new();
        let v = tape.leaf(Array::vector(vec![1.0, -2.0]));
        tape.log(v);
    }

    #[test]
    fn attention_uniform_for_identical_tokens() {
        let mut tape = Tape::<f64>::new();
        let t = tape.leaf(Array::matrix(4, 4, vec![0.3; 16]));
        let o = tape.mhdpa(t, t, t, 2);
        let w = tape.mhdpa_weights(o);
        for v in w.data() {
            assert!(close(*v, 0.25, 1e-12));
        }
        // rows sum to one
        for r in 0..w.rows() {
            let s: f64 = w.row(r).iter().sum();
            assert!(close(s, 1.0, 1e-9));
        }
    }
}
