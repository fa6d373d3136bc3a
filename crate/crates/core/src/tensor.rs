//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a `1 x 1` loss walks the tape in reverse and returns
//! [`Gradients`] for every parameter leaf. Parameters live in a [`ParamStore`];
//! the tape copies their values in at first use so a store can be mutated by an
//! optimizer once the tape is dropped.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, Ordering};

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};

pub type Mat<T> = Array2<T>;

static NEXT_STORE_TAG: AtomicU32 = AtomicU32::new(1);

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Handle to a parameter inside a specific [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    store: u32,
    index: u32,
}

impl ParamId {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

/// Named, ordered collection of trainable matrices.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    tag: u32,
    names: Vec<String>,
    values: Vec<Mat<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tag: NEXT_STORE_TAG.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId {
            store: self.tag,
            index: (self.values.len() - 1) as u32,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(move |i| ParamId {
            store: self.tag,
            index: i as u32,
        })
    }

    pub fn get(&self, id: ParamId) -> &Mat<T> {
        debug_assert_eq!(id.store, self.tag, "parameter from another store");
        &self.values[id.index()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat<T> {
        debug_assert_eq!(id.store, self.tag, "parameter from another store");
        &mut self.values[id.index()]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.index()]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(|i| ParamId {
            store: self.tag,
            index: i as u32,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Copies values from a store with the same layout (e.g. a saved checkpoint).
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) {
        assert_eq!(self.names, other.names, "parameter layouts differ");
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            dst.assign(src);
        }
    }

    pub fn bit_equal(&self, other: &ParamStore<T>) -> bool {
        self.names == other.names
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.shape() == b.shape() && a.iter().zip(b).all(|(x, y)| x.to_bits_eq(*y)))
    }
}

trait BitEq {
    fn to_bits_eq(self, other: Self) -> bool;
}

impl<T: Scalar> BitEq for T {
    fn to_bits_eq(self, other: Self) -> bool {
        // Equal, or both NaN.
        self == other || (self.is_nan() && other.is_nan())
    }
}

/// Contiguous row groups, e.g. the atoms of each graph in a packed batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
}

impl Segments {
    pub fn from_lengths(lengths: impl IntoIterator<Item = usize>) -> Self {
        let mut offsets = vec![0];
        for len in lengths {
            let last = *offsets.last().unwrap();
            offsets.push(last + len);
        }
        Self { offsets }
    }

    pub fn single(len: usize) -> Self {
        Self::from_lengths([len])
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn range(&self, s: usize) -> std::ops::Range<usize> {
        self.offsets[s]..self.offsets[s + 1]
    }

    pub fn lengths(&self) -> impl Iterator<Item = usize> + '_ {
        self.offsets.windows(2).map(|w| w[1] - w[0])
    }
}

#[derive(Debug, Clone)]
struct AttentionSpec {
    heads: usize,
    q_segs: Segments,
    kv_segs: Segments,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Affine(Var, T),
    ScaleBy(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Ln(Var),
    Transpose(Var),
    Gather(Var, Vec<usize>),
    ScatterAdd(Var, Vec<usize>),
    SegmentMean(Var, Segments),
    RowNormalize(Var, Vec<T>),
    RowStandardize(Var, Vec<T>),
    RowSum(Var),
    SumAll(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: Box<AttentionSpec>,
        probs: Vec<Mat<T>>,
    },
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        counted: Vec<bool>,
        probs: Mat<T>,
    },
    BceLogits {
        logits: Var,
        labels: Mat<T>,
    },
    Mse {
        pred: Var,
        labels: Mat<T>,
    },
    SupCon {
        sim: Var,
        positives: Vec<Vec<usize>>,
        probs: Mat<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
    tracked: bool,
}

/// One forward pass worth of recorded operations.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    stable_sigmoid(x)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf for a stored parameter; repeated requests return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    /// Leaf for a parameter whose value is treated as a constant (no gradient).
    pub fn frozen(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.constant(store.get(id).clone())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::MatMul(a, b), tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let value = self.value(a) + self.value(b);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Add(a, b), tracked)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let value = self.value(a) * self.value(b);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Mul(a, b), tracked)
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1);
        assert_eq!(self.shape(a).1, self.shape(row).1, "add_row width mismatch");
        let value = self.value(a) + self.value(row);
        let tracked = self.tracked(a) || self.tracked(row);
        self.push(value, Op::AddRow(a, row), tracked)
    }

    /// Multiplies every row of `a` elementwise by a `1 x c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1);
        assert_eq!(self.shape(a).1, self.shape(row).1, "mul_row width mismatch");
        let value = self.value(a) * self.value(row);
        let tracked = self.tracked(a) || self.tracked(row);
        self.push(value, Op::MulRow(a, row), tracked)
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Var {
        let value = self.value(a).mapv(|x| scale * x + shift);
        let tracked = self.tracked(a);
        self.push(value, Op::Affine(a, scale), tracked)
    }

    pub fn scale(&mut self, a: Var, scale: T) -> Var {
        self.affine(a, scale, T::zero())
    }

    /// Multiplies `a` by the `1 x 1` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1));
        let k = self.scalar(s);
        let value = self.value(a).mapv(|x| x * k);
        let tracked = self.tracked(a) || self.tracked(s);
        self.push(value, Op::ScaleBy(a, s), tracked)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| if x > T::zero() { x } else { T::zero() });
        let tracked = self.tracked(a);
        self.push(value, Op::Relu(a), tracked)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(stable_sigmoid);
        let tracked = self.tracked(a);
        self.push(value, Op::Sigmoid(a), tracked)
    }

    /// `log(sigmoid(a))`, evaluated stably.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| -softplus(-x));
        let tracked = self.tracked(a);
        self.push(value, Op::LogSigmoid(a), tracked)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(T::ln);
        let tracked = self.tracked(a);
        self.push(value, Op::Ln(a), tracked)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let tracked = self.tracked(a);
        self.push(value, Op::Transpose(a), tracked)
    }

    /// Row `i` of the output is row `index[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Var {
        let src = self.value(a);
        let value = src.select(Axis(0), &index);
        let tracked = self.tracked(a);
        self.push(value, Op::Gather(a, index), tracked)
    }

    /// Sums row `i` of `a` into output row `index[i]`; output has `rows` rows.
    pub fn scatter_add_rows(&mut self, a: Var, index: Vec<usize>, rows: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.nrows(), index.len());
        let mut value = Mat::zeros((rows, src.ncols()));
        for (i, &dst) in index.iter().enumerate() {
            let mut out = value.row_mut(dst);
            out += &src.row(i);
        }
        let tracked = self.tracked(a);
        self.push(value, Op::ScatterAdd(a, index), tracked)
    }

    /// Mean of each segment's rows; one output row per segment.
    pub fn segment_mean(&mut self, a: Var, segs: &Segments) -> Var {
        let src = self.value(a);
        assert_eq!(src.nrows(), segs.total(), "segments do not cover rows");
        let mut value = Mat::zeros((segs.len(), src.ncols()));
        for s in 0..segs.len() {
            let r = segs.range(s);
            let n = r.len();
            assert!(n > 0, "empty segment");
            let mean = src
                .slice(s![r, ..])
                .sum_axis(Axis(0))
                .mapv(|x| x / c::<T>(n as f64));
            value.row_mut(s).assign(&mean);
        }
        let tracked = self.tracked(a);
        self.push(value, Op::SegmentMean(a, segs.clone()), tracked)
    }

    /// Scales each row to unit Euclidean norm.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let eps: T = c(1e-12);
        let src = self.value(a);
        let norms: Vec<T> = src
            .rows()
            .into_iter()
            .map(|r| (r.iter().map(|&x| x * x).sum::<T>() + eps).sqrt())
            .collect();
        let mut value = src.clone();
        for (mut row, &n) in value.rows_mut().into_iter().zip(&norms) {
            row.mapv_inplace(|x| x / n);
        }
        let tracked = self.tracked(a);
        self.push(value, Op::RowNormalize(a, norms), tracked)
    }

    /// Zero-mean, unit-variance rows (the affine-free core of layer norm).
    pub fn row_standardize(&mut self, a: Var) -> Var {
        let eps: T = c(1e-5);
        let src = self.value(a);
        let width = c::<T>(src.ncols() as f64);
        let mut value = src.clone();
        let mut inv_std = Vec::with_capacity(src.nrows());
        for mut row in value.rows_mut() {
            let mean = row.sum() / width;
            row.mapv_inplace(|x| x - mean);
            let var = row.iter().map(|&x| x * x).sum::<T>() / width;
            let inv = T::one() / (var + eps).sqrt();
            row.mapv_inplace(|x| x * inv);
            inv_std.push(inv);
        }
        let tracked = self.tracked(a);
        self.push(value, Op::RowStandardize(a, inv_std), tracked)
    }

    /// `n x 1` column of row sums.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let tracked = self.tracked(a);
        self.push(value, Op::RowSum(a), tracked)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        let tracked = self.tracked(a);
        self.push(value, Op::SumAll(a), tracked)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, T::one() / c(n as f64))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// Query rows in segment `s` attend only to key/value rows in segment `s`.
    /// With `causal`, query row `i` of a segment sees key rows `0..=i` of the same
    /// segment (segments must then have equal query and key lengths).
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        q_segs: &Segments,
        kv_segs: &Segments,
        heads: usize,
        causal: bool,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        assert_eq!(kv.ncols(), d);
        assert_eq!(vv.ncols(), d);
        assert_eq!(kv.nrows(), vv.nrows());
        assert_eq!(q_segs.len(), kv_segs.len(), "segment count mismatch");
        assert_eq!(qv.nrows(), q_segs.total());
        assert_eq!(kv.nrows(), kv_segs.total());
        assert!(heads > 0 && d % heads == 0, "width not divisible by heads");
        let dh = d / heads;
        let scale = T::one() / c::<T>(dh as f64).sqrt();
        let mut out = Mat::zeros((qv.nrows(), d));
        let mut probs = Vec::with_capacity(q_segs.len() * heads);
        for s in 0..q_segs.len() {
            let (qr, kr) = (q_segs.range(s), kv_segs.range(s));
            if causal {
                assert_eq!(qr.len(), kr.len(), "causal attention needs square segments");
            }
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qs = qv.slice(s![qr.clone(), cols.clone()]);
                let ks = kv.slice(s![kr.clone(), cols.clone()]);
                let vs = vv.slice(s![kr.clone(), cols.clone()]);
                let mut p = qs.dot(&ks.t());
                for (i, mut row) in p.rows_mut().into_iter().enumerate() {
                    let limit = if causal { i + 1 } else { row.len() };
                    let mut max = T::neg_infinity();
                    for j in 0..limit {
                        row[j] *= scale;
                        max = max.max(row[j]);
                    }
                    let mut total = T::zero();
                    for j in 0..row.len() {
                        if j < limit {
                            row[j] = (row[j] - max).exp();
                            total += row[j];
                        } else {
                            row[j] = T::zero();
                        }
                    }
                    row.mapv_inplace(|x| x / total);
                }
                out.slice_mut(s![qr.clone(), cols]).assign(&p.dot(&vs));
                probs.push(p);
            }
        }
        let tracked = self.tracked(q) || self.tracked(k) || self.tracked(v);
        let spec = Box::new(AttentionSpec {
            heads,
            q_segs: q_segs.clone(),
            kv_segs: kv_segs.clone(),
        });
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
            tracked,
        )
    }

    /// Mean next-token cross-entropy over rows whose target is not `ignore`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore: Option<usize>,
    ) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len(), "one target per logits row");
        let mut probs = lv.clone();
        let counted: Vec<bool> = targets.iter().map(|&t| Some(t) != ignore).collect();
        let n = counted.iter().filter(|&&b| b).count();
        let mut total = T::zero();
        for (i, mut row) in probs.rows_mut().into_iter().enumerate() {
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let z = row.sum();
            if counted[i] {
                let t = targets[i];
                assert!(t < row.len(), "target id out of range");
                total += z.ln() + max - lv[[i, t]];
            }
            row.mapv_inplace(|x| x / z);
        }
        let loss = if n > 0 { total / c(n as f64) } else { T::zero() };
        let tracked = self.tracked(logits);
        self.push(
            Mat::from_elem((1, 1), loss),
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                counted,
                probs,
            },
            tracked,
        )
    }

    /// Mean elementwise binary cross-entropy on logits.
    pub fn bce_with_logits(&mut self, logits: Var, labels: Mat<T>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.dim(), labels.dim(), "bce shape mismatch");
        let n = c::<T>(lv.len() as f64);
        let total = Zip::from(lv)
            .and(&labels)
            .fold(T::zero(), |acc, &x, &y| acc + softplus(x) - y * x);
        let tracked = self.tracked(logits);
        self.push(
            Mat::from_elem((1, 1), total / n),
            Op::BceLogits { logits, labels },
            tracked,
        )
    }

    pub fn mse(&mut self, pred: Var, labels: Mat<T>) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.dim(), labels.dim(), "mse shape mismatch");
        let n = c::<T>(pv.len() as f64);
        let total = Zip::from(pv)
            .and(&labels)
            .fold(T::zero(), |acc, &p, &y| acc + (p - y) * (p - y));
        let tracked = self.tracked(pred);
        self.push(
            Mat::from_elem((1, 1), total / n),
            Op::Mse { pred, labels },
            tracked,
        )
    }

    /// Supervised-contrastive loss on a precomputed `B x B` logit matrix.
    ///
    /// Row `i` contributes `-(1/|P_i|) sum_{j in P_i} log softmax_{k != i}(sim_i)_j`;
    /// rows with no positives are skipped and the result is the mean over the rest.
    /// `positives[i]` must not contain `i`.
    pub fn supcon(&mut self, sim: Var, positives: Vec<Vec<usize>>) -> Result<Var> {
        let sv = self.value(sim);
        let b = sv.nrows();
        assert_eq!(sv.ncols(), b, "similarity matrix must be square");
        assert_eq!(positives.len(), b);
        let valid = positives.iter().filter(|p| !p.is_empty()).count();
        if valid == 0 {
            return Err(Error::DegenerateBatch);
        }
        let mut probs = Mat::zeros((b, b));
        let mut total = T::zero();
        for i in 0..b {
            if positives[i].is_empty() {
                continue;
            }
            debug_assert!(!positives[i].contains(&i));
            let row = sv.row(i);
            let max = (0..b)
                .filter(|&k| k != i)
                .fold(T::neg_infinity(), |m, k| m.max(row[k]));
            let mut z = T::zero();
            for k in (0..b).filter(|&k| k != i) {
                let e = (row[k] - max).exp();
                probs[[i, k]] = e;
                z += e;
            }
            for k in 0..b {
                probs[[i, k]] /= z;
            }
            let lse = z.ln() + max;
            let mean_pos = positives[i].iter().map(|&j| row[j]).sum::<T>()
                / c(positives[i].len() as f64);
            total += lse - mean_pos;
        }
        let tracked = self.tracked(sim);
        Ok(self.push(
            Mat::from_elem((1, 1), total / c(valid as f64)),
            Op::SupCon {
                sim,
                positives,
                probs,
            },
            tracked,
        ))
    }

    /// Reverse pass from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let mut grads: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_elem((1, 1), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }

    fn accumulate(&self, grads: &mut [Option<Mat<T>>], v: Var, delta: Mat<T>) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Mat<T>, grads: &mut [Option<Mat<T>>]) {
        let val = |v: Var| self.value(v);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.tracked(*a) {
                    self.accumulate(grads, *a, g.dot(&val(*b).t()));
                }
                if self.tracked(*b) {
                    self.accumulate(grads, *b, val(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                if self.tracked(*a) {
                    self.accumulate(grads, *a, g * val(*b));
                }
                if self.tracked(*b) {
                    self.accumulate(grads, *b, g * val(*a));
                }
            }
            Op::AddRow(a, r) => {
                self.accumulate(grads, *a, g.clone());
                if self.tracked(*r) {
                    self.accumulate(grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, r) => {
                if self.tracked(*a) {
                    self.accumulate(grads, *a, g * val(*r));
                }
                if self.tracked(*r) {
                    let gr = (g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *r, gr);
                }
            }
            Op::Affine(a, scale) => {
                let k = *scale;
                self.accumulate(grads, *a, g.mapv(|x| x * k));
            }
            Op::ScaleBy(a, s) => {
                let k = self.scalar(*s);
                if self.tracked(*a) {
                    self.accumulate(grads, *a, g.mapv(|x| x * k));
                }
                if self.tracked(*s) {
                    let gs = Zip::from(g)
                        .and(val(*a))
                        .fold(T::zero(), |acc, &x, &y| acc + x * y);
                    self.accumulate(grads, *s, Mat::from_elem((1, 1), gs));
                }
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(*a)).for_each(|d, &x| {
                    if x <= T::zero() {
                        *d = T::zero();
                    }
                });
                self.accumulate(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(&node.value)
                    .for_each(|d, &y| *d = *d * y * (T::one() - y));
                self.accumulate(grads, *a, d);
            }
            Op::LogSigmoid(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(val(*a))
                    .for_each(|d, &x| *d *= stable_sigmoid(-x));
                self.accumulate(grads, *a, d);
            }
            Op::Ln(a) => {
                self.accumulate(grads, *a, g / val(*a));
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, g.t().to_owned());
            }
            Op::Gather(a, index) => {
                let mut d = Mat::zeros(val(*a).dim());
                for (i, &src) in index.iter().enumerate() {
                    let mut row = d.row_mut(src);
                    row += &g.row(i);
                }
                self.accumulate(grads, *a, d);
            }
            Op::ScatterAdd(a, index) => {
                let d = g.select(Axis(0), index);
                self.accumulate(grads, *a, d);
            }
            Op::SegmentMean(a, segs) => {
                let mut d = Mat::zeros(val(*a).dim());
                for s in 0..segs.len() {
                    let r = segs.range(s);
                    let inv = T::one() / c::<T>(r.len() as f64);
                    let gs = g.row(s).mapv(|x| x * inv);
                    for i in r {
                        d.row_mut(i).assign(&gs);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::RowNormalize(a, norms) => {
                let y = &node.value;
                let mut d = g.clone();
                for (i, mut row) in d.rows_mut().into_iter().enumerate() {
                    let yr = y.row(i);
                    let dot = yr.dot(&g.row(i));
                    let inv = T::one() / norms[i];
                    Zip::from(&mut row)
                        .and(&yr)
                        .for_each(|dv, &yv| *dv = (*dv - yv * dot) * inv);
                }
                self.accumulate(grads, *a, d);
            }
            Op::RowStandardize(a, inv_std) => {
                let y = &node.value;
                let width = c::<T>(y.ncols() as f64);
                let mut d = g.clone();
                for (i, mut row) in d.rows_mut().into_iter().enumerate() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let mean_g = gr.sum() / width;
                    let mean_gy = gr.dot(&yr) / width;
                    let inv = inv_std[i];
                    Zip::from(&mut row)
                        .and(&yr)
                        .for_each(|dv, &yv| *dv = (*dv - mean_g - yv * mean_gy) * inv);
                }
                self.accumulate(grads, *a, d);
            }
            Op::RowSum(a) => {
                let shape = val(*a).dim();
                let d = Mat::from_shape_fn(shape, |(i, _)| g[[i, 0]]);
                self.accumulate(grads, *a, d);
            }
            Op::SumAll(a) => {
                let k = g[[0, 0]];
                self.accumulate(grads, *a, Mat::from_elem(val(*a).dim(), k));
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => self.attention_backward(*q, *k, *v, spec, probs, g, grads),
            Op::SoftmaxXent {
                logits,
                targets,
                counted,
                probs,
            } => {
                let n = counted.iter().filter(|&&b| b).count();
                let mut d = Mat::zeros(probs.dim());
                if n > 0 {
                    let k = g[[0, 0]] / c(n as f64);
                    for (i, mut row) in d.rows_mut().into_iter().enumerate() {
                        if !counted[i] {
                            continue;
                        }
                        row.assign(&probs.row(i));
                        row[targets[i]] -= T::one();
                        row.mapv_inplace(|x| x * k);
                    }
                }
                self.accumulate(grads, *logits, d);
            }
            Op::BceLogits { logits, labels } => {
                let k = g[[0, 0]] / c(labels.len() as f64);
                let mut d = val(*logits).mapv(stable_sigmoid);
                Zip::from(&mut d)
                    .and(labels)
                    .for_each(|d, &y| *d = (*d - y) * k);
                self.accumulate(grads, *logits, d);
            }
            Op::Mse { pred, labels } => {
                let k = g[[0, 0]] * c(2.0) / c(labels.len() as f64);
                let mut d = val(*pred).clone();
                Zip::from(&mut d)
                    .and(labels)
                    .for_each(|d, &y| *d = (*d - y) * k);
                self.accumulate(grads, *pred, d);
            }
            Op::SupCon {
                sim,
                positives,
                probs,
            } => {
                let valid = positives.iter().filter(|p| !p.is_empty()).count();
                let k = g[[0, 0]] / c(valid as f64);
                let mut d = Mat::zeros(probs.dim());
                for (i, pos) in positives.iter().enumerate() {
                    if pos.is_empty() {
                        continue;
                    }
                    let mut row = d.row_mut(i);
                    row.assign(&probs.row(i));
                    let share = T::one() / c(pos.len() as f64);
                    for &j in pos {
                        row[j] -= share;
                    }
                    row.mapv_inplace(|x| x * k);
                }
                self.accumulate(grads, *sim, d);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        probs: &[Mat<T>],
        g: &Mat<T>,
        grads: &mut [Option<Mat<T>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        let dh = d / spec.heads;
        let scale = T::one() / c::<T>(dh as f64).sqrt();
        let mut dq = Mat::zeros(qv.dim());
        let mut dk = Mat::zeros(kv.dim());
        let mut dv = Mat::zeros(vv.dim());
        for s in 0..spec.q_segs.len() {
            let (qr, kr) = (spec.q_segs.range(s), spec.kv_segs.range(s));
            for h in 0..spec.heads {
                let p = &probs[s * spec.heads + h];
                let cols = h * dh..(h + 1) * dh;
                let qs = qv.slice(s![qr.clone(), cols.clone()]);
                let ks = kv.slice(s![kr.clone(), cols.clone()]);
                let vs = vv.slice(s![kr.clone(), cols.clone()]);
                let go: ArrayView2<T> = g.slice(s![qr.clone(), cols.clone()]);
                let mut dvs = dv.slice_mut(s![kr.clone(), cols.clone()]);
                dvs += &p.t().dot(&go);
                let dp = go.dot(&vs.t());
                let mut ds = dp.clone();
                for (i, mut row) in ds.rows_mut().into_iter().enumerate() {
                    let pr = p.row(i);
                    let inner = pr.dot(&dp.row(i));
                    Zip::from(&mut row)
                        .and(&pr)
                        .for_each(|x, &pv| *x = pv * (*x - inner) * scale);
                }
                let mut dqs = dq.slice_mut(s![qr.clone(), cols.clone()]);
                dqs += &ds.dot(&ks);
                let mut dks = dk.slice_mut(s![kr.clone(), cols]);
                dks += &ds.t().dot(&qs);
            }
        }
        self.accumulate(grads, q, dq);
        self.accumulate(grads, k, dk);
        self.accumulate(grads, v, dv);
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Mat<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to any tracked node (zeros-equivalent `None` when unreached).
    pub fn wrt(&self, v: Var) -> Option<&Mat<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Mat<T>> {
        self.params.get(&id).and_then(|v| self.wrt(*v))
    }

    /// Global L2 norm over every parameter gradient.
    pub fn param_norm(&self) -> T {
        self.params
            .values()
            .filter_map(|v| self.wrt(*v))
            .map(|m| m.iter().map(|&x| x * x).sum::<T>())
            .sum::<T>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .values()
            .filter_map(|v| self.wrt(*v))
            .all(|m| m.iter().all(|x| x.is_finite()))
    }
}
