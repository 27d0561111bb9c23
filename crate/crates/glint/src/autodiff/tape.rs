use super::penc::PosEnc;
use super::real::Real;
use super::tensor::{matmul, matmul_bt, matmul_tn, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(u32);

impl NodeId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

/// Tape op.  Input ids come first; aux data after.  Values are computed
/// eagerly at emission (define-by-run), so shapes are checked immediately.
/// Some aux fields are only consulted by the forward constructor; they stay
/// in the variant so `Debug` dumps of a tape read sensibly.
#[derive(Clone, Debug)]
#[allow(dead_code)]
enum Op<T> {
    Leaf { grad: bool },

    // elementwise, same shape
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),

    // elementwise with constants
    AddConst(NodeId, f64),
    ScaleConst(NodeId, f64),
    Clamp(NodeId, f64, f64),

    // nonlinearities
    Relu(NodeId),
    /// Heaviside step of the input; derivative of ReLU.  Gradient is zero
    /// (the second derivative of ReLU vanishes a.e.), which is exactly what
    /// emitted input-gradient chains require.
    StepPos(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId, f64),
    Exp(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    Abs(NodeId),
    /// Linear-to-display transfer (sRGB-style gamma, saturating at [0,1]).
    Tonemap(NodeId),

    // linear algebra
    MatMul(NodeId, NodeId),
    MatMulBT(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    MulCol(NodeId, NodeId),
    DivCol(NodeId, NodeId),
    ScalarMul(NodeId, NodeId),

    // shape plumbing
    Concat(Box<[NodeId]>),
    SliceCols(NodeId, usize, usize),
    GatherRows(NodeId, std::sync::Arc<Vec<u32>>),
    RowSum(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    BroadcastCol(NodeId, usize),
    RepeatRow(NodeId, usize),

    // fixed-length ray segments (rows grouped in blocks of `seg`)
    SegShiftNext(NodeId, usize),
    SegCumprodExcl(NodeId, usize),
    SegSum(NodeId, usize),

    // per-row blocks of 3 columns (K lobes of RGB/axis data)
    BlockDot(NodeId, NodeId),
    BlockMulK(NodeId, NodeId),
    BlockSumK(NodeId),
    BlockNorm(NodeId, f64),

    /// Positional encoding as a differentiable op (for on-tape inputs such as
    /// normals; constant inputs are encoded outside the tape instead).
    PosEncode(NodeId, PosEnc),

    /// Input-gradient chain through a positional encoding: maps encoded-space
    /// deltas (N×E) to raw-input space (N×D) using the PE Jacobian at the
    /// (constant) evaluation points.
    PeBackward(NodeId, Tensor<T>, PosEnc),

    /// Fitted hemispherical cosine integral of a unit lobe:
    /// out[n,k] = irradiance(lambda[0,k], cosang[n,k]); see sg::fitted_irradiance.
    SgIrradiance(NodeId, NodeId),
}

pub struct Tape<T: Real> {
    vals: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    needs: Vec<bool>,
}

pub struct Grads<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.idx()].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads[id.idx()].take()
    }
}

fn accum<T: Real>(slot: &mut Option<Tensor<T>>, delta: Tensor<T>) {
    match slot {
        Some(t) => t.add_scaled(&delta, T::one()),
        None => *slot = Some(delta),
    }
}

/// Stable softplus with slope parameter: ln(1 + e^{βx})/β.
fn softplus_stable<T: Real>(x: T, beta: f64) -> T {
    let b = T::of_f64(beta);
    let bx = b * x;
    if bx > T::of_f64(20.0) {
        x
    } else {
        (bx.exp().ln_1p()) / b
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    let one = T::one();
    if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

pub(crate) const SRGB_LINEAR_KNEE: f64 = 0.003_130_8;

pub(crate) fn tonemap_scalar<T: Real>(u: T) -> T {
    let knee = T::of_f64(SRGB_LINEAR_KNEE);
    let v = if u <= knee {
        u * T::of_f64(12.92)
    } else {
        T::of_f64(1.055) * u.powf(T::of_f64(1.0 / 2.4)) - T::of_f64(0.055)
    };
    v.max(T::zero()).min(T::one())
}

fn tonemap_deriv<T: Real>(u: T) -> T {
    let knee = T::of_f64(SRGB_LINEAR_KNEE);
    if u <= T::zero() || u >= T::one() {
        T::zero()
    } else if u <= knee {
        T::of_f64(12.92)
    } else {
        T::of_f64(1.055 / 2.4) * u.powf(T::of_f64(1.0 / 2.4 - 1.0))
    }
}

/// Forward piece of the fused irradiance op, shared with the backward pass.
/// Returns (out, d_out/d_cos, d_out/d_lambda).
fn irradiance_parts(lambda: f64, c: f64) -> (f64, f64, f64) {
    const C0: f64 = 0.36;
    const C1: f64 = 1.0 / (4.0 * C0);
    const TWO_PI: f64 = 2.0 * std::f64::consts::PI;
    let l = lambda;
    let eml = (-l).exp();
    let em2l = eml * eml;
    let rl = 1.0 / l;
    let scale = 1.0 + 2.0 * em2l - rl;
    let bias = (eml - em2l) * rl - em2l;
    let dscale = -4.0 * em2l + rl * rl;
    let dbias = (-eml + 2.0 * em2l) * rl - (eml - em2l) * rl * rl + 2.0 * em2l;
    let x = (1.0 - scale).max(0.0).sqrt().max(1e-9);
    let dx = -dscale / (2.0 * x);
    let x0 = C0 * c;
    let x1 = C1 * x;
    let (y, dy_dc, dy_dx) = if x0.abs() <= x1 {
        let s = x0 + x1;
        (s * s / x, 2.0 * s * C0 / x, s * (x1 - x0) / (x * x))
    } else {
        (c.clamp(0.0, 1.0), if c > 0.0 && c < 1.0 { 1.0 } else { 0.0 }, 0.0)
    };
    let pre = scale * y + bias;
    if pre <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let out = pre * TWO_PI * rl;
    let dout_dc = scale * dy_dc * TWO_PI * rl;
    let dpre_dl = dscale * y + scale * dy_dx * dx + dbias;
    let dout_dl = (dpre_dl * rl - pre * rl * rl) * TWO_PI;
    (out, dout_dc, dout_dl)
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Tape<T> {
        Tape { vals: Vec::new(), ops: Vec::new(), needs: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn val(&self, id: NodeId) -> &Tensor<T> {
        &self.vals[id.idx()]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs: bool) -> NodeId {
        let id = NodeId(self.vals.len() as u32);
        self.vals.push(value);
        self.ops.push(op);
        self.needs.push(needs);
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.needs[id.idx()]
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Leaf { grad: true }, true)
    }

    /// Constant leaf; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Leaf { grad: false }, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.vals[a.idx()].zip_map(&self.vals[b.idx()], |x, y| x + y);
        self.push(v, Op::Add(a, b), self.needs(a) || self.needs(b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.vals[a.idx()].zip_map(&self.vals[b.idx()], |x, y| x - y);
        self.push(v, Op::Sub(a, b), self.needs(a) || self.needs(b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.vals[a.idx()].zip_map(&self.vals[b.idx()], |x, y| x * y);
        self.push(v, Op::Mul(a, b), self.needs(a) || self.needs(b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.vals[a.idx()].zip_map(&self.vals[b.idx()], |x, y| x / y);
        self.push(v, Op::Div(a, b), self.needs(a) || self.needs(b))
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.vals[a.idx()].map(|x| x + T::of_f64(c));
        self.push(v, Op::AddConst(a, c), self.needs(a))
    }

    pub fn scale_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.vals[a.idx()].map(|x| x * T::of_f64(c));
        self.push(v, Op::ScaleConst(a, c), self.needs(a))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale_const(a, -1.0)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let (tl, th) = (T::of_f64(lo), T::of_f64(hi));
        let v = self.vals[a.idx()].map(|x| x.max(tl).min(th));
        self.push(v, Op::Clamp(a, lo, hi), self.needs(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a.idx()].map(|x| x.max(T::zero()));
        self.push(v, Op::Relu(a), self.needs(a))
    }

    pub fn step_pos(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a.idx()].map(|x| if x > T::zero() { T::one() } else { T::zero() });
        self.push(v, Op::StepPos(a), self.needs(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a.idx()].map(sigmoid);
        self.push(v, Op::Sigmoid(a), self.needs(a))
    }

    pub fn softplus(&mut self, a: NodeId, beta: f64) -> NodeId {
        let v = self.vals[a.idx()].map(|x| softplus_stable(x, beta));
        self.push(v, Op::Softplus(a, beta), self.needs(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a.idx()].map(|x| x.exp());
        self.push(v, Op::Exp(a), self.needs(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a.idx()].map(|x| x.max(T::zero()).sqrt());
        self.push(v, Op::Sqrt(a), self.needs(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a.idx()].map(|x| x * x);
        self.push(v, Op::Square(a), self.needs(a))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a.idx()].map(|x| x.abs());
        self.push(v, Op::Abs(a), self.needs(a))
    }

    pub fn tonemap(&mut self, a: NodeId) -> NodeId {
        let v = self.vals[a.idx()].map(tonemap_scalar);
        self.push(v, Op::Tonemap(a), self.needs(a))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul(&self.vals[a.idx()], &self.vals[b.idx()]);
        self.push(v, Op::MatMul(a, b), self.needs(a) || self.needs(b))
    }

    /// a (N×K) · b(M×K)ᵀ → N×M; the natural shape for `x · Wᵀ` layers.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul_bt(&self.vals[a.idx()], &self.vals[b.idx()]);
        self.push(v, Op::MatMulBT(a, b), self.needs(a) || self.needs(b))
    }

    /// Broadcast-add a 1×D bias row to an N×D tensor.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (av, bv) = (&self.vals[a.idx()], &self.vals[bias.idx()]);
        assert_eq!(bv.rows(), 1, "bias must be a row");
        assert_eq!(av.cols(), bv.cols(), "bias width mismatch");
        let mut v = av.clone();
        let cols = v.cols();
        let bd: Vec<T> = bv.data().to_vec();
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x += bd[i % cols];
        }
        self.push(v, Op::AddRow(a, bias), self.needs(a) || self.needs(bias))
    }

    /// Elementwise multiply N×D by a broadcast 1×D row.
    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (av, rv) = (&self.vals[a.idx()], &self.vals[row.idx()]);
        assert_eq!(rv.rows(), 1);
        assert_eq!(av.cols(), rv.cols());
        let mut v = av.clone();
        let cols = v.cols();
        let rd: Vec<T> = rv.data().to_vec();
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x *= rd[i % cols];
        }
        self.push(v, Op::MulRow(a, row), self.needs(a) || self.needs(row))
    }

    /// Elementwise multiply N×D by a broadcast N×1 column.
    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> NodeId {
        let (av, cv) = (&self.vals[a.idx()], &self.vals[col.idx()]);
        assert_eq!(cv.cols(), 1);
        assert_eq!(av.rows(), cv.rows());
        let cols = av.cols();
        let mut v = av.clone();
        let cd: Vec<T> = cv.data().to_vec();
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x *= cd[i / cols];
        }
        self.push(v, Op::MulCol(a, col), self.needs(a) || self.needs(col))
    }

    /// Elementwise divide N×D by a broadcast N×1 column.
    pub fn div_col(&mut self, a: NodeId, col: NodeId) -> NodeId {
        let (av, cv) = (&self.vals[a.idx()], &self.vals[col.idx()]);
        assert_eq!(cv.cols(), 1);
        assert_eq!(av.rows(), cv.rows());
        let cols = av.cols();
        let mut v = av.clone();
        let cd: Vec<T> = cv.data().to_vec();
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x /= cd[i / cols];
        }
        self.push(v, Op::DivCol(a, col), self.needs(a) || self.needs(col))
    }

    /// Multiply every element by a 1×1 scalar node.
    pub fn scalar_mul(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let sv = &self.vals[s.idx()];
        assert_eq!(sv.shape(), (1, 1), "scalar node must be 1×1");
        let sc = sv.get(0, 0);
        let v = self.vals[a.idx()].map(|x| x * sc);
        self.push(v, Op::ScalarMul(a, s), self.needs(a) || self.needs(s))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.vals[parts[0].idx()].rows();
        let total: usize = parts.iter().map(|p| self.vals[p.idx()].cols()).sum();
        let mut v = Tensor::zeros(rows, total);
        {
            let vd = v.data_mut();
            let mut at = 0usize;
            for p in parts {
                let pv = &self.vals[p.idx()];
                assert_eq!(pv.rows(), rows, "concat row mismatch");
                let c = pv.cols();
                for r in 0..rows {
                    vd[r * total + at..r * total + at + c].copy_from_slice(pv.row(r));
                }
                at += c;
            }
        }
        let needs = parts.iter().any(|p| self.needs(*p));
        self.push(v, Op::Concat(parts.to_vec().into_boxed_slice()), needs)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let av = &self.vals[a.idx()];
        assert!(start + len <= av.cols(), "slice out of range");
        let rows = av.rows();
        let mut v = Tensor::zeros(rows, len);
        {
            let vd = v.data_mut();
            for r in 0..rows {
                vd[r * len..(r + 1) * len].copy_from_slice(&av.row(r)[start..start + len]);
            }
        }
        self.push(v, Op::SliceCols(a, start, len), self.needs(a))
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: std::sync::Arc<Vec<u32>>) -> NodeId {
        let av = &self.vals[a.idx()];
        let cols = av.cols();
        let mut v = Tensor::zeros(idx.len(), cols);
        {
            let vd = v.data_mut();
            for (r, &src) in idx.iter().enumerate() {
                vd[r * cols..(r + 1) * cols].copy_from_slice(av.row(src as usize));
            }
        }
        self.push(v, Op::GatherRows(a, idx), self.needs(a))
    }

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let av = &self.vals[a.idx()];
        let mut v = Tensor::zeros(av.rows(), 1);
        {
            let vd = v.data_mut();
            for r in 0..av.rows() {
                let mut acc = T::zero();
                for &x in av.row(r) {
                    acc += x;
                }
                vd[r] = acc;
            }
        }
        self.push(v, Op::RowSum(a), self.needs(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.vals[a.idx()].sum());
        self.push(v, Op::SumAll(a), self.needs(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let av = &self.vals[a.idx()];
        let n = T::of_f64(av.len() as f64);
        let v = Tensor::scalar(av.sum() / n);
        self.push(v, Op::MeanAll(a), self.needs(a))
    }

    pub fn broadcast_col(&mut self, a: NodeId, k: usize) -> NodeId {
        let av = &self.vals[a.idx()];
        assert_eq!(av.cols(), 1, "broadcast_col expects N×1");
        let rows = av.rows();
        let mut v = Tensor::zeros(rows, k);
        {
            let ad: Vec<T> = av.data().to_vec();
            let vd = v.data_mut();
            for r in 0..rows {
                for c in 0..k {
                    vd[r * k + c] = ad[r];
                }
            }
        }
        self.push(v, Op::BroadcastCol(a, k), self.needs(a))
    }

    pub fn repeat_row(&mut self, a: NodeId, n: usize) -> NodeId {
        let av = &self.vals[a.idx()];
        assert_eq!(av.rows(), 1, "repeat_row expects 1×D");
        let cols = av.cols();
        let mut v = Tensor::zeros(n, cols);
        {
            let ad: Vec<T> = av.data().to_vec();
            let vd = v.data_mut();
            for r in 0..n {
                vd[r * cols..(r + 1) * cols].copy_from_slice(&ad);
            }
        }
        self.push(v, Op::RepeatRow(a, n), self.needs(a))
    }

    /// out[i] = a[i+1] within each length-`seg` block; the block's last row
    /// repeats itself (so differences against the shifted value vanish there).
    pub fn seg_shift_next(&mut self, a: NodeId, seg: usize) -> NodeId {
        let av = &self.vals[a.idx()];
        assert_eq!(av.cols(), 1, "segment ops run on columns");
        assert_eq!(av.rows() % seg, 0, "rows must be a multiple of the segment length");
        let rows = av.rows();
        let mut v = Tensor::zeros(rows, 1);
        {
            let ad: Vec<T> = av.data().to_vec();
            let vd = v.data_mut();
            for i in 0..rows {
                let next = if (i + 1) % seg == 0 { i } else { i + 1 };
                vd[i] = ad[next];
            }
        }
        self.push(v, Op::SegShiftNext(a, seg), self.needs(a))
    }

    /// Exclusive cumulative product within each length-`seg` block:
    /// out[0] = 1, out[i] = Π_{j<i} a[j].
    pub fn seg_cumprod_excl(&mut self, a: NodeId, seg: usize) -> NodeId {
        let av = &self.vals[a.idx()];
        assert_eq!(av.cols(), 1);
        assert_eq!(av.rows() % seg, 0);
        let rows = av.rows();
        let mut v = Tensor::zeros(rows, 1);
        {
            let ad: Vec<T> = av.data().to_vec();
            let vd = v.data_mut();
            for b in (0..rows).step_by(seg) {
                let mut run = T::one();
                for i in 0..seg {
                    vd[b + i] = run;
                    run *= ad[b + i];
                }
            }
        }
        self.push(v, Op::SegCumprodExcl(a, seg), self.needs(a))
    }

    /// (R·seg × D) → (R × D), summing each block of `seg` rows.
    pub fn seg_sum(&mut self, a: NodeId, seg: usize) -> NodeId {
        let av = &self.vals[a.idx()];
        assert_eq!(av.rows() % seg, 0);
        let out_rows = av.rows() / seg;
        let cols = av.cols();
        let mut v = Tensor::zeros(out_rows, cols);
        {
            let vd = v.data_mut();
            for r in 0..out_rows {
                for i in 0..seg {
                    let src = av.row(r * seg + i);
                    for c in 0..cols {
                        vd[r * cols + c] += src[c];
                    }
                }
            }
        }
        self.push(v, Op::SegSum(a, seg), self.needs(a))
    }

    /// out[n,k] = Σ_t a[n,3k+t]·b[n,t] for a: N×3K, b: N×3.
    pub fn block_dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.vals[a.idx()], &self.vals[b.idx()]);
        assert_eq!(bv.cols(), 3);
        assert_eq!(av.rows(), bv.rows());
        assert_eq!(av.cols() % 3, 0);
        let k = av.cols() / 3;
        let mut v = Tensor::zeros(av.rows(), k);
        {
            let vd = v.data_mut();
            for r in 0..av.rows() {
                let ar = av.row(r);
                let br = bv.row(r);
                for kk in 0..k {
                    vd[r * k + kk] =
                        ar[3 * kk] * br[0] + ar[3 * kk + 1] * br[1] + ar[3 * kk + 2] * br[2];
                }
            }
        }
        self.push(v, Op::BlockDot(a, b), self.needs(a) || self.needs(b))
    }

    /// out[n,3k+t] = a[n,3k+t]·w[n,k] for a: N×3K, w: N×K.
    pub fn block_mul_k(&mut self, a: NodeId, w: NodeId) -> NodeId {
        let (av, wv) = (&self.vals[a.idx()], &self.vals[w.idx()]);
        assert_eq!(av.rows(), wv.rows());
        assert_eq!(av.cols(), wv.cols() * 3);
        let k = wv.cols();
        let mut v = av.clone();
        {
            let vd = v.data_mut();
            for r in 0..wv.rows() {
                let wr: Vec<T> = wv.row(r).to_vec();
                for kk in 0..k {
                    for t in 0..3 {
                        vd[r * 3 * k + 3 * kk + t] *= wr[kk];
                    }
                }
            }
        }
        self.push(v, Op::BlockMulK(a, w), self.needs(a) || self.needs(w))
    }

    /// out[n,t] = Σ_k a[n,3k+t] for a: N×3K.
    pub fn block_sum_k(&mut self, a: NodeId) -> NodeId {
        let av = &self.vals[a.idx()];
        assert_eq!(av.cols() % 3, 0);
        let k = av.cols() / 3;
        let mut v = Tensor::zeros(av.rows(), 3);
        {
            let vd = v.data_mut();
            for r in 0..av.rows() {
                let ar = av.row(r);
                for kk in 0..k {
                    for t in 0..3 {
                        vd[r * 3 + t] += ar[3 * kk + t];
                    }
                }
            }
        }
        self.push(v, Op::BlockSumK(a), self.needs(a))
    }

    /// out[n,k] = sqrt(Σ_t a[n,3k+t]² + eps) for a: N×3K.
    pub fn block_norm(&mut self, a: NodeId, eps: f64) -> NodeId {
        let av = &self.vals[a.idx()];
        assert_eq!(av.cols() % 3, 0);
        let k = av.cols() / 3;
        let te = T::of_f64(eps);
        let mut v = Tensor::zeros(av.rows(), k);
        {
            let vd = v.data_mut();
            for r in 0..av.rows() {
                let ar = av.row(r);
                for kk in 0..k {
                    let (x, y, z) = (ar[3 * kk], ar[3 * kk + 1], ar[3 * kk + 2]);
                    vd[r * k + kk] = (x * x + y * y + z * z + te).sqrt();
                }
            }
        }
        self.push(v, Op::BlockNorm(a, eps), self.needs(a))
    }

    pub fn pos_encode(&mut self, a: NodeId, enc: PosEnc) -> NodeId {
        let av = &self.vals[a.idx()];
        assert_eq!(av.cols(), enc.dim);
        let v = enc.encode(av);
        self.push(v, Op::PosEncode(a, enc), self.needs(a))
    }

    /// Map encoded-space deltas back through the PE Jacobian at constant
    /// evaluation points `x` (N×D raw inputs).
    pub fn pe_backward(&mut self, delta: NodeId, x: Tensor<T>, enc: PosEnc) -> NodeId {
        let dv = &self.vals[delta.idx()];
        assert_eq!(dv.cols(), enc.encoded_dim());
        assert_eq!(dv.rows(), x.rows());
        let v = enc.apply_jacobian_t(&x, dv);
        self.push(v, Op::PeBackward(delta, x, enc), self.needs(delta))
    }

    /// Fitted hemispherical cosine integral per (row, lobe):
    /// lam is 1×K (shared across rows) or N×K (per-row), cosang is N×K.
    pub fn sg_irradiance(&mut self, lam: NodeId, cosang: NodeId) -> NodeId {
        let (lv, cv) = (&self.vals[lam.idx()], &self.vals[cosang.idx()]);
        assert!(lv.rows() == 1 || lv.rows() == cv.rows());
        assert_eq!(lv.cols(), cv.cols());
        let k = cv.cols();
        let mut v = Tensor::zeros(cv.rows(), k);
        {
            let vd = v.data_mut();
            for r in 0..cv.rows() {
                let lr = if lv.rows() == 1 { 0 } else { r };
                for c in 0..k {
                    let (out, _, _) =
                        irradiance_parts(lv.get(lr, c).as_f64(), cv.get(r, c).as_f64());
                    vd[r * k + c] = T::of_f64(out);
                }
            }
        }
        self.push(v, Op::SgIrradiance(lam, cosang), self.needs(lam) || self.needs(cosang))
    }

    /// Reverse pass from a 1×1 loss node.
    pub fn backward(&self, loss: NodeId) -> Grads<T> {
        assert_eq!(self.vals[loss.idx()].shape(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.vals.len()];
        grads[loss.idx()] = Some(Tensor::filled(1, 1, T::one()));

        for i in (0..self.ops.len()).rev() {
            if !self.needs[i] {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_op(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn backward_op(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let needs = |id: NodeId| self.needs[id.idx()];
        match &self.ops[i] {
            Op::Leaf { .. } => {}

            Op::Add(a, b) => {
                if needs(*a) {
                    accum(&mut grads[a.idx()], g.clone());
                }
                if needs(*b) {
                    accum(&mut grads[b.idx()], g.clone());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accum(&mut grads[a.idx()], g.clone());
                }
                if needs(*b) {
                    accum(&mut grads[b.idx()], g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    accum(&mut grads[a.idx()], g.zip_map(&self.vals[b.idx()], |x, y| x * y));
                }
                if needs(*b) {
                    accum(&mut grads[b.idx()], g.zip_map(&self.vals[a.idx()], |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                let bv = &self.vals[b.idx()];
                if needs(*a) {
                    accum(&mut grads[a.idx()], g.zip_map(bv, |x, y| x / y));
                }
                if needs(*b) {
                    let out = &self.vals[i];
                    let mut d = g.zip_map(out, |x, o| x * o);
                    d = d.zip_map(bv, |x, y| -(x / y));
                    accum(&mut grads[b.idx()], d);
                }
            }

            Op::AddConst(a, _) => {
                if needs(*a) {
                    accum(&mut grads[a.idx()], g.clone());
                }
            }
            Op::ScaleConst(a, c) => {
                if needs(*a) {
                    let c = T::of_f64(*c);
                    accum(&mut grads[a.idx()], g.map(|x| x * c));
                }
            }
            Op::Clamp(a, lo, hi) => {
                if needs(*a) {
                    let (lo, hi) = (T::of_f64(*lo), T::of_f64(*hi));
                    let av = &self.vals[a.idx()];
                    accum(
                        &mut grads[a.idx()],
                        g.zip_map(av, |x, v| if v > lo && v < hi { x } else { T::zero() }),
                    );
                }
            }

            Op::Relu(a) => {
                if needs(*a) {
                    let av = &self.vals[a.idx()];
                    accum(
                        &mut grads[a.idx()],
                        g.zip_map(av, |x, v| if v > T::zero() { x } else { T::zero() }),
                    );
                }
            }
            Op::StepPos(_) => {}
            Op::Sigmoid(a) => {
                if needs(*a) {
                    let out = &self.vals[i];
                    accum(&mut grads[a.idx()], g.zip_map(out, |x, o| x * o * (T::one() - o)));
                }
            }
            Op::Softplus(a, beta) => {
                if needs(*a) {
                    let b = T::of_f64(*beta);
                    let av = &self.vals[a.idx()];
                    accum(&mut grads[a.idx()], g.zip_map(av, |x, v| x * sigmoid(b * v)));
                }
            }
            Op::Exp(a) => {
                if needs(*a) {
                    let out = &self.vals[i];
                    accum(&mut grads[a.idx()], g.zip_map(out, |x, o| x * o));
                }
            }
            Op::Sqrt(a) => {
                if needs(*a) {
                    let out = &self.vals[i];
                    let half = T::of_f64(0.5);
                    let tiny = T::of_f64(1e-20);
                    accum(
                        &mut grads[a.idx()],
                        g.zip_map(out, |x, o| if o > tiny { x * half / o } else { T::zero() }),
                    );
                }
            }
            Op::Square(a) => {
                if needs(*a) {
                    let av = &self.vals[a.idx()];
                    let two = T::of_f64(2.0);
                    accum(&mut grads[a.idx()], g.zip_map(av, |x, v| x * two * v));
                }
            }
            Op::Abs(a) => {
                if needs(*a) {
                    let av = &self.vals[a.idx()];
                    accum(
                        &mut grads[a.idx()],
                        g.zip_map(av, |x, v| {
                            if v > T::zero() {
                                x
                            } else if v < T::zero() {
                                -x
                            } else {
                                T::zero()
                            }
                        }),
                    );
                }
            }
            Op::Tonemap(a) => {
                if needs(*a) {
                    let av = &self.vals[a.idx()];
                    accum(&mut grads[a.idx()], g.zip_map(av, |x, v| x * tonemap_deriv(v)));
                }
            }

            Op::MatMul(a, b) => {
                if needs(*a) {
                    accum(&mut grads[a.idx()], matmul_bt(g, &self.vals[b.idx()]));
                }
                if needs(*b) {
                    accum(&mut grads[b.idx()], matmul_tn(&self.vals[a.idx()], g));
                }
            }
            Op::MatMulBT(a, b) => {
                if needs(*a) {
                    accum(&mut grads[a.idx()], matmul(g, &self.vals[b.idx()]));
                }
                if needs(*b) {
                    accum(&mut grads[b.idx()], matmul_tn(g, &self.vals[a.idx()]));
                }
            }
            Op::AddRow(a, bias) => {
                if needs(*a) {
                    accum(&mut grads[a.idx()], g.clone());
                }
                if needs(*bias) {
                    let cols = g.cols();
                    let mut d = Tensor::zeros(1, cols);
                    {
                        let dd = d.data_mut();
                        for r in 0..g.rows() {
                            for (c, dv) in dd.iter_mut().enumerate() {
                                *dv += g.get(r, c);
                            }
                        }
                    }
                    accum(&mut grads[bias.idx()], d);
                }
            }
            Op::MulRow(a, row) => {
                let rv = &self.vals[row.idx()];
                if needs(*a) {
                    let cols = g.cols();
                    let rd: Vec<T> = rv.data().to_vec();
                    let mut d = g.clone();
                    for (idx, x) in d.data_mut().iter_mut().enumerate() {
                        *x *= rd[idx % cols];
                    }
                    accum(&mut grads[a.idx()], d);
                }
                if needs(*row) {
                    let av = &self.vals[a.idx()];
                    let cols = g.cols();
                    let mut d = Tensor::zeros(1, cols);
                    {
                        let dd = d.data_mut();
                        for r in 0..g.rows() {
                            for c in 0..cols {
                                dd[c] += g.get(r, c) * av.get(r, c);
                            }
                        }
                    }
                    accum(&mut grads[row.idx()], d);
                }
            }
            Op::MulCol(a, col) => {
                let cv = &self.vals[col.idx()];
                if needs(*a) {
                    let cols = g.cols();
                    let cd: Vec<T> = cv.data().to_vec();
                    let mut d = g.clone();
                    for (idx, x) in d.data_mut().iter_mut().enumerate() {
                        *x *= cd[idx / cols];
                    }
                    accum(&mut grads[a.idx()], d);
                }
                if needs(*col) {
                    let av = &self.vals[a.idx()];
                    let mut d = Tensor::zeros(g.rows(), 1);
                    {
                        let dd = d.data_mut();
                        for r in 0..g.rows() {
                            let mut acc = T::zero();
                            for c in 0..g.cols() {
                                acc += g.get(r, c) * av.get(r, c);
                            }
                            dd[r] = acc;
                        }
                    }
                    accum(&mut grads[col.idx()], d);
                }
            }
            Op::DivCol(a, col) => {
                let cv = &self.vals[col.idx()];
                if needs(*a) {
                    let cols = g.cols();
                    let cd: Vec<T> = cv.data().to_vec();
                    let mut d = g.clone();
                    for (idx, x) in d.data_mut().iter_mut().enumerate() {
                        *x /= cd[idx / cols];
                    }
                    accum(&mut grads[a.idx()], d);
                }
                if needs(*col) {
                    let out = &self.vals[i];
                    let mut d = Tensor::zeros(g.rows(), 1);
                    {
                        let dd = d.data_mut();
                        for r in 0..g.rows() {
                            let mut acc = T::zero();
                            for c in 0..g.cols() {
                                acc += g.get(r, c) * out.get(r, c);
                            }
                            dd[r] = -acc / cv.get(r, 0);
                        }
                    }
                    accum(&mut grads[col.idx()], d);
                }
            }
            Op::ScalarMul(a, s) => {
                let sc = self.vals[s.idx()].get(0, 0);
                if needs(*a) {
                    accum(&mut grads[a.idx()], g.map(|x| x * sc));
                }
                if needs(*s) {
                    let av = &self.vals[a.idx()];
                    let mut acc = T::zero();
                    for (x, v) in g.data().iter().zip(av.data()) {
                        acc += *x * *v;
                    }
                    accum(&mut grads[s.idx()], Tensor::scalar(acc));
                }
            }

            Op::Concat(parts) => {
                let mut at = 0usize;
                for p in parts.iter() {
                    let pv = &self.vals[p.idx()];
                    let c = pv.cols();
                    if needs(*p) {
                        let mut d = Tensor::zeros(pv.rows(), c);
                        {
                            let dd = d.data_mut();
                            for r in 0..pv.rows() {
                                dd[r * c..(r + 1) * c]
                                    .copy_from_slice(&g.row(r)[at..at + c]);
                            }
                        }
                        accum(&mut grads[p.idx()], d);
                    }
                    at += c;
                }
            }
            Op::SliceCols(a, start, len) => {
                if needs(*a) {
                    let av = &self.vals[a.idx()];
                    let cols = av.cols();
                    let mut d = Tensor::zeros(av.rows(), cols);
                    {
                        let dd = d.data_mut();
                        for r in 0..av.rows() {
                            dd[r * cols + start..r * cols + start + len]
                                .copy_from_slice(g.row(r));
                        }
                    }
                    accum(&mut grads[a.idx()], d);
                }
            }
            Op::GatherRows(a, idx) => {
                if needs(*a) {
                    let av = &self.vals[a.idx()];
                    let cols = av.cols();
                    let mut d = Tensor::zeros(av.rows(), cols);
                    {
                        let dd = d.data_mut();
                        for (r, &src) in idx.iter().enumerate() {
                            let s = src as usize;
                            let gr = g.row(r);
                            for c in 0..cols {
                                dd[s * cols + c] += gr[c];
                            }
                        }
                    }
                    accum(&mut grads[a.idx()], d);
                }
            }
            Op::RowSum(a) => {
                if needs(*a) {
                    let av = &self.vals[a.idx()];
                    let cols = av.cols();
                    let mut d = Tensor::zeros(av.rows(), cols);
                    {
                        let dd = d.data_mut();
                        for r in 0..av.rows() {
                            let gv = g.get(r, 0);
                            for c in 0..cols {
                                dd[r * cols + c] = gv;
                            }
                        }
                    }
                    accum(&mut grads[a.idx()], d);
                }
            }
            Op::SumAll(a) => {
                if needs(*a) {
                    let av = &self.vals[a.idx()];
                    let gv = g.get(0, 0);
                    accum(&mut grads[a.idx()], Tensor::filled(av.rows(), av.cols(), gv));
                }
            }
            Op::MeanAll(a) => {
                if needs(*a) {
                    let av = &self.vals[a.idx()];
                    let gv = g.get(0, 0) / T::of_f64(av.len() as f64);
                    accum(&mut grads[a.idx()], Tensor::filled(av.rows(), av.cols(), gv));
                }
            }
            Op::BroadcastCol(a, k) => {
                if needs(*a) {
                    let rows = g.rows();
                    let mut d = Tensor::zeros(rows, 1);
                    {
                        let dd = d.data_mut();
                        for r in 0..rows {
                            let mut acc = T::zero();
                            for c in 0..*k {
                                acc += g.get(r, c);
                            }
                            dd[r] = acc;
                        }
                    }
                    accum(&mut grads[a.idx()], d);
                }
            }
            Op::RepeatRow(a, _) => {
                if needs(*a) {
                    let cols = g.cols();
                    let mut d = Tensor::zeros(1, cols);
                    {
                        let dd = d.data_mut();
                        for r in 0..g.rows() {
                            for (c, dv) in dd.iter_mut().enumerate() {
                                *dv += g.get(r, c);
                            }
                        }
                    }
                    accum(&mut grads[a.idx()], d);
                }
            }

            Op::SegShiftNext(a, seg) => {
                if needs(*a) {
                    let rows = g.rows();
                    let mut d = Tensor::zeros(rows, 1);
                    {
                        let dd = d.data_mut();
                        for idx in 0..rows {
                            let next = if (idx + 1) % seg == 0 { idx } else { idx + 1 };
                            dd[next] += g.get(idx, 0);
                        }
                    }
                    accum(&mut grads[a.idx()], d);
                }
            }
            Op::SegCumprodExcl(a, seg) => {
                if needs(*a) {
                    let av = &self.vals[a.idx()];
                    let out = &self.vals[i];
                    let rows = g.rows();
                    let tiny = T::of_f64(1e-30);
                    let mut d = Tensor::zeros(rows, 1);
                    {
                        let dd = d.data_mut();
                        for b in (0..rows).step_by(*seg) {
                            // dL/da_j = (Σ_{i>j} g_i·out_i) / a_j
                            let mut suffix = T::zero();
                            for j in (0..*seg).rev() {
                                let aj = av.get(b + j, 0);
                                dd[b + j] =
                                    if aj.abs() > tiny { suffix / aj } else { T::zero() };
                                suffix += g.get(b + j, 0) * out.get(b + j, 0);
                            }
                        }
                    }
                    accum(&mut grads[a.idx()], d);
                }
            }
            Op::SegSum(a, seg) => {
                if needs(*a) {
                    let av = &self.vals[a.idx()];
                    let cols = av.cols();
                    let mut d = Tensor::zeros(av.rows(), cols);
                    {
                        let dd = d.data_mut();
                        for r in 0..av.rows() {
                            let gr = g.row(r / seg);
                            dd[r * cols..(r + 1) * cols].copy_from_slice(gr);
                        }
                    }
                    accum(&mut grads[a.idx()], d);
                }
            }

            Op::BlockDot(a, b) => {
                let (av, bv) = (&self.vals[a.idx()], &self.vals[b.idx()]);
                let k = av.cols() / 3;
                if needs(*a) {
                    let mut d = Tensor::zeros(av.rows(), av.cols());
                    {
                        let dd = d.data_mut();
                        for r in 0..av.rows() {
                            let br = bv.row(r);
                            let gr = g.row(r);
                            for kk in 0..k {
                                for t in 0..3 {
                                    dd[r * 3 * k + 3 * kk + t] = gr[kk] * br[t];
                                }
                            }
                        }
                    }
                    accum(&mut grads[a.idx()], d);
                }
                if needs(*b) {
                    let mut d = Tensor::zeros(bv.rows(), 3);
                    {
                        let dd = d.data_mut();
                        for r in 0..bv.rows() {
                            let ar = av.row(r);
                            let gr = g.row(r);
                            for kk in 0..k {
                                for t in 0..3 {
                                    dd[r * 3 + t] += gr[kk] * ar[3 * kk + t];
                                }
                            }
                        }
                    }
                    accum(&mut grads[b.idx()], d);
                }
            }
            Op::BlockMulK(a, w) => {
                let (av, wv) = (&self.vals[a.idx()], &self.vals[w.idx()]);
                let k = wv.cols();
                if needs(*a) {
                    let mut d = g.clone();
                    {
                        let dd = d.data_mut();
                        for r in 0..wv.rows() {
                            let wr: Vec<T> = wv.row(r).to_vec();
                            for kk in 0..k {
                                for t in 0..3 {
                                    dd[r * 3 * k + 3 * kk + t] *= wr[kk];
                                }
                            }
                        }
                    }
                    accum(&mut grads[a.idx()], d);
                }
                if needs(*w) {
                    let mut d = Tensor::zeros(wv.rows(), k);
                    {
                        let dd = d.data_mut();
                        for r in 0..wv.rows() {
                            let ar = av.row(r);
                            let gr = g.row(r);
                            for kk in 0..k {
                                let mut acc = T::zero();
                                for t in 0..3 {
                                    acc += gr[3 * kk + t] * ar[3 * kk + t];
                                }
                                dd[r * k + kk] = acc;
                            }
                        }
                    }
                    accum(&mut grads[w.idx()], d);
                }
            }
            Op::BlockSumK(a) => {
                if needs(*a) {
                    let av = &self.vals[a.idx()];
                    let k = av.cols() / 3;
                    let mut d = Tensor::zeros(av.rows(), av.cols());
                    {
                        let dd = d.data_mut();
                        for r in 0..av.rows() {
                            let gr = g.row(r);
                            for kk in 0..k {
                                for t in 0..3 {
                                    dd[r * 3 * k + 3 * kk + t] = gr[t];
                                }
                            }
                        }
                    }
                    accum(&mut grads[a.idx()], d);
                }
            }
            Op::BlockNorm(a, _) => {
                if needs(*a) {
                    let av = &self.vals[a.idx()];
                    let out = &self.vals[i];
                    let k = av.cols() / 3;
                    let mut d = Tensor::zeros(av.rows(), av.cols());
                    {
                        let dd = d.data_mut();
                        for r in 0..av.rows() {
                            let ar = av.row(r);
                            let gr = g.row(r);
                            for kk in 0..k {
                                let o = out.get(r, kk);
                                let f = gr[kk] / o;
                                for t in 0..3 {
                                    dd[r * 3 * k + 3 * kk + t] = f * ar[3 * kk + t];
                                }
                            }
                        }
                    }
                    accum(&mut grads[a.idx()], d);
                }
            }

            Op::PosEncode(a, enc) => {
                if needs(*a) {
                    let av = &self.vals[a.idx()];
                    accum(&mut grads[a.idx()], enc.apply_jacobian_t(av, g));
                }
            }

            Op::PeBackward(delta, x, enc) => {
                if needs(*delta) {
                    accum(&mut grads[delta.idx()], enc.apply_jacobian(x, g));
                }
            }

            Op::SgIrradiance(lam, cosang) => {
                let (lv, cv) = (&self.vals[lam.idx()], &self.vals[cosang.idx()]);
                let k = cv.cols();
                let mut dlam = if needs(*lam) {
                    Some(Tensor::zeros(lv.rows(), k))
                } else {
                    None
                };
                let mut dcos = if needs(*cosang) {
                    Some(Tensor::zeros(cv.rows(), k))
                } else {
                    None
                };
                for r in 0..cv.rows() {
                    let lr = if lv.rows() == 1 { 0 } else { r };
                    for c in 0..k {
                        let (_, dc, dl) =
                            irradiance_parts(lv.get(lr, c).as_f64(), cv.get(r, c).as_f64());
                        let gv = g.get(r, c);
                        if let Some(t) = dcos.as_mut() {
                            let cur = t.get(r, c);
                            t.set(r, c, cur + gv * T::of_f64(dc));
                        }
                        if let Some(t) = dlam.as_mut() {
                            let cur = t.get(lr, c);
                            t.set(lr, c, cur + gv * T::of_f64(dl));
                        }
                    }
                }
                if let Some(t) = dlam {
                    accum(&mut grads[lam.idx()], t);
                }
                if let Some(t) = dcos {
                    accum(&mut grads[cosang.idx()], t);
                }
            }
        }
    }
}
