//! Dense 2-D tensors and a recording gradient tape.
//!
//! The network is small and its architecture fixed, so reverse-mode
//! differentiation is implemented as a flat Wengert tape: every primitive
//! appends one node holding its output values, and `backward` replays the
//! nodes in reverse, accumulating vector-Jacobian products. Everything is
//! `f64`; buffers are recycled across epochs through an internal pool.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A row-major matrix of `f64` values.
///
/// `rows` is the channel (or token) axis, `cols` the time (or feature) axis,
/// depending on context. Column vectors are `n x 1`, scalars `1 x 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    #[serde(default)]
    requires_grad: bool,
}

impl Tensor2 {
    /// Validated constructor: non-empty shape, matching length, finite values.
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!("empty tensor shape {rows}x{cols}")));
        }
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "tensor {rows}x{cols} expects {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("non-finite tensor value {bad}")));
        }
        Ok(Tensor2 { rows, cols, values, requires_grad: false })
    }

    /// Learnable tensor: same checks as `new`, with gradient tracking enabled.
    pub fn param(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Ok(Self::new(rows, cols, values)?.with_grad())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "empty tensor shape");
        Tensor2 { rows, cols, values: vec![0.0; rows * cols], requires_grad: false }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "empty tensor shape");
        Tensor2 { rows, cols, values: vec![value; rows * cols], requires_grad: false }
    }

    pub fn column(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(n, 1, values)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    /// Copy of the columns `range.start..range.end`, same rows.
    pub fn col_range(&self, start: usize, len: usize) -> Result<Tensor2> {
        if start + len > self.cols || len == 0 {
            return Err(Error::Shape(format!(
                "column range {start}..{} out of 0..{}",
                start + len,
                self.cols
            )));
        }
        let mut values = Vec::with_capacity(self.rows * len);
        for r in 0..self.rows {
            values.extend_from_slice(&self.values[r * self.cols + start..r * self.cols + start + len]);
        }
        Tensor2::new(self.rows, len, values)
    }
}

// ---------------------------------------------------------------------------
// Pure kernels (shared by the public functions and the tape ops)
// ---------------------------------------------------------------------------

fn conv_forward(
    x: &[f64],
    channels: usize,
    t_len: usize,
    k: &[f64],
    k_len: usize,
    dilation: usize,
    out: &mut [f64],
) {
    for c in 0..channels {
        let xr = &x[c * t_len..(c + 1) * t_len];
        let kr = &k[c * k_len..(c + 1) * k_len];
        let or = &mut out[c * t_len..(c + 1) * t_len];
        for t in 0..t_len {
            let mut acc = 0.0;
            for (j, &kj) in kr.iter().enumerate() {
                let lag = (k_len - 1 - j) * dilation;
                if t >= lag {
                    acc += kj * xr[t - lag];
                }
            }
            or[t] = acc;
        }
    }
}

/// `exp(x)` for `x <= 0` (or NaN), accurate to a few ulp.
///
/// Branch-free Cody-Waite range reduction plus a degree-13 Taylor polynomial,
/// so the compiler can vectorize softmax rows; the standard library `exp` is
/// an opaque call that blocks SIMD and dominates attention cost otherwise.
/// The power-of-two scaling is applied in two steps so deep underflow rounds
/// through the subnormals to an exact 0.0, matching `f64::exp`. NaN
/// propagates so divergence checks still fire.
#[inline(always)]
fn exp_nonpos(x: f64) -> f64 {
    debug_assert!(!(x > 0.0), "exp_nonpos expects a non-positive argument");
    const INV_LN2: f64 = std::f64::consts::LOG2_E;
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    // 1.5 * 2^52: adding then subtracting rounds to the nearest integer.
    const SHIFT: f64 = 6_755_399_441_055_744.0;
    // Anything at or below -1000 underflows to zero through the scaling;
    // the clamp only keeps `n` inside the valid exponent windows below.
    let xc = x.max(-1000.0);
    let n = (xc * INV_LN2 + SHIFT) - SHIFT;
    let r = (xc - n * LN2_HI) - n * LN2_LO;
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0
                    + r * (1.0 / 24.0
                        + r * (1.0 / 120.0
                            + r * (1.0 / 720.0
                                + r * (1.0 / 5_040.0
                                    + r * (1.0 / 40_320.0
                                        + r * (1.0 / 362_880.0
                                            + r * (1.0 / 3_628_800.0
                                                + r * (1.0 / 39_916_800.0
                                                    + r * (1.0 / 479_001_600.0
                                                        + r * (1.0 / 6_227_020_800.0)))))))))))));
    // 2^n as 2^n1 * 2^n2: the first factor keeps p * s1 in normal range
    // (p >= 0.70, so p * 2^-1021 stays above the smallest normal), the
    // second rounds once into the subnormals or to zero. The exponents are
    // read straight out of the shifter bit pattern (bits of m + SHIFT are
    // SHIFT's bits plus m for any small integer m) because a float-to-int
    // cast would saturate and keep the loop from vectorizing.
    const SHIFT_BITS: u64 = 0x4338_0000_0000_0000; // SHIFT.to_bits()
    let n1 = n.max(-1021.0);
    let b1 = (n1 + SHIFT).to_bits().wrapping_sub(SHIFT_BITS);
    let b2 = ((n - n1) + SHIFT).to_bits().wrapping_sub(SHIFT_BITS);
    let s1 = f64::from_bits(b1.wrapping_add(1023) << 52);
    let s2 = f64::from_bits(b2.wrapping_add(1023) << 52);
    let y = p * s1 * s2;
    if x.is_nan() {
        x
    } else {
        y
    }
}

/// Four-lane maximum. Floating-point max is order-insensitive, so this is
/// exactly the sequential result, just without the serial dependency chain.
#[inline]
fn max4(xs: &[f64]) -> f64 {
    let mut m = [f64::NEG_INFINITY; 4];
    let mut it = xs.chunks_exact(4);
    for c in it.by_ref() {
        m[0] = m[0].max(c[0]);
        m[1] = m[1].max(c[1]);
        m[2] = m[2].max(c[2]);
        m[3] = m[3].max(c[3]);
    }
    let mut r = m[0].max(m[1]).max(m[2].max(m[3]));
    for &x in it.remainder() {
        r = r.max(x);
    }
    r
}

/// Four partial sums combined in a fixed order: deterministic on every run
/// and machine, and four times less latency-bound than a serial sum.
#[inline]
fn sum4(xs: &[f64]) -> f64 {
    let mut s = [0.0f64; 4];
    let mut it = xs.chunks_exact(4);
    for c in it.by_ref() {
        s[0] += c[0];
        s[1] += c[1];
        s[2] += c[2];
        s[3] += c[3];
    }
    let mut r = (s[0] + s[1]) + (s[2] + s[3]);
    for &x in it.remainder() {
        r += x;
    }
    r
}

/// Dot product with the same fixed four-lane order as `sum4`.
#[inline]
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = [0.0f64; 4];
    let mut ia = a.chunks_exact(4);
    let mut ib = b.chunks_exact(4);
    for (ca, cb) in ia.by_ref().zip(ib.by_ref()) {
        s[0] += ca[0] * cb[0];
        s[1] += ca[1] * cb[1];
        s[2] += ca[2] * cb[2];
        s[3] += ca[3] * cb[3];
    }
    let mut r = (s[0] + s[1]) + (s[2] + s[3]);
    for (&xa, &xb) in ia.remainder().iter().zip(ib.remainder()) {
        r += xa * xb;
    }
    r
}

/// Overwrite a row of finite scores with its softmax probabilities.
///
/// Shared by every attention path (composed and fused, forward and backward)
/// so recomputed probabilities are bit-identical to the recorded ones. The
/// exponential map carries no reduction, letting it vectorize cleanly.
fn softmax_row_inplace(row: &mut [f64]) {
    let max = max4(row);
    for s in row.iter_mut() {
        *s = exp_nonpos(*s - max);
    }
    let inv = 1.0 / sum4(row);
    for s in row.iter_mut() {
        *s *= inv;
    }
}

fn softmax_into(src: &[f64], dst: &mut [f64]) -> Result<()> {
    let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::DegenerateMask);
    }
    dst.copy_from_slice(src);
    softmax_row_inplace(dst);
    Ok(())
}

/// Causal attention scores for query row `i`: `row[j] = inv_scale * <q_i, k_j>`
/// over `j <= i` (`row` must have length `i + 1`).
#[inline(always)]
fn score_row(qv: &[f64], kv: &[f64], d: usize, inv_scale: f64, i: usize, row: &mut [f64]) {
    if d == 1 {
        let c = qv[i] * inv_scale;
        for (slot, &kj) in row.iter_mut().zip(kv) {
            *slot = c * kj;
        }
    } else {
        let qi = &qv[i * d..(i + 1) * d];
        for (j, slot) in row.iter_mut().enumerate() {
            let kj = &kv[j * d..(j + 1) * d];
            let mut s = 0.0;
            for e in 0..d {
                s += qi[e] * kj[e];
            }
            *slot = s * inv_scale;
        }
    }
}

/// Accumulate one attention output row (`d > 1` layout): the sum of value
/// rows weighted by the surviving probabilities of `row`.
#[inline(always)]
fn attend_row(row: &[f64], vv: &[f64], tau: f64, d: usize, orow: &mut [f64]) {
    orow.fill(0.0);
    for (j, &p) in row.iter().enumerate() {
        if p >= tau && p != 0.0 {
            let vrow = &vv[j * d..(j + 1) * d];
            for (o, &ve) in orow.iter_mut().zip(vrow) {
                *o += p * ve;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Public primitive operations
// ---------------------------------------------------------------------------

/// Depthwise causal convolution with left zero-padding.
///
/// `out[c][t] = sum_j kernels[c][j] * x[c][t - (k-1-j)*dilation]`, reading
/// zeros left of the series start. Kernel index `k-1` is the current-time
/// tap; index `j` looks back `(k-1-j)*dilation` steps.
pub fn conv1d_depthwise_causal(input: &Tensor2, kernels: &Tensor2, dilation: usize) -> Result<Tensor2> {
    if kernels.rows() != input.rows() {
        return Err(Error::Shape(format!(
            "kernel channels {} != input channels {}",
            kernels.rows(),
            input.rows()
        )));
    }
    if dilation == 0 {
        return Err(Error::Config("dilation must be >= 1".into()));
    }
    let mut out = Tensor2::zeros(input.rows(), input.cols());
    conv_forward(
        input.values(),
        input.rows(),
        input.cols(),
        kernels.values(),
        kernels.cols(),
        dilation,
        out.values_mut(),
    );
    Ok(out)
}

/// Root-mean-square normalization of one feature vector with learned gain.
pub fn rmsnorm(x: &[f64], gain: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x.is_empty() || x.len() != gain.len() {
        return Err(Error::Shape(format!(
            "rmsnorm expects matching non-empty vectors, got {} and {}",
            x.len(),
            gain.len()
        )));
    }
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    Ok(x.iter().zip(gain).map(|(v, g)| g * v * inv).collect())
}

/// LayerNorm of one feature vector: center, scale by population std, affine.
pub fn layernorm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x.is_empty() || x.len() != gain.len() || x.len() != bias.len() {
        return Err(Error::Shape(format!(
            "layernorm expects matching non-empty vectors, got {}, {}, {}",
            x.len(),
            gain.len(),
            bias.len()
        )));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    Ok(x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (g, b))| g * (v - mean) * inv + b)
        .collect())
}

/// Numerically stable softmax. Entries may be `-inf` (masked) and map to
/// exactly zero; a fully masked input is an error.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Shape("softmax of an empty vector".into()));
    }
    let mut out = vec![0.0; v.len()];
    softmax_into(v, &mut out)?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Gradient tape
// ---------------------------------------------------------------------------

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    AddScaled { a: usize, b: usize, factor: f64 },
    Scale { x: usize, factor: f64 },
    ScaleRows { x: usize, w: usize },
    AddScalar { x: usize, s: usize },
    Matmul { a: usize, b: usize },
    Transpose { x: usize },
    ColSlice { x: usize, start: usize },
    ColConcat { xs: Vec<usize> },
    Conv1d { x: usize, k: usize, dilation: usize },
    LayerNormCols { x: usize, gain: usize, bias: usize, eps: f64 },
    RmsNormCols { x: usize, gain: usize, eps: f64 },
    SoftmaxVec { x: usize },
    CausalScores { q: usize, k: usize, inv_scale: f64 },
    CausalSoftmaxRows { x: usize },
    CausalMatmulPruned { a: usize, b: usize, tau: f64 },
    CausalAttention { q: usize, k: usize, v: usize, inv_scale: f64, tau: f64, probs: usize },
    Relu { x: usize },
    MseLoss { pred: usize, targets: Vec<f64> },
    L1Norm { x: usize },
}

struct Node {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    needs_grad: bool,
    op: Op,
}

/// Recording tape for reverse-mode differentiation.
///
/// One tape records one forward pass. `backward` consumes it (a second call
/// is an error); `reset` clears the recording and recycles buffers so the
/// next epoch allocates nothing.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    pool: Vec<Vec<f64>>,
    /// Side buffers owned by ops rather than nodes (attention probability
    /// triangles); indexed by the op's `probs` field.
    stash: Vec<Vec<f64>>,
    consumed: bool,
}

fn take_buf(pool: &mut Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    match pool.iter().position(|b| b.capacity() >= len) {
        Some(i) => {
            let mut b = pool.swap_remove(i);
            b.resize(len, 0.0);
            b
        }
        None => match pool.pop() {
            Some(mut b) => {
                b.resize(len, 0.0);
                b
            }
            None => vec![0.0; len],
        },
    }
}

fn zeroed_buf(pool: &mut Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut b = take_buf(pool, len);
    b.fill(0.0);
    b
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Drop the recording but keep the buffers for the next forward pass.
    pub fn reset(&mut self) {
        for node in self.nodes.drain(..) {
            self.pool.push(node.values);
        }
        for g in self.grads.drain(..).flatten() {
            self.pool.push(g);
        }
        for b in self.stash.drain(..) {
            self.pool.push(b);
        }
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].values
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn to_tensor(&self, v: Var) -> Tensor2 {
        let n = &self.nodes[v.0];
        Tensor2 { rows: n.rows, cols: n.cols, values: n.values.clone(), requires_grad: false }
    }

    /// Gradient of the last `backward` loss w.r.t. `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, rows: usize, cols: usize, values: Vec<f64>, needs_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { rows, cols, values, needs_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn guard(&self) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        Ok(())
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    /// Record an input tensor. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor2) -> Result<Var> {
        self.guard()?;
        let mut buf = take_buf(&mut self.pool, t.len());
        buf.copy_from_slice(t.values());
        Ok(self.push(t.rows(), t.cols(), buf, t.requires_grad(), Op::Leaf))
    }

    /// Record a non-differentiable input.
    pub fn constant(&mut self, rows: usize, cols: usize, values: &[f64]) -> Result<Var> {
        self.guard()?;
        if values.len() != rows * cols || values.is_empty() {
            return Err(Error::Shape(format!(
                "constant {rows}x{cols} expects {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        let mut buf = take_buf(&mut self.pool, values.len());
        buf.copy_from_slice(values);
        Ok(self.push(rows, cols, buf, false, Op::Constant))
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

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_scaled(a, b, 1.0)
    }

    /// `a + factor * b`, elementwise.
    pub fn add_scaled(&mut self, a: Var, b: Var, factor: f64) -> Result<Var> {
        self.guard()?;
        self.same_shape(a, b, "add operands")?;
        let (r, c) = self.shape(a);
        let mut buf = take_buf(&mut self.pool, r * c);
        for ((o, &x), &y) in buf.iter_mut().zip(self.value(a)).zip(self.value(b)) {
            *o = x + factor * y;
        }
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(r, c, buf, ng, Op::AddScaled { a: a.0, b: b.0, factor }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.guard()?;
        let (r, c) = self.shape(x);
        let mut buf = take_buf(&mut self.pool, r * c);
        for (o, &v) in buf.iter_mut().zip(self.value(x)) {
            *o = factor * v;
        }
        let ng = self.needs(x.0);
        Ok(self.push(r, c, buf, ng, Op::Scale { x: x.0, factor }))
    }

    /// Scale row `c` of `x` by `w[c]` (`w` is a column vector).
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        self.guard()?;
        let (r, c) = self.shape(x);
        let (wr, wc) = self.shape(w);
        if wr != r || wc != 1 {
            return Err(Error::Shape(format!("row weights {wr}x{wc} for {r}x{c} matrix")));
        }
        let mut buf = take_buf(&mut self.pool, r * c);
        {
            let xv = self.value(x);
            let wv = self.value(w);
            for row in 0..r {
                let s = wv[row];
                for col in 0..c {
                    buf[row * c + col] = s * xv[row * c + col];
                }
            }
        }
        let ng = self.needs(x.0) || self.needs(w.0);
        Ok(self.push(r, c, buf, ng, Op::ScaleRows { x: x.0, w: w.0 }))
    }

    /// Broadcast-add a scalar node to every entry of `x`.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        self.guard()?;
        if self.shape(s) != (1, 1) {
            return Err(Error::Shape(format!("broadcast addend must be 1x1, got {:?}", self.shape(s))));
        }
        let (r, c) = self.shape(x);
        let sv = self.value(s)[0];
        let mut buf = take_buf(&mut self.pool, r * c);
        for (o, &v) in buf.iter_mut().zip(self.value(x)) {
            *o = v + sv;
        }
        let ng = self.needs(x.0) || self.needs(s.0);
        Ok(self.push(r, c, buf, ng, Op::AddScalar { x: x.0, s: s.0 }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.guard()?;
        let (ar, ak) = self.shape(a);
        let (bk, bc) = self.shape(b);
        if ak != bk {
            return Err(Error::Shape(format!("matmul {ar}x{ak} . {bk}x{bc}")));
        }
        let mut buf = zeroed_buf(&mut self.pool, ar * bc);
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..ar {
                for k in 0..ak {
                    let aik = av[i * ak + k];
                    if aik == 0.0 {
                        continue;
                    }
                    let brow = &bv[k * bc..(k + 1) * bc];
                    let orow = &mut buf[i * bc..(i + 1) * bc];
                    for (o, &bkj) in orow.iter_mut().zip(brow) {
                        *o += aik * bkj;
                    }
                }
            }
        }
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(ar, bc, buf, ng, Op::Matmul { a: a.0, b: b.0 }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.guard()?;
        let (r, c) = self.shape(x);
        let mut buf = take_buf(&mut self.pool, r * c);
        {
            let xv = self.value(x);
            for i in 0..r {
                for j in 0..c {
                    buf[j * r + i] = xv[i * c + j];
                }
            }
        }
        let ng = self.needs(x.0);
        Ok(self.push(c, r, buf, ng, Op::Transpose { x: x.0 }))
    }

    /// Copy of columns `start..start+len`.
    pub fn col_slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.guard()?;
        let (r, c) = self.shape(x);
        if start + len > c || len == 0 {
            return Err(Error::Shape(format!("column slice {start}..{} of {r}x{c}", start + len)));
        }
        let mut buf = take_buf(&mut self.pool, r * len);
        {
            let xv = self.value(x);
            for i in 0..r {
                buf[i * len..(i + 1) * len].copy_from_slice(&xv[i * c + start..i * c + start + len]);
            }
        }
        let ng = self.needs(x.0);
        Ok(self.push(r, len, buf, ng, Op::ColSlice { x: x.0, start }))
    }

    /// Horizontal concatenation.
    pub fn col_concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.guard()?;
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero parts".into()));
        }
        let r = self.shape(parts[0]).0;
        let mut total = 0;
        for p in parts {
            let (pr, pc) = self.shape(*p);
            if pr != r {
                return Err(Error::Shape(format!("concat row mismatch: {pr} vs {r}")));
            }
            total += pc;
        }
        let mut buf = take_buf(&mut self.pool, r * total);
        {
            let mut off = 0;
            for p in parts {
                let (_, pc) = self.shape(*p);
                let pv = self.value(*p);
                for i in 0..r {
                    buf[i * total + off..i * total + off + pc]
                        .copy_from_slice(&pv[i * pc..(i + 1) * pc]);
                }
                off += pc;
            }
        }
        let ng = parts.iter().any(|p| self.needs(p.0));
        Ok(self.push(r, total, buf, ng, Op::ColConcat { xs: parts.iter().map(|p| p.0).collect() }))
    }

    /// Tape version of [`conv1d_depthwise_causal`].
    pub fn conv1d(&mut self, x: Var, kernels: Var, dilation: usize) -> Result<Var> {
        self.guard()?;
        let (r, c) = self.shape(x);
        let (kr, _) = self.shape(kernels);
        if kr != r {
            return Err(Error::Shape(format!("kernel channels {kr} != input channels {r}")));
        }
        if dilation == 0 {
            return Err(Error::Config("dilation must be >= 1".into()));
        }
        let klen = self.shape(kernels).1;
        let mut buf = take_buf(&mut self.pool, r * c);
        conv_forward(self.value(x), r, c, self.value(kernels), klen, dilation, &mut buf);
        let ng = self.needs(x.0) || self.needs(kernels.0);
        Ok(self.push(r, c, buf, ng, Op::Conv1d { x: x.0, k: kernels.0, dilation }))
    }

    /// LayerNorm each column of `x` (one feature vector per time position).
    pub fn layernorm_cols(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.guard()?;
        let (r, c) = self.shape(x);
        if self.shape(gain) != (r, 1) || self.shape(bias) != (r, 1) {
            return Err(Error::Shape("norm gain/bias must be column vectors matching rows".into()));
        }
        let mut buf = take_buf(&mut self.pool, r * c);
        {
            let xv = self.value(x);
            let gv = self.value(gain);
            let bv = self.value(bias);
            let n = r as f64;
            for t in 0..c {
                let mut mean = 0.0;
                for i in 0..r {
                    mean += xv[i * c + t];
                }
                mean /= n;
                let mut var = 0.0;
                for i in 0..r {
                    let d = xv[i * c + t] - mean;
                    var += d * d;
                }
                var /= n;
                let inv = 1.0 / (var + eps).sqrt();
                for i in 0..r {
                    buf[i * c + t] = gv[i] * (xv[i * c + t] - mean) * inv + bv[i];
                }
            }
        }
        let ng = self.needs(x.0) || self.needs(gain.0) || self.needs(bias.0);
        Ok(self.push(r, c, buf, ng, Op::LayerNormCols { x: x.0, gain: gain.0, bias: bias.0, eps }))
    }

    /// RMS-norm each column of `x`.
    pub fn rmsnorm_cols(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        self.guard()?;
        let (r, c) = self.shape(x);
        if self.shape(gain) != (r, 1) {
            return Err(Error::Shape("norm gain must be a column vector matching rows".into()));
        }
        let mut buf = take_buf(&mut self.pool, r * c);
        {
            let xv = self.value(x);
            let gv = self.value(gain);
            let n = r as f64;
            for t in 0..c {
                let mut ms = 0.0;
                for i in 0..r {
                    let v = xv[i * c + t];
                    ms += v * v;
                }
                ms /= n;
                let inv = 1.0 / (ms + eps).sqrt();
                for i in 0..r {
                    buf[i * c + t] = gv[i] * xv[i * c + t] * inv;
                }
            }
        }
        let ng = self.needs(x.0) || self.needs(gain.0);
        Ok(self.push(r, c, buf, ng, Op::RmsNormCols { x: x.0, gain: gain.0, eps }))
    }

    /// Softmax of a column vector.
    pub fn softmax_vec(&mut self, x: Var) -> Result<Var> {
        self.guard()?;
        let (r, c) = self.shape(x);
        if c != 1 {
            return Err(Error::Shape(format!("softmax_vec expects a column vector, got {r}x{c}")));
        }
        let mut buf = take_buf(&mut self.pool, r);
        softmax_into(self.value(x), &mut buf)?;
        let ng = self.needs(x.0);
        Ok(self.push(r, 1, buf, ng, Op::SoftmaxVec { x: x.0 }))
    }

    /// Scaled dot-product scores with the causal mask already applied:
    /// `out[i][j] = inv_scale * <q_i, k_j>` for `j <= i`, exact zero above the
    /// diagonal. `q` and `k` are `T x d_head`.
    pub fn causal_scores(&mut self, q: Var, k: Var, inv_scale: f64) -> Result<Var> {
        self.guard()?;
        let (t, d) = self.shape(q);
        if self.shape(k) != (t, d) {
            return Err(Error::Shape(format!(
                "query {t}x{d} vs key {:?}",
                self.shape(k)
            )));
        }
        let mut buf = take_buf(&mut self.pool, t * t);
        {
            let qv = self.value(q);
            let kv = self.value(k);
            for i in 0..t {
                let qi = &qv[i * d..(i + 1) * d];
                let row = &mut buf[i * t..(i + 1) * t];
                for (j, slot) in row.iter_mut().enumerate().take(i + 1) {
                    let kj = &kv[j * d..(j + 1) * d];
                    let mut s = 0.0;
                    for e in 0..d {
                        s += qi[e] * kj[e];
                    }
                    *slot = s * inv_scale;
                }
                for slot in row.iter_mut().skip(i + 1) {
                    *slot = 0.0;
                }
            }
        }
        let ng = self.needs(q.0) || self.needs(k.0);
        Ok(self.push(t, t, buf, ng, Op::CausalScores { q: q.0, k: k.0, inv_scale }))
    }

    /// Row-wise softmax over the causal prefix `j <= i`; entries above the
    /// diagonal are exactly zero.
    pub fn causal_softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.guard()?;
        let (t, c) = self.shape(x);
        if t != c {
            return Err(Error::Shape(format!("attention scores must be square, got {t}x{c}")));
        }
        let mut buf = take_buf(&mut self.pool, t * t);
        {
            let xv = self.value(x);
            for i in 0..t {
                let src = &xv[i * t..i * t + i + 1];
                let row = &mut buf[i * t..(i + 1) * t];
                softmax_into(src, &mut row[..i + 1])?;
                for slot in row.iter_mut().skip(i + 1) {
                    *slot = 0.0;
                }
            }
        }
        let ng = self.needs(x.0);
        Ok(self.push(t, t, buf, ng, Op::CausalSoftmaxRows { x: x.0 }))
    }

    /// `prune(a, tau) . b` for a causal attention matrix `a` (upper triangle
    /// zero): entries `a[i][j] < tau` are treated as exact zeros, with no
    /// gradient flow through them.
    pub fn causal_matmul_pruned(&mut self, a: Var, b: Var, tau: f64) -> Result<Var> {
        self.guard()?;
        let (t, tc) = self.shape(a);
        let (br, d) = self.shape(b);
        if t != tc || br != t {
            return Err(Error::Shape(format!(
                "pruned matmul {t}x{tc} . {br}x{d}"
            )));
        }
        if !(0.0..1.0).contains(&tau) {
            return Err(Error::Config(format!("sparsity threshold {tau} outside [0, 1)")));
        }
        let mut buf = take_buf(&mut self.pool, t * d);
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..t {
                let orow = &mut buf[i * d..(i + 1) * d];
                orow.fill(0.0);
                let arow = &av[i * t..i * t + i + 1];
                for (j, &aij) in arow.iter().enumerate() {
                    if aij >= tau && aij != 0.0 {
                        let brow = &bv[j * d..(j + 1) * d];
                        for (o, &bje) in orow.iter_mut().zip(brow) {
                            *o += aij * bje;
                        }
                    }
                }
            }
        }
        let ng = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(t, d, buf, ng, Op::CausalMatmulPruned { a: a.0, b: b.0, tau }))
    }

    /// One sparse causal attention head, fused: scores, row softmax, hard
    /// threshold and the value product in a single pass, with no T x T
    /// score or mask matrices on the tape.
    ///
    /// Per query row `i` over keys `j <= i`: `s_ij = inv_scale * <q_i, k_j>`,
    /// `p_i = softmax(s_i)`, entries `p_ij < tau` are dropped with no
    /// gradient flow, and `out_i = sum_j p_ij * v_j`. Matches
    /// `causal_scores` + `causal_softmax_rows` + `causal_matmul_pruned`.
    /// When any input needs gradients the probability rows are kept as a
    /// lower-triangle stash (T(T+1)/2 values) so the backward pass replays
    /// the pruning decisions without recomputing a single softmax; pure
    /// inference passes keep only O(T) scratch. `q`, `k` and `v` must be
    /// distinct nodes of shape `T x d`.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        inv_scale: f64,
        tau: f64,
    ) -> Result<Var> {
        self.guard()?;
        let (t, d) = self.shape(q);
        if self.shape(k) != (t, d) || self.shape(v) != (t, d) {
            return Err(Error::Shape(format!(
                "attention inputs {t}x{d}, {:?} and {:?} must agree",
                self.shape(k),
                self.shape(v)
            )));
        }
        if q.0 == k.0 || q.0 == v.0 || k.0 == v.0 {
            return Err(Error::Shape(
                "fused attention needs distinct query, key and value nodes".into(),
            ));
        }
        if !(0.0..1.0).contains(&tau) {
            return Err(Error::Config(format!("sparsity threshold {tau} outside [0, 1)")));
        }
        let ng = self.needs(q.0) || self.needs(k.0) || self.needs(v.0);
        let mut out = take_buf(&mut self.pool, t * d);
        let mut srow = take_buf(&mut self.pool, t);
        let mut triangle = if ng { take_buf(&mut self.pool, t * (t + 1) / 2) } else { Vec::new() };
        {
            let qv = self.value(q);
            let kv = self.value(k);
            let vv = self.value(v);
            for i in 0..t {
                if ng {
                    // The softmax row lands directly in its triangle slot
                    // and stays intact for the backward pass; the pruned,
                    // value-weighted terms are staged in the scratch row.
                    let row = &mut triangle[i * (i + 1) / 2..(i + 1) * (i + 2) / 2];
                    score_row(qv, kv, d, inv_scale, i, row);
                    softmax_row_inplace(row);
                    if d == 1 {
                        for (s, (&p, &vj)) in srow.iter_mut().zip(row.iter().zip(vv)) {
                            *s = if p >= tau && p != 0.0 { p * vj } else { 0.0 };
                        }
                        out[i] = sum4(&srow[..=i]);
                    } else {
                        attend_row(row, vv, tau, d, &mut out[i * d..(i + 1) * d]);
                    }
                } else {
                    let row = &mut srow[..=i];
                    score_row(qv, kv, d, inv_scale, i, row);
                    softmax_row_inplace(row);
                    if d == 1 {
                        // Prune and weight in place, then one fixed-order
                        // sum; this row is never needed again.
                        for (s, &vj) in row.iter_mut().zip(vv) {
                            let p = *s;
                            *s = if p >= tau && p != 0.0 { p * vj } else { 0.0 };
                        }
                        out[i] = sum4(row);
                    } else {
                        attend_row(row, vv, tau, d, &mut out[i * d..(i + 1) * d]);
                    }
                }
            }
        }
        self.pool.push(srow);
        let probs = if ng {
            self.stash.push(triangle);
            self.stash.len() - 1
        } else {
            usize::MAX
        };
        Ok(self.push(
            t,
            d,
            out,
            ng,
            Op::CausalAttention { q: q.0, k: k.0, v: v.0, inv_scale, tau, probs },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.guard()?;
        let (r, c) = self.shape(x);
        let mut buf = take_buf(&mut self.pool, r * c);
        for (o, &v) in buf.iter_mut().zip(self.value(x)) {
            *o = if v > 0.0 { v } else { 0.0 };
        }
        let ng = self.needs(x.0);
        Ok(self.push(r, c, buf, ng, Op::Relu { x: x.0 }))
    }

    /// Mean squared error of a prediction node against fixed targets.
    pub fn mse_loss(&mut self, pred: Var, targets: &[f64]) -> Result<Var> {
        self.guard()?;
        let (r, c) = self.shape(pred);
        if r * c != targets.len() || targets.is_empty() {
            return Err(Error::Shape(format!(
                "mse: {} predictions vs {} targets",
                r * c,
                targets.len()
            )));
        }
        let m = targets.len() as f64;
        let mut acc = 0.0;
        for (&p, &t) in self.value(pred).iter().zip(targets) {
            let d = p - t;
            acc += d * d;
        }
        let buf = {
            let mut b = take_buf(&mut self.pool, 1);
            b[0] = acc / m;
            b
        };
        let ng = self.needs(pred.0);
        Ok(self.push(1, 1, buf, ng, Op::MseLoss { pred: pred.0, targets: targets.to_vec() }))
    }

    /// Sum of absolute values, as a scalar node.
    pub fn l1_norm(&mut self, x: Var) -> Result<Var> {
        self.guard()?;
        let total: f64 = self.value(x).iter().map(|v| v.abs()).sum();
        let buf = {
            let mut b = take_buf(&mut self.pool, 1);
            b[0] = total;
            b
        };
        let ng = self.needs(x.0);
        Ok(self.push(1, 1, buf, ng, Op::L1Norm { x: x.0 }))
    }

    /// Reverse pass from a scalar loss node. Consumes the tape; gradients are
    /// then available through [`Tape::grad`]. Parameters the loss never
    /// touches simply report no gradient (treated as zero by callers).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        self.grads.clear();
        self.grads.resize_with(self.nodes.len(), || None);
        self.grads[loss.0] = Some({
            let mut b = take_buf(&mut self.pool, 1);
            b[0] = 1.0;
            b
        });

        for id in (0..=loss.0).rev() {
            if self.grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            self.backward_node(id);
        }
        Ok(())
    }

    fn backward_node(&mut self, id: usize) {
        let Tape { nodes, grads, pool, stash, .. } = self;
        let (lower, upper) = grads.split_at_mut(id);
        let g: &[f64] = upper[0].as_deref().expect("gradient present");

        // Zero-initialized gradient buffer for input `i` (always < id).
        let mut ensure = |i: usize, lower: &mut [Option<Vec<f64>>]| {
            if lower[i].is_none() {
                let len = nodes[i].values.len();
                lower[i] = Some(zeroed_buf(pool, len));
            }
        };

        match &nodes[id].op {
            Op::Leaf | Op::Constant => {}
            Op::AddScaled { a, b, factor } => {
                if nodes[*a].needs_grad {
                    ensure(*a, lower);
                    let da = lower[*a].as_deref_mut().unwrap();
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if nodes[*b].needs_grad {
                    ensure(*b, lower);
                    let db = lower[*b].as_deref_mut().unwrap();
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d += factor * gv;
                    }
                }
            }
            Op::Scale { x, factor } => {
                if nodes[*x].needs_grad {
                    ensure(*x, lower);
                    let dx = lower[*x].as_deref_mut().unwrap();
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += factor * gv;
                    }
                }
            }
            Op::ScaleRows { x, w } => {
                let (r, c) = (nodes[id].rows, nodes[id].cols);
                let xv = &nodes[*x].values;
                let wv = &nodes[*w].values;
                if nodes[*x].needs_grad {
                    ensure(*x, lower);
                    let dx = lower[*x].as_deref_mut().unwrap();
                    for row in 0..r {
                        let s = wv[row];
                        for col in 0..c {
                            dx[row * c + col] += s * g[row * c + col];
                        }
                    }
                }
                if nodes[*w].needs_grad {
                    ensure(*w, lower);
                    let dw = lower[*w].as_deref_mut().unwrap();
                    for row in 0..r {
                        let mut acc = 0.0;
                        for col in 0..c {
                            acc += xv[row * c + col] * g[row * c + col];
                        }
                        dw[row] += acc;
                    }
                }
            }
            Op::AddScalar { x, s } => {
                if nodes[*x].needs_grad {
                    ensure(*x, lower);
                    let dx = lower[*x].as_deref_mut().unwrap();
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if nodes[*s].needs_grad {
                    ensure(*s, lower);
                    lower[*s].as_deref_mut().unwrap()[0] += g.iter().sum::<f64>();
                }
            }
            Op::Matmul { a, b } => {
                let (ar, ak) = (nodes[*a].rows, nodes[*a].cols);
                let bc = nodes[*b].cols;
                let av = &nodes[*a].values;
                let bv = &nodes[*b].values;
                if nodes[*a].needs_grad {
                    ensure(*a, lower);
                    let da = lower[*a].as_deref_mut().unwrap();
                    // da = g . b^T
                    for i in 0..ar {
                        for k in 0..ak {
                            let mut acc = 0.0;
                            let grow = &g[i * bc..(i + 1) * bc];
                            let brow = &bv[k * bc..(k + 1) * bc];
                            for (gv, bkj) in grow.iter().zip(brow) {
                                acc += gv * bkj;
                            }
                            da[i * ak + k] += acc;
                        }
                    }
                }
                if nodes[*b].needs_grad {
                    ensure(*b, lower);
                    let db = lower[*b].as_deref_mut().unwrap();
                    // db = a^T . g
                    for i in 0..ar {
                        let grow = &g[i * bc..(i + 1) * bc];
                        for k in 0..ak {
                            let aik = av[i * ak + k];
                            if aik == 0.0 {
                                continue;
                            }
                            let drow = &mut db[k * bc..(k + 1) * bc];
                            for (d, &gv) in drow.iter_mut().zip(grow) {
                                *d += aik * gv;
                            }
                        }
                    }
                }
            }
            Op::Transpose { x } => {
                if nodes[*x].needs_grad {
                    let (r, c) = (nodes[*x].rows, nodes[*x].cols);
                    ensure(*x, lower);
                    let dx = lower[*x].as_deref_mut().unwrap();
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::ColSlice { x, start } => {
                if nodes[*x].needs_grad {
                    let (r, len) = (nodes[id].rows, nodes[id].cols);
                    let c = nodes[*x].cols;
                    ensure(*x, lower);
                    let dx = lower[*x].as_deref_mut().unwrap();
                    for i in 0..r {
                        for j in 0..len {
                            dx[i * c + start + j] += g[i * len + j];
                        }
                    }
                }
            }
            Op::ColConcat { xs } => {
                let xs = xs.clone();
                let (r, total) = (nodes[id].rows, nodes[id].cols);
                let mut off = 0;
                for xi in xs {
                    let pc = nodes[xi].cols;
                    if nodes[xi].needs_grad {
                        ensure(xi, lower);
                        let dx = lower[xi].as_deref_mut().unwrap();
                        for i in 0..r {
                            for j in 0..pc {
                                dx[i * pc + j] += g[i * total + off + j];
                            }
                        }
                    }
                    off += pc;
                }
            }
            Op::Conv1d { x, k, dilation } => {
                let (r, c) = (nodes[id].rows, nodes[id].cols);
                let klen = nodes[*k].cols;
                let d = *dilation;
                let xv = &nodes[*x].values;
                let kv = &nodes[*k].values;
                if nodes[*x].needs_grad {
                    ensure(*x, lower);
                    let dx = lower[*x].as_deref_mut().unwrap();
                    for ch in 0..r {
                        let kr = &kv[ch * klen..(ch + 1) * klen];
                        let gr = &g[ch * c..(ch + 1) * c];
                        let dxr = &mut dx[ch * c..(ch + 1) * c];
                        for (j, &kj) in kr.iter().enumerate() {
                            if kj == 0.0 {
                                continue;
                            }
                            let lag = (klen - 1 - j) * d;
                            for t in lag..c {
                                dxr[t - lag] += kj * gr[t];
                            }
                        }
                    }
                }
                if nodes[*k].needs_grad {
                    ensure(*k, lower);
                    let dk = lower[*k].as_deref_mut().unwrap();
                    for ch in 0..r {
                        let xr = &xv[ch * c..(ch + 1) * c];
                        let gr = &g[ch * c..(ch + 1) * c];
                        for j in 0..klen {
                            let lag = (klen - 1 - j) * d;
                            let mut acc = 0.0;
                            for t in lag..c {
                                acc += gr[t] * xr[t - lag];
                            }
                            dk[ch * klen + j] += acc;
                        }
                    }
                }
            }
            Op::LayerNormCols { x, gain, bias, eps } => {
                let (r, c) = (nodes[id].rows, nodes[id].cols);
                let xv = &nodes[*x].values;
                let gv = &nodes[*gain].values;
                let n = r as f64;
                let xg = nodes[*x].needs_grad;
                let gg = nodes[*gain].needs_grad;
                let bg = nodes[*bias].needs_grad;
                if xg {
                    ensure(*x, lower);
                }
                if gg {
                    ensure(*gain, lower);
                }
                if bg {
                    ensure(*bias, lower);
                }
                for t in 0..c {
                    let mut mean = 0.0;
                    for i in 0..r {
                        mean += xv[i * c + t];
                    }
                    mean /= n;
                    let mut var = 0.0;
                    for i in 0..r {
                        let d = xv[i * c + t] - mean;
                        var += d * d;
                    }
                    var /= n;
                    let inv = 1.0 / (var + eps).sqrt();
                    if xg {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for i in 0..r {
                            let xhat = (xv[i * c + t] - mean) * inv;
                            let ggrad = g[i * c + t] * gv[i];
                            s1 += ggrad;
                            s2 += ggrad * xhat;
                        }
                        let dx = lower[*x].as_deref_mut().unwrap();
                        for i in 0..r {
                            let xhat = (xv[i * c + t] - mean) * inv;
                            let ggrad = g[i * c + t] * gv[i];
                            dx[i * c + t] += inv * (ggrad - s1 / n - xhat * s2 / n);
                        }
                    }
                    if gg {
                        let dgain = lower[*gain].as_deref_mut().unwrap();
                        for i in 0..r {
                            let xhat = (xv[i * c + t] - mean) * inv;
                            dgain[i] += g[i * c + t] * xhat;
                        }
                    }
                    if bg {
                        let dbias = lower[*bias].as_deref_mut().unwrap();
                        for i in 0..r {
                            dbias[i] += g[i * c + t];
                        }
                    }
                }
            }
            Op::RmsNormCols { x, gain, eps } => {
                let (r, c) = (nodes[id].rows, nodes[id].cols);
                let xv = &nodes[*x].values;
                let gv = &nodes[*gain].values;
                let n = r as f64;
                let xg = nodes[*x].needs_grad;
                let gg = nodes[*gain].needs_grad;
                if xg {
                    ensure(*x, lower);
                }
                if gg {
                    ensure(*gain, lower);
                }
                for t in 0..c {
                    let mut ms = 0.0;
                    for i in 0..r {
                        let v = xv[i * c + t];
                        ms += v * v;
                    }
                    ms /= n;
                    let inv = 1.0 / (ms + eps).sqrt();
                    if xg {
                        let mut s = 0.0;
                        for i in 0..r {
                            s += g[i * c + t] * gv[i] * xv[i * c + t];
                        }
                        let inv3 = inv * inv * inv;
                        let dx = lower[*x].as_deref_mut().unwrap();
                        for i in 0..r {
                            dx[i * c + t] +=
                                gv[i] * g[i * c + t] * inv - xv[i * c + t] * s * inv3 / n;
                        }
                    }
                    if gg {
                        let dgain = lower[*gain].as_deref_mut().unwrap();
                        for i in 0..r {
                            dgain[i] += g[i * c + t] * xv[i * c + t] * inv;
                        }
                    }
                }
            }
            Op::SoftmaxVec { x } => {
                if nodes[*x].needs_grad {
                    let y = &nodes[id].values;
                    let dot: f64 = g.iter().zip(y).map(|(gv, yv)| gv * yv).sum();
                    ensure(*x, lower);
                    let dx = lower[*x].as_deref_mut().unwrap();
                    for i in 0..y.len() {
                        dx[i] += y[i] * (g[i] - dot);
                    }
                }
            }
            Op::CausalScores { q, k, inv_scale } => {
                let t = nodes[id].rows;
                let d = nodes[*q].cols;
                let qv = &nodes[*q].values;
                let kv = &nodes[*k].values;
                let qg = nodes[*q].needs_grad;
                let kg = nodes[*k].needs_grad;
                if qg {
                    ensure(*q, lower);
                }
                if kg {
                    ensure(*k, lower);
                }
                let (dq_opt, dk_opt) = if *q == *k {
                    (lower[*q].take(), None)
                } else {
                    let dq = if qg { lower[*q].take() } else { None };
                    let dk = if kg { lower[*k].take() } else { None };
                    (dq, dk)
                };
                let mut dq = dq_opt;
                let mut dk = dk_opt;
                for i in 0..t {
                    let grow = &g[i * t..i * t + i + 1];
                    for (j, &gij) in grow.iter().enumerate() {
                        if gij == 0.0 {
                            continue;
                        }
                        let s = gij * inv_scale;
                        if let Some(dq) = dq.as_deref_mut() {
                            for e in 0..d {
                                dq[i * d + e] += s * kv[j * d + e];
                            }
                        }
                        if *q == *k {
                            if let Some(dq) = dq.as_deref_mut() {
                                for e in 0..d {
                                    dq[j * d + e] += s * qv[i * d + e];
                                }
                            }
                        } else if let Some(dk) = dk.as_deref_mut() {
                            for e in 0..d {
                                dk[j * d + e] += s * qv[i * d + e];
                            }
                        }
                    }
                }
                if let Some(b) = dq {
                    lower[*q] = Some(b);
                }
                if let Some(b) = dk {
                    lower[*k] = Some(b);
                }
            }
            Op::CausalSoftmaxRows { x } => {
                if nodes[*x].needs_grad {
                    let t = nodes[id].rows;
                    let y = &nodes[id].values;
                    ensure(*x, lower);
                    let dx = lower[*x].as_deref_mut().unwrap();
                    for i in 0..t {
                        let yr = &y[i * t..i * t + i + 1];
                        let gr = &g[i * t..i * t + i + 1];
                        let dot: f64 = gr.iter().zip(yr).map(|(gv, yv)| gv * yv).sum();
                        let dr = &mut dx[i * t..i * t + i + 1];
                        for j in 0..=i {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::CausalMatmulPruned { a, b, tau } => {
                let t = nodes[*a].rows;
                let d = nodes[*b].cols;
                let av = &nodes[*a].values;
                let bv = &nodes[*b].values;
                let ag = nodes[*a].needs_grad;
                let bg = nodes[*b].needs_grad;
                if ag {
                    ensure(*a, lower);
                }
                if bg {
                    ensure(*b, lower);
                }
                let mut da = if ag { lower[*a].take() } else { None };
                let mut db = if bg { lower[*b].take() } else { None };
                for i in 0..t {
                    let grow = &g[i * d..(i + 1) * d];
                    let arow = &av[i * t..i * t + i + 1];
                    for (j, &aij) in arow.iter().enumerate() {
                        if aij >= *tau && aij != 0.0 {
                            let brow = &bv[j * d..(j + 1) * d];
                            if let Some(da) = da.as_deref_mut() {
                                let mut acc = 0.0;
                                for e in 0..d {
                                    acc += grow[e] * brow[e];
                                }
                                da[i * t + j] += acc;
                            }
                            if let Some(db) = db.as_deref_mut() {
                                for e in 0..d {
                                    db[j * d + e] += aij * grow[e];
                                }
                            }
                        }
                    }
                }
                if let Some(bbuf) = da {
                    lower[*a] = Some(bbuf);
                }
                if let Some(bbuf) = db {
                    lower[*b] = Some(bbuf);
                }
            }
            Op::CausalAttention { q, k, v, inv_scale, tau, probs } => {
                let t = nodes[id].rows;
                let d = nodes[*q].cols;
                for &input in &[*q, *k, *v] {
                    if nodes[input].needs_grad && lower[input].is_none() {
                        let len = nodes[input].values.len();
                        lower[input] = Some(zeroed_buf(pool, len));
                    }
                }
                let qv = &nodes[*q].values;
                let kv = &nodes[*k].values;
                let vv = &nodes[*v].values;
                let triangle = &stash[*probs];
                let mut dq_buf = if nodes[*q].needs_grad { lower[*q].take() } else { None };
                let mut dk_buf = if nodes[*k].needs_grad { lower[*k].take() } else { None };
                let mut dv_buf = if nodes[*v].needs_grad { lower[*v].take() } else { None };
                let mut dprow = take_buf(pool, t);
                for i in 0..t {
                    let grow = &g[i * d..(i + 1) * d];
                    // Rows with no incoming gradient contribute exact zeros
                    // everywhere below, so they can be skipped outright.
                    if grow.iter().all(|&gv| gv == 0.0) {
                        continue;
                    }
                    // The forward pass stashed this probability row, so the
                    // pruning decisions replay bit-for-bit.
                    let row = &triangle[i * (i + 1) / 2..(i + 1) * (i + 2) / 2];
                    let dpr = &mut dprow[..=i];
                    if d == 1 {
                        let g0 = grow[0];
                        for ((dp, &p), &vj) in dpr.iter_mut().zip(row.iter()).zip(vv) {
                            *dp = if p >= *tau && p != 0.0 { g0 * vj } else { 0.0 };
                        }
                        if let Some(dv) = dv_buf.as_deref_mut() {
                            for (dvj, &p) in dv.iter_mut().zip(row.iter()) {
                                *dvj += if p >= *tau && p != 0.0 { p * g0 } else { 0.0 };
                            }
                        }
                    } else {
                        for (j, dp) in dpr.iter_mut().enumerate() {
                            let p = row[j];
                            if p >= *tau && p != 0.0 {
                                let vrow = &vv[j * d..(j + 1) * d];
                                let mut acc = 0.0;
                                for e in 0..d {
                                    acc += grow[e] * vrow[e];
                                }
                                *dp = acc;
                            } else {
                                *dp = 0.0;
                            }
                        }
                        if let Some(dv) = dv_buf.as_deref_mut() {
                            for (j, &p) in row.iter().enumerate() {
                                if p >= *tau && p != 0.0 {
                                    for e in 0..d {
                                        dv[j * d + e] += p * grow[e];
                                    }
                                }
                            }
                        }
                    }
                    // Softmax backward: ds_j = p_j * (dp_j - <p, dp>). The
                    // dot runs over the whole prefix; pruned entries hold
                    // dp = 0 yet still receive gradient through the shared
                    // normalizer, exactly like the unfused path.
                    let dot = dot4(row, dpr);
                    if d == 1 {
                        // Fold the scale into the score gradient in place;
                        // dp is not needed past this point.
                        for (dp, &p) in dpr.iter_mut().zip(row.iter()) {
                            *dp = (p * (*dp - dot)) * inv_scale;
                        }
                        if let Some(dq) = dq_buf.as_deref_mut() {
                            dq[i] += dot4(dpr, &kv[..=i]);
                        }
                        if let Some(dk) = dk_buf.as_deref_mut() {
                            let qi = qv[i];
                            for (dkj, &dsj) in dk.iter_mut().zip(dpr.iter()) {
                                *dkj += dsj * qi;
                            }
                        }
                    } else {
                        for (j, (&p, &dp)) in row.iter().zip(dpr.iter()).enumerate() {
                            let s = (p * (dp - dot)) * inv_scale;
                            if let Some(dq) = dq_buf.as_deref_mut() {
                                for e in 0..d {
                                    dq[i * d + e] += s * kv[j * d + e];
                                }
                            }
                            if let Some(dk) = dk_buf.as_deref_mut() {
                                for e in 0..d {
                                    dk[j * d + e] += s * qv[i * d + e];
                                }
                            }
                        }
                    }
                }
                pool.push(dprow);
                if let Some(b) = dq_buf {
                    lower[*q] = Some(b);
                }
                if let Some(b) = dk_buf {
                    lower[*k] = Some(b);
                }
                if let Some(b) = dv_buf {
                    lower[*v] = Some(b);
                }
            }
            Op::Relu { x } => {
                if nodes[*x].needs_grad {
                    let xv = &nodes[*x].values;
                    ensure(*x, lower);
                    let dx = lower[*x].as_deref_mut().unwrap();
                    for i in 0..xv.len() {
                        if xv[i] > 0.0 {
                            dx[i] += g[i];
                        }
                    }
                }
            }
            Op::MseLoss { pred, targets } => {
                if nodes[*pred].needs_grad {
                    let pv = &nodes[*pred].values;
                    let m = targets.len() as f64;
                    let g0 = g[0];
                    ensure(*pred, lower);
                    let dp = lower[*pred].as_deref_mut().unwrap();
                    for i in 0..targets.len() {
                        dp[i] += g0 * 2.0 * (pv[i] - targets[i]) / m;
                    }
                }
            }
            Op::L1Norm { x } => {
                if nodes[*x].needs_grad {
                    let xv = &nodes[*x].values;
                    let g0 = g[0];
                    ensure(*x, lower);
                    let dx = lower[*x].as_deref_mut().unwrap();
                    for i in 0..xv.len() {
                        dx[i] += g0 * xv[i].signum() * f64::from(xv[i] != 0.0);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, v: &[f64]) -> Tensor2 {
        Tensor2::new(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t2(1, 4, &[1.0, 2.0, 3.0, 4.0]);
        let k = t2(1, 2, &[0.0, 1.0]);
        let y = conv1d_depthwise_causal(&x, &k, 1).unwrap();
        assert_eq!(y.values(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv_pure_delay_kernel() {
        let x = t2(1, 4, &[1.0, 2.0, 3.0, 4.0]);
        let k = t2(1, 2, &[1.0, 0.0]);
        let y = conv1d_depthwise_causal(&x, &k, 1).unwrap();
        assert_eq!(y.values(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn conv_dilated_sum() {
        let x = t2(1, 4, &[1.0, 1.0, 1.0, 1.0]);
        let k = t2(1, 2, &[1.0, 1.0]);
        let y = conv1d_depthwise_causal(&x, &k, 2).unwrap();
        assert_eq!(y.values(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = t2(2, 4, &[0.0; 8]);
        let k = t2(3, 2, &[0.0; 6]);
        assert!(matches!(conv1d_depthwise_causal(&x, &k, 1), Err(Error::Shape(_))));
    }

    /// Direct-sum reference convolution, deliberately written index-first.
    fn conv_oracle(x: &[f64], k: &[f64], d: usize) -> Vec<f64> {
        let t_len = x.len();
        let mut out = vec![0.0; t_len];
        for t in 0..t_len {
            for (j, &kj) in k.iter().enumerate() {
                let lag = (k.len() - 1 - j) * d;
                let idx = t as i64 - lag as i64;
                if idx >= 0 {
                    out[t] += kj * x[idx as usize];
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_sum_oracle() {
        let mut state = 0x1234_5678_u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        for k_len in 1..=6 {
            for &d in &[1usize, 2, 4] {
                let t_len = 64;
                let x: Vec<f64> = (0..t_len).map(|_| next()).collect();
                let k: Vec<f64> = (0..k_len).map(|_| next()).collect();
                let got = conv1d_depthwise_causal(
                    &t2(1, t_len, &x),
                    &t2(1, k_len, &k),
                    d,
                )
                .unwrap();
                let want = conv_oracle(&x, &k, d);
                for (g, w) in got.values().iter().zip(&want) {
                    assert!((g - w).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rmsnorm_examples() {
        assert_eq!(rmsnorm(&[0.0, 0.0], &[1.0, 1.0], 1e-8).unwrap(), vec![0.0, 0.0]);
        let y = rmsnorm(&[3.0, 4.0], &[1.0, 1.0], 0.0).unwrap();
        assert!((y[0] - 0.848528).abs() < 1e-6);
        assert!((y[1] - 1.131371).abs() < 1e-6);
        let y = rmsnorm(&[5.0], &[2.0], 0.0).unwrap();
        assert!((y[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn layernorm_examples() {
        let y = layernorm(&[7.5, 7.5, 7.5], &[1.0; 3], &[0.0; 3], 1e-8).unwrap();
        assert_eq!(y, vec![0.0, 0.0, 0.0]);
        let y = layernorm(&[1.0, 3.0], &[1.0, 1.0], &[0.0, 0.0], 0.0).unwrap();
        assert_eq!(y, vec![-1.0, 1.0]);
        let y = layernorm(&[1.0, 3.0], &[2.0, 2.0], &[5.0, 5.0], 0.0).unwrap();
        assert_eq!(y, vec![3.0, 7.0]);
    }

    #[test]
    fn softmax_examples() {
        let y = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for v in &y {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(softmax(&[42.0]).unwrap(), vec![1.0]);
        let y = softmax(&[0.0, f64::NEG_INFINITY]).unwrap();
        assert_eq!(y, vec![1.0, 0.0]);
        assert!(matches!(
            softmax(&[f64::NEG_INFINITY, f64::NEG_INFINITY]),
            Err(Error::DegenerateMask)
        ));
    }

    #[test]
    fn backward_square() {
        // loss = theta^2 at theta = 3 -> d loss / d theta = 6
        let theta = Tensor2::param(1, 1, vec![3.0]).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(&theta).unwrap();
        let loss = tape.matmul(v, v).unwrap();
        assert_eq!(tape.value(loss), &[9.0]);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(v).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let theta = Tensor2::param(1, 1, vec![2.0]).unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(&theta).unwrap();
        let loss = tape.matmul(v, v).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::TapeConsumed)));
        tape.reset();
        let v = tape.leaf(&theta).unwrap();
        let loss = tape.matmul(v, v).unwrap();
        assert!(tape.backward(loss).is_ok());
    }

    #[test]
    fn unreached_parameter_has_no_gradient() {
        let used = Tensor2::param(1, 1, vec![2.0]).unwrap();
        let unused = Tensor2::param(1, 1, vec![5.0]).unwrap();
        let mut tape = Tape::new();
        let u = tape.leaf(&used).unwrap();
        let w = tape.leaf(&unused).unwrap();
        let loss = tape.matmul(u, u).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(w).is_none());
        assert!(tape.grad(u).is_some());
    }

    #[test]
    fn mse_linear_model_gradient_matches_hand_derivation() {
        // loss = (w*x + b - y)^2 on a single point (x=2, y=5), w=1, b=0.
        // d/dw = 2(wx+b-y)x = 2*(-3)*2 = -12; d/db = 2(wx+b-y) = -6.
        let w = Tensor2::param(1, 1, vec![1.0]).unwrap();
        let b = Tensor2::param(1, 1, vec![0.0]).unwrap();
        let mut tape = Tape::new();
        let wv = tape.leaf(&w).unwrap();
        let bv = tape.leaf(&b).unwrap();
        let x = tape.constant(1, 1, &[2.0]).unwrap();
        let wx = tape.matmul(wv, x).unwrap();
        let pred = tape.add_scalar(wx, bv).unwrap();
        let loss = tape.mse_loss(pred, &[5.0]).unwrap();
        tape.backward(loss).unwrap();
        assert!((tape.grad(wv).unwrap()[0] + 12.0).abs() < 1e-12);
        assert!((tape.grad(bv).unwrap()[0] + 6.0).abs() < 1e-12);
    }

    /// Central finite differences against the analytic gradient for a
    /// composed graph touching every op kind.
    #[test]
    fn finite_difference_composite_graph() {
        let n = 3;
        let t_len = 7;
        let mut state = 0xfeed_beef_u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let x_data: Vec<f64> = (0..n * t_len).map(|_| next()).collect();
        let kern: Vec<f64> = (0..n * 2).map(|_| next()).collect();
        let gain: Vec<f64> = (0..n).map(|_| 1.0 + 0.1 * next()).collect();
        let bias: Vec<f64> = (0..n).map(|_| 0.1 * next()).collect();
        let proj: Vec<f64> = (0..n * n).map(|_| next()).collect();
        let alpha: Vec<f64> = (0..n).map(|_| next()).collect();
        let targets: Vec<f64> = (0..t_len).map(|_| next()).collect();

        let eval = |kern: &[f64], proj: &[f64], alpha: &[f64]| -> f64 {
            let kt = Tensor2::param(n, 2, kern.to_vec()).unwrap();
            let pt = Tensor2::param(n, n, proj.to_vec()).unwrap();
            let at = Tensor2::param(n, 1, alpha.to_vec()).unwrap();
            let gt = Tensor2::param(n, 1, gain.clone()).unwrap();
            let bt = Tensor2::param(n, 1, bias.clone()).unwrap();
            let mut tape = Tape::new();
            let x = tape.constant(n, t_len, &x_data).unwrap();
            let k = tape.leaf(&kt).unwrap();
            let p = tape.leaf(&pt).unwrap();
            let a = tape.leaf(&at).unwrap();
            let gn = tape.leaf(&gt).unwrap();
            let bs = tape.leaf(&bt).unwrap();

            let w = tape.softmax_vec(a).unwrap();
            let xw = tape.scale_rows(x, w).unwrap();
            let cv = tape.conv1d(xw, k, 2).unwrap();
            let ln = tape.layernorm_cols(cv, gn, bs, 1e-8).unwrap();
            let rn = tape.rmsnorm_cols(ln, gn, 1e-8).unwrap();
            let rl = tape.relu(rn).unwrap();
            let f = tape.transpose(rl).unwrap();
            let q = tape.matmul(f, p).unwrap();
            let sc = tape.causal_scores(q, q, 1.0 / (n as f64).sqrt()).unwrap();
            let aw = tape.causal_softmax_rows(sc).unwrap();
            let av = tape.causal_matmul_pruned(aw, f, 0.0).unwrap();
            let back = tape.transpose(av).unwrap();
            let y = tape.add(rl, back).unwrap();
            let first = tape.col_slice(y, 0, t_len).unwrap();
            let hw = tape.constant(1, n, &vec![1.0; n]).unwrap();
            let pred = tape.matmul(hw, first).unwrap();
            let mse = tape.mse_loss(pred, &targets).unwrap();
            let l1 = tape.l1_norm(k).unwrap();
            let loss = tape.add_scaled(mse, l1, 0.01).unwrap();
            tape.value(loss)[0]
        };

        let grads = {
            let kt = Tensor2::param(n, 2, kern.clone()).unwrap();
            let pt = Tensor2::param(n, n, proj.clone()).unwrap();
            let at = Tensor2::param(n, 1, alpha.clone()).unwrap();
            let gt = Tensor2::param(n, 1, gain.clone()).unwrap();
            let bt = Tensor2::param(n, 1, bias.clone()).unwrap();
            let mut tape = Tape::new();
            let x = tape.constant(n, t_len, &x_data).unwrap();
            let k = tape.leaf(&kt).unwrap();
            let p = tape.leaf(&pt).unwrap();
            let a = tape.leaf(&at).unwrap();
            let gn = tape.leaf(&gt).unwrap();
            let bs = tape.leaf(&bt).unwrap();
            let w = tape.softmax_vec(a).unwrap();
            let xw = tape.scale_rows(x, w).unwrap();
            let cv = tape.conv1d(xw, k, 2).unwrap();
            let ln = tape.layernorm_cols(cv, gn, bs, 1e-8).unwrap();
            let rn = tape.rmsnorm_cols(ln, gn, 1e-8).unwrap();
            let rl = tape.relu(rn).unwrap();
            let f = tape.transpose(rl).unwrap();
            let q = tape.matmul(f, p).unwrap();
            let sc = tape.causal_scores(q, q, 1.0 / (n as f64).sqrt()).unwrap();
            let aw = tape.causal_softmax_rows(sc).unwrap();
            let av = tape.causal_matmul_pruned(aw, f, 0.0).unwrap();
            let back = tape.transpose(av).unwrap();
            let y = tape.add(rl, back).unwrap();
            let first = tape.col_slice(y, 0, t_len).unwrap();
            let hw = tape.constant(1, n, &vec![1.0; n]).unwrap();
            let pred = tape.matmul(hw, first).unwrap();
            let mse = tape.mse_loss(pred, &targets).unwrap();
            let l1 = tape.l1_norm(k).unwrap();
            let loss = tape.add_scaled(mse, l1, 0.01).unwrap();
            tape.backward(loss).unwrap();
            (
                tape.grad(k).unwrap().to_vec(),
                tape.grad(p).unwrap().to_vec(),
                tape.grad(a).unwrap().to_vec(),
            )
        };

        let h = 1e-6;
        let check = |analytic: &[f64], base: &[f64], which: usize| {
            for i in 0..base.len() {
                let mut plus = base.to_vec();
                let mut minus = base.to_vec();
                plus[i] += h;
                minus[i] -= h;
                let (fp, fm) = match which {
                    0 => (eval(&plus, &proj, &alpha), eval(&minus, &proj, &alpha)),
                    1 => (eval(&kern, &plus, &alpha), eval(&kern, &minus, &alpha)),
                    _ => (eval(&kern, &proj, &plus), eval(&kern, &proj, &minus)),
                };
                let fd = (fp - fm) / (2.0 * h);
                let denom = analytic[i].abs().max(fd.abs()).max(1e-6);
                assert!(
                    (analytic[i] - fd).abs() / denom < 1e-4,
                    "param set {which} index {i}: analytic {} vs fd {fd}",
                    analytic[i]
                );
            }
        };
        check(&grads.0, &kern, 0);
        check(&grads.1, &proj, 1);
        check(&grads.2, &alpha, 2);
    }

    #[test]
    fn polynomial_exp_matches_the_standard_library() {
        // Sweep the whole useful range; a few ulp is far below every
        // tolerance the attention stack relies on.
        for i in 0..200_000 {
            let x = -(i as f64) * 350.0 / 200_000.0;
            let got = exp_nonpos(x);
            let want = x.exp();
            let rel = (got - want).abs() / want.max(f64::MIN_POSITIVE);
            assert!(rel < 1e-13, "exp({x}): got {got}, want {want}");
        }
        assert_eq!(exp_nonpos(0.0), 1.0);
        assert_eq!(exp_nonpos(-800.0), 0.0);
        // At the underflow boundary double rounding may differ from the
        // standard library by one subnormal step at most.
        let boundary = exp_nonpos(-745.0);
        assert!((boundary - (-745.0f64).exp()).abs() <= 1e-323);
        assert!(exp_nonpos(f64::NAN).is_nan());
    }

    fn attention_inputs(t_len: usize, d: usize) -> (Tensor2, Tensor2, Tensor2) {
        let gen = |s: usize, scale: f64| {
            Tensor2::param(
                t_len,
                d,
                (0..t_len * d)
                    .map(|i| ((i * 31 + s * 17) % 13) as f64 / 13.0 * scale - 0.4)
                    .collect(),
            )
            .unwrap()
        };
        (gen(1, 1.3), gen(2, 0.9), gen(3, 1.1))
    }

    #[test]
    fn fused_attention_matches_the_composed_ops() {
        // The long low-threshold cases drive rows whose entries all fall
        // under tau, exercising the fully-pruned regime the short cases
        // never reach.
        for &(t_len, d, tau) in &[
            (7usize, 1usize, 0.0),
            (7, 1, 0.2),
            (6, 2, 0.0),
            (6, 2, 0.15),
            (128, 1, 0.01),
            (96, 2, 0.01),
        ] {
            let (qt, kt, vt) = attention_inputs(t_len, d);
            let inv_scale = 1.0 / (d as f64).sqrt();

            let mut fused = Tape::new();
            let (fq, fk, fv) =
                (fused.leaf(&qt).unwrap(), fused.leaf(&kt).unwrap(), fused.leaf(&vt).unwrap());
            let fy = fused.causal_attention(fq, fk, fv, inv_scale, tau).unwrap();

            let mut comp = Tape::new();
            let (cq, ck, cv) =
                (comp.leaf(&qt).unwrap(), comp.leaf(&kt).unwrap(), comp.leaf(&vt).unwrap());
            let sc = comp.causal_scores(cq, ck, inv_scale).unwrap();
            let aw = comp.causal_softmax_rows(sc).unwrap();
            let cy = comp.causal_matmul_pruned(aw, cv, tau).unwrap();

            for (a, b) in fused.value(fy).iter().zip(comp.value(cy)) {
                assert!((a - b).abs() <= 1e-14, "t={t_len} d={d} tau={tau}: {a} vs {b}");
            }

            // Same reduction to a scalar on both tapes, then compare every
            // input gradient.
            let targets = vec![0.3; t_len];
            let fp = fused.col_slice(fy, 0, 1).unwrap();
            let fr = fused.transpose(fp).unwrap();
            let fl = fused.mse_loss(fr, &targets).unwrap();
            fused.backward(fl).unwrap();
            let cp = comp.col_slice(cy, 0, 1).unwrap();
            let cr = comp.transpose(cp).unwrap();
            let cl = comp.mse_loss(cr, &targets).unwrap();
            comp.backward(cl).unwrap();
            for (f, c) in [(fq, cq), (fk, ck), (fv, cv)] {
                let fg = fused.grad(f).unwrap();
                let cg = comp.grad(c).unwrap();
                for (a, b) in fg.iter().zip(cg) {
                    assert!(
                        (a - b).abs() <= 1e-13,
                        "grad t={t_len} d={d} tau={tau}: {a} vs {b}"
                    );
                }
            }
        }
    }

    #[test]
    fn fused_attention_gradients_pass_a_finite_difference_check() {
        let (t_len, d, tau) = (6usize, 2usize, 0.12);
        let (qt, kt, vt) = attention_inputs(t_len, d);
        let inv_scale = 1.0 / (d as f64).sqrt();
        let targets: Vec<f64> = (0..t_len).map(|i| (i as f64 * 0.7).cos()).collect();

        let eval = |qd: &Tensor2, kd: &Tensor2, vd: &Tensor2| -> f64 {
            let mut tape = Tape::new();
            let (q, k, v) =
                (tape.leaf(qd).unwrap(), tape.leaf(kd).unwrap(), tape.leaf(vd).unwrap());
            let y = tape.causal_attention(q, k, v, inv_scale, tau).unwrap();
            let first = tape.col_slice(y, 0, 1).unwrap();
            let row = tape.transpose(first).unwrap();
            let loss = tape.mse_loss(row, &targets).unwrap();
            tape.value(loss)[0]
        };

        let mut tape = Tape::new();
        let (q, k, v) =
            (tape.leaf(&qt).unwrap(), tape.leaf(&kt).unwrap(), tape.leaf(&vt).unwrap());
        let y = tape.causal_attention(q, k, v, inv_scale, tau).unwrap();
        let first = tape.col_slice(y, 0, 1).unwrap();
        let row = tape.transpose(first).unwrap();
        let loss = tape.mse_loss(row, &targets).unwrap();
        tape.backward(loss).unwrap();

        let h = 1e-6;
        for (which, base) in [(0, &qt), (1, &kt), (2, &vt)] {
            let analytic = tape.grad([q, k, v][which]).unwrap().to_vec();
            for idx in 0..base.len() {
                let mut plus = base.clone();
                let mut minus = base.clone();
                plus.values_mut()[idx] += h;
                minus.values_mut()[idx] -= h;
                let (fp, fm) = match which {
                    0 => (eval(&plus, &kt, &vt), eval(&minus, &kt, &vt)),
                    1 => (eval(&qt, &plus, &vt), eval(&qt, &minus, &vt)),
                    _ => (eval(&qt, &kt, &plus), eval(&qt, &kt, &minus)),
                };
                let fd = (fp - fm) / (2.0 * h);
                let denom = analytic[idx].abs().max(fd.abs()).max(1e-6);
                assert!(
                    (analytic[idx] - fd).abs() / denom < 1e-4,
                    "input {which} index {idx}: analytic {} vs fd {fd}",
                    analytic[idx]
                );
            }
        }
    }

    #[test]
    fn fused_attention_rejects_aliased_inputs() {
        let (qt, kt, _) = attention_inputs(4, 1);
        let mut tape = Tape::new();
        let q = tape.leaf(&qt).unwrap();
        let k = tape.leaf(&kt).unwrap();
        assert!(tape.causal_attention(q, q, k, 1.0, 0.0).is_err());
    }

    #[test]
    fn causal_softmax_rows_sum_to_one_and_mask_is_exact() {
        let t_len = 9;
        let vals: Vec<f64> = (0..t_len * t_len).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let mut tape = Tape::new();
        let x = tape.constant(t_len, t_len, &vals).unwrap();
        let y = tape.causal_softmax_rows(x).unwrap();
        let yv = tape.value(y);
        for i in 0..t_len {
            let sum: f64 = yv[i * t_len..i * t_len + i + 1].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            for j in i + 1..t_len {
                assert_eq!(yv[i * t_len + j], 0.0);
            }
        }
    }

    #[test]
    fn conv_is_causal_under_future_perturbation() {
        let t_len = 16;
        let x: Vec<f64> = (0..t_len).map(|i| (i as f64).sin()).collect();
        let k = t2(1, 3, &[0.4, -0.2, 0.9]);
        let base = conv1d_depthwise_causal(&t2(1, t_len, &x), &k, 2).unwrap();
        for cut in 0..t_len - 1 {
            let mut fut = x.clone();
            for v in fut.iter_mut().skip(cut + 1) {
                *v += 3.5;
            }
            let pert = conv1d_depthwise_causal(&t2(1, t_len, &fut), &k, 2).unwrap();
            for t in 0..=cut {
                assert_eq!(base.values()[t], pert.values()[t], "leak at t={t}, cut={cut}");
            }
        }
    }
}
