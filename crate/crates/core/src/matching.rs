//! Score maps, outlier-bin augmentation, log-domain Sinkhorn and hard
//! match extraction.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureTensor;

pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_LAMBDA: f64 = 0.5;
pub const DEFAULT_SINKHORN_ITERS: usize = 50;
pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.5;

/// M×N matrix of descriptor inner products.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap(pub DMatrix<f64>);

/// (M+1)×(N+1) score map whose last row and column hold `alpha`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedScoreMap {
    values: DMatrix<f64>,
    alpha: f64,
}

impl AugmentedScoreMap {
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Number of source (M) and target (N) points.
    pub fn dims(&self) -> (usize, usize) {
        (self.values.nrows() - 1, self.values.ncols() - 1)
    }

    /// Adds `c` to every entry, border included.
    pub fn shifted(&self, c: f64) -> Self {
        Self {
            values: self.values.add_scalar(c),
            alpha: self.alpha + c,
        }
    }
}

/// Soft assignment with outlier bins. Row marginals are [1,…,1, N] and
/// column marginals [1,…,1, M].
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedAssignment {
    values: DMatrix<f64>,
}

impl AugmentedAssignment {
    pub fn from_matrix(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() < 2 || values.ncols() < 2 {
            return Err(Error::ShapeMismatch("assignment needs at least 2x2 entries".into()));
        }
        if !values.iter().all(|v| v.is_finite() && *v >= 0.0) {
            return Err(Error::InvalidArgument("assignment entries must be finite and ≥ 0".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.values.nrows() - 1, self.values.ncols() - 1)
    }

    pub fn row_targets(&self) -> DVector<f64> {
        let (m, n) = self.dims();
        marginals(m, n as f64)
    }

    pub fn col_targets(&self) -> DVector<f64> {
        let (m, n) = self.dims();
        marginals(n, m as f64)
    }

    /// Max-norm deviation of the row sums from their targets.
    pub fn row_violation(&self) -> f64 {
        (self.values.column_sum() - self.row_targets()).amax()
    }

    /// Max-norm deviation of the column sums from their targets.
    pub fn col_violation(&self) -> f64 {
        (self.values.row_sum().transpose() - self.col_targets()).amax()
    }
}

fn marginals(count: usize, last: f64) -> DVector<f64> {
    let mut v = DVector::from_element(count + 1, 1.0);
    v[count] = last;
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub source: usize,
    pub target: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MatchSet {
    pub matches: Vec<Match>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Match> {
        self.matches.iter()
    }

    /// Unit-weight matches i ↔ i for the first `n` points.
    pub fn identity(n: usize) -> Self {
        Self {
            matches: (0..n)
                .map(|i| Match {
                    source: i,
                    target: i,
                    weight: 1.0,
                })
                .collect(),
        }
    }
}

/// S[i][j] = ⟨f_x^(i), f_y^(j)⟩.
pub fn score_map(fx: &FeatureTensor, fy: &FeatureTensor) -> Result<ScoreMap> {
    if fx.channels() != fy.channels() {
        return Err(Error::ChannelMismatch {
            left: fx.channels(),
            right: fy.channels(),
        });
    }
    Ok(ScoreMap(fx.matrix().tr_mul(fy.matrix())))
}

pub fn augment_scores(s: &ScoreMap, alpha: f64) -> AugmentedScoreMap {
    let (m, n) = s.0.shape();
    let mut values = DMatrix::from_element(m + 1, n + 1, alpha);
    values.view_mut((0, 0), (m, n)).copy_from(&s.0);
    AugmentedScoreMap { values, alpha }
}

/// What [`sinkhorn_backward`] needs from each Sinkhorn iteration: the
/// column-step softmax over i and the row-step softmax over j, either stored
/// or recoverable from the scalings.
#[derive(Debug, Clone)]
pub struct SinkhornTrace {
    lambda: f64,
    shape: (usize, usize),
    iterations: usize,
    steps: TraceSteps,
}

#[derive(Debug, Clone)]
enum TraceSteps {
    Log {
        col_weights: Vec<DMatrix<f64>>,
        row_weights: Vec<DMatrix<f64>>,
    },
    /// Shifted kernel E with P = diag(α)·E·diag(β). Each softmax is
    /// E_ij·row_i·col_j for the per-iteration factors below.
    Scaled {
        e: DMatrix<f64>,
        /// α before the step, and β / b.
        col_factors: Vec<(Vec<f64>, Vec<f64>)>,
        /// α after the step over a, and β.
        row_factors: Vec<(Vec<f64>, Vec<f64>)>,
    },
}

impl SinkhornTrace {
    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Column `j` of the column-step (`row_step = false`) or row-step softmax
    /// of iteration `k`.
    fn weight_column(&self, k: usize, j: usize, row_step: bool, out: &mut [f64]) {
        let rows = self.shape.0;
        match &self.steps {
            TraceSteps::Log { col_weights, row_weights } => {
                let w = if row_step { &row_weights[k] } else { &col_weights[k] };
                out.copy_from_slice(&w.as_slice()[j * rows..(j + 1) * rows]);
            }
            TraceSteps::Scaled { e, col_factors, row_factors } => {
                let col = &e.as_slice()[j * rows..(j + 1) * rows];
                let (r, c) = if row_step { &row_factors[k] } else { &col_factors[k] };
                let cj = c[j];
                for ((o, z), ri) in out.iter_mut().zip(col).zip(r) {
                    *o = z * ri * cj;
                }
            }
        }
    }
}

/// exp(x) for x ≤ 0, within a few ulp of `f64::exp`. Written without
/// branches or libm calls so the Sinkhorn loops vectorize; arguments below
/// −708 return about 1e-308 instead of underflowing.
#[inline(always)]
fn exp_nonpos(x: f64) -> f64 {
    const SHIFTER: f64 = 6755399441055744.0; // 1.5·2⁵², rounds to integer
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    let x = x.max(-708.0);
    let t = x * std::f64::consts::LOG2_E + SHIFTER;
    let n = t - SHIFTER;
    let r = (x - n * LN2_HI) - n * LN2_LO;
    let mut p = 1.0 / 6_227_020_800.0;
    for c in [
        1.0 / 479_001_600.0,
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p * r + c;
    }
    let bits = t.to_bits().wrapping_sub(SHIFTER.to_bits()).wrapping_add(1023) << 52;
    p * f64::from_bits(bits)
}

const LANES: usize = 8;

/// Maximum with independent accumulators so the loop vectorizes.
fn lane_max(xs: &[f64]) -> f64 {
    let mut acc = [f64::NEG_INFINITY; LANES];
    let chunks = xs.chunks_exact(LANES);
    let tail = chunks.remainder();
    for c in chunks {
        for (a, x) in acc.iter_mut().zip(c) {
            *a = if *x > *a { *x } else { *a };
        }
    }
    tail.iter().chain(&acc).fold(f64::NEG_INFINITY, |m, &x| if x > m { x } else { m })
}

/// Dot product with independent accumulators so the loop vectorizes.
fn lane_dot(xs: &[f64], ys: &[f64]) -> f64 {
    let mut acc = [0.0; LANES];
    let (xc, yc) = (xs.chunks_exact(LANES), ys.chunks_exact(LANES));
    let tail: f64 = xc.remainder().iter().zip(yc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in xc.zip(yc) {
        for ((a, p), q) in acc.iter_mut().zip(x).zip(y) {
            *a += p * q;
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Sum with independent accumulators so the loop vectorizes.
fn lane_sum(xs: &[f64]) -> f64 {
    let mut acc = [0.0; LANES];
    let chunks = xs.chunks_exact(LANES);
    let tail = chunks.remainder();
    for c in chunks {
        for (a, x) in acc.iter_mut().zip(c) {
            *a += x;
        }
    }
    acc.iter().sum::<f64>() + tail.iter().sum::<f64>()
}

/// v_j = log b_j − LSE_i(K_ij + u_i); optionally records softmax_i.
fn column_step(
    kernel: &DMatrix<f64>,
    u: &DVector<f64>,
    log_b: &DVector<f64>,
    mut weights: Option<&mut DMatrix<f64>>,
) -> DVector<f64> {
    let rows = kernel.nrows();
    let u = u.as_slice();
    let mut buf = vec![0.0; rows];
    DVector::from_iterator(
        kernel.ncols(),
        (0..kernel.ncols()).map(|j| {
            let col = &kernel.as_slice()[j * rows..(j + 1) * rows];
            for ((b, z), ui) in buf.iter_mut().zip(col).zip(u) {
                *b = z + ui;
            }
            let mx = lane_max(&buf);
            for b in buf.iter_mut() {
                *b = exp_nonpos(*b - mx);
            }
            let sum = lane_sum(&buf);
            if let Some(w) = weights.as_deref_mut() {
                let inv = 1.0 / sum;
                for (dst, b) in w.as_mut_slice()[j * rows..(j + 1) * rows].iter_mut().zip(&buf) {
                    *dst = b * inv;
                }
            }
            log_b[j] - (mx + sum.ln())
        }),
    )
}

/// u_i = log a_i − LSE_j(K_ij + v_j); optionally records softmax_j.
fn row_step(
    kernel: &DMatrix<f64>,
    v: &DVector<f64>,
    log_a: &DVector<f64>,
    weights: Option<&mut DMatrix<f64>>,
) -> DVector<f64> {
    let (rows, cols) = kernel.shape();
    let mut max = vec![f64::NEG_INFINITY; rows];
    for j in 0..cols {
        let vj = v[j];
        let col = &kernel.as_slice()[j * rows..(j + 1) * rows];
        for (mx, z) in max.iter_mut().zip(col) {
            let c = z + vj;
            *mx = if c > *mx { c } else { *mx };
        }
    }
    let mut acc = vec![0.0; rows];
    let mut store = weights;
    for j in 0..cols {
        let vj = v[j];
        let col = &kernel.as_slice()[j * rows..(j + 1) * rows];
        match store.as_deref_mut() {
            Some(w) => {
                let wc = &mut w.as_mut_slice()[j * rows..(j + 1) * rows];
                for ((dst, z), mx) in wc.iter_mut().zip(col).zip(&max) {
                    *dst = exp_nonpos(z + vj - mx);
                }
                for (s, e) in acc.iter_mut().zip(wc.iter()) {
                    *s += e;
                }
            }
            None => {
                for ((s, z), mx) in acc.iter_mut().zip(col).zip(&max) {
                    *s += exp_nonpos(z + vj - mx);
                }
            }
        }
    }
    if let Some(w) = store {
        let inv: Vec<f64> = acc.iter().map(|s| 1.0 / s).collect();
        for wc in w.as_mut_slice().chunks_exact_mut(rows) {
            for (dst, r) in wc.iter_mut().zip(&inv) {
                *dst *= r;
            }
        }
    }
    DVector::from_iterator(rows, (0..rows).map(|i| log_a[i] - (max[i] + acc[i].ln())))
}

fn assemble(kernel: &DMatrix<f64>, u: &DVector<f64>, v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(kernel.nrows(), kernel.ncols(), |i, j| (kernel[(i, j)] + u[i] + v[j]).exp())
}

/// Entropy-regularized transport on an augmented score map.
///
/// Maximizes ⟨S̄, P̄⟩ + λ·H(P̄) under the outlier-bin marginals by alternating
/// log-domain column and row scalings of the kernel exp(S̄/λ). Every
/// iteration ends with the row step, so row sums are exact on return.
pub fn sinkhorn_log(s: &AugmentedScoreMap, lambda: f64, iters: usize) -> Result<AugmentedAssignment> {
    Ok(run_sinkhorn(s, lambda, iters, false)?.0)
}

/// As [`sinkhorn_log`], also recording what [`sinkhorn_backward`] needs.
pub fn sinkhorn_log_traced(
    s: &AugmentedScoreMap,
    lambda: f64,
    iters: usize,
) -> Result<(AugmentedAssignment, SinkhornTrace)> {
    let (p, steps) = run_sinkhorn(s, lambda, iters, true)?;
    let trace = SinkhornTrace {
        lambda,
        shape: s.values.shape(),
        iterations: iters,
        steps: steps.expect("recorded"),
    };
    Ok((p, trace))
}

fn run_sinkhorn(
    s: &AugmentedScoreMap,
    lambda: f64,
    iters: usize,
    record: bool,
) -> Result<(AugmentedAssignment, Option<TraceSteps>)> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::NonPositiveLambda(lambda));
    }
    if iters == 0 {
        return Err(Error::InvalidArgument("sinkhorn needs at least one iteration".into()));
    }
    if !s.values.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite score".into()));
    }
    let (m, n) = s.dims();
    let kernel = &s.values / lambda;
    let a = marginals(m, n as f64);
    let b = marginals(n, m as f64);
    let (values, steps) = match scaled_sinkhorn(&kernel, &a, &b, iters, record) {
        Some(out) => out,
        None => log_sinkhorn(&kernel, &a.map(f64::ln), &b.map(f64::ln), iters, record),
    };
    Ok((AugmentedAssignment { values }, steps))
}

/// Largest product of row and column scalings for which kernel entries lost
/// to underflow stay negligible.
const MAX_SCALING: f64 = 1e250;

/// Sinkhorn on exp(K) with multiplicative scalings: one exponential per
/// entry instead of two per entry per iteration. The kernel is shifted so
/// every row and column peaks at 1; the starting row scaling exp(u = 0)
/// becomes exp(c_i − max c), a global rescale that leaves every iterate
/// unchanged. Returns `None` when a scaling leaves the safe range, in which
/// case the caller falls back to the log domain.
fn scaled_sinkhorn(
    kernel: &DMatrix<f64>,
    a: &DVector<f64>,
    b: &DVector<f64>,
    iters: usize,
    record: bool,
) -> Option<(DMatrix<f64>, Option<TraceSteps>)> {
    let (rows, cols) = kernel.shape();
    let mut c = vec![f64::NEG_INFINITY; rows];
    for col in kernel.as_slice().chunks_exact(rows) {
        for (ci, z) in c.iter_mut().zip(col) {
            *ci = if *z > *ci { *z } else { *ci };
        }
    }
    let mut e = kernel.clone();
    for col in e.as_mut_slice().chunks_exact_mut(rows) {
        for (z, ci) in col.iter_mut().zip(&c) {
            *z -= ci;
        }
        let d = lane_max(col);
        for z in col.iter_mut() {
            *z = exp_nonpos(*z - d);
        }
    }
    let c_max = lane_max(&c);
    let mut alpha: Vec<f64> = c.iter().map(|ci| (ci - c_max).exp()).collect();
    if alpha.iter().any(|x| *x < 1.0 / MAX_SCALING) {
        return None;
    }
    let mut col_factors = Vec::with_capacity(if record { iters } else { 0 });
    let mut row_factors = Vec::with_capacity(if record { iters } else { 0 });
    let mut beta = vec![0.0; cols];
    let mut r = vec![0.0; rows];
    let ok = |x: f64| x.is_finite() && x > 0.0;
    for _ in 0..iters {
        let alpha_before = record.then(|| alpha.clone());
        // Column step: β_j = b_j / Σ_i E_ij α_i.
        for (j, col) in e.as_slice().chunks_exact(rows).enumerate() {
            beta[j] = b[j] / lane_dot(col, &alpha);
            if !ok(beta[j]) {
                return None;
            }
        }
        // Row step: α_i = a_i / Σ_j E_ij β_j.
        r.fill(0.0);
        for (col, bj) in e.as_slice().chunks_exact(rows).zip(&beta) {
            for (ri, z) in r.iter_mut().zip(col) {
                *ri += z * bj;
            }
        }
        for ((ai, ri), target) in alpha.iter_mut().zip(&r).zip(a.iter()) {
            *ai = target / ri;
            if !ok(*ai) {
                return None;
            }
        }
        if let Some(before) = alpha_before {
            col_factors.push((before, beta.iter().zip(b.iter()).map(|(x, y)| x / y).collect()));
            row_factors.push((alpha.iter().zip(a.iter()).map(|(x, y)| x / y).collect(), beta.clone()));
        }
    }
    if lane_max(&alpha) * lane_max(&beta) > MAX_SCALING {
        return None;
    }
    let mut p = e.clone();
    for (col, bj) in p.as_mut_slice().chunks_exact_mut(rows).zip(&beta) {
        for (z, ai) in col.iter_mut().zip(&alpha) {
            *z *= ai * bj;
        }
    }
    let steps = record.then_some(TraceSteps::Scaled { e, col_factors, row_factors });
    Some((p, steps))
}

/// Log-domain iterations, stable for any score range.
fn log_sinkhorn(
    kernel: &DMatrix<f64>,
    log_a: &DVector<f64>,
    log_b: &DVector<f64>,
    iters: usize,
    record: bool,
) -> (DMatrix<f64>, Option<TraceSteps>) {
    let (rows, cols) = kernel.shape();
    let mut u = DVector::zeros(rows);
    let mut v = DVector::zeros(cols);
    let mut col_weights = Vec::new();
    let mut row_weights = Vec::new();
    for _ in 0..iters {
        if record {
            let mut cw = DMatrix::zeros(rows, cols);
            let mut rw = DMatrix::zeros(rows, cols);
            v = column_step(kernel, &u, log_b, Some(&mut cw));
            u = row_step(kernel, &v, log_a, Some(&mut rw));
            col_weights.push(cw);
            row_weights.push(rw);
        } else {
            v = column_step(kernel, &u, log_b, None);
            u = row_step(kernel, &v, log_a, None);
        }
    }
    let steps = record.then_some(TraceSteps::Log { col_weights, row_weights });
    (assemble(kernel, &u, &v), steps)
}

/// Reverse-mode pass through the unrolled iterations. `g_log_p` is the
/// gradient of the loss with respect to log P̄; the result is the gradient
/// with respect to S̄ (border included).
pub fn sinkhorn_backward(trace: &SinkhornTrace, g_log_p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if g_log_p.shape() != trace.shape {
        return Err(Error::ShapeMismatch(format!(
            "gradient {:?} vs assignment {:?}",
            g_log_p.shape(),
            trace.shape
        )));
    }
    let (rows, cols) = trace.shape;
    let mut g_kernel = g_log_p.clone();
    let mut gu = g_log_p.column_sum();
    let mut gv = g_log_p.row_sum().transpose();
    let mut wbuf = vec![0.0; rows];
    let mut row_mul = vec![0.0; rows];
    for k in (0..trace.iterations()).rev() {
        // Row step: ∂u_i/∂(K_ij, v_j) = −softmax_j. `wbuf` holds gu_i·w_ij.
        if let TraceSteps::Scaled { row_factors, .. } = &trace.steps {
            for ((m, r), g) in row_mul.iter_mut().zip(&row_factors[k].0).zip(gu.iter()) {
                *m = r * g;
            }
        }
        for j in 0..cols {
            match &trace.steps {
                TraceSteps::Scaled { e, row_factors, .. } => {
                    let cj = row_factors[k].1[j];
                    for ((o, z), m) in wbuf.iter_mut().zip(&e.as_slice()[j * rows..(j + 1) * rows]).zip(&row_mul) {
                        *o = z * m * cj;
                    }
                }
                TraceSteps::Log { .. } => {
                    trace.weight_column(k, j, true, &mut wbuf);
                    for (o, g) in wbuf.iter_mut().zip(gu.iter()) {
                        *o *= g;
                    }
                }
            }
            let g = &mut g_kernel.as_mut_slice()[j * rows..(j + 1) * rows];
            for (gk, c) in g.iter_mut().zip(&wbuf) {
                *gk -= c;
            }
            gv[j] -= lane_sum(&wbuf);
        }
        // Column step: ∂v_j/∂(K_ij, u_i) = −softmax_i.
        let mut gu_prev = DVector::zeros(rows);
        for j in 0..cols {
            trace.weight_column(k, j, false, &mut wbuf);
            let gvj = gv[j];
            let g = &mut g_kernel.as_mut_slice()[j * rows..(j + 1) * rows];
            for ((gk, wi), gp) in g.iter_mut().zip(&wbuf).zip(gu_prev.iter_mut()) {
                let c = gvj * wi;
                *gk -= c;
                *gp -= c;
            }
        }
        gu = gu_prev;
        gv.fill(0.0);
    }
    Ok(g_kernel / trace.lambda)
}

/// Hard matches: for every source row the best interior column, kept when
/// its mass reaches `tau` and beats the row's outlier bin.
pub fn extract_matches(p: &AugmentedAssignment, tau: f64) -> MatchSet {
    let (m, n) = p.dims();
    let v = &p.values;
    let mut matches = Vec::new();
    for i in 0..m {
        let mut best_j = 0;
        let mut best = f64::NEG_INFINITY;
        for j in 0..n {
            let val = v[(i, j)];
            if val > best {
                best = val;
                best_j = j;
            }
        }
        if n > 0 && best >= tau && best > v[(i, n)] && best > 0.0 {
            matches.push(Match {
                source: i,
                target: best_j,
                weight: best.min(1.0),
            });
        }
    }
    MatchSet { matches }
}
