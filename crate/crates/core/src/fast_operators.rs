//! Structured synthesis operator `𝗦`, its adjoint and the full-grid reconstruction.
//!
//! With the indexless stacked factor `S` (samples × R³) and the box-to-sample modulation
//! matrix `F` (samples × |N|, columns `f_n`), the synthesis of a coefficient matrix `Ã`
//! (|N| × R³, rows `ã_n`) is the row sum of `S ⊙ (F·Ã)`, and the adjoint is `Fᴴ(S* ⊙ e·1ᵀ)`.
//! `F` is separable over the three axes, and on uniform sample grids each axis factor is a
//! phase-ramped DFT, so every column of `F·Ã` costs three batched FFT passes.

use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::channel_model::{ChannelTensor, TensorShape};
use crate::kernel_factory::{self, AxisKernel, DelayBeamGrid, LowRankFactors, ModulationVectors, DENSE_ORACLE_LIMIT};
use crate::linalg::map_lines;
use crate::{Error, Result, C64};

const ZERO: C64 = C64::new(0.0, 0.0);

/// Coefficients `ã_n` of every box, stored row-major as an `|N| × R³` matrix.
///
/// Rows follow the box order of [`DelayBeamGrid::box_index`]; columns follow the Kronecker
/// order of the axis factors (delay rank slowest).
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientState {
    n_boxes: usize,
    r3: usize,
    values: Vec<C64>,
}

impl CoefficientState {
    pub fn zeros(n_boxes: usize, r3: usize) -> Self {
        CoefficientState {
            n_boxes,
            r3,
            values: vec![ZERO; n_boxes * r3],
        }
    }

    pub fn from_values(n_boxes: usize, r3: usize, values: Vec<C64>) -> Result<Self> {
        if values.len() != n_boxes * r3 {
            return Err(Error::shape("coefficient state", n_boxes * r3, values.len()));
        }
        Ok(CoefficientState { n_boxes, r3, values })
    }

    pub fn n_boxes(&self) -> usize {
        self.n_boxes
    }

    pub fn r3(&self) -> usize {
        self.r3
    }

    pub fn values(&self) -> &[C64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [C64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<C64> {
        self.values
    }

    pub fn row(&self, n: usize) -> &[C64] {
        &self.values[n * self.r3..(n + 1) * self.r3]
    }

    pub fn row_mut(&mut self, n: usize) -> &mut [C64] {
        &mut self.values[n * self.r3..(n + 1) * self.r3]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, C64> {
        self.values.chunks_exact(self.r3)
    }

    pub fn row_norm(&self, n: usize) -> f64 {
        crate::linalg::norm_sqr(self.row(n)).sqrt()
    }

    pub fn row_norms(&self) -> Vec<f64> {
        self.rows().map(|r| crate::linalg::norm_sqr(r).sqrt()).collect()
    }

    pub fn norm_sqr(&self) -> f64 {
        crate::linalg::norm_sqr(&self.values)
    }

    pub fn same_shape(&self, other: &CoefficientState) -> bool {
        self.n_boxes == other.n_boxes && self.r3 == other.r3
    }
}

/// One axis of the box-to-sample modulation matrix `F[m, n] = exp(2πi z_m c_n)`.
#[derive(Clone)]
enum AxisTransform {
    Fft {
        n_boxes: usize,
        n_samples: usize,
        len: usize,
        pre: Vec<C64>,
        post: Vec<C64>,
        inverse: Arc<dyn Fft<f64>>,
        forward: Arc<dyn Fft<f64>>,
    },
    Dense(DMatrix<C64>),
}

impl std::fmt::Debug for AxisTransform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AxisTransform::Fft { n_boxes, n_samples, len, .. } => {
                write!(f, "Fft {{ boxes: {n_boxes}, samples: {n_samples}, len: {len} }}")
            }
            AxisTransform::Dense(m) => write!(f, "Dense({}x{})", m.nrows(), m.ncols()),
        }
    }
}

fn uniform_step(points: &[f64]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let d = points[1] - points[0];
    if !(d > 0.0) {
        return None;
    }
    let tol = 1e-9 * (d.abs() * points.len() as f64).max(points[0].abs()).max(1.0);
    points
        .iter()
        .enumerate()
        .all(|(m, &z)| (z - (points[0] + m as f64 * d)).abs() <= tol)
        .then_some(d)
}

impl AxisTransform {
    fn new(kernel: &AxisKernel, points: &[f64], planner: &mut FftPlanner<f64>) -> Self {
        let n = kernel.n_boxes;
        let m = points.len();
        if let Some(delta) = uniform_step(points) {
            let s = kernel.box_width();
            let l_real = 1.0 / (delta * s);
            let len = l_real.round();
            let fits = len >= 1.0 && (l_real - len).abs() <= 1e-9 * l_real && len as usize <= 8 * n.max(m);
            if fits {
                let len = len as usize;
                let h = 0.5 * (n as f64 - 1.0);
                let o = kernel.offset();
                let z0 = points[0];
                let tau = 2.0 * std::f64::consts::PI;
                let pre = (0..n).map(|k| C64::from_polar(1.0, tau * z0 * (k as f64 - h) * s)).collect();
                let post = (0..m)
                    .map(|i| {
                        let phase = points[0] * o + i as f64 * delta * o - i as f64 * h / len as f64;
                        C64::from_polar(1.0, tau * phase)
                    })
                    .collect();
                return AxisTransform::Fft {
                    n_boxes: n,
                    n_samples: m,
                    len,
                    pre,
                    post,
                    inverse: planner.plan_fft_inverse(len),
                    forward: planner.plan_fft_forward(len),
                };
            }
        }
        AxisTransform::Dense(dense_axis_matrix(kernel, points))
    }

    fn is_fft(&self) -> bool {
        matches!(self, AxisTransform::Fft { .. })
    }

    fn n_samples(&self) -> usize {
        match self {
            AxisTransform::Fft { n_samples, .. } => *n_samples,
            AxisTransform::Dense(m) => m.nrows(),
        }
    }

    fn n_boxes(&self) -> usize {
        match self {
            AxisTransform::Fft { n_boxes, .. } => *n_boxes,
            AxisTransform::Dense(m) => m.ncols(),
        }
    }

    /// Boxes to samples.
    fn forward_line(&self, x: &[C64], y: &mut [C64], buf: &mut Vec<C64>) {
        match self {
            AxisTransform::Fft { len, pre, post, inverse, .. } => {
                buf.clear();
                buf.resize(*len, ZERO);
                for (k, (v, p)) in x.iter().zip(pre).enumerate() {
                    buf[k % len] += v * p;
                }
                inverse.process(buf);
                for (i, (out, p)) in y.iter_mut().zip(post).enumerate() {
                    *out = p * buf[i % len];
                }
            }
            AxisTransform::Dense(m) => {
                for (r, out) in y.iter_mut().enumerate() {
                    *out = x.iter().enumerate().map(|(c, v)| m[(r, c)] * v).sum();
                }
            }
        }
    }

    /// Samples to boxes (Hermitian transpose).
    fn adjoint_line(&self, e: &[C64], x: &mut [C64], buf: &mut Vec<C64>) {
        match self {
            AxisTransform::Fft { len, pre, post, forward, .. } => {
                buf.clear();
                buf.resize(*len, ZERO);
                for (i, (v, p)) in e.iter().zip(post).enumerate() {
                    buf[i % len] += v * p.conj();
                }
                forward.process(buf);
                for (k, (out, p)) in x.iter_mut().zip(pre).enumerate() {
                    *out = p.conj() * buf[k % len];
                }
            }
            AxisTransform::Dense(m) => {
                for (c, out) in x.iter_mut().enumerate() {
                    *out = e.iter().enumerate().map(|(r, v)| m[(r, c)].conj() * v).sum();
                }
            }
        }
    }
}

fn dense_axis_matrix(kernel: &AxisKernel, points: &[f64]) -> DMatrix<C64> {
    let tau = 2.0 * std::f64::consts::PI;
    DMatrix::from_fn(points.len(), kernel.n_boxes, |m, n| C64::from_polar(1.0, tau * points[m] * kernel.box_center(n)))
}

/// Separable 3-D box-to-sample transform.
#[derive(Debug, Clone)]
struct Transform3 {
    axes: [AxisTransform; 3],
}

impl Transform3 {
    fn box_dims(&self) -> [usize; 3] {
        [self.axes[0].n_boxes(), self.axes[1].n_boxes(), self.axes[2].n_boxes()]
    }

    fn sample_dims(&self) -> [usize; 3] {
        [self.axes[0].n_samples(), self.axes[1].n_samples(), self.axes[2].n_samples()]
    }

    fn forward(&self, boxes: &[C64]) -> Vec<C64> {
        let mut dims = self.box_dims();
        let mut data = boxes.to_vec();
        let mut buf = Vec::new();
        for (axis, t) in self.axes.iter().enumerate() {
            let out_len = t.n_samples();
            data = map_lines(&data, dims, axis, out_len, |x, y| t.forward_line(x, y, &mut buf));
            dims[axis] = out_len;
        }
        data
    }

    fn adjoint(&self, samples: &[C64]) -> Vec<C64> {
        let mut dims = self.sample_dims();
        let mut data = samples.to_vec();
        let mut buf = Vec::new();
        for (axis, t) in self.axes.iter().enumerate() {
            let out_len = t.n_boxes();
            data = map_lines(&data, dims, axis, out_len, |e, x| t.adjoint_line(e, x, &mut buf));
            dims[axis] = out_len;
        }
        data
    }
}

/// The operator `ã ↦ Σ_n S_n ã_n` on pilot samples, with its adjoint and the full-grid
/// reconstruction `ã ↦ Σ_n S_n(F) ã_n`.
#[derive(Debug, Clone)]
pub struct FastForwardOperator {
    factors: LowRankFactors,
    pilot: Transform3,
    full: Transform3,
    /// Indexless stacked factor on pilot samples, one contiguous column per rank triple.
    s_pilot: DMatrix<C64>,
    s_full: DMatrix<C64>,
    pilot_shape: TensorShape,
    full_shape: TensorShape,
    norm_sqr: std::sync::OnceLock<f64>,
}

impl FastForwardOperator {
    pub fn new(factors: LowRankFactors) -> Result<Self> {
        let s = &factors.samples;
        let [kt, kh, kv] = factors.kernels;
        let mut planner = FftPlanner::new();
        let h = AxisTransform::new(&kh, &s.rows, &mut planner);
        let v = AxisTransform::new(&kv, &s.cols, &mut planner);
        let pilot = Transform3 {
            axes: [AxisTransform::new(&kt, &s.freq_pilot(), &mut planner), h.clone(), v.clone()],
        };
        let full = Transform3 {
            axes: [AxisTransform::new(&kt, &s.freq_full, &mut planner), h, v],
        };
        let s_pilot = factors.stacked(false)?;
        let s_full = factors.stacked(true)?;
        let pilot_shape = TensorShape::new(s.pilot_rows.len(), s.rows.len(), s.cols.len());
        let full_shape = TensorShape::new(s.freq_full.len(), s.rows.len(), s.cols.len());
        Ok(FastForwardOperator {
            factors,
            pilot,
            full,
            s_pilot,
            s_full,
            pilot_shape,
            full_shape,
            norm_sqr: std::sync::OnceLock::new(),
        })
    }

    pub fn factors(&self) -> &LowRankFactors {
        &self.factors
    }

    pub fn grid(&self) -> &DelayBeamGrid {
        &self.factors.grid
    }

    pub fn n_boxes(&self) -> usize {
        self.factors.grid.n_boxes()
    }

    pub fn r3(&self) -> usize {
        self.factors.r3()
    }

    pub fn measurement_len(&self) -> usize {
        self.pilot_shape.len()
    }

    pub fn pilot_shape(&self) -> TensorShape {
        self.pilot_shape
    }

    pub fn full_shape(&self) -> TensorShape {
        self.full_shape
    }

    /// Whether each axis (delay pilot, delay full, H, V) uses the FFT path.
    pub fn uses_fft(&self) -> [bool; 4] {
        [
            self.pilot.axes[0].is_fft(),
            self.full.axes[0].is_fft(),
            self.pilot.axes[1].is_fft(),
            self.pilot.axes[2].is_fft(),
        ]
    }

    pub fn zero_state(&self) -> CoefficientState {
        CoefficientState::zeros(self.n_boxes(), self.r3())
    }

    fn check_state(&self, a: &CoefficientState) -> Result<()> {
        if a.n_boxes != self.n_boxes() || a.r3 != self.r3() {
            return Err(Error::shape(
                "coefficient state",
                format!("{}x{}", self.n_boxes(), self.r3()),
                format!("{}x{}", a.n_boxes, a.r3),
            ));
        }
        Ok(())
    }

    fn synthesize(&self, a: &CoefficientState, t: &Transform3, s: &DMatrix<C64>) -> Vec<C64> {
        let r3 = self.r3();
        let n = self.n_boxes();
        let parts: Vec<Vec<C64>> = (0..r3)
            .into_par_iter()
            .map(|j| {
                let col: Vec<C64> = (0..n).map(|k| a.values[k * r3 + j]).collect();
                if col.iter().all(|z| *z == ZERO) {
                    return Vec::new();
                }
                let mut y = t.forward(&col);
                for (v, sv) in y.iter_mut().zip(s.column(j).iter()) {
                    *v *= sv;
                }
                y
            })
            .collect();
        let mut out = vec![ZERO; s.nrows()];
        for p in parts.iter().filter(|p| !p.is_empty()) {
            for (o, v) in out.iter_mut().zip(p) {
                *o += v;
            }
        }
        out
    }

    pub fn apply(&self, a: &CoefficientState) -> Result<Vec<C64>> {
        self.check_state(a)?;
        Ok(self.synthesize(a, &self.pilot, &self.s_pilot))
    }

    pub fn adjoint(&self, e: &[C64]) -> Result<CoefficientState> {
        if e.len() != self.measurement_len() {
            return Err(Error::shape("measurement vector", self.measurement_len(), e.len()));
        }
        let r3 = self.r3();
        let n = self.n_boxes();
        let cols: Vec<Vec<C64>> = (0..r3)
            .into_par_iter()
            .map(|j| {
                let w: Vec<C64> = e.iter().zip(self.s_pilot.column(j).iter()).map(|(v, s)| s.conj() * v).collect();
                self.pilot.adjoint(&w)
            })
            .collect();
        let mut out = CoefficientState::zeros(n, r3);
        for (j, col) in cols.iter().enumerate() {
            for (k, v) in col.iter().enumerate() {
                out.values[k * r3 + j] = *v;
            }
        }
        Ok(out)
    }

    /// Channel on every subcarrier and antenna.
    pub fn reconstruct(&self, a: &CoefficientState) -> Result<ChannelTensor> {
        self.check_state(a)?;
        let v = self.synthesize(a, &self.full, &self.s_full);
        Ok(ChannelTensor::from_values_unchecked(self.full_shape, v))
    }

    /// `𝗦ᴴ𝗦 a`.
    pub fn gram(&self, a: &CoefficientState) -> Result<CoefficientState> {
        self.adjoint(&self.apply(a)?)
    }

    /// `‖𝗦‖²`, estimated once by power iteration and cached.
    pub fn norm_sqr(&self) -> f64 {
        *self.norm_sqr.get_or_init(|| self.norm_sqr_estimate(100))
    }

    /// Power-iteration estimate of `‖𝗦‖²` (largest eigenvalue of `𝗦ᴴ𝗦`).
    pub fn norm_sqr_estimate(&self, iterations: usize) -> f64 {
        let n = self.n_boxes();
        let r3 = self.r3();
        let mut x = CoefficientState::zeros(n, r3);
        for (i, v) in x.values.iter_mut().enumerate() {
            let ph = 2.0 * std::f64::consts::PI * ((i as f64 + 1.0) * 0.618_033_988_749_895).fract();
            *v = C64::from_polar(1.0, ph);
        }
        let mut est = 0.0;
        for _ in 0..iterations.max(1) {
            let nrm = x.norm_sqr().sqrt();
            if nrm == 0.0 {
                return 0.0;
            }
            for v in &mut x.values {
                *v /= nrm;
            }
            let y = self.gram(&x).expect("shapes are internal");
            est = crate::linalg::inner(&y.values, &x.values).re;
            x = y;
        }
        est
    }

    fn guard(&self, what: &'static str, rows: usize) -> Result<()> {
        let requested = rows * self.n_boxes() * self.r3();
        if requested > DENSE_ORACLE_LIMIT {
            return Err(Error::SizeGuard {
                what,
                requested,
                limit: DENSE_ORACLE_LIMIT,
            });
        }
        Ok(())
    }

    /// Explicit `[S_1, …, S_|N|]` block matrix on pilot or full samples.
    pub fn dense_matrix(&self, full: bool) -> Result<DMatrix<C64>> {
        let rows = if full { self.full_shape.len() } else { self.pilot_shape.len() };
        self.guard("dense operator", rows)?;
        let mods = ModulationVectors::new(&self.factors)?;
        let r3 = self.r3();
        let mut out = DMatrix::zeros(rows, self.n_boxes() * r3);
        for idx in 0..self.n_boxes() {
            let n = self.grid().box_coords(idx);
            let sn = kernel_factory::dense_atom_operator(&self.factors, &mods, n, full)?;
            out.columns_mut(idx * r3, r3).copy_from(&sn);
        }
        Ok(out)
    }

    /// Matrix-free evaluation of `Σ_n diag(f_n)·S·ã_n` without any transform, costing
    /// `O(|N|·samples·R³)`.
    pub fn apply_direct(&self, a: &CoefficientState, mods: &ModulationVectors) -> Result<Vec<C64>> {
        self.check_state(a)?;
        let m = self.measurement_len();
        let g = *self.grid();
        let chunks: Vec<Vec<C64>> = (0..g.n_boxes())
            .into_par_iter()
            .fold(
                || vec![ZERO; m],
                |mut acc, idx| {
                    let row = a.row(idx);
                    if row.iter().all(|z| *z == ZERO) {
                        return acc;
                    }
                    let f = mods.column(g.box_coords(idx), false);
                    for (i, o) in acc.iter_mut().enumerate() {
                        let mut s = ZERO;
                        for (j, c) in row.iter().enumerate() {
                            s += self.s_pilot[(i, j)] * c;
                        }
                        *o += f[i] * s;
                    }
                    acc
                },
            )
            .collect();
        let mut out = vec![ZERO; m];
        for c in chunks {
            for (o, v) in out.iter_mut().zip(c) {
                *o += v;
            }
        }
        Ok(out)
    }
}

/// Reference synthesis through the explicit block matrix.
pub fn apply_dense_oracle(op: &FastForwardOperator, a: &CoefficientState) -> Result<Vec<C64>> {
    op.check_state(a)?;
    let s = op.dense_matrix(false)?;
    Ok((s * nalgebra::DVector::from_column_slice(a.values())).as_slice().to_vec())
}

pub fn adjoint_dense_oracle(op: &FastForwardOperator, e: &[C64]) -> Result<CoefficientState> {
    if e.len() != op.measurement_len() {
        return Err(Error::shape("measurement vector", op.measurement_len(), e.len()));
    }
    let s = op.dense_matrix(false)?;
    let v = s.adjoint() * nalgebra::DVector::from_column_slice(e);
    CoefficientState::from_values(op.n_boxes(), op.r3(), v.as_slice().to_vec())
}

pub fn reconstruct_dense_oracle(op: &FastForwardOperator, a: &CoefficientState) -> Result<ChannelTensor> {
    op.check_state(a)?;
    let s = op.dense_matrix(true)?;
    let v = s * nalgebra::DVector::from_column_slice(a.values());
    ChannelTensor::from_values(op.full_shape(), v.as_slice().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel_model::{ArrayGeometry, OfdmGrid};
    use crate::kernel_factory::SampleGrids;
    use crate::linalg::{inner, norm_sqr};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn operator(n_pil: usize, n_rows: usize, n_cols: usize, stride: usize, rank: usize, over: usize) -> FastForwardOperator {
        let grid = OfdmGrid::new(n_pil * stride, 30e3, 3.5e9, stride).unwrap();
        let lam = grid.wavelength_m();
        let geom = ArrayGeometry::uniform(n_rows, n_cols, lam, lam / 2.0).unwrap();
        let dbg = DelayBeamGrid::nyquist(&grid, &geom, over).unwrap();
        FastForwardOperator::new(LowRankFactors::from_system(&grid, &geom, &dbg, rank).unwrap()).unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<C64> {
        (0..n).map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect()
    }

    fn random_state(rng: &mut ChaCha8Rng, op: &FastForwardOperator) -> CoefficientState {
        CoefficientState::from_values(op.n_boxes(), op.r3(), random_vec(rng, op.n_boxes() * op.r3())).unwrap()
    }

    fn rel(a: &[C64], b: &[C64]) -> f64 {
        let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum();
        (d / norm_sqr(b).max(f64::MIN_POSITIVE)).sqrt()
    }

    #[test]
    fn nyquist_grids_take_the_fft_path() {
        let op = operator(8, 4, 4, 4, 2, 1);
        assert_eq!(op.uses_fft(), [true, true, true, true]);
        let op2 = operator(8, 4, 4, 4, 2, 2);
        assert_eq!(op2.uses_fft(), [true, true, true, true]);
    }

    #[test]
    fn zero_in_zero_out() {
        let op = operator(4, 2, 2, 2, 2, 1);
        assert!(op.apply(&op.zero_state()).unwrap().iter().all(|z| *z == ZERO));
        assert!(op.adjoint(&vec![ZERO; op.measurement_len()]).unwrap().values().iter().all(|z| *z == ZERO));
        assert!(op.reconstruct(&op.zero_state()).unwrap().values().iter().all(|z| *z == ZERO));
        assert!(apply_dense_oracle(&op, &op.zero_state()).unwrap().iter().all(|z| *z == ZERO));
    }

    #[test]
    fn single_atom_is_column_of_its_block() {
        let op = operator(4, 4, 4, 1, 2, 1);
        let mods = ModulationVectors::new(op.factors()).unwrap();
        let idx = op.grid().box_index(1, 3, 2);
        for j in [0, 5] {
            let mut a = op.zero_state();
            a.row_mut(idx)[j] = C64::new(1.0, 0.0);
            let y = op.apply(&a).unwrap();
            let sn = kernel_factory::dense_atom_operator(op.factors(), &mods, [1, 3, 2], false).unwrap();
            assert!(rel(&y, sn.column(j).as_slice()) < 1e-10);
        }
    }

    #[test]
    fn single_atom_is_kronecker_of_axis_vectors() {
        let op = operator(4, 3, 2, 1, 2, 1);
        let mods = ModulationVectors::new(op.factors()).unwrap();
        let f = op.factors();
        let n = [2, 0, 1];
        let idx = op.grid().box_index(n[0], n[1], n[2]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let at = random_vec(&mut rng, 2);
        let ah = random_vec(&mut rng, 2);
        let av = random_vec(&mut rng, 2);
        let mut a = op.zero_state();
        for (p, x) in at.iter().enumerate() {
            for (q, y) in ah.iter().enumerate() {
                for (r, z) in av.iter().enumerate() {
                    a.row_mut(idx)[(p * 2 + q) * 2 + r] = x * y * z;
                }
            }
        }
        let axis = |s: &DMatrix<C64>, fm: &[C64], c: &[C64]| -> Vec<C64> {
            (0..s.nrows()).map(|i| fm[i] * (0..c.len()).map(|r| s[(i, r)] * c[r]).sum::<C64>()).collect()
        };
        let yt = axis(&f.s_t_pilot, &mods.t_pilot[n[0]], &at);
        let yh = axis(&f.s_h, &mods.h[n[1]], &ah);
        let yv = axis(&f.s_v, &mods.v[n[2]], &av);
        let mut expect = Vec::new();
        for x in &yt {
            for y in &yh {
                for z in &yv {
                    expect.push(x * y * z);
                }
            }
        }
        assert!(rel(&apply_dense_oracle(&op, &a).unwrap(), &expect) < 1e-12);
        assert!(rel(&op.apply(&a).unwrap(), &expect) < 1e-10);
    }

    #[test]
    fn matches_dense_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for rank in 1..=3 {
            let op = operator(4, 4, 4, 2, rank, 1);
            for _ in 0..5 {
                let a = random_state(&mut rng, &op);
                assert!(rel(&op.apply(&a).unwrap(), &apply_dense_oracle(&op, &a).unwrap()) < 1e-10);
                let e = random_vec(&mut rng, op.measurement_len());
                let fast = op.adjoint(&e).unwrap();
                let dense = adjoint_dense_oracle(&op, &e).unwrap();
                assert!(rel(fast.values(), dense.values()) < 1e-10);
                let full = op.reconstruct(&a).unwrap();
                let full_dense = reconstruct_dense_oracle(&op, &a).unwrap();
                assert!(rel(full.values(), full_dense.values()) < 1e-10);
            }
        }
    }

    #[test]
    fn dense_fallback_on_non_uniform_grid() {
        let grid = OfdmGrid::new(4, 30e3, 3.5e9, 1).unwrap();
        let geom = ArrayGeometry {
            row_spacing_m: 0.05,
            col_spacing_m: 0.05,
            positions_row_m: vec![0.0, 0.05, 0.13],
            positions_col_m: vec![0.0, 0.05],
        };
        let dbg = DelayBeamGrid::nyquist(&grid, &geom, 1).unwrap();
        let f = LowRankFactors::build(&dbg, &SampleGrids::new(&grid, &geom), 2).unwrap();
        let op = FastForwardOperator::new(f).unwrap();
        assert_eq!(op.uses_fft(), [true, true, false, true]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_state(&mut rng, &op);
        assert!(rel(&op.apply(&a).unwrap(), &apply_dense_oracle(&op, &a).unwrap()) < 1e-10);
        let e = random_vec(&mut rng, op.measurement_len());
        assert!(rel(op.adjoint(&e).unwrap().values(), adjoint_dense_oracle(&op, &e).unwrap().values()) < 1e-10);
    }

    #[test]
    fn oversampled_grid_matches_oracle() {
        let op = operator(4, 2, 2, 2, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_state(&mut rng, &op);
        assert!(rel(&op.apply(&a).unwrap(), &apply_dense_oracle(&op, &a).unwrap()) < 1e-10);
        assert!(rel(op.reconstruct(&a).unwrap().values(), reconstruct_dense_oracle(&op, &a).unwrap().values()) < 1e-10);
    }

    #[test]
    fn pilot_rows_of_reconstruction_equal_apply() {
        let op = operator(8, 3, 4, 4, 3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_state(&mut rng, &op);
        let y = op.apply(&a).unwrap();
        let h = op.reconstruct(&a).unwrap();
        let pilots = h.restrict_frequencies(&op.factors().samples.pilot_rows);
        assert!(rel(pilots.values(), &y) < 1e-12);
    }

    #[test]
    fn direct_route_matches_fft() {
        let op = operator(8, 2, 2, 1, 2, 1);
        let mods = ModulationVectors::new(op.factors()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_state(&mut rng, &op);
        assert!(rel(&op.apply_direct(&a, &mods).unwrap(), &op.apply(&a).unwrap()) < 1e-10);
    }

    #[test]
    fn shape_errors() {
        let op = operator(4, 2, 2, 1, 2, 1);
        let bad = CoefficientState::zeros(op.n_boxes() + 1, op.r3());
        assert!(matches!(op.apply(&bad), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(op.reconstruct(&bad), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(op.adjoint(&[ZERO; 3]), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn normalized_operator_is_near_tight() {
        let op = operator(16, 4, 4, 4, 3, 1);
        let l = op.norm_sqr_estimate(50);
        assert!(l > 0.5 && l < 1.5, "‖S‖² = {l}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn adjoint_identity(seed in any::<u64>(), rank in 1usize..=3) {
            let op = operator(4, 3, 3, 2, rank, 1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_state(&mut rng, &op);
            let e = random_vec(&mut rng, op.measurement_len());
            let lhs = inner(&op.apply(&a).unwrap(), &e);
            let rhs = inner(a.values(), op.adjoint(&e).unwrap().values());
            prop_assert!((lhs - rhs).norm() <= 1e-10 * lhs.norm().max(1.0));
        }

        #[test]
        fn apply_is_linear(seed in any::<u64>(), alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
            let op = operator(4, 2, 2, 2, 2, 1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_state(&mut rng, &op);
            let b = random_state(&mut rng, &op);
            let (ca, cb) = (C64::new(alpha, 0.3), C64::new(beta, -0.7));
            let combo: Vec<C64> = a.values().iter().zip(b.values()).map(|(x, y)| ca * x + cb * y).collect();
            let c = CoefficientState::from_values(op.n_boxes(), op.r3(), combo).unwrap();
            let ya = op.apply(&a).unwrap();
            let yb = op.apply(&b).unwrap();
            let expect: Vec<C64> = ya.iter().zip(&yb).map(|(x, y)| ca * x + cb * y).collect();
            prop_assert!(rel(&op.apply(&c).unwrap(), &expect) < 1e-10);
        }
    }
}
