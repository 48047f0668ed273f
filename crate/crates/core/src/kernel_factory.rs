//! Delay-beamspace box grid, per-axis sinc kernels, rank-R eigen-factors and modulation vectors.
//!
//! Kernels operate in normalized coordinates: frequencies are measured in units of the pilot
//! spacing and antenna positions in units of the element spacing of their axis, so a span is
//! dimensionless (`T·Δf_pil`, `Φ·d`). At Nyquist sampling every span equals one.
//!
//! Box indices are zero-based. Box `n` of an axis with `N` boxes and span `s` is centered at
//! `offset + (n − (N−1)/2)·s/N`. The delay offset is `−s/2`: the channel carries delays through
//! `exp(−2πi f τ)`, so causal delays in `[0, T]` occupy the box interval `[−T, 0]`. Spatial
//! axes are centered on zero.
//!
//! The H axis pairs with the antenna row coordinate and the V axis with the column coordinate.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::channel_model::{ArrayGeometry, OfdmGrid};
use crate::linalg::{self, kron};
use crate::{Error, Result, C64};

/// Largest dense operator (in complex entries) the oracle builders will allocate.
pub const DENSE_ORACLE_LIMIT: usize = 1 << 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Delay,
    Horizontal,
    Vertical,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Delay, Axis::Horizontal, Axis::Vertical];

    pub fn index(self) -> usize {
        match self {
            Axis::Delay => 0,
            Axis::Horizontal => 1,
            Axis::Vertical => 2,
        }
    }
}

/// `sin(πx)/(πx)` with `sinc(0) = 1`.
pub fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-8 {
        let px = PI * x;
        1.0 - px * px / 6.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Sinc kernel of one axis, optionally modulated to a specific box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisKernel {
    pub axis: Axis,
    /// Normalized span of the axis domain.
    pub span: f64,
    pub n_boxes: usize,
    /// `None` for the unmodulated (indexless) kernel.
    pub box_index: Option<usize>,
}

impl AxisKernel {
    pub fn new(axis: Axis, span: f64, n_boxes: usize) -> Result<Self> {
        if !(span > 0.0 && span.is_finite()) {
            return Err(Error::invalid(format!("{axis:?} span must be positive")));
        }
        if n_boxes == 0 {
            return Err(Error::invalid(format!("{axis:?} axis needs at least one box")));
        }
        Ok(AxisKernel {
            axis,
            span,
            n_boxes,
            box_index: None,
        })
    }

    pub fn with_box(&self, n: usize) -> Result<Self> {
        if n >= self.n_boxes {
            return Err(Error::invalid(format!("box index {n} out of range 0..{}", self.n_boxes)));
        }
        Ok(AxisKernel {
            box_index: Some(n),
            ..*self
        })
    }

    pub fn indexless(&self) -> Self {
        AxisKernel {
            box_index: None,
            ..*self
        }
    }

    pub fn box_width(&self) -> f64 {
        self.span / self.n_boxes as f64
    }

    pub fn offset(&self) -> f64 {
        match self.axis {
            Axis::Delay => -0.5 * self.span,
            _ => 0.0,
        }
    }

    pub fn box_center(&self, n: usize) -> f64 {
        self.offset() + (n as f64 - 0.5 * (self.n_boxes as f64 - 1.0)) * self.box_width()
    }

    pub fn value(&self, z: f64, zp: f64) -> C64 {
        let d = z - zp;
        let w = self.box_width();
        let base = w * sinc(d * w);
        match self.box_index {
            None => C64::new(base, 0.0),
            Some(n) => C64::from_polar(base, 2.0 * PI * d * self.box_center(n)),
        }
    }
}

pub fn kernel_value(k: &AxisKernel, z: f64, zp: f64) -> C64 {
    k.value(z, zp)
}

/// Gram matrix `[k(z_i, z_j)]` on the given sample points.
pub fn build_kernel_matrix(k: &AxisKernel, points: &[f64]) -> DMatrix<C64> {
    build_cross_matrix(k, points, points)
}

/// Cross matrix `[k(r_i, c_j)]`.
pub fn build_cross_matrix(k: &AxisKernel, rows: &[f64], cols: &[f64]) -> DMatrix<C64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| k.value(rows[i], cols[j]))
}

/// Unit-modulus vector `exp(2πi·z_m·c_n)` that turns the indexless kernel into box `n`'s.
pub fn modulation_vector(k: &AxisKernel, box_index: usize, points: &[f64]) -> Result<Vec<C64>> {
    if box_index >= k.n_boxes {
        return Err(Error::invalid(format!("box index {box_index} out of range 0..{}", k.n_boxes)));
    }
    let c = k.box_center(box_index);
    Ok(points.iter().map(|&z| C64::from_polar(1.0, 2.0 * PI * z * c)).collect())
}

/// Rank-R factor `S = [√λ₁v₁, …, √λ_R v_R]` of one Hermitian PSD matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisFactor {
    /// Retained eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    pub factor: DMatrix<C64>,
    /// Trace of the decomposed matrix; `trace − Σ eigenvalues` is the discarded mass.
    pub trace: f64,
}

impl AxisFactor {
    pub fn discarded_mass(&self) -> f64 {
        self.trace - self.eigenvalues.iter().sum::<f64>()
    }
}

pub fn eigendecompose_and_truncate(matrix: &DMatrix<C64>, rank: usize) -> Result<AxisFactor> {
    let dim = matrix.nrows();
    if matrix.ncols() != dim {
        return Err(Error::shape("kernel matrix", format!("{dim}x{dim}"), format!("{}x{}", dim, matrix.ncols())));
    }
    if rank == 0 || rank > dim {
        return Err(Error::invalid(format!("rank {rank} must lie in 1..={dim}")));
    }
    let eig = linalg::top_eigen(matrix, rank);
    let mut factor = eig.vectors;
    for (r, &lam) in eig.values.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        factor.column_mut(r).scale_mut(s);
    }
    Ok(AxisFactor {
        eigenvalues: eig.values,
        factor,
        trace: matrix.diagonal().iter().map(|z| z.re).sum(),
    })
}

/// Partition of the delay / beam domain into `n1 × n2 × n3` boxes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayBeamGrid {
    /// Delay span `T` in seconds.
    pub delay_span_s: f64,
    /// Row-axis beam span `Φ⁽ʰ⁾` in cycles per meter.
    pub phi_h: f64,
    /// Column-axis beam span `Φ⁽ᵛ⁾` in cycles per meter.
    pub phi_v: f64,
    pub n1: usize,
    pub n2: usize,
    pub n3: usize,
}

impl DelayBeamGrid {
    /// Spans matched to the sampling resolution, box counts equal to the sample counts times
    /// `oversampling`.
    pub fn nyquist(grid: &OfdmGrid, geometry: &ArrayGeometry, oversampling: usize) -> Result<Self> {
        if oversampling == 0 {
            return Err(Error::invalid("oversampling factor must be at least 1"));
        }
        let g = DelayBeamGrid {
            delay_span_s: grid.unambiguous_delay_s(),
            phi_h: 1.0 / geometry.row_spacing_m,
            phi_v: 1.0 / geometry.col_spacing_m,
            n1: grid.n_pilots() * oversampling,
            n2: geometry.n_rows() * oversampling,
            n3: geometry.n_cols() * oversampling,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delay_span_s > 0.0 && self.phi_h > 0.0 && self.phi_v > 0.0) {
            return Err(Error::invalid("delay and beam spans must be positive"));
        }
        if self.n1 == 0 || self.n2 == 0 || self.n3 == 0 {
            return Err(Error::invalid("box counts must be at least 1"));
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.n1, self.n2, self.n3]
    }

    pub fn n_boxes(&self) -> usize {
        self.n1 * self.n2 * self.n3
    }

    /// Flat row of box `(n1, n2, n3)`: `n1` slowest, `n3` fastest.
    pub fn box_index(&self, n1: usize, n2: usize, n3: usize) -> usize {
        (n1 * self.n2 + n2) * self.n3 + n3
    }

    pub fn box_coords(&self, idx: usize) -> [usize; 3] {
        [idx / (self.n2 * self.n3), (idx / self.n3) % self.n2, idx % self.n3]
    }

    /// Box containing a path with the given physical parameters.
    pub fn box_of_path(&self, delay_s: f64, spatial_row: f64, spatial_col: f64) -> [usize; 3] {
        // The channel carries every parameter through exp(−2πi·z·θ), so θ sits at box coordinate −θ.
        let locate = |x: f64, lo: f64, span: f64, n: usize| -> usize {
            let u = ((x - lo) / span * n as f64).floor();
            (u.max(0.0) as usize).min(n - 1)
        };
        [
            locate(-delay_s, -self.delay_span_s, self.delay_span_s, self.n1),
            locate(-spatial_row, -0.5 * self.phi_h, self.phi_h, self.n2),
            locate(-spatial_col, -0.5 * self.phi_v, self.phi_v, self.n3),
        ]
    }
}

/// Normalized sample coordinates of the full frequency grid, the pilot comb and the array.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrids {
    /// All subcarriers, in units of the pilot spacing.
    pub freq_full: Vec<f64>,
    /// Indices of the pilot subcarriers inside `freq_full`.
    pub pilot_rows: Vec<usize>,
    pub rows: Vec<f64>,
    pub cols: Vec<f64>,
    /// Physical size of one normalized unit per axis (Hz, meters, meters).
    pub units: [f64; 3],
}

impl SampleGrids {
    pub fn new(grid: &OfdmGrid, geometry: &ArrayGeometry) -> Self {
        let df = grid.pilot_spacing_hz();
        SampleGrids {
            freq_full: grid.frequencies_hz().iter().map(|f| f / df).collect(),
            pilot_rows: grid.pilot_indices.clone(),
            rows: geometry.positions_row_m.iter().map(|x| x / geometry.row_spacing_m).collect(),
            cols: geometry.positions_col_m.iter().map(|x| x / geometry.col_spacing_m).collect(),
            units: [df, geometry.row_spacing_m, geometry.col_spacing_m],
        }
    }

    pub fn freq_pilot(&self) -> Vec<f64> {
        self.pilot_rows.iter().map(|&i| self.freq_full[i]).collect()
    }

    pub fn n_pilot_samples(&self) -> usize {
        self.pilot_rows.len() * self.rows.len() * self.cols.len()
    }

    pub fn n_full_samples(&self) -> usize {
        self.freq_full.len() * self.rows.len() * self.cols.len()
    }

    /// Sample points of a spatial axis, or the pilot / full frequency points.
    pub fn axis_points(&self, axis: Axis, full: bool) -> Vec<f64> {
        match axis {
            Axis::Delay if full => self.freq_full.clone(),
            Axis::Delay => self.freq_pilot(),
            Axis::Horizontal => self.rows.clone(),
            Axis::Vertical => self.cols.clone(),
        }
    }
}

/// The three indexless axis kernels of a box grid in normalized units.
pub fn axis_kernels(dbg: &DelayBeamGrid, samples: &SampleGrids) -> Result<[AxisKernel; 3]> {
    dbg.validate()?;
    Ok([
        AxisKernel::new(Axis::Delay, dbg.delay_span_s * samples.units[0], dbg.n1)?,
        AxisKernel::new(Axis::Horizontal, dbg.phi_h * samples.units[1], dbg.n2)?,
        AxisKernel::new(Axis::Vertical, dbg.phi_v * samples.units[2], dbg.n3)?,
    ])
}

/// Indexless rank-R factors of all three axes.
#[derive(Debug, Clone)]
pub struct LowRankFactors {
    pub rank: usize,
    pub grid: DelayBeamGrid,
    pub kernels: [AxisKernel; 3],
    pub samples: SampleGrids,
    /// `|F| × R`.
    pub s_t_full: DMatrix<C64>,
    /// `N_pil × R`, the pilot rows of `s_t_full`.
    pub s_t_pilot: DMatrix<C64>,
    pub s_h: DMatrix<C64>,
    pub s_v: DMatrix<C64>,
    pub eig_t: Vec<f64>,
    pub eig_h: Vec<f64>,
    pub eig_v: Vec<f64>,
}

impl LowRankFactors {
    pub fn build(dbg: &DelayBeamGrid, samples: &SampleGrids, rank: usize) -> Result<Self> {
        let kernels = axis_kernels(dbg, samples)?;
        if samples.pilot_rows.iter().any(|&i| i >= samples.freq_full.len()) {
            return Err(Error::invalid("pilot row outside the full frequency grid"));
        }
        let t = eigendecompose_and_truncate(&build_kernel_matrix(&kernels[0], &samples.freq_full), rank)?;
        let h = eigendecompose_and_truncate(&build_kernel_matrix(&kernels[1], &samples.rows), rank)?;
        let v = eigendecompose_and_truncate(&build_kernel_matrix(&kernels[2], &samples.cols), rank)?;
        let s_t_pilot = t.factor.select_rows(samples.pilot_rows.iter());
        Ok(LowRankFactors {
            rank,
            grid: *dbg,
            kernels,
            samples: samples.clone(),
            s_t_full: t.factor,
            s_t_pilot,
            s_h: h.factor,
            s_v: v.factor,
            eig_t: t.eigenvalues,
            eig_h: h.eigenvalues,
            eig_v: v.eigenvalues,
        })
    }

    pub fn from_system(grid: &OfdmGrid, geometry: &ArrayGeometry, dbg: &DelayBeamGrid, rank: usize) -> Result<Self> {
        LowRankFactors::build(dbg, &SampleGrids::new(grid, geometry), rank)
    }

    pub fn r3(&self) -> usize {
        self.rank.pow(3)
    }

    pub fn delay_factor(&self, full: bool) -> &DMatrix<C64> {
        if full {
            &self.s_t_full
        } else {
            &self.s_t_pilot
        }
    }

    pub fn axis_factor(&self, axis: Axis, full: bool) -> &DMatrix<C64> {
        match axis {
            Axis::Delay => self.delay_factor(full),
            Axis::Horizontal => &self.s_h,
            Axis::Vertical => &self.s_v,
        }
    }

    /// Indexless stacked factor `S^T ⊗ S^H ⊗ S^V`, pilot or full frequency grid.
    pub fn stacked(&self, full: bool) -> Result<DMatrix<C64>> {
        let t = self.delay_factor(full);
        let rows = t.nrows() * self.s_h.nrows() * self.s_v.nrows();
        guard("stacked factor", rows * self.r3())?;
        Ok(kron(&kron(t, &self.s_h), &self.s_v))
    }
}

/// Per-axis modulation vectors for every box index.
#[derive(Debug, Clone)]
pub struct ModulationVectors {
    /// `t_full[n1]` has one entry per subcarrier.
    pub t_full: Vec<Vec<C64>>,
    pub t_pilot: Vec<Vec<C64>>,
    pub h: Vec<Vec<C64>>,
    pub v: Vec<Vec<C64>>,
}

impl ModulationVectors {
    pub fn new(factors: &LowRankFactors) -> Result<Self> {
        let per_axis = |k: &AxisKernel, points: &[f64]| -> Result<Vec<Vec<C64>>> {
            (0..k.n_boxes).map(|n| modulation_vector(k, n, points)).collect()
        };
        let s = &factors.samples;
        let t_full = per_axis(&factors.kernels[0], &s.freq_full)?;
        let t_pilot = t_full.iter().map(|f| s.pilot_rows.iter().map(|&i| f[i]).collect()).collect();
        Ok(ModulationVectors {
            t_full,
            t_pilot,
            h: per_axis(&factors.kernels[1], &s.rows)?,
            v: per_axis(&factors.kernels[2], &s.cols)?,
        })
    }

    fn delay(&self, full: bool) -> &[Vec<C64>] {
        if full {
            &self.t_full
        } else {
            &self.t_pilot
        }
    }

    /// `f_n = f^T_{n1} ⊗ f^H_{n2} ⊗ f^V_{n3}` over the pilot or full sample grid.
    pub fn column(&self, n: [usize; 3], full: bool) -> Vec<C64> {
        let t = &self.delay(full)[n[0]];
        let h = &self.h[n[1]];
        let v = &self.v[n[2]];
        let mut out = Vec::with_capacity(t.len() * h.len() * v.len());
        for a in t {
            for b in h {
                for c in v {
                    out.push(a * b * c);
                }
            }
        }
        out
    }
}

fn guard(what: &'static str, requested: usize) -> Result<()> {
    if requested > DENSE_ORACLE_LIMIT {
        return Err(Error::SizeGuard {
            what,
            requested,
            limit: DENSE_ORACLE_LIMIT,
        });
    }
    Ok(())
}

/// `diag(f)·S`.
pub fn modulate_rows(f: &[C64], s: &DMatrix<C64>) -> DMatrix<C64> {
    DMatrix::from_fn(s.nrows(), s.ncols(), |i, j| f[i] * s[(i, j)])
}

/// Explicit `S_n = S^T_{n1} ⊗ S^H_{n2} ⊗ S^V_{n3}` for one box (pilot or full frequency rows).
pub fn dense_atom_operator(factors: &LowRankFactors, mods: &ModulationVectors, n: [usize; 3], full: bool) -> Result<DMatrix<C64>> {
    let g = &factors.grid;
    if n[0] >= g.n1 || n[1] >= g.n2 || n[2] >= g.n3 {
        return Err(Error::invalid(format!("box {n:?} outside grid {:?}", g.dims())));
    }
    let t = factors.delay_factor(full);
    guard("atom operator", t.nrows() * factors.s_h.nrows() * factors.s_v.nrows() * factors.r3())?;
    let st = modulate_rows(&mods.delay(full)[n[0]], t);
    let sh = modulate_rows(&mods.h[n[1]], &factors.s_h);
    let sv = modulate_rows(&mods.v[n[2]], &factors.s_v);
    Ok(kron(&kron(&st, &sh), &sv))
}

/// Box kernel matrix `K_n = K^T_{n1} ⊗ K^H_{n2} ⊗ K^V_{n3}` on the pilot or full grid.
pub fn dense_box_kernel(factors: &LowRankFactors, n: [usize; 3], full: bool) -> Result<DMatrix<C64>> {
    let s = &factors.samples;
    let ft = s.axis_points(Axis::Delay, full);
    let rows = ft.len() * s.rows.len() * s.cols.len();
    guard("box kernel", rows * rows)?;
    let [kt, kh, kv] = factors.kernels;
    let t = build_kernel_matrix(&kt.with_box(n[0])?, &ft);
    let h = build_kernel_matrix(&kh.with_box(n[1])?, &s.rows);
    let v = build_kernel_matrix(&kv.with_box(n[2])?, &s.cols);
    Ok(kron(&kron(&t, &h), &v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::hermitian_eigen;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel_fro(a: &DMatrix<C64>, b: &DMatrix<C64>) -> f64 {
        (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-scale..scale)).collect()
    }

    fn small_factors(n_pil: usize, n_rows: usize, n_cols: usize, stride: usize, rank: usize) -> LowRankFactors {
        let grid = OfdmGrid::new(n_pil * stride, 30e3, 3.5e9, stride).unwrap();
        let lam = grid.wavelength_m();
        let geom = ArrayGeometry::uniform(n_rows, n_cols, lam, lam / 2.0).unwrap();
        let dbg = DelayBeamGrid::nyquist(&grid, &geom, 1).unwrap();
        LowRankFactors::from_system(&grid, &geom, &dbg, rank).unwrap()
    }

    #[test]
    fn diagonal_value_is_box_width() {
        let k = AxisKernel::new(Axis::Horizontal, 2.0, 5).unwrap().with_box(3).unwrap();
        assert_eq!(k.value(0.7, 0.7), C64::new(0.4, 0.0));
    }

    #[test]
    fn indexless_zero_at_sinc_root() {
        let k = AxisKernel::new(Axis::Vertical, 1.0, 4).unwrap();
        // (z − z')·span/N = 1.
        assert!(k.value(4.0, 0.0).norm() < 1e-16);
    }

    #[test]
    fn modulated_over_indexless_is_exponential() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for axis in Axis::ALL {
            let base = AxisKernel::new(axis, 1.3, 6).unwrap();
            for n in 0..6 {
                let k = base.with_box(n).unwrap();
                let (z, zp) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
                let ratio = k.value(z, zp) / base.value(z, zp);
                let offset = if axis == Axis::Delay { -0.65 } else { 0.0 };
                let center = offset + (n as f64 - 2.5) * 1.3 / 6.0;
                let expect = C64::from_polar(1.0, 2.0 * PI * (z - zp) * center);
                assert!((ratio - expect).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn single_point_gram() {
        let k = AxisKernel::new(Axis::Delay, 1.0, 8).unwrap().with_box(2).unwrap();
        let m = build_kernel_matrix(&k, &[0.3]);
        assert_eq!(m.shape(), (1, 1));
        assert!((m[(0, 0)] - C64::new(0.125, 0.0)).norm() < 1e-16);
    }

    #[test]
    fn gram_is_psd_on_random_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let k = AxisKernel::new(Axis::Horizontal, 1.0, 4).unwrap().with_box(1).unwrap();
        let pts = random_points(&mut rng, 8, 4.0);
        let m = build_kernel_matrix(&k, &pts);
        let trace: f64 = m.diagonal().iter().map(|z| z.re).sum();
        let eig = hermitian_eigen(&m);
        assert!(*eig.values.last().unwrap() >= -1e-10 * trace);
        assert!(rel_fro(&m, &m.adjoint()) < 1e-15);
    }

    #[test]
    fn indexless_gram_is_real_symmetric() {
        let k = AxisKernel::new(Axis::Delay, 1.0, 4).unwrap();
        let m = build_kernel_matrix(&k, &[0.0, 0.25, 0.5, 1.75]);
        assert!(m.iter().all(|z| z.im == 0.0));
        assert_eq!(m, m.transpose());
    }

    #[test]
    fn pilot_gram_is_submatrix_of_full() {
        let f = small_factors(8, 2, 2, 4, 2);
        let k = f.kernels[0].with_box(5).unwrap();
        let full = build_kernel_matrix(&k, &f.samples.freq_full);
        let pil = build_kernel_matrix(&k, &f.samples.freq_pilot());
        let sub = full.select_rows(f.samples.pilot_rows.iter()).select_columns(f.samples.pilot_rows.iter());
        assert_eq!(pil, sub);
    }

    #[test]
    fn full_rank_factor_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let k = AxisKernel::new(Axis::Vertical, 1.0, 3).unwrap();
        let m = build_kernel_matrix(&k, &random_points(&mut rng, 6, 3.0));
        let f = eigendecompose_and_truncate(&m, 6).unwrap();
        assert!(rel_fro(&(&f.factor * f.factor.adjoint()), &m) <= 1e-10);
    }

    #[test]
    fn rank_one_exact() {
        let v = DMatrix::from_vec(4, 1, vec![C64::new(1.0, 0.0), C64::new(0.0, 2.0), C64::new(-1.0, 1.0), C64::new(0.5, 0.0)]);
        let m = &v * v.adjoint();
        let f = eigendecompose_and_truncate(&m, 1).unwrap();
        assert!(rel_fro(&(&f.factor * f.factor.adjoint()), &m) <= 1e-12);
    }

    #[test]
    fn rank_too_large_is_rejected() {
        let m = DMatrix::<C64>::identity(3, 3);
        assert!(matches!(eigendecompose_and_truncate(&m, 4), Err(Error::InvalidArgument(_))));
        assert!(matches!(eigendecompose_and_truncate(&m, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn truncation_residual_matches_tail_mass() {
        let k = AxisKernel::new(Axis::Delay, 1.0, 32).unwrap();
        let pts: Vec<f64> = (0..32).map(|m| m as f64).collect();
        let m = build_kernel_matrix(&k, &pts);
        let f = eigendecompose_and_truncate(&m, 3).unwrap();
        let full = hermitian_eigen(&m);
        let tail: f64 = full.values[3..].iter().sum();
        let resid = &m - &f.factor * f.factor.adjoint();
        let resid_trace: f64 = resid.diagonal().iter().map(|z| z.re).sum();
        assert!((resid_trace - tail).abs() <= 1e-10 * full.values.iter().sum::<f64>());
        assert!((f.discarded_mass() - tail).abs() <= 1e-10);
        let tail_sq: f64 = full.values[3..].iter().map(|l| l * l).sum::<f64>().sqrt();
        assert!((resid.norm() - tail_sq).abs() <= 1e-10);
        for (a, b) in f.eigenvalues.iter().zip(&full.values) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn factor_columns_descending() {
        let f = small_factors(16, 4, 4, 4, 3);
        for eig in [&f.eig_t, &f.eig_h, &f.eig_v] {
            assert!(eig.windows(2).all(|w| w[0] >= w[1]));
        }
        assert_eq!(f.s_t_full.shape(), (64, 3));
        assert_eq!(f.s_t_pilot.shape(), (16, 3));
        for (pi, &fi) in f.samples.pilot_rows.iter().enumerate() {
            for r in 0..3 {
                assert_eq!(f.s_t_pilot[(pi, r)], f.s_t_full[(fi, r)]);
            }
        }
    }

    #[test]
    fn center_box_has_unit_modulation() {
        let k = AxisKernel::new(Axis::Horizontal, 1.0, 5).unwrap();
        let f = modulation_vector(&k, 2, &[0.0, 1.0, 2.7, -4.0]).unwrap();
        assert!(f.iter().all(|z| *z == C64::new(1.0, 0.0)));
    }

    #[test]
    fn adjacent_boxes_ratio_is_geometric() {
        let k = AxisKernel::new(Axis::Delay, 1.0, 8).unwrap();
        let delta = 0.25;
        let pts: Vec<f64> = (0..10).map(|m| 1.0 + m as f64 * delta).collect();
        let a = modulation_vector(&k, 3, &pts).unwrap();
        let b = modulation_vector(&k, 4, &pts).unwrap();
        let ratios: Vec<C64> = a.iter().zip(&b).map(|(x, y)| y / x).collect();
        let step = C64::from_polar(1.0, 2.0 * PI * delta / 8.0);
        for w in ratios.windows(2) {
            assert!((w[1] / w[0] - step).norm() < 1e-12);
        }
        assert!(modulation_vector(&k, 8, &pts).is_err());
    }

    #[test]
    fn atom_operator_is_modulated_stacked_factor() {
        let f = small_factors(2, 2, 2, 1, 2);
        let mods = ModulationVectors::new(&f).unwrap();
        let s = f.stacked(false).unwrap();
        for idx in 0..f.grid.n_boxes() {
            let n = f.grid.box_coords(idx);
            let sn = dense_atom_operator(&f, &mods, n, false).unwrap();
            let fn_ = mods.column(n, false);
            let expect = modulate_rows(&fn_, &s);
            assert!((&sn - &expect).camax() <= 1e-12);
        }
    }

    #[test]
    fn center_spatial_boxes_leave_factors_unchanged() {
        let f = small_factors(3, 3, 3, 1, 2);
        let mods = ModulationVectors::new(&f).unwrap();
        assert_eq!(modulate_rows(&mods.h[1], &f.s_h), f.s_h);
        assert_eq!(modulate_rows(&mods.v[1], &f.s_v), f.s_v);
    }

    #[test]
    fn full_rank_atom_reproduces_box_kernel() {
        let f = small_factors(2, 2, 2, 1, 2);
        let mods = ModulationVectors::new(&f).unwrap();
        for idx in [0, 3, 7] {
            let n = f.grid.box_coords(idx);
            let sn = dense_atom_operator(&f, &mods, n, false).unwrap();
            let kn = dense_box_kernel(&f, n, false).unwrap();
            assert!(rel_fro(&(&sn * sn.adjoint()), &kn) <= 1e-10);
        }
    }

    #[test]
    fn lemma_one_on_random_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for axis in Axis::ALL {
            let base = AxisKernel::new(axis, rng.random_range(0.5..2.0), 8).unwrap();
            let pts = random_points(&mut rng, 8, 4.0);
            let k0 = build_kernel_matrix(&base, &pts);
            let eig = hermitian_eigen(&k0);
            for n in 0..8 {
                let kn = build_kernel_matrix(&base.with_box(n).unwrap(), &pts);
                let f = modulation_vector(&base, n, &pts).unwrap();
                for r in 0..8 {
                    let w = nalgebra::DVector::from_iterator(8, (0..8).map(|i| f[i] * eig.vectors[(i, r)]));
                    let resid = &kn * &w - &w * C64::new(eig.values[r], 0.0);
                    assert!(resid.norm() <= 1e-10 * kn.norm());
                }
                let en = hermitian_eigen(&kn);
                for (a, b) in en.values.iter().zip(&eig.values) {
                    assert!((a - b).abs() <= 1e-10 * eig.values[0].abs());
                }
            }
        }
    }

    #[test]
    fn box_of_path_locates_boxes() {
        let g = DelayBeamGrid {
            delay_span_s: 1.0,
            phi_h: 2.0,
            phi_v: 2.0,
            n1: 4,
            n2: 4,
            n3: 4,
        };
        assert_eq!(g.box_of_path(0.0, 0.0, 0.0), [3, 2, 2]);
        assert_eq!(g.box_of_path(0.99, -0.99, 0.99), [0, 3, 0]);
        for i in 0..g.n_boxes() {
            let c = g.box_coords(i);
            assert_eq!(g.box_index(c[0], c[1], c[2]), i);
        }
    }

    proptest! {
        #[test]
        fn kernel_is_hermitian(z in -10.0f64..10.0, zp in -10.0f64..10.0, n in 0usize..7, span in 0.1f64..3.0) {
            let k = AxisKernel::new(Axis::Delay, span, 7).unwrap().with_box(n).unwrap();
            prop_assert!((k.value(z, zp) - k.value(zp, z).conj()).norm() < 1e-14);
        }

        #[test]
        fn product_rule_holds(z in prop::array::uniform3(-4.0f64..4.0), zp in prop::array::uniform3(-4.0f64..4.0), n in prop::array::uniform3(0usize..3)) {
            let ks = [
                AxisKernel::new(Axis::Delay, 1.0, 3).unwrap(),
                AxisKernel::new(Axis::Horizontal, 1.0, 3).unwrap(),
                AxisKernel::new(Axis::Vertical, 1.0, 3).unwrap(),
            ];
            let mut prod = C64::new(1.0, 0.0);
            let mut kt = DMatrix::from_element(1, 1, C64::new(1.0, 0.0));
            for a in 0..3 {
                let k = ks[a].with_box(n[a]).unwrap();
                prod *= k.value(z[a], zp[a]);
                kt = kron(&kt, &build_cross_matrix(&k, &[z[a]], &[zp[a]]));
            }
            prop_assert!((kt[(0, 0)] - prod).norm() < 1e-15);
        }

        #[test]
        fn modulation_unit_modulus(n in 0usize..9, pts in prop::collection::vec(-50.0f64..50.0, 1..10)) {
            let k = AxisKernel::new(Axis::Vertical, 1.7, 9).unwrap();
            for z in modulation_vector(&k, n, &pts).unwrap() {
                prop_assert!((z.norm() - 1.0).abs() < 1e-14);
            }
        }
    }
}
