//! Reference estimators, figures of merit and the Monte Carlo evaluation harness.
//!
//! * LS: pilot values copied, other subcarriers take the nearest pilot.
//! * Empirical LMMSE: joint Wiener filter under a separable model
//!   `C ≈ C_F ⊗ C_row ⊗ C_col / P²` (with `P` the mean entry power), applied through the
//!   per-axis eigendecompositions. Frequency interpolation and spatial smoothing happen in the
//!   same filter, so the result equals a dense joint LMMSE whenever the covariance really is
//!   separable.
//! * Genie LMMSE: the covariance of the channel under test with its path phases re-drawn
//!   uniformly, `C = Σ_ℓ |α_ℓ|² a_ℓ a_ℓᴴ`, kept in low-rank form.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel_model::{
    sample_measurements, stream_rng, synthesize_on, ArrayGeometry, ChannelDataset, ChannelTensor,
    MeasurementSet, OfdmGrid, PathSet, TensorShape,
};
use crate::fast_operators::FastForwardOperator;
use crate::linalg::{apply_along_axis, hermitian_eigen, inner, norm_sqr};
use crate::sparse_estimator::{estimate_channel, RkhsSettings};
use crate::unfolded_estimator::{dd_estimate, ScheduleBank};
use crate::{Error, Result, C64};

/// Eigenvalues below this fraction of the largest are dropped when inverting a singular Gram.
pub const PINV_RTOL: f64 = 1e-12;
/// Largest `dimension × paths` the genie covariance will assemble.
pub const GENIE_SIZE_LIMIT: usize = 1 << 26;
/// Largest dense covariance (in entries) built by the Monte Carlo genie construction.
pub const DENSE_COVARIANCE_LIMIT: usize = 1 << 24;
pub const DEFAULT_COVARIANCE_SAMPLES: usize = 5000;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// `‖h − ĥ‖² / ‖h‖²` for one realization.
pub fn nmse(truth: &ChannelTensor, estimate: &ChannelTensor) -> Result<f64> {
    if truth.shape() != estimate.shape() {
        return Err(Error::shape("estimate", truth.shape(), estimate.shape()));
    }
    let energy = truth.norm_sqr();
    if energy == 0.0 {
        return Err(Error::ZeroTruth);
    }
    let err: f64 = truth.values().iter().zip(estimate.values()).map(|(a, b)| (a - b).norm_sqr()).sum();
    Ok(err / energy)
}

/// MRC beamforming gain `|ĥ_fᴴh_f|² / ‖ĥ_f‖²` on every subcarrier (zero where `ĥ_f = 0`).
pub fn beamforming_gains(truth: &ChannelTensor, estimate: &ChannelTensor) -> Result<Vec<f64>> {
    if truth.shape() != estimate.shape() {
        return Err(Error::shape("estimate", truth.shape(), estimate.shape()));
    }
    Ok((0..truth.shape().n_freq)
        .map(|f| {
            let (h, e) = (truth.subcarrier(f), estimate.subcarrier(f));
            let ne = norm_sqr(e);
            if ne == 0.0 {
                0.0
            } else {
                inner(h, e).norm_sqr() / ne
            }
        })
        .collect())
}

/// Downlink rate `(1/T_s) Σ_f log₂(1 + g_f P_BS / N0_UE)` in bit/s, powers in watts.
pub fn achievable_rate(truth: &ChannelTensor, estimate: &ChannelTensor, p_bs_w: f64, n0_ue_w: f64, symbol_time_s: f64) -> Result<f64> {
    if !(p_bs_w >= 0.0 && n0_ue_w > 0.0 && symbol_time_s > 0.0) {
        return Err(Error::invalid("rate needs P_BS >= 0, N0_UE > 0 and T_s > 0"));
    }
    let snr = p_bs_w / n0_ue_w;
    let bits: f64 = beamforming_gains(truth, estimate)?.iter().map(|g| (g * snr).ln_1p() / std::f64::consts::LN_2).sum();
    Ok(bits / symbol_time_s)
}

/// For every subcarrier, the position in `grid.pilot_indices` of its nearest pilot.
pub fn nearest_pilot(grid: &OfdmGrid) -> Vec<usize> {
    let p = &grid.pilot_indices;
    (0..grid.n_subcarriers)
        .map(|m| {
            let mut best = 0;
            for (k, &pk) in p.iter().enumerate() {
                if pk.abs_diff(m) < p[best].abs_diff(m) {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Least squares on the pilots followed by nearest-pilot interpolation.
pub fn ls_estimate(y: &MeasurementSet, grid: &OfdmGrid) -> Result<ChannelTensor> {
    let ys = y.shape();
    if ys.n_freq != grid.n_pilots() {
        return Err(Error::shape("pilot measurements", grid.n_pilots(), ys.n_freq));
    }
    let shape = TensorShape::new(grid.n_subcarriers, ys.n_rows, ys.n_cols);
    let mut out = Vec::with_capacity(shape.len());
    for k in nearest_pilot(grid) {
        out.extend_from_slice(y.values.subcarrier(k));
    }
    Ok(ChannelTensor::from_values_unchecked(shape, out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceSource {
    Empirical { sample_count: usize },
    Genie,
}

/// Separable second-order model of the channel.
#[derive(Debug, Clone)]
pub struct CovarianceModel {
    pub spectral: DMatrix<C64>,
    pub spatial_row: DMatrix<C64>,
    pub spatial_col: DMatrix<C64>,
    pub source: CovarianceSource,
}

fn hermitize(m: &mut DMatrix<C64>) {
    let h = (&*m + m.adjoint()) * C64::new(0.5, 0.0);
    *m = h;
}

impl CovarianceModel {
    /// Mean power of one channel entry.
    pub fn entry_power(&self) -> f64 {
        self.spectral.trace().re / self.spectral.nrows() as f64
    }

    pub fn validate(&self) -> Result<()> {
        for (name, m) in [("spectral", &self.spectral), ("spatial_row", &self.spatial_row), ("spatial_col", &self.spatial_col)] {
            if m.nrows() != m.ncols() {
                return Err(Error::invalid(format!("{name} covariance is not square")));
            }
            if (m - m.adjoint()).norm() > 1e-9 * m.norm().max(f64::MIN_POSITIVE) {
                return Err(Error::invalid(format!("{name} covariance is not Hermitian")));
            }
            let tr = m.trace().re;
            if hermitian_eigen(m).values.iter().any(|&v| v < -1e-10 * tr.abs()) {
                return Err(Error::invalid(format!("{name} covariance is not positive semi-definite")));
            }
        }
        Ok(())
    }
}

/// Sample spectral and per-axis spatial correlation matrices of the first `sample_count`
/// channels.
pub fn estimate_empirical_covariance(channels: &[ChannelTensor], sample_count: usize) -> Result<CovarianceModel> {
    if channels.is_empty() || sample_count == 0 {
        return Err(Error::EmptyDataset);
    }
    if sample_count > channels.len() {
        return Err(Error::invalid(format!(
            "sample_count {sample_count} exceeds the dataset size {}",
            channels.len()
        )));
    }
    let used = &channels[..sample_count];
    let shape = used[0].shape();
    if let Some(h) = used.iter().find(|h| h.shape() != shape) {
        return Err(Error::shape("dataset channel", shape, h.shape()));
    }
    let [nf, nr, nc] = shape.dims();
    let partial: Vec<[DMatrix<C64>; 3]> = used
        .par_iter()
        .map(|h| {
            let v = h.values();
            let xf = DMatrix::from_fn(nf, nr * nc, |f, a| v[f * nr * nc + a]);
            let xr = DMatrix::from_fn(nr, nf * nc, |r, j| v[shape.index(j / nc, r, j % nc)]);
            let xc = DMatrix::from_fn(nc, nf * nr, |c, j| v[shape.index(j / nr, j % nr, c)]);
            [&xf * xf.adjoint(), &xr * xr.adjoint(), &xc * xc.adjoint()]
        })
        .collect();
    let mut acc = [DMatrix::zeros(nf, nf), DMatrix::zeros(nr, nr), DMatrix::zeros(nc, nc)];
    for p in &partial {
        for (a, b) in acc.iter_mut().zip(p) {
            *a += b;
        }
    }
    let s = sample_count as f64;
    let [mut spectral, mut spatial_row, mut spatial_col] = acc;
    spectral /= C64::new(s * (nr * nc) as f64, 0.0);
    spatial_row /= C64::new(s * (nf * nc) as f64, 0.0);
    spatial_col /= C64::new(s * (nf * nr) as f64, 0.0);
    hermitize(&mut spectral);
    hermitize(&mut spatial_row);
    hermitize(&mut spatial_col);
    Ok(CovarianceModel {
        spectral,
        spatial_row,
        spatial_col,
        source: CovarianceSource::Empirical { sample_count },
    })
}

/// Wiener filter for the separable model, precomputed for one pilot pattern.
#[derive(Debug, Clone)]
pub struct KroneckerLmmse {
    n_subcarriers: usize,
    u_f: DMatrix<C64>,
    lam_f: Vec<f64>,
    /// `C_{F,pil}·U_F`.
    cross_f: DMatrix<C64>,
    u_r: DMatrix<C64>,
    lam_r: Vec<f64>,
    u_c: DMatrix<C64>,
    lam_c: Vec<f64>,
    scale: f64,
}

impl KroneckerLmmse {
    pub fn new(cov: &CovarianceModel, grid: &OfdmGrid) -> Result<Self> {
        let nf = grid.n_subcarriers;
        if cov.spectral.nrows() != nf || cov.spectral.ncols() != nf {
            return Err(Error::shape("spectral covariance", nf, cov.spectral.nrows()));
        }
        let p = &grid.pilot_indices;
        let c_pp = cov.spectral.select_rows(p.iter()).select_columns(p.iter());
        let c_fp = cov.spectral.select_columns(p.iter());
        let eig_f = hermitian_eigen(&c_pp);
        let eig_r = hermitian_eigen(&cov.spatial_row);
        let eig_c = hermitian_eigen(&cov.spatial_col);
        let power = cov.entry_power();
        if !(power > 0.0) {
            return Err(Error::invalid("covariance model has zero power"));
        }
        let clamp = |v: Vec<f64>| v.into_iter().map(|x| x.max(0.0)).collect::<Vec<_>>();
        Ok(KroneckerLmmse {
            n_subcarriers: nf,
            cross_f: &c_fp * &eig_f.vectors,
            u_f: eig_f.vectors,
            lam_f: clamp(eig_f.values),
            u_r: eig_r.vectors,
            lam_r: clamp(eig_r.values),
            u_c: eig_c.vectors,
            lam_c: clamp(eig_c.values),
            scale: 1.0 / (power * power),
        })
    }

    pub fn estimate(&self, y: &MeasurementSet) -> Result<ChannelTensor> {
        let ys = y.shape();
        let dims = ys.dims();
        if dims != [self.u_f.nrows(), self.u_r.nrows(), self.u_c.nrows()] {
            return Err(Error::shape(
                "pilot measurements",
                format!("{}x{}x{}", self.u_f.nrows(), self.u_r.nrows(), self.u_c.nrows()),
                ys,
            ));
        }
        let n0 = y.noise_variance;
        let mut z = apply_along_axis(y.vector(), dims, 0, &self.u_f.adjoint());
        z = apply_along_axis(&z, dims, 1, &self.u_r.adjoint());
        z = apply_along_axis(&z, dims, 2, &self.u_c.adjoint());
        let d_max = self.scale * self.lam_f[0] * self.lam_r[0] * self.lam_c[0];
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    let d = self.scale * self.lam_f[i] * self.lam_r[j] * self.lam_c[k];
                    let den = d + n0;
                    let w = if den <= PINV_RTOL * d_max { 0.0 } else { self.scale * self.lam_r[j] * self.lam_c[k] / den };
                    z[(i * dims[1] + j) * dims[2] + k] *= w;
                }
            }
        }
        let mut h = apply_along_axis(&z, dims, 0, &self.cross_f);
        let out_dims = [self.n_subcarriers, dims[1], dims[2]];
        h = apply_along_axis(&h, out_dims, 1, &self.u_r);
        h = apply_along_axis(&h, out_dims, 2, &self.u_c);
        Ok(ChannelTensor::from_values_unchecked(TensorShape::new(out_dims[0], out_dims[1], out_dims[2]), h))
    }
}

/// One-shot convenience wrapper around [`KroneckerLmmse`].
pub fn empirical_lmmse(y: &MeasurementSet, cov: &CovarianceModel, grid: &OfdmGrid) -> Result<ChannelTensor> {
    KroneckerLmmse::new(cov, grid)?.estimate(y)
}

/// Low-rank genie covariance `A Aᴴ` with columns `|α_ℓ| a_ℓ` over the full grid.
#[derive(Debug, Clone)]
pub struct GenieCovariance {
    shape: TensorShape,
    atoms: DMatrix<C64>,
    pilot_rows: Vec<usize>,
}

impl GenieCovariance {
    pub fn new(paths: &PathSet, grid: &OfdmGrid, geometry: &ArrayGeometry) -> Result<Self> {
        paths.validate(None)?;
        let shape = TensorShape::new(grid.n_subcarriers, geometry.n_rows(), geometry.n_cols());
        let requested = shape.len() * paths.len();
        if requested > GENIE_SIZE_LIMIT {
            return Err(Error::SizeGuard {
                what: "genie covariance",
                requested,
                limit: GENIE_SIZE_LIMIT,
            });
        }
        let freqs = grid.frequencies_hz();
        let mut atoms = DMatrix::zeros(shape.len(), paths.len());
        for l in 0..paths.len() {
            let single = single_path(paths, l, C64::new(paths.gains[l].norm(), 0.0));
            let a = synthesize_on(&single, &freqs, geometry)?;
            atoms.set_column(l, &nalgebra::DVector::from_column_slice(a.values()));
        }
        let per_freq = shape.n_rows * shape.n_cols;
        let pilot_rows = grid
            .pilot_indices
            .iter()
            .flat_map(|&f| (f * per_freq)..((f + 1) * per_freq))
            .collect();
        Ok(GenieCovariance { shape, atoms, pilot_rows })
    }

    pub fn rank(&self) -> usize {
        self.atoms.ncols()
    }

    pub fn dense(&self) -> Result<DMatrix<C64>> {
        let n = self.shape.len();
        if n * n > DENSE_COVARIANCE_LIMIT {
            return Err(Error::SizeGuard {
                what: "dense genie covariance",
                requested: n * n,
                limit: DENSE_COVARIANCE_LIMIT,
            });
        }
        Ok(&self.atoms * self.atoms.adjoint())
    }

    /// `ĥ = A (A_pᴴA_p + N0·I)⁺ A_pᴴ y`.
    pub fn estimate(&self, y: &MeasurementSet) -> Result<ChannelTensor> {
        if y.vector().len() != self.pilot_rows.len() {
            return Err(Error::shape("pilot measurements", self.pilot_rows.len(), y.vector().len()));
        }
        let a_p = self.atoms.select_rows(self.pilot_rows.iter());
        let gram = a_p.adjoint() * &a_p;
        let eig = hermitian_eigen(&gram);
        let g_max = eig.values.first().copied().unwrap_or(0.0).max(0.0);
        let rhs = a_p.adjoint() * nalgebra::DVector::from_column_slice(y.vector());
        let mut coef = eig.vectors.adjoint() * rhs;
        for (c, &g) in coef.iter_mut().zip(&eig.values) {
            let den = g.max(0.0) + y.noise_variance;
            *c = if den <= PINV_RTOL * g_max || den == 0.0 { ZERO } else { *c / den };
        }
        let h = &self.atoms * (&eig.vectors * coef);
        Ok(ChannelTensor::from_values_unchecked(self.shape, h.as_slice().to_vec()))
    }
}

fn single_path(paths: &PathSet, l: usize, gain: C64) -> PathSet {
    PathSet {
        gains: vec![gain],
        delays_s: vec![paths.delays_s[l]],
        spatial_freq_row: vec![paths.spatial_freq_row[l]],
        spatial_freq_col: vec![paths.spatial_freq_col[l]],
    }
}

pub fn genie_lmmse(y: &MeasurementSet, paths: &PathSet, grid: &OfdmGrid, geometry: &ArrayGeometry) -> Result<ChannelTensor> {
    GenieCovariance::new(paths, grid, geometry)?.estimate(y)
}

/// Dense covariance from `samples` re-synthesized channels with uniformly re-drawn path
/// phases. Converges to [`GenieCovariance::dense`].
pub fn genie_covariance_monte_carlo<R: Rng + ?Sized>(
    paths: &PathSet,
    grid: &OfdmGrid,
    geometry: &ArrayGeometry,
    samples: usize,
    rng: &mut R,
) -> Result<DMatrix<C64>> {
    let n = grid.n_subcarriers * geometry.n_antennas();
    if n * n > DENSE_COVARIANCE_LIMIT {
        return Err(Error::SizeGuard {
            what: "dense genie covariance",
            requested: n * n,
            limit: DENSE_COVARIANCE_LIMIT,
        });
    }
    if samples == 0 {
        return Err(Error::invalid("at least one sample is required"));
    }
    let mut c = DMatrix::zeros(n, n);
    let mut p = paths.clone();
    for _ in 0..samples {
        for (g, orig) in p.gains.iter_mut().zip(&paths.gains) {
            *g = C64::from_polar(orig.norm(), rng.random_range(0.0..std::f64::consts::TAU));
        }
        let h = nalgebra::DVector::from_vec(synthesize_on(&p, &grid.frequencies_hz(), geometry)?.into_values());
        c += &h * h.adjoint();
    }
    Ok(c / C64::new(samples as f64, 0.0))
}

/// Transmit powers and noise levels of the two link directions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkBudget {
    pub ue_power_dbm: f64,
    pub bs_noise_dbm: f64,
    pub bs_power_dbm: f64,
    pub ue_noise_dbm: f64,
}

impl Default for LinkBudget {
    fn default() -> Self {
        LinkBudget {
            ue_power_dbm: 23.0,
            bs_noise_dbm: -89.0,
            bs_power_dbm: 49.0,
            ue_noise_dbm: -85.0,
        }
    }
}

impl LinkBudget {
    /// Downlink SNR minus uplink SNR for the same channel, before beamforming gain.
    pub fn downlink_offset_db(&self) -> f64 {
        (self.bs_power_dbm - self.ue_noise_dbm) - (self.ue_power_dbm - self.bs_noise_dbm)
    }

    /// Linear channel power gain that produces the given uplink SNR.
    pub fn channel_gain(&self, uplink_snr_db: f64) -> f64 {
        db_to_linear(uplink_snr_db + self.bs_noise_dbm - self.ue_power_dbm)
    }
}

/// An estimator ready to run inside the harness.
#[derive(Clone)]
pub enum Estimator {
    Ls,
    PerfectCsi,
    EmpiricalLmmse(Arc<KroneckerLmmse>),
    GenieLmmse,
    Rkhs {
        op: Arc<FastForwardOperator>,
        settings: RkhsSettings,
    },
    DdRkhs {
        op: Arc<FastForwardOperator>,
        bank: Arc<ScheduleBank>,
    },
}

pub const ESTIMATOR_NAMES: [&str; 6] = ["ls", "perfect-csi", "lmmse", "genie", "rkhs", "dd-rkhs"];

impl Estimator {
    pub fn name(&self) -> &'static str {
        match self {
            Estimator::Ls => "ls",
            Estimator::PerfectCsi => "perfect-csi",
            Estimator::EmpiricalLmmse(_) => "lmmse",
            Estimator::GenieLmmse => "genie",
            Estimator::Rkhs { .. } => "rkhs",
            Estimator::DdRkhs { .. } => "dd-rkhs",
        }
    }

    pub fn estimate(&self, trial: &Trial<'_>) -> Result<ChannelTensor> {
        let y = trial.measurement;
        match self {
            Estimator::Ls => ls_estimate(y, trial.grid),
            Estimator::PerfectCsi => Ok(trial.truth.clone()),
            Estimator::EmpiricalLmmse(f) => f.estimate(y),
            Estimator::GenieLmmse => {
                let paths = trial
                    .paths
                    .ok_or_else(|| Error::invalid("genie LMMSE needs the generating paths of every channel"))?;
                genie_lmmse(y, paths, trial.grid, trial.geometry)
            }
            Estimator::Rkhs { op, settings } => {
                let n0 = y.noise_variance;
                estimate_channel(op, y.vector(), &settings.regularizer(n0), &settings.solver(n0, op))
            }
            Estimator::DdRkhs { op, bank } => dd_estimate(op, y.vector(), bank.select(trial.snr_db)),
        }
    }
}

#[derive(Clone)]
pub struct NamedEstimator {
    pub label: String,
    pub estimator: Estimator,
}

impl NamedEstimator {
    pub fn new(estimator: Estimator) -> Self {
        NamedEstimator {
            label: estimator.name().to_string(),
            estimator,
        }
    }
}

/// Everything an estimator may look at in one trial.
pub struct Trial<'a> {
    pub measurement: &'a MeasurementSet,
    pub truth: &'a ChannelTensor,
    pub paths: Option<&'a PathSet>,
    pub grid: &'a OfdmGrid,
    pub geometry: &'a ArrayGeometry,
    pub snr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonteCarloConfig {
    pub snr_grid_db: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub link: LinkBudget,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        MonteCarloConfig {
            snr_grid_db: vec![-10.0, 0.0, 10.0],
            trials: 100,
            seed: 1,
            link: LinkBudget::default(),
        }
    }
}

/// Averages for one estimator at one SNR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub snr_db: f64,
    pub downlink_snr_db: f64,
    pub estimator: String,
    pub nmse: f64,
    pub nmse_stderr: f64,
    /// Bit/s.
    pub rate: f64,
    pub rate_stderr: f64,
    pub trials: usize,
    /// Trials in which the estimator reported divergence; they are excluded from the means.
    pub failures: usize,
}

pub const CSV_HEADER: &str = "snr_db,estimator,nmse,nmse_stderr,rate,rate_stderr,trials,failures";

impl EvalRecord {
    pub fn nmse_db(&self) -> f64 {
        linear_to_db(self.nmse)
    }

    pub fn failure_rate(&self) -> f64 {
        self.failures as f64 / (self.trials + self.failures).max(1) as f64
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.9e},{:.9e},{:.9e},{:.9e},{},{}",
            self.snr_db, self.estimator, self.nmse, self.nmse_stderr, self.rate, self.rate_stderr, self.trials, self.failures
        )
    }
}

pub fn records_to_csv(records: &[EvalRecord]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

type Outcome = Option<(f64, f64)>;

/// Average NMSE and downlink rate per SNR and estimator.
///
/// Trial `t` at SNR index `s` uses channel `t mod len` (rescaled to unit mean entry power)
/// and noise drawn from stream `(s << 32) | t` of the seed, so every estimator sees the same
/// realizations and results do not depend on thread scheduling.
pub fn run_monte_carlo(dataset: &ChannelDataset, estimators: &[NamedEstimator], cfg: &MonteCarloConfig) -> Result<Vec<EvalRecord>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.trials == 0 || cfg.snr_grid_db.is_empty() || estimators.is_empty() {
        return Err(Error::invalid("Monte Carlo needs trials, SNR points and estimators"));
    }
    let grid = &dataset.grid;
    let geometry = &dataset.geometry;
    let t_s = 1.0 / grid.subcarrier_spacing_hz;
    let p_bs = dbm_to_watts(cfg.link.bs_power_dbm);
    let n0_ue = dbm_to_watts(cfg.link.ue_noise_dbm);
    let mut records = Vec::new();
    for (si, &snr_db) in cfg.snr_grid_db.iter().enumerate() {
        let n0 = db_to_linear(-snr_db);
        let gain = cfg.link.channel_gain(snr_db);
        let outcomes: Vec<Vec<Outcome>> = (0..cfg.trials)
            .into_par_iter()
            .map(|t| -> Result<Vec<Outcome>> {
                let idx = t % dataset.len();
                let mut truth = dataset.channels[idx].clone();
                let ms = truth.mean_square();
                if ms == 0.0 {
                    return Err(Error::ZeroTruth);
                }
                truth.scale(1.0 / ms.sqrt());
                let paths = dataset.paths.as_ref().map(|p| {
                    let mut p = p[idx].clone();
                    p.scale_gains(1.0 / ms.sqrt());
                    p
                });
                let mut rng = stream_rng(cfg.seed, ((si as u64) << 32) | t as u64);
                let y = sample_measurements(&truth, grid, n0, &mut rng)?;
                let trial = Trial {
                    measurement: &y,
                    truth: &truth,
                    paths: paths.as_ref(),
                    grid,
                    geometry,
                    snr_db,
                };
                let mut physical = truth.clone();
                physical.scale(gain.sqrt());
                let perfect = achievable_rate(&physical, &truth, p_bs, n0_ue, t_s)?;
                estimators
                    .iter()
                    .map(|e| match e.estimator.estimate(&trial) {
                        Ok(h) => {
                            let rate = achievable_rate(&physical, &h, p_bs, n0_ue, t_s)?;
                            debug_assert!(rate <= perfect * (1.0 + 1e-9) + 1e-9);
                            Ok(Some((nmse(&truth, &h)?, rate)))
                        }
                        Err(Error::Diverged { .. }) => Ok(None),
                        Err(err) => Err(err),
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        for (k, e) in estimators.iter().enumerate() {
            let ok: Vec<(f64, f64)> = outcomes.iter().filter_map(|o| o[k]).collect();
            let (nm, nm_se) = mean_stderr(&ok.iter().map(|o| o.0).collect::<Vec<_>>());
            let (rate, rate_se) = mean_stderr(&ok.iter().map(|o| o.1).collect::<Vec<_>>());
            records.push(EvalRecord {
                snr_db,
                downlink_snr_db: snr_db + cfg.link.downlink_offset_db(),
                estimator: e.label.clone(),
                nmse: nm,
                nmse_stderr: nm_se,
                rate,
                rate_stderr: rate_se,
                trials: ok.len(),
                failures: cfg.trials - ok.len(),
            });
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel_model::{complex_gaussian, PathBounds, PathGenConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn system(n_sc: usize, stride: usize, rows: usize, cols: usize) -> (OfdmGrid, ArrayGeometry) {
        let grid = OfdmGrid::new(n_sc, 30e3, 3.5e9, stride).unwrap();
        let lam = grid.wavelength_m();
        (grid, ArrayGeometry::uniform(rows, cols, lam, lam / 2.0).unwrap())
    }

    fn tensor(shape: TensorShape, f: impl Fn(usize) -> C64) -> ChannelTensor {
        ChannelTensor::from_values(shape, (0..shape.len()).map(f).collect()).unwrap()
    }

    fn rand_tensor(shape: TensorShape, rng: &mut ChaCha8Rng) -> ChannelTensor {
        ChannelTensor::from_values(shape, (0..shape.len()).map(|_| complex_gaussian(rng, 1.0)).collect()).unwrap()
    }

    fn dataset(n: usize, seed: u64) -> ChannelDataset {
        let (grid, geom) = system(32, 4, 2, 2);
        let cfg = PathGenConfig::compact(&PathBounds::nyquist(&grid, &geom));
        ChannelDataset::generate(&geom, &grid, &cfg, n, seed).unwrap()
    }

    #[test]
    fn nmse_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let shape = TensorShape::new(4, 2, 2);
        let h = rand_tensor(shape, &mut rng);
        assert_eq!(nmse(&h, &h).unwrap(), 0.0);
        assert!((nmse(&h, &ChannelTensor::zeros(shape)).unwrap() - 1.0).abs() < 1e-15);
        let e = rand_tensor(shape, &mut rng);
        let s = (0.01 * h.norm_sqr() / e.norm_sqr()).sqrt();
        let est = tensor(shape, |i| h.values()[i] + e.values()[i] * s);
        assert!((nmse(&h, &est).unwrap() - 0.01).abs() < 1e-12);
        assert_eq!(nmse(&ChannelTensor::zeros(shape), &h).unwrap_err().kind(), "zero-truth");
        assert!(nmse(&h, &ChannelTensor::zeros(TensorShape::new(4, 2, 1))).is_err());
    }

    #[test]
    fn rate_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = TensorShape::new(3, 2, 2);
        let h = rand_tensor(shape, &mut rng);
        let g = beamforming_gains(&h, &h).unwrap();
        for (f, gf) in g.iter().enumerate() {
            assert!((gf - norm_sqr(h.subcarrier(f))).abs() < 1e-12);
        }
        // Orthogonal estimate on every subcarrier.
        let orth = tensor(shape, |i| {
            let (f, a) = (i / 4, i % 4);
            let s = h.subcarrier(f);
            [-s[1].conj(), s[0].conj(), -s[3].conj(), s[2].conj()][a]
        });
        assert!(achievable_rate(&h, &orth, 1.0, 1.0, 1.0).unwrap().abs() < 1e-12);
        assert_eq!(achievable_rate(&h, &ChannelTensor::zeros(shape), 1.0, 1.0, 1.0).unwrap(), 0.0);
        // Single subcarrier, ‖h‖²·P/N0 = 3.
        let one = ChannelTensor::from_values(TensorShape::new(1, 1, 2), vec![C64::new(1.0, 0.0), C64::new(0.0, 1.0)]).unwrap();
        let r = achievable_rate(&one, &one, 1.5, 1.0, 1e-3).unwrap();
        assert!((r - 2.0 / 1e-3).abs() < 1e-9);
    }

    #[test]
    fn perfect_csi_rate_dominates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = TensorShape::new(5, 2, 3);
        for _ in 0..50 {
            let h = rand_tensor(shape, &mut rng);
            let e = rand_tensor(shape, &mut rng);
            let est = tensor(shape, |i| h.values()[i] + e.values()[i] * 0.7);
            assert!(achievable_rate(&h, &est, 2.0, 0.1, 1.0).unwrap() <= achievable_rate(&h, &h, 2.0, 0.1, 1.0).unwrap() + 1e-9);
        }
    }

    #[test]
    fn link_budget_offset() {
        let l = LinkBudget::default();
        assert_eq!(l.downlink_offset_db(), 22.0);
        let g = l.channel_gain(-10.0);
        assert!((linear_to_db(g * dbm_to_watts(l.ue_power_dbm) / dbm_to_watts(l.bs_noise_dbm)) + 10.0).abs() < 1e-9);
    }

    #[test]
    fn nearest_pilot_ties_go_low() {
        let grid = OfdmGrid::new(9, 30e3, 3.5e9, 4).unwrap();
        assert_eq!(grid.pilot_indices, vec![0, 4, 8]);
        assert_eq!(nearest_pilot(&grid), vec![0, 0, 0, 1, 1, 1, 1, 2, 2]);
    }

    #[test]
    fn ls_examples() {
        let (grid, geom) = system(8, 1, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let shape = TensorShape::new(8, 2, 2);
        let h = rand_tensor(shape, &mut rng);
        let y = sample_measurements(&h, &grid, 0.0, &mut rng).unwrap();
        assert_eq!(ls_estimate(&y, &grid).unwrap(), h);
        let _ = geom;

        let grid4 = OfdmGrid::new(16, 30e3, 3.5e9, 4).unwrap();
        let shape = TensorShape::new(16, 2, 2);
        let c = tensor(shape, |i| C64::new(0.3, -1.0 + (i % 4) as f64));
        let y = sample_measurements(&c, &grid4, 0.0, &mut rng).unwrap();
        assert_eq!(ls_estimate(&y, &grid4).unwrap(), c);
    }

    #[test]
    fn ls_pilot_error_matches_noise_variance() {
        let grid = OfdmGrid::new(64, 30e3, 3.5e9, 4).unwrap();
        let shape = TensorShape::new(64, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = rand_tensor(shape, &mut rng);
        let n0 = 0.3;
        let (mut err, mut count) = (0.0, 0usize);
        for _ in 0..400 {
            let y = sample_measurements(&h, &grid, n0, &mut rng).unwrap();
            let est = ls_estimate(&y, &grid).unwrap();
            for &f in &grid.pilot_indices {
                for (a, b) in est.subcarrier(f).iter().zip(h.subcarrier(f)) {
                    err += (a - b).norm_sqr();
                    count += 1;
                }
            }
        }
        let mse = err / count as f64;
        assert!((mse / n0 - 1.0).abs() < 0.05, "mse {mse}");
    }

    fn white_model(nf: usize, nr: usize, nc: usize, sigma2: f64) -> CovarianceModel {
        let id = |n| DMatrix::<C64>::identity(n, n) * C64::new(sigma2, 0.0);
        CovarianceModel {
            spectral: id(nf),
            spatial_row: id(nr),
            spatial_col: id(nc),
            source: CovarianceSource::Genie,
        }
    }

    #[test]
    fn white_covariance_is_scalar_wiener() {
        let grid = OfdmGrid::new(16, 30e3, 3.5e9, 4).unwrap();
        let (s2, n0) = (2.0, 0.5);
        let cov = white_model(16, 2, 3, s2);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = rand_tensor(TensorShape::new(16, 2, 3), &mut rng);
        let y = sample_measurements(&h, &grid, n0, &mut rng).unwrap();
        let est = empirical_lmmse(&y, &cov, &grid).unwrap();
        for f in 0..16 {
            if let Some(k) = grid.pilot_indices.iter().position(|&p| p == f) {
                for (a, b) in est.subcarrier(f).iter().zip(y.values.subcarrier(k)) {
                    assert!((a - b * (s2 / (s2 + n0))).norm() < 1e-12);
                }
            } else {
                assert!(est.subcarrier(f).iter().all(|z| z.norm() < 1e-12));
            }
        }
    }

    fn random_cov(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<C64> {
        let a = DMatrix::from_fn(n, n + 1, |_, _| complex_gaussian(rng, 1.0));
        &a * a.adjoint()
    }

    #[test]
    fn separable_lmmse_matches_dense_joint_oracle() {
        let grid = OfdmGrid::new(12, 30e3, 3.5e9, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cov = CovarianceModel {
            spectral: random_cov(12, &mut rng),
            spatial_row: random_cov(2, &mut rng),
            spatial_col: random_cov(3, &mut rng),
            source: CovarianceSource::Genie,
        };
        cov.validate().unwrap();
        let p = cov.entry_power();
        let joint = cov.spectral.kronecker(&cov.spatial_row).kronecker(&cov.spatial_col) / C64::new(p * p, 0.0);
        let per_freq = 6;
        let rows: Vec<usize> = grid.pilot_indices.iter().flat_map(|&f| f * per_freq..(f + 1) * per_freq).collect();
        let c_hp = joint.select_columns(rows.iter());
        let n0 = 0.2;
        let c_pp = joint.select_rows(rows.iter()).select_columns(rows.iter())
            + DMatrix::<C64>::identity(rows.len(), rows.len()) * C64::new(n0, 0.0);
        let y = MeasurementSet::new(rand_tensor(TensorShape::new(4, 2, 3), &mut rng), n0).unwrap();
        let yv = nalgebra::DVector::from_column_slice(y.vector());
        let oracle = &c_hp * c_pp.lu().solve(&yv).unwrap();
        let est = empirical_lmmse(&y, &cov, &grid).unwrap();
        let err = (nalgebra::DVector::from_column_slice(est.values()) - &oracle).norm() / oracle.norm();
        assert!(err < 1e-10, "err {err}");
    }

    #[test]
    fn lmmse_noiseless_full_rank_stride_one_returns_measurement() {
        let grid = OfdmGrid::new(6, 30e3, 3.5e9, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let cov = CovarianceModel {
            spectral: random_cov(6, &mut rng),
            spatial_row: random_cov(2, &mut rng),
            spatial_col: random_cov(2, &mut rng),
            source: CovarianceSource::Genie,
        };
        let y = MeasurementSet::new(rand_tensor(TensorShape::new(6, 2, 2), &mut rng), 0.0).unwrap();
        let est = empirical_lmmse(&y, &cov, &grid).unwrap();
        let dev = est.values().iter().zip(y.vector()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(dev < 1e-8, "dev {dev}");
    }

    #[test]
    fn lmmse_is_linear() {
        let ds = dataset(20, 1);
        let cov = estimate_empirical_covariance(&ds.channels, 20).unwrap();
        let f = KroneckerLmmse::new(&cov, &ds.grid).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y = sample_measurements(&ds.channels[0], &ds.grid, 0.1, &mut rng).unwrap();
        let alpha = C64::new(-1.3, 0.4);
        let scaled = MeasurementSet::new(tensor(y.shape(), |i| y.vector()[i] * alpha), 0.1).unwrap();
        let (a, b) = (f.estimate(&y).unwrap(), f.estimate(&scaled).unwrap());
        for (x, z) in a.values().iter().zip(b.values()) {
            assert!((x * alpha - z).norm() < 1e-10 * (1.0 + z.norm()));
        }
    }

    #[test]
    fn empirical_covariance_properties() {
        let ds = dataset(30, 2);
        let cov = estimate_empirical_covariance(&ds.channels, 30).unwrap();
        cov.validate().unwrap();
        for m in [&cov.spectral, &cov.spatial_row, &cov.spatial_col] {
            let tr = m.trace().re;
            assert!(hermitian_eigen(m).values.iter().all(|&v| v >= -1e-10 * tr));
        }
        assert!((cov.entry_power() - 1.0).abs() < 1e-9);
        assert_eq!(cov.source, CovarianceSource::Empirical { sample_count: 30 });
        let same = vec![ds.channels[0].clone(); 5];
        let c1 = estimate_empirical_covariance(&same, 5).unwrap();
        let eig = hermitian_eigen(&c1.spectral);
        // One channel per antenna gives at most four independent spectral vectors.
        assert!(eig.values[4] <= 1e-10 * eig.values[0]);
        let one = ChannelTensor::from_values(TensorShape::new(3, 1, 1), vec![C64::new(1.0, 0.0), C64::new(0.0, 2.0), C64::new(-1.0, 1.0)]).unwrap();
        let c = estimate_empirical_covariance(&vec![one.clone(); 4], 4).unwrap();
        let eig = hermitian_eigen(&c.spectral);
        assert!(eig.values[1] <= 1e-12 * eig.values[0]);
        assert!(estimate_empirical_covariance(&[], 1).unwrap_err().kind() == "empty-dataset");
        assert!(estimate_empirical_covariance(&ds.channels, 31).is_err());
    }

    #[test]
    fn genie_single_path_is_rank_one_wiener() {
        let (grid, geom) = system(16, 4, 2, 2);
        let paths = PathSet {
            gains: vec![C64::new(0.6, -0.8)],
            delays_s: vec![0.3 * grid.unambiguous_delay_s()],
            spatial_freq_row: vec![0.1 / geom.row_spacing_m],
            spatial_freq_col: vec![-0.2 / geom.col_spacing_m],
        };
        let cov = GenieCovariance::new(&paths, &grid, &geom).unwrap();
        assert_eq!(cov.rank(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let y = MeasurementSet::new(rand_tensor(TensorShape::new(4, 2, 2), &mut rng), 0.4).unwrap();
        let est = cov.estimate(&y).unwrap();
        let unit = PathSet { gains: vec![C64::new(1.0, 0.0)], ..paths.clone() };
        let a = synthesize_on(&unit, &grid.frequencies_hz(), &geom).unwrap();
        let ap = a.restrict_frequencies(&grid.pilot_indices);
        let g2 = paths.gains[0].norm_sqr();
        let c = inner(y.vector(), ap.values()) * g2 / (g2 * ap.norm_sqr() + 0.4);
        for (e, ai) in est.values().iter().zip(a.values()) {
            assert!((e - ai * c).norm() < 1e-12);
        }
        let far = MeasurementSet::new(y.values.clone(), 1e30).unwrap();
        assert!(cov.estimate(&far).unwrap().norm_sqr() < 1e-25);
    }

    #[test]
    fn genie_monte_carlo_covariance_converges() {
        let ds = dataset(1, 3);
        let paths = &ds.paths.as_ref().unwrap()[0];
        let exact = GenieCovariance::new(paths, &ds.grid, &ds.geometry).unwrap().dense().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let e1 = (genie_covariance_monte_carlo(paths, &ds.grid, &ds.geometry, 100, &mut rng).unwrap() - &exact).norm();
        let e2 = (genie_covariance_monte_carlo(paths, &ds.grid, &ds.geometry, 3000, &mut rng).unwrap() - &exact).norm();
        assert!(e2 < 0.5 * e1, "{e1} {e2}");
        assert!(e2 < 0.1 * exact.norm());
    }

    #[test]
    fn genie_size_guard() {
        let (grid, geom) = system(4096, 4, 8, 8);
        let paths = PathSet {
            gains: vec![C64::new(1.0, 0.0); 300],
            delays_s: vec![0.0; 300],
            spatial_freq_row: vec![0.0; 300],
            spatial_freq_col: vec![0.0; 300],
        };
        assert_eq!(GenieCovariance::new(&paths, &grid, &geom).unwrap_err().kind(), "size-guard");
    }

    #[test]
    fn harness_shapes_and_determinism() {
        let ds = dataset(4, 4);
        let cfg = MonteCarloConfig {
            snr_grid_db: vec![-5.0, 5.0],
            trials: 1,
            seed: 3,
            ..MonteCarloConfig::default()
        };
        let est = [NamedEstimator::new(Estimator::Ls)];
        let r = run_monte_carlo(&ds, &est, &cfg).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r[0].trials, 1);
        assert_eq!(r[0].downlink_snr_db, 17.0);
        let cfg = MonteCarloConfig { trials: 6, ..cfg };
        let a = run_monte_carlo(&ds, &est, &cfg).unwrap();
        let b = run_monte_carlo(&ds, &est, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(records_to_csv(&a), records_to_csv(&b));
        assert_eq!(records_to_csv(&a).lines().count(), 3);
        let empty = ChannelDataset { channels: vec![], paths: None, ..ds.clone() };
        assert!(run_monte_carlo(&empty, &est, &cfg).is_err());
    }

    #[test]
    fn harness_ls_noise_floor_on_stride_one() {
        let (grid, geom) = system(16, 1, 2, 2);
        let cfg_paths = PathGenConfig::compact(&PathBounds::nyquist(&grid, &geom));
        let ds = ChannelDataset::generate(&geom, &grid, &cfg_paths, 10, 5).unwrap();
        let cfg = MonteCarloConfig {
            snr_grid_db: vec![0.0, 10.0],
            trials: 400,
            seed: 8,
            ..MonteCarloConfig::default()
        };
        let r = run_monte_carlo(&ds, &[NamedEstimator::new(Estimator::Ls)], &cfg).unwrap();
        for rec in &r {
            let expect = db_to_linear(-rec.snr_db);
            assert!((rec.nmse / expect - 1.0).abs() < 0.05, "{rec:?}");
        }
    }

    #[test]
    fn genie_beats_ls_and_perfect_rate_dominates() {
        let ds = dataset(20, 6);
        let cfg = MonteCarloConfig {
            snr_grid_db: vec![-10.0, 0.0, 10.0],
            trials: 200,
            seed: 2,
            ..MonteCarloConfig::default()
        };
        let est = [
            NamedEstimator::new(Estimator::Ls),
            NamedEstimator::new(Estimator::GenieLmmse),
            NamedEstimator::new(Estimator::PerfectCsi),
        ];
        let r = run_monte_carlo(&ds, &est, &cfg).unwrap();
        for chunk in r.chunks(3) {
            assert!(chunk[1].nmse <= chunk[0].nmse, "{chunk:?}");
            assert_eq!(chunk[2].nmse, 0.0);
            assert!(chunk[2].rate >= chunk[1].rate && chunk[2].rate >= chunk[0].rate);
        }
    }
}
