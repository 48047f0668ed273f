//! System geometry, OFDM grid, synthetic clustered multipath channels and pilot sampling.
//!
//! Subcarrier frequencies are baseband offsets `m·Δf`; the carrier phase is absorbed into
//! the complex path gains. A path with gain `α`, delay `τ` and projected spatial frequencies
//! `(φ_r, φ_c)` contributes `α·exp(−2πi(fτ + x_r φ_r + x_c φ_c))` at subcarrier `f` and
//! antenna position `(x_r, x_c)`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result, C64};

pub mod dataset;

pub use dataset::{ChannelDataset, Container, DatasetHeader};

const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Antenna positions of the base-station array, already projected on its row and column axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub row_spacing_m: f64,
    pub col_spacing_m: f64,
    pub positions_row_m: Vec<f64>,
    pub positions_col_m: Vec<f64>,
}

impl ArrayGeometry {
    /// Uniform rectangular array with the first element at the origin.
    pub fn uniform(n_rows: usize, n_cols: usize, row_spacing_m: f64, col_spacing_m: f64) -> Result<Self> {
        if n_rows == 0 || n_cols == 0 {
            return Err(Error::invalid("array needs at least one row and one column"));
        }
        let g = ArrayGeometry {
            row_spacing_m,
            col_spacing_m,
            positions_row_m: (0..n_rows).map(|i| i as f64 * row_spacing_m).collect(),
            positions_col_m: (0..n_cols).map(|i| i as f64 * col_spacing_m).collect(),
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.row_spacing_m > 0.0 && self.col_spacing_m > 0.0) {
            return Err(Error::invalid("antenna spacings must be positive"));
        }
        for (name, pos) in [("row", &self.positions_row_m), ("column", &self.positions_col_m)] {
            if pos.is_empty() {
                return Err(Error::invalid(format!("no {name} positions")));
            }
            if !pos.iter().all(|x| x.is_finite()) || pos.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::invalid(format!("{name} positions must be finite and strictly increasing")));
            }
        }
        Ok(())
    }

    pub fn n_rows(&self) -> usize {
        self.positions_row_m.len()
    }

    pub fn n_cols(&self) -> usize {
        self.positions_col_m.len()
    }

    pub fn n_antennas(&self) -> usize {
        self.n_rows() * self.n_cols()
    }
}

/// Subcarrier grid with a comb pilot pattern `{0, stride, 2·stride, …}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfdmGrid {
    pub n_subcarriers: usize,
    pub subcarrier_spacing_hz: f64,
    pub carrier_frequency_hz: f64,
    pub pilot_stride: usize,
    pub pilot_indices: Vec<usize>,
}

impl OfdmGrid {
    pub fn new(n_subcarriers: usize, subcarrier_spacing_hz: f64, carrier_frequency_hz: f64, pilot_stride: usize) -> Result<Self> {
        if n_subcarriers == 0 {
            return Err(Error::invalid("at least one subcarrier is required"));
        }
        if pilot_stride == 0 {
            return Err(Error::invalid("pilot stride must be at least 1"));
        }
        if !(subcarrier_spacing_hz > 0.0) || !(carrier_frequency_hz > 0.0) {
            return Err(Error::invalid("subcarrier spacing and carrier frequency must be positive"));
        }
        Ok(OfdmGrid {
            n_subcarriers,
            subcarrier_spacing_hz,
            carrier_frequency_hz,
            pilot_stride,
            pilot_indices: (0..n_subcarriers).step_by(pilot_stride).collect(),
        })
    }

    pub fn n_pilots(&self) -> usize {
        self.pilot_indices.len()
    }

    /// Baseband offsets `m·Δf` of all subcarriers.
    pub fn frequencies_hz(&self) -> Vec<f64> {
        (0..self.n_subcarriers).map(|m| m as f64 * self.subcarrier_spacing_hz).collect()
    }

    pub fn pilot_frequencies_hz(&self) -> Vec<f64> {
        self.pilot_indices.iter().map(|&m| m as f64 * self.subcarrier_spacing_hz).collect()
    }

    pub fn pilot_spacing_hz(&self) -> f64 {
        self.pilot_stride as f64 * self.subcarrier_spacing_hz
    }

    /// Largest delay span that the pilot comb resolves without aliasing.
    pub fn unambiguous_delay_s(&self) -> f64 {
        1.0 / self.pilot_spacing_hz()
    }

    pub fn wavelength_m(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_frequency_hz
    }
}

/// Shape of a frequency × row × column tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorShape {
    pub n_freq: usize,
    pub n_rows: usize,
    pub n_cols: usize,
}

impl TensorShape {
    pub fn new(n_freq: usize, n_rows: usize, n_cols: usize) -> Self {
        TensorShape { n_freq, n_rows, n_cols }
    }

    pub fn len(&self) -> usize {
        self.n_freq * self.n_rows * self.n_cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.n_freq, self.n_rows, self.n_cols]
    }

    #[inline]
    pub fn index(&self, f: usize, r: usize, c: usize) -> usize {
        (f * self.n_rows + r) * self.n_cols + c
    }
}

impl std::fmt::Display for TensorShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.n_freq, self.n_rows, self.n_cols)
    }
}

/// Complex channel values over frequency × antenna row × antenna column.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelTensor {
    shape: TensorShape,
    values: Vec<C64>,
}

impl ChannelTensor {
    pub fn zeros(shape: TensorShape) -> Self {
        ChannelTensor {
            shape,
            values: vec![C64::new(0.0, 0.0); shape.len()],
        }
    }

    pub fn from_values(shape: TensorShape, values: Vec<C64>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(Error::shape("channel tensor", shape.len(), values.len()));
        }
        if !values.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
            return Err(Error::invalid("channel tensor entries must be finite"));
        }
        Ok(ChannelTensor { shape, values })
    }

    pub(crate) fn from_values_unchecked(shape: TensorShape, values: Vec<C64>) -> Self {
        debug_assert_eq!(values.len(), shape.len());
        ChannelTensor { shape, values }
    }

    pub fn shape(&self) -> TensorShape {
        self.shape
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

    pub fn get(&self, f: usize, r: usize, c: usize) -> C64 {
        self.values[self.shape.index(f, r, c)]
    }

    /// All antenna values of one subcarrier (contiguous because frequency is slowest).
    pub fn subcarrier(&self, f: usize) -> &[C64] {
        let n = self.shape.n_rows * self.shape.n_cols;
        &self.values[f * n..(f + 1) * n]
    }

    pub fn norm_sqr(&self) -> f64 {
        crate::linalg::norm_sqr(&self.values)
    }

    pub fn mean_square(&self) -> f64 {
        self.norm_sqr() / self.values.len() as f64
    }

    /// Sub-tensor on the given subcarrier indices.
    pub fn restrict_frequencies(&self, indices: &[usize]) -> ChannelTensor {
        let per = self.shape.n_rows * self.shape.n_cols;
        let mut values = Vec::with_capacity(indices.len() * per);
        for &f in indices {
            values.extend_from_slice(self.subcarrier(f));
        }
        ChannelTensor {
            shape: TensorShape::new(indices.len(), self.shape.n_rows, self.shape.n_cols),
            values,
        }
    }

    pub fn scale(&mut self, s: f64) {
        for z in &mut self.values {
            *z *= s;
        }
    }
}

/// Noisy samples of the channel on the pilot subcarriers.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementSet {
    pub values: ChannelTensor,
    pub noise_variance: f64,
}

impl MeasurementSet {
    pub fn new(values: ChannelTensor, noise_variance: f64) -> Result<Self> {
        if !(noise_variance >= 0.0) {
            return Err(Error::invalid("noise variance must be nonnegative"));
        }
        Ok(MeasurementSet { values, noise_variance })
    }

    /// The stacked measurement vector in the crate-wide vectorization order.
    pub fn vector(&self) -> &[C64] {
        self.values.values()
    }

    pub fn shape(&self) -> TensorShape {
        self.values.shape()
    }
}

/// Parameters of the propagation paths of one channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSet {
    pub gains: Vec<C64>,
    pub delays_s: Vec<f64>,
    /// Projection of the wave vector on the row axis (cycles per meter).
    pub spatial_freq_row: Vec<f64>,
    /// Projection of the wave vector on the column axis (cycles per meter).
    pub spatial_freq_col: Vec<f64>,
}

impl PathSet {
    pub fn len(&self) -> usize {
        self.gains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gains.is_empty()
    }

    pub fn validate(&self, bounds: Option<&PathBounds>) -> Result<()> {
        let l = self.gains.len();
        if l == 0 {
            return Err(Error::invalid("a path set needs at least one path"));
        }
        if self.delays_s.len() != l || self.spatial_freq_row.len() != l || self.spatial_freq_col.len() != l {
            return Err(Error::invalid("path parameter sequences differ in length"));
        }
        if let Some(b) = bounds {
            let tol = 1e-12;
            if self.delays_s.iter().any(|&t| t < -tol * b.max_delay_s || t > b.max_delay_s * (1.0 + tol)) {
                return Err(Error::invalid("path delay outside [0, T]"));
            }
            if self.spatial_freq_row.iter().any(|&p| p.abs() > 0.5 * b.phi_row * (1.0 + tol)) {
                return Err(Error::invalid("row spatial frequency outside [-Φ/2, Φ/2]"));
            }
            if self.spatial_freq_col.iter().any(|&p| p.abs() > 0.5 * b.phi_col * (1.0 + tol)) {
                return Err(Error::invalid("column spatial frequency outside [-Φ/2, Φ/2]"));
            }
        }
        Ok(())
    }

    pub fn total_power(&self) -> f64 {
        self.gains.iter().map(|g| g.norm_sqr()).sum()
    }

    pub fn scale_gains(&mut self, s: f64) {
        for g in &mut self.gains {
            *g *= s;
        }
    }
}

/// Extent of the delay / beam domain that generated paths must stay inside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathBounds {
    /// Delays lie in `[0, max_delay_s]`.
    pub max_delay_s: f64,
    /// Row spatial frequencies lie in `[-phi_row/2, phi_row/2]`.
    pub phi_row: f64,
    pub phi_col: f64,
}

impl PathBounds {
    /// The widest domain the pilot comb and the array sample without aliasing.
    pub fn nyquist(grid: &OfdmGrid, geometry: &ArrayGeometry) -> Self {
        PathBounds {
            max_delay_s: grid.unambiguous_delay_s(),
            phi_row: 1.0 / geometry.row_spacing_m,
            phi_col: 1.0 / geometry.col_spacing_m,
        }
    }
}

/// Standard deviations of the per-path offsets around their cluster center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpreads {
    pub delay_s: f64,
    pub spatial_row: f64,
    pub spatial_col: f64,
}

/// Statistical description of the synthetic clustered channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathGenConfig {
    pub cluster_count: usize,
    pub paths_per_cluster: usize,
    pub spreads: ClusterSpreads,
    /// Cluster center delays are drawn uniformly from `[lo·T, hi·T]`.
    pub center_delay_range: [f64; 2],
    /// Cluster powers decay as `exp(−τ_c / power_decay_s)`.
    pub power_decay_s: f64,
}

impl PathGenConfig {
    /// A few compact clusters inside the first half of the delay window.
    pub fn compact(bounds: &PathBounds) -> Self {
        PathGenConfig {
            cluster_count: 3,
            paths_per_cluster: 5,
            spreads: ClusterSpreads {
                delay_s: 0.01 * bounds.max_delay_s,
                spatial_row: 0.02 * bounds.phi_row,
                spatial_col: 0.02 * bounds.phi_col,
            },
            center_delay_range: [0.05, 0.5],
            power_decay_s: 0.2 * bounds.max_delay_s,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cluster_count == 0 {
            return Err(Error::invalid("cluster_count must be at least 1"));
        }
        if self.paths_per_cluster == 0 {
            return Err(Error::invalid("paths_per_cluster must be at least 1"));
        }
        let s = &self.spreads;
        if !(s.delay_s >= 0.0 && s.spatial_row >= 0.0 && s.spatial_col >= 0.0) {
            return Err(Error::invalid("cluster spreads must be nonnegative"));
        }
        let [lo, hi] = self.center_delay_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::invalid("center_delay_range must satisfy 0 <= lo <= hi <= 1"));
        }
        if !(self.power_decay_s > 0.0) {
            return Err(Error::invalid("power_decay_s must be positive"));
        }
        Ok(())
    }
}

/// Draw a clustered path set with total power `Σ|α_ℓ|² = 1`.
pub fn generate_paths<R: Rng + ?Sized>(rng: &mut R, cfg: &PathGenConfig, bounds: &PathBounds) -> Result<PathSet> {
    cfg.validate()?;
    if !(bounds.max_delay_s > 0.0 && bounds.phi_row > 0.0 && bounds.phi_col > 0.0) {
        return Err(Error::invalid("path bounds must be positive"));
    }
    let l = cfg.cluster_count * cfg.paths_per_cluster;
    let mut paths = PathSet {
        gains: Vec::with_capacity(l),
        delays_s: Vec::with_capacity(l),
        spatial_freq_row: Vec::with_capacity(l),
        spatial_freq_col: Vec::with_capacity(l),
    };
    let half_row = 0.5 * bounds.phi_row;
    let half_col = 0.5 * bounds.phi_col;
    for _ in 0..cfg.cluster_count {
        let [lo, hi] = cfg.center_delay_range;
        let center_delay = rng.random_range(lo..=hi) * bounds.max_delay_s;
        let center_row = rng.random_range(-half_row..=half_row);
        let center_col = rng.random_range(-half_col..=half_col);
        let cluster_power = (-center_delay / cfg.power_decay_s).exp();
        let path_std = (cluster_power / cfg.paths_per_cluster as f64 / 2.0).sqrt();
        for _ in 0..cfg.paths_per_cluster {
            let delay = center_delay + cfg.spreads.delay_s * sample_std_normal(rng);
            let row = center_row + cfg.spreads.spatial_row * sample_std_normal(rng);
            let col = center_col + cfg.spreads.spatial_col * sample_std_normal(rng);
            paths.delays_s.push(delay.clamp(0.0, bounds.max_delay_s));
            paths.spatial_freq_row.push(row.clamp(-half_row, half_row));
            paths.spatial_freq_col.push(col.clamp(-half_col, half_col));
            let re: f64 = sample_std_normal(rng);
            let im: f64 = sample_std_normal(rng);
            paths.gains.push(C64::new(re, im) * path_std);
        }
    }
    let p = paths.total_power();
    if p > 0.0 {
        paths.scale_gains(1.0 / p.sqrt());
    }
    Ok(paths)
}

fn sample_std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Per-path steering vector along one axis: `exp(−2πi·z_m·θ)`.
pub fn steering(points: &[f64], freq: f64) -> Vec<C64> {
    points.iter().map(|&z| C64::from_polar(1.0, -2.0 * PI * z * freq)).collect()
}

/// Evaluate the multipath sum on the full subcarrier grid and at every antenna.
pub fn synthesize_channel(paths: &PathSet, grid: &OfdmGrid, geometry: &ArrayGeometry) -> Result<ChannelTensor> {
    paths.validate(None)?;
    let freqs = grid.frequencies_hz();
    synthesize_on(paths, &freqs, geometry)
}

/// Evaluate the multipath sum on arbitrary subcarrier frequencies.
pub fn synthesize_on(paths: &PathSet, freqs_hz: &[f64], geometry: &ArrayGeometry) -> Result<ChannelTensor> {
    let shape = TensorShape::new(freqs_hz.len(), geometry.n_rows(), geometry.n_cols());
    let mut values = vec![C64::new(0.0, 0.0); shape.len()];
    let n_sp = shape.n_rows * shape.n_cols;
    let mut spatial = vec![C64::new(0.0, 0.0); n_sp];
    for l in 0..paths.len() {
        let a_f = steering(freqs_hz, paths.delays_s[l]);
        let a_r = steering(&geometry.positions_row_m, paths.spatial_freq_row[l]);
        let a_c = steering(&geometry.positions_col_m, paths.spatial_freq_col[l]);
        for (r, ar) in a_r.iter().enumerate() {
            for (c, ac) in a_c.iter().enumerate() {
                spatial[r * shape.n_cols + c] = paths.gains[l] * ar * ac;
            }
        }
        for (f, af) in a_f.iter().enumerate() {
            let block = &mut values[f * n_sp..(f + 1) * n_sp];
            for (v, s) in block.iter_mut().zip(&spatial) {
                *v += af * s;
            }
        }
    }
    ChannelTensor::from_values(shape, values)
}

/// Draw paths and rescale their gains so the synthesized tensor has unit mean-square entry.
pub fn generate_channel<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &PathGenConfig,
    bounds: &PathBounds,
    grid: &OfdmGrid,
    geometry: &ArrayGeometry,
) -> Result<(PathSet, ChannelTensor)> {
    let mut paths = generate_paths(rng, cfg, bounds)?;
    let mut channel = synthesize_channel(&paths, grid, geometry)?;
    let ms = channel.mean_square();
    if ms > 0.0 {
        let s = 1.0 / ms.sqrt();
        paths.scale_gains(s);
        channel.scale(s);
    }
    Ok((paths, channel))
}

/// Independent generator for one `(seed, stream)` pair.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Circularly-symmetric complex Gaussian sample with the given variance.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> C64 {
    if variance == 0.0 {
        return C64::new(0.0, 0.0);
    }
    let normal = Normal::new(0.0, (variance / 2.0).sqrt()).expect("finite variance");
    C64::new(normal.sample(rng), normal.sample(rng))
}

/// Restrict the channel to the pilot subcarriers and add i.i.d. CN(0, N0) noise.
pub fn sample_measurements<R: Rng + ?Sized>(
    channel: &ChannelTensor,
    grid: &OfdmGrid,
    noise_variance: f64,
    rng: &mut R,
) -> Result<MeasurementSet> {
    if !(noise_variance >= 0.0) || !noise_variance.is_finite() {
        return Err(Error::invalid("noise variance must be finite and nonnegative"));
    }
    if channel.shape().n_freq != grid.n_subcarriers {
        return Err(Error::shape("channel subcarriers", grid.n_subcarriers, channel.shape().n_freq));
    }
    let mut pilots = channel.restrict_frequencies(&grid.pilot_indices);
    for v in pilots.values_mut() {
        *v += complex_gaussian(rng, noise_variance);
    }
    MeasurementSet::new(pilots, noise_variance)
}
