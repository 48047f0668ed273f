//! JSON-configured commands behind the `rkhs-chest` binary.
//!
//! Every command reads a [`RunConfig`] (all fields optional, defaults are desk scale) and is
//! reproducible from the config and its seed. Failures print a single line
//! `error: kind=<kind> msg="<message>"` to stderr and exit with status 1 (2 for usage errors).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::baselines_eval::{
    estimate_empirical_covariance, records_to_csv, run_monte_carlo, EvalRecord, Estimator, KroneckerLmmse,
    MonteCarloConfig, NamedEstimator, CSV_HEADER, DEFAULT_COVARIANCE_SAMPLES, ESTIMATOR_NAMES,
};
use crate::channel_model::{ArrayGeometry, ChannelDataset, ClusterSpreads, OfdmGrid, PathBounds, PathGenConfig};
use crate::fast_operators::{CoefficientState, FastForwardOperator};
use crate::kernel_factory::{DelayBeamGrid, LowRankFactors, ModulationVectors};
use crate::sparse_estimator::RkhsSettings;
use crate::unfolded_estimator::{ParityFixture, ScheduleBank};
use crate::{Error, Result, C64};

pub const CONFIG_FORMAT_VERSION: u32 = 1;

/// OFDM grid and antenna array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemConfig {
    pub n_subcarriers: usize,
    pub subcarrier_spacing_hz: f64,
    pub carrier_frequency_hz: f64,
    pub pilot_stride: usize,
    pub n_rows: usize,
    pub n_cols: usize,
    pub row_spacing_wavelengths: f64,
    pub col_spacing_wavelengths: f64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            n_subcarriers: 256,
            subcarrier_spacing_hz: 30e3,
            carrier_frequency_hz: 3.5e9,
            pilot_stride: 4,
            n_rows: 4,
            n_cols: 4,
            row_spacing_wavelengths: 1.0,
            col_spacing_wavelengths: 0.5,
        }
    }
}

impl SystemConfig {
    pub fn grid(&self) -> Result<OfdmGrid> {
        OfdmGrid::new(self.n_subcarriers, self.subcarrier_spacing_hz, self.carrier_frequency_hz, self.pilot_stride)
    }

    pub fn geometry(&self) -> Result<ArrayGeometry> {
        let lam = self.grid()?.wavelength_m();
        ArrayGeometry::uniform(self.n_rows, self.n_cols, self.row_spacing_wavelengths * lam, self.col_spacing_wavelengths * lam)
    }
}

/// Synthetic channel statistics, with spreads and delays relative to the delay window `T`
/// and the beam spans `Φ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelConfig {
    pub cluster_count: usize,
    pub paths_per_cluster: usize,
    pub delay_spread_fraction: f64,
    pub spatial_spread_fraction: f64,
    pub center_delay_range_fraction: [f64; 2],
    pub power_decay_fraction: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            cluster_count: 3,
            paths_per_cluster: 5,
            delay_spread_fraction: 0.01,
            spatial_spread_fraction: 0.02,
            center_delay_range_fraction: [0.05, 0.5],
            power_decay_fraction: 0.2,
        }
    }
}

impl ChannelConfig {
    pub fn path_config(&self, bounds: &PathBounds) -> PathGenConfig {
        PathGenConfig {
            cluster_count: self.cluster_count,
            paths_per_cluster: self.paths_per_cluster,
            spreads: ClusterSpreads {
                delay_s: self.delay_spread_fraction * bounds.max_delay_s,
                spatial_row: self.spatial_spread_fraction * bounds.phi_row,
                spatial_col: self.spatial_spread_fraction * bounds.phi_col,
            },
            center_delay_range: self.center_delay_range_fraction,
            power_decay_s: self.power_decay_fraction * bounds.max_delay_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub path: PathBuf,
    pub count: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            path: PathBuf::from("channels.bin"),
            count: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmmseConfig {
    pub sample_count: usize,
    /// Covariance training set; when absent, `sample_count` channels are drawn from the
    /// channel model with seed `seed + 1`.
    pub training_dataset: Option<PathBuf>,
}

impl Default for LmmseConfig {
    fn default() -> Self {
        LmmseConfig {
            sample_count: DEFAULT_COVARIANCE_SAMPLES,
            training_dataset: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DdRkhsConfig {
    pub schedules: Vec<PathBuf>,
    pub rank: usize,
    pub oversampling: usize,
}

impl Default for DdRkhsConfig {
    fn default() -> Self {
        DdRkhsConfig {
            schedules: Vec::new(),
            rank: 3,
            oversampling: 1,
        }
    }
}

/// Values of every sweepable RKHS setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub rank: Vec<usize>,
    pub lambda_multiplier: Vec<f64>,
    pub oversampling: Vec<usize>,
    pub t_max: Vec<usize>,
    pub t_prime_max: Vec<usize>,
    pub step_size: Vec<f64>,
    pub debias_step_size: Vec<f64>,
    pub debias: Vec<bool>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            rank: vec![1, 2, 3, 4],
            lambda_multiplier: vec![1.5, 2.0, 2.5, 3.0, 4.0, 6.0],
            oversampling: vec![1, 2],
            t_max: vec![5, 10, 30],
            t_prime_max: vec![5, 10, 30],
            step_size: vec![0.5, 1.0, 1.5, 2.5],
            debias_step_size: vec![0.5, 1.0, 1.5],
            debias: vec![true, false],
        }
    }
}

pub const SWEEP_AXES: [&str; 8] = [
    "rank",
    "lambda_multiplier",
    "oversampling",
    "t_max",
    "t_prime_max",
    "step_size",
    "debias_step_size",
    "debias",
];

impl SweepConfig {
    /// Settings variants along `axis`, each labelled by its numeric value.
    pub fn variants(&self, axis: &str, base: &RkhsSettings) -> Result<Vec<(f64, RkhsSettings)>> {
        fn each<T: Copy>(vals: &[T], base: &RkhsSettings, num: impl Fn(T) -> f64, set: impl Fn(&mut RkhsSettings, T)) -> Vec<(f64, RkhsSettings)> {
            vals.iter()
                .map(|&v| {
                    let mut s = base.clone();
                    set(&mut s, v);
                    (num(v), s)
                })
                .collect()
        }
        let out = match axis {
            "rank" => each(&self.rank, base, |v| v as f64, |s, v| s.rank = v),
            "lambda_multiplier" => each(&self.lambda_multiplier, base, |v| v, |s, v| s.lambda_multiplier = v),
            "oversampling" => each(&self.oversampling, base, |v| v as f64, |s, v| s.oversampling = v),
            "t_max" => each(&self.t_max, base, |v| v as f64, |s, v| s.t_max = v),
            "t_prime_max" => each(&self.t_prime_max, base, |v| v as f64, |s, v| s.t_prime_max = v),
            "step_size" => each(&self.step_size, base, |v| v, |s, v| s.step_size = v),
            "debias_step_size" => each(&self.debias_step_size, base, |v| v, |s, v| s.debias_step_size = v),
            "debias" => each(&self.debias, base, |v| if v { 1.0 } else { 0.0 }, |s, v| s.debias = v),
            _ => {
                return Err(Error::invalid(format!(
                    "unknown sweep axis `{axis}`; valid axes: {}",
                    SWEEP_AXES.join(", ")
                )))
            }
        };
        if out.is_empty() {
            return Err(Error::invalid(format!("sweep axis `{axis}` has no values")));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// `log₂|N|` of the FFT-route sizes.
    pub fast_log2_sizes: Vec<u32>,
    /// `log₂|N|` of the direct-route sizes.
    pub dense_log2_sizes: Vec<u32>,
    pub repeats: usize,
    pub rank: usize,
    /// Delay boxes; the spatial box counts grow to reach each size.
    pub delay_boxes: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            fast_log2_sizes: (10..=16).collect(),
            dense_log2_sizes: vec![10, 11, 12],
            repeats: 3,
            rank: 3,
            delay_boxes: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("results") }
    }
}

/// Top-level configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub format_version: u32,
    pub system: SystemConfig,
    pub channels: ChannelConfig,
    pub dataset: DatasetConfig,
    pub estimators: Vec<String>,
    pub rkhs: RkhsSettings,
    pub lmmse: LmmseConfig,
    pub dd_rkhs: DdRkhsConfig,
    pub monte_carlo: MonteCarloConfig,
    pub sweep: SweepConfig,
    pub bench: BenchConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            format_version: CONFIG_FORMAT_VERSION,
            system: SystemConfig::default(),
            channels: ChannelConfig::default(),
            dataset: DatasetConfig::default(),
            estimators: vec!["ls".into(), "lmmse".into(), "genie".into(), "rkhs".into()],
            rkhs: RkhsSettings::default(),
            lmmse: LmmseConfig::default(),
            dd_rkhs: DdRkhsConfig::default(),
            monte_carlo: MonteCarloConfig::default(),
            sweep: SweepConfig::default(),
            bench: BenchConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            Error::parse(field, e.into_inner().to_string())
        })?;
        if cfg.format_version != CONFIG_FORMAT_VERSION {
            return Err(Error::parse(
                "format_version",
                format!("unsupported version {}, expected {CONFIG_FORMAT_VERSION}", cfg.format_version),
            ));
        }
        cfg.rkhs.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn path_config(&self) -> Result<PathGenConfig> {
        let bounds = PathBounds::nyquist(&self.system.grid()?, &self.system.geometry()?);
        Ok(self.channels.path_config(&bounds))
    }
}

/// Channels drawn from the configured model.
pub fn generate_dataset(cfg: &RunConfig, count: usize, seed: u64) -> Result<ChannelDataset> {
    ChannelDataset::generate(&cfg.system.geometry()?, &cfg.system.grid()?, &cfg.path_config()?, count, seed)
}

pub fn build_operator(grid: &OfdmGrid, geometry: &ArrayGeometry, rank: usize, oversampling: usize) -> Result<FastForwardOperator> {
    let dbg = DelayBeamGrid::nyquist(grid, geometry, oversampling)?;
    FastForwardOperator::new(LowRankFactors::from_system(grid, geometry, &dbg, rank)?)
}

/// Instantiates named estimators, sharing operators between settings with equal
/// `(rank, oversampling)`.
pub struct EstimatorFactory<'a> {
    cfg: &'a RunConfig,
    dataset: &'a ChannelDataset,
    operators: BTreeMap<(usize, usize), Arc<FastForwardOperator>>,
    lmmse: Option<Arc<KroneckerLmmse>>,
}

impl<'a> EstimatorFactory<'a> {
    pub fn new(cfg: &'a RunConfig, dataset: &'a ChannelDataset) -> Self {
        EstimatorFactory {
            cfg,
            dataset,
            operators: BTreeMap::new(),
            lmmse: None,
        }
    }

    pub fn operator(&mut self, rank: usize, oversampling: usize) -> Result<Arc<FastForwardOperator>> {
        if let Some(op) = self.operators.get(&(rank, oversampling)) {
            return Ok(op.clone());
        }
        let op = Arc::new(build_operator(&self.dataset.grid, &self.dataset.geometry, rank, oversampling)?);
        self.operators.insert((rank, oversampling), op.clone());
        Ok(op)
    }

    fn lmmse(&mut self) -> Result<Arc<KroneckerLmmse>> {
        if let Some(l) = &self.lmmse {
            return Ok(l.clone());
        }
        let lc = &self.cfg.lmmse;
        let training = match &lc.training_dataset {
            Some(p) => ChannelDataset::load(p)?,
            None => generate_dataset(self.cfg, lc.sample_count, self.cfg.monte_carlo.seed.wrapping_add(1))?,
        };
        if training.shape() != self.dataset.shape() {
            return Err(Error::shape("covariance training set", self.dataset.shape(), training.shape()));
        }
        let cov = estimate_empirical_covariance(&training.channels, lc.sample_count.min(training.len()))?;
        let l = Arc::new(KroneckerLmmse::new(&cov, &self.dataset.grid)?);
        self.lmmse = Some(l.clone());
        Ok(l)
    }

    pub fn rkhs(&mut self, label: impl Into<String>, settings: &RkhsSettings) -> Result<NamedEstimator> {
        settings.validate()?;
        Ok(NamedEstimator {
            label: label.into(),
            estimator: Estimator::Rkhs {
                op: self.operator(settings.rank, settings.oversampling)?,
                settings: settings.clone(),
            },
        })
    }

    pub fn build(&mut self, name: &str) -> Result<NamedEstimator> {
        let estimator = match name {
            "ls" => Estimator::Ls,
            "perfect-csi" => Estimator::PerfectCsi,
            "lmmse" => Estimator::EmpiricalLmmse(self.lmmse()?),
            "genie" => Estimator::GenieLmmse,
            "rkhs" => return self.rkhs("rkhs", &self.cfg.rkhs.clone()),
            "dd-rkhs" => {
                let dd = &self.cfg.dd_rkhs;
                if dd.schedules.is_empty() {
                    return Err(Error::invalid("dd-rkhs needs at least one schedule file in dd_rkhs.schedules"));
                }
                let bank = ScheduleBank::load(&dd.schedules)?;
                let op = self.operator(dd.rank, dd.oversampling)?;
                bank.schedules()[0].check_grid(op.grid().dims())?;
                Estimator::DdRkhs { op, bank: Arc::new(bank) }
            }
            _ => {
                return Err(Error::UnknownEstimator {
                    name: name.to_string(),
                    valid: ESTIMATOR_NAMES.join(", "),
                })
            }
        };
        Ok(NamedEstimator::new(estimator))
    }
}

pub fn run_evaluate(cfg: &RunConfig, dataset: &ChannelDataset, names: &[String]) -> Result<Vec<EvalRecord>> {
    let mut factory = EstimatorFactory::new(cfg, dataset);
    let estimators = names.iter().map(|n| factory.build(n)).collect::<Result<Vec<_>>>()?;
    run_monte_carlo(dataset, &estimators, &cfg.monte_carlo)
}

/// One sweep point: the swept value and the records of every estimator at it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRecord {
    pub axis: String,
    pub value: f64,
    pub record: EvalRecord,
}

/// Evaluate the RKHS estimator at every value of `axis`, the other settings taken from
/// `cfg.rkhs`.
pub fn run_sweep(cfg: &RunConfig, dataset: &ChannelDataset, axis: &str) -> Result<Vec<SweepRecord>> {
    let variants = cfg.sweep.variants(axis, &cfg.rkhs)?;
    let mut factory = EstimatorFactory::new(cfg, dataset);
    let mut out = Vec::new();
    for (value, settings) in variants {
        let est = factory.rkhs("rkhs", &settings)?;
        for record in run_monte_carlo(dataset, &[est], &cfg.monte_carlo)? {
            out.push(SweepRecord {
                axis: axis.to_string(),
                value,
                record,
            });
        }
    }
    Ok(out)
}

pub fn sweep_to_csv(rows: &[SweepRecord]) -> String {
    let mut s = format!("sweep_axis,sweep_value,{CSV_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.axis, r.value, r.record.csv_row()));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchRoute {
    FastApply,
    FastAdjoint,
    DenseApply,
}

impl BenchRoute {
    pub fn name(self) -> &'static str {
        match self {
            BenchRoute::FastApply => "fast-apply",
            BenchRoute::FastAdjoint => "fast-adjoint",
            BenchRoute::DenseApply => "dense-apply",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRow {
    pub route: BenchRoute,
    pub n_boxes: usize,
    pub mean_s: f64,
    pub stddev_s: f64,
    pub repeats: usize,
}

/// Operator with `delay_boxes · 2^k` boxes for `|N| = 2^log2`, at Nyquist sampling.
pub fn bench_operator(cfg: &BenchConfig, log2: u32) -> Result<FastForwardOperator> {
    let d = cfg.delay_boxes;
    if d == 0 || !d.is_power_of_two() {
        return Err(Error::invalid("bench.delay_boxes must be a power of two"));
    }
    let spatial_log2 = log2
        .checked_sub(d.trailing_zeros())
        .ok_or_else(|| Error::invalid(format!("|N| = 2^{log2} is smaller than the delay box count")))?;
    let rows = 1usize << spatial_log2.div_ceil(2);
    let cols = 1usize << (spatial_log2 / 2);
    let grid = OfdmGrid::new(d * 4, 30e3, 3.5e9, 4)?;
    let lam = grid.wavelength_m();
    let geom = ArrayGeometry::uniform(rows, cols, lam, lam / 2.0)?;
    build_operator(&grid, &geom, cfg.rank, 1)
}

fn time_it(repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<(f64, f64)> {
    f()?;
    let mut t = Vec::with_capacity(repeats);
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        f()?;
        t.push(start.elapsed().as_secs_f64());
    }
    let mean = t.iter().sum::<f64>() / t.len() as f64;
    let var = t.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / t.len() as f64;
    Ok((mean, var.sqrt()))
}

pub fn run_bench(cfg: &BenchConfig, seed: u64) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    let mut sizes: Vec<u32> = cfg.fast_log2_sizes.iter().chain(&cfg.dense_log2_sizes).copied().collect();
    sizes.sort_unstable();
    sizes.dedup();
    for log2 in sizes {
        let op = bench_operator(cfg, log2)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ log2 as u64);
        let a = random_state(&op, &mut rng);
        let e = op.apply(&a)?;
        let mut push = |route, (mean_s, stddev_s)| {
            rows.push(BenchRow {
                route,
                n_boxes: op.n_boxes(),
                mean_s,
                stddev_s,
                repeats: cfg.repeats,
            })
        };
        if cfg.fast_log2_sizes.contains(&log2) {
            push(BenchRoute::FastApply, time_it(cfg.repeats, || op.apply(&a).map(drop))?);
            push(BenchRoute::FastAdjoint, time_it(cfg.repeats, || op.adjoint(&e).map(drop))?);
        }
        if cfg.dense_log2_sizes.contains(&log2) {
            let mods = ModulationVectors::new(op.factors())?;
            push(BenchRoute::DenseApply, time_it(cfg.repeats.min(2), || op.apply_direct(&a, &mods).map(drop))?);
        }
    }
    Ok(rows)
}

fn random_state(op: &FastForwardOperator, rng: &mut impl rand::Rng) -> CoefficientState {
    let mut a = op.zero_state();
    for v in a.values_mut() {
        *v = C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    }
    a
}

/// Least-squares slope of `log t` against `log |N|`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

pub fn bench_slope(rows: &[BenchRow], route: BenchRoute) -> Option<f64> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.route == route)
        .map(|r| (r.n_boxes as f64, r.mean_s))
        .collect();
    (pts.len() >= 2).then(|| loglog_slope(&pts))
}

pub fn bench_to_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("route,n_boxes,mean_s,stddev_s,repeats\n");
    for r in rows {
        s.push_str(&format!("{},{},{:.6e},{:.6e},{}\n", r.route.name(), r.n_boxes, r.mean_s, r.stddev_s, r.repeats));
    }
    s
}

#[derive(Debug, Serialize)]
struct FactorDump {
    rank: usize,
    delay_beam: DelayBeamGrid,
    eigenvalues_delay: Vec<f64>,
    eigenvalues_row: Vec<f64>,
    eigenvalues_col: Vec<f64>,
    factor_delay_full: Vec<Vec<C64>>,
    factor_delay_pilot: Vec<Vec<C64>>,
    factor_row: Vec<Vec<C64>>,
    factor_col: Vec<Vec<C64>>,
}

fn rows_of(m: &nalgebra::DMatrix<C64>) -> Vec<Vec<C64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

#[derive(Parser, Debug)]
#[command(name = "rkhs-chest", version, about = "Sparse MIMO-OFDM channel estimation in the delay-beamspace domain")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
struct Common {
    /// JSON run configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `monte_carlo.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file (generate, dump-factors, parity-fixture) or directory (others).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic channel dataset.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Overrides `dataset.count`.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Monte Carlo NMSE and rate of the selected estimators.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated estimator names; overrides `estimators`.
        #[arg(long, value_delimiter = ',')]
        estimators: Option<Vec<String>>,
        #[arg(long)]
        no_debias: bool,
    },
    /// Evaluate the RKHS estimator along one settings axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        sweep_axis: String,
        #[arg(long)]
        no_debias: bool,
    },
    /// Time the FFT and direct operator routes over a range of box counts.
    Bench {
        #[command(flatten)]
        common: Common,
    },
    /// Write the per-axis eigenvalues and low-rank factors as JSON.
    DumpFactors {
        #[command(flatten)]
        common: Common,
    },
    /// Write the forward-pass parity fixture for other implementations.
    ParityFixture {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.monte_carlo.seed = seed;
    }
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::parse("output", e.to_string()))
}

fn out_dir(common: &Common, cfg: &RunConfig) -> PathBuf {
    common.out.clone().unwrap_or_else(|| cfg.output.dir.clone())
}

fn load_dataset(cfg: &RunConfig) -> Result<ChannelDataset> {
    let ds = ChannelDataset::load(&cfg.dataset.path)?;
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(ds)
}

fn cmd_generate(common: &Common, count: Option<usize>) -> Result<()> {
    let cfg = load_config(common)?;
    let count = count.unwrap_or(cfg.dataset.count);
    let path = common.out.clone().unwrap_or_else(|| cfg.dataset.path.clone());
    let ds = generate_dataset(&cfg, count, cfg.monte_carlo.seed)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    ds.save(&path)?;
    let paths = ds.paths.as_deref().unwrap_or_default();
    let strongest: Vec<f64> = paths
        .iter()
        .map(|p| p.gains.iter().map(|g| g.norm_sqr()).fold(0.0, f64::max) / p.total_power())
        .collect();
    let mean_strongest = strongest.iter().sum::<f64>() / strongest.len().max(1) as f64;
    println!(
        "wrote {} channels of shape {} to {} (seed {}, {} paths each, strongest path carries {:.1}% of the power on average)",
        ds.len(),
        ds.shape(),
        path.display(),
        cfg.monte_carlo.seed,
        paths.first().map_or(0, |p| p.len()),
        100.0 * mean_strongest
    );
    Ok(())
}

fn cmd_evaluate(common: &Common, estimators: Option<Vec<String>>, no_debias: bool) -> Result<()> {
    let mut cfg = load_config(common)?;
    if no_debias {
        cfg.rkhs.debias = false;
    }
    let names = estimators.unwrap_or_else(|| cfg.estimators.clone());
    if names.is_empty() {
        return Err(Error::invalid("no estimators selected"));
    }
    let ds = load_dataset(&cfg)?;
    let records = run_evaluate(&cfg, &ds, &names)?;
    let dir = out_dir(common, &cfg);
    write(&dir.join("results.csv"), &records_to_csv(&records))?;
    write(&dir.join("results.json"), &to_json(&records)?)?;
    for r in &records {
        println!("{:>7.1} dB  {:<12} NMSE {:>7.2} dB  failures {}", r.snr_db, r.estimator, r.nmse_db(), r.failures);
    }
    Ok(())
}

fn cmd_sweep(common: &Common, axis: &str, no_debias: bool) -> Result<()> {
    let mut cfg = load_config(common)?;
    if no_debias {
        cfg.rkhs.debias = false;
    }
    cfg.sweep.variants(axis, &cfg.rkhs)?;
    let ds = load_dataset(&cfg)?;
    let rows = run_sweep(&cfg, &ds, axis)?;
    let dir = out_dir(common, &cfg);
    write(&dir.join(format!("sweep_{axis}.csv")), &sweep_to_csv(&rows))?;
    write(&dir.join(format!("sweep_{axis}.json")), &to_json(&rows)?)?;
    for r in &rows {
        println!(
            "{axis}={:<8} {:>7.1} dB  NMSE {:>7.2} dB  failures {}",
            r.value,
            r.record.snr_db,
            r.record.nmse_db(),
            r.record.failures
        );
    }
    Ok(())
}

fn cmd_bench(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let rows = run_bench(&cfg.bench, cfg.monte_carlo.seed)?;
    let dir = out_dir(common, &cfg);
    write(&dir.join("bench.csv"), &bench_to_csv(&rows))?;
    for route in [BenchRoute::FastApply, BenchRoute::FastAdjoint, BenchRoute::DenseApply] {
        if let Some(s) = bench_slope(&rows, route) {
            println!("{:<13} log-log slope {s:.3}", route.name());
        }
    }
    Ok(())
}

fn cmd_dump_factors(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let grid = cfg.system.grid()?;
    let geom = cfg.system.geometry()?;
    let dbg = DelayBeamGrid::nyquist(&grid, &geom, cfg.rkhs.oversampling)?;
    let f = LowRankFactors::from_system(&grid, &geom, &dbg, cfg.rkhs.rank)?;
    let dump = FactorDump {
        rank: f.rank,
        delay_beam: dbg,
        eigenvalues_delay: f.eig_t.clone(),
        eigenvalues_row: f.eig_h.clone(),
        eigenvalues_col: f.eig_v.clone(),
        factor_delay_full: rows_of(&f.s_t_full),
        factor_delay_pilot: rows_of(&f.s_t_pilot),
        factor_row: rows_of(&f.s_h),
        factor_col: rows_of(&f.s_v),
    };
    let path = common.out.clone().unwrap_or_else(|| cfg.output.dir.join("factors.json"));
    write(&path, &to_json(&dump)?)?;
    println!("wrote factors for a {}x{}x{} box grid to {}", dbg.n1, dbg.n2, dbg.n3, path.display());
    Ok(())
}

fn cmd_parity_fixture(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let fixture = ParityFixture::generate(cfg.monte_carlo.seed)?;
    let path = common.out.clone().unwrap_or_else(|| cfg.output.dir.join("dd_parity.json"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fixture.save(&path)?;
    println!("wrote parity fixture to {}", path.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common, count } => cmd_generate(&common, count),
        Command::Evaluate {
            common,
            estimators,
            no_debias,
        } => cmd_evaluate(&common, estimators, no_debias),
        Command::Sweep {
            common,
            sweep_axis,
            no_debias,
        } => cmd_sweep(&common, &sweep_axis, no_debias),
        Command::Bench { common } => cmd_bench(&common),
        Command::DumpFactors { common } => cmd_dump_factors(&common),
        Command::ParityFixture { common } => cmd_parity_fixture(&common),
    }
}

/// One-line machine-readable error report.
pub fn error_line(kind: &str, msg: &str) -> String {
    format!("error: kind={kind} msg={:?}", msg)
}

/// Parse arguments, run the command and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first));
            return 2;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
        assert_eq!(RunConfig::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn parse_errors_name_field_and_type() {
        let err = RunConfig::from_json(r#"{"system": {"n_subcarriers": "many"}}"#).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("system.n_subcarriers"), "{msg}");
        assert!(msg.contains("expected usize"), "{msg}");
        let err = RunConfig::from_json(r#"{"monte_carlo": {"trails": 3}}"#).unwrap_err();
        assert!(err.to_string().contains("monte_carlo"), "{err}");
        let err = RunConfig::from_json(r#"{"format_version": 7}"#).unwrap_err();
        assert!(err.to_string().contains("format_version"));
    }

    #[test]
    fn sweep_variants() {
        let s = SweepConfig::default();
        let base = RkhsSettings::default();
        let v = s.variants("rank", &base).unwrap();
        assert_eq!(v.iter().map(|x| x.1.rank).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
        let v = s.variants("debias", &base).unwrap();
        assert_eq!(v[1].0, 0.0);
        assert!(!v[1].1.debias);
        assert!(s.variants("color", &base).is_err());
        let empty = SweepConfig { step_size: vec![], ..s };
        assert!(empty.variants("step_size", &base).is_err());
    }

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = (1..6).map(|k| (2f64.powi(k), 3.0 * 2f64.powi(2 * k))).collect();
        assert!((loglog_slope(&pts) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn bench_operator_sizes() {
        let cfg = BenchConfig::default();
        for log2 in [10, 11, 12] {
            assert_eq!(bench_operator(&cfg, log2).unwrap().n_boxes(), 1 << log2);
        }
        assert!(bench_operator(&cfg, 5).is_err());
    }

    #[test]
    fn error_line_is_one_line() {
        let l = error_line("parse", "bad \"field\"\nsecond");
        assert_eq!(l.lines().count(), 1);
        assert!(l.starts_with("error: kind=parse msg=\""));
    }

    #[test]
    fn unknown_command_is_a_usage_error() {
        assert_eq!(main_with_args(["rkhs-chest", "frobnicate"]), 2);
        assert_eq!(main_with_args(["rkhs-chest", "sweep"]), 2);
    }
}
