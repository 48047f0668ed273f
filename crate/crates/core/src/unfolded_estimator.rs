//! Data-driven forward pass: one descent step per stage followed by immediate log-penalty
//! re-majorization and group soft-thresholding, with per-iteration learned parameters.
//!
//! ```text
//! ă⁽ᵗ⁾ = a⁽ᵗ⁾ − τ⁽ᵗ⁾(𝗦ᴴ(𝗦a⁽ᵗ⁾ − y) + 2γ⁽ᵗ⁾a⁽ᵗ⁾)
//! α_n  = λ_n⁽ᵗ⁾ / (1 + η⁽ᵗ⁾‖ă_n⁽ᵗ⁾‖)
//! a_n⁽ᵗ⁺¹⁾ = ă_n/‖ă_n‖ · max(‖ă_n‖ − τ⁽ᵗ⁾α_n, 0)
//! ```
//!
//! There is no debiasing stage. Parameter schedules are stored as JSON and keyed by the
//! channel-gain bin they were trained for.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::channel_model::{ArrayGeometry, ChannelTensor, OfdmGrid};
use crate::fast_operators::{CoefficientState, FastForwardOperator};
use crate::kernel_factory::{DelayBeamGrid, LowRankFactors};
use crate::linalg::{inner, norm_sqr};
use crate::sparse_estimator::{descent_with_rss, proximal_loop, shrink_rows, StageResult};
use crate::{Error, Result, C64};

pub const SCHEDULE_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_UNFOLDED_ITERATIONS: usize = 5;

/// Trainable parameters of one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IterationParams {
    pub tau: f64,
    pub gamma: f64,
    pub eta: f64,
    /// Per-box weights, flat over `(n1, n2, n3)` with `n1` slowest.
    pub lambda: Vec<f64>,
}

/// A full schedule for `t_max = iterations.len()` iterations on one box grid.
#[derive(Debug, Clone, PartialEq)]
pub struct UnfoldedParams {
    pub grid_dims: [usize; 3],
    pub gain_bin_db: f64,
    pub iterations: Vec<IterationParams>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleFile {
    format_version: u32,
    grid_dims: [usize; 3],
    t_max: usize,
    gain_bin_db: f64,
    iterations: Vec<IterationParams>,
}

impl UnfoldedParams {
    /// Isotropic schedule with the same constants in every iteration.
    pub fn constant(grid_dims: [usize; 3], t_max: usize, tau: f64, gamma: f64, eta: f64, lambda: f64) -> Self {
        let n: usize = grid_dims.iter().product();
        UnfoldedParams {
            grid_dims,
            gain_bin_db: 0.0,
            iterations: vec![
                IterationParams {
                    tau,
                    gamma,
                    eta,
                    lambda: vec![lambda; n],
                };
                t_max
            ],
        }
    }

    pub fn t_max(&self) -> usize {
        self.iterations.len()
    }

    pub fn n_boxes(&self) -> usize {
        self.grid_dims.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_dims.contains(&0) {
            return Err(Error::parse("grid_dims", "every box count must be positive"));
        }
        if !self.gain_bin_db.is_finite() {
            return Err(Error::parse("gain_bin_db", "must be finite"));
        }
        let n = self.n_boxes();
        for (t, it) in self.iterations.iter().enumerate() {
            let field = |name: &str| format!("iterations[{t}].{name}");
            if !(it.tau > 0.0 && it.tau.is_finite()) {
                return Err(Error::parse(field("tau"), format!("must be finite and > 0, found {}", it.tau)));
            }
            if !(it.gamma >= 0.0 && it.gamma.is_finite()) {
                return Err(Error::parse(field("gamma"), format!("must be finite and >= 0, found {}", it.gamma)));
            }
            if !(it.eta >= 0.0 && it.eta.is_finite()) {
                return Err(Error::parse(field("eta"), format!("must be finite and >= 0, found {}", it.eta)));
            }
            if it.lambda.len() != n {
                return Err(Error::shape("schedule lambda map", format!("{n} entries in {}", field("lambda")), it.lambda.len()));
            }
            if let Some(k) = it.lambda.iter().position(|l| !(*l >= 0.0 && l.is_finite())) {
                return Err(Error::parse(
                    format!("iterations[{t}].lambda[{k}]"),
                    format!("must be finite and >= 0, found {}", it.lambda[k]),
                ));
            }
        }
        Ok(())
    }

    /// Dimension check against a box grid.
    pub fn check_grid(&self, dims: [usize; 3]) -> Result<()> {
        if self.grid_dims != dims {
            return Err(Error::shape("parameter schedule grid", fmt_dims(dims), fmt_dims(self.grid_dims)));
        }
        Ok(())
    }

    /// JSON text with every number written to 17 significant digits.
    pub fn to_json(&self) -> String {
        let mut s = String::new();
        let [a, b, c] = self.grid_dims;
        let _ = writeln!(s, "{{");
        let _ = writeln!(s, "  \"format_version\": {SCHEDULE_FORMAT_VERSION},");
        let _ = writeln!(s, "  \"grid_dims\": [{a}, {b}, {c}],");
        let _ = writeln!(s, "  \"t_max\": {},", self.t_max());
        let _ = writeln!(s, "  \"gain_bin_db\": {},", num(self.gain_bin_db));
        let _ = writeln!(s, "  \"iterations\": [");
        for (t, it) in self.iterations.iter().enumerate() {
            let lambda: Vec<String> = it.lambda.iter().map(|&l| num(l)).collect();
            let _ = write!(
                s,
                "    {{\"tau\": {}, \"gamma\": {}, \"eta\": {}, \"lambda\": [{}]}}",
                num(it.tau),
                num(it.gamma),
                num(it.eta),
                lambda.join(", ")
            );
            let _ = writeln!(s, "{}", if t + 1 < self.iterations.len() { "," } else { "" });
        }
        let _ = writeln!(s, "  ]");
        s.push('}');
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let file: ScheduleFile = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::parse(path, e.into_inner().to_string())
        })?;
        if file.format_version != SCHEDULE_FORMAT_VERSION {
            return Err(Error::parse(
                "format_version",
                format!("unsupported version {}, expected {SCHEDULE_FORMAT_VERSION}", file.format_version),
            ));
        }
        if file.t_max != file.iterations.len() {
            return Err(Error::parse(
                "t_max",
                format!("declares {} iterations but {} are present", file.t_max, file.iterations.len()),
            ));
        }
        let params = UnfoldedParams {
            grid_dims: file.grid_dims,
            gain_bin_db: file.gain_bin_db,
            iterations: file.iterations,
        };
        params.validate()?;
        Ok(params)
    }
}

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_dims(d: [usize; 3]) -> String {
    format!("{}x{}x{}", d[0], d[1], d[2])
}

pub fn save_params(params: &UnfoldedParams, path: impl AsRef<Path>) -> Result<()> {
    params.validate()?;
    let path = path.as_ref();
    std::fs::write(path, params.to_json()).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<UnfoldedParams> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    UnfoldedParams::from_json(&text)
}

/// Load a schedule and check it against the operator's box grid.
pub fn load_params_for(path: impl AsRef<Path>, op: &FastForwardOperator) -> Result<UnfoldedParams> {
    let p = load_params(path)?;
    p.check_grid(op.grid().dims())?;
    Ok(p)
}

/// Schedules for several gain bins over one box grid.
#[derive(Debug, Clone)]
pub struct ScheduleBank {
    schedules: Vec<UnfoldedParams>,
}

impl ScheduleBank {
    pub fn new(mut schedules: Vec<UnfoldedParams>) -> Result<Self> {
        let Some(first) = schedules.first() else {
            return Err(Error::invalid("schedule bank needs at least one schedule"));
        };
        let dims = first.grid_dims;
        for s in &schedules {
            s.validate()?;
            s.check_grid(dims)?;
        }
        schedules.sort_by(|a, b| a.gain_bin_db.total_cmp(&b.gain_bin_db));
        if schedules.windows(2).any(|w| w[0].gain_bin_db == w[1].gain_bin_db) {
            return Err(Error::invalid("duplicate gain bin in schedule bank"));
        }
        Ok(ScheduleBank { schedules })
    }

    pub fn load(paths: &[impl AsRef<Path>]) -> Result<Self> {
        Self::new(paths.iter().map(load_params).collect::<Result<_>>()?)
    }

    pub fn schedules(&self) -> &[UnfoldedParams] {
        &self.schedules
    }

    /// Schedule whose bin is nearest to `snr_db`; ties go to the lower bin.
    pub fn select(&self, snr_db: f64) -> &UnfoldedParams {
        let mut best = &self.schedules[0];
        for s in &self.schedules[1..] {
            if (s.gain_bin_db - snr_db).abs() < (best.gain_bin_db - snr_db).abs() {
                best = s;
            }
        }
        best
    }
}

/// `α_n = λ_n / (1 + η‖b_n‖)`.
pub fn remajorize(b: &CoefficientState, lambda_map: &[f64], eta: f64) -> Result<Vec<f64>> {
    if lambda_map.len() != b.n_boxes() {
        return Err(Error::shape("lambda map", b.n_boxes(), lambda_map.len()));
    }
    if !(eta >= 0.0) || lambda_map.iter().any(|l| !(*l >= 0.0)) {
        return Err(Error::invalid("re-majorization needs eta >= 0 and lambda >= 0"));
    }
    Ok(lambda_map.iter().enumerate().map(|(n, &l)| weight(l, eta, b.row_norm(n))).collect())
}

fn weight(lambda: f64, eta: f64, norm: f64) -> f64 {
    lambda / (1.0 + eta * norm)
}

fn log_penalty(lambda: f64, eta: f64, x: f64) -> f64 {
    if eta == 0.0 {
        lambda * x
    } else {
        lambda * (eta * x).ln_1p() / eta
    }
}

fn check_inputs(op: &FastForwardOperator, y: &[C64], params: &UnfoldedParams) -> Result<()> {
    params.validate()?;
    params.check_grid(op.grid().dims())?;
    if y.len() != op.measurement_len() {
        return Err(Error::shape("measurement vector", op.measurement_len(), y.len()));
    }
    Ok(())
}

/// Run the forward pass and return the final coefficients together with the per-iteration
/// objective trace of the evolving surrogate.
pub fn dd_iterate(op: &FastForwardOperator, y: &[C64], params: &UnfoldedParams, record: bool) -> Result<StageResult> {
    check_inputs(op, y, params)?;
    let its = &params.iterations;
    let start = op.adjoint(y)?;
    proximal_loop(
        op,
        y,
        start,
        its.len(),
        |t| its[t].tau,
        |t| its[t].gamma,
        |t, a| {
            let it = &its[t];
            let norms = a.row_norms();
            shrink_rows(a, |n| it.tau * weight(it.lambda[n], it.eta, norms[n]));
        },
        |t, rss, a| {
            let it = &its[t];
            let pen: f64 = a
                .row_norms()
                .iter()
                .zip(&it.lambda)
                .map(|(&x, &l)| if l > 0.0 { log_penalty(l, it.eta, x) } else { 0.0 })
                .sum();
            0.5 * rss + it.gamma * a.norm_sqr() + pen
        },
        None,
        record,
    )
}

/// Full-grid channel estimate of the data-driven estimator.
pub fn dd_estimate(op: &FastForwardOperator, y: &[C64], params: &UnfoldedParams) -> Result<ChannelTensor> {
    let res = dd_iterate(op, y, params, false)?;
    op.reconstruct(&res.state)
}

/// Forward-mode derivative of [`dd_estimate`] along a parameter direction.
///
/// `direction` has the same layout as `params.iterations` and holds the tangent of every
/// scalar. Returns the estimate and its directional derivative (flat full-grid values), plus
/// the smallest relative distance `|‖ă_n‖ − τα_n| / τα_n` to a threshold kink seen along the
/// way. The derivative is exact wherever that margin is positive.
pub fn dd_directional_derivative(
    op: &FastForwardOperator,
    y: &[C64],
    params: &UnfoldedParams,
    direction: &[IterationParams],
) -> Result<(ChannelTensor, Vec<C64>, f64)> {
    check_inputs(op, y, params)?;
    if direction.len() != params.t_max() || direction.iter().any(|d| d.lambda.len() != params.n_boxes()) {
        return Err(Error::shape(
            "parameter direction",
            format!("{} iterations x {} boxes", params.t_max(), params.n_boxes()),
            format!("{} iterations", direction.len()),
        ));
    }
    let mut a = op.adjoint(y)?;
    let mut da = op.zero_state();
    let mut margin = f64::INFINITY;
    for (it, dit) in params.iterations.iter().zip(direction) {
        let (b, _) = descent_with_rss(op, &a, y, it.tau, it.gamma)?;
        // Gradient of the smooth part: g = (a − b)/τ.
        let inv_tau = 1.0 / it.tau;
        let gram_da = op.gram(&da)?;
        let mut db = da.clone();
        for (((dbi, dai), gi), (ai, bi)) in db
            .values_mut()
            .iter_mut()
            .zip(da.values())
            .zip(gram_da.values())
            .zip(a.values().iter().zip(b.values()))
        {
            let g = (ai - bi) * inv_tau;
            *dbi = dai - g * dit.tau - (gi + dai * (2.0 * it.gamma) + ai * (2.0 * dit.gamma)) * it.tau;
        }
        let mut next = b.clone();
        let mut dnext = db.clone();
        for n in 0..b.n_boxes() {
            let row = b.row(n);
            let drow = db.row(n);
            let nrm = norm_sqr(row).sqrt();
            let lam = it.lambda[n];
            let denom = 1.0 + it.eta * nrm;
            let alpha = lam / denom;
            let theta = it.tau * alpha;
            if theta == 0.0 {
                continue;
            }
            margin = margin.min((nrm - theta).abs() / theta);
            if nrm <= theta {
                next.row_mut(n).fill(C64::new(0.0, 0.0));
                dnext.row_mut(n).fill(C64::new(0.0, 0.0));
                continue;
            }
            let dnrm = inner(drow, row).re / nrm;
            let dalpha = dit.lambda[n] / denom - lam * (dit.eta * nrm + it.eta * dnrm) / (denom * denom);
            let dtheta = dit.tau * alpha + it.tau * dalpha;
            let s = (nrm - theta) / nrm;
            let ds = -dtheta / nrm + theta * dnrm / (nrm * nrm);
            for ((o, d), (x, dx)) in next
                .row_mut(n)
                .iter_mut()
                .zip(dnext.row_mut(n).iter_mut())
                .zip(row.iter().zip(drow))
            {
                *o = x * s;
                *d = dx * s + x * ds;
            }
        }
        a = next;
        da = dnext;
    }
    let h = op.reconstruct(&a)?;
    let dh = op.reconstruct(&da)?.values().to_vec();
    Ok((h, dh, margin))
}

/// Shared test vector for implementations of the forward pass in other languages: the
/// system that defines the operator, a measurement, a schedule and the expected output.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParityFixture {
    pub format_version: u32,
    pub grid: OfdmGrid,
    pub geometry: ArrayGeometry,
    pub delay_beam: DelayBeamGrid,
    pub rank: usize,
    pub y: Vec<C64>,
    pub schedule: serde_json::Value,
    pub expected: Vec<C64>,
}

impl ParityFixture {
    pub fn operator(&self) -> Result<FastForwardOperator> {
        FastForwardOperator::new(LowRankFactors::from_system(&self.grid, &self.geometry, &self.delay_beam, self.rank)?)
    }

    pub fn params(&self) -> Result<UnfoldedParams> {
        UnfoldedParams::from_json(&self.schedule.to_string())
    }

    /// Deterministic fixture on a small system with a non-trivial schedule.
    pub fn generate(seed: u64) -> Result<Self> {
        use rand::{Rng, SeedableRng};
        let grid = OfdmGrid::new(32, 30e3, 3.5e9, 4)?;
        let lam = grid.wavelength_m();
        let geometry = ArrayGeometry::uniform(3, 3, lam, lam / 2.0)?;
        let delay_beam = DelayBeamGrid::nyquist(&grid, &geometry, 1)?;
        let rank = 2;
        let op = FastForwardOperator::new(LowRankFactors::from_system(&grid, &geometry, &delay_beam, rank)?)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<C64> = (0..op.measurement_len())
            .map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let n = op.n_boxes();
        let iterations = (0..DEFAULT_UNFOLDED_ITERATIONS)
            .map(|_| IterationParams {
                tau: rng.random_range(0.5..1.0),
                gamma: rng.random_range(0.0..0.05),
                eta: rng.random_range(0.5..2.0),
                lambda: (0..n).map(|_| rng.random_range(0.05..0.5)).collect(),
            })
            .collect();
        let params = UnfoldedParams {
            grid_dims: delay_beam.dims(),
            gain_bin_db: 0.0,
            iterations,
        };
        // Round-trip through the file format so the fixture and its expected output agree.
        let params = UnfoldedParams::from_json(&params.to_json())?;
        let expected = dd_estimate(&op, &y, &params)?.values().to_vec();
        let schedule = serde_json::from_str(&params.to_json()).map_err(|e| Error::parse("schedule", e.to_string()))?;
        Ok(ParityFixture {
            format_version: 1,
            grid,
            geometry,
            delay_beam,
            rank,
            y,
            schedule,
            expected,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::parse("fixture", e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            Error::parse(field, e.into_inner().to_string())
        })
    }
}
