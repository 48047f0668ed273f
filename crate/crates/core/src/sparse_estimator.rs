//! Forward-backward splitting for the group-sparse RKHS problem, support extraction,
//! debiasing on the support and full-grid reconstruction.
//!
//! The iteration is
//!
//! ```text
//! ă = a − τ(𝗦ᴴ(𝗦a − y) + 2γa)
//! a_n ← ă_n/‖ă_n‖ · max(‖ă_n‖ − τλ, 0)
//! ```
//!
//! whose fixed points minimize `½‖y − 𝗦a‖² + γ‖a‖² + λΣ_n‖a_n‖`. [`fbs_objective`] evaluates
//! exactly that function, so its values along the iterates are what the divergence detector
//! and the monotonicity checks observe.

use std::sync::Once;

use serde::{Deserialize, Serialize};

use crate::channel_model::ChannelTensor;
use crate::fast_operators::{CoefficientState, FastForwardOperator};
use crate::linalg::norm_sqr;
use crate::{Error, Result, C64};

/// Growth of the objective over its initial value that counts as divergence.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    Tikhonov,
    Lasso,
    ElasticNet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizerSpec {
    pub kind: RegularizerKind,
    pub gamma: f64,
    pub lambda: f64,
}

impl RegularizerSpec {
    pub fn tikhonov(gamma: f64) -> Self {
        RegularizerSpec {
            kind: RegularizerKind::Tikhonov,
            gamma,
            lambda: 0.0,
        }
    }

    pub fn lasso(lambda: f64) -> Self {
        RegularizerSpec {
            kind: RegularizerKind::Lasso,
            gamma: 0.0,
            lambda,
        }
    }

    pub fn elastic_net(gamma: f64, lambda: f64) -> Self {
        RegularizerSpec {
            kind: RegularizerKind::ElasticNet,
            gamma,
            lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid("gamma must be finite and nonnegative"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("lambda must be finite and nonnegative"));
        }
        match self.kind {
            RegularizerKind::Tikhonov if self.lambda != 0.0 => Err(Error::invalid("tikhonov regularization requires lambda = 0")),
            RegularizerKind::Lasso if self.gamma != 0.0 => Err(Error::invalid("lasso regularization requires gamma = 0")),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub t_max: usize,
    pub t_prime_max: usize,
    /// Step sizes of the sparse stage; a single entry applies to every iteration.
    pub step_sizes: Vec<f64>,
    pub debias_step_sizes: Vec<f64>,
    /// Linear receive SNR; the debias Tikhonov weight is `debias_ridge_scale/snr`.
    pub snr: f64,
    pub debias_ridge_scale: f64,
    pub support_atol: f64,
    /// Stop a stage early once `‖a⁽ᵗ⁺¹⁾ − a⁽ᵗ⁾‖ ≤ rel_tol·‖a⁽ᵗ⁾‖`.
    pub rel_tol: Option<f64>,
    pub debias: bool,
    pub record_iterates: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            t_max: 30,
            t_prime_max: 30,
            step_sizes: vec![1.0],
            debias_step_sizes: vec![1.0],
            snr: 1.0,
            debias_ridge_scale: 1.0,
            support_atol: 0.0,
            rel_tol: None,
            debias: true,
            record_iterates: false,
        }
    }
}

fn step_at(steps: &[f64], t: usize) -> f64 {
    if steps.len() == 1 {
        steps[0]
    } else {
        steps[t]
    }
}

fn validate_steps(steps: &[f64], count: usize, what: &str) -> Result<()> {
    if count == 0 {
        return Ok(());
    }
    if steps.len() != 1 && steps.len() != count {
        return Err(Error::invalid(format!("{what} needs 1 or {count} entries, found {}", steps.len())));
    }
    if !steps.iter().all(|&s| s > 0.0 && s.is_finite()) {
        return Err(Error::invalid(format!("{what} must be positive")));
    }
    Ok(())
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        validate_steps(&self.step_sizes, self.t_max, "step_sizes")?;
        if self.debias {
            validate_steps(&self.debias_step_sizes, self.t_prime_max, "debias_step_sizes")?;
        }
        if !(self.snr > 0.0) {
            return Err(Error::invalid("snr must be positive"));
        }
        if !(self.debias_ridge_scale >= 0.0 && self.debias_ridge_scale.is_finite()) {
            return Err(Error::invalid("debias_ridge_scale must be finite and nonnegative"));
        }
        if !(self.support_atol >= 0.0) {
            return Err(Error::invalid("support_atol must be nonnegative"));
        }
        Ok(())
    }

    pub fn debias_gamma(&self) -> f64 {
        self.debias_ridge_scale / self.snr
    }
}

/// Boxes with a nonzero coefficient row, in increasing order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SupportSet {
    members: Vec<usize>,
}

impl SupportSet {
    pub fn new(mut members: Vec<usize>) -> Self {
        members.sort_unstable();
        members.dedup();
        SupportSet { members }
    }

    pub fn all(n_boxes: usize) -> Self {
        SupportSet {
            members: (0..n_boxes).collect(),
        }
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn contains(&self, n: usize) -> bool {
        self.members.binary_search(&n).is_ok()
    }

    pub fn mask(&self, n_boxes: usize) -> Vec<bool> {
        let mut m = vec![false; n_boxes];
        for &i in &self.members {
            m[i] = true;
        }
        m
    }

    pub fn is_subset_of(&self, other: &SupportSet) -> bool {
        self.members.iter().all(|&n| other.contains(n))
    }
}

/// Iterates and diagnostics of one FBS stage.
#[derive(Debug, Clone)]
pub struct StageResult {
    pub state: CoefficientState,
    /// Objective at `a⁽⁰⁾, a⁽¹⁾, …, a⁽ᵗ⁾`.
    pub objective: Vec<f64>,
    pub iterations: usize,
    /// Every iterate after the initial one, when requested.
    pub iterates: Vec<CoefficientState>,
}

fn check_lengths(op: &FastForwardOperator, a: &CoefficientState, y: &[C64]) -> Result<()> {
    if y.len() != op.measurement_len() {
        return Err(Error::shape("measurement vector", op.measurement_len(), y.len()));
    }
    if a.n_boxes() != op.n_boxes() || a.r3() != op.r3() {
        return Err(Error::shape(
            "coefficient state",
            format!("{}x{}", op.n_boxes(), op.r3()),
            format!("{}x{}", a.n_boxes(), a.r3()),
        ));
    }
    Ok(())
}

/// `½‖y − 𝗦a‖² + γ‖a‖² + λ Σ_n ‖a_n‖`.
pub fn fbs_objective(op: &FastForwardOperator, a: &CoefficientState, y: &[C64], gamma: f64, lambda: f64) -> Result<f64> {
    check_lengths(op, a, y)?;
    let sa = op.apply(a)?;
    let rss: f64 = sa.iter().zip(y).map(|(s, v)| (s - v).norm_sqr()).sum();
    Ok(objective_from_rss(rss, a, gamma, lambda))
}

fn objective_from_rss(rss: f64, a: &CoefficientState, gamma: f64, lambda: f64) -> f64 {
    let group: f64 = if lambda > 0.0 { a.row_norms().iter().sum() } else { 0.0 };
    0.5 * rss + gamma * a.norm_sqr() + lambda * group
}

/// Descent step, also returning `‖𝗦a − y‖²` at the input iterate.
pub(crate) fn descent_with_rss(
    op: &FastForwardOperator,
    a: &CoefficientState,
    y: &[C64],
    tau: f64,
    gamma: f64,
) -> Result<(CoefficientState, f64)> {
    check_lengths(op, a, y)?;
    let mut r = op.apply(a)?;
    let mut rss = 0.0;
    for (ri, yi) in r.iter_mut().zip(y) {
        *ri -= yi;
        rss += ri.norm_sqr();
    }
    let mut g = op.adjoint(&r)?;
    let two_gamma = 2.0 * gamma;
    for (gi, ai) in g.values_mut().iter_mut().zip(a.values()) {
        *gi = ai - (*gi + ai * two_gamma) * tau;
    }
    Ok((g, rss))
}

/// `ă = a − τ(𝗦ᴴ(𝗦a − y) + 2γa)`.
pub fn descent_step(op: &FastForwardOperator, a: &CoefficientState, y: &[C64], tau: f64, gamma: f64) -> Result<CoefficientState> {
    if !(tau > 0.0) || !(gamma >= 0.0) {
        return Err(Error::invalid("descent step needs tau > 0 and gamma >= 0"));
    }
    descent_with_rss(op, a, y, tau, gamma).map(|(s, _)| s)
}

/// Shrink every row of `a` toward zero by its threshold in Euclidean norm.
pub fn group_soft_threshold(a: &CoefficientState, thresholds: &[f64]) -> Result<CoefficientState> {
    if thresholds.len() != a.n_boxes() {
        return Err(Error::shape("thresholds", a.n_boxes(), thresholds.len()));
    }
    if !thresholds.iter().all(|&t| t >= 0.0) {
        return Err(Error::invalid("thresholds must be nonnegative"));
    }
    let mut out = a.clone();
    shrink_rows(&mut out, |n| thresholds[n]);
    Ok(out)
}

pub(crate) fn shrink_rows(a: &mut CoefficientState, threshold: impl Fn(usize) -> f64) {
    for n in 0..a.n_boxes() {
        let t = threshold(n);
        if t == 0.0 {
            continue;
        }
        let row = a.row_mut(n);
        let nrm = norm_sqr(row).sqrt();
        if nrm <= t {
            row.fill(C64::new(0.0, 0.0));
        } else {
            let s = (nrm - t) / nrm;
            for v in row.iter_mut() {
                *v *= s;
            }
        }
    }
}

fn check_divergence(iteration: usize, objective: f64, initial: f64) -> Result<()> {
    if !(objective <= DIVERGENCE_FACTOR * initial) {
        return Err(Error::Diverged {
            iteration,
            objective,
            initial,
        });
    }
    Ok(())
}

fn relative_change(prev: &CoefficientState, next: &CoefficientState) -> f64 {
    let d: f64 = prev.values().iter().zip(next.values()).map(|(a, b)| (a - b).norm_sqr()).sum();
    (d / prev.norm_sqr().max(f64::MIN_POSITIVE)).sqrt()
}

static STEP_WARNING: Once = Once::new();

/// Warn once per process when a step exceeds `1/L` with `L = ‖𝗦‖² + 2γ`.
pub fn check_step_size(op: &FastForwardOperator, tau: f64, gamma: f64) -> bool {
    let lipschitz = op.norm_sqr() + 2.0 * gamma;
    let ok = tau * lipschitz <= 1.0 + 1e-9;
    if !ok {
        STEP_WARNING.call_once(|| {
            log::warn!(
                "step size {tau} exceeds 1/L = {:.4} (L = ‖S‖² + 2γ = {lipschitz:.4}); convergence is not guaranteed",
                1.0 / lipschitz
            );
        });
    }
    ok
}

/// Generic proximal-gradient loop shared by the convex and the unfolded estimators.
///
/// `prox(t, state)` is applied after the descent step of iteration `t`; `objective(t, rss, a)`
/// evaluates the objective at iterate `a` given its residual energy.
#[allow(clippy::too_many_arguments)]
pub(crate) fn proximal_loop(
    op: &FastForwardOperator,
    y: &[C64],
    start: CoefficientState,
    iterations: usize,
    step: impl Fn(usize) -> f64,
    gamma: impl Fn(usize) -> f64,
    mut prox: impl FnMut(usize, &mut CoefficientState),
    objective: impl Fn(usize, f64, &CoefficientState) -> f64,
    rel_tol: Option<f64>,
    record: bool,
) -> Result<StageResult> {
    let mut a = start;
    let mut trace = Vec::with_capacity(iterations + 1);
    let mut iterates = Vec::new();
    let mut initial = None;
    let mut done = 0;
    for t in 0..iterations {
        let (mut next, rss) = descent_with_rss(op, &a, y, step(t), gamma(t))?;
        let obj = objective(t, rss, &a);
        let init = *initial.get_or_insert(obj);
        check_divergence(t, obj, init)?;
        trace.push(obj);
        prox(t, &mut next);
        let change = rel_tol.map(|_| relative_change(&a, &next));
        a = next;
        done = t + 1;
        if record {
            iterates.push(a.clone());
        }
        if let (Some(tol), Some(c)) = (rel_tol, change) {
            if c <= tol {
                break;
            }
        }
    }
    let sa = op.apply(&a)?;
    let rss: f64 = sa.iter().zip(y).map(|(s, v)| (s - v).norm_sqr()).sum();
    let last = objective(done.saturating_sub(1), rss, &a);
    if let Some(init) = initial {
        check_divergence(done, last, init)?;
    }
    trace.push(last);
    Ok(StageResult {
        state: a,
        objective: trace,
        iterations: done,
        iterates,
    })
}

/// Sparse stage: FBS from `a⁽⁰⁾ = 𝗦ᴴy` for `t_max` iterations.
pub fn solve_sparse(op: &FastForwardOperator, y: &[C64], reg: &RegularizerSpec, cfg: &SolverConfig) -> Result<StageResult> {
    reg.validate()?;
    cfg.validate()?;
    let start = op.adjoint(y)?;
    solve_sparse_from(op, y, start, reg, cfg)
}

pub fn solve_sparse_from(
    op: &FastForwardOperator,
    y: &[C64],
    start: CoefficientState,
    reg: &RegularizerSpec,
    cfg: &SolverConfig,
) -> Result<StageResult> {
    reg.validate()?;
    cfg.validate()?;
    check_lengths(op, &start, y)?;
    if cfg.t_max > 0 {
        let tau_max = (0..cfg.t_max).map(|t| step_at(&cfg.step_sizes, t)).fold(0.0, f64::max);
        check_step_size(op, tau_max, reg.gamma);
    }
    let (gamma, lambda) = (reg.gamma, reg.lambda);
    proximal_loop(
        op,
        y,
        start,
        cfg.t_max,
        |t| step_at(&cfg.step_sizes, t),
        |_| gamma,
        |t, a| {
            let thr = step_at(&cfg.step_sizes, t) * lambda;
            shrink_rows(a, |_| thr);
        },
        |_, rss, a| objective_from_rss(rss, a, gamma, lambda),
        cfg.rel_tol,
        cfg.record_iterates,
    )
}

pub fn extract_support(a: &CoefficientState, atol: f64) -> SupportSet {
    SupportSet::new((0..a.n_boxes()).filter(|&n| a.row_norm(n) > atol).collect())
}

/// Tikhonov fit with weight `1/snr` restricted to the support rows, continuing from `start`.
pub fn debias(op: &FastForwardOperator, y: &[C64], start: &CoefficientState, support: &SupportSet, cfg: &SolverConfig) -> Result<StageResult> {
    cfg.validate()?;
    check_lengths(op, start, y)?;
    if support.members().iter().any(|&n| n >= op.n_boxes()) {
        return Err(Error::invalid("support contains a box outside the grid"));
    }
    if support.is_empty() {
        log::debug!("empty support; debiasing returns the zero state");
        return Ok(StageResult {
            state: op.zero_state(),
            objective: vec![0.5 * norm_sqr(y)],
            iterations: 0,
            iterates: Vec::new(),
        });
    }
    let gamma = cfg.debias_gamma();
    let mask = support.mask(op.n_boxes());
    let mut a = start.clone();
    zero_off_support(&mut a, &mask);
    proximal_loop(
        op,
        y,
        a,
        cfg.t_prime_max,
        |t| step_at(&cfg.debias_step_sizes, t),
        |_| gamma,
        |_, a| zero_off_support(a, &mask),
        |_, rss, a| objective_from_rss(rss, a, gamma, 0.0),
        cfg.rel_tol,
        cfg.record_iterates,
    )
}

fn zero_off_support(a: &mut CoefficientState, mask: &[bool]) {
    for (n, &keep) in mask.iter().enumerate() {
        if !keep {
            a.row_mut(n).fill(C64::new(0.0, 0.0));
        }
    }
}

/// Full output of the convex estimator.
#[derive(Debug, Clone)]
pub struct RkhsEstimate {
    pub channel: ChannelTensor,
    pub support: SupportSet,
    pub sparse: StageResult,
    pub debiased: Option<StageResult>,
}

impl RkhsEstimate {
    pub fn coefficients(&self) -> &CoefficientState {
        self.debiased.as_ref().map_or(&self.sparse.state, |d| &d.state)
    }
}

/// Sparse stage, support extraction, optional debiasing and reconstruction on the full grid.
pub fn estimate_channel_detailed(op: &FastForwardOperator, y: &[C64], reg: &RegularizerSpec, cfg: &SolverConfig) -> Result<RkhsEstimate> {
    let sparse = solve_sparse(op, y, reg, cfg)?;
    let support = extract_support(&sparse.state, cfg.support_atol);
    let debiased = if cfg.debias {
        Some(debias(op, y, &sparse.state, &support, cfg)?)
    } else {
        None
    };
    let coeffs = debiased.as_ref().map_or(&sparse.state, |d| &d.state);
    let channel = op.reconstruct(coeffs)?;
    Ok(RkhsEstimate {
        channel,
        support,
        sparse,
        debiased,
    })
}

pub fn estimate_channel(op: &FastForwardOperator, y: &[C64], reg: &RegularizerSpec, cfg: &SolverConfig) -> Result<ChannelTensor> {
    estimate_channel_detailed(op, y, reg, cfg).map(|e| e.channel)
}

/// Estimator settings in terms of the noise level, as used by the evaluation harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RkhsSettings {
    pub rank: usize,
    pub oversampling: usize,
    /// `λ = lambda_multiplier · √N0`.
    pub lambda_multiplier: f64,
    pub gamma: f64,
    pub t_max: usize,
    pub t_prime_max: usize,
    pub step_size: f64,
    pub debias_step_size: f64,
    /// Debias Tikhonov weight in units of `1/SNR`.
    pub debias_ridge_scale: f64,
    pub debias: bool,
}

impl Default for RkhsSettings {
    fn default() -> Self {
        RkhsSettings {
            rank: 3,
            oversampling: 1,
            lambda_multiplier: DEFAULT_LAMBDA_MULTIPLIER,
            gamma: 0.0,
            t_max: 30,
            t_prime_max: 30,
            step_size: 1.0,
            debias_step_size: 1.0,
            debias_ridge_scale: DEFAULT_DEBIAS_RIDGE_SCALE,
            debias: true,
        }
    }
}

/// Debias ridge `γ = scale / SNR`, with SNR = 1/N0.
pub const DEFAULT_DEBIAS_RIDGE_SCALE: f64 = 0.003;

/// Multiplier of `√N0` used when none is configured.
pub const DEFAULT_LAMBDA_MULTIPLIER: f64 = 2.5;

impl RkhsSettings {
    pub fn regularizer(&self, noise_variance: f64) -> RegularizerSpec {
        let lambda = self.lambda_multiplier * noise_variance.max(0.0).sqrt();
        if self.gamma > 0.0 {
            RegularizerSpec::elastic_net(self.gamma, lambda)
        } else {
            RegularizerSpec::lasso(lambda)
        }
    }

    /// Solver configuration for `op`. `step_size` and `debias_step_size` are in units of
    /// `1/L` with `L = ‖𝗦‖² + 2γ` of the respective stage.
    pub fn solver(&self, noise_variance: f64, op: &FastForwardOperator) -> SolverConfig {
        let snr = if noise_variance > 0.0 { 1.0 / noise_variance } else { f64::INFINITY };
        let norm = op.norm_sqr();
        let sparse_l = norm + 2.0 * self.gamma;
        let debias_l = norm + 2.0 * self.debias_ridge_scale / snr;
        SolverConfig {
            t_max: self.t_max,
            t_prime_max: self.t_prime_max,
            step_sizes: vec![self.step_size / sparse_l],
            debias_step_sizes: vec![self.debias_step_size / debias_l],
            snr,
            debias_ridge_scale: self.debias_ridge_scale,
            debias: self.debias,
            ..SolverConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 || self.oversampling == 0 {
            return Err(Error::invalid("rank and oversampling must be at least 1"));
        }
        if !(self.lambda_multiplier >= 0.0) || !(self.gamma >= 0.0) || !(self.debias_ridge_scale >= 0.0) {
            return Err(Error::invalid("lambda_multiplier, gamma and debias_ridge_scale must be nonnegative"));
        }
        if !(self.step_size > 0.0 && self.debias_step_size > 0.0) {
            return Err(Error::invalid("step sizes must be positive"));
        }
        Ok(())
    }
}
