//! Smooth periodic vector parameters and the regularized fitting problem.
//!
//! A parameter `theta_t in R^m` is represented by a truncated Fourier series
//! with `K` harmonics over period `P`. Coefficients are stored as a
//! `(2K+1) x m` matrix whose rows follow the basis order
//! `[1, cos(w t), sin(w t), ..., cos(K w t), sin(K w t)]`, `w = 2 pi / P`.
//!
//! Fitting minimizes `sum_t loss_t(theta_t) + lambda * D` where `D` is the
//! Dirichlet energy, optionally subject to a convex constraint imposed at the
//! `P` grid phases. Since `theta_t` depends on `t` only through its phase,
//! losses are aggregated per phase.

mod admm;
mod ipm;
mod newton;

use std::f64::consts::PI;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use newton::SmoothObjective;

/// Number of basis functions for `harmonics` harmonics.
pub fn basis_len(harmonics: usize) -> usize {
    2 * harmonics + 1
}

fn check_harmonics(harmonics: usize, period: usize) -> Result<()> {
    if period < 2 {
        return Err(Error::Config(format!("period must be >= 2, got {period}")));
    }
    if 2 * harmonics >= period {
        return Err(Error::Config(format!(
            "{harmonics} harmonics need K < P/2 (P = {period})"
        )));
    }
    Ok(())
}

/// Basis values `[1, cos(2 pi t/P), sin(2 pi t/P), ..., cos(2 pi K t/P), sin(2 pi K t/P)]`.
pub fn basis_row(t: usize, harmonics: usize, period: usize) -> Result<Vec<f64>> {
    check_harmonics(harmonics, period)?;
    let mut row = vec![0.0; basis_len(harmonics)];
    fill_basis_row(t % period, harmonics, period, &mut row);
    Ok(row)
}

fn fill_basis_row(phase: usize, harmonics: usize, period: usize, out: &mut [f64]) {
    out[0] = 1.0;
    for k in 1..=harmonics {
        // reduce k*phase mod P first so the angle stays in [0, 2 pi)
        let angle = 2.0 * PI * ((k * phase) % period) as f64 / period as f64;
        out[2 * k - 1] = angle.cos();
        out[2 * k] = angle.sin();
    }
}

/// `P x (2K+1)` table of basis rows, one per phase.
pub(crate) fn basis_table(harmonics: usize, period: usize) -> Vec<f64> {
    let nb = basis_len(harmonics);
    let mut table = vec![0.0; period * nb];
    for p in 0..period {
        fill_basis_row(p, harmonics, period, &mut table[p * nb..(p + 1) * nb]);
    }
    table
}

/// Per-basis-row Dirichlet weights: `(2 pi)^2 k^2 / P` for both rows of harmonic `k`.
pub(crate) fn dirichlet_weights(harmonics: usize, period: usize) -> Vec<f64> {
    let mut w = vec![0.0; basis_len(harmonics)];
    for k in 1..=harmonics {
        let v = (2.0 * PI).powi(2) * (k * k) as f64 / period as f64;
        w[2 * k - 1] = v;
        w[2 * k] = v;
    }
    w
}

/// A smooth `P`-periodic vector parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamRepr", into = "ParamRepr")]
pub struct PeriodicParam {
    dim: usize,
    harmonics: usize,
    period: usize,
    /// `(2K+1) x dim`, row-major, rows in basis order.
    coeffs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ParamRepr {
    dim: usize,
    harmonics: usize,
    period: usize,
    alpha: Vec<Vec<f64>>,
    beta: Vec<Vec<f64>>,
}

impl From<PeriodicParam> for ParamRepr {
    fn from(p: PeriodicParam) -> Self {
        Self {
            dim: p.dim,
            harmonics: p.harmonics,
            period: p.period,
            alpha: (0..=p.harmonics).map(|k| p.alpha(k).to_vec()).collect(),
            beta: (1..=p.harmonics).map(|k| p.beta(k).to_vec()).collect(),
        }
    }
}

impl TryFrom<ParamRepr> for PeriodicParam {
    type Error = Error;

    fn try_from(r: ParamRepr) -> Result<Self> {
        let mut p = PeriodicParam::zeros(r.dim, r.harmonics, r.period)?;
        if r.alpha.len() != r.harmonics + 1 || r.beta.len() != r.harmonics {
            return Err(Error::Validation(
                "coefficient list lengths do not match harmonics".into(),
            ));
        }
        for (k, a) in r.alpha.iter().enumerate() {
            if a.len() != r.dim {
                return Err(Error::Validation("alpha row has wrong dimension".into()));
            }
            p.row_mut(if k == 0 { 0 } else { 2 * k - 1 })
                .copy_from_slice(a);
        }
        for (k, b) in r.beta.iter().enumerate() {
            if b.len() != r.dim {
                return Err(Error::Validation("beta row has wrong dimension".into()));
            }
            p.row_mut(2 * (k + 1)).copy_from_slice(b);
        }
        if p.coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::Validation("non-finite Fourier coefficient".into()));
        }
        Ok(p)
    }
}

impl PeriodicParam {
    pub fn zeros(dim: usize, harmonics: usize, period: usize) -> Result<Self> {
        check_harmonics(harmonics, period)?;
        if dim == 0 {
            return Err(Error::Config("parameter dimension must be positive".into()));
        }
        Ok(Self {
            dim,
            harmonics,
            period,
            coeffs: vec![0.0; basis_len(harmonics) * dim],
        })
    }

    /// Constant parameter equal to `value` at every phase.
    pub fn constant(value: &[f64], harmonics: usize, period: usize) -> Result<Self> {
        let mut p = Self::zeros(value.len(), harmonics, period)?;
        p.row_mut(0).copy_from_slice(value);
        Ok(p)
    }

    /// Builds from a flat `(2K+1) x dim` coefficient buffer in basis order.
    pub fn from_coeffs(
        dim: usize,
        harmonics: usize,
        period: usize,
        coeffs: Vec<f64>,
    ) -> Result<Self> {
        let p = Self::zeros(dim, harmonics, period)?;
        if coeffs.len() != p.coeffs.len() {
            return Err(Error::Validation(format!(
                "expected {} coefficients, got {}",
                p.coeffs.len(),
                coeffs.len()
            )));
        }
        Ok(Self { coeffs, ..p })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn harmonics(&self) -> usize {
        self.harmonics
    }

    pub fn period(&self) -> usize {
        self.period
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.coeffs[r * self.dim..(r + 1) * self.dim]
    }

    fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.coeffs[r * self.dim..(r + 1) * self.dim]
    }

    /// Cosine coefficient `alpha_k`, `k = 0..=K`.
    pub fn alpha(&self, k: usize) -> &[f64] {
        self.row(if k == 0 { 0 } else { 2 * k - 1 })
    }

    pub fn alpha_mut(&mut self, k: usize) -> &mut [f64] {
        self.row_mut(if k == 0 { 0 } else { 2 * k - 1 })
    }

    /// Sine coefficient `beta_k`, `k = 1..=K`.
    pub fn beta(&self, k: usize) -> &[f64] {
        assert!(k >= 1, "beta_0 does not exist");
        self.row(2 * k)
    }

    pub fn beta_mut(&mut self, k: usize) -> &mut [f64] {
        assert!(k >= 1, "beta_0 does not exist");
        self.row_mut(2 * k)
    }

    /// `theta_t`. Exactly periodic since only `t mod P` enters the basis.
    pub fn eval(&self, t: usize) -> Vec<f64> {
        let mut b = vec![0.0; basis_len(self.harmonics)];
        fill_basis_row(t % self.period, self.harmonics, self.period, &mut b);
        let mut out = vec![0.0; self.dim];
        self.eval_with_basis(&b, &mut out);
        out
    }

    pub(crate) fn eval_with_basis(&self, basis: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (r, &b) in basis.iter().enumerate() {
            for (o, &c) in out.iter_mut().zip(self.row(r)) {
                *o += b * c;
            }
        }
    }

    /// Least-squares fit of `K` harmonics to values at every phase
    /// (`P x dim`, row-major). The basis is orthogonal on the grid, so this is
    /// the truncated discrete Fourier series.
    pub fn project(grid: &[f64], dim: usize, harmonics: usize, period: usize) -> Result<Self> {
        let mut p = Self::zeros(dim, harmonics, period)?;
        if grid.len() != period * dim {
            return Err(Error::Validation(format!(
                "expected {} grid values, got {}",
                period * dim,
                grid.len()
            )));
        }
        let nb = basis_len(harmonics);
        let table = basis_table(harmonics, period);
        for r in 0..nb {
            let norm: f64 = (0..period).map(|ph| table[ph * nb + r].powi(2)).sum();
            let row = p.row_mut(r);
            for ph in 0..period {
                let b = table[ph * nb + r] / norm;
                for (c, v) in row.iter_mut().zip(&grid[ph * dim..(ph + 1) * dim]) {
                    *c += b * v;
                }
            }
        }
        Ok(p)
    }

    /// Evaluation at every phase, `P x dim` row-major.
    pub fn eval_grid(&self) -> Vec<f64> {
        let nb = basis_len(self.harmonics);
        let table = basis_table(self.harmonics, self.period);
        let mut grid = vec![0.0; self.period * self.dim];
        for p in 0..self.period {
            self.eval_with_basis(
                &table[p * nb..(p + 1) * nb],
                &mut grid[p * self.dim..(p + 1) * self.dim],
            );
        }
        grid
    }

    /// Dirichlet energy `(2 pi)^2 / P * sum_k k^2 (|alpha_k|^2 + |beta_k|^2)`.
    pub fn dirichlet_energy(&self) -> f64 {
        dirichlet_weights(self.harmonics, self.period)
            .iter()
            .enumerate()
            .map(|(r, w)| w * self.row(r).iter().map(|c| c * c).sum::<f64>())
            .sum()
    }

    pub fn is_constant(&self) -> bool {
        self.coeffs[self.dim..].iter().all(|&c| c == 0.0)
    }
}

/// Convex feasible set for `theta_t`, imposed at the grid phases.
#[derive(Debug, Clone, PartialEq)]
pub enum Constraint {
    Unconstrained,
    /// `theta_1 <= theta_2 <= ... <= theta_m`.
    Ordered,
    /// Componentwise `lower <= theta <= upper`.
    Bounds {
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
}

impl Constraint {
    /// Largest violation of the constraint by `theta` (0 when feasible).
    pub fn violation(&self, theta: &[f64]) -> f64 {
        match self {
            Constraint::Unconstrained => 0.0,
            Constraint::Ordered => theta
                .windows(2)
                .map(|w| (w[0] - w[1]).max(0.0))
                .fold(0.0, f64::max),
            Constraint::Bounds { lower, upper } => theta
                .iter()
                .zip(lower.iter().zip(upper))
                .map(|(&t, (&lo, &hi))| (lo - t).max(t - hi).max(0.0))
                .fold(0.0, f64::max),
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if let Constraint::Bounds { lower, upper } = self {
            if lower.len() != dim || upper.len() != dim {
                return Err(Error::Config("bound vectors have the wrong length".into()));
            }
            if let Some(j) = (0..dim).find(|&j| !(lower[j] <= upper[j])) {
                return Err(Error::Infeasible(format!(
                    "component {j}: lower bound {} exceeds upper bound {}",
                    lower[j], upper[j]
                )));
            }
        }
        Ok(())
    }
}

/// Loss that is a sum of scalar convex functions of the components of
/// `theta_t`, aggregated over all observed times sharing a phase.
pub trait SeparableLoss: Sync {
    fn dim(&self) -> usize;
    fn period(&self) -> usize;
    /// Whether any time contributes to the loss.
    fn has_data(&self) -> bool;
    /// Aggregate loss of component `component` at `phase` when it equals `value`.
    fn value(&self, phase: usize, component: usize, value: f64) -> f64;
    /// Minimizer over a scalar `u` of
    /// `sum_{j in components} [value(phase, j, u) + rho/2 (u - targets[j])^2]`,
    /// where `targets` is indexed relative to `components.start`.
    fn block_prox(&self, phase: usize, components: Range<usize>, targets: &[f64], rho: f64) -> f64;
    /// The loss as check functions, when it has that form.
    fn check_form(&self) -> Option<CheckLossData<'_>> {
        None
    }
}

/// `sum_{y at phase p} [tau_j (y - u)^+ + (1 - tau_j) (u - y)^+]` for
/// component `j`, where `u = theta_{p,j}`.
#[derive(Debug, Clone, Copy)]
pub struct CheckLossData<'a> {
    /// `tau_j` per component.
    pub levels: &'a [f64],
    /// Observations per phase.
    pub obs: &'a [Vec<f64>],
}

/// Backend for separable losses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeparableBackend {
    /// Interior point for check losses, operator splitting otherwise.
    #[default]
    Auto,
    Splitting,
}

/// Twice-differentiable convex loss in `theta_t`, aggregated per phase.
pub trait SmoothLoss: Sync {
    fn dim(&self) -> usize;
    fn period(&self) -> usize;
    fn has_data(&self) -> bool;
    /// Open convex domain of the loss.
    fn in_domain(&self, theta: &[f64]) -> bool {
        let _ = theta;
        true
    }
    fn phase_value(&self, phase: usize, theta: &[f64]) -> f64;
    /// Writes the gradient and the `dim x dim` row-major Hessian; returns the value.
    fn phase_derivatives(
        &self,
        phase: usize,
        theta: &[f64],
        grad: &mut [f64],
        hess: &mut [f64],
    ) -> f64;
}

#[derive(Clone, Copy)]
pub enum FitLoss<'a> {
    Separable(&'a dyn SeparableLoss),
    Smooth(&'a dyn SmoothLoss),
}

impl FitLoss<'_> {
    fn dim(&self) -> usize {
        match self {
            FitLoss::Separable(l) => l.dim(),
            FitLoss::Smooth(l) => l.dim(),
        }
    }

    fn period(&self) -> usize {
        match self {
            FitLoss::Separable(l) => l.period(),
            FitLoss::Smooth(l) => l.period(),
        }
    }

    fn has_data(&self) -> bool {
        match self {
            FitLoss::Separable(l) => l.has_data(),
            FitLoss::Smooth(l) => l.has_data(),
        }
    }
}

/// Instance of `minimize L + lambda D subject to theta_p in Theta, p = 0..P-1`.
pub struct SmoothFitProblem<'a> {
    pub loss: FitLoss<'a>,
    pub constraint: Constraint,
    pub lambda: f64,
}

impl SmoothFitProblem<'_> {
    /// Loss term `L` for a given parameter.
    pub fn loss_value(&self, param: &PeriodicParam) -> f64 {
        let grid = param.eval_grid();
        let m = param.dim();
        (0..param.period())
            .map(|p| {
                let theta = &grid[p * m..(p + 1) * m];
                match self.loss {
                    FitLoss::Separable(l) => theta
                        .iter()
                        .enumerate()
                        .map(|(j, &v)| l.value(p, j, v))
                        .sum(),
                    FitLoss::Smooth(l) => {
                        if l.in_domain(theta) {
                            l.phase_value(p, theta)
                        } else {
                            f64::INFINITY
                        }
                    }
                }
            })
            .sum()
    }

    /// Full objective `L + lambda D`.
    pub fn objective(&self, param: &PeriodicParam) -> f64 {
        self.loss_value(param) + self.lambda * param.dirichlet_energy()
    }

    /// Largest constraint violation over the grid phases.
    pub fn max_violation(&self, param: &PeriodicParam) -> f64 {
        let m = param.dim();
        param
            .eval_grid()
            .chunks(m)
            .map(|theta| self.constraint.violation(theta))
            .fold(0.0, f64::max)
    }
}

/// Solver knobs. `max_iter = None` selects the backend default
/// (50 000 for splitting, 200 for Newton and interior point).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSettings {
    pub max_iter: Option<usize>,
    pub tol: f64,
    pub rho: f64,
    pub separable_backend: SeparableBackend,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            max_iter: None,
            tol: 1e-6,
            rho: 1.0,
            separable_backend: SeparableBackend::Auto,
        }
    }
}

/// Result of a smooth periodic fit.
#[derive(Debug, Clone)]
pub struct SmoothFit {
    pub param: PeriodicParam,
    pub objective: f64,
    pub iterations: usize,
    /// Splitting: primal residual. Newton: 0.
    pub primal_residual: f64,
    /// Splitting: dual residual. Newton: gradient 2-norm.
    pub dual_residual: f64,
}

/// Feasibility tolerance for grid-phase constraints.
pub const FEASIBILITY_TOL: f64 = 1e-8;

/// Solves the fitting problem starting from zero coefficients.
pub fn fit_smooth_periodic(
    problem: &SmoothFitProblem<'_>,
    harmonics: usize,
    settings: &SolverSettings,
) -> Result<SmoothFit> {
    fit_smooth_periodic_from(problem, harmonics, settings, None)
}

/// Solves the fitting problem, optionally from a given starting point
/// (used by the Newton backend, which needs a point inside the loss domain).
pub fn fit_smooth_periodic_from(
    problem: &SmoothFitProblem<'_>,
    harmonics: usize,
    settings: &SolverSettings,
    init: Option<&PeriodicParam>,
) -> Result<SmoothFit> {
    let (m, period) = (problem.loss.dim(), problem.loss.period());
    check_harmonics(harmonics, period)?;
    if !(problem.lambda > 0.0) || !problem.lambda.is_finite() {
        return Err(Error::Domain(format!(
            "smoothing weight must be positive, got {}",
            problem.lambda
        )));
    }
    if !(settings.tol > 0.0) || !(settings.rho > 0.0) {
        return Err(Error::Config("solver tol and rho must be positive".into()));
    }
    problem.constraint.validate(m)?;
    if !problem.loss.has_data() {
        return Err(Error::Fit("no observed times to fit".into()));
    }
    if let Some(p) = init {
        if p.dim() != m || p.harmonics() != harmonics || p.period() != period {
            return Err(Error::Config("initial point has the wrong shape".into()));
        }
    }
    match problem.loss {
        FitLoss::Separable(loss) => match (settings.separable_backend, loss.check_form()) {
            (SeparableBackend::Auto, Some(data)) => {
                ipm::solve(data, &problem.constraint, problem.lambda, harmonics, settings)
            }
            _ => admm::solve(
            loss,
            &problem.constraint,
            problem.lambda,
            harmonics,
            settings,
            ),
        },
        FitLoss::Smooth(loss) => {
            if problem.constraint != Constraint::Unconstrained {
                return Err(Error::Config(
                    "the Newton backend supports only the loss's own domain".into(),
                ));
            }
            let start = match init {
                Some(p) => p.clone(),
                None => PeriodicParam::zeros(m, harmonics, period)?,
            };
            newton::solve(loss, problem.lambda, start, settings)
        }
    }
}

/// Squared loss `sum_t |theta_t - c_t|^2` over observed components.
///
/// Usable with both backends; mostly a reference problem for tests and
/// calibration.
#[derive(Debug, Clone)]
pub struct SquaredLoss {
    dim: usize,
    period: usize,
    /// Per (phase, component): count, sum, sum of squares.
    stats: Vec<[f64; 3]>,
}

impl SquaredLoss {
    /// `targets` yields `(phase, component, value)` observations.
    pub fn new(
        dim: usize,
        period: usize,
        targets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Self {
        let mut stats = vec![[0.0; 3]; dim * period];
        for (p, j, c) in targets {
            let s = &mut stats[(p % period) * dim + j];
            s[0] += 1.0;
            s[1] += c;
            s[2] += c * c;
        }
        Self { dim, period, stats }
    }

    fn stat(&self, phase: usize, j: usize) -> [f64; 3] {
        self.stats[phase * self.dim + j]
    }
}

impl SeparableLoss for SquaredLoss {
    fn dim(&self) -> usize {
        self.dim
    }

    fn period(&self) -> usize {
        self.period
    }

    fn has_data(&self) -> bool {
        self.stats.iter().any(|s| s[0] > 0.0)
    }

    fn value(&self, phase: usize, component: usize, value: f64) -> f64 {
        let [n, s, ss] = self.stat(phase, component);
        n * value * value - 2.0 * value * s + ss
    }

    fn block_prox(&self, phase: usize, components: Range<usize>, targets: &[f64], rho: f64) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (j, &v) in components.zip(targets) {
            let [n, s, _] = self.stat(phase, j);
            num += 2.0 * s + rho * v;
            den += 2.0 * n + rho;
        }
        num / den
    }
}

impl SmoothLoss for SquaredLoss {
    fn dim(&self) -> usize {
        self.dim
    }

    fn period(&self) -> usize {
        self.period
    }

    fn has_data(&self) -> bool {
        SeparableLoss::has_data(self)
    }

    fn phase_value(&self, phase: usize, theta: &[f64]) -> f64 {
        theta
            .iter()
            .enumerate()
            .map(|(j, &v)| SeparableLoss::value(self, phase, j, v))
            .sum()
    }

    fn phase_derivatives(
        &self,
        phase: usize,
        theta: &[f64],
        grad: &mut [f64],
        hess: &mut [f64],
    ) -> f64 {
        hess.iter_mut().for_each(|h| *h = 0.0);
        let mut f = 0.0;
        for (j, &v) in theta.iter().enumerate() {
            let [n, s, ss] = self.stat(phase, j);
            f += n * v * v - 2.0 * v * s + ss;
            grad[j] = 2.0 * (n * v - s);
            hess[j * self.dim + j] = 2.0 * n;
        }
        f
    }
}
