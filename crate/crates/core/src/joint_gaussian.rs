//! Joint Gaussian law of the latent series over a window of time steps.
//!
//! Within a window of `W` steps the latent process satisfies
//! `x_s = sum_m A_m x_{s-m} + v_s`, `v_s ~ N(mu_s, Sigma_s)`, for `s >= M`,
//! while the first `min(M, W)` steps are independent `N(0, I)`. Writing this
//! as `B x = v` with `B` unit lower block-triangular gives the precision
//! `J = B' D^-1 B`, block-banded with half-bandwidth `M` steps. Entries are
//! stacked time-major: entry `(s, i)` sits at `s * d + i`.
//!
//! Precision assembly followed by Cholesky factorization is one of several
//! ways to organize this linear algebra; storage is dense at desk scale.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::ar_model::ArCoefficients;
use crate::error::{Error, Result};
use crate::marginal_transform::normal_quantile;
use crate::residual_model::ResidualGaussian;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Mean and precision of the latent series over `len` consecutive steps.
#[derive(Debug, Clone)]
pub struct JointGaussianWindow {
    start_phase: usize,
    len: usize,
    dim: usize,
    memory: usize,
    mean: DVector<f64>,
    precision: DMatrix<f64>,
}

/// Builds the window law starting at phase `start_phase`, `len` steps long.
pub fn assemble_window(
    ar: &ArCoefficients,
    res: &ResidualGaussian,
    start_phase: usize,
    len: usize,
) -> Result<JointGaussianWindow> {
    let d = ar.dim();
    if res.dim() != d {
        return Err(Error::Validation(format!(
            "AR model has {d} systems, residual model has {}",
            res.dim()
        )));
    }
    if len == 0 {
        return Err(Error::Validation(
            "window must have at least one step".into(),
        ));
    }
    let memory = ar.memory();
    let period = res.period();
    let n = len * d;
    let mats: Vec<DMatrix<f64>> = (1..=memory).map(|m| ar.matrix(m)).collect();

    let mut precision = DMatrix::<f64>::zeros(n, n);
    let mut mean = DVector::<f64>::zeros(n);
    for s in 0..len {
        if s < memory {
            // boundary step: x_s ~ N(0, I)
            for i in 0..d {
                precision[(s * d + i, s * d + i)] += 1.0;
            }
            continue;
        }
        let g = res.phase((start_phase + s) % period);
        // rows of L' B for this step: block at lag m is -L' A_m (lag 0: L')
        let lt = g.l.transpose();
        let blocks: Vec<(usize, DMatrix<f64>)> = std::iter::once((s, lt.clone()))
            .chain(
                mats.iter()
                    .enumerate()
                    .map(|(m, a)| (s - m - 1, -(&lt * a))),
            )
            .collect();
        for (sa, ga) in &blocks {
            for (sb, gb) in &blocks {
                let block = ga.tr_mul(gb);
                precision
                    .view_mut((sa * d, sb * d), (d, d))
                    .zip_apply(&block, |p, b| *p += b);
            }
        }
        let mut m_s = g.mu.clone();
        for (m, a) in mats.iter().enumerate() {
            let lag = mean.rows((s - m - 1) * d, d).into_owned();
            m_s += a * lag;
        }
        mean.rows_mut(s * d, d).copy_from(&m_s);
    }
    Ok(JointGaussianWindow {
        start_phase,
        len,
        dim: d,
        memory,
        mean,
        precision,
    })
}

impl JointGaussianWindow {
    /// Window with an explicit mean and precision (no band structure implied).
    pub fn from_parts(mean: DVector<f64>, precision: DMatrix<f64>, dim: usize) -> Result<Self> {
        let n = mean.len();
        if precision.nrows() != n || precision.ncols() != n || dim == 0 || n % dim != 0 {
            return Err(Error::Validation(
                "window mean and precision disagree in size".into(),
            ));
        }
        Ok(Self {
            start_phase: 0,
            len: n / dim,
            dim,
            memory: n / dim,
            mean,
            precision,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn size(&self) -> usize {
        self.len * self.dim
    }

    pub fn memory(&self) -> usize {
        self.memory
    }

    pub fn start_phase(&self) -> usize {
        self.start_phase
    }

    pub fn index(&self, step: usize, system: usize) -> usize {
        step * self.dim + system
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    /// Half-bandwidth in scalar entries: `(M + 1) d - 1`.
    pub fn bandwidth(&self) -> usize {
        (self.memory + 1) * self.dim - 1
    }

    /// Largest magnitude of a precision entry coupling steps more than `M` apart.
    pub fn band_violation(&self) -> f64 {
        let d = self.dim;
        let mut worst = 0.0f64;
        for a in 0..self.size() {
            for b in 0..self.size() {
                if (a / d).abs_diff(b / d) > self.memory {
                    worst = worst.max(self.precision[(a, b)].abs());
                }
            }
        }
        worst
    }

    fn factor(&self) -> Result<Cholesky<f64, Dyn>> {
        self.precision
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Fit("window precision is not positive definite".into()))
    }

    /// Dense covariance `J^-1`.
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        Ok(self.factor()?.inverse())
    }

    /// `log N(x; mean, J^-1)` for a fully specified window.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.size() {
            return Err(Error::Validation(format!(
                "{} values for a window of {} entries",
                x.len(),
                self.size()
            )));
        }
        let ch = self.factor()?;
        let log_det: f64 = 2.0 * ch.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let r = DVector::from_column_slice(x) - &self.mean;
        let quad = r.dot(&(&self.precision * &r));
        Ok(-0.5 * self.size() as f64 * LN_2PI + 0.5 * log_det - 0.5 * quad)
    }

    /// Conditions on `known` `(index, value)` pairs.
    pub fn condition(&self, known: &[(usize, f64)]) -> Result<ConditionalGaussian> {
        let all: Vec<usize> = (0..self.size()).collect();
        condition_on(&self.mean, &self.precision, &all, known)
    }

    /// `n` draws from the window law.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
        let ch = self.factor()?;
        Ok(draw(&self.mean, &ch, n, seed))
    }

    /// Exact leave-one-out conditionals of the `known` entries.
    ///
    /// For each known entry, the law of that entry given every other known
    /// entry; other window entries are unknown. Returns `(mean, variance)` in
    /// the order of `known`.
    pub fn leave_one_out(&self, known: &[(usize, f64)]) -> Result<Vec<(f64, f64)>> {
        let n = self.size();
        let mut is_known = vec![false; n];
        let mut delta = vec![0.0; n];
        for &(k, x) in known {
            check_index(k, n)?;
            is_known[k] = true;
            delta[k] = x - self.mean[k];
        }
        let unknown: Vec<usize> = (0..n).filter(|&j| !is_known[j]).collect();
        let band = self.bandwidth();
        let jrow = |a: usize| {
            let lo = a.saturating_sub(band);
            let hi = (a + band + 1).min(n);
            lo..hi
        };

        // conditional mean offset of the unknown block given all known entries
        let (factor, offset_u) = if unknown.is_empty() {
            (None, DVector::zeros(0))
        } else {
            let juu = self
                .precision
                .select_rows(&unknown)
                .select_columns(&unknown);
            let ch = juu
                .cholesky()
                .ok_or_else(|| Error::Fit("unknown block is not positive definite".into()))?;
            let mut rhs = DVector::zeros(unknown.len());
            for (r, &u) in unknown.iter().enumerate() {
                rhs[r] = jrow(u)
                    .filter(|&j| is_known[j])
                    .map(|j| self.precision[(u, j)] * delta[j])
                    .sum();
            }
            let offset = -ch.solve(&rhs);
            (Some(ch), offset)
        };
        let position: Vec<Option<usize>> = {
            let mut pos = vec![None; n];
            for (r, &u) in unknown.iter().enumerate() {
                pos[u] = Some(r);
            }
            pos
        };

        known
            .iter()
            .map(|&(k, _)| {
                let jkk = self.precision[(k, k)];
                let r_k: f64 = -jrow(k)
                    .filter(|&j| j != k && is_known[j])
                    .map(|j| self.precision[(k, j)] * delta[j])
                    .sum::<f64>();
                let coupled: Vec<(usize, f64)> = jrow(k)
                    .filter_map(|j| position[j].map(|r| (r, self.precision[(j, k)])))
                    .filter(|&(_, v)| v != 0.0)
                    .collect();
                let (schur, correction) = match (&factor, coupled.is_empty()) {
                    (Some(ch), false) => {
                        let mut juk = DVector::zeros(unknown.len());
                        for &(r, v) in &coupled {
                            juk[r] = v;
                        }
                        let w = ch.solve(&juk);
                        let schur = jkk - juk.dot(&w);
                        let shifted = &offset_u + &w * delta[k];
                        (schur, juk.dot(&shifted))
                    }
                    _ => (jkk, 0.0),
                };
                if !(schur > 0.0) {
                    return Err(Error::Fit("leave-one-out precision is not positive".into()));
                }
                Ok((self.mean[k] + (r_k - correction) / schur, 1.0 / schur))
            })
            .collect()
    }
}

fn check_index(k: usize, n: usize) -> Result<()> {
    if k >= n {
        return Err(Error::Validation(format!(
            "index {k} is outside a window of {n} entries"
        )));
    }
    Ok(())
}

fn draw(mean: &DVector<f64>, ch: &Cholesky<f64, Dyn>, n: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lt = ch.l().transpose();
    (0..n)
        .map(|_| {
            let zeta = DVector::from_fn(mean.len(), |_, _| {
                Distribution::<f64>::sample(&StandardNormal, &mut rng)
            });
            // J = L L', so L' u = zeta gives u ~ N(0, J^-1)
            let u = lt
                .solve_upper_triangular(&zeta)
                .expect("Cholesky factor has a positive diagonal");
            mean + u
        })
        .collect()
}

/// Law of the unknown entries given the known ones.
#[derive(Debug, Clone)]
pub struct ConditionalGaussian {
    /// Window indices of the unknown entries, increasing.
    pub unknown: Vec<usize>,
    pub mean: DVector<f64>,
    pub precision: DMatrix<f64>,
    /// `diag(precision^-1)`.
    pub variances: DVector<f64>,
    factor: Option<Cholesky<f64, Dyn>>,
}

fn condition_on(
    mean: &DVector<f64>,
    precision: &DMatrix<f64>,
    indices: &[usize],
    known: &[(usize, f64)],
) -> Result<ConditionalGaussian> {
    let n = indices.len();
    let mut local_known = vec![None; n];
    for &(k, x) in known {
        let pos = indices.binary_search(&k).map_err(|_| {
            Error::Validation(format!("index {k} is not an unknown entry of this law"))
        })?;
        local_known[pos] = Some(x);
    }
    let u_local: Vec<usize> = (0..n).filter(|&j| local_known[j].is_none()).collect();
    let k_local: Vec<usize> = (0..n).filter(|&j| local_known[j].is_some()).collect();
    let unknown: Vec<usize> = u_local.iter().map(|&j| indices[j]).collect();
    if u_local.is_empty() {
        return Ok(ConditionalGaussian {
            unknown,
            mean: DVector::zeros(0),
            precision: DMatrix::zeros(0, 0),
            variances: DVector::zeros(0),
            factor: None,
        });
    }
    let juu = precision.select_rows(&u_local).select_columns(&u_local);
    let ch = juu
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Fit("conditional precision is not positive definite".into()))?;
    let mut cmean = DVector::from_iterator(u_local.len(), u_local.iter().map(|&j| mean[j]));
    if !k_local.is_empty() {
        let juk = precision.select_rows(&u_local).select_columns(&k_local);
        let dk = DVector::from_iterator(
            k_local.len(),
            k_local.iter().map(|&j| local_known[j].unwrap() - mean[j]),
        );
        cmean -= ch.solve(&(juk * dk));
    }
    // selected inverse by unit-vector solves
    let variances = DVector::from_iterator(
        u_local.len(),
        (0..u_local.len()).map(|r| {
            let mut e = DVector::zeros(u_local.len());
            e[r] = 1.0;
            ch.solve(&e)[r]
        }),
    );
    Ok(ConditionalGaussian {
        unknown,
        mean: cmean,
        precision: juu,
        variances,
        factor: Some(ch),
    })
}

impl ConditionalGaussian {
    /// Position of window index `entry` among the unknowns.
    pub fn position(&self, entry: usize) -> Result<usize> {
        self.unknown
            .binary_search(&entry)
            .map_err(|_| Error::Validation(format!("entry {entry} is not unknown")))
    }

    pub fn std(&self, entry: usize) -> Result<f64> {
        Ok(self.variances[self.position(entry)?].sqrt())
    }

    /// `p`-quantile of the conditional marginal of `entry`.
    pub fn marginal_quantile(&self, entry: usize, p: f64) -> Result<f64> {
        let z = normal_quantile(p)?;
        let r = self.position(entry)?;
        Ok(self.mean[r] + z * self.variances[r].sqrt())
    }

    /// Conditions further on `known` window indices (all of them unknown here).
    pub fn condition(&self, known: &[(usize, f64)]) -> Result<ConditionalGaussian> {
        condition_on(&self.mean, &self.precision, &self.unknown, known)
    }

    /// `n` joint draws of the unknown entries, ordered as `unknown`.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<DVector<f64>> {
        match &self.factor {
            Some(ch) => draw(&self.mean, ch, n, seed),
            None => vec![DVector::zeros(0); n],
        }
    }
}

/// `conditional_marginal_quantile` in free-function form.
pub fn conditional_marginal_quantile(
    cond: &ConditionalGaussian,
    entry: usize,
    p: f64,
) -> Result<f64> {
    cond.marginal_quantile(entry, p)
}

/// Log-density of a fully observed latent window by the innovations
/// recursion; equal to [`JointGaussianWindow::log_density`] but `O(W)`.
///
/// `x` holds `len * d` values, time-major.
pub fn log_density_recursive(
    ar: &ArCoefficients,
    res: &ResidualGaussian,
    start_phase: usize,
    x: &[f64],
) -> Result<f64> {
    let d = ar.dim();
    if res.dim() != d || x.len() % d != 0 {
        return Err(Error::Validation(
            "window values do not match the model dimension".into(),
        ));
    }
    let len = x.len() / d;
    let memory = ar.memory();
    let mut total = 0.0;
    let mut pred = vec![0.0; d];
    for s in 0..len {
        let row = &x[s * d..(s + 1) * d];
        if s < memory {
            total -= 0.5 * (d as f64 * LN_2PI + row.iter().map(|v| v * v).sum::<f64>());
            continue;
        }
        let lags: Vec<&[f64]> = (1..=memory)
            .map(|m| &x[(s - m) * d..(s - m + 1) * d])
            .collect();
        ar.predict_into(&lags, &mut pred);
        let v: Vec<f64> = row.iter().zip(&pred).map(|(a, b)| a - b).collect();
        total -= res.phase((start_phase + s) % res.period()).nll(&v);
    }
    Ok(total)
}

/// Draws a latent path of `len` steps by running the AR filter forward on
/// whitened noise; exact sampling from the window law in `O(len)`.
pub fn simulate_recursive(
    ar: &ArCoefficients,
    res: &ResidualGaussian,
    start_phase: usize,
    len: usize,
    rng: &mut impl rand::Rng,
) -> Vec<f64> {
    let d = ar.dim();
    let memory = ar.memory();
    let mut x = vec![0.0; len * d];
    let mut pred = vec![0.0; d];
    for s in 0..len {
        let z: Vec<f64> = (0..d)
            .map(|_| Distribution::<f64>::sample(&StandardNormal, rng))
            .collect();
        if s < memory {
            x[s * d..(s + 1) * d].copy_from_slice(&z);
            continue;
        }
        let v = res.phase((start_phase + s) % res.period()).unwhiten(&z);
        let (past, current) = x.split_at_mut(s * d);
        let lags: Vec<&[f64]> = (1..=memory)
            .map(|m| &past[(s - m) * d..(s - m + 1) * d])
            .collect();
        ar.predict_into(&lags, &mut pred);
        for i in 0..d {
            current[i] = pred[i] + v[i];
        }
    }
    x
}
