//! Bordered Newton continuation of the nontrivial V-state branch bifurcating
//! at `(Q_m, 0)`, with out-of-sample steadiness certification.
//!
//! The solver works in the unknowns `(a₂, …, a_{N+1}, Q)` with the amplitude
//! pinned by the linear constraint `a_{m+1} = ε`; ε is a solver coordinate,
//! not arclength. The first predictor steps along the kernel direction `v_m`
//! frozen at `Q_m`; afterwards secant extrapolation of the two previous
//! points takes over, which makes the frozen choice irrelevant.

use crate::boundary::{BoundaryMap, EllipseParam, PerturbationCoeffs};
use crate::functional::{eval_f_detailed, imag_sup, ResidualSpectrum};
use crate::linop::jacobian_with_parameter_column;
use crate::spectrum::{find_qm, kernel_vector};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Residual tail energy above this triggers an automatic mode increase
/// instead of silent truncation.
pub const TAIL_LIMIT: f64 = 1e-8;

/// A certified point must re-verify on the refined grid below this multiple
/// of the Newton tolerance.
pub const VERIFY_FACTOR: f64 = 10.0;

/// Consecutive points whose distance-per-ε exceeds this multiple of the
/// running estimate abort the trace as a discontinuity.
const DISCONTINUITY_FACTOR: f64 = 10.0;

/// Fold indices above this are refused unless the override flag is set: the
/// coercivity radius `(1−Q_m)/2` shrinks like `1/m`.
const MAX_DEFAULT_FOLD: u32 = 64;

/// Configuration of one branch trace.
#[derive(Debug, Clone)]
pub struct BranchConfig {
    /// Fold index of the bifurcation point, `m ≥ 3`.
    pub m: u32,
    /// Coefficient modes carried by the solver (powers `2..=n_modes+1`).
    pub n_modes: usize,
    /// Collocation/quadrature grid size; must satisfy `m_grid ≥ 4·n_modes`.
    pub m_grid: usize,
    /// Largest amplitude to reach.
    pub eps_max: f64,
    /// Amplitude increment between solved points.
    pub eps_step: f64,
    /// Convergence threshold on both the spectrum and pointwise residual.
    pub newton_tol: f64,
    pub newton_max_iters: usize,
    /// Refinement factor of the verification grid; even and at least 4, so
    /// refined targets never coincide with solver collocation points.
    pub verify_refine: usize,
    /// Coercivity margin required of every Newton iterate.
    pub coercivity_margin: f64,
    /// Permits fold indices above 64.
    pub allow_large_m: bool,
}

impl BranchConfig {
    pub fn new(m: u32) -> Self {
        Self {
            m,
            n_modes: 128,
            m_grid: 512,
            eps_max: 0.04,
            eps_step: 0.005,
            newton_tol: 1e-10,
            newton_max_iters: 25,
            verify_refine: 4,
            coercivity_margin: crate::boundary::DEFAULT_COERCIVITY_MARGIN,
            allow_large_m: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 3 {
            return Err(Error::InvalidParameter(format!(
                "fold index must be at least 3, got {}",
                self.m
            )));
        }
        if self.m > MAX_DEFAULT_FOLD && !self.allow_large_m {
            return Err(Error::InvalidParameter(format!(
                "fold index {} exceeds {MAX_DEFAULT_FOLD}; the coercivity radius shrinks \
                 like 1/m — set allow_large_m to override",
                self.m
            )));
        }
        if self.n_modes < self.m as usize {
            return Err(Error::InvalidParameter(format!(
                "n_modes = {} cannot pin the a_{} amplitude",
                self.n_modes,
                self.m + 1
            )));
        }
        if !self.m_grid.is_power_of_two() || self.m_grid < 4 * self.n_modes {
            return Err(Error::InvalidParameter(format!(
                "grid {} must be a power of two with m_grid ≥ 4·n_modes = {}",
                self.m_grid,
                4 * self.n_modes
            )));
        }
        if !(self.eps_step > 0.0) || !(self.eps_max > 0.0) {
            return Err(Error::InvalidParameter(
                "eps_step and eps_max must be positive".into(),
            ));
        }
        if self.verify_refine < 4 || self.verify_refine % 2 != 0 {
            return Err(Error::InvalidParameter(format!(
                "verify_refine must be even and at least 4, got {}",
                self.verify_refine
            )));
        }
        if !(self.newton_tol > 0.0) {
            return Err(Error::InvalidParameter("newton_tol must be positive".into()));
        }
        Ok(())
    }
}

/// One converged continuation step.
#[derive(Debug, Clone)]
pub struct BranchPoint {
    /// Pinned amplitude: the coefficient of `w^{m+1}` equals this exactly.
    pub eps: f64,
    pub q: f64,
    pub coeffs: PerturbationCoeffs,
    /// `sup |Im G|` over the solver's collocation targets.
    pub residual_inf: f64,
    pub newton_iters: usize,
    /// `sup|f′| / ((1−Q)/2)`: below `1 − margin` the point sits in the
    /// provable coercivity regime; above it accuracy rests on the measured
    /// injectivity of the sampled map plus the refined-grid certificate.
    pub guard_ratio: f64,
}

/// A branch point together with its out-of-sample steadiness certificate.
#[derive(Debug, Clone)]
pub struct CertifiedPoint {
    pub point: BranchPoint,
    /// `sup |Im G|` on the `verify_refine`× finer disjoint grid.
    pub verify_sup: f64,
}

/// Result of a branch trace. `truncated` marks branches that stopped short of
/// `eps_max`; `diagnostics` records why.
#[derive(Debug, Clone)]
pub struct BranchTrace {
    pub m: u32,
    pub q_m: f64,
    pub points: Vec<CertifiedPoint>,
    pub truncated: bool,
    pub diagnostics: Vec<String>,
    /// Estimated branch-continuity constant: max over steps of
    /// `dist((Q, a), (Q′, a′)) / Δε`.
    pub continuity_factor: f64,
    /// Modes actually carried at the end (grows if the tail limit trips).
    pub final_n_modes: usize,
    pub final_m_grid: usize,
}

/// The trivial branch point at the bifurcation: `ε = 0`, `Q = Q_m`, `f = 0`.
pub fn initial_point(m: u32, cfg: &BranchConfig) -> Result<BranchPoint> {
    cfg.validate()?;
    let q_m = find_qm(m)?.q_m;
    let coeffs = PerturbationCoeffs::zeros(cfg.n_modes);
    let b = BoundaryMap::new(EllipseParam::new(q_m)?, coeffs.clone());
    let (_, samples) = eval_f_detailed(&b, cfg.m_grid)?;
    Ok(BranchPoint {
        eps: 0.0,
        q: q_m,
        coeffs,
        residual_inf: imag_sup(&samples),
        newton_iters: 0,
        guard_ratio: 0.0,
    })
}

struct CorrectionOutcome {
    point: BranchPoint,
    spectrum: ResidualSpectrum,
}

fn correct(
    m: u32,
    eps: f64,
    q_guess: f64,
    coeffs_guess: &PerturbationCoeffs,
    cfg: &BranchConfig,
    n_modes: usize,
    m_grid: usize,
) -> Result<CorrectionOutcome> {
    let pin_power = m as usize + 1;
    let n = n_modes;
    let mut q = q_guess;
    let mut coeffs = coeffs_guess.resized(n);
    coeffs.set_coeff(pin_power, eps);

    let mut last_residual = f64::INFINITY;
    for iter in 0..=cfg.newton_max_iters {
        let ellipse = EllipseParam::new(q).map_err(|_| Error::NoConvergence {
            iters: iter,
            residual: last_residual,
        })?;
        let b = BoundaryMap::new(ellipse, coeffs.clone());
        let (spectrum, samples) = eval_f_detailed(&b, m_grid)?;
        let res_inf = imag_sup(&samples);
        last_residual = spectrum.sup_norm();
        if last_residual < cfg.newton_tol {
            let guard_ratio = b.coercivity_guard(cfg.coercivity_margin).ratio;
            return Ok(CorrectionOutcome {
                point: BranchPoint {
                    eps,
                    q,
                    coeffs,
                    residual_inf: res_inf,
                    newton_iters: iter,
                    guard_ratio,
                },
                spectrum,
            });
        }
        if iter == cfg.newton_max_iters {
            break;
        }

        let (jac, q_col) = jacobian_with_parameter_column(&b, m_grid)?;
        // bordered system: N residual rows plus the amplitude pinning row
        let mut big = DMatrix::<f64>::zeros(n + 1, n + 1);
        big.view_mut((0, 0), (n, n)).copy_from(jac.matrix());
        for row in 0..n {
            big[(row, n)] = q_col[row];
        }
        big[(n, pin_power - 2)] = 1.0;
        let mut rhs = DVector::<f64>::zeros(n + 1);
        for row in 0..n {
            rhs[row] = -spectrum.as_slice()[row];
        }
        // pinning residual is identically zero: the constraint is re-imposed
        // exactly after every update
        let delta = big.lu().solve(&rhs).ok_or_else(|| {
            Error::SingularSystem(format!(
                "bordered Newton matrix at eps = {eps:.4e}, Q = {q:.6}"
            ))
        })?;
        for p in 2..=n + 1 {
            coeffs.set_coeff(p, coeffs.coeff(p) + delta[p - 2]);
        }
        coeffs.set_coeff(pin_power, eps);
        q += delta[n];
    }
    Err(Error::NoConvergence {
        iters: cfg.newton_max_iters,
        residual: last_residual,
    })
}

/// Newton-corrects one amplitude slice: solves the square bordered system in
/// `(a₂ … a_{N+1}, Q)` with the pinning row `a_{m+1} = ε`.
///
/// Errors advise a smaller `eps_step` when the guard is violated and carry
/// the last residual on non-convergence.
pub fn newton_correct(
    m: u32,
    eps: f64,
    q_guess: f64,
    coeffs_guess: &PerturbationCoeffs,
    cfg: &BranchConfig,
) -> Result<BranchPoint> {
    cfg.validate()?;
    Ok(correct(m, eps, q_guess, coeffs_guess, cfg, cfg.n_modes, cfg.m_grid)?.point)
}

/// Re-evaluates `Im G` for a converged point on a `refine`× finer grid with
/// `refine`× more quadrature nodes, at targets disjoint from the solver's
/// collocation points; returns the sup-norm.
pub fn verify_vstate(point: &BranchPoint, m_grid: usize, refine: usize) -> Result<f64> {
    if refine < 4 || refine % 2 != 0 {
        return Err(Error::InvalidParameter(format!(
            "refine must be even and at least 4, got {refine}"
        )));
    }
    let b = BoundaryMap::new(EllipseParam::new(point.q)?, point.coeffs.clone());
    let (_, samples) = eval_f_detailed(&b, refine * m_grid)?;
    Ok(imag_sup(&samples))
}

fn point_distance(a: &BranchPoint, b: &BranchPoint) -> f64 {
    let mut acc = (a.q - b.q) * (a.q - b.q);
    let n = a.coeffs.n_modes().max(b.coeffs.n_modes());
    for p in 2..=n + 1 {
        let d = a.coeffs.coeff(p) - b.coeffs.coeff(p);
        acc += d * d;
    }
    acc.sqrt()
}

/// Traces the branch from `(Q_m, 0)` to `eps_max` in steps of `eps_step`,
/// certifying every emitted point.
///
/// Failures halve the step (at most 5 times); a residual tail above
/// [`TAIL_LIMIT`] grows the mode count instead of truncating silently. If the
/// step underflows, the partial branch is returned with `truncated = true`
/// and diagnostics.
pub fn trace_branch(cfg: &BranchConfig) -> Result<BranchTrace> {
    cfg.validate()?;
    let m = cfg.m;
    let q_m = find_qm(m)?.q_m;
    let mut n_modes = cfg.n_modes;
    let mut m_grid = cfg.m_grid;
    let mut diagnostics = Vec::new();

    let first = initial_point(m, cfg)?;
    let verify0 = verify_vstate(&first, m_grid, cfg.verify_refine)?;
    let kernel = kernel_vector(m, q_m, n_modes)?;
    let kernel_scale = kernel.norm().max(1.0);
    let mut points = vec![CertifiedPoint {
        point: first,
        verify_sup: verify0,
    }];

    let mut eps_step = cfg.eps_step;
    let mut halvings = 0usize;
    let mut grows = 0usize;
    let mut truncated = false;
    let mut continuity = 0.0f64;
    let mut noted_guard = false;

    'outer: while points.last().unwrap().point.eps < cfg.eps_max - 1e-14 {
        let eps_prev = points.last().unwrap().point.eps;
        let eps_next = (eps_prev + eps_step).min(cfg.eps_max);

        let (q_guess, coeffs_guess) = if points.len() >= 2 {
            let p1 = &points[points.len() - 2].point;
            let p2 = &points[points.len() - 1].point;
            let span = p2.eps - p1.eps;
            let t = if span.abs() > 1e-300 {
                (eps_next - p2.eps) / span
            } else {
                0.0
            };
            let mut guess = PerturbationCoeffs::zeros(n_modes);
            for p in 2..=n_modes + 1 {
                guess.set_coeff(
                    p,
                    p2.coeffs.coeff(p) + t * (p2.coeffs.coeff(p) - p1.coeffs.coeff(p)),
                );
            }
            (p2.q + t * (p2.q - p1.q), guess)
        } else {
            (q_m, kernel.scaled(eps_next))
        };

        match correct(m, eps_next, q_guess, &coeffs_guess, cfg, n_modes, m_grid) {
            Ok(outcome) => {
                // Adaptive modes: a fat tail or a failed refined-grid
                // certificate both mean the truncation is biting, so raise
                // the resolution and re-solve the same amplitude.
                let mut grow_reason = None;
                if outcome.spectrum.tail_norm() > TAIL_LIMIT {
                    grow_reason = Some(format!(
                        "tail {:.3e} above {TAIL_LIMIT:.1e}",
                        outcome.spectrum.tail_norm()
                    ));
                }
                let verify_sup = if grow_reason.is_none() {
                    let v = verify_vstate(&outcome.point, m_grid, cfg.verify_refine)?;
                    if v > VERIFY_FACTOR * cfg.newton_tol {
                        grow_reason = Some(format!(
                            "certificate {v:.3e} above {:.3e}",
                            VERIFY_FACTOR * cfg.newton_tol
                        ));
                    }
                    v
                } else {
                    f64::NAN
                };
                if let Some(reason) = grow_reason {
                    grows += 1;
                    if grows > 3 {
                        diagnostics.push(format!(
                            "{reason} at eps = {eps_next:.4e} after 3 resolution increases"
                        ));
                        truncated = true;
                        break 'outer;
                    }
                    n_modes = (3 * n_modes).div_ceil(2);
                    while m_grid < 4 * n_modes {
                        m_grid *= 2;
                    }
                    diagnostics.push(format!(
                        "{reason} at eps = {eps_next:.4e}: raised modes to {n_modes}, \
                         grid to {m_grid}"
                    ));
                    continue;
                }
                let dist = point_distance(&outcome.point, &points.last().unwrap().point);
                let ratio = dist / (eps_next - eps_prev);
                let reference = continuity.max(kernel_scale);
                if ratio > DISCONTINUITY_FACTOR * reference {
                    diagnostics.push(format!(
                        "discontinuity at eps = {eps_next:.4e}: step ratio {ratio:.3e} \
                         exceeds {:.3e}",
                        DISCONTINUITY_FACTOR * reference
                    ));
                    truncated = true;
                    break 'outer;
                }
                continuity = continuity.max(ratio);
                if !noted_guard && outcome.point.guard_ratio > 1.0 - cfg.coercivity_margin {
                    diagnostics.push(format!(
                        "left the provable coercivity regime at eps = {eps_next:.4e} \
                         (guard ratio {:.3}); accuracy rests on sampled injectivity \
                         and the refined-grid certificates",
                        outcome.point.guard_ratio
                    ));
                    noted_guard = true;
                }
                points.push(CertifiedPoint {
                    point: outcome.point,
                    verify_sup,
                });
            }
            Err(err) => {
                halvings += 1;
                diagnostics.push(format!(
                    "correction failed at eps = {eps_next:.4e} ({err}); halving step"
                ));
                eps_step *= 0.5;
                if halvings > 5 || eps_step < 1e-12 {
                    diagnostics.push(format!(
                        "step underflow after {halvings} halvings at eps = {eps_next:.4e}"
                    ));
                    truncated = true;
                    break 'outer;
                }
            }
        }
    }

    Ok(BranchTrace {
        m,
        q_m,
        points,
        truncated,
        diagnostics,
        continuity_factor: continuity,
        final_n_modes: n_modes,
        final_m_grid: m_grid,
    })
}
