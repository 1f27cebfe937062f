//! Linearizations of the residual `F`: the closed-form Fourier operator at
//! `f = 0`, the assembled integral-formula Jacobian at general `f`, and their
//! Q-derivatives.
//!
//! At the trivial branch the linearization acts mode-by-mode:
//! row 1 couples only `a₂` with weight `−(1+Q)²/2`, row 2 only `a₃` with
//! `−2Q²`, and row `n ≥ 3` carries `λ_n(Q) = (1−Q²)n/2 − 1 − Qⁿ` on column
//! `n+1` and `−Q λ_n(Q)` on column `n−1`. Away from `f = 0` the Jacobian is
//! assembled column-by-column from the three bounded pair kernels of the
//! Gâteaux derivative; the two routes agree to quadrature accuracy, which the
//! test suite and the `linop-check` command enforce.

use crate::boundary::{BoundaryMap, GridSamples, PerturbationCoeffs};
use crate::functional::{project_residual, SampledMap};
use crate::quadrature::{bounded_kernel_integral, KernelMatrix};
use crate::{Error, Result};
use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

/// Slack factor on analytic kernel bounds, covering the gap between the grid
/// supremum and the true supremum of the constituent derivatives.
const KERNEL_BOUND_SAFETY: f64 = 2.0;

/// `λ_n(Q) = (1−Q²)n/2 − 1 − Qⁿ`, the dispersion weight of row `n ≥ 3`.
pub fn lambda_n(q: f64, n: usize) -> f64 {
    (1.0 - q * q) * n as f64 / 2.0 - 1.0 - q.powi(n as i32)
}

/// `dλ_n/dQ = −n(Q + Q^{n−1})`.
pub fn dlambda_n(q: f64, n: usize) -> f64 {
    -(n as f64) * (q + q.powi(n as i32 - 1))
}

/// Dense real matrix of a linearization: rows are sine modes `n = 1..=N`,
/// columns are perturbation powers `p = 2..=N+1`.
#[derive(Debug, Clone)]
pub struct LinearOperatorMatrix {
    entries: DMatrix<f64>,
    q: f64,
    f_norm: f64,
}

impl LinearOperatorMatrix {
    fn new(entries: DMatrix<f64>, q: f64, f_norm: f64) -> Self {
        Self { entries, q, f_norm }
    }

    #[inline]
    pub fn n_modes(&self) -> usize {
        self.entries.nrows()
    }

    /// Aspect parameter the matrix was built at.
    #[inline]
    pub fn q(&self) -> f64 {
        self.q
    }

    /// Coefficient norm of the base point.
    #[inline]
    pub fn f_norm(&self) -> f64 {
        self.f_norm
    }

    /// Entry for sine mode `n` (1-based) against power `p` (from 2).
    #[inline]
    pub fn entry(&self, n: usize, p: usize) -> f64 {
        self.entries[(n - 1, p - 2)]
    }

    #[inline]
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    /// Applies the operator to a coefficient vector.
    pub fn apply(&self, pert: &PerturbationCoeffs) -> Vec<f64> {
        let n = self.n_modes();
        let mut out = vec![0.0; n];
        for (row, item) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for col in 0..n {
                acc += self.entries[(row, col)] * pert.coeff(col + 2);
            }
            *item = acc;
        }
        out
    }

    /// Largest entrywise difference.
    pub fn sup_diff(&self, other: &Self) -> f64 {
        let mut d = 0.0f64;
        for i in 0..self.entries.nrows() {
            for j in 0..self.entries.ncols() {
                d = d.max((self.entries[(i, j)] - other.entries[(i, j)]).abs());
            }
        }
        d
    }
}

fn require_modes(n_modes: usize) -> Result<()> {
    if n_modes < 3 {
        return Err(Error::InvalidParameter(format!(
            "operator needs at least 3 modes, got {n_modes}"
        )));
    }
    Ok(())
}

/// Closed-form linearization at `f = 0`.
///
/// The matrix is banded: row 1 couples column 2 alone, row 2 column 3 alone,
/// and row `n ≥ 3` columns `n±1`.
pub fn closed_form_lq(q: f64, n_modes: usize) -> Result<LinearOperatorMatrix> {
    require_modes(n_modes)?;
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "Q must be in (0,1), got {q}"
        )));
    }
    let mut m = DMatrix::zeros(n_modes, n_modes);
    m[(0, 0)] = -0.5 * (1.0 + q) * (1.0 + q);
    m[(1, 1)] = -2.0 * q * q;
    for n in 3..=n_modes {
        let lam = lambda_n(q, n);
        m[(n - 1, (n + 1) - 2)] = lam;
        m[(n - 1, (n - 1) - 2)] = -q * lam;
    }
    Ok(LinearOperatorMatrix::new(m, q, 0.0))
}

/// Entrywise `d/dQ` of [`closed_form_lq`].
pub fn dq_of_lq_closed(q: f64, n_modes: usize) -> Result<LinearOperatorMatrix> {
    require_modes(n_modes)?;
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "Q must be in (0,1), got {q}"
        )));
    }
    let mut m = DMatrix::zeros(n_modes, n_modes);
    m[(0, 0)] = -(1.0 + q);
    m[(1, 1)] = -4.0 * q;
    for n in 3..=n_modes {
        let lam = lambda_n(q, n);
        let dlam = dlambda_n(q, n);
        m[(n - 1, (n + 1) - 2)] = dlam;
        m[(n - 1, (n - 1) - 2)] = -lam - q * dlam;
    }
    Ok(LinearOperatorMatrix::new(m, q, 0.0))
}

/// Samples of one perturbation direction `h` on the node and target grids.
struct DirectionSamples {
    h_nodes: Vec<Complex64>,
    hbar_nodes: Vec<Complex64>,
    dh_nodes: Vec<Complex64>,
    h_targets: Vec<Complex64>,
    hbar_targets: Vec<Complex64>,
    dh_targets: Vec<Complex64>,
    /// Grid supremum of `|h′|`, used for kernel bound certificates.
    dh_sup: f64,
}

impl DirectionSamples {
    fn eval(h: &PerturbationCoeffs, nodes: &[Complex64], targets: &[Complex64]) -> Self {
        let eval_h = |w: Complex64| {
            let mut acc = Complex64::new(0.0, 0.0);
            for k in (0..h.n_modes()).rev() {
                acc = (acc + h.as_slice()[k]) * w;
            }
            acc * w
        };
        let eval_dh = |w: Complex64| {
            let mut acc = Complex64::new(0.0, 0.0);
            for k in (0..h.n_modes()).rev() {
                acc = acc * w + (k + 2) as f64 * h.as_slice()[k];
            }
            acc * w
        };
        let h_nodes: Vec<Complex64> = nodes.iter().map(|&x| eval_h(x)).collect();
        let hbar_nodes = h_nodes.iter().map(|v| v.conj()).collect();
        let dh_nodes: Vec<Complex64> = nodes.iter().map(|&x| eval_dh(x)).collect();
        let h_targets: Vec<Complex64> = targets.iter().map(|&x| eval_h(x)).collect();
        let hbar_targets = h_targets.iter().map(|v| v.conj()).collect();
        let dh_targets = targets.iter().map(|&x| eval_dh(x)).collect();
        let dh_sup = dh_nodes.iter().map(|v| v.norm()).fold(0.0, f64::max);
        Self {
            h_nodes,
            hbar_nodes,
            dh_nodes,
            h_targets,
            hbar_targets,
            dh_targets,
            dh_sup,
        }
    }

    fn basis(power: usize, n_modes: usize, nodes: &[Complex64], targets: &[Complex64]) -> Self {
        let mut h = PerturbationCoeffs::zeros(n_modes);
        h.set_coeff(power, 1.0);
        Self::eval(&h, nodes, targets)
    }
}

/// Shared state for assembling derivative columns at a fixed base point.
struct Assembly {
    sampled: SampledMap,
    q: f64,
    /// `1/(Φ(ξ_j) − Φ(w_i))`, row-major over (target, node).
    inv: Vec<Complex64>,
    /// Pair kernel `K₁`, certified with bound 1.
    k1: KernelMatrix,
    /// Raw `K₁` entries for composing derived kernels.
    k1_data: Vec<Complex64>,
    /// `G₂` at each target.
    g2: Vec<Complex64>,
    /// Density `Φ′` on the nodes.
    dphi_density: GridSamples,
    /// Density `ξ̄²` on the nodes (the Q-derivative of `Φ′`, negated).
    xibar2_density: GridSamples,
    node_points: Vec<Complex64>,
    target_points: Vec<Complex64>,
    /// Measured bi-Lipschitz constant: `|ΔΦ| ≥ κ |ξ−w|` over the sampled
    /// pairs (the kernel bound certificates are exact for the sample set).
    kappa: f64,
}

impl Assembly {
    fn prepare(b: &BoundaryMap, m_grid: usize) -> Result<Self> {
        let n = b.n_modes();
        if m_grid < 4 * n {
            return Err(Error::GridTooSmall(format!(
                "assembly with {n} modes needs M ≥ {}, got {m_grid}",
                4 * n
            )));
        }
        let sampled = SampledMap::from_boundary(b, m_grid)?;
        let node_points = sampled.rule.nodes().to_vec();
        let target_points = sampled.targets.nodes();
        let mt = target_points.len();
        let m = node_points.len();

        let mut inv = Vec::with_capacity(mt * m);
        let mut k1_data = Vec::with_capacity(mt * m);
        let mut kappa = f64::INFINITY;
        for i in 0..mt {
            let phi_w = sampled.phi_targets[i];
            let phi_wbar = phi_w.conj();
            let w = target_points[i];
            for (j, &xj) in node_points.iter().enumerate() {
                let d = sampled.phi_nodes[j] - phi_w;
                kappa = kappa.min(d.norm() / (xj - w).norm());
                let inv_ij = 1.0 / d;
                inv.push(inv_ij);
                k1_data.push((sampled.phi_nodes_conj[j] - phi_wbar) * inv_ij);
            }
        }
        let floor = crate::functional::PAIR_RATIO_FLOOR * (1.0 - b.q());
        if !(kappa > floor) {
            return Err(Error::InjectivityLoss { kappa, floor });
        }
        let k1 = KernelMatrix::new(mt, m, k1_data.clone(), 1.0 + 1e-9)?;
        let g2 = sampled.pair_integral();
        let dphi_density = GridSamples::new(sampled.rule.spec(), sampled.dphi_nodes.clone())?;
        let xibar2_density = GridSamples::new(
            sampled.rule.spec(),
            node_points.iter().map(|x| x.conj() * x.conj()).collect(),
        )?;
        Ok(Self {
            q: b.q(),
            inv,
            k1,
            k1_data,
            g2,
            dphi_density,
            xibar2_density,
            node_points,
            target_points,
            kappa,
            sampled,
        })
    }

    #[inline]
    fn mt(&self) -> usize {
        self.target_points.len()
    }

    #[inline]
    fn m(&self) -> usize {
        self.node_points.len()
    }

    fn integrate(&self, kernel: &KernelMatrix, density: &GridSamples) -> Result<Vec<Complex64>> {
        Ok(
            bounded_kernel_integral(kernel, &self.sampled.rule, &self.sampled.targets, density)?
                .into_values(),
        )
    }

    /// Derivative samples `∂_f G(Q,f)[h]` at the targets.
    fn derivative_samples(&self, dir: &DirectionSamples) -> Result<Vec<Complex64>> {
        let (mt, m) = (self.mt(), self.m());
        let pair_bound = (KERNEL_BOUND_SAFETY * dir.dh_sup / self.kappa).max(f64::MIN_POSITIVE);

        let mut k2_data = Vec::with_capacity(mt * m);
        let mut k3_data = Vec::with_capacity(mt * m);
        for i in 0..mt {
            let hbar_w = dir.hbar_targets[i];
            let h_w = dir.h_targets[i];
            let row = i * m;
            for j in 0..m {
                let inv_ij = self.inv[row + j];
                k2_data.push((dir.hbar_nodes[j] - hbar_w) * inv_ij);
                k3_data.push(-self.k1_data[row + j] * (dir.h_nodes[j] - h_w) * inv_ij);
            }
        }
        let k2 = KernelMatrix::new(mt, m, k2_data, pair_bound)?;
        let k3 = KernelMatrix::new(mt, m, k3_data, pair_bound)?;

        let density_h = GridSamples::new(self.sampled.rule.spec(), dir.dh_nodes.clone())?;
        let i1 = self.integrate(&self.k1, &density_h)?;
        let i2 = self.integrate(&k2, &self.dphi_density)?;
        let i3 = self.integrate(&k3, &self.dphi_density)?;

        let half_one_minus_q2 = 0.5 * (1.0 - self.q * self.q);
        let mut out = Vec::with_capacity(mt);
        for i in 0..mt {
            let w = self.target_points[i];
            let dphi_w = self.sampled.dphi_targets[i];
            let phi_wbar = self.sampled.phi_targets[i].conj();
            let dg1 = half_one_minus_q2
                * (w * dir.hbar_targets[i] * dphi_w + w * phi_wbar * dir.dh_targets[i]);
            out.push(dg1 + w * dir.dh_targets[i] * self.g2[i] + w * dphi_w * (i1[i] + i2[i] + i3[i]));
        }
        Ok(out)
    }

    /// Mixed-derivative samples `∂_Q ∂_f G(Q,f)[h]` at the targets,
    /// including the chain-rule term from the slaved `Ω(Q) = (1−Q²)/4`.
    fn dq_derivative_samples(&self, dir: &DirectionSamples) -> Result<Vec<Complex64>> {
        let (mt, m) = (self.mt(), self.m());
        let pair_bound = (KERNEL_BOUND_SAFETY * dir.dh_sup / self.kappa).max(f64::MIN_POSITIVE);
        let geom_bound = KERNEL_BOUND_SAFETY / self.kappa;
        let pair_bound2 =
            (KERNEL_BOUND_SAFETY * dir.dh_sup / (self.kappa * self.kappa)).max(f64::MIN_POSITIVE);

        // Direction-independent Q-derivative kernels.
        let mut kxw_data = Vec::with_capacity(mt * m);
        let mut kbar_data = Vec::with_capacity(mt * m);
        // Direction kernels.
        let mut k2_data = Vec::with_capacity(mt * m);
        let mut k3_data = Vec::with_capacity(mt * m);
        let mut k2bar_data = Vec::with_capacity(mt * m);
        let mut kxwh_data = Vec::with_capacity(mt * m);
        let mut k3bar_data = Vec::with_capacity(mt * m);
        for i in 0..mt {
            let w = self.target_points[i];
            let wbar = w.conj();
            let hbar_w = dir.hbar_targets[i];
            let h_w = dir.h_targets[i];
            let row = i * m;
            for j in 0..m {
                let xi = self.node_points[j];
                let inv_ij = self.inv[row + j];
                let diff = (xi - w) * inv_ij;
                let bardiff = (xi.conj() - wbar) * inv_ij;
                let k1_ij = self.k1_data[row + j];
                let k2_ij = (dir.hbar_nodes[j] - hbar_w) * inv_ij;
                let k3_ij = -k1_ij * (dir.h_nodes[j] - h_w) * inv_ij;
                kxw_data.push(diff);
                kbar_data.push(k1_ij * bardiff);
                k2_data.push(k2_ij);
                k3_data.push(k3_ij);
                k2bar_data.push(k2_ij * bardiff);
                kxwh_data.push((dir.h_nodes[j] - h_w) * inv_ij * diff);
                k3bar_data.push(k3_ij * bardiff);
            }
        }
        let kxw = KernelMatrix::new(mt, m, kxw_data, geom_bound)?;
        let kbar = KernelMatrix::new(mt, m, kbar_data, geom_bound)?;
        let k2 = KernelMatrix::new(mt, m, k2_data, pair_bound)?;
        let k3 = KernelMatrix::new(mt, m, k3_data, pair_bound)?;
        let k2bar = KernelMatrix::new(mt, m, k2bar_data, pair_bound2)?;
        let kxwh = KernelMatrix::new(mt, m, kxwh_data, pair_bound2)?;
        let k3bar = KernelMatrix::new(mt, m, k3bar_data, pair_bound2)?;

        let density_h = GridSamples::new(self.sampled.rule.spec(), dir.dh_nodes.clone())?;

        // ∂_Q G₂ = ⨍ (ξ−w)/ΔΦ Φ′ − ⨍ K₁ ξ̄² − ⨍ K₁(ξ̄−w̄)/ΔΦ Φ′
        let t1 = self.integrate(&kxw, &self.dphi_density)?;
        let t2 = self.integrate(&self.k1, &self.xibar2_density)?;
        let t3 = self.integrate(&kbar, &self.dphi_density)?;
        let dq_g2: Vec<Complex64> = (0..mt).map(|i| t1[i] - t2[i] - t3[i]).collect();

        // ∂_Q I₁ = ⨍ (ξ−w)/ΔΦ h′ − ⨍ K₁(ξ̄−w̄)/ΔΦ h′
        let a1 = self.integrate(&kxw, &density_h)?;
        let a2 = self.integrate(&kbar, &density_h)?;

        // ∂_Q I₂ = −⨍ K₂ ξ̄² − ⨍ K₂(ξ̄−w̄)/ΔΦ Φ′
        let b1 = self.integrate(&k2, &self.xibar2_density)?;
        let b2 = self.integrate(&k2bar, &self.dphi_density)?;

        // ∂_Q I₃ = −⨍ K₃ ξ̄² − ⨍ (ξ−w)Δh/ΔΦ² Φ′ − 2⨍ K₃(ξ̄−w̄)/ΔΦ Φ′
        let c1 = self.integrate(&k3, &self.xibar2_density)?;
        let c2 = self.integrate(&kxwh, &self.dphi_density)?;
        let c3 = self.integrate(&k3bar, &self.dphi_density)?;

        // I_j themselves, for the ∂_Q(wΦ′) product term.
        let i1 = self.integrate(&self.k1, &density_h)?;
        let i2 = self.integrate(&k2, &self.dphi_density)?;
        let i3 = self.integrate(&k3, &self.dphi_density)?;

        let q = self.q;
        let half_one_minus_q2 = 0.5 * (1.0 - q * q);
        let mut out = Vec::with_capacity(mt);
        for i in 0..mt {
            let w = self.target_points[i];
            let wbar = w.conj();
            let dphi_w = self.sampled.dphi_targets[i];
            let phi_wbar = self.sampled.phi_targets[i].conj();
            let dq_i1 = a1[i] - a2[i];
            let dq_i2 = -b1[i] - b2[i];
            let dq_i3 = -c1[i] - c2[i] - 2.0 * c3[i];
            let sum_i = i1[i] + i2[i] + i3[i];
            // chain rule through Ω(Q) plus the explicit Q-dependence of G₁
            let dq_dg1 = -q * (w * dir.hbar_targets[i] * dphi_w + w * phi_wbar * dir.dh_targets[i])
                + half_one_minus_q2 * (-wbar * dir.hbar_targets[i] + w * w * dir.dh_targets[i]);
            out.push(
                dq_dg1 + w * dir.dh_targets[i] * dq_g2[i] - wbar * sum_i
                    + w * dphi_w * (dq_i1 + dq_i2 + dq_i3),
            );
        }
        Ok(out)
    }

    fn project(&self, samples: Vec<Complex64>, n_modes: usize) -> Result<Vec<f64>> {
        let grid = GridSamples::new(self.sampled.targets, samples)?;
        Ok(project_residual(&grid, n_modes)?.as_slice().to_vec())
    }
}

fn assemble_columns(b: &BoundaryMap, m_grid: usize, dq: bool) -> Result<LinearOperatorMatrix> {
    let n = b.n_modes();
    require_modes(n)?;
    let assembly = Assembly::prepare(b, m_grid)?;
    let columns: Vec<Result<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|col| {
            let dir = DirectionSamples::basis(
                col + 2,
                n,
                &assembly.node_points,
                &assembly.target_points,
            );
            let samples = if dq {
                assembly.dq_derivative_samples(&dir)?
            } else {
                assembly.derivative_samples(&dir)?
            };
            assembly.project(samples, n)
        })
        .collect();
    let mut entries = DMatrix::zeros(n, n);
    for (col, column) in columns.into_iter().enumerate() {
        let column = column?;
        for (row, v) in column.into_iter().enumerate() {
            entries[(row, col)] = v;
        }
    }
    Ok(LinearOperatorMatrix::new(entries, b.q(), b.pert().norm()))
}

/// Assembles `∂_f F(Q, f)` column-by-column over basis directions `wⁿ`,
/// each column through the three bounded pair-kernel integrals.
///
/// At `f = 0` this matches [`closed_form_lq`] entrywise to quadrature
/// accuracy.
pub fn assemble_jacobian(b: &BoundaryMap, m_grid: usize) -> Result<LinearOperatorMatrix> {
    assemble_columns(b, m_grid, false)
}

/// Assembles the mixed derivative `∂_Q ∂_f F(Q, f)` from the displayed
/// Q-derivative kernels plus the explicit polynomial parts.
///
/// At `f = 0` this matches [`dq_of_lq_closed`].
pub fn dq_jacobian_integral(b: &BoundaryMap, m_grid: usize) -> Result<LinearOperatorMatrix> {
    assemble_columns(b, m_grid, true)
}

/// Directional derivative `∂_f F(Q,f)[h]` as a residual coefficient vector.
pub fn derivative_in_direction(
    b: &BoundaryMap,
    m_grid: usize,
    h: &PerturbationCoeffs,
) -> Result<Vec<f64>> {
    let assembly = Assembly::prepare(b, m_grid)?;
    let dir = DirectionSamples::eval(h, &assembly.node_points, &assembly.target_points);
    let samples = assembly.derivative_samples(&dir)?;
    assembly.project(samples, b.n_modes())
}

/// Directional mixed derivative `∂_Q ∂_f F(Q,f)[h]`.
pub fn dq_derivative_in_direction(
    b: &BoundaryMap,
    m_grid: usize,
    h: &PerturbationCoeffs,
) -> Result<Vec<f64>> {
    let assembly = Assembly::prepare(b, m_grid)?;
    let dir = DirectionSamples::eval(h, &assembly.node_points, &assembly.target_points);
    let samples = assembly.dq_derivative_samples(&dir)?;
    assembly.project(samples, b.n_modes())
}

/// One Newton iteration's worth of linear data: the Jacobian and the
/// parameter column `∂_Q∂_fF(Q,f)·f`, evaluated in a single shared pass.
///
/// Since `F(Q,0) ≡ 0`, the parameter column approximates `∂_Q F(Q,f)` to
/// first order in `‖f‖`, which is what the bordered Newton system uses.
pub fn jacobian_with_parameter_column(
    b: &BoundaryMap,
    m_grid: usize,
) -> Result<(LinearOperatorMatrix, Vec<f64>)> {
    let n = b.n_modes();
    require_modes(n)?;
    let assembly = Assembly::prepare(b, m_grid)?;
    let columns: Vec<Result<Vec<f64>>> = (0..=n)
        .into_par_iter()
        .map(|col| {
            if col < n {
                let dir = DirectionSamples::basis(
                    col + 2,
                    n,
                    &assembly.node_points,
                    &assembly.target_points,
                );
                assembly.project(assembly.derivative_samples(&dir)?, n)
            } else {
                let dir = DirectionSamples::eval(
                    b.pert(),
                    &assembly.node_points,
                    &assembly.target_points,
                );
                assembly.project(assembly.dq_derivative_samples(&dir)?, n)
            }
        })
        .collect();
    let mut entries = DMatrix::zeros(n, n);
    let mut q_column = vec![0.0; n];
    for (col, column) in columns.into_iter().enumerate() {
        let column = column?;
        if col < n {
            for (row, v) in column.into_iter().enumerate() {
                entries[(row, col)] = v;
            }
        } else {
            q_column = column;
        }
    }
    Ok((
        LinearOperatorMatrix::new(entries, b.q(), b.pert().norm()),
        q_column,
    ))
}
