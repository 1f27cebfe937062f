//! Mean-value contour integrals over the unit circle.
//!
//! The mean value of `f` is `(1/2πi) ∮ f(τ) dτ`, discretized by the periodic
//! trapezoid rule `(1/M) Σ_j f(ξ_j) ξ_j` on the M-th roots of unity. The rule
//! is exact for trigonometric polynomials of degree < M−1 and converges
//! spectrally for the bounded pair kernels assembled here, because targets are
//! staggered between quadrature nodes and the kernels extend smoothly across
//! the (never sampled) diagonal.

use crate::boundary::{BoundaryMap, GridOffset, GridSamples, GridSpec};
use crate::{Error, Result};
use num_complex::Complex64;

/// Periodic trapezoid rule on the aligned M-th roots of unity.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    spec: GridSpec,
    nodes: Vec<Complex64>,
}

impl QuadratureRule {
    pub fn new(m: usize) -> Result<Self> {
        let spec = GridSpec::aligned(m)?;
        let nodes = spec.nodes();
        Ok(Self { spec, nodes })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.spec.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn spec(&self) -> GridSpec {
        self.spec
    }

    #[inline]
    pub fn nodes(&self) -> &[Complex64] {
        &self.nodes
    }

    /// `(1/M) Σ_j f(ξ_j) ξ_j` for samples on this rule's aligned grid.
    pub fn mean_integral(&self, samples: &GridSamples) -> Result<Complex64> {
        if samples.spec() != self.spec {
            return Err(Error::GridMismatch(
                "mean_integral needs samples on the rule's aligned grid".into(),
            ));
        }
        let m = self.len() as f64;
        let mut acc = Complex64::new(0.0, 0.0);
        for (f, xi) in samples.values().iter().zip(&self.nodes) {
            acc += f * xi;
        }
        Ok(acc / m)
    }
}

/// How the pair kernel treats coincident node/target points.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiagonalMode {
    /// Targets are half-offset relative to the quadrature nodes; the diagonal
    /// is never sampled. This is the default.
    Staggered,
    /// Targets coincide with the quadrature nodes; the diagonal sample is
    /// replaced by the analytic limit `−w̄² Φ′(w̄)/Φ′(w)`.
    AnalyticLimit,
}

/// `G₂(w) = ⨍ (Φ(ξ̄)−Φ(w̄))/(Φ(ξ)−Φ(w)) Φ′(ξ) dξ` at each target `w`.
///
/// Requires the coercivity guard to hold (at margin 0, i.e. the provable
/// regime), since boundedness of the kernel is exactly what the guard
/// certifies. For the unperturbed ellipse the result is `(Q²−1)/w`.
pub fn cauchy_pair_integral(
    b: &BoundaryMap,
    rule: &QuadratureRule,
    targets: &GridSpec,
    mode: DiagonalMode,
) -> Result<GridSamples> {
    b.require_guard(0.0)?;
    match mode {
        DiagonalMode::Staggered => {
            if targets.offset() != GridOffset::Half || targets.len() != rule.len() {
                return Err(Error::GridMismatch(
                    "staggered mode needs half-offset targets matching the rule size; \
                     pass DiagonalMode::AnalyticLimit for same-grid targets"
                        .into(),
                ));
            }
        }
        DiagonalMode::AnalyticLimit => {
            if targets.offset() != GridOffset::Aligned || targets.len() != rule.len() {
                return Err(Error::GridMismatch(
                    "analytic-limit mode needs targets on the rule's own grid".into(),
                ));
            }
        }
    }

    let m = rule.len();
    let xi = rule.nodes();
    let phi_xi: Vec<Complex64> = xi.iter().map(|&x| b.phi(x)).collect();
    let dphi_xi: Vec<Complex64> = xi.iter().map(|&x| b.dphi(x)).collect();
    let w_nodes = targets.nodes();

    let mut out = Vec::with_capacity(targets.len());
    for (i, &w) in w_nodes.iter().enumerate() {
        let phi_w = b.phi(w);
        let phi_wbar = phi_w.conj();
        let mut acc = Complex64::new(0.0, 0.0);
        for j in 0..m {
            let kernel = if mode == DiagonalMode::AnalyticLimit && i == j {
                let wbar = w.conj();
                -wbar * wbar * b.dphi(wbar) / b.dphi(w)
            } else {
                (phi_xi[j].conj() - phi_wbar) / (phi_xi[j] - phi_w)
            };
            acc += kernel * dphi_xi[j] * xi[j];
        }
        out.push(acc / m as f64);
    }
    GridSamples::new(*targets, out)
}

/// Kernel samples `K(ξ_j, w_i)` together with a declared boundedness
/// certificate.
///
/// Row `i` holds the kernel at target `w_i` against all quadrature nodes.
/// Construction fails if any sample is non-finite or exceeds the declared
/// bound — this is the contract check that rejects genuinely singular kernels
/// such as `1/(ξ−w)`, whose staggered samples grow like `M/π`.
#[derive(Debug, Clone)]
pub struct KernelMatrix {
    n_targets: usize,
    n_nodes: usize,
    /// Row-major: `data[i * n_nodes + j] = K(ξ_j, w_i)`.
    data: Vec<Complex64>,
    bound: f64,
}

impl KernelMatrix {
    pub fn new(n_targets: usize, n_nodes: usize, data: Vec<Complex64>, bound: f64) -> Result<Self> {
        if data.len() != n_targets * n_nodes {
            return Err(Error::GridMismatch(format!(
                "kernel matrix needs {} entries, got {}",
                n_targets * n_nodes,
                data.len()
            )));
        }
        if !(bound.is_finite() && bound > 0.0) {
            return Err(Error::InvalidParameter(
                "kernel bound must be positive and finite".into(),
            ));
        }
        let sampled = data.iter().map(|v| v.norm()).fold(0.0, f64::max);
        if !sampled.is_finite() || sampled > bound {
            return Err(Error::KernelBound {
                sampled,
                declared: bound,
            });
        }
        Ok(Self {
            n_targets,
            n_nodes,
            data,
            bound,
        })
    }

    /// Fills the matrix from `K(ξ_j, w_i)` evaluated on a rule/target pair.
    pub fn from_fn(
        rule: &QuadratureRule,
        targets: &GridSpec,
        bound: f64,
        mut kernel: impl FnMut(Complex64, Complex64) -> Complex64,
    ) -> Result<Self> {
        let xi = rule.nodes();
        let w = targets.nodes();
        let mut data = Vec::with_capacity(w.len() * xi.len());
        for &wi in &w {
            for &xj in xi {
                data.push(kernel(xj, wi));
            }
        }
        Self::new(w.len(), xi.len(), data, bound)
    }

    #[inline]
    pub fn n_targets(&self) -> usize {
        self.n_targets
    }

    #[inline]
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    #[inline]
    pub fn bound(&self) -> f64 {
        self.bound
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[Complex64] {
        &self.data[i * self.n_nodes..(i + 1) * self.n_nodes]
    }
}

/// Applies the mean integral row-wise:
/// `out(w_i) = (1/M) Σ_j K(ξ_j, w_i) ρ(ξ_j) ξ_j`.
///
/// The density must be sampled on the rule's aligned grid and the target grid
/// supplies the output layout. Summation order within a row is fixed, so the
/// result is deterministic.
pub fn bounded_kernel_integral(
    kernel: &KernelMatrix,
    rule: &QuadratureRule,
    targets: &GridSpec,
    density: &GridSamples,
) -> Result<GridSamples> {
    if density.spec() != rule.spec() {
        return Err(Error::GridMismatch(
            "density must be sampled on the rule's aligned grid".into(),
        ));
    }
    if kernel.n_nodes() != rule.len() || kernel.n_targets() != targets.len() {
        return Err(Error::GridMismatch(format!(
            "kernel is {}x{}, expected {}x{}",
            kernel.n_targets(),
            kernel.n_nodes(),
            targets.len(),
            rule.len()
        )));
    }
    let m = rule.len() as f64;
    let weighted: Vec<Complex64> = density
        .values()
        .iter()
        .zip(rule.nodes())
        .map(|(rho, xi)| rho * xi / m)
        .collect();
    let mut out = Vec::with_capacity(targets.len());
    for i in 0..targets.len() {
        let mut acc = Complex64::new(0.0, 0.0);
        for (k, d) in kernel.row(i).iter().zip(&weighted) {
            acc += k * d;
        }
        out.push(acc);
    }
    GridSamples::new(*targets, out)
}
