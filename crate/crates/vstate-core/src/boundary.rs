//! Boundary maps `Φ(w) = w + Q/w + Σ_{n≥2} a_n wⁿ` and sampling grids on the
//! unit circle.
//!
//! The ellipse family is parametrized by the aspect parameter `Q = (a−b)/(a+b)`
//! of the semi-axes `a ≥ b`; perturbations are holomorphic inside the disc
//! with real coefficients starting at `w²`. All types are immutable values and
//! every operation here is pure.

use crate::{Error, Result};
use num_complex::Complex64;

/// Default safety margin for the bi-Lipschitz coercivity guard.
///
/// The provable bound is sharp at `‖f′‖ = (1−Q)/2`; the margin keeps Newton
/// iterates strictly inside the regime where the pair kernel stays bounded.
pub const DEFAULT_COERCIVITY_MARGIN: f64 = 0.05;

/// Oversampling factor used when estimating `sup|f′|` for the guard.
const GUARD_OVERSAMPLE: usize = 4;

/// Aspect parameter of the base ellipse, `Q ∈ (0,1)`.
///
/// `Q = (a−b)/(a+b)` for semi-axes `a ≥ b`; the image of the unit circle
/// under `w ↦ w + Q/w` is the ellipse with semi-axes `1+Q`, `1−Q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipseParam {
    q: f64,
}

impl EllipseParam {
    pub fn new(q: f64) -> Result<Self> {
        if !(q > 0.0 && q < 1.0) || !q.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "aspect parameter Q must lie in (0,1), got {q}"
            )));
        }
        Ok(Self { q })
    }

    #[inline]
    pub fn q(&self) -> f64 {
        self.q
    }

    /// Kirchhoff angular velocity of the unperturbed ellipse, `(1−Q²)/4`.
    #[inline]
    pub fn kirchhoff_omega(&self) -> f64 {
        (1.0 - self.q * self.q) / 4.0
    }
}

/// Real perturbation coefficients `a_n` of `f(w) = Σ_{n≥2} a_n wⁿ`.
///
/// Stored densely from power 2: entry `k` is the coefficient of `w^(k+2)`.
/// Powers 0 and 1 do not exist; they belong to the ellipse itself.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationCoeffs {
    a: Vec<f64>,
}

impl PerturbationCoeffs {
    /// The zero perturbation with `n_modes` coefficients (powers `2..=n_modes+1`).
    pub fn zeros(n_modes: usize) -> Self {
        Self {
            a: vec![0.0; n_modes],
        }
    }

    /// Builds from a dense slice where `a[k]` multiplies `w^(k+2)`.
    pub fn from_coeffs(a: Vec<f64>) -> Result<Self> {
        if a.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter(
                "perturbation coefficients must be finite".into(),
            ));
        }
        Ok(Self { a })
    }

    /// Number of stored modes; powers run `2..=n_modes()+1`.
    #[inline]
    pub fn n_modes(&self) -> usize {
        self.a.len()
    }

    /// Coefficient of `wⁿ` (zero outside the stored band or for `n < 2`).
    #[inline]
    pub fn coeff(&self, power: usize) -> f64 {
        if power < 2 {
            0.0
        } else {
            self.a.get(power - 2).copied().unwrap_or(0.0)
        }
    }

    /// Sets the coefficient of `wⁿ`; the power must be stored.
    pub fn set_coeff(&mut self, power: usize, value: f64) {
        assert!(
            (2..self.a.len() + 2).contains(&power),
            "power {power} outside stored band"
        );
        self.a[power - 2] = value;
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.a
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            a: self.a.iter().map(|x| s * x).collect(),
        }
    }

    /// Euclidean norm of the coefficient vector.
    pub fn norm(&self) -> f64 {
        self.a.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Zero-pads (or truncates) to `n_modes` coefficients.
    pub fn resized(&self, n_modes: usize) -> Self {
        let mut a = self.a.clone();
        a.resize(n_modes, 0.0);
        Self { a }
    }
}

/// Offset of a sampling grid on the unit circle.
///
/// Half-offset grids place points between the aligned quadrature nodes, so
/// singular-kernel evaluations never sample the diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridOffset {
    /// `w_j = exp(2πi j / M)`
    Aligned,
    /// `w_j = exp(2πi (j + 1/2) / M)`
    Half,
}

/// A uniform grid of `M` points on the unit circle, optionally half-offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    m: usize,
    offset: GridOffset,
}

impl GridSpec {
    pub fn new(m: usize, offset: GridOffset) -> Result<Self> {
        if m < 4 || !m.is_power_of_two() {
            return Err(Error::InvalidParameter(format!(
                "grid size must be a power of two and at least 4, got {m}"
            )));
        }
        Ok(Self { m, offset })
    }

    pub fn aligned(m: usize) -> Result<Self> {
        Self::new(m, GridOffset::Aligned)
    }

    pub fn half_offset(m: usize) -> Result<Self> {
        Self::new(m, GridOffset::Half)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.m
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn offset(&self) -> GridOffset {
        self.offset
    }

    /// Angle of node `j`.
    #[inline]
    pub fn theta(&self, j: usize) -> f64 {
        let shift = match self.offset {
            GridOffset::Aligned => 0.0,
            GridOffset::Half => 0.5,
        };
        2.0 * std::f64::consts::PI * (j as f64 + shift) / self.m as f64
    }

    /// All grid nodes `e^{iθ_j}`.
    pub fn nodes(&self) -> Vec<Complex64> {
        (0..self.m)
            .map(|j| Complex64::from_polar(1.0, self.theta(j)))
            .collect()
    }
}

/// Complex samples of a boundary quantity on a [`GridSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct GridSamples {
    spec: GridSpec,
    values: Vec<Complex64>,
}

impl GridSamples {
    pub fn new(spec: GridSpec, values: Vec<Complex64>) -> Result<Self> {
        if values.len() != spec.len() {
            return Err(Error::GridMismatch(format!(
                "expected {} samples, got {}",
                spec.len(),
                values.len()
            )));
        }
        Ok(Self { spec, values })
    }

    #[inline]
    pub fn spec(&self) -> GridSpec {
        self.spec
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<Complex64> {
        self.values
    }

    /// Largest sample magnitude.
    pub fn sup_norm(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }
}

/// Report produced by the coercivity guard.
#[derive(Debug, Clone, Copy)]
pub struct GuardReport {
    /// `sup|f′| / ((1−Q)/2)`, measured on an oversampled grid.
    pub ratio: f64,
    /// Margin the check was run with.
    pub margin: f64,
    /// True iff `ratio ≤ 1 − margin`.
    pub ok: bool,
}

/// A patch boundary: base ellipse plus real perturbation.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryMap {
    ellipse: EllipseParam,
    pert: PerturbationCoeffs,
}

impl BoundaryMap {
    pub fn new(ellipse: EllipseParam, pert: PerturbationCoeffs) -> Self {
        Self { ellipse, pert }
    }

    /// The unperturbed ellipse with aspect parameter `q` and `n_modes` zero
    /// coefficients.
    pub fn ellipse(q: f64, n_modes: usize) -> Result<Self> {
        Ok(Self::new(
            EllipseParam::new(q)?,
            PerturbationCoeffs::zeros(n_modes),
        ))
    }

    #[inline]
    pub fn q(&self) -> f64 {
        self.ellipse.q()
    }

    #[inline]
    pub fn ellipse_param(&self) -> EllipseParam {
        self.ellipse
    }

    #[inline]
    pub fn pert(&self) -> &PerturbationCoeffs {
        &self.pert
    }

    #[inline]
    pub fn n_modes(&self) -> usize {
        self.pert.n_modes()
    }

    /// `Φ(w)` at a single point of the circle.
    pub fn phi(&self, w: Complex64) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        // Horner from the top power down to w^2.
        for k in (0..self.pert.n_modes()).rev() {
            acc = (acc + self.pert.as_slice()[k]) * w;
        }
        acc = acc * w; // completes a_n w^n with lowest power 2
        w + self.ellipse.q() / w + acc
    }

    /// `Φ′(w)` at a single point.
    pub fn dphi(&self, w: Complex64) -> Complex64 {
        let mut acc = Complex64::new(0.0, 0.0);
        for k in (0..self.pert.n_modes()).rev() {
            let n = (k + 2) as f64;
            acc = acc * w + n * self.pert.as_slice()[k];
        }
        acc = acc * w; // completes n a_n w^{n-1} with lowest power 1
        1.0 - self.ellipse.q() / (w * w) + acc
    }

    /// `f(w) = Φ(w) − (w + Q/w)` at a single point.
    pub fn f(&self, w: Complex64) -> Complex64 {
        self.phi(w) - w - self.ellipse.q() / w
    }

    /// `f′(w)` at a single point.
    pub fn df(&self, w: Complex64) -> Complex64 {
        self.dphi(w) - 1.0 + self.ellipse.q() / (w * w)
    }

    fn check_grid(&self, grid: &GridSpec) -> Result<()> {
        let min = 2 * (self.pert.n_modes() + 1);
        if grid.len() < min {
            return Err(Error::GridTooSmall(format!(
                "map with {} modes needs at least {} grid points, got {}",
                self.pert.n_modes(),
                min,
                grid.len()
            )));
        }
        Ok(())
    }

    /// Samples `Φ(w_j)` on `grid`; spectrally exact for the finite sum.
    pub fn eval_map(&self, grid: &GridSpec) -> Result<GridSamples> {
        self.check_grid(grid)?;
        let values = grid.nodes().iter().map(|&w| self.phi(w)).collect();
        GridSamples::new(*grid, values)
    }

    /// Samples `Φ′(w_j)` on `grid`.
    pub fn eval_map_derivative(&self, grid: &GridSpec) -> Result<GridSamples> {
        self.check_grid(grid)?;
        let values = grid.nodes().iter().map(|&w| self.dphi(w)).collect();
        GridSamples::new(*grid, values)
    }

    /// Samples `Φ(w̄_j)` on `grid`.
    ///
    /// Because all coefficients are real, this equals the elementwise complex
    /// conjugate of [`eval_map`](Self::eval_map) on the same grid, and is
    /// computed that way.
    pub fn conjugate_samples(&self, grid: &GridSpec) -> Result<GridSamples> {
        let samples = self.eval_map(grid)?;
        let values = samples.values().iter().map(|v| v.conj()).collect();
        GridSamples::new(*grid, values)
    }

    /// Checks `sup|f′| ≤ (1−Q)/2 · (1−margin)` on a 4×-oversampled grid.
    ///
    /// A false result signals that the perturbation left the provable
    /// bi-Lipschitz regime: downstream quadrature accuracy is no longer
    /// guaranteed.
    pub fn coercivity_guard(&self, margin: f64) -> GuardReport {
        let m = (GUARD_OVERSAMPLE * (self.pert.n_modes() + 1).next_power_of_two()).max(16);
        let m = m.next_power_of_two();
        let grid = GridSpec::aligned(m).expect("oversampled guard grid");
        let sup = grid
            .nodes()
            .iter()
            .map(|&w| self.df(w).norm())
            .fold(0.0, f64::max);
        let half_gap = (1.0 - self.ellipse.q()) / 2.0;
        let ratio = sup / half_gap;
        GuardReport {
            ratio,
            margin,
            ok: ratio <= 1.0 - margin,
        }
    }

    /// Errors unless the guard passes at `margin`.
    pub fn require_guard(&self, margin: f64) -> Result<GuardReport> {
        let report = self.coercivity_guard(margin);
        if !report.ok {
            return Err(Error::GuardViolation {
                ratio: report.ratio,
                limit: 1.0 - margin,
            });
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn ellipse_param_rejects_out_of_range() {
        assert!(EllipseParam::new(0.0).is_err());
        assert!(EllipseParam::new(1.0).is_err());
        assert!(EllipseParam::new(-0.3).is_err());
        assert!(EllipseParam::new(f64::NAN).is_err());
        assert!(EllipseParam::new(0.5).is_ok());
    }

    #[test]
    fn eval_map_pointwise_values() {
        let b = BoundaryMap::ellipse(0.5, 8).unwrap();
        assert_abs_diff_eq!(b.phi(c(1.0, 0.0)).re, 1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(b.phi(c(1.0, 0.0)).im, 0.0, epsilon = 1e-15);
        let at_i = b.phi(c(0.0, 1.0));
        assert_abs_diff_eq!(at_i.re, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(at_i.im, 0.5, epsilon = 1e-15);

        let mut pert = PerturbationCoeffs::zeros(8);
        pert.set_coeff(3, 0.1);
        let b = BoundaryMap::new(EllipseParam::new(0.3).unwrap(), pert);
        assert_abs_diff_eq!(b.phi(c(1.0, 0.0)).re, 1.4, epsilon = 1e-15);
    }

    #[test]
    fn eval_map_derivative_pointwise_values() {
        let b = BoundaryMap::ellipse(0.5, 8).unwrap();
        assert_abs_diff_eq!(b.dphi(c(1.0, 0.0)).re, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(b.dphi(c(0.0, 1.0)).re, 1.5, epsilon = 1e-15);
        assert_abs_diff_eq!(b.dphi(c(0.0, 1.0)).im, 0.0, epsilon = 1e-15);

        let mut pert = PerturbationCoeffs::zeros(8);
        pert.set_coeff(2, 0.05);
        let b = BoundaryMap::new(EllipseParam::new(0.2).unwrap(), pert);
        assert_abs_diff_eq!(b.dphi(c(1.0, 0.0)).re, 0.9, epsilon = 1e-15);
    }

    #[test]
    fn rejects_aliasing_grid() {
        let b = BoundaryMap::ellipse(0.5, 60).unwrap();
        let grid = GridSpec::aligned(64).unwrap();
        // needs at least 2*(60+1) = 122 points
        assert!(b.eval_map(&grid).is_err());
        let grid = GridSpec::aligned(128).unwrap();
        assert!(b.eval_map(&grid).is_ok());
    }

    #[test]
    fn ellipse_image_has_expected_semi_axes() {
        let q = 0.37;
        let b = BoundaryMap::ellipse(q, 4).unwrap();
        let grid = GridSpec::aligned(1024).unwrap();
        let samples = b.eval_map(&grid).unwrap();
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for v in samples.values() {
            lo = lo.min(v.norm());
            hi = hi.max(v.norm());
        }
        assert_abs_diff_eq!(hi, 1.0 + q, epsilon = 1e-12);
        assert_abs_diff_eq!(lo, 1.0 - q, epsilon = 1e-12);
    }

    #[test]
    fn conjugate_matches_direct_evaluation() {
        let mut pert = PerturbationCoeffs::zeros(6);
        pert.set_coeff(3, 0.1);
        let b = BoundaryMap::new(EllipseParam::new(0.3).unwrap(), pert);
        let grid = GridSpec::half_offset(64).unwrap();
        let conj = b.conjugate_samples(&grid).unwrap();
        for (j, &w) in grid.nodes().iter().enumerate() {
            let direct = b.phi(w.conj());
            assert!((conj.values()[j] - direct).norm() < 1e-15);
        }
    }

    #[test]
    fn conjugate_is_exact_conjugation_of_eval_map() {
        let mut pert = PerturbationCoeffs::zeros(10);
        pert.set_coeff(2, 0.02);
        pert.set_coeff(7, -0.013);
        let b = BoundaryMap::new(EllipseParam::new(0.44).unwrap(), pert);
        let grid = GridSpec::aligned(64).unwrap();
        let phi = b.eval_map(&grid).unwrap();
        let conj = b.conjugate_samples(&grid).unwrap();
        for (a, b) in phi.values().iter().zip(conj.values()) {
            assert_eq!(a.conj(), *b);
        }
    }

    #[test]
    fn derivative_matches_fft_differentiation() {
        use rustfft::FftPlanner;
        let mut pert = PerturbationCoeffs::zeros(12);
        pert.set_coeff(2, 0.03);
        pert.set_coeff(5, -0.01);
        pert.set_coeff(13, 0.004);
        let b = BoundaryMap::new(EllipseParam::new(0.41).unwrap(), pert);
        let m = 64;
        let grid = GridSpec::aligned(m).unwrap();
        let phi = b.eval_map(&grid).unwrap();
        let dphi = b.eval_map_derivative(&grid).unwrap();

        let mut buf: Vec<Complex64> = phi.values().to_vec();
        FftPlanner::new().plan_fft_forward(m).process(&mut buf);
        // multiply mode k by ik (signed frequencies), then invert
        for (k, v) in buf.iter_mut().enumerate() {
            let freq = if k <= m / 2 { k as f64 } else { k as f64 - m as f64 };
            *v *= Complex64::new(0.0, freq);
        }
        FftPlanner::new().plan_fft_inverse(m).process(&mut buf);
        for (j, &w) in grid.nodes().iter().enumerate() {
            let dtheta = buf[j] / m as f64;
            let spectral = dtheta / (Complex64::new(0.0, 1.0) * w);
            assert!(
                (spectral - dphi.values()[j]).norm() < 1e-12,
                "node {j}: {spectral} vs {}",
                dphi.values()[j]
            );
        }
    }

    #[test]
    fn guard_examples() {
        let b = BoundaryMap::ellipse(0.5, 8).unwrap();
        let r = b.coercivity_guard(DEFAULT_COERCIVITY_MARGIN);
        assert!(r.ok);
        assert_abs_diff_eq!(r.ratio, 0.0, epsilon = 1e-15);

        let mut pert = PerturbationCoeffs::zeros(8);
        pert.set_coeff(2, 0.2); // sup|f'| = 0.4 > 0.25 * 0.95
        let b = BoundaryMap::new(EllipseParam::new(0.5).unwrap(), pert);
        let r = b.coercivity_guard(DEFAULT_COERCIVITY_MARGIN);
        assert!(!r.ok);
        assert_abs_diff_eq!(r.ratio, 0.4 / 0.25, epsilon = 1e-12);

        let mut pert = PerturbationCoeffs::zeros(8);
        pert.set_coeff(2, 0.05); // sup|f'| = 0.1 < 0.2375
        let b = BoundaryMap::new(EllipseParam::new(0.5).unwrap(), pert);
        assert!(b.coercivity_guard(DEFAULT_COERCIVITY_MARGIN).ok);
    }
}
