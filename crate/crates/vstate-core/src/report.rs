//! Machine-readable command outputs: dispersion tables (CSV), operator
//! cross-checks (JSON), and branch documents (JSON plus boundary-trace CSV).
//!
//! Every document embeds a [`RunManifest`]. Outputs are byte-identical across
//! re-runs with identical flags: nothing volatile enters them unless the
//! `SOURCE_DATE_EPOCH` convention supplies an explicit timestamp.

use crate::boundary::{BoundaryMap, EllipseParam, GridSpec, PerturbationCoeffs};
use crate::continuation::{trace_branch, BranchConfig, BranchTrace};
use crate::linop::{assemble_jacobian, closed_form_lq, dq_jacobian_integral};
use crate::spectrum::{
    em_projection_on_kernel, find_qm, kernel_vector, transversality, transversality_via_operator,
};
use crate::{Error, Result};
use serde::Serialize;

/// Provenance block embedded in every output document.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    /// The subcommand and its fully resolved parameters.
    pub command: String,
    pub config: serde_json::Value,
    /// Crate version.
    pub version: String,
    /// Populated from `SOURCE_DATE_EPOCH` when set; null otherwise, keeping
    /// re-runs byte-identical.
    pub timestamp: Option<String>,
    /// Tolerances achieved or enforced by the run.
    pub tolerances: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, tolerances: serde_json::Value) -> Self {
        let timestamp = std::env::var("SOURCE_DATE_EPOCH")
            .ok()
            .map(|s| format!("epoch:{s}"));
        Self {
            command: command.to_string(),
            config,
            version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp,
            tolerances,
        }
    }
}

/// One row of the dispersion table.
#[derive(Debug, Clone, Serialize)]
pub struct DispersionRow {
    pub m: u32,
    pub q_m: f64,
    pub f_residual: f64,
    pub transversality: f64,
}

/// Computes the dispersion table for `m ∈ [m_min, m_max]`, sorted by `m`.
pub fn dispersion_rows(m_min: u32, m_max: u32) -> Result<Vec<DispersionRow>> {
    if m_min < 3 || m_min > m_max {
        return Err(Error::InvalidParameter(format!(
            "need 3 ≤ m_min ≤ m_max, got {m_min}..{m_max}"
        )));
    }
    let mut rows = Vec::with_capacity((m_max - m_min + 1) as usize);
    for m in m_min..=m_max {
        let p = find_qm(m)?;
        rows.push(DispersionRow {
            m,
            q_m: p.q_m,
            f_residual: p.lambda_residual,
            transversality: transversality(m, p.q_m)?,
        });
    }
    Ok(rows)
}

/// Renders the dispersion table as CSV with the manifest on `#` comment
/// lines above the header row.
pub fn dispersion_csv(rows: &[DispersionRow], manifest: &RunManifest) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "# manifest: {}\n",
        serde_json::to_string(manifest).expect("manifest serializes")
    ));
    out.push_str("m,Q_m,f_residual,transversality\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.16e},{:.3e},{:.16e}\n",
            r.m, r.q_m, r.f_residual, r.transversality
        ));
    }
    out
}

/// Tolerances enforced by `linop-check`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LinopTolerances {
    pub closed_vs_assembled: f64,
    pub fd_relative: f64,
    pub kernel_residual: f64,
    pub transversality_split: f64,
}

impl Default for LinopTolerances {
    fn default() -> Self {
        Self {
            closed_vs_assembled: 1e-8,
            fd_relative: 1e-6,
            kernel_residual: 1e-8,
            transversality_split: 1e-7,
        }
    }
}

/// Cross-validation report of the two operator representations.
#[derive(Debug, Clone, Serialize)]
pub struct LinopReport {
    pub m: u32,
    pub q_m: f64,
    pub n_modes: usize,
    pub m_grid: usize,
    pub closed_vs_assembled_supnorm: f64,
    pub fd_relative_error: f64,
    pub kernel_residual: f64,
    pub transversality_closed: f64,
    pub transversality_integral: f64,
    pub pass: bool,
    pub manifest: RunManifest,
}

/// Runs the operator cross-checks at the bifurcation point of fold `m`.
pub fn linop_check(
    m: u32,
    n_modes: usize,
    m_grid: usize,
    tol: LinopTolerances,
) -> Result<LinopReport> {
    let q_m = find_qm(m)?.q_m;
    let b = BoundaryMap::ellipse(q_m, n_modes)?;

    let closed = closed_form_lq(q_m, n_modes)?;
    let assembled = assemble_jacobian(&b, m_grid)?;
    let closed_vs_assembled = assembled.sup_diff(&closed);

    // deterministic pseudo-random direction and base point for the FD probe
    let mut f = PerturbationCoeffs::zeros(n_modes);
    let mut h = PerturbationCoeffs::zeros(n_modes);
    let scale = 0.01 * (1.0 - q_m) / 2.0;
    let mut state = 0x9e3779b97f4a7c15u64.wrapping_add(m as u64);
    let mut next = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    };
    for p in 2..=n_modes + 1 {
        let damp = 0.6f64.powi(p as i32 - 2);
        f.set_coeff(p, scale * damp * next());
        h.set_coeff(p, damp * next());
    }
    let ellipse = EllipseParam::new(q_m)?;
    let base = BoundaryMap::new(ellipse, f.clone());
    let jac = assemble_jacobian(&base, m_grid)?;
    let jh = jac.apply(&h);
    let t = 1e-5;
    let mut fp = f.clone();
    let mut fm = f.clone();
    for p in 2..=n_modes + 1 {
        fp.set_coeff(p, f.coeff(p) + t * h.coeff(p));
        fm.set_coeff(p, f.coeff(p) - t * h.coeff(p));
    }
    let gp = crate::functional::eval_f(&BoundaryMap::new(ellipse, fp), m_grid)?;
    let gm = crate::functional::eval_f(&BoundaryMap::new(ellipse, fm), m_grid)?;
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for row in 1..=n_modes {
        let fd = (gp.coeff(row) - gm.coeff(row)) / (2.0 * t);
        num += (fd - jh[row - 1]).powi(2);
        den += jh[row - 1].powi(2);
    }
    let fd_relative = (num / den).sqrt();

    let v = kernel_vector(m, q_m, n_modes)?;
    let image = assembled.apply(&v);
    let kernel_residual = image.iter().map(|x| x.abs()).fold(0.0, f64::max);

    let trans_closed = transversality_via_operator(m, q_m, n_modes)?;
    let dq_assembled = dq_jacobian_integral(&b, m_grid)?;
    let trans_integral = em_projection_on_kernel(&dq_assembled, m, q_m)?;

    let pass = closed_vs_assembled < tol.closed_vs_assembled
        && fd_relative < tol.fd_relative
        && kernel_residual < tol.kernel_residual
        && (trans_closed - trans_integral).abs() < tol.transversality_split
        && (trans_closed - transversality(m, q_m)?).abs() < tol.transversality_split;

    let manifest = RunManifest::new(
        "linop-check",
        serde_json::json!({ "m": m, "modes": n_modes, "grid": m_grid }),
        serde_json::to_value(tol).expect("tolerances serialize"),
    );
    Ok(LinopReport {
        m,
        q_m,
        n_modes,
        m_grid,
        closed_vs_assembled_supnorm: closed_vs_assembled,
        fd_relative_error: fd_relative,
        kernel_residual,
        transversality_closed: trans_closed,
        transversality_integral: trans_integral,
        pass,
        manifest,
    })
}

/// One record of the branch document.
#[derive(Debug, Clone, Serialize)]
pub struct BranchRecord {
    pub eps: f64,
    #[serde(rename = "Q")]
    pub q: f64,
    pub omega: f64,
    pub coeffs: Vec<f64>,
    pub residual: f64,
    pub verify: f64,
    pub newton_iters: usize,
}

/// The branch document written by `branch`.
#[derive(Debug, Clone, Serialize)]
pub struct BranchDocument {
    pub m: u32,
    #[serde(rename = "Q_m")]
    pub q_m: f64,
    pub truncated: bool,
    pub continuity_factor: f64,
    pub n_modes: usize,
    pub m_grid: usize,
    pub diagnostics: Vec<String>,
    pub points: Vec<BranchRecord>,
    pub manifest: RunManifest,
}

/// Traces the branch for `cfg` and assembles the output document.
pub fn branch_document(cfg: &BranchConfig) -> Result<(BranchDocument, BranchTrace)> {
    let trace = trace_branch(cfg)?;
    let manifest = RunManifest::new(
        "branch",
        serde_json::json!({
            "m": cfg.m,
            "modes": cfg.n_modes,
            "grid": cfg.m_grid,
            "eps_max": cfg.eps_max,
            "eps_step": cfg.eps_step,
            "tol": cfg.newton_tol,
            "refine": cfg.verify_refine,
        }),
        serde_json::json!({
            "newton_tol": cfg.newton_tol,
            "verify_gate": crate::continuation::VERIFY_FACTOR * cfg.newton_tol,
            "tail_limit": crate::continuation::TAIL_LIMIT,
        }),
    );
    let points = trace
        .points
        .iter()
        .map(|cp| BranchRecord {
            eps: cp.point.eps,
            q: cp.point.q,
            omega: (1.0 - cp.point.q * cp.point.q) / 4.0,
            coeffs: cp.point.coeffs.as_slice().to_vec(),
            residual: cp.point.residual_inf,
            verify: cp.verify_sup,
            newton_iters: cp.point.newton_iters,
        })
        .collect();
    let doc = BranchDocument {
        m: trace.m,
        q_m: trace.q_m,
        truncated: trace.truncated,
        continuity_factor: trace.continuity_factor,
        n_modes: trace.final_n_modes,
        m_grid: trace.final_m_grid,
        diagnostics: trace.diagnostics.clone(),
        points,
        manifest,
    };
    Ok((doc, trace))
}

/// Boundary trace `(theta, x, y)` of the most deformed branch point, for
/// plotting.
pub fn boundary_csv(doc: &BranchDocument, samples: usize) -> Result<String> {
    let last = doc
        .points
        .last()
        .ok_or_else(|| Error::InvalidParameter("empty branch".into()))?;
    let pert = PerturbationCoeffs::from_coeffs(last.coeffs.clone())?;
    let b = BoundaryMap::new(EllipseParam::new(last.q)?, pert);
    let m = samples.next_power_of_two().max(256);
    let grid = GridSpec::aligned(m)?;
    let mut out = String::new();
    out.push_str(&format!(
        "# manifest: {}\n",
        serde_json::to_string(&doc.manifest).expect("manifest serializes")
    ));
    out.push_str(&format!("# eps: {:.6e}, Q: {:.16e}\n", last.eps, last.q));
    out.push_str("theta,x,y\n");
    for (j, w) in grid.nodes().iter().enumerate() {
        let z = b.phi(*w);
        out.push_str(&format!(
            "{:.16e},{:.16e},{:.16e}\n",
            grid.theta(j),
            z.re,
            z.im
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dispersion_rows_values() {
        let rows = dispersion_rows(3, 5).unwrap();
        assert_eq!(rows.len(), 3);
        assert!((rows[0].q_m - 0.5).abs() < 1e-13);
        assert!(rows[0].f_residual < 1e-14);
        assert!((rows[0].transversality + 2.25).abs() < 1e-12);
        let q4 = (std::f64::consts::SQRT_2 - 1.0).sqrt();
        assert!((rows[1].q_m - q4).abs() < 1e-12);
        assert!((rows[1].transversality + 4.0 * (q4 + q4.powi(3))).abs() < 1e-10);
        assert!(rows.windows(2).all(|w| w[0].q_m < w[1].q_m));
    }

    #[test]
    fn dispersion_csv_shape() {
        let rows = dispersion_rows(3, 4).unwrap();
        let manifest = RunManifest::new(
            "dispersion",
            serde_json::json!({"m_min": 3, "m_max": 4}),
            serde_json::json!({}),
        );
        let csv = dispersion_csv(&rows, &manifest);
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[0].starts_with("# manifest: "));
        assert_eq!(lines[1], "m,Q_m,f_residual,transversality");
        assert_eq!(lines.len(), 4);
        assert!(lines[2].starts_with("3,5.0000000000000000e-1,"));
    }

    #[test]
    fn dispersion_rejects_bad_range() {
        assert!(dispersion_rows(2, 5).is_err());
        assert!(dispersion_rows(5, 3).is_err());
    }

    #[test]
    fn linop_check_passes_at_default_tolerances() {
        let report = linop_check(3, 24, 128, LinopTolerances::default()).unwrap();
        assert!(report.pass, "{report:?}");
        assert!(report.closed_vs_assembled_supnorm < 1e-8);
        assert!(report.kernel_residual < 1e-8);
        assert!((report.transversality_closed + 2.25).abs() < 1e-10);
        assert!((report.transversality_integral + 2.25).abs() < 1e-6);
    }

    #[test]
    fn linop_check_fails_with_absurd_tolerances() {
        let tol = LinopTolerances {
            closed_vs_assembled: 1e-18,
            ..Default::default()
        };
        let report = linop_check(3, 16, 128, tol).unwrap();
        assert!(!report.pass);
    }

    #[test]
    fn branch_document_smoke() {
        let mut cfg = BranchConfig::new(3);
        cfg.n_modes = 64;
        cfg.m_grid = 256;
        cfg.eps_max = 0.005;
        cfg.eps_step = 0.005;
        let (doc, trace) = branch_document(&cfg).unwrap();
        assert!(!doc.truncated, "{:?}", doc.diagnostics);
        assert_eq!(doc.points.len(), 2);
        assert_eq!(doc.points[0].eps, 0.0);
        assert!(doc.points[0].coeffs.iter().all(|c| *c == 0.0));
        assert!((doc.points[0].q - 0.5).abs() < 1e-12);
        let omega = doc.points[1].omega;
        let q = doc.points[1].q;
        assert!((omega - (1.0 - q * q) / 4.0).abs() < 1e-15);
        assert_eq!(trace.points.len(), 2);

        let csv = boundary_csv(&doc, 256).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[0].starts_with("# manifest: "));
        assert_eq!(lines[2], "theta,x,y");
        assert_eq!(lines.len(), 3 + 256);
    }
}
