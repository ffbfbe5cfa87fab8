//! The `k_alpha` multiplier calculus and the Korteweg force.
//!
//! `k_alpha` has symbol `alpha / sqrt(alpha^2 + |k|^2)`; its square inverts the
//! screened Poisson operator `(alpha^2 - Lap) / alpha^2`.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::spectral::{dealiased_products, inverse_vec, Grid, RealField, SpectralField};

/// Relaxation parameter `alpha`, finite and strictly positive.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize)]
pub struct RelaxationParam(f64);

impl RelaxationParam {
    pub fn new(alpha: f64) -> Result<Self> {
        if alpha.is_finite() && alpha > 0.0 {
            Ok(RelaxationParam(alpha))
        } else {
            Err(Error::InvalidParameter {
                name: "alpha",
                value: alpha,
                reason: "must be finite and > 0",
            })
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }

    /// Symbol of `k_alpha` at `|k|^2 = ksq`.
    #[inline]
    pub fn k_symbol(self, ksq: f64) -> f64 {
        self.0 / (self.0 * self.0 + ksq).sqrt()
    }

    /// Symbol of `k_alpha^2` at `|k|^2 = ksq`.
    #[inline]
    pub fn k_sq_symbol(self, ksq: f64) -> f64 {
        let a2 = self.0 * self.0;
        a2 / (a2 + ksq)
    }
}

pub fn apply_k_alpha(f: &SpectralField, alpha: RelaxationParam) -> SpectralField {
    f.apply_radial_symbol(|ksq| alpha.k_symbol(ksq))
}

/// Screened Poisson solution `c = k_alpha^2 rho`, i.e. `alpha^2 c - Lap c = alpha^2 rho`.
pub fn apply_k_alpha_sq(f: &SpectralField, alpha: RelaxationParam) -> SpectralField {
    f.apply_radial_symbol(|ksq| alpha.k_sq_symbol(ksq))
}

/// `(k_alpha^2 - I) f`, with symbol `-|k|^2 / (alpha^2 + |k|^2)`.
pub fn relaxation_residual(f: &SpectralField, alpha: RelaxationParam) -> SpectralField {
    let a2 = alpha.get() * alpha.get();
    f.apply_radial_symbol(|ksq| -ksq / (a2 + ksq))
}

/// Orthogonal projection onto divergence-free fields. The zero mode is untouched.
pub fn leray_project(u: &[SpectralField]) -> Vec<SpectralField> {
    let grid = u[0].grid().clone();
    let dim = grid.dim();
    let mut out: Vec<SpectralField> = u.to_vec();
    let ksq = grid.k_squared();
    let mut k = [0.0; 3];
    for (flat, &ksq) in ksq.iter().enumerate() {
        if ksq == 0.0 {
            continue;
        }
        let mut dot = Complex64::default();
        for (axis, ka) in k.iter_mut().enumerate().take(dim) {
            // Nyquist components are dropped by odd derivatives, so the
            // divergence never sees them; project with the same convention.
            *ka = if grid.modes()[grid.axis_index(flat, axis)] == -(grid.n() as i64 / 2) {
                0.0
            } else {
                grid.wavenumber_at(flat, axis)
            };
            dot += u[axis].coeffs()[flat] * *ka;
        }
        let kk: f64 = k[..dim].iter().map(|v| v * v).sum();
        if kk == 0.0 {
            continue;
        }
        for (axis, comp) in out.iter_mut().enumerate() {
            comp.coeffs_mut()[flat] -= dot * (k[axis] / kk);
        }
    }
    out
}

/// Which capillarity term the momentum equation carries.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Capillarity {
    /// `-kappa grad(rho) k_alpha^2 Lap rho`
    Nonlocal(RelaxationParam),
    /// `-kappa grad(rho) Lap rho`
    Local,
}

impl Capillarity {
    /// The operator applied to `Lap rho` before multiplying by `grad rho`.
    pub fn smooth(&self, f: &SpectralField) -> SpectralField {
        match self {
            Capillarity::Nonlocal(alpha) => apply_k_alpha_sq(f, *alpha),
            Capillarity::Local => f.clone(),
        }
    }
}

fn check_kappa(kappa: f64) -> Result<()> {
    if kappa.is_finite() && kappa >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            name: "kappa",
            value: kappa,
            reason: "must be finite and >= 0",
        })
    }
}

/// `-kappa P(coeff_i * S curvature)`, the Korteweg force with `curvature = Lap rho`
/// and `coeff = grad rho`. Returns dealiased coefficients, one per axis.
pub(crate) fn korteweg_force_hat(
    curvature: &SpectralField,
    coeff: &[RealField],
    kappa: f64,
    mode: Capillarity,
) -> Vec<SpectralField> {
    let grid = curvature.grid();
    if kappa == 0.0 {
        return vec![SpectralField::zeros(grid); grid.dim()];
    }
    let lap = mode.smooth(curvature).inverse();
    dealiased_products(&lap, coeff)
        .into_iter()
        .map(|f| f.scaled(-kappa))
        .collect()
}

/// Korteweg force `-kappa (d_i rho) (S Lap rho)` with `S = k_alpha^2` or `I`.
pub fn korteweg_force(rho: &RealField, kappa: f64, mode: Capillarity) -> Result<Vec<RealField>> {
    check_kappa(kappa)?;
    let rho_hat = rho.forward();
    let grad = rho_hat.physical_gradient();
    Ok(inverse_vec(&korteweg_force_hat(
        &rho_hat.laplacian(),
        &grad,
        kappa,
        mode,
    )))
}

/// One operator-bound relation checked over random fields.
#[derive(Clone, Debug, Serialize)]
pub struct OperatorCheck {
    pub name: String,
    /// Largest observed `lhs / rhs` (bounds) or relative defect (identities).
    pub worst: f64,
    pub limit: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct OperatorCheckReport {
    pub n: usize,
    pub alpha: f64,
    pub trials: usize,
    pub seed: u64,
    pub checks: Vec<OperatorCheck>,
}

impl OperatorCheckReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Relative slack allowed on inequalities that are exact per mode.
const BOUND_SLACK: f64 = 1e-12;

/// Runs the `k_alpha` operator inequalities and identities over `trials`
/// random band-limited fields on a 2D `n x n` grid.
pub fn check_operator_bounds(
    n: usize,
    alpha: RelaxationParam,
    trials: usize,
    seed: u64,
) -> Result<OperatorCheckReport> {
    let grid = Grid::new(2, n, 2.0 * std::f64::consts::PI)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = alpha.get();

    let mut names: Vec<String> = Vec::new();
    let mut worst: Vec<f64> = Vec::new();
    let mut limits: Vec<f64> = Vec::new();
    let mut record = |name: String, value: f64, limit: f64| {
        if let Some(i) = names.iter().position(|n| *n == name) {
            worst[i] = worst[i].max(value);
        } else {
            names.push(name);
            worst.push(value);
            limits.push(limit);
        }
    };

    for _ in 0..trials {
        let f = SpectralField::random_band_limited(&grid, n / 3, &mut rng);
        let g = SpectralField::random_band_limited(&grid, n / 3, &mut rng);

        for s in [0.0, 1.0, 2.0, 3.0] {
            let lhs = apply_k_alpha(&f, alpha).sobolev_norm(s);
            let rhs = f.sobolev_norm(s);
            record(format!("non-expansive H^{s}"), lhs / rhs, 1.0 + BOUND_SLACK);

            let k2 = apply_k_alpha_sq(&f, alpha);
            let grad_sq: f64 = k2
                .gradient()
                .iter()
                .map(|c| c.sobolev_norm(s).powi(2))
                .sum();
            record(
                format!("gradient bound H^{s}"),
                grad_sq.sqrt() / (a * rhs),
                1.0 + BOUND_SLACK,
            );

            let resid = relaxation_residual(&f, alpha).sobolev_norm(s);
            for l in [0.0, 0.5, 1.0, 2.0] {
                let bound = a.powf(-l) * f.sobolev_norm(s + l);
                record(
                    format!("approximation bound H^{s}, l={l}"),
                    resid / bound,
                    1.0 + BOUND_SLACK,
                );
            }
        }

        let lhs = apply_k_alpha(&f, alpha).l2_inner(&g)?;
        let rhs = f.l2_inner(&apply_k_alpha(&g, alpha))?;
        record(
            "self-adjoint".into(),
            (lhs - rhs).abs() / (f.norm_l2() * g.norm_l2()),
            1e-12,
        );

        let left = relaxation_residual(&f, alpha);
        let right = apply_k_alpha_sq(&f.laplacian(), alpha).scaled(1.0 / (a * a));
        let scale = left.max_abs().max(f64::MIN_POSITIVE);
        let defect = left
            .coeffs()
            .iter()
            .zip(right.coeffs())
            .map(|(x, y)| (x - y).norm())
            .fold(0.0, f64::max);
        record("multiplier identity".into(), defect / scale, 1e-14);
    }

    let checks = names
        .into_iter()
        .zip(worst)
        .zip(limits)
        .map(|((name, worst), limit)| OperatorCheck {
            passed: worst <= limit,
            name,
            worst,
            limit,
        })
        .collect();
    Ok(OperatorCheckReport {
        n,
        alpha: a,
        trials,
        seed,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::divergence;
    use std::f64::consts::PI;

    fn grid() -> Grid {
        Grid::new(2, 16, 2.0 * PI).unwrap()
    }

    fn alpha(a: f64) -> RelaxationParam {
        RelaxationParam::new(a).unwrap()
    }

    #[test]
    fn relaxation_param_validation() {
        assert!(RelaxationParam::new(0.0).is_err());
        assert!(RelaxationParam::new(-2.0).is_err());
        assert!(RelaxationParam::new(f64::INFINITY).is_err());
        assert!(RelaxationParam::new(f64::NAN).is_err());
    }

    #[test]
    fn k_alpha_symbol_values() {
        let g = grid();
        let f = RealField::from_fn(&g, |x| x[0].cos()).forward();
        let out = apply_k_alpha(&f, alpha(1.0));
        let ratio = out.coeff(&[1, 0]).re / f.coeff(&[1, 0]).re;
        assert!((ratio - 1.0 / 2f64.sqrt()).abs() < 1e-15);

        let c = RealField::constant(&g, 2.5).forward();
        assert_eq!(apply_k_alpha(&c, alpha(1.0)), c);

        let big = apply_k_alpha(&f, alpha(1e6));
        let ratio = big.coeff(&[1, 0]).re / f.coeff(&[1, 0]).re;
        assert!((ratio - 1.0).abs() < 1e-12);
    }

    #[test]
    fn screened_poisson() {
        let g = grid();
        let rho = RealField::from_fn(&g, |x| x[0].cos());
        let c = apply_k_alpha_sq(&rho.forward(), alpha(1.0)).inverse();
        assert!((&c - &rho.scaled(0.5)).max_abs() < 1e-14);

        let k = RealField::constant(&g, 1.7).forward();
        assert_eq!(apply_k_alpha_sq(&k, alpha(3.0)), k);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for a in [0.5, 4.0, 32.0] {
            let r = SpectralField::random_band_limited(&g, 5, &mut rng);
            let c = apply_k_alpha_sq(&r, alpha(a));
            let mut resid = c.scaled(a * a);
            resid.axpy(-1.0, &c.laplacian());
            resid.axpy(-a * a, &r);
            assert!(resid.norm_l2() <= 1e-10 * a * a * r.norm_l2());
        }
    }

    #[test]
    fn relaxation_residual_values() {
        let g = grid();
        let f = RealField::from_fn(&g, |x| x[0].cos());
        let r = relaxation_residual(&f.forward(), alpha(1.0)).inverse();
        assert!((&r - &f.scaled(-0.5)).max_abs() < 1e-14);
        let c = RealField::constant(&g, 4.0).forward();
        assert_eq!(relaxation_residual(&c, alpha(2.0)).max_abs(), 0.0);
    }

    #[test]
    fn approximation_bound_on_random_fields() {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let f = SpectralField::random_band_limited(&g, 5, &mut rng);
            for a in [1.0, 3.0, 10.0] {
                for s in [0.0, 1.0, 2.0] {
                    for l in [0.0, 1.0, 2.0] {
                        let lhs = relaxation_residual(&f, alpha(a)).sobolev_norm(s);
                        let rhs = a.powf(-l) * f.sobolev_norm(s + l);
                        assert!(lhs <= rhs * (1.0 + 1e-12), "a={a} s={s} l={l}");
                    }
                }
            }
        }
    }

    #[test]
    fn leray_annihilates_gradients() {
        let g = grid();
        let phi = RealField::from_fn(&g, |x| (x[0] + x[1]).sin()).forward();
        let grad = phi.gradient();
        let p = leray_project(&grad);
        assert!(p.iter().all(|c| c.max_abs() < 1e-15));

        let u = vec![
            RealField::from_fn(&g, |x| x[0].sin()).forward(),
            SpectralField::zeros(&g),
        ];
        let p = leray_project(&u);
        assert!(p.iter().all(|c| c.max_abs() < 1e-15));
    }

    #[test]
    fn leray_keeps_solenoidal_fields() {
        let g = grid();
        // psi = sin x sin y, u = (-d_y psi, d_x psi)
        let u = vec![
            RealField::from_fn(&g, |x| -x[0].sin() * x[1].cos()).forward(),
            RealField::from_fn(&g, |x| x[0].cos() * x[1].sin()).forward(),
        ];
        let p = leray_project(&u);
        for (a, b) in p.iter().zip(&u) {
            assert!((a - b).max_abs() < 1e-15);
        }
    }

    #[test]
    fn leray_output_is_divergence_free_and_idempotent() {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u: Vec<SpectralField> = (0..2)
            .map(|_| SpectralField::random_band_limited(&g, 7, &mut rng))
            .collect();
        let p = leray_project(&u);
        assert!(divergence(&p).norm_l2() < 1e-12 * p[0].norm_l2());
        let pp = leray_project(&p);
        for (a, b) in pp.iter().zip(&p) {
            assert!((a - b).max_abs() < 1e-15);
        }
        // zero mode untouched
        assert_eq!(p[0].coeff(&[0, 0]), u[0].coeff(&[0, 0]));
    }

    #[test]
    fn korteweg_force_trivial_cases() {
        let g = grid();
        let rho = RealField::from_fn(&g, |x| 1.0 + 0.1 * x[0].cos() * x[1].cos());
        let f = korteweg_force(&rho, 0.0, Capillarity::Local).unwrap();
        assert!(f.iter().all(|c| c.max_abs() == 0.0));
        let flat = RealField::constant(&g, 1.3);
        let f = korteweg_force(&flat, 2.0, Capillarity::Nonlocal(alpha(4.0))).unwrap();
        assert!(f.iter().all(|c| c.max_abs() < 1e-15));
        assert!(korteweg_force(&rho, -1.0, Capillarity::Local).is_err());
    }

    #[test]
    fn korteweg_force_matches_closed_form() {
        // rho = cos x: grad rho = (-sin x, 0), Lap rho = -cos x
        // local force_x = -kappa * (-sin x)(-cos x) = -kappa sin x cos x
        let g = grid();
        let rho = RealField::from_fn(&g, |x| x[0].cos());
        let f = korteweg_force(&rho, 2.0, Capillarity::Local).unwrap();
        let expected = RealField::from_fn(&g, |x| -2.0 * x[0].sin() * x[0].cos());
        assert!((&f[0] - &expected).max_abs() < 1e-13);
        assert!(f[1].max_abs() < 1e-15);
        // nonlocal: k_alpha^2 scales the |k|=1 mode by a^2/(a^2+1)
        let a = 3.0;
        let f = korteweg_force(&rho, 2.0, Capillarity::Nonlocal(alpha(a))).unwrap();
        let expected = expected.scaled(a * a / (a * a + 1.0));
        assert!((&f[0] - &expected).max_abs() < 1e-13);
    }

    #[test]
    fn nonlocal_force_gap_decays_like_alpha_minus_two() {
        let g = Grid::new(2, 32, 2.0 * PI).unwrap();
        let rho = RealField::from_fn(&g, |x| 1.0 + 0.1 * x[0].cos() * x[1].cos());
        let local = korteweg_force(&rho, 1.0, Capillarity::Local).unwrap();
        let gaps: Vec<f64> = [4.0, 8.0, 16.0, 32.0]
            .iter()
            .map(|&a| {
                let nl = korteweg_force(&rho, 1.0, Capillarity::Nonlocal(alpha(a))).unwrap();
                nl.iter()
                    .zip(&local)
                    .map(|(x, y)| (x - y).norm_l2().powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        for w in gaps.windows(2) {
            let ratio = w[0] / w[1];
            // |k|^2 = 2 on every mode of Lap rho: gap ∝ 2/(a^2+2)
            assert!(ratio > 3.6 && ratio < 4.01, "ratio {ratio}");
        }
    }

    #[test]
    fn operator_suite_passes() {
        let report = check_operator_bounds(16, alpha(4.0), 10, 1).unwrap();
        for c in &report.checks {
            assert!(c.passed, "{c:?}");
        }
        assert!(report.checks.len() > 10);
    }
}
