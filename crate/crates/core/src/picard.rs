//! Linearized fixed-point iteration for the capillary system.
//!
//! Every iterate lives on one shared time mesh so successive iterates can be
//! compared pointwise in time. Within a sweep the velocity and the auxiliary
//! gradient `eta` are co-advanced first, with the previous iterate frozen as
//! coefficients, and the density is then transported by the new velocity.

use crate::dynamics::{
    advect, advect_many, check_state, inverse_density, physical_gradient, physical_gradients,
    project_acceleration, project_velocity, rk4, Bundle, FlowState, PhysParams,
};
use crate::error::{Error, Result};
use crate::nonlocal::korteweg_force_hat;
use crate::spectral::{divergence, forward_vec, inverse_vec, RealField, SpectralField};

/// One Picard iterate sampled on the time mesh.
#[derive(Clone, Debug)]
pub struct PicardIterate {
    pub index: usize,
    pub times: Vec<f64>,
    pub rho: Vec<RealField>,
    pub u: Vec<Vec<RealField>>,
    pub eta: Vec<Vec<RealField>>,
}

impl PicardIterate {
    /// The zeroth iterate: `init` held constant on `steps + 1` equally spaced
    /// times covering `[0, horizon]`, with `eta = grad rho`.
    pub fn constant(init: &FlowState, horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidParameter {
                name: "horizon",
                value: horizon,
                reason: "must be finite and > 0",
            });
        }
        if steps == 0 {
            return Err(Error::InvalidParameter {
                name: "steps",
                value: 0.0,
                reason: "need at least one time step",
            });
        }
        let eta = physical_gradient(&init.rho.forward());
        let count = steps + 1;
        Ok(PicardIterate {
            index: 0,
            times: (0..count)
                .map(|k| init.time + horizon * k as f64 / steps as f64)
                .collect(),
            rho: vec![init.rho.clone(); count],
            u: vec![init.u.clone(); count],
            eta: vec![eta; count],
        })
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn dt(&self) -> f64 {
        self.times[1] - self.times[0]
    }

    /// Snapshot `k` as a [`FlowState`] carrying `eta`.
    pub fn state(&self, k: usize) -> FlowState {
        FlowState {
            rho: self.rho[k].clone(),
            u: self.u[k].clone(),
            pi: RealField::zeros(self.rho[k].grid()),
            eta: Some(self.eta[k].clone()),
            time: self.times[k],
        }
    }

    /// `sup_t (||d rho||^2 + ||d u||^2 + ||d eta||^2)` against `other`.
    pub fn distance_sq(&self, other: &PicardIterate) -> f64 {
        (0..self.times.len())
            .map(|k| {
                let mut x = (&self.rho[k] - &other.rho[k]).norm_l2().powi(2);
                for (a, b) in self.u[k].iter().zip(&other.u[k]) {
                    x += (a - b).norm_l2().powi(2);
                }
                for (a, b) in self.eta[k].iter().zip(&other.eta[k]) {
                    x += (a - b).norm_l2().powi(2);
                }
                x
            })
            .fold(0.0, f64::max)
    }
}

/// Cubic Lagrange weights for the midpoint of step `k` on a mesh with `steps`
/// steps, as `(first node, weights)`. Falls back to lower order on short meshes.
fn midpoint_stencil(k: usize, steps: usize) -> (usize, Vec<f64>) {
    let width = (steps + 1).min(4);
    let first = (k + 1).saturating_sub(width / 2).min(steps + 1 - width);
    let x = k as f64 + 0.5;
    let weights = (0..width)
        .map(|i| {
            let xi = (first + i) as f64;
            (0..width)
                .filter(|&j| j != i)
                .map(|j| {
                    let xj = (first + j) as f64;
                    (x - xj) / (xi - xj)
                })
                .product()
        })
        .collect();
    (first, weights)
}

fn combine(fields: &[RealField], first: usize, weights: &[f64]) -> RealField {
    let mut out = fields[first].scaled(weights[0]);
    for (i, w) in weights.iter().enumerate().skip(1) {
        out.axpy(*w, &fields[first + i]);
    }
    out
}

/// Samples a mesh-indexed field at the start, midpoint and end of step `k`.
struct Sampler {
    first: usize,
    weights: Vec<f64>,
    k: usize,
}

impl Sampler {
    fn new(k: usize, steps: usize) -> Self {
        let (first, weights) = midpoint_stencil(k, steps);
        Sampler { first, weights, k }
    }

    /// `stage` is 0 (start), 1 (midpoint) or 2 (end).
    fn at(&self, fields: &[RealField], stage: usize) -> RealField {
        match stage {
            0 => fields[self.k].clone(),
            1 => combine(fields, self.first, &self.weights),
            _ => fields[self.k + 1].clone(),
        }
    }

    fn at_vec(&self, fields: &[Vec<RealField>], stage: usize) -> Vec<RealField> {
        let dim = fields[0].len();
        (0..dim)
            .map(|i| {
                let comp: Vec<RealField> = fields.iter().map(|f| f[i].clone()).collect();
                self.at(&comp, stage)
            })
            .collect()
    }
}

/// Frozen coefficients of one RK4 stage.
struct Frozen {
    inv_rho: RealField,
    u: Vec<RealField>,
    eta: Vec<RealField>,
}

fn stage_index(t: f64, t0: f64, dt: f64) -> usize {
    let s = (t - t0) / dt;
    if s < 0.25 {
        0
    } else if s < 0.75 {
        1
    } else {
        2
    }
}

/// Tendencies of the linear velocity/eta system with frozen coefficients.
fn velocity_eta_rhs(
    u: &[RealField],
    eta: &[RealField],
    frozen: &Frozen,
    params: &PhysParams,
    guess: Option<&SpectralField>,
) -> Result<(Vec<RealField>, Vec<RealField>, SpectralField)> {
    let u_hat = forward_vec(u);
    let grad_u = physical_gradients(&u_hat);
    let adv = advect_many(&frozen.u, &grad_u);
    let curvature = divergence(&forward_vec(eta));
    let force = korteweg_force_hat(
        &curvature,
        &frozen.eta,
        params.effective_kappa(),
        params.capillarity(),
    );
    let (du_hat, pressure) = project_acceleration(&u_hat, &adv, &force, &frozen.inv_rho, guess)?;
    let deta = crate::dynamics::eta_rhs_general(&frozen.u, &grad_u, &frozen.eta, eta);
    Ok((inverse_vec(&du_hat), deta, pressure.pi_hat))
}

/// Computes iterate `n + 1` from iterate `n` on the same mesh.
pub fn linearized_step(prev: &PicardIterate, params: &PhysParams) -> Result<PicardIterate> {
    let steps = prev.steps();
    let dt = prev.dt();
    let dim = prev.u[0].len();
    let grid = prev.rho[0].grid().clone();
    if dim != grid.dim() {
        return Err(Error::GridMismatch);
    }

    let inv_rho: Vec<RealField> = prev
        .rho
        .iter()
        .map(inverse_density)
        .collect::<Result<_>>()?;

    let mut u = vec![prev.u[0].clone()];
    let mut eta = vec![prev.eta[0].clone()];
    let mut pi_hat: Option<SpectralField> = None;
    for k in 0..steps {
        let sampler = Sampler::new(k, steps);
        let frozen: Vec<Frozen> = (0..3)
            .map(|s| Frozen {
                inv_rho: sampler.at(&inv_rho, s),
                u: sampler.at_vec(&prev.u, s),
                eta: sampler.at_vec(&prev.eta, s),
            })
            .collect();
        let mut fields = u[k].clone();
        fields.extend(eta[k].iter().cloned());
        let y0 = Bundle {
            fields,
            scalars: Vec::new(),
        };
        let t0 = prev.times[k];
        let y1 = rk4(&y0, t0, dt, |t, y| {
            let f = &frozen[stage_index(t, t0, dt)];
            let (du, deta, p) = velocity_eta_rhs(
                &y.fields[..dim],
                &y.fields[dim..],
                f,
                params,
                pi_hat.as_ref(),
            )?;
            pi_hat = Some(p);
            let mut fields = du;
            fields.extend(deta);
            Ok(Bundle {
                fields,
                scalars: Vec::new(),
            })
        })?;
        let mut fields = y1.fields;
        let next_eta = fields.split_off(dim);
        u.push(project_velocity(&fields));
        eta.push(next_eta);
    }

    let mut rho = vec![prev.rho[0].clone()];
    for k in 0..steps {
        let sampler = Sampler::new(k, steps);
        let vel: Vec<Vec<RealField>> = (0..3).map(|s| sampler.at_vec(&u, s)).collect();
        let y0 = Bundle {
            fields: vec![rho[k].clone()],
            scalars: Vec::new(),
        };
        let t0 = prev.times[k];
        let y1 = rk4(&y0, t0, dt, |t, y| {
            let w = &vel[stage_index(t, t0, dt)];
            let grad = physical_gradient(&y.fields[0].forward());
            Ok(Bundle {
                fields: vec![advect(w, &grad).scaled(-1.0).inverse()],
                scalars: Vec::new(),
            })
        })?;
        let next = y1.fields.into_iter().next().expect("density");
        let state = FlowState {
            rho: next,
            u: u[k + 1].clone(),
            pi: RealField::zeros(&grid),
            eta: Some(eta[k + 1].clone()),
            time: prev.times[k + 1],
        };
        check_state(&state)?;
        rho.push(state.rho);
    }

    Ok(PicardIterate {
        index: prev.index + 1,
        times: prev.times.clone(),
        rho,
        u,
        eta,
    })
}

/// Mesh and stopping rule for [`picard_solve`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PicardConfig {
    pub horizon: f64,
    /// Upper bound on the mesh step; the mesh uses `ceil(horizon / dt)` equal steps.
    pub dt: f64,
    /// Stop once `sup_t X^n <= tol`.
    pub tol: f64,
    pub max_iter: usize,
}

/// Consecutive ratios above one that raise the non-contraction flag.
pub const NON_CONTRACTION_RUN: usize = 3;

/// History of the contraction metric `X^n = sup_t (||d rho||^2 + ||d u||^2 + ||d eta||^2)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ContractionReport {
    /// `x_sequence[i]` compares iterate `i + 1` with iterate `i`.
    pub x_sequence: Vec<f64>,
    /// `ratios[i] = x_sequence[i + 1] / x_sequence[i]`.
    pub ratios: Vec<f64>,
    pub converged: bool,
    pub non_contraction: bool,
    /// Set when an iterate could not be computed (blow-up or pressure failure).
    pub failure: Option<String>,
}

impl ContractionReport {
    /// One-based iteration at which `X^n` first drops to `threshold` or below.
    pub fn first_iteration_below(&self, threshold: f64) -> Option<usize> {
        self.x_sequence
            .iter()
            .position(|&x| x <= threshold)
            .map(|i| i + 1)
    }

    /// One-based index into `ratios` of the first ratio below one.
    pub fn first_contracting_ratio(&self) -> Option<usize> {
        self.ratios.iter().position(|&r| r < 1.0).map(|i| i + 1)
    }
}

/// Iterates [`linearized_step`] from the constant-in-time iterate until
/// `sup_t X^n <= tol`, `max_iter` sweeps, or non-contraction.
pub fn picard_solve(
    init: &FlowState,
    params: &PhysParams,
    config: &PicardConfig,
) -> Result<(PicardIterate, ContractionReport)> {
    if config.tol.is_nan() || config.tol <= 0.0 {
        return Err(Error::InvalidParameter {
            name: "tol",
            value: config.tol,
            reason: "must be > 0",
        });
    }
    if !(config.dt.is_finite() && config.dt > 0.0) {
        return Err(Error::InvalidParameter {
            name: "dt",
            value: config.dt,
            reason: "must be finite and > 0",
        });
    }
    if config.max_iter == 0 {
        return Err(Error::InvalidParameter {
            name: "max_iter",
            value: 0.0,
            reason: "need at least one iteration",
        });
    }
    let steps = (config.horizon / config.dt - 1e-9).ceil().max(1.0) as usize;
    let mut current = PicardIterate::constant(init, config.horizon, steps)?;
    let mut report = ContractionReport::default();
    let mut above_one = 0;
    for _ in 0..config.max_iter {
        let next = match linearized_step(&current, params) {
            Ok(next) => next,
            Err(e @ (Error::InvariantViolation { .. } | Error::PressureNotConverged { .. })) => {
                report.failure = Some(e.to_string());
                report.non_contraction = true;
                break;
            }
            Err(e) => return Err(e),
        };
        let x = next.distance_sq(&current);
        if let Some(&last) = report.x_sequence.last() {
            let ratio = if last > 0.0 { x / last } else { 0.0 };
            report.ratios.push(ratio);
            // NaN compares false, so count it explicitly.
            if ratio > 1.0 || ratio.is_nan() {
                above_one += 1;
            } else {
                above_one = 0;
            }
        }
        report.x_sequence.push(x);
        current = next;
        if x <= config.tol {
            report.converged = true;
            break;
        }
        if !x.is_finite() || above_one >= NON_CONTRACTION_RUN {
            report.non_contraction = true;
            break;
        }
    }
    Ok((current, report))
}

/// `max_t ||eta - grad rho||_{L2}` over the iterate's time mesh.
pub fn eta_consistency(iterate: &PicardIterate) -> f64 {
    iterate
        .rho
        .iter()
        .zip(&iterate.eta)
        .map(|(rho, eta)| {
            physical_gradient(&rho.forward())
                .iter()
                .zip(eta)
                .map(|(g, e)| (e - g).norm_l2().powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{simulate, DtPolicy, SimulateOptions, System};
    use crate::spectral::Grid;
    use std::f64::consts::PI;

    fn grid(n: usize) -> Grid {
        Grid::new(2, n, 2.0 * PI).unwrap()
    }

    fn params(system: System) -> PhysParams {
        PhysParams::new(system, 1.0, 16.0, 1.0).unwrap()
    }

    #[test]
    fn midpoint_weights_match_cubic_lagrange() {
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-15);
        let (f, w) = midpoint_stencil(0, 10);
        assert_eq!(f, 0);
        assert!(close(&w, &[0.3125, 0.9375, -0.3125, 0.0625]));
        let (f, w) = midpoint_stencil(4, 10);
        assert_eq!(f, 3);
        assert!(close(
            &w,
            &[-1.0 / 16.0, 9.0 / 16.0, 9.0 / 16.0, -1.0 / 16.0]
        ));
        let (f, w) = midpoint_stencil(9, 10);
        assert_eq!(f, 7);
        assert!(close(&w, &[0.0625, -0.3125, 0.9375, 0.3125]));
        let (f, w) = midpoint_stencil(0, 1);
        assert_eq!(f, 0);
        assert!(close(&w, &[0.5, 0.5]));
        for steps in 1..8 {
            for k in 0..steps {
                let (_, w) = midpoint_stencil(k, steps);
                assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn equilibrium_is_a_fixed_point() {
        let g = grid(16);
        let init =
            FlowState::new(RealField::constant(&g, 1.3), vec![RealField::zeros(&g); 2]).unwrap();
        let prev = PicardIterate::constant(&init, 0.01, 4).unwrap();
        let next = linearized_step(&prev, &params(System::RelaxedInsk)).unwrap();
        assert_eq!(next.index, 1);
        assert!(next.distance_sq(&prev) < 1e-28);

        let cfg = PicardConfig {
            horizon: 0.01,
            dt: 0.0025,
            tol: 1e-20,
            max_iter: 5,
        };
        let (_, report) = picard_solve(&init, &params(System::RelaxedInsk), &cfg).unwrap();
        assert!(report.converged);
        assert_eq!(report.x_sequence.len(), 1);
    }

    #[test]
    fn first_iterate_is_divergence_free() {
        let g = grid(16);
        let init = FlowState::taylor_green(&g, 1.0, 0.2).unwrap();
        let prev = PicardIterate::constant(&init, 0.01, 4).unwrap();
        let next = linearized_step(&prev, &params(System::RelaxedInsk)).unwrap();
        for k in 0..next.times.len() {
            assert!(next.state(k).divergence_norm() < 1e-8);
        }
        assert!(next.distance_sq(&prev) > 0.0);
    }

    #[test]
    fn eta_consistency_cases() {
        let g = grid(32);
        let init = FlowState::taylor_green(&g, 1.0, 0.2).unwrap();
        let mut it = PicardIterate::constant(&init, 0.01, 2).unwrap();
        assert_eq!(eta_consistency(&it), 0.0);
        let delta = 1e-3;
        let bump = RealField::from_fn(&g, |x| delta * x[0].sin());
        it.eta[1][0].axpy(1.0, &bump);
        let c = eta_consistency(&it);
        assert!((c - delta * PI * 2f64.sqrt()).abs() < 1e-12 * c.max(1.0));
    }

    #[test]
    fn iterates_contract_onto_the_direct_solution() {
        let g = grid(24);
        let init = FlowState::taylor_green(&g, 1.0, 0.2).unwrap();
        let p = params(System::RelaxedInsk);
        let cfg = PicardConfig {
            horizon: 0.02,
            dt: 0.002,
            tol: 1e-24,
            max_iter: 30,
        };
        let (fixed, report) = picard_solve(&init, &p, &cfg).unwrap();
        assert!(report.converged, "{report:?}");
        assert!(!report.non_contraction);
        assert!(report.x_sequence.iter().all(|x| *x >= 0.0 && x.is_finite()));
        assert!(report.first_contracting_ratio().unwrap() <= 3);

        let opts = SimulateOptions {
            t_end: cfg.horizon,
            dt_policy: DtPolicy::Fixed(cfg.dt),
            frames: fixed.steps(),
            norm_ceiling: 1e8,
        };
        let direct = simulate(&init, &p, &opts, &mut []).unwrap();
        let mut gap: f64 = 0.0;
        for (k, frame) in direct.frames.iter().enumerate() {
            let mut d = (&frame.rho - &fixed.rho[k]).norm_l2();
            d += frame
                .u
                .iter()
                .zip(&fixed.u[k])
                .map(|(a, b)| (a - b).norm_l2().powi(2))
                .sum::<f64>()
                .sqrt();
            gap = gap.max(d);
        }
        assert!(gap < 1e-8, "gap {gap:e}");
        let grad0 = physical_gradient(&init.rho.forward())
            .iter()
            .map(|f| f.norm_l2().powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(eta_consistency(&fixed) <= 1e-6 * grad0);
    }

    #[test]
    fn large_horizon_does_not_crash() {
        let g = grid(16);
        let init = FlowState::taylor_green(&g, 1.0, 0.6).unwrap();
        let p = PhysParams::new(System::RelaxedInsk, 50.0, 16.0, 1.0).unwrap();
        let cfg = PicardConfig {
            horizon: 2.0,
            dt: 0.05,
            tol: 1e-30,
            max_iter: 8,
        };
        let (_, report) = picard_solve(&init, &p, &cfg).unwrap();
        assert!(!report.converged || report.x_sequence.len() <= 8);
    }
}
