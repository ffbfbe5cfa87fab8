//! Right-hand sides and explicit time integration for the relaxed INSK
//! system and its two limit systems (local INSK, inhomogeneous Navier-Stokes).
//!
//! Every system shares the variable-density incompressible core
//!
//! ```text
//! d_t rho + u . grad rho = 0
//! d_t u = -(u . grad) u + rho^-1 (Lap u + F - grad pi),   div u = 0
//! ```
//!
//! and differs only in the capillary force `F`. Viscosity is fixed to 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nonlocal::{
    apply_k_alpha, korteweg_force_hat, leray_project, Capillarity, RelaxationParam,
};
use crate::spectral::{
    dealiased_products, divergence, forward_vec, gradient_norm_sq, inverse_vec, Grid, RealField,
    SpectralField,
};

pub const VISCOSITY: f64 = 1.0;

/// Relative residual at which the pressure iteration stops.
pub const PRESSURE_TOLERANCE: f64 = 1e-10;
pub const PRESSURE_MAX_ITERATIONS: usize = 500;

const CFL_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum System {
    /// Nonlocal capillarity `-kappa grad(rho) k_alpha^2 Lap rho`.
    #[serde(rename = "RelaxedINSK")]
    RelaxedInsk,
    /// Local capillarity `-kappa grad(rho) Lap rho`.
    #[serde(rename = "LocalINSK")]
    LocalInsk,
    /// No capillarity.
    NavierStokes,
}

impl System {
    pub fn name(self) -> &'static str {
        match self {
            System::RelaxedInsk => "RelaxedINSK",
            System::LocalInsk => "LocalINSK",
            System::NavierStokes => "NavierStokes",
        }
    }
}

impl std::str::FromStr for System {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "relaxedinsk" | "relaxed" | "nonlocal" => Ok(System::RelaxedInsk),
            "localinsk" | "local" => Ok(System::LocalInsk),
            "navierstokes" | "ns" => Ok(System::NavierStokes),
            _ => Err(Error::Config(format!(
                "system: unknown system `{s}` (expected RelaxedINSK, LocalINSK or NavierStokes)"
            ))),
        }
    }
}

pub const DEFAULT_KAPPA_MAX: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PhysParams {
    pub kappa: f64,
    pub alpha: RelaxationParam,
    pub rho_bar: f64,
    pub system: System,
    /// Upper bound on admissible `kappa`.
    pub kappa_max: f64,
}

impl PhysParams {
    pub fn new(system: System, kappa: f64, alpha: f64, rho_bar: f64) -> Result<Self> {
        Self::with_kappa_max(system, kappa, alpha, rho_bar, DEFAULT_KAPPA_MAX)
    }

    pub fn with_kappa_max(
        system: System,
        kappa: f64,
        alpha: f64,
        rho_bar: f64,
        kappa_max: f64,
    ) -> Result<Self> {
        if !(kappa.is_finite() && kappa >= 0.0) {
            return Err(Error::InvalidParameter {
                name: "kappa",
                value: kappa,
                reason: "must be finite and >= 0",
            });
        }
        if kappa > kappa_max {
            return Err(Error::InvalidParameter {
                name: "kappa",
                value: kappa,
                reason: "exceeds the configured kappa_max",
            });
        }
        if !(rho_bar.is_finite() && rho_bar > 0.0) {
            return Err(Error::InvalidParameter {
                name: "rho_bar",
                value: rho_bar,
                reason: "must be finite and > 0",
            });
        }
        Ok(PhysParams {
            kappa,
            alpha: RelaxationParam::new(alpha)?,
            rho_bar,
            system,
            kappa_max,
        })
    }

    pub fn with_system(mut self, system: System) -> Self {
        self.system = system;
        self
    }

    /// Capillarity strength actually felt by the momentum equation.
    pub fn effective_kappa(&self) -> f64 {
        match self.system {
            System::NavierStokes => 0.0,
            _ => self.kappa,
        }
    }

    pub fn capillarity(&self) -> Capillarity {
        match self.system {
            System::LocalInsk => Capillarity::Local,
            _ => Capillarity::Nonlocal(self.alpha),
        }
    }
}

/// Density, velocity, pressure and (optionally) the auxiliary gradient `eta`
/// at one instant.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowState {
    pub rho: RealField,
    pub u: Vec<RealField>,
    pub pi: RealField,
    pub eta: Option<Vec<RealField>>,
    pub time: f64,
}

impl FlowState {
    pub fn new(rho: RealField, u: Vec<RealField>) -> Result<Self> {
        let grid = rho.grid().clone();
        if u.len() != grid.dim() {
            return Err(Error::InvalidGrid(format!(
                "velocity has {} components on a {}-dimensional grid",
                u.len(),
                grid.dim()
            )));
        }
        if u.iter().any(|c| *c.grid() != grid) {
            return Err(Error::GridMismatch);
        }
        if rho.min() <= 0.0 {
            return Err(Error::InvalidParameter {
                name: "rho",
                value: rho.min(),
                reason: "density must be strictly positive",
            });
        }
        Ok(FlowState {
            pi: RealField::zeros(&grid),
            rho,
            u,
            eta: None,
            time: 0.0,
        })
    }

    /// `rho = rho_bar + A cos x cos y`, `u = (sin x cos y, -cos x sin y)`;
    /// in 3D both are additionally multiplied by `cos z` and `u_z = 0`.
    pub fn taylor_green(grid: &Grid, rho_bar: f64, amplitude: f64) -> Result<Self> {
        let three = grid.dim() == 3;
        let zf = move |x: [f64; 3]| if three { x[2].cos() } else { 1.0 };
        let rho = RealField::from_fn(grid, |x| {
            rho_bar + amplitude * x[0].cos() * x[1].cos() * zf(x)
        });
        let mut u = vec![
            RealField::from_fn(grid, |x| x[0].sin() * x[1].cos() * zf(x)),
            RealField::from_fn(grid, |x| -x[0].cos() * x[1].sin() * zf(x)),
        ];
        if three {
            u.push(RealField::zeros(grid));
        }
        FlowState::new(rho, u)
    }

    /// Attaches `eta = grad rho`.
    pub fn with_eta(mut self) -> Self {
        self.eta = Some(physical_gradient(&self.rho.forward()));
        self
    }

    pub fn grid(&self) -> &Grid {
        self.rho.grid()
    }

    pub fn u_hat(&self) -> Vec<SpectralField> {
        forward_vec(&self.u)
    }

    /// `||div u||_{L2}`.
    pub fn divergence_norm(&self) -> f64 {
        divergence(&self.u_hat()).norm_l2()
    }

    /// `integral rho u dx`, one entry per axis.
    pub fn momentum(&self) -> Vec<f64> {
        self.u
            .iter()
            .map(|c| self.rho.pointwise_mul(c).integral())
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.rho.is_finite() && self.u.iter().all(|c| c.is_finite())
    }
}

pub(crate) fn physical_gradient(f: &SpectralField) -> Vec<RealField> {
    f.physical_gradient()
}

/// Physical gradients of several fields; `out[i][j] = d_j f_i`.
pub(crate) fn physical_gradients(fs: &[SpectralField]) -> Vec<Vec<RealField>> {
    let dim = fs[0].grid().dim();
    let all: Vec<SpectralField> = fs.iter().flat_map(|f| f.gradient()).collect();
    let mut phys = inverse_vec(&all).into_iter();
    (0..fs.len())
        .map(|_| phys.by_ref().take(dim).collect())
        .collect()
}

fn dot_fields(w: &[RealField], g: &[RealField]) -> RealField {
    let grid = w[0].grid();
    let mut acc = vec![0.0; grid.len()];
    for (wj, gj) in w.iter().zip(g) {
        for ((a, x), y) in acc.iter_mut().zip(wj.values()).zip(gj.values()) {
            *a += x * y;
        }
    }
    RealField::from_vec_unchecked(grid, acc)
}

/// `P(sum_j w_j d_j f)`: dealiased advection of `f` by the physical field `w`.
pub(crate) fn advect(w: &[RealField], grad_f: &[RealField]) -> SpectralField {
    let mut out = dot_fields(w, grad_f).forward();
    out.dealias_in_place();
    out
}

/// [`advect`] for several advected fields at once.
pub(crate) fn advect_many(w: &[RealField], grads: &[Vec<RealField>]) -> Vec<SpectralField> {
    let prods: Vec<RealField> = grads.iter().map(|g| dot_fields(w, g)).collect();
    let mut out = forward_vec(&prods);
    for f in &mut out {
        f.dealias_in_place();
    }
    out
}

/// `P(a * f_i)` for physical `a` and spectral `f_i`.
pub(crate) fn dealiased_mul(a: &RealField, fs: &[SpectralField]) -> Vec<SpectralField> {
    dealiased_products(a, &inverse_vec(fs))
}

/// Converged pressure and the matching dealiased `P(rho^-1 grad pi)`.
#[derive(Clone, Debug)]
pub struct PressureSolution {
    pub pi_hat: SpectralField,
    pub flux: Vec<SpectralField>,
    pub iterations: usize,
    pub residual: f64,
}

/// Solves `div P(rho^-1 grad pi) = P(div g)` for mean-zero `pi`, where `P` is
/// the 2/3-rule filter, by the fixed-point iteration
/// `pi <- Lap^-1 [rho_ref (div g - div P((rho^-1 - rho_ref^-1) grad pi))]`
/// with `rho_ref` the harmonic mean of the density bounds.
pub(crate) fn solve_pressure_hat(
    inv_rho: &RealField,
    div_g: &SpectralField,
    guess: Option<&SpectralField>,
) -> Result<PressureSolution> {
    let grid = inv_rho.grid().clone();
    let dim = grid.dim();
    let div_g = div_g.dealias();
    let target = div_g.norm_l2();
    if target == 0.0 {
        return Ok(PressureSolution {
            pi_hat: SpectralField::zeros(&grid),
            flux: vec![SpectralField::zeros(&grid); dim],
            iterations: 0,
            residual: 0.0,
        });
    }
    let (lo, hi) = (inv_rho.min(), inv_rho.max());
    let c = 0.5 * (lo + hi);
    let rho_ref = 1.0 / c;
    let variation = inv_rho.map(|v| v - c);
    let constant = variation.max_abs() <= 1e-15 * c;

    let mut pi = match guess {
        Some(g) => {
            let mut p = g.dealias();
            p.coeffs_mut()[0] = Default::default();
            p
        }
        None => SpectralField::zeros(&grid),
    };
    let mut iterations = 0;
    loop {
        let grad = pi.gradient();
        let mut flux = if constant {
            vec![SpectralField::zeros(&grid); dim]
        } else {
            dealiased_mul(&variation, &grad)
        };
        for (f, g) in flux.iter_mut().zip(&grad) {
            f.axpy(c, g);
        }
        let mut resid = div_g.clone();
        resid.axpy(-1.0, &divergence(&flux));
        let rel = resid.norm_l2() / target;
        if rel <= PRESSURE_TOLERANCE {
            return Ok(PressureSolution {
                pi_hat: pi,
                flux,
                iterations,
                residual: rel,
            });
        }
        if iterations == PRESSURE_MAX_ITERATIONS || !rel.is_finite() {
            return Err(Error::PressureNotConverged {
                iterations,
                residual: rel,
            });
        }
        pi.axpy(rho_ref, &resid.inverse_laplacian());
        iterations += 1;
    }
}

pub(crate) fn inverse_density(rho: &RealField) -> Result<RealField> {
    let min = rho.min();
    if min.is_nan() || min <= 0.0 {
        return Err(Error::InvalidParameter {
            name: "rho",
            value: min,
            reason: "density must be strictly positive",
        });
    }
    Ok(rho.map(|v| 1.0 / v))
}

/// Mean-zero pressure with `div(rho^-1 grad pi) = div g` on the dealiased band.
pub fn solve_pressure(rho: &RealField, g: &[RealField]) -> Result<RealField> {
    let inv_rho = inverse_density(rho)?;
    let g_hat = forward_vec(g);
    Ok(solve_pressure_hat(&inv_rho, &divergence(&g_hat), None)?
        .pi_hat
        .inverse())
}

/// Completes `d_t u = P(rho^-1 (Lap u + F)) - adv - P(rho^-1 grad pi)`.
pub(crate) fn project_acceleration(
    u_hat: &[SpectralField],
    adv_hat: &[SpectralField],
    force_hat: &[SpectralField],
    inv_rho: &RealField,
    guess: Option<&SpectralField>,
) -> Result<(Vec<SpectralField>, PressureSolution)> {
    let h: Vec<SpectralField> = u_hat
        .iter()
        .zip(force_hat)
        .map(|(u, f)| {
            let mut h = u.laplacian().scaled(VISCOSITY);
            h.axpy(1.0, f);
            h
        })
        .collect();
    let mut g = dealiased_mul(inv_rho, &h);
    for (gi, adv) in g.iter_mut().zip(adv_hat) {
        gi.axpy(-1.0, adv);
    }
    let pressure = solve_pressure_hat(inv_rho, &divergence(&g), guess)?;
    let du = g
        .into_iter()
        .zip(&pressure.flux)
        .map(|(mut g, f)| {
            g.axpy(-1.0, f);
            g
        })
        .collect();
    Ok((du, pressure))
}

/// Time derivatives of every evolved quantity at one state.
pub(crate) struct Rhs {
    pub drho: RealField,
    pub du: Vec<RealField>,
    pub deta: Option<Vec<RealField>>,
    pub pressure: PressureSolution,
    /// `||grad u||^2` at the evaluated state.
    pub dissipation_rate: f64,
}

pub(crate) fn evaluate_rhs(
    rho: &RealField,
    u: &[RealField],
    eta: Option<&[RealField]>,
    params: &PhysParams,
    guess: Option<&SpectralField>,
) -> Result<Rhs> {
    let rho_hat = rho.forward();
    let u_hat = forward_vec(u);
    let grad_rho = physical_gradient(&rho_hat);
    let grad_u = physical_gradients(&u_hat);
    let mut grads = grad_u.clone();
    grads.push(grad_rho.clone());
    let mut adv = advect_many(u, &grads);
    let drho_hat = adv.pop().expect("density advection");
    let force = korteweg_force_hat(
        &rho_hat.laplacian(),
        &grad_rho,
        params.effective_kappa(),
        params.capillarity(),
    );
    let inv_rho = inverse_density(rho)?;
    let (du_hat, pressure) = project_acceleration(&u_hat, &adv, &force, &inv_rho, guess)?;

    let deta = eta.map(|eta| eta_rhs_from(u, &grad_u, eta));
    let mut out = du_hat;
    out.push(drho_hat.scaled(-1.0));
    let mut phys = inverse_vec(&out);
    let drho = phys.pop().expect("density tendency");
    Ok(Rhs {
        drho,
        du: phys,
        deta,
        pressure,
        dissipation_rate: VISCOSITY * gradient_norm_sq(&u_hat),
    })
}

/// `d_t eta_j = -P(w . grad eta_j) - P(sum_i d_j v_i eta_i)` where `grad_v[i][j] = d_j v_i`.
pub(crate) fn eta_rhs_general(
    w: &[RealField],
    grad_v: &[Vec<RealField>],
    eta_coeff: &[RealField],
    eta: &[RealField],
) -> Vec<RealField> {
    let dim = eta.len();
    let grad_eta = physical_gradients(&forward_vec(eta));
    let prods: Vec<RealField> = (0..dim)
        .map(|j| {
            let mut acc = dot_fields(w, &grad_eta[j]);
            for k in 0..dim {
                for (a, (x, y)) in acc
                    .values_mut()
                    .iter_mut()
                    .zip(grad_v[k][j].values().iter().zip(eta_coeff[k].values()))
                {
                    *a += x * y;
                }
            }
            acc
        })
        .collect();
    let tend: Vec<SpectralField> = forward_vec(&prods)
        .into_iter()
        .map(|mut f| {
            f.dealias_in_place();
            f.scaled(-1.0)
        })
        .collect();
    inverse_vec(&tend)
}

fn eta_rhs_from(u: &[RealField], grad_u: &[Vec<RealField>], eta: &[RealField]) -> Vec<RealField> {
    eta_rhs_general(u, grad_u, eta, eta)
}

/// `-u . grad rho`, dealiased.
pub fn density_rhs(state: &FlowState) -> RealField {
    let grad = physical_gradient(&state.rho.forward());
    advect(&state.u, &grad).scaled(-1.0).inverse()
}

/// `d_t eta_j = -u . grad eta_j - d_j u . eta`; `None` when the state carries no `eta`.
pub fn eta_rhs(state: &FlowState) -> Option<Vec<RealField>> {
    let eta = state.eta.as_ref()?;
    let grad_u = physical_gradients(&state.u_hat());
    Some(eta_rhs_from(&state.u, &grad_u, eta))
}

/// Projected velocity tendency `d_t u`; the pressure iteration starts from `state.pi`.
pub fn momentum_rhs(state: &FlowState, params: &PhysParams) -> Result<Vec<RealField>> {
    let guess = state.pi.forward();
    Ok(evaluate_rhs(&state.rho, &state.u, None, params, Some(&guess))?.du)
}

/// Evolved quantities as one flat bundle for Runge-Kutta arithmetic.
#[derive(Clone)]
pub(crate) struct Bundle {
    pub fields: Vec<RealField>,
    pub scalars: Vec<f64>,
}

impl Bundle {
    pub fn axpy(&self, a: f64, x: &Bundle) -> Bundle {
        let mut out = self.clone();
        for (f, g) in out.fields.iter_mut().zip(&x.fields) {
            f.axpy(a, g);
        }
        for (s, t) in out.scalars.iter_mut().zip(&x.scalars) {
            *s += a * t;
        }
        out
    }
}

/// Classical four-stage Runge-Kutta step. `f(t, y)` returns `dy/dt`.
pub(crate) fn rk4<F>(y: &Bundle, t: f64, dt: f64, mut f: F) -> Result<Bundle>
where
    F: FnMut(f64, &Bundle) -> Result<Bundle>,
{
    let k1 = f(t, y)?;
    let k2 = f(t + 0.5 * dt, &y.axpy(0.5 * dt, &k1))?;
    let k3 = f(t + 0.5 * dt, &y.axpy(0.5 * dt, &k2))?;
    let k4 = f(t + dt, &y.axpy(dt, &k3))?;
    Ok(y.axpy(dt / 6.0, &k1)
        .axpy(dt / 3.0, &k2)
        .axpy(dt / 3.0, &k3)
        .axpy(dt / 6.0, &k4))
}

/// Applies the Leray projection to a physical velocity.
pub(crate) fn project_velocity(u: &[RealField]) -> Vec<RealField> {
    inverse_vec(&leray_project(&forward_vec(u)))
}

/// Stateful integrator that warm-starts each pressure solve from the last one.
pub struct Stepper {
    params: PhysParams,
    pi_hat: Option<SpectralField>,
}

impl Stepper {
    pub fn new(params: PhysParams) -> Self {
        Stepper {
            params,
            pi_hat: None,
        }
    }

    /// Advances one RK4 step; returns the new state and `integral ||grad u||^2 dt`
    /// over the step, integrated with the same four stages.
    pub fn step(&mut self, state: &FlowState, dt: f64) -> Result<(FlowState, f64)> {
        let dim = state.u.len();
        let has_eta = state.eta.is_some();
        let mut fields = Vec::with_capacity(1 + 2 * dim);
        fields.push(state.rho.clone());
        fields.extend(state.u.iter().cloned());
        if let Some(eta) = &state.eta {
            fields.extend(eta.iter().cloned());
        }
        let y0 = Bundle {
            fields,
            scalars: vec![0.0],
        };
        if self.pi_hat.is_none() {
            self.pi_hat = Some(state.pi.forward());
        }
        let params = self.params;
        let pi_slot = &mut self.pi_hat;
        let y1 = rk4(&y0, state.time, dt, |_, y| {
            let eta = if has_eta {
                Some(&y.fields[1 + dim..1 + 2 * dim])
            } else {
                None
            };
            let rhs = evaluate_rhs(
                &y.fields[0],
                &y.fields[1..1 + dim],
                eta,
                &params,
                pi_slot.as_ref(),
            )?;
            *pi_slot = Some(rhs.pressure.pi_hat);
            let mut fields = Vec::with_capacity(y.fields.len());
            fields.push(rhs.drho);
            fields.extend(rhs.du);
            if let Some(deta) = rhs.deta {
                fields.extend(deta);
            }
            Ok(Bundle {
                fields,
                scalars: vec![rhs.dissipation_rate],
            })
        })?;
        let time = state.time + dt;
        let mut fields = y1.fields.into_iter();
        let rho = fields.next().expect("density");
        let u: Vec<RealField> = fields.by_ref().take(dim).collect();
        let eta: Option<Vec<RealField>> = has_eta.then(|| fields.collect());
        let u = project_velocity(&u);
        let pi = self
            .pi_hat
            .as_ref()
            .map(|p| p.inverse())
            .unwrap_or_else(|| RealField::zeros(rho.grid()));
        let next = FlowState {
            rho,
            u,
            pi,
            eta,
            time,
        };
        check_state(&next)?;
        Ok((next, y1.scalars[0]))
    }
}

pub(crate) fn check_state(state: &FlowState) -> Result<()> {
    if !state.is_finite() || state.eta.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::InvariantViolation {
            time: state.time,
            what: "non-finite values in state".into(),
        });
    }
    let min = state.rho.min();
    if min <= 0.0 {
        return Err(Error::InvariantViolation {
            time: state.time,
            what: format!("density lost positivity (min {min:.3e})"),
        });
    }
    Ok(())
}

/// One classical RK4 step followed by re-projection of the velocity.
pub fn rk4_step(state: &FlowState, dt: f64, params: &PhysParams) -> Result<FlowState> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidParameter {
            name: "dt",
            value: dt,
            reason: "must be finite and > 0",
        });
    }
    Stepper::new(*params).step(state, dt).map(|(s, _)| s)
}

/// The three step-size candidates behind [`cfl_dt`], before the safety factor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CflCandidates {
    pub advective: f64,
    pub viscous: f64,
    pub capillary: f64,
}

impl CflCandidates {
    pub fn min(&self) -> f64 {
        self.advective.min(self.viscous).min(self.capillary)
    }
}

pub fn cfl_candidates(state: &FlowState, params: &PhysParams) -> CflCandidates {
    let grid = state.grid();
    let dx = grid.spacing();
    let dim = grid.dim();
    let speed = (0..grid.len())
        .map(|i| {
            state
                .u
                .iter()
                .map(|c| c.values()[i].powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max);
    let grad = physical_gradient(&state.rho.forward());
    let grad_max = (0..grid.len())
        .map(|i| {
            grad.iter()
                .map(|c| c.values()[i].powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max);
    let kappa = params.effective_kappa();
    CflCandidates {
        advective: dx / (speed + CFL_EPS),
        viscous: state.rho.min() * dx * dx / (2.0 * dim as f64),
        capillary: 1.0 / (kappa.sqrt() * params.alpha.get() * grad_max + CFL_EPS),
    }
}

/// `safety * min(dx / max|u|, rho_min dx^2 / (2 dim), 1 / (sqrt(kappa) alpha max|grad rho|))`.
pub fn cfl_dt(state: &FlowState, params: &PhysParams, safety: f64) -> Result<f64> {
    if !(safety > 0.0 && safety <= 1.0) {
        return Err(Error::InvalidParameter {
            name: "safety",
            value: safety,
            reason: "must lie in (0, 1]",
        });
    }
    Ok(safety * cfl_candidates(state, params).min())
}

/// Total energy `1/2 int rho |u|^2 + kappa/2 ||S grad rho||^2` with `S = k_alpha`
/// (relaxed), `I` (local) or no capillary term (Navier-Stokes).
pub fn energy(state: &FlowState, params: &PhysParams) -> f64 {
    let kinetic: f64 = 0.5
        * state
            .u
            .iter()
            .map(|c| {
                c.values()
                    .iter()
                    .zip(state.rho.values())
                    .map(|(v, r)| r * v * v)
                    .sum::<f64>()
            })
            .sum::<f64>()
        * state.grid().cell_volume();
    let kappa = params.effective_kappa();
    if kappa == 0.0 {
        return kinetic;
    }
    let grad = state.rho.forward().gradient();
    let cap: f64 = grad
        .iter()
        .map(|g| match params.capillarity() {
            Capillarity::Nonlocal(a) => apply_k_alpha(g, a).norm_l2().powi(2),
            Capillarity::Local => g.norm_l2().powi(2),
        })
        .sum();
    kinetic + 0.5 * kappa * cap
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DtPolicy {
    Fixed(f64),
    Cfl { safety: f64 },
}

#[derive(Clone, Debug)]
pub struct SimulateOptions {
    pub t_end: f64,
    pub dt_policy: DtPolicy,
    /// Number of output intervals; frames are emitted at `k t_end / frames`.
    pub frames: usize,
    /// Blow-up threshold on `||rho - rho_bar||_{H^4}` and `||u||_{H^3}`.
    pub norm_ceiling: f64,
}

impl Default for SimulateOptions {
    fn default() -> Self {
        SimulateOptions {
            t_end: 0.25,
            dt_policy: DtPolicy::Cfl { safety: 0.5 },
            frames: 32,
            norm_ceiling: 1e8,
        }
    }
}

/// Per-step observer. Receives each accepted state and the cumulative
/// dissipation `int_0^t ||grad u||^2`.
pub trait Monitor {
    fn observe(&mut self, state: &FlowState, dissipation: f64);
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlowUp {
    pub time: f64,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub params: PhysParams,
    pub frames: Vec<FlowState>,
    /// `int_0^{t_k} ||grad u||^2 dt` at each frame.
    pub dissipation: Vec<f64>,
    pub steps: usize,
    pub blow_up: Option<BlowUp>,
}

impl Trajectory {
    pub fn times(&self) -> Vec<f64> {
        self.frames.iter().map(|f| f.time).collect()
    }

    pub fn last(&self) -> &FlowState {
        self.frames
            .last()
            .expect("trajectory holds the initial frame")
    }
}

fn blow_up_norm(state: &FlowState, params: &PhysParams) -> f64 {
    let mut rho_hat = state.rho.forward();
    rho_hat.coeffs_mut()[0] -= params.rho_bar;
    let u_norm: f64 = state
        .u
        .iter()
        .map(|c| c.forward().sobolev_norm(3.0).powi(2))
        .sum::<f64>()
        .sqrt();
    rho_hat.sobolev_norm(4.0).max(u_norm)
}

/// Integrates from `init` to `options.t_end`, emitting `options.frames + 1` frames.
///
/// Each output interval is split into equal steps no longer than the policy's
/// step size. A norm above `norm_ceiling` or a non-finite state stops the run
/// and returns the partial trajectory with `blow_up` set.
pub fn simulate(
    init: &FlowState,
    params: &PhysParams,
    options: &SimulateOptions,
    monitors: &mut [&mut dyn Monitor],
) -> Result<Trajectory> {
    if !(options.t_end >= 0.0 && options.t_end.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "t_end",
            value: options.t_end,
            reason: "must be finite and >= 0",
        });
    }
    if init.rho.min() <= 0.0 {
        return Err(Error::InvalidParameter {
            name: "rho",
            value: init.rho.min(),
            reason: "initial density must be strictly positive",
        });
    }
    let mut traj = Trajectory {
        params: *params,
        frames: vec![init.clone()],
        dissipation: vec![0.0],
        steps: 0,
        blow_up: None,
    };
    for m in monitors.iter_mut() {
        m.observe(init, 0.0);
    }
    if options.t_end == 0.0 || options.frames == 0 {
        return Ok(traj);
    }
    let mut stepper = Stepper::new(*params);
    let mut state = init.clone();
    let mut dissipation = 0.0;
    let t0 = init.time;
    for k in 1..=options.frames {
        let target = t0 + options.t_end * k as f64 / options.frames as f64;
        let span = target - state.time;
        let dt_max = match options.dt_policy {
            DtPolicy::Fixed(dt) => dt,
            DtPolicy::Cfl { safety } => cfl_dt(&state, params, safety)?,
        };
        if !(dt_max > 0.0 && dt_max.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "dt",
                value: dt_max,
                reason: "must be finite and > 0",
            });
        }
        let substeps = ((span / dt_max) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        let h = span / substeps as f64;
        for s in 0..substeps {
            let (mut next, inc) = match stepper.step(&state, h) {
                Ok(v) => v,
                Err(Error::InvariantViolation { time, what }) => {
                    traj.blow_up = Some(BlowUp { time, reason: what });
                    return Ok(traj);
                }
                Err(e) => return Err(e),
            };
            if s + 1 == substeps {
                next.time = target;
            }
            traj.steps += 1;
            dissipation += inc;
            for m in monitors.iter_mut() {
                m.observe(&next, dissipation);
            }
            let norm = blow_up_norm(&next, params);
            if norm.is_nan() || norm > options.norm_ceiling {
                traj.blow_up = Some(BlowUp {
                    time: next.time,
                    reason: format!(
                        "Sobolev norm {norm:.3e} exceeds ceiling {:.3e}",
                        options.norm_ceiling
                    ),
                });
                traj.frames.push(next);
                traj.dissipation.push(dissipation);
                return Ok(traj);
            }
            state = next;
        }
        traj.frames.push(state.clone());
        traj.dissipation.push(dissipation);
    }
    Ok(traj)
}
