//! Parameter sweeps, rate fits and trajectory diagnostics.

use std::cmp::Ordering;
use std::f64::consts::PI;

use rayon::prelude::*;

use crate::dynamics::{
    cfl_candidates, energy, simulate, DtPolicy, FlowState, Monitor, PhysParams, SimulateOptions,
    System, Trajectory,
};
use crate::error::{Error, Result};
use crate::nonlocal::{apply_k_alpha_sq, RelaxationParam};
use crate::spectral::{forward_vec, Grid, SpectralField};

pub const DEFAULT_N: usize = 128;
pub const DEFAULT_T_END: f64 = 0.25;
pub const DEFAULT_FRAMES: usize = 32;
pub const DEFAULT_RHO_BAR: f64 = 1.0;
pub const DEFAULT_AMPLITUDE: f64 = 0.2;
pub const DEFAULT_KAPPA: f64 = 1.0;
pub const DEFAULT_ALPHA: f64 = 16.0;
pub const DEFAULT_ALPHAS: [f64; 4] = [8.0, 16.0, 32.0, 64.0];
pub const DEFAULT_KAPPAS: [f64; 4] = [0.1, 0.05, 0.025, 0.0125];

/// The `n x n` grid on `[0, 2 pi)^2`.
pub fn default_grid(n: usize) -> Result<Grid> {
    Grid::new(2, n, 2.0 * PI)
}

/// `rho = rho_bar + 0.2 cos x cos y` with the Taylor-Green velocity.
pub fn default_init(grid: &Grid, rho_bar: f64) -> Result<FlowState> {
    FlowState::taylor_green(grid, rho_bar, DEFAULT_AMPLITUDE)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParameter {
    Alpha,
    Kappa,
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            SweepParameter::Alpha => "alpha",
            SweepParameter::Kappa => "kappa",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceRow {
    pub parameter: f64,
    /// One entry per table column; `NaN` when the row is invalid.
    pub errors: Vec<f64>,
    /// False when the member run or the reference run blew up.
    pub valid: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceTable {
    pub parameter: SweepParameter,
    pub columns: Vec<String>,
    pub rows: Vec<ConvergenceRow>,
    pub reference: String,
    /// The step size shared by every member run.
    pub dt: f64,
}

impl ConvergenceTable {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// `(parameter, error)` pairs of one column, valid rows only.
    pub fn series(&self, column: &str) -> Result<Vec<(f64, f64)>> {
        let idx = self
            .column_index(column)
            .ok_or_else(|| Error::InsufficientData(format!("no column `{column}`")))?;
        Ok(self
            .rows
            .iter()
            .filter(|r| r.valid)
            .map(|r| (r.parameter, r.errors[idx]))
            .collect())
    }

    /// True when the column's valid errors strictly decrease as the parameter grows.
    pub fn decreasing_in_parameter(&self, column: &str) -> Result<bool> {
        let mut s = self.series(column)?;
        s.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(s.windows(2).all(|w| w[1].1 < w[0].1))
    }

    /// True when the column's valid errors strictly increase with the parameter.
    pub fn increasing_in_parameter(&self, column: &str) -> Result<bool> {
        let mut s = self.series(column)?;
        s.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(s.windows(2).all(|w| w[1].1 > w[0].1))
    }
}

/// Everything a sweep holds fixed across its member runs.
#[derive(Clone, Debug)]
pub struct SweepBase {
    pub init: FlowState,
    pub kappa: f64,
    pub alpha: f64,
    pub rho_bar: f64,
    pub t_end: f64,
    pub frames: usize,
    /// A CFL policy is resolved once, against the most restrictive member.
    pub dt_policy: DtPolicy,
}

impl SweepBase {
    /// Default init on an `n x n` grid with the default horizon and frames.
    pub fn default_with(n: usize) -> Result<Self> {
        let grid = default_grid(n)?;
        Ok(SweepBase {
            init: default_init(&grid, DEFAULT_RHO_BAR)?,
            kappa: DEFAULT_KAPPA,
            alpha: DEFAULT_ALPHA,
            rho_bar: DEFAULT_RHO_BAR,
            t_end: DEFAULT_T_END,
            frames: DEFAULT_FRAMES,
            dt_policy: DtPolicy::Cfl { safety: 0.5 },
        })
    }

    fn shared_dt(&self, members: &[PhysParams]) -> Result<f64> {
        match self.dt_policy {
            DtPolicy::Fixed(dt) => Ok(dt),
            DtPolicy::Cfl { safety } => {
                if !(safety > 0.0 && safety <= 1.0) {
                    return Err(Error::InvalidParameter {
                        name: "safety",
                        value: safety,
                        reason: "must lie in (0, 1]",
                    });
                }
                let min = members
                    .iter()
                    .map(|p| cfl_candidates(&self.init, p).min())
                    .fold(f64::INFINITY, f64::min);
                Ok(safety * min)
            }
        }
    }

    fn options(&self, dt: f64) -> SimulateOptions {
        SimulateOptions {
            t_end: self.t_end,
            dt_policy: DtPolicy::Fixed(dt),
            frames: self.frames,
            ..SimulateOptions::default()
        }
    }
}

fn check_strictly_monotone(name: &'static str, values: &[f64]) -> Result<()> {
    let up = values.windows(2).all(|w| w[1] > w[0]);
    let down = values.windows(2).all(|w| w[1] < w[0]);
    if !(up || down) {
        let bad = values
            .windows(2)
            .find(|w| {
                !matches!(
                    w[1].partial_cmp(&w[0]),
                    Some(Ordering::Less | Ordering::Greater)
                )
            })
            .map(|w| w[1])
            .unwrap_or(f64::NAN);
        return Err(Error::InvalidParameter {
            name,
            value: bad,
            reason: "sweep values must be strictly monotone",
        });
    }
    Ok(())
}

fn vector_sobolev(u: &[SpectralField], s: f64) -> f64 {
    u.iter()
        .map(|c| c.sobolev_norm(s).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// `sup_k ||a.rho_k - b.rho_k||_{H^rho_s}` and the same for `u` in `H^u_s`.
/// `None` when either trajectory blew up or the frame counts differ.
pub fn sup_errors(a: &Trajectory, b: &Trajectory, rho_s: f64, u_s: f64) -> Option<(f64, f64)> {
    if a.blow_up.is_some() || b.blow_up.is_some() || a.frames.len() != b.frames.len() {
        return None;
    }
    let mut worst = (0.0f64, 0.0f64);
    for (fa, fb) in a.frames.iter().zip(&b.frames) {
        let dr = (&fa.rho - &fb.rho).forward().sobolev_norm(rho_s);
        let du: Vec<_> = fa.u.iter().zip(&fb.u).map(|(x, y)| x - y).collect();
        let du = vector_sobolev(&forward_vec(&du), u_s);
        worst = (worst.0.max(dr), worst.1.max(du));
    }
    Some(worst)
}

fn run_members(base: &SweepBase, params: &[PhysParams], dt: f64) -> Result<Vec<Trajectory>> {
    let opts = base.options(dt);
    params
        .par_iter()
        .map(|p| simulate(&base.init, p, &opts, &mut []))
        .collect()
}

/// Relaxed runs at each `alpha` against one local-capillarity reference.
/// Columns are `rho_err_l{l}` (`H^{2+l}`) and `u_err_l{l}` (`H^{1+l}`) per `l`.
pub fn sweep_alpha(base: &SweepBase, alphas: &[f64], l_values: &[u32]) -> Result<ConvergenceTable> {
    sweep_alpha_runs(base, alphas, l_values).map(|s| s.table)
}

/// A sweep's table together with the trajectories behind it.
#[derive(Clone, Debug)]
pub struct SweepRuns {
    pub table: ConvergenceTable,
    pub reference: Trajectory,
    /// One per table row, in row order.
    pub members: Vec<Trajectory>,
}

/// [`sweep_alpha`] keeping the member and reference trajectories.
pub fn sweep_alpha_runs(base: &SweepBase, alphas: &[f64], l_values: &[u32]) -> Result<SweepRuns> {
    if alphas.is_empty() {
        return Err(Error::InsufficientData("empty alpha list".into()));
    }
    check_strictly_monotone("alpha", alphas)?;
    if let Some(&l) = l_values.iter().find(|&&l| l > 2) {
        return Err(Error::InvalidParameter {
            name: "l",
            value: l as f64,
            reason: "must be 0, 1 or 2",
        });
    }
    let mut params = vec![PhysParams::new(
        System::LocalInsk,
        base.kappa,
        base.alpha,
        base.rho_bar,
    )?];
    for &a in alphas {
        params.push(PhysParams::new(
            System::RelaxedInsk,
            base.kappa,
            a,
            base.rho_bar,
        )?);
    }
    let dt = base.shared_dt(&params)?;
    let runs = run_members(base, &params, dt)?;
    let mut runs = runs.into_iter();
    let reference = runs.next().expect("reference run");
    let members: Vec<Trajectory> = runs.collect();

    let columns = l_values
        .iter()
        .flat_map(|l| [format!("rho_err_l{l}"), format!("u_err_l{l}")])
        .collect();
    let rows = alphas
        .iter()
        .zip(&members)
        .map(|(&alpha, run)| {
            let mut errors = Vec::with_capacity(2 * l_values.len());
            let mut valid = true;
            for &l in l_values {
                let l = l as f64;
                match sup_errors(run, &reference, 2.0 + l, 1.0 + l) {
                    Some((r, u)) => errors.extend([r, u]),
                    None => {
                        valid = false;
                        errors.extend([f64::NAN, f64::NAN]);
                    }
                }
            }
            ConvergenceRow {
                parameter: alpha,
                errors,
                valid,
            }
        })
        .collect();
    let table = ConvergenceTable {
        parameter: SweepParameter::Alpha,
        columns,
        rows,
        reference: format!("LocalINSK, kappa = {}, same mesh and dt", base.kappa),
        dt,
    };
    Ok(SweepRuns {
        table,
        reference,
        members,
    })
}

/// Relaxed runs at each `kappa` (fixed `alpha`) against a Navier-Stokes
/// reference. Columns are `rho_err_h3` and `u_err_h3`.
pub fn sweep_kappa(base: &SweepBase, kappas: &[f64]) -> Result<ConvergenceTable> {
    sweep_kappa_runs(base, kappas).map(|s| s.table)
}

/// [`sweep_kappa`] keeping the member and reference trajectories.
pub fn sweep_kappa_runs(base: &SweepBase, kappas: &[f64]) -> Result<SweepRuns> {
    if kappas.is_empty() {
        return Err(Error::InsufficientData("empty kappa list".into()));
    }
    check_strictly_monotone("kappa", kappas)?;
    let mut params = vec![PhysParams::new(
        System::NavierStokes,
        0.0,
        base.alpha,
        base.rho_bar,
    )?];
    for &k in kappas {
        params.push(PhysParams::new(
            System::RelaxedInsk,
            k,
            base.alpha,
            base.rho_bar,
        )?);
    }
    let dt = base.shared_dt(&params)?;
    let runs = run_members(base, &params, dt)?;
    let mut runs = runs.into_iter();
    let reference = runs.next().expect("reference run");
    let members: Vec<Trajectory> = runs.collect();
    let rows = kappas
        .iter()
        .zip(&members)
        .map(
            |(&kappa, run)| match sup_errors(run, &reference, 3.0, 3.0) {
                Some((r, u)) => ConvergenceRow {
                    parameter: kappa,
                    errors: vec![r, u],
                    valid: true,
                },
                None => ConvergenceRow {
                    parameter: kappa,
                    errors: vec![f64::NAN; 2],
                    valid: false,
                },
            },
        )
        .collect();
    let table = ConvergenceTable {
        parameter: SweepParameter::Kappa,
        columns: vec!["rho_err_h3".into(), "u_err_h3".into()],
        rows,
        reference: format!("NavierStokes, alpha = {}, same mesh and dt", base.alpha),
        dt,
    };
    Ok(SweepRuns {
        table,
        reference,
        members,
    })
}

/// Least-squares line through `(ln p, ln err)`.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points: usize,
    /// Parameters whose rows were skipped for a zero or non-finite error.
    pub dropped: Vec<f64>,
}

/// Fits `ln(err) = intercept + slope ln(p)` over `(p, err)` pairs. Pairs with
/// a non-positive or non-finite error are dropped; at least 3 must remain.
pub fn fit_power_law(points: &[(f64, f64)]) -> Result<RateFit> {
    let mut dropped = Vec::new();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &(p, e) in points {
        if e > 0.0 && e.is_finite() && p > 0.0 && p.is_finite() {
            xs.push(p.ln());
            ys.push(e.ln());
        } else {
            dropped.push(p);
        }
    }
    if xs.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "rate fit needs at least 3 positive errors, have {}",
            xs.len()
        )));
    }
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InsufficientData(
            "rate fit needs distinct parameters".into(),
        ));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let r_squared = if ss_tot == 0.0 {
        1.0
    } else {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    };
    Ok(RateFit {
        slope,
        intercept,
        r_squared,
        points: xs.len(),
        dropped,
    })
}

/// [`fit_power_law`] on one column of a table.
pub fn fit_rate(table: &ConvergenceTable, column: &str) -> Result<RateFit> {
    fit_power_law(&table.series(column)?)
}

/// Order-parameter gap and its multiplier bound, both as sups over frames.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrderParameter {
    pub error: f64,
    pub bound: f64,
    /// Largest per-frame ratio `error_k / bound_k` (0 where both vanish).
    pub worst_ratio: f64,
}

/// Relative slack allowed on the per-frame bound for round-off.
pub const ORDER_PARAMETER_SLACK: f64 = 1e-10;

/// `sup_t ||k_alpha^2 rho - rho||_{H^{2+l}}` and `alpha^{-(2-l)} sup_t ||rho||_{H^4}`.
/// Fails if some frame violates its own bound by more than the slack.
pub fn order_parameter_error(traj: &Trajectory, alpha: f64, l: f64) -> Result<OrderParameter> {
    if !(0.0..=2.0).contains(&l) {
        return Err(Error::InvalidParameter {
            name: "l",
            value: l,
            reason: "must lie in [0, 2]",
        });
    }
    let a = RelaxationParam::new(alpha)?;
    let factor = alpha.powf(-(2.0 - l));
    let mut out = OrderParameter {
        error: 0.0,
        bound: 0.0,
        worst_ratio: 0.0,
    };
    for frame in &traj.frames {
        let rho = frame.rho.forward();
        let gap = &apply_k_alpha_sq(&rho, a) - &rho;
        let err = gap.sobolev_norm(2.0 + l);
        let bound = factor * rho.sobolev_norm(4.0);
        if err > bound * (1.0 + ORDER_PARAMETER_SLACK) {
            return Err(Error::InvariantViolation {
                time: frame.time,
                what: format!("order parameter gap {err:.6e} exceeds bound {bound:.6e}"),
            });
        }
        out.error = out.error.max(err);
        out.bound = out.bound.max(bound);
        if bound > 0.0 {
            out.worst_ratio = out.worst_ratio.max(err / bound);
        }
    }
    Ok(out)
}

/// Energy, cumulative dissipation and the balance residual at each frame.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyReport {
    pub times: Vec<f64>,
    pub energy: Vec<f64>,
    pub dissipation: Vec<f64>,
    /// `E(t) - E(0) + int_0^t ||grad u||^2`.
    pub residual: Vec<f64>,
}

impl EnergyReport {
    pub fn max_abs_residual(&self) -> f64 {
        self.residual.iter().fold(0.0, |m, r| m.max(r.abs()))
    }
}

fn grad_u_sq(state: &FlowState) -> f64 {
    crate::spectral::gradient_norm_sq(&state.u_hat())
}

/// Trapezoid rule for `int ||grad u||^2` over the frame times.
pub fn trapezoid_dissipation(traj: &Trajectory) -> Vec<f64> {
    let rates: Vec<f64> = traj.frames.iter().map(grad_u_sq).collect();
    let mut acc = vec![0.0];
    for k in 1..traj.frames.len() {
        let h = traj.frames[k].time - traj.frames[k - 1].time;
        acc.push(acc[k - 1] + 0.5 * h * (rates[k] + rates[k - 1]));
    }
    acc
}

/// Uses the dissipation integrated alongside the solver when the trajectory
/// carries it, and the trapezoid rule over frames otherwise.
pub fn energy_report(traj: &Trajectory, params: &PhysParams) -> EnergyReport {
    let times = traj.times();
    let energy: Vec<f64> = traj.frames.iter().map(|f| energy(f, params)).collect();
    let dissipation = if traj.dissipation.len() == traj.frames.len() {
        traj.dissipation.clone()
    } else {
        trapezoid_dissipation(traj)
    };
    let residual = energy
        .iter()
        .zip(&dissipation)
        .map(|(e, d)| e - energy[0] + d)
        .collect();
    EnergyReport {
        times,
        energy,
        dissipation,
        residual,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaxPrinciple {
    /// Initial bounds.
    pub rho_m: f64,
    pub rho_big_m: f64,
    pub min: f64,
    pub max: f64,
    /// `max(rho_m - min, max - rho_M, 0)`.
    pub overshoot: f64,
}

pub fn max_principle_report(traj: &Trajectory) -> MaxPrinciple {
    let first = &traj.frames[0].rho;
    let (rho_m, rho_big_m) = (first.min(), first.max());
    let min = traj
        .frames
        .iter()
        .map(|f| f.rho.min())
        .fold(f64::INFINITY, f64::min);
    let max = traj
        .frames
        .iter()
        .map(|f| f.rho.max())
        .fold(f64::NEG_INFINITY, f64::max);
    MaxPrinciple {
        rho_m,
        rho_big_m,
        min,
        max,
        overshoot: (rho_m - min).max(max - rho_big_m).max(0.0),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormSample {
    pub time: f64,
    /// `||rho - rho_bar||_{H^4}` with `rho_bar` the mean density.
    pub rho_h4: f64,
    pub u_h3: f64,
    /// `int_0^t ||grad u||_{H^3}^2`.
    pub grad_u_h3_integral: f64,
    /// `int_0^t ||d_t u||_{H^2}^2` with `d_t u` from finite differences of frames.
    pub dtu_h2_integral: f64,
    /// `1 + sup_{s <= t} (||rho - rho_bar||_{H^4}^2 + ||u||_{H^3}^2)` plus both integrals.
    pub m: f64,
}

/// Time series of the norms that make up the a priori quantity `M(t)`.
pub fn norm_tracker(traj: &Trajectory) -> Vec<NormSample> {
    let frames = &traj.frames;
    let count = frames.len();
    let u_hat: Vec<Vec<SpectralField>> = frames.iter().map(|f| f.u_hat()).collect();
    let grad_rate: Vec<f64> = u_hat
        .iter()
        .map(|u| {
            u.iter()
                .flat_map(|c| c.gradient())
                .map(|g| g.sobolev_norm(3.0).powi(2))
                .sum()
        })
        .collect();
    let dtu_rate: Vec<f64> = (0..count)
        .map(|k| {
            if count < 2 {
                return 0.0;
            }
            let (a, b) = match k {
                0 => (0, 1),
                k if k == count - 1 => (k - 1, k),
                k => (k - 1, k + 1),
            };
            let h = frames[b].time - frames[a].time;
            u_hat[b]
                .iter()
                .zip(&u_hat[a])
                .map(|(x, y)| (x - y).sobolev_norm(2.0).powi(2))
                .sum::<f64>()
                / (h * h)
        })
        .collect();
    let mut out = Vec::with_capacity(count);
    let (mut gi, mut di, mut peak) = (0.0, 0.0, 0.0f64);
    for k in 0..count {
        if k > 0 {
            let h = frames[k].time - frames[k - 1].time;
            gi += 0.5 * h * (grad_rate[k] + grad_rate[k - 1]);
            di += 0.5 * h * (dtu_rate[k] + dtu_rate[k - 1]);
        }
        let rho = frames[k].rho.forward();
        let mut fluct = rho.clone();
        fluct.coeffs_mut()[0] = Default::default();
        let rho_h4 = fluct.sobolev_norm(4.0);
        let u_h3 = vector_sobolev(&u_hat[k], 3.0);
        peak = peak.max(rho_h4.powi(2) + u_h3.powi(2));
        out.push(NormSample {
            time: frames[k].time,
            rho_h4,
            u_h3,
            grad_u_h3_integral: gi,
            dtu_h2_integral: di,
            m: 1.0 + peak + gi + di,
        });
    }
    out
}

/// Per-step extremes of the transport and incompressibility invariants.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InvariantMonitor {
    pub steps: usize,
    pub rho_min: f64,
    pub rho_max: f64,
    pub max_divergence: f64,
    pub initial_momentum: Vec<f64>,
    /// `int rho |u| dx` at the first observed state; scale for momentum drift.
    pub momentum_scale: f64,
    pub max_momentum_drift: f64,
}

impl InvariantMonitor {
    pub fn new() -> Self {
        InvariantMonitor {
            rho_min: f64::INFINITY,
            rho_max: f64::NEG_INFINITY,
            ..Default::default()
        }
    }

    /// Largest `|int rho u(t) - int rho u(0)|` relative to `int rho |u(0)|`.
    pub fn relative_momentum_drift(&self) -> f64 {
        if self.momentum_scale > 0.0 {
            self.max_momentum_drift / self.momentum_scale
        } else {
            self.max_momentum_drift
        }
    }
}

impl Monitor for InvariantMonitor {
    fn observe(&mut self, state: &FlowState, _dissipation: f64) {
        let p = state.momentum();
        if self.steps == 0 {
            let speed = (0..state.grid().len())
                .map(|i| {
                    let s: f64 = state.u.iter().map(|c| c.values()[i].powi(2)).sum();
                    state.rho.values()[i] * s.sqrt()
                })
                .sum::<f64>();
            self.momentum_scale = speed * state.grid().cell_volume();
            self.initial_momentum = p.clone();
        }
        let drift = p
            .iter()
            .zip(&self.initial_momentum)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        self.max_momentum_drift = self.max_momentum_drift.max(drift);
        self.rho_min = self.rho_min.min(state.rho.min());
        self.rho_max = self.rho_max.max(state.rho.max());
        self.max_divergence = self.max_divergence.max(state.divergence_norm());
        self.steps += 1;
    }
}

/// Observed temporal order from errors at step sizes `dt`, `dt/2`, ... measured
/// against a run at `reference_dt`. Returns the per-run errors (sup over frames
/// of the combined `L2` error) and the fitted log-log slope.
pub fn temporal_order(
    init: &FlowState,
    params: &PhysParams,
    t_end: f64,
    frames: usize,
    dts: &[f64],
    reference_dt: f64,
) -> Result<(Vec<f64>, RateFit)> {
    let run = |dt: f64| {
        let opts = SimulateOptions {
            t_end,
            dt_policy: DtPolicy::Fixed(dt),
            frames,
            ..SimulateOptions::default()
        };
        simulate(init, params, &opts, &mut [])
    };
    let reference = run(reference_dt)?;
    let runs: Vec<Trajectory> = dts.par_iter().map(|&dt| run(dt)).collect::<Result<_>>()?;
    let errors: Vec<f64> = runs
        .iter()
        .map(|r| {
            sup_errors(r, &reference, 0.0, 0.0)
                .map(|(a, b)| a + b)
                .unwrap_or(f64::NAN)
        })
        .collect();
    let pairs: Vec<(f64, f64)> = dts.iter().copied().zip(errors.iter().copied()).collect();
    Ok((errors, fit_power_law(&pairs)?))
}

/// `sup_k (||rho_a - rho_b|| + ||u_a - u_b||)` in `L2` after embedding both
/// trajectories on the finer of their two grids.
pub fn resolution_gap(a: &Trajectory, b: &Trajectory) -> Result<f64> {
    if a.frames.len() != b.frames.len() {
        return Err(Error::InsufficientData(
            "trajectories have different frame counts".into(),
        ));
    }
    let fine = if a.frames[0].grid().n() >= b.frames[0].grid().n() {
        a.frames[0].grid().clone()
    } else {
        b.frames[0].grid().clone()
    };
    let mut worst: f64 = 0.0;
    for (fa, fb) in a.frames.iter().zip(&b.frames) {
        let lift = |f: &crate::spectral::RealField| f.forward().resample(&fine);
        let dr = (&lift(&fa.rho)? - &lift(&fb.rho)?).norm_l2();
        let mut du = 0.0;
        for (x, y) in fa.u.iter().zip(&fb.u) {
            du += (&lift(x)? - &lift(y)?).norm_l2().powi(2);
        }
        worst = worst.max(dr + du.sqrt());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectral::RealField;

    #[test]
    fn fit_recovers_exact_power_laws() {
        let pts: Vec<(f64, f64)> = [1.0, 2.0, 4.0, 8.0].iter().map(|&p| (p, p * p)).collect();
        let fit = fit_power_law(&pts).unwrap();
        assert!((fit.slope - 2.0).abs() < 1e-12);
        assert!((fit.r_squared - 1.0).abs() < 1e-12);

        let pts: Vec<(f64, f64)> = [0.5, 1.0, 3.0, 7.0].iter().map(|&p| (p, 3.0 / p)).collect();
        let fit = fit_power_law(&pts).unwrap();
        assert!((fit.slope + 1.0).abs() < 1e-12);
        assert!((fit.intercept - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn fit_drops_zero_rows_and_needs_three_points() {
        let pts = [(1.0, 1.0), (2.0, 0.0), (3.0, 9.0), (4.0, 16.0)];
        let fit = fit_power_law(&pts).unwrap();
        assert_eq!(fit.dropped, vec![2.0]);
        assert_eq!(fit.points, 3);
        assert!((fit.slope - 2.0).abs() < 1e-12);
        assert!(fit_power_law(&[(1.0, 1.0), (2.0, 4.0)]).is_err());
        assert!(fit_power_law(&[(1.0, 1.0), (2.0, 0.0), (3.0, 0.0)]).is_err());
    }

    fn tiny_base(n: usize) -> SweepBase {
        let mut base = SweepBase::default_with(n).unwrap();
        base.t_end = 0.02;
        base.frames = 2;
        base
    }

    #[test]
    fn sweep_rejects_non_monotone_lists() {
        let base = tiny_base(16);
        let err = sweep_kappa(&base, &[0.1, 0.05, 0.08]).unwrap_err();
        assert!(err.to_string().contains("kappa"), "{err}");
        assert!(sweep_alpha(&base, &[8.0, 8.0], &[0]).is_err());
    }

    #[test]
    fn single_alpha_table_is_valid_but_unfittable() {
        let base = tiny_base(16);
        let table = sweep_alpha(&base, &[8.0], &[0, 1, 2]).unwrap();
        assert_eq!(table.rows.len(), 1);
        assert!(table.rows[0].valid);
        assert_eq!(
            table.columns,
            [
                "rho_err_l0",
                "u_err_l0",
                "rho_err_l1",
                "u_err_l1",
                "rho_err_l2",
                "u_err_l2"
            ]
        );
        assert!(table.rows[0].errors.iter().all(|e| *e >= 0.0));
        assert!(fit_rate(&table, "rho_err_l0").is_err());
    }

    #[test]
    fn kappa_zero_matches_navier_stokes() {
        let base = tiny_base(16);
        let mut params = vec![PhysParams::new(System::NavierStokes, 0.0, 16.0, 1.0).unwrap()];
        params.push(PhysParams::new(System::RelaxedInsk, 0.0, 16.0, 1.0).unwrap());
        let dt = base.shared_dt(&params).unwrap();
        let runs = run_members(&base, &params, dt).unwrap();
        let (r, u) = sup_errors(&runs[1], &runs[0], 3.0, 3.0).unwrap();
        assert!(r < 1e-12 && u < 1e-12, "{r:e} {u:e}");
    }

    #[test]
    fn kappa_sweep_errors_scale_linearly() {
        let base = tiny_base(16);
        let table = sweep_kappa(&base, &[0.4, 0.2, 0.1]).unwrap();
        assert!(table.increasing_in_parameter("rho_err_h3").unwrap());
        let fit = fit_rate(&table, "u_err_h3").unwrap();
        assert!((fit.slope - 1.0).abs() < 0.1, "{fit:?}");
    }

    fn single_frame(state: FlowState, params: PhysParams) -> Trajectory {
        Trajectory {
            params,
            frames: vec![state],
            dissipation: vec![0.0],
            steps: 0,
            blow_up: None,
        }
    }

    #[test]
    fn order_parameter_cases() {
        let g = default_grid(32).unwrap();
        let p = PhysParams::new(System::RelaxedInsk, 1.0, 1.0, 1.0).unwrap();
        let rest =
            FlowState::new(RealField::constant(&g, 1.0), vec![RealField::zeros(&g); 2]).unwrap();
        let op = order_parameter_error(&single_frame(rest, p), 1.0, 0.0).unwrap();
        assert_eq!(op.error, 0.0);

        let rho = RealField::from_fn(&g, |x| 1.5 + x[0].cos());
        let state = FlowState::new(rho, vec![RealField::zeros(&g); 2]).unwrap();
        let op = order_parameter_error(&single_frame(state, p), 1.0, 0.0).unwrap();
        // (k_1^2 - I) cos x = -cos x / 2; ||cos x||_{H^2}^2 = (1 + 1)^2 * 2 pi^2.
        let expected = 0.5 * (4.0 * 2.0 * PI * PI).sqrt();
        assert!((op.error - expected).abs() < 1e-12 * expected);
        assert!(op.error <= op.bound);
    }

    #[test]
    fn energy_report_for_rest_state_is_flat() {
        let g = default_grid(16).unwrap();
        let p = PhysParams::new(System::RelaxedInsk, 1.0, 16.0, 1.0).unwrap();
        let rest =
            FlowState::new(RealField::constant(&g, 1.0), vec![RealField::zeros(&g); 2]).unwrap();
        let opts = SimulateOptions {
            t_end: 0.01,
            frames: 4,
            ..SimulateOptions::default()
        };
        let traj = simulate(&rest, &p, &opts, &mut []).unwrap();
        let rep = energy_report(&traj, &p);
        assert!(rep.residual.iter().all(|r| *r == 0.0));
        let norms = norm_tracker(&traj);
        assert!(norms
            .iter()
            .all(|s| s.rho_h4 == 0.0 && s.u_h3 == 0.0 && s.m == 1.0));
        let mp = max_principle_report(&traj);
        assert_eq!(mp.overshoot, 0.0);
    }

    #[test]
    fn stokes_mode_energy_matches_closed_form() {
        let g = default_grid(16).unwrap();
        let p = PhysParams::new(System::NavierStokes, 0.0, 16.0, 1.0).unwrap();
        let u = vec![RealField::from_fn(&g, |x| x[1].sin()), RealField::zeros(&g)];
        let init = FlowState::new(RealField::constant(&g, 1.0), u).unwrap();
        let opts = SimulateOptions {
            t_end: 0.5,
            dt_policy: DtPolicy::Fixed(0.01),
            frames: 5,
            ..SimulateOptions::default()
        };
        let traj = simulate(&init, &p, &opts, &mut []).unwrap();
        let rep = energy_report(&traj, &p);
        for (t, e) in rep.times.iter().zip(&rep.energy) {
            let exact = 0.5 * PI * PI * 2.0 * (-2.0 * t).exp();
            assert!((e - exact).abs() < 1e-8 * exact, "{e} vs {exact}");
        }
        assert!(rep.max_abs_residual() < 1e-8);
        assert!(rep.dissipation.windows(2).all(|w| w[1] >= w[0]));
        // The trapezoid rule over coarse frames is much less accurate.
        let trap = trapezoid_dissipation(&traj);
        assert!((trap[5] - rep.dissipation[5]).abs() > 1e-6);
    }

    #[test]
    fn rotation_respects_max_principle() {
        let g = default_grid(64).unwrap();
        let p = PhysParams::new(System::NavierStokes, 0.0, 16.0, 1.0).unwrap();
        let init = default_init(&g, 1.0).unwrap();
        let opts = SimulateOptions {
            t_end: 0.05,
            frames: 5,
            ..SimulateOptions::default()
        };
        let mut mon = InvariantMonitor::new();
        let traj = simulate(&init, &p, &opts, &mut [&mut mon]).unwrap();
        let mp = max_principle_report(&traj);
        assert!(mp.overshoot <= 1e-3 * (mp.rho_big_m - mp.rho_m));
        assert!(mon.max_divergence < 1e-8);
        assert!(mon.relative_momentum_drift() < 1e-8);
        assert_eq!(mon.steps, traj.steps + 1);
        let norms = norm_tracker(&traj);
        assert!(norms.windows(2).all(|w| w[1].m >= w[0].m));
        assert!(norms.iter().all(|s| s.m.is_finite()));
    }

    #[test]
    fn resample_round_trip_is_exact() {
        let coarse = default_grid(16).unwrap();
        let fine = default_grid(32).unwrap();
        let f = RealField::from_fn(&coarse, |x| (2.0 * x[0]).sin() * x[1].cos());
        let up = f.forward().resample(&fine).unwrap();
        let g = RealField::from_fn(&fine, |x| (2.0 * x[0]).sin() * x[1].cos());
        assert!((&up.inverse() - &g).max_abs() < 1e-13);
        let down = up.resample(&coarse).unwrap();
        assert!((&down.inverse() - &f).max_abs() < 1e-13);
    }
}
