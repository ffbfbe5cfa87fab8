use nsk_core::dynamics::{energy, simulate, Monitor};
use nsk_core::experiments::{energy_report, fit_power_law, InvariantMonitor};
use nsk_core::io::{decode_field, encode_field};
use nsk_core::nonlocal::{apply_k_alpha, leray_project};
use nsk_core::spectral::divergence;
use nsk_core::spectral::inverse_vec;
use nsk_core::{
    FlowState, Grid, PhysParams, RealField, RelaxationParam, SimulateOptions, SpectralField, System,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn grid_2d() -> impl Strategy<Value = Grid> {
    (
        prop::sample::select(vec![8usize, 10, 12, 16, 24]),
        0.5f64..8.0,
    )
        .prop_map(|(n, l)| Grid::new(2, n, l).unwrap())
}

fn field() -> impl Strategy<Value = RealField> {
    grid_2d().prop_flat_map(|g| {
        prop::collection::vec(-10.0f64..10.0, g.len())
            .prop_map(move |v| RealField::new(&g, v).unwrap())
    })
}

fn band_limited(grid: &Grid, seed: u64) -> SpectralField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SpectralField::random_band_limited(grid, grid.n() / 3, &mut rng)
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn parseval(f in field()) {
        let hat = f.forward();
        prop_assert!(close(f.norm_l2(), hat.norm_l2(), 1e-12));
        prop_assert!(close(f.norm_l2().powi(2), hat.l2_inner(&hat).unwrap(), 1e-12));
    }

    #[test]
    fn real_fields_have_hermitian_spectra(f in field()) {
        let hat = f.forward();
        prop_assert!(hat.hermitian_defect() <= 1e-13 * (1.0 + hat.max_abs()));
    }

    #[test]
    fn transforms_round_trip(f in field()) {
        let back = f.forward().inverse();
        for (a, b) in f.values().iter().zip(back.values()) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + f.max_abs()));
        }
    }

    #[test]
    fn sobolev_norm_grows_with_order(f in field(), s in 0.0f64..4.0, ds in 0.0f64..2.0) {
        let hat = f.forward();
        prop_assert!(hat.sobolev_norm(s) <= hat.sobolev_norm(s + ds) * (1.0 + 1e-12));
    }

    #[test]
    fn nskf_round_trip_is_bitwise(
        n in 4usize..7,
        dim in 2usize..4,
        length in 0.1f64..100.0,
        seed in any::<u64>(),
    ) {
        let grid = Grid::new(dim, 2 * n, length).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..grid.len())
            .map(|_| f64::from_bits(rand::Rng::gen::<u64>(&mut rng) & !(0x7ff << 52)))
            .collect();
        let f = RealField::new(&grid, values).unwrap();
        let g = decode_field(&encode_field(&f)).unwrap();
        prop_assert_eq!(g.grid(), f.grid());
        for (a, b) in f.values().iter().zip(g.values()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn relaxation_is_a_contraction(g in grid_2d(), alpha in 0.5f64..64.0, seed in any::<u64>()) {
        let a = RelaxationParam::new(alpha).unwrap();
        let f = band_limited(&g, seed);
        let kf = apply_k_alpha(&f, a);
        for s in [0.0, 1.0, 2.0] {
            prop_assert!(kf.sobolev_norm(s) <= f.sobolev_norm(s) * (1.0 + 1e-12));
        }
        // |1 - alpha^2/(alpha^2+|k|^2)| <= (1+|k|^2)/alpha^2
        let mut gap = f.clone();
        gap.axpy(-1.0, &kf);
        prop_assert!(gap.norm_l2() <= f.sobolev_norm(2.0) / (alpha * alpha) * (1.0 + 1e-12));
    }

    #[test]
    fn leray_projection_is_idempotent_and_solenoidal(g in grid_2d(), seed in any::<u64>()) {
        let u = vec![band_limited(&g, seed), band_limited(&g, seed ^ 1)];
        let p = leray_project(&u);
        let scale = 1.0 + u.iter().map(|c| c.sobolev_norm(1.0)).sum::<f64>();
        prop_assert!(divergence(&p).norm_l2() <= 1e-12 * scale);
        let pp = leray_project(&p);
        for (a, b) in p.iter().zip(&pp) {
            let mut d = a.clone();
            d.axpy(-1.0, b);
            prop_assert!(d.norm_l2() <= 1e-13 * scale);
        }
    }

    #[test]
    fn resampling_preserves_resolved_modes(seed in any::<u64>(), n in prop::sample::select(vec![8usize, 12, 16])) {
        let coarse = Grid::new(2, n, 2.0).unwrap();
        let fine = Grid::new(2, 2 * n, 2.0).unwrap();
        let f = band_limited(&coarse, seed);
        let back = f.resample(&fine).unwrap().resample(&coarse).unwrap();
        let mut d = back.clone();
        d.axpy(-1.0, &f);
        prop_assert!(d.norm_l2() <= 1e-14 * (1.0 + f.norm_l2()));
        prop_assert!(close(f.resample(&fine).unwrap().norm_l2(), f.norm_l2(), 1e-12));
    }

    #[test]
    fn power_law_fit_recovers_the_exponent(
        slope in -4.0f64..4.0,
        c in 1e-6f64..1e3,
        start in 1.0f64..10.0,
    ) {
        let points: Vec<(f64, f64)> = (0..4)
            .map(|i| {
                let p = start * 2f64.powi(i);
                (p, c * p.powf(slope))
            })
            .collect();
        let fit = fit_power_law(&points).unwrap();
        prop_assert!((fit.slope - slope).abs() <= 1e-9);
        prop_assert!(fit.r_squared >= 1.0 - 1e-9 || slope.abs() < 1e-6);
    }
}

fn random_state(seed: u64, amplitude: f64) -> FlowState {
    let g = Grid::new(2, 32, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rho = SpectralField::random_band_limited(&g, 3, &mut rng);
    let scale = 0.3 / rho.inverse().max_abs().max(1e-12);
    rho = rho.scaled(scale);
    let u: Vec<SpectralField> = (0..2)
        .map(|_| SpectralField::random_band_limited(&g, 3, &mut rng).scaled(amplitude))
        .collect();
    let rho = rho.inverse().map(|v| 1.0 + v);
    FlowState::new(rho, inverse_vec(&leray_project(&u))).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn short_runs_keep_the_structural_invariants(
        seed in any::<u64>(),
        amplitude in 0.05f64..0.3,
        system in prop::sample::select(vec![System::RelaxedInsk, System::LocalInsk, System::NavierStokes]),
    ) {
        let init = random_state(seed, amplitude);
        let params = PhysParams::new(system, 0.5, 8.0, 1.0).unwrap();
        let opts = SimulateOptions { t_end: 0.02, frames: 4, ..SimulateOptions::default() };
        let mut mon = InvariantMonitor::new();
        let traj = simulate(&init, &params, &opts, &mut [&mut mon as &mut dyn Monitor]).unwrap();
        prop_assert!(traj.blow_up.is_none());
        prop_assert!(mon.max_divergence <= 1e-8);
        prop_assert!(mon.relative_momentum_drift() <= 1e-8);
        // Extrema of the band-limited initial density, not just its samples.
        let fine = init.rho.forward().resample(&Grid::new(2, 256, 1.0).unwrap()).unwrap().inverse();
        let (lo, hi) = (fine.min(), fine.max());
        let slack = 1e-3 * (hi - lo);
        for frame in &traj.frames {
            prop_assert!(frame.rho.min() >= lo - slack && frame.rho.max() <= hi + slack);
        }
        let report = energy_report(&traj, &params);
        prop_assert!(report.max_abs_residual() <= 1e-6 * energy(&init.clone().with_eta(), &params));
        prop_assert!(report.energy.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
    }
}
