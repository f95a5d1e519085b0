use bios_core::beamforming::*;
use bios_core::config::{validate_config, RawConfig};
use bios_core::estimator::{nmse_kron, total_overhead};
use bios_core::experiment::{read_csv, read_json, write_csv, write_json, ResultRow};
use bios_core::geometry::*;
use bios_core::linalg::{cn_matrix, min_eigenvalue, unit_phase_vector, CMat, C64};
use bios_core::signal::{kron_gauge, RisMode, Surface};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small_system(seed: u64, mode: RisMode, eps: f64) -> DownlinkSystem {
    let mut r = rng(seed);
    let m = 4;
    let g = cn_matrix(&mut r, 3, m, 1.0);
    let sides = vec![Side::Fle, Side::Fra, Side::Fra];
    let h = sides.iter().map(|_| cn_matrix(&mut r, m, 2, 1.0)).collect();
    let l = cn_matrix(&mut r, m, m, 0.3);
    DownlinkSystem::new(g, h, sides, l, Surface::new(mode, eps).unwrap(), 0.2).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn responses_have_unit_norm(n in 1usize..16, x in -3.0f64..3.0, mx in 1usize..6, my in 1usize..6,
                                el in 0.0f64..std::f64::consts::PI, az in 0.0f64..std::f64::consts::TAU) {
        prop_assert!((ula_response(n, x).unwrap().norm() - 1.0).abs() < 1e-12);
        prop_assert!((upa_response(mx, my, el, az).unwrap().norm() - 1.0).abs() < 1e-12);
        let f = radiation_pattern(el);
        prop_assert!((0.0..=1.0).contains(&f));
    }

    #[test]
    fn sampled_paths_respect_ranges(seed in any::<u64>(), count in 1usize..8, fra in any::<bool>()) {
        let side = if fra { Side::Fra } else { Side::Fle };
        let a = sample_paths(&mut rng(seed), count, side).unwrap();
        let b = sample_paths(&mut rng(seed), count, side).unwrap();
        prop_assert_eq!(&a, &b);
        let q = std::f64::consts::FRAC_PI_4;
        for i in 0..count {
            let el = a.bios_elevation[i];
            let in_range = if fra { (3.0 * q..=4.0 * q).contains(&el) } else { (0.0..=q).contains(&el) };
            prop_assert!(in_range);
            prop_assert!((0.0..std::f64::consts::TAU).contains(&a.bios_azimuth[i]));
            prop_assert!((0.0..=std::f64::consts::PI).contains(&a.ula_angle[i]));
        }
    }

    #[test]
    fn near_field_is_deterministic_and_symmetric(mx in 1usize..4, my in 1usize..4, gap in 0.01f64..0.1) {
        let geo = ArrayGeometry { m_x: mx, m_y: my, layer_gap: gap, ..Default::default() };
        let a = near_field_l(&geo).unwrap();
        prop_assert_eq!(&a, &near_field_l(&geo).unwrap());
        prop_assert!((&a - a.transpose()).norm() <= 1e-14 * a.norm());
    }

    #[test]
    fn kron_nmse_is_gauge_invariant(seed in any::<u64>(), re in 0.2f64..3.0, im in -2.0f64..2.0) {
        let mut r = rng(seed);
        let g = cn_matrix(&mut r, 3, 4, 1.0);
        let h = cn_matrix(&mut r, 4, 2, 1.0);
        let a = C64::new(re, im);
        let v = nmse_kron(&g, &h, &(&g / a), &(&h * a)).unwrap();
        prop_assert!(v < 1e-24);
        let other = cn_matrix(&mut r, 4, 2, 1.0);
        prop_assert!(nmse_kron(&g, &h, &g, &other).unwrap() >= 0.0);
    }

    #[test]
    fn kron_factors_unique_up_to_scalar(seed in any::<u64>(), re in 0.2f64..3.0, im in -2.0f64..2.0) {
        let mut r = rng(seed);
        let c = cn_matrix(&mut r, 2, 3, 1.0);
        let d = cn_matrix(&mut r, 3, 2, 1.0);
        let a = C64::new(re, im);
        let got = kron_gauge(&(&c * a), &(&d / a), &c, &d, 1e-12).unwrap();
        prop_assert!((got - a).norm() < 1e-10 * a.norm());
        let e = cn_matrix(&mut r, 3, 2, 1.0);
        prop_assert!(kron_gauge(&c, &e, &c, &d, 1e-9).is_none());
    }

    #[test]
    fn block_updates_keep_constraints(seed in any::<u64>(), eps in 0.05f64..0.95, mode in 0usize..3) {
        let mode = [RisMode::Bios, RisMode::Ios, RisMode::Irs][mode];
        let sys = small_system(seed, mode, eps);
        let mut st = BeamformerState::random(&mut rng(seed ^ 1), &sys, 1);
        let he = sys.effective_channels(&st.phi_d1, &st.phi_d2);
        let f0 = wmmse_objective(&he, &st, sys.sigma2);
        update_w_psi(&he, &mut st, sys.sigma2).unwrap();
        let f1 = wmmse_objective(&he, &st, sys.sigma2);
        update_f(&he, &mut st, sys.sigma2).unwrap();
        let f2 = wmmse_objective(&he, &st, sys.sigma2);
        prop_assert!((st.power() - 1.0).abs() < 1e-10);
        let (xi, rho) = build_xi_rho(&sys, &st);
        prop_assert!(min_eigenvalue(&xi) >= -1e-10 * xi.norm().max(1.0));
        cd_sweep(&mut st.phi_d1, &xi, &rho);
        let f3 = wmmse_objective(&sys.effective_channels(&st.phi_d1, &st.phi_d2), &st, sys.sigma2);
        let tol = 1e-9 * f0.abs().max(1.0);
        prop_assert!(f1 <= f0 + tol && f2 <= f1 + tol && f3 <= f2 + tol, "{f0} {f1} {f2} {f3}");
        prop_assert!(st.phi_d1.iter().all(|z| (z.norm() - 1.0).abs() < 1e-12));
        for k in 0..sys.k() {
            prop_assert!((&st.psi[k] - st.psi[k].adjoint()).norm() < 1e-9 * st.psi[k].norm());
            prop_assert!(min_eigenvalue(&st.psi[k]) > 0.0);
        }
    }

    #[test]
    fn cd_update_never_increases(seed in any::<u64>(), m in 1usize..6) {
        let mut r = rng(seed);
        let a = cn_matrix(&mut r, m, m, 1.0);
        let xi = &a * a.adjoint();
        let rho = cn_matrix(&mut r, m, 1, 1.0).column(0).into_owned();
        let mut phi = unit_phase_vector(&mut r, m);
        let mut prev = quadratic_value(&phi, &xi, &rho);
        for i in 0..m {
            phi[i] = cd_update_phi(&phi, &xi, &rho, i);
            let v = quadratic_value(&phi, &xi, &rho);
            prop_assert!(v <= prev + 1e-12 * prev.abs().max(1.0));
            prev = v;
        }
    }

    #[test]
    fn rates_are_nonnegative_and_discounted(seed in any::<u64>(), t in 0usize..100) {
        let sys = small_system(seed, RisMode::Bios, 0.5);
        let st = BeamformerState::random(&mut rng(seed), &sys, 1);
        let he = sys.effective_channels(&st.phi_d1, &st.phi_d2);
        let full = sum_rate(&he, &st, sys.sigma2, 0, 100).unwrap();
        let part = sum_rate(&he, &st, sys.sigma2, t, 100).unwrap();
        prop_assert!(full.per_ue.iter().all(|&x| x >= 0.0));
        prop_assert!((part.sum_rate - full.sum_rate * (1.0 - t as f64 / 100.0)).abs() < 1e-9 * full.sum_rate.max(1.0));
    }

    #[test]
    fn results_round_trip(seed in any::<u64>(), trial in 0usize..1000, v in -50.0f64..2000.0,
                          a in 0.0f64..10.0, b in 0.0f64..10.0, rate in 0.0f64..100.0, name in "[a-z0-9/]{1,12}") {
        let row = ResultRow {
            scenario: name, seed, trial, sweep_value: v, pnr_db: v + 10.0, snr_db: v,
            t_g: 900, t_h: trial + 1, nmse_fra: a, nmse_avg: b, sum_rate: rate,
            iterations: trial * 3, wall_ms: a * 100.0,
        };
        let rows = vec![row.clone(), row];
        let mut csv = Vec::new();
        write_csv(&rows, &mut csv).unwrap();
        prop_assert_eq!(&read_csv(&csv[..]).unwrap(), &rows);
        let mut json = Vec::new();
        write_json(&rows, &mut json).unwrap();
        prop_assert_eq!(&read_json(&json[..]).unwrap(), &rows);
    }

    #[test]
    fn valid_overrides_round_trip(eps in 0.01f64..0.99, k_fle in 0usize..4, k_fra in 1usize..4,
                                  tau in 1usize..6, t_h in 1usize..200) {
        let text = format!(
            "epsilon = {eps}\nk_fle = {k_fle}\nk_fra = {k_fra}\nupsilon_small = 1000\n\
             upsilon_large = {}\nt_h = {t_h}", 1000 * tau
        );
        let c = validate_config(&RawConfig::from_toml_str(&text).unwrap()).unwrap();
        prop_assert_eq!(c.tau, tau);
        prop_assert_eq!(c.k(), k_fle + k_fra);
        prop_assert_eq!(c.clone().revalidate().unwrap(), c.clone());
        prop_assert_eq!(total_overhead(c.t_g, c.t_h, c.tau, c.k()), c.t_g + tau * (k_fle + k_fra) * t_h);
    }
}

#[test]
fn irs_never_beats_bios_on_shared_channels() {
    let (mut bios, mut irs) = (0.0, 0.0);
    for seed in 0..20 {
        for (mode, acc) in [(RisMode::Bios, &mut bios), (RisMode::Irs, &mut irs)] {
            let sys = small_system(seed, mode, 0.5);
            let out = wmmse_cd_solve(&sys, &WmmseOptions::default(), &mut rng(100 + seed)).unwrap();
            let he = sys.effective_channels(&out.state.phi_d1, &out.state.phi_d2);
            *acc += sum_rate(&he, &out.state, sys.sigma2, 0, 1)
                .unwrap()
                .sum_rate;
        }
    }
    assert!(irs <= bios, "irs {irs} bios {bios}");
}

#[test]
fn beamformer_state_serializes() {
    let sys = small_system(1, RisMode::Bios, 0.5);
    let st = BeamformerState::random(&mut rng(2), &sys, 1);
    let text = serde_json::to_string(&st).unwrap();
    let back: BeamformerState = serde_json::from_str(&text).unwrap();
    assert_eq!(back, st);
    let _: CMat = back.f;
}
