use std::f64::consts::PI;

use cfris::linalg::{fro2, C64};
use cfris::rng::stream;
use cfris::scenario::{
    build_los_mean, generate_layout, generate_network, generate_statistics, pathloss, pathloss_db, steering_vector, SystemConfig, Upa,
};
use proptest::prelude::*;

fn cfg(seed: u64) -> SystemConfig {
    let mut c = SystemConfig::with_dims(3, 2, 2, 4, 2, 8);
    c.seed = seed;
    c
}

#[test]
fn same_seed_gives_same_layout() {
    let c = cfg(11);
    let a = generate_layout(&c, &mut stream(5));
    let b = generate_layout(&c, &mut stream(5));
    assert_eq!(a, b);
}

#[test]
fn zero_radius_puts_ris_on_anchor_ue() {
    let mut c = cfg(0);
    c.ris_radius = 0.0;
    let lay = generate_layout(&c, &mut stream(9));
    for (k, p) in lay.ris_positions.iter().enumerate() {
        assert_eq!(*p, lay.ue_positions[k % c.n]);
    }
}

#[test]
fn ris_stays_within_radius() {
    let c = cfg(0);
    let lay = generate_layout(&c, &mut stream(2));
    for (k, p) in lay.ris_positions.iter().enumerate() {
        let u = lay.ue_positions[k % c.n];
        assert!(((p[0] - u[0]).powi(2) + (p[1] - u[1]).powi(2)).sqrt() <= c.ris_radius + 1e-12);
    }
}

#[test]
fn ue_positions_are_uniform_over_the_square() {
    let mut c = SystemConfig::with_dims(1, 1, 0, 1, 1, 1);
    c.area_side = 1000.0;
    let mut rng = stream(77);
    let xs: Vec<f64> = (0..10_000).map(|_| generate_layout(&c, &mut rng).ue_positions[0][0]).collect();
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    // uniform on [0, a]: std a/√12
    let se = 1000.0 / 12f64.sqrt() / (xs.len() as f64).sqrt();
    assert!((m - 500.0).abs() <= 3.0 * se, "mean {m}, se {se}");
}

#[test]
fn pathloss_values() {
    assert_eq!(pathloss_db(1.0, 3.8), -30.0);
    assert_eq!(pathloss_db(1.0, 2.0), -30.0);
    assert!((pathloss_db(100.0, 2.0) + 70.0).abs() < 1e-12);
    assert!((pathloss_db(1000.0, 3.8) + 144.0).abs() < 1e-12);
}

#[test]
fn short_distances_are_clamped() {
    let pl = pathloss(0.2, 3.0);
    assert!(pl.clamped);
    assert_eq!(pl.db, -30.0);
    assert!(!pathloss(1.0, 3.0).clamped);
}

#[test]
fn broadside_steering_is_all_ones() {
    let a = steering_vector(0.0, PI / 2.0, 3, 2, 0.5);
    for z in a.iter() {
        assert!((z - C64::new(1.0, 0.0)).norm() < 1e-15);
    }
}

#[test]
fn half_wavelength_endfire_alternates() {
    let a = steering_vector(PI / 2.0, PI / 2.0, 2, 1, 0.5);
    assert!((a[0] - C64::new(1.0, 0.0)).norm() < 1e-12);
    assert!((a[1] - C64::new(-1.0, 0.0)).norm() < 1e-12);
}

#[test]
fn los_mean_is_rank_one_with_target_power() {
    let (beta, kappa) = (2e-7, 3.0);
    let m = build_los_mean((0.3, 1.2), (-0.4, 1.7), Upa { nh: 2, nv: 2 }, Upa { nh: 2, nv: 1 }, 0.5, beta, kappa);
    let sv = m.singular_values();
    assert!(sv[1] / sv[0] < 1e-12);
    let want = 4.0 * beta * kappa / (kappa + 1.0);
    assert!((fro2(&m) - want).abs() <= 1e-12 * want);
}

#[test]
fn scalar_los_mean_magnitude() {
    let (beta, kappa) = (0.5, 10.0);
    let one = Upa { nh: 1, nv: 1 };
    let m = build_los_mean((0.1, 1.0), (2.0, 1.4), one, one, 0.5, beta, kappa);
    assert!((m[(0, 0)].norm() - (beta * kappa / (kappa + 1.0)).sqrt()).abs() < 1e-14);
}

#[test]
fn pure_los_limit_has_no_scattering() {
    let mut c = cfg(3);
    c.set_kappa(1e12);
    let (_, st) = generate_network(&c).unwrap();
    for link in st.links() {
        assert!(link.scatter_power() / link.beta <= 1e-10);
    }
}

#[test]
fn pure_nlos_has_zero_mean() {
    let mut c = cfg(3);
    c.set_kappa(0.0);
    let (_, st) = generate_network(&c).unwrap();
    for link in st.links() {
        assert_eq!(fro2(&link.mean), 0.0);
    }
}

#[test]
fn every_link_meets_normalization() {
    for seed in 0..4 {
        let (_, st) = generate_network(&cfg(seed)).unwrap();
        for link in st.links() {
            assert!(link.normalization_error() <= 1e-10, "{}", link.normalization_error());
            assert!(link.var_profile.iter().all(|&v| v >= 0.0));
            for m in [&link.rx_corr, &link.tx_corr] {
                let sv = m.singular_values();
                assert!(sv.min() > 1e-8 * sv.max());
            }
        }
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = cfg(0);
    c.mu = vec![0.0; c.n];
    assert!(c.validate().is_err());
    let mut c = cfg(0);
    c.sigma2 = 0.0;
    assert!(c.validate().is_err());
    let mut c = cfg(0);
    c.ap_array = Upa { nh: 3, nv: 1 };
    assert!(c.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn statistics_are_bit_reproducible(seed in any::<u64>()) {
        let c = cfg(seed);
        let (la, a) = generate_network(&c).unwrap();
        let (lb, b) = generate_network(&c).unwrap();
        prop_assert_eq!(la, lb);
        for (x, y) in a.links().zip(b.links()) {
            prop_assert_eq!(&x.mean, &y.mean);
            prop_assert_eq!(&x.rx_corr, &y.rx_corr);
            prop_assert_eq!(&x.tx_corr, &y.tx_corr);
            prop_assert_eq!(&x.var_profile, &y.var_profile);
        }
    }

    #[test]
    fn energy_split_follows_rician_factor(seed in any::<u64>(), kappa in 0.0f64..50.0) {
        let mut c = cfg(seed);
        c.set_kappa(kappa);
        let lay = generate_layout(&c, &mut stream(seed));
        let st = generate_statistics(&c, &lay, &mut stream(seed ^ 1));
        for link in st.links() {
            let (los, sc) = (link.los_power(), link.scatter_power());
            let frac = los / (los + sc);
            prop_assert!((frac - kappa / (kappa + 1.0)).abs() <= 1e-10);
            prop_assert!(link.normalization_error() <= 1e-10);
        }
    }

    #[test]
    fn steering_entries_are_unit_modulus(theta in -PI..PI, phi in 0.0..PI, nh in 1usize..5, nv in 1usize..5, delta in 0.1f64..1.0) {
        let a = steering_vector(theta, phi, nh, nv, delta);
        prop_assert_eq!(a.len(), nh * nv);
        for z in a.iter() {
            prop_assert!((z.norm() - 1.0).abs() < 1e-12);
        }
        prop_assert!((a.norm_squared() - (nh * nv) as f64).abs() < 1e-9);
    }

    #[test]
    fn array_factorization_matches_count(n in 1usize..200) {
        let u = Upa::near_square(n);
        prop_assert_eq!(u.count(), n);
        prop_assert!(u.nh >= u.nv);
    }
}
