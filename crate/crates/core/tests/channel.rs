use cfris::channel::{
    effective_channels, eta, eta_tilde, sample_channel, sample_link, stack, zeta0, zeta0_tilde, zeta_k, zeta_k_tilde, ChannelRealization,
};
use cfris::linalg::{fro2, herm, herm_eigvals, hermitian_defect, max_abs, CMat, RMat, C64};
use cfris::rng::{cgauss_mat, stream};
use cfris::scenario::{generate_network, random_correlation, Dims, LinkStatistics, NetworkStatistics, SystemConfig};
use proptest::prelude::*;
use rand::Rng;

fn network(seed: u64, kappa: f64) -> NetworkStatistics {
    let mut c = SystemConfig::with_dims(2, 2, 1, 3, 2, 2);
    c.seed = seed;
    c.set_kappa(kappa);
    generate_network(&c).unwrap().1
}

/// Normalize a link to unit large-scale gain so tolerances are scale-free.
fn unit(link: &LinkStatistics) -> LinkStatistics {
    link.scaled(1.0 / link.beta.sqrt())
}

fn random_link(seed: u64, rx: usize, tx: usize, with_mean: bool) -> LinkStatistics {
    let mut rng = stream(seed);
    LinkStatistics {
        mean: if with_mean {
            cgauss_mat(&mut rng, rx, tx, 1.0)
        } else {
            CMat::zeros(rx, tx)
        },
        rx_corr: random_correlation(&mut rng, rx, 0.7),
        tx_corr: random_correlation(&mut rng, tx, 0.7),
        var_profile: RMat::from_fn(rx, tx, |_, _| rng.random_range(0.1..1.0)),
        beta: 1.0,
        kappa: 1.0,
    }
}

fn random_herm(rng: &mut impl Rng, n: usize) -> CMat {
    herm(&cgauss_mat(rng, n, n, 1.0))
}

fn random_psd(rng: &mut impl Rng, n: usize) -> CMat {
    let x = cgauss_mat(rng, n, n + 1, 1.0);
    &x * x.adjoint()
}

fn rel_fro(a: &CMat, b: &CMat) -> f64 {
    fro2(&(a - b)).sqrt() / fro2(b).sqrt()
}

/// vec() stacking columns.
fn vec_of(m: &CMat) -> Vec<C64> {
    m.iter().copied().collect()
}

#[test]
fn zero_profile_gives_the_mean_exactly() {
    let mut link = random_link(1, 3, 2, true);
    link.var_profile = RMat::zeros(3, 2);
    let mut rng = stream(4);
    for _ in 0..5 {
        assert_eq!(sample_link(&link, &mut rng), link.mean);
    }
}

#[test]
fn scattering_covariance_matches_kronecker_model() {
    let link = random_link(2, 2, 2, false);
    let draws = 10_000;
    let mut rng = stream(10);
    let mut cov = CMat::zeros(4, 4);
    for _ in 0..draws {
        let v = CMat::from_column_slice(4, 1, &vec_of(&sample_link(&link, &mut rng)));
        cov += &v * v.adjoint();
    }
    cov /= C64::new(draws as f64, 0.0);
    // vec(T (M ⊙ X) P†) = (conj(P) ⊗ T) vec(M ⊙ X), entries of X have variance 1/tx
    let k = link.tx_corr.map(|z| z.conj()).kronecker(&link.rx_corr);
    let prof: Vec<C64> = link.var_profile.iter().map(|m| C64::new(m * m / 2.0, 0.0)).collect();
    let want = &k * CMat::from_diagonal(&nalgebra::DVector::from_vec(prof)) * k.adjoint();
    let err = max_abs(&(&cov - &want)) / max_abs(&want);
    assert!(err <= 0.05, "relative entry error {err}");
}

#[test]
fn sample_mean_matches_los_component() {
    let link = random_link(3, 2, 2, true);
    let draws = 10_000;
    let mut rng = stream(11);
    let mut sum = CMat::zeros(2, 2);
    for _ in 0..draws {
        sum += sample_link(&link, &mut rng);
    }
    let mean = sum / C64::new(draws as f64, 0.0);
    // per-entry variance from the scattering covariance diagonal
    let k = link.tx_corr.map(|z| z.conj()).kronecker(&link.rx_corr);
    for (idx, (m, want)) in mean.iter().zip(link.mean.iter()).enumerate() {
        let var: f64 = (0..4)
            .map(|j| k[(idx, j)].norm_sqr() * link.var_profile.as_slice()[j].powi(2) / 2.0)
            .sum();
        let se = (var / 2.0 / draws as f64).sqrt();
        assert!(
            (m.re - want.re).abs() <= 3.0 * se && (m.im - want.im).abs() <= 3.0 * se,
            "entry {idx}: {m} vs {want}"
        );
    }
}

#[test]
fn eta_of_white_link_is_scaled_identity() {
    let dims = Dims { l: 1, n: 1, r: 3, t: 1 };
    let mut st = NetworkStatistics::zero(dims, &[5]);
    st.g[0][0].var_profile = RMat::from_element(3, 5, 1.0);
    let out = eta(&st, 0, 0, &CMat::identity(3, 3)).unwrap();
    let want = CMat::identity(5, 5) * C64::new(3.0 / 5.0, 0.0);
    assert!(max_abs(&(&out - &want)) < 1e-14);
}

#[test]
fn eta_matches_monte_carlo() {
    let mut st = NetworkStatistics::zero(Dims { l: 1, n: 1, r: 3, t: 1 }, &[2]);
    st.g[0][0] = random_link(5, 3, 2, false);
    let mut rng = stream(6);
    let d = random_psd(&mut rng, 3);
    let dt = random_psd(&mut rng, 2);
    let draws = 100_000;
    let (mut e1, mut e2) = (CMat::zeros(2, 2), CMat::zeros(3, 3));
    for _ in 0..draws {
        let g = sample_link(&st.g[0][0], &mut rng);
        e1 += g.adjoint() * &d * &g;
        e2 += &g * &dt * g.adjoint();
    }
    let s = C64::new(1.0 / draws as f64, 0.0);
    let r1 = rel_fro(&(e1 * s), &eta(&st, 0, 0, &d).unwrap());
    let r2 = rel_fro(&(e2 * s), &eta_tilde(&st, 0, 0, &dt).unwrap());
    assert!(r1 <= 0.02 && r2 <= 0.02, "{r1} {r2}");
}

#[test]
fn zeta_maps_match_monte_carlo() {
    let st = network(7, 0.0);
    let st = {
        let mut s = st.clone();
        for row in s.f0.iter_mut().chain(s.f.iter_mut()) {
            for link in row.iter_mut() {
                *link = unit(link);
            }
        }
        s
    };
    let (r, m) = (st.dims.r, st.l_k[0]);
    let tt = st.tt();
    let mut rng = stream(8);
    let zt = random_herm(&mut rng, tt);
    let z0 = random_herm(&mut rng, r);
    let zk = random_herm(&mut rng, m);
    let draws = 100_000;
    let mut acc = [CMat::zeros(r, r), CMat::zeros(m, m), CMat::zeros(tt, tt), CMat::zeros(tt, tt)];
    for _ in 0..draws {
        let re = sample_channel(&st, &mut rng);
        let f0l = cfris::linalg::hstack(&re.f0.iter().map(|row| &row[0]).collect::<Vec<_>>());
        let fk = cfris::linalg::hstack(&re.f.iter().map(|row| &row[0]).collect::<Vec<_>>());
        acc[0] += &f0l * &zt * f0l.adjoint();
        acc[1] += &fk * &zt * fk.adjoint();
        acc[2] += f0l.adjoint() * &z0 * &f0l;
        acc[3] += fk.adjoint() * &zk * &fk;
    }
    let s = C64::new(1.0 / draws as f64, 0.0);
    let got = [
        zeta0_tilde(&st, 0, &zt).unwrap(),
        zeta_k_tilde(&st, 0, &zt).unwrap(),
        zeta0(&st, 0, &z0).unwrap(),
        zeta_k(&st, 0, &zk).unwrap(),
    ];
    for (i, (a, g)) in acc.iter().zip(&got).enumerate() {
        let e = rel_fro(&(a * s), g);
        assert!(e <= 0.02, "map {i}: {e}");
    }
}

#[test]
fn zero_profiles_give_zero_maps() {
    let st = NetworkStatistics::zero(Dims { l: 2, n: 2, r: 3, t: 2 }, &[4]);
    let mut rng = stream(0);
    assert_eq!(max_abs(&zeta0(&st, 1, &random_herm(&mut rng, 3)).unwrap()), 0.0);
    assert_eq!(max_abs(&zeta0_tilde(&st, 1, &random_herm(&mut rng, 4)).unwrap()), 0.0);
    assert_eq!(max_abs(&eta(&st, 0, 1, &random_herm(&mut rng, 3)).unwrap()), 0.0);
}

#[test]
fn single_ue_zeta_is_the_link_map() {
    let mut c = SystemConfig::with_dims(1, 1, 1, 3, 2, 2);
    c.seed = 4;
    let st = generate_network(&c).unwrap().1;
    let d = random_herm(&mut stream(1), 3);
    assert_eq!(zeta0(&st, 0, &d).unwrap(), st.f0[0][0].left_map(&d));
}

#[test]
fn maps_reject_bad_inputs() {
    let st = network(1, 3.0);
    let mut rng = stream(2);
    let nonherm = cgauss_mat(&mut rng, 3, 3, 1.0);
    assert!(eta(&st, 0, 0, &nonherm).is_err());
    assert!(zeta0(&st, 0, &CMat::identity(2, 2)).is_err());
    assert!(eta(&st, 5, 0, &CMat::identity(3, 3)).is_err());
}

#[test]
fn without_ris_channel_is_the_direct_link() {
    let st = network(3, 3.0).without_ris();
    let re = sample_channel(&st, &mut stream(1));
    let sc = stack(&st, &re, &[]).unwrap();
    for (l, s) in sc.iter().enumerate() {
        let f0l = cfris::linalg::hstack(&re.f0.iter().map(|row| &row[l]).collect::<Vec<_>>());
        assert_eq!(s.h, f0l);
    }
}

#[test]
fn identity_phases_sum_direct_and_cascaded_paths() {
    let st = network(4, 3.0);
    let re = sample_channel(&st, &mut stream(2));
    let theta = vec![C64::new(1.0, 0.0); st.l_r()];
    let sc = stack(&st, &re, &theta).unwrap();
    let eff = effective_channels(&st, &re, &theta);
    for l in 0..st.dims.l {
        let mut want = cfris::linalg::hstack(&re.f0.iter().map(|row| &row[l]).collect::<Vec<_>>());
        for n in 0..st.dims.n {
            let blk = &re.g[0][l] * &re.f[n][0];
            let mut v = want.columns_mut(n * st.dims.t, st.dims.t);
            v += blk;
        }
        assert!(max_abs(&(&sc[l].h - &want)) < 1e-12 * max_abs(&want));
        assert!(max_abs(&(&eff[l] - &want)) < 1e-12 * max_abs(&want));
        assert!(sc[l].theta_hat[..st.dims.r].iter().all(|z| *z == C64::new(1.0, 0.0)));
    }
}

#[test]
fn scalar_network_expands_by_hand() {
    let st = NetworkStatistics::zero(Dims { l: 1, n: 1, r: 1, t: 1 }, &[1]);
    let (a, b, g) = (C64::new(0.3, -0.2), C64::new(-1.1, 0.4), C64::new(0.7, 0.9));
    let re = ChannelRealization {
        f0: vec![vec![CMat::from_element(1, 1, a)]],
        f: vec![vec![CMat::from_element(1, 1, b)]],
        g: vec![vec![CMat::from_element(1, 1, g)]],
    };
    let th = C64::from_polar(1.0, 0.8);
    let h = stack(&st, &re, &[th]).unwrap()[0].h[(0, 0)];
    assert!((h - (a + g * th * b)).norm() < 1e-15);
    assert!(stack(&st, &re, &[th, th]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn correlation_maps_are_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let st = network(seed % 1000, 3.0);
        let mut rng = stream(seed);
        let (r, m, tt) = (st.dims.r, st.l_k[0], st.tt());
        type Map<'a> = Box<dyn Fn(&CMat) -> CMat + 'a>;
        let maps: Vec<(usize, Map<'_>)> = vec![
            (r, Box::new(|d: &CMat| eta(&st, 0, 1, d).unwrap())),
            (m, Box::new(|d: &CMat| eta_tilde(&st, 0, 1, d).unwrap())),
            (r, Box::new(|d: &CMat| zeta0(&st, 0, d).unwrap())),
            (tt, Box::new(|d: &CMat| zeta0_tilde(&st, 0, d).unwrap())),
            (m, Box::new(|d: &CMat| zeta_k(&st, 0, d).unwrap())),
            (tt, Box::new(|d: &CMat| zeta_k_tilde(&st, 0, d).unwrap())),
        ];
        for (dim, f) in &maps {
            let d1 = random_herm(&mut rng, *dim);
            let d2 = random_herm(&mut rng, *dim);
            let comb = &d1 * C64::new(a, 0.0) + &d2 * C64::new(b, 0.0);
            let lhs = f(&comb);
            let rhs = f(&d1) * C64::new(a, 0.0) + f(&d2) * C64::new(b, 0.0);
            let scale = max_abs(&f(&d1)).max(max_abs(&f(&d2))).max(f64::MIN_POSITIVE);
            prop_assert!(max_abs(&(&lhs - &rhs)) <= 1e-12 * scale * (a.abs() + b.abs() + 1.0));
            prop_assert!(hermitian_defect(&lhs) <= 1e-12);
            let p = f(&random_psd(&mut rng, *dim));
            let ev = herm_eigvals(&herm(&p));
            prop_assert!(ev[0] >= -1e-12 * ev[ev.len() - 1].abs().max(f64::MIN_POSITIVE));
        }
    }

    #[test]
    fn stacking_agrees_with_effective_channels(seed in any::<u64>(), phase in 0.0f64..6.3) {
        let st = network(seed % 1000, 3.0);
        let re = sample_channel(&st, &mut stream(seed));
        let theta: Vec<C64> = (0..st.l_r()).map(|i| C64::from_polar(1.0, phase * (i + 1) as f64)).collect();
        let sc = stack(&st, &re, &theta).unwrap();
        let eff = effective_channels(&st, &re, &theta);
        for (s, e) in sc.iter().zip(&eff) {
            prop_assert!(max_abs(&(&s.h - e)) <= 1e-12 * max_abs(e));
        }
    }
}
