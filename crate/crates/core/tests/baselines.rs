use cfris::baselines::{fcp_wmmse, lsfd, FcpConfig};
use cfris::channel::{effective_channels, DrawSet};
use cfris::detection::{achievable_rate_mc, optimal_rate_mc, Detector, TransceiverState};
use cfris::linalg::herm_eigvals;
use cfris::scenario::{NetworkStatistics, Problem, SystemConfig};

fn problem(l: usize, n: usize, seed: u64) -> Problem {
    let mut cfg = SystemConfig::with_dims(l, n, 1, 4, 2, 4);
    cfg.seed = seed;
    Problem::from_config(&cfg).unwrap().working_units()
}

/// Water-filling capacity of one link with total power p.
fn waterfill_capacity(gains: &[f64], p: f64) -> f64 {
    let mut g: Vec<f64> = gains.iter().copied().filter(|g| *g > 1e-14).collect();
    g.sort_by(|a, b| b.partial_cmp(a).unwrap());
    for m in (1..=g.len()).rev() {
        let level = (p + g[..m].iter().map(|x| 1.0 / x).sum::<f64>()) / m as f64;
        if level > 1.0 / g[m - 1] {
            return g[..m].iter().map(|x| (level * x).log2()).sum();
        }
    }
    0.0
}

#[test]
fn single_ap_lsfd_equals_rate_at_optimal_combiner() {
    let pr = problem(1, 2, 5);
    let draws = DrawSet::new(2, 200);
    let res = lsfd(&pr, Detector::Mmse, draws);
    let mut st = TransceiverState::identity(&pr);
    let (_, a) = optimal_rate_mc(&pr, &st.w, &st.theta, draws, Detector::Mmse);
    st.a = a;
    let direct = achievable_rate_mc(&pr, &st, draws);
    assert!((res.weighted_sum - direct.weighted_sum).abs() <= 1e-9 * direct.weighted_sum.abs().max(1.0));
}

#[test]
fn mmse_local_detection_beats_mr() {
    for seed in 0..3 {
        let pr = problem(2, 2, seed);
        let draws = DrawSet::new(seed, 300);
        let mmse = lsfd(&pr, Detector::Mmse, draws);
        let mr = lsfd(&pr, Detector::Mr, draws);
        assert!(
            mmse.weighted_sum >= mr.weighted_sum - 1e-9,
            "seed {seed}: {} < {}",
            mmse.weighted_sum,
            mr.weighted_sum
        );
    }
}

#[test]
fn zero_channels_give_zero_rates() {
    let pr = problem(2, 2, 1);
    let zero = Problem {
        stats: NetworkStatistics::zero(pr.stats.dims, &pr.stats.l_k),
        ..pr.clone()
    };
    let draws = DrawSet::new(0, 20);
    for kind in [Detector::Mmse, Detector::Mr] {
        let r = lsfd(&zero, kind, draws);
        assert!(r.weighted_sum.abs() < 1e-12, "{kind:?}: {}", r.weighted_sum);
    }
    let theta = TransceiverState::identity(&zero).theta;
    let f = fcp_wmmse(&zero, &theta, draws, &FcpConfig::default()).unwrap();
    assert!(f.weighted_sum.abs() < 1e-12);
}

#[test]
fn single_link_fcp_reaches_waterfilling_capacity() {
    let pr = problem(1, 1, 7);
    let draws = DrawSet::new(3, 40);
    let theta = TransceiverState::identity(&pr).theta;
    let cfg = FcpConfig {
        wmmse_iters: 400,
        ..Default::default()
    };
    let res = fcp_wmmse(&pr, &theta, draws, &cfg).unwrap();
    let mut cap = 0.0;
    for i in 0..draws.trials {
        let h = &effective_channels(&pr.stats, &draws.draw(&pr.stats, i), &theta)[0];
        let g: Vec<f64> = herm_eigvals(&(h.adjoint() * h)).iter().map(|e| e / pr.sigma2).collect();
        cap += waterfill_capacity(&g, pr.p[0]);
    }
    cap /= draws.trials as f64;
    let rel = (res.weighted_sum / pr.mu[0] - cap).abs() / cap;
    assert!(rel < 1e-3, "fcp {} vs capacity {cap}", res.weighted_sum);
}

#[test]
fn fcp_dominates_lsfd() {
    let pr = problem(2, 2, 4);
    let draws = DrawSet::new(8, 100);
    let theta = TransceiverState::identity(&pr).theta;
    let f = fcp_wmmse(&pr, &theta, draws, &FcpConfig::default()).unwrap();
    let l = lsfd(&pr, Detector::Mmse, draws);
    assert!(f.weighted_sum >= l.weighted_sum, "{} < {}", f.weighted_sum, l.weighted_sum);
}

#[test]
fn fcp_phase_descent_does_not_hurt() {
    let pr = problem(1, 2, 6);
    let draws = DrawSet::new(1, 8);
    let theta = TransceiverState::identity(&pr).theta;
    let base = fcp_wmmse(&pr, &theta, draws, &FcpConfig::default()).unwrap();
    let tuned = fcp_wmmse(
        &pr,
        &theta,
        draws,
        &FcpConfig {
            theta_rounds: 2,
            ..Default::default()
        },
    )
    .unwrap();
    assert!(
        tuned.weighted_sum >= base.weighted_sum * (1.0 - 1e-6),
        "{} < {}",
        tuned.weighted_sum,
        base.weighted_sum
    );
}
