//! Two-layer receiver: local detection at each AP, weighted combining at the CPU,
//! and Monte-Carlo estimators of the MSE matrix and achievable rate.

use serde::{Deserialize, Serialize};

use crate::channel::{effective_channels, ChannelRealization, DrawSet};
use crate::error::{Error, Result};
use crate::linalg::{cr, eye, herm, herm_eigvals, logdet_hpd, trace, CMat, C64, ONE, ZERO};
use crate::mc;
use crate::scenario::{NetworkStatistics, Problem};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Detector {
    Mmse,
    Mr,
}

/// Current iterate of either optimizer.
#[derive(Clone, Debug)]
pub struct TransceiverState {
    /// Stacked CPU combiners, LT×T per UE.
    pub a: Vec<CMat>,
    pub v: Vec<CMat>,
    pub w: Vec<CMat>,
    /// Flattened unit-modulus phases, length L_R.
    pub theta: Vec<C64>,
}

impl TransceiverState {
    /// The unoptimized reference point: A_nl = I/L, W_n = √(p_n/T) I, Θ = I, V = I.
    pub fn identity(problem: &Problem) -> TransceiverState {
        let d = problem.dims();
        let a = (0..d.n)
            .map(|_| {
                let mut a = CMat::zeros(d.l * d.t, d.t);
                for l in 0..d.l {
                    a.view_mut((l * d.t, 0), (d.t, d.t)).copy_from(&(eye(d.t) * cr(1.0 / d.l as f64)));
                }
                a
            })
            .collect();
        TransceiverState {
            a,
            v: vec![eye(d.t); d.n],
            w: problem.p.iter().map(|&p| eye(d.t) * cr((p / d.t as f64).sqrt())).collect(),
            theta: vec![ONE; problem.stats.l_r()],
        }
    }

    pub fn max_modulus_error(&self) -> f64 {
        self.theta.iter().fold(0.0, |m, z| m.max((z.norm() - 1.0).abs()))
    }

    pub fn powers(&self) -> Vec<f64> {
        self.w.iter().map(|w| w.iter().map(|z| z.norm_sqr()).sum()).collect()
    }

    pub fn min_v_eig(&self) -> f64 {
        self.v.iter().map(|v| herm_eigvals(v)[0]).fold(f64::INFINITY, f64::min)
    }
}

/// Columns H_nl W_n for all n: X_l = H_l Ŵ.
pub fn precoded(h_l: &CMat, w: &[CMat]) -> CMat {
    let t = w[0].nrows();
    let mut x = CMat::zeros(h_l.nrows(), h_l.ncols());
    for (n, wn) in w.iter().enumerate() {
        let hn = h_l.columns(n * t, t);
        x.columns_mut(n * t, t).gemm(ONE, &hn, wn, ZERO);
    }
    x
}

/// Local detectors of one AP for all UEs side by side (R×T_t, block n = U_nl).
pub fn local_detectors(x_l: &CMat, sigma2: f64, kind: Detector) -> CMat {
    match kind {
        Detector::Mr => x_l.clone(),
        Detector::Mmse => {
            let r = x_l.nrows();
            let mut c = CMat::identity(r, r) * cr(sigma2);
            c.gemm(ONE, x_l, &x_l.adjoint(), ONE);
            let c = herm(&c);
            match c.clone().cholesky() {
                Some(ch) => ch.solve(x_l),
                None => c.lu().solve(x_l).expect("σ² > 0 keeps the local covariance invertible"),
            }
        }
    }
}

/// U_nl = (H_l Ŵ Ŵ† H_l† + σ²I)⁻¹ H_nl W_n for every UE.
pub fn local_mmse(h_l: &CMat, w: &[CMat], sigma2: f64) -> Vec<CMat> {
    let t = w[0].nrows();
    let u = local_detectors(&precoded(h_l, w), sigma2, Detector::Mmse);
    (0..w.len()).map(|n| u.columns(n * t, t).into_owned()).collect()
}

/// Φ_nm = [U_n1†H_m1; …; U_nL†H_mL] for one realization, indexed `[n][m]`.
pub fn build_phi(stats: &NetworkStatistics, real: &ChannelRealization, state: &TransceiverState, sigma2: f64, kind: Detector) -> Vec<Vec<CMat>> {
    let d = stats.dims;
    let hs = effective_channels(stats, real, &state.theta);
    let per_ap: Vec<CMat> = hs
        .iter()
        .map(|h| {
            let u = local_detectors(&precoded(h, &state.w), sigma2, kind);
            u.ad_mul(h)
        })
        .collect();
    (0..d.n)
        .map(|n| {
            (0..d.n)
                .map(|m| {
                    let mut phi = CMat::zeros(d.l * d.t, d.t);
                    for (l, p) in per_ap.iter().enumerate() {
                        phi.view_mut((l * d.t, 0), (d.t, d.t)).copy_from(&p.view((n * d.t, m * d.t), (d.t, d.t)));
                    }
                    phi
                })
                .collect()
        })
        .collect()
}

/// Second-order statistics the CPU combiner needs, per UE:
/// Ψ_n = E(Φ_nn)W_n (LT×T) and Q_n = E{Σ_m Φ_nm W_m W_m† Φ_nm† + σ²S_n} (LT×LT).
#[derive(Clone, Debug)]
pub struct Moments {
    pub psi: Vec<CMat>,
    pub q: Vec<CMat>,
}

#[derive(Clone, Debug)]
pub struct McMoments {
    pub total: Moments,
    pub batches: Vec<Moments>,
}

fn split(v: Vec<CMat>, n: usize) -> Moments {
    let mut v = v;
    let q = v.split_off(n);
    Moments { psi: v, q }
}

/// Accumulate one realization's contribution to (Ψ, Q).
fn accumulate_moments(problem: &Problem, real: &ChannelRealization, w: &[CMat], theta: &[C64], kind: Detector, acc: &mut [CMat]) {
    let d = problem.dims();
    let (t, nn, ll) = (d.t, d.n, d.l);
    let hs = effective_channels(&problem.stats, real, theta);
    let mut p = Vec::with_capacity(ll);
    let mut s = Vec::with_capacity(ll);
    for h in &hs {
        let x = precoded(h, w);
        let u = local_detectors(&x, problem.sigma2, kind);
        p.push(u.ad_mul(&x));
        s.push(u);
    }
    for n in 0..nn {
        let mut z = CMat::zeros(ll * t, nn * t);
        for l in 0..ll {
            z.view_mut((l * t, 0), (t, nn * t)).copy_from(&p[l].rows(n * t, t));
            let blk = p[l].view((n * t, n * t), (t, t));
            let mut ps = acc[n].view_mut((l * t, 0), (t, t));
            ps += blk;
        }
        let q = &mut acc[nn + n];
        q.gemm(ONE, &z, &z.adjoint(), ONE);
        for l in 0..ll {
            let un = s[l].columns(n * t, t);
            let mut qb = q.view_mut((l * t, l * t), (t, t));
            qb.gemm(cr(problem.sigma2), &un.adjoint(), &un, ONE);
        }
    }
}

pub fn mc_moments(problem: &Problem, w: &[CMat], theta: &[C64], draws: DrawSet, kind: Detector) -> McMoments {
    let d = problem.dims();
    let lt = d.l * d.t;
    let mut zero = vec![CMat::zeros(lt, d.t); d.n];
    zero.extend(vec![CMat::zeros(lt, lt); d.n]);
    let batches = mc::batched(draws, &zero, |t, acc| {
        let real = draws.draw(&problem.stats, t);
        accumulate_moments(problem, &real, w, theta, kind, acc);
    });
    let total = split(mc::mean_of(&batches, draws.trials), d.n);
    let batches = mc::batch_means(&batches, draws.trials).into_iter().map(|b| split(b, d.n)).collect();
    McMoments { total, batches }
}

/// A_n = Q_n⁻¹ Ψ_n; a tiny ridge is added when Q_n is numerically singular.
pub fn optimal_combiner(psi: &CMat, q: &CMat, ridge: f64) -> (CMat, bool) {
    let q = herm(q);
    if let Some(ch) = q.clone().cholesky() {
        let a = ch.solve(psi);
        let ok = a.iter().all(|z| z.re.is_finite() && z.im.is_finite());
        let scale = q.diagonal().iter().map(|z| z.re).fold(0.0, f64::max);
        let min_piv = ch.l_dirty().diagonal().iter().map(|z| z.re * z.re).fold(f64::INFINITY, f64::min);
        if ok && min_piv > 1e-13 * scale.max(f64::MIN_POSITIVE) {
            return (a, false);
        }
    }
    let n = q.nrows();
    let reg = q + CMat::identity(n, n) * cr(ridge);
    let a = reg.lu().solve(psi).unwrap_or_else(|| CMat::zeros(psi.nrows(), psi.ncols()));
    (a, true)
}

/// E_n = I − Ψ†A − A†Ψ + A†QA.
pub fn mse_from_moments(a: &CMat, psi: &CMat, q: &CMat) -> CMat {
    let t = a.ncols();
    let pa = psi.ad_mul(a);
    let mut e = eye(t) - &pa - pa.adjoint();
    let qa = q * a;
    e.gemm(ONE, &a.adjoint(), &qa, ONE);
    herm(&e)
}

/// Rate of one UE for combiner `a` given its moments. Returns (bits/s/Hz, regularized).
pub fn rate_from_moments(a: &CMat, psi: &CMat, q: &CMat) -> (f64, bool) {
    let t = a.ncols();
    let dm = a.ad_mul(psi);
    if dm.iter().all(|z| z.norm() == 0.0) {
        return (0.0, false);
    }
    let mut sigma = a.ad_mul(&(q * a));
    sigma.gemm(-ONE, &dm, &dm.adjoint(), ONE);
    let sigma = herm(&sigma);
    let ev = herm_eigvals(&sigma);
    let (lo, hi) = (ev[0], ev[t - 1]);
    let mut flagged = false;
    let sigma = if !(lo > 0.0) || hi / lo > 1e12 {
        flagged = true;
        let tr = trace(&sigma).re.max(0.0);
        let floor = (1e-12 * tr / t as f64).max(1e-12 * hi.abs()).max(1e-300);
        sigma + eye(t) * cr(floor)
    } else {
        sigma
    };
    let Some(ch) = sigma.cholesky() else {
        return (0.0, true);
    };
    let y = ch.l().solve_lower_triangular(&dm).unwrap_or_else(|| CMat::zeros(t, t));
    let mut m = eye(t);
    m.gemm(ONE, &y.adjoint(), &y, ONE);
    let r = logdet_hpd(&m).unwrap_or(0.0) / std::f64::consts::LN_2;
    (r.max(0.0), flagged)
}

#[derive(Clone, Debug)]
pub struct RateEstimate {
    pub rates: Vec<f64>,
    pub weighted_sum: f64,
    /// Batch-means standard error of the weighted sum (0 for deterministic evaluations).
    pub std_err: f64,
    pub regularized: bool,
}

pub fn rates_for(mu: &[f64], a: &[CMat], m: &Moments) -> (Vec<f64>, f64, bool) {
    let mut flag = false;
    let rates: Vec<f64> = (0..a.len())
        .map(|n| {
            let (r, f) = rate_from_moments(&a[n], &m.psi[n], &m.q[n]);
            flag |= f;
            r
        })
        .collect();
    let ws = rates.iter().zip(mu).map(|(r, m)| r * m).sum();
    (rates, ws, flag)
}

pub fn estimate_from(mu: &[f64], a: &[CMat], mm: &McMoments) -> RateEstimate {
    let (rates, weighted_sum, regularized) = rates_for(mu, a, &mm.total);
    let per_batch: Vec<f64> = mm.batches.iter().map(|b| rates_for(mu, a, b).1).collect();
    RateEstimate {
        rates,
        weighted_sum,
        std_err: mc::std_err(&per_batch),
        regularized,
    }
}

/// MSE matrices E_n of the state's combiner with MC expectations.
pub fn mse_matrix_mc(problem: &Problem, state: &TransceiverState, draws: DrawSet) -> Vec<CMat> {
    let mm = mc_moments(problem, &state.w, &state.theta, draws, Detector::Mmse);
    (0..state.a.len())
        .map(|n| mse_from_moments(&state.a[n], &mm.total.psi[n], &mm.total.q[n]))
        .collect()
}

/// Rates of the state's own combiner with MC expectations.
pub fn achievable_rate_mc(problem: &Problem, state: &TransceiverState, draws: DrawSet) -> RateEstimate {
    let mm = mc_moments(problem, &state.w, &state.theta, draws, Detector::Mmse);
    estimate_from(&problem.mu, &state.a, &mm)
}

/// Rates with the combiner re-optimized for the given (W, Θ).
pub fn optimal_rate_mc(problem: &Problem, w: &[CMat], theta: &[C64], draws: DrawSet, kind: Detector) -> (RateEstimate, Vec<CMat>) {
    let mm = mc_moments(problem, w, theta, draws, kind);
    let a: Vec<CMat> = (0..w.len())
        .map(|n| optimal_combiner(&mm.total.psi[n], &mm.total.q[n], 1e-9 * problem.sigma2).0)
        .collect();
    (estimate_from(&problem.mu, &a, &mm), a)
}

pub fn check_state(problem: &Problem, state: &TransceiverState) -> Result<()> {
    let d = problem.dims();
    let ok = state.a.len() == d.n
        && state.w.len() == d.n
        && state.v.len() == d.n
        && state.theta.len() == problem.stats.l_r()
        && state.a.iter().all(|a| a.nrows() == d.l * d.t && a.ncols() == d.t)
        && state.w.iter().all(|w| w.nrows() == d.t && w.ncols() == d.t);
    if ok {
        Ok(())
    } else {
        Err(Error::Config("transceiver state does not match the problem dimensions".into()))
    }
}
