//! Comparison schemes: LSFD with MMSE or MR local detectors, fully centralized
//! processing with per-realization WMMSE, and the RIS-free network.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::asym_ao::{algorithm1, AsymConfig};
use crate::channel::{effective_channels, DrawSet};
use crate::detection::{optimal_rate_mc, Detector, TransceiverState};
use crate::error::Result;
use crate::linalg::{c, cr, herm, inverse_hpd, logdet_hpd, vstack, CMat, C64, ONE};
use crate::manifold::{armijo_descent, DescentConfig};
use crate::mc;
use crate::scenario::Problem;
use crate::wmmse_mc::{ao_loop, power_constrained, AOTrace, McConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub scheme: String,
    pub rates: Vec<f64>,
    pub weighted_sum: f64,
    pub std_err: f64,
    pub meta: BTreeMap<String, String>,
}

/// LSFD at the unoptimized transmitters (W = √(p/T)I, Θ = I).
pub fn lsfd(problem: &Problem, kind: Detector, draws: DrawSet) -> BaselineResult {
    let st = TransceiverState::identity(problem);
    let (est, _) = optimal_rate_mc(problem, &st.w, &st.theta, draws, kind);
    let scheme = match kind {
        Detector::Mmse => "lsfd_mmse",
        Detector::Mr => "lsfd_mr",
    };
    let mut meta = BTreeMap::new();
    meta.insert("trials".into(), draws.trials.to_string());
    meta.insert("regularized".into(), est.regularized.to_string());
    BaselineResult {
        scheme: scheme.into(),
        rates: est.rates,
        weighted_sum: est.weighted_sum,
        std_err: est.std_err,
        meta,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FcpConfig {
    pub wmmse_iters: usize,
    /// Rounds of per-realization phase descent (0 keeps the supplied phases).
    pub theta_rounds: usize,
    pub descent: DescentConfig,
    pub fd_step: f64,
}

impl Default for FcpConfig {
    fn default() -> Self {
        FcpConfig {
            wmmse_iters: 30,
            theta_rounds: 0,
            descent: DescentConfig {
                steps: 3,
                ..Default::default()
            },
            fd_step: 1e-6,
        }
    }
}

/// MMSE receivers and rates on a stacked channel, H_n = columns of UE n.
fn centralized_rates(h: &CMat, w: &[CMat], sigma2: f64) -> (Vec<f64>, Vec<CMat>, Vec<CMat>) {
    let t = w[0].nrows();
    let rows = h.nrows();
    let mut cov = CMat::identity(rows, rows) * cr(sigma2);
    let hw: Vec<CMat> = w.iter().enumerate().map(|(n, wn)| h.columns(n * t, t) * wn).collect();
    for x in &hw {
        cov.gemm(ONE, x, &x.adjoint(), ONE);
    }
    let ci = inverse_hpd(&cov).unwrap_or_else(|| CMat::zeros(rows, rows));
    let mut rates = Vec::with_capacity(w.len());
    let mut us = Vec::with_capacity(w.len());
    let mut es = Vec::with_capacity(w.len());
    for x in &hw {
        let u = &ci * x;
        let e = herm(&(CMat::identity(t, t) - x.adjoint() * &u));
        // rate = −log det E for the MMSE receiver
        let r = logdet_hpd(&e).map(|ld| -ld / std::f64::consts::LN_2).unwrap_or(0.0).max(0.0);
        rates.push(r);
        us.push(u);
        es.push(e);
    }
    (rates, us, es)
}

/// Standard centralized WMMSE on one realization; returns the final rates.
fn wmmse_single(h: &CMat, problem: &Problem, iters: usize, w0: &[CMat]) -> (Vec<f64>, Vec<CMat>) {
    let t = w0[0].nrows();
    let mu = &problem.mu;
    let mut w = w0.to_vec();
    for _ in 0..iters {
        let (_, us, es) = centralized_rates(h, &w, problem.sigma2);
        let vs: Vec<CMat> = es.iter().map(|e| inverse_hpd(e).unwrap_or_else(|| CMat::identity(t, t))).collect();
        // Σ_m μ_m U_m V_m U_m†
        let rows = h.nrows();
        let mut s = CMat::zeros(rows, rows);
        for m in 0..w.len() {
            let uv = &us[m] * &vs[m];
            s.gemm(cr(mu[m]), &uv, &us[m].adjoint(), ONE);
        }
        let mut next = Vec::with_capacity(w.len());
        for n in 0..w.len() {
            let hn = h.columns(n * t, t);
            let j = herm(&(hn.adjoint() * &s * hn));
            let cn = hn.adjoint() * &us[n] * &vs[n];
            match power_constrained(&j, &cn, mu[n], problem.p[n]) {
                Ok((wn, _)) => next.push(wn),
                Err(_) => next.push(w[n].clone()),
            }
        }
        w = next;
    }
    (centralized_rates(h, &w, problem.sigma2).0, w)
}

fn stacked(problem: &Problem, real: &crate::channel::ChannelRealization, theta: &[C64]) -> CMat {
    let hs = effective_channels(&problem.stats, real, theta);
    vstack(&hs.iter().collect::<Vec<_>>())
}

/// Fully centralized processing with instantaneous CSI at the CPU.
pub fn fcp_wmmse(problem: &Problem, theta: &[C64], draws: DrawSet, cfg: &FcpConfig) -> Result<BaselineResult> {
    crate::channel::check_theta(&problem.stats, theta)?;
    let st = TransceiverState::identity(problem);
    let nn = problem.dims().n;
    let zero = vec![CMat::zeros(nn, 1)];
    let batches = mc::batched(draws, &zero, |i, acc| {
        let real = draws.draw(&problem.stats, i);
        let mut th = theta.to_vec();
        let mut h = stacked(problem, &real, &th);
        let (mut rates, mut w) = wmmse_single(&h, problem, cfg.wmmse_iters, &st.w);
        for _ in 0..cfg.theta_rounds {
            if th.is_empty() {
                break;
            }
            let wsr = |th: &[C64]| -> f64 {
                let h = stacked(problem, &real, th);
                centralized_rates(&h, &w, problem.sigma2)
                    .0
                    .iter()
                    .zip(&problem.mu)
                    .map(|(r, m)| r * m)
                    .sum()
            };
            let mut obj = |x: &[C64], g: bool| -> Result<(f64, Option<Vec<C64>>)> {
                let f = -wsr(x);
                if !g {
                    return Ok((f, None));
                }
                let hstep = cfg.fd_step;
                let grad = (0..x.len())
                    .map(|j| {
                        let mut p = x.to_vec();
                        let mut q = x.to_vec();
                        p[j] += c(hstep, 0.0);
                        q[j] -= c(hstep, 0.0);
                        let dx = (wsr(&q) - wsr(&p)) / (2.0 * hstep);
                        let mut p = x.to_vec();
                        let mut q = x.to_vec();
                        p[j] += c(0.0, hstep);
                        q[j] -= c(0.0, hstep);
                        let dy = (wsr(&q) - wsr(&p)) / (2.0 * hstep);
                        c(dx, dy)
                    })
                    .collect();
                Ok((f, Some(grad)))
            };
            if let Ok((next, _)) = armijo_descent(&th, &cfg.descent, &mut obj) {
                th = next;
            }
            h = stacked(problem, &real, &th);
            let out = wmmse_single(&h, problem, cfg.wmmse_iters, &w);
            rates = out.0;
            w = out.1;
        }
        for (n, r) in rates.iter().enumerate() {
            acc[0][(n, 0)] += cr(*r);
        }
    });
    let rates: Vec<f64> = mc::mean_of(&batches, draws.trials)[0].iter().map(|z| z.re).collect();
    let per_batch: Vec<f64> = mc::batch_means(&batches, draws.trials)
        .iter()
        .map(|b| b[0].iter().zip(&problem.mu).map(|(r, m)| r.re * m).sum())
        .collect();
    let weighted_sum = rates.iter().zip(&problem.mu).map(|(r, m)| r * m).sum();
    let mut meta = BTreeMap::new();
    meta.insert("trials".into(), draws.trials.to_string());
    meta.insert("wmmse_iters".into(), cfg.wmmse_iters.to_string());
    meta.insert("theta_rounds".into(), cfg.theta_rounds.to_string());
    Ok(BaselineResult {
        scheme: "fcp".into(),
        rates,
        weighted_sum,
        std_err: mc::std_err(&per_batch),
        meta,
    })
}

/// Optimized network with every RIS removed, asymptotic engine.
pub fn no_ris_asym(problem: &Problem, cfg: &AsymConfig) -> Result<(BaselineResult, TransceiverState, AOTrace)> {
    let pr = problem.without_ris();
    let (state, trace) = algorithm1(&pr, cfg)?;
    let last = trace.iterations.last().expect("at least one iteration");
    let res = BaselineResult {
        scheme: "no_ris".into(),
        rates: last.rates.clone(),
        weighted_sum: last.weighted_sum_rate,
        std_err: 0.0,
        meta: BTreeMap::from([("engine".to_string(), "asym".to_string())]),
    };
    Ok((res, state, trace))
}

/// Optimized network with every RIS removed, Monte-Carlo engine.
pub fn no_ris_mc(problem: &Problem, cfg: &McConfig) -> Result<(BaselineResult, TransceiverState, AOTrace)> {
    let pr = problem.without_ris();
    let (state, trace) = ao_loop(&pr, &TransceiverState::identity(&pr), cfg)?;
    let last = trace.iterations.last().expect("at least one iteration");
    let res = BaselineResult {
        scheme: "no_ris".into(),
        rates: last.rates.clone(),
        weighted_sum: last.weighted_sum_rate,
        std_err: last.std_err,
        meta: BTreeMap::from([("engine".to_string(), "mc".to_string())]),
    };
    Ok((res, state, trace))
}
