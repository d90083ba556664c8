//! Monte-Carlo WMMSE alternating optimizer.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::channel::{effective_channels, ChannelRealization, DrawSet};
use crate::detection::{
    check_state, estimate_from, local_detectors, mc_moments, mse_from_moments, mse_matrix_mc, optimal_combiner, precoded, Detector, McMoments,
    TransceiverState,
};
use crate::error::{Error, Result};
use crate::linalg::{cr, eye, herm, herm_eigen, inverse_hpd, CMat, C64, ONE, ZERO};
use crate::manifold::armijo_descent;
pub use crate::manifold::{retract, riemannian_gradient, DescentConfig, DescentReport};
use crate::mc;
use crate::rng::substream;
use crate::scenario::Problem;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub trials: usize,
    pub ao_iters: usize,
    pub seed: u64,
    pub descent: DescentConfig,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            trials: 1000,
            ao_iters: 10,
            seed: 0,
            descent: DescentConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct IterationRecord {
    pub weighted_sum_rate: f64,
    /// MC standard error of `weighted_sum_rate` (0 for the asymptotic engine).
    pub std_err: f64,
    pub rates: Vec<f64>,
    /// Weighted sum-MSE Σμ Tr(V E) right after the combiner/weight updates.
    pub objective_av: f64,
    /// Phase sub-problem objective before and after the descent.
    pub objective_theta: (f64, f64),
    pub lambdas: Vec<f64>,
    pub powers: Vec<f64>,
    pub step_sizes: Vec<f64>,
    pub stalled: bool,
    pub max_modulus_error: f64,
    pub min_v_eig: f64,
    /// max_n λ_n (p_n − Tr W_nW_n†)
    pub kkt_slack: f64,
    /// Independent MC evaluation of the same state (asymptotic engine only).
    #[serde(default)]
    pub mc_rate: Option<f64>,
    #[serde(default)]
    pub mc_std_err: Option<f64>,
    pub wall_time: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AOTrace {
    /// Weighted sum rate at the identity state (A = I/L, W⁰, Θ = I).
    pub identity_rate: f64,
    /// Weighted sum rate at (A optimal, W⁰, Θ = I).
    pub initial_rate: f64,
    pub iterations: Vec<IterationRecord>,
    pub flags: Vec<String>,
}

impl AOTrace {
    pub fn rates(&self) -> Vec<f64> {
        self.iterations.iter().map(|r| r.weighted_sum_rate).collect()
    }
}

pub(crate) fn sum_mse(mu: &[f64], v: &[CMat], e: &[CMat]) -> f64 {
    mu.iter().zip(v).zip(e).map(|((m, v), e)| m * (v * e).trace().re).sum()
}

/// A_n = E{Q_n}⁻¹ E(Φ_nn)W_n from MC moments. The flag reports a ridge fallback.
pub fn update_a_from(problem: &Problem, mm: &McMoments) -> (Vec<CMat>, bool) {
    let mut flagged = false;
    let a = (0..problem.dims().n)
        .map(|n| {
            let (a, f) = optimal_combiner(&mm.total.psi[n], &mm.total.q[n], 1e-9 * problem.sigma2);
            flagged |= f;
            a
        })
        .collect();
    (a, flagged)
}

pub fn update_a(problem: &Problem, state: &TransceiverState, draws: DrawSet) -> Result<(Vec<CMat>, bool)> {
    check_state(problem, state)?;
    let mm = mc_moments(problem, &state.w, &state.theta, draws, Detector::Mmse);
    Ok(update_a_from(problem, &mm))
}

/// V_n = E_n⁻¹.
pub fn update_v(e: &[CMat]) -> Result<Vec<CMat>> {
    e.iter()
        .map(|e| {
            let (ev, _) = herm_eigen(e);
            let hi = ev.iter().cloned().fold(0.0, f64::max);
            let lo = ev.iter().cloned().fold(f64::INFINITY, f64::min);
            if !(lo > 1e-14 * hi.max(1e-300)) {
                return Err(Error::Singular("MSE matrix (weight update)".into()));
            }
            inverse_hpd(e).ok_or_else(|| Error::Singular("MSE matrix (weight update)".into()))
        })
        .collect()
}

/// W(λ) = μ (J + λI)⁻¹ c with the smallest λ ≥ 0 meeting Tr(WW†) ≤ p.
pub fn power_constrained(j: &CMat, c: &CMat, mu: f64, p: f64) -> Result<(CMat, f64)> {
    let t = j.nrows();
    if mu == 0.0 || c.iter().all(|z| z.norm() == 0.0) {
        return Ok((CMat::zeros(t, c.ncols()), 0.0));
    }
    let (ev, u) = herm_eigen(j);
    let ev: Vec<f64> = ev.iter().map(|&x| x.max(0.0)).collect();
    let b = u.ad_mul(c);
    let bn: Vec<f64> = (0..t).map(|i| b.row(i).iter().map(|z| z.norm_sqr()).sum()).collect();
    let power = |lam: f64| -> f64 {
        (0..t)
            .map(|i| {
                let den = ev[i] + lam;
                if bn[i] == 0.0 {
                    0.0
                } else if den <= 0.0 {
                    f64::INFINITY
                } else {
                    mu * mu * bn[i] / (den * den)
                }
            })
            .sum()
    };
    let w_at = |lam: f64| -> CMat {
        let mut s = b.clone();
        for i in 0..t {
            let f = cr(mu / (ev[i] + lam));
            for jj in 0..s.ncols() {
                s[(i, jj)] *= f;
            }
        }
        &u * s
    };
    let emax = ev.iter().cloned().fold(0.0, f64::max);
    if ev.iter().all(|&e| e > 1e-13 * emax) && power(0.0) <= p {
        return Ok((w_at(0.0), 0.0));
    }
    let mut hi = 1.0;
    let mut grow = 0;
    while power(hi) > p {
        hi *= 10.0;
        grow += 1;
        if grow > 400 {
            return Err(Error::Bisection(format!("no feasible multiplier up to {hi:e}")));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        if p - power(hi) <= 1e-10 * p {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if power(mid) > p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((w_at(hi), hi))
}

/// Per-draw pieces for the precoder sub-problem with the detectors held at the current W.
fn accumulate_w_terms(problem: &Problem, real: &ChannelRealization, state: &TransceiverState, acc: &mut [CMat]) {
    let d = problem.dims();
    let (t, nn) = (d.t, d.n);
    let hs = effective_channels(&problem.stats, real, &state.theta);
    let phis: Vec<CMat> = hs
        .iter()
        .map(|h| {
            let u = local_detectors(&precoded(h, &state.w), problem.sigma2, Detector::Mmse);
            u.ad_mul(h)
        })
        .collect();
    for n in 0..nn {
        for (l, ph) in phis.iter().enumerate() {
            let mut blk = acc[n].view_mut((l * t, 0), (t, t));
            blk += ph.view((n * t, n * t), (t, t));
        }
        for m in 0..nn {
            // Y_mn = Σ_l A_ml† Φ_mn,l
            let mut y = CMat::zeros(t, t);
            for (l, ph) in phis.iter().enumerate() {
                let aml = state.a[m].view((l * t, 0), (t, t));
                y.gemm(ONE, &aml.adjoint(), &ph.view((m * t, n * t), (t, t)), ONE);
            }
            let vy = &state.v[m] * &y;
            acc[nn + n].gemm(cr(problem.mu[m]), &y.adjoint(), &vy, ONE);
        }
    }
}

/// Precoders and multipliers of the MC sub-problem.
pub fn update_w(problem: &Problem, state: &TransceiverState, draws: DrawSet) -> Result<(Vec<CMat>, Vec<f64>)> {
    check_state(problem, state)?;
    let d = problem.dims();
    let (t, lt) = (d.t, d.l * d.t);
    let mut zero = vec![CMat::zeros(lt, t); d.n];
    zero.extend(vec![CMat::zeros(t, t); d.n]);
    let batches = mc::batched(draws, &zero, |i, acc| {
        let real = draws.draw(&problem.stats, i);
        accumulate_w_terms(problem, &real, state, acc);
    });
    let acc = mc::mean_of(&batches, draws.trials);
    let mut ws = Vec::with_capacity(d.n);
    let mut lams = Vec::with_capacity(d.n);
    for n in 0..d.n {
        // c_n = Σ_l E(Φ_nn,l)† A_nl V_n
        let av = &state.a[n] * &state.v[n];
        let cn = acc[n].ad_mul(&av);
        let (w, lam) = power_constrained(&herm(&acc[d.n + n]), &cn, problem.mu[n], problem.p[n])?;
        ws.push(w);
        lams.push(lam);
    }
    Ok((ws, lams))
}

/// Fixed-detector phase objective over a cached draw set.
struct PhaseObjective<'a> {
    problem: &'a Problem,
    reals: Vec<ChannelRealization>,
    /// b_nl = U_nl A_nl per draw, `[draw][l]` as R×T_t with block n.
    b: Vec<Vec<CMat>>,
    state: &'a TransceiverState,
    /// Precoders the objective is evaluated at (the detectors stay at `state.w`).
    w: Vec<CMat>,
    /// Include the σ²‖U A‖² noise term.
    noise: bool,
    evals: usize,
}

impl<'a> PhaseObjective<'a> {
    fn new(problem: &'a Problem, state: &'a TransceiverState, draws: DrawSet) -> Self {
        let d = problem.dims();
        let t = d.t;
        let reals: Vec<ChannelRealization> = (0..draws.trials).map(|i| draws.draw(&problem.stats, i)).collect();
        let b = reals
            .iter()
            .map(|real| {
                effective_channels(&problem.stats, real, &state.theta)
                    .iter()
                    .enumerate()
                    .map(|(l, h)| {
                        let u = local_detectors(&precoded(h, &state.w), problem.sigma2, Detector::Mmse);
                        let mut b = CMat::zeros(d.r, d.n * t);
                        for n in 0..d.n {
                            let anl = state.a[n].view((l * t, 0), (t, t));
                            b.columns_mut(n * t, t).gemm(ONE, &u.columns(n * t, t), &anl, ZERO);
                        }
                        b
                    })
                    .collect()
            })
            .collect();
        PhaseObjective {
            problem,
            reals,
            b,
            state,
            w: state.w.clone(),
            noise: true,
            evals: 0,
        }
    }

    fn value_grad(&mut self, theta: &[C64], with_grad: bool) -> (f64, Option<Vec<C64>>) {
        self.evals += 1;
        let pr = self.problem;
        let st = pr.stats.clone();
        let d = pr.dims();
        let (t, nn, tt) = (d.t, d.n, st.tt());
        let lr = st.l_r();
        let ntr = self.reals.len();
        let mut f = 0.0;
        let mut grad = vec![ZERO; lr];
        for (real, bs) in self.reals.iter().zip(&self.b) {
            let hs = effective_channels(&st, real, theta);
            let xs: Vec<CMat> = hs.iter().map(|h| precoded(h, &self.w)).collect();
            let mut m_l = vec![CMat::zeros(d.r, tt); d.l];
            for n in 0..nn {
                let mu = pr.mu[n];
                let vn = &self.state.v[n];
                // z_n = Σ_l b_nl† X_l  (T×T_t)
                let mut z = CMat::zeros(t, tt);
                let mut bb = CMat::zeros(t, t);
                for l in 0..d.l {
                    let bnl = bs[l].columns(n * t, t);
                    z.gemm(ONE, &bnl.adjoint(), &xs[l], ONE);
                    bb.gemm(ONE, &bnl.adjoint(), &bnl, ONE);
                }
                let zz = &z * z.adjoint();
                let zn = z.columns(n * t, t);
                let noise = if self.noise { pr.sigma2 * (vn * bb).trace().re } else { 0.0 };
                let val = (vn * zz).trace().re - 2.0 * (vn * zn).trace().re + noise + vn.trace().re;
                f += mu * val;
                if with_grad {
                    // P_n = z_n Ŵ† − [0 … W_n† … 0]
                    let mut pn = CMat::zeros(t, tt);
                    for m in 0..nn {
                        pn.columns_mut(m * t, t).gemm(ONE, &z.columns(m * t, t), &self.w[m].adjoint(), ZERO);
                    }
                    {
                        let mut blk = pn.columns_mut(n * t, t);
                        blk -= self.w[n].adjoint();
                    }
                    let vp = vn * pn;
                    for l in 0..d.l {
                        m_l[l].gemm(cr(mu), &bs[l].columns(n * t, t), &vp, ONE);
                    }
                }
            }
            if with_grad {
                for k in 0..st.k() {
                    let off = st.ris_offset(k);
                    let fk = crate::linalg::hstack(&real.f.iter().map(|row| &row[k]).collect::<Vec<_>>());
                    for l in 0..d.l {
                        let mf = &m_l[l] * fk.adjoint();
                        let g = &real.g[k][l];
                        for j in 0..st.l_k[k] {
                            grad[off + j] += g.column(j).dotc(&mf.column(j));
                        }
                    }
                }
            }
        }
        let s = 1.0 / ntr as f64;
        (f * s, with_grad.then(|| grad.into_iter().map(|g| g * (2.0 * s)).collect()))
    }
}

/// Euclidean gradient 2·∂f/∂θ* and value of the fixed-detector phase objective.
pub fn phase_objective(problem: &Problem, state: &TransceiverState, draws: DrawSet, theta: &[C64]) -> (f64, Vec<C64>) {
    let mut po = PhaseObjective::new(problem, state, draws);
    let (f, g) = po.value_grad(theta, true);
    (f, g.unwrap())
}

/// Precoder Lagrangian with detectors fixed at `state.w`, evaluated at `w_new`:
/// Σμ Tr(V E) without the noise term, plus Σλ(Tr WW† − p).
pub fn mc_lagrangian(problem: &Problem, state: &TransceiverState, draws: DrawSet, w_new: &[CMat], lams: &[f64]) -> f64 {
    let mut po = PhaseObjective::new(problem, state, draws);
    po.w = w_new.to_vec();
    po.noise = false;
    let f = po.value_grad(&state.theta, false).0;
    f + lagrange_penalty(w_new, lams, &problem.p)
}

pub(crate) fn lagrange_penalty(w: &[CMat], lams: &[f64], p: &[f64]) -> f64 {
    w.iter().zip(lams).zip(p).map(|((w, l), p)| l * (w.norm_squared() - p)).sum()
}

/// Armijo-backtracked Riemannian descent on the fixed-detector MC objective.
pub fn update_theta(problem: &Problem, state: &TransceiverState, draws: DrawSet, cfg: &DescentConfig) -> Result<(Vec<C64>, DescentReport)> {
    check_state(problem, state)?;
    if problem.stats.l_r() == 0 {
        return Ok((vec![], DescentReport::default()));
    }
    let mut po = PhaseObjective::new(problem, state, draws);
    let mut obj = |th: &[C64], g: bool| Ok(po.value_grad(th, g));
    armijo_descent(&state.theta, cfg, &mut obj)
}

pub(crate) fn kkt_slack(lams: &[f64], powers: &[f64], p: &[f64]) -> f64 {
    lams.iter().zip(powers).zip(p).map(|((l, w), p)| (l * (p - w)).abs()).fold(0.0, f64::max)
}

/// MC alternating optimization A → V → W → Θ.
pub fn ao_loop(problem: &Problem, init: &TransceiverState, cfg: &McConfig) -> Result<(TransceiverState, AOTrace)> {
    if cfg.ao_iters == 0 {
        return Err(Error::Config("ao_iters must be at least 1".into()));
    }
    check_state(problem, init)?;
    let mut state = init.clone();
    let mut trace = AOTrace::default();
    let draws0 = DrawSet::new(substream(cfg.seed, &[0]), cfg.trials);
    let mm0 = mc_moments(problem, &state.w, &state.theta, draws0, Detector::Mmse);
    trace.identity_rate = estimate_from(&problem.mu, &TransceiverState::identity(problem).a, &mm0).weighted_sum;
    let (a0, _) = update_a_from(problem, &mm0);
    trace.initial_rate = estimate_from(&problem.mu, &a0, &mm0).weighted_sum;
    let mut last_mm = None;
    let mut prev_lams = vec![0.0; problem.dims().n];
    for it in 0..cfg.ao_iters {
        let clock = Instant::now();
        let draws = DrawSet::new(substream(cfg.seed, &[it as u64 + 1]), cfg.trials);
        let mm = mc_moments(problem, &state.w, &state.theta, draws, Detector::Mmse);
        let (a, flagged) = update_a_from(problem, &mm);
        if flagged {
            trace.flags.push(format!("iteration {it}: ridge applied to combiner"));
        }
        state.a = a;
        let e: Vec<CMat> = (0..state.a.len())
            .map(|n| mse_from_moments(&state.a[n], &mm.total.psi[n], &mm.total.q[n]))
            .collect();
        state.v = update_v(&e)?;
        let objective_av = sum_mse(&problem.mu, &state.v, &e);
        let (w, lams) = update_w(problem, &state, draws)?;
        // Keep the new precoders only if the weighted MSE with A and V held fixed does not grow.
        let cand = TransceiverState { w, ..state.clone() };
        let f_new = sum_mse(&problem.mu, &state.v, &mse_matrix_mc(problem, &cand, draws));
        let lams = if f_new <= objective_av + 1e-10 * objective_av.abs() {
            state.w = cand.w;
            prev_lams = lams.clone();
            lams
        } else {
            trace.flags.push(format!("iteration {it}: precoder step rejected"));
            prev_lams.clone()
        };
        let (theta, rep) = update_theta(problem, &state, draws, &cfg.descent)?;
        state.theta = theta;
        // The trace is evaluated on the fixed draw set of the initial rates, so successive
        // entries share random numbers and carry no in-sample bias from this iteration's draws.
        let mm_after = mc_moments(problem, &state.w, &state.theta, draws0, Detector::Mmse);
        let (a_after, _) = update_a_from(problem, &mm_after);
        let est = estimate_from(&problem.mu, &a_after, &mm_after);
        let powers = state.powers();
        trace.iterations.push(IterationRecord {
            weighted_sum_rate: est.weighted_sum,
            std_err: est.std_err,
            rates: est.rates,
            objective_av,
            objective_theta: (
                rep.objective.first().copied().unwrap_or(f64::NAN),
                rep.objective.last().copied().unwrap_or(f64::NAN),
            ),
            kkt_slack: kkt_slack(&lams, &powers, &problem.p),
            lambdas: lams,
            powers,
            step_sizes: rep.step_sizes,
            stalled: rep.stalled,
            max_modulus_error: state.max_modulus_error(),
            min_v_eig: state.min_v_eig(),
            mc_rate: None,
            mc_std_err: None,
            wall_time: clock.elapsed().as_secs_f64(),
        });
        last_mm = Some((mm_after, a_after));
    }
    if let Some((mm, a)) = last_mm {
        let e: Vec<CMat> = (0..a.len()).map(|n| mse_from_moments(&a[n], &mm.total.psi[n], &mm.total.q[n])).collect();
        state.a = a;
        state.v = update_v(&e).unwrap_or_else(|_| vec![eye(problem.dims().t); problem.dims().n]);
    }
    Ok((state, trace))
}
