//! Statistics-only alternating optimization: every expectation the WMMSE updates
//! need is replaced by its deterministic equivalent from [`crate::freeprob`].

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::channel::DrawSet;
use crate::detection::{check_state, estimate_from, mc_moments, mse_from_moments, optimal_combiner, rates_for, Detector, Moments, TransceiverState};
use crate::error::{Error, Result};
use crate::freeprob::{gradient_adjoint, solve_all, CauchySolution, SolverConfig};
use crate::linalg::{cr, herm, CMat, C64, ONE};
use crate::manifold::{armijo_descent, DescentConfig, DescentReport};
use crate::rng::substream;
use crate::scenario::Problem;
use crate::wmmse_mc::{kkt_slack, lagrange_penalty, power_constrained, sum_mse, update_v, AOTrace, IterationRecord};

/// Deterministic equivalents of the combiner statistics.
#[derive(Clone, Debug)]
pub struct AsymExpectations {
    /// Ψ_n, LT×T
    pub psi: Vec<CMat>,
    /// Q̃_n, LT×LT
    pub q_tilde: Vec<CMat>,
    /// B̃_l(−σ²)
    pub b_tilde: Vec<CMat>,
    /// I + σ²B̃_l, T_t×T_t
    pub k: Vec<CMat>,
    pub t: usize,
}

impl AsymExpectations {
    pub fn moments(&self) -> Moments {
        Moments {
            psi: self.psi.clone(),
            q: self.q_tilde.clone(),
        }
    }

    fn block(&self, l: usize, n: usize, m: usize) -> CMat {
        let t = self.t;
        self.k[l].view((n * t, m * t), (t, t)).into_owned()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McCheck {
    pub trials: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AsymConfig {
    pub ao_iters: usize,
    pub solver: SolverConfig,
    pub descent: DescentConfig,
    /// Evaluate every iterate with Monte-Carlo expectations too.
    pub mc_check: Option<McCheck>,
}

impl Default for AsymConfig {
    fn default() -> Self {
        AsymConfig {
            ao_iters: 10,
            solver: SolverConfig::default(),
            descent: DescentConfig::default(),
            mc_check: None,
        }
    }
}

/// Ψ_n and Q̃_n from per-AP solutions at z = −σ².
pub fn compute_expectations(sols: &[CauchySolution], sigma2: f64, t: usize) -> AsymExpectations {
    let b_tilde: Vec<CMat> = sols.iter().map(|s| s.b_tilde.clone()).collect();
    let tt = b_tilde.first().map(|b| b.nrows()).unwrap_or(0);
    let k: Vec<CMat> = b_tilde.iter().map(|b| herm(&(CMat::identity(tt, tt) + b * cr(sigma2)))).collect();
    let ll = k.len();
    let nn = tt / t.max(1);
    let mut psi = Vec::with_capacity(nn);
    let mut q_tilde = Vec::with_capacity(nn);
    for n in 0..nn {
        let mut p = CMat::zeros(ll * t, t);
        let mut q = CMat::zeros(ll * t, ll * t);
        for l in 0..ll {
            let kl = k[l].view((n * t, n * t), (t, t));
            p.view_mut((l * t, 0), (t, t)).copy_from(&kl);
            for qq in 0..ll {
                let blk = if l == qq {
                    kl.into_owned()
                } else {
                    k[l].rows(n * t, t) * k[qq].columns(n * t, t)
                };
                q.view_mut((l * t, qq * t), (t, t)).copy_from(&blk);
            }
        }
        psi.push(p);
        q_tilde.push(herm(&q));
    }
    AsymExpectations { psi, q_tilde, b_tilde, k, t }
}

/// A_n = Q̃_n⁻¹Ψ_n; the flag reports a ridge fallback.
pub fn update_a_asym(exp: &AsymExpectations, sigma2: f64) -> (Vec<CMat>, bool) {
    let mut flagged = false;
    let a = exp
        .psi
        .iter()
        .zip(&exp.q_tilde)
        .map(|(p, q)| {
            let (a, f) = optimal_combiner(p, q, 1e-9 * sigma2);
            flagged |= f;
            a
        })
        .collect();
    (a, flagged)
}

/// V_n = (I − Ψ_n†Q̃_n⁻¹Ψ_n)⁻¹ for the combiners `a` (pass the optimal ones).
pub fn update_v_asym(exp: &AsymExpectations, a: &[CMat]) -> Result<Vec<CMat>> {
    update_v(&mse_asym(exp, a))
}

pub fn mse_asym(exp: &AsymExpectations, a: &[CMat]) -> Vec<CMat> {
    (0..a.len()).map(|n| mse_from_moments(&a[n], &exp.psi[n], &exp.q_tilde[n])).collect()
}

/// Relative singular-value floor below which a precoder direction is treated as switched off.
/// Weaker directions carry terms of order σ² that the fixed-point tolerance cannot resolve.
pub const RANK_FLOOR: f64 = 1e-4;

/// Precoder sub-problem for UE `n` in the coordinates W_new = U_r·Y, where U_r spans the
/// retained left singular directions of the current precoder. Returns (U_r, J, c) with
/// the sub-problem  min Tr(Y†JY) − 2μ Re Tr(Y†c).
fn w_terms(exp: &AsymExpectations, a: &[CMat], v: &[CMat], w_old: &CMat, n: usize, mu: &[f64]) -> (CMat, CMat, CMat) {
    let t = exp.t;
    let nn = a.len();
    let mut core = CMat::zeros(t, t);
    for m in 0..nn {
        let mut y = CMat::zeros(t, t);
        for l in 0..exp.k.len() {
            y.gemm(ONE, &exp.block(l, n, m), &a[m].view((l * t, 0), (t, t)), ONE);
        }
        let yv = &y * &v[m];
        core.gemm(cr(mu[m]), &yv, &y.adjoint(), ONE);
    }
    let lin = exp.psi[n].adjoint() * &a[n] * &v[n];
    let svd = w_old.clone().svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let smax = svd.singular_values.max();
    let keep: Vec<usize> = (0..t).filter(|&i| smax > 0.0 && svd.singular_values[i] > RANK_FLOOR * smax).collect();
    let r = keep.len();
    // S_r⁻¹ V_r†
    let mut proj = CMat::zeros(r, t);
    let mut ur = CMat::zeros(t, r);
    for (k, &i) in keep.iter().enumerate() {
        let inv = 1.0 / svd.singular_values[i];
        proj.row_mut(k).copy_from(&(vt.row(i) * cr(inv)));
        ur.column_mut(k).copy_from(&u.column(i));
    }
    let j = herm(&(&proj * core * proj.adjoint()));
    let c = proj * lin;
    (ur, j, c)
}

/// Number of precoder directions above the rank floor.
pub fn precoder_rank(w: &CMat) -> usize {
    let s = w.clone().singular_values();
    let smax = s.max();
    s.iter().filter(|&&x| smax > 0.0 && x > RANK_FLOOR * smax).count()
}

/// New precoders and multipliers from the closed form with power bisection, restricted
/// to the span of the current precoders.
pub fn update_w_asym(exp: &AsymExpectations, state: &TransceiverState, mu: &[f64], p: &[f64]) -> Result<(Vec<CMat>, Vec<f64>)> {
    let mut ws = Vec::new();
    let mut lams = Vec::new();
    for n in 0..state.w.len() {
        let (ur, j, c) = w_terms(exp, &state.a, &state.v, &state.w[n], n, mu);
        if ur.ncols() == 0 {
            ws.push(state.w[n].clone());
            lams.push(0.0);
            continue;
        }
        let (y, lam) = power_constrained(&j, &c, mu[n], p[n])?;
        ws.push(ur * y);
        lams.push(lam);
    }
    Ok((ws, lams))
}

/// W-dependent asymptotic Lagrangian at `w_new`, linearized around `state.w`.
/// `w_new` must lie in the span of the current precoders.
pub fn lagrangian_asym(exp: &AsymExpectations, state: &TransceiverState, w_new: &[CMat], lams: &[f64], mu: &[f64], p: &[f64]) -> f64 {
    let mut total = 0.0;
    for n in 0..state.w.len() {
        let (ur, j, c) = w_terms(exp, &state.a, &state.v, &state.w[n], n, mu);
        let y = ur.adjoint() * &w_new[n];
        total += mu[n] * state.v[n].trace().re;
        total += (y.adjoint() * &j * &y).trace().re;
        total -= 2.0 * mu[n] * (y.adjoint() * &c).trace().re;
    }
    total + lagrange_penalty(w_new, lams, p)
}

/// Σμ_n Tr(V_n E_n) with asymptotic E_n.
pub fn objective_asym(exp: &AsymExpectations, a: &[CMat], v: &[CMat], mu: &[f64]) -> f64 {
    sum_mse(mu, v, &mse_asym(exp, a))
}

/// Matrix Ĝ_l with d f̂ = Σ_l Tr(Ĝ_l dB̃_l) for the holomorphic form of f̂.
fn objective_sensitivity(exp: &AsymExpectations, a: &[CMat], v: &[CMat], mu: &[f64], sigma2: f64, l: usize) -> CMat {
    let t = exp.t;
    let tt = exp.k[l].nrows();
    let mut g = CMat::zeros(tt, tt);
    for n in 0..a.len() {
        let anl = a[n].view((l * t, 0), (t, t)).into_owned();
        let mut blk = &anl * &v[n] * anl.adjoint();
        blk -= &anl * &v[n];
        blk -= &v[n] * anl.adjoint();
        {
            let mut gb = g.view_mut((n * t, n * t), (t, t));
            gb += blk * cr(mu[n]);
        }
        for q in 0..exp.k.len() {
            if q == l {
                continue;
            }
            let anq = a[n].view((q * t, 0), (t, t));
            let x = &anq * &v[n] * anl.adjoint(); // E_n A_nq V A_nl† E_n†
            let xt = &anl * &v[n] * anq.adjoint(); // E_n A_nl V A_nq† E_n†
                                                   // K_q E_n X E_n† : columns of block n
            g.columns_mut(n * t, t).gemm(cr(mu[n]), &exp.k[q].columns(n * t, t), &x, ONE);
            // E_n X E_n† K_q : rows of block n
            g.rows_mut(n * t, t).gemm(cr(mu[n]), &xt, &exp.k[q].rows(n * t, t), ONE);
        }
    }
    g * cr(sigma2)
}

/// Phase sub-problem with A, V, W held fixed.
pub struct AsymPhaseObjective<'a> {
    pub problem: &'a Problem,
    pub a: &'a [CMat],
    pub v: &'a [CMat],
    pub w: &'a [CMat],
    pub solver: &'a SolverConfig,
    warm: Option<Vec<CauchySolution>>,
    /// Recent (θ, solutions) pairs; the line search revisits the accepted point for its gradient.
    recent: Vec<(Vec<C64>, Vec<CauchySolution>)>,
}

const RECENT: usize = 4;

impl<'a> AsymPhaseObjective<'a> {
    pub fn new(problem: &'a Problem, state: &'a TransceiverState, solver: &'a SolverConfig) -> Self {
        AsymPhaseObjective {
            problem,
            a: &state.a,
            v: &state.v,
            w: &state.w,
            solver,
            warm: None,
            recent: Vec::new(),
        }
    }

    /// Start the fixed-point iterations from nearby solutions.
    pub fn with_warm(mut self, sols: &[CauchySolution]) -> Self {
        self.warm = Some(sols.to_vec());
        self
    }

    /// Solutions of the most recent evaluation.
    pub fn last_solutions(&self) -> Option<&[CauchySolution]> {
        self.warm.as_deref()
    }

    /// f̂(θ) and, on request, its Euclidean gradient 2·df̂/dθ*.
    pub fn eval(&mut self, theta: &[C64], with_grad: bool) -> Result<(f64, Option<Vec<C64>>)> {
        let pr = self.problem;
        let sols = match self.recent.iter().find(|(th, _)| th.as_slice() == theta) {
            Some((_, s)) => s.clone(),
            None => {
                let s = solve_all(&pr.stats, self.w, theta, -pr.sigma2, self.solver, self.warm.as_deref())?;
                if self.recent.len() == RECENT {
                    self.recent.remove(0);
                }
                self.recent.push((theta.to_vec(), s.clone()));
                s
            }
        };
        let exp = compute_expectations(&sols, pr.sigma2, pr.dims().t);
        let f = objective_asym(&exp, self.a, self.v, &pr.mu);
        let grad = if with_grad {
            let mut g = vec![C64::new(0.0, 0.0); theta.len()];
            for (l, sol) in sols.iter().enumerate() {
                let gh = objective_sensitivity(&exp, self.a, self.v, &pr.mu, pr.sigma2, l);
                for (gi, di) in g.iter_mut().zip(gradient_adjoint(sol, &gh, self.solver)?) {
                    *gi += di * 2.0;
                }
            }
            Some(g)
        } else {
            None
        };
        self.warm = Some(sols);
        Ok((f, grad))
    }
}

/// Riemannian descent on f̂ with A, V, W fixed.
pub fn update_theta_asym(
    problem: &Problem,
    state: &TransceiverState,
    solver: &SolverConfig,
    descent: &DescentConfig,
    warm: Option<&[CauchySolution]>,
) -> Result<(Vec<C64>, DescentReport)> {
    check_state(problem, state)?;
    if problem.stats.l_r() == 0 {
        return Ok((vec![], DescentReport::default()));
    }
    let mut obj = AsymPhaseObjective::new(problem, state, solver);
    if let Some(w) = warm {
        obj = obj.with_warm(w);
    }
    let mut f = |th: &[C64], g: bool| obj.eval(th, g);
    armijo_descent(&state.theta, descent, &mut f)
}

/// Asymptotic weighted sum rate at (W, Θ) with the optimal combiner, plus that combiner.
pub fn rate_asym(
    problem: &Problem,
    w: &[CMat],
    theta: &[C64],
    solver: &SolverConfig,
    warm: Option<&[CauchySolution]>,
) -> Result<(Vec<f64>, f64, Vec<CMat>, Vec<CauchySolution>)> {
    let sols = solve_all(&problem.stats, w, theta, -problem.sigma2, solver, warm)?;
    let exp = compute_expectations(&sols, problem.sigma2, problem.dims().t);
    let (a, _) = update_a_asym(&exp, problem.sigma2);
    let (rates, ws, _) = rates_for(&problem.mu, &a, &exp.moments());
    Ok((rates, ws, a, sols))
}

/// The asymptotic AO loop: A → V → W → Θ, re-solving the fixed points each iteration.
pub fn algorithm1(problem: &Problem, cfg: &AsymConfig) -> Result<(TransceiverState, AOTrace)> {
    if cfg.ao_iters == 0 {
        return Err(Error::Config("ao_iters must be at least 1".into()));
    }
    let z = -problem.sigma2;
    let t = problem.dims().t;
    let mut state = TransceiverState::identity(problem);
    let mut trace = AOTrace::default();
    let mut sols = solve_all(&problem.stats, &state.w, &state.theta, z, &cfg.solver, None)?;
    let exp = compute_expectations(&sols, problem.sigma2, t);
    trace.identity_rate = rates_for(&problem.mu, &state.a, &exp.moments()).1;
    let (a0, _) = update_a_asym(&exp, problem.sigma2);
    trace.initial_rate = rates_for(&problem.mu, &a0, &exp.moments()).1;
    let mut prev_lams = vec![0.0; problem.dims().n];
    for it in 0..cfg.ao_iters {
        let clock = Instant::now();
        // `sols` is always current for (state.w, state.theta) here
        let exp = compute_expectations(&sols, problem.sigma2, t);
        let (a, fa) = update_a_asym(&exp, problem.sigma2);
        if fa {
            trace.flags.push(format!("iteration {it}: ridge applied to combiner"));
        }
        state.a = a;
        let e = mse_asym(&exp, &state.a);
        state.v = update_v(&e)?;
        let objective_av = sum_mse(&problem.mu, &state.v, &e);
        let (w, lams) = update_w_asym(&exp, &state, &problem.mu, &problem.p)?;
        // Keep the new precoders only if f̂ with A and V held fixed does not grow; with that
        // and the descent on Θ the rate cannot fall.
        let cand = TransceiverState { w, ..state.clone() };
        let mut check = AsymPhaseObjective::new(problem, &cand, &cfg.solver).with_warm(&sols);
        let (f_new, _) = check.eval(&state.theta, false)?;
        let cand_sols = check.last_solutions().map(|s| s.to_vec());
        let accepted = f_new <= objective_av + 1e-10 * objective_av.abs();
        let lams = if accepted {
            for (n, (old, new)) in state.w.iter().zip(&cand.w).enumerate() {
                let (ro, rn) = (precoder_rank(old), precoder_rank(new));
                if rn < ro {
                    trace.flags.push(format!("iteration {it}: precoder of UE {n} reduced to rank {rn}"));
                }
            }
            state.w = cand.w;
            prev_lams = lams.clone();
            lams
        } else {
            trace.flags.push(format!("iteration {it}: precoder step rejected"));
            prev_lams.clone()
        };
        let warm = if accepted { cand_sols.as_deref() } else { Some(&sols[..]) };
        let (theta, rep) = update_theta_asym(problem, &state, &cfg.solver, &cfg.descent, warm)?;
        state.theta = theta;
        let (rates, ws, a_opt, new_sols) = rate_asym(problem, &state.w, &state.theta, &cfg.solver, Some(&sols))?;
        sols = new_sols;
        let (mc_rate, mc_std_err) = match &cfg.mc_check {
            Some(chk) => {
                // the same draws at every iteration so the check trace shares its noise
                let draws = DrawSet::new(substream(chk.seed, &[0]), chk.trials);
                let mm = mc_moments(problem, &state.w, &state.theta, draws, Detector::Mmse);
                let est = estimate_from(&problem.mu, &a_opt, &mm);
                (Some(est.weighted_sum), Some(est.std_err))
            }
            None => (None, None),
        };
        let powers = state.powers();
        trace.iterations.push(IterationRecord {
            weighted_sum_rate: ws,
            std_err: 0.0,
            rates,
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
            mc_rate,
            mc_std_err,
            wall_time: clock.elapsed().as_secs_f64(),
        });
        state.a = a_opt;
    }
    let exp = compute_expectations(&sols, problem.sigma2, t);
    if let Ok(v) = update_v_asym(&exp, &state.a) {
        state.v = v;
    }
    Ok((state, trace))
}
