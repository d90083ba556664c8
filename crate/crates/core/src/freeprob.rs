//! Deterministic equivalent of the per-AP Gram resolvent (zI − B_l)⁻¹ through an
//! operator-valued subordination fixed point on a block linearization.
//!
//! Linearized coordinates, in order: 1 (T_t), 2 (L_AR), 3 (R), 4 (L_AR). The
//! L_AR-sized coordinates split into an R-sized leading block and one block per RIS.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;

use crate::channel::check_theta;
use crate::error::{Error, Result};
use crate::krylov::gmres;
use crate::linalg::{herm, herm_eigvals, inverse, max_abs, CMat, C64, ONE, ZERO};
use crate::scenario::{LinkStatistics, NetworkStatistics};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Max-norm change of the resolvent blocks at which the iteration stops.
    pub tol: f64,
    pub max_iters: usize,
    /// Initial Picard damping ρ in new = (1−ρ)·old + ρ·update.
    pub damping: f64,
    pub min_damping: f64,
    /// Relative residual of the linear derivative / adjoint systems.
    pub linear_tol: f64,
    pub linear_max_matvecs: usize,
    /// Imaginary shift tried once when a real-axis solve hits a singular block.
    pub fallback_shift: f64,
    /// History length of Anderson mixing on the fixed-point map (0 = damped Picard only).
    pub anderson_depth: usize,
    /// Mixing iterations after which an unconverged solve switches to Newton steps from its best iterate.
    pub newton_after: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol: 1e-10,
            max_iters: 2000,
            damping: 0.5,
            min_damping: 1.0 / 1024.0,
            linear_tol: 1e-12,
            linear_max_matvecs: 600,
            fallback_shift: 1e-9,
            anderson_depth: 5,
            newton_after: 150,
        }
    }
}

/// Sizes and offsets of the linearization for one AP.
#[derive(Clone, Debug)]
pub struct Layout {
    pub tt: usize,
    pub t: usize,
    pub r: usize,
    /// Element count of each RIS.
    pub lk: Vec<usize>,
    /// Start of each L_AR sub-block: `[0, R, R+L_1, …]`.
    pub ar_off: Vec<usize>,
    pub lar: usize,
}

impl Layout {
    fn new(stats: &NetworkStatistics) -> Layout {
        let r = stats.dims.r;
        let mut ar_off = vec![0, r];
        for &m in &stats.l_k {
            ar_off.push(ar_off.last().unwrap() + m);
        }
        ar_off.pop();
        Layout {
            tt: stats.tt(),
            t: stats.dims.t,
            r,
            lk: stats.l_k.clone(),
            ar_off,
            lar: stats.l_ar(),
        }
    }

    pub fn k(&self) -> usize {
        self.lk.len()
    }

    /// Size of L_AR sub-block j (j = 0 is the R-sized block).
    fn ar_size(&self, j: usize) -> usize {
        if j == 0 {
            self.r
        } else {
            self.lk[j - 1]
        }
    }

    pub fn dim(&self) -> usize {
        self.tt + self.r + 2 * self.lar
    }

    fn off2(&self) -> usize {
        self.tt
    }

    fn off3(&self) -> usize {
        self.tt + self.lar
    }

    fn off4(&self) -> usize {
        self.tt + self.lar + self.r
    }

    /// D-block slots as (offset in the full matrix, size), in [1, 2_1..2_K, 3, 4_0..4_K] order.
    fn slots(&self) -> Vec<(usize, usize)> {
        let mut s = vec![(0, self.tt)];
        for k in 1..=self.k() {
            s.push((self.off2() + self.ar_off[k], self.lk[k - 1]));
        }
        s.push((self.off3(), self.r));
        for j in 0..=self.k() {
            s.push((self.off4() + self.ar_off[j], self.ar_size(j)));
        }
        s
    }

    fn i2(&self, k: usize) -> usize {
        1 + k
    }

    fn i3(&self) -> usize {
        1 + self.k()
    }

    fn i4(&self, j: usize) -> usize {
        2 + self.k() + j
    }
}

/// Element of the block-diagonal subalgebra, stored in slot order.
#[derive(Clone, Debug, PartialEq)]
pub struct DBlocks(pub Vec<CMat>);

impl DBlocks {
    fn zeros(lay: &Layout) -> DBlocks {
        DBlocks(lay.slots().iter().map(|&(_, b)| CMat::zeros(b, b)).collect())
    }

    fn max_abs_diff(&self, o: &DBlocks) -> f64 {
        self.0.iter().zip(&o.0).map(|(a, b)| max_abs(&(a - b))).fold(0.0, f64::max)
    }

    fn blend(&self, o: &DBlocks, rho: f64) -> DBlocks {
        DBlocks(
            self.0
                .iter()
                .zip(&o.0)
                .map(|(a, b)| a * C64::new(1.0 - rho, 0.0) + b * C64::new(rho, 0.0))
                .collect(),
        )
    }

    fn to_vec(&self) -> Vec<C64> {
        self.0.iter().flat_map(|m| m.iter().copied()).collect()
    }

    fn from_vec(lay: &Layout, v: &[C64]) -> DBlocks {
        let mut at = 0;
        DBlocks(
            lay.slots()
                .iter()
                .map(|&(_, b)| {
                    let m = CMat::from_column_slice(b, b, &v[at..at + b * b]);
                    at += b * b;
                    m
                })
                .collect(),
        )
    }
}

/// Statistics and fixed data of one AP's linearization.
#[derive(Clone, Debug)]
pub struct ApModel {
    pub lay: Layout,
    pub l: usize,
    /// Direct links of this AP, per UE.
    f0: Vec<LinkStatistics>,
    /// UE–RIS links `[n][k]`.
    f: Vec<Vec<LinkStatistics>>,
    /// RIS–AP links of this AP, per RIS.
    g: Vec<LinkStatistics>,
    pub w: Vec<CMat>,
    pub theta: Vec<C64>,
    /// F̄_l Ŵ, L_AR×T_t
    pub fw: CMat,
    /// Ḡ_l (with leading I_R), R×L_AR
    pub gbar: CMat,
    /// Ḡ_l Θ̂
    pub gt: CMat,
}

impl ApModel {
    pub fn new(stats: &NetworkStatistics, l: usize, w: &[CMat], theta: &[C64]) -> Result<ApModel> {
        check_theta(stats, theta)?;
        let d = stats.dims;
        if l >= d.l {
            return Err(Error::Contract(format!("AP index {l} out of range")));
        }
        if w.len() != d.n || w.iter().any(|w| w.nrows() != d.t || w.ncols() != d.t) {
            return Err(Error::Contract("precoders must be N square T×T matrices".into()));
        }
        let lay = Layout::new(stats);
        let mut fw = CMat::zeros(lay.lar, lay.tt);
        let mut gbar = CMat::zeros(d.r, lay.lar);
        for i in 0..d.r {
            gbar[(i, i)] = ONE;
        }
        for n in 0..d.n {
            let cols = n * d.t;
            fw.view_mut((0, cols), (d.r, d.t)).copy_from(&(&stats.f0[n][l].mean * &w[n]));
            for k in 0..stats.k() {
                let o = lay.ar_off[k + 1];
                fw.view_mut((o, cols), (lay.lk[k], d.t)).copy_from(&(&stats.f[n][k].mean * &w[n]));
            }
        }
        for k in 0..stats.k() {
            gbar.view_mut((0, lay.ar_off[k + 1]), (d.r, lay.lk[k])).copy_from(&stats.g[k][l].mean);
        }
        let mut gt = gbar.clone();
        for (j, th) in theta.iter().enumerate() {
            let mut c = gt.column_mut(d.r + j);
            c *= *th;
        }
        Ok(ApModel {
            lay,
            l,
            f0: stats.f0.iter().map(|row| row[l].clone()).collect(),
            f: stats.f.clone(),
            g: stats.g.iter().map(|row| row[l].clone()).collect(),
            w: w.to_vec(),
            theta: theta.to_vec(),
            fw,
            gbar,
            gt,
        })
    }

    fn phases(&self, k: usize) -> &[C64] {
        let o = self.lay.ar_off[k + 1] - self.lay.r;
        &self.theta[o..o + self.lay.lk[k]]
    }

    /// R-transform of the random part evaluated at `g`, returned in slot order
    /// (values that are subtracted in the linearized matrix).
    pub fn rmap(&self, g: &DBlocks) -> DBlocks {
        let lay = &self.lay;
        let (t, kk) = (lay.t, lay.k());
        let mut out = DBlocks::zeros(lay);
        // r1
        let g40 = &g.0[lay.i4(0)];
        for (n, wn) in self.w.iter().enumerate() {
            let mut inner = self.f0[n].left_map(g40);
            for k in 0..kk {
                inner += self.f[n][k].left_map(&g.0[lay.i4(k + 1)]);
            }
            let blk = wn.adjoint() * inner * wn;
            out.0[0].view_mut((n * t, n * t), (t, t)).copy_from(&blk);
        }
        // r2, r3
        let g3 = &g.0[lay.i3()];
        let mut r3 = CMat::zeros(lay.r, lay.r);
        for k in 0..kk {
            let th = self.phases(k);
            let mut e = self.g[k].left_map(g3);
            phase_sandwich(&mut e, th, true);
            out.0[lay.i2(k)] = e;
            let mut x = g.0[lay.i2(k)].clone();
            phase_sandwich(&mut x, th, false);
            r3 += self.g[k].right_map(&x);
        }
        out.0[lay.i3()] = r3;
        // r4
        let wg: Vec<CMat> = self
            .w
            .iter()
            .enumerate()
            .map(|(n, wn)| wn * g.0[0].view((n * t, n * t), (t, t)) * wn.adjoint())
            .collect();
        let mut r40 = CMat::zeros(lay.r, lay.r);
        for (n, x) in wg.iter().enumerate() {
            r40 += self.f0[n].right_map(x);
        }
        out.0[lay.i4(0)] = r40;
        for k in 0..kk {
            let mut acc = CMat::zeros(lay.lk[k], lay.lk[k]);
            for (n, x) in wg.iter().enumerate() {
                acc += self.f[n][k].right_map(x);
            }
            out.0[lay.i4(k + 1)] = acc;
        }
        out
    }

    /// Linearized matrix Λ(z) − R − L̄ as a dense matrix.
    pub fn dense_matrix(&self, z: C64, r: &DBlocks) -> CMat {
        let lay = &self.lay;
        let n = lay.dim();
        let mut m = CMat::zeros(n, n);
        let (o2, o3, o4) = (lay.off2(), lay.off3(), lay.off4());
        for i in 0..lay.tt {
            m[(i, i)] = z;
        }
        for i in 0..lay.r {
            m[(o3 + i, o3 + i)] = ONE;
        }
        for i in 0..lay.lar {
            m[(o2 + i, o4 + i)] = ONE;
            m[(o4 + i, o2 + i)] = ONE;
        }
        m.view_mut((0, o4), (lay.tt, lay.lar)).copy_from(&(-self.fw.adjoint()));
        m.view_mut((o4, 0), (lay.lar, lay.tt)).copy_from(&(-&self.fw));
        m.view_mut((o2, o3), (lay.lar, lay.r)).copy_from(&(-self.gt.adjoint()));
        m.view_mut((o3, o2), (lay.r, lay.lar)).copy_from(&(-&self.gt));
        for (&(o, b), x) in lay.slots().iter().zip(&r.0) {
            let mut v = m.view_mut((o, o), (b, b));
            v -= x;
        }
        m
    }

    /// M⁻¹ by a Schur complement over the (1,3) coordinates and the per-block
    /// (2_j, 4_j) pairs; dense LU when a pair block or the complement is singular.
    pub fn inverse(&self, z: C64, r: &DBlocks) -> Result<CMat> {
        match self.schur_inverse(z, r) {
            Some(a) => Ok(a),
            None => inverse(&self.dense_matrix(z, r), "linearized resolvent"),
        }
    }

    fn schur_inverse(&self, z: C64, r: &DBlocks) -> Option<CMat> {
        let lay = &self.lay;
        let (tt, rr, kk) = (lay.tt, lay.r, lay.k());
        let na = tt + rr;
        let n = lay.dim();
        let mut maa = CMat::zeros(na, na);
        maa.view_mut((0, 0), (tt, tt)).copy_from(&(CMat::identity(tt, tt) * z - &r.0[0]));
        maa.view_mut((tt, tt), (rr, rr)).copy_from(&(CMat::identity(rr, rr) - &r.0[lay.i3()]));
        let mut pinv = Vec::with_capacity(kk + 1);
        let mut q = Vec::with_capacity(kk + 1);
        let mut rt = Vec::with_capacity(kk + 1);
        for j in 0..=kk {
            let (o, b) = (lay.ar_off[j], lay.ar_size(j));
            let mut p = CMat::zeros(2 * b, 2 * b);
            if j > 0 {
                p.view_mut((0, 0), (b, b)).copy_from(&(-&r.0[lay.i2(j - 1)]));
            }
            p.view_mut((b, b), (b, b)).copy_from(&(-&r.0[lay.i4(j)]));
            for i in 0..b {
                p[(i, b + i)] = ONE;
                p[(b + i, i)] = ONE;
            }
            let pi = p.clone().try_inverse()?;
            if !pi.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
                return None;
            }
            let mut mba = CMat::zeros(2 * b, na);
            mba.view_mut((0, tt), (b, rr)).copy_from(&(-self.gt.columns(o, b).adjoint()));
            mba.view_mut((b, 0), (b, tt)).copy_from(&(-self.fw.rows(o, b)));
            let mut mab = CMat::zeros(na, 2 * b);
            mab.view_mut((0, b), (tt, b)).copy_from(&(-self.fw.rows(o, b).adjoint()));
            mab.view_mut((tt, 0), (rr, b)).copy_from(&(-self.gt.columns(o, b)));
            let qj = &pi * &mba;
            maa -= &mab * &qj;
            rt.push(&mab * &pi);
            q.push(qj);
            pinv.push(pi);
        }
        let sinv = maa.try_inverse()?;
        if !sinv.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
            return None;
        }
        // assemble dense A in natural order
        let pos_a = |i: usize| if i < tt { i } else { lay.off3() + i - tt };
        let pair_pos = |j: usize, i: usize| {
            let b = lay.ar_size(j);
            if i < b {
                lay.off2() + lay.ar_off[j] + i
            } else {
                lay.off4() + lay.ar_off[j] + i - b
            }
        };
        let mut a = CMat::zeros(n, n);
        for i in 0..na {
            for jx in 0..na {
                a[(pos_a(i), pos_a(jx))] = sinv[(i, jx)];
            }
        }
        let qs: Vec<CMat> = q.iter().map(|qj| qj * &sinv).collect();
        for j in 0..=kk {
            let asb = -(&sinv * &rt[j]);
            let abs_ = -&qs[j];
            for i in 0..na {
                for c in 0..asb.ncols() {
                    a[(pos_a(i), pair_pos(j, c))] = asb[(i, c)];
                    a[(pair_pos(j, c), pos_a(i))] = abs_[(c, i)];
                }
            }
            for i in 0..=kk {
                let mut blk = &qs[i] * &rt[j];
                if i == j {
                    blk += &pinv[j];
                }
                for x in 0..blk.nrows() {
                    for y in 0..blk.ncols() {
                        a[(pair_pos(i, x), pair_pos(j, y))] = blk[(x, y)];
                    }
                }
            }
        }
        Some(a)
    }
}

/// X ← Θ† X Θ (`adj_left`) or X ← Θ X Θ† for a diagonal Θ.
fn phase_sandwich(x: &mut CMat, th: &[C64], adj_left: bool) {
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            let f = if adj_left { th[i].conj() * th[j] } else { th[i] * th[j].conj() };
            x[(i, j)] *= f;
        }
    }
}

fn project(lay: &Layout, a: &CMat) -> DBlocks {
    DBlocks(lay.slots().iter().map(|&(o, b)| a.view((o, o), (b, b)).into_owned()).collect())
}

/// A·X for block-diagonal X given in slot order.
fn times_blockdiag(lay: &Layout, a: &CMat, x: &DBlocks) -> CMat {
    let mut y = CMat::zeros(a.nrows(), a.ncols());
    for (&(o, b), xb) in lay.slots().iter().zip(&x.0) {
        y.columns_mut(o, b).gemm(ONE, &a.columns(o, b), xb, ZERO);
    }
    y
}

/// P_D[A X A] for block-diagonal X.
fn sandwich_project(lay: &Layout, a: &CMat, x: &DBlocks) -> DBlocks {
    let y = times_blockdiag(lay, a, x);
    DBlocks(
        lay.slots()
            .iter()
            .map(|&(o, b)| {
                let mut m = CMat::zeros(b, b);
                m.gemm(ONE, &y.rows(o, b), &a.columns(o, b), ZERO);
                m
            })
            .collect(),
    )
}

/// Converged per-AP solution at one evaluation point.
#[derive(Clone, Debug)]
pub struct CauchySolution {
    pub z: C64,
    /// Υ, T_t×T_t
    pub upsilon: CMat,
    /// Γ, L_AR×L_AR (zero leading R block)
    pub gamma: CMat,
    /// Γ̃, R×R
    pub gamma_tilde: CMat,
    /// Υ̃, L_AR×L_AR
    pub upsilon_tilde: CMat,
    pub g_x1: CMat,
    /// One block per RIS.
    pub g_x2k: Vec<CMat>,
    pub g_x3: CMat,
    /// Leading R×R block followed by one block per RIS.
    pub g_x4k: Vec<CMat>,
    /// Deterministic equivalent of (zI − B_l)⁻¹.
    pub b_tilde: CMat,
    /// Υ̃ − (Γ − Θ̂†Ḡ†Γ̃⁻¹ḠΘ̂)⁻¹ when the cascade is well conditioned.
    pub omega: Option<CMat>,
    pub residual: f64,
    pub iters: usize,
    pub residual_trace: Vec<f64>,
    pub model: Arc<ApModel>,
    /// Full inverse of the linearized matrix at the fixed point.
    pub resolvent: Arc<CMat>,
    pub(crate) g: DBlocks,
}

impl CauchySolution {
    pub fn blocks(&self) -> &DBlocks {
        &self.g
    }

    /// Eigenvalues of I − z·B̃ (I + σ²B̃ at z = −σ²).
    pub fn spectral_check(&self) -> Vec<f64> {
        let k = CMat::identity(self.b_tilde.nrows(), self.b_tilde.nrows()) - &self.b_tilde * self.z;
        herm_eigvals(&herm(&k))
    }
}

/// Anderson mixing step from the histories of iterate and residual differences.
/// Returns None when the least-squares system is too ill conditioned to trust.
fn anderson_step(x: &[C64], f: &[C64], dx: &[Vec<C64>], df: &[Vec<C64>], beta: f64) -> Option<Vec<C64>> {
    let m = df.len();
    let mut gram = CMat::zeros(m, m);
    let mut rhs = CMat::zeros(m, 1);
    for i in 0..m {
        for j in i..m {
            let v: C64 = df[i].iter().zip(&df[j]).map(|(a, b)| a.conj() * b).sum();
            gram[(i, j)] = v;
            gram[(j, i)] = v.conj();
        }
        rhs[(i, 0)] = df[i].iter().zip(f).map(|(a, b)| a.conj() * b).sum();
    }
    let scale = (0..m).map(|i| gram[(i, i)].re).fold(0.0, f64::max);
    if !(scale > 0.0) {
        return None;
    }
    for i in 0..m {
        gram[(i, i)] += C64::new(1e-12 * scale, 0.0);
    }
    let gamma = gram.cholesky()?.solve(&rhs);
    if gamma.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return None;
    }
    let b = C64::new(beta, 0.0);
    let mut out: Vec<C64> = x.iter().zip(f).map(|(xi, fi)| xi + fi * b).collect();
    for i in 0..m {
        let gi = gamma[(i, 0)];
        for (o, (a, c)) in out.iter_mut().zip(dx[i].iter().zip(&df[i])) {
            *o -= (a + c * b) * gi;
        }
    }
    Some(out)
}

/// Unconverged mixing run: best iterate, its residual and the residual trace.
struct Stalled {
    best: DBlocks,
    residual: f64,
    trace: Vec<f64>,
}

fn solve_inner(model: Arc<ApModel>, z: C64, cfg: &SolverConfig, init: Option<&DBlocks>) -> Result<CauchySolution> {
    let budget = cfg.newton_after.min(cfg.max_iters);
    let stalled = match mix(&model, z, cfg, init, budget)? {
        Ok(sol) => return Ok(sol),
        Err(st) => st,
    };
    if budget >= cfg.max_iters {
        return Err(Error::NoConvergence {
            iters: budget,
            residual: stalled.residual,
        });
    }
    let mut trace = stalled.trace;
    let used = trace.len();
    if let Ok(sol) = newton(&model, z, cfg, stalled.best, &mut trace, used) {
        return Ok(sol);
    }
    continuation(&model, z, cfg, trace).map_err(|e| match e {
        Error::NoConvergence { iters, residual } => Error::NoConvergence {
            iters,
            residual: residual.min(stalled.residual),
        },
        e => e,
    })
}

/// Anderson-accelerated (or damped) mixing for at most `budget` iterations.
fn mix(
    model: &Arc<ApModel>,
    z: C64,
    cfg: &SolverConfig,
    init: Option<&DBlocks>,
    budget: usize,
) -> Result<std::result::Result<CauchySolution, Stalled>> {
    let lay = &model.lay;
    let mut g = init.cloned().unwrap_or_else(|| DBlocks::zeros(lay));
    let mut rho = cfg.damping;
    let mut prev = f64::INFINITY;
    let mut trace = Vec::new();
    let mut best = f64::INFINITY;
    let mut best_g = g.clone();
    // Anderson history: differences of iterates and of residuals F(g) − g
    let mut dx: Vec<Vec<C64>> = Vec::new();
    let mut df: Vec<Vec<C64>> = Vec::new();
    let mut last: Option<(Vec<C64>, Vec<C64>)> = None;
    for it in 1..=budget {
        let r = model.rmap(&g);
        let a = model.inverse(z, &r)?;
        let gn = project(lay, &a);
        let res = gn.max_abs_diff(&g);
        if !res.is_finite() {
            return Err(Error::Singular("non-finite fixed-point iterate".into()));
        }
        trace.push(res);
        if res < best {
            best = res;
            best_g = g.clone();
        }
        if res <= cfg.tol {
            // settle the resolvent at the accepted point
            let r = model.rmap(&gn);
            let a = model.inverse(z, &r)?;
            let gf = project(lay, &a);
            let res = gf.max_abs_diff(&gn);
            trace.push(res);
            return Ok(Ok(assemble(model.clone(), z, gf, r, a, res, it, trace)));
        }
        let rose = res > prev;
        prev = res;
        if cfg.anderson_depth == 0 || rose {
            // plain mixing shrinks the step on a rise; with acceleration a rise restarts the history
            if rose && (cfg.anderson_depth == 0 || res > 10.0 * best) {
                rho = (rho * 0.5).max(cfg.min_damping);
            }
            dx.clear();
            df.clear();
            last = None;
            g = g.blend(&gn, rho);
            continue;
        }
        let x = g.to_vec();
        let fx: Vec<C64> = gn.to_vec().iter().zip(&x).map(|(a, b)| a - b).collect();
        if let Some((xp, fp)) = last.take() {
            dx.push(x.iter().zip(&xp).map(|(a, b)| a - b).collect());
            df.push(fx.iter().zip(&fp).map(|(a, b)| a - b).collect());
            if dx.len() > cfg.anderson_depth {
                dx.remove(0);
                df.remove(0);
            }
        }
        let next = if df.is_empty() { None } else { anderson_step(&x, &fx, &dx, &df, rho) };
        g = match next {
            Some(v) => DBlocks::from_vec(lay, &v),
            None => g.blend(&gn, rho),
        };
        last = Some((x, fx));
    }
    Ok(Err(Stalled {
        best: best_g,
        residual: best,
        trace,
    }))
}

/// Newton steps taken from a start point before giving up.
const NEWTON_STEPS: usize = 40;

/// Inexact Newton on g − F(g) with a backtracking line search. Converges fast from a nearby
/// start on stiff maps, where mixing needs a damping too small to move the slow modes.
fn newton(model: &Arc<ApModel>, z: C64, cfg: &SolverConfig, mut g: DBlocks, trace: &mut Vec<f64>, mut it: usize) -> Result<CauchySolution> {
    let lay = &model.lay;
    let eval = |g: &DBlocks| -> Result<(DBlocks, CMat, DBlocks, f64)> {
        let r = model.rmap(g);
        let a = model.inverse(z, &r)?;
        let gn = project(lay, &a);
        let res = gn.max_abs_diff(g);
        Ok((r, a, gn, res))
    };
    let (mut r, mut a, mut gn, mut res) = eval(&g)?;
    let mut best = res;
    for _ in 0..NEWTON_STEPS {
        trace.push(res);
        best = best.min(res);
        if res <= cfg.tol {
            // a further mixing step can amplify the error on a stiff map, so keep this iterate
            return Ok(assemble(model.clone(), z, gn, r, a, res, it, std::mem::take(trace)));
        }
        if !res.is_finite() {
            break;
        }
        // (I − J)δ = F(g) − g with J v = P_D[A R(v) A]
        let f: Vec<C64> =
            gn.0.iter()
                .zip(&g.0)
                .flat_map(|(p, q)| (p - q).iter().copied().collect::<Vec<_>>())
                .collect();
        let op = |v: &[C64]| -> Vec<C64> {
            let x = DBlocks::from_vec(lay, v);
            let jx = sandwich_project(lay, &a, &model.rmap(&x));
            x.0.iter()
                .zip(&jx.0)
                .flat_map(|(p, q)| (p - q).iter().copied().collect::<Vec<_>>())
                .collect()
        };
        let step = gmres(op, &f, 1e-8, 60, cfg.linear_max_matvecs);
        let delta = DBlocks::from_vec(lay, &step.x);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..12 {
            let cand = DBlocks(g.0.iter().zip(&delta.0).map(|(x, d)| x + d * C64::new(t, 0.0)).collect());
            if let Ok((r2, a2, gn2, res2)) = eval(&cand) {
                if res2.is_finite() && res2 < (1.0 - 1e-4 * t) * res {
                    (g, r, a, gn, res) = (cand, r2, a2, gn2, res2);
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        it += 1;
        // a heavily cut step means the start is outside the Newton basin
        if !accepted || t < 0.01 {
            break;
        }
    }
    Err(Error::NoConvergence { iters: it, residual: best })
}

/// Track the solution from a far evaluation point, where mixing contracts, back to `z`
/// with warm-started Newton steps on a geometric path.
fn continuation(model: &Arc<ApModel>, z: C64, cfg: &SolverConfig, mut trace: Vec<f64>) -> Result<CauchySolution> {
    let budget = cfg.newton_after.min(cfg.max_iters);
    let mut scale = 1.0;
    let mut start = None;
    for _ in 0..40 {
        scale *= 4.0;
        if let Ok(sol) = mix(model, z * scale, cfg, None, budget)? {
            trace.extend(&sol.residual_trace);
            start = Some(sol);
            break;
        }
    }
    let Some(mut cur) = start else {
        return Err(Error::NoConvergence {
            iters: trace.len(),
            residual: f64::INFINITY,
        });
    };
    let mut factor = 2.0f64;
    while scale > 1.0 {
        let next = (scale / factor).max(1.0);
        let mut stage = Vec::new();
        match newton(model, z * next, cfg, cur.g.clone(), &mut stage, trace.len()) {
            Ok(sol) => {
                trace.extend(&sol.residual_trace);
                cur = sol;
                scale = next;
                factor = (factor * factor).min(64.0);
            }
            Err(_) => {
                trace.extend(stage);
                factor = factor.sqrt();
                if factor < 1.0 + 1e-3 {
                    return Err(Error::NoConvergence {
                        iters: trace.len(),
                        residual: cur.residual,
                    });
                }
            }
        }
    }
    cur.iters = trace.len();
    cur.residual_trace = trace;
    Ok(cur)
}

#[allow(clippy::too_many_arguments)]
fn assemble(model: Arc<ApModel>, z: C64, g: DBlocks, r: DBlocks, a: CMat, residual: f64, iters: usize, trace: Vec<f64>) -> CauchySolution {
    let lay = &model.lay;
    let (tt, rr, lar, kk) = (lay.tt, lay.r, lay.lar, lay.k());
    let upsilon = CMat::identity(tt, tt) * z - &r.0[0];
    let mut gamma = CMat::zeros(lar, lar);
    let mut upsilon_tilde = CMat::zeros(lar, lar);
    for j in 0..=kk {
        let (o, b) = (lay.ar_off[j], lay.ar_size(j));
        if j > 0 {
            gamma.view_mut((o, o), (b, b)).copy_from(&(-&r.0[lay.i2(j - 1)]));
        }
        upsilon_tilde.view_mut((o, o), (b, b)).copy_from(&(-&r.0[lay.i4(j)]));
    }
    let gamma_tilde = CMat::identity(rr, rr) - &r.0[lay.i3()];
    let omega = gamma_tilde.clone().try_inverse().and_then(|gti| {
        let inner = &gamma - model.gt.adjoint() * gti * &model.gt;
        let c = crate::linalg::cond_hpd(&(inner.adjoint() * &inner));
        if !(c < 1e24) {
            return None;
        }
        inner.try_inverse().map(|ii| &upsilon_tilde - ii)
    });
    CauchySolution {
        z,
        upsilon,
        gamma,
        gamma_tilde,
        upsilon_tilde,
        g_x1: g.0[0].clone(),
        g_x2k: (0..kk).map(|k| g.0[lay.i2(k)].clone()).collect(),
        g_x3: g.0[lay.i3()].clone(),
        g_x4k: (0..=kk).map(|j| g.0[lay.i4(j)].clone()).collect(),
        b_tilde: g.0[0].clone(),
        omega,
        residual,
        iters,
        residual_trace: trace,
        model,
        resolvent: Arc::new(a),
        g,
    }
}

/// Solve the subordination fixed point for AP `l` at the real point `z < 0`.
pub fn solve_fixed_point(stats: &NetworkStatistics, l: usize, w_hat: &[CMat], theta: &[C64], z: f64, cfg: &SolverConfig) -> Result<CauchySolution> {
    solve_fixed_point_from(stats, l, w_hat, theta, z, cfg, None)
}

/// As [`solve_fixed_point`], starting from the blocks of an earlier solution.
pub fn solve_fixed_point_from(
    stats: &NetworkStatistics,
    l: usize,
    w_hat: &[CMat],
    theta: &[C64],
    z: f64,
    cfg: &SolverConfig,
    warm: Option<&CauchySolution>,
) -> Result<CauchySolution> {
    if !(z < 0.0) {
        return Err(Error::Contract(format!("evaluation point must be negative, got {z}")));
    }
    if theta.iter().any(|t| (t.norm() - 1.0).abs() > 1e-9) {
        return Err(Error::Contract("phase entries must have unit modulus".into()));
    }
    let model = Arc::new(ApModel::new(stats, l, w_hat, theta)?);
    let init = warm.map(|s| &s.g);
    match solve_inner(model.clone(), C64::new(z, 0.0), cfg, init) {
        Err(Error::Singular(_)) if cfg.fallback_shift > 0.0 => solve_inner(model, C64::new(z, cfg.fallback_shift), cfg, init),
        Err(Error::NoConvergence { .. }) if init.is_some() => solve_inner(model, C64::new(z, 0.0), cfg, None),
        other => other,
    }
}

/// Solve for an already assembled model; phases need not be unit modulus here.
pub fn solve_model(model: ApModel, z: f64, cfg: &SolverConfig) -> Result<CauchySolution> {
    solve_inner(Arc::new(model), C64::new(z, 0.0), cfg, None)
}

/// Solutions for every AP, solved concurrently.
pub fn solve_all(
    stats: &NetworkStatistics,
    w_hat: &[CMat],
    theta: &[C64],
    z: f64,
    cfg: &SolverConfig,
    warm: Option<&[CauchySolution]>,
) -> Result<Vec<CauchySolution>> {
    (0..stats.dims.l)
        .into_par_iter()
        .map(|l| solve_fixed_point_from(stats, l, w_hat, theta, z, cfg, warm.map(|w| &w[l])))
        .collect()
}

/// (1/T_t)·Tr(Ξ B̃).
pub fn cauchy_transform(xi: &CMat, sol: &CauchySolution) -> C64 {
    crate::linalg::trace_prod(xi, &sol.b_tilde) / sol.b_tilde.nrows() as f64
}

/// Which Wirtinger coordinate of a phase entry is differentiated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coordinate {
    /// d/dθ*
    Conj,
    /// d/dθ
    Plain,
}

/// Derivative of every resolvent block with respect to one phase entry.
#[derive(Clone, Debug)]
pub struct Derivative {
    pub b_tilde_prime: CMat,
    pub blocks: DBlocks,
    /// Relative residual of the linear system.
    pub residual: f64,
    pub matvecs: usize,
}

impl CauchySolution {
    /// P_D[A · c · A] where c is the explicit θ-derivative of the linearized matrix's
    /// negative (∂R − ∂M₀) for element `j` of RIS `k`.
    fn explicit_term(&self, k: usize, j: usize, coord: Coordinate) -> DBlocks {
        let m = &self.model;
        let lay = &m.lay;
        let a = &*self.resolvent;
        let th = m.phases(k);
        let col = lay.ar_off[k + 1] + j;
        let (o2, o3) = (lay.off2(), lay.off3());
        // block-diagonal part ∂R
        let mut d = DBlocks::zeros(lay);
        let e = m.g[k].left_map(&self.g_x3);
        match coord {
            Coordinate::Conj => {
                // ∂r2 = E_jj η Θ  (row j only)
                for c in 0..e.ncols() {
                    let v = e[(j, c)] * th[c];
                    d.0[lay.i2(k)][(j, c)] = v;
                }
                let mut x = self.g_x2k[k].clone();
                for r in 0..x.nrows() {
                    for c in 0..x.ncols() {
                        x[(r, c)] = if c == j { th[r] * x[(r, c)] } else { ZERO };
                    }
                }
                d.0[lay.i3()] = m.g[k].right_map(&x);
            }
            Coordinate::Plain => {
                for r in 0..e.nrows() {
                    let v = th[r].conj() * e[(r, j)];
                    d.0[lay.i2(k)][(r, j)] = v;
                }
                let mut x = self.g_x2k[k].clone();
                for r in 0..x.nrows() {
                    for c in 0..x.ncols() {
                        x[(r, c)] = if r == j { x[(r, c)] * th[c].conj() } else { ZERO };
                    }
                }
                d.0[lay.i3()] = m.g[k].right_map(&x);
            }
        }
        let mut out = sandwich_project(lay, a, &d);
        // −∂M₀: (2,3) block gets +E_jj Ḡ† (conj) or (3,2) block gets +Ḡ E_jj (plain)
        let (u, v) = match coord {
            Coordinate::Conj => {
                // A[:, (2,col)] · (Ḡ†)_{col,:} · A[(3,:), :]
                let u = a.column(o2 + col).into_owned();
                let gr = m.gbar.column(col).adjoint();
                let v = gr * a.rows(o3, lay.r);
                (u, v)
            }
            Coordinate::Plain => {
                let u = a.columns(o3, lay.r) * m.gbar.column(col);
                let v = a.row(o2 + col).into_owned();
                (u, v)
            }
        };
        for (s, &(o, b)) in lay.slots().iter().enumerate() {
            let mut blk = out.0[s].clone();
            blk.gemm(ONE, &u.rows(o, b), &v.columns(o, b), ONE);
            out.0[s] = blk;
        }
        out
    }

    /// Solve x = P_D[A R(x) A] + rhs, or its transpose x = R(P_D[A x A]) + rhs.
    fn linear_solve(&self, rhs: &DBlocks, transpose: bool, cfg: &SolverConfig) -> (DBlocks, f64, usize) {
        let lay = &self.model.lay;
        let a = &*self.resolvent;
        let b = rhs.to_vec();
        let op = |v: &[C64]| -> Vec<C64> {
            let x = DBlocks::from_vec(lay, v);
            let lx = if transpose {
                self.model.rmap(&sandwich_project(lay, a, &x))
            } else {
                sandwich_project(lay, a, &self.model.rmap(&x))
            };
            x.0.iter()
                .zip(&lx.0)
                .flat_map(|(p, q)| (p - q).iter().copied().collect::<Vec<_>>())
                .collect()
        };
        let out = gmres(op, &b, cfg.linear_tol, 60, cfg.linear_max_matvecs);
        (DBlocks::from_vec(lay, &out.x), out.rel_residual, out.matvecs)
    }
}

/// dB̃/dθ* (or dB̃/dθ) for element `j` of RIS `k`.
pub fn solve_derivative_full(sol: &CauchySolution, k: usize, j: usize, coord: Coordinate, cfg: &SolverConfig) -> Result<Derivative> {
    let lay = &sol.model.lay;
    if k >= lay.k() || j >= lay.lk[k] {
        return Err(Error::Contract(format!("phase element ({k}, {j}) out of range")));
    }
    let rhs = sol.explicit_term(k, j, coord);
    let (x, residual, matvecs) = sol.linear_solve(&rhs, false, cfg);
    if !(residual <= cfg.linear_tol * 100.0) {
        return Err(Error::NoConvergence { iters: matvecs, residual });
    }
    Ok(Derivative {
        b_tilde_prime: x.0[0].clone(),
        blocks: x,
        residual,
        matvecs,
    })
}

/// dB̃/dθ*_{k, j}.
pub fn solve_derivative(sol: &CauchySolution, k: usize, j: usize, cfg: &SolverConfig) -> Result<CMat> {
    Ok(solve_derivative_full(sol, k, j, Coordinate::Conj, cfg)?.b_tilde_prime)
}

/// d/dθ* of Tr(Ĝ B̃) for every phase entry, by one adjoint solve.
pub fn gradient_adjoint(sol: &CauchySolution, g_hat: &CMat, cfg: &SolverConfig) -> Result<Vec<C64>> {
    let m = &sol.model;
    let lay = &m.lay;
    let a = &*sol.resolvent;
    let mut rhs = DBlocks::zeros(lay);
    rhs.0[0] = g_hat.clone();
    let (nu, residual, matvecs) = sol.linear_solve(&rhs, true, cfg);
    if !(residual <= cfg.linear_tol * 100.0) {
        return Err(Error::NoConvergence { iters: matvecs, residual });
    }
    // W = A ν A, only the pieces touching coordinates 2 and 3 are needed
    let an = times_blockdiag(lay, a, &nu);
    let (o2, o3) = (lay.off2(), lay.off3());
    let w3 = an.rows(o3, lay.r) * a; // rows of coordinate 3
    let w33 = w3.columns(o3, lay.r).into_owned();
    let mut grad = Vec::with_capacity(lay.lar - lay.r);
    for k in 0..lay.k() {
        let (o, b) = (lay.ar_off[k + 1], lay.lk[k]);
        let th = m.phases(k);
        let w22 = an.rows(o2 + o, b) * a.columns(o2 + o, b);
        let eta_w = m.g[k].left_map(&w33);
        let mut eth = m.g[k].left_map(&sol.g_x3);
        for c in 0..b {
            let mut col = eth.column_mut(c);
            col *= th[c];
        }
        let mut etw_t = eta_w;
        for c in 0..b {
            let mut col = etw_t.column_mut(c);
            col *= th[c];
        }
        let tail = etw_t * &sol.g_x2k[k];
        for jj in 0..b {
            let col = o + jj;
            let mut s = tail[(jj, jj)];
            for rr in 0..lay.r {
                s += m.gbar[(rr, col)].conj() * w3[(rr, o2 + col)];
            }
            for c in 0..b {
                s += eth[(jj, c)] * w22[(c, jj)];
            }
            grad.push(s);
        }
    }
    Ok(grad)
}

/// One CSV row per (AP, iteration) with the fixed-point residual.
pub fn write_residual_traces(path: &Path, sols: &[CauchySolution]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "ap,iteration,residual")?;
    for s in sols {
        for (i, r) in s.residual_trace.iter().enumerate() {
            writeln!(f, "{},{},{:.6e}", s.model.l, i + 1, r)?;
        }
    }
    Ok(())
}
