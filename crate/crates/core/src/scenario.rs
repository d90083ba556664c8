//! Network geometry, large-scale fading and per-link statistical CSI.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{c, cr, fro2, CMat, CVec, RMat, C64};
use crate::rng::cgauss_mat;

pub const D_MIN: f64 = 1.0;
pub const CORR_DECAY: f64 = 0.7;

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0) / 1000.0
}

pub fn watts_to_dbm(w: f64) -> f64 {
    10.0 * (w * 1000.0).log10()
}

/// Uniform planar array shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Upa {
    pub nh: usize,
    pub nv: usize,
}

impl Upa {
    pub fn count(&self) -> usize {
        self.nh * self.nv
    }

    /// Most square factorization with nh ≥ nv.
    pub fn near_square(n: usize) -> Upa {
        let mut nv = 1;
        let mut d = 1;
        while d * d <= n {
            if n % d == 0 {
                nv = d;
            }
            d += 1;
        }
        Upa {
            nh: n / nv.max(1),
            nv: nv.max(1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub l: usize,
    pub n: usize,
    pub k: usize,
    pub r: usize,
    pub t: usize,
    pub l_k: Vec<usize>,
    /// Per-UE power budget in watts.
    pub p: Vec<f64>,
    /// Noise power in watts.
    pub sigma2: f64,
    pub mu: Vec<f64>,
    pub area_side: f64,
    pub ris_radius: f64,
    pub alpha_au: f64,
    pub alpha_ar: f64,
    pub alpha_ru: f64,
    pub kappa_au: f64,
    pub kappa_ar: f64,
    pub kappa_ru: f64,
    pub ap_array: Upa,
    pub ue_array: Upa,
    pub ris_arrays: Vec<Upa>,
    pub delta: f64,
    pub seed: u64,
    pub mc_trials: usize,
    pub ao_iters: usize,
}

impl SystemConfig {
    /// Defaults of the reference simulation setup with the given dimensions.
    pub fn with_dims(l: usize, n: usize, k: usize, r: usize, t: usize, l_ris: usize) -> Self {
        SystemConfig {
            l,
            n,
            k,
            r,
            t,
            l_k: vec![l_ris; k],
            p: vec![dbm_to_watts(23.0); n],
            sigma2: dbm_to_watts(-94.0),
            mu: vec![1.0; n],
            area_side: 1000.0,
            ris_radius: 10.0,
            alpha_au: 3.8,
            alpha_ar: 2.0,
            alpha_ru: 2.2,
            kappa_au: 3.0,
            kappa_ar: 10.0,
            kappa_ru: 10.0,
            ap_array: Upa::near_square(r),
            ue_array: Upa::near_square(t),
            ris_arrays: vec![Upa::near_square(l_ris); k],
            delta: 0.5,
            seed: 0,
            mc_trials: 1000,
            ao_iters: 10,
        }
    }

    pub fn tt(&self) -> usize {
        self.n * self.t
    }

    pub fn l_r(&self) -> usize {
        self.l_k.iter().sum()
    }

    pub fn l_ar(&self) -> usize {
        self.r + self.l_r()
    }

    /// Re-derive array shapes after a count changed.
    pub fn refresh_arrays(&mut self) {
        self.ap_array = Upa::near_square(self.r);
        self.ue_array = Upa::near_square(self.t);
        self.l_k.resize(self.k, self.l_k.last().copied().unwrap_or(1));
        self.ris_arrays = self.l_k.iter().map(|&m| Upa::near_square(m)).collect();
        self.p.resize(self.n, self.p.last().copied().unwrap_or(dbm_to_watts(23.0)));
        self.mu.resize(self.n, self.mu.last().copied().unwrap_or(1.0));
    }

    pub fn set_kappa(&mut self, kappa: f64) {
        self.kappa_au = kappa;
        self.kappa_ar = kappa;
        self.kappa_ru = kappa;
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.l == 0 || self.n == 0 || self.r == 0 || self.t == 0 {
            return bad("L, N, R and T must all be at least 1".into());
        }
        if self.l_k.len() != self.k {
            return bad(format!("L_k has {} entries but K = {}", self.l_k.len(), self.k));
        }
        if self.l_k.iter().any(|&m| m == 0) {
            return bad("every RIS needs at least one element".into());
        }
        if self.ap_array.count() != self.r {
            return bad(format!(
                "AP array {}x{} does not match R = {}",
                self.ap_array.nh, self.ap_array.nv, self.r
            ));
        }
        if self.ue_array.count() != self.t {
            return bad(format!(
                "UE array {}x{} does not match T = {}",
                self.ue_array.nh, self.ue_array.nv, self.t
            ));
        }
        if self.ris_arrays.len() != self.k || self.ris_arrays.iter().zip(&self.l_k).any(|(a, &m)| a.count() != m) {
            return bad("RIS array shapes do not match L_k".into());
        }
        if self.p.len() != self.n || self.p.iter().any(|&p| !(p > 0.0)) {
            return bad("need one positive power budget per UE".into());
        }
        if !(self.sigma2 > 0.0) {
            return bad("noise power must be positive".into());
        }
        if self.mu.len() != self.n || self.mu.iter().any(|&m| !(m >= 0.0)) || !self.mu.iter().any(|&m| m > 0.0) {
            return bad("priority weights must be nonnegative with at least one positive".into());
        }
        if !(self.area_side > 0.0) || !(self.ris_radius >= 0.0) || !(self.delta > 0.0) {
            return bad("geometry parameters out of range".into());
        }
        for k in [self.kappa_au, self.kappa_ar, self.kappa_ru] {
            if !(k >= 0.0) {
                return bad("Rician factors must be nonnegative".into());
            }
        }
        Ok(())
    }
}

pub type Point = [f64; 2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkLayout {
    pub ap_positions: Vec<Point>,
    pub ue_positions: Vec<Point>,
    pub ris_positions: Vec<Point>,
}

fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Azimuth of `to` seen from `from`.
fn azimuth(from: Point, to: Point) -> f64 {
    (to[1] - from[1]).atan2(to[0] - from[0])
}

pub fn generate_layout<R: Rng + ?Sized>(cfg: &SystemConfig, rng: &mut R) -> NetworkLayout {
    let a = cfg.area_side;
    let uniform = |rng: &mut R| [rng.random::<f64>() * a, rng.random::<f64>() * a];
    let ap_positions: Vec<Point> = (0..cfg.l).map(|_| uniform(rng)).collect();
    let ue_positions: Vec<Point> = (0..cfg.n).map(|_| uniform(rng)).collect();
    let ris_positions = (0..cfg.k)
        .map(|k| {
            let anchor = ue_positions[k % cfg.n];
            let rad = cfg.ris_radius * rng.random::<f64>().sqrt();
            let ang = 2.0 * PI * rng.random::<f64>();
            [anchor[0] + rad * ang.cos(), anchor[1] + rad * ang.sin()]
        })
        .collect();
    NetworkLayout {
        ap_positions,
        ue_positions,
        ris_positions,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PathLoss {
    pub db: f64,
    /// Distance was below `D_MIN` and got clamped.
    pub clamped: bool,
}

pub fn pathloss(d: f64, alpha: f64) -> PathLoss {
    let clamped = !(d >= D_MIN);
    let d = if clamped { D_MIN } else { d };
    PathLoss {
        db: -30.0 - 10.0 * alpha * d.log10(),
        clamped,
    }
}

pub fn pathloss_db(d: f64, alpha: f64) -> f64 {
    let pl = pathloss(d, alpha);
    if pl.clamped {
        log::warn!("distance {d} m below {D_MIN} m, clamped");
    }
    pl.db
}

pub fn steering_vector(theta: f64, phi: f64, nh: usize, nv: usize, delta: f64) -> CVec {
    let kh = 2.0 * PI * delta * phi.sin() * theta.sin();
    let kv = 2.0 * PI * delta * phi.cos();
    CVec::from_fn(nh * nv, |idx, _| {
        let (ih, iv) = ((idx / nv) as f64, (idx % nv) as f64);
        C64::from_polar(1.0, kh * ih + kv * iv)
    })
}

/// Rank-one LoS component a_r a_t† scaled to ‖·‖² = R_rx β κ/(κ+1).
pub fn build_los_mean(rx: (f64, f64), tx: (f64, f64), rx_upa: Upa, tx_upa: Upa, delta: f64, beta: f64, kappa: f64) -> CMat {
    let ar = steering_vector(rx.0, rx.1, rx_upa.nh, rx_upa.nv, delta);
    let at = steering_vector(tx.0, tx.1, tx_upa.nh, tx_upa.nv, delta);
    let mut m = &ar * at.adjoint();
    let target = rx_upa.count() as f64 * beta * los_fraction(kappa);
    let now = fro2(&m);
    m *= cr((target / now).sqrt());
    m
}

fn los_fraction(kappa: f64) -> f64 {
    if kappa.is_infinite() {
        1.0
    } else {
        kappa / (kappa + 1.0)
    }
}

/// Statistical CSI of one link: F̃ = rx_corr (var_profile ⊙ X) tx_corr†, X ~ CN(0, 1/n_tx).
#[derive(Clone, Debug)]
pub struct LinkStatistics {
    pub mean: CMat,
    pub rx_corr: CMat,
    pub tx_corr: CMat,
    pub var_profile: RMat,
    pub beta: f64,
    pub kappa: f64,
}

impl LinkStatistics {
    pub fn rx_dim(&self) -> usize {
        self.mean.nrows()
    }

    pub fn tx_dim(&self) -> usize {
        self.mean.ncols()
    }

    /// Tr of the full covariance of vec(F̃).
    pub fn scatter_power(&self) -> f64 {
        let rx_norms: Vec<f64> = (0..self.rx_dim()).map(|i| self.rx_corr.column(i).norm_squared()).collect();
        let tx_norms: Vec<f64> = (0..self.tx_dim()).map(|j| self.tx_corr.column(j).norm_squared()).collect();
        let mut s = 0.0;
        for i in 0..self.rx_dim() {
            for j in 0..self.tx_dim() {
                s += self.var_profile[(i, j)].powi(2) * rx_norms[i] * tx_norms[j];
            }
        }
        s / self.tx_dim() as f64
    }

    pub fn los_power(&self) -> f64 {
        fro2(&self.mean)
    }

    /// Multiply the link (mean and scattering) by a real gain `s`.
    pub fn scaled(&self, s: f64) -> LinkStatistics {
        LinkStatistics {
            mean: &self.mean * cr(s),
            rx_corr: self.rx_corr.clone(),
            tx_corr: self.tx_corr.clone(),
            var_profile: &self.var_profile * s,
            beta: self.beta * s * s,
            kappa: self.kappa,
        }
    }

    /// Relative deviation from the normalization identities.
    pub fn normalization_error(&self) -> f64 {
        let rx = self.rx_dim() as f64;
        let want_los = rx * self.beta * los_fraction(self.kappa);
        let want_sc = rx * self.beta * (1.0 - los_fraction(self.kappa));
        let total = rx * self.beta;
        let e1 = (self.los_power() - want_los).abs() / total;
        let e2 = (self.scatter_power() - want_sc).abs() / total;
        e1.max(e2)
    }

    /// A link with all-zero statistics.
    pub fn zero(rx: usize, tx: usize) -> LinkStatistics {
        LinkStatistics {
            mean: CMat::zeros(rx, tx),
            rx_corr: CMat::identity(rx, rx),
            tx_corr: CMat::identity(tx, tx),
            var_profile: RMat::zeros(rx, tx),
            beta: 0.0,
            kappa: 0.0,
        }
    }
}

/// Q diag(λ) Q† with Haar-like Q and geometric eigenvalues of unit mean.
pub fn random_correlation<R: Rng + ?Sized>(rng: &mut R, n: usize, decay: f64) -> CMat {
    let g = cgauss_mat(rng, n, n, 1.0);
    let qr = g.qr();
    let mut q = qr.q();
    let rdiag = qr.r().diagonal();
    // fix the phase ambiguity of QR so Q is Haar distributed
    for j in 0..n {
        let d = rdiag[j];
        let ph = if d.norm() > 0.0 { d / d.norm() } else { c(1.0, 0.0) };
        for i in 0..n {
            q[(i, j)] *= ph;
        }
    }
    let raw: Vec<f64> = (0..n).map(|i| decay.powi(i as i32)).collect();
    let mean = raw.iter().sum::<f64>() / n as f64;
    let mut qd = q.clone();
    for j in 0..n {
        let s = cr(raw[j] / mean);
        for i in 0..n {
            qd[(i, j)] *= s;
        }
    }
    qd * q.adjoint()
}

struct LinkGeometry {
    rx_pos: Point,
    tx_pos: Point,
    rx_upa: Upa,
    tx_upa: Upa,
    alpha: f64,
    kappa: f64,
}

fn draw_link<R: Rng + ?Sized>(rng: &mut R, geo: &LinkGeometry, delta: f64, warnings: &mut Vec<String>) -> LinkStatistics {
    let (rx, tx) = (geo.rx_upa.count(), geo.tx_upa.count());
    let d = dist(geo.rx_pos, geo.tx_pos);
    let pl = pathloss(d, geo.alpha);
    if pl.clamped {
        warnings.push(format!("link distance {d:.3} m clamped to {D_MIN} m"));
    }
    let beta = 10f64.powf(pl.db / 10.0);
    let rx_corr = random_correlation(rng, rx, CORR_DECAY);
    let tx_corr = random_correlation(rng, tx, CORR_DECAY);
    let mut var_profile = RMat::from_fn(rx, tx, |_, _| rng.random_range(0.1..1.0));
    let el_rx = rng.random_range(PI / 3.0..2.0 * PI / 3.0);
    let el_tx = rng.random_range(PI / 3.0..2.0 * PI / 3.0);
    let mean = build_los_mean(
        (azimuth(geo.rx_pos, geo.tx_pos), el_rx),
        (azimuth(geo.tx_pos, geo.rx_pos), el_tx),
        geo.rx_upa,
        geo.tx_upa,
        delta,
        beta,
        geo.kappa,
    );
    let mut link = LinkStatistics {
        mean,
        rx_corr,
        tx_corr,
        var_profile: var_profile.clone(),
        beta,
        kappa: geo.kappa,
    };
    let want = rx as f64 * beta * (1.0 - los_fraction(geo.kappa));
    let have = link.scatter_power();
    var_profile *= (want / have).sqrt();
    link.var_profile = var_profile;
    link
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub l: usize,
    pub n: usize,
    pub r: usize,
    pub t: usize,
}

/// Statistical CSI of every link in the network.
#[derive(Clone, Debug)]
pub struct NetworkStatistics {
    pub dims: Dims,
    pub l_k: Vec<usize>,
    /// Direct AP–UE links, indexed `[n][l]`.
    pub f0: Vec<Vec<LinkStatistics>>,
    /// UE–RIS links, indexed `[n][k]`.
    pub f: Vec<Vec<LinkStatistics>>,
    /// RIS–AP links, indexed `[k][l]`.
    pub g: Vec<Vec<LinkStatistics>>,
    pub warnings: Vec<String>,
}

impl NetworkStatistics {
    pub fn k(&self) -> usize {
        self.l_k.len()
    }

    pub fn tt(&self) -> usize {
        self.dims.n * self.dims.t
    }

    pub fn l_r(&self) -> usize {
        self.l_k.iter().sum()
    }

    pub fn l_ar(&self) -> usize {
        self.dims.r + self.l_r()
    }

    /// Start offset of RIS `k` inside the flattened phase vector.
    pub fn ris_offset(&self, k: usize) -> usize {
        self.l_k[..k].iter().sum()
    }

    pub fn links(&self) -> impl Iterator<Item = &LinkStatistics> {
        self.f0.iter().flatten().chain(self.f.iter().flatten()).chain(self.g.iter().flatten())
    }

    /// Same network with every RIS removed.
    pub fn without_ris(&self) -> NetworkStatistics {
        NetworkStatistics {
            dims: self.dims,
            l_k: vec![],
            f0: self.f0.clone(),
            f: vec![vec![]; self.dims.n],
            g: vec![],
            warnings: self.warnings.clone(),
        }
    }

    /// Scale every UE-side link by `s`, and rebalance each RIS's two hops by `c_k`
    /// (G ← c_k G, F ← F / c_k). The cascaded channels are unchanged by the rebalance.
    pub fn rescaled(&self, s: f64, balance: &[f64]) -> NetworkStatistics {
        let mut out = self.clone();
        for n in 0..self.dims.n {
            for l in 0..self.dims.l {
                out.f0[n][l] = self.f0[n][l].scaled(s);
            }
            for k in 0..self.k() {
                out.f[n][k] = self.f[n][k].scaled(s / balance[k]);
            }
        }
        for k in 0..self.k() {
            for l in 0..self.dims.l {
                out.g[k][l] = self.g[k][l].scaled(balance[k]);
            }
        }
        out
    }

    /// Per-RIS factors equalizing the typical entry power of the two hops.
    pub fn hop_balance(&self) -> Vec<f64> {
        (0..self.k())
            .map(|k| {
                let entry = |s: &LinkStatistics| s.beta / s.tx_dim() as f64;
                let pf = self.f.iter().map(|row| entry(&row[k])).sum::<f64>() / self.dims.n as f64;
                let pg = self.g[k].iter().map(entry).sum::<f64>() / self.dims.l as f64;
                if pf > 0.0 && pg > 0.0 {
                    (pf / pg).powf(0.25)
                } else {
                    1.0
                }
            })
            .collect()
    }

    /// All-zero statistics with the given dimensions.
    pub fn zero(dims: Dims, l_k: &[usize]) -> NetworkStatistics {
        NetworkStatistics {
            dims,
            l_k: l_k.to_vec(),
            f0: (0..dims.n)
                .map(|_| (0..dims.l).map(|_| LinkStatistics::zero(dims.r, dims.t)).collect())
                .collect(),
            f: (0..dims.n)
                .map(|_| l_k.iter().map(|&m| LinkStatistics::zero(m, dims.t)).collect())
                .collect(),
            g: l_k
                .iter()
                .map(|&m| (0..dims.l).map(|_| LinkStatistics::zero(dims.r, m)).collect())
                .collect(),
            warnings: vec![],
        }
    }
}

pub fn generate_statistics<R: Rng + ?Sized>(cfg: &SystemConfig, layout: &NetworkLayout, rng: &mut R) -> NetworkStatistics {
    let mut warnings = Vec::new();
    let dims = Dims {
        l: cfg.l,
        n: cfg.n,
        r: cfg.r,
        t: cfg.t,
    };
    let mut f0 = Vec::with_capacity(cfg.n);
    for n in 0..cfg.n {
        let row = (0..cfg.l)
            .map(|l| {
                let geo = LinkGeometry {
                    rx_pos: layout.ap_positions[l],
                    tx_pos: layout.ue_positions[n],
                    rx_upa: cfg.ap_array,
                    tx_upa: cfg.ue_array,
                    alpha: cfg.alpha_au,
                    kappa: cfg.kappa_au,
                };
                draw_link(rng, &geo, cfg.delta, &mut warnings)
            })
            .collect();
        f0.push(row);
    }
    let mut f = Vec::with_capacity(cfg.n);
    for n in 0..cfg.n {
        let row = (0..cfg.k)
            .map(|k| {
                let geo = LinkGeometry {
                    rx_pos: layout.ris_positions[k],
                    tx_pos: layout.ue_positions[n],
                    rx_upa: cfg.ris_arrays[k],
                    tx_upa: cfg.ue_array,
                    alpha: cfg.alpha_ru,
                    kappa: cfg.kappa_ru,
                };
                draw_link(rng, &geo, cfg.delta, &mut warnings)
            })
            .collect();
        f.push(row);
    }
    let mut g = Vec::with_capacity(cfg.k);
    for k in 0..cfg.k {
        let row = (0..cfg.l)
            .map(|l| {
                let geo = LinkGeometry {
                    rx_pos: layout.ap_positions[l],
                    tx_pos: layout.ris_positions[k],
                    rx_upa: cfg.ap_array,
                    tx_upa: cfg.ris_arrays[k],
                    alpha: cfg.alpha_ar,
                    kappa: cfg.kappa_ar,
                };
                draw_link(rng, &geo, cfg.delta, &mut warnings)
            })
            .collect();
        g.push(row);
    }
    NetworkStatistics {
        dims,
        l_k: cfg.l_k.clone(),
        f0,
        f,
        g,
        warnings,
    }
}

/// Layout plus statistics from the config's own seed.
pub fn generate_network(cfg: &SystemConfig) -> Result<(NetworkLayout, NetworkStatistics)> {
    cfg.validate()?;
    let mut rng = crate::rng::stream_at(cfg.seed, &[crate::rng::label("layout")]);
    let layout = generate_layout(cfg, &mut rng);
    let mut rng = crate::rng::stream_at(cfg.seed, &[crate::rng::label("statistics")]);
    let stats = generate_statistics(cfg, &layout, &mut rng);
    Ok((layout, stats))
}

/// Everything an optimizer needs: statistics plus power/noise/priority parameters.
#[derive(Clone, Debug)]
pub struct Problem {
    pub stats: NetworkStatistics,
    pub p: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma2: f64,
}

impl Problem {
    pub fn new(stats: NetworkStatistics, cfg: &SystemConfig) -> Problem {
        Problem {
            stats,
            p: cfg.p.clone(),
            mu: cfg.mu.clone(),
            sigma2: cfg.sigma2,
        }
    }

    pub fn from_config(cfg: &SystemConfig) -> Result<Problem> {
        let (_, stats) = generate_network(cfg)?;
        Ok(Problem::new(stats, cfg))
    }

    /// Equivalent problem in noise-normalized units (σ² = 1) with balanced RIS hops.
    /// Transceiver states, rates and MSE matrices are identical in both.
    pub fn working_units(&self) -> Problem {
        let s = 1.0 / self.sigma2.sqrt();
        let tmp = self.stats.rescaled(s, &vec![1.0; self.stats.k()]);
        let bal = tmp.hop_balance();
        Problem {
            stats: tmp.rescaled(1.0, &bal),
            p: self.p.clone(),
            mu: self.mu.clone(),
            sigma2: 1.0,
        }
    }

    pub fn without_ris(&self) -> Problem {
        Problem {
            stats: self.stats.without_ris(),
            ..self.clone()
        }
    }

    pub fn dims(&self) -> Dims {
        self.stats.dims
    }
}
