//! Channel realizations, stacking through the RIS phases, and the one-sided
//! correlation maps of the scattering components.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{block_diag, ensure_hermitian, hstack, vstack, CMat, C64, ONE, ZERO};
use crate::rng::{cgauss_mat, stream_at};
use crate::scenario::{LinkStatistics, NetworkStatistics};

/// One joint draw of every link.
#[derive(Clone, Debug)]
pub struct ChannelRealization {
    /// `[n][l]`, R×T
    pub f0: Vec<Vec<CMat>>,
    /// `[n][k]`, L_k×T
    pub f: Vec<Vec<CMat>>,
    /// `[k][l]`, R×L_k
    pub g: Vec<Vec<CMat>>,
}

pub fn sample_link<R: Rng + ?Sized>(link: &LinkStatistics, rng: &mut R) -> CMat {
    let (rx, tx) = (link.rx_dim(), link.tx_dim());
    let mut x = cgauss_mat(rng, rx, tx, 1.0 / tx as f64);
    for j in 0..tx {
        for i in 0..rx {
            x[(i, j)] *= link.var_profile[(i, j)];
        }
    }
    let mut out = link.mean.clone();
    let tmp = &link.rx_corr * x;
    out.gemm(ONE, &tmp, &link.tx_corr.adjoint(), ONE);
    out
}

pub fn sample_channel<R: Rng + ?Sized>(stats: &NetworkStatistics, rng: &mut R) -> ChannelRealization {
    let f0 = stats.f0.iter().map(|row| row.iter().map(|s| sample_link(s, rng)).collect()).collect();
    let f = stats.f.iter().map(|row| row.iter().map(|s| sample_link(s, rng)).collect()).collect();
    let g = stats.g.iter().map(|row| row.iter().map(|s| sample_link(s, rng)).collect()).collect();
    ChannelRealization { f0, f, g }
}

/// A reproducible, indexable set of channel draws: draw `t` always comes from the
/// same substream, which gives common random numbers across evaluations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DrawSet {
    pub seed: u64,
    pub trials: usize,
}

impl DrawSet {
    pub fn new(seed: u64, trials: usize) -> DrawSet {
        DrawSet { seed, trials }
    }

    pub fn draw(&self, stats: &NetworkStatistics, t: usize) -> ChannelRealization {
        let mut rng = stream_at(self.seed, &[t as u64]);
        sample_channel(stats, &mut rng)
    }
}

/// Per-AP stacked channel through the RIS phases.
#[derive(Clone, Debug)]
pub struct StackedChannel {
    /// L_AR×T_t
    pub f: CMat,
    /// R×L_AR
    pub g: CMat,
    /// diagonal of Θ̂ (leading R ones)
    pub theta_hat: Vec<C64>,
    /// R×T_t
    pub h: CMat,
}

pub fn check_theta(stats: &NetworkStatistics, theta: &[C64]) -> Result<()> {
    if theta.len() != stats.l_r() {
        return Err(Error::Config(format!(
            "phase vector has {} entries, expected {}",
            theta.len(),
            stats.l_r()
        )));
    }
    Ok(())
}

pub fn stack(stats: &NetworkStatistics, real: &ChannelRealization, theta: &[C64]) -> Result<Vec<StackedChannel>> {
    check_theta(stats, theta)?;
    let d = stats.dims;
    if real.f0.len() != d.n || real.f.len() != d.n || real.g.len() != stats.k() {
        return Err(Error::Config("realization does not match the statistics dimensions".into()));
    }
    let mut theta_hat = vec![ONE; d.r];
    theta_hat.extend_from_slice(theta);
    let f_ris: Vec<CMat> = (0..stats.k()).map(|k| ue_row(&real.f, k)).collect();
    let mut out = Vec::with_capacity(d.l);
    for l in 0..d.l {
        let f0l = hstack(&real.f0.iter().map(|row| &row[l]).collect::<Vec<_>>());
        let mut rows = vec![&f0l];
        rows.extend(f_ris.iter());
        let f = vstack(&rows);
        let eye = CMat::identity(d.r, d.r);
        let mut cols = vec![&eye];
        cols.extend(real.g.iter().map(|row| &row[l]));
        let g = hstack(&cols);
        let mut gt = g.clone();
        for (j, th) in theta_hat.iter().enumerate() {
            for i in 0..d.r {
                gt[(i, j)] *= th;
            }
        }
        let h = &gt * &f;
        out.push(StackedChannel {
            f,
            g,
            theta_hat: theta_hat.clone(),
            h,
        });
    }
    Ok(out)
}

/// [X_1 … X_N] for the UE-indexed links of RIS `k`.
fn ue_row(f: &[Vec<CMat>], k: usize) -> CMat {
    hstack(&f.iter().map(|row| &row[k]).collect::<Vec<_>>())
}

/// H_l = F₀ₗ + Σ_k G_kl Θ_k F_k for every AP, without building the stacked blocks.
pub fn effective_channels(stats: &NetworkStatistics, real: &ChannelRealization, theta: &[C64]) -> Vec<CMat> {
    let d = stats.dims;
    let tt = stats.tt();
    let f_ris: Vec<CMat> = (0..stats.k())
        .map(|k| {
            let mut fk = ue_row(&real.f, k);
            let off = stats.ris_offset(k);
            for i in 0..fk.nrows() {
                let th = theta[off + i];
                for j in 0..tt {
                    fk[(i, j)] *= th;
                }
            }
            fk
        })
        .collect();
    (0..d.l)
        .map(|l| {
            let mut h = CMat::zeros(d.r, tt);
            for n in 0..d.n {
                h.view_mut((0, n * d.t), (d.r, d.t)).copy_from(&real.f0[n][l]);
            }
            for (k, fk) in f_ris.iter().enumerate() {
                h.gemm(ONE, &real.g[k][l], fk, ONE);
            }
            h
        })
        .collect()
}

impl LinkStatistics {
    /// E[X̃† D X̃] for the scattering part X̃ (tx×tx output, D is rx×rx).
    pub fn left_map(&self, d: &CMat) -> CMat {
        let (rx, tx) = (self.rx_dim(), self.tx_dim());
        let dt = d * &self.rx_corr;
        let wc: Vec<C64> = (0..rx).map(|a| self.rx_corr.column(a).dotc(&dt.column(a))).collect();
        let inv = 1.0 / tx as f64;
        let pi: Vec<C64> = (0..tx)
            .map(|i| {
                let mut s = ZERO;
                for a in 0..rx {
                    s += wc[a] * self.var_profile[(a, i)].powi(2);
                }
                s * inv
            })
            .collect();
        sandwich(&self.tx_corr, &pi)
    }

    /// E[X̃ D X̃†] (rx×rx output, D is tx×tx).
    pub fn right_map(&self, d: &CMat) -> CMat {
        let (rx, tx) = (self.rx_dim(), self.tx_dim());
        let dp = d * &self.tx_corr;
        let wc: Vec<C64> = (0..tx).map(|j| self.tx_corr.column(j).dotc(&dp.column(j))).collect();
        let inv = 1.0 / tx as f64;
        let pi: Vec<C64> = (0..rx)
            .map(|i| {
                let mut s = ZERO;
                for j in 0..tx {
                    s += wc[j] * self.var_profile[(i, j)].powi(2);
                }
                s * inv
            })
            .collect();
        sandwich(&self.rx_corr, &pi)
    }
}

/// X diag(p) X†
fn sandwich(x: &CMat, p: &[C64]) -> CMat {
    let mut xp = x.clone();
    for (j, s) in p.iter().enumerate() {
        for i in 0..xp.nrows() {
            xp[(i, j)] *= s;
        }
    }
    let mut out = CMat::zeros(x.nrows(), x.nrows());
    out.gemm(ONE, &xp, &x.adjoint(), ZERO);
    out
}

fn check_square(d: &CMat, n: usize, what: &str) -> Result<()> {
    if d.nrows() != n || d.ncols() != n {
        return Err(Error::Contract(format!(
            "{what}: expected {n}x{n} input, got {}x{}",
            d.nrows(),
            d.ncols()
        )));
    }
    ensure_hermitian(d, what)
}

fn check_index(stats: &NetworkStatistics, k: Option<usize>, l: Option<usize>) -> Result<()> {
    if k.is_some_and(|k| k >= stats.k()) || l.is_some_and(|l| l >= stats.dims.l) {
        return Err(Error::Contract("RIS or AP index out of range".into()));
    }
    Ok(())
}

/// η_kl(D) = E[G̃_kl† D G̃_kl].
pub fn eta(stats: &NetworkStatistics, k: usize, l: usize, d: &CMat) -> Result<CMat> {
    check_index(stats, Some(k), Some(l))?;
    check_square(d, stats.dims.r, "eta")?;
    Ok(stats.g[k][l].left_map(d))
}

/// η̃_kl(D) = E[G̃_kl D G̃_kl†].
pub fn eta_tilde(stats: &NetworkStatistics, k: usize, l: usize, d: &CMat) -> Result<CMat> {
    check_index(stats, Some(k), Some(l))?;
    check_square(d, stats.l_k[k], "eta_tilde")?;
    Ok(stats.g[k][l].right_map(d))
}

/// ζ₀ₗ(Z₀) = blkdiag over UEs of E[F̃₀,ₙₗ† Z₀ F̃₀,ₙₗ].
pub fn zeta0(stats: &NetworkStatistics, l: usize, z0: &CMat) -> Result<CMat> {
    check_index(stats, None, Some(l))?;
    check_square(z0, stats.dims.r, "zeta0")?;
    Ok(zeta0_raw(stats, l, z0))
}

/// ζ̃₀ₗ(Z̃) = Σₙ E[F̃₀,ₙₗ Z̃ₙ F̃₀,ₙₗ†] using the diagonal T×T blocks of Z̃.
pub fn zeta0_tilde(stats: &NetworkStatistics, l: usize, zt: &CMat) -> Result<CMat> {
    check_index(stats, None, Some(l))?;
    check_square(zt, stats.tt(), "zeta0_tilde")?;
    Ok(zeta0_tilde_raw(stats, l, zt))
}

pub fn zeta_k(stats: &NetworkStatistics, k: usize, z: &CMat) -> Result<CMat> {
    check_index(stats, Some(k), None)?;
    check_square(z, stats.l_k[k], "zeta_k")?;
    Ok(zeta_k_raw(stats, k, z))
}

pub fn zeta_k_tilde(stats: &NetworkStatistics, k: usize, zt: &CMat) -> Result<CMat> {
    check_index(stats, Some(k), None)?;
    check_square(zt, stats.tt(), "zeta_k_tilde")?;
    Ok(zeta_k_tilde_raw(stats, k, zt))
}

pub(crate) fn zeta0_raw(stats: &NetworkStatistics, l: usize, z0: &CMat) -> CMat {
    block_diag(&stats.f0.iter().map(|row| row[l].left_map(z0)).collect::<Vec<_>>())
}

pub(crate) fn zeta_k_raw(stats: &NetworkStatistics, k: usize, z: &CMat) -> CMat {
    block_diag(&stats.f.iter().map(|row| row[k].left_map(z)).collect::<Vec<_>>())
}

fn ue_block(zt: &CMat, n: usize, t: usize) -> CMat {
    zt.view((n * t, n * t), (t, t)).into_owned()
}

pub(crate) fn zeta0_tilde_raw(stats: &NetworkStatistics, l: usize, zt: &CMat) -> CMat {
    let t = stats.dims.t;
    let mut out = CMat::zeros(stats.dims.r, stats.dims.r);
    for (n, row) in stats.f0.iter().enumerate() {
        out += row[l].right_map(&ue_block(zt, n, t));
    }
    out
}

pub(crate) fn zeta_k_tilde_raw(stats: &NetworkStatistics, k: usize, zt: &CMat) -> CMat {
    let t = stats.dims.t;
    let m = stats.l_k[k];
    let mut out = CMat::zeros(m, m);
    for (n, row) in stats.f.iter().enumerate() {
        out += row[k].right_map(&ue_block(zt, n, t));
    }
    out
}

/// Θ_k restricted phases of RIS `k`.
pub fn ris_phases<'a>(stats: &NetworkStatistics, theta: &'a [C64], k: usize) -> &'a [C64] {
    let off = stats.ris_offset(k);
    &theta[off..off + stats.l_k[k]]
}
