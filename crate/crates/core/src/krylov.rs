//! Restarted GMRES for small complex linear systems given as closures.

use crate::linalg::C64;

fn norm(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

fn dotc(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

pub struct GmresOutcome {
    pub x: Vec<C64>,
    /// ‖b − Op x‖ / ‖b‖ at exit.
    pub rel_residual: f64,
    pub matvecs: usize,
}

/// Solve Op x = b to relative residual `tol`. Returns the best iterate even when the budget runs out.
pub fn gmres<F>(mut op: F, b: &[C64], tol: f64, restart: usize, max_matvecs: usize) -> GmresOutcome
where
    F: FnMut(&[C64]) -> Vec<C64>,
{
    let n = b.len();
    let bn = norm(b);
    let mut x = vec![C64::new(0.0, 0.0); n];
    if bn == 0.0 {
        return GmresOutcome {
            x,
            rel_residual: 0.0,
            matvecs: 0,
        };
    }
    let mut matvecs = 0;
    let mut rel = 1.0;
    while matvecs < max_matvecs {
        let ax = if matvecs == 0 { vec![C64::new(0.0, 0.0); n] } else { op(&x) };
        if matvecs > 0 {
            matvecs += 1;
        }
        let r: Vec<C64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let beta = norm(&r);
        rel = beta / bn;
        if rel <= tol {
            break;
        }
        let m = restart.min(max_matvecs.saturating_sub(matvecs)).max(1);
        let mut basis: Vec<Vec<C64>> = vec![r.iter().map(|z| z / beta).collect()];
        let mut h = vec![vec![C64::new(0.0, 0.0); m]; m + 1];
        let mut cs = vec![0.0; m];
        let mut sn = vec![C64::new(0.0, 0.0); m];
        let mut g = vec![C64::new(0.0, 0.0); m + 1];
        g[0] = C64::new(beta, 0.0);
        let mut used = 0;
        for j in 0..m {
            let mut w = op(&basis[j]);
            matvecs += 1;
            for (i, v) in basis.iter().enumerate() {
                let hij = dotc(v, &w);
                h[i][j] = hij;
                for (wk, vk) in w.iter_mut().zip(v) {
                    *wk -= hij * vk;
                }
            }
            let wn = norm(&w);
            h[j + 1][j] = C64::new(wn, 0.0);
            for i in 0..j {
                let (a, bb) = (h[i][j], h[i + 1][j]);
                h[i][j] = cs[i] * a + sn[i] * bb;
                h[i + 1][j] = -sn[i].conj() * a + cs[i] * bb;
            }
            let (a, bb) = (h[j][j], h[j + 1][j]);
            let rr = (a.norm_sqr() + bb.norm_sqr()).sqrt();
            if rr == 0.0 {
                cs[j] = 1.0;
                sn[j] = C64::new(0.0, 0.0);
            } else if a.norm() == 0.0 {
                cs[j] = 0.0;
                sn[j] = bb.conj() / bb.norm();
            } else {
                cs[j] = a.norm() / rr;
                sn[j] = (a / a.norm()) * bb.conj() / rr;
            }
            h[j][j] = cs[j] * a + sn[j] * bb;
            h[j + 1][j] = C64::new(0.0, 0.0);
            let gj = g[j];
            g[j] = cs[j] * gj;
            g[j + 1] = -sn[j].conj() * gj;
            used = j + 1;
            rel = g[j + 1].norm() / bn;
            if rel <= tol || wn == 0.0 || matvecs >= max_matvecs {
                break;
            }
            basis.push(w.iter().map(|z| z / wn).collect());
        }
        // back substitution
        let mut y = vec![C64::new(0.0, 0.0); used];
        for i in (0..used).rev() {
            let mut s = g[i];
            for k in i + 1..used {
                s -= h[i][k] * y[k];
            }
            y[i] = s / h[i][i];
        }
        for (k, yk) in y.iter().enumerate() {
            for (xi, vi) in x.iter_mut().zip(&basis[k]) {
                *xi += yk * vi;
            }
        }
        if rel <= tol {
            // confirm with a true residual
            let ax = op(&x);
            matvecs += 1;
            let r: f64 = norm(&b.iter().zip(&ax).map(|(b, a)| b - a).collect::<Vec<_>>());
            rel = r / bn;
            if rel <= tol * 10.0 {
                break;
            }
        }
    }
    GmresOutcome {
        x,
        rel_residual: rel,
        matvecs,
    }
}
