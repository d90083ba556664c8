//! Unit-modulus (oblique) manifold tools shared by both optimizers.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::linalg::C64;

/// Project a Euclidean gradient onto the tangent space at θ.
pub fn riemannian_gradient(euclid_grad: &[C64], theta: &[C64]) -> Vec<C64> {
    euclid_grad.iter().zip(theta).map(|(g, th)| g - th * (g * th.conj()).re).collect()
}

/// Entrywise (θ + αδ)/|θ + αδ|; the step is halved while any entry would vanish.
pub fn retract(theta: &[C64], direction: &[C64], step: f64) -> Vec<C64> {
    let mut a = step;
    for _ in 0..64 {
        let moved: Vec<C64> = theta.iter().zip(direction).map(|(t, d)| t + d * a).collect();
        if moved.iter().all(|z| z.norm() > 1e-300) {
            return moved.into_iter().map(|z| z / z.norm()).collect();
        }
        a *= 0.5;
    }
    theta.to_vec()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DescentConfig {
    pub steps: usize,
    pub init_step: f64,
    pub contraction: f64,
    pub sufficient_decrease: f64,
    pub max_halvings: usize,
    /// Doublings tried when the first trial step already satisfies the Armijo test.
    pub max_expansions: usize,
}

impl Default for DescentConfig {
    fn default() -> Self {
        DescentConfig {
            steps: 10,
            init_step: 1.0,
            contraction: 0.5,
            sufficient_decrease: 1e-4,
            max_halvings: 30,
            max_expansions: 20,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DescentReport {
    /// Objective before the first step and after every accepted step.
    pub objective: Vec<f64>,
    pub step_sizes: Vec<f64>,
    pub grad_norms: Vec<f64>,
    pub stalled: bool,
}

/// Objective oracle: returns f(θ) and, when asked, the Euclidean gradient 2·∂f/∂θ*.
pub trait Objective {
    fn eval(&mut self, theta: &[C64], with_grad: bool) -> Result<(f64, Option<Vec<C64>>)>;
}

impl<F> Objective for F
where
    F: FnMut(&[C64], bool) -> Result<(f64, Option<Vec<C64>>)>,
{
    fn eval(&mut self, theta: &[C64], with_grad: bool) -> Result<(f64, Option<Vec<C64>>)> {
        self(theta, with_grad)
    }
}

/// Riemannian steepest descent with Armijo backtracking on a shared real step.
pub fn armijo_descent<O: Objective>(theta: &[C64], cfg: &DescentConfig, obj: &mut O) -> Result<(Vec<C64>, DescentReport)> {
    let mut th = theta.to_vec();
    let mut rep = DescentReport::default();
    if th.is_empty() {
        return Ok((th, rep));
    }
    let (mut f, g) = obj.eval(&th, true)?;
    let mut g = g.expect("gradient requested");
    rep.objective.push(f);
    let mut trial = cfg.init_step;
    // expansions stop for good once one fails: the carried step is then about right
    let mut expand = true;
    for _ in 0..cfg.steps {
        let rg = riemannian_gradient(&g, &th);
        let gn2: f64 = rg.iter().map(|z| z.norm_sqr()).sum();
        rep.grad_norms.push(gn2.sqrt());
        if !(gn2 > 1e-300) {
            break;
        }
        let dir: Vec<C64> = rg.iter().map(|z| -z).collect();
        let armijo = |fc: f64, a: f64| fc <= f - cfg.sufficient_decrease * a * gn2;
        let mut alpha = trial;
        let mut accepted = None;
        for k in 0..=cfg.max_halvings {
            let cand = retract(&th, &dir, alpha);
            let (fc, _) = obj.eval(&cand, false)?;
            if armijo(fc, alpha) {
                accepted = Some((cand, fc));
                if k > 0 {
                    expand = false;
                }
                if k == 0 && expand {
                    // the trial step was conservative: grow it while that keeps paying off
                    expand = false;
                    for _ in 0..cfg.max_expansions {
                        let bigger = alpha / cfg.contraction;
                        let cand = retract(&th, &dir, bigger);
                        let (fb, _) = obj.eval(&cand, false)?;
                        let best = accepted.as_ref().map(|a: &(Vec<C64>, f64)| a.1).unwrap();
                        if armijo(fb, bigger) && fb < best {
                            alpha = bigger;
                            accepted = Some((cand, fb));
                            expand = true;
                        } else {
                            break;
                        }
                    }
                }
                break;
            }
            alpha *= cfg.contraction;
        }
        match accepted {
            Some((cand, _)) => {
                let (fc, gc) = obj.eval(&cand, true)?;
                th = cand;
                f = fc;
                g = gc.expect("gradient requested");
                rep.objective.push(f);
                rep.step_sizes.push(alpha);
                trial = alpha;
            }
            None => {
                rep.stalled = true;
                break;
            }
        }
    }
    Ok((th, rep))
}
