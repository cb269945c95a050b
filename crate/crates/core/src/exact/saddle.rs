//! Per-state entropy-regularized matrix game
//! `min_y max_z  y^T Q z - tau_min H(y) + tau_max H(z)`.
//!
//! The saddle satisfies `tau_min log y + Q z = lambda 1` and
//! `tau_max log z - Q^T y = mu 1` on the two simplices. We solve this
//! primal-dual system by damped Newton in `(log y, log z, lambda, mu)`. When
//! `|Q| / tau` is large the start is moved along a path of decreasing
//! temperatures, as in interior-point path following. KL-geometry mirror-prox
//! is the last resort.

use super::linalg::solve_small;
use crate::error::{Error, Result};

pub const SADDLE_TOL: f64 = 1e-10;
const NEWTON_MAX_ITERS: usize = 100;
const MIRROR_PROX_MAX_ITERS: usize = 100_000;

#[derive(Clone, Debug, PartialEq)]
pub struct StateSaddle {
    /// Min-player mixed strategy.
    pub y: Vec<f64>,
    /// Max-player mixed strategy.
    pub z: Vec<f64>,
    /// `y^T Q z - tau_min H(y) + tau_max H(z)`.
    pub value: f64,
    pub(crate) log_y: Vec<f64>,
    pub(crate) log_z: Vec<f64>,
}

impl StateSaddle {
    pub fn log_y(&self) -> &[f64] {
        &self.log_y
    }

    pub fn log_z(&self) -> &[f64] {
        &self.log_z
    }
}

/// Normalized log-softmax of `v`, written into `out`.
pub(crate) fn log_softmax_into(v: &[f64], out: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    for (o, x) in out.iter_mut().zip(v) {
        *o = x - lse;
    }
}

fn normalized_exp(log_p: &[f64]) -> Vec<f64> {
    let mut p: Vec<f64> = log_p.iter().map(|l| l.exp()).collect();
    let sum: f64 = p.iter().sum();
    for x in &mut p {
        *x /= sum;
    }
    p
}

/// `tau * log sum exp(v / tau)`.
pub(crate) fn soft_max(v: &[f64], tau: f64) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + tau * v.iter().map(|x| ((x - max) / tau).exp()).sum::<f64>().ln()
}

struct Problem<'a> {
    q: &'a [f64],
    n_min: usize,
    n_max: usize,
    tau_min: f64,
    tau_max: f64,
}

/// Strategies induced by a min-player `log y`: `z` is the exact best response.
struct Eval {
    y: Vec<f64>,
    log_z: Vec<f64>,
    z: Vec<f64>,
}

impl Problem<'_> {
    #[inline]
    fn q(&self, a: usize, b: usize) -> f64 {
        self.q[a * self.n_max + b]
    }

    /// Best response of the max player to `y`, in log space.
    fn log_z_given_y(&self, y: &[f64], out: &mut [f64]) {
        let s: Vec<f64> = (0..self.n_max)
            .map(|b| (0..self.n_min).map(|a| y[a] * self.q(a, b)).sum::<f64>() / self.tau_max)
            .collect();
        log_softmax_into(&s, out);
    }

    fn log_y_given_z(&self, z: &[f64], out: &mut [f64]) {
        let t: Vec<f64> = (0..self.n_min)
            .map(|a| -(0..self.n_max).map(|b| self.q(a, b) * z[b]).sum::<f64>() / self.tau_min)
            .collect();
        log_softmax_into(&t, out);
    }

    fn eval(&self, log_y: &[f64]) -> Eval {
        let y = normalized_exp(log_y);
        let mut log_z = vec![0.0; self.n_max];
        self.log_z_given_y(&y, &mut log_z);
        let z = normalized_exp(&log_z);
        Eval { y, log_z, z }
    }

    /// Primal-dual residual at `u = (log y, log z, lambda, mu)`.
    fn residual(&self, u: &[f64]) -> Vec<f64> {
        let (na, nb) = (self.n_min, self.n_max);
        let (ly, rest) = u.split_at(na);
        let (lz, dual) = rest.split_at(nb);
        let y: Vec<f64> = ly.iter().map(|l| l.exp()).collect();
        let z: Vec<f64> = lz.iter().map(|l| l.exp()).collect();
        let mut f = Vec::with_capacity(na + nb + 2);
        for a in 0..na {
            let qz: f64 = (0..nb).map(|b| self.q(a, b) * z[b]).sum();
            f.push(self.tau_min * ly[a] + qz - dual[0]);
        }
        for b in 0..nb {
            let qy: f64 = (0..na).map(|a| self.q(a, b) * y[a]).sum();
            f.push(self.tau_max * lz[b] - qy - dual[1]);
        }
        f.push(y.iter().sum::<f64>() - 1.0);
        f.push(z.iter().sum::<f64>() - 1.0);
        f
    }

    fn jacobian(&self, u: &[f64]) -> Vec<f64> {
        let (na, nb) = (self.n_min, self.n_max);
        let n = na + nb + 2;
        let y: Vec<f64> = u[..na].iter().map(|l| l.exp()).collect();
        let z: Vec<f64> = u[na..na + nb].iter().map(|l| l.exp()).collect();
        let mut j = vec![0.0; n * n];
        for a in 0..na {
            j[a * n + a] = self.tau_min;
            for b in 0..nb {
                j[a * n + na + b] = self.q(a, b) * z[b];
            }
            j[a * n + na + nb] = -1.0;
        }
        for b in 0..nb {
            let row = na + b;
            for a in 0..na {
                j[row * n + a] = -self.q(a, b) * y[a];
            }
            j[row * n + na + b] = self.tau_max;
            j[row * n + na + nb + 1] = -1.0;
        }
        let (r1, r2) = (na + nb, na + nb + 1);
        for a in 0..na {
            j[r1 * n + a] = y[a];
        }
        for b in 0..nb {
            j[r2 * n + na + b] = z[b];
        }
        j
    }

    /// Primal-dual point whose `z` is the best response to the given `log y`.
    fn initial_point(&self, log_y: &[f64]) -> Vec<f64> {
        let (na, nb) = (self.n_min, self.n_max);
        let e = self.eval(log_y);
        let mut ly = vec![0.0; na];
        log_softmax_into(log_y, &mut ly);
        let lambda = (0..na)
            .map(|a| self.tau_min * ly[a] + (0..nb).map(|b| self.q(a, b) * e.z[b]).sum::<f64>())
            .sum::<f64>()
            / na as f64;
        let mu = (0..nb)
            .map(|b| self.tau_max * e.log_z[b] - (0..na).map(|a| self.q(a, b) * e.y[a]).sum::<f64>())
            .sum::<f64>()
            / nb as f64;
        let mut u = ly;
        u.extend_from_slice(&e.log_z);
        u.push(lambda);
        u.push(mu);
        u
    }

    fn kkt_residual(&self, y: &[f64], z: &[f64]) -> f64 {
        let mut ly = vec![0.0; self.n_min];
        self.log_y_given_z(z, &mut ly);
        let mut lz = vec![0.0; self.n_max];
        self.log_z_given_y(y, &mut lz);
        let ry = y.iter().zip(&ly).fold(0.0_f64, |m, (p, l)| m.max((p - l.exp()).abs()));
        let rz = z.iter().zip(&lz).fold(0.0_f64, |m, (p, l)| m.max((p - l.exp()).abs()));
        ry.max(rz)
    }

    fn value(&self, y: &[f64], log_y: &[f64], z: &[f64], log_z: &[f64]) -> f64 {
        let mut bilinear = 0.0;
        for a in 0..self.n_min {
            for b in 0..self.n_max {
                bilinear += y[a] * self.q(a, b) * z[b];
            }
        }
        let neg_ent_y: f64 = y.iter().zip(log_y).map(|(p, l)| p * l).sum();
        let neg_ent_z: f64 = z.iter().zip(log_z).map(|(p, l)| p * l).sum();
        bilinear + self.tau_min * neg_ent_y - self.tau_max * neg_ent_z
    }

    fn finish(&self, log_y: Vec<f64>) -> (StateSaddle, f64) {
        let e = self.eval(&log_y);
        let value = self.value(&e.y, &log_y, &e.z, &e.log_z);
        let kkt = self.kkt_residual(&e.y, &e.z);
        (
            StateSaddle {
                y: e.y,
                z: e.z,
                value,
                log_y,
                log_z: e.log_z,
            },
            kkt,
        )
    }

    /// Damped Newton on the primal-dual system; returns the normalized `log y`.
    fn newton(&self, log_y: Vec<f64>) -> Option<Vec<f64>> {
        let na = self.n_min;
        let n = na + self.n_max + 2;
        let scale = 1.0 + self.q.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let norm = |f: &[f64]| f.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut u = self.initial_point(&log_y);
        let mut f = self.residual(&u);
        let mut f_norm = norm(&f);
        for _ in 0..NEWTON_MAX_ITERS {
            if f_norm <= 1e-14 * scale {
                break;
            }
            let mut jac = self.jacobian(&u);
            let mut step: Vec<f64> = f.iter().map(|r| -r).collect();
            if !solve_small(&mut jac, &mut step, n) {
                return None;
            }
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..50 {
                let trial: Vec<f64> = u.iter().zip(&step).map(|(x, d)| x + t * d).collect();
                let ft = self.residual(&trial);
                let ft_norm = norm(&ft);
                if ft_norm.is_finite() && ft_norm <= (1.0 - 1e-4 * t) * f_norm {
                    u = trial;
                    f = ft;
                    f_norm = ft_norm;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if f_norm > 1e-9 * scale {
            return None;
        }
        let mut ly = vec![0.0; na];
        log_softmax_into(&u[..na], &mut ly);
        Some(ly)
    }

    /// Extragradient with entropic (KL) mirror steps on both players.
    fn mirror_prox(&self, log_y0: &[f64]) -> Vec<f64> {
        let (na, nb) = (self.n_min, self.n_max);
        let q_max = self.q.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let eta = 1.0 / (2.0 * q_max + self.tau_min + self.tau_max);
        let mut ly = log_y0.to_vec();
        let mut lz = vec![0.0; nb];
        let y0: Vec<f64> = ly.iter().map(|l| l.exp()).collect();
        self.log_z_given_y(&y0, &mut lz);

        let step = |ly: &[f64], lz: &[f64], gy: &[f64], gz: &[f64], oy: &mut [f64], oz: &mut [f64]| {
            let ty: Vec<f64> = (0..na).map(|a| ly[a] - eta * (gy[a] + self.tau_min * ly[a])).collect();
            let tz: Vec<f64> = (0..nb).map(|b| lz[b] + eta * (gz[b] - self.tau_max * lz[b])).collect();
            log_softmax_into(&ty, oy);
            log_softmax_into(&tz, oz);
        };
        let grads = |ly: &[f64], lz: &[f64]| {
            let y: Vec<f64> = ly.iter().map(|l| l.exp()).collect();
            let z: Vec<f64> = lz.iter().map(|l| l.exp()).collect();
            let gy: Vec<f64> = (0..na).map(|a| (0..nb).map(|b| self.q(a, b) * z[b]).sum()).collect();
            let gz: Vec<f64> = (0..nb).map(|b| (0..na).map(|a| y[a] * self.q(a, b)).sum()).collect();
            (gy, gz)
        };
        let mut hy = vec![0.0; na];
        let mut hz = vec![0.0; nb];
        let mut ny = vec![0.0; na];
        let mut nz = vec![0.0; nb];
        for it in 0..MIRROR_PROX_MAX_ITERS {
            let (gy, gz) = grads(&ly, &lz);
            step(&ly, &lz, &gy, &gz, &mut hy, &mut hz);
            let (gy, gz) = grads(&hy, &hz);
            step(&ly, &lz, &gy, &gz, &mut ny, &mut nz);
            let change = ly
                .iter()
                .zip(&ny)
                .chain(lz.iter().zip(&nz))
                .fold(0.0_f64, |m, (a, b)| m.max((a.exp() - b.exp()).abs()));
            ly.copy_from_slice(&ny);
            lz.copy_from_slice(&nz);
            if it % 64 == 0 && change < 1e-15 {
                break;
            }
        }
        ly
    }
}

/// Solves the regularized matrix game for a row-major `n_min x n_max` payoff `q`.
pub fn solve_state_saddle(q: &[f64], n_min: usize, n_max: usize, tau_min: f64, tau_max: f64) -> Result<StateSaddle> {
    solve_state_saddle_warm(q, n_min, n_max, tau_min, tau_max, None)
}

/// Like [`solve_state_saddle`], starting Newton from a previous `log y`.
pub fn solve_state_saddle_warm(
    q: &[f64],
    n_min: usize,
    n_max: usize,
    tau_min: f64,
    tau_max: f64,
    warm_log_y: Option<&[f64]>,
) -> Result<StateSaddle> {
    assert_eq!(q.len(), n_min * n_max, "payoff matrix shape");
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("saddle payoff matrix".into()));
    }
    // The saddle is invariant to a constant shift of Q; centering keeps the
    // log-domain quantities small so round-off does not scale with |Q|.
    let hi = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = q.iter().copied().fold(f64::INFINITY, f64::min);
    let shift = 0.5 * (hi + lo);
    let centered: Vec<f64> = q.iter().map(|v| v - shift).collect();
    let problem = Problem { q: &centered, n_min, n_max, tau_min, tau_max };
    let uniform = vec![-(n_min as f64).ln(); n_min];
    let start = match warm_log_y {
        Some(w) if w.len() == n_min && w.iter().all(|l| l.is_finite()) => w.to_vec(),
        _ => uniform.clone(),
    };

    let accept = |ly: Vec<f64>| -> Option<StateSaddle> {
        let (mut saddle, kkt) = problem.finish(ly);
        saddle.value += shift;
        (kkt <= SADDLE_TOL).then_some(saddle)
    };

    if let Some(s) = problem.newton(start).and_then(accept) {
        return Ok(s);
    }
    if let Some(s) = continuation(&problem, &uniform).and_then(accept) {
        return Ok(s);
    }
    let ly = problem.mirror_prox(&uniform);
    let ly = problem.newton(ly.clone()).unwrap_or(ly);
    let (mut saddle, kkt) = problem.finish(ly);
    saddle.value += shift;
    if kkt <= SADDLE_TOL {
        Ok(saddle)
    } else {
        Err(Error::NoConvergence {
            what: "state saddle solver",
            iterations: MIRROR_PROX_MAX_ITERS,
            residual: kkt,
        })
    }
}

/// Newton along a path of decreasing temperatures, starting where the
/// entropy dominates and the problem is nearly uniform.
fn continuation(problem: &Problem, uniform: &[f64]) -> Option<Vec<f64>> {
    let spread = problem.q.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let tau = problem.tau_min.min(problem.tau_max);
    let mut factor = 1.0;
    while spread / (tau * factor) > 1.0 {
        factor *= 2.0;
    }
    let mut ly = uniform.to_vec();
    loop {
        let stage = Problem {
            q: problem.q,
            n_min: problem.n_min,
            n_max: problem.n_max,
            tau_min: problem.tau_min * factor,
            tau_max: problem.tau_max * factor,
        };
        ly = stage.newton(ly)?;
        if factor == 1.0 {
            return Some(ly);
        }
        factor /= 2.0;
    }
}

/// Saddle objective at an arbitrary strategy pair.
pub fn saddle_objective(q: &[f64], n_min: usize, n_max: usize, tau_min: f64, tau_max: f64, y: &[f64], z: &[f64]) -> f64 {
    let xlogx = |p: &f64| if *p > 0.0 { p * p.ln() } else { 0.0 };
    let mut v = 0.0;
    for a in 0..n_min {
        for b in 0..n_max {
            v += y[a] * q[a * n_max + b] * z[b];
        }
    }
    v + tau_min * y.iter().map(xlogx).sum::<f64>() - tau_max * z.iter().map(xlogx).sum::<f64>()
}

/// Sup-norm distance of `(y, z)` from their mutual softmax best responses.
pub fn saddle_kkt_residual(q: &[f64], n_min: usize, n_max: usize, tau_min: f64, tau_max: f64, y: &[f64], z: &[f64]) -> f64 {
    Problem { q, n_min, n_max, tau_min, tau_max }.kkt_residual(y, z)
}
