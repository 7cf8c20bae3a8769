//! Brute-force reference implementations used by the test suites.
//!
//! Everything here deliberately avoids the production code paths: the
//! water-filling oracles use threshold bisection and projected gradients,
//! the prox oracles use an accelerated projected-gradient method plus, at
//! the smallest scales, exact nested golden-section minimization of the
//! primal epigraph formulations (independent of any dual derivation), the
//! debias oracle is an active-set solver, and the transport oracle is a
//! bitmask matching DP.

use crate::grids::CostMatrix;
use crate::mat::MatF64;
use crate::ot::ProxParams;

const EXP_CLAMP: f64 = 700.0;

/// Euclidean projection onto the l1 ball of the given radius (sort-based).
pub fn project_l1_ball(v: &[f64], radius: f64) -> Vec<f64> {
    if radius <= 0.0 {
        return vec![0.0; v.len()];
    }
    let l1: f64 = v.iter().map(|x| x.abs()).sum();
    if l1 <= radius {
        return v.to_vec();
    }
    let mut mags: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    mags.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut prefix = 0.0;
    let mut theta = 0.0;
    for (m, &val) in mags.iter().enumerate() {
        prefix += val;
        let t = (prefix - radius) / (m + 1) as f64;
        let next = mags.get(m + 1).copied().unwrap_or(f64::NEG_INFINITY);
        if t >= next {
            theta = t;
            break;
        }
    }
    let mut out: Vec<f64> = v
        .iter()
        .map(|&x| x.signum() * (x.abs() - theta).max(0.0))
        .collect();
    // Round-off can land a hair outside the ball; rescale onto it so
    // iterative methods cannot ratchet outward ulp by ulp.
    let out_l1: f64 = out.iter().map(|x| x.abs()).sum();
    if out_l1 > radius && out_l1 > 0.0 {
        let scale = radius / out_l1;
        for o in out.iter_mut() {
            *o *= scale;
        }
    }
    out
}

/// Water-filling by bisection on the threshold kappa:
/// `T(kappa) = sum max(0, b_f - kappa)` is strictly decreasing; find
/// `T(kappa) = eta` and return `psi_f = -max(0, b_f - kappa)`.
pub fn waterfill_bisection(b: &[f64], eta: f64) -> Vec<f64> {
    if eta <= 0.0 || b.is_empty() {
        return vec![0.0; b.len()];
    }
    let b_max = b.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !b_max.is_finite() {
        return vec![0.0; b.len()];
    }
    let spend = |kappa: f64| -> f64 { b.iter().map(|&v| (v - kappa).max(0.0)).sum() };
    let mut lo = b_max - eta; // T(lo) >= eta
    let mut hi = b_max; // T(hi) = 0 <= eta
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if spend(mid) > eta {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let kappa = 0.5 * (lo + hi);
    b.iter().map(|&v| -(v - kappa).max(0.0)).collect()
}

/// Water-filling objective `sum_f a_f exp(psi_f / eps)`.
pub fn waterfill_objective(a: &[f64], psi: &[f64], eps: f64) -> f64 {
    a.iter()
        .zip(psi)
        .map(|(&af, &p)| af * (p / eps).min(EXP_CLAMP).exp())
        .sum()
}

/// Accelerated projected-gradient minimization of the water-filling
/// objective over the l1 budget ball.
pub fn waterfill_fista(a: &[f64], eta: f64, eps: f64, iters: usize) -> Vec<f64> {
    let n = a.len();
    let mut x = vec![0.0; n];
    let mut x_prev = x.clone();
    let mut t_k = 1.0f64;
    let mut step = eps / a.iter().cloned().fold(f64::MIN, f64::max).max(1e-12);
    let grad = |p: &[f64]| -> Vec<f64> {
        a.iter()
            .zip(p)
            .map(|(&af, &pf)| af / eps * (pf / eps).min(EXP_CLAMP).exp())
            .collect()
    };
    let mut f_prev = waterfill_objective(a, &x, eps);
    let mut best = x.clone();
    let mut f_best = f_prev;
    for _ in 0..iters {
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t_k * t_k).sqrt());
        let momentum = (t_k - 1.0) / t_next;
        let y: Vec<f64> = x
            .iter()
            .zip(&x_prev)
            .map(|(&xi, &xp)| xi + momentum * (xi - xp))
            .collect();
        let g = grad(&y);
        let mut s = step;
        let mut cand;
        loop {
            let trial: Vec<f64> = y.iter().zip(&g).map(|(&yi, &gi)| yi - s * gi).collect();
            cand = project_l1_ball(&trial, eta);
            let fy = waterfill_objective(a, &y, eps);
            let lin: f64 = g.iter().zip(&cand).zip(&y).map(|((&gi, &ci), &yi)| gi * (ci - yi)).sum();
            let quad: f64 = cand.iter().zip(&y).map(|(&ci, &yi)| (ci - yi).powi(2)).sum();
            if waterfill_objective(a, &cand, eps) <= fy + lin + quad / (2.0 * s) + 1e-15 {
                break;
            }
            s /= 2.0;
            if s < 1e-18 {
                break;
            }
        }
        step = s * 1.5;
        x_prev = x;
        x = cand;
        let f_now = waterfill_objective(a, &x, eps);
        if f_now < f_best {
            f_best = f_now;
            best = x.clone();
        }
        t_k = if f_now > f_prev { 1.0 } else { t_next };
        f_prev = f_now;
    }
    // Monotone polish from the best point: plain projected gradient with a
    // shrinking step settles the final few digits.
    let mut s = step.max(1e-12);
    for _ in 0..iters.min(4000) {
        let g = grad(&best);
        let trial: Vec<f64> = best.iter().zip(&g).map(|(&xi, &gi)| xi - s * gi).collect();
        let cand = project_l1_ball(&trial, eta);
        let f_cand = waterfill_objective(a, &cand, eps);
        if f_cand < f_best {
            f_best = f_cand;
            best = cand;
            s *= 1.1;
        } else {
            s *= 0.5;
            if s < 1e-17 {
                break;
            }
        }
    }
    best
}

fn kl_term(nu: f64, prev: f64) -> f64 {
    if nu == 0.0 {
        prev
    } else {
        nu * (nu / prev).ln() + prev - nu
    }
}

fn entropy_term(m: f64) -> f64 {
    if m == 0.0 {
        1.0
    } else {
        m * m.ln() - m + 1.0
    }
}

fn transport_cost(plan: &MatF64, cost: &CostMatrix, eps: f64, eta: f64) -> f64 {
    let mut lin = 0.0;
    let mut ent = 0.0;
    for (m, c) in plan.as_slice().iter().zip(cost.entries().as_slice()) {
        lin += m * c;
        ent += entropy_term(*m);
    }
    let mut col_max = vec![0.0f64; plan.cols()];
    for r in 0..plan.rows() {
        for (cm, &v) in col_max.iter_mut().zip(plan.row(r)) {
            *cm = cm.max(v);
        }
    }
    lin + eps * ent + eta * col_max.iter().sum::<f64>()
}

/// Primal prox objective of the covariance-domain subproblem at a feasible
/// plan (the margin is taken as `nu = M 1_G`):
/// `gamma <u, nu> + KL(nu, nu_prev) + gamma zeta (C.M + eps D(M) + eta ||M||)`.
pub fn primal_value_stochastic(
    nu_prev: &[f64],
    u: &[f64],
    cost: &CostMatrix,
    params: &ProxParams,
    plan: &MatF64,
) -> f64 {
    let nu = plan.row_sums();
    let mut val = 0.0;
    for f in 0..nu.len() {
        val += params.gamma * u[f] * nu[f] + kl_term(nu[f], nu_prev[f]);
    }
    val + params.gamma * params.zeta * transport_cost(plan, cost, params.epsilon, params.eta)
}

/// Primal prox objective of the waveform-domain subproblem at a feasible
/// pair (`rho` is clipped to the plan margins):
/// `1/2 ||rho - w||^2 + gamma beta 1' rho + gamma zeta (C.M + eps D(M) + eta ||M||)`.
pub fn primal_value_deterministic(
    w: &[f64],
    cost: &CostMatrix,
    params: &ProxParams,
    rho: &[f64],
    plan: &MatF64,
) -> f64 {
    let margins = plan.row_sums();
    let mut val = 0.0;
    for f in 0..w.len() {
        let r = rho[f].min(margins[f]).max(0.0);
        val += 0.5 * (r - w[f]).powi(2) + params.gamma * params.beta * r;
    }
    val + params.gamma * params.zeta * transport_cost(plan, cost, params.epsilon, params.eta)
}

/// Accelerated projected-gradient solver for the stochastic prox dual,
/// independent of the production BCD path (different algorithm, l1-ball
/// projections instead of water-filling). Returns the recovered plan and
/// the best feasible primal value seen.
pub fn dual_fista_stochastic(
    nu_prev: &[f64],
    u: &[f64],
    cost: &CostMatrix,
    params: &ProxParams,
    iters: usize,
) -> (MatF64, f64) {
    let f_n = cost.n_freqs();
    let g_n = cost.n_pitches();
    let eps = params.epsilon;
    let gz = params.gamma * params.zeta;
    let log_nu0: Vec<f64> = nu_prev
        .iter()
        .zip(u)
        .map(|(&p, &uf)| p.ln() - params.gamma * uf)
        .collect();
    let c = cost.entries();

    let plan_of = |lambda: &[f64], psi: &MatF64| -> MatF64 {
        MatF64::from_fn(f_n, g_n, |f, g| {
            ((lambda[f] + psi.get(f, g) - c.get(f, g)) / eps)
                .min(EXP_CLAMP)
                .exp()
        })
    };
    let h_of = |lambda: &[f64], plan: &MatF64| -> f64 {
        let transport: f64 = plan.as_slice().iter().sum();
        let linear: f64 = (0..f_n)
            .map(|f| (log_nu0[f] - gz * lambda[f]).min(EXP_CLAMP).exp())
            .sum();
        gz * eps * transport + linear
    };

    let c_max = c.as_slice().iter().cloned().fold(0.0f64, f64::max);
    let lambda_box = c_max + params.eta + 700.0 * eps;
    let mut lambda = vec![0.0; f_n];
    let mut psi = MatF64::zeros(f_n, g_n);
    let (mut lambda_prev, mut psi_prev) = (lambda.clone(), psi.clone());
    let mut t_k = 1.0f64;
    let mut step = eps / 4.0;
    let mut best_primal = f64::INFINITY;
    let mut best_plan = plan_of(&lambda, &psi);
    let mut h_prev = f64::INFINITY;
    let mut stalled = 0usize;

    for it in 0..iters {
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t_k * t_k).sqrt());
        let mom = (t_k - 1.0) / t_next;
        let y_l: Vec<f64> = lambda
            .iter()
            .zip(&lambda_prev)
            .map(|(&a, &b)| a + mom * (a - b))
            .collect();
        let y_p = MatF64::from_fn(f_n, g_n, |f, g| {
            let a = psi.get(f, g);
            a + mom * (a - psi_prev.get(f, g))
        });
        let plan_y = plan_of(&y_l, &y_p);
        let h_y = h_of(&y_l, &plan_y);
        let margins = plan_y.row_sums();
        let grad_l: Vec<f64> = (0..f_n)
            .map(|f| gz * (margins[f] - (log_nu0[f] - gz * y_l[f]).min(EXP_CLAMP).exp()))
            .collect();
        // grad_psi = gz * plan.
        let mut s = step;
        let (mut cand_l, mut cand_p);
        loop {
            cand_l = (0..f_n)
                .map(|f| (y_l[f] - s * grad_l[f]).clamp(-lambda_box, lambda_box))
                .collect::<Vec<f64>>();
            let mut p = MatF64::zeros(f_n, g_n);
            for g in 0..g_n {
                let col: Vec<f64> = (0..f_n)
                    .map(|f| y_p.get(f, g) - s * gz * plan_y.get(f, g))
                    .collect();
                p.set_col(g, &project_l1_ball(&col, params.eta));
            }
            cand_p = p;
            let plan_c = plan_of(&cand_l, &cand_p);
            let h_c = h_of(&cand_l, &plan_c);
            let mut lin = 0.0;
            let mut quad = 0.0;
            for f in 0..f_n {
                let d = cand_l[f] - y_l[f];
                lin += grad_l[f] * d;
                quad += d * d;
            }
            for f in 0..f_n {
                for g in 0..g_n {
                    let d = cand_p.get(f, g) - y_p.get(f, g);
                    lin += gz * plan_y.get(f, g) * d;
                    quad += d * d;
                }
            }
            if h_c <= h_y + lin + quad / (2.0 * s) + 1e-14 * h_y.abs().max(1.0) {
                break;
            }
            s /= 2.0;
            if s < 1e-18 {
                break;
            }
        }
        step = s * 1.3;
        // Monotone acceptance: fall back to a plain backtracked step from x
        // whenever the momentum candidate increases h.
        let plan_cand = plan_of(&cand_l, &cand_p);
        let h_cand = h_of(&cand_l, &plan_cand);
        if h_cand > h_prev {
            let plan_x0 = plan_of(&lambda, &psi);
            let h_x0 = h_of(&lambda, &plan_x0);
            let margins = plan_x0.row_sums();
            let grad_l: Vec<f64> = (0..f_n)
                .map(|f| gz * (margins[f] - (log_nu0[f] - gz * lambda[f]).min(EXP_CLAMP).exp()))
                .collect();
            let mut s2 = s;
            loop {
                let trial_l: Vec<f64> = (0..f_n)
                    .map(|f| (lambda[f] - s2 * grad_l[f]).clamp(-lambda_box, lambda_box))
                    .collect();
                let mut p2 = MatF64::zeros(f_n, g_n);
                for g in 0..g_n {
                    let col: Vec<f64> = (0..f_n)
                        .map(|f| psi.get(f, g) - s2 * gz * plan_x0.get(f, g))
                        .collect();
                    p2.set_col(g, &project_l1_ball(&col, params.eta));
                }
                let plan2 = plan_of(&trial_l, &p2);
                if h_of(&trial_l, &plan2) <= h_x0 || s2 < 1e-18 {
                    cand_l = trial_l;
                    cand_p = p2;
                    break;
                }
                s2 /= 2.0;
            }
        }
        lambda_prev = std::mem::replace(&mut lambda, cand_l);
        psi_prev = std::mem::replace(&mut psi, cand_p);
        let plan_x = plan_of(&lambda, &psi);
        let h_x = h_of(&lambda, &plan_x);
        t_k = if h_x > h_prev { 1.0 } else { t_next };
        h_prev = h_prev.min(h_x);
        if it % 50 == 0 || it + 1 == iters {
            let p = primal_value_stochastic(nu_prev, u, cost, params, &plan_x);
            if p.is_finite() && p < best_primal {
                let significant =
                    !best_primal.is_finite() || best_primal - p > 1e-14 * p.abs().max(1.0);
                best_primal = p;
                best_plan = plan_x;
                if significant {
                    stalled = 0;
                }
            } else if best_primal.is_finite() {
                stalled += 1;
                if stalled >= 40 {
                    break;
                }
            }
        }
    }
    (best_plan, best_primal)
}

/// Accelerated projected-gradient solver for the deterministic prox dual
/// in the raw multiplier `alpha >= 0`. Returns (rho, plan, primal value).
pub fn dual_fista_deterministic(
    w: &[f64],
    cost: &CostMatrix,
    params: &ProxParams,
    iters: usize,
) -> (Vec<f64>, MatF64, f64) {
    let f_n = cost.n_freqs();
    let g_n = cost.n_pitches();
    let eps = params.epsilon;
    let gz = params.gamma * params.zeta;
    let gb = params.gamma * params.beta;
    let c = cost.entries();

    let plan_of = |alpha: &[f64], psi: &MatF64| -> MatF64 {
        MatF64::from_fn(f_n, g_n, |f, g| {
            ((alpha[f] / gz + psi.get(f, g) - c.get(f, g)) / eps)
                .min(EXP_CLAMP)
                .exp()
        })
    };
    let h_of = |alpha: &[f64], plan: &MatF64| -> f64 {
        let transport: f64 = plan.as_slice().iter().sum();
        let quad: f64 = (0..f_n)
            .map(|f| {
                let r = (w[f] - gb - alpha[f]).max(0.0);
                0.5 * r * r
            })
            .sum();
        gz * eps * transport + quad
    };

    let alpha_box = w.iter().cloned().fold(0.0f64, f64::max) + 1.0;
    let mut alpha = vec![0.0; f_n];
    let mut psi = MatF64::zeros(f_n, g_n);
    let (mut alpha_prev, mut psi_prev) = (alpha.clone(), psi.clone());
    let mut t_k = 1.0f64;
    let mut step = (gz * eps).min(0.25);
    let mut best_primal = f64::INFINITY;
    let mut best_pair = (vec![0.0; f_n], plan_of(&alpha, &psi));
    let mut h_prev = f64::INFINITY;
    let mut stalled = 0usize;

    for it in 0..iters {
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t_k * t_k).sqrt());
        let mom = (t_k - 1.0) / t_next;
        let y_a: Vec<f64> = alpha
            .iter()
            .zip(&alpha_prev)
            .map(|(&a, &b)| a + mom * (a - b))
            .collect();
        let y_p = MatF64::from_fn(f_n, g_n, |f, g| {
            let a = psi.get(f, g);
            a + mom * (a - psi_prev.get(f, g))
        });
        let plan_y = plan_of(&y_a, &y_p);
        let h_y = h_of(&y_a, &plan_y);
        let margins = plan_y.row_sums();
        let grad_a: Vec<f64> = (0..f_n)
            .map(|f| margins[f] - (w[f] - gb - y_a[f]).max(0.0))
            .collect();
        let mut s = step;
        let (mut cand_a, mut cand_p);
        loop {
            cand_a = (0..f_n)
                .map(|f| (y_a[f] - s * grad_a[f]).clamp(0.0, alpha_box))
                .collect::<Vec<f64>>();
            let mut p = MatF64::zeros(f_n, g_n);
            for g in 0..g_n {
                let col: Vec<f64> = (0..f_n)
                    .map(|f| y_p.get(f, g) - s * gz * plan_y.get(f, g))
                    .collect();
                p.set_col(g, &project_l1_ball(&col, params.eta));
            }
            cand_p = p;
            let plan_c = plan_of(&cand_a, &cand_p);
            let h_c = h_of(&cand_a, &plan_c);
            let mut lin = 0.0;
            let mut quad = 0.0;
            for f in 0..f_n {
                let d = cand_a[f] - y_a[f];
                lin += grad_a[f] * d;
                quad += d * d;
            }
            for f in 0..f_n {
                for g in 0..g_n {
                    let d = cand_p.get(f, g) - y_p.get(f, g);
                    lin += gz * plan_y.get(f, g) * d;
                    quad += d * d;
                }
            }
            if h_c <= h_y + lin + quad / (2.0 * s) + 1e-14 * h_y.abs().max(1.0) {
                break;
            }
            s /= 2.0;
            if s < 1e-18 {
                break;
            }
        }
        step = s * 1.3;
        let plan_cand = plan_of(&cand_a, &cand_p);
        let h_cand = h_of(&cand_a, &plan_cand);
        if h_cand > h_prev {
            let plan_x0 = plan_of(&alpha, &psi);
            let h_x0 = h_of(&alpha, &plan_x0);
            let margins = plan_x0.row_sums();
            let grad_a0: Vec<f64> = (0..f_n)
                .map(|f| margins[f] - (w[f] - gb - alpha[f]).max(0.0))
                .collect();
            let mut s2 = s;
            loop {
                let trial_a: Vec<f64> = (0..f_n)
                    .map(|f| (alpha[f] - s2 * grad_a0[f]).clamp(0.0, alpha_box))
                    .collect();
                let mut p2 = MatF64::zeros(f_n, g_n);
                for g in 0..g_n {
                    let col: Vec<f64> = (0..f_n)
                        .map(|f| psi.get(f, g) - s2 * gz * plan_x0.get(f, g))
                        .collect();
                    p2.set_col(g, &project_l1_ball(&col, params.eta));
                }
                let plan2 = plan_of(&trial_a, &p2);
                if h_of(&trial_a, &plan2) <= h_x0 || s2 < 1e-18 {
                    cand_a = trial_a;
                    cand_p = p2;
                    break;
                }
                s2 /= 2.0;
            }
        }
        alpha_prev = std::mem::replace(&mut alpha, cand_a);
        psi_prev = std::mem::replace(&mut psi, cand_p);
        let plan_x = plan_of(&alpha, &psi);
        let h_x = h_of(&alpha, &plan_x);
        t_k = if h_x > h_prev { 1.0 } else { t_next };
        h_prev = h_prev.min(h_x);
        if it % 50 == 0 || it + 1 == iters {
            let rho: Vec<f64> = (0..f_n).map(|f| (w[f] - gb - alpha[f]).max(0.0)).collect();
            let p = primal_value_deterministic(w, cost, params, &rho, &plan_x);
            if p.is_finite() && p < best_primal {
                let significant =
                    !best_primal.is_finite() || best_primal - p > 1e-14 * p.abs().max(1.0);
                best_primal = p;
                best_pair = (rho, plan_x);
                if significant {
                    stalled = 0;
                }
            } else if best_primal.is_finite() {
                stalled += 1;
                if stalled >= 40 {
                    break;
                }
            }
        }
    }
    (best_pair.0, best_pair.1, best_primal)
}

/// Golden-section minimization of a unimodal function on [lo, hi].
fn golden_min(mut lo: f64, mut hi: f64, iters: usize, f: &mut dyn FnMut(f64) -> f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..iters {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2);
        }
    }
    let xm = 0.5 * (lo + hi);
    let fm = f(xm);
    if f1 <= f2 && f1 <= fm {
        (x1, f1)
    } else if f2 <= fm {
        (x2, f2)
    } else {
        (xm, fm)
    }
}

/// Exact primal optimum of the stochastic prox subproblem for a single
/// pitch candidate (G = 1): the plan equals the margin, so the only
/// coupling is the column max, handled by an epigraph golden search with
/// per-frequency closed-form inner minimizers.
pub fn exact_g1_stochastic(nu_prev: &[f64], u: &[f64], c_col: &[f64], params: &ProxParams) -> f64 {
    let gz = params.gamma * params.zeta;
    let eps = params.epsilon;
    let f_n = nu_prev.len();
    // Unconstrained per-coordinate minimizers.
    let nu_star: Vec<f64> = (0..f_n)
        .map(|f| {
            ((nu_prev[f].ln() - params.gamma * u[f] - gz * c_col[f]) / (1.0 + gz * eps)).exp()
        })
        .collect();
    let val_at = |f: usize, nu: f64| -> f64 {
        params.gamma * u[f] * nu
            + kl_term(nu, nu_prev[f])
            + gz * (c_col[f] * nu + eps * entropy_term(nu))
    };
    let s_hi = nu_star.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
    let mut phi = |s: f64| -> f64 {
        let mut acc = gz * params.eta * s;
        for f in 0..f_n {
            acc += val_at(f, nu_star[f].min(s));
        }
        acc
    };
    let (_, best) = golden_min(0.0, s_hi * (1.0 + 1e-12), 200, &mut phi);
    best
}

/// Exact primal optimum of the deterministic prox subproblem for G = 1.
pub fn exact_g1_deterministic(w: &[f64], c_col: &[f64], params: &ProxParams) -> f64 {
    let gz = params.gamma * params.zeta;
    let gb = params.gamma * params.beta;
    let eps = params.epsilon;
    let f_n = w.len();
    // chi_f(m): rho minimized out in closed form.
    let chi = |f: usize, m: f64| -> f64 {
        let rho = (w[f] - gb).clamp(0.0, m);
        0.5 * (rho - w[f]).powi(2) + gb * rho + gz * (c_col[f] * m + eps * entropy_term(m))
    };
    // Per-frequency upper bounds on useful m.
    let m_hi: Vec<f64> = (0..f_n)
        .map(|f| ((-c_col[f] / eps).exp()).max((w[f] - gb).max(0.0)) + 1e-9)
        .collect();
    let s_hi = m_hi.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
    let mut phi = |s: f64| -> f64 {
        let mut acc = gz * params.eta * s;
        for f in 0..f_n {
            let hi = m_hi[f].min(s);
            let mut inner = |m: f64| chi(f, m);
            let (_, best) = golden_min(0.0, hi.max(1e-300), 120, &mut inner);
            acc += best.min(chi(f, 0.0));
        }
        acc
    };
    let (_, best) = golden_min(0.0, s_hi * (1.0 + 1e-12), 160, &mut phi);
    best
}

/// Row transport with per-column caps: minimizes
/// `sum_g c_g m_g + eps (m_g ln m_g - m_g + 1)` subject to
/// `sum m = sigma, 0 <= m_g <= t_g`, by bisection on the row multiplier.
fn row_transport_with_caps(sigma: f64, costs: &[f64], caps: &[f64], eps: f64) -> f64 {
    let g_n = costs.len();
    let cap_sum: f64 = caps.iter().sum();
    if sigma > cap_sum * (1.0 + 1e-12) + 1e-300 {
        return f64::INFINITY;
    }
    if sigma <= 0.0 {
        return eps * g_n as f64;
    }
    let m_of = |theta: f64| -> Vec<f64> {
        (0..g_n)
            .map(|g| ((theta - costs[g]) / eps).min(EXP_CLAMP).exp().min(caps[g]))
            .collect()
    };
    let mut lo = costs.iter().cloned().fold(f64::INFINITY, f64::min) + eps * (sigma / g_n as f64).ln()
        - 60.0 * eps
        - 60.0;
    let mut hi = costs.iter().cloned().fold(f64::MIN, f64::max) + eps * sigma.ln().max(0.0) + 60.0 * eps + 60.0;
    // Expand until bracketed.
    for _ in 0..200 {
        if m_of(lo).iter().sum::<f64>() <= sigma {
            break;
        }
        lo -= 10.0;
    }
    for _ in 0..200 {
        if m_of(hi).iter().sum::<f64>() >= sigma {
            break;
        }
        hi += 10.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if m_of(mid).iter().sum::<f64>() < sigma {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut m = m_of(0.5 * (lo + hi));
    // Repair tiny mass mismatch on the largest uncapped entry.
    let total: f64 = m.iter().sum();
    let deficit = sigma - total;
    if deficit.abs() > 0.0 {
        if let Some(g) = (0..g_n).max_by(|&a, &b| (caps[a] - m[a]).total_cmp(&(caps[b] - m[b]))) {
            m[g] = (m[g] + deficit).clamp(0.0, caps[g]);
        }
    }
    m.iter()
        .zip(costs)
        .map(|(&mg, &cg)| cg * mg + eps * entropy_term(mg))
        .sum()
}

/// Exact primal optimum of the stochastic prox subproblem for G = 2 via a
/// nested golden search over the per-column caps.
pub fn exact_g2_stochastic(nu_prev: &[f64], u: &[f64], cost: &CostMatrix, params: &ProxParams) -> f64 {
    assert_eq!(cost.n_pitches(), 2);
    let gz = params.gamma * params.zeta;
    let eps = params.epsilon;
    let f_n = nu_prev.len();
    let c = cost.entries();

    let row_value = |f: usize, caps: &[f64; 2]| -> f64 {
        let costs = [c.get(f, 0), c.get(f, 1)];
        let sigma_hi = (caps[0] + caps[1]).max(1e-300);
        let mut inner = |sigma: f64| -> f64 {
            params.gamma * u[f] * sigma
                + kl_term(sigma, nu_prev[f])
                + gz * row_transport_with_caps(sigma, &costs, caps, eps)
        };
        let (_, best) = golden_min(0.0, sigma_hi, 90, &mut inner);
        best.min(inner(0.0))
    };

    // Generous cap range: the optimal margins stay within a gz-dependent
    // factor of the gradient point nu0.
    let t_hi = (0..f_n)
        .map(|f| (nu_prev[f].ln() - params.gamma * u[f]).exp())
        .fold(0.0f64, f64::max)
        .max(1e-9)
        * (2.0 + gz.exp())
        + 1.0;
    let mut outer1 = |t1: f64| -> f64 {
        let mut inner2 = |t2: f64| -> f64 {
            let caps = [t1, t2];
            let mut acc = gz * params.eta * (t1 + t2);
            for f in 0..f_n {
                acc += row_value(f, &caps);
            }
            acc
        };
        let (_, best) = golden_min(0.0, t_hi, 60, &mut inner2);
        best
    };
    let (_, best) = golden_min(0.0, t_hi, 60, &mut outer1);
    best
}

/// Exact primal optimum of the deterministic prox subproblem for G = 2.
pub fn exact_g2_deterministic(w: &[f64], cost: &CostMatrix, params: &ProxParams) -> f64 {
    assert_eq!(cost.n_pitches(), 2);
    let gz = params.gamma * params.zeta;
    let gb = params.gamma * params.beta;
    let eps = params.epsilon;
    let f_n = w.len();
    let c = cost.entries();

    let row_value = |f: usize, caps: &[f64; 2]| -> f64 {
        let costs = [c.get(f, 0), c.get(f, 1)];
        let sigma_hi = (caps[0] + caps[1]).max(1e-300);
        let mut inner = |sigma: f64| -> f64 {
            let rho = (w[f] - gb).clamp(0.0, sigma);
            0.5 * (rho - w[f]).powi(2)
                + gb * rho
                + gz * row_transport_with_caps(sigma, &costs, caps, eps)
        };
        let (_, best) = golden_min(0.0, sigma_hi, 90, &mut inner);
        best.min(inner(0.0))
    };

    let t_hi = (0..f_n)
        .map(|f| ((-(c.get(f, 0).min(c.get(f, 1))) / eps).exp()).max((w[f] - gb).max(0.0)))
        .fold(0.0f64, f64::max)
        .max(1e-9)
        * 1.5
        + 1e-6;
    let mut outer1 = |t1: f64| -> f64 {
        let mut inner2 = |t2: f64| -> f64 {
            let caps = [t1, t2];
            let mut acc = gz * params.eta * (t1 + t2);
            for f in 0..f_n {
                acc += row_value(f, &caps);
            }
            acc
        };
        let (_, best) = golden_min(0.0, t_hi, 60, &mut inner2);
        best
    };
    let (_, best) = golden_min(0.0, t_hi, 60, &mut outer1);
    best
}

/// Active-set solver (Lawson-Hanson style, extended with a linear term) for
/// `min_{x >= 0} x' G x - 2 b' x + q' x`, with `G = B' B`, `b = B' d`.
pub fn nnls_with_linear(gram: &MatF64, btd: &[f64], q: &[f64]) -> Vec<f64> {
    let n = btd.len();
    let mut passive = vec![false; n];
    let mut x = vec![0.0; n];
    let tol = 1e-10;

    let gradient = |x: &[f64]| -> Vec<f64> {
        (0..n)
            .map(|i| {
                let gx: f64 = (0..n).map(|j| gram.get(i, j) * x[j]).sum();
                2.0 * gx - 2.0 * btd[i] + q[i]
            })
            .collect()
    };

    for _ in 0..(10 * n + 50) {
        let g = gradient(&x);
        let mut j_best = None;
        let mut g_min = -tol;
        for j in 0..n {
            if !passive[j] && g[j] < g_min {
                g_min = g[j];
                j_best = Some(j);
            }
        }
        let Some(j) = j_best else { break };
        passive[j] = true;

        for _ in 0..(2 * n + 10) {
            let idx: Vec<usize> = (0..n).filter(|&i| passive[i]).collect();
            let m = idx.len();
            // Solve G_PP z = b_P - q_P / 2 with a tiny ridge for safety.
            let mut a = vec![vec![0.0; m + 1]; m];
            for (r, &i) in idx.iter().enumerate() {
                for (cix, &jj) in idx.iter().enumerate() {
                    a[r][cix] = gram.get(i, jj) + if cix == r { 1e-12 } else { 0.0 };
                }
                a[r][m] = btd[i] - q[i] / 2.0;
            }
            let z = gaussian_solve(&mut a);
            if z.iter().all(|&v| v > tol) {
                x.iter_mut().for_each(|v| *v = 0.0);
                for (r, &i) in idx.iter().enumerate() {
                    x[i] = z[r];
                }
                break;
            }
            // Step toward z until the first passive coordinate hits zero.
            let mut alpha = 1.0f64;
            for (r, &i) in idx.iter().enumerate() {
                if z[r] <= tol {
                    let denom = x[i] - z[r];
                    if denom > 0.0 {
                        alpha = alpha.min(x[i] / denom);
                    }
                }
            }
            for (r, &i) in idx.iter().enumerate() {
                x[i] += alpha * (z[r] - x[i]);
                if x[i] <= tol {
                    x[i] = 0.0;
                    passive[i] = false;
                }
            }
        }
    }
    x
}

fn gaussian_solve(a: &mut [Vec<f64>]) -> Vec<f64> {
    let n = a.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&r1, &r2| a[r1][col].abs().total_cmp(&a[r2][col].abs()))
            .unwrap();
        a.swap(col, piv);
        let p = a[col][col];
        if p.abs() < 1e-300 {
            continue;
        }
        for r in (col + 1)..n {
            let factor = a[r][col] / p;
            for c in col..=n {
                a[r][c] -= factor * a[col][c];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let mut acc = a[r][n];
        for c in (r + 1)..n {
            acc -= a[r][c] * x[c];
        }
        x[r] = if a[r][r].abs() < 1e-300 { 0.0 } else { acc / a[r][r] };
    }
    x
}

/// Exact minimum-cost perfect matching under squared distance, by bitmask
/// DP; used as the transport oracle for integer-unit masses.
pub fn min_cost_matching_sq(left: &[f64], right: &[f64]) -> f64 {
    let n = left.len();
    assert_eq!(n, right.len());
    assert!(n <= 20, "bitmask DP limited to 20 units");
    if n == 0 {
        return 0.0;
    }
    let full = (1usize << n) - 1;
    let mut dp = vec![f64::INFINITY; 1 << n];
    dp[0] = 0.0;
    for mask in 0..full {
        if !dp[mask].is_finite() {
            continue;
        }
        let i = mask.count_ones() as usize;
        for j in 0..n {
            if mask & (1 << j) == 0 {
                let next = mask | (1 << j);
                let cost = dp[mask] + (left[i] - right[j]).powi(2);
                if cost < dp[next] {
                    dp[next] = cost;
                }
            }
        }
    }
    dp[full]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l1_projection_properties() {
        let v = vec![3.0, -1.0, 0.5];
        let p = project_l1_ball(&v, 2.0);
        let l1: f64 = p.iter().map(|x| x.abs()).sum();
        assert!((l1 - 2.0).abs() < 1e-12);
        // Inside the ball: unchanged.
        let q = project_l1_ball(&v, 10.0);
        assert_eq!(q, v);
    }

    #[test]
    fn matching_dp_tiny_cases() {
        assert_eq!(min_cost_matching_sq(&[0.0], &[1.0]), 1.0);
        // Sorted pairing is optimal on the line.
        let c = min_cost_matching_sq(&[0.0, 1.0], &[1.1, 0.1]);
        assert!((c - (0.01 + 0.01)).abs() < 1e-12);
    }

    #[test]
    fn nnls_matches_unconstrained_when_interior() {
        // min (x1-1)^2 + (x2-2)^2 => x = (1, 2).
        let gram = MatF64::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let x = nnls_with_linear(&gram, &[1.0, 2.0], &[0.0, 0.0]);
        assert!((x[0] - 1.0).abs() < 1e-8);
        assert!((x[1] - 2.0).abs() < 1e-8);
        // Negative unconstrained solution clips to zero.
        let x = nnls_with_linear(&gram, &[-1.0, 2.0], &[0.0, 0.0]);
        assert!(x[0].abs() < 1e-12);
        assert!((x[1] - 2.0).abs() < 1e-8);
    }
}
