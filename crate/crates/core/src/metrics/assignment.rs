//! Exact linear assignment (shortest augmenting paths with potentials) and
//! a log-domain Sinkhorn approximation for large clouds.

use crate::error::{Error, Result};

/// Minimum-cost perfect matching on a dense `n x n` row-major cost matrix.
/// Returns `assignment[row] = column` and the total cost.
pub fn hungarian(cost: &[f64], n: usize) -> Result<(Vec<usize>, f64)> {
    if n == 0 || cost.len() != n * n {
        return Err(Error::ShapeMismatch(format!(
            "{} costs for a {n}x{n} assignment",
            cost.len()
        )));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("assignment cost".into()));
    }
    let inf = f64::INFINITY;
    // 1-based rows/columns; column 0 is the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            let row = &cost[(i0 - 1) * n..i0 * n];
            for j in 1..=n {
                if !used[j] {
                    let cur = row[j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[owner[j] - 1] = j - 1;
    }
    let total = assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok((assignment, total))
}

/// Entropic optimal-transport cost between uniform marginals, in the same
/// units as `cost` (mean over the plan). Solved in the log domain with
/// ε-scaling down to `epsilon`; the result exceeds the exact optimum by at
/// most `epsilon * ln(n)` plus the residual marginal error.
pub fn sinkhorn(cost: &[f64], n: usize, epsilon: f64) -> Result<f64> {
    if n == 0 || cost.len() != n * n {
        return Err(Error::ShapeMismatch(format!(
            "{} costs for a {n}x{n} transport",
            cost.len()
        )));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let log_w = -(n as f64).ln();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; n];
    let mut buf = vec![0.0; n];
    let max_cost = cost.iter().copied().fold(0.0, f64::max);
    let mut eps = max_cost.max(epsilon);
    loop {
        for iter in 0..1000 {
            for i in 0..n {
                let row = &cost[i * n..(i + 1) * n];
                for j in 0..n {
                    buf[j] = (g[j] - row[j]) / eps;
                }
                f[i] = -eps * (log_sum_exp(&buf) + log_w);
            }
            for j in 0..n {
                for i in 0..n {
                    buf[i] = (f[i] - cost[i * n + j]) / eps;
                }
                g[j] = -eps * (log_sum_exp(&buf) + log_w);
            }
            if iter % 10 == 9 {
                // after the column update, rows carry the remaining error
                let mut err: f64 = 0.0;
                for i in 0..n {
                    let row = &cost[i * n..(i + 1) * n];
                    let mass: f64 = (0..n).map(|j| ((f[i] + g[j] - row[j]) / eps).exp()).sum::<f64>() / n as f64;
                    err = err.max((mass - 1.0).abs());
                }
                if err < 1e-6 {
                    break;
                }
            }
        }
        if eps <= epsilon {
            break;
        }
        eps = (eps * 0.5).max(epsilon);
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let c = cost[i * n + j];
            total += ((f[i] + g[j] - c) / eps + 2.0 * log_w).exp() * c;
        }
    }
    Ok(total)
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
