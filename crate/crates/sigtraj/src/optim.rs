//! Small self-contained optimizers used across the crate.

use nalgebra::{DMatrix, DVector};

/// First/second-moment adaptive gradient ascent (Adam with maximization sign).
pub(crate) struct AdamAscent {
    step: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamAscent {
    pub fn new(dim: usize, step: f64) -> Self {
        Self {
            step,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
        }
    }

    /// One ascent step in place; `grad` is the gradient of the objective to
    /// maximize.
    pub fn ascend(&mut self, x: &mut [f64], grad: &[f64]) {
        debug_assert_eq!(x.len(), grad.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..x.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            x[i] += self.step * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Nelder-Mead simplex minimization. Deterministic; returns the best vertex.
pub(crate) fn nelder_mead(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x0: &[f64],
    scale: &[f64],
    max_iters: usize,
    tol: f64,
) -> (Vec<f64>, f64) {
    let n = x0.len();
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    simplex.push(x0.to_vec());
    for i in 0..n {
        let mut v = x0.to_vec();
        v[i] += scale[i];
        simplex.push(v);
    }
    let mut values: Vec<f64> = simplex.iter().map(|v| f(v)).collect();

    for _ in 0..max_iters {
        let mut order: Vec<usize> = (0..=n).collect();
        order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(std::cmp::Ordering::Equal));
        let best = order[0];
        let worst = order[n];
        let second_worst = order[n - 1];

        if (values[worst] - values[best]).abs() <= tol * (1.0 + values[best].abs()) {
            break;
        }

        // centroid of all but the worst vertex
        let mut centroid = vec![0.0; n];
        for (idx, vertex) in simplex.iter().enumerate() {
            if idx == worst {
                continue;
            }
            for j in 0..n {
                centroid[j] += vertex[j] / n as f64;
            }
        }

        let reflect: Vec<f64> = (0..n)
            .map(|j| centroid[j] + (centroid[j] - simplex[worst][j]))
            .collect();
        let f_reflect = f(&reflect);

        if f_reflect < values[best] {
            let expand: Vec<f64> = (0..n)
                .map(|j| centroid[j] + 2.0 * (centroid[j] - simplex[worst][j]))
                .collect();
            let f_expand = f(&expand);
            if f_expand < f_reflect {
                simplex[worst] = expand;
                values[worst] = f_expand;
            } else {
                simplex[worst] = reflect;
                values[worst] = f_reflect;
            }
        } else if f_reflect < values[second_worst] {
            simplex[worst] = reflect;
            values[worst] = f_reflect;
        } else {
            let contract: Vec<f64> = (0..n)
                .map(|j| centroid[j] + 0.5 * (simplex[worst][j] - centroid[j]))
                .collect();
            let f_contract = f(&contract);
            if f_contract < values[worst] {
                simplex[worst] = contract;
                values[worst] = f_contract;
            } else {
                // shrink toward the best vertex
                let best_vertex = simplex[best].clone();
                for idx in 0..=n {
                    if idx == best {
                        continue;
                    }
                    for j in 0..n {
                        simplex[idx][j] = best_vertex[j] + 0.5 * (simplex[idx][j] - best_vertex[j]);
                    }
                    values[idx] = f(&simplex[idx]);
                }
            }
        }
    }

    let mut best = 0;
    for i in 1..=n {
        if values[i] < values[best] {
            best = i;
        }
    }
    (simplex[best].clone(), values[best])
}

/// Levenberg-Marquardt least squares. `model` returns the residual vector and
/// its Jacobian at the given parameters. Returns (parameters, SSE).
pub(crate) fn levenberg_marquardt(
    model: &dyn Fn(&[f64]) -> (DVector<f64>, DMatrix<f64>),
    x0: &[f64],
    max_iters: usize,
) -> (Vec<f64>, f64) {
    let n = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let (mut resid, mut jac) = model(x.as_slice());
    let mut sse = resid.norm_squared();
    let mut lambda = 1e-3;

    for _ in 0..max_iters {
        let jt = jac.transpose();
        let mut jtj = &jt * &jac;
        let jtr = &jt * &resid;
        for i in 0..n {
            let d = jtj[(i, i)];
            jtj[(i, i)] = d + lambda * d.max(1e-12);
        }
        let Some(step) = jtj.lu().solve(&(-&jtr)) else {
            lambda *= 10.0;
            if lambda > 1e12 {
                break;
            }
            continue;
        };
        let candidate = &x + &step;
        let (cand_resid, cand_jac) = model(candidate.as_slice());
        let cand_sse = cand_resid.norm_squared();
        if cand_sse.is_finite() && cand_sse < sse {
            let improvement = (sse - cand_sse) / sse.max(1e-300);
            x = candidate;
            resid = cand_resid;
            jac = cand_jac;
            sse = cand_sse;
            lambda = (lambda * 0.3).max(1e-12);
            if improvement < 1e-12 {
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                break;
            }
        }
    }
    (x.as_slice().to_vec(), sse)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn adam_climbs_concave_quadratic() {
        // maximize -(x-3)^2 - (y+1)^2
        let mut x = vec![0.0, 0.0];
        let mut adam = AdamAscent::new(2, 0.05);
        for _ in 0..2000 {
            let grad = vec![-2.0 * (x[0] - 3.0), -2.0 * (x[1] + 1.0)];
            adam.ascend(&mut x, &grad);
        }
        assert_relative_eq!(x[0], 3.0, epsilon = 1e-3);
        assert_relative_eq!(x[1], -1.0, epsilon = 1e-3);
    }

    #[test]
    fn nelder_mead_finds_rosenbrock_minimum() {
        let mut f = |x: &[f64]| {
            let a = 1.0 - x[0];
            let b = x[1] - x[0] * x[0];
            a * a + 100.0 * b * b
        };
        let (x, val) = nelder_mead(&mut f, &[-1.2, 1.0], &[0.5, 0.5], 4000, 1e-14);
        assert!(val < 1e-8, "val {val}");
        assert_relative_eq!(x[0], 1.0, epsilon = 1e-3);
        assert_relative_eq!(x[1], 1.0, epsilon = 1e-3);
    }

    #[test]
    fn lm_fits_exponential_decay() {
        // y = a * exp(b t) at known (a, b) = (2, -0.5)
        let ts: Vec<f64> = (0..30).map(|i| i as f64 * 0.2).collect();
        let ys: Vec<f64> = ts.iter().map(|t| 2.0 * (-0.5 * t).exp()).collect();
        let model = |p: &[f64]| {
            let (a, b) = (p[0], p[1]);
            let resid = DVector::from_iterator(
                ts.len(),
                ts.iter().zip(&ys).map(|(t, y)| a * (b * t).exp() - y),
            );
            let jac = DMatrix::from_fn(ts.len(), 2, |i, j| {
                let t = ts[i];
                let e = (b * t).exp();
                if j == 0 {
                    e
                } else {
                    a * t * e
                }
            });
            (resid, jac)
        };
        let (p, sse) = levenberg_marquardt(&model, &[1.0, -0.1], 200);
        assert!(sse < 1e-16);
        assert_relative_eq!(p[0], 2.0, epsilon = 1e-6);
        assert_relative_eq!(p[1], -0.5, epsilon = 1e-6);
    }
}
