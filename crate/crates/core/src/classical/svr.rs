//! Epsilon-insensitive support vector regression with an RBF kernel, trained
//! by sequential minimal optimization.
//!
//! The dual is posed over `2n` variables, `α` (label `+1`) then `α*` (label
//! `-1`), with working pairs picked by maximal violation plus second-order
//! gain, as in libsvm.

use super::{check_matrix, ClassicalError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SvrParams {
    pub c: f64,
    pub epsilon: f64,
    /// `None` means `1 / width`.
    pub gamma: Option<f64>,
    /// Stop once the maximal KKT violation falls below this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SvrParams {
    fn default() -> Self {
        Self {
            c: 10.0,
            epsilon: 0.01,
            gamma: None,
            tol: 1e-3,
            max_iter: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvrModel {
    /// Row-major `[n_sv, width]`.
    pub support_vectors: Vec<f64>,
    /// `α_i - α*_i` for each support vector.
    pub dual_coefficients: Vec<f64>,
    /// Training-row index of each support vector.
    pub support_indices: Vec<usize>,
    pub bias: f64,
    pub gamma: f64,
    pub c: f64,
    pub epsilon: f64,
    pub width: usize,
    /// Final maximal KKT violation.
    pub violation: f64,
    pub iterations: usize,
}

pub fn rbf(a: &[f64], b: &[f64], gamma: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-gamma * d2).exp()
}

/// Kernel matrix over the training rows, reusable across targets.
#[derive(Debug, Clone)]
pub struct SvrProblem<'a> {
    x: &'a [f64],
    width: usize,
    gamma: f64,
    kernel: Vec<f64>,
}

impl<'a> SvrProblem<'a> {
    pub fn new(x: &'a [f64], width: usize, gamma: Option<f64>) -> Result<Self> {
        let n = check_matrix(x, width)?;
        if n < 2 {
            return Err(ClassicalError::Contract(format!("SVR needs at least 2 rows, got {n}")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ClassicalError::Contract("non-finite feature value".into()));
        }
        let gamma = gamma.unwrap_or(1.0 / width as f64);
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(ClassicalError::Contract(format!("gamma must be positive, got {gamma}")));
        }
        let row = |i: usize| &x[i * width..(i + 1) * width];
        let mut kernel = vec![0.0; n * n];
        for i in 0..n {
            kernel[i * n + i] = 1.0;
            for j in 0..i {
                let k = rbf(row(i), row(j), gamma);
                kernel[i * n + j] = k;
                kernel[j * n + i] = k;
            }
        }
        Ok(Self { x, width, gamma, kernel })
    }

    fn n(&self) -> usize {
        self.x.len() / self.width
    }

    pub fn fit(&self, y: &[f64], params: &SvrParams) -> Result<SvrModel> {
        let n = self.n();
        if y.len() != n {
            return Err(ClassicalError::Shape(format!("{n} rows but {} targets", y.len())));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(ClassicalError::Contract("non-finite target".into()));
        }
        let (c, eps) = (params.c, params.epsilon);
        if !(c.is_finite() && c > 0.0 && eps.is_finite() && eps >= 0.0) {
            return Err(ClassicalError::Contract(format!("need C > 0 and epsilon >= 0, got {c}, {eps}")));
        }

        let m = 2 * n;
        let sign = |t: usize| if t < n { 1.0 } else { -1.0 };
        let kk = |s: usize, t: usize| self.kernel[(s % n) * n + t % n];
        // Q_st = y_s y_t K(s, t)
        let q = |s: usize, t: usize| sign(s) * sign(t) * kk(s, t);
        let mut alpha = vec![0.0; m];
        // Gradient of ½αᵀQα + pᵀα at α = 0 is p.
        let mut grad: Vec<f64> = (0..m).map(|t| if t < n { eps - y[t] } else { eps + y[t - n] }).collect();
        let up = |a: f64, s: f64| if s > 0.0 { a < c } else { a > 0.0 };
        let low = |a: f64, s: f64| if s > 0.0 { a > 0.0 } else { a < c };
        const TAU: f64 = 1e-12;

        let mut iterations = 0;
        let violation = loop {
            // i: maximal violating index from the "up" set.
            let mut gmax = f64::NEG_INFINITY;
            let mut i = usize::MAX;
            for t in 0..m {
                if up(alpha[t], sign(t)) && -sign(t) * grad[t] >= gmax {
                    gmax = -sign(t) * grad[t];
                    i = t;
                }
            }
            // j: best second-order gain from the "low" set.
            let mut gmax2 = f64::NEG_INFINITY;
            let mut j = usize::MAX;
            let mut best = f64::INFINITY;
            for t in 0..m {
                if !low(alpha[t], sign(t)) {
                    continue;
                }
                let yg = sign(t) * grad[t];
                gmax2 = gmax2.max(yg);
                if i == usize::MAX {
                    continue;
                }
                let b = gmax + yg;
                if b > 0.0 {
                    let a = q(i, i) + q(t, t) - 2.0 * sign(i) * sign(t) * q(i, t);
                    let a = if a > 0.0 { a } else { TAU };
                    let gain = -(b * b) / a;
                    if gain <= best {
                        best = gain;
                        j = t;
                    }
                }
            }
            let viol = gmax + gmax2;
            if viol < params.tol || i == usize::MAX || j == usize::MAX {
                break viol.max(0.0);
            }
            if iterations >= params.max_iter {
                return Err(ClassicalError::NotConverged {
                    iterations,
                    violation: viol,
                });
            }
            iterations += 1;

            let (old_i, old_j) = (alpha[i], alpha[j]);
            let qij = q(i, j);
            if sign(i) != sign(j) {
                let quad = (q(i, i) + q(j, j) + 2.0 * qij).max(TAU);
                let delta = (-grad[i] - grad[j]) / quad;
                let diff = alpha[i] - alpha[j];
                alpha[i] += delta;
                alpha[j] += delta;
                if diff > 0.0 {
                    if alpha[j] < 0.0 {
                        alpha[j] = 0.0;
                        alpha[i] = diff;
                    }
                } else if alpha[i] < 0.0 {
                    alpha[i] = 0.0;
                    alpha[j] = -diff;
                }
                if diff > 0.0 {
                    if alpha[i] > c {
                        alpha[i] = c;
                        alpha[j] = c - diff;
                    }
                } else if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = c + diff;
                }
            } else {
                let quad = (q(i, i) + q(j, j) - 2.0 * qij).max(TAU);
                let delta = (grad[i] - grad[j]) / quad;
                let sum = alpha[i] + alpha[j];
                alpha[i] -= delta;
                alpha[j] += delta;
                if sum > c {
                    if alpha[i] > c {
                        alpha[i] = c;
                        alpha[j] = sum - c;
                    }
                } else if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = sum;
                }
                if sum > c {
                    if alpha[j] > c {
                        alpha[j] = c;
                        alpha[i] = sum - c;
                    }
                } else if alpha[i] < 0.0 {
                    alpha[i] = 0.0;
                    alpha[j] = sum;
                }
            }
            let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
            for (t, g) in grad.iter_mut().enumerate() {
                *g += q(t, i) * di + q(t, j) * dj;
            }
        };

        let bias = -rho(&alpha, &grad, c, n);
        let coef: Vec<f64> = (0..n).map(|t| alpha[t] - alpha[t + n]).collect();
        let mut model = SvrModel {
            support_vectors: Vec::new(),
            dual_coefficients: Vec::new(),
            support_indices: Vec::new(),
            bias,
            gamma: self.gamma,
            c,
            epsilon: eps,
            width: self.width,
            violation,
            iterations,
        };
        for (t, &b) in coef.iter().enumerate() {
            if b != 0.0 {
                model.support_indices.push(t);
                model.dual_coefficients.push(b);
                model.support_vectors.extend_from_slice(&self.x[t * self.width..(t + 1) * self.width]);
            }
        }
        model.check_kkt(self, y, params.tol)?;
        Ok(model)
    }
}

// Offset from the KKT conditions: average over free variables, midpoint of
// the feasible interval otherwise.
fn rho(alpha: &[f64], grad: &[f64], c: f64, n: usize) -> f64 {
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut sum_free, mut n_free) = (0.0, 0usize);
    for t in 0..alpha.len() {
        let s = if t < n { 1.0 } else { -1.0 };
        let yg = s * grad[t];
        if alpha[t] >= c {
            if s < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if s > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            n_free += 1;
            sum_free += yg;
        }
    }
    if n_free > 0 {
        sum_free / n_free as f64
    } else {
        (ub + lb) / 2.0
    }
}

impl SvrModel {
    /// Recomputes the dual gradient from the stored coefficients and checks
    /// the box constraints and the KKT gap.
    fn check_kkt(&self, problem: &SvrProblem, y: &[f64], tol: f64) -> Result<()> {
        let n = problem.n();
        let mut beta = vec![0.0; n];
        for (&i, &b) in self.support_indices.iter().zip(&self.dual_coefficients) {
            if b.abs() > self.c * (1.0 + 1e-12) {
                return Err(ClassicalError::Kkt(format!("|coefficient| {} exceeds C {}", b.abs(), self.c)));
            }
            beta[i] = b;
        }
        let mut gmax = f64::NEG_INFINITY;
        let mut gmax2 = f64::NEG_INFINITY;
        for t in 0..n {
            let kb: f64 = (0..n).map(|s| problem.kernel[t * n + s] * beta[s]).sum();
            let (a, a_star) = (beta[t].max(0.0), (-beta[t]).max(0.0));
            // α_t (label +1) and α*_t (label -1).
            let (g_pos, g_neg) = (kb + self.epsilon - y[t], -kb + self.epsilon + y[t]);
            if a < self.c {
                gmax = gmax.max(-g_pos);
            }
            if a > 0.0 {
                gmax2 = gmax2.max(g_pos);
            }
            if a_star > 0.0 {
                gmax = gmax.max(g_neg);
            }
            if a_star < self.c {
                gmax2 = gmax2.max(-g_neg);
            }
        }
        let viol = gmax + gmax2;
        // Recomputing the gradient from scratch reorders sums; allow for it.
        if viol > tol + 1e-9 {
            return Err(ClassicalError::Kkt(format!("KKT violation {viol} above {tol}")));
        }
        Ok(())
    }

    pub fn predict_one(&self, row: &[f64]) -> f64 {
        let s: f64 = self
            .support_vectors
            .chunks(self.width)
            .zip(&self.dual_coefficients)
            .map(|(sv, b)| b * rbf(sv, row, self.gamma))
            .sum();
        s + self.bias
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_matrix(x, self.width)?;
        Ok(x.chunks(self.width).map(|r| self.predict_one(r)).collect())
    }
}

pub fn fit_svr(x: &[f64], width: usize, y: &[f64], params: &SvrParams) -> Result<SvrModel> {
    SvrProblem::new(x, width, params.gamma)?.fit(y, params)
}
