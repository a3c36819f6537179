//! First-order and quasi-Newton optimizers over flat `f64` vectors.

use std::collections::VecDeque;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [f64],
    grads: &[f64],
    cfg: &AdamConfig,
    iteration: usize,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::dim(format!(
            "adam: {} params, {} grads, state for {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(pos) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric {
            iteration,
            message: format!("non-finite gradient {} at element {pos}", grads[pos]),
        });
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Objective evaluation returning `(loss, gradient)`.
pub type Evaluation = (f64, Vec<f64>);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LbfgsStep {
    pub loss: f64,
    pub step_size: f64,
    pub evaluations: usize,
    /// Line search failed; parameters were left unchanged.
    pub stalled: bool,
}

/// Limited-memory BFGS with a backtracking Armijo line search.
#[derive(Clone, Debug)]
pub struct Lbfgs {
    history: usize,
    max_halvings: u32,
    armijo_c1: f64,
    bounds: Option<(f64, f64)>,
    s: VecDeque<Vec<f64>>,
    y: VecDeque<Vec<f64>>,
    current: Option<Evaluation>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Lbfgs {
    pub fn new(history: usize) -> Self {
        Lbfgs {
            history: history.max(1),
            max_halvings: 20,
            armijo_c1: 1e-4,
            bounds: None,
            s: VecDeque::new(),
            y: VecDeque::new(),
            current: None,
        }
    }

    /// Projects every candidate onto the box `[lo, hi]`.
    pub fn with_bounds(mut self, lo: f64, hi: f64) -> Self {
        self.bounds = Some((lo, hi));
        self
    }

    pub fn history_len(&self) -> usize {
        self.s.len()
    }

    /// `-H·grad` from the two-loop recursion; `-grad` with empty history.
    pub fn direction(&self, grad: &[f64]) -> Vec<f64> {
        let mut q = grad.to_vec();
        let k = self.s.len();
        let mut alpha = vec![0.0; k];
        for i in (0..k).rev() {
            let rho = 1.0 / dot(&self.y[i], &self.s[i]);
            alpha[i] = rho * dot(&self.s[i], &q);
            for (qj, yj) in q.iter_mut().zip(&self.y[i]) {
                *qj -= alpha[i] * yj;
            }
        }
        if k > 0 {
            let gamma = dot(&self.s[k - 1], &self.y[k - 1]) / dot(&self.y[k - 1], &self.y[k - 1]);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for i in 0..k {
            let rho = 1.0 / dot(&self.y[i], &self.s[i]);
            let beta = rho * dot(&self.y[i], &q);
            for (qj, sj) in q.iter_mut().zip(&self.s[i]) {
                *qj += (alpha[i] - beta) * sj;
            }
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }

    fn project(&self, x: &mut [f64]) {
        if let Some((lo, hi)) = self.bounds {
            x.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
        }
    }

    /// Takes one step from `x`, evaluating the objective through `eval`.
    pub fn step<F>(&mut self, x: &mut [f64], eval: &mut F) -> Result<LbfgsStep>
    where
        F: FnMut(&[f64]) -> Result<Evaluation>,
    {
        let mut evaluations = 0;
        let (f0, g0) = match self.current.take() {
            Some(c) => c,
            None => {
                evaluations += 1;
                eval(x)?
            }
        };
        let mut d = self.direction(&g0);
        let mut slope = dot(&g0, &d);
        if !(slope < 0.0) {
            self.s.clear();
            self.y.clear();
            d = g0.iter().map(|v| -v).collect();
            slope = dot(&g0, &d);
        }
        if slope == 0.0 {
            self.current = Some((f0, g0));
            return Ok(LbfgsStep { loss: f0, step_size: 0.0, evaluations, stalled: true });
        }
        let mut step = if self.s.is_empty() {
            let l1: f64 = g0.iter().map(|v| v.abs()).sum();
            (1.0 / l1).min(1.0)
        } else {
            1.0
        };

        let mut candidate = vec![0.0; x.len()];
        for _ in 0..=self.max_halvings {
            for ((c, xi), di) in candidate.iter_mut().zip(x.iter()).zip(&d) {
                *c = xi + step * di;
            }
            self.project(&mut candidate);
            let (f1, g1) = eval(&candidate)?;
            evaluations += 1;
            let moved: Vec<f64> = candidate.iter().zip(x.iter()).map(|(c, xi)| c - xi).collect();
            let decrease = dot(&g0, &moved).min(0.0);
            if f1.is_finite() && f1 <= f0 + self.armijo_c1 * decrease {
                let yk: Vec<f64> = g1.iter().zip(&g0).map(|(a, b)| a - b).collect();
                let sy = dot(&moved, &yk);
                if sy > 1e-10 * (dot(&moved, &moved) * dot(&yk, &yk)).sqrt() {
                    if self.s.len() == self.history {
                        self.s.pop_front();
                        self.y.pop_front();
                    }
                    self.s.push_back(moved);
                    self.y.push_back(yk);
                }
                x.copy_from_slice(&candidate);
                self.current = Some((f1, g1));
                return Ok(LbfgsStep { loss: f1, step_size: step, evaluations, stalled: false });
            }
            step *= 0.5;
        }
        self.current = Some((f0, g0));
        Ok(LbfgsStep { loss: f0, step_size: 0.0, evaluations, stalled: true })
    }
}

/// Single L-BFGS step with a fresh optimizer: steepest-descent direction
/// and Armijo backtracking.
pub fn lbfgs_step<F>(x: &mut [f64], eval: &mut F) -> Result<LbfgsStep>
where
    F: FnMut(&[f64]) -> Result<Evaluation>,
{
    Lbfgs::new(10).step(x, eval)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut st = AdamState::new(3);
        let mut p = vec![1.0, -2.0, 0.5];
        adam_step(&mut st, &mut p, &[0.0; 3], &AdamConfig::with_lr(0.1), 0).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // t = 1: m̂ = g, v̂ = g², update = lr·g/(|g| + ε)
        let mut st = AdamState::new(3);
        let mut p = vec![0.0; 3];
        let g = [3.0, -0.02, 1e3];
        adam_step(&mut st, &mut p, &g, &AdamConfig::with_lr(0.1), 0).unwrap();
        for (pi, gi) in p.iter().zip(g) {
            let expected = -0.1 * gi / (gi.abs() + 1e-8);
            assert!((pi - expected).abs() < 1e-15);
            assert!((pi + 0.1 * gi.signum()).abs() < 1e-6);
        }
    }

    #[test]
    fn non_finite_gradient_names_iteration() {
        let mut st = AdamState::new(2);
        let mut p = vec![0.0; 2];
        let err = adam_step(&mut st, &mut p, &[1.0, f64::NAN], &AdamConfig::with_lr(0.1), 17).unwrap_err();
        assert!(matches!(err, Error::Numeric { iteration: 17, .. }));
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut st = AdamState::new(4);
            let mut p = vec![0.3, -0.1, 0.7, 2.0];
            for it in 0..50 {
                let g: Vec<f64> = p.iter().map(|v| 2.0 * v - 0.3).collect();
                adam_step(&mut st, &mut p, &g, &AdamConfig::with_lr(0.05), it).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    fn quadratic() -> impl FnMut(&[f64]) -> Result<Evaluation> {
        let diag = [1.0, 3.0, 10.0, 0.5, 25.0];
        move |x: &[f64]| {
            let mut ax = vec![0.0; 5];
            for i in 0..5 {
                ax[i] = diag[i] * x[i];
                // symmetric coupling between neighbours
                if i > 0 {
                    ax[i] += 0.2 * x[i - 1];
                }
                if i < 4 {
                    ax[i] += 0.2 * x[i + 1];
                }
            }
            let f = 0.5 * dot(x, &ax);
            Ok((f, ax))
        }
    }

    #[test]
    fn lbfgs_solves_convex_quadratic() {
        let mut f = quadratic();
        let mut x = vec![1.0, -2.0, 0.5, 3.0, -1.0];
        let mut opt = Lbfgs::new(10);
        let mut prev = f(&x).unwrap().0;
        let mut converged = false;
        for _ in 0..50 {
            let st = opt.step(&mut x, &mut f).unwrap();
            assert!(st.loss <= prev, "Armijo step increased the loss");
            prev = st.loss;
            let g = f(&x).unwrap().1;
            if g.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1e-8 {
                converged = true;
                break;
            }
        }
        assert!(converged, "gradient norm above 1e-8 after 50 steps: x = {x:?}");
        assert!(prev.abs() < 1e-12);
    }

    #[test]
    fn first_direction_is_negative_gradient() {
        let opt = Lbfgs::new(10);
        assert_eq!(opt.direction(&[1.0, -2.0, 0.25]), vec![-1.0, 2.0, -0.25]);
    }

    #[test]
    fn stalls_without_descent() {
        // the reported gradient points the wrong way, so no step is accepted
        let mut f = |x: &[f64]| Ok((x[0] * x[0], vec![-2.0 * x[0] - 1.0]));
        let mut x = vec![1.0];
        let st = lbfgs_step(&mut x, &mut f).unwrap();
        assert!(st.stalled);
        assert_eq!(x, vec![1.0]);
        assert_eq!(st.evaluations, 22);
    }

    #[test]
    fn projected_steps_respect_bounds() {
        let mut f = |x: &[f64]| Ok(((x[0] - 5.0).powi(2), vec![2.0 * (x[0] - 5.0)]));
        let mut x = vec![0.2];
        let mut opt = Lbfgs::new(5).with_bounds(0.0, 1.0);
        for _ in 0..10 {
            opt.step(&mut x, &mut f).unwrap();
            assert!((0.0..=1.0).contains(&x[0]));
        }
        assert!((x[0] - 1.0).abs() < 1e-9);
    }
}
