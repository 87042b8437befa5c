//! Linear-softmax surrogate on masked inputs: a strictly convex instance of the
//! surrogate objective on which plain gradient descent has a provable linear rate.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_f64, Graph, Optimizer, OptimizerConfig, ParamStore, Scheme};
use crate::error::{Error, Result};
use crate::shapley::sample_equicardinal;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvexProblem {
    pub samples: usize,
    pub players: usize,
    pub classes: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for ConvexProblem {
    fn default() -> Self {
        ConvexProblem { samples: 96, players: 4, classes: 3, steps: 300, seed: 11 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvexCheck {
    pub step_size: f64,
    /// Smallest Hessian eigenvalue found on segments between iterates and the optimum.
    pub mu: f64,
    /// Global smoothness bound used to pick the step size.
    pub smoothness: f64,
    pub optimal_loss: f64,
    /// `L(β_t) − L(β*)` for `t = 0..=steps`.
    pub gaps: Vec<f64>,
    /// `(1 − μα)^t · gap_0`.
    pub bounds: Vec<f64>,
    /// Largest `gap_t / bound_t`.
    pub worst_ratio: f64,
    pub passed: bool,
}

struct Instance {
    /// Features `[n, q]`: masked tokens, mask bits, and a constant.
    phi: DMatrix<f64>,
    /// Teacher probabilities `[n, classes]` from the unmasked input.
    teacher: DMatrix<f64>,
    classes: usize,
}

impl Instance {
    fn new(p: &ConvexProblem) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
        let d = p.players;
        let q = 2 * d + 1;
        let a: Vec<f64> = (0..p.classes * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let masks = sample_equicardinal(&mut rng, d, p.samples);
        let mut phi = DMatrix::zeros(p.samples, q);
        let mut teacher = DMatrix::zeros(p.samples, p.classes);
        for (n, s) in masks.iter().enumerate() {
            let x: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            for i in 0..d {
                let keep = s.get(i) as u8 as f64;
                phi[(n, i)] = x[i] * keep;
                phi[(n, d + i)] = keep;
            }
            phi[(n, 2 * d)] = 1.0;
            let logits: Vec<f64> = (0..p.classes).map(|c| (0..d).map(|i| a[c * d + i] * x[i]).sum()).collect();
            for (c, v) in softmax_f64(&logits).into_iter().enumerate() {
                teacher[(n, c)] = v;
            }
        }
        Instance { phi, teacher, classes: p.classes }
    }

    fn free(&self) -> usize {
        self.classes - 1
    }

    /// Model probabilities for weights `w` laid out `[q, classes−1]`, last logit fixed at 0.
    fn probs(&self, w: &[f64]) -> Vec<Vec<f64>> {
        let (q, k) = (self.phi.ncols(), self.free());
        (0..self.phi.nrows())
            .map(|n| {
                let mut logits: Vec<f64> =
                    (0..k).map(|c| (0..q).map(|j| self.phi[(n, j)] * w[j * k + c]).sum()).collect();
                logits.push(0.0);
                softmax_f64(&logits)
            })
            .collect()
    }

    /// Mean KL from the teacher to the model.
    fn loss(&self, w: &[f64]) -> f64 {
        let probs = self.probs(w);
        let n = self.phi.nrows();
        (0..n)
            .map(|i| {
                (0..self.classes)
                    .map(|c| {
                        let t = self.teacher[(i, c)];
                        if t > 0.0 {
                            t * (t.ln() - probs[i][c].ln())
                        } else {
                            0.0
                        }
                    })
                    .sum::<f64>()
            })
            .sum::<f64>()
            / n as f64
    }

    fn gradient(&self, w: &[f64]) -> Vec<f64> {
        let probs = self.probs(w);
        let (n, q, k) = (self.phi.nrows(), self.phi.ncols(), self.free());
        let mut g = vec![0.0; q * k];
        for i in 0..n {
            for c in 0..k {
                let r = (probs[i][c] - self.teacher[(i, c)]) / n as f64;
                for j in 0..q {
                    g[j * k + c] += r * self.phi[(i, j)];
                }
            }
        }
        g
    }

    fn hessian(&self, w: &[f64]) -> DMatrix<f64> {
        let probs = self.probs(w);
        let (n, q, k) = (self.phi.nrows(), self.phi.ncols(), self.free());
        let mut h = DMatrix::zeros(q * k, q * k);
        for i in 0..n {
            for a in 0..k {
                for b in 0..k {
                    let s = ((a == b) as u8 as f64 * probs[i][a] - probs[i][a] * probs[i][b]) / n as f64;
                    if s == 0.0 {
                        continue;
                    }
                    for j in 0..q {
                        for l in 0..q {
                            h[(j * k + a, l * k + b)] += s * self.phi[(i, j)] * self.phi[(i, l)];
                        }
                    }
                }
            }
        }
        h
    }

    fn newton_optimum(&self) -> Result<Vec<f64>> {
        let dim = self.phi.ncols() * self.free();
        let mut w = vec![0.0; dim];
        for _ in 0..100 {
            let g = self.gradient(&w);
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-14 {
                break;
            }
            let step = self
                .hessian(&w)
                .cholesky()
                .ok_or_else(|| Error::Invariant("Hessian is not positive definite".into()))?
                .solve(&DMatrix::from_column_slice(dim, 1, &g));
            // damped step keeps the iteration inside the region of descent
            let mut t = 1.0;
            let base = self.loss(&w);
            loop {
                let trial: Vec<f64> = w.iter().zip(step.iter()).map(|(a, b)| a - t * b).collect();
                if self.loss(&trial) <= base || t < 1e-8 {
                    w = trial;
                    break;
                }
                t *= 0.5;
            }
        }
        Ok(w)
    }
}

fn min_eig(h: DMatrix<f64>) -> f64 {
    SymmetricEigen::new(h).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Run full-batch plain gradient descent through the autodiff engine and compare the
/// loss gap with `(1 − μα)^t · gap_0`, allowing `slack` relative excess.
pub fn convex_decay_check(problem: &ConvexProblem, slack: f64) -> Result<ConvexCheck> {
    if problem.players < 2 || problem.classes < 2 || problem.samples == 0 {
        return Err(Error::config(format!("degenerate convex problem {problem:?}")));
    }
    let inst = Instance::new(problem);
    let (q, k) = (inst.phi.ncols(), inst.free());
    // diag(p) − ppᵀ ≼ ½I, so the loss is (½·λmax(ΦᵀΦ)/n)-smooth everywhere.
    let gram = inst.phi.transpose() * &inst.phi / inst.phi.nrows() as f64;
    let smoothness = 0.5 * SymmetricEigen::new(gram).eigenvalues.iter().copied().fold(0.0, f64::max);
    let step_size = 1.0 / smoothness;
    let star = inst.newton_optimum()?;
    let optimal_loss = inst.loss(&star);

    let mut store = ParamStore::<f64>::new();
    let wid = store.add("w", Tensor::zeros(&[q, k]), true)?;
    let phi = Tensor::new(vec![inst.phi.nrows(), q], inst.phi.transpose().as_slice().to_vec())?;
    let teacher = Tensor::new(vec![inst.phi.nrows(), problem.classes], inst.teacher.transpose().as_slice().to_vec())?;
    let mut lift = Tensor::zeros(&[k, problem.classes]);
    for c in 0..k {
        lift.data_mut()[c * problem.classes + c] = 1.0;
    }
    let mut opt = Optimizer::new(OptimizerConfig {
        step_size,
        steps: problem.steps as u64,
        scheme: Scheme::PlainGd,
    })?;
    let mut iterates = vec![store.get(wid).data().to_vec()];
    for _ in 0..problem.steps {
        let mut g = Graph::new();
        let x = g.constant(phi.clone());
        let w = g.param(&store, wid);
        let e = g.constant(lift.clone());
        let free = g.matmul(x, w)?;
        let logits = g.matmul(free, e)?;
        let lp = g.log_softmax(logits)?;
        let t = g.constant(teacher.clone());
        let cross = g.mul(lp, t)?;
        let cross = g.sum(cross)?;
        let loss = g.scale(cross, -1.0 / inst.phi.nrows() as f64)?;
        let grads = g.backward(loss)?;
        opt.step(&mut store, &grads)?;
        iterates.push(store.get(wid).data().to_vec());
    }

    let mut mu = f64::INFINITY;
    for w in &iterates {
        for frac in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let p: Vec<f64> = w.iter().zip(&star).map(|(a, b)| a + frac * (b - a)).collect();
            mu = mu.min(min_eig(inst.hessian(&p)));
        }
    }
    if !(mu > 0.0) {
        return Err(Error::Invariant(format!("objective is not strongly convex on the path (μ = {mu:e})")));
    }
    let gaps: Vec<f64> = iterates.iter().map(|w| (inst.loss(w) - optimal_loss).max(0.0)).collect();
    let rate = 1.0 - mu * step_size;
    let bounds: Vec<f64> = (0..gaps.len()).map(|t| rate.powi(t as i32) * gaps[0]).collect();
    let mut worst_ratio: f64 = 0.0;
    let mut passed = true;
    for (g, b) in gaps.iter().zip(&bounds) {
        // below the resolution of f64 loss differences the gap is pure rounding
        if *g <= 1e-13 {
            continue;
        }
        worst_ratio = worst_ratio.max(g / b);
        passed &= *g <= b * (1.0 + slack);
    }
    Ok(ConvexCheck { step_size, mu, smoothness, optimal_loss, gaps, bounds, worst_ratio, passed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_gradient_matches_differences() {
        let p = ConvexProblem { samples: 12, players: 3, classes: 3, steps: 0, seed: 2 };
        let inst = Instance::new(&p);
        let dim = inst.phi.ncols() * inst.free();
        let w: Vec<f64> = (0..dim).map(|i| (i as f64 * 0.37).sin() * 0.3).collect();
        let g = inst.gradient(&w);
        for i in 0..dim {
            let mut a = w.clone();
            let mut b = w.clone();
            a[i] += 1e-6;
            b[i] -= 1e-6;
            let fd = (inst.loss(&a) - inst.loss(&b)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-7, "{i}: {fd} vs {}", g[i]);
        }
    }
}
