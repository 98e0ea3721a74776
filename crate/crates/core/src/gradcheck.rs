//! Central finite-difference verification of tape gradients.
//!
//! The numerical side only ever evaluates the forward pass, so it is an
//! independent check of every backward rule it exercises.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::graph::{Graph, Var};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Matrix;

/// Outcome of a directional gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub directions: usize,
    pub max_rel_error: f64,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Relative error with a floor so that two vanishing derivatives agree.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-10 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Compare `d loss / d theta . u` against `(f(theta + h u) - f(theta - h u)) / 2h`
/// for random unit directions `u` over all trainable parameters.
pub fn check_params<F>(
    store: &ParamStore<f64>,
    loss: F,
    directions: usize,
    step: f64,
    rng: &mut impl Rng,
) -> GradCheck
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var,
{
    let mut g = Graph::new();
    let out = loss(&mut g, store);
    let grads = g.backward(out);
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.trainable(id)).collect();
    let analytic: Vec<Matrix<f64>> = ids
        .iter()
        .map(|&id| {
            grads.param(id).cloned().unwrap_or_else(|| {
                let v = store.value(id);
                Matrix::zeros(v.rows(), v.cols())
            })
        })
        .collect();

    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::new();
        let v = loss(&mut g, s);
        g.value(v).item()
    };

    let mut report = GradCheck { directions, max_rel_error: 0.0, worst_analytic: 0.0, worst_numeric: 0.0 };
    let mut probe = store.clone();
    for _ in 0..directions {
        let dir: Vec<Matrix<f64>> = ids
            .iter()
            .map(|&id| {
                let v = store.value(id);
                Matrix::from_fn(v.rows(), v.cols(), |_, _| StandardNormal.sample(rng))
            })
            .collect();
        let norm = dir.iter().map(Matrix::frobenius_sq).sum::<f64>().sqrt();
        let a: f64 = dir
            .iter()
            .zip(&analytic)
            .map(|(u, g)| u.data().iter().zip(g.data()).map(|(x, y)| x * y).sum::<f64>())
            .sum::<f64>()
            / norm;
        let shift = |probe: &mut ParamStore<f64>, sign: f64| {
            for (&id, u) in ids.iter().zip(&dir) {
                let base = store.value(id);
                let p = probe.value_mut(id);
                for ((pv, &bv), &uv) in p.data_mut().iter_mut().zip(base.data()).zip(u.data()) {
                    *pv = bv + sign * step * uv / norm;
                }
            }
        };
        shift(&mut probe, 1.0);
        let plus = eval(&probe);
        shift(&mut probe, -1.0);
        let minus = eval(&probe);
        let n = (plus - minus) / (2.0 * step);
        let err = relative_error(a, n);
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst_analytic = a;
            report.worst_numeric = n;
        }
    }
    report
}

/// Entry-wise check of the gradient with respect to a free input matrix.
pub fn check_input<F>(input: &Matrix<f64>, loss: F, step: f64) -> GradCheck
where
    F: Fn(&mut Graph<f64>, Var) -> Var,
{
    let mut g = Graph::new();
    let x = g.variable(input.clone());
    let out = loss(&mut g, x);
    let grads = g.backward(out);
    let analytic = grads
        .wrt(x)
        .cloned()
        .unwrap_or_else(|| Matrix::zeros(input.rows(), input.cols()));
    let eval = |m: Matrix<f64>| {
        let mut g = Graph::new();
        let x = g.variable(m);
        let v = loss(&mut g, x);
        g.value(v).item()
    };
    let mut report =
        GradCheck { directions: input.len(), max_rel_error: 0.0, worst_analytic: 0.0, worst_numeric: 0.0 };
    for i in 0..input.len() {
        let mut plus = input.clone();
        plus.data_mut()[i] += step;
        let mut minus = input.clone();
        minus.data_mut()[i] -= step;
        let n = (eval(plus) - eval(minus)) / (2.0 * step);
        let a = analytic.data()[i];
        let err = relative_error(a, n);
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst_analytic = a;
            report.worst_numeric = n;
        }
    }
    report
}
