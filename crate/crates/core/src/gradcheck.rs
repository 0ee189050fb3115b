//! Central finite-difference checks of analytic gradients.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-4;

/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn scalar(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::Backward(format!(
            "gradient check needs a scalar function, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.data()[0])
}

/// Maximum relative error between the analytic gradient of `f` at `x` and
/// central differences with step `eps`.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Invalid(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut g = Graph::new();
    let leaf = g.leaf(x.clone(), true);
    let loss = f(&mut g, leaf)?;
    scalar(&g, loss)?;
    g.backward(loss)?;
    let analytic = g.grad_tensor(leaf);

    let eval = |t: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let leaf = g.constant(t);
        let out = f(&mut g, leaf)?;
        scalar(&g, out)
    };
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Per-parameter outcome of [`check_param_grads`].
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub max_rel_err: f64,
}

/// Finite-difference check of every scalar of every parameter in `store`.
pub fn check_param_grads<F>(store: &ParamStore<f64>, f: F, eps: f64) -> Result<Vec<ParamCheck>>
where
    F: Fn(&mut Graph<f64>, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = store.bind(&mut g, true);
    let loss = f(&mut g, &bound)?;
    scalar(&g, loss)?;
    g.backward(loss)?;
    let analytic = store.grads(&g, &bound);

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let bound = s.bind(&mut g, false);
        let out = f(&mut g, &bound)?;
        scalar(&g, out)
    };
    let mut work = store.clone();
    let mut report = Vec::with_capacity(store.len());
    let names: Vec<String> = store.names().map(str::to_owned).collect();
    for name in names {
        let numel = store.get(&name)?.numel();
        let mut worst = 0.0f64;
        for i in 0..numel {
            let orig = store.get(&name)?.data()[i];
            work.get_mut(&name)?.data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work.get_mut(&name)?.data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work.get_mut(&name)?.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[&name].data()[i], numeric));
        }
        report.push(ParamCheck {
            name,
            numel,
            max_rel_err: worst,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_and_quadratic_functions() {
        let x = Tensor::new(&[3], vec![0.5, -1.5, 2.0]).unwrap();
        let lin = finite_diff_check(
            |g, x| {
                let y = g.scale(x, 3.0)?;
                g.sum(y)
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(lin < 1e-10, "{lin}");
        let quad = finite_diff_check(
            |g, x| {
                let y = g.mul(x, x)?;
                g.sum(y)
            },
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(quad < 1e-8, "{quad}");
    }

    #[test]
    fn rejects_bad_step_and_vector_output() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        assert!(finite_diff_check(|g, x| g.sum(x), &x, 0.0).is_err());
        assert!(finite_diff_check(|_, x| Ok(x), &x, 1e-4).is_err());
    }
}
