//! Builds a small graph, runs reverse mode and compares against central
//! finite differences.
//!
//! `cargo run --example autograd_basics`

use structtoken::gradcheck::{finite_diff_check, DEFAULT_EPS};
use structtoken::{Graph, Result, Tensor};

fn main() -> Result<()> {
    let a = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.7).sin());
    let b = Tensor::from_fn(&[4, 2], |i| (i as f64 * 0.3).cos());

    let mut g = Graph::new();
    let va = g.leaf(a.clone(), true);
    let vb = g.constant(b.clone());
    let y = g.matmul(va, vb)?;
    let y = g.gelu(y)?;
    let loss = g.sum(y)?;
    g.backward(loss)?;
    println!("loss = {:.6}", g.value(loss).data()[0]);
    println!("dloss/da = {:?}", g.grad_tensor(va).data());

    let err = finite_diff_check(
        |g, x| {
            let vb = g.constant(b.clone());
            let y = g.matmul(x, vb)?;
            let y = g.gelu(y)?;
            g.sum(y)
        },
        &a,
        DEFAULT_EPS,
    )?;
    println!("max relative error vs finite differences: {err:.2e}");
    Ok(())
}
