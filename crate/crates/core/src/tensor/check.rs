//! Finite-difference gradient verification.

use crate::error::{Error, Result};
use crate::tensor::{Bindings, EvalMode, Graph};
#[cfg(test)]
use crate::tensor::Tensor;

/// Compare the analytic gradient of `seed_output` w.r.t. `wrt_leaf` against
/// central finite differences of size `step`, returning the maximum relative
/// error over all components:
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// `seed_output` must be scalar-valued at the given bindings. The numeric
/// side re-runs the forward pass with perturbed inputs and never touches the
/// reverse pass, so it is an independent oracle for `backward`.
pub fn grad_check(
    graph: &mut Graph,
    bindings: &Bindings,
    wrt_leaf: &str,
    seed_output: &str,
    step: f64,
    mode: EvalMode,
) -> Result<f64> {
    if step <= 0.0 {
        return Err(Error::Graph(format!("grad_check step {step} must be positive")));
    }
    let base = bindings
        .get(wrt_leaf)
        .ok_or_else(|| Error::Graph(format!("leaf {wrt_leaf:?} not bound")))?
        .clone();
    if !base.requires_grad() {
        return Err(Error::Graph(format!(
            "leaf {wrt_leaf:?} does not require grad"
        )));
    }

    let out = graph.evaluate(bindings, mode)?;
    let seed_value = out
        .get(seed_output)
        .ok_or_else(|| Error::Graph(format!("unknown output {seed_output:?}")))?;
    if !seed_value.is_finite() {
        return Err(Error::Graph("non-finite function value at check point".into()));
    }
    let analytic = graph.backward(seed_output)?;
    let analytic = analytic
        .get(wrt_leaf)
        .ok_or_else(|| Error::Graph(format!("no gradient for {wrt_leaf:?}")))?
        .clone();

    let mut probe = bindings.clone();
    let mut max_rel = 0.0f64;
    for i in 0..base.numel() {
        let x0 = base.data()[i];
        let eval_at = |g: &mut Graph, b: &mut Bindings, x: f64| -> Result<f64> {
            b.get_mut(wrt_leaf).unwrap().data_mut()[i] = x;
            let out = g.evaluate(b, mode)?;
            out[seed_output].item()
        };
        let f_plus = eval_at(graph, &mut probe, x0 + step)?;
        let f_minus = eval_at(graph, &mut probe, x0 - step)?;
        probe.get_mut(wrt_leaf).unwrap().data_mut()[i] = x0;

        let numeric = (f_plus - f_minus) / (2.0 * step);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }

    // Leave the graph evaluated at the original point.
    graph.evaluate(bindings, mode)?;
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[1, 4]).unwrap();
        let w = g.constant(Tensor::new(vec![4, 1], vec![0.5, -1.0, 2.0, 0.25]).unwrap());
        let y = g.matmul(x, w).unwrap();
        let s = g.sum_all(y);
        g.mark_output("s", s);
        let mut b = Bindings::new();
        b.bind(
            "x",
            Tensor::new(vec![1, 4], vec![1.0, 2.0, -0.5, 3.0])
                .unwrap()
                .with_grad(),
        );
        let err = grad_check(&mut g, &b, "x", "s", 1e-5, EvalMode::Eval).unwrap();
        assert!(err < 1e-8, "linear grad check error {err}");
    }

    #[test]
    fn tanh_composition_matches_central_differences() {
        let mut g = Graph::new();
        let x = g.leaf("x", &[1, 3]).unwrap();
        let h = g.tanh(x);
        let h2 = g.tanh(h);
        let s = g.mean_all(h2);
        g.mark_output("s", s);
        let mut b = Bindings::new();
        let mut rng = crate::rng::stream(11, "gradcheck", 0);
        b.bind(
            "x",
            Tensor::rand_uniform(&[1, 3], -1.5, 1.5, &mut rng).with_grad(),
        );
        let err = grad_check(&mut g, &b, "x", "s", 1e-5, EvalMode::Eval).unwrap();
        assert!(err < 1e-4, "tanh grad check error {err}");
    }

    #[test]
    fn mse_of_linear_map_matches_central_differences() {
        // d/dW of mean((x W - t)^2) on random inputs.
        let mut rng = crate::rng::stream(12, "gradcheck", 0);
        let mut g = Graph::new();
        let x = g.constant(Tensor::rand_uniform(&[4, 2], -1.0, 1.0, &mut rng));
        let w = g.leaf("w", &[2, 2]).unwrap();
        let t = g.constant(Tensor::rand_uniform(&[4, 2], -1.0, 1.0, &mut rng));
        let pred = g.matmul(x, w).unwrap();
        let diff = g.sub(pred, t).unwrap();
        let sq = g.mul(diff, diff).unwrap();
        let loss = g.mean_all(sq);
        g.mark_output("loss", loss);
        let mut b = Bindings::new();
        b.bind(
            "w",
            Tensor::rand_uniform(&[2, 2], -1.0, 1.0, &mut rng).with_grad(),
        );
        let err = grad_check(&mut g, &b, "w", "loss", 1e-5, EvalMode::Eval).unwrap();
        assert!(err < 1e-4, "mse grad check error {err}");
    }
}
