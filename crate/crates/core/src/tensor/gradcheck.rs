//! Central-difference gradient checking for tape programs.

use crate::error::Result;

use super::{Gradients, Tape, Tensor, Var};

/// |a − b| relative to the larger magnitude, floored so that near-zero pairs
/// compare on an absolute 1e-3 scale.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Checks reverse-mode gradients of a scalar program against central finite
/// differences. `program` receives leaf variables in the order of `params`
/// and must return the scalar output. Returns the worst relative error.
pub fn gradcheck(
    params: &[Tensor],
    h: f64,
    program: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let run = |inputs: &[Tensor]| -> Result<(f64, Option<Gradients>, Vec<Var>, Tape)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| tape.leaf(t.clone().with_grad()))
            .collect();
        let out = program(&mut tape, &vars)?;
        let val = tape.value(out).data()[0];
        let grads = tape.backward(out)?;
        Ok((val, Some(grads), vars, tape))
    };

    let (_, grads, vars, _tape) = run(params)?;
    let grads = grads.expect("backward ran");
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            grads
                .get(v)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; p.elem_count()])
        })
        .collect();

    let mut worst: f64 = 0.0;
    for (pi, p) in params.iter().enumerate() {
        for e in 0..p.elem_count() {
            let mut plus = params.to_vec();
            plus[pi].data_mut()[e] += h;
            let mut minus = params.to_vec();
            minus[pi].data_mut()[e] -= h;
            let (fp, _, _, _) = run(&plus)?;
            let (fm, _, _, _) = run(&minus)?;
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(relative_error(analytic[pi][e], numeric));
        }
    }
    Ok(worst)
}

/// `gradcheck` with the standard step h = 1e-5.
pub fn gradcheck_default(
    params: &[Tensor],
    program: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<f64> {
    gradcheck(params, 1e-5, program)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::init_param;

    #[test]
    fn matmul_gradient_matches_finite_difference() {
        let a = init_param(&[5, 4], 11).unwrap();
        let b = init_param(&[4, 3], 12).unwrap();
        let w = init_param(&[5, 3], 13).unwrap();
        let worst = gradcheck_default(&[a, b, w], |tape, vars| {
            let p = tape.matmul(vars[0], vars[1])?;
            // Weighted sum so the output gradient is non-uniform.
            let weighted = tape.mul(p, vars[2])?;
            Ok(tape.sum(weighted))
        })
        .unwrap();
        assert!(worst < 1e-6, "worst relative error {worst}");
    }

    #[test]
    fn leaky_relu_gradient_at_negative_input_equals_slope() {
        let x = Tensor::vector(vec![-1.0]);
        let worst = gradcheck_default(&[x], |tape, vars| {
            let y = tape.leaky_relu(vars[0], 0.2)?;
            Ok(tape.sum(y))
        })
        .unwrap();
        assert!(worst < 1e-6, "worst relative error {worst}");
    }

    #[test]
    fn batch_norm_training_gradcheck() {
        let x = init_param(&[4, 3], 21).unwrap();
        let gamma = Tensor::vector(vec![1.1, 0.9, 1.3]);
        let beta = Tensor::vector(vec![0.1, -0.2, 0.0]);
        let mix = init_param(&[4, 3], 22).unwrap();
        let worst = gradcheck_default(&[x, gamma, beta, mix], |tape, vars| {
            let mut state = super::super::BnState::new(3);
            let y = tape.batch_norm(vars[0], vars[1], vars[2], &mut state, true)?;
            let weighted = tape.mul(y, vars[3])?;
            Ok(tape.sum(weighted))
        })
        .unwrap();
        assert!(worst < 1e-5, "worst relative error {worst}");
    }
}
