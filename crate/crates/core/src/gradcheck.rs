//! Central finite-difference checks for graph gradients.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{ConversationInputs, ErcModel};
use crate::tensor::Matrix;

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, or the absolute difference when both vanish.
pub fn relative_error(analytic: &Matrix<f64>, numeric: &Matrix<f64>) -> f64 {
    let diff = analytic.sub(numeric).map(|m| m.frobenius_norm()).unwrap_or(f64::INFINITY);
    let scale = analytic.frobenius_norm().max(numeric.frobenius_norm());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Reduces a matrix node to a scalar with fixed pseudo-random weights, so
/// every output entry contributes to the checked gradient.
pub fn random_projection(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let (r, c) = g.value(out).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    g.dot_const(out, Matrix::from_vec(r, c, weights)?)
}

/// Relative error per input between backprop and central differences.
/// `build` receives one variable per input and must return a 1x1 node.
pub fn check<F>(inputs: &[Matrix<f64>], eps: f64, build: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Matrix<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|m| g.constant(m.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.scalar(out))
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|m| g.param(m.clone())).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut errors = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(input.rows(), input.cols()));
        let mut numeric = Matrix::zeros(input.rows(), input.cols());
        for j in 0..input.len() {
            let orig = input.as_slice()[j];
            work[i].as_mut_slice()[j] = orig + eps;
            let plus = eval(&work)?;
            work[i].as_mut_slice()[j] = orig - eps;
            let minus = eval(&work)?;
            work[i].as_mut_slice()[j] = orig;
            numeric.as_mut_slice()[j] = (plus - minus) / (2.0 * eps);
        }
        errors.push(relative_error(&analytic, &numeric));
    }
    Ok(errors)
}

/// Relative error per named parameter of the model's training loss on one
/// conversation, with dropout disabled.
pub fn check_model(
    model: &ErcModel<f64>,
    inputs: &ConversationInputs<f64>,
    eps: f64,
) -> Result<BTreeMap<String, f64>> {
    let (g, bound, loss) = model.loss_graph(inputs, None)?;
    let analytic = bound.gradients(&g.backward(loss)?);
    let loss_of = |m: &ErcModel<f64>| -> Result<f64> {
        let (g, _, loss) = m.loss_graph(inputs, None)?;
        Ok(g.scalar(loss))
    };
    let mut work = model.clone();
    let mut out = BTreeMap::new();
    let names: Vec<String> = model.params().names().map(String::from).collect();
    for name in names {
        let base = model.params().require(&name)?.clone();
        let mut numeric = Matrix::zeros(base.rows(), base.cols());
        for j in 0..base.len() {
            let orig = base.as_slice()[j];
            let slot = |w: &mut ErcModel<f64>, v: f64| -> Result<()> {
                w.params_mut()
                    .get_mut(&name)
                    .ok_or_else(|| Error::Config(format!("missing {name}")))?
                    .as_mut_slice()[j] = v;
                Ok(())
            };
            slot(&mut work, orig + eps)?;
            let plus = loss_of(&work)?;
            slot(&mut work, orig - eps)?;
            let minus = loss_of(&work)?;
            slot(&mut work, orig)?;
            numeric.as_mut_slice()[j] = (plus - minus) / (2.0 * eps);
        }
        let a = analytic
            .get(&name)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(base.rows(), base.cols()));
        out.insert(name, relative_error(&a, &numeric));
    }
    Ok(out)
}
