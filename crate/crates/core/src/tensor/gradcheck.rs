//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;

use super::{Graph, Shape, Tensor, Var};
use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Which input coordinates a check perturbs.
#[derive(Clone, Copy, Debug)]
pub enum Coordinates {
    All,
    /// At most `per_input` seeded-random coordinates from each input.
    Sample { per_input: usize, seed: u64 },
}

/// Maximum relative error between the analytic gradient of scalar `f` at `x`
/// and its central-difference estimate, over every coordinate of `x`.
///
/// The error of one coordinate is `|a - n| / max(1, |a|, |n|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    finite_diff_check_many(|g, vs| f(g, vs[0]), std::slice::from_ref(x), eps, Coordinates::All)
}

/// Multi-input form of [`finite_diff_check`]; every input is differentiated.
pub fn finite_diff_check_many<F>(f: F, inputs: &[Tensor], eps: f64, coords: Coordinates) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::Usage(format!("finite-difference eps {eps} outside [1e-7, 1e-4]")));
    }
    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut g, &vars)?;
    if g.shape(out) != Shape::SCALAR {
        return Err(Error::Usage(format!(
            "finite-difference check needs a scalar function, got {:?}",
            g.shape(out)
        )));
    }
    g.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let numel = inputs[i].shape().numel();
        let analytic = g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; numel]);
        let picks: Vec<usize> = match coords {
            Coordinates::All => (0..numel).collect(),
            Coordinates::Sample { per_input, seed } if per_input < numel => {
                let mut rng = rng_for(seed, &format!("gradcheck.{i}"));
                let mut idx = sample(&mut rng, numel, per_input).into_vec();
                idx.sort_unstable();
                idx
            }
            Coordinates::Sample { .. } => (0..numel).collect(),
        };
        for j in picks {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[j];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if !err.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient at input {i}, coordinate {j}")));
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
