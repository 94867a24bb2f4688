//! Central finite-difference verification of analytic gradients.

use super::{Tape, TensorId};
use crate::error::{Error, Result};

/// One input to a gradient check. Detached inputs (`trainable == false`)
/// take part in the forward pass but are skipped by the checker.
#[derive(Debug, Clone)]
pub struct CheckInput {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub trainable: bool,
}

impl CheckInput {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        CheckInput { shape, data, trainable: true }
    }

    pub fn detached(shape: Vec<usize>, data: Vec<f64>) -> Self {
        CheckInput { shape, data, trainable: false }
    }
}

/// Compare analytic gradients of a scalar-valued computation against
/// central finite differences.
///
/// `build` receives a fresh tape plus one leaf per entry of `inputs` and
/// must return a scalar loss node. Returns the maximum relative error
/// `|fd - analytic| / max(|fd|, |analytic|, 1e-8)` over all trainable
/// input elements.
pub fn grad_check<F>(build: F, inputs: &[CheckInput], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    grad_check_with_corruption(build, inputs, epsilon, false)
}

/// Test hook used by the verification suite's negative path: when
/// `corrupt` is set, the first analytic gradient entry is perturbed before
/// comparison, so a correct implementation must FAIL the check.
pub fn grad_check_with_corruption<F>(
    build: F,
    inputs: &[CheckInput],
    epsilon: f64,
    corrupt: bool,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    if epsilon <= 0.0 {
        return Err(Error::Contract("grad_check epsilon must be positive".into()));
    }

    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|inp| tape.leaf(inp.shape.clone(), inp.data.clone(), inp.trainable))
        .collect::<Result<_>>()?;
    let loss = build(&mut tape, &ids)?;
    if tape.data(loss).len() != 1 {
        return Err(Error::Contract("grad_check computation must produce a scalar".into()));
    }
    tape.backward(loss)?;
    let mut analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, inp)| {
            tape.grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; inp.data.len()])
        })
        .collect();
    if corrupt {
        if let Some(first) = analytic.iter_mut().find(|g| !g.is_empty()) {
            first[0] += 1.0;
        }
    }

    let eval = |datasets: &[Vec<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let ids: Vec<TensorId> = datasets
            .iter()
            .zip(inputs)
            .map(|(d, inp)| t.leaf(inp.shape.clone(), d.clone(), false))
            .collect::<Result<_>>()?;
        let l = build(&mut t, &ids)?;
        Ok(t.data(l)[0])
    };

    let mut datasets: Vec<Vec<f64>> = inputs.iter().map(|i| i.data.clone()).collect();
    let mut max_rel = 0.0f64;
    for (i, inp) in inputs.iter().enumerate() {
        if !inp.trainable {
            continue;
        }
        for j in 0..inp.data.len() {
            let orig = datasets[i][j];
            datasets[i][j] = orig + epsilon;
            let up = eval(&datasets)?;
            datasets[i][j] = orig - epsilon;
            let down = eval(&datasets)?;
            datasets[i][j] = orig;
            let fd = (up - down) / (2.0 * epsilon);
            let a = analytic[i][j];
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_vec(rng: &mut StdRng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(11);
        let a = CheckInput::new(vec![3, 3], random_vec(&mut rng, 9));
        let b = CheckInput::new(vec![3, 3], random_vec(&mut rng, 9));
        let w = random_vec(&mut rng, 9);
        let err = grad_check(
            move |t, ids| {
                let c = t.matmul(ids[0], ids[1])?;
                let wt = t.constant(vec![3, 3], w.clone())?;
                let h = t.hadamard(c, wt)?;
                Ok(t.sum(h))
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn relu_checked_away_from_kink() {
        let mut rng = StdRng::seed_from_u64(12);
        let data: Vec<f64> = (0..8)
            .map(|_| {
                let v: f64 = rng.gen_range(0.1..1.0);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let err = grad_check(
            |t, ids| {
                let r = t.relu(ids[0]);
                Ok(t.sum(r))
            },
            &[CheckInput::new(vec![8], data)],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn detached_input_is_skipped() {
        let err = grad_check(
            |t, ids| {
                let h = t.hadamard(ids[0], ids[1])?;
                Ok(t.sum(h))
            },
            &[
                CheckInput::new(vec![2], vec![0.5, -0.25]),
                CheckInput::detached(vec![2], vec![2.0, 3.0]),
            ],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4);
    }

    #[test]
    fn corruption_hook_forces_failure() {
        let err = grad_check_with_corruption(
            |t, ids| Ok(t.sum(ids[0])),
            &[CheckInput::new(vec![3], vec![0.4, 0.5, 0.6])],
            1e-5,
            true,
        )
        .unwrap();
        assert!(err > 1e-2, "corrupted gradient must be detected, err={err}");
    }

    #[test]
    fn rejects_non_positive_epsilon() {
        let r = grad_check(|t, ids| Ok(t.sum(ids[0])), &[CheckInput::new(vec![1], vec![1.0])], 0.0);
        assert!(r.is_err());
    }
}
