//! Central-difference gradient checking.
//!
//! The function under test is evaluated twice per probed coordinate on
//! untracked tensors, then compared against the analytic gradient from one
//! backward pass. Relative error per coordinate is
//! |a - n| / max(1e-8, |a| + |n|).

use super::*;
use crate::rng::SplitMix64;

/// Outcome of a multi-tensor gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Worst relative error observed per input, in input order.
    pub per_tensor: Vec<(String, f64)>,
}

impl GradCheckReport {
    /// The input with the largest relative error, if any were probed.
    pub fn worst(&self) -> Option<(&str, f64)> {
        self.per_tensor
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(n, e)| (n.as_str(), *e))
    }
}

/// Checks `f`'s gradient with respect to every coordinate of `x`.
pub fn grad_check(
    f: impl Fn(&Tensor) -> Result<Tensor>,
    x: &Tensor,
    eps: f64,
) -> Result<f64> {
    let report = grad_check_many(
        |xs| f(&xs[0]),
        &[("x".to_string(), x.detached())],
        eps,
        None,
        0,
    )?;
    Ok(report.max_rel_err)
}

/// Checks `f`'s gradient with respect to several named inputs at once.
/// When `coords_per_tensor` is set, a seeded sample of that many coordinates
/// is probed per input instead of every coordinate.
pub fn grad_check_many(
    f: impl Fn(&[Tensor]) -> Result<Tensor>,
    inputs: &[(String, Tensor)],
    eps: f64,
    coords_per_tensor: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport> {
    if eps <= 0.0 {
        return Err(Error::invalid("grad_check", "eps must be positive"));
    }
    let tape = Tape::new();
    let tracked: Vec<Tensor> = inputs.iter().map(|(_, t)| t.tracked(&tape)).collect();
    let y = f(&tracked)?;
    if y.numel() != 1 {
        return Err(Error::invalid(
            "grad_check",
            format!("function must return a scalar, got shape {:?}", y.shape()),
        ));
    }
    let grads = y.backward()?;

    let base: Vec<Tensor> = inputs.iter().map(|(_, t)| t.detached()).collect();
    let eval = |probe: usize, data: Vec<f64>| -> Result<f64> {
        let mut xs = base.clone();
        xs[probe] = Tensor::from_vec_unchecked(data, inputs[probe].1.shape().to_vec());
        f(&xs)?.item()
    };

    let mut rng = SplitMix64::new(seed);
    let mut max_rel = 0.0f64;
    let mut per_tensor = Vec::with_capacity(inputs.len());
    for (i, (name, t)) in inputs.iter().enumerate() {
        let analytic: Vec<f64> = match grads.wrt(&tracked[i]) {
            Some(g) => g.to_vec(),
            None => vec![0.0; t.numel()],
        };
        let n = t.numel();
        let coords: Vec<usize> = match coords_per_tensor {
            Some(limit) if limit < n => {
                // Partial Fisher-Yates draw of `limit` distinct coordinates.
                let mut pool: Vec<usize> = (0..n).collect();
                let mut picked = Vec::with_capacity(limit);
                for j in 0..limit {
                    let k = j + rng.below(n - j);
                    pool.swap(j, k);
                    picked.push(pool[j]);
                }
                picked
            }
            _ => (0..n).collect(),
        };

        let mut worst = 0.0f64;
        for c in coords {
            let mut plus = t.data().to_vec();
            plus[c] += eps;
            let mut minus = t.data().to_vec();
            minus[c] -= eps;
            let numeric = (eval(i, plus)? - eval(i, minus)?) / (2.0 * eps);
            let a = analytic[c];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            if rel > worst {
                worst = rel;
            }
        }
        max_rel = max_rel.max(worst);
        per_tensor.push((name.clone(), worst));
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        per_tensor,
    })
}
