use std::collections::BTreeMap;

use super::{Graph, ParameterSet, Var};
use crate::error::Result;

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Worst relative error per checked (trainable) parameter path.
    pub max_rel_error: BTreeMap<String, f64>,
    pub eps: f64,
    pub tol: f64,
    /// Denominator floor: relative error is `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<(&str, f64)> {
        self.max_rel_error
            .iter()
            .map(|(k, &v)| (k.as_str(), v))
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }

    pub fn checked_scalars(&self) -> usize {
        self.max_rel_error.len()
    }
}

pub const GRADCHECK_FLOOR: f64 = 1e-3;

/// Checks every scalar of every trainable parameter with
/// `(f(θ+eps) − f(θ−eps)) / 2eps`. Frozen parameters are not reported.
pub fn grad_check<F>(build: F, params: &ParameterSet, eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParameterSet) -> Result<Var>,
{
    let mut g = Graph::new();
    let obj = build(&mut g, params)?;
    let grads = g.backward(obj)?.for_params(params);

    let eval = |ps: &ParameterSet| -> Result<f64> {
        let mut g = Graph::no_grad();
        let v = build(&mut g, ps)?;
        Ok(g.scalar_value(v))
    };

    let mut probe = params.clone();
    let mut max_rel_error = BTreeMap::new();
    for (path, analytic) in &grads {
        let mut worst: f64 = 0.0;
        for k in 0..analytic.len() {
            let orig = probe.get(path).unwrap().data()[k];
            probe.get_mut(path).unwrap().data_mut()[k] = orig + eps;
            let plus = eval(&probe)?;
            probe.get_mut(path).unwrap().data_mut()[k] = orig - eps;
            let minus = eval(&probe)?;
            probe.get_mut(path).unwrap().data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
            worst = worst.max(rel);
        }
        max_rel_error.insert(path.clone(), worst);
    }
    let pass = max_rel_error.values().all(|&e| e < tol);
    Ok(GradCheckReport {
        max_rel_error,
        eps,
        tol,
        floor: GRADCHECK_FLOOR,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_passes_tightly() {
        let mut ps = ParameterSet::new();
        ps.insert("x", Tensor::new(&[3], vec![0.4, -1.3, 2.2]).unwrap());
        ps.insert("frozen", Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        ps.freeze("frozen").unwrap();
        let report = grad_check(
            |g, ps| {
                let x = g.param(ps, "x")?;
                let f = g.param(ps, "frozen")?;
                let d = g.sub(x, f)?;
                let sq = g.square(d);
                Ok(g.sum(sq))
            },
            &ps,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.pass, "{report:?}");
        assert!(!report.max_rel_error.contains_key("frozen"));
        assert_eq!(report.checked_scalars(), 1);
    }
}
