use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central difference step.
    pub eps: f64,
    /// Entries whose relative error exceeds this are flagged.
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so entries where both
    /// gradients are numerically zero compare absolutely.
    pub denom_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            tol: 1e-4,
            denom_floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub index: usize,
    pub max_rel_error: f64,
    pub flagged: usize,
    pub entries: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.flagged == 0)
    }
}

/// Compares analytic gradients of a scalar function against central finite
/// differences `(f(θ+eps) − f(θ−eps)) / 2eps`, entry by entry.
///
/// `f` receives a fresh graph and one leaf per parameter (in order) and must
/// return a scalar node.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if opts.eps <= 0.0 {
        return Err(Error::Config("grad_check eps must be positive".into()));
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::NonFiniteValue("grad_check parameters".into()));
    }
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.input(p)).collect();
        let out = f(&mut g, &vars)?;
        let v = g.scalar(out);
        if !v.is_finite() {
            return Err(Error::NonFiniteValue("grad_check objective".into()));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let leaves: Vec<Var> = params
        .iter()
        .map(|p| g.input(&p.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut g, &leaves)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .zip(params)
        .map(|(&v, p)| g.grad(v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
        .collect();

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = Vec::with_capacity(params.len());
    for (pi, grad) in analytic.iter().enumerate() {
        let mut check = ParamCheck {
            index: pi,
            max_rel_error: 0.0,
            flagged: 0,
            entries: grad.len(),
        };
        for (j, &a) in grad.iter().enumerate() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + opts.eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[j] = orig - opts.eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let denom = a.abs().max(numeric.abs()).max(opts.denom_floor);
            let rel = (a - numeric).abs() / denom;
            if rel > opts.tol {
                check.flagged += 1;
            }
            check.max_rel_error = check.max_rel_error.max(rel);
        }
        report.push(check);
    }
    Ok(GradCheckReport { params: report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_passes() {
        let w = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let rep = grad_check(
            |g, v| {
                let sq = g.square(v[0]);
                Ok(g.sum(sq))
            },
            &[w],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.max_rel_error() < 1e-6, "{rep:?}");
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let w = Tensor::new(vec![2], vec![0.5, -1.0]).unwrap();
        let rep = grad_check(
            |g, _| Ok(g.constant(&[1], vec![3.0])),
            &[w],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(rep.max_rel_error(), 0.0);
        assert!(rep.passed());
    }

    #[test]
    fn rejects_bad_inputs() {
        let w = Tensor::new(vec![1], vec![1.0]).unwrap();
        let opts = GradCheckOptions {
            eps: 0.0,
            ..Default::default()
        };
        assert!(grad_check(|g, v| Ok(g.sum(v[0])), std::slice::from_ref(&w), opts).is_err());
        let mut bad = w;
        bad.data_mut()[0] = f64::INFINITY;
        assert!(matches!(
            grad_check(|g, v| Ok(g.sum(v[0])), &[bad], GradCheckOptions::default()),
            Err(Error::NonFiniteValue(_))
        ));
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // log(exp(x)) has unit slope; comparing against x² must be flagged
        // only if gradients disagree, so build a function whose tape is fine
        // and check the report notices a perturbed analytic value indirectly:
        // clamp has a kink, evaluated right at the boundary the FD slope is 1/2.
        let w = Tensor::new(vec![1], vec![1.0]).unwrap();
        let rep = grad_check(
            |g, v| Ok(g.clamp(v[0], 0.0, 1.0)),
            &[w],
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!rep.passed());
    }
}
