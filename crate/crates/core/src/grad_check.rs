//! Central finite-difference verification of autodiff gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::{Precision, Tensor};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Denominator floor for the relative error, so coordinates whose true
    /// gradient is ~0 are judged on absolute error instead.
    pub floor: f64,
    /// `None` checks every coordinate; `Some(n)` samples `n` coordinates.
    pub samples: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            floor: 1e-8,
            samples: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(param index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub checked: usize,
}

fn eval<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new(Precision::F64);
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::dim("grad_check needs a scalar-valued function"));
    }
    let y = v.data()[0];
    if !y.is_finite() {
        return Err(Error::numeric("grad_check: non-finite function value"));
    }
    Ok(y)
}

/// Compares the reverse-mode gradient of the scalar `f` against central
/// differences. Always evaluated in 64-bit precision.
pub fn grad_check<F>(f: F, params: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new(Precision::F64);
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.get(v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
        .collect();

    let all: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.len()).map(move |c| (pi, c)))
        .collect();
    let coords = match opts.samples {
        Some(n) if n < all.len() => {
            let mut rng = Rng::stream(opts.seed, "grad-check");
            let mut pool = all;
            rng.shuffle(&mut pool);
            pool.truncate(n);
            pool
        }
        _ => all,
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for &(pi, c) in &coords {
        let orig = work[pi].data()[c];
        work[pi].data_mut()[c] = orig + opts.eps;
        let plus = eval(&f, &work)?;
        work[pi].data_mut()[c] = orig - opts.eps;
        let minus = eval(&f, &work)?;
        work[pi].data_mut()[c] = orig;

        let numeric = (plus - minus) / (2.0 * opts.eps);
        let a = analytic[pi][c];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
        if rel > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = rel;
            report.worst = (pi, c);
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_matches_closed_form() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let f = |g: &mut Graph, v: &[Var]| {
            let sq = g.mul(v[0], v[0])?;
            g.sum(sq)
        };
        // Closed-form gradient 2x.
        let mut g = Graph::new(Precision::F64);
        let xv = g.param(x.clone());
        let y = f(&mut g, &[xv]).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(xv).unwrap(), &[2.0, 4.0, 6.0]);

        let report = grad_check(f, &[x], &GradCheckOptions::default()).unwrap();
        assert_eq!(report.checked, 3);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn linear_function_is_exact_up_to_rounding() {
        let x = Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let f = |g: &mut Graph, v: &[Var]| {
            let s = g.scale(v[0], 3.0)?;
            g.sum(s)
        };
        let report = grad_check(f, &[x], &GradCheckOptions::default()).unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    #[test]
    fn sampling_limits_coordinates() {
        let x = Tensor::full(&[10, 10], 0.3);
        let f = |g: &mut Graph, v: &[Var]| {
            let sq = g.mul(v[0], v[0])?;
            g.sum(sq)
        };
        let opts = GradCheckOptions {
            samples: Some(7),
            ..Default::default()
        };
        let report = grad_check(f, &[x], &opts).unwrap();
        assert_eq!(report.checked, 7);
    }

    #[test]
    fn non_finite_is_a_numeric_error() {
        let x = Tensor::full(&[2], 1e200);
        let f = |g: &mut Graph, v: &[Var]| {
            let sq = g.mul(v[0], v[0])?;
            g.sum(sq)
        };
        assert!(matches!(
            grad_check(f, &[x], &GradCheckOptions::default()),
            Err(Error::Numeric(_))
        ));
    }
}
