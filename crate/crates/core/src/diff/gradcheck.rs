//! Central-difference verification of reverse-mode gradients.

use rand::seq::index::sample;

use super::graph::{Graph, Var};
use super::nn::ParamView;
use super::tensor::{Mat, ParameterSet};
use crate::error::Result;
use crate::rng::chacha;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Denominator floor for the relative error, so near-zero gradients are
/// compared on an absolute scale.
pub const RELATIVE_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Coordinate with the largest error.
    pub worst: usize,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<28} coords={:<5} max_rel_err={:.3e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.checked,
            self.max_rel_error
        )
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

/// Compares `analytic` against central differences of `f` at `point`.
pub fn finite_difference_check<F>(name: &str, f: F, point: &[f64], analytic: &[f64], step: f64, tolerance: f64) -> GradCheckReport
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(point.len(), analytic.len());
    let coords: Vec<usize> = (0..point.len()).collect();
    compare(name, &f, point, analytic, &coords, step, tolerance)
}

fn compare<F>(name: &str, f: &F, point: &[f64], analytic: &[f64], coords: &[usize], step: f64, tolerance: f64) -> GradCheckReport
where
    F: Fn(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    let mut max_err = 0.0_f64;
    let mut worst = 0;
    for &i in coords {
        let orig = x[i];
        x[i] = orig + step;
        let up = f(&x);
        x[i] = orig - step;
        let down = f(&x);
        x[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let err = relative_error(analytic[i], numeric);
        if !(err <= max_err) {
            max_err = err;
            worst = i;
        }
    }
    GradCheckReport {
        name: name.to_string(),
        checked: coords.len(),
        max_rel_error: max_err,
        worst,
        passed: max_err <= tolerance,
    }
}

/// Checks the graph built by `f` with respect to each of `inputs`.
pub fn check_inputs<F>(name: &str, inputs: &[Mat], f: F, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|m| g.input(m.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let mut analytic = Vec::new();
    for (v, m) in vars.iter().zip(inputs) {
        match grads.wrt(*v) {
            Some(d) => analytic.extend_from_slice(&d.data),
            None => analytic.extend(std::iter::repeat(0.0).take(m.len())),
        }
    }
    let point: Vec<f64> = inputs.iter().flat_map(|m| m.data.iter().copied()).collect();
    let eval = |x: &[f64]| -> f64 {
        let mut g = Graph::new();
        let mut offset = 0;
        let vars: Vec<Var> = inputs
            .iter()
            .map(|m| {
                let data = x[offset..offset + m.len()].to_vec();
                offset += m.len();
                g.constant(Mat { rows: m.rows, cols: m.cols, data })
            })
            .collect();
        let l = f(&mut g, &vars).expect("forward succeeded once");
        g.value(l).item()
    };
    Ok(finite_difference_check(name, eval, &point, &analytic, step, tolerance))
}

/// Checks the gradient with respect to parameters. At most `max_coords`
/// coordinates (sampled with `seed`) are perturbed.
pub fn check_params<F>(
    name: &str,
    params: &ParameterSet,
    f: F,
    step: f64,
    tolerance: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, ParamView) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, ParamView::tracked(params, ""))?;
    let grads = g.backward(loss)?.params(&g);
    let index: Vec<(String, usize)> = params
        .iter()
        .flat_map(|(k, t)| (0..t.values.len()).map(move |i| (k.clone(), i)))
        .collect();
    let analytic: Vec<f64> = index
        .iter()
        .map(|(k, i)| grads.get(k).map_or(0.0, |v| v[*i]))
        .collect();
    let point: Vec<f64> = index.iter().map(|(k, i)| params.get(k).unwrap().values[*i]).collect();
    let coords: Vec<usize> = if index.len() <= max_coords {
        (0..index.len()).collect()
    } else {
        let mut v = sample(&mut chacha(seed), index.len(), max_coords).into_vec();
        v.sort_unstable();
        v
    };
    let eval = |x: &[f64]| -> f64 {
        let mut p = params.clone();
        for (j, (k, i)) in index.iter().enumerate() {
            if x[j] != point[j] {
                p.get_mut(k).unwrap().values[*i] = x[j];
            }
        }
        let mut g = Graph::new();
        let l = f(&mut g, ParamView::frozen(&p, "")).expect("forward succeeded once");
        g.value(l).item()
    };
    Ok(compare(name, &eval, &point, &analytic, &coords, step, tolerance))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let r = finite_difference_check("x^2", |x| x[0] * x[0], &[3.0], &[6.0], 1e-5, 1e-6);
        assert!(r.passed, "{r}");
        let r = check_inputs(
            "x*x",
            &[Mat::scalar(3.0)],
            |g, v| g.mul(v[0], v[0]),
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(r.passed);
    }

    #[test]
    fn wrong_gradient_fails() {
        let r = finite_difference_check("bad", |x| x[0] * x[0], &[3.0], &[5.0], 1e-5, 1e-4);
        assert!(!r.passed);
        assert!(r.max_rel_error > 0.1);
    }

    #[test]
    fn softmax_cross_entropy_composite() {
        let logits = Mat::row_vector(vec![0.3, -1.2, 2.0, 0.1]);
        let r = check_inputs(
            "softmax-ce",
            &[logits],
            |g, v| {
                let p = g.softmax_rows(v[0]);
                crate::diff::loss::cross_entropy_graph(g, p, &[2])
            },
            DEFAULT_STEP,
            DEFAULT_TOLERANCE,
        )
        .unwrap();
        assert!(r.passed, "{r}");
    }
}
