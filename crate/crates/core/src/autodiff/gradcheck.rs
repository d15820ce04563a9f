//! Central finite-difference gradient checking.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    /// max over checked coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|)
    pub max_rel_error: f64,
    /// (input index, flat coordinate) of the worst coordinate
    pub worst: Option<(usize, usize)>,
    /// first coordinate where either side was NaN or infinite
    pub non_finite: Option<(usize, usize)>,
    pub checked: usize,
}

impl GradCheck {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.non_finite.is_none() && self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Checks `f` at a single input point.
pub fn grad_check<F>(mut f: F, point: &Tensor, h: f64) -> Result<GradCheck>
where
    F: FnMut(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(point), h)
}

/// Checks every coordinate of every input.
pub fn grad_check_many<F>(f: F, points: &[Tensor], h: f64) -> Result<GradCheck>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = points
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.len()).map(move |c| (i, c)))
        .collect();
    grad_check_coords(f, points, h, &coords)
}

/// Checks only the listed `(input, flat coordinate)` pairs.
pub fn grad_check_coords<F>(
    mut f: F,
    points: &[Tensor],
    h: f64,
    coords: &[(usize, usize)],
) -> Result<GradCheck>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| graph.leaf(p.clone())).collect();
    let loss = f(&mut graph, &vars)?;
    let grads = graph.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let mut eval = |pts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::untracked();
        let vs: Vec<Var> = pts.iter().map(|p| g.leaf(p.clone())).collect();
        let out = f(&mut g, &vs)?;
        g.value(out).item()
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        non_finite: None,
        checked: 0,
    };
    let mut work = points.to_vec();
    for &(i, c) in coords {
        if i >= points.len() || c >= points[i].len() {
            return Err(Error::Input(format!("grad_check coordinate ({i}, {c}) out of range")));
        }
        let x0 = points[i].data()[c];
        work[i].data_mut()[c] = x0 + h;
        let up = eval(&work)?;
        work[i].data_mut()[c] = x0 - h;
        let down = eval(&work)?;
        work[i].data_mut()[c] = x0;

        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i].data()[c];
        report.checked += 1;
        if !numeric.is_finite() || !a.is_finite() {
            report.non_finite.get_or_insert((i, c));
            continue;
        }
        let err = relative_error(a, numeric);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((i, c));
        }
    }
    Ok(report)
}
