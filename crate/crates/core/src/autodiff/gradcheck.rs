//! Central-difference gradient checking in 64-bit precision.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LeafReport {
    pub index: usize,
    pub max_rel_error: f64,
    /// Flat position of the worst coordinate.
    pub worst: usize,
    pub failed: bool,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub leaves: Vec<LeafReport>,
    pub tol: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.leaves.iter().all(|l| !l.failed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.leaves.iter().map(|l| l.max_rel_error).fold(0.0, f64::max)
    }
}

/// `|a - n| / max(1, |a| + |n|)`
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1.0)
}

fn evaluate<F>(build: &F, leaves: &[Tensor<f64>]) -> Result<(Graph<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::checked();
    let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    if g.value(loss).len() != 1 {
        return Err(Error::NonScalarLoss(g.shape(loss).to_vec()));
    }
    Ok((g, vars, loss))
}

/// Compares the analytic gradient of `build` against central differences for
/// every coordinate of every leaf.
pub fn grad_check<F>(build: F, leaves: &[Tensor<f64>], eps: f64, tol: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let (mut g, vars, loss) = evaluate(&build, leaves)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(leaves)
        .map(|(v, t)| g.grad(*v).map(|x| x.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    drop(g);

    let mut perturbed = leaves.to_vec();
    let mut reports = Vec::with_capacity(leaves.len());
    for (li, an) in analytic.iter().enumerate() {
        let mut worst = (0.0f64, 0usize);
        for k in 0..leaves[li].len() {
            let orig = leaves[li].data()[k];
            perturbed[li].data_mut()[k] = orig + eps;
            let up = {
                let (g, _, loss) = evaluate(&build, &perturbed)?;
                g.data(loss)[0]
            };
            perturbed[li].data_mut()[k] = orig - eps;
            let down = {
                let (g, _, loss) = evaluate(&build, &perturbed)?;
                g.data(loss)[0]
            };
            perturbed[li].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = rel_error(an[k], numeric);
            if err > worst.0 {
                worst = (err, k);
            }
        }
        reports.push(LeafReport {
            index: li,
            max_rel_error: worst.0,
            worst: worst.1,
            failed: worst.0 > tol,
        });
    }
    Ok(GradReport { leaves: reports, tol })
}
