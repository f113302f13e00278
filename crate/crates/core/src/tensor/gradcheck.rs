use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Result, Tensor, TensorError, Var};

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `max_i |analytic_i - numeric_i| / max(1, |numeric_i|)`.
    pub max_rel_error: f64,
    /// Input coordinates that were moved away from a relu/L1 kink.
    pub resampled: Vec<usize>,
    /// The point at which the check was finally evaluated.
    pub point: Tensor,
}

const MAX_RESAMPLES: usize = 32;

fn eval<F>(f: &F, x: &Tensor) -> Result<(Graph, Var, Var)>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let leaf = g.leaf(x.clone());
    let root = f(&mut g, leaf)?;
    if g.value(root).len() != 1 {
        return Err(TensorError::NonScalarRoot(g.shape(root).to_vec()));
    }
    Ok((g, leaf, root))
}

/// Compares reverse-mode gradients of scalar `f` at `x` against central
/// differences with step `eps`.
///
/// Inputs sitting within `100 * eps` of a relu or L1 kink are resampled
/// first (coordinates of `x` directly, or all of `x` when the kink is deeper
/// in the graph); the moved coordinates are listed in the report.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let mut point = x.clone();
    let mut resampled = Vec::new();
    let margin = 100.0 * eps;
    let mut attempt = 0;
    let (graph, leaf, root) = loop {
        let (graph, leaf, root) = eval(&f, &point)?;
        let kinks = graph.kink_inputs(margin);
        if kinks.is_empty() || attempt == MAX_RESAMPLES {
            break (graph, leaf, root);
        }
        attempt += 1;
        let direct: Vec<usize> = kinks
            .iter()
            .filter(|(v, _)| *v == leaf)
            .flat_map(|(_, idx)| idx.iter().copied())
            .collect();
        let data = point.data_mut();
        if direct.is_empty() {
            for v in data.iter_mut() {
                *v += rng.random_range(-0.05..0.05);
            }
            resampled.extend(0..data.len());
        } else {
            for &i in &direct {
                let mag = rng.random_range(0.1..1.0);
                data[i] = if rng.random_bool(0.5) { mag } else { -mag };
            }
            resampled.extend(direct);
        }
    };
    resampled.sort_unstable();
    resampled.dedup();

    let grads = graph.backward(root)?;
    let analytic = grads
        .wrt(leaf)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; point.len()]);
    let mut max_rel_error: f64 = 0.0;
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = point.data()[i];
        probe.data_mut()[i] = orig + eps;
        let (g1, _, r1) = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let (g2, _, r2) = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (g1.value(r1).item() - g2.value(r2).item()) / (2.0 * eps);
        let rel = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        max_rel_error = max_rel_error.max(rel);
    }
    Ok(GradCheckReport {
        max_rel_error,
        resampled,
        point,
    })
}
