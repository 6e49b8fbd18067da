use rand::seq::index;

use super::params::ParamStore;
use crate::rng;

/// Default number of coordinates probed per check.
pub const DEFAULT_COORDINATES: usize = 200;

/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_offset: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
    /// Coordinates skipped because a probe left the differentiable region.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Compares `analytic` (flat, in store order) against central differences
/// of `loss` on a random subset of `min(coordinates, total)` coordinates.
pub fn finite_diff_check<F>(
    params: &ParamStore<f64>,
    analytic: &[f64],
    mut loss: F,
    eps: f64,
    coordinates: usize,
    seed: u64,
) -> GradCheckReport
where
    F: FnMut(&ParamStore<f64>) -> f64,
{
    finite_diff_check_piecewise(params, analytic, |p| (loss(p), ()), eps, coordinates, seed)
}

/// Like [`finite_diff_check`] for piecewise-smooth losses. `loss` also
/// returns a region tag (for instance a ReLU activation pattern); a
/// coordinate whose `±eps` probes land in a different region than the
/// unperturbed point straddles a kink and is skipped.
pub fn finite_diff_check_piecewise<F, R>(
    params: &ParamStore<f64>,
    analytic: &[f64],
    loss: F,
    eps: f64,
    coordinates: usize,
    seed: u64,
) -> GradCheckReport
where
    F: FnMut(&ParamStore<f64>) -> (f64, R),
    R: PartialEq,
{
    let probes = numeric_gradients_piecewise(params, loss, eps, coordinates, seed);
    compare_gradients(params, analytic, &probes)
}

/// One probed coordinate: its flat index and the central difference, or
/// `None` when a probe left the differentiable region.
pub type Probe = (usize, Option<f64>);

/// Central differences at `coordinates` randomly chosen flat indices (all of
/// them if there are fewer).
pub fn numeric_gradients_piecewise<F, R>(
    params: &ParamStore<f64>,
    mut loss: F,
    eps: f64,
    coordinates: usize,
    seed: u64,
) -> Vec<Probe>
where
    F: FnMut(&ParamStore<f64>) -> (f64, R),
    R: PartialEq,
{
    let total = params.num_scalars();
    let picked: Vec<usize> = if coordinates >= total {
        (0..total).collect()
    } else {
        let mut rng = rng::seeded(rng::derive_seed(seed, rng::stream::GRADCHECK));
        let mut v = index::sample(&mut rng, total, coordinates).into_vec();
        v.sort_unstable();
        v
    };

    let mut probe = params.clone();
    let (_, base_region) = loss(&probe);
    picked
        .into_iter()
        .map(|k| {
            let (pi, off) = probe.locate(k).expect("coordinate in range");
            let original = probe.value(pi).as_slice().expect("standard layout")[off];
            probe.value_mut(pi).as_slice_mut().unwrap()[off] = original + eps;
            let (plus, plus_region) = loss(&probe);
            probe.value_mut(pi).as_slice_mut().unwrap()[off] = original - eps;
            let (minus, minus_region) = loss(&probe);
            probe.value_mut(pi).as_slice_mut().unwrap()[off] = original;
            let smooth = plus_region == base_region && minus_region == base_region;
            (k, smooth.then(|| (plus - minus) / (2.0 * eps)))
        })
        .collect()
}

pub fn compare_gradients(
    params: &ParamStore<f64>,
    analytic: &[f64],
    probes: &[Probe],
) -> GradCheckReport {
    assert_eq!(
        analytic.len(),
        params.num_scalars(),
        "analytic gradient length"
    );
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_offset: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
        skipped: 0,
    };
    for &(k, numeric) in probes {
        let Some(numeric) = numeric else {
            report.skipped += 1;
            continue;
        };
        report.checked += 1;
        let err = relative_error(analytic[k], numeric);
        if err > report.max_rel_error || report.worst_param.is_empty() {
            let (pi, off) = params.locate(k).expect("coordinate in range");
            report.max_rel_error = err.max(report.max_rel_error);
            report.worst_param = params.get(pi).name.clone();
            report.worst_offset = off;
            report.analytic_at_worst = analytic[k];
            report.numeric_at_worst = numeric;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn linear_loss(p: &ParamStore<f64>) -> f64 {
        // L = Σ_i c_i (w · x_i + b)
        let xs = [[0.3, -1.2, 0.5], [1.0, 0.2, -0.7]];
        let cs = [0.8, -1.5];
        let w = p.value(0);
        let b = p.value(1)[[0, 0]];
        xs.iter()
            .zip(cs)
            .map(|(x, c)| c * (w[[0, 0]] * x[0] + w[[0, 1]] * x[1] + w[[0, 2]] * x[2] + b))
            .sum()
    }

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::default();
        s.push("w", array![[0.1, 0.2, 0.3]]);
        s.push("b", array![[0.5]]);
        s
    }

    fn exact_grads() -> Vec<f64> {
        let (x0, x1) = ([0.3, -1.2, 0.5], [1.0, 0.2, -0.7]);
        let (c0, c1) = (0.8, -1.5);
        vec![
            c0 * x0[0] + c1 * x1[0],
            c0 * x0[1] + c1 * x1[1],
            c0 * x0[2] + c1 * x1[2],
            c0 + c1,
        ]
    }

    #[test]
    fn exact_linear_gradients_pass() {
        let r = finite_diff_check(&store(), &exact_grads(), linear_loss, 1e-5, 200, 0);
        assert_eq!(r.checked, 4);
        assert!(r.max_rel_error < 1e-10, "{r:?}");
    }

    #[test]
    fn corrupted_gradient_fails() {
        let mut g = exact_grads();
        g[1] = -g[1];
        let r = finite_diff_check(&store(), &g, linear_loss, 1e-5, 200, 0);
        assert!(r.max_rel_error > 1e-2);
        assert_eq!(r.worst_param, "w");
        assert_eq!(r.worst_offset, 1);
    }

    #[test]
    fn subset_size() {
        let r = finite_diff_check(&store(), &exact_grads(), linear_loss, 1e-5, 2, 0);
        assert_eq!(r.checked, 2);
    }

    #[test]
    fn kinks_are_skipped() {
        let mut s = ParamStore::<f64>::default();
        s.push("x", array![[0.0, 2.0]]);
        // relu(x0) + x1², analytic gradient at the kink taken as 0
        let f = |p: &ParamStore<f64>| {
            let v = p.value(0);
            (v[[0, 0]].max(0.0) + v[[0, 1]] * v[[0, 1]], v[[0, 0]] > 0.0)
        };
        let r = finite_diff_check_piecewise(&s, &[0.0, 4.0], f, 1e-5, 200, 0);
        assert_eq!((r.checked, r.skipped), (1, 1));
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 0.5) - 0.5 / 1.5).abs() < 1e-15);
    }
}
