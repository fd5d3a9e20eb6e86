//! Finite-difference verification of tape gradients.
//!
//! Used by the test suites: analytic gradients from [`Tape::backward`] are
//! compared against central differences of the same scalar loss. The
//! relative-error denominator is floored so that near-zero gradients (where
//! finite differences are all rounding noise) do not register as spurious
//! failures.
//!
//! [`Tape::backward`]: crate::tape::Tape::backward

use crate::nn::Params;
use crate::tape::Arr;
use rand::Rng;

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckStats {
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates whose relative error was within tolerance.
    pub within: usize,
    /// Largest relative error observed.
    pub worst: f64,
}

impl GradCheckStats {
    pub fn pass_fraction(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.within as f64 / self.checked as f64
        }
    }
}

/// Compares analytic gradients against central finite differences at the
/// given `(parameter index, element index)` coordinates.
///
/// * `loss` evaluates the scalar objective at the current parameters.
/// * `analytic` returns one gradient slot per parameter (as produced by a
///   backward pass); `None` counts as an all-zero gradient.
/// * `h` is the perturbation step, `tol` the relative-error threshold, and
///   `floor` the denominator floor described in the module docs.
pub fn check_coords(
    params: &mut Params,
    coords: &[(usize, usize)],
    h: f64,
    tol: f64,
    floor: f64,
    loss: &mut dyn FnMut(&Params) -> f64,
    analytic: &mut dyn FnMut(&Params) -> Vec<Option<Arr>>,
) -> GradCheckStats {
    let grads = analytic(params);
    let mut stats = GradCheckStats { checked: 0, within: 0, worst: 0.0 };
    for &(pi, ei) in coords {
        let a = grads[pi]
            .as_ref()
            .map_or(0.0, |g| g.as_slice().expect("standard layout")[ei]);
        params.nudge(pi, ei, h);
        let up = loss(params);
        params.nudge(pi, ei, -2.0 * h);
        let down = loss(params);
        params.nudge(pi, ei, h);
        let fd = (up - down) / (2.0 * h);
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
        stats.checked += 1;
        if rel <= tol {
            stats.within += 1;
        }
        stats.worst = stats.worst.max(rel);
    }
    stats
}

/// Uniformly samples `n` parameter coordinates (with replacement) across all
/// tensors of the store.
pub fn sample_coords<R: Rng>(params: &Params, n: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let sizes: Vec<usize> = (0..params.len()).map(|i| params.value_at(i).len()).collect();
    let total: usize = sizes.iter().sum();
    assert!(total > 0, "cannot sample an empty parameter store");
    (0..n)
        .map(|_| {
            let mut flat = rng.gen_range(0..total);
            for (pi, size) in sizes.iter().enumerate() {
                if flat < *size {
                    return (pi, flat);
                }
                flat -= size;
            }
            unreachable!("flat index within total")
        })
        .collect()
}

/// Every coordinate of every tensor, for exhaustive small-op checks.
pub fn all_coords(params: &Params) -> Vec<(usize, usize)> {
    (0..params.len())
        .flat_map(|pi| (0..params.value_at(pi).len()).map(move |ei| (pi, ei)))
        .collect()
}
