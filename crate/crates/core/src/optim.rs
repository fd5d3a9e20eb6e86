//! Adam optimizer and global-norm gradient clipping.

use crate::error::{CoreError, Result};
use crate::nn::Params;
use crate::tape::Arr;

/// Adam with bias correction. Moment tensors are addressed by parameter
/// index, in store order, so the state serializes alongside the parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of steps applied so far (drives bias correction).
    pub t: u64,
    moments: Vec<(Arr, Arr)>,
}

impl Adam {
    pub fn new(params: &Params, beta1: f64, beta2: f64) -> Self {
        let moments = (0..params.len())
            .map(|i| {
                let shape = params.value_at(i).raw_dim();
                (Arr::zeros(shape.clone()), Arr::zeros(shape))
            })
            .collect();
        Adam { beta1, beta2, eps: 1e-8, t: 0, moments }
    }

    pub fn moments(&self) -> &[(Arr, Arr)] {
        &self.moments
    }

    /// Restores serialized state. Shapes must line up with `params`.
    pub fn restore(&mut self, t: u64, moments: Vec<(Arr, Arr)>) -> Result<()> {
        if moments.len() != self.moments.len()
            || moments
                .iter()
                .zip(&self.moments)
                .any(|(a, b)| a.0.shape() != b.0.shape() || a.1.shape() != b.1.shape())
        {
            return Err(CoreError::Shape(
                "optimizer state does not match the parameter set".into(),
            ));
        }
        self.t = t;
        self.moments = moments;
        Ok(())
    }

    /// One update with learning rate `lr`. Entries of `grads` that are `None`
    /// (parameters the loss never touched) are skipped entirely.
    ///
    /// Fails with [`CoreError::Numerical`] before mutating anything if a
    /// gradient is non-finite.
    pub fn step(&mut self, params: &mut Params, grads: &[Option<Arr>], lr: f64) -> Result<()> {
        assert_eq!(grads.len(), params.len(), "one gradient slot per parameter");
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(CoreError::Numerical(format!(
                        "non-finite gradient for parameter {}",
                        params.name(i)
                    )));
                }
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = &mut self.moments[i];
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let p = params.value_mut(i);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + self.eps);
            });
        }
        Ok(())
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the pre-clip norm. `max_norm <= 0` disables clipping.
pub fn clip_global_norm(grads: &mut [Option<Arr>], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter().flatten() {
        sq += g.iter().map(|v| v * v).sum::<f64>();
    }
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    norm
}
