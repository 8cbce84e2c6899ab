use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Float;
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Adam with bias correction. Moments are kept per parameter in store order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    /// Steps skipped because of non-finite gradients.
    pub skipped: u64,
}

impl<T: Float> Adam<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = params.iter().map(|(_, p)| vec![T::zero(); p.tensor.len()]).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
            skipped: 0,
        }
    }

    /// Applies one update. Returns `false` (and changes nothing) when any
    /// gradient is non-finite. Frozen parameters are never touched.
    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[Vec<T>], lr: f64) -> Result<bool> {
        if grads.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            self.skipped += 1;
            log::warn!("non-finite gradient at step {}; update skipped", self.step + 1);
            return Ok(false);
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let (one, eps) = (T::one(), T::from_f64_lossy(self.eps));
        let step_size = T::from_f64_lossy(lr / c1);
        let c2_sqrt = T::from_f64_lossy(c2.sqrt());
        for (i, (_, p)) in params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, w) in p.tensor.data_mut().iter_mut().enumerate() {
                let g = grads[i][k];
                m[k] = b1 * m[k] + (one - b1) * g;
                v[k] = b2 * v[k] + (one - b2) * g * g;
                *w -= step_size * m[k] / (v[k].sqrt() / c2_sqrt + eps);
            }
        }
        Ok(true)
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Float>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| {
            let g = g.to_f64_lossy();
            g * g
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::from_f64_lossy(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            *g *= s;
        }
    }
    norm
}

/// Halves `lr` when the latest dev F1 is below the previous one, with a
/// floor of `min_lr`.
pub fn lr_schedule_update(f1_history: &[f64], lr: f64, min_lr: f64) -> f64 {
    match f1_history {
        [.., prev, last] if last < prev => (lr / 2.0).max(min_lr),
        _ => lr,
    }
}

/// One inverted-dropout mask over the embedding width, shared by every
/// position of an example.
pub fn variational_mask<T: Float, R: Rng>(rng: &mut R, width: usize, rate: f64) -> Result<Vec<T>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
    }
    let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
    Ok((0..width)
        .map(|_| if rate > 0.0 && rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{Graph, Tensor};

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::vector(vec![1.0, -2.0, 0.5]));
        s.insert("e", Tensor::vector(vec![3.0, 4.0]));
        s.set_trainable("e", false).unwrap();
        s
    }

    #[test]
    fn first_step_is_sign_scaled() {
        let mut s = store();
        let mut adam = Adam::new(&s);
        let g = vec![vec![0.3, -4.0, 1e-3], vec![1.0, 1.0]];
        adam.update(&mut s, &g, 1e-3).unwrap();
        let before = [1.0, -2.0, 0.5];
        for k in 0..3 {
            let want = before[k] - 1e-3 * g[0][k] / (g[0][k].abs() + 1e-8);
            assert!((s.get("a").unwrap().data()[k] - want).abs() < 1e-12);
        }
        assert_eq!(s.get("e").unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn zero_grads_keep_params_and_decay_moments() {
        let mut s = store();
        let mut adam = Adam::new(&s);
        adam.update(&mut s, &[vec![1.0, 1.0, 1.0], vec![0.0, 0.0]], 1e-3).unwrap();
        let snapshot = s.get("a").unwrap().clone();
        let m_before = adam.m[0].clone();
        adam.update(&mut s, &[vec![0.0; 3], vec![0.0; 2]], 0.0).unwrap();
        assert_eq!(s.get("a").unwrap(), &snapshot);
        for (a, b) in adam.m[0].iter().zip(&m_before) {
            assert!((a - 0.9 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_step_is_skipped() {
        let mut s = store();
        let mut adam = Adam::new(&s);
        let ok = adam.update(&mut s, &[vec![f64::NAN, 0.0, 0.0], vec![0.0, 0.0]], 1e-3).unwrap();
        assert!(!ok);
        assert_eq!((adam.step, adam.skipped), (0, 1));
        assert_eq!(s, store());
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_schedule_update(&[71.0, 70.5], 1e-3, 1e-6), 5e-4);
        assert_eq!(lr_schedule_update(&[70.0, 71.0, 72.0], 1e-3, 1e-6), 1e-3);
        assert_eq!(lr_schedule_update(&[70.0], 1e-3, 1e-6), 1e-3);
        let mut lr = 1e-3;
        for _ in 0..20 {
            lr = lr_schedule_update(&[2.0, 1.0], lr, 1e-6);
        }
        assert_eq!(lr, 1e-6);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![vec![3.0f64, 0.0], vec![4.0]];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        let mut small = vec![vec![0.1f64]];
        clip_global_norm(&mut small, 5.0);
        assert_eq!(small[0][0], 0.1);
    }

    #[test]
    fn dropout_mask_is_shared_and_scaled() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mask: Vec<f64> = variational_mask(&mut rng, 64, 0.5).unwrap();
        assert!(mask.iter().all(|&m| m == 0.0 || m == 2.0));
        assert!(mask.contains(&0.0) && mask.contains(&2.0));
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(vec![7, 64], 1.0));
        let y = g.dropout(x, &mask).unwrap();
        for (c, &m) in mask.iter().enumerate() {
            for r in 0..7 {
                assert_eq!(g.value(y).at(r, c), m);
            }
        }
        let id: Vec<f64> = variational_mask(&mut rng, 5, 0.0).unwrap();
        assert_eq!(id, vec![1.0; 5]);
        assert!(variational_mask::<f64, _>(&mut rng, 5, 1.0).is_err());
        assert!(variational_mask::<f64, _>(&mut rng, 5, -0.1).is_err());
    }
}
