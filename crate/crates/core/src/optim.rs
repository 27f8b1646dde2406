//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Parameter(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Parameter(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Parameter(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// First and second moments for each parameter, plus the shared step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F: Real = f32> {
    first: Vec<Vec<F>>,
    second: Vec<Vec<F>>,
    step: u64,
}

impl<F: Real> AdamState<F> {
    /// Zeroed moments sized after `params`.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<F>>) -> Self {
        let sizes: Vec<usize> = params.into_iter().map(Tensor::numel).collect();
        AdamState {
            first: sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
            second: sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &[F] {
        &self.first[i]
    }

    pub fn second_moment(&self, i: usize) -> &[F] {
        &self.second[i]
    }
}

/// One Adam update of every parameter against the matching gradient.
///
/// `grads[i] = None` means the parameter did not take part in the loss; its
/// moments still decay as for a zero gradient.
pub fn adam_step<F: Real>(
    params: &mut [&mut Tensor<F>],
    grads: &[Option<&[F]>],
    state: &mut AdamState<F>,
    cfg: &AdamConfig,
) -> Result<()> {
    cfg.validate()?;
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::dim(
            "adam_step",
            format!(
                "{} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                state.first.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let n = p.numel();
        if state.first[i].len() != n || g.is_some_and(|g| g.len() != n) {
            return Err(Error::dim(
                "adam_step",
                format!("parameter {i} has {n} values but gradient or moments disagree"),
            ));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (F::from_f64(cfg.beta1), F::from_f64(cfg.beta2));
    let (c1, c2) = (F::one() - b1, F::one() - b2);
    let step_size = F::from_f64(cfg.lr / (1.0 - cfg.beta1.powi(t)));
    let corr2 = F::from_f64(1.0 / (1.0 - cfg.beta2.powi(t)));
    let eps = F::from_f64(cfg.eps);

    for (i, p) in params.iter_mut().enumerate() {
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        let g = grads[i];
        for (k, w) in p.data_mut().iter_mut().enumerate() {
            let gk = g.map_or(F::zero(), |g| g[k]);
            m[k] = b1 * m[k] + c1 * gk;
            v[k] = b2 * v[k] + c2 * gk * gk;
            *w -= step_size * m[k] / ((v[k] * corr2).sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Tensor::<f32>::from_fn([3, 2], |i| i as f32);
        let before = p.clone();
        let mut st = AdamState::new([&p]);
        let zeros = vec![0.0f32; 6];
        adam_step(&mut [&mut p], &[Some(&zeros)], &mut st, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so the update is lr·g/(|g|+eps) ≈ lr.
        let mut p = Tensor::<f64>::scalar(1.0);
        let mut st = AdamState::new([&p]);
        adam_step(&mut [&mut p], &[Some(&[1.0])], &mut st, &AdamConfig::with_lr(0.001)).unwrap();
        let want = 1.0 - 0.001 / (1.0 + 1e-8);
        assert!((p.item() - want).abs() < 1e-12);
    }

    #[test]
    fn matches_hand_recurrence_over_several_steps() {
        let cfg = AdamConfig { lr: 0.01, beta1: 0.8, beta2: 0.9, eps: 1e-6 };
        let grads = [0.5, -1.0, 2.0, 0.25];
        let mut p = Tensor::<f64>::scalar(0.3);
        let mut st = AdamState::new([&p]);
        let (mut w, mut m, mut v) = (0.3f64, 0.0f64, 0.0f64);
        for (t, g) in grads.iter().enumerate() {
            adam_step(&mut [&mut p], &[Some(&[*g])], &mut st, &cfg).unwrap();
            m = 0.8 * m + 0.2 * g;
            v = 0.9 * v + 0.1 * g * g;
            let mh = m / (1.0 - 0.8f64.powi(t as i32 + 1));
            let vh = v / (1.0 - 0.9f64.powi(t as i32 + 1));
            w -= 0.01 * mh / (vh.sqrt() + 1e-6);
            assert!((p.item() - w).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_pairs_evolve_identically() {
        let mut a = Tensor::<f32>::from_fn([4], |i| i as f32 * 0.1);
        let mut b = a.clone();
        let mut st = AdamState::new([&a, &b]);
        for step in 0..100 {
            let g: Vec<f32> = (0..4).map(|i| ((step * 7 + i) % 5) as f32 - 2.0).collect();
            adam_step(&mut [&mut a, &mut b], &[Some(&g), Some(&g)], &mut st, &AdamConfig::default()).unwrap();
        }
        assert_eq!(a, b);
        assert_eq!(st.step(), 100);
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let mut p = Tensor::<f32>::zeros([3]);
        let mut st = AdamState::new([&p]);
        let g = [1.0f32; 2];
        let err = adam_step(&mut [&mut p], &[Some(&g)], &mut st, &AdamConfig::default());
        assert!(matches!(err, Err(Error::Dimension { .. })));
        let err = adam_step(&mut [&mut p], &[], &mut st, &AdamConfig::default());
        assert!(matches!(err, Err(Error::Dimension { .. })));
        assert_eq!(st.step(), 0);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(AdamConfig::with_lr(-1.0).validate().is_err());
        assert!(AdamConfig { beta1: 1.0, ..Default::default() }.validate().is_err());
        assert!(AdamConfig { eps: 0.0, ..Default::default() }.validate().is_err());
        assert!(AdamConfig::with_lr(0.0).validate().is_ok());
    }
}
