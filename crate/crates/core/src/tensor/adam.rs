use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Linear warmup from `init_lr` to `peak_lr`, then inverse-square-root decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub init_lr: f64,
    pub warmup_steps: u64,
}

impl LrSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        let step = step.max(1);
        let warm = self.warmup_steps.max(1);
        if step < warm {
            self.init_lr + (self.peak_lr - self.init_lr) * step as f64 / warm as f64
        } else {
            self.peak_lr * (warm as f64 / step as f64).sqrt()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: LrSchedule,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            schedule: LrSchedule {
                peak_lr: 7e-4,
                init_lr: 1e-7,
                warmup_steps: 4000,
            },
        }
    }
}

/// Optimizer state: step counter plus first/second moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new<'a, I>(config: AdamConfig, shapes: I) -> Self
    where
        I: IntoIterator<Item = &'a [usize]>,
    {
        let (m, v) = shapes
            .into_iter()
            .map(|s| (Tensor::zeros(s.to_vec()), Tensor::zeros(s.to_vec())))
            .unzip();
        AdamState {
            config,
            step: 0,
            m,
            v,
        }
    }

    /// Learning rate that the next call to [`AdamState::step`] will use.
    pub fn next_lr(&self) -> f64 {
        self.config.schedule.lr(self.step + 1)
    }

    /// One bias-corrected Adam update of every parameter.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&[T]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::contract(format!(
                "adam: {} params, {} grads, {} moment buffers",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.len() != g.len() || p.shape() != m.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: vec![g.len()],
                });
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let lr = c.schedule.lr(self.step);
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (ob1, ob2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let step_size = T::from_f64(lr / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let eps = T::from_f64(c.eps);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i];
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j];
                m[j] = b1 * m[j] + ob1 * gj;
                v[j] = b2 * v[j] + ob2 * gj * gj;
                *w -= step_size * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> AdamConfig {
        AdamConfig {
            schedule: LrSchedule {
                peak_lr: 1e-3,
                init_lr: 1e-7,
                warmup_steps: 10,
            },
            ..AdamConfig::default()
        }
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Tensor::new(vec![3], vec![1.0f32, -2.0, 3.0]).unwrap();
        let mut st = AdamState::<f32>::new(config(), [p.shape()]);
        for _ in 0..5 {
            st.step(&mut [&mut p], &[&[0.0; 3]]).unwrap();
        }
        assert_eq!(p.data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn matches_scalar_recurrence() {
        let cfg = config();
        let mut p = Tensor::new(vec![1], vec![0.5f64]).unwrap();
        let mut st = AdamState::<f64>::new(cfg, [p.shape()]);
        let (mut w, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for t in 1..=25u64 {
            let g = 0.3 * w - 0.1;
            st.step(&mut [&mut p], &[&[g]]).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.98 * v + 0.02 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32));
            let vh = v / (1.0 - 0.98f64.powi(t as i32));
            w -= cfg.schedule.lr(t) * mh / (vh.sqrt() + 1e-9);
            assert!((p.data()[0] - w).abs() < 1e-14);
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = config();
        let mut p = Tensor::new(vec![1], vec![0.0f64]).unwrap();
        let mut st = AdamState::<f64>::new(cfg, [p.shape()]);
        st.step(&mut [&mut p], &[&[2.5]]).unwrap();
        let lr = cfg.schedule.lr(1);
        assert!((p.data()[0] + lr).abs() < lr * 1e-8);
    }

    #[test]
    fn schedule_is_continuous_and_positive() {
        let s = LrSchedule {
            peak_lr: 7e-4,
            init_lr: 1e-7,
            warmup_steps: 4000,
        };
        let before = s.init_lr + (s.peak_lr - s.init_lr) * 4000.0 / 4000.0;
        assert!((s.lr(4000) - before).abs() < 1e-9);
        assert!((s.lr(3999) - s.lr(4000)).abs() < 1e-6);
        assert!((s.lr(4001) - s.lr(4000)).abs() < 1e-6);
        for step in [1, 2, 100, 4000, 10_000, 1_000_000] {
            assert!(s.lr(step) > 0.0);
        }
        assert!(s.lr(16_000) < s.lr(4000));
    }

    #[test]
    fn mismatched_grads_are_rejected() {
        let mut p = Tensor::new(vec![2], vec![0.0f32; 2]).unwrap();
        let mut st = AdamState::<f32>::new(config(), [p.shape()]);
        assert!(st.step(&mut [&mut p], &[]).is_err());
        assert!(st.step(&mut [&mut p], &[&[0.0]]).is_err());
    }
}
