//! Adam with bias correction, 32-bit end to end.

use crate::error::CoreError;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Per-parameter optimizer state. Owned by exactly one caller at a time;
/// `t` advances by one per apply.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(shape: Vec<usize>, hyper: AdamHyper) -> Self {
        Self { m: Tensor::zeros(shape.clone()), v: Tensor::zeros(shape), t: 0, hyper }
    }

    /// One Adam update of `param` by `grad`, in place.
    pub fn apply(&mut self, param: &mut Tensor, grad: &Tensor) -> Result<(), CoreError> {
        if param.shape() != grad.shape() || param.shape() != self.m.shape() {
            return Err(CoreError::ShapeMismatch {
                op: "adam_apply",
                left: param.shape().to_vec(),
                right: grad.shape().to_vec(),
            });
        }
        self.t += 1;
        let h = self.hyper;
        let bc1 = 1.0 - h.beta1.powi(self.t as i32);
        let bc2 = 1.0 - h.beta2.powi(self.t as i32);

        let update = |p: &mut f32, g: f32, m: &mut f32, v: &mut f32| {
            *m = h.beta1 * *m + (1.0 - h.beta1) * g;
            *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= h.lr * m_hat / (v_hat.sqrt() + h.epsilon);
        };

        #[cfg(feature = "parallel")]
        if param.len() >= crate::tensor::kernels::PAR_MIN_WORK {
            use rayon::prelude::*;
            const C: usize = 4096;
            param
                .data_mut()
                .par_chunks_mut(C)
                .zip(grad.data().par_chunks(C))
                .zip(self.m.data_mut().par_chunks_mut(C).zip(self.v.data_mut().par_chunks_mut(C)))
                .for_each(|((pc, gc), (mc, vc))| {
                    for i in 0..pc.len() {
                        update(&mut pc[i], gc[i], &mut mc[i], &mut vc[i]);
                    }
                });
            return Ok(());
        }

        let (pd, gd) = (param.data_mut(), grad.data());
        let (md, vd) = (self.m.data_mut(), self.v.data_mut());
        for i in 0..pd.len() {
            update(&mut pd[i], gd[i], &mut md[i], &mut vd[i]);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_is_a_fixpoint() {
        let mut state = AdamState::new(vec![3], AdamHyper::default());
        let mut param = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let before = param.clone();
        state.apply(&mut param, &Tensor::zeros(vec![3])).unwrap();
        assert_eq!(param, before);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        let mut state = AdamState::new(vec![1], AdamHyper::default());
        let mut param = Tensor::vector(vec![1.0]);
        state.apply(&mut param, &Tensor::vector(vec![1.0])).unwrap();
        // Hand evaluation of the t=1 recurrence: update == lr / (1 + eps).
        assert!((param.data()[0] - (1.0 - 1e-4)).abs() < 1e-7, "{}", param.data()[0]);
    }

    #[test]
    fn two_steps_match_f64_reference() {
        let hyper = AdamHyper::default();
        let mut state = AdamState::new(vec![4], hyper);
        let mut param = Tensor::vector(vec![0.5, -1.5, 2.0, 0.0]);
        let g1 = Tensor::vector(vec![0.3, -0.2, 1.0, 0.01]);
        let g2 = Tensor::vector(vec![-0.1, 0.4, 0.9, -0.02]);

        let mut reference = gear_refmath::RefAdam::new(4, 1e-4, 0.9, 0.999, 1e-8);
        let mut ref_param = gear_refmath::widen(param.data());

        state.apply(&mut param, &g1).unwrap();
        reference.step(&mut ref_param, &gear_refmath::widen(g1.data()));
        state.apply(&mut param, &g2).unwrap();
        reference.step(&mut ref_param, &gear_refmath::widen(g2.data()));

        assert_eq!(state.t, 2);
        for (got, want) in param.data().iter().zip(&ref_param) {
            assert!((*got as f64 - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn apply_is_deterministic() {
        let run = || {
            let mut state = AdamState::new(vec![64], AdamHyper::default());
            let mut param = Tensor::vector((0..64).map(|i| i as f32 * 0.1).collect());
            let grad = Tensor::vector((0..64).map(|i| (i as f32).sin()).collect());
            for _ in 0..10 {
                state.apply(&mut param, &grad).unwrap();
            }
            param
        };
        let a = run();
        let b = run();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut state = AdamState::new(vec![2], AdamHyper::default());
        let mut param = Tensor::vector(vec![1.0, 2.0]);
        let grad = Tensor::vector(vec![1.0]);
        assert!(state.apply(&mut param, &grad).is_err());
    }
}
