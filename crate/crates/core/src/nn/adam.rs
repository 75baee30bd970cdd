use crate::error::{check_dim, Result};

/// Bias-corrected Adam over an ordered list of parameter slices.
///
/// The slice order passed to [`AdamState::step`] must match the sizes the
/// state was created with.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One descent step: `params -= lr · m̂ / (√v̂ + ε)`.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[&[f64]]) -> Result<()> {
        check_dim(self.first.len(), params.len())?;
        check_dim(self.first.len(), grads.len())?;
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            check_dim(self.first[i].len(), p.len())?;
            check_dim(self.first[i].len(), g.len())?;
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let mut st = AdamState::new(0.01, &[3]);
        let mut p = vec![1.0, -2.0, 0.5];
        for _ in 0..10 {
            st.step(vec![p.as_mut_slice()], &[&[0.0, 0.0, 0.0]])
                .unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        // m̂ = g, v̂ = g², so Δ = -lr·g/(|g| + ε).
        let lr = 0.001;
        let g = [0.3, -2.0, 1e-3];
        let mut st = AdamState::new(lr, &[3]);
        let mut p = vec![0.0; 3];
        st.step(vec![p.as_mut_slice()], &[&g]).unwrap();
        for j in 0..3 {
            let expect = -lr * g[j] / (g[j].abs() + 1e-8);
            assert!((p[j] - expect).abs() < 1e-15, "{} vs {expect}", p[j]);
        }
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let lr = 0.01;
        let mut st = AdamState::new(lr, &[2]);
        let mut p = vec![0.0, 0.0];
        let mut prev = p.clone();
        for _ in 0..2000 {
            st.step(vec![p.as_mut_slice()], &[&[3.0, -0.02]]).unwrap();
            let d0 = (p[0] - prev[0]).abs();
            let d1 = (p[1] - prev[1]).abs();
            assert!((d0 - lr).abs() < 1e-6 && (d1 - lr).abs() < 1e-5);
            prev = p.clone();
        }
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut st = AdamState::new(0.1, &[2]);
        let mut p = vec![0.0; 3];
        assert!(st
            .step(vec![p.as_mut_slice()], &[&[0.0, 0.0, 0.0]])
            .is_err());
        assert_eq!(st.steps(), 0);
    }
}
