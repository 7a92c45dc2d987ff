/// Outcome of one optimizer call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient entry was NaN or infinite; parameters and moments are untouched.
    SkippedNonFinite,
}

/// Bias-corrected Adam state.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// First moment (mean of gradients).
    pub m: Vec<f64>,
    /// Second moment (mean of squared gradients).
    pub v: Vec<f64>,
    /// Number of skipped updates.
    pub incidents: u64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self::with_hyper(n_params, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(n_params: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            incidents: 0,
        }
    }

    /// One descent step on `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], learning_rate: f64) -> StepOutcome {
        assert_eq!(
            params.len(),
            grads.len(),
            "parameter/gradient length mismatch"
        );
        assert_eq!(
            params.len(),
            self.m.len(),
            "optimizer state has wrong shape"
        );
        if grads.iter().any(|g| !g.is_finite()) {
            self.incidents += 1;
            log::warn!(
                "adam: non-finite gradient at step {}, update skipped",
                self.step + 1
            );
            return StepOutcome::SkippedNonFinite;
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= learning_rate * m_hat / (v_hat.sqrt() + self.eps);
        }
        StepOutcome::Applied
    }
}
