//! Adam with bias correction, keyed by parameter name so optimizer state
//! survives independent of parameter collection order.

use std::collections::HashMap;

use ndarray::ArrayD;

use super::Param;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 5e-5, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: ArrayD<f64>,
    v: ArrayD<f64>,
}

/// One optimizer instance per parameter group (generator, each
/// discriminator) so step counters and moments never mix.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    state: HashMap<String, Moments>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, state: HashMap::new(), t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Apply one update from the accumulated gradients.
    pub fn step(&mut self, params: Vec<&mut Param>) {
        self.t += 1;
        let t = self.t as i32;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for p in params {
            let entry = self.state.entry(p.name.clone()).or_insert_with(|| Moments {
                m: ArrayD::zeros(p.value.raw_dim()),
                v: ArrayD::zeros(p.value.raw_dim()),
            });
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(&mut entry.m)
                .and(&mut entry.v)
                .for_each(|w, &g, m, v| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *w -= c.learning_rate * mhat / (vhat.sqrt() + c.epsilon);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut p = Param::zeros("p", &[4]);
        p.value.fill(0.7);
        p.grad.fill(1.0);
        let before = p.value.clone();
        let mut opt = Adam::new(AdamConfig { learning_rate: 0.0, ..Default::default() });
        opt.step(vec![&mut p]);
        assert_eq!(p.value, before);
    }

    #[test]
    fn descends_a_quadratic() {
        // minimize (w - 3)^2
        let mut p = Param::zeros("w", &[1]);
        let mut opt = Adam::new(AdamConfig { learning_rate: 0.1, ..Default::default() });
        for _ in 0..500 {
            p.grad[[0]] = 2.0 * (p.value[[0]] - 3.0);
            opt.step(vec![&mut p]);
        }
        assert!((p.value[[0]] - 3.0).abs() < 1e-3);
    }

    #[test]
    fn first_step_magnitude_is_learning_rate() {
        // with bias correction the first update is ±lr for any gradient scale
        let mut p = Param::zeros("w", &[1]);
        p.grad[[0]] = 1e-3;
        let mut opt = Adam::new(AdamConfig { learning_rate: 0.01, ..Default::default() });
        opt.step(vec![&mut p]);
        assert!((p.value[[0]] + 0.01).abs() < 1e-6);
    }
}
