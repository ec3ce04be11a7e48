//! Adaptive-moment optimizer with decoupled weight decay, global-norm
//! gradient clipping, and the epoch-level learning-rate schedules.

use std::collections::BTreeMap;

use crate::config::LrSchedule;
use crate::tensor::Tensor;

pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    steps: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, steps: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update over every parameter present in `grads`. Weight decay is
    /// decoupled: applied directly to the parameter, scaled by the learning
    /// rate, not mixed into the moments.
    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Tensor>, lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);

        for (name, g) in grads {
            let p = params.get_mut(name).unwrap_or_else(|| panic!("gradient for unknown parameter {name}"));
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));

            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..g.numel() {
                let gi = g.data()[i];
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * pd[i]);
            }
        }
    }
}

/// Scale all gradients so their joint L2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm_sq: f64 = grads.values().flat_map(|t| t.data()).map(|v| v * v).sum();
    let norm = norm_sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for t in grads.values_mut() {
            for v in t.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// Learning rate for an epoch under the configured schedule.
pub fn lr_at_epoch(schedule: &LrSchedule, base_lr: f64, epoch: usize) -> f64 {
    match schedule {
        LrSchedule::Fixed => base_lr,
        LrSchedule::CyclicalTriangular { base, max, period } => {
            // triangle wave: rise over `period` epochs, fall over the next
            let phase = (epoch % (2 * period)) as f64 / *period as f64;
            let frac = if phase <= 1.0 { phase } else { 2.0 - phase };
            base + (max - base) * frac
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(v: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("w".to_string(), Tensor::scalar(v))])
    }

    #[test]
    fn step_moves_against_gradient() {
        let mut params = single_param(1.0);
        let grads = single_param(0.5);
        let mut opt = AdamW::new(0.0);
        opt.step(&mut params, &grads, 0.1);
        assert!(params["w"].item() < 1.0);
    }

    #[test]
    fn tiny_learning_rate_leaves_params_nearly_unchanged() {
        let mut params = single_param(1.0);
        let grads = single_param(123.0);
        let mut opt = AdamW::new(0.0);
        let lr = 1e-12;
        opt.step(&mut params, &grads, lr);
        assert!((params["w"].item() - 1.0).abs() <= 2.0 * lr, "update bounded by O(lr)");
    }

    #[test]
    fn weight_decay_shrinks_without_gradient() {
        let mut params = single_param(2.0);
        let grads = single_param(0.0);
        let mut opt = AdamW::new(0.1);
        opt.step(&mut params, &grads, 0.5);
        // pure decay: p -= lr·wd·p = 2 − 0.5·0.1·2
        assert!((params["w"].item() - 1.9).abs() < 1e-12);
    }

    #[test]
    fn clip_rescales_only_above_threshold() {
        let mut grads = BTreeMap::from([
            ("a".to_string(), Tensor::vector(vec![3.0, 0.0])),
            ("b".to_string(), Tensor::vector(vec![0.0, 4.0])),
        ]);
        let norm = clip_global_norm(&mut grads, 2.5);
        assert_eq!(norm, 5.0);
        let new_norm: f64 = grads.values().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>().sqrt();
        assert!((new_norm - 2.5).abs() < 1e-12);

        let mut small = BTreeMap::from([("a".to_string(), Tensor::vector(vec![0.3, 0.4]))]);
        clip_global_norm(&mut small, 2.5);
        assert_eq!(small["a"].data(), &[0.3, 0.4], "below threshold untouched");
    }

    #[test]
    fn triangular_schedule_cycles() {
        let s = LrSchedule::CyclicalTriangular { base: 0.1, max: 0.5, period: 2 };
        let lrs: Vec<f64> = (0..6).map(|e| lr_at_epoch(&s, 1.0, e)).collect();
        for (got, want) in lrs.iter().zip([0.1, 0.3, 0.5, 0.3, 0.1, 0.3]) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        assert_eq!(lr_at_epoch(&LrSchedule::Fixed, 0.02, 9), 0.02);
    }
}
