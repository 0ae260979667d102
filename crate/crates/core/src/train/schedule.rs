//! Learning-rate schedules and the early-stopping rule.

/// Minimum decrease that counts as an improvement.
pub const IMPROVEMENT_TOL: f64 = 1e-6;

/// Multiplies the rate by `factor` whenever a validation loss fails to
/// beat the best so far.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauDecay {
    pub lr: f64,
    pub factor: f64,
    best: f64,
}

impl PlateauDecay {
    pub fn new(lr: f64) -> Self {
        PlateauDecay {
            lr,
            factor: 0.25,
            best: f64::INFINITY,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn observe(&mut self, valid_loss: f64) -> f64 {
        if valid_loss < self.best - IMPROVEMENT_TOL {
            self.best = valid_loss;
        } else {
            self.lr *= self.factor;
        }
        self.lr
    }
}

/// `lr0 * (1 - step / total)`.
pub fn linear_decay(step: usize, total: usize, lr0: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    lr0 * (1.0 - step.min(total) as f64 / total as f64)
}

/// True once the best loss is at least `patience` evaluations old.
pub fn early_stop(history: &[f64], patience: usize) -> bool {
    let mut best = f64::INFINITY;
    let mut best_at = 0;
    for (i, &l) in history.iter().enumerate() {
        if l < best - IMPROVEMENT_TOL {
            best = l;
            best_at = i;
        }
    }
    !history.is_empty() && history.len() - 1 - best_at >= patience
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_examples() {
        let mut p = PlateauDecay::new(1.0);
        p.observe(5.0);
        assert_eq!(p.observe(4.0), 1.0);

        let mut p = PlateauDecay::new(1.0);
        p.observe(4.0);
        assert_eq!(p.observe(4.0), 0.25);

        let mut p = PlateauDecay::new(1e-3);
        for l in [4.0, 4.1, 4.1] {
            p.observe(l);
        }
        assert!((p.lr - 6.25e-5).abs() < 1e-18);
    }

    #[test]
    fn linear_examples() {
        assert_eq!(linear_decay(0, 100, 0.5), 0.5);
        assert_eq!(linear_decay(100, 100, 0.5), 0.0);
        assert_eq!(linear_decay(50, 100, 0.5), 0.25);
    }

    #[test]
    fn early_stop_examples() {
        assert!(!early_stop(&[3.0, 2.9, 2.8], 4));
        assert!(early_stop(&[2.8, 2.9, 2.9, 2.9, 2.9], 4));
        let h = [2.8, 2.9, 2.7, 2.8, 2.8, 2.8, 2.8];
        assert!(!early_stop(&h[..6], 4));
        assert!(early_stop(&h, 4));
    }
}
