use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Multi-step learning-rate decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base_rate: f64,
    pub milestones: Vec<usize>,
    pub decay_factor: f64,
}

impl LrSchedule {
    pub fn new(base_rate: f64, milestones: Vec<usize>, decay_factor: f64) -> Result<Self> {
        if !(base_rate > 0.0) || !(decay_factor > 0.0 && decay_factor < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "schedule needs base_rate > 0 and decay in (0,1), got {base_rate}, {decay_factor}"
            )));
        }
        if milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("milestones must strictly increase".into()));
        }
        Ok(Self {
            base_rate,
            milestones,
            decay_factor,
        })
    }

    /// Decays by `decay_factor` at 50% and 75% of `total_epochs`.
    pub fn default_for(base_rate: f64, total_epochs: usize) -> Result<Self> {
        let mut milestones = vec![total_epochs / 2, total_epochs * 3 / 4];
        milestones.dedup();
        milestones.retain(|&m| m > 0);
        Self::new(base_rate, milestones, 0.1)
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.base_rate * self.decay_factor.powi(passed as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multistep_examples() {
        let s = LrSchedule::new(0.1, vec![100, 150], 0.1).unwrap();
        assert_eq!(s.lr_at(0), 0.1);
        assert!((s.lr_at(120) - 0.01).abs() < 1e-15);
        assert!((s.lr_at(180) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn rejects_unsorted_milestones() {
        assert!(LrSchedule::new(0.1, vec![150, 100], 0.1).is_err());
        assert!(LrSchedule::new(0.1, vec![100], 1.5).is_err());
    }

    #[test]
    fn default_milestones_sit_at_half_and_three_quarters() {
        let s = LrSchedule::default_for(0.1, 200).unwrap();
        assert_eq!(s.milestones, vec![100, 150]);
    }
}
