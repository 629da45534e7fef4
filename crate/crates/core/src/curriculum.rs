//! Easy-to-difficult sample scheduling within each mini-batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleMode {
    #[default]
    SShape,
    Linear,
}

/// What advances the schedule: whole epochs, or fractional epochs per batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Clock {
    #[default]
    Epoch,
    Step,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumSchedule {
    /// When false every sample is always included.
    pub enabled: bool,
    pub mode: ScheduleMode,
    #[serde(rename = "M")]
    pub limit: f64,
    pub k: f64,
    pub easy_fraction: f64,
    pub clock: Clock,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        Self {
            enabled: true,
            mode: ScheduleMode::SShape,
            limit: 50.0,
            k: 6.0,
            easy_fraction: 0.8,
            clock: Clock::Epoch,
        }
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl CurriculumSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.limit > 0.0 && self.limit.is_finite()) {
            return Err(Error::Config(format!(
                "curriculum.M must be positive, got {}",
                self.limit
            )));
        }
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(Error::Config(format!(
                "curriculum.k must be positive, got {}",
                self.k
            )));
        }
        if !(self.easy_fraction > 0.0 && self.easy_fraction < 1.0) {
            return Err(Error::Config(format!(
                "curriculum.easy_fraction must lie in (0, 1), got {}",
                self.easy_fraction
            )));
        }
        Ok(())
    }

    /// Fraction of difficult samples admitted at time `t` (in epochs).
    pub fn mu(&self, t: f64) -> Result<f64> {
        self.validate()?;
        let t = t.max(0.0);
        let v = match self.mode {
            ScheduleMode::Linear => t / self.limit,
            ScheduleMode::SShape => {
                let (lo, hi) = (logistic(-self.k), logistic(self.k));
                (logistic(self.k * (2.0 * t / self.limit - 1.0)) - lo) / (hi - lo)
            }
        };
        Ok(v.clamp(0.0, 1.0))
    }

    /// Clock value for batch `batch` of `batches` in epoch `epoch`.
    pub fn time(&self, epoch: usize, batch: usize, batches: usize) -> f64 {
        match self.clock {
            Clock::Epoch => epoch as f64,
            Clock::Step => epoch as f64 + batch as f64 / batches.max(1) as f64,
        }
    }

    /// Inclusion mask over a batch given each row's loss.
    pub fn select(&self, losses: &[f64], t: f64) -> Result<Vec<bool>> {
        if !self.enabled {
            return Ok(vec![true; losses.len()]);
        }
        Ok(select_batch(losses, self.mu(t)?, self.easy_fraction))
    }
}

/// Sort ascending (ties by index); keep the first `⌈easy·B⌉` rows and the
/// `⌊μ·D + 0.5⌋` least-lossy of the remaining `D`.
pub fn select_batch(losses: &[f64], mu: f64, easy_fraction: f64) -> Vec<bool> {
    let b = losses.len();
    let mut order: Vec<usize> = (0..b).collect();
    order.sort_by(|&i, &j| losses[i].total_cmp(&losses[j]).then(i.cmp(&j)));
    let easy = ((easy_fraction * b as f64).ceil() as usize).min(b);
    let difficult = b - easy;
    let admitted = ((mu.clamp(0.0, 1.0) * difficult as f64 + 0.5).floor() as usize).min(difficult);
    let mut include = vec![false; b];
    for &i in &order[..easy + admitted] {
        include[i] = true;
    }
    include
}
