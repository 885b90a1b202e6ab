use serde::{Deserialize, Serialize};

/// Learning-rate (or momentum) value as a function of the step index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    Constant { value: f64 },
    /// Linear warmup from 0, then half-cosine from `base` down to `last`.
    WarmupCosine { base: f64, last: f64, warmup: usize, total: usize },
    /// Linear warmup from 0, then linear decay from `base` to `last`.
    WarmupLinear { base: f64, last: f64, warmup: usize, total: usize },
    /// `base * gamma^(number of milestones passed)`.
    MultiStep { base: f64, milestones: Vec<usize>, gamma: f64 },
}

impl Schedule {
    pub fn at(&self, step: usize) -> f64 {
        match self {
            Schedule::Constant { value } => *value,
            Schedule::WarmupCosine { base, last, warmup, total } => {
                if step < *warmup {
                    return base * (step + 1) as f64 / *warmup as f64;
                }
                let span = total.saturating_sub(*warmup).max(1);
                let t = ((step - warmup) as f64 / span as f64).min(1.0);
                last + 0.5 * (base - last) * (1.0 + (std::f64::consts::PI * t).cos())
            }
            Schedule::WarmupLinear { base, last, warmup, total } => {
                if step < *warmup {
                    return base * (step + 1) as f64 / *warmup as f64;
                }
                let span = total.saturating_sub(*warmup).max(1);
                let t = ((step - warmup) as f64 / span as f64).min(1.0);
                base + (last - base) * t
            }
            Schedule::MultiStep { base, milestones, gamma } => {
                let passed = milestones.iter().filter(|&&m| step >= m).count();
                base * gamma.powi(passed as i32)
            }
        }
    }
}

/// Cosine ramp from `start` at step 0 to `end` at `total`.
pub fn cosine_ramp(start: f64, end: f64, step: usize, total: usize) -> f64 {
    let t = (step as f64 / total.max(1) as f64).min(1.0);
    end - (end - start) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}
