use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup to `peak`, then inverse square-root decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.peak > 0.0 && self.peak.is_finite() && self.warmup_steps >= 1 {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "schedule needs peak > 0 and warmup >= 1, got {self:?}"
            )))
        }
    }
}

pub fn lr_at(s: &LrSchedule, step: usize) -> Result<f64> {
    if step == 0 {
        return Err(Error::StepZero);
    }
    let (t, w) = (step as f64, s.warmup_steps as f64);
    Ok(s.peak * (t / w).min((w / t).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn landmarks() {
        let s = LrSchedule { peak: 3e-4, warmup_steps: 6000 };
        assert_eq!(lr_at(&s, 6000).unwrap(), 3e-4);
        assert!((lr_at(&s, 3000).unwrap() - 1.5e-4).abs() < 1e-18);
        assert!((lr_at(&s, 24_000).unwrap() - 1.5e-4).abs() < 1e-18);
        assert!(matches!(lr_at(&s, 0), Err(Error::StepZero)));
    }

    proptest! {
        #[test]
        fn rises_then_falls(w in 1usize..500, a in 1usize..2000, b in 1usize..2000) {
            let s = LrSchedule { peak: 1.0, warmup_steps: w };
            let (lo, hi) = (a.min(b), a.max(b));
            let (x, y) = (lr_at(&s, lo).unwrap(), lr_at(&s, hi).unwrap());
            if hi <= w { prop_assert!(x <= y); }
            if lo >= w { prop_assert!(x >= y); }
            prop_assert!(x <= 1.0 && x > 0.0);
        }
    }
}
