//! Learning-rate schedules and label smoothing.

use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScheduleKind {
    /// Multiply by `gamma` at each milestone epoch.
    Step { milestones: Vec<u32>, gamma: f64 },
    /// Cosine annealing with warm restarts. Cycle `i` lasts `t0 * t_mult^i`
    /// epochs.
    Cosine { eta_min: f64, t0: f64, t_mult: f64 },
}

/// A per-epoch learning-rate program.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub base_lr: f64,
    pub total_epochs: u32,
    #[serde(default)]
    pub warmup_epochs: u32,
    #[serde(flatten)]
    pub kind: ScheduleKind,
}

impl ScheduleSpec {
    /// Step decay: x0.1 at epochs 160 and 180 of 200.
    pub fn default_step(base_lr: f64) -> Self {
        ScheduleSpec {
            base_lr,
            total_epochs: 200,
            warmup_epochs: 0,
            kind: ScheduleKind::Step {
                milestones: vec![160, 180],
                gamma: 0.1,
            },
        }
    }

    /// One cosine cycle over the whole run, annealing to zero.
    pub fn single_cosine(base_lr: f64, total_epochs: u32) -> Self {
        ScheduleSpec {
            base_lr,
            total_epochs,
            warmup_epochs: 0,
            kind: ScheduleKind::Cosine {
                eta_min: 0.0,
                t0: f64::from(total_epochs),
                t_mult: 1.0,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::invalid(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if self.total_epochs == 0 {
            return Err(Error::invalid("total_epochs must be positive"));
        }
        match &self.kind {
            ScheduleKind::Step { milestones, gamma } => {
                if milestones.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::invalid("milestones must be strictly increasing"));
                }
                if milestones.last().is_some_and(|&m| m >= self.total_epochs) {
                    return Err(Error::invalid("milestones must be below total_epochs"));
                }
                if !(*gamma > 0.0 && *gamma <= 1.0) {
                    return Err(Error::invalid(format!("gamma {gamma} outside (0, 1]")));
                }
            }
            ScheduleKind::Cosine {
                eta_min,
                t0,
                t_mult,
            } => {
                if !(*eta_min >= 0.0 && *eta_min < self.base_lr) {
                    return Err(Error::invalid(format!("eta_min {eta_min} outside [0, base_lr)")));
                }
                if !(*t0 >= 1.0 && t0.is_finite()) {
                    return Err(Error::invalid(format!("t0 must be at least 1, got {t0}")));
                }
                if !(*t_mult >= 1.0 && t_mult.is_finite()) {
                    return Err(Error::invalid(format!("t_mult must be at least 1, got {t_mult}")));
                }
            }
        }
        Ok(())
    }
}

/// Learning rate at `epoch`, which may be fractional for per-iteration use:
/// step schedules hold their value through an epoch while the cosine phase
/// advances continuously.
pub fn lr_at(spec: &ScheduleSpec, epoch: f64) -> Result<f64> {
    spec.validate()?;
    if !(epoch >= 0.0 && epoch < f64::from(spec.total_epochs)) {
        return Err(Error::invalid(format!(
            "epoch {epoch} outside [0, {})",
            spec.total_epochs
        )));
    }
    if epoch < f64::from(spec.warmup_epochs) {
        return Ok(spec.base_lr * (epoch + 1.0) / f64::from(spec.warmup_epochs));
    }
    Ok(match &spec.kind {
        ScheduleKind::Step { milestones, gamma } => {
            let whole = epoch.floor();
            let drops = milestones.iter().filter(|&&m| f64::from(m) <= whole).count();
            spec.base_lr * gamma.powi(drops as i32)
        }
        ScheduleKind::Cosine {
            eta_min,
            t0,
            t_mult,
        } => {
            let (t_cur, t_i) = cycle_position(epoch, *t0, *t_mult);
            cosine_value(*eta_min, spec.base_lr, t_cur, t_i)
        }
    })
}

/// `eta_min + (eta_max - eta_min) * (1 + cos(pi * t_cur / t_i)) / 2`,
/// arranged so that `t_cur = 0` yields `eta_max` exactly.
pub fn cosine_value(eta_min: f64, eta_max: f64, t_cur: f64, t_i: f64) -> f64 {
    eta_max - 0.5 * (eta_max - eta_min) * (1.0 - (PI * t_cur / t_i).cos())
}

/// Epochs since the last restart and the length of the current cycle.
pub fn cycle_position(epoch: f64, t0: f64, t_mult: f64) -> (f64, f64) {
    // same accumulation as restart_epochs, so restarts land on t_cur = 0
    let mut start = 0.0;
    let mut len = t0;
    while epoch >= start + len {
        start += len;
        len *= t_mult;
    }
    (epoch - start, len)
}

/// Epochs at which a new cosine cycle begins, below `total_epochs`.
pub fn restart_epochs(t0: f64, t_mult: f64, total_epochs: u32) -> Vec<f64> {
    let mut out = Vec::new();
    let mut start = 0.0;
    let mut len = t0;
    while start < f64::from(total_epochs) {
        out.push(start);
        start += len;
        len *= t_mult;
    }
    out
}

/// `epoch,lr` CSV for every whole epoch.
pub fn schedule_csv(spec: &ScheduleSpec) -> Result<String> {
    let mut out = String::from("epoch,lr\n");
    for e in 0..spec.total_epochs {
        let _ = writeln!(out, "{e},{:e}", lr_at(spec, f64::from(e))?);
    }
    Ok(out)
}

/// `(1 - eps) * onehot(category) + eps / k`
pub fn smooth_labels(category: usize, k: usize, eps: f64) -> Result<Vec<f64>> {
    if k == 0 || category >= k {
        return Err(Error::invalid(format!("category {category} outside 0..{k}")));
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::invalid(format!("eps {eps} outside [0, 1)")));
    }
    let off = eps / k as f64;
    let mut q = vec![off; k];
    q[category] = (1.0 - eps) + off;
    Ok(q)
}

pub const DEFAULT_SMOOTHING_EPS: f64 = 0.1;

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn step_instance() {
        let s = ScheduleSpec::default_step(1e-3);
        let lr = |e: f64| lr_at(&s, e).unwrap();
        assert_eq!(lr(0.0), 1e-3);
        assert_eq!(lr(159.0), 1e-3);
        assert!((lr(160.0) - 1e-4).abs() < 1e-18);
        assert!((lr(180.0) - 1e-5).abs() < 1e-19);
        assert!((lr(199.0) - 1e-5).abs() < 1e-19);
        assert_eq!(lr(160.7), lr(160.0));
        assert!(lr_at(&s, 200.0).is_err());
        assert!(lr_at(&s, -1.0).is_err());
    }

    #[test]
    fn cosine_formula_points() {
        assert_eq!(cosine_value(0.1, 1.0, 0.0, 10.0), 1.0);
        assert!((cosine_value(0.1, 1.0, 10.0, 10.0) - 0.1).abs() < 1e-15);
        assert!((cosine_value(0.0, 1.0, 50.0, 100.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn cosine_restarts() {
        let s = ScheduleSpec {
            base_lr: 0.1,
            total_epochs: 70,
            warmup_epochs: 0,
            kind: ScheduleKind::Cosine {
                eta_min: 0.001,
                t0: 10.0,
                t_mult: 2.0,
            },
        };
        assert_eq!(restart_epochs(10.0, 2.0, 70), vec![0.0, 10.0, 30.0]);
        for r in [0.0, 10.0, 30.0] {
            assert_eq!(lr_at(&s, r).unwrap(), 0.1);
        }
        assert_eq!(cycle_position(45.0, 10.0, 2.0), (15.0, 40.0));
        let mid = lr_at(&s, 50.0).unwrap();
        assert!((mid - (0.1 + 0.001) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn warmup_overrides() {
        let mut s = ScheduleSpec::single_cosine(0.01, 100);
        s.warmup_epochs = 4;
        assert!((lr_at(&s, 0.0).unwrap() - 0.0025).abs() < 1e-15);
        assert!((lr_at(&s, 3.0).unwrap() - 0.01).abs() < 1e-15);
        assert!(lr_at(&s, 4.0).unwrap() < 0.01);
    }

    #[test]
    fn invalid_specs() {
        let mut s = ScheduleSpec::default_step(1e-3);
        s.kind = ScheduleKind::Step {
            milestones: vec![180, 160],
            gamma: 0.1,
        };
        assert!(s.validate().is_err());
        s.kind = ScheduleKind::Step {
            milestones: vec![160, 200],
            gamma: 0.1,
        };
        assert!(s.validate().is_err());
        let mut c = ScheduleSpec::single_cosine(0.1, 10);
        c.kind = ScheduleKind::Cosine {
            eta_min: 0.1,
            t0: 10.0,
            t_mult: 1.0,
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn csv_dump() {
        let csv = schedule_csv(&ScheduleSpec::default_step(1e-3)).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 201);
        assert_eq!(lines[0], "epoch,lr");
        assert_eq!(lines[1], "0,1e-3");
    }

    #[test]
    fn smoothing_examples() {
        assert_eq!(smooth_labels(3, 6, 0.0).unwrap(), vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let q = smooth_labels(2, 6, 0.1).unwrap();
        assert!((q[2] - 0.916_666_666_666_666_6).abs() < 1e-12);
        assert!((q[0] - 0.016_666_666_666_666_6).abs() < 1e-12);
        assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(smooth_labels(6, 6, 0.1).is_err());
        assert!(smooth_labels(0, 6, 1.0).is_err());
    }

    fn arb_cosine() -> impl Strategy<Value = ScheduleSpec> {
        (1u32..400, 0.0..0.5f64, 1.0..60.0f64, 1.0..3.0f64).prop_map(|(total, eta_min, t0, t_mult)| {
            ScheduleSpec {
                base_lr: 1.0,
                total_epochs: total,
                warmup_epochs: 0,
                kind: ScheduleKind::Cosine { eta_min, t0, t_mult },
            }
        })
    }

    proptest! {
        #[test]
        fn step_is_non_increasing(
            total in 2u32..300,
            gamma in 0.01..=1.0f64,
            raw in proptest::collection::btree_set(1u32..300, 0..5),
        ) {
            let milestones: Vec<u32> = raw.into_iter().filter(|&m| m < total).collect();
            let n = milestones.len();
            let s = ScheduleSpec { base_lr: 0.5, total_epochs: total, warmup_epochs: 0,
                kind: ScheduleKind::Step { milestones, gamma } };
            let lrs: Vec<f64> = (0..total).map(|e| lr_at(&s, f64::from(e)).unwrap()).collect();
            prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
            let drops = lrs.windows(2).filter(|w| w[1] < w[0]).count();
            if gamma < 1.0 { prop_assert_eq!(drops, n); }
        }

        #[test]
        fn cosine_bounded_and_monotone_within_cycles(s in arb_cosine()) {
            let ScheduleKind::Cosine { eta_min, t0, t_mult } = s.kind else { unreachable!() };
            let mut prev: Option<(f64, f64)> = None;
            for e in 0..s.total_epochs {
                let e = f64::from(e);
                let lr = lr_at(&s, e).unwrap();
                prop_assert!(lr >= eta_min - 1e-15 && lr <= 1.0 + 1e-15);
                let (t_cur, _) = cycle_position(e, t0, t_mult);
                if let Some((p_lr, p_cur)) = prev {
                    if t_cur > p_cur { prop_assert!(lr <= p_lr + 1e-15); }
                }
                prev = Some((lr, t_cur));
            }
            for r in restart_epochs(t0, t_mult, s.total_epochs) {
                prop_assert_eq!(lr_at(&s, r).unwrap(), 1.0);
            }
        }

        #[test]
        fn smoothing_sums_to_one_and_keeps_argmax(k in 1usize..50, eps in 0.0..0.999f64, seed in any::<usize>()) {
            let c = seed % k;
            let q = smooth_labels(c, k, eps).unwrap();
            prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let argmax = q.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            prop_assert!(k == 1 || argmax == c);
        }
    }
}
