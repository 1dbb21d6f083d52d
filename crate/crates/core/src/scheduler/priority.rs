use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::SchedError;

/// Roofline-derived key ranking how well a device suits training.
///
/// Compared lexicographically: higher peak compute first, then the higher
/// ridge point (FLOP per byte of HBM traffic at which the device turns
/// compute-bound). Bandwidth-rich devices rank lower on ties because they are
/// the better rollout (decode, memory-bound) hosts.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainPriority {
    pub peak_flops: f64,
    pub ridge_point: f64,
}

impl PartialEq for TrainPriority {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for TrainPriority {}

impl PartialOrd for TrainPriority {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for TrainPriority {
    fn cmp(&self, other: &Self) -> Ordering {
        self.peak_flops
            .total_cmp(&other.peak_flops)
            .then(self.ridge_point.total_cmp(&other.ridge_point))
    }
}

pub fn compute_train_priority(
    peak_flops: f64,
    hbm_bandwidth: f64,
) -> Result<TrainPriority, SchedError> {
    if !(peak_flops > 0.0 && peak_flops.is_finite()) {
        return Err(SchedError::Domain {
            field: "peak_flops",
            value: peak_flops,
        });
    }
    if !(hbm_bandwidth > 0.0 && hbm_bandwidth.is_finite()) {
        return Err(SchedError::Domain {
            field: "hbm_bandwidth",
            value: hbm_bandwidth,
        });
    }
    Ok(TrainPriority {
        peak_flops,
        ridge_point: peak_flops / hbm_bandwidth,
    })
}
