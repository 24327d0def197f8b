//! Bus voltage state with the slack angle pinned to zero.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voltage magnitudes and angles at every bus.
///
/// The slack angle is identically zero, so the free state dimension is
/// `2n - 1`. The free layout is all non-slack angles in ascending bus
/// order followed by all magnitudes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub vm: Vec<f64>,
    pub va: Vec<f64>,
    pub slack: usize,
}

impl StateVector {
    pub fn new(vm: Vec<f64>, va: Vec<f64>, slack: usize) -> Result<Self> {
        if vm.len() != va.len() {
            return Err(Error::Dimension {
                expected: vm.len(),
                got: va.len(),
            });
        }
        if slack >= vm.len() {
            return Err(Error::Contract(format!("slack index {slack} out of range")));
        }
        if va[slack] != 0.0 {
            return Err(Error::Contract("slack angle must be zero".into()));
        }
        if vm.iter().any(|&v| v <= 0.0) {
            return Err(Error::Contract("voltage magnitudes must be positive".into()));
        }
        Ok(StateVector { vm, va, slack })
    }

    /// Flat start: unit magnitudes, zero angles.
    pub fn flat(n: usize, slack: usize) -> Self {
        StateVector {
            vm: vec![1.0; n],
            va: vec![0.0; n],
            slack,
        }
    }

    pub fn n_buses(&self) -> usize {
        self.vm.len()
    }

    pub fn free_dim(&self) -> usize {
        2 * self.n_buses() - 1
    }

    /// Column index of a non-slack bus angle in the free layout.
    pub fn angle_col(&self, bus: usize) -> usize {
        debug_assert_ne!(bus, self.slack);
        if bus < self.slack {
            bus
        } else {
            bus - 1
        }
    }

    /// Column index of a bus magnitude in the free layout.
    pub fn vmag_col(&self, bus: usize) -> usize {
        self.n_buses() - 1 + bus
    }

    /// Packs the free components `[va (non-slack), vm]` into one vector.
    pub fn to_free(&self) -> DVector<f64> {
        let n = self.n_buses();
        let mut out = DVector::zeros(2 * n - 1);
        let mut k = 0;
        for bus in 0..n {
            if bus != self.slack {
                out[k] = self.va[bus];
                k += 1;
            }
        }
        for bus in 0..n {
            out[n - 1 + bus] = self.vm[bus];
        }
        out
    }

    /// Rebuilds a state from the free layout, pinning the slack angle.
    pub fn from_free(free: &DVector<f64>, n: usize, slack: usize) -> Self {
        debug_assert_eq!(free.len(), 2 * n - 1);
        let mut va = vec![0.0; n];
        let mut k = 0;
        for (bus, angle) in va.iter_mut().enumerate() {
            if bus != slack {
                *angle = free[k];
                k += 1;
            }
        }
        let vm = (0..n).map(|bus| free[n - 1 + bus]).collect();
        StateVector { vm, va, slack }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn free_layout_roundtrip() {
        let state = StateVector {
            vm: vec![1.0, 1.02, 0.98],
            va: vec![0.1, 0.0, -0.2],
            slack: 1,
        };
        let free = state.to_free();
        assert_eq!(free.len(), 5);
        assert_eq!(free[0], 0.1);
        assert_eq!(free[1], -0.2);
        assert_eq!(free[2], 1.0);
        let back = StateVector::from_free(&free, 3, 1);
        assert_eq!(back, state);
    }

    #[test]
    fn nonzero_slack_angle_rejected() {
        assert!(StateVector::new(vec![1.0], vec![0.3], 0).is_err());
    }
}
