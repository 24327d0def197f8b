//! Nodal admittance matrix and per-branch admittance blocks.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::grid::case::GridCase;

/// Two-port admittance block of one branch, in the bus frame:
/// `I_f = yff V_f + yft V_t`, `I_t = ytf V_f + ytt V_t`.
#[derive(Debug, Clone, Copy)]
pub struct BranchAdmittance {
    pub from: usize,
    pub to: usize,
    pub yff: Complex64,
    pub yft: Complex64,
    pub ytf: Complex64,
    pub ytt: Complex64,
}

/// Dense nodal admittance matrix with cached real/imaginary parts and
/// per-bus neighbor lists for sparse traversal of the injection equations.
#[derive(Debug, Clone)]
pub struct AdmittanceMatrix {
    pub y: DMatrix<Complex64>,
    pub g: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub branches: Vec<BranchAdmittance>,
    /// For every bus, the sorted list of buses with a nonzero off-diagonal
    /// coupling (the bus itself excluded).
    pub neighbors: Vec<Vec<usize>>,
}

/// Builds the admittance matrix by stamping series, charging, tap and
/// shunt terms of every branch and bus.
pub fn build_admittance(case: &GridCase) -> AdmittanceMatrix {
    let n = case.n_buses();
    let mut y = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
    let mut branches = Vec::with_capacity(case.n_branches());

    for br in &case.branches {
        let ys = 1.0 / Complex64::new(br.r, br.x);
        let bc = Complex64::new(0.0, br.b_charging / 2.0);
        let tap = Complex64::from_polar(br.tap_ratio, br.phase_shift);

        let yff = (ys + bc) / (tap * tap.conj());
        let yft = -ys / tap.conj();
        let ytf = -ys / tap;
        let ytt = ys + bc;

        y[(br.from, br.from)] += yff;
        y[(br.from, br.to)] += yft;
        y[(br.to, br.from)] += ytf;
        y[(br.to, br.to)] += ytt;

        branches.push(BranchAdmittance {
            from: br.from,
            to: br.to,
            yff,
            yft,
            ytf,
            ytt,
        });
    }

    for bus in &case.buses {
        y[(bus.id, bus.id)] += Complex64::new(bus.gs, bus.bs);
    }

    let g = y.map(|c| c.re);
    let b = y.map(|c| c.im);
    let mut neighbors = vec![Vec::new(); n];
    for i in 0..n {
        for j in 0..n {
            if i != j && y[(i, j)] != Complex64::new(0.0, 0.0) {
                neighbors[i].push(j);
            }
        }
    }

    AdmittanceMatrix {
        y,
        g,
        b,
        branches,
        neighbors,
    }
}

impl AdmittanceMatrix {
    pub fn n_buses(&self) -> usize {
        self.y.nrows()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::case::{Branch, Bus, BusType, GridCase};

    #[test]
    fn single_line_stamp_matches_hand_evaluation() {
        let case = GridCase::new(
            "t".into(),
            100.0,
            vec![
                Bus {
                    id: 0,
                    bus_type: BusType::Slack,
                    pd: 0.0,
                    qd: 0.0,
                    gs: 0.0,
                    bs: 0.0,
                    vm_init: 1.0,
                    va_init: 0.0,
                },
                Bus {
                    id: 1,
                    bus_type: BusType::Pq,
                    pd: 0.0,
                    qd: 0.0,
                    gs: 0.0,
                    bs: 0.0,
                    vm_init: 1.0,
                    va_init: 0.0,
                },
            ],
            vec![Branch {
                from: 0,
                to: 1,
                r: 0.0,
                x: 0.1,
                b_charging: 0.0,
                tap_ratio: 1.0,
                phase_shift: 0.0,
            }],
            vec![],
        )
        .unwrap();
        let adm = build_admittance(&case);
        // 1/(j0.1) = -10j on the diagonal, +10j off-diagonal after negation
        assert!((adm.y[(0, 0)] - Complex64::new(0.0, -10.0)).norm() < 1e-12);
        assert!((adm.y[(0, 1)] - Complex64::new(0.0, 10.0)).norm() < 1e-12);
        assert!((adm.y[(1, 0)] - Complex64::new(0.0, 10.0)).norm() < 1e-12);
        assert!((adm.y[(1, 1)] - Complex64::new(0.0, -10.0)).norm() < 1e-12);
    }

    #[test]
    fn isolated_bus_shunt_only_diagonal() {
        let case = GridCase::new(
            "shunt".into(),
            100.0,
            vec![Bus {
                id: 0,
                bus_type: BusType::Slack,
                pd: 0.0,
                qd: 0.0,
                gs: 0.0,
                bs: 0.2,
                vm_init: 1.0,
                va_init: 0.0,
            }],
            vec![],
            vec![],
        )
        .unwrap();
        let adm = build_admittance(&case);
        assert!((adm.y[(0, 0)] - Complex64::new(0.0, 0.2)).norm() < 1e-15);
    }

    #[test]
    fn symmetric_without_taps_or_shifts() {
        let case = crate::cases::ieee9();
        let adm = build_admittance(&case);
        for i in 0..9 {
            for j in 0..9 {
                assert!((adm.y[(i, j)] - adm.y[(j, i)]).norm() < 1e-14);
            }
        }
    }
}
