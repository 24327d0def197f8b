//! Independent reference implementations used only to cross-check the
//! library: a from-scratch admittance assembly and a Gauss-Seidel power
//! flow. They share no code with the solver under test.

use fdia::grid::{BusType, GridCase};
use num_complex::Complex64;

/// Admittance matrix assembled independently: explicit two-port formulas
/// accumulated through a triplet list rather than direct stamping.
pub fn reference_ybus(case: &GridCase) -> Vec<Vec<Complex64>> {
    let n = case.n_buses();
    let mut triplets: Vec<(usize, usize, Complex64)> = Vec::new();
    for branch in &case.branches {
        let series = {
            let z = Complex64::new(branch.r, branch.x);
            Complex64::new(1.0, 0.0) / z
        };
        let charging = Complex64::new(0.0, 0.5 * branch.b_charging);
        let tap = branch.tap_ratio * Complex64::new(0.0, branch.phase_shift).exp();
        let t2 = (tap * tap.conj()).re;

        triplets.push((branch.from, branch.from, (series + charging) / t2));
        triplets.push((branch.to, branch.to, series + charging));
        triplets.push((branch.from, branch.to, -series / tap.conj()));
        triplets.push((branch.to, branch.from, -series / tap));
    }
    for bus in &case.buses {
        triplets.push((bus.id, bus.id, Complex64::new(bus.gs, bus.bs)));
    }
    let mut y = vec![vec![Complex64::new(0.0, 0.0); n]; n];
    for (i, j, value) in triplets {
        y[i][j] += value;
    }
    y
}

/// Gauss-Seidel AC power flow from a flat start. Slow but entirely
/// independent of the Newton solver; PV buses re-pin their magnitude
/// after every update.
pub fn gauss_seidel_power_flow(case: &GridCase, tolerance: f64) -> (Vec<f64>, Vec<f64>) {
    let n = case.n_buses();
    let y = reference_ybus(case);
    let (p_spec, q_spec) = case.net_injections();

    let mut v: Vec<Complex64> = (0..n)
        .map(|bus| {
            let magnitude = match case.buses[bus].bus_type {
                BusType::Pq => 1.0,
                _ => case.voltage_setpoint(bus),
            };
            Complex64::new(magnitude, 0.0)
        })
        .collect();
    let slack = case.slack();

    for _sweep in 0..200_000 {
        for bus in 0..n {
            if bus == slack {
                continue;
            }
            let mut coupled = Complex64::new(0.0, 0.0);
            for j in 0..n {
                if j != bus {
                    coupled += y[bus][j] * v[j];
                }
            }
            let s = match case.buses[bus].bus_type {
                BusType::Pq => Complex64::new(p_spec[bus], q_spec[bus]),
                _ => {
                    // PV: reactive power follows from the current voltages
                    let i_total = coupled + y[bus][bus] * v[bus];
                    let q = (v[bus] * i_total.conj()).im;
                    Complex64::new(p_spec[bus], q)
                }
            };
            let mut updated = ((s / v[bus]).conj() - coupled) / y[bus][bus];
            if case.buses[bus].bus_type == BusType::Pv {
                let setpoint = case.voltage_setpoint(bus);
                updated *= setpoint / updated.norm();
            }
            v[bus] = updated;
        }

        // convergence on the true mismatches
        let mut worst: f64 = 0.0;
        for bus in 0..n {
            if bus == slack {
                continue;
            }
            let mut i_total = Complex64::new(0.0, 0.0);
            for j in 0..n {
                i_total += y[bus][j] * v[j];
            }
            let s = v[bus] * i_total.conj();
            worst = worst.max((s.re - p_spec[bus]).abs());
            if case.buses[bus].bus_type == BusType::Pq {
                worst = worst.max((s.im - q_spec[bus]).abs());
            }
        }
        if worst < tolerance {
            break;
        }
    }

    let slack_angle = v[slack].arg();
    let vm = v.iter().map(|c| c.norm()).collect();
    let va = v.iter().map(|c| c.arg() - slack_angle).collect();
    (vm, va)
}
