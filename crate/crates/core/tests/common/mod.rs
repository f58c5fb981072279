//! Independent oracles shared by the integration tests and the acceptance
//! suite. Each returns `Err(description)` on the first violation.
#![allow(dead_code)]

use crossbar_bp::crossbar::{ConductancePair, Crossbar, Direction, UpdateMethod};
use crossbar_bp::device::{DeviceParams, VariationFactor};
use crossbar_bp::network::{DenseLayer, Topology};
use crossbar_bp::trainer::{rng_stream, SwNetwork};
use rand::Rng;

pub const BETAS: [f64; 4] = [0.0, 1.0, 2.0, 3.0];
pub const N_MAXES: [u32; 3] = [32, 64, 128];

/// Crossbar with random conductances and variation factors.
pub fn random_crossbar<R: Rng>(rows: usize, cols: usize, params: DeviceParams, rng: &mut R) -> Crossbar {
    let mut xbar = Crossbar::new(rows, cols, params);
    for i in 0..rows {
        for j in 0..cols {
            let pair = ConductancePair {
                g_plus: rng.random_range(params.g_min..=params.g_max),
                g_minus: rng.random_range(params.g_min..=params.g_max),
                x_plus: VariationFactor::new(rng.random_range(0.0..2.0)),
                x_minus: VariationFactor::new(rng.random_range(0.0..2.0)),
            };
            xbar.set_pair(i, j, pair).unwrap();
        }
    }
    xbar
}

/// Dense matrix built straight from the device model, row-major.
pub fn dense_from_pairs(xbar: &Crossbar) -> Vec<Vec<f64>> {
    (0..xbar.rows())
        .map(|i| {
            (0..xbar.cols())
                .map(|j| {
                    let p = xbar.pair(i, j).unwrap();
                    p.x_plus.get() * p.g_plus - p.x_minus.get() * p.g_minus
                })
                .collect()
        })
        .collect()
}

/// Forward and backward read-out vs. dense products on `count` random arrays.
pub fn oracle_mvm(count: usize, seed: u64) -> Result<(), String> {
    let params = DeviceParams::symmetric(2.0, 64).unwrap();
    let mut rng = rng_stream(seed, 10);
    for case in 0..count {
        let rows = rng.random_range(1..=9);
        let cols = rng.random_range(1..=9);
        let xbar = random_crossbar(rows, cols, params, &mut rng);
        let w = dense_from_pairs(&xbar);
        let v: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u: Vec<f64> = (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fwd = xbar.forward_mvm(&v).map_err(|e| e.to_string())?;
        let bwd = xbar.backward_mvm(&u).map_err(|e| e.to_string())?;
        for j in 0..cols {
            let want: f64 = (0..rows).map(|i| w[i][j] * v[i]).sum();
            if (fwd[j] - want).abs() > 1e-10 {
                return Err(format!("case {case}: forward[{j}] {} vs {want}", fwd[j]));
            }
        }
        for i in 0..rows {
            let want: f64 = (0..cols).map(|j| w[i][j] * u[j]).sum();
            if (bwd[i] - want).abs() > 1e-10 {
                return Err(format!("case {case}: backward[{i}] {} vs {want}", bwd[i]));
            }
        }
    }
    Ok(())
}

fn random_sw_net<R: Rng>(rng: &mut R) -> SwNetwork {
    let input = rng.random_range(2..=6);
    let hidden: Vec<usize> = (0..rng.random_range(1..=2)).map(|_| rng.random_range(2..=5)).collect();
    let output = rng.random_range(2..=4);
    let c: Vec<f64> = hidden.iter().map(|_| rng.random_range(0.5..3.0)).collect();
    let top = Topology::new(input, hidden, output, c).unwrap();
    let layers = top
        .layer_shapes()
        .into_iter()
        .map(|(rows, cols)| DenseLayer {
            rows,
            cols,
            weights: (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        })
        .collect();
    SwNetwork::new(top, layers).unwrap()
}

/// Distance of any hidden weighted sum from a hard-sigmoid corner.
fn kink_distance(net: &SwNetwork, x: &[f64]) -> f64 {
    let trace = net.forward(x).unwrap();
    let depth = trace.s.len();
    trace.s[..depth - 1]
        .iter()
        .zip(&net.topology.c)
        .flat_map(|(s, &c)| s.iter().map(move |v| (v.abs() - c).abs()))
        .fold(f64::INFINITY, f64::min)
}

/// Software-reference gradients vs. central finite differences.
pub fn oracle_gradients(count: usize, seed: u64) -> Result<(), String> {
    let mut rng = rng_stream(seed, 11);
    let h = 1e-6;
    let mut done = 0;
    while done < count {
        let net = random_sw_net(&mut rng);
        let x: Vec<f64> = (0..net.topology.input).map(|_| rng.random_range(0.0..1.0)).collect();
        let label = rng.random_range(0..net.topology.output);
        // The finite difference is only meaningful away from the corners.
        if kink_distance(&net, &x) < 1e-3 {
            continue;
        }
        let grads = net.gradients(&x, label).map_err(|e| e.to_string())?;
        for (l, g) in grads.iter().enumerate() {
            for (k, &analytic) in g.iter().enumerate() {
                let mut up = net.clone();
                up.layers[l].weights[k] += h;
                let mut down = net.clone();
                down.layers[l].weights[k] -= h;
                let fd = (up.loss(&x, label).unwrap() - down.loss(&x, label).unwrap()) / (2.0 * h);
                let err = (fd - analytic).abs();
                let scale = fd.abs().max(analytic.abs());
                if err > 1e-4 * scale && err > 1e-8 {
                    return Err(format!("net {done} layer {l} weight {k}: fd {fd} vs analytic {analytic}"));
                }
            }
        }
        done += 1;
    }
    Ok(())
}

/// `n_max` pulses reach `g_max` within 1e-6 for every grid point.
pub fn oracle_span() -> Result<(), String> {
    for beta in BETAS {
        for n_max in N_MAXES {
            let p = DeviceParams::symmetric(beta, n_max).map_err(|e| e.to_string())?;
            let end = p.conductance_after(n_max);
            if (end - p.g_max).abs() > 1e-6 {
                return Err(format!("beta {beta} n_max {n_max}: ends at {end}"));
            }
            let before = p.conductance_after(n_max - 1);
            if before >= p.g_max - 1e-9 {
                return Err(format!("beta {beta} n_max {n_max}: saturated one pulse early ({before})"));
            }
        }
    }
    Ok(())
}

/// Depression at `g` mirrors potentiation at `g_min + g_max - g`.
pub fn oracle_mirror(samples: usize, seed: u64) -> Result<(), String> {
    let mut rng = rng_stream(seed, 12);
    for beta in BETAS {
        for n_max in N_MAXES {
            let p = DeviceParams::symmetric(beta, n_max).unwrap();
            for _ in 0..samples {
                let g = rng.random_range(p.g_min..=p.g_max);
                let mirror = p.g_min + p.g_max - g;
                let down = g - p.depress(g).unwrap();
                let up = p.potentiate(mirror).unwrap() - mirror;
                if (down - up).abs() > 1e-12 {
                    return Err(format!("beta {beta} n_max {n_max} g {g}: depression {down} vs potentiation {up}"));
                }
            }
        }
    }
    Ok(())
}

/// Every update moves the nominal weight in its direction (or leaves it)
/// and keeps both conductances in range.
pub fn oracle_monotonicity(calls: usize, seed: u64) -> Result<(), String> {
    let mut rng = rng_stream(seed, 13);
    let params: Vec<DeviceParams> = BETAS
        .iter()
        .flat_map(|&b| N_MAXES.iter().map(move |&n| DeviceParams::symmetric(b, n).unwrap()))
        .collect();
    for call in 0..calls {
        let p = &params[rng.random_range(0..params.len())];
        let level = |rng: &mut _| {
            let k = Rng::random_range(rng, 0..=p.n_max);
            p.conductance_after(k)
        };
        let mut pair = ConductancePair::at(level(&mut rng), level(&mut rng));
        let method = UpdateMethod::ALL[rng.random_range(0..3)];
        let direction = if rng.random_bool(0.5) {
            Direction::Increase
        } else {
            Direction::Decrease
        };
        let before = pair;
        pair.update(direction, method, p);
        let dw = pair.nominal_weight() - before.nominal_weight();
        let tol = 1e-9;
        let ok = match direction {
            Direction::Increase => dw >= -tol,
            Direction::Decrease => dw <= tol,
        };
        if !ok {
            return Err(format!("call {call}: {direction:?} with {method} moved {before:?} to {pair:?}"));
        }
        for g in [pair.g_plus, pair.g_minus] {
            if !(g >= p.g_min && g <= p.g_max) {
                return Err(format!("call {call}: conductance {g} out of range"));
            }
        }
    }
    Ok(())
}
