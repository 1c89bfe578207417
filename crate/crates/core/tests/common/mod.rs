//! Checks shared between the integration suites and the acceptance run.
#![allow(dead_code)]

use qrsim_core::montecarlo::sweep_cutoff;
use qrsim_core::neuralnet::{Activation, Mlp};
use qrsim_core::oracle::exact_two_segment;
use qrsim_core::seeds::rng_for;
use qrsim_core::DerivedParams;
use rand::Rng;

/// Central-difference step of the gradient checks.
pub const FD_STEP: f64 = 1e-5;

/// Loss `sum_i w_i * out_i` of `net` at `x`.
fn weighted_output(net: &Mlp, x: &[f64], w: &[f64]) -> f64 {
    let (out, _) = net.forward(x).unwrap();
    out.iter().zip(w).map(|(o, w)| o * w).sum()
}

/// Worst relative error, over `cases` random (network, input, loss weight)
/// triples, between backpropagated and central-difference gradients. The
/// error of a case is `max_k |analytic_k - fd_k| / max_k |fd_k|`, taken over
/// every parameter and input component.
pub fn gradient_check(cases: u64, seed: u64) -> f64 {
    let shapes: [(&[usize], Activation); 5] = [
        (&[10, 32, 32, 9], Activation::Sigmoid),
        (&[10, 32, 32, 1], Activation::Identity),
        (&[3, 5, 2], Activation::Sigmoid),
        (&[6, 4, 4, 4, 1], Activation::Identity),
        (&[2, 7, 3], Activation::Tanh),
    ];
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let mut rng = rng_for(seed, &[case]);
        let (dims, out_act) = shapes[case as usize % shapes.len()];
        let mut net = Mlp::init(dims, Activation::Tanh, out_act, rng.random(), 1.5).unwrap();
        for l in 0..net.n_layers() {
            for b in net.layer_mut(l).1.iter_mut() {
                *b = rng.random::<f64>() - 0.5;
            }
        }
        let x: Vec<f64> = (0..dims[0])
            .map(|_| 2.0 * rng.random::<f64>() - 1.0)
            .collect();
        let w: Vec<f64> = (0..net.output_dim())
            .map(|_| 2.0 * rng.random::<f64>() - 1.0)
            .collect();
        let (_, cache) = net.forward(&x).unwrap();
        let g = net.backward(&cache, &w).unwrap();

        let mut fd = Vec::with_capacity(net.n_params() + x.len());
        for k in 0..net.n_params() {
            let orig = net.params()[k];
            net.params_mut()[k] = orig + FD_STEP;
            let up = weighted_output(&net, &x, &w);
            net.params_mut()[k] = orig - FD_STEP;
            let down = weighted_output(&net, &x, &w);
            net.params_mut()[k] = orig;
            fd.push((up - down) / (2.0 * FD_STEP));
        }
        for k in 0..x.len() {
            let mut xp = x.clone();
            xp[k] += FD_STEP;
            let mut xm = x.clone();
            xm[k] -= FD_STEP;
            fd.push(
                (weighted_output(&net, &xp, &w) - weighted_output(&net, &xm, &w)) / (2.0 * FD_STEP),
            );
        }
        let analytic: Vec<f64> = g.params.iter().chain(&g.input).copied().collect();
        let scale = fd.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let err = analytic
            .iter()
            .zip(&fd)
            .fold(0.0_f64, |m, (a, f)| m.max((a - f).abs()));
        worst = worst.max(err / scale);
    }
    worst
}

/// Two-segment chain with an arbitrary generation probability.
pub fn two_segment(p: f64, decay: f64) -> DerivedParams {
    DerivedParams {
        n_segments: 2,
        tau0_s: 1e-4,
        eta: p,
        p_gen: p,
        decay_per_step: decay,
        t_max_steps: None,
    }
}

#[derive(Debug, Clone)]
pub struct GridPoint {
    pub p: f64,
    pub cutoff: Option<u32>,
    pub simulated: f64,
    pub ci3sigma: f64,
    pub exact: f64,
}

impl GridPoint {
    pub fn within_ci(&self) -> bool {
        (self.simulated - self.exact).abs() <= self.ci3sigma
    }
}

/// Monte Carlo against the exact renewal result on
/// `p in {0.1, 0.5, 0.9} x cutoff in {1, 3, 10, none}`.
pub fn oracle_grid(decay: f64, trajectories: usize, steps: u64, seed: u64) -> Vec<GridPoint> {
    let cutoffs = [Some(1), Some(3), Some(10), None];
    let mut out = Vec::new();
    for p in [0.1, 0.5, 0.9] {
        let d = two_segment(p, decay);
        let sweep = sweep_cutoff(&d, &cutoffs, steps, trajectories, seed, None).unwrap();
        for row in sweep.rows {
            let exact = exact_two_segment(&d, row.cutoff).unwrap();
            out.push(GridPoint {
                p,
                cutoff: row.cutoff,
                simulated: row.estimate.rate_per_s,
                ci3sigma: row.estimate.ci3sigma,
                exact: exact.rate_per_s,
            });
        }
    }
    out
}
