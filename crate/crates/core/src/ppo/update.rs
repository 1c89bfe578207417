use crate::error::{Error, Result};
use crate::neuralnet::{adam_step, sigmoid, AdamState, Direction, ForwardCache, Mlp};
use crate::policies::{bit_log_prob, logit_clamp};

use super::buffer::{group_values, ExperienceBuffer};

/// Clipped surrogate of one row as a function of the probability ratio.
#[inline]
pub fn clipped_objective(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

/// `d objective / d ratio`; zero where the clipped branch is the minimum.
#[inline]
fn clipped_slope(ratio: f64, advantage: f64, eps: f64) -> f64 {
    let unclipped = if advantage >= 0.0 {
        ratio <= 1.0 + eps
    } else {
        ratio >= 1.0 - eps
    };
    if unclipped {
        advantage
    } else {
        0.0
    }
}

/// Surrogate, approximate KL and (optionally) the ascent gradient of the
/// policy network over a buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateEval {
    pub surrogate: f64,
    /// `mean(logp_old - logp_new)`.
    pub approx_kl: f64,
    pub grad: Option<Vec<f64>>,
}

/// Work space reused across policy steps.
pub struct PolicyScratch {
    caches: Vec<ForwardCache>,
    grad_logits: Vec<f64>,
}

impl PolicyScratch {
    pub fn new(net: &Mlp, buf: &ExperienceBuffer) -> Self {
        Self {
            caches: (0..buf.n_groups()).map(|_| net.new_cache()).collect(),
            grad_logits: vec![0.0; buf.n_groups() * net.output_dim()],
        }
    }
}

pub fn evaluate_surrogate(
    net: &Mlp,
    buf: &ExperienceBuffer,
    eps: f64,
    want_grad: bool,
    scratch: &mut PolicyScratch,
) -> Result<SurrogateEval> {
    if buf.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    if buf.advantages.len() != buf.len() {
        return Err(Error::invalid(
            "advantages",
            "compute advantages before updating",
        ));
    }
    if net.input_dim() != buf.obs_dim() || net.output_dim() != buf.act_dim() {
        return Err(Error::Dimension {
            expected: buf.act_dim(),
            got: net.output_dim(),
        });
    }
    let k = net.output_dim();
    for g in 0..buf.n_groups() {
        net.forward_into(buf.group_obs(g), &mut scratch.caches[g])?;
    }
    scratch.grad_logits.fill(0.0);
    let bound = logit_clamp();
    let n = buf.len() as f64;
    let (mut surrogate, mut kl) = (0.0, 0.0);
    for row in 0..buf.len() {
        let g = buf.group_of(row);
        let z = scratch.caches[g].logits();
        let bits = buf.action(row);
        let logp: f64 = z
            .iter()
            .zip(bits)
            .map(|(&zi, &b)| bit_log_prob(zi, b))
            .sum();
        let ratio = (logp - buf.log_probs[row]).exp();
        let adv = buf.advantages[row];
        surrogate += clipped_objective(ratio, adv, eps);
        kl += buf.log_probs[row] - logp;
        if want_grad {
            let coef = clipped_slope(ratio, adv, eps) * ratio / n;
            if coef != 0.0 {
                let gl = &mut scratch.grad_logits[g * k..(g + 1) * k];
                for ((slot, &zi), &b) in gl.iter_mut().zip(z).zip(bits) {
                    // d ln P(b) / dz = b - sigmoid(z), flat outside the clamp.
                    if zi.abs() < bound {
                        *slot += coef * (f64::from(u8::from(b)) - sigmoid(zi));
                    }
                }
            }
        }
    }
    let grad = if want_grad {
        let mut grad = vec![0.0; net.n_params()];
        for g in 0..buf.n_groups() {
            let gl = &scratch.grad_logits[g * k..(g + 1) * k];
            if gl.iter().any(|&v| v != 0.0) {
                net.accumulate_logit_grad(&scratch.caches[g], gl, &mut grad);
            }
        }
        Some(grad)
    } else {
        None
    };
    let out = SurrogateEval {
        surrogate: surrogate / n,
        approx_kl: kl / n,
        grad,
    };
    if !out.surrogate.is_finite() || !out.approx_kl.is_finite() {
        return Err(Error::NonFinite("policy surrogate".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyStats {
    pub steps: u32,
    pub approx_kl: f64,
    /// Negated surrogate at the final parameters.
    pub loss: f64,
}

/// Up to `max_steps` Adam ascent steps on the clipped surrogate, stopping
/// as soon as the approximate KL to the collecting policy exceeds `kl_max`.
pub fn policy_update(
    net: &mut Mlp,
    adam: &mut AdamState,
    buf: &ExperienceBuffer,
    lr: f64,
    eps: f64,
    max_steps: u32,
    kl_max: f64,
) -> Result<PolicyStats> {
    let mut scratch = PolicyScratch::new(net, buf);
    let mut steps = 0;
    loop {
        let want_grad = steps < max_steps;
        let eval = evaluate_surrogate(net, buf, eps, want_grad, &mut scratch)?;
        if !want_grad || eval.approx_kl > kl_max {
            return Ok(PolicyStats {
                steps,
                approx_kl: eval.approx_kl,
                loss: -eval.surrogate,
            });
        }
        let grad = eval.grad.expect("requested");
        adam_step(net.params_mut(), &grad, adam, lr, Direction::Ascent)?;
        net.check_finite()?;
        steps += 1;
    }
}

/// Mean squared error of the value network and its gradient, using one
/// evaluation per distinct observation.
pub fn value_loss(
    net: &Mlp,
    buf: &ExperienceBuffer,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    if buf.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let (count, sum) = buf.group_return_sums();
    let values = group_values(buf, net)?;
    let n = buf.len() as f64;
    let mut mse = 0.0;
    for (row, &r) in buf.returns.iter().enumerate() {
        let e = values[buf.group_of(row)] - r;
        mse += e * e;
    }
    mse /= n;
    if !mse.is_finite() {
        return Err(Error::NonFinite("value loss".into()));
    }
    if !want_grad {
        return Ok((mse, None));
    }
    let mut grad = vec![0.0; net.n_params()];
    let mut cache = net.new_cache();
    for g in 0..buf.n_groups() {
        let dv = 2.0 * (count[g] * values[g] - sum[g]) / n;
        if dv != 0.0 {
            net.forward_into(buf.group_obs(g), &mut cache)?;
            net.accumulate_logit_grad(&cache, &[dv], &mut grad);
        }
    }
    Ok((mse, Some(grad)))
}

/// `steps` Adam descent steps on the value regression. Returns the error
/// after the last step.
pub fn value_update(
    net: &mut Mlp,
    adam: &mut AdamState,
    buf: &ExperienceBuffer,
    lr: f64,
    steps: u32,
) -> Result<f64> {
    if net.output_dim() != 1 {
        return Err(Error::Dimension {
            expected: 1,
            got: net.output_dim(),
        });
    }
    for _ in 0..steps {
        let (_, grad) = value_loss(net, buf, true)?;
        adam_step(
            net.params_mut(),
            &grad.expect("requested"),
            adam,
            lr,
            Direction::Descent,
        )?;
        net.check_finite()?;
    }
    Ok(value_loss(net, buf, false)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuralnet::Activation;
    use crate::policies::log_prob_from_logits;
    use crate::seeds::rng_for;
    use rand::Rng;

    /// Buffer whose stored log-probabilities come from `net` itself.
    fn on_policy_buffer(net: &Mlp, rows: usize, seed: u64) -> ExperienceBuffer {
        let mut rng = rng_for(seed, &[]);
        let mut b = ExperienceBuffer::new(net.input_dim(), net.output_dim());
        for _ in 0..rows {
            // A handful of distinct observations, so groups are shared.
            let obs: Vec<f64> = (0..net.input_dim())
                .map(|_| f64::from(rng.random_range(0..3u8)) * 0.2)
                .collect();
            let (_, cache) = net.forward(&obs).unwrap();
            let bits: Vec<bool> = cache
                .output()
                .iter()
                .map(|&p| rng.random::<f64>() < p)
                .collect();
            let lp = log_prob_from_logits(cache.logits(), &bits);
            b.push(&obs, &bits, lp, rng.random::<f64>() * 3.0).unwrap();
        }
        b
    }

    fn policy_net(seed: u64) -> Mlp {
        Mlp::init(&[4, 8, 3], Activation::Tanh, Activation::Sigmoid, seed, 1.0).unwrap()
    }

    fn with_advantages(mut b: ExperienceBuffer, seed: u64) -> ExperienceBuffer {
        let mut rng = rng_for(seed, &[1]);
        b.advantages = (0..b.len())
            .map(|_| rng.random::<f64>() * 2.0 - 1.0)
            .collect();
        b
    }

    #[test]
    fn surrogate_at_collection_policy_is_mean_advantage() {
        let net = policy_net(1);
        let b = with_advantages(on_policy_buffer(&net, 300, 2), 3);
        let mut s = PolicyScratch::new(&net, &b);
        let e = evaluate_surrogate(&net, &b, 0.2, false, &mut s).unwrap();
        let mean = b.advantages.iter().sum::<f64>() / b.len() as f64;
        assert_eq!(e.surrogate, mean);
        assert_eq!(e.approx_kl, 0.0);
    }

    #[test]
    fn clip_flattens_beyond_bound() {
        // One action, A = +1, eps = 0.2: objective is min(r, 1.2).
        for &r in &[0.5, 1.0, 1.1, 1.2, 1.3, 2.0] {
            assert!((clipped_objective(r, 1.0, 0.2) - r.min(1.2)).abs() < 1e-15);
        }
        assert_eq!(clipped_slope(1.3, 1.0, 0.2), 0.0);
        assert_eq!(clipped_slope(1.1, 1.0, 0.2), 1.0);
        // Negative advantage: flat below 1 - eps.
        assert_eq!(clipped_objective(0.5, -1.0, 0.2), -0.8);
        assert_eq!(clipped_slope(0.5, -1.0, 0.2), 0.0);
        assert_eq!(clipped_slope(1.5, -1.0, 0.2), -1.0);
    }

    #[test]
    fn zero_advantages_leave_policy_unchanged() {
        let mut net = policy_net(4);
        let mut b = on_policy_buffer(&net, 100, 5);
        b.advantages = vec![0.0; b.len()];
        let before = net.clone();
        let mut adam = AdamState::new(net.n_params(), 1e-8);
        let stats = policy_update(&mut net, &mut adam, &b, 1e-2, 0.2, 10, 0.015).unwrap();
        assert_eq!(net, before);
        assert_eq!(stats.steps, 10);
        assert_eq!(stats.approx_kl, 0.0);
    }

    #[test]
    fn policy_gradient_matches_finite_differences() {
        let net = policy_net(6);
        let mut b = with_advantages(on_policy_buffer(&net, 80, 7), 8);
        // Move away from the collection point so some rows are clipped.
        let mut moved = net.clone();
        for (k, p) in moved.params_mut().iter_mut().enumerate() {
            *p += 0.05 * ((k % 7) as f64 - 3.0);
        }
        b.log_probs.iter_mut().for_each(|_| {});
        let mut s = PolicyScratch::new(&moved, &b);
        let g = evaluate_surrogate(&moved, &b, 0.2, true, &mut s)
            .unwrap()
            .grad
            .unwrap();
        let h = 1e-6;
        let mut checked = 0;
        for k in (0..moved.n_params()).step_by(5) {
            let mut plus = moved.clone();
            plus.params_mut()[k] += h;
            let mut minus = moved.clone();
            minus.params_mut()[k] -= h;
            let fp = evaluate_surrogate(&plus, &b, 0.2, false, &mut s)
                .unwrap()
                .surrogate;
            let fm = evaluate_surrogate(&minus, &b, 0.2, false, &mut s)
                .unwrap()
                .surrogate;
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                (fd - g[k]).abs() <= 1e-6 * fd.abs().max(1e-3),
                "param {k}: fd {fd} vs {}",
                g[k]
            );
            checked += 1;
        }
        assert!(checked >= 10);
    }

    #[test]
    fn kl_stop_bounds_the_update() {
        let mut net = policy_net(9);
        let b = with_advantages(on_policy_buffer(&net, 400, 10), 11);
        let mut adam = AdamState::new(net.n_params(), 1e-8);
        let stats = policy_update(&mut net, &mut adam, &b, 0.05, 0.2, 200, 0.01).unwrap();
        assert!(stats.steps < 200);
        assert!(stats.approx_kl > 0.01);
        let mut s = PolicyScratch::new(&net, &b);
        let e = evaluate_surrogate(&net, &b, 0.2, false, &mut s).unwrap();
        assert_eq!(e.approx_kl, stats.approx_kl);
    }

    #[test]
    fn policy_update_improves_surrogate() {
        let mut net = policy_net(12);
        let b = with_advantages(on_policy_buffer(&net, 400, 13), 14);
        let mean_adv = b.advantages.iter().sum::<f64>() / b.len() as f64;
        let mut adam = AdamState::new(net.n_params(), 1e-8);
        let stats = policy_update(&mut net, &mut adam, &b, 1e-3, 0.2, 20, 1.0).unwrap();
        assert_eq!(stats.steps, 20);
        assert!(-stats.loss > mean_adv);
    }

    fn value_buffer(targets: &[f64]) -> ExperienceBuffer {
        let mut b = ExperienceBuffer::new(2, 1);
        for (k, &t) in targets.iter().enumerate() {
            b.push(&[(k % 4) as f64 * 0.25, 1.0], &[false], -0.5, t)
                .unwrap();
        }
        b
    }

    #[test]
    fn value_regression_reaches_constant_target() {
        let b = value_buffer(&[2.0; 40]);
        let mut v = Mlp::init(&[2, 8, 1], Activation::Tanh, Activation::Identity, 3, 1.0).unwrap();
        let mut adam = AdamState::new(v.n_params(), 1e-8);
        let (start, _) = value_loss(&v, &b, false).unwrap();
        let first = value_update(&mut v, &mut adam, &b, 1e-2, 1).unwrap();
        assert!(first < start);
        let end = value_update(&mut v, &mut adam, &b, 1e-2, 600).unwrap();
        assert!(end < 1e-4, "mse {end}");
    }

    #[test]
    fn value_gradient_single_sample_by_hand() {
        // Identity head over a zero hidden layer: V = b_out, so
        // d/db (V - R)^2 = 2 (b - R).
        let b = value_buffer(&[3.0]);
        let mut v = Mlp::zeros(&[2, 4, 1], Activation::Tanh, Activation::Identity).unwrap();
        v.layer_mut(1).1[0] = 1.0;
        let (mse, grad) = value_loss(&v, &b, true).unwrap();
        assert_eq!(mse, 4.0);
        let grad = grad.unwrap();
        assert_eq!(*grad.last().unwrap(), -4.0);
        assert!(grad[..grad.len() - 1].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn value_gradient_matches_per_row_sum() {
        let b = value_buffer(&[0.3, 1.2, -0.4, 2.2, 0.9, 0.1, 1.7]);
        let v = Mlp::init(&[2, 5, 1], Activation::Tanh, Activation::Identity, 4, 1.0).unwrap();
        let (_, grad) = value_loss(&v, &b, true).unwrap();
        let grad = grad.unwrap();
        let mut direct = vec![0.0; v.n_params()];
        for row in 0..b.len() {
            let (out, cache) = v.forward(b.observation(row)).unwrap();
            let g = v
                .backward(&cache, &[2.0 * (out[0] - b.returns[row]) / b.len() as f64])
                .unwrap();
            for (d, x) in direct.iter_mut().zip(&g.params) {
                *d += x;
            }
        }
        for (a, c) in grad.iter().zip(&direct) {
            assert!((a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_buffer_is_an_error() {
        let b = ExperienceBuffer::new(2, 1);
        let v = Mlp::zeros(&[2, 4, 1], Activation::Tanh, Activation::Identity).unwrap();
        assert!(value_loss(&v, &b, false).is_err());
    }
}
