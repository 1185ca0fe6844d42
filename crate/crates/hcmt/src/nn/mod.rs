//! Minimal differentiable kernel: dense layers, MLPs, layer normalization,
//! clipping, feature normalizers, and Adam with exponential learning-rate
//! decay.
//!
//! There is no tape. Every layer exposes an explicit `forward` that returns a
//! context of saved activations and a `backward` that consumes it, accumulates
//! parameter gradients into the [`Tensor`] gradient slots, and returns (or
//! accumulates) input gradients. All math is f64.

mod adam;
mod checkpoint;
mod layers;
mod normalizer;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{read_blocks, write_blocks, Block, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use layers::{relu, relu_backward, LayerNorm, LayerNormCtx, Linear, Mlp, MlpCtx, MlpSpec};
pub use normalizer::Normalizer;
pub use tensor::Tensor;

use crate::Result;

/// Anything that owns named parameter tensors. Names are `.`-joined paths;
/// visitation order is deterministic.
pub trait ParamSet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn zero_grads(set: &mut impl ParamSet) {
    set.visit_mut("", &mut |_, t| t.zero_grad());
}

pub fn num_params(set: &impl ParamSet) -> usize {
    let mut n = 0;
    set.visit("", &mut |_, t| n += t.len());
    n
}

/// Flattened catalog of (name, element count), in visitation order.
pub fn param_catalog(set: &impl ParamSet) -> Vec<(String, usize)> {
    let mut out = Vec::new();
    set.visit("", &mut |name, t| out.push((name.to_string(), t.len())));
    out
}

pub fn read_param(set: &impl ParamSet, name: &str, index: usize) -> f64 {
    let mut value = f64::NAN;
    set.visit("", &mut |n, t| {
        if n == name {
            value = t.values()[index];
        }
    });
    value
}

pub fn write_param(set: &mut impl ParamSet, name: &str, index: usize, value: f64) {
    set.visit_mut("", &mut |n, t| {
        if n == name {
            t.values_mut()[index] = value;
        }
    });
}

pub fn read_grad(set: &impl ParamSet, name: &str, index: usize) -> f64 {
    let mut value = f64::NAN;
    set.visit("", &mut |n, t| {
        if n == name {
            value = t.grad()[index];
        }
    });
    value
}

/// Relative error with an absolute floor of 1e-6, so near-zero pairs compare
/// absolutely at ~1e-11 resolution (the noise floor of central differences).
pub fn max_rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Clamp with pass-through gradient strictly inside `[lo, hi]` and zero
/// gradient outside.
pub fn clip(x: f64, lo: f64, hi: f64) -> (f64, f64) {
    if x < lo {
        (lo, 0.0)
    } else if x > hi {
        (hi, 0.0)
    } else {
        (x, 1.0)
    }
}

/// Checks every parameter (values and gradients) for non-finite entries.
pub fn check_finite(set: &impl ParamSet) -> Result<()> {
    let mut bad: Option<String> = None;
    set.visit("", &mut |name, t| {
        if bad.is_none() && !t.values().iter().all(|v| v.is_finite()) {
            bad = Some(format!("parameter {name} has non-finite values"));
        }
        if bad.is_none() && !t.grad().iter().all(|v| v.is_finite()) {
            bad = Some(format!("parameter {name} has non-finite gradient"));
        }
    });
    match bad {
        Some(msg) => Err(crate::Error::Numerical(msg)),
        None => Ok(()),
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;

    /// Central-difference gradient check for a scalar loss over all
    /// parameters of a set. Panics with the offending parameter name when the
    /// worst relative error exceeds `bound`.
    pub(crate) fn assert_grads_match<T: ParamSet>(
        set: &mut T,
        mut loss: impl FnMut(&T) -> f64,
        analytic: impl Fn(&T, &str, usize) -> f64,
        h: f64,
        bound: f64,
    ) -> f64 {
        let catalog = param_catalog(set);
        let mut worst = 0.0f64;
        let mut worst_at = (String::new(), 0usize, 0.0f64, 0.0f64);
        for (name, len) in catalog {
            for k in 0..len {
                let orig = read_param(set, &name, k);
                write_param(set, &name, k, orig + h);
                let plus = loss(set);
                write_param(set, &name, k, orig - h);
                let minus = loss(set);
                write_param(set, &name, k, orig);
                let fd = (plus - minus) / (2.0 * h);
                let a = analytic(set, &name, k);
                let err = max_rel_err(a, fd);
                if err > worst {
                    worst = err;
                    worst_at = (name.clone(), k, a, fd);
                }
            }
        }
        assert!(
            worst < bound,
            "max relative error {worst} at {}[{}]: analytic {} vs fd {}",
            worst_at.0,
            worst_at.1,
            worst_at.2,
            worst_at.3
        );
        worst
    }

    #[test]
    fn mlp_zero_params_output_zero() {
        let spec = MlpSpec { in_dim: 3, hidden_dim: 8, out_dim: 2, num_hidden_layers: 2, output_layernorm: false };
        let mut rng = crate::rng_from_seed(0);
        let mut mlp = Mlp::new(spec, &mut rng);
        mlp.visit_mut("", &mut |_, t| t.values_mut().fill(0.0));
        let x = Array2::from_shape_vec((2, 3), vec![1.0, -2.0, 0.5, 3.0, 4.0, -1.0]).unwrap();
        let (y, _) = mlp.forward(x.view()).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_linear_layer_passes_input_through() {
        let mut rng = crate::rng_from_seed(0);
        let mut lin = Linear::new(3, 3, true, &mut rng);
        lin.weight.values_mut().copy_from_slice(&[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
        lin.bias.as_mut().unwrap().values_mut().fill(0.0);
        let x = Array2::from_shape_vec((1, 3), vec![0.3, -1.2, 7.0]).unwrap();
        let y = lin.forward(x.view());
        assert_eq!(y, x);
    }

    #[test]
    fn layer_norm_matches_definition() {
        let mut rng = crate::rng_from_seed(0);
        let mut ln = LayerNorm::new(2, &mut rng);
        ln.gain.values_mut().fill(1.0);
        ln.shift.values_mut().fill(0.0);
        let x = Array2::from_shape_vec((1, 2), vec![1.0, -1.0]).unwrap();
        let (y, _) = ln.forward(x.view());
        // mean 0, population std 1 up to the 1e-8 epsilon
        assert!((y[[0, 0]] - 1.0).abs() < 1e-6);
        assert!((y[[0, 1]] + 1.0).abs() < 1e-6);

        let c = Array2::from_shape_vec((1, 2), vec![3.0, 3.0]).unwrap();
        let (y, _) = ln.forward(c.view());
        assert!(y.iter().all(|&v| v.abs() < 1e-9), "constant rows normalize to zero");

        ln.gain.values_mut().fill(0.0);
        ln.shift.values_mut().fill(0.7);
        let (y, _) = ln.forward(x.view());
        assert!(y.iter().all(|&v| (v - 0.7).abs() < 1e-12), "zero gain yields the shift");
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clip(5.0, -2.0, 2.0).0, 2.0);
        assert_eq!(clip(-3.0, -2.0, 2.0).0, -2.0);
        assert_eq!(clip(0.5, -2.0, 2.0), (0.5, 1.0));
        assert_eq!(clip(5.0, -2.0, 2.0).1, 0.0);
    }

    #[test]
    fn mlp_gradient_matches_central_differences() {
        let spec = MlpSpec { in_dim: 4, hidden_dim: 6, out_dim: 3, num_hidden_layers: 2, output_layernorm: true };
        let mut rng = crate::rng_from_seed(42);
        let mut mlp = Mlp::new(spec, &mut rng);
        let x = Array2::from_shape_fn((5, 4), |_| rng.gen_range(-1.0..1.0));
        // Loss: 0.5 * sum(y^2), so dL/dy = y.
        let weights = Array2::from_shape_fn((5, 3), |_| rng.gen_range(0.5..1.5));

        zero_grads(&mut mlp);
        let (y, ctx) = mlp.forward(x.view()).unwrap();
        let dy = &y * &weights;
        let mut dx = Array2::zeros(x.raw_dim());
        mlp.backward(&ctx, dy.view(), Some(&mut dx.view_mut()));

        assert_grads_match(
            &mut mlp,
            |m| {
                let (y, _) = m.forward(x.view()).unwrap();
                0.5 * (&y * &y * &weights).sum()
            },
            |m, name, k| read_grad(m, name, k),
            1e-5,
            1e-6,
        );

        // Input gradient against central differences on a few probes.
        let mut worst_x = 0.0f64;
        for (r, c) in [(0, 0), (2, 3), (4, 1)] {
            let mut xp = x.clone();
            xp[[r, c]] += 1e-5;
            let (yp, _) = mlp.forward(xp.view()).unwrap();
            xp[[r, c]] -= 2e-5;
            let (ym, _) = mlp.forward(xp.view()).unwrap();
            let plus = 0.5 * (&yp * &yp * &weights).sum();
            let minus = 0.5 * (&ym * &ym * &weights).sum();
            worst_x = worst_x.max(max_rel_err(dx[[r, c]], (plus - minus) / 2e-5));
        }
        assert!(worst_x < 1e-6, "input gradient error {worst_x}");
    }

    #[test]
    fn shape_mismatch_is_error() {
        let spec = MlpSpec { in_dim: 4, hidden_dim: 6, out_dim: 3, num_hidden_layers: 1, output_layernorm: false };
        let mut rng = crate::rng_from_seed(1);
        let mlp = Mlp::new(spec, &mut rng);
        let x = Array2::<f64>::zeros((2, 5));
        assert!(matches!(mlp.forward(x.view()), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn normalizer_roundtrip_and_stats() {
        let mut norm = Normalizer::new(1);
        norm.accumulate_rows(Array2::from_shape_vec((2, 1), vec![0.0, 2.0]).unwrap().view());
        norm.freeze();
        assert!((norm.mean(0) - 1.0).abs() < 1e-12);
        assert!((norm.std(0) - 1.0).abs() < 1e-12);
        assert!((norm.normalize_value(0, 2.0) - 1.0).abs() < 1e-12);

        let x = 1.2345678;
        let z = norm.normalize_value(0, x);
        assert!((norm.unnormalize_value(0, z) - x).abs() < 1e-10);
    }

    #[test]
    fn constant_feature_normalizes_to_zero() {
        let mut norm = Normalizer::new(1);
        for _ in 0..10 {
            norm.accumulate_rows(Array2::from_elem((1, 1), 5.5).view());
        }
        norm.freeze();
        assert_eq!(norm.normalize_value(0, 5.5), 0.0);
    }

    #[test]
    fn empty_normalizer_is_identity() {
        let norm = Normalizer::new(2);
        assert_eq!(norm.normalize_value(1, 3.25), 3.25);
        assert_eq!(norm.unnormalize_value(1, 3.25), 3.25);
    }

    #[test]
    fn adam_learning_rate_schedule() {
        let cfg = AdamConfig { lr_start: 1e-4, lr_end: 1e-6, total_steps: 1000, ..Default::default() };
        assert!((cfg.lr(0) - 1e-4).abs() < 1e-18);
        assert!((cfg.lr(1000) - 1e-6).abs() < 1e-18);
        assert!((cfg.lr(500) - 1e-5).abs() < 1e-12);
        assert!((cfg.lr(2000) - 1e-6).abs() < 1e-18, "lr clamps at lr_end");
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // Single linear layer fit to y = 2x with MSE; Adam should reduce loss.
        let mut rng = crate::rng_from_seed(9);
        let mut lin = Linear::new(1, 1, false, &mut rng);
        let cfg = AdamConfig { lr_start: 1e-1, lr_end: 1e-2, total_steps: 200, ..Default::default() };
        let mut state = AdamState::new();
        let x = Array2::from_shape_vec((4, 1), vec![-1.0, 0.5, 1.0, 2.0]).unwrap();
        let y = x.mapv(|v| 2.0 * v);
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..200 {
            zero_grads(&mut lin);
            let out = lin.forward(x.view());
            let resid = &out - &y;
            last = (&resid * &resid).mean().unwrap();
            first.get_or_insert(last);
            let dy = resid.mapv(|r| 2.0 * r / 4.0);
            lin.backward(x.view(), dy.view(), None);
            state.step(&cfg, &mut lin).unwrap();
        }
        assert!(last < first.unwrap() * 1e-4, "loss {last} vs {}", first.unwrap());
        assert!((lin.weight.values()[0] - 2.0).abs() < 0.2);
    }

    #[test]
    fn adam_rejects_nan_gradient() {
        let mut rng = crate::rng_from_seed(9);
        let mut lin = Linear::new(1, 1, false, &mut rng);
        lin.weight.grad_mut()[0] = f64::NAN;
        let cfg = AdamConfig::default();
        let mut state = AdamState::new();
        assert!(matches!(state.step(&cfg, &mut lin), Err(crate::Error::Numerical(_))));
    }
}
