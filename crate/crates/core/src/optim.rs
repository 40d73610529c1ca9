//! AdamW with decoupled weight decay, warmup + cosine learning-rate schedule,
//! global-norm gradient clipping and the sphere tangent projection.

use serde::{Deserialize, Serialize};

use crate::adapter::GradientBundle;
use crate::error::{Error, Result};
use crate::linalg::{dot, Vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    /// Cosine floor as a fraction of `lr`.
    pub lr_floor_ratio: f64,
    /// Project each unclamped row of the residual gradient onto the tangent
    /// space of its sphere before forming factor gradients.
    pub tangent_projection: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            warmup_steps: 100,
            total_steps: 1000,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            lr_floor_ratio: 0.1,
            tangent_projection: false,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.beta1 && self.beta1 < self.beta2 && self.beta2 < 1.0) {
            return Err(Error::Config(format!("need 0 < beta1 < beta2 < 1, got ({}, {})", self.beta1, self.beta2)));
        }
        // lr = 0 is allowed: it is the degenerate "no training" baseline.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(self.lr_floor_ratio > 0.0 && self.lr_floor_ratio <= 1.0) {
            return Err(Error::Config(format!("lr_floor_ratio must lie in (0, 1], got {}", self.lr_floor_ratio)));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::Config(format!("clip_norm must be > 0, got {}", self.clip_norm)));
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("adam_eps must be > 0 and weight_decay >= 0".into()));
        }
        if self.total_steps <= self.warmup_steps {
            return Err(Error::Config(format!(
                "total_steps ({}) must exceed warmup_steps ({})",
                self.total_steps, self.warmup_steps
            )));
        }
        Ok(())
    }
}

/// Learning rate at `step`: linear warmup from 0, then cosine decay to
/// `lr_floor_ratio·lr` at `total_steps` (held there afterwards).
pub fn lr_at(step: usize, cfg: &OptimConfig) -> Result<f64> {
    if cfg.total_steps <= cfg.warmup_steps {
        return Err(Error::Config(format!(
            "total_steps ({}) must exceed warmup_steps ({})",
            cfg.total_steps, cfg.warmup_steps
        )));
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.lr * step as f64 / cfg.warmup_steps as f64);
    }
    let lr_min = cfg.lr_floor_ratio * cfg.lr;
    let horizon = (cfg.total_steps - cfg.warmup_steps) as f64;
    let t = ((step - cfg.warmup_steps) as f64).min(horizon);
    Ok(lr_min + 0.5 * (cfg.lr - lr_min) * (1.0 + (std::f64::consts::PI * t / horizon).cos()))
}

/// Scale every gradient by `max_norm / g` when the global L2 norm `g`
/// exceeds `max_norm`. Returns the applied scale.
pub fn clip_global_norm(grads: &mut [GradientBundle], max_norm: f64) -> Result<f64> {
    if max_norm.is_nan() || max_norm <= 0.0 {
        return Err(Error::Config(format!("max_norm must be > 0, got {max_norm}")));
    }
    let norm = grads.iter().map(GradientBundle::squared_norm).sum::<f64>().sqrt();
    if norm <= max_norm {
        return Ok(1.0);
    }
    let scale = max_norm / norm;
    for g in grads.iter_mut() {
        for t in g.tensors_mut() {
            for v in t {
                *v *= scale;
            }
        }
    }
    Ok(scale)
}

/// First/second moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimState {
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Scalars held in moment buffers.
    pub fn moment_len(&self) -> usize {
        self.first.iter().chain(&self.second).map(Vec::len).sum()
    }
}

/// One AdamW update with bias correction.
///
/// `params[i].1` says whether decoupled weight decay applies to tensor `i`.
/// Moments are allocated on the first call from the parameter shapes.
pub fn adamw_step(
    params: &mut [(&mut [f64], bool)],
    grads: &[&[f64]],
    state: &mut OptimState,
    cfg: &OptimConfig,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!("{} parameter tensors but {} gradients", params.len(), grads.len())));
    }
    if state.first.is_empty() {
        state.first = params.iter().map(|(p, _)| vec![0.0; p.len()]).collect();
        state.second = state.first.clone();
    }
    if state.first.len() != params.len() {
        return Err(Error::Shape("optimizer state does not match parameter list".into()));
    }
    for (((p, _), g), m) in params.iter().zip(grads).zip(&state.first) {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(Error::Shape("parameter, gradient and moment lengths differ".into()));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - lr * cfg.weight_decay;
    for (i, (values, decays)) in params.iter_mut().enumerate() {
        let g = grads[i];
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        for k in 0..values.len() {
            if *decays {
                values[k] *= decay;
            }
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            values[k] -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

/// `g − (uᵀg/‖u‖²)u`: the component of `g` tangent to the sphere through `u`.
pub fn tangent_project(u: &Vector, g: &Vector) -> Result<Vector> {
    if u.len() != g.len() {
        return Err(Error::Shape(format!("tangent_project: {} vs {}", u.len(), g.len())));
    }
    let uu = dot(u.as_slice(), u.as_slice());
    if uu == 0.0 {
        return Err(Error::Input("tangent projection at the zero vector".into()));
    }
    let c = dot(u.as_slice(), g.as_slice()) / uu;
    Ok(Vector::new(g.as_slice().iter().zip(u.as_slice()).map(|(gv, uv)| gv - c * uv).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{seeded_gaussian, Matrix};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn cfg(warmup: usize, total: usize) -> OptimConfig {
        OptimConfig { lr: 1.0, warmup_steps: warmup, total_steps: total, ..Default::default() }
    }

    #[test]
    fn schedule_examples() {
        let c = cfg(100, 1100);
        assert_eq!(lr_at(100, &c).unwrap(), 1.0);
        assert_relative_eq!(lr_at(1100, &c).unwrap(), 0.1, epsilon = 1e-15);
        assert_relative_eq!(lr_at(600, &c).unwrap(), 0.55, epsilon = 1e-15);
        assert_eq!(lr_at(0, &c).unwrap(), 0.0);
        assert_relative_eq!(lr_at(50, &c).unwrap(), 0.5);
        assert_relative_eq!(lr_at(5000, &c).unwrap(), 0.1, epsilon = 1e-15);
    }

    #[test]
    fn schedule_rejects_short_horizon() {
        assert!(matches!(lr_at(0, &cfg(100, 100)), Err(Error::Config(_))));
        assert!(matches!(lr_at(0, &cfg(100, 50)), Err(Error::Config(_))));
    }

    #[test]
    fn schedule_continuous_and_monotone_after_warmup() {
        let c = cfg(37, 500);
        let before = lr_at(36, &c).unwrap();
        let at = lr_at(37, &c).unwrap();
        assert!((at - before).abs() <= c.lr / 37.0 + 1e-12);
        let mut prev = at;
        for s in 38..=600 {
            let v = lr_at(s, &c).unwrap();
            assert!(v <= prev + 1e-15);
            assert!(v >= 0.1 * c.lr - 1e-15);
            prev = v;
        }
    }

    fn bundle(seed: u64, scale: f64) -> GradientBundle {
        GradientBundle {
            d_a_plus: seeded_gaussian(4, 2, scale, seed),
            d_b_plus: seeded_gaussian(2, 3, scale, seed + 1),
            d_a_minus: Some(seeded_gaussian(4, 2, scale, seed + 2)),
            d_b_minus: Some(seeded_gaussian(2, 3, scale, seed + 3)),
            d_tau: Some(scale),
        }
    }

    #[test]
    fn clip_examples() {
        let mut g = vec![GradientBundle {
            d_a_plus: Matrix::from_rows(&[[2.0]]).unwrap(),
            d_b_plus: Matrix::from_rows(&[[0.0]]).unwrap(),
            d_a_minus: None,
            d_b_minus: None,
            d_tau: None,
        }];
        assert_eq!(clip_global_norm(&mut g, 1.0).unwrap(), 0.5);
        assert_eq!(g[0].d_a_plus.get(0, 0), 1.0);

        let mut small = vec![GradientBundle { d_a_plus: Matrix::from_rows(&[[0.3]]).unwrap(), ..g[0].clone() }];
        assert_eq!(clip_global_norm(&mut small, 1.0).unwrap(), 1.0);
        assert_eq!(small[0].d_a_plus.get(0, 0), 0.3);
        assert!(clip_global_norm(&mut small, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn clipped_norm_bounded(seed in 0u64..1000, scale in 0.01f64..10.0, max in 0.1f64..5.0) {
            let mut g = vec![bundle(seed, scale), bundle(seed + 10, scale)];
            clip_global_norm(&mut g, max).unwrap();
            let n: f64 = g.iter().map(GradientBundle::squared_norm).sum::<f64>().sqrt();
            prop_assert!(n <= max + 1e-12);
        }

        #[test]
        fn tangent_output_orthogonal(seed in 0u64..10_000) {
            let u = Vector::new(seeded_gaussian(1, 9, 1.0, seed).into_data());
            let g = Vector::new(seeded_gaussian(1, 9, 1.0, seed + 7).into_data());
            let t = tangent_project(&u, &g).unwrap();
            prop_assert!(dot(u.as_slice(), t.as_slice()).abs() <= 1e-12 * u.norm() * g.norm());
        }
    }

    #[test]
    fn tangent_examples() {
        let t = tangent_project(&Vector::new(vec![1.0, 0.0]), &Vector::new(vec![3.0, 4.0])).unwrap();
        assert_eq!(t.as_slice(), &[0.0, 4.0]);
        let p = tangent_project(&Vector::new(vec![1.0, 2.0]), &Vector::new(vec![-2.0, -4.0])).unwrap();
        assert!(p.as_slice().iter().all(|v| v.abs() < 1e-15));
        assert!(matches!(tangent_project(&Vector::zeros(2), &Vector::new(vec![1.0, 1.0])), Err(Error::Input(_))));
    }

    #[test]
    fn pure_decay_with_zero_gradient() {
        let c = OptimConfig { weight_decay: 0.01, ..Default::default() };
        let mut p = vec![1.5, -2.0];
        let g = [0.0, 0.0];
        let mut st = OptimState::new();
        adamw_step(&mut [(&mut p[..], true)], &[&g[..]], &mut st, &c, 0.1).unwrap();
        assert_eq!(p, vec![1.5 * (1.0 - 0.1 * 0.01), -2.0 * (1.0 - 0.1 * 0.01)]);
    }

    #[test]
    fn no_decay_on_flagged_tensor() {
        let c = OptimConfig { weight_decay: 0.5, ..Default::default() };
        let mut p = vec![1.0];
        let mut st = OptimState::new();
        adamw_step(&mut [(&mut p[..], false)], &[&[0.0][..]], &mut st, &c, 0.1).unwrap();
        assert_eq!(p, vec![1.0]);
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let c = OptimConfig { weight_decay: 0.0, ..Default::default() };
        let lr = 1e-3;
        let mut p = vec![0.0, 0.0];
        let g = [0.7, -3.0];
        let mut st = OptimState::new();
        let mut last = p.clone();
        for _ in 0..1000 {
            last.clone_from(&p);
            adamw_step(&mut [(&mut p[..], true)], &[&g[..]], &mut st, &c, lr).unwrap();
        }
        // Closed form: m̂ = g and v̂ = g² exactly for a constant gradient, so the
        // step is lr·|g|/(|g| + eps).
        for (k, gk) in g.iter().enumerate() {
            let step = (p[k] - last[k]).abs();
            let expected = lr * gk.abs() / (gk.abs() + c.adam_eps);
            assert_relative_eq!(step, expected, max_relative = 1e-9);
            assert!((step - lr).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_lr_leaves_params() {
        let c = OptimConfig::default();
        let mut p = vec![0.3, -0.2, 5.0];
        let orig = p.clone();
        let mut st = OptimState::new();
        for _ in 0..5 {
            adamw_step(&mut [(&mut p[..], true)], &[&[1.0, -2.0, 0.5][..]], &mut st, &c, 0.0).unwrap();
        }
        assert_eq!(p, orig);
    }

    #[test]
    fn deterministic_traces() {
        let run = || {
            let c = OptimConfig::default();
            let mut p = seeded_gaussian(1, 16, 1.0, 3).into_data();
            let mut st = OptimState::new();
            let mut trace = Vec::new();
            for s in 0..50u64 {
                let g = seeded_gaussian(1, 16, 1.0, 100 + s).into_data();
                adamw_step(&mut [(&mut p[..], true)], &[&g[..]], &mut st, &c, 1e-2).unwrap();
                trace.extend_from_slice(&p);
            }
            trace
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn config_validation() {
        assert!(OptimConfig { beta1: 0.999, beta2: 0.9, ..Default::default() }.validate().is_err());
        assert!(OptimConfig { lr: -1.0, ..Default::default() }.validate().is_err());
        assert!(OptimConfig { lr_floor_ratio: 0.0, ..Default::default() }.validate().is_err());
        assert!(OptimConfig { total_steps: 100, ..Default::default() }.validate().is_err());
        OptimConfig::default().validate().unwrap();
    }
}
