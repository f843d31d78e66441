//! Adam and the EMA teacher update against plain reference recurrences.

use ctta_core::nn::{Param, ParamSet};
use ctta_core::optim::{ema_update, AdamConfig, OptimizerState};
use ctta_core::rng::SeedKey;
use proptest::prelude::*;
use rand::Rng;

fn params(values: Vec<f64>) -> ParamSet {
    let n = values.len();
    let split = n / 2;
    ParamSet::new(vec![
        Param::new("a", vec![split], values[..split].to_vec()).unwrap(),
        Param::new("b", vec![n - split], values[split..].to_vec()).unwrap(),
    ])
}

/// Textbook bias-corrected Adam on a flat vector.
struct ReferenceAdam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl ReferenceAdam {
    fn step(&mut self, theta: &mut [f64], g: &[f64]) {
        self.t += 1;
        for i in 0..theta.len() {
            self.m[i] = self.cfg.beta1 * self.m[i] + (1.0 - self.cfg.beta1) * g[i];
            self.v[i] = self.cfg.beta2 * self.v[i] + (1.0 - self.cfg.beta2) * g[i] * g[i];
            let m_hat = self.m[i] / (1.0 - self.cfg.beta1.powi(self.t));
            let v_hat = self.v[i] / (1.0 - self.cfg.beta2.powi(self.t));
            theta[i] -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
        }
    }
}

#[test]
fn adam_matches_reference_recurrence() {
    let mut rng = SeedKey(5).derive(2000, 0);
    let n = 9;
    let cfg = AdamConfig::with_lr(3e-3);
    let mut theta: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut p = params(theta.clone());
    let mut opt = OptimizerState::new(cfg, &p);
    let mut reference = ReferenceAdam {
        cfg,
        m: vec![0.0; n],
        v: vec![0.0; n],
        t: 0,
    };
    for _ in 0..200 {
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        opt.adam_step(&mut p, &params(g.clone())).unwrap();
        reference.step(&mut theta, &g);
        for (a, b) in p.flat_iter().zip(&theta) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
    assert_eq!(opt.step(), 200);
}

#[test]
fn adam_first_step_is_learning_rate_times_sign() {
    let mut p = params(vec![0.0, 0.0, 0.0, 0.0]);
    let mut opt = OptimizerState::new(AdamConfig::with_lr(0.01), &p);
    opt.adam_step(&mut p, &params(vec![3.0, -0.5, 1e-3, -40.0])).unwrap();
    for (x, s) in p.flat_iter().zip([-1.0, 1.0, -1.0, 1.0]) {
        assert!((x - s * 0.01).abs() < 1e-7, "{x}");
    }
}

#[test]
fn adam_descends_a_quadratic() {
    // f(x) = sum (x - 3)^2
    let mut p = params(vec![0.0; 4]);
    let mut opt = OptimizerState::new(AdamConfig::with_lr(0.05), &p);
    for _ in 0..2000 {
        let g = params(p.flat_iter().map(|x| 2.0 * (x - 3.0)).collect());
        opt.adam_step(&mut p, &g).unwrap();
    }
    assert!(p.flat_iter().all(|x| (x - 3.0).abs() < 1e-3));
}

#[test]
fn adam_rejects_non_finite_gradient() {
    let mut p = params(vec![0.0, 1.0]);
    let mut opt = OptimizerState::new(AdamConfig::default(), &p);
    let mut g = params(vec![0.0, 0.0]);
    g.flat_set(0, f64::NAN);
    assert!(opt.adam_step(&mut p, &g).is_err());
    assert_eq!(opt.step(), 0);
}

proptest! {
    #[test]
    fn ema_is_a_convex_combination(
        t in proptest::collection::vec(-5.0f64..5.0, 4),
        s in proptest::collection::vec(-5.0f64..5.0, 4),
        m in 0.0f64..0.9999,
    ) {
        let out = ema_update(&params(t.clone()), &params(s.clone()), m).unwrap();
        for ((o, a), b) in out.flat_iter().zip(&t).zip(&s) {
            prop_assert!((o - (m * a + (1.0 - m) * b)).abs() < 1e-12);
            prop_assert!(o >= a.min(*b) - 1e-12 && o <= a.max(*b) + 1e-12);
        }
    }

    #[test]
    fn ema_contracts_toward_fixed_student(
        t in proptest::collection::vec(-5.0f64..5.0, 4),
        s in proptest::collection::vec(-5.0f64..5.0, 4),
        m in 0.5f64..0.999,
    ) {
        let student = params(s.clone());
        let mut teacher = params(t.clone());
        let gap = |p: &ParamSet| p.flat_iter().zip(&s).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let mut prev = gap(&teacher);
        for _ in 0..20 {
            teacher = ema_update(&teacher, &student, m).unwrap();
            let g = gap(&teacher);
            prop_assert!(g <= m * prev + 1e-12);
            prev = g;
        }
    }
}

#[test]
fn ema_momentum_edges() {
    let t = params(vec![1.0, 2.0]);
    let s = params(vec![5.0, -1.0]);
    assert_eq!(ema_update(&t, &s, 0.0).unwrap(), s);
    assert!(ema_update(&t, &s, 1.0).is_err());
    assert!(ema_update(&t, &s, -0.1).is_err());
}
