//! Two adaptation steps of the full method on the smallest interesting net,
//! recomputed with scalar code: 1 input, 2 tanh units, 2 classes, buffer
//! capacity 2 and batch 2 so the second step replays both stored samples.

use ctta_core::adapter::{AdaptationConfig, Method, TeacherStudentState};
use ctta_core::nn::{Activation, NetworkArch, ParamSet};
use ctta_core::relation::ClassRelationGraph;
use ctta_core::stream::UnlabeledBatch;
use ctta_core::Matrix;

const W1: [f64; 2] = [1.2, -0.7];
const B1: [f64; 2] = [0.1, -0.2];
const W2: [[f64; 2]; 2] = [[0.9, -0.4], [-1.1, 0.8]];
const B2: [f64; 2] = [0.05, -0.05];
const LR: f64 = 1e-2;
const MOMENTUM: f64 = 0.9;
const LAMBDA: f64 = 200.0;
const S_HAT: f64 = 0.6;

/// Flat layout: hidden weight (2), hidden bias (2), classifier weight (4),
/// classifier bias (2).
#[derive(Clone, Copy, Debug)]
struct Net([f64; 10]);

struct Pass {
    a: [f64; 2],
    p: [f64; 2],
}

impl Net {
    fn pass(&self, x: f64) -> Pass {
        let w = &self.0;
        let a = [(w[0] * x + w[2]).tanh(), (w[1] * x + w[3]).tanh()];
        let z0 = w[4] * a[0] + w[5] * a[1] + w[8];
        let z1 = w[6] * a[0] + w[7] * a[1] + w[9];
        let e0 = 1.0 / (1.0 + (z1 - z0).exp());
        Pass { a, p: [e0, 1.0 - e0] }
    }

    /// Adds the gradient contribution of one sample with upstream
    /// derivatives `dz` (logits) and `da` (features).
    fn accumulate(&self, x: f64, dz: [f64; 2], da: [f64; 2], g: &mut [f64; 10]) {
        let w = &self.0;
        let pass = self.pass(x);
        g[4] += dz[0] * pass.a[0];
        g[5] += dz[0] * pass.a[1];
        g[6] += dz[1] * pass.a[0];
        g[7] += dz[1] * pass.a[1];
        g[8] += dz[0];
        g[9] += dz[1];
        for k in 0..2 {
            let back = dz[0] * w[4 + k] + dz[1] * w[6 + k] + da[k];
            let pre = back * (1.0 - pass.a[k] * pass.a[k]);
            g[k] += pre * x;
            g[2 + k] += pre;
        }
    }
}

struct Adam {
    m: [f64; 10],
    v: [f64; 10],
    t: i32,
}

impl Adam {
    fn step(&mut self, net: &mut Net, g: &[f64; 10]) {
        self.t += 1;
        for i in 0..10 {
            self.m[i] = 0.9 * self.m[i] + 0.1 * g[i];
            self.v[i] = 0.999 * self.v[i] + 0.001 * g[i] * g[i];
            let mh = self.m[i] / (1.0 - 0.9f64.powi(self.t));
            let vh = self.v[i] / (1.0 - 0.999f64.powi(self.t));
            net.0[i] -= LR * mh / (vh.sqrt() + 1e-8);
        }
    }
}

fn entropy2(p: [f64; 2]) -> f64 {
    -(p[0] * p[0].ln() + p[1] * p[1].ln())
}

/// Symmetric cross-entropy of one sample and its logit derivative, with the
/// derivative of the reverse term written out as -d/dz sum_c p_c ln q_c.
fn sce(q: [f64; 2], p: [f64; 2]) -> (f64, [f64; 2]) {
    let value = -(q[0] * p[0].ln() + q[1] * p[1].ln()) - (p[0] * q[0].ln() + p[1] * q[1].ln());
    // dp_c/dz_j = p_c (delta_cj - p_j)
    let mut dz = [0.0; 2];
    for (j, dzj) in dz.iter_mut().enumerate() {
        let mut rev = 0.0;
        for c in 0..2 {
            let dp = p[c] * (if c == j { 1.0 } else { 0.0 } - p[j]);
            rev -= dp * q[c].ln();
        }
        *dzj = p[j] - q[j] + rev;
    }
    (value, dz)
}

struct Expected {
    predictions: Vec<usize>,
    st: f64,
    pce: f64,
    crp: f64,
    student: Net,
    teacher: Net,
    stored: Vec<(f64, usize)>,
}

fn scalar_trace(batches: &[[f64; 2]; 2]) -> Vec<Expected> {
    let mut student = Net(initial());
    let mut teacher = student;
    let mut adam = Adam {
        m: [0.0; 10],
        v: [0.0; 10],
        t: 0,
    };
    // (x, student entropy, teacher label, step)
    let mut buffer: Vec<(f64, f64, usize, u64)> = Vec::new();
    let mut out = Vec::new();
    for (step, xs) in batches.iter().enumerate() {
        let replay = buffer.clone();
        let mut g = [0.0; 10];
        let mut predictions = Vec::new();
        let mut st = 0.0;
        for &x in xs {
            let p = student.pass(x).p;
            let q = teacher.pass(x).p;
            predictions.push(usize::from(p[1] > p[0]));
            let (v, dz) = sce(q, p);
            st += v / 2.0;
            student.accumulate(x, [dz[0] / 2.0, dz[1] / 2.0], [0.0; 2], &mut g);
        }
        for &x in xs {
            let h = entropy2(student.pass(x).p);
            let q = teacher.pass(x).p;
            let label = usize::from(q[1] > q[0]);
            if h >= 2f64.ln() {
                continue;
            }
            if buffer.len() < 2 {
                buffer.push((x, h, label, step as u64));
            } else {
                let worst = (0..2)
                    .max_by(|&i, &j| buffer[i].1.total_cmp(&buffer[j].1).then(buffer[j].3.cmp(&buffer[i].3)))
                    .unwrap();
                if h < buffer[worst].1 {
                    buffer[worst] = (x, h, label, step as u64);
                }
            }
        }
        let (mut pce, mut crp) = (0.0, 0.0);
        if !replay.is_empty() {
            let n = replay.len() as f64;
            for &(x, _, y, _) in &replay {
                let p = student.pass(x).p;
                pce -= p[y].ln() / n;
                let mut dz = p;
                dz[y] -= 1.0;
                student.accumulate(x, [dz[0] / n, dz[1] / n], [0.0; 2], &mut g);
            }
            // One stored sample per class: each vertex is its normalised
            // feature and the target edge is s = u0 . u1.
            assert_eq!(replay.len(), 2);
            assert_ne!(replay[0].2, replay[1].2);
            let feat = |y: usize| student.pass(replay.iter().find(|r| r.2 == y).unwrap().0).a;
            let (f0, f1) = (feat(0), feat(1));
            let n0 = (f0[0] * f0[0] + f0[1] * f0[1]).sqrt();
            let n1 = (f1[0] * f1[0] + f1[1] * f1[1]).sqrt();
            let u0 = [f0[0] / n0, f0[1] / n0];
            let u1 = [f1[0] / n1, f1[1] / n1];
            let s = u0[0] * u1[0] + u0[1] * u1[1];
            let a = (2.0 + 2.0 * S_HAT * S_HAT).sqrt();
            let b = (2.0 + 2.0 * s * s).sqrt();
            crp = -(2.0 + 2.0 * S_HAT * s) / (a * b);
            let dl_ds = -(2.0 * S_HAT * b - (2.0 + 2.0 * S_HAT * s) * (2.0 * s / b)) / (a * b * b);
            // du/df = (I - u u^T) / |f|
            let project = |u: [f64; 2], other: [f64; 2], norm: f64| {
                let dot = u[0] * other[0] + u[1] * other[1];
                [
                    LAMBDA * dl_ds * (other[0] - dot * u[0]) / norm,
                    LAMBDA * dl_ds * (other[1] - dot * u[1]) / norm,
                ]
            };
            for &(x, _, y, _) in &replay {
                let da = if y == 0 {
                    project(u0, u1, n0)
                } else {
                    project(u1, u0, n1)
                };
                student.accumulate(x, [0.0; 2], da, &mut g);
            }
        }
        adam.step(&mut student, &g);
        for i in 0..10 {
            teacher.0[i] = MOMENTUM * teacher.0[i] + (1.0 - MOMENTUM) * student.0[i];
        }
        let mut stored: Vec<(f64, usize)> = buffer.iter().map(|e| (e.1, e.2)).collect();
        stored.sort_by(|a, b| a.0.total_cmp(&b.0));
        out.push(Expected {
            predictions,
            st,
            pce,
            crp,
            student,
            teacher,
            stored,
        });
    }
    out
}

/// Outcome of replaying the trace through the library.
pub struct TraceReport {
    /// Largest absolute difference over losses, parameters and buffer
    /// entropies across both steps.
    pub max_deviation: f64,
    /// Predictions, pseudo-labels and buffer sizes all agreed.
    pub discrete_match: bool,
    /// The second step had nonzero replay and relation terms.
    pub all_terms_live: bool,
}

pub fn replay_trace() -> TraceReport {
    let batches = [[-1.5, 1.5], [0.4, -0.9]];
    let expected = scalar_trace(&batches);

    let arch = NetworkArch::new(1, vec![2], 2, Activation::Tanh).unwrap();
    let mut params: ParamSet = arch.zero_params();
    for (i, v) in initial().into_iter().enumerate() {
        params.flat_set(i, v);
    }
    let graph = ClassRelationGraph::from_vertices(vec![Some(vec![1.0, 0.0]), Some(vec![S_HAT, 0.8])]);
    let config = AdaptationConfig {
        method: Method::Full,
        alpha: 1.0,
        lambda_crp: LAMBDA,
        capacity: 2,
        batch_size: 2,
        lr: LR,
        ema_momentum: MOMENTUM,
        ..Default::default()
    };
    let mut state = TeacherStudentState::new(arch, params, graph, config).unwrap();
    let mut dev = 0.0f64;
    let mut discrete_match = true;
    let mut diff = |a: f64, b: f64| dev = dev.max((a - b).abs());
    for (xs, exp) in batches.iter().zip(&expected) {
        let x = Matrix::from_vec(2, 1, xs.to_vec()).unwrap();
        let out = state.adapt_step(UnlabeledBatch::new(&x)).unwrap();
        discrete_match &= out.predictions == exp.predictions;
        diff(out.losses.self_training, exp.st);
        diff(out.losses.replay, exp.pce);
        diff(out.losses.relation, exp.crp);
        diff(out.losses.total, exp.st + exp.pce + LAMBDA * exp.crp);
        for (a, b) in state.student().flat_iter().zip(exp.student.0) {
            diff(a, b);
        }
        for (a, b) in state.teacher().flat_iter().zip(exp.teacher.0) {
            diff(a, b);
        }
        let mut stored: Vec<(f64, usize)> = state
            .buffer()
            .entries()
            .iter()
            .map(|e| (e.entropy, e.pseudo_label))
            .collect();
        stored.sort_by(|a, b| a.0.total_cmp(&b.0));
        discrete_match &= stored.len() == exp.stored.len();
        for (a, b) in stored.iter().zip(&exp.stored) {
            diff(a.0, b.0);
            discrete_match &= a.1 == b.1;
        }
    }
    TraceReport {
        max_deviation: dev,
        discrete_match,
        all_terms_live: expected[0].pce == 0.0 && expected[1].pce > 0.0 && expected[1].crp < 0.0,
    }
}

fn initial() -> [f64; 10] {
    [
        W1[0], W1[1], B1[0], B1[1], W2[0][0], W2[0][1], W2[1][0], W2[1][1], B2[0], B2[1],
    ]
}
