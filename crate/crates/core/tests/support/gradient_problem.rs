//! Random small problems for checking analytic gradients of every loss
//! term against central finite differences.

use ctta_core::gradcheck::{central_difference, max_relative_error};
use ctta_core::losses::{entropy_min_loss, replay_loss, self_training_loss};
use ctta_core::math::softmax;
use ctta_core::nn::{Activation, NetworkArch, ParamSet, Upstream};
use ctta_core::relation::{crp_loss, estimate_target_graph, ClassRelationGraph};
use ctta_core::rng::SeedKey;
use ctta_core::{Matrix, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-6;

pub fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// A random problem: network, live batch, teacher probabilities, replay
/// batch with pseudo-labels covering at least two classes, intrinsic graph.
pub struct Problem {
    pub arch: NetworkArch,
    pub params: ParamSet,
    x: Matrix,
    teacher: Matrix,
    replay_x: Matrix,
    replay_y: Vec<usize>,
    intrinsic: ClassRelationGraph,
    lambda: f64,
}

impl Problem {
    pub fn random(seed: u64) -> Problem {
        let mut rng = SeedKey(seed).derive(1000, 0);
        let activation = if seed % 2 == 0 {
            Activation::Tanh
        } else {
            Activation::Relu
        };
        loop {
            let d = rng.random_range(2..6);
            let depth = rng.random_range(1..3);
            let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(2..9)).collect();
            let classes = rng.random_range(2..6);
            let arch = NetworkArch::new(d, hidden, classes, activation).unwrap();
            let params = arch.init_params(SeedKey(seed));
            let n = rng.random_range(3..8);
            let m = rng.random_range(4..10);
            let x = gaussian_matrix(&mut rng, n, d, 2.0);
            let replay_x = gaussian_matrix(&mut rng, m, d, 2.0);
            let mut replay_y: Vec<usize> = (0..m).map(|_| rng.random_range(0..classes)).collect();
            replay_y[0] = 0;
            replay_y[1] = 1;
            let teacher_logits = gaussian_matrix(&mut rng, n, classes, 2.0);
            let rows: Vec<Vec<f64>> = teacher_logits.iter_rows().map(softmax).collect();
            let teacher = Matrix::from_rows(classes, rows.iter().map(|r| r.as_slice())).unwrap();
            let width = arch.feature_dim();
            let vertices = (0..classes)
                .map(|_| Some((0..width).map(|_| rng.random_range(-1.0..1.0)).collect()))
                .collect();
            let intrinsic = ClassRelationGraph::from_vertices(vertices);
            let p = Problem {
                arch,
                params,
                x,
                teacher,
                replay_x,
                replay_y,
                intrinsic,
                lambda: 200.0,
            };
            // ReLU is not differentiable at zero; keep every pre-activation
            // well clear of the finite-difference step.
            let smooth = activation == Activation::Tanh || p.min_preactivation() > 1e-3;
            if smooth && p.relation_is_live() {
                return p;
            }
        }
    }

    fn min_preactivation(&self) -> f64 {
        [&self.x, &self.replay_x]
            .iter()
            .map(|b| {
                let t = self.arch.forward(&self.params, b).unwrap();
                t.pre_activations()
                    .iter()
                    .flat_map(|m| m.as_slice().iter().map(|v| v.abs()))
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Dead ReLU units can leave the relation term with no gradient at all;
    /// such draws would check nothing.
    fn relation_is_live(&self) -> bool {
        let (value, g) = self.crp(&self.params).unwrap();
        value != 0.0 && g.flat_iter().any(|v| v != 0.0)
    }

    pub fn st(&self, params: &ParamSet) -> Result<(f64, ParamSet)> {
        let t = self.arch.forward(params, &self.x)?;
        let l = self_training_loss(&self.teacher, t.probs())?;
        let g = self.arch.backward(params, &t, &Upstream::logits_only(l.logits))?;
        Ok((l.value, g))
    }

    pub fn pce(&self, params: &ParamSet) -> Result<(f64, ParamSet)> {
        let t = self.arch.forward(params, &self.replay_x)?;
        let l = replay_loss(&self.replay_y, t.probs())?;
        let g = self.arch.backward(params, &t, &Upstream::logits_only(l.logits))?;
        Ok((l.value, g))
    }

    /// `lambda * L_CRP` with the graph estimated from the replay features.
    pub fn crp(&self, params: &ParamSet) -> Result<(f64, ParamSet)> {
        let t = self.arch.forward(params, &self.replay_x)?;
        let target = estimate_target_graph(t.features(), &self.replay_y, self.arch.classes())?.unwrap();
        let l = crp_loss(&self.intrinsic, target.graph())?;
        let mut fg = target.feature_grad(&l.edge_grad);
        fg.as_mut_slice().iter_mut().for_each(|v| *v *= self.lambda);
        let up = Upstream {
            logits: Matrix::zeros(self.replay_x.rows(), self.arch.classes()),
            features: Some(fg),
        };
        let g = self.arch.backward(params, &t, &up)?;
        Ok((self.lambda * l.value, g))
    }

    pub fn total(&self, params: &ParamSet) -> Result<(f64, ParamSet)> {
        let (a, mut g) = self.st(params)?;
        let (b, gb) = self.pce(params)?;
        let (c, gc) = self.crp(params)?;
        g.add_scaled(&gb, 1.0)?;
        g.add_scaled(&gc, 1.0)?;
        Ok((a + b + c, g))
    }

    pub fn entropy_min(&self, params: &ParamSet) -> Result<(f64, ParamSet)> {
        let t = self.arch.forward(params, &self.x)?;
        let l = entropy_min_loss(t.probs())?;
        let g = self.arch.backward(params, &t, &Upstream::logits_only(l.logits))?;
        Ok((l.value, g))
    }
}

pub type Objective = fn(&Problem, &ParamSet) -> Result<(f64, ParamSet)>;

/// The objectives checked on every problem.
pub const OBJECTIVES: [(&str, Objective); 5] = [
    ("self-training", Problem::st),
    ("replay", Problem::pce),
    ("relation", Problem::crp),
    ("total", Problem::total),
    ("entropy", Problem::entropy_min),
];

/// Max relative error between the analytic gradient and central differences.
pub fn relative_error(p: &Problem, f: Objective) -> f64 {
    let (_, analytic) = f(p, &p.params).unwrap();
    let numeric = central_difference(&p.params, H, |q| Ok(f(p, q)?.0)).unwrap();
    max_relative_error(&analytic, &numeric, FLOOR).unwrap()
}
