//! Dense feed-forward classifier with exact reverse-mode gradients.
//!
//! The network is `input -> hidden_1 -> ... -> hidden_k -> classifier`, each
//! hidden layer an affine map followed by the activation, the classifier a
//! plain affine map producing logits. The post-activation output of the last
//! hidden layer is the *feature* vector used for class centroids.
//!
//! Weights are stored row-major with shape `(out, in)`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::distr::{Distribution, Uniform};

use crate::math::{argmax, softmax_into, Matrix};
use crate::rng::{purpose, SeedKey};
use crate::{Error, Result};

/// One named parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim("Param::new", expected, data.len()));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("Param::new"));
        }
        Ok(Self {
            name: name.into(),
            shape,
            data,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Ordered collection of named parameter arrays. Shapes are fixed at
/// construction; only values change afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new(params: Vec<Param>) -> Self {
        Self { params }
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl ExactSizeIterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Number of arrays.
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: vec![0.0; p.data.len()],
                })
                .collect(),
        }
    }

    /// True when `other` has the same names and shapes in the same order.
    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    pub(crate) fn check_layout(&self, other: &ParamSet, context: &'static str) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::dim(context, self.scalar_count(), other.scalar_count()))
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ParamSet, scale: f64) -> Result<()> {
        self.check_layout(other, "ParamSet::add_scaled")?;
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
        Ok(())
    }

    pub fn flat_get(&self, mut index: usize) -> f64 {
        for p in &self.params {
            if index < p.data.len() {
                return p.data[index];
            }
            index -= p.data.len();
        }
        panic!("flat index out of range");
    }

    pub fn flat_set(&mut self, mut index: usize, value: f64) {
        for p in &mut self.params {
            if index < p.data.len() {
                p.data[index] = value;
                return;
            }
            index -= p.data.len();
        }
        panic!("flat index out of range");
    }

    pub fn flat_iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.params.iter().flat_map(|p| p.data.iter().copied())
    }

    pub fn is_finite(&self) -> bool {
        self.flat_iter().all(f64::is_finite)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => libm::tanh(x),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation and activation values.
    #[inline]
    fn derivative(self, pre: f64, act: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - act * act,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "tanh" => Some(Activation::Tanh),
            "relu" => Some(Activation::Relu),
            _ => None,
        }
    }
}

/// Shape of the network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkArch {
    input_dim: usize,
    hidden: Vec<usize>,
    classes: usize,
    activation: Activation,
}

pub const CLASSIFIER_WEIGHT: &str = "classifier.weight";
pub const CLASSIFIER_BIAS: &str = "classifier.bias";

impl NetworkArch {
    pub fn new(input_dim: usize, hidden: Vec<usize>, classes: usize, activation: Activation) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!("class count must be >= 2, got {classes}")));
        }
        if hidden.is_empty() {
            return Err(Error::Config("at least one hidden layer is required".into()));
        }
        if input_dim == 0 || hidden.iter().any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(Self {
            input_dim,
            hidden,
            classes,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Width of the feature vector (last hidden layer).
    pub fn feature_dim(&self) -> usize {
        *self.hidden.last().expect("validated non-empty")
    }

    /// `(name, out, in)` for every affine map, classifier last.
    fn layers(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.input_dim;
        for (i, &w) in self.hidden.iter().enumerate() {
            out.push((format!("hidden.{i}"), w, fan_in));
            fan_in = w;
        }
        out.push((String::from("classifier"), self.classes, fan_in));
        out
    }

    /// All-zero parameters in this architecture's layout.
    pub fn zero_params(&self) -> ParamSet {
        let mut params = Vec::new();
        for (name, out, inp) in self.layers() {
            params.push(Param {
                name: format!("{name}.weight"),
                shape: vec![out, inp],
                data: vec![0.0; out * inp],
            });
            params.push(Param {
                name: format!("{name}.bias"),
                shape: vec![out],
                data: vec![0.0; out],
            });
        }
        ParamSet::new(params)
    }

    /// Xavier-uniform weights and small uniform biases, drawn from `key`.
    pub fn init_params(&self, key: SeedKey) -> ParamSet {
        let mut rng = key.derive(purpose::PARAM_INIT, 0);
        let mut params = self.zero_params();
        for p in params.iter_mut() {
            let limit = if p.shape.len() == 2 {
                libm::sqrt(6.0 / (p.shape[0] + p.shape[1]) as f64)
            } else {
                0.1
            };
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
            for v in p.data.iter_mut() {
                *v = dist.sample(&mut rng);
            }
        }
        params
    }

    /// Checks that `params` was built for this architecture.
    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        self.zero_params().check_layout(params, "NetworkArch::check_params")
    }

    pub fn forward(&self, params: &ParamSet, batch: &Matrix) -> Result<ForwardTrace> {
        if batch.cols() != self.input_dim {
            return Err(Error::dim("forward input", self.input_dim, batch.cols()));
        }
        self.check_params(params)?;
        let n = batch.rows();
        let layers = self.layers();
        let mut pre = Vec::with_capacity(self.hidden.len());
        let mut act: Vec<Matrix> = Vec::with_capacity(self.hidden.len());
        for (l, (_, out, _)) in layers.iter().enumerate() {
            let input = if l == 0 { batch } else { &act[l - 1] };
            let w = params.params[2 * l].data();
            let b = params.params[2 * l + 1].data();
            let z = affine(input, w, b, *out);
            if l + 1 == layers.len() {
                let mut probs = Matrix::zeros(n, *out);
                for i in 0..n {
                    softmax_into(z.row(i), probs.row_mut(i));
                }
                return Ok(ForwardTrace {
                    input: batch.clone(),
                    pre,
                    act,
                    logits: z,
                    probs,
                });
            }
            let mut a = z.clone();
            for v in a.as_mut_slice() {
                *v = self.activation.apply(*v);
            }
            pre.push(z);
            act.push(a);
        }
        unreachable!("classifier layer always present")
    }

    /// Exact gradient of a loss whose upstream derivatives with respect to
    /// the logits and (optionally) the features are given per sample.
    pub fn backward(&self, params: &ParamSet, trace: &ForwardTrace, upstream: &Upstream) -> Result<ParamSet> {
        self.check_params(params)?;
        let n = trace.input.rows();
        if upstream.logits.rows() != n || upstream.logits.cols() != self.classes {
            return Err(Error::dim(
                "backward logit gradient",
                n * self.classes,
                upstream.logits.rows() * upstream.logits.cols(),
            ));
        }
        if !upstream.logits.is_finite() {
            return Err(Error::NonFinite("upstream logit gradient"));
        }
        if let Some(f) = &upstream.features {
            if f.rows() != n || f.cols() != self.feature_dim() {
                return Err(Error::dim(
                    "backward feature gradient",
                    n * self.feature_dim(),
                    f.rows() * f.cols(),
                ));
            }
            if !f.is_finite() {
                return Err(Error::NonFinite("upstream feature gradient"));
            }
        }

        let mut grads = params.zeros_like();
        let layer_count = self.hidden.len() + 1;
        // Gradient w.r.t. the output of the current layer.
        let mut delta = upstream.logits.clone();
        for l in (0..layer_count).rev() {
            let input = if l == 0 { &trace.input } else { &trace.act[l - 1] };
            if l + 1 < layer_count {
                // delta currently holds dL/d(activation); move to pre-activation.
                let pre = &trace.pre[l];
                let act = &trace.act[l];
                for ((d, &z), &a) in delta.as_mut_slice().iter_mut().zip(pre.as_slice()).zip(act.as_slice()) {
                    *d *= self.activation.derivative(z, a);
                }
            }
            let inp = input.cols();
            {
                let (gw, gb) = grads.params.split_at_mut(2 * l + 1);
                let gw = gw[2 * l].data_mut();
                let gb = gb[0].data_mut();
                for i in 0..n {
                    let d = delta.row(i);
                    let x = input.row(i);
                    for (o, &dv) in d.iter().enumerate() {
                        if dv == 0.0 {
                            continue;
                        }
                        gb[o] += dv;
                        let row = &mut gw[o * inp..(o + 1) * inp];
                        for (g, &xv) in row.iter_mut().zip(x) {
                            *g += dv * xv;
                        }
                    }
                }
            }
            if l == 0 {
                break;
            }
            let w = params.params[2 * l].data();
            let mut next = Matrix::zeros(n, inp);
            for i in 0..n {
                let d = delta.row(i);
                let dst = next.row_mut(i);
                for (o, &dv) in d.iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    for (t, &wv) in dst.iter_mut().zip(&w[o * inp..(o + 1) * inp]) {
                        *t += dv * wv;
                    }
                }
            }
            if l == layer_count - 1 {
                if let Some(f) = &upstream.features {
                    for (t, &fv) in next.as_mut_slice().iter_mut().zip(f.as_slice()) {
                        *t += fv;
                    }
                }
            }
            delta = next;
        }
        Ok(grads)
    }
}

fn affine(input: &Matrix, w: &[f64], b: &[f64], out: usize) -> Matrix {
    let n = input.rows();
    let inp = input.cols();
    let mut z = Matrix::zeros(n, out);
    for i in 0..n {
        let x = input.row(i);
        let zr = z.row_mut(i);
        for o in 0..out {
            let row = &w[o * inp..(o + 1) * inp];
            let mut acc = b[o];
            for (wv, xv) in row.iter().zip(x) {
                acc += wv * xv;
            }
            zr[o] = acc;
        }
    }
    z
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input: Matrix,
    pre: Vec<Matrix>,
    act: Vec<Matrix>,
    logits: Matrix,
    probs: Matrix,
}

impl ForwardTrace {
    pub fn input(&self) -> &Matrix {
        &self.input
    }

    pub fn pre_activations(&self) -> &[Matrix] {
        &self.pre
    }

    pub fn activations(&self) -> &[Matrix] {
        &self.act
    }

    /// Post-activation output of the last hidden layer.
    pub fn features(&self) -> &Matrix {
        self.act.last().expect("at least one hidden layer")
    }

    pub fn logits(&self) -> &Matrix {
        &self.logits
    }

    pub fn probs(&self) -> &Matrix {
        &self.probs
    }

    pub fn rows(&self) -> usize {
        self.input.rows()
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.probs.iter_rows().map(argmax).collect()
    }
}

/// Per-sample upstream derivatives of a scalar loss.
#[derive(Debug, Clone)]
pub struct Upstream {
    /// `dL/dlogits`, `n x C`.
    pub logits: Matrix,
    /// `dL/dfeatures`, `n x feature_dim`, when the loss reads features.
    pub features: Option<Matrix>,
}

impl Upstream {
    pub fn logits_only(logits: Matrix) -> Self {
        Self { logits, features: None }
    }
}
