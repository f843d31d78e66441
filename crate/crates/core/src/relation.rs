//! Class relation graphs and the relation preservation loss.
//!
//! A graph has one vertex per class, the unit-normalised class centroid, and
//! an edge weight `s_ij = v_i . v_j` for every ordered pair (diagonal
//! included). The loss between the intrinsic source graph `S` and the current
//! estimate `T` is the negative cosine between the two edge matrices read as
//! vectors:
//!
//! ```text
//! L = - <S, T> / (|S| |T|)
//! ```
//!
//! restricted to the pairs of classes present in the current estimate. It is
//! invariant to the scale of either matrix, so it constrains the topology of
//! the class layout and not the positions of the vertices.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::math::{dot, norm, Matrix};
use crate::nn::{NetworkArch, ParamSet, CLASSIFIER_WEIGHT};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ClassRelationGraph {
    vertices: Vec<Option<Vec<f64>>>,
    edges: Matrix,
}

impl ClassRelationGraph {
    /// Normalises each vertex; zero-norm or missing vertices become absent.
    pub fn from_vertices(raw: Vec<Option<Vec<f64>>>) -> Self {
        let vertices: Vec<Option<Vec<f64>>> = raw
            .into_iter()
            .map(|v| {
                v.and_then(|v| {
                    let n = norm(&v);
                    if n > 0.0 && n.is_finite() {
                        Some(v.iter().map(|x| x / n).collect())
                    } else {
                        None
                    }
                })
            })
            .collect();
        Self::with_edges(vertices)
    }

    /// Rebuilds a graph from already normalised vertices, as persisted by
    /// [`vertices`](Self::vertices), without renormalising them.
    pub fn from_unit_vertices(vertices: Vec<Option<Vec<f64>>>) -> Result<Self> {
        for (class, v) in vertices.iter().enumerate() {
            if let Some(v) = v {
                let n = norm(v);
                if !((n - 1.0).abs() <= 1e-9) {
                    return Err(Error::Input(format!("vertex {class} has norm {n}, expected 1")));
                }
            }
        }
        Ok(Self::with_edges(vertices))
    }

    fn with_edges(vertices: Vec<Option<Vec<f64>>>) -> Self {
        let c = vertices.len();
        let mut edges = Matrix::zeros(c, c);
        for i in 0..c {
            for j in 0..c {
                if let (Some(a), Some(b)) = (&vertices[i], &vertices[j]) {
                    edges.set(i, j, dot(a, b));
                }
            }
        }
        Self { vertices, edges }
    }

    pub fn classes(&self) -> usize {
        self.vertices.len()
    }

    pub fn vertices(&self) -> &[Option<Vec<f64>>] {
        &self.vertices
    }

    pub fn is_present(&self, class: usize) -> bool {
        self.vertices[class].is_some()
    }

    pub fn present_mask(&self) -> Vec<bool> {
        self.vertices.iter().map(Option::is_some).collect()
    }

    pub fn present_count(&self) -> usize {
        self.vertices.iter().filter(|v| v.is_some()).count()
    }

    pub fn vertex(&self, class: usize) -> Option<&[f64]> {
        self.vertices[class].as_deref()
    }

    /// Edge weights, `C x C`. Entries touching an absent class are zero.
    pub fn edges(&self) -> &Matrix {
        &self.edges
    }
}

/// Where the intrinsic (source) graph comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntrinsicGraphSource {
    /// Per-class mean feature of labeled source samples.
    ClassPrototypes,
    /// Rows of the final linear classifier.
    ClassifierWeights,
}

impl IntrinsicGraphSource {
    pub fn name(self) -> &'static str {
        match self {
            IntrinsicGraphSource::ClassPrototypes => "prototypes",
            IntrinsicGraphSource::ClassifierWeights => "classifier_weights",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "prototypes" => Some(IntrinsicGraphSource::ClassPrototypes),
            "classifier_weights" => Some(IntrinsicGraphSource::ClassifierWeights),
            _ => None,
        }
    }
}

/// Per-class sums and counts of feature rows grouped by label.
fn class_sums(features: &Matrix, labels: &[usize], classes: usize) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    if labels.len() != features.rows() {
        return Err(Error::dim("class grouping", features.rows(), labels.len()));
    }
    let mut sums = vec![vec![0.0; features.cols()]; classes];
    let mut counts = vec![0usize; classes];
    for (row, &y) in features.iter_rows().zip(labels) {
        if y >= classes {
            return Err(Error::Input(alloc::format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        counts[y] += 1;
        for (s, &x) in sums[y].iter_mut().zip(row) {
            *s += x;
        }
    }
    Ok((sums, counts))
}

/// Intrinsic graph from labeled source features. Every class must appear.
pub fn graph_from_prototypes(features: &Matrix, labels: &[usize], classes: usize) -> Result<ClassRelationGraph> {
    let (sums, counts) = class_sums(features, labels, classes)?;
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Coverage { class });
    }
    let centroids = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| Some(s.into_iter().map(|x| x / c as f64).collect()))
        .collect();
    Ok(ClassRelationGraph::from_vertices(centroids))
}

/// Intrinsic graph whose vertices are the classifier's weight rows.
pub fn graph_from_classifier(arch: &NetworkArch, params: &ParamSet) -> Result<ClassRelationGraph> {
    arch.check_params(params)?;
    let w = params
        .get(CLASSIFIER_WEIGHT)
        .expect("layout checked against the architecture");
    let h = arch.feature_dim();
    let rows = w.data().chunks_exact(h).map(|r| Some(r.to_vec())).collect();
    Ok(ClassRelationGraph::from_vertices(rows))
}

/// Builds the intrinsic graph. `source_features` are the source model's
/// features of labeled source samples and are required in prototype mode.
pub fn build_intrinsic_graph(
    source: IntrinsicGraphSource,
    arch: &NetworkArch,
    params: &ParamSet,
    source_features: Option<(&Matrix, &[usize])>,
) -> Result<ClassRelationGraph> {
    match source {
        IntrinsicGraphSource::ClassPrototypes => {
            let (f, y) =
                source_features.ok_or_else(|| Error::Config("prototype graph needs labeled source features".into()))?;
            graph_from_prototypes(f, y, arch.classes())
        }
        IntrinsicGraphSource::ClassifierWeights => graph_from_classifier(arch, params),
    }
}

/// Current-model graph estimated from buffered samples, with everything
/// needed to push a loss gradient back onto the sample features.
#[derive(Debug, Clone)]
pub struct TargetGraph {
    graph: ClassRelationGraph,
    /// Raw (un-normalised) centroid norm per class; zero when absent.
    centroid_norms: Vec<f64>,
    counts: Vec<usize>,
    labels: Vec<usize>,
}

impl TargetGraph {
    pub fn graph(&self) -> &ClassRelationGraph {
        &self.graph
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Chain rule from `dL/dT` (edge gradient) to `dL/dfeature` for every
    /// sample the graph was estimated from.
    pub fn feature_grad(&self, edge_grad: &Matrix) -> Matrix {
        let c = self.graph.classes();
        let dim = self.graph.vertices.iter().flatten().map(Vec::len).next().unwrap_or(0);
        // dL/dv_i = sum_j (G_ij + G_ji) v_j
        let mut centroid_grad: Vec<Option<Vec<f64>>> = vec![None; c];
        for i in 0..c {
            let Some(vi) = self.graph.vertex(i) else { continue };
            let mut g = vec![0.0; dim];
            for j in 0..c {
                if let Some(vj) = self.graph.vertex(j) {
                    let w = edge_grad.get(i, j) + edge_grad.get(j, i);
                    if w != 0.0 {
                        for (gk, &vk) in g.iter_mut().zip(vj) {
                            *gk += w * vk;
                        }
                    }
                }
            }
            // Through v = c / |c|: (g - v (v . g)) / |c|
            let radial = dot(vi, &g);
            let inv = 1.0 / self.centroid_norms[i];
            for (gk, &vk) in g.iter_mut().zip(vi) {
                *gk = (*gk - vk * radial) * inv;
            }
            centroid_grad[i] = Some(g);
        }
        // Through the class mean.
        let mut out = Matrix::zeros(self.labels.len(), dim);
        for (n, &y) in self.labels.iter().enumerate() {
            if let Some(g) = &centroid_grad[y] {
                let inv = 1.0 / self.counts[y] as f64;
                for (o, &gk) in out.row_mut(n).iter_mut().zip(g) {
                    *o = gk * inv;
                }
            }
        }
        out
    }
}

/// Estimates the current graph from features of buffered samples grouped by
/// their stored pseudo-labels. Returns `None` for an empty batch.
pub fn estimate_target_graph(
    features: &Matrix,
    pseudo_labels: &[usize],
    classes: usize,
) -> Result<Option<TargetGraph>> {
    if features.rows() == 0 {
        return Ok(None);
    }
    let (sums, counts) = class_sums(features, pseudo_labels, classes)?;
    let mut norms = vec![0.0; classes];
    let centroids = sums
        .into_iter()
        .zip(&counts)
        .enumerate()
        .map(|(k, (s, &n))| {
            if n == 0 {
                return None;
            }
            let c: Vec<f64> = s.into_iter().map(|x| x / n as f64).collect();
            norms[k] = norm(&c);
            Some(c)
        })
        .collect();
    let graph = ClassRelationGraph::from_vertices(centroids);
    for (k, n) in norms.iter_mut().enumerate() {
        if !graph.is_present(k) {
            *n = 0.0;
        }
    }
    Ok(Some(TargetGraph {
        graph,
        centroid_norms: norms,
        counts,
        labels: pseudo_labels.to_vec(),
    }))
}

/// Loss value and `dL/dT` (zero outside the shared present pairs).
#[derive(Debug, Clone, PartialEq)]
pub struct CrpLoss {
    pub value: f64,
    pub edge_grad: Matrix,
    /// Number of classes the sums ran over.
    pub shared_classes: usize,
}

/// Relation preservation loss between the intrinsic graph and the current
/// estimate, over the classes present in both.
pub fn crp_loss(intrinsic: &ClassRelationGraph, current: &ClassRelationGraph) -> Result<CrpLoss> {
    if intrinsic.classes() != current.classes() {
        return Err(Error::dim("crp_loss classes", intrinsic.classes(), current.classes()));
    }
    let mask: Vec<bool> = intrinsic
        .present_mask()
        .into_iter()
        .zip(current.present_mask())
        .map(|(a, b)| a && b)
        .collect();
    crp_loss_from_edges(intrinsic.edges(), current.edges(), &mask)
}

/// The loss on raw edge matrices, summing over pairs `(i, j)` with both
/// `mask[i]` and `mask[j]` set. Fewer than two masked classes, or a zero
/// norm on either side, gives a zero loss and zero gradient.
pub fn crp_loss_from_edges(reference: &Matrix, current: &Matrix, mask: &[bool]) -> Result<CrpLoss> {
    let c = mask.len();
    for m in [reference, current] {
        if m.rows() != c || m.cols() != c {
            return Err(Error::dim("crp_loss edges", c * c, m.rows() * m.cols()));
        }
    }
    let shared = mask.iter().filter(|&&m| m).count();
    let zero = CrpLoss {
        value: 0.0,
        edge_grad: Matrix::zeros(c, c),
        shared_classes: shared,
    };
    if shared < 2 {
        return Ok(zero);
    }
    let pairs = || {
        (0..c)
            .filter(|&i| mask[i])
            .flat_map(move |i| (0..c).filter(move |&j| mask[j]).map(move |j| (i, j)))
    };
    let (mut inner, mut ss, mut tt) = (0.0, 0.0, 0.0);
    for (i, j) in pairs() {
        let s = reference.get(i, j);
        let t = current.get(i, j);
        inner += s * t;
        ss += s * s;
        tt += t * t;
    }
    let ns = libm::sqrt(ss);
    let nt = libm::sqrt(tt);
    if ns == 0.0 || nt == 0.0 {
        return Ok(zero);
    }
    let value = -inner / (ns * nt);
    if !value.is_finite() {
        return Err(Error::NonFinite("crp_loss"));
    }
    let mut edge_grad = Matrix::zeros(c, c);
    for (i, j) in pairs() {
        let s = reference.get(i, j);
        let t = current.get(i, j);
        edge_grad.set(i, j, -s / (ns * nt) + inner * t / (ns * nt * tt));
    }
    Ok(CrpLoss {
        value,
        edge_grad,
        shared_classes: shared,
    })
}
