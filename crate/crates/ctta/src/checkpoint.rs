//! Source-model and adaptation-state checkpoints on top of [`Archive`].

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use ctta_core::adapter::{DomainTally, TeacherStudentState};
use ctta_core::buffer::{BufferEntry, UncertaintyBuffer};
use ctta_core::nn::{Activation, NetworkArch, ParamSet};
use ctta_core::optim::OptimizerState;
use ctta_core::relation::{ClassRelationGraph, IntrinsicGraphSource};
use ctta_core::source::SourceModel;

use crate::archive::Archive;

const SOURCE_KIND: &str = "source";
const ADAPTATION_KIND: &str = "adaptation";

/// A pretrained source model with both intrinsic graphs.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceArtifact {
    pub source_hash: String,
    pub model: SourceModel,
    pub prototypes: ClassRelationGraph,
    pub classifier: ClassRelationGraph,
}

impl SourceArtifact {
    pub fn intrinsic(&self, source: IntrinsicGraphSource) -> &ClassRelationGraph {
        match source {
            IntrinsicGraphSource::ClassPrototypes => &self.prototypes,
            IntrinsicGraphSource::ClassifierWeights => &self.classifier,
        }
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let arch = &self.model.arch;
        let mut a = Archive::new();
        a.set_meta("kind", SOURCE_KIND);
        a.set_meta("source_hash", &self.source_hash);
        a.set_meta("input_dim", arch.input_dim());
        a.set_meta("hidden", join(arch.hidden()));
        a.set_meta("classes", arch.classes());
        a.set_meta("activation", arch.activation().name());
        a.set_meta("epochs", self.model.epochs);
        a.put("heldout_accuracy", vec![1], vec![self.model.heldout_accuracy])?;
        put_params(&mut a, "params", &self.model.params)?;
        put_graph(&mut a, "graph/prototypes", &self.prototypes)?;
        put_graph(&mut a, "graph/classifier_weights", &self.classifier)?;
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        ensure!(a.meta("kind")? == SOURCE_KIND, "not a source checkpoint");
        let hidden = a
            .meta("hidden")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<usize>().context("hidden width"))
            .collect::<Result<Vec<_>>>()?;
        let activation = Activation::from_name(a.meta("activation")?).context("unknown activation")?;
        let arch = NetworkArch::new(a.meta_parse("input_dim")?, hidden, a.meta_parse("classes")?, activation)?;
        let params = get_params(a, "params", &arch)?;
        Ok(Self {
            source_hash: a.meta("source_hash")?.to_owned(),
            model: SourceModel {
                arch,
                params,
                epochs: a.meta_parse("epochs")?,
                heldout_accuracy: a.get("heldout_accuracy")?.data[0],
            },
            prototypes: get_graph(a, "graph/prototypes")?,
            classifier: get_graph(a, "graph/classifier_weights")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone)]
pub struct AdaptationCheckpoint {
    pub config_hash: String,
    /// Index of the next stream batch.
    pub position: usize,
    pub tally: DomainTally,
    pub state: TeacherStudentState,
}

pub fn save_adaptation(
    path: &Path,
    config_hash: &str,
    state: &TeacherStudentState,
    tally: &DomainTally,
    position: usize,
) -> Result<()> {
    let mut a = Archive::new();
    a.set_meta("kind", ADAPTATION_KIND);
    a.set_meta("config_hash", config_hash);
    a.set_meta("position", position);
    a.set_meta("step", state.step());
    a.set_meta("adam_step", state.optimizer().step());
    let buf = state.buffer();
    a.set_meta("buffer_next_seq", buf.next_seq());
    a.set_meta("buffer_seen", buf.seen());
    put_params(&mut a, "student", state.student())?;
    put_params(&mut a, "teacher", state.teacher())?;
    put_params(&mut a, "adam_m", state.optimizer().first_moment())?;
    put_params(&mut a, "adam_v", state.optimizer().second_moment())?;
    put_graph(&mut a, "intrinsic", state.intrinsic_graph())?;

    let entries = buf.entries();
    let d = buf.feature_dim();
    a.put(
        "buffer/features",
        vec![entries.len(), d],
        entries.iter().flat_map(|e| e.features.iter().copied()).collect(),
    )?;
    let column = |f: &dyn Fn(&BufferEntry) -> f64| entries.iter().map(f).collect::<Vec<f64>>();
    a.put("buffer/label", vec![entries.len()], column(&|e| e.pseudo_label as f64))?;
    a.put("buffer/entropy", vec![entries.len()], column(&|e| e.entropy))?;
    a.put("buffer/step", vec![entries.len()], column(&|e| e.step as f64))?;
    a.put("buffer/seq", vec![entries.len()], column(&|e| e.seq as f64))?;

    let t = tally.entries();
    a.put(
        "tally",
        vec![t.len(), 3],
        t.iter().flat_map(|&(d, w, n)| [d as f64, w as f64, n as f64]).collect(),
    )?;
    a.save(path)
}

/// Restores a checkpoint into `fresh`, a newly built state for the same
/// config that supplies the architecture and buffer settings.
pub fn load_adaptation(path: &Path, expected_hash: &str, fresh: TeacherStudentState) -> Result<AdaptationCheckpoint> {
    let a = Archive::load(path)?;
    ensure!(
        a.meta("kind")? == ADAPTATION_KIND,
        "{} is not an adaptation checkpoint",
        path.display()
    );
    let found = a.meta("config_hash")?;
    if found != expected_hash {
        bail!(
            "checkpoint {} was written for config {found}, current config is {expected_hash}",
            path.display()
        );
    }
    let arch = fresh.arch().clone();
    let config = fresh.config().clone();
    let student = get_params(&a, "student", &arch)?;
    let teacher = get_params(&a, "teacher", &arch)?;
    let optimizer = OptimizerState::from_parts(
        config.adam(),
        get_params(&a, "adam_m", &arch)?,
        get_params(&a, "adam_v", &arch)?,
        a.meta_parse("adam_step")?,
    )?;

    let old = fresh.buffer();
    let d = old.feature_dim();
    let features = a.get("buffer/features")?;
    let labels = &a.get("buffer/label")?.data;
    let n = labels.len();
    ensure!(
        features.shape == [n, d],
        "buffer features have shape {:?}",
        features.shape
    );
    let entropy = &a.get("buffer/entropy")?.data;
    let step = &a.get("buffer/step")?.data;
    let seq = &a.get("buffer/seq")?.data;
    ensure!(
        entropy.len() == n && step.len() == n && seq.len() == n,
        "buffer columns differ in length"
    );
    let entries = (0..n)
        .map(|i| BufferEntry {
            features: features.data[i * d..(i + 1) * d].to_vec(),
            pseudo_label: labels[i] as usize,
            entropy: entropy[i],
            step: step[i] as u64,
            seq: seq[i] as u64,
        })
        .collect();
    let buffer = UncertaintyBuffer::from_parts(
        old.capacity(),
        d,
        old.threshold(),
        old.policy(),
        old.key(),
        entries,
        a.meta_parse("buffer_next_seq")?,
        a.meta_parse("buffer_seen")?,
    )?;

    let intrinsic = get_graph(&a, "intrinsic")?;
    ensure!(
        &intrinsic == fresh.intrinsic_graph(),
        "checkpoint intrinsic graph differs from the source model's"
    );
    let state = TeacherStudentState::from_parts(
        arch,
        config,
        student,
        teacher,
        optimizer,
        buffer,
        intrinsic,
        a.meta_parse("step")?,
    )?;

    let t = a.get("tally")?;
    ensure!(t.shape.len() == 2 && t.shape[1] == 3, "tally has shape {:?}", t.shape);
    let tally = DomainTally::from_entries(
        t.data
            .chunks_exact(3)
            .map(|r| (r[0] as u32, r[1] as u64, r[2] as u64))
            .collect(),
    );
    Ok(AdaptationCheckpoint {
        config_hash: found.to_owned(),
        position: a.meta_parse("position")?,
        tally,
        state,
    })
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn put_params(a: &mut Archive, prefix: &str, params: &ParamSet) -> Result<()> {
    for p in params.iter() {
        a.put(&format!("{prefix}/{}", p.name()), p.shape().to_vec(), p.data().to_vec())?;
    }
    Ok(())
}

fn get_params(a: &Archive, prefix: &str, arch: &NetworkArch) -> Result<ParamSet> {
    let mut params = arch.zero_params();
    for p in params.iter_mut() {
        let name = format!("{prefix}/{}", p.name());
        let stored = a.get(&name)?;
        ensure!(
            stored.shape == p.shape(),
            "{name}: stored shape {:?}, architecture expects {:?}",
            stored.shape,
            p.shape()
        );
        p.data_mut().copy_from_slice(&stored.data);
    }
    ensure!(params.is_finite(), "{prefix} parameters contain non-finite values");
    Ok(params)
}

fn put_graph(a: &mut Archive, prefix: &str, g: &ClassRelationGraph) -> Result<()> {
    let c = g.classes();
    let dim = g.vertices().iter().flatten().map(Vec::len).next().unwrap_or(0);
    let mut data = vec![0.0; c * dim];
    for (i, v) in g.vertices().iter().enumerate() {
        if let Some(v) = v {
            data[i * dim..(i + 1) * dim].copy_from_slice(v);
        }
    }
    a.put(&format!("{prefix}/vertices"), vec![c, dim], data)?;
    a.put(
        &format!("{prefix}/present"),
        vec![c],
        g.vertices()
            .iter()
            .map(|v| if v.is_some() { 1.0 } else { 0.0 })
            .collect(),
    )
}

fn get_graph(a: &Archive, prefix: &str) -> Result<ClassRelationGraph> {
    let v = a.get(&format!("{prefix}/vertices"))?;
    let present = &a.get(&format!("{prefix}/present"))?.data;
    ensure!(
        v.shape.len() == 2 && v.shape[0] == present.len(),
        "{prefix}: malformed graph"
    );
    let dim = v.shape[1];
    let vertices = present
        .iter()
        .enumerate()
        .map(|(i, &p)| (p == 1.0).then(|| v.data[i * dim..(i + 1) * dim].to_vec()))
        .collect();
    Ok(ClassRelationGraph::from_unit_vertices(vertices)?)
}
