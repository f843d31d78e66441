//! Experiment drivers: pretraining, single runs with checkpoint/resume,
//! ablation grids, hyperparameter sweeps and re-folding persisted records.

use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, ensure, Context, Result};
use ctta_core::adapter::{run_stream, DomainTally, MetricsRecord, TeacherStudentState};
use ctta_core::relation::{estimate_target_graph, IntrinsicGraphSource};
use ctta_core::source::{accuracy, pretrain};
use ctta_core::stream::{make_source_dataset, source_heldout, LabeledData, StreamCursor, World};
use rayon::prelude::*;

use crate::checkpoint::{load_adaptation, save_adaptation, SourceArtifact};
use crate::config::RunConfig;
use crate::metrics::{
    self, fold_rounds, read_probe, read_steps, render_table, write_csv, write_manifest, write_probe, write_rounds,
    write_summary_csv, ForgettingProbe, Meta, StepWriter, Summary, TableRow,
};

pub const SOURCE_FILE: &str = "source.bin";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// The source model together with the data it was trained and judged on.
#[derive(Debug, Clone)]
pub struct SourceBundle {
    pub artifact: SourceArtifact,
    pub world: World,
    pub heldout: LabeledData,
}

fn world_and_heldout(config: &RunConfig) -> Result<(World, LabeledData)> {
    let world = World::new(config.world_key(), config.world_config()?)?;
    let heldout = source_heldout(&world, config.source.heldout);
    Ok((world, heldout))
}

/// Trains the source model for `config.seed` and builds both intrinsic
/// graphs.
pub fn pretrain_source(config: &RunConfig) -> Result<SourceBundle> {
    let (world, heldout) = world_and_heldout(config)?;
    let train = make_source_dataset(&world, config.source.per_class)?;
    let model = pretrain(
        &train,
        &heldout,
        config.world.classes,
        &config.pretrain_config()?,
        config.pretrain_key(),
    )?;
    let prototypes = model.intrinsic_graph(IntrinsicGraphSource::ClassPrototypes, &train)?;
    let classifier = model.intrinsic_graph(IntrinsicGraphSource::ClassifierWeights, &train)?;
    Ok(SourceBundle {
        artifact: SourceArtifact {
            source_hash: config.source_hash()?,
            model,
            prototypes,
            classifier,
        },
        world,
        heldout,
    })
}

/// Loads a source checkpoint written for the same world and source settings.
pub fn load_source(config: &RunConfig, path: &Path) -> Result<SourceBundle> {
    let artifact = SourceArtifact::load(path)?;
    let expected = config.source_hash()?;
    ensure!(
        artifact.source_hash == expected,
        "source checkpoint {} was trained for source config {}, current is {expected}",
        path.display(),
        artifact.source_hash
    );
    let (world, heldout) = world_and_heldout(config)?;
    Ok(SourceBundle {
        artifact,
        world,
        heldout,
    })
}

/// `path` if given, else `<out>/source.bin` if present, else a fresh
/// pretraining saved to `<out>/source.bin`.
pub fn obtain_source(config: &RunConfig, path: Option<&Path>, out: &Path) -> Result<SourceBundle> {
    if let Some(p) = path {
        return load_source(config, p);
    }
    let local = out.join(SOURCE_FILE);
    if local.exists() {
        if let Ok(bundle) = load_source(config, &local) {
            return Ok(bundle);
        }
    }
    let bundle = pretrain_source(config)?;
    std::fs::create_dir_all(out)?;
    bundle.artifact.save(&local)?;
    Ok(bundle)
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Continue from `<out>/checkpoint.bin`.
    pub resume: bool,
    /// Stop (after checkpointing) once this many batches have been processed.
    pub stop_after: Option<u64>,
    /// Extra `# key=value` lines for every output file.
    pub extra_meta: Meta,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub config_hash: String,
    pub records: Vec<MetricsRecord>,
    /// `None` when the run stopped early.
    pub summary: Option<Summary>,
    pub probe: Option<ForgettingProbe>,
    pub rounds: Vec<(usize, f64)>,
}

impl RunOutcome {
    pub fn mean_error(&self) -> Option<f64> {
        self.summary.as_ref().map(Summary::mean)
    }
}

pub fn file_meta(config: &RunConfig, hash: &str, extra: &Meta) -> Meta {
    let mut meta = vec![
        ("config_hash".to_owned(), hash.to_owned()),
        ("method".to_owned(), config.adaptation.method.clone()),
        ("seed".to_owned(), config.seed.to_string()),
    ];
    meta.extend(extra.iter().cloned());
    meta
}

/// Runs one configured stream into `config.output_dir()`.
pub fn run(config: &RunConfig, source: Option<&Path>, opts: &RunOptions) -> Result<RunOutcome> {
    let out = config.output_dir();
    let bundle = obtain_source(config, source, &out)?;
    run_with_source(config, &bundle, &out, opts)
}

/// Runs one stream with an already available source model.
pub fn run_with_source(config: &RunConfig, bundle: &SourceBundle, out: &Path, opts: &RunOptions) -> Result<RunOutcome> {
    config.validate()?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let hash = config.hash()?;
    let meta = file_meta(config, &hash, &opts.extra_meta);
    let adaptation = config.adaptation_config()?;
    let model = &bundle.artifact.model;
    let fresh = TeacherStudentState::new(
        model.arch.clone(),
        model.params.clone(),
        bundle.artifact.intrinsic(adaptation.intrinsic_source).clone(),
        adaptation,
    )?;
    let schedule = config.schedule()?;
    let mut cursor = StreamCursor::new(bundle.world.clone(), &schedule, config.stream_key())?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let steps_path = out.join(metrics::STEPS_FILE);

    let (mut state, mut tally, prior) = if opts.resume {
        let ckpt = load_adaptation(&ckpt_path, &hash, fresh)?;
        let (steps_meta, records) = read_steps(&steps_path)?;
        ensure!(
            metrics::meta_value(&steps_meta, "config_hash") == Some(hash.as_str()),
            "{} belongs to a different config",
            steps_path.display()
        );
        let prior: Vec<MetricsRecord> = records
            .into_iter()
            .filter(|r| (r.step as usize) < ckpt.position)
            .collect();
        ensure!(
            prior.len() == ckpt.position,
            "{} holds {} records before the checkpoint at {}",
            steps_path.display(),
            prior.len(),
            ckpt.position
        );
        cursor.seek(ckpt.position);
        (ckpt.state, ckpt.tally, prior)
    } else {
        (fresh, DomainTally::default(), Vec::new())
    };

    let writer = StepWriter::spawn(&steps_path, &meta, &prior)?;
    let mut mirror = tally.clone();
    let mut failure: Option<anyhow::Error> = None;
    let every = config.run.checkpoint_every;
    let stop_after = opts.stop_after;
    let new = run_stream(&mut state, &mut cursor, &mut tally, |s, r| {
        mirror.record(r.domain, r.batch_errors as u64, r.batch_size as u64);
        let done = r.step + 1;
        let stop = stop_after == Some(done);
        let result = writer.send(r.clone()).and_then(|()| {
            if stop || (every > 0 && done % every == 0) {
                save_adaptation(&ckpt_path, &hash, s, &mirror, done as usize)
            } else {
                Ok(())
            }
        });
        match result {
            Err(e) => {
                failure = Some(e);
                ControlFlow::Break(())
            }
            Ok(()) if stop => ControlFlow::Break(()),
            Ok(()) => ControlFlow::Continue(()),
        }
    });
    let finished = writer.finish();
    if let Some(e) = failure {
        return Err(e);
    }
    let new = new?;
    finished?;

    let mut records = prior;
    records.extend(new);
    if cursor.offset() < cursor.len() {
        return Ok(RunOutcome {
            config_hash: hash,
            records,
            summary: None,
            probe: None,
            rounds: Vec::new(),
        });
    }

    save_adaptation(&ckpt_path, &hash, &state, &tally, cursor.offset())?;
    let summary = Summary::fold(&records);
    let rounds = fold_rounds(&records);
    let probe = ForgettingProbe {
        before: model.heldout_accuracy,
        after: accuracy(state.arch(), state.student(), &bundle.heldout)?,
    };
    let row = TableRow {
        name: config.adaptation.method.clone(),
        summary: summary.clone(),
        probe: Some(probe),
    };
    write_summary_csv(&out.join(metrics::SUMMARY_CSV), &meta, std::slice::from_ref(&row))?;
    std::fs::write(
        out.join(metrics::SUMMARY_TXT),
        render_table(&meta, std::slice::from_ref(&row)),
    )?;
    write_rounds(&out.join(metrics::ROUNDS_FILE), &meta, &rounds)?;
    write_probe(&out.join(metrics::PROBE_FILE), &meta, &probe)?;
    write_manifest(&out.join(metrics::MANIFEST_FILE), &meta, cursor.plan())?;
    write_buffer(&out.join(metrics::BUFFER_FILE), &meta, &state)?;
    if config.run.dump_edges {
        write_edges(&out.join(metrics::EDGES_FILE), &meta, &state)?;
    }
    Ok(RunOutcome {
        config_hash: hash,
        records,
        summary: Some(summary),
        probe: Some(probe),
        rounds,
    })
}

fn write_buffer(path: &Path, meta: &Meta, state: &TeacherStudentState) -> Result<()> {
    let buf = state.buffer();
    let mut header: Vec<String> = ["seq", "step", "entropy", "label"].map(String::from).to_vec();
    header.extend((0..buf.feature_dim()).map(|k| format!("x{k}")));
    let mut entries: Vec<_> = buf.entries().iter().collect();
    entries.sort_by_key(|e| e.seq);
    let rows: Vec<Vec<String>> = entries
        .iter()
        .map(|e| {
            let mut r = vec![
                e.seq.to_string(),
                e.step.to_string(),
                e.entropy.to_string(),
                e.pseudo_label.to_string(),
            ];
            r.extend(e.features.iter().map(f64::to_string));
            r
        })
        .collect();
    write_csv(path, meta, &header, &rows)
}

/// Intrinsic edges and the edges of the final student's graph over the
/// whole buffer, as long-form `graph,i,j,value` rows.
fn write_edges(path: &Path, meta: &Meta, state: &TeacherStudentState) -> Result<()> {
    let mut rows = Vec::new();
    let mut push = |name: &str, g: &ctta_core::relation::ClassRelationGraph| {
        let c = g.classes();
        for i in 0..c {
            for j in 0..c {
                if g.is_present(i) && g.is_present(j) {
                    rows.push(vec![
                        name.to_owned(),
                        i.to_string(),
                        j.to_string(),
                        g.edges().get(i, j).to_string(),
                    ]);
                }
            }
        }
    };
    push("intrinsic", state.intrinsic_graph());
    let all = state.buffer().all();
    if !all.is_empty() {
        let trace = state.arch().forward(state.student(), &all.features)?;
        if let Some(t) = estimate_target_graph(trace.features(), &all.labels, state.arch().classes())? {
            push("buffer", t.graph());
        }
    }
    write_csv(path, meta, &["graph", "i", "j", "value"].map(String::from), &rows)
}

/// One cell of an ablation or sweep, run over every seed.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub name: String,
    pub seeds: Vec<u64>,
    pub outcomes: Vec<RunOutcome>,
}

impl CellResult {
    pub fn per_seed_means(&self) -> Vec<f64> {
        self.outcomes
            .iter()
            .map(|o| o.mean_error().unwrap_or(f64::NAN))
            .collect()
    }

    /// Mean and sample standard deviation of the per-seed means.
    pub fn mean_std(&self) -> (f64, f64) {
        mean_std(&self.per_seed_means())
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Pretrains one source model per seed, in parallel.
pub fn pretrain_seeds(base: &RunConfig, seeds: &[u64]) -> Result<Vec<SourceBundle>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let mut c = base.clone();
            c.seed = seed;
            pretrain_source(&c).with_context(|| format!("pretraining seed {seed}"))
        })
        .collect()
}

/// Runs every `(cell, seed)` pair in parallel; each cell's config is
/// `base` edited by its closure, written under `out/<cell name>/seed<k>`.
pub fn run_cells(
    base: &RunConfig,
    sources: &[SourceBundle],
    seeds: &[u64],
    cells: &[(String, Box<dyn Fn(&mut RunConfig) + Sync>)],
    out: &Path,
) -> Result<Vec<CellResult>> {
    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..seeds.len()).map(move |s| (c, s)))
        .collect();
    let outcomes: Vec<RunOutcome> = jobs
        .par_iter()
        .map(|&(c, s)| {
            let (name, edit) = &cells[c];
            let mut config = base.clone();
            config.seed = seeds[s];
            edit(&mut config);
            let dir = out.join(name).join(format!("seed{}", seeds[s]));
            config.run.output_dir = dir.clone();
            let opts = RunOptions {
                extra_meta: vec![("cell".to_owned(), name.clone())],
                ..Default::default()
            };
            run_with_source(&config, &sources[s], &dir, &opts)
                .with_context(|| format!("cell {name}, seed {}", seeds[s]))
        })
        .collect::<Result<_>>()?;
    let mut outcomes = outcomes.into_iter();
    Ok(cells
        .iter()
        .map(|(name, _)| CellResult {
            name: name.clone(),
            seeds: seeds.to_vec(),
            outcomes: outcomes.by_ref().take(seeds.len()).collect(),
        })
        .collect())
}

pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_SUMMARY_CSV: &str = "ablation_summary.csv";
pub const ABLATION_TXT: &str = "ablation.txt";
pub const SWEEP_CSV: &str = "sweep.csv";

/// One row per method over the shared seeds: per-seed tables plus
/// mean +- std across seeds.
pub fn ablate(base: &RunConfig, methods: &[String], seeds: &[u64], out: &Path) -> Result<Vec<CellResult>> {
    ensure!(
        !methods.is_empty() && !seeds.is_empty(),
        "ablation needs at least one method and one seed"
    );
    for m in methods {
        crate::config::parse_method(m)?;
    }
    base.validate()?;
    std::fs::create_dir_all(out)?;
    let sources = pretrain_seeds(base, seeds)?;
    let cells: Vec<(String, Box<dyn Fn(&mut RunConfig) + Sync>)> = methods
        .iter()
        .map(|m| {
            let method = m.clone();
            let edit: Box<dyn Fn(&mut RunConfig) + Sync> =
                Box::new(move |c: &mut RunConfig| c.adaptation.method = method.clone());
            (m.clone(), edit)
        })
        .collect();
    let results = run_cells(base, &sources, seeds, &cells, out)?;

    let meta = experiment_meta(base, seeds)?;
    let rows: Vec<TableRow> = results
        .iter()
        .flat_map(|cell| {
            cell.outcomes.iter().zip(&cell.seeds).map(|(o, s)| TableRow {
                name: format!("{}/seed{s}", cell.name),
                summary: o.summary.clone().expect("complete run"),
                probe: o.probe,
            })
        })
        .collect();
    write_summary_csv(&out.join(ABLATION_CSV), &meta, &rows)?;
    write_cell_summary(&out.join(ABLATION_SUMMARY_CSV), &meta, "method", &results)?;
    let mut text = render_table(&meta, &rows);
    text.push('\n');
    text.push_str(&render_cells(&results));
    std::fs::write(out.join(ABLATION_TXT), text)?;
    Ok(results)
}

/// A one-dimensional sweep: each knob varies alone from the base config.
#[derive(Debug, Clone, PartialEq)]
pub enum SweepCell {
    Lambda(f64),
    Alpha(f64),
    Capacity(usize),
}

impl SweepCell {
    pub fn name(&self) -> String {
        match self {
            SweepCell::Lambda(v) => format!("lambda_crp={v}"),
            SweepCell::Alpha(v) => format!("alpha={v}"),
            SweepCell::Capacity(v) => format!("capacity={v}"),
        }
    }

    fn apply(&self, c: &mut RunConfig) {
        match *self {
            SweepCell::Lambda(v) => c.adaptation.lambda_crp = v,
            SweepCell::Alpha(v) => c.adaptation.alpha = v,
            SweepCell::Capacity(v) => c.adaptation.capacity = v,
        }
    }
}

pub fn sweep_cells(config: &RunConfig) -> Vec<SweepCell> {
    let e = &config.experiment;
    e.lambda_grid
        .iter()
        .map(|&v| SweepCell::Lambda(v))
        .chain(e.alpha_grid.iter().map(|&v| SweepCell::Alpha(v)))
        .chain(e.capacity_grid.iter().map(|&v| SweepCell::Capacity(v)))
        .collect()
}

/// Runs every sweep cell over every seed and writes one summary row per
/// cell to `sweep.csv`.
pub fn sweep(base: &RunConfig, grid: &[SweepCell], seeds: &[u64], out: &Path) -> Result<Vec<CellResult>> {
    ensure!(
        !grid.is_empty() && !seeds.is_empty(),
        "sweep needs at least one cell and one seed"
    );
    base.validate()?;
    for cell in grid {
        let mut c = base.clone();
        cell.apply(&mut c);
        c.validate().with_context(|| format!("sweep cell {}", cell.name()))?;
    }
    std::fs::create_dir_all(out)?;
    let sources = pretrain_seeds(base, seeds)?;
    let cells: Vec<(String, Box<dyn Fn(&mut RunConfig) + Sync>)> = grid
        .iter()
        .map(|cell| {
            let c = cell.clone();
            let edit: Box<dyn Fn(&mut RunConfig) + Sync> = Box::new(move |cfg: &mut RunConfig| c.apply(cfg));
            (cell.name(), edit)
        })
        .collect();
    let results = run_cells(base, &sources, seeds, &cells, out)?;
    let meta = experiment_meta(base, seeds)?;
    write_cell_summary(&out.join(SWEEP_CSV), &meta, "cell", &results)?;
    Ok(results)
}

fn experiment_meta(base: &RunConfig, seeds: &[u64]) -> Result<Meta> {
    Ok(vec![
        ("config_hash".to_owned(), base.hash()?),
        (
            "seeds".to_owned(),
            seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";"),
        ),
    ])
}

fn write_cell_summary(path: &Path, meta: &Meta, key: &str, cells: &[CellResult]) -> Result<()> {
    let mut header = vec![
        key.to_owned(),
        "mean_error".into(),
        "std_error".into(),
        "mean_source_acc_drop".into(),
    ];
    if let Some(first) = cells.first() {
        header.extend(first.seeds.iter().map(|s| format!("seed{s}")));
    }
    let rows: Vec<Vec<String>> = cells
        .iter()
        .map(|c| {
            let (m, s) = c.mean_std();
            let drops: Vec<f64> = c.outcomes.iter().filter_map(|o| o.probe.map(|p| p.drop())).collect();
            let mut row = vec![
                c.name.clone(),
                m.to_string(),
                s.to_string(),
                mean_std(&drops).0.to_string(),
            ];
            row.extend(c.per_seed_means().iter().map(f64::to_string));
            row
        })
        .collect();
    write_csv(path, meta, &header, &rows)
}

fn render_cells(cells: &[CellResult]) -> String {
    let width = cells.iter().map(|c| c.name.len()).max().unwrap_or(0);
    cells
        .iter()
        .map(|c| {
            let (m, s) = c.mean_std();
            format!("{:<width$}  {:6.2} +- {:5.2}\n", c.name, 100.0 * m, 100.0 * s)
        })
        .collect()
}

/// A run directory re-folded from its persisted records.
#[derive(Debug, Clone)]
pub struct Refolded {
    pub dir: PathBuf,
    pub meta: Meta,
    pub row: TableRow,
    pub rounds: Vec<(usize, f64)>,
}

/// Finds every `steps.csv` under `root` (sorted) and folds it again.
pub fn report(root: &Path) -> Result<Vec<Refolded>> {
    let mut dirs = Vec::new();
    collect_run_dirs(root, &mut dirs)?;
    dirs.sort();
    ensure!(
        !dirs.is_empty(),
        "no {} found under {}",
        metrics::STEPS_FILE,
        root.display()
    );
    dirs.into_iter()
        .map(|dir| {
            let (meta, records) = read_steps(&dir.join(metrics::STEPS_FILE))?;
            let probe_path = dir.join(metrics::PROBE_FILE);
            let probe = if probe_path.exists() {
                Some(read_probe(&probe_path)?)
            } else {
                None
            };
            let name = dir
                .strip_prefix(root)
                .ok()
                .map(|p| p.display().to_string())
                .filter(|s| !s.is_empty())
                .or_else(|| metrics::meta_value(&meta, "method").map(str::to_owned))
                .ok_or_else(|| anyhow!("cannot name run at {}", dir.display()))?;
            Ok(Refolded {
                rounds: fold_rounds(&records),
                row: TableRow {
                    name,
                    summary: Summary::fold(&records),
                    probe,
                },
                meta,
                dir,
            })
        })
        .collect()
}

fn collect_run_dirs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if dir.join(metrics::STEPS_FILE).is_file() {
        out.push(dir.to_path_buf());
    }
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            collect_run_dirs(&entry.path(), out)?;
        }
    }
    Ok(())
}
