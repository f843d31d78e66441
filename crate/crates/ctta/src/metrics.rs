//! Metrics files and the folds that turn per-step records into tables.
//!
//! Every file starts with `# key=value` comment lines, at least
//! `# config_hash=...`. Floats are written in Rust's shortest round-trip
//! form so a record read back from `steps.csv` is bit-identical to the one
//! that was written, and every summary can be refolded from the records.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::mpsc::{sync_channel, SyncSender};
use std::thread::JoinHandle;

use anyhow::{anyhow, bail, ensure, Context, Result};
use ctta_core::adapter::MetricsRecord;
use ctta_core::losses::LossBreakdown;
use ctta_core::stream::{PlannedBatch, TransformKind};

pub const STEPS_FILE: &str = "steps.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const SUMMARY_TXT: &str = "summary.txt";
pub const ROUNDS_FILE: &str = "rounds.csv";
pub const PROBE_FILE: &str = "forgetting.csv";
pub const BUFFER_FILE: &str = "buffer.csv";
pub const EDGES_FILE: &str = "edges.csv";
pub const MANIFEST_FILE: &str = "manifest.csv";

/// Records in flight between the adaptation loop and the writer thread.
const QUEUE_DEPTH: usize = 256;

const STEP_COLUMNS: [&str; 16] = [
    "step",
    "domain",
    "kind",
    "severity",
    "cycle",
    "batch_size",
    "batch_errors",
    "batch_error",
    "cumulative_domain_error",
    "loss_st",
    "loss_pce",
    "loss_crp",
    "lambda_crp",
    "loss_total",
    "buffer_len",
    "label_histogram",
];

/// `# key=value` lines at the top of a file.
pub type Meta = Vec<(String, String)>;

pub fn meta_value<'a>(meta: &'a Meta, key: &str) -> Option<&'a str> {
    meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

fn write_meta(w: &mut impl Write, meta: &Meta) -> std::io::Result<()> {
    for (k, v) in meta {
        writeln!(w, "# {k}={v}")?;
    }
    Ok(())
}

pub fn read_meta(path: &Path) -> Result<Meta> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut meta = Meta::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        let Some(rest) = line.strip_prefix("# ") else { break };
        let (k, v) = rest
            .split_once('=')
            .ok_or_else(|| anyhow!("malformed header line {line:?}"))?;
        meta.push((k.to_owned(), v.to_owned()));
    }
    Ok(meta)
}

/// Writes a comment header and CSV rows.
pub fn write_csv(path: &Path, meta: &Meta, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut file = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    write_meta(&mut file, meta)?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Header and rows of a CSV file, comment lines skipped.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let header = r.headers()?.iter().map(str::to_owned).collect();
    let rows = r
        .records()
        .map(|rec| Ok(rec?.iter().map(str::to_owned).collect()))
        .collect::<Result<Vec<Vec<String>>>>()?;
    Ok((header, rows))
}

fn step_row(r: &MetricsRecord) -> Vec<String> {
    let hist = r
        .label_histogram
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(";");
    vec![
        r.step.to_string(),
        r.domain.to_string(),
        r.kind.name().to_owned(),
        r.severity.to_string(),
        r.cycle.to_string(),
        r.batch_size.to_string(),
        r.batch_errors.to_string(),
        r.batch_error().to_string(),
        r.cumulative_domain_error.to_string(),
        r.losses.self_training.to_string(),
        r.losses.replay.to_string(),
        r.losses.relation.to_string(),
        r.losses.lambda_relation.to_string(),
        r.losses.total.to_string(),
        r.buffer_len.to_string(),
        hist,
    ]
}

fn parse_step_row(row: &[String]) -> Result<MetricsRecord> {
    ensure!(row.len() == STEP_COLUMNS.len(), "step row has {} fields", row.len());
    let f = |i: usize| -> Result<f64> { row[i].parse().with_context(|| format!("column {}", STEP_COLUMNS[i])) };
    let u = |i: usize| -> Result<u64> { row[i].parse().with_context(|| format!("column {}", STEP_COLUMNS[i])) };
    let kind = TransformKind::from_name(&row[2]).ok_or_else(|| anyhow!("unknown kind {:?}", row[2]))?;
    let label_histogram = if row[15].is_empty() {
        Vec::new()
    } else {
        row[15]
            .split(';')
            .map(|s| s.parse::<usize>())
            .collect::<Result<_, _>>()?
    };
    Ok(MetricsRecord {
        step: u(0)?,
        domain: u(1)? as u32,
        kind,
        severity: u(3)? as u8,
        cycle: u(4)? as usize,
        batch_size: u(5)? as usize,
        batch_errors: u(6)? as usize,
        cumulative_domain_error: f(8)?,
        losses: LossBreakdown {
            self_training: f(9)?,
            replay: f(10)?,
            relation: f(11)?,
            lambda_relation: f(12)?,
            total: f(13)?,
        },
        buffer_len: u(14)? as usize,
        label_histogram,
    })
}

/// Reads `steps.csv` back into records, checking that steps increase.
pub fn read_steps(path: &Path) -> Result<(Meta, Vec<MetricsRecord>)> {
    let meta = read_meta(path)?;
    let (header, rows) = read_csv(path)?;
    ensure!(header == STEP_COLUMNS, "{} has unexpected columns", path.display());
    let records = rows
        .iter()
        .enumerate()
        .map(|(i, r)| parse_step_row(r).with_context(|| format!("{} row {}", path.display(), i + 1)))
        .collect::<Result<Vec<_>>>()?;
    for w in records.windows(2) {
        ensure!(w[1].step > w[0].step, "steps not increasing at {}", w[1].step);
    }
    Ok((meta, records))
}

/// Background writer for `steps.csv`, fed through a bounded queue so the
/// adaptation loop only waits when the writer falls `QUEUE_DEPTH` behind.
pub struct StepWriter {
    tx: Option<SyncSender<MetricsRecord>>,
    handle: Option<JoinHandle<Result<()>>>,
}

impl StepWriter {
    /// Creates the file, writes the header and `prior` records (the part of
    /// a resumed run that already happened), then starts the thread.
    pub fn spawn(path: &Path, meta: &Meta, prior: &[MetricsRecord]) -> Result<Self> {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        let mut out = BufWriter::new(file);
        write_meta(&mut out, meta)?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(STEP_COLUMNS)?;
        for r in prior {
            w.write_record(step_row(r))?;
        }
        let (tx, rx) = sync_channel::<MetricsRecord>(QUEUE_DEPTH);
        let handle = std::thread::Builder::new()
            .name("metrics-writer".into())
            .spawn(move || -> Result<()> {
                for r in rx {
                    w.write_record(step_row(&r))?;
                }
                w.flush()?;
                Ok(())
            })?;
        Ok(Self {
            tx: Some(tx),
            handle: Some(handle),
        })
    }

    pub fn send(&self, record: MetricsRecord) -> Result<()> {
        self.tx
            .as_ref()
            .expect("sender lives until finish")
            .send(record)
            .map_err(|_| anyhow!("metrics writer stopped early"))
    }

    /// Closes the queue and waits for every record to reach the file.
    pub fn finish(mut self) -> Result<()> {
        self.tx.take();
        match self.handle.take().expect("joined once").join() {
            Ok(r) => r,
            Err(_) => bail!("metrics writer panicked"),
        }
    }
}

impl Drop for StepWriter {
    fn drop(&mut self) {
        self.tx.take();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Online error of one domain over the whole run.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainError {
    pub domain: u32,
    pub kind: TransformKind,
    pub wrong: u64,
    pub total: u64,
}

impl DomainError {
    pub fn error(&self) -> f64 {
        self.wrong as f64 / self.total.max(1) as f64
    }

    pub fn label(&self) -> String {
        format!("{}:{}", self.domain, self.kind.name())
    }
}

/// Per-domain online errors in stream order and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub domains: Vec<DomainError>,
}

impl Summary {
    pub fn fold(records: &[MetricsRecord]) -> Self {
        let mut domains: Vec<DomainError> = Vec::new();
        for r in records {
            let slot = match domains.iter().position(|d| d.domain == r.domain) {
                Some(i) => i,
                None => {
                    domains.push(DomainError {
                        domain: r.domain,
                        kind: r.kind,
                        wrong: 0,
                        total: 0,
                    });
                    domains.len() - 1
                }
            };
            domains[slot].wrong += r.batch_errors as u64;
            domains[slot].total += r.batch_size as u64;
        }
        Self { domains }
    }

    /// Unweighted mean over domains.
    pub fn mean(&self) -> f64 {
        if self.domains.is_empty() {
            return 0.0;
        }
        self.domains.iter().map(DomainError::error).sum::<f64>() / self.domains.len() as f64
    }

    pub fn labels(&self) -> Vec<String> {
        self.domains.iter().map(DomainError::label).collect()
    }
}

/// Mean online error of each stream cycle, in cycle order.
pub fn fold_rounds(records: &[MetricsRecord]) -> Vec<(usize, f64)> {
    let mut rounds: Vec<(usize, u64, u64)> = Vec::new();
    for r in records {
        match rounds.iter_mut().find(|x| x.0 == r.cycle) {
            Some(x) => {
                x.1 += r.batch_errors as u64;
                x.2 += r.batch_size as u64;
            }
            None => rounds.push((r.cycle, r.batch_errors as u64, r.batch_size as u64)),
        }
    }
    rounds
        .into_iter()
        .map(|(c, w, n)| (c, w as f64 / n.max(1) as f64))
        .collect()
}

/// Source held-out accuracy before and after adaptation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForgettingProbe {
    pub before: f64,
    pub after: f64,
}

impl ForgettingProbe {
    /// Accuracy lost on the source held-out split; negative if it improved.
    pub fn drop(&self) -> f64 {
        self.before - self.after
    }
}

pub fn write_probe(path: &Path, meta: &Meta, p: &ForgettingProbe) -> Result<()> {
    write_csv(
        path,
        meta,
        &["source_acc_before", "source_acc_after", "drop"].map(String::from),
        &[vec![p.before.to_string(), p.after.to_string(), p.drop().to_string()]],
    )
}

pub fn read_probe(path: &Path) -> Result<ForgettingProbe> {
    let (_, rows) = read_csv(path)?;
    let row = rows.first().ok_or_else(|| anyhow!("{} is empty", path.display()))?;
    Ok(ForgettingProbe {
        before: row[0].parse()?,
        after: row[1].parse()?,
    })
}

pub fn write_rounds(path: &Path, meta: &Meta, rounds: &[(usize, f64)]) -> Result<()> {
    let rows: Vec<Vec<String>> = rounds.iter().map(|(c, e)| vec![c.to_string(), e.to_string()]).collect();
    write_csv(path, meta, &["cycle".into(), "error".into()], &rows)
}

pub fn write_manifest(path: &Path, meta: &Meta, plan: &[PlannedBatch]) -> Result<()> {
    let rows: Vec<Vec<String>> = plan
        .iter()
        .map(|b| {
            vec![
                b.step.to_string(),
                b.domain.id.to_string(),
                b.domain.kind.name().to_owned(),
                b.severity.to_string(),
                b.cycle.to_string(),
            ]
        })
        .collect();
    write_csv(
        path,
        meta,
        &["step", "domain", "kind", "severity", "cycle"].map(String::from),
        &rows,
    )
}

/// One labelled row of a results table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub name: String,
    pub summary: Summary,
    pub probe: Option<ForgettingProbe>,
}

/// `name, <domain columns>, mean, forgetting` with errors as fractions.
pub fn write_summary_csv(path: &Path, meta: &Meta, rows: &[TableRow]) -> Result<()> {
    let Some(first) = rows.first() else {
        return write_csv(path, meta, &["name".into()], &[]);
    };
    let mut header = vec!["name".to_owned()];
    header.extend(first.summary.labels());
    header.push("mean".into());
    header.push("source_acc_drop".into());
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut row = vec![r.name.clone()];
            row.extend(r.summary.domains.iter().map(|d| d.error().to_string()));
            row.push(r.summary.mean().to_string());
            row.push(r.probe.map(|p| p.drop().to_string()).unwrap_or_default());
            row
        })
        .collect();
    write_csv(path, meta, &header, &body)
}

/// Aligned text table of error percentages, domains as columns.
pub fn render_table(meta: &Meta, rows: &[TableRow]) -> String {
    let mut out = String::new();
    for (k, v) in meta {
        let _ = writeln!(out, "# {k}={v}");
    }
    let Some(first) = rows.first() else {
        return out;
    };
    let mut cols = vec!["".to_owned()];
    cols.extend(first.summary.labels());
    cols.push("mean".into());
    cols.push("src drop".into());
    let mut cells: Vec<Vec<String>> = vec![cols];
    for r in rows {
        let mut line = vec![r.name.clone()];
        line.extend(r.summary.domains.iter().map(|d| format!("{:.2}", 100.0 * d.error())));
        line.push(format!("{:.2}", 100.0 * r.summary.mean()));
        line.push(
            r.probe
                .map(|p| format!("{:.2}", 100.0 * p.drop()))
                .unwrap_or_else(|| "-".into()),
        );
        cells.push(line);
    }
    let widths: Vec<usize> = (0..cells[0].len())
        .map(|j| cells.iter().map(|l| l.get(j).map_or(0, String::len)).max().unwrap_or(0))
        .collect();
    for line in &cells {
        let text: Vec<String> = line
            .iter()
            .enumerate()
            .map(|(j, c)| {
                if j == 0 {
                    format!("{c:<w$}", w = widths[j])
                } else {
                    format!("{c:>w$}", w = widths[j])
                }
            })
            .collect();
        let _ = writeln!(out, "{}", text.join("  ").trim_end());
    }
    out
}
