//! The cross-band evaluation protocol: seven train/test cells per model and
//! dataset, an append-only results store, seed and dataset aggregation, and
//! ranking tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bands::BandCombination;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::finetune::{examples, finetune, FinetuneConfig, FinetuneMode, FinetunedModel, TaskSpec};
use crate::metrics::MetricRegistry;
use crate::numeric::bundle::encode_bundle;
use crate::vit::{backbone_meta, Backbone};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellCategory {
    InDistribution,
    NoOverlap,
    Superset,
}

impl CellCategory {
    pub const ALL: [CellCategory; 3] = [Self::InDistribution, Self::NoOverlap, Self::Superset];

    pub fn short(self) -> &'static str {
        match self {
            Self::InDistribution => "ID",
            Self::NoOverlap => "NO",
            Self::Superset => "SUP",
        }
    }
}

/// Train on one band combination, test on another.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalCell {
    pub train: BandCombination,
    pub test: BandCombination,
    pub category: CellCategory,
}

impl EvalCell {
    /// The seven cells in report column order.
    pub fn protocol() -> Vec<EvalCell> {
        use CellCategory::*;
        let c = |train: BandCombination, test: BandCombination, category| EvalCell {
            train,
            test,
            category,
        };
        vec![
            c(BandCombination::rgb(), BandCombination::rgb(), InDistribution),
            c(BandCombination::s2(), BandCombination::s2(), InDistribution),
            c(BandCombination::rgb(), BandCombination::s1(), NoOverlap),
            c(BandCombination::s2(), BandCombination::s1(), NoOverlap),
            c(BandCombination::rgb(), BandCombination::nir_swir(), NoOverlap),
            c(BandCombination::rgb(), BandCombination::rgbn(), Superset),
            c(BandCombination::s2(), BandCombination::s2_s1(), Superset),
        ]
    }

    pub fn id(&self) -> String {
        format!("{}->{}", self.train.name(), self.test.name())
    }

    pub fn parse(id: &str) -> Result<Self> {
        Self::protocol()
            .into_iter()
            .find(|c| c.id() == id)
            .ok_or_else(|| Error::UnknownName {
                kind: "evaluation cell",
                name: id.to_string(),
            })
    }
}

pub fn cell_ids() -> Vec<String> {
    EvalCell::protocol().iter().map(EvalCell::id).collect()
}

// ---------------------------------------------------------------------------
// Records and the store

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Error,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub model: String,
    pub dataset: String,
    pub cell: String,
    pub seed: u64,
    pub mode: FinetuneMode,
    pub metric: String,
    pub value: Option<f64>,
    pub wall_time_s: f64,
    /// SHA-256 over the backbone, fine-tuning config, dataset and cell.
    pub config_hash: String,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Unique key of a run: model, dataset, cell, seed, mode.
pub type RunKey = (String, String, String, u64, FinetuneMode);

impl RunRecord {
    pub fn key(&self) -> RunKey {
        (
            self.model.clone(),
            self.dataset.clone(),
            self.cell.clone(),
            self.seed,
            self.mode,
        )
    }

    /// Equal in everything but wall time.
    pub fn same_result(&self, other: &Self) -> bool {
        Self {
            wall_time_s: 0.0,
            ..self.clone()
        } == Self {
            wall_time_s: 0.0,
            ..other.clone()
        }
    }
}

/// Append-only JSONL store, one record per line.
pub struct ResultStore {
    path: PathBuf,
    file: Mutex<File>,
}

impl ResultStore {
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        // drop a partial last line left by an interrupted writer
        if let Ok(bytes) = fs::read(path) {
            let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
            if keep < bytes.len() {
                OpenOptions::new().write(true).open(path)?.set_len(keep as u64)?;
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Writes one line with a single `write_all` on an append-mode file.
    pub fn append(&self, r: &RunRecord) -> Result<()> {
        let mut line = serde_json::to_vec(r)?;
        line.push(b'\n');
        let mut f = self.file.lock().expect("store lock");
        f.write_all(&line)?;
        f.flush()?;
        Ok(())
    }

    /// Every complete line; a trailing partial line is ignored.
    pub fn records(&self) -> Result<Vec<RunRecord>> {
        read_records(&self.path)
    }
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    complete
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

// ---------------------------------------------------------------------------
// Running cells

/// A backbone under evaluation with its fine-tuning recipe.
#[derive(Clone)]
pub struct ModelSpec {
    pub name: String,
    pub backbone: Box<dyn Backbone>,
    pub finetune: FinetuneConfig,
}

fn config_hash(model: &ModelSpec, cfg: &FinetuneConfig, dataset: &Dataset, cell: &EvalCell) -> Result<String> {
    let mut h = Sha256::new();
    h.update(encode_bundle(model.backbone.params(), backbone_meta(model.backbone.as_ref()))?);
    h.update(serde_json::to_vec(cfg)?);
    h.update(dataset.name.as_bytes());
    h.update(serde_json::to_vec(&dataset.manifest)?);
    h.update(cell.id().as_bytes());
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Runs cells, reusing a fine-tuned model across cells that share the
/// training combination (fine-tuning is deterministic given its inputs).
#[derive(Default)]
pub struct CellRunner {
    metrics: MetricRegistry,
    cache: BTreeMap<(String, String, String, u64, &'static str), FinetunedModel>,
}

impl CellRunner {
    pub fn new() -> Self {
        Self::default()
    }

    fn trained(
        &mut self,
        model: &ModelSpec,
        data: &Dataset,
        cell: &EvalCell,
        cfg: &FinetuneConfig,
    ) -> Result<FinetunedModel> {
        let key = (
            model.name.clone(),
            data.name.clone(),
            cell.train.name().to_string(),
            cfg.seed,
            cfg.mode.as_str(),
        );
        if let Some(m) = self.cache.get(&key) {
            return Ok(m.clone());
        }
        let metric = self.metrics.get(&data.metric_name())?;
        let train = examples(data.split(Split::Train), &cell.train, &cell.train)?;
        let val = examples(data.split(Split::Val), &cell.train, &cell.train)?;
        let spec = TaskSpec {
            task: data.task(),
            num_classes: data.num_classes(),
            metric,
        };
        let out = finetune(model.backbone.as_ref(), &train, &val, &spec, cfg)?;
        self.cache.insert(key, out.model.clone());
        Ok(out.model)
    }

    /// Fine-tunes on the cell's training bands, adapts to its test bands and
    /// scores the test split with the dataset's metric.
    pub fn score(
        &mut self,
        model: &ModelSpec,
        data: &Dataset,
        cell: &EvalCell,
        seed: u64,
        mode: FinetuneMode,
    ) -> Result<f64> {
        let missing: Vec<String> = cell
            .train
            .bands()
            .iter()
            .chain(cell.test.bands())
            .filter(|b| !data.manifest.bands.contains(b))
            .map(|b| b.to_string())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if !missing.is_empty() {
            return Err(Error::UnavailableBand(missing));
        }
        let cfg = FinetuneConfig {
            seed,
            mode,
            ..model.finetune.clone()
        };
        let trained = self.trained(model, data, cell, &cfg)?;
        let tested = trained.for_testing(cell.train.bands(), cell.test.bands())?;
        let test = examples(data.split(Split::Test), &cell.train, &cell.test)?;
        tested.evaluate(&test, self.metrics.get(&data.metric_name())?)
    }

    /// One cell as a record; failures become error records.
    pub fn run_cell(
        &mut self,
        model: &ModelSpec,
        data: &Dataset,
        cell: &EvalCell,
        seed: u64,
        mode: FinetuneMode,
    ) -> RunRecord {
        let start = Instant::now();
        let cfg = FinetuneConfig {
            seed,
            mode,
            ..model.finetune.clone()
        };
        let hash = config_hash(model, &cfg, data, cell).unwrap_or_default();
        let result = self.score(model, data, cell, seed, mode);
        let (value, status, error) = match result {
            Ok(v) => (Some(v), RunStatus::Ok, None),
            Err(e) => (None, RunStatus::Error, Some(e.to_string())),
        };
        RunRecord {
            model: model.name.clone(),
            dataset: data.name.clone(),
            cell: cell.id(),
            seed,
            mode,
            metric: data.metric_name(),
            value,
            wall_time_s: start.elapsed().as_secs_f64(),
            config_hash: hash,
            status,
            error,
        }
    }
}

/// Runs one cell outside any protocol.
pub fn run_cell(model: &ModelSpec, data: &Dataset, cell: &EvalCell, seed: u64, mode: FinetuneMode) -> RunRecord {
    CellRunner::new().run_cell(model, data, cell, seed, mode)
}

/// Every model × dataset × cell × seed, skipping keys already in the store.
/// Work is grouped by training combination so each group fine-tunes once;
/// groups are spread over `jobs` threads. Returns the store's records for
/// the requested keys, sorted by key.
pub fn run_protocol(
    models: &[ModelSpec],
    datasets: &[Dataset],
    seeds: &[u64],
    mode: FinetuneMode,
    store: &ResultStore,
    jobs: usize,
) -> Result<Vec<RunRecord>> {
    if models.is_empty() || datasets.is_empty() || seeds.is_empty() {
        return Err(Error::Parameter("protocol needs models, datasets and seeds".into()));
    }
    let done: BTreeSet<RunKey> = store.records()?.iter().map(RunRecord::key).collect();
    let cells = EvalCell::protocol();
    let mut groups: Vec<Vec<(usize, usize, usize, u64)>> = Vec::new();
    let mut wanted = BTreeSet::new();
    for (mi, m) in models.iter().enumerate() {
        for (di, d) in datasets.iter().enumerate() {
            for &seed in seeds {
                for train in ["RGB", "S2"] {
                    let mut g = Vec::new();
                    for (ci, c) in cells.iter().enumerate().filter(|(_, c)| c.train.name() == train) {
                        let key = (m.name.clone(), d.name.clone(), c.id(), seed, mode);
                        if !done.contains(&key) {
                            g.push((mi, di, ci, seed));
                        }
                        wanted.insert(key);
                    }
                    if !g.is_empty() {
                        groups.push(g);
                    }
                }
            }
        }
    }
    let next = AtomicUsize::new(0);
    let failure = Mutex::new(None);
    std::thread::scope(|s| {
        for _ in 0..jobs.max(1).min(groups.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(group) = groups.get(i) else { break };
                let mut runner = CellRunner::new();
                for &(mi, di, ci, seed) in group {
                    let r = runner.run_cell(&models[mi], &datasets[di], &cells[ci], seed, mode);
                    if let Err(e) = store.append(&r) {
                        failure.lock().expect("lock").get_or_insert(e);
                        return;
                    }
                }
            });
        }
    });
    if let Some(e) = failure.into_inner().expect("lock") {
        return Err(e);
    }
    let mut latest: BTreeMap<RunKey, RunRecord> = BTreeMap::new();
    for r in store.records()? {
        let k = r.key();
        if wanted.contains(&k) {
            latest.entry(k).or_insert(r);
        }
    }
    Ok(latest.into_values().collect())
}

// ---------------------------------------------------------------------------
// Aggregation

/// Mean over seeds of successful records, per (model, dataset, cell).
pub fn aggregate_seeds(records: &[RunRecord]) -> BTreeMap<(String, String, String), f64> {
    let mut acc: BTreeMap<(String, String, String), (f64, usize)> = BTreeMap::new();
    for r in records {
        if let (RunStatus::Ok, Some(v)) = (r.status, r.value) {
            let e = acc
                .entry((r.model.clone(), r.dataset.clone(), r.cell.clone()))
                .or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// Per model and cell, the equally weighted mean over datasets.
pub fn average_datasets(
    per_dataset: &BTreeMap<(String, String, String), f64>,
) -> BTreeMap<String, BTreeMap<String, f64>> {
    let mut acc: BTreeMap<String, BTreeMap<String, (f64, usize)>> = BTreeMap::new();
    for ((model, _, cell), &v) in per_dataset {
        let e = acc.entry(model.clone()).or_default().entry(cell.clone()).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(m, cells)| (m, cells.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect()))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankingRow {
    pub model: String,
    /// Cell scores in protocol order.
    pub cells: [f64; 7],
    /// In-distribution, no-overlap and superset averages.
    pub averages: [f64; 3],
    pub ranks: [usize; 3],
    pub overall: f64,
}

/// Rows sorted by overall average, best first.
#[derive(Clone, Debug, PartialEq)]
pub struct RankingTable {
    pub rows: Vec<RankingRow>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Setting averages, per-setting ranks (1 = best; ties go to the
/// lexicographically smaller name) and the overall mean of all cells.
pub fn build_ranking_table(scores: &BTreeMap<String, BTreeMap<String, f64>>) -> Result<RankingTable> {
    let cells = EvalCell::protocol();
    let mut rows = Vec::with_capacity(scores.len());
    for (model, by_cell) in scores {
        let mut v = [0.0; 7];
        for (i, c) in cells.iter().enumerate() {
            v[i] = *by_cell.get(&c.id()).ok_or_else(|| Error::IncompleteModel {
                model: model.clone(),
                cell: c.id(),
            })?;
        }
        let averages = CellCategory::ALL.map(|cat| {
            let xs: Vec<f64> = cells
                .iter()
                .zip(v)
                .filter(|(c, _)| c.category == cat)
                .map(|(_, x)| x)
                .collect();
            mean(&xs)
        });
        rows.push(RankingRow {
            model: model.clone(),
            cells: v,
            averages,
            ranks: [0; 3],
            overall: mean(&v),
        });
    }
    for s in 0..3 {
        let mut order: Vec<usize> = (0..rows.len()).collect();
        order.sort_by(|&a, &b| {
            rows[b].averages[s]
                .total_cmp(&rows[a].averages[s])
                .then_with(|| rows[a].model.cmp(&rows[b].model))
        });
        for (rank, i) in order.into_iter().enumerate() {
            rows[i].ranks[s] = rank + 1;
        }
    }
    rows.sort_by(|a, b| b.overall.total_cmp(&a.overall).then_with(|| a.model.cmp(&b.model)));
    Ok(RankingTable { rows })
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Text,
    /// Long-format `model,cell,value` rows for radar plots.
    Radar,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "text" => Ok(Self::Text),
            "radar" => Ok(Self::Radar),
            _ => Err(Error::Parameter(format!("unknown report format `{s}`"))),
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Self::Csv => "csv",
            Self::Text => "txt",
            Self::Radar => "radar.csv",
        }
    }
}

/// Column names in report order.
pub fn report_columns() -> Vec<String> {
    let cells = EvalCell::protocol();
    let mut cols = vec!["model".to_string()];
    for cat in CellCategory::ALL {
        cols.extend(cells.iter().filter(|c| c.category == cat).map(EvalCell::id));
        cols.push(format!("{} AVG", cat.short()));
        cols.push(format!("{} #", cat.short()));
    }
    cols.push("Overall AVG".into());
    cols
}

fn row_fields(r: &RankingRow, fmt: impl Fn(f64) -> String) -> Vec<String> {
    let cells = EvalCell::protocol();
    let mut out = vec![r.model.clone()];
    for (s, cat) in CellCategory::ALL.iter().enumerate() {
        out.extend(
            cells
                .iter()
                .zip(r.cells)
                .filter(|(c, _)| c.category == *cat)
                .map(|(_, v)| fmt(v)),
        );
        out.push(fmt(r.averages[s]));
        out.push(r.ranks[s].to_string());
    }
    out.push(fmt(r.overall));
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn split_csv_line(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match (c, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            ('"', _) => quoted = !quoted,
            (',', false) => out.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    out.push(cur);
    out
}

pub fn emit_report(table: &RankingTable, format: ReportFormat) -> String {
    let mut out = String::new();
    match format {
        ReportFormat::Csv => {
            out.push_str(&report_columns().join(","));
            out.push('\n');
            for r in &table.rows {
                let f = row_fields(r, |v| format!("{v}"));
                out.push_str(&f.iter().map(|s| csv_field(s)).collect::<Vec<_>>().join(","));
                out.push('\n');
            }
        }
        ReportFormat::Text => {
            let header = report_columns();
            let rows: Vec<Vec<String>> =
                table.rows.iter().map(|r| row_fields(r, |v| format!("{v:.2}"))).collect();
            let widths: Vec<usize> = (0..header.len())
                .map(|i| rows.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0))
                .collect();
            for line in std::iter::once(&header).chain(&rows) {
                let mut s = String::new();
                for (i, (f, w)) in line.iter().zip(&widths).enumerate() {
                    if i == 0 {
                        let _ = write!(s, "{f:<w$}");
                    } else {
                        let _ = write!(s, "  {f:>w$}");
                    }
                }
                out.push_str(s.trim_end());
                out.push('\n');
            }
        }
        ReportFormat::Radar => {
            out.push_str("model,cell,value\n");
            for r in &table.rows {
                for (c, v) in cell_ids().iter().zip(r.cells) {
                    let _ = writeln!(out, "{},{},{}", csv_field(&r.model), c, v);
                }
            }
        }
    }
    out
}

/// Parses the CSV rendering back into a table.
pub fn parse_report_csv(text: &str) -> Result<RankingTable> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty report".into()))?;
    if split_csv_line(header) != report_columns() {
        return Err(Error::Format("unexpected report header".into()));
    }
    let num = |s: &str| -> Result<f64> {
        s.parse().map_err(|_| Error::Format(format!("bad number `{s}`")))
    };
    let rank = |s: &str| -> Result<usize> {
        s.parse().map_err(|_| Error::Format(format!("bad rank `{s}`")))
    };
    let mut rows = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let f = split_csv_line(line);
        if f.len() != 15 {
            return Err(Error::Format(format!("report row has {} fields", f.len())));
        }
        rows.push(RankingRow {
            model: f[0].clone(),
            cells: [num(&f[1])?, num(&f[2])?, num(&f[5])?, num(&f[6])?, num(&f[7])?, num(&f[10])?, num(&f[11])?],
            averages: [num(&f[3])?, num(&f[8])?, num(&f[12])?],
            ranks: [rank(&f[4])?, rank(&f[9])?, rank(&f[13])?],
            overall: num(&f[14])?,
        });
    }
    Ok(RankingTable { rows })
}

/// Writes `ranking.<ext>` for each format into `dir`.
pub fn write_reports(table: &RankingTable, formats: &[ReportFormat], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    formats
        .iter()
        .map(|&f| {
            let p = dir.join(format!("ranking.{}", f.extension()));
            fs::write(&p, emit_report(table, f))?;
            Ok(p)
        })
        .collect()
}

/// Table from a store: seeds averaged, then datasets averaged per cell.
pub fn table_from_records(records: &[RunRecord], mode: Option<FinetuneMode>) -> Result<RankingTable> {
    let kept: Vec<RunRecord> = records
        .iter()
        .filter(|r| mode.is_none_or(|m| r.mode == m))
        .cloned()
        .collect();
    build_ranking_table(&average_datasets(&aggregate_seeds(&kept)))
}
