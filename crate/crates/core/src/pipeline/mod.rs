//! Experiment specs, the on-disk layout of a run and the stages behind the
//! command-line tool.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoding::{longform_decode_batch, read_transcripts, write_transcripts, Condition, DecodeConfig, TranscriptRecord};
use crate::evaluation::{evaluate, markdown_table, WerReport, OVERALL};
use crate::losses::Strategy;
use crate::model::{load_checkpoint, save_checkpoint, LoraConfig, ModelConfig, Phase, TranscriberModel};
use crate::numerics::Distance;
use crate::synthdata::{generate_split, read_corpus, write_corpus, CorpusSplit, GenConfig, PairedSample};
use crate::training::{run_experiment, write_metrics, TrainPlan};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid experiment spec: {0}")]
    Spec(String),
    #[error("missing {what} at {path} (run `{stage}` first)")]
    Missing { what: String, path: PathBuf, stage: &'static str },
    #[error("incomplete grid, no transcripts for: {}", .0.join(", "))]
    IncompleteGrid(Vec<String>),
    #[error("spec file {path}: {msg}")]
    SpecFile { path: PathBuf, msg: String },
    #[error(transparent)]
    Data(#[from] crate::synthdata::DataError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Train(#[from] crate::training::TrainError),
    #[error(transparent)]
    Decode(#[from] crate::decoding::DecodeError),
    #[error(transparent)]
    Eval(#[from] crate::evaluation::EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, PipelineError>;

/// Generator settings and split sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub pretrain: GenConfig,
    pub finetune: GenConfig,
    pub pretrain_count: usize,
    pub train_count: usize,
    pub dev_count: usize,
    pub test_count: usize,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            pretrain: GenConfig::pretraining(),
            finetune: GenConfig::finetuning(),
            pretrain_count: 2000,
            train_count: 500,
            dev_count: 100,
            test_count: 200,
        }
    }
}

impl DataSpec {
    fn gen_config(&self, split: CorpusSplit) -> &GenConfig {
        match split {
            CorpusSplit::Pretrain => &self.pretrain,
            _ => &self.finetune,
        }
    }

    fn count(&self, split: CorpusSplit) -> usize {
        match split {
            CorpusSplit::Pretrain => self.pretrain_count,
            CorpusSplit::Train => self.train_count,
            CorpusSplit::Dev => self.dev_count,
            CorpusSplit::Test => self.test_count,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub data: DataSpec,
    pub model: ModelConfig,
    pub lora: LoraConfig,
    pub pretrain: TrainPlan,
    /// One plan per strategy; each runs once per entry of `seeds`.
    pub finetune: Vec<TrainPlan>,
    pub decode: DecodeConfig,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

/// The ten fine-tuning strategies of the full comparison grid.
pub fn strategy_grid() -> Vec<Strategy> {
    let mut out = vec![Strategy::Voc, Strategy::Mix, Strategy::Random, Strategy::Both];
    for kind in [Distance::L1, Distance::L2] {
        for weight in [0.1, 1.0, 10.0] {
            out.push(Strategy::Cns { kind, weight });
        }
    }
    out
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        let seeds = vec![1, 2, 3, 4, 5];
        Self {
            data: DataSpec::default(),
            model: ModelConfig::default(),
            lora: LoraConfig::default(),
            pretrain: TrainPlan::pretrain(seeds[0]),
            finetune: strategy_grid()
                .into_iter()
                .map(|s| TrainPlan::finetune(s, seeds[0]))
                .collect(),
            decode: DecodeConfig::default(),
            seeds,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentSpec {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::SpecFile {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let spec: Self = serde_json::from_str(&text).map_err(|e| PipelineError::SpecFile {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(PipelineError::Spec(m));
        self.data.pretrain.validate()?;
        self.data.finetune.validate()?;
        self.model.validate()?;
        self.lora.validate()?;
        self.pretrain.validate()?;
        if self.pretrain.phase != Phase::Pretrain {
            return fail("the pretrain plan must use the pretrain phase".into());
        }
        if self.data.pretrain_count == 0 || self.data.train_count == 0 || self.data.test_count == 0 {
            return fail("pretrain, train and test splits need at least one sample".into());
        }
        if self.seeds.is_empty() {
            return fail("seeds list is empty".into());
        }
        let mut seen = std::collections::HashSet::new();
        for s in &self.seeds {
            if !seen.insert(s) {
                return fail(format!("seed {s} is listed twice"));
            }
        }
        let mut ids = std::collections::HashSet::new();
        for plan in std::iter::once(&self.pretrain).chain(&self.finetune) {
            if !self.seeds.contains(&plan.seed) {
                return fail(format!("plan seed {} is not in the seeds list", plan.seed));
            }
        }
        for plan in &self.finetune {
            plan.validate()?;
            if plan.phase != Phase::Finetune {
                return fail(format!("plan {} must use the finetune phase", plan.strategy.id()));
            }
            if !ids.insert(plan.strategy.id()) {
                return fail(format!("strategy {} appears twice in the grid", plan.strategy.id()));
            }
        }
        if self.data.finetune.render.feature_dim != self.model.feature_dim
            || self.data.pretrain.render.feature_dim != self.model.feature_dim
        {
            return fail("data feature_dim must equal model feature_dim".into());
        }
        self.decode
            .validate(&TranscriberModel::from_seed(self.model.clone(), 0)?)
            .map_err(|e| PipelineError::Spec(e.to_string()))
    }

    pub fn plan_for(&self, strategy: &str) -> Result<&TrainPlan> {
        self.finetune
            .iter()
            .find(|p| p.strategy.id() == strategy)
            .ok_or_else(|| PipelineError::Spec(format!("strategy {strategy} is not in the grid")))
    }

    /// The pretrained model and every (strategy, seed) pair, in a fixed order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = vec![Cell::Pretrained];
        for p in &self.finetune {
            for &seed in &self.seeds {
                out.push(Cell::Finetuned {
                    strategy: p.strategy.id(),
                    seed,
                });
            }
        }
        out
    }
}

/// One trained model of the grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Cell {
    Pretrained,
    Finetuned { strategy: String, seed: u64 },
}

impl Cell {
    pub fn id(&self) -> String {
        match self {
            Cell::Pretrained => "pretrained".into(),
            Cell::Finetuned { strategy, seed } => format!("{strategy}/seed{seed}"),
        }
    }
}

/// File locations under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn corpus(&self, split: CorpusSplit) -> PathBuf {
        self.root.join("data").join(format!("{}.jsonl", split.name()))
    }

    pub fn cell_dir(&self, cell: &Cell) -> PathBuf {
        match cell {
            Cell::Pretrained => self.root.join("pretrain"),
            Cell::Finetuned { strategy, seed } => self.root.join("finetune").join(strategy).join(format!("seed{seed}")),
        }
    }

    pub fn checkpoint(&self, cell: &Cell) -> PathBuf {
        self.cell_dir(cell).join("model.ckpt")
    }

    pub fn metrics(&self, cell: &Cell) -> PathBuf {
        self.cell_dir(cell).join("metrics.jsonl")
    }

    pub fn transcripts(&self, cell: &Cell) -> PathBuf {
        self.cell_dir(cell).join("transcripts.jsonl")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

fn require(path: &Path, what: &str, stage: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(PipelineError::Missing {
            what: what.to_string(),
            path: path.to_path_buf(),
            stage,
        })
    }
}

/// Writes every corpus split.
pub fn gen_data(spec: &ExperimentSpec, layout: &Layout) -> Result<()> {
    std::fs::create_dir_all(layout.root.join("data"))?;
    for split in CorpusSplit::ALL {
        let records = generate_split(spec.data.gen_config(split), split, spec.data.count(split))?;
        write_corpus(&layout.corpus(split), &records)?;
    }
    Ok(())
}

pub fn load_split(layout: &Layout, split: CorpusSplit) -> Result<Vec<PairedSample>> {
    let path = layout.corpus(split);
    require(&path, &format!("{} corpus", split.name()), "gen-data")?;
    read_corpus(&path)?
        .iter()
        .map(|r| r.materialize().map_err(Into::into))
        .collect()
}

fn save_cell(layout: &Layout, cell: &Cell, model: &TranscriberModel, metrics: &[crate::training::StepMetrics]) -> Result<()> {
    std::fs::create_dir_all(layout.cell_dir(cell))?;
    save_checkpoint(model, &layout.checkpoint(cell))?;
    write_metrics(&layout.metrics(cell), metrics)?;
    Ok(())
}

pub fn pretrain(spec: &ExperimentSpec, layout: &Layout) -> Result<()> {
    let corpus = load_split(layout, CorpusSplit::Pretrain)?;
    let model = TranscriberModel::from_seed(spec.model.clone(), spec.pretrain.seed)?;
    let out = run_experiment(&spec.pretrain, &corpus, model, None)?;
    save_cell(layout, &Cell::Pretrained, &out.model, &out.metrics)
}

pub fn load_model(layout: &Layout, cell: &Cell) -> Result<TranscriberModel> {
    let path = layout.checkpoint(cell);
    let stage = match cell {
        Cell::Pretrained => "pretrain",
        Cell::Finetuned { .. } => "finetune",
    };
    require(&path, &format!("checkpoint for {}", cell.id()), stage)?;
    Ok(load_checkpoint(&path)?.model)
}

pub fn finetune(spec: &ExperimentSpec, layout: &Layout, strategy: &str, seed: u64) -> Result<()> {
    finetune_with(spec, layout, strategy, seed, &load_split(layout, CorpusSplit::Train)?)
}

fn finetune_with(spec: &ExperimentSpec, layout: &Layout, strategy: &str, seed: u64, corpus: &[PairedSample]) -> Result<()> {
    if !spec.seeds.contains(&seed) {
        return Err(PipelineError::Spec(format!("seed {seed} is not in the seeds list")));
    }
    let plan = TrainPlan {
        seed,
        ..spec.plan_for(strategy)?.clone()
    };
    let base = load_model(layout, &Cell::Pretrained)?;
    let out = run_experiment(&plan, corpus, base, Some(&spec.lora))?;
    let cell = Cell::Finetuned {
        strategy: strategy.to_string(),
        seed,
    };
    save_cell(layout, &cell, &out.model, &out.metrics)
}

/// Transcribes every test sample under both conditions.
pub fn decode(spec: &ExperimentSpec, layout: &Layout, cell: &Cell) -> Result<()> {
    decode_with(spec, layout, cell, &load_split(layout, CorpusSplit::Test)?)
}

fn decode_with(spec: &ExperimentSpec, layout: &Layout, cell: &Cell, test: &[PairedSample]) -> Result<()> {
    let model = load_model(layout, cell)?;
    let mix: Vec<_> = test.iter().map(|s| &s.mixture).collect();
    let voc: Vec<_> = test.iter().map(|s| &s.vocal).collect();
    let hyp_mix = longform_decode_batch(&model, &mix, &spec.decode)?;
    let hyp_voc = longform_decode_batch(&model, &voc, &spec.decode)?;
    let mut records = Vec::with_capacity(2 * test.len());
    for ((s, m), v) in test.iter().zip(hyp_mix).zip(hyp_voc) {
        for (condition, hypothesis) in [(Condition::Mix, m), (Condition::Voc, v)] {
            records.push(TranscriptRecord {
                id: s.id.clone(),
                condition,
                hypothesis,
            });
        }
    }
    write_transcripts(&layout.transcripts(cell), &records)?;
    Ok(())
}

/// Seed-median pooled WER per (subset, condition) for each row label.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub rows: Vec<(String, BTreeMap<(String, Condition), f64>)>,
    pub per_cell: BTreeMap<Cell, WerReport>,
}

/// Label of the unadapted model's row.
pub const PRETRAINED_ROW: &str = "pretrained, no finetune";

impl Summary {
    pub fn get(&self, label: &str, subset: &str, condition: Condition) -> Option<f64> {
        self.rows
            .iter()
            .find(|(l, _)| l == label)
            .and_then(|(_, cells)| cells.get(&(subset.to_string(), condition)).copied())
    }

    /// Overall pooled WER of one cell.
    pub fn cell_wer(&self, cell: &Cell, condition: Condition) -> Option<f64> {
        self.per_cell.get(cell)?.row(OVERALL, condition).map(|r| r.wer)
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Scores every cell's transcripts and writes per-cell CSVs, the summary
/// CSV and the Markdown comparison table.
pub fn eval(spec: &ExperimentSpec, layout: &Layout) -> Result<Summary> {
    let cells = spec.cells();
    let missing: Vec<String> = cells
        .iter()
        .filter(|c| !layout.transcripts(c).exists())
        .map(Cell::id)
        .collect();
    if !missing.is_empty() {
        return Err(PipelineError::IncompleteGrid(missing));
    }
    let refs_path = layout.corpus(CorpusSplit::Test);
    require(&refs_path, "test corpus", "gen-data")?;
    let references: HashMap<String, (String, String)> = read_corpus(&refs_path)?
        .into_iter()
        .map(|r| (r.id, (r.text, r.language)))
        .collect();

    let reports_dir = layout.reports();
    std::fs::create_dir_all(&reports_dir)?;
    let mut per_cell = BTreeMap::new();
    for cell in &cells {
        let report = evaluate(&read_transcripts(&layout.transcripts(cell))?, &references)?;
        report.write_csv(&reports_dir.join(format!("{}.csv", cell.id().replace('/', "_"))))?;
        per_cell.insert(cell.clone(), report);
    }

    let mut rows = Vec::new();
    let pooled = |report: &WerReport| -> BTreeMap<(String, Condition), f64> {
        report
            .pooled
            .iter()
            .map(|r| ((r.subset.clone(), r.condition), r.wer))
            .collect()
    };
    rows.push((PRETRAINED_ROW.to_string(), pooled(&per_cell[&Cell::Pretrained])));
    for plan in &spec.finetune {
        let id = plan.strategy.id();
        let mut gathered: BTreeMap<(String, Condition), Vec<f64>> = BTreeMap::new();
        for &seed in &spec.seeds {
            let cell = Cell::Finetuned {
                strategy: id.clone(),
                seed,
            };
            for (k, v) in pooled(&per_cell[&cell]) {
                gathered.entry(k).or_default().push(v);
            }
        }
        rows.push((id, gathered.into_iter().map(|(k, mut v)| (k, median(&mut v))).collect()));
    }

    let mut csv = csv::Writer::from_path(reports_dir.join("summary.csv")).map_err(crate::evaluation::EvalError::from)?;
    csv.write_record(["model", "subset", "condition", "median_wer"])
        .map_err(crate::evaluation::EvalError::from)?;
    for (label, cells) in &rows {
        for ((subset, cond), v) in cells {
            csv.write_record([label.as_str(), subset, cond.name(), &format!("{v:.6}")])
                .map_err(crate::evaluation::EvalError::from)?;
        }
    }
    csv.flush()?;
    std::fs::write(reports_dir.join("table.md"), markdown_table(&rows))?;
    Ok(Summary { rows, per_cell })
}

/// Runs every stage. Fine-tuning cells and decoding run on `jobs` workers.
pub fn run_grid(spec: &ExperimentSpec, layout: &Layout, jobs: usize) -> Result<Summary> {
    spec.validate()?;
    std::fs::create_dir_all(&layout.root)?;
    std::fs::write(layout.root.join("spec.json"), spec.to_json())?;
    gen_data(spec, layout)?;
    pretrain(spec, layout)?;
    let train = load_split(layout, CorpusSplit::Train)?;
    let test = load_split(layout, CorpusSplit::Test)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| PipelineError::Spec(format!("cannot start {jobs} workers: {e}")))?;
    let cells = spec.cells();
    pool.install(|| {
        cells.par_iter().try_for_each(|cell| {
            if let Cell::Finetuned { strategy, seed } = cell {
                finetune_with(spec, layout, strategy, *seed, &train)?;
            }
            decode_with(spec, layout, cell, &test)
        })
    })?;
    eval(spec, layout)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_is_valid_and_round_trips() {
        let spec = ExperimentSpec::default();
        spec.validate().unwrap();
        assert_eq!(spec.finetune.len(), 10);
        assert_eq!(spec.cells().len(), 1 + 10 * 5);
        let back: ExperimentSpec = serde_json::from_str(&spec.to_json()).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn duplicate_strategies_and_stray_seeds_are_rejected() {
        let mut spec = ExperimentSpec::default();
        spec.finetune.push(spec.finetune[0].clone());
        assert!(spec.validate().is_err());
        let mut spec = ExperimentSpec::default();
        spec.finetune[0].seed = 99;
        assert!(spec.validate().is_err());
        let mut spec = ExperimentSpec::default();
        spec.seeds.push(1);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn cell_ids_match_grid_entries() {
        let spec = ExperimentSpec::default();
        let ids: Vec<String> = spec.cells().iter().map(Cell::id).collect();
        assert_eq!(ids[0], "pretrained");
        assert_eq!(ids[1], "voc/seed1");
        assert!(ids.contains(&"cns-l2-w1.0/seed5".to_string()));
        let unique: std::collections::HashSet<_> = ids.iter().collect();
        assert_eq!(unique.len(), ids.len());
    }

    #[test]
    fn median_of_odd_and_even_counts() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn missing_prerequisites_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let layout = Layout::new(dir.path());
        let spec = ExperimentSpec::default();
        let err = finetune(&spec, &layout, "voc", 1).unwrap_err().to_string();
        assert!(err.contains("train corpus") && err.contains("gen-data"), "{err}");
        let err = eval(&spec, &layout).unwrap_err().to_string();
        assert!(err.contains("pretrained") && err.contains("voc/seed1"), "{err}");
    }
}
