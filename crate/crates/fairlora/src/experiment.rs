//! Batch experiment runner: method comparison, penalty-strength sweep, and
//! sensitive-attribute sweep over synthetic or JSONL datasets.
//!
//! Every run is addressed by a single root seed expanded into named
//! sub-seeds (data, split, init; the trainer derives shuffle and dropout),
//! so any table row can be reproduced from its recorded (spec, seed) alone.
//! For a given seed, all methods share the same dataset, split, and initial
//! weights. Independent (method, seed) runs execute in parallel; rows are
//! ordered by their position in the grid, never by completion time.

use crate::data::{
    generate_synthetic, load_jsonl, GroupSpec, GroupedDataset, SplitRatios, SynthConfig,
};
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossMode};
use crate::metrics::FairnessReport;
use crate::model::{ToyModel, ToyModelConfig};
use crate::seeds;
use crate::trainer::{evaluate_model, train, TrainConfig, TrainHistory};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

fn default_lambda() -> f64 {
    0.5
}

fn default_w_max() -> f64 {
    10.0
}

/// One training objective in the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub mode: LossMode,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_w_max")]
    pub w_max: f64,
}

impl MethodSpec {
    pub fn new(mode: LossMode) -> Self {
        MethodSpec { mode, lambda: default_lambda(), w_max: default_w_max() }
    }

    fn loss_config(&self, group_set: Vec<String>) -> Result<LossConfig> {
        LossConfig::new(self.mode, self.lambda, self.w_max, group_set)
    }
}

/// Where a run's data comes from. Synthetic sources are regenerated per run
/// seed; a JSONL source is fixed data, still split per run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSource {
    Synthetic {
        #[serde(flatten)]
        config: SynthConfig,
    },
    Jsonl {
        path: PathBuf,
    },
}

/// Group layout for one sensitive attribute in the attribute sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSpec {
    pub name: String,
    pub groups: Vec<GroupSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    /// Name of the sensitive attribute the dataset's groups represent.
    pub attribute: String,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub split: SplitRatios,
    #[serde(default)]
    pub model: ToyModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub methods: Vec<MethodSpec>,
    pub seeds: Vec<u64>,
    /// Shared warm-start epochs: plain cross-entropy training whose adapter
    /// updates are merged into the frozen base before the per-method runs,
    /// so every method starts from the same task-competent base model (the
    /// pretrained-backbone setting the adapters are designed for). Zero
    /// disables the phase.
    #[serde(default)]
    pub pretrain_epochs: usize,
    /// Penalty strengths for the sweep subcommand.
    #[serde(default)]
    pub lambdas: Vec<f64>,
    /// Attribute layouts for the attribute sweep subcommand.
    #[serde(default)]
    pub attributes: Vec<AttributeSpec>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::config("at least one method required"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed required"));
        }
        let distinct: BTreeSet<u64> = self.seeds.iter().copied().collect();
        if distinct.len() != self.seeds.len() {
            return Err(Error::config("seeds must be distinct"));
        }
        Ok(())
    }

    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let spec: ExperimentSpec =
            toml::from_str(&text).map_err(|e| Error::Toml(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Toml(e.to_string()))
    }
}

/// One completed run.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub attribute: String,
    pub method: String,
    pub lambda: Option<f64>,
    pub w_max: Option<f64>,
    pub seed: u64,
    pub report: FairnessReport,
    /// Percent reduction of the accuracy gap relative to the same-seed
    /// vanilla run; positive is an improvement.
    pub gap_reduction_pct: Option<f64>,
    pub seconds: f64,
    pub history: TrainHistory,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    /// Sorted union of group names across all rows.
    pub fn group_columns(&self) -> Vec<String> {
        let mut names = BTreeSet::new();
        for row in &self.rows {
            for g in row.report.per_group_accuracy.keys() {
                names.insert(g.clone());
            }
        }
        names.into_iter().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Gap reduction relative to a baseline, as a percentage. Positive means the
/// gap shrank. Undefined (None) when the baseline gap is zero.
pub fn gap_reduction_pct(vanilla_gap: f64, gap: f64) -> Option<f64> {
    (vanilla_gap != 0.0).then(|| (vanilla_gap - gap) / vanilla_gap * 100.0)
}

fn build_dataset(source: &DatasetSource, run_seed: u64) -> Result<GroupedDataset> {
    match source {
        DatasetSource::Synthetic { config } => {
            let mut cfg = config.clone();
            cfg.seed = seeds::derive(run_seed, "data");
            generate_synthetic(&cfg)
        }
        DatasetSource::Jsonl { path } => load_jsonl(path),
    }
}

/// Train one (method, seed) cell and evaluate it on the test split.
fn run_single(
    spec: &ExperimentSpec,
    attribute: &str,
    source: &DatasetSource,
    method: &MethodSpec,
    seed: u64,
) -> Result<ResultRow> {
    let started = Instant::now();
    let ds = build_dataset(source, seed)?;
    let split = ds.stratified_split(spec.split, seeds::derive(seed, "split"))?;

    let mut model_cfg = spec.model.clone();
    model_cfg.seed = seeds::derive(seed, "init");
    let mut model = ToyModel::new(model_cfg)?;

    if spec.pretrain_epochs > 0 {
        let pretrain_seed = seeds::derive(seed, "pretrain");
        let mut warm_cfg = spec.train.clone();
        warm_cfg.epochs = spec.pretrain_epochs;
        warm_cfg.seed = pretrain_seed;
        let warm_loss =
            LossConfig::new(LossMode::Vanilla, 0.0, 10.0, split.train.group_set().to_vec())?;
        train(&mut model, &split.train, &warm_loss, &warm_cfg)?;
        model.merge_adapters(pretrain_seed)?;
    }

    let mut train_cfg = spec.train.clone();
    train_cfg.seed = seed;

    let loss_cfg = method.loss_config(split.train.group_set().to_vec())?;
    let history = train(&mut model, &split.train, &loss_cfg, &train_cfg)?;
    let report = evaluate_model(&model, &split.test)?;

    Ok(ResultRow {
        attribute: attribute.to_string(),
        method: method.mode.label().to_string(),
        lambda: method.mode.uses_lambda().then_some(method.lambda),
        w_max: method.mode.uses_weights().then_some(method.w_max),
        seed,
        report,
        gap_reduction_pct: None,
        seconds: started.elapsed().as_secs_f64(),
        history,
    })
}

/// Run a grid of cells in parallel, preserving grid order. On failure the
/// completed rows are saved to `partial_out` (when given) before the first
/// error (in grid order) propagates.
fn run_grid(
    cells: Vec<(String, DatasetSource, MethodSpec, u64)>,
    spec: &ExperimentSpec,
    partial_out: Option<&Path>,
) -> Result<ResultTable> {
    let outcomes: Vec<Result<ResultRow>> = cells
        .par_iter()
        .map(|(attribute, source, method, seed)| {
            run_single(spec, attribute, source, method, *seed)
        })
        .collect();

    let mut rows = Vec::with_capacity(outcomes.len());
    let mut first_error = None;
    for outcome in outcomes {
        match outcome {
            Ok(row) => rows.push(row),
            Err(e) if first_error.is_none() => first_error = Some(e),
            Err(_) => {}
        }
    }
    let table = ResultTable { rows };
    match first_error {
        None => Ok(table),
        Some(e) => {
            if let (Some(dir), false) = (partial_out, table.is_empty()) {
                std::fs::create_dir_all(dir)?;
                emit_table(&table, TableFormat::Csv, &dir.join("results_partial.csv"))?;
            }
            Err(e)
        }
    }
}

/// The four-method comparison grid: every method trained from identical
/// initialization and data split per seed.
pub fn run_method_comparison(spec: &ExperimentSpec) -> Result<ResultTable> {
    spec.validate()?;
    let mut cells = Vec::new();
    for &seed in &spec.seeds {
        for method in &spec.methods {
            cells.push((spec.attribute.clone(), spec.dataset.clone(), method.clone(), seed));
        }
    }
    run_grid(cells, spec, spec.out_dir.as_deref())
}

/// Penalty-strength sweep for the first gap-penalized method in the spec,
/// with a same-seed vanilla baseline and a gap-reduction column per row.
pub fn run_lambda_sweep(spec: &ExperimentSpec, lambdas: &[f64]) -> Result<ResultTable> {
    spec.validate()?;
    let method = spec
        .methods
        .iter()
        .find(|m| m.mode.uses_lambda())
        .ok_or_else(|| Error::config("lambda sweep needs an fr or hybrid method"))?;
    if lambdas.is_empty() {
        return Err(Error::config("no lambda values given"));
    }

    let mut cells = Vec::new();
    for &seed in &spec.seeds {
        cells.push((
            spec.attribute.clone(),
            spec.dataset.clone(),
            MethodSpec { mode: LossMode::Vanilla, ..method.clone() },
            seed,
        ));
        for &lambda in lambdas {
            cells.push((
                spec.attribute.clone(),
                spec.dataset.clone(),
                MethodSpec { lambda, ..method.clone() },
                seed,
            ));
        }
    }
    let mut table = run_grid(cells, spec, spec.out_dir.as_deref())?;

    // Fill the reduction column from each seed's vanilla row.
    let baselines: Vec<(u64, f64)> = table
        .rows
        .iter()
        .filter(|r| r.method == LossMode::Vanilla.label())
        .map(|r| (r.seed, r.report.max_acc_gap))
        .collect();
    for row in &mut table.rows {
        if row.method == LossMode::Vanilla.label() {
            continue;
        }
        if let Some((_, base)) = baselines.iter().find(|(s, _)| *s == row.seed) {
            row.gap_reduction_pct = gap_reduction_pct(*base, row.report.max_acc_gap);
        }
    }
    Ok(table)
}

/// Vanilla-versus-Hybrid comparison per sensitive attribute. The dataset
/// source must be synthetic; each attribute swaps in its own group layout.
pub fn run_attribute_sweep(spec: &ExperimentSpec, attributes: &[AttributeSpec]) -> Result<ResultTable> {
    spec.validate()?;
    let base = match &spec.dataset {
        DatasetSource::Synthetic { config } => config.clone(),
        DatasetSource::Jsonl { .. } => {
            return Err(Error::config("attribute sweep requires a synthetic dataset source"));
        }
    };
    if attributes.is_empty() {
        return Err(Error::config("no attributes given"));
    }
    let hybrid = spec
        .methods
        .iter()
        .find(|m| m.mode == LossMode::Hybrid)
        .cloned()
        .unwrap_or_else(|| MethodSpec::new(LossMode::Hybrid));

    let mut cells = Vec::new();
    for attr in attributes {
        let source = DatasetSource::Synthetic {
            config: SynthConfig { groups: attr.groups.clone(), ..base.clone() },
        };
        for &seed in &spec.seeds {
            for method in [MethodSpec::new(LossMode::Vanilla), hybrid.clone()] {
                cells.push((attr.name.clone(), source.clone(), method, seed));
            }
        }
    }
    run_grid(cells, spec, spec.out_dir.as_deref())
}

/// Attribute layouts mirroring the sweep's three demographic splits: one
/// dominant group at full signal, the rest at 0.6x.
pub fn default_attributes() -> Vec<AttributeSpec> {
    let group = |name: &str, fraction: f64, signal: f64| GroupSpec {
        name: name.to_string(),
        fraction,
        signal,
        positive_rate: 0.5,
    };
    vec![
        AttributeSpec {
            name: "gender".into(),
            groups: vec![group("male", 0.429, 0.6), group("female", 0.571, 1.0)],
        },
        AttributeSpec {
            name: "race".into(),
            groups: vec![
                group("white", 0.769, 1.0),
                group("black", 0.149, 0.6),
                group("asian", 0.082, 0.6),
            ],
        },
        AttributeSpec {
            name: "ethnicity".into(),
            groups: vec![
                group("non_hispanic", 0.903, 1.0),
                group("hispanic", 0.043, 0.6),
                group("unknown", 0.054, 0.6),
            ],
        },
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Markdown,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_columns(group_columns: &[String]) -> Vec<String> {
    let mut cols = vec![
        "attribute".to_string(),
        "method".to_string(),
        "lambda".to_string(),
        "w_max".to_string(),
        "seed".to_string(),
        "overall_acc".to_string(),
    ];
    cols.extend(group_columns.iter().map(|g| format!("acc_{g}")));
    cols.extend(
        ["max_acc_gap", "tpr_gap", "fpr_gap", "dp_gap", "gap_reduction_pct", "seconds"]
            .map(String::from),
    );
    cols
}

fn row_fields(row: &ResultRow, group_columns: &[String], seconds: bool) -> Vec<String> {
    let mut fields = vec![
        row.attribute.clone(),
        row.method.clone(),
        fmt_opt(row.lambda),
        fmt_opt(row.w_max),
        row.seed.to_string(),
        row.report.overall_accuracy.to_string(),
    ];
    for g in group_columns {
        fields.push(
            row.report
                .per_group_accuracy
                .get(g)
                .map(|a| a.to_string())
                .unwrap_or_default(),
        );
    }
    fields.push(row.report.max_acc_gap.to_string());
    fields.push(row.report.tpr_gap.to_string());
    fields.push(row.report.fpr_gap.to_string());
    fields.push(row.report.demographic_parity_gap.to_string());
    fields.push(fmt_opt(row.gap_reduction_pct));
    fields.push(if seconds { format!("{:.3}", row.seconds) } else { String::new() });
    fields
}

/// Full-precision CSV. `include_seconds: false` blanks the wall-clock column
/// (the one field that is not a pure function of the spec and seed).
pub fn render_csv_with(table: &ResultTable, include_seconds: bool) -> Result<String> {
    if table.is_empty() {
        return Err(Error::EmptyTable);
    }
    let groups = table.group_columns();
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(csv_columns(&groups)).map_err(|e| Error::Csv(e.to_string()))?;
    for row in &table.rows {
        writer
            .write_record(row_fields(row, &groups, include_seconds))
            .map_err(|e| Error::Csv(e.to_string()))?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::Csv(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Csv(e.to_string()))
}

pub fn render_csv(table: &ResultTable) -> Result<String> {
    render_csv_with(table, true)
}

/// Markdown table with percentages, mirroring the comparison-table layout.
pub fn render_markdown(table: &ResultTable) -> Result<String> {
    if table.is_empty() {
        return Err(Error::EmptyTable);
    }
    let groups = table.group_columns();
    let cols = csv_columns(&groups);
    let mut out = String::new();
    writeln!(out, "| {} |", cols.join(" | ")).unwrap();
    writeln!(out, "|{}|", cols.iter().map(|_| " --- ").collect::<Vec<_>>().join("|")).unwrap();
    let pct = |v: f64| format!("{:.2}", v * 100.0);
    for row in &table.rows {
        let mut fields = vec![
            row.attribute.clone(),
            row.method.clone(),
            fmt_opt(row.lambda),
            fmt_opt(row.w_max),
            row.seed.to_string(),
            pct(row.report.overall_accuracy),
        ];
        for g in &groups {
            fields.push(
                row.report.per_group_accuracy.get(g).map(|&a| pct(a)).unwrap_or_default(),
            );
        }
        fields.push(pct(row.report.max_acc_gap));
        fields.push(pct(row.report.tpr_gap));
        fields.push(pct(row.report.fpr_gap));
        fields.push(pct(row.report.demographic_parity_gap));
        fields.push(
            row.gap_reduction_pct.map(|g| format!("{g:+.2}%")).unwrap_or_default(),
        );
        fields.push(format!("{:.3}", row.seconds));
        writeln!(out, "| {} |", fields.join(" | ")).unwrap();
    }
    Ok(out)
}

/// Write a table to disk in the requested format. Empty tables error before
/// any file is created.
pub fn emit_table(table: &ResultTable, format: TableFormat, path: impl AsRef<Path>) -> Result<()> {
    let rendered = match format {
        TableFormat::Csv => render_csv(table)?,
        TableFormat::Markdown => render_markdown(table)?,
    };
    std::fs::write(path, rendered)?;
    Ok(())
}

/// Resolved-run record for the JSON manifest (timing-free, reproducible).
#[derive(Debug, Serialize)]
struct ManifestRun<'a> {
    attribute: &'a str,
    method: &'a str,
    lambda: Option<f64>,
    w_max: Option<f64>,
    seed: u64,
    data_seed: u64,
    split_seed: u64,
    init_seed: u64,
}

/// Write results.csv, results.md, per-run history CSVs, and the JSON run
/// manifest into `out_dir`.
pub fn save_outputs(spec: &ExperimentSpec, table: &ResultTable, out_dir: &Path) -> Result<()> {
    if table.is_empty() {
        return Err(Error::EmptyTable);
    }
    std::fs::create_dir_all(out_dir)?;
    emit_table(table, TableFormat::Csv, out_dir.join("results.csv"))?;
    emit_table(table, TableFormat::Markdown, out_dir.join("results.md"))?;

    for row in &table.rows {
        let lambda_part = row
            .lambda
            .map(|l| format!("_lambda{l}"))
            .unwrap_or_default();
        let name = format!(
            "history_{}_{}{}_seed{}.csv",
            row.attribute, row.method, lambda_part, row.seed
        );
        row.history.save_csv(out_dir.join(name))?;
    }

    let runs: Vec<ManifestRun> = table
        .rows
        .iter()
        .map(|row| ManifestRun {
            attribute: &row.attribute,
            method: &row.method,
            lambda: row.lambda,
            w_max: row.w_max,
            seed: row.seed,
            data_seed: seeds::derive(row.seed, "data"),
            split_seed: seeds::derive(row.seed, "split"),
            init_seed: seeds::derive(row.seed, "init"),
        })
        .collect();
    #[derive(Serialize)]
    struct Manifest<'a> {
        spec: &'a ExperimentSpec,
        runs: Vec<ManifestRun<'a>>,
    }
    let manifest = Manifest { spec, runs };
    std::fs::write(
        out_dir.join("run_manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

/// The reference benchmark: 2000 samples at the 0.903/0.043/0.054 imbalance,
/// minority signal 0.6x, all four methods, five seeds.
pub fn reference_experiment() -> ExperimentSpec {
    ExperimentSpec {
        attribute: "ethnicity".into(),
        dataset: DatasetSource::Synthetic { config: crate::data::reference_synth(2000, 0) },
        split: SplitRatios::default(),
        model: ToyModelConfig::default(),
        train: TrainConfig {
            learning_rate: 2e-3,
            ..TrainConfig::default()
        },
        methods: vec![
            MethodSpec::new(LossMode::Vanilla),
            MethodSpec::new(LossMode::Fr),
            MethodSpec::new(LossMode::Gr),
            MethodSpec::new(LossMode::Hybrid),
        ],
        seeds: vec![42, 43, 44, 45, 46],
        pretrain_epochs: 2,
        lambdas: vec![0.1, 0.5, 1.0],
        attributes: default_attributes(),
        out_dir: None,
    }
}
