//! Configuration, end-to-end orchestration and artifact export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{self, FeatureSchema, SurvivalDataset};
use crate::elementary::{Elementary, ElementaryParams, FittedModel};
use crate::error::{Error, Result};
use crate::expr::FeatureSet;
use crate::insights::{self, ImportanceReport};
use crate::rng;
use crate::search::{Objectives, SearchConfig};
use crate::selection::{self, CandidateModel, ConfidenceInterval, Constraints, RunResult, SelectionConfig};
use crate::stats::{self, SurvivalCurve};
use crate::stratify::{self, FlowNode, StratificationModel, StratifyConfig};
use crate::tree::{TreeNode, TreeParams};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const SEED_ENV: &str = "PISA_SEED";

const STREAM_EXTERNAL: u64 = 20;
const STREAM_STRATIFY: u64 = 21;

fn default_reps() -> usize {
    30
}
fn default_fitness_splits() -> usize {
    25
}
fn default_population() -> usize {
    256
}
fn default_max_generations() -> usize {
    50
}
fn default_stall_generations() -> usize {
    5
}
fn default_bootstrap_n() -> usize {
    1000
}
fn default_ridge_alpha() -> f64 {
    1.0
}
fn default_max_depth() -> usize {
    3
}
fn default_min_leaf() -> usize {
    10
}
fn default_elementary() -> Elementary {
    Elementary::Cox
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema: FeatureSchema,
    pub internal_path: PathBuf,
    #[serde(default)]
    pub external_path: Option<PathBuf>,
    #[serde(default = "default_elementary")]
    pub elementary: Elementary,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default = "default_fitness_splits")]
    pub fitness_splits: usize,
    #[serde(default = "default_population")]
    pub population: usize,
    #[serde(default = "default_max_generations")]
    pub max_generations: usize,
    #[serde(default = "default_stall_generations")]
    pub stall_generations: usize,
    #[serde(default = "default_bootstrap_n")]
    pub bootstrap_n: usize,
    #[serde(default = "default_ridge_alpha")]
    pub ridge_alpha: f64,
    #[serde(default = "default_max_depth")]
    pub tree_max_depth: usize,
    #[serde(default = "default_min_leaf")]
    pub tree_min_leaf: usize,
    #[serde(default)]
    pub constraints: Constraints,
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; all available cores when absent.
    #[serde(default)]
    pub workers: Option<usize>,
}

impl PipelineConfig {
    /// A configuration with every tunable at its default.
    pub fn new(schema: FeatureSchema, internal_path: PathBuf) -> Self {
        Self {
            schema,
            internal_path,
            external_path: None,
            elementary: default_elementary(),
            reps: default_reps(),
            fitness_splits: default_fitness_splits(),
            population: default_population(),
            max_generations: default_max_generations(),
            stall_generations: default_stall_generations(),
            bootstrap_n: default_bootstrap_n(),
            ridge_alpha: default_ridge_alpha(),
            tree_max_depth: default_max_depth(),
            tree_min_leaf: default_min_leaf(),
            constraints: Constraints::default(),
            seed: 0,
            workers: None,
        }
    }

    /// Read a JSON configuration. Relative data paths resolve against the
    /// file's directory; `PISA_SEED` overrides the seed.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.internal_path = base.join(&config.internal_path);
        config.external_path = config.external_path.map(|p| base.join(p));
        if let Ok(seed) = std::env::var(SEED_ENV) {
            config.seed = seed
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}=`{seed}` is not an unsigned integer")))?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.schema.validate().map_err(|e| Error::Config(e.to_string()))?;
        let positive = [
            ("reps", self.reps),
            ("fitness_splits", self.fitness_splits),
            ("max_generations", self.max_generations),
            ("stall_generations", self.stall_generations),
            ("bootstrap_n", self.bootstrap_n),
            ("tree_max_depth", self.tree_max_depth),
            ("tree_min_leaf", self.tree_min_leaf),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{name}` must be positive")));
        }
        if self.population < 2 {
            return Err(Error::Config("`population` must be at least 2".into()));
        }
        if !(self.ridge_alpha >= 0.0 && self.ridge_alpha.is_finite()) {
            return Err(Error::Config("`ridge_alpha` must be a non-negative number".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("`workers` must be positive".into()));
        }
        self.constraints.validate(&self.schema)
    }

    pub fn params(&self) -> ElementaryParams {
        ElementaryParams {
            ridge_alpha: self.ridge_alpha,
            tree: TreeParams {
                max_depth: self.tree_max_depth,
                min_leaf: self.tree_min_leaf,
            },
        }
    }

    pub fn selection(&self) -> SelectionConfig {
        SelectionConfig {
            reps: self.reps,
            train_fraction: 0.75,
            bootstrap_n: self.bootstrap_n,
            search: SearchConfig {
                population: self.population,
                max_generations: self.max_generations,
                stall_generations: self.stall_generations,
                fitness_splits: self.fitness_splits,
                fitness_train_fraction: 0.75,
            },
            params: self.params(),
        }
    }

    /// SHA-256 of the configuration's JSON serialization. The worker count
    /// does not affect results and is left out.
    pub fn hash(&self) -> String {
        let canonical = Self {
            workers: None,
            ..self.clone()
        };
        let json = serde_json::to_string(&canonical).expect("configuration serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }

    /// Run `f` on a worker pool sized by `workers`.
    pub fn install<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T> {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = self.workers {
            builder = builder.num_threads(n);
        }
        let pool = builder
            .build()
            .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
        Ok(pool.install(f))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub struct Datasets {
    pub internal: SurvivalDataset,
    pub external: Option<SurvivalDataset>,
    pub dropped_rows: usize,
}

pub fn load_datasets(config: &PipelineConfig) -> Result<Datasets> {
    let internal = dataset::load_dataset(&config.internal_path, &config.schema)?;
    let mut dropped_rows = internal.dropped_rows;
    let external = match &config.external_path {
        Some(p) => {
            let ext = dataset::load_dataset(p, &config.schema)?;
            dropped_rows += ext.dropped_rows;
            Some(ext.dataset)
        }
        None => None,
    };
    Ok(Datasets {
        internal: internal.dataset,
        external,
        dropped_rows,
    })
}

/// Compact, serializable view of fitted parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FittedParams {
    Cox {
        beta: Vec<f64>,
        hazard_ratios: Vec<f64>,
        feature_means: Vec<f64>,
        feature_sds: Vec<f64>,
        converged: bool,
    },
    Tree {
        nodes: Vec<TreeNodeRecord>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TreeNodeRecord {
    Split {
        feature: usize,
        threshold: f64,
        statistic: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        n: usize,
        risk: f64,
    },
}

impl From<&FittedModel> for FittedParams {
    fn from(model: &FittedModel) -> Self {
        match model {
            FittedModel::Cox(m) => FittedParams::Cox {
                beta: m.beta.clone(),
                hazard_ratios: m.hazard_ratios(),
                feature_means: m.feature_means.clone(),
                feature_sds: m.feature_sds.clone(),
                converged: m.converged,
            },
            FittedModel::Tree(t) => FittedParams::Tree {
                nodes: t
                    .nodes
                    .iter()
                    .map(|n| match n {
                        TreeNode::Split { split, left, right } => TreeNodeRecord::Split {
                            feature: split.feature,
                            threshold: split.threshold,
                            statistic: split.statistic,
                            left: *left,
                            right: *right,
                        },
                        TreeNode::Leaf { members, risk, .. } => TreeNodeRecord::Leaf {
                            n: members.len(),
                            risk: *risk,
                        },
                    })
                    .collect(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub id: String,
    pub repetition_id: usize,
    pub expressions: Vec<String>,
    pub objectives: Objectives,
    pub internal_ci: ConfidenceInterval,
    pub external_ci: Option<ConfidenceInterval>,
    pub preselected: bool,
    pub fitted: FittedParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepetitionRecord {
    pub repetition_id: usize,
    pub seed: u64,
    pub n_train: usize,
    pub n_validation: usize,
    pub hypervolume: Vec<f64>,
    pub baseline: ModelRecord,
    pub models: Vec<ModelRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub label: String,
    pub n: usize,
    pub risk: f64,
    pub risk_is_rmst: bool,
    pub rule: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratificationRecord {
    pub model_id: String,
    pub source: stratify::Source,
    pub n_groups: usize,
    pub initial_groups: usize,
    pub fidelity: f64,
    pub groups: Vec<GroupRecord>,
    pub internal_cindex: f64,
    pub external_ci: Option<ConfidenceInterval>,
    pub warnings: Vec<String>,
    pub flowchart: String,
    pub km: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveDocument {
    pub version: String,
    pub seed: u64,
    pub config_sha256: String,
    pub elementary: Elementary,
    pub covariates: Vec<String>,
    pub n_internal: usize,
    pub n_external: Option<usize>,
    pub dropped_rows: usize,
    pub repetitions: Vec<RepetitionRecord>,
    /// Ids of models surviving pre-selection and constraints.
    pub selected: Vec<String>,
    pub stratifications: Vec<StratificationRecord>,
    pub importance: Option<ImportanceReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    pub config_sha256: String,
    pub files: Vec<String>,
}

fn model_id(rep: usize, index: Option<usize>) -> String {
    match index {
        Some(i) => format!("r{rep:02}_m{i:02}"),
        None => format!("r{rep:02}_baseline"),
    }
}

fn record(id: String, m: &CandidateModel, schema: &FeatureSchema, preselected: bool) -> ModelRecord {
    ModelRecord {
        id,
        repetition_id: m.repetition_id,
        expressions: m.feature_set.render(schema),
        objectives: m.objectives,
        internal_ci: m.internal_ci,
        external_ci: m.external_ci,
        preselected,
        fitted: FittedParams::from(&m.fitted),
    }
}

/// Output directory writer that remembers every file it produced.
struct Writer {
    root: PathBuf,
    files: Vec<String>,
}

impl Writer {
    fn new(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let _ = fs::remove_file(root.join("FAILED"));
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, rel: &str, contents: &str) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        self.files.push(rel.to_string());
        Ok(())
    }
}

/// Summary of a completed run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub archive: ArchiveDocument,
    pub results: Vec<RunResult>,
    pub selected: Vec<CandidateModel>,
    pub out_dir: PathBuf,
}

/// Run the full pipeline and write every artifact below `out_dir`. On
/// failure a `FAILED` marker holding the stage-tagged error is written.
pub fn run_pipeline(config: &PipelineConfig, out_dir: &Path) -> Result<RunSummary> {
    let outcome = config.install(|| run_stages(config, out_dir)).and_then(|r| r);
    if let Err(e) = &outcome {
        let _ = fs::create_dir_all(out_dir);
        let _ = fs::write(out_dir.join("FAILED"), format!("{e}\n"));
    }
    outcome
}

fn run_stages(config: &PipelineConfig, out_dir: &Path) -> Result<RunSummary> {
    config.validate().map_err(|e| e.in_stage("config"))?;
    let data = load_datasets(config).map_err(|e| e.in_stage("load"))?;
    let schema = &config.schema;
    let selection_config = config.selection();
    let mut writer = Writer::new(out_dir)?;

    let mut results = selection::run_repetitions(&data.internal, config.elementary, &selection_config, config.seed)
        .map_err(|e| e.in_stage("search"))?;

    let preselected = selection::preselect(&results);
    let mut selected = selection::apply_constraints(preselected.clone(), &config.constraints, schema);
    if let Some(ext) = &data.external {
        let external_ci = |m: &CandidateModel, k: u64| {
            let seed = rng::derive_seed(config.seed, &[STREAM_EXTERNAL, m.repetition_id as u64, k]);
            selection::external_validate(m, ext, config.bootstrap_n, seed).map_err(|e| e.in_stage("external validation"))
        };
        for r in &mut results {
            r.baseline.external_ci = Some(external_ci(&r.baseline, 0)?);
            for (i, m) in r.candidates.iter_mut().enumerate() {
                m.external_ci = Some(external_ci(m, i as u64 + 1)?);
            }
        }
        for m in &mut selected {
            let run = &results[m.repetition_id];
            let i = run
                .candidates
                .iter()
                .position(|c| c.feature_set == m.feature_set)
                .expect("selected models come from their repetition");
            m.external_ci = run.candidates[i].external_ci;
        }
    }

    let mut repetitions = Vec::new();
    let mut selected_ids = Vec::new();
    for r in &results {
        let models = r
            .candidates
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let kept = selected.iter().any(|s| s.repetition_id == r.repetition_id && s.feature_set == m.feature_set);
                if kept {
                    selected_ids.push(model_id(r.repetition_id, Some(i)));
                }
                let pre = preselected
                    .iter()
                    .any(|s| s.repetition_id == r.repetition_id && s.feature_set == m.feature_set);
                record(model_id(r.repetition_id, Some(i)), m, schema, pre)
            })
            .collect();
        repetitions.push(RepetitionRecord {
            repetition_id: r.repetition_id,
            seed: r.seed,
            n_train: r.train_indices.len(),
            n_validation: r.validation_indices.len(),
            hypervolume: r.history.iter().map(|g| g.hypervolume).collect(),
            baseline: record(model_id(r.repetition_id, None), &r.baseline, schema, false),
            models,
        });
    }

    let mut stratifications = Vec::new();
    for (id, m) in selected_ids.iter().zip(&selected) {
        let seed = rng::derive_seed(config.seed, &[STREAM_STRATIFY, stratifications.len() as u64]);
        let (strat, rec) = stratify_model(&m.fitted, &m.feature_set, &data.internal, data.external.as_ref(), config.bootstrap_n, seed)
            .map_err(|e| e.in_stage("stratification"))?;
        let rec = write_stratification(&mut writer, id, &strat, rec, data.external.as_ref(), schema)?;
        stratifications.push(rec);
    }

    let importance = if selected.is_empty() {
        None
    } else {
        let report = insights::feature_importance(&selected, schema).map_err(|e| e.in_stage("insights"))?;
        writer.write("importance.csv", &importance_csv(&report))?;
        writer.write("subexpressions.csv", &subexpression_csv(&report))?;
        writer.write("importance.svg", &importance_svg(&report))?;
        Some(report)
    };

    let archive = ArchiveDocument {
        version: VERSION.to_string(),
        seed: config.seed,
        config_sha256: config.hash(),
        elementary: config.elementary,
        covariates: schema.names().map(str::to_string).collect(),
        n_internal: data.internal.len(),
        n_external: data.external.as_ref().map(SurvivalDataset::len),
        dropped_rows: data.dropped_rows,
        repetitions,
        selected: selected_ids,
        stratifications,
        importance,
    };
    writer.write("archive.json", &to_json(&archive)?)?;
    let mut files = writer.files.clone();
    files.sort();
    let manifest = Manifest {
        version: VERSION.to_string(),
        seed: config.seed,
        config_sha256: config.hash(),
        files,
    };
    writer.write("manifest.json", &to_json(&manifest)?)?;
    Ok(RunSummary {
        archive,
        results,
        selected,
        out_dir: out_dir.to_path_buf(),
    })
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// Stratify a fitted model on the internal set and score the resulting
/// static group risks on both cohorts.
pub fn stratify_model(
    model: &FittedModel,
    fs: &FeatureSet,
    internal: &SurvivalDataset,
    external: Option<&SurvivalDataset>,
    bootstrap_n: usize,
    seed: u64,
) -> Result<(StratificationModel, StratificationRecord)> {
    let strat = stratify::stratify(model, fs, internal, &StratifyConfig::default())?;
    let rec = stratification_record(&strat, internal, external, bootstrap_n, seed)?;
    Ok((strat, rec))
}

pub fn stratification_record(
    strat: &StratificationModel,
    internal: &SurvivalDataset,
    external: Option<&SurvivalDataset>,
    bootstrap_n: usize,
    seed: u64,
) -> Result<StratificationRecord> {
    let internal_cindex = match stratify::stratification_cindex(strat, internal) {
        Ok(c) => c,
        Err(Error::NoComparablePairs) => 0.5,
        Err(e) => return Err(e),
    };
    let external_ci = match external {
        Some(ext) => {
            let risks = strat.risk_scores(ext)?;
            Some(selection::bootstrap_cindex(&risks, ext.times(), ext.events(), bootstrap_n, seed)?)
        }
        None => None,
    };
    Ok(StratificationRecord {
        model_id: String::new(),
        source: strat.source,
        n_groups: strat.groups.len(),
        initial_groups: strat.initial_groups,
        fidelity: strat.fidelity,
        groups: strat
            .groups
            .iter()
            .map(|g| GroupRecord {
                label: g.label.clone(),
                n: g.members.len(),
                risk: g.risk,
                risk_is_rmst: g.risk_is_rmst,
                rule: g.rule.render(&strat.feature_names),
            })
            .collect(),
        internal_cindex,
        external_ci,
        warnings: strat.warnings.clone(),
        flowchart: String::new(),
        km: Vec::new(),
    })
}

fn write_stratification(
    writer: &mut Writer,
    id: &str,
    strat: &StratificationModel,
    mut rec: StratificationRecord,
    external: Option<&SurvivalDataset>,
    schema: &FeatureSchema,
) -> Result<StratificationRecord> {
    rec.model_id = id.to_string();
    rec.flowchart = format!("flowcharts/{id}.dot");
    writer.write(&rec.flowchart, &flowchart_dot(strat, &schema.time_unit))?;
    let internal_curves: Vec<(String, SurvivalCurve)> =
        strat.groups.iter().map(|g| (g.label.clone(), g.curve.clone())).collect();
    let path = format!("km/{id}_internal.csv");
    writer.write(&path, &km_csv(&internal_curves))?;
    rec.km.push(path);
    let external_curves = match external {
        Some(ext) => {
            let curves = group_curves(strat, ext)?;
            let path = format!("km/{id}_external.csv");
            writer.write(&path, &km_csv(&curves))?;
            rec.km.push(path);
            Some(curves)
        }
        None => None,
    };
    let path = format!("km/{id}.svg");
    writer.write(&path, &km_svg(&internal_curves, external_curves.as_deref(), &schema.time_unit))?;
    rec.km.push(path);
    Ok(rec)
}

/// KM curve per group of the rows of `ds` assigned by the flowchart; groups
/// receiving no rows are omitted.
pub fn group_curves(strat: &StratificationModel, ds: &SurvivalDataset) -> Result<Vec<(String, SurvivalCurve)>> {
    let assigned = strat.assign(ds)?;
    let mut out = Vec::new();
    for (g, group) in strat.groups.iter().enumerate() {
        let idx: Vec<usize> = (0..ds.len()).filter(|&i| assigned[i] == g).collect();
        if idx.is_empty() {
            continue;
        }
        let t: Vec<f64> = idx.iter().map(|&i| ds.times()[i]).collect();
        let e: Vec<bool> = idx.iter().map(|&i| ds.events()[i]).collect();
        out.push((group.label.clone(), stats::kaplan_meier(&t, &e)?));
    }
    Ok(out)
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

fn format_risk(v: f64) -> String {
    format!("{:.1}", v)
}

pub fn leaf_label(group: &stratify::PatientGroup, unit: &str) -> String {
    let what = if group.risk_is_rmst { "restricted mean" } else { "median" };
    let unit = if unit.is_empty() { String::new() } else { format!(" {unit}") };
    format!(
        "Group {} — {what} {}{unit}, n={}",
        group.label,
        format_risk(group.risk),
        group.members.len()
    )
}

/// Graphviz rendering of the stratification flowchart, nodes in pre-order.
pub fn flowchart_dot(strat: &StratificationModel, unit: &str) -> String {
    let mut s = String::from("digraph flowchart {\n  node [fontname=\"Helvetica\"];\n");
    for (k, node) in strat.flowchart.nodes.iter().enumerate() {
        match node {
            FlowNode::Decision {
                feature,
                threshold,
                left,
                right,
            } => {
                let text = format!("{} <= {}", strat.feature_names[*feature], threshold);
                let _ = writeln!(s, "  n{k} [shape=box, label=\"{}\"];", dot_escape(&text));
                let _ = writeln!(s, "  n{k} -> n{left} [label=\"yes\"];");
                let _ = writeln!(s, "  n{k} -> n{right} [label=\"no\"];");
            }
            FlowNode::Leaf { group } => {
                let text = leaf_label(&strat.groups[*group], unit);
                let _ = writeln!(s, "  n{k} [shape=ellipse, label=\"{}\"];", dot_escape(&text));
            }
        }
    }
    s.push_str("}\n");
    s
}

/// Step-function rows per group: a leading `(0, 1)` row, one row per event
/// time, and a closing row at the last follow-up time when it lies beyond
/// the last event.
pub fn km_csv(curves: &[(String, SurvivalCurve)]) -> String {
    let mut s = String::from("group_label,time,survival,ci_lower,ci_upper,n_at_risk\n");
    for (label, c) in curves {
        let _ = writeln!(s, "{label},0,1,1,1,{}", c.n);
        for k in 0..c.times.len() {
            let _ = writeln!(
                s,
                "{label},{},{},{},{},{}",
                c.times[k], c.survival[k], c.ci_lower[k], c.ci_upper[k], c.at_risk[k]
            );
        }
        if c.times.last().is_none_or(|&t| c.max_time > t) {
            let k = c.times.len();
            let (surv, lo, hi) = if k == 0 {
                (1.0, 1.0, 1.0)
            } else {
                (c.survival[k - 1], c.ci_lower[k - 1], c.ci_upper[k - 1])
            };
            let _ = writeln!(s, "{label},{},{surv},{lo},{hi},{}", c.max_time, c.at_risk_end);
        }
    }
    s
}

const PALETTE: [&str; 8] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666"];

fn step_path(c: &SurvivalCurve, sx: &dyn Fn(f64) -> f64, sy: &dyn Fn(f64) -> f64) -> String {
    let mut d = format!("M{:.2},{:.2}", sx(0.0), sy(1.0));
    for (&t, &s) in c.times.iter().zip(&c.survival) {
        let _ = write!(d, " H{:.2} V{:.2}", sx(t), sy(s));
    }
    let _ = write!(d, " H{:.2}", sx(c.max_time));
    d
}

/// Kaplan–Meier step plot: internal curves dashed, external curves solid.
pub fn km_svg(internal: &[(String, SurvivalCurve)], external: Option<&[(String, SurvivalCurve)]>, unit: &str) -> String {
    let (w, h, left, right, top, bottom) = (640.0, 400.0, 60.0, 110.0, 20.0, 50.0);
    let t_max = internal
        .iter()
        .chain(external.unwrap_or(&[]))
        .map(|(_, c)| c.max_time)
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let sx = move |t: f64| left + (w - left - right) * t / t_max;
    let sy = move |s: f64| top + (h - top - bottom) * (1.0 - s);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = writeln!(
        svg,
        "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n<path d=\"M{left},{top} V{} H{}\" fill=\"none\" stroke=\"black\"/>",
        h - bottom,
        w - right
    );
    for k in 0..=4 {
        let s = k as f64 / 4.0;
        let _ = writeln!(svg, "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{s:.2}</text>", left - 6.0, sy(s) + 4.0);
        let t = t_max * k as f64 / 4.0;
        let _ = writeln!(svg, "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{t:.0}</text>", sx(t), h - bottom + 18.0);
    }
    let xlabel = if unit.is_empty() { "time".to_string() } else { format!("time ({unit})") };
    let _ = writeln!(svg, "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{xlabel}</text>", (left + w - right) / 2.0, h - 10.0);
    let _ = writeln!(svg, "<text x=\"15\" y=\"{:.2}\" transform=\"rotate(-90 15 {:.2})\" text-anchor=\"middle\">survival</text>", (top + h - bottom) / 2.0, (top + h - bottom) / 2.0);
    let colour = |label: &str| {
        let k = internal.iter().position(|(l, _)| l == label).unwrap_or(0);
        PALETTE[k % PALETTE.len()]
    };
    for (label, c) in internal {
        let _ = writeln!(svg, "<path d=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" stroke-dasharray=\"6 4\"/>", step_path(c, &sx, &sy), colour(label));
    }
    for (label, c) in external.unwrap_or(&[]) {
        let _ = writeln!(svg, "<path d=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"/>", step_path(c, &sx, &sy), colour(label));
    }
    for (k, (label, _)) in internal.iter().enumerate() {
        let y = top + 10.0 + 18.0 * k as f64;
        let _ = writeln!(
            svg,
            "<line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"{}\" stroke-width=\"3\"/><text x=\"{:.2}\" y=\"{:.2}\">Group {label}</text>",
            w - right + 10.0,
            w - right + 30.0,
            colour(label),
            w - right + 35.0,
            y + 4.0
        );
    }
    if external.is_some() {
        let y = top + 10.0 + 18.0 * internal.len() as f64 + 10.0;
        let _ = writeln!(svg, "<text x=\"{:.2}\" y=\"{y:.2}\">dashed: internal</text>", w - right + 10.0);
        let _ = writeln!(svg, "<text x=\"{:.2}\" y=\"{:.2}\">solid: external</text>", w - right + 10.0, y + 16.0);
    }
    svg.push_str("</svg>\n");
    svg
}

fn importance_csv(report: &ImportanceReport) -> String {
    let mut s = String::from("covariate,models,fraction\n");
    for c in &report.covariates {
        let _ = writeln!(s, "{},{},{}", c.name, c.models, c.fraction);
    }
    s
}

fn csv_quote(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

fn subexpression_csv(report: &ImportanceReport) -> String {
    let mut s = String::from("expression,count\n");
    for e in &report.subexpressions {
        let _ = writeln!(s, "{},{}", csv_quote(&e.expression), e.count);
    }
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Horizontal bar chart of covariate importance.
fn importance_svg(report: &ImportanceReport) -> String {
    let row = 22.0;
    let (w, left) = (520.0, 140.0);
    let h = 30.0 + row * report.covariates.len() as f64;
    let bar = w - left - 60.0;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    );
    for (k, c) in report.covariates.iter().enumerate() {
        let y = 15.0 + row * k as f64;
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text><rect x=\"{left}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#4c72b0\"/><text x=\"{:.2}\" y=\"{:.2}\">{:.2}</text>",
            left - 6.0,
            y + 13.0,
            xml_escape(&c.name),
            bar * c.fraction,
            row - 6.0,
            left + bar * c.fraction + 4.0,
            y + 13.0,
            c.fraction
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureReport {
    pub expressions: Vec<String>,
    pub elementary: Elementary,
    pub fitted: FittedParams,
    /// Model C-index on the internal set it was fitted on.
    pub internal_cindex: f64,
    pub external_model_ci: Option<ConfidenceInterval>,
    pub stratification: StratificationRecord,
}

/// Fit the elementary model on the full internal set using the given
/// expressions, stratify, and report C-indices with bootstrap intervals.
pub fn evaluate_fixture(
    expressions: &[impl AsRef<str>],
    elementary: Elementary,
    params: &ElementaryParams,
    internal: &SurvivalDataset,
    external: Option<&SurvivalDataset>,
    bootstrap_n: usize,
    seed: u64,
) -> Result<(FixtureReport, StratificationModel)> {
    let fs = FeatureSet::parse(expressions, internal.schema())?;
    let features = fs.transform(internal.rows().view())?;
    let model = FittedModel::fit(elementary, params, features.view(), internal.times(), internal.events())?;
    let internal_cindex = stats::concordance_index(&model.risk(features.view())?, internal.times(), internal.events())?;
    let external_model_ci = match external {
        Some(ext) => {
            let risks = model.risk(fs.transform(ext.rows().view())?.view())?;
            Some(selection::bootstrap_cindex(
                &risks,
                ext.times(),
                ext.events(),
                bootstrap_n,
                rng::derive_seed(seed, &[STREAM_EXTERNAL]),
            )?)
        }
        None => None,
    };
    let (strat, record) = stratify_model(
        &model,
        &fs,
        internal,
        external,
        bootstrap_n,
        rng::derive_seed(seed, &[STREAM_STRATIFY]),
    )?;
    Ok((
        FixtureReport {
            expressions: fs.render(internal.schema()),
            elementary,
            fitted: FittedParams::from(&model),
            internal_cindex,
            external_model_ci,
            stratification: record,
        },
        strat,
    ))
}

/// Write the flowchart and KM artifacts of a single stratification.
pub fn export_stratification(
    out_dir: &Path,
    id: &str,
    strat: &StratificationModel,
    record: StratificationRecord,
    internal: &SurvivalDataset,
    external: Option<&SurvivalDataset>,
) -> Result<StratificationRecord> {
    let mut writer = Writer::new(out_dir)?;
    write_stratification(&mut writer, id, strat, record, external, internal.schema())
}
