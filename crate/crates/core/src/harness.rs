//! Experiment orchestration: one TOML config drives dataset generation,
//! training, the nine-method unlearning grid plus the retrain oracle,
//! A1/A2/A3 evaluation with image dumps, leakage attacks, report
//! aggregation, and the lambda / module-ablation sweep. Stages
//! communicate only through on-disk artifacts under the output directory.

use crate::autodiff::{ParamError, Partition};
use crate::img::write_ppm;
use crate::leakage::{run_leakage_test, AttackSpec, LeakageError, Verdict, DEFAULT_TAU};
use crate::metrics::{evaluate_a1a2a3, grid_populations, MetricError, MetricReport};
use crate::model::{
    reconstruct, synthesize, train, GeneratorModel, ModelError, Task, TrainConfig,
};
use crate::scene_graph::roi_of;
use crate::synth::{
    generate_dataset, is_person_like, load_dataset, save_dataset, Dataset, DatasetConfig,
    SynthError,
};
use crate::unlearn::{
    apply_redaction, influence_delta, retrain_exact, run_method, select_removal, CgDiagnostics,
    MethodConfig, MethodId, RemovalSet, Scope, UnlearnError, UnlearnRequest,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("missing artifact {0:?}; run the earlier pipeline stage first")]
    MissingArtifact(PathBuf),
    #[error("config error: {0}")]
    Config(String),
    #[error("{0} sweep grid points failed")]
    SweepFailures(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Unlearn(#[from] UnlearnError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Leakage(#[from] LeakageError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Graph(#[from] crate::scene_graph::GraphError),
}

/// Caps the global thread pool from SGUNLEARN_THREADS when set. Must run
/// before any parallel work; later calls are no-ops.
pub fn configure_threads() {
    if let Ok(v) = std::env::var("SGUNLEARN_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

// ---- configuration ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestSection {
    /// Object ids, or the single entry "@auto" to pick the default target
    /// deterministically after generation.
    pub object_ids: Vec<String>,
    pub scope: Scope,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodsSection {
    pub list: Vec<String>,
    #[serde(default)]
    pub include_retrain: bool,
}

impl Default for MethodsSection {
    fn default() -> Self {
        MethodsSection {
            list: MethodId::ALL.iter().map(|m| m.name().to_string()).collect(),
            include_retrain: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSection {
    pub tasks: Vec<Task>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            tasks: vec![Task::Reconstruction, Task::Synthesis],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSection {
    pub methods: Vec<String>,
    pub tau: f64,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            methods: vec!["Obj-MK-PA".into(), "Obj-MK-NS".into()],
            tau: DEFAULT_TAU,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SweepSection {
    #[serde(default)]
    pub lambda_grid: Vec<f64>,
    /// Partition-name sets, e.g. [["grl"], ["encoder","grl","layout","decoder"]].
    #[serde(default)]
    pub partition_sets: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputSection {
    pub dir: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub request: RequestSection,
    #[serde(default)]
    pub methods: MethodsSection,
    #[serde(default)]
    pub method_cfg: MethodConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub sweep: SweepSection,
    pub output: OutputSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(&path)
            .map_err(|_| HarnessError::MissingArtifact(path.as_ref().to_path_buf()))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialization cannot fail")
    }

    /// Stable hash of the experiment configuration. The output directory
    /// is excluded: where a run lives does not change what it computes.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output.dir = String::new();
        sha256_hex(canonical.to_toml().as_bytes())
    }

    pub fn method_ids(&self) -> Result<Vec<MethodId>, HarnessError> {
        self.methods
            .list
            .iter()
            .map(|name| {
                MethodId::parse(name)
                    .ok_or_else(|| HarnessError::Config(format!("unknown method {name:?}")))
            })
            .collect()
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.output.dir)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

// ---- artifact layout ----

pub struct Paths {
    pub root: PathBuf,
}

impl Paths {
    pub fn new<P: AsRef<Path>>(root: P) -> Self {
        Paths {
            root: root.as_ref().to_path_buf(),
        }
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn models(&self) -> PathBuf {
        self.root.join("models")
    }
    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }
    pub fn runs(&self) -> PathBuf {
        self.root.join("runs")
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn images(&self) -> PathBuf {
        self.root.join("images")
    }
    pub fn checkpoint(&self, method: &str) -> PathBuf {
        self.models().join(format!("{method}.ckpt"))
    }
    pub fn run_record(&self, method: &str) -> PathBuf {
        self.runs().join(format!("{method}.json"))
    }
}

fn require(path: PathBuf) -> Result<PathBuf, HarnessError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(HarnessError::MissingArtifact(path))
    }
}

/// Run record written next to every produced checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub scope: Scope,
    pub removal: RemovalSet,
    pub config_hash: String,
    pub wall_ms: u64,
    pub cg: Option<CgDiagnostics>,
    pub checkpoint: String,
}

fn write_json<T: Serialize, P: AsRef<Path>>(path: P, value: &T) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

// ---- request resolution ----

/// Deterministic default unlearning target: the first person-like object
/// (by sample then node order) whose category has a generalization entry
/// and appears in at least one other training sample.
pub fn pick_default_target(dataset: &Dataset) -> Option<String> {
    let count_of = |cat: &str| dataset.train_objects_of_category(cat).len();
    let mut fallback = None;
    for si in dataset.train_indices() {
        for node in dataset.samples[si].graph.non_pad_nodes() {
            if !is_person_like(&node.category) {
                continue;
            }
            if fallback.is_none() {
                fallback = Some(node.id.clone());
            }
            let generalizable = dataset
                .vocab
                .generalization_map
                .contains_key(&node.category);
            if generalizable && count_of(&node.category) >= 2 {
                return Some(node.id.clone());
            }
        }
    }
    fallback
}

/// Resolves "@auto" and checks every id exists in the training split.
pub fn resolve_request(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
) -> Result<UnlearnRequest, HarnessError> {
    let ids: Vec<String> = if cfg.request.object_ids == ["@auto"] {
        vec![pick_default_target(dataset).ok_or_else(|| {
            HarnessError::Config("dataset has no person-like object to target".into())
        })?]
    } else {
        cfg.request.object_ids.clone()
    };
    for id in &ids {
        if dataset
            .find_object(id)
            .filter(|(si, _)| *si < dataset.train_count)
            .is_none()
        {
            return Err(HarnessError::Config(format!(
                "requested object {id:?} does not exist in the training split"
            )));
        }
    }
    Ok(UnlearnRequest::new(ids, cfg.request.scope))
}

// ---- commands ----

/// gen-data: writes the dataset artifacts and returns the manifest hash.
pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<String, HarnessError> {
    let dataset = generate_dataset(&cfg.dataset)?;
    let paths = Paths::new(cfg.out_dir());
    save_dataset(&dataset, paths.data())?;
    let bytes = std::fs::read(paths.data().join("manifest.json"))?;
    Ok(sha256_hex(&bytes))
}

fn load_data(paths: &Paths) -> Result<Dataset, HarnessError> {
    require(paths.data().join("manifest.json"))?;
    Ok(load_dataset(paths.data())?)
}

fn load_model(paths: &Paths, name: &str, dataset: &Dataset) -> Result<GeneratorModel, HarnessError> {
    let path = require(paths.checkpoint(name))?;
    Ok(GeneratorModel::load(
        path,
        dataset.image_size(),
        &dataset.vocab,
    )?)
}

/// train: trains the original model and writes checkpoint, log, and run
/// record.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<(), HarnessError> {
    let paths = Paths::new(cfg.out_dir());
    let dataset = load_data(&paths)?;
    std::fs::create_dir_all(paths.models())?;
    std::fs::create_dir_all(paths.logs())?;
    std::fs::create_dir_all(paths.runs())?;

    let t0 = std::time::Instant::now();
    let (model, log) = train(&dataset, &cfg.train)?;
    let wall_ms = t0.elapsed().as_millis() as u64;
    model.save(paths.checkpoint("original"))?;
    std::fs::write(paths.logs().join("train.csv"), log.to_csv())?;
    write_json(
        paths.run_record("train"),
        &RunRecord {
            method: "Train".into(),
            scope: Scope::Object,
            removal: RemovalSet {
                scope: Scope::Object,
                sample_indices: Default::default(),
                categories: Default::default(),
                object_ids: Default::default(),
            },
            config_hash: cfg.hash(),
            wall_ms,
            cg: None,
            checkpoint: "models/original.ckpt".into(),
        },
    )?;
    Ok(())
}

/// unlearn: runs the requested methods (each at the scope it forces) plus
/// the retrain oracle, writing one checkpoint and run record per method.
pub fn cmd_unlearn(
    cfg: &ExperimentConfig,
    method_filter: Option<&[String]>,
) -> Result<Vec<RunRecord>, HarnessError> {
    let paths = Paths::new(cfg.out_dir());
    let dataset = load_data(&paths)?;
    let original = load_model(&paths, "original", &dataset)?;
    let request = resolve_request(cfg, &dataset)?;
    std::fs::create_dir_all(paths.models())?;
    std::fs::create_dir_all(paths.logs())?;
    std::fs::create_dir_all(paths.runs())?;

    let selected: Vec<MethodId> = cfg
        .method_ids()?
        .into_iter()
        .filter(|m| {
            method_filter
                .map(|f| f.iter().any(|n| n == m.name()))
                .unwrap_or(true)
        })
        .collect();

    let config_hash = cfg.hash();
    let mut records = Vec::new();
    for method in selected {
        let scoped = request.with_scope(method.scope());
        let run = run_method(method, &original, &dataset, &scoped, &cfg.method_cfg, &cfg.train)?;
        let ckpt_rel = format!("models/{}.ckpt", method.name());
        run.model.save(paths.checkpoint(method.name()))?;
        if let Some(log) = &run.log {
            let csv = if matches!(
                method,
                MethodId::SampleNg | MethodId::FeatNg | MethodId::ObjNg
            ) {
                log.to_csv_with_components()
            } else {
                log.to_csv()
            };
            std::fs::write(paths.logs().join(format!("{}.csv", method.name())), csv)?;
        }
        let record = RunRecord {
            method: method.name().into(),
            scope: method.scope(),
            removal: run.removal.clone(),
            config_hash: config_hash.clone(),
            wall_ms: run.wall_ms,
            cg: run.cg,
            checkpoint: ckpt_rel,
        };
        write_json(paths.run_record(method.name()), &record)?;
        records.push(record);
    }

    let run_retrain = cfg.methods.include_retrain
        && method_filter
            .map(|f| f.iter().any(|n| n == "Retrain"))
            .unwrap_or(true);
    if run_retrain {
        let scoped = request.with_scope(Scope::Object);
        let removal = select_removal(&scoped, &dataset)?;
        let t0 = std::time::Instant::now();
        let (model, log) = retrain_exact(&dataset, &removal, &cfg.train)?;
        let wall_ms = t0.elapsed().as_millis() as u64;
        model.save(paths.checkpoint("Retrain"))?;
        std::fs::write(paths.logs().join("Retrain.csv"), log.to_csv())?;
        let record = RunRecord {
            method: "Retrain".into(),
            scope: Scope::Object,
            removal,
            config_hash: config_hash.clone(),
            wall_ms,
            cg: None,
            checkpoint: "models/Retrain.ckpt".into(),
        };
        write_json(paths.run_record("Retrain"), &record)?;
        records.push(record);
    }
    Ok(records)
}

fn evaluated_methods(
    cfg: &ExperimentConfig,
    paths: &Paths,
    method_filter: Option<&[String]>,
) -> Result<Vec<String>, HarnessError> {
    // "Original" is the identity control row.
    let mut names: Vec<String> = vec!["Original".into()];
    for m in cfg.method_ids()? {
        names.push(m.name().to_string());
    }
    if cfg.methods.include_retrain {
        names.push("Retrain".into());
    }
    if let Some(filter) = method_filter {
        names.retain(|n| n == "Original" || filter.iter().any(|f| f == n));
    }
    names.retain(|n| n == "Original" || paths.checkpoint(n).exists());
    Ok(names)
}

/// evaluate: metric grid per (method, task) with the original model as
/// reference, plus annotated image dumps and per-object latent exports.
pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    method_filter: Option<&[String]>,
) -> Result<Vec<MetricReport>, HarnessError> {
    let paths = Paths::new(cfg.out_dir());
    let dataset = load_data(&paths)?;
    let original = load_model(&paths, "original", &dataset)?;
    let request = resolve_request(cfg, &dataset)?.with_scope(Scope::Object);
    let train_indices: Vec<usize> = dataset.train_indices().collect();
    std::fs::create_dir_all(paths.reports())?;
    std::fs::create_dir_all(paths.images())?;

    let names = evaluated_methods(cfg, &paths, method_filter)?;
    let mut rows = Vec::new();
    let mut csv = String::from(MetricReport::csv_header());
    csv.push('\n');

    for name in &names {
        let model = if name == "Original" {
            original.clone()
        } else {
            load_model(&paths, name, &dataset)?
        };
        for task in &cfg.eval.tasks {
            let report = evaluate_a1a2a3(
                &original,
                &model,
                &dataset,
                &train_indices,
                &request,
                *task,
                name,
            )?;
            csv.push_str(&report.csv_row());
            csv.push('\n');
            dump_annotated_images(&paths, &dataset, &model, &request, *task, name)?;
            rows.push(report);
        }
        let latents = model.export_latents(&dataset)?;
        std::fs::write(
            paths.reports().join(format!("latents_{name}.csv")),
            latents,
        )?;
    }
    std::fs::write(paths.reports().join("metrics.csv"), csv)?;
    Ok(rows)
}

/// Writes generated images for the requested objects' home samples and up
/// to three other samples holding same-category objects. Requested ROIs
/// get a green box, same-category objects elsewhere a red box.
fn dump_annotated_images(
    paths: &Paths,
    dataset: &Dataset,
    model: &GeneratorModel,
    request: &UnlearnRequest,
    task: Task,
    method: &str,
) -> Result<(), HarnessError> {
    let train_indices: Vec<usize> = dataset.train_indices().collect();
    let (a1, _, a3) = grid_populations(dataset, &train_indices, request);
    let mut samples: Vec<usize> = a1.iter().map(|(si, _)| *si).collect();
    let mut others: Vec<usize> = a3.iter().map(|(si, _)| *si).collect();
    others.sort_unstable();
    others.dedup();
    samples.extend(others.into_iter().take(3));
    samples.sort_unstable();
    samples.dedup();

    let dir = paths.images().join(format!("{method}_{}", task.name()));
    std::fs::create_dir_all(&dir)?;
    for si in samples {
        let s = &dataset.samples[si];
        let mut img = match task {
            Task::Reconstruction => reconstruct(model, &s.image, &s.graph)?,
            Task::Synthesis => synthesize(model, &s.graph)?,
        };
        for node in s.graph.non_pad_nodes() {
            let rect = roi_of(node, img.width, img.height)?;
            if request.object_ids.contains(&node.id) {
                img.draw_rect_outline(&rect, [0, 255, 0]);
            } else if a3.iter().any(|(asi, ani)| {
                *asi == si && s.graph.nodes[*ani].id == node.id
            }) {
                img.draw_rect_outline(&rect, [255, 0, 0]);
            }
        }
        write_ppm(dir.join(format!("sample_{si:04}.ppm")), &img)?;
    }
    Ok(())
}

/// attack: the three query attacks against each selected unlearned model,
/// plus a no-unlearning control row using the original model.
pub fn cmd_attack(
    cfg: &ExperimentConfig,
    method_filter: Option<&[String]>,
) -> Result<BTreeMap<String, Verdict>, HarnessError> {
    let paths = Paths::new(cfg.out_dir());
    let dataset = load_data(&paths)?;
    let original = load_model(&paths, "original", &dataset)?;
    let request = resolve_request(cfg, &dataset)?.with_scope(Scope::Object);
    std::fs::create_dir_all(paths.reports())?;
    std::fs::create_dir_all(paths.images())?;

    let specs: Vec<AttackSpec> = request
        .object_ids
        .iter()
        .flat_map(|id| AttackSpec::standard_three(id, &dataset.vocab))
        .collect();

    let mut targets: Vec<String> = cfg.attack.methods.clone();
    if let Some(filter) = method_filter {
        targets.retain(|n| filter.iter().any(|f| f == n));
    }

    let mut verdicts = BTreeMap::new();
    // Control: the original model attacked as if it were unlearned.
    let mut jobs: Vec<(String, GeneratorModel)> = vec![("control".into(), original.clone())];
    for name in &targets {
        jobs.push((name.clone(), load_model(&paths, name, &dataset)?));
    }
    for (name, model) in jobs {
        let report = run_leakage_test(&model, &original, &dataset, &specs, cfg.attack.tau)?;
        std::fs::write(
            paths.reports().join(format!("leakage_{name}.csv")),
            report.to_csv(),
        )?;
        let dir = paths.images().join(format!("attacks_{name}"));
        std::fs::create_dir_all(&dir)?;
        for r in &report.results {
            if let Some(img) = &r.attacked_output_unl {
                write_ppm(
                    dir.join(format!("{}_{}.ppm", r.kind.name(), r.target_object_id)),
                    img,
                )?;
            }
        }
        verdicts.insert(name, report.verdict);
    }
    Ok(verdicts)
}

// ---- report ----

fn read_csv(path: &Path) -> Result<Vec<Vec<String>>, HarnessError> {
    let text =
        std::fs::read_to_string(path).map_err(|_| HarnessError::MissingArtifact(path.into()))?;
    Ok(text
        .lines()
        .map(|l| l.split(',').map(|s| s.to_string()).collect())
        .collect())
}

/// report: summary rows, the Table-4-style timing table grouped by method
/// class, and radar-ready complement values rescaled into [0, 1].
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<(), HarnessError> {
    let paths = Paths::new(cfg.out_dir());
    let metrics_path = paths.reports().join("metrics.csv");
    let rows = read_csv(&metrics_path)?;
    if rows.len() < 2 {
        return Err(HarnessError::MissingArtifact(metrics_path));
    }
    let header = &rows[0];
    let col = |name: &str| -> Result<usize, HarnessError> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| HarnessError::Config(format!("metrics.csv lacks column {name}")))
    };

    // summary.csv: mean per (method, task) over repeated rows.
    let mut groups: BTreeMap<(String, String), Vec<&Vec<String>>> = BTreeMap::new();
    for row in &rows[1..] {
        groups
            .entry((row[0].clone(), row[1].clone()))
            .or_default()
            .push(row);
    }
    let numeric_cols = 2..header.len();
    let mut summary = String::from(&header.join(","));
    summary.push('\n');
    for ((method, task), group) in &groups {
        let mut fields = vec![method.clone(), task.clone()];
        for c in numeric_cols.clone() {
            let vals: Vec<f64> = group
                .iter()
                .filter_map(|r| r[c].parse::<f64>().ok())
                .collect();
            if vals.is_empty() {
                fields.push(String::new());
            } else {
                fields.push(format!("{}", vals.iter().sum::<f64>() / vals.len() as f64));
            }
        }
        summary.push_str(&fields.join(","));
        summary.push('\n');
    }
    std::fs::write(paths.reports().join("summary.csv"), summary)?;

    // timing.csv from the run records.
    let mut class_times: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
    if paths.runs().exists() {
        for entry in std::fs::read_dir(paths.runs())? {
            let path = entry?.path();
            if path.extension().map(|e| e == "json") != Some(true) {
                continue;
            }
            let record: RunRecord = serde_json::from_str(&std::fs::read_to_string(&path)?)
                .map_err(|e| HarnessError::Config(format!("bad run record: {e}")))?;
            let class = if record.method == "Retrain" {
                "Retrain"
            } else if let Some(m) = MethodId::parse(&record.method) {
                m.class()
            } else {
                continue; // the original training run
            };
            class_times.entry(class).or_default().push(record.wall_ms as f64);
        }
    }
    let mut timing = String::from("class,mean_ms,std_ms,n\n");
    for class in ["Redaction", "Fine-tune", "Retrain"] {
        let Some(times) = class_times.get(class) else {
            continue;
        };
        let n = times.len() as f64;
        let mean = times.iter().sum::<f64>() / n;
        let std = if times.len() > 1 {
            let var = times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (n - 1.0);
            format!("{}", var.sqrt())
        } else {
            String::new()
        };
        timing.push_str(&format!("{class},{mean},{std},{}\n", times.len()));
    }
    std::fs::write(paths.reports().join("timing.csv"), timing)?;

    // radar.csv: all values up-is-better in [0, 1]; MAE rescaled by /255.
    let clamp01 = |v: f64| v.clamp(0.0, 1.0);
    let mut radar = String::from(
        "method,task,rA1_SSIM,rA1_LP,rA1_MAE,rA2_SSIM,rA2_LP,rA2_MAE,rA3_SSIM,rA3_LP,rA3_MAE\n",
    );
    let get = |row: &[String], name: &str| -> Result<f64, HarnessError> {
        Ok(row[col(name)?].parse::<f64>().unwrap_or(f64::NAN))
    };
    for row in &rows[1..] {
        let vals = [
            clamp01(1.0 - get(row, "A1_SSIM")?),
            clamp01(get(row, "A1_LP")?),
            clamp01(get(row, "A1_MAE")? / 255.0),
            clamp01(get(row, "A2_SSIM")?),
            clamp01(1.0 - get(row, "A2_LP")?),
            clamp01(1.0 - get(row, "A2_MAE")? / 255.0),
            clamp01(get(row, "A3_SSIM")?),
            clamp01(1.0 - get(row, "A3_LP")?),
            clamp01(1.0 - get(row, "A3_MAE")? / 255.0),
        ];
        radar.push_str(&format!(
            "{},{},{}\n",
            row[0],
            row[1],
            vals.map(|v| format!("{v}")).join(",")
        ));
    }
    std::fs::write(paths.reports().join("radar.csv"), radar)?;
    Ok(())
}

// ---- sweep ----

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub partitions: String,
    pub lambda: f64,
    pub theta_delta_norm: f64,
    pub cg: CgDiagnostics,
    pub report: Option<MetricReport>,
    pub error: Option<String>,
}

/// sweep: one CG solve per partition set, then one redaction + evaluation
/// per lambda grid point. Failed points are flagged and the sweep
/// continues; any failure still fails the command at the end.
pub fn cmd_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>, HarnessError> {
    let paths = Paths::new(cfg.out_dir());
    let dataset = load_data(&paths)?;
    let original = load_model(&paths, "original", &dataset)?;
    let request = resolve_request(cfg, &dataset)?.with_scope(Scope::Object);
    let removal = select_removal(&request, &dataset)?;
    let train_indices: Vec<usize> = dataset.train_indices().collect();
    std::fs::create_dir_all(paths.reports())?;

    if cfg.sweep.lambda_grid.is_empty() || cfg.sweep.partition_sets.is_empty() {
        std::fs::write(
            paths.reports().join("sweep.csv"),
            "partitions,lambda,theta_delta_norm,cg_iterations,cg_residual,cg_converged,A1_SSIM,A1_LP,A1_MAE,A2_SSIM,A2_LP,A2_MAE,A3_SSIM,A3_LP,A3_MAE,error\n",
        )?;
        return Ok(Vec::new());
    }

    let mut rows = Vec::new();
    let mut failures = 0;
    for set in &cfg.sweep.partition_sets {
        let partitions: Result<Vec<Partition>, HarnessError> = set
            .iter()
            .map(|name| {
                Partition::from_name(name)
                    .ok_or_else(|| HarnessError::Config(format!("unknown partition {name:?}")))
            })
            .collect();
        let partitions = partitions?;
        let label = set.join("+");
        let mcfg = MethodConfig {
            target_partitions: partitions,
            ..cfg.method_cfg.clone()
        };
        let delta = influence_delta(&original, &dataset, &removal, &mcfg);
        match delta {
            Err(e) => {
                failures += cfg.sweep.lambda_grid.len();
                for &lambda in &cfg.sweep.lambda_grid {
                    rows.push(SweepRow {
                        partitions: label.clone(),
                        lambda,
                        theta_delta_norm: f64::NAN,
                        cg: CgDiagnostics {
                            iterations: 0,
                            residual: f64::NAN,
                            converged: false,
                        },
                        report: None,
                        error: Some(e.to_string()),
                    });
                }
            }
            Ok((delta, diag)) => {
                let delta_norm: f64 = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
                for &lambda in &cfg.sweep.lambda_grid {
                    let redacted = apply_redaction(&original, &delta, lambda);
                    match evaluate_a1a2a3(
                        &original,
                        &redacted,
                        &dataset,
                        &train_indices,
                        &request,
                        Task::Reconstruction,
                        &format!("sweep_{label}_{lambda:e}"),
                    ) {
                        Ok(report) => rows.push(SweepRow {
                            partitions: label.clone(),
                            lambda,
                            theta_delta_norm: lambda * delta_norm,
                            cg: diag,
                            report: Some(report),
                            error: None,
                        }),
                        Err(e) => {
                            failures += 1;
                            rows.push(SweepRow {
                                partitions: label.clone(),
                                lambda,
                                theta_delta_norm: lambda * delta_norm,
                                cg: diag,
                                report: None,
                                error: Some(e.to_string()),
                            });
                        }
                    }
                }
            }
        }
    }

    let mut csv = String::from(
        "partitions,lambda,theta_delta_norm,cg_iterations,cg_residual,cg_converged,A1_SSIM,A1_LP,A1_MAE,A2_SSIM,A2_LP,A2_MAE,A3_SSIM,A3_LP,A3_MAE,error\n",
    );
    for row in &rows {
        let metric_fields = match &row.report {
            Some(r) => format!(
                "{},{},{},{},{},{},{},{},{}",
                r.a1.ssim, r.a1.lp, r.a1.mae, r.a2.ssim, r.a2.lp, r.a2.mae, r.a3.ssim, r.a3.lp,
                r.a3.mae
            ),
            None => ",,,,,,,,".into(),
        };
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            row.partitions,
            row.lambda,
            row.theta_delta_norm,
            row.cg.iterations,
            row.cg.residual,
            row.cg.converged,
            metric_fields,
            row.error.clone().unwrap_or_default()
        ));
    }
    std::fs::write(paths.reports().join("sweep.csv"), csv)?;

    if failures > 0 {
        return Err(HarnessError::SweepFailures(failures));
    }
    Ok(rows)
}

/// The full reference pipeline, in order. Returns the manifest hash.
pub fn run_full_pipeline(cfg: &ExperimentConfig) -> Result<String, HarnessError> {
    let hash = cmd_gen_data(cfg)?;
    cmd_train(cfg)?;
    cmd_unlearn(cfg, None)?;
    cmd_evaluate(cfg, None)?;
    cmd_attack(cfg, None)?;
    cmd_report(cfg)?;
    Ok(hash)
}

// ---- determinism helpers ----

/// Timing column names excluded from determinism comparisons.
const TIMING_COLUMNS: [&str; 4] = ["wall_ms", "mean_ms", "std_ms", "wall_s"];

fn canonical_csv(text: &str) -> String {
    let mut lines = text.lines();
    let Some(header) = lines.next() else {
        return String::new();
    };
    let cols: Vec<&str> = header.split(',').collect();
    let keep: Vec<usize> = cols
        .iter()
        .enumerate()
        .filter(|(_, c)| !TIMING_COLUMNS.contains(c))
        .map(|(i, _)| i)
        .collect();
    let mut out = String::new();
    let filter_line = |line: &str| -> String {
        let fields: Vec<&str> = line.split(',').collect();
        keep.iter()
            .filter_map(|&i| fields.get(i).copied())
            .collect::<Vec<_>>()
            .join(",")
    };
    out.push_str(&filter_line(header));
    out.push('\n');
    for line in lines {
        out.push_str(&filter_line(line));
        out.push('\n');
    }
    out
}

fn strip_timing_json(value: &mut serde_json::Value) {
    match value {
        serde_json::Value::Object(map) => {
            for key in TIMING_COLUMNS {
                map.remove(key);
            }
            for (_, v) in map.iter_mut() {
                strip_timing_json(v);
            }
        }
        serde_json::Value::Array(items) => {
            for v in items {
                strip_timing_json(v);
            }
        }
        _ => {}
    }
}

fn walk_files(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            walk_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Digest of every artifact under `dir`, with wall-time fields excluded
/// from CSV and JSON content. Two runs of the same config must produce
/// identical maps.
pub fn artifact_digests<P: AsRef<Path>>(dir: P) -> Result<BTreeMap<String, String>, HarnessError> {
    let root = dir.as_ref();
    let mut files = Vec::new();
    walk_files(root, &mut files)?;
    files.sort();
    let mut out = BTreeMap::new();
    for path in files {
        let rel = path
            .strip_prefix(root)
            .unwrap()
            .to_string_lossy()
            .replace('\\', "/");
        let bytes = std::fs::read(&path)?;
        let canonical: Vec<u8> = match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => canonical_csv(&String::from_utf8_lossy(&bytes)).into_bytes(),
            Some("json") => {
                let mut v: serde_json::Value = serde_json::from_slice(&bytes)
                    .map_err(|e| HarnessError::Config(format!("bad json {rel}: {e}")))?;
                strip_timing_json(&mut v);
                serde_json::to_vec(&v).unwrap()
            }
            _ => bytes,
        };
        out.insert(rel, sha256_hex(&canonical));
    }
    Ok(out)
}
