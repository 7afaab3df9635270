//! Library half of the `markerprompt` command suite.
//!
//! Every command writes its artifacts plus a `run_manifest.json` that
//! records the resolved configuration and content hashes of inputs and
//! outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use markerprompt_core::checkpoint;
use markerprompt_core::metrics::{self, MetricReport};
use markerprompt_core::scene::{self, is_validation_scene, DatasetManifest};
use markerprompt_core::trainer::{
    self, loss_csv, LossRow, Model, PreparedScene, TrainConfig, TrainState, Variant,
};
use markerprompt_core::{Error, Result, Scene, SceneConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const LOSS_FILE: &str = "loss.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const ABLATION_JSON: &str = "ablation.json";
pub const ABLATION_TABLE: &str = "ablation.txt";

/// Scene seeds of one generated dataset are `seed * SEED_STRIDE + i`.
pub const SEED_STRIDE: u64 = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

impl RunManifest {
    fn start(command: &str, config: impl Serialize) -> Self {
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: serde_json::to_value(config).expect("config serializes"),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            started_unix: unix_now(),
            finished_unix: 0,
        }
    }

    fn input(&mut self, name: &str, path: &Path) -> Result<()> {
        self.inputs.insert(name.to_string(), content_hash(path)?);
        Ok(())
    }

    fn output(&mut self, name: &str, path: &Path) -> Result<()> {
        self.outputs.insert(name.to_string(), content_hash(path)?);
        Ok(())
    }

    fn finish(mut self, path: &Path) -> Result<Self> {
        self.finished_unix = unix_now();
        write_json(path, &self)?;
        Ok(self)
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()));
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Git-style SHA-256 content hash. Files hash as blobs; directories hash
/// the sorted list of `relative-path blob-hash` lines of their files.
pub fn content_hash(path: &Path) -> Result<String> {
    if path.is_file() {
        return Ok(blob_hash(&fs::read(path).map_err(|e| io_err(path, e))?));
    }
    let mut files = Vec::new();
    collect_files(path, path, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    h.update(b"tree\0");
    for rel in files {
        let full = path.join(&rel);
        let bytes = fs::read(&full).map_err(|e| io_err(&full, e))?;
        h.update(format!(
            "{} {}\n",
            rel.replace('\\', "/"),
            blob_hash(&bytes)
        ));
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let p = entry.map_err(|e| io_err(dir, e))?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else if p.file_name().is_some_and(|n| n != RUN_MANIFEST) {
            out.push(
                p.strip_prefix(root)
                    .expect("walk stays under root")
                    .to_string_lossy()
                    .into_owned(),
            );
        }
    }
    Ok(())
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn invalid(record: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Validation {
        record: record.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    All,
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "all" => Ok(Split::All),
            _ => Err(format!("unknown split {s:?}; expected train, val or all")),
        }
    }
}

/// Scenes of `split`, using the every-fifth-scene validation rule.
pub fn select_split(scenes: &[Scene], split: Split) -> Vec<Scene> {
    scenes
        .iter()
        .enumerate()
        .filter(|(i, _)| match split {
            Split::Train => !is_validation_scene(*i),
            Split::Val => is_validation_scene(*i),
            Split::All => true,
        })
        .map(|(_, s)| s.clone())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenArgs {
    pub out: PathBuf,
    pub scenes: usize,
    pub seed: u64,
    pub views: usize,
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl GenArgs {
    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            image_width: self.image_size,
            image_height: self.image_size,
            num_views: self.views,
            min_objects: self.min_objects,
            max_objects: self.max_objects,
            seed: self.seed,
            ..SceneConfig::default()
        }
    }
}

pub fn generate_scenes(cfg: &SceneConfig, count: usize) -> Result<Vec<Scene>> {
    if count as u64 > SEED_STRIDE {
        return Err(Error::InvalidConfig(format!(
            "at most {SEED_STRIDE} scenes per seed"
        )));
    }
    (0..count as u64)
        .map(|i| scene::generate_scene(cfg, cfg.seed * SEED_STRIDE + i))
        .collect()
}

pub fn cmd_gen(args: &GenArgs) -> Result<DatasetManifest> {
    let cfg = args.scene_config();
    cfg.validate()?;
    let scenes = generate_scenes(&cfg, args.scenes)?;
    let mut manifest = RunManifest::start("gen", args);
    let summary = scene::save_dataset(&scenes, &args.out)?;
    manifest.output("dataset", &args.out)?;
    manifest.finish(&args.out.join(RUN_MANIFEST))?;
    log::info!(
        "{} scenes, {} QA records -> {}",
        summary.scenes,
        summary.qa_records,
        args.out.display()
    );
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderArgs {
    pub dataset: PathBuf,
    pub scene: String,
    pub out: PathBuf,
    pub alpha: f64,
    pub view: usize,
}

/// Writes the marker image and, next to it, the index map as JSON.
/// Returns the JSON path.
pub fn cmd_render(args: &RenderArgs) -> Result<PathBuf> {
    let scenes = scene::load_dataset(&args.dataset)?;
    let s = scenes
        .iter()
        .find(|s| s.scene_id == args.scene)
        .ok_or_else(|| invalid(&args.scene, "scene not found in dataset"))?;
    if args.view >= s.images.len() {
        return Err(invalid(
            &args.scene,
            format!("view {} out of range", args.view),
        ));
    }
    let map = trainer::scene_marker_map(s)?;
    let img = markerprompt_core::marker::render_marker_image(
        &s.images[args.view],
        args.view,
        &map,
        &s.detections,
        args.alpha,
    )?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    img.image.save_png(&args.out)?;
    let json_path = args.out.with_extension("json");
    write_text(&json_path, &map.to_json()?)?;
    let mut manifest = RunManifest::start("render", args);
    manifest.input("dataset", &args.dataset)?;
    manifest.output("image", &args.out)?;
    manifest.output("index_map", &json_path)?;
    manifest.finish(&args.out.with_extension("manifest.json"))?;
    Ok(json_path)
}

pub fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::from_toml(&read_text(p)?),
        None => Ok(TrainConfig::default()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainArgs {
    pub dataset: PathBuf,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub state: TrainState,
    pub losses: Vec<LossRow>,
    pub checkpoint: PathBuf,
}

/// Trains on already-loaded scenes and writes checkpoint, loss CSV and
/// resolved config into `out`. On a NaN abort the partial loss CSV is
/// still written.
pub fn train_into(scenes: &[Scene], config: &TrainConfig, out: &Path) -> Result<TrainOutput> {
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    write_text(&out.join(CONFIG_FILE), &config.to_toml())?;
    let model = Model::<f32>::for_scenes(config, scenes)?;
    let data: Vec<PreparedScene<f32>> = scenes
        .iter()
        .map(|s| model.prepare(s))
        .collect::<Result<_>>()?;
    let mut state = TrainState::new(model);
    let mut rows = Vec::new();
    let result = trainer::train_prepared(&mut state, &data, |r| rows.push(*r));
    write_text(&out.join(LOSS_FILE), &loss_csv(&rows))?;
    result?;
    let ckpt = out.join(CHECKPOINT_FILE);
    checkpoint::save(&state, &ckpt)?;
    Ok(TrainOutput {
        state,
        losses: rows,
        checkpoint: ckpt,
    })
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainOutput> {
    let config = load_config(args.config.as_deref())?;
    let scenes = select_split(&scene::load_dataset(&args.dataset)?, args.split);
    if scenes.is_empty() {
        return Err(invalid(
            args.dataset.display().to_string(),
            "split has no scenes",
        ));
    }
    let mut manifest = RunManifest::start("train", (&args, &config));
    manifest.input("dataset", &args.dataset)?;
    let out = train_into(&scenes, &config, &args.out)?;
    manifest.output("checkpoint", &out.checkpoint)?;
    manifest.output("loss_csv", &args.out.join(LOSS_FILE))?;
    manifest.finish(&args.out.join(RUN_MANIFEST))?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalArgs {
    pub dataset: PathBuf,
    pub ckpt: PathBuf,
    pub out: PathBuf,
    pub split: Split,
}

/// Predictions file written next to a report: `report.json` gets
/// `report.predictions.jsonl`.
pub fn predictions_path(report: &Path) -> PathBuf {
    report.with_extension("predictions.jsonl")
}

fn write_eval(model: &Model<f32>, scenes: &[Scene], out: &Path) -> Result<MetricReport> {
    let (records, report) = model.evaluate(scenes)?;
    let mut lines = String::new();
    for r in &records {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    write_text(&predictions_path(out), &lines)?;
    write_text(out, &report.to_json()?)?;
    Ok(report)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<MetricReport> {
    let state = checkpoint::load(&args.ckpt)?;
    let scenes = select_split(&scene::load_dataset(&args.dataset)?, args.split);
    let mut manifest = RunManifest::start("eval", args);
    manifest.input("dataset", &args.dataset)?;
    manifest.input("checkpoint", &args.ckpt)?;
    let report = write_eval(&state.model, &scenes, &args.out)?;
    manifest.output("report", &args.out)?;
    manifest.output("predictions", &predictions_path(&args.out))?;
    manifest.finish(&args.out.with_extension("manifest.json"))?;
    Ok(report)
}

/// Ablation grid file: a base training config plus the variants to run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationGrid {
    pub variants: Vec<Variant>,
    pub train: TrainConfig,
}

impl Default for AblationGrid {
    fn default() -> Self {
        AblationGrid {
            variants: Variant::ABLATION_ROWS.to_vec(),
            train: TrainConfig::default(),
        }
    }
}

impl AblationGrid {
    pub fn from_toml(text: &str) -> Result<Self> {
        let grid: AblationGrid =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        if grid.variants.is_empty() {
            return Err(Error::InvalidConfig("grid lists no variants".into()));
        }
        for v in &grid.variants {
            v.apply(&grid.train)?;
        }
        Ok(grid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub label: String,
    pub use_markers: bool,
    pub use_mcnet: bool,
    pub use_instance_prompts: bool,
    pub final_loss: Option<f64>,
    pub report: MetricReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub columns: Vec<String>,
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub rows: Vec<AblationRow>,
}

impl AblationSummary {
    pub fn table(&self) -> String {
        let rows: Vec<(String, &MetricReport)> = self
            .rows
            .iter()
            .map(|r| (r.label.clone(), &r.report))
            .collect();
        metrics::format_table(&rows)
    }

    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblateArgs {
    pub dataset: PathBuf,
    pub grid: Option<PathBuf>,
    pub out: PathBuf,
}

fn variant_dir(v: Variant) -> String {
    match v {
        Variant::Baseline => "none".into(),
        Variant::Marker => "marker".into(),
        Variant::MarkerMcnet => "marker_mcnet".into(),
        Variant::Full => "full".into(),
        Variant::Custom {
            markers,
            mcnet,
            instance,
        } => {
            format!(
                "custom_m{}_c{}_i{}",
                markers as u8, mcnet as u8, instance as u8
            )
        }
    }
}

/// Trains every grid variant on the training split, evaluates it on the
/// validation split, and writes per-variant artifacts plus the table.
pub fn run_ablation(scenes: &[Scene], grid: &AblationGrid, out: &Path) -> Result<AblationSummary> {
    let train = select_split(scenes, Split::Train);
    let val = select_split(scenes, Split::Val);
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidConfig(
            "ablation needs at least five scenes".into(),
        ));
    }
    let mut rows = Vec::new();
    for &v in &grid.variants {
        let cfg = v.apply(&grid.train)?;
        let dir = out.join(variant_dir(v));
        log::info!(
            "ablation variant {v}: {} train / {} val scenes",
            train.len(),
            val.len()
        );
        let trained = train_into(&train, &cfg, &dir)?;
        let report = write_eval(&trained.state.model, &val, &dir.join("report.json"))?;
        rows.push(AblationRow {
            variant: v,
            label: v.label(),
            use_markers: cfg.use_markers,
            use_mcnet: cfg.use_mcnet,
            use_instance_prompts: cfg.use_instance_prompts,
            final_loss: trained.losses.last().map(|r| r.loss),
            report,
        });
    }
    let summary = AblationSummary {
        columns: metrics::TABLE_COLUMNS
            .iter()
            .map(|s| s.to_string())
            .collect(),
        train_scenes: train.len(),
        val_scenes: val.len(),
        rows,
    };
    write_json(&out.join(ABLATION_JSON), &summary)?;
    write_text(&out.join(ABLATION_TABLE), &summary.table())?;
    Ok(summary)
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<AblationSummary> {
    let grid = match &args.grid {
        Some(p) => AblationGrid::from_toml(&read_text(p)?)?,
        None => AblationGrid::default(),
    };
    let scenes = scene::load_dataset(&args.dataset)?;
    let mut manifest = RunManifest::start("ablate", (&args, &grid));
    manifest.input("dataset", &args.dataset)?;
    let summary = run_ablation(&scenes, &grid, &args.out)?;
    manifest.output("ablation_json", &args.out.join(ABLATION_JSON))?;
    for r in &summary.rows {
        let name = variant_dir(r.variant);
        manifest.output(
            &format!("{name}/checkpoint"),
            &args.out.join(&name).join(CHECKPOINT_FILE),
        )?;
    }
    manifest.finish(&args.out.join(RUN_MANIFEST))?;
    Ok(summary)
}

/// Process exit code for an error: 2 for validation problems, 3 for a
/// numerical abort, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFiniteLoss { .. } => 3,
        e if e.is_validation() => 2,
        _ => 1,
    }
}

/// Machine-readable error line for stderr.
pub fn error_json(err: &Error) -> String {
    let kind = match err {
        Error::NonFiniteLoss { .. } => "numerical_abort",
        Error::Io { .. } | Error::Image { .. } => "io",
        _ => "validation",
    };
    let mut v = serde_json::json!({
        "error": kind,
        "exit_code": exit_code(err),
        "message": err.to_string(),
    });
    if let Error::NonFiniteLoss { iteration } = err {
        v["iteration"] = serde_json::json!(iteration);
    }
    v.to_string()
}
