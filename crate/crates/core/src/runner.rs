//! Experiment orchestration behind the CLI: data generation, training,
//! online-adaptation evaluation and the layer × τ sweep.
//!
//! A run is described by one JSON [`RunConfig`]. Every output carries the
//! config hash and seed; JSON outputs also embed the full config.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::dataio::{
    self, DatasetManifest, Sample, ScenarioManifest, ScenarioSpec, ScenarioTag, Trajectory,
};
use crate::edn::{self, EdnParams, TrainConfig};
use crate::goalgen::GoalProvider;
use crate::mekf::{self, AdaptConfig, AdaptState, OnlineRun};
use crate::metrics::{self, AdeReport, GroupKey, SummaryRow};
use crate::nn::LayerId;
use crate::numkit::Mat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Scenario specs; their `seed` fields are replaced by seeds derived from
    /// the run seed.
    pub trained: ScenarioSpec,
    pub transfer: ScenarioSpec,
    /// Existing CSVs to use instead of the generated ones.
    pub trained_csv: Option<PathBuf>,
    pub transfer_csv: Option<PathBuf>,
    pub t_h: usize,
    pub t_f: usize,
    /// Fraction of trained-scenario cases used for training; the rest are
    /// held out for evaluation.
    pub train_fraction: f64,
    /// Fraction of the training cases held out for model selection.
    pub val_fraction: f64,
    /// Keep every `train_stride`-th training window.
    pub train_stride: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            trained: ScenarioSpec::intersection(250, 0),
            transfer: ScenarioSpec::roundabout(50, 0),
            trained_csv: None,
            transfer_csv: None,
            t_h: 10,
            t_f: 30,
            train_fraction: 0.8,
            val_fraction: 0.1,
            train_stride: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub position_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            position_scale: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub goal: GoalProvider,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 32,
            lr: 5e-3,
            clip_norm: 5.0,
            goal: GoalProvider::ConstVelocity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub goal: GoalProvider,
    pub scenarios: Vec<ScenarioTag>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            goal: GoalProvider::ConstVelocity,
            scenarios: vec![ScenarioTag::Trained, ScenarioTag::Transfer],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub taus: Vec<usize>,
    pub layers: Vec<LayerId>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            taus: vec![1, 2, 3, 4, 5, 8],
            layers: vec![LayerId::Fc1, LayerId::Fc2, LayerId::Fc3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub adapt: AdaptConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            out_dir: PathBuf::from("out"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            adapt: AdaptConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// splitmix64 finalizer; spreads nearby run seeds apart.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedRole {
    TrainedData,
    TransferData,
    Split,
    Validation,
    Init,
    Shuffle,
}

impl RunConfig {
    pub fn derived_seed(&self, role: SeedRole) -> u64 {
        mix(self.seed ^ mix(role as u64 + 1))
    }

    /// Reads a config file (missing keys take defaults), then applies
    /// `KEY=VALUE` overrides on dotted paths. Values parse as JSON, falling
    /// back to a plain string.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let base: RunConfig = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        let mut value = serde_json::to_value(&base)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig =
            serde_json::from_value(value).context("config invalid after overrides")?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.t_h == 0 || d.t_f == 0 {
            bail!("data.t_h and data.t_f must be positive");
        }
        for (name, f) in [
            ("data.train_fraction", d.train_fraction),
            ("data.val_fraction", d.val_fraction),
        ] {
            if !(f > 0.0 && f < 1.0) {
                bail!("{name} must lie in (0, 1), got {f}");
            }
        }
        if d.train_stride == 0 {
            bail!("data.train_stride must be at least 1");
        }
        if d.trained_csv.is_none() {
            d.trained.validate().context("data.trained")?;
        }
        if d.transfer_csv.is_none() {
            d.transfer.validate().context("data.transfer")?;
        }
        if self.model.hidden == 0 {
            bail!("model.hidden must be positive");
        }
        if !(self.model.position_scale.is_finite() && self.model.position_scale > 0.0) {
            bail!("model.position_scale must be positive");
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 || !(self.train.lr > 0.0) {
            bail!("train.epochs, train.batch_size and train.lr must be positive");
        }
        self.adapt.validate()?;
        if self.adapt.tau > d.t_f {
            bail!("adapt.tau {} exceeds data.t_f {}", self.adapt.tau, d.t_f);
        }
        if self.eval.scenarios.is_empty() {
            bail!("eval.scenarios is empty");
        }
        if self.sweep.taus.is_empty() || self.sweep.layers.is_empty() {
            bail!("sweep grids must be non-empty");
        }
        if let Some(t) = self.sweep.taus.iter().find(|&&t| t == 0 || t > d.t_f) {
            bail!("sweep tau {t} outside 1..={}", d.t_f);
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON config, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    fn provenance_lines(&self) -> Vec<String> {
        vec![format!("config_hash={} seed={}", self.hash(), self.seed)]
    }

    fn provenance(&self) -> Value {
        serde_json::json!({
            "config_hash": self.hash(),
            "seed": self.seed,
            "config": self,
        })
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }

    pub fn dataset_path(&self, tag: ScenarioTag) -> PathBuf {
        let explicit = match tag {
            ScenarioTag::Trained => &self.data.trained_csv,
            ScenarioTag::Transfer => &self.data.transfer_csv,
        };
        explicit
            .clone()
            .unwrap_or_else(|| self.data_dir().join(format!("{}.csv", tag.name())))
    }

    pub fn model_path(&self) -> PathBuf {
        self.out_dir.join("model.json")
    }

    fn spec(&self, tag: ScenarioTag) -> ScenarioSpec {
        let (mut spec, role) = match tag {
            ScenarioTag::Trained => (self.data.trained.clone(), SeedRole::TrainedData),
            ScenarioTag::Transfer => (self.data.transfer.clone(), SeedRole::TransferData),
        };
        spec.seed = self.derived_seed(role);
        spec
    }
}

pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .with_context(|| format!("override '{assignment}' is not KEY=VALUE"))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .with_context(|| format!("override '{key}': '{}' is not an object", parts[..i].join(".")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = obj
            .get_mut(*part)
            .with_context(|| format!("override '{key}': unknown key '{part}'"))?;
    }
    bail!("empty override key")
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn write_rows<T: Serialize>(path: &Path, comments: &[String], rows: &[T]) -> Result<()> {
    let mut file = std::io::BufWriter::new(
        std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    for c in comments {
        writeln!(file, "# {c}")?;
    }
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    let dir = cfg.data_dir();
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut scenarios = Vec::new();
    for tag in [ScenarioTag::Trained, ScenarioTag::Transfer] {
        let spec = cfg.spec(tag);
        let trajs = dataio::synthesize(&spec).with_context(|| format!("{} scenario", tag.name()))?;
        let file = format!("{}.csv", tag.name());
        dataio::write_csv_with_comments(&dir.join(&file), &cfg.provenance_lines(), &trajs)?;
        scenarios.push(ScenarioManifest {
            tag,
            file,
            trajectories: trajs.len(),
            frames: trajs.iter().map(|t| t.frames.len()).sum(),
            samples: trajs
                .iter()
                .map(|t| dataio::window_count(t.frames.len(), cfg.data.t_h, cfg.data.t_f))
                .sum(),
            seed: spec.seed,
            spec,
        });
    }
    let manifest = DatasetManifest {
        t_h: cfg.data.t_h,
        t_f: cfg.data.t_f,
        stride: 1,
        scenarios,
        config_hash: cfg.hash(),
        seed: cfg.seed,
        config: Some(serde_json::to_value(cfg)?),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

fn load_trajectories(cfg: &RunConfig, tag: ScenarioTag) -> Result<Vec<Trajectory>> {
    let path = cfg.dataset_path(tag);
    if !path.exists() {
        bail!(
            "missing {} dataset {}; run gen-data first",
            tag.name(),
            path.display()
        );
    }
    Ok(dataio::load_csv(&path)?)
}

/// Trained-scenario windows split by case into (training, held-out).
fn trained_split(cfg: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let trajs = load_trajectories(cfg, ScenarioTag::Trained)?;
    let samples = dataio::window(&trajs, cfg.data.t_h, cfg.data.t_f, 1, ScenarioTag::Trained);
    Ok(dataio::split(
        samples,
        cfg.data.train_fraction,
        cfg.derived_seed(SeedRole::Split),
    )?)
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub curve: Vec<edn::EpochLoss>,
    pub best_epoch: usize,
    pub n_train: usize,
    pub n_val: usize,
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let (train_all, _) = trained_split(cfg)?;
    let stride = cfg.data.train_stride;
    let strided: Vec<Sample> = train_all
        .into_iter()
        .filter(|s| (s.anchor + 1 - cfg.data.t_h) % stride == 0)
        .collect();
    let (mut train, mut val) = dataio::split(
        strided,
        1.0 - cfg.data.val_fraction,
        cfg.derived_seed(SeedRole::Validation),
    )?;
    cfg.train.goal.fill(&mut train, cfg.data.t_f)?;
    cfg.train.goal.fill(&mut val, cfg.data.t_f)?;
    let init = EdnParams::init(cfg.model.hidden, cfg.derived_seed(SeedRole::Init))
        .with_position_scale(cfg.model.position_scale);
    let tc = TrainConfig {
        epochs: cfg.train.epochs,
        batch_size: cfg.train.batch_size,
        lr: cfg.train.lr,
        seed: cfg.derived_seed(SeedRole::Shuffle),
        clip_norm: cfg.train.clip_norm,
    };
    log::info!("training on {} samples, validating on {}", train.len(), val.len());
    let out = edn::train(&init, &train, &val, &tc)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut prov = cfg.provenance();
    prov["best_epoch"] = out.best_epoch.into();
    prov["n_train"] = train.len().into();
    prov["n_val"] = val.len().into();
    edn::save_model(&cfg.model_path(), &out.params, Some(prov))?;
    write_rows(
        &cfg.out_dir.join("loss_curve.csv"),
        &cfg.provenance_lines(),
        &out.curve,
    )?;
    Ok(TrainSummary {
        curve: out.curve,
        best_epoch: out.best_epoch,
        n_train: train.len(),
        n_val: val.len(),
    })
}

/// Evaluation cases of one scenario with frozen-model predictions cached.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub tag: ScenarioTag,
    pub cases: Vec<Vec<Sample>>,
    pub baselines: Vec<Vec<Mat>>,
}

impl EvalSet {
    pub fn new(tag: ScenarioTag, samples: &[Sample], model: &EdnParams, t_f: usize) -> Result<Self> {
        let cases = dataio::group_cases(samples);
        let baselines = cases
            .par_iter()
            .map(|c| mekf::baseline_predictions(model, c, t_f))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            tag,
            cases,
            baselines,
        })
    }
}

pub fn eval_sets(cfg: &RunConfig, model: &EdnParams) -> Result<Vec<EvalSet>> {
    let mut sets = Vec::new();
    for &tag in &cfg.eval.scenarios {
        let mut samples = match tag {
            ScenarioTag::Trained => trained_split(cfg)?.1,
            ScenarioTag::Transfer => {
                let trajs = load_trajectories(cfg, tag)?;
                dataio::window(&trajs, cfg.data.t_h, cfg.data.t_f, 1, tag)
            }
        };
        cfg.eval.goal.fill(&mut samples, cfg.data.t_f)?;
        sets.push(EvalSet::new(tag, &samples, model, cfg.data.t_f)?);
    }
    Ok(sets)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellOutput {
    pub key: GroupKey,
    pub runs: Vec<((u64, u64), OnlineRun)>,
}

impl CellOutput {
    pub fn reports(&self) -> Vec<(GroupKey, AdeReport)> {
        self.runs
            .iter()
            .flat_map(|(_, r)| r.steps.iter().filter_map(|s| s.report))
            .map(|r| (self.key, r))
            .collect()
    }

    pub fn notices(&self) -> Vec<String> {
        self.runs
            .iter()
            .filter_map(|((c, a), r)| r.notice.as_ref().map(|n| format!("case {c}/{a}: {n}")))
            .collect()
    }

    pub fn warnings(&self) -> usize {
        self.runs.iter().map(|(_, r)| r.warnings.len()).sum()
    }
}

/// Runs online adaptation over every case of `set`. Cases run in parallel
/// unless the filter state persists across them.
pub fn run_cell(
    model: &EdnParams,
    adapt: &AdaptConfig,
    set: &EvalSet,
    t_f: usize,
) -> Result<CellOutput> {
    let key = GroupKey {
        scenario: set.tag,
        layer: adapt.layer,
        tau: adapt.tau,
    };
    let case_key = |c: &[Sample]| c.first().map_or((0, 0), |s| (s.case_id, s.agent_id));
    let runs = if adapt.persist_across_cases {
        let mut state = AdaptState::new(model, adapt)?;
        let mut runs = Vec::with_capacity(set.cases.len());
        for (case, base) in set.cases.iter().zip(&set.baselines) {
            let run = mekf::run_online_with(&mut state, model, adapt, case, t_f, Some(base))?;
            runs.push((case_key(case), run));
        }
        runs
    } else {
        // Validate once up front so an oversized layer fails fast.
        AdaptState::new(model, adapt)?;
        set.cases
            .par_iter()
            .zip(&set.baselines)
            .map(|(case, base)| {
                mekf::run_online(model, adapt, case, t_f, Some(base)).map(|r| (case_key(case), r))
            })
            .collect::<Result<Vec<_>, _>>()?
    };
    Ok(CellOutput { key, runs })
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub config_hash: String,
    pub seed: u64,
    pub rows: Vec<SummaryRow>,
    pub log_rows: Vec<(ScenarioTag, usize)>,
    pub notices: Vec<String>,
    pub skipped_updates: usize,
    pub config: RunConfig,
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalSummary> {
    cfg.validate()?;
    let model_path = cfg.model_path();
    if !model_path.exists() {
        bail!("missing model {}; run train first", model_path.display());
    }
    let model = edn::load_model(&model_path)?;
    let sets = eval_sets(cfg, &model)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let header = cfg.provenance_lines();
    let mut reports = Vec::new();
    let mut notices = Vec::new();
    let mut log_rows = Vec::new();
    let mut skipped = 0;
    for set in &sets {
        let cell = run_cell(&model, &cfg.adapt, set, cfg.data.t_f)?;
        let path = cfg.out_dir.join(format!("adapt_log_{}.csv", set.tag.name()));
        mekf::write_adapt_log(&path, &header, &cell.runs)?;
        log_rows.push((set.tag, cell.runs.iter().map(|(_, r)| r.steps.len()).sum()));
        reports.extend(cell.reports());
        notices.extend(cell.notices());
        skipped += cell.warnings();
    }
    let rows = metrics::aggregate(&reports).context("no evaluation instants")?;
    metrics::write_summary_csv(&cfg.out_dir.join("summary.csv"), &header, &rows)?;
    let summary = EvalSummary {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        rows,
        log_rows,
        notices,
        skipped_updates: skipped,
        config: cfg.clone(),
    };
    write_json(&cfg.out_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub key: GroupKey,
    pub summary: Option<SummaryRow>,
    pub error: Option<String>,
    pub skipped_updates: usize,
}

/// Evaluates each cell independently; failures are recorded per cell. The
/// result is sorted by (scenario, layer, tau) whatever the input order.
pub fn run_sweep_cells(
    model: &EdnParams,
    cfg: &RunConfig,
    sets: &[EvalSet],
    cells: &[GroupKey],
) -> Vec<SweepCell> {
    let mut out: Vec<SweepCell> = cells
        .par_iter()
        .map(|&key| {
            let Some(set) = sets.iter().find(|s| s.tag == key.scenario) else {
                return SweepCell {
                    key,
                    summary: None,
                    error: Some(format!("scenario {} not evaluated", key.scenario.name())),
                    skipped_updates: 0,
                };
            };
            let adapt = AdaptConfig {
                layer: key.layer,
                tau: key.tau,
                ..cfg.adapt.clone()
            };
            let result = run_cell(model, &adapt, set, cfg.data.t_f).and_then(|cell| {
                let rows = metrics::aggregate(&cell.reports())
                    .context("no usable instants")?;
                Ok((rows.into_iter().next(), cell.warnings()))
            });
            match result {
                Ok((summary, skipped_updates)) => SweepCell {
                    key,
                    summary,
                    error: None,
                    skipped_updates,
                },
                Err(e) => SweepCell {
                    key,
                    summary: None,
                    error: Some(format!("{e:#}")),
                    skipped_updates: 0,
                },
            }
        })
        .collect();
    out.sort_by_key(|c| c.key);
    out
}

pub fn sweep_grid(cfg: &RunConfig) -> Vec<GroupKey> {
    let mut cells = Vec::new();
    for &scenario in &cfg.eval.scenarios {
        for &layer in &cfg.sweep.layers {
            for &tau in &cfg.sweep.taus {
                cells.push(GroupKey {
                    scenario,
                    layer,
                    tau,
                });
            }
        }
    }
    cells.sort();
    cells.dedup();
    cells
}

#[derive(Debug, Serialize)]
struct SweepRow {
    scenario: &'static str,
    layer: &'static str,
    tau: usize,
    status: &'static str,
    n: Option<usize>,
    ade1_baseline: Option<f64>,
    ade1_adapted: Option<f64>,
    ade1_improvement_pct: Option<f64>,
    ade2_baseline: Option<f64>,
    ade2_adapted: Option<f64>,
    ade2_improvement_pct: Option<f64>,
    ade3_baseline: Option<f64>,
    ade3_adapted: Option<f64>,
    ade3_improvement_pct: Option<f64>,
    ade4_baseline: Option<f64>,
    ade4_adapted: Option<f64>,
    ade4_improvement_pct: Option<f64>,
    skipped_updates: usize,
    error: Option<String>,
}

impl From<&SweepCell> for SweepRow {
    fn from(c: &SweepCell) -> Self {
        let m = |i: usize| c.summary.as_ref().map(|s| s.metrics[i]);
        let base = |i| m(i).map(|s| s.baseline_mean);
        let adapted = |i| m(i).map(|s| s.adapted_mean);
        let imp = |i| m(i).and_then(|s| s.improvement_pct);
        SweepRow {
            scenario: c.key.scenario.name(),
            layer: c.key.layer.name(),
            tau: c.key.tau,
            status: if c.error.is_some() { "failed" } else { "ok" },
            n: c.summary.as_ref().map(|s| s.n),
            ade1_baseline: base(0),
            ade1_adapted: adapted(0),
            ade1_improvement_pct: imp(0),
            ade2_baseline: base(1),
            ade2_adapted: adapted(1),
            ade2_improvement_pct: imp(1),
            ade3_baseline: base(2),
            ade3_adapted: adapted(2),
            ade3_improvement_pct: imp(2),
            ade4_baseline: base(3),
            ade4_adapted: adapted(3),
            ade4_improvement_pct: imp(3),
            skipped_updates: c.skipped_updates,
            error: c.error.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub config_hash: String,
    pub seed: u64,
    pub cells: Vec<SweepCell>,
    pub config: RunConfig,
}

impl SweepReport {
    pub fn cell(&self, scenario: ScenarioTag, layer: LayerId, tau: usize) -> Option<&SweepCell> {
        self.cells.iter().find(|c| {
            c.key
                == GroupKey {
                    scenario,
                    layer,
                    tau,
                }
        })
    }

    /// Ratio-of-means improvement of metric `m` (0-based) in one cell.
    pub fn improvement(
        &self,
        scenario: ScenarioTag,
        layer: LayerId,
        tau: usize,
        m: usize,
    ) -> Option<f64> {
        self.cell(scenario, layer, tau)?
            .summary
            .as_ref()?
            .metrics[m]
            .improvement_pct
    }
}

pub fn cmd_sweep(cfg: &RunConfig) -> Result<SweepReport> {
    cfg.validate()?;
    let model_path = cfg.model_path();
    if !model_path.exists() {
        bail!("missing model {}; run train first", model_path.display());
    }
    let model = edn::load_model(&model_path)?;
    let sets = eval_sets(cfg, &model)?;
    let cells = run_sweep_cells(&model, cfg, &sets, &sweep_grid(cfg));
    for c in cells.iter().filter(|c| c.error.is_some()) {
        log::warn!(
            "sweep cell {}/{}/tau={} failed: {}",
            c.key.scenario.name(),
            c.key.layer.name(),
            c.key.tau,
            c.error.as_deref().unwrap_or("")
        );
    }
    std::fs::create_dir_all(&cfg.out_dir)?;
    let rows: Vec<SweepRow> = cells.iter().map(SweepRow::from).collect();
    write_rows(&cfg.out_dir.join("sweep.csv"), &cfg.provenance_lines(), &rows)?;
    let report = SweepReport {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        cells,
        config: cfg.clone(),
    };
    write_json(&cfg.out_dir.join("sweep.json"), &report)?;
    write_sweep_charts(cfg, &report)?;
    Ok(report)
}

fn write_sweep_charts(cfg: &RunConfig, report: &SweepReport) -> Result<()> {
    let taus = &cfg.sweep.taus;
    let tau_labels: Vec<String> = taus.iter().map(|t| t.to_string()).collect();
    let layer_labels: Vec<String> = cfg.sweep.layers.iter().map(|l| l.name().to_string()).collect();
    for &scenario in &cfg.eval.scenarios {
        for &layer in &cfg.sweep.layers {
            let series = (0..4)
                .map(|m| {
                    let ys = taus
                        .iter()
                        .map(|&t| report.improvement(scenario, layer, t, m))
                        .collect();
                    (format!("ADE{}", m + 1), ys)
                })
                .collect::<Vec<_>>();
            let svg = line_chart(
                &format!("{} / {}: improvement vs tau", scenario.name(), layer.name()),
                "tau",
                &tau_labels,
                &series,
            );
            let path = cfg
                .out_dir
                .join(format!("sweep_tau_{}_{}.svg", scenario.name(), layer.name()));
            std::fs::write(path, svg)?;
        }
        let series = taus
            .iter()
            .map(|&t| {
                let ys = cfg
                    .sweep
                    .layers
                    .iter()
                    .map(|&l| report.improvement(scenario, l, t, 1))
                    .collect();
                (format!("tau={t}"), ys)
            })
            .collect::<Vec<_>>();
        let svg = line_chart(
            &format!("{}: ADE2 improvement vs layer", scenario.name()),
            "layer",
            &layer_labels,
            &series,
        );
        std::fs::write(
            cfg.out_dir.join(format!("sweep_layer_{}.svg", scenario.name())),
            svg,
        )?;
    }
    Ok(())
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Minimal static SVG line chart of improvement percentages; gaps where a
/// value is missing.
pub fn line_chart(
    title: &str,
    x_label: &str,
    x_ticks: &[String],
    series: &[(String, Vec<Option<f64>>)],
) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 130.0, 40.0, 50.0);
    let values: Vec<f64> = series
        .iter()
        .flat_map(|(_, ys)| ys.iter().flatten().copied())
        .filter(|v| v.is_finite())
        .collect();
    let mut lo = values.iter().copied().fold(0.0f64, f64::min);
    let mut hi = values.iter().copied().fold(0.0f64, f64::max);
    if hi - lo < 1e-9 {
        lo -= 1.0;
        hi += 1.0;
    }
    let n = x_ticks.len().max(1);
    let px = |i: usize| {
        left + if n == 1 {
            (w - left - right) / 2.0
        } else {
            i as f64 * (w - left - right) / (n - 1) as f64
        }
    };
    let py = |v: f64| top + (hi - v) / (hi - lo) * (h - top - bottom);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r##"<line x1="{left}" y1="{0}" x2="{1}" y2="{0}" stroke="#999" stroke-dasharray="4 3"/>"##,
        py(0.0),
        w - right
    );
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{}" stroke="black"/>"#,
        h - bottom
    );
    for v in [lo, (lo + hi) / 2.0, hi] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{v:.1}%</text>"#,
            left - 6.0,
            py(v) + 4.0
        );
    }
    for (i, t) in x_ticks.iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            px(i),
            h - bottom + 18.0,
            escape(t)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (left + w - right) / 2.0,
        h - 10.0,
        escape(x_label)
    );
    for (k, (name, ys)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let mut path = String::new();
        let mut pen_down = false;
        for (i, y) in ys.iter().enumerate() {
            match y.filter(|v| v.is_finite()) {
                Some(v) => {
                    let _ = write!(
                        path,
                        "{}{:.1},{:.1} ",
                        if pen_down { "L" } else { "M" },
                        px(i),
                        py(v)
                    );
                    let _ = writeln!(
                        s,
                        r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                        px(i),
                        py(v)
                    );
                    pen_down = true;
                }
                None => pen_down = false,
            }
        }
        if !path.is_empty() {
            let _ = writeln!(
                s,
                r#"<path d="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                path.trim_end()
            );
        }
        let ly = top + 16.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{}" width="12" height="3" fill="{color}"/><text x="{}" y="{}">{}</text>"#,
            w - right + 12.0,
            ly,
            w - right + 30.0,
            ly + 5.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}
