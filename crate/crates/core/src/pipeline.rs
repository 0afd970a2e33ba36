//! Experiment harness: the cross-validation protocol and an on-disk artifact
//! pipeline.
//!
//! Stages run in a fixed order and write their outputs under one directory.
//! With `resume` set, a stage whose artifact already exists is skipped, so
//! deleting downstream files and rerunning regenerates exactly those files.
//! Raw events and spike trains are not stored by default; they are
//! regenerated from seeds and checked against the recorded fingerprints.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::annconv::{self, AnnModel, Evaluation, IfSnnModel, InputMode, NormMode, TrainConfig};
use crate::encode::{self, EncoderConfig, Normalization, SpikeTrain};
use crate::energy::{self, EnergyReport, OpCounts};
use crate::linalg::Matrix;
use crate::sigsel::{self, SelectionResult};
use crate::snn::{self, SnnParams, SnnState};
use crate::synthdata::{
    self, DatasetConfig, DatasetManifest, EventClass, LabeledEvent, ManifestEntry, PreprocessConfig, SignalWindow,
};
use crate::{rng, Error, Result};

pub const DATASET_DIR: &str = "dataset";
pub const MODELS_DIR: &str = "models";
pub const SELECTION_FILE: &str = "selection.json";
pub const MC_CURVES_FILE: &str = "mc_curves.csv";
pub const ENCODING_FILE: &str = "encoding.json";
pub const SPLITS_FILE: &str = "splits.json";
pub const UNSUPERVISED_FILE: &str = "unsupervised.json";
pub const SUPERVISED_FILE: &str = "supervised.json";
pub const CONVERSION_FILE: &str = "conversion.json";
pub const EVALUATION_FILE: &str = "evaluation.json";
pub const ACC_CURVE_FILE: &str = "acc_vs_timesteps.csv";
pub const ENERGY_FILE: &str = "energy.json";
pub const SPARSITY_FILE: &str = "sparsity.csv";
pub const METRICS_FILE: &str = "metrics.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Generate,
    Select,
    Encode,
    TrainUnsup,
    TrainSup,
    Convert,
    Evaluate,
    EnergyReport,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Generate,
        Stage::Select,
        Stage::Encode,
        Stage::TrainUnsup,
        Stage::TrainSup,
        Stage::Convert,
        Stage::Evaluate,
        Stage::EnergyReport,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Select => "select",
            Stage::Encode => "encode",
            Stage::TrainUnsup => "train-unsup",
            Stage::TrainSup => "train-sup",
            Stage::Convert => "convert",
            Stage::Evaluate => "evaluate",
            Stage::EnergyReport => "energy-report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown stage `{s}`")))
    }
}

/// Attributes an error to a stage, keeping the innermost attribution.
pub fn in_stage(stage: Stage, err: Error) -> Error {
    match err {
        e @ Error::Stage { .. } => e,
        e => Error::Stage {
            stage: stage.name(),
            source: Box::new(e),
        },
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub nu1: f64,
    pub n_hat: usize,
    /// Random signal sets in the Monte Carlo comparison.
    pub mc_sets: usize,
    /// Largest set size on the Monte Carlo curves.
    pub mc_n_hat: usize,
    /// Fraction of each window used to fit the least-squares map.
    pub p_frac: f64,
    /// Cap on the events entering the Monte Carlo comparison (evenly spaced).
    pub mc_events: Option<usize>,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            nu1: sigsel::DEFAULT_NU1,
            n_hat: sigsel::DEFAULT_N_HAT,
            mc_sets: sigsel::DEFAULT_MC_SETS,
            mc_n_hat: sigsel::DEFAULT_MC_N_HAT,
            p_frac: 0.5,
            mc_events: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnsupervisedConfig {
    pub snn: SnnParams,
    pub epochs: usize,
}

impl Default for UnsupervisedConfig {
    fn default() -> Self {
        Self {
            snn: SnnParams::default(),
            epochs: 3,
        }
    }
}

/// Ambient-versus-event detection with the unsupervised network. The
/// ambient windows come from the dataset's `ambient_count`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionConfig {
    pub enabled: bool,
    /// Shared normalizer. Per-window scaling would lift noise-only windows
    /// to full rate.
    pub fixed_scale: f64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            fixed_scale: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SupervisedConfig {
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    pub norm: NormMode,
    pub timesteps: usize,
    pub input_mode: InputMode,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 64],
            train: TrainConfig::default(),
            norm: NormMode::Max,
            timesteps: 2000,
            input_mode: InputMode::Bernoulli,
        }
    }
}

/// The 1-D conv network on the larger four-class dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeepConfig {
    pub enabled: bool,
    pub dataset: DatasetConfig,
    pub train_frac: f64,
    pub train: TrainConfig,
    pub norm: NormMode,
    pub timesteps: usize,
    pub input_mode: InputMode,
}

impl Default for DeepConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            dataset: DatasetConfig::four_class(),
            train_frac: 2.0 / 3.0,
            train: TrainConfig {
                lr: 0.001,
                batch: 32,
                epochs: 15,
                momentum: 0.9,
            },
            norm: NormMode::Percentile(annconv::DEFAULT_PERCENTILE),
            timesteps: 300,
            input_mode: InputMode::Bernoulli,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvConfig {
    pub n_folds: usize,
    pub train_frac: f64,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            n_folds: 10,
            train_frac: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Generator config file; replaces `dataset` when set. Relative paths
    /// resolve against the pipeline config's directory.
    pub generator_config: Option<PathBuf>,
    pub dataset: DatasetConfig,
    /// Also write every raw event as CSV. Large; off by default.
    pub write_event_csv: bool,
    pub preprocess: PreprocessConfig,
    pub selection: SelectionConfig,
    pub encoder: EncoderConfig,
    pub unsupervised: UnsupervisedConfig,
    pub detection: DetectionConfig,
    pub supervised: SupervisedConfig,
    pub deep: DeepConfig,
    pub cv: CvConfig,
    pub energy_per_op_ratio: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            generator_config: None,
            dataset: DatasetConfig {
                ambient_count: 200,
                ..DatasetConfig::default()
            },
            write_event_csv: false,
            preprocess: PreprocessConfig::default(),
            selection: SelectionConfig::default(),
            encoder: EncoderConfig::default(),
            unsupervised: UnsupervisedConfig::default(),
            detection: DetectionConfig::default(),
            supervised: SupervisedConfig::default(),
            deep: DeepConfig::default(),
            cv: CvConfig::default(),
            energy_per_op_ratio: energy::DEFAULT_ENERGY_PER_OP_RATIO,
        }
    }
}

impl PipelineConfig {
    /// A small configuration that runs end to end in seconds.
    pub fn tiny() -> Self {
        let mut c = Self::default();
        c.dataset.counts = BTreeMap::from([
            (EventClass::BusFault, 24),
            (EventClass::GenOutage, 12),
            (EventClass::LoadTrip, 18),
        ]);
        c.dataset.ambient_count = 16;
        c.selection.mc_sets = 10;
        c.selection.mc_n_hat = 10;
        c.unsupervised.epochs = 1;
        c.supervised.hidden = vec![32, 16];
        c.supervised.train.epochs = 10;
        c.supervised.timesteps = 100;
        c.deep.dataset.counts = BTreeMap::from([
            (EventClass::BusFault, 16),
            (EventClass::GenOutage, 12),
            (EventClass::LoadTrip, 16),
            (EventClass::LineOutage, 16),
        ]);
        c.deep.train.epochs = 3;
        c.deep.timesteps = 50;
        c.cv.n_folds = 2;
        c
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: Self = read_json(path)?;
        if let Some(g) = &cfg.generator_config {
            if g.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.generator_config = Some(base.join(g));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let frac = |f: f64, what: &str| {
            if f > 0.0 && f < 1.0 {
                Ok(())
            } else {
                Err(Error::invalid(format!("{what} = {f} not in (0, 1)")))
            }
        };
        frac(self.cv.train_frac, "cv.train_frac")?;
        frac(self.deep.train_frac, "deep.train_frac")?;
        if self.cv.n_folds == 0 {
            return Err(Error::invalid("cv.n_folds must be >= 1"));
        }
        if !(self.selection.nu1 > 0.0 && self.selection.nu1 <= 1.0) {
            return Err(Error::invalid("selection.nu1 must be in (0, 1]"));
        }
        if self.selection.n_hat == 0 || self.selection.mc_sets == 0 || self.selection.mc_n_hat == 0 {
            return Err(Error::invalid("selection sizes must be >= 1"));
        }
        if self.supervised.timesteps == 0 || self.deep.timesteps == 0 {
            return Err(Error::invalid("timesteps must be >= 1"));
        }
        if !(self.detection.fixed_scale > 0.0) || !(self.energy_per_op_ratio > 0.0) {
            return Err(Error::invalid("fixed_scale and energy_per_op_ratio must be positive"));
        }
        self.unsupervised.snn.validate()
    }

    /// The generator config in effect, reading `generator_config` if set.
    pub fn dataset_config(&self) -> Result<DatasetConfig> {
        match &self.generator_config {
            Some(path) => read_json(path),
            None => Ok(self.dataset.clone()),
        }
    }

    /// Fingerprint of the effective configuration.
    pub fn hash(&self) -> Result<String> {
        let resolved = Self {
            generator_config: None,
            dataset: self.dataset_config()?,
            ..self.clone()
        };
        Ok(rng::content_hash(
            &serde_json::to_vec(&resolved).expect("config serializes"),
        ))
    }
}

// ---------------------------------------------------------------------------
// Cross-validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// `n_folds` independent stratified random splits. Each class contributes
/// `round(train_frac * n_c)` examples to training, at least one and leaving
/// at least one for testing.
pub fn make_cv_splits(labels: &[usize], n_folds: usize, train_frac: f64, seed: u64) -> Result<Vec<Split>> {
    if labels.is_empty() {
        return Err(Error::Empty("labels"));
    }
    if n_folds == 0 || !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::invalid("need n_folds >= 1 and train_frac in (0, 1)"));
    }
    let n_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut by_class = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    if let Some(c) = by_class.iter().position(|m| m.len() == 1) {
        return Err(Error::invalid(format!(
            "class {c} has a single example; cannot stratify"
        )));
    }
    Ok((0..n_folds)
        .map(|f| {
            let mut g = rng::stream(seed, "cv-split", f as u64);
            let (mut train, mut test) = (Vec::new(), Vec::new());
            for members in by_class.iter().filter(|m| !m.is_empty()) {
                let mut m = members.clone();
                m.shuffle(&mut g);
                let k = ((train_frac * m.len() as f64).round() as usize).clamp(1, m.len() - 1);
                train.extend_from_slice(&m[..k]);
                test.extend_from_slice(&m[k..]);
            }
            train.sort_unstable();
            test.sort_unstable();
            Split { train, test }
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    /// `None` where training-set accuracy was not measured.
    pub train_acc: Option<f64>,
    pub test_acc: f64,
    /// `confusion[true][predicted]` on the test set.
    pub confusion: Vec<Vec<usize>>,
    /// Test examples that drew no labeled spike; counted as errors.
    #[serde(default)]
    pub unassigned: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub folds: Vec<FoldMetrics>,
    pub mean_train: Option<f64>,
    pub mean_test: f64,
}

impl CvSummary {
    pub fn new(folds: Vec<FoldMetrics>) -> Self {
        let n = folds.len().max(1) as f64;
        let mean_train = folds.iter().map(|f| f.train_acc).sum::<Option<f64>>().map(|s| s / n);
        let mean_test = folds.iter().map(|f| f.test_acc).sum::<f64>() / n;
        Self {
            folds,
            mean_train,
            mean_test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedSet {
    pub config: EncoderConfig,
    pub classes: Vec<EventClass>,
    /// Dataset index of each member.
    pub events: Vec<usize>,
    pub labels: Vec<usize>,
    pub seeds: Vec<u64>,
    pub spikes: Vec<usize>,
    /// Hash of every train's per-neuron spike counts.
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodingArtifact {
    pub selected: Vec<usize>,
    pub n_inputs: usize,
    pub classification: EncodedSet,
    pub detection: Option<EncodedSet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitsArtifact {
    pub classification: Vec<Split>,
    pub detection: Option<Vec<Split>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnsupervisedArtifact {
    pub classification: CvSummary,
    pub detection: Option<CvSummary>,
    pub models: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepTrainRecord {
    pub dataset_hash: String,
    pub classes: Vec<EventClass>,
    pub split: Split,
    pub metrics: FoldMetrics,
    pub model: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisedArtifact {
    pub ann: CvSummary,
    pub models: Vec<String>,
    pub deep: Option<DeepTrainRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvertedRecord {
    pub model: String,
    pub scales: Vec<f64>,
    pub input_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionArtifact {
    pub mode: NormMode,
    pub folds: Vec<ConvertedRecord>,
    pub deep_mode: Option<NormMode>,
    pub deep: Option<ConvertedRecord>,
}

/// Timestep evaluation of converted networks, pooled over folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpikingEval {
    pub timesteps: usize,
    pub input_mode: InputMode,
    /// Mean accuracy after each step.
    pub curve: Vec<f64>,
    /// First step whose accuracy is within one point of the final value.
    pub t_converge: usize,
    pub op_counts: OpCounts,
    pub op_counts_converge: OpCounts,
    /// Whether the per-spike fan-out count equalled the simulator's tally.
    pub tally_matches: bool,
    pub populations: Vec<String>,
    /// Spikes per neuron per step for each population.
    pub sparsity: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationArtifact {
    pub snn: CvSummary,
    pub mlp: SpikingEval,
    pub deep: Option<(FoldMetrics, SpikingEval)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyPair {
    pub at_t_max: EnergyReport,
    pub at_convergence: EnergyReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyArtifact {
    pub mlp: EnergyPair,
    pub deep: Option<EnergyPair>,
    /// Which network `sparsity.csv` describes.
    pub sparsity_source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepSummary {
    pub ann: FoldMetrics,
    pub snn: FoldMetrics,
    pub timesteps: usize,
}

/// The top-level `metrics.json`. `folds`, `mean_train` and `mean_test`
/// belong to the unsupervised network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub folds: Vec<FoldMetrics>,
    pub mean_train: Option<f64>,
    pub mean_test: f64,
    pub classes: Vec<EventClass>,
    pub detection: Option<CvSummary>,
    pub supervised_ann: CvSummary,
    pub supervised_snn: Option<CvSummary>,
    pub deep: Option<DeepSummary>,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    /// Artifact files the numbers come from, relative to the output dir.
    pub artifacts: BTreeMap<String, String>,
    pub energy_report: Option<String>,
}

/// One inference on one event, for the `infer` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferReport {
    pub event: usize,
    pub label: EventClass,
    pub predicted: Option<EventClass>,
    pub timesteps: usize,
    /// Predicted class index after each step (converted networks only).
    pub trace: Vec<usize>,
    pub spikes_per_population: Vec<u64>,
}

// ---------------------------------------------------------------------------
// File helpers
// ---------------------------------------------------------------------------

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("artifact serializes");
    write_text(path, &(text + "\n"))
}

fn write_json_compact<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &serde_json::to_string(value).expect("artifact serializes"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(usize, &T) -> R + Sync + Send) -> Vec<R> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
    }
}

fn cached<T>(cell: &OnceLock<T>, make: impl FnOnce() -> Result<T>) -> Result<&T> {
    if let Some(v) = cell.get() {
        return Ok(v);
    }
    let v = make()?;
    Ok(cell.get_or_init(|| v))
}

fn fingerprint(trains: &[SpikeTrain]) -> String {
    let mut bytes = Vec::new();
    for t in trains {
        bytes.extend((t.n_neurons as u64).to_le_bytes());
        for c in t.counts_per_neuron() {
            bytes.extend(c.to_le_bytes());
        }
    }
    rng::content_hash(&bytes)
}

fn pick<T: Clone>(items: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| items[i].clone()).collect()
}

/// Index of each label within the sorted set of distinct labels.
fn class_index(labels: &[EventClass]) -> (Vec<EventClass>, Vec<usize>) {
    let classes: Vec<EventClass> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let idx = labels
        .iter()
        .map(|l| classes.binary_search(l).expect("label is in its own class set"))
        .collect();
    (classes, idx)
}

fn model_path(name: &str) -> String {
    format!("{MODELS_DIR}/{name}")
}

/// First step whose accuracy is within one point of the final accuracy.
pub fn convergence_step(curve: &[f64]) -> usize {
    let last = curve.last().copied().unwrap_or(0.0);
    curve
        .iter()
        .position(|&a| a >= last - 0.01)
        .map_or(curve.len(), |i| i + 1)
}

// ---------------------------------------------------------------------------
// The pipeline
// ---------------------------------------------------------------------------

pub struct Pipeline {
    config: PipelineConfig,
    out: PathBuf,
    resume: bool,
    events: OnceLock<Vec<LabeledEvent>>,
    windows: OnceLock<Vec<SignalWindow>>,
    class_trains: OnceLock<Vec<SpikeTrain>>,
    detect_trains: OnceLock<Vec<SpikeTrain>>,
    features: OnceLock<Vec<Vec<f64>>>,
    deep_data: OnceLock<(Vec<Vec<f64>>, Vec<usize>, Vec<EventClass>, String)>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, out: impl Into<PathBuf>, resume: bool) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            out: out.into(),
            resume,
            events: OnceLock::new(),
            windows: OnceLock::new(),
            class_trains: OnceLock::new(),
            detect_trains: OnceLock::new(),
            features: OnceLock::new(),
            deep_data: OnceLock::new(),
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn done(&self, artifact: &str) -> bool {
        self.resume && self.path(artifact).exists()
    }

    fn seed(&self, label: &str, index: u64) -> u64 {
        rng::derive_seed(self.config.seed, label, index)
    }

    /// Runs every stage in order and returns the final metrics.
    pub fn run_all(&self) -> Result<MetricsRecord> {
        for stage in Stage::ALL {
            self.run(stage)?;
        }
        self.write_metrics().map_err(|e| in_stage(Stage::EnergyReport, e))
    }

    /// Runs one stage; upstream artifacts must already exist.
    pub fn run(&self, stage: Stage) -> Result<()> {
        let r = match stage {
            Stage::Generate => self.generate(),
            Stage::Select => self.select(),
            Stage::Encode => self.encode(),
            Stage::TrainUnsup => self.train_unsup(),
            Stage::TrainSup => self.train_sup(),
            Stage::Convert => self.convert(),
            Stage::Evaluate => self.evaluate(),
            Stage::EnergyReport => self.energy_report(),
        };
        r.map_err(|e| in_stage(stage, e))
    }

    // -- data access --------------------------------------------------------

    fn dataset_dir(&self) -> PathBuf {
        self.path(DATASET_DIR)
    }

    /// Dataset events, read from CSV when present, otherwise regenerated and
    /// checked against the manifest.
    pub fn events(&self) -> Result<&[LabeledEvent]> {
        cached(&self.events, || {
            let dir = self.dataset_dir();
            let manifest = synthdata::read_manifest(&dir)?;
            if manifest.events.iter().all(|e| !e.file.is_empty()) {
                return Ok(synthdata::read_dataset(&dir)?.1);
            }
            let cfg = self.config.dataset_config()?;
            if cfg.hash() != manifest.config_hash {
                return Err(Error::invalid(
                    "dataset manifest was written under a different generator config",
                ));
            }
            let events = synthdata::generate_dataset(&cfg, manifest.seed)?;
            let same = events.len() == manifest.events.len()
                && events
                    .iter()
                    .zip(&manifest.events)
                    .all(|(e, m)| e.label == m.label && e.seed == m.seed);
            if !same {
                return Err(Error::invalid("regenerated events do not match the dataset manifest"));
            }
            Ok(events)
        })
        .map(Vec::as_slice)
    }

    fn windows(&self) -> Result<&[SignalWindow]> {
        let events = self.events()?;
        cached(&self.windows, || {
            par_map(events, |_, e| synthdata::preprocess_event(e, &self.config.preprocess))
                .into_iter()
                .collect()
        })
        .map(Vec::as_slice)
    }

    fn encoding(&self) -> Result<EncodingArtifact> {
        read_json(&self.path(ENCODING_FILE))
    }

    fn make_trains(&self, set: &EncodedSet, selected: &[usize]) -> Result<Vec<SpikeTrain>> {
        let windows = self.windows()?;
        let jobs: Vec<(usize, u64)> = set.events.iter().copied().zip(set.seeds.iter().copied()).collect();
        let trains = par_map(&jobs, |_, &(i, seed)| {
            encode::encode(&encode::flatten(&windows[i], selected)?, &set.config, seed)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok(trains)
    }

    /// Spike trains of the classification (or detection) set, regenerated
    /// from the encoding artifact.
    pub fn spike_trains(&self, detection: bool) -> Result<&[SpikeTrain]> {
        let cell = if detection {
            &self.detect_trains
        } else {
            &self.class_trains
        };
        cached(cell, || {
            let enc = self.encoding()?;
            let set = if detection {
                enc.detection
                    .ok_or_else(|| Error::invalid("detection set was not encoded"))?
            } else {
                enc.classification
            };
            let trains = self.make_trains(&set, &enc.selected)?;
            if fingerprint(&trains) != set.fingerprint {
                return Err(Error::invalid(
                    "encoding.json does not match the regenerated spike trains",
                ));
            }
            Ok(trains)
        })
        .map(Vec::as_slice)
    }

    /// Real-valued network inputs: normalized flattened windows of the
    /// classification set.
    pub fn features(&self) -> Result<&[Vec<f64>]> {
        cached(&self.features, || {
            let enc = self.encoding()?;
            let windows = self.windows()?;
            let cfg = EncoderConfig {
                max_rate_prob: 1.0,
                ..enc.classification.config.clone()
            };
            enc.classification
                .events
                .iter()
                .map(|&i| encode::spike_probabilities(&encode::flatten(&windows[i], &enc.selected)?, &cfg))
                .collect()
        })
        .map(Vec::as_slice)
    }

    fn labels(&self) -> Result<(Vec<usize>, Vec<EventClass>)> {
        let enc = self.encoding()?;
        Ok((enc.classification.labels, enc.classification.classes))
    }

    /// Features, labels, classes and config hash of the deep-network dataset.
    fn deep_data(&self) -> Result<&(Vec<Vec<f64>>, Vec<usize>, Vec<EventClass>, String)> {
        cached(&self.deep_data, || {
            let enc = self.encoding()?;
            let cfg = &self.config.deep.dataset;
            let events = synthdata::generate_dataset(cfg, self.seed("deep-dataset", 0))?;
            let events: Vec<&LabeledEvent> = events.iter().filter(|e| e.label != EventClass::Ambient).collect();
            let norm = EncoderConfig {
                max_rate_prob: 1.0,
                ..self.config.encoder.clone()
            };
            let feats = par_map(&events, |_, e| {
                let w = synthdata::preprocess_event(e, &self.config.preprocess)?;
                encode::spike_probabilities(&encode::flatten(&w, &enc.selected)?, &norm)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let (classes, labels) = class_index(&events.iter().map(|e| e.label).collect::<Vec<_>>());
            Ok((feats, labels, classes, cfg.hash()))
        })
    }

    // -- stages -------------------------------------------------------------

    fn generate(&self) -> Result<()> {
        let dir = self.dataset_dir();
        if self.done(&format!("{DATASET_DIR}/{}", synthdata::MANIFEST_FILE)) {
            return Ok(());
        }
        let cfg = self.config.dataset_config()?;
        let events = synthdata::generate_dataset(&cfg, self.config.seed)?;
        if self.config.write_event_csv {
            synthdata::write_dataset(&dir, &events, &cfg, self.config.seed)?;
        } else {
            let manifest = DatasetManifest {
                config_hash: cfg.hash(),
                seed: self.config.seed,
                sample_rate: cfg.sample_rate,
                signal_ids: cfg.signal_ids(),
                events: events
                    .iter()
                    .map(|e| ManifestEntry {
                        file: String::new(),
                        label: e.label,
                        seed: e.seed,
                        onset: e.onset,
                        condition: e.condition,
                    })
                    .collect(),
            };
            write_json(&dir.join(synthdata::MANIFEST_FILE), &manifest)?;
        }
        let _ = self.events.set(events);
        Ok(())
    }

    fn classification_indices(&self) -> Result<Vec<usize>> {
        Ok(self
            .events()?
            .iter()
            .enumerate()
            .filter(|(_, e)| e.label != EventClass::Ambient)
            .map(|(i, _)| i)
            .collect())
    }

    fn select(&self) -> Result<()> {
        if self.done(SELECTION_FILE) && self.path(MC_CURVES_FILE).exists() {
            return Ok(());
        }
        let events = self.events()?;
        let windows = self.windows()?;
        let idx = self.classification_indices()?;
        let pairs: Vec<(&SignalWindow, EventClass)> = idx.iter().map(|&i| (&windows[i], events[i].label)).collect();
        let s = &self.config.selection;
        let sel = sigsel::select_signals(&pairs, s.nu1, s.n_hat)?;

        let mc_idx: Vec<usize> = match s.mc_events {
            Some(cap) if cap < idx.len() => (0..cap).map(|k| idx[k * idx.len() / cap]).collect(),
            _ => idx.clone(),
        };
        let mats: Vec<&Matrix> = mc_idx.iter().map(|&i| &windows[i].samples).collect();
        let m = sel.signal_ids.len();
        let curves = sigsel::monte_carlo_compare(
            &mats,
            &sel.ordering(),
            s.mc_sets,
            s.mc_n_hat.min(m),
            s.p_frac,
            self.seed("mc", 0),
        )?;
        write_text(&self.path(MC_CURVES_FILE), &curves.to_csv())?;
        write_json(&self.path(SELECTION_FILE), &sel)
    }

    fn encode(&self) -> Result<()> {
        if self.done(ENCODING_FILE) && self.path(SPLITS_FILE).exists() {
            return Ok(());
        }
        let sel: SelectionResult = read_json(&self.path(SELECTION_FILE))?;
        let events = self.events()?;
        let windows = self.windows()?;
        let n_inputs = sel.selected.len() * windows[0].n_samples();

        let encode_set = |members: Vec<usize>, labels: Vec<EventClass>, config: EncoderConfig, label: &str| {
            let (classes, labels) = class_index(&labels);
            let seeds = members.iter().map(|&i| self.seed(label, i as u64)).collect();
            let mut set = EncodedSet {
                config,
                classes,
                events: members,
                labels,
                seeds,
                spikes: Vec::new(),
                fingerprint: String::new(),
            };
            let trains = self.make_trains(&set, &sel.selected)?;
            set.spikes = trains.iter().map(SpikeTrain::total_spikes).collect();
            set.fingerprint = fingerprint(&trains);
            Ok::<_, Error>((set, trains))
        };

        let idx = self.classification_indices()?;
        let labels = idx.iter().map(|&i| events[i].label).collect();
        let (classification, trains) = encode_set(idx, labels, self.config.encoder.clone(), "encode")?;
        let cv = &self.config.cv;
        let class_splits = make_cv_splits(&classification.labels, cv.n_folds, cv.train_frac, self.seed("cv", 0))?;

        let has_ambient = events.iter().any(|e| e.label == EventClass::Ambient);
        let (detection, detect_splits, detect_trains) = if self.config.detection.enabled && has_ambient {
            let all: Vec<usize> = (0..events.len()).collect();
            // event windows share one label
            let labels = events
                .iter()
                .map(|e| match e.label {
                    EventClass::Ambient => EventClass::Ambient,
                    _ => EventClass::BusFault,
                })
                .collect();
            let cfg = EncoderConfig {
                normalization: Normalization::FixedScale(self.config.detection.fixed_scale),
                ..self.config.encoder.clone()
            };
            let (set, trains) = encode_set(all, labels, cfg, "encode-detect")?;
            let splits = make_cv_splits(&set.labels, cv.n_folds, cv.train_frac, self.seed("cv-detect", 0))?;
            (Some(set), Some(splits), Some(trains))
        } else {
            (None, None, None)
        };

        write_json(
            &self.path(SPLITS_FILE),
            &SplitsArtifact {
                classification: class_splits,
                detection: detect_splits,
            },
        )?;
        write_json(
            &self.path(ENCODING_FILE),
            &EncodingArtifact {
                selected: sel.selected,
                n_inputs,
                classification,
                detection,
            },
        )?;
        let _ = self.class_trains.set(trains);
        if let Some(t) = detect_trains {
            let _ = self.detect_trains.set(t);
        }
        Ok(())
    }

    fn train_unsup(&self) -> Result<()> {
        if self.done(UNSUPERVISED_FILE) {
            return Ok(());
        }
        let enc = self.encoding()?;
        let splits: SplitsArtifact = read_json(&self.path(SPLITS_FILE))?;
        let cfg = &self.config.unsupervised;

        let trains = self.spike_trains(false)?;
        let set = &enc.classification;
        let results = par_map(&splits.classification, |k, split| {
            unsupervised_fold(
                trains,
                &set.labels,
                split,
                set.classes.len(),
                cfg,
                self.seed("snn-train", k as u64),
                None,
            )
        });
        let mut folds = Vec::new();
        let mut models = Vec::new();
        for (k, r) in results.into_iter().enumerate() {
            let (metrics, state) = r?;
            let name = model_path(&format!("snn_fold{k}.json"));
            write_json_compact(&self.path(&name), &state)?;
            folds.push(metrics);
            models.push(name);
        }

        let detection = match (&enc.detection, &splits.detection) {
            (Some(set), Some(dsplits)) => {
                let trains = self.spike_trains(true)?;
                // a silent network reads as ambient
                let ambient = set.classes.iter().position(|&c| c == EventClass::Ambient);
                let results = par_map(dsplits, |k, split| {
                    unsupervised_fold(
                        trains,
                        &set.labels,
                        split,
                        set.classes.len(),
                        cfg,
                        self.seed("snn-detect", k as u64),
                        ambient,
                    )
                });
                let folds = results
                    .into_iter()
                    .map(|r| r.map(|(m, _)| m))
                    .collect::<Result<Vec<_>>>()?;
                Some(CvSummary::new(folds))
            }
            _ => None,
        };

        write_json(
            &self.path(UNSUPERVISED_FILE),
            &UnsupervisedArtifact {
                classification: CvSummary::new(folds),
                detection,
                models,
            },
        )
    }

    fn train_sup(&self) -> Result<()> {
        if self.done(SUPERVISED_FILE) {
            return Ok(());
        }
        let splits: SplitsArtifact = read_json(&self.path(SPLITS_FILE))?;
        let feats = self.features()?;
        let (labels, classes) = self.labels()?;
        let sup = &self.config.supervised;
        let arch = annconv::mlp(feats[0].len(), &sup.hidden, classes.len());

        let results = par_map(&splits.classification, |k, split| {
            supervised_fold(
                feats,
                &labels,
                split,
                &arch,
                &sup.train,
                self.seed("ann-train", k as u64),
            )
        });
        let mut folds = Vec::new();
        let mut models = Vec::new();
        for (k, r) in results.into_iter().enumerate() {
            let (metrics, model) = r?;
            let name = model_path(&format!("ann_fold{k}.json"));
            write_json_compact(&self.path(&name), &model)?;
            folds.push(metrics);
            models.push(name);
        }

        let deep = if self.config.deep.enabled {
            let (feats, labels, classes, hash) = self.deep_data()?;
            let enc = self.encoding()?;
            let split = make_cv_splits(labels, 1, self.config.deep.train_frac, self.seed("deep-split", 0))?.remove(0);
            let in_len = feats[0].len() / enc.selected.len();
            let arch = annconv::desk_conv(enc.selected.len(), in_len, classes.len());
            let (metrics, model) = supervised_fold(
                feats,
                labels,
                &split,
                &arch,
                &self.config.deep.train,
                self.seed("deep-train", 0),
            )?;
            let name = model_path("conv.json");
            write_json_compact(&self.path(&name), &model)?;
            Some(DeepTrainRecord {
                dataset_hash: hash.clone(),
                classes: classes.clone(),
                split,
                metrics,
                model: name,
            })
        } else {
            None
        };

        write_json(
            &self.path(SUPERVISED_FILE),
            &SupervisedArtifact {
                ann: CvSummary::new(folds),
                models,
                deep,
            },
        )
    }

    fn convert(&self) -> Result<()> {
        if self.done(CONVERSION_FILE) {
            return Ok(());
        }
        let sup_art: SupervisedArtifact = read_json(&self.path(SUPERVISED_FILE))?;
        let splits: SplitsArtifact = read_json(&self.path(SPLITS_FILE))?;
        let feats = self.features()?;
        let mode = self.config.supervised.norm;

        let convert_one = |model_file: &str, x: &[Vec<f64>], mode: NormMode, out: String| -> Result<ConvertedRecord> {
            let model: AnnModel = read_json(&self.path(model_file))?;
            let stats = annconv::record_activations(&model, x)?;
            let snn = annconv::normalize_and_convert(&model, &stats, mode)?;
            write_json_compact(&self.path(&out), &snn)?;
            Ok(ConvertedRecord {
                model: out,
                scales: snn.scales,
                input_scale: snn.input_scale,
            })
        };

        let folds = sup_art
            .models
            .iter()
            .zip(&splits.classification)
            .enumerate()
            .map(|(k, (file, split))| {
                convert_one(
                    file,
                    &pick(feats, &split.train),
                    mode,
                    model_path(&format!("ifsnn_fold{k}.json")),
                )
            })
            .collect::<Result<Vec<_>>>()?;

        let (deep_mode, deep) = match &sup_art.deep {
            Some(d) => {
                let (feats, ..) = self.deep_data()?;
                let mode = self.config.deep.norm;
                let rec = convert_one(
                    &d.model,
                    &pick(feats, &d.split.train),
                    mode,
                    model_path("conv_ifsnn.json"),
                )?;
                (Some(mode), Some(rec))
            }
            None => (None, None),
        };
        write_json(
            &self.path(CONVERSION_FILE),
            &ConversionArtifact {
                mode,
                folds,
                deep_mode,
                deep,
            },
        )
    }

    fn evaluate(&self) -> Result<()> {
        if self.done(EVALUATION_FILE) && self.path(ACC_CURVE_FILE).exists() {
            return self.write_metrics().map(drop);
        }
        let conv: ConversionArtifact = read_json(&self.path(CONVERSION_FILE))?;
        let splits: SplitsArtifact = read_json(&self.path(SPLITS_FILE))?;
        let feats = self.features()?;
        let (labels, classes) = self.labels()?;
        let sup = &self.config.supervised;

        let mut jobs = Vec::new();
        for (rec, split) in conv.folds.iter().zip(&splits.classification) {
            let model: IfSnnModel = read_json(&self.path(&rec.model))?;
            jobs.push((model, pick(feats, &split.test), pick(&labels, &split.test)));
        }
        let (folds, mlp) = spiking_eval(&jobs, classes.len(), sup.timesteps, sup.input_mode, |k| {
            self.seed("if-eval", k as u64)
        })?;

        let deep = match &conv.deep {
            Some(rec) => {
                let sup_art: SupervisedArtifact = read_json(&self.path(SUPERVISED_FILE))?;
                let d = sup_art
                    .deep
                    .ok_or_else(|| Error::invalid("conversion lists a deep model that was not trained"))?;
                let (feats, labels, classes, _) = self.deep_data()?;
                let model: IfSnnModel = read_json(&self.path(&rec.model))?;
                let jobs = [(model, pick(feats, &d.split.test), pick(labels, &d.split.test))];
                let dc = &self.config.deep;
                let (mut f, eval) = spiking_eval(&jobs, classes.len(), dc.timesteps, dc.input_mode, |_| {
                    self.seed("if-eval-deep", 0)
                })?;
                Some((f.remove(0), eval))
            }
            None => None,
        };

        let mut csv = String::from("network,t,accuracy\n");
        let mut rows = vec![("mlp", &mlp.curve)];
        if let Some((_, e)) = &deep {
            rows.push(("conv", &e.curve));
        }
        for (net, curve) in rows {
            for (t, a) in curve.iter().enumerate() {
                csv.push_str(&format!("{net},{},{a}\n", t + 1));
            }
        }
        write_text(&self.path(ACC_CURVE_FILE), &csv)?;
        write_json(
            &self.path(EVALUATION_FILE),
            &EvaluationArtifact {
                snn: CvSummary::new(folds),
                mlp,
                deep,
            },
        )?;
        self.write_metrics().map(drop)
    }

    fn energy_report(&self) -> Result<()> {
        if self.done(ENERGY_FILE) && self.path(SPARSITY_FILE).exists() {
            return self.write_metrics().map(drop);
        }
        let eval: EvaluationArtifact = read_json(&self.path(EVALUATION_FILE))?;
        let ratio = self.config.energy_per_op_ratio;
        let pair = |e: &SpikingEval| {
            let report = |c: &OpCounts| {
                let mut r = energy::energy_report(c.total_macs() as f64, c.acs_per_presentation(), ratio, c.timesteps);
                r.per_layer_spike_rates = e.sparsity.clone();
                r
            };
            EnergyPair {
                at_t_max: report(&e.op_counts),
                at_convergence: report(&e.op_counts_converge),
            }
        };
        let (source, sparse) = match &eval.deep {
            Some((_, e)) => ("conv", e),
            None => ("mlp", &eval.mlp),
        };
        write_text(
            &self.path(SPARSITY_FILE),
            &energy::sparsity_csv(&sparse.populations, &sparse.sparsity),
        )?;
        write_json(
            &self.path(ENERGY_FILE),
            &EnergyArtifact {
                mlp: pair(&eval.mlp),
                deep: eval.deep.as_ref().map(|(_, e)| pair(e)),
                sparsity_source: source.into(),
            },
        )?;
        self.write_metrics().map(drop)
    }

    /// Assembles `metrics.json` from the stage artifacts present.
    pub fn write_metrics(&self) -> Result<MetricsRecord> {
        let unsup: UnsupervisedArtifact = read_json(&self.path(UNSUPERVISED_FILE))?;
        let sup: SupervisedArtifact = read_json(&self.path(SUPERVISED_FILE))?;
        let eval: Option<EvaluationArtifact> = match self.path(EVALUATION_FILE).exists() {
            true => Some(read_json(&self.path(EVALUATION_FILE))?),
            false => None,
        };
        let (_, classes) = self.labels()?;
        let deep = match (&sup.deep, eval.as_ref().and_then(|e| e.deep.as_ref())) {
            (Some(d), Some((snn, e))) => Some(DeepSummary {
                ann: d.metrics.clone(),
                snn: snn.clone(),
                timesteps: e.timesteps,
            }),
            _ => None,
        };
        let mut artifacts = BTreeMap::new();
        for (k, v) in [
            ("dataset", format!("{DATASET_DIR}/{}", synthdata::MANIFEST_FILE)),
            ("selection", SELECTION_FILE.into()),
            ("mc_curves", MC_CURVES_FILE.into()),
            ("encoding", ENCODING_FILE.into()),
            ("splits", SPLITS_FILE.into()),
            ("unsupervised", UNSUPERVISED_FILE.into()),
            ("supervised", SUPERVISED_FILE.into()),
            ("conversion", CONVERSION_FILE.into()),
            ("evaluation", EVALUATION_FILE.into()),
            ("acc_vs_timesteps", ACC_CURVE_FILE.into()),
            ("energy", ENERGY_FILE.into()),
            ("sparsity", SPARSITY_FILE.into()),
        ] {
            if self.path(&v).exists() {
                artifacts.insert(k.to_string(), v);
            }
        }
        let seeds = BTreeMap::from([
            ("root".to_string(), self.config.seed),
            ("dataset".to_string(), self.config.seed),
            ("cv".to_string(), self.seed("cv", 0)),
            ("deep_dataset".to_string(), self.seed("deep-dataset", 0)),
        ]);
        let record = MetricsRecord {
            folds: unsup.classification.folds,
            mean_train: unsup.classification.mean_train,
            mean_test: unsup.classification.mean_test,
            classes,
            detection: unsup.detection,
            supervised_ann: sup.ann,
            supervised_snn: eval.map(|e| e.snn),
            deep,
            config_hash: self.config.hash()?,
            seeds,
            energy_report: self.path(ENERGY_FILE).exists().then(|| ENERGY_FILE.to_string()),
            artifacts,
        };
        write_json(&self.path(METRICS_FILE), &record)?;
        Ok(record)
    }

    // -- single-event inference ---------------------------------------------

    fn event_label(&self, event: usize) -> Result<(EventClass, Vec<EventClass>)> {
        let enc = self.encoding()?;
        let set = &enc.classification;
        if event >= set.events.len() {
            return Err(Error::invalid(format!(
                "event {event} out of range ({})",
                set.events.len()
            )));
        }
        Ok((set.classes[set.labels[event]], set.classes.clone()))
    }

    /// Runs the converted network of `fold` on classification event `event`.
    pub fn infer_converted(&self, fold: usize, event: usize, t_max: Option<usize>) -> Result<InferReport> {
        let (label, classes) = self.event_label(event)?;
        let model: IfSnnModel = read_json(&self.path(&model_path(&format!("ifsnn_fold{fold}.json"))))?;
        let t_max = t_max.unwrap_or(self.config.supervised.timesteps);
        let x = &self.features()?[event];
        let run = annconv::infer_snn(
            &model,
            x,
            t_max,
            self.config.supervised.input_mode,
            self.seed("infer", event as u64),
        )?;
        Ok(InferReport {
            event,
            label,
            predicted: Some(classes[run.prediction()]),
            timesteps: t_max,
            spikes_per_population: run
                .spike_counts
                .iter()
                .map(|c| c.iter().map(|&n| n as u64).sum())
                .collect(),
            trace: run.predictions,
        })
    }

    /// Runs the unsupervised network of `fold` on classification event `event`.
    pub fn infer_unsupervised(&self, fold: usize, event: usize) -> Result<InferReport> {
        let (label, classes) = self.event_label(event)?;
        let state: SnnState = read_json(&self.path(&model_path(&format!("snn_fold{fold}.json"))))?;
        let params = &self.config.unsupervised.snn;
        let train = &self.spike_trains(false)?[event];
        let inf = snn::infer(&state, train, params)?;
        Ok(InferReport {
            event,
            label,
            predicted: inf.predicted.map(|c| classes[c]),
            timesteps: train.n_bins,
            trace: Vec::new(),
            spikes_per_population: vec![train.total_spikes() as u64, inf.counts.iter().map(|&n| n as u64).sum()],
        })
    }
}

/// Trains, labels and tests one unsupervised fold. `fallback` is the class
/// assigned when no labeled neuron fires.
fn unsupervised_fold(
    trains: &[SpikeTrain],
    labels: &[usize],
    split: &Split,
    n_classes: usize,
    cfg: &UnsupervisedConfig,
    seed: u64,
    fallback: Option<usize>,
) -> Result<(FoldMetrics, SnnState)> {
    let train: Vec<&SpikeTrain> = split.train.iter().map(|&i| &trains[i]).collect();
    let mut state = snn::train_unsupervised(&train, &cfg.snn, cfg.epochs, seed)?;
    let responses = train
        .iter()
        .map(|t| snn::response(&state, t, &cfg.snn))
        .collect::<Result<Vec<_>>>()?;
    let train_labels = pick(labels, &split.train);
    state.label_map = snn::labels_from_responses(&responses, &train_labels, n_classes)?;

    let train_correct = responses
        .iter()
        .zip(&train_labels)
        .filter(|(r, &l)| snn::vote(r, &state.label_map).predicted.or(fallback) == Some(l))
        .count();
    let mut confusion = vec![vec![0; n_classes]; n_classes];
    let (mut correct, mut unassigned) = (0, 0);
    for &i in &split.test {
        match snn::infer(&state, &trains[i], &cfg.snn)?.predicted.or(fallback) {
            Some(p) => {
                confusion[labels[i]][p] += 1;
                correct += usize::from(p == labels[i]);
            }
            None => unassigned += 1,
        }
    }
    let metrics = FoldMetrics {
        train_acc: Some(train_correct as f64 / split.train.len() as f64),
        test_acc: correct as f64 / split.test.len() as f64,
        confusion,
        unassigned,
    };
    Ok((metrics, state))
}

fn supervised_fold(
    feats: &[Vec<f64>],
    labels: &[usize],
    split: &Split,
    arch: &[annconv::LayerKind],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(FoldMetrics, AnnModel)> {
    let (x_train, y_train) = (pick(feats, &split.train), pick(labels, &split.train));
    let model = annconv::train_ann(&x_train, &y_train, arch, cfg, seed)?;
    let train = annconv::accuracy(&model, &x_train, &y_train)?;
    let test = annconv::accuracy(&model, &pick(feats, &split.test), &pick(labels, &split.test))?;
    let metrics = FoldMetrics {
        train_acc: Some(train.accuracy),
        test_acc: test.accuracy,
        confusion: test.confusion,
        unassigned: 0,
    };
    Ok((metrics, model))
}

/// Timestep evaluation of converted networks over `(model, inputs, labels)`
/// jobs, pooling op counts and sparsity. Each job is rerun up to the
/// convergence step for the early-exit op counts.
fn spiking_eval(
    jobs: &[(IfSnnModel, Vec<Vec<f64>>, Vec<usize>)],
    n_classes: usize,
    t_max: usize,
    mode: InputMode,
    seed: impl Fn(usize) -> u64,
) -> Result<(Vec<FoldMetrics>, SpikingEval)> {
    let mut folds = Vec::new();
    let mut curve = vec![0.0; t_max];
    let mut counts: Option<OpCounts> = None;
    let mut tally_matches = true;
    let mut sparsity: Vec<f64> = Vec::new();
    let mut presented = 0.0;
    for (k, (model, x, y)) in jobs.iter().enumerate() {
        let (c, runs) = annconv::snn_accuracy_curve(model, x, y, t_max, mode, seed(k))?;
        let predicted: Vec<usize> = runs.iter().map(|r| r.prediction()).collect();
        let ev = Evaluation::from_predictions(&predicted, y, n_classes)?;
        folds.push(FoldMetrics {
            train_acc: None,
            test_acc: ev.accuracy,
            confusion: ev.confusion,
            unassigned: 0,
        });
        for (a, b) in curve.iter_mut().zip(&c) {
            *a += b / jobs.len() as f64;
        }
        let ops = energy::count_snn_acs(model, &runs)?;
        let tally: Vec<u64> = (0..ops.snn_acs_per_layer.len())
            .map(|l| runs.iter().map(|r| r.acs[l]).sum())
            .collect();
        tally_matches &= tally == ops.snn_acs_per_layer;
        let rates = energy::sparsity_profile(&runs);
        let n = runs.len() as f64;
        if sparsity.is_empty() {
            sparsity = vec![0.0; rates.len()];
        }
        for (s, r) in sparsity.iter_mut().zip(&rates) {
            *s = (*s * presented + r * n) / (presented + n);
        }
        presented += n;
        match &mut counts {
            Some(total) => total.merge(&ops)?,
            None => counts = Some(ops),
        }
    }
    let t_converge = convergence_step(&curve);
    let mut counts_converge: Option<OpCounts> = None;
    for (k, (model, x, y)) in jobs.iter().enumerate() {
        let (_, runs) = annconv::snn_accuracy_curve(model, x, y, t_converge, mode, seed(k))?;
        let ops = energy::count_snn_acs(model, &runs)?;
        match &mut counts_converge {
            Some(total) => total.merge(&ops)?,
            None => counts_converge = Some(ops),
        }
    }
    let eval = SpikingEval {
        timesteps: t_max,
        input_mode: mode,
        curve,
        t_converge,
        op_counts: counts.ok_or(Error::Empty("evaluation jobs"))?,
        op_counts_converge: counts_converge.ok_or(Error::Empty("evaluation jobs"))?,
        tally_matches,
        populations: energy::population_names(&jobs[0].0),
        sparsity,
    };
    Ok((folds, eval))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_partition_and_stratify() {
        let labels: Vec<usize> = (0..395)
            .map(|i| usize::from(i >= 201) + usize::from(i >= 239))
            .collect();
        let splits = make_cv_splits(&labels, 10, 0.6, 1).unwrap();
        assert_eq!(splits.len(), 10);
        for s in &splits {
            let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..395).collect::<Vec<_>>());
            assert!((s.train.len() as i64 - 237).abs() <= 2);
            for (c, n) in [(0, 201.0), (1, 38.0), (2, 156.0)] {
                let k = s.train.iter().filter(|&&i| labels[i] == c).count() as f64;
                assert!((k - 0.6 * n).abs() <= 1.0);
            }
        }
        assert_ne!(splits[0], splits[1]);
        assert_eq!(splits, make_cv_splits(&labels, 10, 0.6, 1).unwrap());
    }

    #[test]
    fn singleton_class_cannot_stratify() {
        assert!(make_cv_splits(&[0, 0, 1], 2, 0.6, 0).is_err());
        assert!(make_cv_splits(&[0, 0, 1, 1], 2, 1.0, 0).is_err());
    }

    #[test]
    fn convergence_step_is_first_within_a_point() {
        assert_eq!(convergence_step(&[0.2, 0.5, 0.895, 0.9, 0.88, 0.9]), 3);
        assert_eq!(convergence_step(&[1.0]), 1);
    }

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        let e = in_stage(Stage::Select, Error::Empty("x"));
        assert_eq!(e.stage(), Some("select"));
        assert_eq!(in_stage(Stage::Convert, e).stage(), Some("select"));
    }

    #[test]
    fn missing_generator_config_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig {
            generator_config: Some(dir.path().join("absent.json")),
            ..PipelineConfig::tiny()
        };
        let p = Pipeline::new(cfg, dir.path(), false).unwrap();
        let err = p.run(Stage::Generate).unwrap_err();
        assert_eq!(err.stage(), Some("generate"));
    }

    #[test]
    fn downstream_stage_needs_upstream_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(PipelineConfig::tiny(), dir.path(), false).unwrap();
        assert_eq!(p.run(Stage::Convert).unwrap_err().stage(), Some("convert"));
    }
}
