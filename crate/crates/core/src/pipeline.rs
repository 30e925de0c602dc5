//! End-to-end orchestration: load records, preprocess, train both stages,
//! evaluate on the held-out split, and assemble results tables.
//!
//! Evaluation always goes through [`FrameSource`], reading only the
//! configured limited channels.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::baseline::{train_rnn_classifier, Pooling, RnnClassifier};
use crate::checkpoint::{config_hash, Checkpoint};
use crate::embed::{embed_dataset, EmbeddedFeatures, EmbeddingConfig};
use crate::error::{Error, Result};
use crate::forest::{fit_forest, ForestConfig, RandomForest};
use crate::ingest::{
    channel_indices, generate_synthetic, load_dir, normalize, restrict_channels, split, ChannelConfig,
    FrameConfig, FrameTensor, FRANK_LEADS, Label, NormStats, Provenance, RawRecord, SplitMode, SynthConfig,
};
use crate::metrics::{fmt_opt, EvalReport};
use crate::optim::{TrainConfig, TrainReport};
use crate::rng::SeededRng;
use crate::seq2seq::{train_generative, Attention, ModelDims, Seq2SeqModel};
use crate::tensor::Tensor;

/// Channel-configuration names of the normal/abnormal experiment, in table order.
pub const TABLE1_CONFIGS: [&str; 7] = ["v1_to_v6", "v1_v2_v3", "ii_iii_avf", "ii_iii_v3", "v1_v6", "ii_v1", "ii"];

/// Disease experiments: `(diagnosis tag, display name)`. The channel
/// configuration shares the tag's name.
pub const TABLE2_DISEASES: [(&str, &str); 2] = [("mi", "Myocardial Infarction"), ("bbb", "Bundle Branch Block")];

/// Diagnosis tag of the control group in disease tasks.
pub const HEALTHY: &str = "healthy";

pub const TABLE1_HEADER: &str = "channels,standard_rnn,proposed";
pub const TABLE2_HEADER: &str = "disease,channels,accuracy,sensitivity,specificity";

/// Leads of a named channel configuration.
pub fn named_channels(name: &str) -> Option<Vec<String>> {
    let leads: &[&str] = match name {
        "v1_to_v6" => &["V1", "V2", "V3", "V4", "V5", "V6"],
        "v1_v2_v3" | "mi" => &["V1", "V2", "V3"],
        "ii_iii_avf" => &["II", "III", "aVF"],
        "ii_iii_v3" => &["II", "III", "V3"],
        "v1_v6" | "bbb" => &["V1", "V6"],
        "ii_v1" => &["II", "V1"],
        "ii" => &["II"],
        _ => return None,
    };
    Some(leads.iter().map(|s| s.to_string()).collect())
}

/// Resolves a configuration name or a comma-separated lead list.
pub fn resolve_channels(spec: &str) -> Result<Vec<String>> {
    if let Some(v) = named_channels(spec) {
        return Ok(v);
    }
    let leads: Vec<String> = spec.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    if leads.is_empty() {
        return Err(Error::Config(format!("unknown channel configuration {spec:?}")));
    }
    Ok(leads)
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    NormalAbnormal,
    /// Records tagged with this diagnosis (positive) against `healthy` ones.
    Disease(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Named configuration or comma-separated leads.
    pub channels: String,
    /// Full channel set `K`; the first record's channels when absent.
    pub full_channels: Option<Vec<String>>,
    pub data_dir: Option<PathBuf>,
    /// Used when `data_dir` is absent.
    pub synthetic: Option<SynthConfig>,
    pub task: Task,
    pub frame: FrameConfig,
    pub split: SplitMode,
    /// Training share of the split.
    pub train_fraction: f64,
    /// Master seed. Overrides the seeds inside `train` and `forest`.
    pub seed: u64,
    pub hidden: usize,
    pub layers: usize,
    pub attention: Attention,
    pub train: TrainConfig,
    pub embedding: EmbeddingConfig,
    pub forest: ForestConfig,
    pub with_baseline: bool,
    pub baseline_pooling: Pooling,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            channels: "v1_v6".into(),
            full_channels: None,
            data_dir: None,
            synthetic: None,
            task: Task::NormalAbnormal,
            frame: FrameConfig::default(),
            split: SplitMode::Record,
            train_fraction: 0.67,
            seed: 0,
            hidden: 64,
            layers: 2,
            attention: Attention::Off,
            train: TrainConfig::default(),
            embedding: EmbeddingConfig::default(),
            forest: ForestConfig::default(),
            with_baseline: false,
            baseline_pooling: Pooling::LastHidden,
        }
    }
}

impl PipelineConfig {
    /// Small synthetic setting that runs in minutes on one core: 600 records
    /// of 6 rank-2 mixed channels, 30% abnormal, 10% label noise, one 5 s
    /// frame per record downsampled to 50 steps, `h = 16`, 30 epochs.
    pub fn desk_synthetic() -> Self {
        Self {
            channels: "I,II".into(),
            synthetic: Some(SynthConfig {
                n_records: 600,
                n_channels: 6,
                abnormal_fraction: 0.3,
                label_noise: 0.1,
                ..SynthConfig::default()
            }),
            frame: FrameConfig { frame_seconds: 5.0, overlap_seconds: 2.0, target_steps: 50 },
            hidden: 16,
            train: TrainConfig { epochs: 30, batch_size: 8, early_stop_patience: None, ..TrainConfig::default() },
            embedding: EmbeddingConfig { m: 10, ..EmbeddingConfig::default() },
            ..Self::default()
        }
    }

    /// Copy with the master seed pushed into every seeded component.
    pub fn seeded(&self) -> Self {
        let mut c = self.clone();
        c.train.seed = c.seed;
        c.forest.seed = c.seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.layers == 0 {
            return Err(Error::Config("hidden size and layer count must be positive".into()));
        }
        if self.embedding.m == 0 || self.embedding.m > self.frame.target_steps {
            return Err(Error::Config(format!(
                "interpolation factor {} must lie in 1..={}",
                self.embedding.m, self.frame.target_steps
            )));
        }
        if self.forest.n_trees == 0 {
            return Err(Error::Config("forest needs at least one tree".into()));
        }
        if self.data_dir.is_none() && self.synthetic.is_none() {
            return Err(Error::Config("no dataset: give a data directory or enable synthetic data".into()));
        }
        self.train.validate()
    }

    /// Display key for result rows.
    pub fn channels_key(&self) -> String {
        self.channels.replace(',', "+")
    }
}

/// Loads the configured dataset and applies the task's labelling.
pub fn load_records(cfg: &PipelineConfig) -> Result<Vec<RawRecord<f64>>> {
    let records = match (&cfg.data_dir, &cfg.synthetic) {
        (Some(dir), _) => load_dir(dir)?,
        (None, Some(syn)) => generate_synthetic(syn, &mut SeededRng::new(cfg.seed).derive(10))?,
        (None, None) => return Err(Error::Config("no dataset configured".into())),
    };
    match &cfg.task {
        Task::NormalAbnormal => Ok(records),
        Task::Disease(tag) => {
            let kept: Vec<_> = records
                .into_iter()
                .filter_map(|mut r| {
                    let label = match r.diagnosis.as_deref() {
                        Some(d) if d == tag => Label::Abnormal,
                        Some(HEALTHY) => Label::Normal,
                        _ => return None,
                    };
                    r.label = Some(label);
                    Some(r)
                })
                .collect();
            if kept.is_empty() {
                return Err(Error::Data(format!("no records tagged {tag:?} or {HEALTHY:?}")));
            }
            Ok(kept)
        }
    }
}

/// Full-channel frames split into train and test; normalization is not
/// applied yet.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub channels: ChannelConfig,
    pub train: FrameTensor<f64>,
    pub test: FrameTensor<f64>,
}

/// Record leads minus any Frank leads that were not explicitly selected.
fn default_full_set(available: &[String], selected: &[String]) -> Vec<String> {
    let kept: Vec<String> = available
        .iter()
        .filter(|c| !FRANK_LEADS.contains(&c.as_str()) || selected.contains(c))
        .cloned()
        .collect();
    if kept.is_empty() {
        available.to_vec()
    } else {
        kept
    }
}

pub fn prepare(cfg: &PipelineConfig) -> Result<Prepared> {
    let records = load_records(cfg).map_err(|e| e.in_stage("ingest"))?;
    let inner = || -> Result<Prepared> {
        let selected = resolve_channels(&cfg.channels)?;
        let full = match &cfg.full_channels {
            Some(f) => f.clone(),
            None => default_full_set(&records[0].channels, &selected),
        };
        let channels = ChannelConfig::new(selected, full)?;
        let frames = FrameTensor::from_records(&records, &channels.full, &cfg.frame)?;
        let mut rng = SeededRng::new(cfg.seed).derive(0);
        let (train, test) = split(&frames, cfg.split, cfg.train_fraction, &mut rng)?;
        info!("{} train / {} test frames, {} channels", train.len(), test.len(), channels.total());
        Ok(Prepared { channels, train, test })
    };
    inner().map_err(|e| e.in_stage("preprocess"))
}

/// Random access to frames, one channel subset at a time.
pub trait FrameSource: Sync {
    fn channel_names(&self) -> &[String];
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn steps(&self) -> usize;
    /// `None` for unlabeled frames.
    fn label(&self, n: usize) -> Option<Label>;
    fn provenance(&self, n: usize) -> Provenance;
    /// Frame `n` restricted to the columns `channels`, as `[T, channels.len()]`.
    fn read(&self, n: usize, channels: &[usize]) -> Tensor<f64>;
}

impl FrameSource for FrameTensor<f64> {
    fn channel_names(&self) -> &[String] {
        &self.channel_names
    }
    fn len(&self) -> usize {
        FrameTensor::len(self)
    }
    fn steps(&self) -> usize {
        FrameTensor::steps(self)
    }
    fn label(&self, n: usize) -> Option<Label> {
        self.labeled[n].then_some(self.labels[n])
    }
    fn provenance(&self, n: usize) -> Provenance {
        self.provenance[n].clone()
    }
    fn read(&self, n: usize, channels: &[usize]) -> Tensor<f64> {
        let k = self.width();
        let row = self.frames.row(n);
        let data = row.chunks(k).flat_map(|r| channels.iter().map(move |&c| r[c])).collect();
        Tensor::new(vec![self.steps(), channels.len()], data).expect("frame shape")
    }
}

/// Labelled frames of `source` restricted to `names` and normalized with
/// the matching entries of `norm` (fitted on `full`).
pub fn limited_frames(
    source: &dyn FrameSource,
    names: &[String],
    norm: &NormStats,
    full: &[String],
) -> Result<FrameTensor<f64>> {
    let cols = channel_indices(source.channel_names(), names)?;
    let rows: Vec<usize> = (0..source.len()).filter(|&n| source.label(n).is_some()).collect();
    if rows.is_empty() {
        return Err(Error::Data("no labelled frames to evaluate".into()));
    }
    let steps = source.steps();
    let mut data = Vec::with_capacity(rows.len() * steps * cols.len());
    for &n in &rows {
        data.extend(source.read(n, &cols).into_data());
    }
    let frames = FrameTensor {
        frames: Tensor::new(vec![rows.len(), steps, cols.len()], data)?,
        labels: rows.iter().map(|&n| source.label(n).expect("labelled")).collect(),
        labeled: vec![true; rows.len()],
        channel_names: names.to_vec(),
        provenance: rows.iter().map(|&n| source.provenance(n)).collect(),
    };
    let stats = norm.restrict(full, names)?;
    Ok(normalize(&frames, Some(&stats))?.0)
}

fn require<'a, T>(v: &'a Option<T>, what: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| Error::Config(format!("checkpoint has no {what}")))
}

/// Stage 1 on normalized full-channel training frames (labelled or not).
pub fn train_stage1(
    cfg: &PipelineConfig,
    channels: &ChannelConfig,
    train_norm: &FrameTensor<f64>,
) -> Result<(Seq2SeqModel<f64>, TrainReport)> {
    let cfg = cfg.seeded();
    let x_hat = restrict_channels(train_norm, channels)?;
    let dims = ModelDims {
        limited_channels: channels.limited(),
        channels: channels.total(),
        hidden: cfg.hidden,
        layers: cfg.layers,
        attention: cfg.attention,
    };
    let mut model = Seq2SeqModel::init(dims, &mut SeededRng::new(cfg.seed).derive(1))?;
    let report = train_generative(&mut model, &x_hat, train_norm, &cfg.train)?;
    info!(
        "stage 1: loss {:.5} -> {:.5} over {} epochs",
        report.initial_loss,
        report.final_loss(),
        report.history.len()
    );
    Ok((model, report))
}

/// Embeds the labelled frames of `source` through the checkpoint's encoder.
pub fn embed_limited(ckpt: &Checkpoint<f64>, source: &dyn FrameSource) -> Result<EmbeddedFeatures<f64>> {
    let model = require(&ckpt.generator, "generator")?;
    let norm = require(&ckpt.norm, "normalization statistics")?;
    let emb = require(&ckpt.embedding, "embedding config")?;
    let frames = limited_frames(source, &ckpt.channels.selected, norm, &ckpt.channels.full)?;
    embed_dataset(model, &frames, emb)
}

pub fn train_stage2(cfg: &PipelineConfig, features: &EmbeddedFeatures<f64>) -> Result<RandomForest> {
    fit_forest(&features.features, &features.labels, &cfg.seeded().forest)
}

pub fn train_baseline(
    cfg: &PipelineConfig,
    channels: &ChannelConfig,
    train_norm: &FrameTensor<f64>,
) -> Result<(RnnClassifier<f64>, TrainReport)> {
    let cfg = cfg.seeded();
    let x_hat = restrict_channels(train_norm, channels)?;
    let mut model = RnnClassifier::init(
        channels.limited(),
        cfg.hidden,
        cfg.layers,
        cfg.baseline_pooling,
        &mut SeededRng::new(cfg.seed).derive(2),
    )?;
    let report = train_rnn_classifier(&mut model, &x_hat, &cfg.train)?;
    Ok((model, report))
}

/// Test-set reports for the proposed pipeline and, when present, the baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub proposed: EvalReport,
    pub baseline: Option<EvalReport>,
}

pub fn predict_proposed(ckpt: &Checkpoint<f64>, source: &dyn FrameSource) -> Result<(Vec<f64>, Vec<Label>)> {
    let forest = require(&ckpt.forest, "forest")?;
    let feats = embed_limited(ckpt, source)?;
    Ok((forest.predict_proba(&feats.features)?, feats.labels))
}

pub fn predict_baseline(ckpt: &Checkpoint<f64>, source: &dyn FrameSource) -> Result<(Vec<f64>, Vec<Label>)> {
    let model = require(&ckpt.classifier, "baseline classifier")?;
    let norm = require(&ckpt.norm, "normalization statistics")?;
    let frames = limited_frames(source, &ckpt.channels.selected, norm, &ckpt.channels.full)?;
    Ok((model.predict_scores(&frames)?, frames.labels))
}

/// Scores the labelled frames of `source` with everything the checkpoint holds.
pub fn evaluate(ckpt: &Checkpoint<f64>, source: &dyn FrameSource) -> Result<Evaluation> {
    let (scores, labels) = predict_proposed(ckpt, source)?;
    let proposed = EvalReport::from_scores(&scores, &labels)?;
    let baseline = match &ckpt.classifier {
        Some(_) => {
            let (s, l) = predict_baseline(ckpt, source)?;
            Some(EvalReport::from_scores(&s, &l)?)
        }
        None => None,
    };
    Ok(Evaluation { proposed, baseline })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunOutcome {
    pub channels_key: String,
    pub selected: Vec<String>,
    pub task: Task,
    pub n_train_frames: usize,
    pub n_test_frames: usize,
    pub generator_history: TrainReport,
    pub baseline_history: Option<TrainReport>,
    pub evaluation: Evaluation,
    pub config_hash: String,
}

impl RunOutcome {
    pub fn table1_row(&self) -> String {
        format!(
            "{},{},{}",
            self.channels_key,
            fmt_opt(self.evaluation.baseline.as_ref().and_then(|b| b.auroc)),
            fmt_opt(self.evaluation.proposed.auroc)
        )
    }

    pub fn table2_row(&self, disease: &str) -> String {
        let p = &self.evaluation.proposed;
        format!(
            "{disease},{},{:.2},{},{}",
            self.channels_key,
            p.accuracy,
            p.sensitivity.map(|v| format!("{v:.2}")).unwrap_or_default(),
            p.specificity.map(|v| format!("{v:.2}")).unwrap_or_default()
        )
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Runs both stages, evaluates on the held-out split and, with `out`, writes
/// the checkpoint, loss histories and reports there as each stage finishes.
pub fn run_pipeline(cfg: &PipelineConfig, out: Option<&Path>) -> Result<(RunOutcome, Checkpoint<f64>)> {
    cfg.validate()?;
    let cfg = cfg.seeded();
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write(&dir.join("config.json"), serde_json::to_vec_pretty(&cfg)?)?;
    }
    let prep = prepare(&cfg)?;
    let (train_norm, norm) = normalize(&prep.train, None).map_err(|e| e.in_stage("preprocess"))?;

    let (model, gen_report) = train_stage1(&cfg, &prep.channels, &train_norm).map_err(|e| e.in_stage("train-gen"))?;
    if let Some(dir) = out {
        write(&dir.join("generator_history.csv"), gen_report.history_csv())?;
    }
    let mut ckpt = Checkpoint::new(prep.channels.clone(), cfg.frame);
    ckpt.norm = Some(norm);
    ckpt.embedding = Some(cfg.embedding);
    ckpt.generator = Some(model);
    ckpt.config_hash = config_hash(&cfg)?;

    let feats = embed_limited(&ckpt, &prep.train).map_err(|e| e.in_stage("embed"))?;
    ckpt.forest = Some(train_stage2(&cfg, &feats).map_err(|e| e.in_stage("train-clf"))?);

    let baseline_history = if cfg.with_baseline {
        let (clf, rep) = train_baseline(&cfg, &prep.channels, &train_norm).map_err(|e| e.in_stage("train-baseline"))?;
        if let Some(dir) = out {
            write(&dir.join("baseline_history.csv"), rep.history_csv())?;
        }
        ckpt.classifier = Some(clf);
        Some(rep)
    } else {
        None
    };
    if let Some(dir) = out {
        ckpt.save(&dir.join("checkpoint"))?;
    }

    let evaluation = evaluate(&ckpt, &prep.test).map_err(|e| e.in_stage("evaluate"))?;
    let outcome = RunOutcome {
        channels_key: cfg.channels_key(),
        selected: prep.channels.selected.clone(),
        task: cfg.task.clone(),
        n_train_frames: prep.train.len(),
        n_test_frames: prep.test.len(),
        generator_history: gen_report,
        baseline_history,
        evaluation,
        config_hash: ckpt.config_hash.clone(),
    };
    if let Some(dir) = out {
        write(&dir.join("report.json"), serde_json::to_vec_pretty(&outcome.evaluation)?)?;
        write(&dir.join("results.csv"), format!("{TABLE1_HEADER}\n{}\n", outcome.table1_row()))?;
    }
    Ok((outcome, ckpt))
}

/// Both results tables over the full experiment matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Matrix {
    pub table1: Vec<RunOutcome>,
    pub table2: Vec<RunOutcome>,
}

impl Matrix {
    pub fn table1_csv(&self) -> String {
        let mut s = format!("{TABLE1_HEADER}\n");
        for r in &self.table1 {
            s.push_str(&r.table1_row());
            s.push('\n');
        }
        s
    }

    pub fn table2_csv(&self) -> String {
        let mut s = format!("{TABLE2_HEADER}\n");
        for (r, (_, display)) in self.table2.iter().zip(TABLE2_DISEASES) {
            s.push_str(&r.table2_row(display));
            s.push('\n');
        }
        s
    }
}

/// Runs every normal/abnormal channel configuration and every disease task,
/// writing each run under `out/<key>/` and the tables under `out/`.
pub fn run_matrix(base: &PipelineConfig, out: Option<&Path>) -> Result<Matrix> {
    let sub = |key: &str| out.map(|d| d.join(key));
    let mut table1 = Vec::new();
    for name in TABLE1_CONFIGS {
        let cfg = PipelineConfig { channels: name.into(), task: Task::NormalAbnormal, ..base.clone() };
        info!("experiment {name}");
        table1.push(run_pipeline(&cfg, sub(name).as_deref())?.0);
    }
    let mut table2 = Vec::new();
    for (tag, _) in TABLE2_DISEASES {
        let cfg = PipelineConfig {
            channels: tag.into(),
            task: Task::Disease(tag.into()),
            with_baseline: false,
            ..base.clone()
        };
        info!("experiment disease {tag}");
        let key = format!("disease_{tag}");
        table2.push(run_pipeline(&cfg, sub(&key).as_deref())?.0);
    }
    let m = Matrix { table1, table2 };
    if let Some(dir) = out {
        write(&dir.join("table1.csv"), m.table1_csv())?;
        write(&dir.join("table2.csv"), m.table2_csv())?;
        write(&dir.join("results.json"), serde_json::to_vec_pretty(&m)?)?;
    }
    Ok(m)
}

/// Frame metadata stored next to a frame tensor file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FrameManifest {
    channel_names: Vec<String>,
    labels: Vec<Option<Label>>,
    provenance: Vec<Provenance>,
}

/// Writes `<stem>.lmt` (frames) and `<stem>.json` (labels, provenance).
pub fn save_frames(dir: &Path, stem: &str, frames: &FrameTensor<f64>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join(format!("{stem}.lmt")), frames.frames.to_bytes())?;
    let man = FrameManifest {
        channel_names: frames.channel_names.clone(),
        labels: (0..frames.len()).map(|n| FrameSource::label(frames, n)).collect(),
        provenance: frames.provenance.clone(),
    };
    write(&dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(&man)?)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn load_frames(dir: &Path, stem: &str) -> Result<FrameTensor<f64>> {
    let (frames, _) = Tensor::<f64>::from_bytes(&read(&dir.join(format!("{stem}.lmt")))?)?;
    let man: FrameManifest = serde_json::from_slice(&read(&dir.join(format!("{stem}.json")))?)?;
    if frames.rank() != 3 || frames.dim(0) != man.labels.len() || frames.dim(2) != man.channel_names.len() {
        return Err(Error::Integrity(format!(
            "frame tensor {:?} does not match {} labels over {} channels",
            frames.shape(),
            man.labels.len(),
            man.channel_names.len()
        )));
    }
    Ok(FrameTensor {
        frames,
        labels: man.labels.iter().map(|l| l.unwrap_or(Label::Normal)).collect(),
        labeled: man.labels.iter().map(Option::is_some).collect(),
        channel_names: man.channel_names,
        provenance: man.provenance,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FeatureManifest {
    labels: Vec<Label>,
    provenance: Vec<Provenance>,
}

/// Writes `<stem>.lmt` (the `[N, M·h]` matrix) and `<stem>.json` (labels).
pub fn save_features(dir: &Path, stem: &str, feats: &EmbeddedFeatures<f64>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join(format!("{stem}.lmt")), feats.features.to_bytes())?;
    let man = FeatureManifest { labels: feats.labels.clone(), provenance: feats.provenance.clone() };
    write(&dir.join(format!("{stem}.json")), serde_json::to_vec_pretty(&man)?)
}

pub fn load_features(dir: &Path, stem: &str) -> Result<EmbeddedFeatures<f64>> {
    let (features, _) = Tensor::<f64>::from_bytes(&read(&dir.join(format!("{stem}.lmt")))?)?;
    let man: FeatureManifest = serde_json::from_slice(&read(&dir.join(format!("{stem}.json")))?)?;
    if features.rank() != 2 || features.dim(0) != man.labels.len() {
        return Err(Error::Integrity(format!(
            "feature matrix {:?} does not match {} labels",
            features.shape(),
            man.labels.len()
        )));
    }
    Ok(EmbeddedFeatures { features, labels: man.labels, provenance: man.provenance })
}
