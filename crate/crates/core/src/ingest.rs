//! Record loading, preprocessing (normalize, frame, downsample), channel
//! restriction, dataset splitting, and a synthetic ECG-like generator.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// The 12 standard leads, in conventional order.
pub const STANDARD_LEADS: [&str; 12] = [
    "I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6",
];

/// Frank orthogonal leads; parsed but not part of the default full set.
pub const FRANK_LEADS: [&str; 3] = ["vx", "vy", "vz"];

pub const STD_FLOOR: f64 = 1e-8;

pub fn is_known_channel(name: &str) -> bool {
    STANDARD_LEADS.contains(&name) || FRANK_LEADS.contains(&name)
}

/// Binary class. Abnormal (disease) is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Normal,
    Abnormal,
}

impl Label {
    pub fn from_i64(v: i64) -> Option<Self> {
        match v {
            -1 => Some(Label::Normal),
            1 => Some(Label::Abnormal),
            _ => None,
        }
    }

    pub fn as_i8(self) -> i8 {
        match self {
            Label::Normal => -1,
            Label::Abnormal => 1,
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Abnormal
    }

    pub fn flipped(self) -> Self {
        match self {
            Label::Normal => Label::Abnormal,
            Label::Abnormal => Label::Normal,
        }
    }
}

impl Serialize for Label {
    fn serialize<Se: serde::Serializer>(&self, s: Se) -> std::result::Result<Se::Ok, Se::Error> {
        s.serialize_i8(self.as_i8())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = i64::deserialize(d)?;
        Label::from_i64(v).ok_or_else(|| serde::de::Error::custom(format!("label {v} not in {{-1,+1}}")))
    }
}

/// JSON sidecar accompanying a CSV record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub record_id: String,
    pub sampling_rate_hz: u32,
    /// Absent or null marks an unlabeled record (usable for Stage 1 only).
    #[serde(default)]
    pub label: Option<Label>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnosis: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord<S> {
    pub record_id: String,
    pub sampling_rate_hz: u32,
    pub channels: Vec<String>,
    /// `[length, channels]`, millivolts.
    pub samples: Tensor<S>,
    pub label: Option<Label>,
    pub diagnosis: Option<String>,
}

impl<S: Scalar> RawRecord<S> {
    pub fn len(&self) -> usize {
        self.samples.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sidecar(&self) -> Sidecar {
        Sidecar {
            record_id: self.record_id.clone(),
            sampling_rate_hz: self.sampling_rate_hz,
            label: self.label,
            diagnosis: self.diagnosis.clone(),
        }
    }

    /// Writes `<dir>/<record_id>.csv` and its `.json` sidecar.
    pub fn write_csv(&self, dir: &Path) -> Result<PathBuf> {
        let csv_path = dir.join(format!("{}.csv", self.record_id));
        let mut text = self.channels.join(",");
        text.push('\n');
        let k = self.channels.len();
        for row in self.samples.data().chunks(k) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            text.push_str(&cells.join(","));
            text.push('\n');
        }
        fs::write(&csv_path, text).map_err(|e| Error::io(&csv_path, e))?;
        let side_path = csv_path.with_extension("json");
        let json = serde_json::to_string_pretty(&self.sidecar())?;
        fs::write(&side_path, json).map_err(|e| Error::io(&side_path, e))?;
        Ok(csv_path)
    }
}

/// Parses a CSV record plus its sidecar (`<stem>.json` next to the CSV).
pub fn parse_record<S: Scalar>(path: &Path) -> Result<RawRecord<S>> {
    let side_path = path.with_extension("json");
    let side_text = fs::read_to_string(&side_path).map_err(|_| Error::Parse {
        path: side_path.clone(),
        line: 0,
        message: "missing sidecar JSON".into(),
    })?;
    let sidecar: Sidecar = serde_json::from_str(&side_text).map_err(|e| Error::Parse {
        path: side_path.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if sidecar.sampling_rate_hz == 0 {
        return Err(Error::Parse {
            path: side_path,
            line: 0,
            message: "sampling_rate_hz must be positive".into(),
        });
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv_text(path, &text, sidecar)
}

fn parse_csv_text<S: Scalar>(path: &Path, text: &str, sidecar: Sidecar) -> Result<RawRecord<S>> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let mut names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let skip_time = names.first().is_some_and(|n| n.eq_ignore_ascii_case("time"));
    if skip_time {
        names.remove(0);
    }
    if names.is_empty() {
        return Err(err(1, "no channel columns".into()));
    }
    let mut seen = BTreeSet::new();
    for n in &names {
        if !is_known_channel(n) {
            return Err(err(1, format!("unknown channel name {n:?}")));
        }
        if !seen.insert(n.as_str()) {
            return Err(err(1, format!("duplicate channel {n:?}")));
        }
    }
    let width = names.len() + usize::from(skip_time);
    let mut data = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != width {
            return Err(err(
                line_no,
                format!("expected {width} cells, found {}", cells.len()),
            ));
        }
        for cell in &cells[usize::from(skip_time)..] {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| err(line_no, format!("non-numeric cell {:?}", cell.trim())))?;
            if !v.is_finite() {
                return Err(err(line_no, format!("non-finite cell {:?}", cell.trim())));
            }
            data.push(S::lit(v));
        }
    }
    let rows = data.len() / names.len();
    if rows == 0 {
        return Err(err(2, "no samples".into()));
    }
    Ok(RawRecord {
        record_id: sidecar.record_id,
        sampling_rate_hz: sidecar.sampling_rate_hz,
        samples: Tensor::new(vec![rows, names.len()], data)?,
        channels: names,
        label: sidecar.label,
        diagnosis: sidecar.diagnosis,
    })
}

/// Loads every `*.csv` in `dir` (sorted by file name).
pub fn load_dir<S: Scalar>(dir: &Path) -> Result<Vec<RawRecord<S>>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("no CSV records in {}", dir.display())));
    }
    paths.iter().map(|p| parse_record(p)).collect()
}

/// Limited channel subset `selected` of the `full` channel list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub selected: Vec<String>,
    pub full: Vec<String>,
}

impl ChannelConfig {
    pub fn new(selected: Vec<String>, full: Vec<String>) -> Result<Self> {
        let uniq = |v: &[String]| v.iter().collect::<BTreeSet<_>>().len() == v.len();
        if selected.is_empty() || !uniq(&selected) || !uniq(&full) {
            return Err(Error::Config(format!(
                "channel lists must be non-empty and duplicate-free: {selected:?} of {full:?}"
            )));
        }
        if let Some(missing) = selected.iter().find(|c| !full.contains(c)) {
            return Err(Error::Config(format!(
                "selected channel {missing} not in full set {full:?}"
            )));
        }
        Ok(Self { selected, full })
    }

    pub fn limited(&self) -> usize {
        self.selected.len()
    }

    pub fn total(&self) -> usize {
        self.full.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Provenance {
    pub record_id: String,
    pub start_sample: usize,
}

/// A batch of fixed-length frames, `[N, T, K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTensor<S> {
    pub frames: Tensor<S>,
    pub labels: Vec<Label>,
    /// Frames from unlabeled records carry a placeholder label and `false` here.
    pub labeled: Vec<bool>,
    pub channel_names: Vec<String>,
    pub provenance: Vec<Provenance>,
}

/// One cut of a record before downsampling.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFrame<S> {
    pub record_id: String,
    pub start_sample: usize,
    pub samples: Tensor<S>,
    pub label: Option<Label>,
}

/// Cuts `record` into windows of `frame_seconds` advancing by
/// `frame_seconds - overlap_seconds`. A trailing partial window is dropped.
pub fn frame<S: Scalar>(
    record: &RawRecord<S>,
    frame_seconds: f64,
    overlap_seconds: f64,
) -> Result<Vec<RawFrame<S>>> {
    if !(frame_seconds > 0.0 && overlap_seconds >= 0.0 && overlap_seconds < frame_seconds) {
        return Err(Error::Config(format!(
            "frame {frame_seconds}s with overlap {overlap_seconds}s"
        )));
    }
    let rate = f64::from(record.sampling_rate_hz);
    let len = (frame_seconds * rate).round() as usize;
    let hop = ((frame_seconds - overlap_seconds) * rate).round() as usize;
    if len == 0 || hop == 0 {
        return Err(Error::Config("frame shorter than one sample".into()));
    }
    let total = record.len();
    if total < len {
        warn!(
            "record {} has {total} samples, shorter than one {len}-sample frame",
            record.record_id
        );
        return Ok(Vec::new());
    }
    let k = record.channels.len();
    let count = (total - len) / hop + 1;
    (0..count)
        .map(|i| {
            let start = i * hop;
            let data = record.samples.data()[start * k..(start + len) * k].to_vec();
            Ok(RawFrame {
                record_id: record.record_id.clone(),
                start_sample: start,
                samples: Tensor::new(vec![len, k], data)?,
                label: record.label,
            })
        })
        .collect()
}

/// Mean-pools `[L, K]` down to `[target_steps, K]`; `L` must be a multiple
/// of `target_steps`.
pub fn downsample<S: Scalar>(frame: &Tensor<S>, target_steps: usize) -> Result<Tensor<S>> {
    let (len, k) = (frame.dim(0), frame.dim(1));
    if target_steps == 0 || len % target_steps != 0 {
        return Err(Error::Dimension(format!(
            "cannot downsample {len} steps to {target_steps}"
        )));
    }
    let w = len / target_steps;
    let inv = S::one() / S::lit(w as f64);
    let src = frame.data();
    let mut out = vec![S::zero(); target_steps * k];
    for t in 0..target_steps {
        for c in 0..k {
            let mut acc = S::zero();
            for j in 0..w {
                acc += src[(t * w + j) * k + c];
            }
            out[t * k + c] = acc * inv;
        }
    }
    Tensor::new(vec![target_steps, k], out)
}

/// Column indices of `wanted` within `have`, or an error naming the first
/// missing channel.
pub fn channel_indices(have: &[String], wanted: &[String]) -> Result<Vec<usize>> {
    wanted
        .iter()
        .map(|w| {
            have.iter()
                .position(|h| h == w)
                .ok_or_else(|| Error::Data(format!("channel {w} not present in {have:?}")))
        })
        .collect()
}

fn select_columns<S: Scalar>(x: &Tensor<S>, k: usize, cols: &[usize]) -> Vec<S> {
    x.data()
        .chunks(k)
        .flat_map(|row| cols.iter().map(move |&c| row[c]))
        .collect()
}

/// Preprocessing knobs shared by `prepare` and `run`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameConfig {
    pub frame_seconds: f64,
    pub overlap_seconds: f64,
    pub target_steps: usize,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self {
            frame_seconds: 5.0,
            overlap_seconds: 2.0,
            target_steps: 500,
        }
    }
}

impl<S: Scalar> FrameTensor<S> {
    /// Frames and downsamples every record, reordering columns to `channels`.
    /// Output is ordered by `(record_id, start_sample)`.
    pub fn from_records(
        records: &[RawRecord<S>],
        channels: &[String],
        cfg: &FrameConfig,
    ) -> Result<Self> {
        let mut cut: Vec<(Provenance, Tensor<S>, Option<Label>)> = Vec::new();
        for rec in records {
            let cols = channel_indices(&rec.channels, channels)
                .map_err(|e| Error::Data(format!("record {}: {e}", rec.record_id)))?;
            for f in frame(rec, cfg.frame_seconds, cfg.overlap_seconds)? {
                let k = rec.channels.len();
                let picked = select_columns(&f.samples, k, &cols);
                let t = Tensor::new(vec![f.samples.dim(0), cols.len()], picked)?;
                cut.push((
                    Provenance {
                        record_id: f.record_id,
                        start_sample: f.start_sample,
                    },
                    downsample(&t, cfg.target_steps)?,
                    f.label,
                ));
            }
        }
        if cut.is_empty() {
            return Err(Error::Data("no complete frames in any record".into()));
        }
        cut.sort_by(|a, b| a.0.cmp(&b.0));
        let n = cut.len();
        let mut data = Vec::with_capacity(n * cfg.target_steps * channels.len());
        let mut labels = Vec::with_capacity(n);
        let mut labeled = Vec::with_capacity(n);
        let mut provenance = Vec::with_capacity(n);
        for (p, t, l) in cut {
            data.extend_from_slice(t.data());
            labels.push(l.unwrap_or(Label::Normal));
            labeled.push(l.is_some());
            provenance.push(p);
        }
        Ok(Self {
            frames: Tensor::new(vec![n, cfg.target_steps, channels.len()], data)?,
            labels,
            labeled,
            channel_names: channels.to_vec(),
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn steps(&self) -> usize {
        self.frames.dim(1)
    }

    pub fn width(&self) -> usize {
        self.frames.dim(2)
    }

    /// Frame `n` as `[T, K]`.
    pub fn frame(&self, n: usize) -> Tensor<S> {
        Tensor::new(vec![self.steps(), self.width()], self.frames.row(n).to_vec())
            .expect("frame slice")
    }

    /// Rows at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Data("empty frame selection".into()));
        }
        let mut data = Vec::with_capacity(indices.len() * self.steps() * self.width());
        for &i in indices {
            data.extend_from_slice(self.frames.row(i));
        }
        Ok(Self {
            frames: Tensor::new(vec![indices.len(), self.steps(), self.width()], data)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            labeled: indices.iter().map(|&i| self.labeled[i]).collect(),
            channel_names: self.channel_names.clone(),
            provenance: indices.iter().map(|&i| self.provenance[i].clone()).collect(),
        })
    }

    /// Only frames carrying a label.
    pub fn labeled_only(&self) -> Result<Self> {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.labeled[i]).collect();
        self.select(&idx)
    }

    pub fn labels_i8(&self) -> Vec<i8> {
        self.labels.iter().map(|l| l.as_i8()).collect()
    }
}

/// Per-channel z-score statistics (population standard deviation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn fit<S: Scalar>(data: &FrameTensor<S>) -> Self {
        let k = data.width();
        let count = (data.len() * data.steps()) as f64;
        let mut mean = vec![0.0; k];
        for row in data.frames.data().chunks(k) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v.f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; k];
        for row in data.frames.data().chunks(k) {
            for ((s, &v), m) in var.iter_mut().zip(row).zip(&mean) {
                let d = v.f64() - m;
                *s += d * d;
            }
        }
        let std = var.iter().map(|s| (s / count).sqrt().max(STD_FLOOR)).collect();
        Self { mean, std }
    }
}

impl NormStats {
    /// Statistics for `to`, looked up by name in the channels `from` they
    /// were fitted on.
    pub fn restrict(&self, from: &[String], to: &[String]) -> Result<Self> {
        let cols = channel_indices(from, to)?;
        Ok(Self {
            mean: cols.iter().map(|&c| self.mean[c]).collect(),
            std: cols.iter().map(|&c| self.std[c]).collect(),
        })
    }
}

/// Z-scores each channel. Statistics are fitted on `data` unless supplied.
/// Channels whose std sits at the floor map to exactly zero.
pub fn normalize<S: Scalar>(
    data: &FrameTensor<S>,
    stats: Option<&NormStats>,
) -> Result<(FrameTensor<S>, NormStats)> {
    let stats = match stats {
        Some(s) => s.clone(),
        None => NormStats::fit(data),
    };
    let k = data.width();
    if stats.mean.len() != k || stats.std.len() != k {
        return Err(Error::Dimension(format!(
            "normalization stats for {} channels applied to {k}",
            stats.mean.len()
        )));
    }
    let mut out = data.clone();
    for row in out.frames.data_mut().chunks_mut(k) {
        for (c, v) in row.iter_mut().enumerate() {
            let sd = stats.std[c];
            *v = if sd <= STD_FLOOR {
                S::zero()
            } else {
                S::lit((v.f64() - stats.mean[c]) / sd)
            };
        }
    }
    out.frames.ensure_finite("normalize")?;
    Ok((out, stats))
}

/// Slices the configured channels, in configuration order.
pub fn restrict_channels<S: Scalar>(
    data: &FrameTensor<S>,
    config: &ChannelConfig,
) -> Result<FrameTensor<S>> {
    restrict_to(data, &config.selected)
}

pub fn restrict_to<S: Scalar>(data: &FrameTensor<S>, channels: &[String]) -> Result<FrameTensor<S>> {
    let cols = channel_indices(&data.channel_names, channels)?;
    let picked = select_columns(&data.frames, data.width(), &cols);
    Ok(FrameTensor {
        frames: Tensor::new(vec![data.len(), data.steps(), cols.len()], picked)?,
        labels: data.labels.clone(),
        labeled: data.labeled.clone(),
        channel_names: channels.to_vec(),
        provenance: data.provenance.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// No record contributes frames to both sides.
    Record,
    /// Frames shuffled individually.
    Frame,
}

/// Deterministic train/test split. `fraction` is the training share.
pub fn split<S: Scalar>(
    data: &FrameTensor<S>,
    mode: SplitMode,
    fraction: f64,
    rng: &mut SeededRng,
) -> Result<(FrameTensor<S>, FrameTensor<S>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction {fraction} not in (0, 1)")));
    }
    let (mut train_idx, mut test_idx) = match mode {
        SplitMode::Frame => {
            let n = data.len();
            if n < 2 {
                return Err(Error::Data("need at least 2 frames to split".into()));
            }
            let mut idx: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut idx);
            let n_train = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
            let test = idx.split_off(n_train);
            (idx, test)
        }
        SplitMode::Record => {
            let mut by_record: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, p) in data.provenance.iter().enumerate() {
                by_record.entry(p.record_id.as_str()).or_default().push(i);
            }
            let n = by_record.len();
            if n < 2 {
                return Err(Error::Data(format!(
                    "record split needs at least 2 records, found {n}"
                )));
            }
            let mut groups: Vec<Vec<usize>> = by_record.into_values().collect();
            rng.shuffle(&mut groups);
            let n_train = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
            let test: Vec<usize> = groups.split_off(n_train).into_iter().flatten().collect();
            (groups.into_iter().flatten().collect(), test)
        }
    };
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((data.select(&train_idx)?, data.select(&test_idx)?))
}

/// Parameters of the synthetic correlated-channel generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_records: usize,
    pub n_channels: usize,
    pub abnormal_fraction: f64,
    /// Probability of flipping a record's recorded label.
    pub label_noise: f64,
    pub duration_seconds: f64,
    pub sampling_rate_hz: u32,
    pub noise_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_records: 200,
            n_channels: 12,
            abnormal_fraction: 0.3,
            label_noise: 0.0,
            duration_seconds: 5.0,
            sampling_rate_hz: 100,
            noise_sigma: 0.05,
        }
    }
}

/// Channel names used by the generator: standard leads then Frank leads.
pub fn synthetic_channel_names(n: usize) -> Vec<String> {
    STANDARD_LEADS
        .iter()
        .chain(FRANK_LEADS.iter())
        .take(n)
        .map(|s| s.to_string())
        .collect()
}

/// Gaussian bump parameters relative to the R peak: (offset s, width s).
const P_WAVE: (f64, f64) = (-0.20, 0.025);
const Q_WAVE: (f64, f64) = (-0.03, 0.010);
const R_WAVE: (f64, f64) = (0.0, 0.012);
const S_WAVE: (f64, f64) = (0.03, 0.012);
const ST_SEG: (f64, f64) = (0.13, 0.045);
const T_WAVE: (f64, f64) = (0.26, 0.05);

/// Wave amplitudes of one latent source.
#[derive(Debug, Clone, Copy)]
struct Morphology {
    p: f64,
    q: f64,
    r: f64,
    s: f64,
    st: f64,
    t: f64,
    qrs_width: f64,
}

const SOURCE_A: Morphology = Morphology {
    p: 0.15,
    q: -0.10,
    r: 1.0,
    s: -0.25,
    st: 0.0,
    t: 0.30,
    qrs_width: 1.0,
};

const SOURCE_B: Morphology = Morphology {
    p: 0.08,
    q: -0.15,
    r: 0.55,
    s: -0.45,
    st: 0.0,
    t: 0.22,
    qrs_width: 1.0,
};

fn bump(t: f64, center: f64, width: f64) -> f64 {
    let z = (t - center) / width;
    (-0.5 * z * z).exp()
}

fn beat_value(dt: f64, m: &Morphology) -> f64 {
    let w = m.qrs_width;
    m.p * bump(dt, P_WAVE.0, P_WAVE.1)
        + m.q * bump(dt, Q_WAVE.0 * w, Q_WAVE.1 * w)
        + m.r * bump(dt, R_WAVE.0, R_WAVE.1 * w)
        + m.s * bump(dt, S_WAVE.0 * w, S_WAVE.1 * w)
        + m.st * bump(dt, ST_SEG.0, ST_SEG.1)
        + m.t * bump(dt, T_WAVE.0, T_WAVE.1)
}

/// Generates ECG-like records whose channels are fixed linear mixtures of two
/// latent sources sharing beat timing, plus white noise. Abnormal records get
/// an elevated ST segment and an attenuated P wave; half of them are tagged
/// `mi` (inverted T wave) and half `bbb` (widened QRS).
pub fn generate_synthetic(cfg: &SynthConfig, rng: &mut SeededRng) -> Result<Vec<RawRecord<f64>>> {
    let max = STANDARD_LEADS.len() + FRANK_LEADS.len();
    if cfg.n_channels < 2 || cfg.n_channels > max {
        return Err(Error::Config(format!(
            "synthetic data needs 2..={max} channels, got {}",
            cfg.n_channels
        )));
    }
    if !(0.0..=1.0).contains(&cfg.abnormal_fraction) || !(0.0..=1.0).contains(&cfg.label_noise) {
        return Err(Error::Config("fractions must lie in [0, 1]".into()));
    }
    let names = synthetic_channel_names(cfg.n_channels);
    let mut mix_rng = rng.derive(0);
    let mixing: Vec<(f64, f64)> = (0..cfg.n_channels)
        .map(|_| {
            let theta = mix_rng.uniform_range(0.0, std::f64::consts::FRAC_PI_2);
            let gain = mix_rng.uniform_range(0.6, 1.4);
            let sign = if mix_rng.bernoulli(0.5) { 1.0 } else { -1.0 };
            (sign * gain * theta.cos(), sign * gain * theta.sin())
        })
        .collect();
    let n_abnormal = (cfg.abnormal_fraction * cfg.n_records as f64).round() as usize;
    let mut is_abnormal: Vec<bool> = (0..cfg.n_records).map(|i| i < n_abnormal).collect();
    rng.derive(1).shuffle(&mut is_abnormal);

    let rate = f64::from(cfg.sampling_rate_hz);
    let len = (cfg.duration_seconds * rate).round() as usize;
    let width = format!("{}", cfg.n_records.saturating_sub(1)).len();
    let mut records = Vec::with_capacity(cfg.n_records);
    for (r, &abnormal) in is_abnormal.iter().enumerate() {
        let mut rr = rng.derive(100 + r as u64);
        let (mut a, mut b) = (SOURCE_A, SOURCE_B);
        let diagnosis = if abnormal {
            let st = rr.uniform_range(0.15, 0.35);
            a.st = st;
            b.st = 0.8 * st;
            a.p *= 0.3;
            b.p *= 0.3;
            if rr.bernoulli(0.5) {
                a.t *= -0.5;
                b.t *= -0.5;
                "mi"
            } else {
                a.qrs_width = 2.5;
                b.qrs_width = 2.5;
                "bbb"
            }
        } else {
            "healthy"
        };
        let gain = rr.uniform_range(0.8, 1.2);
        let period = 60.0 / rr.uniform_range(60.0, 90.0);
        let mut beats = Vec::new();
        let mut tb = rr.uniform_range(0.0, period) - period;
        let end = len as f64 / rate + period;
        while tb < end {
            beats.push(tb);
            tb += period * (1.0 + rr.uniform_range(-0.03, 0.03));
        }
        let mut data = Vec::with_capacity(len * cfg.n_channels);
        for i in 0..len {
            let t = i as f64 / rate;
            let (mut sa, mut sb) = (0.0, 0.0);
            for &bt in &beats {
                let dt = t - bt;
                if dt.abs() < 0.6 {
                    sa += beat_value(dt, &a);
                    sb += beat_value(dt, &b);
                }
            }
            for &(wa, wb) in &mixing {
                let noise = if cfg.noise_sigma > 0.0 {
                    cfg.noise_sigma * rr.normal()
                } else {
                    0.0
                };
                data.push(gain * (wa * sa + wb * sb) + noise);
            }
        }
        let truth = if abnormal { Label::Abnormal } else { Label::Normal };
        let label = if rr.bernoulli(cfg.label_noise) {
            truth.flipped()
        } else {
            truth
        };
        records.push(RawRecord {
            record_id: format!("syn{r:0width$}"),
            sampling_rate_hz: cfg.sampling_rate_hz,
            channels: names.clone(),
            samples: Tensor::new(vec![len, cfg.n_channels], data)?,
            label: Some(label),
            diagnosis: Some(diagnosis.to_string()),
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp_record(dir: &Path, name: &str, csv: &str, rate: u32) -> PathBuf {
        let p = dir.join(format!("{name}.csv"));
        fs::write(&p, csv).unwrap();
        let side = Sidecar {
            record_id: name.into(),
            sampling_rate_hz: rate,
            label: Some(Label::Abnormal),
            diagnosis: None,
        };
        fs::write(p.with_extension("json"), serde_json::to_string(&side).unwrap()).unwrap();
        p
    }

    fn record_from(len: usize, k: usize, rate: u32, f: impl Fn(usize, usize) -> f64) -> RawRecord<f64> {
        let data = (0..len).flat_map(|i| (0..k).map(move |c| (i, c))).map(|(i, c)| f(i, c)).collect();
        RawRecord {
            record_id: "r".into(),
            sampling_rate_hz: rate,
            channels: synthetic_channel_names(k),
            samples: Tensor::new(vec![len, k], data).unwrap(),
            label: Some(Label::Normal),
            diagnosis: None,
        }
    }

    #[test]
    fn parse_basic_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = tmp_record(dir.path(), "a", "V1,V2\n0.1,0.2\n0.3,0.4\n0.5,0.6\n", 500);
        let r: RawRecord<f64> = parse_record(&p).unwrap();
        assert_eq!(r.samples.shape(), &[3, 2]);
        assert_eq!(r.channels, vec!["V1", "V2"]);
        assert_eq!(r.samples.data()[3], 0.4);
        assert_eq!(r.label, Some(Label::Abnormal));
    }

    #[test]
    fn parse_drops_time_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = tmp_record(dir.path(), "b", "time,II\n0.0,1.5\n0.001,1.6\n", 1000);
        let r: RawRecord<f64> = parse_record(&p).unwrap();
        assert_eq!(r.channels, vec!["II"]);
        assert_eq!(r.samples.data(), &[1.5, 1.6]);
    }

    #[test]
    fn parse_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = tmp_record(dir.path(), "c", "V1,V2\n0.1,abc\n", 500);
        match parse_record::<f64>(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let p = tmp_record(dir.path(), "d", "V1,V2\n0.1,0.2\n0.3\n", 500);
        assert!(matches!(parse_record::<f64>(&p), Err(Error::Parse { line: 3, .. })));
        let p = tmp_record(dir.path(), "e", "V1,V9\n0.1,0.2\n", 500);
        assert!(matches!(parse_record::<f64>(&p), Err(Error::Parse { line: 1, .. })));
        let p = dir.path().join("f.csv");
        fs::write(&p, "V1\n1\n").unwrap();
        assert!(matches!(parse_record::<f64>(&p), Err(Error::Parse { .. })));
    }

    #[test]
    fn framing_counts() {
        let r = record_from(30_000, 1, 1000, |i, _| i as f64);
        let frames = frame(&r, 5.0, 2.0).unwrap();
        assert_eq!(frames.len(), 9);
        let starts: Vec<usize> = frames.iter().map(|f| f.start_sample).collect();
        assert_eq!(starts, (0..9).map(|i| i * 3000).collect::<Vec<_>>());
        assert!(frames.iter().all(|f| f.samples.dim(0) == 5000));
        assert_eq!(frame(&record_from(5000, 1, 1000, |_, _| 0.0), 5.0, 2.0).unwrap().len(), 1);
        assert!(frame(&record_from(4900, 1, 1000, |_, _| 0.0), 5.0, 2.0).unwrap().is_empty());
    }

    #[test]
    fn downsample_window_means() {
        let t = Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(downsample(&t, 2).unwrap().data(), &[1.5, 3.5]);
        let c = Tensor::filled(&[40, 2], 3.25);
        assert_eq!(downsample(&c, 8).unwrap(), Tensor::filled(&[8, 2], 3.25));
        assert!(matches!(downsample(&t, 3), Err(Error::Dimension(_))));
        // ramp 0..4999 pooled by 10: window j has mean 10j + 4.5
        let ramp = Tensor::new(vec![5000, 1], (0..5000).map(|i| i as f64).collect()).unwrap();
        let d = downsample(&ramp, 500).unwrap();
        for (j, &v) in d.data().iter().enumerate() {
            assert_eq!(v, 10.0 * j as f64 + 4.5);
        }
    }

    #[test]
    fn normalize_population_z_score() {
        let r = record_from(3, 2, 1, |i, c| if c == 0 { i as f64 + 1.0 } else { 5.0 });
        let ft = FrameTensor::from_records(
            &[r],
            &synthetic_channel_names(2),
            &FrameConfig { frame_seconds: 3.0, overlap_seconds: 0.0, target_steps: 3 },
        )
        .unwrap();
        let (z, stats) = normalize(&ft, None).unwrap();
        assert!((stats.mean[0] - 2.0).abs() < 1e-15);
        assert!((stats.std[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        let col0: Vec<f64> = z.frames.data().chunks(2).map(|r| r[0]).collect();
        let expect = 1.0 / (2.0f64 / 3.0).sqrt();
        assert!((col0[0] + expect).abs() < 1e-12 && col0[1].abs() < 1e-15 && (col0[2] - expect).abs() < 1e-12);
        assert!((expect - 1.2247).abs() < 1e-4);
        let col1: Vec<f64> = z.frames.data().chunks(2).map(|r| r[1]).collect();
        assert_eq!(col1, vec![0.0; 3]);
        let (z2, _) = normalize(&z, Some(&NormStats { mean: vec![0.0, 0.0], std: vec![1.0, 1.0] })).unwrap();
        for (a, b) in z.frames.data().iter().zip(z2.frames.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn synth_frames(n_records: usize, seed: u64) -> FrameTensor<f64> {
        let cfg = SynthConfig { n_records, n_channels: 12, ..Default::default() };
        let recs = generate_synthetic(&cfg, &mut SeededRng::new(seed)).unwrap();
        FrameTensor::from_records(
            &recs,
            &synthetic_channel_names(12),
            &FrameConfig { frame_seconds: 5.0, overlap_seconds: 2.0, target_steps: 50 },
        )
        .unwrap()
    }

    #[test]
    fn restrict_semantics() {
        let ft = synth_frames(3, 1);
        let cfg = ChannelConfig::new(vec!["V6".into(), "V1".into()], ft.channel_names.clone()).unwrap();
        let r = restrict_channels(&ft, &cfg).unwrap();
        assert_eq!(r.frames.shape(), &[ft.len(), 50, 2]);
        let v1 = ft.channel_names.iter().position(|c| c == "V1").unwrap();
        assert_eq!(r.frames.data()[1], ft.frames.data()[v1]);
        let full = restrict_to(&ft, &ft.channel_names).unwrap();
        assert_eq!(full, ft);
        let ii = restrict_to(&ft, &["II".to_string()]).unwrap();
        assert_eq!(ii.width(), 1);
        let nested = restrict_to(&restrict_to(&ft, &cfg.selected).unwrap(), &["V1".to_string()]).unwrap();
        assert_eq!(nested, restrict_to(&ft, &["V1".to_string()]).unwrap());
        let err = restrict_to(&ii, &["V3".to_string()]).unwrap_err().to_string();
        assert!(err.contains("V3"), "{err}");
    }

    #[test]
    fn record_split_is_disjoint_and_deterministic() {
        let ft = synth_frames(10, 2);
        let (tr, te) = split(&ft, SplitMode::Record, 0.8, &mut SeededRng::new(3)).unwrap();
        let ids = |f: &FrameTensor<f64>| f.provenance.iter().map(|p| p.record_id.clone()).collect::<BTreeSet<_>>();
        assert_eq!(ids(&tr).len(), 8);
        assert_eq!(ids(&te).len(), 2);
        assert!(ids(&tr).is_disjoint(&ids(&te)));
        let (tr2, te2) = split(&ft, SplitMode::Record, 0.8, &mut SeededRng::new(3)).unwrap();
        assert_eq!((tr, te), (tr2, te2));
        let one = ft.select(&[0]).unwrap();
        assert!(split(&one, SplitMode::Record, 0.5, &mut SeededRng::new(0)).is_err());
    }

    #[test]
    fn frame_split_sizes_follow_fraction() {
        // 8235 frames at 0.67 gives the 5517 / 2718 partition
        let n = 8235;
        let frames = Tensor::new(vec![n, 1, 1], (0..n).map(|i| i as f64).collect()).unwrap();
        let ft = FrameTensor {
            frames,
            labels: vec![Label::Normal; n],
            labeled: vec![true; n],
            channel_names: vec!["II".into()],
            provenance: (0..n).map(|i| Provenance { record_id: format!("r{}", i / 15), start_sample: i }).collect(),
        };
        let (tr, te) = split(&ft, SplitMode::Frame, 0.67, &mut SeededRng::new(0)).unwrap();
        assert_eq!((tr.len(), te.len()), (5517, 2718));
    }

    #[test]
    fn synthetic_properties() {
        let cfg = SynthConfig { n_records: 4, n_channels: 6, abnormal_fraction: 0.0, ..Default::default() };
        let a = generate_synthetic(&cfg, &mut SeededRng::new(11)).unwrap();
        assert!(a.iter().all(|r| r.label == Some(Label::Normal)));
        let b = generate_synthetic(&cfg, &mut SeededRng::new(11)).unwrap();
        assert_eq!(a, b);
        assert!(generate_synthetic(&SynthConfig { n_channels: 1, ..cfg.clone() }, &mut SeededRng::new(0)).is_err());

        let quiet = SynthConfig { noise_sigma: 0.0, abnormal_fraction: 0.5, n_records: 6, ..cfg };
        for rec in generate_synthetic(&quiet, &mut SeededRng::new(5)).unwrap() {
            let k = rec.channels.len();
            let col = |c: usize| rec.samples.data().chunks(k).map(|r| r[c]).collect::<Vec<_>>();
            for i in 0..k {
                for j in i + 1..k {
                    let rho = pearson(&col(i), &col(j));
                    assert!(rho.abs() > 0.5, "{} ch{i}-ch{j} rho={rho}", rec.record_id);
                }
            }
        }
    }

    fn pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    #[test]
    fn csv_write_then_parse() {
        let cfg = SynthConfig { n_records: 1, n_channels: 3, ..Default::default() };
        let rec = generate_synthetic(&cfg, &mut SeededRng::new(1)).unwrap().remove(0);
        let dir = tempfile::tempdir().unwrap();
        let p = rec.write_csv(dir.path()).unwrap();
        let back: RawRecord<f64> = parse_record(&p).unwrap();
        assert_eq!(back, rec);
    }
}
