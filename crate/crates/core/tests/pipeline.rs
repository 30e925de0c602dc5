use std::collections::BTreeSet;
use std::sync::Mutex;

use limchan_core::baseline::{train_rnn_classifier, Pooling, RnnClassifier};
use limchan_core::checkpoint::{Checkpoint, BLOB_FILE};
use limchan_core::embed::EmbeddingConfig;
use limchan_core::forest::ForestConfig;
use limchan_core::ingest::{
    normalize, restrict_channels, FrameConfig, FrameTensor, Label, NormStats, Provenance, RawRecord, SplitMode, SynthConfig,
};
use limchan_core::metrics::{auroc, AurocMode};
use limchan_core::optim::TrainConfig;
use limchan_core::pipeline::{evaluate, prepare, run_pipeline, FrameSource, PipelineConfig, Task};
use limchan_core::tensor::Tensor;
use limchan_core::{Error, SeededRng};

fn tiny(seed: u64) -> PipelineConfig {
    PipelineConfig {
        channels: "I,II".into(),
        synthetic: Some(SynthConfig { n_records: 40, n_channels: 6, ..Default::default() }),
        frame: FrameConfig { frame_seconds: 5.0, overlap_seconds: 2.0, target_steps: 25 },
        seed,
        hidden: 4,
        layers: 1,
        train: TrainConfig { epochs: 2, batch_size: 8, ..Default::default() },
        embedding: EmbeddingConfig { m: 5, ..Default::default() },
        forest: ForestConfig { n_trees: 10, ..Default::default() },
        with_baseline: true,
        ..Default::default()
    }
}

#[test]
fn end_to_end_is_deterministic() {
    let (a, ca) = run_pipeline(&tiny(7), None).unwrap();
    let (b, cb) = run_pipeline(&tiny(7), None).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert_eq!(ca, cb);
    let (c, _) = run_pipeline(&tiny(8), None).unwrap();
    assert_ne!(a.generator_history, c.generator_history);
    assert!(a.evaluation.baseline.is_some());
    assert_eq!(a.table1_row().split(',').count(), 3);
}

#[test]
fn artifacts_are_written_and_checkpoint_predicts_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(3);
    let (out, ckpt) = run_pipeline(&cfg, Some(dir.path())).unwrap();
    for f in ["config.json", "generator_history.csv", "baseline_history.csv", "report.json", "results.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let loaded = Checkpoint::<f64>::load(&dir.path().join("checkpoint")).unwrap();
    assert_eq!(loaded, ckpt);
    let prep = prepare(&cfg.seeded()).unwrap();
    let again = evaluate(&loaded, &prep.test).unwrap();
    assert_eq!(again, out.evaluation);

    let x = restrict_channels(&prep.test, &ckpt.channels).unwrap();
    let z0 = ckpt.generator.as_ref().unwrap().encode(&x.frame(0)).unwrap().0;
    assert_eq!(loaded.generator.as_ref().unwrap().encode(&x.frame(0)).unwrap().0, z0);

    let blob = dir.path().join("checkpoint").join(BLOB_FILE);
    let bytes = std::fs::read(&blob).unwrap();
    std::fs::write(&blob, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(Checkpoint::<f64>::load(&dir.path().join("checkpoint")), Err(Error::Integrity(_))));
}

/// Records every channel index the evaluator reads.
struct Recording<'a> {
    inner: &'a FrameTensor<f64>,
    seen: Mutex<BTreeSet<usize>>,
}

impl FrameSource for Recording<'_> {
    fn channel_names(&self) -> &[String] {
        &self.inner.channel_names
    }
    fn len(&self) -> usize {
        self.inner.len()
    }
    fn steps(&self) -> usize {
        self.inner.steps()
    }
    fn label(&self, n: usize) -> Option<Label> {
        FrameSource::label(self.inner, n)
    }
    fn provenance(&self, n: usize) -> Provenance {
        self.inner.provenance[n].clone()
    }
    fn read(&self, n: usize, channels: &[usize]) -> Tensor<f64> {
        self.seen.lock().unwrap().extend(channels.iter().copied());
        self.inner.read(n, channels)
    }
}

#[test]
fn evaluation_reads_only_the_limited_channels() {
    let cfg = tiny(5);
    let (out, ckpt) = run_pipeline(&cfg, None).unwrap();
    let prep = prepare(&cfg.seeded()).unwrap();
    let rec = Recording { inner: &prep.test, seen: Mutex::new(BTreeSet::new()) };
    assert_eq!(evaluate(&ckpt, &rec).unwrap(), out.evaluation);
    let expected: BTreeSet<usize> = [0, 1].into_iter().collect();
    assert_eq!(*rec.seen.lock().unwrap(), expected);

    // poisoning every other channel changes nothing
    let mut poisoned = prep.test.clone();
    let k = poisoned.width();
    for row in poisoned.frames.data_mut().chunks_mut(k) {
        for v in &mut row[2..] {
            *v = 1e6;
        }
    }
    assert_eq!(evaluate(&ckpt, &poisoned).unwrap(), out.evaluation);
}

#[test]
fn checkpoint_rejects_other_channel_configs() {
    let (_, ckpt) = run_pipeline(&tiny(1), None).unwrap();
    let prep = prepare(&PipelineConfig { channels: "II,III".into(), ..tiny(1) }).unwrap();
    assert!(matches!(ckpt.ensure_channels(&prep.channels), Err(Error::Config(_))));
}

#[test]
fn stage_errors_name_the_stage() {
    let mut cfg = tiny(0);
    cfg.channels = "V1".into();
    let err = run_pipeline(&cfg, None).unwrap_err();
    assert!(err.to_string().starts_with("preprocess"), "{err}");
    assert_eq!(err.kind(), limchan_core::ErrorKind::Config);
}

#[test]
fn disease_task_uses_diagnosis_tags() {
    let cfg = PipelineConfig { task: Task::Disease("mi".into()), with_baseline: false, ..tiny(2) };
    let prep = prepare(&cfg).unwrap();
    let n = prep.train.len() + prep.test.len();
    // about 30% abnormal, half of those mi; bbb records are dropped
    assert!(n < 40 && n > 28, "{n}");
    assert!(run_pipeline(&cfg, None).is_ok());
}

fn record(id: &str, seconds: usize, rate: usize, channels: usize) -> RawRecord<f64> {
    let len = seconds * rate;
    RawRecord {
        record_id: id.into(),
        sampling_rate_hz: rate as u32,
        channels: limchan_core::ingest::synthetic_channel_names(channels),
        samples: Tensor::new(vec![len, channels], (0..len * channels).map(|i| (i % 97) as f64).collect()).unwrap(),
        label: Some(Label::Normal),
        diagnosis: None,
    }
}

#[test]
fn thirty_seconds_at_1000_hz_gives_nine_frames_of_500_steps() {
    let r = record("r", 30, 1000, 2);
    let ft = FrameTensor::from_records(&[r], &limchan_core::ingest::synthetic_channel_names(2), &FrameConfig::default()).unwrap();
    assert_eq!(ft.frames.shape(), &[9, 500, 2]);
}

#[test]
fn normalization_never_sees_the_test_split() {
    let cfg = tiny(4);
    let prep = prepare(&cfg).unwrap();
    let (_, stats) = normalize(&prep.train, None).unwrap();
    assert_eq!(stats, NormStats::fit(&prep.train));
    let (_, ckpt) = run_pipeline(&cfg, None).unwrap();
    assert_eq!(ckpt.norm.as_ref(), Some(&stats));
    // the fitted stats differ from those of train+test combined
    let mut all = prep.train.clone();
    all.frames = Tensor::new(
        vec![prep.train.len() + prep.test.len(), prep.train.steps(), prep.train.width()],
        prep.train.frames.data().iter().chain(prep.test.frames.data()).copied().collect(),
    )
    .unwrap();
    assert_ne!(NormStats::fit(&all), stats);
}

fn amplitude_frames(n: usize, steps: usize, seed: u64) -> FrameTensor<f64> {
    let mut rng = SeededRng::new(seed);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let pos = i % 2 == 0;
        let offset = if pos { 0.5 } else { -0.5 };
        data.extend((0..steps).map(|_| offset + 0.3 * rng.normal()));
        labels.push(if pos { Label::Abnormal } else { Label::Normal });
    }
    FrameTensor {
        frames: Tensor::new(vec![n, steps, 1], data).unwrap(),
        labels,
        labeled: vec![true; n],
        channel_names: vec!["II".into()],
        provenance: (0..n).map(|i| Provenance { record_id: format!("r{i}"), start_sample: 0 }).collect(),
    }
}

#[test]
fn baseline_learns_separable_amplitudes() {
    let data = amplitude_frames(64, 10, 1);
    let mut m = RnnClassifier::<f64>::init(1, 4, 1, Pooling::LastHidden, &mut SeededRng::new(2)).unwrap();
    let cfg = TrainConfig { epochs: 30, batch_size: 8, early_stop_patience: None, ..Default::default() };
    let report = train_rnn_classifier(&mut m, &data, &cfg).unwrap();
    assert!(report.final_loss() < report.initial_loss);
    let scores = m.predict_scores(&data).unwrap();
    let correct = scores.iter().zip(&data.labels).filter(|(s, l)| (**s >= 0.5) == l.is_positive()).count();
    assert!(correct as f64 / 64.0 > 0.95, "{correct}/64");

    let mut single = data.clone();
    single.labels = vec![Label::Normal; 64];
    assert!(train_rnn_classifier(&mut m, &single, &cfg).is_err());
}

#[test]
fn untrained_baseline_is_at_chance() {
    let mut data = amplitude_frames(400, 10, 3);
    let mut rng = SeededRng::new(4);
    let mut labels: Vec<Label> = (0..400).map(|i| if i < 200 { Label::Abnormal } else { Label::Normal }).collect();
    rng.shuffle(&mut labels);
    data.labels = labels;
    let mut m = RnnClassifier::<f64>::init(1, 4, 1, Pooling::LastHidden, &mut SeededRng::new(5)).unwrap();
    let cfg = TrainConfig { epochs: 0, ..Default::default() };
    train_rnn_classifier(&mut m, &data, &cfg).unwrap();
    let a = auroc(&m.predict_scores(&data).unwrap(), &data.labels, AurocMode::Binary).unwrap();
    assert!((a - 0.5).abs() <= 0.1, "{a}");
}

#[test]
fn frame_split_mode_runs() {
    let cfg = PipelineConfig { split: SplitMode::Frame, with_baseline: false, ..tiny(6) };
    let (out, _) = run_pipeline(&cfg, None).unwrap();
    assert_eq!(out.n_train_frames + out.n_test_frames, 40);
}
