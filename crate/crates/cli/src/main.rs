//! `limchan`: batch command line for the limited-channel ECG pipeline.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use limchan_core::checkpoint::Checkpoint;
use limchan_core::ingest::{
    generate_synthetic, load_dir, normalize, ChannelConfig, FrameTensor, SplitMode, SynthConfig,
};
use limchan_core::pipeline::{
    self, embed_limited, evaluate, load_features, load_frames, resolve_channels, run_matrix, run_pipeline,
    save_features, save_frames, train_baseline, train_stage1, train_stage2, PipelineConfig, Task,
    TABLE1_HEADER,
};
use limchan_core::{Error, ErrorKind, Result, SeededRng};
use log::info;

#[derive(Parser, Debug)]
#[command(name = "limchan", version, about = "Limited-channel ECG classification pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Pipeline configuration (JSON); flags below override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Start from the small synthetic preset instead of the full-scale defaults.
    #[arg(long, global = true)]
    desk: bool,
    /// Channel configuration name, comma-separated leads, or `all` (run only).
    #[arg(long, global = true)]
    channels: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Dense interpolation factor M.
    #[arg(long = "m-factor", global = true)]
    m_factor: Option<usize>,
    #[arg(long, global = true)]
    trees: Option<usize>,
    #[arg(long, global = true, value_parser = ["record", "frame"])]
    split: Option<String>,
    #[arg(long = "with-baseline", global = true)]
    with_baseline: bool,
    #[arg(long, global = true)]
    hidden: Option<usize>,
    #[arg(long, global = true)]
    layers: Option<usize>,
    /// Disease tag for the disease-vs-healthy task.
    #[arg(long, global = true)]
    disease: Option<String>,
    /// Directory of CSV records with JSON sidecars.
    #[arg(long = "data-dir", global = true)]
    data_dir: Option<PathBuf>,
    /// Use generated synthetic records.
    #[arg(long, global = true)]
    synthetic: bool,
    /// Number of synthetic records.
    #[arg(long, global = true)]
    records: Option<usize>,
    /// Number of synthetic leads (standard leads first, then Frank leads).
    #[arg(long, global = true)]
    leads: Option<usize>,
    /// Output or workspace directory.
    #[arg(long, global = true, default_value = "limchan-out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset as CSV records.
    Synth,
    /// Frame, split and store the dataset in the workspace.
    Prepare,
    /// Train the sequence-to-sequence generator.
    TrainGen,
    /// Embed the prepared splits through the trained encoder.
    Embed,
    /// Fit the random forest on the training embeddings.
    TrainClf,
    /// Train the standard RNN baseline.
    TrainBaseline,
    /// Evaluate a checkpoint on the prepared test split or on --data-dir.
    Evaluate {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run every stage end to end; `--channels all` runs the experiment matrix.
    Run,
}

const WORKSPACE_CONFIG: &str = "pipeline.json";

fn read_config(path: &Path) -> Result<PipelineConfig> {
    let bytes = fs::read(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

impl Cli {
    /// Base config: `--config`, else the workspace's saved config for
    /// stage commands, else the defaults; then flag overrides.
    fn pipeline_config(&self, use_workspace: bool) -> Result<PipelineConfig> {
        let saved = self.out.join(WORKSPACE_CONFIG);
        let mut cfg = if let Some(p) = &self.config {
            read_config(p)?
        } else if use_workspace && saved.exists() {
            read_config(&saved)?
        } else if self.desk {
            PipelineConfig::desk_synthetic()
        } else {
            PipelineConfig::default()
        };
        if let Some(c) = &self.channels {
            cfg.channels = c.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(m) = self.m_factor {
            cfg.embedding.m = m;
        }
        if let Some(t) = self.trees {
            cfg.forest.n_trees = t;
        }
        if let Some(s) = &self.split {
            cfg.split = if s == "frame" { SplitMode::Frame } else { SplitMode::Record };
        }
        if let Some(h) = self.hidden {
            cfg.hidden = h;
        }
        if let Some(l) = self.layers {
            cfg.layers = l;
        }
        if let Some(d) = &self.disease {
            cfg.task = Task::Disease(d.clone());
        }
        cfg.with_baseline |= self.with_baseline;
        if let Some(d) = &self.data_dir {
            cfg.data_dir = Some(d.clone());
        }
        if self.synthetic {
            cfg.data_dir = None;
            cfg.synthetic.get_or_insert_with(SynthConfig::default);
        }
        if let Some(syn) = cfg.synthetic.as_mut() {
            if let Some(r) = self.records {
                syn.n_records = r;
            }
            if let Some(l) = self.leads {
                syn.n_channels = l;
            }
        }
        Ok(cfg)
    }

    fn checkpoint_dir(&self) -> PathBuf {
        self.out.join("checkpoint")
    }
}

fn load_checkpoint(dir: &Path) -> Result<Checkpoint<f64>> {
    Checkpoint::load(dir).map_err(|e| e.in_stage("load-checkpoint"))
}

fn cmd_synth(cli: &Cli) -> Result<()> {
    let mut cfg = cli.pipeline_config(false)?;
    let syn = cfg.synthetic.get_or_insert_with(SynthConfig::default);
    if let Some(r) = cli.records {
        syn.n_records = r;
    }
    if let Some(l) = cli.leads {
        syn.n_channels = l;
    }
    let syn = syn.clone();
    let recs = generate_synthetic(&syn, &mut SeededRng::new(cfg.seed).derive(10))?;
    fs::create_dir_all(&cli.out).map_err(|e| Error::Data(format!("{}: {e}", cli.out.display())))?;
    for r in &recs {
        r.write_csv(&cli.out)?;
    }
    println!("wrote {} records to {}", recs.len(), cli.out.display());
    Ok(())
}

fn cmd_prepare(cli: &Cli) -> Result<()> {
    let cfg = cli.pipeline_config(false)?;
    cfg.validate()?;
    let cfg = cfg.seeded();
    let prep = pipeline::prepare(&cfg)?;
    save_frames(&cli.out, "train", &prep.train)?;
    save_frames(&cli.out, "test", &prep.test)?;
    write_file(&cli.out.join(WORKSPACE_CONFIG), serde_json::to_vec_pretty(&cfg)?)?;
    println!(
        "prepared {} train and {} test frames over {:?}",
        prep.train.len(),
        prep.test.len(),
        prep.channels.full
    );
    Ok(())
}

fn workspace_channels(cfg: &PipelineConfig, train: &FrameTensor<f64>) -> Result<ChannelConfig> {
    ChannelConfig::new(resolve_channels(&cfg.channels)?, train.channel_names.clone())
}

fn cmd_train_gen(cli: &Cli) -> Result<()> {
    let cfg = cli.pipeline_config(true)?.seeded();
    let train = load_frames(&cli.out, "train")?;
    let channels = workspace_channels(&cfg, &train)?;
    let (train_norm, norm) = normalize(&train, None)?;
    let (model, report) = train_stage1(&cfg, &channels, &train_norm).map_err(|e| e.in_stage("train-gen"))?;
    write_file(&cli.out.join("generator_history.csv"), report.history_csv())?;
    let mut ckpt = Checkpoint::new(channels, cfg.frame);
    ckpt.norm = Some(norm);
    ckpt.embedding = Some(cfg.embedding);
    ckpt.generator = Some(model);
    ckpt.config_hash = limchan_core::checkpoint::config_hash(&cfg)?;
    ckpt.save(&cli.checkpoint_dir())?;
    println!("generator loss {:.6} -> {:.6}", report.initial_loss, report.final_loss());
    Ok(())
}

fn cmd_embed(cli: &Cli) -> Result<()> {
    let ckpt = load_checkpoint(&cli.checkpoint_dir())?;
    for split in ["train", "test"] {
        let frames = load_frames(&cli.out, split)?;
        let feats = embed_limited(&ckpt, &frames).map_err(|e| e.in_stage("embed"))?;
        save_features(&cli.out, &format!("embed_{split}"), &feats)?;
        println!("{split}: {} x {} features", feats.len(), feats.width());
    }
    Ok(())
}

fn cmd_train_clf(cli: &Cli) -> Result<()> {
    let cfg = cli.pipeline_config(true)?;
    let mut ckpt = load_checkpoint(&cli.checkpoint_dir())?;
    let feats = load_features(&cli.out, "embed_train")?;
    let forest = train_stage2(&cfg, &feats).map_err(|e| e.in_stage("train-clf"))?;
    println!("forest of {} trees on {} features", forest.trees.len(), forest.n_features);
    ckpt.forest = Some(forest);
    ckpt.save(&cli.checkpoint_dir())
}

fn cmd_train_baseline(cli: &Cli) -> Result<()> {
    let cfg = cli.pipeline_config(true)?;
    let mut ckpt = load_checkpoint(&cli.checkpoint_dir())?;
    let train = load_frames(&cli.out, "train")?;
    let norm = ckpt.norm.clone().ok_or_else(|| Error::Config("checkpoint has no normalization".into()))?;
    let (train_norm, _) = normalize(&train, Some(&norm))?;
    let (model, report) = train_baseline(&cfg, &ckpt.channels, &train_norm).map_err(|e| e.in_stage("train-baseline"))?;
    write_file(&cli.out.join("baseline_history.csv"), report.history_csv())?;
    ckpt.classifier = Some(model);
    ckpt.save(&cli.checkpoint_dir())?;
    println!("baseline loss {:.6} -> {:.6}", report.initial_loss, report.final_loss());
    Ok(())
}

fn cmd_evaluate(cli: &Cli, checkpoint: Option<&Path>) -> Result<()> {
    let dir = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| cli.checkpoint_dir());
    let ckpt = load_checkpoint(&dir)?;
    if let Some(spec) = &cli.channels {
        ckpt.ensure_channels(&ChannelConfig::new(resolve_channels(spec)?, ckpt.channels.full.clone())?)?;
    }
    let frames = match &cli.data_dir {
        // only the limited channels are loaded from user records
        Some(d) => FrameTensor::from_records(&load_dir::<f64>(d)?, &ckpt.channels.selected, &ckpt.frame)?,
        None => load_frames(&cli.out, "test")?,
    };
    let eval = evaluate(&ckpt, &frames).map_err(|e| e.in_stage("evaluate"))?;
    write_file(&cli.out.join("report.json"), serde_json::to_vec_pretty(&eval)?)?;
    let mut csv = format!("model,{}\n", limchan_core::metrics::REPORT_CSV_HEADER);
    csv.push_str(&format!("proposed,{}\n", eval.proposed.csv_row()));
    if let Some(b) = &eval.baseline {
        csv.push_str(&format!("standard_rnn,{}\n", b.csv_row()));
    }
    write_file(&cli.out.join("evaluation.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn cmd_run(cli: &Cli) -> Result<()> {
    let cfg = cli.pipeline_config(false)?;
    if cfg.channels == "all" {
        let m = run_matrix(&cfg, Some(&cli.out))?;
        print!("{}\n{}", m.table1_csv(), m.table2_csv());
    } else {
        let (outcome, _) = run_pipeline(&cfg, Some(&cli.out))?;
        println!("{TABLE1_HEADER}\n{}", outcome.table1_row());
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Training => 4,
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("LIMCHAN_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("LIMCHAN_THREADS={v:?} is not a positive integer")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
        info!("using {n} worker threads");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match &cli.command {
        Command::Synth => cmd_synth(&cli),
        Command::Prepare => cmd_prepare(&cli),
        Command::TrainGen => cmd_train_gen(&cli),
        Command::Embed => cmd_embed(&cli),
        Command::TrainClf => cmd_train_clf(&cli),
        Command::TrainBaseline => cmd_train_baseline(&cli),
        Command::Evaluate { checkpoint } => cmd_evaluate(&cli, checkpoint.as_deref()),
        Command::Run => cmd_run(&cli),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
