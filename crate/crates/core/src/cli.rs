//! Command-line entry points: data generation, both training stages,
//! editing, evaluation and ablation sweeps.

use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bench::{ablation_csv, edit_frames, evaluate, run_ablation, write_report, AblationAxis, EditMode};
use crate::diffusion::SamplerConfig;
use crate::error::{Error, Result};
use crate::media::{
    generate_training_corpus, generate_triplet, load_frame_png, load_train_dir, load_triplet, load_triplet_dir, save_frames,
    save_train_clip, save_triplet, CorpusConfig, VideoClip,
};
use crate::params::{load_checkpoint, save_checkpoint, ModelConfig, ModelParams};
use crate::training::{log_csv, train_mmm, train_stage_a, StageAConfig, TrainConfig};

pub const VERSION: &str = concat!("ivediff ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Parser)]
#[command(name = "ivediff", version, about = "Image-guided video editing at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic training corpus and benchmark triplets.
    GenData(GenDataArgs),
    /// Train stage A (frame-wise) or fine-tune temporal components (mmm).
    Train(TrainArgs),
    /// Edit one triplet.
    Edit(EditArgs),
    /// Edit and score every triplet of a benchmark directory.
    Eval(EvalArgs),
    /// Fine-tune and evaluate one configuration per value of an axis.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub clips: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub triplets: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    A,
    Mmm,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub stage: Stage,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root from gen-data, or its `train` directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Stage A checkpoint to fine-tune.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SamplerArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub guidance: Option<f64>,
    /// frame_wise_baseline or inflated.
    #[arg(long)]
    pub mode: Option<String>,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub triplet: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Frames directory replacing the triplet's video, e.g. a previous edit.
    #[arg(long)]
    pub source: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub sampler: SamplerArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub bench: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub sampler: SamplerArgs,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// mask_ratio, mask_strategy, stride or components.
    #[arg(long)]
    pub axis: Option<String>,
    #[arg(long = "ckpt-a")]
    pub ckpt_a: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub bench: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long = "sample-steps")]
    pub sample_steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Resolved configuration of `train --stage a`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageARun {
    pub model: ModelConfig,
    pub train: StageAConfig,
}

/// Resolved configuration of `edit` and `eval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditRun {
    pub mode: EditMode,
    pub sampler: SamplerConfig,
}

impl Default for EditRun {
    fn default() -> Self {
        EditRun {
            mode: EditMode::Inflated,
            sampler: SamplerConfig::default(),
        }
    }
}

/// Resolved configuration of `ablate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateRun {
    pub axis: AblationAxis,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
}

impl Default for AblateRun {
    fn default() -> Self {
        AblateRun {
            axis: AblationAxis::Components,
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

/// Contents of `run_meta.json`; also accepted as `--config`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunMeta {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
}

/// Reads a command configuration, either bare or wrapped in a `run_meta.json`.
pub fn load_config<C: DeserializeOwned + Default>(path: Option<&Path>) -> Result<C> {
    let Some(path) = path else { return Ok(C::default()) };
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if let Some(obj) = value.as_object_mut() {
        if obj.contains_key("command") && obj.contains_key("config") {
            value = obj.remove("config").unwrap_or_default();
        }
    }
    serde_json::from_value(value).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_run_meta<C: Serialize>(out: &Path, command: &str, config: &C) -> Result<()> {
    let meta = RunMeta {
        command: command.into(),
        version: VERSION.into(),
        config: serde_json::to_value(config).expect("config serializes"),
    };
    let path = out.join("run_meta.json");
    fs::write(&path, serde_json::to_string_pretty(&meta).expect("metadata serializes") + "\n").map_err(|e| Error::io(&path, e))
}

/// Exclusive claim on an output directory, released on drop.
pub struct OutputLock {
    path: PathBuf,
    _file: File,
}

impl OutputLock {
    pub fn acquire(out: &Path) -> Result<Self> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let path = out.join(".lock");
        let file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|_| Error::Input(format!("output directory {} is in use (remove {} if stale)", out.display(), path.display())))?;
        Ok(OutputLock { path, _file: file })
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn parse_mode(mode: Option<&str>, current: EditMode) -> Result<EditMode> {
    mode.map_or(Ok(current), EditMode::parse)
}

fn resolve_sampler(args: &SamplerArgs) -> Result<EditRun> {
    let mut run: EditRun = load_config(args.config.as_deref())?;
    run.mode = parse_mode(args.mode.as_deref(), run.mode)?;
    if let Some(s) = args.seed {
        run.sampler.seed = s;
    }
    if let Some(n) = args.steps {
        run.sampler.num_steps = n;
    }
    if let Some(g) = args.guidance {
        run.sampler.guidance_scale = g;
    }
    if run.sampler.num_steps == 0 {
        return Err(Error::Config("steps must be positive".into()));
    }
    if run.sampler.eta != 0.0 {
        return Err(Error::Config("only deterministic sampling (eta = 0) is supported".into()));
    }
    Ok(run)
}

fn load_model(path: &Path) -> Result<ModelParams<f32>> {
    if !path.exists() {
        return Err(Error::Checkpoint(format!("checkpoint {} not found", path.display())));
    }
    load_checkpoint(path, &ModelConfig::default())
}

fn train_dir(data: &Path) -> PathBuf {
    let nested = data.join("train");
    if nested.is_dir() {
        nested
    } else {
        data.to_path_buf()
    }
}

fn bench_dir(data: &Path) -> PathBuf {
    let nested = data.join("bench");
    if nested.is_dir() {
        nested
    } else {
        data.to_path_buf()
    }
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let mut cfg: CorpusConfig = load_config(args.config.as_deref())?;
    if let Some(v) = args.clips {
        cfg.clips = v;
    }
    if let Some(v) = args.frames {
        cfg.frames = v;
    }
    if let Some(v) = args.size {
        cfg.size = v;
    }
    if let Some(v) = args.triplets {
        cfg.triplets = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if cfg.size % 4 != 0 || cfg.size < 16 {
        return Err(Error::Config(format!("size {} must be a multiple of 4 and at least 16", cfg.size)));
    }
    if cfg.frames < 2 || cfg.triplet_frames < 2 {
        return Err(Error::Config("clips need at least two frames".into()));
    }
    let _lock = OutputLock::acquire(&args.out)?;
    for (i, clip) in generate_training_corpus(&cfg)?.iter().enumerate() {
        save_train_clip(clip, &args.out.join("train").join(format!("clip_{i:04}")))?;
    }
    for i in 0..cfg.triplets {
        let t = generate_triplet(&cfg, i)?;
        save_triplet(&t, &args.out.join("bench").join(&t.id))?;
    }
    write_run_meta(&args.out, "gen-data", &cfg)
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    match args.stage {
        Stage::A => {
            let mut run: StageARun = load_config(args.config.as_deref())?;
            if let Some(s) = args.steps {
                run.train.steps = s;
            }
            if let Some(s) = args.seed {
                run.train.seed = s;
            }
            run.train.validate()?;
            run.model.validate()?;
            let dataset = load_train_dir(&train_dir(&args.data))?;
            let _lock = OutputLock::acquire(&args.out)?;
            let outcome = train_stage_a::<f32>(&dataset, &run.model, &run.train)?;
            finish_training(&args.out, &outcome.params, &log_csv(&outcome.log))?;
            write_run_meta(&args.out, "train-a", &run)
        }
        Stage::Mmm => {
            let init = args.init.as_deref().ok_or_else(|| Error::Config("Stage A checkpoint required (--init)".into()))?;
            let mut cfg: TrainConfig = load_config(args.config.as_deref())?;
            if let Some(s) = args.steps {
                cfg.steps = s;
            }
            if let Some(s) = args.seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let base = load_model(init)?;
            let dataset = load_train_dir(&train_dir(&args.data))?;
            let _lock = OutputLock::acquire(&args.out)?;
            let outcome = train_mmm(&base, &dataset, &cfg)?;
            finish_training(&args.out, &outcome.params, &log_csv(&outcome.log))?;
            write_run_meta(&args.out, "train-mmm", &cfg)
        }
    }
}

fn finish_training(out: &Path, params: &ModelParams<f32>, log: &str) -> Result<()> {
    save_checkpoint(params, &out.join("checkpoint.ived"))?;
    let path = out.join("train_log.csv");
    fs::write(&path, log).map_err(|e| Error::io(&path, e))
}

pub fn cmd_edit(args: &EditArgs) -> Result<()> {
    let run = resolve_sampler(&args.sampler)?;
    let params = load_model(&args.ckpt)?;
    let triplet = load_triplet(&args.triplet)?;
    let video = match &args.source {
        Some(dir) => {
            let frames_dir = if dir.join("frames").is_dir() { dir.join("frames") } else { dir.clone() };
            let mut files: Vec<PathBuf> = fs::read_dir(&frames_dir)
                .map_err(|e| Error::format(&frames_dir, e.to_string()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "png"))
                .collect();
            files.sort();
            let frames = files.iter().map(|p| load_frame_png(p)).collect::<Result<Vec<_>>>()?;
            let v = VideoClip::new(frames, triplet.video.frame_rate)?;
            if v.len() != triplet.video.len() || v.height() != triplet.video.height() || v.width() != triplet.video.width() {
                return Err(Error::Input("source frames do not match the triplet's video".into()));
            }
            v
        }
        None => triplet.video.clone(),
    };
    let _lock = OutputLock::acquire(&args.out)?;
    let edited = edit_frames(
        &video,
        &triplet.masks,
        &triplet.reference,
        triplet.application,
        &params,
        &run.sampler,
        run.mode,
    )?;
    save_frames(&edited, &args.out)?;
    write_run_meta(&args.out, "edit", &run)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let run = resolve_sampler(&args.sampler)?;
    let params = load_model(&args.ckpt)?;
    let triplets = load_triplet_dir(&bench_dir(&args.bench))?;
    let _lock = OutputLock::acquire(&args.out)?;
    let report = evaluate(&triplets, &params, &run.sampler, run.mode)?;
    write_report(&report, &args.out, run.mode.as_str(), &args.ckpt.display().to_string(), &run.sampler)?;
    write_run_meta(&args.out, "eval", &run)
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let mut run: AblateRun = load_config(args.config.as_deref())?;
    if let Some(a) = &args.axis {
        run.axis = AblationAxis::parse(a)?;
    }
    if let Some(s) = args.steps {
        run.train.steps = s;
    }
    if let Some(s) = args.sample_steps {
        run.sampler.num_steps = s;
    }
    if let Some(s) = args.seed {
        run.train.seed = s;
        run.sampler.seed = s;
    }
    run.train.validate()?;
    let stage_a = load_model(&args.ckpt_a)?;
    let dataset = load_train_dir(&train_dir(&args.data))?;
    let triplets = load_triplet_dir(&bench_dir(&args.bench))?;
    let _lock = OutputLock::acquire(&args.out)?;
    let rows = run_ablation(run.axis, &stage_a, &dataset, &triplets, &run.train, &run.sampler)?;
    let csv = args.out.join("ablation.csv");
    fs::write(&csv, ablation_csv(&rows)).map_err(|e| Error::io(&csv, e))?;
    let json = args.out.join("ablation.json");
    fs::write(&json, serde_json::to_string_pretty(&rows).expect("rows serialize") + "\n").map_err(|e| Error::io(&json, e))?;
    write_run_meta(&args.out, "ablate", &run)
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Edit(a) => cmd_edit(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::MaskStrategy;

    #[test]
    fn run_meta_is_accepted_as_config() {
        let dir = tempfile::tempdir().unwrap();
        let run = AblateRun {
            axis: AblationAxis::Stride,
            train: TrainConfig {
                mask_strategy: MaskStrategy::ClipWise,
                ..TrainConfig::default()
            },
            sampler: SamplerConfig::default(),
        };
        write_run_meta(dir.path(), "ablate", &run).unwrap();
        let back: AblateRun = load_config(Some(&dir.path().join("run_meta.json"))).unwrap();
        assert_eq!(back, run);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"mask_ratio": 0.5, "bogus": 1}"#).unwrap();
        assert!(matches!(load_config::<TrainConfig>(Some(&p)), Err(Error::Config(_))));
        fs::write(&p, serde_json::to_string(&TrainConfig { mask_ratio: 0.5, ..Default::default() }).unwrap()).unwrap();
        assert_eq!(load_config::<TrainConfig>(Some(&p)).unwrap().mask_ratio, 0.5);
    }

    #[test]
    fn partial_configs_fill_defaults() {
        let run: StageARun = serde_json::from_str(r#"{"model":{"res_blocks":1},"train":{"steps":3}}"#).unwrap();
        assert_eq!((run.model.res_blocks, run.model.widths, run.train.steps, run.train.batch_size), (1, [64, 64, 64], 3, 8));
        assert!(serde_json::from_str::<StageARun>(r#"{"train":{"stepz":3}}"#).is_err());
        assert!(serde_json::from_str::<StageARun>(r#"{"steps":3}"#).is_err());
        let edit: EditRun = serde_json::from_str(r#"{"sampler":{"num_steps":5}}"#).unwrap();
        assert_eq!((edit.mode, edit.sampler.num_steps, edit.sampler.clip_x0), (EditMode::Inflated, 5, Some(1.0)));
        assert!(serde_json::from_str::<EditRun>(r#"{"sampler":{"steps":5}}"#).is_err());
        let corpus: CorpusConfig = serde_json::from_str(r#"{"clips":3}"#).unwrap();
        assert_eq!((corpus.clips, corpus.size), (3, 32));
        // the fine-tuning config must list every key
        assert!(serde_json::from_str::<TrainConfig>(r#"{"steps":3}"#).is_err());
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = OutputLock::acquire(dir.path()).unwrap();
        assert!(OutputLock::acquire(dir.path()).is_err());
        drop(lock);
        assert!(OutputLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn sampler_flags_override_config() {
        let args = SamplerArgs {
            config: None,
            seed: Some(3),
            steps: None,
            guidance: Some(2.0),
            mode: Some("frame_wise_baseline".into()),
        };
        let run = resolve_sampler(&args).unwrap();
        assert_eq!((run.sampler.seed, run.sampler.num_steps, run.sampler.guidance_scale), (3, 50, 2.0));
        assert_eq!(run.mode, EditMode::FrameWiseBaseline);
        let bad = SamplerArgs { mode: Some("fancy".into()), ..args };
        assert!(matches!(resolve_sampler(&bad), Err(Error::Config(_))));
    }
}
