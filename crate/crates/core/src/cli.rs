//! Command-line driver behind the `revdeid` binary.
//!
//! Settings come from built-in defaults, then an optional `key = value`
//! file (`--config`), then `--set key=value` pairs and dedicated flags.
//! Everything is validated before the first file is written.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::error::{Error, Result};
use crate::eval::{
    environment_rows, histogram_svg, metrics_csv, scores_text, verification_protocol, write_text, MatcherScorer,
    PairCounts, PixelScorer, Protocol, Scorer, View,
};
use crate::losses::AnoSign;
use crate::matcher::{pair_accuracy, phase1_history_csv, train_phase1_logged, MatcherArch, MatcherModel, Phase1Config};
use crate::pipeline::{process_stream, synthetic_scenes, write_scenes, Mode, OracleDetector, PipelineConfig, StreamSummary, SUMMARY_FILE};
use crate::training::{
    ablate, generate_synthetic_dataset, save_critic, train_phase2, AblationParam, Dataset, Generator, SyntheticSpec,
    TrainConfig,
};
use crate::types::{FaceCrop, SignVector};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const MATCHER_FILE: &str = "matcher.bin";
pub const GENERATOR_FILE: &str = "generator.bin";
pub const CRITIC_FILE: &str = "critic.bin";

#[derive(Debug, Parser)]
#[command(name = "revdeid", version, about = "Reversible face de-identification toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic tracklet dataset (and optionally scene frames).
    Synth(SynthArgs),
    /// Train the attribute matcher (phase1) or the generator pair (phase2).
    #[command(subcommand)]
    Train(TrainCommand),
    /// De-identify a directory of frames.
    Deidentify(StreamArgs),
    /// Reconstruct the faces of a de-identified directory.
    Reverse(StreamArgs),
    /// Score a verification protocol and write a report.
    Eval(EvalArgs),
    /// Compare a base phase-2 run with one parameter scaled.
    Ablate(AblateArgs),
}

#[derive(Debug, Default, Args)]
pub struct Common {
    /// `key = value` settings file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` setting; repeatable, overrides the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub subjects: Option<usize>,
    #[arg(long)]
    pub sequences: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    /// Also write this many scene frames with oracle detections to `<out>/scenes`.
    #[arg(long)]
    pub scenes: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Subcommand)]
pub enum TrainCommand {
    Phase1(TrainArgs),
    Phase2(TrainArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoints and loss history.
    #[arg(long)]
    pub out: PathBuf,
    /// Phase-1 checkpoint (phase2 only); defaults to `<out>/matcher.bin`.
    #[arg(long)]
    pub matcher: Option<PathBuf>,
    /// Sign vector, e.g. "-1,1,1,1" (phase2 only).
    #[arg(long, allow_hyphen_values = true)]
    pub sign: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct StreamArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Generator checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Detections to replay (deidentify only); defaults to `<in>/detections.jsonl`.
    #[arg(long)]
    pub detections: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = parse_protocol)]
    pub protocol: Protocol,
    /// Genuine and impostor pair counts, "G,I".
    #[arg(long, default_value = "1000,5000", value_parser = parse_pairs)]
    pub pairs: PairCounts,
    /// Report directory.
    #[arg(long)]
    pub report: PathBuf,
    /// Generator checkpoint; required by protocols that compare de-identified crops.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Matcher checkpoint used as verifier; without it crops are compared pixelwise.
    #[arg(long)]
    pub verifier: Option<PathBuf>,
    /// Verifier head to read scores from.
    #[arg(long, default_value_t = 0)]
    pub label: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out data for the reconstruction error; defaults to `--data`.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// Phase-1 checkpoint.
    #[arg(long)]
    pub matcher: PathBuf,
    #[arg(long, value_parser = parse_param)]
    pub param: AblationParam,
    #[arg(long)]
    pub factor: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

fn parse_protocol(s: &str) -> std::result::Result<Protocol, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_pairs(s: &str) -> std::result::Result<PairCounts, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_param(s: &str) -> std::result::Result<AblationParam, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Every tunable setting of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub synthetic: SyntheticSpec,
    pub synthetic_seed: u64,
    pub scenes: usize,
    pub scene_width: u32,
    pub scene_height: u32,
    pub phase1: Phase1Config,
    pub matcher_scale: usize,
    pub train: TrainConfig,
    pub pipeline: PipelineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            synthetic: SyntheticSpec::default(),
            synthetic_seed: 0,
            scenes: 0,
            scene_width: 160,
            scene_height: 120,
            phase1: Phase1Config::default(),
            matcher_scale: 4,
            train: TrainConfig::default(),
            pipeline: PipelineConfig::default(),
        }
    }
}

/// Keys accepted by config files and `--set`.
pub const CONFIG_KEYS: &[&str] = &[
    "seed",
    "subjects",
    "sequences",
    "frames",
    "categories",
    "scenes",
    "scene_width",
    "scene_height",
    "phase1_epochs",
    "phase1_batch_size",
    "phase1_lr",
    "phase1_steps_per_epoch",
    "matcher_scale",
    "epochs",
    "batch_size",
    "steps_per_epoch",
    "critic_steps",
    "lr_generator",
    "lr_critic",
    "sign",
    "omega_mse",
    "omega_adv",
    "omega_ano",
    "omega_con",
    "omega_div",
    "omega_dis",
    "delta_gp",
    "histogram_bins",
    "encoder_width",
    "encoder_depth",
    "decoder_width",
    "decoder_depth",
    "critic_width",
    "critic_layers",
    "ano_sign",
    "box_expansion",
];

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

impl RunConfig {
    /// Sets one key. Unknown keys and unparsable values are config errors.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let t = &mut self.train;
        let w = &mut t.weights;
        match key {
            "seed" => {
                let s: u64 = parse_value(key, v)?;
                self.synthetic_seed = s;
                self.phase1.seed = s;
                t.seed = s;
                self.pipeline.seed = s;
            }
            "subjects" => self.synthetic.subjects = parse_value(key, v)?,
            "sequences" => self.synthetic.sequences_per_subject = parse_value(key, v)?,
            "frames" => self.synthetic.frames_per_sequence = parse_value(key, v)?,
            "categories" => {
                self.synthetic.categories = v.split(',').map(|c| parse_value(key, c.trim())).collect::<Result<_>>()?
            }
            "scenes" => self.scenes = parse_value(key, v)?,
            "scene_width" => self.scene_width = parse_value(key, v)?,
            "scene_height" => self.scene_height = parse_value(key, v)?,
            "phase1_epochs" => self.phase1.epochs = parse_value(key, v)?,
            "phase1_batch_size" => self.phase1.batch_size = parse_value(key, v)?,
            "phase1_lr" => self.phase1.learning_rate = parse_value(key, v)?,
            "phase1_steps_per_epoch" => self.phase1.steps_per_epoch = Some(parse_value(key, v)?),
            "matcher_scale" => {
                self.matcher_scale = parse_value(key, v)?;
                if self.matcher_scale == 0 {
                    return Err(Error::Config("`matcher_scale` must be at least 1".into()));
                }
                self.phase1.arch = MatcherArch::scaled_down(self.matcher_scale);
            }
            "epochs" => t.epochs = parse_value(key, v)?,
            "batch_size" => t.batch_size = parse_value(key, v)?,
            "steps_per_epoch" => t.steps_per_epoch = if v == "auto" { None } else { Some(parse_value(key, v)?) },
            "critic_steps" => t.critic_steps_per_gen_step = parse_value(key, v)?,
            "lr_generator" => t.lr_generator = parse_value(key, v)?,
            "lr_critic" => t.lr_critic = parse_value(key, v)?,
            "sign" => t.sign_vector = v.parse::<SignVector>()?,
            "omega_mse" => w.mse = parse_value(key, v)?,
            "omega_adv" => w.adv = parse_value(key, v)?,
            "omega_ano" => w.ano = parse_value(key, v)?,
            "omega_con" => w.con = parse_value(key, v)?,
            "omega_div" => w.div = parse_value(key, v)?,
            "omega_dis" => w.dis = parse_value(key, v)?,
            "delta_gp" => w.delta_gp = parse_value(key, v)?,
            "histogram_bins" => t.histogram_bins = parse_value(key, v)?,
            "encoder_width" => t.encoder_arch.base_width = parse_value(key, v)?,
            "encoder_depth" => t.encoder_arch.depth = parse_value(key, v)?,
            "decoder_width" => t.decoder_arch.base_width = parse_value(key, v)?,
            "decoder_depth" => t.decoder_arch.depth = parse_value(key, v)?,
            "critic_width" => t.critic_arch.base_width = parse_value(key, v)?,
            "critic_layers" => t.critic_arch.layers = parse_value(key, v)?,
            "ano_sign" => {
                t.ano_sign = match v {
                    "corrected" => AnoSign::Corrected,
                    "as-printed" => AnoSign::AsPrinted,
                    _ => return Err(Error::Config(format!("`ano_sign` must be corrected or as-printed, got `{v}`"))),
                }
            }
            "box_expansion" => self.pipeline.box_expansion = parse_value(key, v)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown setting `{key}` (known: {})",
                    CONFIG_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        self.train.validate()?;
        if self.train.critic_arch.base_width == 0 || self.train.critic_arch.layers < 2 {
            return Err(Error::Config("critic needs a positive width and at least 2 layers".into()));
        }
        if self.phase1.epochs == 0 || self.phase1.batch_size < 2 || !(self.phase1.learning_rate > 0.0) {
            return Err(Error::Config("phase-1 needs epochs ≥ 1, batch size ≥ 2 and a positive learning rate".into()));
        }
        if self.phase1.steps_per_epoch == Some(0) {
            return Err(Error::Config("`phase1_steps_per_epoch` must be positive".into()));
        }
        if !(self.pipeline.box_expansion >= 0.0) || !self.pipeline.box_expansion.is_finite() {
            return Err(Error::Config("`box_expansion` must be a non-negative number".into()));
        }
        Ok(())
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("config line {}: expected `key = value`, got `{line}`", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Defaults, then the file, then `--set`, then `flags`.
fn build_config(common: &Common, flags: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut pairs = Vec::new();
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        pairs.extend(parse_config_text(&text)?);
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = common.seed {
        pairs.push(("seed".into(), seed.to_string()));
    }
    for (k, v) in flags {
        if let Some(v) = v {
            pairs.push((k.to_string(), v.clone()));
        }
    }
    // Later assignments win; apply in order so `seed` fans out first.
    let mut last: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, (k, _)) in pairs.iter().enumerate() {
        last.insert(k.as_str(), i);
    }
    for (i, (k, v)) in pairs.iter().enumerate() {
        if last[k.as_str()] == i {
            cfg.apply(k, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn opt<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

/// Refuses to write into a non-empty directory unless `force` is set.
fn check_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.is_file() {
        return Err(Error::Config(format!("output {} is a file", dir.display())));
    }
    let non_empty = fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty && !force {
        return Err(Error::Config(format!(
            "output directory {} is not empty (use --force to overwrite)",
            dir.display()
        )));
    }
    Ok(())
}

fn check_output_file(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Config(format!("{} exists (use --force to overwrite)", path.display())));
    }
    Ok(())
}

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")));
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(&a),
        Command::Train(TrainCommand::Phase1(a)) => train1(&a),
        Command::Train(TrainCommand::Phase2(a)) => train2(&a),
        Command::Deidentify(a) => stream(&a, Mode::Deidentify).map(|_| ()),
        Command::Reverse(a) => stream(&a, Mode::Reverse).map(|_| ()),
        Command::Eval(a) => eval(&a),
        Command::Ablate(a) => ablation(&a),
    }
}

fn synth(a: &SynthArgs) -> Result<()> {
    let cfg = build_config(
        &a.common,
        &[
            ("subjects", opt(&a.subjects)),
            ("sequences", opt(&a.sequences)),
            ("frames", opt(&a.frames)),
            ("scenes", opt(&a.scenes)),
        ],
    )?;
    check_output_dir(&a.out, a.common.force)?;
    let ds = generate_synthetic_dataset(&cfg.synthetic, cfg.synthetic_seed)?;
    ds.save(&a.out)?;
    println!("wrote {} frames of {} subjects to {}", ds.len(), ds.subjects().len(), a.out.display());
    if cfg.scenes > 0 {
        let scenes = synthetic_scenes(&ds, cfg.scenes, cfg.scene_width, cfg.scene_height, cfg.synthetic_seed)?;
        let dir = a.out.join("scenes");
        write_scenes(&dir, &scenes)?;
        println!("wrote {} scene frames to {}", scenes.len(), dir.display());
    }
    Ok(())
}

fn train1(a: &TrainArgs) -> Result<()> {
    let cfg = build_config(&a.common, &[("phase1_epochs", opt(&a.epochs))])?;
    let model_path = a.out.join(MATCHER_FILE);
    check_output_file(&model_path, a.common.force)?;
    let ds = Dataset::load(&a.data)?;
    let p1 = Phase1Config {
        t: ds.t(),
        ..cfg.phase1.clone()
    };
    let (model, history) = train_phase1_logged(&ds, &p1)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    model.save(&model_path)?;
    write_text(&a.out.join("phase1_history.csv"), &phase1_history_csv(&history))?;
    let acc = pair_accuracy(&model, &ds, 200, p1.seed)?;
    println!("phase1: wrote {}; training pair accuracy per label {acc:.3?}", model_path.display());
    Ok(())
}

fn train2(a: &TrainArgs) -> Result<()> {
    let cfg = build_config(&a.common, &[("epochs", opt(&a.epochs)), ("sign", a.sign.clone())])?;
    let matcher_path = a.matcher.clone().unwrap_or_else(|| a.out.join(MATCHER_FILE));
    let gen_path = a.out.join(GENERATOR_FILE);
    check_output_file(&gen_path, a.common.force)?;
    require_file(&matcher_path)?;
    let ds = Dataset::load(&a.data)?;
    if cfg.train.t() != ds.t() {
        return Err(Error::Config(format!(
            "sign vector has {} entries but the dataset has {} labels",
            cfg.train.t(),
            ds.t()
        )));
    }
    let matcher = MatcherModel::load(&matcher_path, Some(ds.t()))?;
    let out = train_phase2(&ds, &matcher, &cfg.train)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    out.generator.save(&gen_path)?;
    save_critic(&out.critic, ds.t(), &a.out.join(CRITIC_FILE))?;
    out.history.write_csv(&a.out.join("history.csv"))?;
    println!(
        "phase2: wrote {} (sign {}, fingerprint {})",
        gen_path.display(),
        cfg.train.sign_vector,
        out.generator.fingerprint()
    );
    Ok(())
}

fn stream(a: &StreamArgs, mode: Mode) -> Result<StreamSummary> {
    let cfg = build_config(&a.common, &[])?;
    check_output_dir(&a.out, a.common.force)?;
    if !a.input.is_dir() {
        return Err(Error::io(&a.input, std::io::Error::new(std::io::ErrorKind::NotFound, "no such directory")));
    }
    require_file(&a.checkpoint)?;
    let generator = Generator::load(&a.checkpoint, None)?;
    if mode == Mode::Reverse {
        let summary = a.input.join(SUMMARY_FILE);
        if summary.is_file() {
            let text = fs::read_to_string(&summary).map_err(|e| Error::io(&summary, e))?;
            let prev: StreamSummary = serde_json::from_str(&text).map_err(|source| Error::Json {
                context: summary.display().to_string(),
                source,
            })?;
            if prev.checkpoint_fingerprint != generator.fingerprint() {
                return Err(Error::checkpoint(
                    &a.checkpoint,
                    format!(
                        "fingerprint {} does not match {} recorded in {}",
                        generator.fingerprint(),
                        prev.checkpoint_fingerprint,
                        summary.display()
                    ),
                ));
            }
        }
    }
    let detector = match (&a.detections, mode) {
        (Some(path), Mode::Deidentify) => Some(OracleDetector::load(path)?),
        _ => None,
    };
    let summary = process_stream(
        &a.input,
        &a.out,
        mode,
        &generator,
        detector.as_ref().map(|d| d as &dyn crate::pipeline::Detector),
        &cfg.pipeline,
    )?;
    println!(
        "{}",
        serde_json::to_string_pretty(&summary).map_err(|source| Error::Json {
            context: SUMMARY_FILE.into(),
            source
        })?
    );
    Ok(summary)
}

/// De-identified crops of the whole dataset, noise seed = position + `seed`.
pub fn deidentify_dataset(generator: &Generator, ds: &Dataset, seed: u64) -> Result<Vec<FaceCrop>> {
    let xs: Vec<&FaceCrop> = ds.samples().iter().map(|s| &s.crop).collect();
    let mut out = Vec::with_capacity(xs.len());
    for (c, chunk) in xs.chunks(64).enumerate() {
        let seeds: Vec<u64> = (0..chunk.len()).map(|i| seed.wrapping_add((c * 64 + i) as u64)).collect();
        out.extend(generator.deidentify(chunk, &seeds)?);
    }
    Ok(out)
}

fn eval(a: &EvalArgs) -> Result<()> {
    let cfg = build_config(&a.common, &[])?;
    let (first_view, second_view) = a.protocol.views();
    let needs_generator = first_view == View::Deidentified || second_view == View::Deidentified;
    if needs_generator && a.checkpoint.is_none() {
        return Err(Error::Config(format!("the {} protocol needs --checkpoint", a.protocol)));
    }
    let ds = Dataset::load(&a.data)?;
    let verifier = a.verifier.as_deref().map(|p| MatcherModel::load(p, None)).transpose()?;
    if let Some(v) = &verifier {
        if a.label >= v.t() {
            return Err(Error::Config(format!("--label {} but the verifier has {} heads", a.label, v.t())));
        }
    }
    let original: Vec<FaceCrop> = ds.samples().iter().map(|s| s.crop.clone()).collect();
    let deidentified = match &a.checkpoint {
        Some(p) if needs_generator => deidentify_dataset(&Generator::load(p, None)?, &ds, cfg.pipeline.seed)?,
        _ => Vec::new(),
    };
    let pick = |v: View| if v == View::Original { &original } else { &deidentified };
    let matcher_scorer;
    let scorer: &dyn Scorer = match &verifier {
        Some(model) => {
            matcher_scorer = MatcherScorer { model, label: a.label };
            &matcher_scorer
        }
        None => &PixelScorer,
    };
    let seed = cfg.pipeline.seed;
    let (env, pairs) = verification_protocol(&ds, pick(first_view), pick(second_view), a.protocol, a.pairs, scorer, seed)?;
    let rows = environment_rows(a.protocol.name(), &env, seed)?;
    let p = a.protocol.name();
    let (mut gi, mut ii) = (env.genuine.iter(), env.impostor.iter());
    let ordered: Vec<f64> = pairs
        .iter()
        .map(|pr| *if pr.genuine { gi.next() } else { ii.next() }.expect("one score per pair"))
        .collect();
    let mut pair_csv = String::from("first,second,genuine,score\n");
    for (pr, s) in pairs.iter().zip(&ordered) {
        pair_csv.push_str(&format!("{},{},{},{s}\n", pr.first, pr.second, u8::from(pr.genuine)));
    }
    write_text(&a.report.join(format!("metrics_{p}.csv")), &metrics_csv(&rows))?;
    write_text(&a.report.join(format!("scores_{p}.txt")), &scores_text(&ordered))?;
    write_text(&a.report.join(format!("pairs_{p}.csv")), &pair_csv)?;
    write_text(
        &a.report.join(format!("hist_{p}.svg")),
        &histogram_svg(&format!("{p}: genuine vs impostor"), &env, 30),
    )?;
    for r in &rows {
        println!("{:<8} {:<14} {:.4} ± {:.4}", r.metric, r.protocol, r.mean, r.sd);
    }
    info!("report written to {}", a.report.display());
    Ok(())
}

fn ablation(a: &AblateArgs) -> Result<()> {
    let cfg = build_config(&a.common, &[("epochs", opt(&a.epochs))])?;
    a.param.scaled(&cfg.train, a.factor)?.validate()?;
    let csv_path = a.out.join("ablation.csv");
    check_output_file(&csv_path, a.common.force)?;
    require_file(&a.matcher)?;
    let train = Dataset::load(&a.data)?;
    let eval = match &a.eval_data {
        Some(p) => Dataset::load(p)?,
        None => train.clone(),
    };
    let matcher = MatcherModel::load(&a.matcher, Some(train.t()))?;
    let report = ablate(&train, &eval, &matcher, &cfg.train, a.param, a.factor)?;
    write_text(&csv_path, &report.to_csv())?;
    print!("{}", report.to_csv());
    if report.ablated.flagged() {
        println!("flagged: ablated run diverged or broke the critic constraint");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_layers_override_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.cfg");
        fs::write(&file, "# desk run\nepochs = 3\nomega_mse = 10\nsign = -1,-1,-1,-1\n").unwrap();
        let common = Common {
            config: Some(file),
            set: vec!["epochs=4".into()],
            seed: Some(9),
            force: false,
        };
        let cfg = build_config(&common, &[("epochs", Some("5".into())), ("subjects", None)]).unwrap();
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.train.weights.mse, 10.0);
        assert_eq!(cfg.train.sign_vector, SignVector::all_different(4));
        assert_eq!((cfg.train.seed, cfg.phase1.seed, cfg.pipeline.seed), (9, 9, 9));
        assert_eq!(cfg.synthetic.subjects, SyntheticSpec::default().subjects);
    }

    #[test]
    fn bad_settings_are_config_errors() {
        let mut cfg = RunConfig::default();
        for (k, v) in [("nope", "1"), ("epochs", "x"), ("sign", "1,1,1,1"), ("ano_sign", "flipped")] {
            assert!(matches!(cfg.apply(k, v), Err(Error::Config(_))), "{k}={v}");
        }
        assert!(parse_config_text("epochs 3").is_err());
        let common = Common {
            set: vec!["batch_size=2".into()],
            ..Common::default()
        };
        assert!(matches!(build_config(&common, &[]), Err(Error::Config(_))));
    }

    #[test]
    fn every_listed_key_is_accepted() {
        let sample = |k: &str| match k {
            "categories" => "2,3,3",
            "sign" => "-1,1,1,1",
            "ano_sign" => "corrected",
            "matcher_scale" | "critic_layers" | "encoder_depth" | "decoder_depth" => "2",
            _ => "4",
        };
        for k in CONFIG_KEYS {
            RunConfig::default().apply(k, sample(k)).unwrap_or_else(|e| panic!("{k}: {e}"));
        }
    }

    #[test]
    fn usage_errors_exit_with_two() {
        assert_eq!(run(["revdeid", "synth"]), EXIT_USAGE);
        assert_eq!(run(["revdeid", "eval", "--data", "d", "--protocol", "xy", "--report", "r"]), EXIT_USAGE);
        assert_eq!(
            run(["revdeid", "ablate", "--data", "d", "--matcher", "m", "--param", "omega_x", "--factor", "2", "--out", "o"]),
            EXIT_USAGE
        );
        assert_eq!(run(["revdeid", "--help"]), EXIT_OK);
    }
}
