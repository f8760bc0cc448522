//! Command-line front end. `main` only parses arguments and maps errors to
//! exit codes; everything else lives here so it can be driven from tests.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::ablation::{block_settings, fraction_settings, run_ablation};
use crate::archive::TensorArchive;
use crate::backbone::{init_student, load_teacher, BackboneHeader, NetworkHandle, Normalization, PyramidConfig, META_FORMAT};
use crate::config::{PathsConfig, PyramidSection, RunConfig, DATA_ROOT_ENV};
use crate::datasets::{
    generate_synthetic, load_category, noise_texture_classes, pretrain_toy_teacher, resize_rgb,
    structured_texture_classes, write_category, CategorySet, ImageSource, MaskSource, PretrainOptions, SynthSpec,
};
use crate::error::{Error, Result};
use crate::metrics::{EvalOptions, EvalReport};
use crate::nn::Architecture;
use crate::scorer::{score_images, write_map, ScoreOptions};
use crate::trainer::{dump_features, split_dataset, train, Checkpoint, TrainOptions};
use crate::viz::{heatmap, save_png_tagged, write_columns};

pub const DEFAULT_TEACHER_URL: &str = "https://huggingface.co/timm/resnet18.tv_in1k/resolve/main/model.safetensors";

const BEST_FILE: &str = "best.safetensors";
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "stfpm", version, about = "Student-teacher feature pyramid matching for anomaly detection")]
pub struct Cli {
    /// Log progress (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Obtain teacher weights: download, import a file, or pretrain the toy backbone.
    FetchTeacher(FetchArgs),
    /// Write a synthetic category in the MVTec directory layout.
    SynthGenerate(SynthArgs),
    /// Train one student per category.
    Train(TrainArgs),
    /// Evaluate trained students and write report.txt, report.json and curves.csv.
    Eval(EvalArgs),
    /// Score individual images and write their anomaly maps.
    Score(ScoreArgs),
    /// Write per-level and fused heatmaps for each image.
    Visualize(VisualizeArgs),
    /// Write every normalized teacher and student feature vector for one image as JSON lines.
    DumpFeatures(DumpArgs),
    /// Sweep pyramid blocks or training-set fractions.
    Ablate(AblateArgs),
}

/// Settings shared by commands that read a run configuration.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// TOML run configuration; built-in defaults when absent.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = DATA_ROOT_ENV)]
    pub data_root: Option<PathBuf>,
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Restrict to these categories (repeatable).
    #[arg(long = "category")]
    pub categories: Vec<String>,
    /// Pyramid blocks, e.g. `2,3,4`.
    #[arg(long, value_delimiter = ',')]
    pub blocks: Option<Vec<usize>>,
    /// Per-level loss weights matching `--blocks`.
    #[arg(long, value_delimiter = ',')]
    pub weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainOverrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub input_size: Option<usize>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct FetchArgs {
    /// Destination archive.
    #[arg(long, default_value = "teacher.safetensors")]
    pub out: PathBuf,
    /// Pretrain the small backbone on structured synthetic textures.
    #[arg(long, conflicts_with_all = ["noise", "from", "url"])]
    pub toy: bool,
    /// Pretrain the small backbone on texture-free noise (a weak teacher).
    #[arg(long, conflicts_with_all = ["from", "url"])]
    pub noise: bool,
    /// Import a local safetensors file instead of downloading.
    #[arg(long, conflicts_with = "url")]
    pub from: Option<PathBuf>,
    #[arg(long)]
    pub url: Option<String>,
    /// Architecture of an imported file without backbone metadata.
    #[arg(long, default_value = "resnet18")]
    pub arch: String,
    /// Input size recorded for an imported file; pretraining size for --toy/--noise.
    #[arg(long)]
    pub input_size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Dataset root; the category is written to `<out>/<name>`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "synthetic")]
    pub name: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub train_count: Option<usize>,
    #[arg(long)]
    pub test_good: Option<usize>,
    #[arg(long)]
    pub test_defect: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    /// Recompute teacher features for every batch.
    #[arg(long)]
    pub no_teacher_cache: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Checkpoint to evaluate (single category only); defaults to
    /// `<output>/<category>/best.safetensors`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Report directory; defaults to `<output>/eval`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long, default_value = "teacher.safetensors")]
    pub teacher: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
    #[arg(long, default_value = "scores")]
    pub out: PathBuf,
    /// Gaussian smoothing of the fused map.
    #[arg(long)]
    pub smooth: Option<f64>,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Input image; repeat for several.
    #[arg(long, required = true)]
    pub image: Vec<PathBuf>,
    /// Ground-truth mask adding a contour column; give one per `--image`
    /// or none at all.
    #[arg(long)]
    pub mask: Vec<PathBuf>,
    #[arg(long, default_value = "viz")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AblationKind {
    Blocks,
    Fractions,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    #[arg(long, value_enum)]
    pub kind: AblationKind,
    /// Table directory; defaults to `<output>/ablation`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    category: &'a str,
    run_fingerprint: String,
    train_fingerprint: &'a str,
    teacher_fingerprint: &'a str,
    best_epoch: usize,
    best_val_loss: f64,
    epochs_run: usize,
    train_images: usize,
    val_images: usize,
}

/// Run-level index of trained categories, kept in `<output>/manifest.json`.
/// Each `train` invocation merges its categories in, so categories trained by
/// separate processes end up in one index.
#[derive(Debug, Default, Serialize, Deserialize)]
struct ManifestIndex {
    categories: std::collections::BTreeMap<String, IndexEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    checkpoint: PathBuf,
    run_fingerprint: String,
    best_epoch: usize,
    best_val_loss: f64,
}

impl ManifestIndex {
    fn load(output: &Path) -> Result<Self> {
        let path = output.join(MANIFEST_FILE);
        match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(Error::file(&path, e)),
        }
    }

    fn save(&self, output: &Path) -> Result<()> {
        let path = output.join(MANIFEST_FILE);
        let body = serde_json::to_string_pretty(self).expect("plain data");
        std::fs::write(&path, body).map_err(|e| Error::file(&path, e))
    }

    /// Checkpoint for `name`, resolved against the output directory.
    fn checkpoint(&self, output: &Path, name: &str) -> PathBuf {
        match self.categories.get(name) {
            Some(entry) => output.join(&entry.checkpoint),
            None => output.join(name).join(BEST_FILE),
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::FetchTeacher(a) => fetch_teacher(&a),
        Command::SynthGenerate(a) => synth_generate(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::Score(a) => score_cmd(&a),
        Command::Visualize(a) => visualize_cmd(&a),
        Command::DumpFeatures(a) => dump_cmd(&a),
        Command::Ablate(a) => ablate_cmd(&a),
    }
}

/// Config file (or defaults) with command-line overrides applied.
pub fn resolve_config(run: &RunArgs, overrides: &TrainOverrides) -> Result<RunConfig> {
    let mut cfg = match &run.config {
        Some(path) => RunConfig::load(path)?,
        None => {
            let mut cfg = RunConfig::default();
            cfg.apply_env();
            cfg
        }
    };
    if let Some(v) = &run.data_root {
        cfg.paths.data_root = v.clone();
    }
    if let Some(v) = &run.teacher {
        cfg.paths.teacher = v.clone();
    }
    if let Some(v) = &run.output {
        cfg.paths.output = v.clone();
    }
    if !run.categories.is_empty() {
        cfg.paths.categories = run.categories.clone();
    }
    if let Some(blocks) = &run.blocks {
        cfg.pyramid.blocks = blocks.clone();
        cfg.pyramid.weights = run.weights.clone();
    } else if let Some(w) = &run.weights {
        cfg.pyramid.weights = Some(w.clone());
    }
    let t = &mut cfg.train;
    t.epochs = overrides.epochs.unwrap_or(t.epochs);
    t.learning_rate = overrides.learning_rate.unwrap_or(t.learning_rate);
    t.batch_size = overrides.batch_size.unwrap_or(t.batch_size);
    t.input_size = overrides.input_size.unwrap_or(t.input_size);
    t.train_fraction = overrides.train_fraction.unwrap_or(t.train_fraction);
    t.seed = overrides.seed.unwrap_or(t.seed);
    cfg.validate()?;
    Ok(cfg)
}

/// Configured categories, or every directory under the data root that has
/// a `train` folder.
pub fn category_names(cfg: &RunConfig) -> Result<Vec<String>> {
    if !cfg.paths.categories.is_empty() {
        return Ok(cfg.paths.categories.clone());
    }
    let root = &cfg.paths.data_root;
    if !root.is_dir() {
        return Err(Error::Layout(format!("data root {} is not a directory", root.display())));
    }
    let entries = std::fs::read_dir(root).map_err(|e| Error::file(root, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::file(root, e))?;
        if entry.path().join("train").is_dir() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(Error::Layout(format!("no category directories under {}", root.display())));
    }
    Ok(names)
}

fn open_teacher(path: &Path, pyramid: &PyramidConfig, input_size: usize) -> Result<NetworkHandle> {
    if !path.exists() {
        return Err(Error::Config(format!(
            "teacher weights {} not found; run `stfpm fetch-teacher` first",
            path.display()
        )));
    }
    let mut teacher = load_teacher(&TensorArchive::load(path)?, pyramid)?;
    if teacher.input_size() != input_size {
        log::warn!(
            "teacher was prepared for {}px inputs, running at {input_size}px",
            teacher.input_size()
        );
        teacher.set_input_size(input_size);
    }
    Ok(teacher)
}

fn fetch_teacher(a: &FetchArgs) -> Result<()> {
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::file(parent, e))?;
    }
    if a.toy || a.noise {
        let mut options = PretrainOptions {
            seed: a.seed,
            ..PretrainOptions::default()
        };
        options.input_size = a.input_size.unwrap_or(options.input_size);
        options.epochs = a.epochs.unwrap_or(options.epochs);
        let variants = if a.noise {
            noise_texture_classes(a.seed)
        } else {
            structured_texture_classes(a.seed)
        };
        let pretrained = pretrain_toy_teacher(&variants, &options)?;
        pretrained.archive.save(&a.out)?;
        println!(
            "wrote {} (toy backbone, holdout accuracy {:.3} on {})",
            a.out.display(),
            pretrained.accuracy,
            pretrained.class_names.join(", ")
        );
        return Ok(());
    }
    let bytes = match &a.from {
        Some(path) => std::fs::read(path).map_err(|e| Error::file(path, e))?,
        None => download(a.url.as_deref().unwrap_or(DEFAULT_TEACHER_URL))?,
    };
    let handle = import_backbone(&TensorArchive::from_bytes(&bytes)?, &a.arch, a.input_size.unwrap_or(256))?;
    handle.to_archive().save(&a.out)?;
    println!(
        "wrote {} ({}, {}px, checksum {})",
        a.out.display(),
        handle.architecture().id,
        handle.input_size(),
        &handle.checksum()[..16]
    );
    Ok(())
}

fn download(url: &str) -> Result<Vec<u8>> {
    log::info!("downloading {url}");
    let mut response = ureq::get(url)
        .call()
        .map_err(|e| Error::Load(format!("download of {url} failed: {e}")))?;
    response
        .body_mut()
        .with_config()
        .limit(2 << 30)
        .read_to_vec()
        .map_err(|e| Error::Load(format!("download of {url} failed: {e}")))
}

/// Accepts either an archive written by this crate or a plain state dict
/// with torchvision layer names, which gets ImageNet preprocessing.
pub fn import_backbone(archive: &TensorArchive, arch: &str, input_size: usize) -> Result<NetworkHandle> {
    if archive.meta(META_FORMAT).is_some() {
        return NetworkHandle::from_archive(archive, true);
    }
    let classes = archive.get("fc.weight").map_or(1000, |t| t.shape[0]);
    let header = BackboneHeader {
        architecture: Architecture::from_id(arch, classes)?,
        input_size,
        normalization: Normalization::imagenet(),
    };
    let mut stamped = archive.clone();
    header.write(&mut stamped);
    NetworkHandle::from_archive(&stamped, true)
}

fn synth_generate(a: &SynthArgs) -> Result<()> {
    let defaults = SynthSpec::default();
    let spec = SynthSpec {
        name: a.name.clone(),
        seed: a.seed.unwrap_or(defaults.seed),
        image_size: a.image_size.unwrap_or(defaults.image_size),
        train_count: a.train_count.unwrap_or(defaults.train_count),
        test_good: a.test_good.unwrap_or(defaults.test_good),
        test_defect: a.test_defect.unwrap_or(defaults.test_defect),
        ..defaults
    };
    let set = generate_synthetic(&spec)?;
    let dir = write_category(&set, &a.out)?;
    println!(
        "wrote {} ({} train, {} test images)",
        dir.display(),
        set.train.len(),
        set.test.len()
    );
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let cfg = resolve_config(&a.run, &a.overrides)?;
    let pyramid = cfg.pyramid()?;
    let teacher = open_teacher(&cfg.paths.teacher, &pyramid, cfg.train.input_size)?;
    let run_fingerprint = cfg.fingerprint()?;
    for name in category_names(&cfg)? {
        let set = load_category(&cfg.paths.data_root, &name, cfg.train.input_size)?;
        let images = set.load_train()?;
        let (tr, va) = split_dataset(&images, cfg.train.val_fraction, cfg.train.train_fraction, cfg.train.seed)?;
        let dir = cfg.paths.output.join(&name);
        cfg.write_snapshot(&dir)?;
        let options = TrainOptions {
            output_dir: Some(dir.clone()),
            no_teacher_cache: a.no_teacher_cache,
        };
        log::info!("{name}: training on {} images, validating on {}", tr.len(), va.len());
        let outcome = train(&teacher, init_student(&teacher, cfg.train.seed), &tr, &va, &cfg.train, &pyramid, &options)?;
        let best = &outcome.best;
        let manifest = Manifest {
            category: &name,
            run_fingerprint: run_fingerprint.clone(),
            train_fingerprint: &best.config_fingerprint,
            teacher_fingerprint: &best.teacher_fingerprint,
            best_epoch: best.epoch,
            best_val_loss: best.val_loss,
            epochs_run: outcome.history.len(),
            train_images: tr.len(),
            val_images: va.len(),
        };
        let path = dir.join(MANIFEST_FILE);
        let body = serde_json::to_string_pretty(&manifest).expect("plain data");
        std::fs::write(&path, body).map_err(|e| Error::file(&path, e))?;
        let mut index = ManifestIndex::load(&cfg.paths.output)?;
        index.categories.insert(
            name.clone(),
            IndexEntry {
                checkpoint: Path::new(&name).join(BEST_FILE),
                run_fingerprint: run_fingerprint.clone(),
                best_epoch: best.epoch,
                best_val_loss: best.val_loss,
            },
        );
        index.save(&cfg.paths.output)?;
        println!("{name}: best epoch {} val loss {:.6} -> {}", best.epoch, best.val_loss, dir.display());
    }
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let cfg = resolve_config(&a.run, &TrainOverrides::default())?;
    let names = category_names(&cfg)?;
    if a.checkpoint.is_some() && names.len() != 1 {
        return Err(Error::Usage("--checkpoint needs exactly one category".into()));
    }
    let requested = a.run.blocks.is_some().then(|| cfg.pyramid()).transpose()?;
    let index = ManifestIndex::load(&cfg.paths.output)?;
    let mut reports = Vec::with_capacity(names.len());
    for name in &names {
        let path = a.checkpoint.clone().unwrap_or_else(|| index.checkpoint(&cfg.paths.output, name));
        if !path.exists() {
            return Err(Error::Config(format!("no checkpoint for `{name}` at {}", path.display())));
        }
        let ckpt = Checkpoint::load(&path)?;
        if let Some(p) = &requested {
            ckpt.check_pyramid(p)?;
        }
        let size = ckpt.student.input_size();
        let teacher = open_teacher(&cfg.paths.teacher, &ckpt.pyramid, size)?;
        let set = load_category(&cfg.paths.data_root, name, size)?;
        reports.push(crate::metrics::evaluate_category(&set, &teacher, &ckpt, &cfg.eval)?);
    }
    let report = EvalReport::merge(reports)?;
    let out = a.out.clone().unwrap_or_else(|| cfg.paths.output.join("eval"));
    report.write_files(&out)?;
    cfg.write_snapshot(&out)?;
    print!("{}", report.to_table());
    Ok(())
}

fn open_model(m: &ModelArgs) -> Result<(NetworkHandle, Checkpoint)> {
    let ckpt = Checkpoint::load(&m.checkpoint)?;
    let teacher = open_teacher(&m.teacher, &ckpt.pyramid, ckpt.student.input_size())?;
    ckpt.check_teacher(&teacher)?;
    Ok((teacher, ckpt))
}

fn file_stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned())
}

/// Hands out output stems, suffixing the input index when two inputs share
/// a file name (`good/000.png` and `crack/000.png`).
#[derive(Default)]
struct Stems(std::collections::HashSet<String>);

impl Stems {
    fn claim(&mut self, path: &Path, index: usize) -> String {
        let mut stem = file_stem(path);
        if !self.0.insert(stem.clone()) {
            stem = format!("{stem}_{index}");
            self.0.insert(stem.clone());
        }
        stem
    }
}

/// The settings a single-checkpoint command actually ran with, for the
/// snapshot in its output directory.
fn model_snapshot(m: &ModelArgs, ckpt: &Checkpoint, score: ScoreOptions) -> RunConfig {
    RunConfig {
        paths: PathsConfig {
            teacher: m.teacher.clone(),
            ..PathsConfig::default()
        },
        pyramid: PyramidSection {
            blocks: ckpt.pyramid.blocks.clone(),
            weights: Some(ckpt.pyramid.weights.clone()),
        },
        train: ckpt.train_config.clone(),
        eval: EvalOptions {
            score,
            ..EvalOptions::default()
        },
    }
}

fn score_cmd(a: &ScoreArgs) -> Result<()> {
    let (teacher, ckpt) = open_model(&a.model)?;
    let size = teacher.input_size();
    let sources: Vec<ImageSource> = a.images.iter().cloned().map(ImageSource::File).collect();
    let images = CategorySet::load_images(&sources, size)?;
    let options = ScoreOptions {
        keep_levels: false,
        smoothing_sigma: a.smooth,
    };
    let scored = score_images(&teacher, &ckpt.student, &images, &ckpt.pyramid, &options)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::file(&a.out, e))?;
    model_snapshot(&a.model, &ckpt, options).write_snapshot(&a.out)?;
    let mut csv = String::from("image,map,score\n");
    let mut stems = Stems::default();
    for (i, ((mut map, score), source)) in scored.into_iter().zip(&sources).enumerate() {
        let (w, h) = source.dimensions()?;
        map.source_size = Some((w as usize, h as usize));
        map.source_id = Some(source.id());
        let stem = stems.claim(Path::new(&source.id()), i);
        write_map(a.out.join(format!("{stem}.bin")), &map)?;
        save_png_tagged(&heatmap(&map.as_grid()), map.source_id.as_deref(), a.out.join(format!("{stem}.png")))?;
        csv.push_str(&format!("{},{stem}.bin,{score}\n", source.id()));
        println!("{}\t{score:.6}", source.id());
    }
    let path = a.out.join("scores.csv");
    std::fs::write(&path, csv).map_err(|e| Error::file(&path, e))
}

fn visualize_cmd(a: &VisualizeArgs) -> Result<()> {
    if !a.mask.is_empty() && a.mask.len() != a.image.len() {
        return Err(Error::Usage(format!("{} masks given for {} images", a.mask.len(), a.image.len())));
    }
    let (teacher, ckpt) = open_model(&a.model)?;
    let size = teacher.input_size();
    let sources: Vec<ImageSource> = a.image.iter().cloned().map(ImageSource::File).collect();
    let images = CategorySet::load_images(&sources, size)?;
    let options = ScoreOptions {
        keep_levels: true,
        smoothing_sigma: None,
    };
    let scored = score_images(&teacher, &ckpt.student, &images, &ckpt.pyramid, &options)?;
    model_snapshot(&a.model, &ckpt, options).write_snapshot(&a.out)?;
    let mut stems = Stems::default();
    for (i, ((mut map, score), source)) in scored.into_iter().zip(&sources).enumerate() {
        map.source_id = Some(source.id());
        let mask = a.mask.get(i).map(|p| MaskSource::File(p.clone()).load(size)).transpose()?;
        let rgb = resize_rgb(&source.load_rgb()?, size);
        let stem = stems.claim(&a.image[i], i);
        let written = write_columns(&rgb, &map, mask.as_ref(), &a.out, &stem)?;
        println!("{}\t{score:.6}", source.id());
        for p in written {
            println!("{}", p.display());
        }
    }
    Ok(())
}

fn dump_cmd(a: &DumpArgs) -> Result<()> {
    let (teacher, ckpt) = open_model(&a.model)?;
    let image = ImageSource::File(a.image.clone()).load(teacher.input_size())?;
    let count = dump_features(&teacher, &ckpt.student, &image, &ckpt.pyramid, &a.out)?;
    println!("wrote {count} feature vectors to {}", a.out.display());
    Ok(())
}

fn ablate_cmd(a: &AblateArgs) -> Result<()> {
    let cfg = resolve_config(&a.run, &a.overrides)?;
    let pyramid = cfg.pyramid()?;
    let (settings, title) = match a.kind {
        AblationKind::Blocks => (block_settings(), "pyramid blocks"),
        AblationKind::Fractions => (fraction_settings(&pyramid), "training-set fraction"),
    };
    let all_blocks = PyramidConfig::uniform(vec![2, 3, 4, 5])?;
    let teacher = open_teacher(&cfg.paths.teacher, &all_blocks, cfg.train.input_size)?;
    let sets = category_names(&cfg)?
        .iter()
        .map(|n| load_category(&cfg.paths.data_root, n, cfg.train.input_size))
        .collect::<Result<Vec<_>>>()?;
    let table = run_ablation(title, &sets, &teacher, &cfg.train, &settings, &cfg.eval)?;
    let out = a.out.clone().unwrap_or_else(|| cfg.paths.output.join("ablation"));
    let stem = match a.kind {
        AblationKind::Blocks => "ablation_blocks",
        AblationKind::Fractions => "ablation_fractions",
    };
    table.write_files(&out, stem)?;
    cfg.write_snapshot(&out)?;
    print!("{}", table.to_text());
    Ok(())
}
