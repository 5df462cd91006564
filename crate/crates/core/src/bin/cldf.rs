//! Command-line driver. Each stage reads and writes `.cldf` files under the run directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use cldf::decoder::{train_decoder, PixelDecoder};
use cldf::diffusion::{extract_features, FileFeatureProvider};
use cldf::fusion::SeedSelection;
use cldf::metrics::{evaluate, write_samples_csv};
use cldf::pipeline::{self, stage_seed, stream, PipelineConfig, PreparedImage};
use cldf::raster::{ActivationMap, AggregatedFeatures, ImageTensor, MapKind, SegmentationMask};
use cldf::saliency::{load_cam, mean_gradient_map, LogisticClassifier};
use cldf::synth::{read_index, read_map, write_dataset, DatasetIndex, IndexEntry};
use cldf::tensor_io::{read_tensor, write_tensor};
use cldf::{Error, Result};

#[derive(Parser)]
#[command(name = "cldf", version, about = "Label-free segmentation from diffusion features and weak saliency maps")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON run configuration; missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "run")]
    run_dir: PathBuf,
    /// Dataset directory holding index.json; defaults to <run-dir>/data.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        /// Overrides `synth.count`.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Extract aggregated per-pixel features.
    Features {
        #[arg(long, value_enum, default_value_t = Provider::Toy)]
        provider: Provider,
        /// For `files`: directory with `<id>/t<timestep>.cldf` NHWC exports.
        #[arg(long)]
        feature_dir: Option<PathBuf>,
    },
    /// Binarize CAM and gradient maps and select seed pixels.
    Seeds {
        /// Logistic classifier weights (HWC f32, `seed_meta.bias`); when given,
        /// gradient maps are computed instead of read from the dataset.
        #[arg(long)]
        classifier: Option<PathBuf>,
    },
    /// Train the pixel decoder on the selected seeds.
    Train,
    /// Decode features and cluster each image into a binary mask.
    Infer,
    /// Score predicted masks against ground truth.
    Eval {
        /// Directory of predicted masks; defaults to <run-dir>/masks.
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Directory of ground-truth masks with matching file names.
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Sweep decoder output dimension and depth on the dataset.
    Ablate,
    /// Print the effective configuration as JSON.
    Config,
    /// Every stage in order: synth, features, seeds, train, infer, eval.
    Run {
        #[arg(long)]
        count: Option<usize>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Provider {
    Toy,
    Files,
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: &'a str,
    message: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = ErrorReport {
                error: e.kind(),
                message: e.to_string(),
            };
            eprintln!("{}", serde_json::to_string(&report).expect("error report serializes"));
            ExitCode::FAILURE
        }
    }
}

struct Ctx {
    cfg: PipelineConfig,
    run_dir: PathBuf,
    data_dir: PathBuf,
}

impl Ctx {
    fn dir(&self, name: &str) -> Result<PathBuf> {
        let d = self.run_dir.join(name);
        fs::create_dir_all(&d).map_err(|source| Error::IoAt { path: d.clone(), source })?;
        Ok(d)
    }

    fn index(&self) -> Result<DatasetIndex> {
        if !self.data_dir.join(cldf::synth::INDEX_FILE).exists() {
            return Err(Error::MissingInput(format!(
                "no dataset index in {}; run `cldf synth` or pass --data",
                self.data_dir.display()
            )));
        }
        read_index(&self.data_dir)
    }

    fn stage_input(&self, stage: &str, id: &str) -> Result<PathBuf> {
        let p = self.run_dir.join(stage).join(format!("{id}.cldf"));
        if !p.exists() {
            return Err(Error::MissingInput(format!("{} (run the {stage} stage first)", p.display())));
        }
        Ok(p)
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = cli.global;
    if let Some(n) = g.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    }
    let mut cfg = match &g.config {
        Some(p) => PipelineConfig::from_file(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    let count = match &cli.command {
        Command::Synth { count } | Command::Run { count } => *count,
        _ => None,
    };
    if let Some(n) = count {
        cfg.synth.count = n;
    }
    cfg.validate()?;
    let data_dir = g.data.clone().unwrap_or_else(|| g.run_dir.join("data"));
    let ctx = Ctx {
        cfg,
        run_dir: g.run_dir,
        data_dir,
    };
    match cli.command {
        Command::Synth { .. } => synth(&ctx),
        Command::Features { provider, feature_dir } => features(&ctx, provider, feature_dir.as_deref()),
        Command::Seeds { classifier } => seeds(&ctx, classifier.as_deref()),
        Command::Train => train(&ctx),
        Command::Infer => infer(&ctx),
        Command::Eval { pred, gt } => eval(&ctx, pred, gt),
        Command::Ablate => ablate(&ctx),
        Command::Config => {
            println!("{}", serde_json::to_string_pretty(&ctx.cfg.echo())?);
            Ok(())
        }
        Command::Run { .. } => {
            synth(&ctx)?;
            features(&ctx, Provider::Toy, None)?;
            seeds(&ctx, None)?;
            train(&ctx)?;
            infer(&ctx)?;
            eval(&ctx, None, None)
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|source| Error::IoAt {
        path: path.to_path_buf(),
        source,
    })
}

fn synth(ctx: &Ctx) -> Result<()> {
    let index = write_dataset(&ctx.data_dir, &ctx.cfg.synth, ctx.cfg.seed)?;
    println!("wrote {} scenes to {}", index.scenes.len(), ctx.data_dir.display());
    Ok(())
}

fn read_image(ctx: &Ctx, e: &IndexEntry) -> Result<ImageTensor> {
    ImageTensor::from_container(&read_tensor(ctx.data_dir.join(&e.image))?)
}

fn features(ctx: &Ctx, provider: Provider, feature_dir: Option<&Path>) -> Result<()> {
    let index = ctx.index()?;
    let out = ctx.dir("features")?;
    let fc = &ctx.cfg.features;
    for (i, e) in index.scenes.iter().enumerate() {
        let image = read_image(ctx, e)?;
        let seed = stage_seed(ctx.cfg.seed, i, stream::FEATURES);
        let feats = match provider {
            Provider::Toy => pipeline::compute_features(&image, fc, seed)?,
            Provider::Files => {
                let root = feature_dir
                    .ok_or_else(|| Error::InvalidConfig("--provider files needs --feature-dir".into()))?;
                let files: BTreeMap<usize, PathBuf> = fc
                    .timesteps
                    .iter()
                    .map(|&t| (t, root.join(&e.id).join(format!("t{t}.cldf"))))
                    .collect();
                let p = FileFeatureProvider::open(&files)?;
                extract_features(&image, &p, &fc.timesteps, &fc.schedule.build()?, seed, fc.upsample)?
            }
        };
        write_tensor(out.join(format!("{}.cldf", e.id)), &feats.to_container())?;
    }
    println!("features for {} images in {}", index.scenes.len(), out.display());
    Ok(())
}

fn load_classifier(path: &Path) -> Result<LogisticClassifier> {
    let t = read_tensor(path)?;
    let bias = t
        .seed_meta
        .as_ref()
        .and_then(|m| m.get("bias"))
        .and_then(Value::as_f64)
        .unwrap_or(0.0) as f32;
    LogisticClassifier::new(ImageTensor::from_container(&t)?, bias)
}

fn seeds(ctx: &Ctx, classifier: Option<&Path>) -> Result<()> {
    let index = ctx.index()?;
    let clf = classifier.map(load_classifier).transpose()?;
    let schedule = ctx.cfg.features.schedule.build()?;
    let (seed_dir, cam_dir, grad_dir) = (ctx.dir("seeds")?, ctx.dir("maps/cam")?, ctx.dir("maps/gradient")?);
    let cap = ctx.cfg.train.selection_cap();
    let mut skipped = 0;
    for (i, e) in index.scenes.iter().enumerate() {
        let image = read_image(ctx, e)?;
        let (h, w) = (image.height(), image.width());
        let cam = load_cam(ctx.data_dir.join(&e.cam), h, w)?;
        let gradient = match (&clf, &e.gradient) {
            (Some(c), _) => mean_gradient_map(
                &image,
                c,
                &schedule,
                &ctx.cfg.saliency.timesteps,
                stage_seed(ctx.cfg.seed, i, stream::SALIENCY),
                ctx.cfg.saliency.reduction,
            )?,
            (None, Some(p)) => read_map(&ctx.data_dir.join(p), MapKind::MeanGradient)?,
            (None, None) => {
                return Err(Error::MissingInput(format!(
                    "{}: no gradient map in the index and no --classifier",
                    e.id
                )))
            }
        };
        let s = pipeline::seeds_for(
            &cam,
            &gradient,
            &ctx.cfg.fusion,
            cap,
            stage_seed(ctx.cfg.seed, i, stream::SEEDS),
        )?;
        skipped += usize::from(s.skip());
        let file = format!("{}.cldf", e.id);
        write_tensor(cam_dir.join(&file), &cam.to_container())?;
        write_tensor(grad_dir.join(&file), &gradient.to_container())?;
        write_tensor(seed_dir.join(&file), &s.to_container())?;
    }
    println!(
        "seeds for {} images ({skipped} without foreground) in {}",
        index.scenes.len(),
        seed_dir.display()
    );
    Ok(())
}

fn load_features(ctx: &Ctx, id: &str) -> Result<AggregatedFeatures> {
    AggregatedFeatures::from_container(&read_tensor(ctx.stage_input("features", id)?)?)
}

fn load_seeds(ctx: &Ctx, id: &str) -> Result<SeedSelection> {
    SeedSelection::from_container(&read_tensor(ctx.stage_input("seeds", id)?)?)
}

fn train(ctx: &Ctx) -> Result<()> {
    let index = ctx.index()?;
    let dataset = index
        .scenes
        .iter()
        .map(|e| Ok((load_features(ctx, &e.id)?, load_seeds(ctx, &e.id)?)))
        .collect::<Result<Vec<_>>>()?;
    let outcome = train_decoder(&dataset, &ctx.cfg.train, ctx.cfg.seed ^ stream::TRAIN)?;
    let echo = ctx.cfg.echo();
    outcome.decoder.save(&ctx.run_dir.join("checkpoint"), echo.clone())?;
    write_json(
        &ctx.run_dir.join("train_trace.json"),
        &json!({ "trace": outcome.trace, "config": echo }),
    )?;
    let last = outcome.trace.epoch_means.last().copied().unwrap_or(f64::NAN);
    println!("trained {:?}, final epoch loss {last:.4}", outcome.decoder.sizes());
    Ok(())
}

fn infer(ctx: &Ctx) -> Result<()> {
    let index = ctx.index()?;
    let ckpt = ctx.run_dir.join("checkpoint");
    if !ckpt.join("manifest.json").exists() {
        return Err(Error::MissingInput(format!("{} (run the train stage first)", ckpt.display())));
    }
    let net = PixelDecoder::load(&ckpt)?;
    let out = ctx.dir("masks")?;
    for (i, e) in index.scenes.iter().enumerate() {
        let mask = pipeline::infer(
            &load_features(ctx, &e.id)?,
            &net,
            &load_seeds(ctx, &e.id)?,
            &ctx.cfg.kmeans,
            stage_seed(ctx.cfg.seed, i, stream::KMEANS),
        )?;
        write_tensor(out.join(format!("{}.cldf", e.id)), &mask.to_container())?;
        let pgm = out.join(format!("{}.pgm", e.id));
        fs::write(&pgm, mask.to_pgm()).map_err(|source| Error::IoAt { path: pgm, source })?;
    }
    println!("masks for {} images in {}", index.scenes.len(), out.display());
    Ok(())
}

fn read_mask(path: &Path) -> Result<SegmentationMask> {
    SegmentationMask::from_container(&read_tensor(path)?)
}

/// (id, prediction path, ground-truth path) for every mask to score.
fn eval_pairs(ctx: &Ctx, pred: Option<PathBuf>, gt: Option<PathBuf>) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let pred = pred.unwrap_or_else(|| ctx.run_dir.join("masks"));
    if let Some(gt) = gt {
        let mut ids = Vec::new();
        let entries = fs::read_dir(&pred).map_err(|source| Error::IoAt {
            path: pred.clone(),
            source,
        })?;
        for entry in entries {
            let path = entry?.path();
            if path.extension().is_some_and(|x| x == cldf::tensor_io::EXTENSION) {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    ids.push(stem.to_string());
                }
            }
        }
        ids.sort();
        if ids.is_empty() {
            return Err(Error::MissingInput(format!("no .cldf masks in {}", pred.display())));
        }
        return ids
            .into_iter()
            .map(|id| {
                let g = gt.join(format!("{id}.cldf"));
                if !g.exists() {
                    return Err(Error::MissingInput(format!("ground truth {}", g.display())));
                }
                Ok((id.clone(), pred.join(format!("{id}.cldf")), g))
            })
            .collect();
    }
    let index = ctx.index()?;
    index
        .scenes
        .iter()
        .map(|e| {
            let g = e
                .gt
                .as_ref()
                .ok_or_else(|| Error::MissingInput(format!("{}: no ground truth in the index", e.id)))?;
            let p = pred.join(format!("{}.cldf", e.id));
            if !p.exists() {
                return Err(Error::MissingInput(format!("{} (run the infer stage first)", p.display())));
            }
            Ok((e.id.clone(), p, ctx.data_dir.join(g)))
        })
        .collect()
}

fn eval(ctx: &Ctx, pred: Option<PathBuf>, gt: Option<PathBuf>) -> Result<()> {
    let pairs = eval_pairs(ctx, pred, gt)?;
    let masks = pairs
        .iter()
        .map(|(id, p, g)| Ok((id.clone(), read_mask(p)?, read_mask(g)?)))
        .collect::<Result<Vec<_>>>()?;
    let ev = evaluate(masks.iter().map(|(id, p, g)| (id.clone(), p, g)))?;
    fs::create_dir_all(&ctx.run_dir).map_err(|source| Error::IoAt {
        path: ctx.run_dir.clone(),
        source,
    })?;
    let report = ev.report.clone().with_config(ctx.cfg.echo());
    write_json(&ctx.run_dir.join("report.json"), &report)?;
    write_samples_csv(&ctx.run_dir.join("samples.csv"), &ev.samples)?;
    println!(
        "dice {:.4} ± {:.4}, iou {:.4} ± {:.4} over {} images",
        report.dice_mean, report.dice_std, report.iou_mean, report.iou_std, report.n
    );
    Ok(())
}

fn ablate(ctx: &Ctx) -> Result<()> {
    let index = ctx.index()?;
    let images = index
        .scenes
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let image = read_image(ctx, e)?;
            let features = match ctx.run_dir.join("features").join(format!("{}.cldf", e.id)) {
                p if p.exists() => AggregatedFeatures::from_container(&read_tensor(p)?)?,
                _ => pipeline::compute_features(&image, &ctx.cfg.features, stage_seed(ctx.cfg.seed, i, stream::FEATURES))?,
            };
            let gradient: ActivationMap = match &e.gradient {
                Some(p) => read_map(&ctx.data_dir.join(p), MapKind::MeanGradient)?,
                None => return Err(Error::MissingInput(format!("{}: ablation needs gradient maps", e.id))),
            };
            let gt = e.gt.as_ref().map(|p| read_mask(&ctx.data_dir.join(p))).transpose()?;
            Ok(PreparedImage {
                id: e.id.clone(),
                features,
                cam: load_cam(ctx.data_dir.join(&e.cam), image.height(), image.width())?,
                gradient,
                gt,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = pipeline::ablate(&images, &ctx.cfg)?;
    fs::create_dir_all(&ctx.run_dir).map_err(|source| Error::IoAt {
        path: ctx.run_dir.clone(),
        source,
    })?;
    pipeline::write_ablation_csv(&ctx.run_dir.join("ablation.csv"), &rows)?;
    write_json(
        &ctx.run_dir.join("ablation.json"),
        &json!({ "rows": rows, "config": ctx.cfg.echo() }),
    )?;
    for r in &rows {
        println!("{:<10} dim {:>2} depth {} dice {:.4}", r.sweep, r.output_dim, r.depth, r.dice_mean);
    }
    Ok(())
}
