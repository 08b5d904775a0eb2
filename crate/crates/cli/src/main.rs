use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::Value;

use scenecount::config::{frames_of, PipelineConfig};
use scenecount::dataset::{
    compute_statistics, format_stats_csv, format_stats_table, integrate, split_metadata,
};
use scenecount::eval::{
    format_classification_report, macro_average, one_vs_rest, weighted_average, CountingMetrics,
    INTEGRATED_COLUMN,
};
use scenecount::pipeline::{FrameRecord, Stage};
use scenecount::visualize::save_png;
use scenecount::{
    cross_evaluate, load_manifest, render_result, split_dataset, ConfusionMatrix, EvalDataset,
    Frame, Loaded, ScenarioLabel, SplitSpec,
};
use scenecount_cli::{classify_json, count_json, service};

#[derive(Parser)]
#[command(
    name = "scenecount",
    version,
    about = "Scenario-routed person counting"
)]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, short, global = true, env = "SCENECOUNT_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TableFormat {
    Md,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Scenario label and probabilities for an image or a directory of images.
    Classify { input: PathBuf },
    /// Classify, route and count an image or a directory of images.
    Count {
        input: PathBuf,
        /// Include detections or the density map in the output.
        #[arg(long)]
        artifacts: bool,
    },
    /// Counting MAE and RMSE of the automatic pipeline.
    Evaluate {
        /// Manifests to evaluate instead of the configured datasets.
        #[arg(long = "manifest")]
        manifests: Vec<PathBuf>,
    },
    /// Classification report and confusion matrix of the scenario classifier.
    EvaluateCls {
        #[arg(long = "manifest")]
        manifests: Vec<PathBuf>,
        /// Write the confusion matrix as CSV (rows: predicted, columns: ground truth).
        #[arg(long)]
        confusion_csv: Option<PathBuf>,
    },
    /// Every routed model on every dataset, plus the automatic row.
    CrossEval {
        #[arg(long = "manifest")]
        manifests: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "md")]
        format: TableFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Scale and person-count extremes of manifests.
    Stats {
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
        #[arg(long)]
        csv: bool,
    },
    /// Seeded train/validation split of a manifest.
    Split {
        manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
        #[arg(long)]
        out_train: PathBuf,
        #[arg(long)]
        out_val: PathBuf,
        /// Provenance file; defaults to `<out-val>.split.json`.
        #[arg(long)]
        meta: Option<PathBuf>,
    },
    /// Count an image and save the overlay as PNG.
    Render {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the HTTP service.
    Serve {
        /// Overrides `service.listen`.
        #[arg(long)]
        listen: Option<String>,
    },
}

fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn load(config: &Option<PathBuf>) -> Result<Loaded> {
    let Some(path) = config else {
        bail!("no configuration: pass --config or set SCENECOUNT_CONFIG");
    };
    Loaded::from_path(path).with_context(|| format!("loading {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Classify { input } => classify(&load(&cli.config)?, &input),
        Command::Count { input, artifacts } => count(&load(&cli.config)?, &input, artifacts),
        Command::Evaluate { manifests } => evaluate(&load(&cli.config)?, &manifests),
        Command::EvaluateCls {
            manifests,
            confusion_csv,
        } => evaluate_cls(&load(&cli.config)?, &manifests, confusion_csv.as_deref()),
        Command::CrossEval {
            manifests,
            format,
            out,
        } => cross_eval(&load(&cli.config)?, &manifests, format, out.as_deref()),
        Command::Stats { manifests, csv } => stats(&manifests, csv),
        Command::Split {
            manifest,
            seed,
            train_fraction,
            out_train,
            out_val,
            meta,
        } => split(&manifest, seed, train_fraction, &out_train, &out_val, meta),
        Command::Render { input, out } => render(&load(&cli.config)?, &input, &out),
        Command::Serve { listen } => {
            let loaded = load(&cli.config)?;
            let listen = listen.unwrap_or_else(|| loaded.config.service.listen.clone());
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(service::serve(loaded, &listen))
        }
    }
}

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
}

/// The image itself, or the images of a directory in name order.
fn inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if !input.is_dir() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .with_context(|| format!("reading {}", input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    files.sort();
    Ok(files)
}

/// Reads and decodes one image; the error is the decode failure message.
fn read_frame(loaded: &Loaded, path: &Path) -> Result<Frame, String> {
    let bytes = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    loaded.truth.frame(&bytes).map_err(|e| e.to_string())
}

fn print_line(v: &Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn classify(loaded: &Loaded, input: &Path) -> Result<()> {
    let dir = input.is_dir();
    for path in inputs(input)? {
        let mut v = match read_frame(loaded, &path) {
            Ok(frame) => match loaded.pipeline.classify(&frame) {
                Ok(c) => classify_json(&frame.id, &c),
                Err(e) if !dir => bail!("{}: {e}", path.display()),
                Err(e) => serde_json::json!({ "id": frame.id, "error": e.to_string() }),
            },
            Err(e) if !dir => bail!("{e}"),
            Err(e) => serde_json::json!({ "error": e }),
        };
        if dir {
            v["image"] = Value::String(path.display().to_string());
        }
        print_line(&v)?;
    }
    Ok(())
}

fn count(loaded: &Loaded, input: &Path, artifacts: bool) -> Result<()> {
    if !input.is_dir() {
        let frame = read_frame(loaded, input).map_err(anyhow::Error::msg)?;
        return match loaded.pipeline.process_frame(&frame) {
            FrameRecord::Ok(r) => {
                let v = if artifacts {
                    serde_json::to_value(&r)?
                } else {
                    count_json(&r)
                };
                print_line(&v)
            }
            FrameRecord::Error(e) => {
                bail!("{}: {:?} failed: {}", input.display(), e.stage, e.message)
            }
        };
    }
    let paths = inputs(input)?;
    let mut frames = Vec::with_capacity(paths.len());
    let mut decode_errors = Vec::new();
    for (i, p) in paths.iter().enumerate() {
        match read_frame(loaded, p) {
            Ok(f) => frames.push((i, f)),
            Err(e) => decode_errors.push((
                i,
                FrameRecord::failed(p.display().to_string(), Stage::Decode, e),
            )),
        }
    }
    let just_frames: Vec<Frame> = frames.iter().map(|(_, f)| f.clone()).collect();
    let records = loaded
        .pipeline
        .process_stream(&just_frames, &loaded.config.stream)?;
    let mut all: Vec<(usize, FrameRecord)> =
        frames.into_iter().map(|(i, _)| i).zip(records).collect();
    all.extend(decode_errors);
    all.sort_by_key(|(i, _)| *i);
    for (i, rec) in all {
        let rec = if artifacts {
            rec
        } else {
            rec.without_artifacts()
        };
        let mut v = serde_json::to_value(&rec)?;
        v["image"] = Value::String(paths[i].display().to_string());
        print_line(&v)?;
    }
    Ok(())
}

/// Datasets from explicit manifests (named by file stem) or from the
/// configuration.
fn datasets(loaded: &Loaded, manifests: &[PathBuf]) -> Result<Vec<EvalDataset>> {
    if manifests.is_empty() {
        return Ok(loaded.config.evaluation_datasets(&loaded.base_dir)?);
    }
    manifests
        .iter()
        .map(|p| {
            let m = load_manifest(p)?;
            let name = p
                .file_stem()
                .map_or_else(|| m.name.clone(), |s| s.to_string_lossy().into_owned());
            Ok(EvalDataset {
                name,
                frames: frames_of(p, &m.samples),
            })
        })
        .collect()
}

fn evaluate(loaded: &Loaded, manifests: &[PathBuf]) -> Result<()> {
    let sets = datasets(loaded, manifests)?;
    let mut pooled = Vec::new();
    let mut rows = Vec::new();
    for d in &sets {
        let records = loaded
            .pipeline
            .process_stream(&d.frames, &loaded.config.stream)?;
        let mut triples = Vec::with_capacity(records.len());
        for (f, rec) in d.frames.iter().zip(records) {
            let truth = f
                .truth
                .as_ref()
                .map(|s| s.count())
                .context("frame without ground truth")?;
            match rec.into_result() {
                Ok(r) => triples.push((format!("{}/{}", d.name, f.id), truth, r.count)),
                Err(e) => bail!("{}/{}: {:?} failed: {}", d.name, e.id, e.stage, e.message),
            }
        }
        rows.push((d.name.clone(), CountingMetrics::from_triples(&triples)?));
        pooled.extend(triples);
    }
    rows.push((
        INTEGRATED_COLUMN.to_string(),
        CountingMetrics::from_triples(&pooled)?,
    ));
    let w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(7).max(7);
    println!(
        "{:<w$} | {:>8} | {:>8} | {:>6}",
        "Dataset", "MAE", "RMSE", "N"
    );
    for (name, m) in rows {
        println!("{name:<w$} | {:>8.2} | {:>8.2} | {:>6}", m.mae, m.rmse, m.n);
    }
    Ok(())
}

fn evaluate_cls(
    loaded: &Loaded,
    manifests: &[PathBuf],
    confusion_csv: Option<&Path>,
) -> Result<()> {
    let sets = datasets(loaded, manifests)?;
    let mut cm = ConfusionMatrix::zeros(ScenarioLabel::ALL.len());
    for d in &sets {
        for f in &d.frames {
            let truth = f
                .truth
                .as_ref()
                .context("frame without ground truth")?
                .scenario;
            let out = loaded
                .pipeline
                .classify(f)
                .with_context(|| format!("classifying {}/{}", d.name, f.id))?;
            cm.add(truth.code(), out.label.code());
        }
    }
    let names = ScenarioLabel::ALL.map(ScenarioLabel::title);
    let metrics = one_vs_rest(&cm)?;
    print!("{}", format_classification_report(&names, &metrics));
    let (m, wa) = (macro_average(&metrics), weighted_average(&metrics));
    println!(
        "accuracy {:.4}  macro F1 {:.4}  weighted F1 {:.4}",
        cm.accuracy(),
        m.f1,
        wa.f1
    );
    if let Some(p) = confusion_csv {
        fs::write(p, cm.to_display_csv(&names))
            .with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn cross_eval(
    loaded: &Loaded,
    manifests: &[PathBuf],
    format: TableFormat,
    out: Option<&Path>,
) -> Result<()> {
    let sets = datasets(loaded, manifests)?;
    let report = cross_evaluate(&loaded.pipeline, &sets)?;
    let text = match format {
        TableFormat::Md => report.to_markdown(),
        TableFormat::Csv => report.to_csv(),
    };
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn stats(manifests: &[PathBuf], csv: bool) -> Result<()> {
    let loaded: Vec<_> = manifests
        .iter()
        .map(load_manifest)
        .collect::<scenecount::Result<_>>()?;
    let mut rows = loaded
        .iter()
        .map(compute_statistics)
        .collect::<scenecount::Result<Vec<_>>>()?;
    if loaded.len() > 1 {
        let mut all = compute_statistics(&integrate(&loaded)?)?;
        all.name = INTEGRATED_COLUMN.to_string();
        rows.push(all);
    }
    print!(
        "{}",
        if csv {
            format_stats_csv(&rows)
        } else {
            format_stats_table(&rows)
        }
    );
    Ok(())
}

fn split(
    manifest: &Path,
    seed: u64,
    train_fraction: f64,
    out_train: &Path,
    out_val: &Path,
    meta: Option<PathBuf>,
) -> Result<()> {
    let m = load_manifest(manifest)?;
    let spec = SplitSpec::new(train_fraction, seed)?;
    let (train, val) = split_dataset(&m, &spec)?;
    train.write(out_train)?;
    val.write(out_val)?;
    let meta = meta.unwrap_or_else(|| out_val.with_extension("split.json"));
    let info = split_metadata(&m, &spec, train.len(), val.len());
    fs::write(&meta, serde_json::to_string_pretty(&info)? + "\n")
        .with_context(|| format!("writing {}", meta.display()))?;
    eprintln!("train {}  val {}", train.len(), val.len());
    Ok(())
}

fn render(loaded: &Loaded, input: &Path, out: &Path) -> Result<()> {
    let frame = read_frame(loaded, input).map_err(anyhow::Error::msg)?;
    let result = loaded
        .pipeline
        .process_frame(&frame)
        .into_result()
        .map_err(|e| anyhow::anyhow!("{:?} failed: {}", e.stage, e.message))?;
    let cfg: &PipelineConfig = &loaded.config;
    let rgb = frame.rgb()?;
    let img = render_result(&rgb, &result, &cfg.render, &cfg.density)?;
    save_png(&img, out)?;
    print_line(&count_json(&result))
}
