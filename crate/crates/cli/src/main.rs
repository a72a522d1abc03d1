use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use labelsynth_core::arch::{parse_arch, DISCRIMINATOR, DISCRIMINATOR_HEAD, ENCODER, GLOBAL_GENERATOR, LOCAL_ENHANCER};
use labelsynth_core::data::{generate_shapes_dataset, load_dataset, save_dataset};
use labelsynth_core::evaluation::{evaluate_model, train_oracle, EvalStyles, OracleConfig, OracleSegmenter};
use labelsynth_core::feature_encoder::{build_style_catalog, harvest_features, Harvest, StyleCatalog, DEFAULT_K};
use labelsynth_core::training::{run_schedule, ModelBundle, RunOptions, TrainConfig};
use labelsynth_serve::{router, AppState, ServeConfig};

#[derive(Parser)]
#[command(name = "labelsynth", version, about = "Label-map conditioned image synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic shapes dataset to a directory.
    MakeDataset {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        count: usize,
        /// Image size as HEIGHTxWIDTH; both multiples of 32.
        #[arg(long, default_value = "128x256", value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long, default_value_t = 8)]
        styles: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Inspect architecture strings.
    Arch {
        #[command(subcommand)]
        action: ArchAction,
    },
    /// Run the phased training schedule.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Resume from a checkpoint written by a different config.
        #[arg(long)]
        force: bool,
        /// Segmenter used as the perceptual feature network when the config enables it.
        #[arg(long)]
        oracle: Option<PathBuf>,
    },
    /// Train the evaluation segmenter on real images.
    TrainOracle {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Held-out dataset to report accuracy on.
        #[arg(long)]
        holdout: Option<PathBuf>,
    },
    /// Harvest per-instance encoder features of a dataset.
    EncodeFeatures {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cluster harvested features into a per-class style catalog.
    ClusterFeatures {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        classes: usize,
        #[arg(long, default_value_t = DEFAULT_K)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score synthesized images with the segmenter.
    EvalSeg {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        oracle: PathBuf,
        /// Draw styles from this catalog instead of encoding the real images.
        #[arg(long)]
        catalog: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the synthesis API.
    Serve {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        catalog: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Largest accepted map as HEIGHTxWIDTH.
        #[arg(long, default_value = "256x512", value_parser = parse_size)]
        max_size: (usize, usize),
        #[arg(long, default_value_t = 8)]
        max_pending: usize,
        /// Directory of static editor assets served at `/`.
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ArchAction {
    /// Print the layer table of one of the standard networks or of a custom string.
    Inspect {
        /// Architecture string such as "c7s1-64,d128,R128x3,u64,c7s1-3"; overrides `--which`.
        spec: Option<String>,
        #[arg(long, value_enum, default_value_t = Which::Global)]
        which: Which,
        #[arg(long, default_value_t = 1)]
        divisor: usize,
        /// Input as HEIGHTxWIDTHxPLANES.
        #[arg(long, default_value = "256x512x3", value_parser = parse_input)]
        input: (usize, usize, usize),
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    Global,
    Enhancer,
    Discriminator,
    Encoder,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HEIGHTxWIDTH, got `{s}`"))?;
    let n = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((n(h)?, n(w)?))
}

fn parse_input(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    let [h, w, c] = parts.as_slice() else {
        return Err(format!("expected HEIGHTxWIDTHxPLANES, got `{s}`"));
    };
    let n = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((n(h)?, n(w)?, n(c)?))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::MakeDataset { out, count, size, styles, seed } => {
            let ds = generate_shapes_dataset(seed, count, size.0, size.1, styles)?;
            save_dataset(&ds, &out)?;
            println!("wrote {} samples to {}", ds.len(), out.display());
        }
        Command::Arch { action: ArchAction::Inspect { spec, which, divisor, input: (height, width, planes) } } => {
            let graph = match (spec, which) {
                (Some(s), _) => parse_arch(&s)?,
                (None, Which::Global) => parse_arch(GLOBAL_GENERATOR)?,
                (None, Which::Enhancer) => parse_arch(LOCAL_ENHANCER)?,
                (None, Which::Discriminator) => parse_arch(DISCRIMINATOR)?.followed_by(&parse_arch(DISCRIMINATOR_HEAD)?),
                (None, Which::Encoder) => parse_arch(ENCODER)?,
            }
            .scaled(divisor);
            println!("{graph}");
            print!("{}", graph.shape_table(height, width, planes)?);
        }
        Command::Train { config, dataset: data, out, resume, force, oracle } => {
            let text = fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let config = TrainConfig::from_toml(&text)?;
            let dataset = load_dataset(&data)?;
            let oracle = oracle.map(|p| OracleSegmenter::load(&p)).transpose()?;
            if config.use_perceptual && oracle.is_none() {
                bail!("use_perceptual is set; pass --oracle to supply the feature network");
            }
            fs::create_dir_all(&out)?;
            fs::write(out.join("config.toml"), config.to_toml())?;
            let opts = RunOptions {
                out_dir: Some(out.clone()),
                resume,
                force,
                feature_net: oracle.as_ref().map(|o| o as &dyn labelsynth_core::losses::FeatureNet<f32>),
            };
            let run = run_schedule(&config, &dataset, &opts)?;
            println!("trained {} steps; model at {}", run.log.len(), out.join("model.lsb").display());
        }
        Command::TrainOracle { dataset: data, out, epochs, seed, holdout } => {
            let dataset = load_dataset(&data)?;
            let oracle = train_oracle(&dataset, &OracleConfig { seed, epochs, ..Default::default() })?;
            oracle.save(&out)?;
            if let Some(h) = holdout {
                let s = oracle.score_real(&load_dataset(&h)?)?;
                println!("held-out pixel accuracy {:.4}, mean IoU {:.4}", s.pixel_accuracy, s.mean_iou);
            }
            println!("oracle written to {}", out.display());
        }
        Command::EncodeFeatures { bundle, dataset: data, out } => {
            let bundle = ModelBundle::load(&bundle)?;
            let models = bundle.models()?;
            let encoder = models.encoder.as_ref().context("the bundle's model has no encoder")?;
            let harvest = harvest_features(encoder, &bundle.params, &load_dataset(&data)?, 4)?;
            write_json(&out, &harvest)?;
            println!("{} instance features ({} skipped)", harvest.features.len(), harvest.skipped.len());
        }
        Command::ClusterFeatures { features, classes, k, seed, out } => {
            let harvest: Harvest = serde_json::from_str(&fs::read_to_string(&features)?)?;
            let catalog = build_style_catalog(&harvest.features, classes, k, seed);
            fs::write(&out, catalog.to_json()?)?;
            for (c, s) in &catalog.classes {
                println!("class {c}: {} styles", s.centers.len());
            }
        }
        Command::EvalSeg { bundle, dataset: data, oracle, catalog, seed, out } => {
            let bundle = ModelBundle::load(&bundle)?;
            let oracle = OracleSegmenter::load(&oracle)?;
            let dataset = load_dataset(&data)?;
            let catalog: Option<StyleCatalog> = catalog.map(|p| -> Result<_> { Ok(StyleCatalog::from_json(&fs::read_to_string(p)?)?) }).transpose()?;
            let styles = match &catalog {
                Some(c) => EvalStyles::Catalog { catalog: c, seed },
                None => EvalStyles::Encoded,
            };
            let report = evaluate_model(&bundle, &dataset, &oracle, styles)?;
            println!(
                "synthesized: acc {:.4} mIoU {:.4} | real: acc {:.4} mIoU {:.4}",
                report.synthesized.pixel_accuracy, report.synthesized.mean_iou, report.real.pixel_accuracy, report.real.mean_iou
            );
            if let Some(out) = out {
                write_json(&out, &report)?;
            }
        }
        Command::Serve { bundle, catalog, port, max_size, max_pending, static_dir } => {
            let state = AppState::new(ServeConfig { max_size, max_pending, static_dir, ..Default::default() });
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
                log::info!("listening on {}", listener.local_addr()?);
                let loader = Arc::clone(&state);
                tokio::task::spawn_blocking(move || match loader.load_files(&bundle, catalog.as_deref()) {
                    Ok(()) => log::info!("model loaded"),
                    Err(e) => log::error!("loading failed: {e}"),
                });
                axum::serve(listener, router(state)).await?;
                anyhow::Ok(())
            })?;
        }
    }
    Ok(())
}
