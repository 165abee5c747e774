//! `mustgan`: phantom data generation, two-phase training, fusion-position
//! sweeps, synthesis, and evaluation over a single JSON run configuration.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numeric abort,
//! 5 I/O error. `MUSTGAN_THREADS` caps internal parallelism (default:
//! hardware concurrency); 1 selects the strict sequential mode.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;
use mustgan_core::error::{Error, Result};
use mustgan_core::metrics::{
    evaluate, EvalOptions, IdentityOracle, ModelSynthesizer, StreamSynthesizer, Synthesizer,
};
use mustgan_core::model::{FusionConfig, MultiStreamModel};
use mustgan_core::nn::{from_model_range, to_model_range};
use mustgan_core::phantom::{
    generate, read_dataset, split, write_dataset, write_pgm, Dataset, PhantomSample,
};
use mustgan_core::roles::{eval_samples, train_samples, RoleAssignment};
use mustgan_core::sweep::run_sweep;
use mustgan_core::tensor::{read_mtns, write_mtns};
use mustgan_core::train::checkpoint::{load_model, load_streams, save_model, save_streams, Manifest};
use mustgan_core::train::{train_joint, train_streams, TrainConfig, FINETUNE_LR_RATIO};
use mustgan_core::exec;

#[derive(Parser)]
#[command(
    name = "mustgan",
    about = "Multi-stream conditional adversarial synthesis toolkit",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a phantom dataset directory from the run config.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overwrite a non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Phase 1: train the K one-to-one streams and the many-to-one stream.
    TrainStreams {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Phase 2: train the joint network at one fusion position.
    TrainJoint {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Phase-1 checkpoint directory.
        #[arg(long)]
        streams: PathBuf,
        /// Fusion position (defaults to train_joint.fusion_i).
        #[arg(long)]
        fusion: Option<usize>,
        /// Joint epochs (defaults to train_joint.train.epochs).
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid search over fusion positions and epoch counts.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        streams: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Cap on concurrent grid cells (defaults to MUSTGAN_THREADS).
        #[arg(long)]
        parallel: Option<usize>,
    },
    /// Synthesize the target image for one sample directory.
    Synth {
        /// Full model checkpoint directory.
        #[arg(long)]
        model: PathBuf,
        /// Sample directory holding one `{contrast}.mtns` per source.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate checkpoints on a dataset split.
    Eval {
        /// Comma-separated checkpoint directories; the token `identity`
        /// adds the candidate-equals-ground-truth test hook.
        #[arg(long, value_delimiter = ',')]
        models: Vec<String>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = match &cli.cmd {
        Cmd::Sweep {
            parallel: Some(n), ..
        } => (*n).max(1),
        _ => exec::threads_from_env(),
    };
    exec::configure_threads(threads);
    if threads == 1 {
        exec::set_sequential(true);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) | Error::InvalidArg(_) => 2,
                Error::Data(_) | Error::Shape(_) => 3,
                Error::Numeric { .. } => 4,
                Error::Io { .. } | Error::Format { .. } => 5,
            })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { config, out, force } => cmd_gen_data(&config, &out, force),
        Cmd::TrainStreams { config, data, out } => cmd_train_streams(&config, &data, &out),
        Cmd::TrainJoint {
            config,
            data,
            streams,
            fusion,
            epochs,
            out,
        } => cmd_train_joint(&config, &data, &streams, fusion, epochs, &out),
        Cmd::Sweep {
            config,
            data,
            streams,
            out,
            ..
        } => cmd_sweep(&config, &data, &streams, &out),
        Cmd::Synth { model, input, out } => cmd_synth(&model, &input, &out),
        Cmd::Eval {
            models,
            data,
            split,
            out,
        } => cmd_eval(&models, &data, &split, &out),
    }
}

fn cmd_gen_data(config: &Path, out: &Path, force: bool) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    if out.exists() {
        let non_empty = fs::read_dir(out)
            .map_err(|e| Error::io(out, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::Data(format!(
                "output directory {} is not empty; pass --force to overwrite",
                out.display()
            )));
        }
    }
    let ds = generate::<f32>(&cfg.data.spec, cfg.seed)?;
    let splits = split(&ds, cfg.data.split)?;
    write_dataset(&ds, out, &splits, cfg.data.pgm)?;
    let echo = out.join("run_config.json");
    fs::write(&echo, cfg.echo_json()).map_err(|e| Error::io(&echo, e))?;
    println!(
        "wrote {} samples ({} subjects x {} slices, contrasts {:?}) to {}",
        ds.samples.len(),
        cfg.data.spec.n_subjects,
        cfg.data.spec.slices_per_subject,
        cfg.data.spec.contrasts,
        out.display()
    );
    Ok(())
}

fn load_split<'a>(
    ds: &'a Dataset<f32>,
    subjects: &[usize],
    what: &str,
) -> Result<Vec<&'a PhantomSample<f32>>> {
    let samples = ds.subset(subjects);
    if samples.is_empty() {
        return Err(Error::Data(format!(
            "{what} split is empty (subjects {subjects:?})"
        )));
    }
    Ok(samples)
}

fn cmd_train_streams(config: &Path, data: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let (ds, splits) = read_dataset::<f32>(data)?;
    let roles = cfg.roles();
    let train_refs = load_split(&ds, &splits.train, "train")?;
    let samples = train_samples(&train_refs, &ds.spec, &roles)?;

    let k = cfg.k();
    let mut model = MultiStreamModel::<f32>::assemble(
        k,
        cfg.model.generator,
        FusionConfig::new(cfg.train_joint.fusion_i, k),
        cfg.seed,
    )?
    .with_roles(roles.sources.clone(), roles.target.clone())?;

    let tcfg = cfg.streams_config();
    let (log, state) = train_streams(&mut model, &samples, &tcfg)?;
    save_streams(out, &model, &state, &tcfg)?;
    log.write_csv(out.join("loss_log.csv"))?;
    let echo = out.join("run_config.json");
    fs::write(&echo, cfg.echo_json()).map_err(|e| Error::io(&echo, e))?;
    println!(
        "trained {} streams for {} epochs on {} samples -> {}",
        k + 1,
        tcfg.epochs,
        samples.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train_joint(
    config: &Path,
    data: &Path,
    streams: &Path,
    fusion: Option<usize>,
    epochs: Option<usize>,
    out: &Path,
) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let (ds, splits) = read_dataset::<f32>(data)?;
    let roles = cfg.roles();
    let train_refs = load_split(&ds, &splits.train, "train")?;
    let samples = train_samples(&train_refs, &ds.spec, &roles)?;

    let fusion_i = fusion.unwrap_or(cfg.train_joint.fusion_i);
    let (mut model, _, _) =
        load_streams::<f32>(streams, FusionConfig::new(fusion_i, cfg.k()))?;
    let jcfg = TrainConfig {
        epochs: epochs.unwrap_or(cfg.train_joint.train.epochs),
        ..cfg.joint_config()
    };
    let (log, state) = train_joint(&mut model, &samples, &jcfg, FINETUNE_LR_RATIO)?;
    save_model(out, &model, &state, &jcfg)?;
    log.write_csv(out.join("loss_log.csv"))?;
    let echo = out.join("run_config.json");
    fs::write(&echo, cfg.echo_json()).map_err(|e| Error::io(&echo, e))?;
    println!(
        "trained joint network at fusion position {fusion_i} for {} epochs -> {}",
        jcfg.epochs,
        out.display()
    );
    Ok(())
}

fn cmd_sweep(config: &Path, data: &Path, streams: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let (ds, splits) = read_dataset::<f32>(data)?;
    let roles = cfg.roles();
    let train_refs = load_split(&ds, &splits.train, "train")?;
    let samples = train_samples(&train_refs, &ds.spec, &roles)?;
    let val_refs = load_split(&ds, &splits.val, "validation")?;
    let val = eval_samples(&val_refs, &ds.spec, &roles)?;

    let first = cfg.sweep.fusion_positions[0];
    let (model, _, _) = load_streams::<f32>(streams, FusionConfig::new(first, cfg.k()))?;

    let outcome = run_sweep(&model, &samples, &val, &cfg.sweep, &cfg.joint_config(), cfg.seed)?;

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let report = &outcome.report;
    fs::write(out.join("report.json"), report.to_json())
        .map_err(|e| Error::io(out.join("report.json"), e))?;
    fs::write(out.join("report.csv"), report.to_csv())
        .map_err(|e| Error::io(out.join("report.csv"), e))?;
    fs::write(out.join("summary.txt"), report.summary())
        .map_err(|e| Error::io(out.join("summary.txt"), e))?;
    outcome.logs.write_csv(out.join("loss_log.csv"))?;
    let echo = out.join("run_config.json");
    fs::write(&echo, cfg.echo_json()).map_err(|e| Error::io(&echo, e))?;
    if let (Some(best), Some(state)) = (&outcome.best_model, &outcome.best_state) {
        let jcfg = cfg.joint_config();
        save_model(out.join("best"), best, state, &jcfg)?;
    }
    print!("{}", report.summary());
    Ok(())
}

fn cmd_synth(model_dir: &Path, input: &Path, out: &Path) -> Result<()> {
    let (model, _, _) = load_model::<f32>(model_dir)?;
    let mut sources = Vec::with_capacity(model.sources.len());
    for name in &model.sources {
        let path = input.join(format!("{name}.mtns"));
        let img = read_mtns::<f32>(&path)?;
        sources.push(to_model_range(&img));
    }
    let raw = model.synthesize(&sources)?;
    let img = from_model_range(&raw);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_mtns(out.join(format!("{}.mtns", model.target)), &img)?;
    write_pgm(out.join(format!("{}.pgm", model.target)), &img)?;
    println!(
        "synthesized '{}' from {:?} -> {}",
        model.target,
        model.sources,
        out.display()
    );
    Ok(())
}

enum LoadedModel {
    Identity,
    Streams(String, MultiStreamModel<f32>),
    Full(String, MultiStreamModel<f32>),
}

fn cmd_eval(models: &[String], data: &Path, split_name: &str, out: &Path) -> Result<()> {
    let (ds, splits) = read_dataset::<f32>(data)?;
    let subjects = match split_name {
        "train" => &splits.train,
        "val" => &splits.val,
        "test" => &splits.test,
        other => {
            return Err(Error::InvalidArg(format!(
                "unknown split '{other}' (expected train, val, or test)"
            )))
        }
    };
    let refs = load_split(&ds, subjects, split_name)?;

    if models.is_empty() {
        return Err(Error::InvalidArg("no models given".into()));
    }
    let mut loaded = Vec::new();
    for token in models {
        if token == "identity" {
            loaded.push(LoadedModel::Identity);
            continue;
        }
        let path = PathBuf::from(token);
        let stem = path
            .file_name()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| token.clone());
        let manifest = Manifest::read(&path)?;
        match manifest.kind.as_str() {
            "streams" => {
                let k = manifest.topology.k;
                let (model, _, _) = load_streams::<f32>(&path, FusionConfig::new(1, k))?;
                loaded.push(LoadedModel::Streams(stem, model));
            }
            "mustgan" => {
                let (model, _, _) = load_model::<f32>(&path)?;
                loaded.push(LoadedModel::Full(stem, model));
            }
            other => {
                return Err(Error::format(
                    path.join("manifest.json"),
                    format!("unknown checkpoint kind '{other}'"),
                ))
            }
        }
    }

    // roles must agree across all model-backed entries
    let mut roles: Option<RoleAssignment> = None;
    for lm in &loaded {
        let (src, tgt) = match lm {
            LoadedModel::Identity => continue,
            LoadedModel::Streams(_, m) | LoadedModel::Full(_, m) => (&m.sources, &m.target),
        };
        match &roles {
            None => {
                roles = Some(RoleAssignment {
                    sources: src.clone(),
                    target: tgt.clone(),
                })
            }
            Some(r) => {
                if &r.sources != src || &r.target != tgt {
                    return Err(Error::Config(format!(
                        "checkpoints disagree on contrast roles: {:?}->{} vs {:?}->{}",
                        r.sources, r.target, src, tgt
                    )));
                }
            }
        }
    }
    let roles = roles.unwrap_or_else(|| RoleAssignment {
        sources: ds.spec.contrasts[..ds.spec.contrasts.len() - 1].to_vec(),
        target: ds.spec.target_contrast().to_string(),
    });
    let samples = eval_samples(&refs, &ds.spec, &roles)?;

    let mut synths: Vec<Box<dyn Synthesizer<f32> + '_>> = Vec::new();
    for lm in &loaded {
        match lm {
            LoadedModel::Identity => synths.push(Box::new(IdentityOracle)),
            LoadedModel::Streams(stem, model) => {
                for m in 0..model.k() {
                    let mut s = StreamSynthesizer::one_to_one(model, m);
                    s.name = format!("{stem}/{}", s.name);
                    synths.push(Box::new(s));
                }
                let mut s = StreamSynthesizer::many(model);
                s.name = format!("{stem}/many");
                synths.push(Box::new(s));
            }
            LoadedModel::Full(stem, model) => {
                let mut s = ModelSynthesizer::new(model);
                s.name = format!("{stem}/{}", s.name);
                synths.push(Box::new(s));
            }
        }
    }
    let views: Vec<&dyn Synthesizer<f32>> = synths.iter().map(|b| b.as_ref()).collect();
    let report = evaluate(&views, &samples, EvalOptions::default())?;

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    fs::write(out.join("report.json"), report.to_json())
        .map_err(|e| Error::io(out.join("report.json"), e))?;
    fs::write(out.join("report.txt"), report.to_text_table())
        .map_err(|e| Error::io(out.join("report.txt"), e))?;
    print!("{}", report.to_text_table());
    Ok(())
}
