//! `bevworld`: synthesize data, train the three stages, evaluate and export clouds.
//!
//! Exit codes: 0 on success, 2 on configuration errors (including stage
//! ordering), 3 on runtime failures.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bevworld_core::checkpoint::Checkpoint;
use bevworld_core::config::KeyValues;
use bevworld_core::metrics_eval::Roi;
use bevworld_core::model::WorldModel;
use bevworld_core::scene_synth::{generate_dataset, load_dataset, save_dataset, Dataset};
use bevworld_core::trainer::{evaluate, predict_grids, split_samples, LogRow, RunConfig, Trainer};
use bevworld_core::Error;
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

#[derive(Parser)]
#[command(name = "bevworld", version, about = "BEV driving world model at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `data.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training stage and write a checkpoint.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
        /// Checkpoint of the previous stage (required for stages 2 and 3).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run configuration for stage 1; budget overrides for later stages.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `train.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Per-step CSV log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Chamfer distance per horizon and text metrics on held-out samples.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = RoiChoice::Default)]
        roi: RoiChoice,
        /// Also write the report as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write predicted and ground-truth clouds of one held-out sample as PLY.
    RenderExport {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Index into the held-out samples.
        #[arg(long, default_value_t = 0)]
        sample: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum RoiChoice {
    /// ROI clipped to the model's BEV extent.
    Default,
    /// No clipping.
    Full,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Stage(_) => 2,
        _ => 3,
    }
}

fn run(cmd: Command) -> bevworld_core::Result<()> {
    match cmd {
        Command::Synth { config, seed, out } => {
            let mut run = load_run_config(config.as_deref())?;
            if let Some(s) = seed {
                run.data_seed = s;
            }
            let ds = generate_dataset(&run.scene, run.data_seed, run.sequences, run.model.extent)?;
            save_dataset(&out, &ds)?;
            info!("wrote {} sequences to {}", ds.records.len(), out.display());
            Ok(())
        }
        Command::Train { stage, ckpt, data, out, config, seed, log } => {
            let mut trainer = match (stage, ckpt) {
                (1, None) => {
                    let run = load_run_config(config.as_deref())?;
                    let model = WorldModel::new(&run.model, run.scene.dt_seconds, run.seed)?;
                    Trainer::new(model, run)
                }
                (1, Some(_)) => return Err(Error::Config("stage 1 starts from scratch; drop --ckpt".into())),
                (s, None) => {
                    return Err(Error::Config(format!("stage {s} needs --ckpt with a stage-{} checkpoint", s - 1)))
                }
                (_, Some(path)) => {
                    let mut t = Checkpoint::load(&path)?.restore()?;
                    if let Some(c) = config {
                        apply_overrides(&mut t.run, &KeyValues::parse(&read_text(&c)?)?)?;
                    }
                    t
                }
            };
            if let Some(s) = seed {
                trainer.run.seed = s;
            }
            let ds = load_dataset(&data)?;
            let split = split_samples(&ds, &trainer.model, &trainer.run)?;
            let mut sink = log.as_deref().map(|p| open_log(p, trainer.model.cfg.horizon)).transpose()?;
            let mut write_err = None;
            trainer.train_stage(stage, &split.train, &mut |row: &LogRow| {
                if let Some(w) = sink.as_mut() {
                    if let Err(e) = writeln!(w, "{}", row.csv()) {
                        write_err.get_or_insert(e);
                    }
                }
            })?;
            if let Some(e) = write_err {
                return Err(e.into());
            }
            if let Some(mut w) = sink {
                w.flush()?;
            }
            Checkpoint::capture(&trainer, false).save(&out)?;
            info!("stage {stage} done; checkpoint at {}", out.display());
            Ok(())
        }
        Command::Eval { ckpt, data, roi, csv } => {
            let (trainer, ds) = load_pair(&ckpt, &data)?;
            let split = split_samples(&ds, &trainer.model, &trainer.run)?;
            let roi = match roi {
                RoiChoice::Default => Roi::scaled(trainer.model.cfg.extent),
                RoiChoice::Full => Roi::full(),
            };
            let report = evaluate(&trainer.model, trainer.completed_stage, &split.eval, &roi, &trainer.run.digest())?;
            print!("{}", report.to_table());
            if let Some(p) = csv {
                std::fs::write(p, report.to_csv())?;
            }
            Ok(())
        }
        Command::RenderExport { ckpt, data, out, sample } => {
            let (trainer, ds) = load_pair(&ckpt, &data)?;
            let split = split_samples(&ds, &trainer.model, &trainer.run)?;
            let s = split.eval.get(sample).ok_or_else(|| {
                Error::InvalidArgument(format!("sample {sample} out of range ({} held out)", split.eval.len()))
            })?;
            std::fs::create_dir_all(&out)?;
            let grids = predict_grids(&trainer.model, trainer.completed_stage, s)?;
            for (i, grid) in grids.iter().enumerate() {
                let frame = &s.frames[i];
                let pred = trainer.model.predict_cloud(grid, &frame.lidar, 512)?;
                pred.write_ply(BufWriter::new(File::create(out.join(format!("pred_{i}s.ply")))?))?;
                frame.cloud().write_ply(BufWriter::new(File::create(out.join(format!("gt_{i}s.ply")))?))?;
                info!("{i}s: {} predicted points", pred.len());
            }
            Ok(())
        }
    }
}

fn read_text(path: &Path) -> bevworld_core::Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn load_run_config(path: Option<&Path>) -> bevworld_core::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_key_values(&KeyValues::parse(&read_text(p)?)?),
        None => Ok(RunConfig::desk()),
    }
}

/// Later stages keep the architecture of their checkpoint; only budget,
/// loss and evaluation keys may change.
fn apply_overrides(run: &mut RunConfig, kv: &KeyValues) -> bevworld_core::Result<()> {
    for (k, v) in &kv.entries {
        let allowed = ["train.", "loss.", "eval."].iter().any(|p| k.starts_with(p));
        if !allowed {
            return Err(Error::Config(format!("{k} is fixed by the checkpoint")));
        }
        run.apply(k, v)?;
    }
    run.validate()
}

fn load_pair(ckpt: &Path, data: &Path) -> bevworld_core::Result<(Trainer, Dataset)> {
    Ok((Checkpoint::load(ckpt)?.restore()?, load_dataset(data)?))
}

fn open_log(path: &Path, horizon: usize) -> bevworld_core::Result<BufWriter<File>> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", LogRow::csv_header(horizon))?;
    Ok(w)
}
