//! `ptaloc`: dataset generation, training, evaluation and the experiment
//! sweeps of the rainbow-beam localization simulator.
//!
//! Exit status is 0 on success and 1 on any error (the message goes to
//! stderr). All outputs land in the directory given by `--out`.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

use ptaloc_core::beamformer::{project_params, PowerMetric, ProjectedPta};
use ptaloc_core::cbs::{cbs_design, curve_slope, default_design};
use ptaloc_core::config::{build_config, derive_grids, render_config, SystemConfig};
use ptaloc_core::dataset::{generate_splits, load, save, write_csv, Dataset};
use ptaloc_core::experiments::{
    ablation, beam_pattern, compare_methods, grid, index_curve, median, overhead, subcarrier_pattern, sweep_bits,
    sweep_distance, write_heatmap, ExperimentSetup, Table, METHOD_FIXED, METHOD_JOINT, METHOD_LOOKUP,
};
use ptaloc_core::trainer::{
    build_train_config, calibrated_quantizer, evaluate_with, train_fixed_beam, train_joint, train_quantized,
    load_beam, write_log_csv, DesignCheckpoint, Model, TrainConfig,
};
use ptaloc_core::UserPosition;

#[derive(Parser, Debug)]
#[command(name = "ptaloc", version, about = "Near-field rainbow-beam localization simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct SystemArgs {
    /// Reduced geometry: 64 antennas, 256 subcarriers, 5–50 m (default).
    #[arg(long, conflicts_with_all = ["full", "config"])]
    desk: bool,
    /// Full geometry: 256 antennas, 1584 subcarriers, 5–300 m.
    #[arg(long, conflicts_with = "config")]
    full: bool,
    /// TOML system config.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl SystemArgs {
    fn load(&self) -> Result<SystemConfig> {
        if let Some(p) = &self.config {
            let raw = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            return Ok(build_config(&raw)?);
        }
        Ok(if self.full { SystemConfig::full() } else { SystemConfig::desk() })
    }
}

#[derive(Args, Debug, Clone)]
struct TrainArgs {
    /// TOML training config; flags below override it.
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[arg(long)]
    joint_epochs: Option<usize>,
    #[arg(long)]
    estimator_epochs: Option<usize>,
    #[arg(long)]
    qat_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

impl TrainArgs {
    fn load(&self, seed: u64) -> Result<TrainConfig> {
        let mut tc = match &self.train_config {
            Some(p) => build_train_config(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
            None => TrainConfig::default(),
        };
        tc.seed = seed;
        if let Some(v) = self.joint_epochs {
            tc.joint_epochs = v;
        }
        if let Some(v) = self.estimator_epochs {
            tc.estimator_epochs = v;
        }
        if let Some(v) = self.qat_epochs {
            tc.qat_joint_epochs = v;
        }
        if let Some(v) = self.batch_size {
            tc.batch_size = v;
        }
        tc.validate()?;
        Ok(tc)
    }
}

#[derive(Args, Debug, Clone)]
struct SizeArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10_000)]
    train: usize,
    #[arg(long, default_value_t = 1_000)]
    val: usize,
    #[arg(long, default_value_t = 1_000)]
    test: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample train/val/test users and write them with CSV mirrors.
    GenData {
        #[command(flatten)]
        system: SystemArgs,
        #[command(flatten)]
        sizes: SizeArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a generated dataset directory.
    Train {
        /// Directory written by `gen-data`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Freeze the analytic beam and train only the estimator.
        #[arg(long)]
        fixed_beam: bool,
        /// Quantization-aware fine-tuning of this checkpoint.
        #[arg(long, requires = "bits")]
        base: Option<PathBuf>,
        #[arg(long)]
        bits: Option<u32>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Quantize power post hoc with this many bits.
        #[arg(long)]
        bits: Option<u32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Max-over-subcarrier received power heatmap of a beam.
    BeamPattern {
        #[command(flatten)]
        system: SystemArgs,
        /// Checkpoint (trained or analytic); without it an analytic rainbow
        /// beam is designed and saved as `design.json`.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Analytic start anchor `deg,m`.
        #[arg(long, allow_hyphen_values = true)]
        start: Option<String>,
        /// Analytic end anchor `deg,m`.
        #[arg(long, allow_hyphen_values = true)]
        end: Option<String>,
        #[arg(long, default_value_t = 1.0)]
        angle_step: f64,
        #[arg(long, default_value_t = 1.0)]
        range_step: f64,
        /// Also write single-subcarrier maps for the lowest and highest subcarrier.
        #[arg(long)]
        endpoints: bool,
        #[arg(long)]
        png: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// RMSE against maximum user distance for every method.
    SweepDistance {
        #[command(flatten)]
        system: SystemArgs,
        #[command(flatten)]
        sizes: SizeArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [50.0, 100.0, 150.0, 200.0, 250.0, 300.0])]
        distances: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// RMSE against power bit width.
    SweepBits {
        #[command(flatten)]
        system: SystemArgs,
        #[command(flatten)]
        sizes: SizeArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 3, 4, 5, 6, 7, 8])]
        bits: Vec<u32>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Strongest subcarrier against range for a single-angle rainbow beam.
    IndexCurve {
        #[command(flatten)]
        system: SystemArgs,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        angle: f64,
        #[arg(long, default_value_t = 5.0)]
        start: f64,
        #[arg(long, default_value_t = 300.0)]
        end: f64,
        #[arg(long, default_value_t = 1.0)]
        step: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Feedback bits per user and estimator operation count.
    Overhead {
        #[command(flatten)]
        system: SystemArgs,
        #[arg(long, default_value_t = 8)]
        bits: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Joint vs fixed beam vs lookup over several seeds.
    Ablation {
        #[command(flatten)]
        system: SystemArgs,
        #[command(flatten)]
        sizes: SizeArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 3])]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_anchor(s: &str) -> Result<UserPosition> {
    let (a, r) = s.split_once(',').with_context(|| format!("anchor `{s}` must be `deg,m`"))?;
    Ok(UserPosition::from_degrees(a.trim().parse()?, r.trim().parse()?)?)
}

fn out_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn data_config(dir: &Path) -> Result<SystemConfig> {
    let p = dir.join("config.toml");
    let raw = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
    Ok(build_config(&raw)?)
}

fn load_split(dir: &Path, name: &str, cfg: &SystemConfig) -> Result<Dataset> {
    let p = dir.join(format!("{name}.bin"));
    load(&p, cfg).with_context(|| format!("loading {}", p.display()))
}

fn setup(sizes: &SizeArgs, train: &TrainArgs) -> Result<ExperimentSetup> {
    Ok(ExperimentSetup {
        seed: sizes.seed,
        train: sizes.train,
        val: sizes.val,
        test: sizes.test,
        train_config: train.load(sizes.seed)?,
    })
}

fn write(table: &Table, dir: &Path, name: &str) -> Result<()> {
    let p = dir.join(name);
    table.write(&p).with_context(|| format!("writing {}", p.display()))?;
    println!("wrote {}", p.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { system, sizes, out } => {
            let cfg = system.load()?;
            out_dir(&out)?;
            std::fs::write(out.join("config.toml"), render_config(&cfg))?;
            let (tr, va, te) = generate_splits(&cfg, sizes.seed, (sizes.train, sizes.val, sizes.test))?;
            for ds in [&tr, &va, &te] {
                save(ds, &out.join(format!("{}.bin", ds.split)))?;
                let mut f = std::fs::File::create(out.join(format!("{}.csv", ds.split)))?;
                write_csv(ds, &mut f)?;
            }
            println!("wrote {} / {} / {} users to {} (config {})", tr.len(), va.len(), te.len(), out.display(), cfg.hash());
        }
        Command::Train { data, out, fixed_beam, base, bits, seed, train } => {
            let cfg = data_config(&data)?;
            let grids = derive_grids(&cfg);
            let tc = train.load(seed)?;
            let (tr, va) = (load_split(&data, "train", &cfg)?, load_split(&data, "val", &cfg)?);
            out_dir(&out)?;
            let outcome = match (&base, bits) {
                (Some(b), Some(bits)) => train_quantized(&cfg, &grids, &tc, &Model::load(b, &cfg)?, bits, &tr, &va)?,
                (None, Some(_)) => bail!("--bits needs --base"),
                _ if fixed_beam => train_fixed_beam(&cfg, &grids, &tc, default_design(&cfg, &grids)?.beam.as_params(), &tr, &va)?,
                _ => train_joint(&cfg, &grids, &tc, &tr, &va)?,
            };
            outcome.model.save(&out.join("model.json"))?;
            let mut f = std::fs::File::create(out.join("train_log.csv"))?;
            write_log_csv(&outcome.log, &cfg.hash(), tc.seed, &mut f)?;
            println!("validation rmse {:.4} m; wrote {}", outcome.val_rmse, out.join("model.json").display());
        }
        Command::Eval { model, data, split, bits, out } => {
            let cfg = data_config(&data)?;
            let grids = derive_grids(&cfg);
            let m = Model::load(&model, &cfg)?;
            let ds = load_split(&data, &split, &cfg)?;
            let q = match bits {
                Some(b) => Some(calibrated_quantizer(&m.projected_beam(&cfg)?, &load_split(&data, "train", &cfg)?, b, &cfg, &grids)?),
                None => m.quantizer,
            };
            let r = evaluate_with(&m, q.as_ref(), &ds, &cfg, &grids)?;
            out_dir(&out)?;
            let mut t = Table::new(&cfg.hash(), ds.seed, &["split", "bits", "rmse_2d_m", "angle_rmse_rad", "range_rmse_m"]);
            let b = q.map_or("none".to_string(), |q| q.bits.to_string());
            t.push(vec![split.clone(), b, r.rmse_2d_m.to_string(), r.angle_rmse_rad.to_string(), r.range_rmse_m.to_string()])?;
            write(&t, &out, "eval.csv")?;
            println!("{split}: 2D rmse {:.4} m, angle {:.5} rad, range {:.4} m", r.rmse_2d_m, r.angle_rmse_rad, r.range_rmse_m);
        }
        Command::BeamPattern { system, model, start, end, angle_step, range_step, endpoints, png, out } => {
            let cfg = system.load()?;
            let grids = derive_grids(&cfg);
            let design = match (&model, &start, &end) {
                (Some(_), _, _) => None,
                (None, Some(s), Some(e)) => Some(cbs_design(parse_anchor(s)?, parse_anchor(e)?, &cfg, &grids)?),
                (None, None, None) => Some(default_design(&cfg, &grids)?),
                _ => bail!("--start and --end go together"),
            };
            let beam: ProjectedPta = match (&model, &design) {
                (Some(p), _) => project_params(&load_beam(p, &cfg)?, &cfg)?,
                (None, Some(d)) => d.beam.clone(),
                (None, None) => unreachable!("design is built when no checkpoint is given"),
            };
            out_dir(&out)?;
            if let Some(d) = &design {
                DesignCheckpoint::new(d, &cfg).save(&out.join("design.json"))?;
            }
            let b = cfg.angle_bound_rad.to_degrees();
            let angles = grid(-b, b, angle_step)?;
            let ranges = grid(cfg.range_min_m, cfg.range_max_m, range_step)?;
            let (t, map) = beam_pattern(&beam, &angles, &ranges, &cfg, &grids, 0)?;
            write(&t, &out, "beam_pattern.csv")?;
            if png {
                write_heatmap(&map, &out.join("beam_pattern.png"))?;
            }
            if endpoints {
                for (m, name) in [(0, "first"), (cfg.num_subcarriers - 1, "last")] {
                    for (metric, tag) in [(PowerMetric::ReceivedDbm, "power"), (PowerMetric::ArrayGainDb, "gain")] {
                        let (t, _) = subcarrier_pattern(&beam, m, metric, &angles, &ranges, &cfg, &grids, 0)?;
                        write(&t, &out, &format!("subcarrier_{name}_{tag}.csv"))?;
                    }
                }
            }
        }
        Command::SweepDistance { system, sizes, train, distances, out } => {
            let cfg = system.load()?;
            out_dir(&out)?;
            let t = sweep_distance(&cfg, &distances, &setup(&sizes, &train)?)?;
            write(&t, &out, "sweep_distance.csv")?;
        }
        Command::SweepBits { system, sizes, train, bits, out } => {
            let cfg = system.load()?;
            let s = setup(&sizes, &train)?;
            out_dir(&out)?;
            let run = compare_methods(&cfg, &s)?;
            let t = sweep_bits(&cfg, &s, &run, &bits)?;
            write(&t, &out, "sweep_bits.csv")?;
        }
        Command::IndexCurve { system, angle, start, end, step, out } => {
            let cfg = system.load()?;
            let grids = derive_grids(&cfg);
            let ranges = grid(cfg.range_min_m, cfg.range_max_m, step)?;
            out_dir(&out)?;
            let (t, curve) = index_curve(angle, start, end, &ranges, &cfg, &grids, 0)?;
            write(&t, &out, "index_curve.csv")?;
            let anchor = |r: f64| UserPosition::from_degrees(angle, r);
            let design = cbs_design(anchor(start)?, anchor(end)?, &cfg, &grids)?;
            DesignCheckpoint::new(&design, &cfg).save(&out.join("design.json"))?;
            let near = cfg.range_min_m + 0.1 * (cfg.range_max_m - cfg.range_min_m);
            let far = cfg.range_max_m - 0.1 * (cfg.range_max_m - cfg.range_min_m);
            println!(
                "slope {:.3}/m near {near:.0} m, {:.4}/m near {far:.0} m",
                curve_slope(&curve, near, 5.0 * step),
                curve_slope(&curve, far, 5.0 * step)
            );
        }
        Command::Overhead { system, bits, out } => {
            let cfg = system.load()?;
            out_dir(&out)?;
            let t = overhead(&cfg, bits, &TrainConfig::default().dims)?;
            write(&t, &out, "overhead.csv")?;
        }
        Command::Ablation { system, sizes, train, seeds, out } => {
            let cfg = system.load()?;
            out_dir(&out)?;
            let (t, runs) = ablation(&cfg, &setup(&sizes, &train)?, &seeds)?;
            write(&t, &out, "ablation.csv")?;
            let med = |f: &dyn Fn(&ptaloc_core::experiments::ComparisonRun) -> f64| median(&runs.iter().map(f).collect::<Vec<_>>());
            println!(
                "median rmse: {METHOD_JOINT} {:.4}, {METHOD_FIXED} {:.4}, {METHOD_LOOKUP} {:.4}",
                med(&|r| r.joint_report.rmse_2d_m),
                med(&|r| r.fixed_report.rmse_2d_m),
                med(&|r| r.lookup_report.rmse_2d_m)
            );
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
