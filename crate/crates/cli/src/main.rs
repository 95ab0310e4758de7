//! `tryon`: data generation, training, evaluation and single-sample inference.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tryon_core::checkpoint::save_checkpoint;
use tryon_core::config::RunConfig;
use tryon_core::error::{Error, Result};
use tryon_core::imgproc::{flow_to_image, read_pfm, write_pfm, write_png};
use tryon_core::pipeline::{load_stage1, load_stage2, run_evaluation, run_tryon, train_diffusion};
use tryon_core::selftest;
use tryon_core::stage1::{stage1_forward, train_stage1};
use tryon_core::synth::{
    generate_dataset, load_dataset, save_dataset, DeformationFamily, GeneratorSpec, OccluderSpec, TryonSample,
};
use tryon_core::warp::write_flow;

#[derive(Parser, Debug)]
#[command(name = "tryon", version, about = "Two-stage garment warping and diffusion try-on at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Output directory; every artifact and the manifest go here.
    #[arg(long, env = "TRYON_OUT")]
    out: PathBuf,
    #[arg(long, env = "TRYON_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// `key = value` config file; defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Deform {
    Affine,
    Bend,
    Both,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Occluder {
    None,
    Arm,
    Mixed,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset with train/val/test splits.
    GenerateData {
        #[command(flatten)]
        common: Common,
        /// Number of training samples.
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 8)]
        val: usize,
        #[arg(long, default_value_t = 16)]
        test: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 48)]
        width: usize,
        #[arg(long, value_enum, default_value_t = Deform::Both)]
        deformations: Deform,
        #[arg(long, value_enum, default_value_t = Occluder::Mixed)]
        occluder: Occluder,
        /// Also write PNG previews next to the PFM files.
        #[arg(long)]
        previews: bool,
    },
    /// Train the warping stage.
    TrainWarp {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data_dir: PathBuf,
        /// Defaults to `<out>/stage1.ckpt`.
        #[arg(long)]
        out_checkpoint: Option<PathBuf>,
    },
    /// Pretrain the autoencoder and train the conditional denoiser.
    TrainDiffusion {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        stage1_ckpt: PathBuf,
        /// Defaults to `<out>/stage2.ckpt`.
        #[arg(long)]
        out_checkpoint: Option<PathBuf>,
    },
    /// Paired and unpaired metrics on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        stage1_ckpt: PathBuf,
        #[arg(long)]
        stage2_ckpt: PathBuf,
        /// Sampling steps; defaults to the checkpoint's `sample_steps`.
        #[arg(long)]
        steps: Option<usize>,
        /// Evaluate only the first N test samples.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Stage 1 only: warped garment, coarse try-on and flows for one sample.
    Warp {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        stage1_ckpt: PathBuf,
        /// Garment image (PFM).
        #[arg(long)]
        garment: PathBuf,
        /// Sample directory holding `pose.pfm` and `agnostic.pfm`.
        #[arg(long)]
        person_dir: PathBuf,
    },
    /// Both stages for one sample.
    Tryon {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        stage1_ckpt: PathBuf,
        #[arg(long)]
        stage2_ckpt: PathBuf,
        #[arg(long)]
        garment: PathBuf,
        #[arg(long)]
        person_dir: PathBuf,
        /// Garment caption; defaults to "plain top".
        #[arg(long, default_value = "plain top")]
        caption: String,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Run the oracle suite.
    Selftest {
        #[arg(long, env = "TRYON_SEED", default_value_t = 0)]
        seed: u64,
        /// Optional directory for a report and manifest.
        #[arg(long, env = "TRYON_OUT")]
        out: Option<PathBuf>,
    },
}

fn load_config(args: &ConfigArgs, seed: u64) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.seed = seed;
    cfg.validate()?;
    Ok(cfg)
}

/// Records what produced the directory: the command line, the seed and, when
/// a config is involved, its hash and full text.
fn write_manifest(out: &Path, command: &str, seed: u64, cfg: Option<&RunConfig>, extra: &[(&str, String)]) -> Result<()> {
    let mut m = String::new();
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let _ = writeln!(m, "command = {command}");
    let _ = writeln!(m, "argv = {}", argv.join(" "));
    let _ = writeln!(m, "seed = {seed}");
    if let Some(c) = cfg {
        let _ = writeln!(m, "config_hash = {}", c.hash());
        c.save(&out.join("config.txt"))?;
    }
    for (k, v) in extra {
        let _ = writeln!(m, "{k} = {v}");
    }
    std::fs::write(out.join("run_manifest.txt"), m)?;
    Ok(())
}

fn read_person(dir: &Path) -> Result<(tryon_core::tensor::Tensor, tryon_core::tensor::Tensor)> {
    Ok((read_pfm(&dir.join("pose.pfm"))?, read_pfm(&dir.join("agnostic.pfm"))?))
}

fn test_split(data_dir: &Path, limit: Option<usize>) -> Result<Vec<TryonSample>> {
    let mut test = load_dataset(data_dir)?.test;
    if let Some(n) = limit {
        test.truncate(n);
    }
    Ok(test)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenerateData {
            common,
            count,
            val,
            test,
            height,
            width,
            deformations,
            occluder,
            previews,
        } => {
            let spec = GeneratorSpec {
                height,
                width,
                deformations: match deformations {
                    Deform::Affine => vec![DeformationFamily::Affine],
                    Deform::Bend => vec![DeformationFamily::SinusoidalBend],
                    Deform::Both => vec![DeformationFamily::Affine, DeformationFamily::SinusoidalBend],
                },
                occluder: match occluder {
                    Occluder::None => OccluderSpec::None,
                    Occluder::Arm => OccluderSpec::ArmBar,
                    Occluder::Mixed => OccluderSpec::Mixed,
                },
                train: count,
                val,
                test,
                ..GeneratorSpec::default()
            };
            std::fs::create_dir_all(&common.out)?;
            let ds = generate_dataset(&spec, common.seed)?;
            save_dataset(&ds, &common.out, previews)?;
            println!("generated train={} val={} test={} size={}x{}", count, val, test, height, width);
            write_manifest(&common.out, "generate-data", common.seed, None, &[])
        }
        Command::TrainWarp {
            common,
            config,
            data_dir,
            out_checkpoint,
        } => {
            let cfg = load_config(&config, common.seed)?;
            std::fs::create_dir_all(&common.out)?;
            let ds = load_dataset(&data_dir)?;
            let mut log = String::new();
            let tr = train_stage1(&ds.train, &cfg, |e| {
                println!("{}", e.line());
                let _ = writeln!(log, "{}", e.line());
            })?;
            let ckpt = out_checkpoint.unwrap_or_else(|| common.out.join("stage1.ckpt"));
            save_checkpoint(&tr.model.params, &cfg, &ckpt)?;
            std::fs::write(common.out.join("train_warp.log"), log)?;
            write_manifest(
                &common.out,
                "train-warp",
                common.seed,
                Some(&cfg),
                &[("data_dir", data_dir.display().to_string()), ("checkpoint", ckpt.display().to_string())],
            )
        }
        Command::TrainDiffusion {
            common,
            config,
            data_dir,
            stage1_ckpt,
            out_checkpoint,
        } => {
            let cfg = load_config(&config, common.seed)?;
            std::fs::create_dir_all(&common.out)?;
            let (stage1, _) = load_stage1(&stage1_ckpt)?;
            let ds = load_dataset(&data_dir)?;
            let mut log = String::new();
            let run = train_diffusion(&ds.train, &stage1, &cfg, &mut |e| {
                println!("{}", e.line());
                let _ = writeln!(log, "{}", e.line());
            })?;
            if let (Some(first), Some(last)) = (run.ae_losses.first(), run.ae_losses.last()) {
                println!("autoencoder l1 first={first:.6} last={last:.6}");
            }
            let ckpt = out_checkpoint.unwrap_or_else(|| common.out.join("stage2.ckpt"));
            save_checkpoint(&run.model.params, &cfg, &ckpt)?;
            std::fs::write(common.out.join("train_diffusion.log"), log)?;
            write_manifest(
                &common.out,
                "train-diffusion",
                common.seed,
                Some(&cfg),
                &[
                    ("data_dir", data_dir.display().to_string()),
                    ("stage1_ckpt", stage1_ckpt.display().to_string()),
                    ("checkpoint", ckpt.display().to_string()),
                ],
            )
        }
        Command::Eval {
            common,
            data_dir,
            stage1_ckpt,
            stage2_ckpt,
            steps,
            limit,
        } => {
            std::fs::create_dir_all(&common.out)?;
            let (stage1, _) = load_stage1(&stage1_ckpt)?;
            let (stage2, cfg) = load_stage2(&stage2_ckpt)?;
            let test = test_split(&data_dir, limit)?;
            let steps = steps.unwrap_or(cfg.sample_steps);
            let ev = run_evaluation(&test, &stage1, &stage2, &cfg, steps, common.seed)?;
            let kv = format!("{}{}", ev.paired.to_kv(), ev.unpaired.to_kv());
            let table = tryon_core::metrics::format_table(&[ev.paired.clone(), ev.unpaired.clone()]);
            std::fs::write(common.out.join("metrics.txt"), &kv)?;
            std::fs::write(common.out.join("metrics_table.txt"), &table)?;
            print!("{table}");
            write_manifest(
                &common.out,
                "eval",
                common.seed,
                Some(&cfg),
                &[
                    ("data_dir", data_dir.display().to_string()),
                    ("stage1_ckpt", stage1_ckpt.display().to_string()),
                    ("stage2_ckpt", stage2_ckpt.display().to_string()),
                    ("steps", steps.to_string()),
                    ("samples", test.len().to_string()),
                ],
            )
        }
        Command::Warp {
            common,
            stage1_ckpt,
            garment,
            person_dir,
        } => {
            std::fs::create_dir_all(&common.out)?;
            let (stage1, cfg) = load_stage1(&stage1_ckpt)?;
            let g = read_pfm(&garment)?;
            let (pose, agnostic) = read_person(&person_dir)?;
            let out = stage1_forward(&stage1, &g, &pose, &agnostic)?;
            let o = &common.out;
            write_pfm(&out.warp_g, &o.join("warp_g.pfm"))?;
            write_png(&out.warp_g, &o.join("warp_g.png"))?;
            write_pfm(&out.tryon_c, &o.join("tryon_c.pfm"))?;
            write_png(&out.tryon_c, &o.join("tryon_c.png"))?;
            write_flow(&out.flow_source, &o.join("flow_source.flo"))?;
            write_png(&flow_to_image(out.flow_source.tensor(), None)?, &o.join("flow_source.png"))?;
            write_flow(&out.flow_reference, &o.join("flow_reference.flo"))?;
            println!(
                "mean flow magnitude source={:.4} reference={:.4}",
                out.flow_source.mean_magnitude(),
                out.flow_reference.mean_magnitude()
            );
            write_manifest(o, "warp", common.seed, Some(&cfg), &[("stage1_ckpt", stage1_ckpt.display().to_string())])
        }
        Command::Tryon {
            common,
            stage1_ckpt,
            stage2_ckpt,
            garment,
            person_dir,
            caption,
            steps,
        } => {
            std::fs::create_dir_all(&common.out)?;
            let (stage1, _) = load_stage1(&stage1_ckpt)?;
            let (stage2, cfg) = load_stage2(&stage2_ckpt)?;
            let g = read_pfm(&garment)?;
            let (pose, agnostic) = read_person(&person_dir)?;
            let steps = steps.unwrap_or(cfg.sample_steps);
            let r = run_tryon(&stage1, &stage2, &cfg, &g, &caption, &pose, &agnostic, steps, common.seed)?;
            let o = &common.out;
            write_pfm(&r.tryon, &o.join("tryon.pfm"))?;
            write_png(&r.tryon, &o.join("tryon.png"))?;
            write_png(&r.stage1.warp_g, &o.join("warp_g.png"))?;
            write_png(&r.stage1.tryon_c, &o.join("tryon_c.png"))?;
            write_png(&r.mask.map(|v| 2.0 * v - 1.0), &o.join("mask.png"))?;
            println!("wrote {}", o.join("tryon.png").display());
            write_manifest(
                o,
                "tryon",
                common.seed,
                Some(&cfg),
                &[
                    ("stage1_ckpt", stage1_ckpt.display().to_string()),
                    ("stage2_ckpt", stage2_ckpt.display().to_string()),
                    ("steps", steps.to_string()),
                ],
            )
        }
        Command::Selftest { seed, out } => {
            let checks = selftest::run_all(seed)?;
            let mut report = String::new();
            for c in &checks {
                println!("{}", c.line());
                let _ = writeln!(report, "{}", c.line());
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            println!("selftest: {} checks, {failed} failed", checks.len());
            if let Some(o) = out {
                std::fs::create_dir_all(&o)?;
                std::fs::write(o.join("selftest.txt"), report)?;
                write_manifest(&o, "selftest", seed, None, &[])?;
            }
            if failed > 0 {
                return Err(Error::InvalidArgument(format!("{failed} oracle checks failed")));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
