mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use jointdiff_core::diffusion::{ModalitySchedules, NoiseSchedule};
use jointdiff_core::gmm::{self, Dataset};
use jointdiff_core::mlp::MlpSpec;
use jointdiff_core::networks::{BaseNoisePredictor, JointDiscriminator};
use jointdiff_core::pipeline::{self, PipelineConfig, Setting};
use jointdiff_core::sampler::{self, SamplerConfig, SamplingMode};
use jointdiff_core::trainer::{self, FakePairStore, LossWeights};
use jointdiff_core::{eval, io, Error, Result};

use manifest::Manifest;

#[derive(Parser)]
#[command(name = "jointdiff", version, about = "Discriminator-guided joint sampling on toy mixtures")]
struct Cli {
    /// Directory that relative paths are resolved against.
    #[arg(long, env = "JOINTDIFF_RUN_ROOT", default_value = ".", global = true)]
    run_root: PathBuf,

    /// TOML file overriding the default run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Global seed; per-stage seeds are derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    Ind,
    Ood,
    Base,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Disc,
    Denoise,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Guided,
    Independent,
}

#[derive(Clone, Copy, ValueEnum)]
enum SettingArg {
    Ind,
    Ood,
}

impl From<SettingArg> for Setting {
    fn from(s: SettingArg) -> Self {
        match s {
            SettingArg::Ind => Setting::Ind,
            SettingArg::Ood => Setting::Ood,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Sample a toy dataset and store it with its spec and seed.
    MakeDataset {
        kind: DataKind,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a base noise predictor to a 1-D dataset.
    TrainBase {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-generate unguided samples from the two base models.
    GenFakePool {
        #[arg(long)]
        base: PathBuf,
        /// Second base model; defaults to `--base`.
        #[arg(long)]
        base_y: Option<PathBuf>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the joint discriminator.
    TrainGuidance {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        base_y: Option<PathBuf>,
        #[arg(long)]
        paired: PathBuf,
        #[arg(long)]
        fakes: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        loss: LossArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw joint samples, guided or independent.
    Sample {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        base_y: Option<PathBuf>,
        #[arg(long)]
        disc: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "guided")]
        mode: ModeArg,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// NLL and mode coverage of a sample dump against a target mixture.
    Eval {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long, value_enum)]
        target: SettingArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every row of the NLL table for one setting.
    ReproduceTable1 {
        #[arg(long, value_enum)]
        setting: SettingArg,
        /// Output directory; defaults to `table1-<setting>-seed<seed>`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Shape { .. } | Error::Contract(_) => 2,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 3,
        Error::Numeric(_) => 4,
        Error::Io { .. } | Error::Format { .. } => 5,
        Error::Checksum { .. } => 6,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

struct Ctx {
    root: PathBuf,
    cfg: PipelineConfig,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    fn manifest(&self, command: &str) -> Manifest {
        Manifest::new(command, serde_json::to_value(&self.cfg).expect("config serializes"))
    }

    fn load_base(&self, m: &mut Manifest, p: &Path) -> Result<BaseNoisePredictor> {
        let p = self.path(p);
        m.input(&p)?;
        BaseNoisePredictor::load(&p)
    }

    fn load_bases(
        &self,
        m: &mut Manifest,
        base: &Path,
        base_y: Option<&Path>,
    ) -> Result<(BaseNoisePredictor, BaseNoisePredictor)> {
        let bx = self.load_base(m, base)?;
        let by = match base_y {
            Some(p) => self.load_base(m, p)?,
            None => bx.clone(),
        };
        Ok((bx, by))
    }
}

fn finish(m: &mut Manifest, outputs: &[PathBuf], primary: &Path) -> Result<()> {
    for o in outputs {
        m.artifact(o)?;
    }
    m.write(&manifest::sidecar(primary))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = config::load(cli.config.as_deref(), cli.seed)?;
    let ctx = Ctx {
        root: cli.run_root,
        cfg,
    };
    let cfg = &ctx.cfg;
    match cli.command {
        Command::MakeDataset { kind, n, out } => {
            let (spec, label, default_n) = match kind {
                DataKind::Ind => (gmm::ind_spec(), "ind-paired", cfg.real_samples),
                DataKind::Ood => (gmm::ood_spec(), "ood-paired", cfg.real_samples),
                DataKind::Base => (gmm::base_spec(), "base-data", cfg.base_samples),
            };
            let seed = jointdiff_core::rng::derive_seed(cfg.seed, label);
            let data = Dataset::generate(spec, n.unwrap_or(default_n), seed)?;
            let out = ctx.path(&out);
            data.save(&out)?;
            let mut m = ctx.manifest("make-dataset");
            m.seed("data", seed);
            finish(&mut m, &[out.clone()], &out)
        }
        Command::TrainBase { data, out } => {
            let mut m = ctx.manifest("train-base");
            let data_path = ctx.path(&data);
            m.input(&data_path)?;
            let data = Dataset::load(&data_path)?;
            if data.spec.dim() != 1 {
                return Err(Error::Config("base training needs a 1-D dataset".into()));
            }
            let schedule = NoiseSchedule::from_config(cfg.schedule)?;
            let (model, losses) = trainer::train_base(
                &data.samples,
                MlpSpec::base(schedule.steps()),
                schedule,
                &cfg.base_train,
            )?;
            let out = ctx.path(&out);
            model.save(&out)?;
            let loss_path = out.with_extension("losses.csv");
            let mut text = String::from("step,loss\n");
            for (i, l) in losses.iter().enumerate() {
                text.push_str(&format!("{i},{}\n", io::fmt_f64(*l)));
            }
            io::write_string(&loss_path, &text)?;
            m.seed("train", cfg.base_train.seed);
            println!("trained base model: {} steps, final loss {:.6}", losses.len(), losses.last().copied().unwrap_or(f64::NAN));
            finish(&mut m, &[out.clone(), loss_path], &out)
        }
        Command::GenFakePool { base, base_y, n, out } => {
            let mut m = ctx.manifest("gen-fake-pool");
            let (bx, by) = ctx.load_bases(&mut m, &base, base_y.as_deref())?;
            let seed = jointdiff_core::rng::derive_seed(cfg.seed, "fake-pool");
            let pool = trainer::generate_fake_pool(&bx, &by, n.unwrap_or(cfg.fake_samples), seed)?;
            let out = ctx.path(&out);
            pool.save(&out)?;
            m.seed("pool", seed);
            finish(&mut m, &[out.clone()], &out)
        }
        Command::TrainGuidance {
            base,
            base_y,
            paired,
            fakes,
            loss,
            out,
        } => {
            let mut m = ctx.manifest("train-guidance");
            let (bx, by) = ctx.load_bases(&mut m, &base, base_y.as_deref())?;
            let paired_path = ctx.path(&paired);
            m.input(&paired_path)?;
            let paired = Dataset::load(&paired_path)?;
            let fakes_path = ctx.path(&fakes);
            m.input(&fakes_path)?;
            let fakes = FakePairStore::load(&fakes_path)?;
            let mut tc = cfg.disc_train.clone();
            tc.loss_weights = match loss {
                LossArg::Disc => LossWeights::DISC,
                LossArg::Denoise => LossWeights::DENOISE,
                LossArg::All => LossWeights::ALL,
            };
            let schedules = ModalitySchedules::new(bx.schedule.clone(), by.schedule.clone())?;
            let (d, records) = trainer::train_discriminator(
                &bx,
                &by,
                &paired,
                &fakes,
                MlpSpec::discriminator(schedules.steps()),
                &tc,
            )?;
            let out = ctx.path(&out);
            d.save(&out)?;
            let loss_path = out.with_extension("losses.csv");
            io::write_string(&loss_path, &trainer::loss_records_csv(&records))?;
            m.seed("train", tc.seed);
            m.config["disc_train"] = serde_json::to_value(&tc).expect("config serializes");
            finish(&mut m, &[out.clone(), loss_path], &out)
        }
        Command::Sample {
            base,
            base_y,
            disc,
            mode,
            n,
            out,
        } => {
            let mut m = ctx.manifest("sample");
            let (bx, by) = ctx.load_bases(&mut m, &base, base_y.as_deref())?;
            let d = match (mode, disc) {
                (ModeArg::Guided, Some(p)) => {
                    let p = ctx.path(&p);
                    m.input(&p)?;
                    Some(JointDiscriminator::load(&p)?)
                }
                (ModeArg::Guided, None) => {
                    return Err(Error::Config("guided sampling needs --disc".into()))
                }
                (ModeArg::Independent, Some(_)) => {
                    return Err(Error::Config("independent sampling takes no --disc".into()))
                }
                (ModeArg::Independent, None) => None,
            };
            let seed = jointdiff_core::rng::derive_seed(cfg.seed, "sample");
            let mut sc = SamplerConfig::new(
                n.unwrap_or(cfg.eval_samples),
                seed,
                match mode {
                    ModeArg::Guided => SamplingMode::Guided,
                    ModeArg::Independent => SamplingMode::Independent,
                },
            );
            sc.guidance_scale = cfg.guidance_scale;
            let samples = sampler::sample_joint(&bx, &by, d.as_ref(), &sc)?;
            let out = ctx.path(&out);
            eval::export_scatter(&samples, &out)?;
            m.seed("sample", seed);
            m.config["sampler"] = serde_json::to_value(sc).expect("config serializes");
            finish(&mut m, &[out.clone()], &out)
        }
        Command::Eval {
            samples,
            target,
            out,
        } => {
            let mut m = ctx.manifest("eval");
            let sp = ctx.path(&samples);
            m.input(&sp)?;
            let s = eval::read_scatter(&sp)?;
            let report = eval::evaluate(
                &s,
                &Setting::from(target).target(),
                cfg.coverage_radius,
                cfg.seed,
                cfg.hash(),
            )?;
            let out = ctx.path(&out);
            io::write_json(&out, &report)?;
            println!(
                "NLL {:.4} (s.e. {:.4}), captured {:.4}",
                report.nll, report.nll_std_err, report.coverage.captured_fraction
            );
            finish(&mut m, &[out.clone()], &out)
        }
        Command::ReproduceTable1 { setting, out_dir } => {
            let setting = Setting::from(setting);
            let dir = ctx.path(&out_dir.unwrap_or_else(|| {
                PathBuf::from(format!("table1-{}-seed{}", setting.name(), cfg.seed))
            }));
            let run = pipeline::reproduce_table1(cfg, setting, Some(&dir))?;
            print!("{}", run.report.to_table());
            let mut m = ctx.manifest("reproduce-table1");
            m.seed("global", cfg.seed);
            let mut outputs: Vec<PathBuf> = std::fs::read_dir(&dir)
                .map_err(|e| Error::Io {
                    path: dir.display().to_string(),
                    source: e,
                })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.file_name().is_some_and(|n| n != "manifest.json"))
                .collect();
            outputs.sort();
            for o in &outputs {
                m.artifact(o)?;
            }
            m.write(&dir.join("manifest.json"))
        }
    }
}
