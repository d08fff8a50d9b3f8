//! The toy experiment end to end: base model, fake pool, one discriminator
//! per loss configuration, guided samples and the NLL comparison table.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{ModalitySchedules, NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport};
use crate::gmm::{self, Dataset, GmmSpec};
use crate::io;
use crate::mlp::MlpSpec;
use crate::networks::{BaseNoisePredictor, JointDiscriminator};
use crate::rng::derive_seed;
use crate::sampler::{self, SamplerConfig, SamplingMode};
use crate::trainer::{self, FakePairStore, LossRecord, LossWeights, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Ind,
    Ood,
}

impl Setting {
    pub fn target(self) -> GmmSpec {
        match self {
            Setting::Ind => gmm::ind_spec(),
            Setting::Ood => gmm::ood_spec(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Setting::Ind => "ind",
            Setting::Ood => "ood",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub schedule: ScheduleConfig,
    /// Size of the 1-D dataset the base model is fit to.
    pub base_samples: usize,
    pub base_train: TrainConfig,
    pub real_samples: usize,
    pub fake_samples: usize,
    /// Loss weights are overridden per table row.
    pub disc_train: TrainConfig,
    pub eval_samples: usize,
    pub coverage_radius: f64,
    pub guidance_scale: f64,
}

impl PipelineConfig {
    /// Table defaults. The discriminator trains for a fixed 8000 steps: the
    /// per-step loss is too noisy for the plateau rule to judge convergence.
    pub fn new(seed: u64) -> Self {
        let mut disc_train = TrainConfig::discriminator(derive_seed(seed, "disc-train"));
        disc_train.steps = 8000;
        disc_train.early_stop = None;
        Self {
            seed,
            schedule: ScheduleConfig::default(),
            base_samples: 2000,
            base_train: TrainConfig::base(derive_seed(seed, "base-train")),
            real_samples: 500,
            fake_samples: 500,
            disc_train,
            eval_samples: 4000,
            coverage_radius: 0.3,
            guidance_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        NoiseSchedule::from_config(self.schedule)?;
        self.base_train.validate()?;
        self.disc_train.validate()?;
        if self.base_samples == 0
            || self.real_samples == 0
            || self.fake_samples == 0
            || self.eval_samples == 0
        {
            return Err(Error::Config("sample counts must be positive".into()));
        }
        if !(self.coverage_radius > 0.0) {
            return Err(Error::Config("coverage radius must be positive".into()));
        }
        Ok(())
    }

    /// Hash of the canonical JSON form.
    pub fn hash(&self) -> String {
        io::sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// Artifacts shared by both settings: the base model and its fake pool.
pub struct Shared {
    pub base: BaseNoisePredictor,
    pub base_losses: Vec<f64>,
    pub fakes: FakePairStore,
}

pub fn base_dataset(cfg: &PipelineConfig) -> Result<Dataset> {
    Dataset::generate(gmm::base_spec(), cfg.base_samples, derive_seed(cfg.seed, "base-data"))
}

pub fn prepare_shared(cfg: &PipelineConfig) -> Result<Shared> {
    cfg.validate()?;
    let schedule = NoiseSchedule::from_config(cfg.schedule)?;
    let data = base_dataset(cfg)?;
    let (base, base_losses) = trainer::train_base(
        &data.samples,
        MlpSpec::base(schedule.steps()),
        schedule,
        &cfg.base_train,
    )?;
    let fakes = trainer::generate_fake_pool(
        &base,
        &base,
        cfg.fake_samples,
        derive_seed(cfg.seed, "fake-pool"),
    )?;
    Ok(Shared {
        base,
        base_losses,
        fakes,
    })
}

pub const ROW_LABELS: [&str; 5] = ["GT", "No joint", "L_disc", "L_denoise", "L_all"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table1Report {
    pub setting: Setting,
    pub seed: u64,
    pub config_hash: String,
    pub rows: Vec<TableRow>,
}

impl Table1Report {
    pub fn row(&self, label: &str) -> Option<&EvalReport> {
        self.rows.iter().find(|r| r.label == label).map(|r| &r.report)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("setting: {}\n", self.setting.name());
        let _ = writeln!(out, "{:<10} {:>10} {:>9} {:>9}", "method", "NLL", "std.err", "captured");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<10} {:>10.4} {:>9.4} {:>9.4}",
                r.label, r.report.nll, r.report.nll_std_err, r.report.coverage.captured_fraction
            );
        }
        out
    }
}

/// Everything one setting produced, kept in memory for callers that want
/// more than the table.
pub struct SettingRun {
    pub report: Table1Report,
    pub paired: Dataset,
    /// `(label, discriminator, loss records)` for the three guided rows.
    pub discriminators: Vec<(String, JointDiscriminator, Vec<LossRecord>)>,
    /// Samples per row, in [`ROW_LABELS`] order.
    pub samples: Vec<crate::tensor::Tensor>,
}

fn row_weights(label: &str) -> Option<LossWeights> {
    match label {
        "L_disc" => Some(LossWeights::DISC),
        "L_denoise" => Some(LossWeights::DENOISE),
        "L_all" => Some(LossWeights::ALL),
        _ => None,
    }
}

fn file_stem(label: &str) -> String {
    label.to_lowercase().replace(' ', "_")
}

/// Runs the five rows of one setting. When `out_dir` is given, every
/// artifact is written beneath it.
pub fn run_setting(
    cfg: &PipelineConfig,
    setting: Setting,
    shared: &Shared,
    out_dir: Option<&Path>,
) -> Result<SettingRun> {
    cfg.validate()?;
    let target = setting.target();
    let hash = cfg.hash();
    let tag = setting.name();
    let paired = Dataset::generate(
        target.clone(),
        cfg.real_samples,
        derive_seed(cfg.seed, &format!("{tag}-paired")),
    )?;
    let sample_seed = derive_seed(cfg.seed, &format!("{tag}-sample"));
    let base = &shared.base;

    let mut rows = Vec::new();
    let mut samples = Vec::new();
    let mut discriminators = Vec::new();
    for label in ROW_LABELS {
        let s = match label {
            "GT" => gmm::sample(&target, cfg.eval_samples, derive_seed(cfg.seed, &format!("{tag}-gt")))?,
            "No joint" => {
                let sc = SamplerConfig::new(cfg.eval_samples, sample_seed, SamplingMode::Independent);
                sampler::sample_joint(base, base, None, &sc)?
            }
            _ => {
                let weights = row_weights(label).expect("guided row");
                let mut tc = cfg.disc_train.clone();
                tc.loss_weights = weights;
                let schedules = ModalitySchedules::new(base.schedule.clone(), base.schedule.clone())?;
                let (d, records) = trainer::train_discriminator(
                    base,
                    base,
                    &paired,
                    &shared.fakes,
                    MlpSpec::discriminator(schedules.steps()),
                    &tc,
                )?;
                let mut sc = SamplerConfig::new(cfg.eval_samples, sample_seed, SamplingMode::Guided);
                sc.guidance_scale = cfg.guidance_scale;
                let s = sampler::sample_joint(base, base, Some(&d), &sc)?;
                if let Some(dir) = out_dir {
                    let stem = file_stem(label);
                    d.save(&dir.join(format!("disc_{stem}.json")))?;
                    io::write_string(
                        &dir.join(format!("losses_{stem}.csv")),
                        &trainer::loss_records_csv(&records),
                    )?;
                }
                discriminators.push((label.to_string(), d, records));
                s
            }
        };
        let report = eval::evaluate(&s, &target, cfg.coverage_radius, sample_seed, hash.clone())?;
        if let Some(dir) = out_dir {
            let stem = file_stem(label);
            eval::export_scatter(&s, &dir.join(format!("samples_{stem}.csv")))?;
            io::write_json(&dir.join(format!("report_{stem}.json")), &report)?;
        }
        rows.push(TableRow {
            label: label.to_string(),
            report,
        });
        samples.push(s);
    }
    let report = Table1Report {
        setting,
        seed: cfg.seed,
        config_hash: hash,
        rows,
    };
    if let Some(dir) = out_dir {
        paired.save(&dir.join("paired.csv"))?;
        io::write_json(&dir.join("table1.json"), &report)?;
        io::write_string(&dir.join("table1.txt"), &report.to_table())?;
    }
    Ok(SettingRun {
        report,
        paired,
        discriminators,
        samples,
    })
}

pub fn write_shared(shared: &Shared, dir: &Path) -> Result<()> {
    shared.base.save(&dir.join("base.json"))?;
    shared.fakes.save(&dir.join("fake_pool.csv"))?;
    let mut losses = String::from("step,loss\n");
    for (i, l) in shared.base_losses.iter().enumerate() {
        let _ = writeln!(losses, "{i},{}", io::fmt_f64(*l));
    }
    io::write_string(&dir.join("base_losses.csv"), &losses)
}

/// Base model, fake pool and one setting's table, optionally written to
/// `out_dir`.
pub fn reproduce_table1(
    cfg: &PipelineConfig,
    setting: Setting,
    out_dir: Option<&Path>,
) -> Result<SettingRun> {
    let shared = prepare_shared(cfg)?;
    if let Some(dir) = out_dir {
        write_shared(&shared, dir)?;
    }
    run_setting(cfg, setting, &shared, out_dir)
}
