//! The two model roles: the 1-D base noise predictor and the joint pair
//! discriminator, plus their on-disk checkpoint container.
//!
//! The discriminator outputs a raw logit `h`; `D = sigmoid(h)` and
//! `log(D / (1 - D)) = h`, so guidance uses `∇h` directly and never forms `D`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{ModalitySchedules, NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::io;
use crate::mlp::{Mlp, MlpSpec, NetworkParams};
use crate::tensor::Tensor;
use crate::trainer::LossWeights;

/// Training provenance stored alongside the parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub loss_weights: Option<LossWeights>,
    /// Free-form provenance, e.g. checksums of the base checkpoints a
    /// discriminator was trained against.
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaseNoisePredictor {
    pub net: Mlp,
    pub schedule: NoiseSchedule,
    pub meta: CheckpointMeta,
}

impl BaseNoisePredictor {
    pub fn new(spec: MlpSpec, schedule: NoiseSchedule, seed: u64) -> Result<Self> {
        check_base_spec(&spec, &schedule)?;
        Ok(Self {
            net: Mlp::build(spec, seed)?,
            schedule,
            meta: CheckpointMeta {
                seed,
                ..Default::default()
            },
        })
    }

    /// `ε̂ = ε_φ(x_t, t)` for a `[batch, 1]` input at a shared timestep.
    pub fn predict_noise(&self, x_t: &Tensor, t: usize) -> Result<Tensor> {
        self.schedule.check_t(t)?;
        self.net.forward(x_t, &[t])
    }

    /// One timestep per row.
    pub fn predict_noise_rows(&self, x_t: &Tensor, ts: &[usize]) -> Result<Tensor> {
        self.net.forward(x_t, ts)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        CheckpointFile::new(Role::Base, &self.net, self.schedule.config(), None, &self.meta)
            .save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = CheckpointFile::load(path)?;
        if file.role != Role::Base {
            return Err(Error::format(path, "not a base-model checkpoint"));
        }
        let schedule = NoiseSchedule::from_config(file.schedule_x)?;
        let meta = file.meta.clone();
        let net = file.into_mlp(path)?;
        check_base_spec(net.spec(), &schedule)?;
        Ok(Self {
            net,
            schedule,
            meta,
        })
    }
}

fn check_base_spec(spec: &MlpSpec, schedule: &NoiseSchedule) -> Result<()> {
    if spec.input_dim != 1 || spec.output_dim != 1 {
        return Err(Error::Config("base model must map 1-D inputs to 1-D noise".into()));
    }
    if spec.max_timestep != schedule.steps() {
        return Err(Error::Config(format!(
            "network accepts T = {} but schedule has T = {}",
            spec.max_timestep,
            schedule.steps()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointDiscriminator {
    pub net: Mlp,
    pub schedules: ModalitySchedules,
    pub meta: CheckpointMeta,
}

impl JointDiscriminator {
    pub fn new(spec: MlpSpec, schedules: ModalitySchedules, seed: u64) -> Result<Self> {
        check_disc_spec(&spec, &schedules)?;
        Ok(Self {
            net: Mlp::build(spec, seed)?,
            schedules,
            meta: CheckpointMeta {
                seed,
                ..Default::default()
            },
        })
    }

    pub fn pair_input(x_t: &Tensor, y_t: &Tensor) -> Result<Tensor> {
        if x_t.shape().len() != 2 || x_t.cols() != 1 || x_t.shape() != y_t.shape() {
            return Err(Error::shape(
                "pair input",
                format!("x {:?} and y {:?} must both be [batch, 1]", x_t.shape(), y_t.shape()),
            ));
        }
        Ok(Tensor::from_fn(x_t.rows(), 2, |r, c| {
            if c == 0 {
                x_t.get(r, 0)
            } else {
                y_t.get(r, 0)
            }
        }))
    }

    /// Logit `h(x_t, y_t, t)` per row, `[batch, 1]`.
    pub fn logit(&self, x_t: &Tensor, y_t: &Tensor, t: usize) -> Result<Tensor> {
        self.schedules.x.check_t(t)?;
        self.net.forward(&Self::pair_input(x_t, y_t)?, &[t])
    }

    /// `(∇_{x_t} h, ∇_{y_t} h)`, each `[batch, 1]`.
    pub fn guidance_gradient(&self, x_t: &Tensor, y_t: &Tensor, t: usize) -> Result<(Tensor, Tensor)> {
        self.schedules.x.check_t(t)?;
        let g = self.net.grad_input(&Self::pair_input(x_t, y_t)?, &[t])?;
        let gx = Tensor::from_fn(g.rows(), 1, |r, _| g.get(r, 0));
        let gy = Tensor::from_fn(g.rows(), 1, |r, _| g.get(r, 1));
        Ok((gx, gy))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        CheckpointFile::new(
            Role::Discriminator,
            &self.net,
            self.schedules.x.config(),
            Some(self.schedules.y.config()),
            &self.meta,
        )
        .save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = CheckpointFile::load(path)?;
        if file.role != Role::Discriminator {
            return Err(Error::format(path, "not a discriminator checkpoint"));
        }
        let sx = NoiseSchedule::from_config(file.schedule_x)?;
        let sy = NoiseSchedule::from_config(
            file.schedule_y
                .ok_or_else(|| Error::format(path, "missing y schedule"))?,
        )?;
        let schedules = ModalitySchedules::new(sx, sy)?;
        let meta = file.meta.clone();
        let net = file.into_mlp(path)?;
        check_disc_spec(net.spec(), &schedules)?;
        Ok(Self {
            net,
            schedules,
            meta,
        })
    }
}

fn check_disc_spec(spec: &MlpSpec, schedules: &ModalitySchedules) -> Result<()> {
    if spec.input_dim != 2 || spec.output_dim != 1 {
        return Err(Error::Config("discriminator must map (x, y) pairs to one logit".into()));
    }
    if spec.max_timestep != schedules.steps() {
        return Err(Error::Config("discriminator T disagrees with its schedules".into()));
    }
    Ok(())
}

pub const CHECKPOINT_FORMAT: &str = "jointdiff-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Base,
    Discriminator,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    role: Role,
    spec: MlpSpec,
    schedule_x: ScheduleConfig,
    schedule_y: Option<ScheduleConfig>,
    meta: CheckpointMeta,
    params: Vec<ParamEntry>,
}

impl CheckpointFile {
    fn new(
        role: Role,
        net: &Mlp,
        schedule_x: ScheduleConfig,
        schedule_y: Option<ScheduleConfig>,
        meta: &CheckpointMeta,
    ) -> Self {
        let params = net
            .spec()
            .param_layout()
            .into_iter()
            .zip(net.params().tensors())
            .map(|((name, _, _, _), t)| ParamEntry {
                name,
                shape: t.shape().to_vec(),
                values: t.data().to_vec(),
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            role,
            spec: net.spec().clone(),
            schedule_x,
            schedule_y,
            meta: meta.clone(),
            params,
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    fn load(path: &Path) -> Result<Self> {
        let file: CheckpointFile = io::read_json(path)?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::format(path, format!("unknown format {:?}", file.format)));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported checkpoint version {}", file.version),
            ));
        }
        Ok(file)
    }

    fn into_mlp(self, path: &Path) -> Result<Mlp> {
        let layout = self.spec.param_layout();
        if layout.len() != self.params.len() {
            return Err(Error::format(path, "parameter list does not match the architecture"));
        }
        let mut tensors = Vec::with_capacity(layout.len());
        for ((name, _, _, _), entry) in layout.iter().zip(self.params) {
            if *name != entry.name {
                return Err(Error::format(
                    path,
                    format!("expected parameter {name}, found {}", entry.name),
                ));
            }
            tensors.push(Tensor::new(entry.shape, entry.values)?);
        }
        Mlp::from_params(self.spec, NetworkParams(tensors))
    }
}
