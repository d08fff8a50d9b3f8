//! Base-model training, fake-pool generation and discriminator training.
//!
//! The discriminator objective is `w_disc · L_disc + w_denoise · L_denoise`:
//!
//! * `L_disc` is binary cross-entropy on noised pairs with labels real = 1,
//!   fake = 0, in the stable softplus form: `softplus(-h)` for real pairs and
//!   `softplus(h)` for fake ones, averaged over all pairs.
//! * `L_denoise` asks the scaled logit gradient to explain the frozen base
//!   models' residual on real pairs:
//!   `‖ε^x - ε_φ(x_t, t) + √(1-ᾱ^x_t) ∂h/∂x_t‖² + (same for y)`.
//!   Minimizing it over θ differentiates through `∇h`, which is why the tape
//!   supports gradients of gradients.
//!
//! Each real or fake pair gets one timestep shared by both modalities and
//! independent noise per modality. Randomness comes from separate named
//! streams per step (`real`, `pairing`, `fake-noise`), so e.g. changing the
//! pairing stream leaves the real batches untouched.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{mean_all, Graph, Tape, Var};
use crate::diffusion::{self, forward_noise_rows, ModalitySchedules, NoiseSchedule};
use crate::error::{Error, Result};
use crate::gmm::PairedDataset;
use crate::io;
use crate::mlp::{collect_grads, MlpSpec, NetworkParams};
use crate::networks::{BaseNoisePredictor, JointDiscriminator};
use crate::rng::{self, derive_seed};
use crate::sampler;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub disc: f64,
    pub denoise: f64,
}

impl LossWeights {
    pub const DISC: Self = Self {
        disc: 1.0,
        denoise: 0.0,
    };
    pub const DENOISE: Self = Self {
        disc: 0.0,
        denoise: 1.0,
    };
    pub const ALL: Self = Self {
        disc: 1.0,
        denoise: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        let ok = |w: f64| w.is_finite() && w >= 0.0;
        if !ok(self.disc) || !ok(self.denoise) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative, got ({}, {})",
                self.disc, self.denoise
            )));
        }
        if self.disc == 0.0 && self.denoise == 0.0 {
            return Err(Error::Config("loss weights are both zero".into()));
        }
        Ok(())
    }

    /// Weight of the regularizer relative to the discriminator loss.
    pub fn lambda(&self) -> Option<f64> {
        (self.disc > 0.0).then(|| self.denoise / self.disc)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &NetworkParams) -> Self {
        let zeros = |p: &NetworkParams| {
            p.tensors()
                .iter()
                .map(|t| Tensor::zeros(t.rows(), t.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            cfg,
            m: zeros(params),
            v: zeros(params),
            step: 0,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn step(&mut self, params: &mut NetworkParams, grads: &NetworkParams) {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads.tensors())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from the base rate at step 0 to zero at the final step.
    Cosine,
}

impl LrSchedule {
    pub fn lr(&self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let frac = step as f64 / total.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// Stop when the mean loss over the latest `window` steps improved on the
/// previous window by less than `min_rel_improvement`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub window: usize,
    pub min_rel_improvement: f64,
}

impl EarlyStop {
    pub fn should_stop(&self, losses: &[f64]) -> bool {
        let w = self.window;
        if w == 0 || losses.len() < 2 * w || losses.len() % w != 0 {
            return false;
        }
        let n = losses.len();
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        let prev = mean(&losses[n - 2 * w..n - w]);
        let cur = mean(&losses[n - w..]);
        (prev - cur) < self.min_rel_improvement * prev.abs()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
    /// Maximum number of optimizer steps.
    pub steps: usize,
    pub loss_weights: LossWeights,
    pub seed: u64,
    pub early_stop: Option<EarlyStop>,
}

impl TrainConfig {
    /// Discriminator defaults: batch 512, Adam 1e-3, weights (1, 1), up to
    /// 2000 steps with a 200-step / 0.1% plateau stop.
    pub fn discriminator(seed: u64) -> Self {
        Self {
            adam: AdamConfig::default(),
            lr_schedule: LrSchedule::Constant,
            batch_size: 512,
            steps: 2000,
            loss_weights: LossWeights::ALL,
            seed,
            early_stop: Some(EarlyStop {
                window: 200,
                min_rel_improvement: 1e-3,
            }),
        }
    }

    /// Base-model defaults: batch 512, Adam 1e-3 with cosine decay over a
    /// fixed 6000 steps.
    pub fn base(seed: u64) -> Self {
        Self {
            adam: AdamConfig::default(),
            lr_schedule: LrSchedule::Cosine,
            batch_size: 512,
            steps: 6000,
            loss_weights: LossWeights::DENOISE,
            seed,
            early_stop: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_weights.validate()?;
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::Config("batch_size and steps must be positive".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

fn numeric_guard(value: f64, what: &str, step: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} became {value} at step {step}")))
    }
}

/// Fits `ε_φ` to a `[n, 1]` dataset with the noise-prediction objective.
/// Returns the model and its per-step loss.
pub fn train_base(
    dataset: &Tensor,
    spec: MlpSpec,
    schedule: NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<(BaseNoisePredictor, Vec<f64>)> {
    cfg.validate()?;
    if dataset.shape().len() != 2 || dataset.cols() != 1 || dataset.is_empty() {
        return Err(Error::shape(
            "train_base",
            format!("expected a non-empty [n, 1] dataset, got {:?}", dataset.shape()),
        ));
    }
    let mut model = BaseNoisePredictor::new(spec, schedule, derive_seed(cfg.seed, "base-init"))?;
    model.meta.seed = cfg.seed;
    let mut adam = Adam::new(cfg.adam, model.net.params());
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut pick = rng::stream(cfg.seed, "base-batch", step as u64);
        let idx: Vec<usize> = (0..cfg.batch_size)
            .map(|_| pick.gen_range(0..dataset.rows()))
            .collect();
        let batch = dataset.gather_rows(&idx);
        let mut noise = rng::stream(cfg.seed, "base-noise", step as u64);
        let (loss, grads) =
            diffusion::denoising_loss_grad(&model.net, &batch, &model.schedule, &mut noise)
                .map_err(|e| annotate(e, step))?;
        numeric_guard(loss, "base loss", step)?;
        adam.set_lr(cfg.lr_schedule.lr(cfg.adam.lr, step, cfg.steps));
        adam.step(model.net.params_mut(), &grads);
        losses.push(loss);
        if cfg.early_stop.is_some_and(|es| es.should_stop(&losses)) {
            break;
        }
    }
    Ok((model, losses))
}

fn annotate(e: Error, step: usize) -> Error {
    match e {
        Error::Numeric(m) => Error::Numeric(format!("{m} (step {step})")),
        other => other,
    }
}

/// Pre-generated unguided samples from the two frozen base models.
#[derive(Clone, Debug, PartialEq)]
pub struct FakePairStore {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub seed: u64,
}

const FAKE_POOL_FORMAT: &str = "jointdiff fake pool v1";

impl FakePairStore {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = format!(
            "# {FAKE_POOL_FORMAT}\n# seed: {}\n# n: {}\n",
            self.seed,
            self.len()
        );
        for (x, y) in self.x.iter().zip(&self.y) {
            out.push_str(&format!("{},{}\n", io::fmt_f64(*x), io::fmt_f64(*y)));
        }
        io::write_string(path, &out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = io::read_to_string(path)?;
        let (header, rows) = io::split_header(&text);
        if io::header_value(&header, FAKE_POOL_FORMAT).is_none() {
            return Err(Error::format(path, "missing fake pool format line"));
        }
        let field = |k: &str| -> Result<u64> {
            io::header_value(&header, k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format(path, format!("missing or bad header field {k}")))
        };
        let seed = field("seed")?;
        let n = field("n")? as usize;
        if rows.len() != n || n == 0 {
            return Err(Error::format(path, format!("expected {n} > 0 rows, found {}", rows.len())));
        }
        let (mut x, mut y) = (Vec::with_capacity(n), Vec::with_capacity(n));
        for (line, row) in rows {
            let Some((a, b)) = row.split_once(',') else {
                return Err(Error::format(path, format!("line {line}: expected x,y")));
            };
            x.push(io::parse_f64(a, path, line)?);
            y.push(io::parse_f64(b, path, line)?);
        }
        Ok(Self { x, y, seed })
    }
}

/// `n` independent `x'` chains from `base_x` and `n` independent `y'` chains
/// from `base_y`, each a full unguided ancestral run.
pub fn generate_fake_pool(
    base_x: &BaseNoisePredictor,
    base_y: &BaseNoisePredictor,
    n: usize,
    seed: u64,
) -> Result<FakePairStore> {
    if n == 0 {
        return Err(Error::Contract("fake pool size must be positive".into()));
    }
    let x = sampler::sample_base(base_x, n, derive_seed(seed, "fake-x"))?;
    let y = sampler::sample_base(base_y, n, derive_seed(seed, "fake-y"))?;
    Ok(FakePairStore { x, y, seed })
}

/// Noised `(x_t, y_t)` pairs with their timesteps and noises.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisedPairs {
    pub ts: Vec<usize>,
    pub eps: Tensor,
    /// `[batch, 2]`: `x_t` in column 0, `y_t` in column 1.
    pub noised: Tensor,
}

impl NoisedPairs {
    /// One `t ~ U{1..T}` per pair, independent `ε` per modality.
    pub fn draw<R: Rng + ?Sized>(
        clean: &Tensor,
        schedules: &ModalitySchedules,
        rng: &mut R,
    ) -> Result<Self> {
        if clean.shape().len() != 2 || clean.cols() != 2 || clean.is_empty() {
            return Err(Error::shape(
                "noised pairs",
                format!("expected non-empty [batch, 2], got {:?}", clean.shape()),
            ));
        }
        let b = clean.rows();
        let ts: Vec<usize> = (0..b).map(|_| rng.gen_range(1..=schedules.steps())).collect();
        let eps = Tensor::from_parts(b, 2, rng::normals(rng, 2 * b));
        let col = |t: &Tensor, c: usize| Tensor::from_fn(b, 1, |r, _| t.get(r, c));
        let xt = forward_noise_rows(&col(clean, 0), &ts, &col(&eps, 0), &schedules.x)?;
        let yt = forward_noise_rows(&col(clean, 1), &ts, &col(&eps, 1), &schedules.y)?;
        let noised = Tensor::from_fn(b, 2, |r, c| if c == 0 { xt.get(r, 0) } else { yt.get(r, 0) });
        Ok(Self { ts, eps, noised })
    }

    fn column(&self, c: usize) -> Tensor {
        Tensor::from_fn(self.noised.rows(), 1, |r, _| self.noised.get(r, c))
    }

    /// `√(1-ᾱ_t)` per row and modality, `[batch, 2]`.
    fn noise_scales(&self, schedules: &ModalitySchedules) -> Tensor {
        Tensor::from_fn(self.ts.len(), 2, |r, c| {
            let s = if c == 0 { &schedules.x } else { &schedules.y };
            s.noise_std(self.ts[r])
        })
    }

    /// `ε - ε_base(z_t, t)` per modality, `[batch, 2]`, from the frozen bases.
    fn base_residual(&self, base_x: &BaseNoisePredictor, base_y: &BaseNoisePredictor) -> Result<Tensor> {
        let ex = base_x.predict_noise_rows(&self.column(0), &self.ts)?;
        let ey = base_y.predict_noise_rows(&self.column(1), &self.ts)?;
        Ok(Tensor::from_fn(self.ts.len(), 2, |r, c| {
            let pred = if c == 0 { ex.get(r, 0) } else { ey.get(r, 0) };
            self.eps.get(r, c) - pred
        }))
    }
}

/// BCE value on already-noised pairs given the two logit columns.
fn bce_on<G: Graph>(g: &G, h_real: Option<&G::Value>, h_fake: Option<&G::Value>) -> G::Value {
    let terms: Vec<G::Value> = h_real
        .map(|h| g.softplus(&g.neg(h)))
        .into_iter()
        .chain(h_fake.map(|h| g.softplus(h)))
        .collect();
    let count: usize = terms.iter().map(|t| g.dims(t).0).sum();
    let sums: Vec<G::Value> = terms.iter().map(|t| g.sum_all(t)).collect();
    let total = sums[1..].iter().fold(sums[0].clone(), |acc, s| g.add(&acc, s));
    g.scale(&total, 1.0 / count as f64)
}

/// Binary cross-entropy of the discriminator on freshly noised real and fake
/// pairs (real = 1, fake = 0).
pub fn disc_loss<R: Rng + ?Sized>(
    d: &JointDiscriminator,
    real_batch: &Tensor,
    fake_batch: &Tensor,
    schedules: &ModalitySchedules,
    rng: &mut R,
) -> Result<f64> {
    let real = NoisedPairs::draw(real_batch, schedules, rng)?;
    let fake = NoisedPairs::draw(fake_batch, schedules, rng)?;
    let hr = d.net.forward(&real.noised, &real.ts)?;
    let hf = d.net.forward(&fake.noised, &fake.ts)?;
    Ok(bce_on(&crate::autodiff::Eager, Some(&hr), Some(&hf)).item())
}

/// Denoising regularization on freshly noised real pairs.
pub fn denoise_loss<R: Rng + ?Sized>(
    d: &JointDiscriminator,
    base_x: &BaseNoisePredictor,
    base_y: &BaseNoisePredictor,
    real_batch: &Tensor,
    schedules: &ModalitySchedules,
    rng: &mut R,
) -> Result<f64> {
    let real = NoisedPairs::draw(real_batch, schedules, rng)?;
    denoise_value(d, base_x, base_y, &real, schedules)
}

fn denoise_value(
    d: &JointDiscriminator,
    base_x: &BaseNoisePredictor,
    base_y: &BaseNoisePredictor,
    real: &NoisedPairs,
    schedules: &ModalitySchedules,
) -> Result<f64> {
    let residual = real.base_residual(base_x, base_y)?;
    let grad = d.net.grad_input(&real.noised, &real.ts)?;
    let scales = real.noise_scales(schedules);
    let r = residual.add(&scales.mul(&grad));
    Ok(r.data().iter().map(|v| v * v).sum::<f64>() / real.ts.len() as f64)
}

/// Loss values of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub l_disc: f64,
    pub l_denoise: f64,
    pub total: f64,
}

pub fn loss_records_csv(records: &[LossRecord]) -> String {
    let mut out = String::from("step,l_disc,l_denoise,total\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.step,
            io::fmt_f64(r.l_disc),
            io::fmt_f64(r.l_denoise),
            io::fmt_f64(r.total)
        ));
    }
    out
}

/// Per-step random streams of discriminator training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DiscSeeds {
    pub real: u64,
    pub pairing: u64,
    pub fake_noise: u64,
}

impl DiscSeeds {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            real: derive_seed(seed, "disc-real"),
            pairing: derive_seed(seed, "disc-pairing"),
            fake_noise: derive_seed(seed, "disc-fake-noise"),
        }
    }
}

/// Everything random about one discriminator step.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscStepBatch {
    pub real: NoisedPairs,
    /// Clean fake pairs: independently drawn `x'` and `y'` pool entries.
    pub fake_clean: Tensor,
    pub fake: NoisedPairs,
}

impl DiscStepBatch {
    pub fn draw(
        paired: &Tensor,
        fakes: &FakePairStore,
        schedules: &ModalitySchedules,
        seeds: &DiscSeeds,
        step: usize,
        batch_size: usize,
    ) -> Result<Self> {
        let mut real_rng = rng::stream(seeds.real, "real", step as u64);
        let idx: Vec<usize> = (0..batch_size)
            .map(|_| real_rng.gen_range(0..paired.rows()))
            .collect();
        let real = NoisedPairs::draw(&paired.gather_rows(&idx), schedules, &mut real_rng)?;

        let mut pair_rng = rng::stream(seeds.pairing, "pairing", step as u64);
        let fake_clean = Tensor::from_fn(batch_size, 2, |_, c| {
            let pool = if c == 0 { &fakes.x } else { &fakes.y };
            pool[pair_rng.gen_range(0..pool.len())]
        });
        let mut fake_rng = rng::stream(seeds.fake_noise, "fake", step as u64);
        let fake = NoisedPairs::draw(&fake_clean, schedules, &mut fake_rng)?;
        Ok(Self {
            real,
            fake_clean,
            fake,
        })
    }
}

/// Objective value parts and parameter gradients of `w_disc·L_disc +
/// w_denoise·L_denoise` on one batch. `bases` may be omitted when
/// `w_denoise = 0`; the regularizer is then reported as NaN.
pub fn disc_objective_grad(
    d: &JointDiscriminator,
    bases: Option<(&BaseNoisePredictor, &BaseNoisePredictor)>,
    batch: &DiscStepBatch,
    weights: LossWeights,
) -> Result<(LossRecord, NetworkParams)> {
    weights.validate()?;
    let schedules = &d.schedules;
    let tape = Tape::new();
    let params = d.net.param_leaves(&tape);
    let real_in = tape.leaf(batch.real.noised.clone());
    let h_real = d.net.forward_on(&tape, &params, real_in, &batch.real.ts);

    let mut terms: Vec<Var> = Vec::new();
    let l_disc;
    let mut l_denoise = f64::NAN;

    if weights.disc > 0.0 {
        let fake_in = tape.leaf(batch.fake.noised.clone());
        let h_fake = d.net.forward_on(&tape, &params, fake_in, &batch.fake.ts);
        let bce = bce_on(&tape, Some(&h_real), Some(&h_fake));
        l_disc = tape.value(bce).item();
        terms.push(tape.scale(&bce, weights.disc));
    } else {
        let hr = tape.value(h_real);
        let hf = d.net.forward(&batch.fake.noised, &batch.fake.ts)?;
        l_disc = bce_on(&crate::autodiff::Eager, Some(&hr), Some(&hf)).item();
    }

    match bases {
        Some((bx, by)) => {
            let residual = batch.real.base_residual(bx, by)?;
            if weights.denoise > 0.0 {
                let total_h = tape.sum_all(&h_real);
                let grad = tape.grad(total_h, &[real_in])?[0];
                let scales = tape.leaf(batch.real.noise_scales(schedules));
                let res = tape.leaf(residual);
                let r = tape.add(&res, &tape.mul(&scales, &grad));
                let rows = batch.real.ts.len();
                // sum over both modalities, mean over pairs
                let den = tape.scale(&mean_all(&tape, &tape.mul(&r, &r)), 2.0);
                debug_assert_eq!(tape.dims(&r), (rows, 2));
                l_denoise = tape.value(den).item();
                terms.push(tape.scale(&den, weights.denoise));
            } else {
                l_denoise = denoise_value(d, bx, by, &batch.real, schedules)?;
            }
        }
        None if weights.denoise > 0.0 => {
            return Err(Error::Config(
                "denoising regularization needs the base models".into(),
            ))
        }
        None => {}
    }

    let total = terms[1..]
        .iter()
        .fold(terms[0], |acc, t| tape.add(&acc, t));
    let (value, grads) = collect_grads(&tape, total, &params)?;
    Ok((
        LossRecord {
            step: 0,
            l_disc,
            l_denoise,
            total: value,
        },
        grads,
    ))
}

/// Trains `D_θ` on real pairs versus re-paired fake-pool samples.
pub fn train_discriminator(
    base_x: &BaseNoisePredictor,
    base_y: &BaseNoisePredictor,
    paired: &PairedDataset,
    fakes: &FakePairStore,
    spec: MlpSpec,
    cfg: &TrainConfig,
) -> Result<(JointDiscriminator, Vec<LossRecord>)> {
    let schedules = ModalitySchedules::new(base_x.schedule.clone(), base_y.schedule.clone())?;
    train_discriminator_with(schedules, Some((base_x, base_y)), &paired.samples, fakes, spec, cfg)
}

/// [`train_discriminator`] with optional bases (needed only when the
/// regularizer weight is positive).
pub fn train_discriminator_with(
    schedules: ModalitySchedules,
    bases: Option<(&BaseNoisePredictor, &BaseNoisePredictor)>,
    paired: &Tensor,
    fakes: &FakePairStore,
    spec: MlpSpec,
    cfg: &TrainConfig,
) -> Result<(JointDiscriminator, Vec<LossRecord>)> {
    cfg.validate()?;
    if paired.shape().len() != 2 || paired.cols() != 2 || paired.is_empty() {
        return Err(Error::shape(
            "train_discriminator",
            format!("paired data must be [n, 2], got {:?}", paired.shape()),
        ));
    }
    if fakes.is_empty() || fakes.x.len() != fakes.y.len() {
        return Err(Error::Config("fake pool is empty or uneven".into()));
    }
    if let Some((bx, by)) = bases {
        if bx.schedule != schedules.x || by.schedule != schedules.y {
            return Err(Error::Config("base schedules differ from the discriminator's".into()));
        }
    }
    let mut d = JointDiscriminator::new(spec, schedules, derive_seed(cfg.seed, "disc-init"))?;
    d.meta.seed = cfg.seed;
    d.meta.loss_weights = Some(cfg.loss_weights);
    let seeds = DiscSeeds::from_seed(cfg.seed);
    let mut adam = Adam::new(cfg.adam, d.net.params());
    let mut records = Vec::with_capacity(cfg.steps);
    let mut totals = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = DiscStepBatch::draw(paired, fakes, &d.schedules, &seeds, step, cfg.batch_size)?;
        let (mut rec, grads) =
            disc_objective_grad(&d, bases, &batch, cfg.loss_weights).map_err(|e| annotate(e, step))?;
        numeric_guard(rec.total, "discriminator loss", step)?;
        rec.step = step;
        adam.set_lr(cfg.lr_schedule.lr(cfg.adam.lr, step, cfg.steps));
        adam.step(d.net.params_mut(), &grads);
        records.push(rec);
        totals.push(rec.total);
        if cfg.early_stop.is_some_and(|es| es.should_stop(&totals)) {
            break;
        }
    }
    Ok((d, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_weight_validation() {
        assert!(LossWeights::ALL.validate().is_ok());
        assert!(matches!(
            LossWeights { disc: 0.0, denoise: 0.0 }.validate(),
            Err(Error::Config(_))
        ));
        assert!(LossWeights { disc: -1.0, denoise: 1.0 }.validate().is_err());
        assert_eq!(LossWeights::ALL.lambda(), Some(1.0));
        assert_eq!(LossWeights::DENOISE.lambda(), None);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = NetworkParams(vec![Tensor::column(&[1.0, -2.0])]);
        let g = NetworkParams(vec![Tensor::column(&[0.5, -3.0])]);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        adam.step(&mut p, &g);
        // bias-corrected first step is lr * sign(g) up to eps
        assert!((p.tensors()[0].data()[0] - (1.0 - 1e-3)).abs() < 1e-10);
        assert!((p.tensors()[0].data()[1] - (-2.0 + 1e-3)).abs() < 1e-10);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let c = LrSchedule::Cosine;
        assert_eq!(c.lr(1e-3, 0, 100), 1e-3);
        assert!((c.lr(1e-3, 50, 100) - 5e-4).abs() < 1e-18);
        assert!(c.lr(1e-3, 99, 100) < 1e-6);
        assert_eq!(LrSchedule::Constant.lr(1e-3, 99, 100), 1e-3);
    }

    #[test]
    fn early_stop_windows() {
        let es = EarlyStop {
            window: 2,
            min_rel_improvement: 0.01,
        };
        assert!(!es.should_stop(&[5.0, 5.0, 4.0]));
        assert!(!es.should_stop(&[5.0, 5.0, 4.0, 4.0]));
        assert!(es.should_stop(&[5.0, 5.0, 4.999, 5.0]));
    }

    #[test]
    fn fake_pool_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pool.csv");
        let pool = FakePairStore {
            x: vec![0.1, -2.5, 3.0],
            y: vec![1.0 / 3.0, 0.0, -1e-9],
            seed: 77,
        };
        pool.save(&p).unwrap();
        assert_eq!(FakePairStore::load(&p).unwrap(), pool);
    }
}
