//! DDPM noise schedules, forward noising, the ancestral reverse step and the
//! noise-prediction objective. Timesteps are 1-based: `t ∈ 1..=T`, with
//! `ᾱ_0 = 1`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::{collect_grads, Mlp, NetworkParams};
use crate::autodiff::{Graph, Tape};
use crate::rng;
use crate::tensor::Tensor;

/// What is persisted for a schedule; the coefficient arrays are re-derived.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear `β` from `beta_start` to `beta_end`, both endpoints included.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        Self::from_config(ScheduleConfig {
            steps,
            beta_start,
            beta_end,
        })
    }

    pub fn from_config(config: ScheduleConfig) -> Result<Self> {
        let ScheduleConfig {
            steps,
            beta_start,
            beta_end,
        } = config;
        if steps < 2 {
            return Err(Error::Config(format!("need at least 2 diffusion steps, got {steps}")));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
            .collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        let sigma = (0..steps)
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                ((1.0 - prev) / (1.0 - alpha_bar[i]) * beta[i]).sqrt()
            })
            .collect();
        Ok(Self {
            config,
            beta,
            alpha_bar,
            sigma,
        })
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    pub fn steps(&self) -> usize {
        self.config.steps
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Contract(format!(
                "timestep {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// `β_t`; panics outside `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Reverse-step standard deviation `σ_t`; `σ_1 = 0`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    /// `√(1 - ᾱ_t)`, the noise level of `x_t`.
    pub fn noise_std(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t)).sqrt()
    }
}

/// Per-modality schedules for the `x` and `y` streams.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalitySchedules {
    pub x: NoiseSchedule,
    pub y: NoiseSchedule,
}

impl ModalitySchedules {
    pub fn new(x: NoiseSchedule, y: NoiseSchedule) -> Result<Self> {
        if x.steps() != y.steps() {
            return Err(Error::Config(format!(
                "modality schedules disagree on T: {} vs {}",
                x.steps(),
                y.steps()
            )));
        }
        Ok(Self { x, y })
    }

    pub fn shared(s: NoiseSchedule) -> Self {
        Self { x: s.clone(), y: s }
    }

    pub fn steps(&self) -> usize {
        self.x.steps()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `x_t = √ᾱ_t · x0 + √(1-ᾱ_t) · eps`.
pub fn forward_noise(x0: &Tensor, t: usize, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    same_shape("forward_noise", x0, eps)?;
    s.check_t(t)?;
    let (a, b) = (s.alpha_bar(t).sqrt(), s.noise_std(t));
    Ok(x0.zip_map(eps, |x, e| a * x + b * e))
}

/// Row-wise [`forward_noise`] with one timestep per row.
pub fn forward_noise_rows(
    x0: &Tensor,
    ts: &[usize],
    eps: &Tensor,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    same_shape("forward_noise_rows", x0, eps)?;
    if ts.len() != x0.rows() {
        return Err(Error::shape(
            "forward_noise_rows",
            format!("{} timesteps for {} rows", ts.len(), x0.rows()),
        ));
    }
    for &t in ts {
        s.check_t(t)?;
    }
    let c = x0.cols();
    Ok(Tensor::from_fn(x0.rows(), c, |r, j| {
        let t = ts[r];
        s.alpha_bar(t).sqrt() * x0.get(r, j) + s.noise_std(t) * eps.get(r, j)
    }))
}

/// One ancestral step:
/// `x_{t-1} = (x_t - β_t/√(1-ᾱ_t) · ε̂) / √(1-β_t) + σ_t · z`.
pub fn reverse_step(
    x_t: &Tensor,
    t: usize,
    eps_hat: &Tensor,
    s: &NoiseSchedule,
    z: &Tensor,
) -> Result<Tensor> {
    same_shape("reverse_step", x_t, eps_hat)?;
    same_shape("reverse_step", x_t, z)?;
    s.check_t(t)?;
    let inv_sqrt_alpha = 1.0 / s.alpha(t).sqrt();
    let eps_coef = s.beta(t) / s.noise_std(t);
    let sigma = s.sigma(t);
    let mut out = Tensor::zeros(x_t.rows(), x_t.cols());
    for (((o, &x), &e), &zv) in out
        .data_mut()
        .iter_mut()
        .zip(x_t.data())
        .zip(eps_hat.data())
        .zip(z.data())
    {
        *o = inv_sqrt_alpha * (x - eps_coef * e) + sigma * zv;
    }
    Ok(out)
}

/// Score estimate implied by a noise prediction: `-ε̂ / √(1-ᾱ_t)`.
pub fn noise_to_score(eps_hat: &Tensor, t: usize, s: &NoiseSchedule) -> Result<Tensor> {
    s.check_t(t)?;
    let k = -1.0 / s.noise_std(t);
    Ok(eps_hat.scale(k))
}

/// A noised training batch: `t ~ U{1..T}` and `ε ~ N(0, I)` per row.
#[derive(Clone, Debug)]
pub struct NoisedBatch {
    pub ts: Vec<usize>,
    pub eps: Tensor,
    pub x_t: Tensor,
}

impl NoisedBatch {
    pub fn draw<R: Rng + ?Sized>(x0: &Tensor, s: &NoiseSchedule, rng: &mut R) -> Result<Self> {
        if x0.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let ts: Vec<usize> = (0..x0.rows()).map(|_| rng.gen_range(1..=s.steps())).collect();
        let eps = Tensor::from_parts(x0.rows(), x0.cols(), rng::normals(rng, x0.len()));
        let x_t = forward_noise_rows(x0, &ts, &eps, s)?;
        Ok(Self { ts, eps, x_t })
    }
}

/// Mean over rows of `‖predict(x_t, t) - ε‖²` for any noise predictor.
pub fn denoising_loss_with<R: Rng + ?Sized>(
    predict: impl FnOnce(&Tensor, &[usize]) -> Result<Tensor>,
    batch_x0: &Tensor,
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64> {
    let b = NoisedBatch::draw(batch_x0, s, rng)?;
    let pred = predict(&b.x_t, &b.ts)?;
    same_shape("denoising_loss", &pred, &b.eps)?;
    let sq: f64 = pred.sub(&b.eps).data().iter().map(|v| v * v).sum();
    Ok(sq / batch_x0.rows() as f64)
}

pub fn denoising_loss<R: Rng + ?Sized>(
    model: &Mlp,
    batch_x0: &Tensor,
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64> {
    denoising_loss_with(|x, ts| model.forward(x, ts), batch_x0, s, rng)
}

/// [`denoising_loss`] together with its parameter gradients.
pub fn denoising_loss_grad<R: Rng + ?Sized>(
    model: &Mlp,
    batch_x0: &Tensor,
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<(f64, NetworkParams)> {
    let b = NoisedBatch::draw(batch_x0, s, rng)?;
    model.check_input(&b.x_t, &b.ts)?;
    let tape = Tape::new();
    let params = model.param_leaves(&tape);
    let x = tape.leaf(b.x_t);
    let pred = model.forward_on(&tape, &params, x, &b.ts);
    let eps = tape.leaf(b.eps);
    let diff = tape.sub(&pred, &eps);
    let sq = tape.sum_all(&tape.mul(&diff, &diff));
    let loss = tape.scale(&sq, 1.0 / batch_x0.rows() as f64);
    collect_grads(&tape, loss, &params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table3() -> NoiseSchedule {
        NoiseSchedule::linear(500, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn linear_schedule_endpoints() {
        let s = table3();
        assert_eq!(s.beta(1), 1e-4);
        assert!((s.beta(500) - 0.02).abs() < 1e-15);
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
        assert_eq!(s.sigma(1), 0.0);
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn alpha_bar_matches_direct_product() {
        let s = table3();
        // independent loop: recompute each β from the interpolation formula
        let mut prod = 1.0;
        for t in 1..=500 {
            let beta = 1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / 499.0;
            prod *= 1.0 - beta;
            assert!((s.alpha_bar(t) - prod).abs() < 1e-14, "t={t}");
            if t > 1 {
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
                assert!(s.beta(t) >= s.beta(t - 1));
            }
            assert!(s.sigma(t) <= s.beta(t).sqrt() + 1e-15);
        }
        // ᾱ_500 from a 40-digit product computed offline
        assert!((s.alpha_bar(500) - 0.006_352_710_797_015_05).abs() < 1e-12);
    }

    #[test]
    fn invalid_schedules() {
        assert!(matches!(NoiseSchedule::linear(1, 1e-4, 0.02), Err(Error::Config(_))));
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.03, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
        let a = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let b = NoiseSchedule::linear(11, 1e-4, 0.02).unwrap();
        assert!(ModalitySchedules::new(a, b).is_err());
    }

    #[test]
    fn forward_noise_reductions() {
        let s = table3();
        let x0 = Tensor::column(&[1.0, -2.0]);
        let e = Tensor::column(&[0.5, 3.0]);
        let zero = Tensor::zeros(2, 1);
        let t = 123;
        let a = forward_noise(&x0, t, &zero, &s).unwrap();
        assert_eq!(a, x0.scale(s.alpha_bar(t).sqrt()));
        let b = forward_noise(&zero, t, &e, &s).unwrap();
        assert_eq!(b, e.scale((1.0 - s.alpha_bar(t)).sqrt()));
        assert!(matches!(
            forward_noise(&x0, t, &Tensor::zeros(3, 1), &s),
            Err(Error::Shape { .. })
        ));
        assert!(forward_noise(&x0, 0, &e, &s).is_err());
    }

    #[test]
    fn reverse_step_reductions() {
        let s = table3();
        let x = Tensor::column(&[0.3, -1.2]);
        let zero = Tensor::zeros(2, 1);
        let z = Tensor::column(&[5.0, -7.0]);
        let t = 40;
        let r = reverse_step(&x, t, &zero, &s, &zero).unwrap();
        assert_eq!(r, x.scale(1.0 / (1.0 - s.beta(t)).sqrt()));
        // σ_1 = 0: z has no effect at t = 1
        let eps = Tensor::column(&[0.1, 0.2]);
        assert_eq!(
            reverse_step(&x, 1, &eps, &s, &z).unwrap(),
            reverse_step(&x, 1, &eps, &s, &zero).unwrap()
        );
        assert!(matches!(reverse_step(&x, 501, &eps, &s, &z), Err(Error::Contract(_))));
    }

    #[test]
    fn noise_to_score_arithmetic() {
        let s = table3();
        assert_eq!(noise_to_score(&Tensor::zeros(1, 1), 7, &s).unwrap().item(), 0.0);
        // find t with ᾱ_t closest to 0.75 and check -ε̂/√(1-ᾱ_t) directly
        let t = (1..=500)
            .min_by(|&a, &b| {
                (s.alpha_bar(a) - 0.75)
                    .abs()
                    .total_cmp(&(s.alpha_bar(b) - 0.75).abs())
            })
            .unwrap();
        let got = noise_to_score(&Tensor::scalar(1.0), t, &s).unwrap().item();
        assert_eq!(got, -1.0 / (1.0 - s.alpha_bar(t)).sqrt());
        // exact arithmetic at ᾱ = 0.75
        assert_eq!(-1.0 / (1.0f64 - 0.75).sqrt(), -2.0);
    }
}
