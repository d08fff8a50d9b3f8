//! Ancestral sampling: unguided single-modality chains, and joint chains
//! steered by a discriminator's logit gradient.
//!
//! Every chain owns a random stream indexed by its chain id. All chains of a
//! run advance together as one batch, but no chain's draws depend on how
//! many others there are.

use serde::{Deserialize, Serialize};

use crate::diffusion::{reverse_step, NoiseSchedule};
use crate::error::{Error, Result};
use crate::networks::{BaseNoisePredictor, JointDiscriminator};
use crate::rng::{self, StreamRng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    Guided,
    Independent,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_samples: usize,
    pub seed: u64,
    pub guidance_scale: f64,
    pub mode: SamplingMode,
}

impl SamplerConfig {
    pub fn new(n_samples: usize, seed: u64, mode: SamplingMode) -> Self {
        Self {
            n_samples,
            seed,
            guidance_scale: 1.0,
            mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be at least 1".into()));
        }
        if !(self.guidance_scale.is_finite() && self.guidance_scale >= 0.0) {
            return Err(Error::Config(format!(
                "guidance_scale must be finite and >= 0, got {}",
                self.guidance_scale
            )));
        }
        Ok(())
    }
}

/// `ε̂ = ε_base - scale · √(1-ᾱ_t) · g`, where `g` is the logit gradient.
/// The implied score is the base score plus `scale · g`.
pub fn guided_noise(
    eps_base: &Tensor,
    g: &Tensor,
    t: usize,
    s: &NoiseSchedule,
    scale: f64,
) -> Result<Tensor> {
    if eps_base.shape() != g.shape() {
        return Err(Error::shape(
            "guided_noise",
            format!("{:?} vs {:?}", eps_base.shape(), g.shape()),
        ));
    }
    s.check_t(t)?;
    let k = scale * s.noise_std(t);
    Ok(eps_base.zip_map(g, |e, gv| e - k * gv))
}

fn chain_streams(seed: u64, label: &str, n: usize) -> Vec<StreamRng> {
    (0..n).map(|i| rng::stream(seed, label, i as u64)).collect()
}

fn draw_column(rngs: &mut [StreamRng]) -> Tensor {
    let v: Vec<f64> = rngs.iter_mut().map(|r| rng::normal(r)).collect();
    Tensor::column(&v)
}

/// `n` unguided ancestral chains of one base model, from `x_T ~ N(0, 1)`
/// down to `x_0`.
pub fn sample_base(base: &BaseNoisePredictor, n: usize, seed: u64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Contract("sample count must be positive".into()));
    }
    let s = &base.schedule;
    let mut rngs = chain_streams(seed, "base-chain", n);
    let mut x = draw_column(&mut rngs);
    for t in (1..=s.steps()).rev() {
        let eps = base.predict_noise(&x, t)?;
        let z = draw_column(&mut rngs);
        x = reverse_step(&x, t, &eps, s, &z)?;
    }
    finite_or_err(&x, "base sampling")?;
    Ok(x.into_data())
}

fn finite_or_err(t: &Tensor, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} produced non-finite values")))
    }
}

/// Joint ancestral sampling. Returns `[n, 2]` with row `i` produced by
/// chain `i`.
pub fn sample_joint(
    base_x: &BaseNoisePredictor,
    base_y: &BaseNoisePredictor,
    disc: Option<&JointDiscriminator>,
    cfg: &SamplerConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    let (sx, sy) = (&base_x.schedule, &base_y.schedule);
    if sx.steps() != sy.steps() {
        return Err(Error::Config("base models disagree on T".into()));
    }
    match (cfg.mode, disc) {
        (SamplingMode::Guided, None) => {
            return Err(Error::Contract("guided sampling needs a discriminator".into()))
        }
        (SamplingMode::Independent, Some(_)) => {
            return Err(Error::Contract(
                "independent sampling takes no discriminator".into(),
            ))
        }
        (SamplingMode::Guided, Some(d)) => {
            if &d.schedules.x != sx || &d.schedules.y != sy {
                return Err(Error::Config(
                    "discriminator schedules differ from the base models'".into(),
                ));
            }
        }
        (SamplingMode::Independent, None) => {}
    }

    let n = cfg.n_samples;
    let mut rngs = chain_streams(cfg.seed, "joint-chain", n);
    let (mut x, mut y) = init_pair(&mut rngs);
    for t in (1..=sx.steps()).rev() {
        let mut ex = base_x.predict_noise(&x, t)?;
        let mut ey = base_y.predict_noise(&y, t)?;
        if let Some(d) = disc {
            let (gx, gy) = d.guidance_gradient(&x, &y, t)?;
            ex = guided_noise(&ex, &gx, t, sx, cfg.guidance_scale)?;
            ey = guided_noise(&ey, &gy, t, sy, cfg.guidance_scale)?;
        }
        let (zx, zy) = init_pair(&mut rngs);
        x = reverse_step(&x, t, &ex, sx, &zx)?;
        y = reverse_step(&y, t, &ey, sy, &zy)?;
    }
    let out = JointDiscriminator::pair_input(&x, &y)?;
    finite_or_err(&out, "joint sampling")?;
    Ok(out)
}

/// One `(x, y)` normal pair per chain, x drawn before y.
fn init_pair(rngs: &mut [StreamRng]) -> (Tensor, Tensor) {
    let mut xs = Vec::with_capacity(rngs.len());
    let mut ys = Vec::with_capacity(rngs.len());
    for r in rngs.iter_mut() {
        xs.push(rng::normal(r));
        ys.push(rng::normal(r));
    }
    (Tensor::column(&xs), Tensor::column(&ys))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::MlpSpec;
    use rand::Rng;

    #[test]
    fn guided_noise_score_identity() {
        let s = NoiseSchedule::linear(500, 1e-4, 0.02).unwrap();
        let mut r = rng::stream(3, "t", 0);
        for _ in 0..50 {
            let t = r.gen_range(1..=500);
            let e = Tensor::column(&rng::normals(&mut r, 4));
            let g = Tensor::column(&rng::normals(&mut r, 4));
            let guided = guided_noise(&e, &g, t, &s, 1.0).unwrap();
            let lhs = crate::diffusion::noise_to_score(&guided, t, &s).unwrap();
            let rhs = crate::diffusion::noise_to_score(&e, t, &s).unwrap().add(&g);
            for (a, b) in lhs.data().iter().zip(rhs.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn config_and_mode_checks() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let b = BaseNoisePredictor::new(MlpSpec::base(10), s, 1).unwrap();
        let mut cfg = SamplerConfig::new(0, 1, SamplingMode::Independent);
        assert!(matches!(sample_joint(&b, &b, None, &cfg), Err(Error::Config(_))));
        cfg.n_samples = 2;
        cfg.mode = SamplingMode::Guided;
        assert!(matches!(sample_joint(&b, &b, None, &cfg), Err(Error::Contract(_))));
        cfg.guidance_scale = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn chains_independent_of_batch_size() {
        let s = NoiseSchedule::linear(20, 1e-4, 0.02).unwrap();
        let b = BaseNoisePredictor::new(MlpSpec::base(20), s, 4).unwrap();
        let small = sample_joint(&b, &b, None, &SamplerConfig::new(3, 9, SamplingMode::Independent)).unwrap();
        let big = sample_joint(&b, &b, None, &SamplerConfig::new(7, 9, SamplingMode::Independent)).unwrap();
        assert_eq!(small.data(), &big.data()[..6]);
    }
}
