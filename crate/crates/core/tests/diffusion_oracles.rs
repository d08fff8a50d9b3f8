//! Schedule algebra and chain statistics against closed forms.

use jointdiff_core::diffusion::{forward_noise, reverse_step, NoiseSchedule};
use jointdiff_core::rng;
use jointdiff_core::Tensor;

const T: usize = 500;

fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear(T, 1e-4, 0.02).unwrap()
}

/// Linear betas and running products, coded from scratch.
fn reference_tables() -> (Vec<f64>, Vec<f64>) {
    let betas: Vec<f64> = (1..=T)
        .map(|t| 1e-4 + (0.02 - 1e-4) * (t - 1) as f64 / (T - 1) as f64)
        .collect();
    let mut abar = vec![1.0];
    for b in &betas {
        let last = *abar.last().unwrap();
        abar.push(last * (1.0 - b));
    }
    (betas, abar)
}

#[test]
fn reverse_step_matches_reference_formula() {
    let s = schedule();
    let (betas, abar) = reference_tables();
    let mut r = rng::stream(1, "reverse", 0);
    for t in 1..=T {
        let v = rng::normals(&mut r, 3);
        let (x, e, z) = (v[0] * 3.0, v[1], v[2]);
        let b = betas[t - 1];
        let var = (1.0 - abar[t - 1]) / (1.0 - abar[t]) * b;
        let want = (x - b / (1.0 - abar[t]).sqrt() * e) / (1.0 - b).sqrt() + var.sqrt() * z;
        let got = reverse_step(
            &Tensor::column(&[x]),
            t,
            &Tensor::column(&[e]),
            &s,
            &Tensor::column(&[z]),
        )
        .unwrap()
        .item();
        assert!((got - want).abs() < 1e-12, "t={t}: {got} vs {want}");
    }
}

#[test]
fn schedule_invariants() {
    let s = schedule();
    for t in 1..=T {
        assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        assert!(s.sigma(t) <= s.beta(t).sqrt() + 1e-15);
    }
    assert_eq!(s.sigma(1), 0.0);
}

/// Mean and variance bounds at three standard errors.
fn within_3_sigma(samples: &[f64], mean: f64, var: f64) {
    let n = samples.len() as f64;
    let m = samples.iter().sum::<f64>() / n;
    let v = samples.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    assert!((m - mean).abs() < 3.0 * (var / n).sqrt(), "mean {m} vs {mean}");
    // sample variance of a normal has standard error var·√(2/(n-1))
    assert!((v - var).abs() < 3.0 * var * (2.0 / (n - 1.0)).sqrt(), "var {v} vs {var}");
}

#[test]
fn closed_form_forward_marginal() {
    let s = schedule();
    let x0 = 1.7;
    for t in [1, 50, T] {
        let mut r = rng::stream(2, "marginal", t as u64);
        let eps = Tensor::column(&rng::normals(&mut r, 10_000));
        let xt = forward_noise(&Tensor::full(10_000, 1, x0), t, &eps, &s).unwrap();
        within_3_sigma(xt.data(), s.alpha_bar(t).sqrt() * x0, 1.0 - s.alpha_bar(t));
    }
}

#[test]
fn composed_single_steps_match_marginal() {
    let s = schedule();
    let x0 = -0.8;
    let n = 10_000;
    let mut r = rng::stream(3, "steps", 0);
    let mut x = vec![x0; n];
    for t in 1..=100 {
        let b = s.beta(t);
        for v in x.iter_mut() {
            *v = (1.0 - b).sqrt() * *v + b.sqrt() * rng::normal(&mut r);
        }
        if t == 10 || t == 100 {
            within_3_sigma(&x, s.alpha_bar(t).sqrt() * x0, 1.0 - s.alpha_bar(t));
        }
    }
}

#[test]
fn exact_gaussian_score_chain_recovers_data() {
    // data N(m, v0): noisy marginal N(√ᾱ m, ᾱ v0 + 1 - ᾱ) has
    // ε*(x, t) = √(1-ᾱ) (x - √ᾱ m) / (ᾱ v0 + 1 - ᾱ)
    let (m, v0) = (1.5, 0.25);
    let s = schedule();
    let n = 20_000;
    let mut r = rng::stream(4, "chain", 0);
    let mut x = Tensor::column(&rng::normals(&mut r, n));
    for t in (1..=T).rev() {
        let ab = s.alpha_bar(t);
        let var = ab * v0 + 1.0 - ab;
        let eps = x.map(|v| (1.0 - ab).sqrt() * (v - ab.sqrt() * m) / var);
        let z = Tensor::column(&rng::normals(&mut r, n));
        x = reverse_step(&x, t, &eps, &s, &z).unwrap();
    }
    within_3_sigma(x.data(), m, v0);
}
