//! Sample-quality metrics against an analytic mixture target.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{self, GmmSpec};
use crate::io;
use crate::tensor::Tensor;

fn check_samples(samples: &Tensor, target: &GmmSpec) -> Result<()> {
    if samples.is_empty() || samples.rows() == 0 {
        return Err(Error::Contract("empty sample set".into()));
    }
    if samples.shape().len() != 2 || samples.cols() != target.dim() {
        return Err(Error::shape(
            "eval",
            format!("samples {:?} vs target dimension {}", samples.shape(), target.dim()),
        ));
    }
    Ok(())
}

/// Mean negative natural-log density of the samples under `target`.
pub fn nll(samples: &Tensor, target: &GmmSpec) -> Result<f64> {
    nll_estimate(samples, target).map(|e| e.mean)
}

/// NLL with the standard error of its sample mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NllEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub n: usize,
}

pub fn nll_estimate(samples: &Tensor, target: &GmmSpec) -> Result<NllEstimate> {
    check_samples(samples, target)?;
    let vals: Vec<f64> = (0..samples.rows())
        .map(|r| -gmm::log_density(target, samples.row(r)))
        .collect();
    let n = vals.len();
    let mean = vals.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    Ok(NllEstimate {
        mean,
        std_err: (var / n as f64).sqrt(),
        n,
    })
}

/// Share of samples within `radius` (Euclidean) of each target mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeCoverage {
    pub radius: f64,
    pub counts: Vec<usize>,
    pub frequencies: Vec<f64>,
    pub captured_fraction: f64,
    pub n: usize,
}

impl ModeCoverage {
    pub fn occupied(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }
}

/// A sample counts toward its nearest mean when that mean is within
/// `radius`; otherwise it is uncaptured.
pub fn mode_coverage(samples: &Tensor, target: &GmmSpec, radius: f64) -> Result<ModeCoverage> {
    check_samples(samples, target)?;
    if !(radius > 0.0) {
        return Err(Error::Contract(format!("radius must be positive, got {radius}")));
    }
    let mut counts = vec![0usize; target.components()];
    for r in 0..samples.rows() {
        let p = samples.row(r);
        let (k, d2) = target
            .means
            .iter()
            .enumerate()
            .map(|(k, m)| (k, m.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()))
            .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
        if d2 <= radius * radius {
            counts[k] += 1;
        }
    }
    let n = samples.rows();
    let frequencies: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
    let captured = counts.iter().sum::<usize>() as f64 / n as f64;
    Ok(ModeCoverage {
        radius,
        counts,
        frequencies,
        captured_fraction: captured,
        n,
    })
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2))
}

/// Total-variation distance between the empirical distribution of 1-D
/// samples and a 1-D mixture, on `bins` equal bins spanning the means
/// ± 5σ. Mass outside the grid is compared as one extra cell.
pub fn tv_distance_1d(samples: &[f64], target: &GmmSpec, bins: usize) -> Result<f64> {
    if samples.is_empty() || bins == 0 {
        return Err(Error::Contract("need samples and at least one bin".into()));
    }
    if target.dim() != 1 {
        return Err(Error::shape("tv_distance_1d", "target must be 1-D"));
    }
    let centers: Vec<f64> = target.means.iter().map(|m| m[0]).collect();
    let lo = centers.iter().cloned().fold(f64::INFINITY, f64::min) - 5.0 * target.sigma;
    let hi = centers.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 5.0 * target.sigma;
    let width = (hi - lo) / bins as f64;
    let mixture_cdf = |x: f64| {
        centers
            .iter()
            .map(|m| normal_cdf((x - m) / target.sigma))
            .sum::<f64>()
            / centers.len() as f64
    };

    let mut hist = vec![0usize; bins];
    let mut outside = 0usize;
    for &s in samples {
        if s < lo || s >= hi {
            outside += 1;
        } else {
            hist[(((s - lo) / width) as usize).min(bins - 1)] += 1;
        }
    }
    let n = samples.len() as f64;
    let mut tv = 0.0;
    let mut inside_mass = 0.0;
    for (i, &c) in hist.iter().enumerate() {
        let a = lo + i as f64 * width;
        let mass = mixture_cdf(a + width) - mixture_cdf(a);
        inside_mass += mass;
        tv += (c as f64 / n - mass).abs();
    }
    tv += (outside as f64 / n - (1.0 - inside_mass)).abs();
    Ok(0.5 * tv)
}

/// Writes `chain_id,x,y` rows in chain order.
pub fn export_scatter(samples: &Tensor, path: &Path) -> Result<()> {
    io::write_string(path, &scatter_text(samples)?)
}

pub fn scatter_text(samples: &Tensor) -> Result<String> {
    if samples.shape().len() != 2 || samples.cols() != 2 {
        return Err(Error::shape("export_scatter", format!("{:?}", samples.shape())));
    }
    let mut out = String::from("chain_id,x,y\n");
    for r in 0..samples.rows() {
        out.push_str(&format!(
            "{r},{},{}\n",
            io::fmt_f64(samples.get(r, 0)),
            io::fmt_f64(samples.get(r, 1))
        ));
    }
    Ok(out)
}

pub fn read_scatter(path: &Path) -> Result<Tensor> {
    let text = io::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "chain_id,x,y")) => {}
        _ => return Err(Error::format(path, "missing chain_id,x,y header")),
    }
    let mut data = Vec::new();
    for (i, line) in lines.filter(|(_, l)| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(Error::format(path, format!("line {}: expected 3 fields", i + 1)));
        }
        let id: usize = fields[0]
            .trim()
            .parse()
            .map_err(|_| Error::format(path, format!("line {}: bad chain id", i + 1)))?;
        if id != data.len() / 2 {
            return Err(Error::format(path, format!("line {}: chain ids out of order", i + 1)));
        }
        data.push(io::parse_f64(fields[1], path, i + 1)?);
        data.push(io::parse_f64(fields[2], path, i + 1)?);
    }
    if data.is_empty() {
        return Err(Error::format(path, "no samples"));
    }
    Ok(Tensor::from_parts(data.len() / 2, 2, data))
}

/// The JSON evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub nll: f64,
    pub nll_std_err: f64,
    pub coverage: ModeCoverage,
    pub n: usize,
    pub seed: u64,
    pub config_hash: String,
}

pub fn evaluate(
    samples: &Tensor,
    target: &GmmSpec,
    radius: f64,
    seed: u64,
    config_hash: String,
) -> Result<EvalReport> {
    let est = nll_estimate(samples, target)?;
    Ok(EvalReport {
        nll: est.mean,
        nll_std_err: est.std_err,
        coverage: mode_coverage(samples, target, radius)?,
        n: est.n,
        seed,
        config_hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_mass_at_mean() {
        let spec = GmmSpec::new(vec![vec![0.7]], 0.1).unwrap();
        let s = Tensor::column(&[0.7; 10]);
        // -log N(0; 0, 0.1²) = 0.5 ln 2π + ln 0.1
        assert!((nll(&s, &spec).unwrap() + 1.3836465597893727).abs() < 1e-12);
        assert_eq!(nll_estimate(&s, &spec).unwrap().std_err, 0.0);
    }

    #[test]
    fn empty_and_mismatched() {
        let spec = gmm::ind_spec();
        assert!(matches!(nll(&Tensor::zeros(0, 2), &spec), Err(Error::Contract(_))));
        assert!(matches!(nll(&Tensor::zeros(3, 1), &spec), Err(Error::Shape { .. })));
    }

    #[test]
    fn coverage_at_means() {
        let spec = gmm::ind_spec();
        let flat: Vec<f64> = spec.means.iter().flatten().cloned().collect();
        let s = Tensor::from_parts(5, 2, flat);
        let c = mode_coverage(&s, &spec, 0.3).unwrap();
        assert_eq!(c.frequencies, vec![0.2; 5]);
        assert_eq!(c.captured_fraction, 1.0);
        let far = Tensor::matrix(1, 2, vec![10.0, 10.0]).unwrap();
        assert_eq!(mode_coverage(&far, &spec, 0.3).unwrap().captured_fraction, 0.0);
    }

    #[test]
    fn nll_permutation_invariant() {
        let spec = gmm::ind_spec();
        let s = gmm::sample(&spec, 50, 1).unwrap();
        let rev: Vec<usize> = (0..50).rev().collect();
        let a = nll(&s, &spec).unwrap();
        let b = nll(&s.gather_rows(&rev), &spec).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn tv_of_exact_samples_is_small() {
        let spec = gmm::base_spec();
        let s = gmm::sample(&spec, 20_000, 5).unwrap();
        let tv = tv_distance_1d(s.data(), &spec, 100).unwrap();
        assert!(tv < 0.05, "{tv}");
        let shifted: Vec<f64> = s.data().iter().map(|v| v + 0.5).collect();
        assert!(tv_distance_1d(&shifted, &spec, 100).unwrap() > 0.9);
    }

    #[test]
    fn scatter_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        let s = Tensor::matrix(3, 2, vec![0.1, 0.2, -1.0 / 3.0, 4.0, 5e-300, -0.0]).unwrap();
        export_scatter(&s, &p).unwrap();
        assert_eq!(read_scatter(&p).unwrap(), s);
        assert!(io::read_to_string(&p).unwrap().starts_with("chain_id,x,y\n0,"));
    }
}
