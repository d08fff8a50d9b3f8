//! Equal-weight isotropic Gaussian mixtures: the toy data source and the
//! analytic density used for NLL and density-ratio oracles.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::rng;
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmSpec {
    pub means: Vec<Vec<f64>>,
    /// Shared per-dimension standard deviation.
    pub sigma: f64,
}

impl GmmSpec {
    pub fn new(means: Vec<Vec<f64>>, sigma: f64) -> Result<Self> {
        let spec = Self { means, sigma };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("mixture sigma must be positive, got {}", self.sigma)));
        }
        let Some(first) = self.means.first() else {
            return Err(Error::Config("mixture needs at least one component".into()));
        };
        if first.is_empty() || self.means.iter().any(|m| m.len() != first.len()) {
            return Err(Error::Config("mixture means must share one positive dimension".into()));
        }
        if self.means.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config("mixture means must be finite".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn components(&self) -> usize {
        self.means.len()
    }

    /// Marginal along coordinate `axis` (one component per original one).
    pub fn marginal(&self, axis: usize) -> GmmSpec {
        GmmSpec {
            means: self.means.iter().map(|m| vec![m[axis]]).collect(),
            sigma: self.sigma,
        }
    }

    /// Independent product of two 1-D mixtures with equal `sigma`.
    pub fn product(a: &GmmSpec, b: &GmmSpec) -> Result<GmmSpec> {
        if a.dim() != 1 || b.dim() != 1 || a.sigma != b.sigma {
            return Err(Error::Config(
                "product needs two 1-D mixtures with the same sigma".into(),
            ));
        }
        let means = a
            .means
            .iter()
            .flat_map(|x| b.means.iter().map(move |y| vec![x[0], y[0]]))
            .collect();
        Ok(GmmSpec {
            means,
            sigma: a.sigma,
        })
    }

    /// Law of `√ᾱ·x0 + √(1-ᾱ)·ε` for `x0` drawn from this mixture, which is
    /// again an isotropic mixture.
    pub fn diffused(&self, alpha_bar: f64) -> GmmSpec {
        let a = alpha_bar.sqrt();
        GmmSpec {
            means: self
                .means
                .iter()
                .map(|m| m.iter().map(|v| a * v).collect())
                .collect(),
            sigma: (alpha_bar * self.sigma * self.sigma + 1.0 - alpha_bar).sqrt(),
        }
    }
}

/// 1-D base distribution: five modes at `[-3, -1.5, 0, 1.5, 3]`, σ = 0.1.
pub fn base_spec() -> GmmSpec {
    GmmSpec {
        means: [-3.0, -1.5, 0.0, 1.5, 3.0].iter().map(|&m| vec![m]).collect(),
        sigma: 0.1,
    }
}

/// In-domain pairs: marginals equal [`base_spec`].
pub fn ind_spec() -> GmmSpec {
    GmmSpec {
        means: vec![
            vec![-3.0, 1.5],
            vec![-1.5, -3.0],
            vec![0.0, 3.0],
            vec![1.5, 0.0],
            vec![3.0, -1.5],
        ],
        sigma: 0.1,
    }
}

/// Out-of-domain pairs: marginals differ from [`base_spec`].
pub fn ood_spec() -> GmmSpec {
    GmmSpec {
        means: vec![
            vec![-2.25, -2.25],
            vec![2.25, 2.25],
            vec![-2.25, 2.25],
            vec![2.25, -2.25],
            vec![0.0, 0.0],
        ],
        sigma: 0.1,
    }
}

/// Draws `n` points along with the index of the component each came from.
pub fn sample_labeled(spec: &GmmSpec, n: usize, seed: u64) -> Result<(Tensor, Vec<usize>)> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Contract("sample count must be at least 1".into()));
    }
    let mut rng = rng::stream(seed, "gmm-sample", 0);
    let d = spec.dim();
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.gen_range(0..spec.components());
        labels.push(k);
        for &m in &spec.means[k] {
            data.push(m + spec.sigma * rng::normal(&mut rng));
        }
    }
    Ok((Tensor::from_parts(n, d, data), labels))
}

pub fn sample(spec: &GmmSpec, n: usize, seed: u64) -> Result<Tensor> {
    sample_labeled(spec, n, seed).map(|(t, _)| t)
}

/// `log Σ_k (1/K) N(point; μ_k, σ² I)` via log-sum-exp.
pub fn log_density(spec: &GmmSpec, point: &[f64]) -> f64 {
    assert_eq!(point.len(), spec.dim(), "point dimension");
    let d = spec.dim() as f64;
    let inv_var = 1.0 / (spec.sigma * spec.sigma);
    let norm = -0.5 * d * LN_2PI - d * spec.sigma.ln() - (spec.components() as f64).ln();
    let exps: Vec<f64> = spec
        .means
        .iter()
        .map(|m| {
            let sq: f64 = m.iter().zip(point).map(|(a, b)| (a - b) * (a - b)).sum();
            -0.5 * sq * inv_var
        })
        .collect();
    let max = exps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    norm + max + exps.iter().map(|e| (e - max).exp()).sum::<f64>().ln()
}

/// Gradient of [`log_density`] with respect to the point.
pub fn score(spec: &GmmSpec, point: &[f64]) -> Vec<f64> {
    let inv_var = 1.0 / (spec.sigma * spec.sigma);
    let logs: Vec<f64> = spec
        .means
        .iter()
        .map(|m| -0.5 * inv_var * m.iter().zip(point).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    (0..spec.dim())
        .map(|j| {
            spec.means
                .iter()
                .zip(&w)
                .map(|(m, wk)| wk * (m[j] - point[j]) * inv_var)
                .sum::<f64>()
                / total
        })
        .collect()
}

/// A generated dataset plus what is needed to regenerate it.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: GmmSpec,
    pub seed: u64,
    pub samples: Tensor,
}

/// Paired `(x, y)` data for discriminator training.
pub type PairedDataset = Dataset;

const DATASET_FORMAT: &str = "jointdiff dataset v1";

impl Dataset {
    pub fn generate(spec: GmmSpec, n: usize, seed: u64) -> Result<Self> {
        let samples = sample(&spec, n, seed)?;
        Ok(Self {
            spec,
            seed,
            samples,
        })
    }

    pub fn to_text(&self) -> String {
        let spec = serde_json::to_string(&self.spec).expect("GmmSpec serializes");
        let mut out = format!(
            "# {DATASET_FORMAT}\n# spec: {spec}\n# seed: {}\n# n: {}\n# dim: {}\n",
            self.seed,
            self.samples.rows(),
            self.samples.cols()
        );
        for r in 0..self.samples.rows() {
            let row: Vec<String> = self.samples.row(r).iter().map(|&v| io::fmt_f64(v)).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_string(path, &self.to_text())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = io::read_to_string(path)?;
        let (header, rows) = io::split_header(&text);
        if io::header_value(&header, DATASET_FORMAT).is_none() {
            return Err(Error::format(path, "missing dataset format line"));
        }
        let get = |k: &str| {
            io::header_value(&header, k)
                .ok_or_else(|| Error::format(path, format!("missing header field {k}")))
        };
        let spec: GmmSpec =
            serde_json::from_str(get("spec")?).map_err(|e| Error::format(path, e.to_string()))?;
        spec.validate()?;
        let parse_usize = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| Error::format(path, format!("bad header field {k}")))
        };
        let seed = parse_usize("seed")?;
        let n = parse_usize("n")? as usize;
        let dim = parse_usize("dim")? as usize;
        if dim != spec.dim() {
            return Err(Error::format(path, "dim header disagrees with spec"));
        }
        if rows.len() != n {
            return Err(Error::format(path, format!("expected {n} rows, found {}", rows.len())));
        }
        let mut data = Vec::with_capacity(n * dim);
        for (line, row) in rows {
            let fields: Vec<&str> = row.split(',').collect();
            if fields.len() != dim {
                return Err(Error::format(path, format!("line {line}: expected {dim} fields")));
            }
            for f in fields {
                data.push(io::parse_f64(f, path, line)?);
            }
        }
        Ok(Self {
            spec,
            seed,
            samples: Tensor::new(vec![n, dim], data)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_specs_are_verbatim() {
        let b = base_spec();
        assert_eq!(
            b.means.iter().map(|m| m[0]).collect::<Vec<_>>(),
            vec![-3.0, -1.5, 0.0, 1.5, 3.0]
        );
        assert_eq!(b.sigma, 0.1);
        let ind = ind_spec();
        assert_eq!(ind.marginal(0).means, b.means);
        let mut ind_y: Vec<f64> = ind.marginal(1).means.iter().map(|m| m[0]).collect();
        ind_y.sort_by(f64::total_cmp);
        assert_eq!(ind_y, vec![-3.0, -1.5, 0.0, 1.5, 3.0]);
        // OOD x-coordinates equal the listed [2.25, -2.25, 2.25, -2.25, 0]
        // up to ordering
        let mut ood_x: Vec<f64> = ood_spec().means.iter().map(|m| m[0]).collect();
        let mut listed = vec![2.25, -2.25, 2.25, -2.25, 0.0];
        ood_x.sort_by(f64::total_cmp);
        listed.sort_by(f64::total_cmp);
        assert_eq!(ood_x, listed);
        let mut peaks = ood_x.clone();
        peaks.dedup();
        assert_eq!(peaks, vec![-2.25, 0.0, 2.25]);
    }

    #[test]
    fn invalid_specs() {
        assert!(GmmSpec::new(vec![vec![0.0]], 0.0).is_err());
        assert!(GmmSpec::new(vec![], 0.1).is_err());
        assert!(GmmSpec::new(vec![vec![0.0], vec![1.0, 2.0]], 0.1).is_err());
        assert!(sample(&base_spec(), 0, 1).is_err());
    }

    #[test]
    fn single_component_density_at_mean() {
        let s = GmmSpec::new(vec![vec![0.0]], 0.1).unwrap();
        let want = -(0.1 * (2.0 * std::f64::consts::PI).sqrt()).ln();
        assert!((log_density(&s, &[0.0]) - want).abs() < 1e-14);
        assert!((want - 1.383_646_559_789_372_7).abs() < 1e-12);
    }

    #[test]
    fn density_by_direct_summation() {
        let direct = |spec: &GmmSpec, p: &[f64]| -> f64 {
            let d = spec.dim() as f64;
            let k = spec.components() as f64;
            let s2 = spec.sigma * spec.sigma;
            spec.means
                .iter()
                .map(|m| {
                    let sq: f64 = m.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum();
                    (-(sq) / (2.0 * s2)).exp() / (2.0 * std::f64::consts::PI * s2).powf(d / 2.0) / k
                })
                .sum::<f64>()
                .ln()
        };
        for p in [[-3.0, 1.5], [0.1, 2.9], [1.0, 1.0]] {
            let got = log_density(&ind_spec(), &p);
            assert!((got - direct(&ind_spec(), &p)).abs() < 1e-10, "{p:?}");
        }
        let at_mean = log_density(&ind_spec(), &[-3.0, 1.5]);
        let approx = (0.2f64).ln() - (2.0 * std::f64::consts::PI * 0.01).ln();
        assert!((at_mean - approx).abs() < 1e-9);
        // 1-D base at -3: one component dominates
        let at = log_density(&base_spec(), &[-3.0]);
        assert!((at - ((0.2f64).ln() + 1.383_646_559_789_372_7)).abs() < 1e-12);
    }

    #[test]
    fn far_points_stay_finite() {
        let v = log_density(&ind_spec(), &[100.0, 100.0]);
        assert!(v.is_finite() && v < -1e5);
    }

    #[test]
    fn density_ignores_component_order() {
        let mut rev = ood_spec();
        rev.means.reverse();
        for p in [[0.3, -0.2], [2.0, 2.5], [-7.0, 1.0]] {
            assert_eq!(log_density(&ood_spec(), &p), log_density(&rev, &p));
        }
    }

    #[test]
    fn density_integrates_to_one() {
        let s = ind_spec();
        let (lo, hi, n) = (-4.0, 4.0, 1600);
        let h = (hi - lo) / n as f64;
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let p = [lo + (i as f64 + 0.5) * h, lo + (j as f64 + 0.5) * h];
                total += log_density(&s, &p).exp() * h * h;
            }
        }
        assert!((total - 1.0).abs() < 1e-3, "{total}");
        let b = base_spec();
        let n = 8000;
        let h = 8.0 / n as f64;
        let total: f64 = (0..n)
            .map(|i| log_density(&b, &[-4.0 + (i as f64 + 0.5) * h]).exp() * h)
            .sum();
        assert!((total - 1.0).abs() < 1e-3);
    }

    #[test]
    fn component_counts_are_binomial() {
        let (_, labels) = sample_labeled(&base_spec(), 500, 11).unwrap();
        let sd = (500.0 * 0.2 * 0.8f64).sqrt();
        for k in 0..5 {
            let c = labels.iter().filter(|&&l| l == k).count() as f64;
            assert!((c - 100.0).abs() <= 3.0 * sd, "component {k}: {c}");
        }
    }

    #[test]
    fn tiny_sigma_returns_means() {
        let s = GmmSpec::new(vec![vec![1.5, -2.0], vec![3.0, 0.75]], 1e-300).unwrap();
        let (x, labels) = sample_labeled(&s, 50, 3).unwrap();
        for (r, &k) in labels.iter().enumerate() {
            assert_eq!(x.row(r), s.means[k].as_slice());
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        assert_eq!(sample(&ind_spec(), 100, 5).unwrap(), sample(&ind_spec(), 100, 5).unwrap());
        assert_ne!(sample(&ind_spec(), 100, 5).unwrap(), sample(&ind_spec(), 100, 6).unwrap());
    }

    #[test]
    fn diffused_mixture_matches_moments() {
        let s = GmmSpec::new(vec![vec![2.0]], 0.3).unwrap();
        let d = s.diffused(0.64);
        assert!((d.means[0][0] - 1.6).abs() < 1e-15);
        assert!((d.sigma * d.sigma - (0.64 * 0.09 + 0.36)).abs() < 1e-15);
    }

    #[test]
    fn score_matches_finite_difference() {
        let s = ind_spec().diffused(0.9);
        let p = [0.4, -0.7];
        let g = score(&s, &p);
        let h = 1e-6;
        for j in 0..2 {
            let mut a = p;
            let mut b = p;
            a[j] += h;
            b[j] -= h;
            let fd = (log_density(&s, &a) - log_density(&s, &b)) / (2.0 * h);
            assert!((g[j] - fd).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn dataset_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ind.csv");
        let ds = Dataset::generate(ind_spec(), 37, 9).unwrap();
        ds.save(&path).unwrap();
        assert_eq!(Dataset::load(&path).unwrap(), ds);
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replacen("# n: 37", "# n: 38", 1)).unwrap();
        assert!(matches!(Dataset::load(&path), Err(Error::Format { .. })));
    }
}
