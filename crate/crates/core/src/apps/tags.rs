//! Joint feature/tag sparse coding with a block misfit.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ipsolve::{solve_code, SolverOptions};
use crate::penalties::{Loss, Misfit, MisfitBlock, PenaltySpec};
use crate::seeds;

/// Training features `X` and tags `B` (samples as columns) with the coding
/// parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedCodingSpec {
    pub features: DMatrix<f64>,
    pub tags: DMatrix<f64>,
    /// Weight `gamma` balancing the tag block against the feature block.
    pub gamma_scale: f64,
    pub misfit_features: PenaltySpec,
    pub misfit_tags: PenaltySpec,
    pub lam: f64,
    pub solver: SolverOptions,
}

impl MixedCodingSpec {
    /// l2 on features and Huber on tags.
    pub fn new(features: DMatrix<f64>, tags: DMatrix<f64>, gamma_scale: f64, kappa: f64, lam: f64) -> Result<Self> {
        let spec = Self {
            features,
            tags,
            gamma_scale,
            misfit_features: PenaltySpec::L2,
            misfit_tags: PenaltySpec::huber(kappa)?,
            lam,
            solver: SolverOptions::default(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.ncols() != self.tags.ncols() {
            return Err(Error::dim(format!(
                "{} feature samples but {} tag samples",
                self.features.ncols(),
                self.tags.ncols()
            )));
        }
        if !(self.gamma_scale >= 0.0 && self.gamma_scale.is_finite()) {
            return Err(Error::param("gamma scale must be >= 0"));
        }
        self.misfit_features.validate()?;
        self.misfit_tags.validate()
    }
}

/// Codes `(y, h)` over `D = [X; gamma B]`:
/// `min_a f(y - X a) + g(gamma (h - B a)) + lam |a|_1`. Returns the code and
/// the refined tags `B a`.
pub fn mixed_code(spec: &MixedCodingSpec, y: &DVector<f64>, h: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
    spec.validate()?;
    let (f, g) = (spec.features.nrows(), spec.tags.nrows());
    if y.len() != f || h.len() != g {
        return Err(Error::dim(format!(
            "feature vector of length {} and tag vector of length {}, expected {f} and {g}",
            y.len(),
            h.len()
        )));
    }
    let a = if spec.gamma_scale == 0.0 || g == 0 {
        solve_code(&spec.features, y, &Misfit::from(spec.misfit_features), spec.lam, None, &spec.solver)?.0
    } else {
        let gm = spec.gamma_scale;
        let mut d = DMatrix::zeros(f + g, spec.features.ncols());
        d.rows_mut(0, f).copy_from(&spec.features);
        d.rows_mut(f, g).copy_from(&(&spec.tags * gm));
        let mut obs = DVector::zeros(f + g);
        obs.rows_mut(0, f).copy_from(y);
        obs.rows_mut(f, g).copy_from(&(h * gm));
        let misfit = Misfit::blocks(vec![
            MisfitBlock {
                start: 0,
                end: f,
                loss: Loss::Plain(spec.misfit_features),
            },
            MisfitBlock {
                start: f,
                end: f + g,
                loss: Loss::Plain(spec.misfit_tags),
            },
        ])?;
        solve_code(&d, &obs, &misfit, spec.lam, None, &spec.solver)?.0
    };
    let refined = &spec.tags * &a;
    Ok((a, refined))
}

/// Parameters of the planted feature/tag generator and the flip experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagExperimentConfig {
    pub subspaces: usize,
    pub subspace_dim: usize,
    pub features: usize,
    pub tags_per_subspace: usize,
    pub train_per_subspace: usize,
    pub test_per_subspace: usize,
    pub feature_noise: f64,
    pub gamma_scale: f64,
    pub kappa: f64,
    pub lam: f64,
    pub seed: u64,
}

impl Default for TagExperimentConfig {
    fn default() -> Self {
        Self {
            subspaces: 4,
            subspace_dim: 2,
            features: 20,
            tags_per_subspace: 3,
            train_per_subspace: 8,
            test_per_subspace: 5,
            feature_noise: 0.05,
            gamma_scale: 1.0,
            kappa: 0.3,
            lam: 0.05,
            seed: 0,
        }
    }
}

/// Planted data: samples of each class lie in a random low-dimensional
/// subspace and carry the binary tag block of their class.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedTags {
    pub train_features: DMatrix<f64>,
    pub train_tags: DMatrix<f64>,
    pub test_features: DMatrix<f64>,
    pub test_tags: DMatrix<f64>,
}

pub fn planted_tags(cfg: &TagExperimentConfig, seed: u64) -> Result<PlantedTags> {
    if cfg.subspaces == 0 || cfg.subspace_dim == 0 || cfg.features < cfg.subspace_dim || cfg.tags_per_subspace == 0 {
        return Err(Error::param("planted tag generator needs nonzero sizes and features >= subspace_dim"));
    }
    let mut rng = seeds::rng(seed);
    let normal = |rng: &mut rand_chacha::ChaCha8Rng| rng.sample::<f64, _>(StandardNormal);
    let bases: Vec<DMatrix<f64>> = (0..cfg.subspaces)
        .map(|_| {
            let raw = DMatrix::from_fn(cfg.features, cfg.subspace_dim, |_, _| normal(&mut rng));
            raw.qr().q()
        })
        .collect();
    let g = cfg.subspaces * cfg.tags_per_subspace;
    let draw = |per: usize, noise: f64, rng: &mut rand_chacha::ChaCha8Rng| {
        let n = per * cfg.subspaces;
        let mut x = DMatrix::zeros(cfg.features, n);
        let mut h = DMatrix::zeros(g, n);
        for s in 0..cfg.subspaces {
            for i in 0..per {
                let col = s * per + i;
                let c = DVector::from_fn(cfg.subspace_dim, |_, _| normal(rng));
                let mut v = &bases[s] * c;
                v /= v.norm();
                for e in v.iter_mut() {
                    *e += noise * normal(rng);
                }
                x.set_column(col, &(&v / v.norm()));
                for k in 0..cfg.tags_per_subspace {
                    h[(s * cfg.tags_per_subspace + k, col)] = 1.0;
                }
            }
        }
        (x, h)
    };
    let (train_features, train_tags) = draw(cfg.train_per_subspace, 0.0, &mut rng);
    let (test_features, test_tags) = draw(cfg.test_per_subspace, cfg.feature_noise, &mut rng);
    Ok(PlantedTags {
        train_features,
        train_tags,
        test_features,
        test_tags,
    })
}

/// Flips exactly `round(fraction * len)` binary entries.
pub fn flip_tags(tags: &DMatrix<f64>, fraction: f64, seed: u64) -> Result<DMatrix<f64>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::param(format!("flip fraction must lie in [0, 1], got {fraction}")));
    }
    let n = tags.len();
    let count = (fraction * n as f64).round() as usize;
    let mut out = tags.clone();
    for pos in sample(&mut seeds::rng(seed), n, count) {
        out[pos] = 1.0 - out[pos];
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagRow {
    pub flip_fraction: f64,
    pub repeat: usize,
    /// `l2` for pure l2 coding, `mixed` for l2 features with Huber tags.
    pub method: String,
    /// Mean squared error of refined tags against the clean tags.
    pub error: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TagReport {
    pub rows: Vec<TagRow>,
}

impl TagReport {
    pub fn mean_error(&self, flip: f64, method: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.flip_fraction == flip && r.method == method)
            .map(|r| r.error)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("flip_fraction,method,repeat,error\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.flip_fraction, r.method, r.repeat, r.error);
        }
        out
    }
}

fn refined_tag_error(spec: &MixedCodingSpec, data: &PlantedTags, noisy: &DMatrix<f64>) -> Result<f64> {
    let n = data.test_features.ncols();
    let errs: Vec<Result<f64>> = (0..n)
        .into_par_iter()
        .map(|t| {
            let (_, refined) = mixed_code(
                spec,
                &data.test_features.column(t).into_owned(),
                &noisy.column(t).into_owned(),
            )?;
            Ok((refined - data.test_tags.column(t)).norm_squared())
        })
        .collect();
    let total: f64 = errs.into_iter().collect::<Result<Vec<f64>>>()?.iter().sum();
    Ok(total / data.test_tags.len() as f64)
}

/// For each flip level and repeat, corrupts the test tags and compares the
/// refined-tag error of pure l2 coding with mixed l2/Huber coding.
pub fn tag_flip_experiment(flips: &[f64], repeats: usize, cfg: &TagExperimentConfig) -> Result<TagReport> {
    let mut report = TagReport::default();
    for rep in 0..repeats {
        let data = planted_tags(cfg, seeds::derive(cfg.seed, &format!("planted/{rep}")))?;
        let mixed = MixedCodingSpec::new(
            data.train_features.clone(),
            data.train_tags.clone(),
            cfg.gamma_scale,
            cfg.kappa,
            cfg.lam,
        )?;
        let pure = MixedCodingSpec {
            misfit_tags: PenaltySpec::L2,
            ..mixed.clone()
        };
        for &flip in flips {
            let noisy = flip_tags(&data.test_tags, flip, seeds::derive(cfg.seed, &format!("flip/{flip}/{rep}")))?;
            for (method, spec) in [("l2", &pure), ("mixed", &mixed)] {
                report.rows.push(TagRow {
                    flip_fraction: flip,
                    repeat: rep,
                    method: method.into(),
                    error: refined_tag_error(spec, &data, &noisy)?,
                });
            }
        }
    }
    Ok(report)
}
