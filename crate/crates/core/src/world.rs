//! Synthetic multi-label world.
//!
//! Diseases switch phenotypes on, phenotypes switch image features on. Each
//! phenotype owns a fixed unit signature vector; signatures are mutually
//! orthogonal. An example's features are the sum of the signatures of its
//! present phenotypes plus isotropic Gaussian noise.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::caption::CaptionInput;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::hash::hash64_index;
use crate::knowledge::KnowledgeBase;

/// Attempts per example before giving up on drawing a non-empty label set.
pub const MAX_RESAMPLE: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub kb: KnowledgeBase,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub disease_prevalence: f64,
    pub p_typ_given_disease: f64,
    pub p_phen_background: f64,
    pub seed: u64,
}

impl WorldConfig {
    pub fn new(kb: KnowledgeBase) -> Self {
        Self {
            kb,
            feature_dim: 64,
            noise_sigma: 0.3,
            disease_prevalence: 0.3,
            p_typ_given_disease: 0.9,
            p_phen_background: 0.05,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("disease_prevalence", self.disease_prevalence),
            ("p_typ_given_disease", self.p_typ_given_disease),
            ("p_phen_background", self.p_phen_background),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        if self.feature_dim == 0 || self.feature_dim < self.kb.phenotypes.len() {
            return Err(Error::Config(format!(
                "feature_dim {} is smaller than the {} phenotypes",
                self.feature_dim,
                self.kb.phenotypes.len()
            )));
        }
        self.kb.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub cfg: WorldConfig,
    /// One orthonormal row per phenotype, in KB phenotype order.
    pub signatures: Array2<f64>,
}

/// Builds the phenotype signatures from a seeded Gaussian matrix
/// orthonormalized by modified Gram-Schmidt (two passes).
pub fn make_world(cfg: WorldConfig) -> Result<World> {
    cfg.validate()?;
    let (p, f) = (cfg.kb.phenotypes.len(), cfg.feature_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sig = Array2::<f64>::zeros((p, f));
    for i in 0..p {
        let mut v: Array1<f64> = (0..f).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for j in 0..i {
                let prev = sig.row(j);
                let proj = v.dot(&prev);
                v.scaled_add(-proj, &prev);
            }
        }
        let norm = v.dot(&v).sqrt();
        if norm < 1e-8 {
            return Err(Error::Config("degenerate signature basis".into()));
        }
        sig.row_mut(i).assign(&(v / norm));
    }
    Ok(World {
        cfg,
        signatures: sig,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledExample {
    pub image_id: String,
    #[serde(with = "vec_array")]
    pub features: Array1<f64>,
    /// Presence bit per KB disease, in KB order.
    pub labels: Vec<bool>,
    /// Ground-truth phenotype ids, in KB phenotype order.
    pub phenotypes_present: Vec<String>,
}

impl LabeledExample {
    pub fn label_ids(&self, kb: &KnowledgeBase) -> Vec<String> {
        self.labels
            .iter()
            .zip(&kb.diseases)
            .filter(|(on, _)| **on)
            .map(|(_, d)| d.id.clone())
            .collect()
    }
}

mod vec_array {
    use ndarray::Array1;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(a: &Array1<f64>, s: S) -> Result<S::Ok, S::Error> {
        a.as_slice().expect("contiguous").serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array1<f64>, D::Error> {
        Vec::<f64>::deserialize(d).map(Array1::from)
    }
}

impl World {
    fn sample_one(&self, index: usize, seed: u64) -> Result<LabeledExample> {
        let cfg = &self.cfg;
        let kb = &cfg.kb;
        let lookup = kb.phenotype_lookup();
        let mut rng = ChaCha8Rng::seed_from_u64(hash64_index(seed, index as u64));
        for _ in 0..MAX_RESAMPLE {
            let labels: Vec<bool> = kb
                .diseases
                .iter()
                .map(|_| rng.random::<f64>() < cfg.disease_prevalence)
                .collect();
            if !labels.iter().any(|&b| b) {
                continue;
            }
            let np = kb.phenotypes.len();
            let mut present = vec![false; np];
            let mut decided = vec![false; np];
            let mut forbidden = vec![false; np];
            for (d, _) in kb.diseases.iter().zip(&labels).filter(|(_, on)| **on) {
                for p in &d.excluded {
                    forbidden[lookup[p.as_str()]] = true;
                }
            }
            for (d, _) in kb.diseases.iter().zip(&labels).filter(|(_, on)| **on) {
                for p in &d.typical {
                    let k = lookup[p.as_str()];
                    decided[k] = true;
                    if rng.random::<f64>() < cfg.p_typ_given_disease {
                        present[k] = true;
                    }
                }
            }
            for k in 0..np {
                if !decided[k] && rng.random::<f64>() < cfg.p_phen_background {
                    present[k] = true;
                }
                if forbidden[k] {
                    present[k] = false;
                }
            }
            let mut features = Array1::zeros(cfg.feature_dim);
            for k in (0..np).filter(|&k| present[k]) {
                features += &self.signatures.row(k);
            }
            if cfg.noise_sigma > 0.0 {
                for v in features.iter_mut() {
                    let z: f64 = rng.sample(StandardNormal);
                    *v += cfg.noise_sigma * z;
                }
            }
            return Ok(LabeledExample {
                image_id: format!("{seed:016x}-{index:06}"),
                features,
                labels,
                phenotypes_present: (0..np)
                    .filter(|&k| present[k])
                    .map(|k| kb.phenotypes[k].id.clone())
                    .collect(),
            });
        }
        Err(Error::DegenerateWorld(MAX_RESAMPLE))
    }
}

pub fn sample_dataset(world: &World, n: usize, seed: u64) -> Result<Vec<LabeledExample>> {
    sample_dataset_with(Exec::default(), world, n, seed)
}

/// Draws `n` examples; example `i` uses the seed `hash64(seed, i)`.
pub fn sample_dataset_with(
    exec: Exec,
    world: &World,
    n: usize,
    seed: u64,
) -> Result<Vec<LabeledExample>> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    exec.map_range(n, |i| world.sample_one(i, seed))
        .into_iter()
        .collect()
}

/// Caption inputs (image id + present disease ids) for a dataset.
pub fn caption_inputs(kb: &KnowledgeBase, dataset: &[LabeledExample]) -> Vec<CaptionInput> {
    dataset
        .iter()
        .map(|ex| CaptionInput {
            image_id: ex.image_id.clone(),
            labels: ex.label_ids(kb),
        })
        .collect()
}

pub fn write_dataset(path: impl AsRef<Path>, dataset: &[LabeledExample]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for ex in dataset {
        serde_json::to_writer(&mut out, ex).expect("example serializes");
        out.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<LabeledExample>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: LabeledExample = serde_json::from_str(&line).map_err(|e| Error::Format {
            line: n + 1,
            message: e.to_string(),
        })?;
        if ex.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format {
                line: n + 1,
                message: "non-finite feature".into(),
            });
        }
        out.push(ex);
    }
    Ok(out)
}
