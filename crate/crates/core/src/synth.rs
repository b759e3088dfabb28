//! Deterministic generator of multi-domain labeled feature datasets with
//! known ground truth. Categories sit at near-orthogonal unit prototypes;
//! each domain observes them through its own hidden full-rank linear map
//! plus isotropic noise, so an affine mapper can provably invert it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataset::{write_feature_file, write_labels, DatasetManifest, LabelRow};
use crate::error::{Error, Result};
use crate::hypersphere::normalize;
use crate::prototype::{save_prototypes, PrototypeBook, SplitMode};

/// Minimum pairwise cosine distance between sampled prototypes.
pub const MIN_PROTOTYPE_SEPARATION: f64 = 0.5;

const PLACEMENT_RESTARTS: usize = 200;
const DRAWS_PER_SLOT: usize = 500;

/// Generator configuration. `noise_sigma` holds either one shared value or
/// one value per domain.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub num_categories: usize,
    pub num_domains: usize,
    pub embed_dim: usize,
    pub feature_dim: usize,
    pub samples_per_category: usize,
    pub noise_sigma: Vec<f64>,
    pub condition_number: f64,
    pub seed: u64,
    /// Fraction of categories held out as unseen; zero selects many-shot.
    pub zero_shot_frac: f64,
    /// Apply a fixed componentwise odd nonlinearity to the features.
    pub nonlinear: bool,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidParameter(msg.to_string()));
        if self.num_categories < 2 {
            return bad("need at least 2 categories");
        }
        if self.num_domains < 2 {
            return bad("need at least 2 domains");
        }
        if self.embed_dim < 2 {
            return bad("embedding dimension must be at least 2");
        }
        if self.feature_dim < self.embed_dim {
            return bad("feature dimension must be at least the embedding dimension");
        }
        if self.samples_per_category < 1 {
            return bad("need at least one sample per category per domain");
        }
        if self.noise_sigma.is_empty()
            || (self.noise_sigma.len() != 1 && self.noise_sigma.len() != self.num_domains)
        {
            return bad("noise_sigma must hold one value or one per domain");
        }
        if self.noise_sigma.iter().any(|s| *s < 0.0 || s.is_nan()) {
            return bad("noise_sigma must be non-negative");
        }
        if self.condition_number < 1.0 || self.condition_number.is_nan() {
            return bad("condition number must be at least 1");
        }
        if !(0.0..1.0).contains(&self.zero_shot_frac) {
            return bad("zero-shot fraction must lie in [0, 1)");
        }
        Ok(())
    }

    fn sigma_for(&self, domain_index: usize) -> f64 {
        if self.noise_sigma.len() == 1 {
            self.noise_sigma[0]
        } else {
            self.noise_sigma[domain_index]
        }
    }

    pub fn domain_name(index: usize) -> String {
        format!("d{index}")
    }

    fn category_name(&self, index: usize) -> String {
        let width = (self.num_categories - 1).to_string().len().max(2);
        format!("c{index:0width$}")
    }
}

fn random_unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> DVector<f64> {
    loop {
        let v = DVector::<f64>::from_fn(dim, |_, _| rng.sample(StandardNormal));
        let norm = v.norm();
        if norm > 1e-6 {
            return v / norm;
        }
    }
}

/// Greedy rejection sampling with restarts: each prototype is redrawn until
/// it clears the separation threshold against everything accepted so far.
fn sample_prototypes(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Result<Vec<DVector<f64>>> {
    for _ in 0..PLACEMENT_RESTARTS {
        let mut accepted: Vec<DVector<f64>> = Vec::with_capacity(count);
        'slot: while accepted.len() < count {
            for _ in 0..DRAWS_PER_SLOT {
                let candidate = random_unit_vector(rng, dim);
                let ok = accepted
                    .iter()
                    .all(|p| 1.0 - p.dot(&candidate) >= MIN_PROTOTYPE_SEPARATION);
                if ok {
                    accepted.push(candidate);
                    continue 'slot;
                }
            }
            break 'slot;
        }
        if accepted.len() == count {
            return Ok(accepted);
        }
    }
    Err(Error::InfeasibleSeparation {
        categories: count,
        dim,
        min_distance: MIN_PROTOTYPE_SEPARATION,
    })
}

fn random_orthonormal_columns(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    let gauss = DMatrix::from_fn(rows, rows, |_, _| rng.sample(StandardNormal));
    let q = gauss.qr().q();
    q.columns(0, cols).into_owned()
}

/// Hidden domain transform: `D_in x D` with singular values spread evenly
/// over `[1, kappa]`.
fn domain_transform(rng: &mut ChaCha8Rng, d_in: usize, d: usize, kappa: f64) -> DMatrix<f64> {
    let u = random_orthonormal_columns(rng, d_in, d);
    let v = random_orthonormal_columns(rng, d, d);
    let singulars = DVector::from_fn(d, |i, _| {
        if d == 1 {
            kappa
        } else {
            kappa - (kappa - 1.0) * i as f64 / (d - 1) as f64
        }
    });
    let mut scaled = v.transpose();
    for (i, s) in singulars.iter().enumerate() {
        scaled.row_mut(i).scale_mut(*s);
    }
    u * scaled
}

/// The componentwise odd nonlinearity applied under `--nonlinear`.
fn odd_nonlinearity(z: f64) -> f64 {
    z + z * z * z / 3.0
}

/// Everything `generate` wrote.
#[derive(Debug)]
pub struct SynthOutput {
    pub manifest_path: PathBuf,
    pub prototype_path: PathBuf,
    pub label_path: PathBuf,
    pub split_path: PathBuf,
    pub feature_paths: BTreeMap<String, PathBuf>,
}

/// Generates the dataset into `out_dir` and writes a manifest referencing
/// all files. Byte-identical output for identical configs; each domain's
/// stream is seeded independently of the domain count, so extending a
/// dataset with more domains reproduces the existing ones bit for bit.
pub fn generate(cfg: &SynthConfig, out_dir: &Path) -> Result<SynthOutput> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;

    let mut proto_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let prototypes = sample_prototypes(&mut proto_rng, cfg.num_categories, cfg.embed_dim)?;
    let names: Vec<String> = (0..cfg.num_categories)
        .map(|i| cfg.category_name(i))
        .collect();
    let book = PrototypeBook::new(
        names
            .iter()
            .zip(&prototypes)
            .map(|(name, p)| {
                Ok((
                    name.clone(),
                    normalize(p.as_slice()).expect("sampled prototypes are unit"),
                ))
            })
            .collect::<Result<_>>()?,
    )?;
    let prototype_path = out_dir.join("prototypes.txt");
    save_prototypes(&book, &prototype_path)?;

    // Category split: a seeded shuffle picks the held-out categories.
    let mode = if cfg.zero_shot_frac > 0.0 {
        SplitMode::ZeroShot
    } else {
        SplitMode::ManyShot
    };
    let mut split_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SPLIT_SALT);
    let mut order: Vec<usize> = (0..cfg.num_categories).collect();
    for i in (1..order.len()).rev() {
        let j = split_rng.random_range(0..=i);
        order.swap(i, j);
    }
    let num_test = if cfg.zero_shot_frac > 0.0 {
        (((cfg.num_categories as f64) * cfg.zero_shot_frac).round() as usize)
            .clamp(1, cfg.num_categories - 1)
    } else {
        0
    };
    let test_set: Vec<usize> = order.iter().take(num_test).copied().collect();
    let split_path = out_dir.join("split.txt");
    {
        use std::io::Write;
        let mut out = std::io::BufWriter::new(std::fs::File::create(&split_path)?);
        match mode {
            SplitMode::ZeroShot => {
                for (i, name) in names.iter().enumerate() {
                    let tag = if test_set.contains(&i) {
                        "test"
                    } else {
                        "train"
                    };
                    writeln!(out, "{name} {tag}")?;
                }
            }
            _ => {
                for name in &names {
                    writeln!(out, "{name} train")?;
                    writeln!(out, "{name} test")?;
                }
            }
        }
        out.flush()?;
    }

    let mut label_rows = Vec::new();
    let mut feature_paths = BTreeMap::new();
    let id_width = (cfg.samples_per_category.saturating_sub(1))
        .to_string()
        .len()
        .max(3);
    for d in 0..cfg.num_domains {
        let domain = SynthConfig::domain_name(d);
        // Independent of num_domains: stream seeded per domain index.
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.seed
                .wrapping_add(0x9E3779B97F4A7C15u64.wrapping_mul(d as u64 + 1)),
        );
        let transform = domain_transform(
            &mut rng,
            cfg.feature_dim,
            cfg.embed_dim,
            cfg.condition_number,
        );
        let sigma = cfg.sigma_for(d);
        let mut rows = Vec::with_capacity(cfg.num_categories * cfg.samples_per_category);
        for (ci, name) in names.iter().enumerate() {
            for s in 0..cfg.samples_per_category {
                let noise = DVector::from_fn(cfg.embed_dim, |_, _| {
                    sigma * rng.sample::<f64, _>(StandardNormal)
                });
                let latent = &prototypes[ci] + noise;
                let mut feature = &transform * latent;
                if cfg.nonlinear {
                    feature.apply(|z| *z = odd_nonlinearity(*z));
                }
                let item_id = format!("{domain}_{name}_{s:0id_width$}");
                label_rows.push(LabelRow {
                    item_id: item_id.clone(),
                    domain: domain.clone(),
                    category: name.clone(),
                    group: None,
                });
                rows.push((item_id, feature.iter().copied().collect::<Vec<f64>>()));
            }
        }
        let path = out_dir.join(format!("features_{domain}.txt"));
        write_feature_file(&path, cfg.feature_dim, &rows)?;
        feature_paths.insert(domain, path);
    }

    let label_path = out_dir.join("labels.txt");
    write_labels(&label_path, &label_rows)?;

    let manifest = DatasetManifest {
        mode,
        prototypes: prototype_path.clone(),
        labels: label_path.clone(),
        split: split_path.clone(),
        features: feature_paths.clone(),
    };
    let manifest_path = out_dir.join("manifest.txt");
    manifest.save(&manifest_path)?;

    Ok(SynthOutput {
        manifest_path,
        prototype_path,
        label_path,
        split_path,
        feature_paths,
    })
}

// Keeps the split shuffle on its own stream, away from the per-domain salt.
const SPLIT_SALT: u64 = 0x53504C4954; // "SPLIT"
