//! Synthetic dataset generation from latent identity/clothes/camera factors.
//!
//! Images are low-resolution float grids rendered deterministically from
//! per-person body vectors, per-(person, clothes) color vectors, and
//! per-camera affine transforms, plus seeded pose noise. RGB renders
//! expose body and clothes color; IR renders expose body shape only, with
//! the intensity replicated across the three channels, so cross-modality
//! matching has to rely on body factors and clothes cues are valid only
//! within RGB.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::Modality;

use super::{DatasetManifest, ImageDims, ImageRef, SampleRecord, Split};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticGenConfig {
    pub num_train_ids: usize,
    pub num_test_ids: usize,
    pub clothes_per_id_min: usize,
    pub clothes_per_id_max: usize,
    pub num_rgb_cameras: usize,
    pub num_ir_cameras: usize,
    /// Images per (identity, clothes, camera) cell; at least 6 so each
    /// test cell yields three query and three gallery images.
    pub images_per_cell: usize,
    pub height: usize,
    pub width: usize,
    pub body_dim: usize,
    pub clothes_dim: usize,
    pub noise_scale: f32,
    pub seed: u64,
}

impl Default for SyntheticGenConfig {
    fn default() -> Self {
        SyntheticGenConfig {
            num_train_ids: 32,
            num_test_ids: 16,
            clothes_per_id_min: 2,
            clothes_per_id_max: 4,
            num_rgb_cameras: 2,
            num_ir_cameras: 2,
            images_per_cell: 6,
            height: 32,
            width: 16,
            body_dim: 4,
            clothes_dim: 6,
            noise_scale: 0.3,
            seed: 7,
        }
    }
}

impl SyntheticGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_rgb_cameras == 0 || self.num_ir_cameras == 0 {
            return Err(Error::Config(
                "need at least one camera of each modality".into(),
            ));
        }
        if self.clothes_per_id_min < 2 {
            return Err(Error::Config(
                "long-term scenarios need at least 2 clothes per identity".into(),
            ));
        }
        if self.clothes_per_id_max < self.clothes_per_id_min {
            return Err(Error::Config("clothes_per_id range is empty".into()));
        }
        if self.images_per_cell < 6 {
            return Err(Error::Config(
                "images_per_cell must be ≥ 6 (three query + three gallery)".into(),
            ));
        }
        if self.num_train_ids == 0 || self.num_test_ids == 0 {
            return Err(Error::Config("need train and test identities".into()));
        }
        if self.body_dim == 0 || self.clothes_dim == 0 {
            return Err(Error::Config("latent dimensions must be positive".into()));
        }
        Ok(())
    }
}

fn sample_unit<R: Rng>(rng: &mut R) -> f32 {
    // Box–Muller; plain and portable.
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}

fn randn_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f32> {
    (0..n).map(|_| sample_unit(rng)).collect()
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Deterministically generate a manifest covering all six scenarios:
/// every identity appears under both modalities with at least two
/// clothes, and test cells provide three query plus gallery images.
pub fn generate_synthetic(cfg: &SyntheticGenConfig, seed: u64) -> Result<DatasetManifest> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = ImageDims {
        height: cfg.height,
        width: cfg.width,
        channels: 3,
    };
    let hw = cfg.height * cfg.width;
    let num_cameras = cfg.num_rgb_cameras + cfg.num_ir_cameras;

    // Global latent-to-pixel projections.
    let body_proj: Vec<f32> = randn_vec(&mut rng, cfg.body_dim * hw)
        .iter()
        .map(|v| v / (cfg.body_dim as f32).sqrt())
        .collect();
    let clothes_proj: Vec<Vec<f32>> = (0..3)
        .map(|_| {
            randn_vec(&mut rng, cfg.clothes_dim * hw)
                .iter()
                .map(|v| v / (cfg.clothes_dim as f32).sqrt())
                .collect()
        })
        .collect();

    // Camera transforms: gain and brightness offset.
    let cameras: Vec<(f32, f32)> = (0..num_cameras)
        .map(|_| {
            (
                1.0 + 0.1 * sample_unit(&mut rng),
                0.2 * sample_unit(&mut rng),
            )
        })
        .collect();
    let camera_modality = |cam: usize| {
        if cam < cfg.num_rgb_cameras {
            Modality::Rgb
        } else {
            Modality::Ir
        }
    };

    let total_ids = cfg.num_train_ids + cfg.num_test_ids;
    let mut persons = Vec::with_capacity(total_ids);
    let mut clothes_owner = std::collections::BTreeMap::new();
    let mut records = Vec::new();
    let mut blob: Vec<f32> = Vec::new();
    let mut next_clothes_id: u32 = 0;

    for pid in 0..total_ids {
        let is_train = pid < cfg.num_train_ids;
        persons.push(pid as u32);
        let body = randn_vec(&mut rng, cfg.body_dim);
        let n_clothes = rng.gen_range(cfg.clothes_per_id_min..=cfg.clothes_per_id_max);
        let mut train_counter = 0usize;
        for c_idx in 0..n_clothes {
            let clothes_id = next_clothes_id;
            next_clothes_id += 1;
            clothes_owner.insert(clothes_id, pid as u32);
            let clothes_vec = randn_vec(&mut rng, cfg.clothes_dim);
            // Each clothes set is captured on its own day.
            let day = c_idx as u32;

            // Drop one rotating camera per cell when the modality keeps
            // coverage; yields roughly 25 gallery images per identity at
            // the default configuration.
            let dropped = if num_cameras >= 3 {
                let cand = (pid + c_idx) % num_cameras;
                let same_modality = (0..num_cameras)
                    .filter(|&k| camera_modality(k) == camera_modality(cand))
                    .count();
                if same_modality >= 2 {
                    Some(cand)
                } else {
                    None
                }
            } else {
                None
            };

            for cam in 0..num_cameras {
                if Some(cam) == dropped {
                    continue;
                }
                let modality = camera_modality(cam);
                let (gain, offset) = cameras[cam];
                for shot in 0..cfg.images_per_cell {
                    // Pose noise perturbs the body factors per image.
                    let noise = randn_vec(&mut rng, cfg.body_dim);
                    let body_eff: Vec<f32> = body
                        .iter()
                        .zip(&noise)
                        .map(|(b, n)| b + cfg.noise_scale * n)
                        .collect();
                    let mut pixels = vec![0f32; dims.numel()];
                    for p in 0..hw {
                        let mut shape = 0f32;
                        for (k, b) in body_eff.iter().enumerate() {
                            shape += body_proj[k * hw + p] * b;
                        }
                        for ch in 0..3 {
                            let val = match modality {
                                Modality::Rgb => {
                                    let mut color = 0f32;
                                    for (k, cv) in clothes_vec.iter().enumerate() {
                                        color += clothes_proj[ch][k * hw + p] * cv;
                                    }
                                    shape + color
                                }
                                Modality::Ir => shape,
                            };
                            pixels[p * 3 + ch] = sigmoid(gain * val + offset);
                        }
                    }
                    let blob_idx = blob.len() / dims.numel();
                    blob.extend_from_slice(&pixels);

                    let split = if is_train {
                        // Every fifth image goes to validation.
                        train_counter += 1;
                        if train_counter % 5 == 0 {
                            Split::Val
                        } else {
                            Split::Train
                        }
                    } else if shot < 3 {
                        Split::Query
                    } else {
                        Split::Gallery
                    };
                    records.push(SampleRecord {
                        person_id: pid as u32,
                        clothes_id,
                        modality,
                        camera_id: cam as u32,
                        timestamp: day,
                        split,
                        image: ImageRef::Blob(blob_idx),
                    });
                }
            }
        }
    }

    let manifest = DatasetManifest {
        dims,
        persons,
        clothes_owner,
        camera_modality: (0..num_cameras)
            .map(|c| (c as u32, camera_modality(c)))
            .collect(),
        records,
        blob,
    };
    manifest.validate()?;
    Ok(manifest)
}
