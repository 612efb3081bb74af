//! Identity-balanced PK batch sampling and training-time augmentation.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{DatasetManifest, ImageDims, Split};

/// Draw P distinct identities with K instances each from the train split.
/// Within an identity the draw covers both modalities and at least two
/// clothes whenever the identity has them. Returns record indices.
pub fn pk_sample(
    manifest: &DatasetManifest,
    p: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let mut by_person: std::collections::BTreeMap<u32, Vec<usize>> =
        std::collections::BTreeMap::new();
    for (i, rec) in manifest.records_in(Split::Train) {
        by_person.entry(rec.person_id).or_default().push(i);
    }
    let eligible: Vec<u32> = by_person.keys().copied().collect();
    if eligible.len() < p {
        return Err(Error::Validation(format!(
            "pk_sample needs {p} identities, train split has {}",
            eligible.len()
        )));
    }

    let mut ids = eligible;
    ids.shuffle(rng);
    ids.truncate(p);

    let mut batch = Vec::with_capacity(p * k);
    for pid in ids {
        let pool = &by_person[&pid];
        let mut chosen: Vec<usize> = Vec::with_capacity(k);

        // Seed the draw with one RGB image, one IR image, and one image
        // of a second clothes set, when the pool offers them.
        let mut pick_where = |chosen: &mut Vec<usize>,
                              rng: &mut ChaCha8Rng,
                              pred: &dyn Fn(usize) -> bool| {
            let cands: Vec<usize> = pool
                .iter()
                .copied()
                .filter(|i| !chosen.contains(i) && pred(*i))
                .collect();
            if let Some(&pick) = cands.as_slice().choose(rng) {
                chosen.push(pick);
            }
        };
        if k >= 2 {
            pick_where(&mut chosen, rng, &|i| {
                manifest.records[i].modality == crate::scenario::Modality::Rgb
            });
            pick_where(&mut chosen, rng, &|i| {
                manifest.records[i].modality == crate::scenario::Modality::Ir
            });
        }
        if k >= 3 {
            if let Some(&first) = chosen.first() {
                let first_clothes = manifest.records[first].clothes_id;
                pick_where(&mut chosen, rng, &|i| {
                    manifest.records[i].clothes_id != first_clothes
                });
            }
        }
        chosen.truncate(k);

        // Fill the rest uniformly without replacement, falling back to
        // replacement when the identity has fewer than K images.
        let mut rest: Vec<usize> = pool.iter().copied().filter(|i| !chosen.contains(i)).collect();
        rest.shuffle(rng);
        while chosen.len() < k {
            match rest.pop() {
                Some(i) => chosen.push(i),
                None => {
                    let &i = pool
                        .as_slice()
                        .choose(rng)
                        .expect("identity pool is nonempty");
                    chosen.push(i);
                }
            }
        }
        batch.extend(chosen);
    }
    Ok(batch)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AugmentFlags {
    pub flip: bool,
    pub pad_crop: bool,
    pub erase: bool,
}

impl Default for AugmentFlags {
    fn default() -> Self {
        AugmentFlags {
            flip: true,
            pad_crop: true,
            erase: true,
        }
    }
}

/// Mirror the image columns.
pub fn flip_horizontal(image: &[f32], dims: ImageDims) -> Vec<f32> {
    let (h, w, c) = (dims.height, dims.width, dims.channels);
    let mut out = vec![0f32; image.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[(y * w + x) * c + ch] = image[(y * w + (w - 1 - x)) * c + ch];
            }
        }
    }
    out
}

/// Zero-pad by 2 pixels on every side, then crop back at a random offset.
pub fn pad_crop(image: &[f32], dims: ImageDims, rng: &mut ChaCha8Rng) -> Vec<f32> {
    const PAD: usize = 2;
    let (h, w, c) = (dims.height, dims.width, dims.channels);
    let oy = rng.gen_range(0..=2 * PAD);
    let ox = rng.gen_range(0..=2 * PAD);
    let mut out = vec![0f32; image.len()];
    for y in 0..h {
        for x in 0..w {
            // Source position in the padded frame.
            let sy = y + oy;
            let sx = x + ox;
            if sy >= PAD && sy < h + PAD && sx >= PAD && sx < w + PAD {
                let iy = sy - PAD;
                let ix = sx - PAD;
                for ch in 0..c {
                    out[(y * w + x) * c + ch] = image[(iy * w + ix) * c + ch];
                }
            }
        }
    }
    out
}

/// Zero a random rectangle covering 2–20% of the pixel area.
pub fn random_erase(image: &[f32], dims: ImageDims, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let (h, w, c) = (dims.height, dims.width, dims.channels);
    let area = (h * w) as f64;
    let frac = rng.gen_range(0.02..0.2);
    let aspect = rng.gen_range(0.5..2.0);
    let mut rh = ((area * frac * aspect).sqrt().floor() as usize).max(1);
    let mut rw = ((area * frac / aspect).sqrt().floor() as usize).max(1);
    rh = rh.min(h);
    rw = rw.min(w);
    // Shrink until the rectangle stays at or under 20% of the area.
    while rh * rw > area as usize / 5 {
        if rh >= rw && rh > 1 {
            rh -= 1;
        } else if rw > 1 {
            rw -= 1;
        } else {
            break;
        }
    }
    let y0 = rng.gen_range(0..=h - rh);
    let x0 = rng.gen_range(0..=w - rw);
    let mut out = image.to_vec();
    for y in y0..y0 + rh {
        for x in x0..x0 + rw {
            for ch in 0..c {
                out[(y * w + x) * c + ch] = 0.0;
            }
        }
    }
    out
}

/// Training augmentation: 50% horizontal flip, pad-and-crop, random
/// erasing, gated by flags. Deterministic given the rng state.
pub fn augment(
    image: &[f32],
    dims: ImageDims,
    rng: &mut ChaCha8Rng,
    flags: AugmentFlags,
) -> Vec<f32> {
    let mut out = image.to_vec();
    if flags.flip && rng.gen_bool(0.5) {
        out = flip_horizontal(&out, dims);
    }
    if flags.pad_crop {
        out = pad_crop(&out, dims, rng);
    }
    if flags.erase {
        out = random_erase(&out, dims, rng);
    }
    out
}
