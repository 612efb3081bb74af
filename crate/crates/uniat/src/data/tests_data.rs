use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::scenario::Modality;

fn default_small() -> SyntheticGenConfig {
    SyntheticGenConfig {
        num_train_ids: 6,
        num_test_ids: 4,
        ..SyntheticGenConfig::default()
    }
}

#[test]
fn generation_is_bit_identical_across_runs() {
    let cfg = default_small();
    let a = generate_synthetic(&cfg, 99).unwrap();
    let b = generate_synthetic(&cfg, 99).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.digest(), b.digest());
    let c = generate_synthetic(&cfg, 100).unwrap();
    assert_ne!(a.digest(), c.digest());
}

#[test]
fn zero_noise_renders_identical_cell_images() {
    let cfg = SyntheticGenConfig {
        noise_scale: 0.0,
        ..default_small()
    };
    let m = generate_synthetic(&cfg, 1).unwrap();
    // Group by (person, clothes, camera); all members must match bitwise.
    let mut cells: BTreeMap<(u32, u32, u32), Vec<usize>> = BTreeMap::new();
    for (i, r) in m.records.iter().enumerate() {
        cells
            .entry((r.person_id, r.clothes_id, r.camera_id))
            .or_default()
            .push(i);
    }
    for members in cells.values() {
        let first = m.image(members[0]).unwrap();
        for &i in &members[1..] {
            assert_eq!(m.image(i).unwrap(), first);
        }
    }
}

#[test]
fn clothes_change_moves_pixels_more_than_pose() {
    let m = generate_synthetic(&SyntheticGenConfig::default(), 5).unwrap();
    let dist = |a: &[f32], b: &[f32]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| ((x - y) as f64).powi(2))
            .sum::<f64>()
            / a.len() as f64
    };
    // RGB pairs of the same identity: same-clothes versus different-clothes.
    let rgb: Vec<usize> = m
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.modality == Modality::Rgb)
        .map(|(i, _)| i)
        .collect();
    let mut same = (0.0, 0usize);
    let mut diff = (0.0, 0usize);
    for (ai, &a) in rgb.iter().enumerate() {
        for &b in rgb.iter().skip(ai + 1).take(200) {
            let (ra, rb) = (&m.records[a], &m.records[b]);
            if ra.person_id != rb.person_id {
                continue;
            }
            let d = dist(m.image(a).unwrap(), m.image(b).unwrap());
            if ra.clothes_id == rb.clothes_id {
                same = (same.0 + d, same.1 + 1);
            } else {
                diff = (diff.0 + d, diff.1 + 1);
            }
        }
    }
    assert!(same.1 > 50 && diff.1 > 50, "need both pair kinds");
    let mean_same = same.0 / same.1 as f64;
    let mean_diff = diff.0 / diff.1 as f64;
    assert!(
        mean_diff > mean_same,
        "different clothes should move pixels more: {mean_diff} vs {mean_same}"
    );
}

#[test]
fn infeasible_config_is_rejected() {
    let cfg = SyntheticGenConfig {
        num_ir_cameras: 0,
        ..SyntheticGenConfig::default()
    };
    assert!(generate_synthetic(&cfg, 1).is_err());
    let cfg = SyntheticGenConfig {
        images_per_cell: 5,
        ..SyntheticGenConfig::default()
    };
    assert!(generate_synthetic(&cfg, 1).is_err());
}

#[test]
fn every_identity_covers_both_modalities_and_two_clothes() {
    let m = generate_synthetic(&default_small(), 3).unwrap();
    let mut rgb: BTreeSet<u32> = BTreeSet::new();
    let mut ir: BTreeSet<u32> = BTreeSet::new();
    let mut clothes: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
    for r in &m.records {
        match r.modality {
            Modality::Rgb => rgb.insert(r.person_id),
            Modality::Ir => ir.insert(r.person_id),
        };
        clothes.entry(r.person_id).or_default().insert(r.clothes_id);
    }
    for &p in &m.persons {
        assert!(rgb.contains(&p), "person {p} missing RGB");
        assert!(ir.contains(&p), "person {p} missing IR");
        assert!(clothes[&p].len() >= 2, "person {p} has one clothes set");
    }
}

#[test]
fn splits_are_disjoint_by_person() {
    let m = generate_synthetic(&default_small(), 3).unwrap();
    let train: BTreeSet<u32> = m
        .records
        .iter()
        .filter(|r| matches!(r.split, Split::Train | Split::Val))
        .map(|r| r.person_id)
        .collect();
    let test: BTreeSet<u32> = m
        .records
        .iter()
        .filter(|r| matches!(r.split, Split::Query | Split::Gallery))
        .map(|r| r.person_id)
        .collect();
    assert!(train.is_disjoint(&test));
    assert_eq!(train.len(), 6);
    assert_eq!(test.len(), 4);
}

#[test]
fn manifest_round_trips_through_disk() {
    let m = generate_synthetic(&default_small(), 42).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = m.save(dir.path()).unwrap();
    let loaded = DatasetManifest::load(&path).unwrap();
    assert_eq!(m, loaded);
}

#[test]
fn dangling_clothes_owner_is_rejected() {
    let mut m = generate_synthetic(&default_small(), 42).unwrap();
    m.clothes_owner.insert(9999, 12345); // absent person
    let err = m.validate().unwrap_err();
    assert!(err.to_string().contains("absent person"), "{err}");

    // And through the file route.
    let dir = tempfile::tempdir().unwrap();
    let path = m.save(dir.path()).unwrap();
    assert!(DatasetManifest::load(&path).is_err());
}

#[test]
fn modality_camera_mismatch_is_rejected() {
    let mut m = generate_synthetic(&default_small(), 42).unwrap();
    let idx = m
        .records
        .iter()
        .position(|r| r.modality == Modality::Rgb)
        .unwrap();
    m.records[idx].modality = Modality::Ir;
    assert!(m.validate().is_err());
}

#[test]
fn atustc_shaped_toy_manifest_loads_with_splits_preserved() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures/atustc_toy/manifest.jsonl");
    let m = DatasetManifest::load(&path).unwrap();
    assert_eq!(m.persons.len(), 270);
    let train: BTreeSet<u32> = m
        .records
        .iter()
        .filter(|r| matches!(r.split, Split::Train | Split::Val))
        .map(|r| r.person_id)
        .collect();
    let test: BTreeSet<u32> = m
        .records
        .iter()
        .filter(|r| matches!(r.split, Split::Query | Split::Gallery))
        .map(|r| r.person_id)
        .collect();
    // 135/135 identity split, disjoint.
    assert_eq!(train.len(), 135);
    assert_eq!(test.len(), 135);
    assert!(train.is_disjoint(&test));
    // File references do not resolve to pixels.
    assert!(m.image(0).is_err());
}

#[test]
fn pk_sample_shapes_and_identity_counts() {
    let cfg = SyntheticGenConfig {
        num_train_ids: 10,
        num_test_ids: 2,
        ..SyntheticGenConfig::default()
    };
    let m = generate_synthetic(&cfg, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = pk_sample(&m, 8, 8, &mut rng).unwrap();
    assert_eq!(batch.len(), 64);
    let ids: BTreeSet<u32> = batch.iter().map(|&i| m.records[i].person_id).collect();
    assert_eq!(ids.len(), 8);
    for &i in &batch {
        assert_eq!(m.records[i].split, Split::Train);
    }

    let single = pk_sample(&m, 1, 1, &mut rng).unwrap();
    assert_eq!(single.len(), 1);

    assert!(pk_sample(&m, 11, 2, &mut rng).is_err());
}

#[test]
fn pk_sample_covers_modalities_and_clothes() {
    let m = generate_synthetic(&default_small(), 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let batch = pk_sample(&m, 4, 4, &mut rng).unwrap();
        let mut per_id: BTreeMap<u32, (BTreeSet<Modality>, BTreeSet<u32>)> = BTreeMap::new();
        for &i in &batch {
            let r = &m.records[i];
            let e = per_id.entry(r.person_id).or_default();
            e.0.insert(r.modality);
            e.1.insert(r.clothes_id);
        }
        for (pid, (mods, clothes)) in per_id {
            assert_eq!(mods.len(), 2, "person {pid} batch lacks a modality");
            assert!(clothes.len() >= 2, "person {pid} batch lacks clothes variety");
        }
    }
}

#[test]
fn pk_sample_identity_frequency_is_uniform() {
    let cfg = SyntheticGenConfig {
        num_train_ids: 12,
        num_test_ids: 2,
        ..SyntheticGenConfig::default()
    };
    let m = generate_synthetic(&cfg, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let draws = 1000;
    let p = 4;
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for _ in 0..draws {
        let batch = pk_sample(&m, p, 2, &mut rng).unwrap();
        let ids: BTreeSet<u32> = batch.iter().map(|&i| m.records[i].person_id).collect();
        for id in ids {
            *counts.entry(id).or_default() += 1;
        }
    }
    // Each id is included with probability p/12 per draw.
    let prob = p as f64 / 12.0;
    let mean = draws as f64 * prob;
    let se = (draws as f64 * prob * (1.0 - prob)).sqrt();
    for (&id, &c) in &counts {
        assert!(
            (c as f64 - mean).abs() <= 3.0 * se,
            "id {id} drawn {c} times, expected {mean:.1} ± {:.1}",
            3.0 * se
        );
    }
}

#[test]
fn flip_is_an_involution() {
    let m = generate_synthetic(&default_small(), 11).unwrap();
    let img = m.image(0).unwrap();
    let once = flip_horizontal(img, m.dims);
    let twice = flip_horizontal(&once, m.dims);
    assert_eq!(img, twice.as_slice());
    assert_ne!(img, once.as_slice());
}

#[test]
fn erase_leaves_at_least_eighty_percent() {
    let m = generate_synthetic(&default_small(), 11).unwrap();
    let img: Vec<f32> = m.image(0).unwrap().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let erased = random_erase(&img, m.dims, &mut rng);
        let changed = img
            .iter()
            .zip(&erased)
            .filter(|(a, b)| a != b)
            .count();
        let area = m.dims.height * m.dims.width * m.dims.channels;
        assert!(
            changed <= area / 5,
            "erase touched {changed} of {area} values"
        );
    }
}

#[test]
fn augmentation_replays_identically_from_the_same_seed() {
    let m = generate_synthetic(&default_small(), 11).unwrap();
    let img = m.image(0).unwrap();
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        augment(img, m.dims, &mut rng, AugmentFlags::default())
    };
    assert_eq!(run(), run());
}
