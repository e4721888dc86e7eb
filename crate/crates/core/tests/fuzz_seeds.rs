//! Runs the fuzz-target checks over the checked-in corpus and over cheap
//! byte-level mutations of it, so the properties are exercised on stable.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[path = "../../../fuzz/src/checks.rs"]
mod checks;

type Check = fn(&[u8]);

const TARGETS: &[(&str, Check)] = &[
    ("pfm", checks::pfm),
    ("rgb_png", checks::rgb_png),
    ("mask_png", checks::mask_png),
    ("intrinsics", checks::intrinsics),
    ("poses", checks::poses),
    ("scene_json", checks::scene_json),
    ("report_json", checks::report_json),
];

fn seeds(target: &str) -> Vec<Vec<u8>> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut paths: Vec<_> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .collect();
    paths.sort();
    paths.iter().map(|p| fs::read(p).unwrap()).collect()
}

fn mutate(rng: &mut ChaCha8Rng, data: &[u8]) -> Vec<u8> {
    let mut out = data.to_vec();
    for _ in 0..rng.random_range(1..=4) {
        match rng.random_range(0..4) {
            0 if !out.is_empty() => {
                let i = rng.random_range(0..out.len());
                out[i] ^= 1 << rng.random_range(0..8);
            }
            1 if !out.is_empty() => {
                let i = rng.random_range(0..out.len());
                out[i] = rng.random();
            }
            2 => {
                let i = rng.random_range(0..=out.len());
                out.insert(i, rng.random());
            }
            _ if !out.is_empty() => {
                out.truncate(rng.random_range(0..out.len()));
            }
            _ => {}
        }
    }
    out
}

#[test]
fn every_target_has_seeds() {
    for (target, _) in TARGETS {
        assert!(!seeds(target).is_empty(), "{target}");
    }
}

#[test]
fn seeds_pass_checks() {
    for (target, check) in TARGETS {
        for s in seeds(target) {
            check(&s);
        }
    }
}

#[test]
fn seeds_are_accepted() {
    use motionmask::io::*;
    for s in seeds("pfm") {
        read_pfm(&s).unwrap();
    }
    for s in seeds("rgb_png") {
        read_rgb_png(&s).unwrap();
    }
    for s in seeds("mask_png") {
        read_mask_png(&s).unwrap();
    }
    for s in seeds("intrinsics") {
        parse_intrinsics(std::str::from_utf8(&s).unwrap()).unwrap();
    }
    for s in seeds("poses") {
        parse_poses(std::str::from_utf8(&s).unwrap()).unwrap();
    }
    for s in seeds("scene_json") {
        serde_json::from_slice::<motionmask::synth::SceneSpec>(&s).unwrap();
    }
    for s in seeds("report_json") {
        motionmask::pipeline::PipelineReport::from_json(std::str::from_utf8(&s).unwrap()).unwrap();
    }
}

#[test]
fn mutated_seeds_pass_checks() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (target, check) in TARGETS {
        for s in seeds(target) {
            for _ in 0..300 {
                check(&mutate(&mut rng, &s));
            }
        }
    }
}
