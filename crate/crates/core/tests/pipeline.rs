use std::collections::BTreeMap;

use motionmask::io::{Frame, Sequence};
use motionmask::pipeline::{run_pipeline, sequence_from_bundles, PipelineConfig};
use motionmask::synth::{label_oracle, random_scene, render_sequence, RandomSceneParams};
use motionmask::{Error, InstanceId, InstanceMaskSet};

fn scene(params: &RandomSceneParams, seed: u64) -> (Sequence, BTreeMap<InstanceId, bool>) {
    let spec = random_scene(params, seed).unwrap();
    let seq = sequence_from_bundles(spec.intrinsics, &render_sequence(&spec).unwrap()).unwrap();
    (seq, label_oracle(&spec))
}

fn relabel(seq: &Sequence, map: &BTreeMap<InstanceId, InstanceId>) -> Sequence {
    let frames = seq
        .frames
        .iter()
        .map(|f| {
            let (w, h) = f.dims();
            let inst = f.masks.instances().iter().rev().map(|i| (map[&i.id], i.mask.clone())).collect();
            Frame::new(f.image.clone(), f.depth.clone(), InstanceMaskSet::new(w, h, inst).unwrap()).unwrap()
        })
        .collect();
    Sequence::new(seq.intrinsics, frames, seq.poses.clone()).unwrap()
}

#[test]
fn id_permutation_invariance() {
    let (seq, oracle) = scene(&RandomSceneParams::default(), 42);
    let ids: Vec<InstanceId> = oracle.keys().copied().collect();
    let map: BTreeMap<_, _> = ids.iter().zip(ids.iter().rev()).map(|(&a, &b)| (a, b + 100)).collect();
    let cfg = PipelineConfig::default();
    let a = run_pipeline(&seq, None, &cfg).unwrap();
    let b = run_pipeline(&relabel(&seq, &map), None, &cfg).unwrap();
    for (pa, pb) in a.pairs.iter().zip(&b.pairs) {
        let (ca, cb) = (&pa.forward.classification, &pb.forward.classification);
        let mut mapped: Vec<_> = ca.dynamic_ids.iter().map(|i| map[i]).collect();
        mapped.sort_unstable();
        let mut other = cb.dynamic_ids.clone();
        other.sort_unstable();
        assert_eq!(mapped, other);
        let mut mapped: Vec<_> = ca.static_ids.iter().map(|i| map[i]).collect();
        mapped.sort_unstable();
        let mut other = cb.static_ids.clone();
        other.sort_unstable();
        assert_eq!(mapped, other);
    }
    assert!((a.losses.total - b.losses.total).abs() <= 1e-9, "{} vs {}", a.losses.total, b.losses.total);
}

#[test]
fn classification_matches_oracle() {
    for seed in 0..5 {
        let (seq, oracle) = scene(&RandomSceneParams::default(), seed);
        let r = run_pipeline(&seq, None, &PipelineConfig::default()).unwrap();
        let cls = &r.pairs[0].forward.classification;
        for (id, dynamic) in oracle {
            assert_eq!(cls.is_dynamic(id), dynamic, "seed {seed} id {id}: {:?}", cls.scores);
        }
    }
}

#[test]
fn stride_needs_enough_frames() {
    let params = RandomSceneParams {
        n_frames: 2,
        ..Default::default()
    };
    let (seq, _) = scene(&params, 1);
    let err = run_pipeline(&seq, None, &PipelineConfig::default()).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)));
    let cfg = PipelineConfig {
        temporal_stride: 1,
        ..Default::default()
    };
    assert_eq!(run_pipeline(&seq, None, &cfg).unwrap().pairs.len(), 1);
}

#[test]
fn full_frame_object_has_no_background() {
    let (seq, _) = scene(&RandomSceneParams::default(), 2);
    let frames = seq
        .frames
        .iter()
        .map(|f| {
            let (w, h) = f.dims();
            let masks = InstanceMaskSet::new(w, h, vec![(1, motionmask::BinaryMask::ones(w, h))]).unwrap();
            Frame::new(f.image.clone(), f.depth.clone(), masks).unwrap()
        })
        .collect();
    let seq = Sequence::new(seq.intrinsics, frames, None).unwrap();
    assert!(matches!(
        run_pipeline(&seq, None, &PipelineConfig::default()),
        Err(Error::EmptyRegion)
    ));
}

#[test]
fn ground_truth_depth_gives_perfect_metrics() {
    let (seq, _) = scene(&RandomSceneParams::default(), 3);
    let gt: Vec<_> = seq.frames.iter().map(|f| f.depth.clone()).collect();
    let r = run_pipeline(&seq, Some(&gt), &PipelineConfig::default()).unwrap();
    let m = r.metrics.unwrap();
    assert_eq!((m.abs_rel, m.delta1), (0.0, 1.0));
    assert!(run_pipeline(&seq, Some(&gt[..1]), &PipelineConfig::default()).is_err());
}
