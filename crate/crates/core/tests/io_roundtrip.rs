use motionmask::io::{read_depth_dir, read_mask_png, read_pfm, read_sequence, write_depth_dir, write_mask_png, write_pfm, write_sequence};
use motionmask::pipeline::sequence_from_bundles;
use motionmask::synth::{random_scene, render_sequence, RandomSceneParams};
use motionmask::{Error, Raster};

#[test]
fn sequence_directory_roundtrip() {
    let spec = random_scene(&RandomSceneParams::default(), 11).unwrap();
    let seq = sequence_from_bundles(spec.intrinsics, &render_sequence(&spec).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_sequence(dir.path(), &seq).unwrap();
    let back = read_sequence(dir.path()).unwrap();
    assert_eq!(back.frames.len(), seq.frames.len());
    assert_eq!(back.intrinsics, seq.intrinsics);
    for (a, b) in seq.frames.iter().zip(&back.frames) {
        assert_eq!(a.depth, b.depth);
        assert_eq!(a.masks.label_map(), b.masks.label_map());
        for (x, y) in a.image.data().iter().zip(b.image.data()) {
            assert!((x - y).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
    let poses = back.poses.unwrap();
    for (a, b) in seq.poses.unwrap().iter().zip(&poses) {
        assert_eq!(a, b);
    }
}

#[test]
fn depth_files_are_byte_stable() {
    let d = Raster::from_fn(7, 5, |x, y| 0.5 + x as f32 * 1.25 - y as f32 * 0.1);
    let bytes = write_pfm(&d).unwrap();
    assert_eq!(write_pfm(&read_pfm(&bytes).unwrap()).unwrap(), bytes);
    let dir = tempfile::tempdir().unwrap();
    write_depth_dir(dir.path(), &[d.clone(), d.clone()]).unwrap();
    assert_eq!(read_depth_dir(dir.path(), 2).unwrap(), vec![d.clone(), d]);
}

#[test]
fn mask_png_roundtrip_is_lossless() {
    let spec = random_scene(&RandomSceneParams::default(), 12).unwrap();
    let masks = &render_sequence(&spec).unwrap()[0].masks;
    let bytes = write_mask_png(masks).unwrap();
    assert_eq!(read_mask_png(&bytes).unwrap().label_map(), masks.label_map());
}

#[test]
fn missing_files_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let spec = random_scene(&RandomSceneParams::default(), 13).unwrap();
    let seq = sequence_from_bundles(spec.intrinsics, &render_sequence(&spec).unwrap()).unwrap();
    write_sequence(dir.path(), &seq).unwrap();
    std::fs::remove_file(dir.path().join("depth_000001.pfm")).unwrap();
    let err = read_sequence(dir.path()).unwrap_err();
    assert!(err.to_string().contains("depth_000001.pfm"), "{err}");
    assert!(matches!(err.root(), Error::Io(_)));
}
