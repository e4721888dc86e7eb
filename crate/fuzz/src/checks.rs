//! Property checks shared by the fuzz targets and the seed-corpus test.
//! Each takes arbitrary bytes, must not panic, and asserts that anything
//! accepted survives a write/read round trip.

use motionmask::io::{
    format_intrinsics, format_poses, parse_intrinsics, parse_poses, read_mask_png, read_pfm,
    read_rgb_png, write_mask_png, write_pfm, write_rgb_png,
};
use motionmask::pipeline::PipelineReport;
use motionmask::synth::SceneSpec;
use motionmask::Raster;

fn bits(r: &Raster) -> Vec<u32> {
    r.data().iter().map(|v| v.to_bits()).collect()
}

pub fn pfm(data: &[u8]) {
    if let Ok(depth) = read_pfm(data) {
        let back = read_pfm(&write_pfm(&depth).expect("write accepted depth")).expect("reread");
        assert_eq!(back.dims(), depth.dims());
        assert_eq!(bits(&back), bits(&depth));
    }
}

pub fn rgb_png(data: &[u8]) {
    if let Ok(img) = read_rgb_png(data) {
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let back = read_rgb_png(&write_rgb_png(&img).expect("write accepted image")).expect("reread");
        assert_eq!(back, img);
    }
}

pub fn mask_png(data: &[u8]) {
    if let Ok(masks) = read_mask_png(data) {
        let back = read_mask_png(&write_mask_png(&masks).expect("write accepted masks")).expect("reread");
        assert_eq!(back, masks);
    }
}

pub fn intrinsics(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(k) = parse_intrinsics(text) {
        assert_eq!(parse_intrinsics(&format_intrinsics(&k)).expect("reparse"), k);
    }
}

pub fn poses(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(p) = parse_poses(text) {
        assert_eq!(parse_poses(&format_poses(&p)).expect("reparse"), p);
    }
}

pub fn scene_json(data: &[u8]) {
    if let Ok(spec) = serde_json::from_slice::<SceneSpec>(data) {
        let _ = spec.validate();
        let text = serde_json::to_string(&spec).expect("serialize");
        let back: SceneSpec = serde_json::from_str(&text).expect("reparse");
        assert_eq!(serde_json::to_string(&back).expect("serialize"), text);
    }
}

pub fn report_json(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(report) = PipelineReport::from_json(text) {
        if let Ok(out) = report.to_json() {
            let again = PipelineReport::from_json(&out).expect("reparse");
            assert_eq!(again.to_json().expect("serialize"), out);
        }
    }
}
