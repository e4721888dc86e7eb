//! File formats.
//!
//! * images: 8-bit RGB PNG
//! * depth: PFM, `Pf` header, little-endian `f32`, rows stored bottom-up
//! * instance masks: 16-bit grayscale PNG, 0 = background, `n` = instance `n`
//! * intrinsics: one line `fx fy cx cy`
//! * poses: one row-major 3×4 camera-to-world matrix (12 numbers) per line
//!
//! A sequence directory holds `image_NNNNNN.png`, `depth_NNNNNN.pfm` and
//! `mask_NNNNNN.png` per frame, `intrinsics.txt`, and optionally `poses.txt`.
//! Every parser takes bytes or text so it can be driven without a filesystem.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use crate::error::{check_dims, Error, Result};
use crate::geometry::{CameraIntrinsics, RigidPose};
use crate::mask::{InstanceId, InstanceMaskSet};
use crate::raster::Raster;

/// Largest raster (in pixels) accepted from a file.
pub const MAX_PIXELS: usize = 1 << 26;

const PNG_LIMIT_BYTES: usize = 256 << 20;

/// One ingested frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub image: Raster,
    pub depth: Raster,
    pub masks: InstanceMaskSet,
}

impl Frame {
    pub fn new(image: Raster, depth: Raster, masks: InstanceMaskSet) -> Result<Self> {
        if image.channels() != 3 {
            return Err(Error::InvalidArgument("frame image must be RGB".into()));
        }
        depth.expect_single_channel("depth")?;
        check_dims(image.dims(), depth.dims())?;
        check_dims(image.dims(), masks.dims())?;
        Ok(Self { image, depth, masks })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.image.dims()
    }
}

/// Frames sharing one camera.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub intrinsics: CameraIntrinsics,
    pub frames: Vec<Frame>,
    /// Camera-to-world poses, one per frame, when known.
    pub poses: Option<Vec<RigidPose>>,
}

impl Sequence {
    pub fn new(intrinsics: CameraIntrinsics, frames: Vec<Frame>, poses: Option<Vec<RigidPose>>) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::InvalidArgument("sequence has no frames".into()));
        };
        let dims = first.dims();
        for f in &frames {
            check_dims(dims, f.dims())?;
        }
        intrinsics.validate_for(dims.0, dims.1)?;
        if let Some(p) = &poses {
            if p.len() != frames.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} poses for {} frames",
                    p.len(),
                    frames.len()
                )));
            }
        }
        Ok(Self {
            intrinsics,
            frames,
            poses,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.frames[0].dims()
    }
}

fn check_size(width: usize, height: usize) -> Result<()> {
    if width == 0 || height == 0 || width.checked_mul(height).is_none_or(|n| n > MAX_PIXELS) {
        return Err(Error::MalformedRaster(format!("unsupported size {width}x{height}")));
    }
    Ok(())
}

/// Parses a single-channel PFM. A negative scale means little-endian, a
/// positive one big-endian; the magnitude is ignored.
pub fn read_pfm(bytes: &[u8]) -> Result<Raster> {
    let mut pos = 0;
    let mut token = |what: &str| -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos || pos - start > 32 {
            return Err(Error::MalformedRaster(format!("missing or oversized {what} in PFM header")));
        }
        let tok = std::str::from_utf8(&bytes[start..pos])
            .map_err(|_| Error::MalformedRaster(format!("non-ASCII {what} in PFM header")))?
            .to_string();
        Ok(tok)
    };
    let magic = token("magic")?;
    if magic != "Pf" {
        return Err(Error::MalformedRaster(format!("expected single-channel `Pf` magic, got `{magic}`")));
    }
    let parse_dim = |s: String| {
        s.parse::<usize>()
            .map_err(|_| Error::MalformedRaster(format!("bad PFM dimension `{s}`")))
    };
    let width = parse_dim(token("width")?)?;
    let height = parse_dim(token("height")?)?;
    let scale_tok = token("scale")?;
    let scale: f64 = scale_tok
        .parse()
        .map_err(|_| Error::MalformedRaster(format!("bad PFM scale `{scale_tok}`")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::MalformedRaster(format!("PFM scale must be nonzero, got {scale}")));
    }
    // Exactly one whitespace byte separates the header from the data.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::MalformedRaster("PFM header not terminated".into()));
    }
    pos += 1;
    check_size(width, height)?;
    let body = &bytes[pos..];
    let expected = width * height * 4;
    if body.len() != expected {
        return Err(Error::MalformedRaster(format!(
            "{width}x{height} PFM needs {expected} data bytes, found {}",
            body.len()
        )));
    }
    let little = scale < 0.0;
    let mut data = vec![0.0f32; width * height];
    for (i, chunk) in body.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (x, row) = (i % width, i / width);
        data[(height - 1 - row) * width + x] = v;
    }
    Raster::new(width, height, 1, data)
}

pub fn write_pfm(depth: &Raster) -> Result<Vec<u8>> {
    depth.expect_single_channel("depth")?;
    let (w, h) = depth.dims();
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * 4);
    for y in (0..h).rev() {
        for x in 0..w {
            out.extend_from_slice(&depth.get(x, y, 0).to_le_bytes());
        }
    }
    Ok(out)
}

fn decode_png(bytes: &[u8]) -> Result<(png::OutputInfo, Vec<u8>)> {
    let decoder = png::Decoder::new_with_limits(Cursor::new(bytes), png::Limits { bytes: PNG_LIMIT_BYTES });
    let mut reader = decoder.read_info()?;
    {
        let info = reader.info();
        check_size(info.width as usize, info.height as usize)?;
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::MalformedRaster("PNG too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf)?;
    buf.truncate(info.buffer_size());
    Ok((info, buf))
}

/// Decodes an 8-bit PNG to an RGB raster in `[0, 1]`. Grayscale is
/// replicated across channels and alpha is dropped.
pub fn read_rgb_png(bytes: &[u8]) -> Result<Raster> {
    let (info, buf) = decode_png(bytes)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::MalformedRaster(format!("expected 8-bit image, got {:?}", info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => return Err(Error::MalformedRaster(format!("unsupported PNG colour type {other:?}"))),
    };
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        let row = &buf[y * info.line_size..y * info.line_size + w * stride];
        for px in row.chunks_exact(stride) {
            let rgb = if stride >= 3 { [px[0], px[1], px[2]] } else { [px[0]; 3] };
            data.extend(rgb.iter().map(|&v| v as f32 / 255.0));
        }
    }
    Raster::new(w, h, 3, data)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode_png(w: usize, h: usize, color: png::ColorType, depth: png::BitDepth, data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(color);
        enc.set_depth(depth);
        let mut writer = enc.write_header()?;
        writer.write_image_data(data)?;
        writer.finish()?;
    }
    Ok(out)
}

/// Encodes a 3-channel raster as 8-bit RGB, clamping to `[0, 1]`.
pub fn write_rgb_png(image: &Raster) -> Result<Vec<u8>> {
    if image.channels() != 3 {
        return Err(Error::InvalidArgument("RGB PNG needs a 3-channel raster".into()));
    }
    let data: Vec<u8> = image.data().iter().map(|&v| quantize(v)).collect();
    encode_png(image.width(), image.height(), png::ColorType::Rgb, png::BitDepth::Eight, &data)
}

/// Encodes a single-channel raster as 8-bit grayscale, mapping `[lo, hi]`
/// linearly to `[0, 255]`.
pub fn write_gray_png(image: &Raster, lo: f32, hi: f32) -> Result<Vec<u8>> {
    image.expect_single_channel("grayscale image")?;
    let span = if hi > lo { hi - lo } else { 1.0 };
    let data: Vec<u8> = image.data().iter().map(|&v| quantize((v - lo) / span)).collect();
    encode_png(image.width(), image.height(), png::ColorType::Grayscale, png::BitDepth::Eight, &data)
}

/// Decodes a grayscale label PNG (16-bit, or 8-bit) into instance masks.
pub fn read_mask_png(bytes: &[u8]) -> Result<InstanceMaskSet> {
    let (info, buf) = decode_png(bytes)?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(Error::MalformedMask(format!("expected grayscale mask, got {:?}", info.color_type)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut labels: Vec<InstanceId> = Vec::with_capacity(w * h);
    for y in 0..h {
        let row = &buf[y * info.line_size..(y + 1) * info.line_size];
        match info.bit_depth {
            png::BitDepth::Sixteen => {
                labels.extend(row[..2 * w].chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]]) as InstanceId))
            }
            png::BitDepth::Eight => labels.extend(row[..w].iter().map(|&b| b as InstanceId)),
            other => return Err(Error::MalformedMask(format!("unsupported mask bit depth {other:?}"))),
        }
    }
    InstanceMaskSet::from_label_map(w, h, &labels)
}

pub fn write_mask_png(masks: &InstanceMaskSet) -> Result<Vec<u8>> {
    let (w, h) = masks.dims();
    if let Some(id) = masks.ids().into_iter().find(|&id| id > u16::MAX as InstanceId) {
        return Err(Error::MalformedMask(format!("instance id {id} does not fit in 16 bits")));
    }
    let data: Vec<u8> = masks
        .label_map()
        .into_iter()
        .flat_map(|l| (l as u16).to_be_bytes())
        .collect();
    encode_png(w, h, png::ColorType::Grayscale, png::BitDepth::Sixteen, &data)
}

fn parse_numbers(line: &str, lineno: usize) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::MalformedText(format!("line {lineno}: `{t}` is not a finite number")))
        })
        .collect()
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

/// Parses `fx fy cx cy` from the single non-empty line of `text`.
pub fn parse_intrinsics(text: &str) -> Result<CameraIntrinsics> {
    let mut lines = content_lines(text);
    let Some((lineno, line)) = lines.next() else {
        return Err(Error::MalformedText("intrinsics file is empty".into()));
    };
    if let Some((extra, _)) = lines.next() {
        return Err(Error::MalformedText(format!("unexpected content on line {extra}")));
    }
    let v = parse_numbers(line, lineno)?;
    if v.len() != 4 {
        return Err(Error::MalformedText(format!("expected `fx fy cx cy`, found {} numbers", v.len())));
    }
    CameraIntrinsics::new(v[0], v[1], v[2], v[3]).map_err(|e| Error::MalformedText(e.to_string()))
}

pub fn format_intrinsics(k: &CameraIntrinsics) -> String {
    format!("{} {} {} {}\n", k.fx, k.fy, k.cx, k.cy)
}

/// Parses one 3×4 pose per non-empty line.
pub fn parse_poses(text: &str) -> Result<Vec<RigidPose>> {
    content_lines(text)
        .map(|(lineno, line)| {
            let v = parse_numbers(line, lineno)?;
            let rows: [f64; 12] = v.as_slice().try_into().map_err(|_| {
                Error::MalformedText(format!("line {lineno}: expected 12 numbers, found {}", v.len()))
            })?;
            RigidPose::from_rows(&rows).map_err(|e| Error::MalformedText(format!("line {lineno}: {e}")))
        })
        .collect()
}

pub fn format_poses(poses: &[RigidPose]) -> String {
    let mut out = String::new();
    for p in poses {
        let row: Vec<String> = p.to_rows().iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

pub fn image_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("image_{i:06}.png"))
}

pub fn depth_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("depth_{i:06}.pfm"))
}

pub fn mask_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("mask_{i:06}.png"))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::from(e).at(path))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::from(e).at(path))
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.at(path))
}

pub fn read_depth_file(path: &Path) -> Result<Raster> {
    with_path(path, read_pfm(&read_file(path)?))
}

pub fn read_frame(dir: &Path, i: usize) -> Result<Frame> {
    let ip = image_path(dir, i);
    let mp = mask_path(dir, i);
    let image = with_path(&ip, read_rgb_png(&read_file(&ip)?))?;
    let depth = read_depth_file(&depth_path(dir, i))?;
    let masks = with_path(&mp, read_mask_png(&read_file(&mp)?))?;
    with_path(dir, Frame::new(image, depth, masks))
}

/// Number of consecutive frames `0, 1, …` whose image file exists.
pub fn count_frames(dir: &Path) -> usize {
    (0..).take_while(|&i| image_path(dir, i).is_file()).count()
}

pub fn read_sequence(dir: &Path) -> Result<Sequence> {
    let n = count_frames(dir);
    if n == 0 {
        return Err(Error::InvalidArgument(format!("no frames found in {}", dir.display())));
    }
    let kp = dir.join("intrinsics.txt");
    let k = with_path(&kp, parse_intrinsics(&read_text(&kp)?))?;
    let frames = (0..n).map(|i| read_frame(dir, i)).collect::<Result<Vec<_>>>()?;
    let pp = dir.join("poses.txt");
    let poses = if pp.is_file() {
        Some(with_path(&pp, parse_poses(&read_text(&pp)?))?)
    } else {
        None
    };
    with_path(dir, Sequence::new(k, frames, poses))
}

/// Ground-truth depth maps `depth_NNNNNN.pfm` for frames `0..n`.
pub fn read_depth_dir(dir: &Path, n: usize) -> Result<Vec<Raster>> {
    (0..n).map(|i| read_depth_file(&depth_path(dir, i))).collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::from(e).at(path))
}

pub fn write_sequence(dir: &Path, seq: &Sequence) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::from(e).at(dir))?;
    write_file(&dir.join("intrinsics.txt"), format_intrinsics(&seq.intrinsics).as_bytes())?;
    for (i, f) in seq.frames.iter().enumerate() {
        write_file(&image_path(dir, i), &write_rgb_png(&f.image)?)?;
        write_file(&depth_path(dir, i), &write_pfm(&f.depth)?)?;
        write_file(&mask_path(dir, i), &write_mask_png(&f.masks)?)?;
    }
    if let Some(p) = &seq.poses {
        write_file(&dir.join("poses.txt"), format_poses(p).as_bytes())?;
    }
    Ok(())
}

pub fn write_depth_dir(dir: &Path, depths: &[Raster]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::from(e).at(dir))?;
    for (i, d) in depths.iter().enumerate() {
        write_file(&depth_path(dir, i), &write_pfm(d)?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::BinaryMask;
    use proptest::prelude::*;

    #[test]
    fn pfm_layout_is_bottom_up_little_endian() {
        let d = Raster::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = write_pfm(&d).unwrap();
        let header = b"Pf\n2 2\n-1.0\n";
        assert_eq!(&bytes[..header.len()], header);
        let body: Vec<f32> = bytes[header.len()..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        assert_eq!(body, vec![3.0, 4.0, 1.0, 2.0]);
        assert_eq!(read_pfm(&bytes).unwrap(), d);
    }

    #[test]
    fn pfm_big_endian_and_errors() {
        let mut be = b"Pf\n1 1\n1.0\n".to_vec();
        be.extend_from_slice(&2.5f32.to_be_bytes());
        assert_eq!(read_pfm(&be).unwrap().data(), &[2.5]);
        let mut short = b"Pf\n2 2\n-1.0\n".to_vec();
        short.extend_from_slice(&[0; 12]);
        assert!(matches!(read_pfm(&short), Err(Error::MalformedRaster(_))));
        assert!(matches!(read_pfm(b"PF\n1 1\n-1.0\n\0\0\0\0\0\0\0\0\0\0\0\0"), Err(Error::MalformedRaster(_))));
        assert!(matches!(read_pfm(b"Pf\n1 1\n0\n\0\0\0\0"), Err(Error::MalformedRaster(_))));
        assert!(read_pfm(b"").is_err());
        assert!(read_pfm(b"Pf 99999999999 99999999999 -1 ").is_err());
    }

    #[test]
    fn rgb_png_roundtrip_quantizes() {
        let img = Raster::from_fn_rgb(5, 3, |x, y| [x as f32 / 4.0, y as f32 / 2.0, 0.333]);
        let back = read_rgb_png(&write_rgb_png(&img).unwrap()).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        let again = write_rgb_png(&back).unwrap();
        assert_eq!(read_rgb_png(&again).unwrap(), back);
    }

    #[test]
    fn mask_png_roundtrip() {
        let set = InstanceMaskSet::new(
            6,
            4,
            vec![(300, BinaryMask::rect(6, 4, 0, 0, 2, 2)), (7, BinaryMask::rect(6, 4, 3, 1, 3, 3))],
        )
        .unwrap();
        let back = read_mask_png(&write_mask_png(&set).unwrap()).unwrap();
        assert_eq!(back, set.sorted());
        let big = InstanceMaskSet::new(2, 1, vec![(70000, BinaryMask::ones(2, 1))]).unwrap();
        assert!(write_mask_png(&big).is_err());
    }

    #[test]
    fn overlapping_instances_are_rejected() {
        let a = BinaryMask::rect(4, 4, 0, 0, 2, 2);
        let b = BinaryMask::rect(4, 4, 1, 1, 2, 2);
        assert!(InstanceMaskSet::new(4, 4, vec![(1, a), (2, b)]).is_err());
    }

    #[test]
    fn text_formats() {
        let k = parse_intrinsics("120 121.5 63.5 47.5\n").unwrap();
        assert_eq!((k.fx, k.fy, k.cx, k.cy), (120.0, 121.5, 63.5, 47.5));
        assert_eq!(parse_intrinsics(&format_intrinsics(&k)).unwrap(), k);
        assert!(parse_intrinsics("1 2 3").is_err());
        assert!(parse_intrinsics("1 2 3 4\n5 6 7 8").is_err());
        assert!(parse_intrinsics("1 2 3 nan").is_err());
        assert!(parse_intrinsics("").is_err());

        let poses = parse_poses("1 0 0 0 0 1 0 0 0 0 1 0\n\n1 0 0 1.5 0 1 0 0 0 0 1 -2\n").unwrap();
        assert_eq!(poses.len(), 2);
        assert_eq!(poses[1].translation().x, 1.5);
        assert_eq!(parse_poses(&format_poses(&poses)).unwrap(), poses);
        assert!(parse_poses("1 0 0 0 0 1 0 0 0 0 1").is_err());
        assert!(parse_poses("2 0 0 0 0 1 0 0 0 0 1 0").is_err());
    }

    proptest! {
        #[test]
        fn pfm_roundtrip_bytes(w in 1usize..6, h in 1usize..6, seed in any::<u32>()) {
            let d = Raster::from_fn(w, h, |x, y| ((x * 31 + y * 17) as u32 ^ seed) as f32 * 1e-3 - 2.0);
            let bytes = write_pfm(&d).unwrap();
            let back = read_pfm(&bytes).unwrap();
            prop_assert_eq!(&back, &d);
            prop_assert_eq!(write_pfm(&back).unwrap(), bytes);
        }

        #[test]
        fn parsers_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
            let _ = read_pfm(&bytes);
            let _ = read_rgb_png(&bytes);
            let _ = read_mask_png(&bytes);
            if let Ok(s) = std::str::from_utf8(&bytes) {
                let _ = parse_intrinsics(s);
                let _ = parse_poses(s);
            }
        }
    }
}
