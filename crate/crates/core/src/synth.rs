//! Analytic multi-object scene renderer with exact ground truth.
//!
//! The world frame is the first camera's frame. A scene is a textured
//! background plane plus textured rectangles; every pixel casts one ray
//! through its centre and the nearest surface wins.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, RigidPose};
use crate::mask::{InstanceId, InstanceMaskSet};
use crate::raster::Raster;

/// Seeded value noise: two octaves of lattice values blended with a quintic
/// fade, mapped to `[0.1, 0.9]` per channel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub seed: u64,
    /// Lattice spacing of the coarse octave in scene units.
    pub scale: f64,
    /// Replaces the noise with a flat colour.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constant: Option<[f32; 3]>,
}

impl Texture {
    pub fn noise(seed: u64, scale: f64) -> Self {
        Self {
            seed,
            scale,
            constant: None,
        }
    }

    fn sample(&self, scene_seed: u64, a: f64, b: f64) -> [f32; 3] {
        if let Some(c) = self.constant {
            return c;
        }
        let seed = mix(self.seed ^ mix(scene_seed.wrapping_add(0x9e37_79b9_7f4a_7c15)));
        let mut out = [0.0f32; 3];
        for (c, o) in out.iter_mut().enumerate() {
            let coarse = lattice(seed, c as u64, a / self.scale, b / self.scale);
            let fine = lattice(seed ^ 0x5bd1_e995, c as u64, a / (0.5 * self.scale), b / (0.5 * self.scale));
            *o = (0.1 + 0.8 * (0.6 * coarse + 0.4 * fine)) as f32;
        }
        out
    }
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn lattice_value(seed: u64, channel: u64, i: i64, j: i64) -> f64 {
    let h = mix(seed ^ mix((i as u64).wrapping_mul(0x1000_0000_01b3) ^ mix((j as u64) ^ (channel << 58))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn lattice(seed: u64, channel: u64, x: f64, y: f64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (i, j) = (fx as i64, fy as i64);
    let fade = |t: f64| t * t * t * (t * (6.0 * t - 15.0) + 10.0);
    let (tx, ty) = (fade(x - fx), fade(y - fy));
    let v = |di, dj| lattice_value(seed, channel, i + di, j + dj);
    (1.0 - ty) * ((1.0 - tx) * v(0, 0) + tx * v(1, 0)) + ty * ((1.0 - tx) * v(0, 1) + tx * v(1, 1))
}

/// Background plane `{X : n·X = distance}` in the world frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundPlane {
    pub normal: [f64; 3],
    pub distance: f64,
    pub texture: Texture,
}

/// Textured rectangle spanning `[-w/2, w/2] × [-h/2, h/2]` in its local xy
/// plane, placed at `center` with orientation `rotation` (axis-angle).
/// `motion` is applied once per frame about the current centre: the
/// orientation is pre-multiplied by its rotation and the centre moves by its
/// translation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: InstanceId,
    pub size: [f64; 2],
    pub center: [f64; 3],
    #[serde(default)]
    pub rotation: [f64; 3],
    #[serde(default)]
    pub motion: RigidPose,
    pub texture: Texture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub intrinsics: CameraIntrinsics,
    pub background: BackgroundPlane,
    #[serde(default)]
    pub objects: Vec<SceneObject>,
    /// Camera motion per step, mapping frame-t points into frame t+1.
    #[serde(default)]
    pub ego_motion: RigidPose,
    pub n_frames: usize,
    #[serde(default)]
    pub rng_seed: u64,
}

#[derive(Clone, Debug)]
pub struct FrameBundle {
    pub image: Raster,
    pub depth: Raster,
    pub masks: InstanceMaskSet,
    /// Ego-motion from this frame to the next.
    pub gt_ego: RigidPose,
    /// World-frame motion of each object from this frame to the next.
    pub gt_object_motions: BTreeMap<InstanceId, RigidPose>,
    /// Camera-to-world pose of this frame.
    pub cam_to_world: RigidPose,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Scene("frame size must be positive".into()));
        }
        if self.n_frames == 0 {
            return Err(Error::Scene("n_frames must be at least 1".into()));
        }
        CameraIntrinsics::new(self.intrinsics.fx, self.intrinsics.fy, self.intrinsics.cx, self.intrinsics.cy)?
            .validate_for(self.width, self.height)?;
        let n = Vector3::from(self.background.normal);
        if !(n.norm() > 0.0) || !(self.background.distance > 0.0) {
            return Err(Error::Scene("background plane needs a nonzero normal and positive distance".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for o in &self.objects {
            if o.id == 0 || !seen.insert(o.id) {
                return Err(Error::Scene(format!("object id {} is zero or duplicated", o.id)));
            }
            if !(o.size[0] > 0.0 && o.size[1] > 0.0) {
                return Err(Error::Scene(format!("object {} has non-positive size", o.id)));
            }
        }
        for t in std::iter::once(&self.background.texture).chain(self.objects.iter().map(|o| &o.texture)) {
            if t.constant.is_none() && !(t.scale > 0.0) {
                return Err(Error::Scene("texture scale must be positive".into()));
            }
        }
        Ok(())
    }

    /// Centre and orientation of an object at frame `k`.
    fn object_state(o: &SceneObject, k: usize) -> (Vector3<f64>, Matrix3<f64>) {
        let mut c = Vector3::from(o.center);
        let mut r = *RigidPose::from_axis_angle(Vector3::from(o.rotation), Vector3::zeros()).rotation();
        for _ in 0..k {
            c += o.motion.translation();
            r = o.motion.rotation() * r;
        }
        (c, r)
    }

    /// World-to-camera pose of frame `k`.
    fn world_to_cam(&self, k: usize) -> RigidPose {
        (0..k).fold(RigidPose::identity(), |acc, _| self.ego_motion.compose(&acc))
    }
}

/// Dynamic (true) or static for every object: dynamic iff its per-step
/// motion differs from the identity by more than 1e-9.
pub fn label_oracle(spec: &SceneSpec) -> BTreeMap<InstanceId, bool> {
    spec.objects.iter().map(|o| (o.id, !o.motion.is_identity(1e-9))).collect()
}

struct Surface {
    origin: Vector3<f64>,
    normal: Vector3<f64>,
    /// Rows are the in-plane texture axes (and the normal for objects).
    frame: Matrix3<f64>,
    half: Option<(f64, f64)>,
    texture: Texture,
    id: InstanceId,
}

impl Surface {
    /// Ray parameter and texture coordinates of the hit, if any.
    fn hit(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let denom = self.normal.dot(d);
        if denom.abs() < 1e-12 {
            return None;
        }
        let s = self.normal.dot(&(self.origin - o)) / denom;
        if !(s > 0.0) {
            return None;
        }
        let local = self.frame * (o + d * s - self.origin);
        if let Some((hw, hh)) = self.half {
            if local.x.abs() > hw || local.y.abs() > hh {
                return None;
            }
        }
        Some((s, local.x, local.y))
    }
}

fn plane_basis(n: &Vector3<f64>) -> Matrix3<f64> {
    let helper = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let e1 = (helper - n * n.dot(&helper)).normalize();
    let e2 = n.cross(&e1);
    Matrix3::from_rows(&[e1.transpose(), e2.transpose(), n.transpose()])
}

/// Colour, depth and owner of one rendered pixel.
type Shaded = ([f32; 3], f32, InstanceId);

/// Renders every frame of the scene.
pub fn render_sequence(spec: &SceneSpec) -> Result<Vec<FrameBundle>> {
    spec.validate()?;
    (0..spec.n_frames).map(|k| render_frame(spec, k)).collect()
}

pub fn render_frame(spec: &SceneSpec, k: usize) -> Result<FrameBundle> {
    let (w, h) = (spec.width, spec.height);
    let kk = spec.intrinsics;
    let w2c = spec.world_to_cam(k);
    let c2w = w2c.inverse();

    let n = Vector3::from(spec.background.normal).normalize();
    let mut surfaces = vec![Surface {
        origin: n * spec.background.distance,
        normal: n,
        frame: plane_basis(&n),
        half: None,
        texture: spec.background.texture,
        id: 0,
    }];
    let mut motions = BTreeMap::new();
    for o in &spec.objects {
        let (c, r) = SceneSpec::object_state(o, k);
        let (hw, hh) = (o.size[0] / 2.0, o.size[1] / 2.0);
        let all_behind = [(-1.0, -1.0), (1.0, -1.0), (-1.0, 1.0), (1.0, 1.0)].iter().all(|&(sx, sy)| {
            let corner = c + r * Vector3::new(sx * hw, sy * hh, 0.0);
            w2c.transform(&corner).z <= 0.0
        });
        if all_behind {
            return Err(Error::Scene(format!("object {} is behind the camera in frame {k}", o.id)));
        }
        surfaces.push(Surface {
            origin: c,
            normal: r.column(2).into_owned(),
            frame: r.transpose(),
            half: Some((hw, hh)),
            texture: o.texture,
            id: o.id,
        });
        // x ↦ R_m (x − c) + c + t_m
        let rm = *o.motion.rotation();
        let world_motion = RigidPose::new(rm, c + o.motion.translation() - rm * c)?;
        motions.insert(o.id, world_motion);
    }

    let origin = c2w.transform(&Vector3::zeros());
    let rows: Vec<Result<Vec<Shaded>>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let d_cam = Vector3::new((x as f64 - kk.cx) / kk.fx, (y as f64 - kk.cy) / kk.fy, 1.0);
                    let d = c2w.rotation() * d_cam;
                    let mut best: Option<(f64, f64, f64, &Surface)> = None;
                    for s in &surfaces {
                        if let Some((t, a, b)) = s.hit(&origin, &d) {
                            if best.is_none_or(|(bt, ..)| t < bt) {
                                best = Some((t, a, b, s));
                            }
                        }
                    }
                    match best {
                        Some((t, a, b, s)) => Ok((s.texture.sample(spec.rng_seed, a, b), t as f32, s.id)),
                        None => Err(Error::Scene(format!("ray through pixel ({x}, {y}) misses the background in frame {k}"))),
                    }
                })
                .collect()
        })
        .collect();

    let mut image = Vec::with_capacity(w * h * 3);
    let mut depth = Vec::with_capacity(w * h);
    let mut labels = Vec::with_capacity(w * h);
    for row in rows {
        for (rgb, z, id) in row? {
            image.extend_from_slice(&rgb);
            depth.push(z);
            labels.push(id);
        }
    }
    Ok(FrameBundle {
        image: Raster::new(w, h, 3, image)?,
        depth: Raster::new(w, h, 1, depth)?,
        masks: InstanceMaskSet::from_label_map(w, h, &labels)?,
        gt_ego: spec.ego_motion,
        gt_object_motions: motions,
        cam_to_world: c2w,
    })
}

/// Parameters of the random scene family used by tests and sweeps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomSceneParams {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub n_frames: usize,
    pub n_static: usize,
    pub n_dynamic: usize,
    /// Range of object centre depths.
    pub object_depth: [f64; 2],
    /// Range of object widths in pixels at placement.
    pub object_width_px: [f64; 2],
    /// Range of per-frame image-space speed of dynamic objects as a fraction
    /// of their width.
    pub dynamic_speed: [f64; 2],
    /// Maximum ego translation per frame (scene units) and rotation (degrees).
    pub ego_translation: f64,
    pub ego_rotation_deg: f64,
    /// Restricts ego translation to mostly forward motion, as from a vehicle.
    pub ego_forward: bool,
    pub background_distance: f64,
    pub background_tilt_deg: f64,
    /// Approximate coarse texture feature size in pixels.
    pub texture_px: f64,
}

impl Default for RandomSceneParams {
    fn default() -> Self {
        Self {
            width: 160,
            height: 120,
            focal: 140.0,
            n_frames: 3,
            n_static: 3,
            n_dynamic: 2,
            object_depth: [5.0, 8.0],
            object_width_px: [22.0, 30.0],
            dynamic_speed: [0.15, 0.3],
            ego_translation: 0.08,
            ego_rotation_deg: 0.4,
            ego_forward: false,
            background_distance: 12.0,
            background_tilt_deg: 12.0,
            texture_px: 10.0,
        }
    }
}

/// Samples a scene whose objects occupy distinct cells of a coarse grid, so
/// that they do not occlude each other at placement. Dynamic objects move
/// sideways within the image plane.
pub fn random_scene(params: &RandomSceneParams, seed: u64) -> Result<SceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = params;
    let k = CameraIntrinsics::new(
        p.focal,
        p.focal,
        (p.width as f64 - 1.0) / 2.0,
        (p.height as f64 - 1.0) / 2.0,
    )?;
    let n_obj = p.n_static + p.n_dynamic;
    let cols = (n_obj as f64 * 4.0 / 3.0).sqrt().ceil().max(1.0) as usize;
    let rows = n_obj.div_ceil(cols).max(1);
    let mut cells: Vec<usize> = (0..rows * cols).collect();
    for i in (1..cells.len()).rev() {
        cells.swap(i, rng.random_range(0..=i));
    }

    let tilt = p.background_tilt_deg.to_radians();
    let az = rng.random_range(0.0..std::f64::consts::TAU);
    let normal = Vector3::new(tilt.sin() * az.cos(), tilt.sin() * az.sin(), tilt.cos());
    let background = BackgroundPlane {
        normal: normal.into(),
        distance: p.background_distance * tilt.cos(),
        texture: Texture::noise(rng.random(), p.texture_px * p.background_distance / p.focal),
    };

    let mut objects = Vec::with_capacity(n_obj);
    let (cell_w, cell_h) = (p.width as f64 / cols as f64, p.height as f64 / rows as f64);
    let mut ids: Vec<InstanceId> = (1..=n_obj as InstanceId).collect();
    for i in (1..ids.len()).rev() {
        ids.swap(i, rng.random_range(0..=i));
    }
    for (n, &cell) in cells.iter().take(n_obj).enumerate() {
        let dynamic = n >= p.n_static;
        let z = rng.random_range(p.object_depth[0]..=p.object_depth[1]);
        let width_px = rng.random_range(p.object_width_px[0]..=p.object_width_px[1]);
        let height_px = width_px * rng.random_range(0.65..=1.0);
        let (cx, cy) = ((cell % cols) as f64 + 0.5, (cell / cols) as f64 + 0.5);
        let u = cx * cell_w + rng.random_range(-0.15..=0.15) * cell_w;
        let v = cy * cell_h + rng.random_range(-0.15..=0.15) * cell_h;
        let center = k.backproject(u, v, z);
        let size = [width_px * z / p.focal, height_px * z / p.focal];
        let motion = if dynamic {
            let speed = rng.random_range(p.dynamic_speed[0]..=p.dynamic_speed[1]) * size[0];
            let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            RigidPose::from_translation(Vector3::new(dir * speed, 0.0, 0.0))
        } else {
            RigidPose::identity()
        };
        objects.push(SceneObject {
            id: ids[n],
            size,
            center: center.into(),
            rotation: [0.0, rng.random_range(-0.2..=0.2), 0.0],
            motion,
            texture: Texture::noise(rng.random(), p.texture_px * z / p.focal),
        });
    }

    let lateral = if p.ego_forward { 0.2 } else { 1.0 };
    let dir = Vector3::new(
        lateral * rng.random_range(-1.0..=1.0),
        lateral * rng.random_range(-0.3..=0.3),
        if p.ego_forward { -1.0 } else { rng.random_range(-1.0..=1.0) },
    )
    .normalize();
    let t = dir * p.ego_translation * rng.random_range(0.5..=1.0);
    let axis = Vector3::new(
        rng.random_range(-0.5..=0.5),
        rng.random_range(-1.0..=1.0),
        rng.random_range(-0.2..=0.2),
    )
    .normalize();
    let angle = p.ego_rotation_deg.to_radians() * rng.random_range(0.3..=1.0);
    Ok(SceneSpec {
        width: p.width,
        height: p.height,
        intrinsics: k,
        background,
        objects,
        ego_motion: RigidPose::from_axis_angle(axis * angle, t),
        n_frames: p.n_frames,
        rng_seed: seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane_scene() -> SceneSpec {
        SceneSpec {
            width: 48,
            height: 32,
            intrinsics: CameraIntrinsics::new(50.0, 50.0, 23.5, 15.5).unwrap(),
            background: BackgroundPlane {
                normal: [0.0, 0.0, 1.0],
                distance: 5.0,
                texture: Texture::noise(7, 0.4),
            },
            objects: vec![],
            ego_motion: RigidPose::identity(),
            n_frames: 2,
            rng_seed: 3,
        }
    }

    #[test]
    fn static_scene_frames_identical() {
        let mut s = plane_scene();
        s.objects.push(SceneObject {
            id: 4,
            size: [1.0, 0.8],
            center: [0.0, 0.0, 3.0],
            rotation: [0.0, 0.1, 0.0],
            motion: RigidPose::identity(),
            texture: Texture::noise(1, 0.2),
        });
        let f = render_sequence(&s).unwrap();
        assert_eq!(f[0].image, f[1].image);
        assert_eq!(f[0].depth, f[1].depth);
        assert_eq!(f[0].masks, f[1].masks);
    }

    #[test]
    fn plane_translation_shifts_by_integer_pixels() {
        let mut s = plane_scene();
        // fx·t/Z = 50·0.2/5 = 2 px
        s.ego_motion = RigidPose::from_translation(Vector3::new(0.2, 0.0, 0.0));
        let f = render_sequence(&s).unwrap();
        for y in 0..32 {
            for x in 2..48 {
                for c in 0..3 {
                    assert!((f[1].image.get(x, y, c) - f[0].image.get(x - 2, y, c)).abs() < 1e-5);
                }
            }
        }
        assert!(f[1].depth.data().iter().all(|&d| (d - 5.0).abs() < 1e-6));
    }

    #[test]
    fn moving_object_over_static_background() {
        let mut s = plane_scene();
        s.objects.push(SceneObject {
            id: 2,
            size: [1.0, 1.0],
            center: [-0.5, 0.0, 4.0],
            rotation: [0.0; 3],
            motion: RigidPose::from_translation(Vector3::new(0.4, 0.0, 0.0)),
            texture: Texture::noise(9, 0.2),
        });
        let f = render_sequence(&s).unwrap();
        let (c0, c1) = (f[0].masks.get(2).unwrap().centroid().unwrap(), f[1].masks.get(2).unwrap().centroid().unwrap());
        assert!((c1.0 - c0.0 - 5.0).abs() < 0.6, "{c0:?} {c1:?}");
        let bg0 = f[0].masks.union().complement();
        let bg1 = f[1].masks.union().complement();
        let both = bg0.intersect(&bg1).unwrap();
        for i in both.indices() {
            assert_eq!(f[0].image.pixel(i), f[1].image.pixel(i));
        }
        // Object depth is in front of the background along each of its rays.
        for i in f[0].masks.get(2).unwrap().indices() {
            assert!(f[0].depth.data()[i] < 5.0);
        }
    }

    #[test]
    fn oracle_labels() {
        let mut s = plane_scene();
        let mk = |id, m| SceneObject {
            id,
            size: [0.3, 0.3],
            center: [0.0, 0.0, 3.0],
            rotation: [0.0; 3],
            motion: m,
            texture: Texture::noise(1, 0.1),
        };
        s.objects = vec![
            mk(1, RigidPose::identity()),
            mk(2, RigidPose::from_translation(Vector3::new(0.05, 0.0, 0.0))),
            mk(3, RigidPose::identity()),
            mk(4, RigidPose::from_axis_angle(Vector3::new(0.0, 0.01, 0.0), Vector3::zeros())),
            mk(5, RigidPose::identity()),
        ];
        let l = label_oracle(&s);
        let dynamic: Vec<_> = l.iter().filter(|(_, &d)| d).map(|(&id, _)| id).collect();
        assert_eq!(dynamic, vec![2, 4]);
    }

    #[test]
    fn behind_camera_is_an_error() {
        let mut s = plane_scene();
        s.objects.push(SceneObject {
            id: 1,
            size: [1.0, 1.0],
            center: [0.0, 0.0, -3.0],
            rotation: [0.0; 3],
            motion: RigidPose::identity(),
            texture: Texture::noise(1, 0.1),
        });
        assert!(matches!(render_sequence(&s), Err(Error::Scene(_))));
    }

    #[test]
    fn random_scene_is_deterministic_and_renders() {
        let p = RandomSceneParams::default();
        let a = random_scene(&p, 11).unwrap();
        assert_eq!(a, random_scene(&p, 11).unwrap());
        let f = render_sequence(&a).unwrap();
        assert_eq!(f.len(), 3);
        assert_eq!(f[0].masks.len(), 5);
        let labels = label_oracle(&a);
        assert_eq!(labels.values().filter(|&&d| d).count(), 2);
    }
}
