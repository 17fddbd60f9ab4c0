//! Scene ingestion: images plus an SfM text model, unit-frame normalization,
//! plain XYZ point lists, and synthetic scenes with analytic ground truth.

pub mod colmap;
pub mod image;
pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::camera::{Camera, CameraError};
use crate::geom::{self, Vec3};

pub use self::image::Image;
pub use self::synth::{RigPreset, ShapeSpec, SyntheticSpec};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {detail}")]
    Parse {
        path: String,
        line: usize,
        detail: String,
    },
    #[error("unknown camera model {model} (supported: PINHOLE, SIMPLE_PINHOLE)")]
    UnknownCameraModel { model: String },
    #[error("inconsistent model: {detail}")]
    Model { detail: String },
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error("degenerate point set: {detail}")]
    DegeneratePoints { detail: String },
    #[error("image {index} is {got_w}x{got_h} but its camera expects {want_w}x{want_h}")]
    ImageSizeMismatch {
        index: usize,
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
}

/// Similarity transform into the unit frame: `x' = (x - center) * scale`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub center: Vec3,
    pub scale: f64,
}

impl Normalization {
    pub fn identity() -> Self {
        Normalization {
            center: [0.0; 3],
            scale: 1.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.center == [0.0; 3] && self.scale == 1.0
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        geom::scale(geom::sub(p, self.center), self.scale)
    }

    pub fn invert(&self, p: Vec3) -> Vec3 {
        geom::add(geom::scale(p, 1.0 / self.scale), self.center)
    }

    /// Lengths transform by the scale factor alone.
    pub fn apply_length(&self, len: f64) -> f64 {
        len * self.scale
    }
}

/// A loaded scene: images, one camera per image, and on-surface points.
#[derive(Clone, Debug)]
pub struct SceneBundle {
    pub images: Vec<Image>,
    pub cameras: Vec<Camera>,
    pub points: Vec<Vec3>,
    /// Per-point RGB from the SfM model; kept for debugging, unused by losses.
    pub point_colors: Vec<[f64; 3]>,
    /// Transform that was applied to reach the current frame.
    pub normalization: Normalization,
}

impl SceneBundle {
    pub fn validate(&self) -> Result<(), SceneError> {
        if self.images.len() != self.cameras.len() {
            return Err(SceneError::Model {
                detail: format!(
                    "{} images vs {} cameras",
                    self.images.len(),
                    self.cameras.len()
                ),
            });
        }
        for (i, (img, cam)) in self.images.iter().zip(&self.cameras).enumerate() {
            cam.validate()?;
            if img.width != cam.width || img.height != cam.height {
                return Err(SceneError::ImageSizeMismatch {
                    index: i,
                    got_w: img.width,
                    got_h: img.height,
                    want_w: cam.width,
                    want_h: cam.height,
                });
            }
        }
        Ok(())
    }

    /// Scene radius in the current frame: 1 after normalization.
    pub fn scene_radius(&self) -> f64 {
        1.0
    }
}

/// Map the bounding sphere of the points (centroid, 1.1x max distance) to the
/// unit ball, transforming cameras and points consistently. Returns the
/// transform for later de-normalization; composes with any transform already
/// applied.
pub fn normalize_scene(bundle: &mut SceneBundle) -> Result<Normalization, SceneError> {
    if bundle.points.is_empty() {
        return Err(SceneError::DegeneratePoints {
            detail: "no points to normalize against".into(),
        });
    }
    let mut center = [0.0; 3];
    for p in &bundle.points {
        center = geom::add(center, *p);
    }
    center = geom::scale(center, 1.0 / bundle.points.len() as f64);
    let max_dist = bundle
        .points
        .iter()
        .map(|p| geom::dist(*p, center))
        .fold(0.0f64, f64::max);
    if max_dist < 1e-12 {
        return Err(SceneError::DegeneratePoints {
            detail: "all points coincide".into(),
        });
    }
    let radius = 1.1 * max_dist;
    let scale = 1.0 / radius;
    let step = Normalization { center, scale };

    for p in &mut bundle.points {
        *p = step.apply(*p);
    }
    for cam in &mut bundle.cameras {
        // x_cam' = R x' + t' keeps pixel coordinates unchanged when
        // t' = scale * (t + R center).
        let rc = geom::mat_vec(&cam.rotation, center);
        cam.translation = geom::scale(geom::add(cam.translation, rc), scale);
    }
    // Compose with whatever was applied before.
    let prev = bundle.normalization;
    bundle.normalization = Normalization {
        center: geom::add(prev.center, geom::scale(step.center, 1.0 / prev.scale)),
        scale: prev.scale * step.scale,
    };
    Ok(bundle.normalization)
}

/// Plain text point list, one "x y z" triple per line.
pub fn read_xyz(path: &Path) -> Result<Vec<Vec3>, SceneError> {
    let text = fs::read_to_string(path).map_err(|source| SceneError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut toks = line.split_whitespace();
        let mut p = [0.0; 3];
        for (k, slot) in p.iter_mut().enumerate() {
            let tok = toks.next().ok_or_else(|| SceneError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                detail: format!("expected 3 coordinates, found {k}"),
            })?;
            *slot = tok.parse().map_err(|e| SceneError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                detail: format!("bad coordinate '{tok}': {e}"),
            })?;
        }
        out.push(p);
    }
    Ok(out)
}

pub fn write_xyz(path: &Path, points: &[Vec3]) -> Result<(), SceneError> {
    let mut text = String::new();
    for p in points {
        text.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    fs::write(path, text).map_err(|source| SceneError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Scene directory layout descriptor, read from `scene.conf`.
///
/// Recognized keys: `image_dir`, `model_dir`, `points_file` (XYZ alternative
/// to the model's 3D points), `gt_points` (reference surface samples for
/// evaluation), `shape` (analytic ground truth, e.g. `sphere 0 0 0 0.55`).
#[derive(Clone, Debug, Default)]
pub struct SceneConfig {
    pub image_dir: Option<PathBuf>,
    pub model_dir: Option<PathBuf>,
    pub points_file: Option<PathBuf>,
    pub gt_points: Option<PathBuf>,
    pub shape: Option<ShapeSpec>,
}

impl SceneConfig {
    pub fn parse(path: &Path) -> Result<Self, SceneError> {
        let text = fs::read_to_string(path).map_err(|source| SceneError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = SceneConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| SceneError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                detail: "expected key = value".into(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "image_dir" => cfg.image_dir = Some(base.join(value)),
                "model_dir" => cfg.model_dir = Some(base.join(value)),
                "points_file" => cfg.points_file = Some(base.join(value)),
                "gt_points" => cfg.gt_points = Some(base.join(value)),
                "shape" => {
                    cfg.shape =
                        Some(
                            ShapeSpec::parse(value).map_err(|detail| SceneError::Parse {
                                path: path.display().to_string(),
                                line: i + 1,
                                detail,
                            })?,
                        )
                }
                other => {
                    return Err(SceneError::Parse {
                        path: path.display().to_string(),
                        line: i + 1,
                        detail: format!("unknown key '{other}'"),
                    })
                }
            }
        }
        Ok(cfg)
    }
}

/// Load a scene directory: `scene.conf` names the image and model locations.
/// The returned bundle is in the original (un-normalized) frame.
pub fn load_scene(dir: &Path) -> Result<(SceneBundle, SceneConfig), SceneError> {
    let cfg = SceneConfig::parse(&dir.join("scene.conf"))?;
    let model_dir = cfg.model_dir.clone().ok_or_else(|| SceneError::Model {
        detail: "scene.conf does not set model_dir".into(),
    })?;
    let model = colmap::parse_model(&model_dir)?;
    let cameras = model.to_cameras()?;
    let image_dir = cfg.image_dir.clone().unwrap_or_else(|| dir.to_path_buf());
    let mut images = Vec::with_capacity(model.images.len());
    for im in &model.images {
        images.push(image::load_image(&image_dir.join(&im.name))?);
    }
    let (points, point_colors) = if let Some(pf) = &cfg.points_file {
        let pts = read_xyz(pf)?;
        let colors = vec![[0.5, 0.5, 0.5]; pts.len()];
        (pts, colors)
    } else {
        (
            model.points.iter().map(|p| p.xyz).collect(),
            model
                .points
                .iter()
                .map(|p| {
                    [
                        p.rgb[0] as f64 / 255.0,
                        p.rgb[1] as f64 / 255.0,
                        p.rgb[2] as f64 / 255.0,
                    ]
                })
                .collect(),
        )
    };
    let bundle = SceneBundle {
        images,
        cameras,
        points,
        point_colors,
        normalization: Normalization::identity(),
    };
    bundle.validate()?;
    Ok((bundle, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn dummy_bundle(points: Vec<Vec3>) -> SceneBundle {
        SceneBundle {
            images: Vec::new(),
            cameras: vec![Camera::look_at(
                [3.0, 1.0, 2.0],
                [0.0, 0.0, 0.0],
                [0.0, 0.0, 1.0],
                100.0,
                100.0,
                64,
                64,
            )],
            points,
            point_colors: Vec::new(),
            normalization: Normalization::identity(),
        }
    }

    #[test]
    fn normalization_centers_translated_cloud() {
        let mut pts = Vec::new();
        let mut rng = StdRng::seed_from_u64(1);
        for _ in 0..50 {
            pts.push([
                10.0 + rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            ]);
        }
        let mut bundle = dummy_bundle(pts);
        let norm = normalize_scene(&mut bundle).unwrap();
        let mut centroid = [0.0; 3];
        for p in &bundle.points {
            centroid = geom::add(centroid, *p);
        }
        centroid = geom::scale(centroid, 1.0 / bundle.points.len() as f64);
        assert!(geom::norm(centroid) < 1e-9);
        assert!((norm.center[0] - 10.0).abs() < 0.3);
        for p in &bundle.points {
            assert!(geom::norm(*p) <= 1.0 / 1.1 + 1e-9);
        }
    }

    #[test]
    fn normalization_near_identity_when_already_unit() {
        let mut pts = Vec::new();
        for i in 0..100 {
            let t = i as f64 * 0.0628;
            pts.push([0.95 * t.cos(), 0.95 * t.sin(), 0.0]);
        }
        let mut bundle = dummy_bundle(pts);
        let norm = normalize_scene(&mut bundle).unwrap();
        assert!(norm.scale > 0.9 && norm.scale <= 1.0, "scale {}", norm.scale);
    }

    #[test]
    fn projection_invariant_under_normalization() {
        let mut rng = StdRng::seed_from_u64(9);
        let mut pts = Vec::new();
        for _ in 0..40 {
            pts.push([
                rng.gen_range(-2.0..4.0),
                rng.gen_range(1.0..3.0),
                rng.gen_range(-1.0..1.0),
            ]);
        }
        let mut bundle = dummy_bundle(pts.clone());
        bundle.cameras[0] = Camera::look_at(
            [6.0, 5.0, 4.0],
            [1.0, 2.0, 0.0],
            [0.0, 0.0, 1.0],
            120.0,
            110.0,
            96,
            96,
        );
        let before: Vec<_> = pts
            .iter()
            .map(|p| bundle.cameras[0].project(*p))
            .collect();
        normalize_scene(&mut bundle).unwrap();
        for (p, orig) in bundle.points.iter().zip(before) {
            let now = bundle.cameras[0].project(*p);
            match (orig, now) {
                (Some((u0, v0, _)), Some((u1, v1, _))) => {
                    assert!((u0 - u1).abs() < 1e-6, "{u0} vs {u1}");
                    assert!((v0 - v1).abs() < 1e-6);
                }
                _ => panic!("visibility changed under normalization"),
            }
        }
    }

    #[test]
    fn pairwise_distance_ratios_preserved() {
        let mut rng = StdRng::seed_from_u64(4);
        let pts: Vec<Vec3> = (0..20)
            .map(|_| {
                [
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-3.0..3.0),
                ]
            })
            .collect();
        let mut bundle = dummy_bundle(pts.clone());
        normalize_scene(&mut bundle).unwrap();
        let d_before = geom::dist(pts[0], pts[1]);
        let ratio = geom::dist(bundle.points[0], bundle.points[1]) / d_before;
        for i in 0..19 {
            let r = geom::dist(bundle.points[i], bundle.points[i + 1])
                / geom::dist(pts[i], pts[i + 1]);
            assert!((r - ratio).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_points_rejected() {
        let mut bundle = dummy_bundle(vec![[1.0, 1.0, 1.0]; 30]);
        assert!(matches!(
            normalize_scene(&mut bundle),
            Err(SceneError::DegeneratePoints { .. })
        ));
    }

    #[test]
    fn normalization_round_trips_points() {
        let mut rng = StdRng::seed_from_u64(12);
        let pts: Vec<Vec3> = (0..10)
            .map(|_| {
                [
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                ]
            })
            .collect();
        let mut bundle = dummy_bundle(pts.clone());
        let norm = normalize_scene(&mut bundle).unwrap();
        for (orig, now) in pts.iter().zip(&bundle.points) {
            let back = norm.invert(*now);
            assert!(geom::dist(*orig, back) < 1e-9);
        }
    }

    #[test]
    fn xyz_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.xyz");
        let pts = vec![[0.25, -1.5, 3.0], [1e-10, 2.0, -0.125]];
        write_xyz(&path, &pts).unwrap();
        let back = read_xyz(&path).unwrap();
        assert_eq!(back, pts);
    }
}
