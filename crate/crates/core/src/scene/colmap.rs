//! COLMAP sparse model, text layout only.
//!
//! `cameras.txt`: `CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]`
//! `images.txt`: two lines per image,
//!   `IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME` then the 2D point row
//!   (which this crate ignores and writes back empty).
//! `points3D.txt`: `POINT3D_ID X Y Z R G B ERROR TRACK[]`.
//!
//! Comment lines start with `#`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::camera::Camera;
use crate::geom::{self, Quat, Vec3};

use super::SceneError;

#[derive(Clone, Debug, PartialEq)]
pub struct ColmapCamera {
    pub id: u32,
    pub model: String,
    pub width: usize,
    pub height: usize,
    pub params: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ColmapImage {
    pub id: u32,
    /// World-to-camera rotation as (w, x, y, z).
    pub quat: Quat,
    pub translation: Vec3,
    pub camera_id: u32,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ColmapPoint {
    pub id: u64,
    pub xyz: Vec3,
    pub rgb: [u8; 3],
    pub error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ColmapModel {
    pub cameras: Vec<ColmapCamera>,
    pub images: Vec<ColmapImage>,
    pub points: Vec<ColmapPoint>,
}

impl ColmapModel {
    /// Instantiate pinhole cameras in image order. Supports PINHOLE
    /// (fx fy cx cy) and SIMPLE_PINHOLE (f cx cy).
    pub fn to_cameras(&self) -> Result<Vec<Camera>, SceneError> {
        let by_id: BTreeMap<u32, &ColmapCamera> =
            self.cameras.iter().map(|c| (c.id, c)).collect();
        let mut out = Vec::with_capacity(self.images.len());
        for img in &self.images {
            let cam = by_id
                .get(&img.camera_id)
                .ok_or_else(|| SceneError::Model {
                    detail: format!(
                        "image {} references missing camera {}",
                        img.id, img.camera_id
                    ),
                })?;
            let (fx, fy, cx, cy) = match cam.model.as_str() {
                "PINHOLE" => {
                    if cam.params.len() != 4 {
                        return Err(SceneError::Model {
                            detail: format!(
                                "PINHOLE camera {} needs 4 params, has {}",
                                cam.id,
                                cam.params.len()
                            ),
                        });
                    }
                    (cam.params[0], cam.params[1], cam.params[2], cam.params[3])
                }
                "SIMPLE_PINHOLE" => {
                    if cam.params.len() != 3 {
                        return Err(SceneError::Model {
                            detail: format!(
                                "SIMPLE_PINHOLE camera {} needs 3 params, has {}",
                                cam.id,
                                cam.params.len()
                            ),
                        });
                    }
                    (cam.params[0], cam.params[0], cam.params[1], cam.params[2])
                }
                other => {
                    return Err(SceneError::UnknownCameraModel {
                        model: other.to_string(),
                    })
                }
            };
            let camera = Camera {
                fx,
                fy,
                cx,
                cy,
                rotation: geom::quat_to_mat(img.quat),
                translation: img.translation,
                width: cam.width,
                height: cam.height,
            };
            camera.validate()?;
            out.push(camera);
        }
        Ok(out)
    }
}

struct LineParser<'a> {
    path: &'a Path,
    line_no: usize,
}

impl<'a> LineParser<'a> {
    fn err(&self, detail: impl Into<String>) -> SceneError {
        SceneError::Parse {
            path: self.path.display().to_string(),
            line: self.line_no,
            detail: detail.into(),
        }
    }

    fn field<T: std::str::FromStr>(&self, tok: Option<&str>, what: &str) -> Result<T, SceneError>
    where
        T::Err: std::fmt::Display,
    {
        let tok = tok.ok_or_else(|| self.err(format!("missing {what}")))?;
        tok.parse()
            .map_err(|e| self.err(format!("bad {what} '{tok}': {e}")))
    }
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

/// Parse a COLMAP text model directory containing cameras.txt, images.txt and
/// points3D.txt.
pub fn parse_model(dir: &Path) -> Result<ColmapModel, SceneError> {
    let read = |name: &str| -> Result<(std::path::PathBuf, String), SceneError> {
        let path = dir.join(name);
        let text = fs::read_to_string(&path).map_err(|source| SceneError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok((path, text))
    };

    let (cam_path, cam_text) = read("cameras.txt")?;
    let mut cameras = Vec::new();
    for (line_no, line) in content_lines(&cam_text) {
        let p = LineParser {
            path: &cam_path,
            line_no,
        };
        let mut toks = line.split_whitespace();
        let id = p.field(toks.next(), "CAMERA_ID")?;
        let model: String = p.field(toks.next(), "MODEL")?;
        let width = p.field(toks.next(), "WIDTH")?;
        let height = p.field(toks.next(), "HEIGHT")?;
        let mut params = Vec::new();
        for tok in toks {
            params.push(p.field(Some(tok), "camera parameter")?);
        }
        cameras.push(ColmapCamera {
            id,
            model,
            width,
            height,
            params,
        });
    }

    let (img_path, img_text) = read("images.txt")?;
    let mut images = Vec::new();
    {
        // Two-line records where the observation row may be completely
        // empty, so blank lines are only skippable while expecting a pose.
        let mut pending_pose = true;
        for (line_no, line) in img_text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())) {
            if line.starts_with('#') {
                continue;
            }
            if !pending_pose {
                // The 2D observation row; ignored.
                pending_pose = true;
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let p = LineParser {
                path: &img_path,
                line_no,
            };
            let mut toks = line.split_whitespace();
            let id = p.field(toks.next(), "IMAGE_ID")?;
            let qw = p.field(toks.next(), "QW")?;
            let qx = p.field(toks.next(), "QX")?;
            let qy = p.field(toks.next(), "QY")?;
            let qz = p.field(toks.next(), "QZ")?;
            let tx = p.field(toks.next(), "TX")?;
            let ty = p.field(toks.next(), "TY")?;
            let tz = p.field(toks.next(), "TZ")?;
            let camera_id = p.field(toks.next(), "CAMERA_ID")?;
            let name: String = p.field(toks.next(), "NAME")?;
            images.push(ColmapImage {
                id,
                quat: [qw, qx, qy, qz],
                translation: [tx, ty, tz],
                camera_id,
                name,
            });
            pending_pose = false;
        }
    }

    let (pt_path, pt_text) = read("points3D.txt")?;
    let mut points = Vec::new();
    for (line_no, line) in content_lines(&pt_text) {
        let p = LineParser {
            path: &pt_path,
            line_no,
        };
        let mut toks = line.split_whitespace();
        let id = p.field(toks.next(), "POINT3D_ID")?;
        let x = p.field(toks.next(), "X")?;
        let y = p.field(toks.next(), "Y")?;
        let z = p.field(toks.next(), "Z")?;
        let r: u16 = p.field(toks.next(), "R")?;
        let g: u16 = p.field(toks.next(), "G")?;
        let b: u16 = p.field(toks.next(), "B")?;
        if r > 255 || g > 255 || b > 255 {
            return Err(p.err(format!("color out of byte range: {r} {g} {b}")));
        }
        let error = p.field(toks.next(), "ERROR")?;
        // Remaining tokens form the track; validated as pairs but unused.
        let track: Vec<&str> = toks.collect();
        if track.len() % 2 != 0 {
            return Err(p.err("track must be (IMAGE_ID, POINT2D_IDX) pairs"));
        }
        points.push(ColmapPoint {
            id,
            xyz: [x, y, z],
            rgb: [r as u8, g as u8, b as u8],
            error,
        });
    }

    Ok(ColmapModel {
        cameras,
        images,
        points,
    })
}

/// Serialize a model back into COLMAP text layout. Floats are written with
/// shortest round-trip formatting, so parse -> write -> parse is lossless.
pub fn write_model(dir: &Path, model: &ColmapModel) -> Result<(), SceneError> {
    fs::create_dir_all(dir).map_err(|source| SceneError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let write = |name: &str, text: String| -> Result<(), SceneError> {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|source| SceneError::Io {
            path: path.display().to_string(),
            source,
        })
    };

    let mut cams = String::from("# Camera list: CAMERA_ID MODEL WIDTH HEIGHT PARAMS[]\n");
    for c in &model.cameras {
        write!(cams, "{} {} {} {}", c.id, c.model, c.width, c.height).unwrap();
        for p in &c.params {
            write!(cams, " {p}").unwrap();
        }
        cams.push('\n');
    }
    write("cameras.txt", cams)?;

    let mut imgs =
        String::from("# Image list: IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME\n#   POINTS2D[]\n");
    for i in &model.images {
        writeln!(
            imgs,
            "{} {} {} {} {} {} {} {} {} {}",
            i.id,
            i.quat[0],
            i.quat[1],
            i.quat[2],
            i.quat[3],
            i.translation[0],
            i.translation[1],
            i.translation[2],
            i.camera_id,
            i.name
        )
        .unwrap();
        imgs.push('\n'); // empty observations row
    }
    write("images.txt", imgs)?;

    let mut pts = String::from("# 3D point list: POINT3D_ID X Y Z R G B ERROR TRACK[]\n");
    for p in &model.points {
        writeln!(
            pts,
            "{} {} {} {} {} {} {} {}",
            p.id, p.xyz[0], p.xyz[1], p.xyz[2], p.rgb[0], p.rgb[1], p.rgb[2], p.error
        )
        .unwrap();
    }
    write("points3D.txt", pts)
}
