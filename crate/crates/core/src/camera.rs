//! Pinhole cameras and rays.
//!
//! World-to-camera convention: `x_cam = R x_world + t`, pixels
//! `u = fx X/Z + cx`, `v = fy Y/Z + cy`, with pixel (i, j) centered at
//! continuous coordinates (j + 0.5, i + 0.5).

use thiserror::Error;

use crate::geom::{self, Mat3, Vec3};

#[derive(Debug, Error)]
pub enum CameraError {
    #[error("rotation is not orthonormal with det +1 (defect {defect:.2e})")]
    BadRotation { defect: f64 },
    #[error("focal lengths must be positive, got fx={fx}, fy={fy}")]
    BadFocal { fx: f64, fy: f64 },
    #[error("principal point ({cx}, {cy}) outside image {width}x{height}")]
    PrincipalPointOutside {
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    },
}

#[derive(Clone, Debug)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation.
    pub rotation: Mat3,
    /// World-to-camera translation.
    pub translation: Vec3,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn validate(&self) -> Result<(), CameraError> {
        let defect = geom::rotation_defect(&self.rotation);
        if defect > 1e-6 {
            return Err(CameraError::BadRotation { defect });
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(CameraError::BadFocal {
                fx: self.fx,
                fy: self.fy,
            });
        }
        if self.cx < 0.0
            || self.cx > self.width as f64
            || self.cy < 0.0
            || self.cy > self.height as f64
        {
            return Err(CameraError::PrincipalPointOutside {
                cx: self.cx,
                cy: self.cy,
                width: self.width,
                height: self.height,
            });
        }
        Ok(())
    }

    /// Camera center in world coordinates: -R^T t.
    pub fn center(&self) -> Vec3 {
        geom::scale(geom::mat_tvec(&self.rotation, self.translation), -1.0)
    }

    /// Optical axis direction in world coordinates.
    pub fn forward(&self) -> Vec3 {
        geom::mat_tvec(&self.rotation, [0.0, 0.0, 1.0])
    }

    /// Ray through a continuous pixel coordinate; origin is the camera
    /// center, direction is unit length.
    pub fn ray(&self, u: f64, v: f64) -> Ray {
        let dir_cam = [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0];
        let dir = geom::normalize(geom::mat_tvec(&self.rotation, dir_cam));
        Ray {
            origin: self.center(),
            dir,
            near: 0.0,
            far: f64::INFINITY,
        }
    }

    /// Project a world point. Returns (u, v, depth); `None` when the point is
    /// behind the camera (depth <= 1e-6).
    pub fn project(&self, p: Vec3) -> Option<(f64, f64, f64)> {
        let c = geom::add(geom::mat_vec(&self.rotation, p), self.translation);
        if c[2] <= 1e-6 {
            return None;
        }
        Some((
            self.fx * c[0] / c[2] + self.cx,
            self.fy * c[1] / c[2] + self.cy,
            c[2],
        ))
    }

    pub fn contains_pixel(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }

    /// Camera with intrinsics and image size divided by `stride`.
    pub fn downscaled(&self, stride: usize) -> Camera {
        let s = stride as f64;
        Camera {
            fx: self.fx / s,
            fy: self.fy / s,
            cx: self.cx / s,
            cy: self.cy / s,
            rotation: self.rotation,
            translation: self.translation,
            width: self.width.div_ceil(stride),
            height: self.height.div_ceil(stride),
        }
    }

    /// Look-at constructor: camera at `eye` looking toward `target`.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
    ) -> Camera {
        let fwd = geom::normalize(geom::sub(target, eye));
        let right = geom::normalize(geom::cross(fwd, up));
        let down = geom::cross(fwd, right);
        // Camera axes become the rows of the world-to-camera rotation.
        let rotation = [right, down, fwd];
        let translation = geom::scale(geom::mat_vec(&rotation, eye), -1.0);
        Camera {
            fx,
            fy,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            rotation,
            translation,
            width,
            height,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit direction.
    pub dir: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        geom::add(self.origin, geom::scale(self.dir, t))
    }

    /// Restrict [near, far] to the intersection with a centered ball.
    /// Returns false when the ray misses the ball entirely.
    pub fn clip_to_ball(&mut self, radius: f64) -> bool {
        let b = geom::dot(self.origin, self.dir);
        let c = geom::dot(self.origin, self.origin) - radius * radius;
        let disc = b * b - c;
        if disc <= 0.0 {
            return false;
        }
        let sq = disc.sqrt();
        let t0 = (-b - sq).max(1e-4);
        let t1 = -b + sq;
        if t1 <= t0 {
            return false;
        }
        self.near = t0;
        self.far = t1;
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::normalize;

    fn identity_camera() -> Camera {
        Camera {
            fx: 100.0,
            fy: 100.0,
            cx: 50.0,
            cy: 50.0,
            rotation: geom::IDENTITY,
            translation: [0.0, 0.0, 0.0],
            width: 100,
            height: 100,
        }
    }

    #[test]
    fn principal_point_ray_is_optical_axis() {
        let cam = identity_camera();
        let ray = cam.ray(50.0, 50.0);
        assert_eq!(ray.dir, [0.0, 0.0, 1.0]);
        assert_eq!(ray.origin, [0.0, 0.0, 0.0]);
    }

    #[test]
    fn pinhole_ray_direction() {
        let cam = identity_camera();
        let ray = cam.ray(70.0, 50.0);
        let expected = normalize([0.2, 0.0, 1.0]);
        for i in 0..3 {
            assert!((ray.dir[i] - expected[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn ray_projects_back_to_pixel() {
        let mut cam = identity_camera();
        cam.rotation = geom::quat_to_mat(geom::quat_normalize([0.9, 0.2, -0.1, 0.3]));
        cam.translation = [0.3, -0.2, 1.5];
        for &(u, v) in &[(12.25, 80.5), (50.0, 50.0), (99.0, 3.5)] {
            let ray = cam.ray(u, v);
            for &t in &[0.5, 2.0, 7.3] {
                let (pu, pv, depth) = cam.project(ray.at(t)).expect("in front");
                assert!((pu - u).abs() < 1e-9, "u: {pu} vs {u}");
                assert!((pv - v).abs() < 1e-9);
                assert!(depth > 0.0);
            }
        }
    }

    #[test]
    fn projection_examples() {
        let cam = identity_camera();
        let (u, v, d) = cam.project([0.0, 0.0, 5.0]).unwrap();
        assert_eq!((u, v, d), (50.0, 50.0, 5.0));
        let (u, v, _) = cam.project([1.0, 0.0, 5.0]).unwrap();
        assert_eq!((u, v), (70.0, 50.0));
        assert!(cam.project([0.0, 0.0, -1.0]).is_none());
    }

    #[test]
    fn look_at_is_valid_and_centers_target() {
        let cam = Camera::look_at(
            [2.0, 1.0, 1.5],
            [0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0],
            120.0,
            120.0,
            96,
            96,
        );
        cam.validate().unwrap();
        let (u, v, d) = cam.project([0.0, 0.0, 0.0]).unwrap();
        assert!((u - 48.0).abs() < 1e-9);
        assert!((v - 48.0).abs() < 1e-9);
        assert!((d - geom::norm([2.0, 1.0, 1.5])).abs() < 1e-12);
        let c = cam.center();
        for (a, b) in c.iter().zip([2.0, 1.0, 1.5]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ball_clipping() {
        let cam = identity_camera();
        let mut ray = cam.ray(50.0, 50.0);
        ray.origin = [0.0, 0.0, -3.0];
        assert!(ray.clip_to_ball(1.3));
        assert!((ray.near - 1.7).abs() < 1e-12);
        assert!((ray.far - 4.3).abs() < 1e-12);
        let mut miss = ray;
        miss.origin = [5.0, 0.0, -3.0];
        assert!(!miss.clip_to_ball(1.3));
    }
}
