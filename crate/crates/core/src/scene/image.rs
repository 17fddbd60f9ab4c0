//! RGB images in [0, 1] with PPM (P6) and PNG IO.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::autodiff::Tensor;

use super::SceneError;

#[derive(Clone, Debug)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// RGB interleaved, row-major, values in [0, 1].
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i] = rgb[0];
        self.data[i + 1] = rgb[1];
        self.data[i + 2] = rgb[2];
    }

    /// Bilinear color lookup at continuous pixel coordinates.
    pub fn sample(&self, u: f64, v: f64) -> [f64; 3] {
        let x = u.clamp(0.0, (self.width - 1) as f64);
        let y = v.clamp(0.0, (self.height - 1) as f64);
        let x0 = (x.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (y.floor() as usize).min(self.height.saturating_sub(2));
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let mut out = [0.0; 3];
        let p00 = self.pixel(x0, y0);
        let p01 = self.pixel(x0 + 1, y0);
        let p10 = self.pixel(x0, y0 + 1);
        let p11 = self.pixel(x0 + 1, y0 + 1);
        for c in 0..3 {
            out[c] = (1.0 - fy) * ((1.0 - fx) * p00[c] + fx * p01[c])
                + fy * ((1.0 - fx) * p10[c] + fx * p11[c]);
        }
        out
    }

    /// Grayscale [H x W] tensor (mean of channels).
    pub fn gray_tensor(&self) -> Tensor {
        let mut t = Tensor::zeros(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                let p = self.pixel(x, y);
                t.set(y, x, (p[0] + p[1] + p[2]) / 3.0);
            }
        }
        t
    }

    /// Single color channel as an [H x W] tensor.
    pub fn channel_tensor(&self, c: usize) -> Tensor {
        let mut t = Tensor::zeros(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                t.set(y, x, self.pixel(x, y)[c]);
            }
        }
        t
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Binary PPM (P6), maxval 255.
pub fn write_ppm(path: &Path, image: &Image) -> Result<(), SceneError> {
    let io_err = |source| SceneError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut buf = Vec::with_capacity(32 + image.width * image.height * 3);
    write!(buf, "P6\n{} {}\n255\n", image.width, image.height).map_err(io_err)?;
    for v in image.data() {
        buf.push((v.clamp(0.0, 1.0) * 255.0 + 0.5) as u8);
    }
    fs::write(path, buf).map_err(io_err)
}

pub fn read_ppm(path: &Path) -> Result<Image, SceneError> {
    let bytes = fs::read(path).map_err(|source| SceneError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_ppm(&bytes).map_err(|detail| SceneError::Parse {
        path: path.display().to_string(),
        line: 0,
        detail,
    })
}

fn parse_ppm(bytes: &[u8]) -> Result<Image, String> {
    let mut pos = 0;
    let mut token = || -> Result<String, String> {
        // Skip whitespace and comments.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("unexpected end of header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err("not a P6 ppm".into());
    }
    let width: usize = token()?.parse().map_err(|e| format!("width: {e}"))?;
    let height: usize = token()?.parse().map_err(|e| format!("height: {e}"))?;
    let maxval: usize = token()?.parse().map_err(|e| format!("maxval: {e}"))?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}, expected 255"));
    }
    // Exactly one whitespace byte separates header and raster.
    pos += 1;
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(format!(
            "raster truncated: need {need} bytes, have {}",
            bytes.len().saturating_sub(pos)
        ));
    }
    let mut img = Image::new(width, height);
    for (dst, &src) in img.data.iter_mut().zip(&bytes[pos..pos + need]) {
        *dst = src as f64 / 255.0;
    }
    Ok(img)
}

/// Load by extension: `.ppm` through the native parser, `.png` via the image
/// crate. Values come back in [0, 1].
pub fn load_image(path: &Path) -> Result<Image, SceneError> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    match ext.as_str() {
        "ppm" => read_ppm(path),
        "png" => {
            let decoded = image::open(path).map_err(|e| SceneError::Parse {
                path: path.display().to_string(),
                line: 0,
                detail: e.to_string(),
            })?;
            let rgb = decoded.to_rgb8();
            let mut img = Image::new(rgb.width() as usize, rgb.height() as usize);
            for (i, px) in rgb.pixels().enumerate() {
                img.data[i * 3] = px.0[0] as f64 / 255.0;
                img.data[i * 3 + 1] = px.0[1] as f64 / 255.0;
                img.data[i * 3 + 2] = px.0[2] as f64 / 255.0;
            }
            Ok(img)
        }
        other => Err(SceneError::Parse {
            path: path.display().to_string(),
            line: 0,
            detail: format!("unsupported image extension '{other}' (ppm or png)"),
        }),
    }
}

pub fn save_png(path: &Path, image: &Image) -> Result<(), SceneError> {
    let mut out = image::RgbImage::new(image.width as u32, image.height as u32);
    for y in 0..image.height {
        for x in 0..image.width {
            let p = image.pixel(x, y);
            out.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    (p[0].clamp(0.0, 1.0) * 255.0 + 0.5) as u8,
                    (p[1].clamp(0.0, 1.0) * 255.0 + 0.5) as u8,
                    (p[2].clamp(0.0, 1.0) * 255.0 + 0.5) as u8,
                ]),
            );
        }
    }
    out.save(path).map_err(|e| SceneError::Parse {
        path: path.display().to_string(),
        line: 0,
        detail: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_fixture_exact_bytes() {
        // 2x2 P6 with known bytes.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ppm");
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[
            255, 0, 0, /* red */ 0, 255, 0, /* green */
            0, 0, 255, /* blue */ 255, 255, 255, /* white */
        ]);
        std::fs::write(&path, bytes).unwrap();
        let img = read_ppm(&path).unwrap();
        assert_eq!((img.width, img.height), (2, 2));
        assert_eq!(img.pixel(0, 0), [1.0, 0.0, 0.0]);
        assert_eq!(img.pixel(1, 0), [0.0, 1.0, 0.0]);
        assert_eq!(img.pixel(0, 1), [0.0, 0.0, 1.0]);
        assert_eq!(img.pixel(1, 1), [1.0, 1.0, 1.0]);
    }

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.ppm");
        let mut img = Image::new(3, 2);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i as f64 * 17.0 % 256.0) / 255.0;
        }
        write_ppm(&path, &img).unwrap();
        let back = read_ppm(&path).unwrap();
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn truncated_ppm_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ppm");
        std::fs::write(&path, b"P6\n4 4\n255\nxx").unwrap();
        assert!(read_ppm(&path).is_err());
    }

    #[test]
    fn missing_file_error_carries_path() {
        let err = load_image(Path::new("/nonexistent/q.ppm")).unwrap_err();
        assert!(err.to_string().contains("q.ppm"));
    }
}
