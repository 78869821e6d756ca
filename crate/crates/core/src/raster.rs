//! Float RGB images and 8-bit PNG input/output.

use std::path::Path;

use image::{ColorType, ImageReader, RgbImage};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Decode { path: String, source: image::ImageError },
    #[error("{path}: unsupported {field} `{value}` (expected 8-bit RGB)")]
    Format { path: String, field: &'static str, value: String },
    #[error("image is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    Shape { got_w: usize, got_h: usize, want_w: usize, want_h: usize },
}

/// Row-major RGB image with channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
}

pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn from_byte(b: u8) -> f64 {
    b as f64 / 255.0
}

impl Image {
    pub fn new(width: usize, height: usize, fill: [f64; 3]) -> Self {
        Self {
            width,
            height,
            pixels: vec![fill; width * height],
        }
    }

    pub fn from_fn<F: FnMut(usize, usize) -> [f64; 3]>(width: usize, height: usize, mut f: F) -> Self {
        let pixels = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        Self { width, height, pixels }
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: [f64; 3]) {
        self.pixels[y * self.width + x] = v;
    }

    /// Bilinear lookup at continuous pixel coordinates (pixel centers at
    /// integer + 0.5), clamped to the border.
    pub fn sample(&self, x: f64, y: f64) -> [f64; 3] {
        let fx = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
        let (p00, p10, p01, p11) = (self.get(x0, y0), self.get(x1, y0), self.get(x0, y1), self.get(x1, y1));
        std::array::from_fn(|k| {
            (p00[k] * (1.0 - ax) + p10[k] * ax) * (1.0 - ay) + (p01[k] * (1.0 - ax) + p11[k] * ax) * ay
        })
    }

    /// Area-average downscale so the long side becomes `long_side` pixels.
    pub fn downscale(&self, long_side: usize) -> Image {
        let s = self.width.max(self.height) as f64 / long_side as f64;
        if s <= 1.0 {
            return self.clone();
        }
        let w = (self.width as f64 / s).round().max(1.0) as usize;
        let h = (self.height as f64 / s).round().max(1.0) as usize;
        let (sx, sy) = (self.width as f64 / w as f64, self.height as f64 / h as f64);
        Image::from_fn(w, h, |x, y| {
            let (x0, x1) = ((x as f64 * sx) as usize, (((x + 1) as f64 * sx).ceil() as usize).min(self.width));
            let (y0, y1) = ((y as f64 * sy) as usize, (((y + 1) as f64 * sy).ceil() as usize).min(self.height));
            let mut acc = [0.0; 3];
            for yy in y0..y1 {
                for xx in x0..x1 {
                    let p = self.get(xx, yy);
                    for k in 0..3 {
                        acc[k] += p[k];
                    }
                }
            }
            let n = ((x1 - x0) * (y1 - y0)) as f64;
            acc.map(|v| v / n)
        })
    }

    /// Quantize to 8 bits and back.
    pub fn quantized(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|p| p.map(|v| from_byte(to_byte(v)))).collect(),
        }
    }
}

pub fn load_png(path: &Path) -> Result<Image, RasterError> {
    let name = path.display().to_string();
    let reader = ImageReader::open(path)
        .map_err(|source| RasterError::Io { path: name.clone(), source })?
        .with_guessed_format()
        .map_err(|source| RasterError::Io { path: name.clone(), source })?;
    let img = reader.decode().map_err(|source| RasterError::Decode { path: name.clone(), source })?;
    match img.color() {
        ColorType::Rgb8 => {}
        other => {
            let field = if other.bytes_per_pixel() as usize / other.channel_count() as usize != 1 {
                "bit depth"
            } else {
                "color type"
            };
            return Err(RasterError::Format {
                path: name,
                field,
                value: format!("{other:?}"),
            });
        }
    }
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    Ok(Image::from_fn(w, h, |x, y| rgb.get_pixel(x as u32, y as u32).0.map(from_byte)))
}

pub fn save_png(img: &Image, path: &Path) -> Result<(), RasterError> {
    let name = path.display().to_string();
    let mut out = RgbImage::new(img.width as u32, img.height as u32);
    for (i, p) in img.pixels.iter().enumerate() {
        out.put_pixel((i % img.width) as u32, (i / img.width) as u32, image::Rgb(p.map(to_byte)));
    }
    out.save(path).map_err(|source| RasterError::Decode { path: name, source })
}

/// The bundled planar test photograph.
pub fn bundled_cat() -> Image {
    let bytes = include_bytes!("../assets/cat.png");
    let img = image::load_from_memory(bytes).expect("bundled asset decodes").to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Image::from_fn(w, h, |x, y| img.get_pixel(x as u32, y as u32).0.map(from_byte))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn byte_conversion_rule() {
        assert_eq!(to_byte(1.0), 255);
        assert_eq!(from_byte(255), 1.0);
        assert_eq!(to_byte(0.5), 128);
        assert_eq!(from_byte(to_byte(0.5)), 128.0 / 255.0);
        assert_eq!(to_byte(-0.2), 0);
        assert_eq!(to_byte(7.0), 255);
    }

    #[test]
    fn png_round_trip_is_exact_for_8bit_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = Image::from_fn(13, 7, |_, _| std::array::from_fn(|_| from_byte(rng.gen())));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        save_png(&img, &p).unwrap();
        assert_eq!(load_png(&p).unwrap(), img);
    }

    #[test]
    fn non_rgb_png_is_rejected_with_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        image::GrayImage::new(4, 4).save(&p).unwrap();
        let err = load_png(&p).unwrap_err();
        assert!(matches!(err, RasterError::Format { field: "color type", .. }), "{err}");
        let p16 = dir.path().join("d.png");
        image::ImageBuffer::<image::Rgb<u16>, Vec<u16>>::new(2, 2).save(&p16).unwrap();
        assert!(matches!(load_png(&p16).unwrap_err(), RasterError::Format { field: "bit depth", .. }));
    }

    #[test]
    fn bilinear_hits_pixel_centers_and_midpoints() {
        let img = Image::from_fn(2, 1, |x, _| [x as f64, 0.0, 1.0]);
        assert_eq!(img.sample(0.5, 0.5), [0.0, 0.0, 1.0]);
        assert_eq!(img.sample(1.5, 0.5), [1.0, 0.0, 1.0]);
        assert_eq!(img.sample(1.0, 0.5), [0.5, 0.0, 1.0]);
    }

    #[test]
    fn bundled_image_downscales_to_desk_size() {
        let cat = bundled_cat();
        assert_eq!((cat.width, cat.height), (451, 300));
        let small = cat.downscale(192);
        assert_eq!(small.width.max(small.height), 192);
    }
}
