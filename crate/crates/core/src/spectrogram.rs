//! dB grayscale mapping from STFT magnitudes to detector input images, and its
//! derivative back onto the magnitude matrix.

use std::f64::consts::LN_10;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::stft::{MagnitudeMatrix, RealMatrix};

/// Dynamic range used when freezing a mapping from a clean signal.
pub const DEFAULT_RANGE_DB: f64 = 80.0;
pub const DEFAULT_EPSILON: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DbMapping {
    pub db_min: f64,
    pub db_max: f64,
    pub epsilon: f64,
}

impl DbMapping {
    pub fn new(db_min: f64, db_max: f64, epsilon: f64) -> Result<Self> {
        let m = Self {
            db_min,
            db_max,
            epsilon,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.db_max > self.db_min) || !(self.epsilon > 0.0) || !self.db_min.is_finite() || !self.db_max.is_finite() {
            return Err(Error::Config(format!("invalid dB mapping {self:?}")));
        }
        Ok(())
    }

    /// (max_db - 80, max_db) over the displayed bins of `mag`.
    pub fn from_magnitude(mag: &MagnitudeMatrix) -> Self {
        let half = mag.bins() / 2;
        let mut peak: f64 = 0.0;
        for m in 0..mag.frames() {
            for k in 0..half {
                peak = peak.max(mag.get(k, m));
            }
        }
        let db_max = 20.0 * (peak + DEFAULT_EPSILON).log10();
        Self {
            db_min: db_max - DEFAULT_RANGE_DB,
            db_max,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn range(&self) -> f64 {
        self.db_max - self.db_min
    }

    /// Unclamped pixel value of one magnitude.
    #[inline]
    pub fn raw_pixel(&self, mag: f64) -> f64 {
        (20.0 * (mag + self.epsilon).log10() - self.db_min) / self.range()
    }

    /// Magnitude whose unclamped pixel value is `p`.
    pub fn magnitude_for_pixel(&self, p: f64) -> f64 {
        10f64.powf((self.db_min + p * self.range()) / 20.0) - self.epsilon
    }
}

/// H x W image in [0, 1], row-major, row 0 = highest displayed frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrogramImage {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
    pub mapping: DbMapping,
}

impl SpectrogramImage {
    pub fn from_pixels(height: usize, width: usize, pixels: Vec<f64>, mapping: DbMapping) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Dimension(format!(
                "{} pixels for {height}x{width}",
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
            mapping,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    /// 8-bit binary PGM (P5), pixel = round(255 * value).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5 {} {} 255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().map(|&p| (255.0 * p.clamp(0.0, 1.0)).round() as u8));
        out
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_pgm()).map_err(|e| Error::io(path, e))
    }
}

/// Maps bins 0..N/2 of `mag` to a grayscale image through the dB scale.
pub fn to_grayscale(mag: &MagnitudeMatrix, mapping: &DbMapping) -> SpectrogramImage {
    let h = mag.bins() / 2;
    let w = mag.frames();
    let mut pixels = vec![0.0; h * w];
    for m in 0..w {
        for k in 0..h {
            let row = h - 1 - k;
            pixels[row * w + m] = mapping.raw_pixel(mag.get(k, m)).clamp(0.0, 1.0);
        }
    }
    SpectrogramImage {
        height: h,
        width: w,
        pixels,
        mapping: *mapping,
    }
}

/// Chains an image-space gradient back onto the full K x M magnitude matrix.
///
/// Saturated pixels pass no gradient. Bins above N/2 are not displayed; the
/// result is mirrored onto them (and the Nyquist bin zeroed) so that a step
/// along it keeps the magnitude matrix conjugate-symmetric.
pub fn grayscale_grad(mag: &MagnitudeMatrix, mapping: &DbMapping, upstream: &[f64]) -> Result<RealMatrix> {
    let h = mag.bins() / 2;
    let w = mag.frames();
    if upstream.len() != h * w {
        return Err(Error::Dimension(format!(
            "upstream gradient has {} entries, image is {h}x{w}",
            upstream.len()
        )));
    }
    let scale = 20.0 / (LN_10 * mapping.range());
    let mut grad = RealMatrix::zeros(mag.bins(), w);
    for m in 0..w {
        for k in 0..h {
            let a = mag.get(k, m);
            let p = mapping.raw_pixel(a);
            if p > 0.0 && p < 1.0 {
                let row = h - 1 - k;
                grad.set(k, m, upstream[row * w + m] * scale / (a + mapping.epsilon));
            }
        }
    }
    grad.mirror_positive_half();
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mapping() -> DbMapping {
        DbMapping::new(-60.0, 20.0, 1e-10).unwrap()
    }

    fn mag(bins: usize, frames: usize, f: impl Fn(usize, usize) -> f64) -> MagnitudeMatrix {
        let mut m = RealMatrix::zeros(bins, frames);
        for j in 0..frames {
            for k in 0..bins {
                m.set(k, j, f(k, j));
            }
        }
        MagnitudeMatrix::new(m).unwrap()
    }

    #[test]
    fn saturation_and_midpoint() {
        let map = mapping();
        let top = map.magnitude_for_pixel(1.0);
        let img = to_grayscale(&mag(8, 2, |_, _| top), &map);
        assert!(img.pixels().iter().all(|&p| (p - 1.0).abs() < 1e-12));
        let img = to_grayscale(&mag(8, 2, |_, _| 0.0), &map);
        assert!(img.pixels().iter().all(|&p| p == 0.0));
        let mid = map.magnitude_for_pixel(0.5);
        let img = to_grayscale(&mag(8, 2, |_, _| mid), &map);
        assert!(img.pixels().iter().all(|&p| (p - 0.5).abs() < 1e-12));
    }

    #[test]
    fn rows_are_frequency_flipped() {
        let map = mapping();
        let hi = map.magnitude_for_pixel(0.9);
        let img = to_grayscale(&mag(8, 3, |k, _| if k == 0 { hi } else { 0.0 }), &map);
        assert_eq!(img.height(), 4);
        assert!((img.get(3, 1) - 0.9).abs() < 1e-12);
        assert_eq!(img.get(0, 1), 0.0);
    }

    #[test]
    fn clamped_pixels_have_zero_gradient() {
        let map = mapping();
        let m = mag(8, 1, |k, _| if k == 1 { 1e-9 } else { 1e6 });
        let g = grayscale_grad(&m, &map, &[1.0; 4]).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_bin_closed_form() {
        let map = mapping();
        let a = 0.37;
        let m = mag(8, 1, |k, _| if k == 2 { a } else { 0.0 });
        let mut up = vec![0.0; 4];
        up[1] = 1.0; // row 1 <-> bin 2
        let g = grayscale_grad(&m, &map, &up).unwrap();
        let expect = 20.0 / ((a + 1e-10) * LN_10 * 80.0);
        assert!((g.get(2, 0) - expect).abs() < 1e-12 * expect);
        assert_eq!(g.get(6, 0), g.get(2, 0));
        assert_eq!(g.get(4, 0), 0.0);
    }

    #[test]
    fn dimension_mismatch() {
        let m = mag(8, 2, |_, _| 1.0);
        assert!(grayscale_grad(&m, &mapping(), &[0.0; 3]).is_err());
    }

    #[test]
    fn pgm_header() {
        let img = SpectrogramImage::from_pixels(2, 3, vec![0.0, 0.5, 1.0, 1.0, 0.25, 0.0], mapping()).unwrap();
        let bytes = img.to_pgm();
        let header = b"P5 3 2 255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[0, 128, 255, 255, 64, 0]);
    }
}
