//! Linear RGB frame buffers, binary PPM I/O and PSNR comparison.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImgError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimMismatch(u32, u32, u32, u32),
    #[error("not a binary PPM: {0}")]
    BadFormat(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    /// Row-major linear RGB.
    pub data: Vec<[f64; 3]>,
}

impl Image {
    pub fn new(width: u32, height: u32) -> Self {
        Self { width, height, data: vec![[0.0; 3]; width as usize * height as usize] }
    }

    pub fn pixel(&self, x: u32, y: u32) -> [f64; 3] {
        self.data[(y * self.width + x) as usize]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [f64; 3]) {
        self.data[(y * self.width + x) as usize] = rgb;
    }

    /// 8-bit quantization, clamped to [0, 1]. No gamma is applied.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 3);
        for px in &self.data {
            for c in px {
                out.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<(), ImgError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(f, "P6\n{} {}\n255\n", self.width, self.height)?;
        f.write_all(&self.to_rgb8())?;
        Ok(())
    }

    pub fn read_ppm(path: &Path) -> Result<Self, ImgError> {
        let mut reader = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut header = Vec::new();
        // Magic, width, height, maxval separated by single whitespace bytes.
        let mut fields = Vec::new();
        while fields.len() < 4 {
            let mut buf = Vec::new();
            reader.read_until(b'\n', &mut buf)?;
            if buf.is_empty() {
                return Err(ImgError::BadFormat("truncated header".into()));
            }
            header.extend_from_slice(&buf);
            fields = String::from_utf8_lossy(&header)
                .split_whitespace()
                .map(str::to_owned)
                .collect();
        }
        if fields[0] != "P6" {
            return Err(ImgError::BadFormat(format!("magic {}", fields[0])));
        }
        let parse = |s: &str| s.parse::<u32>().map_err(|_| ImgError::BadFormat(s.into()));
        let width = parse(&fields[1])?;
        let height = parse(&fields[2])?;
        if fields[3] != "255" {
            return Err(ImgError::BadFormat(format!("maxval {}", fields[3])));
        }
        let mut raw = vec![0u8; width as usize * height as usize * 3];
        reader.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(3)
            .map(|c| {
                [
                    f64::from(c[0]) / 255.0,
                    f64::from(c[1]) / 255.0,
                    f64::from(c[2]) / 255.0,
                ]
            })
            .collect();
        Ok(Self { width, height, data })
    }
}

/// PSNR in dB over all RGB samples with MAX = 1.0. Identical images return
/// the +∞ sentinel.
pub fn compare_images(a: &Image, b: &Image) -> Result<f64, ImgError> {
    if a.width != b.width || a.height != b.height {
        return Err(ImgError::DimMismatch(a.width, a.height, b.width, b.height));
    }
    let mut sum_sq = 0.0f64;
    for (pa, pb) in a.data.iter().zip(&b.data) {
        for ch in 0..3 {
            let d = pa[ch] - pb[ch];
            sum_sq += d * d;
        }
    }
    let mse = sum_sq / (a.data.len() as f64 * 3.0);
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}

/// Largest absolute per-channel difference between two images.
pub fn max_channel_diff(a: &Image, b: &Image) -> Result<f64, ImgError> {
    if a.width != b.width || a.height != b.height {
        return Err(ImgError::DimMismatch(a.width, a.height, b.width, b.height));
    }
    let mut worst = 0.0f64;
    for (pa, pb) in a.data.iter().zip(&b.data) {
        for ch in 0..3 {
            worst = worst.max((pa[ch] - pb[ch]).abs());
        }
    }
    Ok(worst)
}
