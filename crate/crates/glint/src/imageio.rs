//! Image and table I/O: float images as PFM (little-endian, bottom-up),
//! display images as 8-bit PNG, metrics and loss logs as CSV.

use crate::err::{Error, Result};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Linear float image, row-major from the TOP-left (display order), RGB or
/// single channel.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl FloatImage {
    pub fn new(width: usize, height: usize, channels: usize) -> FloatImage {
        assert!(channels == 1 || channels == 3);
        FloatImage { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }
}

/// Write a PFM ("PF" color / "Pf" gray), scale −1.0 (little-endian), rows
/// bottom-up as the format requires.
pub fn write_pfm(path: &Path, img: &FloatImage) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let r: std::io::Result<()> = (|| {
        let magic = if img.channels == 3 { "PF" } else { "Pf" };
        write!(w, "{magic}\n{} {}\n-1.0\n", img.width, img.height)?;
        for y in (0..img.height).rev() {
            let row = &img.data
                [y * img.width * img.channels..(y + 1) * img.width * img.channels];
            for &v in row {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    })();
    r.map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<FloatImage> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |d: String| Error::parse("pfm", path, d);
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let channels = match line.trim() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(bad(format!("bad magic {other:?}"))),
    };
    let mut dims = String::new();
    r.read_line(&mut dims).map_err(|e| Error::io(path, e))?;
    let mut it = dims.split_whitespace();
    let width: usize = it
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("missing width".into()))?;
    let height: usize = it
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("missing height".into()))?;
    let mut scale_line = String::new();
    r.read_line(&mut scale_line).map_err(|e| Error::io(path, e))?;
    let scale: f32 =
        scale_line.trim().parse().map_err(|_| bad("bad scale".into()))?;
    if scale >= 0.0 {
        return Err(bad("big-endian PFM not supported".into()));
    }
    let n = width * height * channels;
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    let mut img = FloatImage::new(width, height, channels);
    for y in 0..height {
        let src_row = height - 1 - y;
        for i in 0..width * channels {
            let o = (src_row * width * channels + i) * 4;
            img.data[y * width * channels + i] =
                f32::from_le_bytes([buf[o], buf[o + 1], buf[o + 2], buf[o + 3]]);
        }
    }
    Ok(img)
}

/// Tone-map a linear image to display and write an 8-bit PNG.
pub fn write_png_tonemapped(path: &Path, img: &FloatImage) -> Result<()> {
    let mut bytes = Vec::with_capacity(img.width * img.height * 3);
    for y in 0..img.height {
        for x in 0..img.width {
            let p = img.pixel(x, y);
            for c in 0..3 {
                let v = p[if img.channels == 3 { c } else { 0 }];
                let t = crate::render::tonemap(v as f64);
                bytes.push((t * 255.0 + 0.5) as u8);
            }
        }
    }
    write_png_rgb8(path, img.width, img.height, &bytes)
}

/// Quantize an already-display-space image (values in [0,1]) to PNG;
/// single-channel images are written as gray.
pub fn write_png_display(path: &Path, img: &FloatImage) -> Result<()> {
    let mut bytes = Vec::with_capacity(img.width * img.height * 3);
    for y in 0..img.height {
        for x in 0..img.width {
            let p = img.pixel(x, y);
            for c in 0..3 {
                let v = p[if img.channels == 3 { c } else { 0 }].clamp(0.0, 1.0);
                bytes.push((v * 255.0 + 0.5) as u8);
            }
        }
    }
    write_png_rgb8(path, img.width, img.height, &bytes)
}

/// Write already-display-space bytes (len = w·h·3).
pub fn write_png_rgb8(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    assert_eq!(rgb.len(), width * height * 3);
    let img = image::RgbImage::from_raw(width as u32, height as u32, rgb.to_vec())
        .expect("buffer size checked");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

pub fn read_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((w, h, img.into_raw()))
}

/// Append-style CSV writer with a fixed header; rewrites atomically on save.
pub struct CsvLog {
    pub header: String,
    pub rows: Vec<String>,
}

impl CsvLog {
    pub fn new(header: &str) -> CsvLog {
        CsvLog { header: header.to_string(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: String) {
        self.rows.push(row);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::with_capacity(self.rows.len() * 32 + 64);
        out.push_str(&self.header);
        out.push('\n');
        for r in &self.rows {
            out.push_str(r);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<CsvLog> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::parse("csv", path, "empty file".to_string()))?
            .to_string();
        Ok(CsvLog { header, rows: lines.map(str::to_string).collect() })
    }
}
