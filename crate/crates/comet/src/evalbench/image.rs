//! RGB raster images with a native binary PPM (P6) codec.
//!
//! PPM was chosen because it is trivially bit-exact: no compression, no
//! metadata, no external decoder. Benchmark imagery in other formats has to
//! be transcoded before it can be ingested.

use std::io::{Read, Write};
use std::path::Path;

use crate::boxgeom::CropSpec;
use crate::diffcore::Tensor;
use crate::{Error, Result};

/// 8-bit RGB image, row-major, interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image { width, height, data: vec![0; width * height * 3] }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Sequence(format!(
                "raw image buffer has {} bytes, expected {} for {}x{}",
                data.len(),
                width * height * 3,
                width,
                height
            )));
        }
        Ok(Image { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn raw(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn fill(&mut self, rgb: [u8; 3]) {
        for px in self.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
    }

    /// Fills every pixel whose center lies inside `[x, x+w) x [y, y+h)`.
    /// Regions extending past the frame are clipped.
    pub fn fill_rect(&mut self, x: f64, y: f64, w: f64, h: f64, rgb: [u8; 3]) {
        if w <= 0.0 || h <= 0.0 {
            return;
        }
        let x0 = (x - 0.5).ceil().max(0.0) as usize;
        let y0 = (y - 0.5).ceil().max(0.0) as usize;
        let x1 = ((x + w - 0.5).ceil().max(0.0) as usize).min(self.width);
        let y1 = ((y + h - 0.5).ceil().max(0.0) as usize).min(self.height);
        for py in y0..y1 {
            for px in x0..x1 {
                self.put(px, py, rgb);
            }
        }
    }

    /// Luma plane in [0,1] (Rec. 601 weights), row-major.
    pub fn to_gray(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0)
            .collect()
    }

    pub fn write_ppm_to<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.data)?;
        Ok(())
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut buf = std::io::BufWriter::new(file);
        self.write_ppm_to(&mut buf)?;
        buf.flush()?;
        Ok(())
    }

    pub fn read_ppm_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        parse_ppm(&bytes)
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Sequence(format!("{}: {e}", path.display())))?;
        parse_ppm(&bytes).map_err(|e| Error::Sequence(format!("{}: {e}", path.display())))
    }
}

/// Reads the next ASCII integer from a PPM header, skipping whitespace and
/// `#` comments.
fn next_header_int(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if *pos == start {
        return Err(Error::Sequence("malformed PPM header".to_string()));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .unwrap()
        .parse::<usize>()
        .map_err(|e| Error::Sequence(format!("malformed PPM header: {e}")))
}

fn parse_ppm(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        let magic = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(Error::Sequence(format!(
            "unsupported image magic {magic:?}, only binary PPM (P6) is supported"
        )));
    }
    let mut pos = 2;
    let width = next_header_int(bytes, &mut pos)?;
    let height = next_header_int(bytes, &mut pos)?;
    let maxval = next_header_int(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(Error::Sequence(format!("PPM maxval {maxval} unsupported, expected 255")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Sequence("missing separator after PPM header".to_string()));
    }
    pos += 1;
    let need = width * height * 3;
    let rest = &bytes[pos..];
    if rest.len() != need {
        return Err(Error::Sequence(format!(
            "PPM raster has {} bytes, expected {need} for {width}x{height}",
            rest.len()
        )));
    }
    Image::from_raw(width, height, rest.to_vec())
}

/// Bilinear sample of one channel at continuous pixel-index coordinates,
/// with zero padding outside the frame.
fn sample_channel(img: &Image, c: usize, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let mut acc = 0.0;
    for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
            let px = x0 as i64 + dx;
            let py = y0 as i64 + dy;
            if px >= 0 && py >= 0 && (px as usize) < img.width && (py as usize) < img.height {
                let v = img.get(px as usize, py as usize)[c] as f64 / 255.0;
                acc += wx * wy * v;
            }
        }
    }
    acc
}

/// Resamples the square window described by `spec` into a `(3, S, S)`
/// tensor with values in [0,1]. Out-of-frame area reads as zero.
pub fn extract_patch(img: &Image, spec: &CropSpec) -> Tensor {
    let s = spec.out_size;
    let (ox, oy) = spec.origin();
    let inv_scale = 1.0 / spec.scale();
    let mut out = Tensor::zeros(&[3, s, s]);
    {
        let data = out.data_mut();
        for c in 0..3 {
            for i in 0..s {
                // Map output pixel centers into frame space, then into
                // pixel-index space (pixel (0,0) is centered at 0.5).
                let yf = oy + (i as f64 + 0.5) * inv_scale - 0.5;
                for j in 0..s {
                    let xf = ox + (j as f64 + 0.5) * inv_scale - 0.5;
                    data[(c * s + i) * s + j] = sample_channel(img, c, xf, yf);
                }
            }
        }
    }
    out
}
