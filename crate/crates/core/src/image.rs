//! 8-bit RGB images, binary masks, and their binary PNM encodings
//! (P6 pixmaps for images, P5 graymaps with values 0/255 for masks).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::shape("rgb_image", format!("{} bytes for {width}×{height}×3", data.len())));
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        RgbImage { width, height, data }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let o = (row * self.width + col) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// Values scaled to `[0, 1]`, HWC order.
    pub fn to_unit(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64 / 255.0).collect()
    }

    pub fn resize_bilinear(&self, width: usize, height: usize) -> RgbImage {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let xs = axis_taps(self.width, width);
        let ys = axis_taps(self.height, height);
        let mut data = Vec::with_capacity(width * height * 3);
        let at = |r: usize, c: usize, ch: usize| self.data[(r * self.width + c) * 3 + ch] as f64;
        for &(r0, r1, fr) in &ys {
            for &(c0, c1, fc) in &xs {
                for ch in 0..3 {
                    let top = at(r0, c0, ch) * (1.0 - fc) + at(r0, c1, ch) * fc;
                    let bot = at(r1, c0, ch) * (1.0 - fc) + at(r1, c1, ch) * fc;
                    data.push((top * (1.0 - fr) + bot * fr).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        RgbImage { width, height, data }
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        let mut bytes = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        bytes.extend_from_slice(&self.data);
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (width, height, data) = parse_pnm(path, &bytes, b"P6", 3)?;
        Ok(RgbImage { width, height, data: data.to_vec() })
    }
}

/// Binary mask, one byte per pixel holding 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::shape("mask", format!("{} values for {width}×{height}", data.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Data("mask values must be 0 or 1".into()));
        }
        Ok(Mask { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Mask { width, height, data: vec![0; width * height] }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn coverage(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    /// Nearest-neighbour resize. If the source has foreground but every
    /// sample misses it, the pixel under the foreground centroid is set so
    /// the mask stays nonempty.
    pub fn resize_nearest(&self, width: usize, height: usize) -> Mask {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let xs: Vec<usize> = (0..width).map(|c| nearest(self.width, width, c)).collect();
        let ys: Vec<usize> = (0..height).map(|r| nearest(self.height, height, r)).collect();
        let mut data = Vec::with_capacity(width * height);
        for &r in &ys {
            for &c in &xs {
                data.push(self.data[r * self.width + c]);
            }
        }
        let mut out = Mask { width, height, data };
        let n = self.count();
        if n > 0 && out.count() == 0 {
            let (mut sr, mut sc) = (0.0, 0.0);
            for r in 0..self.height {
                for c in 0..self.width {
                    if self.get(r, c) {
                        sr += r as f64 + 0.5;
                        sc += c as f64 + 0.5;
                    }
                }
            }
            let r = ((sr / n as f64) * height as f64 / self.height as f64) as usize;
            let c = ((sc / n as f64) * width as f64 / self.width as f64) as usize;
            out.data[r.min(height - 1) * width + c.min(width - 1)] = 1;
        }
        out
    }

    pub fn save_pgm(&self, path: &Path) -> Result<()> {
        let mut bytes = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        bytes.extend(self.data.iter().map(|&v| if v != 0 { 255u8 } else { 0 }));
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Loads a P5 graymap whose pixels are all 0 or 255.
    pub fn load_pgm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (width, height, raw) = parse_pnm(path, &bytes, b"P5", 1)?;
        if let Some(&value) = raw.iter().find(|&&v| v != 0 && v != 255) {
            return Err(Error::MaskDomain { path: path.into(), value });
        }
        Ok(Mask { width, height, data: raw.iter().map(|&v| u8::from(v == 255)).collect() })
    }
}

fn nearest(src: usize, dst: usize, i: usize) -> usize {
    let p = (i as f64 + 0.5) * src as f64 / dst as f64;
    (p.floor() as usize).min(src - 1)
}

fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let p = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = p.floor() as usize;
            (i0, (i0 + 1).min(src - 1), p - i0 as f64)
        })
        .collect()
}

/// Parses a binary PNM header and returns `(width, height, payload)`.
fn parse_pnm<'a>(path: &Path, bytes: &'a [u8], magic: &[u8], channels: usize) -> Result<(usize, usize, &'a [u8])> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::parse(path, format!("missing {} magic number", String::from_utf8_lossy(magic))));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(path, "malformed header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::parse(path, "header value out of range"))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::parse(path, format!("invalid dimensions {width}×{height}")));
    }
    if maxval != 255 {
        return Err(Error::parse(path, format!("unsupported maxval {maxval}")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::parse(path, "missing whitespace after header"));
    }
    pos += 1;
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::parse(path, "dimensions overflow"))?;
    let found = bytes.len() - pos;
    if found < expected {
        return Err(Error::Length { path: path.into(), expected, found });
    }
    if found > expected {
        return Err(Error::parse(path, format!("{} trailing bytes after pixel data", found - expected)));
    }
    Ok((width, height, &bytes[pos..]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ppm");
        let img = RgbImage::new(3, 2, (0..18).map(|v| v * 13).collect()).unwrap();
        img.save_ppm(&p).unwrap();
        assert_eq!(RgbImage::load_ppm(&p).unwrap(), img);
    }

    #[test]
    fn pgm_round_trip_and_domain() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        let m = Mask::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        m.save_pgm(&p).unwrap();
        assert_eq!(fs::read(&p).unwrap()[11..], [0, 255, 255, 0]);
        assert_eq!(Mask::load_pgm(&p).unwrap(), m);

        fs::write(&p, b"P5\n2 2\n255\n\x00\x07\xff\x00").unwrap();
        assert!(matches!(Mask::load_pgm(&p), Err(Error::MaskDomain { value: 7, .. })));
    }

    #[test]
    fn header_with_comment() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.pgm");
        fs::write(&p, b"P5 # made by hand\n1\n1 255\n\xff").unwrap();
        assert_eq!(Mask::load_pgm(&p).unwrap().data, vec![1]);
    }

    #[test]
    fn malformed_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ppm");
        let cases: [(&[u8], &str); 5] = [
            (b"P3\n1 1\n255\n000", "magic"),
            (b"P6\n1 x\n255\n000", "header"),
            (b"P6\n1 1\n65535\n000000", "maxval"),
            (b"P6\n2 2\n255\n000", "length"),
            (b"P6\n1 1\n255\n0000", "trailing"),
        ];
        for (bytes, what) in cases {
            fs::write(&p, bytes).unwrap();
            let err = RgbImage::load_ppm(&p).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{what}");
            assert!(err.to_string().contains("x.ppm"), "{what}: {err}");
            if what == "length" {
                assert!(matches!(err, Error::Length { expected: 12, found: 3, .. }));
            }
        }
    }

    #[test]
    fn identity_resizes() {
        let img = RgbImage::new(2, 2, (0..12).collect()).unwrap();
        assert_eq!(img.resize_bilinear(2, 2), img);
        let m = Mask::new(2, 2, vec![1, 0, 0, 1]).unwrap();
        assert_eq!(m.resize_nearest(2, 2), m);
    }

    #[test]
    fn solid_mask_stays_solid() {
        let m = Mask::new(8, 8, vec![1; 64]).unwrap();
        assert!(m.resize_nearest(4, 4).data.iter().all(|&v| v == 1));
        let img = RgbImage::filled(8, 8, [200, 10, 30]);
        assert_eq!(img.resize_bilinear(4, 4), RgbImage::filled(4, 4, [200, 10, 30]));
    }

    #[test]
    fn resize_never_empties_a_mask() {
        // every 4×4 mask with at least 4 foreground pixels, to 2×2 and 3×3
        for bits in 0u32..(1 << 16) {
            if bits.count_ones() < 4 {
                continue;
            }
            let data = (0..16).map(|i| ((bits >> i) & 1) as u8).collect();
            let m = Mask::new(4, 4, data).unwrap();
            for side in [1, 2, 3] {
                assert!(m.resize_nearest(side, side).count() > 0, "{bits:016b} → {side}");
            }
        }
    }
}
