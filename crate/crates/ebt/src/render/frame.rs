//! RGB frame buffer with binary PPM (P6) persistence.
//!
//! Pixels are interleaved RGB f32 in [0,1]. Disk writes quantize with
//! round(v·255), so a loaded frame re-saves byte-identically.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, PartialEq)]
pub struct FrameBuffer {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl FrameBuffer {
    pub fn new(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0, "frame: zero dimension {width}x{height}");
        FrameBuffer { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut f = FrameBuffer::new(width, height);
        for px in f.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        f
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Per-pixel mean of the three channels.
    pub fn luminance(&self) -> Vec<f32> {
        self.data
            .chunks_exact(3)
            .map(|p| (p[0] + p[1] + p[2]) / 3.0)
            .collect()
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> FrameBuffer {
        assert!(
            x0 + w <= self.width && y0 + h <= self.height,
            "crop: {w}x{h}+{x0}+{y0} outside {}x{}",
            self.width,
            self.height
        );
        let mut out = FrameBuffer::new(w, h);
        for y in 0..h {
            let src = ((y0 + y) * self.width + x0) * 3;
            let dst = y * w * 3;
            out.data[dst..dst + w * 3].copy_from_slice(&self.data[src..src + w * 3]);
        }
        out
    }

    pub fn paste(&mut self, patch: &FrameBuffer, x0: usize, y0: usize) {
        assert!(
            x0 + patch.width <= self.width && y0 + patch.height <= self.height,
            "paste: patch outside frame"
        );
        for y in 0..patch.height {
            let src = y * patch.width * 3;
            let dst = ((y0 + y) * self.width + x0) * 3;
            self.data[dst..dst + patch.width * 3]
                .copy_from_slice(&patch.data[src..src + patch.width * 3]);
        }
    }

    /// Planar (3 × H × W) tensor view for network input.
    pub fn to_chw(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        let mut out = vec![0.0f32; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let src = (y * w + x) * 3;
                for c in 0..3 {
                    out[c * h * w + y * w + x] = self.data[src + c];
                }
            }
        }
        Tensor::new(vec![3, h, w], out)
    }

    pub fn from_chw(t: &Tensor) -> FrameBuffer {
        let s = t.shape();
        assert!(s.len() == 3 && s[0] == 3, "from_chw: want (3,H,W), got {s:?}");
        let (h, w) = (s[1], s[2]);
        let mut f = FrameBuffer::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let dst = (y * w + x) * 3;
                for c in 0..3 {
                    f.data[dst + c] = t.data()[c * h * w + y * w + x];
                }
            }
        }
        f
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.reserve(self.data.len());
        for &v in &self.data {
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load_ppm(path: &Path) -> Result<FrameBuffer> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        parse_ppm(&bytes).map_err(|e| match e {
            Error::Invalid(msg) => Error::Invalid(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

fn parse_ppm(bytes: &[u8]) -> Result<FrameBuffer> {
    if bytes.len() < 2 || &bytes[0..2] != b"P6" {
        return Err(Error::Invalid("not a P6 PPM".into()));
    }
    // Header: three whitespace-separated integers after the magic, with
    // '#' comments allowed between tokens.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        while pos < bytes.len() {
            match bytes[pos] {
                b' ' | b'\t' | b'\r' | b'\n' => pos += 1,
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Invalid("malformed PPM header".into()));
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::Invalid("bad PPM header number".into()))?;
    }
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(Error::Invalid(format!("unsupported PPM maxval {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(Error::Invalid("zero PPM dimension".into()));
    }
    pos += 1; // single whitespace byte after maxval
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(Error::Invalid(format!(
            "PPM pixel data truncated: want {need} bytes, have {}",
            bytes.len().saturating_sub(pos)
        )));
    }
    let mut f = FrameBuffer::new(w, h);
    for (dst, src) in f.data.iter_mut().zip(&bytes[pos..pos + need]) {
        *dst = *src as f32 / 255.0;
    }
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_is_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("x.ppm");
        let p2 = dir.path().join("y.ppm");
        let mut f = FrameBuffer::new(5, 4);
        for (i, v) in f.data_mut().iter_mut().enumerate() {
            *v = (i as f32 * 0.31) % 1.0;
        }
        f.save_ppm(&p1).unwrap();
        let g = FrameBuffer::load_ppm(&p1).unwrap();
        assert_eq!(g.width(), 5);
        assert_eq!(g.height(), 4);
        g.save_ppm(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn quantization_is_round_to_nearest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.ppm");
        let mut f = FrameBuffer::new(1, 1);
        f.set(0, 0, [1.0, 0.0, 0.5]);
        f.save_ppm(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let px = &bytes[bytes.len() - 3..];
        assert_eq!(px, &[255, 0, 128]);
    }

    #[test]
    fn chw_round_trip() {
        let mut f = FrameBuffer::new(3, 2);
        for (i, v) in f.data_mut().iter_mut().enumerate() {
            *v = i as f32 / 18.0;
        }
        let t = f.to_chw();
        assert_eq!(t.shape(), &[3, 2, 3]);
        let g = FrameBuffer::from_chw(&t);
        assert_eq!(f.data(), g.data());
    }

    #[test]
    fn crop_and_paste_are_inverse() {
        let mut f = FrameBuffer::new(8, 8);
        for (i, v) in f.data_mut().iter_mut().enumerate() {
            *v = (i % 7) as f32 / 7.0;
        }
        let c = f.crop(2, 3, 4, 2);
        assert_eq!(c.get(0, 0), f.get(2, 3));
        let mut g = f.clone();
        g.paste(&c, 2, 3);
        assert_eq!(f.data(), g.data());
    }

    #[test]
    fn malformed_ppm_is_rejected() {
        assert!(parse_ppm(b"P5\n1 1\n255\n").is_err());
        assert!(parse_ppm(b"P6\n2 2\n255\nxx").is_err());
        assert!(parse_ppm(b"").is_err());
    }

    #[test]
    fn comments_in_header_are_skipped() {
        let mut bytes = b"P6\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 255, 0]);
        let f = parse_ppm(&bytes).unwrap();
        assert_eq!(f.get(0, 0), [1.0, 0.0, 0.0]);
        assert_eq!(f.get(1, 0), [0.0, 1.0, 0.0]);
    }
}
