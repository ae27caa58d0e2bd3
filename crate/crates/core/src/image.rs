//! RGB images, indexed label maps, and their binary PNM encodings
//! (P6 for color, P5 for labels).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::ontology::{ClassId, N_CLASSES};

/// Largest value a label map may hold: 0 is background, `c + 1` is class `c`.
pub const MAX_LABEL: u8 = N_CLASSES as u8;

/// Interleaved RGB image with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(h: usize, w: usize) -> Self {
        Image {
            h,
            w,
            data: vec![0.0; h * w * 3],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.w + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.w + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// `[h·w × 3]` tensor, one row per pixel in row-major order.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.h * self.w, 3], self.data.clone()).expect("image buffer matches dims")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_bytes(h: usize, w: usize, bytes: &[u8]) -> Self {
        Image {
            h,
            w,
            data: bytes.iter().map(|&b| b as f64 / 255.0).collect(),
        }
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut out = format!("P6\n{} {}\n255\n", self.w, self.h).into_bytes();
        out.extend(self.to_bytes());
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (w, h, payload) = parse_pnm(&bytes, b"P6", 3).map_err(|m| Error::format(path, m))?;
        Ok(Image::from_bytes(h, w, payload))
    }
}

/// Indexed label map: 0 = background, `c + 1` = class `c`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize) -> Self {
        LabelMap {
            h,
            w,
            data: vec![0; h * w],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.w + x] = v;
    }

    /// Class at a pixel, `None` for background.
    pub fn class_at(&self, i: usize) -> Option<ClassId> {
        match self.data[i] {
            0 => None,
            v => Some(v as usize - 1),
        }
    }

    pub fn present_classes(&self) -> Vec<ClassId> {
        let mut seen = [false; N_CLASSES];
        for &v in &self.data {
            if v > 0 {
                seen[v as usize - 1] = true;
            }
        }
        (0..N_CLASSES).filter(|&c| seen[c]).collect()
    }

    /// Binary mask of one class.
    pub fn class_mask(&self, c: ClassId) -> Vec<bool> {
        let v = c as u8 + 1;
        self.data.iter().map(|&x| x == v).collect()
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut out = format!("P5\n{} {}\n255\n", self.w, self.h).into_bytes();
        out.extend_from_slice(&self.data);
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode_pgm(&bytes).map_err(|m| Error::format(path, m))
    }

    pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<Self, String> {
        let (w, h, payload) = parse_pnm(bytes, b"P5", 1)?;
        if let Some(&bad) = payload.iter().find(|&&v| v > MAX_LABEL) {
            return Err(format!("label value {bad} exceeds {MAX_LABEL}"));
        }
        Ok(LabelMap {
            h,
            w,
            data: payload.to_vec(),
        })
    }
}

/// Display colour of each class, indexed by class id.
pub const PALETTE: [[u8; 3]; N_CLASSES] = [
    [128, 128, 128],
    [230, 25, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [60, 180, 75],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [0, 128, 128],
    [170, 110, 40],
    [128, 0, 0],
];

/// Image with every labelled pixel blended half-way towards its class
/// colour.
pub fn overlay(image: &Image, labels: &LabelMap) -> Result<Image> {
    if (image.h, image.w) != (labels.h, labels.w) {
        return Err(Error::Shape {
            op: "overlay",
            lhs: vec![image.h, image.w],
            rhs: vec![labels.h, labels.w],
        });
    }
    let mut out = image.clone();
    for i in 0..labels.h * labels.w {
        if let Some(c) = labels.class_at(i) {
            for k in 0..3 {
                let v = &mut out.data[i * 3 + k];
                *v = 0.5 * *v + 0.5 * PALETTE[c][k] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

/// Splits a binary PNM file into `(width, height, payload)`.
fn parse_pnm<'a>(
    bytes: &'a [u8],
    magic: &[u8],
    channels: usize,
) -> std::result::Result<(usize, usize, &'a [u8]), String> {
    if !bytes.starts_with(magic) {
        return Err(format!("expected {} header", String::from_utf8_lossy(magic)));
    }
    let mut pos = magic.len();
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("bad header number")?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing whitespace after header".into());
    }
    let payload = &bytes[pos + 1..];
    if payload.len() != w * h * channels {
        return Err(format!(
            "payload has {} bytes, header says {w}x{h}x{channels}",
            payload.len()
        ));
    }
    Ok((w, h, payload))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = LabelMap::new(3, 5);
        for (i, v) in m.data.iter_mut().enumerate() {
            *v = (i % 14) as u8;
        }
        let p = dir.path().join("m.pgm");
        m.write_pgm(&p).unwrap();
        assert_eq!(LabelMap::read_pgm(&p).unwrap(), m);
    }

    #[test]
    fn pgm_rejects_bad_values_and_sizes() {
        let mut bytes = b"P5\n2 1\n255\n".to_vec();
        bytes.extend([0, 14]);
        assert!(LabelMap::decode_pgm(&bytes).unwrap_err().contains("14"));
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend([0, 1, 2]);
        assert!(LabelMap::decode_pgm(&bytes).is_err());
    }

    #[test]
    fn ppm_round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::new(2, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = i as f64 / 17.0;
        }
        let img = Image::from_bytes(2, 3, &img.to_bytes());
        let p = dir.path().join("i.ppm");
        img.write_ppm(&p).unwrap();
        assert_eq!(Image::read_ppm(&p).unwrap(), img);
    }
}
