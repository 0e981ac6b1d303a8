//! Binary PGM/PPM reading and writing.

use std::fs;
use std::path::Path;

use graspxfer_tensor::Tensor;

use crate::error::IoError;

pub fn m_to_mm(d: f64) -> u16 {
    (d * 1000.0).round().clamp(0.0, u16::MAX as f64) as u16
}

pub fn mm_to_m(mm: u16) -> f64 {
    mm as f64 / 1000.0
}

/// Round-half-up quantization of [0, 1] to a byte.
pub fn unit_to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn byte_to_unit(b: u8) -> f64 {
    b as f64 / 255.0
}

struct Image {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    pixels: Vec<u8>,
}

fn encode(magic: &str, width: usize, height: usize, maxval: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic}\n{width} {height}\n{maxval}\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

fn decode(path: &Path, bytes: &[u8]) -> Result<Image, IoError> {
    let bad = |m: &str| IoError::format(path, m.to_string());
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(bad("not a binary netpbm file"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad header number"))?;
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 65535 {
        return Err(bad("maxval out of range"));
    }
    Ok(Image {
        magic,
        width,
        height,
        maxval,
        pixels: bytes.get(pos..).unwrap_or_default().to_vec(),
    })
}

fn read(path: &Path) -> Result<Image, IoError> {
    let bytes = fs::read(path).map_err(|e| IoError::io(path, e))?;
    decode(path, &bytes)
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    fs::write(path, bytes).map_err(|e| IoError::io(path, e))
}

fn check_len(path: &Path, img: &Image, channels: usize, bytes_per: usize) -> Result<(), IoError> {
    let need = img.width * img.height * channels * bytes_per;
    if img.pixels.len() < need {
        return Err(IoError::format(path, format!("raster has {} bytes, expected {need}", img.pixels.len())));
    }
    Ok(())
}

/// `[1, H, W]` depth in meters as a 16-bit big-endian PGM in millimeters.
pub fn write_depth_pgm(path: &Path, depth: &Tensor) -> Result<(), IoError> {
    let (h, w) = (depth.shape()[1], depth.shape()[2]);
    let px: Vec<u8> = depth.data().iter().flat_map(|&d| m_to_mm(d).to_be_bytes()).collect();
    write(path, &encode("P5", w, h, 65535, &px))
}

pub fn read_depth_pgm(path: &Path) -> Result<Tensor, IoError> {
    let img = read(path)?;
    if &img.magic != b"P5" || img.maxval < 256 {
        return Err(IoError::format(path, "expected a 16-bit P5 depth image"));
    }
    check_len(path, &img, 1, 2)?;
    let data = img.pixels[..img.width * img.height * 2]
        .chunks_exact(2)
        .map(|b| mm_to_m(u16::from_be_bytes([b[0], b[1]])))
        .collect();
    Tensor::new(vec![1, img.height, img.width], data).map_err(|e| IoError::format(path, e.to_string()))
}

/// `[H, W]` or `[1, H, W]` values in [0, 1] as an 8-bit PGM.
pub fn write_pgm8(path: &Path, image: &Tensor) -> Result<(), IoError> {
    let s = image.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let px: Vec<u8> = image.data().iter().map(|&v| unit_to_byte(v)).collect();
    write(path, &encode("P5", w, h, 255, &px))
}

pub fn read_pgm8(path: &Path) -> Result<Tensor, IoError> {
    let img = read(path)?;
    if &img.magic != b"P5" || img.maxval > 255 {
        return Err(IoError::format(path, "expected an 8-bit P5 image"));
    }
    check_len(path, &img, 1, 1)?;
    let data = img.pixels[..img.width * img.height].iter().map(|&b| byte_to_unit(b)).collect();
    Tensor::new(vec![1, img.height, img.width], data).map_err(|e| IoError::format(path, e.to_string()))
}

/// `[3, H, W]` RGB in [0, 1] as an 8-bit P6 PPM.
pub fn write_ppm(path: &Path, rgb: &Tensor) -> Result<(), IoError> {
    let (h, w) = (rgb.shape()[1], rgb.shape()[2]);
    let plane = h * w;
    let d = rgb.data();
    let px: Vec<u8> = (0..plane)
        .flat_map(|i| [d[i], d[plane + i], d[2 * plane + i]].map(unit_to_byte))
        .collect();
    write(path, &encode("P6", w, h, 255, &px))
}

pub fn read_ppm(path: &Path) -> Result<Tensor, IoError> {
    let img = read(path)?;
    if &img.magic != b"P6" || img.maxval > 255 {
        return Err(IoError::format(path, "expected an 8-bit P6 image"));
    }
    check_len(path, &img, 3, 1)?;
    let plane = img.width * img.height;
    let mut data = vec![0.0; 3 * plane];
    for i in 0..plane {
        for k in 0..3 {
            data[k * plane + i] = byte_to_unit(img.pixels[3 * i + k]);
        }
    }
    Tensor::new(vec![3, img.height, img.width], data).map_err(|e| IoError::format(path, e.to_string()))
}
