//! File formats: exact raw float maps and lossy PNG previews.

use std::fs;
use std::io::{self, ErrorKind};
use std::path::Path;

use csr_core::PlaneTensor;
use image::{GrayImage, Luma, Rgb, RgbImage};

pub const RAW_MAGIC: &[u8; 8] = b"CSRF0001";
pub const RAW_EXTENSION: &str = "csrf";
const GAMMA: f64 = 2.2;

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(ErrorKind::InvalidData, msg.into())
}

/// Magic, `u32` height, width, channels (little-endian), then `f64` data.
pub fn encode_raw(t: &PlaneTensor) -> Vec<u8> {
    let (h, w, c) = t.shape();
    let mut buf = Vec::with_capacity(20 + 8 * t.len());
    buf.extend_from_slice(RAW_MAGIC);
    for d in [h, w, c] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_raw(buf: &[u8]) -> io::Result<PlaneTensor> {
    if buf.len() < 20 || &buf[..8] != RAW_MAGIC {
        return Err(invalid("not a raw float map (bad magic)"));
    }
    let dim = |i: usize| u32::from_le_bytes(buf[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    let n = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| invalid("raw map dimensions overflow"))?;
    if buf.len() - 20 != n * 8 {
        return Err(invalid(format!("raw map {h}x{w}x{c} has {} payload bytes", buf.len() - 20)));
    }
    let data = buf[20..].chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
    PlaneTensor::new(h, w, c, data).map_err(|e| invalid(e.to_string()))
}

pub fn write_raw(path: &Path, t: &PlaneTensor) -> io::Result<()> {
    fs::write(path, encode_raw(t))
}

pub fn read_raw(path: &Path) -> io::Result<PlaneTensor> {
    decode_raw(&fs::read(path)?)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0).powf(1.0 / GAMMA) * 255.0).round() as u8
}

/// Preview: clip to `[0, 1]`, gamma 1/2.2, 8 bits. 1-channel maps become gray.
pub fn write_png(path: &Path, t: &PlaneTensor) -> io::Result<()> {
    let (h, w, c) = t.shape();
    let res = match c {
        1 => GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([to_byte(t.at(y as usize, x as usize, 0))])).save(path),
        3 => RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let (y, x) = (y as usize, x as usize);
            Rgb([to_byte(t.at(y, x, 0)), to_byte(t.at(y, x, 1)), to_byte(t.at(y, x, 2))])
        })
        .save(path),
        _ => return Err(invalid(format!("cannot preview a {c}-channel map"))),
    };
    res.map_err(|e| io::Error::other(e.to_string()))
}

/// Decodes an 8-bit image into linear RGB by inverting the preview gamma.
pub fn read_png(path: &Path) -> io::Result<PlaneTensor> {
    let img = image::open(path).map_err(|e| invalid(e.to_string()))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(PlaneTensor::from_fn(h, w, 3, |y, x, c| {
        (img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0).powf(GAMMA)
    }))
}

/// Reads a linear image from a raw map or any 8-bit format the image crate knows.
pub fn read_image(path: &Path) -> io::Result<PlaneTensor> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(RAW_EXTENSION) => read_raw(path),
        _ => read_png(path),
    }
}

/// Writes `<dir>/<stem>.csrf` and, if requested, a `<dir>/<stem>.png` preview.
pub fn write_map(dir: &Path, stem: &str, t: &PlaneTensor, preview: Option<&PlaneTensor>) -> io::Result<()> {
    write_raw(&dir.join(format!("{stem}.{RAW_EXTENSION}")), t)?;
    if let Some(p) = preview {
        write_png(&dir.join(format!("{stem}.png")), p)?;
    }
    Ok(())
}

/// Scales a non-negative map by its maximum for display.
pub fn heatmap(t: &PlaneTensor) -> PlaneTensor {
    let m = t.data().iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    if m > 0.0 {
        t.map(|v| v.abs() / m)
    } else {
        t.map(|_| 0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_round_trip_is_exact() {
        let t = PlaneTensor::from_fn(3, 2, 3, |y, x, c| (y as f64 + 0.1) * (x as f64 - 0.3) / (c as f64 + 7.0));
        let back = decode_raw(&encode_raw(&t)).unwrap();
        assert_eq!(back, t);
        assert_eq!(encode_raw(&back), encode_raw(&t));
    }

    #[test]
    fn raw_rejects_corruption() {
        let buf = encode_raw(&PlaneTensor::zeros(2, 2, 1));
        assert!(decode_raw(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(decode_raw(&bad).is_err());
        let mut nan = buf;
        nan[20..28].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(decode_raw(&nan).is_err());
    }

    #[test]
    fn png_round_trip_is_close() {
        let dir = tempfile::tempdir().unwrap();
        let t = PlaneTensor::from_fn(4, 5, 3, |y, x, c| 0.05 + 0.04 * (y + x + c) as f64);
        let p = dir.path().join("x.png");
        write_png(&p, &t).unwrap();
        let back = read_png(&p).unwrap();
        assert_eq!(back.shape(), (4, 5, 3));
        assert!(back.max_abs_diff(&t) < 0.01);
        write_png(&dir.path().join("g.png"), &t.channel(0)).unwrap();
    }
}
