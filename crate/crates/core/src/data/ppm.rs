use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{bail, Result};
use crate::sim::Frame;

pub fn encode_ppm(frame: &Frame) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    out.extend_from_slice(&frame.data);
    out
}

/// Binary PPM (P6, maxval 255). Comments are not supported.
pub fn decode_ppm(bytes: &[u8]) -> Result<Frame> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            bail!(Corrupt, "truncated PPM header");
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap_or("").to_string());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if fields[0] != "P6" {
        bail!(Corrupt, "not a P6 image");
    }
    let num = |s: &str| s.parse::<usize>().ok().filter(|&v| v > 0);
    let (Some(w), Some(h), Some(255)) = (num(&fields[1]), num(&fields[2]), num(&fields[3])) else {
        bail!(Corrupt, "bad PPM header {:?}", &fields[1..]);
    };
    let need = w * h * 3;
    if bytes.len() < pos || bytes.len() - pos != need {
        bail!(Corrupt, "PPM raster has {} bytes, expected {}", bytes.len().saturating_sub(pos), need);
    }
    Frame::new(w, h, bytes[pos..].to_vec())
}

pub fn write_ppm(path: &Path, frame: &Frame) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_ppm(frame))?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Frame> {
    decode_ppm(&fs::read(path)?)
}
