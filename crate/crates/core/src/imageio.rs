//! Binary PPM/PGM reading and writing for `[3,H,W]` and `[H,W]` tensors in `[0,1]`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

fn quantize(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encode a `[3,H,W]` image as binary PPM (P6, 8 bits).
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match *image.shape() {
        [3, h, w] => (h, w),
        ref s => return Err(Error::shape(format!("ppm needs [3,H,W], got {s:?}"))),
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let d = image.data();
    for p in 0..plane {
        out.extend((0..3).map(|c| quantize(d[c * plane + p])));
    }
    Ok(out)
}

/// Encode an `[H,W]` map as binary PGM (P5, 8 bits).
pub fn encode_pgm(map: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match *map.shape() {
        [h, w] => (h, w),
        ref s => return Err(Error::shape(format!("pgm needs [H,W], got {s:?}"))),
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&x| quantize(x)));
    Ok(out)
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let bytes = encode_ppm(image)?;
    fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    let bytes = encode_pgm(map)?;
    fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

/// Min-max rescale to `[0,1]`; a constant map becomes all zeros.
pub fn rescale_unit(map: &Tensor) -> Tensor {
    let lo = map.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if span <= 0.0 {
        return Tensor::zeros(map.shape());
    }
    map.map(|x| (x - lo) / span)
}

/// Split the three whitespace-separated header fields after the magic, skipping comments.
fn header(bytes: &[u8], magic: &[u8]) -> Result<(usize, usize, usize, usize)> {
    if !bytes.starts_with(magic) {
        return Err(Error::Parse(format!("expected {} header", String::from_utf8_lossy(magic))));
    }
    let mut pos = magic.len();
    let mut fields = [0usize; 3];
    for f in &mut fields {
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
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse("malformed image header".into()))?;
    }
    // exactly one whitespace byte separates header and raster
    Ok((fields[0], fields[1], fields[2], pos + 1))
}

fn raster(bytes: &[u8], magic: &[u8], channels: usize) -> Result<(usize, usize, Vec<f64>)> {
    let (w, h, maxval, start) = header(bytes, magic)?;
    if w == 0 || h == 0 || maxval != 255 {
        return Err(Error::Parse(format!("unsupported image {w}x{h}, maxval {maxval}")));
    }
    let n = w * h * channels;
    let body = bytes
        .get(start..start + n)
        .ok_or_else(|| Error::Parse("image raster truncated".into()))?;
    Ok((h, w, body.iter().map(|&b| f64::from(b) / 255.0).collect()))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let (h, w, interleaved) = raster(bytes, b"P6", 3)?;
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for (i, v) in interleaved.into_iter().enumerate() {
        data[(i % 3) * plane + i / 3] = v;
    }
    Tensor::new(&[3, h, w], data)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    let (h, w, data) = raster(bytes, b"P5", 1)?;
    Tensor::new(&[h, w], data)
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&fs::read(path)?)
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    decode_pgm(&fs::read(path)?)
}
