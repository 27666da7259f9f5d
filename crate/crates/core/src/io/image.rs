//! Portable float maps (PFM) and 8-bit previews (PPM).

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Encodes `[H, W, 3]` as color (`PF`) or `[H, W]` / `[H, W, 1]` as grayscale
/// (`Pf`). Little-endian, rows stored bottom to top as the format requires.
pub fn encode_pfm(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w, c) = match img.shape() {
        &[h, w] => (h, w, 1),
        &[h, w, c] if c == 1 || c == 3 => (h, w, c),
        s => return Err(Error::dim(format!("PFM needs [H, W], [H, W, 1] or [H, W, 3], got {s:?}"))),
    };
    let tag = if c == 3 { "PF" } else { "Pf" };
    let mut out = format!("{tag}\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(h * w * c * 4);
    for row in (0..h).rev() {
        for v in &img.data()[row * w * c..(row + 1) * w * c] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Splits off one whitespace-terminated header token.
fn token<'a>(bytes: &'a [u8], pos: &mut usize, field: &str) -> Result<&'a str> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos || *pos >= bytes.len() {
        return Err(Error::schema(field, "missing or truncated header token"));
    }
    let t = std::str::from_utf8(&bytes[start..*pos]).map_err(|_| Error::schema(field, "not ASCII"))?;
    *pos += 1; // the single whitespace byte ending the token
    Ok(t)
}

fn dim(bytes: &[u8], pos: &mut usize, field: &str) -> Result<usize> {
    let t = token(bytes, pos, field)?;
    let v: usize = t
        .parse()
        .map_err(|_| Error::schema(field, format!("expected a positive integer, got '{t}'")))?;
    if v == 0 {
        return Err(Error::schema(field, "must be > 0"));
    }
    Ok(v)
}

/// Decodes a PFM into `[H, W, 3]` or `[H, W]`. Either byte order is accepted.
pub fn decode_pfm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 0;
    let c = match token(bytes, &mut pos, "pfm.magic")? {
        "PF" => 3,
        "Pf" => 1,
        m => return Err(Error::schema("pfm.magic", format!("expected PF or Pf, got '{m}'"))),
    };
    let w = dim(bytes, &mut pos, "pfm.width")?;
    let h = dim(bytes, &mut pos, "pfm.height")?;
    let st = token(bytes, &mut pos, "pfm.scale")?;
    let scale: f32 = st
        .parse()
        .map_err(|_| Error::schema("pfm.scale", format!("not a number: '{st}'")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::schema("pfm.scale", "must be finite and nonzero"));
    }
    let little = scale < 0.0;
    let n = h
        .checked_mul(w)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| Error::schema("pfm.width", "image too large"))?;
    let body = &bytes[pos..];
    if body.len() != n * 4 {
        return Err(Error::schema(
            "pfm.data",
            format!("expected {} bytes of samples, found {}", n * 4, body.len()),
        ));
    }
    let vals: Vec<f32> = body
        .chunks_exact(4)
        .map(|b| {
            let b: [u8; 4] = b.try_into().unwrap();
            if little {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            }
        })
        .collect();
    let mut data = Vec::with_capacity(n);
    for row in (0..h).rev() {
        data.extend_from_slice(&vals[row * w * c..(row + 1) * w * c]);
    }
    if c == 3 {
        Tensor::new(&[h, w, 3], data)
    } else {
        Tensor::new(&[h, w], data)
    }
}

/// Binary `P6` preview of an `[H, W, 3]` image, clamped to `[0, 1]`.
pub fn encode_ppm(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let &[h, w, 3] = img.shape() else {
        return Err(Error::dim(format!("PPM needs [H, W, 3], got {:?}", img.shape())));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| to_u8(v)));
    Ok(out)
}

fn to_u8(v: f32) -> u8 {
    if v.is_nan() {
        0
    } else {
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    }
}

/// Decodes a binary `P6` file with maxval 255 into raw bytes `[H, W, 3]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 0;
    let m = token(bytes, &mut pos, "ppm.magic")?;
    if m != "P6" {
        return Err(Error::schema("ppm.magic", format!("expected P6, got '{m}'")));
    }
    let w = dim(bytes, &mut pos, "ppm.width")?;
    let h = dim(bytes, &mut pos, "ppm.height")?;
    let maxval = dim(bytes, &mut pos, "ppm.maxval")?;
    if maxval != 255 {
        return Err(Error::schema("ppm.maxval", format!("only 255 is supported, got {maxval}")));
    }
    let body = &bytes[pos..];
    if body.len() != h * w * 3 {
        return Err(Error::schema("ppm.data", format!("expected {} bytes, found {}", h * w * 3, body.len())));
    }
    Ok((h, w, body.to_vec()))
}

pub fn write_pfm(path: &Path, img: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, encode_pfm(img)?).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes).map_err(|e| match e {
        Error::Schema { field, message } => Error::schema(format!("{}: {field}", path.display()), message),
        other => other,
    })
}

pub fn write_ppm(path: &Path, img: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, encode_ppm(img)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip_is_bitwise() {
        let img = Tensor::from_fn(&[3, 5, 3], |i| (i as f32 * 0.37).sin() * 1e3);
        let back = decode_pfm(&encode_pfm(&img).unwrap()).unwrap();
        assert_eq!(back, img);
        let gray = Tensor::from_fn(&[4, 2], |i| -(i as f32));
        assert_eq!(decode_pfm(&encode_pfm(&gray).unwrap()).unwrap(), gray);
    }

    #[test]
    fn pfm_stores_bottom_row_first() {
        let img = Tensor::from_fn(&[2, 1], |i| i as f32);
        let b = encode_pfm(&img).unwrap();
        let body = &b[b.len() - 8..];
        assert_eq!(f32::from_le_bytes(body[..4].try_into().unwrap()), 1.0);
    }

    #[test]
    fn big_endian_pfm_reads() {
        let mut b = b"Pf\n2 1\n1.0\n".to_vec();
        b.extend_from_slice(&0.5f32.to_be_bytes());
        b.extend_from_slice(&2.0f32.to_be_bytes());
        assert_eq!(decode_pfm(&b).unwrap().data(), &[0.5, 2.0]);
    }

    #[test]
    fn ppm_quantizes_and_clamps() {
        let img = Tensor::from_f64(&[1, 2, 3], &[0.0, 0.5, 1.0, -1.0, 2.0, 0.25]).unwrap();
        let (h, w, px) = decode_ppm(&encode_ppm(&img).unwrap()).unwrap();
        assert_eq!((h, w), (1, 2));
        assert_eq!(px, vec![0, 128, 255, 0, 255, 64]);
    }

    #[test]
    fn malformed_headers_name_fields() {
        let field = |b: &[u8]| match decode_pfm(b) {
            Err(Error::Schema { field, .. }) => field,
            other => panic!("expected schema error, got {other:?}"),
        };
        assert_eq!(field(b"P5\n1 1\n-1.0\n\0\0\0\0"), "pfm.magic");
        assert_eq!(field(b"Pf\nx 1\n-1.0\n\0\0\0\0"), "pfm.width");
        assert_eq!(field(b"Pf\n1 0\n-1.0\n"), "pfm.height");
        assert_eq!(field(b"Pf\n1 1\n0\n\0\0\0\0"), "pfm.scale");
        assert_eq!(field(b"Pf\n1 1\n-1.0\n\0\0"), "pfm.data");
    }
}
