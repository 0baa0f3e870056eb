//! Binary PPM/PGM encoding for `[0,1]` images.

use crate::error::{Error, Result};
use crate::Tensor;

pub fn quantize(v: f64, max: u32) -> u32 {
    (v.clamp(0.0, 1.0) * max as f64).round() as u32
}

/// Rounds every value onto the `1/max` grid so stored and in-memory images agree.
pub fn snap(t: &Tensor, max: u32) -> Tensor {
    t.map(|v| quantize(v, max) as f64 / max as f64)
}

/// P6 with maxval 255 from a `3×H×W` tensor.
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("encode_ppm", format!("expected 3×H×W, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    for i in 0..h * w {
        for c in 0..3 {
            out.push(quantize(d[c * h * w + i], 255) as u8);
        }
    }
    Ok(out)
}

/// P5 from a `1×H×W` or `H×W` tensor; maxval 65535 stores big-endian pairs.
pub fn encode_pgm(img: &Tensor, maxval: u32) -> Result<Vec<u8>> {
    let s = img.shape();
    let (h, w) = match s {
        [1, h, w] | [h, w] => (*h, *w),
        _ => return Err(Error::shape("encode_pgm", format!("expected 1×H×W or H×W, got {s:?}"))),
    };
    let mut out = format!("P5\n{w} {h}\n{maxval}\n").into_bytes();
    for &v in img.data() {
        let q = quantize(v, maxval);
        if maxval > 255 {
            out.extend_from_slice(&(q as u16).to_be_bytes());
        } else {
            out.push(q as u8);
        }
    }
    Ok(out)
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: u32,
    offset: usize,
}

fn parse_header(bytes: &[u8]) -> std::result::Result<Header, String> {
    if bytes.len() < 2 {
        return Err("file too short".into());
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
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
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("malformed header field")?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing whitespace after header".into());
    }
    let maxval = fields[2] as u32;
    if maxval == 0 || maxval > 65535 {
        return Err(format!("maxval {maxval} out of range"));
    }
    Ok(Header {
        magic,
        width: fields[0],
        height: fields[1],
        maxval,
        offset: pos + 1,
    })
}

fn samples(bytes: &[u8], h: &Header, count: usize) -> std::result::Result<Vec<f64>, String> {
    let wide = h.maxval > 255;
    let need = count * if wide { 2 } else { 1 };
    let body = &bytes[h.offset..];
    if body.len() != need {
        return Err(format!("expected {need} data bytes, found {}", body.len()));
    }
    let m = h.maxval as f64;
    Ok(if wide {
        body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / m).collect()
    } else {
        body.iter().map(|&b| b as f64 / m).collect()
    })
}

/// Decodes P6 into `3×H×W`.
pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P6" {
        return Err("not a binary PPM (P6)".into());
    }
    let n = h.width * h.height;
    let inter = samples(bytes, &h, 3 * n)?;
    let mut planar = vec![0.0; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            planar[c * n + i] = inter[3 * i + c];
        }
    }
    Tensor::new(vec![3, h.height, h.width], planar).map_err(|e| e.to_string())
}

/// Decodes P5 into `H×W`.
pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P5" {
        return Err("not a binary PGM (P5)".into());
    }
    let data = samples(bytes, &h, h.width * h.height)?;
    Tensor::new(vec![h.height, h.width], data).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip() {
        let img = snap(&Tensor::from_fn(vec![3, 2, 5], |i| (i as f64 * 0.037) % 1.0), 255);
        let bytes = encode_ppm(&img).unwrap();
        assert!(bytes.starts_with(b"P6\n5 2\n255\n"));
        assert_eq!(decode_ppm(&bytes).unwrap(), img);
    }

    #[test]
    fn pgm_round_trip_both_depths() {
        let img = Tensor::from_fn(vec![3, 4], |i| i as f64 / 11.0);
        for max in [255, 65535] {
            let q = snap(&img, max);
            let back = decode_pgm(&encode_pgm(&q, max).unwrap()).unwrap();
            assert_eq!(back, q);
        }
        let wide = encode_pgm(&Tensor::full(vec![1, 1], 1.0), 65535).unwrap();
        assert_eq!(&wide[wide.len() - 2..], &[0xff, 0xff]);
    }

    #[test]
    fn header_comments_and_errors() {
        let bytes = b"P5 # c\n2 1\n255\n\x00\xff";
        assert_eq!(decode_pgm(bytes).unwrap().data(), &[0.0, 1.0]);
        assert!(decode_pgm(b"P5\n2 1\n255\n\x00").is_err());
        assert!(decode_ppm(bytes).is_err());
        assert!(decode_pgm(b"P5\n2").is_err());
    }
}
