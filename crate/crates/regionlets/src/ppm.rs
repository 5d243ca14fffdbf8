//! Minimal PPM (P6/P3) image IO mapping to [3,H,W] tensors in [0,1].

use std::fs;
use std::path::Path;

use crate::tensor::Tensor;
use crate::{Error, Result};

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::invalid(format!("PPM needs a [3,H,W] tensor, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = (image.at3(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
                buf.push(v);
            }
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    parse_ppm(&bytes)
}

pub fn parse_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0usize;
    let magic = next_token(bytes, &mut pos)
        .ok_or_else(|| Error::invalid("PPM: missing magic"))?;
    let binary = match magic.as_slice() {
        b"P6" => true,
        b"P3" => false,
        other => {
            return Err(Error::invalid(format!(
                "PPM: unsupported magic {:?}",
                String::from_utf8_lossy(other)
            )))
        }
    };
    let w = next_usize(bytes, &mut pos)?;
    let h = next_usize(bytes, &mut pos)?;
    let maxval = next_usize(bytes, &mut pos)?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::invalid(format!("PPM: unsupported maxval {maxval}")));
    }
    let mut image = Tensor::zeros(&[3, h, w]);
    if binary {
        pos += 1; // single whitespace after maxval
        if bytes.len() < pos + 3 * w * h {
            return Err(Error::invalid("PPM: truncated pixel data"));
        }
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let v = bytes[pos + (y * w + x) * 3 + c] as f64 / maxval as f64;
                    image.set3(c, y, x, v);
                }
            }
        }
    } else {
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let v = next_usize(bytes, &mut pos)? as f64 / maxval as f64;
                    image.set3(c, y, x, v);
                }
            }
        }
    }
    Ok(image)
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Option<Vec<u8>> {
    // skip whitespace and # comments
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
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if *pos > start {
        Some(bytes[start..*pos].to_vec())
    } else {
        None
    }
}

fn next_usize(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let tok = next_token(bytes, pos).ok_or_else(|| Error::invalid("PPM: truncated header"))?;
    String::from_utf8_lossy(&tok)
        .parse::<usize>()
        .map_err(|_| Error::invalid("PPM: bad integer field"))
}
