//! Binary PPM (P6, 8-bit) images.

use std::io::{self, Read, Write};

use crate::tensor::Tensor;

/// `[3, h, w]` values in `[0, 1]` to interleaved 8-bit RGB.
pub fn to_bytes(image: &Tensor) -> Vec<u8> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let d = image.data();
    let mut out = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = d[(c * h + y) * w + x];
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}

/// Interleaved 8-bit RGB to a `[3, h, w]` tensor in `[0, 1]`.
pub fn from_bytes(bytes: &[u8], h: usize, w: usize) -> Tensor {
    let mut data = vec![0.0; 3 * h * w];
    for (i, px) in bytes.chunks(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data).unwrap()
}

pub fn write<W: Write>(mut out: W, image: &Tensor) -> io::Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            format!("PPM needs a [3, H, W] image, got {s:?}"),
        ));
    }
    write!(out, "P6\n{} {}\n255\n", s[2], s[1])?;
    out.write_all(&to_bytes(image))
}

fn bad(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

/// Parses a P6 file; returns `(height, width, interleaved bytes)`.
pub fn read_raw<R: Read>(mut r: R) -> io::Result<(usize, usize, Vec<u8>)> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut pos = 0;
    let mut token = || -> io::Result<String> {
        loop {
            while pos < buf.len() && buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < buf.len() && buf[pos] == b'#' {
                while pos < buf.len() && buf[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PPM header"));
        }
        Ok(String::from_utf8_lossy(&buf[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err(bad("not a binary PPM (P6)"));
    }
    let num = |t: String| {
        t.parse::<usize>()
            .map_err(|_| bad(format!("bad PPM header field {t:?}")))
    };
    let w = num(token()?)?;
    let h = num(token()?)?;
    let max = num(token()?)?;
    if max != 255 {
        return Err(bad(format!("only 8-bit PPM supported, maxval {max}")));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let need = 3 * w * h;
    if buf.len() < start + need {
        return Err(bad(format!("PPM raster truncated: need {need} bytes")));
    }
    Ok((h, w, buf[start..start + need].to_vec()))
}

pub fn read<R: Read>(r: R) -> io::Result<Tensor> {
    let (h, w, bytes) = read_raw(r)?;
    Ok(from_bytes(&bytes, h, w))
}

/// Writes `image` to `path`.
pub fn save(path: &std::path::Path, image: &Tensor) -> io::Result<()> {
    let mut f = io::BufWriter::new(std::fs::File::create(path)?);
    write(&mut f, image)?;
    f.flush()
}

pub fn load(path: &std::path::Path) -> io::Result<Tensor> {
    read(io::BufReader::new(std::fs::File::open(path)?))
}
