//! Binary (P5) 8-bit PGM.

use std::path::Path;

use super::image::Image;
use crate::error::{Error, Result};

fn perr(msg: impl Into<String>) -> Error {
    Error::parse("pgm", msg)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.buf.len() {
            let b = self.buf[self.pos];
            if b == b'#' {
                while self.pos < self.buf.len() && self.buf[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.buf.len() && self.buf[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(perr(format!("expected {what}")));
        }
        std::str::from_utf8(&self.buf[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|e| perr(format!("{what}: {e}")))
    }
}

pub fn decode_pgm(buf: &[u8]) -> Result<Image> {
    if buf.len() < 2 || &buf[..2] != b"P5" {
        return Err(perr("missing P5 magic"));
    }
    let mut c = Cursor { buf, pos: 2 };
    let width = c.number("width")?;
    let height = c.number("height")?;
    let maxval = c.number("maxval")?;
    if maxval != 255 {
        return Err(perr(format!("maxval {maxval}, only 255 is supported")));
    }
    if width == 0 || height == 0 {
        return Err(perr("zero dimension"));
    }
    match buf.get(c.pos) {
        Some(b) if b.is_ascii_whitespace() => c.pos += 1,
        _ => return Err(perr("header not terminated by whitespace")),
    }
    let n = width
        .checked_mul(height)
        .ok_or_else(|| perr("dimensions overflow"))?;
    let body = &buf[c.pos..];
    if body.len() < n {
        return Err(perr(format!("truncated: {} of {n} pixel bytes", body.len())));
    }
    Image::from_u8(height, width, &body[..n])
}

pub fn encode_pgm(img: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.to_u8());
    out
}

pub fn load_pgm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    decode_pgm(&buf).map_err(|e| match e {
        Error::Parse { msg, .. } => Error::parse("pgm", format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Writes via a temporary file and rename. Values are rounded to 8 bits.
pub fn save_pgm(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    crate::tensor::write_atomic(path.as_ref(), &encode_pgm(img))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_with_comments() {
        let mut buf = b"P5\n# made by hand\n2 1 # w h\n255\n".to_vec();
        buf.extend([0u8, 255]);
        let img = decode_pgm(&buf).unwrap();
        assert_eq!(img.dims(), (1, 2));
        assert_eq!(img.data(), &[0.0, 1.0]);
    }

    #[test]
    fn rejects_bad_headers() {
        assert!(decode_pgm(b"P2\n1 1\n255\n\x00").is_err());
        assert!(decode_pgm(b"P5\n1 1\n65535\n\x00\x00").is_err());
        assert!(decode_pgm(b"P5\n1").is_err());
        assert!(decode_pgm(b"P5\n2 2\n255\n\x00").is_err());
    }
}
