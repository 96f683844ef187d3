//! Binary portable pixmap (P6, maxval 255).

use crate::error::{Error, Result};

/// 8-bit interleaved RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

pub fn encode(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err(format!("{what} out of range")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<RgbImage> {
    let mut c = Cursor { bytes, pos: 0 };
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(c.err("missing P6 magic"));
    }
    c.pos = 2;
    let width = c.number("width")?;
    let height = c.number("height")?;
    let maxval = c.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(c.err("zero image dimension"));
    }
    if maxval != 255 {
        return Err(c.err(format!("unsupported maxval {maxval}, only 255 is handled")));
    }
    match bytes.get(c.pos) {
        Some(b) if b.is_ascii_whitespace() => c.pos += 1,
        _ => return Err(c.err("expected a single whitespace byte before pixel data")),
    }
    let need = width * height * 3;
    let data = &bytes[c.pos..];
    if data.len() < need {
        return Err(c.err(format!("truncated pixel data: need {need} bytes, have {}", data.len())));
    }
    if data.len() > need {
        c.pos += need;
        return Err(c.err("trailing bytes after pixel data"));
    }
    Ok(RgbImage {
        width,
        height,
        data: data.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let img = RgbImage {
            width: 3,
            height: 2,
            data: (0..18).collect(),
        };
        let bytes = encode(&img);
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(decode(&bytes).unwrap(), img);
    }

    #[test]
    fn header_comments_accepted() {
        let mut bytes = b"P6 # made by hand\n2 1\n# max\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        assert_eq!(decode(&bytes).unwrap().pixel(1, 0), [4, 5, 6]);
    }

    #[test]
    fn malformed_inputs() {
        assert!(matches!(decode(b"P3\n1 1\n255\n"), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(decode(b"P6\n1 1\n65535\n\0\0\0\0\0\0"), Err(Error::Format { .. })));
        let err = decode(b"P6\n2 2\n255\n\x01\x02").unwrap_err();
        assert!(matches!(err, Error::Format { offset: 11, .. }), "{err:?}");
        assert!(decode(b"P6\n1 1\n255\n\x01\x02\x03\x04").is_err());
    }
}
