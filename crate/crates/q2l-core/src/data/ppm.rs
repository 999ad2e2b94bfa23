//! Canonical binary PPM (P6) and PGM (P5) encoding.
//!
//! One fixed header layout: magic, newline, `width space height`, newline,
//! `255`, newline, then raw samples. The reader accepts exactly that layout
//! and nothing else: no comments, no alternative whitespace, no other maxval,
//! no trailing bytes. Keeping the grammar closed makes files byte-comparable.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PpmError {
    #[error("bad magic: expected {expected}, found {found:?}")]
    BadMagic { expected: &'static str, found: String },
    #[error("malformed header near byte {at}: {what}")]
    BadHeader { at: usize, what: &'static str },
    #[error("unsupported maxval (only 255)")]
    BadMaxval,
    #[error("payload holds {got} bytes, header implies {expected}")]
    PayloadSize { expected: usize, got: usize },
    #[error("{0} trailing bytes after payload")]
    Trailing(usize),
    #[error("dimensions {width}x{height} do not match buffer of {len} samples")]
    BufferSize {
        width: usize,
        height: usize,
        len: usize,
    },
}

fn encode(magic: &str, width: usize, height: usize, samples_per_px: usize, data: &[u8]) -> Result<Vec<u8>, PpmError> {
    if width == 0 || height == 0 || data.len() != width * height * samples_per_px {
        return Err(PpmError::BufferSize {
            width,
            height,
            len: data.len(),
        });
    }
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    Ok(out)
}

/// Encodes interleaved RGB rows (len = width*height*3) as binary PPM.
pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>, PpmError> {
    encode("P6", width, height, 3, rgb)
}

/// Encodes one gray sample per pixel as binary PGM.
pub fn encode_pgm(width: usize, height: usize, gray: &[u8]) -> Result<Vec<u8>, PpmError> {
    encode("P5", width, height, 1, gray)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn expect(&mut self, bytes: &[u8], what: &'static str) -> Result<(), PpmError> {
        if self.buf.len() < self.pos + bytes.len() || &self.buf[self.pos..self.pos + bytes.len()] != bytes {
            return Err(PpmError::BadHeader { at: self.pos, what });
        }
        self.pos += bytes.len();
        Ok(())
    }

    /// Parses a decimal run with no leading zero padding.
    fn number(&mut self) -> Result<usize, PpmError> {
        let start = self.pos;
        while self.pos < self.buf.len() && self.buf[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        let text = &self.buf[start..self.pos];
        if text.is_empty() || (text.len() > 1 && text[0] == b'0') {
            return Err(PpmError::BadHeader {
                at: start,
                what: "expected a decimal dimension",
            });
        }
        std::str::from_utf8(text)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or(PpmError::BadHeader {
                at: start,
                what: "dimension out of range",
            })
    }
}

fn decode(
    expected_magic: &'static str,
    samples_per_px: usize,
    bytes: &[u8],
) -> Result<(usize, usize, Vec<u8>), PpmError> {
    if bytes.len() < 2 || &bytes[..2] != expected_magic.as_bytes() {
        return Err(PpmError::BadMagic {
            expected: expected_magic,
            found: String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned(),
        });
    }
    let mut c = Cursor { buf: bytes, pos: 2 };
    c.expect(b"\n", "newline after magic")?;
    let width = c.number()?;
    c.expect(b" ", "single space between dimensions")?;
    let height = c.number()?;
    c.expect(b"\n", "newline after dimensions")?;
    if c.expect(b"255", "maxval").is_err() {
        return Err(PpmError::BadMaxval);
    }
    c.expect(b"\n", "newline after maxval")?;
    let expected = width * height * samples_per_px;
    let payload = &bytes[c.pos..];
    if payload.len() < expected {
        return Err(PpmError::PayloadSize {
            expected,
            got: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(PpmError::Trailing(payload.len() - expected));
    }
    Ok((width, height, payload.to_vec()))
}

/// Decodes a canonical P6 file into (width, height, rgb).
pub fn decode_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), PpmError> {
    decode("P6", 3, bytes)
}

/// Decodes a canonical P5 file into (width, height, gray).
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), PpmError> {
    decode("P5", 1, bytes)
}
