//! Binary PGM (P5) with 8-bit samples.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Raw 8-bit grayscale raster as stored in a P5 file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray8 {
    pub width: usize,
    pub height: usize,
    pub maxval: u8,
    pub pixels: Vec<u8>,
}

impl Gray8 {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width * height != pixels.len() {
            return Err(Error::Dimension(format!(
                "{width}×{height} raster with {} samples",
                pixels.len()
            )));
        }
        Ok(Gray8 {
            width,
            height,
            maxval: 255,
            pixels,
        })
    }

    /// Canonical encoding: `P5\n<w> <h>\n<maxval>\n` followed by the samples.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        match bytes.get(..2) {
            Some(b"P5") => {}
            Some(m) if m[0] == b'P' => {
                return Err(Error::Format(format!(
                    "unsupported PNM variant {}",
                    String::from_utf8_lossy(m)
                )))
            }
            _ => return Err(Error::Format("missing P5 magic".into())),
        }
        cur.pos = 2;
        let width = cur.number()?;
        let height = cur.number()?;
        let maxval = cur.number()?;
        if maxval == 0 {
            return Err(Error::Format("maxval must be positive".into()));
        }
        if maxval > 255 {
            return Err(Error::Unsupported(format!("maxval {maxval} > 255")));
        }
        // exactly one whitespace byte separates the header from the raster
        match bytes.get(cur.pos) {
            Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
            _ => return Err(Error::Format("header not terminated".into())),
        }
        let n = width * height;
        let raster = &bytes[cur.pos..];
        if raster.len() != n {
            return Err(Error::Format(format!(
                "expected {n} samples, found {}",
                raster.len()
            )));
        }
        if let Some(&bad) = raster.iter().find(|&&v| usize::from(v) > maxval) {
            return Err(Error::Format(format!("sample {bad} exceeds maxval {maxval}")));
        }
        Ok(Gray8 {
            width,
            height,
            maxval: maxval as u8,
            pixels: raster.to_vec(),
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Format(format!("expected a number at byte {start}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("header number out of range".into()))
    }
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Gray8> {
    Gray8::decode(&fs::read(path)?)
}

/// Writes atomically through a sibling temporary file.
pub fn write_pgm(img: &Gray8, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &img.encode())
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_round_trip_bitwise() {
        let g = Gray8::new(2, 2, vec![0, 1, 2, 4]).unwrap();
        let bytes = g.encode();
        assert_eq!(Gray8::decode(&bytes).unwrap(), g);
        assert_eq!(Gray8::decode(&bytes).unwrap().encode(), bytes);
    }

    #[test]
    fn ascii_variant_is_rejected() {
        let err = Gray8::decode(b"P2\n2 1\n255\n0 1\n").unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn zero_mask_layout() {
        let g = Gray8::new(160, 160, vec![0; 25600]).unwrap();
        let bytes = g.encode();
        let header = b"P5\n160 160\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len() - header.len(), 25600);
        assert!(bytes[header.len()..].iter().all(|&b| b == 0));
    }

    #[test]
    fn comments_and_wide_maxval() {
        let mut bytes = b"P5 # c\n2 # width\n1\n255\n".to_vec();
        bytes.extend([9, 8]);
        assert_eq!(Gray8::decode(&bytes).unwrap().pixels, vec![9, 8]);
        assert!(matches!(
            Gray8::decode(b"P5\n1 1\n65535\n\0\0"),
            Err(Error::Unsupported(_))
        ));
        assert!(Gray8::decode(b"P5\n2 2\n255\n\0").is_err());
    }
}
