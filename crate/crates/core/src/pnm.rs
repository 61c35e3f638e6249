//! Binary PPM (P6) and PGM (P5) images with maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit raster with 1 (gray) or 3 (RGB) interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Raster {
    /// Channel-planar `[C,H,W]` tensor with values `byte / 255`.
    pub fn to_tensor(&self) -> Tensor {
        let (h, w, c) = (self.height, self.width, self.channels);
        let mut data = vec![0.0; c * h * w];
        for (i, px) in self.pixels.chunks_exact(c).enumerate() {
            for (ch, &b) in px.iter().enumerate() {
                data[ch * h * w + i] = f64::from(b) / 255.0;
            }
        }
        Tensor::new(&[c, h, w], data).expect("raster extents are positive")
    }

    /// Quantizes a `[C,H,W]` tensor in `[0,1]` to bytes (rounding, clamped).
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.chw()?;
        if c != 1 && c != 3 {
            return Err(Error::Shape(format!("raster needs 1 or 3 channels, got {c}")));
        }
        let mut pixels = vec![0u8; c * h * w];
        for ch in 0..c {
            for i in 0..h * w {
                let v = t.data()[ch * h * w + i];
                pixels[i * c + ch] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
            }
        }
        Ok(Self {
            width: w,
            height: h,
            channels: c,
            pixels,
        })
    }
}

pub fn encode(r: &Raster) -> Vec<u8> {
    let magic = if r.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", r.width, r.height).into_bytes();
    out.extend_from_slice(&r.pixels);
    out
}

pub fn write(path: &Path, r: &Raster) -> Result<()> {
    fs::write(path, encode(r)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|msg| Error::format(path, msg))
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Raster, String> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err("not a binary PPM/PGM (expected P6 or P5)".into()),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        *field = header_number(bytes, &mut pos)?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(format!("zero image extent {width}x{height}"));
    }
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}, only 255 is accepted"));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err("missing whitespace after header".into()),
    }
    let need = width * height * channels;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(format!("truncated raster: need {need} bytes, found {}", raster.len()));
    }
    if raster.len() > need {
        return Err(format!("{} trailing bytes after raster", raster.len() - need));
    }
    Ok(Raster {
        width,
        height,
        channels,
        pixels: raster.to_vec(),
    })
}

fn header_number(bytes: &[u8], pos: &mut usize) -> std::result::Result<usize, String> {
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(_) => break,
            None => return Err("truncated header".into()),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    if start == *pos {
        return Err("malformed header number".into());
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| "header number out of range".into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn decodes_header_with_comment() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([7, 255]);
        let r = decode(&bytes).unwrap();
        assert_eq!((r.width, r.height, r.channels), (2, 1, 1));
        assert_eq!(r.pixels, vec![7, 255]);
        assert_eq!(r.to_tensor().data(), &[7.0 / 255.0, 1.0]);
    }

    #[test]
    fn rejects_malformed() {
        assert!(decode(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(decode(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
        assert!(decode(b"P6\n2 2\n255\n\0\0\0").is_err());
        assert!(decode(b"P5\n1 1\n255\n\0\0").is_err());
        assert!(decode(b"P5\nx 1\n255\n\0").is_err());
    }

    #[test]
    fn planar_layout() {
        let r = Raster {
            width: 2,
            height: 1,
            channels: 3,
            pixels: vec![255, 0, 0, 0, 0, 255],
        };
        let t = r.to_tensor();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(Raster::from_tensor(&t).unwrap(), r);
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(w in 1usize..9, h in 1usize..9, rgb in any::<bool>(), seed in any::<u64>()) {
            let channels = if rgb { 3 } else { 1 };
            let mut rng = crate::rng::Rng::new(seed);
            let pixels = (0..w * h * channels).map(|_| rng.below(256) as u8).collect();
            let r = Raster { width: w, height: h, channels, pixels };
            prop_assert_eq!(decode(&encode(&r)).unwrap(), r.clone());
            prop_assert_eq!(Raster::from_tensor(&r.to_tensor()).unwrap(), r);
        }
    }
}
