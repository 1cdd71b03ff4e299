//! Binary portable pixmap (P6) and graymap (P5) codec.

use std::path::Path;

use crate::data::scene::image_from_bytes;
use crate::encoders::ImageGrid;
use crate::error::{Error, Result};

/// Quantizes to 8 bits; 3-channel images become P6, 1-channel P5.
pub fn encode_ppm(img: &ImageGrid) -> Vec<u8> {
    let magic = if img.channels() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    let c = img.channels();
    for y in 0..img.height() {
        for x in 0..img.width() {
            for ch in 0..c.min(3) {
                out.push((img.get(y, x, ch) * 255.0).round() as u8);
            }
        }
    }
    out
}

pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<ImageGrid, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "P6" => 3,
        "P5" => 1,
        m => return Err(format!("unsupported magic {m:?}")),
    };
    let num = |s: String| s.parse::<usize>().map_err(|_| format!("bad header number {s:?}"));
    let w = num(token()?)?;
    let h = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval != 255 || w == 0 || h == 0 {
        return Err(format!("unsupported {w}x{h} with maxval {maxval}"));
    }
    let body = &bytes[pos + 1..];
    if body.len() != w * h * channels {
        return Err(format!(
            "expected {} pixel bytes, found {}",
            w * h * channels,
            body.len()
        ));
    }
    Ok(image_from_bytes(h, w, channels, body))
}

pub fn write_ppm(path: &Path, img: &ImageGrid) -> Result<()> {
    std::fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<ImageGrid> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|detail| Error::Format {
        path: path.to_path_buf(),
        what: "pixmap",
        detail,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact_on_byte_values() {
        let px: Vec<f64> = (0..2 * 3 * 3).map(|i| (i * 13 % 256) as f64 / 255.0).collect();
        let img = ImageGrid::new(2, 3, 3, px).unwrap();
        assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap(), img);
        assert!(decode_ppm(b"P3\n1 1\n255\n").is_err());
    }
}
