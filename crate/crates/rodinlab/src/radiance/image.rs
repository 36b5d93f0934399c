//! Image IO: binary PPM (P6) as the golden-file format, with a lossless PNG
//! emitter producing identical pixel bytes, plus PSNR/SSIM-ready helpers.

use super::RadianceError;
use crate::numerics::{Real, Tensor};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

/// Quantize `[h,w,3]` values to bytes: round(255 * clamp(v, 0, 1)).
pub fn to_bytes(img: &Tensor) -> Vec<u8> {
    img.data()
        .iter()
        .map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8)
        .collect()
}

/// Bytes back to reals in [0,1] (v = byte / 255).
pub fn from_bytes(bytes: &[u8], h: usize, w: usize) -> Result<Tensor, RadianceError> {
    if bytes.len() != h * w * 3 {
        return Err(RadianceError::BadImage(format!(
            "{} bytes for {h}x{w}x3",
            bytes.len()
        )));
    }
    let data = bytes.iter().map(|&b| b as Real / 255.0).collect();
    Ok(Tensor::from_vec(&[h, w, 3], data)?)
}

pub fn write_ppm(img: &Tensor, path: &Path) -> Result<(), RadianceError> {
    let s = img.shape();
    assert!(s.len() == 3 && s[2] == 3, "expected [h,w,3]");
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "P6\n{} {}\n255\n", s[1], s[0])?;
    f.write_all(&to_bytes(img))?;
    f.flush()?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Tensor, RadianceError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0;
    let mut token = |bytes: &[u8]| -> Result<String, RadianceError> {
        // skip whitespace and '#' comments between header fields
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
            return Err(RadianceError::BadImage("truncated header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(&bytes)? != "P6" {
        return Err(RadianceError::BadImage("not a P6 ppm".into()));
    }
    let w: usize = token(&bytes)?
        .parse()
        .map_err(|_| RadianceError::BadImage("bad width".into()))?;
    let h: usize = token(&bytes)?
        .parse()
        .map_err(|_| RadianceError::BadImage("bad height".into()))?;
    let maxval: usize = token(&bytes)?
        .parse()
        .map_err(|_| RadianceError::BadImage("bad maxval".into()))?;
    if maxval != 255 {
        return Err(RadianceError::BadImage(format!("maxval {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    if bytes.len() < pos + h * w * 3 {
        return Err(RadianceError::BadImage("truncated pixels".into()));
    }
    from_bytes(&bytes[pos..pos + h * w * 3], h, w)
}

/// PNG with pixel bytes identical to the PPM emitter's.
pub fn write_png(img: &Tensor, path: &Path) -> Result<(), RadianceError> {
    let s = img.shape();
    assert!(s.len() == 3 && s[2] == 3, "expected [h,w,3]");
    let buf = ::image::RgbImage::from_raw(s[1] as u32, s[0] as u32, to_bytes(img))
        .expect("byte count matches dims");
    buf.save_with_format(path, ::image::ImageFormat::Png)
        .map_err(|e| RadianceError::BadImage(e.to_string()))?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<Tensor, RadianceError> {
    let img = ::image::open(path)
        .map_err(|e| RadianceError::BadImage(e.to_string()))?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    from_bytes(img.as_raw(), h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn test_image() -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // values beyond [0,1] exercise clamping
        Tensor::randn(&[5, 7, 3], 0.6, &mut rng).map(|v| v + 0.5)
    }

    #[test]
    fn byte_mapping_rounds_and_clamps() {
        let img = Tensor::from_vec(&[1, 2, 3], vec![-0.2, 0.0, 0.5, 1.0, 1.7, 0.998]).unwrap();
        assert_eq!(to_bytes(&img), vec![0, 0, 128, 255, 255, 254]);
    }

    #[test]
    fn ppm_roundtrip_preserves_bytes_exactly() {
        let dir = tempdir().unwrap();
        let img = test_image();
        let path = dir.path().join("a.ppm");
        write_ppm(&img, &path).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.shape(), img.shape());
        assert_eq!(to_bytes(&back), to_bytes(&img));
        // header is exactly as specified
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P6\n7 5\n255\n"));
        assert_eq!(bytes.len(), 11 + 5 * 7 * 3);
        // writing the re-read image reproduces the file byte for byte
        let path2 = dir.path().join("b.ppm");
        write_ppm(&back, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn ppm_reader_handles_comments_and_rejects_garbage() {
        let dir = tempdir().unwrap();
        let img = test_image();
        let bytes = to_bytes(&img);
        let path = dir.path().join("c.ppm");
        let mut file = Vec::new();
        file.extend_from_slice(b"P6\n# a comment\n7 5\n255\n");
        file.extend_from_slice(&bytes);
        std::fs::write(&path, &file).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(to_bytes(&back), bytes);

        let bad = dir.path().join("bad.ppm");
        std::fs::write(&bad, b"P5\n7 5\n255\n").unwrap();
        assert!(read_ppm(&bad).is_err());
        std::fs::write(&bad, b"P6\n7 5\n255\nxx").unwrap();
        assert!(read_ppm(&bad).is_err());
    }

    #[test]
    fn png_pixels_match_ppm_pixels() {
        let dir = tempdir().unwrap();
        let img = test_image();
        let ppm = dir.path().join("x.ppm");
        let png = dir.path().join("x.png");
        write_ppm(&img, &ppm).unwrap();
        write_png(&img, &png).unwrap();
        let a = read_ppm(&ppm).unwrap();
        let b = read_png(&png).unwrap();
        assert_eq!(a.data(), b.data());
    }
}
