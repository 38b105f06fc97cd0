//! PNG (8-bit gray or RGB) and binary PGM (P5) reading and writing.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageReader};

use super::{GrayImage, Mask};
use crate::{Error, Result};

/// Intensity at or above which a mask pixel is foreground.
pub const MASK_THRESHOLD: u8 = 128;

fn image_err(path: &Path, message: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

enum Raster {
    Gray { w: u32, h: u32, px: Vec<u8> },
    Rgb { w: u32, h: u32, px: Vec<u8> },
}

fn read_raster(path: &Path) -> Result<Raster> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))?;
    let (w, h) = (img.width(), img.height());
    match img {
        DynamicImage::ImageLuma8(buf) => Ok(Raster::Gray { w, h, px: buf.into_raw() }),
        DynamicImage::ImageRgb8(buf) => Ok(Raster::Rgb { w, h, px: buf.into_raw() }),
        other => Err(image_err(
            path,
            format!("unsupported pixel format {:?}; expected 8-bit gray or RGB", other.color()),
        )),
    }
}

/// Pixels with intensity ≥ 128 become foreground. RGB files are reduced to
/// luma first.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let (w, h, luma) = match read_raster(path)? {
        Raster::Gray { w, h, px } => (w, h, px),
        Raster::Rgb { w, h, px } => {
            let img = image::RgbImage::from_raw(w, h, px).ok_or_else(|| image_err(path, "truncated RGB data"))?;
            (w, h, DynamicImage::ImageRgb8(img).to_luma8().into_raw())
        }
    };
    Mask::new(
        h as usize,
        w as usize,
        luma.into_iter().map(|v| u8::from(v >= MASK_THRESHOLD)).collect(),
    )
}

fn write_gray(path: &Path, w: usize, h: usize, px: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("pgm") => {
            let file = File::create(path).map_err(|e| Error::io(path, e))?;
            PnmEncoder::new(BufWriter::new(file))
                .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
                .write_image(px, w as u32, h as u32, ExtendedColorType::L8)
                .map_err(|e| image_err(path, e))
        }
        Some("png") => image::save_buffer(path, px, w as u32, h as u32, ExtendedColorType::L8)
            .map_err(|e| image_err(path, e)),
        _ => Err(image_err(path, "unsupported extension; use .png or .pgm")),
    }
}

/// Writes foreground as 255 and background as 0.
pub fn save_mask(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let px: Vec<u8> = mask.bits().iter().map(|&b| b * 255).collect();
    write_gray(path.as_ref(), mask.width(), mask.height(), &px)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    match read_raster(path)? {
        Raster::Gray { w, h, px } => GrayImage::new(
            h as usize,
            w as usize,
            1,
            px.into_iter().map(|v| v as f32 / 255.0).collect(),
        ),
        Raster::Rgb { w, h, px } => {
            let plane = (w * h) as usize;
            let mut values = vec![0.0; plane * 3];
            for (i, rgb) in px.chunks_exact(3).enumerate() {
                for (c, &v) in rgb.iter().enumerate() {
                    values[c * plane + i] = v as f32 / 255.0;
                }
            }
            GrayImage::new(h as usize, w as usize, 3, values)
        }
    }
}

/// Quantizes to 8 bits. Only single-channel images can be written.
pub fn save_image(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if img.channels() != 1 {
        return Err(image_err(path, "only single-channel images can be saved"));
    }
    let px: Vec<u8> = img.values().iter().map(|&v| (v * 255.0).round() as u8).collect();
    write_gray(path, img.width(), img.height(), &px)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_round_trip_png_and_pgm() {
        let dir = tempfile::tempdir().unwrap();
        let m = Mask::from_fn(5, 7, |r, c| (r * 3 + c) % 4 == 0).unwrap();
        for name in ["m.png", "m.pgm"] {
            let p = dir.path().join(name);
            save_mask(&m, &p).unwrap();
            assert_eq!(load_mask(&p).unwrap(), m);
        }
        let raw = std::fs::read(dir.path().join("m.pgm")).unwrap();
        assert_eq!(&raw[..2], b"P5");
    }

    #[test]
    fn threshold_is_128() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.png");
        image::save_buffer(&p, &[127, 128, 255, 0], 4, 1, ExtendedColorType::L8).unwrap();
        assert_eq!(load_mask(&p).unwrap().bits(), &[0, 1, 1, 0]);

        let all = dir.path().join("all.png");
        image::save_buffer(&all, &[255; 6], 3, 2, ExtendedColorType::L8).unwrap();
        assert_eq!(load_mask(&all).unwrap(), Mask::ones(2, 3).unwrap());
    }

    #[test]
    fn rgb_images_keep_channels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgb.png");
        image::save_buffer(&p, &[255, 0, 0, 0, 255, 0], 2, 1, ExtendedColorType::Rgb8).unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!(img.channels(), 3);
        assert_eq!(img.get(0, 0, 0), 1.0);
        assert_eq!(img.get(1, 0, 1), 1.0);
        assert_eq!(img.get(2, 0, 0), 0.0);
    }

    #[test]
    fn sixteen_bit_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("deep.png");
        let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(2, 1, vec![0, 65535]).unwrap();
        img.save(&p).unwrap();
        assert!(matches!(load_mask(&p), Err(Error::Image { .. })));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load_image("/nonexistent/x.png"), Err(Error::Io { .. })));
    }

    #[test]
    fn image_round_trip_is_8_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.png");
        let img = GrayImage::new(2, 2, 1, vec![0.0, 1.0, 128.0 / 255.0, 7.0 / 255.0]).unwrap();
        save_image(&img, &p).unwrap();
        assert_eq!(load_image(&p).unwrap(), img);
    }
}
