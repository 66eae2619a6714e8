//! Binary Netpbm I/O: P6 (RGB) and P5 (grayscale), 8-bit, mapped to `[0, 1]`
//! by `/255`.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat};

use crate::degrade::ImageBuf;
use crate::error::{Error, Result};

pub fn decode_pnm(bytes: &[u8]) -> Result<ImageBuf> {
    let magic = bytes.get(..2).unwrap_or_default();
    if magic != b"P5" && magic != b"P6" {
        return Err(Error::ImageFormat(format!(
            "expected binary PGM (P5) or PPM (P6), found magic {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let img =
        image::load_from_memory_with_format(bytes, ImageFormat::Pnm).map_err(|e| Error::ImageFormat(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if magic == b"P5" {
        ImageBuf::from_u8(h, w, 1, img.to_luma8().as_raw())
    } else {
        ImageBuf::from_u8(h, w, 3, img.to_rgb8().as_raw())
    }
}

pub fn encode_pnm(img: &ImageBuf) -> Result<Vec<u8>> {
    let (subtype, color) = match img.channels() {
        1 => (PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8),
        _ => (PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8),
    };
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(subtype)
        .write_image(&img.to_u8(), img.width() as u32, img.height() as u32, color)
        .map_err(|e| Error::ImageFormat(e.to_string()))?;
    Ok(out)
}

pub fn read_pnm(path: &Path) -> Result<ImageBuf> {
    decode_pnm(&fs::read(path)?)
}

pub fn write_pnm(path: &Path, img: &ImageBuf) -> Result<()> {
    fs::write(path, encode_pnm(img)?)?;
    Ok(())
}

pub fn encode_png(img: &ImageBuf) -> Result<Vec<u8>> {
    let color = if img.channels() == 1 {
        ExtendedColorType::L8
    } else {
        ExtendedColorType::Rgb8
    };
    let mut out = Cursor::new(Vec::new());
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(&img.to_u8(), img.width() as u32, img.height() as u32, color)
        .map_err(|e| Error::ImageFormat(e.to_string()))?;
    Ok(out.into_inner())
}

/// Offset of the pixel payload inside a binary Netpbm file.
pub fn pnm_payload(bytes: &[u8]) -> Result<&[u8]> {
    // magic, width, height, maxval, each followed by whitespace; '#' starts a comment.
    let mut fields = 0;
    let mut i = 0;
    while fields < 4 {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            i += 1;
        }
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        fields += 1;
    }
    if i >= bytes.len() {
        return Err(Error::ImageFormat("truncated Netpbm header".into()));
    }
    Ok(&bytes[i + 1..])
}
