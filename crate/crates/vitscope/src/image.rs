//! Image decoding (PNG, binary PPM), PNG encoding, resizing, and the 8-bit
//! RGB bitmap type used for all rendered output.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};

/// Interleaved 8-bit RGB bitmap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rgb8Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Rgb8Image {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::ShapeMismatch(format!(
                "rgb8 {width}x{height} wants {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Rgb8Image {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Rgb8Image {
            width,
            height,
            data: vec![value; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let off = (y * self.width + x) * 3;
        [self.data[off], self.data[off + 1], self.data[off + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let off = (y * self.width + x) * 3;
        self.data[off..off + 3].copy_from_slice(&rgb);
    }
}

/// Decode a PNG or binary PPM (P6) image to RGB8, dispatching on magic bytes.
pub fn load_image(path: impl AsRef<Path>) -> Result<Rgb8Image> {
    let bytes = fs::read(&path)?;
    decode_image(&bytes)
}

pub fn decode_image(bytes: &[u8]) -> Result<Rgb8Image> {
    if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        decode_png_rgb8(bytes)
    } else if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else {
        Err(Error::Format(
            "unrecognized image format (expected PNG or binary PPM)".into(),
        ))
    }
}

fn decode_png_rgb8(bytes: &[u8]) -> Result<Rgb8Image> {
    let mut decoder = png::Decoder::new(bytes);
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let pixels = &buf[..info.buffer_size()];
    let mut rgb = vec![0u8; w * h * 3];
    match info.color_type {
        png::ColorType::Rgb => rgb.copy_from_slice(pixels),
        png::ColorType::Rgba => {
            for (dst, src) in rgb.chunks_exact_mut(3).zip(pixels.chunks_exact(4)) {
                dst.copy_from_slice(&src[..3]);
            }
        }
        png::ColorType::Grayscale => {
            for (dst, &g) in rgb.chunks_exact_mut(3).zip(pixels.iter()) {
                dst.fill(g);
            }
        }
        png::ColorType::GrayscaleAlpha => {
            for (dst, src) in rgb.chunks_exact_mut(3).zip(pixels.chunks_exact(2)) {
                dst.fill(src[0]);
            }
        }
        other => {
            return Err(Error::Format(format!(
                "png color type {other:?} not supported"
            )))
        }
    }
    Rgb8Image::new(w, h, rgb)
}

fn decode_ppm(bytes: &[u8]) -> Result<Rgb8Image> {
    // Header: "P6" <ws> width <ws> height <ws> maxval <single ws> data.
    // '#' starts a comment running to end of line.
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("ppm: truncated header".into()));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap();
        *field = text
            .parse()
            .map_err(|_| Error::Format("ppm: bad header number".into()))?;
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!(
            "ppm: maxval {maxval} out of supported range 1..=255"
        )));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Format("ppm: missing separator before data".into()));
    }
    pos += 1;
    let want = width * height * 3;
    if bytes.len() < pos + want {
        return Err(Error::Format(format!(
            "ppm: payload truncated, wanted {want} bytes"
        )));
    }
    let mut data = bytes[pos..pos + want].to_vec();
    if maxval != 255 {
        for v in &mut data {
            *v = ((*v as usize * 255 + maxval / 2) / maxval) as u8;
        }
    }
    Rgb8Image::new(width, height, data)
}

/// Encode an RGB8 bitmap as a PNG file.
pub fn save_png(image: &Rgb8Image, path: impl AsRef<Path>) -> Result<()> {
    if let Some(parent) = path.as_ref().parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let file = fs::File::create(path)?;
    let mut encoder = png::Encoder::new(
        BufWriter::new(file),
        image.width as u32,
        image.height as u32,
    );
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Format(format!("png encode: {e}")))?;
    writer
        .write_image_data(&image.data)
        .map_err(|e| Error::Format(format!("png encode: {e}")))?;
    Ok(())
}

/// Encode an 8-bit grayscale PNG (the format segmentation masks use when
/// ids are stored as gray values).
pub fn save_png_gray8(
    data: &[u8],
    width: usize,
    height: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    if data.len() != width * height {
        return Err(Error::ShapeMismatch(format!(
            "gray8 {width}x{height} wants {} bytes, got {}",
            width * height,
            data.len()
        )));
    }
    if let Some(parent) = path.as_ref().parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let file = fs::File::create(path)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Format(format!("png encode: {e}")))?;
    writer
        .write_image_data(data)
        .map_err(|e| Error::Format(format!("png encode: {e}")))?;
    Ok(())
}

/// Single-channel integer-id raster, as decoded from a segmentation PNG.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdRaster {
    pub width: usize,
    pub height: usize,
    pub ids: Vec<u32>,
}

/// Decode a segmentation PNG keeping class ids intact: indexed PNGs yield
/// palette indices, 8-bit grayscale PNGs yield gray values.
pub fn load_mask_png(path: impl AsRef<Path>) -> Result<IdRaster> {
    let bytes = fs::read(&path)?;
    let mut decoder = png::Decoder::new(bytes.as_slice());
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Format(format!("mask png: {e}")))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("mask png: {e}")))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let ok = matches!(
        info.color_type,
        png::ColorType::Indexed | png::ColorType::Grayscale
    ) && info.bit_depth == png::BitDepth::Eight;
    if !ok {
        return Err(Error::Format(format!(
            "mask png must be 8-bit indexed or grayscale, got {:?}/{:?}",
            info.color_type, info.bit_depth
        )));
    }
    let ids = buf[..info.buffer_size()].iter().map(|&b| b as u32).collect();
    Ok(IdRaster {
        width: w,
        height: h,
        ids,
    })
}

/// Bilinear resize of interleaved f32 pixel data (pixel-center sampling).
pub fn bilinear_resize(
    src: &[f32],
    src_w: usize,
    src_h: usize,
    channels: usize,
    dst_w: usize,
    dst_h: usize,
) -> Vec<f32> {
    assert_eq!(src.len(), src_w * src_h * channels);
    assert!(dst_w > 0 && dst_h > 0 && src_w > 0 && src_h > 0);
    let mut out = vec![0.0f32; dst_w * dst_h * channels];
    let sx = src_w as f32 / dst_w as f32;
    let sy = src_h as f32 / dst_h as f32;
    for dy in 0..dst_h {
        let fy = ((dy as f32 + 0.5) * sy - 0.5).clamp(0.0, (src_h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(src_h - 1);
        let wy = fy - y0 as f32;
        for dx in 0..dst_w {
            let fx = ((dx as f32 + 0.5) * sx - 0.5).clamp(0.0, (src_w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(src_w - 1);
            let wx = fx - x0 as f32;
            for c in 0..channels {
                let p00 = src[(y0 * src_w + x0) * channels + c];
                let p01 = src[(y0 * src_w + x1) * channels + c];
                let p10 = src[(y1 * src_w + x0) * channels + c];
                let p11 = src[(y1 * src_w + x1) * channels + c];
                let top = p00 + (p01 - p00) * wx;
                let bot = p10 + (p11 - p10) * wx;
                out[(dy * dst_w + dx) * channels + c] = top + (bot - top) * wy;
            }
        }
    }
    out
}

/// Nearest-neighbor resize for id rasters (interpolation would corrupt ids).
pub fn nearest_resize_ids(raster: &IdRaster, dst_w: usize, dst_h: usize) -> IdRaster {
    let mut ids = vec![0u32; dst_w * dst_h];
    for dy in 0..dst_h {
        let sy = (((dy as f32 + 0.5) * raster.height as f32 / dst_h as f32) as usize)
            .min(raster.height - 1);
        for dx in 0..dst_w {
            let sx = (((dx as f32 + 0.5) * raster.width as f32 / dst_w as f32) as usize)
                .min(raster.width - 1);
            ids[dy * dst_w + dx] = raster.ids[sy * raster.width + sx];
        }
    }
    IdRaster {
        width: dst_w,
        height: dst_h,
        ids,
    }
}

/// Tile equally sized bitmaps into a grid, left-to-right then top-to-bottom,
/// with a 2-pixel white gutter. Used for the contact-sheet output.
pub fn contact_sheet(tiles: &[Rgb8Image], columns: usize) -> Result<Rgb8Image> {
    if tiles.is_empty() || columns == 0 {
        return Err(Error::InvalidArgument(
            "contact sheet needs at least one tile and one column".into(),
        ));
    }
    let (tw, th) = (tiles[0].width, tiles[0].height);
    if tiles.iter().any(|t| t.width != tw || t.height != th) {
        return Err(Error::ShapeMismatch(
            "contact sheet tiles must share dimensions".into(),
        ));
    }
    const GUTTER: usize = 2;
    let rows = tiles.len().div_ceil(columns);
    let width = columns * tw + (columns - 1) * GUTTER;
    let height = rows * th + (rows - 1) * GUTTER;
    let mut sheet = Rgb8Image::filled(width, height, 255);
    for (idx, tile) in tiles.iter().enumerate() {
        let (gy, gx) = (idx / columns, idx % columns);
        let ox = gx * (tw + GUTTER);
        let oy = gy * (th + GUTTER);
        for y in 0..th {
            let dst = ((oy + y) * width + ox) * 3;
            let src = y * tw * 3;
            sheet.data[dst..dst + tw * 3].copy_from_slice(&tile.data[src..src + tw * 3]);
        }
    }
    Ok(sheet)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip_values() {
        let mut ppm = b"P6\n# comment\n2 2\n255\n".to_vec();
        ppm.extend_from_slice(&[
            255, 0, 0, 0, 255, 0, //
            0, 0, 255, 10, 20, 30,
        ]);
        let img = decode_image(&ppm).unwrap();
        assert_eq!((img.width, img.height), (2, 2));
        assert_eq!(img.pixel(0, 0), [255, 0, 0]);
        assert_eq!(img.pixel(1, 1), [10, 20, 30]);
    }

    #[test]
    fn ppm_rejects_truncation() {
        let ppm = b"P6 2 2 255 \x00\x01".to_vec();
        assert!(decode_image(&ppm).is_err());
    }

    #[test]
    fn png_roundtrip() {
        let img = Rgb8Image::new(3, 2, (0..18).map(|v| v as u8 * 10).collect()).unwrap();
        let dir = std::env::temp_dir().join("vitscope_image_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.png");
        save_png(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(img, back);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn bilinear_constant_is_exact() {
        let src = vec![0.7f32; 4 * 4 * 3];
        let out = bilinear_resize(&src, 4, 4, 3, 9, 5);
        assert!(out.iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn bilinear_identity_when_same_size() {
        let src: Vec<f32> = (0..12).map(|v| v as f32).collect();
        let out = bilinear_resize(&src, 2, 2, 3, 2, 2);
        assert_eq!(src, out);
    }

    #[test]
    fn gray_png_roundtrips_ids() {
        let ids: Vec<u8> = vec![0, 1, 2, 7];
        let dir = std::env::temp_dir().join("vitscope_image_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("mask.png");
        save_png_gray8(&ids, 2, 2, &path).unwrap();
        let raster = load_mask_png(&path).unwrap();
        assert_eq!(raster.ids, vec![0, 1, 2, 7]);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn nearest_preserves_id_set() {
        let raster = IdRaster {
            width: 2,
            height: 2,
            ids: vec![0, 7, 7, 3],
        };
        let up = nearest_resize_ids(&raster, 8, 8);
        assert_eq!(up.ids.len(), 64);
        assert!(up.ids.iter().all(|id| [0, 3, 7].contains(id)));
    }

    #[test]
    fn contact_sheet_places_tiles() {
        let a = Rgb8Image::filled(4, 4, 10);
        let b = Rgb8Image::filled(4, 4, 200);
        let sheet = contact_sheet(&[a, b], 2).unwrap();
        assert_eq!((sheet.width, sheet.height), (10, 4));
        assert_eq!(sheet.pixel(0, 0), [10, 10, 10]);
        assert_eq!(sheet.pixel(6, 0), [200, 200, 200]);
        assert_eq!(sheet.pixel(4, 0), [255, 255, 255]); // gutter
    }
}
