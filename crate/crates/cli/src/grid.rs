//! Image grids written as binary PGM/PPM or PNG.

use std::path::Path;

use gpc::Tensor;

const BORDER: usize = 1;

/// Tile layout of one image: side length and channel count. 3072 features
/// are read as channel-planar 32x32 RGB, square counts as greyscale.
fn layout(features: usize) -> Result<(usize, usize), String> {
    if features == 3 * 32 * 32 {
        return Ok((32, 3));
    }
    let side = (features as f64).sqrt().round() as usize;
    if side * side == features {
        Ok((side, 1))
    } else {
        Err(format!("cannot lay out {features} features as a square image"))
    }
}

/// One row of tiles separated by a dark border, values clamped to `[0, 1]`.
/// Returns width, height, channels and interleaved bytes.
pub fn render(images: &Tensor, features: usize) -> Result<(usize, usize, usize, Vec<u8>), String> {
    let (side, ch) = layout(features)?;
    let n = images.rows();
    let (w, h) = (n * (side + BORDER) + BORDER, side + 2 * BORDER);
    let mut buf = vec![0u8; w * h * ch];
    for k in 0..n {
        let img = images.row(k);
        for y in 0..side {
            for x in 0..side {
                for c in 0..ch {
                    let v = img[c * side * side + y * side + x].clamp(0.0, 1.0);
                    let (px, py) = (BORDER + k * (side + BORDER) + x, BORDER + y);
                    buf[(py * w + px) * ch + c] = (v * 255.0).round() as u8;
                }
            }
        }
    }
    Ok((w, h, ch, buf))
}

pub fn write(path: &Path, images: &Tensor, features: usize) -> Result<(), String> {
    let (w, h, ch, buf) = render(images, features)?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    let err = |e: &dyn std::fmt::Display| format!("{}: {e}", path.display());
    match ext.as_str() {
        "png" => {
            let color = if ch == 1 { image::ColorType::L8 } else { image::ColorType::Rgb8 };
            image::save_buffer(path, &buf, w as u32, h as u32, color).map_err(|e| err(&e))
        }
        "pgm" | "ppm" => {
            let magic = if ch == 1 { "P5" } else { "P6" };
            let mut bytes = format!("{magic}\n{w} {h}\n255\n").into_bytes();
            bytes.extend_from_slice(&buf);
            std::fs::write(path, bytes).map_err(|e| err(&e))
        }
        _ => Err(format!("{}: unsupported image extension (use .png or .pgm)", path.display())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_places_tiles_between_borders() {
        let t = Tensor::new(vec![2, 4], vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5, 0.5, 2.0]).unwrap();
        let (w, h, ch, buf) = render(&t, 4).unwrap();
        assert_eq!((w, h, ch), (7, 4, 1));
        assert_eq!(buf[w + 1], 255);
        assert_eq!(buf[w + 2], 0);
        assert_eq!(buf[2 * w + 4], 128);
        assert_eq!(buf[2 * w + 5], 255);
        assert_eq!(buf[0], 0);
    }

    #[test]
    fn rejects_non_square() {
        assert!(render(&Tensor::zeros(&[1, 5]), 5).is_err());
    }
}
