//! Netpbm images: P6 pixmaps for inputs, P5 graymaps for masks and heatmaps.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{GridMap, Tensor};

/// CLIP preprocessing constants (per-channel mean and std over `[0, 1]` pixels).
pub const CLIP_MEAN: [f64; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
pub const CLIP_STD: [f64; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];

/// Interleaved 8-bit RGB pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

/// 8-bit single-channel pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

struct Header {
    width: usize,
    height: usize,
    maxval: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2], path: &Path) -> Result<Header> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::format(
            path,
            format!("expected magic {}", String::from_utf8_lossy(magic)),
        ));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "truncated header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(path, "bad header number"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(path, "missing whitespace after maxval"));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::format(path, "zero image dimension"));
    }
    Ok(Header {
        width,
        height,
        maxval,
        offset: pos + 1,
    })
}

impl RgbImage {
    pub fn parse(bytes: &[u8], path: &Path) -> Result<Self> {
        let h = parse_header(bytes, b"P6", path)?;
        if h.maxval != 255 {
            return Err(Error::format(path, format!("maxval {} (only 255 supported)", h.maxval)));
        }
        let n = h.width * h.height * 3;
        let data = bytes
            .get(h.offset..h.offset + n)
            .ok_or_else(|| Error::format(path, "truncated pixel data"))?
            .to_vec();
        Ok(Self {
            width: h.width,
            height: h.height,
            data,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&bytes, path)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    /// Channel `ch` as `f64` in `[0, 1]`.
    fn channel(&self, ch: usize) -> Vec<f64> {
        self.data
            .iter()
            .skip(ch)
            .step_by(3)
            .map(|&v| v as f64 / 255.0)
            .collect()
    }

    /// Bilinear resize of the 8-bit image, rounding back to `u8`.
    pub fn resize(&self, width: usize, height: usize) -> RgbImage {
        let planes: Vec<Vec<f64>> = (0..3)
            .map(|ch| {
                bilinear_resize(&self.channel(ch), self.width, self.height, width, height)
            })
            .collect();
        let mut data = Vec::with_capacity(width * height * 3);
        for i in 0..width * height {
            for plane in &planes {
                data.push((plane[i] * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        RgbImage {
            width,
            height,
            data,
        }
    }
}

impl GrayImage {
    pub fn parse(bytes: &[u8], path: &Path) -> Result<Self> {
        let h = parse_header(bytes, b"P5", path)?;
        if h.maxval == 0 || h.maxval > 255 {
            return Err(Error::format(path, format!("maxval {} (must be 1..=255)", h.maxval)));
        }
        let n = h.width * h.height;
        let data = bytes
            .get(h.offset..h.offset + n)
            .ok_or_else(|| Error::format(path, "truncated pixel data"))?
            .to_vec();
        Ok(Self {
            width: h.width,
            height: h.height,
            data,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&bytes, path)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    /// A 0/255 graymap of a binary grid at one pixel per cell.
    pub fn from_binary_grid(grid: &GridMap) -> Self {
        GrayImage {
            width: grid.cols(),
            height: grid.rows(),
            data: grid
                .values()
                .iter()
                .map(|&v| if v != 0.0 { 255 } else { 0 })
                .collect(),
        }
    }
}

/// Half-pixel-centre bilinear interpolation with clamped borders.
pub fn bilinear_resize(
    src: &[f64],
    src_w: usize,
    src_h: usize,
    dst_w: usize,
    dst_h: usize,
) -> Vec<f64> {
    let coord = |d: usize, src_n: usize, dst_n: usize| -> (usize, usize, f64) {
        let s = ((d as f64 + 0.5) * src_n as f64 / dst_n as f64 - 0.5).clamp(0.0, (src_n - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(src_n - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = Vec::with_capacity(dst_w * dst_h);
    for y in 0..dst_h {
        let (y0, y1, fy) = coord(y, src_h, dst_h);
        for x in 0..dst_w {
            let (x0, x1, fx) = coord(x, src_w, dst_w);
            let top = src[y0 * src_w + x0] * (1.0 - fx) + src[y0 * src_w + x1] * fx;
            let bottom = src[y1 * src_w + x0] * (1.0 - fx) + src[y1 * src_w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Resizes to `image_size²` and applies the CLIP channel normalization,
/// returning a `[3, image_size, image_size]` tensor.
pub fn preprocess(img: &RgbImage, image_size: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(3 * image_size * image_size);
    for ch in 0..3 {
        let plane = bilinear_resize(&img.channel(ch), img.width, img.height, image_size, image_size);
        data.extend(plane.iter().map(|&v| ((v - CLIP_MEAN[ch]) / CLIP_STD[ch]) as f32));
    }
    Tensor::new(vec![3, image_size, image_size], data)
}

pub fn load_image(path: impl AsRef<Path>, image_size: usize) -> Result<Tensor> {
    preprocess(&RgbImage::read(path)?, image_size)
}

/// Max-pools a pixel mask onto a `rows × cols` grid: a cell is foreground
/// when any pixel it covers is nonzero.
pub fn pool_mask(mask: &GrayImage, rows: usize, cols: usize) -> Result<GridMap> {
    if rows == 0 || cols == 0 {
        return Err(Error::Shape(format!("empty grid {rows}×{cols}")));
    }
    let mut out = GridMap::zeros(rows, cols);
    for y in 0..mask.height {
        let r = y * rows / mask.height;
        for x in 0..mask.width {
            if mask.data[y * mask.width + x] != 0 {
                out.set(r, x * cols / mask.width, 1.0);
            }
        }
    }
    // A mask coarser than the grid leaves uncovered cells; spread each pixel
    // over every cell its footprint overlaps.
    if mask.height < rows || mask.width < cols {
        for r in 0..rows {
            let y = r * mask.height / rows;
            for c in 0..cols {
                let x = c * mask.width / cols;
                if mask.data[y * mask.width + x] != 0 {
                    out.set(r, c, 1.0);
                }
            }
        }
    }
    Ok(out)
}

pub fn load_mask(path: impl AsRef<Path>, rows: usize, cols: usize) -> Result<GridMap> {
    pool_mask(&GrayImage::read(path)?, rows, cols)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rgb(w: usize, h: usize, px: &[[u8; 3]]) -> RgbImage {
        RgbImage {
            width: w,
            height: h,
            data: px.iter().flatten().copied().collect(),
        }
    }

    #[test]
    fn encode_parse_round_trip() {
        let img = rgb(2, 1, &[[1, 2, 3], [250, 0, 9]]);
        let back = RgbImage::parse(&img.encode(), Path::new("x.ppm")).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn header_with_comment() {
        let mut bytes = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([0, 255]);
        let g = GrayImage::parse(&bytes, Path::new("m.pgm")).unwrap();
        assert_eq!(g.data, vec![0, 255]);
    }

    #[test]
    fn wrong_magic_and_truncation() {
        let img = rgb(1, 1, &[[0, 0, 0]]);
        assert!(GrayImage::parse(&img.encode(), Path::new("a")).is_err());
        let mut bytes = img.encode();
        bytes.pop();
        assert!(matches!(
            RgbImage::parse(&bytes, Path::new("a")),
            Err(Error::Format { .. })
        ));
        assert!(RgbImage::parse(b"P6\n1 x\n255\n", Path::new("a")).is_err());
    }

    #[test]
    fn mid_gray_is_constant_per_channel() {
        let img = rgb(3, 2, &[[128, 128, 128]; 6]);
        let t = preprocess(&img, 4).unwrap();
        for ch in 0..3 {
            let plane = &t.data()[ch * 16..(ch + 1) * 16];
            assert!(plane.iter().all(|&v| v == plane[0]));
            let want = (128.0 / 255.0 - CLIP_MEAN[ch]) / CLIP_STD[ch];
            assert!((plane[0] as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn single_pixel_upscales_to_constant() {
        let img = rgb(1, 1, &[[10, 200, 77]]);
        let t = preprocess(&img, 5).unwrap();
        for ch in 0..3 {
            let plane = &t.data()[ch * 25..(ch + 1) * 25];
            assert!(plane.iter().all(|&v| v == plane[0]));
        }
    }

    #[test]
    fn checkerboard_matches_interpolation_oracle() {
        // Independent oracle: sample positions (d + 0.5)·2/4 − 0.5 on a 2×2
        // source give {−0.25→0, 0.25, 0.75, 1.25→1} with weights on the
        // clamped neighbours.
        let src = [1.0, 0.0, 0.0, 1.0];
        let pos = [0.0, 0.25, 0.75, 1.0];
        let got = bilinear_resize(&src, 2, 2, 4, 4);
        for y in 0..4 {
            for x in 0..4 {
                let (fy, fx) = (pos[y], pos[x]);
                let want = src[0] * (1.0 - fy) * (1.0 - fx)
                    + src[1] * (1.0 - fy) * fx
                    + src[2] * fy * (1.0 - fx)
                    + src[3] * fy * fx;
                assert!((got[y * 4 + x] - want).abs() < 1e-12, "({y},{x})");
            }
        }
    }

    fn gray(w: usize, h: usize, f: impl Fn(usize, usize) -> u8) -> GrayImage {
        let mut data = Vec::new();
        for y in 0..h {
            for x in 0..w {
                data.push(f(x, y));
            }
        }
        GrayImage {
            width: w,
            height: h,
            data,
        }
    }

    #[test]
    fn mask_pooling_cases() {
        let full = pool_mask(&gray(8, 8, |_, _| 255), 4, 4).unwrap();
        assert!(full.values().iter().all(|&v| v == 1.0));

        let empty = pool_mask(&gray(8, 8, |_, _| 0), 4, 4).unwrap();
        assert_eq!(empty.count_nonzero(), 0);

        let one = pool_mask(&gray(8, 8, |x, y| if (x, y) == (5, 2) { 255 } else { 0 }), 4, 4)
            .unwrap();
        assert_eq!(one.count_nonzero(), 1);
        assert_eq!(one.get(1, 2), 1.0);
    }

    #[test]
    fn mask_coarser_than_grid_covers_footprint() {
        let m = pool_mask(&gray(2, 2, |x, y| if x == 0 && y == 0 { 255 } else { 0 }), 4, 4)
            .unwrap();
        assert_eq!(m.count_nonzero(), 4);
        assert_eq!(m.get(1, 1), 1.0);
        assert_eq!(m.get(2, 2), 0.0);
    }
}
