//! PNG and file helpers.

use std::fs;
use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Result, XfrError};
use crate::tensor::Tensor;

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| XfrError::io(parent, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| XfrError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| XfrError::io(path, e))
}

fn encode_png<P, C>(img: &ImageBuffer<P, C>, path: &Path) -> Result<Vec<u8>>
where
    P: image::Pixel + image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| XfrError::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    Ok(buf.into_inner())
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| XfrError::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Quantizes a `[3, h, w]` tensor in `[0, 1]` to 8-bit RGB.
pub fn tensor_to_rgb(t: &Tensor<f32>) -> Result<RgbImage> {
    let (c, h, w) = t.chw().filter(|s| s.0 == 3).ok_or_else(|| XfrError::ShapeMismatch {
        expected: vec![3, 0, 0],
        actual: t.shape().to_vec(),
    })?;
    let d = t.data();
    let hw = h * w;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([q(d[i]), q(d[hw + i]), q(d[2 * hw + i])])
    }))
    .map(|img| {
        debug_assert_eq!(c, 3);
        img
    })
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let hw = h * w;
    let mut data = vec![0.0f32; 3 * hw];
    for (x, y, px) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for ch in 0..3 {
            data[ch * hw + i] = px[ch] as f32 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data).expect("sized")
}

pub fn save_rgb(t: &Tensor<f32>, path: &Path) -> Result<()> {
    let img = tensor_to_rgb(t)?;
    write_atomic(path, &encode_png(&img, path)?)
}

pub fn load_rgb(path: &Path) -> Result<Tensor<f32>> {
    Ok(rgb_to_tensor(&open(path)?.to_rgb8()))
}

/// Binary pixel mask, row-major, `true` = inside.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), width * height, "mask size");
        BinaryMask {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Self {
        BinaryMask::new(width, height, vec![value; width * height])
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }
}

/// Stores a mask as 8-bit grayscale with values in `{0, 255}`.
pub fn save_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    let img = GrayImage::from_fn(mask.width as u32, mask.height as u32, |x, y| {
        Luma([if mask.get(x as usize, y as usize) { 255 } else { 0 }])
    });
    write_atomic(path, &encode_png(&img, path)?)
}

pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let img = open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(BinaryMask::new(
        w,
        h,
        img.pixels().map(|p| p[0] >= 128).collect(),
    ))
}

/// 16-bit grayscale PNG of values in `[0, 1]`.
pub fn save_gray16(values: &[f32], width: usize, height: usize, path: &Path) -> Result<()> {
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(width as u32, height as u32, |x, y| {
            let v = values[y as usize * width + x as usize].clamp(0.0, 1.0);
            Luma([(v * 65535.0).round() as u16])
        });
    write_atomic(path, &encode_png(&img, path)?)
}

pub fn load_gray16(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let img = open(path)?.to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((
        img.pixels().map(|p| p[0] as f32 / 65535.0).collect(),
        w,
        h,
    ))
}

/// Writes an arbitrary RGB8 raster.
pub fn save_rgb_image(img: &RgbImage, path: &Path) -> Result<()> {
    write_atomic(path, &encode_png(img, path)?)
}
