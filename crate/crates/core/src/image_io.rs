//! PNG frame I/O, colour conversion and bicubic resampling.

use std::path::Path;

use image::imageops::{self, FilterType};
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{ensure, Error, Result};
use crate::tensor::{Real, Tensor};

/// BT.601 luma weights (full range).
pub const BT601: [f32; 3] = [0.299, 0.587, 0.114];

/// Loads an 8-bit PNG as a `[channels,h,w]` tensor in [0, 1]. RGB files are
/// converted to BT.601 luma when `channels == 1`.
pub fn load_frame(path: &Path, channels: usize) -> Result<Tensor<f32>> {
    ensure!(matches!(channels, 1 | 3), Invalid, "frames have 1 or 3 channels, got {channels}");
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let rgb_t = Tensor::from_fn(&[3, h, w], |i| {
        let (k, p) = (i / (h * w), i % (h * w));
        rgb.as_raw()[p * 3 + k] as f32 / 255.0
    });
    Ok(if channels == 3 {
        rgb_t
    } else if img.color().has_color() {
        luma(&rgb_t)
    } else {
        let g = img.to_luma8();
        Tensor::from_fn(&[1, h, w], |i| g.as_raw()[i] as f32 / 255.0)
    })
}

pub fn luma(rgb: &Tensor<f32>) -> Tensor<f32> {
    let (_, h, w) = rgb.chw();
    let hw = h * w;
    let d = rgb.data();
    Tensor::from_fn(&[1, h, w], |p| BT601[0] * d[p] + BT601[1] * d[hw + p] + BT601[2] * d[2 * hw + p])
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `[1|3,h,w]` tensor (values clamped to [0, 1]) as an 8-bit PNG.
pub fn save_frame<T: Real>(path: &Path, frame: &Tensor<T>) -> Result<()> {
    let (c, h, w) = frame.chw();
    ensure!(matches!(c, 1 | 3), Shape, "can only save 1 or 3 channel frames, got {c}");
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let hw = h * w;
    let d = frame.data();
    let result = if c == 3 {
        let buf: Vec<u8> = (0..hw * 3).map(|i| to_u8(d[(i % 3) * hw + i / 3].as_f64() as f32)).collect();
        RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer size").save(path)
    } else {
        let buf: Vec<u8> = d.iter().map(|v| to_u8(v.as_f64() as f32)).collect();
        GrayImage::from_raw(w as u32, h as u32, buf).expect("buffer size").save(path)
    };
    result.map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Bicubic (Catmull-Rom, antialiased when shrinking) resize of a `[c,h,w]` frame.
pub fn bicubic_resize(frame: &Tensor<f32>, oh: usize, ow: usize) -> Result<Tensor<f32>> {
    let (c, h, w) = frame.chw();
    ensure!(oh >= 1 && ow >= 1, Invalid, "resize target must be non-empty");
    let hw = h * w;
    let d = frame.data();
    let out: Vec<f32> = if c == 3 {
        let buf: Vec<f32> = (0..hw * 3).map(|i| d[(i % 3) * hw + i / 3]).collect();
        let img: ImageBuffer<Rgb<f32>, Vec<f32>> = ImageBuffer::from_raw(w as u32, h as u32, buf).expect("buffer size");
        let r = imageops::resize(&img, ow as u32, oh as u32, FilterType::CatmullRom).into_raw();
        (0..3 * oh * ow).map(|i| r[(i % (oh * ow)) * 3 + i / (oh * ow)]).collect()
    } else {
        let mut out = Vec::with_capacity(c * oh * ow);
        for k in 0..c {
            let img: ImageBuffer<Luma<f32>, Vec<f32>> =
                ImageBuffer::from_raw(w as u32, h as u32, d[k * hw..(k + 1) * hw].to_vec()).expect("buffer size");
            out.extend(imageops::resize(&img, ow as u32, oh as u32, FilterType::CatmullRom).into_raw());
        }
        out
    };
    Tensor::from_vec(&[c, oh, ow], out)
}

/// Bicubic downsampling by an integer factor; sizes must be divisible.
pub fn bicubic_downsample(frame: &Tensor<f32>, scale: usize) -> Result<Tensor<f32>> {
    let (_, h, w) = frame.chw();
    ensure!(
        scale >= 1 && h % scale == 0 && w % scale == 0,
        Shape,
        "frame {h}x{w} is not divisible by scale {scale}"
    );
    bicubic_resize(frame, h / scale, w / scale)
}

/// Writes channel `channel` of each tensor as a min-max normalised grayscale
/// PNG named `{prefix}{index}.png`.
pub fn dump_channel_maps<T: Real>(dir: &Path, prefix: &str, maps: &[Tensor<T>], channel: usize) -> Result<()> {
    for (i, m) in maps.iter().enumerate() {
        let (c, h, w) = m.chw();
        ensure!(channel < c, Invalid, "channel {channel} out of range for {c} channels");
        let plane: Vec<f64> = m.data()[channel * h * w..(channel + 1) * h * w].iter().map(|v| v.as_f64()).collect();
        let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let t = Tensor::from_vec(&[1, h, w], plane.iter().map(|v| (v - lo) / span).collect())?;
        save_frame(&dir.join(format!("{prefix}{}.png", i + 1)), &t)?;
    }
    Ok(())
}
