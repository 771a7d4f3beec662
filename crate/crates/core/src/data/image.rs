use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::Tensor;

/// A raster image, row-major `H × W × C`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::DimensionMismatch(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::DimensionMismatch(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::parse("image", format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

/// Source coordinate for output index `i` when mapping `n_in` samples onto
/// `n_out`, with the corner samples of both grids aligned.
fn source_coord(i: usize, n_in: usize, n_out: usize) -> f64 {
    if n_out == 1 {
        (n_in - 1) as f64 / 2.0
    } else {
        i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
    }
}

/// Bilinear resize to `height × width` (corners aligned), channel
/// conversion to `channels` (averaging to gray, or replicating gray), and
/// clamping to `[0, 1]`. Returns a `1 × H × W × C` tensor.
pub fn preprocess_frame(image: &Image, height: usize, width: usize, channels: usize) -> Result<Tensor> {
    if height == 0 || width == 0 || channels == 0 {
        return Err(Error::DimensionMismatch("target size must be positive".into()));
    }
    let cin = image.channels;
    if !(cin == channels || channels == 1 || cin == 1) {
        return Err(Error::DimensionMismatch(format!(
            "cannot convert {cin}-channel image to {channels} channels"
        )));
    }
    let mut out = Vec::with_capacity(height * width * channels);
    let mut px = vec![0.0; cin];
    for i in 0..height {
        let sy = source_coord(i, image.height, height);
        let y0 = (sy.floor() as usize).min(image.height - 1);
        let y1 = (y0 + 1).min(image.height - 1);
        let fy = sy - y0 as f64;
        for j in 0..width {
            let sx = source_coord(j, image.width, width);
            let x0 = (sx.floor() as usize).min(image.width - 1);
            let x1 = (x0 + 1).min(image.width - 1);
            let fx = sx - x0 as f64;
            for (c, p) in px.iter_mut().enumerate() {
                let top = image.at(y0, x0, c) * (1.0 - fx) + image.at(y0, x1, c) * fx;
                let bottom = image.at(y1, x0, c) * (1.0 - fx) + image.at(y1, x1, c) * fx;
                *p = top * (1.0 - fy) + bottom * fy;
            }
            if cin == channels {
                out.extend(px.iter().map(|v| v.clamp(0.0, 1.0)));
            } else if channels == 1 {
                out.push((px.iter().sum::<f64>() / cin as f64).clamp(0.0, 1.0));
            } else {
                out.extend(std::iter::repeat_n(px[0].clamp(0.0, 1.0), channels));
            }
        }
    }
    Tensor::new(vec![1, height, width, channels], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_is_identity() {
        let data: Vec<f64> = (0..12).map(|i| f64::from(i) / 11.0).collect();
        let img = Image::new(3, 4, 1, data.clone()).unwrap();
        assert_eq!(preprocess_frame(&img, 3, 4, 1).unwrap().data(), &data[..]);
    }

    #[test]
    fn constant_stays_constant() {
        let img = Image::new(5, 3, 1, vec![0.3; 15]).unwrap();
        let t = preprocess_frame(&img, 7, 9, 1).unwrap();
        assert!(t.data().iter().all(|v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn checkerboard_upscale_matches_formula() {
        let img = Image::new(2, 2, 1, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let t = preprocess_frame(&img, 4, 4, 1).unwrap();
        // Bilinear on the unit square: f(u, v) = u + v − 2uv with u, v = i/3.
        for i in 0..4 {
            for j in 0..4 {
                let (u, v) = (j as f64 / 3.0, i as f64 / 3.0);
                let expected = u + v - 2.0 * u * v;
                assert!((t.data()[i * 4 + j] - expected).abs() < 1e-15);
            }
        }
        assert_eq!(t.data()[0], 0.0);
        assert_eq!(t.data()[3], 1.0);
        assert_eq!(t.data()[12], 1.0);
        assert_eq!(t.data()[15], 0.0);
    }

    #[test]
    fn color_to_gray_averages() {
        let img = Image::new(1, 1, 3, vec![0.0, 0.3, 0.6]).unwrap();
        let t = preprocess_frame(&img, 1, 1, 1).unwrap();
        assert!((t.data()[0] - 0.3).abs() < 1e-15);
        let gray = Image::new(1, 1, 1, vec![0.4]).unwrap();
        assert_eq!(preprocess_frame(&gray, 1, 1, 3).unwrap().data(), &[0.4, 0.4, 0.4]);
    }

    #[test]
    fn zero_sized_images_rejected() {
        assert!(Image::new(0, 3, 1, vec![]).is_err());
        assert!(Image::new(1, 1, 1, vec![1.5]).is_err());
    }
}
