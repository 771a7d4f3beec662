use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// Dense row-major array. Activations use `N × H × W × C` (channels
/// innermost); convolution kernels use `KH × KW × C_in × C_out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::DimensionMismatch(format!(
                "tensor shape {shape:?} must be non-empty with positive extents"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::DimensionMismatch(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        ensure_finite(&data, || "tensor".into())?;
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(N, H, W, C)` for a rank-4 activation tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, h, w, c] => Ok((n, h, w, c)),
            _ => Err(Error::DimensionMismatch(format!(
                "expected an N x H x W x C tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[1..].iter().product::<usize>();
        &self.data[i * cols..(i + 1) * cols]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// No padding: `out = ⌊(in − k) / stride⌋ + 1`.
    Valid,
    /// Zero padding: `out = ⌈in / stride⌉`, padding split with the extra
    /// row or column at the bottom/right.
    Same,
}

/// Geometry of one 2-D convolution over an NHWC batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub oh: usize,
    pub ow: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

pub(crate) fn output_extent(input: usize, kernel: usize, stride: usize, padding: Padding) -> Option<usize> {
    if stride == 0 || kernel == 0 || input == 0 {
        return None;
    }
    match padding {
        Padding::Valid => (input >= kernel).then(|| (input - kernel) / stride + 1),
        Padding::Same => Some(input.div_ceil(stride)),
    }
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n: usize,
        h: usize,
        w: usize,
        cin: usize,
        kh: usize,
        kw: usize,
        cout: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let oh = output_extent(h, kh, stride, padding);
        let ow = output_extent(w, kw, stride, padding);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::DimensionMismatch(format!(
                "{kh}x{kw} convolution with stride {stride} ({padding:?}) does not fit a {h}x{w} input"
            )));
        };
        let (pad_top, pad_left) = match padding {
            Padding::Valid => (0, 0),
            Padding::Same => {
                let ph = ((oh - 1) * stride + kh).saturating_sub(h);
                let pw = ((ow - 1) * stride + kw).saturating_sub(w);
                (ph / 2, pw / 2)
            }
        };
        Ok(ConvGeom {
            n,
            h,
            w,
            cin,
            oh,
            ow,
            cout,
            kh,
            kw,
            stride,
            pad_top,
            pad_left,
        })
    }

    pub fn input_len(&self) -> usize {
        self.n * self.h * self.w * self.cin
    }

    pub fn output_len(&self) -> usize {
        self.n * self.oh * self.ow * self.cout
    }

    pub fn kernel_len(&self) -> usize {
        self.kh * self.kw * self.cin * self.cout
    }

    /// Input coordinate for output `o` and kernel tap `k`, if inside the image.
    #[inline]
    fn source(o: usize, k: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * stride + k).checked_sub(pad)?;
        (pos < extent).then_some(pos)
    }

    pub fn forward(&self, x: &[f64], kernel: &[f64]) -> Vec<f64> {
        let g = self;
        let mut y = vec![0.0; g.output_len()];
        for b in 0..g.n {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let out_at = ((b * g.oh + oy) * g.ow + ox) * g.cout;
                    let out = &mut y[out_at..out_at + g.cout];
                    for ky in 0..g.kh {
                        let Some(iy) = Self::source(oy, ky, g.stride, g.pad_top, g.h) else {
                            continue;
                        };
                        for kx in 0..g.kw {
                            let Some(ix) = Self::source(ox, kx, g.stride, g.pad_left, g.w) else {
                                continue;
                            };
                            let in_at = ((b * g.h + iy) * g.w + ix) * g.cin;
                            let w_at = (ky * g.kw + kx) * g.cin * g.cout;
                            for ci in 0..g.cin {
                                let xv = x[in_at + ci];
                                if xv == 0.0 {
                                    continue;
                                }
                                let wr = &kernel[w_at + ci * g.cout..w_at + (ci + 1) * g.cout];
                                for (o, wv) in out.iter_mut().zip(wr) {
                                    *o += xv * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    /// Accumulates kernel gradients into `dkernel` and returns the input
    /// gradient.
    pub fn backward(&self, x: &[f64], kernel: &[f64], dy: &[f64], dkernel: &mut [f64]) -> Vec<f64> {
        let g = self;
        let mut dx = vec![0.0; g.input_len()];
        for b in 0..g.n {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let out_at = ((b * g.oh + oy) * g.ow + ox) * g.cout;
                    let gout = &dy[out_at..out_at + g.cout];
                    if gout.iter().all(|v| *v == 0.0) {
                        continue;
                    }
                    for ky in 0..g.kh {
                        let Some(iy) = Self::source(oy, ky, g.stride, g.pad_top, g.h) else {
                            continue;
                        };
                        for kx in 0..g.kw {
                            let Some(ix) = Self::source(ox, kx, g.stride, g.pad_left, g.w) else {
                                continue;
                            };
                            let in_at = ((b * g.h + iy) * g.w + ix) * g.cin;
                            let w_at = (ky * g.kw + kx) * g.cin * g.cout;
                            for ci in 0..g.cin {
                                let span = w_at + ci * g.cout..w_at + (ci + 1) * g.cout;
                                let wr = &kernel[span.clone()];
                                dx[in_at + ci] += wr.iter().zip(gout).map(|(a, b)| a * b).sum::<f64>();
                                let xv = x[in_at + ci];
                                if xv != 0.0 {
                                    for (dw, gv) in dkernel[span].iter_mut().zip(gout) {
                                        *dw += xv * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

/// 2-D convolution of an `N × H × W × C_in` input with a
/// `KH × KW × C_in × C_out` kernel.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
    let (n, h, w, cin) = input.dims4()?;
    let [kh, kw, kcin, cout] = kernel.shape()[..] else {
        return Err(Error::DimensionMismatch(format!(
            "kernel must be KH x KW x C_in x C_out, got {:?}",
            kernel.shape()
        )));
    };
    if kcin != cin {
        return Err(Error::DimensionMismatch(format!(
            "kernel expects {kcin} input channels, input has {cin}"
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidConfig("stride must be at least 1".into()));
    }
    let geom = ConvGeom::new(n, h, w, cin, kh, kw, cout, stride, padding)?;
    let y = geom.forward(input.data(), kernel.data());
    Ok(Tensor::from_parts_unchecked(vec![n, geom.oh, geom.ow, cout], y))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Straightforward zero-padded convolution with explicit padding arithmetic.
    fn naive_same_conv(x: &[f64], h: usize, w: usize, k: &[f64], kh: usize, kw: usize) -> Vec<f64> {
        let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
        let mut y = vec![0.0; h * w];
        for oy in 0..h {
            for ox in 0..w {
                let mut acc = 0.0;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = oy as isize + ky as isize - ph as isize;
                        let ix = ox as isize + kx as isize - pw as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += x[iy as usize * w + ix as usize] * k[ky * kw + kx];
                        }
                    }
                }
                y[oy * w + ox] = acc;
            }
        }
        y
    }

    #[test]
    fn unit_kernel_is_identity() {
        let x = Tensor::new(vec![1, 3, 2, 1], vec![1.0, -2.0, 3.5, 0.0, 4.0, 9.0]).unwrap();
        let k = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        assert_eq!(conv2d(&x, &k, 1, Padding::Same).unwrap(), x);
    }

    #[test]
    fn all_ones_valid_sums_window() {
        let x = Tensor::new(vec![1, 3, 3, 1], vec![1.0; 9]).unwrap();
        let k = Tensor::new(vec![3, 3, 1, 1], vec![1.0; 9]).unwrap();
        let y = conv2d(&x, &k, 1, Padding::Valid).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn same_padding_matches_naive_loops() {
        let x: Vec<f64> = (0..25).map(|i| ((i * 7919 % 23) as f64 - 11.0) / 5.0).collect();
        let k: Vec<f64> = (0..9).map(|i| ((i * 31 % 13) as f64 - 6.0) / 4.0).collect();
        let expected = naive_same_conv(&x, 5, 5, &k, 3, 3);
        let y = conv2d(
            &Tensor::new(vec![1, 5, 5, 1], x).unwrap(),
            &Tensor::new(vec![3, 3, 1, 1], k).unwrap(),
            1,
            Padding::Same,
        )
        .unwrap();
        for (a, b) in y.data().iter().zip(&expected) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn output_extents() {
        assert_eq!(output_extent(32, 3, 1, Padding::Valid), Some(30));
        assert_eq!(output_extent(30, 3, 2, Padding::Valid), Some(14));
        assert_eq!(output_extent(15, 3, 2, Padding::Same), Some(8));
        assert_eq!(output_extent(2, 3, 1, Padding::Valid), None);
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let x = Tensor::zeros(vec![1, 4, 4, 2]).unwrap();
        let k = Tensor::zeros(vec![3, 3, 1, 1]).unwrap();
        assert!(matches!(
            conv2d(&x, &k, 1, Padding::Same),
            Err(Error::DimensionMismatch(_))
        ));
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }
}
