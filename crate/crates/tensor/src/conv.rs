//! im2col / col2im lowering for 2-D convolutions.

use crate::Real;

/// Sliding-window geometry between an image of `channels x height x width`
/// and the grid of window positions it produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// Geometry of a forward convolution over `channels x height x width`.
    pub fn new(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        assert!(stride >= 1 && kernel >= 1);
        assert!(
            height + 2 * pad >= kernel && width + 2 * pad >= kernel,
            "kernel {kernel} larger than padded input {height}x{width}"
        );
        Self {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel) / stride + 1,
            out_w: (width + 2 * pad - kernel) / stride + 1,
        }
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Unfold `image` into `cols` (`col_rows x col_cols`, row-major).
    pub fn im2col<T: Real>(&self, image: &[T], cols: &mut [T]) {
        debug_assert_eq!(image.len(), self.image_len());
        debug_assert_eq!(cols.len(), self.col_rows() * self.col_cols());
        if self.is_pointwise() {
            cols.copy_from_slice(image);
            return;
        }
        let k = self.kernel;
        let (h, w) = (self.height as isize, self.width as isize);
        let ncols = self.col_cols();
        for c in 0..self.channels {
            let plane = &image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= h {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for (ox, out) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *out = if ix < 0 || ix >= w { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Fold `cols` back onto `image`, accumulating overlapping windows.
    pub fn col2im_add<T: Real>(&self, cols: &[T], image: &mut [T]) {
        debug_assert_eq!(image.len(), self.image_len());
        debug_assert_eq!(cols.len(), self.col_rows() * self.col_cols());
        if self.is_pointwise() {
            for (d, &s) in image.iter_mut().zip(cols) {
                *d += s;
            }
            return;
        }
        let k = self.kernel;
        let (h, w) = (self.height as isize, self.width as isize);
        let ncols = self.col_cols();
        for c in 0..self.channels {
            let plane = &mut image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let line = &src[oy * self.out_w..(oy + 1) * self.out_w];
                        let dst = &mut plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for (ox, &v) in line.iter().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}
