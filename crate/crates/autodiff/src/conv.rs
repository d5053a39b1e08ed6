//! Patch extraction for strided, unpadded 2-D convolutions.
//!
//! A convolution over `[C, H, W]` with kernel `KH×KW` and stride `SH×SW`
//! is a GEMM against the patch matrix `[C·KH·KW, OH·OW]`. The transposed
//! convolution runs the same geometry backwards (`col2im`).

use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
}

impl ConvGeometry {
    /// Output spatial size of a forward convolution, `None` if the kernel
    /// does not fit.
    pub fn conv_output(height: usize, width: usize, kernel: (usize, usize), stride: (usize, usize)) -> Option<(usize, usize)> {
        if height < kernel.0 || width < kernel.1 || stride.0 == 0 || stride.1 == 0 {
            return None;
        }
        Some(((height - kernel.0) / stride.0 + 1, (width - kernel.1) / stride.1 + 1))
    }

    /// Output spatial size of a transposed convolution (no padding, no output padding).
    pub fn transposed_output(height: usize, width: usize, kernel: (usize, usize), stride: (usize, usize)) -> (usize, usize) {
        ((height - 1) * stride.0 + kernel.0, (width - 1) * stride.1 + kernel.1)
    }

    pub fn out_hw(&self) -> (usize, usize) {
        Self::conv_output(self.height, self.width, self.kernel, self.stride).expect("kernel larger than input")
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel.0 * self.kernel.1
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// `image: [C, H, W]` → `cols: [C·KH·KW, OH·OW]`.
    pub fn im2col<T: Real>(&self, image: &[T], cols: &mut [T]) {
        let (oh, ow) = self.out_hw();
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let positions = oh * ow;
        debug_assert_eq!(image.len(), self.image_len());
        debug_assert_eq!(cols.len(), self.patch_len() * positions);
        for c in 0..self.channels {
            let plane = &image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (c * kh + ki) * kw + kj;
                    let dst = &mut cols[row * positions..(row + 1) * positions];
                    for oy in 0..oh {
                        let src_row = &plane[(oy * sh + ki) * self.width..];
                        let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            *d = src_row[ox * sw + kj];
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add `cols: [C·KH·KW, OH·OW]` back into `image: [C, H, W]`.
    pub fn col2im<T: Real>(&self, cols: &[T], image: &mut [T]) {
        let (oh, ow) = self.out_hw();
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let positions = oh * ow;
        for c in 0..self.channels {
            let plane = &mut image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (c * kh + ki) * kw + kj;
                    let src = &cols[row * positions..(row + 1) * positions];
                    for oy in 0..oh {
                        let dst_row = &mut plane[(oy * sh + ki) * self.width..];
                        let src_row = &src[oy * ow..(oy + 1) * ow];
                        for (ox, &s) in src_row.iter().enumerate() {
                            dst_row[ox * sw + kj] += s;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_sizes_match_encoder_stack() {
        let k = (5, 5);
        let s = (2, 2);
        let a = ConvGeometry::conv_output(37, 85, k, s).unwrap();
        assert_eq!(a, (17, 41));
        let b = ConvGeometry::conv_output(a.0, a.1, k, s).unwrap();
        assert_eq!(b, (7, 19));
        let c = ConvGeometry::conv_output(b.0, b.1, k, s).unwrap();
        assert_eq!(c, (2, 8));
        assert_eq!(ConvGeometry::transposed_output(2, 8, k, s), (7, 19));
        assert_eq!(ConvGeometry::transposed_output(7, 19, k, s), (17, 41));
        assert_eq!(ConvGeometry::transposed_output(17, 41, k, s), (37, 85));
        assert_eq!(ConvGeometry::conv_output(3, 9, k, s), None);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeometry { channels: 2, height: 7, width: 6, kernel: (3, 2), stride: (2, 1) };
        let (oh, ow) = g.out_hw();
        let x: Vec<f64> = (0..g.image_len()).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
        let y: Vec<f64> = (0..g.patch_len() * oh * ow).map(|i| ((i * 104729) % 11) as f64 - 5.0).collect();
        let mut cols = vec![0.0; y.len()];
        g.im2col(&x, &mut cols);
        let mut back = vec![0.0; x.len()];
        g.col2im(&y, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }
}
