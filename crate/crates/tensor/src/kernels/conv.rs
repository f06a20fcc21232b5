//! Patch extraction for convolutions on `H×W×C` inputs (im2col / col2im).

use crate::TensorError;

/// Square-kernel convolution geometry with symmetric zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn output_hw(&self) -> Result<(usize, usize), TensorError> {
        let span = |n: usize| -> Option<usize> {
            (n + 2 * self.padding)
                .checked_sub(self.kernel)
                .map(|r| r / self.stride + 1)
        };
        match (span(self.height), span(self.width), self.stride) {
            (Some(h), Some(w), s) if s > 0 => Ok((h, w)),
            _ => Err(TensorError::InvalidShape {
                op: "im2col",
                shape: vec![self.height, self.width, self.channels],
                reason: format!("kernel {} / stride {} does not fit", self.kernel, self.stride),
            }),
        }
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    /// Source offset of patch element `(ky, kx)` for output pixel `(oy, ox)`.
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky).checked_sub(self.padding)?;
        let ix = (ox * self.stride + kx).checked_sub(self.padding)?;
        (iy < self.height && ix < self.width).then(|| (iy * self.width + ix) * self.channels)
    }
}

pub(crate) fn im2col(g: &ConvGeometry, x: &[f64]) -> Vec<f64> {
    let (ho, wo) = g.output_hw().expect("validated geometry");
    let c = g.channels;
    let plen = g.patch_len();
    let mut out = vec![0.0; ho * wo * plen];
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &mut out[(oy * wo + ox) * plen..(oy * wo + ox + 1) * plen];
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    if let Some(src) = g.source(oy, ox, ky, kx) {
                        let dst = (ky * g.kernel + kx) * c;
                        row[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn col2im(g: &ConvGeometry, cols: &[f64]) -> Vec<f64> {
    let (ho, wo) = g.output_hw().expect("validated geometry");
    let c = g.channels;
    let plen = g.patch_len();
    let mut out = vec![0.0; g.height * g.width * c];
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &cols[(oy * wo + ox) * plen..(oy * wo + ox + 1) * plen];
            for ky in 0..g.kernel {
                for kx in 0..g.kernel {
                    if let Some(dst) = g.source(oy, ox, ky, kx) {
                        let src = (ky * g.kernel + kx) * c;
                        for (o, v) in out[dst..dst + c].iter_mut().zip(&row[src..src + c]) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
    out
}
