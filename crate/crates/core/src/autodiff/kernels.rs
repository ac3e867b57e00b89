//! Raw kernels for the convolution and pooling ops. Layout is NCHW for
//! activations and (out, in, kh, kw) for kernels.

use super::array::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_sample(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    fn out_sample(&self) -> usize {
        self.out_channels * self.out_plane()
    }
}

/// Unfolds one sample into a `(patch_len, out_h * out_w)` column matrix.
fn im2col<T: Real>(g: &ConvGeometry, x: &[T], cols: &mut [T]) {
    let plane = g.out_plane();
    let mut row = 0;
    for c in 0..g.in_channels {
        let xc = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy + ky) as isize - g.pad_h as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox + kx) as isize - g.pad_w as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto the input plane.
fn col2im_add<T: Real>(g: &ConvGeometry, cols: &[T], dx: &mut [T]) {
    let plane = g.out_plane();
    let mut row = 0;
    for c in 0..g.in_channels {
        let dxc = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy + ky) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    let dst = &mut dxc[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox + kx) as isize - g.pad_w as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] = dst[ix as usize] + v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(g: &ConvGeometry, x: &[T], kernel: &[T]) -> Vec<T> {
    let plane = g.out_plane();
    let patch = g.patch_len();
    let mut out = vec![T::zero(); g.batch * g.out_sample()];
    let mut cols = vec![T::zero(); patch * plane];
    for s in 0..g.batch {
        im2col(g, &x[s * g.in_sample()..(s + 1) * g.in_sample()], &mut cols);
        let dst = &mut out[s * g.out_sample()..(s + 1) * g.out_sample()];
        T::gemm(
            g.out_channels,
            patch,
            plane,
            kernel,
            (patch, 1),
            &cols,
            (plane, 1),
            T::zero(),
            dst,
            (plane, 1),
        );
    }
    out
}

/// Returns `(d input, d kernel)`; either may be skipped.
pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeometry,
    x: &[T],
    kernel: &[T],
    upstream: &[T],
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let plane = g.out_plane();
    let patch = g.patch_len();
    let mut dx = want_input.then(|| vec![T::zero(); g.batch * g.in_sample()]);
    let mut dk = want_kernel.then(|| vec![T::zero(); g.out_channels * patch]);
    let mut cols = vec![T::zero(); patch * plane];
    for s in 0..g.batch {
        let up = &upstream[s * g.out_sample()..(s + 1) * g.out_sample()];
        if let Some(dk) = dk.as_mut() {
            im2col(g, &x[s * g.in_sample()..(s + 1) * g.in_sample()], &mut cols);
            // dK += dOut (co x plane) * cols^T (plane x patch)
            T::gemm(
                g.out_channels,
                plane,
                patch,
                up,
                (plane, 1),
                &cols,
                (1, plane),
                T::one(),
                dk,
                (patch, 1),
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = K^T (patch x co) * dOut (co x plane)
            T::gemm(
                patch,
                g.out_channels,
                plane,
                kernel,
                (1, patch),
                up,
                (plane, 1),
                T::zero(),
                &mut cols,
                (plane, 1),
            );
            col2im_add(g, &cols, &mut dx[s * g.in_sample()..(s + 1) * g.in_sample()]);
        }
    }
    (dx, dk)
}

/// 2x2 stride-2 max pooling over NCHW input. Returns the pooled values and,
/// per output cell, the flat input index of the selected element (first
/// maximum in row-major window order).
pub(crate) fn maxpool2_forward<T: Real>(x: &[T], planes: usize, height: usize, width: usize) -> (Vec<T>, Vec<usize>) {
    let oh = height / 2;
    let ow = width / 2;
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * height * width;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = base + (2 * oy) * width + 2 * ox;
                let mut best = x[best_idx];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * width + 2 * ox + dx;
                    if x[idx] > best {
                        best = x[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}
