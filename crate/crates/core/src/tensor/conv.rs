use super::ops::gemm;
use super::{Tensor, TensorError, Var};

/// Geometry of a 2-D convolution over `[batch, c_in, h, w]` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dGeometry {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.padding - self.kh) / self.stride + 1,
            (self.w + 2 * self.padding - self.kw) / self.stride + 1,
        )
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
}

/// Output spatial size for a convolution, or an error when the kernel does
/// not fit inside the padded input.
pub fn conv_output_size(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || kernel > size + 2 * padding {
        return None;
    }
    Some((size + 2 * padding - kernel) / stride + 1)
}

/// Unfolds one image `[c_in, h, w]` into the `[c_in*kh*kw, h'*w']` block of
/// `col` that starts at column `offset`, rows `stride` apart.
fn im2col(g: &Conv2dGeometry, image: &[f64], col: &mut [f64], stride: usize, offset: usize) {
    let (oh, ow) = g.out_hw();
    let plane = oh * ow;
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * stride + offset..row * stride + offset + plane];
                for y in 0..oh {
                    let iy = (y * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[y * ow..(y + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &image[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (x, v) in line.iter_mut().enumerate() {
                        let ix = (x * g.stride + kj) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back into an image gradient.
fn col2im(g: &Conv2dGeometry, col: &[f64], stride: usize, offset: usize, image: &mut [f64]) {
    let (oh, ow) = g.out_hw();
    let plane = oh * ow;
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * stride + offset..row * stride + offset + plane];
                for y in 0..oh {
                    let iy = (y * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for x in 0..ow {
                        let ix = (x * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            image[base + ix as usize] += src[y * ow + x];
                        }
                    }
                }
            }
        }
    }
}

/// Target column count of one unfolded product.
const CHUNK_COLUMNS: usize = 512;

impl<'t> Var<'t> {
    /// Cross-correlation of `[batch, c_in, h, w]` with `[c_out, c_in, kh, kw]`.
    pub fn conv2d(self, kernel: Var<'t>, stride: usize, padding: usize) -> Result<Var<'t>, TensorError> {
        let input = self.value();
        let weights = kernel.value();
        let (ish, ksh) = (input.shape(), weights.shape());
        if ish.len() != 4 || ksh.len() != 4 || ish[1] != ksh[1] || stride == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: ish.to_vec(),
                rhs: ksh.to_vec(),
            });
        }
        let geom = Conv2dGeometry {
            c_in: ish[1],
            h: ish[2],
            w: ish[3],
            c_out: ksh[0],
            kh: ksh[2],
            kw: ksh[3],
            stride,
            padding,
        };
        if conv_output_size(geom.h, geom.kh, stride, padding).is_none()
            || conv_output_size(geom.w, geom.kw, stride, padding).is_none()
        {
            return Err(TensorError::KernelTooLarge {
                input: ish.to_vec(),
                kernel: ksh.to_vec(),
                padding,
            });
        }
        let batch = ish[0];
        let (oh, ow) = geom.out_hw();
        let plane = oh * ow;
        let patch = geom.patch_len();
        let image_len = geom.c_in * geom.h * geom.w;
        let out_len = geom.c_out * plane;

        // Several images share one product so the column count is not tiny.
        let chunk = CHUNK_COLUMNS.div_ceil(plane).clamp(1, batch);
        let chunks = move || (0..batch).step_by(chunk).map(move |b0| (b0, chunk.min(batch - b0)));
        let c_out = geom.c_out;

        let mut out = Tensor::zeros(&[batch, c_out, oh, ow]);
        let mut col = vec![0.0; patch * chunk * plane];
        let mut tmp = vec![0.0; c_out * chunk * plane];
        for (b0, count) in chunks() {
            let width = count * plane;
            for s in 0..count {
                let image = &input.data()[(b0 + s) * image_len..(b0 + s + 1) * image_len];
                im2col(&geom, image, &mut col, width, s * plane);
            }
            gemm(
                c_out,
                patch,
                width,
                (weights.data(), patch as isize, 1),
                (&col, width as isize, 1),
                0.0,
                (&mut tmp, width as isize),
            );
            let od = out.data_mut();
            for s in 0..count {
                for co in 0..c_out {
                    let dst = (b0 + s) * out_len + co * plane;
                    let src = co * width + s * plane;
                    od[dst..dst + plane].copy_from_slice(&tmp[src..src + plane]);
                }
            }
        }

        let backward = Box::new(move |g: &Tensor, needs: &[bool]| {
            let gd = g.data();
            let mut grad_in = needs[0].then(|| Tensor::zeros(input.shape()));
            let mut grad_k = needs[1].then(|| Tensor::zeros(weights.shape()));
            let mut col = vec![0.0; patch * chunk * plane];
            let mut gout = vec![0.0; c_out * chunk * plane];
            for (b0, count) in chunks() {
                let width = count * plane;
                for s in 0..count {
                    for co in 0..c_out {
                        let src = (b0 + s) * out_len + co * plane;
                        let dst = co * width + s * plane;
                        gout[dst..dst + plane].copy_from_slice(&gd[src..src + plane]);
                    }
                }
                if let Some(gk) = grad_k.as_mut() {
                    for s in 0..count {
                        let image = &input.data()[(b0 + s) * image_len..(b0 + s + 1) * image_len];
                        im2col(&geom, image, &mut col, width, s * plane);
                    }
                    // dK += dOut (c_out x width) * col^T (width x patch)
                    gemm(
                        c_out,
                        width,
                        patch,
                        (&gout, width as isize, 1),
                        (&col, 1, width as isize),
                        1.0,
                        (gk.data_mut(), patch as isize),
                    );
                }
                if let Some(gi) = grad_in.as_mut() {
                    // dCol = K^T (patch x c_out) * dOut (c_out x width)
                    gemm(
                        patch,
                        c_out,
                        width,
                        (weights.data(), 1, patch as isize),
                        (&gout, width as isize, 1),
                        0.0,
                        (&mut col, width as isize),
                    );
                    let gid = gi.data_mut();
                    for s in 0..count {
                        let image = &mut gid[(b0 + s) * image_len..(b0 + s + 1) * image_len];
                        col2im(&geom, &col, width, s * plane, image);
                    }
                }
            }
            vec![grad_in, grad_k]
        });
        Ok(self.tape().record(&[self, kernel], out, backward))
    }
}
