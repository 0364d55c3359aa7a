use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

use super::check_selection;

/// Borrowed convolution parameters: kernel `[c_out, c_in, k, k]` and optional bias `[c_out]`.
#[derive(Debug, Clone, Copy)]
pub struct ConvWeights<'a, T> {
    pub kernel: &'a Tensor<T>,
    pub bias: Option<&'a Tensor<T>>,
}

/// Gradient accumulators matching [`ConvWeights`].
pub struct ConvGradsMut<'a, T> {
    pub kernel: &'a mut Tensor<T>,
    pub bias: Option<&'a mut Tensor<T>>,
}

pub fn conv_output_extent(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Shape("stride must be positive".into()));
    }
    if input + 2 * pad < k {
        return Err(Error::Shape(format!(
            "kernel {k} larger than padded input {}",
            input + 2 * pad
        )));
    }
    Ok((input + 2 * pad - k) / stride + 1)
}

struct Geometry {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }
    fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }
}

fn kernel_dims<T: Scalar>(kernel: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match kernel.shape()[..] {
        [co, ci, kh, kw] if kh == kw => Ok((co, ci, kh)),
        _ => Err(Error::Shape(format!("kernel must be [c_out, c_in, k, k], got {:?}", kernel.shape()))),
    }
}

fn geometry<T: Scalar>(x: &Tensor<T>, k: usize, stride: usize, pad: usize) -> Result<Geometry> {
    let (batch, c_in, h, w) = x.dims4()?;
    let ho = conv_output_extent(h, k, stride, pad)?;
    let wo = conv_output_extent(w, k, stride, pad)?;
    Ok(Geometry { batch, c_in, h, w, k, stride, pad, ho, wo })
}

/// Copies `kernel[out_sel, in_sel, :, :]` into a dense `[|out_sel|, |in_sel|·k·k]` block.
fn gather_kernel<T: Scalar>(kernel: &Tensor<T>, in_sel: &[usize], out_sel: &[usize]) -> Vec<T> {
    let s = kernel.shape();
    let (ci, kk) = (s[1], s[2] * s[3]);
    let src = kernel.data();
    let mut sub = Vec::with_capacity(out_sel.len() * in_sel.len() * kk);
    for &o in out_sel {
        for &i in in_sel {
            let start = (o * ci + i) * kk;
            sub.extend_from_slice(&src[start..start + kk]);
        }
    }
    sub
}

/// Output columns `ox` whose input column `ox·stride + kw − pad` lies inside `[0, w)`.
fn valid_columns(g: &Geometry, kw: usize) -> (usize, usize) {
    let lo = if g.pad > kw { (g.pad - kw).div_ceil(g.stride) } else { 0 };
    let hi = if g.w + g.pad > kw { ((g.w + g.pad - kw - 1) / g.stride + 1).min(g.wo) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(img: &[T], g: &Geometry, col: &mut [T]) {
    let hw = g.out_pixels();
    for c in 0..g.c_in {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for kh in 0..g.k {
            for kw in 0..g.k {
                let (lo, hi) = valid_columns(g, kw);
                let row = &mut col[((c * g.k + kh) * g.k + kw) * hw..][..hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + kh) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    let first = lo * g.stride + kw - g.pad;
                    if g.stride == 1 {
                        dst[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (d, s) in dst[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: &Geometry, img: &mut [T]) {
    let hw = g.out_pixels();
    for c in 0..g.c_in {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for kh in 0..g.k {
            for kw in 0..g.k {
                let (lo, hi) = valid_columns(g, kw);
                if lo == hi {
                    continue;
                }
                let row = &col[((c * g.k + kh) * g.k + kw) * hw..][..hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + kh) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src = &row[oy * g.wo + lo..oy * g.wo + hi];
                    let first = lo * g.stride + kw - g.pad;
                    if g.stride == 1 {
                        for (d, s) in dst[first..first + src.len()].iter_mut().zip(src) {
                            *d += *s;
                        }
                    } else {
                        for (d, s) in dst[first..].iter_mut().step_by(g.stride).zip(src) {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward_block<T: Scalar>(
    x: &Tensor<T>,
    g: &Geometry,
    sub_kernel: &[T],
    sub_bias: Option<&[T]>,
    c_out: usize,
) -> Result<Tensor<T>> {
    let hw = g.out_pixels();
    let patch = g.patch();
    let mut out = Tensor::zeros(&[g.batch, c_out, g.ho, g.wo]);
    let mut col = vec![T::zero(); patch * hw];
    let in_len = g.c_in * g.h * g.w;
    for (b, out_img) in out.data_mut().chunks_exact_mut(c_out * hw).enumerate() {
        im2col(&x.data()[b * in_len..(b + 1) * in_len], g, &mut col);
        gemm(
            MatRef::row_major(sub_kernel, c_out, patch),
            MatRef::row_major(&col, patch, hw),
            T::zero(),
            out_img,
        );
        if let Some(bias) = sub_bias {
            for (plane, &bv) in out_img.chunks_exact_mut(hw).zip(bias) {
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    if !out.all_finite() {
        return Err(Error::NonFinite("conv2d"));
    }
    Ok(out)
}

/// Convolution restricted to the `out_sel x in_sel` kernel sub-tensor.
///
/// `x` carries `|in_sel|` channels, ordered as `in_sel`; output channel `j`
/// is produced by kernel row `out_sel[j]`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: ConvWeights<'_, T>,
    in_sel: &[usize],
    out_sel: &[usize],
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (co, ci, k) = kernel_dims(w.kernel)?;
    check_selection(in_sel, ci)?;
    check_selection(out_sel, co)?;
    let g = geometry(x, k, stride, pad)?;
    if g.c_in != in_sel.len() {
        return Err(Error::Shape(format!(
            "input has {} channels, selection has {}",
            g.c_in,
            in_sel.len()
        )));
    }
    let sub = gather_kernel(w.kernel, in_sel, out_sel);
    let sub_bias: Option<Vec<T>> = w.bias.map(|b| out_sel.iter().map(|&o| b.data()[o]).collect());
    conv_forward_block(x, &g, &sub, sub_bias.as_deref(), out_sel.len())
}

/// Plain convolution over every kernel entry.
pub fn conv2d_unrestricted<T: Scalar>(
    x: &Tensor<T>,
    w: ConvWeights<'_, T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (co, ci, k) = kernel_dims(w.kernel)?;
    let g = geometry(x, k, stride, pad)?;
    if g.c_in != ci {
        return Err(Error::Shape(format!("input has {} channels, kernel expects {ci}", g.c_in)));
    }
    conv_forward_block(x, &g, w.kernel.data(), w.bias.map(|b| b.data()), co)
}

/// Backward companion of [`conv2d`]. Accumulates kernel and bias gradients at
/// the selected entries and returns the gradient with respect to `x`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: ConvWeights<'_, T>,
    in_sel: &[usize],
    out_sel: &[usize],
    stride: usize,
    pad: usize,
    grad_out: &Tensor<T>,
    grads: ConvGradsMut<'_, T>,
) -> Result<Tensor<T>> {
    let (co, ci, k) = kernel_dims(w.kernel)?;
    check_selection(in_sel, ci)?;
    check_selection(out_sel, co)?;
    let g = geometry(x, k, stride, pad)?;
    let c_out = out_sel.len();
    if g.c_in != in_sel.len() || grad_out.shape() != [g.batch, c_out, g.ho, g.wo] {
        return Err(Error::Shape(format!(
            "conv backward: input {:?}, grad {:?}",
            x.shape(),
            grad_out.shape()
        )));
    }
    if grads.kernel.shape() != w.kernel.shape() {
        return Err(Error::Shape("kernel gradient buffer shape".into()));
    }
    let hw = g.out_pixels();
    let patch = g.patch();
    let sub = gather_kernel(w.kernel, in_sel, out_sel);
    let mut grad_sub = vec![T::zero(); c_out * patch];
    let mut grad_bias = vec![T::zero(); c_out];
    let mut grad_x = Tensor::zeros(x.shape());
    let mut col = vec![T::zero(); patch * hw];
    let mut grad_col = vec![T::zero(); patch * hw];
    let in_len = g.c_in * g.h * g.w;
    for b in 0..g.batch {
        let dy = &grad_out.data()[b * c_out * hw..(b + 1) * c_out * hw];
        im2col(&x.data()[b * in_len..(b + 1) * in_len], &g, &mut col);
        gemm(
            MatRef::row_major(dy, c_out, hw),
            MatRef::transposed(&col, patch, hw),
            T::one(),
            &mut grad_sub,
        );
        gemm(
            MatRef::transposed(&sub, c_out, patch),
            MatRef::row_major(dy, c_out, hw),
            T::zero(),
            &mut grad_col,
        );
        col2im(&grad_col, &g, &mut grad_x.data_mut()[b * in_len..(b + 1) * in_len]);
        for (gb, plane) in grad_bias.iter_mut().zip(dy.chunks_exact(hw)) {
            *gb += plane.iter().copied().sum::<T>();
        }
    }

    let kk = k * k;
    let full = grads.kernel.data_mut();
    for (j, &o) in out_sel.iter().enumerate() {
        for (i, &c) in in_sel.iter().enumerate() {
            let dst = &mut full[(o * ci + c) * kk..][..kk];
            let src = &grad_sub[(j * in_sel.len() + i) * kk..][..kk];
            dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
        }
    }
    if let Some(bias) = grads.bias {
        let bias = bias.data_mut();
        for (&o, &gb) in out_sel.iter().zip(&grad_bias) {
            bias[o] += gb;
        }
    }
    Ok(grad_x)
}
