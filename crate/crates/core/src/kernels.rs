//! Forward and backward kernels for the layers the networks use. All
//! activations are NHWC; convolution weights are stored as
//! `[k, k, c_in, c_out]`, transposed-convolution weights as
//! `[c_in, k, k, c_out]`.

use crate::exec;
use crate::tensor::{gemm, Mat, Nhwc, Real, Tensor};

/// Sliding-patch geometry: patch `(gy, gx)` of the grid reads source pixels
/// `(gy * stride - pad + ky, gx * stride - pad + kx)`.
#[derive(Clone, Copy, Debug)]
pub struct Patches {
    pub src_h: usize,
    pub src_w: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl Patches {
    pub fn row_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    pub fn rows(&self) -> usize {
        self.grid_h * self.grid_w
    }

    #[inline]
    fn src_coord(&self, g: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (g * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    /// im2col: `cols` is `rows() x row_len()`.
    pub fn gather<T: Real>(&self, src: &[T], cols: &mut [T]) {
        let c = self.channels;
        let row_len = self.row_len();
        debug_assert_eq!(src.len(), self.src_h * self.src_w * c);
        debug_assert_eq!(cols.len(), self.rows() * row_len);
        for gy in 0..self.grid_h {
            for gx in 0..self.grid_w {
                let row = &mut cols[(gy * self.grid_w + gx) * row_len..][..row_len];
                for ky in 0..self.kernel {
                    let sy = self.src_coord(gy, ky, self.src_h);
                    for kx in 0..self.kernel {
                        let dst = &mut row[(ky * self.kernel + kx) * c..][..c];
                        match (sy, self.src_coord(gx, kx, self.src_w)) {
                            (Some(sy), Some(sx)) => {
                                dst.copy_from_slice(&src[(sy * self.src_w + sx) * c..][..c])
                            }
                            _ => dst.fill(T::ZERO),
                        }
                    }
                }
            }
        }
    }

    /// col2im: adjoint of [`Patches::gather`], accumulating into `dst`.
    pub fn scatter_add<T: Real>(&self, cols: &[T], dst: &mut [T]) {
        let c = self.channels;
        let row_len = self.row_len();
        for gy in 0..self.grid_h {
            for gx in 0..self.grid_w {
                let row = &cols[(gy * self.grid_w + gx) * row_len..][..row_len];
                for ky in 0..self.kernel {
                    let Some(sy) = self.src_coord(gy, ky, self.src_h) else { continue };
                    for kx in 0..self.kernel {
                        let Some(sx) = self.src_coord(gx, kx, self.src_w) else { continue };
                        let out = &mut dst[(sy * self.src_w + sx) * c..][..c];
                        let inp = &row[(ky * self.kernel + kx) * c..][..c];
                        for (o, &v) in out.iter_mut().zip(inp) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn conv_out(&self, extent: usize) -> usize {
        (extent + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn conv_patches(&self, x: Nhwc) -> Patches {
        Patches {
            src_h: x.h,
            src_w: x.w,
            channels: x.c,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
            grid_h: self.conv_out(x.h),
            grid_w: self.conv_out(x.w),
        }
    }
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T]) {
    for px in out.chunks_mut(bias.len()) {
        for (o, &b) in px.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

fn bias_grad<T: Real>(dout: &[T], channels: usize) -> Vec<T> {
    let mut acc = vec![0f64; channels];
    for px in dout.chunks(channels) {
        for (a, &v) in acc.iter_mut().zip(px) {
            *a += v.to_f64();
        }
    }
    acc.into_iter().map(T::from_f64).collect()
}

fn sum_in_order<T: Real>(parts: impl Iterator<Item = Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::ZERO; len];
    for p in parts {
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    acc
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeom,
) -> Tensor<T> {
    let xs = Nhwc::of(x).expect("conv2d input");
    let cout = weight.shape()[3];
    let p = geom.conv_patches(xs);
    let w = Mat::new(weight.data(), p.row_len(), cout);
    let out_len = p.rows() * cout;
    let mut out = vec![T::ZERO; xs.n * out_len];
    exec::for_each_chunk(&mut out, out_len, |n, out_n| {
        let mut cols = vec![T::ZERO; p.rows() * p.row_len()];
        p.gather(x.outer(n), &mut cols);
        gemm(Mat::new(&cols, p.rows(), p.row_len()), w, out_n, false);
        if let Some(b) = bias {
            add_bias(out_n, b.data());
        }
    });
    Tensor::from_vec(&[xs.n, p.grid_h, p.grid_w, cout], out).expect("conv2d shape")
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    geom: ConvGeom,
    dout: &Tensor<T>,
    need_input: bool,
) -> ConvGrads<T> {
    let xs = Nhwc::of(x).expect("conv2d input");
    let cout = weight.shape()[3];
    let p = geom.conv_patches(xs);
    let w = Mat::new(weight.data(), p.row_len(), cout);
    let per_sample = exec::map_indexed(xs.n, |n| {
        let dout_n = Mat::new(dout.outer(n), p.rows(), cout);
        let mut cols = vec![T::ZERO; p.rows() * p.row_len()];
        p.gather(x.outer(n), &mut cols);
        let mut dw = vec![T::ZERO; weight.len()];
        gemm(Mat::new(&cols, p.rows(), p.row_len()).t(), dout_n, &mut dw, false);
        let dx = need_input.then(|| {
            gemm(dout_n, w.t(), &mut cols, false);
            let mut dx = vec![T::ZERO; xs.per_sample()];
            p.scatter_add(&cols, &mut dx);
            dx
        });
        (dw, dx)
    });
    let mut dx_all = need_input.then(|| Vec::with_capacity(x.len()));
    let mut dws = Vec::with_capacity(xs.n);
    for (dw, dx) in per_sample {
        dws.push(dw);
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend_from_slice(&dx);
        }
    }
    ConvGrads {
        input: dx_all.map(|d| Tensor::from_vec(x.shape(), d).expect("dx shape")),
        weight: Tensor::from_vec(weight.shape(), sum_in_order(dws.into_iter(), weight.len()))
            .expect("dw shape"),
        bias: has_bias.then(|| {
            Tensor::from_vec(&[cout], bias_grad(dout.data(), cout)).expect("db shape")
        }),
    }
}

/// Transposed-convolution geometry; output extent is
/// `(in - 1) * stride - 2 * pad + kernel + output_pad`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvTransposeGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub output_pad: usize,
}

impl ConvTransposeGeom {
    pub fn out_extent(&self, extent: usize) -> usize {
        (extent - 1) * self.stride + self.kernel + self.output_pad - 2 * self.pad
    }

    fn patches(&self, x: Nhwc, cout: usize) -> Patches {
        Patches {
            src_h: self.out_extent(x.h),
            src_w: self.out_extent(x.w),
            channels: cout,
            kernel: self.kernel,
            stride: self.stride,
            pad: self.pad,
            grid_h: x.h,
            grid_w: x.w,
        }
    }
}

pub fn conv_transpose2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvTransposeGeom,
) -> Tensor<T> {
    let xs = Nhwc::of(x).expect("conv_transpose2d input");
    let cout = weight.shape()[3];
    let p = geom.patches(xs, cout);
    let w = Mat::new(weight.data(), xs.c, p.row_len());
    let out_len = p.src_h * p.src_w * cout;
    let mut out = vec![T::ZERO; xs.n * out_len];
    exec::for_each_chunk(&mut out, out_len, |n, out_n| {
        let mut cols = vec![T::ZERO; p.rows() * p.row_len()];
        gemm(Mat::new(x.outer(n), p.rows(), xs.c), w, &mut cols, false);
        p.scatter_add(&cols, out_n);
        if let Some(b) = bias {
            add_bias(out_n, b.data());
        }
    });
    Tensor::from_vec(&[xs.n, p.src_h, p.src_w, cout], out).expect("conv_transpose2d shape")
}

pub fn conv_transpose2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    has_bias: bool,
    geom: ConvTransposeGeom,
    dout: &Tensor<T>,
    need_input: bool,
) -> ConvGrads<T> {
    let xs = Nhwc::of(x).expect("conv_transpose2d input");
    let cout = weight.shape()[3];
    let p = geom.patches(xs, cout);
    let w = Mat::new(weight.data(), xs.c, p.row_len());
    let per_sample = exec::map_indexed(xs.n, |n| {
        let mut cols = vec![T::ZERO; p.rows() * p.row_len()];
        p.gather(dout.outer(n), &mut cols);
        let cols_m = Mat::new(&cols, p.rows(), p.row_len());
        let mut dw = vec![T::ZERO; weight.len()];
        gemm(Mat::new(x.outer(n), p.rows(), xs.c).t(), cols_m, &mut dw, false);
        let dx = need_input.then(|| {
            let mut dx = vec![T::ZERO; xs.per_sample()];
            gemm(cols_m, w.t(), &mut dx, false);
            dx
        });
        (dw, dx)
    });
    let mut dx_all = need_input.then(|| Vec::with_capacity(x.len()));
    let mut dws = Vec::with_capacity(xs.n);
    for (dw, dx) in per_sample {
        dws.push(dw);
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend_from_slice(&dx);
        }
    }
    ConvGrads {
        input: dx_all.map(|d| Tensor::from_vec(x.shape(), d).expect("dx shape")),
        weight: Tensor::from_vec(weight.shape(), sum_in_order(dws.into_iter(), weight.len()))
            .expect("dw shape"),
        bias: has_bias.then(|| {
            Tensor::from_vec(&[cout], bias_grad(dout.data(), cout)).expect("db shape")
        }),
    }
}

#[inline]
fn reflect(i: isize, extent: usize) -> usize {
    let last = extent as isize - 1;
    let r = if i < 0 {
        -i
    } else if i > last {
        2 * last - i
    } else {
        i
    };
    r as usize
}

pub fn reflect_pad_forward<T: Real>(x: &Tensor<T>, pad: usize) -> Tensor<T> {
    let s = Nhwc::of(x).expect("reflect_pad input");
    assert!(pad < s.h && pad < s.w, "reflection pad {pad} too large for {}x{}", s.h, s.w);
    let (oh, ow) = (s.h + 2 * pad, s.w + 2 * pad);
    let mut out = vec![T::ZERO; s.n * oh * ow * s.c];
    for n in 0..s.n {
        let src = x.outer(n);
        for y in 0..oh {
            let sy = reflect(y as isize - pad as isize, s.h);
            for xx in 0..ow {
                let sx = reflect(xx as isize - pad as isize, s.w);
                let dst = ((n * oh + y) * ow + xx) * s.c;
                out[dst..dst + s.c].copy_from_slice(&src[(sy * s.w + sx) * s.c..][..s.c]);
            }
        }
    }
    Tensor::from_vec(&[s.n, oh, ow, s.c], out).expect("reflect_pad shape")
}

pub fn reflect_pad_backward<T: Real>(input_shape: Nhwc, pad: usize, dout: &Tensor<T>) -> Tensor<T> {
    let s = input_shape;
    let (oh, ow) = (s.h + 2 * pad, s.w + 2 * pad);
    let mut dx = vec![T::ZERO; s.n * s.per_sample()];
    for n in 0..s.n {
        let g = dout.outer(n);
        let dst = &mut dx[n * s.per_sample()..][..s.per_sample()];
        for y in 0..oh {
            let sy = reflect(y as isize - pad as isize, s.h);
            for xx in 0..ow {
                let sx = reflect(xx as isize - pad as isize, s.w);
                let d = &mut dst[(sy * s.w + sx) * s.c..][..s.c];
                for (a, &v) in d.iter_mut().zip(&g[(y * ow + xx) * s.c..][..s.c]) {
                    *a += v;
                }
            }
        }
    }
    Tensor::from_vec(&s.dims(), dx).expect("reflect_pad grad shape")
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Per-(sample, channel) normalization over the spatial axes. Returns the
/// normalized output and the inverse standard deviations, `[n * c]`.
pub fn instance_norm_forward<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
    let s = Nhwc::of(x).expect("instance_norm input");
    let hw = (s.h * s.w) as f64;
    let mut out = vec![T::ZERO; x.len()];
    let mut inv_std = vec![T::ZERO; s.n * s.c];
    for n in 0..s.n {
        let src = x.outer(n);
        let mut mean = vec![0f64; s.c];
        for px in src.chunks(s.c) {
            for (m, &v) in mean.iter_mut().zip(px) {
                *m += v.to_f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= hw);
        let mut var = vec![0f64; s.c];
        for px in src.chunks(s.c) {
            for ((acc, &v), &m) in var.iter_mut().zip(px).zip(&mean) {
                let d = v.to_f64() - m;
                *acc += d * d;
            }
        }
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v / hw + INSTANCE_NORM_EPS).sqrt()).collect();
        let dst = &mut out[n * s.per_sample()..][..s.per_sample()];
        for (o_px, px) in dst.chunks_mut(s.c).zip(src.chunks(s.c)) {
            for c in 0..s.c {
                o_px[c] = T::from_f64((px[c].to_f64() - mean[c]) * inv[c]);
            }
        }
        for c in 0..s.c {
            inv_std[n * s.c + c] = T::from_f64(inv[c]);
        }
    }
    (Tensor::from_vec(x.shape(), out).expect("instance_norm shape"), inv_std)
}

pub fn instance_norm_backward<T: Real>(out: &Tensor<T>, inv_std: &[T], dout: &Tensor<T>) -> Tensor<T> {
    let s = Nhwc::of(out).expect("instance_norm output");
    let hw = (s.h * s.w) as f64;
    let mut dx = vec![T::ZERO; out.len()];
    for n in 0..s.n {
        let y = out.outer(n);
        let g = dout.outer(n);
        let mut mean_g = vec![0f64; s.c];
        let mut mean_gy = vec![0f64; s.c];
        for (ypx, gpx) in y.chunks(s.c).zip(g.chunks(s.c)) {
            for c in 0..s.c {
                mean_g[c] += gpx[c].to_f64();
                mean_gy[c] += gpx[c].to_f64() * ypx[c].to_f64();
            }
        }
        mean_g.iter_mut().for_each(|m| *m /= hw);
        mean_gy.iter_mut().for_each(|m| *m /= hw);
        let dst = &mut dx[n * s.per_sample()..][..s.per_sample()];
        for ((dpx, ypx), gpx) in dst.chunks_mut(s.c).zip(y.chunks(s.c)).zip(g.chunks(s.c)) {
            for c in 0..s.c {
                let inv = inv_std[n * s.c + c].to_f64();
                dpx[c] = T::from_f64(
                    inv * (gpx[c].to_f64() - mean_g[c] - ypx[c].to_f64() * mean_gy[c]),
                );
            }
        }
    }
    Tensor::from_vec(out.shape(), dx).expect("instance_norm grad shape")
}

/// Per-sample Gram matrices `[n, d, d]` of an NHWC map, normalized by
/// `1 / (h * w * d)`.
pub fn gram_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = Nhwc::of(x).expect("gram input");
    let scale = T::from_f64(1.0 / (s.h * s.w * s.c) as f64);
    let mut out = vec![T::ZERO; s.n * s.c * s.c];
    for n in 0..s.n {
        let f = Mat::new(x.outer(n), s.h * s.w, s.c);
        let g = &mut out[n * s.c * s.c..][..s.c * s.c];
        gemm(f.t(), f, g, false);
        g.iter_mut().for_each(|v| *v *= scale);
        // mirror the upper triangle so the result is exactly symmetric
        for i in 0..s.c {
            for j in i + 1..s.c {
                g[j * s.c + i] = g[i * s.c + j];
            }
        }
    }
    Tensor::from_vec(&[s.n, s.c, s.c], out).expect("gram shape")
}

pub fn gram_backward<T: Real>(x: &Tensor<T>, dgram: &Tensor<T>) -> Tensor<T> {
    let s = Nhwc::of(x).expect("gram input");
    let scale = T::from_f64(1.0 / (s.h * s.w * s.c) as f64);
    let mut dx = vec![T::ZERO; x.len()];
    for n in 0..s.n {
        let dg = dgram.outer(n);
        let mut sym = vec![T::ZERO; s.c * s.c];
        for i in 0..s.c {
            for j in 0..s.c {
                sym[i * s.c + j] = (dg[i * s.c + j] + dg[j * s.c + i]) * scale;
            }
        }
        gemm(
            Mat::new(x.outer(n), s.h * s.w, s.c),
            Mat::new(&sym, s.c, s.c),
            &mut dx[n * s.per_sample()..][..s.per_sample()],
            false,
        );
    }
    Tensor::from_vec(x.shape(), dx).expect("gram grad shape")
}
