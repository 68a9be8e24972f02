//! 2-D cross-correlation via im2col + GEMM.

use crate::error::{Result, TensorError};
use crate::float::{gemm, Float, Mat};
use crate::graph::{Op, Var};
use crate::parallel;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOpts {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Default for Conv2dOpts {
    fn default() -> Self {
        Conv2dOpts {
            stride: 1,
            pad: 0,
            groups: 1,
        }
    }
}

impl Conv2dOpts {
    pub fn new(stride: usize, pad: usize) -> Self {
        Conv2dOpts { stride, pad, groups: 1 }
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
    groups: usize,
}

impl ConvGeom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn ck(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }
    fn hw_out(&self) -> usize {
        self.ho * self.wo
    }
}

fn out_extent(op: &'static str, dim: &'static str, size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = size + 2 * pad;
    if padded < k {
        return Err(TensorError::Dim {
            op,
            dim,
            expected: k,
            got: padded,
        });
    }
    if !(padded - k).is_multiple_of(stride) {
        return Err(TensorError::Invalid {
            op,
            msg: format!("{dim}: (size {size} + 2*pad {pad} - kernel {k}) is not divisible by stride {stride}"),
        });
    }
    Ok((padded - k) / stride + 1)
}

pub(crate) fn conv_geom(xs: &[usize], ws: &[usize], bias: Option<&[usize]>, opts: Conv2dOpts) -> Result<ConvGeom> {
    let op = "conv2d";
    if xs.len() != 4 {
        return Err(TensorError::Rank {
            op,
            expected: 4,
            shape: xs.to_vec(),
        });
    }
    if ws.len() != 4 {
        return Err(TensorError::Rank {
            op,
            expected: 4,
            shape: ws.to_vec(),
        });
    }
    if opts.stride == 0 || opts.groups == 0 {
        return Err(TensorError::Invalid {
            op,
            msg: "stride and groups must be positive".into(),
        });
    }
    let (n, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, cin_g, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if cin % opts.groups != 0 {
        return Err(TensorError::Invalid {
            op,
            msg: format!("Cin {cin} is not divisible by groups {}", opts.groups),
        });
    }
    if cout % opts.groups != 0 {
        return Err(TensorError::Invalid {
            op,
            msg: format!("Cout {cout} is not divisible by groups {}", opts.groups),
        });
    }
    if cin_g != cin / opts.groups {
        return Err(TensorError::Dim {
            op,
            dim: "Cin/groups",
            expected: cin / opts.groups,
            got: cin_g,
        });
    }
    if let Some(bs) = bias {
        if bs != [cout] {
            return Err(TensorError::Dim {
                op,
                dim: "bias",
                expected: cout,
                got: bs.iter().product(),
            });
        }
    }
    let ho = out_extent(op, "H", h, kh, opts.stride, opts.pad)?;
    let wo = out_extent(op, "W", w, kw, opts.stride, opts.pad)?;
    Ok(ConvGeom {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        ho,
        wo,
        stride: opts.stride,
        pad: opts.pad,
        groups: opts.groups,
    })
}

/// Unfolds one group of one image into `[cin_g*kh*kw, ho*wo]`.
fn im2col<T: Float>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let hw = g.hw_out();
    for c in 0..g.cin_g() {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * hw;
                let dst = &mut cols[row..row + hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into one group of one image.
fn col2im<T: Float>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let hw = g.hw_out();
    for c in 0..g.cin_g() {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * hw;
                let src = &cols[row..row + hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(g: &ConvGeom) -> bool {
    g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0
}

pub fn conv2d<T: Float>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, opts: Conv2dOpts) -> Result<Tensor<T>> {
    let g = conv_geom(x.shape(), w.shape(), b.map(|b| b.shape()), opts)?;
    Ok(conv2d_forward(x, w, b, &g))
}

fn conv2d_forward<T: Float>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, g: &ConvGeom) -> Tensor<T> {
    let (xd, wd) = (x.data(), w.data());
    let hw = g.hw_out();
    let ck = g.ck();
    let in_img = g.cin * g.h * g.w;
    let in_grp = g.cin_g() * g.h * g.w;
    let mut out = vec![T::zero(); g.n * g.cout * hw];
    parallel::for_each_chunk_mut(&mut out, (g.cout * hw).max(1), |n, img| {
        let mut cols = if is_pointwise(g) { Vec::new() } else { vec![T::zero(); ck * hw] };
        for grp in 0..g.groups {
            let xs = &xd[n * in_img + grp * in_grp..n * in_img + (grp + 1) * in_grp];
            let colsv: &[T] = if is_pointwise(g) {
                xs
            } else {
                im2col(xs, g, &mut cols);
                &cols
            };
            let dst = &mut img[grp * g.cout_g() * hw..(grp + 1) * g.cout_g() * hw];
            let wg = &wd[grp * g.cout_g() * ck..(grp + 1) * g.cout_g() * ck];
            let beta = if let Some(b) = b {
                for (co, plane) in dst.chunks_mut(hw).enumerate() {
                    plane.fill(b.data()[grp * g.cout_g() + co]);
                }
                T::one()
            } else {
                T::zero()
            };
            gemm(g.cout_g(), ck, hw, Mat::rm(wg, ck), Mat::rm(colsv, hw), beta, dst);
        }
    });
    Tensor::from_parts(vec![g.n, g.cout, g.ho, g.wo], out)
}

pub(crate) fn conv2d_backward<T: Float>(
    gy: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &ConvGeom,
    has_bias: bool,
) -> (Tensor<T>, Tensor<T>, Option<Tensor<T>>) {
    let (xd, wd, gd) = (x.data(), w.data(), gy.data());
    let hw = g.hw_out();
    let ck = g.ck();
    let in_img = g.cin * g.h * g.w;
    let in_grp = g.cin_g() * g.h * g.w;
    let out_img = g.cout * hw;
    let cout_g = g.cout_g();

    // Input gradient: one image per task.
    let mut gx = vec![T::zero(); x.numel()];
    parallel::for_each_chunk_mut(&mut gx, in_img.max(1), |n, gimg| {
        let mut cols = vec![T::zero(); ck * hw];
        for grp in 0..g.groups {
            let gys = &gd[n * out_img + grp * cout_g * hw..n * out_img + (grp + 1) * cout_g * hw];
            let wg = &wd[grp * cout_g * ck..(grp + 1) * cout_g * ck];
            let dst = &mut gimg[grp * in_grp..(grp + 1) * in_grp];
            if is_pointwise(g) {
                gemm(ck, cout_g, hw, Mat::rm_t(wg, ck), Mat::rm(gys, hw), T::zero(), dst);
            } else {
                gemm(ck, cout_g, hw, Mat::rm_t(wg, ck), Mat::rm(gys, hw), T::zero(), &mut cols);
                col2im(&cols, g, dst);
            }
        }
    });

    // Weight gradient: per-image partials, summed in image order.
    let partials = parallel::map(g.n, |n| {
        let mut gw = vec![T::zero(); w.numel()];
        let mut cols = if is_pointwise(g) { Vec::new() } else { vec![T::zero(); ck * hw] };
        for grp in 0..g.groups {
            let xs = &xd[n * in_img + grp * in_grp..n * in_img + (grp + 1) * in_grp];
            let colsv: &[T] = if is_pointwise(g) {
                xs
            } else {
                im2col(xs, g, &mut cols);
                &cols
            };
            let gys = &gd[n * out_img + grp * cout_g * hw..n * out_img + (grp + 1) * cout_g * hw];
            let dst = &mut gw[grp * cout_g * ck..(grp + 1) * cout_g * ck];
            gemm(cout_g, hw, ck, Mat::rm(gys, hw), Mat::rm_t(colsv, hw), T::zero(), dst);
        }
        gw
    });
    let mut gw = vec![T::zero(); w.numel()];
    for p in &partials {
        for (a, &v) in gw.iter_mut().zip(p) {
            *a += v;
        }
    }

    let gb = has_bias.then(|| {
        let mut gb = vec![T::zero(); g.cout];
        for img in gd.chunks(out_img.max(1)) {
            for (co, plane) in img.chunks(hw.max(1)).enumerate() {
                gb[co] += plane.iter().copied().sum::<T>();
            }
        }
        Tensor::from_parts(vec![g.cout], gb)
    });
    (
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(w.shape().to_vec(), gw),
        gb,
    )
}

impl<'g, T: Float> Var<'g, T> {
    /// Cross-correlation of `[N,Cin,H,W]` with weights `[Cout,Cin/groups,kh,kw]`.
    pub fn conv2d(self, w: Var<'g, T>, b: Option<Var<'g, T>>, opts: Conv2dOpts) -> Result<Var<'g, T>> {
        let wi = self.same(w)?;
        let bi = b.map(|b| self.same(b)).transpose()?;
        let (xv, wv) = (self.value(), w.value());
        let bv = b.map(|b| b.value());
        let geom = conv_geom(xv.shape(), wv.shape(), bv.as_deref().map(|b| b.shape()), opts)?;
        let out = conv2d_forward(&xv, &wv, bv.as_deref(), &geom);
        let mut parents = vec![self.id(), wi];
        parents.extend(bi);
        Ok(self.push(
            out,
            Op::Conv2d {
                x: self.id(),
                w: wi,
                b: bi,
                geom,
            },
            &parents,
        ))
    }
}
