//! 2-D cross-correlation as a single autodiff op with direct loops.
//!
//! The backend's own CPU conv kernel returns wrong values for some channel and
//! size combinations, and its backward pass is slow on tiny maps.

use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor, WithDType};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (&[n, cin, h, w], &[cout, kcin, kh, kw]) = (x, k) else {
            return Err(Error::ShapeMismatch("conv operands must be 4-d".into()));
        };
        if kcin != cin {
            return Err(Error::ShapeMismatch(format!(
                "conv kernel expects {kcin} input channels, got {cin}"
            )));
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::ShapeMismatch(format!(
                "conv {kh}x{kw}/{stride} does not fit a {h}x{w} input"
            )));
        }
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    /// Outputs `o` with `0 <= o*stride + k - pad < size`.
    fn valid(&self, k: usize, size: usize, out: usize) -> (usize, usize) {
        let lo = if self.pad > k { (self.pad - k).div_ceil(self.stride) } else { 0 };
        let hi = if size + self.pad > k {
            ((size + self.pad - k - 1) / self.stride + 1).min(out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    /// Kernel taps `(row, ci, ky, kx)` in weight-flattening order.
    fn taps(&self) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        let (kh, kw) = (self.kh, self.kw);
        (0..self.cin * kh * kw).map(move |r| (r, r / (kh * kw), (r / kw) % kh, r % kw))
    }

    /// Patch matrix `(cin*kh*kw, oh*ow)` of sample `b`.
    fn im2col<T: WithDType>(&self, x: &[T], b: usize, cols: &mut [T]) {
        let l = self.oh * self.ow;
        cols.fill(T::from_f64(0.0));
        for (r, ci, ky, kx) in self.taps() {
            let (ylo, yhi) = self.valid(ky, self.h, self.oh);
            let (xlo, xhi) = self.valid(kx, self.w, self.ow);
            let plane = &x[(b * self.cin + ci) * self.h * self.w..][..self.h * self.w];
            let row = &mut cols[r * l..(r + 1) * l];
            for oy in ylo..yhi {
                let src = &plane[(oy * self.stride + ky - self.pad) * self.w..][..self.w];
                for ox in xlo..xhi {
                    row[oy * self.ow + ox] = src[ox * self.stride + kx - self.pad];
                }
            }
        }
    }

    /// Adjoint of `im2col`: scatter-adds patch gradients into `gx`.
    fn col2im<T: WithDType>(&self, cols: &[T], b: usize, gx: &mut [T]) {
        let l = self.oh * self.ow;
        for (r, ci, ky, kx) in self.taps() {
            let (ylo, yhi) = self.valid(ky, self.h, self.oh);
            let (xlo, xhi) = self.valid(kx, self.w, self.ow);
            let plane = &mut gx[(b * self.cin + ci) * self.h * self.w..][..self.h * self.w];
            let row = &cols[r * l..(r + 1) * l];
            for oy in ylo..yhi {
                let dst = &mut plane[(oy * self.stride + ky - self.pad) * self.w..][..self.w];
                for ox in xlo..xhi {
                    dst[ox * self.stride + kx - self.pad] += row[oy * self.ow + ox];
                }
            }
        }
    }

    fn out_len(&self) -> usize {
        self.n * self.cout * self.oh * self.ow
    }
}

fn axpy<T: WithDType>(a: T, x: &[T], y: &mut [T]) {
    y.iter_mut().zip(x).for_each(|(y, &x)| *y += a * x);
}

fn dot<T: WithDType>(x: &[T], y: &[T]) -> T {
    x.iter().zip(y).fold(T::from_f64(0.0), |acc, (&a, &b)| acc + a * b)
}

fn forward<T: WithDType>(g: &Geometry, x: &[T], w: &[T]) -> Vec<T> {
    let (k, l) = (g.cin * g.kh * g.kw, g.oh * g.ow);
    let mut y = vec![T::from_f64(0.0); g.out_len()];
    let mut cols = vec![T::from_f64(0.0); k * l];
    for b in 0..g.n {
        g.im2col(x, b, &mut cols);
        for co in 0..g.cout {
            let out = &mut y[(b * g.cout + co) * l..][..l];
            for (r, &wv) in w[co * k..(co + 1) * k].iter().enumerate() {
                axpy(wv, &cols[r * l..(r + 1) * l], out);
            }
        }
    }
    y
}

fn backward<T: WithDType>(g: &Geometry, x: &[T], w: &[T], gy: &[T]) -> (Vec<T>, Vec<T>) {
    let (k, l) = (g.cin * g.kh * g.kw, g.oh * g.ow);
    let mut gx = vec![T::from_f64(0.0); x.len()];
    let mut gw = vec![T::from_f64(0.0); w.len()];
    let mut cols = vec![T::from_f64(0.0); k * l];
    let mut gcols = vec![T::from_f64(0.0); k * l];
    for b in 0..g.n {
        g.im2col(x, b, &mut cols);
        gcols.fill(T::from_f64(0.0));
        for co in 0..g.cout {
            let grow = &gy[(b * g.cout + co) * l..][..l];
            for r in 0..k {
                let crow = &cols[r * l..(r + 1) * l];
                gw[co * k + r] += dot(grow, crow);
                axpy(w[co * k + r], grow, &mut gcols[r * l..(r + 1) * l]);
            }
        }
        g.col2im(&gcols, b, &mut gx);
    }
    (gx, gw)
}

struct Conv2dOp(Geometry);

fn slice<'a, T>(data: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("conv operands must be contiguous"),
    }
}

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d-direct"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let shape = Shape::from((g.n, g.cout, g.oh, g.ow));
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(w)) => {
                CpuStorage::F32(forward(g, slice(x, l1)?, slice(w, l2)?))
            }
            (CpuStorage::F64(x), CpuStorage::F64(w)) => {
                CpuStorage::F64(forward(g, slice(x, l1)?, slice(w, l2)?))
            }
            _ => candle_core::bail!("conv supports matching f32 or f64 operands"),
        };
        Ok((out, shape))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        gy: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        fn run<T: WithDType>(
            g: &Geometry,
            x: &Tensor,
            w: &Tensor,
            gy: &Tensor,
        ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
            let xv = x.flatten_all()?.to_vec1::<T>()?;
            let wv = w.flatten_all()?.to_vec1::<T>()?;
            let gyv = gy.flatten_all()?.to_vec1::<T>()?;
            let (gx, gw) = backward(g, &xv, &wv, &gyv);
            Ok((
                Some(Tensor::from_vec(gx, x.shape(), x.device())?),
                Some(Tensor::from_vec(gw, w.shape(), w.device())?),
            ))
        }
        match x.dtype() {
            candle_core::DType::F32 => run::<f32>(&self.0, x, w, gy),
            candle_core::DType::F64 => run::<f64>(&self.0, x, w, gy),
            d => candle_core::bail!("conv does not support {d:?}"),
        }
    }
}

/// Zero-padded cross-correlation of `(N, Cin, H, W)` with `(Cout, Cin, kh, kw)`.
pub fn conv2d_raw(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = Geometry::new(x.dims(), w.dims(), stride, padding)?;
    if x.dtype() != w.dtype() {
        return Err(Error::ShapeMismatch("conv operands differ in dtype".into()));
    }
    Ok(x.contiguous()?.apply_op2(&w.contiguous()?, Conv2dOp(g))?)
}
