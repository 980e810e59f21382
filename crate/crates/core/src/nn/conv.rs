//! 3×3×3 convolution, zero padding 1, stride 1, as a direct correlation
//! over a zero-padded copy of the input.

use std::any::TypeId;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL * KERNEL;
/// Zeros after each padded channel so vector loads may overrun the last voxel.
const SLACK: usize = 16;

/// Padded geometry of one `[D, H, W]` channel.
#[derive(Clone, Copy)]
struct Layout {
    d: usize,
    h: usize,
    w: usize,
    /// Channel stride, including [`SLACK`].
    np: usize,
    /// Interior position range `[p0, p1)`; ring positions inside it are junk.
    p0: usize,
    p1: usize,
    off: [isize; TAPS],
}

impl Layout {
    fn new(d: usize, h: usize, w: usize) -> Self {
        let (ph, pw) = (h + 2, w + 2);
        let off = std::array::from_fn(|t| {
            let (kz, ky, kx) = ((t / 9) as isize, ((t / 3) % 3) as isize, (t % 3) as isize);
            (kz - 1) * (ph * pw) as isize + (ky - 1) * pw as isize + (kx - 1)
        });
        Layout {
            d,
            h,
            w,
            np: (d + 2) * ph * pw + SLACK,
            p0: ph * pw + pw + 1,
            p1: (d * ph + h) * pw + w + 1,
            off,
        }
    }

    fn row(&self, z: usize, y: usize) -> usize {
        ((z + 1) * (self.h + 2) + y + 1) * (self.w + 2) + 1
    }

    /// Zero-padded copy of `c` channels, with `rows ≥ c` channel slots.
    fn pad<T: Element>(&self, x: &[T], c: usize, rows: usize) -> Vec<T> {
        let (d, h, w) = (self.d, self.h, self.w);
        let mut out = vec![T::zero(); rows * self.np];
        for ci in 0..c {
            for z in 0..d {
                for y in 0..h {
                    let src = ((ci * d + z) * h + y) * w;
                    let dst = ci * self.np + self.row(z, y);
                    out[dst..dst + w].copy_from_slice(&x[src..src + w]);
                }
            }
        }
        out
    }

    fn unpad<T: Element>(&self, xp: &[T], c: usize, out: &mut [T]) {
        let (d, h, w) = (self.d, self.h, self.w);
        for ci in 0..c {
            for z in 0..d {
                for y in 0..h {
                    let dst = ((ci * d + z) * h + y) * w;
                    let src = ci * self.np + self.row(z, y);
                    out[dst..dst + w].copy_from_slice(&xp[src..src + w]);
                }
            }
        }
    }
}

fn as_f32<T: Element>(s: &[T]) -> Option<&[f32]> {
    // SAFETY: T is f32 by the type id check.
    (TypeId::of::<T>() == TypeId::of::<f32>()).then(|| unsafe { std::slice::from_raw_parts(s.as_ptr().cast(), s.len()) })
}

fn as_f32_mut<T: Element>(s: &mut [T]) -> Option<&mut [f32]> {
    // SAFETY: T is f32 by the type id check.
    (TypeId::of::<T>() == TypeId::of::<f32>())
        .then(|| unsafe { std::slice::from_raw_parts_mut(s.as_mut_ptr().cast(), s.len()) })
}

fn use_avx() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

/// `out[co][p] = Σ_ci Σ_t w[co][ci][t] · x[ci][p + off[t]]` over the interior
/// range. `x` has `cin` padded channels; `out` is resized to at least
/// `cout` padded channels.
fn correlate<T: Element>(lay: &Layout, x: &[T], cin: usize, w: &[T], cout: usize, out: &mut Vec<T>) {
    #[cfg(target_arch = "x86_64")]
    if let (true, Some(xf), Some(wf)) = (use_avx(), as_f32(x), as_f32(w)) {
        let blocks = cout.div_ceil(avx::CB);
        let mut packed = vec![0.0f32; blocks * cin * TAPS * avx::CB];
        for co in 0..cout {
            for ci in 0..cin {
                for t in 0..TAPS {
                    packed[(((co / avx::CB) * cin + ci) * TAPS + t) * avx::CB + co % avx::CB] = wf[(co * cin + ci) * TAPS + t];
                }
            }
        }
        out.resize(blocks * avx::CB * lay.np, T::zero());
        let of = as_f32_mut(out).expect("f32 output");
        // SAFETY: avx2 and fma were detected.
        unsafe { avx::correlate(xf, cin, lay.np, &packed, blocks, &lay.off, lay.p0, lay.p1, of) };
        return;
    }
    out.resize(cout * lay.np, T::zero());
    for co in 0..cout {
        let o = &mut out[co * lay.np..(co + 1) * lay.np];
        o[lay.p0..lay.p1].iter_mut().for_each(|v| *v = T::zero());
        for ci in 0..cin {
            let xr = &x[ci * lay.np..(ci + 1) * lay.np];
            for (t, &off) in lay.off.iter().enumerate() {
                let wv = w[(co * cin + ci) * TAPS + t];
                let xs = &xr[lay.p0.wrapping_add_signed(off)..];
                for (a, &xv) in o[lay.p0..lay.p1].iter_mut().zip(xs) {
                    *a += wv * xv;
                }
            }
        }
    }
}

/// `gw[co][ci][t] += Σ_p g[co][p] · x[ci][p + off[t]]`; `g` is padded with
/// zeros on the ring and has `cout` rounded up to whole blocks.
fn weight_grad<T: Element>(lay: &Layout, g: &[T], cout: usize, x: &[T], cin: usize, gw: &mut [T]) {
    #[cfg(target_arch = "x86_64")]
    if let (true, Some(gf), Some(xf)) = (use_avx(), as_f32(g), as_f32(x)) {
        let gwf = as_f32_mut(gw).expect("f32 gradient");
        // SAFETY: avx2 and fma were detected.
        unsafe { avx::weight_grad(gf, cout, xf, cin, lay.np, &lay.off, lay.p0, lay.p1, gwf) };
        return;
    }
    let len = lay.p1 - lay.p0;
    for (t, &o) in lay.off.iter().enumerate() {
        let xs = &x[lay.p0.wrapping_add_signed(o)..];
        T::gemm_strided(cout, len, cin, (&g[lay.p0..], lay.np, 1), (xs, 1, lay.np), (&mut gw[t..], cin * TAPS, TAPS), T::one());
    }
}

#[cfg(target_arch = "x86_64")]
mod avx {
    use std::arch::x86_64::*;

    use super::TAPS;

    /// Output channels per register block.
    pub const CB: usize = 4;
    const V: usize = 16;

    /// Weights are packed `[cout/CB][cin][tap][CB]`. Writes whole 16-voxel
    /// blocks starting at `p0`, so up to 15 positions past `p1`.
    #[target_feature(enable = "avx2,fma")]
    #[allow(clippy::too_many_arguments)]
    pub unsafe fn correlate(
        x: &[f32],
        cin: usize,
        np: usize,
        packed: &[f32],
        blocks: usize,
        off: &[isize; TAPS],
        p0: usize,
        p1: usize,
        out: &mut [f32],
    ) {
        let end = p0 + (p1 - p0).div_ceil(V) * V;
        let (lo, hi) = (off[0], off[TAPS - 1]);
        assert!(p0 as isize + lo >= 0 && end as isize - 1 + hi < np as isize);
        assert!(x.len() >= cin * np && out.len() >= blocks * CB * np);
        assert!(packed.len() >= blocks * cin * TAPS * CB);
        let (xp, op) = (x.as_ptr(), out.as_mut_ptr());
        for b in 0..blocks {
            let wb = packed.as_ptr().add(b * cin * TAPS * CB);
            let mut p = p0;
            while p < end {
                let mut acc = [_mm256_setzero_ps(); 2 * CB];
                for ci in 0..cin {
                    let xr = xp.add(ci * np + p);
                    let wr = wb.add(ci * TAPS * CB);
                    for (t, &o) in off.iter().enumerate() {
                        let xs = xr.offset(o);
                        let (x0, x1) = (_mm256_loadu_ps(xs), _mm256_loadu_ps(xs.add(8)));
                        for c in 0..CB {
                            let wv = _mm256_broadcast_ss(&*wr.add(t * CB + c));
                            acc[2 * c] = _mm256_fmadd_ps(wv, x0, acc[2 * c]);
                            acc[2 * c + 1] = _mm256_fmadd_ps(wv, x1, acc[2 * c + 1]);
                        }
                    }
                }
                for c in 0..CB {
                    let dst = op.add((b * CB + c) * np + p);
                    _mm256_storeu_ps(dst, acc[2 * c]);
                    _mm256_storeu_ps(dst.add(8), acc[2 * c + 1]);
                }
                p += V;
            }
        }
    }

    #[target_feature(enable = "avx2,fma")]
    unsafe fn hsum(v: __m256) -> f32 {
        let s = _mm_add_ps(_mm256_castps256_ps128(v), _mm256_extractf128_ps(v, 1));
        let s = _mm_add_ps(s, _mm_movehl_ps(s, s));
        let s = _mm_add_ss(s, _mm_shuffle_ps(s, s, 1));
        _mm_cvtss_f32(s)
    }

    /// `g` holds `cout` rounded up to [`CB`] rows, zero on the padding ring
    /// and slack, so the range may be extended to whole 8-voxel steps.
    #[target_feature(enable = "avx2,fma")]
    #[allow(clippy::too_many_arguments)]
    pub unsafe fn weight_grad(
        g: &[f32],
        cout: usize,
        x: &[f32],
        cin: usize,
        np: usize,
        off: &[isize; TAPS],
        p0: usize,
        p1: usize,
        gw: &mut [f32],
    ) {
        let blocks = cout.div_ceil(CB);
        let end = p0 + (p1 - p0).div_ceil(8) * 8;
        let (lo, hi) = (off[0], off[TAPS - 1]);
        assert!(p0 as isize + lo >= 0 && end as isize + 1 + hi < np as isize);
        assert!(g.len() >= blocks * CB * np && x.len() >= cin * np && gw.len() >= cout * cin * TAPS);
        let (gp, xp) = (g.as_ptr(), x.as_ptr());
        for b in 0..blocks {
            for ci in 0..cin {
                // taps in rows of three along x: offsets o, o + 1, o + 2
                for row in 0..TAPS / 3 {
                    let o = off[3 * row];
                    let mut acc = [_mm256_setzero_ps(); 3 * CB];
                    let mut p = p0;
                    while p < end {
                        let xs = xp.add(ci * np + p).offset(o);
                        let xv = [_mm256_loadu_ps(xs), _mm256_loadu_ps(xs.add(1)), _mm256_loadu_ps(xs.add(2))];
                        for c in 0..CB {
                            let gv = _mm256_loadu_ps(gp.add((b * CB + c) * np + p));
                            for k in 0..3 {
                                acc[3 * c + k] = _mm256_fmadd_ps(gv, xv[k], acc[3 * c + k]);
                            }
                        }
                        p += 8;
                    }
                    for c in 0..CB {
                        let co = b * CB + c;
                        if co < cout {
                            for k in 0..3 {
                                gw[(co * cin + ci) * TAPS + 3 * row + k] += hsum(acc[3 * c + k]);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `input [N, Cin, D, H, W]`, `weight [Cout, Cin, 3, 3, 3]`, `bias [Cout]`
/// to `[N, Cout, D, H, W]`.
pub fn conv3d<T: Element>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, cin, d, h, w) = match *input.shape() {
        [n, c, d, h, w] if d > 0 && h > 0 && w > 0 => (n, c, d, h, w),
        _ => {
            return Err(Error::InvalidShape {
                op: "conv3d",
                msg: format!("expected [N, C, D, H, W] input, got {:?}", input.shape()),
            })
        }
    };
    let cout = match *weight.shape() {
        [co, ci, KERNEL, KERNEL, KERNEL] if ci == cin => co,
        _ => return Err(Error::shape("conv3d", input.shape(), weight.shape())),
    };
    if bias.shape() != [cout] {
        return Err(Error::shape("conv3d", weight.shape(), bias.shape()));
    }
    let s = d * h * w;
    let lay = Layout::new(d, h, w);
    let (x, wt, b) = (input.data(), weight.data(), bias.data());
    let mut out = vec![T::zero(); n * cout * s];
    let mut scratch = Vec::new();
    for item in 0..n {
        let xp = lay.pad(&x[item * cin * s..(item + 1) * cin * s], cin, cin);
        correlate(&lay, &xp, cin, wt, cout, &mut scratch);
        let o = &mut out[item * cout * s..(item + 1) * cout * s];
        lay.unpad(&scratch, cout, o);
        for (co, row) in o.chunks_mut(s).enumerate() {
            row.iter_mut().for_each(|v| *v += b[co]);
        }
    }
    drop(scratch);

    let shape = vec![n, cout, d, h, w];
    Ok(Tensor::from_op(
        "conv3d",
        shape,
        out,
        vec![input.clone(), weight.clone(), bias.clone()],
        move |a| {
            let (x, wt) = (a.inputs[0].data(), a.inputs[1].data());
            let g = a.grad;
            let mut gx = a.needs[0].then(|| vec![T::zero(); n * cin * s]);
            let mut gw = a.needs[1].then(|| vec![T::zero(); cout * cin * TAPS]);
            let gb = a.needs[2].then(|| {
                let mut gb = vec![T::zero(); cout];
                for item in 0..n {
                    for (co, acc) in gb.iter_mut().enumerate() {
                        let base = (item * cout + co) * s;
                        *acc += g[base..base + s].iter().copied().sum::<T>();
                    }
                }
                gb
            });
            // flipped, transposed kernel for the input gradient
            let wflip: Vec<T> = if gx.is_some() {
                let mut f = vec![T::zero(); cin * cout * TAPS];
                for co in 0..cout {
                    for ci in 0..cin {
                        for t in 0..TAPS {
                            f[(ci * cout + co) * TAPS + TAPS - 1 - t] = wt[(co * cin + ci) * TAPS + t];
                        }
                    }
                }
                f
            } else {
                Vec::new()
            };
            let mut scratch = Vec::new();
            for item in 0..n {
                let gp = lay.pad(&g[item * cout * s..(item + 1) * cout * s], cout, cout.next_multiple_of(4));
                if let Some(gw) = gw.as_mut() {
                    let xp = lay.pad(&x[item * cin * s..(item + 1) * cin * s], cin, cin);
                    weight_grad(&lay, &gp, cout, &xp, cin, gw);
                }
                if let Some(gx) = gx.as_mut() {
                    correlate(&lay, &gp, cout, &wflip, cin, &mut scratch);
                    lay.unpad(&scratch, cin, &mut gx[item * cin * s..(item + 1) * cin * s]);
                }
            }
            vec![gx, gw, gb]
        },
    ))
}
