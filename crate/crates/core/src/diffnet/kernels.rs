//! Dense 3D convolution kernels over `[N, C, D, H, W]` buffers, stride 1,
//! zero padding `k / 2`.
//!
//! Every channel is copied into a zero-padded volume so that each kernel tap
//! is a single contiguous axpy or dot over the flattened padded layout.

use rayon::prelude::*;

/// Flattened zero-padded layout for one channel.
#[derive(Clone, Copy)]
struct Padded {
    sp: [usize; 3],
    p: usize,
    dims: [usize; 3],
}

impl Padded {
    fn new(sp: [usize; 3], k: usize) -> Self {
        let p = k / 2;
        Padded { sp, p, dims: [sp[0] + 2 * p, sp[1] + 2 * p, sp[2] + 2 * p] }
    }

    fn len(&self) -> usize {
        self.dims.iter().product()
    }

    fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    /// Range of padded positions covering every interior voxel.
    fn interior(&self) -> (usize, usize) {
        let [d, h, w] = self.sp;
        let p = self.p;
        (self.index(p, p, p), self.index(p + d - 1, p + h - 1, p + w - 1) + 1)
    }

    fn offset(&self, d: [isize; 3]) -> isize {
        (d[0] * self.dims[1] as isize + d[1]) * self.dims[2] as isize + d[2]
    }

    fn pad_into(&self, src: &[f64], dst: &mut [f64]) {
        let [d, h, w] = self.sp;
        for z in 0..d {
            for y in 0..h {
                let o = self.index(z + self.p, y + self.p, self.p);
                dst[o..o + w].copy_from_slice(&src[(z * h + y) * w..(z * h + y + 1) * w]);
            }
        }
    }

    fn pad_all(&self, src: &[f64], channels: usize) -> Vec<f64> {
        let vol = self.sp.iter().product::<usize>();
        let len = self.len();
        let mut out = vec![0.0; channels * len];
        for (c, dst) in out.chunks_mut(len).enumerate() {
            self.pad_into(&src[c * vol..(c + 1) * vol], dst);
        }
        out
    }

    fn unpad_into(&self, src: &[f64], dst: &mut [f64]) {
        let [d, h, w] = self.sp;
        for z in 0..d {
            for y in 0..h {
                let o = self.index(z + self.p, y + self.p, self.p);
                dst[(z * h + y) * w..(z * h + y + 1) * w].copy_from_slice(&src[o..o + w]);
            }
        }
    }
}

fn offsets(k: usize) -> Vec<[isize; 3]> {
    let p = (k / 2) as isize;
    let mut v = Vec::with_capacity(k * k * k);
    for kz in 0..k as isize {
        for ky in 0..k as isize {
            for kx in 0..k as isize {
                v.push([kz - p, ky - p, kx - p]);
            }
        }
    }
    v
}

// Separate mul and add (no fma) keep results identical across the dispatch paths.
const LANES: usize = 8;

/// `acc[j] += sum_t ws[t] * inp[base + j + offs[t]]`.
#[inline(always)]
fn stencil_impl(acc: &mut [f64], inp: &[f64], base: usize, offs: &[isize], ws: &[f64]) {
    let n = acc.len();
    let starts: Vec<usize> = offs.iter().map(|&o| (base as isize + o) as usize).collect();
    let mut j = 0;
    while j + LANES <= n {
        let mut s = [0.0; LANES];
        for (st, &c) in starts.iter().zip(ws) {
            let src = &inp[st + j..st + j + LANES];
            for l in 0..LANES {
                s[l] += c * src[l];
            }
        }
        for l in 0..LANES {
            acc[j + l] += s[l];
        }
        j += LANES;
    }
    for jj in j..n {
        let mut s = 0.0;
        for (st, &c) in starts.iter().zip(ws) {
            s += c * inp[st + jj];
        }
        acc[jj] += s;
    }
}

/// `out[t] = sum_j g[j] * x[base + j + offs[t]]` for three taps at once.
#[inline(always)]
fn dot3_impl(g: &[f64], x: &[f64], base: usize, offs: [isize; 3]) -> [f64; 3] {
    let n = g.len();
    let st = offs.map(|o| (base as isize + o) as usize);
    let mut s = [[0.0; LANES]; 3];
    let mut j = 0;
    while j + LANES <= n {
        let gc = &g[j..j + LANES];
        for t in 0..3 {
            let xc = &x[st[t] + j..st[t] + j + LANES];
            for l in 0..LANES {
                s[t][l] += gc[l] * xc[l];
            }
        }
        j += LANES;
    }
    let mut out = [0.0; 3];
    for t in 0..3 {
        let mut width = LANES;
        while width > 1 {
            width /= 2;
            for l in 0..width {
                s[t][l] += s[t][l + width];
            }
        }
        out[t] = s[t][0];
        for jj in j..n {
            out[t] += g[jj] * x[st[t] + jj];
        }
    }
    out
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn stencil_avx2(acc: &mut [f64], inp: &[f64], base: usize, offs: &[isize], ws: &[f64]) {
    stencil_impl(acc, inp, base, offs, ws)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn dot3_avx2(g: &[f64], x: &[f64], base: usize, offs: [isize; 3]) -> [f64; 3] {
    dot3_impl(g, x, base, offs)
}

fn has_avx2() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::arch::is_x86_feature_detected!("avx2")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

fn stencil(acc: &mut [f64], inp: &[f64], base: usize, offs: &[isize], ws: &[f64]) {
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the feature was detected at runtime.
        return unsafe { stencil_avx2(acc, inp, base, offs, ws) };
    }
    stencil_impl(acc, inp, base, offs, ws)
}

fn dot3(g: &[f64], x: &[f64], base: usize, offs: [isize; 3]) -> [f64; 3] {
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the feature was detected at runtime.
        return unsafe { dot3_avx2(g, x, base, offs) };
    }
    dot3_impl(g, x, base, offs)
}

/// x `[N, I, S]`, w `[O, I, k, k, k]` -> `[N, O, S]`.
pub(crate) fn conv3d(x: &[f64], xs: &[usize], w: &[f64], ws: &[usize]) -> Vec<f64> {
    let (n, ci) = (xs[0], xs[1]);
    let sp = [xs[2], xs[3], xs[4]];
    let (co, k) = (ws[0], ws[2]);
    let vol = sp.iter().product::<usize>();
    let mut out = vec![0.0; n * co * vol];
    if vol == 0 {
        return out;
    }
    let kk = k * k * k;
    let pad = Padded::new(sp, k);
    let offs: Vec<isize> = offsets(k).into_iter().map(|d| pad.offset(d)).collect();
    let (lo, hi) = pad.interior();
    let xp = pad.pad_all(x, n * ci);
    let plen = pad.len();
    out.par_chunks_mut(vol).enumerate().for_each(|(slab, o_buf)| {
        let (b, o) = (slab / co, slab % co);
        let mut acc = vec![0.0; plen];
        for i in 0..ci {
            let inp = &xp[(b * ci + i) * plen..(b * ci + i + 1) * plen];
            let wk = &w[(o * ci + i) * kk..(o * ci + i + 1) * kk];
            stencil(&mut acc[lo..hi], inp, lo, &offs, wk);
        }
        pad.unpad_into(&acc, o_buf);
    });
    out
}

/// Adjoint of [`conv3d`] in its input: g `[N, O, S]`, w `[O, I, k, k, k]` -> `[N, I, S]`.
pub(crate) fn conv3d_transpose(g: &[f64], gs: &[usize], w: &[f64], ws: &[usize]) -> Vec<f64> {
    let (n, co) = (gs[0], gs[1]);
    let sp = [gs[2], gs[3], gs[4]];
    let (ci, k) = (ws[1], ws[2]);
    let vol = sp.iter().product::<usize>();
    let mut out = vec![0.0; n * ci * vol];
    if vol == 0 {
        return out;
    }
    let kk = k * k * k;
    let pad = Padded::new(sp, k);
    let offs: Vec<isize> = offsets(k).into_iter().map(|d| -pad.offset(d)).collect();
    let (lo, hi) = pad.interior();
    let gp = pad.pad_all(g, n * co);
    let plen = pad.len();
    out.par_chunks_mut(vol).enumerate().for_each(|(slab, i_buf)| {
        let (b, i) = (slab / ci, slab % ci);
        let mut acc = vec![0.0; plen];
        for o in 0..co {
            let gin = &gp[(b * co + o) * plen..(b * co + o + 1) * plen];
            let wk = &w[(o * ci + i) * kk..(o * ci + i + 1) * kk];
            stencil(&mut acc[lo..hi], gin, lo, &offs, wk);
        }
        pad.unpad_into(&acc, i_buf);
    });
    out
}

/// Adjoint of [`conv3d`] in its weights: x `[N, I, S]`, g `[N, O, S]` -> `[O, I, k, k, k]`.
pub(crate) fn conv3d_weight(x: &[f64], xs: &[usize], g: &[f64], gs: &[usize], k: usize) -> Vec<f64> {
    let (n, ci) = (xs[0], xs[1]);
    let co = gs[1];
    let sp = [xs[2], xs[3], xs[4]];
    let kk = k * k * k;
    let mut out = vec![0.0; co * ci * kk];
    if sp.iter().product::<usize>() == 0 {
        return out;
    }
    let pad = Padded::new(sp, k);
    let offs: Vec<isize> = offsets(k).into_iter().map(|d| pad.offset(d)).collect();
    let (lo, hi) = pad.interior();
    let xp = pad.pad_all(x, n * ci);
    let gp = pad.pad_all(g, n * co);
    let plen = pad.len();
    out.par_chunks_mut(kk).enumerate().for_each(|(blk, wk)| {
        let (o, i) = (blk / ci, blk % ci);
        for b in 0..n {
            let gb = &gp[(b * co + o) * plen + lo..(b * co + o) * plen + hi];
            let xb = &xp[(b * ci + i) * plen..(b * ci + i + 1) * plen];
            let mut t = 0;
            while t + 3 <= kk {
                let d = dot3(gb, xb, lo, [offs[t], offs[t + 1], offs[t + 2]]);
                for (a, v) in wk[t..t + 3].iter_mut().zip(d) {
                    *a += v;
                }
                t += 3;
            }
            for tt in t..kk {
                let d = dot3(gb, xb, lo, [offs[tt]; 3]);
                wk[tt] += d[0];
            }
        }
    });
    out
}

/// `C = op(A) op(B)` where `op` optionally transposes a row-major matrix.
pub(crate) fn matmul(a: &[f64], ash: &[usize], b: &[f64], bsh: &[usize], ta: bool, tb: bool) -> (Vec<f64>, [usize; 2]) {
    let (m, ka) = if ta { (ash[1], ash[0]) } else { (ash[0], ash[1]) };
    let (kb, n) = if tb { (bsh[1], bsh[0]) } else { (bsh[0], bsh[1]) };
    assert_eq!(ka, kb, "matmul inner extents differ");
    let at = |r: usize, c: usize| if ta { a[c * ash[1] + r] } else { a[r * ash[1] + c] };
    let bt = |r: usize, c: usize| if tb { b[c * bsh[1] + r] } else { b[r * bsh[1] + c] };
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        for c in 0..n {
            let mut s = 0.0;
            for q in 0..ka {
                s += at(r, q) * bt(q, c);
            }
            out[r * n + c] = s;
        }
    }
    (out, [m, n])
}
