//! 3x3 "same" convolution kernels, computed in a channel-major layout so the
//! inner loops run along image rows.

use crate::tensor::Real;

fn to_channel_major<T: Real>(src: &[T], batch: usize, hw: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for b in 0..batch {
        let (s, d) = (&src[b * hw * c..(b + 1) * hw * c], &mut out[b * hw * c..(b + 1) * hw * c]);
        for p in 0..hw {
            for ch in 0..c {
                d[ch * hw + p] = s[p * c + ch];
            }
        }
    }
    out
}

fn from_channel_major<T: Real>(src: &[T], batch: usize, hw: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for b in 0..batch {
        let (s, d) = (&src[b * hw * c..(b + 1) * hw * c], &mut out[b * hw * c..(b + 1) * hw * c]);
        for ch in 0..c {
            for p in 0..hw {
                d[p * c + ch] = s[ch * hw + p];
            }
        }
    }
    out
}

/// Valid output columns `[lo, hi)` for horizontal tap `dx`; the input column is `x + dx - 1`.
fn cols(dx: usize, w: usize) -> (usize, usize) {
    (usize::from(dx == 0), if dx == 2 { w - 1 } else { w })
}

fn rows(dy: usize, h: usize) -> (usize, usize) {
    cols(dy, h)
}

fn axpy<T: Real>(a: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    for (i, (&x, &y)) in ra.iter().zip(rb).enumerate() {
        acc[i] += x * y;
    }
    acc.iter().copied().fold(T::zero(), |s, v| s + v)
}

pub(super) struct Dims {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
}

/// `x[B, H, W, Cin]`, `k[3, 3, Cin, Cout]`, `b[Cout]` to `[B, H, W, Cout]`.
pub(super) fn forward<T: Real>(x: &[T], k: &[T], bias: &[T], d: &Dims) -> Vec<T> {
    let Dims { batch, h, w, cin, cout } = *d;
    let hw = h * w;
    let xc = to_channel_major(x, batch, hw, cin);
    let mut oc = vec![T::zero(); batch * hw * cout];
    for b in 0..batch {
        let xb = &xc[b * hw * cin..(b + 1) * hw * cin];
        let ob = &mut oc[b * hw * cout..(b + 1) * hw * cout];
        for co in 0..cout {
            let o = &mut ob[co * hw..(co + 1) * hw];
            o.fill(bias[co]);
            for ci in 0..cin {
                let xi = &xb[ci * hw..(ci + 1) * hw];
                for dy in 0..3 {
                    let (y0, y1) = rows(dy, h);
                    for dx in 0..3 {
                        let kv = k[((dy * 3 + dx) * cin + ci) * cout + co];
                        let (x0, x1) = cols(dx, w);
                        for y in y0..y1 {
                            let src = (y + dy - 1) * w + x0 + dx - 1;
                            axpy(kv, &xi[src..src + x1 - x0], &mut o[y * w + x0..y * w + x1]);
                        }
                    }
                }
            }
        }
    }
    from_channel_major(&oc, batch, hw, cout)
}

/// Gradients w.r.t. input, kernel and bias given the output gradient `g`.
#[allow(clippy::type_complexity)]
pub(super) fn backward<T: Real>(
    x: &[T],
    k: &[T],
    g: &[T],
    d: &Dims,
    need_x: bool,
    need_k: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let Dims { batch, h, w, cin, cout } = *d;
    let hw = h * w;
    let gc = to_channel_major(g, batch, hw, cout);
    let mut gx = need_x.then(|| vec![T::zero(); batch * hw * cin]);
    let mut gk = need_k.then(|| vec![T::zero(); 9 * cin * cout]);
    let mut gb = need_k.then(|| vec![T::zero(); cout]);
    if let Some(gxc) = gx.as_mut() {
        for b in 0..batch {
            let gbt = &gc[b * hw * cout..(b + 1) * hw * cout];
            let gxb = &mut gxc[b * hw * cin..(b + 1) * hw * cin];
            for ci in 0..cin {
                let gi = &mut gxb[ci * hw..(ci + 1) * hw];
                for co in 0..cout {
                    let go = &gbt[co * hw..(co + 1) * hw];
                    for dy in 0..3 {
                        let (y0, y1) = rows(dy, h);
                        for dx in 0..3 {
                            let kv = k[((dy * 3 + dx) * cin + ci) * cout + co];
                            let (x0, x1) = cols(dx, w);
                            for y in y0..y1 {
                                let dst = (y + dy - 1) * w + x0 + dx - 1;
                                axpy(kv, &go[y * w + x0..y * w + x1], &mut gi[dst..dst + x1 - x0]);
                            }
                        }
                    }
                }
            }
        }
    }
    if let (Some(gk), Some(gb)) = (gk.as_mut(), gb.as_mut()) {
        let xc = to_channel_major(x, batch, hw, cin);
        for b in 0..batch {
            let gbt = &gc[b * hw * cout..(b + 1) * hw * cout];
            let xb = &xc[b * hw * cin..(b + 1) * hw * cin];
            for co in 0..cout {
                let go = &gbt[co * hw..(co + 1) * hw];
                gb[co] += go.iter().copied().fold(T::zero(), |s, v| s + v);
                for ci in 0..cin {
                    let xi = &xb[ci * hw..(ci + 1) * hw];
                    for dy in 0..3 {
                        let (y0, y1) = rows(dy, h);
                        for dx in 0..3 {
                            let (x0, x1) = cols(dx, w);
                            let mut acc = T::zero();
                            for y in y0..y1 {
                                let src = (y + dy - 1) * w + x0 + dx - 1;
                                acc += dot(&xi[src..src + x1 - x0], &go[y * w + x0..y * w + x1]);
                            }
                            gk[((dy * 3 + dx) * cin + ci) * cout + co] += acc;
                        }
                    }
                }
            }
        }
    }
    (gx.map(|v| from_channel_major(&v, batch, hw, cin)), gk, gb)
}
