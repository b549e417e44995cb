//! Inner loops shared by forward and backward passes.

#[inline]
pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (y, x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out[m×n] = a[m×k] · b[k×n]`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av != 0.0 {
                axpy(row, av, &b[kk * n..(kk + 1) * n]);
            }
        }
    }
    out
}

/// `da += dc · bᵀ`.
pub(crate) fn matmul_grad_lhs(dc: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g = &dc[i * n..(i + 1) * n];
        for kk in 0..k {
            da[i * k + kk] += dot(g, &b[kk * n..(kk + 1) * n]);
        }
    }
}

/// `db += aᵀ · dc`.
pub(crate) fn matmul_grad_rhs(a: &[f64], dc: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g = &dc[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av != 0.0 {
                axpy(&mut db[kk * n..(kk + 1) * n], av, g);
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl ConvDims {
    fn pad(&self) -> usize {
        self.kernel / 2
    }

    /// Valid output range `[lo, hi)` along one axis for kernel offset `k`.
    #[inline]
    fn range(&self, k: usize, len: usize) -> (usize, usize) {
        let p = self.pad();
        let lo = p.saturating_sub(k);
        let hi = (len + p).saturating_sub(k).min(len);
        (lo, hi)
    }
}

/// Same-padded stride-1 convolution. `x: [N,C,H,W]`, `w: [O,C,K,K]`, `b: [O]`.
pub(crate) fn conv2d(x: &[f64], w: &[f64], b: &[f64], d: ConvDims) -> Vec<f64> {
    let (h, wd, kk) = (d.height, d.width, d.kernel);
    let plane = h * wd;
    let p = d.pad();
    let mut out = vec![0.0; d.batch * d.out_ch * plane];
    for n in 0..d.batch {
        for o in 0..d.out_ch {
            let op = &mut out[(n * d.out_ch + o) * plane..][..plane];
            op.iter_mut().for_each(|v| *v = b[o]);
            for c in 0..d.in_ch {
                let ip = &x[(n * d.in_ch + c) * plane..][..plane];
                for ky in 0..kk {
                    let (ylo, yhi) = d.range(ky, h);
                    for kx in 0..kk {
                        let wv = w[((o * d.in_ch + c) * kk + ky) * kk + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (xlo, xhi) = d.range(kx, wd);
                        for y in ylo..yhi {
                            let sy = y + ky - p;
                            let src = &ip[sy * wd + xlo + kx - p..sy * wd + xhi + kx - p];
                            axpy(&mut op[y * wd + xlo..y * wd + xhi], wv, src);
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<'a> {
    pub dx: Option<&'a mut [f64]>,
    pub dw: Option<&'a mut [f64]>,
    pub db: Option<&'a mut [f64]>,
}

pub(crate) fn conv2d_backward(x: &[f64], w: &[f64], dout: &[f64], d: ConvDims, g: ConvGrads) {
    let (h, wd, kk) = (d.height, d.width, d.kernel);
    let plane = h * wd;
    let p = d.pad();
    let ConvGrads { mut dx, mut dw, mut db } = g;
    for n in 0..d.batch {
        for o in 0..d.out_ch {
            let gp = &dout[(n * d.out_ch + o) * plane..][..plane];
            if let Some(db) = db.as_deref_mut() {
                db[o] += gp.iter().sum::<f64>();
            }
            for c in 0..d.in_ch {
                let xoff = (n * d.in_ch + c) * plane;
                for ky in 0..kk {
                    let (ylo, yhi) = d.range(ky, h);
                    for kx in 0..kk {
                        let widx = ((o * d.in_ch + c) * kk + ky) * kk + kx;
                        let (xlo, xhi) = d.range(kx, wd);
                        let mut acc = 0.0;
                        for y in ylo..yhi {
                            let sy = y + ky - p;
                            let s0 = xoff + sy * wd + xlo + kx - p;
                            let s1 = xoff + sy * wd + xhi + kx - p;
                            let gr = &gp[y * wd + xlo..y * wd + xhi];
                            if dw.is_some() {
                                acc += dot(gr, &x[s0..s1]);
                            }
                            if let Some(dx) = dx.as_deref_mut() {
                                axpy(&mut dx[s0..s1], w[widx], gr);
                            }
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_matches_naive() {
        let d = ConvDims {
            batch: 2,
            in_ch: 2,
            out_ch: 3,
            height: 5,
            width: 4,
            kernel: 3,
        };
        let x: Vec<f64> = (0..2 * 2 * 20).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let w: Vec<f64> = (0..3 * 2 * 9).map(|i| ((i * 5) % 7) as f64 - 3.0).collect();
        let b = vec![0.5, -1.0, 2.0];
        let out = conv2d(&x, &w, &b, d);
        for n in 0..2 {
            for o in 0..3 {
                for y in 0..5i64 {
                    for xx in 0..4i64 {
                        let mut acc = b[o];
                        for c in 0..2 {
                            for ky in 0..3i64 {
                                for kx in 0..3i64 {
                                    let (sy, sx) = (y + ky - 1, xx + kx - 1);
                                    if (0..5).contains(&sy) && (0..4).contains(&sx) {
                                        acc += w[((o * 2 + c) * 3 + ky as usize) * 3 + kx as usize]
                                            * x[((n * 2 + c) * 5 + sy as usize) * 4 + sx as usize];
                                    }
                                }
                            }
                        }
                        let got = out[((n * 3 + o) * 5 + y as usize) * 4 + xx as usize];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
