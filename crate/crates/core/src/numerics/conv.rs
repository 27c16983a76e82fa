//! 2-D convolution via im2col.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }
}

/// `[C·k·k × H'·W']` column matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = g.out_hw();
    let n = oh * ow;
    let mut cols = vec![0.0; g.patch() * n];
    for c in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let r = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[r * n..(r + 1) * n];
                for oi in 0..oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let src = &x[c * g.h * g.w + ii as usize * g.w..];
                    for oj in 0..ow {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            dst[oi * ow + oj] = src[jj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = g.out_hw();
    let n = oh * ow;
    let mut x = vec![0.0; g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let r = (c * g.k + ki) * g.k + kj;
                let src = &cols[r * n..(r + 1) * n];
                for oi in 0..oh {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let base = c * g.h * g.w + ii as usize * g.w;
                    for oj in 0..ow {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            x[base + jj as usize] += src[oi * ow + oj];
                        }
                    }
                }
            }
        }
    }
    x
}
