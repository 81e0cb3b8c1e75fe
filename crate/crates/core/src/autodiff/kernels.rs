//! Forward and backward kernels for the layer primitives.
//!
//! Everything here works on flat row-major slices; shape checking happens in
//! the graph layer before these are called.

/// Geometry of a 1-D cross-correlation (no kernel flip).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub len: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub lout: usize,
}

impl ConvGeom {
    /// Columns of the unrolled input: one per (input channel, tap).
    fn width(&self) -> usize {
        self.cin * self.k
    }

    fn rows(&self) -> usize {
        self.batch * self.lout
    }
}

/// `y += a * x`.
#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (d, s) in y.iter_mut().zip(x) {
        *d += a * s;
    }
}

/// Unrolls `x` into a `[B * Lout, Cin * k]` matrix; padded taps are 0.
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let w = g.width();
    let mut col = vec![0.0; g.rows() * w];
    for b in 0..g.batch {
        for t in 0..g.lout {
            let row = &mut col[(b * g.lout + t) * w..][..w];
            for ci in 0..g.cin {
                let xin = &x[(b * g.cin + ci) * g.len..][..g.len];
                for kk in 0..g.k {
                    let pos = t * g.stride + kk;
                    if pos >= g.pad && pos - g.pad < g.len {
                        row[ci * g.k + kk] = xin[pos - g.pad];
                    }
                }
            }
        }
    }
    col
}

/// `[R, C]` to `[C, R]`.
fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

pub(crate) fn conv1d_forward(x: &[f64], w: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
    let width = g.width();
    let col = im2col(x, g);
    let wt = transpose(w, g.cout, width);
    let mut out = vec![0.0; g.batch * g.cout * g.lout];
    let mut acc = vec![0.0; g.cout];
    for b in 0..g.batch {
        for t in 0..g.lout {
            acc.copy_from_slice(bias);
            let row = &col[(b * g.lout + t) * width..][..width];
            for (j, &a) in row.iter().enumerate() {
                if a != 0.0 {
                    axpy(&mut acc, a, &wt[j * g.cout..][..g.cout]);
                }
            }
            for (co, v) in acc.iter().enumerate() {
                out[(b * g.cout + co) * g.lout + t] = *v;
            }
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub x: Option<Vec<f64>>,
    pub w: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    g: &ConvGeom,
    need: [bool; 3],
) -> ConvGrads {
    let width = g.width();
    // [B * Lout, Cout]
    let mut gt = vec![0.0; g.rows() * g.cout];
    for b in 0..g.batch {
        for co in 0..g.cout {
            let src = &gout[(b * g.cout + co) * g.lout..][..g.lout];
            for (t, v) in src.iter().enumerate() {
                gt[(b * g.lout + t) * g.cout + co] = *v;
            }
        }
    }
    let gb = need[2].then(|| {
        let mut gb = vec![0.0; g.cout];
        for r in 0..g.rows() {
            axpy(&mut gb, 1.0, &gt[r * g.cout..][..g.cout]);
        }
        gb
    });
    let gw = need[1].then(|| {
        let col = im2col(x, g);
        let mut gwt = vec![0.0; width * g.cout];
        for r in 0..g.rows() {
            let grow = &gt[r * g.cout..][..g.cout];
            for (j, &a) in col[r * width..][..width].iter().enumerate() {
                if a != 0.0 {
                    axpy(&mut gwt[j * g.cout..][..g.cout], a, grow);
                }
            }
        }
        transpose(&gwt, width, g.cout)
    });
    let gx = need[0].then(|| {
        let mut gx = vec![0.0; x.len()];
        let mut gcol = vec![0.0; width];
        for b in 0..g.batch {
            for t in 0..g.lout {
                gcol.fill(0.0);
                for (co, &a) in gt[(b * g.lout + t) * g.cout..][..g.cout].iter().enumerate() {
                    if a != 0.0 {
                        axpy(&mut gcol, a, &w[co * width..][..width]);
                    }
                }
                for ci in 0..g.cin {
                    let dst = &mut gx[(b * g.cin + ci) * g.len..][..g.len];
                    for kk in 0..g.k {
                        let pos = t * g.stride + kk;
                        if pos >= g.pad && pos - g.pad < g.len {
                            dst[pos - g.pad] += gcol[ci * g.k + kk];
                        }
                    }
                }
            }
        }
        gx
    });
    ConvGrads { x: gx, w: gw, bias: gb }
}

/// Non-overlapping max pooling over the last axis; trailing samples that do
/// not fill a window are dropped. Returns the output and, per output
/// element, the flat input index that produced it (first maximum wins).
pub(crate) fn max_pool_forward(x: &[f64], rows: usize, len: usize, width: usize) -> (Vec<f64>, Vec<usize>) {
    let lout = len / width;
    let mut out = Vec::with_capacity(rows * lout);
    let mut arg = Vec::with_capacity(rows * lout);
    for r in 0..rows {
        let base = r * len;
        for t in 0..lout {
            let start = base + t * width;
            let mut best = start;
            for i in start + 1..start + width {
                if x[i] > x[best] {
                    best = i;
                }
            }
            out.push(x[best]);
            arg.push(best);
        }
    }
    (out, arg)
}

/// Per-channel statistics of a `B x C x L` block: (mean, biased variance).
pub(crate) fn channel_moments(x: &[f64], batch: usize, channels: usize, len: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (batch * len) as f64;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for c in 0..channels {
        let mut s = 0.0;
        for b in 0..batch {
            s += x[(b * channels + c) * len..][..len].iter().sum::<f64>();
        }
        let m = s / n;
        let mut ss = 0.0;
        for b in 0..batch {
            ss += x[(b * channels + c) * len..][..len]
                .iter()
                .map(|v| (v - m) * (v - m))
                .sum::<f64>();
        }
        mean[c] = m;
        var[c] = ss / n;
    }
    (mean, var)
}

/// Saved state for the batch-norm backward pass.
#[derive(Clone, Debug)]
pub(crate) struct BnSaved {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub batch: usize,
    pub channels: usize,
    pub len: usize,
    /// Statistics came from the current batch (and so depend on the input).
    pub batch_stats: bool,
}

pub(crate) fn batch_norm_forward(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
    (batch, channels, len): (usize, usize, usize),
    batch_stats: bool,
) -> (Vec<f64>, BnSaved) {
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * len;
            for i in off..off + len {
                let h = (x[i] - mean[c]) * inv_std[c];
                xhat[i] = h;
                out[i] = gamma[c] * h + beta[c];
            }
        }
    }
    (
        out,
        BnSaved {
            xhat,
            inv_std,
            batch,
            channels,
            len,
            batch_stats,
        },
    )
}

pub(crate) fn batch_norm_backward(
    gout: &[f64],
    gamma: &[f64],
    s: &BnSaved,
    need: [bool; 3],
) -> [Option<Vec<f64>>; 3] {
    let (batch, channels, len) = (s.batch, s.channels, s.len);
    let n = (batch * len) as f64;
    let mut sum_dy = vec![0.0; channels];
    let mut sum_dy_xhat = vec![0.0; channels];
    for b in 0..batch {
        for c in 0..channels {
            let off = (b * channels + c) * len;
            for i in off..off + len {
                sum_dy[c] += gout[i];
                sum_dy_xhat[c] += gout[i] * s.xhat[i];
            }
        }
    }
    let gx = need[0].then(|| {
        let mut gx = vec![0.0; gout.len()];
        for b in 0..batch {
            for c in 0..channels {
                let off = (b * channels + c) * len;
                let k = gamma[c] * s.inv_std[c];
                for i in off..off + len {
                    gx[i] = if s.batch_stats {
                        k * (gout[i] - sum_dy[c] / n - s.xhat[i] * sum_dy_xhat[c] / n)
                    } else {
                        k * gout[i]
                    };
                }
            }
        }
        gx
    });
    [gx, need[1].then_some(sum_dy_xhat), need[2].then_some(sum_dy)]
}
