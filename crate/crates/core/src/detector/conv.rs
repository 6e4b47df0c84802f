//! Dense 2-D convolution over channel-major planes, forward and backward.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_in: usize,
    pub w_in: usize,
}

impl ConvShape {
    pub fn h_out(&self) -> usize {
        (self.h_in + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn w_out(&self) -> usize {
        (self.w_in + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.c_in * self.kernel * self.kernel
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.c_out
    }

    pub fn in_len(&self) -> usize {
        self.c_in * self.h_in * self.w_in
    }

    pub fn out_len(&self) -> usize {
        self.c_out * self.h_out() * self.w_out()
    }

    /// Output index range [lo, hi) whose input coordinate `o * stride + k - pad`
    /// falls inside [0, n_in).
    #[inline]
    fn valid(&self, k: usize, n_in: usize, n_out: usize) -> (usize, usize) {
        let lo = if self.pad > k {
            (self.pad - k).div_ceil(self.stride)
        } else {
            0
        };
        // o * stride + k - pad <= n_in - 1
        let hi = if n_in + self.pad > k {
            ((n_in - 1 + self.pad - k) / self.stride + 1).min(n_out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

/// `params` holds weights [c_out][c_in][k][k] followed by c_out biases.
pub fn forward(s: &ConvShape, params: &[f64], input: &[f64], out: &mut Vec<f64>) {
    debug_assert_eq!(params.len(), s.param_len());
    debug_assert_eq!(input.len(), s.in_len());
    let (ho, wo) = (s.h_out(), s.w_out());
    let (weights, bias) = params.split_at(s.weight_len());
    out.clear();
    out.resize(s.out_len(), 0.0);
    let kk = s.kernel * s.kernel;
    for co in 0..s.c_out {
        let plane = &mut out[co * ho * wo..(co + 1) * ho * wo];
        plane.fill(bias[co]);
        for ci in 0..s.c_in {
            let inp = &input[ci * s.h_in * s.w_in..(ci + 1) * s.h_in * s.w_in];
            let wbase = (co * s.c_in + ci) * kk;
            for ky in 0..s.kernel {
                let (oy0, oy1) = s.valid(ky, s.h_in, ho);
                for kx in 0..s.kernel {
                    let wv = weights[wbase + ky * s.kernel + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox0, ox1) = s.valid(kx, s.w_in, wo);
                    for oy in oy0..oy1 {
                        let iy = oy * s.stride + ky - s.pad;
                        let row = &inp[iy * s.w_in..(iy + 1) * s.w_in];
                        let orow = &mut plane[oy * wo..(oy + 1) * wo];
                        for ox in ox0..ox1 {
                            orow[ox] += wv * row[ox * s.stride + kx - s.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates parameter gradients into `d_params` (when given) and writes the
/// input gradient into `d_input` (when given).
pub fn backward(
    s: &ConvShape,
    params: &[f64],
    input: &[f64],
    d_out: &[f64],
    d_params: Option<&mut [f64]>,
    d_input: Option<&mut Vec<f64>>,
) {
    let (ho, wo) = (s.h_out(), s.w_out());
    let kk = s.kernel * s.kernel;
    let weights = &params[..s.weight_len()];

    if let Some(dp) = d_params {
        let (dw, db) = dp.split_at_mut(s.weight_len());
        for co in 0..s.c_out {
            let g = &d_out[co * ho * wo..(co + 1) * ho * wo];
            db[co] += g.iter().sum::<f64>();
            for ci in 0..s.c_in {
                let inp = &input[ci * s.h_in * s.w_in..(ci + 1) * s.h_in * s.w_in];
                let wbase = (co * s.c_in + ci) * kk;
                for ky in 0..s.kernel {
                    let (oy0, oy1) = s.valid(ky, s.h_in, ho);
                    for kx in 0..s.kernel {
                        let (ox0, ox1) = s.valid(kx, s.w_in, wo);
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * s.stride + ky - s.pad;
                            let row = &inp[iy * s.w_in..(iy + 1) * s.w_in];
                            let grow = &g[oy * wo..(oy + 1) * wo];
                            for ox in ox0..ox1 {
                                acc += grow[ox] * row[ox * s.stride + kx - s.pad];
                            }
                        }
                        dw[wbase + ky * s.kernel + kx] += acc;
                    }
                }
            }
        }
    }

    if let Some(di) = d_input {
        di.clear();
        di.resize(s.in_len(), 0.0);
        for co in 0..s.c_out {
            let g = &d_out[co * ho * wo..(co + 1) * ho * wo];
            for ci in 0..s.c_in {
                let dplane = &mut di[ci * s.h_in * s.w_in..(ci + 1) * s.h_in * s.w_in];
                let wbase = (co * s.c_in + ci) * kk;
                for ky in 0..s.kernel {
                    let (oy0, oy1) = s.valid(ky, s.h_in, ho);
                    for kx in 0..s.kernel {
                        let wv = weights[wbase + ky * s.kernel + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox0, ox1) = s.valid(kx, s.w_in, wo);
                        for oy in oy0..oy1 {
                            let iy = oy * s.stride + ky - s.pad;
                            let drow = &mut dplane[iy * s.w_in..(iy + 1) * s.w_in];
                            let grow = &g[oy * wo..(oy + 1) * wo];
                            for ox in ox0..ox1 {
                                drow[ox * s.stride + kx - s.pad] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
