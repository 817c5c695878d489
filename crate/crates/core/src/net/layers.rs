//! Dense CHW tensor primitives with hand-written backward passes.
//!
//! Weight layouts follow the usual framework conventions:
//! strided conv `[cout][cin][3][3]`, transposed conv `[cin][cout][3][3]`,
//! pointwise conv `[cout][cin]`.

/// Channel-major 3D tensor `c × h × w`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length");
        Tensor { c, h, w, data }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.plane()..(c + 1) * self.plane()]
    }

    /// Stacks `self` on top of `other` along the channel axis.
    pub fn concat(&self, other: &Tensor) -> Tensor {
        debug_assert_eq!((self.h, self.w), (other.h, other.w));
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Tensor { c: self.c + other.c, h: self.h, w: self.w, data }
    }
}

pub const LEAKY_SLOPE: f64 = 0.01;

#[inline]
pub fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

pub fn leaky_inplace(t: &mut Tensor) {
    t.data.iter_mut().for_each(|v| *v = leaky(*v));
}

/// Multiplies `grad` by the leaky-ReLU derivative, read from the activated
/// output (the sign is preserved by the activation).
pub fn leaky_backward(activated: &Tensor, grad: &mut [f64]) {
    for (g, &a) in grad.iter_mut().zip(&activated.data) {
        if a <= 0.0 {
            *g *= LEAKY_SLOPE;
        }
    }
}

/// Largest double strictly below one.
const ONE_MINUS: f64 = 1.0 - f64::EPSILON / 2.0;

/// Logistic function clamped to the open interval (0, 1).
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    let s = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, ONE_MINUS)
}

/// Multiplies `grad` by the sigmoid derivative `s·(1 − s)`, read from the
/// output.
pub fn sigmoid_backward(output: &Tensor, grad: &mut [f64]) {
    for (g, &s) in grad.iter_mut().zip(&output.data) {
        *g *= s * (1.0 - s);
    }
}

/// Output range of a stride-2 conv over `n` inputs with padding 1.
#[inline]
fn valid_range(k: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    // input index = 2*o + k - 1 must lie in 0..n_in
    let lo = if k == 0 { 1 } else { 0 };
    let hi = ((n_in + 1 - k) / 2 + usize::from((n_in + 1 - k) % 2 == 1)).min(n_out);
    (lo, hi.max(lo))
}

/// 3×3 convolution, stride 2, padding 1: `cin×h×w → cout×ceil(h/2)×ceil(w/2)`.
pub fn conv_s2(input: &Tensor, weight: &[f64], bias: &[f64], cout: usize) -> Tensor {
    let (cin, h, w) = (input.c, input.h, input.w);
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Tensor::zeros(cout, oh, ow);
    for o in 0..cout {
        let dst = &mut out.data[o * oh * ow..(o + 1) * oh * ow];
        dst.fill(bias[o]);
        for c in 0..cin {
            let src = input.channel(c);
            for ky in 0..3 {
                let (ylo, yhi) = valid_range(ky, h, oh);
                for kx in 0..3 {
                    let wv = weight[((o * cin + c) * 3 + ky) * 3 + kx];
                    let (xlo, xhi) = valid_range(kx, w, ow);
                    for y in ylo..yhi {
                        let srow = &src[(2 * y + ky - 1) * w..];
                        let drow = &mut dst[y * ow..(y + 1) * ow];
                        for x in xlo..xhi {
                            drow[x] += wv * srow[2 * x + kx - 1];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Backward of [`conv_s2`]. Accumulates into `dweight`/`dbias` and, when
/// given, into `dinput`.
pub fn conv_s2_backward(
    input: &Tensor,
    weight: &[f64],
    dout: &[f64],
    cout: usize,
    dweight: &mut [f64],
    dbias: &mut [f64],
    mut dinput: Option<&mut [f64]>,
) {
    let (cin, h, w) = (input.c, input.h, input.w);
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    for o in 0..cout {
        let g = &dout[o * oh * ow..(o + 1) * oh * ow];
        dbias[o] += g.iter().sum::<f64>();
        for c in 0..cin {
            let src = input.channel(c);
            for ky in 0..3 {
                let (ylo, yhi) = valid_range(ky, h, oh);
                for kx in 0..3 {
                    let widx = ((o * cin + c) * 3 + ky) * 3 + kx;
                    let wv = weight[widx];
                    let (xlo, xhi) = valid_range(kx, w, ow);
                    let mut acc = 0.0;
                    for y in ylo..yhi {
                        let row = (2 * y + ky - 1) * w;
                        let grow = &g[y * ow..(y + 1) * ow];
                        for x in xlo..xhi {
                            acc += grow[x] * src[row + 2 * x + kx - 1];
                        }
                        if let Some(din) = dinput.as_deref_mut() {
                            let drow = &mut din[c * h * w + row..];
                            for x in xlo..xhi {
                                drow[2 * x + kx - 1] += wv * grow[x];
                            }
                        }
                    }
                    dweight[widx] += acc;
                }
            }
        }
    }
}

/// 3×3 transposed convolution, stride 2, padding 1, output padding 1:
/// `cin×h×w → cout×2h×2w`.
pub fn tconv_s2(input: &Tensor, weight: &[f64], bias: &[f64], cout: usize) -> Tensor {
    let (cin, h, w) = (input.c, input.h, input.w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(cout, oh, ow);
    for o in 0..cout {
        out.data[o * oh * ow..(o + 1) * oh * ow].fill(bias[o]);
    }
    for c in 0..cin {
        let src = input.channel(c);
        for o in 0..cout {
            let dst = &mut out.data[o * oh * ow..(o + 1) * oh * ow];
            for ky in 0..3 {
                let ylo = usize::from(ky == 0);
                for kx in 0..3 {
                    let wv = weight[((c * cout + o) * 3 + ky) * 3 + kx];
                    let xlo = usize::from(kx == 0);
                    for y in ylo..h {
                        let drow = &mut dst[(2 * y + ky - 1) * ow..];
                        let srow = &src[y * w..(y + 1) * w];
                        for x in xlo..w {
                            drow[2 * x + kx - 1] += wv * srow[x];
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn tconv_s2_backward(
    input: &Tensor,
    weight: &[f64],
    dout: &[f64],
    cout: usize,
    dweight: &mut [f64],
    dbias: &mut [f64],
    mut dinput: Option<&mut [f64]>,
) {
    let (cin, h, w) = (input.c, input.h, input.w);
    let (oh, ow) = (2 * h, 2 * w);
    for o in 0..cout {
        dbias[o] += dout[o * oh * ow..(o + 1) * oh * ow].iter().sum::<f64>();
    }
    for c in 0..cin {
        let src = input.channel(c);
        for o in 0..cout {
            let g = &dout[o * oh * ow..(o + 1) * oh * ow];
            for ky in 0..3 {
                let ylo = usize::from(ky == 0);
                for kx in 0..3 {
                    let widx = ((c * cout + o) * 3 + ky) * 3 + kx;
                    let wv = weight[widx];
                    let xlo = usize::from(kx == 0);
                    let mut acc = 0.0;
                    for y in ylo..h {
                        let grow = &g[(2 * y + ky - 1) * ow..];
                        let srow = &src[y * w..(y + 1) * w];
                        for x in xlo..w {
                            acc += grow[2 * x + kx - 1] * srow[x];
                        }
                        if let Some(din) = dinput.as_deref_mut() {
                            let drow = &mut din[c * h * w + y * w..c * h * w + (y + 1) * w];
                            for x in xlo..w {
                                drow[x] += wv * grow[2 * x + kx - 1];
                            }
                        }
                    }
                    dweight[widx] += acc;
                }
            }
        }
    }
}

/// Pointwise (1×1) convolution.
pub fn conv1x1(input: &Tensor, weight: &[f64], bias: &[f64], cout: usize) -> Tensor {
    let (cin, p) = (input.c, input.plane());
    let mut out = Tensor::zeros(cout, input.h, input.w);
    for o in 0..cout {
        let dst = &mut out.data[o * p..(o + 1) * p];
        dst.fill(bias[o]);
        for c in 0..cin {
            let wv = weight[o * cin + c];
            for (d, s) in dst.iter_mut().zip(input.channel(c)) {
                *d += wv * s;
            }
        }
    }
    out
}

pub fn conv1x1_backward(
    input: &Tensor,
    weight: &[f64],
    dout: &[f64],
    cout: usize,
    dweight: &mut [f64],
    dbias: &mut [f64],
    mut dinput: Option<&mut [f64]>,
) {
    let (cin, p) = (input.c, input.plane());
    for o in 0..cout {
        let g = &dout[o * p..(o + 1) * p];
        dbias[o] += g.iter().sum::<f64>();
        for c in 0..cin {
            let s = input.channel(c);
            dweight[o * cin + c] += g.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
            if let Some(din) = dinput.as_deref_mut() {
                let wv = weight[o * cin + c];
                for (d, gv) in din[c * p..(c + 1) * p].iter_mut().zip(g) {
                    *d += wv * gv;
                }
            }
        }
    }
}
