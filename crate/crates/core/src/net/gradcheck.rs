//! Central finite-difference checks of the analytic gradients.
//!
//! Every check reduces the layer or network to a scalar and compares each
//! analytic partial derivative with the fourth-order central difference
//! `(8(f(p + h) − f(p − h)) − (f(p + 2h) − f(p − 2h))) / 12h`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::*;
use super::{init_model, loss_and_grad, output_input_gradient, NetConfig, NetError, Weights};

/// Step of the central differences.
pub const STEP: f64 = 1e-5;
/// Relative agreement of the `h` and `h/2` estimates that marks a smooth
/// neighbourhood.
const AGREE: f64 = 1e-5;
const SHRINKS: usize = 3;
/// Absolute slack of the agreement test in units of the quotient's
/// roundoff `ε·|f(x)|/h`.
const ROUNDOFF_UNITS: f64 = 64.0;
/// Partials smaller than this fraction of the largest one in a check are
/// compared absolutely, since the difference quotient carries roundoff of
/// about `ε·|f| / h` regardless of the partial's size.
pub const FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn stencil(f: &mut impl FnMut(f64) -> Result<f64, NetError>, x: f64, h: f64) -> Result<f64, NetError> {
    let d1 = f(x + h)? - f(x - h)?;
    let d2 = f(x + 2.0 * h)? - f(x - 2.0 * h)?;
    Ok((8.0 * d1 - d2) / (12.0 * h))
}

/// Difference quotient at `STEP`, shrunk tenfold while the estimates at `h`
/// and `h/2` disagree. They disagree when the stencil straddles a leaky-ReLU
/// kink somewhere downstream, where the quotient mixes the two slopes.
fn central_result(mut f: impl FnMut(f64) -> Result<f64, NetError>, x: f64) -> Result<f64, NetError> {
    let fx = f(x)?.abs();
    let mut h = STEP;
    let mut est = stencil(&mut f, x, h)?;
    for _ in 0..SHRINKS {
        let half = stencil(&mut f, x, h / 2.0)?;
        let roundoff = ROUNDOFF_UNITS * f64::EPSILON * fx / (h / 2.0);
        if (est - half).abs() <= AGREE * est.abs().max(half.abs()) + roundoff {
            break;
        }
        h /= 10.0;
        est = stencil(&mut f, x, h)?;
    }
    Ok(est)
}

fn central(f: impl Fn(f64) -> f64, x: f64) -> f64 {
    central_result(|v| Ok(f(v)), x).expect("infallible")
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

#[derive(Default)]
struct Acc {
    pairs: Vec<(f64, f64)>,
}

impl Acc {
    fn new() -> Self {
        Acc::default()
    }

    fn push(&mut self, analytic: f64, numeric: f64) {
        self.pairs.push((analytic, numeric));
    }

    fn finish(self, name: &str) -> GradCheck {
        let scale = self.pairs.iter().fold(0.0f64, |m, (a, _)| m.max(a.abs()));
        let floor = (FLOOR * scale).max(f64::MIN_POSITIVE);
        let worst = self.pairs.iter().fold(0.0f64, |m, &(a, n)| m.max(rel_error(a, n, floor)));
        GradCheck { name: name.to_string(), checked: self.pairs.len(), max_rel_error: worst }
    }
}

type Forward = fn(&Tensor, &[f64], &[f64], usize) -> Tensor;
type Backward = fn(&Tensor, &[f64], &[f64], usize, &mut [f64], &mut [f64], Option<&mut [f64]>);

/// Checks weights, biases and inputs of one parametric layer under the
/// projection `L = Σ r·layer(x)`.
fn check_parametric(name: &str, fwd: Forward, bwd: Backward, weight_len: usize, input: Tensor, cout: usize, seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weight = random_vec(&mut rng, weight_len, 0.5);
    let bias = random_vec(&mut rng, cout, 0.5);
    let out_len = fwd(&input, &weight, &bias, cout).data.len();
    let r = random_vec(&mut rng, out_len, 1.0);
    let loss = |x: &Tensor, w: &[f64], b: &[f64]| -> f64 {
        fwd(x, w, b, cout).data.iter().zip(&r).map(|(a, b)| a * b).sum()
    };

    let mut dw = vec![0.0; weight.len()];
    let mut db = vec![0.0; bias.len()];
    let mut dx = vec![0.0; input.data.len()];
    bwd(&input, &weight, &r, cout, &mut dw, &mut db, Some(&mut dx));

    let mut acc = Acc::new();
    for i in 0..weight.len() {
        let n = central(
            |v| {
                let mut w = weight.clone();
                w[i] = v;
                loss(&input, &w, &bias)
            },
            weight[i],
        );
        acc.push(dw[i], n);
    }
    for i in 0..bias.len() {
        let n = central(
            |v| {
                let mut b = bias.clone();
                b[i] = v;
                loss(&input, &weight, &b)
            },
            bias[i],
        );
        acc.push(db[i], n);
    }
    for i in 0..input.data.len() {
        let n = central(
            |v| {
                let mut x = input.clone();
                x.data[i] = v;
                loss(&x, &weight, &bias)
            },
            input.data[i],
        );
        acc.push(dx[i], n);
    }
    acc.finish(name)
}

/// Checks an elementwise activation whose backward reads its own output.
fn check_activation(name: &str, f: fn(f64) -> f64, bwd: fn(&Tensor, &mut [f64]), scale: f64, seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // keep clear of the kink at zero so the difference quotient is smooth
    let x: Vec<f64> = random_vec(&mut rng, 64, scale)
        .into_iter()
        .map(|v| if v.abs() < 10.0 * STEP { v + 0.1 } else { v })
        .collect();
    let r = random_vec(&mut rng, x.len(), 1.0);
    let out = Tensor::from_vec(1, 8, 8, x.iter().map(|&v| f(v)).collect());
    let mut g = r.clone();
    bwd(&out, &mut g);
    let mut acc = Acc::new();
    for i in 0..x.len() {
        acc.push(g[i], r[i] * central(f, x[i]));
    }
    acc.finish(name)
}

/// One check per layer type of the enhancer.
pub fn check_layers(seed: u64) -> Vec<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut input = |c, h, w| Tensor::from_vec(c, h, w, random_vec(&mut rng, c * h * w, 1.0));
    vec![
        check_parametric("conv3x3_stride2", conv_s2, conv_s2_backward, 3 * 2 * 9, input(2, 7, 6), 3, seed + 1),
        check_parametric("tconv3x3_stride2", tconv_s2, tconv_s2_backward, 2 * 3 * 9, input(2, 4, 5), 3, seed + 2),
        check_parametric("conv1x1", conv1x1, conv1x1_backward, 3 * 2, input(2, 5, 5), 3, seed + 3),
        check_activation("leaky_relu", leaky, leaky_backward, 2.0, seed + 4),
        check_activation("sigmoid", sigmoid, sigmoid_backward, 6.0, seed + 5),
    ]
}

/// Checks every parameter of `config`'s network under the MSE loss, and
/// the input gradient of one output pixel, on a random `h×w` input.
pub fn check_network(config: &NetConfig, h: usize, w: usize, seed: u64) -> Result<Vec<GradCheck>, NetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = init_model(&NetConfig { seed, ..config.clone() })?;
    // random biases too, so every term of the bias gradients is exercised
    let params: Vec<f64> = weights.params.iter().map(|&p| if p == 0.0 { rng.random_range(-0.1..0.1) } else { p }).collect();
    let weights = Weights::from_params(weights.config.clone(), params)?;
    let c = config.in_channels;
    let input = Tensor::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(0.0..1.0)).collect());
    let target: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect();

    let (_, grad) = loss_and_grad(&weights, std::slice::from_ref(&input), std::slice::from_ref(&target))?;
    let loss_at = |p: &[f64]| -> Result<f64, NetError> {
        let wt = Weights::from_params(weights.config.clone(), p.to_vec())?;
        Ok(loss_and_grad(&wt, std::slice::from_ref(&input), std::slice::from_ref(&target))?.0)
    };
    let mut acc = Acc::new();
    for i in 0..weights.params.len() {
        let mut params = weights.params.clone();
        let n = central_result(
            |v| {
                params[i] = v;
                loss_at(&params)
            },
            weights.params[i],
        )?;
        acc.push(grad[i], n);
    }
    let by_params = acc.finish("network_parameters");

    let (y, x) = (h / 3, w / 2);
    let (_, gin) = output_input_gradient(&weights, &input, y, x)?;
    let pixel = |t: &Tensor| -> Result<f64, NetError> { Ok(super::forward(&weights, t)?.data[y * w + x]) };
    let mut acc = Acc::new();
    for i in 0..input.data.len() {
        let mut probe = input.clone();
        let n = central_result(
            |v| {
                probe.data[i] = v;
                pixel(&probe)
            },
            input.data[i],
        )?;
        acc.push(gin[i], n);
    }
    Ok(vec![by_params, acc.finish("network_input")])
}
