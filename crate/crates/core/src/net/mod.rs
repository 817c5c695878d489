//! The skip-connection enhancer network.
//!
//! Encoder: `levels` strided 3×3 convs (`in_channels → w → … → w`), each
//! halving the resolution. Decoder: per level a stride-2 transposed conv
//! back up, concatenation with the matching encoder feature (the raw input
//! at the top level), and a 1×1 fusion conv back to `w` channels. A final
//! 1×1 conv maps to one channel, optionally followed by a sigmoid. All hidden
//! layers use leaky ReLU.

pub mod gradcheck;
pub mod layers;
pub mod serialize;
pub mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use layers::Tensor;
use layers::*;

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("corrupt weight blob: {0}")]
    CorruptWeights(String),
}

/// What the network output is trained to represent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetMode {
    /// Residual normalized by the error bound: `(R + abs) / (2·abs)`.
    Residual,
    /// Min-max normalized original values.
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub in_channels: usize,
    pub base_width: usize,
    pub levels: usize,
    pub kernel: usize,
    pub skip_connections: bool,
    pub final_sigmoid: bool,
    pub target_mode: TargetMode,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            in_channels: 1,
            base_width: 4,
            levels: 4,
            kernel: 3,
            skip_connections: true,
            final_sigmoid: true,
            target_mode: TargetMode::Residual,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.levels == 0 {
            return Err(NetError::Config("levels must be >= 1".into()));
        }
        if self.in_channels == 0 || self.base_width == 0 {
            return Err(NetError::Config("in_channels and base_width must be >= 1".into()));
        }
        if self.kernel != 3 {
            return Err(NetError::Config(format!("only 3x3 kernels are supported, got {}", self.kernel)));
        }
        Ok(())
    }

    /// Spatial dims must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.levels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// 3×3 stride-2 conv.
    Down,
    /// 3×3 stride-2 transposed conv.
    Up,
    /// 1×1 conv.
    Point,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub kind: LayerKind,
    pub cin: usize,
    pub cout: usize,
    /// Offset of the weights in the flat vector; biases follow them.
    pub offset: usize,
}

impl LayerShape {
    pub fn weight_len(&self) -> usize {
        match self.kind {
            LayerKind::Down | LayerKind::Up => self.cin * self.cout * 9,
            LayerKind::Point => self.cin * self.cout,
        }
    }

    pub fn len(&self) -> usize {
        self.weight_len() + self.cout
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn fan_in(&self) -> usize {
        match self.kind {
            LayerKind::Down | LayerKind::Up => self.cin * 9,
            LayerKind::Point => self.cin,
        }
    }

    fn weight<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.offset..self.offset + self.weight_len()]
    }

    fn bias<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.offset + self.weight_len()..self.offset + self.len()]
    }

    fn grads<'a>(&self, grad: &'a mut [f64]) -> (&'a mut [f64], &'a mut [f64]) {
        grad[self.offset..self.offset + self.len()].split_at_mut(self.weight_len())
    }
}

/// Layer order in the flat vector: encoders top-down, decoders bottom-up
/// (`up[0]` is the deepest), fusions in the same order as decoders, output.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub down: Vec<LayerShape>,
    pub up: Vec<LayerShape>,
    pub fuse: Vec<LayerShape>,
    pub out: LayerShape,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &NetConfig) -> Result<Self, NetError> {
        cfg.validate()?;
        let w = cfg.base_width;
        let mut offset = 0;
        let mut push = |kind, cin, cout| {
            let l = LayerShape { kind, cin, cout, offset };
            offset += l.len();
            l
        };
        let down: Vec<_> = (0..cfg.levels)
            .map(|l| push(LayerKind::Down, if l == 0 { cfg.in_channels } else { w }, w))
            .collect();
        let up: Vec<_> = (0..cfg.levels).map(|_| push(LayerKind::Up, w, w)).collect();
        let fuse: Vec<_> = (0..cfg.levels)
            .rev()
            .map(|level| {
                // level 0 concatenates the raw input, deeper ones an encoder map
                let skip = if !cfg.skip_connections {
                    0
                } else if level == 0 {
                    cfg.in_channels
                } else {
                    w
                };
                push(LayerKind::Point, w + skip, w)
            })
            .collect();
        let out = push(LayerKind::Point, w, 1);
        Ok(Layout { down, up, fuse, out, total: offset })
    }

    pub fn layers(&self) -> impl Iterator<Item = &LayerShape> {
        self.down.iter().chain(&self.up).chain(&self.fuse).chain(std::iter::once(&self.out))
    }
}

/// Exact number of trainable parameters.
pub fn param_count(cfg: &NetConfig) -> Result<usize, NetError> {
    Ok(Layout::new(cfg)?.total)
}

/// Flat parameter vector plus the configuration that gives it meaning.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub config: NetConfig,
    pub params: Vec<f64>,
    layout: Layout,
}

impl Weights {
    pub fn from_params(config: NetConfig, params: Vec<f64>) -> Result<Self, NetError> {
        let layout = Layout::new(&config)?;
        if params.len() != layout.total {
            return Err(NetError::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Weights { config, params, layout })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zeros(config: NetConfig) -> Result<Self, NetError> {
        let n = param_count(&config)?;
        Self::from_params(config, vec![0.0; n])
    }
}

/// Gain of the uniform initializer (He initialization for rectifiers).
pub const INIT_GAIN: f64 = 2.449_489_742_783_178;

/// Inputs arrive in `[0, 1]` and are shifted by this before the first layer
/// and the top-level skip, so leaky-ReLU units start on both sides of zero.
pub const INPUT_CENTER: f64 = 0.5;

/// Uniform `±INIT_GAIN/√fan_in` weights, zero biases, deterministic in
/// `config.seed`.
pub fn init_model(config: &NetConfig) -> Result<Weights, NetError> {
    let layout = Layout::new(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = vec![0.0; layout.total];
    for l in layout.layers() {
        let scale = INIT_GAIN / (l.fan_in() as f64).sqrt();
        for p in &mut params[l.offset..l.offset + l.weight_len()] {
            *p = rng.random_range(-scale..scale);
        }
    }
    Weights::from_params(config.clone(), params)
}

/// Activations kept for the backward pass.
struct Cache {
    input: Tensor,
    enc: Vec<Tensor>,
    /// Per decoder step: upsampled (activated), fusion input, fusion output.
    dec: Vec<(Tensor, Tensor, Tensor)>,
    output: Tensor,
}

fn check_input(weights: &Weights, input: &Tensor) -> Result<(), NetError> {
    let cfg = &weights.config;
    if input.c != cfg.in_channels {
        return Err(NetError::ShapeMismatch(format!(
            "network expects {} input channels, got {}",
            cfg.in_channels, input.c
        )));
    }
    let m = cfg.size_multiple();
    if input.h == 0 || input.w == 0 || !input.h.is_multiple_of(m) || !input.w.is_multiple_of(m) {
        return Err(NetError::ShapeMismatch(format!(
            "spatial dims {}x{} must be positive multiples of {m}",
            input.h, input.w
        )));
    }
    Ok(())
}

fn forward_cached(weights: &Weights, input: &Tensor) -> Cache {
    let mut centered = input.clone();
    centered.data.iter_mut().for_each(|v| *v -= INPUT_CENTER);
    let input = &centered;
    let p = &weights.params;
    let lay = &weights.layout;
    let cfg = &weights.config;
    let mut enc: Vec<Tensor> = Vec::with_capacity(cfg.levels);
    for l in &lay.down {
        let src = enc.last().unwrap_or(input);
        let mut t = conv_s2(src, l.weight(p), l.bias(p), l.cout);
        leaky_inplace(&mut t);
        enc.push(t);
    }
    let mut dec: Vec<(Tensor, Tensor, Tensor)> = Vec::with_capacity(cfg.levels);
    for step in 0..cfg.levels {
        // step 0 starts at the deepest level
        let level = cfg.levels - 1 - step;
        let src = if step == 0 { &enc[cfg.levels - 1] } else { &dec[step - 1].2 };
        let up_l = &lay.up[step];
        let mut up = tconv_s2(src, up_l.weight(p), up_l.bias(p), up_l.cout);
        leaky_inplace(&mut up);
        let fin = if cfg.skip_connections {
            let skip = if level == 0 { input } else { &enc[level - 1] };
            up.concat(skip)
        } else {
            up.clone()
        };
        let f = &lay.fuse[step];
        let mut fused = conv1x1(&fin, f.weight(p), f.bias(p), f.cout);
        leaky_inplace(&mut fused);
        dec.push((up, fin, fused));
    }
    let last = &dec.last().unwrap().2;
    let mut output = conv1x1(last, lay.out.weight(p), lay.out.bias(p), 1);
    if cfg.final_sigmoid {
        output.data.iter_mut().for_each(|v| *v = sigmoid(*v));
    }
    Cache { input: input.clone(), enc, dec, output }
}

/// Runs the network on one `C×H×W` input, returning a `1×H×W` map.
pub fn forward(weights: &Weights, input: &Tensor) -> Result<Tensor, NetError> {
    check_input(weights, input)?;
    Ok(forward_cached(weights, input).output)
}

/// Backpropagates `dout` (gradient w.r.t. the network output). Parameter
/// gradients are accumulated into `grad`; the input gradient is returned
/// when requested.
fn backward(weights: &Weights, cache: &Cache, dout: &[f64], grad: &mut [f64], want_input: bool) -> Option<Vec<f64>> {
    let p = &weights.params;
    let lay = &weights.layout;
    let cfg = &weights.config;
    let levels = cfg.levels;

    let mut g_out = dout.to_vec();
    if cfg.final_sigmoid {
        sigmoid_backward(&cache.output, &mut g_out);
    }
    let mut g_input = want_input.then(|| vec![0.0; cache.input.data.len()]);
    let mut g_enc: Vec<Vec<f64>> = cache.enc.iter().map(|t| vec![0.0; t.data.len()]).collect();

    // gradient w.r.t. the last fused map
    let last = &cache.dec[levels - 1].2;
    let mut g_fused = vec![0.0; last.data.len()];
    {
        let (dw, db) = lay.out.grads(grad);
        conv1x1_backward(last, lay.out.weight(p), &g_out, 1, dw, db, Some(&mut g_fused));
    }

    for step in (0..levels).rev() {
        let level = levels - 1 - step;
        let (up, fin, fused) = &cache.dec[step];
        leaky_backward(fused, &mut g_fused);
        let f = &lay.fuse[step];
        let mut g_fin = vec![0.0; fin.data.len()];
        {
            let (dw, db) = f.grads(grad);
            conv1x1_backward(fin, f.weight(p), &g_fused, f.cout, dw, db, Some(&mut g_fin));
        }
        let up_len = up.data.len();
        if cfg.skip_connections {
            let g_skip = &g_fin[up_len..];
            let target = if level == 0 { g_input.as_deref_mut() } else { Some(&mut g_enc[level - 1][..]) };
            if let Some(t) = target {
                t.iter_mut().zip(g_skip).for_each(|(a, b)| *a += b);
            }
        }
        let mut g_up = g_fin;
        g_up.truncate(up_len);
        leaky_backward(up, &mut g_up);
        let src = if step == 0 { &cache.enc[levels - 1] } else { &cache.dec[step - 1].2 };
        let mut g_src = vec![0.0; src.data.len()];
        let u = &lay.up[step];
        {
            let (dw, db) = u.grads(grad);
            tconv_s2_backward(src, u.weight(p), &g_up, u.cout, dw, db, Some(&mut g_src));
        }
        if step == 0 {
            g_enc[levels - 1].iter_mut().zip(&g_src).for_each(|(a, b)| *a += b);
        } else {
            g_fused = g_src;
        }
    }

    for l in (0..levels).rev() {
        let mut g = std::mem::take(&mut g_enc[l]);
        leaky_backward(&cache.enc[l], &mut g);
        let src = if l == 0 { &cache.input } else { &cache.enc[l - 1] };
        let d = &lay.down[l];
        let (dw, db) = d.grads(grad);
        let dinput = if l == 0 { g_input.as_deref_mut() } else { Some(&mut g_enc[l - 1][..]) };
        conv_s2_backward(src, d.weight(p), &g, d.cout, dw, db, dinput);
    }
    g_input
}

/// Squared-error sum, gradient (scaled by `scale`) and network output for
/// one sample.
pub(crate) fn sample_loss_grad(weights: &Weights, input: &Tensor, target: &[f64], scale: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let cache = forward_cached(weights, input);
    let mut sse = 0.0;
    let dout: Vec<f64> = cache
        .output
        .data
        .iter()
        .zip(target)
        .map(|(&o, &t)| {
            let d = o - t;
            sse += d * d;
            2.0 * d * scale
        })
        .collect();
    let mut grad = vec![0.0; weights.len()];
    backward(weights, &cache, &dout, &mut grad, false);
    (sse, grad, cache.output.data)
}

pub(crate) fn check_batch(weights: &Weights, inputs: &[Tensor], targets: &[Vec<f64>]) -> Result<(), NetError> {
    if inputs.is_empty() || inputs.len() != targets.len() {
        return Err(NetError::ShapeMismatch(format!(
            "{} inputs vs {} targets",
            inputs.len(),
            targets.len()
        )));
    }
    for (x, t) in inputs.iter().zip(targets) {
        check_input(weights, x)?;
        if t.len() != x.plane() {
            return Err(NetError::ShapeMismatch("target plane size differs from input".into()));
        }
    }
    Ok(())
}

/// Mean squared error over every output pixel of the batch, with its exact
/// gradient. Per-sample work may run in parallel; the reduction order is
/// fixed, so the result does not depend on the thread count.
pub fn loss_and_grad(weights: &Weights, inputs: &[Tensor], targets: &[Vec<f64>]) -> Result<(f64, Vec<f64>), NetError> {
    use rayon::prelude::*;
    check_batch(weights, inputs, targets)?;
    let total: usize = targets.iter().map(Vec::len).sum();
    let scale = 1.0 / total as f64;
    let parts: Vec<(f64, Vec<f64>, Vec<f64>)> = inputs
        .par_iter()
        .zip(targets.par_iter())
        .map(|(x, t)| sample_loss_grad(weights, x, t, scale))
        .collect();
    let mut grad = vec![0.0; weights.len()];
    let mut sse = 0.0;
    for (s, g, _) in parts {
        sse += s;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    Ok((sse * scale, grad))
}

/// Gradient of a single output pixel with respect to the input tensor.
pub fn output_input_gradient(weights: &Weights, input: &Tensor, y: usize, x: usize) -> Result<(f64, Vec<f64>), NetError> {
    check_input(weights, input)?;
    if y >= input.h || x >= input.w {
        return Err(NetError::ShapeMismatch(format!("target ({y},{x}) outside {}x{}", input.h, input.w)));
    }
    let cache = forward_cached(weights, input);
    let mut dout = vec![0.0; cache.output.data.len()];
    dout[y * input.w + x] = 1.0;
    let mut scratch = vec![0.0; weights.len()];
    let g = backward(weights, &cache, &dout, &mut scratch, true).expect("input gradient requested");
    Ok((cache.output.data[y * input.w + x], g))
}

/// Maps a sigmoid output in (0, 1) to a residual in (−abs, abs).
#[inline]
pub fn denorm_residual(s: f64, abs: f64) -> f64 {
    (2.0 * s - 1.0) * abs
}

/// Inverse of [`denorm_residual`], clipped to [0, 1].
#[inline]
pub fn residual_target(r: f64, abs: f64) -> f64 {
    ((r + abs) / (2.0 * abs)).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_param_count_in_envelope() {
        let n = param_count(&NetConfig::default()).unwrap();
        // E1 40 + E2..4 3·148 + D 4·148 + F 3·36 + F0 24 + out 5
        assert_eq!(n, 40 + 444 + 592 + 108 + 24 + 5);
        assert!((1000..=4000).contains(&n));
    }

    #[test]
    fn extra_input_channels_cost_first_conv_and_top_fusion() {
        let one = param_count(&NetConfig::default()).unwrap();
        let three = param_count(&NetConfig { in_channels: 3, ..Default::default() }).unwrap();
        let w = 4;
        assert_eq!(three - one, 2 * 9 * w + 2 * w);
    }

    #[test]
    fn zero_levels_rejected() {
        assert!(matches!(param_count(&NetConfig { levels: 0, ..Default::default() }), Err(NetError::Config(_))));
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let cfg = NetConfig { seed: 17, ..Default::default() };
        let a = init_model(&cfg).unwrap();
        assert_eq!(a, init_model(&cfg).unwrap());
        for l in a.layout().layers() {
            assert!(l.bias(&a.params).iter().all(|&b| b == 0.0));
            let bound = INIT_GAIN / (l.fan_in() as f64).sqrt();
            assert!(l.weight(&a.params).iter().all(|w| w.abs() <= bound));
        }
        assert_ne!(a, init_model(&NetConfig { seed: 18, ..Default::default() }).unwrap());
    }

    #[test]
    fn zero_weights_give_one_half() {
        let w = Weights::zeros(NetConfig { in_channels: 2, ..Default::default() }).unwrap();
        let x = Tensor::from_vec(2, 32, 32, (0..2048).map(|i| (i % 13) as f64 / 13.0).collect());
        let y = forward(&w, &x).unwrap();
        assert_eq!((y.c, y.h, y.w), (1, 32, 32));
        assert!(y.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn shape_contract_and_errors() {
        let w = init_model(&NetConfig { in_channels: 2, ..Default::default() }).unwrap();
        let y = forward(&w, &Tensor::zeros(2, 64, 64)).unwrap();
        assert_eq!((y.c, y.h, y.w), (1, 64, 64));
        assert!(y.data.iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(matches!(forward(&w, &Tensor::zeros(1, 64, 64)), Err(NetError::ShapeMismatch(_))));
        assert!(matches!(forward(&w, &Tensor::zeros(2, 40, 64)), Err(NetError::ShapeMismatch(_))));
    }

    #[test]
    fn skip_off_drops_concatenations() {
        let on = NetConfig::default();
        let off = NetConfig { skip_connections: false, ..Default::default() };
        let lay = Layout::new(&off).unwrap();
        assert!(lay.fuse.iter().all(|f| f.cin == on.base_width));
        assert!(param_count(&off).unwrap() < param_count(&on).unwrap());
        let w = init_model(&off).unwrap();
        assert_eq!(forward(&w, &Tensor::zeros(1, 16, 16)).unwrap().data.len(), 256);
    }

    #[test]
    fn stationary_point_has_zero_loss_and_gradient() {
        let w = init_model(&NetConfig { seed: 5, ..Default::default() }).unwrap();
        let x = Tensor::from_vec(1, 16, 16, (0..256).map(|i| (i % 7) as f64 / 7.0).collect());
        let target = forward(&w, &x).unwrap().data;
        let (loss, grad) = loss_and_grad(&w, &[x], &[target]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn duplicated_batch_keeps_mean_loss() {
        let w = init_model(&NetConfig { seed: 6, ..Default::default() }).unwrap();
        let x = Tensor::from_vec(1, 16, 16, (0..256).map(|i| (i % 5) as f64 / 5.0).collect());
        let t: Vec<f64> = (0..256).map(|i| (i % 3) as f64 / 3.0).collect();
        let (l1, g1) = loss_and_grad(&w, std::slice::from_ref(&x), std::slice::from_ref(&t)).unwrap();
        let (l2, g2) = loss_and_grad(&w, &[x.clone(), x], &[t.clone(), t]).unwrap();
        assert!((l1 - l2).abs() <= 1e-15 * l1.abs());
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() <= 1e-14 * a.abs().max(1e-12));
        }
    }

    #[test]
    fn residual_denormalization() {
        assert_eq!(denorm_residual(0.5, 3.0), 0.0);
        assert_eq!(denorm_residual(0.25, 0.5), -0.25);
        assert!((denorm_residual(1.0 - 1e-12, 2.0) - 2.0).abs() < 1e-11);
        assert_eq!(residual_target(0.0, 1.0), 0.5);
        assert_eq!(residual_target(5.0, 1.0), 1.0);
    }
}
