//! Diagnostics for trained enhancers: integrated-gradients attribution of
//! one output pixel, and sample and gradient conflict matrices over a
//! training set.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::Plane;
use crate::net::{loss_and_grad, output_input_gradient, NetError, Tensor, Weights};

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Attribution of one output pixel to every input pixel, one plane per
/// input channel.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap {
    pub channels: Vec<Plane>,
    /// `(y, x)` of the attributed output pixel.
    pub target: (usize, usize),
    pub steps: usize,
    /// Output at the input.
    pub output: f64,
    /// Output at the baseline.
    pub baseline_output: f64,
}

impl AttributionMap {
    pub fn total(&self) -> f64 {
        self.channels.iter().flat_map(|p| &p.data).sum()
    }

    /// `|Σ attr − (f(x) − f(x0))|`.
    pub fn completeness_gap(&self) -> f64 {
        (self.total() - (self.output - self.baseline_output)).abs()
    }

    /// Sum of attributions per channel.
    pub fn channel_totals(&self) -> Vec<f64> {
        self.channels.iter().map(|p| p.data.iter().sum()).collect()
    }

    /// `channel,y,x,attribution` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("channel,y,x,attribution\n");
        for (c, p) in self.channels.iter().enumerate() {
            for y in 0..p.h {
                for x in 0..p.w {
                    out.push_str(&format!("{c},{y},{x},{:e}\n", p.at(y, x)));
                }
            }
        }
        out
    }
}

/// Integrated gradients of a scalar function given as `f(x) -> (value,
/// ∂value/∂x)`, using a left Riemann sum over `steps` points of the straight
/// path from `baseline` to `input`.
pub fn integrated_gradients_with<F>(
    f: F,
    input: &Tensor,
    baseline: &Tensor,
    steps: usize,
) -> Result<(Vec<f64>, f64, f64), AnalysisError>
where
    F: Fn(&Tensor) -> Result<(f64, Vec<f64>), AnalysisError> + Sync,
{
    if (input.c, input.h, input.w) != (baseline.c, baseline.h, baseline.w) {
        return Err(AnalysisError::ShapeMismatch(format!(
            "input {}x{}x{} vs baseline {}x{}x{}",
            input.c, input.h, input.w, baseline.c, baseline.h, baseline.w
        )));
    }
    if steps == 0 {
        return Err(AnalysisError::Invalid("steps must be >= 1".into()));
    }
    let delta: Vec<f64> = input.data.iter().zip(&baseline.data).map(|(x, b)| x - b).collect();
    let grads: Vec<Vec<f64>> = (0..steps)
        .into_par_iter()
        .map(|k| {
            let alpha = k as f64 / steps as f64;
            let data = baseline.data.iter().zip(&delta).map(|(b, d)| b + alpha * d).collect();
            f(&Tensor::from_vec(input.c, input.h, input.w, data)).map(|(_, g)| g)
        })
        .collect::<Result<_, _>>()?;
    let mut sum = vec![0.0; delta.len()];
    for g in &grads {
        sum.iter_mut().zip(g).for_each(|(s, v)| *s += v);
    }
    let attr = sum.iter().zip(&delta).map(|(s, d)| d * s / steps as f64).collect();
    let (fx, _) = f(input)?;
    let (f0, _) = f(baseline)?;
    Ok((attr, fx, f0))
}

/// Attributes the enhancer output at `target = (y, x)` to the input pixels.
pub fn integrated_gradients(
    weights: &Weights,
    input: &Tensor,
    baseline: &Tensor,
    target: (usize, usize),
    steps: usize,
) -> Result<AttributionMap, AnalysisError> {
    let (ty, tx) = target;
    if ty >= input.h || tx >= input.w {
        return Err(AnalysisError::ShapeMismatch(format!("target {target:?} outside {}x{}", input.h, input.w)));
    }
    let f = |x: &Tensor| output_input_gradient(weights, x, ty, tx).map_err(AnalysisError::from);
    let (attr, output, baseline_output) = integrated_gradients_with(f, input, baseline, steps)?;
    let n = input.plane();
    let channels = attr.chunks(n).map(|c| Plane::new(input.h, input.w, c.to_vec())).collect();
    Ok(AttributionMap { channels, target, steps, output, baseline_output })
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Symmetric 0/1 adjacency matrix with a zero diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictMatrix {
    pub n: usize,
    /// Row-major, `n·n` entries.
    pub entries: Vec<u8>,
    /// `[hi, lo]` for sample conflicts, `[threshold]` for gradient conflicts.
    pub thresholds: Vec<f64>,
}

impl ConflictMatrix {
    fn from_pairs(n: usize, thresholds: Vec<f64>, conflict: impl Fn(usize, usize) -> bool + Sync) -> Self {
        let upper: Vec<Vec<u8>> =
            (0..n).into_par_iter().map(|i| (i + 1..n).map(|j| u8::from(conflict(i, j))).collect()).collect();
        let mut entries = vec![0u8; n * n];
        for (i, row) in upper.iter().enumerate() {
            for (k, &v) in row.iter().enumerate() {
                let j = i + 1 + k;
                entries[i * n + j] = v;
                entries[j * n + i] = v;
            }
        }
        ConflictMatrix { n, entries, thresholds }
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.entries[i * self.n + j] != 0
    }

    /// Number of conflicting unordered pairs.
    pub fn pairs(&self) -> usize {
        self.entries.iter().filter(|&&e| e != 0).count() / 2
    }

    /// Percent of the `n(n−1)/2` unordered off-diagonal pairs.
    pub fn proportion_unordered(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        100.0 * self.pairs() as f64 / (self.n * (self.n - 1) / 2) as f64
    }

    /// Percent of all `n²` ordered entries, diagonal included.
    pub fn proportion_ordered(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        100.0 * (2 * self.pairs()) as f64 / (self.n * self.n) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.n * self.n * 2);
        for row in self.entries.chunks(self.n.max(1)) {
            let cells: Vec<String> = row.iter().map(u8::to_string).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    /// Binary PGM: white for 0, black for a conflict.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.n, self.n).into_bytes();
        out.extend(self.entries.iter().map(|&e| if e != 0 { 0u8 } else { 255 }));
        out
    }
}

fn check_same_len(vs: &[Vec<f64>], what: &str) -> Result<(), AnalysisError> {
    if vs.len() < 2 {
        return Err(AnalysisError::Invalid(format!("need at least two {what}, got {}", vs.len())));
    }
    if let Some((i, v)) = vs.iter().enumerate().find(|(_, v)| v.len() != vs[0].len()) {
        return Err(AnalysisError::ShapeMismatch(format!("{what} {i} has {} values, expected {}", v.len(), vs[0].len())));
    }
    Ok(())
}

pub const SAMPLE_HI: f64 = 0.95;
pub const SAMPLE_LO: f64 = 0.05;

/// Pairs whose inputs are nearly parallel (`|cos| > hi`) while their targets
/// are nearly orthogonal (`|cos| < lo`). Slices are flattened.
pub fn sample_conflict_matrix(
    inputs: &[Vec<f64>],
    targets: &[Vec<f64>],
    hi: f64,
    lo: f64,
) -> Result<ConflictMatrix, AnalysisError> {
    check_same_len(inputs, "inputs")?;
    check_same_len(targets, "targets")?;
    if inputs.len() != targets.len() {
        return Err(AnalysisError::ShapeMismatch(format!("{} inputs vs {} targets", inputs.len(), targets.len())));
    }
    Ok(ConflictMatrix::from_pairs(inputs.len(), vec![hi, lo], |i, j| {
        cosine(&inputs[i], &inputs[j]).abs() > hi && cosine(&targets[i], &targets[j]).abs() < lo
    }))
}

/// Pairs whose gradients point apart: `cos < threshold`. Zero gradients
/// conflict with nothing.
pub fn gradient_conflict_matrix(grads: &[Vec<f64>], threshold: f64) -> Result<ConflictMatrix, AnalysisError> {
    check_same_len(grads, "gradients")?;
    let zero: Vec<bool> = grads.iter().map(|g| g.iter().all(|&v| v == 0.0)).collect();
    Ok(ConflictMatrix::from_pairs(grads.len(), vec![threshold], |i, j| {
        !zero[i] && !zero[j] && cosine(&grads[i], &grads[j]) < threshold
    }))
}

/// Loss gradient of every sample on its own.
pub fn per_sample_gradients(
    weights: &Weights,
    inputs: &[Tensor],
    targets: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>, AnalysisError> {
    if inputs.len() != targets.len() {
        return Err(AnalysisError::ShapeMismatch(format!("{} inputs vs {} targets", inputs.len(), targets.len())));
    }
    inputs
        .par_iter()
        .zip(targets.par_iter())
        .map(|(x, t)| {
            loss_and_grad(weights, std::slice::from_ref(x), std::slice::from_ref(t))
                .map(|(_, g)| g)
                .map_err(AnalysisError::from)
        })
        .collect()
}
