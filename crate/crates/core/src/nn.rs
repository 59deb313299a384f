//! A small fully-connected classifier: linear or MLP heads over pooled pixels,
//! with exact reverse-mode gradients.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{ImageBuffer, CHANNELS};
use crate::matrix::{Matrix, ProbMatrix};

/// Layer widths from input to output, e.g. `linear:192x10` or `mlp:192x64x10`.
/// Hidden layers use ReLU; the output layer is affine.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Arch {
    dims: Vec<usize>,
}

impl Arch {
    pub fn linear(input: usize, classes: usize) -> Result<Self> {
        Self::from_dims(vec![input, classes])
    }

    pub fn mlp(dims: Vec<usize>) -> Result<Self> {
        if dims.len() < 3 {
            return Err(Error::invalid("mlp needs at least one hidden layer"));
        }
        Self::from_dims(dims)
    }

    fn from_dims(dims: Vec<usize>) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::invalid("architecture needs input and output dims"));
        }
        if dims.contains(&0) {
            return Err(Error::invalid("zero-size layer"));
        }
        Ok(Self { dims })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    /// (out, in) for each layer.
    pub fn layer_shapes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.dims.windows(2).map(|w| (w[1], w[0]))
    }

    pub fn num_params(&self) -> usize {
        self.layer_shapes().map(|(o, i)| o * i + o).sum()
    }

    /// Side length of the square pooling grid implied by the input width
    /// (`input = 3 * side * side`), if there is one.
    pub fn feature_grid(&self) -> Option<usize> {
        let input = self.input_dim();
        if !input.is_multiple_of(CHANNELS) {
            return None;
        }
        let cells = input / CHANNELS;
        let side = (cells as f64).sqrt().round() as usize;
        (side * side == cells).then_some(side)
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = if self.dims.len() == 2 { "linear" } else { "mlp" };
        let dims: Vec<String> = self.dims.iter().map(usize::to_string).collect();
        write!(f, "{kind}:{}", dims.join("x"))
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, dims) = s
            .split_once(':')
            .ok_or_else(|| Error::invalid(format!("architecture '{s}' lacks a kind prefix")))?;
        let dims = dims
            .split('x')
            .map(|d| {
                d.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::invalid(format!("bad layer width '{d}' in '{s}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        match kind {
            "linear" if dims.len() == 2 => Self::from_dims(dims),
            "linear" => Err(Error::invalid(format!(
                "linear architecture takes exactly 2 dims: '{s}'"
            ))),
            "mlp" => Self::mlp(dims),
            other => Err(Error::invalid(format!("unknown architecture kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// out × in
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: Arch,
    layers: Vec<Layer>,
}

impl ModelParams {
    pub fn zeros(arch: &Arch) -> Self {
        let layers = arch
            .layer_shapes()
            .map(|(o, i)| Layer {
                weight: Matrix::zeros(o, i),
                bias: vec![0.0; o],
            })
            .collect();
        Self {
            arch: arch.clone(),
            layers,
        }
    }

    pub fn from_layers(arch: &Arch, layers: Vec<Layer>) -> Result<Self> {
        if layers.len() != arch.num_layers() {
            return Err(Error::shape(format!(
                "{arch} has {} layers, got {}",
                arch.num_layers(),
                layers.len()
            )));
        }
        for (l, ((o, i), layer)) in arch.layer_shapes().zip(&layers).enumerate() {
            if layer.weight.rows() != o || layer.weight.cols() != i || layer.bias.len() != o {
                return Err(Error::shape(format!("layer {l} does not match {arch}")));
            }
        }
        Ok(Self {
            arch: arch.clone(),
            layers,
        })
    }

    /// Inverse of [`ModelParams::to_flat`].
    pub fn from_flat(arch: &Arch, flat: &[f64]) -> Result<Self> {
        if flat.len() != arch.num_params() {
            return Err(Error::shape(format!(
                "{arch} has {} parameters, got {}",
                arch.num_params(),
                flat.len()
            )));
        }
        let mut offset = 0;
        let mut layers = Vec::with_capacity(arch.num_layers());
        for (o, i) in arch.layer_shapes() {
            let weight = Matrix::from_vec(o, i, flat[offset..offset + o * i].to_vec())?;
            offset += o * i;
            let bias = flat[offset..offset + o].to_vec();
            offset += o;
            layers.push(Layer { weight, bias });
        }
        Ok(Self {
            arch: arch.clone(),
            layers,
        })
    }

    /// Per layer: weights row-major, then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.arch.num_params());
        for layer in &self.layers {
            flat.extend_from_slice(layer.weight.as_slice());
            flat.extend_from_slice(&layer.bias);
        }
        flat
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }
}

/// Xavier-uniform weights, zero biases.
pub fn init_params(arch: &Arch, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::zeros(arch);
    for layer in &mut params.layers {
        let (fan_out, fan_in) = (layer.weight.rows(), layer.weight.cols());
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for w in layer.weight.as_mut_slice() {
            *w = rng.random_range(-limit..=limit);
        }
    }
    params
}

fn affine(layer: &Layer, input: &[f64], out: &mut Vec<f64>) {
    out.clear();
    for (j, &b) in layer.bias.iter().enumerate() {
        let w = layer.weight.row(j);
        let mut acc = b;
        for (wi, xi) in w.iter().zip(input) {
            acc += wi * xi;
        }
        out.push(acc);
    }
}

fn check_input(params: &ModelParams, features: &Matrix) -> Result<()> {
    if features.cols() != params.arch.input_dim() {
        return Err(Error::shape(format!(
            "features have width {}, {} expects {}",
            features.cols(),
            params.arch,
            params.arch.input_dim()
        )));
    }
    Ok(())
}

/// Logits for a single feature row.
pub fn forward_row(params: &ModelParams, x: &[f64]) -> Vec<f64> {
    let last = params.layers.len() - 1;
    let mut h = x.to_vec();
    let mut next = Vec::new();
    for (l, layer) in params.layers.iter().enumerate() {
        affine(layer, &h, &mut next);
        if l != last {
            next.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        std::mem::swap(&mut h, &mut next);
    }
    h
}

/// Each row is computed independently, so batched and row-at-a-time results
/// are bit-identical.
pub fn forward(params: &ModelParams, features: &Matrix) -> Result<Matrix> {
    check_input(params, features)?;
    let k = params.arch.output_dim();
    let mut data = Vec::with_capacity(features.rows() * k);
    for row in features.iter_rows() {
        data.extend(forward_row(params, row));
    }
    Matrix::from_vec(features.rows(), k, data)
}

pub fn log_softmax_row(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z.iter().map(|&v| (v - max).exp()).sum();
    let log_sum = sum.ln();
    z.iter().map(|&v| v - max - log_sum).collect()
}

pub fn softmax_row(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn softmax(logits: &Matrix) -> Result<ProbMatrix> {
    if logits.as_slice().iter().any(|v| v.is_nan()) {
        return Err(Error::invalid("NaN logit"));
    }
    if logits.as_slice().iter().any(|v| v.is_infinite()) {
        return Err(Error::invalid("non-finite logit"));
    }
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for (i, row) in logits.iter_rows().enumerate() {
        out.row_mut(i).copy_from_slice(&softmax_row(row));
    }
    Ok(ProbMatrix::new_unchecked(out))
}

/// Gradients of `sum_n <dlogits[n], f(x[n])>` with respect to every parameter.
pub fn backward(params: &ModelParams, features: &Matrix, dlogits: &Matrix) -> Result<ModelParams> {
    check_input(params, features)?;
    if dlogits.rows() != features.rows() || dlogits.cols() != params.arch.output_dim() {
        return Err(Error::shape(format!(
            "dlogits is {}x{}, expected {}x{}",
            dlogits.rows(),
            dlogits.cols(),
            features.rows(),
            params.arch.output_dim()
        )));
    }
    let n_layers = params.layers.len();
    let mut grads = ModelParams::zeros(&params.arch);
    // activations[l] is the input to layer l; activations[n_layers] the logits.
    let mut activations: Vec<Vec<f64>> = vec![Vec::new(); n_layers + 1];
    let mut next = Vec::new();
    for (n, x) in features.iter_rows().enumerate() {
        activations[0].clear();
        activations[0].extend_from_slice(x);
        for (l, layer) in params.layers.iter().enumerate() {
            affine(layer, &activations[l], &mut next);
            if l + 1 != n_layers {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            std::mem::swap(&mut activations[l + 1], &mut next);
        }

        let mut delta = dlogits.row(n).to_vec();
        for l in (0..n_layers).rev() {
            let input = &activations[l];
            let g = &mut grads.layers[l];
            for (j, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.bias[j] += d;
                for (gw, &xi) in g.weight.row_mut(j).iter_mut().zip(input) {
                    *gw += d * xi;
                }
            }
            if l == 0 {
                break;
            }
            let w = &params.layers[l].weight;
            let mut prev = vec![0.0; w.cols()];
            for (j, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                for (p, &wji) in prev.iter_mut().zip(w.row(j)) {
                    *p += d * wji;
                }
            }
            // ReLU derivative, taken as 0 at the kink.
            for (p, &a) in prev.iter_mut().zip(&activations[l]) {
                if a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }
    Ok(grads)
}

/// Area-average pools a normalized image to `grid_h × grid_w` cells and
/// flattens channel-major, giving `3 * grid_h * grid_w` features.
pub fn featurize(img: &ImageBuffer, grid_h: usize, grid_w: usize) -> Result<Vec<f64>> {
    if grid_h == 0 || grid_w == 0 {
        return Err(Error::invalid("zero pooling grid"));
    }
    let wy = area_weights(img.height(), grid_h);
    let wx = area_weights(img.width(), grid_w);
    let mut out = Vec::with_capacity(CHANNELS * grid_h * grid_w);
    for c in 0..CHANNELS {
        let plane = img.channel(c);
        for ys in &wy {
            for xs in &wx {
                let mut acc = 0.0;
                let mut total = 0.0;
                for &(y, a) in ys {
                    let row = &plane[y * img.width()..(y + 1) * img.width()];
                    for &(x, b) in xs {
                        acc += a * b * row[x];
                        total += a * b;
                    }
                }
                out.push(acc / total);
            }
        }
    }
    Ok(out)
}

/// For each destination cell, the source indices it overlaps and the overlap length.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let lo = d as f64 * scale;
            let hi = (d + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            (first..last)
                .filter_map(|s| {
                    let overlap = (hi.min(s as f64 + 1.0) - lo.max(s as f64)).max(0.0);
                    (overlap > 0.0).then_some((s, overlap))
                })
                .collect()
        })
        .collect()
}
