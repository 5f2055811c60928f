//! Scoring networks: a fully-connected stack for low resolutions and a single
//! 3D-convolution front end for high resolutions. Every layer, the output
//! included, is affine followed by `tanh`, so scores lie in `(-1, 1)`.
//!
//! Weight storage is input-major: dense weight `w_ij` (input `j` to output
//! `i`) lives at `j * outputs + i`. Convolution masks are stored per channel
//! with kernel offset `kx + m*ky + m*m*kz`; grouped (per-channel) stages store
//! one input-major block per group.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::voxel::{InputVector, VoxelGrid};

/// Standard deviation of the initial weights and biases.
pub const INIT_STD: f64 = 0.1;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid architecture: {0}")]
    BadArchitecture(String),
    #[error("input has {got} values, network expects {expected}")]
    InputMismatch { expected: usize, got: usize },
    #[error("grid resolution {got} does not match network resolution {expected}")]
    ResolutionMismatch { expected: usize, got: usize },
    #[error("layer index {index} out of range 1..{layers}")]
    LayerOutOfRange { index: usize, layers: usize },
    #[error("model file: {0}")]
    Format(String),
    #[error("model file version {0} is not supported")]
    Version(String),
    #[error("tensor {name}: expected {expected} values, found {got}")]
    TensorShape {
        name: String,
        expected: usize,
        got: usize,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchKind {
    Full,
    Conv,
}

impl std::str::FromStr for ArchKind {
    type Err = NetError;
    fn from_str(s: &str) -> Result<Self, NetError> {
        match s {
            "full" => Ok(ArchKind::Full),
            "conv" => Ok(ArchKind::Conv),
            other => Err(NetError::BadArchitecture(format!("unknown kind {other:?}"))),
        }
    }
}

/// Layer wiring of a scoring network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ArchitectureSpec {
    /// Dense stack; `widths[0]` is `R^3` and the last width is 1.
    Full { resolution: usize, widths: Vec<usize> },
    /// One convolution layer (`channels` masks of side `mask`, moved by
    /// `stride`), then a dense stage per channel (`per_channel` widths), then
    /// the concatenated channel outputs run through the `merge` widths.
    Conv {
        resolution: usize,
        channels: usize,
        mask: usize,
        stride: usize,
        per_channel: Vec<usize>,
        merge: Vec<usize>,
    },
}

/// One parametric layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Dense { inputs: usize, outputs: usize },
    Conv3d { side: usize, channels: usize, mask: usize, stride: usize },
    /// Independent dense maps over `groups` contiguous input blocks.
    Grouped { groups: usize, inputs: usize, outputs: usize },
}

impl Layer {
    pub fn input_len(&self) -> usize {
        match *self {
            Layer::Dense { inputs, .. } => inputs,
            Layer::Conv3d { side, .. } => side.pow(3),
            Layer::Grouped { groups, inputs, .. } => groups * inputs,
        }
    }

    pub fn output_len(&self) -> usize {
        match *self {
            Layer::Dense { outputs, .. } => outputs,
            Layer::Conv3d { channels, .. } => channels * self.conv_out_side().pow(3),
            Layer::Grouped { groups, outputs, .. } => groups * outputs,
        }
    }

    pub fn weight_len(&self) -> usize {
        match *self {
            Layer::Dense { inputs, outputs } => inputs * outputs,
            Layer::Conv3d { channels, mask, .. } => channels * mask.pow(3),
            Layer::Grouped { groups, inputs, outputs } => groups * inputs * outputs,
        }
    }

    pub fn bias_len(&self) -> usize {
        match *self {
            Layer::Dense { outputs, .. } => outputs,
            Layer::Conv3d { channels, .. } => channels,
            Layer::Grouped { groups, outputs, .. } => groups * outputs,
        }
    }

    /// Weight tensor shape as written to model files.
    pub fn weight_shape(&self) -> Vec<usize> {
        match *self {
            Layer::Dense { inputs, outputs } => vec![inputs, outputs],
            Layer::Conv3d { channels, mask, .. } => vec![channels, mask.pow(3)],
            Layer::Grouped { groups, inputs, outputs } => vec![groups, inputs, outputs],
        }
    }

    fn conv_out_side(&self) -> usize {
        match *self {
            Layer::Conv3d { side, mask, stride, .. } => (side - mask) / stride + 1,
            _ => 0,
        }
    }

    /// `z = W a + b`.
    fn affine(&self, params: &LayerParams, input: &[f64], z: &mut [f64]) {
        match *self {
            Layer::Dense { outputs, .. } => {
                z.copy_from_slice(&params.biases);
                for (j, &aj) in input.iter().enumerate() {
                    if aj != 0.0 {
                        let row = &params.weights[j * outputs..(j + 1) * outputs];
                        for (zi, wi) in z.iter_mut().zip(row) {
                            *zi += aj * wi;
                        }
                    }
                }
            }
            Layer::Grouped { groups, inputs, outputs } => {
                for g in 0..groups {
                    let zg = &mut z[g * outputs..(g + 1) * outputs];
                    zg.copy_from_slice(&params.biases[g * outputs..(g + 1) * outputs]);
                    let wg = &params.weights[g * inputs * outputs..(g + 1) * inputs * outputs];
                    for (j, &aj) in input[g * inputs..(g + 1) * inputs].iter().enumerate() {
                        if aj != 0.0 {
                            for (zi, wi) in zg.iter_mut().zip(&wg[j * outputs..(j + 1) * outputs]) {
                                *zi += aj * wi;
                            }
                        }
                    }
                }
            }
            Layer::Conv3d { channels, mask, .. } => {
                let d = self.conv_out_side();
                let positions = d.pow(3);
                let m3 = mask.pow(3);
                let mut window = Vec::with_capacity(m3);
                for pos in 0..positions {
                    self.conv_window(pos, input, &mut window);
                    for c in 0..channels {
                        let wc = &params.weights[c * m3..(c + 1) * m3];
                        let mut acc = params.biases[c];
                        for &(k, x) in &window {
                            acc += wc[k] * x;
                        }
                        z[c * positions + pos] = acc;
                    }
                }
            }
        }
    }

    /// Nonzero `(kernel offset, input value)` pairs under the mask at output
    /// position `pos`.
    fn conv_window(&self, pos: usize, input: &[f64], out: &mut Vec<(usize, f64)>) {
        let Layer::Conv3d { side, mask, stride, .. } = *self else {
            unreachable!("conv_window on a non-convolution layer")
        };
        let d = self.conv_out_side();
        let (ox, oy, oz) = (pos % d, (pos / d) % d, pos / (d * d));
        out.clear();
        for kz in 0..mask {
            for ky in 0..mask {
                let base = ox * stride + side * (oy * stride + ky + side * (oz * stride + kz));
                for kx in 0..mask {
                    let x = input[base + kx];
                    if x != 0.0 {
                        out.push((kx + mask * (ky + mask * kz), x));
                    }
                }
            }
        }
    }

    /// `W^T delta` over this layer's inputs. Not defined for the convolution,
    /// which always reads layer 0.
    fn transpose_mul(&self, params: &LayerParams, delta: &[f64], out: &mut [f64]) {
        match *self {
            Layer::Dense { outputs, .. } => {
                for (j, o) in out.iter_mut().enumerate() {
                    let row = &params.weights[j * outputs..(j + 1) * outputs];
                    *o = row.iter().zip(delta).map(|(w, d)| w * d).sum();
                }
            }
            Layer::Grouped { groups, inputs, outputs } => {
                for g in 0..groups {
                    let wg = &params.weights[g * inputs * outputs..(g + 1) * inputs * outputs];
                    let dg = &delta[g * outputs..(g + 1) * outputs];
                    for j in 0..inputs {
                        let row = &wg[j * outputs..(j + 1) * outputs];
                        out[g * inputs + j] = row.iter().zip(dg).map(|(w, d)| w * d).sum();
                    }
                }
            }
            Layer::Conv3d { .. } => unreachable!("convolution is only supported as the first layer"),
        }
    }

    /// `grad.W += scale * delta a^T`, `grad.b += scale * delta`.
    fn accumulate(&self, input: &[f64], delta: &[f64], scale: f64, grad: &mut LayerParams) {
        if let Layer::Conv3d { .. } = self {
            // One bias per channel, shared by every output position.
            let positions = self.conv_out_side().pow(3);
            for (gb, dc) in grad.biases.iter_mut().zip(delta.chunks(positions)) {
                *gb += scale * dc.iter().sum::<f64>();
            }
        } else {
            for (gb, d) in grad.biases.iter_mut().zip(delta) {
                *gb += scale * d;
            }
        }
        match *self {
            Layer::Dense { outputs, .. } => {
                let sd: Vec<f64> = delta.iter().map(|d| scale * d).collect();
                for (j, &aj) in input.iter().enumerate() {
                    if aj != 0.0 {
                        let row = &mut grad.weights[j * outputs..(j + 1) * outputs];
                        for (g, d) in row.iter_mut().zip(&sd) {
                            *g += aj * d;
                        }
                    }
                }
            }
            Layer::Grouped { groups, inputs, outputs } => {
                for g in 0..groups {
                    let dg: Vec<f64> = delta[g * outputs..(g + 1) * outputs].iter().map(|d| scale * d).collect();
                    let wg = &mut grad.weights[g * inputs * outputs..(g + 1) * inputs * outputs];
                    for (j, &aj) in input[g * inputs..(g + 1) * inputs].iter().enumerate() {
                        if aj != 0.0 {
                            for (w, d) in wg[j * outputs..(j + 1) * outputs].iter_mut().zip(&dg) {
                                *w += aj * d;
                            }
                        }
                    }
                }
            }
            Layer::Conv3d { channels, mask, .. } => {
                // Shared masks: sum contributions over every output position.
                let d = self.conv_out_side();
                let positions = d.pow(3);
                let m3 = mask.pow(3);
                let mut window = Vec::with_capacity(m3);
                for pos in 0..positions {
                    self.conv_window(pos, input, &mut window);
                    for c in 0..channels {
                        let dc = scale * delta[c * positions + pos];
                        if dc == 0.0 {
                            continue;
                        }
                        let gc = &mut grad.weights[c * m3..(c + 1) * m3];
                        for &(k, x) in &window {
                            gc[k] += dc * x;
                        }
                    }
                }
            }
        }
    }
}

impl ArchitectureSpec {
    /// Default wiring for a resolution.
    ///
    /// * full: `[R^3, 200, 200, 50, 1]`
    /// * conv: 200 channels, per-channel `[50, 1]`, merge `[50, 1]`; mask 9 /
    ///   stride 6 at R=45 and mask 12 / stride 8 at R=60 (both give a 7-cube).
    pub fn build(kind: ArchKind, resolution: usize) -> Result<Self, NetError> {
        match kind {
            ArchKind::Full => Self::full(resolution, vec![resolution.pow(3), 200, 200, 50, 1]),
            ArchKind::Conv => {
                let (mask, stride) = match resolution {
                    45 => (9, 6),
                    60 => (12, 8),
                    r => {
                        return Err(NetError::BadArchitecture(format!(
                            "no default convolution geometry for resolution {r}; pass mask and stride explicitly"
                        )))
                    }
                };
                Self::conv(resolution, 200, mask, stride, vec![50, 1], vec![50, 1])
            }
        }
    }

    pub fn full(resolution: usize, widths: Vec<usize>) -> Result<Self, NetError> {
        let spec = ArchitectureSpec::Full { resolution, widths };
        spec.validate()?;
        Ok(spec)
    }

    pub fn conv(
        resolution: usize,
        channels: usize,
        mask: usize,
        stride: usize,
        per_channel: Vec<usize>,
        merge: Vec<usize>,
    ) -> Result<Self, NetError> {
        let spec = ArchitectureSpec::Conv {
            resolution,
            channels,
            mask,
            stride,
            per_channel,
            merge,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: String| Err(NetError::BadArchitecture(m));
        match self {
            ArchitectureSpec::Full { resolution, widths } => {
                if widths.len() < 2 {
                    return bad("a full network needs at least an input and an output width".into());
                }
                if widths[0] != resolution.pow(3) {
                    return bad(format!("input width {} must equal R^3 = {}", widths[0], resolution.pow(3)));
                }
                if *widths.last().unwrap() != 1 {
                    return bad("final width must be 1".into());
                }
                if widths.contains(&0) {
                    return bad("widths must be positive".into());
                }
            }
            ArchitectureSpec::Conv {
                resolution,
                channels,
                mask,
                stride,
                per_channel,
                merge,
            } => {
                if *channels == 0 || *mask == 0 || *stride == 0 {
                    return bad("channels, mask and stride must be positive".into());
                }
                if mask > resolution {
                    return bad(format!("mask {mask} exceeds resolution {resolution}"));
                }
                if (resolution - mask) % stride != 0 {
                    return bad(format!(
                        "(R - m) = {} is not divisible by stride {stride}",
                        resolution - mask
                    ));
                }
                if merge.last() != Some(&1) {
                    return bad("merge stage must end with width 1".into());
                }
                if per_channel.contains(&0) || merge.contains(&0) {
                    return bad("widths must be positive".into());
                }
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> ArchKind {
        match self {
            ArchitectureSpec::Full { .. } => ArchKind::Full,
            ArchitectureSpec::Conv { .. } => ArchKind::Conv,
        }
    }

    pub fn resolution(&self) -> usize {
        match self {
            ArchitectureSpec::Full { resolution, .. } | ArchitectureSpec::Conv { resolution, .. } => *resolution,
        }
    }

    pub fn input_len(&self) -> usize {
        self.resolution().pow(3)
    }

    /// Side of each channel's output cube, for convolutional specs.
    pub fn conv_output_side(&self) -> Option<usize> {
        match self {
            ArchitectureSpec::Conv {
                resolution, mask, stride, ..
            } => Some((resolution - mask) / stride + 1),
            _ => None,
        }
    }

    /// Parametric layers, input to output.
    pub fn layers(&self) -> Vec<Layer> {
        match self {
            ArchitectureSpec::Full { widths, .. } => widths
                .windows(2)
                .map(|w| Layer::Dense {
                    inputs: w[0],
                    outputs: w[1],
                })
                .collect(),
            ArchitectureSpec::Conv {
                resolution,
                channels,
                mask,
                stride,
                per_channel,
                merge,
            } => {
                let mut layers = vec![Layer::Conv3d {
                    side: *resolution,
                    channels: *channels,
                    mask: *mask,
                    stride: *stride,
                }];
                let mut width = self.conv_output_side().unwrap().pow(3);
                for &w in per_channel {
                    layers.push(Layer::Grouped {
                        groups: *channels,
                        inputs: width,
                        outputs: w,
                    });
                    width = w;
                }
                let mut width = channels * width;
                for &w in merge {
                    layers.push(Layer::Dense { inputs: width, outputs: w });
                    width = w;
                }
                layers
            }
        }
    }

    /// Number of parametric layers (the output is layer `num_layers()`).
    pub fn num_layers(&self) -> usize {
        self.layers().len()
    }

    /// Node counts of layers `0..=n_l`.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let layers = self.layers();
        std::iter::once(self.input_len())
            .chain(layers.iter().map(Layer::output_len))
            .collect()
    }

    fn descriptor(&self) -> String {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
        match self {
            ArchitectureSpec::Full { resolution, widths } => {
                format!("full {resolution} widths {}", join(widths))
            }
            ArchitectureSpec::Conv {
                resolution,
                channels,
                mask,
                stride,
                per_channel,
                merge,
            } => format!(
                "conv {resolution} channels {channels} mask {mask} stride {stride} per_channel {} merge {}",
                join(per_channel),
                join(merge)
            ),
        }
    }

    fn parse_descriptor(line: &str) -> Result<Self, NetError> {
        let fmt = |m: &str| NetError::Format(format!("{m} in architecture line {line:?}"));
        let tokens: Vec<&str> = line.split_whitespace().collect();
        let num = |s: &str| s.parse::<usize>().map_err(|_| fmt("bad number"));
        let kind: ArchKind = tokens.first().ok_or_else(|| fmt("empty"))?.parse()?;
        let resolution = num(tokens.get(1).ok_or_else(|| fmt("missing resolution"))?)?;
        // Splits "key v v v key v ..." into keyed number lists.
        let mut fields: Vec<(&str, Vec<usize>)> = Vec::new();
        for tok in &tokens[2..] {
            if tok.chars().all(|c| c.is_ascii_digit()) {
                fields.last_mut().ok_or_else(|| fmt("value before key"))?.1.push(num(tok)?);
            } else {
                fields.push((tok, Vec::new()));
            }
        }
        let get = |key: &str| -> Result<Vec<usize>, NetError> {
            fields
                .iter()
                .find(|(k, _)| *k == key)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| fmt(&format!("missing {key}")))
        };
        let one = |key: &str| -> Result<usize, NetError> {
            let v = get(key)?;
            if v.len() != 1 {
                return Err(fmt(&format!("{key} takes one value")));
            }
            Ok(v[0])
        };
        match kind {
            ArchKind::Full => Self::full(resolution, get("widths")?),
            ArchKind::Conv => Self::conv(
                resolution,
                one("channels")?,
                one("mask")?,
                one("stride")?,
                get("per_channel")?,
                get("merge")?,
            ),
        }
    }
}

/// Weights and biases of one parametric layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl LayerParams {
    fn zeros(layer: &Layer) -> Self {
        LayerParams {
            weights: vec![0.0; layer.weight_len()],
            biases: vec![0.0; layer.bias_len()],
        }
    }
}

/// All weights `W` and biases `b` of a network, with its wiring.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    spec: ArchitectureSpec,
    layers: Vec<LayerParams>,
}

/// Partial derivatives with the same layout as [`NetworkParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub layers: Vec<LayerParams>,
}

impl Gradient {
    pub fn zeros(spec: &ArchitectureSpec) -> Self {
        Gradient {
            layers: spec.layers().iter().map(LayerParams::zeros).collect(),
        }
    }

    /// Weights then biases, layer by layer.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
    }

    pub fn add_assign(&mut self, other: &Gradient) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.biases.iter_mut().zip(&b.biases).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|x| *x *= s);
            l.biases.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }
}

impl NetworkParams {
    pub fn zeros(spec: &ArchitectureSpec) -> Self {
        NetworkParams {
            spec: spec.clone(),
            layers: spec.layers().iter().map(LayerParams::zeros).collect(),
        }
    }

    /// Builds parameters from explicit tensors, checking every shape.
    pub fn from_layers(spec: ArchitectureSpec, layers: Vec<LayerParams>) -> Result<Self, NetError> {
        spec.validate()?;
        let expected = spec.layers();
        if expected.len() != layers.len() {
            return Err(NetError::Format(format!(
                "expected {} layers, got {}",
                expected.len(),
                layers.len()
            )));
        }
        for (i, (l, p)) in expected.iter().zip(&layers).enumerate() {
            if p.weights.len() != l.weight_len() {
                return Err(NetError::TensorShape {
                    name: format!("W{}", i + 1),
                    expected: l.weight_len(),
                    got: p.weights.len(),
                });
            }
            if p.biases.len() != l.bias_len() {
                return Err(NetError::TensorShape {
                    name: format!("b{}", i + 1),
                    expected: l.bias_len(),
                    got: p.biases.len(),
                });
            }
        }
        Ok(NetworkParams { spec, layers })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }

    pub fn num_values(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// Weights then biases, layer by layer.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.biases).copied())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    /// The `i`-th value in [`values`](Self::values) order.
    pub fn value_mut(&mut self, mut i: usize) -> &mut f64 {
        for l in &mut self.layers {
            if i < l.weights.len() {
                return &mut l.weights[i];
            }
            i -= l.weights.len();
            if i < l.biases.len() {
                return &mut l.biases[i];
            }
            i -= l.biases.len();
        }
        panic!("parameter index out of range");
    }

    /// `||W||_2^2` over all weights; biases are not included.
    pub fn weight_norm_sq(&self) -> f64 {
        self.layers.iter().flat_map(|l| &l.weights).map(|w| w * w).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    /// `w <- w - alpha * g` for every weight and bias.
    pub fn descend(&mut self, grad: &Gradient, alpha: f64) {
        for (p, g) in self.layers.iter_mut().zip(&grad.layers) {
            p.weights.iter_mut().zip(&g.weights).for_each(|(w, d)| *w -= alpha * d);
            p.biases.iter_mut().zip(&g.biases).for_each(|(b, d)| *b -= alpha * d);
        }
    }
}

/// Draws every weight and bias from `N(0, 0.1^2)` with a seeded generator.
pub fn init_params(spec: &ArchitectureSpec, seed: u64) -> NetworkParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid normal");
    let mut params = NetworkParams::zeros(spec);
    for v in params.values_mut() {
        *v = normal.sample(&mut rng);
    }
    params
}

/// Pre-activations `z` and activations `a` of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `z[l-1]` holds layer `l`'s pre-activations, `l = 1..=n_l`.
    pub z: Vec<Vec<f64>>,
    /// `a[l]` holds layer `l`'s activations; `a[0]` is the input.
    pub a: Vec<Vec<f64>>,
}

impl ForwardTrace {
    /// The score `y`.
    pub fn output(&self) -> f64 {
        self.a.last().expect("non-empty trace")[0]
    }
}

pub fn forward(params: &NetworkParams, input: &InputVector) -> Result<ForwardTrace, NetError> {
    let expected = params.spec.input_len();
    if input.len() != expected {
        return Err(NetError::InputMismatch {
            expected,
            got: input.len(),
        });
    }
    let layers = params.spec.layers();
    let mut z = Vec::with_capacity(layers.len());
    let mut a = Vec::with_capacity(layers.len() + 1);
    a.push(input.0.clone());
    for (layer, p) in layers.iter().zip(&params.layers) {
        let mut zl = vec![0.0; layer.output_len()];
        layer.affine(p, a.last().unwrap(), &mut zl);
        a.push(zl.iter().map(|v| v.tanh()).collect());
        z.push(zl);
    }
    Ok(ForwardTrace { z, a })
}

/// Score of a voxelized shape.
pub fn score(params: &NetworkParams, grid: &VoxelGrid) -> Result<f64, NetError> {
    check_resolution(params, grid)?;
    Ok(forward(params, &grid.to_input())?.output())
}

pub(crate) fn check_resolution(params: &NetworkParams, grid: &VoxelGrid) -> Result<(), NetError> {
    if grid.resolution() != params.spec.resolution() {
        return Err(NetError::ResolutionMismatch {
            expected: params.spec.resolution(),
            got: grid.resolution(),
        });
    }
    Ok(())
}

/// Backpropagated `dy/dz` for layers `1..=n_l` (index `l-1`):
/// `1 - y^2` at the output and `(W^T delta) * (1 - a^2)` below it.
pub fn backward_deltas(trace: &ForwardTrace, params: &NetworkParams) -> Result<Vec<Vec<f64>>, NetError> {
    let layers = params.spec.layers();
    if trace.z.len() != layers.len() || trace.a.len() != layers.len() + 1 {
        return Err(NetError::Format("trace does not match the network".into()));
    }
    for (l, layer) in layers.iter().enumerate() {
        if trace.z[l].len() != layer.output_len() {
            return Err(NetError::Format(format!("trace layer {} has the wrong width", l + 1)));
        }
    }
    let n = layers.len();
    let mut deltas = vec![Vec::new(); n];
    let y = trace.output();
    deltas[n - 1] = vec![1.0 - y * y];
    for l in (0..n - 1).rev() {
        let mut back = vec![0.0; layers[l + 1].input_len()];
        layers[l + 1].transpose_mul(&params.layers[l + 1], &deltas[l + 1], &mut back);
        let act = &trace.a[l + 1];
        deltas[l] = back.iter().zip(act).map(|(s, a)| s * (1.0 - a * a)).collect();
    }
    Ok(deltas)
}

/// Adds `scale * dy/dtheta` for the traced input into `grad`.
pub fn accumulate_output_gradient(
    params: &NetworkParams,
    trace: &ForwardTrace,
    scale: f64,
    grad: &mut Gradient,
) -> Result<(), NetError> {
    let deltas = backward_deltas(trace, params)?;
    accumulate_with_deltas(params, trace, &deltas, scale, grad);
    Ok(())
}

pub(crate) fn accumulate_with_deltas(
    params: &NetworkParams,
    trace: &ForwardTrace,
    deltas: &[Vec<f64>],
    scale: f64,
    grad: &mut Gradient,
) {
    for (l, layer) in params.spec.layers().iter().enumerate() {
        layer.accumulate(&trace.a[l], &deltas[l], scale, &mut grad.layers[l]);
    }
}

/// Writes the model file: `SRNET 1`, the architecture line, then one line per
/// tensor (`W<l>`/`b<l>`, shape, values with 17 significant digits).
pub fn save_params(params: &NetworkParams, path: impl AsRef<Path>) -> Result<(), NetError> {
    let path = path.as_ref();
    fs::write(path, params_to_string(params)).map_err(|source| NetError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn params_to_string(params: &NetworkParams) -> String {
    let mut out = String::from("SRNET 1\n");
    out.push_str(&params.spec.descriptor());
    out.push('\n');
    for (i, (layer, p)) in params.spec.layers().iter().zip(&params.layers).enumerate() {
        let shape = layer
            .weight_shape()
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join("x");
        write_tensor(&mut out, &format!("W{}", i + 1), &shape, &p.weights);
        write_tensor(&mut out, &format!("b{}", i + 1), &p.biases.len().to_string(), &p.biases);
    }
    out
}

fn write_tensor(out: &mut String, name: &str, shape: &str, values: &[f64]) {
    out.push_str(name);
    out.push(' ');
    out.push_str(shape);
    for v in values {
        write!(out, " {v:.16e}").unwrap();
    }
    out.push('\n');
}

pub fn load_params(path: impl AsRef<Path>) -> Result<NetworkParams, NetError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| NetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    params_from_str(&text)
}

pub fn params_from_str(text: &str) -> Result<NetworkParams, NetError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| NetError::Format("empty file".into()))?;
    let mut h = header.split_whitespace();
    if h.next() != Some("SRNET") {
        return Err(NetError::Format(format!("bad header {header:?}")));
    }
    match h.next() {
        Some("1") => {}
        Some(v) => return Err(NetError::Version(v.to_string())),
        None => return Err(NetError::Format("missing version".into())),
    }
    let arch = lines.next().ok_or_else(|| NetError::Format("missing architecture line".into()))?;
    let spec = ArchitectureSpec::parse_descriptor(arch)?;
    let mut layers = Vec::new();
    for (i, layer) in spec.layers().iter().enumerate() {
        let weights = read_tensor(lines.next(), &format!("W{}", i + 1), layer.weight_len())?;
        let biases = read_tensor(lines.next(), &format!("b{}", i + 1), layer.bias_len())?;
        layers.push(LayerParams { weights, biases });
    }
    if let Some(extra) = lines.find(|l| !l.trim().is_empty()) {
        return Err(NetError::Format(format!("unexpected trailing line {:.40?}", extra)));
    }
    let params = NetworkParams::from_layers(spec, layers)?;
    if !params.is_finite() {
        return Err(NetError::Format("non-finite parameter".into()));
    }
    Ok(params)
}

fn read_tensor(line: Option<&str>, name: &str, expected: usize) -> Result<Vec<f64>, NetError> {
    let line = line.ok_or_else(|| NetError::Format(format!("truncated file: missing tensor {name}")))?;
    let mut tokens = line.split_whitespace();
    let found = tokens.next().unwrap_or("");
    if found != name {
        return Err(NetError::Format(format!("expected tensor {name}, found {found:?}")));
    }
    let shape = tokens.next().ok_or_else(|| NetError::Format(format!("tensor {name} has no shape")))?;
    let declared: usize = shape
        .split('x')
        .map(|s| s.parse::<usize>())
        .product::<Result<usize, _>>()
        .map_err(|_| NetError::Format(format!("tensor {name} has bad shape {shape:?}")))?;
    if declared != expected {
        return Err(NetError::TensorShape {
            name: name.to_string(),
            expected,
            got: declared,
        });
    }
    let values: Vec<f64> = tokens
        .map(str::parse::<f64>)
        .collect::<Result<_, _>>()
        .map_err(|_| NetError::Format(format!("tensor {name} has a bad value")))?;
    if values.len() != expected {
        return Err(NetError::TensorShape {
            name: name.to_string(),
            expected,
            got: values.len(),
        });
    }
    Ok(values)
}
