//! A small sequential network substrate with hand-written backward
//! passes.
//!
//! Tensors are row-major `f64`. Dense weights are stored input-major
//! (`[inputs, outputs]`) so that sparse inputs, which dominate occupancy
//! images, cost one contiguous row update per non-zero input.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{domain, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(domain(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// `0.1 x + 0.9 (softplus(x) - ln 2)`: smooth, leaky, zero at zero.
    SmoothLeaky,
    Identity,
}

const LEAK: f64 = 0.1;

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::SmoothLeaky => LEAK * x + (1.0 - LEAK) * (softplus(x) - std::f64::consts::LN_2),
            Activation::Identity => x,
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::SmoothLeaky => LEAK + (1.0 - LEAK) * sigmoid(x),
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize },
    /// Stride-2 convolution, kernel 4, padding 1: halves H and W.
    Conv2d { in_ch: usize, out_ch: usize },
    /// Stride-2 transposed convolution, kernel 4, padding 1: doubles H and W.
    ConvTranspose2d { in_ch: usize, out_ch: usize },
    Act(Activation),
    Reshape(Vec<usize>),
}

const KERNEL: usize = 4;
const PAD: i64 = 1;

impl LayerSpec {
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let n: usize = input.iter().product();
        match self {
            LayerSpec::Dense { inputs, outputs } => {
                if n != *inputs {
                    return Err(domain(format!("dense expects {inputs} inputs, got shape {input:?}")));
                }
                Ok(vec![*outputs])
            }
            LayerSpec::Conv2d { in_ch, out_ch } => match input {
                [c, h, w] if c == in_ch && h % 2 == 0 && w % 2 == 0 && *h >= 2 && *w >= 2 => {
                    Ok(vec![*out_ch, h / 2, w / 2])
                }
                _ => Err(domain(format!("conv2d({in_ch}->{out_ch}) cannot take shape {input:?}"))),
            },
            LayerSpec::ConvTranspose2d { in_ch, out_ch } => match input {
                [c, h, w] if c == in_ch => Ok(vec![*out_ch, h * 2, w * 2]),
                _ => Err(domain(format!("conv_transpose2d({in_ch}->{out_ch}) cannot take shape {input:?}"))),
            },
            LayerSpec::Act(_) => Ok(input.to_vec()),
            LayerSpec::Reshape(shape) => {
                if shape.iter().product::<usize>() != n {
                    return Err(domain(format!("cannot reshape {input:?} to {shape:?}")));
                }
                Ok(shape.clone())
            }
        }
    }

    fn param_shapes(&self) -> Vec<Vec<usize>> {
        match self {
            LayerSpec::Dense { inputs, outputs } => vec![vec![*inputs, *outputs], vec![*outputs]],
            LayerSpec::Conv2d { in_ch, out_ch } => vec![vec![*out_ch, *in_ch, KERNEL, KERNEL], vec![*out_ch]],
            LayerSpec::ConvTranspose2d { in_ch, out_ch } => {
                vec![vec![*in_ch, *out_ch, KERNEL, KERNEL], vec![*out_ch]]
            }
            LayerSpec::Act(_) | LayerSpec::Reshape(_) => Vec::new(),
        }
    }

    fn fan_in_out(&self) -> (usize, usize) {
        match self {
            LayerSpec::Dense { inputs, outputs } => (*inputs, *outputs),
            LayerSpec::Conv2d { in_ch, out_ch } | LayerSpec::ConvTranspose2d { in_ch, out_ch } => {
                (in_ch * KERNEL * KERNEL, out_ch * KERNEL * KERNEL)
            }
            _ => (1, 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    spec: LayerSpec,
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    /// Weight then bias, empty for parameter-free layers.
    params: Vec<Tensor>,
}

/// Per-parameter-tensor gradients aligned with [`NetworkModel::params`].
pub type Grads = Vec<Tensor>;

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    seed: u64,
    /// Bumped on every parameter update; caches from older generations are
    /// rejected by `backward`.
    generation: u64,
}

/// Activation record of one forward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    generation: u64,
    inputs: Vec<Tensor>,
}

impl NetworkModel {
    pub fn new(input_shape: &[usize], specs: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            let out_shape = spec.output_shape(&shape)?;
            let (fan_in, fan_out) = spec.fan_in_out();
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let params = spec
                .param_shapes()
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let mut t = Tensor::zeros(s);
                    if i == 0 {
                        for v in &mut t.data {
                            *v = rng.random_range(-limit..limit);
                        }
                    }
                    t
                })
                .collect();
            layers.push(Layer {
                spec,
                in_shape: shape,
                out_shape: out_shape.clone(),
                params,
            });
            shape = out_shape;
        }
        Ok(NetworkModel {
            input_shape: input_shape.to_vec(),
            layers,
            seed,
            generation: 0,
        })
    }

    /// Multi-layer perceptron with smooth-leaky hidden activations and a
    /// linear output, optionally reshaped.
    pub fn mlp(input_shape: &[usize], hidden: &[usize], outputs: usize, out_shape: Option<&[usize]>, seed: u64) -> Result<Self> {
        let mut specs = Vec::new();
        let mut width: usize = input_shape.iter().product();
        for &h in hidden {
            specs.push(LayerSpec::Dense { inputs: width, outputs: h });
            specs.push(LayerSpec::Act(Activation::SmoothLeaky));
            width = h;
        }
        specs.push(LayerSpec::Dense { inputs: width, outputs });
        if let Some(s) = out_shape {
            specs.push(LayerSpec::Reshape(s.to_vec()));
        }
        NetworkModel::new(input_shape, specs, seed)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.layers
            .last()
            .map(|l| l.out_shape.as_slice())
            .unwrap_or(&self.input_shape)
    }

    pub fn specs(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().map(|l| &l.spec)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| l.params.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.generation += 1;
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut())
    }

    pub fn param_count(&self) -> usize {
        self.params().map(Tensor::len).sum()
    }

    pub fn zero_grads(&self) -> Grads {
        self.params().map(|t| Tensor::zeros(&t.shape)).collect()
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.len() != self.input_shape.iter().product::<usize>() {
            return Err(domain(format!(
                "input of shape {:?} does not match model input {:?}",
                input.shape, self.input_shape
            )));
        }
        Ok(())
    }

    /// Forward pass keeping the activations needed by [`Self::backward`].
    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, Cache)> {
        self.check_input(input)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut x = Tensor {
            shape: self.input_shape.clone(),
            data: input.data.clone(),
        };
        for layer in &self.layers {
            let y = layer_forward(layer, &x);
            inputs.push(x);
            x = y;
        }
        Ok((
            x,
            Cache {
                generation: self.generation,
                inputs,
            },
        ))
    }

    /// Forward pass without an activation record.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        self.predict_slice(&input.data)
    }

    pub fn predict_slice(&self, input: &[f64]) -> Result<Tensor> {
        if input.len() != self.input_shape.iter().product::<usize>() {
            return Err(domain("input length does not match model"));
        }
        let Some((first, rest)) = self.layers.split_first() else {
            return Tensor::from_vec(&self.input_shape, input.to_vec());
        };
        let mut x = layer_forward_slice(first, input);
        for layer in rest {
            x = layer_forward(layer, &x);
        }
        Ok(x)
    }

    /// Accumulates parameter gradients into `grads` for the scalar loss
    /// whose gradient w.r.t. the output is `out_grad`. Returns the gradient
    /// w.r.t. the input when `want_input_grad` is set.
    pub fn backward(
        &self,
        cache: &Cache,
        out_grad: &Tensor,
        grads: &mut Grads,
        want_input_grad: bool,
    ) -> Result<Option<Tensor>> {
        if cache.generation != self.generation || cache.inputs.len() != self.layers.len() {
            return Err(domain("activation cache does not belong to this model state"));
        }
        if out_grad.len() != self.output_shape().iter().product::<usize>() {
            return Err(domain("output gradient has the wrong size"));
        }
        if grads.len() != self.params().count() {
            return Err(domain("gradient buffer does not match parameters"));
        }
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut k = 0;
        for l in &self.layers {
            offsets.push(k);
            k += l.params.len();
        }
        let mut g = out_grad.data.clone();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let need_dx = want_input_grad || li > 0;
            let pg = &mut grads[offsets[li]..offsets[li] + layer.params.len()];
            g = layer_backward(layer, &cache.inputs[li].data, &g, pg, need_dx);
        }
        Ok(want_input_grad.then(|| Tensor {
            shape: self.input_shape.clone(),
            data: g,
        }))
    }
}

// ---------------------------------------------------------------------------
// Vector kernels
// ---------------------------------------------------------------------------

// The wide variants run the same per-element operations in the same order,
// so results are bit-identical with or without AVX2.

#[inline(always)]
fn axpy_body(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Four interleaved partial sums, combined pairwise.
#[inline(always)]
fn dot_body(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[2]) + (acc[1] + acc[3]) + tail
}

#[cfg(target_arch = "x86_64")]
mod wide {
    #[target_feature(enable = "avx2")]
    pub unsafe fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
        super::axpy_body(y, a, x)
    }

    #[target_feature(enable = "avx2")]
    pub unsafe fn dot(a: &[f64], b: &[f64]) -> f64 {
        super::dot_body(a, b)
    }
}

#[cfg(target_arch = "x86_64")]
fn has_avx2() -> bool {
    use std::sync::OnceLock;
    static AVX2: OnceLock<bool> = OnceLock::new();
    *AVX2.get_or_init(|| std::arch::is_x86_feature_detected!("avx2"))
}

/// `y += a * x`.
#[inline]
pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the CPU supports AVX2.
        return unsafe { wide::axpy(y, a, x) };
    }
    axpy_body(y, a, x)
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    #[cfg(target_arch = "x86_64")]
    if has_avx2() {
        // SAFETY: the CPU supports AVX2.
        return unsafe { wide::dot(a, b) };
    }
    dot_body(a, b)
}

/// Activation record of a batched forward pass.
#[derive(Debug, Clone)]
pub struct BatchCache {
    generation: u64,
    /// Per layer, per example.
    inputs: Vec<Vec<Vec<f64>>>,
}

/// Output columns processed together by the batched dense kernels, sized so
/// that one block of every example's activations stays in cache.
const DENSE_BLOCK: usize = 512;

fn dense_forward_batch(w: &[f64], b: &[f64], xs: &[Vec<f64>], outputs: usize) -> Vec<Vec<f64>> {
    let mut ys: Vec<Vec<f64>> = xs.iter().map(|_| b.to_vec()).collect();
    let inputs = w.len() / outputs;
    for lo in (0..outputs).step_by(DENSE_BLOCK) {
        let hi = (lo + DENSE_BLOCK).min(outputs);
        for i in 0..inputs {
            let row = &w[i * outputs + lo..i * outputs + hi];
            for (x, y) in xs.iter().zip(ys.iter_mut()) {
                let xi = x[i];
                if xi != 0.0 {
                    axpy(&mut y[lo..hi], xi, row);
                }
            }
        }
    }
    ys
}

fn dense_backward_batch(
    w: &[f64],
    xs: &[Vec<f64>],
    gs: &[Vec<f64>],
    pg: &mut [Tensor],
    outputs: usize,
    need_dx: bool,
) -> Vec<Vec<f64>> {
    let inputs = w.len() / outputs;
    let (gw, gb) = pg.split_at_mut(1);
    for g in gs {
        for (b, go) in gb[0].data.iter_mut().zip(g) {
            *b += go;
        }
    }
    let gw = &mut gw[0].data;
    let mut dxs: Vec<Vec<f64>> = if need_dx { xs.iter().map(|_| vec![0.0; inputs]).collect() } else { Vec::new() };
    for lo in (0..outputs).step_by(DENSE_BLOCK) {
        let hi = (lo + DENSE_BLOCK).min(outputs);
        for i in 0..inputs {
            let grow = &mut gw[i * outputs + lo..i * outputs + hi];
            for (x, g) in xs.iter().zip(gs) {
                let xi = x[i];
                if xi != 0.0 {
                    axpy(grow, xi, &g[lo..hi]);
                }
            }
            if need_dx {
                let row = &w[i * outputs + lo..i * outputs + hi];
                for (dx, g) in dxs.iter_mut().zip(gs) {
                    dx[i] += dot(row, &g[lo..hi]);
                }
            }
        }
    }
    dxs
}

impl NetworkModel {
    /// Forward pass over a batch; agrees with [`Self::forward`] per example
    /// up to summation order.
    pub fn forward_batch(&self, inputs: &[&[f64]]) -> Result<(Vec<Vec<f64>>, BatchCache)> {
        let n: usize = self.input_shape.iter().product();
        if inputs.iter().any(|x| x.len() != n) {
            return Err(domain("batch input length does not match model"));
        }
        let mut cached = Vec::with_capacity(self.layers.len());
        let mut xs: Vec<Vec<f64>> = inputs.iter().map(|x| x.to_vec()).collect();
        for layer in &self.layers {
            let ys = match &layer.spec {
                LayerSpec::Dense { outputs, .. } => {
                    dense_forward_batch(&layer.params[0].data, &layer.params[1].data, &xs, *outputs)
                }
                _ => xs.iter().map(|x| layer_forward_slice(layer, x).data).collect(),
            };
            cached.push(xs);
            xs = ys;
        }
        Ok((
            xs,
            BatchCache {
                generation: self.generation,
                inputs: cached,
            },
        ))
    }

    /// Batched counterpart of [`Self::backward`]; gradients of all examples
    /// are summed into `grads`.
    pub fn backward_batch(
        &self,
        cache: &BatchCache,
        out_grads: &[Vec<f64>],
        grads: &mut Grads,
        want_input_grad: bool,
    ) -> Result<Option<Vec<Vec<f64>>>> {
        if cache.generation != self.generation || cache.inputs.len() != self.layers.len() {
            return Err(domain("activation cache does not belong to this model state"));
        }
        let batch = cache.inputs.first().map_or(out_grads.len(), Vec::len);
        let n_out: usize = self.output_shape().iter().product();
        if out_grads.len() != batch || out_grads.iter().any(|g| g.len() != n_out) {
            return Err(domain("output gradients do not match the batch"));
        }
        if grads.len() != self.params().count() {
            return Err(domain("gradient buffer does not match parameters"));
        }
        let mut k = self.params().count();
        let mut gs: Vec<Vec<f64>> = out_grads.to_vec();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            k -= layer.params.len();
            let need_dx = want_input_grad || li > 0;
            let pg = &mut grads[k..k + layer.params.len()];
            let xs = &cache.inputs[li];
            gs = match &layer.spec {
                LayerSpec::Dense { outputs, .. } => {
                    dense_backward_batch(&layer.params[0].data, xs, &gs, pg, *outputs, need_dx)
                }
                _ => xs
                    .iter()
                    .zip(&gs)
                    .map(|(x, g)| layer_backward(layer, x, g, pg, need_dx))
                    .collect(),
            };
        }
        Ok(want_input_grad.then_some(gs))
    }
}

fn layer_forward(layer: &Layer, x: &Tensor) -> Tensor {
    layer_forward_slice(layer, &x.data)
}

fn layer_forward_slice(layer: &Layer, x: &[f64]) -> Tensor {
    let data = match &layer.spec {
        LayerSpec::Dense { outputs, .. } => {
            let w = &layer.params[0].data;
            let mut y = layer.params[1].data.clone();
            for (i, &xi) in x.iter().enumerate() {
                if xi != 0.0 {
                    axpy(&mut y, xi, &w[i * outputs..(i + 1) * outputs]);
                }
            }
            y
        }
        LayerSpec::Conv2d { in_ch, out_ch } => {
            conv_forward(x, &layer.in_shape, &layer.params[0].data, &layer.params[1].data, *in_ch, *out_ch)
        }
        LayerSpec::ConvTranspose2d { in_ch, out_ch } => {
            convt_forward(x, &layer.in_shape, &layer.params[0].data, &layer.params[1].data, *in_ch, *out_ch)
        }
        LayerSpec::Act(a) => x.iter().map(|&v| a.apply(v)).collect(),
        LayerSpec::Reshape(_) => x.to_vec(),
    };
    Tensor {
        shape: layer.out_shape.clone(),
        data,
    }
}

/// Returns the input gradient (empty when `need_dx` is false).
fn layer_backward(layer: &Layer, x: &[f64], g: &[f64], pg: &mut [Tensor], need_dx: bool) -> Vec<f64> {
    match &layer.spec {
        LayerSpec::Dense { outputs, .. } => {
            let w = &layer.params[0].data;
            let (gw, gb) = pg.split_at_mut(1);
            for (b, go) in gb[0].data.iter_mut().zip(g) {
                *b += go;
            }
            let gw = &mut gw[0].data;
            let mut dx = if need_dx { vec![0.0; x.len()] } else { Vec::new() };
            for (i, &xi) in x.iter().enumerate() {
                if xi != 0.0 {
                    axpy(&mut gw[i * outputs..(i + 1) * outputs], xi, g);
                }
                if need_dx {
                    dx[i] = dot(&w[i * outputs..(i + 1) * outputs], g);
                }
            }
            dx
        }
        LayerSpec::Conv2d { in_ch, out_ch } => {
            conv_backward(x, &layer.in_shape, &layer.params[0].data, g, pg, *in_ch, *out_ch, need_dx)
        }
        LayerSpec::ConvTranspose2d { in_ch, out_ch } => {
            convt_backward(x, &layer.in_shape, &layer.params[0].data, g, pg, *in_ch, *out_ch, need_dx)
        }
        LayerSpec::Act(a) => x.iter().zip(g).map(|(&xi, &gi)| gi * a.derivative(xi)).collect(),
        LayerSpec::Reshape(_) => g.to_vec(),
    }
}

fn conv_forward(x: &[f64], in_shape: &[usize], w: &[f64], b: &[f64], in_ch: usize, out_ch: usize) -> Vec<f64> {
    let (h, wd) = (in_shape[1] as i64, in_shape[2] as i64);
    let (oh, ow) = (h / 2, wd / 2);
    let mut y = vec![0.0; out_ch * (oh * ow) as usize];
    for o in 0..out_ch {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b[o];
                for c in 0..in_ch {
                    for ky in 0..KERNEL as i64 {
                        let iy = 2 * oy - PAD + ky;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        for kx in 0..KERNEL as i64 {
                            let ix = 2 * ox - PAD + kx;
                            if ix < 0 || ix >= wd {
                                continue;
                            }
                            let wi = ((o * in_ch + c) * KERNEL + ky as usize) * KERNEL + kx as usize;
                            acc += w[wi] * x[(c as i64 * h * wd + iy * wd + ix) as usize];
                        }
                    }
                }
                y[(o as i64 * oh * ow + oy * ow + ox) as usize] = acc;
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f64],
    in_shape: &[usize],
    w: &[f64],
    g: &[f64],
    pg: &mut [Tensor],
    in_ch: usize,
    out_ch: usize,
    need_dx: bool,
) -> Vec<f64> {
    let (h, wd) = (in_shape[1] as i64, in_shape[2] as i64);
    let (oh, ow) = (h / 2, wd / 2);
    let mut dx = if need_dx { vec![0.0; x.len()] } else { Vec::new() };
    let (gw, gb) = pg.split_at_mut(1);
    for o in 0..out_ch {
        for oy in 0..oh {
            for ox in 0..ow {
                let go = g[(o as i64 * oh * ow + oy * ow + ox) as usize];
                gb[0].data[o] += go;
                if go == 0.0 {
                    continue;
                }
                for c in 0..in_ch {
                    for ky in 0..KERNEL as i64 {
                        let iy = 2 * oy - PAD + ky;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        for kx in 0..KERNEL as i64 {
                            let ix = 2 * ox - PAD + kx;
                            if ix < 0 || ix >= wd {
                                continue;
                            }
                            let wi = ((o * in_ch + c) * KERNEL + ky as usize) * KERNEL + kx as usize;
                            let xi = (c as i64 * h * wd + iy * wd + ix) as usize;
                            gw[0].data[wi] += go * x[xi];
                            if need_dx {
                                dx[xi] += go * w[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn convt_forward(x: &[f64], in_shape: &[usize], w: &[f64], b: &[f64], in_ch: usize, out_ch: usize) -> Vec<f64> {
    let (h, wd) = (in_shape[1] as i64, in_shape[2] as i64);
    let (oh, ow) = (2 * h, 2 * wd);
    let mut y = vec![0.0; out_ch * (oh * ow) as usize];
    for o in 0..out_ch {
        y[o * (oh * ow) as usize..(o + 1) * (oh * ow) as usize].fill(b[o]);
    }
    for c in 0..in_ch {
        for iy in 0..h {
            for ix in 0..wd {
                let xv = x[(c as i64 * h * wd + iy * wd + ix) as usize];
                if xv == 0.0 {
                    continue;
                }
                for o in 0..out_ch {
                    for ky in 0..KERNEL as i64 {
                        let oy = 2 * iy - PAD + ky;
                        if oy < 0 || oy >= oh {
                            continue;
                        }
                        for kx in 0..KERNEL as i64 {
                            let ox = 2 * ix - PAD + kx;
                            if ox < 0 || ox >= ow {
                                continue;
                            }
                            let wi = ((c * out_ch + o) * KERNEL + ky as usize) * KERNEL + kx as usize;
                            y[(o as i64 * oh * ow + oy * ow + ox) as usize] += w[wi] * xv;
                        }
                    }
                }
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn convt_backward(
    x: &[f64],
    in_shape: &[usize],
    w: &[f64],
    g: &[f64],
    pg: &mut [Tensor],
    in_ch: usize,
    out_ch: usize,
    need_dx: bool,
) -> Vec<f64> {
    let (h, wd) = (in_shape[1] as i64, in_shape[2] as i64);
    let (oh, ow) = (2 * h, 2 * wd);
    let mut dx = if need_dx { vec![0.0; x.len()] } else { Vec::new() };
    let (gw, gb) = pg.split_at_mut(1);
    for o in 0..out_ch {
        let plane = &g[o * (oh * ow) as usize..(o + 1) * (oh * ow) as usize];
        gb[0].data[o] += plane.iter().sum::<f64>();
    }
    for c in 0..in_ch {
        for iy in 0..h {
            for ix in 0..wd {
                let xi = (c as i64 * h * wd + iy * wd + ix) as usize;
                let xv = x[xi];
                let mut acc = 0.0;
                for o in 0..out_ch {
                    for ky in 0..KERNEL as i64 {
                        let oy = 2 * iy - PAD + ky;
                        if oy < 0 || oy >= oh {
                            continue;
                        }
                        for kx in 0..KERNEL as i64 {
                            let ox = 2 * ix - PAD + kx;
                            if ox < 0 || ox >= ow {
                                continue;
                            }
                            let wi = ((c * out_ch + o) * KERNEL + ky as usize) * KERNEL + kx as usize;
                            let go = g[(o as i64 * oh * ow + oy * ow + ox) as usize];
                            gw[0].data[wi] += go * xv;
                            acc += go * w[wi];
                        }
                    }
                }
                if need_dx {
                    dx[xi] = acc;
                }
            }
        }
    }
    dx
}

pub fn add_grads(acc: &mut Grads, other: &Grads) {
    for (a, b) in acc.iter_mut().zip(other) {
        for (x, y) in a.data.iter_mut().zip(&b.data) {
            *x += y;
        }
    }
}

pub fn scale_grads(g: &mut Grads, k: f64) {
    for t in g {
        for v in &mut t.data {
            *v *= k;
        }
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adaptive-moment gradient descent state for one model.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    pub step_count: u64,
}

impl OptimizerState {
    pub fn new(model: &NetworkModel, learning_rate: f64) -> Self {
        OptimizerState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first: model.zero_grads(),
            second: model.zero_grads(),
            step_count: 0,
        }
    }

    /// Applies one update. Non-finite or mis-shaped gradients are rejected
    /// before anything changes.
    pub fn step(&mut self, model: &mut NetworkModel, grads: &Grads) -> Result<()> {
        if grads.len() != self.first.len()
            || grads.iter().zip(&self.first).any(|(g, m)| g.shape != m.shape)
        {
            return Err(domain("gradients do not match optimizer state"));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("non-finite gradient; update rejected".into()));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let lr = self.learning_rate;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, g), m), v) in model
            .params_mut()
            .zip(grads)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                let mi = b1 * m.data[i] + (1.0 - b1) * gi;
                let vi = b2 * v.data[i] + (1.0 - b2) * gi * gi;
                m.data[i] = mi;
                v.data[i] = vi;
                p.data[i] -= lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Anything exposing a flat list of parameter tensors.
pub trait ParamSet {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;
}

impl ParamSet for NetworkModel {
    fn tensors(&self) -> Vec<&Tensor> {
        self.params().collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.params_mut().collect()
    }
}

/// Largest relative disagreement between analytic gradients and central
/// differences over every parameter:
/// `|a - n| / (|a| + |n| + 1e-12)`.
///
/// `eval` returns the loss and its analytic gradient, aligned with
/// `ParamSet::tensors`.
pub fn grad_check_with<P, F>(params: &mut P, h: f64, eval: F) -> Result<f64>
where
    P: ParamSet,
    F: Fn(&P) -> Result<(f64, Grads)>,
{
    if !(h > 0.0) {
        return Err(domain("finite-difference step must be positive"));
    }
    let (loss0, analytic) = eval(params)?;
    if !loss0.is_finite() {
        return Err(Error::Numeric("loss is not finite".into()));
    }
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    if analytic.len() != sizes.len() || analytic.iter().zip(&sizes).any(|(g, &n)| g.len() != n) {
        return Err(domain("analytic gradient does not match parameters"));
    }
    let mut worst: f64 = 0.0;
    for (ti, &n) in sizes.iter().enumerate() {
        for i in 0..n {
            let orig = params.tensors()[ti].data[i];
            params.tensors_mut()[ti].data[i] = orig + h;
            let plus = eval(params)?.0;
            params.tensors_mut()[ti].data[i] = orig - h;
            let minus = eval(params)?.0;
            params.tensors_mut()[ti].data[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric("loss is not finite under perturbation".into()));
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[ti].data[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Gradient check of `loss_fn(model(input))`; `loss_fn` returns the loss
/// and its gradient w.r.t. the model output.
pub fn grad_check<L>(model: &mut NetworkModel, loss_fn: L, input: &Tensor, h: f64) -> Result<f64>
where
    L: Fn(&Tensor) -> (f64, Tensor),
{
    grad_check_with(model, h, |m| {
        let (out, cache) = m.forward(input)?;
        let (loss, g) = loss_fn(&out);
        let mut grads = m.zero_grads();
        m.backward(&cache, &g, &mut grads, false)?;
        Ok((loss, grads))
    })
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

const NET_MAGIC: &[u8; 8] = b"CINFNET1";

fn put_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn get_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_bits(get_u64(r)?))
}

pub(crate) fn put_f64(w: &mut impl Write, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

impl NetworkModel {
    /// Layout: magic `CINFNET1`, seed, input rank and extents, layer count,
    /// then per layer a tag with its arguments, then every parameter value
    /// as little-endian f64 in `params()` order. All integers are u64 LE.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(NET_MAGIC)?;
        put_u64(w, self.seed)?;
        put_u64(w, self.input_shape.len() as u64)?;
        for &d in &self.input_shape {
            put_u64(w, d as u64)?;
        }
        put_u64(w, self.layers.len() as u64)?;
        for l in &self.layers {
            match &l.spec {
                LayerSpec::Dense { inputs, outputs } => {
                    put_u64(w, 1)?;
                    put_u64(w, *inputs as u64)?;
                    put_u64(w, *outputs as u64)?;
                }
                LayerSpec::Conv2d { in_ch, out_ch } => {
                    put_u64(w, 2)?;
                    put_u64(w, *in_ch as u64)?;
                    put_u64(w, *out_ch as u64)?;
                }
                LayerSpec::ConvTranspose2d { in_ch, out_ch } => {
                    put_u64(w, 3)?;
                    put_u64(w, *in_ch as u64)?;
                    put_u64(w, *out_ch as u64)?;
                }
                LayerSpec::Act(a) => {
                    put_u64(w, 4)?;
                    put_u64(w, matches!(a, Activation::SmoothLeaky) as u64)?;
                }
                LayerSpec::Reshape(shape) => {
                    put_u64(w, 5)?;
                    put_u64(w, shape.len() as u64)?;
                    for &d in shape {
                        put_u64(w, d as u64)?;
                    }
                }
            }
        }
        for p in self.params() {
            for &v in &p.data {
                put_f64(w, v)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
        if &magic != NET_MAGIC {
            return Err(Error::Format("not a network checkpoint".into()));
        }
        let seed = get_u64(r)?;
        let rank = get_u64(r)? as usize;
        if rank > 8 {
            return Err(Error::Format("implausible input rank".into()));
        }
        let input_shape: Vec<usize> = (0..rank).map(|_| get_u64(r).map(|v| v as usize)).collect::<Result<_>>()?;
        let n_layers = get_u64(r)? as usize;
        let mut specs = Vec::with_capacity(n_layers.min(1024));
        for _ in 0..n_layers {
            let spec = match get_u64(r)? {
                1 => LayerSpec::Dense {
                    inputs: get_u64(r)? as usize,
                    outputs: get_u64(r)? as usize,
                },
                2 => LayerSpec::Conv2d {
                    in_ch: get_u64(r)? as usize,
                    out_ch: get_u64(r)? as usize,
                },
                3 => LayerSpec::ConvTranspose2d {
                    in_ch: get_u64(r)? as usize,
                    out_ch: get_u64(r)? as usize,
                },
                4 => LayerSpec::Act(if get_u64(r)? == 1 {
                    Activation::SmoothLeaky
                } else {
                    Activation::Identity
                }),
                5 => {
                    let k = get_u64(r)? as usize;
                    if k > 8 {
                        return Err(Error::Format("implausible reshape rank".into()));
                    }
                    LayerSpec::Reshape((0..k).map(|_| get_u64(r).map(|v| v as usize)).collect::<Result<_>>()?)
                }
                t => return Err(Error::Format(format!("unknown layer tag {t}"))),
            };
            specs.push(spec);
        }
        let mut model = NetworkModel::new(&input_shape, specs, seed)?;
        for p in model.params_mut() {
            for v in &mut p.data {
                *v = get_f64(r)?;
            }
        }
        model.generation = 0;
        Ok(model)
    }

    /// Bitwise parameter equality, ignoring the update counter.
    pub fn same_parameters(&self, other: &NetworkModel) -> bool {
        self.input_shape == other.input_shape
            && self.layers.len() == other.layers.len()
            && self
                .params()
                .zip(other.params())
                .all(|(a, b)| a.shape == b.shape && a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sum_loss(out: &Tensor) -> (f64, Tensor) {
        (
            out.data.iter().sum(),
            Tensor {
                shape: out.shape.clone(),
                data: vec![1.0; out.len()],
            },
        )
    }

    #[test]
    fn identity_and_zero_dense() {
        let mut m = NetworkModel::new(&[3], vec![LayerSpec::Dense { inputs: 3, outputs: 3 }], 1).unwrap();
        {
            let mut ps: Vec<&mut Tensor> = m.params_mut().collect();
            ps[0].data = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        }
        let x = Tensor::from_vec(&[3], vec![0.5, -2.0, 3.0]).unwrap();
        assert_eq!(m.predict(&x).unwrap().data, x.data);
        for p in m.params_mut() {
            p.data.fill(0.0);
        }
        assert_eq!(m.predict(&x).unwrap().data, vec![0.0; 3]);
    }

    #[test]
    fn deterministic_init_and_forward() {
        let a = NetworkModel::mlp(&[5], &[4], 2, None, 9).unwrap();
        let b = NetworkModel::mlp(&[5], &[4], 2, None, 9).unwrap();
        let x = Tensor::from_vec(&[5], vec![0.1, 0.2, -0.3, 0.0, 1.0]).unwrap();
        let ya = a.forward(&x).unwrap().0;
        let yb = b.forward(&x).unwrap().0;
        assert_eq!(ya, yb);
        assert_eq!(ya, a.predict(&x).unwrap());
    }

    #[test]
    fn dense_analytic_gradients() {
        let m = NetworkModel::new(&[3], vec![LayerSpec::Dense { inputs: 3, outputs: 2 }], 4).unwrap();
        let x = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let (y, cache) = m.forward(&x).unwrap();
        let (_, g) = sum_loss(&y);
        let mut grads = m.zero_grads();
        m.backward(&cache, &g, &mut grads, false).unwrap();
        assert_eq!(grads[1].data, vec![1.0, 1.0]);
        // weight is [inputs, outputs]: every output column gets x
        assert_eq!(grads[0].data, vec![1.0, 1.0, -2.0, -2.0, 0.5, 0.5]);
    }

    #[test]
    fn shape_mismatch_and_stale_cache() {
        let mut m = NetworkModel::mlp(&[4], &[3], 2, None, 0).unwrap();
        assert!(m.forward(&Tensor::zeros(&[5])).is_err());
        let (_, cache) = m.forward(&Tensor::zeros(&[4])).unwrap();
        let g = m.zero_grads();
        let mut opt = OptimizerState::new(&m, 1e-3);
        opt.step(&mut m, &g).unwrap();
        let mut grads = m.zero_grads();
        assert!(m.backward(&cache, &Tensor::zeros(&[2]), &mut grads, false).is_err());
    }

    #[test]
    fn optimizer_basics() {
        let mut m = NetworkModel::new(&[1], vec![LayerSpec::Dense { inputs: 1, outputs: 1 }], 0).unwrap();
        let before = m.clone();
        let mut opt = OptimizerState::new(&m, 1e-3);
        let zeros = m.zero_grads();
        opt.step(&mut m, &zeros).unwrap();
        assert!(m.same_parameters(&before));
        assert_eq!(opt.step_count, 1);

        let w0 = m.params().next().unwrap().data[0];
        let mut g = m.zero_grads();
        g[0].data[0] = 3.0;
        opt.step(&mut m, &g).unwrap();
        assert!(m.params().next().unwrap().data[0] < w0);

        g[0].data[0] = f64::NAN;
        let snapshot = m.clone();
        assert!(matches!(opt.step(&mut m, &g), Err(Error::Numeric(_))));
        assert!(m.same_parameters(&snapshot));
    }

    #[test]
    fn adam_toy_quadratic() {
        // one bias parameter, loss (theta - 3)^2
        let mut m = NetworkModel::new(&[1], vec![LayerSpec::Dense { inputs: 1, outputs: 1 }], 0).unwrap();
        for p in m.params_mut() {
            p.data.fill(0.0);
        }
        let mut opt = OptimizerState::new(&m, 0.1);
        for _ in 0..500 {
            let theta = m.params().nth(1).unwrap().data[0];
            let mut g = m.zero_grads();
            g[1].data[0] = 2.0 * (theta - 3.0);
            opt.step(&mut m, &g).unwrap();
        }
        let theta = m.params().nth(1).unwrap().data[0];
        assert!((theta - 3.0).abs() < 1e-2, "theta = {theta}");
    }

    #[test]
    fn conv_shape_algebra() {
        let m = NetworkModel::new(
            &[3, 8, 6],
            vec![
                LayerSpec::Conv2d { in_ch: 3, out_ch: 5 },
                LayerSpec::ConvTranspose2d { in_ch: 5, out_ch: 3 },
            ],
            2,
        )
        .unwrap();
        assert_eq!(m.output_shape(), &[3, 8, 6]);
        assert!(NetworkModel::new(&[3, 7, 6], vec![LayerSpec::Conv2d { in_ch: 3, out_ch: 5 }], 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = NetworkModel::new(
            &[2, 4, 4],
            vec![
                LayerSpec::Conv2d { in_ch: 2, out_ch: 3 },
                LayerSpec::Act(Activation::SmoothLeaky),
                LayerSpec::Reshape(vec![12]),
                LayerSpec::Dense { inputs: 12, outputs: 5 },
                LayerSpec::Act(Activation::Identity),
            ],
            17,
        )
        .unwrap();
        let mut bytes = Vec::new();
        m.write_to(&mut bytes).unwrap();
        let back = NetworkModel::read_from(&mut bytes.as_slice()).unwrap();
        assert!(back.same_parameters(&m));
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(bytes, again);
        assert!(NetworkModel::read_from(&mut &bytes[..20]).is_err());
        assert!(NetworkModel::read_from(&mut &b"NOTANETWORKFILE!"[..]).is_err());
    }

    #[test]
    fn batch_matches_single() {
        let m = NetworkModel::new(
            &[2, 8, 8],
            vec![
                LayerSpec::Conv2d { in_ch: 2, out_ch: 3 },
                LayerSpec::Act(Activation::SmoothLeaky),
                LayerSpec::Reshape(vec![48]),
                LayerSpec::Dense { inputs: 48, outputs: 700 },
                LayerSpec::Act(Activation::SmoothLeaky),
                LayerSpec::Dense { inputs: 700, outputs: 5 },
            ],
            9,
        )
        .unwrap();
        let xs: Vec<Vec<f64>> = (0..4)
            .map(|k| (0..128).map(|i| if i % 3 == k % 3 { 0.0 } else { ((i * (k + 1)) as f64).sin() }).collect())
            .collect();
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let (ys, bc) = m.forward_batch(&refs).unwrap();
        let gs: Vec<Vec<f64>> = (0..4).map(|k| (0..5).map(|j| (j + k) as f64 - 2.0).collect()).collect();
        let mut gb = m.zero_grads();
        let dxb = m.backward_batch(&bc, &gs, &mut gb, true).unwrap().unwrap();
        let mut g1 = m.zero_grads();
        for k in 0..4 {
            let (y, c) = m.forward(&Tensor::from_vec(&[2, 8, 8], xs[k].clone()).unwrap()).unwrap();
            for (a, b) in y.data.iter().zip(&ys[k]) {
                assert!((a - b).abs() < 1e-12);
            }
            let dx = m.backward(&c, &Tensor::from_vec(&[5], gs[k].clone()).unwrap(), &mut g1, true).unwrap().unwrap();
            for (a, b) in dx.data.iter().zip(&dxb[k]) {
                assert!((a - b).abs() < 1e-10);
            }
        }
        for (a, b) in g1.iter().zip(&gb) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }
}
