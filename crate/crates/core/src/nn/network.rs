//! Declarative layer stacks with reverse-mode gradients.
//!
//! Activations are `rows x dim` matrices. Rows are grouped into
//! [`Segment`]s, each one time sequence; only time-delay layers look across
//! rows, and they never cross a segment boundary.

use rand::Rng;

use super::ops::{self, ConvGeom, PoolGeom, Segment};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    FullyConnected { input: usize, output: usize },
    Conv2D(ConvGeom),
    MaxPool2D(PoolGeom),
    TimeDelay { input: usize, output: usize, offsets: Vec<i32> },
    PNorm { input: usize, output: usize, p: f64 },
    ReLU { dim: usize },
    Softmax { dim: usize },
    /// Appends auxiliary input `slot` to every row.
    Concat { input: usize, extra: usize, slot: usize },
    LengthNorm { dim: usize },
}

impl LayerSpec {
    pub fn input_dim(&self) -> usize {
        match self {
            LayerSpec::FullyConnected { input, .. }
            | LayerSpec::TimeDelay { input, .. }
            | LayerSpec::PNorm { input, .. }
            | LayerSpec::Concat { input, .. } => *input,
            LayerSpec::Conv2D(g) => g.in_size(),
            LayerSpec::MaxPool2D(g) => g.in_size(),
            LayerSpec::ReLU { dim } | LayerSpec::Softmax { dim } | LayerSpec::LengthNorm { dim } => *dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            LayerSpec::FullyConnected { output, .. }
            | LayerSpec::TimeDelay { output, .. }
            | LayerSpec::PNorm { output, .. } => *output,
            LayerSpec::Concat { input, extra, .. } => input + extra,
            LayerSpec::Conv2D(g) => g.out_size(),
            LayerSpec::MaxPool2D(g) => g.out_size(),
            LayerSpec::ReLU { dim } | LayerSpec::Softmax { dim } | LayerSpec::LengthNorm { dim } => *dim,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::FullyConnected { .. } => "fc",
            LayerSpec::Conv2D(_) => "conv2d",
            LayerSpec::MaxPool2D(_) => "maxpool2d",
            LayerSpec::TimeDelay { .. } => "timedelay",
            LayerSpec::PNorm { .. } => "pnorm",
            LayerSpec::ReLU { .. } => "relu",
            LayerSpec::Softmax { .. } => "softmax",
            LayerSpec::Concat { .. } => "concat",
            LayerSpec::LengthNorm { .. } => "lengthnorm",
        }
    }

    /// Weight and bias shapes for trainable layers.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match self {
            LayerSpec::FullyConnected { input, output } => Some((vec![*input, *output], vec![*output])),
            LayerSpec::TimeDelay { input, output, offsets } => {
                Some((vec![input * offsets.len(), *output], vec![*output]))
            }
            LayerSpec::Conv2D(g) => Some((vec![g.out_c, g.in_c, g.kh, g.kw], vec![g.out_c])),
            _ => None,
        }
    }

    fn fans(&self) -> (usize, usize) {
        match self {
            LayerSpec::FullyConnected { input, output } => (*input, *output),
            LayerSpec::TimeDelay { input, output, offsets } => (input * offsets.len(), *output),
            LayerSpec::Conv2D(g) => (g.patch(), g.out_c * g.kh * g.kw),
            _ => (0, 0),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            LayerSpec::Conv2D(g) => g.validate(),
            LayerSpec::MaxPool2D(g) => g.validate(),
            LayerSpec::TimeDelay { offsets, .. } if offsets.is_empty() => {
                Err(Error::Invalid("time-delay layer needs at least one offset".into()))
            }
            LayerSpec::PNorm { input, output, p } => {
                if *output == 0 || input % output != 0 {
                    Err(Error::Shape(format!("p-norm {input} -> {output}: input not divisible by output")))
                } else if !(*p >= 1.0) {
                    Err(Error::Invalid(format!("p-norm exponent {p} < 1")))
                } else {
                    Ok(())
                }
            }
            _ => {
                if self.input_dim() == 0 || self.output_dim() == 0 {
                    Err(Error::Shape(format!("{} layer has a zero dimension", self.name())))
                } else {
                    Ok(())
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub input_dim: usize,
    /// Widths of the auxiliary (conditioning) inputs consumed by `Concat`.
    pub aux_dims: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    /// Index of the layer whose output is read as the network's factor.
    pub tap: usize,
}

impl NetworkSpec {
    /// Checks that each layer's input width equals its predecessor's output.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Invalid("network has no layers".into()));
        }
        if self.tap >= self.layers.len() {
            return Err(Error::Invalid(format!("tap {} beyond {} layers", self.tap, self.layers.len())));
        }
        let mut width = self.input_dim;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.validate().map_err(|e| Error::Shape(format!("layer {i}: {e}")))?;
            if layer.input_dim() != width {
                return Err(Error::Shape(format!(
                    "layer {i} ({}) expects width {}, predecessor gives {width}",
                    layer.name(),
                    layer.input_dim()
                )));
            }
            if let LayerSpec::Concat { extra, slot, .. } = layer {
                match self.aux_dims.get(*slot) {
                    Some(d) if d == extra => {}
                    _ => {
                        return Err(Error::Shape(format!(
                            "layer {i} concatenates aux slot {slot} of width {extra}, declared {:?}",
                            self.aux_dims.get(*slot)
                        )))
                    }
                }
            }
            width = layer.output_dim();
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, LayerSpec::output_dim)
    }

    pub fn tap_dim(&self) -> usize {
        self.layers[self.tap].output_dim()
    }

    /// Frames of left and right context consumed by the time-delay layers.
    pub fn context(&self) -> (usize, usize) {
        self.layers.iter().fold((0, 0), |(l, r), layer| match layer {
            LayerSpec::TimeDelay { offsets, .. } => {
                let lo = offsets.iter().copied().min().unwrap_or(0).min(0);
                let hi = offsets.iter().copied().max().unwrap_or(0).max(0);
                (l + (-lo) as usize, r + hi as usize)
            }
            _ => (l, r),
        })
    }

    pub fn softmax_index(&self) -> Option<usize> {
        self.layers.iter().rposition(|l| matches!(l, LayerSpec::Softmax { .. }))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Trainable tensors keyed by layer index.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub layers: Vec<Option<LayerParams>>,
}

impl ParamStore {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        let layers = spec
            .layers
            .iter()
            .map(|l| {
                l.param_shapes().map(|(ws, bs)| LayerParams {
                    weight: Tensor::zeros(ws),
                    bias: Tensor::zeros(bs),
                })
            })
            .collect();
        Self { layers }
    }

    /// Weights uniform in `+-sqrt(6 / (fan_in + fan_out))`, biases zero. A
    /// layer feeding a p-norm over groups of `g` has its range divided by
    /// `sqrt(g)`, so the pooled output keeps the input's scale.
    pub fn init<R: Rng>(spec: &NetworkSpec, rng: &mut R) -> Self {
        let mut store = Self::zeros(spec);
        for (i, (layer, p)) in spec.layers.iter().zip(store.layers.iter_mut()).enumerate() {
            if let Some(p) = p {
                let (fi, fo) = layer.fans();
                let group = match spec.layers.get(i + 1) {
                    Some(LayerSpec::PNorm { input, output, .. }) => input / output,
                    _ => 1,
                };
                let a = (6.0 / (fi + fo) as f64).sqrt() / (group as f64).sqrt();
                for w in p.weight.data_mut() {
                    *w = rng.random_range(-a..a);
                }
            }
        }
        store
    }

    pub fn check_matches(&self, spec: &NetworkSpec) -> Result<()> {
        if self.layers.len() != spec.layers.len() {
            return Err(Error::Shape(format!(
                "parameter store has {} layers, spec {}",
                self.layers.len(),
                spec.layers.len()
            )));
        }
        for (i, (l, p)) in spec.layers.iter().zip(&self.layers).enumerate() {
            match (l.param_shapes(), p) {
                (None, None) => {}
                (Some((ws, bs)), Some(p)) if p.weight.shape() == ws && p.bias.shape() == bs => {}
                _ => return Err(Error::Shape(format!("parameters of layer {i} do not match its spec"))),
            }
        }
        Ok(())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flatten().flat_map(|p| [&p.weight, &p.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flatten()
            .flat_map(|p| [&mut p.weight, &mut p.bias])
    }

    pub fn num_params(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    fn locate(&self, mut i: usize) -> (usize, usize) {
        for (t, tensor) in self.tensors().enumerate() {
            if i < tensor.len() {
                return (t, i);
            }
            i -= tensor.len();
        }
        panic!("parameter index out of range");
    }

    /// Parameter `i` in flat order (layer, weight then bias, row-major).
    pub fn get(&self, i: usize) -> f64 {
        let (t, k) = self.locate(i);
        self.tensors().nth(t).unwrap().data()[k]
    }

    pub fn set(&mut self, i: usize, v: f64) {
        let (t, k) = self.locate(i);
        self.tensors_mut().nth(t).unwrap().data_mut()[k] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(Tensor::is_finite)
    }

    /// Rewrites fully connected or time-delay layer `layer` so that on raw
    /// input it computes what it computed on input whose columns
    /// `start..start + shift.len()` were mapped `x -> (x - shift) * scale`.
    pub fn fold_input_affine(
        &mut self,
        spec: &NetworkSpec,
        layer: usize,
        start: usize,
        shift: &[f64],
        scale: &[f64],
    ) -> Result<()> {
        let (input, output, taps) = match spec.layers.get(layer) {
            Some(LayerSpec::FullyConnected { input, output }) => (*input, *output, 1),
            Some(LayerSpec::TimeDelay { input, output, offsets }) => (*input, *output, offsets.len()),
            _ => return Err(Error::Invalid(format!("layer {layer} has no input weights to fold into"))),
        };
        if shift.len() != scale.len() || start + shift.len() > input {
            return Err(Error::Shape(format!(
                "affine block {start}+{} does not fit a {input}-wide input",
                shift.len()
            )));
        }
        let p = self.layers[layer].as_mut().expect("weighted layer has params");
        let (w, b) = (p.weight.data_mut(), p.bias.data_mut());
        for k in 0..taps {
            for (c, (m, s)) in shift.iter().zip(scale).enumerate() {
                let row = &mut w[(k * input + start + c) * output..][..output];
                for (wj, bj) in row.iter_mut().zip(b.iter_mut()) {
                    *bj -= *wj * s * m;
                    *wj *= s;
                }
            }
        }
        Ok(())
    }
}

/// Per-layer activations from a forward pass; `acts[0]` is the input and
/// `acts[i + 1]` the output of layer `i`.
#[derive(Debug, Clone)]
pub struct Trace {
    pub rows: usize,
    pub segments: Vec<Segment>,
    pub acts: Vec<Vec<f64>>,
    pool_idx: Vec<Option<Vec<u32>>>,
    /// Rows whose length normalisation hit the zero-norm fallback.
    pub degenerate_norms: usize,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("trace holds the input at least")
    }

    pub fn layer_output(&self, layer: usize) -> &[f64] {
        &self.acts[layer + 1]
    }

    /// Concatenated max-pool winner indices of every pooling layer.
    pub fn pool_winners(&self) -> Vec<u32> {
        self.pool_idx.iter().flatten().flatten().copied().collect()
    }
}

fn check_segments(segments: &[Segment], rows: usize) -> Result<()> {
    let mut next = 0;
    for s in segments {
        if s.start != next || s.len == 0 {
            return Err(Error::Shape("segments must tile the rows contiguously".into()));
        }
        next += s.len;
    }
    if next != rows {
        return Err(Error::Shape(format!("segments cover {next} rows, batch has {rows}")));
    }
    Ok(())
}

/// Runs layers `0..upto` over `input` (`rows x spec.input_dim`).
pub fn network_forward(
    spec: &NetworkSpec,
    params: &ParamStore,
    input: &[f64],
    aux: &[&[f64]],
    segments: &[Segment],
    upto: usize,
) -> Result<Trace> {
    let rows = segments.iter().map(|s| s.len).sum::<usize>();
    if input.len() != rows * spec.input_dim {
        return Err(Error::Shape(format!(
            "input has {} values, expected {rows} x {}",
            input.len(),
            spec.input_dim
        )));
    }
    check_segments(segments, rows)?;
    if aux.len() < spec.aux_dims.len() {
        return Err(Error::Shape(format!(
            "network needs {} conditioning inputs, got {}",
            spec.aux_dims.len(),
            aux.len()
        )));
    }
    for (slot, (a, d)) in aux.iter().zip(&spec.aux_dims).enumerate() {
        if a.len() != rows * d {
            return Err(Error::Shape(format!(
                "conditioning input {slot} has {} values, expected {rows} x {d}",
                a.len()
            )));
        }
    }
    let upto = upto.min(spec.layers.len());
    let mut acts = Vec::with_capacity(upto + 1);
    acts.push(input.to_vec());
    let mut pool_idx = vec![None; upto];
    let mut degenerate = 0;
    for (i, layer) in spec.layers[..upto].iter().enumerate() {
        let x = &acts[i];
        let p = params.layers[i].as_ref();
        let y = match layer {
            LayerSpec::FullyConnected { input, output } => {
                let p = p.expect("fc params");
                ops::fc_fwd(x, rows, *input, p.weight.data(), p.bias.data(), *output)
            }
            LayerSpec::Conv2D(g) => {
                let p = p.expect("conv params");
                ops::conv_fwd(g, x, rows, p.weight.data(), p.bias.data())
            }
            LayerSpec::MaxPool2D(g) => {
                let (y, idx) = ops::pool_fwd(g, x, rows);
                pool_idx[i] = Some(idx);
                y
            }
            LayerSpec::TimeDelay { input, output, offsets } => {
                let p = p.expect("td params");
                let idx = ops::td_index(segments, offsets);
                let spliced = ops::gather_rows(x, *input, &idx);
                ops::fc_fwd(&spliced, rows, input * offsets.len(), p.weight.data(), p.bias.data(), *output)
            }
            LayerSpec::PNorm { input, output, p } => ops::pnorm_fwd(x, input / output, *p),
            LayerSpec::ReLU { .. } => x.iter().map(|v| v.max(0.0)).collect(),
            LayerSpec::Softmax { dim } => ops::softmax_rows(x, *dim),
            LayerSpec::Concat { input, extra, slot } => {
                let a = aux[*slot];
                let mut y = Vec::with_capacity(rows * (input + extra));
                for r in 0..rows {
                    y.extend_from_slice(&x[r * input..(r + 1) * input]);
                    y.extend_from_slice(&a[r * extra..(r + 1) * extra]);
                }
                y
            }
            LayerSpec::LengthNorm { dim } => {
                let (y, d) = ops::length_norm_rows(x, *dim);
                degenerate += d;
                y
            }
        };
        acts.push(y);
    }
    Ok(Trace {
        rows,
        segments: segments.to_vec(),
        acts,
        pool_idx,
        degenerate_norms: degenerate,
    })
}

/// Back-propagates `grad`, the gradient with respect to the output of layer
/// `from - 1` (i.e. `trace.acts[from]`), down to the input.
pub fn network_backward(
    spec: &NetworkSpec,
    params: &ParamStore,
    trace: &Trace,
    grad: Vec<f64>,
    from: usize,
) -> Result<ParamStore> {
    if from > trace.acts.len() - 1 {
        return Err(Error::Invalid(format!(
            "backward from layer {from} but trace only covers {}",
            trace.acts.len() - 1
        )));
    }
    if grad.len() != trace.acts[from].len() {
        return Err(Error::Shape(format!(
            "gradient has {} values, activation {}",
            grad.len(),
            trace.acts[from].len()
        )));
    }
    let rows = trace.rows;
    let mut grads = ParamStore::zeros(spec);
    let mut g = grad;
    for i in (0..from).rev() {
        let x = &trace.acts[i];
        let y = &trace.acts[i + 1];
        let need_dx = i > 0;
        g = match &spec.layers[i] {
            LayerSpec::FullyConnected { input, output } => {
                let p = params.layers[i].as_ref().expect("fc params");
                let gp = grads.layers[i].as_mut().unwrap();
                ops::fc_bwd(
                    x,
                    rows,
                    *input,
                    p.weight.data(),
                    *output,
                    &g,
                    gp.weight.data_mut(),
                    gp.bias.data_mut(),
                    need_dx,
                )
            }
            LayerSpec::Conv2D(geom) => {
                let p = params.layers[i].as_ref().expect("conv params");
                let gp = grads.layers[i].as_mut().unwrap();
                ops::conv_bwd(
                    geom,
                    x,
                    rows,
                    p.weight.data(),
                    &g,
                    gp.weight.data_mut(),
                    gp.bias.data_mut(),
                    need_dx,
                )
            }
            LayerSpec::MaxPool2D(geom) => {
                ops::pool_bwd(geom, rows, trace.pool_idx[i].as_ref().expect("pool indices"), &g)
            }
            LayerSpec::TimeDelay { input, output, offsets } => {
                let p = params.layers[i].as_ref().expect("td params");
                let gp = grads.layers[i].as_mut().unwrap();
                let idx = ops::td_index(&trace.segments, offsets);
                let spliced = ops::gather_rows(x, *input, &idx);
                let dspliced = ops::fc_bwd(
                    &spliced,
                    rows,
                    input * offsets.len(),
                    p.weight.data(),
                    *output,
                    &g,
                    gp.weight.data_mut(),
                    gp.bias.data_mut(),
                    need_dx,
                );
                if need_dx {
                    let mut dx = vec![0.0; x.len()];
                    ops::scatter_rows_add(&dspliced, *input, &idx, &mut dx);
                    dx
                } else {
                    Vec::new()
                }
            }
            LayerSpec::PNorm { input, output, p } => ops::pnorm_bwd(x, y, &g, input / output, *p),
            LayerSpec::ReLU { .. } => g.iter().zip(y).map(|(g, y)| if *y > 0.0 { *g } else { 0.0 }).collect(),
            LayerSpec::Softmax { dim } => ops::softmax_bwd(y, &g, *dim),
            LayerSpec::Concat { input, extra, .. } => {
                let w = input + extra;
                let mut dx = Vec::with_capacity(rows * input);
                for r in 0..rows {
                    dx.extend_from_slice(&g[r * w..r * w + input]);
                }
                dx
            }
            LayerSpec::LengthNorm { dim } => ops::length_norm_bwd(x, y, &g, *dim),
        };
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn small() -> NetworkSpec {
        NetworkSpec {
            input_dim: 4,
            aux_dims: vec![2],
            layers: vec![
                LayerSpec::FullyConnected { input: 4, output: 6 },
                LayerSpec::ReLU { dim: 6 },
                LayerSpec::Concat { input: 6, extra: 2, slot: 0 },
                LayerSpec::TimeDelay { input: 8, output: 6, offsets: vec![-1, 0, 2] },
                LayerSpec::PNorm { input: 6, output: 3, p: 2.0 },
                LayerSpec::FullyConnected { input: 3, output: 3 },
                LayerSpec::Softmax { dim: 3 },
            ],
            tap: 4,
        }
    }

    #[test]
    fn chaining_is_checked() {
        let mut s = small();
        assert!(s.validate().is_ok());
        assert_eq!(s.context(), (1, 2));
        assert_eq!(s.softmax_index(), Some(6));
        s.layers[5] = LayerSpec::FullyConnected { input: 4, output: 3 };
        assert!(s.validate().is_err());
        let mut s = small();
        s.aux_dims = vec![3];
        assert!(s.validate().is_err());
        let mut s = small();
        s.layers[4] = LayerSpec::PNorm { input: 6, output: 4, p: 2.0 };
        assert!(s.validate().is_err());
    }

    #[test]
    fn forward_respects_segments() {
        let spec = small();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(1);
        let params = ParamStore::init(&spec, &mut rng);
        let x: Vec<f64> = (0..5 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let aux: Vec<f64> = (0..5 * 2).map(|i| (i as f64 * 0.11).cos()).collect();
        let segs = [Segment { start: 0, len: 2 }, Segment { start: 2, len: 3 }];
        let joint = network_forward(&spec, &params, &x, &[&aux], &segs, usize::MAX).unwrap();
        let second = network_forward(&spec, &params, &x[8..], &[&aux[4..]], &Segment::whole(3), usize::MAX).unwrap();
        assert_eq!(&joint.output()[6..], second.output());
        assert!(network_forward(&spec, &params, &x, &[], &segs, usize::MAX).is_err());
    }

    #[test]
    fn flat_parameter_access() {
        let spec = small();
        let mut p = ParamStore::zeros(&spec);
        let n = p.num_params();
        assert_eq!(n, 4 * 6 + 6 + 24 * 6 + 6 + 3 * 3 + 3);
        p.set(n - 1, 2.5);
        assert_eq!(p.get(n - 1), 2.5);
        assert_eq!(p.layers[5].as_ref().unwrap().bias.data()[2], 2.5);
        assert!(p.check_matches(&spec).is_ok());
    }

    #[test]
    fn folded_affine_matches_standardized_input() {
        let spec = small();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(2);
        let params = ParamStore::init(&spec, &mut rng);
        let x: Vec<f64> = (0..5 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let aux: Vec<f64> = (0..5 * 2).map(|i| 3.0 + (i as f64 * 0.11).cos()).collect();
        let (shift, scale) = ([3.2, 2.9], [4.0, 0.0]);
        let std_aux: Vec<f64> = aux.iter().enumerate().map(|(i, a)| (a - shift[i % 2]) * scale[i % 2]).collect();
        let segs = Segment::whole(5);
        let want = network_forward(&spec, &params, &x, &[&std_aux], &segs, usize::MAX).unwrap();
        let mut folded = params.clone();
        folded.fold_input_affine(&spec, 3, 6, &shift, &scale).unwrap();
        let got = network_forward(&spec, &folded, &x, &[&aux], &segs, usize::MAX).unwrap();
        for (a, b) in got.output().iter().zip(want.output()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(folded.clone().fold_input_affine(&spec, 4, 0, &shift, &scale).is_err());
        assert!(folded.fold_input_affine(&spec, 3, 7, &shift, &scale).is_err());
    }
}
