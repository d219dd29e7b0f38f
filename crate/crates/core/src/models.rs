//! Factor network builders and frame-level factor extraction.
//!
//! All networks take spliced log filterbank frames. The speaker network views
//! each spliced row as a `frames x mels` time-frequency patch and runs a small
//! convolutional front end before its time-delay stack; conditioning factors
//! join it at the bottleneck. The emotion network concatenates conditioning
//! factors with its raw input.

use std::path::Path;

use crate::dsp::{splice, FeatureKind, FeatureMatrix};
use crate::error::{Error, Result};
use crate::io::{read_bytes, write_bytes, ByteReader, ByteWriter};
use crate::nn::{network_forward, ConvGeom, LayerSpec, Model, NetworkSpec, PoolGeom, Segment};

pub const FACTOR_MAGIC: &[u8; 4] = b"CDFF";
pub const FACTOR_VERSION: u8 = 1;
/// Norms below this are replaced by the first basis vector.
pub const MIN_NORM: f64 = 1e-8;

/// Layer widths and temporal offsets of every network.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    pub fbank_dim: usize,
    pub ling_splice: usize,
    pub ling_hidden: usize,
    pub ling_layers: usize,
    pub spk_splice: usize,
    /// (maps, kernel height, kernel width) of the two convolutions.
    pub spk_conv1: (usize, usize, usize),
    pub spk_conv2: (usize, usize, usize),
    pub spk_pool: (usize, usize),
    pub spk_bottleneck: usize,
    pub spk_td_width: usize,
    pub spk_pnorm_out: usize,
    pub spk_td_offsets: [Vec<i32>; 2],
    pub spk_feature: usize,
    pub emo_splice: usize,
    pub emo_td_width: usize,
    pub emo_pnorm_out: usize,
    /// One offset list per time-delay layer.
    pub emo_offsets: Vec<Vec<i32>>,
    pub recon_splice: usize,
    pub recon_hidden: usize,
    pub recon_layers: usize,
    pub pnorm_p: f64,
}

impl ArchConfig {
    /// Full-size networks: 4x1024 linguistic, 32/64-map speaker front end
    /// with a 512 bottleneck, 6x200 emotion stack, 5x1024 generators.
    pub fn paper() -> Self {
        Self {
            fbank_dim: 40,
            ling_splice: 5,
            ling_hidden: 1024,
            ling_layers: 4,
            spk_splice: 4,
            spk_conv1: (32, 4, 8),
            spk_conv2: (64, 2, 4),
            spk_pool: (2, 2),
            spk_bottleneck: 512,
            spk_td_width: 400,
            spk_pnorm_out: 80,
            spk_td_offsets: [vec![-4, 0, 4], vec![-2, 0, 1]],
            spk_feature: 40,
            emo_splice: 4,
            emo_td_width: 200,
            emo_pnorm_out: 40,
            emo_offsets: vec![vec![0], vec![-3, 0, 3], vec![-3, 0, 2], vec![0], vec![0], vec![0]],
            recon_splice: 4,
            recon_hidden: 1024,
            recon_layers: 5,
            pnorm_p: 2.0,
        }
    }

    /// Same topology with narrower layers, sized for single-core training.
    pub fn desk() -> Self {
        Self {
            ling_hidden: 256,
            spk_conv1: (16, 4, 8),
            spk_conv2: (32, 2, 4),
            spk_bottleneck: 256,
            spk_td_width: 200,
            spk_pnorm_out: 40,
            recon_hidden: 256,
            ..Self::paper()
        }
    }
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self::paper()
    }
}

/// Splice half-width a network expects, inferred from its input width.
pub fn input_splice(spec: &NetworkSpec, fbank_dim: usize) -> Result<usize> {
    let frames = spec.input_dim / fbank_dim.max(1);
    if fbank_dim == 0 || !spec.input_dim.is_multiple_of(fbank_dim) || frames.is_multiple_of(2) {
        return Err(Error::Shape(format!(
            "network input {} is not an odd number of {fbank_dim}-wide frames",
            spec.input_dim
        )));
    }
    Ok(frames / 2)
}

/// Linguistic frame classifier: spliced input, `ling_layers` FC+ReLU, softmax
/// over `classes`. The tap is the softmax output.
pub fn build_linguistic_net(classes: usize, input_dim: usize, arch: &ArchConfig) -> Result<NetworkSpec> {
    if classes < 2 {
        return Err(Error::Invalid(format!("linguistic net needs >= 2 classes, got {classes}")));
    }
    let mut layers = Vec::new();
    let mut d = input_dim;
    for _ in 0..arch.ling_layers {
        layers.push(LayerSpec::FullyConnected {
            input: d,
            output: arch.ling_hidden,
        });
        layers.push(LayerSpec::ReLU { dim: arch.ling_hidden });
        d = arch.ling_hidden;
    }
    layers.push(LayerSpec::FullyConnected { input: d, output: classes });
    layers.push(LayerSpec::Softmax { dim: classes });
    let spec = NetworkSpec {
        input_dim,
        aux_dims: vec![],
        tap: layers.len() - 1,
        layers,
    };
    spec.validate()?;
    Ok(spec)
}

/// Speaker network. With `cond_dim > 0` the conditioning factor is appended
/// to the bottleneck output (auxiliary slot 0). The tap is the linear
/// feature layer.
pub fn build_speaker_net(speakers: usize, cond_dim: usize, arch: &ArchConfig) -> Result<NetworkSpec> {
    if speakers < 2 {
        return Err(Error::Invalid(format!("speaker net needs >= 2 speakers, got {speakers}")));
    }
    let frames = 2 * arch.spk_splice + 1;
    let (m1, kh1, kw1) = arch.spk_conv1;
    let (m2, kh2, kw2) = arch.spk_conv2;
    let (ph, pw) = arch.spk_pool;
    let c1 = ConvGeom {
        in_c: 1,
        in_h: frames,
        in_w: arch.fbank_dim,
        out_c: m1,
        kh: kh1,
        kw: kw1,
        sh: 1,
        sw: 1,
    };
    c1.validate()?;
    let p1 = PoolGeom {
        c: m1,
        in_h: c1.out_h(),
        in_w: c1.out_w(),
        ph,
        pw,
        sh: ph,
        sw: pw,
    };
    p1.validate()?;
    let c2 = ConvGeom {
        in_c: m1,
        in_h: p1.out_h(),
        in_w: p1.out_w(),
        out_c: m2,
        kh: kh2,
        kw: kw2,
        sh: 1,
        sw: 1,
    };
    c2.validate()?;
    let p2 = PoolGeom {
        c: m2,
        in_h: c2.out_h(),
        in_w: c2.out_w(),
        ph,
        pw,
        sh: ph,
        sw: pw,
    };
    p2.validate()?;

    let mut layers = vec![
        LayerSpec::Conv2D(c1),
        LayerSpec::ReLU { dim: c1.out_size() },
        LayerSpec::MaxPool2D(p1),
        LayerSpec::Conv2D(c2),
        LayerSpec::ReLU { dim: c2.out_size() },
        LayerSpec::MaxPool2D(p2),
        LayerSpec::FullyConnected {
            input: p2.out_size(),
            output: arch.spk_bottleneck,
        },
        LayerSpec::ReLU { dim: arch.spk_bottleneck },
    ];
    let mut d = arch.spk_bottleneck;
    let mut aux_dims = vec![];
    if cond_dim > 0 {
        layers.push(LayerSpec::Concat {
            input: d,
            extra: cond_dim,
            slot: 0,
        });
        aux_dims.push(cond_dim);
        d += cond_dim;
    }
    for offsets in &arch.spk_td_offsets {
        layers.push(LayerSpec::TimeDelay {
            input: d,
            output: arch.spk_td_width,
            offsets: offsets.clone(),
        });
        layers.push(LayerSpec::PNorm {
            input: arch.spk_td_width,
            output: arch.spk_pnorm_out,
            p: arch.pnorm_p,
        });
        d = arch.spk_pnorm_out;
    }
    layers.push(LayerSpec::FullyConnected {
        input: d,
        output: arch.spk_feature,
    });
    let tap = layers.len() - 1;
    layers.push(LayerSpec::FullyConnected {
        input: arch.spk_feature,
        output: speakers,
    });
    layers.push(LayerSpec::Softmax { dim: speakers });
    let spec = NetworkSpec {
        input_dim: frames * arch.fbank_dim,
        aux_dims,
        layers,
        tap,
    };
    spec.validate()?;
    Ok(spec)
}

/// Emotion network. Each entry of `cond_dims` is concatenated with the
/// spliced input in order (slots 0, 1, ...). The tap is the last p-norm.
pub fn build_emotion_net(emotions: usize, cond_dims: &[usize], arch: &ArchConfig) -> Result<NetworkSpec> {
    if emotions < 2 {
        return Err(Error::Invalid(format!("emotion net needs >= 2 classes, got {emotions}")));
    }
    if arch.emo_offsets.is_empty() {
        return Err(Error::Invalid("emotion net needs at least one time-delay layer".into()));
    }
    let input_dim = (2 * arch.emo_splice + 1) * arch.fbank_dim;
    let mut layers = Vec::new();
    let mut d = input_dim;
    for (slot, &extra) in cond_dims.iter().enumerate() {
        if extra == 0 {
            return Err(Error::Invalid("conditioning width must be positive".into()));
        }
        layers.push(LayerSpec::Concat { input: d, extra, slot });
        d += extra;
    }
    for offsets in &arch.emo_offsets {
        layers.push(LayerSpec::TimeDelay {
            input: d,
            output: arch.emo_td_width,
            offsets: offsets.clone(),
        });
        layers.push(LayerSpec::PNorm {
            input: arch.emo_td_width,
            output: arch.emo_pnorm_out,
            p: arch.pnorm_p,
        });
        d = arch.emo_pnorm_out;
    }
    let tap = layers.len() - 1;
    layers.push(LayerSpec::FullyConnected { input: d, output: emotions });
    layers.push(LayerSpec::Softmax { dim: emotions });
    let spec = NetworkSpec {
        input_dim,
        aux_dims: cond_dims.to_vec(),
        layers,
        tap,
    };
    spec.validate()?;
    Ok(spec)
}

/// One spectrum generator: `recon_layers` FC+ReLU then a linear FC to
/// `out_dim`.
pub fn build_generator(input_dim: usize, out_dim: usize, arch: &ArchConfig) -> Result<NetworkSpec> {
    let mut layers = Vec::new();
    let mut d = input_dim;
    for _ in 0..arch.recon_layers {
        layers.push(LayerSpec::FullyConnected {
            input: d,
            output: arch.recon_hidden,
        });
        layers.push(LayerSpec::ReLU { dim: arch.recon_hidden });
        d = arch.recon_hidden;
    }
    layers.push(LayerSpec::FullyConnected { input: d, output: out_dim });
    let spec = NetworkSpec {
        input_dim,
        aux_dims: vec![],
        tap: layers.len() - 1,
        layers,
    };
    spec.validate()?;
    Ok(spec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FactorKind {
    Linguistic,
    Speaker,
    Emotion,
}

impl FactorKind {
    pub fn code(self) -> u8 {
        match self {
            FactorKind::Linguistic => 0,
            FactorKind::Speaker => 1,
            FactorKind::Emotion => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(FactorKind::Linguistic),
            1 => Some(FactorKind::Speaker),
            2 => Some(FactorKind::Emotion),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FactorKind::Linguistic => "linguistic",
            FactorKind::Speaker => "speaker",
            FactorKind::Emotion => "emotion",
        }
    }
}

/// Frame-level factors of one utterance, `frames x dim` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorStream {
    pub utt_id: String,
    pub kind: FactorKind,
    frames: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FactorStream {
    pub fn new(utt_id: impl Into<String>, kind: FactorKind, frames: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != frames * dim {
            return Err(Error::Shape(format!(
                "factor stream data has {} values, expected {frames} x {dim}",
                data.len()
            )));
        }
        Ok(Self {
            utt_id: utt_id.into(),
            kind,
            frames,
            dim,
            data,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn slice_frames(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.frames {
            return Err(Error::Invalid(format!(
                "frame range {start}..{end} outside 0..{}",
                self.frames
            )));
        }
        Self::new(
            self.utt_id.clone(),
            self.kind,
            end - start,
            self.dim,
            self.data[start * self.dim..end * self.dim].to_vec(),
        )
    }

    /// The stream as a feature matrix, e.g. for splicing.
    pub fn as_features(&self) -> Result<FeatureMatrix> {
        FeatureMatrix::new(self.frames, self.dim, self.data.clone(), 10.0, FeatureKind::Conditioned)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::new();
        w.bytes(FACTOR_MAGIC);
        w.u8(FACTOR_VERSION);
        w.u8(self.kind.code());
        w.u32(self.frames as u32);
        w.u32(self.dim as u32);
        w.str16(&self.utt_id)?;
        w.f32s(&self.data);
        Ok(w.into_inner())
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        r.expect_magic(FACTOR_MAGIC)?;
        let v = r.u8()?;
        if v != FACTOR_VERSION {
            return Err(r.err(format!("unsupported factor version {v}")));
        }
        let code = r.u8()?;
        let kind = FactorKind::from_code(code).ok_or_else(|| r.err(format!("unknown factor kind {code}")))?;
        let frames = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let utt_id = r.str16()?;
        let data = r.f32s(frames * dim)?;
        r.finish()?;
        Self::new(utt_id, kind, frames, dim, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_bytes(path)?, path)
    }

    /// Rounds values to the stored precision.
    pub fn quantized(mut self) -> Self {
        crate::io::quantize(&mut self.data);
        self
    }
}

/// `v / |v|`, or the first basis vector with a warning when `|v| < 1e-8`.
pub fn length_normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < MIN_NORM {
        log::warn!("length normalization of a near-zero vector (norm {n:e}); using e1");
        let mut e = vec![0.0; v.len()];
        if let Some(first) = e.first_mut() {
            *first = 1.0;
        }
        return e;
    }
    v.iter().map(|x| x / n).collect()
}

fn check_aligned(utt: &str, frames: usize, conditioning: &[&FactorStream]) -> Result<()> {
    for c in conditioning {
        if c.frames() != frames {
            return Err(Error::Misaligned {
                utt: utt.to_string(),
                what: format!("{} factor stream", c.kind.name()),
                expected: frames,
                found: c.frames(),
            });
        }
    }
    Ok(())
}

/// Reads the tap layer of `model` for every frame of `features`, which must
/// already be spliced to the network's input width. Speaker factors are
/// length-normalized per frame. The whole utterance is one time segment.
pub fn extract_factors(
    model: &Model,
    kind: FactorKind,
    utt_id: &str,
    features: &FeatureMatrix,
    conditioning: &[&FactorStream],
) -> Result<FactorStream> {
    let spec = &model.spec;
    if features.dim() != spec.input_dim {
        return Err(Error::Shape(format!(
            "features are {} wide, network expects {}",
            features.dim(),
            spec.input_dim
        )));
    }
    let t = features.frames();
    if t == 0 {
        return Err(Error::Empty(format!("utterance {utt_id} has no frames")));
    }
    check_aligned(utt_id, t, conditioning)?;
    if conditioning.len() != spec.aux_dims.len() {
        return Err(Error::Shape(format!(
            "network takes {} conditioning streams, got {}",
            spec.aux_dims.len(),
            conditioning.len()
        )));
    }
    let aux: Vec<&[f64]> = conditioning.iter().map(|c| c.data()).collect();
    let trace = network_forward(spec, &model.params, features.data(), &aux, &Segment::whole(t), spec.tap + 1)?;
    let d = spec.tap_dim();
    let mut data = trace.layer_output(spec.tap).to_vec();
    if kind == FactorKind::Speaker {
        for row in data.chunks_exact_mut(d) {
            let n = length_normalize(row);
            row.copy_from_slice(&n);
        }
    }
    FactorStream::new(utt_id, kind, t, d, data)
}

/// Splices raw (normalized) filterbank frames to the width `spec` expects.
pub fn network_input(spec: &NetworkSpec, fbank: &FeatureMatrix) -> Result<FeatureMatrix> {
    let c = input_splice(spec, fbank.dim())?;
    Ok(splice(fbank, c, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::rng;
    use rand_distr::{Distribution, StandardNormal};

    fn small_arch() -> ArchConfig {
        ArchConfig {
            ling_hidden: 16,
            spk_conv1: (3, 4, 8),
            spk_conv2: (4, 2, 4),
            spk_bottleneck: 12,
            spk_td_width: 8,
            spk_pnorm_out: 4,
            spk_feature: 6,
            emo_td_width: 8,
            emo_pnorm_out: 4,
            recon_hidden: 8,
            ..ArchConfig::paper()
        }
    }

    fn random_fbank(frames: usize, seed: u64) -> FeatureMatrix {
        let mut r = rng::stream(seed, 0);
        let data = (0..frames * 40).map(|_| StandardNormal.sample(&mut r)).collect();
        FeatureMatrix::new(frames, 40, data, 10.0, FeatureKind::LogFbank).unwrap()
    }

    #[test]
    fn paper_dimensions() {
        let a = ArchConfig::paper();
        let ling = build_linguistic_net(10, 440, &a).unwrap();
        assert_eq!(ling.input_dim, 440);
        assert_eq!(ling.output_dim(), 10);
        assert_eq!(ling.layers.iter().filter(|l| matches!(l, LayerSpec::ReLU { .. })).count(), 4);

        let idf = build_speaker_net(20, 0, &a).unwrap();
        assert_eq!(idf.input_dim, 360);
        assert_eq!(idf.tap_dim(), 40);
        assert_eq!(idf.output_dim(), 20);
        let cdf = build_speaker_net(20, 10, &a).unwrap();
        let td = cdf
            .layers
            .iter()
            .find_map(|l| match l {
                LayerSpec::TimeDelay { input, .. } => Some(*input),
                _ => None,
            })
            .unwrap();
        assert_eq!(td, 512 + 10);
        assert_eq!(cdf.context(), (6, 5));
        assert!(build_speaker_net(1, 0, &a).is_err());

        let emo = build_emotion_net(8, &[], &a).unwrap();
        assert_eq!(emo.output_dim(), 8);
        assert_eq!(emo.tap_dim(), 40);
        let pnorms: Vec<_> = emo
            .layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::PNorm { input, output, .. } => Some((*input, *output)),
                _ => None,
            })
            .collect();
        assert_eq!(pnorms, vec![(200, 40); 6]);
        let emo2 = build_emotion_net(4, &[10, 40], &a).unwrap();
        assert_eq!(emo2.aux_dims, vec![10, 40]);

        let g = build_generator(360, 129, &a).unwrap();
        assert_eq!(g.output_dim(), 129);
        assert_eq!(g.layers.iter().filter(|l| matches!(l, LayerSpec::ReLU { .. })).count(), 5);
    }

    #[test]
    fn effective_windows_span_twenty_frames() {
        for arch in [ArchConfig::paper(), ArchConfig::desk()] {
            let spk = build_speaker_net(5, 0, &arch).unwrap();
            let (l, r) = spk.context();
            assert_eq!(l + r + 2 * arch.spk_splice + 1, 20);
            let emo = build_emotion_net(4, &[], &arch).unwrap();
            let (l, r) = emo.context();
            assert_eq!(l + r + 2 * arch.emo_splice + 1, 20);
        }
    }

    #[test]
    fn speaker_output_depends_only_on_nearby_frames() {
        let arch = small_arch();
        let spec = build_speaker_net(3, 0, &arch).unwrap();
        let mut r = rng::stream(1, 1);
        let model = Model {
            params: ParamStore::init(&spec, &mut r),
            spec,
        };
        let t = 60;
        let t0 = 30;
        let base = random_fbank(t, 2);
        let mut data = base.data().to_vec();
        for v in &mut data[t0 * 40..(t0 + 1) * 40] {
            *v += 1.0;
        }
        let bumped = FeatureMatrix::new(t, 40, data, 10.0, FeatureKind::LogFbank).unwrap();
        let run = |f: &FeatureMatrix| {
            let x = network_input(&model.spec, f).unwrap();
            extract_factors(&model, FactorKind::Speaker, "u", &x, &[]).unwrap()
        };
        let a = run(&base);
        let b = run(&bumped);
        let changed: Vec<i64> = (0..t)
            .filter(|&i| a.row(i).iter().zip(b.row(i)).any(|(x, y)| (x - y).abs() > 1e-12))
            .map(|i| i as i64 - t0 as i64)
            .collect();
        assert!(!changed.is_empty());
        assert!(changed.iter().all(|d| d.abs() <= 10), "{changed:?}");
        assert_eq!(changed.first().unwrap() - changed.last().unwrap(), -19);
    }

    #[test]
    fn zero_conditioning_equals_zeroed_concat_weights() {
        let arch = small_arch();
        let p = 5;
        let cdf = build_speaker_net(3, p, &arch).unwrap();
        let mut r = rng::stream(4, 0);
        let params = ParamStore::init(&cdf, &mut r);
        let model = Model {
            spec: cdf.clone(),
            params: params.clone(),
        };
        let fb = random_fbank(25, 3);
        let x = network_input(&cdf, &fb).unwrap();
        let mut r2 = rng::stream(4, 1);
        let q_rand: Vec<f64> = (0..25 * p).map(|_| StandardNormal.sample(&mut r2)).collect();
        let q = FactorStream::new("u", FactorKind::Linguistic, 25, p, q_rand).unwrap();
        let zero = FactorStream::new("u", FactorKind::Linguistic, 25, p, vec![0.0; 25 * p]).unwrap();

        // Zero the rows of the first time-delay weight that read the
        // conditioning block.
        let mut zeroed = params.clone();
        let td = cdf.layers.iter().position(|l| matches!(l, LayerSpec::TimeDelay { .. })).unwrap();
        if let LayerSpec::TimeDelay { input, offsets, output } = &cdf.layers[td] {
            let w = zeroed.layers[td].as_mut().unwrap().weight.data_mut();
            for k in 0..offsets.len() {
                for i in (input - p)..*input {
                    let row = k * input + i;
                    for o in 0..*output {
                        w[row * output + o] = 0.0;
                    }
                }
            }
        }
        let zeroed_model = Model { spec: cdf, params: zeroed };
        let a = extract_factors(&model, FactorKind::Speaker, "u", &x, &[&zero]).unwrap();
        let b = extract_factors(&zeroed_model, FactorKind::Speaker, "u", &x, &[&q]).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn extraction_contracts() {
        let arch = small_arch();
        let fb = random_fbank(30, 9);
        let mut r = rng::stream(5, 0);

        let ling = build_linguistic_net(6, 440, &arch).unwrap();
        let lm = Model {
            params: ParamStore::init(&ling, &mut r),
            spec: ling,
        };
        let q = extract_factors(&lm, FactorKind::Linguistic, "u", &network_input(&lm.spec, &fb).unwrap(), &[]).unwrap();
        for row in q.rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&v| v >= 0.0));
        }

        let spk = build_speaker_net(4, 6, &arch).unwrap();
        let sm = Model {
            params: ParamStore::init(&spk, &mut r),
            spec: spk,
        };
        let s = extract_factors(&sm, FactorKind::Speaker, "u", &network_input(&sm.spec, &fb).unwrap(), &[&q]).unwrap();
        assert_eq!(s.frames(), 30);
        for row in s.rows() {
            assert!((row.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
        }

        let short = q.slice_frames(0, 29).unwrap();
        let err = extract_factors(&sm, FactorKind::Speaker, "u", &network_input(&sm.spec, &fb).unwrap(), &[&short]);
        assert!(matches!(err, Err(Error::Misaligned { .. })));

        // All-zero parameters give zero activations and the e1 fallback.
        let zm = Model {
            params: ParamStore::zeros(&sm.spec),
            spec: sm.spec.clone(),
        };
        let z = extract_factors(&zm, FactorKind::Speaker, "u", &network_input(&zm.spec, &fb).unwrap(), &[&q]).unwrap();
        for row in z.rows() {
            assert_eq!(row[0], 1.0);
            assert!(row[1..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn length_normalize_cases() {
        assert_eq!(length_normalize(&[3.0, 4.0, 0.0]), vec![0.6, 0.8, 0.0]);
        assert_eq!(length_normalize(&[0.0, 1.0]), vec![0.0, 1.0]);
        assert_eq!(length_normalize(&[0.0, 0.0, 0.0]), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn factor_stream_roundtrip() {
        let s = FactorStream::new("spk01_emo0_002", FactorKind::Emotion, 3, 2, vec![0.5, -1.25, 3.0, 0.0, 1e-3, 7.0])
            .unwrap()
            .quantized();
        let bytes = s.encode().unwrap();
        assert_eq!(&bytes[..4], b"CDFF");
        assert_eq!(bytes[5], 2);
        let back = FactorStream::decode(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, s);
        assert!(FactorStream::decode(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
    }
}
