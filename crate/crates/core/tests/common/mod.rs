//! Brute-force forward oracles and finite-difference gradient checks, shared
//! by the core integration tests and the acceptance suite.
#![allow(dead_code)]

use cdf_core::dsp::{power_spectrogram, AudioBuffer, FrameConfig};
use cdf_core::models::{build_emotion_net, build_generator, build_linguistic_net, build_speaker_net, ArchConfig};
use cdf_core::nn::{
    conv2d_forward, fc_forward, gradient_check, maxpool2d_forward, pnorm_forward, softmax, timedelay_forward,
    ConvGeom, LayerSpec, NetworkSpec, Objective, ParamStore, PoolGeom, Problem, Segment, Tensor,
};
use cdf_core::rng::{self, Rng};
use rand::Rng as _;

pub const FORWARD_TOL: f64 = 1e-10;
pub const DFT_TOL: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-4;

/// Largest deviation of one operator from its oracle over `cases` shapes.
#[derive(Debug, Clone)]
pub struct OracleResult {
    pub op: &'static str,
    pub cases: usize,
    pub max_err: f64,
    pub tol: f64,
}

impl OracleResult {
    pub fn passed(&self) -> bool {
        self.max_err <= self.tol
    }
}

fn uniform(r: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-2.0..2.0)).collect()
}

fn tensor(r: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::new(shape.to_vec(), uniform(r, shape.iter().product())).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "oracle and operator disagree on output size");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn matmul_case(r: &mut Rng) -> f64 {
    let (n, din, dout) = (r.random_range(1..12), r.random_range(1..20), r.random_range(1..15));
    let x = tensor(r, &[n, din]);
    let w = tensor(r, &[din, dout]);
    let b = tensor(r, &[dout]);
    let y = fc_forward(&x, &w, &b).unwrap();
    let mut want = vec![0.0; n * dout];
    for i in 0..n {
        for j in 0..dout {
            let mut s = b.data()[j];
            for k in 0..din {
                s += x.data()[i * din + k] * w.data()[k * dout + j];
            }
            want[i * dout + j] = s;
        }
    }
    max_abs_diff(y.data(), &want)
}

fn conv_case(r: &mut Rng) -> f64 {
    let (n, c, oc) = (r.random_range(1..4), r.random_range(1..4), r.random_range(1..5));
    let (h, w) = (r.random_range(1..10), r.random_range(1..12));
    let (kh, kw) = (r.random_range(1..=h), r.random_range(1..=w));
    let (sh, sw) = (r.random_range(1..4), r.random_range(1..4));
    let x = tensor(r, &[n, c, h, w]);
    let k = tensor(r, &[oc, c, kh, kw]);
    let b = tensor(r, &[oc]);
    let y = conv2d_forward(&x, &k, &b, (sh, sw)).unwrap();
    let (oh, ow) = ((h - kh) / sh + 1, (w - kw) / sw + 1);
    let xv = |s: usize, ch: usize, i: usize, j: usize| x.data()[((s * c + ch) * h + i) * w + j];
    let kv = |o: usize, ch: usize, u: usize, v: usize| k.data()[((o * c + ch) * kh + u) * kw + v];
    let mut want = Vec::new();
    for s in 0..n {
        for o in 0..oc {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b.data()[o];
                    for ch in 0..c {
                        for u in 0..kh {
                            for v in 0..kw {
                                acc += xv(s, ch, i * sh + u, j * sw + v) * kv(o, ch, u, v);
                            }
                        }
                    }
                    want.push(acc);
                }
            }
        }
    }
    assert_eq!(y.shape(), &[n, oc, oh, ow]);
    max_abs_diff(y.data(), &want)
}

fn pool_case(r: &mut Rng) -> f64 {
    let (n, c) = (r.random_range(1..4), r.random_range(1..4));
    let (h, w) = (r.random_range(1..10), r.random_range(1..10));
    let (ph, pw) = (r.random_range(1..=h), r.random_range(1..=w));
    let (sh, sw) = (r.random_range(1..4), r.random_range(1..4));
    let x = tensor(r, &[n, c, h, w]);
    let (y, _) = maxpool2d_forward(&x, (ph, pw), (sh, sw)).unwrap();
    let (oh, ow) = ((h - ph) / sh + 1, (w - pw) / sw + 1);
    let mut want = Vec::new();
    for s in 0..n {
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut m = f64::NEG_INFINITY;
                    for u in 0..ph {
                        for v in 0..pw {
                            m = m.max(x.data()[((s * c + ch) * h + i * sh + u) * w + j * sw + v]);
                        }
                    }
                    want.push(m);
                }
            }
        }
    }
    max_abs_diff(y.data(), &want)
}

fn pnorm_case(r: &mut Rng) -> f64 {
    let (n, out, group) = (r.random_range(1..10), r.random_range(1..8), r.random_range(1..6));
    let p = [1.0, 2.0, 3.0, 1.5][r.random_range(0..4)];
    let x = tensor(r, &[n, out * group]);
    let y = pnorm_forward(&x, group, p).unwrap();
    let want: Vec<f64> = x
        .data()
        .chunks(group)
        .map(|g| g.iter().map(|v| v.abs().powf(p)).sum::<f64>().powf(1.0 / p))
        .collect();
    max_abs_diff(y.data(), &want)
}

fn timedelay_case(r: &mut Rng) -> f64 {
    let (t, d, dout) = (r.random_range(1..15), r.random_range(1..6), r.random_range(1..6));
    let m = r.random_range(1..4);
    let offsets: Vec<i32> = (0..m).map(|_| r.random_range(-4..=4)).collect();
    let x = tensor(r, &[t, d]);
    let w = tensor(r, &[d * m, dout]);
    let b = tensor(r, &[dout]);
    let y = timedelay_forward(&x, &offsets, &w, &b).unwrap();
    let mut want = Vec::new();
    for row in 0..t {
        for j in 0..dout {
            let mut s = b.data()[j];
            for (k, &o) in offsets.iter().enumerate() {
                let src = (row as i64 + o as i64).clamp(0, t as i64 - 1) as usize;
                for e in 0..d {
                    s += x.data()[src * d + e] * w.data()[(k * d + e) * dout + j];
                }
            }
            want.push(s);
        }
    }
    max_abs_diff(y.data(), &want)
}

fn softmax_case(r: &mut Rng) -> f64 {
    let (n, k) = (r.random_range(1..10), r.random_range(1..12));
    let x = tensor(r, &[n, k]);
    let y = softmax(&x).unwrap();
    let want: Vec<f64> = x
        .data()
        .chunks(k)
        .flat_map(|row| {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            row.iter().map(move |v| v.exp() / z)
        })
        .collect();
    max_abs_diff(y.data(), &want)
}

fn naive_power(frame: &[f64], n_fft: usize) -> Vec<f64> {
    (0..=n_fft / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, x) in frame.iter().enumerate() {
                let a = -2.0 * std::f64::consts::PI * ((k * n) % n_fft) as f64 / n_fft as f64;
                re += x * a.cos();
                im += x * a.sin();
            }
            re * re + im * im
        })
        .collect()
}

/// Relative (to the frame's peak) deviation of the FFT power spectrum from a
/// direct DFT of the Hamming-windowed frame.
fn dft_case(r: &mut Rng) -> f64 {
    let sample_rate = [8000u32, 16000][r.random_range(0..2)];
    let frame_length_ms = [10.0, 20.0, 25.0][r.random_range(0..3)];
    let flen = (sample_rate as f64 * frame_length_ms / 1000.0) as usize;
    let fft_size = flen.next_power_of_two() << r.random_range(0..2);
    let cfg = FrameConfig {
        sample_rate,
        frame_length_ms,
        fft_size,
        ..FrameConfig::default()
    };
    let shift = (sample_rate as f64 * cfg.frame_shift_ms / 1000.0) as usize;
    let len = flen + r.random_range(0..3 * shift);
    let samples = uniform(r, len);
    let p = power_spectrogram(&AudioBuffer::new(samples.clone(), sample_rate).unwrap(), &cfg).unwrap();
    let window: Vec<f64> = (0..flen)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (flen - 1) as f64).cos())
        .collect();
    let mut worst: f64 = 0.0;
    for t in 0..p.frames() {
        let frame: Vec<f64> = samples[t * shift..t * shift + flen].iter().zip(&window).map(|(x, w)| x * w).collect();
        let want = naive_power(&frame, fft_size);
        let peak = want.iter().copied().fold(f64::MIN_POSITIVE, f64::max);
        worst = worst.max(max_abs_diff(p.row(t), &want) / peak);
    }
    worst
}

/// Runs every operator against its oracle on `cases` random shapes.
pub fn forward_oracles(cases: usize, seed: u64) -> Vec<OracleResult> {
    let ops: [(&'static str, fn(&mut Rng) -> f64, f64); 7] = [
        ("matmul", matmul_case, FORWARD_TOL),
        ("conv2d", conv_case, FORWARD_TOL),
        ("maxpool", pool_case, FORWARD_TOL),
        ("pnorm", pnorm_case, FORWARD_TOL),
        ("timedelay", timedelay_case, FORWARD_TOL),
        ("softmax", softmax_case, FORWARD_TOL),
        ("dft", dft_case, DFT_TOL),
    ];
    ops.iter()
        .enumerate()
        .map(|(i, &(op, case, tol))| {
            let mut r = rng::stream(seed, i as u64);
            let max_err = (0..cases).map(|_| case(&mut r)).fold(0.0, f64::max);
            OracleResult { op, cases, max_err, tol }
        })
        .collect()
}

/// Gradient-check outcome for one network.
#[derive(Debug, Clone)]
pub struct GradResult {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

impl GradResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_TOL && self.checked > 0
    }
}

fn check(name: &str, spec: &NetworkSpec, aux_dims: &[usize], rows: &[usize], ce: bool, seed: u64) -> GradResult {
    spec.validate().unwrap();
    let mut r = rng::stream(seed, 0);
    let n: usize = rows.iter().sum();
    let input = uniform(&mut r, n * spec.input_dim);
    let aux: Vec<Vec<f64>> = aux_dims.iter().map(|&d| uniform(&mut r, n * d)).collect();
    let aux_refs: Vec<&[f64]> = aux.iter().map(Vec::as_slice).collect();
    let mut segments = Vec::new();
    let mut start = 0;
    for &len in rows {
        segments.push(Segment { start, len });
        start += len;
    }
    let k = spec.output_dim();
    let objective = if ce {
        Objective::CrossEntropy((0..n).map(|_| r.random_range(0..k)).collect())
    } else {
        Objective::Mse(uniform(&mut r, n * k))
    };
    let problem = Problem {
        spec,
        input: &input,
        aux: &aux_refs,
        segments: &segments,
        objective: &objective,
    };
    let params = ParamStore::init(spec, &mut r);
    let rep = gradient_check(&problem, &params, 12, seed).unwrap();
    GradResult {
        name: name.to_string(),
        max_rel_error: rep.max_rel_error,
        checked: rep.checked,
    }
}

fn spec(input_dim: usize, aux_dims: Vec<usize>, layers: Vec<LayerSpec>) -> NetworkSpec {
    let tap = layers.len() - 1;
    NetworkSpec {
        input_dim,
        aux_dims,
        layers,
        tap,
    }
}

/// One small network per layer kind.
pub fn layer_gradients(seed: u64) -> Vec<GradResult> {
    let fc = |input, output| LayerSpec::FullyConnected { input, output };
    let conv = ConvGeom {
        in_c: 2,
        in_h: 5,
        in_w: 6,
        out_c: 3,
        kh: 2,
        kw: 3,
        sh: 1,
        sw: 1,
    };
    let pool = PoolGeom {
        c: 3,
        in_h: 4,
        in_w: 4,
        ph: 2,
        pw: 2,
        sh: 2,
        sw: 2,
    };
    let cases: Vec<(&str, NetworkSpec, Vec<usize>, bool)> = vec![
        ("fc", spec(5, vec![], vec![fc(5, 4)]), vec![], false),
        ("conv2d", spec(60, vec![], vec![LayerSpec::Conv2D(conv)]), vec![], false),
        (
            "maxpool2d",
            spec(60, vec![], vec![LayerSpec::Conv2D(conv), LayerSpec::MaxPool2D(pool)]),
            vec![],
            false,
        ),
        (
            "timedelay",
            spec(4, vec![], vec![LayerSpec::TimeDelay { input: 4, output: 3, offsets: vec![-2, 0, 1] }]),
            vec![],
            false,
        ),
        (
            "pnorm",
            spec(5, vec![], vec![fc(5, 8), LayerSpec::PNorm { input: 8, output: 4, p: 2.0 }]),
            vec![],
            false,
        ),
        ("relu", spec(5, vec![], vec![fc(5, 6), LayerSpec::ReLU { dim: 6 }, fc(6, 3)]), vec![], false),
        (
            "softmax",
            spec(5, vec![], vec![fc(5, 4), LayerSpec::Softmax { dim: 4 }]),
            vec![],
            true,
        ),
        (
            "softmax-mse",
            spec(5, vec![], vec![fc(5, 4), LayerSpec::Softmax { dim: 4 }]),
            vec![],
            false,
        ),
        (
            "concat",
            spec(4, vec![3], vec![fc(4, 5), LayerSpec::Concat { input: 5, extra: 3, slot: 0 }, fc(8, 2)]),
            vec![3],
            false,
        ),
        (
            "lengthnorm",
            spec(5, vec![], vec![fc(5, 4), LayerSpec::LengthNorm { dim: 4 }]),
            vec![],
            false,
        ),
    ];
    cases
        .into_iter()
        .enumerate()
        .map(|(i, (name, s, aux, ce))| check(name, &s, &aux, &[7, 5], ce, seed + i as u64))
        .collect()
}

/// Every network the cascade builds, at desk size.
pub fn network_gradients(seed: u64) -> Vec<GradResult> {
    let arch = ArchConfig::desk();
    let ling_in = (2 * arch.ling_splice + 1) * arch.fbank_dim;
    let (q, s, e) = (10, arch.spk_feature, arch.emo_pnorm_out);
    let gen_in = |d: usize| (2 * arch.recon_splice + 1) * d;
    let nets: Vec<(&str, NetworkSpec, Vec<usize>, bool)> = vec![
        ("linguistic", build_linguistic_net(q, ling_in, &arch).unwrap(), vec![], true),
        ("speaker-idf", build_speaker_net(20, 0, &arch).unwrap(), vec![], true),
        ("speaker-cdf", build_speaker_net(20, q, &arch).unwrap(), vec![q], true),
        ("emotion-baseline", build_emotion_net(4, &[], &arch).unwrap(), vec![], true),
        ("emotion-ling-spk", build_emotion_net(4, &[q, s], &arch).unwrap(), vec![q, s], true),
        ("generator-q", build_generator(gen_in(q), 129, &arch).unwrap(), vec![], false),
        ("generator-s", build_generator(gen_in(s), 129, &arch).unwrap(), vec![], false),
        ("generator-e", build_generator(gen_in(e), 129, &arch).unwrap(), vec![], false),
    ];
    nets.into_iter()
        .enumerate()
        .map(|(i, (name, s, aux, ce))| check(name, &s, &aux, &[14, 9], ce, seed + 100 + i as u64))
        .collect()
}
