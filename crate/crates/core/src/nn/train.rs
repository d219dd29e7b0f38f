//! Minibatch training of frame classifiers over variable-length sequences.
//!
//! An epoch cuts every training sequence into chunks of consecutive frames
//! (single frames for networks without temporal context), shuffles the
//! chunks globally with the run seed and groups them into minibatches. Each
//! chunk is padded with the network's time-delay context, clamped to the
//! sequence, and forms its own time segment, so loss-bearing frames see
//! exactly the activations whole-sequence inference would produce.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::network::{network_backward, network_forward, NetworkSpec, ParamStore};
use super::ops::{self, Segment};
use super::optim::{clip_grad_norm, sgd_step, TrainConfig};
use crate::dsp::{splice_row_into, FeatureMatrix};
use crate::error::{Error, Result};
use crate::rng;

/// Class label of each frame of a sequence.
#[derive(Debug, Clone, Copy)]
pub enum FrameLabels<'a> {
    PerFrame(&'a [u16]),
    Constant(usize),
}

impl FrameLabels<'_> {
    pub fn at(&self, t: usize) -> usize {
        match self {
            FrameLabels::PerFrame(l) => l[t] as usize,
            FrameLabels::Constant(c) => *c,
        }
    }
}

/// One training sequence: unspliced input frames, conditioning rows per
/// auxiliary slot, and labels.
#[derive(Debug, Clone)]
pub struct Sequence<'a> {
    pub input: &'a FeatureMatrix,
    pub aux: Vec<&'a [f64]>,
    pub labels: FrameLabels<'a>,
}

/// Loss-bearing frame range `start..end` of sequence `seq`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Chunk {
    pub seq: usize,
    pub start: usize,
    pub end: usize,
}

/// Cuts each sequence into chunks of `len` frames with a random phase,
/// shuffles them and keeps a prefix covering at least `cap` frames.
pub fn plan_epoch(lengths: &[usize], len: usize, cap: Option<usize>, rng: &mut rng::Rng) -> Vec<Chunk> {
    let mut chunks = Vec::new();
    for (seq, &t) in lengths.iter().enumerate() {
        if t == 0 {
            continue;
        }
        let phase = if len > 1 { rng.random_range(0..len) } else { 0 };
        let mut start = 0;
        let mut end = phase.min(t);
        if end == 0 {
            end = len.min(t);
        }
        while start < t {
            chunks.push(Chunk { seq, start, end });
            start = end;
            end = (end + len).min(t);
        }
    }
    chunks.shuffle(rng);
    if let Some(cap) = cap {
        let mut total = 0;
        let keep = chunks
            .iter()
            .take_while(|c| {
                let before = total;
                total += c.end - c.start;
                before < cap
            })
            .count();
        chunks.truncate(keep);
    }
    chunks
}

/// Network input assembled from a list of chunks.
#[derive(Debug, Clone)]
pub struct Batch {
    pub input: Vec<f64>,
    pub aux: Vec<Vec<f64>>,
    pub segments: Vec<Segment>,
    /// Row indices into the sequences, for callers that need per-row targets.
    pub rows: Vec<(usize, usize)>,
    pub loss_mask: Vec<bool>,
}

/// Builds the padded, spliced rows for `chunks`. `context` is the
/// network's `(left, right)` time-delay context.
pub fn build_batch(
    inputs: &[&FeatureMatrix],
    aux: &[Vec<&[f64]>],
    aux_dims: &[usize],
    splice: usize,
    context: (usize, usize),
    chunks: &[Chunk],
) -> Batch {
    let mut b = Batch {
        input: Vec::new(),
        aux: vec![Vec::new(); aux_dims.len()],
        segments: Vec::with_capacity(chunks.len()),
        rows: Vec::new(),
        loss_mask: Vec::new(),
    };
    for c in chunks {
        let feat = inputs[c.seq];
        let lo = c.start.saturating_sub(context.0);
        let hi = (c.end + context.1).min(feat.frames());
        b.segments.push(Segment {
            start: b.rows.len(),
            len: hi - lo,
        });
        for t in lo..hi {
            splice_row_into(feat, t, splice, splice, &mut b.input);
            for (slot, &d) in aux_dims.iter().enumerate() {
                b.aux[slot].extend_from_slice(&aux[c.seq][slot][t * d..(t + 1) * d]);
            }
            b.rows.push((c.seq, t));
            b.loss_mask.push((c.start..c.end).contains(&t));
        }
    }
    b
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept (lowest validation loss).
    pub best_epoch: usize,
    /// Set when the final validation loss exceeds the first.
    pub val_loss_rose: bool,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,val_accuracy,learning_rate\n");
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{}",
                e.epoch, e.train_loss, e.val_loss, e.val_accuracy, e.learning_rate
            );
        }
        let _ = writeln!(s, "# best_epoch={} val_loss_rose={}", self.best_epoch, self.val_loss_rose);
        s
    }

    /// Applies the end-of-epoch schedule: returns the next learning rate and
    /// whether training should stop.
    fn schedule(&self, cfg: &TrainConfig, lr: f64) -> (f64, bool) {
        let n = self.epochs.len();
        if n < 2 {
            return (lr, false);
        }
        // Halving starts only once validation loss has improved by the
        // threshold, so an initial plateau does not anneal the rate away.
        let improved = |w: &[EpochLog]| w[0].val_loss - w[1].val_loss >= cfg.lr_halving_threshold;
        let armed = self.epochs[..n - 1].windows(2).any(improved);
        let next_lr = if armed && !improved(&self.epochs[n - 2..]) { lr * 0.5 } else { lr };
        let rises = self
            .epochs
            .windows(2)
            .rev()
            .take_while(|w| w[1].val_loss > w[0].val_loss)
            .count();
        (next_lr, rises >= cfg.early_stop_patience)
    }
}

fn check_sequences(spec: &NetworkSpec, splice: usize, seqs: &[Sequence]) -> Result<()> {
    let classes = spec.output_dim();
    for (i, s) in seqs.iter().enumerate() {
        let t = s.input.frames();
        if s.input.dim() * (2 * splice + 1) != spec.input_dim {
            return Err(Error::Shape(format!(
                "sequence {i}: {}-wide frames spliced by {splice} do not give input width {}",
                s.input.dim(),
                spec.input_dim
            )));
        }
        if s.aux.len() != spec.aux_dims.len() {
            return Err(Error::Shape(format!("sequence {i}: wrong number of conditioning streams")));
        }
        for (a, d) in s.aux.iter().zip(&spec.aux_dims) {
            if a.len() != t * d {
                return Err(Error::Shape(format!("sequence {i}: conditioning stream not frame-aligned")));
            }
        }
        match s.labels {
            FrameLabels::PerFrame(l) if l.len() != t => {
                return Err(Error::Shape(format!("sequence {i}: {} labels for {t} frames", l.len())));
            }
            _ => {}
        }
        if (0..t).any(|f| s.labels.at(f) >= classes) {
            return Err(Error::Invalid(format!("sequence {i}: label outside 0..{classes}")));
        }
    }
    Ok(())
}

/// Whole-sequence class posteriors, `frames x classes`.
pub fn sequence_posteriors(spec: &NetworkSpec, params: &ParamStore, splice: usize, seq: &Sequence) -> Result<Vec<f64>> {
    let t = seq.input.frames();
    let chunk = [Chunk { seq: 0, start: 0, end: t }];
    let b = build_batch(&[seq.input], std::slice::from_ref(&seq.aux), &spec.aux_dims, splice, (0, 0), &chunk);
    let aux: Vec<&[f64]> = b.aux.iter().map(Vec::as_slice).collect();
    let trace = network_forward(spec, params, &b.input, &aux, &b.segments, usize::MAX)?;
    Ok(trace.output().to_vec())
}

/// Mean frame cross-entropy and frame accuracy over `seqs`.
pub fn evaluate(spec: &NetworkSpec, params: &ParamStore, splice: usize, seqs: &[Sequence]) -> Result<(f64, f64)> {
    let k = spec.output_dim();
    let (mut loss, mut correct, mut n) = (0.0, 0usize, 0usize);
    for s in seqs {
        let post = sequence_posteriors(spec, params, splice, s)?;
        for (t, row) in post.chunks_exact(k).enumerate() {
            let label = s.labels.at(t);
            loss -= row[label].max(ops::PROB_FLOOR).ln();
            if argmax(row) == label {
                correct += 1;
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Empty("no validation frames".into()));
    }
    Ok((loss / n as f64, correct as f64 / n as f64))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Trains a softmax classifier with momentum SGD and returns the
/// parameters of the epoch with the lowest validation loss.
pub fn train_classifier(
    spec: &NetworkSpec,
    init: ParamStore,
    splice: usize,
    train: &[Sequence],
    val: &[Sequence],
    cfg: &TrainConfig,
) -> Result<(ParamStore, TrainLog)> {
    cfg.validate()?;
    spec.validate()?;
    init.check_matches(spec)?;
    check_sequences(spec, splice, train)?;
    check_sequences(spec, splice, val)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty("training and validation sets must both be non-empty".into()));
    }
    let sm = spec
        .softmax_index()
        .filter(|&i| i + 1 == spec.layers.len())
        .ok_or_else(|| Error::Invalid("classifier must end in a softmax layer".into()))?;
    let k = spec.output_dim();
    let context = spec.context();
    let chunk_len = if context == (0, 0) { 1 } else { cfg.chunk_frames };
    let lengths: Vec<usize> = train.iter().map(|s| s.input.frames()).collect();
    let inputs: Vec<&FeatureMatrix> = train.iter().map(|s| s.input).collect();
    let aux: Vec<Vec<&[f64]>> = train.iter().map(|s| s.aux.clone()).collect();

    let mut params = init;
    let mut velocity = ParamStore::zeros(spec);
    let mut best = params.clone();
    let mut best_loss = f64::INFINITY;
    let mut log = TrainLog::default();
    let mut lr = cfg.learning_rate;

    for epoch in 0..cfg.epochs {
        let mut r = rng::stream(cfg.seed, epoch as u64);
        let chunks = plan_epoch(&lengths, chunk_len, cfg.frames_per_epoch, &mut r);
        let (mut loss_sum, mut frames) = (0.0, 0usize);
        let mut i = 0;
        while i < chunks.len() {
            let mut j = i;
            let mut n = 0;
            while j < chunks.len() && n < cfg.minibatch_size {
                n += chunks[j].end - chunks[j].start;
                j += 1;
            }
            let b = build_batch(&inputs, &aux, &spec.aux_dims, splice, context, &chunks[i..j]);
            let labels: Vec<Option<usize>> = b
                .rows
                .iter()
                .zip(&b.loss_mask)
                .map(|(&(s, t), &m)| m.then(|| train[s].labels.at(t)))
                .collect();
            let a: Vec<&[f64]> = b.aux.iter().map(Vec::as_slice).collect();
            let trace = network_forward(spec, &params, &b.input, &a, &b.segments, usize::MAX)?;
            let (loss, grad) = ops::ce_masked(trace.output(), k, &labels);
            let mut grads = network_backward(spec, &params, &trace, grad, sm)?;
            if let Some(max) = cfg.max_grad_norm {
                clip_grad_norm(&mut grads, max);
            }
            sgd_step(&mut params, &grads, &mut velocity, lr, cfg.momentum);
            loss_sum += loss * n as f64;
            frames += n;
            i = j;
        }
        if !params.is_finite() {
            return Err(Error::Invalid(format!("training diverged in epoch {epoch}; lower the learning rate")));
        }
        let (val_loss, val_acc) = evaluate(spec, &params, splice, val)?;
        log.epochs.push(EpochLog {
            epoch,
            train_loss: loss_sum / frames.max(1) as f64,
            val_loss,
            val_accuracy: val_acc,
            learning_rate: lr,
        });
        log::info!(
            "epoch {epoch}: train loss {:.4}, val loss {val_loss:.4}, val acc {val_acc:.4}, lr {lr}",
            loss_sum / frames.max(1) as f64
        );
        if val_loss < best_loss {
            best_loss = val_loss;
            best = params.clone();
            log.best_epoch = epoch;
        }
        let (next_lr, stop) = log.schedule(cfg, lr);
        lr = next_lr;
        if stop {
            log::info!("validation loss rose {} epochs in a row; stopping", cfg.early_stop_patience);
            break;
        }
    }
    let first = log.epochs.first().map(|e| e.val_loss).unwrap_or(0.0);
    let last = log.epochs.last().map(|e| e.val_loss).unwrap_or(0.0);
    log.val_loss_rose = last > first;
    if log.val_loss_rose {
        log::warn!("final validation loss {last:.4} exceeds the first epoch's {first:.4}");
    }
    Ok((best, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::FeatureKind;
    use crate::nn::LayerSpec;
    use rand::SeedableRng;

    #[test]
    fn epoch_plan_covers_every_frame_once() {
        let mut r = rng::Rng::seed_from_u64(3);
        let lengths = [10, 1, 0, 37];
        let chunks = plan_epoch(&lengths, 8, None, &mut r);
        let mut seen = [vec![0; 10], vec![0; 1], vec![], vec![0; 37]];
        for c in &chunks {
            assert!(c.end > c.start && c.end - c.start <= 8);
            for t in c.start..c.end {
                seen[c.seq][t] += 1;
            }
        }
        assert!(seen.iter().flatten().all(|&n| n == 1));
        let capped = plan_epoch(&lengths, 1, Some(5), &mut r);
        assert_eq!(capped.len(), 5);
    }

    #[test]
    fn chunked_rows_match_whole_sequence_forward() {
        let spec = NetworkSpec {
            input_dim: 6,
            aux_dims: vec![],
            layers: vec![
                LayerSpec::TimeDelay { input: 6, output: 4, offsets: vec![-2, 0, 1] },
                LayerSpec::ReLU { dim: 4 },
                LayerSpec::TimeDelay { input: 4, output: 3, offsets: vec![-1, 0, 2] },
            ],
            tap: 2,
        };
        let mut r = rng::Rng::seed_from_u64(1);
        let params = ParamStore::init(&spec, &mut r);
        let data: Vec<f64> = (0..40).map(|i| ((i * 7) % 11) as f64 / 5.0 - 1.0).collect();
        let feat = FeatureMatrix::new(20, 2, data, 10.0, FeatureKind::LogFbank).unwrap();
        let whole = build_batch(&[&feat], &[vec![]], &[], 1, (0, 0), &[Chunk { seq: 0, start: 0, end: 20 }]);
        let full = network_forward(&spec, &params, &whole.input, &[], &whole.segments, usize::MAX).unwrap();
        let chunks = [Chunk { seq: 0, start: 5, end: 9 }, Chunk { seq: 0, start: 0, end: 3 }, Chunk { seq: 0, start: 17, end: 20 }];
        let b = build_batch(&[&feat], &[vec![]], &[], 1, spec.context(), &chunks);
        let part = network_forward(&spec, &params, &b.input, &[], &b.segments, usize::MAX).unwrap();
        let mut checked = 0;
        for (i, (&(_, t), &m)) in b.rows.iter().zip(&b.loss_mask).enumerate() {
            if m {
                assert_eq!(&part.output()[i * 3..(i + 1) * 3], &full.output()[t * 3..(t + 1) * 3]);
                checked += 1;
            }
        }
        assert_eq!(checked, 10);
    }

    #[test]
    fn schedule_halves_and_stops() {
        let cfg = TrainConfig::default();
        let mk = |v: &[f64]| TrainLog {
            epochs: v
                .iter()
                .enumerate()
                .map(|(i, &l)| EpochLog {
                    epoch: i,
                    train_loss: 0.0,
                    val_loss: l,
                    val_accuracy: 0.0,
                    learning_rate: 0.0,
                })
                .collect(),
            ..TrainLog::default()
        };
        assert_eq!(mk(&[1.0, 0.5]).schedule(&cfg, 0.1), (0.1, false));
        assert_eq!(mk(&[1.0, 0.99995]).schedule(&cfg, 0.1), (0.1, false));
        assert_eq!(mk(&[1.0, 0.99995, 0.99993]).schedule(&cfg, 0.1), (0.1, false));
        assert_eq!(mk(&[1.0, 0.9, 0.89995]).schedule(&cfg, 0.1), (0.05, false));
        assert_eq!(mk(&[1.0, 0.99995, 0.9, 0.89995]).schedule(&cfg, 0.1), (0.05, false));
        assert_eq!(mk(&[1.0, 0.5, 0.6, 0.7]).schedule(&cfg, 0.1), (0.05, false));
        assert!(mk(&[1.0, 0.5, 0.6, 0.7, 0.8]).schedule(&cfg, 0.1).1);
    }

    #[test]
    fn learns_a_separable_problem_deterministically() {
        let spec = NetworkSpec {
            input_dim: 3,
            aux_dims: vec![],
            layers: vec![
                LayerSpec::FullyConnected { input: 3, output: 8 },
                LayerSpec::ReLU { dim: 8 },
                LayerSpec::FullyConnected { input: 8, output: 2 },
                LayerSpec::Softmax { dim: 2 },
            ],
            tap: 3,
        };
        let mk = |sign: f64, seed: u64| {
            let mut r = rng::stream(seed, 0);
            let data: Vec<f64> = (0..150).map(|_| sign + 0.3 * (r.random::<f64>() - 0.5)).collect();
            FeatureMatrix::new(50, 3, data, 10.0, FeatureKind::LogFbank).unwrap()
        };
        let (a, b, c, d) = (mk(1.0, 1), mk(-1.0, 2), mk(1.0, 3), mk(-1.0, 4));
        let seq = |f: &'static FeatureMatrix, l| Sequence { input: f, aux: vec![], labels: FrameLabels::Constant(l) };
        let leak = |f: FeatureMatrix| -> &'static FeatureMatrix { Box::leak(Box::new(f)) };
        let train = vec![seq(leak(a), 0), seq(leak(b), 1)];
        let val = vec![seq(leak(c), 0), seq(leak(d), 1)];
        let cfg = TrainConfig { epochs: 5, minibatch_size: 16, ..TrainConfig::default() };
        let init = ParamStore::init(&spec, &mut rng::stream(9, 0));
        let (p1, log1) = train_classifier(&spec, init.clone(), 0, &train, &val, &cfg).unwrap();
        let (p2, log2) = train_classifier(&spec, init, 0, &train, &val, &cfg).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(log1, log2);
        assert_eq!(log1.epochs.last().unwrap().val_accuracy, 1.0);
        assert!(log1.epochs.last().unwrap().val_loss < log1.epochs[0].val_loss);
    }
}
