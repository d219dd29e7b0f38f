//! Speaker identification, emotion metrics and factor projection.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::cascade::{extract_utterance, CorpusData, Stage};
use crate::error::{Error, Result};
use crate::models::{length_normalize, FactorStream};
use crate::nn::train::{argmax, sequence_posteriors};
use crate::nn::{FrameLabels, Model, Sequence};
use crate::rng;

/// Utterance- or speaker-level speaker representation of unit length.
#[derive(Debug, Clone, PartialEq)]
pub struct DVector {
    pub id: String,
    pub vector: Vec<f64>,
}

fn mean_rows<'a>(rows: impl Iterator<Item = &'a [f64]>, dim: usize) -> (Vec<f64>, usize) {
    let mut sum = vec![0.0; dim];
    let mut n = 0;
    for r in rows {
        for (s, v) in sum.iter_mut().zip(r) {
            *s += v;
        }
        n += 1;
    }
    (sum.into_iter().map(|s| s / n.max(1) as f64).collect(), n)
}

/// Mean of the frame rows, length-normalized.
pub fn dvector(stream: &FactorStream) -> Result<DVector> {
    if stream.frames() == 0 {
        return Err(Error::Empty(format!("utterance {} has no speaker frames", stream.utt_id)));
    }
    let (mean, _) = mean_rows(stream.rows(), stream.dim());
    Ok(DVector {
        id: stream.utt_id.clone(),
        vector: length_normalize(&mean),
    })
}

/// Dot product of two unit vectors.
pub fn cosine(a: &DVector, b: &DVector) -> f64 {
    a.vector.iter().zip(&b.vector).map(|(x, y)| x * y).sum()
}

/// Index of the enrollment with the highest cosine score; ties go to the
/// lowest index.
pub fn top1_identify(enrollments: &[DVector], test: &DVector) -> Result<usize> {
    if enrollments.is_empty() {
        return Err(Error::Empty("no enrolled speakers".into()));
    }
    let scores: Vec<f64> = enrollments.iter().map(|e| cosine(e, test)).collect();
    Ok(argmax(&scores))
}

/// Enrollment duration and test segment length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialCondition {
    pub enroll_seconds: f64,
    pub test_frames: usize,
}

impl TrialCondition {
    pub fn validate(&self) -> Result<()> {
        if !(self.enroll_seconds > 0.0) || self.test_frames == 0 {
            return Err(Error::Invalid(format!(
                "trial condition needs positive enrollment and test lengths, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Short name such as `C(30-20f)`.
    pub fn label(&self) -> String {
        format!("C({}-{}f)", self.enroll_seconds, self.test_frames)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SidResult {
    pub condition: TrialCondition,
    pub correct: usize,
    pub total: usize,
}

impl SidResult {
    /// Top-1 identification rate.
    pub fn idr(&self) -> f64 {
        self.correct as f64 / self.total.max(1) as f64
    }
}

/// The networks a speaker system needs: a speaker net and, when that net
/// is conditioned, the linguistic net feeding it.
#[derive(Debug, Clone, Copy)]
pub struct SpeakerSystem<'a> {
    pub linguistic: Option<&'a Model>,
    pub speaker: &'a Model,
}

impl SpeakerSystem<'_> {
    /// Frame-level speaker factors of normalized features, computed on
    /// these frames alone.
    pub fn factors(&self, utt: &str, fbank: &crate::dsp::FeatureMatrix) -> Result<FactorStream> {
        if self.speaker.spec.aux_dims.is_empty() {
            return extract_utterance(self.speaker, Stage::SpkIdf, utt, fbank, &[]);
        }
        let ling = self
            .linguistic
            .ok_or_else(|| Error::Invalid("conditioned speaker net needs the linguistic net".into()))?;
        let q = extract_utterance(ling, Stage::Ling, utt, fbank, &[])?;
        extract_utterance(self.speaker, Stage::SpkCdf, utt, fbank, &[&q])
    }
}

/// Enrolls every speaker from the first `enroll_seconds` of its training
/// utterances and scores non-overlapping `test_frames` windows cut from its
/// held-out utterances, at most `max_segments` per speaker chosen by a
/// seeded shuffle.
pub fn run_sid_eval(
    system: SpeakerSystem,
    data: &CorpusData,
    conditions: &[TrialCondition],
    max_segments: usize,
    seed: u64,
) -> Result<Vec<SidResult>> {
    let m = &data.manifest;
    let shift_ms = data.fbank.first().map_or(10.0, |f| f.frame_shift_ms);
    // Whole-utterance factors of training utterances, computed lazily.
    let mut train_factors: Vec<Option<FactorStream>> = vec![None; data.len()];
    let mut results = Vec::new();
    for cond in conditions {
        cond.validate()?;
        let enroll_frames = (cond.enroll_seconds * 1000.0 / shift_ms).round() as usize;
        let mut enrollments = Vec::with_capacity(m.n_speakers);
        for spk in 0..m.n_speakers {
            let utts: Vec<usize> = (0..data.len())
                .filter(|&i| !data.heldout[i] && m.utts[i].speaker == spk)
                .collect();
            let available: usize = utts.iter().map(|&i| m.utts[i].frames).sum();
            if available < enroll_frames {
                return Err(Error::Insufficient(format!(
                    "speaker {spk} has {available} training frames, condition {} needs {enroll_frames}",
                    cond.label()
                )));
            }
            let mut need = enroll_frames;
            let mut rows: Vec<f64> = Vec::new();
            let mut dim = 0;
            for &i in &utts {
                if need == 0 {
                    break;
                }
                if train_factors[i].is_none() {
                    train_factors[i] = Some(system.factors(&m.utts[i].id, &data.fbank[i])?);
                }
                let f = train_factors[i].as_ref().expect("computed above");
                let take = need.min(f.frames());
                rows.extend_from_slice(&f.data()[..take * f.dim()]);
                dim = f.dim();
                need -= take;
            }
            let (mean, _) = mean_rows(rows.chunks_exact(dim), dim);
            enrollments.push(DVector {
                id: format!("spk{spk:02}"),
                vector: length_normalize(&mean),
            });
        }

        let mut trials: Vec<(usize, usize, usize)> = Vec::new();
        for spk in 0..m.n_speakers {
            let mut segs: Vec<(usize, usize, usize)> = (0..data.len())
                .filter(|&i| data.heldout[i] && m.utts[i].speaker == spk)
                .flat_map(|i| (0..m.utts[i].frames / cond.test_frames).map(move |k| (spk, i, k * cond.test_frames)))
                .collect();
            if segs.is_empty() {
                return Err(Error::Insufficient(format!(
                    "speaker {spk} has no held-out speech of {} frames for condition {}",
                    cond.test_frames,
                    cond.label()
                )));
            }
            let mut r = rng::stream(seed, spk as u64);
            segs.shuffle(&mut r);
            segs.truncate(max_segments);
            trials.extend(segs);
        }
        let hits: Vec<bool> = trials
            .par_iter()
            .map(|&(spk, i, start)| {
                let seg = data.fbank[i].slice_frames(start, start + cond.test_frames)?;
                let f = system.factors(&m.utts[i].id, &seg)?;
                Ok(top1_identify(&enrollments, &dvector(&f)?)? == spk)
            })
            .collect::<Result<_>>()?;
        let correct = hits.iter().filter(|&&h| h).count();
        log::info!("{}: {correct}/{} correct", cond.label(), hits.len());
        results.push(SidResult {
            condition: *cond,
            correct,
            total: hits.len(),
        });
    }
    Ok(results)
}

/// Square count matrix; rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Shape("confusion matrix must be square".into()));
        }
        Ok(Self {
            k,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.k + pred] += 1;
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn true_positives(&self, i: usize) -> u64 {
        self.get(i, i)
    }

    /// Items of other classes predicted as class `i`.
    pub fn false_positives(&self, i: usize) -> u64 {
        (0..self.k).filter(|&j| j != i).map(|j| self.get(j, i)).sum()
    }
}

pub fn confusion(truth: &[usize], pred: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(Error::Shape(format!("{} labels but {} predictions", truth.len(), pred.len())));
    }
    let mut cm = ConfusionMatrix::new(k);
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= k || p >= k {
            return Err(Error::Invalid(format!("label {} outside 0..{k}", t.max(p))));
        }
        cm.add(t, p);
    }
    Ok(cm)
}

/// `sum TP_i / sum (TP_i + FP_i)`.
pub fn acc(cm: &ConfusionMatrix) -> Result<f64> {
    let tp: u64 = (0..cm.k).map(|i| cm.true_positives(i)).sum();
    let denom: u64 = (0..cm.k).map(|i| cm.true_positives(i) + cm.false_positives(i)).sum();
    if denom == 0 {
        return Err(Error::Empty("accuracy of an empty confusion matrix".into()));
    }
    Ok(tp as f64 / denom as f64)
}

/// Mean per-class precision; a class never predicted contributes 0.
pub fn map(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.total() == 0 || cm.k == 0 {
        return Err(Error::Empty("precision of an empty confusion matrix".into()));
    }
    let sum: f64 = (0..cm.k)
        .map(|i| {
            let tp = cm.true_positives(i);
            let d = tp + cm.false_positives(i);
            if d == 0 {
                0.0
            } else {
                tp as f64 / d as f64
            }
        })
        .sum();
    Ok(sum / cm.k as f64)
}

/// Argmax of the mean of `frames x classes` posteriors; ties go to the
/// lowest class.
pub fn utterance_emotion(posteriors: &[f64], classes: usize) -> Result<usize> {
    if classes == 0 || posteriors.is_empty() || !posteriors.len().is_multiple_of(classes) {
        return Err(Error::Shape(format!(
            "{} posterior values do not form rows of {classes}",
            posteriors.len()
        )));
    }
    let (mean, _) = mean_rows(posteriors.chunks_exact(classes), classes);
    Ok(argmax(&mean))
}

/// Frame- and utterance-level emotion metrics of one system.
#[derive(Debug, Clone, PartialEq)]
pub struct AerResult {
    pub frame: ConfusionMatrix,
    pub utterance: ConfusionMatrix,
}

impl AerResult {
    pub fn frame_acc(&self) -> Result<f64> {
        acc(&self.frame)
    }

    pub fn frame_map(&self) -> Result<f64> {
        map(&self.frame)
    }

    pub fn utt_acc(&self) -> Result<f64> {
        acc(&self.utterance)
    }

    pub fn utt_map(&self) -> Result<f64> {
        map(&self.utterance)
    }
}

/// Scores an emotion network on the held-out utterances. `conditioning`
/// holds each utterance's cached conditioning streams in slot order.
pub fn run_aer_eval(model: &Model, data: &CorpusData, conditioning: &[Vec<FactorStream>]) -> Result<AerResult> {
    let m = &data.manifest;
    let k = model.spec.output_dim();
    let splice = crate::models::input_splice(&model.spec, data.fbank.first().map_or(1, |f| f.dim()))?;
    let held: Vec<usize> = (0..data.len()).filter(|&i| data.heldout[i]).collect();
    if held.is_empty() {
        return Err(Error::Empty("no held-out utterances to score".into()));
    }
    let posts: Vec<Vec<f64>> = held
        .par_iter()
        .map(|&i| {
            let seq = Sequence {
                input: &data.fbank[i],
                aux: conditioning.get(i).map_or_else(Vec::new, |c| c.iter().map(|s| s.data()).collect()),
                labels: FrameLabels::Constant(m.utts[i].emotion),
            };
            sequence_posteriors(&model.spec, &model.params, splice, &seq)
        })
        .collect::<Result<_>>()?;
    let mut frame = ConfusionMatrix::new(k);
    let mut utterance = ConfusionMatrix::new(k);
    for (&i, p) in held.iter().zip(&posts) {
        let truth = m.utts[i].emotion;
        for row in p.chunks_exact(k) {
            frame.add(truth, argmax(row));
        }
        utterance.add(truth, utterance_emotion(p, k)?);
    }
    Ok(AerResult { frame, utterance })
}

/// Projects `vectors` onto the top `dim` principal axes of their covariance.
/// Each axis is signed so its largest-magnitude component is positive.
pub fn pca_project(vectors: &[Vec<f64>], dim: usize) -> Result<Vec<Vec<f64>>> {
    let (axes, mean) = pca_axes(vectors, dim)?;
    Ok(vectors
        .iter()
        .map(|v| {
            axes.iter()
                .map(|a| a.iter().zip(v).zip(&mean).map(|((a, x), m)| a * (x - m)).sum())
                .collect()
        })
        .collect())
}

/// Principal axes (descending eigenvalue) and the data mean.
pub fn pca_axes(vectors: &[Vec<f64>], dim: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let n = vectors.len();
    if n == 0 {
        return Err(Error::Empty("no vectors to project".into()));
    }
    let d = vectors[0].len();
    if vectors.iter().any(|v| v.len() != d) {
        return Err(Error::Shape("vectors differ in length".into()));
    }
    if dim == 0 || dim > d {
        return Err(Error::Invalid(format!("cannot project {d}-dim vectors onto {dim} axes")));
    }
    let (mean, _) = mean_rows(vectors.iter().map(Vec::as_slice), d);
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for v in vectors {
        let c: Vec<f64> = v.iter().zip(&mean).map(|(x, m)| x - m).collect();
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += c[i] * c[j];
            }
        }
    }
    cov /= n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axes = order[..dim]
        .iter()
        .map(|&c| {
            let mut a: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
            let big = a.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            if big < 0.0 {
                a.iter_mut().for_each(|x| *x = -*x);
            }
            a
        })
        .collect();
    Ok((axes, mean))
}

/// `metric,value` rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<(String, f64)>,
    pub notes: Vec<String>,
}

impl EvalReport {
    pub fn push(&mut self, metric: impl Into<String>, value: f64) {
        self.rows.push((metric.into(), value));
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.rows.iter().find(|(m, _)| m == metric).map(|(_, v)| *v)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for n in &self.notes {
            let _ = writeln!(s, "# {n}");
        }
        s.push_str("metric,value\n");
        for (m, v) in &self.rows {
            let _ = writeln!(s, "{m},{v}");
        }
        s
    }
}

/// `id,label,x,y` rows.
pub fn pca_csv(ids: &[String], labels: &[usize], points: &[Vec<f64>]) -> String {
    let mut s = String::from("id,label,x,y\n");
    for ((id, l), p) in ids.iter().zip(labels).zip(points) {
        let _ = writeln!(s, "{id},{l},{},{}", p[0], p.get(1).copied().unwrap_or(0.0));
    }
    s
}
