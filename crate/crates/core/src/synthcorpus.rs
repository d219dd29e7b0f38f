//! Labelled synthetic corpus obeying the additive log-spectral law.
//!
//! Frame `t` of an utterance by speaker `s` in emotion `e` has log spectrum
//! `T_phone[p_t] + T_spk[s] + T_emo[e] + noise`, with i.i.d. Gaussian noise of
//! standard deviation `sigma` per bin. Log filterbank features are pooled from
//! that spectrum through the mel filterbank in the power domain.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;

use crate::dsp::{log_fbank_from_power, mel_filterbank, FeatureKind, FeatureMatrix, FrameConfig};
use crate::error::{Error, Result};
use crate::io::{load_features, read_bytes, save_features, write_bytes};
use crate::rng;

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const TEMPLATES_FILE: &str = "templates.cdfm";
pub const INFO_FILE: &str = "corpus_info.tsv";

/// Stream ids reserved for template draws; utterance streams start after them.
const TEMPLATE_STREAM: u64 = 0;
const UTTERANCE_STREAM_BASE: u64 = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub phones: usize,
    pub speakers: usize,
    pub emotions: usize,
    pub utts_per_pair: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub sigma: f64,
    pub alpha_phone: f64,
    pub alpha_speaker: f64,
    pub alpha_emotion: f64,
    pub min_phone_frames: usize,
    /// Probability of leaving the current phone once its minimum duration
    /// has elapsed.
    pub phone_switch_prob: f64,
    /// Adds a per-(speaker, emotion) term to the emotion templates.
    pub speaker_emotion_interaction: bool,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            phones: 10,
            speakers: 20,
            emotions: 4,
            utts_per_pair: 8,
            min_frames: 200,
            max_frames: 400,
            sigma: 0.1,
            alpha_phone: 1.0,
            alpha_speaker: 0.5,
            alpha_emotion: 0.3,
            min_phone_frames: 5,
            phone_switch_prob: 0.3,
            speaker_emotion_interaction: false,
            seed: 1,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("phones", self.phones),
            ("speakers", self.speakers),
            ("emotions", self.emotions),
            ("utts_per_pair", self.utts_per_pair),
            ("min_frames", self.min_frames),
            ("min_phone_frames", self.min_phone_frames),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Invalid(format!("corpus {name} must be positive")));
            }
        }
        if self.phones > u16::MAX as usize + 1 {
            return Err(Error::Invalid(format!("{} phones do not fit u16 labels", self.phones)));
        }
        if self.max_frames < self.min_frames {
            return Err(Error::Invalid(format!(
                "max_frames {} < min_frames {}",
                self.max_frames, self.min_frames
            )));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Invalid(format!("sigma must be finite and >= 0, got {}", self.sigma)));
        }
        for (name, a) in [
            ("alpha_phone", self.alpha_phone),
            ("alpha_speaker", self.alpha_speaker),
            ("alpha_emotion", self.alpha_emotion),
        ] {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(Error::Invalid(format!("{name} must be finite and >= 0, got {a}")));
            }
        }
        if !(0.0..=1.0).contains(&self.phone_switch_prob) {
            return Err(Error::Invalid(format!(
                "phone_switch_prob must lie in [0, 1], got {}",
                self.phone_switch_prob
            )));
        }
        Ok(())
    }
}

/// Ground-truth spectral templates, each `dim` wide.
#[derive(Debug, Clone, PartialEq)]
pub struct Templates {
    pub dim: usize,
    pub phone: Vec<Vec<f64>>,
    pub speaker: Vec<Vec<f64>>,
    pub emotion: Vec<Vec<f64>>,
    /// Indexed `[speaker][emotion]`; empty without interaction.
    pub interaction: Vec<Vec<Vec<f64>>>,
}

impl Templates {
    /// Noise-free log spectrum of one frame.
    pub fn frame(&self, phone: usize, speaker: usize, emotion: usize) -> Vec<f64> {
        let mut v: Vec<f64> = (0..self.dim)
            .map(|k| self.phone[phone][k] + self.speaker[speaker][k] + self.emotion[emotion][k])
            .collect();
        if let Some(extra) = self.interaction.get(speaker).map(|row| &row[emotion]) {
            for (a, b) in v.iter_mut().zip(extra) {
                *a += b;
            }
        }
        v
    }

    /// All templates stacked as rows: phones, speakers, emotions, then
    /// interaction terms in speaker-major order.
    pub fn to_matrix(&self) -> Result<FeatureMatrix> {
        let mut data = Vec::new();
        let mut rows = 0;
        for r in self.phone.iter().chain(&self.speaker).chain(&self.emotion) {
            data.extend_from_slice(r);
            rows += 1;
        }
        for r in self.interaction.iter().flatten() {
            data.extend_from_slice(r);
            rows += 1;
        }
        FeatureMatrix::new(rows, self.dim, data, 0.0, FeatureKind::LogSpectrum)
    }
}

fn freq_axis(dim: usize) -> Vec<f64> {
    if dim == 1 {
        return vec![0.0];
    }
    (0..dim).map(|k| k as f64 / (dim - 1) as f64).collect()
}

fn standard_normal(rng: &mut rng::Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Draws all templates from the config seed.
pub fn gen_templates(cfg: &GenConfig, dim: usize) -> Result<Templates> {
    cfg.validate()?;
    if dim == 0 {
        return Err(Error::Invalid("template dimension must be positive".into()));
    }
    let f = freq_axis(dim);
    let mut rng = rng::stream(cfg.seed, TEMPLATE_STREAM);

    let phone = (0..cfg.phones)
        .map(|_| {
            let coef: Vec<f64> = (0..8).map(|j| standard_normal(&mut rng) / (1.0 + j as f64)).collect();
            f.iter()
                .map(|&x| cfg.alpha_phone * coef.iter().enumerate().map(|(j, a)| a * (PI * j as f64 * x).cos()).sum::<f64>())
                .collect()
        })
        .collect();

    let speaker = (0..cfg.speakers)
        .map(|_| {
            let tilt: f64 = rng.random_range(-1.0..1.0);
            let bumps: Vec<(f64, f64, f64)> = (0..3)
                .map(|_| {
                    (
                        rng.random_range(0.5..1.0),
                        rng.random_range(0.05..0.95),
                        rng.random_range(0.03..0.08),
                    )
                })
                .collect();
            f.iter()
                .map(|&x| {
                    let b: f64 = bumps
                        .iter()
                        .map(|&(amp, c, w)| amp * (-(x - c).powi(2) / (2.0 * w * w)).exp())
                        .sum();
                    cfg.alpha_speaker * (tilt * (2.0 * x - 1.0) + b)
                })
                .collect()
        })
        .collect();

    let emotion = (0..cfg.emotions)
        .map(|_| {
            let b: Vec<f64> = (0..3).map(|_| standard_normal(&mut rng)).collect();
            f.iter()
                .map(|&x| cfg.alpha_emotion * (b[0] + b[1] * (PI * x).cos() + b[2] * (2.0 * PI * x).cos()))
                .collect()
        })
        .collect();

    let interaction = if cfg.speaker_emotion_interaction {
        (0..cfg.speakers)
            .map(|_| {
                (0..cfg.emotions)
                    .map(|_| {
                        let c1 = standard_normal(&mut rng);
                        let c2 = standard_normal(&mut rng);
                        f.iter()
                            .map(|&x| 0.5 * cfg.alpha_emotion * (c1 * (PI * x).cos() + c2 * (2.0 * PI * x).cos()))
                            .collect()
                    })
                    .collect()
            })
            .collect()
    } else {
        Vec::new()
    };

    Ok(Templates {
        dim,
        phone,
        speaker,
        emotion,
        interaction,
    })
}

/// One generated utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthUtterance {
    pub phones: Vec<u16>,
    pub log_spectrum: FeatureMatrix,
    pub log_fbank: FeatureMatrix,
}

/// Phone sequence from a uniform Markov chain that holds each phone for at
/// least `min_phone_frames` frames.
fn phone_sequence(cfg: &GenConfig, frames: usize, rng: &mut rng::Rng) -> Vec<u16> {
    let mut seq = Vec::with_capacity(frames);
    let mut cur = rng.random_range(0..cfg.phones);
    let mut run = 0;
    for _ in 0..frames {
        if run >= cfg.min_phone_frames && cfg.phones > 1 && rng.random::<f64>() < cfg.phone_switch_prob {
            let next = rng.random_range(0..cfg.phones - 1);
            cur = if next >= cur { next + 1 } else { next };
            run = 0;
        }
        seq.push(cur as u16);
        run += 1;
    }
    seq
}

/// Generates one utterance. The noise is always drawn, so corpora that
/// differ only in `sigma` share labels and lengths.
pub fn gen_utterance(
    cfg: &GenConfig,
    templates: &Templates,
    frame_cfg: &FrameConfig,
    speaker: usize,
    emotion: usize,
    rng: &mut rng::Rng,
) -> Result<SynthUtterance> {
    if speaker >= templates.speaker.len() || emotion >= templates.emotion.len() {
        return Err(Error::Invalid(format!("speaker {speaker} or emotion {emotion} out of range")));
    }
    if frame_cfg.n_bins() != templates.dim {
        return Err(Error::Shape(format!(
            "frame config has {} bins, templates have {}",
            frame_cfg.n_bins(),
            templates.dim
        )));
    }
    let frames = rng.random_range(cfg.min_frames..=cfg.max_frames);
    let phones = phone_sequence(cfg, frames, rng);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let d = templates.dim;
    let mut spec = Vec::with_capacity(frames * d);
    for &p in &phones {
        let clean = templates.frame(p as usize, speaker, emotion);
        spec.extend(clean.iter().map(|v| v + cfg.sigma * noise.sample(rng)));
    }
    // Round to the stored precision so in-memory and on-disk corpora agree.
    crate::io::quantize(&mut spec);
    let power: Vec<f64> = spec.iter().map(|v| (2.0 * v).exp()).collect();
    let power = FeatureMatrix::new(frames, d, power, frame_cfg.frame_shift_ms, FeatureKind::LogSpectrum)?;
    let bank = mel_filterbank(frame_cfg)?;
    let mut fbank = log_fbank_from_power(&power, &bank, frame_cfg.log_floor, frame_cfg.frame_shift_ms)?.into_data();
    crate::io::quantize(&mut fbank);
    Ok(SynthUtterance {
        phones,
        log_spectrum: FeatureMatrix::new(frames, d, spec, frame_cfg.frame_shift_ms, FeatureKind::LogSpectrum)?,
        log_fbank: FeatureMatrix::new(frames, bank.n_mels(), fbank, frame_cfg.frame_shift_ms, FeatureKind::LogFbank)?,
    })
}

/// One manifest line. Paths are relative to the manifest directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UttRecord {
    pub id: String,
    pub speaker: usize,
    pub emotion: usize,
    pub frames: usize,
    pub fbank: PathBuf,
    pub spectrum: PathBuf,
    pub phones: PathBuf,
}

/// Corpus description loaded from a manifest directory.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub root: PathBuf,
    pub utts: Vec<UttRecord>,
    pub n_phones: usize,
    pub n_speakers: usize,
    pub n_emotions: usize,
    pub spectrum_dim: usize,
    pub sigma: f64,
}

impl CorpusManifest {
    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn load_fbank(&self, rec: &UttRecord) -> Result<FeatureMatrix> {
        let m = load_features(&self.resolve(&rec.fbank))?;
        check_frames(rec, "fbank file", m.frames())?;
        Ok(m)
    }

    pub fn load_spectrum(&self, rec: &UttRecord) -> Result<FeatureMatrix> {
        let m = load_features(&self.resolve(&rec.spectrum))?;
        check_frames(rec, "spectrum file", m.frames())?;
        Ok(m)
    }

    pub fn load_phones(&self, rec: &UttRecord) -> Result<Vec<u16>> {
        let labels = read_phone_labels(&self.resolve(&rec.phones))?;
        check_frames(rec, "phone labels", labels.len())?;
        if let Some(&bad) = labels.iter().find(|&&p| p as usize >= self.n_phones) {
            return Err(Error::Invalid(format!(
                "utterance {} has phone label {bad} >= {}",
                rec.id, self.n_phones
            )));
        }
        Ok(labels)
    }

    pub fn load_templates(&self) -> Result<FeatureMatrix> {
        load_features(&self.root.join(TEMPLATES_FILE))
    }

    pub fn find(&self, id: &str) -> Option<&UttRecord> {
        self.utts.iter().find(|u| u.id == id)
    }

    /// Reads `manifest.tsv` and `corpus_info.tsv` from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let info_path = dir.join(INFO_FILE);
        let info = String::from_utf8(read_bytes(&info_path)?)
            .map_err(|_| Error::format(&info_path, "not valid UTF-8"))?;
        let mut kv = BTreeMap::new();
        for line in info.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('\t')
                .ok_or_else(|| Error::format(&info_path, format!("expected key<TAB>value, got {line:?}")))?;
            kv.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| -> Result<String> {
            kv.get(k).cloned().ok_or_else(|| Error::format(&info_path, format!("missing key {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::format(&info_path, format!("bad value for {k}")))
        };
        let n_phones = num("phones")?;
        let n_speakers = num("speakers")?;
        let n_emotions = num("emotions")?;
        let spectrum_dim = num("spectrum_dim")?;
        let sigma: f64 = get("sigma")?
            .parse()
            .map_err(|_| Error::format(&info_path, "bad value for sigma"))?;

        let path = dir.join(MANIFEST_FILE);
        let text = String::from_utf8(read_bytes(&path)?).map_err(|_| Error::format(&path, "not valid UTF-8"))?;
        let mut utts = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 7 {
                return Err(Error::format(&path, format!("line {}: expected 7 fields, got {}", i + 1, f.len())));
            }
            let parse = |s: &str, what: &str| -> Result<usize> {
                s.parse()
                    .map_err(|_| Error::format(&path, format!("line {}: bad {what} {s:?}", i + 1)))
            };
            let rec = UttRecord {
                id: f[0].to_string(),
                speaker: parse(f[1], "speaker")?,
                emotion: parse(f[2], "emotion")?,
                frames: parse(f[3], "frame count")?,
                fbank: PathBuf::from(f[4]),
                spectrum: PathBuf::from(f[5]),
                phones: PathBuf::from(f[6]),
            };
            if rec.speaker >= n_speakers || rec.emotion >= n_emotions {
                return Err(Error::format(&path, format!("line {}: label out of range", i + 1)));
            }
            utts.push(rec);
        }
        if utts.is_empty() {
            return Err(Error::Empty(format!("manifest {} lists no utterances", path.display())));
        }
        Ok(Self {
            root: dir.to_path_buf(),
            utts,
            n_phones,
            n_speakers,
            n_emotions,
            spectrum_dim,
            sigma,
        })
    }
}

fn check_frames(rec: &UttRecord, what: &str, found: usize) -> Result<()> {
    if found != rec.frames {
        return Err(Error::Misaligned {
            utt: rec.id.clone(),
            what: what.into(),
            expected: rec.frames,
            found,
        });
    }
    Ok(())
}

pub fn write_phone_labels(path: &Path, labels: &[u16]) -> Result<()> {
    let bytes: Vec<u8> = labels.iter().flat_map(|l| l.to_le_bytes()).collect();
    write_bytes(path, &bytes)
}

pub fn read_phone_labels(path: &Path) -> Result<Vec<u16>> {
    let bytes = read_bytes(path)?;
    if bytes.len() % 2 != 0 {
        return Err(Error::format(path, "odd byte count for u16 labels"));
    }
    Ok(bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect())
}

pub fn utterance_id(speaker: usize, emotion: usize, index: usize) -> String {
    format!("spk{speaker:02}_emo{emotion}_{index:03}")
}

/// Generates every utterance, writes features, labels, templates and the
/// manifest under `out_dir`, and returns the loaded manifest.
pub fn gen_corpus(cfg: &GenConfig, frame_cfg: &FrameConfig, out_dir: &Path) -> Result<CorpusManifest> {
    cfg.validate()?;
    frame_cfg.validate()?;
    let templates = gen_templates(cfg, frame_cfg.n_bins())?;

    let jobs: Vec<(usize, usize, usize)> = (0..cfg.speakers)
        .flat_map(|s| (0..cfg.emotions).flat_map(move |e| (0..cfg.utts_per_pair).map(move |i| (s, e, i))))
        .collect();
    let utts: Vec<(String, usize, usize, SynthUtterance)> = jobs
        .par_iter()
        .enumerate()
        .map(|(n, &(s, e, i))| {
            let mut rng = rng::stream(cfg.seed, UTTERANCE_STREAM_BASE + n as u64);
            gen_utterance(cfg, &templates, frame_cfg, s, e, &mut rng).map(|u| (utterance_id(s, e, i), s, e, u))
        })
        .collect::<Result<_>>()?;

    let mut manifest = String::from("# id\tspeaker\temotion\tframes\tfbank\tspectrum\tphones\n");
    for (id, s, e, u) in &utts {
        let fbank = PathBuf::from("feats").join(format!("{id}.fbank.cdfm"));
        let spec = PathBuf::from("feats").join(format!("{id}.spec.cdfm"));
        let phn = PathBuf::from("feats").join(format!("{id}.phn"));
        save_features(&out_dir.join(&fbank), &u.log_fbank)?;
        save_features(&out_dir.join(&spec), &u.log_spectrum)?;
        write_phone_labels(&out_dir.join(&phn), &u.phones)?;
        manifest.push_str(&format!(
            "{id}\t{s}\t{e}\t{}\t{}\t{}\t{}\n",
            u.phones.len(),
            fbank.display(),
            spec.display(),
            phn.display()
        ));
    }
    write_bytes(&out_dir.join(MANIFEST_FILE), manifest.as_bytes())?;
    save_features(&out_dir.join(TEMPLATES_FILE), &templates.to_matrix()?)?;
    let info = format!(
        "phones\t{}\nspeakers\t{}\nemotions\t{}\nspectrum_dim\t{}\nsigma\t{}\ninteraction\t{}\nseed\t{}\n",
        cfg.phones,
        cfg.speakers,
        cfg.emotions,
        frame_cfg.n_bins(),
        cfg.sigma,
        cfg.speaker_emotion_interaction,
        cfg.seed
    );
    write_bytes(&out_dir.join(INFO_FILE), info.as_bytes())?;
    CorpusManifest::load(out_dir)
}

/// Within-class versus between-class cosine similarity of factor rows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterQuality {
    pub within: f64,
    pub between: f64,
}

impl ClusterQuality {
    pub fn separation(&self) -> f64 {
        self.within - self.between
    }
}

/// Mean within-class and between-class cosine similarity of `rows` labelled
/// by `labels`, computed over class centroids of unit-normalized rows.
///
/// With unit rows `x_i`, the mean pairwise cosine between classes `a` and `b`
/// equals the dot product of their mean vectors, so no pair enumeration is
/// needed. Within-class pairs exclude self-pairs.
pub fn oracle_factor_distance(rows: &[Vec<f64>], labels: &[usize]) -> Result<ClusterQuality> {
    if rows.len() != labels.len() {
        return Err(Error::Shape(format!("{} rows but {} labels", rows.len(), labels.len())));
    }
    if rows.is_empty() {
        return Err(Error::Empty("no factor rows".into()));
    }
    let d = rows[0].len();
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (r, &l) in rows.iter().zip(labels) {
        if r.len() != d {
            return Err(Error::Shape("factor rows differ in width".into()));
        }
        let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for (s, v) in sums[l].iter_mut().zip(r) {
            *s += v / n;
        }
        counts[l] += 1;
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let (mut within, mut wn) = (0.0, 0.0);
    let (mut between, mut bn) = (0.0, 0.0);
    for a in 0..k {
        let na = counts[a] as f64;
        if counts[a] >= 2 {
            // Sum over ordered pairs i != j is |sum|^2 - n (rows are unit).
            within += dot(&sums[a], &sums[a]) - na;
            wn += na * (na - 1.0);
        }
        for b in (a + 1)..k {
            between += dot(&sums[a], &sums[b]);
            bn += na * counts[b] as f64;
        }
    }
    Ok(ClusterQuality {
        within: if wn > 0.0 { within / wn } else { f64::NAN },
        between: if bn > 0.0 { between / bn } else { f64::NAN },
    })
}

/// Stratified held-out split: within every (speaker, emotion) group of at
/// least two utterances, `max(1, round(fraction * n))` utterances are marked
/// held out by a seeded shuffle. Returns one flag per manifest entry.
pub fn split_heldout(manifest: &CorpusManifest, fraction: f64, seed: u64) -> Result<Vec<bool>> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Invalid(format!("held-out fraction must lie in [0, 1), got {fraction}")));
    }
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, u) in manifest.utts.iter().enumerate() {
        groups.entry((u.speaker, u.emotion)).or_default().push(i);
    }
    let mut held = vec![false; manifest.utts.len()];
    if fraction == 0.0 {
        return Ok(held);
    }
    for ((s, e), mut idx) in groups {
        if idx.len() < 2 {
            continue;
        }
        let mut r = rng::stream(seed, ((s as u64) << 32) | e as u64);
        use rand::seq::SliceRandom;
        idx.shuffle(&mut r);
        let n = ((fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        for &i in &idx[..n] {
            held[i] = true;
        }
    }
    Ok(held)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn small() -> GenConfig {
        GenConfig {
            phones: 4,
            speakers: 3,
            emotions: 2,
            utts_per_pair: 2,
            min_frames: 30,
            max_frames: 40,
            ..GenConfig::default()
        }
    }

    #[test]
    fn templates_are_deterministic() {
        let a = gen_templates(&small(), 129).unwrap();
        let b = gen_templates(&small(), 129).unwrap();
        assert_eq!(a, b);
        let c = gen_templates(&GenConfig { seed: 2, ..small() }, 129).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_alpha_gives_zero_templates() {
        let t = gen_templates(&GenConfig { alpha_speaker: 0.0, ..small() }, 33).unwrap();
        assert!(t.speaker.iter().flatten().all(|&v| v == 0.0));
        assert!(t.phone.iter().flatten().any(|&v| v != 0.0));
    }

    #[test]
    fn distinct_templates_are_apart() {
        for seed in 0..20 {
            let t = gen_templates(&GenConfig { seed, ..small() }, 129).unwrap();
            for set in [&t.phone, &t.speaker, &t.emotion] {
                for i in 0..set.len() {
                    for j in (i + 1)..set.len() {
                        let d: f64 = set[i].iter().zip(&set[j]).map(|(a, b)| (a - b).powi(2)).sum();
                        assert!(d > 1e-6, "seed {seed}: templates {i},{j} coincide");
                    }
                }
            }
        }
    }

    #[test]
    fn phone_runs_respect_min_duration() {
        let cfg = GenConfig {
            phone_switch_prob: 1.0,
            min_phone_frames: 4,
            ..small()
        };
        let mut r = rng::stream(3, 0);
        let seq = phone_sequence(&cfg, 500, &mut r);
        let mut run = 1;
        let mut runs = Vec::new();
        for w in seq.windows(2) {
            if w[0] == w[1] {
                run += 1;
            } else {
                runs.push(run);
                run = 1;
            }
        }
        assert!(runs.len() > 50);
        assert!(runs.iter().all(|&r| r >= 4), "{runs:?}");
    }

    #[test]
    fn noiseless_frames_with_same_phone_match() {
        let cfg = GenConfig { sigma: 0.0, ..small() };
        let t = gen_templates(&cfg, 129).unwrap();
        let mut r = rng::stream(1, 99);
        let u = gen_utterance(&cfg, &t, &FrameConfig::default(), 1, 0, &mut r).unwrap();
        let mut seen: BTreeMap<u16, usize> = BTreeMap::new();
        for (i, &p) in u.phones.iter().enumerate() {
            if let Some(&j) = seen.get(&p) {
                assert_eq!(u.log_spectrum.row(i), u.log_spectrum.row(j));
                assert_eq!(u.log_fbank.row(i), u.log_fbank.row(j));
            } else {
                seen.insert(p, i);
            }
        }
    }

    #[test]
    fn speaker_template_recovered_by_averaging() {
        let cfg = GenConfig {
            sigma: 0.5,
            min_frames: 2000,
            max_frames: 2000,
            ..small()
        };
        let fc = FrameConfig::default();
        let t = gen_templates(&cfg, fc.n_bins()).unwrap();
        let mut r = rng::stream(5, 1);
        let u = gen_utterance(&cfg, &t, &fc, 2, 1, &mut r).unwrap();
        let n = u.phones.len() as f64;
        for k in 0..fc.n_bins() {
            let mean: f64 = u
                .phones
                .iter()
                .enumerate()
                .map(|(i, &p)| u.log_spectrum.row(i)[k] - t.phone[p as usize][k] - t.emotion[1][k])
                .sum::<f64>()
                / n;
            // f32 storage adds at most ~1e-6 on top of the sampling error.
            assert!((mean - t.speaker[2][k]).abs() <= 3.0 * cfg.sigma / n.sqrt() + 1e-5, "bin {k}");
        }
    }

    #[test]
    fn template_sum_error_equals_noise_variance() {
        let cfg = GenConfig {
            sigma: 0.1,
            min_frames: 1000,
            max_frames: 1000,
            ..small()
        };
        let fc = FrameConfig::default();
        let t = gen_templates(&cfg, fc.n_bins()).unwrap();
        let (mut sse, mut count) = (0.0, 0usize);
        for i in 0..4 {
            let mut r = rng::stream(11, i);
            let u = gen_utterance(&cfg, &t, &fc, (i % 3) as usize, (i % 2) as usize, &mut r).unwrap();
            for (f, &p) in u.phones.iter().enumerate() {
                let clean = t.frame(p as usize, (i % 3) as usize, (i % 2) as usize);
                for (a, b) in u.log_spectrum.row(f).iter().zip(&clean) {
                    sse += (a - b).powi(2);
                }
                count += 1;
            }
        }
        let mse = sse / (count * fc.n_bins()) as f64;
        assert!(count * fc.n_bins() >= 100_000);
        assert!((mse / (cfg.sigma * cfg.sigma) - 1.0).abs() < 0.05, "mse {mse}");
    }

    #[test]
    fn corpus_roundtrip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        let fc = FrameConfig::default();
        let m = gen_corpus(&small(), &fc, &a).unwrap();
        gen_corpus(&small(), &fc, &b).unwrap();
        assert_eq!(m.utts.len(), 3 * 2 * 2);
        assert_eq!(m.n_phones, 4);
        for u in &m.utts {
            let fb = m.load_fbank(u).unwrap();
            let sp = m.load_spectrum(u).unwrap();
            let ph = m.load_phones(u).unwrap();
            assert_eq!((fb.frames(), sp.frames(), ph.len()), (u.frames, u.frames, u.frames));
            assert_eq!(fb.dim(), 40);
            assert_eq!(sp.dim(), 129);
            for rel in [&u.fbank, &u.spectrum, &u.phones] {
                assert_eq!(fs::read(a.join(rel)).unwrap(), fs::read(b.join(rel)).unwrap());
            }
        }
        assert_eq!(
            fs::read(a.join(MANIFEST_FILE)).unwrap(),
            fs::read(b.join(MANIFEST_FILE)).unwrap()
        );
        let tm = m.load_templates().unwrap();
        assert_eq!(tm.frames(), 4 + 3 + 2);
    }

    #[test]
    fn split_is_stratified_and_seeded() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig {
            utts_per_pair: 8,
            min_frames: 10,
            max_frames: 10,
            ..small()
        };
        let m = gen_corpus(&cfg, &FrameConfig::default(), dir.path()).unwrap();
        let h = split_heldout(&m, 0.1, 4).unwrap();
        assert_eq!(h, split_heldout(&m, 0.1, 4).unwrap());
        for s in 0..3 {
            for e in 0..2 {
                let n = m
                    .utts
                    .iter()
                    .zip(&h)
                    .filter(|(u, &f)| f && u.speaker == s && u.emotion == e)
                    .count();
                assert_eq!(n, 1);
            }
        }
    }

    #[test]
    fn cluster_quality_matches_pairwise_enumeration() {
        let mut r = rng::stream(8, 8);
        let rows: Vec<Vec<f64>> = (0..30).map(|_| (0..5).map(|_| standard_normal(&mut r)).collect()).collect();
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let q = oracle_factor_distance(&rows, &labels).unwrap();
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        let (mut w, mut wn, mut b, mut bn) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..30 {
            for j in 0..30 {
                if i == j {
                    continue;
                }
                if labels[i] == labels[j] {
                    w += cos(&rows[i], &rows[j]);
                    wn += 1.0;
                } else if labels[i] < labels[j] {
                    b += cos(&rows[i], &rows[j]);
                    bn += 1.0;
                }
            }
        }
        assert!((q.within - w / wn).abs() < 1e-12);
        assert!((q.between - b / bn).abs() < 1e-12);
    }
}
