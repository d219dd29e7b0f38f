//! TOML run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use cdf_core::cascade::{CascadeConfig, Normalization, SpeakerSource, Stage};
use cdf_core::dsp::FrameConfig;
use cdf_core::eval::TrialCondition;
use cdf_core::models::ArchConfig;
use cdf_core::nn::TrainConfig;
use cdf_core::synthcorpus::GenConfig;
use serde::Deserialize;

use crate::UsageError;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: Option<u64>,
    #[serde(default)]
    paths: PathsSection,
    #[serde(default)]
    dsp: DspSection,
    #[serde(default)]
    corpus: CorpusSection,
    #[serde(default)]
    cascade: CascadeSection,
    #[serde(default)]
    stages: Vec<StageSection>,
    #[serde(default)]
    eval: EvalSection,
    #[serde(default)]
    recon: ReconSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct PathsSection {
    corpus: PathBuf,
    cache: PathBuf,
    results: PathBuf,
    features: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            corpus: "corpus".into(),
            cache: "cache".into(),
            results: "results".into(),
            features: "features".into(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct DspSection {
    sample_rate: u32,
    frame_length_ms: f64,
    frame_shift_ms: f64,
    fft_size: usize,
    n_mels: usize,
    log_floor: f64,
    low_freq_hz: f64,
    preemphasis: f64,
}

impl Default for DspSection {
    fn default() -> Self {
        let d = FrameConfig::default();
        Self {
            sample_rate: d.sample_rate,
            frame_length_ms: d.frame_length_ms,
            frame_shift_ms: d.frame_shift_ms,
            fft_size: d.fft_size,
            n_mels: d.n_mels,
            log_floor: d.log_floor,
            low_freq_hz: d.low_freq_hz,
            preemphasis: d.preemphasis,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct CorpusSection {
    phones: usize,
    speakers: usize,
    emotions: usize,
    utts_per_pair: usize,
    min_frames: usize,
    max_frames: usize,
    sigma: f64,
    alpha_phone: f64,
    alpha_speaker: f64,
    alpha_emotion: f64,
    min_phone_frames: usize,
    phone_switch_prob: f64,
    speaker_emotion_interaction: bool,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let d = GenConfig::default();
        Self {
            phones: d.phones,
            speakers: d.speakers,
            emotions: d.emotions,
            utts_per_pair: d.utts_per_pair,
            min_frames: d.min_frames,
            max_frames: d.max_frames,
            sigma: d.sigma,
            alpha_phone: d.alpha_phone,
            alpha_speaker: d.alpha_speaker,
            alpha_emotion: d.alpha_emotion,
            min_phone_frames: d.min_phone_frames,
            phone_switch_prob: d.phone_switch_prob,
            speaker_emotion_interaction: d.speaker_emotion_interaction,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum ArchPreset {
    Paper,
    Desk,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "lowercase")]
enum SourceName {
    Auto,
    Cdf,
    Idf,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "lowercase")]
enum NormName {
    Global,
    Utterance,
    None,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct CascadeSection {
    arch: ArchPreset,
    speaker_source: SourceName,
    normalization: NormName,
    heldout_fraction: f64,
    ling_hidden: Option<usize>,
    ling_layers: Option<usize>,
    spk_bottleneck: Option<usize>,
    spk_td_width: Option<usize>,
    emo_td_width: Option<usize>,
}

impl Default for CascadeSection {
    fn default() -> Self {
        Self {
            arch: ArchPreset::Desk,
            speaker_source: SourceName::Auto,
            normalization: NormName::Global,
            heldout_fraction: 0.1,
            ling_hidden: None,
            ling_layers: None,
            spk_bottleneck: None,
            spk_td_width: None,
            emo_td_width: None,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StageSection {
    name: String,
    learning_rate: Option<f64>,
    momentum: Option<f64>,
    minibatch_size: Option<usize>,
    epochs: Option<usize>,
    lr_halving_threshold: Option<f64>,
    early_stop_patience: Option<usize>,
    chunk_frames: Option<usize>,
    frames_per_epoch: Option<usize>,
    max_grad_norm: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EvalSection {
    enroll_seconds: f64,
    test_frames: Vec<usize>,
    max_segments_per_speaker: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            enroll_seconds: 30.0,
            test_frames: vec![20, 50, 100],
            max_segments_per_speaker: 50,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ReconSection {
    splice: Option<usize>,
    hidden: Option<usize>,
    layers: Option<usize>,
}

/// Resolved experiment settings.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus_dir: PathBuf,
    pub cache_dir: PathBuf,
    pub results_dir: PathBuf,
    pub features_dir: PathBuf,
    pub frame: FrameConfig,
    pub corpus: GenConfig,
    pub cascade: CascadeConfig,
    pub stages: BTreeMap<Stage, TrainConfig>,
    pub conditions: Vec<TrialCondition>,
    pub max_segments_per_speaker: usize,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    /// Base directory for relative paths in place of the config file's.
    pub out: Option<PathBuf>,
}

/// Per-stage training defaults used when the file does not override them.
pub fn default_train_config(stage: Stage) -> TrainConfig {
    let base = TrainConfig::default();
    match stage {
        Stage::Ling => TrainConfig {
            learning_rate: 0.02,
            epochs: 4,
            frames_per_epoch: Some(40_000),
            ..base
        },
        Stage::SpkIdf | Stage::SpkCdf => TrainConfig {
            learning_rate: 0.01,
            epochs: 4,
            frames_per_epoch: Some(30_000),
            ..base
        },
        Stage::Recon => TrainConfig {
            learning_rate: 0.005,
            epochs: 6,
            frames_per_epoch: Some(40_000),
            ..base
        },
        _ => TrainConfig {
            learning_rate: 0.01,
            epochs: 6,
            frames_per_epoch: Some(40_000),
            ..base
        },
    }
}

fn usage(msg: String) -> anyhow::Error {
    UsageError(msg).into()
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let base = match &overrides.out {
            Some(out) => out.clone(),
            None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        Self::parse(&text, &base, overrides).with_context(|| format!("in config {}", path.display()))
    }

    /// Parses TOML text; relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path, overrides: &Overrides) -> anyhow::Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| usage(format!("malformed config: {e}")))?;
        let seed = overrides.seed.or(raw.seed).unwrap_or(1);
        let resolve = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };

        let d = raw.dsp;
        let frame = FrameConfig {
            sample_rate: d.sample_rate,
            frame_length_ms: d.frame_length_ms,
            frame_shift_ms: d.frame_shift_ms,
            fft_size: d.fft_size,
            n_mels: d.n_mels,
            log_floor: d.log_floor,
            low_freq_hz: d.low_freq_hz,
            preemphasis: d.preemphasis,
        };
        frame.validate().map_err(|e| usage(format!("[dsp]: {e}")))?;

        let c = raw.corpus;
        let corpus = GenConfig {
            phones: c.phones,
            speakers: c.speakers,
            emotions: c.emotions,
            utts_per_pair: c.utts_per_pair,
            min_frames: c.min_frames,
            max_frames: c.max_frames,
            sigma: c.sigma,
            alpha_phone: c.alpha_phone,
            alpha_speaker: c.alpha_speaker,
            alpha_emotion: c.alpha_emotion,
            min_phone_frames: c.min_phone_frames,
            phone_switch_prob: c.phone_switch_prob,
            speaker_emotion_interaction: c.speaker_emotion_interaction,
            seed,
        };
        corpus.validate().map_err(|e| usage(format!("[corpus]: {e}")))?;

        let k = raw.cascade;
        let mut arch = match k.arch {
            ArchPreset::Paper => ArchConfig::paper(),
            ArchPreset::Desk => ArchConfig::desk(),
        };
        arch.fbank_dim = frame.n_mels;
        arch.ling_hidden = k.ling_hidden.unwrap_or(arch.ling_hidden);
        arch.ling_layers = k.ling_layers.unwrap_or(arch.ling_layers);
        arch.spk_bottleneck = k.spk_bottleneck.unwrap_or(arch.spk_bottleneck);
        arch.spk_td_width = k.spk_td_width.unwrap_or(arch.spk_td_width);
        arch.emo_td_width = k.emo_td_width.unwrap_or(arch.emo_td_width);
        arch.recon_splice = raw.recon.splice.unwrap_or(arch.recon_splice);
        arch.recon_hidden = raw.recon.hidden.unwrap_or(arch.recon_hidden);
        arch.recon_layers = raw.recon.layers.unwrap_or(arch.recon_layers);
        if !(k.heldout_fraction > 0.0 && k.heldout_fraction < 1.0) {
            return Err(usage(format!(
                "[cascade] heldout_fraction must be in (0, 1), got {}",
                k.heldout_fraction
            )));
        }
        let cascade = CascadeConfig {
            arch,
            speaker_source: match k.speaker_source {
                SourceName::Auto => SpeakerSource::Auto,
                SourceName::Cdf => SpeakerSource::Cdf,
                SourceName::Idf => SpeakerSource::Idf,
            },
            normalization: match k.normalization {
                NormName::Global => Normalization::Global,
                NormName::Utterance => Normalization::Utterance,
                NormName::None => Normalization::None,
            },
            heldout_fraction: k.heldout_fraction,
            split_seed: seed,
        };

        let mut stages: BTreeMap<Stage, TrainConfig> = Stage::ALL
            .iter()
            .map(|&s| (s, TrainConfig { seed, ..default_train_config(s) }))
            .collect();
        for s in raw.stages {
            let stage = Stage::parse(&s.name).map_err(|e| usage(format!("[[stages]]: {e}")))?;
            let t = stages.get_mut(&stage).expect("every stage has defaults");
            t.learning_rate = s.learning_rate.unwrap_or(t.learning_rate);
            t.momentum = s.momentum.unwrap_or(t.momentum);
            t.minibatch_size = s.minibatch_size.unwrap_or(t.minibatch_size);
            t.epochs = s.epochs.unwrap_or(t.epochs);
            t.lr_halving_threshold = s.lr_halving_threshold.unwrap_or(t.lr_halving_threshold);
            t.early_stop_patience = s.early_stop_patience.unwrap_or(t.early_stop_patience);
            t.chunk_frames = s.chunk_frames.unwrap_or(t.chunk_frames);
            if s.frames_per_epoch.is_some() {
                t.frames_per_epoch = s.frames_per_epoch;
            }
            if s.max_grad_norm.is_some() {
                t.max_grad_norm = s.max_grad_norm;
            }
            t.validate().map_err(|e| usage(format!("[[stages]] {}: {e}", s.name)))?;
        }

        let e = raw.eval;
        let conditions: Vec<TrialCondition> = e
            .test_frames
            .iter()
            .map(|&test_frames| TrialCondition {
                enroll_seconds: e.enroll_seconds,
                test_frames,
            })
            .collect();
        for c in &conditions {
            c.validate().map_err(|err| usage(format!("[eval]: {err}")))?;
        }
        if conditions.is_empty() || e.max_segments_per_speaker == 0 {
            return Err(usage("[eval] needs at least one test length and a positive segment cap".into()));
        }

        Ok(Self {
            seed,
            corpus_dir: resolve(&raw.paths.corpus),
            cache_dir: resolve(&raw.paths.cache),
            results_dir: resolve(&raw.paths.results),
            features_dir: resolve(&raw.paths.features),
            frame,
            corpus,
            cascade,
            stages,
            conditions,
            max_segments_per_speaker: e.max_segments_per_speaker,
        })
    }

    pub fn train_config(&self, stage: Stage) -> &TrainConfig {
        &self.stages[&stage]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> anyhow::Result<RunConfig> {
        RunConfig::parse(text, Path::new("/exp"), &Overrides::default())
    }

    #[test]
    fn empty_file_gives_defaults() {
        let c = parse("").unwrap();
        assert_eq!(c.seed, 1);
        assert_eq!(c.corpus_dir, Path::new("/exp/corpus"));
        assert_eq!(c.corpus.speakers, 20);
        assert_eq!(c.cascade.arch, ArchConfig::desk());
        assert_eq!(c.conditions.len(), 3);
        assert_eq!(c.train_config(Stage::Ling).seed, 1);
    }

    #[test]
    fn sections_override_defaults() {
        let c = parse(
            r#"
            seed = 7
            [paths]
            cache = "/abs/cache"
            [corpus]
            sigma = 0.0
            [cascade]
            arch = "paper"
            ling_hidden = 64
            [[stages]]
            name = "spk-cdf"
            epochs = 2
            frames_per_epoch = 100
            [recon]
            hidden = 32
            "#,
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.cache_dir, Path::new("/abs/cache"));
        assert_eq!(c.corpus.sigma, 0.0);
        assert_eq!(c.corpus.seed, 7);
        assert_eq!(c.cascade.arch.ling_hidden, 64);
        assert_eq!(c.cascade.arch.spk_bottleneck, ArchConfig::paper().spk_bottleneck);
        assert_eq!(c.cascade.arch.recon_hidden, 32);
        assert_eq!(c.train_config(Stage::SpkCdf).epochs, 2);
        assert_eq!(c.train_config(Stage::SpkCdf).frames_per_epoch, Some(100));
        assert_eq!(c.train_config(Stage::SpkCdf).seed, 7);
    }

    #[test]
    fn overrides_win() {
        let o = Overrides {
            seed: Some(9),
            out: None,
        };
        let c = RunConfig::parse("seed = 3", Path::new("base"), &o).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.results_dir, Path::new("base/results"));
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        for bad in [
            "colour = 1",
            "[corpus]\nspeekers = 3",
            "[[stages]]\nname = \"nope\"",
            "[[stages]]\nname = \"ling\"\nlearning_rate = -1.0",
            "[cascade]\nheldout_fraction = 1.5",
            "[eval]\ntest_frames = []",
            "[dsp]\nfft_size = 100",
            "seed = \"x\"",
        ] {
            let err = parse(bad).unwrap_err();
            assert!(err.chain().any(|e| e.is::<UsageError>()), "{bad}: {err:#}");
        }
    }
}
