//! Sequential stage training and factor caching.
//!
//! Each stage trains one network, conditioned on factors that earlier stages
//! cached to disk. Cache layout under the cache directory:
//!
//! ```text
//! <stage>/model.cdfn        trained network (recon: model_q/_s/_e.cdfn)
//! <stage>/train_log.csv     per-epoch losses
//! <stage>/<utt>.cdff        extracted factor stream per utterance
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::dsp::{CmvnStats, FeatureMatrix};
use crate::error::{Error, Result};
use crate::io::write_bytes;
use crate::models::{
    build_emotion_net, build_linguistic_net, build_speaker_net, extract_factors, input_splice, network_input,
    ArchConfig, FactorKind, FactorStream,
};
use crate::nn::{
    train_classifier, FrameLabels, LayerSpec, Model, NetworkSpec, ParamStore, Sequence, TrainConfig, TrainLog,
};
use crate::reconstruct::{build_recon_model, train_recon, ReconItem, ReconModel, ReconReport};
use crate::rng;
use crate::synthcorpus::{split_heldout, CorpusManifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Ling,
    SpkIdf,
    SpkCdf,
    EmoBaseline,
    EmoLing,
    EmoSpk,
    EmoLingSpk,
    Recon,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Ling,
        Stage::SpkIdf,
        Stage::SpkCdf,
        Stage::EmoBaseline,
        Stage::EmoLing,
        Stage::EmoSpk,
        Stage::EmoLingSpk,
        Stage::Recon,
    ];

    pub const EMOTION: [Stage; 4] = [Stage::EmoBaseline, Stage::EmoLing, Stage::EmoSpk, Stage::EmoLingSpk];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ling => "ling",
            Stage::SpkIdf => "spk-idf",
            Stage::SpkCdf => "spk-cdf",
            Stage::EmoBaseline => "emo-baseline",
            Stage::EmoLing => "emo-ling",
            Stage::EmoSpk => "emo-spk",
            Stage::EmoLingSpk => "emo-ling-spk",
            Stage::Recon => "recon",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Stage::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| {
            let names: Vec<_> = Stage::ALL.iter().map(|s| s.name()).collect();
            Error::Invalid(format!("unknown stage {s:?}; expected one of {}", names.join(", ")))
        })
    }

    /// Kind of factor the stage's network produces; `None` for recon.
    pub fn factor_kind(self) -> Option<FactorKind> {
        match self {
            Stage::Ling => Some(FactorKind::Linguistic),
            Stage::SpkIdf | Stage::SpkCdf => Some(FactorKind::Speaker),
            Stage::Recon => None,
            _ => Some(FactorKind::Emotion),
        }
    }

    /// Factor kinds the stage is conditioned on, in auxiliary-slot order.
    pub fn conditioning_kinds(self) -> &'static [FactorKind] {
        use FactorKind::*;
        match self {
            Stage::Ling | Stage::SpkIdf | Stage::EmoBaseline => &[],
            Stage::SpkCdf | Stage::EmoLing => &[Linguistic],
            Stage::EmoSpk => &[Speaker],
            Stage::EmoLingSpk => &[Linguistic, Speaker],
            Stage::Recon => &[Linguistic, Speaker, Emotion],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which speaker network feeds later stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpeakerSource {
    /// The conditioned network when its factors are cached, else the
    /// unconditioned one.
    Auto,
    Cdf,
    Idf,
}

/// Feature normalization applied before every network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    /// Mean and variance pooled over the training split.
    Global,
    /// Mean and variance of each utterance separately.
    Utterance,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeConfig {
    pub arch: ArchConfig,
    pub speaker_source: SpeakerSource,
    pub normalization: Normalization,
    pub heldout_fraction: f64,
    /// Seed of the train/held-out split.
    pub split_seed: u64,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            arch: ArchConfig::paper(),
            speaker_source: SpeakerSource::Auto,
            normalization: Normalization::Global,
            heldout_fraction: 0.1,
            split_seed: 1,
        }
    }
}

/// Paths inside the cache directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Workspace {
    pub cache_dir: PathBuf,
}

impl Workspace {
    pub fn new(cache_dir: impl Into<PathBuf>) -> Self {
        Self {
            cache_dir: cache_dir.into(),
        }
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.cache_dir.join(stage.name())
    }

    pub fn model_path(&self, stage: Stage) -> PathBuf {
        self.stage_dir(stage).join("model.cdfn")
    }

    pub fn log_path(&self, stage: Stage) -> PathBuf {
        self.stage_dir(stage).join("train_log.csv")
    }

    pub fn factor_path(&self, stage: Stage, utt: &str) -> PathBuf {
        self.stage_dir(stage).join(format!("{utt}.cdff"))
    }

    pub fn is_trained(&self, stage: Stage) -> bool {
        if stage == Stage::Recon {
            return ReconModel::exists(&self.stage_dir(stage));
        }
        self.model_path(stage).is_file()
    }

    pub fn load_model(&self, stage: Stage) -> Result<Model> {
        let path = self.model_path(stage);
        if !path.is_file() {
            return Err(Error::MissingStage {
                stage: stage.name().into(),
                detail: format!("no trained model at {}; run `train {stage}` first", path.display()),
            });
        }
        Model::load(&path)
    }

    pub fn load_recon(&self) -> Result<ReconModel> {
        if !self.is_trained(Stage::Recon) {
            return Err(Error::MissingStage {
                stage: Stage::Recon.name().into(),
                detail: format!(
                    "no trained generators in {}; run `train recon` first",
                    self.stage_dir(Stage::Recon).display()
                ),
            });
        }
        ReconModel::load(&self.stage_dir(Stage::Recon))
    }

    /// The speaker stage that feeds later stages under `source`.
    pub fn speaker_stage(&self, source: SpeakerSource) -> Stage {
        match source {
            SpeakerSource::Cdf => Stage::SpkCdf,
            SpeakerSource::Idf => Stage::SpkIdf,
            SpeakerSource::Auto if self.is_trained(Stage::SpkCdf) => Stage::SpkCdf,
            SpeakerSource::Auto => Stage::SpkIdf,
        }
    }

    /// Stages whose cached factors `stage` consumes, in slot order.
    pub fn conditioning_stages(&self, stage: Stage, source: SpeakerSource) -> Vec<Stage> {
        stage
            .conditioning_kinds()
            .iter()
            .map(|k| match k {
                FactorKind::Linguistic => Stage::Ling,
                FactorKind::Speaker => self.speaker_stage(source),
                FactorKind::Emotion => Stage::EmoLingSpk,
            })
            .collect()
    }
}

pub fn cache_factors(stream: &FactorStream, path: &Path) -> Result<()> {
    stream.save(path)
}

/// Loads the cached factors of `utt` from `stage`, naming the stage when
/// they are absent.
pub fn load_factors(ws: &Workspace, stage: Stage, utt: &str) -> Result<FactorStream> {
    let path = ws.factor_path(stage, utt);
    if !path.is_file() {
        return Err(Error::MissingStage {
            stage: stage.name().into(),
            detail: format!(
                "no cached factors for utterance {utt} at {}; run `train {stage}` and `extract {stage}` first",
                path.display()
            ),
        });
    }
    let s = FactorStream::load(&path)?;
    if Some(s.kind) != stage.factor_kind() || s.utt_id != utt {
        return Err(Error::format(&path, format!("expected {stage} factors for utterance {utt}")));
    }
    Ok(s)
}

/// Normalized features, labels and split of a corpus, loaded once.
#[derive(Debug, Clone)]
pub struct CorpusData {
    pub manifest: CorpusManifest,
    pub heldout: Vec<bool>,
    pub fbank: Vec<FeatureMatrix>,
    pub phones: Vec<Vec<u16>>,
}

impl CorpusData {
    pub fn load(manifest: CorpusManifest, cfg: &CascadeConfig) -> Result<Self> {
        let heldout = split_heldout(&manifest, cfg.heldout_fraction, cfg.split_seed)?;
        let raw: Vec<FeatureMatrix> = manifest
            .utts
            .par_iter()
            .map(|u| manifest.load_fbank(u))
            .collect::<Result<_>>()?;
        let phones: Vec<Vec<u16>> = manifest
            .utts
            .par_iter()
            .map(|u| manifest.load_phones(u))
            .collect::<Result<_>>()?;
        let fbank = match cfg.normalization {
            Normalization::None => raw,
            Normalization::Utterance => raw.iter().map(crate::dsp::cmvn).collect(),
            Normalization::Global => {
                let stats = CmvnStats::accumulate(raw.iter().zip(&heldout).filter(|(_, &h)| !h).map(|(f, _)| f))?;
                raw.iter().map(|f| stats.apply(f)).collect::<Result<_>>()?
            }
        };
        Ok(Self {
            manifest,
            heldout,
            fbank,
            phones,
        })
    }

    pub fn len(&self) -> usize {
        self.fbank.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fbank.is_empty()
    }

    pub fn index_of(&self, utt: &str) -> Result<usize> {
        self.manifest
            .utts
            .iter()
            .position(|u| u.id == utt)
            .ok_or_else(|| Error::Invalid(format!("utterance {utt:?} is not in the manifest")))
    }

    fn labels(&self, i: usize, kind: FactorKind) -> FrameLabels<'_> {
        let u = &self.manifest.utts[i];
        match kind {
            FactorKind::Linguistic => FrameLabels::PerFrame(&self.phones[i]),
            FactorKind::Speaker => FrameLabels::Constant(u.speaker),
            FactorKind::Emotion => FrameLabels::Constant(u.emotion),
        }
    }
}

/// Loads every utterance's cached factors from each of `stages`, checking
/// frame alignment. Indexed `[utterance][stage]`.
pub fn load_conditioning(ws: &Workspace, data: &CorpusData, stages: &[Stage]) -> Result<Vec<Vec<FactorStream>>> {
    if let Some(&missing) = stages.iter().find(|s| !ws.is_trained(**s)) {
        return Err(Error::MissingStage {
            stage: missing.name().into(),
            detail: format!("its factors are needed; run `train {missing}` and `extract {missing}` first"),
        });
    }
    data.manifest
        .utts
        .par_iter()
        .map(|u| {
            stages
                .iter()
                .map(|&st| {
                    let s = load_factors(ws, st, &u.id)?;
                    if s.frames() != u.frames {
                        return Err(Error::Misaligned {
                            utt: u.id.clone(),
                            what: format!("{st} factor stream"),
                            expected: u.frames,
                            found: s.frames(),
                        });
                    }
                    Ok(s)
                })
                .collect()
        })
        .collect()
}

/// One stage to train, with its conditioning resolved.
#[derive(Debug, Clone)]
pub struct StagePlan {
    pub stage: Stage,
    pub conditioning: Vec<Stage>,
    pub train: TrainConfig,
    pub workspace: Workspace,
}

impl StagePlan {
    pub fn new(stage: Stage, cfg: &CascadeConfig, workspace: Workspace, train: TrainConfig) -> Self {
        let conditioning = workspace.conditioning_stages(stage, cfg.speaker_source);
        Self {
            stage,
            conditioning,
            train,
            workspace,
        }
    }
}

/// What training a stage produced.
#[derive(Debug, Clone)]
pub enum StageOutcome {
    Factor { model: Model, log: TrainLog },
    Recon { model: ReconModel, report: ReconReport },
}

fn factor_dim(streams: &[Vec<FactorStream>], slot: usize) -> usize {
    streams.first().map_or(0, |s| s[slot].dim())
}

/// Trains `plan.stage` on the training split, validates on the held-out
/// split and saves the result under the stage directory.
pub fn train_stage(plan: &StagePlan, data: &CorpusData, cfg: &CascadeConfig) -> Result<StageOutcome> {
    plan.train.validate()?;
    let ws = &plan.workspace;
    let cond = load_conditioning(ws, data, &plan.conditioning)?;
    let init_rng = |salt: u64| rng::stream(plan.train.seed, 1000 + 16 * plan.stage as u64 + salt);
    let m = &data.manifest;

    if plan.stage == Stage::Recon {
        let mut model = build_recon_model(
            factor_dim(&cond, 0),
            factor_dim(&cond, 1),
            factor_dim(&cond, 2),
            m.spectrum_dim,
            &cfg.arch,
        )?;
        model.init(&mut init_rng(0));
        let targets: Vec<FeatureMatrix> = m.utts.par_iter().map(|u| m.load_spectrum(u)).collect::<Result<_>>()?;
        let factors: Vec<[FeatureMatrix; 3]> = cond
            .iter()
            .map(|c| Ok([c[0].as_features()?, c[1].as_features()?, c[2].as_features()?]))
            .collect::<Result<_>>()?;
        let items: Vec<ReconItem> = factors
            .iter()
            .zip(&targets)
            .map(|(f, t)| ReconItem {
                q: &f[0],
                s: &f[1],
                e: &f[2],
                target: t,
            })
            .collect();
        let (train, val) = split_items(&items, &data.heldout);
        let (model, report) = train_recon(model, &train, &val, &plan.train)?;
        model.save(&ws.stage_dir(Stage::Recon))?;
        write_bytes(&ws.stage_dir(Stage::Recon).join("report.csv"), report.to_csv().as_bytes())?;
        return Ok(StageOutcome::Recon { model, report });
    }

    let kind = plan.stage.factor_kind().expect("factor stage");
    let arch = &cfg.arch;
    let cond_dims: Vec<usize> = (0..plan.conditioning.len()).map(|i| factor_dim(&cond, i)).collect();
    let spec = match kind {
        FactorKind::Linguistic => {
            build_linguistic_net(m.n_phones, (2 * arch.ling_splice + 1) * arch.fbank_dim, arch)?
        }
        FactorKind::Speaker => build_speaker_net(m.n_speakers, cond_dims.first().copied().unwrap_or(0), arch)?,
        FactorKind::Emotion => build_emotion_net(m.n_emotions, &cond_dims, arch)?,
    };
    if let Some(f) = data.fbank.first() {
        if f.dim() != arch.fbank_dim {
            return Err(Error::Shape(format!(
                "corpus features are {} wide, architecture expects {}",
                f.dim(),
                arch.fbank_dim
            )));
        }
    }
    let splice = input_splice(&spec, arch.fbank_dim)?;
    // Conditioning factors are standardized for training; the map is folded
    // into the consuming layer afterwards so saved models take raw factors.
    let stats = conditioning_stats(&cond, &data.heldout, cond_dims.len())?;
    let std_cond: Vec<Vec<Vec<f64>>> = cond
        .iter()
        .map(|c| {
            c.iter()
                .zip(&stats)
                .map(|(f, st)| Ok(st.apply(&f.as_features()?)?.into_data()))
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;
    let seqs: Vec<Sequence> = (0..data.len())
        .map(|i| Sequence {
            input: &data.fbank[i],
            aux: std_cond.get(i).map_or_else(Vec::new, |c| c.iter().map(Vec::as_slice).collect()),
            labels: data.labels(i, kind),
        })
        .collect();
    let (train, val) = split_items(&seqs, &data.heldout);
    let init = ParamStore::init(&spec, &mut init_rng(0));
    log::info!(
        "training {} on {} utterances ({} held out), {} parameters",
        plan.stage,
        train.len(),
        val.len(),
        init.num_params()
    );
    let (mut params, log) = train_classifier(&spec, init, splice, &train, &val, &plan.train)?;
    fold_conditioning(&spec, &mut params, &stats)?;
    let model = Model { spec, params }.quantized();
    model.save(&ws.model_path(plan.stage))?;
    write_bytes(&ws.log_path(plan.stage), log.to_csv().as_bytes())?;
    Ok(StageOutcome::Factor { model, log })
}

/// Per-slot column statistics of the conditioning factors on the training split.
fn conditioning_stats(cond: &[Vec<FactorStream>], heldout: &[bool], slots: usize) -> Result<Vec<CmvnStats>> {
    (0..slots)
        .map(|slot| {
            let feats: Vec<FeatureMatrix> = cond
                .iter()
                .zip(heldout)
                .filter(|(_, &h)| !h)
                .map(|(c, _)| c[slot].as_features())
                .collect::<Result<_>>()?;
            CmvnStats::accumulate(&feats)
        })
        .collect()
}

/// Folds the standardization of each auxiliary slot into the first weighted
/// layer after its concat.
fn fold_conditioning(spec: &NetworkSpec, params: &mut ParamStore, stats: &[CmvnStats]) -> Result<()> {
    for (i, layer) in spec.layers.iter().enumerate() {
        if let LayerSpec::Concat { input, slot, .. } = layer {
            let consumer = (i + 1..spec.layers.len())
                .find(|&j| !matches!(spec.layers[j], LayerSpec::Concat { .. }))
                .ok_or_else(|| Error::Invalid("concat is the last layer".into()))?;
            let st = &stats[*slot];
            params.fold_input_affine(spec, consumer, *input, &st.mean, &st.inverse_std())?;
        }
    }
    Ok(())
}

fn split_items<T: Clone>(items: &[T], heldout: &[bool]) -> (Vec<T>, Vec<T>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (it, &h) in items.iter().zip(heldout) {
        if h {
            val.push(it.clone());
        } else {
            train.push(it.clone());
        }
    }
    (train, val)
}

/// Extracts factors of `stage` for one utterance from normalized features
/// and already extracted conditioning streams.
pub fn extract_utterance(
    model: &Model,
    stage: Stage,
    utt: &str,
    fbank: &FeatureMatrix,
    conditioning: &[&FactorStream],
) -> Result<FactorStream> {
    let kind = stage
        .factor_kind()
        .ok_or_else(|| Error::Invalid(format!("stage {stage} produces no factors")))?;
    let x = network_input(&model.spec, fbank)?;
    Ok(extract_factors(model, kind, utt, &x, conditioning)?.quantized())
}

/// Extracts and caches factors of `stage` for every utterance; returns the
/// number of streams written.
pub fn extract_stage(ws: &Workspace, data: &CorpusData, stage: Stage, cfg: &CascadeConfig) -> Result<usize> {
    if stage.factor_kind().is_none() {
        return Err(Error::Invalid(format!("stage {stage} produces no factors to extract")));
    }
    let model = ws.load_model(stage)?;
    let cond_stages = ws.conditioning_stages(stage, cfg.speaker_source);
    let cond = load_conditioning(ws, data, &cond_stages)?;
    let streams: Vec<FactorStream> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let c: Vec<&FactorStream> = cond.get(i).map_or_else(Vec::new, |c| c.iter().collect());
            extract_utterance(&model, stage, &data.manifest.utts[i].id, &data.fbank[i], &c)
        })
        .collect::<Result<_>>()?;
    for s in &streams {
        cache_factors(s, &ws.factor_path(stage, &s.utt_id))?;
    }
    Ok(streams.len())
}

/// Trained networks of one full cascade.
#[derive(Debug, Clone)]
pub struct CascadeModelSet {
    pub linguistic: Model,
    pub speaker: Model,
    pub emotion: Model,
    /// Emotion stage whose network `emotion` is; fixes its conditioning.
    pub emotion_stage: Stage,
    pub recon: Option<ReconModel>,
}

impl CascadeModelSet {
    /// Loads the linguistic net, the configured speaker net, the fully
    /// conditioned emotion net and, when trained, the generators.
    pub fn load(ws: &Workspace, cfg: &CascadeConfig) -> Result<Self> {
        let speaker = ws.speaker_stage(cfg.speaker_source);
        Ok(Self {
            linguistic: ws.load_model(Stage::Ling)?,
            speaker: ws.load_model(speaker)?,
            emotion: ws.load_model(Stage::EmoLingSpk)?,
            emotion_stage: Stage::EmoLingSpk,
            recon: ws.is_trained(Stage::Recon).then(|| ws.load_recon()).transpose()?,
        })
    }
}

/// The three factor streams of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeFactors {
    pub q: FactorStream,
    pub s: FactorStream,
    pub e: FactorStream,
}

/// Runs the cascade on normalized features: `q` from the linguistic net,
/// `s` from the speaker net (fed `q` when conditioned), `e` from the
/// emotion net fed the factors its stage requires.
pub fn run_cascade(models: &CascadeModelSet, utt: &str, fbank: &FeatureMatrix) -> Result<CascadeFactors> {
    let q = extract_utterance(&models.linguistic, Stage::Ling, utt, fbank, &[])?;
    let spk_cond: Vec<&FactorStream> = if models.speaker.spec.aux_dims.is_empty() {
        vec![]
    } else {
        vec![&q]
    };
    let s = extract_utterance(&models.speaker, Stage::SpkCdf, utt, fbank, &spk_cond)?;
    let emo_cond: Vec<&FactorStream> = models
        .emotion_stage
        .conditioning_kinds()
        .iter()
        .map(|k| match k {
            FactorKind::Linguistic => &q,
            _ => &s,
        })
        .collect();
    let e = extract_utterance(&models.emotion, models.emotion_stage, utt, fbank, &emo_cond)?;
    Ok(CascadeFactors { q, s, e })
}
