//! One function per subcommand. Each reads the run configuration, does its
//! stage of work and writes its artifacts; nothing is kept in memory
//! between commands.

use std::path::{Path, PathBuf};

use anyhow::Context;
use cdf_core::cascade::{
    self, load_conditioning, load_factors, run_cascade, CascadeModelSet, CorpusData, Stage, StageOutcome,
    StagePlan, Workspace,
};
use cdf_core::dsp::{self, read_wav};
use cdf_core::eval::{self, EvalReport, SpeakerSystem};
use cdf_core::io::{save_features, write_bytes};
use cdf_core::models::{length_normalize, FactorStream};
use cdf_core::reconstruct::{reconstruct as run_generators, render_spectrograms, residual_stats, ReconItem};
use cdf_core::synthcorpus::{gen_corpus as generate, CorpusManifest, MANIFEST_FILE};
use cdf_core::Error;

use crate::config::RunConfig;
use crate::UsageError;

/// Frames kept per utterance when projecting linguistic factors.
const LING_PROJECT_STRIDE: usize = 10;

pub fn workspace(cfg: &RunConfig) -> Workspace {
    Workspace::new(&cfg.cache_dir)
}

/// Generates the synthetic corpus into the corpus directory.
pub fn gen_corpus(cfg: &RunConfig) -> anyhow::Result<CorpusManifest> {
    let m = generate(&cfg.corpus, &cfg.frame, &cfg.corpus_dir)?;
    println!(
        "generated {} utterances ({} speakers, {} emotions, {} phones) in {}",
        m.utts.len(),
        m.n_speakers,
        m.n_emotions,
        m.n_phones,
        cfg.corpus_dir.display()
    );
    Ok(m)
}

/// Log fbank and log spectrum of every `.wav` file in `wav_dir`.
pub fn featurize(cfg: &RunConfig, wav_dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(wav_dir)
        .map_err(|e| UsageError(format!("cannot list wav directory {}: {e}", wav_dir.display())))?;
    let mut wavs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    wavs.sort();
    if wavs.is_empty() {
        return Err(UsageError(format!("no .wav files in {}", wav_dir.display())).into());
    }
    let mut written = Vec::new();
    for w in &wavs {
        let audio = read_wav(w)?;
        if audio.sample_rate != cfg.frame.sample_rate {
            return Err(UsageError(format!(
                "{} is sampled at {} Hz but [dsp] sample_rate is {}",
                w.display(),
                audio.sample_rate,
                cfg.frame.sample_rate
            ))
            .into());
        }
        let stem = w.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let fbank = dsp::log_fbank(&audio, &cfg.frame)?;
        let spec = dsp::log_spectrum(&audio, &cfg.frame)?;
        let fp = cfg.features_dir.join(format!("{stem}.fbank.cdfm"));
        let sp = cfg.features_dir.join(format!("{stem}.spec.cdfm"));
        save_features(&fp, &fbank)?;
        save_features(&sp, &spec)?;
        log::info!("{}: {} frames", w.display(), fbank.frames());
        written.extend([fp, sp]);
    }
    println!("featurized {} files into {}", wavs.len(), cfg.features_dir.display());
    Ok(written)
}

/// Corpus features, labels and split, normalized per the configuration.
pub fn load_data(cfg: &RunConfig) -> anyhow::Result<CorpusData> {
    if !cfg.corpus_dir.join(MANIFEST_FILE).is_file() {
        return Err(Error::MissingStage {
            stage: "gen-corpus".into(),
            detail: format!("no corpus manifest in {}; run `gen-corpus` first", cfg.corpus_dir.display()),
        }
        .into());
    }
    let manifest = CorpusManifest::load(&cfg.corpus_dir)?;
    Ok(CorpusData::load(manifest, &cfg.cascade)?)
}

fn parse_stage(name: &str) -> anyhow::Result<Stage> {
    Stage::parse(name).map_err(|e| UsageError(e.to_string()).into())
}

/// Trains one stage and saves its model and training log.
pub fn train(cfg: &RunConfig, stage: &str) -> anyhow::Result<StageOutcome> {
    let stage = parse_stage(stage)?;
    let ws = workspace(cfg);
    let plan = StagePlan::new(stage, &cfg.cascade, ws.clone(), cfg.train_config(stage).clone());
    // Check prerequisites before the corpus is loaded.
    for &c in &plan.conditioning {
        if !ws.is_trained(c) {
            return Err(Error::MissingStage {
                stage: c.name().into(),
                detail: format!("`{stage}` consumes its factors; run `train {c}` and `extract {c}` first"),
            }
            .into());
        }
    }
    let data = load_data(cfg)?;
    let outcome = cascade::train_stage(&plan, &data, &cfg.cascade)?;
    match &outcome {
        StageOutcome::Factor { log, .. } => {
            let best = &log.epochs[log.best_epoch];
            println!(
                "trained {stage}: kept epoch {} of {}, held-out loss {:.4}, held-out frame accuracy {:.4}",
                best.epoch,
                log.epochs.len(),
                best.val_loss,
                best.val_accuracy
            );
            if log.val_loss_rose {
                log::warn!("{stage}: held-out loss at the last epoch exceeds the first");
            }
        }
        StageOutcome::Recon { report, .. } => {
            println!("trained recon: held-out mse {:.6} over {} frames", report.heldout_mse, report.heldout_frames);
        }
    }
    Ok(outcome)
}

/// Extracts and caches the factors of one stage for every utterance.
pub fn extract(cfg: &RunConfig, stage: &str) -> anyhow::Result<usize> {
    let stage = parse_stage(stage)?;
    let ws = workspace(cfg);
    ws.load_model(stage)?;
    let data = load_data(cfg)?;
    let n = cascade::extract_stage(&ws, &data, stage, &cfg.cascade)?;
    println!("extracted {stage} factors for {n} utterances into {}", ws.stage_dir(stage).display());
    Ok(n)
}

fn write_report(cfg: &RunConfig, name: &str, report: &EvalReport) -> anyhow::Result<PathBuf> {
    let path = cfg.results_dir.join(name);
    write_bytes(&path, report.to_csv().as_bytes())?;
    Ok(path)
}

/// Top-1 identification rate of every trained speaker system under every
/// configured trial condition.
pub fn eval_sid(cfg: &RunConfig) -> anyhow::Result<EvalReport> {
    let ws = workspace(cfg);
    let trained: Vec<Stage> = [Stage::SpkIdf, Stage::SpkCdf].into_iter().filter(|&s| ws.is_trained(s)).collect();
    if trained.is_empty() {
        return Err(Error::MissingStage {
            stage: "spk-idf/spk-cdf".into(),
            detail: "no speaker network is trained; run `train spk-idf` or `train spk-cdf` first".into(),
        }
        .into());
    }
    let data = load_data(cfg)?;
    let ling = if trained.contains(&Stage::SpkCdf) {
        Some(ws.load_model(Stage::Ling)?)
    } else {
        None
    };
    let mut report = EvalReport::default();
    report.notes.push(format!(
        "top-1 identification over {} speakers; chance {:.4}",
        data.manifest.n_speakers,
        1.0 / data.manifest.n_speakers as f64
    ));
    for stage in trained {
        let speaker = ws.load_model(stage)?;
        let system = SpeakerSystem {
            linguistic: ling.as_ref(),
            speaker: &speaker,
        };
        let results = eval::run_sid_eval(system, &data, &cfg.conditions, cfg.max_segments_per_speaker, cfg.seed)?;
        for r in results {
            let label = r.condition.label();
            println!("{stage} {label}: IDR {:.4} ({}/{})", r.idr(), r.correct, r.total);
            report.push(format!("{stage}/{label}/idr"), r.idr());
            report.push(format!("{stage}/{label}/trials"), r.total as f64);
        }
    }
    let path = write_report(cfg, "sid_report.csv", &report)?;
    println!("wrote {}", path.display());
    Ok(report)
}

/// Frame- and utterance-level ACC and MAP of every trained emotion stage
/// on the held-out split.
pub fn eval_aer(cfg: &RunConfig) -> anyhow::Result<EvalReport> {
    let ws = workspace(cfg);
    let trained: Vec<Stage> = Stage::EMOTION.into_iter().filter(|&s| ws.is_trained(s)).collect();
    if trained.is_empty() {
        return Err(Error::MissingStage {
            stage: "emo-baseline".into(),
            detail: "no emotion network is trained; run `train emo-baseline` (or another emo-* stage) first".into(),
        }
        .into());
    }
    let data = load_data(cfg)?;
    let mut report = EvalReport::default();
    report.notes.push("map counts a class that is never predicted as precision 0".into());
    for stage in trained {
        let model = ws.load_model(stage)?;
        let cond_stages = ws.conditioning_stages(stage, cfg.cascade.speaker_source);
        let cond = load_conditioning(&ws, &data, &cond_stages)?;
        let r = eval::run_aer_eval(&model, &data, &cond)?;
        let rows = [
            ("frame_acc", r.frame_acc()?),
            ("frame_map", r.frame_map()?),
            ("utt_acc", r.utt_acc()?),
            ("utt_map", r.utt_map()?),
        ];
        println!(
            "{stage}: frame ACC {:.4} MAP {:.4}, utterance ACC {:.4} MAP {:.4}",
            rows[0].1, rows[1].1, rows[2].1, rows[3].1
        );
        for (name, v) in rows {
            report.push(format!("{stage}/{name}"), v);
        }
    }
    let path = write_report(cfg, "aer_report.csv", &report)?;
    println!("wrote {}", path.display());
    Ok(report)
}

/// Runs the cascade and generators on one utterance, writes its five
/// spectrogram panels and a report with its MSE and the held-out MSE.
pub fn reconstruct(cfg: &RunConfig, utt: &str) -> anyhow::Result<EvalReport> {
    let ws = workspace(cfg);
    let models = CascadeModelSet::load(&ws, &cfg.cascade)?;
    let recon = ws.load_recon()?;
    let data = load_data(cfg)?;
    let i = data.index_of(utt).map_err(|e| UsageError(e.to_string()))?;
    let rec = &data.manifest.utts[i];
    let target = data.manifest.load_spectrum(rec)?;
    let f = run_cascade(&models, utt, &data.fbank[i])?;
    let out = run_generators(&recon, &f.q, &f.s, &f.e)?;

    let n = out.total.len() as f64;
    let mse = out.total.iter().zip(target.data()).map(|(p, y)| (y - p).powi(2)).sum::<f64>() / n;
    let additivity = (0..out.total.len())
        .map(|k| (out.total[k] - out.components.iter().map(|c| c[k]).sum::<f64>()).abs())
        .fold(0.0, f64::max);

    let cond = load_conditioning(&ws, &data, &ws.conditioning_stages(Stage::Recon, cfg.cascade.speaker_source))?;
    let feats: Vec<[dsp::FeatureMatrix; 3]> = cond
        .iter()
        .zip(&data.heldout)
        .filter(|(_, &h)| h)
        .map(|(c, _)| Ok([c[0].as_features()?, c[1].as_features()?, c[2].as_features()?]))
        .collect::<cdf_core::Result<_>>()?;
    let targets: Vec<dsp::FeatureMatrix> = data
        .manifest
        .utts
        .iter()
        .zip(&data.heldout)
        .filter(|(_, &h)| h)
        .map(|(u, _)| data.manifest.load_spectrum(u))
        .collect::<cdf_core::Result<_>>()?;
    let items: Vec<ReconItem> = feats
        .iter()
        .zip(&targets)
        .map(|(f, t)| ReconItem {
            q: &f[0],
            s: &f[1],
            e: &f[2],
            target: t,
        })
        .collect();
    let (heldout_mse, res_mean, res_var, frames) = residual_stats(&recon, &items)?;

    let dir = cfg.results_dir.join("recon");
    let panels = render_spectrograms(&target, &out, &dir, utt)?;
    let mut report = EvalReport::default();
    report.notes.push(format!("utterance {utt}, corpus sigma {}", data.manifest.sigma));
    report.push("utterance_mse", mse);
    report.push("utterance_heldout", if data.heldout[i] { 1.0 } else { 0.0 });
    report.push("additivity_max_abs_error", additivity);
    report.push("heldout_mse", heldout_mse);
    report.push("heldout_residual_mean", res_mean);
    report.push("heldout_residual_var", res_var);
    report.push("heldout_frames", frames as f64);
    report.push("noise_variance", data.manifest.sigma * data.manifest.sigma);
    let path = dir.join(format!("{utt}_report.csv"));
    write_bytes(&path, report.to_csv().as_bytes())?;
    println!(
        "{utt}: mse {mse:.6}; held-out mse {heldout_mse:.6} over {frames} frames; wrote {} panels and {}",
        panels.len(),
        path.display()
    );
    Ok(report)
}

/// Two-dimensional PCA of a stage's cached factors: utterance means for
/// speaker and emotion stages, every tenth held-out frame for `ling`.
pub fn project(cfg: &RunConfig, stage: &str) -> anyhow::Result<PathBuf> {
    let stage = parse_stage(stage)?;
    if stage == Stage::Recon {
        return Err(UsageError("recon produces no factors to project".into()).into());
    }
    let ws = workspace(cfg);
    ws.load_model(stage)?;
    let data = load_data(cfg)?;
    let m = &data.manifest;
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut vectors = Vec::new();
    for (i, u) in m.utts.iter().enumerate() {
        let f: FactorStream = load_factors(&ws, stage, &u.id)?;
        match stage {
            Stage::Ling => {
                if !data.heldout[i] {
                    continue;
                }
                for t in (0..f.frames()).step_by(LING_PROJECT_STRIDE) {
                    ids.push(format!("{}@{t}", u.id));
                    labels.push(data.phones[i][t] as usize);
                    vectors.push(f.row(t).to_vec());
                }
            }
            Stage::SpkIdf | Stage::SpkCdf => {
                ids.push(u.id.clone());
                labels.push(u.speaker);
                vectors.push(eval::dvector(&f)?.vector);
            }
            _ => {
                let mut mean = vec![0.0; f.dim()];
                for r in f.rows() {
                    for (a, b) in mean.iter_mut().zip(r) {
                        *a += b;
                    }
                }
                ids.push(u.id.clone());
                labels.push(u.emotion);
                vectors.push(length_normalize(&mean));
            }
        }
    }
    let points = eval::pca_project(&vectors, 2)?;
    let path = cfg.results_dir.join(format!("project_{stage}.csv"));
    write_bytes(&path, eval::pca_csv(&ids, &labels, &points).as_bytes())
        .with_context(|| format!("writing projection of {stage}"))?;
    println!("projected {} {stage} vectors into {}", points.len(), path.display());
    Ok(path)
}
