//! Spectrum reconstruction from the three factor streams.
//!
//! Three generators map spliced linguistic, speaker and emotion factors to
//! log spectra; the reconstruction is their elementwise sum, trained jointly
//! with mean squared error against the true log spectrum.

use std::fmt::Write as _;
use std::path::Path;

use crate::dsp::{splice_row_into, CmvnStats, FeatureMatrix};
use crate::error::{Error, Result};
use crate::io::write_bytes;
use crate::models::{build_generator, ArchConfig, FactorStream};
use crate::nn::train::{plan_epoch, Chunk};
use crate::nn::{network_backward, network_forward, sgd_step, Model, ParamStore, Segment, TrainConfig};
use crate::rng;

const GEN_FILES: [&str; 3] = ["model_q.cdfn", "model_s.cdfn", "model_e.cdfn"];
const SPLICE_FILE: &str = "splice.txt";

/// The linguistic, speaker and emotion generators.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconModel {
    pub gen_q: Model,
    pub gen_s: Model,
    pub gen_e: Model,
    pub spectrum_dim: usize,
    /// Half-width of the factor splice each generator reads.
    pub splice: usize,
}

/// Builds zero-initialized generators for factor widths `dq`, `ds`, `de`.
pub fn build_recon_model(dq: usize, ds: usize, de: usize, spectrum_dim: usize, arch: &ArchConfig) -> Result<ReconModel> {
    if dq == 0 || ds == 0 || de == 0 || spectrum_dim == 0 {
        return Err(Error::Invalid("factor and spectrum widths must be positive".into()));
    }
    let w = 2 * arch.recon_splice + 1;
    let gen = |d: usize| -> Result<Model> {
        let spec = build_generator(w * d, spectrum_dim, arch)?;
        Ok(Model {
            params: ParamStore::zeros(&spec),
            spec,
        })
    };
    Ok(ReconModel {
        gen_q: gen(dq)?,
        gen_s: gen(ds)?,
        gen_e: gen(de)?,
        spectrum_dim,
        splice: arch.recon_splice,
    })
}

impl ReconModel {
    pub fn generators(&self) -> [&Model; 3] {
        [&self.gen_q, &self.gen_s, &self.gen_e]
    }

    fn generators_mut(&mut self) -> [&mut Model; 3] {
        [&mut self.gen_q, &mut self.gen_s, &mut self.gen_e]
    }

    /// Glorot-initializes all three generators.
    pub fn init(&mut self, rng: &mut rng::Rng) {
        for g in self.generators_mut() {
            g.params = ParamStore::init(&g.spec, rng);
        }
    }

    fn quantized(mut self) -> Self {
        for g in self.generators_mut() {
            *g = g.clone().quantized();
        }
        self
    }

    pub fn exists(dir: &Path) -> bool {
        GEN_FILES.iter().chain([&SPLICE_FILE]).all(|f| dir.join(f).is_file())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for (g, f) in self.generators().into_iter().zip(GEN_FILES) {
            g.save(&dir.join(f))?;
        }
        write_bytes(&dir.join(SPLICE_FILE), format!("{}\n", self.splice).as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let [q, s, e] = GEN_FILES.map(|f| Model::load(&dir.join(f)));
        let (gen_q, gen_s, gen_e) = (q?, s?, e?);
        let spectrum_dim = gen_q.spec.output_dim();
        if gen_s.spec.output_dim() != spectrum_dim || gen_e.spec.output_dim() != spectrum_dim {
            return Err(Error::format(dir, "generators disagree on the spectrum width"));
        }
        let splice_path = dir.join(SPLICE_FILE);
        let splice: usize = String::from_utf8_lossy(&crate::io::read_bytes(&splice_path)?)
            .trim()
            .parse()
            .map_err(|_| Error::format(&splice_path, "expected the factor splice half-width"))?;
        let model = Self {
            gen_q,
            gen_s,
            gen_e,
            spectrum_dim,
            splice,
        };
        let w = 2 * splice + 1;
        if model.generators().iter().any(|g| g.spec.input_dim % w != 0) {
            return Err(Error::format(dir, "generator inputs are not whole spliced frames"));
        }
        Ok(model)
    }

    fn check_inputs(&self, widths: [usize; 3]) -> Result<()> {
        let w = 2 * self.splice + 1;
        for (g, d) in self.generators().into_iter().zip(widths) {
            if g.spec.input_dim != w * d {
                return Err(Error::Shape(format!(
                    "generator expects {} inputs, factor of width {d} spliced by {} gives {}",
                    g.spec.input_dim,
                    self.splice,
                    w * d
                )));
            }
        }
        Ok(())
    }
}

/// Reconstruction and its three components for a batch of frames.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconOutput {
    pub frames: usize,
    pub dim: usize,
    pub total: Vec<f64>,
    /// Linguistic, speaker and emotion components.
    pub components: [Vec<f64>; 3],
}

fn run_generators(model: &ReconModel, inputs: [&[f64]; 3], rows: usize) -> Result<ReconOutput> {
    let seg = Segment::whole(rows);
    let mut comps = Vec::with_capacity(3);
    for (g, x) in model.generators().into_iter().zip(inputs) {
        comps.push(network_forward(&g.spec, &g.params, x, &[], &seg, usize::MAX)?.acts.pop().expect("output"));
    }
    let [cq, cs, ce]: [Vec<f64>; 3] = comps.try_into().expect("three components");
    let total = cq.iter().zip(&cs).zip(&ce).map(|((a, b), c)| a + b + c).collect();
    Ok(ReconOutput {
        frames: rows,
        dim: model.spectrum_dim,
        total,
        components: [cq, cs, ce],
    })
}

/// Reconstructs one frame from its spliced factor contexts.
pub fn reconstruct_frame(model: &ReconModel, q_ctx: &[f64], s_ctx: &[f64], e_ctx: &[f64]) -> Result<(Vec<f64>, [Vec<f64>; 3])> {
    for (g, x) in model.generators().into_iter().zip([q_ctx, s_ctx, e_ctx]) {
        if x.len() != g.spec.input_dim {
            return Err(Error::Shape(format!(
                "context has {} values, generator expects {}",
                x.len(),
                g.spec.input_dim
            )));
        }
    }
    let out = run_generators(model, [q_ctx, s_ctx, e_ctx], 1)?;
    Ok((out.total, out.components))
}

/// Reconstructs every frame of an utterance from its factor streams.
pub fn reconstruct(model: &ReconModel, q: &FactorStream, s: &FactorStream, e: &FactorStream) -> Result<ReconOutput> {
    let t = q.frames();
    if s.frames() != t || e.frames() != t {
        return Err(Error::Misaligned {
            utt: q.utt_id.clone(),
            what: "speaker or emotion factor stream".into(),
            expected: t,
            found: if s.frames() != t { s.frames() } else { e.frames() },
        });
    }
    model.check_inputs([q.dim(), s.dim(), e.dim()])?;
    let feats = [q.as_features()?, s.as_features()?, e.as_features()?];
    let chunk = [Chunk { seq: 0, start: 0, end: t }];
    let refs = [&feats[0], &feats[1], &feats[2]];
    let inputs = spliced_rows(&[refs], model.splice, &chunk);
    run_generators(model, [&inputs[0], &inputs[1], &inputs[2]], t)
}

/// Factor streams (as feature matrices) and target spectrum of one
/// utterance.
#[derive(Debug, Clone, Copy)]
pub struct ReconItem<'a> {
    pub q: &'a FeatureMatrix,
    pub s: &'a FeatureMatrix,
    pub e: &'a FeatureMatrix,
    pub target: &'a FeatureMatrix,
}

fn spliced_rows(items: &[[&FeatureMatrix; 3]], splice: usize, chunks: &[Chunk]) -> [Vec<f64>; 3] {
    let mut out: [Vec<f64>; 3] = Default::default();
    for c in chunks {
        for t in c.start..c.end {
            for (k, buf) in out.iter_mut().enumerate() {
                splice_row_into(items[c.seq][k], t, splice, splice, buf);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconEpoch {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReconReport {
    pub epochs: Vec<ReconEpoch>,
    /// Per-bin mean squared error over held-out frames.
    pub heldout_mse: f64,
    pub residual_mean: f64,
    pub residual_var: f64,
    pub heldout_frames: usize,
}

impl ReconReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let _ = writeln!(s, "heldout_mse,{:.8}", self.heldout_mse);
        let _ = writeln!(s, "residual_mean,{:.8}", self.residual_mean);
        let _ = writeln!(s, "residual_var,{:.8}", self.residual_var);
        let _ = writeln!(s, "heldout_frames,{}", self.heldout_frames);
        for e in &self.epochs {
            let _ = writeln!(s, "epoch{}_train_mse,{:.8}", e.epoch, e.train_mse);
            let _ = writeln!(s, "epoch{}_val_mse,{:.8}", e.epoch, e.val_mse);
            let _ = writeln!(s, "epoch{}_learning_rate,{}", e.epoch, e.learning_rate);
        }
        s
    }
}

fn check_item(model: &ReconModel, it: &ReconItem) -> Result<()> {
    let t = it.target.frames();
    for m in [it.q, it.s, it.e] {
        if m.frames() != t {
            return Err(Error::Shape(format!("factor stream has {} frames, target {t}", m.frames())));
        }
    }
    if it.target.dim() != model.spectrum_dim {
        return Err(Error::Shape(format!(
            "target spectrum has {} bins, generators output {}",
            it.target.dim(),
            model.spectrum_dim
        )));
    }
    model.check_inputs([it.q.dim(), it.s.dim(), it.e.dim()])
}

/// Residual statistics of `model` over `items`: (mse, residual mean,
/// residual variance, frames).
pub fn residual_stats(model: &ReconModel, items: &[ReconItem]) -> Result<(f64, f64, f64, usize)> {
    let (mut sum, mut sum2, mut n, mut frames) = (0.0, 0.0, 0usize, 0usize);
    for it in items {
        let t = it.target.frames();
        let chunk = [Chunk { seq: 0, start: 0, end: t }];
        let x = spliced_rows(&[[it.q, it.s, it.e]], model.splice, &chunk);
        let out = run_generators(model, [&x[0], &x[1], &x[2]], t)?;
        for (p, y) in out.total.iter().zip(it.target.data()) {
            let r = y - p;
            sum += r;
            sum2 += r * r;
            n += 1;
        }
        frames += t;
    }
    if n == 0 {
        return Err(Error::Empty("no frames to evaluate".into()));
    }
    let mse = sum2 / n as f64;
    let mean = sum / n as f64;
    Ok((mse, mean, mse - mean * mean, frames))
}

/// Trains the generators jointly through their sum and returns the
/// parameters with the lowest held-out MSE.
pub fn train_recon(model: ReconModel, train: &[ReconItem], val: &[ReconItem], cfg: &TrainConfig) -> Result<(ReconModel, ReconReport)> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Empty("training and validation sets must both be non-empty".into()));
    }
    for it in train.iter().chain(val) {
        check_item(&model, it)?;
    }
    let (raw_train, raw_val) = (train, val);
    // Factors are standardized for training; the map is folded into each
    // generator's first layer at the end so the model takes raw factors.
    let stats: Vec<CmvnStats> = (0..3)
        .map(|k| CmvnStats::accumulate(raw_train.iter().map(|i| [i.q, i.s, i.e][k])))
        .collect::<Result<_>>()?;
    let standardize = |items: &[ReconItem]| -> Result<Vec<[FeatureMatrix; 3]>> {
        items
            .iter()
            .map(|i| Ok([stats[0].apply(i.q)?, stats[1].apply(i.s)?, stats[2].apply(i.e)?]))
            .collect()
    };
    let (std_train, std_val) = (standardize(raw_train)?, standardize(raw_val)?);
    let train: Vec<ReconItem> = std_train
        .iter()
        .zip(raw_train)
        .map(|(f, r)| ReconItem { q: &f[0], s: &f[1], e: &f[2], target: r.target })
        .collect();
    let val: Vec<ReconItem> = std_val
        .iter()
        .zip(raw_val)
        .map(|(f, r)| ReconItem { q: &f[0], s: &f[1], e: &f[2], target: r.target })
        .collect();
    let (train, val) = (&train[..], &val[..]);
    let lengths: Vec<usize> = train.iter().map(|i| i.target.frames()).collect();
    let streams: Vec<[&FeatureMatrix; 3]> = train.iter().map(|i| [i.q, i.s, i.e]).collect();
    let d = model.spectrum_dim;

    let mut model = model;
    let mut velocity: Vec<ParamStore> = model.generators().iter().map(|g| ParamStore::zeros(&g.spec)).collect();
    let mut best = model.clone();
    let mut best_mse = f64::INFINITY;
    let mut report = ReconReport::default();
    let mut lr = cfg.learning_rate;
    let mut rises = 0;

    for epoch in 0..cfg.epochs {
        let mut r = rng::stream(cfg.seed, epoch as u64);
        let chunks = plan_epoch(&lengths, 1, cfg.frames_per_epoch, &mut r);
        let (mut sse, mut frames) = (0.0, 0usize);
        for batch in chunks.chunks(cfg.minibatch_size) {
            let rows = batch.len();
            let x = spliced_rows(&streams, model.splice, batch);
            let mut target = Vec::with_capacity(rows * d);
            for c in batch {
                target.extend_from_slice(train[c.seq].target.row(c.start));
            }
            let seg = Segment::whole(rows);
            let traces = model
                .generators()
                .into_iter()
                .zip(&x)
                .map(|(g, x)| network_forward(&g.spec, &g.params, x, &[], &seg, usize::MAX))
                .collect::<Result<Vec<_>>>()?;
            let numel = (rows * d) as f64;
            let mut grad = vec![0.0; rows * d];
            let mut loss = 0.0;
            for i in 0..rows * d {
                let diff = traces[0].output()[i] + traces[1].output()[i] + traces[2].output()[i] - target[i];
                loss += diff * diff;
                grad[i] = 2.0 * diff / numel;
            }
            let mut grads = model
                .generators()
                .into_iter()
                .zip(&traces)
                .map(|(g, tr)| network_backward(&g.spec, &g.params, tr, grad.clone(), g.spec.layers.len()))
                .collect::<Result<Vec<_>>>()?;
            if let Some(max) = cfg.max_grad_norm {
                // Clip the joint gradient of all three generators.
                let norm = grads
                    .iter()
                    .flat_map(|g| g.tensors())
                    .flat_map(|t| t.data())
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    for t in grads.iter_mut().flat_map(|g| g.tensors_mut()) {
                        t.data_mut().iter_mut().for_each(|v| *v *= max / norm);
                    }
                }
            }
            for ((g, gr), v) in model.generators_mut().into_iter().zip(&grads).zip(&mut velocity) {
                sgd_step(&mut g.params, gr, v, lr, cfg.momentum);
            }
            sse += loss;
            frames += rows;
        }
        if model.generators().iter().any(|g| !g.params.is_finite()) {
            return Err(Error::Invalid(format!("training diverged in epoch {epoch}; lower the learning rate")));
        }
        let (val_mse, ..) = residual_stats(&model, val)?;
        let train_mse = sse / (frames.max(1) * d) as f64;
        log::info!("recon epoch {epoch}: train mse {train_mse:.5}, val mse {val_mse:.5}, lr {lr}");
        let prev = report.epochs.last().map(|e: &ReconEpoch| e.val_mse);
        report.epochs.push(ReconEpoch {
            epoch,
            train_mse,
            val_mse,
            learning_rate: lr,
        });
        if val_mse < best_mse {
            best_mse = val_mse;
            best = model.clone();
        }
        if let Some(prev) = prev {
            if prev - val_mse < cfg.lr_halving_threshold * prev {
                lr *= 0.5;
            }
            rises = if val_mse > prev { rises + 1 } else { 0 };
            if rises >= cfg.early_stop_patience {
                break;
            }
        }
    }
    let width = 2 * best.splice + 1;
    for (g, st) in best.generators_mut().into_iter().zip(&stats) {
        let d = st.mean.len();
        for k in 0..width {
            g.params.fold_input_affine(&g.spec, 0, k * d, &st.mean, &st.inverse_std())?;
        }
    }
    let best = best.quantized();
    let (mse, mean, var, frames) = residual_stats(&best, raw_val)?;
    report.heldout_mse = mse;
    report.residual_mean = mean;
    report.residual_var = var;
    report.heldout_frames = frames;
    Ok((best, report))
}

/// Writes `data` (`frames x bins`) as a binary PGM with frequency rows
/// (lowest bin at the bottom) and frame columns, min-max scaled to 0..255.
pub fn write_pgm(path: &Path, frames: usize, bins: usize, data: &[f64]) -> Result<()> {
    if data.len() != frames * bins || frames == 0 || bins == 0 {
        return Err(Error::Shape(format!("image data has {} values for {frames} x {bins}", data.len())));
    }
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut bytes = format!("P5\n{frames} {bins}\n255\n").into_bytes();
    for k in (0..bins).rev() {
        for t in 0..frames {
            let v = data[t * bins + k];
            let g = if span > 0.0 { ((v - lo) / span * 255.0).round() } else { 0.0 };
            bytes.push(g.clamp(0.0, 255.0) as u8);
        }
    }
    write_bytes(path, &bytes)
}

/// Writes the five panels (original, reconstruction, three components) for
/// one utterance into `dir`; returns the written paths.
pub fn render_spectrograms(
    original: &FeatureMatrix,
    out: &ReconOutput,
    dir: &Path,
    utt: &str,
) -> Result<Vec<std::path::PathBuf>> {
    if original.frames() != out.frames || original.dim() != out.dim {
        return Err(Error::Shape("original and reconstruction differ in shape".into()));
    }
    let panels: [(&str, &[f64]); 5] = [
        ("original", original.data()),
        ("reconstructed", &out.total),
        ("linguistic", &out.components[0]),
        ("speaker", &out.components[1]),
        ("emotion", &out.components[2]),
    ];
    let mut paths = Vec::new();
    for (name, data) in panels {
        let p = dir.join(format!("{utt}_{name}.pgm"));
        write_pgm(&p, out.frames, out.dim, data)?;
        paths.push(p);
    }
    Ok(paths)
}
