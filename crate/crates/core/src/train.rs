//! Adam training loop with resumable checkpoints and a CSV loss log.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::corpus::{MarkupDoc, RenderedImage};
use crate::diffusion::LossBundle;
use crate::error::ModelError;
use crate::model::Model;
use crate::numerics::{Binding, DenseArray, ParamStore, Purpose, RngStream};

pub const LOG_FILE: &str = "loss_log.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.fsac";
const LOG_HEADER: &str = "step,l_fa,elbo_anchor,elbo_pos,eubo_neg_term,l_cl,total";
const STEP_KEY: &str = "train.step";
const M_PREFIX: &str = "adam.m:";
const V_PREFIX: &str = "adam.v:";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> TrainError + '_ {
    move |e| TrainError::Io { path: path.display().to_string(), message: e.to_string() }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    /// Anchors per step; each brings its own positive view and negatives.
    pub batch: usize,
    pub lr: f64,
    pub steps: u64,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub threads: usize,
    /// Linear warmup length before cosine decay; 0 keeps `lr` constant.
    pub warmup_steps: u64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { seed: 0, batch: 1, lr: 1e-4, steps: 100, checkpoint_every: 0, threads: 1, warmup_steps: 0, grad_clip: 0.0 }
    }
}

impl TrainConfig {
    /// Learning rate for the update that completes step `step + 1`: linear
    /// warmup to `lr`, then cosine decay to zero at `steps`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            return self.lr;
        }
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Loss terms of one step and the gradient norm before clipping.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub bundle: LossBundle,
    pub grad_norm: f64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Parameters, Adam moments and the number of completed steps.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamStore,
    pub m: ParamStore,
    pub v: ParamStore,
    pub step: u64,
}

impl TrainState {
    pub fn new(params: ParamStore) -> Self {
        let zeros = |p: &ParamStore| {
            let mut z = ParamStore::new();
            for (n, t) in p.iter() {
                z.insert(n.clone(), DenseArray::zeros(t.shape()));
            }
            z
        };
        Self { m: zeros(&params), v: zeros(&params), params, step: 0 }
    }

    /// One Adam update with bias correction.
    pub fn apply(&mut self, grads: &BTreeMap<String, Vec<f64>>, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powf(self.step as f64);
        let c2 = 1.0 - ADAM_BETA2.powf(self.step as f64);
        for (name, p) in self.params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.get_mut(name).expect("moment for every parameter").data_mut();
            let v = self.v.get_mut(name).expect("moment for every parameter").data_mut();
            for (((w, gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
            }
        }
    }

    /// Flattens everything into one store for checkpointing.
    pub fn to_store(&self) -> ParamStore {
        let mut s = self.params.clone();
        for (n, t) in self.m.iter() {
            s.insert(format!("{M_PREFIX}{n}"), t.clone());
        }
        for (n, t) in self.v.iter() {
            s.insert(format!("{V_PREFIX}{n}"), t.clone());
        }
        s.insert(STEP_KEY, DenseArray::scalar(self.step as f64));
        s
    }

    /// Inverse of [`TrainState::to_store`]; every tensor must match the
    /// names and shapes of `template`.
    pub fn from_store(store: &ParamStore, template: &ParamStore) -> Result<Self, ModelError> {
        let mut params = ParamStore::new();
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        let mut step = None;
        for (name, t) in store.iter() {
            if name == STEP_KEY {
                step = t.data().first().copied();
            } else if let Some(n) = name.strip_prefix(M_PREFIX) {
                m.insert(n, t.clone());
            } else if let Some(n) = name.strip_prefix(V_PREFIX) {
                v.insert(n, t.clone());
            } else {
                params.insert(name.clone(), t.clone());
            }
        }
        let step = step.ok_or_else(|| ModelError::Shape("checkpoint has no step counter".into()))?;
        if !(step >= 0.0 && step.fract() == 0.0) {
            return Err(ModelError::Shape(format!("checkpoint step counter {step} is not a count")));
        }
        for (what, s) in [("parameters", &params), ("first moments", &m), ("second moments", &v)] {
            template.check_compatible(s).map_err(|e| ModelError::Shape(format!("checkpoint {what}: {e}")))?;
        }
        Ok(Self { params, m, v, step: step as u64 })
    }
}

/// Corpus positions used as anchors at `step`: everything when the batch
/// covers the corpus, otherwise a keyed draw without replacement.
pub fn anchors_for_step(seed: u64, step: u64, batch: usize, corpus_len: usize) -> Vec<usize> {
    if batch >= corpus_len {
        return (0..corpus_len).collect();
    }
    let mut rng = RngStream::new(seed, Purpose::Batch, step);
    let mut all: Vec<usize> = (0..corpus_len).collect();
    for i in 0..batch {
        let j = i + rng.below(corpus_len - i);
        all.swap(i, j);
    }
    all.truncate(batch);
    all
}

type AnchorResult = Result<(LossBundle, BTreeMap<String, Vec<f64>>), ModelError>;

fn anchor_grads(model: &Model, params: &ParamStore, corpus: &[(MarkupDoc, RenderedImage)], anchor: usize, seed: u64, step: u64) -> AnchorResult {
    let item = model.draw_item(corpus, anchor, seed, step)?;
    let mut b = Binding::new(params);
    let (vars, bundle) = model.example_loss(&mut b, &item)?;
    let grads = b.tape.backward(vars.total);
    Ok((bundle, b.param_grads(&grads)))
}

/// Computes the batch-mean loss and gradient at the current parameters and
/// applies one Adam update. Per-anchor results are reduced in anchor order,
/// so the outcome does not depend on `threads`.
pub fn train_step(
    model: &Model,
    state: &mut TrainState,
    corpus: &[(MarkupDoc, RenderedImage)],
    cfg: &TrainConfig,
) -> Result<StepOutcome, ModelError> {
    let anchors = anchors_for_step(cfg.seed, state.step, cfg.batch, corpus.len());
    let params = &state.params;
    let step = state.step;
    let threads = cfg.threads.clamp(1, anchors.len().max(1));
    let results: Vec<AnchorResult> = if threads == 1 {
        anchors.iter().map(|&a| anchor_grads(model, params, corpus, a, cfg.seed, step)).collect()
    } else {
        let chunk = anchors.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = anchors
                .chunks(chunk)
                .map(|part| {
                    s.spawn(move || part.iter().map(|&a| anchor_grads(model, params, corpus, a, cfg.seed, step)).collect::<Vec<_>>())
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("training worker panicked")).collect()
        })
    };

    let n = results.len() as f64;
    let mut sum: Option<(LossBundle, BTreeMap<String, Vec<f64>>)> = None;
    for r in results {
        let (bundle, grads) = r?;
        match &mut sum {
            None => sum = Some((bundle, grads)),
            Some((acc, g_acc)) => {
                acc.l_fa += bundle.l_fa;
                acc.elbo_anchor += bundle.elbo_anchor;
                acc.elbo_pos += bundle.elbo_pos;
                acc.eubo_neg_term += bundle.eubo_neg_term;
                acc.l_cl += bundle.l_cl;
                acc.total += bundle.total;
                for (name, g) in grads {
                    let dst = g_acc.get_mut(&name).expect("same parameter set");
                    dst.iter_mut().zip(&g).for_each(|(d, x)| *d += x);
                }
            }
        }
    }
    let (mut bundle, mut grads) = sum.ok_or_else(|| ModelError::Config("empty training corpus".into()))?;
    for v in [
        &mut bundle.l_fa,
        &mut bundle.elbo_anchor,
        &mut bundle.elbo_pos,
        &mut bundle.eubo_neg_term,
        &mut bundle.l_cl,
        &mut bundle.total,
    ] {
        *v /= n;
    }
    for g in grads.values_mut() {
        g.iter_mut().for_each(|x| *x /= n);
    }
    if let Some((name, _)) = grads.iter().find(|(_, g)| g.iter().any(|x| !x.is_finite())) {
        return Err(ModelError::NonFinite { what: format!("gradient of {name}"), value: f64::NAN });
    }
    let grad_norm = grads.values().flatten().map(|x| x * x).sum::<f64>().sqrt();
    if cfg.grad_clip > 0.0 && grad_norm > cfg.grad_clip {
        let k = cfg.grad_clip / grad_norm;
        grads.values_mut().flatten().for_each(|x| *x *= k);
    }
    state.apply(&grads, cfg.lr_at(state.step));
    Ok(StepOutcome { bundle, grad_norm })
}

pub fn log_line(step: u64, b: &LossBundle) -> String {
    format!("{step},{},{},{},{},{},{}", b.l_fa, b.elbo_anchor, b.elbo_pos, b.eubo_neg_term, b.l_cl, b.total)
}

/// Reads every row of a loss log back as `(step, terms)`.
pub fn read_log(path: &Path) -> Result<Vec<(u64, LossBundle)>, TrainError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |line: &str| TrainError::Io { path: path.display().to_string(), message: format!("malformed row {line:?}") };
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 7 {
                return Err(bad(line));
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad(line));
            let step = f[0].parse::<u64>().map_err(|_| bad(line))?;
            Ok((
                step,
                LossBundle { l_fa: num(1)?, elbo_anchor: num(2)?, elbo_pos: num(3)?, eubo_neg_term: num(4)?, l_cl: num(5)?, total: num(6)? },
            ))
        })
        .collect()
}

/// Opens the log for appending after `step`, dropping rows a crashed run
/// wrote past its last checkpoint.
fn open_log(path: &Path, step: u64) -> Result<BufWriter<File>, TrainError> {
    let mut keep = String::from(LOG_HEADER);
    keep.push('\n');
    if step > 0 && path.exists() {
        for line in fs::read_to_string(path).map_err(io_err(path))?.lines().skip(1) {
            let s = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
            if s.is_some_and(|s| s <= step) {
                keep.push_str(line);
                keep.push('\n');
            }
        }
    }
    fs::write(path, keep).map_err(io_err(path))?;
    let f = OpenOptions::new().append(true).open(path).map_err(io_err(path))?;
    Ok(BufWriter::new(f))
}

/// Where a training run writes its artifacts.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub log: PathBuf,
    pub checkpoint: PathBuf,
}

impl RunPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self { log: dir.join(LOG_FILE), checkpoint: dir.join(CHECKPOINT_FILE) }
    }
}

/// Trains until `cfg.steps` completed steps, starting from `state`. The
/// log gets one row per step; checkpoints are written every
/// `checkpoint_every` steps and at the end. A non-finite loss aborts
/// without touching the last written checkpoint.
pub fn run(
    model: &Model,
    corpus: &[(MarkupDoc, RenderedImage)],
    cfg: &TrainConfig,
    mut state: TrainState,
    paths: &RunPaths,
    mut on_step: impl FnMut(u64, &LossBundle),
) -> Result<TrainState, TrainError> {
    if let Some(dir) = paths.log.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut log = open_log(&paths.log, state.step)?;
    while state.step < cfg.steps {
        let bundle = match train_step(model, &mut state, corpus, cfg) {
            Ok(o) => o.bundle,
            Err(e) => {
                log.flush().map_err(io_err(&paths.log))?;
                return Err(e.into());
            }
        };
        writeln!(log, "{}", log_line(state.step, &bundle)).map_err(io_err(&paths.log))?;
        on_step(state.step, &bundle);
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
            log.flush().map_err(io_err(&paths.log))?;
            checkpoint::save(&paths.checkpoint, &state.to_store())?;
        }
    }
    log.flush().map_err(io_err(&paths.log))?;
    checkpoint::save(&paths.checkpoint, &state.to_store())?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ccam::UnetConfig;
    use crate::corpus::{generate, render};
    use crate::model::ModelConfig;

    pub(crate) fn tiny_model() -> Model {
        let mut c = ModelConfig::default();
        c.encoder.image_height = 8;
        c.encoder.image_width = 16;
        c.encoder.d_model = 8;
        c.encoder.conv_channels = [2, 2, 2, 2];
        c.unet = UnetConfig {
            image_height: 8,
            image_width: 16,
            base_channels: 2,
            markup_dim: 8,
            attn_dim: 4,
            time_dim: 4,
            ccam_blocks: 1,
            cross_blocks: 1,
        };
        c.timesteps = 5;
        c.weights.num_negatives = 2;
        Model::new(c).unwrap()
    }

    fn tiny_corpus() -> Vec<(MarkupDoc, RenderedImage)> {
        generate(4, 4)
            .into_iter()
            .map(|d| {
                let full = render(&d);
                let px = (0..8).flat_map(|y| (0..16).map(move |x| (y, x))).map(|(y, x)| full.get(y + 12, x)).collect();
                (d, RenderedImage::from_pixels(8, 16, px))
            })
            .collect()
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ParamStore::new();
        p.insert("w", DenseArray::new(vec![2], vec![1.0, -1.0]).unwrap());
        let mut st = TrainState::new(p);
        let g = BTreeMap::from([("w".to_string(), vec![3.0, -0.5])]);
        st.apply(&g, 0.1);
        let w = st.params.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-8 && (w[1] + 0.9).abs() < 1e-8, "{w:?}");
        assert_eq!(st.step, 1);
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let cfg = TrainConfig { lr: 1.0, steps: 110, warmup_steps: 10, ..TrainConfig::default() };
        assert!((cfg.lr_at(0) - 0.1).abs() < 1e-12);
        assert!((cfg.lr_at(9) - 1.0).abs() < 1e-12);
        assert!((cfg.lr_at(10) - 1.0).abs() < 1e-12);
        assert!((cfg.lr_at(60) - 0.5).abs() < 1e-12);
        assert!(cfg.lr_at(109) < 1e-3 && cfg.lr_at(500) == 0.0);
        assert_eq!(TrainConfig { lr: 0.3, ..TrainConfig::default() }.lr_at(1000), 0.3);
    }

    #[test]
    fn clipping_bounds_the_update_but_not_the_report() {
        let m = tiny_model();
        let corpus = tiny_corpus();
        let init = TrainState::new(m.init_params(1).unwrap());
        let (mut a, mut b) = (init.clone(), init.clone());
        let free = train_step(&m, &mut a, &corpus, &TrainConfig::default()).unwrap();
        let clip = free.grad_norm / 4.0;
        let clipped = train_step(&m, &mut b, &corpus, &TrainConfig { grad_clip: clip, ..TrainConfig::default() }).unwrap();
        assert_eq!(free, clipped);
        let m_norm = |s: &TrainState| s.m.iter().flat_map(|(_, t)| t.data().iter().map(|x| x * x)).sum::<f64>().sqrt();
        assert!((m_norm(&b) - 0.1 * clip).abs() < 1e-9 * clip);
        assert!((m_norm(&a) - 0.1 * free.grad_norm).abs() < 1e-9 * free.grad_norm);
    }

    #[test]
    fn state_round_trips_through_store() {
        let m = tiny_model();
        let mut st = TrainState::new(m.init_params(1).unwrap());
        train_step(&m, &mut st, &tiny_corpus(), &TrainConfig::default()).unwrap();
        let template = m.init_params(0).unwrap();
        let back = TrainState::from_store(&checkpoint::decode(&checkpoint::encode(&st.to_store())).unwrap(), &template).unwrap();
        assert_eq!(back, st);
        let mut other = ModelConfig { ..m.config.clone() };
        other.unet.base_channels = 3;
        let wrong = Model::new(other).unwrap().init_params(0).unwrap();
        assert!(matches!(TrainState::from_store(&st.to_store(), &wrong), Err(ModelError::Shape(_))));
    }

    #[test]
    fn anchor_draws() {
        assert_eq!(anchors_for_step(1, 0, 8, 4), vec![0, 1, 2, 3]);
        let a = anchors_for_step(1, 5, 2, 8);
        assert_eq!(a.len(), 2);
        assert_ne!(a[0], a[1]);
        assert_eq!(a, anchors_for_step(1, 5, 2, 8));
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let m = tiny_model();
        let corpus = tiny_corpus();
        let cfg = TrainConfig { batch: 3, ..TrainConfig::default() };
        let mut a = TrainState::new(m.init_params(1).unwrap());
        let mut b = a.clone();
        let la = train_step(&m, &mut a, &corpus, &cfg).unwrap();
        let lb = train_step(&m, &mut b, &corpus, &TrainConfig { threads: 3, ..cfg }).unwrap();
        assert!(la.grad_norm > 0.0);
        assert_eq!(la, lb);
        assert_eq!(a, b);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let m = tiny_model();
        let corpus = tiny_corpus();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { steps: 6, checkpoint_every: 3, batch: 2, ..TrainConfig::default() };
        let init = TrainState::new(m.init_params(1).unwrap());

        let full = RunPaths::in_dir(&dir.path().join("full"));
        let end = run(&m, &corpus, &cfg, init.clone(), &full, |_, _| {}).unwrap();

        let part = RunPaths::in_dir(&dir.path().join("part"));
        run(&m, &corpus, &TrainConfig { steps: 3, ..cfg.clone() }, init, &part, |_, _| {}).unwrap();
        let saved = checkpoint::load(&part.checkpoint).unwrap();
        let resumed = TrainState::from_store(&saved, &m.init_params(0).unwrap()).unwrap();
        assert_eq!(resumed.step, 3);
        let end2 = run(&m, &corpus, &cfg, resumed, &part, |_, _| {}).unwrap();

        assert_eq!(end, end2);
        assert_eq!(fs::read(&full.checkpoint).unwrap(), fs::read(&part.checkpoint).unwrap());
        assert_eq!(fs::read_to_string(&full.log).unwrap(), fs::read_to_string(&part.log).unwrap());
        let rows = read_log(&full.log).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|(_, b)| b.total.is_finite()));
    }

    #[test]
    fn non_finite_loss_keeps_last_checkpoint() {
        let m = tiny_model();
        let corpus = tiny_corpus();
        let dir = tempfile::tempdir().unwrap();
        let paths = RunPaths::in_dir(dir.path());
        let cfg = TrainConfig { steps: 2, checkpoint_every: 1, ..TrainConfig::default() };
        let st = run(&m, &corpus, &cfg, TrainState::new(m.init_params(1).unwrap()), &paths, |_, _| {}).unwrap();
        let good = fs::read(&paths.checkpoint).unwrap();
        let mut broken = st.clone();
        broken.params.get_mut("unet.out.b").unwrap().data_mut()[0] = f64::NAN;
        let err = run(&m, &corpus, &TrainConfig { steps: 4, ..cfg }, broken, &paths, |_, _| {}).unwrap_err();
        assert!(matches!(err, TrainError::Model(ModelError::NonFinite { .. })), "{err}");
        assert_eq!(fs::read(&paths.checkpoint).unwrap(), good);
    }
}
