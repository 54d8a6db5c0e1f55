//! Optimization loops for every stage: the two diffusion stages, the
//! super-resolution generator with its adversary, the segmentation UNet and
//! the realism discriminator. Adam optimizer, repetitive training, loss
//! logging (`epoch step loss reps wallclock_ms`) and checkpointing.
//!
//! All randomness is derived statelessly from (seed, epoch, step), so a run
//! resumed from an epoch checkpoint reproduces the uninterrupted run
//! bit-exactly.

mod checkpoint;
mod rtt;

pub use checkpoint::{AdamSnapshot, Checkpoint};
pub use rtt::{end_epoch, rtt_apply, RttState, RTT_DEFAULT_MAX_REPS};

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::data::ImagePair;
use crate::diffusion::{to_model_range, DiffusionProcess};
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_losses, bce_loss, feature_loss, gen_loss, ssim_loss, IdentityExtractor,
    SsimConfig,
};
use crate::networks::{
    Denoiser, DenoiserConfig, Discriminator, DiscriminatorConfig, Graph, ParamId, ParamStore,
    RrdbConfig, RrdbNet, SegUnet, SegUnetConfig,
};
use crate::numerics::Tensor;
use crate::rng::Stream;
use crate::schedules::NoiseSchedule;

// stream tags
const TAG_ORDER: u64 = 1;
const TAG_NOISE: u64 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub rtt_enabled: bool,
    pub rtt_max_reps: usize,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 10,
            rtt_enabled: true,
            rtt_max_reps: RTT_DEFAULT_MAX_REPS,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        Ok(())
    }
}

/// Adam with bias correction; moments are aligned with the store.
pub struct Adam {
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    step: u64,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let m = store
            .ids()
            .map(|id| Tensor::zeros(store.get(id).shape()))
            .collect::<Vec<_>>();
        let v = m.clone();
        Adam {
            lr: cfg.learning_rate,
            b1: cfg.adam_beta1,
            b2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            step: 0,
            m,
            v,
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// One update over the given gradients. Parameters without a gradient
    /// entry are untouched.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f32>)]) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.b1.powi(t);
        let bc2 = 1.0 - self.b2.powi(t);
        for (id, g) in grads {
            let m = self.m[index_of(*id)].data_mut();
            let v = self.v[index_of(*id)].data_mut();
            let p = store.get_mut(*id).data_mut();
            for i in 0..g.len() {
                let gi = g[i] as f64;
                let mi = self.b1 * m[i] as f64 + (1.0 - self.b1) * gi;
                let vi = self.b2 * v[i] as f64 + (1.0 - self.b2) * gi * gi;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                p[i] = (p[i] as f64 - self.lr * mhat / (vhat.sqrt() + self.eps)) as f32;
            }
        }
    }

    pub fn snapshot(&self, store: &ParamStore) -> AdamSnapshot {
        let name = |i: usize| store.name(param_id(i)).to_string();
        AdamSnapshot {
            step: self.step,
            m: self.m.iter().enumerate().map(|(i, t)| (name(i), t.clone())).collect(),
            v: self.v.iter().enumerate().map(|(i, t)| (name(i), t.clone())).collect(),
        }
    }

    pub fn restore(store: &ParamStore, snap: &AdamSnapshot, cfg: &TrainConfig) -> Result<Adam> {
        let mut adam = Adam::new(store, cfg);
        adam.step = snap.step;
        for (name, t) in &snap.m {
            let id = store.by_name(name).ok_or_else(|| {
                Error::data(format!("optimizer moment for unknown parameter '{name}'"))
            })?;
            adam.m[index_of(id)] = t.clone();
        }
        for (name, t) in &snap.v {
            let id = store.by_name(name).ok_or_else(|| {
                Error::data(format!("optimizer moment for unknown parameter '{name}'"))
            })?;
            adam.v[index_of(id)] = t.clone();
        }
        Ok(adam)
    }
}

// ParamId is an opaque index; these two keep the transmutation in one place.
fn index_of(id: ParamId) -> usize {
    id.index()
}

fn param_id(i: usize) -> ParamId {
    ParamId::from_index(i)
}

/// Scale gradients so their global L2 norm is at most `clip` (no-op when
/// clip <= 0).
pub fn clip_global_norm(grads: &mut [(ParamId, Vec<f32>)], clip: f64) {
    if clip <= 0.0 {
        return;
    }
    let mut sq = 0.0f64;
    for (_, g) in grads.iter() {
        for &v in g {
            sq += (v as f64) * (v as f64);
        }
    }
    let norm = sq.sqrt();
    if norm > clip {
        let scale = (clip / norm) as f32;
        for (_, g) in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
}

/// Stack CHW images into an NCHW batch.
pub fn stack_batch(images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = images
        .first()
        .ok_or_else(|| Error::data("empty batch".to_string()))?;
    let shape = first.shape();
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for img in images {
        if img.shape() != shape {
            return Err(Error::shape(format!(
                "batch images disagree: {:?} vs {shape:?}",
                img.shape()
            )));
        }
        data.extend_from_slice(img.data());
    }
    let mut out_shape = vec![images.len()];
    out_shape.extend_from_slice(shape);
    Tensor::new(out_shape, data)
}

/// One diffusion training step with explicit (t, eps): corrupt, predict,
/// apply the combined L1+MSE objective, update.
#[allow(clippy::too_many_arguments)]
pub fn train_step_at(
    net: &Denoiser,
    proc: &DiffusionProcess,
    store: &mut ParamStore,
    opt: &mut Adam,
    x0: &Tensor<f32>,
    cond: Option<&Tensor<f32>>,
    t: usize,
    eps: &Tensor<f32>,
    grad_clip: f64,
) -> Result<f64> {
    let x_t = proc.q_sample(x0, t, eps)?;
    let mut g = Graph::<f32>::new(store, true);
    let x_in = g.input(&x_t);
    let cond_in = cond.map(|c| g.input(c));
    let eps_hat = net.forward(&mut g, x_in, t, cond_in)?;
    let eps_id = g.input(eps);
    let loss = gen_loss(&mut g.tape, eps_hat, eps_id)?;
    let loss_val = g.tape.value(loss)[0] as f64;
    if !loss_val.is_finite() {
        return Err(Error::numeric(format!(
            "non-finite training loss {loss_val} at t={t}"
        )));
    }
    g.tape.backward(loss)?;
    let mut grads = g.param_grads();
    drop(g);
    clip_global_norm(&mut grads, grad_clip);
    opt.update(store, &grads);
    Ok(loss_val)
}

/// One diffusion training step drawing t uniformly from [1, T] and
/// eps ~ N(0, I) from `rng`.
pub fn train_step(
    net: &Denoiser,
    proc: &DiffusionProcess,
    store: &mut ParamStore,
    opt: &mut Adam,
    x0: &Tensor<f32>,
    cond: Option<&Tensor<f32>>,
    rng: &mut Stream,
    grad_clip: f64,
) -> Result<f64> {
    let t = rng.int_in(1, proc.schedule().len() as u64) as usize;
    let eps = Tensor::<f32>::randn(x0.shape(), rng);
    train_step_at(net, proc, store, opt, x0, cond, t, &eps, grad_clip)
}

#[derive(Debug, Clone)]
pub struct FitSummary {
    pub epochs_run: usize,
    pub final_epoch_avg: f64,
    pub best_epoch_avg: f64,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub loss_log: PathBuf,
}

struct LossLogger {
    file: std::io::BufWriter<std::fs::File>,
    path: PathBuf,
}

impl LossLogger {
    fn open(out_dir: &Path, append: bool) -> Result<Self> {
        std::fs::create_dir_all(out_dir)?;
        let path = out_dir.join("loss.log");
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(&path)?;
        Ok(LossLogger {
            file: std::io::BufWriter::new(file),
            path,
        })
    }

    fn line(
        &mut self,
        epoch: usize,
        step: usize,
        loss: f64,
        reps: usize,
        started: Instant,
    ) -> Result<()> {
        writeln!(
            self.file,
            "{} {} {} {} {}",
            epoch,
            step,
            loss,
            reps,
            started.elapsed().as_millis()
        )?;
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.file.flush()?;
        Ok(())
    }
}

/// Common driver state shared by every fit loop.
struct Harness {
    cfg: TrainConfig,
    out_dir: PathBuf,
    config_text: String,
    stage: &'static str,
    rtt: RttState,
    logger: LossLogger,
    best: f64,
    start_epoch: usize,
}

impl Harness {
    fn new(
        stage: &'static str,
        cfg: &TrainConfig,
        out_dir: &Path,
        config_text: &str,
        resume: Option<&Checkpoint>,
    ) -> Result<Self> {
        cfg.validate()?;
        if let Some(r) = resume {
            if r.stage != stage {
                return Err(Error::config(format!(
                    "resume checkpoint is for stage '{}', not '{stage}'",
                    r.stage
                )));
            }
        }
        let start_epoch = resume.map(|r| r.epoch as usize).unwrap_or(0);
        Ok(Harness {
            cfg: cfg.clone(),
            out_dir: out_dir.to_path_buf(),
            config_text: config_text.to_string(),
            stage,
            rtt: resume.map(|r| r.rtt.clone()).unwrap_or_default(),
            logger: LossLogger::open(out_dir, resume.is_some())?,
            best: f64::INFINITY,
            start_epoch,
        })
    }

    fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut s = Stream::derive(self.cfg.seed, &[TAG_ORDER, epoch as u64]);
        s.shuffle(&mut order);
        order
    }

    fn checkpoint(
        &self,
        epoch_done: usize,
        store: &ParamStore,
        opt: &Adam,
        schedule: Option<&NoiseSchedule>,
    ) -> Checkpoint {
        Checkpoint {
            stage: self.stage.to_string(),
            epoch: epoch_done as u32,
            seed: self.cfg.seed,
            config_text: self.config_text.clone(),
            schedule: schedule.cloned(),
            params: store
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
            adam: Some(opt.snapshot(store)),
            rtt: self.rtt.clone(),
        }
    }

    fn finish_epoch(
        &mut self,
        epoch_done: usize,
        store: &ParamStore,
        opt: &Adam,
        schedule: Option<&NoiseSchedule>,
    ) -> Result<f64> {
        let avg = end_epoch(&mut self.rtt)?;
        self.logger.flush()?;
        let ckpt = self.checkpoint(epoch_done, store, opt, schedule);
        ckpt.save(&self.out_dir.join("last.ckpt"))?;
        if avg < self.best {
            self.best = avg;
            ckpt.save(&self.out_dir.join("best.ckpt"))?;
        }
        Ok(avg)
    }

    fn summary(&self, final_avg: f64) -> FitSummary {
        FitSummary {
            epochs_run: self.cfg.epochs.saturating_sub(self.start_epoch),
            final_epoch_avg: final_avg,
            best_epoch_avg: self.best,
            last_checkpoint: self.out_dir.join("last.ckpt"),
            best_checkpoint: self.out_dir.join("best.ckpt"),
            loss_log: self.logger.path.clone(),
        }
    }
}

fn restore_params(store: &mut ParamStore, params: &[(String, Tensor<f32>)]) -> Result<()> {
    if params.len() != store.len() {
        return Err(Error::data(format!(
            "checkpoint has {} parameters, model expects {}",
            params.len(),
            store.len()
        )));
    }
    for (name, tensor) in params {
        let id = store
            .by_name(name)
            .ok_or_else(|| Error::data(format!("checkpoint parameter '{name}' unknown")))?;
        if store.get(id).shape() != tensor.shape() {
            return Err(Error::data(format!(
                "checkpoint parameter '{name}' has shape {:?}, model expects {:?}",
                tensor.shape(),
                store.get(id).shape()
            )));
        }
        *store.get_mut(id) = tensor.clone();
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffusionStage {
    Vessel,
    Fundus,
}

impl DiffusionStage {
    fn name(self) -> &'static str {
        match self {
            DiffusionStage::Vessel => "vessel",
            DiffusionStage::Fundus => "fundus",
        }
    }

    fn channels(self) -> (usize, usize) {
        match self {
            DiffusionStage::Vessel => (1, 0),
            DiffusionStage::Fundus => (3, 1),
        }
    }
}

pub struct DiffusionFit<'a> {
    pub stage: DiffusionStage,
    pub pairs: &'a [ImagePair],
    pub denoiser_cfg: &'a DenoiserConfig,
    pub schedule: NoiseSchedule,
    pub train: &'a TrainConfig,
    pub out_dir: &'a Path,
    pub config_text: String,
    pub resume: Option<Checkpoint>,
}

/// Train a diffusion stage (vessel maps from noise, or fundus images
/// conditioned on vessel maps).
pub fn fit_diffusion(spec: DiffusionFit) -> Result<FitSummary> {
    let (data_ch, cond_ch) = spec.stage.channels();
    if spec.denoiser_cfg.in_channels != data_ch + cond_ch
        || spec.denoiser_cfg.out_channels != data_ch
    {
        return Err(Error::config(format!(
            "denoiser channels ({} in, {} out) incompatible with stage '{}'",
            spec.denoiser_cfg.in_channels,
            spec.denoiser_cfg.out_channels,
            spec.stage.name()
        )));
    }
    if spec.pairs.is_empty() {
        return Err(Error::data("empty training dataset".to_string()));
    }
    let (h, w) = {
        let s = spec.pairs[0].vessel.shape();
        (s[1], s[2])
    };
    let proc = DiffusionProcess::new(spec.schedule.clone(), data_ch, cond_ch, h, w)?;

    let mut store = ParamStore::new();
    let net = Denoiser::build(spec.denoiser_cfg, spec.train.seed, &mut store)?;
    let mut harness = Harness::new(
        match spec.stage {
            DiffusionStage::Vessel => "vessel",
            DiffusionStage::Fundus => "fundus",
        },
        spec.train,
        spec.out_dir,
        &spec.config_text,
        spec.resume.as_ref(),
    )?;
    let mut opt = Adam::new(&store, spec.train);
    if let Some(r) = &spec.resume {
        restore_params(&mut store, &r.params)?;
        if let Some(snap) = &r.adam {
            opt = Adam::restore(&store, snap, spec.train)?;
        }
    }

    // pre-normalize data to [-1, 1]
    let data: Vec<Tensor<f32>> = spec
        .pairs
        .iter()
        .map(|p| match spec.stage {
            DiffusionStage::Vessel => to_model_range(&p.vessel),
            DiffusionStage::Fundus => to_model_range(&p.fundus),
        })
        .collect();
    let cond: Option<Vec<Tensor<f32>>> = match spec.stage {
        DiffusionStage::Vessel => None,
        DiffusionStage::Fundus => Some(
            spec.pairs
                .iter()
                .map(|p| to_model_range(&p.vessel))
                .collect(),
        ),
    };

    let mut final_avg = f64::NAN;
    for epoch in harness.start_epoch..spec.train.epochs {
        let order = harness.epoch_order(epoch, data.len());
        for (step, chunk) in order.chunks(spec.train.batch_size).enumerate() {
            let started = Instant::now();
            let x0_refs: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &data[i]).collect();
            let x0 = stack_batch(&x0_refs)?;
            let cond_batch = match &cond {
                Some(c) => {
                    let refs: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &c[i]).collect();
                    Some(stack_batch(&refs)?)
                }
                None => None,
            };
            let mut noise = Stream::derive(
                spec.train.seed,
                &[TAG_NOISE, epoch as u64, step as u64],
            );
            let t = noise.int_in(1, proc.schedule().len() as u64) as usize;
            let eps = Tensor::<f32>::randn(x0.shape(), &mut noise);
            let (reps, loss) = rtt_apply(
                &mut harness.rtt,
                spec.train.rtt_enabled,
                spec.train.rtt_max_reps,
                || {
                    train_step_at(
                        &net,
                        &proc,
                        &mut store,
                        &mut opt,
                        &x0,
                        cond_batch.as_ref(),
                        t,
                        &eps,
                        spec.train.grad_clip,
                    )
                },
            )?;
            harness.logger.line(epoch, step, loss, reps, started)?;
        }
        final_avg = harness.finish_epoch(epoch + 1, &store, &opt, Some(&spec.schedule))?;
    }
    if harness.start_epoch >= spec.train.epochs {
        // nothing to do; still emit a checkpoint representing initialization
        let ckpt = harness.checkpoint(harness.start_epoch, &store, &opt, Some(&spec.schedule));
        ckpt.save(&harness.out_dir.join("last.ckpt"))?;
        ckpt.save(&harness.out_dir.join("best.ckpt"))?;
    }
    Ok(harness.summary(final_avg))
}

pub struct SegFit<'a> {
    pub pairs: &'a [ImagePair],
    pub seg_cfg: &'a SegUnetConfig,
    pub train: &'a TrainConfig,
    pub out_dir: &'a Path,
    pub config_text: String,
    pub resume: Option<Checkpoint>,
}

/// Train the segmentation UNet with pixel-wise BCE.
pub fn fit_seg(spec: SegFit) -> Result<FitSummary> {
    if spec.pairs.is_empty() {
        return Err(Error::data("empty training dataset".to_string()));
    }
    let mut store = ParamStore::new();
    let net = SegUnet::build(spec.seg_cfg, spec.train.seed, &mut store)?;
    let mut harness = Harness::new("seg", spec.train, spec.out_dir, &spec.config_text, spec.resume.as_ref())?;
    let mut opt = Adam::new(&store, spec.train);
    if let Some(r) = &spec.resume {
        restore_params(&mut store, &r.params)?;
        if let Some(snap) = &r.adam {
            opt = Adam::restore(&store, snap, spec.train)?;
        }
    }

    let mut final_avg = f64::NAN;
    for epoch in harness.start_epoch..spec.train.epochs {
        let order = harness.epoch_order(epoch, spec.pairs.len());
        for (step, chunk) in order.chunks(spec.train.batch_size).enumerate() {
            let started = Instant::now();
            let imgs: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &spec.pairs[i].fundus).collect();
            let masks: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &spec.pairs[i].vessel).collect();
            let x = stack_batch(&imgs)?;
            let y = stack_batch(&masks)?;
            let (reps, loss) = rtt_apply(
                &mut harness.rtt,
                spec.train.rtt_enabled,
                spec.train.rtt_max_reps,
                || {
                    let mut g = Graph::<f32>::new(&store, true);
                    let xid = g.input(&x);
                    let pred = net.forward(&mut g, xid)?;
                    let yid = g.input(&y);
                    let loss = bce_loss(&mut g.tape, pred, yid)?;
                    let loss_val = g.tape.value(loss)[0] as f64;
                    if !loss_val.is_finite() {
                        return Err(Error::numeric(format!(
                            "non-finite segmentation loss {loss_val}"
                        )));
                    }
                    g.tape.backward(loss)?;
                    let mut grads = g.param_grads();
                    drop(g);
                    clip_global_norm(&mut grads, spec.train.grad_clip);
                    opt.update(&mut store, &grads);
                    Ok(loss_val)
                },
            )?;
            harness.logger.line(epoch, step, loss, reps, started)?;
        }
        final_avg = harness.finish_epoch(epoch + 1, &store, &opt, None)?;
    }
    Ok(harness.summary(final_avg))
}

pub struct DiscFit<'a> {
    pub real: &'a [ImagePair],
    pub fake: &'a [ImagePair],
    pub disc_cfg: &'a DiscriminatorConfig,
    pub train: &'a TrainConfig,
    pub out_dir: &'a Path,
    pub config_text: String,
    pub resume: Option<Checkpoint>,
}

fn pair_batch(pairs: &[ImagePair], idx: &[usize]) -> Result<Tensor<f32>> {
    let stacked: Vec<Tensor<f32>> = idx
        .iter()
        .map(|&i| {
            crate::networks::pair_input(&pairs[i].fundus, &pairs[i].vessel).map(|t| {
                let shape = t.shape()[1..].to_vec();
                t.reshape(&shape).expect("drop unit batch dim")
            })
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor<f32>> = stacked.iter().collect();
    stack_batch(&refs)
}

/// Train the realism discriminator on real vs generated pairs.
pub fn fit_disc(spec: DiscFit) -> Result<FitSummary> {
    if spec.real.is_empty() || spec.fake.is_empty() {
        return Err(Error::data(
            "discriminator training needs both real and fake pairs".to_string(),
        ));
    }
    let mut store = ParamStore::new();
    let net = Discriminator::build(spec.disc_cfg, spec.train.seed, &mut store)?;
    let mut harness = Harness::new("disc", spec.train, spec.out_dir, &spec.config_text, spec.resume.as_ref())?;
    let mut opt = Adam::new(&store, spec.train);
    if let Some(r) = &spec.resume {
        restore_params(&mut store, &r.params)?;
        if let Some(snap) = &r.adam {
            opt = Adam::restore(&store, snap, spec.train)?;
        }
    }

    let steps_per_epoch = spec.real.len().min(spec.fake.len()) / spec.train.batch_size.max(1);
    let mut final_avg = f64::NAN;
    for epoch in harness.start_epoch..spec.train.epochs {
        let real_order = harness.epoch_order(epoch, spec.real.len());
        let mut fake_order = harness.epoch_order(epoch, spec.fake.len());
        // decorrelate the two orders
        let shift = 1.min(fake_order.len() - 1);
        fake_order.rotate_left(shift);
        for step in 0..steps_per_epoch.max(1) {
            let started = Instant::now();
            let b = spec.train.batch_size;
            let ridx: Vec<usize> = (0..b)
                .map(|i| real_order[(step * b + i) % spec.real.len()])
                .collect();
            let fidx: Vec<usize> = (0..b)
                .map(|i| fake_order[(step * b + i) % spec.fake.len()])
                .collect();
            let real = pair_batch(spec.real, &ridx)?;
            let fake = pair_batch(spec.fake, &fidx)?;
            let (reps, loss) = rtt_apply(
                &mut harness.rtt,
                spec.train.rtt_enabled,
                spec.train.rtt_max_reps,
                || {
                    let mut g = Graph::<f32>::new(&store, true);
                    let rid = g.input(&real);
                    let fid = g.input(&fake);
                    let d_real = net.forward(&mut g, rid)?;
                    let d_fake = net.forward(&mut g, fid)?;
                    let (d_loss, _) = adversarial_losses(&mut g.tape, d_real, d_fake)?;
                    let loss_val = g.tape.value(d_loss)[0] as f64;
                    if !loss_val.is_finite() {
                        return Err(Error::numeric(format!(
                            "non-finite discriminator loss {loss_val}"
                        )));
                    }
                    g.tape.backward(d_loss)?;
                    let mut grads = g.param_grads();
                    drop(g);
                    clip_global_norm(&mut grads, spec.train.grad_clip);
                    opt.update(&mut store, &grads);
                    Ok(loss_val)
                },
            )?;
            harness.logger.line(epoch, step, loss, reps, started)?;
        }
        final_avg = harness.finish_epoch(epoch + 1, &store, &opt, None)?;
    }
    Ok(harness.summary(final_avg))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SrMode {
    /// RGB super-resolution: pixel L1 + SSIM + adversarial + feature loss.
    Rgb,
    /// Binary-map super-resolution: the feature loss is replaced by BCE.
    Binary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SrLossWeights {
    pub pixel: f64,
    pub ssim: f64,
    pub adversarial: f64,
    pub aux: f64,
}

impl Default for SrLossWeights {
    fn default() -> Self {
        SrLossWeights {
            pixel: 1.0,
            ssim: 1.0,
            adversarial: 0.01,
            aux: 1.0,
        }
    }
}

pub struct SrFit<'a> {
    pub mode: SrMode,
    /// High-resolution targets in [0,1]; LR inputs are box-downsampled.
    pub images: &'a [Tensor<f32>],
    pub rrdb_cfg: &'a RrdbConfig,
    pub disc_cfg: &'a DiscriminatorConfig,
    pub weights: SrLossWeights,
    pub ssim: SsimConfig,
    pub train: &'a TrainConfig,
    pub out_dir: &'a Path,
    pub config_text: String,
    pub resume: Option<Checkpoint>,
}

/// Average-pool by an integer factor (the LR side of SR training pairs).
pub fn box_downsample(t: &Tensor<f32>, factor: usize) -> Result<Tensor<f32>> {
    let [c, h, w] = t.shape()[..] else {
        return Err(Error::shape(format!(
            "box_downsample expects CHW, got {:?}",
            t.shape()
        )));
    };
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(format!(
            "box_downsample: {h}x{w} not divisible by {factor}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Tensor::<f32>::zeros(&[c, oh, ow]);
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0f32;
                for ky in 0..factor {
                    for kx in 0..factor {
                        s += t.data()[ci * h * w + (oy * factor + ky) * w + ox * factor + kx];
                    }
                }
                out.data_mut()[ci * oh * ow + oy * ow + ox] = s / (factor * factor) as f32;
            }
        }
    }
    Ok(out)
}

/// Train the super-resolution generator against its discriminator.
pub fn fit_sr(spec: SrFit) -> Result<FitSummary> {
    if spec.images.is_empty() {
        return Err(Error::data("empty super-resolution dataset".to_string()));
    }
    let channels = spec.images[0].shape()[0];
    if spec.rrdb_cfg.in_channels != channels || spec.disc_cfg.in_channels != channels {
        return Err(Error::config(format!(
            "super-resolution networks expect {} channels, dataset has {channels}",
            spec.rrdb_cfg.in_channels
        )));
    }
    match (spec.mode, channels) {
        (SrMode::Rgb, 3) | (SrMode::Binary, 1) => {}
        (mode, c) => {
            return Err(Error::config(format!(
                "sr mode {mode:?} incompatible with {c}-channel data"
            )))
        }
    }

    let mut store = ParamStore::new();
    let gen = RrdbNet::build(spec.rrdb_cfg, spec.train.seed, &mut store)?;
    let gen_params = store.len();
    let disc = Discriminator::build(spec.disc_cfg, spec.train.seed ^ 0x5a5a, &mut store)?;
    let mut harness = Harness::new("sr", spec.train, spec.out_dir, &spec.config_text, spec.resume.as_ref())?;
    let mut opt = Adam::new(&store, spec.train);
    if let Some(r) = &spec.resume {
        restore_params(&mut store, &r.params)?;
        if let Some(snap) = &r.adam {
            opt = Adam::restore(&store, snap, spec.train)?;
        }
    }

    let scale = spec.rrdb_cfg.scale;
    let lows: Vec<Tensor<f32>> = spec
        .images
        .iter()
        .map(|img| box_downsample(img, scale))
        .collect::<Result<_>>()?;

    let is_gen_param = |id: ParamId| index_of(id) < gen_params;
    let mut final_avg = f64::NAN;
    for epoch in harness.start_epoch..spec.train.epochs {
        let order = harness.epoch_order(epoch, spec.images.len());
        for (step, chunk) in order.chunks(spec.train.batch_size).enumerate() {
            let started = Instant::now();
            let hr_refs: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &spec.images[i]).collect();
            let lr_refs: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &lows[i]).collect();
            let hr = stack_batch(&hr_refs)?;
            let lr = stack_batch(&lr_refs)?;

            // discriminator step
            {
                let mut g = Graph::<f32>::new(&store, true);
                let lr_id = g.input(&lr);
                let sr = gen.forward(&mut g, lr_id)?;
                let hr_id = g.input(&hr);
                let d_real = disc.forward(&mut g, hr_id)?;
                let d_fake = disc.forward(&mut g, sr)?;
                let (d_loss, _) = adversarial_losses(&mut g.tape, d_real, d_fake)?;
                let v = g.tape.value(d_loss)[0] as f64;
                if !v.is_finite() {
                    return Err(Error::numeric(format!("non-finite sr d_loss {v}")));
                }
                g.tape.backward(d_loss)?;
                let mut grads: Vec<(ParamId, Vec<f32>)> = g
                    .param_grads()
                    .into_iter()
                    .filter(|(id, _)| !is_gen_param(*id))
                    .collect();
                drop(g);
                clip_global_norm(&mut grads, spec.train.grad_clip);
                opt.update(&mut store, &grads);
            }

            // generator step under repetitive training
            let (reps, loss) = rtt_apply(
                &mut harness.rtt,
                spec.train.rtt_enabled,
                spec.train.rtt_max_reps,
                || {
                    let mut g = Graph::<f32>::new(&store, true);
                    let lr_id = g.input(&lr);
                    let sr = gen.forward(&mut g, lr_id)?;
                    let hr_id = g.input(&hr);
                    let d_fake = disc.forward(&mut g, sr)?;
                    // pixel L1
                    let diff = g.tape.sub(sr, hr_id)?;
                    let absd = g.tape.abs(diff);
                    let l1 = g.tape.mean_all(absd);
                    let s_loss = ssim_loss(&mut g.tape, sr, hr_id, &spec.ssim)?;
                    let fake_c = g.tape.clamp(d_fake, 1e-7, 1.0 - 1e-7);
                    let logf = g.tape.ln(fake_c);
                    let mlogf = g.tape.mean_all(logf);
                    let g_adv = g.tape.mul_scalar(mlogf, -1.0);
                    let aux = match spec.mode {
                        SrMode::Binary => bce_loss(&mut g.tape, sr, hr_id)?,
                        SrMode::Rgb => {
                            feature_loss(&mut g.tape, sr, hr_id, &IdentityExtractor)?
                        }
                    };
                    let mut total = g.tape.mul_scalar(l1, spec.weights.pixel);
                    let ws = g.tape.mul_scalar(s_loss, spec.weights.ssim);
                    total = g.tape.add(total, ws)?;
                    let wa = g.tape.mul_scalar(g_adv, spec.weights.adversarial);
                    total = g.tape.add(total, wa)?;
                    let wx = g.tape.mul_scalar(aux, spec.weights.aux);
                    total = g.tape.add(total, wx)?;
                    let v = g.tape.value(total)[0] as f64;
                    if !v.is_finite() {
                        return Err(Error::numeric(format!("non-finite sr g_loss {v}")));
                    }
                    g.tape.backward(total)?;
                    let mut grads: Vec<(ParamId, Vec<f32>)> = g
                        .param_grads()
                        .into_iter()
                        .filter(|(id, _)| is_gen_param(*id))
                        .collect();
                    drop(g);
                    clip_global_norm(&mut grads, spec.train.grad_clip);
                    opt.update(&mut store, &grads);
                    Ok(v)
                },
            )?;
            harness.logger.line(epoch, step, loss, reps, started)?;
        }
        final_avg = harness.finish_epoch(epoch + 1, &store, &opt, None)?;
    }
    Ok(harness.summary(final_avg))
}

/// Rebuild a denoiser and its parameters from a diffusion checkpoint.
pub fn denoiser_from_checkpoint(
    ckpt: &Checkpoint,
    cfg: &DenoiserConfig,
) -> Result<(Denoiser, ParamStore)> {
    let mut store = ParamStore::new();
    let net = Denoiser::build(cfg, ckpt.seed, &mut store)?;
    restore_params(&mut store, &ckpt.params)?;
    Ok((net, store))
}

/// Rebuild a segmentation UNet from its checkpoint.
pub fn segunet_from_checkpoint(
    ckpt: &Checkpoint,
    cfg: &SegUnetConfig,
) -> Result<(SegUnet, ParamStore)> {
    let mut store = ParamStore::new();
    let net = SegUnet::build(cfg, ckpt.seed, &mut store)?;
    restore_params(&mut store, &ckpt.params)?;
    Ok((net, store))
}

/// Rebuild a discriminator from its checkpoint.
pub fn discriminator_from_checkpoint(
    ckpt: &Checkpoint,
    cfg: &DiscriminatorConfig,
) -> Result<(Discriminator, ParamStore)> {
    let mut store = ParamStore::new();
    let net = Discriminator::build(cfg, ckpt.seed, &mut store)?;
    restore_params(&mut store, &ckpt.params)?;
    Ok((net, store))
}

/// Rebuild the SR generator (and its adversary) from a checkpoint.
pub fn rrdb_from_checkpoint(
    ckpt: &Checkpoint,
    rrdb_cfg: &RrdbConfig,
    disc_cfg: &DiscriminatorConfig,
) -> Result<(RrdbNet, Discriminator, ParamStore)> {
    let mut store = ParamStore::new();
    let gen = RrdbNet::build(rrdb_cfg, ckpt.seed, &mut store)?;
    let disc = Discriminator::build(disc_cfg, ckpt.seed ^ 0x5a5a, &mut store)?;
    restore_params(&mut store, &ckpt.params)?;
    Ok((gen, disc, store))
}

#[cfg(test)]
mod tests;
