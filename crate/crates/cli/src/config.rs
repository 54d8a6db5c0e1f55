//! Flat `key = value` run configuration with sections, strict about unknown
//! keys. Every command logs the fully resolved config it ran with.

use std::fmt::Write as _;
use std::path::Path;

use retree_core::data::SyntheticTreeParams;
use retree_core::error::{Error, Result};
use retree_core::losses::SsimConfig;
use retree_core::networks::{DenoiserConfig, DiscriminatorConfig, RrdbConfig, SegUnetConfig};
use retree_core::schedules::{NoiseSchedule, ScheduleKind};
use retree_core::training::{SrLossWeights, TrainConfig};

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    // data
    pub resolution: usize,
    pub trunks: usize,
    pub branch_prob: f64,
    pub step_len: f64,
    pub width_decay: f64,
    pub curvature_jitter: f64,
    pub disc_offset: f64,
    pub disc_radius: f64,
    // schedule
    pub schedule_kind: ScheduleKind,
    pub schedule_steps: usize,
    pub beta1: f64,
    pub beta_t: f64,
    pub cosine_s: f64,
    // denoiser
    pub base_channels: usize,
    pub down_factor: usize,
    pub num_down: usize,
    pub num_up: usize,
    pub vit_heads: usize,
    pub vit_depth: usize,
    pub mlp_ratio: usize,
    pub time_dim: usize,
    pub groups: usize,
    // train
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub rtt: bool,
    pub rtt_max_reps: usize,
    pub grad_clip: f64,
    // ssim
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub ssim_k1: f64,
    pub ssim_k2: f64,
    pub ssim_l: f64,
    // sr
    pub sr_scale: usize,
    pub sr_features: usize,
    pub sr_growth: usize,
    pub sr_blocks: usize,
    pub sr_residual_scale: f64,
    pub sr_w_pixel: f64,
    pub sr_w_ssim: f64,
    pub sr_w_adv: f64,
    pub sr_w_aux: f64,
    // disc
    pub disc_base_channels: usize,
    pub disc_vit_heads: usize,
    pub disc_vit_depth: usize,
    // seg
    pub seg_base_channels: usize,
    pub seg_groups: usize,
    // metrics
    pub metric_threshold: f64,
    pub filter_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            threads: 0,
            resolution: 32,
            trunks: 5,
            branch_prob: 0.10,
            step_len: 1.0,
            width_decay: 0.72,
            curvature_jitter: 0.22,
            disc_offset: 0.55,
            disc_radius: 0.16,
            schedule_kind: ScheduleKind::Cosine,
            schedule_steps: 1000,
            beta1: 1e-4,
            beta_t: 0.02,
            cosine_s: 0.008,
            base_channels: 16,
            down_factor: 4,
            num_down: 2,
            num_up: 4,
            vit_heads: 4,
            vit_depth: 2,
            mlp_ratio: 2,
            time_dim: 64,
            groups: 8,
            batch_size: 8,
            learning_rate: 1e-4,
            epochs: 10,
            rtt: true,
            rtt_max_reps: 5,
            grad_clip: 1.0,
            ssim_window: 11,
            ssim_sigma: 1.5,
            ssim_k1: 0.01,
            ssim_k2: 0.03,
            ssim_l: 1.0,
            sr_scale: 2,
            sr_features: 16,
            sr_growth: 8,
            sr_blocks: 4,
            sr_residual_scale: 0.2,
            sr_w_pixel: 1.0,
            sr_w_ssim: 1.0,
            sr_w_adv: 0.01,
            sr_w_aux: 1.0,
            disc_base_channels: 16,
            disc_vit_heads: 4,
            disc_vit_depth: 1,
            seg_base_channels: 16,
            seg_groups: 8,
            metric_threshold: 0.5,
            filter_threshold: 0.8,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(format!(
                    "config line {}: expected 'key = value', got '{raw}'",
                    lineno + 1
                )));
            };
            self.set(&format!("{section}.{}", key.trim()), value.trim())?;
        }
        Ok(())
    }

    /// Set one dotted key, e.g. "train.epochs". Unknown keys are rejected.
    pub fn set(&mut self, dotted: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| {
                Error::config(format!("config key '{key}': cannot parse value '{v}'"))
            })
        }
        let v = value;
        match dotted {
            "run.seed" => self.seed = parse(dotted, v)?,
            "run.threads" => self.threads = parse(dotted, v)?,
            "data.resolution" => self.resolution = parse(dotted, v)?,
            "data.trunks" => self.trunks = parse(dotted, v)?,
            "data.branch_prob" => self.branch_prob = parse(dotted, v)?,
            "data.step_len" => self.step_len = parse(dotted, v)?,
            "data.width_decay" => self.width_decay = parse(dotted, v)?,
            "data.curvature_jitter" => self.curvature_jitter = parse(dotted, v)?,
            "data.disc_offset" => self.disc_offset = parse(dotted, v)?,
            "data.disc_radius" => self.disc_radius = parse(dotted, v)?,
            "schedule.kind" => self.schedule_kind = ScheduleKind::parse(v)?,
            "schedule.steps" => self.schedule_steps = parse(dotted, v)?,
            "schedule.beta1" => self.beta1 = parse(dotted, v)?,
            "schedule.beta_t" => self.beta_t = parse(dotted, v)?,
            "schedule.s" => self.cosine_s = parse(dotted, v)?,
            "denoiser.base_channels" => self.base_channels = parse(dotted, v)?,
            "denoiser.down_factor" => self.down_factor = parse(dotted, v)?,
            "denoiser.num_down" => self.num_down = parse(dotted, v)?,
            "denoiser.num_up" => self.num_up = parse(dotted, v)?,
            "denoiser.vit_heads" => self.vit_heads = parse(dotted, v)?,
            "denoiser.vit_depth" => self.vit_depth = parse(dotted, v)?,
            "denoiser.mlp_ratio" => self.mlp_ratio = parse(dotted, v)?,
            "denoiser.time_dim" => self.time_dim = parse(dotted, v)?,
            "denoiser.groups" => self.groups = parse(dotted, v)?,
            "train.batch_size" => self.batch_size = parse(dotted, v)?,
            "train.learning_rate" => self.learning_rate = parse(dotted, v)?,
            "train.epochs" => self.epochs = parse(dotted, v)?,
            "train.rtt" => self.rtt = parse(dotted, v)?,
            "train.rtt_max_reps" => self.rtt_max_reps = parse(dotted, v)?,
            "train.grad_clip" => self.grad_clip = parse(dotted, v)?,
            "ssim.window" => self.ssim_window = parse(dotted, v)?,
            "ssim.sigma" => self.ssim_sigma = parse(dotted, v)?,
            "ssim.k1" => self.ssim_k1 = parse(dotted, v)?,
            "ssim.k2" => self.ssim_k2 = parse(dotted, v)?,
            "ssim.l" => self.ssim_l = parse(dotted, v)?,
            "sr.scale" => self.sr_scale = parse(dotted, v)?,
            "sr.features" => self.sr_features = parse(dotted, v)?,
            "sr.growth" => self.sr_growth = parse(dotted, v)?,
            "sr.num_blocks" => self.sr_blocks = parse(dotted, v)?,
            "sr.residual_scale" => self.sr_residual_scale = parse(dotted, v)?,
            "sr.w_pixel" => self.sr_w_pixel = parse(dotted, v)?,
            "sr.w_ssim" => self.sr_w_ssim = parse(dotted, v)?,
            "sr.w_adv" => self.sr_w_adv = parse(dotted, v)?,
            "sr.w_aux" => self.sr_w_aux = parse(dotted, v)?,
            "disc.base_channels" => self.disc_base_channels = parse(dotted, v)?,
            "disc.vit_heads" => self.disc_vit_heads = parse(dotted, v)?,
            "disc.vit_depth" => self.disc_vit_depth = parse(dotted, v)?,
            "seg.base_channels" => self.seg_base_channels = parse(dotted, v)?,
            "seg.groups" => self.seg_groups = parse(dotted, v)?,
            "metrics.threshold" => self.metric_threshold = parse(dotted, v)?,
            "metrics.filter_threshold" => self.filter_threshold = parse(dotted, v)?,
            other => {
                return Err(Error::config(format!("unknown config key '{other}'")));
            }
        }
        Ok(())
    }

    /// Fully resolved config as the same text format it is parsed from.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[run]");
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "threads = {}", self.threads);
        let _ = writeln!(s, "[data]");
        let _ = writeln!(s, "resolution = {}", self.resolution);
        let _ = writeln!(s, "trunks = {}", self.trunks);
        let _ = writeln!(s, "branch_prob = {}", self.branch_prob);
        let _ = writeln!(s, "step_len = {}", self.step_len);
        let _ = writeln!(s, "width_decay = {}", self.width_decay);
        let _ = writeln!(s, "curvature_jitter = {}", self.curvature_jitter);
        let _ = writeln!(s, "disc_offset = {}", self.disc_offset);
        let _ = writeln!(s, "disc_radius = {}", self.disc_radius);
        let _ = writeln!(s, "[schedule]");
        let _ = writeln!(s, "kind = {}", self.schedule_kind.name());
        let _ = writeln!(s, "steps = {}", self.schedule_steps);
        let _ = writeln!(s, "beta1 = {}", self.beta1);
        let _ = writeln!(s, "beta_t = {}", self.beta_t);
        let _ = writeln!(s, "s = {}", self.cosine_s);
        let _ = writeln!(s, "[denoiser]");
        let _ = writeln!(s, "base_channels = {}", self.base_channels);
        let _ = writeln!(s, "down_factor = {}", self.down_factor);
        let _ = writeln!(s, "num_down = {}", self.num_down);
        let _ = writeln!(s, "num_up = {}", self.num_up);
        let _ = writeln!(s, "vit_heads = {}", self.vit_heads);
        let _ = writeln!(s, "vit_depth = {}", self.vit_depth);
        let _ = writeln!(s, "mlp_ratio = {}", self.mlp_ratio);
        let _ = writeln!(s, "time_dim = {}", self.time_dim);
        let _ = writeln!(s, "groups = {}", self.groups);
        let _ = writeln!(s, "[train]");
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "learning_rate = {}", self.learning_rate);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "rtt = {}", self.rtt);
        let _ = writeln!(s, "rtt_max_reps = {}", self.rtt_max_reps);
        let _ = writeln!(s, "grad_clip = {}", self.grad_clip);
        let _ = writeln!(s, "[ssim]");
        let _ = writeln!(s, "window = {}", self.ssim_window);
        let _ = writeln!(s, "sigma = {}", self.ssim_sigma);
        let _ = writeln!(s, "k1 = {}", self.ssim_k1);
        let _ = writeln!(s, "k2 = {}", self.ssim_k2);
        let _ = writeln!(s, "l = {}", self.ssim_l);
        let _ = writeln!(s, "[sr]");
        let _ = writeln!(s, "scale = {}", self.sr_scale);
        let _ = writeln!(s, "features = {}", self.sr_features);
        let _ = writeln!(s, "growth = {}", self.sr_growth);
        let _ = writeln!(s, "num_blocks = {}", self.sr_blocks);
        let _ = writeln!(s, "residual_scale = {}", self.sr_residual_scale);
        let _ = writeln!(s, "w_pixel = {}", self.sr_w_pixel);
        let _ = writeln!(s, "w_ssim = {}", self.sr_w_ssim);
        let _ = writeln!(s, "w_adv = {}", self.sr_w_adv);
        let _ = writeln!(s, "w_aux = {}", self.sr_w_aux);
        let _ = writeln!(s, "[disc]");
        let _ = writeln!(s, "base_channels = {}", self.disc_base_channels);
        let _ = writeln!(s, "vit_heads = {}", self.disc_vit_heads);
        let _ = writeln!(s, "vit_depth = {}", self.disc_vit_depth);
        let _ = writeln!(s, "[seg]");
        let _ = writeln!(s, "base_channels = {}", self.seg_base_channels);
        let _ = writeln!(s, "groups = {}", self.seg_groups);
        let _ = writeln!(s, "[metrics]");
        let _ = writeln!(s, "threshold = {}", self.metric_threshold);
        let _ = writeln!(s, "filter_threshold = {}", self.filter_threshold);
        s
    }

    // typed sub-configs

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        match self.schedule_kind {
            ScheduleKind::Linear => {
                NoiseSchedule::linear(self.schedule_steps, self.beta1, self.beta_t)
            }
            ScheduleKind::Cosine => NoiseSchedule::cosine(self.schedule_steps, self.cosine_s),
        }
    }

    pub fn synth_params(&self) -> SyntheticTreeParams {
        SyntheticTreeParams {
            resolution: self.resolution,
            trunks: self.trunks,
            branch_prob: self.branch_prob,
            step_len: self.step_len,
            width_decay: self.width_decay,
            curvature_jitter: self.curvature_jitter,
            disc_offset: self.disc_offset,
            disc_radius: self.disc_radius,
            seed: self.seed,
        }
    }

    pub fn denoiser(&self, in_channels: usize, out_channels: usize) -> DenoiserConfig {
        DenoiserConfig {
            in_channels,
            out_channels,
            base_channels: self.base_channels,
            down_factor: self.down_factor,
            num_down: self.num_down,
            num_up: self.num_up,
            vit_heads: self.vit_heads,
            vit_depth: self.vit_depth,
            mlp_ratio: self.mlp_ratio,
            time_dim: self.time_dim,
            t_steps: self.schedule_steps,
            groups: self.groups,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            rtt_enabled: self.rtt,
            rtt_max_reps: self.rtt_max_reps,
            grad_clip: self.grad_clip,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    pub fn ssim(&self) -> SsimConfig {
        SsimConfig {
            window: self.ssim_window,
            sigma: self.ssim_sigma,
            k1: self.ssim_k1,
            k2: self.ssim_k2,
            l: self.ssim_l,
        }
    }

    pub fn rrdb(&self, channels: usize) -> RrdbConfig {
        RrdbConfig {
            in_channels: channels,
            out_channels: channels,
            features: self.sr_features,
            growth: self.sr_growth,
            num_blocks: self.sr_blocks,
            scale: self.sr_scale,
            residual_scale: self.sr_residual_scale as f32,
        }
    }

    pub fn sr_weights(&self) -> SrLossWeights {
        SrLossWeights {
            pixel: self.sr_w_pixel,
            ssim: self.sr_w_ssim,
            adversarial: self.sr_w_adv,
            aux: self.sr_w_aux,
        }
    }

    pub fn discriminator(&self, in_channels: usize) -> DiscriminatorConfig {
        DiscriminatorConfig {
            in_channels,
            base_channels: self.disc_base_channels,
            vit_heads: self.disc_vit_heads,
            vit_depth: self.disc_vit_depth,
        }
    }

    pub fn segunet(&self, in_channels: usize) -> SegUnetConfig {
        SegUnetConfig {
            in_channels,
            base_channels: self.seg_base_channels,
            groups: self.seg_groups,
        }
    }
}
