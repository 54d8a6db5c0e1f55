//! Noise-prediction network: initial conv block, down-sampling stages with
//! ViT-LSA encoders, a three-block bottleneck, residual up-sampling stages,
//! and a kernel-1 output conv. Down-sampling uses max pooling with a large
//! window (default 4, twice); up-sampling uses bilinear x2 blocks, so four
//! up blocks undo two down blocks.

use super::{
    check_channels, ConvBlock, Graph, ParamId, ParamInit, ParamStore, TimeBias, VitEncoder,
};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor, VarId};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    pub down_factor: usize,
    pub num_down: usize,
    pub num_up: usize,
    pub vit_heads: usize,
    pub vit_depth: usize,
    pub mlp_ratio: usize,
    pub time_dim: usize,
    pub t_steps: usize,
    pub groups: usize,
}

impl DenoiserConfig {
    /// Desk-scale defaults for the unconditional (vessel) stage.
    pub fn desk(in_channels: usize, out_channels: usize, t_steps: usize) -> Self {
        DenoiserConfig {
            in_channels,
            out_channels,
            base_channels: 16,
            down_factor: 4,
            num_down: 2,
            num_up: 4,
            vit_heads: 4,
            vit_depth: 2,
            mlp_ratio: 2,
            time_dim: 64,
            t_steps,
            groups: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("denoiser: zero channel count".to_string()));
        }
        if self.num_down == 0 {
            return Err(Error::config(
                "denoiser: at least one down-sampling stage required".to_string(),
            ));
        }
        if self.down_factor < 2 {
            return Err(Error::config("denoiser: down factor must be >= 2"));
        }
        let down_total = (self.down_factor as u128).pow(self.num_down as u32);
        let up_total = 2u128.pow(self.num_up as u32);
        if down_total != up_total {
            return Err(Error::config(format!(
                "denoiser: {} ups of x2 do not undo {} downs of x{} ({} vs {})",
                self.num_up, self.num_down, self.down_factor, up_total, down_total
            )));
        }
        if self.groups == 0
            || self.base_channels % self.groups != 0
            || self.wide_channels() % self.groups != 0
        {
            return Err(Error::config(format!(
                "denoiser: group count {} must divide channel widths {}/{}",
                self.groups,
                self.base_channels,
                self.wide_channels()
            )));
        }
        if self.vit_heads == 0 || self.wide_channels() % self.vit_heads != 0 {
            return Err(Error::config(format!(
                "denoiser: {} heads do not divide attention width {}",
                self.vit_heads,
                self.wide_channels()
            )));
        }
        if self.t_steps < 2 {
            return Err(Error::config("denoiser: T must be at least 2"));
        }
        Ok(())
    }

    /// Width after the first down-sample; constant for the deeper stages.
    pub fn wide_channels(&self) -> usize {
        self.base_channels * 2
    }

    fn up_out_width(&self, j: usize) -> usize {
        if j + 1 <= self.num_up / 2 {
            self.wide_channels()
        } else {
            self.base_channels
        }
    }

    /// Total spatial reduction factor; input extents must divide by it.
    pub fn total_downscale(&self) -> usize {
        self.down_factor.pow(self.num_down as u32)
    }
}

struct DownStage {
    block1: ConvBlock,
    block2: ConvBlock,
    time: TimeBias,
    vit: VitEncoder,
}

struct UpStage {
    block1: ConvBlock,
    block2: ConvBlock,
    shortcut: Option<(ParamId, ParamId)>,
    time: TimeBias,
    /// Index into the encoder feature list when this stage's scale matches
    /// one (UNet skip concatenation).
    skip_from: Option<usize>,
}

pub struct Denoiser {
    cfg: DenoiserConfig,
    init_w: ParamId,
    init_b: ParamId,
    init_g: ParamId,
    init_bt: ParamId,
    downs: Vec<DownStage>,
    bottleneck: Vec<ConvBlock>,
    ups: Vec<UpStage>,
    final_w: ParamId,
    final_b: ParamId,
}

impl Denoiser {
    pub fn build(cfg: &DenoiserConfig, seed: u64, store: &mut ParamStore) -> Result<Denoiser> {
        cfg.validate()?;
        let mut init = ParamInit::new(store, seed);
        let base = cfg.base_channels;
        let wide = cfg.wide_channels();

        let init_w = init.conv_weight("initial.conv.w", [base, cfg.in_channels, 3, 3]);
        let init_b = init.zeros("initial.conv.b", &[base]);
        let init_g = init.ones("initial.norm.g", &[base]);
        let init_bt = init.zeros("initial.norm.b", &[base]);

        let mut downs = Vec::with_capacity(cfg.num_down);
        let mut width = base;
        for d in 0..cfg.num_down {
            let out = wide;
            let name = format!("down{d}");
            downs.push(DownStage {
                block1: ConvBlock::build(&mut init, &format!("{name}.block1"), width, out, cfg.groups),
                block2: ConvBlock::build(&mut init, &format!("{name}.block2"), out, out, cfg.groups),
                time: TimeBias::build(&mut init, &format!("{name}.time"), cfg.time_dim, out),
                vit: VitEncoder::build(
                    &mut init,
                    &format!("{name}.vit"),
                    out,
                    cfg.vit_heads,
                    cfg.vit_depth,
                    cfg.mlp_ratio,
                )?,
            });
            width = out;
        }

        let bottleneck = (0..3)
            .map(|i| ConvBlock::build(&mut init, &format!("mid.block{i}"), width, width, cfg.groups))
            .collect();

        // encoder features available for UNet skips: (scale divisor, width);
        // entry 0 is the initial block, entry i>0 the i-th down stage
        let mut encoder_levels: Vec<(u128, usize)> = vec![(1, base)];
        for i in 1..=cfg.num_down {
            encoder_levels.push(((cfg.down_factor as u128).pow(i as u32), wide));
        }
        let mut skip_used = vec![false; encoder_levels.len()];

        let mut ups = Vec::with_capacity(cfg.num_up);
        let mut div = (cfg.down_factor as u128).pow(cfg.num_down as u32);
        for j in 0..cfg.num_up {
            div /= 2;
            let out = cfg.up_out_width(j);
            let name = format!("up{j}");
            // concatenate the encoder feature whose scale this stage restores
            let skip_from = encoder_levels
                .iter()
                .enumerate()
                .position(|(i, &(d, _))| d == div && !skip_used[i]);
            let block_in = match skip_from {
                Some(i) => {
                    skip_used[i] = true;
                    width + encoder_levels[i].1
                }
                None => width,
            };
            let shortcut = if width != out {
                Some((
                    init.conv_weight(&format!("{name}.skip.w"), [out, width, 1, 1]),
                    init.zeros(&format!("{name}.skip.b"), &[out]),
                ))
            } else {
                None
            };
            ups.push(UpStage {
                block1: ConvBlock::build(&mut init, &format!("{name}.block1"), block_in, out, cfg.groups),
                block2: ConvBlock::build(&mut init, &format!("{name}.block2"), out, out, cfg.groups),
                shortcut,
                time: TimeBias::build(&mut init, &format!("{name}.time"), cfg.time_dim, out),
                skip_from,
            });
            width = out;
        }

        let final_w = init.conv_weight("final.conv.w", [cfg.out_channels, width, 1, 1]);
        let final_b = init.zeros("final.conv.b", &[cfg.out_channels]);

        Ok(Denoiser {
            cfg: cfg.clone(),
            init_w,
            init_b,
            init_g,
            init_bt,
            downs,
            bottleneck,
            ups,
            final_w,
            final_b,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    /// Predict the noise ε̂ from a (possibly conditioned) noisy input.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        x: VarId,
        t: usize,
        cond: Option<VarId>,
    ) -> Result<VarId> {
        if t < 1 || t > self.cfg.t_steps {
            return Err(Error::config(format!(
                "denoiser: step t = {t} outside 1..={}",
                self.cfg.t_steps
            )));
        }
        let x = match cond {
            Some(c) => g.tape.concat(&[x, c], 1)?,
            None => x,
        };
        let [_, c, h, w] = g.tape.shape(x)[..] else {
            return Err(Error::shape("denoiser expects NCHW input".to_string()));
        };
        check_channels("denoiser", c, self.cfg.in_channels)?;
        let down_total = self.cfg.total_downscale();
        if h % down_total != 0 || w % down_total != 0 {
            return Err(Error::shape(format!(
                "denoiser: spatial extent {h}x{w} not divisible by total downscale {down_total}"
            )));
        }

        let wi = g.param(self.init_w);
        let bi = g.param(self.init_b);
        let gi = g.param(self.init_g);
        let bti = g.param(self.init_bt);
        let mut hid = g.tape.conv2d(x, wi, Some(bi), 1, 1)?;
        hid = g.tape.group_norm(hid, self.cfg.groups, gi, bti, 1e-5)?;
        hid = g.tape.gelu(hid);

        // encoder features, indexed as in build: 0 = initial, i = down stage
        let mut encoder_feats = vec![hid];
        for stage in &self.downs {
            hid = g.tape.maxpool2d(hid, self.cfg.down_factor)?;
            hid = stage.block1.forward(g, hid)?;
            hid = stage.block2.forward(g, hid)?;
            hid = stage.time.apply(g, hid, t)?;
            hid = stage.vit.forward(g, hid)?;
            encoder_feats.push(hid);
        }

        for block in &self.bottleneck {
            hid = block.forward(g, hid)?;
        }

        for stage in &self.ups {
            hid = g.tape.upsample_bilinear2d(hid, 2)?;
            let resid = match stage.shortcut {
                Some((w, b)) => {
                    let wv = g.param(w);
                    let bv = g.param(b);
                    g.tape.conv2d(hid, wv, Some(bv), 1, 0)?
                }
                None => hid,
            };
            let block_in = match stage.skip_from {
                Some(i) => g.tape.concat(&[hid, encoder_feats[i]], 1)?,
                None => hid,
            };
            let y = stage.block1.forward(g, block_in)?;
            let y = stage.block2.forward(g, y)?;
            hid = g.tape.add(resid, y)?;
            hid = stage.time.apply(g, hid, t)?;
        }

        let wf = g.param(self.final_w);
        let bf = g.param(self.final_b);
        g.tape.conv2d(hid, wf, Some(bf), 1, 0)
    }

    /// Inference without gradient tracking.
    pub fn predict(
        &self,
        store: &ParamStore,
        x: &Tensor<f32>,
        t: usize,
        cond: Option<&Tensor<f32>>,
    ) -> Result<Tensor<f32>> {
        let mut g = Graph::<f32>::new(store, false);
        let xid = g.input(x);
        let cid = cond.map(|c| g.input(c));
        let out = self.forward(&mut g, xid, t, cid)?;
        Ok(g.tape.tensor(out))
    }
}
