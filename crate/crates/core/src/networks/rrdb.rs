//! Super-resolution generator built from Residual-in-Residual Dense Blocks.
//!
//! The network predicts a residual on top of a bilinear upsample of its
//! input; the last conv starts at zero, so a freshly built generator is
//! exactly the bilinear baseline.

use super::{check_channels, Graph, ParamId, ParamInit, ParamStore};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor, VarId};

#[derive(Debug, Clone, PartialEq)]
pub struct RrdbConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub features: usize,
    pub growth: usize,
    pub num_blocks: usize,
    pub scale: usize,
    pub residual_scale: f32,
}

impl RrdbConfig {
    pub fn desk(channels: usize, scale: usize) -> Self {
        RrdbConfig {
            in_channels: channels,
            out_channels: channels,
            features: 16,
            growth: 8,
            num_blocks: 4,
            scale,
            residual_scale: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.scale, 2 | 4) {
            return Err(Error::config(format!(
                "super-resolution scale {} unsupported (2 or 4)",
                self.scale
            )));
        }
        if self.in_channels == 0 || self.features == 0 || self.growth == 0 {
            return Err(Error::config("rrdb: zero width"));
        }
        Ok(())
    }
}

const LEAKY_SLOPE: f64 = 0.2;

struct DenseBlock {
    convs: Vec<(ParamId, ParamId)>, // five convs, growing input width
}

impl DenseBlock {
    fn build(init: &mut ParamInit, name: &str, feat: usize, growth: usize) -> Self {
        let mut convs = Vec::with_capacity(5);
        for i in 0..5 {
            let c_in = feat + i * growth;
            let c_out = if i == 4 { feat } else { growth };
            convs.push((
                init.conv_weight(&format!("{name}.conv{i}.w"), [c_out, c_in, 3, 3]),
                init.zeros(&format!("{name}.conv{i}.b"), &[c_out]),
            ));
        }
        DenseBlock { convs }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: VarId, rs: f32) -> Result<VarId> {
        let mut feats = vec![x];
        for (i, (w, b)) in self.convs.iter().enumerate() {
            let cat = if feats.len() == 1 {
                feats[0]
            } else {
                g.tape.concat(&feats, 1)?
            };
            let w = g.param(*w);
            let b = g.param(*b);
            let mut y = g.tape.conv2d(cat, w, Some(b), 1, 1)?;
            if i < 4 {
                y = g.tape.leaky_relu(y, LEAKY_SLOPE);
                feats.push(y);
            } else {
                let scaled = g.tape.mul_scalar(y, rs as f64);
                return g.tape.add(x, scaled);
            }
        }
        unreachable!("dense block always returns at conv4")
    }
}

struct Rrdb {
    dense: [DenseBlock; 3],
}

impl Rrdb {
    fn build(init: &mut ParamInit, name: &str, feat: usize, growth: usize) -> Self {
        Rrdb {
            dense: [
                DenseBlock::build(init, &format!("{name}.rdb0"), feat, growth),
                DenseBlock::build(init, &format!("{name}.rdb1"), feat, growth),
                DenseBlock::build(init, &format!("{name}.rdb2"), feat, growth),
            ],
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: VarId, rs: f32) -> Result<VarId> {
        let mut h = x;
        for d in &self.dense {
            h = d.forward(g, h, rs)?;
        }
        let scaled = g.tape.mul_scalar(h, rs as f64);
        g.tape.add(x, scaled)
    }
}

pub struct RrdbNet {
    cfg: RrdbConfig,
    conv_first: (ParamId, ParamId),
    blocks: Vec<Rrdb>,
    conv_body: (ParamId, ParamId),
    up_convs: Vec<(ParamId, ParamId)>,
    conv_hr: (ParamId, ParamId),
    conv_last: (ParamId, ParamId),
}

impl RrdbNet {
    pub fn build(cfg: &RrdbConfig, seed: u64, store: &mut ParamStore) -> Result<RrdbNet> {
        cfg.validate()?;
        let mut init = ParamInit::new(store, seed);
        let f = cfg.features;
        let conv_first = (
            init.conv_weight("first.w", [f, cfg.in_channels, 3, 3]),
            init.zeros("first.b", &[f]),
        );
        let blocks = (0..cfg.num_blocks)
            .map(|i| Rrdb::build(&mut init, &format!("body{i}"), f, cfg.growth))
            .collect();
        let conv_body = (
            init.conv_weight("body_out.w", [f, f, 3, 3]),
            init.zeros("body_out.b", &[f]),
        );
        let n_up = if cfg.scale == 4 { 2 } else { 1 };
        let up_convs = (0..n_up)
            .map(|i| {
                (
                    init.conv_weight(&format!("up{i}.w"), [f, f, 3, 3]),
                    init.zeros(&format!("up{i}.b"), &[f]),
                )
            })
            .collect();
        let conv_hr = (
            init.conv_weight("hr.w", [f, f, 3, 3]),
            init.zeros("hr.b", &[f]),
        );
        // zero start: the generator begins as a pure bilinear upsampler
        let conv_last = (
            init.zeros("last.w", &[cfg.out_channels, f, 3, 3]),
            init.zeros("last.b", &[cfg.out_channels]),
        );
        Ok(RrdbNet {
            cfg: cfg.clone(),
            conv_first,
            blocks,
            conv_body,
            up_convs,
            conv_hr,
            conv_last,
        })
    }

    pub fn config(&self) -> &RrdbConfig {
        &self.cfg
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: VarId) -> Result<VarId> {
        let [_, c, _, _] = g.tape.shape(x)[..] else {
            return Err(Error::shape("rrdb expects NCHW input".to_string()));
        };
        check_channels("rrdb", c, self.cfg.in_channels)?;
        let rs = self.cfg.residual_scale;

        let (wf, bf) = self.conv_first;
        let wf = g.param(wf);
        let bf = g.param(bf);
        let shallow = g.tape.conv2d(x, wf, Some(bf), 1, 1)?;

        let mut h = shallow;
        for b in &self.blocks {
            h = b.forward(g, h, rs)?;
        }
        let (wb, bb) = self.conv_body;
        let wb = g.param(wb);
        let bb = g.param(bb);
        let body = g.tape.conv2d(h, wb, Some(bb), 1, 1)?;
        let mut feat = g.tape.add(shallow, body)?;

        for (wu, bu) in &self.up_convs {
            feat = g.tape.upsample_bilinear2d(feat, 2)?;
            let wu = g.param(*wu);
            let bu = g.param(*bu);
            feat = g.tape.conv2d(feat, wu, Some(bu), 1, 1)?;
            feat = g.tape.leaky_relu(feat, LEAKY_SLOPE);
        }
        let (wh, bh) = self.conv_hr;
        let wh = g.param(wh);
        let bh = g.param(bh);
        feat = g.tape.conv2d(feat, wh, Some(bh), 1, 1)?;
        feat = g.tape.leaky_relu(feat, LEAKY_SLOPE);
        let (wl, bl) = self.conv_last;
        let wl = g.param(wl);
        let bl = g.param(bl);
        let residual = g.tape.conv2d(feat, wl, Some(bl), 1, 1)?;

        let base = g.tape.upsample_bilinear2d(x, self.cfg.scale)?;
        g.tape.add(base, residual)
    }

    /// Upscale a single CHW image or an NCHW batch without gradient
    /// tracking; the output keeps the input's rank.
    pub fn upscale(&self, store: &ParamStore, low: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (batch, chw) = match low.rank() {
            3 => {
                let mut s = vec![1];
                s.extend_from_slice(low.shape());
                (low.reshape(&s)?, true)
            }
            4 => (low.clone(), false),
            _ => {
                return Err(Error::shape(format!(
                    "upscale expects CHW or NCHW, got {:?}",
                    low.shape()
                )))
            }
        };
        let mut g = Graph::<f32>::new(store, false);
        let xid = g.input(&batch);
        let out = self.forward(&mut g, xid)?;
        let t = g.tape.tensor(out);
        if chw {
            let s = t.shape()[1..].to_vec();
            t.reshape(&s)
        } else {
            Ok(t)
        }
    }
}
