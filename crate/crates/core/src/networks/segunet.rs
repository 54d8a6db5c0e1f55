//! Segmentation UNet: two-level encoder-decoder with skip connections and a
//! sigmoid head producing a per-pixel vessel probability map.

use super::{check_channels, ConvBlock, Graph, ParamId, ParamInit, ParamStore};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor, VarId};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegUnetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub groups: usize,
}

impl SegUnetConfig {
    pub fn desk(in_channels: usize) -> Self {
        SegUnetConfig {
            in_channels,
            base_channels: 16,
            groups: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::config("segunet: zero channel count"));
        }
        if self.groups == 0 || self.base_channels % self.groups != 0 {
            return Err(Error::config(format!(
                "segunet: {} groups do not divide base width {}",
                self.groups, self.base_channels
            )));
        }
        Ok(())
    }
}

pub struct SegUnet {
    cfg: SegUnetConfig,
    enc1: ConvBlock,
    enc2: ConvBlock,
    mid: ConvBlock,
    up1_proj: (ParamId, ParamId),
    dec1: ConvBlock,
    up2_proj: (ParamId, ParamId),
    dec2: ConvBlock,
    head: (ParamId, ParamId),
}

impl SegUnet {
    pub fn build(cfg: &SegUnetConfig, seed: u64, store: &mut ParamStore) -> Result<SegUnet> {
        cfg.validate()?;
        let mut init = ParamInit::new(store, seed);
        let b = cfg.base_channels;
        let enc1 = ConvBlock::build(&mut init, "enc1", cfg.in_channels, b, cfg.groups);
        let enc2 = ConvBlock::build(&mut init, "enc2", b, 2 * b, cfg.groups);
        let mid = ConvBlock::build(&mut init, "mid", 2 * b, 4 * b, cfg.groups);
        let up1_proj = (
            init.conv_weight("up1.proj.w", [2 * b, 4 * b, 1, 1]),
            init.zeros("up1.proj.b", &[2 * b]),
        );
        let dec1 = ConvBlock::build(&mut init, "dec1", 4 * b, 2 * b, cfg.groups);
        let up2_proj = (
            init.conv_weight("up2.proj.w", [b, 2 * b, 1, 1]),
            init.zeros("up2.proj.b", &[b]),
        );
        let dec2 = ConvBlock::build(&mut init, "dec2", 2 * b, b, cfg.groups);
        let head = (
            init.conv_weight("head.w", [1, b, 1, 1]),
            init.zeros("head.b", &[1]),
        );
        Ok(SegUnet {
            cfg: cfg.clone(),
            enc1,
            enc2,
            mid,
            up1_proj,
            dec1,
            up2_proj,
            dec2,
            head,
        })
    }

    pub fn config(&self) -> &SegUnetConfig {
        &self.cfg
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: VarId) -> Result<VarId> {
        let [_, c, h, w] = g.tape.shape(x)[..] else {
            return Err(Error::shape("segunet expects NCHW input".to_string()));
        };
        check_channels("segunet", c, self.cfg.in_channels)?;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape(format!(
                "segunet: spatial extent {h}x{w} must divide by 4"
            )));
        }
        let e1 = self.enc1.forward(g, x)?;
        let e1 = g.tape.gelu(e1);
        let p1 = g.tape.maxpool2d(e1, 2)?;
        let e2 = self.enc2.forward(g, p1)?;
        let e2 = g.tape.gelu(e2);
        let p2 = g.tape.maxpool2d(e2, 2)?;
        let m = self.mid.forward(g, p2)?;
        let m = g.tape.gelu(m);

        let u1 = g.tape.upsample_bilinear2d(m, 2)?;
        let (w1, b1) = self.up1_proj;
        let w1 = g.param(w1);
        let b1 = g.param(b1);
        let u1 = g.tape.conv2d(u1, w1, Some(b1), 1, 0)?;
        let cat1 = g.tape.concat(&[u1, e2], 1)?;
        let d1 = self.dec1.forward(g, cat1)?;
        let d1 = g.tape.gelu(d1);

        let u2 = g.tape.upsample_bilinear2d(d1, 2)?;
        let (w2, b2) = self.up2_proj;
        let w2 = g.param(w2);
        let b2 = g.param(b2);
        let u2 = g.tape.conv2d(u2, w2, Some(b2), 1, 0)?;
        let cat2 = g.tape.concat(&[u2, e1], 1)?;
        let d2 = self.dec2.forward(g, cat2)?;
        let d2 = g.tape.gelu(d2);

        let (wh, bh) = self.head;
        let wh = g.param(wh);
        let bh = g.param(bh);
        let logits = g.tape.conv2d(d2, wh, Some(bh), 1, 0)?;
        Ok(g.tape.sigmoid(logits))
    }

    /// Per-pixel vessel probability map without gradient tracking.
    pub fn segment(&self, store: &ParamStore, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::<f32>::new(store, false);
        let xid = g.input(image);
        let out = self.forward(&mut g, xid)?;
        Ok(g.tape.tensor(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    #[test]
    fn probability_map_shape_and_range() {
        let cfg = SegUnetConfig::desk(3);
        let mut store = ParamStore::new();
        let net = SegUnet::build(&cfg, 1, &mut store).unwrap();
        let mut stream = Stream::derive(2, &[0]);
        let x = Tensor::<f32>::rand_uniform(&[2, 3, 32, 32], 0.0, 1.0, &mut stream);
        let y = net.segment(&store, &x).unwrap();
        assert_eq!(y.shape(), &[2, 1, 32, 32]);
        assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn tiny_segunet_grad_check() {
        let cfg = SegUnetConfig {
            in_channels: 1,
            base_channels: 4,
            groups: 2,
        };
        let mut store = ParamStore::new();
        let net = SegUnet::build(&cfg, 3, &mut store).unwrap();
        let mut stream = Stream::derive(4, &[0]);
        let x = Tensor::<f64>::rand_uniform(&[1, 1, 8, 8], 0.0, 1.0, &mut stream);
        let err = crate::networks::grad_check_with_params(
            &store,
            |g, xid| {
                let y = net.forward(g, xid)?;
                let s = g.tape.square(y);
                Ok(g.tape.mean_all(s))
            },
            &x,
        )
        .unwrap();
        assert!(err <= 1e-4, "err = {err}");
    }
}
