//! Realism discriminator: initial conv + LeakyReLU, three conv blocks with
//! instance normalization, LeakyReLU and ViT encoders, then a final conv.
//! Kernel size 4 throughout, strides 2, 1, 2, 2, 1; the final map is
//! averaged and squashed through a sigmoid into a score in (0,1).

use super::{check_channels, Graph, ParamId, ParamInit, ParamStore, VitEncoder};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor, VarId};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub vit_heads: usize,
    pub vit_depth: usize,
}

impl DiscriminatorConfig {
    /// Desk defaults for (fundus, vessel) pair scoring.
    pub fn desk_pair() -> Self {
        DiscriminatorConfig {
            in_channels: 4,
            base_channels: 16,
            vit_heads: 4,
            vit_depth: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::config("discriminator: zero channel count"));
        }
        for w in [self.base_channels * 2, self.base_channels * 4] {
            if self.vit_heads == 0 || w % self.vit_heads != 0 {
                return Err(Error::config(format!(
                    "discriminator: {} heads do not divide width {w}",
                    self.vit_heads
                )));
            }
        }
        Ok(())
    }
}

const LEAKY_SLOPE: f64 = 0.2;

struct DownBlock {
    w: ParamId,
    b: ParamId,
    in_g: ParamId,
    in_b: ParamId,
    vit: VitEncoder,
    stride: usize,
    out_ch: usize,
}

pub struct Discriminator {
    cfg: DiscriminatorConfig,
    conv0_w: ParamId,
    conv0_b: ParamId,
    blocks: Vec<DownBlock>,
    final_w: ParamId,
    final_b: ParamId,
}

impl Discriminator {
    pub fn build(
        cfg: &DiscriminatorConfig,
        seed: u64,
        store: &mut ParamStore,
    ) -> Result<Discriminator> {
        cfg.validate()?;
        let mut init = ParamInit::new(store, seed);
        let b = cfg.base_channels;
        let conv0_w = init.conv_weight("conv0.w", [b, cfg.in_channels, 4, 4]);
        let conv0_b = init.zeros("conv0.b", &[b]);

        // widths and strides of the three instance-normalized blocks
        let plan = [(b, 2 * b, 1usize), (2 * b, 4 * b, 2), (4 * b, 4 * b, 2)];
        let mut blocks = Vec::with_capacity(3);
        for (i, (c_in, c_out, stride)) in plan.into_iter().enumerate() {
            let name = format!("block{i}");
            blocks.push(DownBlock {
                w: init.conv_weight(&format!("{name}.conv.w"), [c_out, c_in, 4, 4]),
                b: init.zeros(&format!("{name}.conv.b"), &[c_out]),
                in_g: init.ones(&format!("{name}.in.g"), &[c_out]),
                in_b: init.zeros(&format!("{name}.in.b"), &[c_out]),
                vit: VitEncoder::build(
                    &mut init,
                    &format!("{name}.vit"),
                    c_out,
                    cfg.vit_heads,
                    cfg.vit_depth,
                    2,
                )?,
                stride,
                out_ch: c_out,
            });
        }
        let final_w = init.conv_weight("final.w", [1, 4 * b, 4, 4]);
        let final_b = init.zeros("final.b", &[1]);
        Ok(Discriminator {
            cfg: cfg.clone(),
            conv0_w,
            conv0_b,
            blocks,
            final_w,
            final_b,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    /// Score a batch of inputs; returns probabilities with shape [N, 1].
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: VarId) -> Result<VarId> {
        let [n, c, _, _] = g.tape.shape(x)[..] else {
            return Err(Error::shape("discriminator expects NCHW input".to_string()));
        };
        check_channels("discriminator", c, self.cfg.in_channels)?;
        let w0 = g.param(self.conv0_w);
        let b0 = g.param(self.conv0_b);
        let mut h = g.tape.conv2d(x, w0, Some(b0), 2, 1)?;
        h = g.tape.leaky_relu(h, LEAKY_SLOPE);
        for block in &self.blocks {
            let w = g.param(block.w);
            let b = g.param(block.b);
            h = g.tape.conv2d(h, w, Some(b), block.stride, 1)?;
            // instance norm: one group per channel
            let ig = g.param(block.in_g);
            let ib = g.param(block.in_b);
            h = g.tape.group_norm(h, block.out_ch, ig, ib, 1e-5)?;
            h = g.tape.leaky_relu(h, LEAKY_SLOPE);
            h = block.vit.forward(g, h)?;
        }
        let wf = g.param(self.final_w);
        let bf = g.param(self.final_b);
        let logits = g.tape.conv2d(h, wf, Some(bf), 1, 1)?;
        // per-sample mean logit -> sigmoid
        let mut rows = Vec::with_capacity(n);
        for ni in 0..n {
            let s = g.tape.slice_batch(logits, ni, 1)?;
            let m = g.tape.mean_all(s);
            rows.push(g.tape.reshape(m, &[1, 1])?);
        }
        let scores = g.tape.concat(&rows, 0)?;
        Ok(g.tape.sigmoid(scores))
    }

    /// Score one (fundus, vessel) pair; 1 is "real".
    pub fn discriminate(
        &self,
        store: &ParamStore,
        fundus: &Tensor<f32>,
        vessel: &Tensor<f32>,
    ) -> Result<f32> {
        let pair = pair_input(fundus, vessel)?;
        let scores = self.score_batch(store, &pair)?;
        Ok(scores[0])
    }

    /// Score a prepared batch without gradient tracking.
    pub fn score_batch(&self, store: &ParamStore, batch: &Tensor<f32>) -> Result<Vec<f32>> {
        let mut g = Graph::<f32>::new(store, false);
        let xid = g.input(batch);
        let out = self.forward(&mut g, xid)?;
        Ok(g.tape.value(out).to_vec())
    }
}

/// Concatenate a fundus image and a vessel map along channels into a
/// 1-sample batch.
pub fn pair_input(fundus: &Tensor<f32>, vessel: &Tensor<f32>) -> Result<Tensor<f32>> {
    let fs = fundus.shape();
    let vs = vessel.shape();
    if fs.len() != 3 || vs.len() != 3 || fs[1..] != vs[1..] {
        return Err(Error::shape(format!(
            "pair: fundus {fs:?} and vessel {vs:?} are not aligned CHW images"
        )));
    }
    let (c1, c2) = (fs[0], vs[0]);
    let (h, w) = (fs[1], fs[2]);
    let mut data = Vec::with_capacity((c1 + c2) * h * w);
    data.extend_from_slice(fundus.data());
    data.extend_from_slice(vessel.data());
    Tensor::new(vec![1, c1 + c2, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn desk() -> (DiscriminatorConfig, ParamStore, Discriminator) {
        let cfg = DiscriminatorConfig::desk_pair();
        let mut store = ParamStore::new();
        let d = Discriminator::build(&cfg, 3, &mut store).unwrap();
        (cfg, store, d)
    }

    #[test]
    fn untrained_scores_near_half() {
        let (_, store, d) = desk();
        let mut stream = Stream::derive(4, &[0]);
        let fundus = Tensor::<f32>::rand_uniform(&[3, 32, 32], 0.0, 1.0, &mut stream);
        let vessel = Tensor::<f32>::rand_uniform(&[1, 32, 32], 0.0, 1.0, &mut stream);
        let s = d.discriminate(&store, &fundus, &vessel).unwrap();
        assert!((s - 0.5).abs() < 0.2, "untrained score {s} far from 0.5");
    }

    #[test]
    fn scores_strictly_inside_unit_interval() {
        let (_, store, d) = desk();
        let mut stream = Stream::derive(5, &[0]);
        for _ in 0..4 {
            let batch = Tensor::<f32>::randn(&[2, 4, 32, 32], &mut stream);
            for s in d.score_batch(&store, &batch).unwrap() {
                assert!(s > 0.0 && s < 1.0);
            }
        }
    }

    #[test]
    fn misaligned_pair_rejected() {
        let fundus = Tensor::<f32>::zeros(&[3, 32, 32]);
        let vessel = Tensor::<f32>::zeros(&[1, 16, 16]);
        assert!(pair_input(&fundus, &vessel).is_err());
    }

    #[test]
    fn batch_scores_match_single_scores() {
        let (_, store, d) = desk();
        let mut stream = Stream::derive(6, &[0]);
        let a = Tensor::<f32>::rand_uniform(&[4, 32, 32], 0.0, 1.0, &mut stream);
        let b = Tensor::<f32>::rand_uniform(&[4, 32, 32], 0.0, 1.0, &mut stream);
        let mut data = a.data().to_vec();
        data.extend_from_slice(b.data());
        let batch = Tensor::new(vec![2, 4, 32, 32], data).unwrap();
        let batch_scores = d.score_batch(&store, &batch).unwrap();
        let single_a = d
            .score_batch(&store, &a.reshape(&[1, 4, 32, 32]).unwrap())
            .unwrap();
        let single_b = d
            .score_batch(&store, &b.reshape(&[1, 4, 32, 32]).unwrap())
            .unwrap();
        assert!((batch_scores[0] - single_a[0]).abs() < 1e-6);
        assert!((batch_scores[1] - single_b[0]).abs() < 1e-6);
    }

    #[test]
    fn tiny_discriminator_grad_check() {
        // 24x24 is the smallest extent that leaves every ViT stage with at
        // least two tokens: 24 -> 12 -> 11 -> 5 -> 2
        let cfg = DiscriminatorConfig {
            in_channels: 1,
            base_channels: 4,
            vit_heads: 2,
            vit_depth: 1,
        };
        let mut store = ParamStore::new();
        let d = Discriminator::build(&cfg, 8, &mut store).unwrap();
        let mut stream = Stream::derive(9, &[0]);
        let x = Tensor::<f64>::randn(&[1, 1, 24, 24], &mut stream);
        let err = crate::networks::grad_check_with_params(
            &store,
            |g, xid| {
                let s = d.forward(g, xid)?;
                Ok(g.tape.mean_all(s))
            },
            &x,
        )
        .unwrap();
        assert!(err <= 1e-4, "err = {err}");
    }
}
