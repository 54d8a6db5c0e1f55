//! Forward corruption q and reverse ancestral sampling p_θ.
//!
//! The forward process mixes data with Gaussian noise using the precomputed
//! schedule: x_t = sqrt(ᾱ_t)·x₀ + sqrt(1-ᾱ_t)·ε. The reverse step removes
//! the predicted noise and re-injects sqrt(β_t)·z, with z = 0 at t = 1.
//! Stage 2 conditions the model by concatenating a vessel map to the noisy
//! input along channels at every step.

use crate::error::{Error, Result};
use crate::networks::{Denoiser, ParamStore};
use crate::numerics::Tensor;
use crate::rng::Stream;
use crate::schedules::NoiseSchedule;

/// Anything that predicts the injected noise from a (conditioned) noisy
/// input at step t.
pub trait NoisePredictor {
    fn predict_noise(&self, x: &Tensor<f32>, t: usize) -> Result<Tensor<f32>>;
}

/// A built denoiser bound to its parameters.
pub struct DenoiserSampler<'a> {
    pub net: &'a Denoiser,
    pub store: &'a ParamStore,
}

impl NoisePredictor for DenoiserSampler<'_> {
    fn predict_noise(&self, x: &Tensor<f32>, t: usize) -> Result<Tensor<f32>> {
        self.net.predict(self.store, x, t, None)
    }
}

/// Map [0,1] image data to the [-1,1] range the diffusion runs in.
pub fn to_model_range(x: &Tensor<f32>) -> Tensor<f32> {
    x.map(|v| 2.0 * v - 1.0)
}

/// Map model-range data back to [0,1], clipping.
pub fn from_model_range(x: &Tensor<f32>) -> Tensor<f32> {
    x.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
}

#[derive(Debug, Clone)]
pub struct DiffusionProcess {
    schedule: NoiseSchedule,
    data_channels: usize,
    cond_channels: usize,
    height: usize,
    width: usize,
}

impl DiffusionProcess {
    pub fn new(
        schedule: NoiseSchedule,
        data_channels: usize,
        cond_channels: usize,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        if !matches!(data_channels, 1 | 3) {
            return Err(Error::config(format!(
                "diffusion: data channels {data_channels} not in {{1, 3}}"
            )));
        }
        if !matches!(cond_channels, 0 | 1) {
            return Err(Error::config(format!(
                "diffusion: cond channels {cond_channels} not in {{0, 1}}"
            )));
        }
        Ok(DiffusionProcess {
            schedule,
            data_channels,
            cond_channels,
            height,
            width,
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn data_channels(&self) -> usize {
        self.data_channels
    }

    pub fn cond_channels(&self) -> usize {
        self.cond_channels
    }

    /// Channels the model consumes: data plus conditioning.
    pub fn model_channels(&self) -> usize {
        self.data_channels + self.cond_channels
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Closed-form corruption: sqrt(ᾱ_t)·x0 + sqrt(1-ᾱ_t)·eps.
    pub fn q_sample(&self, x0: &Tensor<f32>, t: usize, eps: &Tensor<f32>) -> Result<Tensor<f32>> {
        if x0.shape() != eps.shape() {
            return Err(Error::shape(format!(
                "q_sample: x0 {:?} and eps {:?} differ",
                x0.shape(),
                eps.shape()
            )));
        }
        let bar = self.schedule.alpha_bar(t)?;
        let c0 = bar.sqrt() as f32;
        let c1 = (1.0 - bar).sqrt() as f32;
        let data = x0
            .data()
            .iter()
            .zip(eps.data())
            .map(|(&x, &e)| c0 * x + c1 * e)
            .collect();
        Tensor::new(x0.shape().to_vec(), data)
    }

    /// Single forward step: sqrt(1-β_t)·x_{t-1} + sqrt(β_t)·eps.
    pub fn q_step(&self, x_prev: &Tensor<f32>, t: usize, eps: &Tensor<f32>) -> Result<Tensor<f32>> {
        if x_prev.shape() != eps.shape() {
            return Err(Error::shape(format!(
                "q_step: x {:?} and eps {:?} differ",
                x_prev.shape(),
                eps.shape()
            )));
        }
        let beta = self.schedule.beta(t)?;
        let c0 = (1.0 - beta).sqrt() as f32;
        let c1 = beta.sqrt() as f32;
        let data = x_prev
            .data()
            .iter()
            .zip(eps.data())
            .map(|(&x, &e)| c0 * x + c1 * e)
            .collect();
        Tensor::new(x_prev.shape().to_vec(), data)
    }

    /// The deterministic part of the reverse update plus the optional noise
    /// injection. `z` must be None exactly when t = 1.
    fn reverse_update(
        &self,
        x_t: &Tensor<f32>,
        t: usize,
        eps_hat: &Tensor<f32>,
        z: Option<&Tensor<f32>>,
    ) -> Result<Tensor<f32>> {
        if x_t.shape() != eps_hat.shape() {
            return Err(Error::shape(format!(
                "reverse step: x {:?} and predicted noise {:?} differ",
                x_t.shape(),
                eps_hat.shape()
            )));
        }
        let alpha = self.schedule.alpha(t)?;
        let bar = self.schedule.alpha_bar(t)?;
        let beta = self.schedule.beta(t)?;
        let eps_coef = ((1.0 - alpha) / (1.0 - bar).sqrt()) as f32;
        let inv_sqrt_alpha = (1.0 / alpha.sqrt()) as f32;
        let noise_coef = beta.sqrt() as f32;
        let mut data: Vec<f32> = x_t
            .data()
            .iter()
            .zip(eps_hat.data())
            .map(|(&x, &e)| (x - eps_coef * e) * inv_sqrt_alpha)
            .collect();
        if let Some(z) = z {
            for (d, &n) in data.iter_mut().zip(z.data()) {
                *d += noise_coef * n;
            }
        }
        Tensor::new(x_t.shape().to_vec(), data)
    }

    /// One ancestral sampling step on a batch. The conditioning map (if
    /// any) is concatenated to x_t along channels before the model call.
    pub fn p_sample_step<M: NoisePredictor>(
        &self,
        model: &M,
        x_t: &Tensor<f32>,
        t: usize,
        cond: Option<&Tensor<f32>>,
        rng: &mut Stream,
    ) -> Result<Tensor<f32>> {
        let input = self.model_input(x_t, cond)?;
        let eps_hat = model.predict_noise(&input, t)?;
        let z = if t > 1 {
            Some(Tensor::<f32>::randn(x_t.shape(), rng))
        } else {
            None
        };
        self.reverse_update(x_t, t, &eps_hat, z.as_ref())
    }

    fn model_input(&self, x_t: &Tensor<f32>, cond: Option<&Tensor<f32>>) -> Result<Tensor<f32>> {
        let [n, c, h, w] = x_t.shape()[..] else {
            return Err(Error::shape("diffusion expects NCHW batches".to_string()));
        };
        if c != self.data_channels {
            return Err(Error::shape(format!(
                "diffusion: batch has {c} channels, process expects {}",
                self.data_channels
            )));
        }
        match (self.cond_channels, cond) {
            (0, None) => Ok(x_t.clone()),
            (0, Some(_)) => Err(Error::shape(
                "diffusion: conditioning supplied to an unconditional process".to_string(),
            )),
            (_, None) => Err(Error::shape(
                "diffusion: conditional process called without a conditioning map".to_string(),
            )),
            (cc, Some(cond)) => {
                if cond.shape() != [n, cc, h, w] {
                    return Err(Error::shape(format!(
                        "diffusion: conditioning shape {:?}, expected {:?}",
                        cond.shape(),
                        [n, cc, h, w]
                    )));
                }
                let mut data = Vec::with_capacity(n * (c + cc) * h * w);
                let plane = h * w;
                for ni in 0..n {
                    data.extend_from_slice(
                        &x_t.data()[ni * c * plane..(ni + 1) * c * plane],
                    );
                    data.extend_from_slice(
                        &cond.data()[ni * cc * plane..(ni + 1) * cc * plane],
                    );
                }
                Tensor::new(vec![n, c + cc, h, w], data)
            }
        }
    }

    /// Ancestral sampling: start from x_T ~ N(0,I) and iterate the reverse
    /// update from t = T down to t = 1. Deterministic given the seed; each
    /// sample draws from its own substream keyed by (seed, index, t).
    pub fn sample<M: NoisePredictor>(
        &self,
        model: &M,
        n: usize,
        cond: Option<&Tensor<f32>>,
        seed: u64,
    ) -> Result<Tensor<f32>> {
        if n == 0 {
            return Err(Error::config("diffusion: sample count must be > 0"));
        }
        let (h, w) = (self.height, self.width);
        let c = self.data_channels;
        if let Some(cond) = cond {
            if self.cond_channels == 0 {
                return Err(Error::shape(
                    "diffusion: conditioning supplied to an unconditional process".to_string(),
                ));
            }
            if cond.shape() != [n, self.cond_channels, h, w] {
                return Err(Error::shape(format!(
                    "diffusion: conditioning shape {:?}, expected {:?}",
                    cond.shape(),
                    [n, self.cond_channels, h, w]
                )));
            }
        } else if self.cond_channels != 0 {
            return Err(Error::shape(
                "diffusion: conditional process called without a conditioning map".to_string(),
            ));
        }

        let t_steps = self.schedule.len();
        let plane = c * h * w;
        let mut out = Tensor::<f32>::zeros(&[n, c, h, w]);
        const CHUNK: usize = 8;
        let mut start = 0;
        while start < n {
            let len = CHUNK.min(n - start);
            // x_T for each sample in the chunk
            let mut x = Tensor::<f32>::zeros(&[len, c, h, w]);
            for i in 0..len {
                let mut s = Stream::derive(seed, &[(start + i) as u64, 0]);
                for v in x.data_mut()[i * plane..(i + 1) * plane].iter_mut() {
                    *v = s.normal_f32();
                }
            }
            let chunk_cond = cond
                .map(|cd| {
                    let cp = self.cond_channels * h * w;
                    Tensor::new(
                        vec![len, self.cond_channels, h, w],
                        cd.data()[start * cp..(start + len) * cp].to_vec(),
                    )
                })
                .transpose()?;
            for t in (1..=t_steps).rev() {
                let input = self.model_input(&x, chunk_cond.as_ref())?;
                let eps_hat = model.predict_noise(&input, t)?;
                let z = if t > 1 {
                    let mut z = Tensor::<f32>::zeros(&[len, c, h, w]);
                    for i in 0..len {
                        let mut s = Stream::derive(seed, &[(start + i) as u64, t as u64]);
                        for v in z.data_mut()[i * plane..(i + 1) * plane].iter_mut() {
                            *v = s.normal_f32();
                        }
                    }
                    Some(z)
                } else {
                    None
                };
                x = self.reverse_update(&x, t, &eps_hat, z.as_ref())?;
            }
            out.data_mut()[start * plane..(start + len) * plane].copy_from_slice(x.data());
            start += len;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedules::NoiseSchedule;

    fn proc(t_steps: usize) -> DiffusionProcess {
        DiffusionProcess::new(
            NoiseSchedule::default_linear(t_steps).unwrap(),
            1,
            0,
            4,
            4,
        )
        .unwrap()
    }

    /// Predictor that returns a fixed tensor regardless of input.
    struct FixedPredictor(Tensor<f32>);

    impl NoisePredictor for FixedPredictor {
        fn predict_noise(&self, x: &Tensor<f32>, _t: usize) -> Result<Tensor<f32>> {
            let n = x.shape()[0];
            let mut data = Vec::with_capacity(n * self.0.numel());
            for _ in 0..n {
                data.extend_from_slice(self.0.data());
            }
            let mut shape = vec![n];
            shape.extend_from_slice(&self.0.shape()[1..]);
            Tensor::new(shape, data)
        }
    }

    #[test]
    fn channel_contract_enforced() {
        let s = NoiseSchedule::default_linear(10).unwrap();
        assert!(DiffusionProcess::new(s.clone(), 2, 0, 4, 4).is_err());
        assert!(DiffusionProcess::new(s.clone(), 1, 2, 4, 4).is_err());
        let p = DiffusionProcess::new(s, 3, 1, 4, 4).unwrap();
        assert_eq!(p.model_channels(), 4);
    }

    #[test]
    fn q_sample_near_zero_noise_schedule_returns_x0() {
        let s = NoiseSchedule::linear(4, 1e-12, 1e-12).unwrap();
        let p = DiffusionProcess::new(s, 1, 0, 2, 2).unwrap();
        let x0 = Tensor::new(vec![1, 1, 2, 2], vec![0.3, -0.7, 0.9, 0.0]).unwrap();
        let mut stream = Stream::derive(1, &[0]);
        let eps = Tensor::<f32>::randn(&[1, 1, 2, 2], &mut stream);
        let xt = p.q_sample(&x0, 4, &eps).unwrap();
        for (a, b) in xt.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn q_sample_zero_noise_scales_by_sqrt_alpha_bar() {
        let p = proc(100);
        let x0 = Tensor::<f32>::full(&[1, 1, 4, 4], 0.5);
        let eps = Tensor::<f32>::zeros(&[1, 1, 4, 4]);
        let t = 40;
        let xt = p.q_sample(&x0, t, &eps).unwrap();
        let want = (p.schedule().alpha_bar(t).unwrap().sqrt() * 0.5) as f32;
        for &v in xt.data() {
            assert!((v - want).abs() < 1e-7);
        }
    }

    #[test]
    fn q_sample_rejects_t_out_of_range() {
        let p = proc(10);
        let x = Tensor::<f32>::zeros(&[1, 1, 4, 4]);
        assert!(p.q_sample(&x, 0, &x).is_err());
        assert!(p.q_sample(&x, 11, &x).is_err());
    }

    #[test]
    fn iterated_q_steps_match_closed_form_coefficients() {
        // composing x_t = sqrt(1-β_t) x_{t-1} + sqrt(β_t) ε_t gives
        // coefficient Π sqrt(1-β_s) on x0 and total noise variance 1 - ᾱ_t
        let p = proc(10);
        let s = p.schedule();
        let mut x0_coef = 1.0f64;
        let mut noise_var = 0.0f64;
        for t in 1..=10 {
            let beta = s.beta(t).unwrap();
            x0_coef *= (1.0 - beta).sqrt();
            noise_var = noise_var * (1.0 - beta) + beta;
        }
        let bar = s.alpha_bar(10).unwrap();
        assert!((x0_coef - bar.sqrt()).abs() < 1e-6);
        assert!((noise_var - (1.0 - bar)).abs() < 1e-6);
    }

    #[test]
    fn q_step_small_beta_keeps_input() {
        let s = NoiseSchedule::linear(4, 1e-12, 1e-12).unwrap();
        let p = DiffusionProcess::new(s, 1, 0, 2, 2).unwrap();
        let x = Tensor::new(vec![1, 1, 2, 2], vec![0.1, 0.2, -0.3, 0.4]).unwrap();
        let eps = Tensor::<f32>::ones(&[1, 1, 2, 2]);
        let y = p.q_step(&x, 2, &eps).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn q_step_scaling_on_zero_input() {
        let p = proc(50);
        let x = Tensor::<f32>::zeros(&[1, 1, 4, 4]);
        let eps = Tensor::<f32>::ones(&[1, 1, 4, 4]);
        let t = 20;
        let y = p.q_step(&x, t, &eps).unwrap();
        let want = p.schedule().beta(t).unwrap().sqrt() as f32;
        for &v in y.data() {
            assert!((v - want).abs() < 1e-7);
        }
    }

    #[test]
    fn q_step_monte_carlo_variance() {
        let p = proc(100);
        let t = 60;
        let beta = p.schedule().beta(t).unwrap();
        let x_var = 0.49f64;
        let mut stream = Stream::derive(33, &[0]);
        let n = 100_000;
        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        for _ in 0..n {
            let x = Tensor::<f32>::full(&[1, 1, 1, 1], (stream.normal_f64() * x_var.sqrt()) as f32);
            let eps = Tensor::<f32>::full(&[1, 1, 1, 1], stream.normal_f32());
            let y = p.q_step(&x, t, &eps).unwrap().data()[0] as f64;
            sum += y;
            sum_sq += y * y;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        let want = (1.0 - beta) * x_var + beta;
        assert!(
            (var / want - 1.0).abs() < 0.02,
            "variance {var} vs expected {want}"
        );
    }

    #[test]
    fn p_sample_step_at_t1_is_deterministic() {
        let p = proc(10);
        let model = FixedPredictor(Tensor::<f32>::full(&[1, 1, 4, 4], 0.25));
        let mut s1 = Stream::derive(1, &[1]);
        let mut s2 = Stream::derive(999, &[7]);
        // burn the second stream so its state differs
        for _ in 0..13 {
            s2.normal_f32();
        }
        let x = Tensor::<f32>::full(&[1, 1, 4, 4], 0.5);
        let a = p.p_sample_step(&model, &x, 1, None, &mut s1).unwrap();
        let b = p.p_sample_step(&model, &x, 1, None, &mut s2).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn one_step_inversion_recovers_x0() {
        // T = 1 and a predictor that returns the exact noise used forward
        let s = NoiseSchedule::linear(2, 0.01, 0.02).unwrap();
        let p = DiffusionProcess::new(s, 1, 0, 2, 2).unwrap();
        let mut stream = Stream::derive(9, &[0]);
        let x0 = Tensor::<f32>::randn(&[1, 1, 2, 2], &mut stream);
        let eps = Tensor::<f32>::randn(&[1, 1, 2, 2], &mut stream);
        let x1 = p.q_sample(&x0, 1, &eps).unwrap();
        let model = FixedPredictor(eps);
        let mut rng = Stream::derive(10, &[0]);
        let rec = p.p_sample_step(&model, &x1, 1, None, &mut rng).unwrap();
        for (a, b) in rec.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn reverse_noise_injection_has_beta_variance() {
        // zero predictor, zero x_t, t > 1: output is sqrt(β_t) z
        let p = proc(50);
        let t = 30;
        let beta = p.schedule().beta(t).unwrap();
        let model = FixedPredictor(Tensor::<f32>::zeros(&[1, 1, 1, 1]));
        let mut stream = Stream::derive(11, &[0]);
        let x = Tensor::<f32>::zeros(&[1, 1, 1, 1]);
        let n = 100_000;
        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        for _ in 0..n {
            let y = p.p_sample_step(&model, &x, t, None, &mut stream).unwrap().data()[0] as f64;
            sum += y;
            sum_sq += y * y;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        assert!(
            (var / beta - 1.0).abs() < 0.02,
            "variance {var} vs beta {beta}"
        );
    }

    #[test]
    fn sampling_is_seed_deterministic_and_per_sample_independent() {
        let p = proc(5);
        let model = FixedPredictor(Tensor::<f32>::zeros(&[1, 1, 4, 4]));
        let a = p.sample(&model, 2, None, 77).unwrap();
        let b = p.sample(&model, 2, None, 77).unwrap();
        assert_eq!(a.data(), b.data());
        let first = &a.data()[..16];
        let second = &a.data()[16..];
        assert_ne!(first, second, "independent samples should differ");
    }

    #[test]
    fn zero_weight_model_output_is_cond_independent() {
        let s = NoiseSchedule::default_linear(5).unwrap();
        let p = DiffusionProcess::new(s, 1, 1, 4, 4).unwrap();
        let model = FixedPredictor(Tensor::<f32>::zeros(&[1, 1, 4, 4]));
        let cond_a = Tensor::<f32>::zeros(&[2, 1, 4, 4]);
        let cond_b = Tensor::<f32>::ones(&[2, 1, 4, 4]);
        let a = p.sample(&model, 2, Some(&cond_a), 3).unwrap();
        let b = p.sample(&model, 2, Some(&cond_b), 3).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn missing_or_superfluous_cond_rejected() {
        let s = NoiseSchedule::default_linear(5).unwrap();
        let cond_proc = DiffusionProcess::new(s.clone(), 1, 1, 4, 4).unwrap();
        let uncond_proc = DiffusionProcess::new(s, 1, 0, 4, 4).unwrap();
        let model = FixedPredictor(Tensor::<f32>::zeros(&[1, 1, 4, 4]));
        let cond = Tensor::<f32>::zeros(&[1, 1, 4, 4]);
        assert!(cond_proc.sample(&model, 1, None, 1).is_err());
        assert!(uncond_proc.sample(&model, 1, Some(&cond), 1).is_err());
    }

    #[test]
    fn model_range_round_trip() {
        let x = Tensor::new(vec![4], vec![0.0, 0.25, 0.5, 1.0]).unwrap();
        let back = from_model_range(&to_model_range(&x));
        for (a, b) in x.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-7);
        }
        // out-of-range model values clip into [0,1]
        let wild = Tensor::new(vec![2], vec![-3.0, 3.0]).unwrap();
        assert_eq!(from_model_range(&wild).data(), &[0.0, 1.0]);
    }

    #[test]
    fn q_sample_monte_carlo_mean_and_variance() {
        let p = proc(100);
        for t in [1usize, 50, 100] {
            let bar = p.schedule().alpha_bar(t).unwrap();
            let mut stream = Stream::derive(40 + t as u64, &[0]);
            let n = 100_000;
            let x0v = 0.7f32;
            let x0 = Tensor::<f32>::full(&[1, 1, 1, 1], x0v);
            let mut sum = 0.0f64;
            let mut sum_sq = 0.0f64;
            for _ in 0..n {
                let eps = Tensor::<f32>::full(&[1, 1, 1, 1], stream.normal_f32());
                let y = p.q_sample(&x0, t, &eps).unwrap().data()[0] as f64;
                sum += y;
                sum_sq += y * y;
            }
            let mean = sum / n as f64;
            let var = sum_sq / n as f64 - mean * mean;
            let want_mean = bar.sqrt() * x0v as f64;
            let want_var = 1.0 - bar;
            assert!(
                (mean - want_mean).abs() < 0.02 * want_mean.abs().max(1.0),
                "t={t}: mean {mean} vs {want_mean}"
            );
            assert!(
                (var / want_var - 1.0).abs() < 0.02,
                "t={t}: var {var} vs {want_var}"
            );
        }
    }
}
