//! Finite-difference gradient checking (f64 only; central differences are
//! not trustworthy in f32).

use super::{Tape, Tensor, VarId};
use crate::error::Result;

/// Compare reverse-mode gradients of `f` at `x` against central finite
/// differences. Returns the maximum relative error
/// `|autodiff - numeric| / max(|numeric|, 1e-8)` over all elements.
///
/// `f` must be pure: same input, same scalar output, every call.
pub fn grad_check<F>(f: F, x: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, VarId) -> Result<VarId>,
{
    // reverse-mode gradient
    let mut tape = Tape::new();
    let xid = tape.leaf(x, true);
    let out = f(&mut tape, xid)?;
    tape.backward(out)?;
    let ad: Vec<f64> = tape
        .grad(xid)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |t: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let id = tape.leaf(t, false);
        let out = f(&mut tape, id)?;
        Ok(tape.value(out)[0])
    };

    let mut max_rel = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let v = x.data()[i];
        let h = 1e-5 * (1.0 + v.abs());
        probe.data_mut()[i] = v + h;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = v - h;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = v;
        let numeric = (fp - fm) / (2.0 * h);
        let rel = (ad[i] - numeric).abs() / numeric.abs().max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    #[test]
    fn linear_functional_is_exact() {
        let x = Tensor::new(vec![5], vec![0.3, -1.2, 2.0, 0.0, 4.5]).unwrap();
        let err = grad_check(|t, x| Ok(t.sum_all(x)), &x).unwrap();
        assert!(err <= 1e-10, "err = {err}");
    }

    #[test]
    fn elementwise_chain_checks_out() {
        let mut stream = Stream::derive(1, &[0]);
        let x = Tensor::<f64>::randn(&[3, 4], &mut stream);
        let err = grad_check(
            |t, x| {
                let a = t.gelu(x);
                let b = t.silu(a);
                let c = t.square(b);
                Ok(t.mean_all(c))
            },
            &x,
        )
        .unwrap();
        assert!(err <= 1e-6, "err = {err}");
    }

    #[test]
    fn three_layer_conv_norm_linear_net() {
        let mut stream = Stream::derive(8, &[3]);
        let x = Tensor::<f64>::randn(&[2, 2, 6, 6], &mut stream);
        let w1 = Tensor::<f64>::rand_uniform(&[4, 2, 3, 3], -0.4, 0.4, &mut stream);
        let b1 = Tensor::<f64>::rand_uniform(&[4], -0.1, 0.1, &mut stream);
        let gamma = Tensor::<f64>::rand_uniform(&[4], 0.5, 1.5, &mut stream);
        let beta = Tensor::<f64>::rand_uniform(&[4], -0.2, 0.2, &mut stream);
        let w2 = Tensor::<f64>::rand_uniform(&[4 * 36, 3], -0.1, 0.1, &mut stream);
        let b2 = Tensor::<f64>::rand_uniform(&[3], -0.1, 0.1, &mut stream);
        let err = grad_check(
            |t, x| {
                let w1 = t.leaf(&w1, false);
                let b1 = t.leaf(&b1, false);
                let g1 = t.leaf(&gamma, false);
                let be1 = t.leaf(&beta, false);
                let w2 = t.leaf(&w2, false);
                let b2 = t.leaf(&b2, false);
                let c = t.conv2d(x, w1, Some(b1), 1, 1)?;
                let n = t.group_norm(c, 2, g1, be1, 1e-5)?;
                let a = t.gelu(n);
                let flat = t.reshape(a, &[2, 4 * 36])?;
                let y = t.linear(flat, w2, b2)?;
                let sq = t.square(y);
                Ok(t.mean_all(sq))
            },
            &x,
        )
        .unwrap();
        assert!(err <= 1e-4, "err = {err}");
    }
}
