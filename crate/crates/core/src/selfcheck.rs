//! Finite-difference gradient checks over every differentiable op, layer and
//! loss term, plus the full training loss of a micro model.

use serde::Serialize;

use crate::element::Element;
use crate::error::Result;
use crate::loss::{cross_entropy, ddp_high, ddp_low, frob_loss, total_loss, LossTargets};
use crate::model::{ForwardOptions, Rev2Net, Rev2NetConfig};
use crate::nn::{conv3d, conv_transpose3d, dense, pool3d, ConvSpec, ParamSet, PoolKind};
use crate::seed::child_seed;
use crate::tensor::{finite_diff_check, Init, ReduceOp, Tape, Tensor};

/// Step and pass threshold for one precision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CheckSettings {
    pub step: f64,
    pub tolerance: f64,
}

impl CheckSettings {
    pub const F64: CheckSettings = CheckSettings { step: 1e-5, tolerance: 1e-4 };
    /// Coarse: with single-precision rounding the step cannot be small, so an
    /// input within a step of a relu or max kink can still exceed the bound.
    pub const F32: CheckSettings = CheckSettings { step: 1e-3, tolerance: 1e-2 };
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub name: String,
    pub max_rel_error: f64,
}

impl CheckRow {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

type Fx<'a, T> = Box<dyn Fn(&Tensor<T>) -> Result<Tensor<T>> + 'a>;

struct Suite<T: Element> {
    seed: u64,
    step: f64,
    rows: Vec<CheckRow>,
    _t: std::marker::PhantomData<T>,
}

impl<T: Element> Suite<T> {
    fn gauss(&self, tag: &str, dims: &[usize], std: f64) -> Result<Tensor<T>> {
        Tensor::create(dims, Init::Gaussian { mean: 0.0, std, seed: child_seed(self.seed, tag) })
    }

    fn uniform(&self, tag: &str, dims: &[usize], lo: f64, hi: f64) -> Result<Tensor<T>> {
        Tensor::create(dims, Init::Uniform { lo, hi, seed: child_seed(self.seed, tag) })
    }

    /// Projects a tensor-valued function to a scalar with fixed random
    /// weights so that every output element contributes.
    fn project<'a>(&self, name: &str, f: Fx<'a, T>, out_dims: &[usize]) -> Result<Fx<'a, T>> {
        let r = self.gauss(&format!("{name}/projection"), out_dims, 1.0)?;
        Ok(Box::new(move |x| f(x)?.mul(&r)?.sum()))
    }

    /// Checks `f` with respect to each argument in turn, all others held at
    /// their base values, and records the worst error.
    fn check(&mut self, name: &str, args: &[Tensor<T>], f: impl Fn(&[Tensor<T>]) -> Result<Tensor<T>>) -> Result<()> {
        let out_dims = f(args)?.dims().to_vec();
        let mut worst = 0.0f64;
        for i in 0..args.len() {
            let partial: Fx<'_, T> = Box::new(|x: &Tensor<T>| {
                let mut a = args.to_vec();
                a[i] = x.clone();
                f(&a)
            });
            let g = if out_dims == [1] { partial } else { self.project(name, partial, &out_dims)? };
            worst = worst.max(finite_diff_check(g, &args[i], self.step)?);
        }
        self.rows.push(CheckRow { name: name.to_string(), max_rel_error: worst });
        Ok(())
    }
}

/// Runs the whole suite at precision `T`. Inputs are drawn from streams
/// derived from `seed`.
pub fn gradient_suite<T: Element>(seed: u64, settings: CheckSettings) -> Result<Vec<CheckRow>> {
    let mut s = Suite::<T> { seed, step: settings.step, rows: Vec::new(), _t: std::marker::PhantomData };
    let a = s.gauss("a", &[2, 3], 1.0)?;
    let b = s.gauss("b", &[2, 3], 1.0)?;
    let pos = s.uniform("pos", &[2, 3], 0.5, 2.0)?;

    s.check("add", &[a.clone(), b.clone()], |v| v[0].add(&v[1]))?;
    s.check("sub", &[a.clone(), b.clone()], |v| v[0].sub(&v[1]))?;
    s.check("mul", &[a.clone(), b.clone()], |v| v[0].mul(&v[1]))?;
    s.check("div", &[a.clone(), pos.clone()], |v| v[0].div(&v[1]))?;
    s.check("scale", std::slice::from_ref(&a), |v| v[0].scale(-2.5))?;
    s.check("add_scalar", std::slice::from_ref(&a), |v| v[0].add_scalar(0.7))?;
    s.check("negate", std::slice::from_ref(&a), |v| v[0].neg())?;
    s.check("relu", std::slice::from_ref(&a), |v| v[0].relu())?;
    s.check("sqrt_eps", std::slice::from_ref(&pos), |v| v[0].sqrt_eps(1e-8))?;
    s.check("exp", std::slice::from_ref(&a), |v| v[0].exp())?;
    s.check("ln", std::slice::from_ref(&pos), |v| v[0].ln())?;
    s.check("softplus", std::slice::from_ref(&a), |v| v[0].softplus())?;

    let c = s.gauss("c", &[2, 3, 4], 1.0)?;
    s.check("reduce/sum", std::slice::from_ref(&c), |v| v[0].reduce(ReduceOp::Sum, Some(&[0, 2])))?;
    s.check("reduce/mean", std::slice::from_ref(&c), |v| v[0].reduce(ReduceOp::Mean, Some(&[1])))?;
    s.check("reduce/max", std::slice::from_ref(&c), |v| v[0].reduce(ReduceOp::Max, Some(&[2])))?;
    s.check("reshape", std::slice::from_ref(&c), |v| v[0].reshape(&[6, 4]))?;
    s.check("transpose", std::slice::from_ref(&c), |v| v[0].transpose(&[2, 0, 1]))?;
    s.check("reverse", std::slice::from_ref(&c), |v| v[0].reverse(1))?;
    s.check("concat", &[c.clone(), s.gauss("c2", &[2, 1, 4], 1.0)?], |v| Tensor::concat(&[&v[0], &v[1]], 1))?;
    s.check("broadcast_to", &[s.gauss("bc", &[2, 1, 4], 1.0)?], |v| v[0].broadcast_to(&[2, 3, 4]))?;
    s.check("matmul", &[a.clone(), s.gauss("m", &[3, 4], 1.0)?], |v| v[0].matmul(&v[1]))?;
    s.check("log_softmax", std::slice::from_ref(&a), |v| v[0].log_softmax())?;

    let x = s.gauss("x", &[2, 2, 4, 5, 5], 1.0)?;
    let spec = ConvSpec::new(2, 3, [3, 3, 2], [2, 1, 2], [1, 1, 0])?;
    s.check(
        "conv3d",
        &[x.clone(), s.gauss("cw", &spec.conv_weight_dims(), 0.3)?, s.gauss("cb", &[3], 0.3)?],
        |v| conv3d(&v[0], &v[1], &v[2], &spec),
    )?;
    let small = s.gauss("xs", &[2, 2, 2, 3, 3], 1.0)?;
    let tspec = ConvSpec::new(2, 3, [2, 3, 3], [1, 2, 2], [0, 1, 1])?;
    s.check(
        "conv_transpose3d",
        &[small, s.gauss("tw", &tspec.transposed_weight_dims(), 0.3)?, s.gauss("tb", &[3], 0.3)?],
        |v| conv_transpose3d(&v[0], &v[1], &v[2], &tspec),
    )?;
    s.check("pool3d/max", std::slice::from_ref(&x), |v| pool3d(&v[0], PoolKind::Max, [2, 2, 2], [2, 2, 2]))?;
    s.check("pool3d/avg", std::slice::from_ref(&x), |v| pool3d(&v[0], PoolKind::Avg, [2, 3, 3], [1, 2, 2]))?;
    s.check("dense", &[a.clone(), s.gauss("dw", &[3, 4], 0.5)?, s.gauss("db", &[4], 0.5)?], |v| {
        dense(&v[0], &v[1], &v[2])
    })?;

    let logits = s.gauss("logits", &[3, 6], 2.0)?;
    s.check("loss/cross_entropy", &[logits], |v| cross_entropy(&v[0], &[0, 5, 2]))?;
    let f1 = [s.gauss("f1a", &[2, 3], 1.0)?, s.gauss("f1b", &[4], 1.0)?];
    let f2 = [s.gauss("f2a", &[2, 3], 1.0)?, s.gauss("f2b", &[4], 1.0)?];
    s.check("loss/ddp_low", &[f1[0].clone(), f1[1].clone(), f2[0].clone(), f2[1].clone()], |v| {
        ddp_low(&v[0..2], &v[2..4])
    })?;
    let sig1 = s.uniform("s1", &[2, 3], 0.5, 1.5)?;
    let sig2 = s.uniform("s2", &[2, 3], 0.5, 1.5)?;
    s.check("loss/ddp_high", &[a.clone(), sig1, b.clone(), sig2], |v| ddp_high(&v[0], &v[1], &v[2], &v[3]))?;
    s.check("loss/frob_loss", &[a.clone(), b.clone()], |v| frob_loss(&v[0], &v[1]))?;

    for (layer, err) in micro_model_check::<T>(seed, settings.step)? {
        s.rows.push(CheckRow { name: format!("total_loss/{layer}"), max_rel_error: err });
    }
    Ok(s.rows)
}

/// The smallest geometry that exercises every layer of the full model.
pub fn micro_config() -> Rev2NetConfig {
    Rev2NetConfig {
        frames: 4,
        height: 8,
        width: 8,
        encoder_widths: [2, 2, 2, 2],
        latent_dim: 2,
        decoder_width: 2,
        frame_decoder_width: 2,
        ..Default::default()
    }
}

/// Per-layer max relative error of the full training loss gradient with
/// respect to every parameter of a one-clip micro model.
pub fn micro_model_check<T: Element>(seed: u64, step: f64) -> Result<Vec<(String, f64)>> {
    let config = micro_config();
    // Zero biases put units exactly on the relu kink wherever their input is
    // all zero, so the check runs from random biases instead.
    let built = Rev2Net::<T>::build(&config, seed)?;
    let params = built.params().map(|name, is_bias, t| {
        if !is_bias {
            return Ok(t.clone());
        }
        let seed = child_seed(seed, &format!("micro/bias/{name}"));
        Tensor::create(t.dims(), Init::Gaussian { mean: 0.0, std: 0.1, seed })
    })?;
    let model = Rev2Net::from_params(&config, params)?;
    let (t, h, w) = (config.frames, config.height, config.width);
    let init = |tag: &str, dims: &[usize], lo: f64, hi: f64| -> Result<Tensor<T>> {
        Tensor::create(dims, Init::Uniform { lo, hi, seed: child_seed(seed, tag) })
    };
    let x = init("micro/input", &[1, t, 3, h, w], 0.0, 1.0)?;
    let flows = init("micro/flows", &[1, t - 1, 2, h, w], -1.0, 1.0)?;
    let reversed = x.reverse(1)?;
    let labels = [3usize];
    let opts = ForwardOptions::seeded(child_seed(seed, "micro/noise"));
    let loss = |m: &Rev2Net<T>| -> Result<Tensor<T>> {
        let out = m.forward_train(&x, &opts)?;
        let targets = LossTargets { labels: &labels, flows: Some(&flows), reversed_frames: Some(&reversed) };
        Ok(total_loss(&out, &targets, &config.weights, config.ddp_mode)?.0)
    };
    param_gradcheck(&model, loss, step)
}

/// Compares tape gradients of `loss` with respect to every parameter of
/// `model` against central differences. Returns the max relative error per
/// layer, in name order.
pub fn param_gradcheck<T: Element>(
    model: &Rev2Net<T>,
    loss: impl Fn(&Rev2Net<T>) -> Result<Tensor<T>>,
    step: f64,
) -> Result<Vec<(String, f64)>> {
    let tape = Tape::new();
    let tracked = model.tracked(&tape);
    loss(&tracked)?.backward()?;
    let zero = |n: usize| vec![T::zero(); n];
    let mut analytic = Vec::new();
    for (name, p) in tracked.params().iter() {
        analytic.push((
            name.to_string(),
            p.weights.grad().unwrap_or_else(|| zero(p.weights.numel())),
            p.bias.grad().unwrap_or_else(|| zero(p.bias.numel())),
        ));
    }

    let base = model.params();
    let eval = |name: &str, bias: bool, i: usize, delta: f64| -> Result<(f64, f64)> {
        let mut moved = 0.0;
        let params: ParamSet<T> = base.map(|n, is_bias, t| {
            if n != name || is_bias != bias {
                return Ok(t.clone());
            }
            let mut d = t.to_vec();
            d[i] = T::of(d[i].f64() + delta);
            moved = d[i].f64();
            Tensor::from_vec(t.dims(), d)
        })?;
        let m = Rev2Net::from_params(model.config(), params)?;
        Ok((loss(&m)?.item()?.f64(), moved))
    };
    let mut rows = Vec::new();
    for (name, gw, gb) in &analytic {
        let mut worst = 0.0f64;
        for (bias, grads) in [(false, gw), (true, gb)] {
            for (i, g) in grads.iter().enumerate() {
                let (fp, xp) = eval(name, bias, i, step)?;
                let (fm, xm) = eval(name, bias, i, -step)?;
                let numeric = (fp - fm) / (xp - xm);
                let a = g.f64();
                worst = worst.max((a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs()));
            }
        }
        rows.push((name.clone(), worst));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn micro_config_builds_with_both_decoders() {
        let m = Rev2Net::<f64>::build(&micro_config(), 0).unwrap();
        assert!(m.config().has_both_decoders());
        assert!(m.num_params() < 2000);
    }
}
