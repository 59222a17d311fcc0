//! Classification, reconstruction and decoder-discrepancy losses.

use serde::{Deserialize, Serialize};

use crate::element::Element;
use crate::error::{Error, Result};
use crate::model::TrainForwardOutput;
use crate::tensor::Tensor;

/// Stabilizer inside every Frobenius norm: `sqrt(sum(x^2) + EPS)`.
pub const FROBENIUS_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight of the high-level (KL) discrepancy term.
    pub alpha: f64,
    /// Weight of the low-level (feature) discrepancy term.
    pub beta: f64,
    pub lambda_flow: f64,
    pub lambda_im: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            beta: 0.1,
            lambda_flow: 0.1,
            lambda_im: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda_flow", self.lambda_flow),
            ("lambda_im", self.lambda_im),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("weights.{name}"), format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Which decoder-discrepancy terms are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DdpMode {
    Off,
    Low,
    High,
    #[default]
    Both,
}

impl DdpMode {
    pub fn low(self) -> bool {
        matches!(self, DdpMode::Low | DdpMode::Both)
    }

    pub fn high(self) -> bool {
        matches!(self, DdpMode::High | DdpMode::Both)
    }

    pub fn name(self) -> &'static str {
        match self {
            DdpMode::Off => "off",
            DdpMode::Low => "low",
            DdpMode::High => "high",
            DdpMode::Both => "both",
        }
    }
}

impl std::str::FromStr for DdpMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(DdpMode::Off),
            "low" => Ok(DdpMode::Low),
            "high" => Ok(DdpMode::High),
            "both" => Ok(DdpMode::Both),
            other => Err(Error::input(format!("unknown ddp mode {other:?} (off, low, high, both)"))),
        }
    }
}

/// Scalar values of every term plus the weights that combined them.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub ddp_high: f64,
    pub ddp_low: f64,
    pub flow: f64,
    pub recon: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    /// `ce + alpha ddp_high + beta ddp_low + lambda_flow flow + lambda_im recon`.
    pub fn recomposed(&self) -> f64 {
        let w = &self.weights;
        self.ce + w.alpha * self.ddp_high + w.beta * self.ddp_low + w.lambda_flow * self.flow + w.lambda_im * self.recon
    }

    /// Checks that `total` matches the weighted components. The tolerance is
    /// relative to `|total|` to absorb single-precision accumulation.
    pub fn check_total(&self, tol: f64) -> Result<()> {
        let diff = (self.total - self.recomposed()).abs();
        if diff > tol * self.total.abs().max(1.0) {
            return Err(Error::Data(format!(
                "loss total {} differs from weighted components {} by {diff}",
                self.total,
                self.recomposed()
            )));
        }
        Ok(())
    }
}

fn to_scalar<T: Element>(t: &Tensor<T>) -> Result<Tensor<T>> {
    t.reshape(&[1])
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let d = logits.dims();
    if d.len() != 2 || d[0] != labels.len() {
        return Err(Error::shape(format!("logits {d:?} vs {} labels", labels.len())));
    }
    let k = d[1];
    let mut mask = vec![T::zero(); d[0] * k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::input(format!("label {l} out of range for {k} classes")));
        }
        mask[i * k + l] = T::one();
    }
    let mask = Tensor::from_vec(d, mask)?;
    to_scalar(&logits.log_softmax()?.mul(&mask)?.sum()?.scale(-1.0 / d[0] as f64)?)
}

/// Sum over layers of the Frobenius norm of the feature difference.
pub fn ddp_low<T: Element>(f1: &[Tensor<T>], f2: &[Tensor<T>]) -> Result<Tensor<T>> {
    if f1.len() != f2.len() || f1.is_empty() {
        return Err(Error::shape(format!(
            "ddp_low needs matching non-empty layer lists, got {} and {}",
            f1.len(),
            f2.len()
        )));
    }
    let mut total: Option<Tensor<T>> = None;
    for (a, b) in f1.iter().zip(f2) {
        if a.dims() != b.dims() {
            return Err(Error::shape(format!("ddp_low layer shapes {:?} vs {:?}", a.dims(), b.dims())));
        }
        let n = a.sub(b)?.frobenius(FROBENIUS_EPS)?;
        total = Some(match total {
            Some(t) => t.add(&n)?,
            None => n,
        });
    }
    to_scalar(&total.expect("non-empty"))
}

/// `KL(N(mu1, sigma1) || N(mu2, sigma2))` for diagonal gaussians `[N, d]`,
/// summed over dimensions and averaged over the batch.
pub fn ddp_high<T: Element>(
    mu1: &Tensor<T>,
    sigma1: &Tensor<T>,
    mu2: &Tensor<T>,
    sigma2: &Tensor<T>,
) -> Result<Tensor<T>> {
    let d = mu1.dims();
    if d.len() != 2 || [sigma1.dims(), mu2.dims(), sigma2.dims()].iter().any(|x| *x != d) {
        return Err(Error::shape(format!(
            "ddp_high shapes {:?} {:?} {:?} {:?}",
            d,
            sigma1.dims(),
            mu2.dims(),
            sigma2.dims()
        )));
    }
    for s in [sigma1, sigma2] {
        if let Some(v) = s.data().iter().find(|v| !(**v > T::zero())) {
            return Err(Error::input(format!("sigma must be positive, got {v}")));
        }
    }
    let var1 = sigma1.mul(sigma1)?;
    let var2 = sigma2.mul(sigma2)?;
    let dmu = mu1.sub(mu2)?;
    let log_ratio = sigma2.ln()?.sub(&sigma1.ln()?)?;
    let quad = var1.add(&dmu.mul(&dmu)?)?.div(&var2.scale(2.0)?)?;
    let kl = log_ratio.add(&quad)?.add_scalar(-0.5)?;
    to_scalar(&kl.sum()?.scale(1.0 / d[0] as f64)?)
}

/// Frobenius norm of `pred - target` over the whole batch tensor, divided by
/// the batch size (leading extent).
pub fn frob_loss<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    if pred.dims() != target.dims() {
        return Err(Error::shape(format!("frob_loss shapes {:?} vs {:?}", pred.dims(), target.dims())));
    }
    let n = pred.dims()[0];
    to_scalar(&pred.sub(target)?.frobenius(FROBENIUS_EPS)?.scale(1.0 / n as f64)?)
}

/// Scalar loss terms as differentiable tensors. Absent terms contribute 0.
#[derive(Debug, Clone, Default)]
pub struct LossTerms<T: Element> {
    pub ce: Option<Tensor<T>>,
    pub ddp_high: Option<Tensor<T>>,
    pub ddp_low: Option<Tensor<T>>,
    pub flow: Option<Tensor<T>>,
    pub recon: Option<Tensor<T>>,
}

/// Weighted sum of the present terms. Returns the differentiable total and
/// the scalar breakdown.
pub fn combine<T: Element>(terms: &LossTerms<T>, weights: &LossWeights) -> Result<(Tensor<T>, LossBreakdown)> {
    weights.validate()?;
    let ce = terms
        .ce
        .as_ref()
        .ok_or_else(|| Error::input("the classification term is always required"))?;
    let mut total = to_scalar(ce)?;
    let mut out = LossBreakdown {
        ce: ce.item()?.f64(),
        weights: *weights,
        ..Default::default()
    };
    for (term, w, slot) in [
        (&terms.ddp_high, weights.alpha, &mut out.ddp_high),
        (&terms.ddp_low, weights.beta, &mut out.ddp_low),
        (&terms.flow, weights.lambda_flow, &mut out.flow),
        (&terms.recon, weights.lambda_im, &mut out.recon),
    ] {
        if let Some(t) = term {
            *slot = t.item()?.f64();
            total = total.add(&to_scalar(t)?.scale(w)?)?;
        }
    }
    out.total = total.item()?.f64();
    Ok((total, out))
}

/// Targets for one batch. Flow and reconstruction targets are required
/// exactly when the corresponding decoder output is present.
#[derive(Debug, Clone, Copy)]
pub struct LossTargets<'a, T: Element> {
    pub labels: &'a [usize],
    /// `[N, T-1, 2, H, W]`.
    pub flows: Option<&'a Tensor<T>>,
    /// `[N, T, 3, H, W]`: the clip frames in reverse order.
    pub reversed_frames: Option<&'a Tensor<T>>,
}

/// Assembles every applicable term for a forward pass. Discrepancy terms
/// need both decoders and are gated by `mode`; gated terms are never
/// evaluated and report exactly 0.
pub fn total_loss<T: Element>(
    out: &TrainForwardOutput<T>,
    targets: &LossTargets<'_, T>,
    weights: &LossWeights,
    mode: DdpMode,
) -> Result<(Tensor<T>, LossBreakdown)> {
    let mut terms = LossTerms {
        ce: Some(cross_entropy(&out.logits, targets.labels)?),
        ..Default::default()
    };
    if let Some(pred) = &out.flows {
        let target = targets
            .flows
            .ok_or_else(|| Error::Data("flow decoder output has no flow target".into()))?;
        terms.flow = Some(frob_loss(pred, target)?);
    }
    if let Some(pred) = &out.recon {
        let target = targets
            .reversed_frames
            .ok_or_else(|| Error::Data("frame decoder output has no frame target".into()))?;
        terms.recon = Some(frob_loss(pred, target)?);
    }
    let both = out.flows.is_some() && out.recon.is_some();
    if both && mode.low() {
        terms.ddp_low = Some(ddp_low(&out.flow_features, &out.frame_features)?);
    }
    if both && mode.high() {
        let get = |t: &Option<Tensor<T>>| t.clone().ok_or_else(|| Error::input("missing gaussian head output"));
        terms.ddp_high = Some(ddp_high(&get(&out.mu1)?, &get(&out.sigma1)?, &get(&out.mu2)?, &get(&out.sigma2)?)?);
    }
    combine(&terms, weights)
}
