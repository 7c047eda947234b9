//! Error maps, the uncertainty network, and the Laplacian uncertainty loss.

use rand::Rng;

use crate::diffcore::{Graph, Reduce, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv, InitKind, ParamSet};

/// Bounds applied to the log-uncertainty `τ`.
pub const TAU_CLAMP: f64 = 8.0;

/// Output gain of the `τ` head. Lets the head cover the clamp range within a
/// short training budget.
pub const TAU_GAIN: f64 = 20.0;

/// `τ` of a zero-initialised head, so training starts at `σ ≈ 0.01`, below the
/// error scale. Starting above it puts the histogram loss on the wrong side of
/// a barrier: values far above every bin center all get uniform mass.
pub const TAU_INIT: f64 = -4.6;

/// Output scale of the predicted-error head: `ε̂ = ERROR_SCALE · softplus(·)`.
pub const ERROR_SCALE: f64 = 0.1;

/// Non-negative per-pixel L1 error, one value per pixel.
#[derive(Clone, Copy, Debug)]
pub struct ErrorMap(Var);

impl ErrorMap {
    /// Wrap an existing node, checking that every entry is non-negative.
    pub fn from_var(g: &Graph, v: Var) -> Result<Self> {
        if g.value(v).data().iter().any(|&x| x < 0.0 || !x.is_finite()) {
            return Err(Error::Domain("error map entries must be finite and non-negative".into()));
        }
        Ok(ErrorMap(v))
    }

    pub fn var(self) -> Var {
        self.0
    }

    /// Flatten and concatenate several maps into one pixel population.
    pub fn pool(g: &Graph, maps: &[ErrorMap]) -> Result<ErrorMap> {
        let flat: Vec<Var> = maps
            .iter()
            .map(|m| {
                let n = g.value(m.0).len();
                g.reshape(m.0, &[n])
            })
            .collect::<Result<_>>()?;
        Ok(ErrorMap(g.concat(&flat, 0)?))
    }
}

/// `ε_i = mean_c |generated − truth|` for `[C,H,W]` images, giving `[H,W]`.
pub fn error_map(g: &Graph, generated: Var, truth: Var) -> Result<ErrorMap> {
    let (sg, st) = (g.shape(generated), g.shape(truth));
    if sg != st || sg.len() != 3 {
        return Err(Error::shape(format!("error_map needs equal [C,H,W] shapes, got {sg:?} and {st:?}")));
    }
    let diff = g.abs(g.sub(generated, truth)?);
    Ok(ErrorMap(g.reduce(Reduce::Mean, diff, Some(0))?))
}

/// Predicted error map `ε̂` and log-uncertainty map `τ`, both `[H,W]`.
#[derive(Clone, Copy, Debug)]
pub struct UncertaintyOutput {
    pub predicted_error: Var,
    pub log_uncertainty: Var,
}

impl UncertaintyOutput {
    /// `σ = exp(τ)`.
    pub fn sigma(&self, g: &Graph) -> Var {
        g.exp(self.log_uncertainty)
    }
}

/// Two 3×3 convolutions over concatenated `(generated, source)` channels, then
/// separate per-pixel error and log-uncertainty heads.
#[derive(Clone, Debug)]
pub struct UncertaintyNet {
    hidden: [Conv; 2],
    error_head: Conv,
    tau_head: Conv,
    image_channels: usize,
}

impl UncertaintyNet {
    pub fn new(ps: &mut ParamSet, prefix: &str, image_channels: usize, width: usize, rng: &mut impl Rng) -> Self {
        let c_in = 2 * image_channels;
        let hidden = [
            Conv::new(ps, &format!("{prefix}.hidden0"), c_in, width, 3, 1, InitKind::He, rng),
            Conv::new(ps, &format!("{prefix}.hidden1"), width, width, 3, 1, InitKind::He, rng),
        ];
        let error_head = Conv::new(ps, &format!("{prefix}.error_head"), width, 1, 1, 1, InitKind::Zero, rng);
        let tau_head = Conv::new(ps, &format!("{prefix}.tau_head"), width, 1, 1, 1, InitKind::Zero, rng);
        UncertaintyNet { hidden, error_head, tau_head, image_channels }
    }

    pub fn image_channels(&self) -> usize {
        self.image_channels
    }
}

/// Run the uncertainty network on one `[C,H,W]` generated/source pair.
pub fn uncert_forward(
    g: &Graph,
    net: &UncertaintyNet,
    params: &Bound,
    generated: Var,
    source: Var,
) -> Result<UncertaintyOutput> {
    let (sg, ss) = (g.shape(generated), g.shape(source));
    if sg != ss || sg.len() != 3 || sg[0] != net.image_channels {
        return Err(Error::shape(format!(
            "uncertainty net expects two [{},H,W] images, got {sg:?} and {ss:?}",
            net.image_channels
        )));
    }
    let (h, w) = (sg[1], sg[2]);
    let mut x = g.concat(&[generated, source], 0)?;
    for layer in &net.hidden {
        x = g.silu(layer.forward(g, params, x)?);
    }
    let err = net.error_head.forward(g, params, x)?;
    let predicted_error = g.reshape(g.scale(g.softplus(err), ERROR_SCALE), &[h, w])?;
    let tau = net.tau_head.forward(g, params, x)?;
    let tau = g.shift(g.scale(tau, TAU_GAIN), TAU_INIT);
    let log_uncertainty = g.reshape(g.clamp(tau, -TAU_CLAMP, TAU_CLAMP), &[h, w])?;
    Ok(UncertaintyOutput { predicted_error, log_uncertainty })
}

/// `(1/n)Σ ε_i / exp(τ_i) + (1/n)Σ τ_i`, differentiable in both `ε` and `τ`.
pub fn loss_un1(g: &Graph, eps: ErrorMap, tau: Var) -> Result<Var> {
    let (se, st) = (g.shape(eps.0), g.shape(tau));
    if se != st {
        return Err(Error::shape(format!("loss_un1 shapes {se:?} vs {st:?}")));
    }
    let weighted = g.mul(eps.0, g.exp(g.neg(tau)))?;
    g.add(g.mean(weighted), g.mean(tau))
}

/// `mean |ε̂ − ε|` with `ε` treated as a constant target.
pub fn predicted_error_loss(g: &Graph, eps_hat: Var, eps: ErrorMap) -> Result<Var> {
    let (sh, se) = (g.shape(eps_hat), g.shape(eps.0));
    if sh != se {
        return Err(Error::shape(format!("predicted_error_loss shapes {sh:?} vs {se:?}")));
    }
    let target = g.detach(eps.0);
    Ok(g.mean(g.abs(g.sub(eps_hat, target)?)))
}
