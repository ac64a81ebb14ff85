//! Bound-preservation losses, loss weighting and the ε ramp.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interval::{BoundVars, IntervalTensor};
use crate::tensor::{Tape, Tensor, Var};

/// Cross-entropy and the two bound losses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTriple {
    pub l_ce: f64,
    pub l_lb: f64,
    pub l_ub: f64,
}

impl LossTriple {
    pub fn new(l_ce: f64, l_lb: f64, l_ub: f64) -> Result<Self> {
        let t = LossTriple { l_ce, l_lb, l_ub };
        if !t.as_array().iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("loss triple {t:?}")));
        }
        if l_lb < 0.0 || l_ub < 0.0 {
            return Err(Error::invalid(format!("bound losses must be non-negative, got {l_lb}, {l_ub}")));
        }
        Ok(t)
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.l_ce, self.l_lb, self.l_ub]
    }
}

/// How the three losses are weighted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum WeightMode {
    Dynamic { gamma: f64 },
    Static { weights: [f64; 3] },
}

impl WeightMode {
    pub fn weights(&self, losses: &LossTriple) -> Result<WeightTriple> {
        match *self {
            WeightMode::Dynamic { gamma } => dynamic_weights(losses, gamma),
            WeightMode::Static { weights } => WeightTriple::fixed(weights),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightTriple {
    pub w_ce: f64,
    pub w_lb: f64,
    pub w_ub: f64,
}

const SIMPLEX_TOL: f64 = 1e-9;

impl WeightTriple {
    /// Static weights; they must be non-negative and sum to one.
    pub fn fixed(w: [f64; 3]) -> Result<Self> {
        let t = WeightTriple {
            w_ce: w[0],
            w_lb: w[1],
            w_ub: w[2],
        };
        t.check()?;
        Ok(t)
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.w_ce, self.w_lb, self.w_ub]
    }

    fn check(&self) -> Result<()> {
        let w = self.as_array();
        let sum: f64 = w.iter().sum();
        if w.iter().any(|v| !v.is_finite() || *v < -SIMPLEX_TOL) || (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::invalid(format!("weights {w:?} are not on the probability simplex")));
        }
        Ok(())
    }
}

/// Mean over instances of `‖f(x) − lower‖²` and `‖f(x) − upper‖²`.
pub fn bound_losses(centers: &[Tensor], boxes: &[IntervalTensor]) -> Result<(f64, f64)> {
    if centers.len() != boxes.len() {
        return Err(Error::invalid(format!(
            "{} centers but {} boxes",
            centers.len(),
            boxes.len()
        )));
    }
    if centers.is_empty() {
        return Err(Error::invalid("bound losses need at least one query instance"));
    }
    let sq = |a: &Tensor, b: &Tensor| -> Result<f64> {
        if a.shape() != b.shape() {
            return Err(Error::shape("bound loss", a.shape(), b.shape()));
        }
        Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum())
    };
    let (mut lb, mut ub) = (0.0, 0.0);
    for (c, b) in centers.iter().zip(boxes) {
        lb += sq(c, b.lower())?;
        ub += sq(c, b.upper())?;
    }
    let n = centers.len() as f64;
    Ok((lb / n, ub / n))
}

fn mean_sq_distance_on(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let n = tape.shape(a).first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::invalid("bound losses need at least one query instance"));
    }
    let d = tape.sub(a, b)?;
    let s = tape.square(d)?;
    let s = tape.sum(s)?;
    tape.scale(s, 1.0 / n as f64)
}

/// Tape version of [`bound_losses`] over batched query bounds.
pub fn bound_losses_on(tape: &mut Tape, bounds: BoundVars) -> Result<(Var, Var)> {
    Ok((
        mean_sq_distance_on(tape, bounds.center, bounds.lower)?,
        mean_sq_distance_on(tape, bounds.center, bounds.upper)?,
    ))
}

/// `softmax(L / γ)` with max shift.
pub fn dynamic_weights(losses: &LossTriple, gamma: f64) -> Result<WeightTriple> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::invalid(format!("gamma must be positive, got {gamma}")));
    }
    let l = losses.as_array();
    let top = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = l.map(|v| ((v - top) / gamma).exp());
    let s: f64 = e.iter().sum();
    if !s.is_finite() || s <= 0.0 {
        return Err(Error::NonFinite(format!("dynamic weights for {l:?}")));
    }
    Ok(WeightTriple {
        w_ce: e[0] / s,
        w_lb: e[1] / s,
        w_ub: e[2] / s,
    })
}

/// `w_CE L_CE + w_LB L_LB + w_UB L_UB`.
pub fn total_loss(losses: &LossTriple, weights: &WeightTriple) -> Result<f64> {
    weights.check()?;
    let v = weights.w_ce * losses.l_ce + weights.w_lb * losses.l_lb + weights.w_ub * losses.l_ub;
    if !v.is_finite() {
        return Err(Error::NonFinite("total loss".into()));
    }
    Ok(v)
}

/// Tape handles of the three losses.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub ce: Var,
    pub lb: Option<Var>,
    pub ub: Option<Var>,
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> Result<LossTriple> {
        let get = |v: Option<Var>| v.map(|v| tape.value(v).item()).transpose().map(|o| o.unwrap_or(0.0));
        LossTriple::new(tape.value(self.ce).item()?, get(self.lb)?, get(self.ub)?)
    }
}

/// Weighted total on the tape; the weights enter as constants so no
/// gradient flows through their computation.
pub fn total_loss_on(tape: &mut Tape, losses: LossVars, weights: &WeightTriple) -> Result<Var> {
    weights.check()?;
    let mut total = tape.scale(losses.ce, weights.w_ce)?;
    for (v, w) in [(losses.lb, weights.w_lb), (losses.ub, weights.w_ub)] {
        if let Some(v) = v {
            let term = tape.scale(v, w)?;
            total = tape.add(total, term)?;
        }
    }
    Ok(total)
}

/// Linear ramp from 0 reaching `ε` at 90% of training, flat afterwards.
pub fn epsilon_schedule(t: usize, total_steps: usize, epsilon: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::invalid("epsilon schedule needs at least one step"));
    }
    if t > total_steps {
        return Err(Error::invalid(format!("step {t} beyond schedule length {total_steps}")));
    }
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(Error::invalid(format!("epsilon must be finite and non-negative, got {epsilon}")));
    }
    let knee = (9 * total_steps).div_ceil(10);
    if t > knee {
        return Ok(epsilon);
    }
    let ramp = (10 * t) as f64 / (9 * total_steps) as f64 * epsilon;
    Ok(ramp.min(epsilon))
}
