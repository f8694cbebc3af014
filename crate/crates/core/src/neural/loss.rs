//! The three-level training objective: cross-entropy plus a penalty on
//! probability mass assigned outside the legal production set.

use super::NeuralError;

/// Mass floor inside the penalty log. The penalty is −ln(max(mass, ε)): zero
/// when every bit of mass is legal, bounded when none is, and nonnegative
/// either way.
pub const MASS_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    /// −ln ŷ[p_true], nats.
    pub l_xe: f64,
    /// −ln(legal mass), nats; reported even when the penalty term is off.
    pub l_c: f64,
    /// l_xe, plus λ·l_c when the three-level term is on.
    pub total: f64,
    pub correct_mass: f64,
    pub legal_mass: f64,
    pub illegal_mass: f64,
}

/// `legal` marks P_c as a mask over the full production axis; `p_true` must
/// be legal.
pub fn three_level_loss(
    dist: &[f64],
    p_true: usize,
    legal: &[bool],
    lambda: f64,
    enabled: bool,
) -> Result<LossReport, NeuralError> {
    if legal.len() != dist.len() {
        return Err(NeuralError::ShapeMismatch(format!(
            "legal mask of {} over a distribution of {}",
            legal.len(),
            dist.len()
        )));
    }
    if p_true >= dist.len() || !legal[p_true] {
        return Err(NeuralError::IllegalTruth(format!(
            "true production {p_true} is not in the legal set"
        )));
    }
    let correct_mass = dist[p_true];
    let legal_mass: f64 =
        dist.iter().zip(legal).filter_map(|(&p, &ok)| ok.then_some(p)).sum();
    let l_xe = -correct_mass.max(MASS_FLOOR).ln();
    // fp summation can nudge the legal mass a hair past 1; the penalty is
    // nonnegative by definition
    let l_c = -legal_mass.max(MASS_FLOOR).ln().min(0.0);
    let total = if enabled { l_xe + lambda * l_c } else { l_xe };
    Ok(LossReport {
        l_xe,
        l_c,
        total,
        correct_mass,
        legal_mass,
        illegal_mass: (1.0 - legal_mass).max(0.0),
    })
}

/// ∂total/∂logits for a softmax distribution, unscaled.
///
/// Cross-entropy part: ŷ − 1[p_true]. Penalty part (when on and unclamped):
/// λ·ŷ_j·(1 − [j ∈ P_c]/m) with m the legal mass; zero in the clamped
/// region, matching the flat spot of −ln(max(m, ε)).
pub fn loss_grad_logits(
    dist: &[f64],
    p_true: usize,
    legal: &[bool],
    lambda: f64,
    enabled: bool,
) -> Vec<f64> {
    let mut grad: Vec<f64> = dist.to_vec();
    grad[p_true] -= 1.0;
    if enabled {
        let m: f64 = dist.iter().zip(legal).filter_map(|(&p, &ok)| ok.then_some(p)).sum();
        if m >= MASS_FLOOR && m < 1.0 {
            for ((g, &y), &ok) in grad.iter_mut().zip(dist).zip(legal) {
                let member = if ok { 1.0 / m } else { 0.0 };
                *g += lambda * y * (1.0 - member);
            }
        }
    }
    grad
}
