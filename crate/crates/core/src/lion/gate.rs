/// Logit gap beyond which the gate is treated as saturated.
///
/// At a gap of 36 the minority coefficient is about `2.3e-16`, the smallest
/// magnitude for which `1 - β` is still strictly below 1 in `f64`. Clamping
/// there keeps both coefficients inside the open interval (0, 1).
pub const GATE_LOGIT_LIMIT: f64 = 36.0;

/// Two trainable logits producing a convex blending pair.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GatePair {
    pub g_alpha: f64,
    pub g_beta: f64,
}

impl GatePair {
    pub fn new(g_alpha: f64, g_beta: f64) -> Self {
        Self { g_alpha, g_beta }
    }

    /// Two-way softmax `(α, β)`. The smaller coefficient is evaluated directly
    /// and the larger as its complement, so `α + β == 1` holds exactly.
    pub fn coeffs(&self) -> (f64, f64) {
        let gap = (self.g_alpha - self.g_beta).clamp(-GATE_LOGIT_LIMIT, GATE_LOGIT_LIMIT);
        let e = (-gap.abs()).exp();
        let minority = e / (1.0 + e);
        if gap >= 0.0 {
            (1.0 - minority, minority)
        } else {
            (minority, 1.0 - minority)
        }
    }

    /// Pulls `(∂L/∂α, ∂L/∂β)` back to `(∂L/∂g_α, ∂L/∂g_β)` through the
    /// softmax Jacobian `[[αβ, -αβ], [-αβ, αβ]]`. Zero when saturated.
    pub fn backward(&self, d_alpha: f64, d_beta: f64) -> (f64, f64) {
        let gap = self.g_alpha - self.g_beta;
        if gap.abs() >= GATE_LOGIT_LIMIT {
            return (0.0, 0.0);
        }
        let (a, b) = self.coeffs();
        let g = a * b * (d_alpha - d_beta);
        (g, -g)
    }
}
