use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Every knob of a signed, directionally-projected adapter.
///
/// Turning `projection_enabled` and `minus_enabled` off gives plain LoRA;
/// projection on with the minus branch off gives the DoRA-like variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    /// Rank of the additive branch `A₊B₊`.
    pub rank_plus: usize,
    /// Rank of the subtractive branch `A₋B₋`; 0 disables it.
    pub rank_minus: usize,
    /// Scale numerator; the residual is scaled by `alpha / rank_plus` on both branches.
    pub alpha: f64,
    /// Weight of the subtractive branch.
    pub tau: f64,
    pub tau_trainable: bool,
    /// Clamp floor for column norms in the projection.
    pub epsilon: f64,
    /// Inverted dropout on the residual-branch input.
    pub input_dropout_p: f64,
    /// Inverted Bernoulli dropout on the entries of `ΔWᵀ` in the residual branch.
    pub matrix_dropout_p: f64,
    pub projection_enabled: bool,
    pub minus_enabled: bool,
    /// Keep the subtractive branch in the forward but give it no gradient.
    pub minus_detached: bool,
    /// Std of `A₊` at init; `None` means `1/sqrt(d_in)`.
    pub init_std_plus: Option<f64>,
    /// Std of `A₋` relative to `A₊`.
    pub minus_std_ratio: f64,
    pub seed: u64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            rank_plus: 4,
            rank_minus: 4,
            alpha: 8.0,
            tau: 0.5,
            tau_trainable: false,
            epsilon: 1e-6,
            input_dropout_p: 0.1,
            matrix_dropout_p: 0.0,
            projection_enabled: true,
            minus_enabled: true,
            minus_detached: false,
            init_std_plus: None,
            minus_std_ratio: 0.1,
            seed: 0,
        }
    }
}

/// The three named points of the design space compared by the training harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Projection off, minus branch off.
    Lora,
    /// Projection on, minus branch off.
    DoraLike,
    /// Projection on, minus branch on.
    D2Lora,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Lora, Variant::DoraLike, Variant::D2Lora];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Lora => "lora",
            Variant::DoraLike => "dora_like",
            Variant::D2Lora => "d2lora",
        }
    }

    /// Copy of `base` with the two toggles set for this variant.
    pub fn apply(self, base: &AdapterConfig) -> AdapterConfig {
        let mut cfg = base.clone();
        let (projection, minus) = match self {
            Variant::Lora => (false, false),
            Variant::DoraLike => (true, false),
            Variant::D2Lora => (true, true),
        };
        cfg.projection_enabled = projection;
        cfg.minus_enabled = minus;
        cfg
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        let finite =
            [self.alpha, self.tau, self.epsilon, self.input_dropout_p, self.matrix_dropout_p, self.minus_std_ratio];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("adapter config contains a non-finite value".into()));
        }
        if self.alpha <= 0.0 {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.tau < 0.0 {
            return Err(Error::Config(format!("tau must be >= 0, got {}", self.tau)));
        }
        if self.rank_plus == 0 {
            return Err(Error::Config("rank_plus must be >= 1".into()));
        }
        for (name, p) in [("input_dropout_p", self.input_dropout_p), ("matrix_dropout_p", self.matrix_dropout_p)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {p}")));
            }
        }
        if !(self.minus_std_ratio > 0.0 && self.minus_std_ratio <= 1.0) {
            return Err(Error::Config(format!("minus_std_ratio must lie in (0, 1], got {}", self.minus_std_ratio)));
        }
        if let Some(s) = self.init_std_plus {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::Config(format!("init_std_plus must be finite and >= 0, got {s}")));
            }
        }
        Ok(())
    }

    /// Rank of the subtractive branch actually instantiated.
    pub fn effective_rank_minus(&self) -> usize {
        if self.minus_enabled {
            self.rank_minus
        } else {
            0
        }
    }

    /// `alpha / rank_plus`, applied to both branches.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank_plus as f64
    }
}
