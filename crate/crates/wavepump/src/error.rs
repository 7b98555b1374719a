//! Crate error type and exit-code classification.

use thiserror::Error;

/// Everything that can go wrong in the laboratory.
///
/// Variants split into two families: configuration/validation errors (exit
/// code 1 in the CLI) and numerical failures (exit code 2). `exit_code`
/// encodes the split.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed config file, unknown key, unparsable value.
    #[error("config: {0}")]
    Config(String),

    /// Structurally valid input that violates a precondition.
    #[error("validation: {0}")]
    Validation(String),

    /// I/O failure while reading inputs or writing exports.
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    /// Expression parser failure (custom phases and forces).
    #[error("expression: {0}")]
    Expr(String),

    /// Root finding failed to bracket or converge.
    #[error("root finding: {0}")]
    RootFinding(String),

    /// Transversality |grad l . grad S| fell below threshold on the curve.
    #[error("transversality violated: {0}")]
    Transversality(String),

    /// A request landed too close to the resonance curve for the expansion.
    #[error("validity margin: {0}")]
    ValidityMargin(String),

    /// Characteristic or ray left the phase window.
    #[error("span: {0}")]
    Span(String),

    /// Ray-map Jacobian changed sign: caustic in the eikonal solution.
    #[error("caustic: {0}")]
    Caustic(String),

    /// Quadrature failed to reach tolerance within the panel budget.
    #[error("quadrature: {0}")]
    Quadrature(String),

    /// Adaptive ODE integration failed (step underflow or budget exceeded).
    #[error("ode: {0}")]
    Ode(String),

    /// |Phi_t2| too small for the envelope evolution to be well posed.
    #[error("degenerate phase velocity: {0}")]
    DegeneratePhase(String),

    /// Field escaped the guarded domain or grew past the blow-up guard.
    #[error("blow-up guard: {0}")]
    BlowUp(String),

    /// CFL or stability bound violated for a stepper.
    #[error("stability: {0}")]
    Stability(String),

    /// Demodulation could not separate envelope from carrier.
    #[error("demodulation: {0}")]
    Demodulation(String),

    /// An operation needed an input produced by an earlier pipeline stage.
    #[error("missing dependency: {0}")]
    Dependency(String),

    /// Resampling outside the source grid.
    #[error("resampling: {0}")]
    Resampling(String),
}

impl Error {
    /// CLI exit code: 1 for config/validation problems, 2 for numerical ones.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Validation(_) | Error::Io(_) | Error::Expr(_) => 1,
            _ => 2,
        }
    }
}
