use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("gradient of h is degenerate at {point:?} (|grad h| = {norm:e})")]
    GradientDegenerate { point: [f64; 3], norm: f64 },
    #[error("point {point:?} is not on the switching manifold (h = {h:e})")]
    NotOnManifold { point: [f64; 3], h: f64 },
    #[error("sliding field denominator Yh - Xh = {denom:e} is degenerate at {point:?}")]
    DenominatorDegenerate { point: [f64; 3], denom: f64 },
    #[error("point {point:?} is not a regular fold")]
    NonRegularFold { point: [f64; 3] },
    #[error("invalid model parameter {name} = {value}")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("step size underflow at t = {t}")]
    StepUnderflow { t: f64 },
    #[error("trajectory left the domain box at t = {t}")]
    DomainEscape { t: f64 },
    #[error("chattering guard tripped: {events} events within {span:e} time units")]
    Chattering { events: usize, span: f64 },
    #[error("forward flow from the escaping region is not unique at {point:?}")]
    NonUniqueForward { point: [f64; 3] },
    #[error("fold root solve failed near {point:?}")]
    FoldRootFailure { point: [f64; 3] },
    #[error("fold at {point:?} is not visible (X^2 h = {value:e})")]
    VisibilityViolation { point: [f64; 3], value: f64 },
    #[error("degenerate section: {0}")]
    DegenerateSection(String),
    #[error("orbit did not return to the section within t_max = {t_max}")]
    Escaped { t_max: f64 },
    #[error("orbit reached the pseudo-equilibrium at t = {t}")]
    ReachPseudoEquilibrium { t: f64 },
    #[error("orbit stopped at a singular tangency at t = {t}")]
    SingularTangency { t: f64 },
    #[error("derivative stencil straddles a branch boundary at s = {s:e}")]
    BranchMismatch { s: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    /// Stable machine-readable error kind used in JSON reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::GradientDegenerate { .. } => "gradient-degenerate",
            Error::NotOnManifold { .. } => "not-on-manifold",
            Error::DenominatorDegenerate { .. } => "denominator-degenerate",
            Error::NonRegularFold { .. } => "non-regular-fold",
            Error::InvalidParameter { .. } => "non-positive-parameter",
            Error::StepUnderflow { .. } => "step-underflow",
            Error::DomainEscape { .. } => "domain-escape",
            Error::Chattering { .. } => "chattering",
            Error::NonUniqueForward { .. } => "non-unique-forward",
            Error::FoldRootFailure { .. } => "fold-root-failure",
            Error::VisibilityViolation { .. } => "visibility-violation",
            Error::DegenerateSection(_) => "degenerate-section",
            Error::Escaped { .. } => "escaped",
            Error::ReachPseudoEquilibrium { .. } => "reach-pseudo-equilibrium",
            Error::SingularTangency { .. } => "singular-tangency",
            Error::BranchMismatch { .. } => "branch-mismatch",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Config(_) => "config",
        }
    }
}
