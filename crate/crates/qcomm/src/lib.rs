//! Desk-scale toolkit for multiparty quantum channels.
//!
//! Everything here works on explicitly represented finite-dimensional
//! systems: labeled tensor products of small Hilbert spaces, dense complex
//! matrices, and completely positive maps in Kraus form. On top of that base
//! the crate provides
//!
//! - the four transmission fidelities of multiuser coding theory
//!   (global/local entanglement fidelity, global/local minimal subspace
//!   fidelity), with two independent evaluation routes for the entanglement
//!   fidelity ([`fidelity`]);
//! - constructive verifiers for the inequalities that tie those fidelities
//!   together, plus the subspace-carving procedure ([`bounds`]);
//! - protocol transformations: leg reduction, isometric-encoding extraction,
//!   encoding stripping, and one-way → zero-way flattening ([`protocol`]);
//! - IID sources, typical-subspace projectors and equipartition mass curves
//!   ([`source`]).
//!
//! All types are immutable values and all operations are pure functions, so
//! instance sweeps parallelize trivially; the `parallel` feature (default)
//! runs sweeps and optimizer restarts on a rayon pool, without it everything
//! runs sequentially on one thread.

pub mod bounds;
pub mod channel;
pub mod fidelity;
pub mod layout;
pub mod par;
pub mod protocol;
pub mod rng;
pub mod source;
pub mod sweeps;
pub mod tensor;

use thiserror::Error;

/// Numerical tolerances used across the crate.
///
/// Double-precision spectral routines are accurate to ~1e-13 at desk scale,
/// so 1e-8 acceptance windows leave plenty of headroom while still catching
/// genuinely broken inputs.
pub mod tol {
    /// Hermiticity check: max |M - M†| entry.
    pub const HERM: f64 = 1e-8;
    /// Positive semidefiniteness: eigenvalues ≥ -PSD.
    pub const PSD: f64 = 1e-8;
    /// Trace window for normalized operators.
    pub const TRACE: f64 = 1e-8;
    /// Unit-norm window for pure states.
    pub const NORM: f64 = 1e-8;
    /// Reconstruction error for spectral decompositions and purifications.
    pub const REC: f64 = 1e-8;
    /// Orthonormality of eigenbases, subspace bases and unitaries.
    pub const ORTH: f64 = 1e-8;
    /// Agreement of two reduced states that are supposed to coincide.
    pub const MATCH: f64 = 1e-8;
    /// Kraus completeness: ‖ΣE†E - I‖ for trace-preserving maps.
    pub const TP: f64 = 1e-8;
    /// Partial isometry check: ‖W†W - (W†W)²‖.
    pub const ISO: f64 = 1e-8;
    /// Eigenvalue floor for entropies, ranks and purification support.
    pub const EIG: f64 = 1e-12;
    /// Margin tolerance for lemma and bound verifiers.
    pub const BOUND: f64 = 1e-9;
    /// Two eigenvalues closer than this are treated as degenerate when
    /// ordering eigenvectors deterministically.
    pub const DEGENERACY: f64 = 1e-10;
}

/// Default cap on the total dimension of any materialized operator.
///
/// The guard exists to turn runaway tensor products into errors instead of
/// out-of-memory conditions; [`layout::SystemLayout::new_with_guard`] overrides it.
pub const DIM_GUARD: usize = 4096;

#[derive(Debug, Error)]
pub enum Error {
    #[error("label `{0}` appears in more than one subsystem")]
    LabelCollision(String),
    #[error("unknown subsystem label `{0}`")]
    UnknownLabel(String),
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimMismatch {
        expected: usize,
        got: usize,
        context: String,
    },
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("total dimension {dim} exceeds guard {guard}")]
    DimensionGuard { dim: usize, guard: usize },
    #[error("matrix is not Hermitian: max deviation {0:.3e}")]
    NotHermitian(f64),
    #[error("operator is not positive semidefinite: min eigenvalue {0:.3e}")]
    NotPositive(f64),
    #[error("trace {0} outside the admissible window")]
    TraceOutOfRange(f64),
    #[error("vector norm {0} is not 1 within tolerance")]
    NotNormalized(f64),
    #[error("operation requires a normalized state, got a subnormalized one")]
    SubnormalizedInput,
    #[error("reduced states on the shared factors differ by {0:.3e}; the inputs do not purify the same state")]
    ReducedStateMismatch(f64),
    #[error("parameter `{name}` = {value} out of range")]
    ParamOutOfRange { name: &'static str, value: f64 },
    #[error("no isometry exists: out_dim*env_dim = {out_env} < in_dim = {in_dim}")]
    NoIsometry { out_env: usize, in_dim: usize },
    #[error("partial isometry invariant violated: {0}")]
    BrokenIsometry(String),
    #[error("constructed isometry missed the fidelity bound: achieved {achieved}, required {required} (eta = {eta})")]
    IsometryBoundFailed {
        achieved: f64,
        required: f64,
        eta: f64,
    },
    #[error("branch probability {0:.3e} below floor")]
    BranchProbabilityFloor(f64),
    #[error("receiver structure not supported by this transformation: {0}")]
    UnsupportedReceiverStructure(String),
    #[error("precondition violated: {0}")]
    PreconditionViolated(String),
    #[error("source is degenerate: removal would empty the subspace")]
    DegenerateSource,
    #[error("epsilon {value} is not below the required limit {limit}")]
    EpsilonTooLarge { value: f64, limit: f64 },
    #[error("protocol invariant violated: {0}")]
    BadProtocol(String),
    #[error("serialization: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;
