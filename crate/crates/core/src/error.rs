//! Error and warning types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, Error)]
pub enum Error {
    /// Design matrix (or a regressor block) is not of full column rank.
    #[error("rank-deficient design in {context}: singular value ratio {ratio:.3e}")]
    RankDeficient { context: String, ratio: f64 },

    /// The gradient-shifted LP has no finite minimum. This is a signal, not
    /// a bug: the shift of a pathological bootstrap draw can push the
    /// objective below any bound.
    #[error("quantile regression LP is unbounded (shift too large relative to data)")]
    Unbounded,

    /// A cluster is too small for the requested per-cluster computation.
    #[error("cluster {cluster} has {size} observations; at least {min} required")]
    EmptyCluster {
        cluster: usize,
        size: usize,
        min: usize,
    },

    /// The kernel window around zero captured no residuals, so the smoothed
    /// moment matrices are identically zero.
    #[error("all residuals fall outside the kernel bandwidth {bandwidth:.3e}")]
    AllResidualsOutsideBandwidth { bandwidth: f64 },

    /// The studentization factor collapsed: G'ΩG is numerically zero.
    #[error("singular cluster-robust variance ({value:.3e}); scores are degenerate")]
    SingularCrve { value: f64 },

    /// A moment matrix that must be inverted is numerically singular.
    #[error("singular moment matrix in {context}")]
    SingularMoment { context: String },

    /// Every randomization statistic is identical, so no critical value
    /// separates rejection from acceptance.
    #[error("non-informative test: randomization distribution is degenerate")]
    NonInformative,

    /// A per-cluster estimation failed; group-based tests abort rather than
    /// silently dropping clusters.
    #[error("IVQR estimation failed in cluster {cluster}: {source}")]
    ClusterFitFailure {
        cluster: usize,
        #[source]
        source: Box<Error>,
    },

    /// The linear system defining a simulated outcome is singular.
    #[error("singular linear system while generating outcomes (attempt {attempt})")]
    SingularSystem { attempt: u32 },

    /// A requested cluster-size split produced an empty cluster.
    #[error("cluster size formula yields an empty cluster at index {index}")]
    ZeroSizeCluster { index: usize },

    /// Graph node with no edges where a positive degree is required.
    #[error("isolated node {node} has degree zero")]
    IsolatedNode { node: usize },

    /// More than the tolerated share of bootstrap draws had to be excluded.
    #[error("{excluded} of {total} bootstrap draws were unbounded (> {limit_pct}% limit)")]
    TooManyExcludedDraws {
        excluded: usize,
        total: usize,
        limit_pct: f64,
    },

    /// Input file could not be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A required input column is absent.
    #[error("missing column `{name}`")]
    MissingColumn { name: String },

    /// Non-finite value in numeric input.
    #[error("non-finite value in column `{column}` at line {line}")]
    NonFinite { column: String, line: usize },

    /// Invalid configuration detected before any computation.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Safety valve for the simplex iteration cap; never expected on
    /// well-posed inputs.
    #[error("solver exceeded {0} pivots without convergence")]
    IterationLimit(usize),

    #[error("I/O error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    /// True for errors caused by malformed input or configuration, as
    /// opposed to numerical failures encountered during computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::MissingColumn { .. }
                | Error::NonFinite { .. }
                | Error::InvalidConfig(_)
                | Error::Io(_)
        )
    }
}

/// Non-fatal conditions surfaced alongside results.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Warning {
    /// Constructed instrument is numerically zero everywhere.
    DegenerateInstrument,
    /// A cluster is small enough that the cluster-level recipe is fragile.
    SmallCluster { cluster: usize, size: usize },
    /// The profile grid contains a single point.
    GridDegenerate,
    /// Inference run with a single cluster; sign-change inference is vacuous.
    SingleCluster,
    /// The null-imposed CRVE requires more clusters than instrument columns.
    AssumptionViolation(String),
    /// A bootstrap profile argmin landed on the grid boundary.
    GridBoundaryHit { count: usize },
    /// Unbounded bootstrap draws were excluded from the order statistic.
    ExcludedDraws { count: usize },
}

impl std::fmt::Display for Warning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Warning::DegenerateInstrument => write!(f, "constructed instrument is identically zero"),
            Warning::SmallCluster { cluster, size } => write!(
                f,
                "cluster {cluster} has only {size} observations; consider the full-sample recipe"
            ),
            Warning::GridDegenerate => write!(f, "profile grid has a single point"),
            Warning::SingleCluster => write!(f, "only one cluster; randomization inference is vacuous"),
            Warning::AssumptionViolation(s) => write!(f, "{s}"),
            Warning::GridBoundaryHit { count } => {
                write!(f, "{count} bootstrap argmin(s) hit the grid boundary")
            }
            Warning::ExcludedDraws { count } => {
                write!(f, "{count} unbounded bootstrap draw(s) excluded")
            }
        }
    }
}
