use thiserror::Error;

/// Errors raised anywhere in the linkage pipeline.
#[derive(Debug, Error)]
pub enum LinkError {
    #[error("K = {k} is outside the supported range 1..={cap}")]
    SizeLimit { k: usize, cap: usize },

    #[error("partitions are over different ground sets (K = {left} vs K = {right})")]
    Dimension { left: usize, right: usize },

    #[error("cannot parse partition {text:?}: {reason}")]
    ParsePartition { text: String, reason: String },

    #[error("input error: {0}")]
    Input(String),

    #[error("candidate tuple count {count} exceeds the limit {limit}; add blocking fields")]
    TooManyTuples { count: u64, limit: u64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("cannot initialise parameters: {0}")]
    Init(String),

    #[error("every admissible class has zero likelihood for pattern {0}")]
    DegeneratePattern(String),

    #[error("class {0} has prevalence 1; its complement is empty")]
    DegeneratePrevalence(String),

    #[error("weight for class {0} is undefined (both likelihoods are zero)")]
    UndefinedWeight(String),

    #[error("population spec error: {0}")]
    Spec(String),

    #[error("scoring error: {0}")]
    Scoring(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<LinkError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LinkError {
    pub fn in_stage(self, stage: &'static str) -> Self {
        LinkError::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True for errors caused by the numerical fit rather than by inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            LinkError::DegeneratePattern(_)
            | LinkError::DegeneratePrevalence(_)
            | LinkError::UndefinedWeight(_)
            | LinkError::Init(_) => true,
            LinkError::Stage { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub type Result<T, E = LinkError> = std::result::Result<T, E>;
