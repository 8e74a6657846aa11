use thiserror::Error;

/// Errors produced while parsing or validating a map document.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum MapError {
    #[error("line {line}, column {col}: malformed glyph '{glyph}'")]
    MalformedGlyph { line: usize, col: usize, glyph: char },
    #[error("line {line}, column {col}: duplicated item id {id}")]
    DuplicateItem { line: usize, col: usize, id: u8 },
    #[error("line {line}, column {col}: duplicated destination {dest}")]
    DuplicateDest { line: usize, col: usize, dest: char },
    #[error("line {line}, column {col}: duplicated helper start")]
    DuplicateHelper { line: usize, col: usize },
    #[error("ragged map: line {line} has width {got}, expected {want}")]
    RaggedLine { line: usize, got: usize, want: usize },
    #[error("empty map document")]
    Empty,
    #[error("missing destination {0}")]
    MissingDestination(char),
    #[error("missing item {0}")]
    MissingItem(u8),
    #[error("missing helper start")]
    MissingHelper,
    #[error("no start cells")]
    NoStarts,
    #[error("row ordering violated")]
    RowOrderingViolated,
    #[error("items {0} and {1} of the same row lie on different y")]
    RowSplit(u8, u8),
    #[error("helper start must lie strictly between item rows 2 and 3")]
    HelperRowViolated,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GridError {
    #[error("illegal move")]
    IllegalMove,
    #[error("state ({0}, {1}) is not a valid open cell")]
    InvalidState(i32, i32),
}

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("goal unreachable")]
    GoalUnreachable,
    #[error("invalid subgoal sequence: {0}")]
    InvalidSequence(String),
    #[error("unachievable subgoal sequence from start")]
    Unachievable,
    #[error("empty observation set")]
    EmptyObservations,
    #[error("inconsistent observation: path {0} satisfies no candidate sequence")]
    InconsistentObservation(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid trial setup: {0}")]
    InvalidTrial(String),
    #[error("need at least 2 aligned prediction/judgment pairs, got {0}")]
    TooFewPairs(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
