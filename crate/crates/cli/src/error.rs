use aeropose_core::bench::BenchError;
use aeropose_core::dataset::DatasetError;
use aeropose_core::eval::EvalError;
use aeropose_core::pipeline::PipelineError;
use thiserror::Error;

/// Failure of a subcommand, split by exit status.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad input documents, arguments or configuration (exit 2).
    #[error("{}", chain(.0))]
    Input(anyhow::Error),
    /// Everything else: I/O, backends, frame failures (exit 1).
    #[error("{}", chain(.0))]
    Operational(anyhow::Error),
}

/// Joins the cause chain, skipping causes already quoted by their parent.
fn chain(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if out.contains(&msg) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&msg);
    }
    out
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Operational(_) => 1,
        }
    }

    pub fn input(msg: impl std::fmt::Display) -> Self {
        CliError::Input(anyhow::anyhow!("{msg}"))
    }

    pub fn operational(msg: impl std::fmt::Display) -> Self {
        CliError::Operational(anyhow::anyhow!("{msg}"))
    }
}

pub type CliResult<T> = Result<T, CliError>;

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { .. } | DatasetError::Serialize(_) => CliError::Operational(e.into()),
            _ => CliError::Input(e.into()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Input(e.into())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) => CliError::Input(e.into()),
            _ => CliError::Operational(e.into()),
        }
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::NoIterations | BenchError::NoStages | BenchError::InvalidBudget(_) => {
                CliError::Input(e.into())
            }
            BenchError::Pipeline(PipelineError::Config(_)) => CliError::Input(e.into()),
            _ => CliError::Operational(e.into()),
        }
    }
}

/// Attaches a path or action to an I/O style failure.
pub trait Context<T> {
    fn op(self, what: impl FnOnce() -> String) -> CliResult<T>;
    fn input(self, what: impl FnOnce() -> String) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> Context<T> for Result<T, E> {
    fn op(self, what: impl FnOnce() -> String) -> CliResult<T> {
        self.map_err(|e| CliError::Operational(e.into().context(what())))
    }

    fn input(self, what: impl FnOnce() -> String) -> CliResult<T> {
        self.map_err(|e| CliError::Input(e.into().context(what())))
    }
}
