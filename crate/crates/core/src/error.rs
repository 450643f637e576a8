use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("non-conforming mesh: {0}")]
    NonConforming(String),
    #[error("degenerate element {0}")]
    Degenerate(usize),
    #[error("non-positive coefficient sample {value} at macro {macro_id}, node ({a},{b},{c})")]
    NonPositive { value: f64, macro_id: usize, a: i32, b: i32, c: i32 },
    #[error("singular Jacobian at {0:?}")]
    SingularJacobian([f64; 3]),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("level mismatch: {0}")]
    Level(String),
    #[error("zero diagonal entry at node {0}")]
    ZeroDiagonal(usize),
    #[error("solver diverged after {iters} iterations (residual {residual:e})")]
    Diverged { iters: usize, residual: f64 },
    #[error("eigensolver did not converge: best estimate {estimate:e}, residual {residual:e}")]
    NoConvergence { estimate: f64, residual: f64 },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
