//! Library side of the `femagent` binary: settings loading, problem files,
//! run construction and the launcher behind the HTTP service.

pub mod launcher;
pub mod problem;
pub mod runs;
pub mod settings;

pub use launcher::SettingsLauncher;
pub use problem::{load_problem, Problem};
pub use settings::{Settings, StrategyKind};
