//! Scenario driver, analytic models and reporting.

pub mod experiments;
pub mod models;
pub mod presets;
pub mod report;
pub mod scenario;
pub mod workload;

pub use models::{evaluate_model, parse_params, Model};
pub use presets::{run_preset, Preset, PresetReport};
pub use report::{report_emit, Format};
pub use scenario::{measure, run_scenario, simulate, simulate_traced, LatencyStats, MetricsReport};
pub use workload::{generate_workload, layout_accounts, AccountLayout, WorkloadTx};
