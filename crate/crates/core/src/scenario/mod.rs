//! Config-driven experiments: run a scenario, plot its curves, compare
//! two runs.

pub mod compare;
pub mod config;
pub mod plot;
pub mod runner;

pub use compare::{compare_manifests, format_comparison, CompareRow};
pub use config::{
    EvaluationSpec, FitOn, ModelSpec, PosthocSpec, RuleSpec, SamplingSpec, ScenarioConfig,
    ValidationSource, WorldSpec,
};
pub use plot::{emit_plot, render_svg, PlotFrame};
pub use runner::{
    build_worlds, evaluate_seed, load_run_input, run_scenario, run_scenario_file, Manifest,
    RunOptions, RunSummary, SeedRun, HEADLINE_RATES,
};
