//! Seeded multi-run experiments: run loop, moving-average metric,
//! aggregation across runs, CSV and SVG outputs.

mod config;
mod csv;
mod metrics;
mod plot;
mod run;

pub use config::{parse_config, AgentKind, RunConfig, Scenario};
pub use csv::{episode_line, fmt_sig, parse_episodes, read_episodes, write_episodes, EPISODE_HEADER};
pub use metrics::{aggregate, final_mar_median, mar_series, mar_update, records_for_run, Aggregate, EpisodeRecord};
pub use plot::{render_curves, PlotFrame};
pub use run::{
    checkpoint_path, pretrain_vae, run_experiment, run_single, stream, write_vae, Agent, ExperimentOutput, Pretrained, RandomAgent, RunOutput, ScheduledDqn,
    INCOMPLETE_MARKER,
};
