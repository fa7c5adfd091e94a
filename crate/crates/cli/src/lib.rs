//! Experiment harness behind the `coteach` binary: dataset generation,
//! the multi-seed pipeline, the gamma ablation and report rendering.

pub mod ablate;
pub mod config;
pub mod gen;
pub mod manifest;
pub mod pipeline;
pub mod report;
pub mod run;
pub mod svg;

/// True for errors caused by the configuration or command line rather
/// than by a run.
pub fn is_usage_error(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        matches!(e.downcast_ref::<coteach_core::Error>(), Some(coteach_core::Error::Config { .. }))
            || e.to_string().starts_with("invalid configuration")
            || e.to_string().starts_with("invalid config ")
    })
}
