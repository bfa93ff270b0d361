//! The TOML run configuration.
//!
//! ```toml
//! [anneal]            # t_max, t_min, cooling, seed, measure_reps, tests_per_step, unsafe_moves
//! [machine]           # cpi_table, class_latency, global_mem_latency, barrier_count, issue_width
//! [backend]           # kind = "simulator" | "external", command, timeout_secs, working_dir, concurrency_safe
//! [test]              # ret_ptr, sample_count, seed, [[test.buffers]] arg/len/kind/dist
//! ```
//!
//! Every section is optional. Command-line flags override file values.

use std::path::Path;

use sass_sched::anneal::AnnealConfig;
use sass_sched::backend::BackendDescriptor;
use sass_sched::machine::MachineConfig;
use sass_sched::testing::TestPlan;
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub anneal: AnnealConfig,
    pub machine: MachineConfig,
    pub backend: BackendDescriptor,
    pub test: Option<TestPlan>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| e.to_string())?;
        cfg.machine.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

/// Parses `--backend`: `sim` or `external:<command template>`.
pub fn parse_backend_flag(flag: &str, base: &BackendDescriptor) -> Result<BackendDescriptor, CliError> {
    if flag == "sim" || flag == "simulator" {
        return Ok(BackendDescriptor::Simulator);
    }
    let Some(command) = flag.strip_prefix("external:") else {
        return Err(CliError::Input(format!(
            "unknown backend `{flag}`; expected `sim` or `external:<command>`"
        )));
    };
    // keep timeout and working directory from the file when it also names an external backend
    Ok(match base {
        BackendDescriptor::External {
            timeout_secs,
            working_dir,
            concurrency_safe,
            ..
        } => BackendDescriptor::External {
            command: command.to_string(),
            timeout_secs: *timeout_secs,
            working_dir: working_dir.clone(),
            concurrency_safe: *concurrency_safe,
        },
        BackendDescriptor::Simulator => BackendDescriptor::External {
            command: command.to_string(),
            timeout_secs: 60.0,
            working_dir: None,
            concurrency_safe: false,
        },
    })
}
