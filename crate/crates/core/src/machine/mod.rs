//! Reference cost backend and correctness oracle.
//!
//! [`simulate`] is a single-warp, in-order scoreboard model that produces
//! cycle counts from control codes and latencies only. [`interpret`] runs a
//! supported integer subset on concrete buffers and ignores control codes
//! entirely. Reordering independent instructions can change the first but
//! never the second.

mod interp;
mod sim;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::{InstrClass, Instruction, BARRIER_COUNT};

pub(crate) use interp::execute;
pub use interp::{
    buffer_address, interpret, interpret_with, is_interpretable, InterpretError, InterpretOptions,
    PARAM_BASE,
};
pub use sim::{simulate, SimReport, Stall};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("latency for `{0}` must be at least 1 cycle")]
    ZeroLatency(String),
    #[error("no default latency for class {0:?}")]
    MissingClass(InstrClass),
    #[error("barrier_count must be in 1..={BARRIER_COUNT}, got {0}")]
    BarrierCount(u8),
    #[error("only single issue is modeled, got issue_width {0}")]
    IssueWidth(u32),
}

/// Timing parameters for [`simulate`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MachineConfig {
    /// Issue-to-result latency by mnemonic prefix; the longest matching
    /// prefix wins.
    pub cpi_table: BTreeMap<String, u32>,
    /// Fallback latency per class. Global-memory classes use
    /// `global_mem_latency` instead.
    pub class_latency: BTreeMap<InstrClass, u32>,
    pub global_mem_latency: u32,
    pub barrier_count: u8,
    pub issue_width: u32,
}

impl Default for MachineConfig {
    fn default() -> Self {
        // Turing CPI figures for FFMA, IMAD and POPC
        let cpi_table = [("FFMA", 4), ("IMAD", 5), ("POPC", 15)]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        let class_latency = [
            (InstrClass::SharedLoad, 30),
            (InstrClass::SharedStore, 30),
            (InstrClass::Compute, 4),
            (InstrClass::Barrier, 1),
            (InstrClass::ControlFlow, 1),
            (InstrClass::Other, 1),
        ]
        .into_iter()
        .collect();
        Self {
            cpi_table,
            class_latency,
            global_mem_latency: 400,
            barrier_count: BARRIER_COUNT,
            issue_width: 1,
        }
    }
}

impl MachineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (prefix, &lat) in &self.cpi_table {
            if lat == 0 {
                return Err(ConfigError::ZeroLatency(prefix.clone()));
            }
        }
        for class in InstrClass::ALL {
            if class.is_global_memory() {
                continue;
            }
            match self.class_latency.get(&class) {
                None => return Err(ConfigError::MissingClass(class)),
                Some(0) => return Err(ConfigError::ZeroLatency(format!("{class:?}"))),
                Some(_) => {}
            }
        }
        if self.global_mem_latency == 0 {
            return Err(ConfigError::ZeroLatency("global memory".into()));
        }
        if self.barrier_count == 0 || self.barrier_count > BARRIER_COUNT {
            return Err(ConfigError::BarrierCount(self.barrier_count));
        }
        if self.issue_width != 1 {
            return Err(ConfigError::IssueWidth(self.issue_width));
        }
        Ok(())
    }

    /// Default latency of a class.
    pub fn class_default(&self, class: InstrClass) -> u32 {
        if class.is_global_memory() {
            self.global_mem_latency
        } else {
            self.class_latency.get(&class).copied().unwrap_or(1)
        }
    }

    /// Issue-to-result latency of one instruction.
    pub fn latency(&self, ins: &Instruction) -> u32 {
        let mnemonic = ins.mnemonic();
        self.cpi_table
            .iter()
            .filter(|(prefix, _)| mnemonic.starts_with(prefix.as_str()))
            .max_by_key(|(prefix, _)| prefix.len())
            .map(|(_, &lat)| lat)
            .unwrap_or_else(|| self.class_default(ins.klass()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_latencies() {
        let cfg = MachineConfig::default();
        cfg.validate().unwrap();
        let lat = |line: &str| cfg.latency(&line.parse::<Instruction>().unwrap());
        assert_eq!(lat("FFMA R1, R2, R3, R4 ;"), 4);
        assert_eq!(lat("IMAD.WIDE R18, R9, 0x80, R10 ;"), 5);
        assert_eq!(lat("POPC R1, R2 ;"), 15);
        assert_eq!(lat("IADD3 R1, R2, R3, RZ ;"), 4);
        assert_eq!(lat("LDG.E R0, [R2.64] ;"), 400);
        assert_eq!(lat("LDS R0, [R2] ;"), 30);
        assert_eq!(lat("FROB R0 ;"), 1);
    }

    #[test]
    fn longest_prefix_wins() {
        let mut cfg = MachineConfig::default();
        cfg.cpi_table.insert("IMAD.WIDE".into(), 9);
        let lat = |line: &str| cfg.latency(&line.parse::<Instruction>().unwrap());
        assert_eq!(lat("IMAD.WIDE.U32 R1, R2, R3, R4 ;"), 9);
        assert_eq!(lat("IMAD R1, R2, R3, R4 ;"), 5);
    }

    #[test]
    fn validation_errors() {
        let mut cfg = MachineConfig::default();
        cfg.class_latency.remove(&InstrClass::Compute);
        assert_eq!(cfg.validate(), Err(ConfigError::MissingClass(InstrClass::Compute)));

        let mut cfg = MachineConfig::default();
        cfg.cpi_table.insert("FOO".into(), 0);
        assert!(matches!(cfg.validate(), Err(ConfigError::ZeroLatency(_))));

        let cfg = MachineConfig { barrier_count: 7, ..Default::default() };
        assert_eq!(cfg.validate(), Err(ConfigError::BarrierCount(7)));

        let cfg = MachineConfig { issue_width: 2, ..Default::default() };
        assert_eq!(cfg.validate(), Err(ConfigError::IssueWidth(2)));
    }

    #[test]
    fn config_json_round_trip() {
        let cfg = MachineConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: MachineConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        let partial: MachineConfig = serde_json::from_str(r#"{"global_mem_latency": 200}"#).unwrap();
        assert_eq!(partial.global_mem_latency, 200);
        assert_eq!(partial.cpi_table, cfg.cpi_table);
    }
}
