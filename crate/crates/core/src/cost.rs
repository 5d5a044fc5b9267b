//! Configurable microsecond costs for every simulated subroutine, data-plane
//! operation and lifecycle event.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::micros;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("invalid cost `{key}` = {value}: costs must be finite and >= 0")]
    NegativeCost { key: String, value: f64 },
    #[error("core_count must be >= 1")]
    NoCores,
}

/// Kernel-space cost keys, one per verbs entry point.
pub mod kernel_keys {
    pub const GET_DEVICE_LIST: &str = "get_device_list";
    pub const OPEN_DEVICE: &str = "open_device";
    pub const ALLOC_PD: &str = "alloc_pd";
    pub const REG_MR: &str = "reg_mr";
    pub const CREATE_CQ: &str = "create_cq";
    pub const CREATE_QP: &str = "create_qp";
    pub const MODIFY_QP_INIT: &str = "modify_qp_init";
    pub const MODIFY_QP_RTR: &str = "modify_qp_rtr";
    pub const MODIFY_QP_RTS: &str = "modify_qp_rts";
}

/// All values are microseconds unless named otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModel {
    /// User-space internal subroutines, keyed by function name.
    pub subroutines: BTreeMap<String, f64>,
    /// Kernel-space share of each verbs entry point.
    pub kernel: BTreeMap<String, f64>,
    pub per_core_check_cost_per_core: f64,
    pub core_count: u32,
    /// CPU cost of posting or polling one work request.
    pub data_plane_op_cost: f64,
    /// Wire plus NIC processing time from post to completion.
    pub nic_latency: f64,
    /// Extra cost per data-plane operation when the data path goes through
    /// the kernel.
    pub syscall_penalty: f64,
    pub container_cold_launch: f64,
    pub container_warm_exec: f64,
    /// Runtime initialisation inside an INIT process started by warm start.
    pub runtime_init: f64,
    /// Runtime initialisation of the first INIT in a freshly launched
    /// container.
    pub cold_runtime_init: f64,
    pub fork_base: f64,
    pub copy_on_fork_surcharge: f64,
    pub copy_on_fork_per_kb: f64,
    /// Handshake charged when a user-space QP moves to RTS.
    pub qp_connect_cost: f64,
    /// Whole connection setup of a kernel-owned QP, replacing the
    /// INIT/RTR/RTS chain.
    pub kernel_connect_cost: f64,
    /// Relative uniform jitter applied to container launch and fork base
    /// costs. Zero disables it.
    pub launch_jitter: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        let subroutines = [
            ("scan_sysfs_devices", 1_900.0),
            ("build_device_array", 20.0),
            ("read_env_config", 180.0),
            ("alloc_context", 300.0),
            ("map_uar_pages", 400.0),
            ("alloc_pd_handle", 10.0),
            ("pin_pages", 30.0),
            ("alloc_cq_buffer", 20.0),
            ("query_port_attrs", 600.0),
            ("alloc_qp_buffers", 30.0),
            ("set_qp_attrs", 5.0),
            ("query_gid_table", 780.0),
            ("resolve_path", 10.0),
        ];
        let kernel = [
            (kernel_keys::GET_DEVICE_LIST, 20.0),
            (kernel_keys::OPEN_DEVICE, 1_300.0),
            (kernel_keys::ALLOC_PD, 20.0),
            (kernel_keys::REG_MR, 30.0),
            (kernel_keys::CREATE_CQ, 20.0),
            (kernel_keys::CREATE_QP, 30.0),
            (kernel_keys::MODIFY_QP_INIT, 15.0),
            (kernel_keys::MODIFY_QP_RTR, 20.0),
            (kernel_keys::MODIFY_QP_RTS, 15.0),
        ];
        Self {
            subroutines: subroutines
                .into_iter()
                .map(|(k, v)| (k.to_owned(), v))
                .collect(),
            kernel: kernel.into_iter().map(|(k, v)| (k.to_owned(), v)).collect(),
            per_core_check_cost_per_core: 518.0,
            core_count: 40,
            data_plane_op_cost: 0.6,
            nic_latency: 1.4,
            syscall_penalty: 1.33,
            container_cold_launch: 302_000.0,
            container_warm_exec: 87_400.0,
            runtime_init: 1_600.0,
            cold_runtime_init: 16_000.0,
            fork_base: 1_383.86,
            copy_on_fork_surcharge: 100.0,
            copy_on_fork_per_kb: 0.0,
            qp_connect_cost: 20.0,
            kernel_connect_cost: 18.70,
            launch_jitter: 0.0,
        }
    }
}

#[derive(Deserialize)]
struct Wrapped {
    costs: CostModel,
}

impl CostModel {
    /// Parses a cost model from TOML. Accepts either a bare cost model or a
    /// scenario file carrying it under `[costs]`.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let value: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let model = if value.contains_key("costs") {
            // Scenario files carry other sections; only `costs` matters here.
            let mut t = toml::Table::new();
            t.insert("costs".into(), value["costs"].clone());
            toml::Value::Table(t)
                .try_into::<Wrapped>()
                .map_err(|e| ConfigError::Parse(e.to_string()))?
                .costs
        } else {
            toml::Value::Table(value)
                .try_into::<CostModel>()
                .map_err(|e| ConfigError::Parse(e.to_string()))?
        };
        model.validate()?;
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("cost model is always serialisable")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.core_count == 0 {
            return Err(ConfigError::NoCores);
        }
        let scalars = [
            (
                "per_core_check_cost_per_core",
                self.per_core_check_cost_per_core,
            ),
            ("data_plane_op_cost", self.data_plane_op_cost),
            ("nic_latency", self.nic_latency),
            ("syscall_penalty", self.syscall_penalty),
            ("container_cold_launch", self.container_cold_launch),
            ("container_warm_exec", self.container_warm_exec),
            ("runtime_init", self.runtime_init),
            ("cold_runtime_init", self.cold_runtime_init),
            ("fork_base", self.fork_base),
            ("copy_on_fork_surcharge", self.copy_on_fork_surcharge),
            ("copy_on_fork_per_kb", self.copy_on_fork_per_kb),
            ("qp_connect_cost", self.qp_connect_cost),
            ("kernel_connect_cost", self.kernel_connect_cost),
            ("launch_jitter", self.launch_jitter),
        ];
        let named = self
            .subroutines
            .iter()
            .chain(self.kernel.iter())
            .map(|(k, v)| (k.as_str(), *v));
        for (key, value) in scalars.into_iter().chain(named) {
            if !value.is_finite() || value < 0.0 {
                return Err(ConfigError::NegativeCost {
                    key: key.to_owned(),
                    value,
                });
            }
        }
        Ok(())
    }

    /// Cost of a user-space subroutine; unknown names cost nothing.
    pub fn subroutine(&self, name: &str) -> Duration {
        micros(self.subroutines.get(name).copied().unwrap_or(0.0))
    }

    pub fn kernel_cost(&self, api: &str) -> Duration {
        micros(self.kernel.get(api).copied().unwrap_or(0.0))
    }

    /// Full cost of the per-core platform check loop.
    pub fn per_core_check_total(&self) -> Duration {
        micros(self.per_core_check_cost_per_core) * self.core_count
    }

    pub fn data_op(&self, kernel_mediated: bool) -> Duration {
        let mut c = micros(self.data_plane_op_cost);
        if kernel_mediated {
            c += micros(self.syscall_penalty);
        }
        c
    }

    pub fn nic(&self) -> Duration {
        micros(self.nic_latency)
    }

    /// Copy-on-fork cost on top of a plain fork for a parent holding
    /// `mr_bytes` of registered memory.
    pub fn fork_surcharge(&self, mr_bytes: usize) -> Duration {
        micros(self.copy_on_fork_surcharge + self.copy_on_fork_per_kb * mr_bytes as f64 / 1024.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::as_micros;

    #[test]
    fn default_open_device_calibration() {
        let m = CostModel::default();
        let per_core = as_micros(m.per_core_check_total());
        let rest: f64 = ["read_env_config", "alloc_context", "map_uar_pages"]
            .iter()
            .map(|n| m.subroutines[*n])
            .sum::<f64>()
            + m.kernel["open_device"];
        assert_eq!(per_core + rest, 22_900.0);
        assert_eq!(rest, 2_180.0);
        assert!(per_core / (per_core + rest) > 0.90);
        let user = per_core + rest - m.kernel["open_device"];
        assert!(user / (per_core + rest) > 0.80);
    }

    #[test]
    fn toml_round_trip_and_wrapped_form() {
        let m = CostModel::default();
        let text = m.to_toml_string();
        assert_eq!(CostModel::from_toml_str(&text).unwrap(), m);
        let wrapped = "[pool]\ninitial_qps = 8\n\n[costs]\nfork_base = 10.0\n".to_string();
        let w = CostModel::from_toml_str(&wrapped).unwrap();
        assert_eq!(w.fork_base, 10.0);
        assert_eq!(w.core_count, 40);
    }

    #[test]
    fn rejects_negative_and_zero_cores() {
        let err = CostModel::from_toml_str("fork_base = -1.0").unwrap_err();
        assert!(matches!(err, ConfigError::NegativeCost { .. }));
        let err = CostModel::from_toml_str("[subroutines]\nx = -0.5").unwrap_err();
        assert!(matches!(err, ConfigError::NegativeCost { .. }));
        let err = CostModel::from_toml_str("core_count = 0").unwrap_err();
        assert!(matches!(err, ConfigError::NoCores));
        assert!(CostModel::from_toml_str("no_such_key = 1").is_err());
    }

    #[test]
    fn surcharge_is_flat_by_default() {
        let m = CostModel::default();
        assert_eq!(m.fork_surcharge(32 * 1024), micros(100.0));
        let mut m2 = m.clone();
        m2.copy_on_fork_per_kb = 0.5;
        assert_eq!(m2.fork_surcharge(32 * 1024), micros(116.0));
    }
}
