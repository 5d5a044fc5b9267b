use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use crate::cost::CostModel;
use crate::verbs::HostEnv;

use super::{CacheError, Value};

pub type FunctionImpl = Arc<dyn Fn(&HostEnv, &[Value]) -> Value + Send + Sync>;

/// Names of the internal subroutines every verbs entry point runs.
pub mod names {
    pub const SCAN_SYSFS_DEVICES: &str = "scan_sysfs_devices";
    pub const BUILD_DEVICE_ARRAY: &str = "build_device_array";
    pub const PER_CORE_PLATFORM_CHECK: &str = "per_core_platform_check";
    pub const READ_ENV_CONFIG: &str = "read_env_config";
    pub const ALLOC_CONTEXT: &str = "alloc_context";
    pub const MAP_UAR_PAGES: &str = "map_uar_pages";
    pub const ALLOC_PD_HANDLE: &str = "alloc_pd_handle";
    pub const PIN_PAGES: &str = "pin_pages";
    pub const ALLOC_CQ_BUFFER: &str = "alloc_cq_buffer";
    pub const QUERY_PORT_ATTRS: &str = "query_port_attrs";
    pub const ALLOC_QP_BUFFERS: &str = "alloc_qp_buffers";
    pub const SET_QP_ATTRS: &str = "set_qp_attrs";
    pub const QUERY_GID_TABLE: &str = "query_gid_table";
    pub const RESOLVE_PATH: &str = "resolve_path";
}

#[derive(Clone)]
pub struct RegisteredFunction {
    pub name: String,
    /// Only functions declared idempotent are eligible for caching.
    pub declared_idempotent: bool,
    /// Charged on every executed (non-cached) call.
    pub cost: Duration,
    imp: FunctionImpl,
}

impl RegisteredFunction {
    pub fn call(&self, env: &HostEnv, args: &[Value]) -> Value {
        (self.imp)(env, args)
    }
}

impl fmt::Debug for RegisteredFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RegisteredFunction")
            .field("name", &self.name)
            .field("declared_idempotent", &self.declared_idempotent)
            .field("cost", &self.cost)
            .finish()
    }
}

/// Internal control-plane functions, keyed by name.
#[derive(Debug, Clone, Default)]
pub struct FunctionRegistry {
    fns: BTreeMap<String, RegisteredFunction>,
}

impl FunctionRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F>(
        &mut self,
        name: &str,
        declared_idempotent: bool,
        cost: Duration,
        imp: F,
    ) -> Result<(), CacheError>
    where
        F: Fn(&HostEnv, &[Value]) -> Value + Send + Sync + 'static,
    {
        if self.fns.contains_key(name) {
            return Err(CacheError::Duplicate(name.to_owned()));
        }
        self.fns.insert(
            name.to_owned(),
            RegisteredFunction {
                name: name.to_owned(),
                declared_idempotent,
                cost,
                imp: Arc::new(imp),
            },
        );
        Ok(())
    }

    /// Replaces an existing registration (or inserts a new one).
    pub fn replace<F>(&mut self, name: &str, declared_idempotent: bool, cost: Duration, imp: F)
    where
        F: Fn(&HostEnv, &[Value]) -> Value + Send + Sync + 'static,
    {
        self.fns.remove(name);
        self.register(name, declared_idempotent, cost, imp)
            .expect("name was just removed");
    }

    pub fn get(&self, name: &str) -> Option<&RegisteredFunction> {
        self.fns.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.fns.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.fns.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.fns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fns.is_empty()
    }

    /// The subroutines behind the simulated verbs library, with costs taken
    /// from `costs`.
    pub fn standard(costs: &CostModel) -> Self {
        use names::*;
        let mut r = Self::new();
        let c = |n: &str| costs.subroutine(n);

        r.replace(SCAN_SYSFS_DEVICES, true, c(SCAN_SYSFS_DEVICES), |env, _| {
            env.device_count() as Value
        });
        r.replace(
            BUILD_DEVICE_ARRAY,
            false,
            c(BUILD_DEVICE_ARRAY),
            |env, _| env.next_handle(),
        );
        r.replace(
            PER_CORE_PLATFORM_CHECK,
            true,
            costs.per_core_check_total(),
            |env, _| env.per_core_platform_check(),
        );
        // Constant on a given host, but the environment may be edited at any
        // time, so it is not declared idempotent.
        r.replace(READ_ENV_CONFIG, false, c(READ_ENV_CONFIG), |env, _| {
            env.env_digest()
        });
        r.replace(ALLOC_CONTEXT, false, c(ALLOC_CONTEXT), |env, _| {
            env.next_handle()
        });
        r.replace(MAP_UAR_PAGES, false, c(MAP_UAR_PAGES), |env, _| {
            0x7f00_0000_0000 + env.next_handle() * 4096
        });
        r.replace(ALLOC_PD_HANDLE, false, c(ALLOC_PD_HANDLE), |env, _| {
            env.next_handle()
        });
        r.replace(PIN_PAGES, false, c(PIN_PAGES), |_, args| {
            let len = args.first().copied().unwrap_or(0);
            (len + 4095) / 4096
        });
        r.replace(ALLOC_CQ_BUFFER, false, c(ALLOC_CQ_BUFFER), |env, _| {
            env.next_handle()
        });
        r.replace(QUERY_PORT_ATTRS, true, c(QUERY_PORT_ATTRS), |env, _| {
            env.port_attrs()
        });
        r.replace(ALLOC_QP_BUFFERS, false, c(ALLOC_QP_BUFFERS), |env, _| {
            env.next_handle()
        });
        r.replace(SET_QP_ATTRS, false, c(SET_QP_ATTRS), |_, _| 0);
        r.replace(QUERY_GID_TABLE, true, c(QUERY_GID_TABLE), |env, _| {
            env.gid_index()
        });
        r.replace(RESOLVE_PATH, false, c(RESOLVE_PATH), |_, args| {
            args.first().copied().unwrap_or(0).rotate_left(7) & 0xffff
        });
        r
    }
}
