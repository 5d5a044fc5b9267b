use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicI64, AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cache::{CacheCell, CacheDispatch, CacheSource, FunctionRegistry, Value};
use crate::clock::Timeline;
use crate::cost::{kernel_keys, CostModel};

use super::fabric::FabricInner;
use super::{DeviceContext, Fabric, Gid, VerbsError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DeviceId {
    pub host: u32,
    pub index: u32,
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "dev{}", self.index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CpuModel {
    SandyBridge,
    Modern,
}

/// The machine-level state internal functions read: CPU inventory,
/// environment, device inventory and a handle counter.
#[derive(Debug)]
pub struct HostEnv {
    cpus: Vec<CpuModel>,
    env_vars: Mutex<BTreeMap<String, String>>,
    device_count: usize,
    handles: AtomicI64,
    per_core_iterations: AtomicU64,
    faults: Mutex<BTreeMap<String, u32>>,
}

impl HostEnv {
    pub fn new(
        cpus: Vec<CpuModel>,
        env_vars: BTreeMap<String, String>,
        device_count: usize,
    ) -> Self {
        Self {
            cpus,
            env_vars: Mutex::new(env_vars),
            device_count,
            handles: AtomicI64::new(1),
            per_core_iterations: AtomicU64::new(0),
            faults: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn core_count(&self) -> usize {
        self.cpus.len()
    }

    pub fn device_count(&self) -> usize {
        self.device_count
    }

    /// Monotonic handle source for allocation-style subroutines.
    pub fn next_handle(&self) -> Value {
        self.handles.fetch_add(1, Ordering::SeqCst)
    }

    /// Walks every core and reports whether any is a Sandy Bridge part.
    pub fn per_core_platform_check(&self) -> Value {
        let mut found = 0;
        for cpu in &self.cpus {
            self.per_core_iterations.fetch_add(1, Ordering::SeqCst);
            if *cpu == CpuModel::SandyBridge {
                found = 1;
            }
        }
        found
    }

    /// Total iterations of the per-core loop so far.
    pub fn per_core_iterations(&self) -> u64 {
        self.per_core_iterations.load(Ordering::SeqCst)
    }

    pub fn env_digest(&self) -> Value {
        let vars = self.env_vars.lock();
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (k, v) in vars.iter() {
            for b in k.bytes().chain(*b"=").chain(v.bytes()).chain([0]) {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        (h >> 1) as Value
    }

    pub fn set_env_var(&self, key: &str, value: &str) {
        self.env_vars
            .lock()
            .insert(key.to_owned(), value.to_owned());
    }

    /// Active MTU and link state packed into one value.
    pub fn port_attrs(&self) -> Value {
        4096 << 8 | 1
    }

    pub fn gid_index(&self) -> Value {
        3
    }

    /// Makes the next `times` calls of `api` fail.
    pub fn inject_fault(&self, api: &str, times: u32) {
        *self.faults.lock().entry(api.to_owned()).or_insert(0) += times;
    }

    pub fn take_fault(&self, api: &str) -> bool {
        let mut faults = self.faults.lock();
        match faults.get_mut(api) {
            Some(n) if *n > 0 => {
                *n -= 1;
                true
            }
            _ => false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HostConfig {
    pub name: String,
    pub costs: CostModel,
    pub device_count: usize,
    /// Data path goes through the kernel: every post pays the syscall
    /// penalty and QP connection is a single kernel call.
    pub kernel_mediated: bool,
    /// How many of the `core_count` cores are Sandy Bridge parts.
    pub sandy_bridge_cores: usize,
    pub env_vars: BTreeMap<String, String>,
    pub seed: u64,
    /// Overrides the standard subroutine registry.
    pub registry: Option<Arc<FunctionRegistry>>,
}

impl Default for HostConfig {
    fn default() -> Self {
        Self {
            name: "host".to_owned(),
            costs: CostModel::default(),
            device_count: 1,
            kernel_mediated: false,
            sandy_bridge_cores: 0,
            env_vars: [("MLX5_SINGLE_THREADED".to_owned(), "0".to_owned())].into(),
            seed: 0,
            registry: None,
        }
    }
}

impl HostConfig {
    pub fn with_costs(costs: CostModel) -> Self {
        Self {
            costs,
            ..Self::default()
        }
    }
}

/// A simulated machine attached to a [`Fabric`].
pub struct Host {
    id: u32,
    config: HostConfig,
    fabric: Arc<FabricInner>,
    costs: Arc<CostModel>,
    env: Arc<HostEnv>,
    registry: Arc<FunctionRegistry>,
    cache: Arc<CacheCell>,
    rng: Mutex<ChaCha8Rng>,
}

impl fmt::Debug for Host {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Host")
            .field("id", &self.id)
            .field("name", &self.config.name)
            .finish()
    }
}

impl Host {
    pub(crate) fn new(id: u32, config: HostConfig, fabric: Arc<FabricInner>) -> Self {
        let costs = config.costs.clone();
        let cores = costs.core_count as usize;
        let cpus = (0..cores)
            .map(|i| {
                if i < config.sandy_bridge_cores {
                    CpuModel::SandyBridge
                } else {
                    CpuModel::Modern
                }
            })
            .collect();
        let env = HostEnv::new(cpus, config.env_vars.clone(), config.device_count);
        let registry = config
            .registry
            .clone()
            .unwrap_or_else(|| Arc::new(FunctionRegistry::standard(&costs)));
        let seed = config.seed ^ (id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        Self {
            id,
            fabric,
            costs: Arc::new(costs),
            env: Arc::new(env),
            registry,
            cache: Arc::new(CacheCell::new()),
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            config,
        }
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.config.name
    }

    pub fn config(&self) -> &HostConfig {
        &self.config
    }

    pub fn costs(&self) -> &Arc<CostModel> {
        &self.costs
    }

    pub fn env(&self) -> &Arc<HostEnv> {
        &self.env
    }

    pub fn registry(&self) -> &Arc<FunctionRegistry> {
        &self.registry
    }

    /// The host-wide cache map shared by every process on this machine.
    pub fn cache(&self) -> &Arc<CacheCell> {
        &self.cache
    }

    pub fn kernel_mediated(&self) -> bool {
        self.config.kernel_mediated
    }

    pub fn fabric(&self) -> Fabric {
        Fabric::from_inner(self.fabric.clone())
    }

    pub fn gid(&self, device: u32) -> Gid {
        Gid::for_device(self.id, device)
    }

    pub fn devices(&self) -> Vec<DeviceId> {
        (0..self.config.device_count as u32)
            .map(|index| DeviceId {
                host: self.id,
                index,
            })
            .collect()
    }

    /// Dispatcher backed by this host's live cache.
    pub fn cached_dispatch(&self) -> Arc<CacheDispatch> {
        Arc::new(CacheDispatch::new(
            self.registry.clone(),
            self.env.clone(),
            CacheSource::Shared(self.cache.clone()),
        ))
    }

    pub fn uncached_dispatch(&self) -> Arc<CacheDispatch> {
        Arc::new(CacheDispatch::uncached(
            self.registry.clone(),
            self.env.clone(),
        ))
    }

    pub(crate) fn random_key(&self) -> u32 {
        self.rng.lock().random()
    }

    pub fn get_device_list(
        &self,
        dispatch: &CacheDispatch,
        timeline: &Timeline,
    ) -> Result<Vec<DeviceId>, VerbsError> {
        use crate::cache::names::*;
        dispatch.run_chain(
            &[(SCAN_SYSFS_DEVICES, &[]), (BUILD_DEVICE_ARRAY, &[])],
            timeline,
        )?;
        timeline.charge(
            "kernel:get_device_list",
            self.costs.kernel_cost(kernel_keys::GET_DEVICE_LIST),
        );
        Ok(self.devices())
    }

    pub fn open_device(
        self: &Arc<Self>,
        device: DeviceId,
        dispatch: Arc<CacheDispatch>,
        timeline: &Timeline,
    ) -> Result<DeviceContext, VerbsError> {
        DeviceContext::open(self, device, dispatch, timeline)
    }

    /// Fails with [`VerbsError::Injected`] if a fault was injected for `api`,
    /// invalidating the cache the call went through.
    pub(crate) fn check_fault(
        &self,
        api: &'static str,
        dispatch: &CacheDispatch,
    ) -> Result<(), VerbsError> {
        if self.env.take_fault(api) {
            dispatch.report_error();
            return Err(VerbsError::Injected(api));
        }
        Ok(())
    }
}
