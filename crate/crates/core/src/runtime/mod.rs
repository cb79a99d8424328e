//! Module registration, runtime initialisation and the partitioning loop.
//!
//! The dispatch table is the only state shared with executing code. The
//! partitioner writes slots with single atomic stores; readers never lock.

mod config;
mod policy;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

pub use config::{PolicyConfig, PolicyKind, SEED_ENV};
pub use policy::*;

use crate::dispatch::DispatchTable;
use crate::variants::FunctionDescriptor;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RuntimeError {
    #[error("module `{0}` registered after runtime initialisation")]
    RegisterAfterInit(String),
    #[error("no module registered")]
    EmptyRegistry,
    #[error("runtime already initialised")]
    AlreadyInitialised,
    #[error("runtime not initialised")]
    NotInitialised,
    #[error("custom policy selected but no policy hooks supplied")]
    MissingCustomPolicy,
    #[error("descriptor for `{function}` names slot {slot}, module has {len} descriptors")]
    BadDescriptor { function: String, slot: u32, len: usize },
    #[error("configuration: {0}")]
    Config(String),
}

/// A registered module: its descriptors occupy `first_slot..first_slot+len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModuleHandle {
    pub id: String,
    pub first_slot: u32,
    pub len: usize,
}

/// Performs partitioning rounds over a dispatch table.
pub struct Partitioner {
    descriptors: Arc<Vec<FunctionDescriptor>>,
    probabilities: Vec<f64>,
    policy: Box<dyn Policy>,
    rng: ChaCha20Rng,
    table: Arc<DispatchTable>,
}

impl Partitioner {
    pub fn new(
        descriptors: Arc<Vec<FunctionDescriptor>>,
        mut policy: Box<dyn Policy>,
        seed: u64,
        table: Arc<DispatchTable>,
    ) -> Self {
        let probabilities = policy.load_policy(&descriptors);
        Partitioner { descriptors, probabilities, policy, rng: ChaCha20Rng::seed_from_u64(seed), table }
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    /// One round: choose a variant per slot and store it only if it differs
    /// from the current one. Returns the number of stores.
    pub fn partition_once(&mut self) -> usize {
        let mut writes = 0;
        for (d, &p) in self.descriptors.iter().zip(&self.probabilities) {
            let v = self.policy.activate_variant(d, p, &mut self.rng);
            if self.table.update(d.slot as usize, v) {
                writes += 1;
            }
        }
        writes
    }
}

struct Background {
    stop: Sender<()>,
    handle: JoinHandle<()>,
}

struct Active {
    table: Arc<DispatchTable>,
    partitioner: Arc<Mutex<Partitioner>>,
    probabilities: Vec<f64>,
    seed: u64,
    rounds: Arc<AtomicU64>,
    background: Option<Background>,
}

#[derive(Default)]
pub struct Runtime {
    modules: Vec<ModuleHandle>,
    descriptors: Vec<FunctionDescriptor>,
    active: Option<Active>,
}

pub fn policy_for(config: &PolicyConfig) -> Result<Box<dyn Policy>, RuntimeError> {
    Ok(match config.policy {
        PolicyKind::Random => Box::new(RandomPolicy),
        PolicyKind::ProfileGuided => Box::new(ProfileGuidedPolicy),
        PolicyKind::ExpectedCost => Box::new(ExpectedCostPolicy { budget_fraction: config.budget_fraction }),
        PolicyKind::Fuzzing => Box::new(FuzzingPolicy),
        PolicyKind::Custom => return Err(RuntimeError::MissingCustomPolicy),
    })
}

impl Runtime {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a module's descriptors, renumbering slots after those already
    /// registered. Registering the same module id again is a no-op.
    pub fn register_module(
        &mut self,
        id: &str,
        descriptors: &[FunctionDescriptor],
    ) -> Result<ModuleHandle, RuntimeError> {
        if self.active.is_some() {
            return Err(RuntimeError::RegisterAfterInit(id.to_string()));
        }
        if let Some(h) = self.modules.iter().find(|m| m.id == id) {
            return Ok(h.clone());
        }
        for d in descriptors {
            if d.slot as usize >= descriptors.len() {
                return Err(RuntimeError::BadDescriptor {
                    function: d.function.clone(),
                    slot: d.slot,
                    len: descriptors.len(),
                });
            }
        }
        let first_slot = self.descriptors.len() as u32;
        let mut local = descriptors.to_vec();
        local.sort_by_key(|d| d.slot);
        for d in &mut local {
            d.slot += first_slot;
        }
        self.descriptors.extend(local);
        let h = ModuleHandle { id: id.to_string(), first_slot, len: descriptors.len() };
        self.modules.push(h.clone());
        Ok(h)
    }

    pub fn descriptors(&self) -> &[FunctionDescriptor] {
        &self.descriptors
    }

    pub fn modules(&self) -> &[ModuleHandle] {
        &self.modules
    }

    pub fn is_initialised(&self) -> bool {
        self.active.is_some()
    }

    /// Initialises with a built-in policy.
    pub fn init_runtime(&mut self, config: &PolicyConfig) -> Result<(), RuntimeError> {
        let policy = policy_for(config)?;
        self.init_with_policy(config, policy)
    }

    /// Four steps: probabilities, seeding, one round to fill every slot, then
    /// the background partitioner when enabled.
    pub fn init_with_policy(&mut self, config: &PolicyConfig, policy: Box<dyn Policy>) -> Result<(), RuntimeError> {
        if self.active.is_some() {
            return Err(RuntimeError::AlreadyInitialised);
        }
        if self.modules.is_empty() {
            return Err(RuntimeError::EmptyRegistry);
        }
        config.validate()?;
        let table = Arc::new(DispatchTable::new(
            self.descriptors.iter().map(|d| d.variants.len() as u32).collect(),
        ));
        let seed = config.rng_seed.unwrap_or_else(|| rand::rngs::OsRng.next_u64());
        let descriptors = Arc::new(self.descriptors.clone());
        let mut partitioner = Partitioner::new(descriptors, policy, seed, table.clone());
        let probabilities = partitioner.probabilities().to_vec();
        for (d, p) in self.descriptors.iter_mut().zip(&probabilities) {
            d.activation_probability = Some(*p);
        }
        partitioner.partition_once();
        let partitioner = Arc::new(Mutex::new(partitioner));
        let rounds = Arc::new(AtomicU64::new(0));
        let background = (config.background && config.policy != PolicyKind::Fuzzing)
            .then(|| spawn_loop(partitioner.clone(), rounds.clone(), config.wake_interval()));
        self.active = Some(Active { table, partitioner, probabilities, seed, rounds, background });
        Ok(())
    }

    fn active(&self) -> Result<&Active, RuntimeError> {
        self.active.as_ref().ok_or(RuntimeError::NotInitialised)
    }

    pub fn table(&self) -> Result<Arc<DispatchTable>, RuntimeError> {
        Ok(self.active()?.table.clone())
    }

    pub fn probabilities(&self) -> Result<&[f64], RuntimeError> {
        Ok(&self.active()?.probabilities)
    }

    /// The seed actually used, so entropy-seeded runs can be replayed.
    pub fn seed(&self) -> Result<u64, RuntimeError> {
        Ok(self.active()?.seed)
    }

    pub fn partition_once(&self) -> Result<usize, RuntimeError> {
        let a = self.active()?;
        let writes = a.partitioner.lock().expect("partitioner lock").partition_once();
        a.rounds.fetch_add(1, Ordering::Relaxed);
        Ok(writes)
    }

    /// Rounds run after initialisation, by either the loop or explicit calls.
    pub fn rounds(&self) -> u64 {
        self.active.as_ref().map_or(0, |a| a.rounds.load(Ordering::Relaxed))
    }

    pub fn has_background(&self) -> bool {
        self.active.as_ref().is_some_and(|a| a.background.is_some())
    }

    /// Stops the background loop and waits for it.
    pub fn shutdown(&mut self) {
        if let Some(bg) = self.active.as_mut().and_then(|a| a.background.take()) {
            let _ = bg.stop.send(());
            let _ = bg.handle.join();
        }
    }
}

impl Drop for Runtime {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn spawn_loop(partitioner: Arc<Mutex<Partitioner>>, rounds: Arc<AtomicU64>, interval: Duration) -> Background {
    let (stop, rx) = mpsc::channel();
    let handle = std::thread::Builder::new()
        .name("partitioner".into())
        .spawn(move || run_partitioner_loop(&partitioner, &rounds, interval, &rx))
        .expect("spawn partitioner thread");
    Background { stop, handle }
}

/// Runs a round every `interval` until a stop message arrives or the sender
/// is dropped.
pub fn run_partitioner_loop(
    partitioner: &Mutex<Partitioner>,
    rounds: &AtomicU64,
    interval: Duration,
    stop: &mpsc::Receiver<()>,
) {
    loop {
        match stop.recv_timeout(interval) {
            Err(RecvTimeoutError::Timeout) => {
                partitioner.lock().expect("partitioner lock").partition_once();
                rounds.fetch_add(1, Ordering::Relaxed);
            }
            _ => return,
        }
    }
}
