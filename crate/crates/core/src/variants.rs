//! Variant planning, cloning, dispatch indirection and descriptor metadata.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pir::{
    validate, BasicBlock, Function, Inst, Operand, Program, SlotDecl, Terminator, ValidationError, VariantKind,
};
use crate::profiler::{estimate_cost, CostModel, Profile};
use crate::sanitize::{apply_checks, CheckConfig, SanitizeError};

pub const METADATA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuildMode {
    /// Sanitized and unsanitized variants for run-time partitioning.
    #[default]
    Partition,
    /// Coverage, sanitized and fast tiers for the fuzzer.
    Fuzz,
    /// Single coverage body per function carrying checks: the fuzzing baseline.
    FuzzBaseline,
    /// Two identical unchecked clones per function, isolating dispatch cost.
    Identical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanConfig {
    pub checks: CheckConfig,
    /// Functions with a profile count below this are cold.
    pub hot_threshold: u64,
    pub mode: BuildMode,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig { checks: CheckConfig::ADDRESS, hot_threshold: 1, mode: BuildMode::Partition }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionPlan {
    pub name: String,
    pub variants: Vec<VariantKind>,
    pub hot: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantPlan {
    pub functions: Vec<FunctionPlan>,
}

impl VariantPlan {
    pub fn get(&self, name: &str) -> Option<&FunctionPlan> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn is_multi(&self, name: &str) -> bool {
        self.get(name).is_some_and(|f| f.variants.len() > 1)
    }

    pub fn total_bodies(&self) -> usize {
        self.functions.iter().map(|f| f.variants.len()).sum()
    }
}

#[derive(Debug, Error)]
pub enum VariantError {
    #[error("variant name `{0}` collides with an existing name")]
    NameCollision(String),
    #[error("function `{0}` is multi-variant but has no slot")]
    MissingSlot(String),
    #[error("plan names unknown function `{0}`")]
    UnknownFunction(String),
    #[error("unsupported metadata version {0}")]
    MetadataVersion(u32),
    #[error("malformed metadata: {0}")]
    Malformed(String),
    #[error(transparent)]
    Sanitize(#[from] SanitizeError),
    #[error(transparent)]
    Invalid(#[from] ValidationError),
}

/// Decides which variants each function gets.
pub fn select_variant_plan(program: &Program, profile: Option<&Profile>, cfg: &PlanConfig) -> VariantPlan {
    use VariantKind::*;
    let functions = program
        .functions
        .iter()
        .map(|f| {
            // Without a profile every function is treated as hot.
            let hot = profile.is_none_or(|p| p.count(&f.name) >= cfg.hot_threshold);
            let variants = match cfg.mode {
                BuildMode::Identical => vec![Unsanitized, Unsanitized],
                BuildMode::FuzzBaseline => vec![Coverage],
                _ if !hot => vec![Sanitized],
                BuildMode::Fuzz => vec![Coverage, Sanitized, Fast],
                BuildMode::Partition if f.attrs.no_memory_access && !cfg.checks.enable_ub => vec![Unsanitized],
                BuildMode::Partition => vec![Unsanitized, Sanitized],
            };
            FunctionPlan { name: f.name.clone(), variants, hot }
        })
        .collect();
    VariantPlan { functions }
}

pub fn variant_name(function: &str, index: usize) -> String {
    format!("{function}_{index}")
}

/// Prepends a `cov_hit` to every block, numbering from `next_id`.
pub fn instrument_coverage(f: &Function, next_id: &mut u32) -> Function {
    let mut g = f.clone();
    for b in &mut g.blocks {
        b.insts.insert(0, Inst::CovHit { id: *next_id });
        *next_id += 1;
    }
    g.instrumented.coverage = true;
    g
}

fn make_body(
    f: &Function,
    kind: VariantKind,
    checks: &CheckConfig,
    cov_id: &mut u32,
) -> Result<Function, VariantError> {
    let mut g = Function { kind, ..f.clone() };
    let any_checks = checks.enable_address || checks.enable_ub;
    match kind {
        VariantKind::Sanitized if any_checks => g = apply_checks(&g, checks)?,
        VariantKind::Coverage => {
            g = instrument_coverage(&g, cov_id);
        }
        _ => {}
    }
    Ok(g)
}

/// Materialises the planned variants. Multi-variant functions get bodies
/// named `f_0, f_1, ...` inserted after the original, which stays in place
/// until [`build_indirection`]. Single-variant functions keep their name.
pub fn clone_variants(program: &Program, plan: &VariantPlan, checks: &CheckConfig) -> Result<Program, VariantError> {
    for fp in &plan.functions {
        if program.function(&fp.name).is_none() {
            return Err(VariantError::UnknownFunction(fp.name.clone()));
        }
    }
    let mut taken: BTreeSet<String> = program
        .functions
        .iter()
        .map(|f| f.name.clone())
        .chain(program.externs.iter().cloned())
        .chain(program.globals.iter().map(|g| g.name.clone()))
        .collect();
    let mut cov_id = 0u32;
    let mut out = Program { functions: Vec::new(), ..program.clone() };
    for f in &program.functions {
        let Some(fp) = plan.get(&f.name) else {
            out.functions.push(f.clone());
            continue;
        };
        match fp.variants.as_slice() {
            [VariantKind::Unsanitized] => out.functions.push(f.clone()),
            [VariantKind::Coverage] => {
                let mut g = make_body(f, VariantKind::Coverage, checks, &mut cov_id)?;
                if checks.enable_address || checks.enable_ub {
                    g = apply_checks(&g, checks)?;
                }
                out.functions.push(g);
            }
            [kind] => out.functions.push(make_body(f, *kind, checks, &mut cov_id)?),
            kinds => {
                out.functions.push(f.clone());
                for (i, kind) in kinds.iter().enumerate() {
                    let name = variant_name(&f.name, i);
                    if !taken.insert(name.clone()) {
                        return Err(VariantError::NameCollision(name));
                    }
                    let mut g = make_body(f, *kind, checks, &mut cov_id)?;
                    g.name = name;
                    g.attrs.address_taken = false;
                    g.attrs.external_visible = false;
                    out.functions.push(g);
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Indirection {
    pub program: Program,
    /// Variant count per slot, in slot order.
    pub table_layout: Vec<u32>,
    /// Functions whose original name now belongs to a trampoline.
    pub trampolines: Vec<String>,
}

fn fresh_reg(f: &Function) -> String {
    let mut r = "ret".to_string();
    while f.params.iter().any(|p| p.name == r) {
        r.push('_');
    }
    r
}

fn trampoline(f: &Function, slot: u32) -> Function {
    let dst = fresh_reg(f);
    let args = f.params.iter().map(|p| Operand::Reg(p.name.clone())).collect();
    let body = BasicBlock {
        label: "entry".into(),
        insts: vec![Inst::CallSlot { dst: Some(dst.clone()), slot, args }],
        term: Terminator::Return(Some(Operand::Reg(dst))),
    };
    let mut t = Function::new(f.name.clone(), f.params.clone(), vec![body]);
    t.kind = VariantKind::Trampoline;
    t.attrs.address_taken = f.attrs.address_taken;
    t.attrs.external_visible = f.attrs.external_visible;
    t
}

/// Creates one slot per multi-variant function, rewrites direct calls into
/// slot dispatches and keeps a trampoline under the original name only where
/// the name can still be reached from outside (external, address-taken or
/// the program entry). Other originals are dropped.
pub fn build_indirection(program: &Program, plan: &VariantPlan) -> Result<Indirection, VariantError> {
    let mut slots = Vec::new();
    let mut slot_of: HashMap<String, u32> = HashMap::new();
    for f in &program.functions {
        let Some(fp) = plan.get(&f.name).filter(|fp| fp.variants.len() > 1) else { continue };
        let variants: Vec<(VariantKind, String)> = fp
            .variants
            .iter()
            .enumerate()
            .map(|(i, k)| (*k, variant_name(&f.name, i)))
            .collect();
        for (_, n) in &variants {
            if program.function(n).is_none() {
                return Err(VariantError::MissingSlot(f.name.clone()));
            }
        }
        slot_of.insert(f.name.clone(), (program.slots.len() + slots.len()) as u32);
        slots.push(SlotDecl { function: f.name.clone(), variants });
    }
    for fp in &plan.functions {
        if fp.variants.len() > 1 && !slot_of.contains_key(&fp.name) {
            return Err(VariantError::MissingSlot(fp.name.clone()));
        }
    }

    let mut out = Program { functions: Vec::new(), ..program.clone() };
    out.slots.extend(slots);
    let mut trampolines = Vec::new();
    for f in &program.functions {
        if let Some(&slot) = slot_of.get(&f.name) {
            let keep = f.attrs.external_visible || f.attrs.address_taken || f.name == program.entry;
            if keep {
                out.functions.push(trampoline(f, slot));
                trampolines.push(f.name.clone());
            }
            continue;
        }
        let mut g = f.clone();
        for b in &mut g.blocks {
            for i in &mut b.insts {
                if let Inst::Call { dst, callee, args } = i {
                    if let Some(&slot) = slot_of.get(callee.as_str()) {
                        *i = Inst::CallSlot { dst: dst.take(), slot, args: std::mem::take(args) };
                    }
                }
            }
        }
        out.functions.push(g);
    }
    validate(&out)?;
    let table_layout = out.slots.iter().map(|s| s.variants.len() as u32).collect();
    Ok(Indirection { program: out, table_layout, trampolines })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantInfo {
    pub kind: VariantKind,
    pub name: String,
    pub cost: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionDescriptor {
    pub function: String,
    pub slot: u32,
    pub variants: Vec<VariantInfo>,
    pub exec_count: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub activation_probability: Option<f64>,
}

impl FunctionDescriptor {
    pub fn variant_index(&self, kind: VariantKind) -> Option<u32> {
        self.variants.iter().position(|v| v.kind == kind).map(|i| i as u32)
    }

    /// Index activated with the sanitized probability: the sanitized variant,
    /// or the last variant when none is sanitized.
    pub fn primary_index(&self) -> u32 {
        self.variant_index(VariantKind::Sanitized).unwrap_or(self.variants.len() as u32 - 1)
    }

    /// Index activated otherwise: the unsanitized variant, or the first one.
    pub fn fallback_index(&self) -> u32 {
        self.variant_index(VariantKind::Unsanitized).unwrap_or(0)
    }

    pub fn cost_of(&self, kind: VariantKind) -> Option<u64> {
        self.variants.iter().find(|v| v.kind == kind).map(|v| v.cost)
    }

    pub fn cost_sanitized(&self) -> u64 {
        self.variants[self.primary_index() as usize].cost
    }

    pub fn cost_unsanitized(&self) -> u64 {
        self.variants[self.fallback_index() as usize].cost
    }

    /// Extra cost per call when the sanitized variant is active.
    pub fn cost_delta(&self) -> u64 {
        self.cost_sanitized().saturating_sub(self.cost_unsanitized())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub version: u32,
    pub module: String,
    pub descriptors: Vec<FunctionDescriptor>,
}

impl Metadata {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metadata serializes")
    }

    pub fn from_json(text: &str) -> Result<Metadata, VariantError> {
        let v: serde_json::Value = serde_json::from_str(text).map_err(|e| VariantError::Malformed(e.to_string()))?;
        let version = v.get("version").and_then(|x| x.as_u64()).unwrap_or(0) as u32;
        if version != METADATA_VERSION {
            return Err(VariantError::MetadataVersion(version));
        }
        serde_json::from_value(v).map_err(|e| VariantError::Malformed(e.to_string()))
    }
}

/// One descriptor per slot, in slot order.
pub fn emit_metadata(
    program: &Program,
    profile: Option<&Profile>,
    model: &CostModel,
    module: &str,
) -> Metadata {
    let descriptors = program
        .slots
        .iter()
        .enumerate()
        .map(|(slot, s)| FunctionDescriptor {
            function: s.function.clone(),
            slot: slot as u32,
            variants: s
                .variants
                .iter()
                .map(|(kind, name)| VariantInfo {
                    kind: *kind,
                    name: name.clone(),
                    cost: program.function(name).map_or(0, |f| estimate_cost(f, model)),
                })
                .collect(),
            exec_count: profile.map_or(0, |p| p.count(&s.function)),
            activation_probability: None,
        })
        .collect();
    Metadata { version: METADATA_VERSION, module: module.to_string(), descriptors }
}

/// Output of the whole build pipeline.
#[derive(Debug, Clone)]
pub struct Build {
    pub program: Program,
    pub plan: VariantPlan,
    pub metadata: Metadata,
    pub trampolines: Vec<String>,
}

pub fn build(
    program: &Program,
    profile: Option<&Profile>,
    cfg: &PlanConfig,
    model: &CostModel,
    module: &str,
) -> Result<Build, VariantError> {
    let plan = select_variant_plan(program, profile, cfg);
    let cloned = clone_variants(program, &plan, &cfg.checks)?;
    let ind = build_indirection(&cloned, &plan)?;
    let metadata = emit_metadata(&ind.program, profile, model, module);
    Ok(Build { program: ind.program, plan, metadata, trampolines: ind.trampolines })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pir::{parse_program, serialize_program};
    use crate::profiler::FunctionCounts;

    const SRC: &str = "
func pure(x: i64) { b0: y = add x 1; return y }
func touch(p: ptr) { b0: v = load8 p; return v }
func cb(p: ptr) { b0: v = load8 p; return v }
func never(p: ptr) { b0: store8 p 1; return }
func main() {
b0:
  p = alloc 4
  a = call pure 1
  b = call touch p
  f = take_address cb
  c = call_ref f p
  return a
}
";

    fn profile(counts: &[(&str, u64)]) -> Profile {
        let mut p = Profile::default();
        for (n, c) in counts {
            p.functions.insert(n.to_string(), FunctionCounts { exec_count: *c, blocks: Default::default() });
        }
        p
    }

    #[test]
    fn plan_rules() {
        let p = parse_program(SRC).unwrap();
        let prof = profile(&[("pure", 1_000_000), ("touch", 5), ("cb", 5), ("main", 1)]);
        let plan = select_variant_plan(&p, Some(&prof), &PlanConfig::default());
        use VariantKind::*;
        assert_eq!(plan.get("never").unwrap().variants, vec![Sanitized]);
        assert_eq!(plan.get("pure").unwrap().variants, vec![Unsanitized]);
        assert_eq!(plan.get("touch").unwrap().variants, vec![Unsanitized, Sanitized]);
        let ub = PlanConfig { checks: CheckConfig::ALL, ..Default::default() };
        let plan = select_variant_plan(&p, Some(&prof), &ub);
        assert_eq!(plan.get("pure").unwrap().variants, vec![Unsanitized, Sanitized]);
    }

    #[test]
    fn indirection_structure() {
        let p = parse_program(SRC).unwrap();
        let prof = profile(&[("pure", 9), ("touch", 5), ("cb", 5), ("main", 1)]);
        let b = build(&p, Some(&prof), &PlanConfig::default(), &CostModel::default(), "m").unwrap();
        let q = &b.program;
        // touch: internal, so no trampoline survives; cb is address-taken.
        assert!(q.function("touch").is_none());
        assert!(q.function("touch_0").is_some() && q.function("touch_1").is_some());
        assert_eq!(q.function("cb").unwrap().kind, VariantKind::Trampoline);
        assert_eq!(q.function("main").unwrap().kind, VariantKind::Trampoline);
        assert_eq!(q.function("never").unwrap().kind, VariantKind::Sanitized);
        assert_eq!(q.function("pure").unwrap(), p.function("pure").unwrap());
        assert_eq!(b.trampolines, vec!["cb".to_string(), "main".to_string()]);
        for f in &q.functions {
            for callee in f.direct_callees() {
                assert!(!b.plan.is_multi(callee), "{} calls {}", f.name, callee);
            }
        }
        assert_eq!(b.metadata.descriptors.len(), 3);
        for (i, d) in b.metadata.descriptors.iter().enumerate() {
            assert_eq!(d.slot, i as u32);
            assert!(d.cost_sanitized() > d.cost_unsanitized());
        }
        assert_eq!(b.metadata.descriptors[0].exec_count, 5);
        assert_eq!(q.functions.len() - b.trampolines.len(), b.plan.total_bodies());
        // Reparse equals.
        assert_eq!(&parse_program(&serialize_program(q)).unwrap(), q);
    }

    #[test]
    fn no_multi_variant_functions_leave_program_unchanged() {
        let p = parse_program("func main() no_memory_access { b0: return 1 }").unwrap();
        let b = build(&p, None, &PlanConfig::default(), &CostModel::default(), "m").unwrap();
        assert_eq!(b.program, p);
        assert!(b.metadata.descriptors.is_empty());
    }

    #[test]
    fn name_collision_is_reported() {
        let p = parse_program("func f(p: ptr) { b0: v = load8 p; return v }\nfunc f_1() { b0: return }\nfunc main() { b0: return }").unwrap();
        let plan = select_variant_plan(&p, None, &PlanConfig::default());
        assert!(matches!(
            clone_variants(&p, &plan, &CheckConfig::ADDRESS),
            Err(VariantError::NameCollision(n)) if n == "f_1"
        ));
    }

    #[test]
    fn metadata_version_is_checked() {
        let m = Metadata { version: METADATA_VERSION, module: "m".into(), descriptors: vec![] };
        assert_eq!(Metadata::from_json(&m.to_json()).unwrap(), m);
        assert!(matches!(
            Metadata::from_json("{\"version\": 2, \"module\": \"m\", \"descriptors\": []}"),
            Err(VariantError::MetadataVersion(2))
        ));
    }
}
