//! Activation probabilities and variant choice for the built-in policies.

use rand::{Rng, RngCore};

use crate::pir::VariantKind;
use crate::variants::FunctionDescriptor;

/// Probability of the hottest rank under the profile-guided policy.
pub const PROFILE_GUIDED_MIN: f64 = 0.01;

/// A partitioning policy: a probability table computed once at startup and
/// a per-round variant choice.
pub trait Policy: Send {
    fn name(&self) -> &str;

    /// Returns the sanitized-activation probability of every descriptor.
    fn load_policy(&mut self, descriptors: &[FunctionDescriptor]) -> Vec<f64>;

    /// Picks the variant for one slot given its probability.
    fn activate_variant(&mut self, d: &FunctionDescriptor, p: f64, rng: &mut dyn RngCore) -> u32 {
        choose_variant(d, p, rng.gen::<f64>())
    }
}

/// Sanitized iff `u < p`; otherwise the remaining variants share `1 - p`
/// evenly, reusing `u` so one draw decides the round.
pub fn choose_variant(d: &FunctionDescriptor, p: f64, u: f64) -> u32 {
    let k = d.variants.len() as u32;
    let primary = d.primary_index();
    if k == 1 || u < p {
        return primary;
    }
    if k == 2 {
        return 1 - primary;
    }
    let others: Vec<u32> = (0..k).filter(|&i| i != primary).collect();
    let r = ((u - p) / (1.0 - p) * others.len() as f64) as usize;
    others[r.min(others.len() - 1)]
}

fn multi(d: &FunctionDescriptor) -> bool {
    d.variants.len() > 1
}

/// Even split: `1/k` for `k` variants.
pub fn compute_random(descriptors: &[FunctionDescriptor]) -> Vec<f64> {
    descriptors.iter().map(|d| 1.0 / d.variants.len() as f64).collect()
}

/// Linear in rank: the most executed function gets 0.01, the least executed
/// 1.0. Ties keep descriptor order.
pub fn compute_profile_guided(descriptors: &[FunctionDescriptor]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..descriptors.len()).filter(|&i| multi(&descriptors[i])).collect();
    order.sort_by(|&a, &b| descriptors[b].exec_count.cmp(&descriptors[a].exec_count));
    let m = order.len();
    let mut p = vec![1.0; descriptors.len()];
    if m > 1 {
        for (rank0, &i) in order.iter().enumerate() {
            p[i] = PROFILE_GUIDED_MIN + rank0 as f64 / (m - 1) as f64 * (1.0 - PROFILE_GUIDED_MIN);
        }
    }
    p
}

/// The budget is `budget_fraction` of the unsanitized baseline cost, split
/// evenly over the multi-variant functions; each function may then spend its
/// share on sanitized calls.
pub fn compute_expected_cost(descriptors: &[FunctionDescriptor], budget_fraction: f64) -> Vec<f64> {
    let baseline: f64 = descriptors
        .iter()
        .filter(|d| multi(d))
        .map(|d| d.cost_unsanitized() as f64 * d.exec_count as f64)
        .sum();
    let m = descriptors.iter().filter(|d| multi(d)).count();
    let share = if m == 0 { 0.0 } else { budget_fraction * baseline / m as f64 };
    descriptors
        .iter()
        .map(|d| {
            let delta = d.cost_delta();
            if !multi(d) || d.exec_count == 0 || delta == 0 {
                1.0
            } else {
                (share / (delta as f64 * d.exec_count as f64)).clamp(0.0, 1.0)
            }
        })
        .collect()
}

/// Total sanitization budget in cost units.
pub fn total_budget(descriptors: &[FunctionDescriptor], budget_fraction: f64) -> f64 {
    budget_fraction
        * descriptors
            .iter()
            .filter(|d| multi(d))
            .map(|d| d.cost_unsanitized() as f64 * d.exec_count as f64)
            .sum::<f64>()
}

pub struct RandomPolicy;

impl Policy for RandomPolicy {
    fn name(&self) -> &str {
        "random"
    }
    fn load_policy(&mut self, d: &[FunctionDescriptor]) -> Vec<f64> {
        compute_random(d)
    }
}

pub struct ProfileGuidedPolicy;

impl Policy for ProfileGuidedPolicy {
    fn name(&self) -> &str {
        "profile_guided"
    }
    fn load_policy(&mut self, d: &[FunctionDescriptor]) -> Vec<f64> {
        compute_profile_guided(d)
    }
}

pub struct ExpectedCostPolicy {
    pub budget_fraction: f64,
}

impl Policy for ExpectedCostPolicy {
    fn name(&self) -> &str {
        "expected_cost"
    }
    fn load_policy(&mut self, d: &[FunctionDescriptor]) -> Vec<f64> {
        compute_expected_cost(d, self.budget_fraction)
    }
}

/// Starts every slot on its coverage variant. Later switches are driven
/// synchronously by the fuzzer, not by partitioning rounds.
pub struct FuzzingPolicy;

impl Policy for FuzzingPolicy {
    fn name(&self) -> &str {
        "fuzzing"
    }
    fn load_policy(&mut self, d: &[FunctionDescriptor]) -> Vec<f64> {
        vec![0.0; d.len()]
    }
    fn activate_variant(&mut self, d: &FunctionDescriptor, _p: f64, _rng: &mut dyn RngCore) -> u32 {
        d.variant_index(VariantKind::Coverage).unwrap_or_else(|| d.primary_index())
    }
}

/// Pins every slot to one variant kind (falling back to the slot's primary
/// variant); used for all-sanitized and all-unsanitized tables.
pub struct FixedPolicy(pub VariantKind);

impl Policy for FixedPolicy {
    fn name(&self) -> &str {
        "fixed"
    }
    fn load_policy(&mut self, d: &[FunctionDescriptor]) -> Vec<f64> {
        let sanitized = self.0 == VariantKind::Sanitized;
        vec![if sanitized { 1.0 } else { 0.0 }; d.len()]
    }
    fn activate_variant(&mut self, d: &FunctionDescriptor, _p: f64, _rng: &mut dyn RngCore) -> u32 {
        d.variant_index(self.0).unwrap_or_else(|| d.primary_index())
    }
}
