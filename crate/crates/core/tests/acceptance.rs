//! One line per acceptance criterion. Runs without the libtest harness so the
//! lines always reach stdout.

use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use rand::RngCore;
use statrs::distribution::{Binomial, DiscreteCDF};

use varsan::bench::{
    cold_bug_inputs, corpus, fixed_table, full_sanitized, hot_bug_inputs, planted_bugs, run_bench, run_partitioned,
    train_profile, BenchConfig, BenchOptions, COLD_BUG, CUSTOM_ALLOCATOR, FUZZ_BLIND, FUZZ_TOY, HOT_BUG,
};
use varsan::fuzz::{fuzz_campaign, replay, Corpus, FuzzConfig, Fuzzer, Tier};
use varsan::pir::{
    interpret, parse_program, ExecOptions, Image, Machine, Program, Status, TrapKind, VariantKind, DISPATCH_COST,
};
use varsan::profiler::{CostModel, Profile};
use varsan::runtime::{
    compute_expected_cost, compute_profile_guided, Partitioner, Policy, PolicyConfig, PolicyKind, ProfileGuidedPolicy,
    RandomPolicy,
};
use varsan::sanitize::CheckConfig;
use varsan::variants::{build, Build, BuildMode, FunctionDescriptor, PlanConfig, VariantInfo};
use varsan::DispatchTable;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn exec() -> ExecOptions {
    ExecOptions::default()
}

fn partition_build(program: &Program, profile: &Profile, hot_threshold: u64, checks: CheckConfig) -> Build {
    let cfg = PlanConfig { checks, hot_threshold, mode: BuildMode::Partition };
    build(program, Some(profile), &cfg, &CostModel::default(), "acc").unwrap()
}

fn descriptor(name: &str, slot: u32, unsan: u64, san: u64, count: u64) -> FunctionDescriptor {
    FunctionDescriptor {
        function: name.into(),
        slot,
        variants: vec![
            VariantInfo { kind: VariantKind::Unsanitized, name: format!("{name}_0"), cost: unsan },
            VariantInfo { kind: VariantKind::Sanitized, name: format!("{name}_1"), cost: san },
        ],
        exec_count: count,
        activation_probability: None,
    }
}

/// Runs `rounds` partitioning rounds and returns, per descriptor, the
/// fraction of rounds its sanitized variant was active, plus total writes.
fn frequencies(descs: Vec<FunctionDescriptor>, policy: Box<dyn Policy>, seed: u64, rounds: u64) -> (Vec<f64>, u64) {
    let n = descs.iter().map(|d| d.slot as usize + 1).max().unwrap_or(0);
    let mut counts = vec![1; n];
    for d in &descs {
        counts[d.slot as usize] = d.variants.len() as u32;
    }
    let table = Arc::new(DispatchTable::new(counts));
    let descs = Arc::new(descs);
    let mut part = Partitioner::new(descs.clone(), policy, seed, table.clone());
    let mut hits = vec![0u64; descs.len()];
    let mut writes = 0;
    for _ in 0..rounds {
        writes += part.partition_once() as u64;
        for (i, d) in descs.iter().enumerate() {
            if table.get(d.slot as usize) == d.primary_index() {
                hits[i] += 1;
            }
        }
    }
    (hits.iter().map(|&h| h as f64 / rounds as f64).collect(), writes)
}

fn c1_cold_code() -> Outcome {
    let program = parse_program(COLD_BUG).unwrap();
    let (train, reference) = cold_bug_inputs();
    let profile = train_profile(&program, &[train], "train", &exec()).unwrap();
    ensure(profile.count("rare") == 0, || "rare ran during training".into())?;
    let b = partition_build(&program, &profile, 1, CheckConfig::ADDRESS);
    ensure(!b.plan.is_multi("rare"), || "rare has more than one variant".into())?;
    let mut caught = 0;
    for seed in 0..1000 {
        let pc = PolicyConfig { policy: PolicyKind::ExpectedCost, budget_fraction: 0.01, rng_seed: Some(seed), ..Default::default() };
        let r = run_partitioned(&b, &reference, &pc, Some(16), &exec()).unwrap();
        if r.trap_kind() == Some(TrapKind::AddressCheck) && r.trap.as_ref().unwrap().function == "rare" {
            caught += 1;
        }
    }
    ensure(caught == 1000, || format!("{caught}/1000 runs trapped"))?;
    Ok(format!("{caught}/1000 runs trapped address_check in rare"))
}

fn c2_hot_code() -> Outcome {
    let program = parse_program(HOT_BUG).unwrap();
    let (train, reference) = hot_bug_inputs();
    let profile = train_profile(&program, &[train], "train", &exec()).unwrap();
    let b = partition_build(&program, &profile, 1, CheckConfig::ADDRESS);
    let budget = 0.5;
    let probs = compute_expected_cost(&b.metadata.descriptors, budget);
    let i = b.metadata.descriptors.iter().position(|d| d.function == "scale").unwrap();
    let p_star = probs[i];
    let n = 2000u64;
    let mut detected = 0u64;
    for seed in 0..n {
        let pc = PolicyConfig { policy: PolicyKind::ExpectedCost, budget_fraction: budget, rng_seed: Some(seed), ..Default::default() };
        let r = run_partitioned(&b, &reference, &pc, Some(40), &exec()).unwrap();
        match r.trap {
            Some(t) if t.kind == TrapKind::AddressCheck && t.function == "scale_1" => detected += 1,
            Some(t) => return Err(format!("unexpected trap {t:?}")),
            None => {}
        }
    }
    let dist = Binomial::new(p_star, n).unwrap();
    let (lo, hi) = (dist.inverse_cdf(0.005), dist.inverse_cdf(0.995));
    ensure(p_star > 0.0 && p_star < 1.0, || format!("p* = {p_star} is degenerate"))?;
    ensure((lo..=hi).contains(&detected), || format!("{detected}/{n} outside [{lo}, {hi}] for p* = {p_star:.4}"))?;
    Ok(format!("{detected}/{n} detected, p* = {p_star:.4}, 99% interval [{lo}, {hi}]"))
}

fn c3_formula() -> Outcome {
    // unsan, san, count
    let rows: [(u64, u64, u64); 6] = [(10, 13, 1000), (40, 60, 50), (5, 9, 0), (7, 7, 300), (100, 180, 2), (3, 4, 1)];
    let descs: Vec<_> = rows.iter().enumerate().map(|(i, &(u, s, c))| descriptor(&format!("f{i}"), i as u32, u, s, c)).collect();
    let mut single = descriptor("cold", 6, 0, 20, 0);
    single.variants.remove(0);
    let mut all = descs.clone();
    all.push(single);
    let mut worst = 0.0f64;
    let mut clamped = 0;
    for budget in [0.001, 0.01, 0.05, 0.3] {
        let got = compute_expected_cost(&all, budget);
        // Independent evaluation: B = budget * sum(u*c) over the six
        // two-variant rows, share = B / 6, p = min(1, share / ((s-u)*c)),
        // with p = 1 when c = 0 or s = u and for single-variant functions.
        let base: f64 = rows.iter().map(|&(u, _, c)| (u * c) as f64).sum();
        let share = budget * base / 6.0;
        let mut want: Vec<f64> = rows
            .iter()
            .map(|&(u, s, c)| if c == 0 || s == u { 1.0 } else { (share / ((s - u) * c) as f64).min(1.0) })
            .collect();
        want.push(1.0);
        clamped += want.iter().filter(|&&p| p == 1.0).count();
        for (g, w) in got.iter().zip(&want) {
            worst = worst.max((g - w).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("max deviation {worst:e}"))?;
    ensure(clamped > 12, || "no clamped case exercised".into())?;
    Ok(format!("max deviation {worst:e} over 4 budgets, {clamped} probabilities at 1"))
}

struct BudgetCase {
    name: &'static str,
    descriptors: Vec<FunctionDescriptor>,
    probs: Vec<f64>,
}

fn multi(d: &FunctionDescriptor) -> bool {
    d.variants.len() > 1
}

fn unclamped(c: &BudgetCase) -> bool {
    c.descriptors.iter().zip(&c.probs).filter(|(d, _)| multi(d)).all(|(_, &p)| p < 1.0)
        && c.descriptors.iter().any(multi)
}

fn c4_budget() -> Outcome {
    let budget = 0.01;
    let rounds = 200_000;
    let mut unclamped_cases = Vec::new();
    let mut clamped_cases = Vec::new();
    for bp in corpus() {
        let program = bp.program();
        let profile = train_profile(&program, &[&bp.train], "train", &exec()).unwrap();
        let case_for = |t: u64| {
            let b = partition_build(&program, &profile, t, CheckConfig::ADDRESS);
            let probs = compute_expected_cost(&b.metadata.descriptors, budget);
            BudgetCase { name: bp.name, descriptors: b.metadata.descriptors, probs }
        };
        clamped_cases.push(case_for(1));
        let mut counts: Vec<u64> = profile.functions.values().map(|f| f.exec_count).filter(|&c| c > 0).collect();
        counts.sort_unstable();
        counts.dedup();
        if let Some(c) = counts.into_iter().map(case_for).find(unclamped) {
            unclamped_cases.push(c);
        }
    }
    ensure(!unclamped_cases.is_empty(), || "no unclamped configuration found".into())?;
    let measure = |c: &BudgetCase, seed: u64| {
        let policy = Box::new(varsan::runtime::ExpectedCostPolicy { budget_fraction: budget });
        let (freq, _) = frequencies(c.descriptors.clone(), policy, seed, rounds);
        let spent: f64 = c
            .descriptors
            .iter()
            .zip(&freq)
            .filter(|(d, _)| multi(d))
            .map(|(d, f)| f * d.cost_delta() as f64 * d.exec_count as f64)
            .sum();
        let target = varsan::runtime::total_budget(&c.descriptors, budget);
        (spent, target)
    };
    let mut worst_rel = 0.0f64;
    for c in &unclamped_cases {
        let (spent, target) = measure(c, 11);
        let rel = (spent - target).abs() / target;
        worst_rel = worst_rel.max(rel);
        ensure(rel <= 0.05, || format!("{}: spent {spent:.2} vs budget {target:.2}", c.name))?;
    }
    let mut worst_ratio = 0.0f64;
    for c in &clamped_cases {
        if !c.descriptors.iter().any(multi) {
            continue;
        }
        let (spent, target) = measure(c, 12);
        worst_ratio = worst_ratio.max(spent / target);
        ensure(spent <= target * 1.05, || format!("{} clamped: spent {spent:.2} exceeds budget {target:.2}", c.name))?;
    }
    Ok(format!(
        "{} unclamped programs, worst relative error {:.2}%; clamped worst spend/budget {:.3}",
        unclamped_cases.len(),
        worst_rel * 100.0,
        worst_ratio
    ))
}

fn c5_profile_guided() -> Outcome {
    let counts = [5000u64, 1200, 800, 90, 7, 1];
    let descs: Vec<_> = counts.iter().enumerate().map(|(i, &c)| descriptor(&format!("f{i}"), i as u32, 10, 15, c)).collect();
    let exact = compute_profile_guided(&descs);
    let (freq, _) = frequencies(descs, Box::new(ProfileGuidedPolicy), 5, 100_000);
    let hottest = freq[0];
    let coldest = freq[counts.len() - 1];
    ensure((0.005..=0.015).contains(&hottest), || format!("hottest {hottest}"))?;
    ensure(coldest == 1.0, || format!("coldest {coldest}"))?;
    ensure(freq.windows(2).all(|w| w[0] <= w[1]), || format!("not monotone: {freq:?}"))?;
    ensure(exact[0] == 0.01 && exact[5] == 1.0, || format!("{exact:?}"))?;
    Ok(format!("hottest {hottest:.4}, coldest {coldest}, monotone over {} ranks", counts.len()))
}

fn c6_random() -> Outcome {
    let descs = vec![descriptor("f", 0, 10, 20, 100)];
    let (freq, _) = frequencies(descs, Box::new(RandomPolicy), 6, 100_000);
    ensure((freq[0] - 0.5).abs() <= 0.01, || format!("frequency {}", freq[0]))?;
    Ok(format!("sanitized frequency {:.4}", freq[0]))
}

struct Constant(f64);

impl Policy for Constant {
    fn name(&self) -> &str {
        "constant"
    }
    fn load_policy(&mut self, d: &[FunctionDescriptor]) -> Vec<f64> {
        vec![self.0; d.len()]
    }
}

fn c7_write_if_changed() -> Outcome {
    let rounds = 100_000u64;
    let slots = 4;
    let mut parts = Vec::new();
    for p in [0.1, 0.5, 0.9] {
        let descs: Vec<_> = (0..slots).map(|i| descriptor(&format!("f{i}"), i, 10, 20, 100)).collect();
        let (_, writes) = frequencies(descs, Box::new(Constant(p)), 7, rounds);
        let rate = writes as f64 / (rounds * slots as u64) as f64;
        let want = 2.0 * p * (1.0 - p);
        ensure((rate - want).abs() <= 0.01, || format!("p = {p}: {rate:.4} writes per slot-round, want {want:.4}"))?;
        parts.push(format!("p={p}: {rate:.4}"));
    }
    Ok(parts.join(", "))
}

fn c8_transparency() -> Outcome {
    let mut runs = 0;
    for bp in corpus() {
        let program = bp.program();
        let profile = train_profile(&program, &[&bp.train], "train", &exec()).unwrap();
        let b = partition_build(&program, &profile, 1, CheckConfig::ALL);
        let image = Image::compile(&b.program).unwrap();
        for input in [&bp.train, &bp.reference] {
            let want = interpret(&program, input, None, &exec()).unwrap();
            let mut check = |r: varsan::pir::ExecResult, label: &str| {
                runs += 1;
                ensure(r.status == Status::Ok && r.output == want.output && r.return_value == want.return_value, || {
                    format!("{} differs under {label}", bp.name)
                })
            };
            for kind in [VariantKind::Sanitized, VariantKind::Unsanitized] {
                let t = fixed_table(&b.program, kind);
                check(Machine::new(&image, exec()).run(input, Some(&t)).unwrap(), kind.as_str())?;
            }
            for seed in 0..20 {
                let pc = PolicyConfig { policy: PolicyKind::Random, rng_seed: Some(seed), ..Default::default() };
                check(run_partitioned(&b, input, &pc, Some(25), &exec()).unwrap(), "random schedule")?;
            }
        }
    }
    Ok(format!("{runs} runs, zero diffs"))
}

fn c9_sanitizer_suite() -> Outcome {
    let bugs = planted_bugs();
    ensure(bugs.len() >= 12, || "fewer than 12 planted bugs".into())?;
    for bug in &bugs {
        let p = full_sanitized(&parse_program(bug.source).unwrap(), &CheckConfig::ALL).unwrap();
        let r = interpret(&p, &bug.input, None, &exec()).unwrap();
        let t = r.trap.ok_or_else(|| format!("{} did not trap", bug.name))?;
        ensure(t.kind == bug.kind && t.function == bug.function && t.block == bug.block, || {
            format!("{}: got {} in {}/{}", bug.name, t.kind.as_str(), t.function, t.block)
        })?;
    }
    let p = full_sanitized(&parse_program(CUSTOM_ALLOCATOR).unwrap(), &CheckConfig::ALL).unwrap();
    let r = interpret(&p, &[], None, &exec()).unwrap();
    ensure(r.status == Status::Ok, || format!("custom allocator trapped: {:?}", r.trap))?;
    Ok(format!("{} planted bugs trap with the expected kind; custom allocator runs clean", bugs.len()))
}

fn fuzz_build(src: &str, mode: BuildMode) -> Build {
    let cfg = PlanConfig { checks: CheckConfig::ADDRESS, hot_threshold: 1, mode };
    build(&parse_program(src).unwrap(), None, &cfg, &CostModel::default(), "fuzz").unwrap()
}

fn c10_fuzz_mechanics() -> Outcome {
    let run = |seed: u64| -> Result<(u64, usize, Vec<String>), String> {
        let b = fuzz_build(FUZZ_TOY, BuildMode::Fuzz);
        let image = Image::compile(&b.program).unwrap();
        let cfg = FuzzConfig { seed, max_len: 64, ..Default::default() };
        let mut f = Fuzzer::new(&image, &b.program, cfg, Corpus::in_memory()).unwrap();
        // (a) every slot starts on its coverage variant
        ensure(f.state.tiers.iter().all(|&t| t == Tier::Coverage), || "startup tier is not coverage".into())?;
        let snapshot = f.table().unwrap().snapshot();
        for (i, s) in b.program.slots.iter().enumerate() {
            ensure(s.variants[snapshot[i] as usize].0 == VariantKind::Coverage, || format!("{} not on coverage", s.function))?;
        }
        let mut reexec = 0u64;
        let mut admitted = 0u64;
        let mut promoted = Vec::new();
        let mut input = b"seed".to_vec();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        for step in 0..20_000 {
            let out = f.fuzz_step(&input).map_err(|e| e.to_string())?;
            // (b) exactly one sanitized re-execution per admitted input
            let expected = if out.admitted { 2 } else { 1 };
            ensure(out.executions == expected, || format!("step {step}: {} executions", out.executions))?;
            if out.admitted {
                admitted += 1;
                reexec += 1;
                let again = &out.results[1];
                ensure(again.coverage.iter().all(|&c| c == 0), || "re-execution ran coverage variants".into())?;
            }
            // (c) fast tier only once every block of the function is covered
            for (slot, tier) in f.state.tiers.iter().enumerate() {
                let site = f.layout().site_for_slot(slot as u32).unwrap();
                let explored = f.coverage.fully_explored(site);
                ensure((*tier == Tier::Fast) == explored, || format!("{} tier {tier:?}, explored {explored}", site.function))?;
            }
            promoted.extend(out.promoted);
            if out.crash.is_some() {
                break;
            }
            let donors: Vec<&[u8]> = f.corpus.entries().iter().map(|e| e.input.as_slice()).collect();
            let base = donors[rng.next_u32() as usize % donors.len()].to_vec();
            input = varsan::fuzz::mutate(&base, &donors, &mut rng, 64).0;
        }
        ensure(reexec == admitted && reexec == f.corpus.len() as u64, || "re-executions != admissions".into())?;
        Ok((f.executions(), f.corpus.len(), promoted))
    };
    let first = run(3)?;
    ensure(first == run(3)?, || "same seed, different campaign".into())?;
    ensure(!first.2.is_empty(), || "nothing reached the fast tier".into())?;

    // (d) an input without new coverage runs on the fast variant and escapes
    let b = fuzz_build(FUZZ_BLIND, BuildMode::Fuzz);
    let image = Image::compile(&b.program).unwrap();
    let mut f = Fuzzer::new(&image, &b.program, FuzzConfig::default(), Corpus::in_memory()).unwrap();
    for warm in [[0u8, 0], [1, 0], [0, 1]] {
        f.fuzz_step(&warm).unwrap();
    }
    let poke = f.layout().sites.iter().position(|s| s.function == "poke").unwrap();
    ensure(f.state.tiers[poke] == Tier::Fast, || "poke not promoted".into())?;
    let bad = [0u8, 12];
    let out = f.fuzz_step(&bad).unwrap();
    ensure(!out.admitted && out.crash.is_none(), || format!("blind-spot input was caught: {:?}", out.crash))?;
    let r = replay(&b.program, &bad, None, &exec()).unwrap();
    ensure(r.trap_kind() == Some(TrapKind::AddressCheck), || "all-sanitized replay did not trap".into())?;
    Ok(format!(
        "{} executions, {} admitted, fast tier: {}; blind-spot input escapes and traps on replay",
        first.0,
        first.1,
        first.2.join(",")
    ))
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn c11_throughput() -> Outcome {
    let fuzz = fuzz_build(FUZZ_TOY, BuildMode::Fuzz);
    let base = fuzz_build(FUZZ_TOY, BuildMode::FuzzBaseline);
    let deep_slot = fuzz.program.slots.iter().find(|s| s.function == "deep").unwrap();
    let in_deep = |f: &str| f == "deep" || deep_slot.variants.iter().any(|(_, n)| n == f);
    let cfg = |seed| FuzzConfig { seed, max_executions: 30_000, max_len: 64, keep_going: true, ..Default::default() };
    let (mut fast, mut slow, mut found) = (Vec::new(), Vec::new(), 0);
    for seed in 0..10 {
        let r = fuzz_campaign(&fuzz.program, &[b"seed".to_vec()], cfg(seed)).unwrap();
        fast.push(r.execs_per_sec);
        if r.crashes.iter().any(|c| in_deep(&c.trap.function) && c.trap.kind == TrapKind::AddressCheck) {
            found += 1;
        }
        slow.push(fuzz_campaign(&base.program, &[b"seed".to_vec()], cfg(seed)).unwrap().execs_per_sec);
    }
    let (mf, ms) = (median(fast), median(slow));
    ensure(mf > ms, || format!("fuzz policy {mf:.0} exec/s vs all-sanitized {ms:.0} exec/s"))?;
    ensure(found >= 9, || format!("deep bug found in {found}/10 campaigns"))?;
    Ok(format!("median {mf:.0} vs {ms:.0} exec/s ({:.2}x); deep bug found in {found}/10", mf / ms))
}

fn c12_indirection() -> Outcome {
    let mut total_calls = 0;
    for bp in corpus() {
        let program = bp.program();
        let base = interpret(&program, &bp.reference, None, &exec()).unwrap();
        let cfg = PlanConfig { checks: CheckConfig::ADDRESS, hot_threshold: 1, mode: BuildMode::Identical };
        let b = build(&program, None, &cfg, &CostModel::default(), "id").unwrap();
        let t = DispatchTable::for_program(&b.program);
        let r = interpret(&b.program, &bp.reference, Some(&t), &exec()).unwrap();
        let extra = r.instructions_executed - base.instructions_executed;
        let calls = r.dispatched_calls();
        ensure(extra == calls * DISPATCH_COST, || format!("{}: {extra} extra vs {calls} dispatched calls", bp.name))?;
        ensure(r.output == base.output, || format!("{}: output differs", bp.name))?;
        total_calls += calls;
    }
    let opts = BenchOptions { seeds: vec![1], ..Default::default() };
    let report = run_bench(&corpus()[..1], &[BenchConfig::Identical], &opts).unwrap();
    let table = report.to_table();
    ensure(table.contains("not comparable to native wall-clock"), || "bench output lacks the comparability note".into())?;
    Ok(format!("extra == dispatched calls x {DISPATCH_COST} on all programs ({total_calls} calls); note present"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 12] = [
        ("cold-code guarantee", c1_cold_code),
        ("hot-code probabilistic detection", c2_hot_code),
        ("expected-cost formula", c3_formula),
        ("budget adherence", c4_budget),
        ("profile-guided endpoints", c5_profile_guided),
        ("random even split", c6_random),
        ("write only if changed", c7_write_if_changed),
        ("semantic transparency", c8_transparency),
        ("sanitizer unit suite", c9_sanitizer_suite),
        ("fuzzing policy mechanics", c10_fuzz_mechanics),
        ("fuzzing throughput", c11_throughput),
        ("indirection overhead accounting", c12_indirection),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
