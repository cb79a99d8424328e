use varsan::bench::FUZZ_TOY;
use varsan::fuzz::{content_name, fuzz_campaign, replay, Corpus, FuzzConfig, Fuzzer, Report, Tier};
use varsan::pir::{parse_program, ExecOptions, Image, Program, TrapKind};
use varsan::profiler::CostModel;
use varsan::sanitize::CheckConfig;
use varsan::variants::{build, BuildMode, PlanConfig};

fn toy(mode: BuildMode) -> Program {
    let cfg = PlanConfig { checks: CheckConfig::ADDRESS, hot_threshold: 1, mode };
    build(&parse_program(FUZZ_TOY).unwrap(), None, &cfg, &CostModel::default(), "toy").unwrap().program
}

fn cfg(seed: u64) -> FuzzConfig {
    FuzzConfig { seed, max_executions: 30_000, max_len: 64, ..Default::default() }
}

#[test]
fn fixed_seed_campaigns_match() {
    let p = toy(BuildMode::Fuzz);
    let a = fuzz_campaign(&p, &[b"seed".to_vec()], cfg(5)).unwrap();
    let b = fuzz_campaign(&p, &[b"seed".to_vec()], cfg(5)).unwrap();
    assert_eq!(a.without_timing(), b.without_timing());
    assert_eq!(a.crashes.len(), 1);
}

#[test]
fn crash_replays_with_recorded_and_sanitized_tables() {
    let p = toy(BuildMode::Fuzz);
    let r = fuzz_campaign(&p, &[b"seed".to_vec()], cfg(2)).unwrap();
    let crash = &r.crashes[0];
    assert!(crash.during_override);
    let again = replay(&p, &crash.input, Some(&crash.table), &ExecOptions::default()).unwrap();
    assert_eq!(again.trap.as_ref(), Some(&crash.trap));
    let sanitized = replay(&p, &crash.input, None, &ExecOptions::default()).unwrap();
    assert_eq!(sanitized.trap_kind(), Some(TrapKind::AddressCheck));
}

#[test]
fn fast_tier_is_left_only_for_the_override() {
    let p = toy(BuildMode::Fuzz);
    let image = Image::compile(&p).unwrap();
    let mut f = Fuzzer::new(&image, &p, cfg(8), Corpus::in_memory()).unwrap();
    let mut seen_fast = vec![false; f.state.tiers.len()];
    let mut input = b"seed".to_vec();
    for i in 0..3000u32 {
        let out = f.fuzz_step(&input).unwrap();
        assert!(!f.state.override_active);
        for (s, t) in f.state.tiers.iter().enumerate() {
            if seen_fast[s] {
                assert_eq!(*t, Tier::Fast);
            }
            seen_fast[s] |= *t == Tier::Fast;
        }
        if out.crash.is_some() {
            break;
        }
        input = vec![b'F', b'Z', (i % 40) as u8, (i / 7) as u8];
    }
    assert!(seen_fast.iter().any(|&s| s));
}

#[test]
fn persisted_corpus_and_report_formats() {
    let dir = tempfile::tempdir().unwrap();
    let p = toy(BuildMode::Fuzz);
    let image = Image::compile(&p).unwrap();
    let c = FuzzConfig { max_executions: 2000, keep_going: true, ..cfg(4) };
    let mut f = Fuzzer::new(&image, &p, c, Corpus::persisted(dir.path()).unwrap()).unwrap();
    let r = f.campaign(&[b"seed".to_vec(), b"FZ".to_vec()]).unwrap();
    let files: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap()).collect();
    assert_eq!(files.len(), r.corpus_size);
    for file in &files {
        let data = std::fs::read(file.path()).unwrap();
        assert_eq!(file.file_name().to_str().unwrap(), content_name(&data));
    }
    assert_eq!(Corpus::load_inputs(dir.path()).unwrap().len(), r.corpus_size);

    let parsed: Report = serde_json::from_str(&r.to_json()).unwrap();
    assert_eq!(parsed.without_timing(), r.without_timing());
    let csv = r.series_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("time_secs,executions,cumulative_blocks"));
    let last: Vec<&str> = lines.last().unwrap().split(',').collect();
    assert_eq!(last[1].parse::<u64>().unwrap(), r.executions);
    assert!(r.executions <= 2000);
}

#[test]
fn baseline_build_fuzzes_without_a_table() {
    let p = toy(BuildMode::FuzzBaseline);
    assert!(p.slots.is_empty());
    let r = fuzz_campaign(&p, &[], FuzzConfig { max_executions: 500, ..cfg(1) }).unwrap();
    assert_eq!(r.sanitized_reexecutions, 0);
    assert!(r.fast_functions.is_empty());
    assert_eq!(r.executions, 500);
}
