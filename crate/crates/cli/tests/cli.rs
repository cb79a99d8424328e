use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use varsan::bench::{COLD_BUG, FUZZ_TOY};
use varsan::fuzz::Report;

fn varsan(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_varsan"))
        .current_dir(dir)
        .env_remove("PARTISAN_SEED")
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().to_path_buf();
    fs::write(p.join("cold.pir"), COLD_BUG).unwrap();
    fs::write(p.join("toy.pir"), FUZZ_TOY).unwrap();
    (dir, p)
}

fn profiled(dir: &Path) {
    ok(&varsan(dir, &["profile", "cold.pir", "--text", "training input", "-o", "train.json"]));
}

#[test]
fn build_needs_a_profile_only_for_profile_policies() {
    let (_t, d) = setup();
    ok(&varsan(&d, &["build", "cold.pir", "--policy", "random"]));
    assert!(d.join("cold.built.pir").exists() && d.join("cold.built.meta.json").exists());

    let out = varsan(&d, &["build", "cold.pir", "--policy", "expected-cost"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--profile"));

    let out = varsan(&d, &["build", "toy.pir", "--policy", "fuzzing"]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--mode fuzz"));
}

#[test]
fn rebuilds_are_byte_identical() {
    let (_t, d) = setup();
    profiled(&d);
    let args = ["build", "cold.pir", "--policy", "expected-cost", "--profile", "train.json", "--sanitizers", "address,ub"];
    ok(&varsan(&d, &[&args[..], &["-o", "a.pir"]].concat()));
    ok(&varsan(&d, &[&args[..], &["-o", "b.pir"]].concat()));
    assert_eq!(fs::read(d.join("a.pir")).unwrap(), fs::read(d.join("b.pir")).unwrap());
    assert_eq!(fs::read(d.join("a.meta.json")).unwrap(), fs::read(d.join("b.meta.json")).unwrap());
}

#[test]
fn profiles_sum_over_workloads() {
    let (_t, d) = setup();
    ok(&varsan(&d, &["profile", "cold.pir", "-o", "zero.json"]));
    let zero: Value = serde_json::from_str(&fs::read_to_string(d.join("zero.json")).unwrap()).unwrap();
    assert!(zero["functions"].as_object().unwrap().values().all(|f| f["exec_count"] == 0));

    ok(&varsan(&d, &["profile", "cold.pir", "--text", "a", "--text", "Rb", "-o", "two.json"]));
    let two: Value = serde_json::from_str(&fs::read_to_string(d.join("two.json")).unwrap()).unwrap();
    assert_eq!(two["functions"]["main"]["exec_count"], 2);
    assert_eq!(two["functions"]["rare"]["exec_count"], 1);
}

#[test]
fn run_is_reproducible_and_reports_traps() {
    let (_t, d) = setup();
    profiled(&d);
    ok(&varsan(&d, &["build", "cold.pir", "--policy", "random", "--profile", "train.json"]));
    let run = |extra: &[&str]| varsan(&d, &[&["run", "cold.built.pir", "--json", "--text", "hello", "--policy", "random"], extra].concat());
    let a = ok(&run(&["--seed", "7", "--repartition-every", "5"]));
    assert_eq!(a, ok(&run(&["--seed", "7", "--repartition-every", "5"])));
    let v: Value = serde_json::from_str(&a).unwrap();
    assert_eq!(v["seed"], 7);

    let out = varsan(&d, &["run", "cold.built.pir", "--text", "Rx", "--all-sanitized", "--baseline", "cold.pir"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("trap: address_check in function rare (active variant sanitized) block b0"), "{err}");
    assert!(err.contains("overhead vs baseline"));

    let out = varsan(&d, &["run", "cold.built.pir", "--text", "Rx", "--all-unsanitized"]);
    // rare is cold, so it has no unsanitized variant to fall back to.
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn seed_precedence_is_file_then_env_then_flag() {
    let (_t, d) = setup();
    ok(&varsan(&d, &["build", "cold.pir"]));
    fs::write(d.join("cfg.toml"), "[runtime]\npolicy = \"random\"\nrng_seed = 3\n").unwrap();
    let seed_of = |env: Option<&str>, flag: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_varsan"));
        c.current_dir(&d).env_remove("PARTISAN_SEED");
        if let Some(e) = env {
            c.env("PARTISAN_SEED", e);
        }
        c.args(["run", "cold.built.pir", "--json", "--config", "cfg.toml"]);
        if let Some(f) = flag {
            c.args(["--seed", f]);
        }
        let v: Value = serde_json::from_str(&ok(&c.output().unwrap())).unwrap();
        v["seed"].as_u64().unwrap()
    };
    assert_eq!(seed_of(None, None), 3);
    assert_eq!(seed_of(Some("4"), None), 4);
    assert_eq!(seed_of(Some("4"), Some("5")), 5);

    fs::write(d.join("bad.toml"), "[runtime]\nbudget = 0.1\n").unwrap();
    let out = varsan(&d, &["run", "cold.built.pir", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fuzz_finds_replays_and_compares() {
    let (_t, d) = setup();
    ok(&varsan(&d, &["build", "toy.pir", "--mode", "fuzz", "--policy", "fuzzing", "-o", "toy.fuzz.pir"]));
    ok(&varsan(&d, &["build", "toy.pir", "--mode", "fuzz-baseline", "-o", "toy.base.pir"]));
    fs::create_dir(d.join("seeds")).unwrap();
    fs::write(d.join("seeds/first"), "seed").unwrap();
    let fuzz = |corpus: &str, report: &str| {
        varsan(&d, &[
            "fuzz", "toy.fuzz.pir", "--corpus", corpus, "--seed", "2", "--max-executions", "30000", "--max-len", "64",
            "--seeds", "seeds", "--report", report, "--csv", "series.csv", "--crashes", "crashes",
        ])
    };
    let out = fuzz("c1", "r1.json");
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("crash at execution"));
    assert_eq!(fs::read_dir(d.join("crashes")).unwrap().count(), 1);
    assert!(fs::read_to_string(d.join("series.csv")).unwrap().starts_with("time_secs,executions,cumulative_blocks"));

    fuzz("c2", "r2.json");
    let load = |f: &str| serde_json::from_str::<Report>(&fs::read_to_string(d.join(f)).unwrap()).unwrap().without_timing();
    assert_eq!(load("r1.json"), load("r2.json"));

    let out = varsan(&d, &["replay", "toy.fuzz.pir", "--report", "r1.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("address_check in function deep"));

    let out = varsan(&d, &[
        "fuzz", "toy.fuzz.pir", "--corpus", "c3", "--max-executions", "3000", "--keep-going", "--compare", "toy.base.pir",
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("vs all-sanitized"));

    let out = varsan(&d, &["fuzz", "toy.base.pir", "--corpus", "c4"]);
    assert_eq!(out.status.code(), Some(2));
    ok(&varsan(&d, &["fuzz", "toy.base.pir", "--corpus", "c4", "--policy", "all-sanitized", "--max-executions", "200"]));

    let summary = ok(&varsan(&d, &["report", "r1.json"]));
    assert!(summary.contains("sanitized re-executions"));
}

#[test]
fn bench_emits_table_and_csv() {
    let (_t, d) = setup();
    let out = ok(&varsan(&d, &["bench", "--programs", "sort,checksum", "--repeat", "1", "--csv", "b.csv", "--json", "b.json"]));
    assert!(out.contains("geomean all_sanitized"));
    assert!(out.contains("not comparable to native wall-clock"));
    let csv = fs::read_to_string(d.join("b.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 5);
    assert!(ok(&varsan(&d, &["report", "b.json"])).contains("geomean"));
    assert_eq!(varsan(&d, &["bench", "--programs", "nope"]).status.code(), Some(2));
}

#[test]
fn report_reads_metadata_and_profiles() {
    let (_t, d) = setup();
    profiled(&d);
    ok(&varsan(&d, &["build", "cold.pir", "--policy", "expected-cost", "--profile", "train.json"]));
    let meta = ok(&varsan(&d, &["report", "cold.built.meta.json"]));
    // rare never ran, so it is cold and has no slot.
    assert!(meta.contains("checksum") && meta.contains("unsanitized,sanitized") && !meta.contains("rare"));
    assert!(ok(&varsan(&d, &["report", "train.json"])).contains("checksum"));
    fs::write(d.join("junk.json"), "{}").unwrap();
    assert_eq!(varsan(&d, &["report", "junk.json"]).status.code(), Some(2));
}
