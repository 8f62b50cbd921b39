use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"
seed = 5

[experiment]
levels = 2
entries = 8
seeds = [0]
tasks = ["attribute-vqa"]

[experiment.generic]
train_size = 40
test_size = 10

[experiment.specialist]
train_size = 24
test_size = 12

[experiment.pretrain]
stage1_steps = 3
stage2_steps = 5
batch_size = 4

[experiment.adapt]
total_steps = 4
batch_size = 4
"#;

const SUBCOMMANDS: [&str; 10] =
    ["gen-data", "fit-codebook", "freq-stats", "pretrain", "adapt", "prune", "eval", "sweep", "transfer", "ablate"];

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        self.run_env(args, None)
    }

    fn run_env(&self, args: &[&str], seed: Option<&str>) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_craft"));
        cmd.current_dir(self.dir.path()).arg("--config").arg("tiny.toml").args(args).env_remove("CRAFT_SEED");
        if let Some(s) = seed {
            cmd.env("CRAFT_SEED", s);
        }
        cmd.output().unwrap()
    }

    fn ok(&self, args: &[&str]) {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }

    /// Generic and specialist data, a codebook and backbone A.
    fn aligned(self) -> Self {
        self.ok(&["gen-data", "--task", "attribute-vqa", "--domain", "generic", "--out", "generic.jsonl"]);
        self.ok(&["gen-data", "--task", "attribute-vqa", "--out", "spec.jsonl"]);
        self.ok(&["fit-codebook", "--data", "generic.jsonl", "--out", "cb.bin"]);
        self.ok(&["pretrain", "--data", "generic.jsonl", "--codebook", "cb.bin", "--out", "a.ck"]);
        self
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn manifest(path: &Path) -> serde_json::Value {
    let mut p = path.as_os_str().to_os_string();
    p.push(".manifest.json");
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn help_exits_zero_everywhere() {
    let bin = env!("CARGO_BIN_EXE_craft");
    let top = Command::new(bin).arg("--help").output().unwrap();
    assert!(top.status.success());
    assert!(String::from_utf8_lossy(&top.stdout).contains("Exit codes"));
    for sub in SUBCOMMANDS {
        let out = Command::new(bin).args([sub, "--help"]).output().unwrap();
        assert!(out.status.success(), "{sub}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("CRC mismatch"), "{sub}");
    }
}

#[test]
fn unknown_flag_prints_usage() {
    let out = Command::new(env!("CARGO_BIN_EXE_craft")).args(["eval", "--bogus"]).output().unwrap();
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn bad_config_and_seed_are_rejected() {
    let f = Fixture::new();
    std::fs::write(f.path("bad.toml"), "[experiment]\nkeep_ration = 0.5\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_craft"))
        .current_dir(f.dir.path())
        .args(["--config", "bad.toml", "gen-data", "--task", "classification", "--out", "d.jsonl"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 3);
    assert!(!f.path("d.jsonl").exists());
    let out = f.run_env(&["gen-data", "--task", "classification", "--out", "d.jsonl"], Some("seven"));
    assert_eq!(code(&out), 2);
}

#[test]
fn pipeline_writes_artifacts_and_manifests() {
    let f = Fixture::new().aligned();
    f.ok(&["adapt", "--data", "spec.jsonl", "--backbone", "a.ck", "--codebook", "cb.bin", "--out", "enc.ck"]);
    f.ok(&["freq-stats", "--data", "spec.jsonl", "--codebook", "cb.bin", "--encoder", "enc.ck", "--out", "stats.txt"]);
    f.ok(&["prune", "--data", "spec.jsonl", "--codebook", "cb.bin", "--stats", "stats.txt", "--encoder", "enc.ck", "--index", "3", "--out", "prune.json"]);
    f.ok(&["eval", "--data", "spec.jsonl", "--backbone", "a.ck", "--codebook", "cb.bin", "--encoder", "enc.ck", "--keep-ratio", "0.8", "--out", "report.json"]);

    let log = std::fs::read_to_string(f.path("enc.csv")).unwrap();
    assert!(log.starts_with("step,lr,sal,con,commit,total\n"));
    assert_eq!(log.lines().count(), 5);

    let dump: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(f.path("prune.json")).unwrap()).unwrap();
    assert_eq!(dump["tokens"], 64);
    let kept = dump["result"]["kept"].as_array().unwrap().len();
    if dump["result"]["clamped"] == false {
        assert_eq!(kept, 51);
    } else {
        assert!(kept >= 51);
    }

    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(f.path("report.json")).unwrap()).unwrap();
    let cell = &report["cells"][0];
    assert_eq!(cell["keep_ratio"], 0.8);
    assert_eq!(cell["encoder"], "adapted");
    assert!(f.path("report.csv").exists());

    let m = manifest(&f.path("report.json"));
    assert_eq!(m["command"], "eval");
    assert_eq!(m["seed"], 5);
    assert_eq!(m["inputs"].as_array().unwrap().len(), 4);
    assert_eq!(m["outputs"].as_array().unwrap().len(), 2);
    assert_eq!(m["config_hash"], report["metadata"]["config_hash"]);
    assert_eq!(manifest(&f.path("enc.ck"))["config_hash"], m["config_hash"]);
}

#[test]
fn adapt_is_reproducible_and_ablations_change_the_objective() {
    let f = Fixture::new().aligned();
    let base = ["adapt", "--data", "spec.jsonl", "--backbone", "a.ck", "--codebook", "cb.bin"];
    f.ok(&[&base[..], &["--out", "one.ck"]].concat());
    f.ok(&[&base[..], &["--out", "two.ck"]].concat());
    f.ok(&[&base[..], &["--out", "nc.ck", "--no-commit"]].concat());
    let read = |n: &str| std::fs::read(f.path(n)).unwrap();
    assert_eq!(read("one.ck"), read("two.ck"));
    assert_eq!(read("one.csv"), read("two.csv"));
    assert_ne!(read("one.ck"), read("nc.ck"));
    let log = String::from_utf8(read("nc.csv")).unwrap();
    assert!(log.lines().skip(1).all(|l| l.split(',').nth(4) == Some("0")), "{log}");
    assert_eq!(manifest(&f.path("nc.ck"))["extra"]["variant"], "no-commit");
}

#[test]
fn seed_precedence_is_file_then_env_then_flag() {
    let f = Fixture::new();
    let gen = |out: &str, env: Option<&str>, flag: Option<&str>| {
        let mut args = vec!["gen-data", "--task", "classification", "--train-size", "3", "--test-size", "2", "--out", out];
        if let Some(s) = flag {
            args.extend(["--seed", s]);
        }
        assert!(f.run_env(&args, env).status.success());
        std::fs::read(f.path(out)).unwrap()
    };
    let file = gen("file.jsonl", None, None);
    let env = gen("env.jsonl", Some("9"), None);
    let flag = gen("flag.jsonl", Some("9"), Some("5"));
    assert_ne!(file, env);
    assert_eq!(file, flag);
    assert_eq!(manifest(&f.path("env.jsonl"))["seed"], 9);
}

#[test]
fn corrupted_codebook_is_a_format_error() {
    let f = Fixture::new().aligned();
    let mut bytes = std::fs::read(f.path("cb.bin")).unwrap();
    let n = bytes.len();
    bytes[n / 2] ^= 0xff;
    std::fs::write(f.path("cb.bin"), bytes).unwrap();
    let out = f.run(&["eval", "--data", "spec.jsonl", "--backbone", "a.ck", "--codebook", "cb.bin", "--out", "r.json"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!f.path("r.json").exists() && !f.path("r.csv").exists());
}

#[test]
fn foreign_codebook_is_a_crc_error() {
    let f = Fixture::new().aligned();
    f.ok(&["fit-codebook", "--data", "generic.jsonl", "--entries", "6", "--out", "other.bin"]);
    let out = f.run(&["eval", "--data", "spec.jsonl", "--backbone", "a.ck", "--codebook", "other.bin", "--out", "r.json"]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!f.path("r.json").exists());
    let out = f.run(&["adapt", "--data", "spec.jsonl", "--backbone", "a.ck", "--codebook", "other.bin", "--out", "e.ck"]);
    assert_eq!(code(&out), 4);
    assert!(!f.path("e.ck").exists() && !f.path("e.csv").exists());
}

#[test]
fn invalid_keep_ratio_writes_nothing() {
    let f = Fixture::new().aligned();
    let out = f.run(&["eval", "--data", "spec.jsonl", "--backbone", "a.ck", "--codebook", "cb.bin", "--keep-ratio", "1.5", "--out", "r.json"]);
    assert_eq!(code(&out), 2);
    assert!(!f.path("r.json").exists());
}

#[test]
fn sweep_reuses_stored_artifacts() {
    let f = Fixture::new().aligned();
    f.ok(&["pretrain", "--data", "generic.jsonl", "--codebook", "cb.bin", "--arch", "b", "--out", "b.ck"]);
    f.ok(&["sweep", "--codebook", "cb.bin", "--backbone", "a.ck", "--backbone", "b.ck", "--ratios", "1.0,0.5", "--out", "sweep.json"]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(f.path("sweep.json")).unwrap()).unwrap();
    let cells = report["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 2);
    assert!(cells[1]["flops"].as_f64().unwrap() < cells[0]["flops"].as_f64().unwrap());
    assert_eq!(manifest(&f.path("sweep.json"))["inputs"].as_array().unwrap().len(), 3);
}
