//! End-to-end runs of the binary on a tiny configuration.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
base_samples = 64
real_samples = 32
fake_samples = 16
eval_samples = 24

[schedule]
steps = 10

[base_train]
steps = 3
batch_size = 16

[disc_train]
steps = 3
batch_size = 16
"#;

struct Run {
    dir: tempfile::TempDir,
}

impl Run {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("tiny.toml"), config).unwrap();
        Self { dir }
    }

    fn root(&self) -> &Path {
        self.dir.path()
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn jd(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_jointdiff"))
            .env("JOINTDIFF_RUN_ROOT", self.root())
            .arg("--config")
            .arg(self.path("tiny.toml"))
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.jd(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn code(&self, args: &[&str]) -> i32 {
        self.jd(args).status.code().unwrap()
    }
}

#[test]
fn stage_by_stage_pipeline() {
    let r = Run::new(TINY);
    r.ok(&["make-dataset", "base", "--out", "base_data.csv"]);
    r.ok(&["make-dataset", "ind", "--out", "ind.csv"]);
    r.ok(&["train-base", "--data", "base_data.csv", "--out", "base.json"]);
    r.ok(&["gen-fake-pool", "--base", "base.json", "--out", "pool.csv"]);
    for loss in ["disc", "denoise", "all"] {
        r.ok(&[
            "train-guidance", "--base", "base.json", "--paired", "ind.csv", "--fakes", "pool.csv",
            "--loss", loss, "--out", &format!("disc_{loss}.json"),
        ]);
    }
    r.ok(&["sample", "--base", "base.json", "--disc", "disc_all.json", "--out", "guided.csv"]);
    r.ok(&["sample", "--base", "base.json", "--mode", "independent", "--out", "indep.csv"]);
    let printed = r.ok(&["eval", "--samples", "guided.csv", "--target", "ind", "--out", "report.json"]);
    assert!(printed.starts_with("NLL "));

    let dump = std::fs::read_to_string(r.path("guided.csv")).unwrap();
    assert_eq!(dump.lines().count(), 25);
    assert!(dump.starts_with("chain_id,x,y\n0,"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(r.path("report.json")).unwrap()).unwrap();
    assert_eq!(report["n"], 24);
    assert!(std::fs::read_to_string(r.path("disc_all.losses.csv"))
        .unwrap()
        .starts_with("step,l_disc,l_denoise,total\n"));

    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(r.path("disc_all.json.manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["command"], "train-guidance");
    assert_eq!(manifest["inputs"].as_object().unwrap().len(), 3);
    assert_eq!(manifest["config"]["disc_train"]["loss_weights"]["denoise"], 1.0);
    assert!(manifest["code_version"].is_string());
}

#[test]
fn reruns_reproduce_identical_outputs() {
    let r = Run::new(TINY);
    r.ok(&["make-dataset", "ood", "--out", "a.csv"]);
    r.ok(&["make-dataset", "ood", "--out", "b.csv"]);
    assert_eq!(std::fs::read(r.path("a.csv")).unwrap(), std::fs::read(r.path("b.csv")).unwrap());
    r.ok(&["--seed", "4", "make-dataset", "ood", "--out", "c.csv"]);
    assert_ne!(std::fs::read(r.path("a.csv")).unwrap(), std::fs::read(r.path("c.csv")).unwrap());
}

#[test]
fn table_reproduction_prints_five_rows() {
    let r = Run::new(TINY);
    let out = r.ok(&["reproduce-table1", "--setting", "ind", "--out-dir", "t"]);
    let rows: Vec<&str> = out.lines().skip(2).collect();
    let labels: Vec<&str> = rows.iter().map(|l| l.split("  ").next().unwrap().trim()).collect();
    assert_eq!(labels, ["GT", "No joint", "L_disc", "L_denoise", "L_all"]);
    assert!(r.path("t/manifest.json").exists());
    assert!(r.path("t/samples_l_all.csv").exists());
}

#[test]
fn exit_codes() {
    let r = Run::new(TINY);
    // missing input
    assert_eq!(r.code(&["train-base", "--data", "nope.csv", "--out", "b.json"]), 3);
    // unparsable value and unknown subcommand arguments
    std::fs::write(r.path("tiny.toml"), "eval_samples = \"lots\"").unwrap();
    assert_eq!(r.code(&["make-dataset", "ind", "--out", "x.csv"]), 2);
    std::fs::write(r.path("tiny.toml"), TINY).unwrap();
    assert_eq!(r.code(&["sample", "--base", "b.json", "--mode", "sideways", "--out", "s.csv"]), 2);

    // corrupt file without a manifest: format error
    std::fs::write(r.path("junk.csv"), "not a dataset\n").unwrap();
    assert_eq!(r.code(&["train-base", "--data", "junk.csv", "--out", "b.json"]), 5);

    // tampered artifact: checksum mismatch against its manifest
    r.ok(&["make-dataset", "base", "--out", "d.csv"]);
    let mut text = std::fs::read_to_string(r.path("d.csv")).unwrap();
    text = text.replacen("\n-", "\n+", 1);
    std::fs::write(r.path("d.csv"), text).unwrap();
    assert_eq!(r.code(&["train-base", "--data", "d.csv", "--out", "b.json"]), 6);

    // diverging optimizer: numeric failure
    let wild = format!("{TINY}\n[base_train.adam]\nlr = 1e250\n").replace("steps = 3\nbatch_size = 16\n\n[disc", "steps = 50\nbatch_size = 16\n\n[disc");
    std::fs::write(r.path("tiny.toml"), wild).unwrap();
    r.ok(&["make-dataset", "base", "--out", "d2.csv"]);
    assert_eq!(r.code(&["train-base", "--data", "d2.csv", "--out", "b.json"]), 4);
}
