//! The `cinfer` binary end to end on tiny configurations.

use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
vehicles = 10
duration_s = 30
spawn_length_m = 300
stride = 20
pair_stride = 40
hidden = 8
latent_dim = 4
vae_epochs = 1
max_epochs = 1
planner_batch = 3
steps_per_epoch = 2
eval_limit = 4
regions = 1
";

fn cinfer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cinfer"))
        .args(args)
        .env_remove("CF_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = cinfer(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.cfg");
    std::fs::write(&p, TINY).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn gen_data_prints_count_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let args = |out: &Path| {
        vec![
            "gen-data".to_string(),
            "--lanes=3".into(),
            "--vehicles=12".into(),
            "--duration=120".into(),
            "--seed=7".into(),
            format!("--out={}", out.display()),
        ]
    };
    let run = |out: &Path| ok(&args(out).iter().map(String::as_str).collect::<Vec<_>>());
    let first = run(&a);
    assert!(first.starts_with("generated:"), "{first}");
    run(&b);
    assert_eq!(std::fs::read(a.join("data.jsonl")).unwrap(), std::fs::read(b.join("data.jsonl")).unwrap());
}

#[test]
fn infeasible_density_names_the_gap() {
    let dir = tempfile::tempdir().unwrap();
    let out = cinfer(&[
        "gen-data",
        "--vehicles=400",
        "--set",
        "spawn_length_m=100",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gap"));
}

#[test]
fn missing_prerequisites_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    for cmd in ["train-vae", "train-constraint", "evaluate"] {
        let out = cinfer(&[cmd, "--out", d]);
        assert_eq!(out.status.code(), Some(2), "{cmd}");
    }
    ok(&["gen-data", "--out", d, "--config", &tiny_config(dir.path())]);
    let out = cinfer(&["evaluate", "--out", d]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("constraint.ckpt"));
    let out = cinfer(&["gen-data", "--out", d, "--config", "/nonexistent/x.cfg"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn validation_failures_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    for set in ["colour=red", "vehicles=many", "quantile=3"] {
        let out = cinfer(&["gen-data", "--out", d, "--set", set]);
        assert_eq!(out.status.code(), Some(1), "{set}");
    }
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let count = |s: &str| s.split_whitespace().nth(1).unwrap().parse::<usize>().unwrap();
    let from_file = ok(&["gen-data", "--config", &cfg, "--out", a.to_str().unwrap()]);
    let flagged = ok(&["gen-data", "--config", &cfg, "--vehicles", "4", "--out", b.to_str().unwrap()]);
    assert!(count(&flagged) < count(&from_file));

    // Seed: flag over config over CF_SEED.
    let seeded = |extra: &[&str], env: Option<&str>| {
        let out_dir = tempfile::tempdir().unwrap();
        let mut c = Command::new(env!("CARGO_BIN_EXE_cinfer"));
        c.args(["gen-data", "--config", &cfg, "--out", out_dir.path().to_str().unwrap()]).args(extra);
        match env {
            Some(v) => c.env("CF_SEED", v),
            None => c.env_remove("CF_SEED"),
        };
        assert!(c.output().unwrap().status.success());
        std::fs::read_to_string(out_dir.path().join("manifest.txt")).unwrap()
    };
    let seed_line = |m: &str| m.lines().find(|l| l.starts_with("seed = ")).unwrap().to_string();
    assert_eq!(seed_line(&seeded(&[], None)), "seed = 0");
    assert_eq!(seed_line(&seeded(&[], Some("5"))), "seed = 5");
    assert_eq!(seed_line(&seeded(&["--seed", "9"], Some("5"))), "seed = 9");
}

fn pipeline(dir: &Path, cfg: &str) -> String {
    let d = dir.to_str().unwrap();
    let common = ["--out", d, "--config", cfg, "--seed", "3"];
    for cmd in ["gen-data", "train-vae", "train-constraint", "evaluate", "render"] {
        let mut args = vec![cmd];
        args.extend(common);
        ok(&args);
    }
    std::fs::read_to_string(dir.join("manifest.txt")).unwrap()
}

#[test]
fn tiny_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let ma = pipeline(&a, &cfg);
    let mb = pipeline(&b, &cfg);
    assert_eq!(ma, mb);
    for f in ["data.jsonl", "vae.ckpt", "constraint.ckpt", "epochs.csv", "report/report.csv", "report/report.txt"] {
        assert!(ma.lines().any(|l| l.ends_with(&format!(" {f}"))), "{f} missing from manifest");
    }
    assert!(ma.contains("[train-constraint]") && ma.contains("input "));
    let table = std::fs::read_to_string(a.join("report/report.txt")).unwrap();
    assert!(table.contains("Collision % | Out of road % | No MoP solution %"));

    let data = std::fs::read_to_string(a.join("data.jsonl")).unwrap();
    let id = data.lines().next().unwrap().split('"').nth(3).unwrap().to_string();
    let d = a.to_str().unwrap();
    let free = ok(&["plan", "--instance", &id, "--no-constraint", "--out", d, "--config", &cfg]);
    assert!(free.starts_with("chosen target_lateral="), "{free}");
    let constrained = ok(&["plan", "--instance", &id, "--out", d, "--config", &cfg]);
    assert!(constrained.starts_with("chosen") || constrained.starts_with("no solution"));
    assert!(a.join(format!("plan_{id}.csv")).exists());
    let bad = cinfer(&["plan", "--instance", "nope", "--no-constraint", "--out", d]);
    assert_eq!(bad.status.code(), Some(1));
}
