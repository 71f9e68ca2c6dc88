use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mmpda_cli::ExperimentConfig;
use tempfile::TempDir;

const SMALL: &str = r#"
run_id = "small"
seeds = [3]
mode = "sequential"

[adapt]
lr = 1e-3
epochs = 1
batch_size = 64

[adapt.model]
encoder_hidden = [4]
unimodal_width = 4
fused_width = 4
disc_hidden = [4]

[adapt.weights]
lambda = 1.0
alpha = 1.0
beta = 1.0
gamma = 1.0
eta = 1.0

[[sources]]
kind = "benchmark"
family = "shift-2s1t"
domain = "source-1"

[[sources]]
kind = "benchmark"
family = "shift-2s1t"
domain = "source-2"

[target]
kind = "benchmark"
family = "shift-2s1t"
domain = "target"
"#;

fn mmpda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmpda"))
        .args(args)
        .env("NO_COLOR", "1")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn report_echo_reparses_to_the_same_config() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let out = dir.path().join("out");
    let o = mmpda(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("small-seed3.report.json")).unwrap()).unwrap();
    let echoed: ExperimentConfig = serde_json::from_value(report["config"].clone()).unwrap();
    let mut expected = ExperimentConfig::parse(SMALL).unwrap();
    expected.out_dir = out.clone();
    assert_eq!(echoed, expected);
    assert!(out.join("small-seed3.checkpoint.json").exists());
    assert!(out.join("small.summary.json").exists());
}

#[test]
fn reruns_write_identical_reports() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let out = dir.path().join("out");
    let report = out.join("small-seed3.report.json");
    let mut bytes = Vec::new();
    for _ in 0..2 {
        assert_eq!(code(&mmpda(&["train", "--config", s(&cfg), "--out", s(&out)])), 0);
        bytes.push(std::fs::read(&report).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn parallel_and_sequential_runs_agree() {
    let dir = TempDir::new().unwrap();
    let text = SMALL.replace("seeds = [3]", "seeds = [3, 4]");
    let seq = write_config(dir.path(), "seq.toml", &text);
    let par = write_config(dir.path(), "par.toml", &text.replace("\"sequential\"", "\"parallel\""));
    for (cfg, out) in [(&seq, "a"), (&par, "b")] {
        assert_eq!(code(&mmpda(&["train", "--config", s(cfg), "--out", s(&dir.path().join(out))])), 0);
    }
    for seed in [3, 4] {
        let read = |out: &str| {
            let v: serde_json::Value = serde_json::from_str(
                &std::fs::read_to_string(dir.path().join(out).join(format!("small-seed{seed}.report.json"))).unwrap(),
            )
            .unwrap();
            (v["per_epoch"].clone(), v["final"].clone())
        };
        assert_eq!(read("a"), read("b"));
    }
}

#[test]
fn config_problems_exit_with_code_2() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("missing.toml");
    assert_eq!(code(&mmpda(&["train", "--config", s(&missing)])), 2);

    let bad_lr = write_config(dir.path(), "lr.toml", &SMALL.replace("lr = 1e-3", "lr = -1.0"));
    let o = mmpda(&["train", "--config", s(&bad_lr)]);
    assert_eq!(code(&o), 2);
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("adapt"), "{stderr}");
    let last: serde_json::Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert_eq!(last["level"], "error");

    let unknown = write_config(dir.path(), "unk.toml", &format!("{SMALL}\n[sweep]\ntheta = [1.0]\n"));
    assert_eq!(code(&mmpda(&["sweep", "--config", s(&unknown)])), 2);

    let bad_domain = write_config(dir.path(), "dom.toml", &SMALL.replace("domain = \"target\"", "domain = \"nowhere\""));
    assert_eq!(code(&mmpda(&["train", "--config", s(&bad_domain), "--out", s(&dir.path().join("o"))])), 2);
}

fn sweep_rows(csv: &Path) -> Vec<csv::StringRecord> {
    let mut r = csv::Reader::from_path(csv).unwrap();
    r.records().map(Result::unwrap).collect()
}

#[test]
fn grid_sweep_writes_one_row_per_run_plus_cell_means() {
    let dir = TempDir::new().unwrap();
    let text = SMALL.replace("seeds = [3]", "seeds = [0, 1]") + "\n[sweep]\nlambda = [0.0, 1.0]\ngrl = [true, false]\n";
    let cfg = write_config(dir.path(), "grid.toml", &text);
    let out = dir.path().join("out");
    let o = mmpda(&["sweep", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = sweep_rows(&out.join("small.sweep.csv"));
    assert_eq!(rows.len(), 4 * 2 + 4);
    // lambda is the outer axis, grl the inner one.
    assert_eq!((&rows[0][1], &rows[0][6], &rows[0][7]), ("0.0", "true", "0"));
    assert_eq!((&rows[2][1], &rows[2][6]), ("0.0", "false"));
    assert_eq!(rows.iter().filter(|r| &r[7] == "mean").count(), 4);
}

#[test]
fn sensitivity_preset_has_twelve_cells() {
    let dir = TempDir::new().unwrap();
    let text = SMALL.to_string() + "\n[sweep]\npreset = \"sensitivity\"\n";
    let cfg = write_config(dir.path(), "t3.toml", &text);
    let out = dir.path().join("out");
    assert_eq!(code(&mmpda(&["sweep", "--config", s(&cfg), "--out", s(&out)])), 0);
    let rows = sweep_rows(&out.join("small.sweep.csv"));
    assert_eq!(rows.len(), 12 * 2);
    assert_eq!(&rows[0][1], "0.0");
    assert_eq!(&rows[11][1], "10.0");
}

#[test]
fn preset_and_grid_axes_conflict() {
    let text = SMALL.to_string() + "\n[sweep]\npreset = \"sensitivity\"\nlambda = [1.0]\n";
    assert!(ExperimentConfig::parse(&text).is_err());
}

#[test]
fn gradcheck_passes() {
    let dir = TempDir::new().unwrap();
    let o = mmpda(&["gradcheck", "--out", s(dir.path())]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    assert!(v["checks"].as_array().unwrap().len() > 20);
}

#[test]
fn generated_csvs_train_evaluate_and_measure() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let data = dir.path().join("data");
    assert_eq!(code(&mmpda(&["generate", "--config", s(&cfg), "--out", s(&data)])), 0);
    for id in ["source-1", "source-2", "target"] {
        assert!(data.join(format!("{id}-seed3.csv")).exists(), "{id}");
    }

    let head = SMALL.split("[[sources]]").next().unwrap();
    let csv_cfg = format!(
        "{head}[[sources]]\nkind = \"csv\"\npath = \"data/source-1-seed3.csv\"\nwidths = [8, 8]\n\n\
         [[sources]]\nkind = \"csv\"\npath = \"data/source-2-seed3.csv\"\nwidths = [8, 8]\n\n\
         [target]\nkind = \"csv\"\npath = \"data/target-seed3.csv\"\nwidths = [8, 8]\n"
    );
    let csv_cfg = write_config(dir.path(), "csv.toml", &csv_cfg);
    let o = mmpda(&["train", "--config", s(&csv_cfg)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    // A configured out_dir resolves next to the config file.
    let ckpt = dir.path().join("runs/small-seed3.checkpoint.json");
    assert!(ckpt.exists());

    let o = mmpda(&["evaluate", "--config", s(&csv_cfg), "--checkpoint", s(&ckpt)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let acc = m["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    // CSV and generator inputs hold the same rows, so the trained model
    // scores the same on either.
    let o2 = mmpda(&["evaluate", "--config", s(&cfg), "--checkpoint", s(&ckpt)]);
    let m2: serde_json::Value = serde_json::from_slice(&o2.stdout).unwrap();
    assert_eq!(m["accuracy"], m2["accuracy"]);

    for extra in [vec![], vec!["--checkpoint", s(&ckpt)]] {
        let mut args = vec!["gapmatrix", "--config", s(&csv_cfg)];
        args.extend(extra);
        let o = mmpda(&args);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let g: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        assert_eq!(g["domains"].as_array().unwrap().len(), 3);
        assert_eq!(g["matrix"][0][0], 0.0);
        assert_eq!(g["matrix"][0][2], g["matrix"][2][0]);
    }
}

#[test]
fn corrupt_checkpoint_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let ckpt = write_config(dir.path(), "broken.json", "{\"not\": \"a checkpoint\"}");
    assert_eq!(code(&mmpda(&["evaluate", "--config", s(&cfg), "--checkpoint", s(&ckpt)])), 2);
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert!(n >= 5);
}
