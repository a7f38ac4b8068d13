use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn autoprune(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_autoprune"))
        .args(args)
        .current_dir(cwd)
        .env_remove("AUTOPRUNE_DATA_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Small MNIST-format files whose class is the row of a bright bar.
fn write_idx(dir: &Path, n_train: usize, n_test: usize) {
    fs::create_dir_all(dir).unwrap();
    let mut state = 12345u64;
    let mut next = move || {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (state >> 33) as u32
    };
    for (prefix, n) in [("train", n_train), ("t10k", n_test)] {
        let mut images = vec![0, 0, 8, 3];
        images.extend((n as u32).to_be_bytes());
        images.extend(28u32.to_be_bytes());
        images.extend(28u32.to_be_bytes());
        let mut labels = vec![0, 0, 8, 1];
        labels.extend((n as u32).to_be_bytes());
        for i in 0..n {
            let class = (i % 10) as u8;
            labels.push(class);
            for r in 0..28 {
                for _ in 0..28 {
                    let bar = r / 3 == class as usize;
                    images.push(if bar {
                        200 + (next() % 56) as u8
                    } else {
                        (next() % 40) as u8
                    });
                }
            }
        }
        fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), images).unwrap();
        fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), labels).unwrap();
    }
}

const TINY: &str = r#"
model = "cnn-small"
eval_batch = 100

[pretrain]
epochs = 1
batch_size = 32

[search]
epochs = 1
batch_size = 32
log_interval = 3
alpha = 2.0
lr_r_max = 0.05

[finetune]
epochs = 1
batch_size = 32
"#;

#[test]
fn describe_lists_layers() {
    let tmp = tempfile::tempdir().unwrap();
    let o = autoprune(
        &["describe", "--model", "resnet-tiny", "--dataset", "cifar10"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("Conv") || text.contains("conv"), "{text}");
}

#[test]
fn unknown_model_is_bad_input() {
    let tmp = tempfile::tempdir().unwrap();
    let o = autoprune(&["describe", "--model", "vgg99"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("cnn-small"));
}

#[test]
fn missing_data_prints_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let o = autoprune(&["pretrain", "--data-dir", "nowhere/mnist"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere/mnist"), "{}", stderr(&o));

    let data = tmp.path().join("partial");
    fs::create_dir_all(&data).unwrap();
    let o = autoprune(&["pretrain", "--data-dir", "partial"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train-images-idx3-ubyte"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("c.toml"), "[search]\nalpah = 0.5\n").unwrap();
    let o = autoprune(&["pretrain", "--config", "c.toml"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("alpah"), "{}", stderr(&o));
}

#[test]
fn later_stages_need_earlier_ones() {
    let tmp = tempfile::tempdir().unwrap();
    let o = autoprune(&["search", "--out", "run"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("pretrain"));
}

#[test]
fn report_on_empty_run_fails_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    fs::create_dir_all(&run).unwrap();
    let o = autoprune(&["report", "--out", "run"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(fs::read_dir(&run).unwrap().count(), 0);
}

#[test]
fn full_pipeline_on_synthetic_digits() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    write_idx(&root.join("data/mnist"), 400, 100);
    fs::write(root.join("tiny.toml"), TINY).unwrap();
    let stage = |cmd: &str, out: &str| {
        let o = autoprune(&[cmd, "--config", "tiny.toml", "--seed", "3", "--out", out], root);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    };
    for cmd in ["pretrain", "search", "prune", "report"] {
        if cmd == "report" {
            let o = autoprune(&["report", "--out", "run"], root);
            assert!(o.status.success(), "{}", stderr(&o));
        } else {
            stage(cmd, "run");
        }
    }
    let run = root.join("run");
    for f in [
        "manifest.json",
        "config.toml",
        "baseline/manifest.json",
        "searched/manifest.json",
        "pruned/manifest.json",
        "pretrain.csv",
        "search_metrics.csv",
        "ranking_refresh.csv",
        "plan.json",
        "finetune.csv",
        "summary.csv",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["config"]["search"]["alpha"], 2.0);
    assert_eq!(manifest["config"]["search"]["beta"], 0.3);
    assert_eq!(manifest["config"]["search"]["ranking_interval"], 800);
    assert_eq!(manifest["checksums"].as_array().unwrap().len(), 4);
    let plan: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("plan.json")).unwrap()).unwrap();
    let fpr = 1.0 - plan["flops_after"].as_f64().unwrap() / plan["flops_before"].as_f64().unwrap();
    assert!((manifest["metrics"]["fpr"].as_f64().unwrap() - fpr).abs() < 1e-12);

    let header = fs::read_to_string(run.join("search_metrics.csv")).unwrap();
    assert!(
        header.starts_with("iteration,epoch,lr_w,lr_r,ce,cost,total,val_acc,surrogate_fpr,exact_fpr,r_0,r_1,r_2,r_3\n")
    );

    let summary = fs::read_to_string(run.join("summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], "model,method,top1,accuracy_drop,fpr");
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("cnn-small,autoprune,"));

    for svg in ["accuracy.svg", "cost.svg", "ratios.svg"] {
        let text = fs::read_to_string(run.join(svg)).unwrap();
        let doc = roxmltree::Document::parse(&text).unwrap_or_else(|e| panic!("{svg}: {e}"));
        assert_eq!(doc.root_element().tag_name().name(), "svg");
    }

    // Same seed, fresh directory: identical records.
    stage("pretrain", "again");
    stage("search", "again");
    for f in ["pretrain.csv", "search_metrics.csv"] {
        assert_eq!(
            fs::read(run.join(f)).unwrap(),
            fs::read(root.join("again").join(f)).unwrap(),
            "{f} differs between runs"
        );
    }
}
