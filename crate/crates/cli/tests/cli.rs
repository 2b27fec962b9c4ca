use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn clip_rpn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clip-rpn"))
        .args(args)
        .env_remove("CLIP_RPN_DATA_ROOT")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TOY_CONFIG: &str = r#"
epochs = 2
warmup_epochs = 1
batch_size = 2
crop = 16
seed = 3

[model]
level_channels = [8, 16, 32, 64]
blocks_per_level = [1, 1, 1, 1]
heads_per_level = [1, 2, 4, 8]
mgca_heads = [1, 2, 4]
n_subnets = 2
mlp_ratio = 2
max_window = 8
"#;

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&clip_rpn(&["--help"])), 0);
    assert_eq!(code(&clip_rpn(&["no-such-command"])), 1);
    assert_eq!(code(&clip_rpn(&["train"])), 1, "missing --out");
    assert_eq!(code(&clip_rpn(&["loss-profile", "--progress", "1.5"])), 1);
    assert_eq!(code(&clip_rpn(&["eval", "--checkpoint", "/nonexistent/ckpt"])), 1);
}

#[test]
fn loss_profile_to_stdout() {
    let out = clip_rpn(&["loss-profile", "--progress", "0,1", "--points", "4"]);
    assert_eq!(code(&out), 0);
    let csv = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "progress,exponent,eps,grad");
    assert_eq!(lines.len(), 1 + 2 * 4);
}

#[test]
fn synth_data_refuses_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["synth-data", "--count", "3", "--size", "16", "--out", path(dir.path())];
    assert_eq!(code(&clip_rpn(&args)), 0);
    assert_eq!(fs::read_dir(dir.path().join("rain")).unwrap().count(), 3);
    assert_eq!(code(&clip_rpn(&args)), 1);
    let mut forced = args.to_vec();
    forced.push("--force");
    assert_eq!(code(&clip_rpn(&forced)), 0);
}

#[test]
fn analyze_prompts_rejects_a_single_prompt() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(code(&clip_rpn(&["synth-data", "--count", "4", "--size", "16", "--out", path(&data)])), 0);

    let out = clip_rpn(&["analyze-prompts", "--data-root", path(&data)]);
    assert_eq!(code(&out), 0);
    let csv = String::from_utf8(out.stdout).unwrap();
    assert!(csv.starts_with("dataset,prompt_index,percent\n"));
    assert_eq!(csv.lines().count(), 3);

    let one = dir.path().join("one.json");
    fs::write(&one, r#"{"name": "one", "prompts": ["rain"]}"#).unwrap();
    assert_eq!(code(&clip_rpn(&["analyze-prompts", "--data-root", path(&data), "--prompts", path(&one)])), 1);
}

#[test]
fn train_eval_derain_viz() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ckpt = dir.path().join("ckpt");
    let config = dir.path().join("toy.toml");
    fs::write(&config, TOY_CONFIG).unwrap();
    assert_eq!(code(&clip_rpn(&["synth-data", "--count", "4", "--size", "16", "--out", path(&data)])), 0);

    let train = ["train", "--data-root", path(&data), "--config", path(&config), "--out", path(&ckpt)];
    let out = clip_rpn(&train);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ckpt.join("header.json").is_file());
    assert_eq!(fs::read_to_string(ckpt.join("steps.jsonl")).unwrap().lines().count(), 4);
    assert_eq!(fs::read_to_string(ckpt.join("epochs.jsonl")).unwrap().lines().count(), 2);
    assert_eq!(code(&clip_rpn(&train)), 1, "existing checkpoint without --force");

    let metrics = dir.path().join("metrics");
    let out = clip_rpn(&["eval", "--data-root", path(&data), "--checkpoint", path(&ckpt), "--out", path(&metrics)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(metrics.join("metrics.csv").is_file());

    let input = fs::read_dir(data.join("rain")).unwrap().next().unwrap().unwrap().path();
    let stem = input.file_stem().unwrap().to_str().unwrap().to_string();
    let derained = dir.path().join("derained");
    let derain = ["derain", path(&input), "--checkpoint", path(&ckpt), "--out", path(&derained)];
    assert_eq!(code(&clip_rpn(&derain)), 0);
    assert!(derained.join(format!("{stem}_derained.png")).is_file());
    for l in 1..=3 {
        let mask = image::open(derained.join(format!("{stem}_mask{l}.png"))).unwrap();
        assert_eq!((mask.width(), mask.height()), (16, 16));
    }
    assert_eq!(code(&clip_rpn(&derain)), 1, "outputs exist without --force");
    let mut bad_route = derain.to_vec();
    bad_route.extend(["--route", "5", "--force"]);
    assert_eq!(code(&clip_rpn(&bad_route)), 1);

    let panels = dir.path().join("panels");
    let out = clip_rpn(&["viz-masks", "--data-root", path(&data), "--checkpoint", path(&ckpt), "--out", path(&panels), "--limit", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let files: Vec<_> = fs::read_dir(&panels).unwrap().collect();
    assert_eq!(files.len(), 2);
    let panel = image::open(files[0].as_ref().unwrap().path()).unwrap();
    assert_eq!((panel.width(), panel.height()), (16 * 6, 16));
}
