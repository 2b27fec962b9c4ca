use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clip_rpn::analysis::{discover_datasets, prompt_distribution, to_csv};
use clip_rpn::dataset::{build_mixed, gt_mask, write_synthetic_dataset, DatasetManifest, SynthRainParams};
use clip_rpn::dls::{gradient_profile, eps_grid, LossSchedule};
use clip_rpn::imaging::Image;
use clip_rpn::rpn::route;
use clip_rpn::trainer::{compute_routes, LoadedModel, TrainConfig, Trainer};
use clip_rpn::viz::{heatmap, side_by_side};
use clip_rpn::vlm::{Gateway, GatewayConfig, PromptSet};
use log::info;

use crate::{Cli, Command, Common, UsageError};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn require<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| usage(format!("{flag} is required for this command")))
}

fn require_existing(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("{} does not exist", path.display())))
    }
}

/// Fails when any of `files` already exists under `dir`, unless `force`.
fn check_outputs(dir: &Path, files: &[String], force: bool) -> Result<()> {
    if force {
        return Ok(());
    }
    if let Some(f) = files.iter().find(|f| dir.join(f).exists()) {
        return Err(usage(format!(
            "{} already exists; pass --force to overwrite",
            dir.join(f).display()
        )));
    }
    Ok(())
}

fn prompts(common: &Common) -> Result<PromptSet> {
    match &common.prompts {
        Some(path) => {
            require_existing(path)?;
            PromptSet::load(path).map_err(|e| usage(format!("{}: {e}", path.display())))
        }
        None => Ok(PromptSet::default_set()),
    }
}

fn gateway(common: &Common) -> Result<Gateway> {
    Gateway::from_config(&GatewayConfig {
        backend: common.backend,
        ..Default::default()
    })
    .map_err(|e| usage(e.to_string()))
}

fn manifests(common: &Common) -> Result<Vec<DatasetManifest>> {
    let root = require(&common.data_root, "--data-root")?;
    require_existing(root)?;
    discover_datasets(root).map_err(|e| usage(format!("{}: {e}", root.display())))
}

fn single_manifest(common: &Common) -> Result<DatasetManifest> {
    let mut all = manifests(common)?;
    Ok(if all.len() == 1 { all.remove(0) } else { build_mixed(&all)? })
}

fn checkpoint(common: &Common) -> Result<LoadedModel> {
    let dir = require(&common.checkpoint, "--checkpoint")?;
    require_existing(dir)?;
    LoadedModel::load(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))
}

pub fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match &cli.command {
        Command::Train {
            epochs,
            allow_prompt_change,
        } => train(common, *epochs, *allow_prompt_change),
        Command::Eval { allow_prompt_change } => eval(common, *allow_prompt_change),
        Command::Derain {
            input,
            route,
            allow_prompt_change,
        } => derain(common, input, *route, *allow_prompt_change),
        Command::AnalyzePrompts => analyze_prompts(common),
        Command::VizMasks {
            limit,
            allow_prompt_change,
        } => viz_masks(common, *limit, *allow_prompt_change),
        Command::SynthData { count, size } => synth_data(common, *count, *size),
        Command::LossProfile {
            beta,
            eta,
            progress,
            points,
        } => loss_profile(common, *beta, *eta, progress, *points),
    }
}

fn train(common: &Common, epochs: Option<usize>, allow_prompt_change: bool) -> Result<()> {
    let out = require(&common.out, "--out")?.clone();
    let mut config = match &common.config {
        Some(path) => {
            require_existing(path)?;
            TrainConfig::load(path).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(e) = epochs {
        config.epochs = e;
    }
    config.validate().map_err(|e| usage(e.to_string()))?;
    let manifest = single_manifest(common)?;
    let prompts = prompts(common)?;
    let gateway = gateway(common)?;
    let files = ["header.json", "params.bin", "steps.jsonl", "epochs.jsonl"].map(String::from);
    check_outputs(&out, &files, common.force)?;

    let pairs = manifest.load_all()?;
    let mut trainer = match &common.checkpoint {
        Some(dir) => {
            require_existing(dir)?;
            Trainer::resume(dir, pairs, &prompts, &gateway, allow_prompt_change)?
        }
        None => Trainer::new(config, pairs, &prompts, &gateway)?,
    };
    fs::create_dir_all(&out)?;
    for f in &files[2..] {
        let _ = fs::remove_file(out.join(f));
    }
    trainer = trainer.with_step_log(out.join("steps.jsonl"))?;
    let mut epoch_log = fs::File::create(out.join("epochs.jsonl"))?;
    info!(
        "training on {} images ({}), {} steps",
        trainer.pairs().len(),
        manifest.name,
        trainer.total_steps()
    );
    while !trainer.is_finished() {
        let record = trainer.run_epoch()?;
        serde_json::to_writer(&mut epoch_log, &record)?;
        writeln!(epoch_log)?;
    }
    trainer.save(&out)?;
    info!("checkpoint written to {}", out.display());
    Ok(())
}

fn eval(common: &Common, allow_prompt_change: bool) -> Result<()> {
    let loaded = checkpoint(common)?;
    let manifest = single_manifest(common)?;
    let prompts = prompts(common)?;
    loaded
        .check_prompts(&prompts, allow_prompt_change)
        .map_err(|e| usage(e.to_string()))?;
    let gateway = gateway(common)?;
    if let Some(out) = &common.out {
        check_outputs(out, &["metrics.csv".into(), "summary.json".into()], common.force)?;
    }
    let pairs = manifest.load_all()?;
    let report = loaded.evaluate(&pairs, &prompts, &gateway)?;
    match &common.out {
        Some(out) => report.save(out)?,
        None => print!("{}", report.to_csv()),
    }
    println!("{}", report.summary_json());
    Ok(())
}

fn derain(common: &Common, input: &Path, fixed_route: Option<usize>, allow_prompt_change: bool) -> Result<()> {
    require_existing(input)?;
    let out = require(&common.out, "--out")?;
    let loaded = checkpoint(common)?;
    let n = loaded.config.model.n_subnets;
    if let Some(r) = fixed_route {
        if r >= n {
            return Err(usage(format!("--route {r} but the model has {n} sub-networks")));
        }
    }
    let stem = input
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("image")
        .to_string();
    let mut files = vec![format!("{stem}_derained.png")];
    files.extend((1..=3).map(|l| format!("{stem}_mask{l}.png")));
    check_outputs(out, &files, common.force)?;
    let img = Image::load(input).with_context(|| format!("reading {}", input.display()))?;
    let selected = match fixed_route {
        Some(r) => r,
        None => {
            let prompts = prompts(common)?;
            loaded
                .check_prompts(&prompts, allow_prompt_change)
                .map_err(|e| usage(e.to_string()))?;
            route(&img, &prompts, &gateway(common)?)?.selected
        }
    };
    let (restored, masks) = loaded.model.derain(&img, selected)?;
    fs::create_dir_all(out)?;
    restored.save_png(out.join(&files[0]))?;
    let (h, w) = img.dims();
    for (mask, name) in masks.iter().zip(&files[1..]) {
        heatmap(mask, h, w)?.save_png(out.join(name))?;
    }
    info!("route {selected}; wrote {} files to {}", 1 + masks.len(), out.display());
    Ok(())
}

fn analyze_prompts(common: &Common) -> Result<()> {
    let manifests = manifests(common)?;
    let prompts = prompts(common)?;
    prompts.validate().map_err(|e| usage(e.to_string()))?;
    let gateway = gateway(common)?;
    let file = "prompt_distribution.csv".to_string();
    if let Some(out) = &common.out {
        check_outputs(out, std::slice::from_ref(&file), common.force)?;
    }
    let mut rows = Vec::new();
    for m in &manifests {
        rows.extend(prompt_distribution(m, &prompts, &gateway)?);
    }
    let csv = to_csv(&rows);
    match &common.out {
        Some(out) => {
            fs::create_dir_all(out)?;
            fs::write(out.join(&file), &csv)?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn viz_masks(common: &Common, limit: Option<usize>, allow_prompt_change: bool) -> Result<()> {
    let out = require(&common.out, "--out")?;
    let loaded = checkpoint(common)?;
    if !loaded.config.ablation.mgca_on {
        return Err(usage("the checkpoint was trained without mask prediction"));
    }
    let manifest = single_manifest(common)?;
    let prompts = prompts(common)?;
    loaded
        .check_prompts(&prompts, allow_prompt_change)
        .map_err(|e| usage(e.to_string()))?;
    let gateway = gateway(common)?;
    let take = limit.unwrap_or(manifest.len()).min(manifest.len());
    let names: Vec<PathBuf> = manifest.entries()[..take]
        .iter()
        .map(|e| PathBuf::from(format!("{}_masks.png", e.id.replace('/', "_"))))
        .collect();
    check_outputs(
        out,
        &names.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        common.force,
    )?;
    let pairs = (0..take).map(|i| manifest.load_pair(i)).collect::<clip_rpn::Result<Vec<_>>>()?;
    let routes = compute_routes(&pairs, &prompts, &gateway)?;
    fs::create_dir_all(out)?;
    for ((pair, decision), name) in pairs.iter().zip(&routes).zip(&names) {
        let (h, w) = pair.dims();
        let (restored, masks) = loaded.model.derain(&pair.rainy, decision.selected)?;
        let gt = heatmap(&gt_mask(pair, loaded.config.mask_threshold)?, h, w)?;
        let mut panels = vec![pair.rainy.clone(), restored, gt];
        for m in &masks {
            panels.push(heatmap(m, h, w)?);
        }
        side_by_side(&panels.iter().collect::<Vec<_>>())?.save_png(out.join(name))?;
    }
    info!("wrote {} panels to {}", names.len(), out.display());
    Ok(())
}

fn synth_data(common: &Common, count: usize, size: usize) -> Result<()> {
    let out = require(&common.out, "--out")?;
    if count == 0 || size < 8 {
        return Err(usage("--count must be positive and --size at least 8"));
    }
    check_outputs(out, &["rain".into(), "norain".into()], common.force)?;
    let params = SynthRainParams {
        seed: common.seed.unwrap_or(0),
        ..Default::default()
    };
    let manifest = write_synthetic_dataset(out, count, size, &params)?;
    info!("wrote {} pairs of {size}x{size} to {}", manifest.len(), out.display());
    Ok(())
}

/// CSV rows `progress,exponent,eps,grad` for each requested progress point.
pub fn loss_profile_csv(beta: f64, eta: f64, progress: &[f64], points: usize) -> clip_rpn::Result<String> {
    const STEPS: u64 = 1_000_000;
    let schedule = LossSchedule::new(beta, eta, STEPS)?;
    let grid = eps_grid(0.01, 1.0, points);
    let mut csv = String::from("progress,exponent,eps,grad\n");
    for &p in progress {
        let exponent = schedule.exponent((p * STEPS as f64).round() as u64)?;
        for (e, g) in grid.iter().zip(gradient_profile(exponent, &grid)?) {
            csv.push_str(&format!("{p},{exponent},{e},{g}\n"));
        }
    }
    Ok(csv)
}

fn loss_profile(common: &Common, beta: f64, eta: f64, progress: &[f64], points: usize) -> Result<()> {
    if points < 2 {
        return Err(usage("--points must be at least 2"));
    }
    if let Some(p) = progress.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(usage(format!("progress {p} is outside [0, 1]")));
    }
    let csv = loss_profile_csv(beta, eta, progress, points).map_err(|e| usage(e.to_string()))?;
    let file = "loss_profile.csv".to_string();
    match &common.out {
        Some(out) => {
            check_outputs(out, std::slice::from_ref(&file), common.force)?;
            fs::create_dir_all(out)?;
            fs::write(out.join(&file), csv)?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_rows_and_exponents() {
        let csv = loss_profile_csv(0.8, 2.3, &[0.0, 1.0], 3).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 2 * 3);
        assert!(lines[1].starts_with("0,0.8,0.01,"));
        let last: Vec<f64> = lines[6].split(',').map(|v| v.parse().unwrap()).collect();
        assert!((last[1] - 3.1).abs() < 1e-12);
        assert_eq!(last[2], 1.0);
        assert!((last[3] - last[1]).abs() < 1e-12);
    }

    #[test]
    fn existing_outputs_need_force() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.png"), b"x").unwrap();
        let files = ["a.png".to_string()];
        assert!(check_outputs(dir.path(), &files, false).unwrap_err().is::<UsageError>());
        assert!(check_outputs(dir.path(), &files, true).is_ok());
        assert!(check_outputs(dir.path(), &["b.png".into()], false).is_ok());
    }
}
