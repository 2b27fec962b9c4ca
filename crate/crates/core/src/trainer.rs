//! Training loop: warmup plus cosine learning rate, route-grouped
//! micro-batches with gradient accumulation, AdamW, checkpoints and
//! evaluation.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Ablation, BackboneConfig, Model, DIVISOR};
use crate::checkpoint::{self, Header, PromptInfo, RngState};
use crate::dataset::{gt_pyramid, DatasetManifest, ImagePair, MASK_THRESHOLD};
use crate::dls::{total_loss, LossKind, LossSchedule, ScheduleFn, TotalLossBreakdown};
use crate::error::{Error, Result};
use crate::imaging::{crop_pair, flip_pair, psnr, sample_crop, sample_flips, ssim, MetricsReport, MetricsSummary};
use crate::nn::{images_to_tensor, masks_to_tensor};
use crate::optim::{AdamW, AdamWConfig, GradAccumulator, MomentState};
use crate::rpn::{multilevel_mask_losses, route, RoutingDecision};
use crate::vlm::{Gateway, PromptSet};

/// Every knob of a training run. Serializes to the TOML or JSON config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    /// Floor reached by the cosine decay at the last epoch.
    pub lr_min: f64,
    pub weight_decay: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Side of the square training crop; a multiple of 8.
    pub crop: usize,
    pub flip_p: f64,
    pub mixed_precision: bool,
    pub ablation: Ablation,
    pub loss: LossKind,
    pub beta: f64,
    pub eta: f64,
    pub schedule: ScheduleFn,
    pub seed: u64,
    /// Global gradient-norm limit; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub mask_threshold: f32,
    /// Evaluate on the training pairs every this many epochs; 0 never.
    pub eval_every: usize,
    pub model: BackboneConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        Self {
            lr: 2e-4,
            lr_min: 1e-6,
            weight_decay: adam.weight_decay,
            adam_betas: adam.betas,
            adam_eps: adam.eps,
            batch_size: 8,
            epochs: 300,
            warmup_epochs: 15,
            crop: 128,
            flip_p: 0.5,
            mixed_precision: false,
            ablation: Ablation::default(),
            loss: LossKind::Dls,
            beta: 0.8,
            eta: 2.3,
            schedule: ScheduleFn::Linear,
            seed: 0,
            grad_clip: Some(1.0),
            mask_threshold: MASK_THRESHOLD,
            eval_every: 0,
            model: BackboneConfig::desk(2),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return bad(format!("lr_min must lie in [0, lr], got {}", self.lr_min));
        }
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return bad(format!(
                "need warmup_epochs < epochs, got {} and {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.crop == 0 || self.crop % DIVISOR != 0 {
            return Err(Error::NotDivisible {
                what: "crop".into(),
                value: self.crop,
                factor: DIVISOR,
            });
        }
        if !(0.0..=1.0).contains(&self.flip_p) {
            return bad(format!("flip_p must lie in [0, 1], got {}", self.flip_p));
        }
        if self.mixed_precision {
            return bad("mixed precision is not available on the CPU backend".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("adam betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        LossSchedule::new(self.beta, self.eta, 1)?;
        self.model.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a `.toml` or `.json` file, chosen by extension.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json(&text),
            _ => Self::from_toml(&text),
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            betas: self.adam_betas,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> usize {
        dataset_len.div_ceil(self.batch_size)
    }
}

/// Learning rate at a (fractional) epoch: linear from 0 to `lr` over the
/// warmup, then cosine decay from `lr` down to `lr_min` at the last epoch.
/// Inputs outside `[0, epochs]` are clamped.
pub fn lr_at(epoch_fraction: f64, cfg: &TrainConfig) -> f64 {
    let e = epoch_fraction.clamp(0.0, cfg.epochs as f64);
    let warmup = cfg.warmup_epochs as f64;
    if e < warmup {
        return cfg.lr * e / warmup;
    }
    let p = (e - warmup) / (cfg.epochs as f64 - warmup);
    cfg.lr - (cfg.lr - cfg.lr_min) * (1.0 - (std::f64::consts::PI * p).cos()) / 2.0
}

/// One line of the JSON-lines step log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub tau: u64,
    pub exponent: f64,
    pub total: f64,
    pub recon: f64,
    pub bce: [f64; 3],
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub mean_total: f64,
    pub mean_recon: f64,
    pub mean_bce: [f64; 3],
    /// Images sent to each sub-network this epoch.
    pub route_counts: Vec<usize>,
    pub eval: Option<MetricsSummary>,
}

/// Routes every image with the gateway, on the full uncropped rainy input.
pub fn compute_routes(pairs: &[ImagePair], prompts: &PromptSet, gateway: &Gateway) -> Result<Vec<RoutingDecision>> {
    pairs.iter().map(|p| route(&p.rainy, prompts, gateway)).collect()
}

/// Model, optimizer and data for one run.
#[derive(Debug)]
pub struct Trainer {
    config: TrainConfig,
    model: Model,
    optimizer: AdamW,
    schedule: LossSchedule,
    pairs: Vec<ImagePair>,
    routes: Vec<usize>,
    prompts: PromptInfo,
    rng: ChaCha8Rng,
    tau: u64,
    epoch: usize,
    history: Vec<StepRecord>,
    step_log: Option<BufWriter<File>>,
}

impl Trainer {
    /// Starts a fresh run. Images are routed once, up front.
    pub fn new(config: TrainConfig, pairs: Vec<ImagePair>, prompts: &PromptSet, gateway: &Gateway) -> Result<Self> {
        let decisions = compute_routes(&pairs, prompts, gateway)?;
        Self::with_routes(config, pairs, prompts, decisions.iter().map(|d| d.selected).collect())
    }

    /// Starts a fresh run with routes chosen by the caller.
    pub fn with_routes(config: TrainConfig, pairs: Vec<ImagePair>, prompts: &PromptSet, routes: Vec<usize>) -> Result<Self> {
        config.validate()?;
        if pairs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if routes.len() != pairs.len() {
            return Err(crate::error::shape_mismatch(pairs.len(), routes.len()));
        }
        if prompts.len() != config.model.n_subnets {
            return Err(Error::InvalidConfig(format!(
                "{} prompts for {} sub-networks",
                prompts.len(),
                config.model.n_subnets
            )));
        }
        for p in &pairs {
            sample_crop(p.rainy.height(), p.rainy.width(), config.crop, &mut ChaCha8Rng::seed_from_u64(0))?;
        }
        let model = Model::new(&config.model, config.ablation, DType::F32, config.seed)?;
        let routes = routes.into_iter().map(|r| model.effective_route(r)).collect::<Vec<_>>();
        if let Some(&bad) = routes.iter().find(|&&r| r >= config.model.n_subnets) {
            return Err(Error::InvalidRoute {
                index: bad,
                n_subnets: config.model.n_subnets,
            });
        }
        if config.ablation.rpn_on {
            for s in (0..config.model.n_subnets).filter(|s| !routes.contains(s)) {
                warn!("no training image is routed to sub-network {s}; it will not train");
            }
        }
        let optimizer = AdamW::new(model.params(), config.adamw())?;
        let total_steps = (config.epochs * config.steps_per_epoch(pairs.len())) as u64;
        let schedule = LossSchedule::new(config.beta, config.eta, total_steps)?.with_schedule(config.schedule);
        schedule.validate()?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            model,
            optimizer,
            schedule,
            pairs,
            routes,
            prompts: PromptInfo {
                name: prompts.name.clone(),
                hash: prompts.hash(),
            },
            tau: 0,
            epoch: 0,
            history: Vec::new(),
            step_log: None,
        })
    }

    /// Appends every step record to a JSON-lines file.
    pub fn with_step_log(mut self, path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        self.step_log = Some(BufWriter::new(file));
        Ok(self)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn pairs(&self) -> &[ImagePair] {
        &self.pairs
    }

    /// Effective route of every training image.
    pub fn routes(&self) -> &[usize] {
        &self.routes
    }

    pub fn tau(&self) -> u64 {
        self.tau
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn total_steps(&self) -> u64 {
        self.schedule.total_steps
    }

    pub fn history(&self) -> &[StepRecord] {
        &self.history
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// One optimizer step on the given training indices.
    pub fn step(&mut self, batch: &[usize], lr: f64) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut crops = Vec::with_capacity(batch.len());
        for &i in batch {
            let pair = &self.pairs[i];
            let win = sample_crop(pair.rainy.height(), pair.rainy.width(), self.config.crop, &mut self.rng)?;
            let flips = sample_flips(self.config.flip_p, &mut self.rng)?;
            crops.push((self.routes[i], flip_pair(&crop_pair(pair, win)?, flips)));
        }

        let mut groups: Vec<(usize, Vec<&ImagePair>)> = Vec::new();
        for (r, pair) in &crops {
            match groups.iter_mut().find(|(g, _)| g == r) {
                Some((_, members)) => members.push(pair),
                None => groups.push((*r, vec![pair])),
            }
        }
        groups.sort_by_key(|(r, _)| *r);

        let dtype = self.model.dtype();
        let mgca = self.model.ablation().mgca_on;
        let mut acc = GradAccumulator::new(self.model.params().params().len());
        let (mut recon, mut bce) = (0.0, [0.0; 3]);
        let mut exponent = 0.0;
        for (r, members) in &groups {
            let weight = members.len() as f64 / batch.len() as f64;
            let rainy: Vec<_> = members.iter().map(|p| &p.rainy).collect();
            let clean: Vec<_> = members.iter().map(|p| &p.clean).collect();
            let x = images_to_tensor(&rainy, dtype, &Device::Cpu)?;
            let y = images_to_tensor(&clean, dtype, &Device::Cpu)?;
            let out = self.model.forward(&x, *r)?;
            let mut mask_pairs = Vec::new();
            if mgca {
                let pyramids = members
                    .iter()
                    .map(|p| gt_pyramid(p, self.config.mask_threshold))
                    .collect::<Result<Vec<_>>>()?;
                for (level, pred) in out.masks.iter().enumerate() {
                    let gts: Vec<_> = pyramids.iter().map(|p| &p[level].values).collect();
                    mask_pairs.push((pred.clone(), masks_to_tensor(&gts, dtype, &Device::Cpu)?));
                }
            }
            let loss = total_loss(self.config.loss, &out.output, &y, &mask_pairs, &self.schedule, self.tau)?;
            let grads = loss.loss.backward()?;
            acc.add(self.model.params(), &grads, weight)?;
            recon += weight * loss.breakdown.reconstruction;
            for (b, v) in bce.iter_mut().zip(loss.breakdown.mask_bce) {
                *b += weight * v;
            }
            exponent = loss.breakdown.current_exponent;
        }
        if let Some(max) = self.config.grad_clip {
            acc.clip_global_norm(max)?;
        }
        self.optimizer.step(acc.grads(), lr)?;
        self.tau += 1;

        let breakdown = TotalLossBreakdown::new(recon, bce, exponent);
        let record = StepRecord {
            step: self.tau,
            tau: self.tau,
            exponent: breakdown.current_exponent,
            total: breakdown.total,
            recon: breakdown.reconstruction,
            bce: breakdown.mask_bce,
            lr,
        };
        if let Some(log) = self.step_log.as_mut() {
            serde_json::to_writer(&mut *log, &record)?;
            writeln!(log)?;
            log.flush()?;
        }
        self.history.push(record.clone());
        Ok(record)
    }

    /// Shuffles, batches and trains over the whole dataset once.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        if self.is_finished() {
            return Err(Error::InvalidConfig(format!(
                "training already finished after {} epochs",
                self.config.epochs
            )));
        }
        let mut order: Vec<usize> = (0..self.pairs.len()).collect();
        order.shuffle(&mut self.rng);
        let per_epoch = self.config.steps_per_epoch(self.pairs.len());
        let mut route_counts = vec![0; self.config.model.n_subnets];
        for &i in &order {
            route_counts[self.routes[i]] += 1;
        }
        let (mut total, mut recon, mut bce) = (0.0, 0.0, [0.0; 3]);
        for (k, batch) in order.chunks(self.config.batch_size).enumerate() {
            let lr = lr_at(self.epoch as f64 + k as f64 / per_epoch as f64, &self.config);
            let rec = self.step(batch, lr)?;
            total += rec.total / per_epoch as f64;
            recon += rec.recon / per_epoch as f64;
            for (b, v) in bce.iter_mut().zip(rec.bce) {
                *b += v / per_epoch as f64;
            }
        }
        self.epoch += 1;
        let eval = if self.config.eval_every > 0 && self.epoch % self.config.eval_every == 0 {
            Some(self.evaluate_training_set()?.summary())
        } else {
            None
        };
        let record = EpochRecord {
            epoch: self.epoch,
            steps: per_epoch,
            mean_total: total,
            mean_recon: recon,
            mean_bce: bce,
            route_counts,
            eval,
        };
        info!(
            "epoch {} loss {:.5} recon {:.5} routes {:?}",
            record.epoch, record.mean_total, record.mean_recon, record.route_counts
        );
        Ok(record)
    }

    /// Trains until the configured number of epochs is reached.
    pub fn run(&mut self) -> Result<Vec<EpochRecord>> {
        let mut out = Vec::new();
        while !self.is_finished() {
            out.push(self.run_epoch()?);
        }
        Ok(out)
    }

    /// Full-image metrics on the training pairs.
    pub fn evaluate_training_set(&self) -> Result<MetricsReport> {
        evaluate(&self.model, &self.pairs, &self.routes)
    }

    /// Mean per-level mask BCE on the full training images.
    pub fn mask_bce(&self) -> Result<[f64; 3]> {
        mask_bce(&self.model, &self.pairs, &self.routes, self.config.mask_threshold)
    }

    /// Writes the full training state; overwrites an existing checkpoint in
    /// `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let params = self.model.params().params();
        let mut arrays: Vec<(String, &Tensor)> = params.iter().map(|p| (p.name.clone(), p.var.as_tensor())).collect();
        for (p, st) in params.iter().zip(self.optimizer.state()) {
            arrays.push((format!("opt.m.{}", p.name), &st.m));
            arrays.push((format!("opt.v.{}", p.name), &st.v));
        }
        let (blob, entries) = checkpoint::pack(&arrays)?;
        let header = Header {
            format: checkpoint::FORMAT_VERSION,
            config: self.config.clone(),
            config_hash: self.model.config_hash(),
            prompts: self.prompts.clone(),
            tau: self.tau,
            epoch: self.epoch,
            rng: RngState {
                seed: crate::vlm::hex(&self.rng.get_seed()),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos().to_string(),
            },
            optimizer_steps: self.optimizer.state().iter().map(|s| s.steps).collect(),
            arrays: entries,
        };
        checkpoint::write(dir, &header, &blob)
    }

    /// Continues a run from a checkpoint. A prompt set whose hash differs
    /// from the recorded one is an error unless `allow_prompt_change`.
    pub fn resume(
        dir: impl AsRef<Path>,
        pairs: Vec<ImagePair>,
        prompts: &PromptSet,
        gateway: &Gateway,
        allow_prompt_change: bool,
    ) -> Result<Self> {
        let (header, blob) = checkpoint::read::<TrainConfig>(&dir)?;
        check_prompts(&header.prompts, prompts, allow_prompt_change)?;
        let mut trainer = Self::new(header.config.clone(), pairs, prompts, gateway)?;
        trainer.restore(&header, &blob)?;
        Ok(trainer)
    }

    fn restore(&mut self, header: &Header<TrainConfig>, blob: &[u8]) -> Result<()> {
        load_params(&self.model, header, blob)?;
        let find = |name: &str| {
            header
                .arrays
                .iter()
                .find(|a| a.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))
        };
        let params = self.model.params().params();
        if header.optimizer_steps.len() != params.len() {
            return Err(Error::Checkpoint("optimizer step counts do not match the model".into()));
        }
        let mut state = Vec::with_capacity(params.len());
        for (p, &steps) in params.iter().zip(&header.optimizer_steps) {
            let dtype = p.var.dtype();
            state.push(MomentState {
                m: checkpoint::unpack(blob, find(&format!("opt.m.{}", p.name))?)?.to_dtype(dtype)?,
                v: checkpoint::unpack(blob, find(&format!("opt.v.{}", p.name))?)?.to_dtype(dtype)?,
                steps,
            });
        }
        self.optimizer.set_state(state)?;
        let seed = decode_hex32(&header.rng.seed)?;
        let word_pos: u128 = header
            .rng
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad RNG position `{}`", header.rng.word_pos)))?;
        self.rng = ChaCha8Rng::from_seed(seed);
        self.rng.set_stream(header.rng.stream);
        self.rng.set_word_pos(word_pos);
        self.tau = header.tau;
        self.epoch = header.epoch;
        Ok(())
    }
}

fn decode_hex32(s: &str) -> Result<[u8; 32]> {
    let bad = || Error::Checkpoint(format!("bad RNG seed `{s}`"));
    if s.len() != 64 {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(out)
}

fn check_prompts(recorded: &PromptInfo, prompts: &PromptSet, allow_change: bool) -> Result<()> {
    let hash = prompts.hash();
    if hash == recorded.hash {
        return Ok(());
    }
    if allow_change {
        warn!(
            "prompt set `{}` differs from the one used in training (`{}`); continuing",
            prompts.name, recorded.name
        );
        Ok(())
    } else {
        Err(Error::PromptSetMismatch {
            expected: recorded.hash.clone(),
            got: hash,
        })
    }
}

fn load_params<C>(model: &Model, header: &Header<C>, blob: &[u8]) -> Result<()> {
    if header.config_hash != model.config_hash() {
        return Err(Error::Checkpoint(format!(
            "config hash {} does not match the model ({})",
            header.config_hash,
            model.config_hash()
        )));
    }
    for p in model.params().params() {
        let entry = header
            .arrays
            .iter()
            .find(|a| a.name == p.name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", p.name)))?;
        let t = checkpoint::unpack(blob, entry)?;
        if t.dims() != p.var.dims() {
            return Err(Error::Checkpoint(format!(
                "parameter `{}` has shape {:?}, model expects {:?}",
                p.name,
                t.dims(),
                p.var.dims()
            )));
        }
        p.var.set(&t.to_dtype(p.var.dtype())?)?;
    }
    Ok(())
}

/// A trained model restored for inference.
#[derive(Debug)]
pub struct LoadedModel {
    pub model: Model,
    pub config: TrainConfig,
    pub prompts: PromptInfo,
    pub epoch: usize,
    pub tau: u64,
}

impl LoadedModel {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let (header, blob) = checkpoint::read::<TrainConfig>(&dir)?;
        let model = Model::new(&header.config.model, header.config.ablation, DType::F32, header.config.seed)?;
        load_params(&model, &header, &blob)?;
        Ok(Self {
            model,
            config: header.config,
            prompts: header.prompts,
            epoch: header.epoch,
            tau: header.tau,
        })
    }

    /// Errors (or warns, with `allow_change`) when `prompts` is not the set
    /// the model was trained with.
    pub fn check_prompts(&self, prompts: &PromptSet, allow_change: bool) -> Result<()> {
        check_prompts(&self.prompts, prompts, allow_change)?;
        if prompts.len() != self.config.model.n_subnets {
            return Err(Error::InvalidConfig(format!(
                "{} prompts for {} sub-networks",
                prompts.len(),
                self.config.model.n_subnets
            )));
        }
        Ok(())
    }

    /// Routes each image with the gateway, then evaluates on full images.
    pub fn evaluate(&self, pairs: &[ImagePair], prompts: &PromptSet, gateway: &Gateway) -> Result<MetricsReport> {
        let routes: Vec<usize> = compute_routes(pairs, prompts, gateway)?.iter().map(|d| d.selected).collect();
        evaluate(&self.model, pairs, &routes)
    }
}

/// Full-image PSNR and SSIM of the model output against the clean images.
pub fn evaluate(model: &Model, pairs: &[ImagePair], routes: &[usize]) -> Result<MetricsReport> {
    if routes.len() != pairs.len() {
        return Err(crate::error::shape_mismatch(pairs.len(), routes.len()));
    }
    let mut report = MetricsReport::default();
    for (pair, &r) in pairs.iter().zip(routes) {
        let (restored, _) = model.derain(&pair.rainy, model.effective_route(r))?;
        report.push(pair.id.clone(), psnr(&restored, &pair.clean)?, ssim(&restored, &pair.clean)?);
    }
    Ok(report)
}

/// Metrics of the rainy inputs themselves, the no-op reference.
pub fn baseline_metrics(pairs: &[ImagePair]) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    for pair in pairs {
        report.push(pair.id.clone(), psnr(&pair.rainy, &pair.clean)?, ssim(&pair.rainy, &pair.clean)?);
    }
    Ok(report)
}

/// Mean per-level BCE between predicted and ground-truth masks on full
/// images. All zero when the model has no mask heads.
pub fn mask_bce(model: &Model, pairs: &[ImagePair], routes: &[usize], threshold: f32) -> Result<[f64; 3]> {
    let mut out = [0.0; 3];
    if !model.ablation().mgca_on {
        return Ok(out);
    }
    for (pair, &r) in pairs.iter().zip(routes) {
        let (_, masks) = model.derain(&pair.rainy, model.effective_route(r))?;
        let preds: [_; 3] = masks
            .try_into()
            .map_err(|_| Error::Checkpoint("expected three mask levels".into()))?;
        let gt = crate::dataset::gt_mask(pair, threshold)?;
        for (o, v) in out.iter_mut().zip(multilevel_mask_losses(&preds, &gt)?) {
            *o += v / pairs.len() as f64;
        }
    }
    Ok(out)
}

/// Loads a manifest, trains from scratch and saves the final checkpoint to
/// `out` if given.
pub fn train(
    config: TrainConfig,
    manifest: &DatasetManifest,
    prompts: &PromptSet,
    gateway: &Gateway,
    out: Option<PathBuf>,
) -> Result<(Trainer, Vec<EpochRecord>)> {
    let pairs = manifest.load_all()?;
    let mut trainer = Trainer::new(config, pairs, prompts, gateway)?;
    if let Some(dir) = &out {
        std::fs::create_dir_all(dir)?;
        trainer = trainer.with_step_log(dir.join("steps.jsonl"))?;
    }
    let epochs = trainer.run()?;
    if let Some(dir) = &out {
        trainer.save(dir)?;
    }
    Ok((trainer, epochs))
}
