//! Two-phase training: an early-stopped main-head model mines tissue priors,
//! then the encoder and all configured decoders train jointly on
//! `L_m + lambda_c L_c + lambda_p L_p + lambda_d L_d`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, ImageRecord};
use crate::error::{Error, Result};
use crate::losses::{self, IouMode, LossWeights, Map, MapPair};
use crate::maskgen::{self, DynamicMaskParams, PriorMask};
use crate::net::{self, BranchGrads, CheckpointMeta, Head, Model, NetworkConfig};
use crate::optim::{AdamSettings, AdamW};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs_pretrain: usize,
    pub epochs_main: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum_beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub iou_mode: IouMode,
    pub normalize_prior_loss: bool,
    pub circle_radius: f64,
    pub dynamic_params: DynamicMaskParams,
    pub prior_threshold: f64,
    pub prior_closing_radius: usize,
    pub seed: u64,
    pub heads: Vec<Head>,
    pub base_channels: usize,
    pub feature_channels: usize,
    pub depth: usize,
    /// Initialize the phase-2 encoder and main decoder from the pre-trained model.
    pub warm_start: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_pretrain: 10,
            epochs_main: 20,
            batch_size: 4,
            learning_rate: 1e-3,
            momentum_beta1: 0.9,
            beta2: 0.999,
            weight_decay: 2e-5,
            weights: LossWeights::default(),
            iou_mode: IouMode::Union,
            normalize_prior_loss: false,
            circle_radius: 7.0,
            dynamic_params: DynamicMaskParams::default(),
            prior_threshold: 0.5,
            prior_closing_radius: 5,
            seed: 0,
            heads: Head::ALL.to_vec(),
            base_channels: 4,
            feature_channels: 32,
            depth: 4,
            warm_start: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.epochs_pretrain == 0 {
            return bad("epochs_pretrain must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be > 0", self.learning_rate));
        }
        for (name, b) in [("momentum_beta1", self.momentum_beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} {b} outside [0, 1)"));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay {} must be >= 0", self.weight_decay));
        }
        if !(self.circle_radius >= 0.0 && self.circle_radius.is_finite()) {
            return bad(format!("circle_radius {} must be >= 0", self.circle_radius));
        }
        if !(self.prior_threshold > 0.0 && self.prior_threshold < 1.0) {
            return bad(format!("prior_threshold {} outside (0, 1)", self.prior_threshold));
        }
        if !self.heads.contains(&Head::Main) {
            return bad("heads must include main".into());
        }
        self.weights.validate()?;
        self.dynamic_params.validate()
    }

    pub fn network(&self, input_dims: (usize, usize)) -> NetworkConfig {
        NetworkConfig::new(input_dims, self.base_channels, self.feature_channels, self.depth, &self.heads)
    }

    pub fn adam(&self) -> AdamSettings {
        AdamSettings {
            learning_rate: self.learning_rate,
            beta1: self.momentum_beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            ..AdamSettings::default()
        }
    }

    pub fn needs_prior(&self) -> bool {
        self.heads.contains(&Head::Prior)
    }
}

/// Ablation tiers: main only, main + dynamic, all three branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tier {
    #[serde(rename = "ours")]
    Ours,
    #[serde(rename = "ours+")]
    OursPlus,
    #[serde(rename = "ours++")]
    OursPlusPlus,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Ours, Tier::OursPlus, Tier::OursPlusPlus];

    pub fn as_str(self) -> &'static str {
        match self {
            Tier::Ours => "ours",
            Tier::OursPlus => "ours+",
            Tier::OursPlusPlus => "ours++",
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Tier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Tier::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown tier '{s}' (expected ours, ours+ or ours++)")))
    }
}

/// Restricts `cfg` to the heads and loss terms of `tier`. Ours++ keeps the
/// configured weights.
pub fn ablation_variant(cfg: &TrainConfig, tier: Tier) -> TrainConfig {
    let mut out = cfg.clone();
    match tier {
        Tier::Ours => {
            out.heads = vec![Head::Main];
            out.weights.lambda_c = 0.0;
            out.weights.lambda_p = 0.0;
            out.weights.lambda_d = 0.0;
        }
        Tier::OursPlus => {
            out.heads = vec![Head::Main, Head::Dynamic];
            out.weights.lambda_p = 0.0;
        }
        Tier::OursPlusPlus => out.heads = Head::ALL.to_vec(),
    }
    out
}

/// Prior masks keyed by image id, computed once after pre-training.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PriorBank {
    pub masks: BTreeMap<String, PriorMask>,
}

impl PriorBank {
    pub fn get(&self, id: &str) -> Result<&PriorMask> {
        self.masks.get(id).ok_or_else(|| Error::MissingPrior(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Writes one `<id>.png` (0/255) per entry.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (id, mask) in &self.masks {
            data::write_binary_png(&dir.join(format!("{id}.png")), &mask.p1)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path, ids: impl IntoIterator<Item = impl Into<String>>) -> Result<Self> {
        let mut masks = BTreeMap::new();
        for id in ids {
            let id = id.into();
            let path = dir.join(format!("{id}.png"));
            if !path.exists() {
                return Err(Error::MissingPrior(id));
            }
            masks.insert(id, PriorMask { p1: data::read_binary_png(&path)? });
        }
        Ok(Self { masks })
    }
}

/// One row of the training-curve CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub l_m: f64,
    pub l_ce: f64,
    pub l_iou: f64,
    pub l_c: f64,
    pub l_p: f64,
    pub l_d: f64,
    pub l_t: f64,
}

pub fn write_loss_csv(path: &Path, records: &[LossRecord]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub struct PretrainOutcome {
    pub model: Model,
    pub priors: PriorBank,
    pub losses: Vec<LossRecord>,
}

pub struct TrainOutcome {
    pub model: Model,
    pub losses: Vec<LossRecord>,
    /// Checkpoints written at the end of each epoch, in order.
    pub checkpoints: Vec<PathBuf>,
}

fn input_dims(dataset: &Dataset) -> Result<(usize, usize)> {
    let first = dataset
        .records
        .first()
        .ok_or_else(|| Error::Dataset("training set is empty".into()))?;
    let dims = (first.rows(), first.cols());
    if let Some(r) = dataset.records.iter().find(|r| (r.rows(), r.cols()) != dims) {
        return Err(Error::Dataset(format!(
            "image '{}' is {}x{}, expected {}x{}",
            r.id,
            r.rows(),
            r.cols(),
            dims.0,
            dims.1
        )));
    }
    Ok(dims)
}

fn circle_targets(dataset: &Dataset, radius: f64) -> Vec<MapPair> {
    dataset
        .records
        .iter()
        .map(|r| maskgen::circle_mask(&r.annotations, radius, r.rows(), r.cols()).to_f64())
        .collect()
}

fn epoch_order(n: usize, parts: &[u64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(parts));
    order
}

const PHASE_PRETRAIN: u64 = 1;
const PHASE_MAIN: u64 = 2;

/// Trains encoder + main decoder with cross-entropy on circle masks for
/// exactly `epochs_pretrain` epochs, then thresholds and closes its
/// positive-class output on every training image.
pub fn pretrain_prior_model(dataset: &Dataset, cfg: &TrainConfig) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let dims = input_dims(dataset)?;
    let mut model = Model::new(cfg.network(dims).with_heads(&[Head::Main]), seed::mix(&[cfg.seed, PHASE_PRETRAIN]))?;
    let targets = circle_targets(dataset, cfg.circle_radius);
    let mut opt = AdamW::new(model.count_parameters(), cfg.adam());
    let mut grad = vec![0f32; model.count_parameters()];
    let mut losses = Vec::new();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs_pretrain {
        let order = epoch_order(dataset.len(), &[cfg.seed, PHASE_PRETRAIN, epoch as u64]);
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            let mut ce_sum = 0.0;
            for &i in batch {
                let (out, trace) = model.forward_train(&dataset.records[i].pixels)?;
                let ce = losses::ce_loss(&out.main.maps, &targets[i])?;
                let dz = losses::ce_logit_grad(&out.main.maps, &targets[i])?;
                ce_sum += ce;
                let grads = BranchGrads {
                    main_logits: Some(dz.map(|d| d * scale)),
                    ..Default::default()
                };
                model.backward(&trace, &grads, &mut grad);
            }
            let ce = ce_sum * scale;
            if !ce.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { phase: "pretrain", step });
            }
            opt.step(model.params_mut(), &grad);
            losses.push(LossRecord {
                step,
                l_m: ce,
                l_ce: ce,
                l_iou: 0.0,
                l_c: 0.0,
                l_p: 0.0,
                l_d: 0.0,
                l_t: ce,
            });
            step += 1;
        }
    }
    let priors = extract_priors(&model, dataset, cfg)?;
    Ok(PretrainOutcome { model, priors, losses })
}

/// Runs the main branch over every image and turns its positive-class map into
/// a prior mask.
pub fn extract_priors(model: &Model, dataset: &Dataset, cfg: &TrainConfig) -> Result<PriorBank> {
    let mut masks = BTreeMap::new();
    for r in &dataset.records {
        let p = model.forward_main(&r.pixels)?;
        let mask = maskgen::prior_mask(&p.maps[1], cfg.prior_threshold, cfg.prior_closing_radius)?;
        masks.insert(r.id.clone(), mask);
    }
    Ok(PriorBank { masks })
}

/// Multi-task training of the encoder and every head in `cfg.heads`.
///
/// Dynamic masks are redrawn at every global step. When `out_dir` is given, a
/// checkpoint is written to `out_dir/checkpoints/epoch_NNN.ckpt` after each
/// epoch and the loss curve to `out_dir/losses.csv`.
pub fn train_multitask(
    dataset: &Dataset,
    priors: Option<&PriorBank>,
    cfg: &TrainConfig,
    warm_start_from: Option<&Model>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dims = input_dims(dataset)?;
    let network = cfg.network(dims);
    let has_dynamic = network.has_head(Head::Dynamic);
    let has_prior = network.has_head(Head::Prior);
    let prior_targets: Vec<Option<Map>> = if has_prior {
        let bank = priors.ok_or(Error::MissingPrior("<no prior bank supplied>".into()))?;
        dataset
            .records
            .iter()
            .map(|r| bank.get(&r.id).map(|m| Some(m.p1.mapv(f64::from))))
            .collect::<Result<_>>()?
    } else {
        vec![None; dataset.len()]
    };
    let mut model = Model::new(network, seed::mix(&[cfg.seed, PHASE_MAIN]))?;
    if cfg.warm_start {
        let source = warm_start_from
            .ok_or_else(|| Error::Config("warm_start requires a pre-trained model".into()))?;
        model.copy_shared_from(source)?;
    }
    let targets = circle_targets(dataset, cfg.circle_radius);
    let w = cfg.weights;
    let mut opt = AdamW::new(model.count_parameters(), cfg.adam());
    let mut grad = vec![0f32; model.count_parameters()];
    let mut records = Vec::new();
    let mut checkpoints = Vec::new();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs_main {
        let order = epoch_order(dataset.len(), &[cfg.seed, PHASE_MAIN, epoch as u64]);
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            let mut sum = LossRecord {
                step,
                l_m: 0.0,
                l_ce: 0.0,
                l_iou: 0.0,
                l_c: 0.0,
                l_p: 0.0,
                l_d: 0.0,
                l_t: 0.0,
            };
            for &i in batch {
                let record = &dataset.records[i];
                let (out, trace) = model.forward_train(&record.pixels)?;
                let p = &out.main.maps;
                let ce = losses::ce_loss(p, &targets[i])?;
                let (iou, diou) = losses::iou_loss_grad(p, &targets[i], cfg.iou_mode)?;
                let lm = losses::MainLoss {
                    total: losses::combine_main(ce, iou, w.alpha),
                    ce,
                    iou,
                };
                let dce = losses::ce_logit_grad(p, &targets[i])?;
                let mut dmain = diou.map(|d| d * ((1.0 - w.alpha) * scale));
                let mut ddyn = None;
                let (mut l_c, mut l_d, mut l_p) = (0.0, 0.0, 0.0);
                if has_dynamic {
                    let pd = &out.dynamic.as_ref().ok_or(Error::MissingHead("dynamic"))?.maps;
                    let gd = dynamic_target(record, i, cfg, step);
                    let (ld, dld) = losses::l1_map_loss_grad(pd, &gd)?;
                    let (lc, dlc) = losses::l1_map_loss_grad(p, pd)?;
                    l_d = ld;
                    l_c = lc;
                    for l in 0..2 {
                        dmain[l].scaled_add(w.lambda_c * scale, &dlc[l]);
                    }
                    ddyn = Some(std::array::from_fn::<Map, 2, _>(|l| {
                        &dld[l] * (w.lambda_d * scale) - &dlc[l] * (w.lambda_c * scale)
                    }));
                }
                let mut dprior = None;
                if let Some(g_hat) = &prior_targets[i] {
                    let p_hat = out.prior.as_ref().ok_or(Error::MissingHead("prior"))?;
                    let (lp, dlp) = losses::prior_loss_grad(p_hat, g_hat, cfg.normalize_prior_loss)?;
                    l_p = lp;
                    dprior = Some(dlp * (w.lambda_p * scale));
                }
                let lt = losses::total_loss(lm.total, l_c, l_p, l_d, &w)
                    .map_err(|_| Error::Divergence { phase: "main", step })?;
                sum.l_m += lm.total;
                sum.l_ce += lm.ce;
                sum.l_iou += lm.iou;
                sum.l_c += l_c;
                sum.l_p += l_p;
                sum.l_d += l_d;
                sum.l_t += lt;
                let grads = BranchGrads {
                    main: Some(dmain),
                    main_logits: Some(dce.map(|d| d * (w.alpha * scale))),
                    dynamic: ddyn,
                    prior: dprior,
                };
                model.backward(&trace, &grads, &mut grad);
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { phase: "main", step });
            }
            opt.step(model.params_mut(), &grad);
            for v in [
                &mut sum.l_m,
                &mut sum.l_ce,
                &mut sum.l_iou,
                &mut sum.l_c,
                &mut sum.l_p,
                &mut sum.l_d,
                &mut sum.l_t,
            ] {
                *v *= scale;
            }
            records.push(sum);
            step += 1;
        }
        if let Some(dir) = out_dir {
            let path = dir.join("checkpoints").join(format!("epoch_{:03}.ckpt", epoch + 1));
            let meta = CheckpointMeta {
                global_step: step,
                metadata: serde_json::json!({
                    "phase": "main",
                    "epoch": epoch + 1,
                    "train_config": cfg,
                }),
            };
            net::save_checkpoint(&path, &model, &meta)?;
            checkpoints.push(path);
        }
    }
    if let Some(dir) = out_dir {
        write_loss_csv(&dir.join("losses.csv"), &records)?;
    }
    Ok(TrainOutcome {
        model,
        losses: records,
        checkpoints,
    })
}

/// Dynamic target of image `index` at `step`; the stream is keyed by the
/// configured dynamic seed, the run seed and the image position.
fn dynamic_target(record: &ImageRecord, index: usize, cfg: &TrainConfig, step: u64) -> MapPair {
    let params = DynamicMaskParams {
        seed: seed::mix(&[cfg.dynamic_params.seed, cfg.seed, index as u64]),
        ..cfg.dynamic_params
    };
    maskgen::dynamic_mask(&record.annotations, &params, step, record.rows(), record.cols()).to_f64()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiers_parse_and_print() {
        for t in Tier::ALL {
            assert_eq!(t.as_str().parse::<Tier>().unwrap(), t);
        }
        assert!("ours+++".parse::<Tier>().is_err());
    }

    #[test]
    fn ablation_weights() {
        let cfg = TrainConfig::default();
        let ours = ablation_variant(&cfg, Tier::Ours);
        assert_eq!(ours.heads, vec![Head::Main]);
        assert_eq!((ours.weights.lambda_c, ours.weights.lambda_p, ours.weights.lambda_d), (0.0, 0.0, 0.0));
        let plus = ablation_variant(&cfg, Tier::OursPlus);
        assert_eq!(plus.heads, vec![Head::Main, Head::Dynamic]);
        assert_eq!((plus.weights.lambda_c, plus.weights.lambda_p, plus.weights.lambda_d), (0.5, 0.0, 1.0));
        let full = ablation_variant(&cfg, Tier::OursPlusPlus);
        assert_eq!(full.heads, Head::ALL.to_vec());
        assert_eq!(full.weights, LossWeights::default());
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        for broken in [
            TrainConfig { epochs_pretrain: 0, ..ok.clone() },
            TrainConfig { batch_size: 0, ..ok.clone() },
            TrainConfig { learning_rate: 0.0, ..ok.clone() },
            TrainConfig { prior_threshold: 1.0, ..ok.clone() },
            TrainConfig { heads: vec![Head::Prior], ..ok.clone() },
        ] {
            assert!(matches!(broken.validate(), Err(Error::Config(_))));
        }
    }
}
