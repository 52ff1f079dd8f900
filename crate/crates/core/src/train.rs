//! Two-stage training, evaluation and retrieval orchestration.
//!
//! Stage 1 trains the region branch alone with its triplet loss. Stage 2
//! freezes the region encoder, attribute table and joint projection, then
//! trains the patch encoder and branch jointly with the total objective
//! (region triplet + weighted patch triplet + weighted enhanced InfoNCE); the
//! region head keeps learning at a reduced rate. Validation MAP runs after
//! every epoch and the best parameters are carried in the checkpoint.
//!
//! Everything is derived deterministically from the seed: triplet sampling,
//! epoch shuffles and parameter init each use their own derived sub-seed, so
//! a resumed run replays the exact schedule of an uninterrupted one.

use crate::checkpoint::{Checkpoint, CheckpointMeta, FORMAT_VERSION};
use crate::data::{
    build_triplets, imageio, minibatch_sets, AttributeId, BatchSlots, DatasetManifest,
    DatasetSplits, Triplet,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_map, AttributeGallery, GalleryIndex, QueryEmbedding, RetrievalReport};
use crate::exec;
use crate::loss::{e_info_nce, total_loss, triplet_loss, BatchEmbeddings, LossConfig};
use crate::model::{BaselineModel, ModelConfig, RpfModel, TrainForward};
use crate::rng::{derive_seed, rng_from_seed, shuffle, RngState};
use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub backbone_kind: crate::backbone::BackboneKind,
    #[serde(flatten)]
    pub losses: LossConfig,
    /// Inference fusion weight (region share).
    pub lambda: f64,
    /// Triplets per batch; at least 2.
    pub batch_size: usize,
    /// Total triplets constructed, split evenly across attributes.
    pub triplet_count: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub momentum: f64,
    /// Relative learning rate of the region head during stage 2.
    pub head_lr_mult_stage2: f64,
    pub seed: u64,
    /// Force sequential execution (bitwise output is identical either way).
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            backbone_kind: crate::backbone::BackboneKind::Tiny,
            losses: LossConfig::default(),
            lambda: 0.3,
            batch_size: 16,
            triplet_count: 10_000,
            epochs_stage1: 3,
            epochs_stage2: 3,
            lr_stage1: 1e-3,
            lr_stage2: 1e-4,
            momentum: 0.9,
            head_lr_mult_stage2: 0.1,
            seed: 7,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.losses.validate()?;
        crate::eval::check_lambda(self.lambda)?;
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2".into()));
        }
        if self.triplet_count == 0 {
            return Err(Error::Config("triplet_count must be > 0".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, num_attributes: usize) -> ModelConfig {
        match self.backbone_kind {
            crate::backbone::BackboneKind::Tiny => ModelConfig::tiny(num_attributes),
            crate::backbone::BackboneKind::PretrainedLarge => {
                ModelConfig::pretrained_large(num_attributes)
            }
        }
    }

    /// Parse a flat `key = value` config file (TOML grammar). Unknown keys
    /// are rejected.
    pub fn from_toml(text: &str) -> Result<TrainConfig> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))?;
        // serde(flatten) + deny_unknown_fields don't combine; validate instead
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub stage: u32,
    pub loss_r: f64,
    pub loss_p: f64,
    #[serde(rename = "loss_E")]
    pub loss_e: f64,
    pub total: f64,
}

/// In-memory dataset: decoded images resized to the region input side.
pub struct LoadedSplit {
    pub manifest: DatasetManifest,
    pub images: Vec<Array3<f64>>,
}

impl LoadedSplit {
    pub fn load(manifest: &DatasetManifest, input_side: usize) -> Result<LoadedSplit> {
        let paths: Vec<std::path::PathBuf> = (0..manifest.samples.len())
            .map(|i| manifest.image_path(i))
            .collect();
        let results: Vec<Result<Array3<f64>>> = exec::map_collect(&paths, |p| {
            let img = imageio::load_image_rgb(p)?;
            let (_, h, w) = img.dim();
            Ok(if h == input_side && w == input_side {
                img
            } else {
                crate::roi::resize_rgb(&img, input_side)
            })
        });
        let images = results.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(LoadedSplit {
            manifest: manifest.clone(),
            images,
        })
    }
}

struct Batch {
    attribute: AttributeId,
    triplets: Vec<Triplet>,
}

pub struct Trainer {
    pub config: TrainConfig,
    model: RpfModel,
    velocity: RpfModel,
    train: LoadedSplit,
    val: LoadedSplit,
    triplets_by_attr: Vec<Vec<Triplet>>,
    epoch_batches: Vec<Batch>,
    batches_per_epoch: usize,
    stage: u32,
    epoch_in_stage: usize,
    step_in_epoch: usize,
    global_step: usize,
    best_val_map: Option<f64>,
    best_params: Option<RpfModel>,
}

impl Trainer {
    pub fn new(config: TrainConfig, splits: &DatasetSplits) -> Result<Trainer> {
        config.validate()?;
        let num_attributes = splits.train.vocabulary.num_attributes();
        let model_config = config.model_config(num_attributes);
        let mut init_rng = rng_from_seed(derive_seed(config.seed, 1));
        let model = RpfModel::new(&mut init_rng, model_config)?;
        Self::with_model(config, splits, model)
    }

    fn with_model(config: TrainConfig, splits: &DatasetSplits, model: RpfModel) -> Result<Trainer> {
        let input_side = model.config.backbone.region.input_side;
        let train = LoadedSplit::load(&splits.train, input_side)?;
        let val = LoadedSplit::load(&splits.val, input_side)?;
        let num_attributes = splits.train.vocabulary.num_attributes();
        let per_attr = (config.triplet_count / num_attributes).max(1);
        let mut triplets_by_attr = Vec::with_capacity(num_attributes);
        for attr in 0..num_attributes {
            triplets_by_attr.push(build_triplets(
                &train.manifest,
                attr,
                per_attr,
                derive_seed(config.seed, 100 + attr as u64),
            )?);
        }
        let velocity = model.zeros_like();
        let mut trainer = Trainer {
            config,
            model,
            velocity,
            train,
            val,
            triplets_by_attr,
            epoch_batches: Vec::new(),
            batches_per_epoch: 0,
            stage: 1,
            epoch_in_stage: 0,
            step_in_epoch: 0,
            global_step: 0,
            best_val_map: None,
            best_params: None,
        };
        trainer.rebuild_epoch_batches();
        if trainer.batches_per_epoch == 0 {
            return Err(Error::Data(
                "no trainable batches (batch_size exceeds triplets per attribute?)".into(),
            ));
        }
        Ok(trainer)
    }

    pub fn model(&self) -> &RpfModel {
        &self.model
    }

    pub fn best_model(&self) -> &RpfModel {
        self.best_params.as_ref().unwrap_or(&self.model)
    }

    pub fn stage(&self) -> u32 {
        self.stage
    }

    fn epochs_for(&self, stage: u32) -> usize {
        match stage {
            1 => self.config.epochs_stage1,
            _ => self.config.epochs_stage2,
        }
    }

    /// Deterministic batch schedule for the current (stage, epoch): shuffle
    /// each attribute's triplets, chunk them, drop chunks of one, shuffle the
    /// chunk order.
    fn rebuild_epoch_batches(&mut self) {
        let mut batches = Vec::new();
        for (attr, triplets) in self.triplets_by_attr.iter().enumerate() {
            let mut order: Vec<usize> = (0..triplets.len()).collect();
            let mut rng = rng_from_seed(derive_seed(
                self.config.seed,
                7_000 + self.stage as u64 * 1_000 + self.epoch_in_stage as u64 * 31 + attr as u64,
            ));
            shuffle(&mut rng, &mut order);
            for chunk in order.chunks(self.config.batch_size) {
                if chunk.len() < 2 {
                    continue;
                }
                batches.push(Batch {
                    attribute: attr,
                    triplets: chunk.iter().map(|&i| triplets[i]).collect(),
                });
            }
        }
        let mut order: Vec<usize> = (0..batches.len()).collect();
        let mut rng = rng_from_seed(derive_seed(
            self.config.seed,
            9_000 + self.stage as u64 * 1_000 + self.epoch_in_stage as u64,
        ));
        shuffle(&mut rng, &mut order);
        let mut shuffled = Vec::with_capacity(batches.len());
        for &i in &order {
            shuffled.push(Batch {
                attribute: batches[i].attribute,
                triplets: batches[i].triplets.clone(),
            });
        }
        self.batches_per_epoch = shuffled.len();
        self.epoch_batches = shuffled;
    }

    fn learning_rate(&self) -> f64 {
        let base = match self.stage {
            1 => self.config.lr_stage1,
            _ => self.config.lr_stage2,
        };
        let total = (self.epochs_for(self.stage) * self.batches_per_epoch).max(1);
        let done = self.epoch_in_stage * self.batches_per_epoch + self.step_in_epoch;
        let progress = done as f64 / total as f64;
        base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    /// Run one optimization step. Returns `None` once both stages finished.
    pub fn advance(&mut self) -> Result<Option<StepLog>> {
        if self.stage > 2 {
            return Ok(None);
        }
        if self.epochs_for(self.stage) == 0 {
            self.finish_stage()?;
            return self.advance();
        }
        let lr = self.learning_rate();
        let batch = &self.epoch_batches[self.step_in_epoch];
        let (log, grads) = self.batch_gradients(batch)?;
        if !log.total.is_finite() {
            return Err(Error::Numeric(format!(
                "total loss diverged at step {} (stage {})",
                log.step, log.stage
            )));
        }
        self.apply_sgd(&grads, lr);
        self.step_in_epoch += 1;
        self.global_step += 1;
        if self.step_in_epoch == self.batches_per_epoch {
            self.step_in_epoch = 0;
            self.run_validation()?;
            self.epoch_in_stage += 1;
            if self.epoch_in_stage == self.epochs_for(self.stage) {
                self.finish_stage()?;
            } else {
                self.rebuild_epoch_batches();
            }
        }
        Ok(Some(log))
    }

    fn finish_stage(&mut self) -> Result<()> {
        if self.stage == 1 {
            // stage 2 starts from the best stage-1 parameters and fresh
            // momentum; best tracking restarts for the fused objective
            if let Some(best) = self.best_params.take() {
                self.model = best;
            }
            self.velocity = self.model.zeros_like();
            self.best_val_map = None;
        }
        self.stage += 1;
        self.epoch_in_stage = 0;
        self.step_in_epoch = 0;
        if self.stage <= 2 {
            self.rebuild_epoch_batches();
        }
        Ok(())
    }

    /// Gradient of the batch objective, accumulated deterministically.
    fn batch_gradients(&self, batch: &Batch) -> Result<(StepLog, RpfModel)> {
        let stage2 = self.stage == 2;
        let cfg = &self.config.losses;

        // unique image slots in first-appearance order
        let mut slot_of: BTreeMap<usize, usize> = BTreeMap::new();
        let mut slot_samples: Vec<usize> = Vec::new();
        let slot_for = |sample: usize, slots: &mut Vec<usize>, map: &mut BTreeMap<usize, usize>| {
            *map.entry(sample).or_insert_with(|| {
                slots.push(sample);
                slots.len() - 1
            })
        };
        let mut anchor_slots = Vec::with_capacity(batch.triplets.len());
        let mut positive_slots = Vec::with_capacity(batch.triplets.len());
        let mut negative_slots = Vec::with_capacity(batch.triplets.len());
        for t in &batch.triplets {
            anchor_slots.push(slot_for(t.anchor, &mut slot_samples, &mut slot_of));
            positive_slots.push(slot_for(t.positive, &mut slot_samples, &mut slot_of));
            negative_slots.push(slot_for(t.negative, &mut slot_samples, &mut slot_of));
        }

        // forward every slot
        let forwards: Vec<Result<TrainForward>> = exec::map_collect(&slot_samples, |&sample| {
            self.model
                .forward_train(&self.train.images[sample], batch.attribute, stage2)
        });
        let forwards = forwards.into_iter().collect::<Result<Vec<_>>>()?;

        let slots = slot_samples.len();
        let dim = self.model.config.embed_dim;
        let mut region_fg = Array2::zeros((slots, dim));
        let mut region_bg = Array2::zeros((slots, dim));
        let mut patch_fg = Array2::zeros((slots, dim));
        for (i, f) in forwards.iter().enumerate() {
            region_fg.row_mut(i).assign(&f.region.foreground);
            region_bg.row_mut(i).assign(&f.region.background);
            if let Some(p) = &f.patch_fg {
                patch_fg.row_mut(i).assign(p);
            }
        }

        let gather = |m: &Array2<f64>, idx: &[usize]| -> Array2<f64> {
            let mut out = Array2::zeros((idx.len(), dim));
            for (row, &slot) in idx.iter().enumerate() {
                out.row_mut(row).assign(&m.row(slot));
            }
            out
        };
        let scatter_rows = |target: &mut Array2<f64>, idx: &[usize], grads: &Array2<f64>| {
            for (row, &slot) in idx.iter().enumerate() {
                let mut t = target.row_mut(slot);
                t += &grads.row(row);
            }
        };

        // region triplet loss
        let (loss_r, d_ra, d_rp, d_rn) = triplet_loss(
            &gather(&region_fg, &anchor_slots),
            &gather(&region_fg, &positive_slots),
            &gather(&region_fg, &negative_slots),
            cfg.margin,
        );
        let mut d_region_fg = Array2::zeros((slots, dim));
        scatter_rows(&mut d_region_fg, &anchor_slots, &d_ra);
        scatter_rows(&mut d_region_fg, &positive_slots, &d_rp);
        scatter_rows(&mut d_region_fg, &negative_slots, &d_rn);

        let mut d_region_bg = Array2::zeros((slots, dim));
        let mut d_patch_fg = Array2::zeros((slots, dim));
        let mut loss_p = 0.0;
        let mut loss_e = 0.0;

        if stage2 {
            // patch triplet loss
            let (lp, d_pa, d_pp, d_pn) = triplet_loss(
                &gather(&patch_fg, &anchor_slots),
                &gather(&patch_fg, &positive_slots),
                &gather(&patch_fg, &negative_slots),
                cfg.margin,
            );
            loss_p = lp;
            let beta = cfg.beta;
            let scale = |m: Array2<f64>| m.mapv(|v| v * beta);
            scatter_rows(&mut d_patch_fg, &anchor_slots, &scale(d_pa));
            scatter_rows(&mut d_patch_fg, &positive_slots, &scale(d_pp));
            scatter_rows(&mut d_patch_fg, &negative_slots, &scale(d_pn));

            // enhanced InfoNCE over all slots of the batch
            let values: Vec<usize> = slot_samples
                .iter()
                .map(|&s| self.train.manifest.samples[s].labels[&batch.attribute])
                .collect();
            let batch_slots = BatchSlots {
                values,
                anchors: anchor_slots.clone(),
                paired_positive: positive_slots.iter().map(|&s| Some(s)).collect(),
            };
            let sets = minibatch_sets(&batch_slots);
            let embeddings = BatchEmbeddings {
                region_fg: region_fg.clone(),
                region_bg: region_bg.clone(),
                patch_fg: patch_fg.clone(),
            };
            let (le, e_grads) = e_info_nce(&embeddings, &sets, &anchor_slots, cfg.tau, cfg.mu)?;
            loss_e = le;
            d_region_fg.scaled_add(cfg.gamma, &e_grads.region_fg);
            d_region_bg.scaled_add(cfg.gamma, &e_grads.region_bg);
            d_patch_fg.scaled_add(cfg.gamma, &e_grads.patch_fg);
        }

        let total = total_loss(loss_r, loss_p, loss_e, cfg.beta, cfg.gamma);

        // per-slot backward, chunked for bounded memory, ordered reduction
        let chunk_size = 8;
        let chunk_indices: Vec<Vec<usize>> = (0..slots)
            .collect::<Vec<_>>()
            .chunks(chunk_size)
            .map(|c| c.to_vec())
            .collect();
        let partials: Vec<RpfModel> = exec::map_collect(&chunk_indices, |chunk| {
            let mut grads = self.model.zeros_like();
            for &slot in chunk {
                let dp_row;
                let dp = if stage2 {
                    dp_row = d_patch_fg.row(slot).to_owned();
                    Some(&dp_row)
                } else {
                    None
                };
                self.model.backward_train(
                    &forwards[slot],
                    batch.attribute,
                    &d_region_fg.row(slot).to_owned(),
                    &d_region_bg.row(slot).to_owned(),
                    dp,
                    stage2,
                    &mut grads,
                );
            }
            grads
        });
        let mut grads = self.model.zeros_like();
        for p in &partials {
            grads.add_params(p);
        }

        Ok((
            StepLog {
                step: self.global_step,
                stage: self.stage,
                loss_r,
                loss_p,
                loss_e,
                total,
            },
            grads,
        ))
    }

    fn lr_multiplier(&self, name: &str) -> f64 {
        if self.stage == 1 {
            // patch side has no gradients in stage 1; skip its state entirely
            if name.starts_with("patch") {
                0.0
            } else {
                1.0
            }
        } else {
            if name.starts_with("region_encoder.")
                || name == "attr_table"
                || name.starts_with("region.joint.")
                || name.starts_with("region.projector")
            {
                0.0
            } else if name.starts_with("region.head.") {
                self.config.head_lr_mult_stage2
            } else {
                1.0
            }
        }
    }

    fn apply_sgd(&mut self, grads: &RpfModel, lr: f64) {
        let momentum = self.config.momentum;
        let mults: Vec<f64> = self
            .model
            .named_param_views()
            .iter()
            .map(|(name, _)| self.lr_multiplier(name))
            .collect();
        let grad_views = grads.named_param_views();
        let vel_views = self.velocity.named_param_views_mut();
        let param_views = self.model.named_param_views_mut();
        for (((mult, (_, g)), (_, mut v)), (_, mut p)) in mults
            .into_iter()
            .zip(grad_views)
            .zip(vel_views)
            .zip(param_views)
        {
            if mult == 0.0 {
                continue;
            }
            v.zip_mut_with(&g, |v, &g| *v = momentum * *v + g);
            let step = lr * mult;
            p.zip_mut_with(&v.view(), |p, &v| *p -= step * v);
        }
    }

    fn run_validation(&mut self) -> Result<()> {
        let region_only = self.stage == 1;
        let lambda = if region_only { 1.0 } else { self.config.lambda };
        let index = build_gallery_index(&self.model, &self.val, region_only)?;
        let report = evaluate_map(&index, lambda)?;
        log::info!(
            "stage {} epoch {}: val MAP {:.4}",
            self.stage,
            self.epoch_in_stage,
            report.overall
        );
        if self.best_val_map.is_none_or(|best| report.overall > best) {
            self.best_val_map = Some(report.overall);
            self.best_params = Some(self.model.clone());
        }
        Ok(())
    }

    /// Run to completion, reporting each step to `on_step`.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepLog)) -> Result<()> {
        while let Some(log) = self.advance()? {
            on_step(&log);
        }
        Ok(())
    }

    /// Full state snapshot: current and best parameters, momentum, position.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut groups = Vec::new();
        for (name, view) in self.model.named_param_views() {
            groups.push((format!("param.{name}"), view.to_owned()));
        }
        for (name, view) in self.velocity.named_param_views() {
            groups.push((format!("momentum.{name}"), view.to_owned()));
        }
        if let Some(best) = &self.best_params {
            for (name, view) in best.named_param_views() {
                groups.push((format!("best.{name}"), view.to_owned()));
            }
        }
        Checkpoint {
            meta: CheckpointMeta {
                format_version: FORMAT_VERSION,
                train_config: self.config,
                model_config: self.model.config,
                stage: self.stage,
                epoch_in_stage: self.epoch_in_stage,
                step_in_epoch: self.step_in_epoch,
                global_step: self.global_step,
                best_val_map: self.best_val_map,
                rng: RngState::capture(&rng_from_seed(self.config.seed)),
            },
            groups,
        }
    }

    /// Restore a trainer mid-run; the deterministic schedule replays from the
    /// recorded position.
    pub fn from_checkpoint(ckpt: &Checkpoint, splits: &DatasetSplits) -> Result<Trainer> {
        let config = ckpt.meta.train_config;
        let num_attributes = splits.train.vocabulary.num_attributes();
        if ckpt.meta.model_config.num_attributes != num_attributes {
            return Err(Error::Data(format!(
                "checkpoint was trained with {} attributes, dataset has {num_attributes}",
                ckpt.meta.model_config.num_attributes
            )));
        }
        let mut init_rng = rng_from_seed(derive_seed(config.seed, 1));
        let mut model = RpfModel::new(&mut init_rng, ckpt.meta.model_config)?;
        load_params_into(&mut model, ckpt, "param")?;
        let mut trainer = Self::with_model(config, splits, model)?;
        load_params_into(&mut trainer.velocity, ckpt, "momentum")?;
        if ckpt.has_prefix("best") {
            let mut best = trainer.model.clone();
            load_params_into(&mut best, ckpt, "best")?;
            trainer.best_params = Some(best);
        }
        trainer.stage = ckpt.meta.stage;
        trainer.epoch_in_stage = ckpt.meta.epoch_in_stage;
        trainer.step_in_epoch = ckpt.meta.step_in_epoch;
        trainer.global_step = ckpt.meta.global_step;
        trainer.best_val_map = ckpt.meta.best_val_map;
        if trainer.stage <= 2 {
            trainer.rebuild_epoch_batches();
        }
        Ok(trainer)
    }
}

/// Copy checkpoint groups under `prefix.` into the model's parameters.
pub fn load_params_into(model: &mut RpfModel, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
    let stored: BTreeMap<String, &ndarray::ArrayD<f64>> = ckpt
        .groups_with_prefix(prefix)
        .into_iter()
        .map(|(n, a)| (n.to_string(), a))
        .collect();
    for (name, mut view) in model.named_param_views_mut() {
        let source = stored.get(&name).ok_or_else(|| {
            Error::Data(format!("checkpoint misses parameter group {prefix}.{name}"))
        })?;
        if source.shape() != view.shape() {
            return Err(Error::Data(format!(
                "parameter group {name}: shape {:?} != expected {:?}",
                source.shape(),
                view.shape()
            )));
        }
        view.assign(source);
    }
    Ok(())
}

/// Build the inference model from a checkpoint: best-by-validation
/// parameters when present, current parameters otherwise.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<RpfModel> {
    let mut init_rng = rng_from_seed(derive_seed(ckpt.meta.train_config.seed, 1));
    let mut model = RpfModel::new(&mut init_rng, ckpt.meta.model_config)?;
    let prefix = if ckpt.has_prefix("best") { "best" } else { "param" };
    load_params_into(&mut model, ckpt, prefix)?;
    Ok(model)
}

/// Embed every labeled sample of a split, per attribute. With `region_only`
/// the patch matrix mirrors the region matrix (stage-1 checkpoints evaluate
/// with lambda forced to 1).
pub fn build_gallery_index(
    model: &RpfModel,
    split: &LoadedSplit,
    region_only: bool,
) -> Result<GalleryIndex> {
    let mut index = GalleryIndex::default();
    for attr in 0..split.manifest.vocabulary.num_attributes() {
        let sample_ids = split.manifest.labeled_for(attr);
        if sample_ids.is_empty() {
            continue;
        }
        let rows: Vec<Result<(Array1<f64>, Array1<f64>)>> =
            exec::map_collect(&sample_ids, |&sample| {
                if region_only {
                    let out = model.region_forward(&split.images[sample], attr)?;
                    Ok((out.foreground.clone(), out.foreground))
                } else {
                    let (triple, _) = model.embed(&split.images[sample], attr)?;
                    Ok((triple.region_fg, triple.patch_fg))
                }
            });
        let dim = model.config.embed_dim;
        let mut region = Array2::zeros((sample_ids.len(), dim));
        let mut patch = Array2::zeros((sample_ids.len(), dim));
        for (i, row) in rows.into_iter().enumerate() {
            let (r, p) = row?;
            region.row_mut(i).assign(&r);
            patch.row_mut(i).assign(&p);
        }
        let values = sample_ids
            .iter()
            .map(|&s| split.manifest.samples[s].labels[&attr])
            .collect();
        index.per_attribute.insert(
            attr,
            AttributeGallery {
                region,
                patch,
                sample_ids,
                values,
            },
        );
    }
    Ok(index)
}

/// Evaluate a checkpoint on a manifest: leave-one-out MAP over the split.
/// Stage-1 checkpoints evaluate region-only with lambda forced to 1.
pub fn evaluate_checkpoint(
    ckpt: &Checkpoint,
    manifest: &DatasetManifest,
    lambda: f64,
) -> Result<RetrievalReport> {
    let model = model_from_checkpoint(ckpt)?;
    let region_only = ckpt.meta.stage < 2;
    let lambda = if region_only { 1.0 } else { lambda };
    let split = LoadedSplit::load(manifest, model.config.backbone.region.input_side)?;
    let index = build_gallery_index(&model, &split, region_only)?;
    evaluate_map(&index, lambda)
}

/// Rank a gallery manifest for a query image over named attributes; fused
/// per-attribute similarities are summed.
pub fn retrieve(
    model: &RpfModel,
    query_image: &Array3<f64>,
    attribute_names: &[String],
    gallery: &DatasetManifest,
    lambda: f64,
    k: usize,
) -> Result<Vec<(usize, f64)>> {
    let mut attributes = Vec::new();
    for name in attribute_names {
        let attr = gallery.vocabulary.attribute_by_name(name).ok_or_else(|| {
            Error::Data(format!(
                "unknown attribute '{name}'; valid names: {}",
                gallery.vocabulary.attribute_names().join(", ")
            ))
        })?;
        attributes.push(attr.id);
    }
    let split = LoadedSplit::load(gallery, model.config.backbone.region.input_side)?;
    let index = build_gallery_index(model, &split, false)?;
    let mut query = BTreeMap::new();
    for &attr in &attributes {
        let (triple, _) = model.embed(query_image, attr)?;
        query.insert(
            attr,
            QueryEmbedding {
                region: triple.region_fg,
                patch: triple.patch_fg,
            },
        );
    }
    crate::eval::rank_gallery(&query, &index, &attributes, lambda, k)
}

// ---------------------------------------------------------------------------
// Attribute-agnostic triplet baseline.
// ---------------------------------------------------------------------------

/// Train the mean-pooled, unconditioned baseline on the same triplets (all
/// attributes mixed) and return it with its test-split MAP.
pub fn train_baseline(
    config: &TrainConfig,
    splits: &DatasetSplits,
    epochs: usize,
) -> Result<BaselineModel> {
    config.validate()?;
    let num_attributes = splits.train.vocabulary.num_attributes();
    let model_config = config.model_config(num_attributes);
    let mut init_rng = rng_from_seed(derive_seed(config.seed, 2));
    let mut model = BaselineModel::new(&mut init_rng, &model_config);
    let mut velocity = model.zeros_like();
    let train = LoadedSplit::load(&splits.train, model_config.backbone.region.input_side)?;

    let per_attr = (config.triplet_count / num_attributes).max(1);
    let mut all_triplets = Vec::new();
    for attr in 0..num_attributes {
        all_triplets.extend(build_triplets(
            &train.manifest,
            attr,
            per_attr,
            derive_seed(config.seed, 100 + attr as u64),
        )?);
    }

    let total_steps = (epochs * all_triplets.len().div_ceil(config.batch_size)).max(1);
    let mut step = 0usize;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..all_triplets.len()).collect();
        let mut rng = rng_from_seed(derive_seed(config.seed, 5_000 + epoch as u64));
        shuffle(&mut rng, &mut order);
        for chunk in order.chunks(config.batch_size) {
            let triplets: Vec<Triplet> = chunk.iter().map(|&i| all_triplets[i]).collect();
            let lr = config.lr_stage1
                * 0.5
                * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos());
            baseline_step(&mut model, &mut velocity, &train, &triplets, config, lr)?;
            step += 1;
        }
    }
    Ok(model)
}

fn baseline_step(
    model: &mut BaselineModel,
    velocity: &mut BaselineModel,
    train: &LoadedSplit,
    triplets: &[Triplet],
    config: &TrainConfig,
    lr: f64,
) -> Result<()> {
    let mut slot_of: BTreeMap<usize, usize> = BTreeMap::new();
    let mut slot_samples: Vec<usize> = Vec::new();
    let slot_for = |sample: usize, slots: &mut Vec<usize>, map: &mut BTreeMap<usize, usize>| {
        *map.entry(sample).or_insert_with(|| {
            slots.push(sample);
            slots.len() - 1
        })
    };
    let mut anchors = Vec::new();
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for t in triplets {
        anchors.push(slot_for(t.anchor, &mut slot_samples, &mut slot_of));
        positives.push(slot_for(t.positive, &mut slot_samples, &mut slot_of));
        negatives.push(slot_for(t.negative, &mut slot_samples, &mut slot_of));
    }
    let forwards: Vec<Result<(Array1<f64>, crate::model::BaselineCache)>> =
        exec::map_collect(&slot_samples, |&sample| model.forward(&train.images[sample]));
    let forwards = forwards.into_iter().collect::<Result<Vec<_>>>()?;
    let dim = model.embed_dim;
    let mut emb = Array2::zeros((slot_samples.len(), dim));
    for (i, (e, _)) in forwards.iter().enumerate() {
        emb.row_mut(i).assign(e);
    }
    let gather = |idx: &[usize]| -> Array2<f64> {
        let mut out = Array2::zeros((idx.len(), dim));
        for (row, &slot) in idx.iter().enumerate() {
            out.row_mut(row).assign(&emb.row(slot));
        }
        out
    };
    let (loss, d_a, d_p, d_n) = triplet_loss(
        &gather(&anchors),
        &gather(&positives),
        &gather(&negatives),
        config.losses.margin,
    );
    if !loss.is_finite() {
        return Err(Error::Numeric("baseline loss diverged".into()));
    }
    let mut d_emb = Array2::zeros((slot_samples.len(), dim));
    for (list, grads) in [(&anchors, &d_a), (&positives, &d_p), (&negatives, &d_n)] {
        for (row, &slot) in list.iter().enumerate() {
            let mut t = d_emb.row_mut(slot);
            t += &grads.row(row);
        }
    }
    let chunk_indices: Vec<Vec<usize>> = (0..slot_samples.len())
        .collect::<Vec<_>>()
        .chunks(8)
        .map(|c| c.to_vec())
        .collect();
    let partials: Vec<BaselineModel> = exec::map_collect(&chunk_indices, |chunk| {
        let mut grads = model.zeros_like();
        for &slot in chunk {
            model.backward(&forwards[slot].1, &d_emb.row(slot).to_owned(), &mut grads);
        }
        grads
    });
    let mut grads = model.zeros_like();
    for p in &partials {
        grads.add_params(p);
    }
    let momentum = config.momentum;
    let grad_views = grads.named_param_views();
    let vel_views = velocity.named_param_views_mut();
    let param_views = model.named_param_views_mut();
    for (((_, g), (_, mut v)), (_, mut p)) in
        grad_views.into_iter().zip(vel_views).zip(param_views)
    {
        v.zip_mut_with(&g, |v, &g| *v = momentum * *v + g);
        p.zip_mut_with(&v.view(), |p, &v| *p -= lr * v);
    }
    Ok(())
}

/// Gallery index for the baseline: one embedding serves both similarity
/// slots, so the fusion weight cancels out.
pub fn build_baseline_index(model: &BaselineModel, split: &LoadedSplit) -> Result<GalleryIndex> {
    let embeddings: Vec<Result<Array1<f64>>> = exec::map_range(split.images.len(), |i| {
        Ok(model.forward(&split.images[i])?.0)
    });
    let embeddings = embeddings.into_iter().collect::<Result<Vec<_>>>()?;
    let dim = model.embed_dim;
    let mut index = GalleryIndex::default();
    for attr in 0..split.manifest.vocabulary.num_attributes() {
        let sample_ids = split.manifest.labeled_for(attr);
        if sample_ids.is_empty() {
            continue;
        }
        let mut matrix = Array2::zeros((sample_ids.len(), dim));
        for (row, &s) in sample_ids.iter().enumerate() {
            matrix.row_mut(row).assign(&embeddings[s]);
        }
        let values = sample_ids
            .iter()
            .map(|&s| split.manifest.samples[s].labels[&attr])
            .collect();
        index.per_attribute.insert(
            attr,
            AttributeGallery {
                region: matrix.clone(),
                patch: matrix,
                sample_ids,
                values,
            },
        );
    }
    Ok(index)
}
