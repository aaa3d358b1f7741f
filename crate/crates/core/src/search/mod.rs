//! The three-step search: dense pretraining, joint pruning and architecture
//! search, then fine-tuning of the sparse network. Also the post-hoc pruning
//! baseline that searches densely and prunes the derived network afterwards.

mod train;

pub use train::{batches_per_epoch, epoch_batches, evaluate, sgd_update, StepSite, UpdateRule};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{Alternation, AlphaInit, FinetuneMode, FinetuneTarget, SearchConfig};
use crate::data::DataSplit;
use crate::error::{DassError, Result};
use crate::genotype::{derive, instantiate, DerivedNet, Genotype};
use crate::metrics::{compression_rate, count_params, feature_map_similarity, nid, CurvePoint, MetricsReport, PhaseCurve};
use crate::rng::{RngState, RunRng};
use crate::space::{Network, Supernet};
use crate::sparse::ForwardMode;
use crate::tensor::{cosine_lr, KindSet, ParamKind, ParamStore, Sgd, Tensor};
use train::{load_batch, mean};

pub const CKPT_PRETRAIN: &str = "ckpt_pretrain.ckpt";
pub const CKPT_PRUNE: &str = "ckpt_prune.ckpt";
pub const CKPT_FINETUNE: &str = "ckpt_finetune.ckpt";

/// Samples in the probe batch used for feature-map comparisons.
pub const PROBE_SIZE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Init,
    Pretrained,
    Pruned,
    Finetuned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Dass,
    DartsSparse,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Dass => "dass",
            Method::DartsSparse => "darts_sparse",
        }
    }
}

/// Bookkeeping that is not a tensor.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    /// Updates whose gradient buffers were audited, per phase.
    pub audited_pretrain: usize,
    pub audited_prune: usize,
    pub audited_finetune: usize,
    /// Largest absolute change of any architecture weight during each search phase.
    pub alpha_drift_pretrain: f64,
    pub alpha_drift_prune: f64,
    /// Full validation loss under the final mask with the architecture
    /// tables from the start and from the end of pruning.
    pub val_loss_entry_alpha: Option<f64>,
    pub val_loss_final_alpha: Option<f64>,
    /// Test accuracy of the final network before fine-tuning.
    pub accuracy_before_finetune: Option<f64>,
}

/// Everything a run carries between phases.
#[derive(Clone, Debug)]
pub struct RunState {
    pub config: SearchConfig,
    pub method: Method,
    pub phase: Phase,
    pub rng: RunRng,
    pub supernet: Supernet,
    pub derived: Option<DerivedNet>,
    /// Genotype read off the dense search.
    pub genotype_pretrain: Option<Genotype>,
    /// Genotype of the final network.
    pub genotype: Option<Genotype>,
    /// Parameters of the dense network derived after pretraining.
    pub dense_params: Option<usize>,
    pub curves: Vec<PhaseCurve>,
    pub stats: RunStats,
    /// Momentum buffers of the last finished phase, `(optimizer, parameter name)`.
    pub velocities: Vec<(String, String, Tensor)>,
    pub report: Option<MetricsReport>,
}

/// Checkpoint metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub phase: Phase,
    pub method: Method,
    /// Epochs completed across all finished phases.
    pub epoch: usize,
    pub rng: RngState,
    pub config_hash: String,
    pub config: SearchConfig,
    pub curves: Vec<PhaseCurve>,
    pub genotype_pretrain: Option<Genotype>,
    pub genotype: Option<Genotype>,
    pub dense_params: Option<usize>,
    pub stats: RunStats,
    /// Retained count per sparse layer, keyed `supernet/<layer>` or `derived/<layer>`.
    pub layer_k: BTreeMap<String, usize>,
    pub report: Option<MetricsReport>,
}

/// A callback run after every fine-tuning update, before the mutation guard.
pub type FinetuneHook<'a> = &'a mut dyn FnMut(&mut ParamStore);

/// Knobs of a pipeline invocation that are not part of the config.
#[derive(Default)]
pub struct RunOptions<'a> {
    /// Directory for checkpoints and reports.
    pub out_dir: Option<PathBuf>,
    /// Return once this phase is reached.
    pub stop_after: Option<Phase>,
    pub finetune_hook: Option<FinetuneHook<'a>>,
}

fn theta_kinds() -> KindSet {
    KindSet::theta()
}

fn score_kinds() -> KindSet {
    KindSet::of(&[ParamKind::Score])
}

fn alpha_kinds() -> KindSet {
    KindSet::of(&[ParamKind::Alpha])
}

fn frozen_in_finetune() -> KindSet {
    KindSet::of(&[ParamKind::Alpha, ParamKind::Score, ParamKind::Mask])
}

fn f32_of(v: f64) -> f32 {
    v as f32
}

fn alpha_values(net: &Supernet) -> Vec<f32> {
    [net.alpha_normal(), net.alpha_reduce()]
        .iter()
        .flat_map(|t| t.data().to_vec())
        .collect()
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs() as f64))
}

fn layer_k_map<'a>(prefix: &str, net: &'a dyn Network) -> impl Iterator<Item = (String, usize)> + 'a {
    let prefix = prefix.to_string();
    net.sparse_params()
        .into_iter()
        .map(move |p| (format!("{prefix}/{}", p.name), p.k))
}

fn restore_k(prefix: &str, net: &mut dyn Network, map: &BTreeMap<String, usize>) -> Result<()> {
    for p in net.sparse_params_mut() {
        let key = format!("{prefix}/{}", p.name);
        p.k = *map
            .get(&key)
            .ok_or_else(|| DassError::Checkpoint(format!("retained count for {key} missing")))?;
    }
    Ok(())
}

fn restore_store(store: &mut ParamStore, ckpt: &Checkpoint<RunMeta>, prefix: &str) -> Result<()> {
    let mut found = 0;
    for (name, t) in ckpt.with_prefix(prefix) {
        let id = store
            .id(name)
            .ok_or_else(|| DassError::Checkpoint(format!("checkpoint tensor {prefix}{name} does not exist in the network")))?;
        if store.value(id).shape() != t.shape() {
            return Err(DassError::Checkpoint(format!(
                "tensor {prefix}{name}: shape {:?} in checkpoint, {:?} in network",
                t.shape(),
                store.value(id).shape()
            )));
        }
        *store.value_mut(id) = t.clone();
        found += 1;
    }
    if found != store.len() {
        return Err(DassError::Checkpoint(format!(
            "checkpoint holds {found} of the network's {} tensors under {prefix}",
            store.len()
        )));
    }
    Ok(())
}

impl RunState {
    pub fn new(config: &SearchConfig, method: Method) -> Result<Self> {
        config.validate()?;
        let mut rng = RunRng::new(config.seed);
        let supernet = Supernet::new(&config.net(), &mut rng)?;
        Ok(Self {
            config: config.clone(),
            method,
            phase: Phase::Init,
            rng,
            supernet,
            derived: None,
            genotype_pretrain: None,
            genotype: None,
            dense_params: None,
            curves: Vec::new(),
            stats: RunStats::default(),
            velocities: Vec::new(),
            report: None,
        })
    }

    /// The network that ends up trained and reported.
    pub fn final_network(&mut self) -> &mut dyn Network {
        match self.derived.as_mut() {
            Some(d) => d,
            None => &mut self.supernet,
        }
    }

    fn epochs_done(&self) -> usize {
        self.curves.iter().map(|c| c.points.len()).sum()
    }

    fn keep_velocities(&mut self, group: &str, opt: &Sgd, store: &ParamStore) {
        self.velocities.retain(|(g, _, _)| g != group);
        for (id, v) in opt.velocities() {
            self.velocities
                .push((group.to_string(), store.get(id).name.clone(), v.clone()));
        }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint<RunMeta>> {
        let mut layer_k: BTreeMap<String, usize> = layer_k_map("supernet", &self.supernet).collect();
        let mut tensors: Vec<(String, Tensor)> = self
            .supernet
            .store
            .iter()
            .map(|(_, p)| (format!("supernet/{}", p.name), p.value.clone()))
            .collect();
        if let Some(d) = &self.derived {
            layer_k.extend(layer_k_map("derived", d));
            tensors.extend(d.store.iter().map(|(_, p)| (format!("derived/{}", p.name), p.value.clone())));
        }
        for (group, name, v) in &self.velocities {
            tensors.push((format!("velocity/{group}/{name}"), v.clone()));
        }
        Ok(Checkpoint {
            meta: RunMeta {
                phase: self.phase,
                method: self.method,
                epoch: self.epochs_done(),
                rng: self.rng.state(),
                config_hash: self.config.hash()?,
                config: self.config.clone(),
                curves: self.curves.clone(),
                genotype_pretrain: self.genotype_pretrain.clone(),
                genotype: self.genotype.clone(),
                dense_params: self.dense_params,
                stats: self.stats.clone(),
                layer_k,
                report: self.report.clone(),
            },
            tensors,
        })
    }

    /// Rebuilds a run from a checkpoint. With `expected`, the checkpoint must
    /// have been written under the same resolved config.
    pub fn from_checkpoint(ckpt: &Checkpoint<RunMeta>, expected: Option<&SearchConfig>) -> Result<Self> {
        let meta = &ckpt.meta;
        let recorded = meta.config.hash()?;
        if recorded != meta.config_hash {
            return Err(DassError::ConfigHashMismatch {
                expected: recorded,
                found: meta.config_hash.clone(),
            });
        }
        if let Some(cfg) = expected {
            let h = cfg.hash()?;
            if h != meta.config_hash {
                return Err(DassError::ConfigHashMismatch {
                    expected: h,
                    found: meta.config_hash.clone(),
                });
            }
        }
        let cfg = &meta.config;
        let mut scratch = RunRng::new(0);
        let mut supernet = Supernet::new(&cfg.net(), &mut scratch)?;
        restore_store(&mut supernet.store, ckpt, "supernet/")?;
        restore_k("supernet", &mut supernet, &meta.layer_k)?;
        let derived = if ckpt.with_prefix("derived/").next().is_some() {
            let g = meta
                .genotype
                .as_ref()
                .ok_or_else(|| DassError::Checkpoint("derived tensors without a genotype".into()))?;
            let mut d = DerivedNet::build(g, &cfg.net(), &mut scratch)?;
            restore_store(&mut d.store, ckpt, "derived/")?;
            restore_k("derived", &mut d, &meta.layer_k)?;
            Some(d)
        } else {
            None
        };
        let velocities = ckpt
            .with_prefix("velocity/")
            .map(|(rest, t)| {
                let (g, n) = rest.split_once('/').unwrap_or((rest, ""));
                (g.to_string(), n.to_string(), t.clone())
            })
            .collect();
        Ok(Self {
            config: cfg.clone(),
            method: meta.method,
            phase: meta.phase,
            rng: RunRng::from_state(&meta.rng)
                .ok_or_else(|| DassError::Checkpoint(format!("bad rng position {:?}", meta.rng.word_pos)))?,
            supernet,
            derived,
            genotype_pretrain: meta.genotype_pretrain.clone(),
            genotype: meta.genotype.clone(),
            dense_params: meta.dense_params,
            curves: meta.curves.clone(),
            stats: meta.stats.clone(),
            velocities,
            report: meta.report.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.to_checkpoint()?, path)
    }

    pub fn load(path: &Path, expected: Option<&SearchConfig>) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path)?, expected)
    }
}

/// Step 1: alternate a weight update on a train batch and an architecture
/// update on a validation batch, both on the dense supernet.
pub fn step1_pretrain(state: &mut RunState, data: &DataSplit) -> Result<()> {
    if state.phase != Phase::Init {
        return Err(DassError::Invalid(format!("pretraining needs a fresh run, found phase {:?}", state.phase)));
    }
    let cfg = state.config.clone();
    let alpha_start = alpha_values(&state.supernet);
    let iters = batches_per_epoch(data.train.len(), cfg.batch_size, cfg.max_batches_per_epoch);
    let total = (cfg.epochs.pretrain * iters).max(1);
    let store = &state.supernet.store;
    let mut theta_opt = Sgd::new(
        store,
        store.ids_of(theta_kinds()),
        f32_of(cfg.lrs.theta),
        f32_of(cfg.momentum),
        f32_of(cfg.weight_decay),
    );
    let mut alpha_opt = Sgd::new(
        store,
        state.supernet.alpha_ids().to_vec(),
        f32_of(cfg.lrs.alpha),
        f32_of(cfg.alpha_momentum),
        f32_of(cfg.alpha_weight_decay),
    );
    let theta_rule = UpdateRule {
        mode: ForwardMode::Dense,
        trainable: theta_kinds(),
        forbidden: KindSet::of(&[ParamKind::Score, ParamKind::Alpha, ParamKind::Mask]),
    };
    let alpha_rule = UpdateRule {
        mode: ForwardMode::Dense,
        trainable: alpha_kinds(),
        forbidden: KindSet::of(&[ParamKind::Score, ParamKind::Weight, ParamKind::Affine, ParamKind::Mask]),
    };
    let mut curve = PhaseCurve {
        phase: "pretrain".into(),
        points: Vec::new(),
    };
    let mut t = 0;
    for epoch in 0..cfg.epochs.pretrain {
        let train_batches = epoch_batches(&mut state.rng, data.train.len(), cfg.batch_size, Some(iters));
        let val_batches = epoch_batches(&mut state.rng, data.val.len(), cfg.batch_size, None);
        let (mut tl, mut vl) = (Vec::new(), Vec::new());
        for (b, idx) in train_batches.iter().enumerate() {
            let site = StepSite { phase: "pretrain", epoch, batch: b };
            theta_opt.set_lr(cosine_lr(t, total, f32_of(cfg.lrs.theta))?);
            let (x, y) = load_batch(&data.train, idx, cfg.augment.then_some(&mut state.rng));
            tl.push(sgd_update(&mut state.supernet, &mut theta_opt, x, &y, theta_rule, site)?);
            let (x, y) = load_batch(&data.val, &val_batches[b % val_batches.len()], None);
            vl.push(sgd_update(&mut state.supernet, &mut alpha_opt, x, &y, alpha_rule, site)?);
            state.stats.audited_pretrain += 2;
            t += 1;
        }
        curve.points.push(CurvePoint {
            epoch,
            train_loss: mean(&tl),
            val_loss: mean(&vl),
        });
    }
    state.stats.alpha_drift_pretrain = max_abs_diff(&alpha_start, &alpha_values(&state.supernet));
    let store = state.supernet.store.clone();
    state.keep_velocities("theta", &theta_opt, &store);
    state.keep_velocities("alpha", &alpha_opt, &store);
    state.curves.push(curve);
    let g = derive(state.supernet.alpha_normal(), state.supernet.alpha_reduce(), &state.supernet.op_set)?;
    let dense = DerivedNet::build(&g, &cfg.net(), &mut RunRng::new(0))?;
    state.dense_params = Some(count_params(&dense).total);
    state.genotype_pretrain = Some(g);
    state.phase = Phase::Pretrained;
    Ok(())
}

/// Sets every sparse layer to the configured ratio and binarizes scores
/// initialized from the current weights.
fn start_pruning(net: &mut dyn Network, ratio: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(DassError::config("pruning_ratio", format!("must lie in [0, 1], got {ratio}")));
    }
    let numels: Vec<usize> = net.sparse_params().iter().map(|p| p.numel(net.store())).collect();
    for (p, n) in net.sparse_params_mut().into_iter().zip(numels) {
        p.k = crate::sparse::layer_k_from_ratio(n, ratio);
    }
    rebinarize_all(net, true)
}

fn rebinarize_all(net: &mut dyn Network, init_scores: bool) -> Result<()> {
    let params: Vec<_> = net.sparse_params().into_iter().cloned().collect();
    let store = net.store_mut();
    for p in &params {
        if init_scores {
            p.init_scores(store)?;
        }
        p.rebinarize(store)?;
    }
    Ok(())
}

fn check_exact_sparsity(net: &dyn Network) -> Result<()> {
    for p in net.sparse_params() {
        let pop = p.popcount(net.store());
        if pop != p.k {
            return Err(DassError::Invariant(format!("layer {} keeps {pop} weights, expected {}", p.name, p.k)));
        }
    }
    Ok(())
}

fn score_rule() -> UpdateRule {
    UpdateRule {
        mode: ForwardMode::ScoreScaled,
        trainable: score_kinds(),
        forbidden: KindSet::of(&[ParamKind::Weight, ParamKind::Affine, ParamKind::Alpha, ParamKind::Mask]),
    }
}

/// Step 2: alternate a score update on a train batch (weights frozen, score
/// scaled), re-binarization of every layer, and an architecture update on a
/// validation batch through the masked supernet.
pub fn step2_prune(state: &mut RunState, data: &DataSplit) -> Result<()> {
    if state.phase != Phase::Pretrained {
        return Err(DassError::Invalid(format!("pruning needs a pretrained run, found phase {:?}", state.phase)));
    }
    let cfg = state.config.clone();
    if cfg.alpha_init_mode == AlphaInit::Fresh {
        state.supernet.reset_alpha(&mut state.rng);
    }
    start_pruning(&mut state.supernet, cfg.pruning_ratio)?;
    let alpha_entry = [state.supernet.alpha_normal().clone(), state.supernet.alpha_reduce().clone()];
    let alpha_start = alpha_values(&state.supernet);
    let iters = batches_per_epoch(data.train.len(), cfg.batch_size, cfg.max_batches_per_epoch);
    let total = (cfg.epochs.prune * iters).max(1);
    let store = &state.supernet.store;
    let mut score_opt = Sgd::new(
        store,
        store.ids_of(score_kinds()),
        f32_of(cfg.lrs.score),
        f32_of(cfg.momentum),
        f32_of(cfg.weight_decay),
    );
    let mut alpha_opt = Sgd::new(
        store,
        state.supernet.alpha_ids().to_vec(),
        f32_of(cfg.lrs.alpha),
        f32_of(cfg.alpha_momentum),
        f32_of(cfg.alpha_weight_decay),
    );
    let alpha_rule = UpdateRule {
        mode: ForwardMode::Masked,
        trainable: alpha_kinds(),
        forbidden: KindSet::of(&[ParamKind::Weight, ParamKind::Affine, ParamKind::Score, ParamKind::Mask]),
    };
    let mut curve = PhaseCurve {
        phase: "prune".into(),
        points: Vec::new(),
    };
    let mut t = 0;
    for epoch in 0..cfg.epochs.prune {
        let train_batches = epoch_batches(&mut state.rng, data.train.len(), cfg.batch_size, Some(iters));
        let val_batches = epoch_batches(&mut state.rng, data.val.len(), cfg.batch_size, None);
        let (mut tl, mut vl) = (Vec::new(), Vec::new());
        let mut score_step = |state: &mut RunState, b: usize, idx: &[usize], t: usize| -> Result<()> {
            let site = StepSite { phase: "prune", epoch, batch: b };
            score_opt.set_lr(cosine_lr(t, total, f32_of(cfg.lrs.score))?);
            let (x, y) = load_batch(&data.train, idx, cfg.augment.then_some(&mut state.rng));
            tl.push(sgd_update(&mut state.supernet, &mut score_opt, x, &y, score_rule(), site)?);
            rebinarize_all(&mut state.supernet, false)?;
            state.stats.audited_prune += 1;
            Ok(())
        };
        let mut alpha_step = |state: &mut RunState, b: usize| -> Result<()> {
            let site = StepSite { phase: "prune", epoch, batch: b };
            let (x, y) = load_batch(&data.val, &val_batches[b % val_batches.len()], None);
            vl.push(sgd_update(&mut state.supernet, &mut alpha_opt, x, &y, alpha_rule, site)?);
            state.stats.audited_prune += 1;
            Ok(())
        };
        match cfg.alternation {
            Alternation::PerBatch => {
                for (b, idx) in train_batches.iter().enumerate() {
                    score_step(state, b, idx, t)?;
                    alpha_step(state, b)?;
                    t += 1;
                }
            }
            Alternation::PerEpoch => {
                for (b, idx) in train_batches.iter().enumerate() {
                    score_step(state, b, idx, t)?;
                    t += 1;
                }
                for b in 0..train_batches.len() {
                    alpha_step(state, b)?;
                }
            }
        }
        curve.points.push(CurvePoint {
            epoch,
            train_loss: mean(&tl),
            val_loss: mean(&vl),
        });
    }
    check_exact_sparsity(&state.supernet)?;
    state.stats.alpha_drift_prune = max_abs_diff(&alpha_start, &alpha_values(&state.supernet));
    let (entry, fin) = alpha_descent(&mut state.supernet, &alpha_entry, data, cfg.batch_size)?;
    state.stats.val_loss_entry_alpha = Some(entry);
    state.stats.val_loss_final_alpha = Some(fin);
    let store = state.supernet.store.clone();
    state.keep_velocities("score", &score_opt, &store);
    state.keep_velocities("alpha", &alpha_opt, &store);
    state.curves.push(curve);
    state.genotype = Some(derive(
        state.supernet.alpha_normal(),
        state.supernet.alpha_reduce(),
        &state.supernet.op_set,
    )?);
    state.phase = Phase::Pruned;
    Ok(())
}

/// Full validation loss of the masked supernet with the entry tables and with the current ones.
fn alpha_descent(net: &mut Supernet, entry: &[Tensor; 2], data: &DataSplit, batch: usize) -> Result<(f64, f64)> {
    let (_, fin) = evaluate(net, ForwardMode::Masked, &data.val, batch)?;
    let current = [net.alpha_normal().clone(), net.alpha_reduce().clone()];
    let ids = net.alpha_ids();
    for (id, t) in ids.iter().zip(entry) {
        *net.store.value_mut(*id) = t.clone();
    }
    let (_, start) = evaluate(net, ForwardMode::Masked, &data.val, batch)?;
    for (id, t) in ids.iter().zip(current) {
        *net.store.value_mut(*id) = t;
    }
    Ok((start, fin))
}

/// Baseline step 2: derive from the dense search, then learn scores on the
/// derived network. The architecture is never updated.
pub fn baseline_prune(state: &mut RunState, data: &DataSplit) -> Result<()> {
    if state.phase != Phase::Pretrained {
        return Err(DassError::Invalid(format!("pruning needs a pretrained run, found phase {:?}", state.phase)));
    }
    let cfg = state.config.clone();
    let g = state
        .genotype_pretrain
        .clone()
        .ok_or_else(|| DassError::Invalid("pretrained run has no genotype".into()))?;
    let mut net = instantiate(&g, &cfg.net(), Some(&state.supernet.store), &mut state.rng)?;
    start_pruning(&mut net, cfg.pruning_ratio)?;
    let iters = batches_per_epoch(data.train.len(), cfg.batch_size, cfg.max_batches_per_epoch);
    let total = (cfg.epochs.prune * iters).max(1);
    let mut score_opt = Sgd::new(
        &net.store,
        net.store.ids_of(score_kinds()),
        f32_of(cfg.lrs.score),
        f32_of(cfg.momentum),
        f32_of(cfg.weight_decay),
    );
    let mut curve = PhaseCurve {
        phase: "prune".into(),
        points: Vec::new(),
    };
    let mut t = 0;
    for epoch in 0..cfg.epochs.prune {
        let batches = epoch_batches(&mut state.rng, data.train.len(), cfg.batch_size, Some(iters));
        let mut tl = Vec::new();
        for (b, idx) in batches.iter().enumerate() {
            let site = StepSite { phase: "prune", epoch, batch: b };
            score_opt.set_lr(cosine_lr(t, total, f32_of(cfg.lrs.score))?);
            let (x, y) = load_batch(&data.train, idx, cfg.augment.then_some(&mut state.rng));
            tl.push(sgd_update(&mut net, &mut score_opt, x, &y, score_rule(), site)?);
            rebinarize_all(&mut net, false)?;
            state.stats.audited_prune += 1;
            t += 1;
        }
        let (_, val_loss) = evaluate(&mut net, ForwardMode::Masked, &data.val, cfg.batch_size)?;
        curve.points.push(CurvePoint {
            epoch,
            train_loss: mean(&tl),
            val_loss,
        });
    }
    check_exact_sparsity(&net)?;
    state.keep_velocities("score", &score_opt, &net.store);
    state.curves.push(curve);
    state.genotype = Some(g);
    state.derived = Some(net);
    state.phase = Phase::Pruned;
    Ok(())
}

/// Puts the network step 3 trains in place: the derived network (searched
/// weights and masks inherited, or fresh weights under the searched masks)
/// or the masked supernet itself.
fn prepare_finetune(state: &mut RunState) -> Result<()> {
    let cfg = state.config.clone();
    let mask_only = KindSet::of(&[ParamKind::Mask]);
    match (state.method, cfg.finetune_target) {
        (Method::Dass, FinetuneTarget::Supernet) => {
            if cfg.finetune_mode == FinetuneMode::Scratch {
                let fresh = Supernet::new(&cfg.net(), &mut state.rng)?;
                let keep = KindSet::of(&[ParamKind::Alpha, ParamKind::Mask]);
                let mut net = fresh;
                net.store.copy_matching_from(&state.supernet.store, keep);
                for (p, q) in net.sparse_params_mut().into_iter().zip(state.supernet.sparse_params()) {
                    p.k = q.k;
                }
                state.supernet = net;
            }
        }
        (Method::Dass, FinetuneTarget::Derived) => {
            let g = state
                .genotype
                .clone()
                .ok_or_else(|| DassError::Invalid("pruned run has no genotype".into()))?;
            let net = match cfg.finetune_mode {
                FinetuneMode::Inherit => instantiate(&g, &cfg.net(), Some(&state.supernet.store), &mut state.rng)?,
                FinetuneMode::Scratch => {
                    let mut net = DerivedNet::build(&g, &cfg.net(), &mut state.rng)?;
                    net.inherit(&state.supernet.store, mask_only)?;
                    net
                }
            };
            state.derived = Some(net);
        }
        (Method::DartsSparse, _) => {
            if cfg.finetune_mode == FinetuneMode::Scratch {
                let pruned = state
                    .derived
                    .take()
                    .ok_or_else(|| DassError::Invalid("pruned baseline has no network".into()))?;
                let mut net = DerivedNet::build(&pruned.genotype, &cfg.net(), &mut state.rng)?;
                net.inherit(&pruned.store, mask_only)?;
                state.derived = Some(net);
            }
        }
    }
    Ok(())
}

/// Step 3: SGD on the surviving weights of the masked network; architecture,
/// scores and masks stay frozen. Any change to them aborts the run.
pub fn step3_finetune(state: &mut RunState, data: &DataSplit, mut hook: Option<FinetuneHook<'_>>) -> Result<()> {
    if state.phase != Phase::Pruned {
        return Err(DassError::Invalid(format!("fine-tuning needs a pruned run, found phase {:?}", state.phase)));
    }
    prepare_finetune(state)?;
    let cfg = state.config.clone();
    let before = {
        let net = state.final_network();
        evaluate(net, ForwardMode::Masked, &data.test, cfg.batch_size)?.0
    };
    state.stats.accuracy_before_finetune = Some(before);
    let supernet_alpha = state.supernet.store.fingerprint(alpha_kinds());
    let iters = batches_per_epoch(data.train.len(), cfg.batch_size, cfg.max_batches_per_epoch);
    let total = (cfg.epochs.finetune * iters).max(1);
    let rule = UpdateRule {
        mode: ForwardMode::Masked,
        trainable: theta_kinds(),
        forbidden: frozen_in_finetune(),
    };
    let RunState { rng, derived, supernet, stats, .. } = state;
    let net: &mut dyn Network = match derived.as_mut() {
        Some(d) => d,
        None => supernet,
    };
    check_exact_sparsity(net)?;
    let frozen = net.store().fingerprint(frozen_in_finetune());
    let mut opt = Sgd::new(
        net.store(),
        net.store().ids_of(theta_kinds()),
        f32_of(cfg.lrs.finetune),
        f32_of(cfg.momentum),
        f32_of(cfg.weight_decay),
    );
    let mut curve = PhaseCurve {
        phase: "finetune".into(),
        points: Vec::new(),
    };
    let mut t = 0;
    for epoch in 0..cfg.epochs.finetune {
        let batches = epoch_batches(rng, data.train.len(), cfg.batch_size, Some(iters));
        let mut tl = Vec::new();
        for (b, idx) in batches.iter().enumerate() {
            let site = StepSite { phase: "finetune", epoch, batch: b };
            opt.set_lr(cosine_lr(t, total, f32_of(cfg.lrs.finetune))?);
            let (x, y) = load_batch(&data.train, idx, cfg.augment.then_some(&mut *rng));
            tl.push(sgd_update(net, &mut opt, x, &y, rule, site)?);
            stats.audited_finetune += 1;
            if let Some(h) = hook.as_mut() {
                h(net.store_mut());
            }
            if net.store().fingerprint(frozen_in_finetune()) != frozen {
                return Err(DassError::Invariant(format!(
                    "architecture, scores or masks changed during fine-tuning (epoch {epoch}, batch {b})"
                )));
            }
            t += 1;
        }
        let (_, val_loss) = evaluate(net, ForwardMode::Masked, &data.val, cfg.batch_size)?;
        curve.points.push(CurvePoint {
            epoch,
            train_loss: mean(&tl),
            val_loss,
        });
    }
    check_exact_sparsity(net)?;
    let store = net.store().clone();
    if supernet.store.fingerprint(alpha_kinds()) != supernet_alpha {
        return Err(DassError::Invariant("architecture tables changed during fine-tuning".into()));
    }
    state.keep_velocities("finetune", &opt, &store);
    state.curves.push(curve);
    state.phase = Phase::Finetuned;
    Ok(())
}

/// Evaluates the final network and fills in the report.
pub fn build_report(state: &mut RunState, data: &DataSplit) -> Result<MetricsReport> {
    let cfg = state.config.clone();
    let net = state.final_network();
    for p in net.sparse_params() {
        let w = p.masked_weight(net.store());
        let m = net.store().value(p.mask);
        if w.data().iter().zip(m.data()).any(|(w, m)| *m == 0.0 && *w != 0.0) {
            return Err(DassError::Invariant(format!("layer {} has a nonzero pruned weight", p.name)));
        }
    }
    let counts = count_params(net);
    let (top1, _) = evaluate(net, ForwardMode::Masked, &data.test, cfg.batch_size)?;
    let (train_acc, _) = evaluate(net, ForwardMode::Masked, &data.train, cfg.batch_size)?;
    let baseline = cfg.baseline_params.or(state.dense_params).unwrap_or(counts.total);
    let report = MetricsReport {
        method: state.method.name().into(),
        seed: cfg.seed,
        pruning_ratio: cfg.pruning_ratio,
        top1_accuracy: top1,
        train_accuracy: train_acc,
        params_total: counts.total,
        params_nonzero: counts.nonzero,
        params_masked_nonzero: counts.masked_nonzero,
        k_total: counts.k_total,
        baseline_params: baseline,
        compression_rate: compression_rate(baseline as f64, counts.nonzero as f64)?,
        nid: nid(top1, counts.nonzero as f64 / 1000.0)?,
        generalization_gap: crate::metrics::generalization_gap(train_acc, top1),
        loss_curves: state.curves.clone(),
    };
    report.check()?;
    state.report = Some(report.clone());
    Ok(report)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| DassError::io(path, e))
}

/// Writes `config_resolved.json` into `dir`.
pub fn write_resolved_config(cfg: &SearchConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| DassError::io(dir, e))?;
    write_text(&dir.join("config_resolved.json"), &serde_json::to_string_pretty(cfg)?)
}

/// Drives a run from its current phase to the end (or to `stop_after`),
/// checkpointing at every phase boundary when an output directory is given.
pub fn run_pipeline(state: &mut RunState, data: &DataSplit, mut opts: RunOptions<'_>) -> Result<()> {
    if let Some(dir) = &opts.out_dir {
        write_resolved_config(&state.config, dir)?;
    }
    loop {
        if opts.stop_after.is_some_and(|p| state.phase >= p) {
            return Ok(());
        }
        let ckpt = match state.phase {
            Phase::Init => {
                step1_pretrain(state, data)?;
                CKPT_PRETRAIN
            }
            Phase::Pretrained => {
                match state.method {
                    Method::Dass => step2_prune(state, data)?,
                    Method::DartsSparse => baseline_prune(state, data)?,
                }
                CKPT_PRUNE
            }
            Phase::Pruned => {
                step3_finetune(state, data, opts.finetune_hook.take())?;
                build_report(state, data)?;
                CKPT_FINETUNE
            }
            Phase::Finetuned => return Ok(()),
        };
        if let Some(dir) = &opts.out_dir {
            state.save(&dir.join(ckpt))?;
            if let Some(g) = &state.genotype {
                write_text(&dir.join("genotype.json"), &g.to_json()?)?;
            }
            if let Some(r) = &state.report {
                r.write_json(&dir.join("report.json"))?;
                r.write_loss_csv(&dir.join("loss_curves.csv"))?;
            }
        }
    }
}

/// Runs the full three-step search.
pub fn run_dass(cfg: &SearchConfig, data: &DataSplit, opts: RunOptions<'_>) -> Result<RunState> {
    let mut state = RunState::new(cfg, Method::Dass)?;
    run_pipeline(&mut state, data, opts)?;
    Ok(state)
}

/// Runs the dense search followed by post-hoc pruning of the derived network.
pub fn run_darts_sparse_baseline(cfg: &SearchConfig, data: &DataSplit, opts: RunOptions<'_>) -> Result<RunState> {
    let mut state = RunState::new(cfg, Method::DartsSparse)?;
    run_pipeline(&mut state, data, opts)?;
    Ok(state)
}

/// The first `PROBE_SIZE` test images.
pub fn probe_batch(data: &DataSplit) -> Tensor {
    let n = data.test.len().min(PROBE_SIZE);
    data.test.batch(&(0..n).collect::<Vec<_>>()).0
}

/// Both methods at one ratio, sharing the pretraining run.
#[derive(Clone, Debug)]
pub struct PairedRun {
    pub ratio: f64,
    pub dass: RunState,
    pub baseline: RunState,
    /// Per-cell scaled tau against the pretrained dense supernet.
    pub tau_dass: Vec<f64>,
    pub tau_baseline: Vec<f64>,
}

/// Pretrains once, then finishes a search and a baseline run at every ratio.
/// Each finished run is identical to a standalone run with that ratio.
pub fn run_paired(cfg: &SearchConfig, data: &DataSplit, ratios: &[f64], out_dir: Option<&Path>) -> Result<Vec<PairedRun>> {
    let mut pre = RunState::new(cfg, Method::Dass)?;
    step1_pretrain(&mut pre, data)?;
    let probe = probe_batch(data);
    let mut out = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let finish = |method: Method| -> Result<RunState> {
            let mut s = pre.clone();
            s.method = method;
            s.config.pruning_ratio = ratio;
            s.config.validate()?;
            let dir = out_dir.map(|d| d.join(format!("ratio_{ratio}")).join(method.name()));
            run_pipeline(&mut s, data, RunOptions { out_dir: dir, ..Default::default() })?;
            Ok(s)
        };
        let mut dass = finish(Method::Dass)?;
        let mut baseline = finish(Method::DartsSparse)?;
        let mut dense = pre.supernet.clone();
        let tau_dass = feature_map_similarity(dass.final_network(), ForwardMode::Masked, &mut dense, ForwardMode::Dense, &probe)?;
        let tau_baseline =
            feature_map_similarity(baseline.final_network(), ForwardMode::Masked, &mut dense, ForwardMode::Dense, &probe)?;
        out.push(PairedRun {
            ratio,
            dass,
            baseline,
            tau_dass,
            tau_baseline,
        });
    }
    Ok(out)
}
