//! Episodic Meta-SGD: task sampling, the per-task inner update with learned
//! per-parameter rates, the summed outer update, and few-shot adaptation.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    adam_step, backbone_logits, cross_entropy_sum, forward_backbone, grad, grad_through_update, one_hot, sgd_step,
    AdamConfig, AdamState, BackboneSpec, Graph, MetaGradMode, ParamSet, Tensor, Var,
};
use crate::classifier::{argmax, InputScaler};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Label of benign flows in every dataset.
pub const NORMAL_LABEL: &str = "normal";

/// Backbone parameters with an equally shaped tensor of learned rates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaParams {
    pub theta: ParamSet,
    pub alpha: ParamSet,
}

impl MetaParams {
    pub fn new(theta: ParamSet, alpha: ParamSet) -> Result<Self> {
        theta.check_congruent(&alpha)?;
        Ok(MetaParams { theta, alpha })
    }

    /// Glorot θ and a constant α.
    pub fn init(spec: &BackboneSpec, alpha_init: f64, rng: &mut Rng) -> Self {
        let theta = spec.init(rng);
        let alpha = theta.filled_like(alpha_init);
        MetaParams { theta, alpha }
    }

    pub fn is_finite(&self) -> bool {
        self.theta.is_finite() && self.alpha.is_finite()
    }
}

/// How the summed meta-gradient updates `(θ, α)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OuterOptimizer {
    /// Plain step of size β.
    Sgd,
    /// Adam with learning rate β.
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    /// Anomaly classes per episode.
    pub k: usize,
    /// Support shots per class.
    pub m: usize,
    /// Validation shots per class; `None` means the same as `m`.
    pub n: Option<usize>,
    pub beta: f64,
    pub inner_steps: usize,
    pub episodes: usize,
    pub meta_grad_mode: MetaGradMode,
    pub outer_optimizer: OuterOptimizer,
    pub alpha_init: f64,
    pub hidden: Vec<usize>,
    /// Rescales the summed meta-gradient to at most this global L2 norm.
    pub max_grad_norm: Option<f64>,
    pub seed: u64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            k: 5,
            m: 5,
            n: None,
            beta: 0.001,
            inner_steps: 1,
            episodes: 300,
            meta_grad_mode: MetaGradMode::Exact,
            outer_optimizer: OuterOptimizer::Adam,
            alpha_init: 0.01,
            hidden: BackboneSpec::DEFAULT_HIDDEN.to_vec(),
            max_grad_norm: None,
            seed: 0,
        }
    }
}

impl EpisodeConfig {
    pub fn n_val(&self) -> usize {
        self.n.unwrap_or(self.m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.m == 0 || self.n_val() == 0 {
            return Err(Error::Config("K, M and N must be at least 1".into()));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if self.inner_steps == 0 {
            return Err(Error::Config("inner_steps must be at least 1".into()));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0) || !c.is_finite() {
                return Err(Error::Config(format!("max_grad_norm must be positive, got {c}")));
            }
        }
        if !self.alpha_init.is_finite() {
            return Err(Error::Config("alpha_init must be finite".into()));
        }
        Ok(())
    }
}

/// Output slots: `K` anomaly classes, then normal, then the novel class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    /// Training classes by slot when the assignment is fixed; empty otherwise.
    pub classes: Vec<String>,
    pub k: usize,
    /// True when every episode uses the same class-to-slot assignment.
    pub fixed: bool,
}

impl LabelSpace {
    /// Fixed slots when there are exactly `k` training classes, otherwise
    /// each episode assigns slots to its sampled classes in id order.
    pub fn for_classes(train_classes: &[String], k: usize) -> Self {
        let mut sorted = train_classes.to_vec();
        sorted.sort();
        if sorted.len() == k {
            LabelSpace {
                classes: sorted,
                k,
                fixed: true,
            }
        } else {
            LabelSpace {
                classes: Vec::new(),
                k,
                fixed: false,
            }
        }
    }

    pub fn normal(&self) -> usize {
        self.k
    }

    pub fn novel(&self) -> usize {
        self.k + 1
    }

    pub fn size(&self) -> usize {
        self.k + 2
    }

    pub fn slot_of(&self, class: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == class)
    }
}

/// Rows grouped by class: the normal pool and one pool per anomaly class.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClassPools {
    pub normal: Vec<Vec<f64>>,
    pub anomalies: BTreeMap<String, Vec<Vec<f64>>>,
}

impl ClassPools {
    pub fn from_labeled(rows: &[Vec<f64>], labels: &[String]) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        let mut pools = ClassPools::default();
        for (r, l) in rows.iter().zip(labels) {
            if l == NORMAL_LABEL {
                pools.normal.push(r.clone());
            } else {
                pools.anomalies.entry(l.clone()).or_default().push(r.clone());
            }
        }
        Ok(pools)
    }

    pub fn class_ids(&self) -> Vec<String> {
        self.anomalies.keys().cloned().collect()
    }

    pub fn dim(&self) -> Option<usize> {
        self.normal
            .first()
            .or_else(|| self.anomalies.values().flat_map(|v| v.first()).next())
            .map(Vec::len)
    }

    /// Only the named anomaly classes, with the full normal pool.
    pub fn restricted(&self, classes: &[String]) -> ClassPools {
        ClassPools {
            normal: self.normal.clone(),
            anomalies: self
                .anomalies
                .iter()
                .filter(|(c, _)| classes.contains(c))
                .map(|(c, v)| (c.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn map_rows(&self, f: impl Fn(&[f64]) -> Vec<f64>) -> ClassPools {
        ClassPools {
            normal: self.normal.iter().map(|r| f(r)).collect(),
            anomalies: self
                .anomalies
                .iter()
                .map(|(c, v)| (c.clone(), v.iter().map(|r| f(r)).collect()))
                .collect(),
        }
    }

    pub fn all_rows(&self) -> Vec<Vec<f64>> {
        let mut rows = self.normal.clone();
        for v in self.anomalies.values() {
            rows.extend(v.iter().cloned());
        }
        rows
    }
}

/// Labeled rows as a matrix and its one-hot targets.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub x: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(rows: &[Vec<f64>], labels: Vec<usize>) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(Error::Argument("rows and labels differ in length".into()));
        }
        Ok(LabeledBatch {
            x: Tensor::from_rows(rows)?,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Support and validation sets for one anomaly class plus normals.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub class_id: String,
    /// Output slot of the anomaly class.
    pub label: usize,
    pub support: LabeledBatch,
    pub validation: LabeledBatch,
}

/// Summed cross-entropy of the backbone on `batch`, built on `g`.
fn ce_loss(g: &mut Graph, p: &[Var], batch: &LabeledBatch, classes: usize) -> Var {
    let x = g.input(&batch.x);
    let y = g.input(&one_hot(&batch.labels, classes));
    let logits = backbone_logits(g, p, x);
    cross_entropy_sum(g, logits, y)
}

/// Draws the `K` tasks of one episode.
///
/// Classes are drawn without replacement and ordered by id; each takes
/// `M + N` of its flows (first `M` for support) and `M + N` normal flows
/// drawn without replacement across the whole episode.
pub fn sample_episode(
    pools: &ClassPools,
    train_classes: &[String],
    labels: &LabelSpace,
    cfg: &EpisodeConfig,
    rng: &mut Rng,
) -> Result<Vec<Task>> {
    let (k, m, n) = (cfg.k, cfg.m, cfg.n_val());
    if train_classes.len() < k {
        return Err(Error::Data(format!(
            "episode needs {k} anomaly classes, only {} available",
            train_classes.len()
        )));
    }
    let mut sorted = train_classes.to_vec();
    sorted.sort();
    for c in &sorted {
        let have = pools.anomalies.get(c).map_or(0, Vec::len);
        if have < m + n {
            return Err(Error::Data(format!(
                "class {c:?} has {have} flows, an episode needs {}",
                m + n
            )));
        }
    }
    if pools.normal.len() < k * (m + n) {
        return Err(Error::Data(format!(
            "normal pool has {} flows, an episode needs {}",
            pools.normal.len(),
            k * (m + n)
        )));
    }
    let mut chosen: Vec<String> = index::sample(rng, sorted.len(), k)
        .into_iter()
        .map(|i| sorted[i].clone())
        .collect();
    chosen.sort();
    let normals = index::sample(rng, pools.normal.len(), k * (m + n)).into_vec();
    let mut tasks = Vec::with_capacity(k);
    for (pos, class) in chosen.iter().enumerate() {
        let pool = &pools.anomalies[class];
        let picks = index::sample(rng, pool.len(), m + n).into_vec();
        let label = if labels.fixed {
            labels
                .slot_of(class)
                .ok_or_else(|| Error::Data(format!("class {class:?} has no output slot")))?
        } else {
            pos
        };
        let nb = &normals[pos * (m + n)..(pos + 1) * (m + n)];
        let mut sup: Vec<Vec<f64>> = picks[..m].iter().map(|&i| pool[i].clone()).collect();
        sup.extend(nb[..m].iter().map(|&i| pools.normal[i].clone()));
        let mut val: Vec<Vec<f64>> = picks[m..].iter().map(|&i| pool[i].clone()).collect();
        val.extend(nb[m..].iter().map(|&i| pools.normal[i].clone()));
        let mut sup_labels = vec![label; m];
        sup_labels.extend(vec![labels.normal(); m]);
        let mut val_labels = vec![label; n];
        val_labels.extend(vec![labels.normal(); n]);
        tasks.push(Task {
            class_id: class.clone(),
            label,
            support: LabeledBatch::new(&sup, sup_labels)?,
            validation: LabeledBatch::new(&val, val_labels)?,
        });
    }
    Ok(tasks)
}

/// `θ ← θ − α ∘ ∇θ L(θ; batch)`, `steps` times, with `L` the summed
/// cross-entropy.
pub fn adapt_on(meta: &MetaParams, spec: &BackboneSpec, batch: &LabeledBatch, steps: usize) -> Result<ParamSet> {
    let classes = spec.output_dim();
    let mut theta = meta.theta.clone();
    for step in 0..steps {
        let (_, g) = grad(&theta, |gr, p| Ok(ce_loss(gr, p, batch, classes))).map_err(|e| match e {
            Error::Numeric { detail, .. } => Error::numeric(format!("adaptation step {step}"), detail),
            other => other,
        })?;
        let scaled = meta.alpha.zip_map(&g, |a, g| a * g)?;
        theta = theta.zip_map(&scaled, |t, s| t - s)?;
    }
    Ok(theta)
}

/// The adapted parameters θ' of one task (support set only).
pub fn inner_update(meta: &MetaParams, spec: &BackboneSpec, task: &Task, steps: usize) -> Result<ParamSet> {
    adapt_on(meta, spec, &task.support, steps)
}

/// Meta-gradient of one task's validation loss after its inner update.
pub fn task_meta_gradient(
    meta: &MetaParams,
    spec: &BackboneSpec,
    task: &Task,
    steps: usize,
    mode: MetaGradMode,
) -> Result<crate::autodiff::MetaGradient> {
    let classes = spec.output_dim();
    grad_through_update(
        &meta.theta,
        &meta.alpha,
        |g, p| Ok(ce_loss(g, p, &task.support, classes)),
        |g, p| Ok(ce_loss(g, p, &task.validation, classes)),
        steps,
        mode,
    )
    .map_err(|e| match e {
        Error::Numeric { detail, .. } => Error::numeric(format!("task {:?}", task.class_id), detail),
        other => other,
    })
}

/// Summed meta-gradient of one episode.
pub struct EpisodeGradient {
    pub theta: ParamSet,
    pub alpha: ParamSet,
    /// Validation losses per task, in class id order.
    pub task_losses: Vec<f64>,
}

impl EpisodeGradient {
    pub fn norm(&self) -> f64 {
        (self.theta.dot(&self.theta) + self.alpha.dot(&self.alpha)).sqrt()
    }

    /// Rescales to at most `limit` in global L2 norm.
    pub fn clip(&mut self, limit: f64) {
        let norm = self.norm();
        if norm > limit {
            let k = limit / norm;
            self.theta = self.theta.map(|v| v * k);
            self.alpha = self.alpha.map(|v| v * k);
        }
    }
}

/// `Σ_i ∇(θ, α) L_val,i(θ'_i)` over the episode's tasks.
///
/// Tasks are reduced in class id order, so the result does not depend on
/// the task order or on how many threads compute the per-task gradients.
pub fn episode_gradient(
    meta: &MetaParams,
    spec: &BackboneSpec,
    tasks: &[Task],
    cfg: &EpisodeConfig,
) -> Result<EpisodeGradient> {
    if tasks.is_empty() {
        return Err(Error::Argument("outer update needs at least one task".into()));
    }
    let mut order: Vec<&Task> = tasks.iter().collect();
    order.sort_by(|a, b| a.class_id.cmp(&b.class_id));
    let grads: Vec<_> = order
        .par_iter()
        .map(|t| task_meta_gradient(meta, spec, t, cfg.inner_steps, cfg.meta_grad_mode))
        .collect::<Result<Vec<_>>>()?;
    let mut theta = meta.theta.zeros_like();
    let mut alpha = meta.alpha.zeros_like();
    for g in &grads {
        theta = theta.zip_map(&g.theta, |s, v| s + v)?;
        alpha = alpha.zip_map(&g.alpha, |s, v| s + v)?;
    }
    Ok(EpisodeGradient {
        theta,
        alpha,
        task_losses: grads.iter().map(|g| g.outer_loss).collect(),
    })
}

/// Result of one outer step.
pub struct OuterStep {
    pub meta: MetaParams,
    /// Validation losses per task, in class id order.
    pub task_losses: Vec<f64>,
}

/// `(θ, α) ← (θ, α) − β Σ_i ∇(θ, α) L_val,i(θ'_i)`, with the sum clipped
/// to `max_grad_norm` when set.
pub fn outer_update(
    meta: &MetaParams,
    spec: &BackboneSpec,
    tasks: &[Task],
    cfg: &EpisodeConfig,
) -> Result<OuterStep> {
    let mut g = episode_gradient(meta, spec, tasks, cfg)?;
    if let Some(limit) = cfg.max_grad_norm {
        g.clip(limit);
    }
    Ok(OuterStep {
        meta: MetaParams {
            theta: sgd_step(&meta.theta, &g.theta, cfg.beta)?,
            alpha: sgd_step(&meta.alpha, &g.alpha, cfg.beta)?,
        },
        task_losses: g.task_losses,
    })
}

/// Applies the outer update of `cfg.outer_optimizer` across episodes.
pub struct OuterOptimizerState {
    adam: Option<(AdamState, AdamState)>,
}

impl OuterOptimizerState {
    pub fn new(meta: &MetaParams, cfg: &EpisodeConfig) -> Self {
        let adam = match cfg.outer_optimizer {
            OuterOptimizer::Sgd => None,
            OuterOptimizer::Adam => Some((AdamState::new(&meta.theta), AdamState::new(&meta.alpha))),
        };
        OuterOptimizerState { adam }
    }

    pub fn step(
        &mut self,
        meta: &MetaParams,
        spec: &BackboneSpec,
        tasks: &[Task],
        cfg: &EpisodeConfig,
    ) -> Result<OuterStep> {
        let Some((st, sa)) = self.adam.as_mut() else {
            return outer_update(meta, spec, tasks, cfg);
        };
        let mut g = episode_gradient(meta, spec, tasks, cfg)?;
        if let Some(limit) = cfg.max_grad_norm {
            g.clip(limit);
        }
        let adam = AdamConfig {
            lr: cfg.beta,
            ..AdamConfig::default()
        };
        Ok(OuterStep {
            meta: MetaParams {
                theta: adam_step(&meta.theta, &g.theta, st, &adam)?,
                alpha: adam_step(&meta.alpha, &g.alpha, sa, &adam)?,
            },
            task_losses: g.task_losses,
        })
    }
}

/// Everything needed to reuse a meta-trained detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaModel {
    pub spec: BackboneSpec,
    pub scaler: InputScaler,
    pub labels: LabelSpace,
    pub config: EpisodeConfig,
    pub meta: MetaParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub mean_val_loss: f64,
    pub wall_ms: u64,
}

/// Meta-trains on the anomaly classes present in `pools`.
///
/// The input scaler is fitted on every row of `pools`. Episode `e` draws
/// from its own random stream, so runs are reproducible for a seed.
pub fn meta_train(pools: &ClassPools, cfg: &EpisodeConfig) -> Result<(MetaModel, Vec<EpisodeLog>)> {
    cfg.validate()?;
    let dim = pools
        .dim()
        .ok_or_else(|| Error::Data("meta-training data is empty".into()))?;
    let scaler = InputScaler::fit(&pools.all_rows())?;
    let scaled = pools.map_rows(|r| scaler.transform_row(r));
    let classes = pools.class_ids();
    let labels = LabelSpace::for_classes(&classes, cfg.k);
    let spec = BackboneSpec::with_hidden(dim, cfg.hidden.clone(), cfg.k);
    let mut meta = MetaParams::init(&spec, cfg.alpha_init, &mut rng::stream(cfg.seed, "meta-init", 0));
    let mut opt = OuterOptimizerState::new(&meta, cfg);
    let mut log = Vec::with_capacity(cfg.episodes);
    for episode in 0..cfg.episodes {
        let start = Instant::now();
        let mut r = rng::stream(cfg.seed, "episode", episode as u64);
        let tasks = sample_episode(&scaled, &classes, &labels, cfg, &mut r)?;
        let step = opt.step(&meta, &spec, &tasks, cfg)?;
        if !step.meta.is_finite() {
            return Err(Error::numeric(
                format!("episode {episode}"),
                "meta-parameters became non-finite",
            ));
        }
        meta = step.meta;
        let mean_val_loss = step.task_losses.iter().sum::<f64>() / step.task_losses.len() as f64;
        log::debug!("episode {episode}: validation loss {mean_val_loss:.5}");
        log.push(EpisodeLog {
            episode,
            mean_val_loss,
            wall_ms: start.elapsed().as_millis() as u64,
        });
    }
    Ok((
        MetaModel {
            spec,
            scaler,
            labels,
            config: cfg.clone(),
            meta,
        },
        log,
    ))
}

/// Few-shot examples of one novel class with normal flows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FewShot {
    pub novel: Vec<Vec<f64>>,
    pub normal: Vec<Vec<f64>>,
}

impl MetaModel {
    /// Scaled rows with novel and normal slot labels.
    pub fn few_shot_batch(&self, shots: &FewShot) -> Result<LabeledBatch> {
        let mut rows: Vec<Vec<f64>> = shots.novel.iter().map(|r| self.scaler.transform_row(r)).collect();
        rows.extend(shots.normal.iter().map(|r| self.scaler.transform_row(r)));
        let mut labels = vec![self.labels.novel(); shots.novel.len()];
        labels.extend(vec![self.labels.normal(); shots.normal.len()]);
        if rows.is_empty() {
            return Err(Error::Data("few-shot set is empty".into()));
        }
        if let Some(r) = rows.iter().find(|r| r.len() != self.spec.input_dim) {
            return Err(Error::Argument(format!(
                "few-shot row has {} features, model expects {}",
                r.len(),
                self.spec.input_dim
            )));
        }
        LabeledBatch::new(&rows, labels)
    }

    /// Fine-tunes θ on the few-shot set; zero steps returns θ unchanged.
    pub fn adapt(&self, shots: &FewShot, steps: usize) -> Result<ParamSet> {
        if steps == 0 {
            return Ok(self.meta.theta.clone());
        }
        let batch = self.few_shot_batch(shots)?;
        adapt_on(&self.meta, &self.spec, &batch, steps)
    }

    /// Slot predictions of `theta` on raw rows.
    pub fn classify_rows(&self, theta: &ParamSet, rows: &[Vec<f64>]) -> Result<Vec<(usize, Vec<f64>)>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let x = self.scaler.transform(rows)?;
        let p = forward_backbone(theta, &self.spec, &x)?;
        Ok((0..p.rows())
            .map(|i| (argmax(p.row(i)), p.row(i).to_vec()))
            .collect())
    }

    /// Human-readable name of an output slot.
    pub fn slot_name(&self, slot: usize) -> String {
        if slot == self.labels.normal() {
            NORMAL_LABEL.into()
        } else if slot == self.labels.novel() {
            "novel".into()
        } else if let Some(c) = self.labels.classes.get(slot) {
            c.clone()
        } else {
            format!("anomaly-slot-{slot}")
        }
    }
}

/// Argmax slot and probabilities of one combined feature vector.
pub fn classify(theta: &ParamSet, spec: &BackboneSpec, x: &[f64]) -> Result<(usize, Vec<f64>)> {
    let p = forward_backbone(theta, spec, &Tensor::vector(x.to_vec()))?;
    Ok((argmax(p.data()), p.into_data()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pools(classes: usize, per: usize, dim: usize) -> ClassPools {
        let mut p = ClassPools::default();
        for i in 0..per * classes {
            p.normal.push((0..dim).map(|j| (i * dim + j) as f64 * 0.01).collect());
        }
        for c in 0..classes {
            p.anomalies.insert(
                format!("anomaly-{c:02}"),
                (0..per).map(|i| (0..dim).map(|j| (c + 1) as f64 + (i + j) as f64 * 0.1).collect()).collect(),
            );
        }
        p
    }

    fn small_cfg() -> EpisodeConfig {
        EpisodeConfig {
            k: 3,
            m: 2,
            hidden: vec![4],
            episodes: 2,
            ..EpisodeConfig::default()
        }
    }

    #[test]
    fn episode_shapes_and_labels() {
        let p = pools(3, 10, 3);
        let cfg = small_cfg();
        let classes = p.class_ids();
        let labels = LabelSpace::for_classes(&classes, 3);
        assert!(labels.fixed);
        let tasks = sample_episode(&p, &classes, &labels, &cfg, &mut rng::stream(1, "t", 0)).unwrap();
        assert_eq!(tasks.len(), 3);
        for (i, t) in tasks.iter().enumerate() {
            assert_eq!(t.label, i);
            assert_eq!(t.support.len(), 4);
            assert_eq!(t.validation.len(), 4);
            assert_eq!(t.support.labels, vec![i, i, 3, 3]);
        }
        let again = sample_episode(&p, &classes, &labels, &cfg, &mut rng::stream(1, "t", 0)).unwrap();
        assert_eq!(tasks, again);
    }

    #[test]
    fn insufficient_data_names_class() {
        let mut p = pools(3, 10, 3);
        p.anomalies.get_mut("anomaly-01").unwrap().truncate(3);
        let classes = p.class_ids();
        let labels = LabelSpace::for_classes(&classes, 3);
        let err = sample_episode(&p, &classes, &labels, &small_cfg(), &mut rng::stream(1, "t", 0)).unwrap_err();
        assert!(err.to_string().contains("anomaly-01"));
        let cfg = EpisodeConfig { k: 4, ..small_cfg() };
        assert!(sample_episode(&p, &classes, &labels, &cfg, &mut rng::stream(1, "t", 0)).is_err());
    }

    #[test]
    fn zero_alpha_keeps_theta() {
        let p = pools(3, 10, 3);
        let cfg = small_cfg();
        let classes = p.class_ids();
        let labels = LabelSpace::for_classes(&classes, 3);
        let tasks = sample_episode(&p, &classes, &labels, &cfg, &mut rng::stream(1, "t", 0)).unwrap();
        let spec = BackboneSpec::with_hidden(3, vec![4], 3);
        let meta = MetaParams::init(&spec, 0.0, &mut rng::stream(2, "i", 0));
        assert_eq!(inner_update(&meta, &spec, &tasks[0], 3).unwrap(), meta.theta);
    }

    #[test]
    fn zero_episodes_returns_initialization() {
        let p = pools(3, 10, 3);
        let cfg = EpisodeConfig { episodes: 0, ..small_cfg() };
        let (model, log) = meta_train(&p, &cfg).unwrap();
        assert!(log.is_empty());
        let spec = BackboneSpec::with_hidden(3, vec![4], 3);
        let init = MetaParams::init(&spec, cfg.alpha_init, &mut rng::stream(cfg.seed, "meta-init", 0));
        assert_eq!(model.meta, init);
    }

    #[test]
    fn zero_params_classify_to_first_slot() {
        let spec = BackboneSpec::with_hidden(3, vec![4], 5);
        let (label, p) = classify(&spec.zeros(), &spec, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(label, 0);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
