//! Metrics and the evaluation protocols: M-shot novel-class detection,
//! k-fold standard detection, cross-dataset transfer and feature-set
//! ablation.

use std::collections::BTreeMap;
use std::io::Read;

use rand::seq::{index, IndexedRandom, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autoencoder::{
    build_flow_matrix, combine_features, train_autoencoder, AeTrainConfig, AutoencoderModel, AutoencoderSpec,
};
use crate::classifier::{argmax, InputScaler};
use crate::error::{Error, Result};
use crate::features::{extract_stat_features, project, project_selected, CANONICAL_SELECTION};
use crate::flow::Flow;
use crate::meta::{meta_train, ClassPools, EpisodeConfig, FewShot, MetaModel, MetaParams, NORMAL_LABEL};
use crate::rng;
use crate::synthetic::LabeledFlow;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy, per-class scores and macro-F1 over classes with support.
pub fn compute_metrics(pairs: &[(usize, usize)], classes: usize) -> Result<Metrics> {
    if pairs.is_empty() {
        return Err(Error::Argument("metrics need at least one prediction".into()));
    }
    let mut confusion = vec![vec![0u64; classes]; classes];
    for &(t, p) in pairs {
        if t >= classes || p >= classes {
            return Err(Error::Argument(format!(
                "label pair ({t}, {p}) outside 0..{classes}"
            )));
        }
        confusion[t][p] += 1;
    }
    let mut per_class = Vec::with_capacity(classes);
    for c in 0..classes {
        let tp = confusion[c][c];
        let support: u64 = confusion[c].iter().sum();
        let predicted: u64 = confusion.iter().map(|row| row[c]).sum();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class.push(ClassMetrics {
            class: c,
            precision,
            recall,
            f1,
            support,
        });
    }
    let present: Vec<&ClassMetrics> = per_class.iter().filter(|m| m.support > 0).collect();
    let macro_f1 = present.iter().map(|m| m.f1).sum::<f64>() / present.len() as f64;
    let correct: u64 = (0..classes).map(|c| confusion[c][c]).sum();
    Ok(Metrics {
        accuracy: correct as f64 / pairs.len() as f64,
        macro_f1,
        per_class,
        confusion,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// One evaluated split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatRecord {
    pub repeat: usize,
    /// Novel class (M-shot) or fold label (standard).
    pub split: String,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub evaluated: usize,
}

impl Aggregate {
    /// Mean and population standard deviation across records.
    pub fn of(records: &[RepeatRecord]) -> Aggregate {
        let acc: Vec<f64> = records.iter().map(|r| r.accuracy).collect();
        let f1: Vec<f64> = records.iter().map(|r| r.macro_f1).collect();
        let (accuracy_mean, accuracy_std) = mean_std(&acc);
        let (f1_mean, f1_std) = mean_std(&f1);
        Aggregate {
            accuracy_mean,
            accuracy_std,
            f1_mean,
            f1_std,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub per_repeat: Vec<RepeatRecord>,
    pub aggregate: Aggregate,
}

impl ArmResult {
    fn new(per_repeat: Vec<RepeatRecord>) -> Self {
        let aggregate = Aggregate::of(&per_repeat);
        ArmResult { per_repeat, aggregate }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MshotConfig {
    pub m: usize,
    pub repeats: usize,
    /// Adaptation steps on the shots; `None` uses the model's inner steps.
    pub adapt_steps: Option<usize>,
    pub seed: u64,
    /// Also adapt a freshly initialized backbone on the shots.
    pub from_scratch: bool,
}

impl Default for MshotConfig {
    fn default() -> Self {
        MshotConfig {
            m: 5,
            repeats: 100,
            adapt_steps: None,
            seed: 0,
            from_scratch: true,
        }
    }
}

/// Per-arm results of an M-shot run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MshotReport {
    pub fine_tuned: ArmResult,
    pub pre_trained: ArmResult,
    pub from_scratch: Option<ArmResult>,
}

struct Split {
    class: String,
    shots: FewShot,
    holdout_novel: Vec<Vec<f64>>,
    holdout_normal: Vec<Vec<f64>>,
}

fn draw_split(test: &ClassPools, classes: &[String], m: usize, seed: u64, repeat: usize) -> Result<Split> {
    let mut r = rng::stream(seed, "mshot-repeat", repeat as u64);
    let class = classes
        .choose(&mut r)
        .expect("caller checked for classes")
        .clone();
    let pool = &test.anomalies[&class];
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(&mut r);
    let holdout = pool.len() - m;
    let normals = index::sample(&mut r, test.normal.len(), m + holdout).into_vec();
    Ok(Split {
        shots: FewShot {
            novel: idx[..m].iter().map(|&i| pool[i].clone()).collect(),
            normal: normals[..m].iter().map(|&i| test.normal[i].clone()).collect(),
        },
        holdout_novel: idx[m..].iter().map(|&i| pool[i].clone()).collect(),
        holdout_normal: normals[m..].iter().map(|&i| test.normal[i].clone()).collect(),
        class,
    })
}

fn check_mshot(test: &ClassPools, m: usize) -> Result<Vec<String>> {
    let classes = test.class_ids();
    if classes.is_empty() {
        return Err(Error::Data("test data has no anomaly classes".into()));
    }
    if m == 0 {
        return Err(Error::Config("M must be at least 1".into()));
    }
    for c in &classes {
        let have = test.anomalies[c].len();
        if have <= m {
            return Err(Error::Data(format!(
                "class {c:?} has {have} flows, M = {m} needs at least {}",
                m + 1
            )));
        }
        if test.normal.len() < have {
            return Err(Error::Data(format!(
                "normal pool has {} flows, class {c:?} needs {have}",
                test.normal.len()
            )));
        }
    }
    Ok(classes)
}

/// A model with the same architecture and label space as `model` but fresh
/// Glorot weights, constant learning factors and a scaler fitted on the shots.
pub fn from_scratch_model(model: &MetaModel, shots: &FewShot, seed: u64, repeat: usize) -> Result<MetaModel> {
    let mut rows = shots.novel.clone();
    rows.extend(shots.normal.iter().cloned());
    let mut r = rng::stream(seed, "scratch-init", repeat as u64);
    Ok(MetaModel {
        spec: model.spec.clone(),
        scaler: InputScaler::fit(&rows)?,
        labels: model.labels.clone(),
        config: model.config.clone(),
        meta: MetaParams::init(&model.spec, model.config.alpha_init, &mut r),
    })
}

/// Adapts to a randomly drawn novel class with M shots per repeat and
/// evaluates on the class's remaining flows plus as many unseen normals.
///
/// The pre-trained arm uses the same splits with zero adaptation steps; the
/// from-scratch arm runs the same adaptation from a fresh initialization.
pub fn run_mshot(model: &MetaModel, test: &ClassPools, cfg: &MshotConfig) -> Result<MshotReport> {
    let classes = check_mshot(test, cfg.m)?;
    if test.dim() != Some(model.spec.input_dim) {
        return Err(Error::Data(format!(
            "test features have dimension {:?}, model expects {}",
            test.dim(),
            model.spec.input_dim
        )));
    }
    let (normal, novel) = (model.labels.normal(), model.labels.novel());
    let size = model.labels.size();
    let results: Vec<[Option<RepeatRecord>; 3]> = (0..cfg.repeats)
        .into_par_iter()
        .map(|repeat| -> Result<[Option<RepeatRecord>; 3]> {
            let split = draw_split(test, &classes, cfg.m, cfg.seed, repeat)?;
            let mut rows = split.holdout_novel.clone();
            rows.extend(split.holdout_normal.iter().cloned());
            let mut truth = vec![novel; split.holdout_novel.len()];
            truth.extend(vec![normal; split.holdout_normal.len()]);
            let record = |pred: Vec<usize>, truth: &[usize], classes: usize| -> Result<RepeatRecord> {
                let pairs: Vec<(usize, usize)> = truth.iter().copied().zip(pred).collect();
                let m = compute_metrics(&pairs, classes)?;
                Ok(RepeatRecord {
                    repeat,
                    split: split.class.clone(),
                    accuracy: m.accuracy,
                    macro_f1: m.macro_f1,
                    evaluated: pairs.len(),
                })
            };
            let steps = cfg.adapt_steps.unwrap_or(model.config.inner_steps);
            let tuned = model.adapt(&split.shots, steps)?;
            let pred: Vec<usize> = model.classify_rows(&tuned, &rows)?.into_iter().map(|p| p.0).collect();
            let fine = record(pred, &truth, size)?;
            let pred: Vec<usize> = model
                .classify_rows(&model.meta.theta, &rows)?
                .into_iter()
                .map(|p| p.0)
                .collect();
            let pre = record(pred, &truth, size)?;
            let scratch = if cfg.from_scratch {
                let fresh = from_scratch_model(model, &split.shots, cfg.seed, repeat)?;
                let tuned = fresh.adapt(&split.shots, steps)?;
                let pred: Vec<usize> = fresh.classify_rows(&tuned, &rows)?.into_iter().map(|p| p.0).collect();
                Some(record(pred, &truth, size)?)
            } else {
                None
            };
            Ok([Some(fine), Some(pre), scratch])
        })
        .collect::<Result<Vec<_>>>()?;
    let mut arms: [Vec<RepeatRecord>; 3] = Default::default();
    for r in results {
        for (arm, rec) in arms.iter_mut().zip(r) {
            arm.extend(rec);
        }
    }
    let [fine, pre, scratch] = arms;
    Ok(MshotReport {
        fine_tuned: ArmResult::new(fine),
        pre_trained: ArmResult::new(pre),
        from_scratch: cfg.from_scratch.then(|| ArmResult::new(scratch)),
    })
}

/// Meta-trains on `train` and runs the M-shot protocol on `test`'s classes.
pub fn run_crossdataset(
    train: &ClassPools,
    test: &ClassPools,
    episodes: &EpisodeConfig,
    cfg: &MshotConfig,
) -> Result<(MetaModel, MshotReport)> {
    if test.class_ids().is_empty() {
        return Err(Error::Data("target dataset has no anomaly classes".into()));
    }
    if train.dim() != test.dim() {
        return Err(Error::Data(format!(
            "feature schemas differ: {:?} vs {:?} columns",
            train.dim(),
            test.dim()
        )));
    }
    let (model, _) = meta_train(train, episodes)?;
    let report = run_mshot(&model, test, cfg)?;
    Ok((model, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StandardConfig {
    pub folds: usize,
    pub seed: u64,
}

impl Default for StandardConfig {
    fn default() -> Self {
        StandardConfig { folds: 10, seed: 0 }
    }
}

/// Fold index of every row, per class: a seeded shuffle dealt round-robin.
pub fn stratified_folds(pools: &ClassPools, folds: usize, seed: u64) -> Result<BTreeMap<String, Vec<usize>>> {
    if folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {folds}")));
    }
    let mut out = BTreeMap::new();
    let mut groups: Vec<(&str, usize)> = vec![(NORMAL_LABEL, pools.normal.len())];
    groups.extend(pools.anomalies.iter().map(|(c, v)| (c.as_str(), v.len())));
    for (c, n) in groups {
        if n < folds {
            return Err(Error::Data(format!(
                "class {c:?} has {n} flows, fewer than {folds} folds"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(seed, &format!("fold-{c}"), 0));
        let mut assign = vec![0; n];
        for (pos, &i) in order.iter().enumerate() {
            assign[i] = pos % folds;
        }
        out.insert(c.to_string(), assign);
    }
    Ok(out)
}

/// Per-fold results of the standard protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardReport {
    pub per_fold: Vec<RepeatRecord>,
    pub aggregate: Aggregate,
}

/// Stratified k-fold: meta-train on the other folds, detect on the held
/// fold with the pre-trained model (no adaptation).
///
/// Every held-out class was seen in training, so predictions are the most
/// probable of the anomaly and normal slots; the novel slot is not a candidate.
///
/// `episodes.k` is overridden by the number of anomaly classes.
pub fn run_standard(pools: &ClassPools, episodes: &EpisodeConfig, cfg: &StandardConfig) -> Result<StandardReport> {
    let assign = stratified_folds(pools, cfg.folds, cfg.seed)?;
    let classes = pools.class_ids();
    if classes.is_empty() {
        return Err(Error::Data("standard protocol needs at least one anomaly class".into()));
    }
    let ep = EpisodeConfig {
        k: classes.len(),
        ..episodes.clone()
    };
    let split = |rows: &[Vec<f64>], a: &[usize], fold: usize, held: bool| -> Vec<Vec<f64>> {
        rows.iter()
            .zip(a)
            .filter(|(_, &f)| (f == fold) == held)
            .map(|(r, _)| r.clone())
            .collect()
    };
    let mut per_fold = Vec::with_capacity(cfg.folds);
    for fold in 0..cfg.folds {
        let part = |held: bool| ClassPools {
            normal: split(&pools.normal, &assign[NORMAL_LABEL], fold, held),
            anomalies: pools
                .anomalies
                .iter()
                .map(|(c, v)| (c.clone(), split(v, &assign[c], fold, held)))
                .collect(),
        };
        let (train, test) = (part(false), part(true));
        let ep = EpisodeConfig {
            seed: rng::derive_seed(episodes.seed, "standard-fold", fold as u64),
            ..ep.clone()
        };
        let (model, _) = meta_train(&train, &ep)?;
        let mut rows = test.normal.clone();
        let mut truth = vec![model.labels.normal(); test.normal.len()];
        for (c, v) in &test.anomalies {
            let slot = model
                .labels
                .slot_of(c)
                .ok_or_else(|| Error::Data(format!("class {c:?} has no output slot")))?;
            rows.extend(v.iter().cloned());
            truth.extend(vec![slot; v.len()]);
        }
        let known = model.labels.novel();
        let pred = model.classify_rows(&model.meta.theta, &rows)?;
        let pairs: Vec<(usize, usize)> = truth
            .into_iter()
            .zip(pred.into_iter().map(|(_, p)| argmax(&p[..known])))
            .collect();
        let m = compute_metrics(&pairs, model.labels.size())?;
        per_fold.push(RepeatRecord {
            repeat: fold,
            split: format!("fold-{fold}"),
            accuracy: m.accuracy,
            macro_f1: m.macro_f1,
            evaluated: pairs.len(),
        });
    }
    let aggregate = Aggregate::of(&per_fold);
    Ok(StandardReport { per_fold, aggregate })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSet {
    Set1,
    Set2,
    Set3,
}

impl FeatureSet {
    pub const ALL: [FeatureSet; 3] = [FeatureSet::Set1, FeatureSet::Set2, FeatureSet::Set3];

    pub fn dim(self) -> usize {
        match self {
            FeatureSet::Set1 => crate::features::STAT_FEATURES,
            FeatureSet::Set2 => crate::features::SELECTED_FEATURES,
            FeatureSet::Set3 => crate::autoencoder::COMBINED_FEATURES,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FeatureSet::Set1 => "set1",
            FeatureSet::Set2 => "set2",
            FeatureSet::Set3 => "set3",
        }
    }
}

impl std::str::FromStr for FeatureSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "set1" => Ok(FeatureSet::Set1),
            "set2" => Ok(FeatureSet::Set2),
            "set3" => Ok(FeatureSet::Set3),
            other => Err(Error::Argument(format!("unknown feature set {other:?}"))),
        }
    }
}

/// Feature rows of `flows` in the requested set; set 3 needs an autoencoder.
pub fn feature_rows(flows: &[Flow], set: FeatureSet, ae: Option<&AutoencoderModel>) -> Result<Vec<Vec<f64>>> {
    let stats: Vec<_> = flows.iter().map(extract_stat_features).collect();
    match set {
        FeatureSet::Set1 => Ok(stats.iter().map(|s| s.values().to_vec()).collect()),
        FeatureSet::Set2 => stats.iter().map(|s| project(s, &CANONICAL_SELECTION)).collect(),
        FeatureSet::Set3 => {
            let ae = ae.ok_or_else(|| Error::Config("feature set 3 needs an autoencoder model".into()))?;
            let matrices: Vec<_> = flows.iter().map(|f| build_flow_matrix(f, ae.spec.b)).collect();
            let latents = ae.encode_batch(&matrices)?;
            stats
                .iter()
                .zip(&latents)
                .map(|(s, z)| Ok(combine_features(&project_selected(s, &CANONICAL_SELECTION)?, z).into_values()))
                .collect()
        }
    }
}

/// Splits labeled rows into the pools of the listed classes (plus normal).
pub fn pools_for(rows: &[Vec<f64>], labels: &[String], classes: &[String]) -> Result<ClassPools> {
    Ok(ClassPools::from_labeled(rows, labels)?.restricted(classes))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub autoencoder: AutoencoderSpec,
    pub ae_training: AeTrainConfig,
    /// Flows used to fit the autoencoder; all training-class flows when `None`.
    pub ae_flows: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub feature_set: FeatureSet,
    pub input_dim: usize,
    pub report: MshotReport,
}

/// Trains an autoencoder on meta-training flows only (normal and training
/// classes), using an evenly spaced subset when `limit` is set.
pub fn fit_autoencoder(
    flows: &[LabeledFlow],
    train_classes: &[String],
    spec: &AutoencoderSpec,
    cfg: &AeTrainConfig,
    limit: Option<usize>,
) -> Result<AutoencoderModel> {
    let eligible: Vec<&Flow> = flows
        .iter()
        .filter(|f| f.label == NORMAL_LABEL || train_classes.contains(&f.label))
        .map(|f| &f.flow)
        .collect();
    let chosen: Vec<&Flow> = match limit {
        Some(n) if n < eligible.len() => (0..n).map(|i| eligible[i * eligible.len() / n]).collect(),
        _ => eligible,
    };
    let matrices: Vec<_> = chosen.iter().map(|f| build_flow_matrix(f, spec.b)).collect();
    Ok(train_autoencoder(&matrices, spec, cfg)?.model)
}

/// Runs meta-training and the M-shot protocol once per feature set.
pub fn run_ablation(
    flows: &[LabeledFlow],
    train_classes: &[String],
    novel_classes: &[String],
    episodes: &EpisodeConfig,
    mshot: &MshotConfig,
    cfg: &AblationConfig,
) -> Result<Vec<AblationRow>> {
    let ae = fit_autoencoder(flows, train_classes, &cfg.autoencoder, &cfg.ae_training, cfg.ae_flows)?;
    let plain: Vec<Flow> = flows.iter().map(|f| f.flow.clone()).collect();
    let labels: Vec<String> = flows.iter().map(|f| f.label.clone()).collect();
    let mut rows_out = Vec::with_capacity(3);
    for set in FeatureSet::ALL {
        let rows = feature_rows(&plain, set, Some(&ae))?;
        let train = pools_for(&rows, &labels, train_classes)?;
        let test = pools_for(&rows, &labels, novel_classes)?;
        let (model, _) = meta_train(&train, episodes)?;
        let report = run_mshot(&model, &test, mshot)?;
        rows_out.push(AblationRow {
            feature_set: set,
            input_dim: model.spec.input_dim,
            report,
        });
    }
    Ok(rows_out)
}

/// Labeled rows read from a CIC-style feature CSV.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExternalDataset {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<String>,
}

/// Reads a feature CSV with a `Label` column (CICFlowMeter style).
///
/// Header names are trimmed; identifier columns (flow id, addresses,
/// timestamp) and any non-numeric column are dropped. `BENIGN` maps to
/// the normal label, infinities and blanks to 0.
pub fn read_cic_csv<R: Read>(input: R) -> Result<ExternalDataset> {
    let mut r = csv::ReaderBuilder::new().flexible(false).from_reader(input);
    let header: Vec<String> = r
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let label_col = header
        .iter()
        .position(|h| h.eq_ignore_ascii_case("label"))
        .ok_or_else(|| Error::Parse {
            line: 1,
            message: "no Label column".into(),
        })?;
    let skip = ["flow id", "source ip", "src ip", "destination ip", "dst ip", "timestamp"];
    let mut records = Vec::new();
    for (i, rec) in r.records().enumerate() {
        records.push(rec.map_err(|e| Error::Parse {
            line: i as u64 + 2,
            message: e.to_string(),
        })?);
    }
    let parse = |s: &str| -> Option<f64> {
        let t = s.trim();
        if t.is_empty() || t.eq_ignore_ascii_case("nan") {
            return Some(0.0);
        }
        if t.eq_ignore_ascii_case("infinity") || t.eq_ignore_ascii_case("inf") {
            return Some(0.0);
        }
        t.parse::<f64>().ok().map(|v| if v.is_finite() { v } else { 0.0 })
    };
    let keep: Vec<usize> = (0..header.len())
        .filter(|&j| j != label_col && !skip.contains(&header[j].to_ascii_lowercase().as_str()))
        .filter(|&j| records.iter().all(|rec| parse(&rec[j]).is_some()))
        .collect();
    let mut out = ExternalDataset {
        columns: keep.iter().map(|&j| header[j].clone()).collect(),
        ..ExternalDataset::default()
    };
    for rec in &records {
        out.rows.push(keep.iter().map(|&j| parse(&rec[j]).unwrap_or(0.0)).collect());
        let label = rec[label_col].trim();
        out.labels.push(if label.eq_ignore_ascii_case("benign") {
            NORMAL_LABEL.to_string()
        } else {
            label.to_string()
        });
    }
    Ok(out)
}
