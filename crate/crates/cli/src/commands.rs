use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use uad_core::autoencoder::{build_flow_matrix, train_autoencoder, LATENT_DIM};
use uad_core::classifier::train_classifier;
use uad_core::eval::{
    feature_rows, run_ablation, run_crossdataset, run_mshot, run_standard, AblationConfig, ArmResult,
    MshotReport,
};
use uad_core::features::{
    extract_stat_features, project, selected_names, stat_feature_names, FeatureTable, CANONICAL_SELECTION,
    STAT_FEATURES,
};
use uad_core::flow::{assemble_flows, ingest_packets, write_packet_csv, CaptureFormat};
use uad_core::meta::{meta_train as train_meta, ClassPools, FewShot, MetaModel, NORMAL_LABEL};
use uad_core::model_io::{load_autoencoder, load_meta_model, save_autoencoder, save_meta_model};
use uad_core::selection::{permutation_importance, select_features, ImportanceReport};
use uad_core::synthetic::{generate_task_family, packets_of, LabeledFlow};
use uad_core::{rng, Error, FeatureSet, StatFeatureVector};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::io::{self, UNLABELED};
use crate::{InputFormat, Protocol, SetArg};

#[derive(Debug, Serialize, Deserialize)]
pub struct Family {
    pub train_classes: Vec<String>,
    pub novel_classes: Vec<String>,
}

#[derive(Deserialize)]
struct SelectionFile {
    kept_indices: Vec<usize>,
}

#[allow(clippy::too_many_arguments)]
pub fn extract(
    cfg: &RunConfig,
    input: &Path,
    format: InputFormat,
    out: &Path,
    set: SetArg,
    selection: Option<&Path>,
    label: Option<String>,
    flows_out: Option<&Path>,
) -> Result<(), CliError> {
    let mut flows = match format {
        InputFormat::FlowsJsonl => io::read_flows(input)?,
        InputFormat::Pcap | InputFormat::PacketCsv => {
            let fmt = if format == InputFormat::Pcap {
                CaptureFormat::Pcap
            } else {
                CaptureFormat::PacketCsv
            };
            let ingested = ingest_packets(input, fmt)?;
            let s = ingested.stats;
            if s.non_ip + s.fragments + s.truncated > 0 {
                log::warn!(
                    "skipped {} non-IP, {} fragment and {} truncated frames",
                    s.non_ip,
                    s.fragments,
                    s.truncated
                );
            }
            assemble_flows(ingested.packets, &cfg.flow.timeouts()?)
                .into_iter()
                .map(|flow| LabeledFlow {
                    flow,
                    label: UNLABELED.into(),
                })
                .collect()
        }
    };
    if let Some(l) = label {
        for f in flows.iter_mut() {
            f.label = l.clone();
        }
    }
    let stats: Vec<StatFeatureVector> = flows.iter().map(|f| extract_stat_features(&f.flow)).collect();
    let labels: Vec<String> = flows.iter().map(|f| f.label.clone()).collect();
    let table = match set {
        SetArg::Set1 => FeatureTable {
            names: stat_feature_names(),
            rows: stats.iter().map(StatFeatureVector::to_options).collect(),
            labels,
        },
        SetArg::Set2 => {
            let sel = match selection {
                Some(p) => io::read_json::<SelectionFile>(p)?.kept_indices,
                None => CANONICAL_SELECTION.to_vec(),
            };
            let names = selected_names(&sel)?;
            let rows = stats
                .iter()
                .map(|s| Ok(project(s, &sel)?.into_iter().map(Some).collect()))
                .collect::<Result<Vec<_>, Error>>()?;
            FeatureTable { names, rows, labels }
        }
    };
    io::write_table(out, &table)?;
    if let Some(p) = flows_out {
        io::write_flows(p, &flows)?;
    }
    io::write_resolved_config(out, cfg)?;
    println!("{} flows, {} features -> {}", table.len(), table.dim(), out.display());
    Ok(())
}

fn class_indices(labels: &[String]) -> (Vec<usize>, usize) {
    let classes: BTreeSet<&String> = labels.iter().collect();
    let classes: Vec<&String> = classes.into_iter().collect();
    let idx = labels
        .iter()
        .map(|l| classes.binary_search(&l).expect("label is in its own class set"))
        .collect();
    (idx, classes.len())
}

pub fn select(cfg: &RunConfig, data: &Path, importance: &[PathBuf], out: &Path) -> Result<(), CliError> {
    let table = io::read_table(data)?;
    if table.dim() != STAT_FEATURES {
        return Err(Error::Schema(format!(
            "selection needs the {STAT_FEATURES} statistics (extract --set set1), {} has {} columns",
            data.display(),
            table.dim()
        ))
        .into());
    }
    let dataset = table
        .rows
        .iter()
        .map(|r| StatFeatureVector::from_options(r))
        .collect::<Result<Vec<_>, Error>>()?;
    let reports = if importance.is_empty() {
        let (labels, classes) = class_indices(&table.labels);
        if classes < 2 {
            return Err(Error::Data("permutation importance needs at least two labels".into()).into());
        }
        let rows = table.dense_rows();
        let mut r = rng::stream(cfg.seed, "importance", 0);
        let model = train_classifier(&rows, &labels, classes, &cfg.importance, &mut r)?;
        let mut report = permutation_importance(&model, &rows, &labels, rng::derive_seed(cfg.seed, "importance", 1))?;
        report.algorithm = "permutation-mlp".into();
        vec![report]
    } else {
        importance
            .iter()
            .map(|p| {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                Ok(ImportanceReport::from_json(&text)?)
            })
            .collect::<Result<Vec<_>, CliError>>()?
    };
    let result = select_features(&dataset, &reports, &cfg.selection)?;
    let mut v = serde_json::to_value(&result).map_err(|e| Error::Format(e.to_string()))?;
    v["kept_names"] = json!(selected_names(&result.kept_indices)?);
    io::write_json(out, &v)?;
    io::write_resolved_config(out, cfg)?;
    println!(
        "kept {} of {STAT_FEATURES} features -> {}",
        result.kept_indices.len(),
        out.display()
    );
    Ok(())
}

pub fn train_ae(cfg: &RunConfig, flows: &Path, out: &Path) -> Result<(), CliError> {
    let flows = io::read_flows(flows)?;
    let matrices: Vec<_> = flows
        .iter()
        .map(|f| build_flow_matrix(&f.flow, cfg.autoencoder.b))
        .collect();
    let trained = train_autoencoder(&matrices, &cfg.autoencoder, &cfg.ae_training)?;
    save_autoencoder(out, &trained.model)?;
    io::write_resolved_config(out, cfg)?;
    if let (Some(first), Some(last)) = (trained.history.first(), trained.history.last()) {
        println!(
            "{} flows, {} epochs, loss {first:.6} -> {last:.6}",
            matrices.len(),
            trained.history.len()
        );
    }
    Ok(())
}

pub fn encode(cfg: &RunConfig, flows: &Path, ae: &Path, out: &Path) -> Result<(), CliError> {
    let flows = io::read_flows(flows)?;
    let ae = load_autoencoder(ae)?;
    let plain: Vec<_> = flows.iter().map(|f| f.flow.clone()).collect();
    let rows = feature_rows(&plain, FeatureSet::Set3, Some(&ae))?;
    let mut names = selected_names(&CANONICAL_SELECTION)?;
    names.extend((0..LATENT_DIM).map(|i| format!("latent_{i}")));
    let table = FeatureTable {
        names,
        rows: rows.into_iter().map(|r| r.into_iter().map(Some).collect()).collect(),
        labels: flows.iter().map(|f| f.label.clone()).collect(),
    };
    io::write_table(out, &table)?;
    io::write_resolved_config(out, cfg)?;
    println!("{} flows, {} features -> {}", table.len(), table.dim(), out.display());
    Ok(())
}

fn labeled_pools(table: &FeatureTable) -> Result<ClassPools, CliError> {
    Ok(ClassPools::from_labeled(&table.dense_rows(), &table.labels)?)
}

pub fn meta_train(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    classes: Option<Vec<String>>,
    family: Option<&Path>,
) -> Result<(), CliError> {
    let table = io::read_table(data)?;
    let mut pools = labeled_pools(&table)?;
    let chosen = match (classes, family) {
        (Some(c), _) => Some(c),
        (None, Some(f)) => Some(io::read_json::<Family>(f)?.train_classes),
        (None, None) => None,
    };
    if let Some(c) = chosen {
        if let Some(missing) = c.iter().find(|c| !pools.anomalies.contains_key(*c)) {
            return Err(Error::Data(format!("class {missing:?} has no rows in {}", data.display())).into());
        }
        pools = pools.restricted(&c);
    }
    let (model, log) = train_meta(&pools, &cfg.episodes)?;
    save_meta_model(out, &model)?;
    io::write_resolved_config(out, cfg)?;
    let tail = &log[log.len().saturating_sub(10)..];
    let last = tail.iter().map(|e| e.mean_val_loss).sum::<f64>() / tail.len().max(1) as f64;
    println!(
        "{} episodes on {} classes, final validation loss {last:.5} -> {}",
        log.len(),
        pools.anomalies.len(),
        out.display()
    );
    Ok(())
}

fn check_dim(model: &MetaModel, table: &FeatureTable, path: &Path) -> Result<(), CliError> {
    if table.dim() != model.spec.input_dim {
        return Err(Error::Data(format!(
            "{} has {} features, model expects {}",
            path.display(),
            table.dim(),
            model.spec.input_dim
        ))
        .into());
    }
    Ok(())
}

pub fn adapt(cfg: &RunConfig, model: &Path, shots: &Path, out: &Path, steps: Option<usize>) -> Result<(), CliError> {
    let mut m = load_meta_model(model)?;
    let table = io::read_table(shots)?;
    check_dim(&m, &table, shots)?;
    let mut few = FewShot::default();
    for (row, label) in table.dense_rows().into_iter().zip(&table.labels) {
        if label == NORMAL_LABEL {
            few.normal.push(row);
        } else {
            few.novel.push(row);
        }
    }
    let steps = steps.unwrap_or(m.config.inner_steps);
    m.meta.theta = m.adapt(&few, steps)?;
    save_meta_model(out, &m)?;
    io::write_resolved_config(out, cfg)?;
    println!(
        "adapted on {} novel and {} normal shots, {steps} steps -> {}",
        few.novel.len(),
        few.normal.len(),
        out.display()
    );
    Ok(())
}

pub fn detect(cfg: &RunConfig, model: &Path, data: &Path, out: &Path) -> Result<(), CliError> {
    let m = load_meta_model(model)?;
    let table = io::read_table(data)?;
    check_dim(&m, &table, data)?;
    let preds = m.classify_rows(&m.meta.theta, &table.dense_rows())?;
    let mut w = csv_writer(out)?;
    let mut header = vec!["row".to_string(), "label".into(), "predicted".into()];
    header.extend((0..m.labels.size()).map(|s| format!("p_{}", m.slot_name(s))));
    write_record(&mut w, &header)?;
    for (i, ((slot, p), label)) in preds.iter().zip(&table.labels).enumerate() {
        let mut rec = vec![i.to_string(), label.clone(), m.slot_name(*slot)];
        rec.extend(p.iter().map(|v| format!("{v:?}")));
        write_record(&mut w, &rec)?;
    }
    w.flush().map_err(|e| CliError::io(out, e))?;
    io::write_resolved_config(out, cfg)?;
    let anomalous = preds.iter().filter(|(s, _)| *s != m.labels.normal()).count();
    println!("{} rows, {anomalous} flagged anomalous -> {}", preds.len(), out.display());
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::io::BufWriter<std::fs::File>>, CliError> {
    Ok(csv::Writer::from_writer(io::create(path)?))
}

fn write_record<W: std::io::Write>(w: &mut csv::Writer<W>, rec: &[String]) -> Result<(), CliError> {
    w.write_record(rec).map_err(|e| Error::Format(e.to_string()).into())
}

pub struct EvalInputs {
    pub model: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub source: Option<PathBuf>,
    pub flows: Option<PathBuf>,
    pub family: Option<PathBuf>,
    pub classes: Option<Vec<String>>,
}

impl EvalInputs {
    /// Usage error naming every required argument the protocol is missing.
    pub fn check(&self, protocol: Protocol) -> Result<(), CliError> {
        let mut missing = Vec::new();
        match protocol {
            Protocol::Mshot => {
                if self.model.is_none() {
                    missing.push("--model <FILE>");
                }
                if self.data.is_none() {
                    missing.push("--data <CSV>");
                }
            }
            Protocol::Standard => {
                if self.data.is_none() {
                    missing.push("--data <CSV>");
                }
            }
            Protocol::Crossdataset => {
                if self.model.is_none() && self.source.is_none() {
                    missing.push("--model <FILE> (or --source <CSV>)");
                }
                if self.data.is_none() {
                    missing.push("--data <CSV>");
                }
            }
            Protocol::Ablation => {
                if self.flows.is_none() {
                    missing.push("--flows <JSONL>");
                }
                if self.family.is_none() {
                    missing.push("--family <FILE>");
                }
            }
        }
        if missing.is_empty() {
            Ok(())
        } else {
            Err(CliError::Usage(format!(
                "evaluate {}: missing required arguments {}",
                protocol_name(protocol),
                missing.join(", ")
            )))
        }
    }
}

fn protocol_name(p: Protocol) -> &'static str {
    match p {
        Protocol::Mshot => "mshot",
        Protocol::Standard => "standard",
        Protocol::Crossdataset => "crossdataset",
        Protocol::Ablation => "ablation",
    }
}

fn arm_json(arm: &ArmResult) -> Value {
    json!({"per_repeat": arm.per_repeat, "aggregate": arm.aggregate})
}

fn mshot_json(report: &MshotReport) -> Value {
    let mut arms = json!({
        "fine_tuned": arm_json(&report.fine_tuned),
        "pre_trained": arm_json(&report.pre_trained),
    });
    if let Some(s) = &report.from_scratch {
        arms["from_scratch"] = arm_json(s);
    }
    json!({
        "per_repeat": report.fine_tuned.per_repeat,
        "aggregate": report.fine_tuned.aggregate,
        "arms": arms,
    })
}

fn summary_rows(report: &MshotReport, prefix: &str) -> Vec<(String, uad_core::Aggregate)> {
    let mut rows = vec![
        (format!("{prefix}fine_tuned"), report.fine_tuned.aggregate),
        (format!("{prefix}pre_trained"), report.pre_trained.aggregate),
    ];
    if let Some(s) = &report.from_scratch {
        rows.push((format!("{prefix}from_scratch"), s.aggregate));
    }
    rows
}

/// Novel classes for an M-shot run: explicit, from the family file, or every
/// anomaly class of the data the model was not trained on.
fn test_classes(inputs: &EvalInputs, pools: &ClassPools, model: Option<&MetaModel>) -> Result<Vec<String>, CliError> {
    if let Some(c) = &inputs.classes {
        return Ok(c.clone());
    }
    if let Some(f) = &inputs.family {
        return Ok(io::read_json::<Family>(f)?.novel_classes);
    }
    let seen: &[String] = model.map(|m| m.labels.classes.as_slice()).unwrap_or(&[]);
    Ok(pools.class_ids().into_iter().filter(|c| !seen.contains(c)).collect())
}

pub fn evaluate(
    cfg: &RunConfig,
    protocol: Protocol,
    inputs: &EvalInputs,
    out: Option<&Path>,
    csv_out: Option<&Path>,
) -> Result<(), CliError> {
    let mut summary = Vec::new();
    let body = match protocol {
        Protocol::Mshot | Protocol::Crossdataset => {
            let data = inputs.data.as_deref().expect("checked");
            let table = io::read_table(data)?;
            let all = labeled_pools(&table)?;
            let report = match (&inputs.model, &inputs.source) {
                (Some(model), _) => {
                    let model = load_meta_model(model)?;
                    check_dim(&model, &table, data)?;
                    let classes = test_classes(inputs, &all, Some(&model))?;
                    run_mshot(&model, &all.restricted(&classes), &cfg.mshot)?
                }
                (None, Some(source)) => {
                    let train = labeled_pools(&io::read_table(source)?)?;
                    let classes = test_classes(inputs, &all, None)?;
                    run_crossdataset(&train, &all.restricted(&classes), &cfg.episodes, &cfg.mshot)?.1
                }
                (None, None) => unreachable!("checked"),
            };
            summary = summary_rows(&report, "");
            mshot_json(&report)
        }
        Protocol::Standard => {
            let table = io::read_table(inputs.data.as_deref().expect("checked"))?;
            let mut pools = labeled_pools(&table)?;
            if let Some(c) = &inputs.classes {
                pools = pools.restricted(c);
            }
            let report = run_standard(&pools, &cfg.episodes, &cfg.standard)?;
            summary.push(("standard".into(), report.aggregate));
            json!({"per_repeat": report.per_fold, "aggregate": report.aggregate})
        }
        Protocol::Ablation => {
            let flows = io::read_flows(inputs.flows.as_deref().expect("checked"))?;
            let family: Family = io::read_json(inputs.family.as_deref().expect("checked"))?;
            let ab = AblationConfig {
                autoencoder: cfg.autoencoder.clone(),
                ae_training: cfg.ae_training.clone(),
                ae_flows: cfg.ae_flows,
            };
            let rows = run_ablation(
                &flows,
                &family.train_classes,
                &family.novel_classes,
                &cfg.episodes,
                &cfg.mshot,
                &ab,
            )?;
            let rows: Vec<Value> = rows
                .iter()
                .map(|r| {
                    summary.extend(summary_rows(&r.report, &format!("{}/", r.feature_set.name())));
                    let mut v = mshot_json(&r.report);
                    v["feature_set"] = json!(r.feature_set);
                    v["input_dim"] = json!(r.input_dim);
                    v
                })
                .collect();
            json!({ "rows": rows })
        }
    };
    let mut result = json!({"protocol": protocol_name(protocol), "config": cfg});
    for (k, v) in body.as_object().expect("object").iter() {
        result[k] = v.clone();
    }
    match out {
        Some(p) => {
            io::write_json(p, &result)?;
            io::write_resolved_config(p, cfg)?;
        }
        None => print!("{}", io::canonical_json(&result)?),
    }
    if let Some(p) = csv_out {
        let mut w = csv_writer(p)?;
        write_record(
            &mut w,
            &["row", "accuracy_mean", "accuracy_std", "f1_mean", "f1_std"].map(String::from),
        )?;
        for (name, a) in &summary {
            write_record(
                &mut w,
                &[
                    name.clone(),
                    format!("{:?}", a.accuracy_mean),
                    format!("{:?}", a.accuracy_std),
                    format!("{:?}", a.f1_mean),
                    format!("{:?}", a.f1_std),
                ],
            )?;
        }
        w.flush().map_err(|e| CliError::io(p, e))?;
    }
    for (name, a) in &summary {
        eprintln!(
            "{name}: accuracy {:.4} ± {:.4}, F1 {:.4} ± {:.4}",
            a.accuracy_mean, a.accuracy_std, a.f1_mean, a.f1_std
        );
    }
    Ok(())
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let family = generate_task_family(&cfg.synthetic)?;
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let packets_path = out.join("packets.csv");
    write_packet_csv(io::create(&packets_path)?, &packets_of(&family.flows))?;
    io::write_flows(&out.join("flows.jsonl"), &family.flows)?;
    io::write_json(
        &out.join("family.json"),
        &Family {
            train_classes: family.train_classes.clone(),
            novel_classes: family.novel_classes.clone(),
        },
    )?;
    io::write_resolved_config(out, cfg)?;
    println!(
        "{} flows, {} training and {} novel classes -> {}",
        family.flows.len(),
        family.train_classes.len(),
        family.novel_classes.len(),
        out.display()
    );
    Ok(())
}
