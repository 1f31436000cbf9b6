#![allow(dead_code)]

use std::collections::BTreeSet;
use std::net::IpAddr;

use rand::Rng as _;
use uad_core::autodiff::{
    backbone_logits, cross_entropy, cross_entropy_sum, forward_backbone, grad, grad_through_update, lstm_graph, mse,
    mse_graph, one_hot, sgd_step, BackboneSpec, Graph, LstmSpec, MetaGradMode, ParamSet, Tensor, Var,
};
use uad_core::autoencoder::build_flow_matrix;
use uad_core::features::extract_stat_features;
use uad_core::flow::{Flow, PacketRecord, Protocol, TcpFlags};
use uad_core::meta::{adapt_on, inner_update, task_meta_gradient, LabeledBatch, MetaParams, Task};
use uad_core::rng;
use uad_core::selection::{cumulative_importance, ImportanceReport};
use uad_core::synthetic::{generate_flows, SyntheticSpec};

pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }

    pub fn assert(&self) {
        assert!(self.pass, "{}", self.detail);
    }
}

pub const FD_STEP: f64 = 1e-5;

/// Central differences of `f` over every flattened entry of `params`.
pub fn fd_gradient(params: &ParamSet, f: impl Fn(&ParamSet) -> f64) -> Vec<f64> {
    let flat = params.flatten();
    (0..flat.len())
        .map(|i| {
            let mut up = flat.clone();
            up[i] += FD_STEP;
            let mut down = flat.clone();
            down[i] -= FD_STEP;
            let fu = f(&params.unflatten(&up).unwrap());
            let fd = f(&params.unflatten(&down).unwrap());
            (fu - fd) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Largest `|a − b| / max(|a|, |b|, 1e-6)`.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

pub fn random_tensor(shape: &[usize], scale: f64, r: &mut rng::Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(-scale..scale)).collect()).unwrap()
}

fn random_labels(n: usize, classes: usize, r: &mut rng::Rng) -> Vec<usize> {
    (0..n).map(|_| r.random_range(0..classes)).collect()
}

fn backbone_case(r: &mut rng::Rng) -> (String, f64) {
    let input = r.random_range(2..6);
    let depth = r.random_range(1..3);
    let hidden: Vec<usize> = (0..depth).map(|_| r.random_range(2..6)).collect();
    let k = r.random_range(1..4);
    let spec = BackboneSpec::with_hidden(input, hidden.clone(), k);
    let params = spec.init(r);
    let batch = r.random_range(1..5);
    let x = random_tensor(&[batch, input], 1.0, r);
    let labels = random_labels(batch, k + 2, r);
    let y = one_hot(&labels, k + 2);
    let (_, g) = grad(&params, |g, p| {
        let xv = g.input(&x);
        let yv = g.input(&y);
        let logits = backbone_logits(g, p, xv);
        Ok(cross_entropy_sum(g, logits, yv))
    })
    .unwrap();
    let fd = fd_gradient(&params, |p| {
        let probs = forward_backbone(p, &spec, &x).unwrap();
        (0..batch)
            .map(|i| cross_entropy(probs.row(i), y.row(i)).unwrap())
            .sum()
    });
    (
        format!("backbone {input}→{hidden:?}→{} batch {batch}", k + 2),
        max_rel_err(&g.flatten(), &fd),
    )
}

fn mse_case(r: &mut rng::Rng) -> (String, f64) {
    let rows = r.random_range(1..5);
    let cols = r.random_range(1..5);
    let norm = r.random_range(0.5..4.0);
    let mut params = ParamSet::new();
    params.push("a", random_tensor(&[rows, cols], 2.0, r)).unwrap();
    let b = random_tensor(&[rows, cols], 2.0, r);
    let (_, g) = grad(&params, |g, p| {
        let bv = g.input(&b);
        Ok(mse_graph(g, p[0], bv, norm))
    })
    .unwrap();
    let fd = fd_gradient(&params, |p| mse(p.get("a").unwrap(), &b, norm).unwrap());
    (format!("mse {rows}×{cols}"), max_rel_err(&g.flatten(), &fd))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Plain-loop LSTM stack; returns the final `(h, c)` of every layer per batch row.
pub fn lstm_reference(params: &ParamSet, spec: &LstmSpec, seq: &[Tensor]) -> Vec<Vec<(Vec<f64>, Vec<f64>)>> {
    let batch = seq[0].rows();
    let mut out = Vec::new();
    for row in 0..batch {
        let mut inputs: Vec<Vec<f64>> = seq.iter().map(|x| x.row(row).to_vec()).collect();
        let mut finals = Vec::new();
        for (l, &h) in spec.hidden.iter().enumerate() {
            let wx = params.get(&format!("p.l{l}.w_x")).unwrap();
            let wh = params.get(&format!("p.l{l}.w_h")).unwrap();
            let b = params.get(&format!("p.l{l}.b")).unwrap();
            let mut hs = vec![0.0; h];
            let mut cs = vec![0.0; h];
            let mut outs = Vec::new();
            for x in &inputs {
                let z: Vec<f64> = (0..4 * h)
                    .map(|j| {
                        let mut s = b.data()[j];
                        for (i, xi) in x.iter().enumerate() {
                            s += xi * wx.data()[i * 4 * h + j];
                        }
                        for (i, hi) in hs.iter().enumerate() {
                            s += hi * wh.data()[i * 4 * h + j];
                        }
                        s
                    })
                    .collect();
                for j in 0..h {
                    let ig = sigmoid(z[j]);
                    let fg = sigmoid(z[h + j]);
                    let gg = z[2 * h + j].tanh();
                    let og = sigmoid(z[3 * h + j]);
                    cs[j] = fg * cs[j] + ig * gg;
                    hs[j] = og * cs[j].tanh();
                }
                outs.push(hs.clone());
            }
            finals.push((hs, cs));
            inputs = outs;
        }
        out.push(finals);
    }
    out
}

fn lstm_case(r: &mut rng::Rng) -> (String, f64) {
    let input = r.random_range(1..4);
    let layers = r.random_range(1..3);
    let hidden: Vec<usize> = (0..layers).map(|_| r.random_range(2..4)).collect();
    let steps = r.random_range(1..4);
    let batch = r.random_range(1..3);
    let spec = LstmSpec {
        input,
        hidden: hidden.clone(),
    };
    let mut params = ParamSet::new();
    spec.init_into(&mut params, "p", r).unwrap();
    let params = params.map(|v| v + 0.1);
    let seq: Vec<Tensor> = (0..steps).map(|_| random_tensor(&[batch, input], 1.0, r)).collect();
    let (_, g) = grad(&params, |g, bound| {
        let layers = spec.vars(&params, bound, "p")?;
        let xs: Vec<Var> = seq.iter().map(|x| g.input(x)).collect();
        let out = lstm_graph(g, &layers, &spec.hidden, &xs);
        let mut total: Option<Var> = None;
        for &(h, c) in &out.final_states {
            let hs = g.square(h);
            let hs = g.sum(hs);
            let cs = g.sum(c);
            let s = g.add(hs, cs);
            total = Some(match total {
                Some(t) => g.add(t, s),
                None => s,
            });
        }
        Ok(total.unwrap())
    })
    .unwrap();
    let fd = fd_gradient(&params, |p| {
        lstm_reference(p, &spec, &seq)
            .iter()
            .flatten()
            .map(|(h, c)| h.iter().map(|v| v * v).sum::<f64>() + c.iter().sum::<f64>())
            .sum()
    });
    (
        format!("lstm {input}→{hidden:?} steps {steps} batch {batch}"),
        max_rel_err(&g.flatten(), &fd),
    )
}

/// Reverse-mode gradients of the backbone cross-entropy, MSE and LSTM
/// kernels against central differences of independent forward code.
pub fn gradient_exactness(shapes_per_kernel: usize) -> Outcome {
    let mut r = rng::stream(11, "gradcheck", 0);
    let mut worst = (0.0, String::new());
    let mut count = 0;
    for _ in 0..shapes_per_kernel {
        for (name, err) in [backbone_case(&mut r), mse_case(&mut r), lstm_case(&mut r)] {
            count += 1;
            if err > worst.0 || worst.1.is_empty() {
                worst = (err, name);
            }
        }
    }
    Outcome::new(
        worst.0 < 1e-4,
        format!("{count} shapes, max relative error {:.2e} ({})", worst.0, worst.1),
    )
}

pub fn scalar_params(v: f64) -> ParamSet {
    let mut p = ParamSet::new();
    p.push("w", Tensor::vector(vec![v])).unwrap();
    p
}

/// `½(θ − 1)²` on a one-entry parameter.
pub fn half_sq_shifted(g: &mut Graph, p: &[Var]) -> uad_core::Result<Var> {
    let d = g.affine(p[0], 1.0, -1.0);
    let s = g.square(d);
    let s = g.sum(s);
    Ok(g.scale(s, 0.5))
}

/// `½θ²` on a one-entry parameter.
pub fn half_sq(g: &mut Graph, p: &[Var]) -> uad_core::Result<Var> {
    let s = g.square(p[0]);
    let s = g.sum(s);
    Ok(g.scale(s, 0.5))
}

/// The scalar meta-gradient and its outer step: `(dθ, dα, θ_new, α_new)`.
pub fn scalar_meta_example() -> (f64, f64, f64, f64) {
    let theta = scalar_params(2.0);
    let alpha = scalar_params(0.5);
    let mg = grad_through_update(&theta, &alpha, half_sq_shifted, half_sq, 1, MetaGradMode::Exact).unwrap();
    let t = sgd_step(&theta, &mg.theta, 0.1).unwrap();
    let a = sgd_step(&alpha, &mg.alpha, 0.1).unwrap();
    (mg.theta.flatten()[0], mg.alpha.flatten()[0], t.flatten()[0], a.flatten()[0])
}

pub fn batch(rows: usize, dim: usize, classes: usize, r: &mut rng::Rng) -> LabeledBatch {
    let x: Vec<Vec<f64>> = (0..rows)
        .map(|_| (0..dim).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect();
    LabeledBatch::new(&x, random_labels(rows, classes, r)).unwrap()
}

/// A small backbone (at most 100 parameters) with a random task.
pub fn small_task(seed: u64) -> (BackboneSpec, MetaParams, Task) {
    let mut r = rng::stream(seed, "small-task", 0);
    let spec = BackboneSpec::with_hidden(3, vec![4], 2);
    let theta = spec.init(&mut r);
    let alpha = theta.map(|_| 0.0).unflatten(
        &(0..theta.total_len())
            .map(|_| r.random_range(0.05..0.5))
            .collect::<Vec<_>>(),
    )
    .unwrap();
    let classes = spec.output_dim();
    let task = Task {
        class_id: format!("task-{seed}"),
        label: 0,
        support: batch(4, 3, classes, &mut r),
        validation: batch(4, 3, classes, &mut r),
    };
    (spec, MetaParams::new(theta, alpha).unwrap(), task)
}

pub fn batch_loss(theta: &ParamSet, spec: &BackboneSpec, b: &LabeledBatch) -> f64 {
    let probs = forward_backbone(theta, spec, &b.x).unwrap();
    let y = one_hot(&b.labels, spec.output_dim());
    (0..b.len()).map(|i| cross_entropy(probs.row(i), y.row(i)).unwrap()).sum()
}

/// Validation loss after `steps` inner updates, as a function of `(θ, α)`.
pub fn composed_loss(meta: &MetaParams, spec: &BackboneSpec, task: &Task, steps: usize) -> f64 {
    let adapted = adapt_on(meta, spec, &task.support, steps).unwrap();
    batch_loss(&adapted, spec, &task.validation)
}

/// Exact meta-gradients against central differences of the composed map,
/// plus the closed-form scalar example.
pub fn meta_gradient_exactness() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut params = 0;
    for seed in 0..4 {
        let (spec, meta, task) = small_task(seed);
        params = meta.theta.total_len();
        for steps in [1, 2] {
            let mg = task_meta_gradient(&meta, &spec, &task, steps, MetaGradMode::Exact).unwrap();
            let fd_theta = fd_gradient(&meta.theta, |t| {
                composed_loss(&MetaParams::new(t.clone(), meta.alpha.clone()).unwrap(), &spec, &task, steps)
            });
            let fd_alpha = fd_gradient(&meta.alpha, |a| {
                composed_loss(&MetaParams::new(meta.theta.clone(), a.clone()).unwrap(), &spec, &task, steps)
            });
            worst = worst
                .max(max_rel_err(&mg.theta.flatten(), &fd_theta))
                .max(max_rel_err(&mg.alpha.flatten(), &fd_alpha));
        }
    }
    let (dt, da, _, _) = scalar_meta_example();
    let scalar_err = (dt - 0.75).abs().max((da + 1.5).abs());
    Outcome::new(
        worst < 1e-4 && scalar_err < 1e-10 && params <= 100,
        format!(
            "{params}-parameter backbone: max relative error {worst:.2e}; scalar example dθ = {dt}, dα = {da} (error {scalar_err:.1e})"
        ),
    )
}

/// α ≡ 0 keeps θ bitwise; zero adaptation steps return θ bitwise.
pub fn degeneracies() -> Outcome {
    let mut failures = Vec::new();
    for seed in 0..5 {
        let (spec, meta, task) = small_task(seed);
        let frozen = MetaParams::new(meta.theta.clone(), meta.theta.zeros_like()).unwrap();
        for steps in [1, 3, 10] {
            if inner_update(&frozen, &spec, &task, steps).unwrap() != meta.theta {
                failures.push(format!("seed {seed}: α = 0 moved θ after {steps} steps"));
            }
        }
        if adapt_on(&meta, &spec, &task.support, 0).unwrap() != meta.theta {
            failures.push(format!("seed {seed}: zero steps moved θ"));
        }
    }
    Outcome::new(
        failures.is_empty(),
        if failures.is_empty() {
            "α = 0 and steps = 0 return θ bitwise on 5 random backbones".to_string()
        } else {
            failures.join("; ")
        },
    )
}

pub fn random_reports(r: &mut rng::Rng, n: usize) -> Vec<ImportanceReport> {
    (0..n)
        .map(|i| {
            let raw: Vec<f64> = (0..81).map(|_| r.random_range(0.0..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            ImportanceReport {
                algorithm: format!("model-{i}"),
                accuracy: r.random_range(0.0..=1.0),
                importances: raw.iter().map(|v| v / sum).collect(),
            }
        })
        .collect()
}

/// Entry-by-entry recomputation with the report loop outermost.
pub fn brute_force_importance(reports: &[ImportanceReport]) -> Vec<f64> {
    let mut acc = [0.0f64; 81];
    for rep in reports {
        for (j, v) in rep.importances.iter().enumerate() {
            acc[j] += rep.accuracy * v;
        }
    }
    acc.iter().map(|v| v / reports.len() as f64).collect()
}

pub fn cumulative_importance_oracle(sets: usize) -> Outcome {
    let mut r = rng::stream(5, "importance-sets", 0);
    let mut worst: f64 = 0.0;
    for _ in 0..sets {
        let reports = random_reports(&mut r, 5);
        let got = cumulative_importance(&reports).unwrap();
        let want = brute_force_importance(&reports);
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    Outcome::new(worst <= 1e-12, format!("{sets} random 5×81 report sets, max deviation {worst:.1e}"))
}

pub const CLIENT: &str = "10.0.0.1";
pub const SERVER: &str = "10.0.0.2";

/// TCP packet between the fixed client (port 40000) and server (port 80).
pub fn tcp(ts_us: u64, forward: bool, header: u32, payload: u32, flags: u8) -> PacketRecord {
    let (c, s): (IpAddr, IpAddr) = (CLIENT.parse().unwrap(), SERVER.parse().unwrap());
    let (src_ip, dst_ip, src_port, dst_port) = if forward { (c, s, 40000, 80) } else { (s, c, 80, 40000) };
    PacketRecord {
        timestamp_us: ts_us,
        src_ip,
        dst_ip,
        src_port,
        dst_port,
        protocol: Protocol::Tcp,
        header_len: header,
        payload_len: payload,
        tcp_flags: TcpFlags(flags),
        window_size: 1000,
    }
}

pub fn flow(packets: Vec<PacketRecord>) -> Flow {
    Flow::from_packets(packets).unwrap()
}

const ACK: u8 = TcpFlags::ACK;

/// Hand-built flows with hand-computed expectations; `None` means masked.
pub fn hand_flows() -> Vec<(&'static str, Flow, Vec<(usize, Option<f64>)>)> {
    let mut cases = Vec::new();

    let single = flow(vec![tcp(0, true, 40, 100, TcpFlags::SYN)]);
    let mut e: Vec<(usize, Option<f64>)> = vec![(0, Some(0.0)), (5, Some(1.0)), (15, Some(1.0)), (74, Some(1.0))];
    e.extend((1..5).map(|i| (i, None)));
    e.extend((53..69).map(|i| (i, None)));
    e.extend([(6, Some(1.0)), (7, Some(1.0)), (8, Some(1.0)), (10, Some(0.0)), (20, Some(0.0))]);
    e.extend([(21, Some(40.0)), (24, Some(40.0)), (26, Some(0.0)), (27, None), (36, Some(0.0))]);
    e.extend([(37, Some(100.0)), (40, Some(100.0)), (42, Some(0.0)), (52, Some(0.0))]);
    e.extend([9, 19, 25, 35, 41, 51].map(|i| (i, Some(0.0))));
    cases.push(("single packet", single, e));

    let four = flow(vec![
        tcp(0, true, 40, 100, ACK),
        tcp(100_000, false, 40, 300, ACK),
        tcp(200_000, true, 40, 200, ACK),
        tcp(300_000, false, 40, 0, ACK),
    ]);
    let e = vec![
        (0, Some(0.3)),
        (1, Some(760.0 / 0.3)),
        (2, Some(2.0 / 0.3)),
        (3, Some(2.0 / 0.3)),
        (4, Some(4.0 / 0.3)),
        (5, Some(2.0)),
        (8, Some(2.0)),
        (9, Some(0.0)),
        (20, Some(1.0)),
        (37, Some(300.0)),
        (38, Some(100.0)),
        (39, Some(200.0)),
        (40, Some(150.0)),
        (41, Some(50.0)),
        (42, Some(300.0)),
        (43, Some(0.0)),
        (44, Some(300.0)),
        (45, Some(150.0)),
        (46, Some(150.0)),
        (52, Some(1.0)),
        (53, Some(0.2)),
        (56, Some(0.2)),
        (57, Some(0.0)),
        (58, Some(0.2)),
        (63, Some(0.3)),
        (66, Some(0.1)),
        (68, Some(1.0)),
        (77, Some(4.0)),
    ];
    cases.push(("two each way", four, e));

    let spaced = flow(vec![
        tcp(0, true, 20, 10, ACK),
        tcp(2_000_000, true, 20, 10, ACK),
        tcp(6_000_000, true, 20, 10, ACK),
    ]);
    let mut e = vec![
        (0, Some(6.0)),
        (3, Some(0.0)),
        (4, Some(0.5)),
        (5, Some(3.0)),
        (6, Some(0.0)),
        (7, Some(1.0)),
        (8, Some(3.0 / 7.0)),
        (9, Some(12f64.sqrt() / 7.0)),
        (53, Some(6.0)),
        (54, Some(2.0)),
        (55, Some(4.0)),
        (56, Some(3.0)),
        (57, Some(1.0)),
        (63, Some(6.0)),
        (68, None),
    ];
    e.extend((58..63).map(|i| (i, None)));
    cases.push(("three forward", spaced, e));

    let instant = flow(vec![tcp(5_000, true, 40, 10, ACK), tcp(5_000, false, 40, 20, ACK)]);
    let mut e = vec![(0, Some(0.0)), (20, Some(1.0)), (52, Some(2.0)), (63, Some(0.0)), (66, Some(0.0)), (68, None)];
    e.extend((1..5).map(|i| (i, None)));
    e.extend((53..63).map(|i| (i, None)));
    cases.push(("zero duration", instant, e));

    let flagged = flow(vec![
        tcp(0, true, 44, 0, TcpFlags::SYN),
        tcp(500_000, false, 44, 0, TcpFlags::SYN | ACK),
        tcp(1_000_000, true, 32, 0, ACK | TcpFlags::CWR | TcpFlags::ECE),
        tcp(1_500_000, true, 32, 500, TcpFlags::PSH | ACK | TcpFlags::URG),
        tcp(1_600_000, false, 32, 1000, TcpFlags::PSH | ACK),
        tcp(2_000_000, true, 32, 0, TcpFlags::FIN | ACK),
        tcp(2_200_000, false, 20, 0, TcpFlags::RST),
    ]);
    let e = vec![
        (0, Some(2.2)),
        (1, Some(1736.0 / 2.2)),
        (5, Some(4.0)),
        (6, Some(1.0)),
        (7, Some(2.0)),
        (8, Some(4.0 / 3.0)),
        (9, Some(2f64.sqrt() / 3.0)),
        (10, Some(3.0)),
        (13, Some(1.0)),
        (14, Some(0.0)),
        (15, Some(7.0)),
        (18, Some(7.0 / 3.0)),
        (19, Some(2f64.sqrt() / 3.0)),
        (20, Some(0.75)),
        (21, Some(140.0)),
        (26, Some(96.0)),
        (31, Some(236.0)),
        (36, Some(96.0 / 140.0)),
        (69, Some(1.0)),
        (70, Some(1.0)),
        (71, Some(1.0)),
        (72, Some(0.0)),
        (73, Some(1.0)),
        (74, Some(2.0)),
        (75, Some(1.0)),
        (76, Some(2.0)),
        (77, Some(5.0)),
        (78, Some(1.0)),
        (79, Some(1.0)),
        (80, Some(1.0)),
    ];
    cases.push(("handshake and flags", flagged, e));
    cases
}

/// Checks the summary-group invariants of one flow; returns the first violation.
pub fn feature_invariants(f: &Flow) -> Result<(), String> {
    let v = extract_stat_features(f);
    let windows = ((f.end_ts - f.start_ts) / 1_000_000 + 1) as f64;
    let fwd = f
        .packets
        .iter()
        .filter(|p| p.direction == uad_core::flow::Direction::Forward)
        .count() as f64;
    let n = f.len() as f64;
    let counts = [fwd, n - fwd, n];
    for (gi, at) in [5usize, 21, 37, 53].into_iter().enumerate() {
        for side in 0..3 {
            let base = at + 5 * side;
            if v.missing()[base + 3] {
                continue;
            }
            let [total, min, max, mean, std] = [0, 1, 2, 3, 4].map(|k| v.values()[base + k]);
            let count = match gi {
                0 => windows,
                3 => counts[side] - 1.0,
                _ => counts[side],
            };
            let tol = 1e-9 * total.abs().max(1.0);
            if !(min <= mean && mean <= max && std >= 0.0) {
                return Err(format!("group at {base}: min {min} mean {mean} max {max} std {std}"));
            }
            if (total - mean * count).abs() > tol {
                return Err(format!("group at {base}: total {total} != mean {mean} × {count}"));
            }
        }
    }
    for at in [5usize, 21, 37] {
        let (a, b, c) = (v.values()[at], v.values()[at + 5], v.values()[at + 10]);
        if (a + b - c).abs() > 1e-9 * c.abs().max(1.0) {
            return Err(format!("direction totals at {at}: {a} + {b} != {c}"));
        }
    }
    for (ratio, fwd_total, bwd_total) in [(20usize, 5usize, 10usize), (36, 21, 26), (52, 37, 42)] {
        let (fwd_t, bwd_t) = (v.values()[fwd_total], v.values()[bwd_total]);
        if fwd_t > 0.0 && (v.values()[ratio] - bwd_t / fwd_t).abs() > 1e-12 {
            return Err(format!("ratio {ratio} differs from {bwd_t} / {fwd_t}"));
        }
    }
    for (i, (&x, &m)) in v.values().iter().zip(v.missing()).enumerate() {
        if !x.is_finite() || (m && x != 0.0) || x < 0.0 {
            return Err(format!("entry {i} = {x} (masked {m})"));
        }
    }
    Ok(())
}

pub fn feature_oracle() -> Outcome {
    let mut failures = Vec::new();
    for (name, f, expected) in hand_flows() {
        let v = extract_stat_features(&f);
        for (i, want) in expected {
            let got = v.get(i);
            let ok = match (got, want) {
                (Some(a), Some(b)) => (a - b).abs() <= 1e-9,
                (None, None) => true,
                _ => false,
            };
            if !ok {
                failures.push(format!("{name}: entry {i} is {got:?}, expected {want:?}"));
            }
        }
    }
    let flows = generate_flows(&SyntheticSpec {
        n_classes: 10,
        flows_per_class: 100,
        seed: 3,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let mut checked = 0;
    for lf in &flows {
        match feature_invariants(&lf.flow) {
            Ok(()) => checked += 1,
            Err(e) => failures.push(format!("synthetic flow: {e}")),
        }
    }
    Outcome::new(
        failures.is_empty(),
        if failures.is_empty() {
            format!("5 hand-built flows match to 1e-9; invariants hold on {checked} synthetic flows")
        } else {
            failures[..failures.len().min(5)].join("; ")
        },
    )
}

/// Truncation and padding of flow matrices for flows of 3, 20 and 25 packets.
pub fn flow_matrix_contract() -> Outcome {
    let mut failures = Vec::new();
    for u in [3usize, 20, 25] {
        let packets: Vec<PacketRecord> = (0..u)
            .map(|i| tcp(i as u64 * 10_000, i % 3 != 1, 40, 100 + i as u32, ACK))
            .collect();
        let m = build_flow_matrix(&flow(packets), 20);
        if m.valid_rows() != u.min(20) || m.b() != 20 {
            failures.push(format!("u = {u}: valid rows {}", m.valid_rows()));
        }
        for i in 0..20 {
            let row = m.row(i);
            if i < u.min(20) {
                let dir = if i % 3 != 1 { 1.0 } else { -1.0 };
                let gap = if i == 0 { 0.0 } else { 0.01 };
                let want = [40.0, 100.0 + i as f64, gap, 1000.0, (i + 1) as f64, 0.0, dir, 0.0];
                if row.iter().zip(&want).any(|(a, b)| (a - b).abs() > 1e-12) {
                    failures.push(format!("u = {u}: row {i} is {row:?}, expected {want:?}"));
                }
            } else if row.iter().any(|&x| x != 0.0) {
                failures.push(format!("u = {u}: padding row {i} is {row:?}"));
            }
        }
    }
    let two = build_flow_matrix(&flow(vec![tcp(0, true, 40, 10, ACK), tcp(500_000, false, 40, 0, ACK)]), 20);
    if two.row(1)[2] != 0.5 || two.row(0)[6] != 1.0 || two.row(1)[6] != -1.0 {
        failures.push(format!("2-packet rows {:?} {:?}", two.row(0), two.row(1)));
    }
    Outcome::new(
        failures.is_empty(),
        if failures.is_empty() {
            "lengths 3, 20, 25 truncate to the first 20 packets and zero-pad".to_string()
        } else {
            failures.join("; ")
        },
    )
}

pub fn index_set(v: impl IntoIterator<Item = usize>) -> BTreeSet<usize> {
    v.into_iter().collect()
}
