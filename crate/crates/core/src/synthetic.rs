//! Seeded synthetic traffic with controllable class structure.
//!
//! Every class has a point in a 4-dimensional parameter space (log payload
//! mean, log gap mean, backward-packet logit, log flow-length mean). Class 0
//! is normal traffic at the origin; anomaly class `c` sits at distance
//! `class_separation` along a unit direction mixing a component shared by
//! all anomaly classes with a class-specific one. Each flow scales that
//! offset by a factor in `[0.5, 1.5)` and adds N(0, 0.3) noise to every
//! parameter.
//!
//! With `temporal_signal`, all classes share the same marginals and differ
//! only in how payload sizes are ordered inside a flow. Directions then
//! alternate and lengths, headers and windows are fixed.

use std::net::{IpAddr, Ipv4Addr};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{Flow, PacketRecord, Protocol, TcpFlags};
use crate::meta::NORMAL_LABEL;
use crate::rng::{self, Rng};

const BASE_LOG_PAYLOAD: f64 = 6.0;
const PAYLOAD_SIGMA: f64 = 0.8;
const GAP_SIGMA: f64 = 1.0;
const MAX_GAP_S: f64 = 2.5;
const LENGTH_SIGMA: f64 = 0.4;
const MIN_PACKETS: usize = 2;
const MAX_PACKETS: usize = 40;
/// Packets per flow in temporal mode.
pub const TEMPORAL_FLOW_LEN: usize = 20;
const CLASS_SPECIFIC_WEIGHT: f64 = 0.6;
const FLOW_JITTER_SIGMA: f64 = 0.3;
const START_US: u64 = 1_600_000_000_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    /// Classes including the normal class 0.
    pub n_classes: usize,
    pub flows_per_class: usize,
    pub class_separation: f64,
    pub temporal_signal: bool,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_classes: 9,
            flows_per_class: 100,
            class_separation: 1.0,
            temporal_signal: false,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.n_classes)));
        }
        if self.flows_per_class == 0 {
            return Err(Error::Config("flows_per_class must be at least 1".into()));
        }
        if !(self.class_separation >= 0.0) || !self.class_separation.is_finite() {
            return Err(Error::Config(format!(
                "class separation must be a finite non-negative number, got {}",
                self.class_separation
            )));
        }
        Ok(())
    }
}

/// Name of class `c`: `normal` for 0, `anomaly-NN` otherwise.
pub fn class_name(c: usize) -> String {
    if c == 0 {
        NORMAL_LABEL.into()
    } else {
        format!("anomaly-{c:02}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledFlow {
    pub flow: Flow,
    pub label: String,
}

fn ln_gap_base() -> f64 {
    0.05f64.ln()
}

fn unit_vector(r: &mut Rng) -> [f64; 4] {
    let mut d = [0.0; 4];
    loop {
        for v in &mut d {
            *v = StandardNormal.sample(r);
        }
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-6 {
            d.iter_mut().for_each(|v| *v /= norm);
            return d;
        }
    }
}

/// Unit direction of an anomaly class: a component shared by all anomaly
/// classes plus a class-specific one.
fn class_direction(seed: u64, class: usize) -> [f64; 4] {
    let shared = unit_vector(&mut rng::stream(seed, "anomaly-direction", 0));
    let own = unit_vector(&mut rng::stream(seed, "class-direction", class as u64));
    let mut d = [0.0; 4];
    for i in 0..4 {
        d[i] = shared[i] + CLASS_SPECIFIC_WEIGHT * own[i];
    }
    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    d.map(|v| v / norm)
}

/// Rearranges ascending `sizes` into ordering pattern `p`.
fn arrange(mut sizes: Vec<u32>, pattern: usize, r: &mut Rng) -> Vec<u32> {
    sizes.sort_unstable();
    let n = sizes.len();
    match pattern % 8 {
        0 => sizes,
        1 => {
            sizes.reverse();
            sizes
        }
        2 | 3 => {
            // Small values at the ends and large in the middle, or the reverse.
            let mut out = vec![0; n];
            let (mut lo, mut hi) = (0, n);
            for (i, &s) in sizes.iter().enumerate() {
                if i % 2 == 0 {
                    out[lo] = s;
                    lo += 1;
                } else {
                    hi -= 1;
                    out[hi] = s;
                }
            }
            if pattern % 8 == 3 {
                let half = n / 2;
                out.rotate_left(half);
            }
            out
        }
        4 | 5 => {
            let (small, large) = sizes.split_at(n / 2);
            let (first, second) = if pattern % 8 == 4 { (large, small) } else { (small, large) };
            let (mut a, mut b) = (first.iter(), second.iter());
            let mut out = Vec::with_capacity(n);
            loop {
                match (a.next(), b.next()) {
                    (None, None) => break,
                    (x, y) => {
                        out.extend(x);
                        out.extend(y);
                    }
                }
            }
            out
        }
        6 => {
            let mut rest = sizes.split_off(n / 2);
            rest.shuffle(r);
            rest.reverse();
            let mut head = sizes;
            head.shuffle(r);
            rest.extend(head);
            rest
        }
        _ => {
            let mut head = sizes.split_off(n / 2);
            let mut tail = sizes;
            tail.shuffle(r);
            head.shuffle(r);
            tail.extend(head);
            tail
        }
    }
}

struct FlowParams {
    log_payload: f64,
    log_gap: f64,
    bwd_logit: f64,
    log_len: f64,
}

fn sample_flow(spec: &SyntheticSpec, class: usize, index: usize, global: u64) -> Flow {
    let mut r = rng::stream(spec.seed, &format!("flow-{class}"), index as u64);
    let (dir, scale) = if spec.temporal_signal || class == 0 {
        ([0.0; 4], 0.0)
    } else {
        let tau: f64 = r.random_range(0.5..1.5);
        (class_direction(spec.seed, class), spec.class_separation * tau)
    };
    let jitter = Normal::new(0.0, FLOW_JITTER_SIGMA).expect("valid sigma");
    let mut j = [0.0; 4];
    for v in &mut j {
        *v = jitter.sample(&mut r);
    }
    let p = FlowParams {
        log_payload: BASE_LOG_PAYLOAD + scale * dir[0] + j[0],
        log_gap: ln_gap_base() + scale * dir[1] + j[1],
        bwd_logit: scale * dir[2] + j[2],
        log_len: 12f64.ln() + scale * dir[3] + j[3],
    };
    let len_dist = Normal::new(p.log_len, LENGTH_SIGMA).expect("valid sigma");
    let u = (len_dist.sample(&mut r).exp().round() as usize).clamp(MIN_PACKETS, MAX_PACKETS);
    let u = if spec.temporal_signal { TEMPORAL_FLOW_LEN } else { u };
    let payload_dist = Normal::new(p.log_payload, PAYLOAD_SIGMA).expect("valid sigma");
    let gap_dist = Normal::new(p.log_gap, GAP_SIGMA).expect("valid sigma");
    let p_bwd = 1.0 / (1.0 + (-p.bwd_logit).exp());

    let mut sizes: Vec<u32> = (0..u)
        .map(|_| payload_dist.sample(&mut r).exp().round().clamp(0.0, 1460.0) as u32)
        .collect();
    if spec.temporal_signal {
        sizes = if class == 0 {
            let mut s = sizes;
            s.shuffle(&mut r);
            s
        } else {
            arrange(sizes, class - 1, &mut r)
        };
    }

    let client = IpAddr::V4(Ipv4Addr::new(
        10,
        (class % 256) as u8,
        ((index >> 8) % 256) as u8,
        (index % 256) as u8,
    ));
    let server = IpAddr::V4(Ipv4Addr::new(192, 168, (class % 256) as u8, 1));
    let client_port = 1024 + (index % 60000) as u16;
    let server_port = 443;
    let window: u32 = if spec.temporal_signal { 65535 } else { r.random_range(1024..=65535) };
    let mut ts = START_US + global * 1_000;
    let mut packets = Vec::with_capacity(u);
    for (i, &payload) in sizes.iter().enumerate() {
        if i > 0 {
            let gap = gap_dist.sample(&mut r).exp().min(MAX_GAP_S);
            ts += ((gap * 1e6).round() as u64).max(1);
        }
        let backward = if spec.temporal_signal {
            i % 2 == 1
        } else {
            i > 0 && r.random_bool(p_bwd)
        };
        let (src_ip, src_port, dst_ip, dst_port) = if backward {
            (server, server_port, client, client_port)
        } else {
            (client, client_port, server, server_port)
        };
        let mut flags = if i == 0 { TcpFlags::SYN } else { TcpFlags::ACK };
        if i > 0 && payload > 0 && (spec.temporal_signal || r.random_bool(0.3)) {
            flags |= TcpFlags::PSH;
        }
        let header_len = if !spec.temporal_signal && r.random_bool(0.5) { 52 } else { 40 };
        packets.push(PacketRecord {
            timestamp_us: ts,
            src_ip,
            dst_ip,
            src_port,
            dst_port,
            protocol: Protocol::Tcp,
            header_len,
            payload_len: payload,
            tcp_flags: TcpFlags(flags),
            window_size: window,
        });
    }
    Flow::from_packets(packets).expect("generated packets are ordered and share a key")
}

/// Generates `flows_per_class` flows for every class, class by class.
pub fn generate_flows(spec: &SyntheticSpec) -> Result<Vec<LabeledFlow>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.n_classes * spec.flows_per_class);
    for class in 0..spec.n_classes {
        for i in 0..spec.flows_per_class {
            let global = (class * spec.flows_per_class + i) as u64;
            out.push(LabeledFlow {
                flow: sample_flow(spec, class, i, global),
                label: class_name(class),
            });
        }
    }
    Ok(out)
}

/// Flows plus a split of anomaly classes into meta-training and novel sets.
#[derive(Clone, Debug)]
pub struct TaskFamily {
    pub flows: Vec<LabeledFlow>,
    pub train_classes: Vec<String>,
    pub novel_classes: Vec<String>,
}

/// Number of meta-training classes among `anomaly_classes`: 70 % rounded
/// down, leaving at least one novel class.
pub fn train_class_count(anomaly_classes: usize) -> usize {
    (anomaly_classes * 7 / 10).min(anomaly_classes.saturating_sub(1))
}

/// Generates flows and splits the anomaly classes (all but class 0).
pub fn generate_task_family(spec: &SyntheticSpec) -> Result<TaskFamily> {
    if spec.n_classes < 4 {
        return Err(Error::Config(format!(
            "a task family needs at least 4 classes including normal, got {}",
            spec.n_classes
        )));
    }
    let flows = generate_flows(spec)?;
    let anomalies = spec.n_classes - 1;
    let n_train = train_class_count(anomalies);
    Ok(TaskFamily {
        flows,
        train_classes: (1..=n_train).map(class_name).collect(),
        novel_classes: (n_train + 1..=anomalies).map(class_name).collect(),
    })
}

/// All packets of `flows`, ordered by timestamp.
pub fn packets_of(flows: &[LabeledFlow]) -> Vec<PacketRecord> {
    let mut packets: Vec<PacketRecord> = flows
        .iter()
        .flat_map(|f| f.flow.packets.iter().map(|p| p.record.clone()))
        .collect();
    packets.sort_by_key(|p| p.timestamp_us);
    packets
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_counts() {
        assert_eq!(train_class_count(8), 5);
        assert_eq!(train_class_count(4), 2);
        assert_eq!(train_class_count(2), 1);
    }

    #[test]
    fn arrangements_are_permutations() {
        let mut r = rng::stream(0, "t", 0);
        for n in 2..12 {
            let base: Vec<u32> = (0..n as u32).map(|v| v * 3 + 1).collect();
            for p in 0..8 {
                let mut got = arrange(base.clone(), p, &mut r);
                assert_eq!(got.len(), n);
                got.sort_unstable();
                assert_eq!(got, base, "pattern {p} n {n}");
            }
        }
    }

    #[test]
    fn flows_are_valid_and_reproducible() {
        let spec = SyntheticSpec {
            n_classes: 3,
            flows_per_class: 20,
            ..SyntheticSpec::default()
        };
        let a = generate_flows(&spec).unwrap();
        let b = generate_flows(&spec).unwrap();
        assert_eq!(a, b);
        for f in &a {
            assert!((2..=40).contains(&f.flow.len()));
            assert!(f.flow.end_ts > f.flow.start_ts);
            for p in &f.flow.packets {
                p.record.validate().unwrap();
            }
        }
        assert_eq!(a[0].label, "normal");
        assert_eq!(a[45].label, "anomaly-02");
    }
}
