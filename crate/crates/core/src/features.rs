//! Flow-level statistics (81 features) and the 33-feature projection.
//!
//! Index layout, 0-based:
//!
//! | index | feature |
//! |-------|---------|
//! | 0 | Flow duration (s) |
//! | 1–4 | Flow byte/s, Fwd packets/s, Bwd packets/s, Flow packets/s |
//! | 5–19 | Fwd, Bwd, Flow packet count: Total, Min, Max, Mean, Std |
//! | 20 | Bwd/Fwd packet total count ratio |
//! | 21–35 | Fwd, Bwd, Flow header length group |
//! | 36 | Bwd/Fwd header total length ratio |
//! | 37–51 | Fwd, Bwd, Flow packet (payload) length group |
//! | 52 | Bwd/Fwd packet total length ratio |
//! | 53–67 | Fwd, Bwd, Flow IAT group (s) |
//! | 68 | Bwd/Fwd total IAT ratio |
//! | 69–72 | Fwd PSH, Fwd URG, Bwd PSH, Bwd URG counts |
//! | 73–80 | Flow FIN, SYN, RST, PSH, ACK, URG, CWR, ECE counts |
//!
//! The packet count group summarizes packets per one-second window of the
//! flow's lifetime; Total is the packet count itself.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{Direction, Flow, TcpFlags};

pub const STAT_FEATURES: usize = 81;
pub const SELECTED_FEATURES: usize = 33;

/// The shipped 33-feature selection, in output order.
pub const CANONICAL_SELECTION: [usize; SELECTED_FEATURES] = [
    10, 13, 15, 18, 20, 21, 26, 31, 36, 37, 39, 40, 41, 42, 44, 45, 46, 47, 49, 50, 51, 52, 54, 55,
    56, 57, 60, 61, 63, 65, 66, 69, 77,
];

const STATS: [&str; 5] = ["Total", "Min", "Max", "Mean", "Std"];
const SIDES: [&str; 3] = ["Fwd", "Bwd", "Flow"];

/// Human-readable names of the 81 statistics, in index order.
pub fn stat_feature_names() -> Vec<String> {
    let mut names: Vec<String> = vec![
        "Flow duration".into(),
        "Flow byte/s".into(),
        "Fwd packets/s".into(),
        "Bwd packets/s".into(),
        "Flow packets/s".into(),
    ];
    let groups = [
        ("packet count", "Bwd/Fwd packet total count ratio"),
        ("header Length", "Bwd/Fwd header total length ratio"),
        ("packet Length", "Bwd/Fwd packet total length ratio"),
        ("IAT", "Bwd/Fwd total IAT ratio"),
    ];
    for (group, ratio) in groups {
        for side in SIDES {
            for stat in STATS {
                names.push(format!("{side} {group}: {stat}"));
            }
        }
        names.push(ratio.into());
    }
    for n in ["Fwd flag count: PSH", "Fwd flag count: URG", "Bwd flag count: PSH", "Bwd flag count: URG"] {
        names.push(n.into());
    }
    for f in ["FIN", "SYN", "RST", "PSH", "ACK", "URG", "CWR", "ECE"] {
        names.push(format!("Flow flag count: {f}"));
    }
    debug_assert_eq!(names.len(), STAT_FEATURES);
    names
}

/// Names of the features picked by `selection`.
pub fn selected_names(selection: &[usize]) -> Result<Vec<String>> {
    check_selection(selection, None)?;
    let all = stat_feature_names();
    Ok(selection.iter().map(|&i| all[i].clone()).collect())
}

/// The 81 statistics of one flow with an explicit undefined-entry mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatFeatureVector {
    values: Vec<f64>,
    missing: Vec<bool>,
}

impl StatFeatureVector {
    pub fn new(values: Vec<f64>, missing: Vec<bool>) -> Result<Self> {
        if values.len() != STAT_FEATURES || missing.len() != STAT_FEATURES {
            return Err(Error::Schema(format!(
                "statistic vector needs {STAT_FEATURES} values and mask entries, got {} and {}",
                values.len(),
                missing.len()
            )));
        }
        let values = values
            .into_iter()
            .zip(&missing)
            .map(|(v, &m)| if m { 0.0 } else { v })
            .collect();
        Ok(StatFeatureVector { values, missing })
    }

    /// Builds from optional cells, `None` meaning undefined.
    pub fn from_options(cells: &[Option<f64>]) -> Result<Self> {
        Self::new(
            cells.iter().map(|c| c.unwrap_or(0.0)).collect(),
            cells.iter().map(Option::is_none).collect(),
        )
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn missing(&self) -> &[bool] {
        &self.missing
    }

    pub fn get(&self, i: usize) -> Option<f64> {
        if self.missing[i] {
            None
        } else {
            Some(self.values[i])
        }
    }

    pub fn to_options(&self) -> Vec<Option<f64>> {
        (0..STAT_FEATURES).map(|i| self.get(i)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SelectedFeatureVector {
    values: Vec<f64>,
}

impl SelectedFeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != SELECTED_FEATURES {
            return Err(Error::Schema(format!(
                "selected vector needs {SELECTED_FEATURES} values, got {}",
                values.len()
            )));
        }
        Ok(SelectedFeatureVector { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

struct Builder {
    values: Vec<f64>,
    missing: Vec<bool>,
}

impl Builder {
    fn set(&mut self, i: usize, v: Option<f64>) {
        match v {
            Some(v) => self.values[i] = v,
            None => self.missing[i] = true,
        }
    }

    /// Writes a Total/Min/Max/Mean/Std group starting at `at`.
    fn group(&mut self, at: usize, total: f64, s: Option<Summary>) {
        self.set(at, Some(total));
        match s {
            Some(s) => {
                for (k, v) in [s.min, s.max, s.mean, s.std].into_iter().enumerate() {
                    self.set(at + 1 + k, Some(v));
                }
            }
            None => (1..5).for_each(|k| self.set(at + k, None)),
        }
    }

    fn get(&self, i: usize) -> Option<f64> {
        if self.missing[i] {
            None
        } else {
            Some(self.values[i])
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Summary {
    total: f64,
    min: f64,
    max: f64,
    mean: f64,
    std: f64,
}

/// Population summary; `None` for an empty sample.
fn summarize(samples: &mut [f64]) -> Option<Summary> {
    if samples.is_empty() {
        return None;
    }
    // Sorting makes the floating-point sums independent of packet order.
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    let total: f64 = samples.iter().sum();
    let min = samples[0];
    let max = samples[samples.len() - 1];
    let mean = (total / n).clamp(min, max);
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Some(Summary {
        total,
        min,
        max,
        mean,
        std: var.sqrt(),
    })
}

fn ratio(bwd: Option<f64>, fwd: Option<f64>) -> Option<f64> {
    match (bwd, fwd) {
        (Some(b), Some(f)) if f > 0.0 => Some(b / f),
        _ => None,
    }
}

fn iats(times: &[u64]) -> Vec<f64> {
    times.windows(2).map(|w| (w[1] - w[0]) as f64 / 1e6).collect()
}

/// Computes the 81 statistics of a nonempty flow.
pub fn extract_stat_features(flow: &Flow) -> StatFeatureVector {
    assert!(!flow.is_empty(), "flow has no packets");
    let mut b = Builder {
        values: vec![0.0; STAT_FEATURES],
        missing: vec![false; STAT_FEATURES],
    };
    let duration = flow.duration_secs();
    b.set(0, Some(duration));

    let sides: [Vec<_>; 3] = [
        flow.packets.iter().filter(|p| p.direction == Direction::Forward).collect(),
        flow.packets.iter().filter(|p| p.direction == Direction::Backward).collect(),
        flow.packets.iter().collect(),
    ];

    let total_bytes: u64 = flow.packets.iter().map(|p| p.record.total_len()).sum();
    let rate = |x: f64| (duration > 0.0).then(|| x / duration);
    b.set(1, rate(total_bytes as f64));
    b.set(2, rate(sides[0].len() as f64));
    b.set(3, rate(sides[1].len() as f64));
    b.set(4, rate(sides[2].len() as f64));

    let windows = ((flow.end_ts - flow.start_ts) / 1_000_000 + 1) as usize;
    for (s, pkts) in sides.iter().enumerate() {
        let at = 5 + 5 * s;
        let summary = if pkts.is_empty() {
            None
        } else {
            let mut counts = vec![0.0; windows];
            for p in pkts {
                counts[((p.record.timestamp_us - flow.start_ts) / 1_000_000) as usize] += 1.0;
            }
            summarize(&mut counts)
        };
        b.group(at, pkts.len() as f64, summary);
    }
    b.set(20, ratio(b.get(10), b.get(5)));

    for (s, pkts) in sides.iter().enumerate() {
        let mut h: Vec<f64> = pkts.iter().map(|p| f64::from(p.record.header_len)).collect();
        let sm = summarize(&mut h);
        b.group(21 + 5 * s, sm.map_or(0.0, |x| x.total), sm);
    }
    b.set(36, ratio(b.get(26), b.get(21)));

    for (s, pkts) in sides.iter().enumerate() {
        let mut l: Vec<f64> = pkts.iter().map(|p| f64::from(p.record.payload_len)).collect();
        let sm = summarize(&mut l);
        b.group(37 + 5 * s, sm.map_or(0.0, |x| x.total), sm);
    }
    b.set(52, ratio(b.get(42), b.get(37)));

    for (s, pkts) in sides.iter().enumerate() {
        let at = 53 + 5 * s;
        let times: Vec<u64> = pkts.iter().map(|p| p.record.timestamp_us).collect();
        let mut gaps = iats(&times);
        match summarize(&mut gaps) {
            Some(sm) => b.group(at, sm.total, Some(sm)),
            None => (0..5).for_each(|k| b.set(at + k, None)),
        }
    }
    b.set(68, ratio(b.get(58), b.get(53)));

    let count = |pkts: &[&crate::flow::FlowPacket], flag: u8| {
        pkts.iter().filter(|p| p.record.tcp_flags.has(flag)).count() as f64
    };
    b.set(69, Some(count(&sides[0], TcpFlags::PSH)));
    b.set(70, Some(count(&sides[0], TcpFlags::URG)));
    b.set(71, Some(count(&sides[1], TcpFlags::PSH)));
    b.set(72, Some(count(&sides[1], TcpFlags::URG)));
    let flow_flags = [
        TcpFlags::FIN,
        TcpFlags::SYN,
        TcpFlags::RST,
        TcpFlags::PSH,
        TcpFlags::ACK,
        TcpFlags::URG,
        TcpFlags::CWR,
        TcpFlags::ECE,
    ];
    for (k, f) in flow_flags.into_iter().enumerate() {
        b.set(73 + k, Some(count(&sides[2], f)));
    }

    StatFeatureVector::new(b.values, b.missing).expect("builder has the full length")
}

/// Checks that indices are distinct and in range, optionally of a given length.
pub fn check_selection(selection: &[usize], expected_len: Option<usize>) -> Result<()> {
    if let Some(n) = expected_len {
        if selection.len() != n {
            return Err(Error::Config(format!(
                "selection must have length {n}, got {}",
                selection.len()
            )));
        }
    }
    let mut seen = [false; STAT_FEATURES];
    for &i in selection {
        if i >= STAT_FEATURES {
            return Err(Error::Config(format!("selection index {i} out of range 0..{STAT_FEATURES}")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::Config(format!("selection index {i} repeated")));
        }
    }
    Ok(())
}

/// Copies the selected statistics in selection order; masked entries become 0.
pub fn project(v: &StatFeatureVector, selection: &[usize]) -> Result<Vec<f64>> {
    check_selection(selection, None)?;
    Ok(selection.iter().map(|&i| v.values[i]).collect())
}

/// Projection onto a 33-entry selection such as [`CANONICAL_SELECTION`].
pub fn project_selected(v: &StatFeatureVector, selection: &[usize]) -> Result<SelectedFeatureVector> {
    check_selection(selection, Some(SELECTED_FEATURES))?;
    SelectedFeatureVector::new(project(v, selection)?)
}

/// Rows of a feature CSV: named columns, optional cells, a label per row.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureTable {
    pub names: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
    pub labels: Vec<String>,
}

impl FeatureTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    /// Rows with undefined cells replaced by zero.
    pub fn dense_rows(&self) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| r.iter().map(|c| c.unwrap_or(0.0)).collect())
            .collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let fmt = |e: csv::Error| Error::Format(e.to_string());
        let mut header = self.names.clone();
        header.push("label".into());
        w.write_record(&header).map_err(fmt)?;
        for (row, label) in self.rows.iter().zip(&self.labels) {
            let mut rec: Vec<String> = row
                .iter()
                .map(|c| c.map(|v| format!("{v:?}")).unwrap_or_default())
                .collect();
            rec.push(label.clone());
            w.write_record(&rec).map_err(fmt)?;
        }
        w.flush().map_err(|e| Error::io("<feature csv>", e))?;
        Ok(())
    }

    /// Reads a feature CSV whose last column is `label`. Empty cells are undefined.
    pub fn read_csv<R: Read>(input: R) -> Result<FeatureTable> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
        let header = r
            .headers()
            .map_err(|e| Error::Parse {
                line: 1,
                message: e.to_string(),
            })?
            .clone();
        let cols: Vec<String> = header.iter().map(str::to_string).collect();
        if cols.last().map(String::as_str) != Some("label") {
            return Err(Error::Parse {
                line: 1,
                message: "last column must be \"label\"".into(),
            });
        }
        let names = cols[..cols.len() - 1].to_vec();
        let mut table = FeatureTable {
            names,
            ..FeatureTable::default()
        };
        for (i, rec) in r.records().enumerate() {
            let line = i as u64 + 2;
            let rec = rec.map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })?;
            if rec.len() != cols.len() {
                return Err(Error::Parse {
                    line,
                    message: format!("expected {} fields, found {}", cols.len(), rec.len()),
                });
            }
            let mut row = Vec::with_capacity(table.names.len());
            for (j, cell) in rec.iter().take(table.names.len()).enumerate() {
                let cell = cell.trim();
                if cell.is_empty() {
                    row.push(None);
                } else {
                    let v: f64 = cell.parse().map_err(|_| Error::Parse {
                        line,
                        message: format!("column {:?}: {cell:?} is not a number", table.names[j]),
                    })?;
                    row.push(Some(v));
                }
            }
            table.rows.push(row);
            table.labels.push(rec[cols.len() - 1].to_string());
        }
        Ok(table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{PacketRecord, Protocol};

    fn pkt(ts_us: u64, fwd: bool, payload: u32, flags: u8) -> PacketRecord {
        let (a, b) = (("10.0.0.1", 1000u16), ("10.0.0.2", 80u16));
        let (s, d) = if fwd { (a, b) } else { (b, a) };
        PacketRecord {
            timestamp_us: ts_us,
            src_ip: s.0.parse().unwrap(),
            dst_ip: d.0.parse().unwrap(),
            src_port: s.1,
            dst_port: d.1,
            protocol: Protocol::Tcp,
            header_len: 40,
            payload_len: payload,
            tcp_flags: TcpFlags(flags),
            window_size: 1000,
        }
    }

    #[test]
    fn names_cover_layout() {
        let n = stat_feature_names();
        assert_eq!(n.len(), 81);
        assert_eq!(n[0], "Flow duration");
        assert_eq!(n[20], "Bwd/Fwd packet total count ratio");
        assert_eq!(n[61], "Bwd IAT: Mean");
        assert_eq!(n[69], "Fwd flag count: PSH");
        assert_eq!(n[77], "Flow flag count: ACK");
        assert_eq!(n[80], "Flow flag count: ECE");
    }

    #[test]
    fn canonical_selection_names() {
        let names = selected_names(&CANONICAL_SELECTION).unwrap();
        assert_eq!(names[0], "Bwd packet count: Total");
        assert_eq!(names[26], "Bwd IAT: Max");
        assert_eq!(names[27], "Bwd IAT: Mean");
        assert_eq!(names[32], "Flow flag count: ACK");
        assert!(!names.contains(&"Flow duration".to_string()));
    }

    #[test]
    fn single_packet_flow() {
        let f = Flow::from_packets(vec![pkt(5, true, 10, TcpFlags::SYN)]).unwrap();
        let v = extract_stat_features(&f);
        assert_eq!(v.get(0), Some(0.0));
        assert_eq!(v.get(5), Some(1.0));
        for i in 53..69 {
            assert_eq!(v.get(i), None, "IAT index {i}");
        }
        for i in 1..5 {
            assert_eq!(v.get(i), None);
        }
        assert_eq!(v.get(74), Some(1.0));
    }

    #[test]
    fn projection_length_enforced() {
        let v = StatFeatureVector::new(vec![1.0; 81], vec![false; 81]).unwrap();
        let all: Vec<usize> = (0..81).collect();
        assert!(matches!(project_selected(&v, &all), Err(Error::Config(_))));
        let s = project_selected(&v, &CANONICAL_SELECTION).unwrap();
        assert_eq!(s.values(), &[1.0; 33]);
        assert!(project(&v, &[81]).is_err());
        assert!(project(&v, &[3, 3]).is_err());
    }

    #[test]
    fn csv_roundtrip_keeps_missing_cells() {
        let t = FeatureTable {
            names: vec!["a".into(), "b".into()],
            rows: vec![vec![Some(0.1), None], vec![Some(-3.0), Some(1e300)]],
            labels: vec!["normal".into(), "x".into()],
        };
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(FeatureTable::read_csv(buf.as_slice()).unwrap(), t);
    }
}
