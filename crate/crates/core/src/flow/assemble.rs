use std::collections::HashMap;
use std::io::Write;

use super::packet::{Direction, Flow, FlowKey, FlowPacket, PacketRecord, TcpFlags};
use crate::error::{Error, Result};

/// Flow termination timeouts, in seconds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowTimeouts {
    idle_us: u64,
    active_us: u64,
}

impl Default for FlowTimeouts {
    fn default() -> Self {
        FlowTimeouts {
            idle_us: 60_000_000,
            active_us: 120_000_000,
        }
    }
}

impl FlowTimeouts {
    pub fn new(idle_secs: f64, active_secs: f64) -> Result<Self> {
        if !(idle_secs > 0.0) || !idle_secs.is_finite() {
            return Err(Error::Config(format!("idle timeout must be positive, got {idle_secs}")));
        }
        if !(active_secs > idle_secs) || !active_secs.is_finite() {
            return Err(Error::Config(format!(
                "active timeout ({active_secs}) must exceed idle timeout ({idle_secs})"
            )));
        }
        Ok(FlowTimeouts {
            idle_us: (idle_secs * 1e6).round() as u64,
            active_us: (active_secs * 1e6).round() as u64,
        })
    }

    pub fn idle_secs(&self) -> f64 {
        self.idle_us as f64 / 1e6
    }

    pub fn active_secs(&self) -> f64 {
        self.active_us as f64 / 1e6
    }
}

#[derive(Default)]
struct Teardown {
    fin_fwd: bool,
    fin_bwd: bool,
    // Both FINs seen; one trailing bare ACK may still belong to the flow.
    finished: bool,
}

struct Open {
    flow: Flow,
    teardown: Teardown,
}

impl Open {
    fn start(record: PacketRecord) -> Open {
        Open {
            flow: Flow::from_packets(vec![record]).expect("single packet flow"),
            teardown: Teardown::default(),
        }
    }

    fn expired(&self, ts: u64, t: &FlowTimeouts) -> bool {
        ts - self.flow.end_ts > t.idle_us || ts - self.flow.start_ts > t.active_us
    }

    fn direction_of(&self, r: &PacketRecord) -> Direction {
        if r.src() == self.flow.initiator {
            Direction::Forward
        } else {
            Direction::Backward
        }
    }

    /// Appends the packet and reports whether the flow is now closed.
    fn push(&mut self, record: PacketRecord, direction: Direction) -> bool {
        let flags = record.tcp_flags;
        self.flow.end_ts = record.timestamp_us;
        self.flow.packets.push(FlowPacket { record, direction });
        self.after(flags, direction)
    }

    fn after(&mut self, flags: TcpFlags, direction: Direction) -> bool {
        if flags.has(TcpFlags::RST) {
            return true;
        }
        if self.teardown.finished {
            return true;
        }
        if flags.has(TcpFlags::FIN) {
            match direction {
                Direction::Forward => self.teardown.fin_fwd = true,
                Direction::Backward => self.teardown.fin_bwd = true,
            }
            self.teardown.finished = self.teardown.fin_fwd && self.teardown.fin_bwd;
        }
        false
    }

    fn accepts_after_finish(&self, r: &PacketRecord) -> bool {
        r.tcp_flags.0 == TcpFlags::ACK && r.payload_len == 0
    }
}

/// Groups packets into bidirectional flows.
///
/// Packets are stably ordered by timestamp first. A flow closes on an idle
/// gap or age beyond the timeouts, on RST, or once both sides have sent FIN
/// (a single bare ACK following the second FIN is kept in the flow). The
/// result is sorted by start timestamp.
pub fn assemble_flows(packets: Vec<PacketRecord>, timeouts: &FlowTimeouts) -> Vec<Flow> {
    let mut packets = packets;
    packets.sort_by_key(|p| p.timestamp_us);

    // Slots are allocated in order of first packet, so slot order is start order.
    let mut slots: Vec<Option<Open>> = Vec::new();
    let mut done: Vec<Option<Flow>> = Vec::new();
    let mut table: HashMap<FlowKey, usize> = HashMap::new();

    for record in packets {
        let key = FlowKey::of(&record);
        let ts = record.timestamp_us;
        if let Some(&slot) = table.get(&key) {
            let open = slots[slot].as_mut().expect("table points at open flows");
            let stale = open.expired(ts, timeouts)
                || (open.teardown.finished && !open.accepts_after_finish(&record));
            if !stale {
                let direction = open.direction_of(&record);
                if open.push(record, direction) {
                    done[slot] = slots[slot].take().map(|o| o.flow);
                    table.remove(&key);
                }
                continue;
            }
            done[slot] = slots[slot].take().map(|o| o.flow);
            table.remove(&key);
        }
        let mut open = Open::start(record);
        let closed = open.after(open.flow.packets[0].record.tcp_flags, Direction::Forward);
        let slot = slots.len();
        if closed {
            slots.push(None);
            done.push(Some(open.flow));
        } else {
            slots.push(Some(open));
            done.push(None);
            table.insert(key, slot);
        }
    }

    slots
        .into_iter()
        .zip(done)
        .map(|(open, finished)| {
            finished
                .or_else(|| open.map(|o| o.flow))
                .expect("every slot holds a flow")
        })
        .collect()
}

/// Writes one JSON object per flow.
pub fn write_flows_jsonl<W: Write>(flows: &[Flow], mut out: W) -> Result<()> {
    for f in flows {
        serde_json::to_writer(&mut out, f).map_err(|e| Error::Format(e.to_string()))?;
        out.write_all(b"\n")
            .map_err(|e| Error::io("<flow output>", e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::Protocol;

    fn pkt(ts_s: f64, from_a: bool, flags: u8) -> PacketRecord {
        let (a, b) = (("10.0.0.1", 1234u16), ("10.0.0.2", 80u16));
        let (s, d) = if from_a { (a, b) } else { (b, a) };
        PacketRecord {
            timestamp_us: (ts_s * 1e6) as u64,
            src_ip: s.0.parse().unwrap(),
            dst_ip: d.0.parse().unwrap(),
            src_port: s.1,
            dst_port: d.1,
            protocol: Protocol::Tcp,
            header_len: 40,
            payload_len: 10,
            tcp_flags: TcpFlags(flags),
            window_size: 100,
        }
    }

    fn sizes(flows: &[Flow]) -> Vec<usize> {
        flows.iter().map(Flow::len).collect()
    }

    #[test]
    fn one_second_apart_is_one_flow() {
        let flows = assemble_flows(vec![pkt(0.0, true, 0), pkt(1.0, true, 0)], &FlowTimeouts::default());
        assert_eq!(sizes(&flows), vec![2]);
    }

    #[test]
    fn reply_joins_as_backward() {
        let flows = assemble_flows(vec![pkt(0.0, true, 0), pkt(0.5, false, 0)], &FlowTimeouts::default());
        assert_eq!(flows.len(), 1);
        assert_eq!(flows[0].packets[1].direction, Direction::Backward);
    }

    #[test]
    fn idle_gap_splits() {
        let flows = assemble_flows(vec![pkt(0.0, true, 0), pkt(120.0, true, 0)], &FlowTimeouts::default());
        assert_eq!(sizes(&flows), vec![1, 1]);
    }

    #[test]
    fn active_timeout_splits_busy_flow() {
        let packets: Vec<_> = (0..=26).map(|i| pkt(i as f64 * 5.0, true, 0)).collect();
        let flows = assemble_flows(packets, &FlowTimeouts::default());
        // 0..=120 s fits (age exactly 120 is not beyond), 125 s opens a new flow
        assert_eq!(sizes(&flows), vec![25, 2]);
    }

    #[test]
    fn rst_closes_flow() {
        let flows = assemble_flows(
            vec![pkt(0.0, true, 0), pkt(1.0, false, TcpFlags::RST), pkt(2.0, true, 0)],
            &FlowTimeouts::default(),
        );
        assert_eq!(sizes(&flows), vec![2, 1]);
    }

    #[test]
    fn fin_exchange_keeps_final_ack() {
        let fa = TcpFlags::FIN | TcpFlags::ACK;
        let flows = assemble_flows(
            vec![
                pkt(0.0, true, TcpFlags::SYN),
                pkt(1.0, true, fa),
                pkt(1.1, false, fa),
                PacketRecord {
                    payload_len: 0,
                    ..pkt(1.2, true, TcpFlags::ACK)
                },
                pkt(1.3, true, TcpFlags::SYN),
            ],
            &FlowTimeouts::default(),
        );
        assert_eq!(sizes(&flows), vec![4, 1]);
    }

    #[test]
    fn unordered_input_is_sorted_by_start() {
        let mut other = pkt(0.5, true, 0);
        other.src_port = 999;
        let flows = assemble_flows(vec![pkt(1.0, true, 0), other, pkt(0.0, false, 0)], &FlowTimeouts::default());
        assert_eq!(flows.len(), 2);
        assert!(flows[0].start_ts <= flows[1].start_ts);
        assert_eq!(flows[0].initiator.port, 80);
    }

    #[test]
    fn timeouts_validated() {
        assert!(FlowTimeouts::new(0.0, 10.0).is_err());
        assert!(FlowTimeouts::new(60.0, 60.0).is_err());
        assert!(FlowTimeouts::new(60.0, 120.0).is_ok());
    }
}
