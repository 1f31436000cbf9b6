use std::fmt;
use std::net::IpAddr;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Protocol {
    Tcp,
    Udp,
    Other(u8),
}

impl Protocol {
    pub fn from_number(n: u8) -> Protocol {
        match n {
            6 => Protocol::Tcp,
            17 => Protocol::Udp,
            n => Protocol::Other(n),
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Protocol::Tcp => 6,
            Protocol::Udp => 17,
            Protocol::Other(n) => n,
        }
    }

    pub fn has_ports(self) -> bool {
        matches!(self, Protocol::Tcp | Protocol::Udp)
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::Tcp => f.write_str("TCP"),
            Protocol::Udp => f.write_str("UDP"),
            Protocol::Other(n) => write!(f, "{n}"),
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            t if t.eq_ignore_ascii_case("tcp") => Ok(Protocol::Tcp),
            t if t.eq_ignore_ascii_case("udp") => Ok(Protocol::Udp),
            t => t
                .parse::<u8>()
                .map(Protocol::from_number)
                .map_err(|_| Error::Argument(format!("invalid protocol {t:?}"))),
        }
    }
}

impl From<Protocol> for String {
    fn from(p: Protocol) -> String {
        p.to_string()
    }
}

impl TryFrom<String> for Protocol {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// TCP flag bitmap in header bit order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TcpFlags(pub u8);

impl TcpFlags {
    pub const FIN: u8 = 0x01;
    pub const SYN: u8 = 0x02;
    pub const RST: u8 = 0x04;
    pub const PSH: u8 = 0x08;
    pub const ACK: u8 = 0x10;
    pub const URG: u8 = 0x20;
    pub const ECE: u8 = 0x40;
    pub const CWR: u8 = 0x80;

    pub fn has(self, flag: u8) -> bool {
        self.0 & flag != 0
    }
}

/// One captured packet.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketRecord {
    /// Microseconds since the epoch.
    pub timestamp_us: u64,
    pub src_ip: IpAddr,
    pub dst_ip: IpAddr,
    pub src_port: u16,
    pub dst_port: u16,
    pub protocol: Protocol,
    /// Network plus transport header bytes.
    pub header_len: u32,
    pub payload_len: u32,
    pub tcp_flags: TcpFlags,
    pub window_size: u32,
}

impl PacketRecord {
    pub fn validate(&self) -> Result<()> {
        if !self.protocol.has_ports() && (self.src_port != 0 || self.dst_port != 0) {
            return Err(Error::Argument(format!(
                "protocol {} carries no ports but ports are {}/{}",
                self.protocol, self.src_port, self.dst_port
            )));
        }
        if u64::from(self.header_len) + u64::from(self.payload_len) == 0 {
            return Err(Error::Argument("packet has zero length".into()));
        }
        if self.protocol != Protocol::Tcp && (self.tcp_flags.0 != 0 || self.window_size != 0) {
            return Err(Error::Argument(format!(
                "non-TCP packet ({}) carries TCP flags or window",
                self.protocol
            )));
        }
        Ok(())
    }

    pub fn src(&self) -> Endpoint {
        Endpoint {
            ip: self.src_ip,
            port: self.src_port,
        }
    }

    pub fn dst(&self) -> Endpoint {
        Endpoint {
            ip: self.dst_ip,
            port: self.dst_port,
        }
    }

    pub fn total_len(&self) -> u64 {
        u64::from(self.header_len) + u64::from(self.payload_len)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Endpoint {
    pub ip: IpAddr,
    pub port: u16,
}

/// Direction-free 5-tuple: the smaller endpoint is stored first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FlowKey {
    pub lo: Endpoint,
    pub hi: Endpoint,
    pub protocol: Protocol,
}

impl FlowKey {
    pub fn of(p: &PacketRecord) -> FlowKey {
        let (a, b) = (p.src(), p.dst());
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        FlowKey {
            lo,
            hi,
            protocol: p.protocol,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowPacket {
    pub record: PacketRecord,
    pub direction: Direction,
}

/// Packets of one bidirectional conversation, in timestamp order.
///
/// Forward is the direction of the first packet.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flow {
    pub key: FlowKey,
    pub initiator: Endpoint,
    pub packets: Vec<FlowPacket>,
    pub start_ts: u64,
    pub end_ts: u64,
}

impl Flow {
    /// Builds a flow from already ordered packets, tagging directions
    /// relative to the first packet's source.
    pub fn from_packets(records: Vec<PacketRecord>) -> Result<Flow> {
        let first = records
            .first()
            .ok_or_else(|| Error::Argument("a flow needs at least one packet".into()))?;
        let key = FlowKey::of(first);
        let initiator = first.src();
        let mut last = first.timestamp_us;
        let mut packets = Vec::with_capacity(records.len());
        for r in records {
            if FlowKey::of(&r) != key {
                return Err(Error::Argument("packets belong to different 5-tuples".into()));
            }
            if r.timestamp_us < last {
                return Err(Error::Argument("packets are not in timestamp order".into()));
            }
            last = r.timestamp_us;
            let direction = if r.src() == initiator {
                Direction::Forward
            } else {
                Direction::Backward
            };
            packets.push(FlowPacket { record: r, direction });
        }
        Ok(Flow {
            key,
            initiator,
            start_ts: packets[0].record.timestamp_us,
            end_ts: last,
            packets,
        })
    }

    pub fn len(&self) -> usize {
        self.packets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.packets.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        (self.end_ts - self.start_ts) as f64 / 1e6
    }
}
