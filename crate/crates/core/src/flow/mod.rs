//! Packet ingestion and bidirectional flow assembly.

mod assemble;
mod packet;
mod packet_csv;
mod pcap;

use std::path::Path;

pub use assemble::{assemble_flows, write_flows_jsonl, FlowTimeouts};
pub use packet::{Direction, Endpoint, Flow, FlowKey, FlowPacket, PacketRecord, Protocol, TcpFlags};
pub use packet_csv::{read_packet_csv, write_packet_csv, PACKET_CSV_COLUMNS};
pub use pcap::read_pcap;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaptureFormat {
    Pcap,
    PacketCsv,
}

impl std::str::FromStr for CaptureFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pcap" => Ok(CaptureFormat::Pcap),
            "packet-csv" | "csv" => Ok(CaptureFormat::PacketCsv),
            other => Err(Error::Argument(format!("unknown capture format {other:?}"))),
        }
    }
}

/// Frames that were read but did not yield a packet record.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IngestStats {
    pub non_ip: u64,
    /// Non-initial IP fragments (no transport header to read).
    pub fragments: u64,
    /// Frames too short for the headers they announce.
    pub truncated: u64,
}

#[derive(Clone, Debug, Default)]
pub struct Ingested {
    pub packets: Vec<PacketRecord>,
    pub stats: IngestStats,
}

/// Reads every packet record from `path`, in file order.
pub fn ingest_packets(path: &Path, format: CaptureFormat) -> Result<Ingested> {
    match format {
        CaptureFormat::Pcap => {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            read_pcap(&bytes)
        }
        CaptureFormat::PacketCsv => {
            let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
            Ok(Ingested {
                packets: read_packet_csv(std::io::BufReader::new(file))?,
                stats: IngestStats::default(),
            })
        }
    }
}
