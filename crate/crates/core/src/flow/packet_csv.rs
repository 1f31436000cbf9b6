//! Line-oriented packet log, one packet per row after a fixed header.

use std::io::{Read, Write};

use super::packet::{PacketRecord, Protocol, TcpFlags};
use crate::error::{Error, Result};

pub const PACKET_CSV_COLUMNS: [&str; 10] = [
    "timestamp_us",
    "src_ip",
    "src_port",
    "dst_ip",
    "dst_port",
    "protocol",
    "header_len",
    "payload_len",
    "tcp_flags_hex",
    "window_size",
];

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, line: u64, what: &str) -> Result<T> {
    let raw = rec.get(i).unwrap_or("").trim();
    raw.parse().map_err(|_| Error::Parse {
        line,
        message: format!("invalid {what} {raw:?}"),
    })
}

/// Parses a packet-csv document; the header row must match
/// [`PACKET_CSV_COLUMNS`].
pub fn read_packet_csv<R: Read>(reader: R) -> Result<Vec<PacketRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    let names: Vec<&str> = headers.iter().map(str::trim).collect();
    if names != PACKET_CSV_COLUMNS {
        return Err(Error::Parse {
            line: 1,
            message: format!("header must be {}", PACKET_CSV_COLUMNS.join(",")),
        });
    }
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != PACKET_CSV_COLUMNS.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", PACKET_CSV_COLUMNS.len(), row.len()),
            });
        }
        let port = |i: usize, what: &str| -> Result<u16> {
            let v: u64 = field(&row, i, line, what)?;
            u16::try_from(v).map_err(|_| Error::Parse {
                line,
                message: format!("{what} {v} out of range 0-65535"),
            })
        };
        let flags_raw = row.get(8).unwrap_or("").trim();
        let flags_hex = flags_raw
            .strip_prefix("0x")
            .or_else(|| flags_raw.strip_prefix("0X"))
            .unwrap_or(flags_raw);
        let tcp_flags = u8::from_str_radix(flags_hex, 16).map_err(|_| Error::Parse {
            line,
            message: format!("invalid tcp_flags_hex {flags_raw:?}"),
        })?;
        let protocol: Protocol = row.get(5).unwrap_or("").parse().map_err(|e: Error| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let rec = PacketRecord {
            timestamp_us: field(&row, 0, line, "timestamp_us")?,
            src_ip: field(&row, 1, line, "src_ip")?,
            src_port: port(2, "src_port")?,
            dst_ip: field(&row, 3, line, "dst_ip")?,
            dst_port: port(4, "dst_port")?,
            protocol,
            header_len: field(&row, 6, line, "header_len")?,
            payload_len: field(&row, 7, line, "payload_len")?,
            tcp_flags: TcpFlags(tcp_flags),
            window_size: field(&row, 9, line, "window_size")?,
        };
        rec.validate().map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_packet_csv<W: Write>(writer: W, records: &[PacketRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| Error::Format(format!("writing packet-csv: {e}"));
    w.write_record(PACKET_CSV_COLUMNS).map_err(err)?;
    for r in records {
        w.write_record([
            r.timestamp_us.to_string(),
            r.src_ip.to_string(),
            r.src_port.to_string(),
            r.dst_ip.to_string(),
            r.dst_port.to_string(),
            r.protocol.to_string(),
            r.header_len.to_string(),
            r.payload_len.to_string(),
            format!("0x{:02x}", r.tcp_flags.0),
            r.window_size.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush()
        .map_err(|e| Error::Format(format!("writing packet-csv: {e}")))
}
