//! Classic libpcap capture files (microsecond and nanosecond variants,
//! either byte order).

use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};

use super::packet::{PacketRecord, Protocol, TcpFlags};
use super::Ingested;
use crate::error::{Error, Result};

const LINKTYPE_NULL: u32 = 0;
const LINKTYPE_ETHERNET: u32 = 1;
const LINKTYPE_RAW: u32 = 101;
const LINKTYPE_LINUX_SLL: u32 = 113;
const LINKTYPE_IPV4: u32 = 228;
const LINKTYPE_IPV6: u32 = 229;

#[derive(Clone, Copy)]
struct Header {
    swapped: bool,
    nanos: bool,
    linktype: u32,
}

impl Header {
    fn u32(&self, b: &[u8]) -> u32 {
        let a = [b[0], b[1], b[2], b[3]];
        if self.swapped {
            u32::from_be_bytes(a)
        } else {
            u32::from_le_bytes(a)
        }
    }
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 24 {
        return Err(Error::Format(format!(
            "pcap global header truncated ({} of 24 bytes)",
            bytes.len()
        )));
    }
    let magic = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let (swapped, nanos) = match magic {
        0xa1b2_c3d4 => (false, false),
        0xa1b2_3c4d => (false, true),
        0xd4c3_b2a1 => (true, false),
        0x4d3c_b2a1 => (true, true),
        m => return Err(Error::Format(format!("not a pcap file (magic {m:#010x})"))),
    };
    let mut h = Header {
        swapped,
        nanos,
        linktype: 0,
    };
    h.linktype = h.u32(&bytes[20..24]) & 0x0fff_ffff;
    match h.linktype {
        LINKTYPE_NULL | LINKTYPE_ETHERNET | LINKTYPE_RAW | LINKTYPE_LINUX_SLL | LINKTYPE_IPV4
        | LINKTYPE_IPV6 => Ok(h),
        other => Err(Error::Format(format!("unsupported pcap link type {other}"))),
    }
}

/// Parses a whole pcap file held in memory.
pub fn read_pcap(bytes: &[u8]) -> Result<Ingested> {
    let header = parse_header(bytes)?;
    let mut out = Ingested::default();
    let mut pos = 24;
    let mut index = 0u64;
    while pos < bytes.len() {
        if bytes.len() - pos < 16 {
            return Err(Error::Format(format!("record {index}: truncated record header")));
        }
        let ts_sec = u64::from(header.u32(&bytes[pos..]));
        let ts_frac = u64::from(header.u32(&bytes[pos + 4..]));
        let incl = header.u32(&bytes[pos + 8..]) as usize;
        pos += 16;
        if bytes.len() - pos < incl {
            return Err(Error::Format(format!("record {index}: truncated packet data")));
        }
        let frame = &bytes[pos..pos + incl];
        pos += incl;
        index += 1;
        let ts_us = ts_sec * 1_000_000 + if header.nanos { ts_frac / 1000 } else { ts_frac };
        match decode_frame(header.linktype, frame, ts_us) {
            Decoded::Packet(p) => out.packets.push(p),
            Decoded::NonIp => out.stats.non_ip += 1,
            Decoded::Fragment => out.stats.fragments += 1,
            Decoded::Truncated => out.stats.truncated += 1,
        }
    }
    Ok(out)
}

enum Decoded {
    Packet(PacketRecord),
    NonIp,
    Fragment,
    Truncated,
}

fn be16(b: &[u8], at: usize) -> Option<u16> {
    Some(u16::from_be_bytes([*b.get(at)?, *b.get(at + 1)?]))
}

fn decode_frame(linktype: u32, frame: &[u8], ts_us: u64) -> Decoded {
    let (ethertype, l3) = match linktype {
        LINKTYPE_ETHERNET => {
            let Some(mut et) = be16(frame, 12) else {
                return Decoded::Truncated;
            };
            let mut off = 14;
            // 802.1Q / 802.1ad tags
            while et == 0x8100 || et == 0x88a8 {
                let Some(inner) = be16(frame, off + 2) else {
                    return Decoded::Truncated;
                };
                et = inner;
                off += 4;
            }
            (et, off)
        }
        LINKTYPE_LINUX_SLL => {
            let Some(et) = be16(frame, 14) else {
                return Decoded::Truncated;
            };
            (et, 16)
        }
        LINKTYPE_NULL => {
            if frame.len() < 4 {
                return Decoded::Truncated;
            }
            let fam = u32::from_le_bytes([frame[0], frame[1], frame[2], frame[3]]);
            let fam = if fam > 0xffff { fam.swap_bytes() } else { fam };
            match fam {
                2 => (0x0800, 4),
                24 | 28 | 30 => (0x86dd, 4),
                _ => return Decoded::NonIp,
            }
        }
        LINKTYPE_IPV4 => (0x0800, 0),
        LINKTYPE_IPV6 => (0x86dd, 0),
        _ => match frame.first().map(|b| b >> 4) {
            Some(4) => (0x0800, 0),
            Some(6) => (0x86dd, 0),
            _ => return Decoded::NonIp,
        },
    };
    let Some(ip) = frame.get(l3..) else {
        return Decoded::Truncated;
    };
    match ethertype {
        0x0800 => decode_ipv4(ip, ts_us),
        0x86dd => decode_ipv6(ip, ts_us),
        _ => Decoded::NonIp,
    }
}

fn decode_ipv4(ip: &[u8], ts_us: u64) -> Decoded {
    if ip.len() < 20 || ip[0] >> 4 != 4 {
        return if ip.is_empty() || ip[0] >> 4 == 4 {
            Decoded::Truncated
        } else {
            Decoded::NonIp
        };
    }
    let ihl = usize::from(ip[0] & 0x0f) * 4;
    let total = usize::from(u16::from_be_bytes([ip[2], ip[3]]));
    let frag_offset = u16::from_be_bytes([ip[6], ip[7]]) & 0x1fff;
    if ihl < 20 || total < ihl {
        return Decoded::Truncated;
    }
    if frag_offset != 0 {
        return Decoded::Fragment;
    }
    let src = IpAddr::V4(Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]));
    let dst = IpAddr::V4(Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]));
    transport(ip, ihl, total, ip[9], src, dst, ts_us)
}

fn decode_ipv6(ip: &[u8], ts_us: u64) -> Decoded {
    if ip.len() < 40 {
        return Decoded::Truncated;
    }
    if ip[0] >> 4 != 6 {
        return Decoded::NonIp;
    }
    let total = 40 + usize::from(u16::from_be_bytes([ip[4], ip[5]]));
    let mut next = ip[6];
    let mut off = 40;
    loop {
        match next {
            // hop-by-hop, routing, destination options
            0 | 43 | 60 => {
                let (Some(&nh), Some(&len)) = (ip.get(off), ip.get(off + 1)) else {
                    return Decoded::Truncated;
                };
                next = nh;
                off += (usize::from(len) + 1) * 8;
            }
            44 => {
                let (Some(&nh), Some(frag)) = (ip.get(off), be16(ip, off + 2)) else {
                    return Decoded::Truncated;
                };
                if frag >> 3 != 0 {
                    return Decoded::Fragment;
                }
                next = nh;
                off += 8;
            }
            51 => {
                let (Some(&nh), Some(&len)) = (ip.get(off), ip.get(off + 1)) else {
                    return Decoded::Truncated;
                };
                next = nh;
                off += (usize::from(len) + 2) * 4;
            }
            _ => break,
        }
    }
    let mut src = [0u8; 16];
    let mut dst = [0u8; 16];
    src.copy_from_slice(&ip[8..24]);
    dst.copy_from_slice(&ip[24..40]);
    transport(
        ip,
        off,
        total,
        next,
        IpAddr::V6(Ipv6Addr::from(src)),
        IpAddr::V6(Ipv6Addr::from(dst)),
        ts_us,
    )
}

/// Reads the transport header at `off`; `total` is the IP-declared packet length.
fn transport(ip: &[u8], off: usize, total: usize, proto: u8, src: IpAddr, dst: IpAddr, ts_us: u64) -> Decoded {
    let protocol = Protocol::from_number(proto);
    let (src_port, dst_port, th_len, flags, window) = match protocol {
        Protocol::Tcp => {
            let Some(t) = ip.get(off..off + 20) else {
                return Decoded::Truncated;
            };
            let data_off = usize::from(t[12] >> 4) * 4;
            (
                u16::from_be_bytes([t[0], t[1]]),
                u16::from_be_bytes([t[2], t[3]]),
                data_off.max(20),
                t[13],
                u32::from(u16::from_be_bytes([t[14], t[15]])),
            )
        }
        Protocol::Udp => {
            let Some(t) = ip.get(off..off + 8) else {
                return Decoded::Truncated;
            };
            (u16::from_be_bytes([t[0], t[1]]), u16::from_be_bytes([t[2], t[3]]), 8, 0, 0)
        }
        Protocol::Other(_) => (0, 0, 0, 0, 0),
    };
    let header_len = off + th_len;
    if total < header_len {
        return Decoded::Truncated;
    }
    Decoded::Packet(PacketRecord {
        timestamp_us: ts_us,
        src_ip: src,
        dst_ip: dst,
        src_port,
        dst_port,
        protocol,
        header_len: header_len as u32,
        payload_len: (total - header_len) as u32,
        tcp_flags: TcpFlags(flags),
        window_size: window,
    })
}
