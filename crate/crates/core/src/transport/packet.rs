//! Datagram framing.
//!
//! ```text
//! offset  size  field
//!      0     2  magic 0xDA 0x9C
//!      2     1  version
//!      3     1  signal_type
//!      4     2  user_id            (LE)
//!      6     4  seq                (LE)
//!     10     8  send_timestamp_us  (LE)
//!     18     2  payload_len        (LE)
//!     20     n  payload
//! ```

use thiserror::Error;

pub const MAGIC: [u8; 2] = [0xDA, 0x9C];
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 20;
pub const MAX_PAYLOAD: usize = 1400;
pub const MAX_DATAGRAM: usize = HEADER_LEN + MAX_PAYLOAD;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum SignalType {
    Pose = 0,
    Control = 1,
    Telemetry = 2,
}

impl SignalType {
    pub const ALL: [SignalType; 3] = [SignalType::Pose, SignalType::Control, SignalType::Telemetry];

    pub fn from_u8(v: u8) -> Option<SignalType> {
        match v {
            0 => Some(SignalType::Pose),
            1 => Some(SignalType::Control),
            2 => Some(SignalType::Telemetry),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SignalType::Pose => "pose",
            SignalType::Control => "control",
            SignalType::Telemetry => "telemetry",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PacketError {
    #[error("payload of {0} bytes exceeds {MAX_PAYLOAD}")]
    Oversize(usize),
    #[error("corrupt packet: {0}")]
    Corrupt(&'static str),
}

/// Fixed-size part of a packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PacketHeader {
    pub signal_type: SignalType,
    pub user_id: u16,
    pub seq: u32,
    pub send_timestamp_us: u64,
    pub payload_len: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignalPacket {
    pub signal_type: SignalType,
    pub user_id: u16,
    pub seq: u32,
    pub send_timestamp_us: u64,
    pub payload: Vec<u8>,
}

impl SignalPacket {
    pub fn new(signal_type: SignalType, user_id: u16, seq: u32, send_timestamp_us: u64, payload: Vec<u8>) -> Self {
        SignalPacket {
            signal_type,
            user_id,
            seq,
            send_timestamp_us,
            payload,
        }
    }

    pub fn wire_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, PacketError> {
        frame_packet(
            self.signal_type,
            self.user_id,
            self.seq,
            self.send_timestamp_us,
            &self.payload,
        )
    }
}

/// Writes a packet into `buf`, returning the number of bytes used.
/// `buf` must hold at least `HEADER_LEN + payload.len()` bytes.
pub fn write_packet(
    buf: &mut [u8],
    signal_type: SignalType,
    user_id: u16,
    seq: u32,
    send_timestamp_us: u64,
    payload: &[u8],
) -> Result<usize, PacketError> {
    if payload.len() > MAX_PAYLOAD {
        return Err(PacketError::Oversize(payload.len()));
    }
    let total = HEADER_LEN + payload.len();
    assert!(buf.len() >= total, "buffer too small for packet");
    buf[0..2].copy_from_slice(&MAGIC);
    buf[2] = VERSION;
    buf[3] = signal_type as u8;
    buf[4..6].copy_from_slice(&user_id.to_le_bytes());
    buf[6..10].copy_from_slice(&seq.to_le_bytes());
    buf[10..18].copy_from_slice(&send_timestamp_us.to_le_bytes());
    buf[18..20].copy_from_slice(&(payload.len() as u16).to_le_bytes());
    buf[HEADER_LEN..total].copy_from_slice(payload);
    Ok(total)
}

pub fn frame_packet(
    signal_type: SignalType,
    user_id: u16,
    seq: u32,
    send_timestamp_us: u64,
    payload: &[u8],
) -> Result<Vec<u8>, PacketError> {
    if payload.len() > MAX_PAYLOAD {
        return Err(PacketError::Oversize(payload.len()));
    }
    let mut out = vec![0u8; HEADER_LEN + payload.len()];
    write_packet(&mut out, signal_type, user_id, seq, send_timestamp_us, payload)?;
    Ok(out)
}

/// Validates magic, version, signal type and length consistency without
/// copying the payload.
pub fn parse_header(bytes: &[u8]) -> Result<PacketHeader, PacketError> {
    if bytes.len() < HEADER_LEN {
        return Err(PacketError::Corrupt("short buffer"));
    }
    if bytes[0..2] != MAGIC {
        return Err(PacketError::Corrupt("bad magic"));
    }
    if bytes[2] != VERSION {
        return Err(PacketError::Corrupt("unsupported version"));
    }
    let signal_type = SignalType::from_u8(bytes[3]).ok_or(PacketError::Corrupt("unknown signal type"))?;
    let payload_len = u16::from_le_bytes([bytes[18], bytes[19]]);
    if payload_len as usize > MAX_PAYLOAD {
        return Err(PacketError::Corrupt("payload length over limit"));
    }
    if bytes.len() != HEADER_LEN + payload_len as usize {
        return Err(PacketError::Corrupt("length mismatch"));
    }
    Ok(PacketHeader {
        signal_type,
        user_id: u16::from_le_bytes([bytes[4], bytes[5]]),
        seq: u32::from_le_bytes(bytes[6..10].try_into().unwrap()),
        send_timestamp_us: u64::from_le_bytes(bytes[10..18].try_into().unwrap()),
        payload_len,
    })
}

pub fn parse_packet(bytes: &[u8]) -> Result<SignalPacket, PacketError> {
    let h = parse_header(bytes)?;
    Ok(SignalPacket {
        signal_type: h.signal_type,
        user_id: h.user_id,
        seq: h.seq,
        send_timestamp_us: h.send_timestamp_us,
        payload: bytes[HEADER_LEN..].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_only() {
        let b = frame_packet(SignalType::Control, 0, 0, 0, &[]).unwrap();
        assert_eq!(b.len(), HEADER_LEN);
        assert_eq!(&b[..2], &[0xDA, 0x9C]);
    }

    #[test]
    fn exact_layout() {
        let b = frame_packet(SignalType::Telemetry, 0x0102, 0x0A0B0C0D, 0x1122334455667788, &[7, 8, 9]).unwrap();
        assert_eq!(
            b,
            vec![
                0xDA, 0x9C, 1, 2, 0x02, 0x01, 0x0D, 0x0C, 0x0B, 0x0A, 0x88, 0x77, 0x66, 0x55, 0x44, 0x33, 0x22,
                0x11, 3, 0, 7, 8, 9
            ]
        );
    }

    #[test]
    fn oversize_rejected() {
        assert_eq!(
            frame_packet(SignalType::Pose, 1, 1, 1, &[0; MAX_PAYLOAD + 1]),
            Err(PacketError::Oversize(MAX_PAYLOAD + 1))
        );
        assert!(frame_packet(SignalType::Pose, 1, 1, 1, &[0; MAX_PAYLOAD]).is_ok());
    }

    #[test]
    fn corrupt_inputs() {
        let good = frame_packet(SignalType::Pose, 3, 9, 77, &[1, 2, 3, 4]).unwrap();
        let mut flipped = good.clone();
        flipped[0] ^= 0xFF;
        assert!(matches!(parse_packet(&flipped), Err(PacketError::Corrupt(_))));
        assert!(matches!(parse_packet(&good[..17]), Err(PacketError::Corrupt(_))));
        assert!(matches!(parse_packet(&good[..good.len() - 1]), Err(PacketError::Corrupt(_))));
        let mut extra = good.clone();
        extra.push(0);
        assert!(parse_packet(&extra).is_err());
        let mut bad_type = good.clone();
        bad_type[3] = 9;
        assert!(parse_packet(&bad_type).is_err());
        let mut bad_version = good;
        bad_version[2] = 2;
        assert!(parse_packet(&bad_version).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(t in 0u8..3, user in any::<u16>(), seq in any::<u32>(), ts in any::<u64>(),
                      payload in prop::collection::vec(any::<u8>(), 0..MAX_PAYLOAD)) {
            let st = SignalType::from_u8(t).unwrap();
            let bytes = frame_packet(st, user, seq, ts, &payload).unwrap();
            prop_assert_eq!(bytes.len(), HEADER_LEN + payload.len());
            let p = parse_packet(&bytes).unwrap();
            prop_assert_eq!(p, SignalPacket::new(st, user, seq, ts, payload));
        }

        #[test]
        fn parse_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..1600)) {
            let _ = parse_packet(&bytes);
        }
    }
}
