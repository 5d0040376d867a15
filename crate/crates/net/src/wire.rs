//! Datagram wire format.
//!
//! ```text
//! offset  size  field
//!      0     2  magic 0x4654
//!      2     1  version (1)
//!      3     1  message type
//!      4     4  frame id
//!      8     4  payload offset within the frame's bitstream
//!     12     4  frame bitstream length
//!     16     1  flags (bit 0: end of tensor)
//!     17     2  payload length
//!     19     -  payload
//! ```
//!
//! All integers are little-endian.

use thiserror::Error;

pub const MAGIC: u16 = 0x4654;
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 19;
pub const FLAG_END_OF_TENSOR: u8 = 0x01;
/// `packet_offset` that marks a confirmation of a RESULT message.
pub const RESULT_ACK: u32 = u32::MAX;
pub const CONFIRMATION_LEN: usize = 20;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("buffer of {0} bytes is shorter than the header")]
    Short(usize),
    #[error("bad magic {0:#06x}")]
    BadMagic(u16),
    #[error("unsupported version {0}")]
    Version(u8),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("payload length {declared} does not match {actual} bytes present")]
    PayloadLength { declared: usize, actual: usize },
    #[error("payload of {0} bytes exceeds the 16-bit length field")]
    PayloadTooLong(usize),
    #[error("data message range {offset}+{len} is inconsistent with length {total} or end flag")]
    DataRange { offset: u32, len: usize, total: u32 },
    #[error("confirmation payload must be {CONFIRMATION_LEN} bytes, got {0}")]
    ConfirmationLength(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Data = 1,
    Confirm = 2,
    ModelSwitch = 3,
    ModelReady = 4,
    Result = 5,
}

impl MsgType {
    pub const ALL: [MsgType; 5] = [
        MsgType::Data,
        MsgType::Confirm,
        MsgType::ModelSwitch,
        MsgType::ModelReady,
        MsgType::Result,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MsgType::Data => "data",
            MsgType::Confirm => "confirm",
            MsgType::ModelSwitch => "model_switch",
            MsgType::ModelReady => "model_ready",
            MsgType::Result => "result",
        }
    }
}

impl TryFrom<u8> for MsgType {
    type Error = WireError;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        MsgType::ALL
            .into_iter()
            .find(|t| *t as u8 == v)
            .ok_or(WireError::UnknownType(v))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireMessage {
    pub msg_type: MsgType,
    pub frame_id: u32,
    pub offset: u32,
    pub total_len: u32,
    pub flags: u8,
    pub payload: Vec<u8>,
}

impl WireMessage {
    /// A DATA message; the end flag is derived from the range.
    pub fn data(
        frame_id: u32,
        offset: u32,
        total_len: u32,
        payload: Vec<u8>,
    ) -> Result<Self, WireError> {
        let end = offset as u64 + payload.len() as u64 == total_len as u64;
        let m = Self {
            msg_type: MsgType::Data,
            frame_id,
            offset,
            total_len,
            flags: if end { FLAG_END_OF_TENSOR } else { 0 },
            payload,
        };
        m.check()?;
        Ok(m)
    }

    /// A control message whose payload is opaque (JSON for the pipeline).
    pub fn control(msg_type: MsgType, frame_id: u32, payload: Vec<u8>) -> Self {
        Self {
            msg_type,
            frame_id,
            offset: 0,
            total_len: payload.len() as u32,
            flags: 0,
            payload,
        }
    }

    pub fn confirm(c: &Confirmation) -> Self {
        Self {
            msg_type: MsgType::Confirm,
            frame_id: c.frame_id,
            offset: 0,
            total_len: CONFIRMATION_LEN as u32,
            flags: 0,
            payload: c.payload_bytes().to_vec(),
        }
    }

    pub fn is_end_of_tensor(&self) -> bool {
        self.flags & FLAG_END_OF_TENSOR != 0
    }

    pub fn wire_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    fn check(&self) -> Result<(), WireError> {
        if self.payload.len() > u16::MAX as usize {
            return Err(WireError::PayloadTooLong(self.payload.len()));
        }
        if self.msg_type == MsgType::Data {
            let end = self.offset as u64 + self.payload.len() as u64;
            if end > self.total_len as u64
                || (end == self.total_len as u64) != self.is_end_of_tensor()
            {
                return Err(WireError::DataRange {
                    offset: self.offset,
                    len: self.payload.len(),
                    total: self.total_len,
                });
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        self.check()?;
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(&MAGIC.to_le_bytes());
        out.push(VERSION);
        out.push(self.msg_type as u8);
        out.extend_from_slice(&self.frame_id.to_le_bytes());
        out.extend_from_slice(&self.offset.to_le_bytes());
        out.extend_from_slice(&self.total_len.to_le_bytes());
        out.push(self.flags);
        out.extend_from_slice(&(self.payload.len() as u16).to_le_bytes());
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        if bytes.len() < HEADER_LEN {
            return Err(WireError::Short(bytes.len()));
        }
        let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let magic = u16::from_le_bytes([bytes[0], bytes[1]]);
        if magic != MAGIC {
            return Err(WireError::BadMagic(magic));
        }
        if bytes[2] != VERSION {
            return Err(WireError::Version(bytes[2]));
        }
        let msg_type = MsgType::try_from(bytes[3])?;
        let declared = u16::from_le_bytes([bytes[17], bytes[18]]) as usize;
        let actual = bytes.len() - HEADER_LEN;
        if declared != actual {
            return Err(WireError::PayloadLength { declared, actual });
        }
        let m = Self {
            msg_type,
            frame_id: u32_at(4),
            offset: u32_at(8),
            total_len: u32_at(12),
            flags: bytes[16],
            payload: bytes[HEADER_LEN..].to_vec(),
        };
        m.check()?;
        Ok(m)
    }
}

/// Receiver's acknowledgement of one packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Confirmation {
    pub frame_id: u32,
    /// Offset of the confirmed packet; [`RESULT_ACK`] for RESULT messages.
    pub packet_offset: u32,
    /// Distinct bytes received so far for the frame.
    pub cumulative_bytes: u64,
    pub recv_time_us: u64,
}

impl Confirmation {
    fn payload_bytes(&self) -> [u8; CONFIRMATION_LEN] {
        let mut out = [0u8; CONFIRMATION_LEN];
        out[..4].copy_from_slice(&self.packet_offset.to_le_bytes());
        out[4..12].copy_from_slice(&self.cumulative_bytes.to_le_bytes());
        out[12..].copy_from_slice(&self.recv_time_us.to_le_bytes());
        out
    }

    pub fn from_message(m: &WireMessage) -> Result<Self, WireError> {
        if m.payload.len() != CONFIRMATION_LEN {
            return Err(WireError::ConfirmationLength(m.payload.len()));
        }
        let p = &m.payload;
        Ok(Self {
            frame_id: m.frame_id,
            packet_offset: u32::from_le_bytes(p[..4].try_into().unwrap()),
            cumulative_bytes: u64::from_le_bytes(p[4..12].try_into().unwrap()),
            recv_time_us: u64::from_le_bytes(p[12..].try_into().unwrap()),
        })
    }
}
