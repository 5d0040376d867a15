//! Sender and receiver state for the tensor stream: packetization,
//! confirmation-driven bandwidth and loss estimates, the send gate, the
//! frame-drop rule, and reassembly.

use std::collections::{BTreeMap, VecDeque};
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::wire::{Confirmation, WireError, WireMessage};

pub const MIN_MSS: usize = 64;
pub const DEFAULT_MSS: usize = 1400;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("mss must be at least {MIN_MSS}, got {0}")]
    Mss(usize),
    #[error("frame {frame_id}: write of {len} bytes at {offset} overruns length {total_len}")]
    Overrun {
        frame_id: u32,
        offset: u64,
        len: usize,
        total_len: u32,
    },
    #[error("frame {0} is still incomplete in the send buffer")]
    Interleaved(u32),
    #[error("frame {frame_id}: total length {got} conflicts with {expected}")]
    TotalLength {
        frame_id: u32,
        expected: u32,
        got: u32,
    },
    #[error("frame {frame_id}: packet at {offset} overlaps received data")]
    Overlap { frame_id: u32, offset: u32 },
    #[error("not a data message")]
    NotData,
    #[error(transparent)]
    Wire(#[from] WireError),
}

#[derive(Debug, Clone)]
struct PendingFrame {
    frame_id: u32,
    total_len: u32,
    /// Bitstream offset of `data[0]`.
    offset: u64,
    data: VecDeque<u8>,
}

impl PendingFrame {
    fn written(&self) -> u64 {
        self.offset + self.data.len() as u64
    }

    fn is_complete(&self) -> bool {
        self.written() == self.total_len as u64
    }
}

/// Bytes written by the application, waiting to be cut into packets.
#[derive(Debug, Clone, Default)]
pub struct SendBuffer {
    frames: VecDeque<PendingFrame>,
}

impl SendBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append part of frame `frame_id`'s bitstream.
    pub fn write(
        &mut self,
        frame_id: u32,
        total_len: u32,
        chunk: &[u8],
    ) -> Result<(), ProtocolError> {
        let same = self
            .frames
            .back()
            .is_some_and(|f| f.frame_id == frame_id && !f.is_complete());
        if !same {
            if let Some(last) = self.frames.back().filter(|f| !f.is_complete()) {
                return Err(ProtocolError::Interleaved(last.frame_id));
            }
            self.frames.push_back(PendingFrame {
                frame_id,
                total_len,
                offset: 0,
                data: VecDeque::new(),
            });
        }
        let f = self.frames.back_mut().expect("just ensured");
        if f.total_len != total_len {
            return Err(ProtocolError::TotalLength {
                frame_id,
                expected: f.total_len,
                got: total_len,
            });
        }
        if f.written() + chunk.len() as u64 > total_len as u64 {
            return Err(ProtocolError::Overrun {
                frame_id,
                offset: f.written(),
                len: chunk.len(),
                total_len,
            });
        }
        f.data.extend(chunk);
        Ok(())
    }

    /// Bytes not yet packetized.
    pub fn len(&self) -> usize {
        self.frames.iter().map(|f| f.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cut full-size packets while at least `mss` bytes are pending, and flush
    /// a short final packet as soon as a frame's bitstream is complete.
    /// Partial packets of incomplete frames stay buffered.
    pub fn process(&mut self, mss: usize) -> Result<Vec<WireMessage>, ProtocolError> {
        if mss < MIN_MSS {
            return Err(ProtocolError::Mss(mss));
        }
        let mut out = Vec::new();
        while let Some(f) = self.frames.front_mut() {
            let take = if f.data.len() >= mss {
                mss
            } else if f.is_complete() && !f.data.is_empty() {
                f.data.len()
            } else {
                if f.is_complete() {
                    self.frames.pop_front();
                    continue;
                }
                break;
            };
            let payload: Vec<u8> = f.data.drain(..take).collect();
            out.push(WireMessage::data(
                f.frame_id,
                f.offset as u32,
                f.total_len,
                payload,
            )?);
            f.offset += take as u64;
            if f.is_complete() && f.data.is_empty() {
                self.frames.pop_front();
            }
        }
        Ok(out)
    }
}

/// Packetize one whole bitstream.
pub fn packetize(
    frame_id: u32,
    bitstream: &[u8],
    mss: usize,
) -> Result<Vec<WireMessage>, ProtocolError> {
    let mut b = SendBuffer::new();
    b.write(frame_id, bitstream.len() as u32, bitstream)?;
    b.process(mss)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub window_us: u64,
    pub min_samples: usize,
    /// Bandwidth in bytes/s assumed until enough confirmations arrive.
    pub prior_bandwidth: f64,
    pub loss_alpha: f64,
    /// Round-trip time assumed until the first confirmation.
    pub prior_rtt_us: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            window_us: 1_000_000,
            min_samples: 4,
            prior_bandwidth: 1e6,
            loss_alpha: 0.1,
            prior_rtt_us: 100_000,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct InFlight {
    sent_us: u64,
    bytes: u64,
    deadline_us: u64,
    lost: bool,
}

/// Sender-side view of what the receiver has, built from confirmations.
///
/// A packet still unconfirmed at its deadline (expected drain time of the
/// bytes ahead of it plus two round trips) counts as lost in full; younger
/// packets count as lost in proportion to the loss rate estimate.
#[derive(Debug, Clone)]
pub struct BandwidthEstimator {
    cfg: EstimatorConfig,
    samples: VecDeque<(u64, u64)>,
    packets: BTreeMap<(u32, u32), InFlight>,
    bytes_sent: u64,
    bytes_confirmed: u64,
    loss_ewma: f64,
    min_rtt_us: Option<u64>,
}

impl BandwidthEstimator {
    pub fn new(cfg: EstimatorConfig) -> Self {
        Self {
            cfg,
            samples: VecDeque::new(),
            packets: BTreeMap::new(),
            bytes_sent: 0,
            bytes_confirmed: 0,
            loss_ewma: 0.0,
            min_rtt_us: None,
        }
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.cfg
    }

    pub fn bytes_sent(&self) -> u64 {
        self.bytes_sent
    }

    pub fn bytes_confirmed(&self) -> u64 {
        self.bytes_confirmed
    }

    pub fn loss_rate(&self) -> f64 {
        self.loss_ewma
    }

    pub fn rtt_us(&self) -> u64 {
        self.min_rtt_us.unwrap_or(self.cfg.prior_rtt_us)
    }

    /// Sent but not yet confirmed.
    pub fn outstanding(&self) -> u64 {
        self.bytes_sent - self.bytes_confirmed
    }

    fn in_flight_bytes(&self) -> u64 {
        self.packets
            .values()
            .filter(|p| !p.lost)
            .map(|p| p.bytes)
            .sum()
    }

    /// Record a data packet handed to the network. Resending a packet that
    /// is already tracked restarts its clock without counting its bytes again.
    pub fn on_send(&mut self, frame_id: u32, offset: u32, bytes: u64, now_us: u64) {
        self.refresh(now_us);
        let bw = self.estimate_bandwidth(now_us).max(1.0);
        let ahead = self.in_flight_bytes() + bytes;
        let deadline_us = now_us + (ahead as f64 * 1e6 / bw).ceil() as u64 + 2 * self.rtt_us();
        match self.packets.get_mut(&(frame_id, offset)) {
            Some(p) => {
                p.sent_us = now_us;
                p.deadline_us = deadline_us;
                p.lost = false;
            }
            None => {
                self.bytes_sent += bytes;
                self.packets.insert(
                    (frame_id, offset),
                    InFlight {
                        sent_us: now_us,
                        bytes,
                        deadline_us,
                        lost: false,
                    },
                );
            }
        }
    }

    /// Record a confirmation arriving at `now_us`. Unknown or repeated
    /// confirmations are ignored; returns whether it was new.
    pub fn on_confirm(&mut self, c: &Confirmation, now_us: u64) -> bool {
        let Some(p) = self.packets.remove(&(c.frame_id, c.packet_offset)) else {
            return false;
        };
        self.bytes_confirmed += p.bytes;
        if !p.lost {
            self.update_loss(0.0);
        }
        let delay = now_us.saturating_sub(p.sent_us);
        self.min_rtt_us = Some(self.min_rtt_us.map_or(delay, |m| m.min(delay)));
        self.samples.push_back((c.recv_time_us, p.bytes));
        self.prune(now_us);
        true
    }

    fn update_loss(&mut self, sample: f64) {
        let a = self.cfg.loss_alpha;
        self.loss_ewma = (1.0 - a) * self.loss_ewma + a * sample;
    }

    fn prune(&mut self, now_us: u64) {
        let start = now_us.saturating_sub(self.cfg.window_us);
        while self.samples.front().is_some_and(|&(t, _)| t < start) {
            self.samples.pop_front();
        }
    }

    /// Mark packets past their deadline as lost.
    pub fn refresh(&mut self, now_us: u64) {
        let mut newly_lost = 0;
        for p in self.packets.values_mut() {
            if !p.lost && now_us > p.deadline_us {
                p.lost = true;
                newly_lost += 1;
            }
        }
        for _ in 0..newly_lost {
            self.update_loss(1.0);
        }
    }

    /// Confirmed bytes per second over the window, or the prior while fewer
    /// than `min_samples` confirmations fall inside it.
    pub fn estimate_bandwidth(&self, now_us: u64) -> f64 {
        let start = now_us.saturating_sub(self.cfg.window_us);
        let mut count = 0usize;
        let mut bytes = 0u64;
        let (mut first, mut last) = (u64::MAX, 0u64);
        for &(t, b) in self
            .samples
            .iter()
            .filter(|(t, _)| *t >= start && *t <= now_us)
        {
            count += 1;
            bytes += b;
            first = first.min(t);
            last = last.max(t);
        }
        if count < self.cfg.min_samples || last <= first {
            return self.cfg.prior_bandwidth;
        }
        bytes as f64 * 1e6 / (last - first) as f64
    }

    /// Expected bytes that will never be confirmed.
    pub fn expected_lost(&mut self, now_us: u64) -> f64 {
        self.refresh(now_us);
        let (mut lost, mut live) = (0u64, 0u64);
        for p in self.packets.values() {
            if p.lost {
                lost += p.bytes;
            } else {
                live += p.bytes;
            }
        }
        lost as f64 + self.loss_ewma * live as f64
    }

    /// Bytes expected to still reach the receiver.
    pub fn unreceived(&mut self, now_us: u64) -> f64 {
        let lost = self.expected_lost(now_us);
        self.outstanding() as f64 - lost
    }

    /// The send gate: the server's rate limit has elapsed and nothing is
    /// expected to still be in transit.
    pub fn may_send(
        &mut self,
        now_us: u64,
        last_request_us: Option<u64>,
        rate_limit_us: u64,
    ) -> bool {
        let rate_ok = last_request_us.is_none_or(|t| now_us >= t + rate_limit_us);
        rate_ok && self.unreceived(now_us) <= 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropRule {
    /// Drop when the client would finish before the server or link is free.
    #[default]
    Verbatim,
    /// The negation of `Verbatim`, for comparison runs.
    Inverted,
}

/// Whether to start work on a new frame, given the remaining client
/// processing time and when the server and the link are expected to free up.
pub fn should_process_frame(
    client_remain: f64,
    server_remain: f64,
    bandwidth_remain: f64,
    rule: DropRule,
) -> bool {
    let process = !(client_remain < server_remain || client_remain < bandwidth_remain);
    match rule {
        DropRule::Verbatim => process,
        DropRule::Inverted => !process,
    }
}

/// Receive-side assembly of one frame's bitstream.
#[derive(Debug, Clone)]
pub struct FrameAssembly {
    frame_id: u32,
    total_len: u32,
    chunks: BTreeMap<u32, Vec<u8>>,
    received: u64,
    saw_end: bool,
    first_arrival_us: u64,
}

impl FrameAssembly {
    pub fn new(frame_id: u32, total_len: u32, first_arrival_us: u64) -> Self {
        Self {
            frame_id,
            total_len,
            chunks: BTreeMap::new(),
            received: 0,
            saw_end: false,
            first_arrival_us,
        }
    }

    pub fn frame_id(&self) -> u32 {
        self.frame_id
    }

    pub fn total_len(&self) -> u32 {
        self.total_len
    }

    pub fn received_bytes(&self) -> u64 {
        self.received
    }

    pub fn saw_end(&self) -> bool {
        self.saw_end
    }

    pub fn first_arrival_us(&self) -> u64 {
        self.first_arrival_us
    }

    pub fn is_complete(&self) -> bool {
        self.received == self.total_len as u64
    }

    /// Add a DATA message; returns `true` if it carried new bytes.
    pub fn push(&mut self, m: &WireMessage) -> Result<bool, ProtocolError> {
        if m.msg_type != crate::wire::MsgType::Data {
            return Err(ProtocolError::NotData);
        }
        if m.total_len != self.total_len {
            return Err(ProtocolError::TotalLength {
                frame_id: self.frame_id,
                expected: self.total_len,
                got: m.total_len,
            });
        }
        if let Some(existing) = self.chunks.get(&m.offset) {
            if *existing == m.payload {
                return Ok(false);
            }
            return Err(ProtocolError::Overlap {
                frame_id: self.frame_id,
                offset: m.offset,
            });
        }
        let (start, end) = (m.offset as u64, m.offset as u64 + m.payload.len() as u64);
        let before = self.chunks.range(..m.offset).next_back();
        let after = self.chunks.range(m.offset..).next();
        let overlaps = before.is_some_and(|(&o, p)| o as u64 + p.len() as u64 > start)
            || after.is_some_and(|(&o, _)| (o as u64) < end);
        if overlaps {
            return Err(ProtocolError::Overlap {
                frame_id: self.frame_id,
                offset: m.offset,
            });
        }
        self.saw_end |= m.is_end_of_tensor();
        self.received += m.payload.len() as u64;
        self.chunks.insert(m.offset, m.payload.clone());
        Ok(true)
    }

    /// Byte ranges not yet received.
    pub fn gaps(&self) -> Vec<Range<u32>> {
        let mut out = Vec::new();
        let mut pos = 0u32;
        for (&o, p) in &self.chunks {
            if o > pos {
                out.push(pos..o);
            }
            pos = o + p.len() as u32;
        }
        if pos < self.total_len {
            out.push(pos..self.total_len);
        }
        out
    }

    /// The bitstream with zeros in the gaps, plus the gaps.
    pub fn assemble(&self) -> (Vec<u8>, Vec<Range<u32>>) {
        let mut out = vec![0u8; self.total_len as usize];
        for (&o, p) in &self.chunks {
            out[o as usize..o as usize + p.len()].copy_from_slice(p);
        }
        (out, self.gaps())
    }

    /// The contiguous prefix received from offset 0.
    pub fn prefix(&self) -> Vec<u8> {
        let end = self.gaps().first().map_or(self.total_len, |g| g.start);
        self.assemble().0[..end as usize].to_vec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PushOutcome {
    pub frame_id: u32,
    pub new_bytes: bool,
    pub cumulative_bytes: u64,
    pub complete: bool,
}

/// Frames being assembled, keyed by id.
#[derive(Debug, Clone, Default)]
pub struct Reassembler {
    frames: BTreeMap<u32, FrameAssembly>,
}

impl Reassembler {
    pub fn new() -> Self {
        Self::default()
    }

    /// Add a DATA message. A total-length conflict discards the frame.
    pub fn push(&mut self, m: &WireMessage, now_us: u64) -> Result<PushOutcome, ProtocolError> {
        let f = self
            .frames
            .entry(m.frame_id)
            .or_insert_with(|| FrameAssembly::new(m.frame_id, m.total_len, now_us));
        match f.push(m) {
            Ok(new_bytes) => Ok(PushOutcome {
                frame_id: m.frame_id,
                new_bytes,
                cumulative_bytes: f.received_bytes(),
                complete: f.is_complete(),
            }),
            Err(e @ ProtocolError::TotalLength { .. }) => {
                self.frames.remove(&m.frame_id);
                Err(e)
            }
            Err(e) => Err(e),
        }
    }

    pub fn get(&self, frame_id: u32) -> Option<&FrameAssembly> {
        self.frames.get(&frame_id)
    }

    pub fn take(&mut self, frame_id: u32) -> Option<FrameAssembly> {
        self.frames.remove(&frame_id)
    }

    pub fn pending(&self) -> impl Iterator<Item = &FrameAssembly> {
        self.frames.values()
    }
}
