//! A full client-server session run inside the link simulator.
//!
//! The client captures frames on a fixed schedule, runs its half of the
//! model, codes the cut tensor and streams it; the server reassembles,
//! conceals gaps, finishes inference and returns a RESULT. Compute times
//! come from the config, so the whole run is a pure function of it.

use std::collections::BTreeMap;
use std::ops::Range;

use cisplit_core::concealment::{self, ConcealError, LossKind, LossMask, SideChannelMeans};
use cisplit_core::model::{argmax, CutPoint, ModelError, StubModel};
use cisplit_core::quantizer::QuantizerSpec;
use cisplit_core::stats::{collect_stats, TensorStats};
use cisplit_core::tensor::{FeatureTensor, TensorError};
use cisplit_core::tiler::TileLayout;
use cisplit_net::netsim::{Endpoint, Event, LinkCounters, SimError, Simulator};
use cisplit_net::protocol::{
    should_process_frame, BandwidthEstimator, EstimatorConfig, ProtocolError, Reassembler,
    SendBuffer,
};
use cisplit_net::wire::{Confirmation, MsgType, WireError, WireMessage, RESULT_ACK};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{CodecSetting, ConfigError, PipelineConfig};
use crate::transcode::{self, TranscodeError};

pub const HANDSHAKE_RETRIES: u32 = 10;
pub const END_RETRIES: u32 = 10;
pub const RESULT_RETRIES: u32 = 20;
const SEND_POLL_US: u64 = 1_000;
const DEADLINE_MARGIN_US: u64 = 50_000;
const RETRY_MARGIN_US: u64 = 20_000;
const DRAIN_US: u64 = 60_000_000;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("no MODEL_READY after {0} attempts")]
    HandshakeTimeout(u32),
    #[error("malformed {kind} payload: {source}")]
    Payload {
        kind: &'static str,
        #[source]
        source: serde_json::Error,
    },
    #[error("session aborted at t={time_us}us on {event}: {source}")]
    Aborted {
        time_us: u64,
        event: String,
        #[source]
        source: Box<SessionError>,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Transcode(#[from] TranscodeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Conceal(#[from] ConcealError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Wire(#[from] WireError),
}

impl From<SimError<SessionError>> for SessionError {
    fn from(e: SimError<SessionError>) -> Self {
        let SimError::Handler {
            time_us,
            event,
            source,
        } = e;
        SessionError::Aborted {
            time_us,
            event,
            source: Box::new(source),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ModelSwitchRequest {
    pub model: String,
    pub seed: u64,
    pub cut: CutPoint,
    pub quantizer: QuantizerSpec,
    pub codec: CodecSetting,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ModelReadyResponse {
    pub ready: bool,
    pub rate_limit_us: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub name: String,
    pub score: f64,
}

/// The server's answer for one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    #[serde(rename = "frameNumber")]
    pub frame_number: u32,
    /// Server-side microseconds.
    #[serde(rename = "inferenceTime")]
    pub inference_time: u64,
    pub predictions: Vec<Prediction>,
}

pub fn class_name(class: usize) -> String {
    format!("class_{class}")
}

impl ResultRecord {
    /// Top `k` classes by descending score; ties keep the lower index first.
    pub fn from_scores(frame_number: u32, inference_time: u64, scores: &[f32], k: usize) -> Self {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let predictions = order
            .into_iter()
            .take(k)
            .map(|c| Prediction {
                name: class_name(c),
                score: scores[c] as f64,
            })
            .collect();
        Self {
            frame_number,
            inference_time,
            predictions,
        }
    }

    pub fn top(&self) -> Option<&str> {
        self.predictions.first().map(|p| p.name.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    /// The client was still busy with an earlier frame.
    ClientBusy,
    /// The frame-drop rule said the server or link would not be ready.
    Gate,
}

/// Gauge readings taken at the instant a frame's packets are released.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SendCheck {
    pub frame: u32,
    pub time_us: u64,
    pub outstanding: u64,
    pub expected_lost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRow {
    #[serde(rename = "frameNumber")]
    pub frame_number: u32,
    #[serde(rename = "imageId")]
    pub image_id: u64,
    #[serde(rename = "sentBytes")]
    pub sent_bytes: u64,
    pub dropped: bool,
    #[serde(rename = "dropReason")]
    pub drop_reason: Option<DropReason>,
    #[serde(rename = "concealedRanges")]
    pub concealed_ranges: Vec<[u32; 2]>,
    #[serde(rename = "concealedElements")]
    pub concealed_elements: usize,
    pub latency_us: Option<u64>,
    pub agree: Option<bool>,
    pub failed: bool,
    /// Whether the server assembled exactly the bytes that were sent.
    #[serde(rename = "bitExact")]
    pub bit_exact: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub frames: usize,
    pub dropped: usize,
    pub completed: usize,
    pub failed: usize,
    pub concealed_frames: usize,
    /// Agreement with the clean pipeline over completed frames.
    pub agreement: f64,
    pub mean_latency_us: f64,
    pub handshake_us: u64,
    pub gate_violations: usize,
    pub uplink: LinkCounters,
    pub downlink: LinkCounters,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub config: PipelineConfig,
    pub frames: Vec<FrameRow>,
    pub summary: Summary,
}

#[derive(Debug, Clone)]
pub struct SessionOutcome {
    pub report: SessionReport,
    pub send_checks: Vec<SendCheck>,
    /// `time_us,event,frame_id,offset,len` lines.
    pub log: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Timer {
    Handshake,
    Capture(u32),
    SendPoll(u32),
    EndRetry(u32),
    Deadline(u32),
    ServerDone(u32),
    ResultRetry(u32),
}

impl Timer {
    fn tag(self) -> u64 {
        let (kind, frame) = match self {
            Timer::Handshake => (0, 0),
            Timer::Capture(f) => (1, f),
            Timer::SendPoll(f) => (2, f),
            Timer::EndRetry(f) => (3, f),
            Timer::Deadline(f) => (4, f),
            Timer::ServerDone(f) => (5, f),
            Timer::ResultRetry(f) => (6, f),
        };
        (kind << 32) | frame as u64
    }

    fn from_tag(tag: u64) -> Self {
        let f = tag as u32;
        match tag >> 32 {
            0 => Timer::Handshake,
            1 => Timer::Capture(f),
            2 => Timer::SendPoll(f),
            3 => Timer::EndRetry(f),
            4 => Timer::Deadline(f),
            5 => Timer::ServerDone(f),
            _ => Timer::ResultRetry(f),
        }
    }
}

type Sim = Simulator<WireMessage>;

fn set(sim: &mut Sim, at: Endpoint, delay_us: u64, t: Timer) {
    sim.set_timer(at, delay_us, t.tag());
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("plain structs serialize")
}

fn parse<T: for<'de> Deserialize<'de>>(
    kind: &'static str,
    bytes: &[u8],
) -> Result<T, SessionError> {
    serde_json::from_slice(bytes).map_err(|source| SessionError::Payload { kind, source })
}

/// Work done before the session starts: what each frame will carry.
struct Prepared {
    image_id: u64,
    bitstream: Vec<u8>,
    side: SideChannelMeans,
    clean_class: usize,
}

struct Ctx<'a> {
    cfg: &'a PipelineConfig,
    model: &'a StubModel,
    stats: &'a TensorStats,
    layout: TileLayout,
    prepared: &'a [Prepared],
}

#[derive(Default)]
struct ClientFrame {
    capture_us: u64,
    dropped: Option<DropReason>,
    sent: bool,
    end_packet: Option<WireMessage>,
    end_confirmed: bool,
    end_tries: u32,
    result: Option<(u64, ResultRecord)>,
}

struct Client {
    est: BandwidthEstimator,
    buffer: SendBuffer,
    ready: bool,
    handshake_tries: u32,
    switch_sent_us: u64,
    handshake_us: u64,
    rate_limit_us: u64,
    busy: bool,
    last_request_us: Option<u64>,
    frames: Vec<ClientFrame>,
    checks: Vec<SendCheck>,
}

impl Client {
    fn retry_us(&self, bytes: usize) -> u64 {
        let bw = self.est.config().prior_bandwidth.max(1.0);
        2 * self.est.rtt_us() + (bytes as f64 * 1e6 / bw) as u64 + RETRY_MARGIN_US
    }

    fn send_switch(&mut self, sim: &mut Sim, ctx: &Ctx) {
        let req = ModelSwitchRequest {
            model: "stub".into(),
            seed: ctx.model.seed(),
            cut: ctx.cfg.cut,
            quantizer: ctx.cfg.quantizer,
            codec: ctx.cfg.codec,
        };
        self.handshake_tries += 1;
        self.switch_sent_us = sim.now_us();
        sim.send(
            Endpoint::Client,
            WireMessage::control(MsgType::ModelSwitch, 0, json(&req)),
        );
        set(
            sim,
            Endpoint::Client,
            2 * ctx.cfg.link.rtt_us + DEADLINE_MARGIN_US,
            Timer::Handshake,
        );
    }

    fn on_message(&mut self, sim: &mut Sim, m: WireMessage) -> Result<(), SessionError> {
        let now = sim.now_us();
        match m.msg_type {
            MsgType::ModelReady => {
                let resp: ModelReadyResponse = parse("model_ready", &m.payload)?;
                if self.ready || !resp.ready {
                    return Ok(());
                }
                self.ready = true;
                self.handshake_us = now;
                self.rate_limit_us = resp.rate_limit_us;
                self.est = BandwidthEstimator::new(EstimatorConfig {
                    prior_rtt_us: now - self.switch_sent_us,
                    ..*self.est.config()
                });
                if !self.frames.is_empty() {
                    set(sim, Endpoint::Client, 0, Timer::Capture(0));
                }
            }
            MsgType::Confirm => {
                let c = Confirmation::from_message(&m)?;
                self.est.on_confirm(&c, now);
                if let Some(f) = self.frames.get_mut(c.frame_id as usize) {
                    if f.end_packet
                        .as_ref()
                        .is_some_and(|e| e.offset == c.packet_offset)
                    {
                        f.end_confirmed = true;
                    }
                }
            }
            MsgType::Result => {
                let r: ResultRecord = parse("result", &m.payload)?;
                let ack = Confirmation {
                    frame_id: m.frame_id,
                    packet_offset: RESULT_ACK,
                    cumulative_bytes: m.payload.len() as u64,
                    recv_time_us: now,
                };
                sim.send(Endpoint::Client, WireMessage::confirm(&ack));
                if let Some(f) = self.frames.get_mut(m.frame_id as usize) {
                    if f.result.is_none() {
                        sim.note("frame.result", m.frame_id, 0, m.payload.len());
                        f.result = Some((now, r));
                    }
                }
            }
            // the client never receives requests or data
            MsgType::ModelSwitch | MsgType::Data => {}
        }
        Ok(())
    }

    fn on_timer(&mut self, sim: &mut Sim, t: Timer, ctx: &Ctx) -> Result<(), SessionError> {
        let now = sim.now_us();
        match t {
            Timer::Handshake if !self.ready => {
                if self.handshake_tries >= HANDSHAKE_RETRIES {
                    return Err(SessionError::HandshakeTimeout(self.handshake_tries));
                }
                self.send_switch(sim, ctx);
            }
            Timer::Capture(k) => {
                if (k as usize + 1) < self.frames.len() {
                    set(
                        sim,
                        Endpoint::Client,
                        ctx.cfg.frame_interval_us,
                        Timer::Capture(k + 1),
                    );
                }
                self.frames[k as usize].capture_us = now;
                sim.note("frame.capture", k, 0, 0);
                let reason = if self.busy {
                    Some(DropReason::ClientBusy)
                } else {
                    let client_remain = ctx.cfg.client_compute_us as f64 / 1e6;
                    let server_remain = self
                        .last_request_us
                        .map_or(0, |t| (t + self.rate_limit_us).saturating_sub(now))
                        as f64
                        / 1e6;
                    let bw = self.est.estimate_bandwidth(now).max(1.0);
                    let bandwidth_remain = self.est.unreceived(now).max(0.0) / bw;
                    (!should_process_frame(
                        client_remain,
                        server_remain,
                        bandwidth_remain,
                        ctx.cfg.drop_rule,
                    ))
                    .then_some(DropReason::Gate)
                };
                match reason {
                    Some(r) => {
                        self.frames[k as usize].dropped = Some(r);
                        sim.note("frame.drop", k, 0, 0);
                    }
                    None => {
                        self.busy = true;
                        set(
                            sim,
                            Endpoint::Client,
                            ctx.cfg.client_compute_us,
                            Timer::SendPoll(k),
                        );
                    }
                }
            }
            Timer::SendPoll(k) => {
                if !self
                    .est
                    .may_send(now, self.last_request_us, self.rate_limit_us)
                {
                    set(sim, Endpoint::Client, SEND_POLL_US, Timer::SendPoll(k));
                    return Ok(());
                }
                let expected_lost = self.est.expected_lost(now);
                self.checks.push(SendCheck {
                    frame: k,
                    time_us: now,
                    outstanding: self.est.outstanding(),
                    expected_lost,
                });
                let bits = &ctx.prepared[k as usize].bitstream;
                self.buffer.write(k, bits.len() as u32, bits)?;
                sim.note("frame.send", k, 0, bits.len());
                for m in self.buffer.process(ctx.cfg.mss)? {
                    self.est.on_send(k, m.offset, m.payload.len() as u64, now);
                    if m.is_end_of_tensor() {
                        self.frames[k as usize].end_packet = Some(m.clone());
                    }
                    sim.send(Endpoint::Client, m);
                }
                self.last_request_us = Some(now);
                self.busy = false;
                self.frames[k as usize].sent = true;
                set(
                    sim,
                    Endpoint::Client,
                    self.retry_us(bits.len()),
                    Timer::EndRetry(k),
                );
            }
            Timer::EndRetry(k) => {
                let retry = self.retry_us(ctx.prepared[k as usize].bitstream.len());
                let f = &mut self.frames[k as usize];
                if f.end_confirmed || f.result.is_some() || f.end_tries >= END_RETRIES {
                    return Ok(());
                }
                if let Some(m) = f.end_packet.clone() {
                    f.end_tries += 1;
                    self.est.on_send(k, m.offset, m.payload.len() as u64, now);
                    sim.send(Endpoint::Client, m);
                    set(sim, Endpoint::Client, retry, Timer::EndRetry(k));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Default)]
struct ServerFrame {
    finalized: bool,
    gaps: Vec<Range<u32>>,
    concealed_elements: usize,
    failed: bool,
    bit_exact: Option<bool>,
    result: Option<WireMessage>,
    result_tries: u32,
    acked: bool,
}

struct Server {
    reasm: Reassembler,
    free_at_us: u64,
    frames: BTreeMap<u32, ServerFrame>,
}

impl Server {
    fn deadline_us(total_len: u32, ctx: &Ctx) -> u64 {
        let link = &ctx.cfg.link;
        2 * link.rtt_us
            + (total_len as f64 * 1e6 / link.bandwidth_bps).ceil() as u64
            + DEADLINE_MARGIN_US
    }

    fn on_message(&mut self, sim: &mut Sim, m: WireMessage, ctx: &Ctx) -> Result<(), SessionError> {
        let now = sim.now_us();
        match m.msg_type {
            MsgType::ModelSwitch => {
                let _req: ModelSwitchRequest = parse("model_switch", &m.payload)?;
                let resp = ModelReadyResponse {
                    ready: true,
                    rate_limit_us: ctx.cfg.server_rate_limit_us,
                };
                sim.send(
                    Endpoint::Server,
                    WireMessage::control(MsgType::ModelReady, 0, json(&resp)),
                );
            }
            MsgType::Data => {
                let known = self.frames.contains_key(&m.frame_id);
                let finalized = self.frames.entry(m.frame_id).or_default().finalized;
                let mut cumulative = 0;
                if !finalized {
                    match self.reasm.push(&m, now) {
                        Ok(out) => {
                            cumulative = out.cumulative_bytes;
                            if !known {
                                set(
                                    sim,
                                    Endpoint::Server,
                                    Self::deadline_us(m.total_len, ctx),
                                    Timer::Deadline(m.frame_id),
                                );
                            }
                            if out.complete {
                                self.finalize(sim, m.frame_id, ctx)?;
                            }
                        }
                        Err(ProtocolError::TotalLength { .. }) => {
                            let state = self.frames.get_mut(&m.frame_id).expect("inserted above");
                            state.finalized = true;
                            state.failed = true;
                            sim.note("frame.fail", m.frame_id, m.offset, m.payload.len());
                        }
                        Err(e) => return Err(e.into()),
                    }
                }
                let c = Confirmation {
                    frame_id: m.frame_id,
                    packet_offset: m.offset,
                    cumulative_bytes: cumulative,
                    recv_time_us: now,
                };
                sim.send(Endpoint::Server, WireMessage::confirm(&c));
            }
            MsgType::Confirm => {
                let c = Confirmation::from_message(&m)?;
                if c.packet_offset == RESULT_ACK {
                    if let Some(f) = self.frames.get_mut(&c.frame_id) {
                        f.acked = true;
                    }
                }
            }
            MsgType::ModelReady | MsgType::Result => {}
        }
        Ok(())
    }

    fn finalize(&mut self, sim: &mut Sim, frame: u32, ctx: &Ctx) -> Result<(), SessionError> {
        let Some(asm) = self.reasm.take(frame) else {
            return Ok(());
        };
        let prep = &ctx.prepared[frame as usize];
        let (bytes, gaps) = asm.assemble();
        let spec = &ctx.cfg.quantizer;
        let state = self.frames.entry(frame).or_default();
        state.finalized = true;
        state.bit_exact = Some(gaps.is_empty() && bytes == prep.bitstream);
        state.gaps = gaps.clone();
        let tensor = if gaps.is_empty() {
            transcode::decode_tensor(&bytes, spec, ctx.stats)?
        } else {
            let Some(strategy) = ctx.cfg.concealment.strategy() else {
                state.failed = true;
                sim.note(
                    "frame.fail",
                    frame,
                    gaps[0].start,
                    (gaps[0].end - gaps[0].start) as usize,
                );
                return Ok(());
            };
            let damaged = transcode::decode_damaged(&asm.prefix(), ctx.layout, spec, ctx.stats)?;
            state.concealed_elements = damaged.missing_count();
            let shape = damaged.tensor.shape();
            let mask = LossMask::from_missing(shape, damaged.missing, LossKind::ByElement)?;
            for g in &gaps {
                sim.note("frame.conceal", frame, g.start, (g.end - g.start) as usize);
            }
            concealment::conceal(
                &damaged.tensor,
                &mask,
                strategy,
                Some(ctx.stats),
                Some(&prep.side),
            )?
        };
        let scores = ctx.model.forward_server(&tensor, ctx.cfg.cut)?;
        let record =
            ResultRecord::from_scores(frame, ctx.cfg.server_compute_us, &scores, ctx.cfg.top_k);
        state.result = Some(WireMessage::control(MsgType::Result, frame, json(&record)));
        let start = self.free_at_us.max(sim.now_us());
        self.free_at_us = start + ctx.cfg.server_compute_us;
        set(
            sim,
            Endpoint::Server,
            self.free_at_us - sim.now_us(),
            Timer::ServerDone(frame),
        );
        Ok(())
    }

    fn on_timer(&mut self, sim: &mut Sim, t: Timer, ctx: &Ctx) -> Result<(), SessionError> {
        match t {
            Timer::Deadline(f) => {
                if self.frames.get(&f).is_some_and(|s| !s.finalized) {
                    self.finalize(sim, f, ctx)?;
                }
            }
            Timer::ServerDone(f) | Timer::ResultRetry(f) => {
                let retry = 2 * ctx.cfg.link.rtt_us + RETRY_MARGIN_US;
                let Some(s) = self.frames.get_mut(&f) else {
                    return Ok(());
                };
                if s.acked || s.result_tries >= RESULT_RETRIES {
                    return Ok(());
                }
                if let Some(m) = s.result.clone() {
                    s.result_tries += 1;
                    sim.send(Endpoint::Server, m);
                    set(sim, Endpoint::Server, retry, Timer::ResultRetry(f));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

fn prepare(
    cfg: &PipelineConfig,
    model: &StubModel,
    stats: &TensorStats,
) -> Result<Vec<Prepared>, SessionError> {
    cfg.image_ids()
        .into_par_iter()
        .map(|id| {
            let input = model.generate_input(id, (0.0, 0.0));
            let t: FeatureTensor = model.forward_client(&input, cfg.cut)?;
            let clean_class = argmax(&model.forward_server(&t, cfg.cut)?);
            let bits = transcode::encode_tensor(&t, &cfg.quantizer, stats, cfg.codec)?;
            Ok(Prepared {
                image_id: id,
                bitstream: bits.into_bytes(),
                side: SideChannelMeans::from_tensor(&t),
                clean_class,
            })
        })
        .collect()
}

/// Calibration statistics shared by both endpoints.
pub fn session_stats(cfg: &PipelineConfig, model: &StubModel) -> Result<TensorStats, SessionError> {
    Ok(collect_stats(
        &model.calibration_tensors(cfg.cut, cfg.calibration_images),
    )?)
}

pub fn run_session(cfg: &PipelineConfig) -> Result<SessionOutcome, SessionError> {
    cfg.validate()?;
    let model = StubModel::new(cfg.seed);
    let stats = session_stats(cfg, &model)?;
    let prepared = prepare(cfg, &model, &stats)?;
    let ctx = Ctx {
        cfg,
        model: &model,
        stats: &stats,
        layout: TileLayout::for_shape(cfg.cut.output_shape()),
        prepared: &prepared,
    };
    let mut sim: Sim = Simulator::from_scenario(&cfg.link).map_err(ConfigError::from)?;
    let mut client = Client {
        est: BandwidthEstimator::new(EstimatorConfig {
            prior_rtt_us: cfg.link.rtt_us,
            ..EstimatorConfig::default()
        }),
        buffer: SendBuffer::new(),
        ready: false,
        handshake_tries: 0,
        switch_sent_us: 0,
        handshake_us: 0,
        rate_limit_us: 0,
        busy: false,
        last_request_us: None,
        frames: (0..prepared.len())
            .map(|_| ClientFrame::default())
            .collect(),
        checks: Vec::new(),
    };
    let mut server = Server {
        reasm: Reassembler::new(),
        free_at_us: 0,
        frames: BTreeMap::new(),
    };
    client.send_switch(&mut sim, &ctx);
    let horizon = HANDSHAKE_RETRIES as u64 * (2 * cfg.link.rtt_us + DEADLINE_MARGIN_US)
        + cfg.frames as u64 * cfg.frame_interval_us
        + DRAIN_US;
    sim.run_until(horizon, |sim, ev| match ev {
        Event::Deliver {
            to: Endpoint::Client,
            msg,
        } => client.on_message(sim, msg),
        Event::Deliver {
            to: Endpoint::Server,
            msg,
        } => server.on_message(sim, msg, &ctx),
        Event::Timer {
            at: Endpoint::Client,
            tag,
        } => client.on_timer(sim, Timer::from_tag(tag), &ctx),
        Event::Timer {
            at: Endpoint::Server,
            tag,
        } => server.on_timer(sim, Timer::from_tag(tag), &ctx),
    })?;
    if !client.ready {
        return Err(SessionError::HandshakeTimeout(client.handshake_tries));
    }
    let rows: Vec<FrameRow> = prepared
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let c = &client.frames[k];
            let s = server.frames.get(&(k as u32));
            let (latency_us, agree) = match &c.result {
                Some((t, r)) => (
                    Some(t - c.capture_us),
                    Some(r.top() == Some(class_name(p.clean_class).as_str())),
                ),
                None => (None, None),
            };
            let dropped = c.dropped.is_some();
            FrameRow {
                frame_number: k as u32,
                image_id: p.image_id,
                sent_bytes: if c.sent { p.bitstream.len() as u64 } else { 0 },
                dropped,
                drop_reason: c.dropped,
                concealed_ranges: s
                    .filter(|s| !s.failed)
                    .map(|s| s.gaps.iter().map(|g| [g.start, g.end]).collect())
                    .unwrap_or_default(),
                concealed_elements: s.map_or(0, |s| s.concealed_elements),
                latency_us,
                agree,
                failed: !dropped && (c.result.is_none() || s.is_some_and(|s| s.failed)),
                bit_exact: s.and_then(|s| s.bit_exact),
            }
        })
        .collect();
    let completed: Vec<&FrameRow> = rows.iter().filter(|r| r.agree.is_some()).collect();
    let agreement = if completed.is_empty() {
        0.0
    } else {
        completed.iter().filter(|r| r.agree == Some(true)).count() as f64 / completed.len() as f64
    };
    let mean_latency_us = if completed.is_empty() {
        0.0
    } else {
        completed
            .iter()
            .map(|r| r.latency_us.unwrap_or(0) as f64)
            .sum::<f64>()
            / completed.len() as f64
    };
    let mss = cfg.mss as f64;
    let summary = Summary {
        frames: rows.len(),
        dropped: rows.iter().filter(|r| r.dropped).count(),
        completed: completed.len(),
        failed: rows.iter().filter(|r| r.failed).count(),
        concealed_frames: rows
            .iter()
            .filter(|r| !r.concealed_ranges.is_empty())
            .count(),
        agreement,
        mean_latency_us,
        handshake_us: client.handshake_us,
        gate_violations: client
            .checks
            .iter()
            .filter(|c| c.outstanding as f64 > c.expected_lost + mss)
            .count(),
        uplink: sim.link(Endpoint::Client).counters(),
        downlink: sim.link(Endpoint::Server).counters(),
    };
    Ok(SessionOutcome {
        report: SessionReport {
            config: cfg.clone(),
            frames: rows,
            summary,
        },
        send_checks: client.checks,
        log: sim.log_text(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timer_tags_round_trip() {
        for t in [
            Timer::Handshake,
            Timer::Capture(3),
            Timer::SendPoll(u32::MAX),
            Timer::EndRetry(9),
            Timer::Deadline(0),
            Timer::ServerDone(12),
            Timer::ResultRetry(77),
        ] {
            assert_eq!(Timer::from_tag(t.tag()), t);
        }
    }

    #[test]
    fn predictions_sorted_and_named() {
        let r = ResultRecord::from_scores(4, 500, &[0.1, 0.9, 0.5, 0.9], 3);
        let names: Vec<&str> = r.predictions.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["class_1", "class_3", "class_2"]);
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(keys, ["frameNumber", "inferenceTime", "predictions"]);
    }

    #[test]
    fn small_clean_session() {
        let cfg = PipelineConfig {
            frames: 5,
            ..PipelineConfig::default()
        };
        let out = run_session(&cfg).unwrap();
        let s = &out.report.summary;
        assert_eq!((s.completed, s.dropped, s.failed), (5, 0, 0));
        assert!(out.report.frames.iter().all(|r| r.bit_exact == Some(true)));
    }
}
