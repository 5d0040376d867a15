//! Deterministic discrete-event simulation of a client-server link pair.
//!
//! Each direction is store-and-forward with one FIFO busy cursor. Events
//! are processed in `(time_us, sequence)` order, so a run is a pure
//! function of its configuration and seed.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt;

use cisplit_core::rng::XorShift64Star;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::wire::WireMessage;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("bandwidth must be positive and finite, got {0}")]
    Bandwidth(f64),
    #[error("loss probability must be in [0, 1), got {0}")]
    LossProb(f64),
}

#[derive(Debug, Error)]
pub enum SimError<E: std::error::Error + 'static> {
    #[error("handler failed at t={time_us}us on {event}")]
    Handler {
        time_us: u64,
        event: String,
        #[source]
        source: E,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkConfig {
    /// Bytes per second.
    pub bandwidth: f64,
    pub one_way_delay_us: u64,
    pub loss_prob: f64,
    pub jitter_us: u64,
    pub seed: u64,
}

impl LinkConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.bandwidth.is_finite() && self.bandwidth > 0.0) {
            return Err(ConfigError::Bandwidth(self.bandwidth));
        }
        if !(0.0..1.0).contains(&self.loss_prob) {
            return Err(ConfigError::LossProb(self.loss_prob));
        }
        Ok(())
    }

    /// Microseconds to clock `len` bytes onto the link.
    pub fn serialization_us(&self, len: usize) -> u64 {
        (len as f64 * 1e6 / self.bandwidth).ceil() as u64
    }
}

/// The JSON scenario file: one bandwidth and loss setting for both directions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    /// Link rate in bytes per second, despite the name.
    pub bandwidth_bps: f64,
    pub rtt_us: u64,
    pub loss_prob: f64,
    #[serde(default)]
    pub jitter_us: u64,
    pub seed: u64,
    pub duration_us: u64,
}

impl ScenarioConfig {
    /// (client to server, server to client) links with independent streams.
    pub fn links(&self) -> Result<(LinkConfig, LinkConfig), ConfigError> {
        let make = |tag: u64| LinkConfig {
            bandwidth: self.bandwidth_bps,
            one_way_delay_us: self.rtt_us / 2,
            loss_prob: self.loss_prob,
            jitter_us: self.jitter_us,
            seed: XorShift64Star::derive(self.seed, tag).next_u64(),
        };
        let (up, down) = (make(1), make(2));
        up.validate()?;
        Ok((up, down))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Endpoint {
    Client,
    Server,
}

impl Endpoint {
    pub fn peer(self) -> Endpoint {
        match self {
            Endpoint::Client => Endpoint::Server,
            Endpoint::Server => Endpoint::Client,
        }
    }

    fn link_name(self) -> &'static str {
        match self {
            Endpoint::Client => "c2s",
            Endpoint::Server => "s2c",
        }
    }
}

/// What the simulator needs to know about a message.
pub trait Payload {
    fn wire_len(&self) -> usize;
    fn kind(&self) -> &'static str;
    fn frame_id(&self) -> u32;
    fn offset(&self) -> u32;
}

impl Payload for WireMessage {
    fn wire_len(&self) -> usize {
        WireMessage::wire_len(self)
    }

    fn kind(&self) -> &'static str {
        self.msg_type.name()
    }

    fn frame_id(&self) -> u32 {
        self.frame_id
    }

    fn offset(&self) -> u32 {
        self.offset
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transmission {
    pub departure_us: u64,
    pub arrival_us: u64,
    pub dropped: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkCounters {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub bytes_sent: u64,
    /// Largest number of bytes waiting behind the busy cursor at any send.
    pub max_backlog_bytes: u64,
}

/// One direction of the path.
#[derive(Debug, Clone)]
pub struct Link {
    cfg: LinkConfig,
    rng: XorShift64Star,
    busy_until_us: u64,
    counters: LinkCounters,
}

impl Link {
    pub fn new(cfg: LinkConfig) -> Result<Self, ConfigError> {
        cfg.validate()?;
        Ok(Self {
            rng: XorShift64Star::new(cfg.seed),
            cfg,
            busy_until_us: 0,
            counters: LinkCounters::default(),
        })
    }

    pub fn config(&self) -> &LinkConfig {
        &self.cfg
    }

    pub fn counters(&self) -> LinkCounters {
        self.counters
    }

    /// Bytes still to be clocked out at `now_us`.
    pub fn backlog_bytes(&self, now_us: u64) -> u64 {
        let busy = self.busy_until_us.saturating_sub(now_us);
        (busy as f64 * self.cfg.bandwidth / 1e6).round() as u64
    }

    pub fn send(&mut self, len: usize, now_us: u64) -> Transmission {
        let backlog = self.backlog_bytes(now_us) + len as u64;
        self.counters.max_backlog_bytes = self.counters.max_backlog_bytes.max(backlog);
        let start = self.busy_until_us.max(now_us);
        let departure_us = start + self.cfg.serialization_us(len);
        self.busy_until_us = departure_us;
        // both draws every time so the stream does not depend on outcomes
        let dropped = self.rng.chance(self.cfg.loss_prob);
        let jitter = self.rng.below(self.cfg.jitter_us + 1);
        self.counters.sent += 1;
        self.counters.bytes_sent += len as u64;
        if dropped {
            self.counters.dropped += 1;
        }
        Transmission {
            departure_us,
            arrival_us: departure_us + self.cfg.one_way_delay_us + jitter,
            dropped,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    pub time_us: u64,
    pub event: String,
    pub frame_id: u32,
    pub offset: u32,
    pub len: usize,
}

impl fmt::Display for LogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{}",
            self.time_us, self.event, self.frame_id, self.offset, self.len
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event<P> {
    Deliver { to: Endpoint, msg: P },
    Timer { at: Endpoint, tag: u64 },
}

#[derive(Debug)]
struct Queued<P> {
    time_us: u64,
    seq: u64,
    event: Event<P>,
}

impl<P> PartialEq for Queued<P> {
    fn eq(&self, other: &Self) -> bool {
        (self.time_us, self.seq) == (other.time_us, other.seq)
    }
}

impl<P> Eq for Queued<P> {}

impl<P> PartialOrd for Queued<P> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for Queued<P> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.time_us, self.seq).cmp(&(other.time_us, other.seq))
    }
}

pub struct Simulator<P> {
    now_us: u64,
    next_seq: u64,
    queue: BinaryHeap<Reverse<Queued<P>>>,
    uplink: Link,
    downlink: Link,
    log: Vec<LogEntry>,
}

impl<P: Payload> Simulator<P> {
    pub fn new(uplink: LinkConfig, downlink: LinkConfig) -> Result<Self, ConfigError> {
        Ok(Self {
            now_us: 0,
            next_seq: 0,
            queue: BinaryHeap::new(),
            uplink: Link::new(uplink)?,
            downlink: Link::new(downlink)?,
            log: Vec::new(),
        })
    }

    pub fn from_scenario(s: &ScenarioConfig) -> Result<Self, ConfigError> {
        let (up, down) = s.links()?;
        Self::new(up, down)
    }

    pub fn now_us(&self) -> u64 {
        self.now_us
    }

    /// The link that carries traffic sent by `from`.
    pub fn link(&self, from: Endpoint) -> &Link {
        match from {
            Endpoint::Client => &self.uplink,
            Endpoint::Server => &self.downlink,
        }
    }

    fn link_mut(&mut self, from: Endpoint) -> &mut Link {
        match from {
            Endpoint::Client => &mut self.uplink,
            Endpoint::Server => &mut self.downlink,
        }
    }

    fn push(&mut self, time_us: u64, event: Event<P>) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(Queued {
            time_us,
            seq,
            event,
        }));
    }

    pub fn note(&mut self, event: impl Into<String>, frame_id: u32, offset: u32, len: usize) {
        self.log.push(LogEntry {
            time_us: self.now_us,
            event: event.into(),
            frame_id,
            offset,
            len,
        });
    }

    /// Put `msg` on the link leaving `from`; it arrives at the peer unless dropped.
    pub fn send(&mut self, from: Endpoint, msg: P) -> Transmission {
        let now = self.now_us;
        let len = msg.wire_len();
        let tx = self.link_mut(from).send(len, now);
        let name = from.link_name();
        let (frame, offset, kind) = (msg.frame_id(), msg.offset(), msg.kind());
        self.note(format!("{name}.send.{kind}"), frame, offset, len);
        if tx.dropped {
            self.note(format!("{name}.drop.{kind}"), frame, offset, len);
        } else {
            self.push(
                tx.arrival_us,
                Event::Deliver {
                    to: from.peer(),
                    msg,
                },
            );
        }
        tx
    }

    pub fn set_timer(&mut self, at: Endpoint, delay_us: u64, tag: u64) {
        self.push(self.now_us + delay_us, Event::Timer { at, tag });
    }

    pub fn is_idle(&self) -> bool {
        self.queue.is_empty()
    }

    /// Process every event with time at most `t_end`, in order. The clock
    /// ends at the last processed event.
    pub fn run_until<E, F>(&mut self, t_end: u64, mut handler: F) -> Result<(), SimError<E>>
    where
        E: std::error::Error + 'static,
        F: FnMut(&mut Self, Event<P>) -> Result<(), E>,
    {
        while let Some(Reverse(head)) = self.queue.peek() {
            if head.time_us > t_end {
                break;
            }
            let Reverse(q) = self.queue.pop().expect("peeked");
            self.now_us = q.time_us;
            let label = match &q.event {
                Event::Deliver { to, msg } => {
                    let link = to.peer().link_name();
                    let (frame, offset, len, kind) =
                        (msg.frame_id(), msg.offset(), msg.wire_len(), msg.kind());
                    self.link_mut(to.peer()).counters.delivered += 1;
                    self.note(format!("{link}.deliver.{kind}"), frame, offset, len);
                    format!("{link}.deliver.{kind} frame {frame} offset {offset}")
                }
                Event::Timer { at, tag } => format!("timer {tag} at {at:?}"),
            };
            handler(self, q.event).map_err(|source| SimError::Handler {
                time_us: self.now_us,
                event: label,
                source,
            })?;
        }
        Ok(())
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    /// The log as `time_us,event,frame_id,offset,len` lines.
    pub fn log_text(&self) -> String {
        let mut out = String::from("time_us,event,frame_id,offset,len\n");
        for e in &self.log {
            out.push_str(&e.to_string());
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::convert::Infallible;

    #[derive(Debug, Clone, PartialEq)]
    struct Blob(usize, u32);

    impl Payload for Blob {
        fn wire_len(&self) -> usize {
            self.0
        }
        fn kind(&self) -> &'static str {
            "blob"
        }
        fn frame_id(&self) -> u32 {
            self.1
        }
        fn offset(&self) -> u32 {
            0
        }
    }

    fn link(bandwidth: f64, delay: u64, loss: f64, jitter: u64, seed: u64) -> LinkConfig {
        LinkConfig {
            bandwidth,
            one_way_delay_us: delay,
            loss_prob: loss,
            jitter_us: jitter,
            seed,
        }
    }

    fn collect(sim: &mut Simulator<Blob>) -> Vec<(u64, Endpoint, u32)> {
        let mut got = Vec::new();
        sim.run_until(u64::MAX, |s, e| {
            if let Event::Deliver { to, msg } = e {
                got.push((s.now_us(), to, msg.1));
            }
            Ok::<(), Infallible>(())
        })
        .unwrap();
        got
    }

    #[test]
    fn megabyte_at_megabyte_per_second() {
        let l = link(1e6, 5000, 0.0, 0, 1);
        let mut sim = Simulator::new(l, l).unwrap();
        let tx = sim.send(Endpoint::Client, Blob(1_000_000, 0));
        assert_eq!(tx.arrival_us, 1_005_000);
        assert_eq!(collect(&mut sim), vec![(1_005_000, Endpoint::Server, 0)]);
    }

    #[test]
    fn near_certain_loss_is_logged() {
        let l = link(1e6, 10, 1.0 - 1e-12, 0, 3);
        let mut sim = Simulator::new(l, l).unwrap();
        assert!(sim.send(Endpoint::Client, Blob(10, 4)).dropped);
        assert!(sim
            .log()
            .iter()
            .any(|e| e.event == "c2s.drop.blob" && e.frame_id == 4));
        assert!(collect(&mut sim).is_empty());
        assert_eq!(sim.link(Endpoint::Client).counters().dropped, 1);
    }

    #[test]
    fn back_to_back_queue_fifo() {
        let l = link(1000.0, 0, 0.0, 0, 1);
        let mut sim = Simulator::<Blob>::new(l, l).unwrap();
        let a = sim.send(Endpoint::Client, Blob(100, 0));
        let b = sim.send(Endpoint::Client, Blob(50, 1));
        assert_eq!(a.departure_us, 100_000);
        assert_eq!(b.departure_us, a.departure_us + 50_000);
        assert_eq!(sim.link(Endpoint::Client).counters().max_backlog_bytes, 150);
        assert_eq!(sim.link(Endpoint::Client).backlog_bytes(100_000), 50);
    }

    #[test]
    fn config_validation() {
        assert_eq!(
            Link::new(link(0.0, 0, 0.0, 0, 1)).unwrap_err(),
            ConfigError::Bandwidth(0.0)
        );
        assert_eq!(
            Link::new(link(1.0, 0, 1.0, 0, 1)).unwrap_err(),
            ConfigError::LossProb(1.0)
        );
        let s: ScenarioConfig = serde_json::from_str(
            r#"{"bandwidth_bps":1e6,"rtt_us":20000,"loss_prob":0.1,"jitter_us":0,"seed":9,"duration_us":1000000}"#,
        )
        .unwrap();
        let (up, down) = s.links().unwrap();
        assert_eq!(up.one_way_delay_us, 10_000);
        assert_ne!(up.seed, down.seed);
    }

    #[test]
    fn empty_queue_returns() {
        let l = link(1.0, 0, 0.0, 0, 1);
        let mut sim = Simulator::<Blob>::new(l, l).unwrap();
        assert!(collect(&mut sim).is_empty());
        assert_eq!(sim.now_us(), 0);
    }

    #[test]
    fn run_until_stops_at_horizon() {
        let l = link(1e6, 1000, 0.0, 0, 1);
        let mut sim = Simulator::<Blob>::new(l, l).unwrap();
        sim.set_timer(Endpoint::Client, 500, 1);
        sim.set_timer(Endpoint::Client, 1500, 2);
        let mut tags = Vec::new();
        sim.run_until(1000, |_, e| {
            if let Event::Timer { tag, .. } = e {
                tags.push(tag);
            }
            Ok::<(), Infallible>(())
        })
        .unwrap();
        assert_eq!(tags, [1]);
        assert!(!sim.is_idle());
    }

    #[derive(Debug, Error)]
    #[error("boom")]
    struct Boom;

    #[test]
    fn handler_error_aborts_with_context() {
        let l = link(1e6, 1000, 0.0, 0, 1);
        let mut sim = Simulator::<Blob>::new(l, l).unwrap();
        sim.set_timer(Endpoint::Server, 7, 42);
        sim.set_timer(Endpoint::Server, 9, 43);
        let err = sim.run_until(100, |_, _| Err(Boom)).unwrap_err();
        let SimError::Handler { time_us, event, .. } = err;
        assert_eq!(time_us, 7);
        assert!(event.contains("42"));
        assert!(!sim.is_idle());
    }

    #[test]
    fn ping_pong_is_deterministic() {
        let run = |seed: u64| {
            let l = link(2e5, 3000, 0.2, 800, seed);
            let mut sim = Simulator::new(
                l,
                LinkConfig {
                    seed: seed + 1,
                    ..l
                },
            )
            .unwrap();
            for i in 0..30 {
                sim.send(Endpoint::Client, Blob(300 + i * 7, i as u32));
            }
            sim.run_until(10_000_000, |s, e| {
                if let Event::Deliver {
                    to: Endpoint::Server,
                    msg,
                } = e
                {
                    s.send(Endpoint::Server, Blob(40, msg.1));
                }
                Ok::<(), Infallible>(())
            })
            .unwrap();
            sim.log_text()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    #[test]
    fn log_order_matches_time_sequence_oracle() {
        // bidirectional traffic with jitter; log must be time-sorted, with
        // equal times kept in scheduling order
        let l = link(5e4, 2000, 0.0, 3000, 11);
        let mut sim = Simulator::new(l, LinkConfig { seed: 12, ..l }).unwrap();
        let mut expected = Vec::new();
        for i in 0..40u32 {
            let from = if i % 3 == 0 {
                Endpoint::Server
            } else {
                Endpoint::Client
            };
            let tx = sim.send(from, Blob(100 + (i as usize * 37) % 400, i));
            expected.push((tx.arrival_us, i));
        }
        expected.sort();
        let got: Vec<(u64, u32)> = collect(&mut sim)
            .into_iter()
            .map(|(t, _, f)| (t, f))
            .collect();
        assert_eq!(got, expected);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn conservation_and_fifo(
                sizes in proptest::collection::vec(1usize..3000, 1..80),
                gaps in proptest::collection::vec(0u64..20_000, 80),
                loss in 0.0f64..0.9,
                seed in any::<u64>(),
            ) {
                let l = link(1e5, 4000, loss, 0, seed);
                let mut sim = Simulator::<Blob>::new(l, l).unwrap();
                let mut t = 0;
                let mut arrivals = Vec::new();
                let mut got = Vec::new();
                for (i, &n) in sizes.iter().enumerate() {
                    t += gaps[i];
                    sim.run_until(t, |_, e| {
                        if let Event::Deliver { msg, .. } = e {
                            got.push(msg.1);
                        }
                        Ok::<(), Infallible>(())
                    })
                    .unwrap();
                    sim.now_us = t;
                    let tx = sim.send(Endpoint::Client, Blob(n, i as u32));
                    arrivals.push(tx.arrival_us);
                }
                prop_assert!(arrivals.windows(2).all(|w| w[0] <= w[1]));
                got.extend(collect(&mut sim).into_iter().map(|(_, _, f)| f));
                let c = sim.link(Endpoint::Client).counters();
                prop_assert_eq!(c.delivered as usize, got.len());
                prop_assert_eq!(c.delivered + c.dropped, c.sent);
                prop_assert!(got.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }
}
