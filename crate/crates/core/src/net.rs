//! Tick-based model of the verification network: one router, the interface
//! card and a three-axis accelerometer, each node on its own router port.
//!
//! Every hop has two link endpoints (router side, node side) running the
//! six-state link FSM. Both endpoints are stepped together from the previous
//! tick's states, so a hop whose ends are both enabled walks
//! `ErrorReset -> ErrorWait -> Ready -> Started -> Connecting -> Run` in
//! five ticks. Link enable/disable/reset act on the router-side endpoint;
//! node endpoints start enabled.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_PORTS: u8 = 32;
pub const DEFAULT_SAMPLE_PERIOD: u64 = 10;
pub const ACCEL_SAMPLE_LEN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LinkState {
    ErrorReset,
    ErrorWait,
    Ready,
    Started,
    Connecting,
    Run,
}

impl LinkState {
    /// Next state of one endpoint, given the partner's state on the previous
    /// tick and both enable flags as of this tick. `partner` is `None` on a
    /// port with nothing attached.
    pub fn step(self, enabled: bool, partner: Option<(LinkState, bool)>) -> LinkState {
        use LinkState::*;
        let Some((peer, peer_enabled)) = partner else {
            return match self {
                ErrorReset => ErrorWait,
                ErrorWait | Ready => Ready,
                _ => ErrorReset,
            };
        };
        let both = enabled && peer_enabled;
        match self {
            ErrorReset => ErrorWait,
            ErrorWait => Ready,
            Ready if both => Started,
            Ready => Ready,
            Started if !both || peer < Ready => ErrorReset,
            Started if peer >= Started => Connecting,
            Started => Started,
            Connecting if !both || peer < Started => ErrorReset,
            Connecting if peer >= Connecting => Run,
            Connecting => Connecting,
            Run if !both || peer < Connecting => ErrorReset,
            Run => Run,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    InterfaceCard,
    Accelerometer,
    Empty,
}

impl FromStr for NodeKind {
    type Err = NetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "card" | "interface_card" | "interfacecard" => Ok(NodeKind::InterfaceCard),
            "accelerometer" | "accel" => Ok(NodeKind::Accelerometer),
            "empty" | "none" => Ok(NodeKind::Empty),
            other => Err(NetError::BadTopology(format!("unknown node kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NetError {
    #[error("bad topology: {0}")]
    BadTopology(String),
    #[error("no such port {0}")]
    NoSuchPort(u32),
}

/// Router port count and what hangs off each port (1-based).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    pub router_ports: u8,
    pub attachments: BTreeMap<u8, NodeKind>,
}

impl Topology {
    /// Accelerometer on port 1, card on port 3, port 2 empty.
    pub fn verification() -> Self {
        Self {
            router_ports: 3,
            attachments: BTreeMap::from([(1, NodeKind::Accelerometer), (3, NodeKind::InterfaceCard)]),
        }
    }

    pub fn empty(router_ports: u8) -> Self {
        Self {
            router_ports,
            attachments: BTreeMap::new(),
        }
    }

    pub fn with(mut self, port: u8, kind: NodeKind) -> Self {
        self.attachments.insert(port, kind);
        self
    }

    pub fn attachment(&self, port: u8) -> NodeKind {
        self.attachments.get(&port).copied().unwrap_or(NodeKind::Empty)
    }

    pub fn card_port(&self) -> Option<u8> {
        self.attachments
            .iter()
            .find(|(_, k)| **k == NodeKind::InterfaceCard)
            .map(|(p, _)| *p)
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.router_ports == 0 || self.router_ports > MAX_PORTS {
            return Err(NetError::BadTopology(format!(
                "router port count {} not in 1..={MAX_PORTS}",
                self.router_ports
            )));
        }
        if let Some(p) = self.attachments.keys().find(|p| **p == 0 || **p > self.router_ports) {
            return Err(NetError::BadTopology(format!("port {p} outside 1..={}", self.router_ports)));
        }
        let cards = self
            .attachments
            .values()
            .filter(|k| **k == NodeKind::InterfaceCard)
            .count();
        if cards > 1 {
            return Err(NetError::BadTopology("more than one interface card".into()));
        }
        Ok(())
    }

    /// Parses `key=value` lines: `ports=N` and `<port>=card|accelerometer|empty`.
    /// `#` and `;` start comments.
    pub fn parse(text: &str) -> Result<Self, NetError> {
        let mut router_ports = None;
        let mut attachments = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| NetError::BadTopology(format!("line {}: expected key=value", n + 1)))?;
            let key = key.trim();
            if key.eq_ignore_ascii_case("ports") {
                let v = value
                    .trim()
                    .parse::<u8>()
                    .map_err(|_| NetError::BadTopology(format!("line {}: bad port count", n + 1)))?;
                router_ports = Some(v);
            } else {
                let port = key
                    .parse::<u8>()
                    .map_err(|_| NetError::BadTopology(format!("line {}: bad port {key:?}", n + 1)))?;
                if attachments.insert(port, value.parse()?).is_some() {
                    return Err(NetError::BadTopology(format!("port {port} attached twice")));
                }
            }
        }
        let router_ports = router_ports
            .or_else(|| attachments.keys().max().copied())
            .ok_or_else(|| NetError::BadTopology("no ports".into()))?;
        let t = Self {
            router_ports,
            attachments,
        };
        t.validate()?;
        Ok(t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AccelSample {
    pub x: i32,
    pub y: i32,
    pub z: i32,
    pub tick: u64,
}

impl AccelSample {
    pub fn to_payload(&self) -> [u8; ACCEL_SAMPLE_LEN] {
        let mut out = [0u8; ACCEL_SAMPLE_LEN];
        out[0..4].copy_from_slice(&self.x.to_le_bytes());
        out[4..8].copy_from_slice(&self.y.to_le_bytes());
        out[8..12].copy_from_slice(&self.z.to_le_bytes());
        out
    }

    /// `(x, y, z)` from a 12-byte payload; anything else is not a sample.
    pub fn parse_payload(payload: &[u8]) -> Option<(i32, i32, i32)> {
        if payload.len() != ACCEL_SAMPLE_LEN {
            return None;
        }
        let f = |i: usize| i32::from_le_bytes(payload[i..i + 4].try_into().expect("4 bytes"));
        Some((f(0), f(4), f(8)))
    }
}

/// Accelerometer output when nothing is injected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Waveform {
    Constant { x: i32, y: i32, z: i32 },
    /// x alternates `+amplitude` / `-amplitude` every `half_period` ticks.
    SquareX { amplitude: i32, half_period: u64 },
}

impl Default for Waveform {
    fn default() -> Self {
        Waveform::Constant { x: 0, y: 0, z: 0 }
    }
}

impl Waveform {
    pub fn eval(&self, tick: u64) -> (i32, i32, i32) {
        match *self {
            Waveform::Constant { x, y, z } => (x, y, z),
            Waveform::SquareX { amplitude, half_period } => {
                let phase = tick / half_period.max(1);
                let x = if phase.is_multiple_of(2) { amplitude } else { amplitude.wrapping_neg() };
                (x, 0, 0)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkCommand {
    Enable,
    Disable,
    Reset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Endpoint {
    pub state: LinkState,
    pub enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Hop {
    kind: NodeKind,
    router: Endpoint,
    node: Endpoint,
}

impl Hop {
    fn present(&self) -> bool {
        self.kind != NodeKind::Empty
    }

    fn running(&self) -> bool {
        self.router.state == LinkState::Run
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Leg {
    /// Travelling from the source node to the router.
    ToRouter,
    /// Travelling from the router to the destination node.
    ToNode,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct InFlight {
    leg: Leg,
    src_port: u8,
    due: u64,
    sample: AccelSample,
}

/// A packet handed to the node on `port` (currently always the card).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub port: u8,
    pub src_port: u8,
    pub payload: Vec<u8>,
    pub sample: AccelSample,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct NetStats {
    pub samples_emitted: u64,
    pub packets_delivered: u64,
    pub packets_dropped: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Network {
    topology: Topology,
    hops: Vec<Hop>,
    now: u64,
    sample_period: u64,
    waveform: Waveform,
    injected: Option<(i32, i32, i32)>,
    in_flight: VecDeque<InFlight>,
    stats: NetStats,
}

impl Network {
    pub fn build(topology: Topology) -> Result<Self, NetError> {
        topology.validate()?;
        let hops = (1..=topology.router_ports)
            .map(|p| {
                let kind = topology.attachment(p);
                Hop {
                    kind,
                    router: Endpoint {
                        state: LinkState::ErrorReset,
                        enabled: false,
                    },
                    node: Endpoint {
                        state: LinkState::ErrorReset,
                        enabled: kind != NodeKind::Empty,
                    },
                }
            })
            .collect();
        Ok(Self {
            topology,
            hops,
            now: 0,
            sample_period: DEFAULT_SAMPLE_PERIOD,
            waveform: Waveform::default(),
            injected: None,
            in_flight: VecDeque::new(),
            stats: NetStats::default(),
        })
    }

    pub fn with_sample_period(mut self, period: u64) -> Self {
        self.sample_period = period.max(1);
        self
    }

    pub fn with_waveform(mut self, waveform: Waveform) -> Self {
        self.waveform = waveform;
        self
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn router_ports(&self) -> u8 {
        self.topology.router_ports
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn stats(&self) -> NetStats {
        self.stats
    }

    fn hop_index(&self, port: u32) -> Result<usize, NetError> {
        if port == 0 || port > self.hops.len() as u32 {
            Err(NetError::NoSuchPort(port))
        } else {
            Ok(port as usize - 1)
        }
    }

    /// `(router endpoint, node endpoint)`; the node endpoint is `None` on an
    /// empty port.
    pub fn link(&self, port: u32) -> Result<(Endpoint, Option<Endpoint>), NetError> {
        let hop = &self.hops[self.hop_index(port)?];
        Ok((hop.router, hop.present().then_some(hop.node)))
    }

    pub fn link_state(&self, port: u32) -> Result<LinkState, NetError> {
        Ok(self.link(port)?.0.state)
    }

    pub fn link_command(&mut self, port: u32, cmd: LinkCommand) -> Result<(), NetError> {
        let i = self.hop_index(port)?;
        let hop = &mut self.hops[i];
        match cmd {
            LinkCommand::Enable => hop.router.enabled = true,
            LinkCommand::Disable => hop.router.enabled = false,
            LinkCommand::Reset => {
                hop.router.state = LinkState::ErrorReset;
                hop.node.state = LinkState::ErrorReset;
            }
        }
        Ok(())
    }

    /// Enable flag of the node-side endpoint.
    pub fn set_node_enabled(&mut self, port: u32, enabled: bool) -> Result<(), NetError> {
        let i = self.hop_index(port)?;
        self.hops[i].node.enabled = enabled;
        Ok(())
    }

    /// Bit `i - 1` set iff router port `i` is in `Run`.
    pub fn discovery_mask(&self) -> u32 {
        self.hops
            .iter()
            .enumerate()
            .filter(|(_, h)| h.running())
            .fold(0, |m, (i, _)| m | 1 << i)
    }

    pub fn set_injected_sample(&mut self, x: i32, y: i32, z: i32) {
        self.injected = Some((x, y, z));
    }

    pub fn clear_injected_sample(&mut self) {
        self.injected = None;
    }

    pub fn accel_waveform(&self, tick: u64) -> AccelSample {
        let (x, y, z) = self.injected.unwrap_or_else(|| self.waveform.eval(tick));
        AccelSample { x, y, z, tick }
    }

    /// Advances `n` ticks and returns everything delivered to nodes, in
    /// delivery order.
    pub fn tick(&mut self, n: u64) -> Vec<Delivery> {
        let mut out = Vec::new();
        for _ in 0..n {
            self.step(&mut out);
        }
        out
    }

    fn step(&mut self, out: &mut Vec<Delivery>) {
        self.now += 1;
        for hop in &mut self.hops {
            let (r, n) = (hop.router, hop.node);
            if hop.kind == NodeKind::Empty {
                hop.router.state = r.state.step(r.enabled, None);
            } else {
                hop.router.state = r.state.step(r.enabled, Some((n.state, n.enabled)));
                hop.node.state = n.state.step(n.enabled, Some((r.state, r.enabled)));
            }
        }
        self.advance_packets(out);
        if self.now.is_multiple_of(self.sample_period) {
            self.emit_samples();
        }
    }

    fn advance_packets(&mut self, out: &mut Vec<Delivery>) {
        let card = self.topology.card_port();
        let mut pending = std::mem::take(&mut self.in_flight);
        while let Some(mut pkt) = pending.pop_front() {
            if pkt.due > self.now {
                self.in_flight.push_back(pkt);
                continue;
            }
            match (pkt.leg, card) {
                (Leg::ToRouter, Some(dst)) if self.hops[dst as usize - 1].running() => {
                    pkt.leg = Leg::ToNode;
                    pkt.due = self.now + 1;
                    self.in_flight.push_back(pkt);
                }
                (Leg::ToNode, Some(dst)) if self.hops[dst as usize - 1].running() => {
                    self.stats.packets_delivered += 1;
                    out.push(Delivery {
                        port: dst,
                        src_port: pkt.src_port,
                        payload: pkt.sample.to_payload().to_vec(),
                        sample: pkt.sample,
                    });
                }
                _ => self.stats.packets_dropped += 1,
            }
        }
    }

    fn emit_samples(&mut self) {
        for (i, hop) in self.hops.iter().enumerate() {
            if hop.kind == NodeKind::Accelerometer && hop.node.state == LinkState::Run {
                let (x, y, z) = self.injected.unwrap_or_else(|| self.waveform.eval(self.now));
                self.in_flight.push_back(InFlight {
                    leg: Leg::ToRouter,
                    src_port: i as u8 + 1,
                    due: self.now + 1,
                    sample: AccelSample { x, y, z, tick: self.now },
                });
                self.stats.samples_emitted += 1;
            }
        }
    }
}

impl fmt::Display for LinkState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}
