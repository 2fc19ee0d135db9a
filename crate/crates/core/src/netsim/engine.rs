use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::event::{EventKind, EventQueue};
use super::flow::{Flow, FlowGraph};
use super::log::{EventLog, Record};
use crate::error::Result;
use crate::metrics::{MetricsLedger, PeerRecord};
use crate::peer::{Content, PeerConfig, PeerState, Role, StarvationChange};
use crate::scenario::{DisruptionKind, ReplacementRule, ScenarioConfig};
use crate::tracker::{AnnounceEvent, AnnounceReply, AnnounceRequest, Tracker, TrackerStats};
use crate::types::{Bytes, FlowId, IspId, PeerId, Seconds, BIN_SECONDS};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub ledger: MetricsLedger,
    #[serde(skip)]
    pub log: EventLog,
    pub end_time: Seconds,
    /// `t_max` was reached with leechers still present.
    pub stalled: bool,
    pub stalled_peers: Vec<PeerId>,
    /// Peers removed by scheduled disruptions.
    pub disrupted_peers: Vec<PeerId>,
    pub starved_peers: Vec<PeerId>,
    pub tracker: TrackerStats,
    /// Inter-ISP links accepted by peers of each ISP, initial seed excluded.
    pub incoming_connections: Vec<u64>,
    pub events: u64,
    pub uploaded: Bytes,
    pub downloaded: Bytes,
    pub pm_fires: u64,
    pub have_messages: u64,
    pub bitfields: u64,
}

/// Simulates `scenario` to completion or `t_max`.
pub fn run(scenario: &ScenarioConfig) -> Result<RunResult> {
    scenario.validate()?;
    Engine::new(scenario).run()
}

fn credit(peers: &mut [PeerState], ledger: &mut MetricsLedger, bin: usize, f: &Flow, b: Bytes) {
    ledger.credit(f.src_isp, f.dst_isp, bin, b);
    peers[f.uploader.index()].uploaded += b;
    let d = &mut peers[f.downloader.index()];
    d.downloaded += b;
    if let Some(l) = d.links.get_mut(&f.uploader) {
        l.received += b;
    }
}

macro_rules! sink {
    ($s:ident) => {
        &mut |f: &Flow, b: Bytes| credit(&mut $s.peers, &mut $s.ledger, $s.bin, f, b)
    };
}

struct Engine<'a> {
    sc: &'a ScenarioConfig,
    cfg: PeerConfig,
    content: Content,
    now: Seconds,
    queue: EventQueue,
    peers: Vec<PeerState>,
    replacement: Vec<bool>,
    initial_seed: PeerId,
    flows: FlowGraph,
    tracker: Tracker,
    rng: ChaCha8Rng,
    ledger: MetricsLedger,
    log: EventLog,
    bin: usize,
    pending_reannounce: Vec<PeerId>,
    reannounce_scheduled: bool,
    touched: Vec<PeerId>,
    live_leechers: usize,
    churn_left: usize,
    incoming: Vec<u64>,
    events: u64,
    pm_fires: u64,
    disrupted: Vec<PeerId>,
    have_messages: u64,
    bitfields: u64,
    pm_enabled: bool,
}

impl<'a> Engine<'a> {
    fn new(sc: &'a ScenarioConfig) -> Self {
        let content = sc.content;
        let n_isps = sc.n_isps();
        let mut flows = FlowGraph::new(sc.topology.caps_by_isp());
        let mut peers = Vec::with_capacity(sc.peers.len() + 1);
        let mut ledger = MetricsLedger::new(n_isps, content.total_bytes());
        for p in &sc.peers {
            peers.push(PeerState::new(p.id, p.isp, Role::Leecher, p.upload_capacity, p.start_time, &content));
            flows.set_capacity(p.id, p.upload_capacity);
        }
        let seed_id = sc.initial_seed_id();
        peers.push(PeerState::new(
            seed_id,
            sc.initial_seed.isp,
            Role::InitialSeed,
            sc.initial_seed.upload_capacity,
            0.0,
            &content,
        ));
        flows.set_capacity(seed_id, sc.initial_seed.upload_capacity);
        ledger.ensure_bins(1);
        let mut tracker = Tracker::new(
            sc.tracker.clone(),
            n_isps,
            ChaCha8Rng::seed_from_u64(sc.rng_seed ^ 0x7472_6163_6b65_7200),
        )
        .expect("validated tracker config");
        tracker.mark_initial_seed(seed_id);
        let n = peers.len();
        Engine {
            sc,
            cfg: sc.peer_defaults.clone(),
            content,
            now: 0.0,
            queue: EventQueue::new(),
            peers,
            replacement: vec![false; n],
            initial_seed: seed_id,
            flows,
            tracker,
            rng: ChaCha8Rng::seed_from_u64(sc.rng_seed),
            ledger,
            log: EventLog::new(sc.log_level),
            bin: 0,
            pending_reannounce: Vec::new(),
            reannounce_scheduled: false,
            touched: Vec::new(),
            live_leechers: sc.peers.len(),
            churn_left: sc.churn.as_ref().map_or(0, |c| c.replacement_pool),
            incoming: vec![0; n_isps],
            events: 0,
            pm_fires: 0,
            disrupted: Vec::new(),
            have_messages: 0,
            bitfields: 0,
            pm_enabled: sc.tracker.pm_enabled,
        }
    }

    fn run(mut self) -> Result<RunResult> {
        self.queue.push(0.0, EventKind::PeerStart(self.initial_seed));
        for p in &self.sc.peers {
            self.queue.push(p.start_time, EventKind::PeerStart(p.id));
        }
        for (i, d) in self.sc.disruptions.iter().enumerate() {
            self.queue.push(d.time, EventKind::Disruption(i));
        }
        self.queue.push(BIN_SECONDS, EventKind::MetricsBinClose);
        let t_max = self.sc.t_max;
        let mut hit_t_max = false;
        while self.live_leechers > 0 {
            let flow_due = self.flows.next_completion();
            let ev_time = self.queue.peek_time();
            let (t, flow) = match (flow_due, ev_time) {
                (None, None) => break,
                (Some((tf, id)), Some(te)) if tf <= te => (tf, Some(id)),
                (Some((tf, id)), None) => (tf, Some(id)),
                (_, Some(te)) => (te, None),
            };
            if t > t_max {
                hit_t_max = true;
                break;
            }
            self.now = t.max(self.now);
            self.events += 1;
            match flow {
                Some(id) => self.on_flow_complete(id),
                None => {
                    let ev = self.queue.pop().expect("peeked event");
                    self.dispatch(ev.kind)?;
                }
            }
            self.end_of_event();
        }
        let end = if hit_t_max { t_max } else { self.now };
        Ok(self.finish(end))
    }

    fn finish(mut self, end: Seconds) -> RunResult {
        self.now = end;
        self.flows.advance_to(end, sink!(self));
        let stalled_peers: Vec<PeerId> = self
            .peers
            .iter()
            .filter(|p| p.alive && p.is_leecher())
            .map(|p| p.id)
            .collect();
        let starved_peers: Vec<PeerId> = self
            .peers
            .iter()
            .filter(|p| p.starved())
            .map(|p| p.id)
            .collect();
        if !stalled_peers.is_empty() {
            log::info!("run stalled at {end:.0}s with {} leechers", stalled_peers.len());
            self.log.push(end, Record::Stalled { peers: stalled_peers.clone() });
        }
        self.log.push(end, Record::End { events: self.events });
        for (i, p) in self.peers.iter().enumerate() {
            self.ledger.peers.push(PeerRecord {
                peer: p.id,
                isp: p.isp,
                capacity: p.capacity,
                start: p.start_time,
                completion: if p.role == Role::InitialSeed { None } else { p.completion_time },
                initial_seed: p.role == Role::InitialSeed,
                replacement: self.replacement[i],
            });
        }
        let uploaded = self.peers.iter().map(|p| p.uploaded).sum();
        let downloaded = self.peers.iter().map(|p| p.downloaded).sum();
        RunResult {
            ledger: self.ledger,
            log: self.log,
            end_time: end,
            stalled: !stalled_peers.is_empty(),
            stalled_peers,
            disrupted_peers: self.disrupted,
            starved_peers,
            tracker: self.tracker.stats().clone(),
            incoming_connections: self.incoming,
            events: self.events,
            uploaded,
            downloaded,
            pm_fires: self.pm_fires,
            have_messages: self.have_messages,
            bitfields: self.bitfields,
        }
    }

    fn dispatch(&mut self, kind: EventKind) -> Result<()> {
        match kind {
            EventKind::PeerStart(p) => self.start_peer(p)?,
            EventKind::AnnounceDue(p) => {
                if self.peers[p.index()].alive {
                    self.announce(p, AnnounceEvent::Periodic, false)?;
                    self.queue
                        .push(self.now + self.sc.tracker.reannounce_period, EventKind::AnnounceDue(p));
                }
            }
            EventKind::ChokeRound(p) => self.choke_round(p),
            EventKind::OptimisticRound(p) => {
                let peer = &self.peers[p.index()];
                if peer.alive && peer.is_leecher() {
                    let t = self.peers[p.index()].rotate_optimistic(&mut self.rng);
                    self.apply_transitions(p, t);
                    self.queue
                        .push(self.now + self.cfg.optimistic_period, EventKind::OptimisticRound(p));
                }
            }
            EventKind::PeerDepart(p) => self.depart(p, false)?,
            EventKind::PmTimer(p) => self.pm_timer(p)?,
            EventKind::MetricsBinClose => self.close_bin(),
            EventKind::Reannounce => self.reannounce_batch()?,
            EventKind::Disruption(i) => self.disrupt(i)?,
        }
        Ok(())
    }

    fn end_of_event(&mut self) {
        self.flows.finalize(self.now, sink!(self));
        let mut touched = std::mem::take(&mut self.touched);
        touched.sort_unstable();
        touched.dedup();
        for p in touched {
            let peer = &mut self.peers[p.index()];
            if !peer.alive {
                continue;
            }
            let change = peer.update_starvation(self.now, self.pm_enabled, self.cfg.t0_pm_base, &mut self.rng);
            match change {
                StarvationChange::Began => {
                    let pieces = peer.bitmap.count();
                    self.log.push(self.now, Record::Starved { peer: p, isp: peer.isp, pieces });
                    if let Some(d) = peer.pm_deadline {
                        self.queue.push(d, EventKind::PmTimer(p));
                    }
                }
                StarvationChange::Ended => {
                    self.log.push(self.now, Record::Unstarved { peer: p, isp: peer.isp });
                }
                StarvationChange::Unchanged => {}
            }
        }
        for d in self.tracker.drain_decisions() {
            self.log.records.push(d.into());
        }
    }

    fn touch(&mut self, p: PeerId) {
        self.touched.push(p);
    }

    fn start_peer(&mut self, p: PeerId) -> Result<()> {
        let peer = &mut self.peers[p.index()];
        if peer.alive || peer.departed {
            return Ok(());
        }
        peer.alive = true;
        let (isp, seed) = (peer.isp, peer.is_seed());
        self.log.push(self.now, Record::Join { peer: p, isp, seed });
        self.announce(p, AnnounceEvent::Started, false)?;
        let now = self.now;
        self.queue.push(now + self.sc.tracker.reannounce_period, EventKind::AnnounceDue(p));
        self.queue.push(now + self.cfg.choke_period, EventKind::ChokeRound(p));
        if !seed {
            self.queue.push(now + self.cfg.optimistic_period, EventKind::OptimisticRound(p));
        }
        self.touch(p);
        Ok(())
    }

    fn announce_request(&self, p: PeerId, event: AnnounceEvent, pm_flag: bool) -> AnnounceRequest {
        let peer = &self.peers[p.index()];
        let num_want = match event {
            AnnounceEvent::Stopped | AnnounceEvent::Completed => 0,
            _ => self.cfg.max_peer_set.saturating_sub(peer.links.len()),
        };
        AnnounceRequest {
            peer_id: p,
            isp_id: peer.isp,
            event,
            pm_flag: pm_flag && peer.is_leecher(),
            num_want,
        }
    }

    fn announce(&mut self, p: PeerId, event: AnnounceEvent, pm_flag: bool) -> Result<()> {
        let req = self.announce_request(p, event, pm_flag);
        let reply = self.tracker.handle_announce(&req, self.now)?;
        self.process_reply(p, &reply);
        Ok(())
    }

    fn process_reply(&mut self, p: PeerId, reply: &AnnounceReply) {
        for &q in &reply.peers {
            if self.peers[p.index()].is_full(self.cfg.max_peer_set) {
                break;
            }
            self.connect(p, q, false);
        }
    }

    fn reannounce_batch(&mut self) -> Result<()> {
        self.reannounce_scheduled = false;
        let mut pending = std::mem::take(&mut self.pending_reannounce);
        pending.sort_unstable();
        pending.dedup();
        let max = self.cfg.max_peer_set;
        let reqs: Vec<AnnounceRequest> = pending
            .into_iter()
            .filter(|&p| {
                let peer = &self.peers[p.index()];
                peer.alive && peer.is_leecher() && !peer.is_full(max)
            })
            .map(|p| self.announce_request(p, AnnounceEvent::Periodic, false))
            .collect();
        if reqs.is_empty() {
            return Ok(());
        }
        let replies = self.tracker.handle_announce_batch(&reqs, self.now)?;
        for (req, reply) in reqs.iter().zip(&replies) {
            self.process_reply(req.peer_id, reply);
        }
        Ok(())
    }

    /// Opens a link between `a` (initiator) and `b`; exchanges bitfields.
    fn connect(&mut self, a: PeerId, b: PeerId, force: bool) -> bool {
        if a == b {
            return false;
        }
        let (pa, pb) = (&self.peers[a.index()], &self.peers[b.index()]);
        if !pa.alive || !pb.alive || pa.links.contains_key(&b) {
            return false;
        }
        let max = self.cfg.max_peer_set;
        if !force && (pa.is_full(max) || pb.is_full(max)) {
            return false;
        }
        if pa.is_seed() && pb.is_seed() {
            return false;
        }
        let outside = pa.isp != pb.isp;
        let isp_b = pb.isp;
        let view_a = pa.bitmap.clone();
        let view_b = pb.bitmap.clone();
        let a_int = self.peers[a.index()].add_link(b, view_b, outside, true);
        let b_int = self.peers[b.index()].add_link(a, view_a, outside, false);
        self.bitfields += 2;
        if outside && a != self.initial_seed && b != self.initial_seed {
            self.incoming[isp_b.index()] += 1;
        }
        if self.log.full() {
            self.log.push(self.now, Record::Connect { peer: a, other: b, outside });
        }
        if a_int {
            self.on_interested(b, a);
        }
        if b_int {
            self.on_interested(a, b);
        }
        self.touch(a);
        self.touch(b);
        true
    }

    /// Closes the link, cancelling transfers both ways.
    fn disconnect(&mut self, a: PeerId, b: PeerId) {
        for (x, y) in [(a, b), (b, a)] {
            if let Some(fid) = self.peers[x.index()].links.get(&y).and_then(|l| l.upload) {
                self.cancel_flow(fid);
            }
        }
        let a_had = self.peers[a.index()].is_unchoked(b);
        let b_had = self.peers[b.index()].is_unchoked(a);
        self.peers[a.index()].remove_link(b);
        self.peers[b.index()].remove_link(a);
        if a_had {
            self.refill(a);
        }
        if b_had {
            self.refill(b);
        }
        self.retry_idle(a);
        self.retry_idle(b);
        self.touch(a);
        self.touch(b);
    }

    fn cancel_flow(&mut self, fid: FlowId) {
        let f = self.flows.cancel(fid, self.now, sink!(self));
        if let Some(l) = self.peers[f.uploader.index()].links.get_mut(&f.downloader) {
            l.upload = None;
        }
        let d = &mut self.peers[f.downloader.index()];
        d.remaining[f.piece] = f.remaining;
        d.in_flight.remove(f.piece);
        if let Some(l) = d.links.get_mut(&f.uploader) {
            l.download = None;
        }
    }

    /// `d` became interested in `u`.
    fn on_interested(&mut self, u: PeerId, d: PeerId) {
        let Some(l) = self.peers[u.index()].links.get_mut(&d) else {
            return;
        };
        l.peer_interested = true;
        self.refill(u);
        self.try_request(d, u);
    }

    /// `d` lost interest in `u`.
    fn on_not_interested(&mut self, u: PeerId, d: PeerId) {
        let Some(l) = self.peers[u.index()].links.get_mut(&d) else {
            return;
        };
        l.peer_interested = false;
        if self.peers[u.index()].drop_unchoke(d) {
            self.set_choked(u, d);
            self.refill(u);
        }
    }

    fn refill(&mut self, u: PeerId) {
        if !self.peers[u.index()].alive {
            return;
        }
        let added = self.peers[u.index()].fill_slots(self.now, &self.cfg, &mut self.rng);
        for n in added {
            self.apply_unchoke(u, n);
        }
    }

    fn apply_transitions(&mut self, u: PeerId, t: crate::peer::ChokeTransitions) {
        for n in t.choke {
            self.set_choked(u, n);
            self.retry_idle(n);
        }
        for n in t.unchoke {
            self.apply_unchoke(u, n);
        }
    }

    fn apply_unchoke(&mut self, u: PeerId, d: PeerId) {
        if let Some(l) = self.peers[u.index()].links.get_mut(&d) {
            l.am_choking = false;
        }
        if let Some(l) = self.peers[d.index()].links.get_mut(&u) {
            l.peer_choking = false;
        }
        if self.log.full() {
            self.log.push(self.now, Record::Unchoke { peer: u, other: d });
        }
        self.try_request(d, u);
    }

    /// Marks `d` choked by `u` and stops the transfer between them.
    fn set_choked(&mut self, u: PeerId, d: PeerId) {
        let upload = self.peers[u.index()].links.get_mut(&d).and_then(|l| {
            l.am_choking = true;
            l.upload
        });
        if let Some(l) = self.peers[d.index()].links.get_mut(&u) {
            l.peer_choking = true;
        }
        if let Some(fid) = upload {
            self.cancel_flow(fid);
        }
        if self.log.full() {
            self.log.push(self.now, Record::Choke { peer: u, other: d });
        }
    }

    /// Starts a piece transfer `u -> d` if `d` is unchoked, idle and has a
    /// piece to ask for.
    fn try_request(&mut self, d: PeerId, u: PeerId) {
        let dp = &self.peers[d.index()];
        if !dp.alive || !dp.is_leecher() {
            return;
        }
        let Some(l) = dp.links.get(&u) else { return };
        if l.peer_choking || l.download.is_some() || !l.am_interested() {
            return;
        }
        let Some(piece) = dp.select_piece(u, &mut self.rng) else {
            return;
        };
        let remaining = dp.remaining[piece];
        let (src, dst) = (self.peers[u.index()].isp, dp.isp);
        let fid = self.flows.start(u, d, src, dst, piece, remaining);
        let dp = &mut self.peers[d.index()];
        dp.in_flight.insert(piece);
        dp.links[&u].download = Some(fid);
        self.peers[u.index()].links[&d].upload = Some(fid);
    }

    fn retry_idle(&mut self, d: PeerId) {
        let dp = &self.peers[d.index()];
        if !dp.alive || !dp.is_leecher() {
            return;
        }
        let idle: Vec<PeerId> = dp
            .links
            .iter()
            .filter(|(_, l)| !l.peer_choking && l.download.is_none() && l.am_interested())
            .map(|(&n, _)| n)
            .collect();
        for u in idle {
            self.try_request(d, u);
        }
    }

    fn on_flow_complete(&mut self, fid: FlowId) {
        let f = self.flows.complete(fid, self.now, sink!(self));
        let (u, d, piece) = (f.uploader, f.downloader, f.piece);
        if let Some(l) = self.peers[u.index()].links.get_mut(&d) {
            l.upload = None;
        }
        if let Some(l) = self.peers[d.index()].links.get_mut(&u) {
            l.download = None;
        }
        let out = self.peers[d.index()].complete_piece(piece, self.now);
        if out.duplicate {
            self.retry_idle(d);
            return;
        }
        if self.log.full() {
            self.log.push(self.now, Record::Piece { peer: d, from: u, piece });
        }
        let neighbours: Vec<PeerId> = self.peers[d.index()].links.keys().copied().collect();
        self.have_messages += neighbours.len() as u64;
        for n in neighbours {
            if self.peers[n.index()].receive_have(d, piece) {
                self.on_interested(d, n);
                self.touch(n);
            } else {
                self.try_request(n, d);
            }
        }
        for n in out.lost_interest {
            self.on_not_interested(n, d);
        }
        self.touch(d);
        if out.completed {
            self.on_complete(d);
        } else {
            self.try_request(d, u);
        }
    }

    fn on_complete(&mut self, d: PeerId) {
        let isp = self.peers[d.index()].isp;
        self.log.push(self.now, Record::Complete { peer: d, isp });
        let req = self.announce_request(d, AnnounceEvent::Completed, false);
        // Completed announces carry no peer request; they cannot fail for a
        // registered ISP.
        let _ = self.tracker.handle_announce(&req, self.now);
        {
            let peer = &mut self.peers[d.index()];
            if let Some(o) = peer.optimistic.take() {
                peer.unchoked.push(o);
            }
        }
        let seeds: Vec<PeerId> = self.peers[d.index()]
            .links
            .keys()
            .copied()
            .filter(|n| self.peers[n.index()].is_seed())
            .collect();
        for n in seeds {
            self.disconnect(d, n);
        }
        self.refill(d);
        self.queue.push(self.now + self.cfg.seed_linger, EventKind::PeerDepart(d));
        self.spawn_replacement(d);
    }

    fn spawn_replacement(&mut self, completed: PeerId) {
        let Some(plan) = &self.sc.churn else { return };
        if self.churn_left == 0 || self.replacement[completed.index()] {
            return;
        }
        self.churn_left -= 1;
        let isp = match plan.rule {
            ReplacementRule::SameIsp => self.peers[completed.index()].isp,
            ReplacementRule::UniformIsp => IspId(self.rng.gen_range(0..self.sc.n_isps() as u32)),
        };
        let id = PeerId(self.peers.len() as u32);
        let cap = self.peers[completed.index()].capacity;
        self.peers.push(PeerState::new(id, isp, Role::Leecher, cap, self.now, &self.content));
        self.replacement.push(true);
        self.flows.set_capacity(id, cap);
        self.live_leechers += 1;
        self.queue.push(self.now, EventKind::PeerStart(id));
    }

    fn depart(&mut self, p: PeerId, crash: bool) -> Result<()> {
        if !self.peers[p.index()].alive {
            return Ok(());
        }
        let neighbours: Vec<PeerId> = self.peers[p.index()].links.keys().copied().collect();
        let max = self.cfg.max_peer_set;
        for n in neighbours {
            self.disconnect(p, n);
            let np = &self.peers[n.index()];
            if np.alive && np.is_leecher() && !np.is_full(max) {
                self.pending_reannounce.push(n);
            }
        }
        let isp = {
            let peer = &mut self.peers[p.index()];
            peer.alive = false;
            peer.departed = true;
            peer.crashed = crash;
            peer.starved_since = None;
            peer.pm_deadline = None;
            peer.isp
        };
        if !crash {
            let req = self.announce_request(p, AnnounceEvent::Stopped, false);
            self.tracker.handle_announce(&req, self.now)?;
        }
        if p != self.initial_seed {
            self.live_leechers -= 1;
        }
        self.log.push(self.now, Record::Depart { peer: p, isp, crash });
        if !self.pending_reannounce.is_empty() && !self.reannounce_scheduled {
            self.reannounce_scheduled = true;
            self.queue.push(self.now, EventKind::Reannounce);
        }
        Ok(())
    }

    fn disrupt(&mut self, index: usize) -> Result<()> {
        let d = &self.sc.disruptions[index];
        let (victims, crash): (Vec<PeerId>, bool) = match &d.kind {
            DisruptionKind::IsolateIsp {
                isp,
                include_initial_seed,
            } => {
                let mut v: Vec<PeerId> = self
                    .peers
                    .iter()
                    .filter(|p| {
                        p.alive
                            && p.isp == *isp
                            && p.role != Role::InitialSeed
                            && p.links.values().any(|l| l.outside)
                    })
                    .map(|p| p.id)
                    .collect();
                if *include_initial_seed {
                    v.push(self.initial_seed);
                }
                (v, true)
            }
            DisruptionKind::Depart { peers, crash } => (peers.clone(), *crash),
        };
        let crashed: Vec<PeerId> = victims
            .iter()
            .copied()
            .filter(|p| self.peers[p.index()].alive)
            .collect();
        for &p in &crashed {
            self.depart(p, crash)?;
        }
        self.disrupted.extend_from_slice(&crashed);
        self.log.push(self.now, Record::Disruption { index, crashed });
        Ok(())
    }

    fn choke_round(&mut self, p: PeerId) {
        if !self.peers[p.index()].alive {
            return;
        }
        self.queue.push(self.now + self.cfg.choke_period, EventKind::ChokeRound(p));
        let now = self.now;
        let progress: Vec<Bytes> = self.peers[p.index()]
            .links
            .values()
            .map(|l| l.download.map_or(0.0, |f| self.flows.progress(f, now)))
            .collect();
        let t = self.peers[p.index()].recompute_choking(now, &self.cfg, |i, _| progress[i], &mut self.rng);
        self.apply_transitions(p, t);
    }

    fn pm_timer(&mut self, p: PeerId) -> Result<()> {
        let peer = &mut self.peers[p.index()];
        if !peer.alive || !peer.is_leecher() || !self.pm_enabled {
            return Ok(());
        }
        let before = peer.pm_deadline;
        let fire = peer.pm_check(self.now, self.cfg.t0_pm_base, &mut self.rng);
        let after = peer.pm_deadline;
        if after != before {
            if let Some(d) = after {
                self.queue.push(d, EventKind::PmTimer(p));
            }
        }
        if fire {
            self.fire_pm(p)?;
        }
        Ok(())
    }

    fn fire_pm(&mut self, p: PeerId) -> Result<()> {
        self.pm_fires += 1;
        let isp = self.peers[p.index()].isp;
        self.log.push(self.now, Record::PmFire { peer: p, isp });
        if let Some(q) = self.tracker.handle_pm_request(isp, p, self.now) {
            self.pm_connect(p, q);
        }
        self.announce(p, AnnounceEvent::Periodic, true)
    }

    /// Repair link; a full requester drops one useless neighbour first and
    /// the target accepts even when its own set is full.
    fn pm_connect(&mut self, p: PeerId, q: PeerId) {
        let peer = &self.peers[p.index()];
        if !self.peers[q.index()].alive || peer.links.contains_key(&q) {
            return;
        }
        if peer.is_full(self.cfg.max_peer_set) {
            let useless = peer
                .links
                .iter()
                .find(|(_, l)| !l.am_interested() && !l.peer_interested)
                .or_else(|| peer.links.iter().find(|(_, l)| !l.am_interested()))
                .map(|(&n, _)| n);
            if let Some(n) = useless {
                self.disconnect(p, n);
            }
        }
        self.connect(p, q, true);
    }

    fn close_bin(&mut self) {
        self.flows.advance_to(self.now, sink!(self));
        self.log.push(self.now, Record::BinClose { bin: self.bin });
        self.bin += 1;
        self.ledger.ensure_bins(self.bin + 1);
        self.tracker.evict_stale(self.now);
        self.queue
            .push((self.bin + 1) as f64 * BIN_SECONDS, EventKind::MetricsBinClose);
    }
}
