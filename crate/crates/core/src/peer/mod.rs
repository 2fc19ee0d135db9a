//! Per-peer client state: pieces, neighbour views, interest and choking.
//!
//! A [`PeerState`] is a passive state machine. The event loop in
//! [`crate::netsim`] delivers HAVE/bitfield messages, asks for choke
//! decisions and piece choices, and applies the resulting transitions to the
//! flow graph and to the other side of each link.

mod pieces;

pub use pieces::PieceSet;

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Bytes, BytesPerSec, FlowId, IspId, PeerId, Seconds, KB};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerConfig {
    pub upload_capacity: BytesPerSec,
    pub upload_slots: usize,
    pub max_peer_set: usize,
    pub optimistic_period: Seconds,
    pub choke_period: Seconds,
    pub rate_window: Seconds,
    pub t0_pm_base: Seconds,
    pub seed_linger: Seconds,
}

impl Default for PeerConfig {
    fn default() -> Self {
        PeerConfig {
            upload_capacity: 20.0 * KB,
            upload_slots: 4,
            max_peer_set: 80,
            optimistic_period: 30.0,
            choke_period: 10.0,
            rate_window: 10.0,
            t0_pm_base: 60.0,
            seed_linger: 300.0,
        }
    }
}

impl PeerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.upload_slots == 0 {
            return Err(Error::config("upload_slots must be >= 1"));
        }
        if self.max_peer_set < self.upload_slots {
            return Err(Error::config("max_peer_set must be >= upload_slots"));
        }
        if !(self.upload_capacity > 0.0) {
            return Err(Error::config("upload_capacity must be positive"));
        }
        for (name, v) in [
            ("optimistic_period", self.optimistic_period),
            ("choke_period", self.choke_period),
            ("rate_window", self.rate_window),
            ("t0_pm_base", self.t0_pm_base),
        ] {
            if !(v > 0.0) {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !(self.seed_linger >= 0.0) {
            return Err(Error::config("seed_linger must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Content {
    pub piece_count: usize,
    pub piece_size: Bytes,
}

impl Default for Content {
    fn default() -> Self {
        Content {
            piece_count: 400,
            piece_size: 256.0 * KB,
        }
    }
}

impl Content {
    pub fn total_bytes(&self) -> Bytes {
        self.piece_count as f64 * self.piece_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.piece_count == 0 {
            return Err(Error::config("piece_count must be >= 1"));
        }
        if self.piece_count > u16::MAX as usize {
            return Err(Error::config("piece_count too large"));
        }
        if !(self.piece_size > 0.0) {
            return Err(Error::config("piece_size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Leecher,
    Seed,
    InitialSeed,
}

/// One side of a neighbour relation.
#[derive(Debug, Clone)]
pub struct Link {
    /// Pieces the neighbour announced through its bitfield and HAVEs.
    pub view: PieceSet,
    /// Pieces of `view` this peer still lacks.
    pub missing: usize,
    pub peer_interested: bool,
    pub am_choking: bool,
    pub peer_choking: bool,
    /// Settled bytes received from the neighbour.
    pub received: Bytes,
    pub received_mark: Bytes,
    pub rate: BytesPerSec,
    pub last_served: Option<Seconds>,
    pub serve_count: u32,
    pub download: Option<FlowId>,
    pub upload: Option<FlowId>,
    /// The neighbour sits in a different ISP.
    pub outside: bool,
    pub initiated: bool,
}

impl Link {
    pub fn new(view: PieceSet, outside: bool, initiated: bool) -> Self {
        Link {
            view,
            missing: 0,
            peer_interested: false,
            am_choking: true,
            peer_choking: true,
            received: 0.0,
            received_mark: 0.0,
            rate: 0.0,
            last_served: None,
            serve_count: 0,
            download: None,
            upload: None,
            outside,
            initiated,
        }
    }

    pub fn am_interested(&self) -> bool {
        self.missing > 0
    }
}

/// Unchoke/choke decisions produced by the choke algorithm.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ChokeTransitions {
    pub unchoke: Vec<PeerId>,
    pub choke: Vec<PeerId>,
}

impl ChokeTransitions {
    pub fn is_empty(&self) -> bool {
        self.unchoke.is_empty() && self.choke.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PieceOutcome {
    pub duplicate: bool,
    /// Neighbours that no longer have anything this peer needs.
    pub lost_interest: Vec<PeerId>,
    pub completed: bool,
}

#[derive(Debug, Clone)]
pub struct PeerState {
    pub id: PeerId,
    pub isp: IspId,
    pub role: Role,
    pub capacity: BytesPerSec,
    pub start_time: Seconds,
    pub bitmap: PieceSet,
    pub links: IndexMap<PeerId, Link>,
    /// Copies of each piece among the neighbour views.
    pub availability: Vec<u16>,
    pub in_flight: PieceSet,
    /// Remaining bytes per piece; below `piece_size` means partially fetched.
    pub remaining: Vec<Bytes>,
    pub piece_size: Bytes,
    pub unchoked: Vec<PeerId>,
    pub optimistic: Option<PeerId>,
    pub interesting_count: usize,
    pub starved_since: Option<Seconds>,
    pub pm_deadline: Option<Seconds>,
    pub completion_time: Option<Seconds>,
    pub uploaded: Bytes,
    pub downloaded: Bytes,
    pub alive: bool,
    pub departed: bool,
    pub crashed: bool,
    pub active_uploads: usize,
}

impl PeerState {
    pub fn new(
        id: PeerId,
        isp: IspId,
        role: Role,
        capacity: BytesPerSec,
        start_time: Seconds,
        content: &Content,
    ) -> Self {
        let n = content.piece_count;
        let seed = role != Role::Leecher;
        PeerState {
            id,
            isp,
            role,
            capacity,
            start_time,
            bitmap: if seed { PieceSet::full(n) } else { PieceSet::empty(n) },
            links: IndexMap::new(),
            availability: vec![0; n],
            in_flight: PieceSet::empty(n),
            remaining: vec![if seed { 0.0 } else { content.piece_size }; n],
            piece_size: content.piece_size,
            unchoked: Vec::new(),
            optimistic: None,
            interesting_count: 0,
            starved_since: None,
            pm_deadline: None,
            completion_time: None,
            uploaded: 0.0,
            downloaded: 0.0,
            alive: false,
            departed: false,
            crashed: false,
            active_uploads: 0,
        }
    }

    pub fn is_seed(&self) -> bool {
        self.role != Role::Leecher
    }

    pub fn is_leecher(&self) -> bool {
        self.role == Role::Leecher
    }

    pub fn is_full(&self, max_peer_set: usize) -> bool {
        self.links.len() >= max_peer_set
    }

    pub fn unchoked_count(&self) -> usize {
        self.unchoked.len() + usize::from(self.optimistic.is_some())
    }

    pub fn is_unchoked(&self, n: PeerId) -> bool {
        self.optimistic == Some(n) || self.unchoked.contains(&n)
    }

    /// Regular (rate- or rotation-based) slots for the current role.
    pub fn regular_slots(&self, upload_slots: usize) -> usize {
        if self.is_seed() {
            upload_slots
        } else {
            upload_slots.saturating_sub(1).max(1)
        }
    }

    /// Leecher with nothing to fetch from any neighbour, including none at all.
    pub fn starved(&self) -> bool {
        self.is_leecher() && self.alive && self.interesting_count == 0
    }

    /// Registers a neighbour and its bitfield. Returns whether this peer is
    /// interested in it.
    pub fn add_link(&mut self, n: PeerId, view: PieceSet, outside: bool, initiated: bool) -> bool {
        for p in view.iter() {
            self.availability[p] += 1;
        }
        let mut link = Link::new(view, outside, initiated);
        link.missing = link.view.difference_count(&self.bitmap);
        let interested = link.am_interested();
        if interested {
            self.interesting_count += 1;
        }
        self.links.insert(n, link);
        interested
    }

    /// Drops a neighbour, releasing its availability and any unchoke slot.
    pub fn remove_link(&mut self, n: PeerId) -> Option<Link> {
        let link = self.links.shift_remove(&n)?;
        for p in link.view.iter() {
            self.availability[p] -= 1;
        }
        if link.am_interested() {
            self.interesting_count -= 1;
        }
        self.unchoked.retain(|&u| u != n);
        if self.optimistic == Some(n) {
            self.optimistic = None;
        }
        Some(link)
    }

    /// HAVE from `n`. Returns true when it makes `n` interesting.
    pub fn receive_have(&mut self, n: PeerId, piece: usize) -> bool {
        let lacks = !self.bitmap.contains(piece);
        let Some(link) = self.links.get_mut(&n) else {
            return false;
        };
        if !link.view.insert(piece) {
            return false;
        }
        self.availability[piece] += 1;
        if lacks {
            link.missing += 1;
            if link.missing == 1 {
                self.interesting_count += 1;
                return true;
            }
        }
        false
    }

    /// Marks `piece` as owned and re-evaluates interest.
    pub fn complete_piece(&mut self, piece: usize, now: Seconds) -> PieceOutcome {
        let mut out = PieceOutcome::default();
        self.in_flight.remove(piece);
        if !self.bitmap.insert(piece) {
            log::debug!("{} duplicate completion of piece {piece}", self.id);
            out.duplicate = true;
            return out;
        }
        self.remaining[piece] = 0.0;
        for (&n, link) in self.links.iter_mut() {
            if link.view.contains(piece) {
                link.missing -= 1;
                if link.missing == 0 {
                    self.interesting_count -= 1;
                    out.lost_interest.push(n);
                }
            }
        }
        if self.bitmap.is_full() {
            out.completed = true;
            self.completion_time = Some(now);
            if self.role == Role::Leecher {
                self.role = Role::Seed;
            }
            self.starved_since = None;
            self.pm_deadline = None;
        }
        out
    }

    /// Rarest-first choice among pieces `from` has and this peer neither owns
    /// nor is already fetching. Partially fetched pieces come first.
    pub fn select_piece(&self, from: PeerId, rng: &mut impl Rng) -> Option<usize> {
        let link = self.links.get(&from)?;
        let mut best: Option<(bool, u16)> = None;
        let mut chosen = None;
        let mut ties = 0u32;
        for p in link.view.iter_missing_from(&self.bitmap, &self.in_flight) {
            let partial = self.remaining[p] < self.piece_size;
            let key = (!partial, self.availability[p]);
            match best {
                Some(b) if key > b => continue,
                Some(b) if key == b => {
                    ties += 1;
                    if rng.gen_range(0..ties) == 0 {
                        chosen = Some(p);
                    }
                }
                _ => {
                    best = Some(key);
                    chosen = Some(p);
                    ties = 1;
                }
            }
        }
        chosen
    }

    /// Periodic choke decision.
    ///
    /// `in_progress(i, n)` must return bytes received from the `i`-th
    /// neighbour `n` on the current, not yet settled, transfer.
    pub fn recompute_choking(
        &mut self,
        now: Seconds,
        cfg: &PeerConfig,
        in_progress: impl Fn(usize, PeerId) -> Bytes,
        rng: &mut impl Rng,
    ) -> ChokeTransitions {
        for (i, (&n, link)) in self.links.iter_mut().enumerate() {
            let total = link.received + in_progress(i, n);
            link.rate = (total - link.received_mark).max(0.0) / cfg.rate_window;
            link.received_mark = total;
        }
        let before = self.unchoked_set();
        let slots = self.regular_slots(cfg.upload_slots);
        if self.is_seed() {
            let mut cands: Vec<(Option<Seconds>, u32, u64, PeerId)> = self
                .links
                .iter()
                .filter(|(_, l)| l.peer_interested)
                .map(|(&n, l)| (l.last_served, l.serve_count, rng.gen(), n))
                .collect();
            cands.sort_by(|a, b| {
                let la = a.0.unwrap_or(f64::NEG_INFINITY);
                let lb = b.0.unwrap_or(f64::NEG_INFINITY);
                la.total_cmp(&lb).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
            });
            self.unchoked = cands.iter().take(slots).map(|c| c.3).collect();
            self.optimistic = None;
            for &n in &self.unchoked {
                let l = &mut self.links[&n];
                l.last_served = Some(now);
                l.serve_count += 1;
            }
        } else {
            let mut cands: Vec<(BytesPerSec, u64, PeerId)> = self
                .links
                .iter()
                .filter(|(_, l)| l.peer_interested)
                .map(|(&n, l)| (l.rate, rng.gen(), n))
                .collect();
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            self.unchoked = cands.iter().take(slots).map(|c| c.2).collect();
            let keep = self.optimistic.filter(|o| {
                !self.unchoked.contains(o) && self.links.get(o).is_some_and(|l| l.peer_interested)
            });
            self.optimistic = keep;
            if self.optimistic.is_none() {
                self.optimistic = self.pick_optimistic(None, rng);
            }
        }
        self.diff(before)
    }

    /// Rotates the optimistic unchoke (leechers only).
    pub fn rotate_optimistic(&mut self, rng: &mut impl Rng) -> ChokeTransitions {
        if self.is_seed() {
            return ChokeTransitions::default();
        }
        let before = self.unchoked_set();
        let current = self.optimistic;
        self.optimistic = self.pick_optimistic(current, rng).or(current.filter(|o| {
            self.links.get(o).is_some_and(|l| l.peer_interested)
        }));
        self.diff(before)
    }

    /// Uniform choice among interested, choked neighbours, avoiding `avoid`.
    fn pick_optimistic(&self, avoid: Option<PeerId>, rng: &mut impl Rng) -> Option<PeerId> {
        let cands: Vec<PeerId> = self
            .links
            .iter()
            .filter(|(&n, l)| l.peer_interested && !self.unchoked.contains(&n) && Some(n) != avoid)
            .map(|(&n, _)| n)
            .collect();
        if cands.is_empty() {
            None
        } else {
            Some(cands[rng.gen_range(0..cands.len())])
        }
    }

    /// Fills free upload slots right away, e.g. after a neighbour became
    /// interested or an unchoked one lost interest.
    pub fn fill_slots(&mut self, now: Seconds, cfg: &PeerConfig, rng: &mut impl Rng) -> Vec<PeerId> {
        let slots = self.regular_slots(cfg.upload_slots);
        let mut added = Vec::new();
        loop {
            let regular_free = self.unchoked.len() < slots;
            let optimistic_free = self.is_leecher() && self.optimistic.is_none();
            if !regular_free && !optimistic_free {
                break;
            }
            let pick = if self.is_seed() {
                self.links
                    .iter()
                    .filter(|(&n, l)| l.peer_interested && !self.unchoked.contains(&n))
                    .min_by(|a, b| {
                        let la = a.1.last_served.unwrap_or(f64::NEG_INFINITY);
                        let lb = b.1.last_served.unwrap_or(f64::NEG_INFINITY);
                        la.total_cmp(&lb).then(a.1.serve_count.cmp(&b.1.serve_count))
                    })
                    .map(|(&n, _)| n)
            } else {
                self.pick_optimistic(None, rng)
            };
            let Some(n) = pick else { break };
            if regular_free {
                self.unchoked.push(n);
            } else {
                self.optimistic = Some(n);
            }
            if self.is_seed() {
                let l = &mut self.links[&n];
                l.last_served = Some(now);
                l.serve_count += 1;
            }
            added.push(n);
        }
        added
    }

    /// Removes `n` from the unchoke slots; true when it held one.
    pub fn drop_unchoke(&mut self, n: PeerId) -> bool {
        let before = self.unchoked.len();
        self.unchoked.retain(|&u| u != n);
        let mut dropped = before != self.unchoked.len();
        if self.optimistic == Some(n) {
            self.optimistic = None;
            dropped = true;
        }
        dropped
    }

    fn unchoked_set(&self) -> Vec<PeerId> {
        let mut v = self.unchoked.clone();
        v.extend(self.optimistic);
        v
    }

    /// Applies the new unchoke set to the per-link flags.
    fn diff(&mut self, before: Vec<PeerId>) -> ChokeTransitions {
        let after = self.unchoked_set();
        let mut t = ChokeTransitions::default();
        for &n in &before {
            if !after.contains(&n) {
                t.choke.push(n);
                if let Some(l) = self.links.get_mut(&n) {
                    l.am_choking = true;
                }
            }
        }
        for &n in &after {
            if !before.contains(&n) {
                t.unchoke.push(n);
            }
            if let Some(l) = self.links.get_mut(&n) {
                l.am_choking = false;
            }
        }
        t
    }

    /// Tracks starvation onset without firing. With `pm` set, a fresh onset
    /// also draws the PM deadline.
    pub fn update_starvation(&mut self, now: Seconds, pm: bool, t0: Seconds, rng: &mut impl Rng) -> StarvationChange {
        match (self.starved(), self.starved_since.is_some()) {
            (true, false) => {
                self.starved_since = Some(now);
                self.pm_deadline = pm.then(|| now + draw_delay(t0, rng));
                StarvationChange::Began
            }
            (false, true) => {
                self.starved_since = None;
                self.pm_deadline = None;
                StarvationChange::Ended
            }
            _ => StarvationChange::Unchanged,
        }
    }

    /// Partition detection. Maintains the starvation deadline and returns
    /// true when a PM announce is due at `now`.
    pub fn pm_check(&mut self, now: Seconds, t0: Seconds, rng: &mut impl Rng) -> bool {
        if !self.starved() {
            self.starved_since = None;
            self.pm_deadline = None;
            return false;
        }
        if self.starved_since.is_none() {
            self.starved_since = Some(now);
            self.pm_deadline = Some(now + draw_delay(t0, rng));
            return false;
        }
        match self.pm_deadline {
            Some(d) if now >= d => {
                self.pm_deadline = Some(now + draw_delay(t0, rng));
                true
            }
            None => {
                self.pm_deadline = Some(now + draw_delay(t0, rng));
                false
            }
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StarvationChange {
    Began,
    Ended,
    Unchanged,
}

/// Uniform on (0, t0].
pub fn draw_delay(t0: Seconds, rng: &mut impl Rng) -> Seconds {
    let u: f64 = rng.gen();
    t0 * (1.0 - u)
}

#[cfg(test)]
mod tests;
