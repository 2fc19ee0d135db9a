//! Centralized peer registry with the locality policy.
//!
//! The tracker maps every peer to its ISP and answers announces. Under the
//! locality policy it keeps, per ISP, the number of outside peers it has handed
//! to members of that ISP and refuses to hand out more than
//! `max_outgoing_per_isp`. Outside peers are picked either uniformly over all
//! peers or ISP-first with a round-robin ring. Partition repair requests are
//! answered at most once per `t1_grant_period` per ISP and bypass the cap.

use indexmap::IndexMap;
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{IspId, PeerId, Seconds};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    BittorrentRandom,
    Locality,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    RandomPeer,
    RoundRobinIsp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    pub policy: Policy,
    pub max_outgoing_per_isp: usize,
    pub selection_strategy: SelectionStrategy,
    pub pm_enabled: bool,
    pub t1_grant_period: Seconds,
    pub reannounce_period: Seconds,
    pub eviction_timeout: Seconds,
    pub peers_returned_per_announce: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            policy: Policy::BittorrentRandom,
            max_outgoing_per_isp: 4,
            selection_strategy: SelectionStrategy::RandomPeer,
            pm_enabled: false,
            t1_grant_period: 60.0,
            reannounce_period: 1800.0,
            eviction_timeout: 2700.0,
            peers_returned_per_announce: 80,
        }
    }
}

impl TrackerConfig {
    pub fn locality(max_outgoing_per_isp: usize) -> Self {
        TrackerConfig {
            policy: Policy::Locality,
            max_outgoing_per_isp,
            ..TrackerConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t1_grant_period > 0.0) {
            return Err(Error::config("t1_grant_period must be positive"));
        }
        if !(self.reannounce_period > 0.0) {
            return Err(Error::config("reannounce_period must be positive"));
        }
        if !(self.eviction_timeout > self.reannounce_period) {
            return Err(Error::config(
                "eviction_timeout must exceed reannounce_period",
            ));
        }
        if self.peers_returned_per_announce == 0 {
            return Err(Error::config("peers_returned_per_announce must be >= 1"));
        }
        Ok(())
    }

    /// Outside peers a single announce may receive while the cap has room.
    ///
    /// One for every cap up to a full peer list; larger caps are spread so
    /// that the cap can actually be reached by a realistic number of
    /// announces.
    pub fn outside_quota_per_announce(&self) -> usize {
        self.max_outgoing_per_isp
            .div_ceil(self.peers_returned_per_announce)
            .max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnounceEvent {
    Started,
    Periodic,
    Stopped,
    Completed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnounceRequest {
    pub peer_id: PeerId,
    pub isp_id: IspId,
    pub event: AnnounceEvent,
    /// Only meaningful for leechers.
    pub pm_flag: bool,
    /// Free slots in the client's peer set; zero means statistics only.
    pub num_want: usize,
}

impl AnnounceRequest {
    pub fn new(peer_id: PeerId, isp_id: IspId, event: AnnounceEvent) -> Self {
        AnnounceRequest {
            peer_id,
            isp_id,
            event,
            pm_flag: false,
            num_want: usize::MAX,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnounceReply {
    /// Peers to try, outside grants first, no duplicates, never the requester.
    pub peers: Vec<PeerId>,
    /// Subset of `peers` that were counted against the outgoing cap.
    pub outside_grants: Vec<PeerId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackerAction {
    Grant,
    PmGrant,
    PmDenied,
    PmDisabled,
    SeedIncluded,
    Stopped,
    Evicted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackerDecision {
    pub time: Seconds,
    pub isp: IspId,
    pub action: TrackerAction,
    pub peer: PeerId,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<PeerId>,
}

#[derive(Debug, Clone, Default)]
pub struct IspRegistry {
    pub isp_id: IspId,
    /// Member peers with their last announce time.
    pub members: IndexMap<PeerId, Seconds>,
    pub outgoing_counter: usize,
    pub outgoing_holders: IndexMap<PeerId, usize>,
    pub pm_last_grant: Option<Seconds>,
}

impl IspRegistry {
    fn new(isp_id: IspId) -> Self {
        IspRegistry {
            isp_id,
            ..IspRegistry::default()
        }
    }

    pub fn holder_count(&self, peer: PeerId) -> usize {
        self.outgoing_holders.get(&peer).copied().unwrap_or(0)
    }

    fn record_grant(&mut self, holder: PeerId) {
        self.outgoing_counter += 1;
        *self.outgoing_holders.entry(holder).or_insert(0) += 1;
    }

    fn drop_member(&mut self, peer: PeerId) -> bool {
        let was_member = self.members.shift_remove(&peer).is_some();
        if let Some(n) = self.outgoing_holders.shift_remove(&peer) {
            self.outgoing_counter -= n;
        }
        was_member
    }
}

/// Among `candidates`, the member holding the fewest outside peers.
///
/// Ties are broken uniformly with `rng`.
pub fn distribute_outgoing(
    registry: &IspRegistry,
    candidates: &[PeerId],
    rng: &mut impl Rng,
) -> Option<PeerId> {
    let min = candidates
        .iter()
        .map(|&p| registry.holder_count(p))
        .min()?;
    let tied: Vec<PeerId> = candidates
        .iter()
        .copied()
        .filter(|&p| registry.holder_count(p) == min)
        .collect();
    Some(tied[rng.gen_range(0..tied.len())])
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrackerStats {
    /// Outside peers handed to members of each ISP (cap-counted grants).
    pub outgoing_grants: Vec<u64>,
    /// Times a member of each ISP was handed out as someone's outside peer.
    pub incoming_grants: Vec<u64>,
    /// PM grants answered per requesting ISP.
    pub pm_grants: Vec<u64>,
    pub pm_denied: u64,
    pub pm_disabled_requests: u64,
    pub evicted: u64,
}

/// Redraws allowed when an outside pick repeats one already in the reply.
const OUTSIDE_DRAW_ATTEMPTS: usize = 16;

pub struct Tracker {
    config: TrackerConfig,
    registries: Vec<IspRegistry>,
    all: IndexMap<PeerId, IspId>,
    initial_seed: Option<PeerId>,
    rr_cursor: usize,
    /// Round-robin turns skipped while an ISP had no members, repaid first.
    rr_debt: Vec<u32>,
    rng: ChaCha8Rng,
    decisions: Vec<TrackerDecision>,
    stats: TrackerStats,
}

impl Tracker {
    pub fn new(config: TrackerConfig, n_isps: usize, rng: ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let registries = (0..n_isps as u32).map(|i| IspRegistry::new(IspId(i))).collect();
        Ok(Tracker {
            config,
            registries,
            all: IndexMap::new(),
            initial_seed: None,
            // Start just before ISP 0 so the first RR pick advances onto it.
            rr_cursor: n_isps.saturating_sub(1),
            rr_debt: vec![0; n_isps],
            rng,
            decisions: Vec::new(),
            stats: TrackerStats {
                outgoing_grants: vec![0; n_isps],
                incoming_grants: vec![0; n_isps],
                pm_grants: vec![0; n_isps],
                ..TrackerStats::default()
            },
        })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    pub fn registry(&self, isp: IspId) -> Option<&IspRegistry> {
        self.registries.get(isp.index())
    }

    pub fn registries(&self) -> &[IspRegistry] {
        &self.registries
    }

    pub fn stats(&self) -> &TrackerStats {
        &self.stats
    }

    pub fn is_registered(&self, peer: PeerId) -> bool {
        self.all.contains_key(&peer)
    }

    pub fn registered_count(&self) -> usize {
        self.all.len()
    }

    /// Flags the initial seed; its announces always get the random policy.
    pub fn mark_initial_seed(&mut self, peer: PeerId) {
        self.initial_seed = Some(peer);
    }

    pub fn drain_decisions(&mut self) -> std::vec::Drain<'_, TrackerDecision> {
        self.decisions.drain(..)
    }

    fn check_isp(&self, isp: IspId) -> Result<()> {
        if isp.index() < self.registries.len() {
            Ok(())
        } else {
            Err(Error::UnknownIsp(isp))
        }
    }

    fn log(&mut self, time: Seconds, isp: IspId, action: TrackerAction, peer: PeerId, target: Option<PeerId>) {
        self.decisions.push(TrackerDecision {
            time,
            isp,
            action,
            peer,
            target,
        });
    }

    pub fn handle_announce(&mut self, req: &AnnounceRequest, now: Seconds) -> Result<AnnounceReply> {
        let mut replies = self.handle_announce_batch(std::slice::from_ref(req), now)?;
        Ok(replies.pop().unwrap_or_default())
    }

    /// Serves announces arriving at the same instant.
    ///
    /// Outside grants for an ISP are spread over the announcing members with
    /// [`distribute_outgoing`], one per pick, until the cap or the per-announce
    /// quota is exhausted.
    pub fn handle_announce_batch(
        &mut self,
        reqs: &[AnnounceRequest],
        now: Seconds,
    ) -> Result<Vec<AnnounceReply>> {
        for req in reqs {
            self.check_isp(req.isp_id)?;
        }
        let mut replies = vec![AnnounceReply::default(); reqs.len()];
        let mut serving = Vec::new();
        for (i, req) in reqs.iter().enumerate() {
            if req.event == AnnounceEvent::Stopped {
                self.remove(req.peer_id, now, TrackerAction::Stopped);
                continue;
            }
            self.refresh(req.peer_id, req.isp_id, now);
            if req.num_want > 0 {
                serving.push(i);
            }
        }

        let locality = self.config.policy == Policy::Locality;
        if locality {
            self.grant_outside(reqs, &serving, &mut replies, now);
        }

        for &i in &serving {
            let req = &reqs[i];
            let random_policy = !locality || Some(req.peer_id) == self.initial_seed;
            let mut list = std::mem::take(&mut replies[i].peers);
            if random_policy {
                self.sample_torrent(req.peer_id, &mut list);
            } else {
                self.maybe_include_seed(req, &mut list, now);
                self.sample_local(req.peer_id, req.isp_id, &mut list);
            }
            replies[i].peers = list;
        }
        Ok(replies)
    }

    fn grant_outside(
        &mut self,
        reqs: &[AnnounceRequest],
        serving: &[usize],
        replies: &mut [AnnounceReply],
        now: Seconds,
    ) {
        let quota = self.config.outside_quota_per_announce();
        let max = self.config.max_outgoing_per_isp;
        let mut isps: Vec<IspId> = serving
            .iter()
            .map(|&i| reqs[i].isp_id)
            .collect();
        isps.sort_unstable();
        isps.dedup();
        for isp in isps {
            let mut candidates: Vec<(PeerId, usize)> = serving
                .iter()
                .filter(|&&i| reqs[i].isp_id == isp && Some(reqs[i].peer_id) != self.initial_seed)
                .map(|&i| (reqs[i].peer_id, i))
                .collect();
            let mut given = vec![0usize; candidates.len()];
            while self.registries[isp.index()].outgoing_counter < max && !candidates.is_empty() {
                let ids: Vec<PeerId> = candidates.iter().map(|c| c.0).collect();
                let holder = match distribute_outgoing(&self.registries[isp.index()], &ids, &mut self.rng) {
                    Some(h) => h,
                    None => break,
                };
                let pos = ids.iter().position(|&p| p == holder).expect("holder is a candidate");
                let reply_idx = candidates[pos].1;
                let mut pick = None;
                for _ in 0..OUTSIDE_DRAW_ATTEMPTS {
                    match self.select_outside_peer(isp) {
                        Some(p) if p != holder && !replies[reply_idx].peers.contains(&p) => {
                            pick = Some(p);
                            break;
                        }
                        Some(_) => continue,
                        None => break,
                    }
                }
                match pick {
                    Some(target) => {
                        self.registries[isp.index()].record_grant(holder);
                        self.stats.outgoing_grants[isp.index()] += 1;
                        let target_isp = self.all[&target];
                        self.stats.incoming_grants[target_isp.index()] += 1;
                        replies[reply_idx].peers.push(target);
                        replies[reply_idx].outside_grants.push(target);
                        self.log(now, isp, TrackerAction::Grant, holder, Some(target));
                        given[pos] += 1;
                        if given[pos] >= quota {
                            candidates.swap_remove(pos);
                            given.swap_remove(pos);
                        }
                    }
                    // No usable outside peer for this requester.
                    None => {
                        candidates.swap_remove(pos);
                        given.swap_remove(pos);
                    }
                }
            }
        }
    }

    fn refresh(&mut self, peer: PeerId, isp: IspId, now: Seconds) {
        if let Some(&old) = self.all.get(&peer) {
            if old != isp {
                self.registries[old.index()].drop_member(peer);
            }
        }
        self.all.insert(peer, isp);
        self.registries[isp.index()].members.insert(peer, now);
    }

    fn remove(&mut self, peer: PeerId, now: Seconds, action: TrackerAction) -> bool {
        if let Some(isp) = self.all.shift_remove(&peer) {
            self.registries[isp.index()].drop_member(peer);
            self.log(now, isp, action, peer, None);
            true
        } else {
            false
        }
    }

    fn sample_torrent(&mut self, requester: PeerId, list: &mut Vec<PeerId>) {
        let want = self.config.peers_returned_per_announce;
        let n = self.all.len();
        let amount = (want + 1).min(n);
        for idx in sample(&mut self.rng, n, amount).into_iter() {
            let (&p, _) = self.all.get_index(idx).expect("index in range");
            if p != requester && !list.contains(&p) && list.len() < want {
                list.push(p);
            }
        }
    }

    fn sample_local(&mut self, requester: PeerId, isp: IspId, list: &mut Vec<PeerId>) {
        let reg = &self.registries[isp.index()];
        let n = reg.members.len();
        let want = self.config.peers_returned_per_announce.min(n.saturating_sub(1));
        let amount = (want + 1).min(n);
        let mut added = 0;
        for idx in sample(&mut self.rng, n, amount).into_iter() {
            let (&p, _) = reg.members.get_index(idx).expect("index in range");
            if p != requester && added < want && !list.contains(&p) {
                list.push(p);
                added += 1;
            }
        }
    }

    /// The initial seed picks its neighbours with the random policy, so a
    /// leecher sees it with the same probability as under that policy.
    fn maybe_include_seed(&mut self, req: &AnnounceRequest, list: &mut Vec<PeerId>, now: Seconds) {
        let Some(seed) = self.initial_seed else { return };
        let Some(&seed_isp) = self.all.get(&seed) else { return };
        if seed_isp == req.isp_id || seed == req.peer_id || list.contains(&seed) {
            return;
        }
        let others = self.all.len().saturating_sub(1).max(1) as f64;
        let p = (self.config.peers_returned_per_announce as f64 / others).min(1.0);
        if self.rng.gen_bool(p) {
            list.push(seed);
            self.log(now, req.isp_id, TrackerAction::SeedIncluded, req.peer_id, Some(seed));
        }
    }

    /// Picks one peer outside `requesting_isp` according to the strategy.
    pub fn select_outside_peer(&mut self, requesting_isp: IspId) -> Option<PeerId> {
        let own = self
            .registries
            .get(requesting_isp.index())
            .map_or(0, |r| r.members.len());
        let outside = self.all.len() - own;
        if outside == 0 {
            return None;
        }
        match self.config.selection_strategy {
            SelectionStrategy::RandomPeer => {
                let mut r = self.rng.gen_range(0..outside);
                for reg in &self.registries {
                    if reg.isp_id == requesting_isp {
                        continue;
                    }
                    if r < reg.members.len() {
                        return reg.members.get_index(r).map(|(&p, _)| p);
                    }
                    r -= reg.members.len();
                }
                None
            }
            SelectionStrategy::RoundRobinIsp => {
                let n = self.registries.len();
                let cap = self.config.max_outgoing_per_isp.max(1) as u32;
                let owed = (1..=n)
                    .map(|d| (self.rr_cursor + d) % n)
                    .find(|&i| {
                        self.rr_debt[i] > 0
                            && i != requesting_isp.index()
                            && !self.registries[i].members.is_empty()
                    });
                let chosen = match owed {
                    Some(i) => {
                        self.rr_debt[i] -= 1;
                        Some(i)
                    }
                    None => {
                        let mut chosen = None;
                        for _ in 0..n {
                            self.rr_cursor = (self.rr_cursor + 1) % n;
                            let i = self.rr_cursor;
                            if i == requesting_isp.index() {
                                continue;
                            }
                            if self.registries[i].members.is_empty() {
                                self.rr_debt[i] = (self.rr_debt[i] + 1).min(cap);
                                continue;
                            }
                            chosen = Some(i);
                            break;
                        }
                        chosen
                    }
                };
                let reg = &self.registries[chosen?];
                let i = self.rng.gen_range(0..reg.members.len());
                reg.members.get_index(i).map(|(&p, _)| p)
            }
        }
    }

    /// Partition-merging request from a starved leecher of `isp`.
    pub fn handle_pm_request(&mut self, isp: IspId, requester: PeerId, now: Seconds) -> Option<PeerId> {
        if isp.index() >= self.registries.len() {
            return None;
        }
        if !self.config.pm_enabled {
            self.stats.pm_disabled_requests += 1;
            self.log(now, isp, TrackerAction::PmDisabled, requester, None);
            return None;
        }
        let ready = match self.registries[isp.index()].pm_last_grant {
            None => true,
            Some(last) => now - last >= self.config.t1_grant_period,
        };
        if !ready {
            self.stats.pm_denied += 1;
            self.log(now, isp, TrackerAction::PmDenied, requester, None);
            return None;
        }
        let target = self.select_outside_peer(isp)?;
        self.registries[isp.index()].pm_last_grant = Some(now);
        self.stats.pm_grants[isp.index()] += 1;
        let target_isp = self.all[&target];
        self.stats.incoming_grants[target_isp.index()] += 1;
        self.log(now, isp, TrackerAction::PmGrant, requester, Some(target));
        Some(target)
    }

    /// Removes peers silent for at least `eviction_timeout`.
    pub fn evict_stale(&mut self, now: Seconds) -> usize {
        let timeout = self.config.eviction_timeout;
        let stale: Vec<PeerId> = self
            .registries
            .iter()
            .flat_map(|r| {
                r.members
                    .iter()
                    .filter(move |(_, &last)| now - last >= timeout)
                    .map(|(&p, _)| p)
            })
            .collect();
        for &p in &stale {
            self.remove(p, now, TrackerAction::Evicted);
        }
        self.stats.evicted += stale.len() as u64;
        stale.len()
    }
}
