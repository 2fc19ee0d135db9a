//! Fluid transfer model.
//!
//! Each uploader splits its capacity equally over its active flows (the flow's
//! base rate). Flows leaving an ISP with an outbound cap are additionally
//! scaled by `min(1, cap / demand)`, where demand is the sum of base rates of
//! that ISP's outbound flows. No re-grant of the capacity freed by scaling.
//!
//! Instead of touching every flow of an ISP when its scale changes, each
//! capped ISP runs a virtual clock `V` advancing at `scale` virtual seconds
//! per real second. A flow progresses `base_rate` bytes per virtual second,
//! so its completion point in virtual time is fixed until its own base rate
//! changes. Uncapped flows share clock 0, which runs at real time.

use std::collections::BTreeSet;

use ordered_float::OrderedFloat;

use crate::types::{Bytes, BytesPerSec, FlowId, IspId, PeerId, Seconds};

/// Relative slack accepted when a settled flow overshoots its remaining bytes.
const OVERSHOOT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct Flow {
    pub uploader: PeerId,
    pub downloader: PeerId,
    pub src_isp: IspId,
    pub dst_isp: IspId,
    pub piece: usize,
    /// Bytes left as of `v_start`.
    pub remaining: Bytes,
    base_rate: BytesPerSec,
    clock: usize,
    v_start: f64,
    target: f64,
    scheduled: bool,
}

impl Flow {
    pub fn base_rate(&self) -> BytesPerSec {
        self.base_rate
    }

    pub fn is_inter_isp(&self) -> bool {
        self.src_isp != self.dst_isp
    }
}

#[derive(Debug, Clone)]
struct Clock {
    t: Seconds,
    v: f64,
    scale: f64,
    cap: Option<BytesPerSec>,
    demand: BytesPerSec,
    targets: BTreeSet<(OrderedFloat<f64>, FlowId)>,
}

impl Clock {
    fn new(cap: Option<BytesPerSec>) -> Self {
        Clock {
            t: 0.0,
            v: 0.0,
            scale: 1.0,
            cap,
            demand: 0.0,
            targets: BTreeSet::new(),
        }
    }

    fn advance(&mut self, now: Seconds) {
        if now > self.t {
            self.v += (now - self.t) * self.scale;
            self.t = now;
        }
    }

    fn v_at(&self, now: Seconds) -> f64 {
        if now > self.t {
            self.v + (now - self.t) * self.scale
        } else {
            self.v
        }
    }

    fn target_scale(&self) -> f64 {
        match self.cap {
            Some(cap) if self.demand > cap => cap / self.demand,
            _ => 1.0,
        }
    }

    fn due(&self) -> Option<(Seconds, FlowId)> {
        let &(target, id) = self.targets.first()?;
        let wait = ((target.0 - self.v) / self.scale).max(0.0);
        Some((self.t + wait, id))
    }
}

/// Rate assigned to one flow by [`FlowGraph::recompute_rates`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateAssignment {
    pub flow: FlowId,
    pub rate: BytesPerSec,
}

#[derive(Debug, Clone)]
pub struct FlowGraph {
    flows: Vec<Option<Flow>>,
    free: Vec<u32>,
    clocks: Vec<Clock>,
    isp_clock: Vec<usize>,
    link_caps: Vec<Option<BytesPerSec>>,
    by_uploader: Vec<Vec<FlowId>>,
    capacity: Vec<BytesPerSec>,
    dirty_uploaders: Vec<PeerId>,
    dirty_clocks: Vec<usize>,
    active: usize,
}

impl FlowGraph {
    /// `link_caps[i]` bounds the aggregate rate of flows leaving ISP `i`.
    pub fn new(link_caps: Vec<Option<BytesPerSec>>) -> Self {
        let mut clocks = vec![Clock::new(None)];
        let mut isp_clock = Vec::with_capacity(link_caps.len());
        for cap in &link_caps {
            match cap {
                Some(c) => {
                    isp_clock.push(clocks.len());
                    clocks.push(Clock::new(Some(*c)));
                }
                None => isp_clock.push(0),
            }
        }
        FlowGraph {
            flows: Vec::new(),
            free: Vec::new(),
            clocks,
            isp_clock,
            link_caps,
            by_uploader: Vec::new(),
            capacity: Vec::new(),
            dirty_uploaders: Vec::new(),
            dirty_clocks: Vec::new(),
            active: 0,
        }
    }

    pub fn set_capacity(&mut self, peer: PeerId, capacity: BytesPerSec) {
        let i = peer.index();
        if self.capacity.len() <= i {
            self.capacity.resize(i + 1, 0.0);
            self.by_uploader.resize_with(i + 1, Vec::new);
        }
        self.capacity[i] = capacity;
    }

    pub fn link_cap(&self, isp: IspId) -> Option<BytesPerSec> {
        self.link_caps.get(isp.index()).copied().flatten()
    }

    pub fn len(&self) -> usize {
        self.active
    }

    pub fn is_empty(&self) -> bool {
        self.active == 0
    }

    pub fn get(&self, id: FlowId) -> Option<&Flow> {
        self.flows.get(id.0 as usize).and_then(Option::as_ref)
    }

    pub fn uploads_of(&self, peer: PeerId) -> &[FlowId] {
        self.by_uploader.get(peer.index()).map_or(&[], Vec::as_slice)
    }

    pub fn ids(&self) -> impl Iterator<Item = FlowId> + '_ {
        self.flows
            .iter()
            .enumerate()
            .filter(|(_, f)| f.is_some())
            .map(|(i, _)| FlowId(i as u32))
    }

    /// Current effective rate of a flow (zero while its rate is pending).
    pub fn rate(&self, id: FlowId) -> BytesPerSec {
        self.get(id).map_or(0.0, |f| {
            if f.scheduled {
                f.base_rate * self.clocks[f.clock].scale
            } else {
                0.0
            }
        })
    }

    /// Opens a flow. Its rate is assigned by the next [`FlowGraph::finalize`].
    pub fn start(
        &mut self,
        uploader: PeerId,
        downloader: PeerId,
        src_isp: IspId,
        dst_isp: IspId,
        piece: usize,
        remaining: Bytes,
    ) -> FlowId {
        assert!(remaining > 0.0, "flow started with nothing to transfer");
        let clock = if src_isp != dst_isp {
            self.isp_clock.get(src_isp.index()).copied().unwrap_or(0)
        } else {
            0
        };
        let flow = Flow {
            uploader,
            downloader,
            src_isp,
            dst_isp,
            piece,
            remaining,
            base_rate: 0.0,
            clock,
            v_start: 0.0,
            target: f64::INFINITY,
            scheduled: false,
        };
        let id = match self.free.pop() {
            Some(i) => {
                self.flows[i as usize] = Some(flow);
                FlowId(i)
            }
            None => {
                self.flows.push(Some(flow));
                FlowId(self.flows.len() as u32 - 1)
            }
        };
        self.by_uploader[uploader.index()].push(id);
        self.dirty_uploaders.push(uploader);
        self.active += 1;
        id
    }

    /// Bytes transferred since the flow was last settled.
    pub fn progress(&self, id: FlowId, now: Seconds) -> Bytes {
        let Some(f) = self.get(id) else { return 0.0 };
        if !f.scheduled {
            return 0.0;
        }
        let v = self.clocks[f.clock].v_at(now);
        ((v - f.v_start) * f.base_rate).clamp(0.0, f.remaining)
    }

    fn settle_one(&mut self, id: FlowId, now: Seconds, sink: &mut impl FnMut(&Flow, Bytes)) {
        let f = self.flows[id.0 as usize].as_mut().expect("live flow");
        if !f.scheduled {
            return;
        }
        let clock = &mut self.clocks[f.clock];
        clock.advance(now);
        let done = (clock.v - f.v_start) * f.base_rate;
        assert!(
            done <= f.remaining * (1.0 + OVERSHOOT_TOLERANCE) + 1e-6,
            "flow {id:?} overshot: done {done} > remaining {}",
            f.remaining
        );
        let done = done.clamp(0.0, f.remaining);
        f.remaining -= done;
        f.v_start = clock.v;
        if done > 0.0 {
            sink(f, done);
        }
    }

    /// Integrates every flow up to `now`, crediting progressed bytes.
    pub fn advance_to(&mut self, now: Seconds, sink: &mut impl FnMut(&Flow, Bytes)) {
        for i in 0..self.flows.len() {
            if self.flows[i].is_some() {
                self.settle_one(FlowId(i as u32), now, sink);
            }
        }
    }

    fn unschedule(&mut self, id: FlowId) {
        let f = self.flows[id.0 as usize].as_mut().expect("live flow");
        if f.scheduled {
            let clock = &mut self.clocks[f.clock];
            clock.targets.remove(&(OrderedFloat(f.target), id));
            if clock.cap.is_some() {
                clock.demand -= f.base_rate;
                if clock.targets.is_empty() {
                    clock.demand = 0.0;
                }
                self.dirty_clocks.push(f.clock);
            }
            f.scheduled = false;
        }
    }

    fn detach(&mut self, id: FlowId) -> Flow {
        self.unschedule(id);
        let f = self.flows[id.0 as usize].take().expect("live flow");
        self.free.push(id.0);
        self.active -= 1;
        let list = &mut self.by_uploader[f.uploader.index()];
        if let Some(pos) = list.iter().position(|&x| x == id) {
            list.swap_remove(pos);
        }
        self.dirty_uploaders.push(f.uploader);
        f
    }

    /// Stops a flow early; the returned flow carries the bytes still missing.
    pub fn cancel(&mut self, id: FlowId, now: Seconds, sink: &mut impl FnMut(&Flow, Bytes)) -> Flow {
        self.settle_one(id, now, sink);
        self.detach(id)
    }

    /// Completes a due flow, crediting exactly its outstanding bytes.
    pub fn complete(&mut self, id: FlowId, now: Seconds, sink: &mut impl FnMut(&Flow, Bytes)) -> Flow {
        {
            let f = self.flows[id.0 as usize].as_mut().expect("live flow");
            if f.scheduled {
                self.clocks[f.clock].advance(now);
            }
            if f.remaining > 0.0 {
                sink(f, f.remaining);
            }
            f.remaining = 0.0;
        }
        self.detach(id)
    }

    /// Earliest completion across all clocks.
    pub fn next_completion(&self) -> Option<(Seconds, FlowId)> {
        self.clocks
            .iter()
            .filter_map(Clock::due)
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
    }

    /// Re-derives rates touched since the last call.
    pub fn finalize(&mut self, now: Seconds, sink: &mut impl FnMut(&Flow, Bytes)) {
        let mut uploaders = std::mem::take(&mut self.dirty_uploaders);
        uploaders.sort_unstable();
        uploaders.dedup();
        for up in uploaders {
            let ids = self.by_uploader[up.index()].clone();
            if ids.is_empty() {
                continue;
            }
            let base = self.capacity[up.index()] / ids.len() as f64;
            for id in ids {
                let f = self.flows[id.0 as usize].as_ref().expect("live flow");
                if f.scheduled && f.base_rate == base {
                    continue;
                }
                self.settle_one(id, now, sink);
                self.unschedule(id);
                let f = self.flows[id.0 as usize].as_mut().expect("live flow");
                let clock = &mut self.clocks[f.clock];
                clock.advance(now);
                f.base_rate = base;
                f.v_start = clock.v;
                f.target = clock.v + f.remaining / base;
                f.scheduled = true;
                clock.targets.insert((OrderedFloat(f.target), id));
                if clock.cap.is_some() {
                    clock.demand += base;
                    self.dirty_clocks.push(f.clock);
                }
            }
        }
        let mut clocks = std::mem::take(&mut self.dirty_clocks);
        clocks.sort_unstable();
        clocks.dedup();
        for c in clocks {
            let clock = &mut self.clocks[c];
            clock.advance(now);
            clock.scale = clock.target_scale();
        }
    }

    /// Two-stage allocation computed from scratch.
    ///
    /// Stage one splits each uploader's capacity equally among its flows;
    /// stage two scales each capped ISP's outbound flows proportionally down
    /// to the cap.
    pub fn recompute_rates(&self) -> Vec<RateAssignment> {
        let mut demand = vec![0.0; self.link_caps.len()];
        let mut base = Vec::with_capacity(self.active);
        for id in self.ids() {
            let f = self.get(id).expect("live flow");
            let n = self.by_uploader[f.uploader.index()].len() as f64;
            let b = self.capacity[f.uploader.index()] / n;
            if f.is_inter_isp() && self.link_cap(f.src_isp).is_some() {
                demand[f.src_isp.index()] += b;
            }
            base.push((id, b));
        }
        base.into_iter()
            .map(|(id, b)| {
                let f = self.get(id).expect("live flow");
                let scale = match self.link_cap(f.src_isp) {
                    Some(cap) if f.is_inter_isp() && demand[f.src_isp.index()] > cap => {
                        cap / demand[f.src_isp.index()]
                    }
                    _ => 1.0,
                };
                RateAssignment { flow: id, rate: b * scale }
            })
            .collect()
    }

    /// Sum of current rates per uploader and per capped ISP, for bound checks.
    pub fn usage(&self) -> (Vec<BytesPerSec>, Vec<BytesPerSec>) {
        let mut up = vec![0.0; self.capacity.len()];
        let mut out = vec![0.0; self.link_caps.len()];
        for id in self.ids() {
            let f = self.get(id).expect("live flow");
            let r = self.rate(id);
            up[f.uploader.index()] += r;
            if f.is_inter_isp() {
                out[f.src_isp.index()] += r;
            }
        }
        (up, out)
    }
}
