//! Branch filter and run-time loop detector.
//!
//! [`filter`] keeps only control-flow transfers from the per-cycle trace.
//! [`detect_loops`] then segments that stream into loop executions using the
//! link-register heuristic: the target of a *non-linking* backward branch is a
//! loop entry node, and the loop is left once control reaches an address
//! outside `[entry, backedge]` at the call depth the loop was found at.
//!
//! A loop is only recognised when its first backedge retires, so the
//! branches of its first iteration have already streamed past by then. The
//! detector resolves this by attributing that leading stretch (the contiguous
//! run of in-range branches right before the backedge) to the loop
//! retroactively. This keeps a loop's measurement independent of how many times
//! it iterates.

use serde::{Deserialize, Serialize};

use crate::addr::Addr;
use crate::emulator::TraceEvent;
use crate::isa::Instruction;

pub const DEFAULT_MAX_DEPTH: u8 = 3;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub enum BranchKind {
    CondTaken,
    CondNotTaken,
    DirectJump,
    IndirectJump,
    Call,
    IndirectCall,
    Return,
}

impl BranchKind {
    pub fn is_linking(self) -> bool {
        matches!(self, BranchKind::Call | BranchKind::IndirectCall)
    }

    /// Target comes from a register rather than the instruction.
    pub fn is_indirect(self) -> bool {
        matches!(
            self,
            BranchKind::IndirectJump | BranchKind::IndirectCall | BranchKind::Return
        )
    }
}

/// One executed control-flow transfer `(src, dest)`.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct BranchEvent {
    pub cycle: u64,
    pub src: Addr,
    pub dest: Addr,
    pub kind: BranchKind,
    pub linking: bool,
    /// 0 outside any tracked loop, else the depth of the innermost one.
    pub loop_depth: u8,
}

impl BranchEvent {
    pub fn pair(&self) -> (Addr, Addr) {
        (self.src, self.dest)
    }
}

/// Map one trace event to a branch event, or `None` for everything that is not
/// a branch, jump or return.
pub fn classify(ev: &TraceEvent) -> Option<BranchEvent> {
    if ev.fault.is_some() {
        return None;
    }
    let ins = ev.instr.as_ref()?;
    let (kind, dest) = match ins {
        Instruction::Branch { .. } => {
            if ev.taken? {
                (BranchKind::CondTaken, ev.next_pc)
            } else {
                (BranchKind::CondNotTaken, ev.pc.next())
            }
        }
        Instruction::Jump { .. } => (BranchKind::DirectJump, ev.next_pc),
        Instruction::Jal { .. } => (BranchKind::Call, ev.next_pc),
        Instruction::Jr { .. } => (BranchKind::IndirectJump, ev.next_pc),
        Instruction::Jalr { .. } => (BranchKind::IndirectCall, ev.next_pc),
        Instruction::Ret => (BranchKind::Return, ev.next_pc),
        _ => return None,
    };
    Some(BranchEvent {
        cycle: ev.cycle,
        src: ev.pc,
        dest,
        kind,
        linking: kind.is_linking(),
        loop_depth: 0,
    })
}

pub fn filter<'a, I>(events: I) -> Vec<BranchEvent>
where
    I: IntoIterator<Item = &'a TraceEvent>,
{
    events.into_iter().filter_map(classify).collect()
}

/// Streaming form of [`filter`], suitable as an emulator observer.
#[derive(Default, Debug)]
pub struct BranchFilter {
    events: Vec<BranchEvent>,
}

impl BranchFilter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe(&mut self, ev: &TraceEvent) {
        if let Some(b) = classify(ev) {
            self.events.push(b);
        }
    }

    pub fn events(&self) -> &[BranchEvent] {
        &self.events
    }

    pub fn into_events(self) -> Vec<BranchEvent> {
        self.events
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub enum LoopKind {
    /// Headed by the target of a non-linking backward branch.
    Backedge,
    /// Direct recursion: a call to a function that is already active.
    Recursion,
}

/// One tracked loop execution.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct LoopContext {
    /// Position of this execution in the loop metadata.
    pub session: usize,
    pub kind: LoopKind,
    pub entry_addr: Addr,
    /// The backward branch (or recursive call) that revealed the loop.
    pub backedge_addr: Addr,
    pub exit_addr: Addr,
    pub depth: u8,
    pub call_depth_at_entry: u32,
    pub parent: Option<usize>,
}

impl LoopContext {
    pub fn in_body(&self, a: Addr) -> bool {
        self.entry_addr <= a && a <= self.backedge_addr
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug, Serialize, Deserialize)]
pub enum LoopStatusKind {
    Enter,
    IterationBoundary,
    Exit,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct LoopStatusEvent {
    pub kind: LoopStatusKind,
    pub context: LoopContext,
    pub at_cycle: u64,
}

/// A branch event together with the loop status signals around it.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct AnnotatedEvent {
    pub event: BranchEvent,
    /// Session whose current traversal this branch belongs to. `None` means the
    /// pair is hashed directly (outside loops, or nested past `max_depth`).
    pub owner: Option<usize>,
    /// `Enter` signals, outermost first.
    pub before: Vec<LoopStatusEvent>,
    /// `IterationBoundary` / `Exit` signals, innermost first.
    pub after: Vec<LoopStatusEvent>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoopAnalysis {
    pub events: Vec<AnnotatedEvent>,
    /// Tracked loop executions, indexed by session.
    pub contexts: Vec<LoopContext>,
    /// Loop executions nested deeper than `max_depth` (measured as plain branches).
    pub degraded: usize,
}

impl LoopAnalysis {
    pub fn status_events(&self) -> impl Iterator<Item = &LoopStatusEvent> + '_ {
        self.events
            .iter()
            .flat_map(|a| a.before.iter().chain(a.after.iter()))
    }
}

const OPEN: usize = usize::MAX;

#[derive(Debug)]
struct Instance {
    kind: LoopKind,
    entry: Addr,
    backedge: Addr,
    call_depth: u32,
    start: usize,
    end: usize,
    boundaries: Vec<usize>,
    parent: Option<usize>,
    children: Vec<usize>,
}

impl Instance {
    fn in_range(&self, a: Addr) -> bool {
        self.entry <= a && a <= self.backedge
    }

    fn exits_on(&self, ev: &BranchEvent, depth: u32) -> bool {
        if depth < self.call_depth {
            return true;
        }
        if depth > self.call_depth {
            return false;
        }
        match self.kind {
            LoopKind::Backedge => {
                !self.in_range(ev.src) || (!ev.linking && !self.in_range(ev.dest))
            }
            LoopKind::Recursion => ev.kind == BranchKind::Return,
        }
    }
}

struct Detector<'a> {
    events: &'a [BranchEvent],
    depth_before: Vec<u32>,
    insts: Vec<Instance>,
    roots: Vec<usize>,
    active: Vec<usize>,
}

impl<'a> Detector<'a> {
    fn siblings_mut(&mut self, parent: Option<usize>) -> &mut Vec<usize> {
        match parent {
            Some(p) => &mut self.insts[p].children,
            None => &mut self.roots,
        }
    }

    /// Earliest event of the first traversal of a loop `[entry, backedge]`
    /// revealed by the backward branch at `i`.
    fn scan_start(&self, i: usize, entry: Addr, backedge: Addr, depth: u32) -> usize {
        let in_range = |a: Addr| entry <= a && a <= backedge;
        let mut start = i;
        for k in (0..i).rev() {
            let d = self.depth_before[k];
            if d > depth {
                continue;
            }
            let e = &self.events[k];
            if d < depth || !in_range(e.src) || (!e.linking && !in_range(e.dest)) {
                break;
            }
            start = k;
        }
        start
    }

    fn open(
        &mut self,
        kind: LoopKind,
        entry: Addr,
        backedge: Addr,
        call_depth: u32,
        i: usize,
        mut start: usize,
    ) {
        let parent = self.active.last().copied();
        // Stay inside the parent's current traversal.
        if let Some(p) = parent {
            let floor = self.insts[p]
                .boundaries
                .last()
                .map_or(self.insts[p].start, |b| b + 1);
            start = start.max(floor);
        }
        // Never cut through an already closed sibling.
        let siblings = match parent {
            Some(p) => &self.insts[p].children,
            None => &self.roots,
        };
        let k = siblings.partition_point(|&s| self.insts[s].start < start);
        if k > 0 {
            let s = siblings[k - 1];
            if self.insts[s].end >= start {
                start = self.insts[s].end + 1;
            }
        }

        let id = self.insts.len();
        let split = siblings.partition_point(|&s| self.insts[s].start < start);
        let adopted: Vec<usize> = self.siblings_mut(parent).split_off(split);
        for &c in &adopted {
            self.insts[c].parent = Some(id);
        }
        let boundaries = if start <= i { vec![i] } else { Vec::new() };
        self.insts.push(Instance {
            kind,
            entry,
            backedge,
            call_depth,
            start,
            end: OPEN,
            boundaries,
            parent,
            children: adopted,
        });
        self.siblings_mut(parent).push(id);
        self.active.push(id);
    }

    fn run(&mut self) {
        let mut call_depth = 0u32;
        // (callee entry, index of the call event, depth before the call)
        let mut call_stack: Vec<(Addr, usize, u32)> = Vec::new();

        for (i, ev) in self.events.iter().enumerate() {
            let depth = call_depth;
            self.depth_before.push(depth);

            if let Some(p) = self
                .active
                .iter()
                .position(|&id| self.insts[id].exits_on(ev, depth))
            {
                for id in self.active.drain(p..) {
                    self.insts[id].end = i;
                }
            }

            match ev.kind {
                BranchKind::CondTaken | BranchKind::DirectJump | BranchKind::IndirectJump
                    if ev.dest < ev.src =>
                {
                    let repeat = self.active.last().copied().filter(|&t| {
                        let x = &self.insts[t];
                        x.kind == LoopKind::Backedge && x.entry == ev.dest && x.call_depth == depth
                    });
                    match repeat {
                        Some(t) => self.insts[t].boundaries.push(i),
                        None => {
                            let start = self.scan_start(i, ev.dest, ev.src, depth);
                            self.open(LoopKind::Backedge, ev.dest, ev.src, depth, i, start);
                        }
                    }
                }
                BranchKind::Call | BranchKind::IndirectCall => {
                    if let Some(&(_, outer_call, outer_depth)) =
                        call_stack.iter().find(|(t, _, _)| *t == ev.dest)
                    {
                        self.on_recursive_call(ev, i, outer_call, outer_depth);
                    }
                }
                _ => {}
            }

            match ev.kind {
                BranchKind::Call | BranchKind::IndirectCall => {
                    call_stack.push((ev.dest, i, depth));
                    call_depth += 1;
                }
                BranchKind::Return => {
                    call_stack.pop();
                    call_depth = call_depth.saturating_sub(1);
                }
                _ => {}
            }
        }

        if let Some(last) = self.events.len().checked_sub(1) {
            for id in self.active.drain(..) {
                self.insts[id].end = last;
            }
        }
    }

    fn on_recursive_call(&mut self, ev: &BranchEvent, i: usize, outer_call: usize, outer_depth: u32) {
        let is_rec = |x: &Instance| x.kind == LoopKind::Recursion && x.entry == ev.dest;
        if let Some(&top) = self.active.last() {
            if is_rec(&self.insts[top]) {
                self.insts[top].boundaries.push(i);
                return;
            }
        }
        let blocked = self.active.iter().any(|&a| {
            let x = &self.insts[a];
            is_rec(x) || x.start > outer_call
        });
        if !blocked {
            self.open(
                LoopKind::Recursion,
                ev.dest,
                ev.src,
                outer_depth + 1,
                i,
                outer_call + 1,
            );
        }
    }
}

/// Segment a branch stream into loop executions.
///
/// Loop executions nested deeper than `max_depth` are not tracked: their
/// branches are left unowned so they get hashed like non-loop branches.
pub fn detect_loops(events: &[BranchEvent], max_depth: u8) -> LoopAnalysis {
    let mut det = Detector {
        events,
        depth_before: Vec::with_capacity(events.len()),
        insts: Vec::new(),
        roots: Vec::new(),
        active: Vec::new(),
    };
    det.run();
    let insts = det.insts;

    // Nesting depth from the final parent links.
    let mut depth = vec![0u8; insts.len()];
    let mut stack: Vec<(usize, u8)> = det.roots.iter().map(|&r| (r, 1)).collect();
    while let Some((id, d)) = stack.pop() {
        depth[id] = d;
        for &c in &insts[id].children {
            stack.push((c, d.saturating_add(1)));
        }
    }

    let mut order: Vec<usize> = (0..insts.len())
        .filter(|&id| insts[id].start <= insts[id].end)
        .collect();
    order.sort_by_key(|&id| (insts[id].start, depth[id]));

    let mut session_of = vec![None; insts.len()];
    let mut contexts = Vec::new();
    let mut degraded = 0;
    for &id in &order {
        if depth[id] > max_depth {
            degraded += 1;
            continue;
        }
        let x = &insts[id];
        let session = contexts.len();
        session_of[id] = Some(session);
        contexts.push(LoopContext {
            session,
            kind: x.kind,
            entry_addr: x.entry,
            backedge_addr: x.backedge,
            exit_addr: x.backedge.next(),
            depth: depth[id],
            call_depth_at_entry: x.call_depth,
            parent: x.parent.and_then(|p| session_of[p]),
        });
    }

    let mut annotated: Vec<AnnotatedEvent> = events
        .iter()
        .map(|e| AnnotatedEvent {
            event: *e,
            owner: None,
            before: Vec::new(),
            after: Vec::new(),
        })
        .collect();

    // Ownership: innermost execution whose span covers the event.
    let mut open: Vec<usize> = Vec::new();
    let mut next = 0;
    for (i, a) in annotated.iter_mut().enumerate() {
        while next < order.len() && insts[order[next]].start == i {
            open.push(order[next]);
            next += 1;
        }
        if let Some(&top) = open.last() {
            a.owner = session_of[top];
            a.event.loop_depth = a.owner.map_or(0, |s| contexts[s].depth);
        }
        while open.last().is_some_and(|&t| insts[t].end == i) {
            open.pop();
        }
        debug_assert!(open.iter().all(|&t| insts[t].end > i), "loop spans must nest");
    }

    let mut after: Vec<Vec<(u8, LoopStatusKind, usize)>> = vec![Vec::new(); events.len()];
    for &id in &order {
        let Some(s) = session_of[id] else { continue };
        let x = &insts[id];
        let ctx = contexts[s];
        annotated[x.start].before.push(LoopStatusEvent {
            kind: LoopStatusKind::Enter,
            context: ctx,
            at_cycle: events[x.start].cycle,
        });
        for &b in &x.boundaries {
            after[b].push((ctx.depth, LoopStatusKind::IterationBoundary, s));
        }
        after[x.end].push((ctx.depth, LoopStatusKind::Exit, s));
    }
    for (i, mut list) in after.into_iter().enumerate() {
        list.sort_by_key(|e| std::cmp::Reverse(e.0));
        annotated[i].after = list
            .into_iter()
            .map(|(_, kind, s)| LoopStatusEvent {
                kind,
                context: contexts[s],
                at_cycle: events[i].cycle,
            })
            .collect();
    }

    LoopAnalysis {
        events: annotated,
        contexts,
        degraded,
    }
}
