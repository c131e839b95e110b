//! Exact s-t max-flow on integer capacities using two search trees that
//! survive across augmentations (the Boykov-Kolmogorov scheme).
//!
//! After [`Graph::maxflow`] the source tree is exactly the set of nodes
//! reachable from the source in the residual graph, so
//! [`Graph::in_source_segment`] describes a minimum cut.

use std::collections::VecDeque;

pub type Capacity = i128;

const NO_PARENT: u32 = u32::MAX;
const TERMINAL: u32 = u32::MAX - 1;
const ORPHAN: u32 = u32::MAX - 2;
const NO_ARC: u32 = u32::MAX;

#[derive(Debug, Clone)]
struct Node {
    first: u32,
    /// Arc from this node toward its tree parent, or a sentinel.
    parent: u32,
    is_sink: bool,
    in_queue: bool,
    ts: u64,
    dist: u32,
    /// Residual terminal capacity: > 0 from the source, < 0 to the sink.
    tr_cap: Capacity,
}

#[derive(Debug, Clone)]
struct Arc {
    head: u32,
    next: u32,
    r_cap: Capacity,
}

#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    arcs: Vec<Arc>,
    flow: Capacity,
    active: VecDeque<u32>,
    orphans: VecDeque<u32>,
    time: u64,
}

impl Graph {
    pub fn new(node_count: usize) -> Self {
        Graph {
            nodes: vec![
                Node {
                    first: NO_ARC,
                    parent: NO_PARENT,
                    is_sink: false,
                    in_queue: false,
                    ts: 0,
                    dist: 0,
                    tr_cap: 0,
                };
                node_count
            ],
            arcs: Vec::new(),
            flow: 0,
            active: VecDeque::new(),
            orphans: VecDeque::new(),
            time: 0,
        }
    }

    pub fn with_edge_capacity(node_count: usize, edges: usize) -> Self {
        let mut g = Graph::new(node_count);
        g.arcs.reserve(2 * edges);
        g
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Adds terminal capacities; may be called repeatedly for one node.
    pub fn add_terminal_weights(&mut self, i: usize, mut to_source: Capacity, mut to_sink: Capacity) {
        debug_assert!(to_source >= 0 && to_sink >= 0);
        let delta = self.nodes[i].tr_cap;
        if delta > 0 {
            to_source += delta;
        } else {
            to_sink -= delta;
        }
        self.flow += to_source.min(to_sink);
        self.nodes[i].tr_cap = to_source - to_sink;
    }

    /// Adds an arc `i -> j` with `cap` and its reverse with `rev_cap`.
    pub fn add_edge(&mut self, i: usize, j: usize, cap: Capacity, rev_cap: Capacity) {
        debug_assert!(i != j && cap >= 0 && rev_cap >= 0);
        let a = self.arcs.len() as u32;
        self.arcs.push(Arc { head: j as u32, next: self.nodes[i].first, r_cap: cap });
        self.arcs.push(Arc { head: i as u32, next: self.nodes[j].first, r_cap: rev_cap });
        self.nodes[i].first = a;
        self.nodes[j].first = a + 1;
    }

    pub fn flow(&self) -> Capacity {
        self.flow
    }

    /// True if node `i` ends on the source side of the minimum cut.
    pub fn in_source_segment(&self, i: usize) -> bool {
        let n = &self.nodes[i];
        n.parent != NO_PARENT && !n.is_sink
    }

    fn tail(&self, a: u32) -> u32 {
        self.arcs[(a ^ 1) as usize].head
    }

    fn set_active(&mut self, i: u32) {
        let n = &mut self.nodes[i as usize];
        if !n.in_queue {
            n.in_queue = true;
            self.active.push_back(i);
        }
    }

    fn next_active(&mut self) -> Option<u32> {
        while let Some(i) = self.active.pop_front() {
            let n = &mut self.nodes[i as usize];
            n.in_queue = false;
            if n.parent != NO_PARENT {
                return Some(i);
            }
        }
        None
    }

    fn arcs_of(&self, i: u32) -> ArcIter<'_> {
        ArcIter { arcs: &self.arcs, next: self.nodes[i as usize].first }
    }

    pub fn maxflow(&mut self) -> Capacity {
        for i in 0..self.nodes.len() {
            let n = &mut self.nodes[i];
            n.ts = 0;
            if n.tr_cap != 0 {
                n.is_sink = n.tr_cap < 0;
                n.parent = TERMINAL;
                n.dist = 1;
                self.set_active(i as u32);
            } else {
                n.parent = NO_PARENT;
            }
        }

        let mut current: Option<u32> = None;
        loop {
            let i = match current.take() {
                Some(c) if self.nodes[c as usize].parent != NO_PARENT => c,
                _ => match self.next_active() {
                    Some(i) => i,
                    None => break,
                },
            };

            let middle = self.grow(i);
            self.time += 1;
            if let Some(a) = middle {
                current = Some(i);
                self.augment(a);
                while let Some(o) = self.orphans.pop_front() {
                    if self.nodes[o as usize].is_sink {
                        self.adopt_sink_orphan(o);
                    } else {
                        self.adopt_source_orphan(o);
                    }
                }
            }
        }
        self.flow
    }

    /// Expands the tree of `i`; returns an arc from the source tree into the
    /// sink tree when the trees touch.
    fn grow(&mut self, i: u32) -> Option<u32> {
        let iu = i as usize;
        let sink_side = self.nodes[iu].is_sink;
        let mut a = self.nodes[iu].first;
        while a != NO_ARC {
            let arc = &self.arcs[a as usize];
            let next = arc.next;
            let j = arc.head;
            let residual = if sink_side {
                self.arcs[(a ^ 1) as usize].r_cap
            } else {
                arc.r_cap
            };
            if residual > 0 {
                let (i_ts, i_dist) = (self.nodes[iu].ts, self.nodes[iu].dist);
                let nj = &mut self.nodes[j as usize];
                if nj.parent == NO_PARENT {
                    nj.is_sink = sink_side;
                    nj.parent = a ^ 1;
                    nj.ts = i_ts;
                    nj.dist = i_dist + 1;
                    self.set_active(j);
                } else if nj.is_sink != sink_side {
                    return Some(if sink_side { a ^ 1 } else { a });
                } else if nj.ts <= i_ts && nj.dist > i_dist {
                    nj.parent = a ^ 1;
                    nj.ts = i_ts;
                    nj.dist = i_dist + 1;
                }
            }
            a = next;
        }
        None
    }

    fn orphan_front(&mut self, i: u32) {
        self.nodes[i as usize].parent = ORPHAN;
        self.orphans.push_front(i);
    }

    fn orphan_rear(&mut self, i: u32) {
        self.nodes[i as usize].parent = ORPHAN;
        self.orphans.push_back(i);
    }

    fn augment(&mut self, middle: u32) {
        let mut bottleneck = self.arcs[middle as usize].r_cap;

        let mut i = self.tail(middle);
        loop {
            let p = self.nodes[i as usize].parent;
            if p == TERMINAL {
                break;
            }
            bottleneck = bottleneck.min(self.arcs[(p ^ 1) as usize].r_cap);
            i = self.arcs[p as usize].head;
        }
        bottleneck = bottleneck.min(self.nodes[i as usize].tr_cap);

        let mut i = self.arcs[middle as usize].head;
        loop {
            let p = self.nodes[i as usize].parent;
            if p == TERMINAL {
                break;
            }
            bottleneck = bottleneck.min(self.arcs[p as usize].r_cap);
            i = self.arcs[p as usize].head;
        }
        bottleneck = bottleneck.min(-self.nodes[i as usize].tr_cap);

        self.arcs[(middle ^ 1) as usize].r_cap += bottleneck;
        self.arcs[middle as usize].r_cap -= bottleneck;

        let mut i = self.tail(middle);
        loop {
            let p = self.nodes[i as usize].parent;
            if p == TERMINAL {
                break;
            }
            self.arcs[p as usize].r_cap += bottleneck;
            self.arcs[(p ^ 1) as usize].r_cap -= bottleneck;
            let parent = self.arcs[p as usize].head;
            if self.arcs[(p ^ 1) as usize].r_cap == 0 {
                self.orphan_front(i);
            }
            i = parent;
        }
        self.nodes[i as usize].tr_cap -= bottleneck;
        if self.nodes[i as usize].tr_cap == 0 {
            self.orphan_front(i);
        }

        let mut i = self.arcs[middle as usize].head;
        loop {
            let p = self.nodes[i as usize].parent;
            if p == TERMINAL {
                break;
            }
            self.arcs[(p ^ 1) as usize].r_cap += bottleneck;
            self.arcs[p as usize].r_cap -= bottleneck;
            let parent = self.arcs[p as usize].head;
            if self.arcs[p as usize].r_cap == 0 {
                self.orphan_front(i);
            }
            i = parent;
        }
        self.nodes[i as usize].tr_cap += bottleneck;
        if self.nodes[i as usize].tr_cap == 0 {
            self.orphan_front(i);
        }

        self.flow += bottleneck;
    }

    /// Distance from `j` to its terminal, or `None` if its path hits an orphan.
    /// Caches verified distances with the current timestamp.
    fn origin_distance(&mut self, start: u32) -> Option<u32> {
        let mut j = start;
        let mut d: u32 = 0;
        loop {
            let n = &mut self.nodes[j as usize];
            if n.ts == self.time {
                d += n.dist;
                break;
            }
            let a = n.parent;
            d += 1;
            if a == TERMINAL {
                n.ts = self.time;
                n.dist = 1;
                break;
            }
            if a == ORPHAN {
                return None;
            }
            j = self.arcs[a as usize].head;
        }
        let mut j = start;
        let mut dd = d;
        while self.nodes[j as usize].ts != self.time {
            let n = &mut self.nodes[j as usize];
            n.ts = self.time;
            n.dist = dd;
            dd -= 1;
            j = self.arcs[n.parent as usize].head;
        }
        Some(d)
    }

    fn adopt_source_orphan(&mut self, i: u32) {
        self.adopt(i, false);
    }

    fn adopt_sink_orphan(&mut self, i: u32) {
        self.adopt(i, true);
    }

    fn adopt(&mut self, i: u32, sink_side: bool) {
        let mut best: Option<(u32, u32)> = None;
        let arcs: Vec<u32> = self.arcs_of(i).collect();
        for &a0 in &arcs {
            let residual = if sink_side {
                self.arcs[a0 as usize].r_cap
            } else {
                self.arcs[(a0 ^ 1) as usize].r_cap
            };
            if residual == 0 {
                continue;
            }
            let j = self.arcs[a0 as usize].head;
            let (j_sink, pa) = (self.nodes[j as usize].is_sink, self.nodes[j as usize].parent);
            if j_sink != sink_side || pa == NO_PARENT {
                continue;
            }
            if let Some(d) = self.origin_distance(j) {
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((a0, d));
                }
            }
        }

        if let Some((a, d)) = best {
            let n = &mut self.nodes[i as usize];
            n.parent = a;
            n.ts = self.time;
            n.dist = d + 1;
            return;
        }

        for &a0 in &arcs {
            let j = self.arcs[a0 as usize].head;
            let (j_sink, pa) = (self.nodes[j as usize].is_sink, self.nodes[j as usize].parent);
            if j_sink != sink_side || pa == NO_PARENT {
                continue;
            }
            let residual = if sink_side {
                self.arcs[a0 as usize].r_cap
            } else {
                self.arcs[(a0 ^ 1) as usize].r_cap
            };
            if residual > 0 {
                self.set_active(j);
            }
            if pa != TERMINAL && pa != ORPHAN && self.arcs[pa as usize].head == i {
                self.orphan_rear(j);
            }
        }
        self.nodes[i as usize].parent = NO_PARENT;
    }
}

struct ArcIter<'a> {
    arcs: &'a [Arc],
    next: u32,
}

impl Iterator for ArcIter<'_> {
    type Item = u32;
    fn next(&mut self) -> Option<u32> {
        if self.next == NO_ARC {
            return None;
        }
        let a = self.next;
        self.next = self.arcs[a as usize].next;
        Some(a)
    }
}
