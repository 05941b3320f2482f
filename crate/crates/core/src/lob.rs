//! Digital price maps `Y = A N` and a fixed-level limit order book driven by a point path.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::model::{BaselineSpec, Coef, ComponentRate, QueueDriver};
use crate::simulate::PointPath;
use crate::{Error, Result};

/// Sign branch of the simultaneous-jump map: the last two columns of the second row are
/// `(+1, -1)` for `Plus` and `(-1, +1)` for `Minus`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JumpSign {
    #[default]
    Plus,
    Minus,
}

/// `Y = a · W · N` with an integer weight matrix `W` (`m × d`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriceMap {
    pub a_unit: f64,
    pub matrix: Vec<Vec<i64>>,
}

impl PriceMap {
    pub fn new(a_unit: f64, matrix: Vec<Vec<i64>>) -> Result<Self> {
        if !(a_unit > 0.0 && a_unit.is_finite()) {
            return Err(Error::ModelDefinition(format!("monetary unit {a_unit} must be positive")));
        }
        let d = matrix.first().map_or(0, |r| r.len());
        if d == 0 || matrix.iter().any(|r| r.len() != d) {
            return Err(Error::ModelDefinition("price matrix must be a nonempty rectangle".into()));
        }
        Ok(Self { a_unit, matrix })
    }

    /// `m` prices, each moved up or down by one unit: `Y^i = a (N^{2i} - N^{2i+1})`.
    pub fn one_unit(a_unit: f64, m: usize) -> Result<Self> {
        Self::blocks(a_unit, m, &[1, -1])
    }

    /// `Y^i = a (N^{4i} + 2 N^{4i+1} - N^{4i+2} - 2 N^{4i+3})`.
    pub fn one_two_unit(a_unit: f64, m: usize) -> Result<Self> {
        Self::blocks(a_unit, m, &[1, 2, -1, -2])
    }

    /// Two prices with individual one-unit moves on components 0..4 and a joint move on
    /// components 4, 5.
    pub fn simultaneous(a_unit: f64, sign: JumpSign) -> Result<Self> {
        let s = match sign {
            JumpSign::Plus => 1,
            JumpSign::Minus => -1,
        };
        Self::new(a_unit, vec![vec![1, -1, 0, 0, 1, -1], vec![0, 0, 1, -1, s, -s]])
    }

    fn blocks(a_unit: f64, m: usize, w: &[i64]) -> Result<Self> {
        let k = w.len();
        let matrix = (0..m)
            .map(|i| {
                let mut row = vec![0; m * k];
                row[i * k..(i + 1) * k].copy_from_slice(w);
                row
            })
            .collect();
        Self::new(a_unit, matrix)
    }

    pub fn rows(&self) -> usize {
        self.matrix.len()
    }

    pub fn cols(&self) -> usize {
        self.matrix[0].len()
    }

    /// `Y` in integer units of `a`.
    pub fn apply_units(&self, counts: &[i64]) -> Vec<i64> {
        self.matrix.iter().map(|r| r.iter().zip(counts).map(|(w, n)| w * n).sum()).collect()
    }

    pub fn apply(&self, counts: &[i64]) -> Vec<f64> {
        self.apply_units(counts).into_iter().map(|u| u as f64 * self.a_unit).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PricePoint {
    pub time: f64,
    pub units: Vec<i64>,
    pub value: Vec<f64>,
}

/// `Y_t = A N_t` at `T0` and after every observed event; `Y` is constant in between.
pub fn price_path(pm: &PriceMap, path: &PointPath) -> Result<Vec<PricePoint>> {
    if pm.cols() != path.d() {
        return Err(Error::ModelDefinition(format!(
            "price map has {} columns but the path has {} components",
            pm.cols(),
            path.d()
        )));
    }
    let mut counts = vec![0i64; path.d()];
    let mut out = Vec::with_capacity(path.total_events() + 1);
    let point = |t: f64, c: &[i64]| PricePoint { time: t, units: pm.apply_units(c), value: pm.apply(c) };
    out.push(point(path.horizon.t0, &counts));
    for (t, a) in path.merged_events() {
        counts[a] += 1;
        out.push(point(t, &counts));
    }
    Ok(out)
}

/// `Y_t` from a price path (right-continuous).
pub fn price_at(points: &[PricePoint], t: f64) -> Option<&PricePoint> {
    let k = points.partition_point(|p| p.time <= t);
    if k == 0 {
        None
    } else {
        Some(&points[k - 1])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Ask,
    Bid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderKind {
    Market,
    Limit,
    Cancel,
}

impl OrderKind {
    /// Queue change in units of `q`.
    pub fn delta(self) -> i64 {
        match self {
            OrderKind::Limit => 1,
            OrderKind::Market | OrderKind::Cancel => -1,
        }
    }
}

/// What an event of `component` does to the book. Levels count from 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventMapEntry {
    pub component: usize,
    pub side: Side,
    pub level: usize,
    pub kind: OrderKind,
}

/// Component-indexed event map; entry `α` describes component `α`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EventMap(pub Vec<EventMapEntry>);

impl EventMap {
    /// Sorts by component and checks that every component in `0..d` appears exactly once
    /// with a level inside the book.
    pub fn new(mut entries: Vec<EventMapEntry>, d: usize, book: &BookState) -> Result<Self> {
        entries.sort_by_key(|e| e.component);
        if entries.len() != d || entries.iter().enumerate().any(|(i, e)| e.component != i) {
            return Err(Error::ModelDefinition(format!("event map must list components 0..{d} exactly once")));
        }
        for e in &entries {
            let k = book.levels(e.side);
            if e.level == 0 || e.level > k {
                return Err(Error::ModelDefinition(format!(
                    "component {} refers to {:?} level {} but the book has {k}",
                    e.component, e.side, e.level
                )));
            }
        }
        Ok(Self(entries))
    }

    pub fn get(&self, component: usize) -> Option<&EventMapEntry> {
        self.0.get(component)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Share counts per fixed price level; every change is a multiple of `q`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BookState {
    pub ask_queues: Vec<u64>,
    pub bid_queues: Vec<u64>,
    pub q: u64,
}

impl BookState {
    pub fn new(ask_queues: Vec<u64>, bid_queues: Vec<u64>, q: u64) -> Result<Self> {
        if q == 0 {
            return Err(Error::ModelDefinition("order unit q must be positive".into()));
        }
        if ask_queues.iter().chain(&bid_queues).any(|v| v % q != 0) {
            return Err(Error::ModelDefinition(format!("queue sizes must be multiples of q = {q}")));
        }
        Ok(Self { ask_queues, bid_queues, q })
    }

    pub fn levels(&self, side: Side) -> usize {
        match side {
            Side::Ask => self.ask_queues.len(),
            Side::Bid => self.bid_queues.len(),
        }
    }

    /// Queue at a 1-based level.
    pub fn queue(&self, side: Side, level: usize) -> u64 {
        match side {
            Side::Ask => self.ask_queues[level - 1],
            Side::Bid => self.bid_queues[level - 1],
        }
    }

    fn queue_mut(&mut self, side: Side, level: usize) -> &mut u64 {
        match side {
            Side::Ask => &mut self.ask_queues[level - 1],
            Side::Bid => &mut self.bid_queues[level - 1],
        }
    }

    /// Applies one order. Returns `false` and leaves the book unchanged when a market or
    /// cancel order hits an empty queue.
    pub fn apply(&mut self, e: &EventMapEntry) -> bool {
        let q = self.q;
        let v = self.queue_mut(e.side, e.level);
        match e.kind {
            OrderKind::Limit => {
                *v += q;
                true
            }
            OrderKind::Market | OrderKind::Cancel => {
                if *v < q {
                    false
                } else {
                    *v -= q;
                    true
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BookSnapshot {
    pub time: f64,
    pub state: BookState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Replay {
    /// The initial state followed by the state after every event.
    pub trajectory: Vec<BookSnapshot>,
    pub violations: usize,
}

impl Replay {
    pub fn final_state(&self) -> &BookState {
        &self.trajectory.last().expect("trajectory holds the initial state").state
    }
}

/// Replays `(time, component)` events from `initial` at `start`.
pub fn book_replay_events(initial: &BookState, start: f64, events: &[(f64, usize)], map: &EventMap) -> Result<Replay> {
    let mut state = initial.clone();
    let mut trajectory = Vec::with_capacity(events.len() + 1);
    trajectory.push(BookSnapshot { time: start, state: state.clone() });
    let mut violations = 0;
    for &(t, a) in events {
        let e = map
            .get(a)
            .ok_or_else(|| Error::ModelDefinition(format!("event map has no entry for component {a}")))?;
        if e.level == 0 || e.level > state.levels(e.side) {
            return Err(Error::ModelDefinition(format!("component {a} maps outside the book")));
        }
        if !state.apply(e) {
            violations += 1;
        }
        trajectory.push(BookSnapshot { time: t, state: state.clone() });
    }
    Ok(Replay { trajectory, violations })
}

/// Replays every event of `path`, presample included, starting at `T̂0`.
pub fn book_replay(initial: &BookState, path: &PointPath, map: &EventMap) -> Result<Replay> {
    if map.len() != path.d() {
        return Err(Error::ModelDefinition(format!(
            "event map covers {} components but the path has {}",
            map.len(),
            path.d()
        )));
    }
    book_replay_events(initial, path.horizon.t_hat0, &path.all_events(), map)
}

/// Queue-reactive baseline for a book: every cancel component gets
/// `g = rate · (queue at its level, t-) / q`, every other component the constant `rate`.
///
/// Empty queues give zero cancellation intensity for every `θ` at once, so the zero set of
/// the intensity does not depend on the parameter.
pub fn lob_intensity_builder(map: &EventMap, initial: &BookState, rates: &[Coef]) -> Result<BaselineSpec> {
    if rates.len() != map.len() {
        return Err(Error::ModelDefinition(format!(
            "{} rates given for {} components",
            rates.len(),
            map.len()
        )));
    }
    let rates = map
        .0
        .iter()
        .zip(rates)
        .map(|(e, &rate)| match e.kind {
            OrderKind::Cancel => {
                let drivers = map
                    .0
                    .iter()
                    .filter(|o| o.side == e.side && o.level == e.level)
                    .map(|o| QueueDriver { component: o.component, delta: o.kind.delta() })
                    .collect();
                ComponentRate::QueueProportional {
                    rate,
                    initial: (initial.queue(e.side, e.level) / initial.q) as i64,
                    drivers,
                }
            }
            _ => ComponentRate::Constant { rate },
        })
        .collect();
    Ok(BaselineSpec::QueueReactive { rates })
}
