//! Multi-agent apple farming gridworld.
//!
//! A 6x6 grid split into four 3x3 orchards. The main agent `B` owns the
//! top-left orchard and the three background agents `g` own the other three
//! (top-right, bottom-left, bottom-right, in that order). Two background
//! agents never move; the third wanders anywhere on the grid.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GRID_SIZE: usize = 6;
pub const ORCHARD_SIZE: usize = 3;
/// Orchard owned by the main agent.
pub const MAIN_ORCHARD: usize = 0;
pub const BACKGROUND_AGENTS: usize = 3;
pub const MIN_STEPS: usize = 8;
pub const MAX_STEPS: usize = 20;

pub const ENV_DESCRIPTION_VERSION: &str = "applefarm-envdesc-v1";

/// A grid cell as `(row, col)`, both in `0..6`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell(pub u8, pub u8);

impl Cell {
    pub fn new(row: usize, col: usize) -> Self {
        debug_assert!(row < GRID_SIZE && col < GRID_SIZE);
        Cell(row as u8, col as u8)
    }

    pub fn row(self) -> usize {
        self.0 as usize
    }

    pub fn col(self) -> usize {
        self.1 as usize
    }

    pub fn in_bounds(self) -> bool {
        self.row() < GRID_SIZE && self.col() < GRID_SIZE
    }

    /// Orchard index: 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
    pub fn orchard(self) -> usize {
        (self.row() / ORCHARD_SIZE) * 2 + self.col() / ORCHARD_SIZE
    }

    pub fn manhattan(self, other: Cell) -> usize {
        self.row().abs_diff(other.row()) + self.col().abs_diff(other.col())
    }

    /// The neighbouring cell reached by a movement action, if it is on the grid.
    pub fn moved(self, action: Action) -> Option<Cell> {
        let (r, c) = (self.row() as isize, self.col() as isize);
        let (r, c) = match action {
            Action::Up => (r - 1, c),
            Action::Down => (r + 1, c),
            Action::Left => (r, c - 1),
            Action::Right => (r, c + 1),
            _ => return Some(self),
        };
        if (0..GRID_SIZE as isize).contains(&r) && (0..GRID_SIZE as isize).contains(&c) {
            Some(Cell(r as u8, c as u8))
        } else {
            None
        }
    }
}

/// All cells of one orchard, row-major.
pub fn orchard_cells(orchard: usize) -> impl Iterator<Item = Cell> {
    let r0 = (orchard / 2) * ORCHARD_SIZE;
    let c0 = (orchard % 2) * ORCHARD_SIZE;
    (r0..r0 + ORCHARD_SIZE).flat_map(move |r| (c0..c0 + ORCHARD_SIZE).map(move |c| Cell::new(r, c)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Owner {
    Main,
    Background(usize),
}

pub fn orchard_owner(orchard: usize) -> Owner {
    match orchard {
        MAIN_ORCHARD => Owner::Main,
        other => Owner::Background(other - 1),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Stay,
    Pick,
    Collect,
}

impl Action {
    pub const ALL: [Action; 7] = [
        Action::Up,
        Action::Down,
        Action::Left,
        Action::Right,
        Action::Stay,
        Action::Pick,
        Action::Collect,
    ];
    pub const MOVES: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn name(self) -> &'static str {
        match self {
            Action::Up => "Up",
            Action::Down => "Down",
            Action::Left => "Left",
            Action::Right => "Right",
            Action::Stay => "Stay",
            Action::Pick => "Pick",
            Action::Collect => "Collect",
        }
    }

    pub fn from_name(name: &str) -> Option<Action> {
        Action::ALL.into_iter().find(|a| a.name() == name)
    }

    pub fn is_move(self) -> bool {
        Action::MOVES.contains(&self)
    }
}

/// One frame of the gridworld.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridState {
    pub apples: BTreeSet<Cell>,
    pub garbage: BTreeSet<Cell>,
    pub main_agent: Cell,
    /// Background agent `i` owns orchard `i + 1`.
    pub background_agents: [Cell; BACKGROUND_AGENTS],
}

impl GridState {
    pub fn validate(&self) -> Result<()> {
        let agents = self.agents();
        if agents.iter().any(|c| !c.in_bounds()) || self.apples.iter().chain(&self.garbage).any(|c| !c.in_bounds()) {
            return Err(Error::Validation("cell outside the 6x6 grid".into()));
        }
        let distinct: BTreeSet<_> = agents.iter().collect();
        if distinct.len() != agents.len() {
            return Err(Error::Validation("two agents share a cell".into()));
        }
        if self.apples.intersection(&self.garbage).next().is_some() {
            return Err(Error::Validation("apple and garbage share a cell".into()));
        }
        Ok(())
    }

    pub fn agents(&self) -> [Cell; BACKGROUND_AGENTS + 1] {
        let [a, b, c] = self.background_agents;
        [self.main_agent, a, b, c]
    }

    fn has_agent(&self, cell: Cell) -> bool {
        self.agents().contains(&cell)
    }

    /// Whether the owner of `orchard` currently stands inside it.
    pub fn owner_present(&self, orchard: usize) -> bool {
        match orchard_owner(orchard) {
            Owner::Main => self.main_agent.orchard() == orchard,
            Owner::Background(i) => self.background_agents[i].orchard() == orchard,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    ApplePick,
    GarbageCollect,
}

/// An item removal caused by the action at index `step`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub step: usize,
    pub kind: EventKind,
    pub cell: Cell,
}

/// Apply one joint step: the main agent acts first, then the wandering
/// background agent moves. Blocked moves leave the agent in place.
pub fn transition(
    state: &GridState,
    main_action: Action,
    mover: usize,
    background_action: Action,
) -> (GridState, Option<EventKind>) {
    let mut next = state.clone();
    let mut event = None;
    match main_action {
        a if a.is_move() => {
            if let Some(target) = state.main_agent.moved(a) {
                if !state.background_agents.contains(&target) {
                    next.main_agent = target;
                }
            }
        }
        Action::Pick if next.apples.remove(&state.main_agent) => {
            event = Some(EventKind::ApplePick);
        }
        Action::Collect if next.garbage.remove(&state.main_agent) => {
            event = Some(EventKind::GarbageCollect);
        }
        _ => {}
    }
    if background_action.is_move() {
        if let Some(target) = next.background_agents[mover].moved(background_action) {
            if !next.has_agent(target) {
                next.background_agents[mover] = target;
            }
        }
    }
    (next, event)
}

/// A state-action sequence `s_0, a_0, ..., s_T` of the main agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub frames: Vec<GridState>,
    pub actions: Vec<Action>,
    /// Index of the wandering background agent.
    pub mover: usize,
    /// Effective moves of the wandering agent (blocked attempts are `Stay`).
    pub background_actions: Vec<Action>,
    pub events: Vec<Event>,
}

impl Trajectory {
    /// Build a trajectory by rolling the transition forward from `initial`.
    pub fn replay(
        id: impl Into<String>,
        initial: GridState,
        actions: Vec<Action>,
        mover: usize,
        background_actions: Vec<Action>,
    ) -> Result<Trajectory> {
        if actions.len() != background_actions.len() {
            return Err(Error::Validation(
                "main and background action sequences differ in length".into(),
            ));
        }
        if mover >= BACKGROUND_AGENTS {
            return Err(Error::Validation(format!("mover index {mover} out of range")));
        }
        initial.validate()?;
        let mut frames = Vec::with_capacity(actions.len() + 1);
        let mut events = Vec::new();
        frames.push(initial);
        for (step, (&a, &b)) in actions.iter().zip(&background_actions).enumerate() {
            let prev = &frames[step];
            let (next, event) = transition(prev, a, mover, b);
            if let Some(kind) = event {
                events.push(Event {
                    step,
                    kind,
                    cell: prev.main_agent,
                });
            }
            frames.push(next);
        }
        Ok(Trajectory {
            id: id.into(),
            frames,
            actions,
            mover,
            background_actions,
            events,
        })
    }

    /// Number of actions `T`.
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Check the frame/action bookkeeping and that replay reproduces the frames.
    pub fn validate(&self) -> Result<()> {
        if self.frames.len() != self.actions.len() + 1 {
            return Err(Error::Validation(format!(
                "trajectory {} has {} frames for {} actions",
                self.id,
                self.frames.len(),
                self.actions.len()
            )));
        }
        for frame in &self.frames {
            frame.validate()?;
        }
        let replayed = Trajectory::replay(
            self.id.clone(),
            self.frames[0].clone(),
            self.actions.clone(),
            self.mover,
            self.background_actions.clone(),
        )?;
        if replayed.frames != self.frames || replayed.events != self.events {
            return Err(Error::Validation(format!(
                "trajectory {} frames do not follow from its actions",
                self.id
            )));
        }
        let first = &self.frames[0].background_agents;
        let moved = (0..BACKGROUND_AGENTS)
            .filter(|&i| self.frames.iter().any(|f| f.background_agents[i] != first[i]))
            .count();
        if moved > 1 {
            return Err(Error::Validation(format!(
                "trajectory {}: {moved} background agents move",
                self.id
            )));
        }
        Ok(())
    }
}

/// Scripted main-agent behaviour used to populate trajectory pools.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    OwnOrchardHarvester,
    Trespasser,
    GarbageFirst,
    AggressiveProximity,
    RandomWalker,
}

impl Behavior {
    pub const ALL: [Behavior; 5] = [
        Behavior::OwnOrchardHarvester,
        Behavior::Trespasser,
        Behavior::GarbageFirst,
        Behavior::AggressiveProximity,
        Behavior::RandomWalker,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Behavior::OwnOrchardHarvester => "harvester",
            Behavior::Trespasser => "trespasser",
            Behavior::GarbageFirst => "garbage_first",
            Behavior::AggressiveProximity => "aggressive",
            Behavior::RandomWalker => "random",
        }
    }
}

/// Sampling weights over [`Behavior::ALL`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BehaviorMix {
    weights: [f64; 5],
}

impl BehaviorMix {
    pub fn new(weights: [f64; 5]) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("behavior weights must be finite and >= 0".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("behavior weights must sum to 1, got {total}")));
        }
        Ok(BehaviorMix { weights })
    }

    pub fn uniform() -> Self {
        BehaviorMix { weights: [0.2; 5] }
    }

    pub fn only(behavior: Behavior) -> Self {
        let mut weights = [0.0; 5];
        weights[Behavior::ALL.iter().position(|&b| b == behavior).unwrap()] = 1.0;
        BehaviorMix { weights }
    }

    /// Parse `name=weight,...` using [`Behavior::name`] keys; missing names get 0.
    pub fn parse(spec: &str) -> Result<Self> {
        if spec.trim() == "uniform" {
            return Ok(Self::uniform());
        }
        let mut weights = [0.0; 5];
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, value) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected name=weight, got {part:?}")))?;
            let idx = Behavior::ALL
                .iter()
                .position(|b| b.name() == name.trim())
                .ok_or_else(|| Error::Config(format!("unknown behavior {name:?}")))?;
            weights[idx] = value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad weight {value:?}")))?;
        }
        Self::new(weights)
    }

    pub fn weights(&self) -> [f64; 5] {
        self.weights
    }

    fn sample(&self, rng: &mut impl Rng) -> Behavior {
        let mut u: f64 = rng.random();
        for (b, w) in Behavior::ALL.iter().zip(self.weights) {
            if u < w {
                return *b;
            }
            u -= w;
        }
        // rounding slack lands on the last profile with positive weight
        let last = self.weights.iter().rposition(|w| *w > 0.0).unwrap_or(0);
        Behavior::ALL[last]
    }
}

/// Generate `count` trajectories; trajectory `i` draws from its own RNG stream
/// so the pool is a pure function of `(seed, count, mix)`.
pub fn generate_pool(seed: u64, count: usize, mix: &BehaviorMix) -> Result<Vec<Trajectory>> {
    if count == 0 {
        return Err(Error::Config("pool count must be at least 1".into()));
    }
    BehaviorMix::new(mix.weights)?;
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let behavior = mix.sample(&mut rng);
            generate_one(format!("af-{seed}-{i:05}"), behavior, &mut rng)
        })
        .collect()
}

fn random_free_cell(rng: &mut impl Rng, candidates: impl Iterator<Item = Cell>, taken: &BTreeSet<Cell>) -> Cell {
    let free: Vec<Cell> = candidates.filter(|c| !taken.contains(c)).collect();
    *free.choose(rng).expect("orchard has a free cell")
}

fn initial_state(rng: &mut impl Rng) -> GridState {
    let mut taken = BTreeSet::new();
    let main_agent = random_free_cell(rng, orchard_cells(MAIN_ORCHARD), &taken);
    taken.insert(main_agent);
    let mut background_agents = [Cell(0, 0); BACKGROUND_AGENTS];
    for (i, slot) in background_agents.iter_mut().enumerate() {
        *slot = random_free_cell(rng, orchard_cells(i + 1), &taken);
        taken.insert(*slot);
    }
    let mut apples = BTreeSet::new();
    for orchard in 0..4 {
        for _ in 0..rng.random_range(2..=3) {
            let cell = random_free_cell(rng, orchard_cells(orchard), &taken);
            taken.insert(cell);
            apples.insert(cell);
        }
    }
    let mut garbage = BTreeSet::new();
    for _ in 0..rng.random_range(2..=4) {
        let orchard = rng.random_range(0..4);
        let cell = random_free_cell(rng, orchard_cells(orchard), &taken);
        taken.insert(cell);
        garbage.insert(cell);
    }
    GridState {
        apples,
        garbage,
        main_agent,
        background_agents,
    }
}

fn nearest(from: Cell, cells: impl Iterator<Item = Cell>) -> Option<Cell> {
    cells.min_by_key(|&c| (from.manhattan(c), c))
}

/// First move that strictly reduces the distance to `target` without bumping
/// into a background agent; `Stay` when boxed in or already there.
fn step_toward(state: &GridState, from: Cell, target: Cell) -> Action {
    let here = from.manhattan(target);
    Action::MOVES
        .into_iter()
        .filter_map(|a| from.moved(a).map(|c| (a, c)))
        .filter(|(_, c)| c.manhattan(target) < here && !state.background_agents.contains(c))
        .map(|(a, _)| a)
        .next()
        .unwrap_or(Action::Stay)
}

fn random_move(rng: &mut impl Rng) -> Action {
    *Action::MOVES.choose(rng).unwrap()
}

fn choose_main_action(behavior: Behavior, state: &GridState, left_home: bool, rng: &mut impl Rng) -> Action {
    let me = state.main_agent;
    let noisy = rng.random_bool(0.1);
    match behavior {
        Behavior::OwnOrchardHarvester => {
            if state.apples.contains(&me) && me.orchard() == MAIN_ORCHARD {
                return Action::Pick;
            }
            let own = state.apples.iter().copied().filter(|c| c.orchard() == MAIN_ORCHARD);
            match nearest(me, own) {
                Some(target) if !noisy => step_toward(state, me, target),
                _ => {
                    let a = random_move(rng);
                    match me.moved(a) {
                        Some(c) if c.orchard() == MAIN_ORCHARD && rng.random_bool(0.5) => a,
                        _ => Action::Stay,
                    }
                }
            }
        }
        Behavior::Trespasser => {
            if state.apples.contains(&me) && (me.orchard() != MAIN_ORCHARD || rng.random_bool(0.3)) {
                return Action::Pick;
            }
            if noisy && left_home {
                return random_move(rng);
            }
            let foreign = state.apples.iter().copied().filter(|c| c.orchard() != MAIN_ORCHARD);
            let target = nearest(me, foreign).unwrap_or(Cell(1, 4));
            let a = step_toward(state, me, target);
            if a == Action::Stay && !left_home {
                // boxed in on the direct route: take any legal move out
                Action::MOVES
                    .into_iter()
                    .find(|&m| {
                        me.moved(m)
                            .is_some_and(|c| !state.background_agents.contains(&c) && c != me)
                    })
                    .unwrap_or(Action::Stay)
            } else {
                a
            }
        }
        Behavior::GarbageFirst => {
            if state.garbage.contains(&me) {
                return Action::Collect;
            }
            if noisy {
                return random_move(rng);
            }
            if let Some(target) = nearest(me, state.garbage.iter().copied()) {
                return step_toward(state, me, target);
            }
            if state.apples.contains(&me) {
                return Action::Pick;
            }
            match nearest(me, state.apples.iter().copied()) {
                Some(target) => step_toward(state, me, target),
                None => Action::Stay,
            }
        }
        Behavior::AggressiveProximity => {
            if state.apples.contains(&me) && rng.random_bool(0.7) {
                return Action::Pick;
            }
            if noisy {
                return random_move(rng);
            }
            let target = nearest(me, state.background_agents.iter().copied()).unwrap();
            if me.manhattan(target) <= 1 {
                let near_apple = nearest(
                    me,
                    state.apples.iter().copied().filter(|c| c.orchard() == target.orchard()),
                );
                match near_apple {
                    Some(apple) if rng.random_bool(0.5) => step_toward(state, me, apple),
                    _ => Action::Stay,
                }
            } else {
                step_toward(state, me, target)
            }
        }
        Behavior::RandomWalker => *Action::ALL.choose(rng).unwrap(),
    }
}

fn generate_one(id: String, behavior: Behavior, rng: &mut ChaCha8Rng) -> Result<Trajectory> {
    let initial = initial_state(rng);
    let steps = rng.random_range(MIN_STEPS..=MAX_STEPS);
    let mover = rng.random_range(0..BACKGROUND_AGENTS);
    let mut state = initial.clone();
    let mut actions = Vec::with_capacity(steps);
    let mut background_actions = Vec::with_capacity(steps);
    let mut left_home = false;
    let mut mover_moved = false;
    for _ in 0..steps {
        let main = choose_main_action(behavior, &state, left_home, rng);
        // resolve the main move first so the wanderer sees the updated grid
        let (after_main, _) = transition(&state, main, mover, Action::Stay);
        let here = after_main.background_agents[mover];
        let legal: Vec<Action> = Action::MOVES
            .into_iter()
            .filter(|&a| a_is_free(&after_main, here, a))
            .collect();
        let attempt = if !mover_moved && !legal.is_empty() {
            *legal.choose(rng).unwrap()
        } else if rng.random_bool(0.2) {
            Action::Stay
        } else {
            random_move(rng)
        };
        let (next, _) = transition(&state, main, mover, attempt);
        let effective = if next.background_agents[mover] != state.background_agents[mover] {
            mover_moved = true;
            attempt
        } else {
            Action::Stay
        };
        left_home |= next.main_agent.orchard() != MAIN_ORCHARD;
        actions.push(main);
        background_actions.push(effective);
        state = next;
    }
    Trajectory::replay(id, initial, actions, mover, background_actions)
}

fn a_is_free(state: &GridState, from: Cell, action: Action) -> bool {
    from.moved(action)
        .is_some_and(|c| c != from && !state.agents().contains(&c))
}

/// Fixed environment text given to every language-model query.
pub fn env_description() -> String {
    format!(
        "Environment: multi-agent apple farming ({ENV_DESCRIPTION_VERSION}).\n\
The world is a 6x6 grid split into four 3x3 orchards. Each of the four agents owns one orchard.\n\
The main agent owns the top-left orchard; the background agents own the top-right, bottom-left \
and bottom-right orchards. Two background agents stay still and one wanders freely.\n\
Symbols:\n\
  B  the main agent (the agent being judged)\n\
  g  a background agent\n\
  A  an apple\n\
  G  a piece of garbage\n\
  .  an empty cell\n\
  +  the boundary between orchards (drawn between rows and columns 3 and 4)\n\
When an agent stands on an item the agent symbol is shown and a legend line such as \
`B on A` names the covered item.\n\
Actions of the main agent: Up, Down, Left, Right, Stay, Pick (take the apple on its cell), \
Collect (remove the garbage on its cell).\n\
The main agent is rewarded by picking apples. Collecting garbage yields no reward.\n\
Each trajectory is shown frame by frame; every frame is headed `step k: <action>` naming \
the action that produced it.\n"
    )
}

fn symbol_at(state: &GridState, cell: Cell) -> char {
    if state.main_agent == cell {
        'B'
    } else if state.background_agents.contains(&cell) {
        'g'
    } else if state.apples.contains(&cell) {
        'A'
    } else if state.garbage.contains(&cell) {
        'G'
    } else {
        '.'
    }
}

fn item_at(state: &GridState, cell: Cell) -> Option<char> {
    if state.apples.contains(&cell) {
        Some('A')
    } else if state.garbage.contains(&cell) {
        Some('G')
    } else {
        None
    }
}

fn render_frame(out: &mut String, step: usize, action: Option<Action>, state: &GridState) {
    match action {
        None => writeln!(out, "step {step}: start").unwrap(),
        Some(a) => writeln!(out, "step {step}: {}", a.name()).unwrap(),
    }
    for r in 0..GRID_SIZE {
        if r == ORCHARD_SIZE {
            out.push_str("+++ + +++\n");
        }
        for c in 0..GRID_SIZE {
            if c == ORCHARD_SIZE {
                out.push_str(" + ");
            }
            out.push(symbol_at(state, Cell::new(r, c)));
        }
        out.push('\n');
    }
    if let Some(item) = item_at(state, state.main_agent) {
        writeln!(out, "B on {item}").unwrap();
    }
    let mut covered: Vec<Cell> = state
        .background_agents
        .iter()
        .copied()
        .filter(|&c| item_at(state, c).is_some())
        .collect();
    covered.sort();
    for cell in covered {
        let item = item_at(state, cell).unwrap();
        writeln!(out, "g on {item} at {},{}", cell.row(), cell.col()).unwrap();
    }
}

/// Deterministic ASCII rendering: one block per frame, blocks separated by a
/// blank line.
pub fn encode_ascii(t: &Trajectory) -> String {
    let mut out = String::new();
    for (k, frame) in t.frames.iter().enumerate() {
        if k > 0 {
            out.push('\n');
        }
        let action = k.checked_sub(1).map(|i| t.actions[i]);
        render_frame(&mut out, k, action, frame);
    }
    out
}

/// Positions recovered from one rendered frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedFrame {
    pub action: Option<Action>,
    pub main_agent: Cell,
    pub background_agents: BTreeSet<Cell>,
    pub apples: BTreeSet<Cell>,
    pub garbage: BTreeSet<Cell>,
}

fn parse_err(msg: impl Into<String>) -> Error {
    Error::Parse(msg.into())
}

fn parse_frame(block: &str, expected_step: usize) -> Result<ParsedFrame> {
    let mut lines = block.lines();
    let header = lines.next().ok_or_else(|| parse_err("empty frame block"))?;
    let rest = header
        .strip_prefix("step ")
        .ok_or_else(|| parse_err(format!("bad frame header {header:?}")))?;
    let (num, action) = rest
        .split_once(": ")
        .ok_or_else(|| parse_err(format!("bad frame header {header:?}")))?;
    if num.parse::<usize>().ok() != Some(expected_step) {
        return Err(parse_err(format!("expected step {expected_step}, got {header:?}")));
    }
    let action = if action == "start" {
        None
    } else {
        Some(Action::from_name(action).ok_or_else(|| parse_err(format!("unknown action {action:?}")))?)
    };
    let mut main = None;
    let mut background = BTreeSet::new();
    let mut apples = BTreeSet::new();
    let mut garbage = BTreeSet::new();
    let mut row = 0;
    let mut line_no = 0;
    let mut legend = Vec::new();
    for line in lines {
        if line_no == ORCHARD_SIZE && row == ORCHARD_SIZE {
            if line != "+++ + +++" {
                return Err(parse_err(format!("bad boundary row {line:?}")));
            }
            line_no += 1;
            continue;
        }
        if row < GRID_SIZE {
            let symbols: Vec<char> = line.chars().filter(|&ch| ch != ' ' && ch != '+').collect();
            if symbols.len() != GRID_SIZE || line.chars().count() != GRID_SIZE + 3 {
                return Err(parse_err(format!("bad grid row {line:?}")));
            }
            for (c, ch) in symbols.into_iter().enumerate() {
                let cell = Cell::new(row, c);
                match ch {
                    'B' => main = Some(cell),
                    'g' => {
                        background.insert(cell);
                    }
                    'A' => {
                        apples.insert(cell);
                    }
                    'G' => {
                        garbage.insert(cell);
                    }
                    '.' => {}
                    other => return Err(parse_err(format!("unknown symbol {other:?}"))),
                }
            }
            row += 1;
            line_no += 1;
        } else {
            legend.push(line);
        }
    }
    let main = main.ok_or_else(|| parse_err("frame without main agent"))?;
    for line in legend {
        let (who, rest) = line
            .split_once(" on ")
            .ok_or_else(|| parse_err(format!("bad legend line {line:?}")))?;
        let (item, at) = match rest.split_once(" at ") {
            Some((item, at)) => (item, Some(at)),
            None => (rest, None),
        };
        let cell = match (who, at) {
            ("B", None) => main,
            ("g", Some(at)) => {
                let (r, c) = at
                    .split_once(',')
                    .ok_or_else(|| parse_err(format!("bad legend cell {at:?}")))?;
                let cell = Cell(
                    r.parse().map_err(|_| parse_err("bad legend row"))?,
                    c.parse().map_err(|_| parse_err("bad legend col"))?,
                );
                if !background.contains(&cell) {
                    return Err(parse_err(format!("legend names empty cell {line:?}")));
                }
                cell
            }
            _ => return Err(parse_err(format!("bad legend line {line:?}"))),
        };
        match item {
            "A" => apples.insert(cell),
            "G" => garbage.insert(cell),
            _ => return Err(parse_err(format!("bad legend item {line:?}"))),
        };
    }
    Ok(ParsedFrame {
        action,
        main_agent: main,
        background_agents: background,
        apples,
        garbage,
    })
}

/// Parse every frame of an [`encode_ascii`] rendering.
pub fn parse_frames(text: &str) -> Result<Vec<ParsedFrame>> {
    text.trim_end_matches('\n')
        .split("\n\n")
        .enumerate()
        .map(|(k, block)| parse_frame(block, k))
        .collect()
}

fn move_between(from: Cell, to: Cell) -> Result<Action> {
    if from == to {
        return Ok(Action::Stay);
    }
    Action::MOVES
        .into_iter()
        .find(|&a| from.moved(a) == Some(to))
        .ok_or_else(|| parse_err(format!("background agent jumps from {from:?} to {to:?}")))
}

/// Reconstruct a full trajectory from its ASCII rendering.
///
/// Background agents are identified by the orchard they start in; the
/// wanderer is the one whose starting cell is vacated at some frame.
pub fn parse_ascii(text: &str, id: impl Into<String>) -> Result<Trajectory> {
    let parsed = parse_frames(text)?;
    let first = &parsed[0];
    if first.action.is_some() || parsed[1..].iter().any(|f| f.action.is_none()) {
        return Err(parse_err("only the first frame may be the start frame"));
    }
    if first.background_agents.len() != BACKGROUND_AGENTS {
        return Err(parse_err("expected three background agents"));
    }
    let mut start = [Cell(0, 0); BACKGROUND_AGENTS];
    for &cell in &first.background_agents {
        let orchard = cell.orchard();
        if orchard == MAIN_ORCHARD {
            return Err(parse_err("background agent starts in the main orchard"));
        }
        start[orchard - 1] = cell;
    }
    if start.iter().collect::<BTreeSet<_>>().len() != BACKGROUND_AGENTS
        || start.iter().any(|c| !first.background_agents.contains(c))
    {
        return Err(parse_err("background agents must start in distinct orchards"));
    }
    let mover = (0..BACKGROUND_AGENTS)
        .find(|&i| parsed.iter().any(|f| !f.background_agents.contains(&start[i])))
        .unwrap_or(0);
    let mut positions = vec![start[mover]];
    for f in &parsed[1..] {
        let mut others = f
            .background_agents
            .iter()
            .filter(|c| (0..BACKGROUND_AGENTS).all(|i| i == mover || **c != start[i]));
        let pos = *others
            .next()
            .ok_or_else(|| parse_err("cannot track the wandering agent"))?;
        if others.next().is_some() || f.background_agents.len() != BACKGROUND_AGENTS {
            return Err(parse_err("cannot track the wandering agent"));
        }
        positions.push(pos);
    }
    let background_actions = positions
        .windows(2)
        .map(|w| move_between(w[0], w[1]))
        .collect::<Result<Vec<_>>>()?;
    let actions: Vec<Action> = parsed[1..].iter().map(|f| f.action.unwrap()).collect();
    let initial = GridState {
        apples: first.apples.clone(),
        garbage: first.garbage.clone(),
        main_agent: first.main_agent,
        background_agents: start,
    };
    let t = Trajectory::replay(id, initial, actions, mover, background_actions)?;
    for (frame, p) in t.frames.iter().zip(&parsed) {
        let agents: BTreeSet<Cell> = frame.background_agents.iter().copied().collect();
        if frame.main_agent != p.main_agent
            || agents != p.background_agents
            || frame.apples != p.apples
            || frame.garbage != p.garbage
        {
            return Err(parse_err("frames are inconsistent with the transition rules"));
        }
    }
    Ok(t)
}
