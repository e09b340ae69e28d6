//! Two-cook kitchen on a small grid.
//!
//! Cooks fetch onions, fill the pot (three onions cook a soup), plate the
//! soup and carry it to the delivery window. Movement into a non-walkable
//! tile only turns the cook; `interact` acts on the faced tile. The team is
//! rewarded only on delivery.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::EnvParams;

/// Rows from north to south.
pub const KITCHEN_LAYOUT: &[&str] = &["XPXX", "O..D", "X..X", "XSXX"];

const SEED_SALT: u64 = 0x0c00_c1e5;
const POT_CAPACITY: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tile {
    Floor,
    Counter,
    OnionSource,
    PlateSource,
    Pot,
    Delivery,
}

impl Tile {
    fn from_char(c: char) -> Tile {
        match c {
            '.' => Tile::Floor,
            'O' => Tile::OnionSource,
            'S' => Tile::PlateSource,
            'P' => Tile::Pot,
            'D' => Tile::Delivery,
            _ => Tile::Counter,
        }
    }

    fn glyph(self) -> char {
        match self {
            Tile::Floor => '.',
            Tile::Counter => 'X',
            Tile::OnionSource => 'O',
            Tile::PlateSource => 'S',
            Tile::Pot => 'P',
            Tile::Delivery => 'D',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Item {
    Onion,
    Plate,
    Soup,
}

impl Item {
    fn name(self) -> &'static str {
        match self {
            Item::Onion => "onion",
            Item::Plate => "plate",
            Item::Soup => "soup",
        }
    }

    fn glyph(self) -> char {
        match self {
            Item::Onion => 'o',
            Item::Plate => 'p',
            Item::Soup => 's',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Facing {
    North,
    South,
    East,
    West,
}

impl Facing {
    const ALL: [Facing; 4] = [Facing::North, Facing::South, Facing::East, Facing::West];

    fn from_action(a: &str) -> Option<Facing> {
        match a {
            "north" => Some(Facing::North),
            "south" => Some(Facing::South),
            "east" => Some(Facing::East),
            "west" => Some(Facing::West),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Facing::North => "north",
            Facing::South => "south",
            Facing::East => "east",
            Facing::West => "west",
        }
    }

    /// (row, col) delta.
    fn delta(self) -> (i64, i64) {
        match self {
            Facing::North => (-1, 0),
            Facing::South => (1, 0),
            Facing::East => (0, 1),
            Facing::West => (0, -1),
        }
    }
}

type Pos = (usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct KitchenGridState {
    pub grid: Vec<Vec<Tile>>,
    pub agent_positions: [Pos; 2],
    pub facing: [Facing; 2],
    pub held_items: [Option<Item>; 2],
    /// Items resting on counters.
    pub counter_items: BTreeMap<Pos, Item>,
    pub pot_contents: u8,
    pub pot_cooked: bool,
    pub deliveries: u32,
    pub step_count: usize,
    pub done: bool,
}

impl KitchenGridState {
    pub fn initial(seed: u64) -> Self {
        let grid: Vec<Vec<Tile>> = KITCHEN_LAYOUT
            .iter()
            .map(|row| row.chars().map(Tile::from_char).collect())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SEED_SALT);
        let mut floor: Vec<Pos> = grid
            .iter()
            .enumerate()
            .flat_map(|(r, row)| {
                row.iter()
                    .enumerate()
                    .filter(|(_, t)| **t == Tile::Floor)
                    .map(move |(c, _)| (r, c))
            })
            .collect();
        floor.shuffle(&mut rng);
        let facing = [
            Facing::ALL[rng.random_range(0..4)],
            Facing::ALL[rng.random_range(0..4)],
        ];
        Self {
            grid,
            agent_positions: [floor[0], floor[1]],
            facing,
            held_items: [None, None],
            counter_items: BTreeMap::new(),
            pot_contents: 0,
            pot_cooked: false,
            deliveries: 0,
            step_count: 0,
            done: false,
        }
    }

    fn tile(&self, pos: (i64, i64)) -> Option<Tile> {
        if pos.0 < 0 || pos.1 < 0 {
            return None;
        }
        self.grid.get(pos.0 as usize)?.get(pos.1 as usize).copied()
    }

    fn neighbour(pos: Pos, f: Facing) -> (i64, i64) {
        let (dr, dc) = f.delta();
        (pos.0 as i64 + dr, pos.1 as i64 + dc)
    }

    pub(super) fn advance(
        &self,
        actions: &[&str],
        params: &EnvParams,
        horizon: usize,
    ) -> (Self, f64) {
        let mut next = self.clone();
        let current = self.agent_positions;

        // Proposed moves; moving into a non-walkable tile only turns the cook.
        let mut target = current;
        for i in 0..2 {
            if let Some(f) = Facing::from_action(actions[i]) {
                next.facing[i] = f;
                let to = Self::neighbour(current[i], f);
                if self.tile(to) == Some(Tile::Floor) {
                    target[i] = (to.0 as usize, to.1 as usize);
                }
            }
        }
        // Same target: the lower id wins.
        if target[0] == target[1] {
            target[1] = current[1];
        }
        // Swaps are not allowed.
        if target[0] == current[1] && target[1] == current[0] {
            target = current;
        }
        // Moving onto a cook that stays put is not allowed.
        if target[0] == target[1] {
            target[0] = current[0];
        }
        if target[1] == target[0] {
            target[1] = current[1];
        }
        next.agent_positions = target;

        let mut reward = 0.0;
        for (i, action) in actions.iter().enumerate().take(2) {
            if *action == "interact" {
                reward += next.interact(i, params);
            }
        }

        next.step_count += 1;
        next.done = next.deliveries >= params.delivery_quota || next.step_count >= horizon;
        (next, reward)
    }

    fn interact(&mut self, i: usize, params: &EnvParams) -> f64 {
        let faced = Self::neighbour(self.agent_positions[i], self.facing[i]);
        let Some(tile) = self.tile(faced) else {
            return 0.0;
        };
        let pos = (faced.0 as usize, faced.1 as usize);
        let held = self.held_items[i];
        match (tile, held) {
            (Tile::OnionSource, None) => self.held_items[i] = Some(Item::Onion),
            (Tile::PlateSource, None) => self.held_items[i] = Some(Item::Plate),
            (Tile::Pot, Some(Item::Onion))
                if !self.pot_cooked && self.pot_contents < POT_CAPACITY =>
            {
                self.pot_contents += 1;
                self.held_items[i] = None;
                if self.pot_contents == POT_CAPACITY {
                    self.pot_cooked = true;
                }
            }
            (Tile::Pot, Some(Item::Plate)) if self.pot_cooked => {
                self.pot_contents = 0;
                self.pot_cooked = false;
                self.held_items[i] = Some(Item::Soup);
            }
            (Tile::Delivery, Some(Item::Soup)) => {
                self.held_items[i] = None;
                self.deliveries += 1;
                return params.delivery_reward;
            }
            (Tile::Counter, Some(item)) if !self.counter_items.contains_key(&pos) => {
                self.counter_items.insert(pos, item);
                self.held_items[i] = None;
            }
            (Tile::Counter, None) => {
                if let Some(item) = self.counter_items.remove(&pos) {
                    self.held_items[i] = Some(item);
                }
            }
            _ => {}
        }
        0.0
    }

    fn held_name(&self, i: usize) -> &'static str {
        self.held_items[i].map_or("nothing", Item::name)
    }

    fn pot_text(&self) -> String {
        let onions = if self.pot_contents == 1 {
            "onion"
        } else {
            "onions"
        };
        let status = if self.pot_cooked {
            "soup ready"
        } else {
            "not cooked"
        };
        format!("{} {onions}, {status}", self.pot_contents)
    }

    fn glyph_at(&self, pos: Pos, me: usize) -> char {
        if pos == self.agent_positions[me] {
            return '@';
        }
        if pos == self.agent_positions[1 - me] {
            return 'A';
        }
        if let Some(item) = self.counter_items.get(&pos) {
            return item.glyph();
        }
        self.grid[pos.0][pos.1].glyph()
    }

    pub(super) fn local_text(&self, agent: usize, window: usize) -> String {
        let other = 1 - agent;
        let (r0, c0) = self.agent_positions[agent];
        let w = window as i64;
        let mut view = Vec::new();
        let mut pot_visible = false;
        for dr in -w..=w {
            let mut line = String::new();
            for dc in -w..=w {
                let p = (r0 as i64 + dr, c0 as i64 + dc);
                match self.tile(p) {
                    Some(t) => {
                        pot_visible |= t == Tile::Pot;
                        line.push(self.glyph_at((p.0 as usize, p.1 as usize), agent));
                    }
                    None => line.push(' '),
                }
            }
            view.push(line);
        }
        let mut s = format!(
            "You are cook {agent}, facing {}, holding {}.\nView ({}x{} around you, north at top; @ you, A other cook, X counter, O onion source, S plate source, P pot, D delivery window, . floor, o/p/s item on counter):\n{}\n",
            self.facing[agent].name(),
            self.held_name(agent),
            2 * window + 1,
            2 * window + 1,
            view.join("\n"),
        );
        if pot_visible {
            s.push_str(&format!("Pot: {}.\n", self.pot_text()));
        }
        let (ro, co) = self.agent_positions[other];
        let (dr, dc) = (ro as i64 - r0 as i64, co as i64 - c0 as i64);
        s.push_str(&format!(
            "Other cook: {} {}, {} {} of you, facing {}.",
            dc.abs(),
            if dc >= 0 { "east" } else { "west" },
            dr.abs(),
            if dr >= 0 { "south" } else { "north" },
            self.facing[other].name()
        ));
        s
    }

    pub(super) fn global_text(&self, horizon: usize) -> String {
        let rows: Vec<String> = (0..self.grid.len())
            .map(|r| {
                (0..self.grid[r].len())
                    .map(|c| {
                        if let Some(i) = self.agent_positions.iter().position(|p| *p == (r, c)) {
                            char::from(b'0' + i as u8)
                        } else if let Some(item) = self.counter_items.get(&(r, c)) {
                            item.glyph()
                        } else {
                            self.grid[r][c].glyph()
                        }
                    })
                    .collect()
            })
            .collect();
        let cooks: Vec<String> = (0..2)
            .map(|i| {
                let (r, c) = self.agent_positions[i];
                format!(
                    "cook {i} at row {r} col {c} facing {} holding {}",
                    self.facing[i].name(),
                    self.held_name(i)
                )
            })
            .collect();
        format!(
            "Kitchen [{}]; {}; pot: {}; deliveries: {}; step {} of {}{}.",
            rows.join("/"),
            cooks.join("; "),
            self.pot_text(),
            self.deliveries,
            self.step_count,
            horizon,
            if self.done { ", finished" } else { "" }
        )
    }
}
