//! Warehouse gridworld: states, deterministic moves, map loading.
//!
//! Maps are line-oriented text, top line first. Glyphs: `.` open, `#` wall,
//! `S` start, `1`..`9` item, `A`/`B`/`C` destination, `H` helper start.
//! Coordinates are zero-based with the origin at the bottom-left; `Up`
//! increases `y`. There is no `Down` action, so `y` never decreases along
//! a path.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{GridError, MapError};

/// Text of the canonical warehouse map (11 x 13, three item rows, A/B/C).
pub const CANONICAL_MAP: &str = include_str!("../data/canonical_map.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "(i32, i32)", from = "(i32, i32)")]
pub struct State {
    pub x: i32,
    pub y: i32,
}

impl State {
    pub fn new(x: i32, y: i32) -> Self {
        State { x, y }
    }
}

impl From<State> for (i32, i32) {
    fn from(s: State) -> Self {
        (s.x, s.y)
    }
}

impl From<(i32, i32)> for State {
    fn from((x, y): (i32, i32)) -> Self {
        State { x, y }
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Up,
    Left,
    Right,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::Up, Action::Left, Action::Right];

    pub fn delta(self) -> (i32, i32) {
        match self {
            Action::Up => (0, 1),
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
        }
    }
}

/// Destination identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dest {
    A,
    B,
    C,
}

impl Dest {
    pub const ALL: [Dest; 3] = [Dest::A, Dest::B, Dest::C];

    pub fn glyph(self) -> char {
        match self {
            Dest::A => 'A',
            Dest::B => 'B',
            Dest::C => 'C',
        }
    }

    pub fn from_glyph(c: char) -> Option<Dest> {
        match c {
            'A' => Some(Dest::A),
            'B' => Some(Dest::B),
            'C' => Some(Dest::C),
            _ => None,
        }
    }
}

impl fmt::Display for Dest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.glyph())
    }
}

impl std::str::FromStr for Dest {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let mut chars = s.chars();
        match (chars.next().and_then(Dest::from_glyph), chars.next()) {
            (Some(d), None) => Ok(d),
            _ => Err(format!("invalid destination '{s}'")),
        }
    }
}

/// Immutable warehouse geometry. Safe to share across threads after load.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridMap {
    pub width: i32,
    pub height: i32,
    pub walls: HashSet<State>,
    pub starts: Vec<State>,
    pub items: BTreeMap<u8, State>,
    pub destinations: BTreeMap<Dest, State>,
    pub helper_start: State,
}

impl GridMap {
    /// The canonical warehouse map shipped with the crate.
    pub fn canonical() -> GridMap {
        load_map(CANONICAL_MAP).expect("canonical map is valid")
    }

    pub fn in_bounds(&self, s: State) -> bool {
        s.x >= 0 && s.x < self.width && s.y >= 0 && s.y < self.height
    }

    pub fn is_open(&self, s: State) -> bool {
        self.in_bounds(s) && !self.walls.contains(&s)
    }

    /// Row index (1..=3) of an item id.
    pub fn item_row(id: u8) -> u8 {
        (id - 1) / 3 + 1
    }

    /// Item ids belonging to a given row, in increasing id order.
    pub fn row_items(&self, row: u8) -> Vec<u8> {
        self.items
            .keys()
            .copied()
            .filter(|&id| Self::item_row(id) == row)
            .collect()
    }

    /// Number of distinct item rows present on the map.
    pub fn row_count(&self) -> u8 {
        self.items
            .keys()
            .map(|&id| Self::item_row(id))
            .max()
            .unwrap_or(0)
    }

    pub fn item_cell(&self, id: u8) -> Option<State> {
        self.items.get(&id).copied()
    }

    pub fn dest_cell(&self, d: Dest) -> State {
        self.destinations[&d]
    }

    /// Moves whose deterministic successor stays on an open in-bounds cell.
    pub fn available_actions(&self, s: State) -> Vec<Action> {
        Action::ALL
            .iter()
            .copied()
            .filter(|a| {
                let (dx, dy) = a.delta();
                self.is_open(State::new(s.x + dx, s.y + dy))
            })
            .collect()
    }

    /// Deterministic successor; errors if the action is not available in `s`.
    pub fn transition(&self, s: State, a: Action) -> std::result::Result<State, GridError> {
        if !self.is_open(s) {
            return Err(GridError::InvalidState(s.x, s.y));
        }
        let (dx, dy) = a.delta();
        let next = State::new(s.x + dx, s.y + dy);
        if self.is_open(next) {
            Ok(next)
        } else {
            Err(GridError::IllegalMove)
        }
    }

    /// The unique action realizing `from -> to`, if the cells are adjacent.
    pub fn action_between(&self, from: State, to: State) -> Option<Action> {
        Action::ALL.iter().copied().find(|a| {
            let (dx, dy) = a.delta();
            State::new(from.x + dx, from.y + dy) == to
        })
    }

    /// Serializes back to the line-grid document format.
    pub fn to_text(&self) -> String {
        let mut grid = vec![vec!['.'; self.width as usize]; self.height as usize];
        let mut put = |s: State, c: char| {
            grid[s.y as usize][s.x as usize] = c;
        };
        for &w in &self.walls {
            put(w, '#');
        }
        for &s in &self.starts {
            put(s, 'S');
        }
        for (&id, &s) in &self.items {
            put(s, (b'0' + id) as char);
        }
        for (&d, &s) in &self.destinations {
            put(s, d.glyph());
        }
        put(self.helper_start, 'H');
        let mut out = String::new();
        for row in grid.iter().rev() {
            out.extend(row.iter());
            out.push('\n');
        }
        out
    }
}

/// Parses and validates a map document.
pub fn load_map(text: &str) -> std::result::Result<GridMap, MapError> {
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.is_empty() {
        return Err(MapError::Empty);
    }
    let height = lines.len() as i32;
    let width = lines[0].chars().count() as i32;

    let mut walls = HashSet::new();
    let mut starts = Vec::new();
    let mut items: BTreeMap<u8, State> = BTreeMap::new();
    let mut destinations: BTreeMap<Dest, State> = BTreeMap::new();
    let mut helper = None;

    for (li, line) in lines.iter().enumerate() {
        let w = line.chars().count();
        if w as i32 != width {
            return Err(MapError::RaggedLine {
                line: li + 1,
                got: w,
                want: width as usize,
            });
        }
        let y = height - 1 - li as i32;
        for (ci, c) in line.chars().enumerate() {
            let cell = State::new(ci as i32, y);
            match c {
                '.' => {}
                '#' => {
                    walls.insert(cell);
                }
                'S' => starts.push(cell),
                'H' => {
                    if helper.replace(cell).is_some() {
                        return Err(MapError::DuplicateHelper {
                            line: li + 1,
                            col: ci + 1,
                        });
                    }
                }
                '1'..='9' => {
                    let id = c as u8 - b'0';
                    if items.insert(id, cell).is_some() {
                        return Err(MapError::DuplicateItem {
                            line: li + 1,
                            col: ci + 1,
                            id,
                        });
                    }
                }
                'A' | 'B' | 'C' => {
                    let d = Dest::from_glyph(c).unwrap();
                    if destinations.insert(d, cell).is_some() {
                        return Err(MapError::DuplicateDest {
                            line: li + 1,
                            col: ci + 1,
                            dest: c,
                        });
                    }
                }
                other => {
                    return Err(MapError::MalformedGlyph {
                        line: li + 1,
                        col: ci + 1,
                        glyph: other,
                    });
                }
            }
        }
    }

    for d in ['A', 'B', 'C'] {
        if !destinations.contains_key(&Dest::from_glyph(d).unwrap()) {
            return Err(MapError::MissingDestination(d));
        }
    }
    if items.is_empty() {
        return Err(MapError::MissingItem(1));
    }
    if starts.is_empty() {
        return Err(MapError::NoStarts);
    }
    let helper_start = helper.ok_or(MapError::MissingHelper)?;
    starts.sort();

    let map = GridMap {
        width,
        height,
        walls,
        starts,
        items,
        destinations,
        helper_start,
    };
    validate(&map)?;
    Ok(map)
}

fn validate(map: &GridMap) -> std::result::Result<(), MapError> {
    // Items in a row share one y; row ys strictly increase with row index.
    // Test maps may carry fewer than three rows.
    let mut row_ys: Vec<i32> = Vec::new();
    for row in 1..=3u8 {
        let ids = map.row_items(row);
        if ids.is_empty() {
            continue;
        }
        let first = ids[0];
        let y = map.items[&first].y;
        for &id in &ids[1..] {
            if map.items[&id].y != y {
                return Err(MapError::RowSplit(first, id));
            }
        }
        if let Some(&prev) = row_ys.last() {
            if y <= prev {
                return Err(MapError::RowOrderingViolated);
            }
        }
        row_ys.push(y);
    }
    let top = *row_ys.last().unwrap();
    let bottom = row_ys[0];
    for &cell in map.destinations.values() {
        if cell.y <= top {
            return Err(MapError::RowOrderingViolated);
        }
    }
    for &cell in &map.starts {
        if cell.y >= bottom {
            return Err(MapError::RowOrderingViolated);
        }
    }
    // The helper sits midway between item rows 2 and 3 on full maps.
    if row_ys.len() == 3 && !(map.helper_start.y > row_ys[1] && map.helper_start.y < row_ys[2]) {
        return Err(MapError::HelperRowViolated);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_map_counts() {
        let map = GridMap::canonical();
        assert_eq!(map.starts.len(), 11);
        assert_eq!(map.items.len(), 9);
        assert_eq!(map.destinations.len(), 3);
        assert_eq!(map.helper_start, State::new(0, 8));
        assert_eq!(map.dest_cell(Dest::A), State::new(1, 12));
        assert_eq!(map.dest_cell(Dest::B), State::new(5, 12));
        assert_eq!(map.dest_cell(Dest::C), State::new(9, 12));
        assert_eq!(map.item_cell(5), Some(State::new(5, 6)));
    }

    #[test]
    fn missing_destination_is_an_error() {
        let text = CANONICAL_MAP.replace('B', ".");
        assert_eq!(load_map(&text), Err(MapError::MissingDestination('B')));
    }

    #[test]
    fn row_ordering_violation() {
        // Swap the entire row-2 and row-3 item lines: row 3 ends up below
        // row 2.
        let text = CANONICAL_MAP
            .replace("..7..8..9..", "XROW3X")
            .replace("..4..5..6..", "..7..8..9..")
            .replace("XROW3X", "..4..5..6..");
        assert_eq!(load_map(&text), Err(MapError::RowOrderingViolated));
    }

    #[test]
    fn malformed_glyph_names_position() {
        let text = CANONICAL_MAP.replacen('.', "?", 1);
        assert_eq!(
            load_map(&text),
            Err(MapError::MalformedGlyph {
                line: 1,
                col: 1,
                glyph: '?'
            })
        );
    }

    #[test]
    fn available_actions_edges() {
        let map = GridMap::canonical();
        let acts = map.available_actions(State::new(0, 0));
        assert!(acts.contains(&Action::Up) && acts.contains(&Action::Right));
        assert!(!acts.contains(&Action::Left));
        let acts = map.available_actions(State::new(5, 3));
        assert_eq!(acts.len(), 3);
    }

    #[test]
    fn wall_blocks_up() {
        let text = "A.B.C\n.#...\n.1.2.\n...H.\nSSSSS\n";
        let map = load_map(text).unwrap();
        // (1,2) sits directly below the wall at (1,3).
        let acts = map.available_actions(State::new(1, 2));
        assert!(!acts.contains(&Action::Up));
        assert!(acts.contains(&Action::Left) && acts.contains(&Action::Right));
    }

    #[test]
    fn transitions() {
        let map = GridMap::canonical();
        assert_eq!(
            map.transition(State::new(5, 0), Action::Up).unwrap(),
            State::new(5, 1)
        );
        assert_eq!(
            map.transition(State::new(5, 0), Action::Left).unwrap(),
            State::new(4, 0)
        );
        assert_eq!(
            map.transition(State::new(0, 0), Action::Left),
            Err(GridError::IllegalMove)
        );
    }

    #[test]
    fn roundtrip_serialization() {
        let map = GridMap::canonical();
        let again = load_map(&map.to_text()).unwrap();
        assert_eq!(map, again);
    }
}
