use serde::{Deserialize, Serialize};

use crate::protocol::{Action, ActionPayload, Geometry};
use crate::task_flow::{ConfigureStep, TaskSpec};

pub const DEFAULT_GRID_ROWS: usize = 16;
pub const DEFAULT_GRID_COLS: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid {
    rows: usize,
    cols: usize,
    cells: Vec<u8>,
}

impl Grid {
    pub fn new(rows: usize, cols: usize) -> Self {
        let rows = rows.max(1);
        let cols = cols.max(1);
        Grid { rows, cols, cells: vec![0; rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> Option<u8> {
        (row < self.rows && col < self.cols).then(|| self.cells[row * self.cols + col])
    }

    /// Writes a cell; out-of-range writes are ignored.
    pub fn set(&mut self, row: usize, col: usize, value: u8) {
        if row < self.rows && col < self.cols {
            self.cells[row * self.cols + col] = value;
        }
    }

    pub fn fill(&mut self, value: u8) {
        self.cells.iter_mut().for_each(|c| *c = value);
    }
}

/// The whole simulated desktop. Everything an evaluator may look at lives here.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SimState {
    pub grid: Grid,
    pub cursor: (usize, usize),
    pub typed_buffer: String,
    pub clipboard: String,
    pub viewport: usize,
    /// Task whose evaluator defines success for this state.
    pub goal: String,
    pub turn: u64,
    pub rng_state: u64,
}

/// splitmix64 step; small, seedable, and stable across platforms.
fn next_random(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SimState {
    pub fn blank(rows: usize, cols: usize) -> Self {
        SimState {
            grid: Grid::new(rows, cols),
            cursor: (0, 0),
            typed_buffer: String::new(),
            clipboard: String::new(),
            viewport: 0,
            goal: String::new(),
            turn: 0,
            rng_state: 0,
        }
    }

    /// Initial conditions of `task`, built by replaying its configure steps.
    pub fn from_task(task: &TaskSpec) -> Result<Self, String> {
        let mut s = SimState::blank(DEFAULT_GRID_ROWS, DEFAULT_GRID_COLS);
        s.goal = task.task_id.clone();
        for step in &task.configure_steps {
            match step {
                ConfigureStep::GridSize { rows, cols } => {
                    if *rows == 0 || *cols == 0 || rows * cols > 1 << 16 {
                        return Err(format!("unsupported grid size {rows}x{cols}"));
                    }
                    s.grid = Grid::new(*rows, *cols);
                    s.cursor = (0, 0);
                    s.viewport = 0;
                }
                ConfigureStep::Seed { value } => {
                    s.rng_state = *value;
                    for i in 0..s.grid.cells.len() {
                        s.grid.cells[i] = (next_random(&mut s.rng_state) % 10) as u8;
                    }
                }
                ConfigureStep::Fill { value } => s.grid.fill(*value),
                ConfigureStep::SetCell { row, col, value } => {
                    if s.grid.get(*row, *col).is_none() {
                        return Err(format!("set_cell ({row}, {col}) is outside the grid"));
                    }
                    s.grid.set(*row, *col, *value);
                }
                ConfigureStep::Cursor { row, col } => {
                    if s.grid.get(*row, *col).is_none() {
                        return Err(format!("cursor ({row}, {col}) is outside the grid"));
                    }
                    s.cursor = (*row, *col);
                }
                ConfigureStep::Viewport { offset } => s.viewport = (*offset).min(s.grid.rows - 1),
                ConfigureStep::Clipboard { text } => s.clipboard = text.clone(),
                ConfigureStep::Buffer { text } => s.typed_buffer = text.clone(),
            }
        }
        Ok(s)
    }

    /// Pixel size of one grid cell when rendered at `geometry`.
    pub fn cell_size(&self, geometry: Geometry) -> (u32, u32) {
        let w = (geometry.width / self.grid.cols as u32).max(1);
        let h = (geometry.height / self.grid.rows as u32).max(1);
        (w, h)
    }

    /// Grid cell under screen pixel `(x, y)`, clamped to the grid.
    pub fn cell_at(&self, x: i64, y: i64, geometry: Geometry) -> (usize, usize) {
        let (cw, ch) = self.cell_size(geometry);
        let col = (x.max(0) as u64 / u64::from(cw)) as usize;
        let row = self.viewport + (y.max(0) as u64 / u64::from(ch)) as usize;
        (row.min(self.grid.rows - 1), col.min(self.grid.cols - 1))
    }

    fn type_text(&mut self, text: &str) {
        let (row, start) = self.cursor;
        let mut col = start;
        for ch in text.chars() {
            self.typed_buffer.push(ch);
            if col < self.grid.cols {
                self.grid.set(row, col, (ch as u32 % 16) as u8);
                col += 1;
            }
        }
        self.cursor.1 = col.min(self.grid.cols - 1);
    }

    fn scroll(&mut self, delta: i64) {
        let max = (self.grid.rows - 1) as i64;
        self.viewport = (self.viewport as i64 + delta).clamp(0, max) as usize;
    }

    fn press_key(&mut self, key: &str) {
        let (row, col) = self.cursor;
        let last_row = self.grid.rows - 1;
        let last_col = self.grid.cols - 1;
        match key.to_ascii_lowercase().as_str() {
            "up" | "arrowup" => self.cursor.0 = row.saturating_sub(1),
            "down" | "arrowdown" => self.cursor.0 = (row + 1).min(last_row),
            "left" | "arrowleft" => self.cursor.1 = col.saturating_sub(1),
            "right" | "arrowright" => self.cursor.1 = (col + 1).min(last_col),
            "home" => self.cursor.1 = 0,
            "end" => self.cursor.1 = last_col,
            "pageup" => self.scroll(-1),
            "pagedown" => self.scroll(1),
            "backspace" => {
                self.typed_buffer.pop();
                if col > 0 {
                    self.cursor.1 = col - 1;
                    self.grid.set(row, col - 1, 0);
                }
            }
            "delete" => self.grid.set(row, col, 0),
            "enter" | "return" => {
                self.typed_buffer.push('\n');
                self.cursor = ((row + 1).min(last_row), 0);
            }
            "tab" => self.type_text("\t"),
            "space" => self.type_text(" "),
            "escape" | "esc" => self.typed_buffer.clear(),
            "ctrl+c" => self.clipboard = self.typed_buffer.clone(),
            "ctrl+v" => {
                let clip = self.clipboard.clone();
                self.type_text(&clip);
            }
            _ => {
                let mut chars = key.chars();
                if let (Some(ch), None) = (chars.next(), chars.next()) {
                    self.type_text(ch.encode_utf8(&mut [0; 4]));
                }
            }
        }
    }

    fn api_call(&mut self, name: &str, args: &serde_json::Value) {
        let arg_u64 = |key: &str| args.get(key).and_then(|v| v.as_u64());
        match name {
            "clear_grid" => self.grid.fill(0),
            "fill" => {
                if let Some(v) = arg_u64("value") {
                    self.grid.fill(v as u8);
                }
            }
            "set_cell" => {
                if let (Some(r), Some(c), Some(v)) = (arg_u64("row"), arg_u64("col"), arg_u64("value")) {
                    self.grid.set(r as usize, c as usize, v as u8);
                }
            }
            "copy" => self.clipboard = self.typed_buffer.clone(),
            "paste" => {
                let clip = self.clipboard.clone();
                self.type_text(&clip);
            }
            "clear_buffer" => self.typed_buffer.clear(),
            "scatter" => {
                let count = arg_u64("count").unwrap_or(1).min(self.grid.cells.len() as u64);
                for _ in 0..count {
                    let idx = (next_random(&mut self.rng_state) % self.grid.cells.len() as u64) as usize;
                    self.grid.cells[idx] = (next_random(&mut self.rng_state) % 10) as u8;
                }
            }
            _ => {}
        }
    }
}

/// Deterministic transition of the simulated desktop under one action.
///
/// Mouse actions move the cursor to the cell under the pointer. `type_text`
/// appends to the buffer and writes each character code modulo 16 into the
/// cursor row, stopping at the row end. Key names follow `docs/sim_keys.md`;
/// unknown keys and unknown api calls change nothing but the turn counter.
pub fn sim_apply(state: &SimState, action: &Action, geometry: Geometry) -> SimState {
    let mut next = state.clone();
    match &action.payload {
        ActionPayload::MouseMove { x, y } | ActionPayload::MouseClick { x, y, .. } => {
            next.cursor = next.cell_at(*x, *y, geometry);
        }
        ActionPayload::TypeText { text } => next.type_text(text),
        ActionPayload::KeyPress { key } => next.press_key(key),
        ActionPayload::Scroll { delta } => next.scroll(*delta),
        ActionPayload::ApiCall { name, args } => next.api_call(name, args),
        ActionPayload::Noop | ActionPayload::Terminate => {}
    }
    next.turn += 1;
    next
}
