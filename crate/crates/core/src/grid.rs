//! Court geometry and the three discretizations: micro occupancy cells,
//! macro-goal boxes and velocity actions.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

static CLAMP_EVENTS: AtomicU64 = AtomicU64::new(0);

/// Number of positions clamped onto the court by [`CourtSpec::pos_to_cell`]
/// and [`CourtSpec::pos_to_macro_box`] since process start.
pub fn clamp_events() -> u64 {
    CLAMP_EVENTS.load(Ordering::Relaxed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CourtSpec {
    pub width_ft: f64,
    pub height_ft: f64,
    pub micro_cell_ft: f64,
    pub macro_box_ft: f64,
    pub velocity_radius_cells: usize,
    pub lookahead_steps: usize,
    pub subsample_stride: usize,
}

impl Default for CourtSpec {
    fn default() -> Self {
        CourtSpec {
            width_ft: 50.0,
            height_ft: 45.0,
            micro_cell_ft: 1.0,
            macro_box_ft: 5.0,
            velocity_radius_cells: 8,
            lookahead_steps: 4,
            subsample_stride: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MicroCell {
    pub col: usize,
    pub row: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MacroGoalBox(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VelocityAction {
    pub dx: i32,
    pub dy: i32,
}

fn whole_multiple(len: f64, unit: f64) -> bool {
    let q = len / unit;
    q >= 1.0 && (q - q.round()).abs() < 1e-9
}

/// Round to nearest, ties toward zero.
pub fn round_half_toward_zero(v: f64) -> i64 {
    let a = v.abs();
    let f = a.floor();
    let n = if a - f > 0.5 { f + 1.0 } else { f };
    (n as i64) * if v < 0.0 { -1 } else { 1 }
}

impl CourtSpec {
    /// The 0.25 ft micro grid of the original tracking setup.
    pub fn fine() -> Self {
        CourtSpec {
            micro_cell_ft: 0.25,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.width_ft, self.height_ft, self.micro_cell_ft, self.macro_box_ft];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config("court dimensions must be positive".into()));
        }
        for (len, name) in [(self.width_ft, "width_ft"), (self.height_ft, "height_ft")] {
            if !whole_multiple(len, self.micro_cell_ft) {
                return Err(Error::Config(format!("{name} is not a multiple of micro_cell_ft")));
            }
            if !whole_multiple(len, self.macro_box_ft) {
                return Err(Error::Config(format!("{name} is not a multiple of macro_box_ft")));
            }
        }
        if self.velocity_radius_cells == 0 || self.lookahead_steps == 0 || self.subsample_stride == 0 {
            return Err(Error::Config("velocity radius, look-ahead and stride must be positive".into()));
        }
        Ok(())
    }

    pub fn micro_cols(&self) -> usize {
        (self.width_ft / self.micro_cell_ft).round() as usize
    }

    pub fn micro_rows(&self) -> usize {
        (self.height_ft / self.micro_cell_ft).round() as usize
    }

    pub fn num_cells(&self) -> usize {
        self.micro_cols() * self.micro_rows()
    }

    pub fn macro_cols(&self) -> usize {
        (self.width_ft / self.macro_box_ft).round() as usize
    }

    pub fn macro_rows(&self) -> usize {
        (self.height_ft / self.macro_box_ft).round() as usize
    }

    pub fn num_macro_boxes(&self) -> usize {
        self.macro_cols() * self.macro_rows()
    }

    /// Side of the square velocity grid, `2R + 1`.
    pub fn velocity_side(&self) -> usize {
        2 * self.velocity_radius_cells + 1
    }

    pub fn num_actions(&self) -> usize {
        self.velocity_side() * self.velocity_side()
    }

    pub fn stationary_action(&self) -> VelocityAction {
        VelocityAction { dx: 0, dy: 0 }
    }

    fn clamp_index(v: f64, n: usize) -> (usize, bool) {
        if !(v >= 0.0) {
            (0, true)
        } else if v >= n as f64 {
            (n - 1, true)
        } else {
            (v as usize, false)
        }
    }

    /// Cell containing `(x, y)`, plus whether the point had to be clamped.
    pub fn pos_to_cell_checked(&self, x: f64, y: f64) -> (MicroCell, bool) {
        let (col, cx) = Self::clamp_index((x / self.micro_cell_ft).floor(), self.micro_cols());
        let (row, cy) = Self::clamp_index((y / self.micro_cell_ft).floor(), self.micro_rows());
        if cx || cy {
            CLAMP_EVENTS.fetch_add(1, Ordering::Relaxed);
        }
        (MicroCell { col, row }, cx || cy)
    }

    pub fn pos_to_cell(&self, x: f64, y: f64) -> MicroCell {
        self.pos_to_cell_checked(x, y).0
    }

    pub fn cell_in_range(&self, cell: MicroCell) -> bool {
        cell.col < self.micro_cols() && cell.row < self.micro_rows()
    }

    /// Center of `cell`.
    pub fn cell_to_pos(&self, cell: MicroCell) -> Result<(f64, f64)> {
        if !self.cell_in_range(cell) {
            return Err(Error::Range(format!("cell {cell:?} outside the micro grid")));
        }
        Ok((
            (cell.col as f64 + 0.5) * self.micro_cell_ft,
            (cell.row as f64 + 0.5) * self.micro_cell_ft,
        ))
    }

    /// Row-major flat index of a cell.
    pub fn cell_index(&self, cell: MicroCell) -> usize {
        cell.row * self.micro_cols() + cell.col
    }

    pub fn cell_from_index(&self, idx: usize) -> Result<MicroCell> {
        if idx >= self.num_cells() {
            return Err(Error::Range(format!("cell index {idx} out of range")));
        }
        Ok(MicroCell {
            col: idx % self.micro_cols(),
            row: idx / self.micro_cols(),
        })
    }

    pub fn pos_to_macro_box_checked(&self, x: f64, y: f64) -> (MacroGoalBox, bool) {
        let (c, cx) = Self::clamp_index((x / self.macro_box_ft).floor(), self.macro_cols());
        let (r, cy) = Self::clamp_index((y / self.macro_box_ft).floor(), self.macro_rows());
        if cx || cy {
            CLAMP_EVENTS.fetch_add(1, Ordering::Relaxed);
        }
        (MacroGoalBox(c + self.macro_cols() * r), cx || cy)
    }

    pub fn pos_to_macro_box(&self, x: f64, y: f64) -> MacroGoalBox {
        self.pos_to_macro_box_checked(x, y).0
    }

    pub fn macro_box_center(&self, b: MacroGoalBox) -> Result<(f64, f64)> {
        let (c, r) = self.macro_box_coords(b)?;
        Ok((
            (c as f64 + 0.5) * self.macro_box_ft,
            (r as f64 + 0.5) * self.macro_box_ft,
        ))
    }

    /// `(col, row)` of a macro box.
    pub fn macro_box_coords(&self, b: MacroGoalBox) -> Result<(usize, usize)> {
        if b.0 >= self.num_macro_boxes() {
            return Err(Error::Range(format!("macro box {} out of range", b.0)));
        }
        Ok((b.0 % self.macro_cols(), b.0 / self.macro_cols()))
    }

    pub fn macro_box_contains(&self, b: MacroGoalBox, x: f64, y: f64) -> bool {
        match self.macro_box_coords(b) {
            Ok((c, r)) => {
                let (x0, y0) = (c as f64 * self.macro_box_ft, r as f64 * self.macro_box_ft);
                x >= x0 && x < x0 + self.macro_box_ft && y >= y0 && y < y0 + self.macro_box_ft
            }
            Err(_) => false,
        }
    }

    /// Per-raw-frame displacement in feet to a velocity action, rounding
    /// to the nearest cell (ties toward zero) and clipping to the grid.
    pub fn displacement_to_action(&self, dx: f64, dy: f64) -> VelocityAction {
        let r = self.velocity_radius_cells as i64;
        let q = |v: f64| round_half_toward_zero(v / self.micro_cell_ft).clamp(-r, r) as i32;
        VelocityAction { dx: q(dx), dy: q(dy) }
    }

    /// Whether the displacement needed clipping to fit the velocity grid.
    pub fn displacement_clipped(&self, dx: f64, dy: f64) -> bool {
        let r = self.velocity_radius_cells as i64;
        let q = |v: f64| round_half_toward_zero(v / self.micro_cell_ft).abs() > r;
        q(dx) || q(dy)
    }

    pub fn action_to_displacement(&self, a: VelocityAction) -> (f64, f64) {
        (a.dx as f64 * self.micro_cell_ft, a.dy as f64 * self.micro_cell_ft)
    }

    pub fn action_valid(&self, a: VelocityAction) -> bool {
        let r = self.velocity_radius_cells as i32;
        a.dx.abs() <= r && a.dy.abs() <= r
    }

    /// Flat index `(dy + R)·(2R + 1) + (dx + R)`.
    pub fn action_index(&self, a: VelocityAction) -> usize {
        let r = self.velocity_radius_cells as i32;
        ((a.dy + r) as usize) * self.velocity_side() + (a.dx + r) as usize
    }

    pub fn action_from_index(&self, idx: usize) -> Result<VelocityAction> {
        if idx >= self.num_actions() {
            return Err(Error::Range(format!("action index {idx} out of range")));
        }
        let r = self.velocity_radius_cells as i32;
        let side = self.velocity_side();
        Ok(VelocityAction {
            dx: (idx % side) as i32 - r,
            dy: (idx / side) as i32 - r,
        })
    }

    pub fn stationary_index(&self) -> usize {
        self.action_index(self.stationary_action())
    }

    /// Clamp a continuous position onto `[0, width] × [0, height]`.
    pub fn clamp_pos(&self, x: f64, y: f64) -> ((f64, f64), bool) {
        let cx = x.clamp(0.0, self.width_ft);
        let cy = y.clamp(0.0, self.height_ft);
        ((cx, cy), cx != x || cy != y)
    }
}
