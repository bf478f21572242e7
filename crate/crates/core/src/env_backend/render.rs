use crate::protocol::{Geometry, Observation};

use super::SimState;

const BACKGROUND: u8 = 16;
const CURSOR: u8 = 17;

/// 16 cell colours, then background, then cursor outline.
const PALETTE: [[u8; 3]; 18] = [
    [0xF4, 0xF4, 0xF4],
    [0x1F, 0x77, 0xB4],
    [0xFF, 0x7F, 0x0E],
    [0x2C, 0xA0, 0x2C],
    [0xD6, 0x27, 0x28],
    [0x94, 0x67, 0xBD],
    [0x8C, 0x56, 0x4B],
    [0xE3, 0x77, 0xC2],
    [0x7F, 0x7F, 0x7F],
    [0xBC, 0xBD, 0x22],
    [0x17, 0xBE, 0xCF],
    [0xAE, 0xC7, 0xE8],
    [0xFF, 0xBB, 0x78],
    [0x98, 0xDF, 0x8A],
    [0xFF, 0x98, 0x96],
    [0xC5, 0xB0, 0xD5],
    [0x20, 0x20, 0x20],
    [0x00, 0x00, 0x00],
];

/// Renders the visible part of the grid as an indexed PNG of `geometry`.
///
/// Cell `v` is drawn with palette entry `v % 16`; the cursor cell gets a
/// one-pixel outline. Output bytes depend only on the grid, cursor, viewport
/// and geometry.
pub fn render_png(state: &SimState, geometry: Geometry) -> Vec<u8> {
    let (width, height) = (geometry.width as usize, geometry.height as usize);
    let (cw, ch) = state.cell_size(geometry);
    let (cw, ch) = (cw as usize, ch as usize);
    let rows = state.grid.rows();
    let cols = state.grid.cols();
    let visible_cursor_row = state.cursor.0.checked_sub(state.viewport);

    let mut pixels = vec![BACKGROUND; width * height];
    for (py, line) in pixels.chunks_exact_mut(width).enumerate() {
        let screen_row = py / ch;
        let grid_row = state.viewport + screen_row;
        if grid_row >= rows {
            continue;
        }
        let within_y = py % ch;
        let cursor_on_row = visible_cursor_row == Some(screen_row);
        for col in 0..cols {
            let x0 = col * cw;
            if x0 >= width {
                break;
            }
            let x1 = (x0 + cw).min(width);
            let colour = state.grid.get(grid_row, col).unwrap_or(0) % 16;
            let span = &mut line[x0..x1];
            if cursor_on_row && col == state.cursor.1 {
                if within_y == 0 || within_y == ch - 1 {
                    span.fill(CURSOR);
                } else {
                    span.fill(colour);
                    span[0] = CURSOR;
                    if let Some(last) = span.last_mut() {
                        *last = CURSOR;
                    }
                }
            } else {
                span.fill(colour);
            }
        }
    }

    let mut out = Vec::with_capacity(width * height / 8 + 256);
    {
        let mut encoder = png::Encoder::new(&mut out, geometry.width, geometry.height);
        encoder.set_color(png::ColorType::Indexed);
        encoder.set_depth(png::BitDepth::Eight);
        encoder.set_palette(PALETTE.concat());
        encoder.set_compression(png::Compression::Fast);
        encoder.set_filter(png::Filter::NoFilter);
        let mut writer = encoder.write_header().expect("png header for in-memory buffer");
        writer.write_image_data(&pixels).expect("png data for in-memory buffer");
        writer.finish().expect("png finish for in-memory buffer");
    }
    out
}

/// Screenshot plus metadata (`turn`, `task_id`, serialized `sim_state`).
pub fn sim_snapshot(state: &SimState, geometry: Geometry) -> Observation {
    let sim_json = serde_json::to_string(state).expect("sim state serializes");
    Observation::new(render_png(state, geometry), state.turn)
        .with_meta("task_id", state.goal.clone())
        .with_meta("sim_state", sim_json)
}
