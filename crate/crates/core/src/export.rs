//! Plain-file exports: PGM frame dumps and the training loss log.

use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::frame::Frame;
use crate::tasks::Grid;
use crate::training::LossRecord;

/// Maps a pixel value in `[-1, 1]` to a gray level, clamping outside values.
pub fn gray_level(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0).round() as u8
}

/// Binary PGM (P5) encoding of one frame.
pub fn pgm_bytes(frame: &Frame, grid: Grid) -> Result<Vec<u8>> {
    if frame.len() != grid.dim() {
        return Err(invalid!(
            "frame has {} pixels but the grid is {}x{}",
            frame.len(),
            grid.height,
            grid.width
        ));
    }
    if !frame.is_finite() {
        return Err(Error::Numeric("cannot export a non-finite frame".into()));
    }
    let mut out = format!("P5\n{} {}\n255\n", grid.width, grid.height).into_bytes();
    out.extend(frame.as_slice().iter().map(|&v| gray_level(v)));
    Ok(out)
}

pub fn write_pgm(path: &Path, frame: &Frame, grid: Grid) -> Result<()> {
    let bytes = pgm_bytes(frame, grid)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// `step,loss,wall_time` per record.
pub fn loss_log_csv(records: &[LossRecord]) -> String {
    let mut out = String::from("step,loss,wall_time\n");
    for r in records {
        out.push_str(&format!("{},{},{}\n", r.step, r.loss, r.wall_time));
    }
    out
}
