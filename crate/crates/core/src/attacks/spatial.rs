//! Exhaustive rotation/translation grid search.

use serde::{Deserialize, Serialize};

use super::{AttackError, AttackOutcome, AttackParam, Oracle, QueryCounter};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialGrid {
    pub do_rotations: bool,
    pub do_translations: bool,
    /// Degrees; the grid spans `[-rot_range, rot_range]`.
    pub rot_range: f32,
    /// Fraction of the image width; rounded to whole pixels.
    pub trans_range: f32,
    pub rot_steps: usize,
    pub trans_steps: usize,
}

impl SpatialGrid {
    pub(crate) fn default_rot_range() -> f32 {
        30.0
    }
    pub(crate) fn default_trans_range() -> f32 {
        0.125
    }
    pub(crate) fn default_rot_steps() -> usize {
        7
    }
    pub(crate) fn default_trans_steps() -> usize {
        5
    }

    pub fn angles(&self) -> Vec<f32> {
        if !self.do_rotations {
            return vec![0.0];
        }
        linspace(-self.rot_range, self.rot_range, self.rot_steps)
    }

    /// Integer shifts for an image of width `width`, deduplicated, ascending.
    pub fn shifts(&self, width: usize) -> Vec<i32> {
        if !self.do_translations {
            return vec![0];
        }
        let max = self.trans_range * width as f32;
        let mut s: Vec<i32> = linspace(-max, max, self.trans_steps).iter().map(|v| v.round() as i32).collect();
        s.dedup();
        s
    }

    fn validate(&self) -> Result<(), AttackError> {
        if !(self.rot_range >= 0.0 && self.trans_range >= 0.0) {
            return Err(AttackError::Param("spatial ranges must be nonnegative".into()));
        }
        if (self.do_rotations && self.rot_steps == 0) || (self.do_translations && self.trans_steps == 0) {
            return Err(AttackError::Param("spatial grid needs at least one step per enabled axis".into()));
        }
        Ok(())
    }
}

impl Default for SpatialGrid {
    fn default() -> Self {
        Self {
            do_rotations: true,
            do_translations: true,
            rot_range: Self::default_rot_range(),
            trans_range: Self::default_trans_range(),
            rot_steps: Self::default_rot_steps(),
            trans_steps: Self::default_trans_steps(),
        }
    }
}

fn linspace(lo: f32, hi: f32, n: usize) -> Vec<f32> {
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f32 / (n - 1) as f32).collect()
}

/// Rotates every channel by `angle_deg` (counter-clockwise) about the image
/// centre with bilinear resampling; samples falling outside read as zero.
pub fn rotate(image: &Tensor, angle_deg: f32) -> Tensor {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if angle_deg == 0.0 {
        return image.clone();
    }
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
    let src = image.data();
    let fetch = |ch: usize, y: i64, x: i64| -> f32 {
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            0.0
        } else {
            src[(ch * h + y as usize) * w + x as usize]
        }
    };
    let mut out = vec![0.0; c * h * w];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f32 - cy, x as f32 - cx);
            // inverse map: output pixel ← source location
            let sx = cos * dx - sin * dy + cx;
            let sy = sin * dx + cos * dy + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            for ch in 0..c {
                let top = fetch(ch, y0, x0) * (1.0 - fx) + fetch(ch, y0, x0 + 1) * fx;
                let bot = fetch(ch, y0 + 1, x0) * (1.0 - fx) + fetch(ch, y0 + 1, x0 + 1) * fx;
                out[(ch * h + y) * w + x] = (top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out).expect("same shape")
}

/// Shifts content right by `dx` and down by `dy` pixels, zero-filling.
pub fn translate(image: &Tensor, dx: i32, dy: i32) -> Tensor {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if dx == 0 && dy == 0 {
        return image.clone();
    }
    let src = image.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = y as i64 - dy as i64;
            if sy < 0 || sy >= h as i64 {
                continue;
            }
            for x in 0..w {
                let sx = x as i64 - dx as i64;
                if sx >= 0 && sx < w as i64 {
                    out[(ch * h + y) * w + x] = src[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out).expect("same shape")
}

/// Tries the identity first, then every grid point in rotation-major,
/// ascending order (rotation, then vertical, then horizontal shift). The first
/// transform that changes the label away from `label` wins.
pub fn spatial_attack<O: Oracle + ?Sized>(
    model: &O,
    x: &Tensor,
    label: usize,
    grid: &SpatialGrid,
) -> Result<AttackOutcome, AttackError> {
    grid.validate()?;
    let oracle = QueryCounter::new(model);
    if oracle.label(x)? != label {
        return Ok(AttackOutcome { x_adv: x.clone(), success: true, queries: oracle.queries(), param: AttackParam::Identity });
    }
    let shifts = grid.shifts(x.shape()[2]);
    for angle in grid.angles() {
        let rotated = rotate(x, angle);
        for &dy in &shifts {
            for &dx in &shifts {
                if angle == 0.0 && dx == 0 && dy == 0 {
                    continue;
                }
                let cand = translate(&rotated, dx, dy);
                if oracle.label(&cand)? != label {
                    return Ok(AttackOutcome {
                        x_adv: cand,
                        success: true,
                        queries: oracle.queries(),
                        param: AttackParam::Transform { angle_deg: angle, dx, dy },
                    });
                }
            }
        }
    }
    Ok(AttackOutcome { x_adv: x.clone(), success: false, queries: oracle.queries(), param: AttackParam::Identity })
}
