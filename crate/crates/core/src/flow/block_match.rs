use super::plane::Plane;
use crate::error::{Error, Result};

/// Exhaustive integer block matching: for every pixel, the displacement
/// `(dx, dy)` within `±radius` minimizing the sum of absolute differences
/// between the `patch x patch` window around `a(x, y)` and the window around
/// `b(x + dx, y + dy)`. Samples clamp to the border. Ties go to the smallest
/// displacement length, then to row-major order of `(dy, dx)`.
pub fn block_match(a: &Plane, b: &Plane, radius: usize, patch: usize) -> Result<(Vec<i32>, Vec<i32>)> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::shape(format!(
            "frames differ in size: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    if radius == 0 {
        return Err(Error::input("block-match radius must be >= 1"));
    }
    if patch.is_multiple_of(2) {
        return Err(Error::input("block-match patch size must be odd"));
    }
    let r = radius as isize;
    let half = (patch / 2) as isize;
    let mut candidates: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
        .collect();
    candidates.sort_by_key(|&(dx, dy)| (dx * dx + dy * dy, dy, dx));

    let n = a.width * a.height;
    let mut flow_x = vec![0i32; n];
    let mut flow_y = vec![0i32; n];
    for y in 0..a.height as isize {
        for x in 0..a.width as isize {
            let mut best = f64::INFINITY;
            let mut best_d = (0, 0);
            for &(dx, dy) in &candidates {
                let mut cost = 0.0;
                for j in -half..=half {
                    for i in -half..=half {
                        cost += (a.clamped(x + i, y + j) - b.clamped(x + dx + i, y + dy + j)).abs();
                    }
                }
                if cost < best {
                    best = cost;
                    best_d = (dx, dy);
                }
            }
            let idx = y as usize * a.width + x as usize;
            flow_x[idx] = best_d.0 as i32;
            flow_y[idx] = best_d.1 as i32;
        }
    }
    Ok((flow_x, flow_y))
}
