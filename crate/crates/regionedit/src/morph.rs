//! Binary morphology with elliptical structuring elements, and circular shifts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::Grid;

/// Half-width of the elliptical element's row at vertical offset `dy`:
/// the element is every `(dy, dx)` with `dx^2 + dy^2 <= k^2`.
fn half_width(k: usize, dy: usize) -> usize {
    let rem = k * k - dy * dy;
    let mut r = (rem as f64).sqrt() as usize;
    while (r + 1) * (r + 1) <= rem {
        r += 1;
    }
    while r * r > rem {
        r -= 1;
    }
    r
}

/// Per-row prefix counts of set cells: `pre[y][x]` = ones in `row y, 0..x`.
fn prefix(m: &Grid) -> Vec<Vec<usize>> {
    (0..m.h)
        .map(|y| {
            let mut p = vec![0usize; m.w + 1];
            for x in 0..m.w {
                p[x + 1] = p[x] + (m.at(y, x) == 1.0) as usize;
            }
            p
        })
        .collect()
}

/// Dilation; cells outside the grid count as unset.
pub fn dilate(m: &Grid, k: usize) -> Grid {
    let pre = prefix(m);
    let spans: Vec<usize> = (0..=k).map(|dy| half_width(k, dy)).collect();
    Grid::from_fn(m.h, m.w, |y, x| {
        for dy in -(k as isize)..=(k as isize) {
            let yy = y as isize + dy;
            if yy < 0 || yy >= m.h as isize {
                continue;
            }
            let r = spans[dy.unsigned_abs()];
            let lo = x.saturating_sub(r);
            let hi = (x + r + 1).min(m.w);
            if pre[yy as usize][hi] > pre[yy as usize][lo] {
                return 1.0;
            }
        }
        0.0
    })
}

/// Erosion; cells outside the grid count as set, so the border itself does
/// not erode the mask.
pub fn erode(m: &Grid, k: usize) -> Grid {
    let pre = prefix(m);
    let spans: Vec<usize> = (0..=k).map(|dy| half_width(k, dy)).collect();
    Grid::from_fn(m.h, m.w, |y, x| {
        for dy in -(k as isize)..=(k as isize) {
            let yy = y as isize + dy;
            if yy < 0 || yy >= m.h as isize {
                continue;
            }
            let r = spans[dy.unsigned_abs()];
            let lo = x.saturating_sub(r);
            let hi = (x + r + 1).min(m.w);
            if pre[yy as usize][hi] - pre[yy as usize][lo] != hi - lo {
                return 0.0;
            }
        }
        1.0
    })
}

/// Circular roll: the value at `(y, x)` moves to `(y + dy, x + dx)` modulo the grid.
pub fn roll(m: &Grid, dx: isize, dy: isize) -> Grid {
    let (h, w) = (m.h as isize, m.w as isize);
    let mut out = Grid::zeros(m.h, m.w);
    for y in 0..h {
        for x in 0..w {
            let (ty, tx) = ((y + dy).rem_euclid(h), (x + dx).rem_euclid(w));
            out.set(ty as usize, tx as usize, m.at(y as usize, x as usize));
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbFamily {
    Erode,
    Dilate,
    ShiftX,
    ShiftY,
    ShiftXy,
}

impl PerturbFamily {
    pub fn name(self) -> &'static str {
        match self {
            PerturbFamily::Erode => "erode",
            PerturbFamily::Dilate => "dilate",
            PerturbFamily::ShiftX => "shift-x",
            PerturbFamily::ShiftY => "shift-y",
            PerturbFamily::ShiftXy => "shift-xy",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub family: PerturbFamily,
    /// Generation-grid pixels.
    pub magnitude: usize,
}

impl PerturbationSpec {
    pub fn label(&self) -> String {
        format!("{}-{}", self.family.name(), self.magnitude)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Perturbed {
    pub mask: Grid,
    /// Erosion removed every set cell; callers skip and count such samples.
    pub emptied: bool,
}

pub fn morph_perturb(m_hi: &Grid, spec: PerturbationSpec) -> Result<Perturbed> {
    if spec.magnitude == 0 {
        return Err(Error::Mask("perturbation magnitude must be positive".into()));
    }
    if !m_hi.is_binary() {
        return Err(Error::Mask("perturbation input must be binary".into()));
    }
    let k = spec.magnitude;
    let s = k as isize;
    let mask = match spec.family {
        PerturbFamily::Erode => erode(m_hi, k),
        PerturbFamily::Dilate => dilate(m_hi, k),
        PerturbFamily::ShiftX => roll(m_hi, s, 0),
        PerturbFamily::ShiftY => roll(m_hi, 0, s),
        PerturbFamily::ShiftXy => roll(m_hi, s, s),
    };
    let emptied = spec.family == PerturbFamily::Erode && !m_hi.is_empty_mask() && mask.is_empty_mask();
    Ok(Perturbed { mask, emptied })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pixel_dilates_to_plus() {
        let mut m = Grid::zeros(5, 5);
        m.set(2, 2, 1.0);
        let d = dilate(&m, 1);
        assert_eq!(d.count(), 5);
        for (y, x) in [(1, 2), (3, 2), (2, 1), (2, 3), (2, 2)] {
            assert_eq!(d.at(y, x), 1.0);
        }
    }

    #[test]
    fn radius_zero_is_identity() {
        let m = Grid::from_fn(6, 6, |y, x| ((x * 7 + y * 3) % 4 == 0) as u8 as f32);
        assert_eq!(dilate(&m, 0), m);
        assert_eq!(erode(&m, 0), m);
    }

    #[test]
    fn full_period_shift_is_identity() {
        let m = Grid::from_fn(4, 6, |y, x| ((x + y) % 3 == 0) as u8 as f32);
        assert_eq!(roll(&m, 6, 0), m);
        assert_eq!(roll(&m, 0, -4), m);
    }

    #[test]
    fn erosion_of_small_rect_is_flagged() {
        let m = Grid::from_fn(16, 16, |y, x| ((4..7).contains(&y) && (4..10).contains(&x)) as u8 as f32);
        let p = morph_perturb(&m, PerturbationSpec { family: PerturbFamily::Erode, magnitude: 4 }).unwrap();
        assert!(p.emptied);
        assert!(morph_perturb(&m, PerturbationSpec { family: PerturbFamily::Erode, magnitude: 0 }).is_err());
    }
}
