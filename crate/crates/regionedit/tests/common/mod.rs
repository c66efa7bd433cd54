//! Helpers shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regionedit::latent::Grid;
use regionedit::morph::{PerturbFamily, PerturbationSpec};

/// Per-pixel morphology straight from the definition: a disk of radius `k`,
/// outside cells unset for dilation and set for erosion, shifts wrap.
pub fn brute_force(m: &Grid, spec: PerturbationSpec) -> Grid {
    let k = spec.magnitude as isize;
    let (h, w) = (m.h as isize, m.w as isize);
    let get = |y: isize, x: isize, outside: f32| {
        if y < 0 || x < 0 || y >= h || x >= w {
            outside
        } else {
            m.at(y as usize, x as usize)
        }
    };
    let disk = |y: usize, x: usize, outside: f32, want_any: bool| {
        let mut any = false;
        let mut all = true;
        for dy in -k..=k {
            for dx in -k..=k {
                if dx * dx + dy * dy <= k * k {
                    let v = get(y as isize + dy, x as isize + dx, outside) == 1.0;
                    any |= v;
                    all &= v;
                }
            }
        }
        if want_any { any } else { all }
    };
    Grid::from_fn(m.h, m.w, |y, x| {
        let (yi, xi) = (y as isize, x as isize);
        let v = match spec.family {
            PerturbFamily::Dilate => disk(y, x, 0.0, true),
            PerturbFamily::Erode => disk(y, x, 1.0, false),
            PerturbFamily::ShiftX => m.at(y, (xi - k).rem_euclid(w) as usize) == 1.0,
            PerturbFamily::ShiftY => m.at((yi - k).rem_euclid(h) as usize, x) == 1.0,
            PerturbFamily::ShiftXy => m.at((yi - k).rem_euclid(h) as usize, (xi - k).rem_euclid(w) as usize) == 1.0,
        };
        v as u8 as f32
    })
}

/// Rectangles, unions of discs, or salt noise on an `n x n` grid.
pub fn random_mask(n: usize, seed: u64) -> Grid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match seed % 3 {
        0 => {
            let (y0, x0) = (rng.random_range(0..n), rng.random_range(0..n));
            let (y1, x1) = (rng.random_range(y0..n), rng.random_range(x0..n));
            Grid::from_fn(n, n, |y, x| (y >= y0 && y <= y1 && x >= x0 && x <= x1) as u8 as f32)
        }
        1 => {
            let discs: Vec<(f64, f64, f64)> = (0..rng.random_range(1..4))
                .map(|_| (rng.random_range(0.0..n as f64), rng.random_range(0.0..n as f64), rng.random_range(1.0..n as f64 / 3.0)))
                .collect();
            Grid::from_fn(n, n, |y, x| {
                discs.iter().any(|&(cy, cx, r)| (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r) as u8 as f32
            })
        }
        _ => {
            let p: f64 = rng.random_range(0.05..0.7);
            let cells: Vec<f32> = (0..n * n).map(|_| rng.random_bool(p) as u8 as f32).collect();
            Grid::new(n, n, cells).unwrap()
        }
    }
}

pub const FAMILIES: [PerturbFamily; 5] =
    [PerturbFamily::Erode, PerturbFamily::Dilate, PerturbFamily::ShiftX, PerturbFamily::ShiftY, PerturbFamily::ShiftXy];
