//! Every op's analytic gradient against central differences, 20 random
//! trials per op, in f64.

use diffcore::{grad_check, Graph, Init, ParamStore, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRIALS: u64 = 20;
const TOL: f64 = 1e-4;
const EPS: f64 = 1e-6;

/// Builds `sum(op_output * R)` for a fixed random `R` so every output
/// element carries a distinct weight.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = diffcore::seeded_init::<f64>(g.shape(y), seed ^ 0xabc, Init::Normal { std: 1.0 });
    let r = g.input(r);
    let p = g.mul(y, r)?;
    Ok(g.sum_all(p))
}

fn check<F>(name: &str, mut build: F)
where
    F: FnMut(&mut ChaCha8Rng, u64) -> (ParamStore<f64>, Box<dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>>),
{
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(trial * 7919 + name.len() as u64);
        let (mut store, f) = build(&mut rng, trial);
        let report = grad_check(&mut store, EPS, |g, s| {
            let y = f(g, s)?;
            weighted_sum(g, y, trial)
        })
        .unwrap_or_else(|e| panic!("{name} trial {trial}: {e}"));
        assert!(
            report.max_rel_error <= TOL,
            "{name} trial {trial}: rel err {} at {}",
            report.max_rel_error,
            report.worst_param
        );
    }
}

fn store_with(shapes: &[(&str, Vec<usize>)], seed: u64) -> ParamStore<f64> {
    let mut s = ParamStore::new(seed);
    for (n, sh) in shapes {
        s.add(n, sh, Init::Normal { std: 1.0 }).unwrap();
    }
    s
}

macro_rules! p {
    ($g:expr, $s:expr, $name:expr) => {
        $g.param($s, $s.id($name).unwrap())
    };
}

#[test]
fn matmul_shared_and_batched() {
    check("matmul", |rng, seed| {
        let (b, m, k, n) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..5), rng.random_range(1..4));
        let batched = rng.random_bool(0.5);
        let bshape = if batched { vec![b, k, n] } else { vec![k, n] };
        let s = store_with(&[("a", vec![b, m, k]), ("b", bshape)], seed);
        (s, Box::new(|g, s| {
            let a = p!(g, s, "a");
            let b = p!(g, s, "b");
            g.matmul(a, b)
        }))
    });
}

#[test]
fn broadcast_binary_ops() {
    check("binary", |rng, seed| {
        let (b, l, d) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4));
        let rhs = match rng.random_range(0..4) {
            0 => vec![b, l, d],
            1 => vec![d],
            2 => vec![b, l, 1],
            _ => vec![1, l, 1],
        };
        let kind = rng.random_range(0..4);
        let s = store_with(&[("a", vec![b, l, d]), ("b", rhs)], seed);
        (s, Box::new(move |g, s| {
            let a = p!(g, s, "a");
            let b = p!(g, s, "b");
            match kind {
                0 => g.add(a, b),
                1 => g.sub(b, a),
                2 => g.mul(a, b),
                _ => {
                    let bb = g.mul(b, b)?;
                    let den = g.add_scalar(bb, 0.5);
                    g.div(a, den)
                }
            }
        }))
    });
}

#[test]
fn scalar_and_unary_ops() {
    check("unary", |rng, seed| {
        let n = rng.random_range(1..7);
        let kind = rng.random_range(0..5);
        let s = store_with(&[("x", vec![n])], seed);
        (s, Box::new(move |g, s| {
            let x = p!(g, s, "x");
            Ok(match kind {
                0 => g.sigmoid(x),
                1 => g.gelu(x),
                2 => {
                    let xx = g.mul(x, x)?;
                    let pos = g.add_scalar(xx, 0.5);
                    g.ln(pos)
                }
                3 => g.scale(x, -1.7),
                _ => {
                    // Inputs ~N(0,1); bounds chosen so no element sits on a kink.
                    let y = g.clamp(x, -0.999_71, 0.999_73);
                    g.add_scalar(y, 2.0)
                }
            })
        }))
    });
}

#[test]
fn layer_norm_with_affine() {
    check("layer_norm", |rng, seed| {
        let (r, d) = (rng.random_range(1..4), rng.random_range(2..6));
        let s = store_with(&[("x", vec![r, d]), ("g", vec![d]), ("b", vec![d])], seed);
        (s, Box::new(|g, s| {
            let x = p!(g, s, "x");
            let gm = p!(g, s, "g");
            let bt = p!(g, s, "b");
            g.layer_norm(x, Some(gm), Some(bt), 1e-6)
        }))
    });
}

#[test]
fn softmax_rows() {
    check("softmax", |rng, seed| {
        let (r, d) = (rng.random_range(1..4), rng.random_range(1..6));
        let s = store_with(&[("x", vec![r, d])], seed);
        (s, Box::new(|g, s| {
            let x = p!(g, s, "x");
            g.softmax(x)
        }))
    });
}

#[test]
fn multi_head_attention() {
    check("attention", |rng, seed| {
        let heads = rng.random_range(1..4);
        let d = heads * rng.random_range(1..3);
        let (b, lq, lk) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..5));
        let s = store_with(&[("q", vec![b, lq, d]), ("k", vec![b, lk, d]), ("v", vec![b, lk, d])], seed);
        (s, Box::new(move |g, s| {
            let q = p!(g, s, "q");
            let k = p!(g, s, "k");
            let v = p!(g, s, "v");
            g.attention(q, k, v, heads)
        }))
    });
}

#[test]
fn embedding_lookup() {
    check("embedding", |rng, seed| {
        let (v, d) = (rng.random_range(2..6), rng.random_range(1..4));
        let ids: Vec<usize> = (0..rng.random_range(1..6)).map(|_| rng.random_range(0..v)).collect();
        let s = store_with(&[("t", vec![v, d])], seed);
        (s, Box::new(move |g, s| {
            let t = p!(g, s, "t");
            g.embedding(t, &ids)
        }))
    });
}

#[test]
fn reductions() {
    check("reductions", |rng, seed| {
        let shape = vec![rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4)];
        let axis = rng.random_range(0..3);
        let kind = rng.random_range(0..4);
        let s = store_with(&[("x", shape)], seed);
        (s, Box::new(move |g, s| {
            let x = p!(g, s, "x");
            match kind {
                0 => Ok(g.sum_all(x)),
                1 => Ok(g.mean_all(x)),
                2 => g.sum_axis(x, axis, true),
                _ => g.mean_axis(x, axis, false),
            }
        }))
    });
}

#[test]
fn layout_ops() {
    check("layout", |rng, seed| {
        let (a, b, c) = (rng.random_range(1..3), rng.random_range(2..4), rng.random_range(1..4));
        let axis = rng.random_range(0..3);
        let kind = rng.random_range(0..4);
        let s = store_with(&[("x", vec![a, b, c]), ("y", vec![a, b, c])], seed);
        (s, Box::new(move |g, s| {
            let x = p!(g, s, "x");
            let y = p!(g, s, "y");
            match kind {
                0 => g.concat(&[x, y, x], axis),
                1 => g.reshape(x, &[a * b, c]),
                2 => g.slice(x, 1, 1, b - 1),
                _ => g.permute(x, &[2, 0, 1]),
            }
        }))
    });
}

#[test]
fn spatial_resampling() {
    check("resample", |rng, seed| {
        let (b, h, w, c) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..3));
        let f = rng.random_range(1..3);
        let up = rng.random_bool(0.5);
        let s = store_with(&[("x", vec![b, h * f, w * f, c])], seed);
        let (oh, ow) = (rng.random_range(1..7), rng.random_range(1..7));
        (s, Box::new(move |g, s| {
            let x = p!(g, s, "x");
            if up {
                g.upsample_bilinear(x, oh, ow)
            } else {
                g.avg_pool2d(x, f, f)
            }
        }))
    });
}

#[test]
fn conv3x3() {
    check("conv3x3", |rng, seed| {
        let (b, h, w, cin, cout) = (
            rng.random_range(1..3),
            rng.random_range(1..5),
            rng.random_range(1..5),
            rng.random_range(1..3),
            rng.random_range(1..3),
        );
        let s = store_with(&[("x", vec![b, h, w, cin]), ("w", vec![9 * cin, cout])], seed);
        (s, Box::new(|g, s| {
            let x = p!(g, s, "x");
            let w = p!(g, s, "w");
            g.conv3x3(x, w)
        }))
    });
}

#[test]
fn conv3x3_matches_direct_convolution() {
    let x = diffcore::seeded_init::<f64>(&[1, 3, 4, 2], 5, Init::Normal { std: 1.0 });
    let w = diffcore::seeded_init::<f64>(&[18, 3], 6, Init::Normal { std: 1.0 });
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let wv = g.input(w.clone());
    let y = g.conv3x3(xv, wv).unwrap();
    let y = g.value(y).data().to_vec();
    let (h, wd, cin, cout) = (3usize, 4usize, 2usize, 3usize);
    for yy in 0..h {
        for xx in 0..wd {
            for co in 0..cout {
                let mut acc = 0.0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (sy, sx) = (yy as isize + ky - 1, xx as isize + kx - 1);
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            let xi = ((sy as usize) * wd + sx as usize) * cin + ci;
                            let wi = (((ky * 3 + kx) as usize) * cin + ci) * cout + co;
                            acc += x.data()[xi] * w.data()[wi];
                        }
                    }
                }
                let got = y[(yy * wd + xx) * cout + co];
                assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
            }
        }
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut s = ParamStore::<f32>::new(9);
        let w = s.add("w", &[8, 8], Init::NormalScaled).unwrap();
        let mut g = Graph::new();
        let x = g.input(diffcore::seeded_init(&[2, 5, 8], 3, Init::Normal { std: 1.0 }));
        let wv = g.param(&s, w);
        let q = g.matmul(x, wv).unwrap();
        let a = g.attention(q, x, x, 2).unwrap();
        let n = g.layer_norm(a, None, None, 1e-6).unwrap();
        let l = g.mean_all(n);
        let grads = g.backward(l).unwrap().params(&g, &s);
        (g.value(n).clone(), grads.get(w).clone())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert!(a.bit_eq(&b));
    assert!(ga.bit_eq(&gb));
    let _ = Tensor::<f32>::zeros(&[1]);
}
