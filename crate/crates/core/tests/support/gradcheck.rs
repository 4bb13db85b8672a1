#![allow(dead_code)]

//! Analytic gradients of the engine against central finite differences of an
//! independent f64 reference implementation of each operation. Each suite
//! returns the largest relative error per operation over its instances.

use std::collections::BTreeMap;

use cocktail_core::autodiff::{Graph, Var};
use cocktail_core::backbone::attention::{cross_attention, AttnCtl};
use cocktail_core::nn::Fwd;
use cocktail_core::params::Binder;
use cocktail_core::{controlnorm, BlockId, ParamStore, Tensor, EPS_STD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-3;
pub const TOL: f64 = 1e-3;
pub const INSTANCES: u64 = 20;

/// f64 tensor used by the reference implementations.
#[derive(Clone, Debug)]
struct R {
    shape: Vec<usize>,
    d: Vec<f64>,
}

impl R {
    fn new(shape: &[usize], d: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), d.len());
        Self { shape: shape.to_vec(), d }
    }

    fn of(t: &Tensor) -> Self {
        Self::new(t.shape(), t.data().iter().map(|&v| v as f64).collect())
    }

    fn chw(&self) -> (usize, usize, usize) {
        (self.shape[0], self.shape[1], self.shape[2])
    }

    fn rc(&self) -> (usize, usize) {
        (self.shape[0], self.shape[1])
    }

    fn zip(&self, o: &R, f: impl Fn(f64, f64) -> f64) -> R {
        assert_eq!(self.shape, o.shape);
        R::new(&self.shape, self.d.iter().zip(&o.d).map(|(&a, &b)| f(a, b)).collect())
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> R {
        R::new(&self.shape, self.d.iter().map(|&a| f(a)).collect())
    }

    fn reshape(&self, shape: &[usize]) -> R {
        R::new(shape, self.d.clone())
    }
}

mod reference {
    use super::R;

    pub fn per_channel(x: &R, v: &R, f: impl Fn(f64, f64) -> f64) -> R {
        let c = x.shape[0];
        let n = x.d.len() / c;
        R::new(&x.shape, x.d.iter().enumerate().map(|(i, &a)| f(a, v.d[i / n])).collect())
    }

    pub fn add_row(x: &R, v: &R) -> R {
        let (_, c) = x.rc();
        R::new(&x.shape, x.d.iter().enumerate().map(|(i, &a)| a + v.d[i % c]).collect())
    }

    pub fn transpose(x: &R) -> R {
        let (r, c) = x.rc();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x.d[i * c + j];
            }
        }
        R::new(&[c, r], out)
    }

    pub fn matmul(a: &R, b: &R) -> R {
        let (m, k) = a.rc();
        let (k2, n) = b.rc();
        assert_eq!(k, k2);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = (0..k).map(|p| a.d[i * k + p] * b.d[p * n + j]).sum();
            }
        }
        R::new(&[m, n], out)
    }

    pub fn matmul_t(a: &R, ta: bool, b: &R, tb: bool) -> R {
        let a = if ta { transpose(a) } else { a.clone() };
        let b = if tb { transpose(b) } else { b.clone() };
        matmul(&a, &b)
    }

    pub fn conv2d(x: &R, w: &R, b: Option<&R>, stride: usize, pad: usize) -> R {
        let (ci, h, wd) = x.chw();
        let (co, k) = (w.shape[0], w.shape[2]);
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; co * oh * ow];
        for o in 0..co {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = b.map_or(0.0, |b| b.d[o]);
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += w.d[((o * ci + c) * k + ky) * k + kx] * x.d[(c * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    out[(o * oh + y) * ow + xx] = s;
                }
            }
        }
        R::new(&[co, oh, ow], out)
    }

    pub fn silu(x: &R) -> R {
        x.map(|v| v / (1.0 + (-v).exp()))
    }

    pub fn softmax_rows(x: &R) -> R {
        let (_, c) = x.rc();
        let mut out = Vec::with_capacity(x.d.len());
        for row in x.d.chunks(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            out.extend(e.iter().map(|v| v / z));
        }
        R::new(&x.shape, out)
    }

    fn mean_var(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        (m, xs.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n)
    }

    pub fn group_norm(x: &R, groups: usize, eps: f64) -> R {
        let m = x.d.len() / groups;
        let mut out = Vec::with_capacity(x.d.len());
        for xs in x.d.chunks(m) {
            let (mean, var) = mean_var(xs);
            out.extend(xs.iter().map(|v| (v - mean) / (var + eps).sqrt()));
        }
        R::new(&x.shape, out)
    }

    pub fn channel_mean(x: &R) -> R {
        let c = x.shape[0];
        let n = x.d.len() / c;
        R::new(&[c], x.d.chunks(n).map(|xs| mean_var(xs).0).collect())
    }

    pub fn channel_std(x: &R, eps: f64) -> R {
        let c = x.shape[0];
        let n = x.d.len() / c;
        R::new(&[c], x.d.chunks(n).map(|xs| (mean_var(xs).1 + eps).sqrt()).collect())
    }

    pub fn resize_nearest(x: &R, h: usize, w: usize) -> R {
        let (c, sh, sw) = x.chw();
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out[(ch * h + y) * w + xx] = x.d[(ch * sh + y * sh / h) * sw + xx * sw / w];
                }
            }
        }
        R::new(&[c, h, w], out)
    }

    pub fn concat(xs: &[R]) -> R {
        let mut shape = xs[0].shape.clone();
        shape[0] = xs.iter().map(|x| x.shape[0]).sum();
        R::new(&shape, xs.iter().flat_map(|x| x.d.iter().copied()).collect())
    }

    pub fn slice_cols(x: &R, start: usize, len: usize) -> R {
        let (r, c) = x.rc();
        R::new(&[r, len], x.d.chunks(c).flat_map(|row| row[start..start + len].to_vec()).collect())
    }

    pub fn concat_cols(xs: &[R]) -> R {
        let r = xs[0].shape[0];
        let total: usize = xs.iter().map(|x| x.shape[1]).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for x in xs {
                let c = x.shape[1];
                out.extend_from_slice(&x.d[i * c..(i + 1) * c]);
            }
        }
        R::new(&[r, total], out)
    }

    pub fn embedding(table: &R, ids: &[usize]) -> R {
        let d = table.shape[1];
        R::new(&[ids.len(), d], ids.iter().flat_map(|&i| table.d[i * d..(i + 1) * d].to_vec()).collect())
    }

    pub fn linear(x: &R, w: &R, b: &R) -> R {
        add_row(&matmul(x, w), b)
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.5..1.5))
}

/// Builds the op under test on `g` from leaves and returns its output.
type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> Var + 'a;
/// The same op on f64 inputs.
type Oracle<'a> = dyn Fn(&[R]) -> R + 'a;

/// Largest `|analytic − numeric|`, relative to the largest numeric
/// gradient magnitude, of the projected loss `Σ r ⊙ op(inputs)`.
fn check(rng: &mut ChaCha8Rng, inputs: &[Tensor], build: &Build, oracle: &Oracle) -> f64 {
    let mut g = Graph::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let y = build(&mut g, &leaves);
    let r = rand_tensor(rng, g.shape(y));
    let rv = g.constant(r.clone());
    let p = g.mul(y, rv).unwrap();
    let loss = g.sum(p);
    let grads = g.backward(loss).unwrap();

    let r = R::of(&r);
    let refs: Vec<R> = inputs.iter().map(R::of).collect();
    let objective = |xs: &[R]| -> f64 { oracle(xs).d.iter().zip(&r.d).map(|(a, b)| a * b).sum() };
    let base = oracle(&refs);
    let got = R::of(g.value(y));
    for (a, b) in base.d.iter().zip(&got.d) {
        assert!((a - b).abs() < 1e-3 * (1.0 + a.abs()), "forward mismatch {a} vs {b}");
    }

    let mut worst: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = grads.raw(*leaf).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let mut xs = refs.clone();
        for i in 0..inputs[k].len() {
            let x0 = xs[k].d[i];
            xs[k].d[i] = x0 + STEP;
            let up = objective(&xs);
            xs[k].d[i] = x0 - STEP;
            let down = objective(&xs);
            xs[k].d[i] = x0;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max((analytic[i] as f64 - numeric).abs());
            scale = scale.max(numeric.abs());
        }
    }
    worst / scale.max(1e-8)
}

fn run(out: &mut Vec<(String, f64)>, name: &str, mut instance: impl FnMut(&mut ChaCha8Rng) -> f64) {
    let mut max: f64 = 0.0;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
        let e = instance(&mut rng);
        max = if e.is_finite() { max.max(e) } else { f64::INFINITY };
    }
    out.push((name.to_string(), max));
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.gen_range(1..=3), rng.gen_range(2..=4), rng.gen_range(2..=4))
}

pub fn elementwise_ops() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    type Bin = fn(&mut Graph, Var, Var) -> cocktail_core::Result<Var>;
    let cases: [(&str, Bin, fn(f64, f64) -> f64); 3] = [
        ("add", Graph::add, |a, b| a + b),
        ("sub", Graph::sub, |a, b| a - b),
        ("mul", Graph::mul, |a, b| a * b),
    ];
    for (name, op, f) in cases {
        run(&mut out, name, |rng| {
            let (c, h, w) = dims(rng);
            let a = rand_tensor(rng, &[c, h, w]);
            let b = rand_tensor(rng, &[c, h, w]);
            check(rng, &[a, b], &|g, v| op(g, v[0], v[1]).unwrap(), &|x| x[0].zip(&x[1], f))
        });
    }
    run(&mut out, "scale", |rng| {
        let s = rng.gen_range(-2.0f32..2.0);
        let a = rand_tensor(rng, &[3, 5]);
        check(rng, &[a], &|g, v| g.scale(v[0], s), &|x| x[0].map(|a| a * s as f64))
    });
    run(&mut out, "silu", |rng| {
        let (c, h, w) = dims(rng);
        let a = rand_tensor(rng, &[c, h, w]);
        check(rng, &[a], &|g, v| g.silu(v[0]), &|x| reference::silu(&x[0]))
    });
    out
}

pub fn broadcast_ops() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    run(&mut out, "add_channel", |rng| {
        let (c, h, w) = dims(rng);
        let ins = [rand_tensor(rng, &[c, h, w]), rand_tensor(rng, &[c])];
        check(rng, &ins, &|g, v| g.add_channel(v[0], v[1]).unwrap(), &|x| {
            reference::per_channel(&x[0], &x[1], |a, b| a + b)
        })
    });
    run(&mut out, "mul_channel", |rng| {
        let (c, h, w) = dims(rng);
        let ins = [rand_tensor(rng, &[c, h, w]), rand_tensor(rng, &[c])];
        check(rng, &ins, &|g, v| g.mul_channel(v[0], v[1]).unwrap(), &|x| {
            reference::per_channel(&x[0], &x[1], |a, b| a * b)
        })
    });
    run(&mut out, "add_row", |rng| {
        let (_, r, c) = dims(rng);
        let ins = [rand_tensor(rng, &[r, c]), rand_tensor(rng, &[c])];
        check(rng, &ins, &|g, v| g.add_row(v[0], v[1]).unwrap(), &|x| reference::add_row(&x[0], &x[1]))
    });
    out
}

pub fn matmul_all_transpositions() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        run(&mut out, &format!("matmul ta={ta} tb={tb}"), |rng| {
            let (m, k, n) = (rng.gen_range(1..=4), rng.gen_range(1..=5), rng.gen_range(1..=4));
            let a = rand_tensor(rng, &if ta { [k, m] } else { [m, k] });
            let b = rand_tensor(rng, &if tb { [n, k] } else { [k, n] });
            check(rng, &[a, b], &|g, v| g.matmul_t(v[0], ta, v[1], tb).unwrap(), &|x| {
                reference::matmul_t(&x[0], ta, &x[1], tb)
            })
        });
    }
    out
}

pub fn conv2d_geometries() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for (k, stride, pad, bias) in [(3, 1, 1, true), (3, 2, 1, true), (1, 1, 0, true), (1, 1, 0, false), (3, 1, 0, false)] {
        run(&mut out, &format!("conv k={k} s={stride} p={pad} bias={bias}"), |rng| {
            let (ci, co) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let (h, w) = (rng.gen_range(3..=6), rng.gen_range(3..=6));
            let mut ins = vec![rand_tensor(rng, &[ci, h, w]), rand_tensor(rng, &[co, ci, k, k])];
            if bias {
                ins.push(rand_tensor(rng, &[co]));
            }
            check(
                rng,
                &ins,
                &|g, v| g.conv2d(v[0], v[1], v.get(2).copied(), stride, pad).unwrap(),
                &|x| reference::conv2d(&x[0], &x[1], x.get(2), stride, pad),
            )
        });
    }
    out
}

pub fn normalization_ops() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    run(&mut out, "softmax_rows", |rng| {
        let (_, r, c) = dims(rng);
        let a = rand_tensor(rng, &[r, c + 1]);
        check(rng, &[a], &|g, v| g.softmax_rows(v[0]).unwrap(), &|x| reference::softmax_rows(&x[0]))
    });
    for groups in [1, 2, 4] {
        run(&mut out, &format!("group_norm groups={groups}"), |rng| {
            let (_, h, w) = dims(rng);
            let a = rand_tensor(rng, &[4, h, w]);
            check(rng, &[a], &|g, v| g.group_norm(v[0], groups, EPS_STD).unwrap(), &|x| {
                reference::group_norm(&x[0], groups, EPS_STD)
            })
        });
    }
    run(&mut out, "channel_mean", |rng| {
        let (c, h, w) = dims(rng);
        let a = rand_tensor(rng, &[c, h, w]);
        check(rng, &[a], &|g, v| g.channel_mean(v[0]).unwrap(), &|x| reference::channel_mean(&x[0]))
    });
    run(&mut out, "channel_std", |rng| {
        let (c, h, w) = dims(rng);
        let a = rand_tensor(rng, &[c, h, w]);
        check(rng, &[a], &|g, v| g.channel_std(v[0], EPS_STD).unwrap(), &|x| {
            reference::channel_std(&x[0], EPS_STD)
        })
    });
    out
}

pub fn reductions() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    run(&mut out, "sum", |rng| {
        let (c, h, w) = dims(rng);
        let a = rand_tensor(rng, &[c, h, w]);
        check(rng, &[a], &|g, v| g.sum(v[0]), &|x| R::new(&[], vec![x[0].d.iter().sum()]))
    });
    run(&mut out, "mse", |rng| {
        let (c, h, w) = dims(rng);
        let ins = [rand_tensor(rng, &[c, h, w]), rand_tensor(rng, &[c, h, w])];
        check(rng, &ins, &|g, v| g.mse(v[0], v[1]).unwrap(), &|x| {
            let n = x[0].d.len() as f64;
            R::new(&[], vec![x[0].d.iter().zip(&x[1].d).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n])
        })
    });
    out
}

pub fn layout_ops() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    run(&mut out, "reshape", |rng| {
        let (c, h, w) = dims(rng);
        let a = rand_tensor(rng, &[c, h, w]);
        check(rng, &[a], &|g, v| g.reshape(v[0], &[c * h, w]).unwrap(), &|x| x[0].reshape(&[c * h, w]))
    });
    run(&mut out, "transpose", |rng| {
        let (_, r, c) = dims(rng);
        let a = rand_tensor(rng, &[r, c]);
        check(rng, &[a], &|g, v| g.transpose(v[0]).unwrap(), &|x| reference::transpose(&x[0]))
    });
    run(&mut out, "resize_nearest", |rng| {
        let (c, h, w) = dims(rng);
        let (th, tw) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let a = rand_tensor(rng, &[c, h, w]);
        check(rng, &[a], &|g, v| g.resize_nearest(v[0], th, tw).unwrap(), &|x| {
            reference::resize_nearest(&x[0], th, tw)
        })
    });
    run(&mut out, "concat", |rng| {
        let (_, h, w) = dims(rng);
        let ins = [rand_tensor(rng, &[1, h, w]), rand_tensor(rng, &[2, h, w]), rand_tensor(rng, &[1, h, w])];
        check(rng, &ins, &|g, v| g.concat(v).unwrap(), &|x| reference::concat(x))
    });
    run(&mut out, "slice_cols", |rng| {
        let (r, c) = (rng.gen_range(1..=4), rng.gen_range(2..=6));
        let start = rng.gen_range(0..c);
        let len = rng.gen_range(1..=c - start);
        let a = rand_tensor(rng, &[r, c]);
        check(rng, &[a], &|g, v| g.slice_cols(v[0], start, len).unwrap(), &|x| {
            reference::slice_cols(&x[0], start, len)
        })
    });
    run(&mut out, "concat_cols", |rng| {
        let r = rng.gen_range(1..=4);
        let ins = [rand_tensor(rng, &[r, 2]), rand_tensor(rng, &[r, 3])];
        check(rng, &ins, &|g, v| g.concat_cols(v).unwrap(), &|x| reference::concat_cols(x))
    });
    run(&mut out, "embedding", |rng| {
        let (rows, d) = (rng.gen_range(2..=6), rng.gen_range(1..=4));
        let ids: Vec<usize> = (0..5).map(|_| rng.gen_range(0..rows)).collect();
        let table = rand_tensor(rng, &[rows, d]);
        check(rng, &[table], &|g, v| g.embedding(v[0], &ids).unwrap(), &|x| reference::embedding(&x[0], &ids))
    });
    out
}

const C: usize = 4;
const HID: usize = 3;
const COND_C: usize = 2;
const CTX: usize = 5;
const HEADS: usize = 2;
const GROUPS: usize = 2;

fn block_params(rng: &mut ChaCha8Rng) -> ParamStore {
    let mut s = ParamStore::new();
    let mut put = |name: &str, shape: &[usize], rng: &mut ChaCha8Rng| s.insert(name, rand_tensor(rng, shape));
    put("c1.w", &[C, C, 3, 3], rng);
    put("c1.b", &[C], rng);
    put("cn.trunk.w", &[HID, COND_C, 3, 3], rng);
    put("cn.trunk.b", &[HID], rng);
    put("cn.gamma.w", &[C, HID, 1, 1], rng);
    put("cn.gamma.b", &[C], rng);
    put("cn.beta.w", &[C, HID, 1, 1], rng);
    put("cn.beta.b", &[C], rng);
    put("at.n.g", &[C], rng);
    put("at.n.b", &[C], rng);
    for (p, d_in) in [("q", C), ("k", CTX), ("v", CTX), ("o", C)] {
        put(&format!("at.{p}.w"), &[d_in, C], rng);
        put(&format!("at.{p}.b"), &[C], rng);
    }
    put("c2.w", &[2, C, 3, 3], rng);
    put("c2.b", &[2], rng);
    s
}

/// conv → ControlNorm → cross-attention → conv, written directly in f64.
fn block_oracle(p: &BTreeMap<String, R>, x: &R, cond: &R, ctx: &R) -> R {
    use reference::*;
    let w = |n: &str| &p[n];
    let y = conv2d(x, w("c1.w"), Some(w("c1.b")), 1, 1);
    let (c, h, wd) = y.chw();
    let normed = group_norm(&y, c, EPS_STD);
    let cond = resize_nearest(cond, h, wd);
    let t = silu(&conv2d(&cond, w("cn.trunk.w"), Some(w("cn.trunk.b")), 1, 1));
    let gamma = conv2d(&t, w("cn.gamma.w"), Some(w("cn.gamma.b")), 1, 0);
    let beta = conv2d(&t, w("cn.beta.w"), Some(w("cn.beta.b")), 1, 0);
    let m = normed.zip(&gamma, |n, g| n + n * g).zip(&beta, |a, b| a + b);

    let n = group_norm(&m, GROUPS, EPS_STD);
    let n = per_channel(&n, w("at.n.g"), |a, b| a * b);
    let n = per_channel(&n, w("at.n.b"), |a, b| a + b);
    let tokens = transpose(&n.reshape(&[c, h * wd]));
    let q = linear(&tokens, w("at.q.w"), w("at.q.b"));
    let k = linear(ctx, w("at.k.w"), w("at.k.b"));
    let v = linear(ctx, w("at.v.w"), w("at.v.b"));
    let d = c / HEADS;
    let heads: Vec<R> = (0..HEADS)
        .map(|hd| {
            let logits = matmul_t(&slice_cols(&q, hd * d, d), false, &slice_cols(&k, hd * d, d), true)
                .map(|l| l / (d as f64).sqrt());
            matmul(&softmax_rows(&logits), &slice_cols(&v, hd * d, d))
        })
        .collect();
    let o = linear(&concat_cols(&heads), w("at.o.w"), w("at.o.b"));
    let o = transpose(&o).reshape(&[c, h, wd]);
    let a = m.zip(&o, |a, b| a + b);
    conv2d(&a, w("c2.w"), Some(w("c2.b")), 1, 1)
}

pub fn composed_block() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    run(&mut out, "composed block", |rng| {
        let (h, w) = (rng.gen_range(2..=4), rng.gen_range(2..=4));
        let params = block_params(rng);
        let x = rand_tensor(rng, &[C, h, w]);
        let cond = rand_tensor(rng, &[COND_C, 2 * h, 2 * w]);
        let ctx = rand_tensor(rng, &[3, CTX]);

        let mut g = Graph::new();
        let mut b = Binder::all_trainable(&params);
        let mut f = Fwd::new(&mut g, &mut b);
        let data = [x.clone(), cond.clone(), ctx.clone()].map(|t| f.g.leaf(t));
        let y = f.conv("c1", data[0], 1, 1).unwrap();
        let y = controlnorm::apply(&mut f, "cn", y, data[1]).unwrap();
        let mut ctl = AttnCtl::none();
        let y = cross_attention(&mut f, "at", y, data[2], HEADS, GROUPS, BlockId::Enc(0), &mut ctl).unwrap();
        let y = f.conv("c2", y, 1, 1).unwrap();
        let r = rand_tensor(rng, f.g.shape(y));
        let rv = f.g.constant(r.clone());
        let p = f.g.mul(y, rv).unwrap();
        let loss = f.g.sum(p);
        let out = R::of(g.value(y));
        let grads = g.backward(loss).unwrap();
        let pgrads = b.grads(&grads);

        let names: Vec<String> = params.names().cloned().collect();
        let mut inputs: Vec<R> = names.iter().map(|n| R::of(params.get(n).unwrap())).collect();
        let mut analytic: Vec<Vec<f32>> = names.iter().map(|n| pgrads[n].data().to_vec()).collect();
        for (t, v) in [&x, &cond, &ctx].into_iter().zip(data) {
            inputs.push(R::of(t));
            analytic.push(grads.raw(v).unwrap().to_vec());
        }
        let np = names.len();
        let r = R::of(&r);
        let objective = |xs: &[R]| -> f64 {
            let p: BTreeMap<String, R> = names.iter().cloned().zip(xs[..np].iter().cloned()).collect();
            let y = block_oracle(&p, &xs[np], &xs[np + 1], &xs[np + 2]);
            y.d.iter().zip(&r.d).map(|(a, b)| a * b).sum()
        };
        {
            let p: BTreeMap<String, R> = names.iter().cloned().zip(inputs[..np].iter().cloned()).collect();
            let want = block_oracle(&p, &inputs[np], &inputs[np + 1], &inputs[np + 2]);
            for (a, b) in want.d.iter().zip(&out.d) {
                assert!((a - b).abs() < 1e-3 * (1.0 + a.abs()), "forward mismatch {a} vs {b}");
            }
        }
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for k in 0..inputs.len() {
            for i in 0..inputs[k].d.len() {
                let x0 = inputs[k].d[i];
                inputs[k].d[i] = x0 + STEP;
                let up = objective(&inputs);
                inputs[k].d[i] = x0 - STEP;
                let down = objective(&inputs);
                inputs[k].d[i] = x0;
                let numeric = (up - down) / (2.0 * STEP);
                worst = worst.max((analytic[k][i] as f64 - numeric).abs());
                scale = scale.max(numeric.abs());
            }
        }
        worst / scale.max(1e-8)
    });
    out
}

/// Every suite in order.
pub fn all() -> Vec<(String, f64)> {
    [
        elementwise_ops,
        broadcast_ops,
        matmul_all_transpositions,
        conv2d_geometries,
        normalization_ops,
        reductions,
        layout_ops,
        composed_block,
    ]
    .iter()
    .flat_map(|suite| suite())
    .collect()
}
