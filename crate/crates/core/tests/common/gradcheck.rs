//! Central finite differences in f64 against the tape's reverse sweep.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use salcar::blocks::{self, BlockConfig, ParamSpec};
use salcar::dataset::PatchQuad;
use salcar::losses::{self, ImageTerms, LossWeights};
use salcar::network::{self, init_params, NetworkConfig};
use salcar::trainer::{batch_gradients, StepItem};
use salcar::{Exec, ParameterSet, Tape, Tensor, Var};

pub const H: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-3;
/// Differences below this are treated as exact agreement (round-off of the
/// objective divided by `2h`).
pub const ABS_FLOOR: f64 = 1e-7;

pub type Build = Box<dyn Fn(&mut Tape<'_, f64>) -> salcar::Result<Var>>;

pub fn rel_err(a: f64, n: f64) -> f64 {
    let d = (a - n).abs();
    if d <= ABS_FLOOR {
        0.0
    } else {
        d / a.abs().max(n.abs())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Values in `±[lo, hi]`, never closer than `lo` to zero.
pub fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = r.random_range(lo..hi);
        if r.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values spaced by at least `gap` in a random order.
pub fn distinct(r: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * gap).collect();
    for i in (1..n).rev() {
        v.swap(i, r.random_range(0..=i));
    }
    Tensor::new(shape, v).unwrap()
}

/// Outcome of a sweep: worst relative error over the coordinates that were
/// checked, and how many were skipped for straddling a kink.
#[derive(Clone, Copy, Debug, Default)]
pub struct Sweep {
    pub worst: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl Sweep {
    /// At most this fraction of sampled coordinates may sit on a kink.
    pub const MAX_SKIPPED: f64 = 0.2;

    pub fn ok(&self) -> bool {
        self.worst <= REL_TOL
            && (self.skipped as f64) <= Self::MAX_SKIPPED * (self.checked + self.skipped) as f64
    }

    fn record(&mut self, analytic: f64, f0: f64, fp: f64, fm: f64) {
        // A ReLU, max-pool or absolute-value kink inside [x - h, x + h] makes
        // the one-sided slopes disagree by about twice the central error.
        let (up, down) = ((fp - f0) / H, (f0 - fm) / H);
        if (up - down).abs() > REL_TOL * up.abs().max(down.abs()) + 2.0 * ABS_FLOOR {
            self.skipped += 1;
            return;
        }
        self.checked += 1;
        self.worst = self.worst.max(rel_err(analytic, (fp - fm) / (2.0 * H)));
    }

    pub fn merge(&mut self, o: Sweep) {
        self.worst = self.worst.max(o.worst);
        self.checked += o.checked;
        self.skipped += o.skipped;
    }
}

/// Central difference of `f` at coordinate `i` of parameter `id` of `work`.
pub fn probe<F: Fn(&ParameterSet<f64>) -> f64>(
    sweep: &mut Sweep,
    work: &mut ParameterSet<f64>,
    f: &F,
    f0: f64,
    id: salcar::ParamId,
    i: usize,
    analytic: f64,
) {
    let x0 = work.value(id).data()[i];
    work.value_mut(id).data_mut()[i] = x0 + H;
    let fp = f(work);
    work.value_mut(id).data_mut()[i] = x0 - H;
    let fm = f(work);
    work.value_mut(id).data_mut()[i] = x0;
    sweep.record(analytic, f0, fp, fm);
}

fn eval(ps: &ParameterSet<f64>, build: &Build, proj: &Tensor<f64>) -> f64 {
    let mut tape = Tape::with_params(ps, false);
    let y = build(&mut tape).unwrap();
    tape.value(y)
        .data()
        .iter()
        .zip(proj.data())
        .map(|(a, b)| a * b)
        .sum()
}

/// Relative errors over up to `per_param` sampled coordinates of every
/// tensor in `ps`, for the objective `sum(R * build(ps))` with random `R`.
pub fn check_tape(ps: &ParameterSet<f64>, build: &Build, seed: u64, per_param: usize) -> Sweep {
    let mut r = rng(seed ^ 0xA5A5);
    let (proj, analytic) = {
        let mut tape = Tape::with_params(ps, true);
        let y = build(&mut tape).unwrap();
        let proj = Tensor::from_fn(tape.value(y).shape(), |_| r.random_range(-1.0..1.0));
        let g = tape.backward(&[(y, &proj)]).unwrap();
        let analytic: Vec<Vec<f64>> = ps
            .ids()
            .map(|id| g.param_or_zero(id, ps.value(id).len()))
            .collect();
        (proj, analytic)
    };
    let f = |p: &ParameterSet<f64>| eval(p, build, &proj);
    let f0 = f(ps);
    let mut work = ps.clone();
    let mut sweep = Sweep::default();
    for id in ps.ids() {
        let n = ps.value(id).len();
        let picks: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            (0..per_param).map(|_| r.random_range(0..n)).collect()
        };
        for i in picks {
            probe(&mut sweep, &mut work, &f, f0, id, i, analytic[id.0][i]);
        }
    }
    sweep
}

/// Max relative error of an analytic gradient of a plain scalar function.
pub fn check_fn(x: &[f64], f: impl Fn(&[f64]) -> f64, grad: &[f64]) -> f64 {
    let mut work = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        work[i] = x[i] + H;
        let fp = f(&work);
        work[i] = x[i] - H;
        let fm = f(&work);
        work[i] = x[i];
        worst = worst.max(rel_err(grad[i], (fp - fm) / (2.0 * H)));
    }
    worst
}

fn param_set(specs: &[ParamSpec], r: &mut ChaCha8Rng) -> ParameterSet<f64> {
    let mut ps = ParameterSet::new();
    for s in specs {
        let scale = 1.5 / (s.fan_in as f64).sqrt();
        let t = Tensor::from_fn(&s.shape, |_| r.random_range(-scale..scale));
        ps.insert(s.name.clone(), t).unwrap();
    }
    ps
}

fn add(ps: &mut ParameterSet<f64>, name: &str, t: Tensor<f64>) {
    ps.insert(name, t).unwrap();
}

pub struct Case {
    pub name: &'static str,
    pub setup: fn(u64) -> (ParameterSet<f64>, Build),
}

fn tiny_net() -> NetworkConfig {
    NetworkConfig {
        patch_size: 16,
        stem: 2,
        salcar: vec![4, 4],
        splitcar: vec![4, 4],
        sal_channels: vec![2, 2],
        head_hidden: 3,
        ca_ratio: 2,
        split_count: 2,
        ..NetworkConfig::default()
    }
}

/// Every differentiable primitive, block, subnet and head.
pub fn tape_cases() -> Vec<Case> {
    vec![
        Case {
            name: "conv2d 3x3",
            setup: |s| {
                let mut r = rng(s);
                let mut ps = ParameterSet::new();
                add(
                    &mut ps,
                    "x",
                    away_from_zero(&mut r, &[2, 3, 5, 4], 0.1, 1.0),
                );
                add(
                    &mut ps,
                    "w",
                    away_from_zero(&mut r, &[4, 3, 3, 3], 0.1, 0.5),
                );
                add(&mut ps, "b", away_from_zero(&mut r, &[4], 0.1, 0.5));
                (
                    ps,
                    Box::new(|t| {
                        let (x, w, b) = (t.param("x")?, t.param("w")?, t.param("b")?);
                        t.conv2d(x, w, Some(b), 1, 1)
                    }),
                )
            },
        },
        Case {
            name: "conv2d 1x1 stride 2",
            setup: |s| {
                let mut r = rng(s);
                let mut ps = ParameterSet::new();
                add(
                    &mut ps,
                    "x",
                    away_from_zero(&mut r, &[2, 3, 6, 6], 0.1, 1.0),
                );
                add(
                    &mut ps,
                    "w",
                    away_from_zero(&mut r, &[2, 3, 1, 1], 0.1, 0.5),
                );
                add(&mut ps, "b", away_from_zero(&mut r, &[2], 0.1, 0.5));
                (
                    ps,
                    Box::new(|t| {
                        let (x, w, b) = (t.param("x")?, t.param("w")?, t.param("b")?);
                        t.conv2d(x, w, Some(b), 2, 1)
                    }),
                )
            },
        },
        Case {
            name: "conv2d grouped",
            setup: |s| {
                let mut r = rng(s);
                let mut ps = ParameterSet::new();
                add(
                    &mut ps,
                    "x",
                    away_from_zero(&mut r, &[1, 4, 4, 4], 0.1, 1.0),
                );
                add(
                    &mut ps,
                    "w",
                    away_from_zero(&mut r, &[6, 2, 3, 3], 0.1, 0.5),
                );
                (
                    ps,
                    Box::new(|t| {
                        let (x, w) = (t.param("x")?, t.param("w")?);
                        t.conv2d(x, w, None, 1, 2)
                    }),
                )
            },
        },
        Case {
            name: "maxpool2",
            setup: |s| {
                let mut r = rng(s);
                let mut ps = ParameterSet::new();
                add(&mut ps, "x", distinct(&mut r, &[2, 2, 4, 6], 0.01));
                (
                    ps,
                    Box::new(|t| {
                        let x = t.param("x")?;
                        t.maxpool2(x)
                    }),
                )
            },
        },
        Case {
            name: "leaky_relu, relu, sigmoid, softplus, add_scalar",
            setup: |s| {
                let mut r = rng(s);
                let mut ps = ParameterSet::new();
                add(&mut ps, "x", away_from_zero(&mut r, &[3, 5], 0.05, 3.0));
                (
                    ps,
                    Box::new(|t| {
                        let x = t.param("x")?;
                        let a = t.leaky_relu(x, 0.2)?;
                        let b = t.relu(x);
                        let c = t.sigmoid(x);
                        let d = t.softplus(x);
                        let e = t.add_scalar(x, 0.7);
                        let ab = t.add(a, b)?;
                        let cd = t.sub(c, d)?;
                        let abcd = t.add(ab, cd)?;
                        t.concat(&[abcd, e])
                    }),
                )
            },
        },
        Case {
            name: "global_avg_pool, mul_channel",
            setup: |s| {
                let mut r = rng(s);
                let mut ps = ParameterSet::new();
                add(
                    &mut ps,
                    "x",
                    away_from_zero(&mut r, &[2, 3, 3, 2], 0.1, 1.0),
                );
                add(&mut ps, "s", away_from_zero(&mut r, &[2, 3], 0.1, 1.0));
                (
                    ps,
                    Box::new(|t| {
                        let (x, s) = (t.param("x")?, t.param("s")?);
                        let g = t.global_avg_pool(x)?;
                        let gs = t.mul_channel(x, s)?;
                        let f = t.flatten(gs)?;
                        let g2 = t.add(g, s)?;
                        t.concat(&[f, g2])
                    }),
                )
            },
        },
        Case {
            name: "linear, concat, reshape",
            setup: |s| {
                let mut r = rng(s);
                let mut ps = ParameterSet::new();
                add(&mut ps, "x", away_from_zero(&mut r, &[3, 4], 0.1, 1.0));
                add(&mut ps, "w", away_from_zero(&mut r, &[5, 4], 0.1, 1.0));
                add(&mut ps, "b", away_from_zero(&mut r, &[5], 0.1, 1.0));
                (
                    ps,
                    Box::new(|t| {
                        let (x, w, b) = (t.param("x")?, t.param("w")?, t.param("b")?);
                        let y = t.linear(x, w, Some(b))?;
                        let c = t.concat(&[y, x])?;
                        t.reshape(c, &[9, 3])
                    }),
                )
            },
        },
        Case {
            name: "channel attention",
            setup: |s| {
                let mut r = rng(s);
                let mut ps = param_set(&blocks::channel_attention_params("ca", 4, 2), &mut r);
                add(
                    &mut ps,
                    "x",
                    away_from_zero(&mut r, &[2, 4, 3, 3], 0.1, 1.0),
                );
                (
                    ps,
                    Box::new(|t| {
                        let x = t.param("x")?;
                        blocks::channel_attention(t, "ca", x, 2)
                    }),
                )
            },
        },
        Case {
            name: "SalCAR block",
            setup: |s| {
                let mut r = rng(s);
                let cfg = BlockConfig {
                    ca_ratio: 2,
                    ..BlockConfig::new(3, 4)
                };
                let mut ps = param_set(&blocks::salcar_params(&cfg, 2, "blk"), &mut r);
                add(&mut ps, "x", distinct(&mut r, &[1, 3, 6, 6], 0.013));
                add(
                    &mut ps,
                    "f",
                    away_from_zero(&mut r, &[1, 2, 3, 3], 0.1, 1.0),
                );
                (
                    ps,
                    Box::new(move |t| {
                        let (x, f) = (t.param("x")?, t.param("f")?);
                        blocks::salcar_block(t, &cfg, "blk", x, Some(f))
                    }),
                )
            },
        },
        Case {
            name: "SplitCAR block",
            setup: |s| {
                let mut r = rng(s);
                let cfg = BlockConfig {
                    ca_ratio: 2,
                    split_count: 2,
                    ..BlockConfig::new(4, 4)
                };
                let mut ps = param_set(&blocks::splitcar_params(&cfg, "blk"), &mut r);
                add(&mut ps, "x", distinct(&mut r, &[2, 4, 4, 4], 0.011));
                (
                    ps,
                    Box::new(move |t| {
                        let x = t.param("x")?;
                        blocks::splitcar_block(t, &cfg, "blk", x)
                    }),
                )
            },
        },
        Case {
            name: "SalSubnet",
            setup: |s| {
                let mut r = rng(s);
                let cfg = NetworkConfig {
                    patch_size: 8,
                    ..tiny_net()
                };
                let specs: Vec<ParamSpec> = network::param_specs(&cfg)
                    .into_iter()
                    .filter(|p| p.name.starts_with("sal."))
                    .collect();
                let mut ps = param_set(&specs, &mut r);
                add(
                    &mut ps,
                    "p",
                    distinct(&mut r, &[1, 1, 8, 8], 0.015).map(|v| v + 0.5),
                );
                (
                    ps,
                    Box::new(move |t| {
                        let p = t.param("p")?;
                        let (a, b) = network::sal_subnet(t, &cfg, p)?;
                        let a = t.flatten(a)?;
                        let b = t.flatten(b)?;
                        t.concat(&[a, b])
                    }),
                )
            },
        },
        Case {
            name: "JndSubnet",
            setup: |s| {
                let mut r = rng(s);
                let cfg = tiny_net();
                let specs: Vec<ParamSpec> = network::param_specs(&cfg)
                    .into_iter()
                    .filter(|p| p.name.starts_with("jnd."))
                    .collect();
                let mut ps = param_set(&specs, &mut r);
                add(
                    &mut ps,
                    "p",
                    distinct(&mut r, &[1, 1, 16, 16], 0.004).map(|v| v + 0.5),
                );
                add(
                    &mut ps,
                    "f1",
                    away_from_zero(&mut r, &[1, 2, 8, 8], 0.1, 1.0),
                );
                add(
                    &mut ps,
                    "f2",
                    away_from_zero(&mut r, &[1, 2, 4, 4], 0.1, 1.0),
                );
                (
                    ps,
                    Box::new(move |t| {
                        let (p, f1, f2) = (t.param("p")?, t.param("f1")?, t.param("f2")?);
                        network::jnd_subnet(t, &cfg, p, Some((f1, f2)))
                    }),
                )
            },
        },
        Case {
            name: "PQP and SG-PWP heads",
            setup: |s| {
                let mut r = rng(s);
                let cfg = tiny_net();
                let specs: Vec<ParamSpec> = network::param_specs(&cfg)
                    .into_iter()
                    .filter(|p| p.name.starts_with("pqp.") || p.name.starts_with("pwp."))
                    .collect();
                let mut ps = param_set(&specs, &mut r);
                add(
                    &mut ps,
                    "fused",
                    away_from_zero(&mut r, &[3, cfg.fused_len()], 0.1, 1.0),
                );
                (
                    ps,
                    Box::new(move |t| {
                        let f = t.param("fused")?;
                        let (w, q) = network::heads(t, &cfg, f)?;
                        t.concat(&[w, q])
                    }),
                )
            },
        },
    ]
}

/// Scalar loss functions and their analytic gradients; returns the max error.
pub fn loss_checks(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed ^ 0x1055);
    let n = 6;
    let w: Vec<f64> = (0..n).map(|_| r.random_range(0.2..2.0)).collect();
    let mut v: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
    let vs: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= vs);
    let sal = check_fn(
        &w,
        |w| losses::saliency_loss(w, &v).unwrap(),
        &losses::saliency_loss_grad(&w, &v).unwrap(),
    );

    let s = [1.0, 2.5, 4.0, 7.0];
    // Predictions spaced well away from every hinge point.
    let f: Vec<f64> = [3.1, 0.4, 5.2, 1.7]
        .iter()
        .map(|x| x + r.random_range(-0.2..0.2))
        .collect();
    let rank = check_fn(
        &f,
        |f| losses::batch_rank_loss(&s, f, 1e-6).unwrap(),
        &losses::batch_rank_grad(&s, &f, 1e-6).unwrap(),
    );
    let mae = check_fn(
        &f,
        |f| losses::mae_loss(f, &s).unwrap(),
        &losses::mae_grad(&f, &s).unwrap(),
    );

    let images: Vec<ImageTerms> = (0..4)
        .map(|k| {
            let m = 5;
            let weights: Vec<f64> = (0..m).map(|_| r.random_range(0.3..2.0)).collect();
            let qualities: Vec<f64> = (0..m).map(|_| r.random_range(0.0..9.0)).collect();
            let mut sig: Vec<f64> = (0..m).map(|_| r.random_range(0.0..1.0)).collect();
            let t: f64 = sig.iter().sum();
            sig.iter_mut().for_each(|x| *x /= t);
            ImageTerms {
                weights,
                qualities,
                significance: sig,
                truth: s[k],
            }
        })
        .collect();
    let lw = LossWeights::default();
    let obj = losses::batch_objective(&images, &lw).unwrap();
    let flat = |imgs: &[ImageTerms]| -> Vec<f64> {
        imgs.iter()
            .flat_map(|i| {
                i.weights
                    .iter()
                    .chain(&i.qualities)
                    .copied()
                    .collect::<Vec<_>>()
            })
            .collect()
    };
    let unflat = |x: &[f64]| -> Vec<ImageTerms> {
        images
            .iter()
            .enumerate()
            .map(|(k, im)| {
                let o = k * 10;
                ImageTerms {
                    weights: x[o..o + 5].to_vec(),
                    qualities: x[o + 5..o + 10].to_vec(),
                    ..im.clone()
                }
            })
            .collect()
    };
    let grad: Vec<f64> = (0..4)
        .flat_map(|k| {
            obj.d_weights[k]
                .iter()
                .chain(&obj.d_qualities[k])
                .copied()
                .collect::<Vec<_>>()
        })
        .collect();
    let total = check_fn(
        &flat(&images),
        |x| losses::batch_objective(&unflat(x), &lw).unwrap().total,
        &grad,
    );
    vec![
        ("saliency loss", sal),
        ("batch rank loss", rank),
        ("MAE", mae),
        ("total loss through pooling", total),
    ]
}

fn random_quad(r: &mut ChaCha8Rng, p: usize) -> PatchQuad {
    let mut t =
        |c: usize, lo: f32, hi: f32| Tensor::from_fn(&[c, p, p], |_| r.random_range(lo..hi));
    PatchQuad {
        ref_patch: t(3, -0.5, 0.5),
        dst_patch: t(3, -0.5, 0.5),
        sal_patch: t(1, 0.0, 1.0),
        jnd_patch: t(1, 0.0, 1.0),
        origin: (0, 0),
    }
}

/// Total batch loss through the whole network: three images of three
/// random quads each, three random coordinates per parameter.
pub fn full_objective_sweep(seed: u64) -> Sweep {
    let cfg = NetworkConfig {
        patch_size: 16,
        stem: 2,
        salcar: vec![4, 4],
        splitcar: vec![4, 4],
        sal_channels: vec![2, 2],
        head_hidden: 4,
        ca_ratio: 2,
        split_count: 2,
        ..NetworkConfig::default()
    };
    let lw = LossWeights::default();
    let mut r = rng(seed);
    let items: Vec<StepItem> = [2.0, 6.5, 4.0]
        .iter()
        .map(|&truth| {
            let quads: Vec<PatchQuad> = (0..3).map(|_| random_quad(&mut r, 16)).collect();
            let mut sig: Vec<f64> = (0..3).map(|_| r.random_range(0.1..1.0)).collect();
            let s: f64 = sig.iter().sum();
            sig.iter_mut().for_each(|v| *v /= s);
            StepItem {
                quads,
                significance: sig,
                truth,
            }
        })
        .collect();
    let ps = init_params(&cfg, seed).unwrap().cast::<f64>();
    let (_, grads) = batch_gradients(&cfg, &lw, &ps, &items, Exec::Sequential).unwrap();
    let total = |p: &ParameterSet<f64>| {
        batch_gradients(&cfg, &lw, p, &items, Exec::Sequential)
            .unwrap()
            .0
            .total
    };
    let f0 = total(&ps);
    let mut work = ps.clone();
    let mut sweep = Sweep::default();
    for id in ps.ids() {
        let n = ps.value(id).len();
        for _ in 0..3 {
            let i = r.random_range(0..n);
            probe(&mut sweep, &mut work, &total, f0, id, i, grads[id.0][i]);
        }
    }
    sweep
}
