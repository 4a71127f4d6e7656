//! Test-side oracles shared by the acceptance target and the focused tests.
//! Nothing here calls the library code it is checking against.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::f64::consts::PI;

use gfnact::embedding::ae_loss_grad;
use gfnact::nn::{cross_entropy, Activation, LayerSpec, Mode, Network, NetworkSpec, Tensor};
use gfnact::rng::RngStream;
use rand::Rng;

pub const FD_STEP: f64 = 1e-5;

/// `H[mean] - mean H` in nats, written out term by term.
pub fn direct_bald(rows: &[Vec<f64>]) -> f64 {
    let k = rows.len() as f64;
    let c = rows[0].len();
    let h = |p: &[f64]| -> f64 {
        let mut s = 0.0;
        for &v in p {
            if v > 0.0 {
                s -= v * v.ln();
            }
        }
        s
    };
    let mut mean = vec![0.0; c];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / k;
        }
    }
    let mut avg = 0.0;
    for r in rows {
        avg += h(r) / k;
    }
    h(&mean) - avg
}

/// Random two-class row; a fraction of rows are pushed to near-certainty.
pub fn random_row(rng: &mut RngStream) -> Vec<f64> {
    let p: f64 = match rng.random_range(0..4) {
        0 => rng.random_range(0.0..1e-9),
        1 => 1.0 - rng.random_range(0.0..1e-9),
        _ => rng.random(),
    };
    vec![p, 1.0 - p]
}

/// Noise-free surface, evaluated independently of the library.
pub fn surface(i: usize, j: usize) -> f64 {
    let (x, y) = (i as f64, j as f64);
    let wave = (x * 2.0 * PI / 50.0).sin() * (y * 2.0 * PI / 50.0).cos();
    let tilt = x * y / 1e4;
    let dx = x - 70.0;
    let dy = y - 30.0;
    let bump = (-(dx * dx + dy * dy) / 800.0).exp();
    wave + tilt + bump
}

/// `||a - n|| / max(||a||, ||n||)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub fn central_difference(x: &mut [f64], f: &mut dyn FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    for k in 0..x.len() {
        let orig = x[k];
        x[k] = orig + FD_STEP;
        let up = f(x);
        x[k] = orig - FD_STEP;
        let down = f(x);
        x[k] = orig;
        g[k] = (up - down) / (2.0 * FD_STEP);
    }
    g
}

/// Layer stacks covering every layer type; `kind` picks one.
pub fn random_stack(kind: usize, rng: &mut RngStream) -> (NetworkSpec, usize) {
    let d_in = rng.random_range(2..7);
    let width = rng.random_range(2..9);
    let out = rng.random_range(1..5);
    let rows = rng.random_range(1..4);
    let layers = match kind % 7 {
        0 => vec![LayerSpec::Dense { input: d_in, output: out }],
        1 => vec![LayerSpec::LinearProjection { input: d_in, output: out }],
        2 => vec![
            LayerSpec::Dense {
                input: d_in,
                output: width,
            },
            LayerSpec::Activation(Activation::Relu),
            LayerSpec::Dense { input: width, output: out },
        ],
        3 => vec![
            LayerSpec::Dense {
                input: d_in,
                output: width,
            },
            LayerSpec::Activation(Activation::LeakyRelu(0.01)),
            LayerSpec::Dense { input: width, output: out },
        ],
        4 => vec![
            LayerSpec::Dense {
                input: d_in,
                output: width,
            },
            LayerSpec::Dropout(rng.random_range(0.1..0.5)),
            LayerSpec::Dense { input: width, output: out },
        ],
        5 => {
            let heads = rng.random_range(1..3);
            let hidden = heads * rng.random_range(2..5);
            vec![
                LayerSpec::LinearProjection {
                    input: d_in,
                    output: hidden,
                },
                LayerSpec::TransformerEncoder {
                    hidden,
                    heads,
                    ff_dim: rng.random_range(2..9),
                    dropout: 0.0,
                },
                LayerSpec::Dense {
                    input: hidden,
                    output: out,
                },
            ]
        }
        _ => {
            let heads = rng.random_range(1..3);
            let hidden = heads * rng.random_range(2..4);
            vec![
                LayerSpec::LinearProjection {
                    input: d_in,
                    output: hidden,
                },
                LayerSpec::Activation(Activation::LeakyRelu(0.01)),
                LayerSpec::TransformerEncoder {
                    hidden,
                    heads,
                    ff_dim: rng.random_range(2..7),
                    dropout: 0.2,
                },
                LayerSpec::TransformerEncoder {
                    hidden,
                    heads,
                    ff_dim: rng.random_range(2..7),
                    dropout: 0.2,
                },
                LayerSpec::Dense {
                    input: hidden,
                    output: out,
                },
            ]
        }
    };
    (NetworkSpec::new(layers).expect("valid stack"), rows)
}

/// Worst relative error over parameter and input gradients of
/// `sum(w * net(x))`, with dropout masks replayed from one stream.
pub fn network_gradient_error(kind: usize, seed: u64) -> f64 {
    let mut rng = RngStream::new(seed, 0);
    let (spec, rows) = random_stack(kind, &mut rng);
    let (d_in, d_out) = (spec.input_dim(), spec.output_dim());
    let mut net = Network::new(spec, &mut rng);
    // Move parameters off zero so biases and norms are exercised.
    for p in net.params_mut() {
        *p += rng.random_range(-0.3..0.3);
    }
    let x: Vec<f64> = (0..rows * d_in).map(|_| rng.random_range(-1.5..1.5)).collect();
    let w: Vec<f64> = (0..rows * d_out).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mask_seed = seed ^ 0xD1CE;

    let eval = |net: &Network, x: &[f64]| -> f64 {
        let input = Tensor::new(vec![rows, d_in], x.to_vec()).unwrap();
        let out = net.forward(&input, Mode::Train, &mut RngStream::new(mask_seed, 1)).unwrap().output;
        out.values().iter().zip(&w).map(|(o, w)| o * w).sum()
    };

    let input = Tensor::new(vec![rows, d_in], x.clone()).unwrap();
    let fwd = net.forward(&input, Mode::Train, &mut RngStream::new(mask_seed, 1)).unwrap();
    let grad_out = Tensor::new(vec![rows, d_out], w.clone()).unwrap();
    let (g_params, g_input) = net.backward(&fwd.tape, &grad_out).unwrap();

    let mut params = net.params().to_vec();
    let probe = net.clone();
    let num_params = central_difference(&mut params, &mut |p| {
        let mut n = probe.clone();
        n.set_params(p.to_vec()).unwrap();
        eval(&n, &x)
    });
    let mut xs = x.clone();
    let num_input = central_difference(&mut xs, &mut |xv| eval(&net, xv));
    relative_error(&g_params, &num_params).max(relative_error(g_input.values(), &num_input))
}

/// Worst relative error of the autoencoder objective's gradients with
/// respect to the reconstruction and the three latent batches.
pub fn ae_loss_gradient_error(seed: u64) -> f64 {
    let mut rng = RngStream::new(seed, 2);
    let batch = rng.random_range(1..5);
    let d = rng.random_range(2..9);
    let z = rng.random_range(1..5);
    let weight = rng.random_range(0.05..1.0);
    let margin = rng.random_range(0.1..2.0);
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let inputs = draw(batch * d);
    let parts = [draw(batch * d), draw(batch * z), draw(batch * z), draw(batch * z)];
    let g = ae_loss_grad(&inputs, &parts[0], &parts[1], &parts[2], &parts[3], z, weight, margin).unwrap();
    let analytic = [g.recon, g.anchor, g.positive, g.negative];
    let mut worst: f64 = 0.0;
    for which in 0..4 {
        let mut v = parts[which].clone();
        let numeric = central_difference(&mut v, &mut |x| {
            let mut p = parts.clone();
            p[which] = x.to_vec();
            ae_loss_grad(&inputs, &p[0], &p[1], &p[2], &p[3], z, weight, margin).unwrap().loss
        });
        worst = worst.max(relative_error(&analytic[which], &numeric));
    }
    worst
}

pub fn cross_entropy_gradient_error(seed: u64) -> f64 {
    let mut rng = RngStream::new(seed, 3);
    let c = rng.random_range(2..6);
    let label = rng.random_range(0..c);
    let mut logits: Vec<f64> = (0..c).map(|_| rng.random_range(-4.0..4.0)).collect();
    let (_, analytic) = cross_entropy(&logits, label).unwrap();
    let numeric = central_difference(&mut logits, &mut |l| cross_entropy(l, label).unwrap().0);
    relative_error(&analytic, &numeric)
}

/// Terminal distribution `R(x) * sum over trajectories of prod P_B`,
/// normalised, for a walk from the origin with uniform backward moves over
/// parents that lie on the reachable parity lattice.
pub fn enumerated_terminals(n: usize, l_min: usize, l_max: usize, reward: &dyn Fn(usize, usize) -> f64) -> Vec<f64> {
    fn parents(n: usize, x: usize, y: usize, t: usize) -> usize {
        let (x, y, t) = (x as i64, y as i64, t as i64);
        [(0, 1), (0, -1), (1, 0), (-1, 0)]
            .iter()
            .filter(|(dx, dy)| {
                let (px, py) = (x + dx, y + dy);
                (0..n as i64).contains(&px) && (0..n as i64).contains(&py) && px + py < t && (px + py - (t - 1)) % 2 == 0
            })
            .count()
    }
    #[allow(clippy::too_many_arguments)]
    fn walk(
        n: usize,
        l_min: usize,
        l_max: usize,
        reward: &dyn Fn(usize, usize) -> f64,
        x: usize,
        y: usize,
        t: usize,
        pb: f64,
        out: &mut BTreeMap<(usize, usize), f64>,
    ) {
        if t >= l_min {
            *out.entry((x, y)).or_default() += reward(x, y) * pb;
        }
        if t == l_max {
            return;
        }
        for (dx, dy) in [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)] {
            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
            if (0..n as i64).contains(&nx) && (0..n as i64).contains(&ny) {
                let (nx, ny) = (nx as usize, ny as usize);
                walk(n, l_min, l_max, reward, nx, ny, t + 1, pb / parents(n, nx, ny, t + 1) as f64, out);
            }
        }
    }
    let mut acc = BTreeMap::new();
    walk(n, l_min, l_max, reward, 0, 0, 0, 1.0, &mut acc);
    let z: f64 = acc.values().sum();
    let mut p = vec![0.0; n * n];
    for ((x, y), w) in acc {
        p[x * n + y] = w / z;
    }
    p
}

/// `(i, j, split)` rows of a dataset CSV, read without the library.
pub fn dataset_splits(path: &std::path::Path) -> Vec<((usize, usize), String)> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let (ci, cj, cs) = (col("i"), col("j"), col("split"));
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            ((f[ci].parse().unwrap(), f[cj].parse().unwrap()), f[cs].to_owned())
        })
        .collect()
}

pub const TB_GRID: usize = 4;
pub const TB_L_MIN: usize = 1;
pub const TB_L_MAX: usize = 6;

pub fn tb_reward(x: usize, y: usize) -> f64 {
    0.5 + ((3 * x + 5 * y) % 7) as f64
}

/// Trains a one-hot policy on the small grid and returns the total
/// variation between 50,000 sampled terminals and the enumerated target.
pub fn tb_total_variation() -> f64 {
    use gfnact::exec::Execution;
    use gfnact::gflownet::{Featurizer, GfnConfig, GfnTrainer, PolicyConfig, PolicyModel, RewardCache};
    use gfnact::grid::{GridEnv, MaskConfig};

    let mask = MaskConfig {
        min_length: TB_L_MIN,
        max_length: TB_L_MAX,
        eps_stop: 1.0,
        forbid_backtrack: false,
        depth_aware_stop: false,
    };
    let env = GridEnv::new(TB_GRID, mask).unwrap();
    let policy_cfg = PolicyConfig {
        hidden: 32,
        layers: 1,
        heads: 4,
        ff_dim: 64,
        dropout: 0.0,
    };
    let cfg = GfnConfig {
        policy: policy_cfg.clone(),
        learning_rate: 1e-3,
        log_z_learning_rate: 1e-3,
        episodes: 20_000,
        epsilon_greedy: 0.1,
        mask,
        snapshots: vec![],
        ..GfnConfig::default()
    };
    let featurizer = Featurizer::OneHot {
        size: TB_GRID,
        max_t: TB_L_MAX,
    };
    let policy = PolicyModel::new(&policy_cfg, featurizer, cfg.initial_partition, 11).unwrap();
    let mut trainer = GfnTrainer::new(policy, cfg.learning_rate, cfg.log_z_learning_rate);
    let src = |(x, y): (usize, usize)| tb_reward(x, y);
    let mut cache = RewardCache::new(cfg.reward_floor);
    trainer.train(&env, &cfg, cfg.episodes, &src, &mut cache, 5).unwrap();
    let rollouts = 50_000;
    let terminals = trainer.policy.sample_many(&env, rollouts, 99, Execution::Parallel).unwrap();
    let mut emp = [0.0; TB_GRID * TB_GRID];
    for (x, y) in terminals {
        emp[x * TB_GRID + y] += 1.0 / rollouts as f64;
    }
    let target = enumerated_terminals(TB_GRID, TB_L_MIN, TB_L_MAX, &tb_reward);
    0.5 * emp.iter().zip(&target).map(|(a, b)| (a - b).abs()).sum::<f64>()
}
