#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vctrl_core::{
    AdapterConfig, BaseConfig, BaseParams, ControlBundle, LatentTensor, Layout, NetworkSpec,
    ParamSet, PatchSpec, VCtrlParams,
};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn_latent(
    grid: (usize, usize, usize),
    ch: usize,
    patch: PatchSpec,
    rng: &mut ChaCha8Rng,
) -> LatentTensor {
    let n = grid.0 * grid.1 * grid.2 * ch;
    let data = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
    LatentTensor::from_data(grid.0, grid.1, grid.2, ch, patch, data).unwrap()
}

pub fn random_bundle(
    grid: (usize, usize, usize),
    ch: usize,
    patch: PatchSpec,
    rng: &mut ChaCha8Rng,
) -> ControlBundle {
    let mut latent = randn_latent(grid, ch + 1, patch, rng);
    for cell in latent.data.chunks_exact_mut(ch + 1) {
        cell[ch] = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
    }
    ControlBundle { latent }
}

pub struct Tiny {
    pub base: BaseParams,
    pub adapter: VCtrlParams,
    pub spec: NetworkSpec,
    pub patch: PatchSpec,
    pub grid: (usize, usize, usize),
    pub ch: usize,
}

/// Small enough for per-element finite differences: 4 tokens of 3 channels,
/// `d_b` = 8, `d_c` = 4.
pub fn tiny(m: usize, n: usize, layout: Layout, seed: u64) -> Tiny {
    let patch = PatchSpec::new(1, 1);
    let grid = (1, 2, 2);
    let ch = 3;
    let mut r = rng(seed);
    let base = BaseParams::init(
        BaseConfig {
            latent_channels: ch,
            grid,
            width: 8,
            blocks: m,
            heads: 2,
            mlp_hidden: 12,
            time_dim: 8,
            num_classes: 3,
        },
        &mut r,
    )
    .unwrap();
    let adapter = VCtrlParams::init(
        AdapterConfig {
            control_channels: ch + 1,
            width: 4,
            heads: 2,
            mlp_hidden: 6,
            base_width: 8,
            blocks: n,
        },
        &mut r,
    )
    .unwrap();
    Tiny {
        base,
        adapter,
        spec: NetworkSpec::new(m, n, layout).unwrap(),
        patch,
        grid,
        ch,
    }
}

/// Overwrites every parameter with fresh noise so no gradient is trivially
/// zero (in particular the zero-initialised fuse projections).
pub fn jitter<P: ParamSet>(p: &mut P, std: f64, rng: &mut ChaCha8Rng) {
    p.visit_mut(&mut |name, t| {
        for v in t.data.iter_mut() {
            let noise: f64 = rng.random_range(-1.0..1.0) * std;
            *v = if name.ends_with("gamma") || name.ends_with("gain") {
                1.0 + noise
            } else {
                *v + noise
            };
        }
    });
}

/// Central differences of `loss` along every scalar of `params`, compared
/// against `analytic`. Returns the worst relative error and where it occurred.
pub fn gradcheck<P: ParamSet>(
    params: &P,
    analytic: &P,
    h: f64,
    loss: impl Fn(&P) -> f64,
) -> (f64, String) {
    let names: Vec<(String, usize)> = params
        .tensors()
        .iter()
        .map(|(n, t)| (n.clone(), t.len()))
        .collect();
    let grads: Vec<Vec<f64>> = analytic
        .tensors()
        .iter()
        .map(|(_, t)| t.data.clone())
        .collect();
    let mut worst = (0.0, String::new());
    for (ti, (name, len)) in names.iter().enumerate() {
        for j in 0..*len {
            let eval = |delta: f64| {
                let mut p = params.clone();
                p.visit_mut(&mut |n, t| {
                    if n == name {
                        t.data[j] += delta;
                    }
                });
                loss(&p)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = grads[ti][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > worst.0 {
                worst = (
                    rel,
                    format!("{name}[{j}] analytic {a:e} numeric {numeric:e}"),
                );
            }
        }
    }
    worst
}
