//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use coarsefine::encoder::{EncoderConfig, EncoderStack, LayerBlock, LoraPair, Modality};
use coarsefine::healing::window_loss_and_grad;
use coarsefine::numerics::{Mat, Rng};

fn mv(m: &Mat, x: &[f64]) -> Vec<f64> {
    (0..m.rows())
        .map(|r| m.row(r).iter().zip(x).map(|(w, v)| *w as f64 * v).sum())
        .collect()
}

fn gelu64(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// One residual block in f64, with explicit adapter values.
pub fn block64(block: &LayerBlock, a: &[f64], b: &[f64], rank: usize, scale: f64, x: &[f64]) -> Vec<f64> {
    let d = x.len();
    let act: Vec<f64> = mv(&block.w_up, x).into_iter().map(gelu64).collect();
    let mlp = mv(&block.w_down, &act);
    let low: Vec<f64> = (0..rank).map(|j| (0..d).map(|i| a[j * d + i] * x[i]).sum()).collect();
    (0..d)
        .map(|i| x[i] + mlp[i] + scale * (0..rank).map(|j| b[i * rank + j] * low[j]).sum::<f64>())
        .collect()
}

/// Mean `1 - cos(head(h), target)` in f64 over a window, where `params`
/// holds `(a, b)` for each layer of the window.
pub fn window_loss64(
    stack: &EncoderStack,
    modality: Modality,
    layers: &[usize],
    params: &[(Vec<f64>, Vec<f64>)],
    starts: &[Vec<f32>],
    targets: &[Vec<f32>],
) -> f64 {
    let cfg = stack.config();
    let scale = cfg.lora_alpha as f64 / cfg.lora_rank as f64;
    let mut total = 0.0;
    for (s, t) in starts.iter().zip(targets) {
        let mut h: Vec<f64> = s.iter().map(|v| *v as f64).collect();
        for (l, (a, b)) in layers.iter().zip(params) {
            h = block64(stack.block(modality, *l).unwrap(), a, b, cfg.lora_rank, scale, &h);
        }
        let y = mv(&stack.head().proj, &h);
        let t: Vec<f64> = t.iter().map(|v| *v as f64).collect();
        let dot: f64 = y.iter().zip(&t).map(|(p, q)| p * q).sum();
        let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nt = t.iter().map(|v| v * v).sum::<f64>().sqrt();
        total += 1.0 - dot / (ny * nt);
    }
    total / starts.len() as f64
}

/// Brute-force exit labeler: for each item and each layer, scan every
/// candidate with a plain double loop. Shares only the cosine primitive
/// with the library.
pub fn brute_force_exits(stack: &EncoderStack, corpus: &coarsefine::datagen::Corpus, m: Modality) -> Vec<(u64, usize)> {
    let l = stack.num_layers();
    let items = &corpus.items;
    let fine: Vec<Vec<f32>> = items.iter().map(|it| stack.fine_embed(m, it.raw(m)).unwrap()).collect();
    let coarse: Vec<Vec<Vec<f32>>> = (1..=l)
        .map(|layer| items.iter().map(|it| stack.coarse_embed(m, it.item_id, it.raw(m), layer).unwrap().0).collect())
        .collect();
    let cos = |x: &[f32], y: &[f32]| coarsefine::numerics::cosine(x, y).unwrap();
    let mut out = Vec::new();
    for (k, item) in items.iter().enumerate() {
        let mut exit = l;
        for layer in 1..=l {
            let mut best = 0;
            let mut best_score = f32::NEG_INFINITY;
            for j in 0..items.len() {
                let s = cos(&fine[k], &coarse[layer - 1][j]);
                if s > best_score || (s == best_score && items[j].item_id < items[best].item_id) {
                    best = j;
                    best_score = s;
                }
            }
            if best == k {
                exit = layer;
                break;
            }
        }
        out.push((item.item_id, exit));
    }
    out
}

/// Stack with nonzero adapters so both A and B receive gradient.
fn perturbed_stack(seed: u64) -> EncoderStack {
    let cfg = EncoderConfig { num_layers: 6, d_model: 16, unified_dim: 8, input_dim: 8, lora_rank: 3, ..Default::default() };
    let mut stack = EncoderStack::init(cfg).unwrap();
    let mut rng = Rng::new(seed);
    for layer in 1..=6 {
        let pair = LoraPair { a: Mat::random(3, 16, 0.4, &mut rng), b: Mat::random(16, 3, 0.4, &mut rng) };
        stack.set_lora(Modality::A, layer, pair).unwrap();
    }
    stack
}

/// Central finite differences of an f64 reference forward pass, checked
/// against the analytic adapter gradients on 10 seeded probes.
pub fn gradient_probe_errors() -> Vec<f64> {
    let mut errors = Vec::new();
    for probe in 0..10u64 {
        let stack = perturbed_stack(100 + probe);
        let mut rng = Rng::new(200 + probe);
        let window = if probe % 2 == 0 { 2..=4 } else { 5..=5 };
        let layers: Vec<usize> = window.clone().collect();
        let starts: Vec<Vec<f32>> = (0..4).map(|_| (0..16).map(|_| rng.normal() as f32).collect()).collect();
        let targets: Vec<Vec<f32>> = (0..4).map(|_| (0..8).map(|_| rng.normal() as f32).collect()).collect();
        let (_, grads) = window_loss_and_grad(&stack, Modality::A, &window, &starts, &targets).unwrap();
        let base: Vec<(Vec<f64>, Vec<f64>)> = layers
            .iter()
            .map(|l| {
                let p = stack.block(Modality::A, *l).unwrap().lora.clone().unwrap();
                (p.a.values().iter().map(|v| *v as f64).collect(), p.b.values().iter().map(|v| *v as f64).collect())
            })
            .collect();
        // one coordinate of A and one of B per window layer
        for (k, g) in grads.iter().enumerate() {
            for which in 0..2 {
                let len = if which == 0 { g.a.len() } else { g.b.len() };
                let idx = rng.below(len);
                let analytic = if which == 0 { g.a[idx] } else { g.b[idx] } as f64;
                let h = 1e-5;
                let mut plus = base.clone();
                let mut minus = base.clone();
                if which == 0 {
                    plus[k].0[idx] += h;
                    minus[k].0[idx] -= h;
                } else {
                    plus[k].1[idx] += h;
                    minus[k].1[idx] -= h;
                }
                let fp = window_loss64(&stack, Modality::A, &layers, &plus, &starts, &targets);
                let fm = window_loss64(&stack, Modality::A, &layers, &minus, &starts, &targets);
                let numeric = (fp - fm) / (2.0 * h);
                errors.push((analytic - numeric).abs() / numeric.abs().max(1e-3));
            }
        }
    }
    errors
}
