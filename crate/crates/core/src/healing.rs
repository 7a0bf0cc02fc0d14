//! Progressive LoRA healing.
//!
//! One adapter suite is shared by every exit. Exits are healed in ascending
//! order; at exit `e` only the adapters in that exit's window are trainable
//! and everything earlier is frozen, so the layer-`n` state of an exit-`n`
//! pass stays identical to the layer-`n` state of any deeper pass.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::RangeInclusive;

use crate::datagen::Corpus;
use crate::encoder::{EncoderStack, LoraPair, Modality};
use crate::error::{check_dim, Error, Result};
use crate::exit_oracle::ExitLabel;
use crate::numerics::{cosine, dot, gelu, gelu_grad, matvec, matvec_t, norm, Rng};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HealStep {
    pub exit: usize,
    pub window: RangeInclusive<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepSchedule {
    pub pivot: usize,
    pub steps: Vec<HealStep>,
}

/// Pivot is the lower median exit. Exits up to the pivot get a window of
/// one layer each; after it the window doubles (2, 4, 8, ...) and is capped
/// so the last window ends exactly at `num_layers`.
pub fn make_schedule(histogram: &BTreeMap<usize, usize>, num_layers: usize) -> Result<StepSchedule> {
    let total: usize = histogram.values().sum();
    if total == 0 {
        return Err(Error::invalid("empty exit histogram"));
    }
    if let Some(e) = histogram.keys().find(|e| **e == 0 || **e > num_layers) {
        return Err(Error::OutOfRange(format!("exit {e} not in [1, {num_layers}]")));
    }
    let target = (total - 1) / 2;
    let mut seen = 0;
    let mut pivot = num_layers;
    for (e, c) in histogram {
        seen += c;
        if seen > target {
            pivot = *e;
            break;
        }
    }
    let mut steps: Vec<HealStep> = (1..=pivot).map(|e| HealStep { exit: e, window: e..=e }).collect();
    let mut prev = pivot;
    let mut size = 2;
    while prev < num_layers {
        let end = prev + size.min(num_layers - prev);
        steps.push(HealStep { exit: end, window: prev + 1..=end });
        prev = end;
        size *= 2;
    }
    Ok(StepSchedule { pivot, steps })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HealConfig {
    pub modality: Modality,
    pub epochs: usize,
    pub learning_rate: f32,
    /// Buckets smaller than this train on every item instead.
    pub min_pool: usize,
    /// Allowed per-epoch loss increase before healing aborts.
    pub loss_tolerance: f32,
}

impl Default for HealConfig {
    fn default() -> Self {
        Self { modality: Modality::A, epochs: 50, learning_rate: 1e-2, min_pool: 8, loss_tolerance: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExitHealing {
    pub exit: usize,
    pub window: RangeInclusive<usize>,
    pub pool_size: usize,
    /// Mean `cos(C^e, F)` over the pool before and after healing.
    pub pre_cosine: f32,
    pub post_cosine: f32,
    /// Mean `1 - cos` per epoch, measured before each update, plus the
    /// final value.
    pub losses: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HealReport {
    pub noop: bool,
    pub exits: Vec<ExitHealing>,
}

impl HealReport {
    pub fn to_csv(&self, header: &str) -> String {
        let mut out = crate::datagen::comment_block(header);
        out.push_str("exit,pre_cosine,post_cosine\n");
        for e in &self.exits {
            let _ = writeln!(out, "{},{},{}", e.exit, e.pre_cosine, e.post_cosine);
        }
        out
    }

    pub fn loss_csv(&self, header: &str) -> String {
        let mut out = crate::datagen::comment_block(header);
        out.push_str("exit,epoch,loss\n");
        for e in &self.exits {
            for (epoch, l) in e.losses.iter().enumerate() {
                let _ = writeln!(out, "{},{},{}", e.exit, epoch, l);
            }
        }
        out
    }
}

/// Gradients for the adapters of one window, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraGrad {
    pub layer: usize,
    pub a: Vec<f32>,
    pub b: Vec<f32>,
}

/// Mean `1 - cos(head(h_e), target)` over `starts` (layer `window.start - 1`
/// states) and its gradient with respect to every adapter in `window`.
pub fn window_loss_and_grad(
    stack: &EncoderStack,
    modality: Modality,
    window: &RangeInclusive<usize>,
    starts: &[Vec<f32>],
    targets: &[Vec<f32>],
) -> Result<(f32, Vec<LoraGrad>)> {
    check_dim(starts.len(), targets.len())?;
    if starts.is_empty() {
        return Err(Error::invalid("empty healing pool"));
    }
    let cfg = stack.config();
    let (d, r, scale) = (cfg.d_model, cfg.lora_rank, cfg.lora_scale());
    let layers: Vec<usize> = window.clone().collect();
    let blocks = layers
        .iter()
        .map(|l| stack.block(modality, *l))
        .collect::<Result<Vec<_>>>()?;
    let mut grads: Vec<LoraGrad> = layers
        .iter()
        .map(|l| LoraGrad { layer: *l, a: vec![0.0; r * d], b: vec![0.0; d * r] })
        .collect();
    let count = starts.len() as f32;
    let mut loss = 0.0f32;
    for (start, target) in starts.iter().zip(targets) {
        // forward, keeping per-layer inputs
        let mut inputs = Vec::with_capacity(layers.len());
        let mut pre = Vec::with_capacity(layers.len());
        let mut low = Vec::with_capacity(layers.len());
        let mut h = start.clone();
        for block in &blocks {
            let lora = block.lora.as_ref().ok_or_else(|| Error::invalid("block without adapter"))?;
            let u = matvec(&block.w_up, &h)?;
            let act: Vec<f32> = u.iter().map(|v| gelu(*v)).collect();
            let mlp = matvec(&block.w_down, &act)?;
            let t = matvec(&lora.a, &h)?;
            let delta = matvec(&lora.b, &t)?;
            let next: Vec<f32> = (0..d).map(|i| h[i] + mlp[i] + scale * delta[i]).collect();
            inputs.push(h);
            pre.push(u);
            low.push(t);
            h = next;
        }
        let y = matvec(&stack.head().proj, &h)?;
        let (ny, nt) = (norm(&y), norm(target));
        if ny == 0.0 || nt == 0.0 {
            loss += 1.0 / count;
            continue;
        }
        let yt = dot(&y, target)?;
        loss += (1.0 - yt / (ny * nt)) / count;
        // d(1 - cos)/dy
        let gy: Vec<f32> = y
            .iter()
            .zip(target)
            .map(|(yi, ti)| (-(ti / (ny * nt)) + yt * yi / (ny * ny * ny * nt)) / count)
            .collect();
        let mut g = matvec_t(&stack.head().proj, &gy)?;
        for k in (0..blocks.len()).rev() {
            let block = blocks[k];
            let lora = block.lora.as_ref().expect("checked in forward");
            let grad = &mut grads[k];
            for i in 0..d {
                for j in 0..r {
                    grad.b[i * r + j] += scale * g[i] * low[k][j];
                }
            }
            let g_low: Vec<f32> = matvec_t(&lora.b, &g)?.iter().map(|v| scale * v).collect();
            for j in 0..r {
                for i in 0..d {
                    grad.a[j * d + i] += g_low[j] * inputs[k][i];
                }
            }
            let g_act = matvec_t(&block.w_down, &g)?;
            let g_pre: Vec<f32> = g_act.iter().zip(&pre[k]).map(|(ga, u)| ga * gelu_grad(*u)).collect();
            let via_mlp = matvec_t(&block.w_up, &g_pre)?;
            let via_lora = matvec_t(&lora.a, &g_low)?;
            g = (0..d).map(|i| g[i] + via_mlp[i] + via_lora[i]).collect();
        }
    }
    Ok((loss, grads))
}

/// Training pool for one exit: items labeled exactly `exit`, or every item
/// when that bucket is smaller than `min_pool`.
pub fn training_pool(labels: &[ExitLabel], exit: usize, min_pool: usize) -> Vec<u64> {
    let bucket: Vec<u64> = labels.iter().filter(|l| l.exit == exit).map(|l| l.item_id).collect();
    if bucket.len() < min_pool {
        labels.iter().map(|l| l.item_id).collect()
    } else {
        bucket
    }
}

fn mean_alignment(
    stack: &EncoderStack,
    modality: Modality,
    corpus: &Corpus,
    pool: &[u64],
    exit: usize,
    targets: &BTreeMap<u64, Vec<f32>>,
) -> Result<f32> {
    let mut sum = 0.0f32;
    for id in pool {
        let item = corpus.get(*id).ok_or(Error::MissingId(*id))?;
        let (c, _) = stack.coarse_embed(modality, *id, item.raw(modality), exit)?;
        sum += cosine(&c, &targets[id])?;
    }
    Ok(sum / pool.len() as f32)
}

pub fn heal(
    stack: &EncoderStack,
    corpus: &Corpus,
    labels: &[ExitLabel],
    schedule: &StepSchedule,
    cfg: &HealConfig,
) -> Result<(EncoderStack, HealReport)> {
    let mut healed = stack.clone();
    if stack.config().lora_rank == 0 {
        return Ok((healed, HealReport { noop: true, exits: Vec::new() }));
    }
    let m = cfg.modality;
    let targets: BTreeMap<u64, Vec<f32>> = crate::exit_oracle::fine_embeddings(stack, corpus, m)?;
    for l in labels {
        if !targets.contains_key(&l.item_id) {
            return Err(Error::MissingId(l.item_id));
        }
    }
    let mut exits = Vec::with_capacity(schedule.steps.len());
    for step in &schedule.steps {
        let pool = training_pool(labels, step.exit, cfg.min_pool);
        if pool.is_empty() {
            continue;
        }
        let pre_cosine = mean_alignment(stack, m, corpus, &pool, step.exit, &targets)?;
        let first = *step.window.start();
        let mut starts = Vec::with_capacity(pool.len());
        let mut pool_targets = Vec::with_capacity(pool.len());
        for id in &pool {
            let item = corpus.get(*id).ok_or(Error::MissingId(*id))?;
            let h0 = healed.embed_input(m, item.raw(m))?;
            starts.push(if first == 1 { h0 } else { healed.forward_range(m, 0, first - 1, &h0)? });
            pool_targets.push(targets[id].clone());
        }
        let mut losses = Vec::with_capacity(cfg.epochs + 1);
        for epoch in 0..=cfg.epochs {
            let (loss, grads) = window_loss_and_grad(&healed, m, &step.window, &starts, &pool_targets)?;
            if let Some(prev) = losses.last() {
                if !loss.is_finite() || loss > prev + cfg.loss_tolerance {
                    return Err(Error::Diverged(format!(
                        "exit {} epoch {epoch}: loss rose from {prev} to {loss}",
                        step.exit
                    )));
                }
            }
            losses.push(loss);
            if epoch == cfg.epochs {
                break;
            }
            for g in grads {
                let block = healed.block(m, g.layer)?;
                let mut pair = block.lora.clone().expect("rank > 0");
                for (p, d) in pair.a.values_mut().iter_mut().zip(&g.a) {
                    *p -= cfg.learning_rate * d;
                }
                for (p, d) in pair.b.values_mut().iter_mut().zip(&g.b) {
                    *p -= cfg.learning_rate * d;
                }
                healed.set_lora(m, g.layer, pair)?;
            }
        }
        exits.push(ExitHealing {
            exit: step.exit,
            window: step.window.clone(),
            pool_size: pool.len(),
            pre_cosine,
            post_cosine: 0.0,
            losses,
        });
    }
    for e in &mut exits {
        let pool = training_pool(labels, e.exit, cfg.min_pool);
        e.post_cosine = mean_alignment(&healed, m, corpus, &pool, e.exit, &targets)?;
    }
    healed.reset_layer_calls();
    Ok((healed, HealReport { noop: false, exits }))
}

/// Adapter lookup for a pass that exits at `exit`.
pub trait AdapterSuite {
    fn adapter(&self, exit: usize, layer: usize) -> Option<&LoraPair>;
}

/// The stack's own suite, identical for every exit.
pub struct SharedSuite<'a> {
    suite: Vec<Option<&'a LoraPair>>,
}

impl<'a> SharedSuite<'a> {
    pub fn new(stack: &'a EncoderStack, modality: Modality) -> Result<Self> {
        let suite = stack.tower(modality)?.blocks.iter().map(|b| b.lora.as_ref()).collect();
        Ok(Self { suite })
    }
}

impl AdapterSuite for SharedSuite<'_> {
    fn adapter(&self, _exit: usize, layer: usize) -> Option<&LoraPair> {
        self.suite.get(layer - 1).copied().flatten()
    }
}

/// A separate suite per exit: `suites[exit - 1][layer - 1]`.
pub struct PerExitSuites {
    pub suites: Vec<Vec<Option<LoraPair>>>,
}

impl AdapterSuite for PerExitSuites {
    fn adapter(&self, exit: usize, layer: usize) -> Option<&LoraPair> {
        self.suites.get(exit - 1)?.get(layer - 1)?.as_ref()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrefixReport {
    pub inputs: usize,
    pub checks: usize,
    /// `(input index, layer)` pairs whose states differ.
    pub mismatches: Vec<(usize, usize)>,
}

impl PrefixReport {
    pub fn passed(&self) -> bool {
        self.checks > 0 && self.mismatches.is_empty()
    }
}

fn run_with_suite(
    stack: &EncoderStack,
    modality: Modality,
    suite: &dyn AdapterSuite,
    raw: &[f32],
    exit: usize,
) -> Result<Vec<Vec<f32>>> {
    let scale = stack.config().lora_scale();
    let mut states = vec![stack.embed_input(modality, raw)?];
    for layer in 1..=exit {
        let block = stack.block(modality, layer)?;
        let next = block.forward_with(&states[layer - 1], suite.adapter(exit, layer).map(|p| (p, scale)))?;
        states.push(next);
    }
    Ok(states)
}

/// For every input and every `n < L`, compares the final state of an
/// exit-`n` pass with the layer-`n` state of a full pass, bit for bit.
pub fn verify_prefix_reuse(
    stack: &EncoderStack,
    modality: Modality,
    suite: &dyn AdapterSuite,
    inputs: &[Vec<f32>],
) -> Result<PrefixReport> {
    let l = stack.num_layers();
    let mut report = PrefixReport { inputs: inputs.len(), checks: 0, mismatches: Vec::new() };
    for (k, raw) in inputs.iter().enumerate() {
        let full = run_with_suite(stack, modality, suite, raw, l)?;
        for n in 1..l {
            let early = run_with_suite(stack, modality, suite, raw, n)?;
            report.checks += 1;
            let same = early[n].iter().zip(&full[n]).all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                report.mismatches.push((k, n));
            }
        }
    }
    Ok(report)
}

/// Seeded random raw inputs for prefix checks.
pub fn random_inputs(stack: &EncoderStack, count: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = Rng::new(seed);
    let dim = stack.config().input_dim;
    (0..count).map(|_| (0..dim).map(|_| rng.normal() as f32).collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, CorpusConfig};
    use crate::encoder::EncoderConfig;
    use crate::numerics::Mat;

    fn hist(pairs: &[(usize, usize)]) -> BTreeMap<usize, usize> {
        pairs.iter().copied().collect()
    }

    #[test]
    fn uniform_histogram_schedule() {
        let h: BTreeMap<usize, usize> = (1..=12).map(|e| (e, 1)).collect();
        let s = make_schedule(&h, 12).unwrap();
        assert_eq!(s.pivot, 6);
        let windows: Vec<_> = s.steps.iter().map(|st| st.window.clone()).collect();
        let mut expected: Vec<RangeInclusive<usize>> = (1..=6).map(|e| e..=e).collect();
        expected.push(7..=8);
        expected.push(9..=12);
        assert_eq!(windows, expected);
        assert_eq!(s.steps.iter().map(|st| st.exit).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5, 6, 8, 12]);
    }

    #[test]
    fn point_mass_pivots_at_that_exit() {
        assert_eq!(make_schedule(&hist(&[(3, 40)]), 12).unwrap().pivot, 3);
        assert_eq!(make_schedule(&hist(&[(9, 1)]), 12).unwrap().pivot, 9);
        assert_eq!(make_schedule(&hist(&[(2, 1), (10, 1)]), 12).unwrap().pivot, 2);
        assert!(make_schedule(&BTreeMap::new(), 12).is_err());
    }

    #[test]
    fn windows_cover_every_layer_once() {
        for pivot in 1..=12 {
            let s = make_schedule(&hist(&[(pivot, 5)]), 12).unwrap();
            let covered: Vec<usize> = s.steps.iter().flat_map(|st| st.window.clone()).collect();
            assert_eq!(covered, (1..=12).collect::<Vec<_>>());
            assert!(s.steps.iter().all(|st| *st.window.end() == st.exit));
        }
    }

    fn tiny() -> (EncoderStack, Corpus, Vec<ExitLabel>) {
        let cfg = EncoderConfig { num_layers: 4, d_model: 16, unified_dim: 8, input_dim: 8, ..Default::default() };
        let stack = EncoderStack::init(cfg).unwrap();
        let corpus = generate(&CorpusConfig { n: 20, input_dim: 8, d_latent: 4, ..Default::default() }).unwrap();
        let labels = crate::exit_oracle::label_exits(&stack, &corpus, Modality::A).unwrap();
        (stack, corpus, labels)
    }

    #[test]
    fn rank_zero_is_a_noop() {
        let cfg = EncoderConfig { num_layers: 4, d_model: 16, unified_dim: 8, input_dim: 8, lora_rank: 0, ..Default::default() };
        let stack = EncoderStack::init(cfg).unwrap();
        let corpus = generate(&CorpusConfig { n: 5, input_dim: 8, d_latent: 4, ..Default::default() }).unwrap();
        let labels = crate::exit_oracle::label_exits(&stack, &corpus, Modality::A).unwrap();
        let sched = make_schedule(&crate::exit_oracle::exit_histogram(&labels).unwrap(), 4).unwrap();
        let (healed, report) = heal(&stack, &corpus, &labels, &sched, &HealConfig::default()).unwrap();
        assert!(report.noop);
        assert_eq!(healed, stack);
    }

    #[test]
    fn zero_epochs_leave_stack_unchanged() {
        let (stack, corpus, labels) = tiny();
        let sched = make_schedule(&crate::exit_oracle::exit_histogram(&labels).unwrap(), 4).unwrap();
        let cfg = HealConfig { epochs: 0, ..Default::default() };
        let (healed, report) = heal(&stack, &corpus, &labels, &sched, &cfg).unwrap();
        assert_eq!(healed, stack);
        assert!(!report.noop);
        assert!(report.exits.iter().all(|e| e.losses.len() == 1));
    }

    #[test]
    fn healing_touches_only_adapters() {
        let (stack, corpus, labels) = tiny();
        let sched = make_schedule(&crate::exit_oracle::exit_histogram(&labels).unwrap(), 4).unwrap();
        let (healed, report) = heal(&stack, &corpus, &labels, &sched, &HealConfig::default()).unwrap();
        assert_eq!(healed.head(), stack.head());
        for m in Modality::ALL {
            let (a, b) = (healed.tower(m).unwrap(), stack.tower(m).unwrap());
            assert_eq!(a.lift, b.lift);
            for (x, y) in a.blocks.iter().zip(&b.blocks) {
                assert_eq!(x.w_up, y.w_up);
                assert_eq!(x.w_down, y.w_down);
            }
        }
        // the untouched modality keeps its fresh adapters
        assert_eq!(healed.tower(Modality::B).unwrap(), stack.tower(Modality::B).unwrap());
        assert!(report.exits.iter().all(|e| e.losses.windows(2).all(|w| w[1] <= w[0] + 1e-4)));
        assert!(report.to_csv("").starts_with("exit,pre_cosine,post_cosine\n"));
        assert!(report.loss_csv("").lines().count() > 1);
    }

    #[test]
    fn loss_increase_aborts() {
        let (stack, corpus, labels) = tiny();
        let sched = make_schedule(&crate::exit_oracle::exit_histogram(&labels).unwrap(), 4).unwrap();
        let cfg = HealConfig { learning_rate: 1e4, epochs: 20, ..Default::default() };
        assert!(matches!(heal(&stack, &corpus, &labels, &sched, &cfg), Err(Error::Diverged(_))));
    }

    #[test]
    fn fresh_stack_passes_prefix_check() {
        let (stack, _, _) = tiny();
        let inputs = random_inputs(&stack, 5, 1);
        let suite = SharedSuite::new(&stack, Modality::A).unwrap();
        assert!(verify_prefix_reuse(&stack, Modality::A, &suite, &inputs).unwrap().passed());
    }

    #[test]
    fn per_exit_suites_break_prefix_reuse() {
        let (stack, _, _) = tiny();
        let mut rng = Rng::new(3);
        let suites = (1..=4)
            .map(|_| {
                (1..=4)
                    .map(|_| Some(LoraPair { a: Mat::random(4, 16, 0.3, &mut rng), b: Mat::random(16, 4, 0.3, &mut rng) }))
                    .collect()
            })
            .collect();
        let inputs = random_inputs(&stack, 3, 2);
        let report = verify_prefix_reuse(&stack, Modality::A, &PerExitSuites { suites }, &inputs).unwrap();
        assert!(!report.passed());
        assert_eq!(report.checks, 9);
    }

    #[test]
    fn pool_falls_back_when_bucket_small() {
        let labels: Vec<ExitLabel> = (0..10).map(|i| ExitLabel { item_id: i, exit: if i < 3 { 2 } else { 5 } }).collect();
        assert_eq!(training_pool(&labels, 2, 8).len(), 10);
        assert_eq!(training_pool(&labels, 5, 5), (3..10).collect::<Vec<u64>>());
    }
}
