//! Pre-exit predictor: a one-hidden-layer MLP over the layer-`N` hidden
//! state that classifies each item into an exit layer before the coarse
//! pass runs.

use std::collections::BTreeMap;
use std::path::Path;

use crate::codec::{ByteReader, ByteWriter};
use crate::datagen::Corpus;
use crate::encoder::{EncoderStack, Modality};
use crate::error::{check_dim, Error, Result};
use crate::exit_oracle::ExitLabel;
use crate::numerics::{matvec, matvec_t, Mat, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorConfig {
    pub superficial_n: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f32,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self { superficial_n: 3, hidden: 16, epochs: 200, learning_rate: 0.3, seed: 11 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorModel {
    pub n_superficial: usize,
    pub num_layers: usize,
    /// Per-feature standardization fitted on the training set.
    pub feature_mean: Vec<f32>,
    pub feature_scale: Vec<f32>,
    pub w1: Mat,
    pub b1: Vec<f32>,
    pub w2: Mat,
    pub b2: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: usize,
    pub final_loss: f32,
    pub exit_accuracy: f32,
    pub tolerance_accuracy: f32,
    pub mean_predicted: f32,
    pub mean_actual: f32,
}

/// Hidden state after the first `n` layers; the same vector the coarse pass
/// later resumes from.
pub fn superficial_embed(stack: &EncoderStack, modality: Modality, raw: &[f32], n: usize) -> Result<Vec<f32>> {
    if n == 0 || n >= stack.num_layers() {
        return Err(Error::OutOfRange(format!(
            "superficial depth {n} not in [1, {})",
            stack.num_layers()
        )));
    }
    let h0 = stack.embed_input(modality, raw)?;
    stack.forward_range(modality, 0, n, &h0)
}

/// Exit an item actually takes once `n` layers are already computed.
pub fn effective_exit(label: usize, n: usize, num_layers: usize) -> usize {
    label.clamp(n + 1, num_layers)
}

impl PredictorModel {
    fn standardize(&self, x: &[f32]) -> Vec<f32> {
        x.iter()
            .zip(&self.feature_mean)
            .zip(&self.feature_scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    fn hidden(&self, xs: &[f32]) -> Result<Vec<f32>> {
        let pre = matvec(&self.w1, xs)?;
        Ok(pre.iter().zip(&self.b1).map(|(p, b)| (p + b).tanh()).collect())
    }

    /// Class scores; entry `c` scores exit `c + 1`.
    pub fn scores(&self, feature: &[f32]) -> Result<Vec<f32>> {
        check_dim(self.feature_mean.len(), feature.len())?;
        let a = self.hidden(&self.standardize(feature))?;
        let z = matvec(&self.w2, &a)?;
        Ok(z.iter().zip(&self.b2).map(|(z, b)| z + b).collect())
    }

    pub fn predict_exit(&self, feature: &[f32]) -> Result<usize> {
        Ok(exit_from_scores(&self.scores(feature)?, self.n_superficial, self.num_layers))
    }

    pub fn size_bytes(&self) -> usize {
        4 * (self.w1.values().len()
            + self.b1.len()
            + self.w2.values().len()
            + self.b2.len()
            + self.feature_mean.len()
            + self.feature_scale.len())
    }
}

/// Argmax over exit classes with ties resolved toward the deeper exit,
/// then clamped to `[n + 1, num_layers]`.
pub fn exit_from_scores(scores: &[f32], n: usize, num_layers: usize) -> usize {
    let mut best = 0;
    for (c, s) in scores.iter().enumerate() {
        if *s >= scores[best] {
            best = c;
        }
    }
    effective_exit(best + 1, n, num_layers)
}

fn softmax(z: &[f32]) -> Vec<f32> {
    let max = z.iter().fold(f32::NEG_INFINITY, |m, v| m.max(*v));
    let e: Vec<f32> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f32 = e.iter().sum();
    e.iter().map(|v| v / sum).collect()
}

/// Full-batch gradient descent on softmax cross-entropy. Labels are the
/// oracle exits; they are clamped to the reachable range before training.
pub fn train_predictor(
    features: &[Vec<f32>],
    labels: &[usize],
    num_layers: usize,
    cfg: &PredictorConfig,
) -> Result<(PredictorModel, TrainReport)> {
    if features.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    check_dim(features.len(), labels.len())?;
    let n = cfg.superficial_n;
    if n == 0 || n >= num_layers {
        return Err(Error::OutOfRange(format!("superficial depth {n} not in [1, {num_layers})")));
    }
    if cfg.hidden == 0 || !(cfg.learning_rate.is_finite() && cfg.learning_rate > 0.0) {
        return Err(Error::invalid("hidden size and learning rate must be positive"));
    }
    let d = features[0].len();
    for f in features {
        check_dim(d, f.len())?;
    }
    if let Some(bad) = labels.iter().find(|e| **e == 0 || **e > num_layers) {
        return Err(Error::OutOfRange(format!("label {bad} not in [1, {num_layers}]")));
    }
    let targets: Vec<usize> = labels.iter().map(|e| effective_exit(*e, n, num_layers) - 1).collect();

    let count = features.len() as f32;
    let mut feature_mean = vec![0.0f32; d];
    for f in features {
        for (m, v) in feature_mean.iter_mut().zip(f) {
            *m += v / count;
        }
    }
    let mut feature_scale = vec![0.0f32; d];
    for f in features {
        for ((s, v), m) in feature_scale.iter_mut().zip(f).zip(&feature_mean) {
            *s += (v - m) * (v - m) / count;
        }
    }
    for s in &mut feature_scale {
        *s = if *s > 1e-12 { s.sqrt() } else { 1.0 };
    }

    let mut rng = Rng::new(cfg.seed);
    let h = cfg.hidden;
    let mut model = PredictorModel {
        n_superficial: n,
        num_layers,
        feature_mean,
        feature_scale,
        w1: Mat::random(h, d, 1.0 / (d as f32).sqrt(), &mut rng),
        b1: vec![0.0; h],
        w2: Mat::random(num_layers, h, 1.0 / (h as f32).sqrt(), &mut rng),
        b2: vec![0.0; num_layers],
    };
    let xs: Vec<Vec<f32>> = features.iter().map(|f| model.standardize(f)).collect();

    let mut final_loss = 0.0;
    for _ in 0..cfg.epochs {
        let mut gw1 = vec![0.0f32; h * d];
        let mut gb1 = vec![0.0f32; h];
        let mut gw2 = vec![0.0f32; num_layers * h];
        let mut gb2 = vec![0.0f32; num_layers];
        let mut loss = 0.0f32;
        for (x, t) in xs.iter().zip(&targets) {
            let a = model.hidden(x)?;
            let z: Vec<f32> = matvec(&model.w2, &a)?.iter().zip(&model.b2).map(|(z, b)| z + b).collect();
            let mut dz = softmax(&z);
            loss -= dz[*t].max(1e-12).ln() / count;
            dz[*t] -= 1.0;
            for v in &mut dz {
                *v /= count;
            }
            for (c, g) in dz.iter().enumerate() {
                gb2[c] += g;
                for (k, av) in a.iter().enumerate() {
                    gw2[c * h + k] += g * av;
                }
            }
            let da = matvec_t(&model.w2, &dz)?;
            for k in 0..h {
                let g = da[k] * (1.0 - a[k] * a[k]);
                gb1[k] += g;
                for (j, xv) in x.iter().enumerate() {
                    gw1[k * d + j] += g * xv;
                }
            }
        }
        let lr = cfg.learning_rate;
        step(model.w1.values_mut(), &gw1, lr);
        step(&mut model.b1, &gb1, lr);
        step(model.w2.values_mut(), &gw2, lr);
        step(&mut model.b2, &gb2, lr);
        final_loss = loss;
    }
    if !final_loss.is_finite() {
        return Err(Error::Diverged(format!("predictor loss {final_loss}")));
    }
    let eval = evaluate(&model, features, labels)?;
    let report = TrainReport {
        epochs: cfg.epochs,
        final_loss,
        exit_accuracy: eval.exit_accuracy,
        tolerance_accuracy: eval.tolerance_accuracy,
        mean_predicted: eval.mean_predicted,
        mean_actual: eval.mean_actual,
    };
    Ok((model, report))
}

fn step(params: &mut [f32], grad: &[f32], lr: f32) {
    for (p, g) in params.iter_mut().zip(grad) {
        *p -= lr * g;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub exit_accuracy: f32,
    pub tolerance_accuracy: f32,
    pub mean_predicted: f32,
    pub mean_actual: f32,
}

/// Accuracy against the effective (clamped) exits.
pub fn evaluate(model: &PredictorModel, features: &[Vec<f32>], labels: &[usize]) -> Result<Evaluation> {
    check_dim(features.len(), labels.len())?;
    if features.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let (mut exact, mut near, mut sum_p, mut sum_a) = (0usize, 0usize, 0usize, 0usize);
    for (f, e) in features.iter().zip(labels) {
        let p = model.predict_exit(f)?;
        let a = effective_exit(*e, model.n_superficial, model.num_layers);
        exact += (p == a) as usize;
        near += (p.abs_diff(a) <= 1) as usize;
        sum_p += p;
        sum_a += a;
    }
    let n = features.len() as f32;
    Ok(Evaluation {
        exit_accuracy: exact as f32 / n,
        tolerance_accuracy: near as f32 / n,
        mean_predicted: sum_p as f32 / n,
        mean_actual: sum_a as f32 / n,
    })
}

/// Labels aligned with corpus order.
pub fn aligned_labels(corpus: &Corpus, labels: &[ExitLabel]) -> Result<Vec<usize>> {
    let by_id: BTreeMap<u64, usize> = labels.iter().map(|l| (l.item_id, l.exit)).collect();
    corpus
        .items
        .iter()
        .map(|it| by_id.get(&it.item_id).copied().ok_or(Error::MissingId(it.item_id)))
        .collect()
}

pub fn superficial_features(stack: &EncoderStack, corpus: &Corpus, modality: Modality, n: usize) -> Result<Vec<Vec<f32>>> {
    corpus
        .items
        .iter()
        .map(|it| superficial_embed(stack, modality, it.raw(modality), n))
        .collect()
}

/// Seeded 80/20 split of `0..len` into (train, held-out) indices.
pub fn split_indices(len: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..len).collect();
    Rng::new(seed).shuffle(&mut idx);
    let cut = (len * 4).div_ceil(5).min(len.saturating_sub(1)).max(1.min(len));
    let held = idx.split_off(cut);
    (idx, held)
}

/// Held-out exit accuracy for each superficial depth in `depths`.
pub fn sweep_superficial_depth(
    stack: &EncoderStack,
    corpus: &Corpus,
    modality: Modality,
    labels: &[ExitLabel],
    depths: &[usize],
    cfg: &PredictorConfig,
) -> Result<BTreeMap<usize, f32>> {
    if depths.is_empty() {
        return Err(Error::invalid("empty depth list"));
    }
    let exits = aligned_labels(corpus, labels)?;
    let (train, held) = split_indices(corpus.len(), cfg.seed);
    if held.is_empty() {
        return Err(Error::invalid("corpus too small for a held-out split"));
    }
    let mut out = BTreeMap::new();
    for &n in depths {
        let feats = superficial_features(stack, corpus, modality, n)?;
        let pick = |ix: &[usize]| -> (Vec<Vec<f32>>, Vec<usize>) {
            (ix.iter().map(|i| feats[*i].clone()).collect(), ix.iter().map(|i| exits[*i]).collect())
        };
        let (tf, tl) = pick(&train);
        let (hf, hl) = pick(&held);
        let (model, _) = train_predictor(&tf, &tl, stack.num_layers(), &PredictorConfig { superficial_n: n, ..cfg.clone() })?;
        out.insert(n, evaluate(&model, &hf, &hl)?.exit_accuracy);
    }
    Ok(out)
}

pub const PREDICTOR_MAGIC: &[u8; 4] = b"EMPR";
pub const PREDICTOR_VERSION: u32 = 1;

/// `"EMPR" | u32 version | str meta | u32 n | u32 L | u32 d | u32 h |
/// mean | scale | w1 | b1 | w2 | b2`, little-endian.
pub fn write_predictor(model: &PredictorModel, meta: &str) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(PREDICTOR_MAGIC);
    w.u32(PREDICTOR_VERSION);
    w.str(meta);
    w.u32(model.n_superficial as u32);
    w.u32(model.num_layers as u32);
    w.u32(model.feature_mean.len() as u32);
    w.u32(model.b1.len() as u32);
    w.f32s(&model.feature_mean);
    w.f32s(&model.feature_scale);
    w.mat(&model.w1);
    w.f32s(&model.b1);
    w.mat(&model.w2);
    w.f32s(&model.b2);
    w.into_inner()
}

pub fn read_predictor(bytes: &[u8]) -> Result<(PredictorModel, String)> {
    let mut r = ByteReader::new(bytes);
    r.magic(PREDICTOR_MAGIC)?;
    let version = r.u32()?;
    if version != PREDICTOR_VERSION {
        return Err(Error::malformed(format!("predictor version {version}")));
    }
    let meta = r.str()?;
    let n = r.u32()? as usize;
    let l = r.u32()? as usize;
    let d = r.u32()? as usize;
    let h = r.u32()? as usize;
    if l < 2 || n == 0 || n >= l || d == 0 || h == 0 {
        return Err(Error::malformed(format!("predictor shape n={n} L={l} d={d} h={h}")));
    }
    let feature_mean = r.f32s(d)?;
    let feature_scale = r.f32s(d)?;
    if feature_scale.iter().any(|s| *s <= 0.0) {
        return Err(Error::malformed("non-positive feature scale"));
    }
    let w1 = r.mat_shaped(h, d)?;
    let b1 = r.f32s(h)?;
    let w2 = r.mat_shaped(l, h)?;
    let b2 = r.f32s(l)?;
    if !r.is_empty() {
        return Err(Error::malformed("trailing bytes after predictor"));
    }
    let model = PredictorModel { n_superficial: n, num_layers: l, feature_mean, feature_scale, w1, b1, w2, b2 };
    Ok((model, meta))
}

pub fn save_predictor(model: &PredictorModel, path: &Path, meta: &str) -> Result<()> {
    std::fs::write(path, write_predictor(model, meta))?;
    Ok(())
}

pub fn load_predictor(path: &Path) -> Result<(PredictorModel, String)> {
    read_predictor(&std::fs::read(path)?)
}
