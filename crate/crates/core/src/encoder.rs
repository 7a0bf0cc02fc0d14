//! Layerwise toy multimodal encoder: per-modality input lift and residual
//! MLP blocks, one shared LoRA suite, and a single frozen output head that
//! every exit uses.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::codec::{ByteReader, ByteWriter};
use crate::error::{check_dim, Error, Result};
use crate::numerics::{gelu, l2_normalize, matvec, Mat, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    A,
    B,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::A, Modality::B];

    pub fn tag(self) -> u8 {
        match self {
            Modality::A => b'A',
            Modality::B => b'B',
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            b'A' | b'a' => Ok(Modality::A),
            b'B' | b'b' => Ok(Modality::B),
            other => Err(Error::invalid(format!("unknown modality tag {:?}", other as char))),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.tag() as char)
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.as_bytes() {
            [t] => Modality::from_tag(*t),
            _ => Err(Error::invalid(format!("unknown modality {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub unified_dim: usize,
    pub input_dim: usize,
    pub modalities: Vec<Modality>,
    pub seed: u64,
    /// 0 disables LoRA entirely.
    pub lora_rank: usize,
    pub lora_alpha: f32,
    /// Relative size of the per-modality perturbation on top of the
    /// weights all modalities share. Small values keep the modalities in
    /// one aligned space, the way a pretrained multimodal encoder is.
    pub modality_gap: f32,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 12,
            d_model: 64,
            unified_dim: 32,
            input_dim: 32,
            modalities: vec![Modality::A, Modality::B],
            seed: 42,
            lora_rank: 4,
            lora_alpha: 8.0,
            modality_gap: 0.05,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=255).contains(&self.num_layers) {
            return Err(Error::invalid(format!("num_layers {} not in [2, 255]", self.num_layers)));
        }
        if self.d_model == 0 || self.input_dim == 0 || self.unified_dim == 0 {
            return Err(Error::invalid("dimensions must be positive"));
        }
        if self.unified_dim > self.d_model {
            return Err(Error::invalid(format!(
                "unified_dim {} exceeds d_model {}",
                self.unified_dim, self.d_model
            )));
        }
        if self.lora_rank > self.d_model {
            return Err(Error::invalid("lora_rank exceeds d_model"));
        }
        if self.lora_rank > 0 && !(self.lora_alpha.is_finite() && self.lora_alpha > 0.0) {
            return Err(Error::invalid("lora_alpha must be positive"));
        }
        if !(self.modality_gap.is_finite() && self.modality_gap >= 0.0) {
            return Err(Error::invalid("modality_gap must be non-negative"));
        }
        if self.modalities.is_empty() {
            return Err(Error::invalid("at least one modality required"));
        }
        let mut seen = self.modalities.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.modalities.len() {
            return Err(Error::invalid("duplicate modality"));
        }
        Ok(())
    }

    pub fn lora_scale(&self) -> f32 {
        if self.lora_rank == 0 {
            0.0
        } else {
            self.lora_alpha / self.lora_rank as f32
        }
    }
}

/// One low-rank adapter pair: `delta = scale * b * (a * x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub a: Mat,
    pub b: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerBlock {
    pub w_up: Mat,
    pub w_down: Mat,
    pub lora: Option<LoraPair>,
}

impl LayerBlock {
    /// `x + w_down * gelu(w_up * x) [+ scale * b * (a * x)]`.
    ///
    /// The adapter term is skipped when `lora_scale` is `None` or the block
    /// has no adapter.
    pub fn forward(&self, x: &[f32], lora_scale: Option<f32>) -> Result<Vec<f32>> {
        let pre = matvec(&self.w_up, x)?;
        let act: Vec<f32> = pre.iter().map(|v| gelu(*v)).collect();
        let mlp = matvec(&self.w_down, &act)?;
        let mut out: Vec<f32> = x.iter().zip(&mlp).map(|(a, b)| a + b).collect();
        if let (Some(scale), Some(lora)) = (lora_scale, &self.lora) {
            apply_lora(&mut out, lora, scale, x)?;
        }
        Ok(out)
    }

    /// Same as [`forward`](Self::forward) but with an externally supplied
    /// adapter in place of the block's own.
    pub fn forward_with(&self, x: &[f32], lora: Option<(&LoraPair, f32)>) -> Result<Vec<f32>> {
        let mut out = self.forward(x, None)?;
        if let Some((pair, scale)) = lora {
            apply_lora(&mut out, pair, scale, x)?;
        }
        Ok(out)
    }
}

fn apply_lora(out: &mut [f32], lora: &LoraPair, scale: f32, x: &[f32]) -> Result<()> {
    let low = matvec(&lora.a, x)?;
    let delta = matvec(&lora.b, &low)?;
    for (o, d) in out.iter_mut().zip(&delta) {
        *o += scale * d;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalityTower {
    pub lift: Mat,
    pub blocks: Vec<LayerBlock>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputHead {
    pub proj: Mat,
}

impl OutputHead {
    pub fn apply(&self, hidden: &[f32]) -> Result<Vec<f32>> {
        Ok(l2_normalize(&matvec(&self.proj, hidden)?))
    }
}

/// Post-block, pre-head hidden state at an exit layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSnapshot {
    pub item_id: u64,
    pub layer: usize,
    pub hidden: Vec<f32>,
}

pub struct EncoderStack {
    config: EncoderConfig,
    towers: Vec<ModalityTower>,
    head: OutputHead,
    layer_calls: AtomicU64,
}

impl Clone for EncoderStack {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            towers: self.towers.clone(),
            head: self.head.clone(),
            layer_calls: AtomicU64::new(self.layer_calls()),
        }
    }
}

impl PartialEq for EncoderStack {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.towers == other.towers && self.head == other.head
    }
}

impl fmt::Debug for EncoderStack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EncoderStack")
            .field("config", &self.config)
            .field("layer_calls", &self.layer_calls())
            .finish_non_exhaustive()
    }
}

impl EncoderStack {
    /// Seeded initialization. Each weight is `(shared + gap * own) / sqrt(fan_in)`
    /// where `shared` is common to all modalities; adapter `b` starts at
    /// zero so a fresh suite is an identity delta.
    pub fn init(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut shared_rng = Rng::new(config.seed);
        let inv_d = 1.0 / (d as f32).sqrt();
        let inv_in = 1.0 / (config.input_dim as f32).sqrt();

        let shared_lift = Mat::random(d, config.input_dim, 1.0, &mut shared_rng);
        let shared_blocks: Vec<(Mat, Mat)> = (0..config.num_layers)
            .map(|_| {
                let up = Mat::random(d, d, 1.0, &mut shared_rng);
                let down = Mat::random(d, d, 1.0, &mut shared_rng);
                (up, down)
            })
            .collect();
        let head = OutputHead { proj: Mat::random(config.unified_dim, d, inv_d, &mut shared_rng) };

        let mut towers = Vec::with_capacity(config.modalities.len());
        for m in &config.modalities {
            let mut rng = Rng::new(config.seed ^ (0x5151_0000 + m.tag() as u64).wrapping_mul(0x9E37_79B9));
            let gap = config.modality_gap;
            let perturb = |base: &Mat, scale: f32, rng: &mut Rng| {
                let noise = Mat::random(base.rows(), base.cols(), 1.0, rng);
                let values = base
                    .values()
                    .iter()
                    .zip(noise.values())
                    .map(|(b, n)| (b + gap * n) * scale)
                    .collect();
                Mat::new(base.rows(), base.cols(), values).expect("same shape")
            };
            let lift = perturb(&shared_lift, inv_in, &mut rng);
            let mut blocks = Vec::with_capacity(config.num_layers);
            for (up, down) in &shared_blocks {
                let w_up = perturb(up, inv_d, &mut rng);
                let w_down = perturb(down, inv_d, &mut rng);
                let lora = (config.lora_rank > 0).then(|| LoraPair {
                    a: Mat::random(config.lora_rank, d, inv_d, &mut rng),
                    b: Mat::zeros(d, config.lora_rank),
                });
                blocks.push(LayerBlock { w_up, w_down, lora });
            }
            towers.push(ModalityTower { lift, blocks });
        }
        Ok(Self { config, towers, head, layer_calls: AtomicU64::new(0) })
    }

    pub fn from_parts(config: EncoderConfig, towers: Vec<ModalityTower>, head: OutputHead) -> Result<Self> {
        config.validate()?;
        check_dim(config.modalities.len(), towers.len())?;
        let d = config.d_model;
        for t in &towers {
            check_dim(config.num_layers, t.blocks.len())?;
            if t.lift.rows() != d || t.lift.cols() != config.input_dim {
                return Err(Error::invalid("lift shape"));
            }
            for b in &t.blocks {
                validate_block(&config, b)?;
            }
        }
        if head.proj.rows() != config.unified_dim || head.proj.cols() != d {
            return Err(Error::invalid("head shape"));
        }
        Ok(Self { config, towers, head, layer_calls: AtomicU64::new(0) })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    pub fn head(&self) -> &OutputHead {
        &self.head
    }

    pub fn tower(&self, modality: Modality) -> Result<&ModalityTower> {
        let idx = self.tower_index(modality)?;
        Ok(&self.towers[idx])
    }

    pub fn tower_mut(&mut self, modality: Modality) -> Result<&mut ModalityTower> {
        let idx = self.tower_index(modality)?;
        Ok(&mut self.towers[idx])
    }

    fn tower_index(&self, modality: Modality) -> Result<usize> {
        self.config
            .modalities
            .iter()
            .position(|m| *m == modality)
            .ok_or_else(|| Error::invalid(format!("modality {modality} not configured")))
    }

    /// 1-based layer access.
    pub fn block(&self, modality: Modality, layer: usize) -> Result<&LayerBlock> {
        self.check_layer(layer)?;
        Ok(&self.tower(modality)?.blocks[layer - 1])
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer == 0 || layer > self.config.num_layers {
            return Err(Error::OutOfRange(format!(
                "layer {layer} not in [1, {}]",
                self.config.num_layers
            )));
        }
        Ok(())
    }

    /// Total block evaluations since creation or the last reset.
    pub fn layer_calls(&self) -> u64 {
        self.layer_calls.load(Ordering::Relaxed)
    }

    pub fn reset_layer_calls(&self) {
        self.layer_calls.store(0, Ordering::Relaxed);
    }

    pub(crate) fn count_layer_call(&self) {
        self.layer_calls.fetch_add(1, Ordering::Relaxed);
    }

    pub fn forward_layer(&self, modality: Modality, layer: usize, x: &[f32], lora_on: bool) -> Result<Vec<f32>> {
        check_dim(self.config.d_model, x.len())?;
        let block = self.block(modality, layer)?;
        self.count_layer_call();
        block.forward(x, lora_on.then(|| self.config.lora_scale()))
    }

    /// Runs layers `from+1 ..= to` starting from the layer-`from` state,
    /// adapters enabled.
    pub fn forward_range(&self, modality: Modality, from: usize, to: usize, x: &[f32]) -> Result<Vec<f32>> {
        if from >= to || to > self.config.num_layers {
            return Err(Error::OutOfRange(format!(
                "range ({from}, {to}] not within (0, {}]",
                self.config.num_layers
            )));
        }
        check_dim(self.config.d_model, x.len())?;
        let mut h = x.to_vec();
        for layer in from + 1..=to {
            h = self.forward_layer(modality, layer, &h, true)?;
        }
        Ok(h)
    }

    /// Hidden states for layers `0..=to`, index `i` holding the layer-`i` state.
    pub fn trajectory(&self, modality: Modality, raw: &[f32], to: usize) -> Result<Vec<Vec<f32>>> {
        if to > self.config.num_layers {
            return Err(Error::OutOfRange(format!("layer {to}")));
        }
        let mut states = Vec::with_capacity(to + 1);
        states.push(self.embed_input(modality, raw)?);
        for layer in 1..=to {
            let next = self.forward_layer(modality, layer, &states[layer - 1], true)?;
            states.push(next);
        }
        Ok(states)
    }

    /// Layer-0 state: the seeded linear lift of a raw input.
    pub fn embed_input(&self, modality: Modality, raw: &[f32]) -> Result<Vec<f32>> {
        check_dim(self.config.input_dim, raw.len())?;
        matvec(&self.tower(modality)?.lift, raw)
    }

    pub fn apply_head(&self, hidden: &[f32]) -> Result<Vec<f32>> {
        check_dim(self.config.d_model, hidden.len())?;
        self.head.apply(hidden)
    }

    pub fn coarse_embed(
        &self,
        modality: Modality,
        item_id: u64,
        raw: &[f32],
        exit: usize,
    ) -> Result<(Vec<f32>, ActivationSnapshot)> {
        self.check_layer(exit)?;
        let h0 = self.embed_input(modality, raw)?;
        let hidden = self.forward_range(modality, 0, exit, &h0)?;
        let emb = self.apply_head(&hidden)?;
        Ok((emb, ActivationSnapshot { item_id, layer: exit, hidden }))
    }

    pub fn fine_embed(&self, modality: Modality, raw: &[f32]) -> Result<Vec<f32>> {
        Ok(self.coarse_embed(modality, 0, raw, self.config.num_layers)?.0)
    }

    /// Resumes from a snapshot at layer `e` and returns the full-depth
    /// embedding.
    pub fn resume_to_fine(&self, modality: Modality, layer: usize, hidden: &[f32]) -> Result<Vec<f32>> {
        let l = self.config.num_layers;
        if layer == l {
            return self.apply_head(hidden);
        }
        if layer > l {
            return Err(Error::OutOfRange(format!("layer {layer}")));
        }
        self.apply_head(&self.forward_range(modality, layer, l, hidden)?)
    }

    /// Adapters for every block of one modality, in layer order.
    pub fn lora_suite(&self, modality: Modality) -> Result<Vec<Option<LoraPair>>> {
        Ok(self.tower(modality)?.blocks.iter().map(|b| b.lora.clone()).collect())
    }

    pub fn set_lora(&mut self, modality: Modality, layer: usize, pair: LoraPair) -> Result<()> {
        self.check_layer(layer)?;
        let r = self.config.lora_rank;
        let d = self.config.d_model;
        if r == 0 || pair.a.rows() != r || pair.a.cols() != d || pair.b.rows() != d || pair.b.cols() != r {
            return Err(Error::invalid("lora pair shape does not match config"));
        }
        self.tower_mut(modality)?.blocks[layer - 1].lora = Some(pair);
        Ok(())
    }
}

fn validate_block(cfg: &EncoderConfig, b: &LayerBlock) -> Result<()> {
    let d = cfg.d_model;
    let r = cfg.lora_rank;
    let ok = b.w_up.rows() == d
        && b.w_up.cols() == d
        && b.w_down.rows() == d
        && b.w_down.cols() == d
        && match &b.lora {
            None => r == 0,
            Some(p) => r > 0 && p.a.rows() == r && p.a.cols() == d && p.b.rows() == d && p.b.cols() == r,
        };
    if ok {
        Ok(())
    } else {
        Err(Error::invalid("block shape does not match config"))
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EMBR";
pub const INDEX_MAGIC: &[u8; 4] = b"EMIX";
pub const CHECKPOINT_VERSION: u32 = 1;
const NO_OFFSET: u64 = u64::MAX;

/// Byte location of one layer's weights inside a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSegment {
    pub modality: Modality,
    pub layer: usize,
    /// `w_up` then `w_down`.
    pub base_offset: u64,
    /// `a` then `b`, when the suite exists.
    pub lora_offset: Option<u64>,
}

/// Parsed checkpoint header plus the per-layer offset table.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointIndex {
    pub config: EncoderConfig,
    pub meta: String,
    pub segments: Vec<LayerSegment>,
    pub head_offset: u64,
}

impl CheckpointIndex {
    pub fn segment(&self, modality: Modality, layer: usize) -> Result<&LayerSegment> {
        self.segments
            .iter()
            .find(|s| s.modality == modality && s.layer == layer)
            .ok_or_else(|| Error::OutOfRange(format!("no segment for {modality} layer {layer}")))
    }

    /// Bytes spanned by one base segment (two d×d matrices).
    pub fn base_len(&self) -> usize {
        2 * (8 + 4 * self.config.d_model * self.config.d_model)
    }

    pub fn lora_len(&self) -> usize {
        let r = self.config.lora_rank;
        2 * (8 + 4 * r * self.config.d_model)
    }
}

fn write_config(w: &mut ByteWriter, c: &EncoderConfig) {
    w.u32(c.num_layers as u32);
    w.u32(c.d_model as u32);
    w.u32(c.unified_dim as u32);
    w.u32(c.input_dim as u32);
    w.u64(c.seed);
    w.u32(c.lora_rank as u32);
    w.f32(c.lora_alpha);
    w.f32(c.modality_gap);
    w.u32(c.modalities.len() as u32);
    for m in &c.modalities {
        w.u8(m.tag());
    }
}

fn read_config(r: &mut ByteReader<'_>) -> Result<EncoderConfig> {
    let num_layers = r.u32()? as usize;
    let d_model = r.u32()? as usize;
    let unified_dim = r.u32()? as usize;
    let input_dim = r.u32()? as usize;
    let seed = r.u64()?;
    let lora_rank = r.u32()? as usize;
    let lora_alpha = r.f32()?;
    let modality_gap = r.f32()?;
    let n = r.u32()? as usize;
    if n > Modality::ALL.len() {
        return Err(Error::malformed(format!("{n} modalities")));
    }
    let modalities = (0..n)
        .map(|_| Modality::from_tag(r.u8()?).map_err(|e| Error::malformed(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let cfg = EncoderConfig {
        num_layers,
        d_model,
        unified_dim,
        input_dim,
        modalities,
        seed,
        lora_rank,
        lora_alpha,
        modality_gap,
    };
    cfg.validate().map_err(|e| Error::malformed(e.to_string()))?;
    Ok(cfg)
}

/// Serializes a stack. Layout, all little-endian:
///
/// ```text
/// "EMBR" | u32 version | config | str meta
/// per modality: lift, then per layer: w_up, w_down
/// head
/// per modality, per layer: lora a, lora b        (rank > 0 only)
/// u32 n | n x (u8 modality, u32 layer, u64 base_off, u64 lora_off)
/// u64 index_offset | "EMIX"
/// ```
pub fn write_checkpoint(stack: &EncoderStack, meta: &str) -> Vec<u8> {
    let cfg = &stack.config;
    let mut w = ByteWriter::new();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    write_config(&mut w, cfg);
    w.str(meta);

    let mut base_offsets = Vec::new();
    for (m, tower) in cfg.modalities.iter().zip(&stack.towers) {
        w.mat(&tower.lift);
        for (i, b) in tower.blocks.iter().enumerate() {
            base_offsets.push((*m, i + 1, w.len() as u64));
            w.mat(&b.w_up);
            w.mat(&b.w_down);
        }
    }
    let head_offset = w.len() as u64;
    w.mat(&stack.head.proj);
    let mut lora_offsets = Vec::new();
    if cfg.lora_rank > 0 {
        for tower in &stack.towers {
            for b in &tower.blocks {
                let pair = b.lora.as_ref().expect("validated: rank > 0 implies adapters");
                lora_offsets.push(w.len() as u64);
                w.mat(&pair.a);
                w.mat(&pair.b);
            }
        }
    }
    let index_offset = w.len() as u64;
    w.u32(base_offsets.len() as u32);
    for (k, (m, layer, off)) in base_offsets.iter().enumerate() {
        w.u8(m.tag());
        w.u32(*layer as u32);
        w.u64(*off);
        w.u64(lora_offsets.get(k).copied().unwrap_or(NO_OFFSET));
    }
    w.u64(head_offset);
    w.u64(index_offset);
    w.bytes(INDEX_MAGIC);
    w.into_inner()
}

/// Parses only the header and the trailing offset table.
pub fn read_checkpoint_index(bytes: &[u8]) -> Result<CheckpointIndex> {
    let mut r = ByteReader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::malformed(format!("checkpoint version {version}")));
    }
    let config = read_config(&mut r)?;
    let meta = r.str()?;
    let (index_pos, trailer) = read_trailer(bytes, r.pos())?;
    let mut ir = ByteReader::at(bytes, index_pos)?;
    let n = ir.u32()? as usize;
    if n != config.modalities.len() * config.num_layers {
        return Err(Error::malformed(format!("index has {n} segments")));
    }
    let mut segments = Vec::with_capacity(n);
    for _ in 0..n {
        let modality = Modality::from_tag(ir.u8()?).map_err(|e| Error::malformed(e.to_string()))?;
        let layer = ir.u32()? as usize;
        let base_offset = ir.u64()?;
        let lora = ir.u64()?;
        let lora_offset = (lora != NO_OFFSET).then_some(lora);
        if lora_offset.is_some() != (config.lora_rank > 0) {
            return Err(Error::malformed("adapter offsets disagree with lora_rank"));
        }
        segments.push(LayerSegment { modality, layer, base_offset, lora_offset });
    }
    let head_offset = ir.u64()?;
    if ir.pos() != trailer {
        return Err(Error::malformed("index length mismatch"));
    }
    Ok(CheckpointIndex { config, meta, segments, head_offset })
}

fn read_trailer(bytes: &[u8], header_end: usize) -> Result<(usize, usize)> {
    if bytes.len() < header_end + 12 {
        return Err(Error::malformed("checkpoint truncated before trailer"));
    }
    let trailer = bytes.len() - 12;
    let mut tr = ByteReader::at(bytes, trailer)?;
    let index_pos = tr.u64()? as usize;
    tr.magic(INDEX_MAGIC)?;
    if index_pos < header_end || index_pos > trailer {
        return Err(Error::malformed(format!("index offset {index_pos} out of bounds")));
    }
    Ok((index_pos, trailer))
}

/// Reads one layer's block from a checkpoint byte range positioned at the
/// segment offsets recorded in `index`.
pub fn read_layer_block(index: &CheckpointIndex, base: &[u8], lora: Option<&[u8]>) -> Result<LayerBlock> {
    let d = index.config.d_model;
    let r = index.config.lora_rank;
    let mut br = ByteReader::new(base);
    let w_up = br.mat_shaped(d, d)?;
    let w_down = br.mat_shaped(d, d)?;
    let lora = match lora {
        Some(bytes) => {
            let mut lr = ByteReader::new(bytes);
            Some(LoraPair { a: lr.mat_shaped(r, d)?, b: lr.mat_shaped(d, r)? })
        }
        None if r > 0 => return Err(Error::malformed("missing adapter segment")),
        None => None,
    };
    Ok(LayerBlock { w_up, w_down, lora })
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<(EncoderStack, String)> {
    let index = read_checkpoint_index(bytes)?;
    let cfg = index.config.clone();
    let d = cfg.d_model;
    let mut r = ByteReader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    r.u32()?;
    read_config(&mut r)?;
    r.str()?;
    let mut towers = Vec::with_capacity(cfg.modalities.len());
    let mut k = 0;
    for m in &cfg.modalities {
        let lift = r.mat_shaped(d, cfg.input_dim)?;
        let mut blocks = Vec::with_capacity(cfg.num_layers);
        for layer in 1..=cfg.num_layers {
            let seg = index.segments[k];
            k += 1;
            if seg.modality != *m || seg.layer != layer || seg.base_offset != r.pos() as u64 {
                return Err(Error::malformed(format!("index entry for {m} layer {layer} disagrees with body")));
            }
            let w_up = r.mat_shaped(d, d)?;
            let w_down = r.mat_shaped(d, d)?;
            blocks.push(LayerBlock { w_up, w_down, lora: None });
        }
        towers.push(ModalityTower { lift, blocks });
    }
    if index.head_offset != r.pos() as u64 {
        return Err(Error::malformed("head offset disagrees with body"));
    }
    let head = OutputHead { proj: r.mat_shaped(cfg.unified_dim, d)? };
    if cfg.lora_rank > 0 {
        let mut k = 0;
        for tower in &mut towers {
            for block in &mut tower.blocks {
                if index.segments[k].lora_offset != Some(r.pos() as u64) {
                    return Err(Error::malformed("adapter offset disagrees with body"));
                }
                k += 1;
                let a = r.mat_shaped(cfg.lora_rank, d)?;
                let b = r.mat_shaped(d, cfg.lora_rank)?;
                block.lora = Some(LoraPair { a, b });
            }
        }
    }
    let (index_pos, _) = read_trailer(bytes, 0)?;
    if r.pos() != index_pos {
        return Err(Error::malformed("unexpected bytes before index"));
    }
    let stack = EncoderStack::from_parts(cfg, towers, head).map_err(|e| Error::malformed(e.to_string()))?;
    Ok((stack, index.meta))
}
