//! Exit-grouped batching and the layerwise load/compute pipeline.
//!
//! Weights are streamed one layer at a time from a checkpoint file. A loader
//! thread reads layer `i+1` while the computer runs layer `i` over a batch;
//! the two meet through a bounded two-slot channel.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use crate::datagen::Corpus;
use crate::encoder::{
    read_checkpoint_index, write_checkpoint, ActivationSnapshot, CheckpointIndex, EncoderConfig, EncoderStack,
    LayerBlock, Modality, OutputHead,
};
use crate::error::{Error, Result};
use crate::numerics::{dequantize_int4, matvec, quantize_int4, Mat};
use crate::predictor::PredictorModel;
use crate::store::{EmbeddingRecord, RecordState};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExitGroup {
    pub exit: usize,
    /// Positions into the planned input, in input order.
    pub members: Vec<usize>,
}

/// Stable partition by exit, ascending, each part chunked to at most
/// `max_batch` members.
pub fn plan_batches(exits: &[usize], max_batch: usize) -> Result<Vec<ExitGroup>> {
    if max_batch == 0 {
        return Err(Error::invalid("max_batch must be at least 1"));
    }
    let mut by_exit: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (k, e) in exits.iter().enumerate() {
        by_exit.entry(*e).or_default().push(k);
    }
    Ok(by_exit
        .into_iter()
        .flat_map(|(exit, members)| {
            members
                .chunks(max_batch)
                .map(|c| ExitGroup { exit, members: c.to_vec() })
                .collect::<Vec<_>>()
        })
        .collect())
}

/// Checkpoint file read one layer segment at a time.
#[derive(Debug)]
pub struct LayerStore {
    path: PathBuf,
    file: Mutex<File>,
    index: CheckpointIndex,
    lifts: Vec<(Modality, Mat)>,
    head: OutputHead,
}

impl LayerStore {
    pub fn open(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let index = read_checkpoint_index(&bytes)?;
        let cfg = &index.config;
        let lift_len = 8 + 4 * cfg.d_model * cfg.input_dim;
        let mut lifts = Vec::new();
        for m in &cfg.modalities {
            let first = index.segment(*m, 1)?.base_offset as usize;
            let start = first.checked_sub(lift_len).ok_or_else(|| Error::malformed("lift offset"))?;
            let mut r = crate::codec::ByteReader::at(&bytes, start)?;
            lifts.push((*m, r.mat_shaped(cfg.d_model, cfg.input_dim)?));
        }
        let mut r = crate::codec::ByteReader::at(&bytes, index.head_offset as usize)?;
        let head = OutputHead { proj: r.mat_shaped(cfg.unified_dim, cfg.d_model)? };
        let file = Mutex::new(File::open(path)?);
        Ok(Self { path: path.to_path_buf(), file, index, lifts, head })
    }

    /// Writes `stack` as a checkpoint and opens it.
    pub fn create(stack: &EncoderStack, path: &Path, meta: &str) -> Result<Self> {
        std::fs::write(path, write_checkpoint(stack, meta))?;
        Self::open(path)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.index.config
    }

    pub fn head(&self) -> &OutputHead {
        &self.head
    }

    fn read_at(&self, offset: u64, len: usize) -> Result<Vec<u8>> {
        let mut file = self.file.lock().map_err(|_| Error::invalid("layer store lock poisoned"))?;
        file.seek(SeekFrom::Start(offset))?;
        let mut buf = vec![0u8; len];
        file.read_exact(&mut buf)?;
        Ok(buf)
    }

    /// Reads one layer's weights (and adapter) from disk.
    pub fn load_block(&self, modality: Modality, layer: usize) -> Result<LayerBlock> {
        let seg = *self.index.segment(modality, layer)?;
        let base = self.read_at(seg.base_offset, self.index.base_len())?;
        let lora = match seg.lora_offset {
            Some(off) => Some(self.read_at(off, self.index.lora_len())?),
            None => None,
        };
        crate::encoder::read_layer_block(&self.index, &base, lora.as_deref())
    }

    pub fn embed_input(&self, modality: Modality, raw: &[f32]) -> Result<Vec<f32>> {
        let lift = &self
            .lifts
            .iter()
            .find(|(m, _)| *m == modality)
            .ok_or_else(|| Error::invalid(format!("modality {modality} not in checkpoint")))?
            .1;
        crate::error::check_dim(self.config().input_dim, raw.len())?;
        matvec(lift, raw)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PipelineOptions {
    pub max_batch: usize,
    pub pipelined: bool,
    /// When set, every load (compute) stage is padded to at least this long.
    pub inject_load: Option<Duration>,
    pub inject_compute: Option<Duration>,
    /// Hold layer-`N` states as INT4 between the superficial pass and the
    /// group passes.
    pub quantize_superficial: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self { max_batch: 32, pipelined: true, inject_load: None, inject_compute: None, quantize_superficial: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageTiming {
    pub layer: usize,
    pub batch: usize,
    pub load: Duration,
    pub compute: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineStats {
    pub stages: Vec<StageTiming>,
    pub wall: Duration,
    /// Per-item block evaluations, indexed by layer - 1.
    pub layer_invocations: Vec<u64>,
}

impl PipelineStats {
    pub fn total_load(&self) -> Duration {
        self.stages.iter().map(|s| s.load).sum()
    }

    pub fn total_compute(&self) -> Duration {
        self.stages.iter().map(|s| s.compute).sum()
    }

    /// Load and compute run back to back.
    pub fn serial(&self) -> Duration {
        self.total_load() + self.total_compute()
    }

    /// Two-role flow-shop makespan for the recorded stage durations.
    pub fn modeled_wall(&self) -> Duration {
        let loads: Vec<f64> = self.stages.iter().map(|s| s.load.as_secs_f64()).collect();
        let computes: Vec<f64> = self.stages.iter().map(|s| s.compute.as_secs_f64()).collect();
        Duration::from_secs_f64(flow_shop_makespan(&loads, &computes))
    }

    pub fn overlap_efficiency(&self) -> f64 {
        let serial = self.serial().as_secs_f64();
        if serial == 0.0 {
            0.0
        } else {
            1.0 - self.wall.as_secs_f64() / serial
        }
    }

    pub fn total_invocations(&self) -> u64 {
        self.layer_invocations.iter().sum()
    }
}

/// Makespan of stages that each load then compute, where loading stage
/// `i+1` may overlap computing stage `i`.
pub fn flow_shop_makespan(loads: &[f64], computes: &[f64]) -> f64 {
    let mut loaded = 0.0f64;
    let mut done = 0.0f64;
    for (l, c) in loads.iter().zip(computes) {
        loaded += l;
        done = done.max(loaded) + c;
    }
    done
}

#[derive(Debug)]
pub struct PipelineOutput {
    /// One record per item, in input order.
    pub records: Vec<EmbeddingRecord>,
    pub snapshots: Vec<ActivationSnapshot>,
    pub predicted: Vec<usize>,
    pub stats: PipelineStats,
}

/// Where exits come from once the superficial pass is done.
pub enum ExitSource<'a> {
    Predictor(&'a PredictorModel),
    /// Fixed exits per input position, together with the superficial depth.
    Fixed { n: usize, exits: &'a [usize] },
}

struct Stage {
    layer: usize,
    batch: Vec<usize>,
}

fn pad_to(start: Instant, target: Option<Duration>) {
    if let Some(t) = target {
        let spent = start.elapsed();
        if spent < t {
            thread::sleep(t - spent);
        }
    }
}

/// Runs a list of stages, each applying one layer to the hidden states of
/// its batch. With `pipelined`, a loader thread reads the next stage's layer
/// while the current one computes.
fn run_stages(
    store: &LayerStore,
    modality: Modality,
    stages: &[Stage],
    states: &mut [Vec<f32>],
    opts: &PipelineOptions,
    timings: &mut Vec<StageTiming>,
    invocations: &mut [u64],
) -> Result<()> {
    let scale = store.config().lora_scale();
    let load = |layer: usize| -> Result<(LayerBlock, Duration)> {
        let t = Instant::now();
        let block = store.load_block(modality, layer)?;
        pad_to(t, opts.inject_load);
        Ok((block, t.elapsed()))
    };
    let mut compute = |stage: &Stage, block: &LayerBlock, states: &mut [Vec<f32>]| -> Result<Duration> {
        let t = Instant::now();
        for k in &stage.batch {
            states[*k] = block.forward(&states[*k], Some(scale))?;
        }
        invocations[stage.layer - 1] += stage.batch.len() as u64;
        pad_to(t, opts.inject_compute);
        Ok(t.elapsed())
    };
    if !opts.pipelined {
        for stage in stages {
            let (block, l) = load(stage.layer)?;
            let c = compute(stage, &block, states)?;
            timings.push(StageTiming { layer: stage.layer, batch: stage.batch.len(), load: l, compute: c });
        }
        return Ok(());
    }
    thread::scope(|scope| -> Result<()> {
        // two slots: one block being computed, one waiting
        let (tx, rx) = sync_channel::<Result<(LayerBlock, Duration)>>(1);
        let layers: Vec<usize> = stages.iter().map(|s| s.layer).collect();
        let loader = scope.spawn(move || {
            for layer in layers {
                let loaded = load(layer);
                let failed = loaded.is_err();
                if tx.send(loaded).is_err() || failed {
                    break;
                }
            }
        });
        let mut result = Ok(());
        for stage in stages {
            let (block, l) = match rx.recv() {
                Ok(Ok(v)) => v,
                Ok(Err(e)) => {
                    result = Err(e);
                    break;
                }
                Err(_) => {
                    result = Err(Error::invalid("layer loader stopped early"));
                    break;
                }
            };
            match compute(stage, &block, states) {
                Ok(c) => timings.push(StageTiming { layer: stage.layer, batch: stage.batch.len(), load: l, compute: c }),
                Err(e) => {
                    result = Err(e);
                    break;
                }
            }
        }
        drop(rx);
        loader.join().map_err(|_| Error::invalid("layer loader panicked"))?;
        result
    })
}

/// Offline coarse embedding: superficial pass over every item, exit
/// prediction, then one pass per exit group from layer `N` to its exit.
pub fn run_embedding_pipeline(
    store: &LayerStore,
    corpus: &Corpus,
    modality: Modality,
    exits: ExitSource<'_>,
    opts: &PipelineOptions,
) -> Result<PipelineOutput> {
    let l = store.config().num_layers;
    let n = match &exits {
        ExitSource::Predictor(p) => {
            if p.num_layers != l {
                return Err(Error::invalid(format!("predictor built for {} layers, encoder has {l}", p.num_layers)));
            }
            p.n_superficial
        }
        ExitSource::Fixed { n, exits } => {
            if exits.len() != corpus.len() {
                return Err(Error::DimensionMismatch { expected: corpus.len(), got: exits.len() });
            }
            if let Some(e) = exits.iter().find(|e| **e <= *n || **e > l) {
                return Err(Error::OutOfRange(format!("exit {e} not in [{}, {l}]", n + 1)));
            }
            *n
        }
    };
    if n >= l {
        return Err(Error::OutOfRange(format!("superficial depth {n} must be below {l}")));
    }
    if opts.max_batch == 0 {
        return Err(Error::invalid("max_batch must be at least 1"));
    }
    let started = Instant::now();
    let mut timings = Vec::new();
    let mut invocations = vec![0u64; l];
    let mut states = corpus
        .items
        .iter()
        .map(|it| store.embed_input(modality, it.raw(modality)))
        .collect::<Result<Vec<_>>>()?;

    let everyone: Vec<usize> = (0..corpus.len()).collect();
    let superficial: Vec<Stage> = (1..=n)
        .flat_map(|layer| {
            everyone
                .chunks(opts.max_batch)
                .map(move |c| Stage { layer, batch: c.to_vec() })
        })
        .collect();
    run_stages(store, modality, &superficial, &mut states, opts, &mut timings, &mut invocations)?;

    let predicted: Vec<usize> = match &exits {
        ExitSource::Predictor(p) => states.iter().map(|h| p.predict_exit(h)).collect::<Result<_>>()?,
        ExitSource::Fixed { exits, .. } => exits.to_vec(),
    };
    if opts.quantize_superficial {
        for h in &mut states {
            *h = dequantize_int4(&quantize_int4(h));
        }
    }

    let groups = plan_batches(&predicted, opts.max_batch)?;
    for group in &groups {
        let stages: Vec<Stage> = (n + 1..=group.exit)
            .map(|layer| Stage { layer, batch: group.members.clone() })
            .collect();
        run_stages(store, modality, &stages, &mut states, opts, &mut timings, &mut invocations)?;
    }

    let mut records = Vec::with_capacity(corpus.len());
    let mut snapshots = Vec::with_capacity(corpus.len());
    for ((item, hidden), exit) in corpus.items.iter().zip(states).zip(&predicted) {
        records.push(EmbeddingRecord {
            item_id: item.item_id,
            modality,
            exit: *exit,
            embedding: store.head().apply(&hidden)?,
            state: RecordState::Coarse,
        });
        snapshots.push(ActivationSnapshot { item_id: item.item_id, layer: *exit, hidden });
    }
    let stats = PipelineStats { stages: timings, wall: started.elapsed(), layer_invocations: invocations };
    Ok(PipelineOutput { records, snapshots, predicted, stats })
}

/// Fraction of layer work avoided relative to running every item to `L`,
/// counting the shared superficial pass once per item.
pub fn layers_saved(exits: &[usize], num_layers: usize, n: usize) -> Result<f64> {
    if exits.is_empty() {
        return Err(Error::invalid("no records"));
    }
    let mean_extra = exits.iter().map(|e| e.saturating_sub(n) as f64).sum::<f64>() / exits.len() as f64;
    Ok(1.0 - (n as f64 + mean_extra) / num_layers as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_exit_chunks() {
        let g = plan_batches(&[5; 10], 4).unwrap();
        assert_eq!(g.iter().map(|g| g.members.len()).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert!(plan_batches(&[1], 0).is_err());
    }

    #[test]
    fn distinct_exits_are_singletons() {
        let g = plan_batches(&[4, 2, 9, 3], 8).unwrap();
        assert_eq!(g.iter().map(|g| g.exit).collect::<Vec<_>>(), vec![2, 3, 4, 9]);
        assert!(g.iter().all(|g| g.members.len() == 1));
    }

    #[test]
    fn mixed_plan_matches_bruteforce_grouping() {
        let mut rng = crate::numerics::Rng::new(8);
        let exits: Vec<usize> = (0..97).map(|_| 3 + rng.below(9)).collect();
        let groups = plan_batches(&exits, 5).unwrap();
        for e in 3..12 {
            let expected: Vec<usize> = (0..exits.len()).filter(|k| exits[*k] == e).collect();
            let got: Vec<usize> = groups.iter().filter(|g| g.exit == e).flat_map(|g| g.members.clone()).collect();
            assert_eq!(got, expected);
        }
        assert!(groups.windows(2).all(|w| w[0].exit <= w[1].exit));
        assert!(groups.iter().all(|g| !g.members.is_empty() && g.members.len() <= 5));
    }

    #[test]
    fn layers_saved_formula() {
        assert_eq!(layers_saved(&[12, 12], 12, 3).unwrap(), 0.0);
        assert!((layers_saved(&[4, 4, 4], 12, 3).unwrap() - 8.0 / 12.0).abs() < 1e-12);
        assert!(layers_saved(&[], 12, 3).is_err());
    }

    #[test]
    fn flow_shop_examples() {
        assert_eq!(flow_shop_makespan(&[], &[]), 0.0);
        // load-bound: every load back to back, then the last compute
        assert!((flow_shop_makespan(&[0.27; 5], &[0.04; 5]) - (5.0 * 0.27 + 0.04)).abs() < 1e-12);
        // compute-bound: first load, then every compute
        assert!((flow_shop_makespan(&[0.04; 5], &[0.27; 5]) - (0.04 + 5.0 * 0.27)).abs() < 1e-12);
    }
}
