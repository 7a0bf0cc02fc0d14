//! Subcommand implementations and work-directory layout.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use coarsefine::config::RunConfig;
use coarsefine::datagen::{generate, Corpus};
use coarsefine::encoder::{read_checkpoint, write_checkpoint, EncoderStack};
use coarsefine::exit_oracle::{exit_histogram, label_exits, labels_to_csv, parse_labels_csv, ExitLabel};
use coarsefine::healing::{heal, make_schedule};
use coarsefine::predictor::{
    aligned_labels, effective_exit, evaluate, load_predictor, save_predictor, split_indices, superficial_features,
    train_predictor, PredictorModel,
};
use coarsefine::retrieval::{query, recall_at, QueryReport};
use coarsefine::scheduler::{run_embedding_pipeline, ExitSource, LayerStore};
use coarsefine::store::EmbeddingStore;
use coarsefine::tracesim::{
    compare, comparison_csv, comparison_jsonl, load_trace, save_trace, synthetic_trace, DeviceProfile,
    ExitDistribution, Policy,
};
use coarsefine::Error;

#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{0}")]
    Selftest(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::Selftest(_) => 3,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::Parse { .. } | Error::OutOfRange(_) => Failure::Validation(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Runtime(format!("{}: {e}", path.display()))
}

/// Defaults, then the config file, then `--set`, then subcommand flags.
pub fn resolve_config(
    workdir: &Path,
    file: Option<&Path>,
    sets: &[String],
    flags: &[(&str, String)],
) -> Result<RunConfig, Failure> {
    let saved = workdir.join(CONFIG);
    let file = file.map(Path::to_path_buf).or_else(|| saved.exists().then_some(saved));
    let mut cfg = match &file {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Failure::Validation(format!("config {}: {e}", p.display())))?;
            RunConfig::from_text(&text).map_err(|e| Failure::Validation(format!("config {}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Failure::Validation(format!("--set expects KEY=VALUE, got {s:?}")))?;
        cfg.set(k.trim(), v.trim()).map_err(|e| Failure::Validation(e.to_string()))?;
    }
    for (k, v) in flags {
        cfg.set(k, v).map_err(|e| Failure::Validation(e.to_string()))?;
    }
    cfg.validate().map_err(|e| Failure::Validation(format!("invalid configuration: {e}")))?;
    Ok(cfg)
}

pub const CONFIG: &str = "config.txt";
pub const ENCODER: &str = "encoder.ckpt";
pub const CORPUS_CSV: &str = "corpus.csv";
pub const CORPUS_BIN: &str = "corpus.bin";
pub const LABELS: &str = "labels.csv";
pub const PREDICTOR: &str = "predictor.bin";
pub const PREDICTOR_REPORT: &str = "predictor_report.csv";
pub const HEALED: &str = "healed.ckpt";
pub const HEAL_REPORT: &str = "heal_report.csv";
pub const HEAL_LOSS: &str = "heal_loss.csv";
pub const STORE: &str = "store.bin";
pub const EMBED_REPORT: &str = "embed_report.csv";
pub const QUERY_REPORT: &str = "query_report.jsonl";
pub const RECALL: &str = "recall.csv";
pub const SIM_TRACE: &str = "sim_trace.csv";
pub const SIM_CSV: &str = "sim_report.csv";
pub const SIM_JSONL: &str = "sim_report.jsonl";

/// Exclusive claim on the store file, released on drop.
struct StoreLock(PathBuf);

impl StoreLock {
    fn acquire(store: &Path) -> Result<Self, Failure> {
        let path = store.with_extension("lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Failure::Runtime(format!(
                "{} is in use by another process (delete {} if it is stale)",
                store.display(),
                path.display()
            ))),
            Err(e) => Err(io_err(&path)(e)),
        }
    }
}

impl Drop for StoreLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

pub struct Workspace {
    dir: PathBuf,
    cfg: RunConfig,
}

impl Workspace {
    pub fn new(dir: PathBuf, cfg: RunConfig) -> Self {
        Self { dir, cfg }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Text placed at the top of every artifact.
    fn header(&self, command: &str) -> String {
        format!("coarsefine {} {command}\n{}", env!("CARGO_PKG_VERSION"), self.cfg.echo())
    }

    fn input(&self, name: &str, producer: &str) -> Result<PathBuf, Failure> {
        let p = self.path(name);
        if !p.exists() {
            return Err(Failure::Validation(format!(
                "missing input {}; run `coarsefine {producer}` first",
                p.display()
            )));
        }
        Ok(p)
    }

    fn write(&self, name: &str, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
        let p = self.path(name);
        fs::write(&p, bytes).map_err(io_err(&p))
    }

    fn encoder(&self, name: &str, producer: &str) -> Result<EncoderStack, Failure> {
        let p = self.input(name, producer)?;
        let bytes = fs::read(&p).map_err(io_err(&p))?;
        Ok(read_checkpoint(&bytes)?.0)
    }

    fn corpus(&self) -> Result<Corpus, Failure> {
        let csv = self.input(CORPUS_CSV, "gen-data")?;
        let bin = self.input(CORPUS_BIN, "gen-data")?;
        Ok(Corpus::load(&csv, &bin)?)
    }

    fn labels(&self) -> Result<Vec<ExitLabel>, Failure> {
        let p = self.input(LABELS, "label-exits")?;
        Ok(parse_labels_csv(&fs::read_to_string(&p).map_err(io_err(&p))?)?)
    }

    fn predictor(&self) -> Result<PredictorModel, Failure> {
        let p = self.input(PREDICTOR, "train-predictor")?;
        Ok(load_predictor(&p)?.0)
    }

    pub fn gen_data(&self) -> Result<(), Failure> {
        fs::create_dir_all(&self.dir).map_err(io_err(&self.dir))?;
        let header = self.header("gen-data");
        let stack = EncoderStack::init(self.cfg.encoder_config())?;
        let corpus = generate(&self.cfg.corpus_config())?;
        self.write(CONFIG, self.cfg.echo())?;
        self.write(ENCODER, write_checkpoint(&stack, &header))?;
        corpus.save(&self.path(CORPUS_CSV), &self.path(CORPUS_BIN), &header)?;
        println!("wrote {} items and a {}-layer encoder to {}", corpus.len(), stack.num_layers(), self.dir.display());
        Ok(())
    }

    pub fn label_exits(&self) -> Result<(), Failure> {
        let stack = self.encoder(ENCODER, "gen-data")?;
        let corpus = self.corpus()?;
        let labels = label_exits(&stack, &corpus, self.cfg.item_modality)?;
        self.write(LABELS, labels_to_csv(&labels, &self.header("label-exits")))?;
        let hist = exit_histogram(&labels)?;
        let summary: Vec<String> = hist.iter().map(|(e, c)| format!("{e}:{c}")).collect();
        println!("exit histogram {}", summary.join(" "));
        Ok(())
    }

    pub fn train_predictor(&self) -> Result<(), Failure> {
        let stack = self.encoder(ENCODER, "gen-data")?;
        let corpus = self.corpus()?;
        let labels = aligned_labels(&corpus, &self.labels()?)?;
        let pcfg = self.cfg.predictor_config();
        let features = superficial_features(&stack, &corpus, self.cfg.item_modality, pcfg.superficial_n)?;
        let (train, held) = split_indices(features.len(), self.cfg.stage_seed("split"));
        let pick = |idx: &[usize]| -> (Vec<Vec<f32>>, Vec<usize>) {
            (idx.iter().map(|i| features[*i].clone()).collect(), idx.iter().map(|i| labels[*i]).collect())
        };
        let (tf, tl) = pick(&train);
        let (model, report) = train_predictor(&tf, &tl, stack.num_layers(), &pcfg)?;
        let header = self.header("train-predictor");
        save_predictor(&model, &self.path(PREDICTOR), &header)?;

        let mut out = comment_lines(&header);
        out.push_str("split,items,exit_accuracy,tolerance_accuracy,mean_predicted,mean_actual\n");
        let _ = writeln!(
            out,
            "train,{},{},{},{},{}",
            tf.len(),
            report.exit_accuracy,
            report.tolerance_accuracy,
            report.mean_predicted,
            report.mean_actual
        );
        if !held.is_empty() {
            let (hf, hl) = pick(&held);
            let ev = evaluate(&model, &hf, &hl)?;
            let _ = writeln!(
                out,
                "held_out,{},{},{},{},{}",
                hf.len(),
                ev.exit_accuracy,
                ev.tolerance_accuracy,
                ev.mean_predicted,
                ev.mean_actual
            );
            println!("held-out exit accuracy {:.3} (within one layer {:.3})", ev.exit_accuracy, ev.tolerance_accuracy);
        }
        self.write(PREDICTOR_REPORT, out)
    }

    pub fn heal(&self) -> Result<(), Failure> {
        let stack = self.encoder(ENCODER, "gen-data")?;
        let corpus = self.corpus()?;
        let labels = self.labels()?;
        let schedule = make_schedule(&exit_histogram(&labels)?, stack.num_layers())?;
        let (healed, report) = heal(&stack, &corpus, &labels, &schedule, &self.cfg.heal_config())?;
        let header = self.header("heal");
        self.write(HEALED, write_checkpoint(&healed, &header))?;
        self.write(HEAL_REPORT, report.to_csv(&header))?;
        self.write(HEAL_LOSS, report.loss_csv(&header))?;
        if report.noop {
            println!("lora_rank is 0; checkpoint copied unchanged");
        } else {
            for e in &report.exits {
                println!("exit {:>3}: cosine {:.4} -> {:.4}", e.exit, e.pre_cosine, e.post_cosine);
            }
        }
        Ok(())
    }

    pub fn embed(&self) -> Result<(), Failure> {
        let layers = LayerStore::open(&self.input(HEALED, "heal")?)?;
        let predictor = self.predictor()?;
        if predictor.n_superficial != self.cfg.superficial_n {
            return Err(Failure::Validation(format!(
                "predictor was trained with superficial_n={} but {} was requested; rerun train-predictor",
                predictor.n_superficial, self.cfg.superficial_n
            )));
        }
        let corpus = self.corpus()?;
        let opts = self.cfg.pipeline_options();
        let out = run_embedding_pipeline(&layers, &corpus, self.cfg.item_modality, ExitSource::Predictor(&predictor), &opts)?;

        let store_path = self.path(STORE);
        let _lock = StoreLock::acquire(&store_path)?;
        let header = self.header("embed");
        let mut store = EmbeddingStore::in_memory_with_meta(self.cfg.store_options(), &header)?;
        for (rec, snap) in out.records.iter().zip(&out.snapshots) {
            store.put_coarse(rec, snap)?;
        }
        store.save_as(&store_path)?;

        let mut report = comment_lines(&header);
        report.push_str("item_id,predicted_exit\n");
        for (rec, e) in out.records.iter().zip(&out.predicted) {
            let _ = writeln!(report, "{},{e}", rec.item_id);
        }
        self.write(EMBED_REPORT, report)?;
        let s = &out.stats;
        let bytes = store.storage_report().total_bytes;
        println!(
            "embedded {} items in {:.3}s ({} layer evaluations, {} stages, modeled {:.3}s); store {bytes} bytes",
            out.records.len(),
            s.wall.as_secs_f64(),
            s.total_invocations(),
            s.stages.len(),
            s.modeled_wall().as_secs_f64()
        );
        Ok(())
    }

    fn query_items<'a>(&self, corpus: &'a Corpus, ids: &[u64]) -> Result<Vec<&'a coarsefine::datagen::CorpusItem>, Failure> {
        if !ids.is_empty() {
            return ids
                .iter()
                .map(|id| corpus.get(*id).ok_or_else(|| Failure::Validation(format!("item {id} is not in the corpus"))))
                .collect();
        }
        let n = match self.cfg.query_count {
            0 => corpus.len(),
            n => n.min(corpus.len()),
        };
        Ok(corpus.items.iter().take(n).collect())
    }

    /// Without `write_back` the store is read once and left untouched, so
    /// repeated runs see the same state.
    pub fn query(&self, ids: &[u64], timings: bool, write_back: bool) -> Result<(), Failure> {
        let stack = self.encoder(HEALED, "heal")?;
        let corpus = self.corpus()?;
        let store_path = self.input(STORE, "embed")?;
        let _lock = StoreLock::acquire(&store_path)?;
        let mut store = if write_back {
            EmbeddingStore::open(&store_path)?
        } else {
            EmbeddingStore::decode(&fs::read(&store_path).map_err(io_err(&store_path))?)?
        };
        let opts = self.cfg.query_options();
        let mut out = serde_json::to_string(&serde_json::json!({ "header": self.header("query") }))
            .expect("string serializes");
        out.push('\n');
        let mut hits = 0usize;
        let items = self.query_items(&corpus, ids)?;
        for item in &items {
            let result = query(&stack, &mut store, item.raw(self.cfg.query_modality), self.cfg.query_modality, &opts)?;
            hits += (result.ids().first() == Some(&item.item_id)) as usize;
            let mut report = QueryReport::new(item.item_id, Some(item.item_id), &result);
            if !timings {
                report = report.without_times();
            }
            out.push_str(&report.to_json_line());
            out.push('\n');
        }
        if write_back {
            store.save()?;
        }
        self.write(QUERY_REPORT, out)?;
        println!("{} queries, top-1 hit rate {:.3}", items.len(), hits as f64 / items.len().max(1) as f64);
        Ok(())
    }

    pub fn eval(&self) -> Result<(), Failure> {
        let stack = self.encoder(HEALED, "heal")?;
        let corpus = self.corpus()?;
        let store_path = self.input(STORE, "embed")?;
        let _lock = StoreLock::acquire(&store_path)?;
        // evaluation never writes the store back
        let bytes = fs::read(&store_path).map_err(io_err(&store_path))?;
        let mut store = EmbeddingStore::decode(&bytes)?;
        let opts = self.cfg.query_options();
        let items = self.query_items(&corpus, &[])?;
        let mut coarse = Vec::new();
        let mut fine = Vec::new();
        let mut truth = Vec::new();
        for item in &items {
            let result = query(&stack, &mut store, item.raw(self.cfg.query_modality), self.cfg.query_modality, &opts)?;
            coarse.push(result.coarse_ids());
            fine.push(result.ids());
            truth.push(item.item_id);
        }
        let mut out = comment_lines(&self.header("eval"));
        out.push_str("stage,k,recall\n");
        for (stage, rankings) in [("coarse", &coarse), ("corrected", &fine)] {
            for k in [1, 5, 10] {
                let r = recall_at(rankings, &truth, k)?;
                let _ = writeln!(out, "{stage},{k},{r:.6}");
                println!("{stage:>9} R@{k:<2} {r:.3}");
            }
        }
        self.write(RECALL, out)
    }

    pub fn simulate(&self) -> Result<(), Failure> {
        let cfg = &self.cfg;
        let header = self.header("simulate");
        let trace = if cfg.trace.is_empty() {
            let t = synthetic_trace(cfg.trace_items, cfg.trace_rate, cfg.stage_seed("trace"))?;
            save_trace(&t, &self.path(SIM_TRACE), &header)?;
            t
        } else {
            let p = PathBuf::from(&cfg.trace);
            if !p.exists() {
                return Err(Failure::Validation(format!("trace file {} does not exist", p.display())));
            }
            load_trace(&p)?
        };
        let profile = if cfg.profile.is_empty() {
            DeviceProfile { num_layers: cfg.num_layers, ..DeviceProfile::default() }
        } else {
            let p = PathBuf::from(&cfg.profile);
            if !p.exists() {
                return Err(Failure::Validation(format!("profile file {} does not exist", p.display())));
            }
            DeviceProfile::load(&p)?
        };
        if profile.num_layers != cfg.num_layers {
            return Err(Failure::Validation(format!(
                "profile describes {} layers but num_layers={}",
                profile.num_layers, cfg.num_layers
            )));
        }
        let labels = self.labels()?;
        let hist = exit_histogram(&labels)?;
        let fixed = match cfg.fixed_exit {
            // the shallowest fixed exit that is at least as deep as the
            // pre-exit policy's mean effective exit
            0 => {
                let sum: usize = labels.iter().map(|l| effective_exit(l.exit, cfg.superficial_n, cfg.num_layers)).sum();
                sum.div_ceil(labels.len())
            }
            e => e,
        };
        let policies = [
            Policy::FullDepth,
            Policy::FixedExit(fixed),
            Policy::PreExit {
                n: cfg.superficial_n,
                exits: ExitDistribution::from_histogram(&hist)?,
                seed: cfg.stage_seed("sim-exits"),
            },
        ];
        let horizon = if cfg.horizon_s > 0.0 { cfg.horizon_s } else { trace.last().map_or(0.0, |e| e.timestamp) };
        let rows = compare(&policies, &trace, &profile, horizon)?;
        self.write(SIM_CSV, comparison_csv(&rows, &header))?;
        let mut jsonl = serde_json::to_string(&serde_json::json!({ "header": header })).expect("string serializes");
        jsonl.push('\n');
        jsonl.push_str(&comparison_jsonl(&rows));
        self.write(SIM_JSONL, jsonl)?;
        for r in &rows {
            println!(
                "{:<14} embedded {:>5} dropped {:>5} energy {:>10.2} J  charges {:>3}  throughput {:.3}/s  energy ratio {:.3}",
                r.policy,
                r.report.embedded,
                r.report.dropped,
                r.report.total_energy_j,
                r.report.charges,
                r.report.throughput,
                r.energy_ratio
            );
        }
        Ok(())
    }
}

fn comment_lines(header: &str) -> String {
    header.lines().filter(|l| !l.is_empty()).map(|l| format!("# {l}\n")).collect()
}
