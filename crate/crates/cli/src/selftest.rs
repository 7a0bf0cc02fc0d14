//! Invariant suites run by `coarsefine selftest`.
//!
//! Each suite builds its own small seeded fixture, so the selftest needs no
//! work directory and finishes in a few seconds.

use std::collections::BTreeMap;
use std::time::Instant;

use coarsefine::config::RunConfig;
use coarsefine::datagen::{generate, Corpus, CorpusConfig};
use coarsefine::encoder::{EncoderConfig, EncoderStack, Modality};
use coarsefine::exit_oracle::{exit_histogram, label_exits};
use coarsefine::healing::{heal, make_schedule, random_inputs, verify_prefix_reuse, HealConfig, PerExitSuites, SharedSuite};
use coarsefine::numerics::{cosine, dequantize_int4, quantize_int4, Rng};
use coarsefine::retrieval::{query, QueryOptions};
use coarsefine::scheduler::{run_embedding_pipeline, ExitSource, LayerStore, PipelineOptions};
use coarsefine::store::{EmbeddingRecord, EmbeddingStore, Encoding, RecordState, StoreOptions};
use coarsefine::tracesim::{simulate, synthetic_trace, DeviceProfile, ExitDistribution, Policy};

use crate::commands::Failure;

type Outcome = Result<String, String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn fixture(n: usize) -> Result<(EncoderStack, Corpus), String> {
    let stack = EncoderStack::init(EncoderConfig { num_layers: 6, ..EncoderConfig::default() }).map_err(err)?;
    let corpus = generate(&CorpusConfig { n, ..CorpusConfig::default() }).map_err(err)?;
    Ok((stack, corpus))
}

fn scheduling() -> Outcome {
    let (stack, corpus) = fixture(40)?;
    let dir = tempdir()?;
    let layers = LayerStore::create(&stack, &dir.join("enc.ckpt"), "selftest").map_err(err)?;
    let exits: Vec<usize> = (0..corpus.len()).map(|i| 2 + i % 5).collect();
    for pipelined in [false, true] {
        let opts = PipelineOptions { max_batch: 7, pipelined, ..PipelineOptions::default() };
        let out = run_embedding_pipeline(&layers, &corpus, Modality::A, ExitSource::Fixed { n: 1, exits: &exits }, &opts)
            .map_err(err)?;
        for ((rec, item), e) in out.records.iter().zip(&corpus.items).zip(&exits) {
            let (direct, _) = stack.coarse_embed(Modality::A, item.item_id, &item.raw_a, *e).map_err(err)?;
            if rec.embedding.iter().zip(&direct).any(|(a, b)| a.to_bits() != b.to_bits()) {
                return Err(format!("item {} differs from a direct pass (pipelined={pipelined})", item.item_id));
            }
        }
    }
    let _ = std::fs::remove_dir_all(&dir);
    Ok(format!("{} items bitwise equal to per-sample passes", corpus.len()))
}

fn quantization() -> Outcome {
    let mut rng = Rng::new(3);
    for trial in 0..200 {
        let x: Vec<f32> = (0..33).map(|_| (rng.normal() * 4.0) as f32).collect();
        let q = quantize_int4(&x);
        if q.codes().iter().any(|c| !(-7..=7).contains(c)) {
            return Err(format!("trial {trial}: code outside [-7, 7]"));
        }
        let back = dequantize_int4(&q);
        let bound = q.scale() / 2.0 * (1.0 + 1e-5);
        if x.iter().zip(&back).any(|(a, b)| (a - b).abs() > bound) {
            return Err(format!("trial {trial}: error above half a step"));
        }
    }
    Ok("200 vectors within half a quantization step".into())
}

fn labeling() -> Outcome {
    let (stack, corpus) = fixture(30)?;
    let labels = label_exits(&stack, &corpus, Modality::A).map_err(err)?;
    let l = stack.num_layers();
    let fine: Vec<Vec<f32>> =
        corpus.items.iter().map(|it| stack.fine_embed(Modality::A, &it.raw_a)).collect::<Result<_, _>>().map_err(err)?;
    for (x, label) in labels.iter().enumerate() {
        let mut want = l;
        for e in 1..=l {
            let coarse: Vec<Vec<f32>> = corpus
                .items
                .iter()
                .map(|it| stack.coarse_embed(Modality::A, it.item_id, &it.raw_a, e).map(|c| c.0))
                .collect::<Result<_, _>>()
                .map_err(err)?;
            let mut best = 0;
            for j in 1..coarse.len() {
                if cosine(&fine[x], &coarse[j]).map_err(err)? > cosine(&fine[x], &coarse[best]).map_err(err)? {
                    best = j;
                }
            }
            if best == x {
                want = e;
                break;
            }
        }
        if label.exit != want {
            return Err(format!("item {}: labeled {} but brute force says {want}", label.item_id, label.exit));
        }
    }
    Ok(format!("{} labels match the brute-force search", labels.len()))
}

fn prefix_reuse() -> Outcome {
    let (stack, corpus) = fixture(40)?;
    let labels = label_exits(&stack, &corpus, Modality::A).map_err(err)?;
    let schedule = make_schedule(&exit_histogram(&labels).map_err(err)?, stack.num_layers()).map_err(err)?;
    let cfg = HealConfig { epochs: 5, ..HealConfig::default() };
    let (healed, _) = heal(&stack, &corpus, &labels, &schedule, &cfg).map_err(err)?;
    let inputs = random_inputs(&healed, 20, 9);
    let shared = verify_prefix_reuse(&healed, Modality::A, &SharedSuite::new(&healed, Modality::A).map_err(err)?, &inputs)
        .map_err(err)?;
    if !shared.passed() {
        return Err(format!("{} prefix mismatches with the shared suite", shared.mismatches.len()));
    }
    // one independently perturbed suite per exit must break the property
    let base = healed.lora_suite(Modality::A).map_err(err)?;
    let suites = (1..=healed.num_layers())
        .map(|e| {
            base.iter()
                .map(|p| {
                    p.clone().map(|mut p| {
                        for v in p.b.values_mut() {
                            *v += 1e-3 * e as f32;
                        }
                        p
                    })
                })
                .collect()
        })
        .collect();
    let control = verify_prefix_reuse(&healed, Modality::A, &PerExitSuites { suites }, &inputs).map_err(err)?;
    if control.passed() {
        return Err("per-exit suites passed the prefix check".into());
    }
    Ok(format!("{} checks bitwise equal; per-exit control rejected", shared.checks))
}

fn cache_resume() -> Outcome {
    let (stack, corpus) = fixture(25)?;
    let mut worst = 0.0f32;
    for (i, item) in corpus.items.iter().enumerate() {
        let exit = 1 + i % (stack.num_layers() - 1);
        let (_, snap) = stack.coarse_embed(Modality::A, item.item_id, &item.raw_a, exit).map_err(err)?;
        let resumed = stack.resume_to_fine(Modality::A, exit, &snap.hidden).map_err(err)?;
        let fresh = stack.fine_embed(Modality::A, &item.raw_a).map_err(err)?;
        for (a, b) in resumed.iter().zip(&fresh) {
            worst = worst.max((a - b).abs() / b.abs().max(1e-6));
        }
    }
    if worst > 1e-6 {
        return Err(format!("lossless resume off by {worst:e} relative"));
    }
    Ok(format!("lossless resume max relative error {worst:e}"))
}

fn build_store(stack: &EncoderStack, corpus: &Corpus, cache: Encoding) -> Result<EmbeddingStore, String> {
    let mut store =
        EmbeddingStore::in_memory(StoreOptions { cache, ..StoreOptions::new(stack.num_layers()) }).map_err(err)?;
    for (i, item) in corpus.items.iter().enumerate() {
        let exit = 1 + i % 3;
        let (emb, snap) = stack.coarse_embed(Modality::A, item.item_id, &item.raw_a, exit).map_err(err)?;
        let rec = EmbeddingRecord { item_id: item.item_id, modality: Modality::A, exit, embedding: emb, state: RecordState::Coarse };
        store.put_coarse(&rec, &snap).map_err(err)?;
    }
    Ok(store)
}

fn persistence() -> Outcome {
    let (stack, corpus) = fixture(20)?;
    let mut store = build_store(&stack, &corpus, Encoding::Int4)?;
    let bytes = store.encode();
    if store.storage_report().total_bytes != bytes.len() {
        return Err("storage report disagrees with the encoded size".into());
    }
    let back = EmbeddingStore::decode(&bytes).map_err(err)?;
    if back != store || back.encode() != bytes {
        return Err("round trip changed the store".into());
    }
    let before = store.storage_report().total_bytes;
    let fine = stack.fine_embed(Modality::A, &corpus.items[0].raw_a).map_err(err)?;
    store.upgrade_to_fine(0, &fine).map_err(err)?;
    if store.storage_report().total_bytes >= before {
        return Err("upgrade did not shrink the store".into());
    }
    Ok(format!("{} byte image round-trips", bytes.len()))
}

fn retrieval() -> Outcome {
    let (stack, corpus) = fixture(30)?;
    let mut store = build_store(&stack, &corpus, Encoding::F32)?;
    let n = store.len();
    let item = &corpus.items[4];
    let result = query(&stack, &mut store, &item.raw_b, Modality::B, &QueryOptions { k1: n, k2: n }).map_err(err)?;
    let fq = stack.fine_embed(Modality::B, &item.raw_b).map_err(err)?;
    let mut oracle: Vec<(u64, f32)> = corpus
        .items
        .iter()
        .map(|it| Ok((it.item_id, cosine(&fq, &stack.fine_embed(Modality::A, &it.raw_a)?)?)))
        .collect::<Result<_, coarsefine::Error>>()
        .map_err(err)?;
    oracle.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let want: Vec<u64> = oracle.iter().map(|o| o.0).collect();
    if result.ids() != want {
        return Err("exhaustive query differs from refine-all ranking".into());
    }
    Ok(format!("exhaustive query over {n} items equals the refine-all oracle"))
}

fn simulator() -> Outcome {
    let trace = synthetic_trace(200, 0.5, 2).map_err(err)?;
    let horizon = trace.last().map_or(0.0, |e| e.timestamp) + 100.0;
    let profile = DeviceProfile { layer_load_j: 0.0, layer_load_s: 0.0, idle_w: 0.0, ..DeviceProfile::default() };
    let full = simulate(&Policy::FullDepth, &trace, &profile, horizon).map_err(err)?;
    let pre = Policy::PreExit { n: 2, exits: ExitDistribution::point(3).map_err(err)?, seed: 1 };
    let early = simulate(&pre, &trace, &profile, horizon).map_err(err)?;
    let ratio = early.total_energy_j / full.total_energy_j;
    if (ratio - 0.25).abs() > 0.0025 {
        return Err(format!("quarter-depth energy ratio {ratio}"));
    }
    let fixed = simulate(&Policy::FixedExit(12), &trace, &DeviceProfile::default(), horizon).map_err(err)?;
    if fixed != simulate(&Policy::FullDepth, &trace, &DeviceProfile::default(), horizon).map_err(err)? {
        return Err("fixed-exit(L) differs from full depth".into());
    }
    Ok(format!("quarter-depth energy ratio {ratio:.4}; fixed-exit(L) identical"))
}

fn configuration() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.set("seed", "7").map_err(err)?;
    cfg.set("pipeline", "off").map_err(err)?;
    let back = RunConfig::from_text(&cfg.echo()).map_err(err)?;
    if back != cfg {
        return Err("config echo does not parse back".into());
    }
    cfg.validate().map_err(err)?;
    Ok(format!("{} keys round-trip", RunConfig::KEYS.len()))
}

fn tempdir() -> Result<std::path::PathBuf, String> {
    let dir = std::env::temp_dir().join(format!("coarsefine-selftest-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(err)?;
    Ok(dir)
}

pub fn run() -> Result<(), Failure> {
    let suites: [(&str, fn() -> Outcome); 9] = [
        ("scheduling", scheduling),
        ("quantization", quantization),
        ("labeling", labeling),
        ("prefix-reuse", prefix_reuse),
        ("cache-resume", cache_resume),
        ("persistence", persistence),
        ("retrieval", retrieval),
        ("simulator", simulator),
        ("configuration", configuration),
    ];
    let mut failed = Vec::new();
    let mut totals: BTreeMap<&str, f64> = BTreeMap::new();
    for (name, suite) in suites {
        let t = Instant::now();
        let outcome = suite();
        totals.insert(name, t.elapsed().as_secs_f64());
        match outcome {
            Ok(msg) => println!("PASS {name:<14} {msg}"),
            Err(msg) => {
                println!("FAIL {name:<14} {msg}");
                failed.push(name);
            }
        }
    }
    println!("{} suites, {} failed, {:.2}s", suites.len(), failed.len(), totals.values().sum::<f64>());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Selftest(format!("failed suites: {}", failed.join(", "))))
    }
}
