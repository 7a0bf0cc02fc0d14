use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use coarsefine::datagen::Corpus;
use coarsefine::encoder::{read_checkpoint, Modality};
use coarsefine::numerics::cosine;
use coarsefine::store::EmbeddingStore;

const CHAIN: [&str; 7] = ["gen-data", "label-exits", "train-predictor", "heal", "embed", "query", "eval"];

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coarsefine"))
        .arg("--workdir")
        .arg(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn chain(dir: &Path) -> Duration {
    let t = Instant::now();
    for c in CHAIN {
        ok(dir, &[c]);
    }
    t.elapsed()
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn default_chain_is_fast_and_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let took = chain(a.path());
    assert!(took < Duration::from_secs(60), "chain took {took:?}");
    chain(b.path());
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    assert_eq!(sa.iter().map(|f| &f.0).collect::<Vec<_>>(), sb.iter().map(|f| &f.0).collect::<Vec<_>>());
    for ((name, x), (_, y)) in sa.iter().zip(&sb) {
        assert!(x == y, "{name} differs between runs");
    }
    // the configuration is echoed into every artifact
    let names: Vec<&str> = sa.iter().map(|f| f.0.as_str()).collect();
    for name in ["corpus.csv", "labels.csv", "predictor_report.csv", "heal_report.csv", "embed_report.csv", "recall.csv", "query_report.jsonl"] {
        assert!(names.contains(&name), "{name} missing");
        let text = std::fs::read_to_string(a.path().join(name)).unwrap();
        assert!(text.contains("seed=42") && text.contains("k2=10"), "{name} lacks the config echo");
    }
    for name in ["encoder.ckpt", "healed.ckpt", "predictor.bin", "store.bin"] {
        let bytes = std::fs::read(a.path().join(name)).unwrap();
        assert!(bytes.windows(7).any(|w| w == b"seed=42"), "{name} lacks the config echo");
    }
    assert!(!a.path().join("store.lock").exists());
}

#[test]
fn unpipelined_single_item_embed_equals_direct_calls() {
    let dir = tempfile::tempdir().unwrap();
    for c in &CHAIN[..4] {
        ok(dir.path(), &[c]);
    }
    ok(dir.path(), &["embed", "--pipeline", "off", "--max-batch", "1"]);
    let (stack, _) = read_checkpoint(&std::fs::read(dir.path().join("healed.ckpt")).unwrap()).unwrap();
    let corpus = Corpus::load(&dir.path().join("corpus.csv"), &dir.path().join("corpus.bin")).unwrap();
    let store = EmbeddingStore::open(&dir.path().join("store.bin")).unwrap();
    for item in &corpus.items {
        let (rec, cache) = store.get(item.item_id).unwrap();
        let (emb, snap) = stack.coarse_embed(Modality::A, item.item_id, &item.raw_a, rec.exit).unwrap();
        assert_eq!(rec.embedding, emb);
        assert_eq!(cache.unwrap().layer, snap.layer);
    }
}

#[test]
fn exhaustive_query_matches_bruteforce() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-data", "--set", "corpus_size=40"]);
    for c in &CHAIN[1..5] {
        ok(dir.path(), &[c]);
    }
    ok(dir.path(), &["query", "--k1", "40", "--k2", "40", "--items", "3,17"]);
    let (stack, _) = read_checkpoint(&std::fs::read(dir.path().join("healed.ckpt")).unwrap()).unwrap();
    let corpus = Corpus::load(&dir.path().join("corpus.csv"), &dir.path().join("corpus.bin")).unwrap();
    let store = EmbeddingStore::open(&dir.path().join("store.bin")).unwrap();
    // refine-all: every item resumed from its cached activation
    let refined: Vec<(u64, Vec<f32>)> = corpus
        .items
        .iter()
        .map(|it| {
            let (rec, cache) = store.get(it.item_id).unwrap();
            (it.item_id, stack.resume_to_fine(Modality::A, rec.exit, &cache.unwrap().hidden()).unwrap())
        })
        .collect();
    let report = std::fs::read_to_string(dir.path().join("query_report.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = report.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(lines[0]["header"].as_str().unwrap().contains("corpus_size=40"));
    assert_eq!(lines.len(), 3);
    for line in &lines[1..] {
        let q = line["query_id"].as_u64().unwrap();
        let fq = stack.fine_embed(Modality::B, &corpus.get(q).unwrap().raw_b).unwrap();
        let mut oracle: Vec<(u64, f32)> = refined.iter().map(|(id, f)| (*id, cosine(&fq, f).unwrap())).collect();
        oracle.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let got: Vec<u64> = line["ranking"].as_array().unwrap().iter().map(|r| r["item_id"].as_u64().unwrap()).collect();
        let want: Vec<u64> = oracle.iter().map(|o| o.0).collect();
        assert_eq!(got, want);
        assert!(line.get("times_us").is_none());
    }
}

#[test]
fn query_write_back_upgrades_the_store() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-data", "--set", "corpus_size=30"]);
    for c in &CHAIN[1..5] {
        ok(dir.path(), &[c]);
    }
    let path = dir.path().join("store.bin");
    let before = std::fs::read(&path).unwrap();
    ok(dir.path(), &["query", "--items", "1"]);
    assert_eq!(std::fs::read(&path).unwrap(), before);
    ok(dir.path(), &["query", "--items", "1", "--write-back", "--timings"]);
    assert!(std::fs::read(&path).unwrap().len() < before.len());
    let store = EmbeddingStore::open(&path).unwrap();
    store.integrity_check().unwrap();
    let report = std::fs::read_to_string(dir.path().join("query_report.jsonl")).unwrap();
    assert!(report.contains("times_us"));
}

#[test]
fn simulate_orders_policies() {
    let dir = tempfile::tempdir().unwrap();
    for c in &CHAIN[..2] {
        ok(dir.path(), &[c]);
    }
    ok(dir.path(), &["simulate"]);
    let rows: Vec<serde_json::Value> = std::fs::read_to_string(dir.path().join("sim_report.jsonl"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let energy: Vec<f64> = rows.iter().map(|r| r["report"]["total_energy_j"].as_f64().unwrap()).collect();
    assert_eq!(rows[0]["policy"], "full-depth");
    assert!(energy[2] < energy[1] && energy[1] < energy[0], "{energy:?}");
    // replaying the exported trace gives the same table
    let csv = std::fs::read_to_string(dir.path().join("sim_report.csv")).unwrap();
    let trace = dir.path().join("sim_trace.csv");
    ok(dir.path(), &["simulate", "--trace", trace.to_str().unwrap()]);
    let data_rows = |s: &str| s.lines().filter(|l| !l.starts_with('#')).map(String::from).collect::<Vec<_>>();
    assert_eq!(data_rows(&csv), data_rows(&std::fs::read_to_string(dir.path().join("sim_report.csv")).unwrap()));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| run(dir.path(), args).status.code().unwrap();
    assert_eq!(code(&["label-exits"]), 1, "missing inputs");
    assert_eq!(code(&["gen-data", "--set", "k1=0"]), 1);
    assert_eq!(code(&["gen-data", "--set", "warp=9"]), 1);
    assert_eq!(code(&["gen-data", "--set", "novalue"]), 1);
    assert_eq!(code(&["no-such-command"]), 1);
    let missing = run(dir.path(), &["label-exits"]);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("gen-data"));

    let bad = dir.path().join("bad.txt");
    std::fs::write(&bad, "seed=1\nseed=2\n").unwrap();
    assert_eq!(code(&["--config", bad.to_str().unwrap(), "gen-data"]), 1);

    ok(dir.path(), &["gen-data", "--set", "corpus_size=20"]);
    for c in &CHAIN[1..5] {
        ok(dir.path(), &[c]);
    }
    assert_eq!(code(&["embed", "--superficial-n", "2"]), 1, "predictor depth mismatch");
    std::fs::write(dir.path().join("store.lock"), "1").unwrap();
    assert_eq!(code(&["query"]), 2, "locked store");
    std::fs::remove_file(dir.path().join("store.lock")).unwrap();
    let mut store = std::fs::read(dir.path().join("store.bin")).unwrap();
    store[0] = b'X';
    std::fs::write(dir.path().join("store.bin"), store).unwrap();
    assert_eq!(code(&["query"]), 2, "corrupt store");
    assert_eq!(code(&["--help"]), 0);
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["selftest"]);
    assert!(out.contains("0 failed"), "{out}");
    assert!(!out.contains("FAIL"));
}
