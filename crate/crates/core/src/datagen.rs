//! Seeded synthetic paired-modality corpus.
//!
//! Each item has a latent `z`; modality `m` observes `G_m z + difficulty * noise`
//! where `G_m` is a fixed seeded mixing matrix. Items sharing `z` are the
//! cross-modal matches, so the ground truth is the id pairing itself.
//!
//! The noise is low-rank clutter: `noise = gain * U c` with a fixed seeded
//! basis `U` and fresh coefficients `c` per observation. Hard items are
//! pushed into a shared low-dimensional region where they crowd each other,
//! so they need deeper exits to stay distinguishable.

use std::fmt::Write as _;
use std::path::Path;

use crate::codec::{ByteReader, ByteWriter};
use crate::encoder::Modality;
use crate::error::{Error, Result};
use crate::numerics::{matvec, Mat, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub n: usize,
    pub d_latent: usize,
    pub input_dim: usize,
    pub noise_low: f32,
    pub noise_high: f32,
    /// Per-modality deviation of the mixing matrices from a shared one.
    pub modality_gap: f32,
    pub clutter_rank: usize,
    pub clutter_gain: f32,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n: 200,
            d_latent: 16,
            input_dim: 32,
            noise_low: 0.0,
            noise_high: 1.0,
            modality_gap: 0.3,
            clutter_rank: 2,
            clutter_gain: 3.0,
            seed: 7,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::invalid("corpus size must be at least 1"));
        }
        if self.d_latent == 0 || self.input_dim == 0 {
            return Err(Error::invalid("dimensions must be positive"));
        }
        if self.clutter_rank == 0 || self.clutter_rank > self.input_dim {
            return Err(Error::invalid(format!("clutter_rank {} not in [1, input_dim]", self.clutter_rank)));
        }
        let finite = [self.noise_low, self.noise_high, self.modality_gap, self.clutter_gain]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.noise_low < 0.0 || self.noise_low > self.noise_high {
            return Err(Error::invalid(format!(
                "noise range [{}, {}] invalid",
                self.noise_low, self.noise_high
            )));
        }
        if self.modality_gap < 0.0 || self.clutter_gain < 0.0 {
            return Err(Error::invalid("modality_gap and clutter_gain must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusItem {
    pub item_id: u64,
    pub latent: Vec<f32>,
    pub raw_a: Vec<f32>,
    pub raw_b: Vec<f32>,
    pub difficulty: f32,
}

impl CorpusItem {
    pub fn raw(&self, modality: Modality) -> &[f32] {
        match modality {
            Modality::A => &self.raw_a,
            Modality::B => &self.raw_b,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub items: Vec<CorpusItem>,
}

/// Seeded mixing matrix for one modality.
pub fn mixing_matrix(cfg: &CorpusConfig, modality: Modality) -> Mat {
    let scale = 1.0 / (cfg.d_latent as f32).sqrt();
    let shared = Mat::random(cfg.input_dim, cfg.d_latent, 1.0, &mut Rng::new(cfg.seed ^ 0x6d69_7865));
    let mut rng = Rng::new(cfg.seed ^ (0x4d00 + modality.tag() as u64));
    let own = Mat::random(cfg.input_dim, cfg.d_latent, 1.0, &mut rng);
    let values = shared
        .values()
        .iter()
        .zip(own.values())
        .map(|(s, o)| (s + cfg.modality_gap * o) * scale)
        .collect();
    Mat::new(cfg.input_dim, cfg.d_latent, values).expect("shape")
}

/// Seeded clutter basis shared by both modalities.
pub fn clutter_basis(cfg: &CorpusConfig) -> Mat {
    let scale = cfg.clutter_gain / (cfg.clutter_rank as f32).sqrt();
    Mat::random(cfg.input_dim, cfg.clutter_rank, scale, &mut Rng::new(cfg.seed ^ 0x636c_7574))
}

pub fn generate(cfg: &CorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let g_a = mixing_matrix(cfg, Modality::A);
    let g_b = mixing_matrix(cfg, Modality::B);
    let clutter = clutter_basis(cfg);
    let mut rng = Rng::new(cfg.seed);
    let mut items = Vec::with_capacity(cfg.n);
    for id in 0..cfg.n as u64 {
        let latent: Vec<f32> = (0..cfg.d_latent).map(|_| rng.normal() as f32).collect();
        let difficulty = rng.uniform_range(cfg.noise_low as f64, cfg.noise_high as f64) as f32;
        let observe = |g: &Mat, rng: &mut Rng| -> Result<Vec<f32>> {
            let clean = matvec(g, &latent)?;
            let coef: Vec<f32> = (0..cfg.clutter_rank).map(|_| rng.normal() as f32).collect();
            if difficulty == 0.0 {
                return Ok(clean);
            }
            let noise = matvec(&clutter, &coef)?;
            Ok(clean.iter().zip(&noise).map(|(v, n)| v + difficulty * n).collect())
        };
        let raw_a = observe(&g_a, &mut rng)?;
        let raw_b = observe(&g_b, &mut rng)?;
        items.push(CorpusItem { item_id: id, latent, raw_a, raw_b, difficulty });
    }
    Ok(Corpus { config: cfg.clone(), items })
}

pub const CORPUS_MAGIC: &[u8; 4] = b"EMCP";
pub const CORPUS_VERSION: u32 = 1;

impl Corpus {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, item_id: u64) -> Option<&CorpusItem> {
        self.items.iter().find(|it| it.item_id == item_id)
    }

    /// `item_id,difficulty` rows, preceded by `# ` comment lines carrying
    /// `header`.
    pub fn to_csv(&self, header: &str) -> String {
        let mut out = comment_block(header);
        out.push_str("item_id,difficulty\n");
        for it in &self.items {
            let _ = writeln!(out, "{},{}", it.item_id, it.difficulty);
        }
        out
    }

    /// Binary sidecar with the raw vectors:
    ///
    /// ```text
    /// "EMCP" | u32 version | u32 n | u32 d_latent | u32 input_dim
    /// f32 noise_low | f32 noise_high | f32 modality_gap
    /// u32 clutter_rank | f32 clutter_gain | u64 seed
    /// n x (u64 id | f32 difficulty | latent | raw_a | raw_b)
    /// ```
    pub fn to_sidecar(&self) -> Vec<u8> {
        let c = &self.config;
        let mut w = ByteWriter::new();
        w.bytes(CORPUS_MAGIC);
        w.u32(CORPUS_VERSION);
        w.u32(self.items.len() as u32);
        w.u32(c.d_latent as u32);
        w.u32(c.input_dim as u32);
        w.f32(c.noise_low);
        w.f32(c.noise_high);
        w.f32(c.modality_gap);
        w.u32(c.clutter_rank as u32);
        w.f32(c.clutter_gain);
        w.u64(c.seed);
        for it in &self.items {
            w.u64(it.item_id);
            w.f32(it.difficulty);
            w.f32s(&it.latent);
            w.f32s(&it.raw_a);
            w.f32s(&it.raw_b);
        }
        w.into_inner()
    }

    pub fn from_sidecar(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(CORPUS_MAGIC)?;
        let version = r.u32()?;
        if version != CORPUS_VERSION {
            return Err(Error::malformed(format!("corpus version {version}")));
        }
        let n = r.u32()? as usize;
        let d_latent = r.u32()? as usize;
        let input_dim = r.u32()? as usize;
        let config = CorpusConfig {
            n,
            d_latent,
            input_dim,
            noise_low: r.f32()?,
            noise_high: r.f32()?,
            modality_gap: r.f32()?,
            clutter_rank: r.u32()? as usize,
            clutter_gain: r.f32()?,
            seed: r.u64()?,
        };
        config.validate().map_err(|e| Error::malformed(e.to_string()))?;
        let per_item = 12 + 4 * (d_latent + 2 * input_dim);
        if r.remaining() != n.saturating_mul(per_item) {
            return Err(Error::malformed(format!(
                "corpus body is {} bytes, expected {n} items of {per_item}",
                r.remaining()
            )));
        }
        let mut items = Vec::with_capacity(n);
        for _ in 0..n {
            let item_id = r.u64()?;
            let difficulty = r.f32()?;
            if !difficulty.is_finite() {
                return Err(Error::malformed("non-finite difficulty"));
            }
            items.push(CorpusItem {
                item_id,
                difficulty,
                latent: r.f32s(d_latent)?,
                raw_a: r.f32s(input_dim)?,
                raw_b: r.f32s(input_dim)?,
            });
        }
        let mut ids: Vec<u64> = items.iter().map(|i| i.item_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::malformed("duplicate item ids"));
        }
        Ok(Self { config, items })
    }

    pub fn save(&self, csv_path: &Path, sidecar_path: &Path, header: &str) -> Result<()> {
        std::fs::write(csv_path, self.to_csv(header))?;
        std::fs::write(sidecar_path, self.to_sidecar())?;
        Ok(())
    }

    /// Loads the sidecar and checks that the CSV lists the same ids and
    /// difficulties in the same order.
    pub fn load(csv_path: &Path, sidecar_path: &Path) -> Result<Self> {
        let corpus = Self::from_sidecar(&std::fs::read(sidecar_path)?)?;
        let rows = parse_difficulty_csv(&std::fs::read_to_string(csv_path)?)?;
        if rows.len() != corpus.items.len()
            || rows.iter().zip(&corpus.items).any(|((id, d), it)| *id != it.item_id || *d != it.difficulty)
        {
            return Err(Error::Integrity("corpus CSV and sidecar disagree".into()));
        }
        Ok(corpus)
    }
}

pub(crate) fn comment_block(header: &str) -> String {
    let mut out = String::new();
    for line in header.lines().filter(|l| !l.is_empty()) {
        let _ = writeln!(out, "# {line}");
    }
    out
}

/// Data rows of a CSV, skipping `#` comments, blank lines and the header,
/// paired with their 1-based line numbers.
pub(crate) fn csv_rows<'a>(text: &'a str, header: &str) -> Result<Vec<(usize, Vec<&'a str>)>> {
    let mut rows = Vec::new();
    let mut saw_header = false;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !saw_header {
            if line != header {
                return Err(Error::Parse { line: i + 1, msg: format!("expected header {header:?}") });
            }
            saw_header = true;
            continue;
        }
        rows.push((i + 1, line.split(',').map(str::trim).collect()));
    }
    Ok(rows)
}

pub fn parse_difficulty_csv(text: &str) -> Result<Vec<(u64, f32)>> {
    csv_rows(text, "item_id,difficulty")?
        .into_iter()
        .map(|(line, cols)| match cols.as_slice() {
            [id, d] => {
                let id = id.parse::<u64>().map_err(|e| Error::Parse { line, msg: format!("item_id: {e}") })?;
                let d = d.parse::<f32>().map_err(|e| Error::Parse { line, msg: format!("difficulty: {e}") })?;
                Ok((id, d))
            }
            _ => Err(Error::Parse { line, msg: format!("expected 2 columns, got {}", cols.len()) }),
        })
        .collect()
}
