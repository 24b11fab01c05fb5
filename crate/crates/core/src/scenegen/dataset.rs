//! Sharded fixed-record scene datasets.
//!
//! Each record is little-endian `[label u16][occluder labels 2 x u16]
//! [occlusion fraction f32][left 1024 x u8][right 1024 x u8]`. A text manifest
//! (`manifest.txt`, one `key=value` per line) records the generation settings,
//! source checksums and the SHA-256 of every shard.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::idx::DigitSet;
use super::scene::{compose_scene, valid_offsets, Disparity, ScenePool, SceneSample, CANVAS_PIXELS};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const FORMAT_VERSION: u32 = 1;
pub const RECORD_BYTES: usize = 2 + 4 + 4 + 2 * CANVAS_PIXELS;
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub const ALL: [Split; 2] = [Split::Train, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn stream_tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }
}

/// Which views a model sees: the left view alone, or both as two channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    Mono,
    Stereo,
}

impl InputMode {
    pub fn name(self) -> &'static str {
        match self {
            InputMode::Mono => "mono",
            InputMode::Stereo => "stereo",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mono" => Some(InputMode::Mono),
            "stereo" => Some(InputMode::Stereo),
            _ => None,
        }
    }

    pub fn channels(self) -> usize {
        match self {
            InputMode::Mono => 1,
            InputMode::Stereo => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateConfig {
    pub seed: u64,
    pub samples_per_base: usize,
    /// Use only the first `n` base digits of each split.
    pub limit_bases: Option<usize>,
    pub disparity: Disparity,
    pub shard_records: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            seed: 0,
            samples_per_base: 10,
            limit_bases: None,
            disparity: Disparity::default(),
            shard_records: 50_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShardInfo {
    pub file: String,
    pub records: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitInfo {
    pub bases: usize,
    pub count: usize,
    pub source_sha256: String,
    pub shards: Vec<ShardInfo>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub samples_per_base: usize,
    pub limit_bases: Option<usize>,
    pub disparity: Disparity,
    pub splits: BTreeMap<Split, SplitInfo>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> Result<&SplitInfo> {
        self.splits.get(&split).ok_or_else(|| Error::Invalid(format!("dataset has no {} split", split.name())))
    }

    /// Identifier of one split's content: SHA-256 over its shard hashes.
    pub fn split_checksum(&self, split: Split) -> Result<String> {
        let mut h = Sha256::new();
        for s in &self.split(split)?.shards {
            h.update(s.sha256.as_bytes());
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "format_version={}", self.format_version);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "samples_per_base={}", self.samples_per_base);
        let _ = writeln!(s, "limit_bases={}", self.limit_bases.map(|n| n.to_string()).unwrap_or_default());
        let _ = writeln!(s, "disparity_far={}", self.disparity.far);
        let _ = writeln!(s, "disparity_near={}", self.disparity.near);
        let _ = writeln!(s, "record_bytes={RECORD_BYTES}");
        for (split, info) in &self.splits {
            let n = split.name();
            let _ = writeln!(s, "{n}.bases={}", info.bases);
            let _ = writeln!(s, "{n}.count={}", info.count);
            let _ = writeln!(s, "{n}.source_sha256={}", info.source_sha256);
            let _ = writeln!(s, "{n}.shards={}", info.shards.len());
            for (i, sh) in info.shards.iter().enumerate() {
                let _ = writeln!(s, "{n}.shard.{i}={} {} {}", sh.file, sh.records, sh.sha256);
            }
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |d: String| Error::format(path, d);
        let mut kv = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("line {line:?}")))?;
            kv.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| kv.get(k).ok_or_else(|| bad(format!("missing {k}")));
        let num = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| bad(format!("{k} is not an integer"))) };
        let format_version = num("format_version")? as u32;
        if format_version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {format_version}")));
        }
        if num("record_bytes")? as usize != RECORD_BYTES {
            return Err(bad("unexpected record size".into()));
        }
        let limit = get("limit_bases")?;
        let limit_bases = if limit.is_empty() {
            None
        } else {
            Some(limit.parse().map_err(|_| bad("limit_bases is not an integer".into()))?)
        };
        let mut splits = BTreeMap::new();
        for split in Split::ALL {
            let n = split.name();
            if !kv.contains_key(&format!("{n}.count")) {
                continue;
            }
            let mut shards = Vec::new();
            for i in 0..num(&format!("{n}.shards"))? {
                let v = get(&format!("{n}.shard.{i}"))?;
                let parts: Vec<&str> = v.split_whitespace().collect();
                let [file, records, sha] = parts[..] else {
                    return Err(bad(format!("shard entry {v:?}")));
                };
                shards.push(ShardInfo {
                    file: file.to_string(),
                    records: records.parse().map_err(|_| bad(format!("shard entry {v:?}")))?,
                    sha256: sha.to_string(),
                });
            }
            splits.insert(
                split,
                SplitInfo {
                    bases: num(&format!("{n}.bases"))? as usize,
                    count: num(&format!("{n}.count"))? as usize,
                    source_sha256: get(&format!("{n}.source_sha256"))?.clone(),
                    shards,
                },
            );
        }
        Ok(DatasetManifest {
            format_version,
            seed: num("seed")?,
            samples_per_base: num("samples_per_base")? as usize,
            limit_bases,
            disparity: Disparity { far: num("disparity_far")? as u32, near: num("disparity_near")? as u32 },
            splits,
        })
    }
}

pub fn encode_record(s: &SceneSample, out: &mut Vec<u8>) {
    out.extend_from_slice(&s.label.to_le_bytes());
    for l in s.occluder_labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out.extend_from_slice(&s.occlusion_fraction.to_le_bytes());
    out.extend_from_slice(&s.left);
    out.extend_from_slice(&s.right);
}

/// Scenes generated for one base digit. The rng stream depends only on the
/// seed, split and base index, so bases can be processed in any order.
pub fn generate_base(
    pool: &ScenePool<'_>,
    split: Split,
    base: usize,
    cfg: &GenerateConfig,
    offsets: &[(i32, i32)],
) -> Result<Vec<SceneSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream((split.stream_tag() << 32) | base as u64);
    let digits = pool.digits;
    (0..cfg.samples_per_base)
        .map(|j| {
            compose_scene(
                digits.image(base),
                digits.label(base) as u16,
                pool,
                offsets,
                &cfg.disparity,
                &mut rng,
                format!("{}/{base}/{j}", split.name()),
            )
        })
        .collect()
}

fn base_count(digits: &DigitSet, cfg: &GenerateConfig) -> usize {
    cfg.limit_bases.map_or(digits.len(), |n| n.min(digits.len()))
}

fn validate(cfg: &GenerateConfig) -> Result<()> {
    cfg.disparity.validate()?;
    if cfg.samples_per_base == 0 || cfg.shard_records == 0 {
        return Err(Error::Invalid("samples_per_base and shard_records must be positive".into()));
    }
    Ok(())
}

/// Generates one split in memory, base digits in order.
pub fn generate_split(digits: &DigitSet, split: Split, cfg: &GenerateConfig) -> Result<Vec<SceneSample>> {
    validate(cfg)?;
    let pool = ScenePool::new(digits)?;
    let offsets = valid_offsets();
    let per_base: Vec<Vec<SceneSample>> = (0..base_count(digits, cfg))
        .into_par_iter()
        .map(|b| generate_base(&pool, split, b, cfg, &offsets))
        .collect::<Result<_>>()?;
    Ok(per_base.into_iter().flatten().collect())
}

/// Generates both splits into `out_dir` and writes the manifest. Targets and
/// occluders of a split come from that split's digits only.
pub fn generate_dataset(
    cfg: &GenerateConfig,
    train: &DigitSet,
    test: &DigitSet,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    validate(cfg)?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    let offsets = valid_offsets();
    let bases_per_shard = (cfg.shard_records / cfg.samples_per_base).max(1);
    let mut splits = BTreeMap::new();
    for (split, digits) in [(Split::Train, train), (Split::Test, test)] {
        let pool = ScenePool::new(digits)?;
        let bases = base_count(digits, cfg);
        let mut shards = Vec::new();
        let mut count = 0;
        for (i, start) in (0..bases).step_by(bases_per_shard).enumerate() {
            let end = (start + bases_per_shard).min(bases);
            let scenes: Vec<Vec<SceneSample>> = (start..end)
                .into_par_iter()
                .map(|b| generate_base(&pool, split, b, cfg, &offsets))
                .collect::<Result<_>>()?;
            let mut bytes = Vec::with_capacity((end - start) * cfg.samples_per_base * RECORD_BYTES);
            let mut records = 0;
            for s in scenes.iter().flatten() {
                encode_record(s, &mut bytes);
                records += 1;
            }
            let file = format!("{}-{i:05}.bin", split.name());
            let mut f = fs::File::create(out_dir.join(&file))?;
            f.write_all(&bytes)?;
            shards.push(ShardInfo { file, records, sha256: hex::encode(Sha256::digest(&bytes)) });
            count += records;
        }
        splits.insert(split, SplitInfo { bases, count, source_sha256: digits.checksum(), shards });
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        seed: cfg.seed,
        samples_per_base: cfg.samples_per_base,
        limit_bases: cfg.limit_bases,
        disparity: cfg.disparity,
        splits,
    };
    fs::write(out_dir.join(MANIFEST_FILE), manifest.to_text())?;
    Ok(manifest)
}

/// Decoded records of one split, views stored contiguously.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SceneRecords {
    pub labels: Vec<u16>,
    pub occluder_labels: Vec<[u16; 2]>,
    pub occlusion: Vec<f32>,
    /// `len() * 2048` bytes: left then right view of each record.
    pub views: Vec<u8>,
}

impl SceneRecords {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn left(&self, i: usize) -> &[u8] {
        &self.views[i * 2 * CANVAS_PIXELS..(2 * i + 1) * CANVAS_PIXELS]
    }

    pub fn right(&self, i: usize) -> &[u8] {
        &self.views[(2 * i + 1) * CANVAS_PIXELS..(2 * i + 2) * CANVAS_PIXELS]
    }

    pub fn push_bytes(&mut self, rec: &[u8]) {
        let u16_at = |o: usize| u16::from_le_bytes([rec[o], rec[o + 1]]);
        self.labels.push(u16_at(0));
        self.occluder_labels.push([u16_at(2), u16_at(4)]);
        self.occlusion.push(f32::from_le_bytes([rec[6], rec[7], rec[8], rec[9]]));
        self.views.extend_from_slice(&rec[10..RECORD_BYTES]);
    }

    pub fn from_scenes(scenes: &[SceneSample]) -> Self {
        let mut out = SceneRecords::default();
        let mut buf = Vec::with_capacity(RECORD_BYTES);
        for s in scenes {
            buf.clear();
            encode_record(s, &mut buf);
            out.push_bytes(&buf);
        }
        out
    }

    /// Batch of inputs in [0, 1] shaped (rows, 32, 32, channels).
    pub fn to_tensor(&self, rows: &[usize], mode: InputMode) -> Tensor<f32> {
        let c = mode.channels();
        let mut data = Vec::with_capacity(rows.len() * CANVAS_PIXELS * c);
        for &r in rows {
            let (l, rt) = (self.left(r), self.right(r));
            for p in 0..CANVAS_PIXELS {
                data.push(l[p] as f32 / 255.0);
                if c == 2 {
                    data.push(rt[p] as f32 / 255.0);
                }
            }
        }
        Tensor::from_vec(Shape::new(rows.len(), 32, 32, c), data).expect("extents match")
    }
}

/// A generated dataset on disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let path = dir.join(MANIFEST_FILE);
        let manifest = DatasetManifest::parse(&fs::read_to_string(&path)?, &path)?;
        Ok(Dataset { dir, manifest })
    }

    /// Reads up to `limit` records of a split, checking every shard it touches
    /// against the manifest checksum.
    pub fn load(&self, split: Split, limit: Option<usize>) -> Result<SceneRecords> {
        let info = self.manifest.split(split)?;
        let want = limit.map_or(info.count, |n| n.min(info.count));
        let mut out = SceneRecords::default();
        for sh in &info.shards {
            if out.len() >= want {
                break;
            }
            let path = self.dir.join(&sh.file);
            let bytes = fs::read(&path)?;
            let actual = hex::encode(Sha256::digest(&bytes));
            if actual != sh.sha256 {
                return Err(Error::ChecksumMismatch(sh.sha256.clone(), format!("{actual} ({})", path.display())));
            }
            if bytes.len() != sh.records * RECORD_BYTES {
                return Err(Error::format(&path, format!("{} bytes for {} records", bytes.len(), sh.records)));
            }
            for rec in bytes.chunks_exact(RECORD_BYTES).take(want - out.len()) {
                out.push_bytes(rec);
            }
        }
        Ok(out)
    }
}

/// Counts of occlusion fractions per tenth of [0, 1].
pub fn occlusion_deciles(fractions: &[f32]) -> [usize; 10] {
    let mut h = [0; 10];
    for &f in fractions {
        h[((f * 10.0) as usize).min(9)] += 1;
    }
    h
}
