use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::{argmax_rows, forward_unrolled, Checkpoint};
use crate::scenegen::{InputMode, SceneRecords};

pub const EVAL_MANIFEST: &str = "eval.txt";
pub const CORRECTNESS_FILE: &str = "correctness.bin";
pub const DUMP_FILE: &str = "softmax.bin";
const EVAL_FORMAT_VERSION: u32 = 1;

/// Softmax outputs of every sample at every time step.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbDump {
    pub tau: usize,
    pub classes: usize,
    pub ids: Vec<u32>,
    pub labels: Vec<u16>,
    /// `len() * tau * classes` values, sample-major then step-major.
    pub probs: Vec<f32>,
}

impl ProbDump {
    pub fn new(tau: usize, classes: usize) -> Self {
        ProbDump { tau, classes, ids: Vec::new(), labels: Vec::new(), probs: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn step(&self, i: usize, t: usize) -> &[f32] {
        let o = (i * self.tau + t) * self.classes;
        &self.probs[o..o + self.classes]
    }

    /// Predicted class at step `t`; ties go to the lowest index.
    pub fn predicted(&self, i: usize, t: usize) -> usize {
        let row = self.step(i, t);
        let mut best = 0;
        for (k, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = k;
            }
        }
        best
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau == 0 || self.classes == 0 {
            return Err(Error::Invalid("softmax dump needs at least one step and class".into()));
        }
        if self.labels.len() != self.len() || self.probs.len() != self.len() * self.tau * self.classes {
            return Err(Error::shape("ProbDump", "ids, labels and probabilities disagree in length"));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l as usize >= self.classes) {
            return Err(Error::Invalid(format!("label {l} outside {} classes", self.classes)));
        }
        Ok(())
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * (8 + 4 * self.tau * self.classes));
        let row = self.tau * self.classes;
        for i in 0..self.len() {
            out.extend_from_slice(&self.ids[i].to_le_bytes());
            out.extend_from_slice(&(self.labels[i] as u32).to_le_bytes());
            for p in &self.probs[i * row..(i + 1) * row] {
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
        out
    }

    fn from_bytes(bytes: &[u8], tau: usize, classes: usize, path: &Path) -> Result<Self> {
        let rec = 8 + 4 * tau * classes;
        if !bytes.len().is_multiple_of(rec) {
            return Err(Error::format(path, format!("{} bytes is not a multiple of {rec}", bytes.len())));
        }
        let mut d = ProbDump::new(tau, classes);
        for r in bytes.chunks_exact(rec) {
            d.ids.push(u32_at(r, 0));
            let label = u32_at(r, 4);
            d.labels.push(u16::try_from(label).map_err(|_| Error::format(path, "label out of range"))?);
            d.probs.extend(r[8..].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])));
        }
        d.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(d)
    }
}

fn u32_at(b: &[u8], o: usize) -> u32 {
    u32::from_le_bytes([b[o], b[o + 1], b[o + 2], b[o + 3]])
}

/// Per-sample correctness of one model on one dataset split.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub model: String,
    pub preset: String,
    pub input_mode: InputMode,
    pub dataset_checksum: String,
    pub tau: usize,
    pub classes: usize,
    pub ids: Vec<u32>,
    pub correct: Vec<bool>,
    pub dump: Option<ProbDump>,
}

impl Evaluation {
    pub fn len(&self) -> usize {
        self.correct.len()
    }

    pub fn is_empty(&self) -> bool {
        self.correct.is_empty()
    }

    pub fn correct_count(&self) -> usize {
        self.correct.iter().filter(|&&c| c).count()
    }

    /// Fraction of samples classified correctly at the last time step.
    pub fn accuracy(&self) -> f64 {
        self.correct_count() as f64 / self.len().max(1) as f64
    }

    pub fn error_rate(&self) -> f64 {
        1.0 - self.accuracy()
    }

    fn correctness_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 * self.len());
        for (&id, &c) in self.ids.iter().zip(&self.correct) {
            out.extend_from_slice(&id.to_le_bytes());
            out.extend_from_slice(&(if c { 1.0f32 } else { 0.0 }).to_le_bytes());
        }
        out
    }

    /// Writes the correctness vector, the optional softmax dump and a text
    /// manifest into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let corr = self.correctness_bytes();
        let mut m = BTreeMap::new();
        m.insert("format_version", EVAL_FORMAT_VERSION.to_string());
        m.insert("model", self.model.clone());
        m.insert("preset", self.preset.clone());
        m.insert("input_mode", self.input_mode.name().to_string());
        m.insert("dataset_checksum", self.dataset_checksum.clone());
        m.insert("count", self.len().to_string());
        m.insert("tau", self.tau.to_string());
        m.insert("classes", self.classes.to_string());
        m.insert("accuracy", self.accuracy().to_string());
        m.insert("correctness", CORRECTNESS_FILE.to_string());
        m.insert("correctness_sha256", hex::encode(Sha256::digest(&corr)));
        fs::write(dir.join(CORRECTNESS_FILE), &corr)?;
        match &self.dump {
            Some(d) => {
                let bytes = d.to_bytes();
                m.insert("dump", DUMP_FILE.to_string());
                m.insert("dump_sha256", hex::encode(Sha256::digest(&bytes)));
                fs::write(dir.join(DUMP_FILE), bytes)?;
            }
            None => {
                m.insert("dump", "none".to_string());
            }
        }
        let text: String = m.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        fs::write(dir.join(EVAL_MANIFEST), text)?;
        Ok(())
    }

    /// Reads an evaluation written by [`Evaluation::save`], verifying file
    /// checksums. With `with_dump`, a missing softmax dump is an error.
    pub fn load(dir: impl AsRef<Path>, with_dump: bool) -> Result<Self> {
        let dir = dir.as_ref();
        let mpath = dir.join(EVAL_MANIFEST);
        let text = fs::read_to_string(&mpath)?;
        let mut m = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::format(&mpath, format!("bad line {line:?}")))?;
            m.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| m.get(k).cloned().ok_or_else(|| Error::format(&mpath, format!("missing key {k}")));
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::format(&mpath, format!("bad value for {k}")))
        };
        if num("format_version")? != EVAL_FORMAT_VERSION as usize {
            return Err(Error::format(&mpath, "unsupported format version"));
        }
        let mode = get("input_mode")?;
        let input_mode = InputMode::parse(&mode).ok_or_else(|| Error::format(&mpath, format!("input mode {mode}")))?;
        let (tau, classes, count) = (num("tau")?, num("classes")?, num("count")?);

        let read_checked = |file: &str, key: &str| -> Result<Vec<u8>> {
            let bytes = fs::read(dir.join(file))?;
            let actual = hex::encode(Sha256::digest(&bytes));
            let expected = get(key)?;
            if actual != expected {
                return Err(Error::ChecksumMismatch(expected, format!("{actual} ({})", dir.join(file).display())));
            }
            Ok(bytes)
        };
        let corr = read_checked(&get("correctness")?, "correctness_sha256")?;
        if corr.len() != 8 * count {
            return Err(Error::format(dir.join(CORRECTNESS_FILE), "record count does not match manifest"));
        }
        let mut ids = Vec::with_capacity(count);
        let mut correct = Vec::with_capacity(count);
        for r in corr.chunks_exact(8) {
            ids.push(u32_at(&r[..4], 0));
            correct.push(f32::from_le_bytes([r[4], r[5], r[6], r[7]]) != 0.0);
        }
        let dump_file = get("dump")?;
        let dump = if dump_file == "none" {
            if with_dump {
                return Err(Error::MissingDump(dir.to_path_buf()));
            }
            None
        } else if with_dump {
            let path = dir.join(&dump_file);
            if !path.exists() {
                return Err(Error::MissingDump(dir.to_path_buf()));
            }
            let bytes = read_checked(&dump_file, "dump_sha256")?;
            let d = ProbDump::from_bytes(&bytes, tau, classes, &path)?;
            if d.ids != ids {
                return Err(Error::format(&path, "sample ids differ from the correctness vector"));
            }
            Some(d)
        } else {
            None
        };
        Ok(Evaluation {
            model: get("model")?,
            preset: get("preset")?,
            input_mode,
            dataset_checksum: get("dataset_checksum")?,
            tau,
            classes,
            ids,
            correct,
            dump,
        })
    }
}

/// Inference-mode evaluation of a checkpoint on every record.
///
/// Sample ids are record indices. Scaled-down models take their preset name
/// from the checkpoint's `model` metadata. A sample counts as correct when the
/// last-step prediction equals its label. With `keep_dump` every step's
/// softmax output is retained.
pub fn evaluate(ck: &Checkpoint, data: &SceneRecords, batch_size: usize, keep_dump: bool) -> Result<Evaluation> {
    let spec = &ck.spec;
    let mode = match spec.input_channels {
        1 => InputMode::Mono,
        2 => InputMode::Stereo,
        c => return Err(Error::Invalid(format!("scene datasets provide 1 or 2 channels, model wants {c}"))),
    };
    if spec.input_size != 32 {
        return Err(Error::Invalid("scene datasets are 32x32".into()));
    }
    if data.len() > u32::MAX as usize {
        return Err(Error::Invalid("too many records for 32-bit sample ids".into()));
    }
    if let Some(&l) = data.labels.iter().find(|&&l| l as usize >= spec.classes) {
        return Err(Error::Invalid(format!("label {l} outside the model's {} classes", spec.classes)));
    }
    let rows: Vec<usize> = (0..data.len()).collect();
    let mut correct = Vec::with_capacity(data.len());
    let mut dump = keep_dump.then(|| ProbDump::new(spec.tau, spec.classes));
    for chunk in rows.chunks(batch_size.max(1)) {
        let x = data.to_tensor(chunk, mode);
        let trace = forward_unrolled(spec, &ck.params, &x, false)?;
        for (&r, p) in chunk.iter().zip(argmax_rows(trace.last_probs())) {
            correct.push(p == data.labels[r] as usize);
        }
        if let Some(d) = dump.as_mut() {
            for (b, &r) in chunk.iter().enumerate() {
                d.ids.push(r as u32);
                d.labels.push(data.labels[r]);
                for t in 0..spec.tau {
                    d.probs.extend_from_slice(trace.softmax_out(t).item(b));
                }
            }
        }
    }
    Ok(Evaluation {
        model: String::new(),
        preset: match (spec.preset_name(), ck.meta.get("model")) {
            (Some(p), _) => p.name().to_string(),
            (None, Some(m)) => m.clone(),
            (None, None) => "custom".to_string(),
        },
        input_mode: mode,
        dataset_checksum: String::new(),
        tau: spec.tau,
        classes: spec.classes,
        ids: (0..data.len() as u32).collect(),
        correct,
        dump,
    })
}
