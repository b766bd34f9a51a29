//! On-disk corpus: binary PPM images, binary PGM masks, a JSON-lines
//! manifest and the vocabulary file.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use mafn_tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::synth::{self, ExpressionSample, SceneMeta, SceneSpec};
use crate::text::Vocabulary;

pub const MANIFEST: &str = "manifest.jsonl";
pub const VOCAB: &str = "vocab.txt";

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub split: String,
    pub index: usize,
    pub image: String,
    pub mask: String,
    pub tokens: Vec<u32>,
    pub expression: String,
    pub seed: u64,
    pub version: u32,
    /// SHA-256 (hex) of the image file bytes followed by the mask file bytes.
    pub checksum: String,
    pub meta: SceneMeta,
}

/// A loaded sample.
#[derive(Clone, Debug)]
pub struct Sample {
    pub record: SampleRecord,
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub vocab: Vocabulary,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Vec<&Sample> {
        self.samples
            .iter()
            .filter(|s| s.record.split == name)
            .collect()
    }

    pub fn split_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for s in &self.samples {
            if !names.contains(&s.record.split) {
                names.push(s.record.split.clone());
            }
        }
        names
    }
}

pub fn encode_ppm(w: usize, h: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub fn encode_pgm(w: usize, h: usize, gray: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

/// Parses a binary PNM header and returns `(width, height, payload)`.
fn decode_pnm<'a>(bytes: &'a [u8], magic: &str, channels: usize, path: &Path) -> Result<(usize, usize, &'a [u8])> {
    let bad = |msg: String| Error::format(path, msg);
    if !bytes.starts_with(magic.as_bytes()) {
        return Err(bad(format!("not a binary {magic} file")));
    }
    let mut pos = magic.len();
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(bad("truncated header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(bad("malformed header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header number".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("malformed header".into()));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval != 255 || w == 0 || h == 0 {
        return Err(bad(format!("unsupported dimensions {w}x{h} or maxval {maxval}")));
    }
    let need = w * h * channels;
    let data = &bytes[pos..];
    if data.len() < need {
        return Err(bad(format!("truncated pixel data: {} of {need} bytes", data.len())));
    }
    Ok((w, h, &data[..need]))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// `(width, height, RGB bytes)`.
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = read_file(path)?;
    let (w, h, data) = decode_pnm(&bytes, "P6", 3, path)?;
    Ok((w, h, data.to_vec()))
}

/// `(width, height, gray bytes)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = read_file(path)?;
    let (w, h, data) = decode_pnm(&bytes, "P5", 1, path)?;
    Ok((w, h, data.to_vec()))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn checksum(image: &[u8], mask: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(image);
    h.update(mask);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// A generated sample with its place in the corpus.
#[derive(Clone, Debug)]
pub struct Generated {
    pub split: String,
    pub index: usize,
    pub seed: u64,
    pub sample: ExpressionSample,
}

/// Writes images, masks, vocabulary and manifest under `dir`.
pub fn write_dataset(dir: &Path, vocab: &Vocabulary, items: &[Generated]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    vocab.write(&dir.join(VOCAB))?;
    let mut manifest = Vec::new();
    for it in items {
        let s = &it.sample;
        let n = s.size();
        let image_rel = format!("{}/{:05}.ppm", it.split, it.index);
        let mask_rel = format!("{}/{:05}.pgm", it.split, it.index);
        let image = encode_ppm(n, n, &s.pixels);
        let mask = encode_pgm(n, n, &s.mask_bytes);
        write_file(&dir.join(&image_rel), &image)?;
        write_file(&dir.join(&mask_rel), &mask)?;
        let record = SampleRecord {
            split: it.split.clone(),
            index: it.index,
            image: image_rel,
            mask: mask_rel,
            tokens: s.tokens.clone(),
            expression: s.meta.words.join(" "),
            seed: it.seed,
            version: synth::GENERATOR_VERSION,
            checksum: checksum(&image, &mask),
            meta: s.meta.clone(),
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::Data(format!("manifest encoding: {e}")))?;
        manifest.extend_from_slice(line.as_bytes());
        manifest.push(b'\n');
    }
    let path = dir.join(MANIFEST);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(&manifest).map_err(|e| Error::io(&path, e))
}

/// Generates `(split, count)` groups with per-sample seeds derived from `seed`.
pub fn generate(seed: u64, splits: &[(&str, usize)], spec: &SceneSpec, vocab: &Vocabulary) -> Result<Vec<Generated>> {
    let mut items = Vec::new();
    for &(split, count) in splits {
        for index in 0..count {
            let s = synth::sample_seed(seed, split, index);
            items.push(Generated {
                split: split.to_string(),
                index,
                seed: s,
                sample: synth::generate_sample(s, spec, vocab)?,
            });
        }
    }
    Ok(items)
}

/// Resolves a manifest path. Relative paths are taken from the manifest
/// directory; absolute paths that no longer exist (a moved corpus) are
/// retried as ever-shorter suffixes under the manifest directory.
pub fn resolve_path(dir: &Path, stored: &str) -> PathBuf {
    let p = Path::new(stored);
    if p.is_relative() {
        return dir.join(p);
    }
    if p.exists() {
        return p.to_path_buf();
    }
    let parts: Vec<_> = p.components().skip(1).collect();
    for start in 1..parts.len() {
        let candidate: PathBuf = std::iter::once(dir.as_os_str())
            .chain(parts[start..].iter().map(|c| c.as_os_str()))
            .collect();
        if candidate.exists() {
            return candidate;
        }
    }
    p.to_path_buf()
}

pub fn read_manifest(dir: &Path) -> Result<Vec<SampleRecord>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::format(&path, format!("line {}: {e}", n + 1)))
        })
        .collect()
}

pub fn load_sample(dir: &Path, record: SampleRecord) -> Result<Sample> {
    let image_path = resolve_path(dir, &record.image);
    let mask_path = resolve_path(dir, &record.mask);
    let image_bytes = read_file(&image_path)?;
    let mask_bytes = read_file(&mask_path)?;
    let (w, h, rgb) = decode_pnm(&image_bytes, "P6", 3, &image_path)?;
    let (mw, mh, gray) = decode_pnm(&mask_bytes, "P5", 1, &mask_path)?;
    if (w, h) != (mw, mh) {
        return Err(Error::format(
            &mask_path,
            format!("mask is {mw}x{mh} but image {} is {w}x{h}", image_path.display()),
        ));
    }
    if checksum(&image_bytes, &mask_bytes) != record.checksum {
        return Err(Error::format(
            &image_path,
            format!("checksum mismatch for sample {}/{}", record.split, record.index),
        ));
    }
    Ok(Sample {
        image: synth::image_tensor(rgb, h, w),
        mask: synth::mask_tensor(gray, h, w),
        record,
    })
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let vocab = Vocabulary::read(&dir.join(VOCAB))?;
    let records = read_manifest(dir)?;
    let samples = records
        .into_iter()
        .map(|r| load_sample(dir, r))
        .collect::<Result<Vec<_>>>()?;
    for s in &samples {
        if let Some(&bad) = s.record.tokens.iter().find(|&&t| t as usize >= vocab.len()) {
            return Err(Error::Data(format!(
                "sample {}/{} uses token id {bad} outside the vocabulary",
                s.record.split, s.record.index
            )));
        }
    }
    Ok(Dataset {
        dir: dir.to_path_buf(),
        vocab,
        samples,
    })
}

/// Mean language-blind ceiling over a set of samples.
pub fn blind_ceiling(samples: &[&Sample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples
        .iter()
        .map(|s| synth::blind_ceiling(&s.record.meta))
        .sum::<f64>()
        / samples.len() as f64
}
