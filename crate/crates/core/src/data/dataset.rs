//! Dataset directories: manifest, JSONL records, and PGM/PPM images.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::split::{Split, SplitManifest};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::image::{check_patch_grid, image_patches, read_pnm, Image};
use crate::model::Batch;
use crate::nn::AttentionMask;
use crate::rng::{streams, Rng};
use crate::text::{tokenize, Vocab};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATA_FILE: &str = "data.jsonl";
pub const IMAGE_DIR: &str = "images";

/// Worker-count cap for sample decoding.
pub const THREADS_ENV: &str = "DTCN_THREADS";

/// One line of `data.jsonl`. `image` is relative to the dataset directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub text: String,
    pub image: String,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub token_ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub image: Image,
    pub label: usize,
}

/// Writes `manifest.json` and `data.jsonl`; images must already be in place.
pub fn write_dataset_index(dir: &Path, manifest: &SplitManifest, records: &[Record]) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let mut json = serde_json::to_string_pretty(manifest).map_err(|e| Error::Data(e.to_string()))?;
    json.push('\n');
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    let path = dir.join(DATA_FILE);
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Data(e.to_string()))?;
        out.push(b'\n');
    }
    let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(&out).map_err(|e| Error::io(&path, e))
}

#[derive(Debug, Clone)]
pub struct DatasetIndex {
    pub dir: PathBuf,
    pub manifest: SplitManifest,
    pub records: Vec<Record>,
    by_id: HashMap<String, usize>,
}

impl DatasetIndex {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: SplitManifest =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let path = dir.join(DATA_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut records = Vec::new();
        let mut by_id = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let at = || format!("{}:{}", path.display(), i + 1);
            let r: Record = serde_json::from_str(line).map_err(|e| Error::Data(format!("{}: {e}", at())))?;
            if r.label >= manifest.num_classes {
                return Err(Error::Data(format!(
                    "{}: label {} outside [0, {})",
                    at(),
                    r.label,
                    manifest.num_classes
                )));
            }
            if by_id.insert(r.id.clone(), records.len()).is_some() {
                return Err(Error::Data(format!("{}: duplicate id `{}`", at(), r.id)));
            }
            records.push(r);
        }
        for split in [Split::Train, Split::Val, Split::Test] {
            if let Some(id) = manifest.ids(split).iter().find(|id| !by_id.contains_key(*id)) {
                return Err(Error::Data(format!("manifest id `{id}` has no record in {DATA_FILE}")));
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            records,
            by_id,
        })
    }

    pub fn record(&self, id: &str) -> Option<&Record> {
        self.by_id.get(id).map(|&i| &self.records[i])
    }

    /// Records of one split in manifest order.
    pub fn split_records(&self, split: Split) -> Vec<&Record> {
        self.manifest
            .ids(split)
            .iter()
            .map(|id| &self.records[self.by_id[id]])
            .collect()
    }

    /// Vocabulary built from the training texts.
    pub fn build_vocab(&self, cap: usize) -> Result<Vocab> {
        Vocab::build(self.split_records(Split::Train).iter().map(|r| r.text.as_str()), cap)
    }

    /// Decodes one split, tokenizing with `vocab` and checking images
    /// against `config`.
    pub fn load_split(&self, split: Split, vocab: &Vocab, config: &RunConfig) -> Result<Vec<Sample>> {
        check_patch_grid(config.image_height, config.image_width, config.patch_size)?;
        let records = self.split_records(split);
        decode_in_order(&records, worker_count()?, |r| self.decode(r, vocab, config))
    }

    fn decode(&self, r: &Record, vocab: &Vocab, config: &RunConfig) -> Result<Sample> {
        let image = read_pnm(&self.dir.join(&r.image))?;
        let dims = (image.height(), image.width(), image.channels());
        let want = (config.image_height, config.image_width, config.channels);
        if dims != want {
            return Err(Error::Data(format!(
                "sample `{}`: image is {}x{}x{}, config expects {}x{}x{}",
                r.id, dims.0, dims.1, dims.2, want.0, want.1, want.2
            )));
        }
        let (token_ids, mask) = tokenize(&r.text, vocab, config.max_seq_len);
        Ok(Sample {
            id: r.id.clone(),
            token_ids,
            mask,
            image,
            label: r.label,
        })
    }
}

/// `DTCN_THREADS`, default 1.
pub fn worker_count() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
    }
}

/// Applies `f` to every item on up to `threads` workers and returns the
/// results in input order; the first failing item (in order) wins.
pub fn decode_in_order<T, U, F>(items: &[T], threads: usize, f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync,
{
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let parts: Vec<Vec<Result<U>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("decode worker panicked")).collect()
    });
    parts.into_iter().flatten().collect()
}

/// Index batches over `n` items: in order, or shuffled with the epoch's
/// shuffle stream. The last batch may be short.
pub fn batch_order(n: usize, batch_size: usize, shuffle: Option<(u64, u64)>) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    if let Some((seed, epoch)) = shuffle {
        Rng::substream(seed, streams::SHUFFLE, epoch).shuffle(&mut idx);
    }
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

pub fn make_batch(samples: &[&Sample], patch_size: usize) -> Result<Batch> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Dimension("empty batch".into()))?;
    let n = first.token_ids.len();
    let mut token_ids = Vec::with_capacity(samples.len() * n);
    let mut valid = Vec::with_capacity(samples.len() * n);
    for s in samples {
        if s.token_ids.len() != n {
            return Err(Error::Dimension(format!("sample `{}` has {} tokens, batch has {n}", s.id, s.token_ids.len())));
        }
        token_ids.extend_from_slice(&s.token_ids);
        valid.extend_from_slice(&s.mask);
    }
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    Ok(Batch {
        sample_ids: samples.iter().map(|s| s.id.clone()).collect(),
        token_ids,
        mask: AttentionMask::new(samples.len(), n, valid)?,
        patches: image_patches(&images, patch_size)?,
        labels: samples.iter().map(|s| s.label).collect(),
    })
}
