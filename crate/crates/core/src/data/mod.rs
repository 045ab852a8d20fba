//! Text normalization, MVSA curation, splitting, dataset IO, and synthetic
//! data generation.

mod dataset;
mod mvsa;
mod normalize;
mod split;
mod synthetic;

pub use dataset::{
    batch_order, decode_in_order, make_batch, worker_count, write_dataset_index, DatasetIndex, Record, Sample,
    DATA_FILE, IMAGE_DIR, MANIFEST_FILE, THREADS_ENV,
};
pub use mvsa::{
    parse_mvsa_tsv, parse_sentiment, read_mvsa_tsv, reconcile_mvsa, RawPair, Reconciled, NEGATIVE, NEUTRAL, POSITIVE,
    SENTIMENT_NAMES,
};
pub use normalize::{is_emoji, normalize_text, normalize_with, parse_lexicon, SENTIMENT_HASHTAGS};
pub use split::{split_sizes, stratified_split, ClassCounts, Split, SplitManifest, SPLIT_TENTHS};
pub use synthetic::{gen_synthetic, sample_id, synth_sample, template, SynthMode, SynthSpec, NUM_TEMPLATES};

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{read_pnm, write_pnm};

#[derive(Debug, Clone)]
pub struct PreprocessReport {
    pub kept: usize,
    pub discarded: usize,
    pub manifest: SplitManifest,
}

impl PreprocessReport {
    /// Per-class counts per split, one row per class.
    pub fn table(&self) -> String {
        let c = &self.manifest.class_counts;
        let mut s = format!("{:<10}{:>8}{:>8}{:>8}{:>8}\n", "label", "train", "val", "test", "total");
        for k in 0..self.manifest.num_classes {
            let name = SENTIMENT_NAMES.get(k).copied().unwrap_or("?");
            let total = c.train[k] + c.val[k] + c.test[k];
            let _ = writeln!(s, "{name:<10}{:>8}{:>8}{:>8}{total:>8}", c.train[k], c.val[k], c.test[k]);
        }
        let sum = |v: &[usize]| v.iter().sum::<usize>();
        let _ = writeln!(
            s,
            "{:<10}{:>8}{:>8}{:>8}{:>8}",
            "total",
            sum(&c.train),
            sum(&c.val),
            sum(&c.test),
            self.manifest.total()
        );
        s
    }
}

/// Curates a raw MVSA TSV into a dataset directory: normalizes text,
/// reconciles the two labels, copies images, and splits 8:1:1 per class.
/// Image paths are resolved relative to the TSV's directory.
pub fn preprocess_mvsa(raw: &Path, out: &Path, seed: u64) -> Result<PreprocessReport> {
    let rows = read_mvsa_tsv(raw)?;
    let base = raw.parent().unwrap_or(Path::new("."));
    let img_dir = out.join(IMAGE_DIR);
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut records = Vec::new();
    let mut discarded = 0;
    for row in &rows {
        let label = match reconcile_mvsa(row.text_label, row.image_label)? {
            Reconciled::Keep(l) => l,
            Reconciled::Discard => {
                discarded += 1;
                continue;
            }
        };
        let image = read_pnm(&base.join(&row.image_path))?;
        let ext = if image.channels() == 3 { "ppm" } else { "pgm" };
        let rel = format!("{IMAGE_DIR}/{}.{ext}", row.id);
        write_pnm(&out.join(&rel), &image)?;
        records.push(Record {
            id: row.id.clone(),
            text: normalize_text(&row.text),
            image: rel,
            label,
        });
    }
    let items: Vec<(String, usize)> = records.iter().map(|r| (r.id.clone(), r.label)).collect();
    let manifest = stratified_split(&items, SENTIMENT_NAMES.len(), seed)?;
    write_dataset_index(out, &manifest, &records)?;
    Ok(PreprocessReport {
        kept: records.len(),
        discarded,
        manifest,
    })
}
