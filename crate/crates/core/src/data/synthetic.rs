//! Synthetic text-image corpora with known structure.

use std::path::Path;

use super::dataset::{write_dataset_index, Record, IMAGE_DIR};
use super::split::{stratified_split, SplitManifest};
use crate::error::{Error, Result};
use crate::image::{write_pnm, Image};
use crate::rng::{streams, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthMode {
    /// Both modalities carry the label.
    Correlated,
    /// Text carries bit `a`, the image bit `b`, the label is `a xor b`.
    Xor,
}

impl std::str::FromStr for SynthMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "correlated" => Ok(SynthMode::Correlated),
            "xor" => Ok(SynthMode::Xor),
            _ => Err(Error::Config(format!("mode must be `correlated` or `xor`, got `{s}`"))),
        }
    }
}

pub const NUM_TEMPLATES: usize = 7;
pub const WORDS_PER_CLASS: usize = 6;
pub const FILLER_WORDS: usize = 12;
/// Chance that a clean token is a class word rather than filler.
pub const SIGNAL_RATE: f64 = 0.6;
pub const PIXEL_ON: f64 = 0.8;
pub const PIXEL_OFF: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub mode: SynthMode,
    pub n: usize,
    pub classes: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Standard deviation of additive pixel noise.
    pub pixel_noise: f64,
    /// Probability that each token is swapped for a random generator word.
    pub token_noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            mode: SynthMode::Correlated,
            n: 2000,
            classes: 3,
            seed: 42,
            height: 16,
            width: 16,
            channels: 1,
            min_words: 6,
            max_words: 12,
            pixel_noise: 0.1,
            token_noise: 0.1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        match self.mode {
            SynthMode::Correlated if !(2..=NUM_TEMPLATES).contains(&self.classes) => {
                return fail(format!("correlated mode supports 2 to {NUM_TEMPLATES} classes, got {}", self.classes))
            }
            SynthMode::Xor if self.classes != 2 => return fail(format!("xor mode has 2 classes, got {}", self.classes)),
            _ => {}
        }
        if self.n == 0 {
            return fail("n must be positive".into());
        }
        if self.height < 4 || self.width < 4 {
            return fail(format!("images must be at least 4x4, got {}x{}", self.height, self.width));
        }
        if self.channels != 1 && self.channels != 3 {
            return fail(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return fail(format!("word range {}..={} is empty", self.min_words, self.max_words));
        }
        if !(self.pixel_noise.is_finite() && self.pixel_noise >= 0.0) {
            return fail(format!("pixel noise must be non-negative, got {}", self.pixel_noise));
        }
        if !(0.0..=1.0).contains(&self.token_noise) {
            return fail(format!("token noise must lie in [0, 1], got {}", self.token_noise));
        }
        Ok(())
    }

    fn word_sets(&self) -> usize {
        match self.mode {
            SynthMode::Correlated => self.classes,
            SynthMode::Xor => 2,
        }
    }

    /// Every word the generator can emit.
    pub fn all_words(&self) -> Vec<String> {
        (0..self.word_sets())
            .flat_map(|c| (0..WORDS_PER_CLASS).map(move |j| self.class_word(c, j)))
            .chain((0..FILLER_WORDS).map(|j| format!("f{j}")))
            .collect()
    }

    pub fn class_word(&self, set: usize, j: usize) -> String {
        match self.mode {
            SynthMode::Correlated => format!("c{set}w{j}"),
            SynthMode::Xor => format!("a{set}w{j}"),
        }
    }

    /// `(text signal, image pattern, label)` for sample `i`.
    pub fn assignment(&self, i: usize) -> (usize, usize, usize) {
        match self.mode {
            SynthMode::Correlated => {
                let k = i % self.classes;
                (k, k, k)
            }
            SynthMode::Xor => {
                let (a, b) = (i % 2, (i / 2) % 2);
                (a, b, a ^ b)
            }
        }
    }
}

/// Noise-free pattern `t` on an `h x w` grid: horizontal stripes, vertical
/// stripes, checkerboard, diagonal stripes, centred square, border, cross.
pub fn template(t: usize, h: usize, w: usize) -> Vec<f64> {
    let band = (h.min(w) / 8).max(1);
    let mut px = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let on = match t {
                0 => (y / band).is_multiple_of(2),
                1 => (x / band).is_multiple_of(2),
                2 => (y / (2 * band) + x / (2 * band)).is_multiple_of(2),
                3 => ((x + y) / (2 * band)).is_multiple_of(2),
                4 => (h / 4..h - h / 4).contains(&y) && (w / 4..w - w / 4).contains(&x),
                5 => y < 2 * band || y >= h - 2 * band || x < 2 * band || x >= w - 2 * band,
                6 => (h / 2 - band..h / 2 + band).contains(&y) || (w / 2 - band..w / 2 + band).contains(&x),
                _ => panic!("no template {t}"),
            };
            px.push(if on { PIXEL_ON } else { PIXEL_OFF });
        }
    }
    px
}

/// Sample `i` of the corpus, drawn from its own stream of `spec.seed`.
pub fn synth_sample(spec: &SynthSpec, i: usize) -> Result<(String, Image, usize)> {
    let mut rng = Rng::substream(spec.seed, streams::SYNTH, i as u64);
    let (signal, pattern, label) = spec.assignment(i);
    let vocab = spec.all_words();
    let len = spec.min_words + rng.below(spec.max_words - spec.min_words + 1);
    let words: Vec<String> = (0..len)
        .map(|_| {
            let clean = if rng.bernoulli(SIGNAL_RATE) {
                spec.class_word(signal, rng.below(WORDS_PER_CLASS))
            } else {
                format!("f{}", rng.below(FILLER_WORDS))
            };
            if rng.bernoulli(spec.token_noise) {
                vocab[rng.below(vocab.len())].clone()
            } else {
                clean
            }
        })
        .collect();
    let base = template(pattern, spec.height, spec.width);
    let mut bytes = Vec::with_capacity(base.len() * spec.channels);
    for &p in &base {
        for _ in 0..spec.channels {
            let v = if spec.pixel_noise > 0.0 { p + rng.normal(0.0, spec.pixel_noise) } else { p };
            bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let image = Image::from_u8(spec.height, spec.width, spec.channels, &bytes)?;
    Ok((words.join(" "), image, label))
}

pub fn sample_id(i: usize) -> String {
    format!("syn{i:06}")
}

/// Writes a complete dataset directory and returns its manifest.
pub fn gen_synthetic(spec: &SynthSpec, out: &Path) -> Result<SplitManifest> {
    spec.validate()?;
    let img_dir = out.join(IMAGE_DIR);
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let ext = if spec.channels == 3 { "ppm" } else { "pgm" };
    let mut records = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let (text, image, label) = synth_sample(spec, i)?;
        let id = sample_id(i);
        let rel = format!("{IMAGE_DIR}/{id}.{ext}");
        write_pnm(&out.join(&rel), &image)?;
        records.push(Record {
            id,
            text,
            image: rel,
            label,
        });
    }
    let items: Vec<(String, usize)> = records.iter().map(|r| (r.id.clone(), r.label)).collect();
    let manifest = stratified_split(&items, spec.classes, spec.seed)?;
    write_dataset_index(out, &manifest, &records)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nearest_template(img: &Image, classes: usize) -> usize {
        (0..classes)
            .map(|t| {
                let tpl = template(t, img.height(), img.width());
                let d: f64 = img.pixels().iter().zip(&tpl).map(|(a, b)| (a - b).powi(2)).sum();
                (t, d)
            })
            .fold((0, f64::INFINITY), |best, (t, d)| if d < best.1 { (t, d) } else { best })
            .0
    }

    #[test]
    fn templates_are_pairwise_distinct() {
        for (h, w) in [(16, 16), (8, 12), (4, 4)] {
            let all: Vec<_> = (0..NUM_TEMPLATES).map(|t| template(t, h, w)).collect();
            for a in 0..NUM_TEMPLATES {
                for b in a + 1..NUM_TEMPLATES {
                    assert_ne!(all[a], all[b], "{h}x{w}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn noiseless_images_are_template_separable() {
        for classes in [3, 7] {
            let spec = SynthSpec {
                classes,
                n: 70,
                pixel_noise: 0.0,
                token_noise: 0.0,
                ..SynthSpec::default()
            };
            for i in 0..spec.n {
                let (_, img, label) = synth_sample(&spec, i).unwrap();
                assert_eq!(nearest_template(&img, classes), label);
            }
        }
    }

    #[test]
    fn noiseless_text_uses_own_class_words_and_filler() {
        let spec = SynthSpec {
            n: 30,
            token_noise: 0.0,
            ..SynthSpec::default()
        };
        for i in 0..spec.n {
            let (text, _, label) = synth_sample(&spec, i).unwrap();
            let words: Vec<&str> = text.split(' ').collect();
            assert!((6..=12).contains(&words.len()));
            assert!(words.iter().all(|w| w.starts_with('f') || w.starts_with(&format!("c{label}w"))));
        }
    }

    #[test]
    fn xor_bits_are_individually_uninformative() {
        let spec = SynthSpec {
            mode: SynthMode::Xor,
            classes: 2,
            ..SynthSpec::default()
        };
        let (mut text_hits, mut image_hits, mut decodable) = (0, 0, 0);
        for i in 0..spec.n {
            let (text, img, label) = synth_sample(&spec, i).unwrap();
            let ones = text.split(' ').filter(|w| w.starts_with("a1")).count();
            let zeros = text.split(' ').filter(|w| w.starts_with("a0")).count();
            let a = usize::from(ones > zeros);
            let b = nearest_template(&img, 2);
            text_hits += usize::from(a == label);
            image_hits += usize::from(b == label);
            decodable += usize::from(a ^ b == label);
        }
        assert!(decodable as f64 / spec.n as f64 > 0.98, "{decodable}");
        for hits in [text_hits, image_hits] {
            let rate = hits as f64 / spec.n as f64;
            assert!((rate - 0.5).abs() <= 0.03, "{rate}");
        }
    }

    #[test]
    fn invalid_specs_are_config_errors() {
        for spec in [
            SynthSpec { classes: 8, ..SynthSpec::default() },
            SynthSpec { mode: SynthMode::Xor, classes: 3, ..SynthSpec::default() },
            SynthSpec { height: 2, ..SynthSpec::default() },
            SynthSpec { min_words: 5, max_words: 4, ..SynthSpec::default() },
            SynthSpec { token_noise: 1.5, ..SynthSpec::default() },
        ] {
            assert!(matches!(spec.validate(), Err(Error::Config(_))), "{spec:?}");
        }
    }
}
