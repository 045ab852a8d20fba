//! Stratified train/val/test partition.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{streams, Rng};

/// Train, validation, and test proportions, in tenths.
pub const SPLIT_TENTHS: [usize; 3] = [8, 1, 1];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub num_classes: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub class_counts: ClassCounts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("split must be train, val or test, got `{s}`"))),
        }
    }
}

impl SplitManifest {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn total(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }
}

/// Largest-remainder apportionment of `n` over [`SPLIT_TENTHS`]; a tie in
/// remainders goes to the earlier split (train first).
pub fn split_sizes(n: usize) -> [usize; 3] {
    let mut sizes = SPLIT_TENTHS.map(|t| n * t / 10);
    let rems = SPLIT_TENTHS.map(|t| n * t % 10);
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| rems[b].cmp(&rems[a]).then(a.cmp(&b)));
    let leftover = n - sizes.iter().sum::<usize>();
    for &i in order.iter().take(leftover) {
        sizes[i] += 1;
    }
    sizes
}

/// Per class: sort ids, shuffle with the split stream of `seed`, and cut by
/// [`split_sizes`]. Each split lists its ids sorted.
pub fn stratified_split(items: &[(String, usize)], num_classes: usize, seed: u64) -> Result<SplitManifest> {
    let mut by_class: Vec<Vec<&str>> = vec![Vec::new(); num_classes];
    for (id, label) in items {
        let bucket = by_class
            .get_mut(*label)
            .ok_or_else(|| Error::Data(format!("sample `{id}`: label {label} outside [0, {num_classes})")))?;
        bucket.push(id);
    }
    let mut out: [Vec<String>; 3] = Default::default();
    let mut counts: [Vec<usize>; 3] = Default::default();
    for (class, ids) in by_class.iter_mut().enumerate() {
        if ids.is_empty() {
            return Err(Error::Data(format!("class {class} has no samples")));
        }
        if ids.len() < 10 {
            log::warn!("class {class} has only {} samples; splits will be uneven", ids.len());
        }
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Data(format!("duplicate sample id `{}`", w[0])));
        }
        Rng::substream(seed, streams::SPLIT, class as u64).shuffle(ids);
        let sizes = split_sizes(ids.len());
        let mut start = 0;
        for (s, &size) in sizes.iter().enumerate() {
            out[s].extend(ids[start..start + size].iter().map(|s| s.to_string()));
            counts[s].push(size);
            start += size;
        }
    }
    for ids in &mut out {
        ids.sort_unstable();
    }
    if let Some(w) = {
        let mut all: Vec<&String> = out.iter().flatten().collect();
        all.sort_unstable();
        all.windows(2).find(|w| w[0] == w[1]).map(|w| w[0].clone())
    } {
        return Err(Error::Data(format!("duplicate sample id `{w}`")));
    }
    let [train, val, test] = out;
    let [ct, cv, cs] = counts;
    Ok(SplitManifest {
        seed,
        num_classes,
        train,
        val,
        test,
        class_counts: ClassCounts {
            train: ct,
            val: cv,
            test: cs,
        },
    })
}
