//! Samples, the JSONL dataset format, labeled/unlabeled splitting, token
//! masking, and the synthetic image-narration generator.

mod synth;
mod vocab;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use synth::{synth_generate, SyntheticConfig, SyntheticWorld};
pub use vocab::{Vocab, MASK, MASK_ID, N_RESERVED, PAD, PAD_ID, UNK, UNK_ID};

use crate::align::BBox;
use crate::error::{Error, Result};
use crate::infer::Partition;
use crate::losses::CorefLabels;
use crate::model::{MentionSpan, NarrationTokens, RegionSet};
use crate::numerics::Tensor;

/// Gold annotation of a labeled sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Labels {
    /// Coreference chains over mention indices. Mentions outside every chain are singletons.
    pub chains: Vec<Vec<usize>>,
    /// Ground-truth box per mention, when the mention is grounded.
    pub mention_boxes: Vec<Option<BBox>>,
}

/// One image-narration pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub regions: RegionSet,
    pub narration: NarrationTokens,
    pub labels: Option<Labels>,
    /// Detector class named by each mention's head noun, when known.
    pub head_classes: Option<Vec<Option<usize>>>,
}

impl Sample {
    pub fn n_mentions(&self) -> usize {
        self.narration.mentions.len()
    }

    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }

    pub fn gold_partition(&self) -> Option<Partition> {
        let l = self.labels.as_ref()?;
        Some(Partition::from_chains(self.n_mentions(), &l.chains).expect("validated on load"))
    }

    /// `P(m)` and `A(m)` derived from the gold chains.
    pub fn coref_labels(&self) -> Option<CorefLabels> {
        self.gold_partition().map(|p| CorefLabels::from_partition(&p))
    }

    pub fn unlabeled(mut self) -> Sample {
        self.labels = None;
        self
    }

    /// Checks every cross-field invariant, reporting the offending field.
    pub fn validate(&self) -> Result<()> {
        let schema = |field: &str, msg: String| Error::Schema {
            sample: self.id.clone(),
            field: field.into(),
            msg,
        };
        let n_reg = self.regions.len();
        if n_reg == 0 {
            return Err(schema("regions", "at least one region is required".into()));
        }
        self.regions.validate().map_err(|e| schema("regions", e.to_string()))?;
        if self.narration.token_ids.is_empty() {
            return Err(schema("tokens", "at least one token is required".into()));
        }
        self.narration.validate().map_err(|e| schema("mentions", e.to_string()))?;
        let n = self.n_mentions();
        if let Some(l) = &self.labels {
            let mut seen = vec![false; n];
            for (ci, c) in l.chains.iter().enumerate() {
                if c.is_empty() {
                    return Err(schema("chains", format!("chain {} is empty", ci)));
                }
                for &m in c {
                    if m >= n {
                        return Err(schema("chains", format!("chain {} references mention {} of {}", ci, m, n)));
                    }
                    if seen[m] {
                        return Err(schema("chains", format!("mention {} is in more than one chain", m)));
                    }
                    seen[m] = true;
                }
            }
            if l.mention_boxes.len() != n {
                return Err(schema(
                    "mention_boxes",
                    format!("{} boxes for {} mentions", l.mention_boxes.len(), n),
                ));
            }
            for b in l.mention_boxes.iter().flatten() {
                b.validate().map_err(|e| schema("mention_boxes", e.to_string()))?;
            }
        }
        if let Some(h) = &self.head_classes {
            if h.len() != n {
                return Err(schema("head_classes", format!("{} entries for {} mentions", h.len(), n)));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegionRecord {
    #[serde(rename = "box")]
    bbox: BBox,
    class_id: usize,
    feat: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    id: String,
    regions: Vec<RegionRecord>,
    tokens: Vec<usize>,
    mentions: Vec<MentionSpan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    chains: Option<Vec<Vec<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mention_boxes: Option<Vec<Option<BBox>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    head_classes: Option<Vec<Option<usize>>>,
}

impl SampleRecord {
    fn from_sample(s: &Sample) -> Self {
        let regions = (0..s.regions.len())
            .map(|i| RegionRecord {
                bbox: s.regions.boxes[i],
                class_id: s.regions.class_ids[i],
                feat: s.regions.features.row(i).to_vec(),
            })
            .collect();
        SampleRecord {
            id: s.id.clone(),
            regions,
            tokens: s.narration.token_ids.clone(),
            mentions: s.narration.mentions.clone(),
            chains: s.labels.as_ref().map(|l| l.chains.clone()),
            mention_boxes: s.labels.as_ref().map(|l| l.mention_boxes.clone()),
            head_classes: s.head_classes.clone(),
        }
    }

    fn into_sample(self) -> Result<Sample> {
        let schema = |field: &str, msg: String| Error::Schema {
            sample: self.id.clone(),
            field: field.into(),
            msg,
        };
        let d = self.regions.first().map_or(0, |r| r.feat.len());
        if let Some(i) = self.regions.iter().position(|r| r.feat.len() != d) {
            return Err(schema(
                "regions",
                format!("region {} has {} features, region 0 has {}", i, self.regions[i].feat.len(), d),
            ));
        }
        let features = Tensor::new(
            vec![self.regions.len(), d],
            self.regions.iter().flat_map(|r| r.feat.iter().copied()).collect(),
        )?;
        let labels = match (self.chains, self.mention_boxes) {
            (None, None) => None,
            (chains, boxes) => Some(Labels {
                chains: chains.unwrap_or_default(),
                mention_boxes: boxes.unwrap_or_else(|| vec![None; self.mentions.len()]),
            }),
        };
        let sample = Sample {
            regions: RegionSet {
                features,
                boxes: self.regions.iter().map(|r| r.bbox).collect(),
                class_ids: self.regions.iter().map(|r| r.class_id).collect(),
            },
            narration: NarrationTokens {
                token_ids: self.tokens,
                mentions: self.mentions,
            },
            labels,
            head_classes: self.head_classes,
            id: self.id,
        };
        sample.validate()?;
        Ok(sample)
    }
}

pub fn sample_to_json(s: &Sample) -> Result<String> {
    Ok(serde_json::to_string(&SampleRecord::from_sample(s))?)
}

pub fn sample_from_json(line: &str) -> Result<Sample> {
    let rec: SampleRecord = serde_json::from_str(line)?;
    rec.into_sample()
}

/// Reads one sample per non-blank line.
pub fn load_jsonl(path: &Path) -> Result<Vec<Sample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec.into_sample()?);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, samples: &[Sample]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for s in samples {
        serde_json::to_writer(&mut w, &SampleRecord::from_sample(s))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Labeled part keeps its gold annotation; the rest is stripped. Both keep the
/// original sample order.
pub fn split(dataset: &[Sample], labeled_fraction: f64, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "labeled fraction must lie in (0, 1], got {}",
            labeled_fraction
        )));
    }
    let n = dataset.len();
    let mut k = (labeled_fraction * n as f64).round() as usize;
    if n > 0 {
        k = k.clamp(1, n);
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut labeled = vec![false; n];
    for &i in &idx[..k] {
        labeled[i] = true;
    }
    let mut ds = Vec::with_capacity(k);
    let mut du = Vec::with_capacity(n - k);
    for (i, s) in dataset.iter().enumerate() {
        if labeled[i] {
            ds.push(s.clone());
        } else {
            du.push(s.clone().unlabeled());
        }
    }
    Ok((ds, du))
}

/// Replaces each non-reserved token by `[MASK]` with probability `prob`.
pub fn mask_tokens(tokens: &[usize], prob: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    mask_tokens_with(tokens, prob, &mut rng)
}

pub fn mask_tokens_with<R: Rng>(tokens: &[usize], prob: f64, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let mut out = tokens.to_vec();
    let mut positions = Vec::new();
    for (i, t) in out.iter_mut().enumerate() {
        if Vocab::is_reserved(*t) {
            continue;
        }
        if prob >= 1.0 || (prob > 0.0 && rng.random::<f64>() < prob) {
            *t = MASK_ID;
            positions.push(i);
        }
    }
    (out, positions)
}
