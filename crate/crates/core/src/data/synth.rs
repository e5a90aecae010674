use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Labels, Sample, Vocab};
use crate::align::{iou, BBox};
use crate::error::{Error, Result};
use crate::model::{MentionKind, MentionSpan, NarrationTokens, RegionSet};
use crate::numerics::Tensor;

const FILLERS: [&str; 8] = ["and", "there", "is", "near", "with", "then", "on", "see"];
const DETERMINERS: [&str; 2] = ["the", "a"];
const PRONOUNS: [&str; 4] = ["he", "she", "it", "they"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_samples: usize,
    /// Inclusive range of entities per sample.
    pub n_entities_range: [usize; 2],
    /// Inclusive range of regions per sample, entity regions included.
    pub n_regions_range: [usize; 2],
    pub mentions_per_entity_range: [usize; 2],
    /// Probability that a non-first mention of an entity is a pronoun.
    pub pronoun_rate: f64,
    pub feature_noise_sigma: f64,
    /// Probability of filling each free region slot with a distractor.
    pub distractor_region_rate: f64,
    pub seed: u64,
    /// Seed of the shared world (prototypes, vocabulary). Train and eval sets
    /// drawn with different `seed`s share the world when this matches.
    pub world_seed: u64,
    pub n_classes: usize,
    pub proto_dim: usize,
    pub synonyms_per_class: usize,
    pub n_pronoun_groups: usize,
    /// Relative jitter of each entity's detected box around its gold box.
    pub box_jitter: f64,
    /// Append a noisy one-hot of the detector class to every region feature.
    pub class_onehot: bool,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_samples: 200,
            n_entities_range: [2, 4],
            n_regions_range: [4, 8],
            mentions_per_entity_range: [1, 3],
            pronoun_rate: 0.3,
            feature_noise_sigma: 0.05,
            distractor_region_rate: 0.5,
            seed: 0,
            world_seed: 0,
            n_classes: 8,
            proto_dim: 4,
            synonyms_per_class: 2,
            n_pronoun_groups: 4,
            box_jitter: 0.05,
            class_onehot: true,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, [lo, hi]) in [
            ("n_entities_range", self.n_entities_range),
            ("n_regions_range", self.n_regions_range),
            ("mentions_per_entity_range", self.mentions_per_entity_range),
        ] {
            if lo > hi || lo == 0 {
                return bad(format!("{} [{}, {}] must be a nonempty range of positive counts", name, lo, hi));
            }
        }
        for (name, r) in [
            ("pronoun_rate", self.pronoun_rate),
            ("distractor_region_rate", self.distractor_region_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{} must lie in [0, 1], got {}", name, r));
            }
        }
        if !(self.feature_noise_sigma >= 0.0 && self.feature_noise_sigma.is_finite()) {
            return bad("feature_noise_sigma must be a finite non-negative number".into());
        }
        if !(0.0..0.5).contains(&self.box_jitter) {
            return bad("box_jitter must lie in [0, 0.5)".into());
        }
        if self.n_entities_range[1] > self.n_classes {
            return bad(format!(
                "up to {} entities need at least that many classes, got {}",
                self.n_entities_range[1], self.n_classes
            ));
        }
        if self.proto_dim == 0 || self.synonyms_per_class == 0 || self.n_pronoun_groups == 0 {
            return bad("proto_dim, synonyms_per_class and n_pronoun_groups must be at least 1".into());
        }
        Ok(())
    }

    /// Width of every region feature row.
    pub fn d_region(&self) -> usize {
        self.proto_dim + 4 + if self.class_onehot { self.n_classes } else { 0 }
    }
}

/// The part of the synthetic universe shared by every sample: class prototypes
/// and the vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorld {
    pub prototypes: Vec<Vec<f64>>,
    pub vocab: Vocab,
    /// Synonymous head nouns per class.
    pub nouns: Vec<Vec<usize>>,
    /// Pronoun token per pronoun group.
    pub pronouns: Vec<usize>,
    pub determiners: Vec<usize>,
    pub fillers: Vec<usize>,
}

impl SyntheticWorld {
    pub fn new(cfg: &SyntheticConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.world_seed);
        let prototypes = (0..cfg.n_classes)
            .map(|_| {
                (0..cfg.proto_dim)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect()
            })
            .collect();
        let mut words: Vec<String> = FILLERS.iter().chain(&DETERMINERS).map(|s| s.to_string()).collect();
        for c in 0..cfg.n_classes {
            for s in 0..cfg.synonyms_per_class {
                words.push(format!("obj{}_{}", c, s));
            }
        }
        for g in 0..cfg.n_pronoun_groups {
            words.push(PRONOUNS.get(g).map_or_else(|| format!("pron{}", g), |p| p.to_string()));
        }
        let vocab = Vocab::new(words)?;
        let nouns = (0..cfg.n_classes)
            .map(|c| {
                (0..cfg.synonyms_per_class)
                    .map(|s| vocab.id(&format!("obj{}_{}", c, s)))
                    .collect()
            })
            .collect();
        let pronouns = (0..cfg.n_pronoun_groups)
            .map(|g| vocab.id(PRONOUNS.get(g).copied().unwrap_or(&format!("pron{}", g))))
            .collect();
        Ok(SyntheticWorld {
            prototypes,
            determiners: DETERMINERS.iter().map(|w| vocab.id(w)).collect(),
            fillers: FILLERS.iter().map(|w| vocab.id(w)).collect(),
            nouns,
            pronouns,
            vocab,
        })
    }

    pub fn pronoun_group(&self, class: usize) -> usize {
        class % self.pronouns.len()
    }
}

fn random_box<R: Rng>(rng: &mut R) -> BBox {
    let w = rng.random_range(0.15..0.35);
    let h = rng.random_range(0.15..0.35);
    BBox::new(rng.random_range(0.0..1.0 - w), rng.random_range(0.0..1.0 - h), w, h)
}

fn separated_box<R: Rng>(rng: &mut R, taken: &[BBox]) -> BBox {
    let mut b = random_box(rng);
    for _ in 0..100 {
        if taken.iter().all(|t| iou(t, &b).unwrap_or(0.0) <= 0.2) {
            break;
        }
        b = random_box(rng);
    }
    b
}

fn jitter<R: Rng>(rng: &mut R, b: &BBox, j: f64) -> BBox {
    if j == 0.0 {
        return *b;
    }
    let w = (b.w * (1.0 + rng.random_range(-j..j))).min(1.0);
    let h = (b.h * (1.0 + rng.random_range(-j..j))).min(1.0);
    let x = (b.x + b.w * rng.random_range(-j..j)).clamp(0.0, 1.0 - w);
    let y = (b.y + b.h * rng.random_range(-j..j)).clamp(0.0, 1.0 - h);
    BBox::new(x, y, w, h)
}

fn features<R: Rng>(rng: &mut R, cfg: &SyntheticConfig, world: &SyntheticWorld, class: usize, b: &BBox) -> Vec<f64> {
    let sigma = cfg.feature_noise_sigma;
    let mut noise = |v: f64| {
        if sigma > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            v + sigma * z
        } else {
            v
        }
    };
    let mut f: Vec<f64> = world.prototypes[class].iter().map(|&p| noise(p)).collect();
    f.extend([b.x, b.y, b.w, b.h]);
    if cfg.class_onehot {
        f.extend((0..cfg.n_classes).map(|c| noise(if c == class { 1.0 } else { 0.0 })));
    }
    f
}

fn sample_one(cfg: &SyntheticConfig, world: &SyntheticWorld, index: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);

    let k = rng.random_range(cfg.n_entities_range[0]..=cfg.n_entities_range[1]);
    let mut classes: Vec<usize> = (0..cfg.n_classes).collect();
    classes.shuffle(&mut rng);
    let chosen: Vec<usize> = classes[..k].to_vec();
    // Only entities with an unambiguous pronoun get pronoun mentions.
    let pronoun_ok: Vec<bool> = chosen
        .iter()
        .map(|&c| chosen.iter().filter(|&&o| world.pronoun_group(o) == world.pronoun_group(c)).count() == 1)
        .collect();

    let mut gold_boxes: Vec<BBox> = Vec::with_capacity(k);
    for _ in 0..k {
        let b = separated_box(&mut rng, &gold_boxes);
        gold_boxes.push(b);
    }

    // Regions: one detection per entity plus distractors of absent classes.
    let mut regions: Vec<(BBox, usize)> = gold_boxes
        .iter()
        .zip(&chosen)
        .map(|(b, &c)| (jitter(&mut rng, b, cfg.box_jitter), c))
        .collect();
    let max_r = cfg.n_regions_range[1].max(k);
    let min_r = cfg.n_regions_range[0].max(k);
    let absent: Vec<usize> = (0..cfg.n_classes).filter(|c| !chosen.contains(c)).collect();
    let mut n_regions = k;
    for _ in k..max_r {
        if rng.random::<f64>() < cfg.distractor_region_rate {
            n_regions += 1;
        }
    }
    let n_regions = n_regions.max(min_r);
    while regions.len() < n_regions {
        let c = *absent.choose(&mut rng).unwrap_or(&chosen[0]);
        let taken: Vec<BBox> = regions.iter().map(|r| r.0).collect();
        regions.push((separated_box(&mut rng, &taken), c));
    }
    regions.shuffle(&mut rng);
    let feats: Vec<Vec<f64>> = regions
        .iter()
        .map(|(b, c)| features(&mut rng, cfg, world, *c, b))
        .collect();

    // Narration: sentences that each introduce or revisit one entity.
    let counts: Vec<usize> = (0..k)
        .map(|_| rng.random_range(cfg.mentions_per_entity_range[0]..=cfg.mentions_per_entity_range[1]))
        .collect();
    let mut pending: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(e, &n)| std::iter::repeat_n(e, n))
        .collect();
    pending.shuffle(&mut rng);
    let mut emitted = vec![0usize; k];
    let mut tokens: Vec<usize> = Vec::new();
    let mut mentions: Vec<MentionSpan> = Vec::new();
    let mut entity_of: Vec<usize> = Vec::new();
    let mut head_classes: Vec<Option<usize>> = Vec::new();
    for e in pending {
        let c = chosen[e];
        for _ in 0..rng.random_range(1..=2) {
            tokens.push(*world.fillers.choose(&mut rng).expect("fillers"));
        }
        let start = tokens.len();
        let pronoun = emitted[e] > 0 && pronoun_ok[e] && rng.random::<f64>() < cfg.pronoun_rate;
        if pronoun {
            tokens.push(world.pronouns[world.pronoun_group(c)]);
            mentions.push(MentionSpan::new(start, start + 1, MentionKind::Pronoun));
            head_classes.push(None);
        } else {
            tokens.push(*world.determiners.choose(&mut rng).expect("determiners"));
            tokens.push(*world.nouns[c].choose(&mut rng).expect("synonyms"));
            mentions.push(MentionSpan::new(start, start + 2, MentionKind::NounPhrase));
            head_classes.push(Some(c));
        }
        entity_of.push(e);
        emitted[e] += 1;
    }
    tokens.push(*world.fillers.choose(&mut rng).expect("fillers"));

    let chains: Vec<Vec<usize>> = (0..k)
        .map(|e| (0..entity_of.len()).filter(|&m| entity_of[m] == e).collect::<Vec<_>>())
        .filter(|c| c.len() > 1)
        .collect();
    let mention_boxes = entity_of.iter().map(|&e| Some(gold_boxes[e])).collect();
    let d = cfg.d_region();
    Sample {
        id: format!("syn{}_{:05}", cfg.seed, index),
        regions: RegionSet {
            features: Tensor::new(vec![regions.len(), d], feats.concat()).expect("feature width"),
            boxes: regions.iter().map(|r| r.0).collect(),
            class_ids: regions.iter().map(|r| r.1).collect(),
        },
        narration: NarrationTokens {
            token_ids: tokens,
            mentions,
        },
        labels: Some(Labels { chains, mention_boxes }),
        head_classes: Some(head_classes),
    }
}

/// Draws `n_samples` labeled samples. Sample `i` depends only on `(seed, i)`
/// and the world.
pub fn synth_generate(cfg: &SyntheticConfig) -> Result<(SyntheticWorld, Vec<Sample>)> {
    let world = SyntheticWorld::new(cfg)?;
    let samples = (0..cfg.n_samples).map(|i| sample_one(cfg, &world, i)).collect();
    Ok((world, samples))
}
