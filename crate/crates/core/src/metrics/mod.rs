//! Coreference metrics (MUC, B³, CEAF-φ4, CoNLL F1) and grounding accuracy.
//!
//! Every metric is computed per document as numerator/denominator counts, so
//! a corpus score is the micro-average obtained by summing counts.

mod hungarian;

use serde::{Deserialize, Serialize};

pub use hungarian::{max_similarity_matching, min_cost_assignment};

use crate::align::{iou, BBox};
use crate::error::{Error, Result};
use crate::infer::Partition;
use crate::model::MentionKind;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreTriple {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

impl ScoreTriple {
    pub fn new(recall: f64, precision: f64) -> Self {
        let f1 = if recall + precision > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        ScoreTriple { recall, precision, f1 }
    }
}

/// Recall and precision as summable ratios.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub recall_num: f64,
    pub recall_den: f64,
    pub precision_num: f64,
    pub precision_den: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

impl Counts {
    pub fn add(&mut self, o: &Counts) {
        self.recall_num += o.recall_num;
        self.recall_den += o.recall_den;
        self.precision_num += o.precision_num;
        self.precision_den += o.precision_den;
    }

    pub fn score(&self) -> ScoreTriple {
        ScoreTriple::new(
            ratio(self.recall_num, self.recall_den),
            ratio(self.precision_num, self.precision_den),
        )
    }
}

fn same_universe(gold: &Partition, pred: &Partition) -> Result<()> {
    if gold.n_mentions() != pred.n_mentions() {
        return Err(Error::Contract(format!(
            "gold has {} mentions but prediction has {}",
            gold.n_mentions(),
            pred.n_mentions()
        )));
    }
    Ok(())
}

fn muc_side(key: &Partition, response_labels: &[usize]) -> (f64, f64) {
    let mut num = 0.0;
    let mut den = 0.0;
    for k in key.clusters() {
        let mut parts: Vec<usize> = k.iter().map(|&m| response_labels[m]).collect();
        parts.sort_unstable();
        parts.dedup();
        num += (k.len() - parts.len()) as f64;
        den += (k.len() - 1) as f64;
    }
    (num, den)
}

pub fn muc_counts(gold: &Partition, pred: &Partition) -> Result<Counts> {
    same_universe(gold, pred)?;
    let (rn, rd) = muc_side(gold, &pred.labels());
    let (pn, pd) = muc_side(pred, &gold.labels());
    Ok(Counts {
        recall_num: rn,
        recall_den: rd,
        precision_num: pn,
        precision_den: pd,
    })
}

pub fn b_cubed_counts(gold: &Partition, pred: &Partition) -> Result<Counts> {
    same_universe(gold, pred)?;
    let gl = gold.labels();
    let pl = pred.labels();
    let gsize: Vec<usize> = gold.clusters().iter().map(Vec::len).collect();
    let psize: Vec<usize> = pred.clusters().iter().map(Vec::len).collect();
    // overlap[(g, p)] = |G ∩ P|
    let mut overlap = std::collections::HashMap::new();
    for m in 0..gl.len() {
        *overlap.entry((gl[m], pl[m])).or_insert(0usize) += 1;
    }
    let mut r = 0.0;
    let mut p = 0.0;
    for m in 0..gl.len() {
        let o = overlap[&(gl[m], pl[m])] as f64;
        r += o / gsize[gl[m]] as f64;
        p += o / psize[pl[m]] as f64;
    }
    let n = gl.len() as f64;
    Ok(Counts {
        recall_num: r,
        recall_den: n,
        precision_num: p,
        precision_den: n,
    })
}

/// `φ4(K, R) = 2|K ∩ R| / (|K| + |R|)`.
pub fn phi4(k: &[usize], r: &[usize]) -> f64 {
    let inter = k.iter().filter(|m| r.contains(m)).count();
    2.0 * inter as f64 / (k.len() + r.len()) as f64
}

pub fn ceaf_phi4_counts(gold: &Partition, pred: &Partition) -> Result<Counts> {
    same_universe(gold, pred)?;
    let sim: Vec<Vec<f64>> = gold
        .clusters()
        .iter()
        .map(|k| pred.clusters().iter().map(|r| phi4(k, r)).collect())
        .collect();
    let (best, _) = max_similarity_matching(&sim);
    Ok(Counts {
        recall_num: best,
        recall_den: gold.len() as f64,
        precision_num: best,
        precision_den: pred.len() as f64,
    })
}

pub fn muc(gold: &Partition, pred: &Partition) -> Result<ScoreTriple> {
    Ok(muc_counts(gold, pred)?.score())
}

pub fn b_cubed(gold: &Partition, pred: &Partition) -> Result<ScoreTriple> {
    Ok(b_cubed_counts(gold, pred)?.score())
}

pub fn ceaf_phi4(gold: &Partition, pred: &Partition) -> Result<ScoreTriple> {
    Ok(ceaf_phi4_counts(gold, pred)?.score())
}

/// Mean of the MUC, B³ and CEAF-φ4 F1 scores.
pub fn conll_f1(muc_f1: f64, b3_f1: f64, ceaf_f1: f64) -> f64 {
    (muc_f1 + b3_f1 + ceaf_f1) / 3.0
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundingCounts {
    pub np_correct: usize,
    pub np_total: usize,
    pub pron_correct: usize,
    pub pron_total: usize,
}

impl GroundingCounts {
    pub fn add(&mut self, o: &GroundingCounts) {
        self.np_correct += o.np_correct;
        self.np_total += o.np_total;
        self.pron_correct += o.pron_correct;
        self.pron_total += o.pron_total;
    }

    pub fn scores(&self) -> GroundingScores {
        GroundingScores {
            np_acc: ratio(self.np_correct as f64, self.np_total as f64),
            pron_acc: ratio(self.pron_correct as f64, self.pron_total as f64),
            overall_acc: ratio(
                (self.np_correct + self.pron_correct) as f64,
                (self.np_total + self.pron_total) as f64,
            ),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundingScores {
    pub np_acc: f64,
    pub pron_acc: f64,
    pub overall_acc: f64,
}

/// A prediction is correct when its box overlaps the gold box with IoU > 0.5.
/// Mentions without a gold box are not counted.
pub fn grounding_counts(pred_boxes: &[BBox], gold_boxes: &[Option<BBox>], kinds: &[MentionKind]) -> Result<GroundingCounts> {
    if pred_boxes.len() != gold_boxes.len() || kinds.len() != gold_boxes.len() {
        return Err(Error::Contract(format!(
            "grounding: {} predictions, {} gold boxes, {} mention kinds",
            pred_boxes.len(),
            gold_boxes.len(),
            kinds.len()
        )));
    }
    let mut c = GroundingCounts::default();
    for ((p, g), k) in pred_boxes.iter().zip(gold_boxes).zip(kinds) {
        let Some(g) = g else { continue };
        let hit = (iou(p, g)? > 0.5) as usize;
        match k {
            MentionKind::NounPhrase => {
                c.np_total += 1;
                c.np_correct += hit;
            }
            MentionKind::Pronoun => {
                c.pron_total += 1;
                c.pron_correct += hit;
            }
        }
    }
    Ok(c)
}

pub fn grounding_accuracy(pred_boxes: &[BBox], gold_boxes: &[Option<BBox>], kinds: &[MentionKind]) -> Result<GroundingScores> {
    Ok(grounding_counts(pred_boxes, gold_boxes, kinds)?.scores())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub muc: ScoreTriple,
    pub b3: ScoreTriple,
    pub ceaf: ScoreTriple,
    pub conll_f1: f64,
    pub grounding: GroundingScores,
    pub grounding_counts: GroundingCounts,
    pub n_documents: usize,
    pub n_mentions: usize,
}

/// Accumulates per-document counts in insertion order.
#[derive(Clone, Debug, Default)]
pub struct Evaluator {
    muc: Counts,
    b3: Counts,
    ceaf: Counts,
    grounding: GroundingCounts,
    docs: usize,
    mentions: usize,
}

impl Evaluator {
    pub fn new() -> Self {
        Evaluator::default()
    }

    pub fn add_coref(&mut self, gold: &Partition, pred: &Partition) -> Result<()> {
        let m = muc_counts(gold, pred)?;
        let b = b_cubed_counts(gold, pred)?;
        let c = ceaf_phi4_counts(gold, pred)?;
        self.muc.add(&m);
        self.b3.add(&b);
        self.ceaf.add(&c);
        self.docs += 1;
        self.mentions += gold.n_mentions();
        Ok(())
    }

    pub fn add_grounding(&mut self, counts: &GroundingCounts) {
        self.grounding.add(counts);
    }

    pub fn report(&self) -> EvalReport {
        let muc = self.muc.score();
        let b3 = self.b3.score();
        let ceaf = self.ceaf.score();
        EvalReport {
            conll_f1: conll_f1(muc.f1, b3.f1, ceaf.f1),
            muc,
            b3,
            ceaf,
            grounding: self.grounding.scores(),
            grounding_counts: self.grounding,
            n_documents: self.docs,
            n_mentions: self.mentions,
        }
    }
}

#[cfg(test)]
mod tests;
