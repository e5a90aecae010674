//! Mention-region label construction and pseudo-label generation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Axis-aligned box `(x, y, w, h)` with `(x, y)` the top-left corner.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox {
            x: v[0],
            y: v[1],
            w: v[2],
            h: v[3],
        }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::Data(format!("degenerate box {:?}", self)));
        }
        Ok(())
    }

    /// Valid and inside the unit square.
    pub fn validate_normalized(&self) -> Result<()> {
        self.validate()?;
        const SLACK: f64 = 1e-9;
        if self.x < -SLACK
            || self.y < -SLACK
            || self.x + self.w > 1.0 + SLACK
            || self.y + self.h > 1.0 + SLACK
        {
            return Err(Error::Data(format!("box {:?} leaves the unit square", self)));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn scaled(&self, s: f64) -> BBox {
        BBox::new(self.x * s, self.y * s, self.w * s, self.h * s)
    }

    /// Intersection with the unit square, or `None` when nothing positive remains.
    pub fn clip_to_unit(&self) -> Option<BBox> {
        let x0 = self.x.clamp(0.0, 1.0);
        let y0 = self.y.clamp(0.0, 1.0);
        let x1 = (self.x + self.w).clamp(0.0, 1.0);
        let y1 = (self.y + self.h).clamp(0.0, 1.0);
        let b = BBox::new(x0, y0, x1 - x0, y1 - y0);
        (b.w > 0.0 && b.h > 0.0 && b.w.is_finite() && b.h.is_finite()).then_some(b)
    }
}

pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    let ix = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let iy = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundingKind {
    /// Cross-attention scores `g(m, r)`; rows are distributions.
    Soft,
    /// Ground-truth alignment `h(m, r)`; rows one-hot or all zero.
    BinaryGt,
    /// Thresholded pseudo labels `ĥ(m, r)`.
    BinaryPseudo,
}

/// Per-(mention, region) scores, `mentions × regions`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundingMatrix {
    mentions: usize,
    regions: usize,
    values: Vec<f64>,
    kind: GroundingKind,
}

impl GroundingMatrix {
    pub fn new(mentions: usize, regions: usize, values: Vec<f64>, kind: GroundingKind) -> Result<Self> {
        if values.len() != mentions * regions {
            return Err(Error::Dimension(format!(
                "grounding matrix {}x{} given {} values",
                mentions,
                regions,
                values.len()
            )));
        }
        let gm = GroundingMatrix {
            mentions,
            regions,
            values,
            kind,
        };
        gm.validate()?;
        Ok(gm)
    }

    pub fn from_tensor(t: &Tensor, kind: GroundingKind) -> Result<Self> {
        if t.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "grounding matrix needs a 2-D tensor, got {:?}",
                t.shape()
            )));
        }
        GroundingMatrix::new(t.shape()[0], t.shape()[1], t.data().to_vec(), kind)
    }

    fn validate(&self) -> Result<()> {
        for m in 0..self.mentions {
            let row = self.row(m);
            match self.kind {
                GroundingKind::Soft => {
                    let s: f64 = row.iter().sum();
                    if row.iter().any(|v| *v < 0.0) || (s - 1.0).abs() > 1e-6 {
                        return Err(Error::Contract(format!(
                            "soft grounding row {} is not a distribution (sum {})",
                            m, s
                        )));
                    }
                }
                GroundingKind::BinaryGt | GroundingKind::BinaryPseudo => {
                    if row.iter().any(|v| *v != 0.0 && *v != 1.0) {
                        return Err(Error::Contract(format!("binary grounding row {} has non-binary entries", m)));
                    }
                    if self.kind == GroundingKind::BinaryGt && row.iter().sum::<f64>() > 1.0 {
                        return Err(Error::Contract(format!("ground-truth row {} is not one-hot", m)));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> GroundingKind {
        self.kind
    }

    pub fn mentions(&self) -> usize {
        self.mentions
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.values[m * self.regions..(m + 1) * self.regions]
    }

    pub fn get(&self, m: usize, r: usize) -> f64 {
        self.values[m * self.regions + r]
    }

    /// `(m, r)` pairs with a nonzero entry.
    pub fn active(&self) -> Vec<(usize, usize)> {
        (0..self.mentions)
            .flat_map(|m| (0..self.regions).map(move |r| (m, r)))
            .filter(|&(m, r)| self.get(m, r) != 0.0)
            .collect()
    }
}

/// Index of the row maximum; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Highest scoring region for mention `m`.
pub fn argmax_region(g: &GroundingMatrix, m: usize) -> usize {
    argmax(g.row(m))
}

/// Ground-truth alignment: one-hot at the region with maximum IoU against the
/// mention's gold box; all-zero without a gold box or without any overlap.
pub fn gt_alignment(mention_boxes: &[Option<BBox>], region_boxes: &[BBox]) -> Result<GroundingMatrix> {
    if region_boxes.is_empty() {
        return Err(Error::Contract("gt_alignment needs at least one region".into()));
    }
    let r = region_boxes.len();
    let mut values = vec![0.0; mention_boxes.len() * r];
    for (m, gold) in mention_boxes.iter().enumerate() {
        let Some(gold) = gold else { continue };
        let ious = region_boxes
            .iter()
            .map(|rb| iou(gold, rb))
            .collect::<Result<Vec<_>>>()?;
        let best = argmax(&ious);
        if ious[best] > 0.0 {
            values[m * r + best] = 1.0;
        }
    }
    GroundingMatrix::new(mention_boxes.len(), r, values, GroundingKind::BinaryGt)
}

/// Entrywise indicator `g(m, r) > t`.
pub fn pseudo_grounding(g: &GroundingMatrix, t: f64) -> GroundingMatrix {
    let values = g.values().iter().map(|v| if *v > t { 1.0 } else { 0.0 }).collect();
    GroundingMatrix {
        mentions: g.mentions(),
        regions: g.regions(),
        values,
        kind: GroundingKind::BinaryPseudo,
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Pairwise cosine similarities between the rows of `x`.
pub fn cosine_matrix(x: &Tensor) -> Vec<Vec<f64>> {
    let n = x.rows();
    let mut s = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let c = cosine(x.row(i), x.row(j));
            s[i][j] = c;
            s[j][i] = c;
        }
    }
    s
}

/// Positive and negative index sets per mention.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoCorefSets {
    pub positives: Vec<Vec<usize>>,
    pub negatives: Vec<Vec<usize>>,
}

impl PseudoCorefSets {
    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }

    /// Unordered positive pairs `(i, j)` with `i < j`.
    pub fn positive_pairs(&self) -> Vec<[usize; 2]> {
        let mut out = Vec::new();
        for (i, ps) in self.positives.iter().enumerate() {
            out.extend(ps.iter().filter(|&&j| j > i).map(|&j| [i, j]));
        }
        out
    }
}

/// `P̂(m) = {m' ≠ m : cos(f(m), f(m')) > thresh}`, `Â(m)` = the other mentions.
pub fn pseudo_coref(fused: &Tensor, thresh: f64) -> PseudoCorefSets {
    let sims = cosine_matrix(fused);
    let n = sims.len();
    let mut sets = PseudoCorefSets {
        positives: vec![Vec::new(); n],
        negatives: vec![Vec::new(); n],
    };
    for m in 0..n {
        for o in (0..n).filter(|&o| o != m) {
            if sims[m][o] > thresh {
                sets.positives[m].push(o);
            } else {
                sets.negatives[m].push(o);
            }
        }
    }
    sets
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_box(rng: &mut ChaCha8Rng) -> BBox {
        let w = rng.random_range(0.05..0.6);
        let h = rng.random_range(0.05..0.6);
        BBox::new(rng.random_range(0.0..1.0 - w), rng.random_range(0.0..1.0 - h), w, h)
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.1, 0.1, 0.3, 0.4);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let b = BBox::new(0.6, 0.6, 0.2, 0.2);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);
        let u = BBox::new(0.0, 0.0, 1.0, 1.0);
        let v = BBox::new(0.5, 0.0, 1.0, 1.0);
        assert!((iou(&u, &v).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn iou_rejects_degenerate_box() {
        let a = BBox::new(0.1, 0.1, 0.0, 0.4);
        assert!(matches!(iou(&a, &a), Err(Error::Data(_))));
    }

    #[test]
    fn gt_alignment_examples() {
        let regions = vec![
            BBox::new(0.0, 0.0, 0.2, 0.2),
            BBox::new(0.5, 0.5, 0.2, 0.2),
            BBox::new(0.3, 0.0, 0.3, 0.3),
        ];
        let h = gt_alignment(&[Some(regions[2]), None], &regions).unwrap();
        assert_eq!(h.row(0), &[0.0, 0.0, 1.0]);
        assert_eq!(h.row(1), &[0.0, 0.0, 0.0]);
        // No overlap at all: ungrounded.
        let h = gt_alignment(&[Some(BBox::new(0.8, 0.0, 0.1, 0.1))], &regions).unwrap();
        assert_eq!(h.row(0), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn gt_alignment_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let regions: Vec<BBox> = (0..6).map(|_| random_box(&mut rng)).collect();
            let golds: Vec<Option<BBox>> = (0..5).map(|_| Some(random_box(&mut rng))).collect();
            let h = gt_alignment(&golds, &regions).unwrap();
            for (m, g) in golds.iter().enumerate() {
                let g = g.unwrap();
                let mut best = None;
                let mut best_iou = 0.0;
                for (r, rb) in regions.iter().enumerate() {
                    let v = iou(&g, rb).unwrap();
                    if v > best_iou {
                        best_iou = v;
                        best = Some(r);
                    }
                }
                let expected: Vec<f64> = (0..6).map(|r| if Some(r) == best { 1.0 } else { 0.0 }).collect();
                assert_eq!(h.row(m), expected.as_slice());
            }
        }
    }

    #[test]
    fn argmax_tie_rule() {
        let g = GroundingMatrix::new(2, 3, vec![0.0, 1.0, 0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], GroundingKind::Soft)
            .unwrap();
        assert_eq!(argmax_region(&g, 0), 1);
        assert_eq!(argmax_region(&g, 1), 0);
    }

    #[test]
    fn argmax_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let row: Vec<f64> = (0..7).map(|_| rng.random_range(0.0..1.0)).collect();
            let mut best = 0;
            for i in 1..row.len() {
                if row[i] > row[best] {
                    best = i;
                }
            }
            assert_eq!(argmax(&row), best);
        }
    }

    #[test]
    fn pseudo_coref_examples() {
        let same = Tensor::from_rows(&[[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]).unwrap();
        let s = pseudo_coref(&same, 0.5);
        assert_eq!(s.positives[0], vec![1, 2]);
        assert!(s.negatives.iter().all(|n| n.is_empty()));

        let ortho = Tensor::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let s = pseudo_coref(&ortho, 0.5);
        assert!(s.positives.iter().all(|p| p.is_empty()));
        assert_eq!(s.negatives[1], vec![0, 2]);
    }

    #[test]
    fn pseudo_coref_matches_pairwise_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..30 {
            let rows: Vec<Vec<f64>> = (0..6)
                .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let t = Tensor::from_rows(&rows).unwrap();
            let s = pseudo_coref(&t, 0.3);
            for i in 0..6 {
                for j in 0..6 {
                    if i == j {
                        assert!(!s.positives[i].contains(&j) && !s.negatives[i].contains(&j));
                        continue;
                    }
                    let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                    let ni: f64 = rows[i].iter().map(|a| a * a).sum::<f64>().sqrt();
                    let nj: f64 = rows[j].iter().map(|a| a * a).sum::<f64>().sqrt();
                    let pos = dot / (ni * nj) > 0.3;
                    assert_eq!(s.positives[i].contains(&j), pos);
                    assert_eq!(s.negatives[i].contains(&j), !pos);
                }
            }
        }
    }

    #[test]
    fn pseudo_grounding_examples() {
        let g = GroundingMatrix::new(1, 3, vec![0.85, 0.1, 0.05], GroundingKind::Soft).unwrap();
        assert_eq!(pseudo_grounding(&g, 0.9).row(0), &[0.0, 0.0, 0.0]);
        let single = GroundingMatrix::new(1, 1, vec![1.0], GroundingKind::Soft).unwrap();
        assert_eq!(pseudo_grounding(&single, 0.9).row(0), &[1.0]);
    }

    #[test]
    fn soft_rows_must_be_distributions() {
        assert!(GroundingMatrix::new(1, 2, vec![0.5, 0.6], GroundingKind::Soft).is_err());
        assert!(GroundingMatrix::new(1, 2, vec![1.0, 1.0], GroundingKind::BinaryGt).is_err());
    }

    fn softmax(v: &[f64]) -> Vec<f64> {
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|x| x / s).collect()
    }

    proptest! {
        #[test]
        fn pseudo_coref_is_symmetric_and_partitions_others(
            rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 2..7),
            thresh in -0.5f64..0.9,
        ) {
            let t = Tensor::from_rows(&rows).unwrap();
            let s = pseudo_coref(&t, thresh);
            let n = rows.len();
            for m in 0..n {
                prop_assert!(!s.positives[m].contains(&m));
                prop_assert_eq!(s.positives[m].len() + s.negatives[m].len(), n - 1);
                for &p in &s.positives[m] {
                    prop_assert!(s.positives[p].contains(&m));
                    prop_assert!(!s.negatives[m].contains(&p));
                }
            }
        }

        #[test]
        fn high_threshold_pseudo_grounding_has_at_most_one_label_per_row(
            logits in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 1..5),
            t in 0.5f64..0.99,
        ) {
            let vals: Vec<f64> = logits.iter().flat_map(|r| softmax(r)).collect();
            let g = GroundingMatrix::new(logits.len(), 4, vals, GroundingKind::Soft).unwrap();
            let h = pseudo_grounding(&g, t);
            for m in 0..logits.len() {
                prop_assert!(h.row(m).iter().sum::<f64>() <= 1.0);
            }
        }

        #[test]
        fn gt_alignment_is_scale_invariant(seed in 0u64..1000, scale in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let regions: Vec<BBox> = (0..5).map(|_| random_box(&mut rng)).collect();
            let golds: Vec<Option<BBox>> = (0..3).map(|_| Some(random_box(&mut rng))).collect();
            let a = gt_alignment(&golds, &regions).unwrap();
            let sr: Vec<BBox> = regions.iter().map(|b| b.scaled(scale)).collect();
            let sg: Vec<Option<BBox>> = golds.iter().map(|b| b.map(|b| b.scaled(scale))).collect();
            let b = gt_alignment(&sg, &sr).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
