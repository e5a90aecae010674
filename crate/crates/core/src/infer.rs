//! Chain formation from fused mention embeddings and grounding read-out.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::align::{argmax, cosine_matrix, BBox, GroundingMatrix};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::losses::box_transform;
use crate::metrics::{grounding_counts, EvalReport, Evaluator};
use crate::model::{MentionKind, Model};
use crate::numerics::Tensor;

/// Disjoint, exhaustive clustering of mentions `0..n`. Singletons are explicit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<usize>>", into = "Vec<Vec<usize>>")]
pub struct Partition {
    clusters: Vec<Vec<usize>>,
    n: usize,
}

impl Partition {
    /// Validates and canonicalizes: members sorted, clusters ordered by first member.
    pub fn new(n: usize, clusters: Vec<Vec<usize>>) -> Result<Self> {
        let mut seen = vec![false; n];
        let mut out = Vec::with_capacity(clusters.len());
        for (ci, mut c) in clusters.into_iter().enumerate() {
            if c.is_empty() {
                return Err(Error::Contract(format!("cluster {} is empty", ci)));
            }
            for &m in &c {
                if m >= n {
                    return Err(Error::Contract(format!(
                        "cluster {} references mention {} but there are {} mentions",
                        ci, m, n
                    )));
                }
                if seen[m] {
                    return Err(Error::Contract(format!("mention {} appears in two clusters", m)));
                }
                seen[m] = true;
            }
            c.sort_unstable();
            out.push(c);
        }
        if let Some(m) = seen.iter().position(|s| !s) {
            return Err(Error::Contract(format!("mention {} is not covered by any cluster", m)));
        }
        out.sort_unstable_by_key(|c| c[0]);
        Ok(Partition { clusters: out, n })
    }

    /// Clusters from chains, with every mention outside all chains as a singleton.
    pub fn from_chains(n: usize, chains: &[Vec<usize>]) -> Result<Self> {
        let mut covered = vec![false; n];
        let mut clusters: Vec<Vec<usize>> = Vec::with_capacity(n);
        for c in chains {
            for &m in c {
                if m < n {
                    covered[m] = true;
                }
            }
            clusters.push(c.clone());
        }
        clusters.extend((0..n).filter(|&m| !covered[m]).map(|m| vec![m]));
        Partition::new(n, clusters)
    }

    /// Groups mentions by a label per mention.
    pub fn from_labels(labels: &[usize]) -> Self {
        let mut order: Vec<usize> = Vec::new();
        let mut groups: std::collections::HashMap<usize, Vec<usize>> = Default::default();
        for (m, &l) in labels.iter().enumerate() {
            groups
                .entry(l)
                .or_insert_with(|| {
                    order.push(l);
                    Vec::new()
                })
                .push(m);
        }
        let clusters = order.into_iter().map(|l| groups.remove(&l).unwrap()).collect();
        Partition::new(labels.len(), clusters).expect("labels always partition")
    }

    pub fn singletons(n: usize) -> Self {
        Partition {
            clusters: (0..n).map(|m| vec![m]).collect(),
            n,
        }
    }

    pub fn n_mentions(&self) -> usize {
        self.n
    }

    pub fn clusters(&self) -> &[Vec<usize>] {
        &self.clusters
    }

    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    /// Cluster index of every mention.
    pub fn labels(&self) -> Vec<usize> {
        let mut out = vec![0; self.n];
        for (ci, c) in self.clusters.iter().enumerate() {
            for &m in c {
                out[m] = ci;
            }
        }
        out
    }

    /// Clusters with at least two mentions.
    pub fn chains(&self) -> Vec<Vec<usize>> {
        self.clusters.iter().filter(|c| c.len() > 1).cloned().collect()
    }
}

impl TryFrom<Vec<Vec<usize>>> for Partition {
    type Error = Error;

    fn try_from(clusters: Vec<Vec<usize>>) -> Result<Self> {
        let n = clusters.iter().map(Vec::len).sum();
        Partition::new(n, clusters)
    }
}

impl From<Partition> for Vec<Vec<usize>> {
    fn from(p: Partition) -> Self {
        p.clusters
    }
}

/// How thresholded pairs are turned into chains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainMode {
    /// Connected components of the thresholded similarity graph.
    #[default]
    Components,
    /// Each mention links to its single most similar earlier mention above the threshold.
    Greedy,
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }

    fn into_labels(mut self) -> Vec<usize> {
        (0..self.parent.len()).map(|i| self.find(i)).collect()
    }
}

/// Chains from pairwise cosine similarity `> thresh`.
pub fn predict_chains(fused: &Tensor, thresh: f64) -> Partition {
    predict_chains_with(fused, thresh, ChainMode::Components)
}

pub fn predict_chains_with(fused: &Tensor, thresh: f64, mode: ChainMode) -> Partition {
    let n = if fused.shape().len() == 2 { fused.rows() } else { 0 };
    if n == 0 {
        return Partition::singletons(0);
    }
    let sim = cosine_matrix(fused);
    let mut uf = UnionFind::new(n);
    match mode {
        ChainMode::Components => {
            for i in 0..n {
                for j in i + 1..n {
                    if sim[i][j] > thresh {
                        uf.union(i, j);
                    }
                }
            }
        }
        ChainMode::Greedy => {
            for j in 1..n {
                let best = (0..j)
                    .filter(|&i| sim[i][j] > thresh)
                    .fold(None, |acc: Option<usize>, i| match acc {
                        Some(b) if sim[b][j] >= sim[i][j] => Some(b),
                        _ => Some(i),
                    });
                if let Some(i) = best {
                    uf.union(i, j);
                }
            }
        }
    }
    Partition::from_labels(&uf.into_labels())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingPrediction {
    pub regions: Vec<usize>,
    pub boxes: Vec<BBox>,
}

/// Highest-scoring region per mention, lowest index on ties.
pub fn predict_grounding(g: &GroundingMatrix, region_boxes: &[BBox]) -> Result<GroundingPrediction> {
    if g.regions() != region_boxes.len() {
        return Err(Error::Contract(format!(
            "grounding has {} regions but {} boxes were given",
            g.regions(),
            region_boxes.len()
        )));
    }
    let regions: Vec<usize> = (0..g.mentions()).map(|m| argmax(g.row(m))).collect();
    let boxes = regions.iter().map(|&r| region_boxes[r]).collect();
    Ok(GroundingPrediction { regions, boxes })
}

/// One line of a prediction file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub chains: Vec<Vec<usize>>,
    pub grounding: Vec<usize>,
    /// Refined boxes, when the box head was applied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<Vec<BBox>>,
}

pub fn write_predictions(path: &Path, preds: &[PredictionRecord]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for p in preds {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Fused embeddings, grounding prediction and refined boxes of one sample.
#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub fused: Tensor,
    pub grounding: GroundingPrediction,
    pub refined_boxes: Vec<BBox>,
}

pub fn run_sample(model: &Model, sample: &Sample) -> Result<SampleOutput> {
    let out = model.infer(&sample.regions, &sample.narration)?;
    let grounding = predict_grounding(&out.grounding, &sample.regions.boxes)?;
    let refined_boxes = grounding
        .boxes
        .iter()
        .enumerate()
        .map(|(m, b)| {
            let d = out.box_deltas.row(m);
            let r = box_transform(b, &[d[0], d[1], d[2], d[3]]);
            r.clip_to_unit().unwrap_or(*b)
        })
        .collect();
    Ok(SampleOutput {
        fused: out.fused,
        grounding,
        refined_boxes,
    })
}

/// Inference settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    pub chain_thresh: f64,
    pub chain_mode: ChainMode,
    /// Score refined boxes instead of the selected region boxes.
    pub refine_boxes: bool,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            chain_thresh: 0.5,
            chain_mode: ChainMode::Components,
            refine_boxes: false,
        }
    }
}

pub fn predict_sample(model: &Model, sample: &Sample, cfg: &InferConfig) -> Result<PredictionRecord> {
    let out = run_sample(model, sample)?;
    let chains = predict_chains_with(&out.fused, cfg.chain_thresh, cfg.chain_mode).chains();
    Ok(PredictionRecord {
        id: sample.id.clone(),
        chains,
        grounding: out.grounding.regions,
        boxes: cfg.refine_boxes.then_some(out.refined_boxes),
    })
}

/// Adds one labeled sample's coreference and grounding counts to `ev`.
pub fn score_prediction(ev: &mut Evaluator, sample: &Sample, pred: &PredictionRecord) -> Result<()> {
    let labels = sample
        .labels
        .as_ref()
        .ok_or_else(|| Error::Eval(format!("sample {} has no gold labels", sample.id)))?;
    let n = sample.n_mentions();
    let gold = Partition::from_chains(n, &labels.chains)?;
    let pred_part = Partition::from_chains(n, &pred.chains)
        .map_err(|e| Error::Eval(format!("prediction for {}: {}", sample.id, e)))?;
    ev.add_coref(&gold, &pred_part)?;
    if pred.grounding.len() != n {
        return Err(Error::Eval(format!(
            "prediction for {} grounds {} of {} mentions",
            sample.id,
            pred.grounding.len(),
            n
        )));
    }
    let boxes: Vec<BBox> = match &pred.boxes {
        Some(b) if b.len() == n => b.clone(),
        _ => pred
            .grounding
            .iter()
            .map(|&r| {
                sample.regions.boxes.get(r).copied().ok_or_else(|| {
                    Error::Eval(format!("prediction for {} selects missing region {}", sample.id, r))
                })
            })
            .collect::<Result<_>>()?,
    };
    let kinds: Vec<MentionKind> = sample.narration.mentions.iter().map(|m| m.kind).collect();
    ev.add_grounding(&grounding_counts(&boxes, &labels.mention_boxes, &kinds)?);
    Ok(())
}

pub fn evaluate(model: &Model, samples: &[Sample], cfg: &InferConfig) -> Result<EvalReport> {
    let mut ev = Evaluator::new();
    for s in samples {
        let pred = predict_sample(model, s, cfg)?;
        score_prediction(&mut ev, s, &pred)?;
    }
    Ok(ev.report())
}

/// Picks the chain threshold with the best CoNLL F1 on `samples`; ties go to
/// the earliest grid value.
pub fn tune_threshold(model: &Model, samples: &[Sample], grid: &[f64], mode: ChainMode) -> Result<(f64, f64)> {
    if grid.is_empty() {
        return Err(Error::Config("threshold grid is empty".into()));
    }
    let mut fused = Vec::with_capacity(samples.len());
    for s in samples {
        if s.labels.is_none() {
            return Err(Error::Eval(format!("sample {} has no gold labels", s.id)));
        }
        fused.push(model.infer(&s.regions, &s.narration)?.fused);
    }
    let mut best = (grid[0], f64::NEG_INFINITY);
    for &t in grid {
        let mut ev = Evaluator::new();
        for (s, f) in samples.iter().zip(&fused) {
            let gold = s.gold_partition().expect("checked");
            ev.add_coref(&gold, &predict_chains_with(f, t, mode))?;
        }
        let f1 = ev.report().conll_f1;
        if f1 > best.1 {
            best = (t, f1);
        }
    }
    Ok(best)
}
