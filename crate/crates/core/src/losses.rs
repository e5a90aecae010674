//! Training objectives and the joint loss over a batch.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{argmax, gt_alignment, pseudo_coref, BBox, GroundingMatrix, PseudoCorefSets};
use crate::data::{mask_tokens_with, Sample};
use crate::error::{Error, Result};
use crate::infer::Partition;
use crate::model::{Bindings, Model, ParamStore};
use crate::numerics::{Tape, Tensor, Var};

/// Gold coreference targets: chain-mates `P(m)` and everything else `A(m)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorefLabels {
    pub positives: Vec<Vec<usize>>,
    pub negatives: Vec<Vec<usize>>,
}

impl CorefLabels {
    pub fn from_partition(p: &Partition) -> Self {
        let lab = p.labels();
        let n = lab.len();
        let mut positives = vec![Vec::new(); n];
        let mut negatives = vec![Vec::new(); n];
        for m in 0..n {
            for o in (0..n).filter(|&o| o != m) {
                if lab[o] == lab[m] {
                    positives[m].push(o);
                } else {
                    negatives[m].push(o);
                }
            }
        }
        CorefLabels { positives, negatives }
    }

    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.positives.len();
        if self.negatives.len() != n {
            return Err(Error::Contract("positive and negative sets differ in length".into()));
        }
        for m in 0..n {
            for &p in &self.positives[m] {
                if p >= n || p == m {
                    return Err(Error::Contract(format!("invalid positive {} for mention {}", p, m)));
                }
                if !self.positives[p].contains(&m) {
                    return Err(Error::Contract(format!("positive pair ({}, {}) is not symmetric", m, p)));
                }
                if self.negatives[m].contains(&p) {
                    return Err(Error::Contract(format!("mention {} is both positive and negative for {}", p, m)));
                }
            }
            if self.negatives[m].iter().any(|&a| a >= n || a == m) {
                return Err(Error::Contract(format!("invalid negative for mention {}", m)));
            }
        }
        Ok(())
    }
}

/// Denominator of the coreference contrastive loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrDenominator {
    /// Sum over the negatives `A(m)` only.
    #[default]
    Negatives,
    /// Sum over every other mention, positives included.
    AllOthers,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Cr,
    Gd,
    Bbr,
    Pcr,
    Pgd,
    Itc,
    Mlm,
}

impl Term {
    pub const ALL: [Term; 7] = [Term::Cr, Term::Gd, Term::Bbr, Term::Pcr, Term::Pgd, Term::Itc, Term::Mlm];

    pub fn name(self) -> &'static str {
        match self {
            Term::Cr => "cr",
            Term::Gd => "gd",
            Term::Bbr => "bbr",
            Term::Pcr => "pcr",
            Term::Pgd => "pgd",
            Term::Itc => "itc",
            Term::Mlm => "mlm",
        }
    }

    pub fn parse(s: &str) -> Option<Term> {
        Term::ALL.into_iter().find(|t| t.name() == s)
    }

    /// Which part of the data the term is averaged over.
    pub fn scope(self) -> Scope {
        match self {
            Term::Cr | Term::Gd | Term::Bbr => Scope::Labeled,
            Term::Pcr | Term::Pgd => Scope::Unlabeled,
            Term::Itc | Term::Mlm => Scope::All,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Labeled,
    Unlabeled,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub cr: f64,
    pub gd: f64,
    pub bbr: f64,
    pub pcr: f64,
    pub pgd: f64,
    pub itc: f64,
    pub mlm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cr: 1.0,
            gd: 1.0,
            bbr: 1.0,
            pcr: 1.0,
            pgd: 1.0,
            itc: 1.0,
            mlm: 1.0,
        }
    }
}

impl LossWeights {
    pub fn get(&self, t: Term) -> f64 {
        match t {
            Term::Cr => self.cr,
            Term::Gd => self.gd,
            Term::Bbr => self.bbr,
            Term::Pcr => self.pcr,
            Term::Pgd => self.pgd,
            Term::Itc => self.itc,
            Term::Mlm => self.mlm,
        }
    }

    pub fn set(&mut self, t: Term, w: f64) {
        match t {
            Term::Cr => self.cr = w,
            Term::Gd => self.gd = w,
            Term::Bbr => self.bbr = w,
            Term::Pcr => self.pcr = w,
            Term::Pgd => self.pgd = w,
            Term::Itc => self.itc = w,
            Term::Mlm => self.mlm = w,
        }
    }

    pub fn zeros() -> Self {
        let mut w = LossWeights::default();
        Term::ALL.into_iter().for_each(|t| w.set(t, 0.0));
        w
    }

    /// Applies overrides such as `pcr=0,pgd=0.5`.
    pub fn apply_overrides(&mut self, spec: &str) -> Result<()> {
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("loss weight `{}` is not of the form name=value", part)))?;
            let term = Term::parse(k.trim()).ok_or_else(|| Error::Config(format!("unknown loss term `{}`", k)))?;
            let w: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("loss weight `{}` is not a number", v)))?;
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("loss weight for {} must be finite and non-negative", term)));
            }
            self.set(term, w);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f64,
    pub alpha: f64,
    pub ground_thresh: f64,
    pub coref_pseudo_thresh: f64,
    pub beta_smooth_l1: f64,
    pub mlm_mask_prob: f64,
    pub loss_weights: LossWeights,
    pub cr_denominator: CrDenominator,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.1,
            alpha: 0.2,
            ground_thresh: 0.9,
            coref_pseudo_thresh: 0.5,
            beta_smooth_l1: 1.0,
            mlm_mask_prob: 0.15,
            loss_weights: LossWeights::default(),
            cr_denominator: CrDenominator::Negatives,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be non-negative, got {}", self.alpha)));
        }
        // Zero is allowed so that every confident-or-not entry can be used as a pseudo label.
        if !(0.0..1.0).contains(&self.ground_thresh) {
            return Err(Error::Config(format!("ground_thresh must lie in [0, 1), got {}", self.ground_thresh)));
        }
        if !(-1.0..=1.0).contains(&self.coref_pseudo_thresh) {
            return Err(Error::Config("coref_pseudo_thresh must lie in [-1, 1]".into()));
        }
        if !(self.beta_smooth_l1 > 0.0) {
            return Err(Error::Config("beta_smooth_l1 must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mlm_mask_prob) {
            return Err(Error::Config("mlm_mask_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

// ----- tape-level losses --------------------------------------------------------

fn check_rows(tape: &Tape, x: Var, n: usize, what: &str) -> Result<()> {
    let s = tape.shape(x);
    if s.len() != 2 || s[0] != n {
        return Err(Error::Contract(format!("{}: expected {} rows, got shape {:?}", what, n, s)));
    }
    Ok(())
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

/// Supervised contrastive coreference loss over L2-normalized `fused` rows.
pub fn cr_loss(tape: &mut Tape, fused: Var, labels: &CorefLabels, tau: f64, denom: CrDenominator) -> Result<Var> {
    let n = labels.len();
    check_rows(tape, fused, n, "cr")?;
    let z = tape.l2_normalize_rows(fused);
    let sim = tape.matmul_t(z, z)?;
    let sim = tape.scale(sim, 1.0 / tau);
    let mut parts = Vec::new();
    for m in 0..n {
        let pos = &labels.positives[m];
        if pos.is_empty() {
            continue;
        }
        let others: Vec<usize> = match denom {
            CrDenominator::Negatives => labels.negatives[m].clone(),
            CrDenominator::AllOthers => (0..n).filter(|&o| o != m).collect(),
        };
        if others.is_empty() {
            return Err(Error::Contract(format!(
                "mention {} has positives but no negatives, the contrastive denominator is undefined",
                m
            )));
        }
        let p = tape.gather(sim, &pos.iter().map(|&p| m * n + p).collect::<Vec<_>>())?;
        let p = tape.sum(p);
        let p = tape.scale(p, -1.0 / pos.len() as f64);
        let a = tape.gather(sim, &others.iter().map(|&a| m * n + a).collect::<Vec<_>>())?;
        let lse = tape.logsumexp(a)?;
        parts.push(tape.add(p, lse)?);
    }
    tape.add_n(&parts)
}

/// `−Σ h(m,r) log g(m,r)` over the active entries of a binary alignment.
pub fn alignment_ce(tape: &mut Tape, g: Var, h: &GroundingMatrix) -> Result<Var> {
    let s = tape.shape(g);
    if s.len() != 2 || s[0] != h.mentions() || s[1] != h.regions() {
        return Err(Error::Contract(format!(
            "grounding scores {:?} do not match alignment {}x{}",
            s,
            h.mentions(),
            h.regions()
        )));
    }
    let idx: Vec<usize> = h.active().iter().map(|&(m, r)| m * h.regions() + r).collect();
    if idx.is_empty() {
        return Ok(zero(tape));
    }
    let lg = tape.log_clamped(g);
    let picked = tape.gather(lg, &idx)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0))
}

/// Gold grounding loss against the max-IoU alignment `h`.
pub fn gd_loss(tape: &mut Tape, g: Var, h: &GroundingMatrix) -> Result<Var> {
    alignment_ce(tape, g, h)
}

/// Pseudo grounding loss: entries above `t` in the current scores are targets.
pub fn pgd_loss(tape: &mut Tape, g: Var, t: f64) -> Result<Var> {
    let gm = GroundingMatrix::from_tensor(tape.value(g), crate::align::GroundingKind::Soft)?;
    let h = crate::align::pseudo_grounding(&gm, t);
    let out = alignment_ce(tape, g, &h)?;
    tape.note_decision_on(out, h.active().iter().map(|&(m, r)| (m * h.regions() + r) as u64));
    Ok(out)
}

/// Regression targets `(t_x, t_y, t_w, t_h)` that map `anchor` onto `gold`.
pub fn box_targets(anchor: &BBox, gold: &BBox) -> Result<[f64; 4]> {
    if !(anchor.w > 0.0 && anchor.h > 0.0) {
        return Err(Error::Data(format!("anchor box {:?} has nonpositive size", anchor)));
    }
    if !(gold.w > 0.0 && gold.h > 0.0) {
        return Err(Error::Data(format!("ground-truth box {:?} has nonpositive size", gold)));
    }
    Ok([
        (gold.x - anchor.x) / anchor.w,
        (gold.y - anchor.y) / anchor.h,
        (gold.w / anchor.w).ln(),
        (gold.h / anchor.h).ln(),
    ])
}

/// Applies deltas to an anchor box (inverse of [`box_targets`]).
pub fn box_transform(anchor: &BBox, delta: &[f64; 4]) -> BBox {
    BBox::new(
        anchor.x + delta[0] * anchor.w,
        anchor.y + delta[1] * anchor.h,
        anchor.w * delta[2].exp(),
        anchor.h * delta[3].exp(),
    )
}

/// Smooth-L1 between predicted deltas and targets, summed over coordinates
/// and averaged over the listed `(mention, target)` pairs.
pub fn bbr_loss(tape: &mut Tape, deltas: Var, targets: &[(usize, [f64; 4])], beta: f64) -> Result<Var> {
    if targets.is_empty() {
        return Ok(zero(tape));
    }
    let rows: Vec<usize> = targets.iter().map(|t| t.0).collect();
    let pred = tape.gather_rows(deltas, &rows)?;
    let tgt = Tensor::new(vec![rows.len(), 4], targets.iter().flat_map(|t| t.1).collect())?;
    let tgt = tape.constant(tgt);
    let r = tape.sub(pred, tgt)?;
    let l = tape.smooth_l1(r, beta);
    let s = tape.sum(l);
    Ok(tape.scale(s, 1.0 / targets.len() as f64))
}

/// Regression targets from the argmax-scoring region of every grounded mention.
pub fn bbr_targets(g: &Tensor, region_boxes: &[BBox], mention_boxes: &[Option<BBox>]) -> Result<Vec<(usize, [f64; 4])>> {
    let mut out = Vec::new();
    for (m, gold) in mention_boxes.iter().enumerate() {
        if let Some(gold) = gold {
            let r = argmax(g.row(m));
            out.push((m, box_targets(&region_boxes[r], gold)?));
        }
    }
    Ok(out)
}

/// Mean-triplet loss against pseudo positive and negative sets.
pub fn pcr_loss(tape: &mut Tape, fused: Var, sets: &PseudoCorefSets, alpha: f64) -> Result<Var> {
    check_rows(tape, fused, sets.positives.len(), "pcr")?;
    let active: Vec<usize> = (0..sets.positives.len())
        .filter(|&m| !sets.positives[m].is_empty() && !sets.negatives[m].is_empty())
        .collect();
    if active.is_empty() {
        return Ok(zero(tape));
    }
    let z = tape.l2_normalize_rows(fused);
    let anchors = tape.gather_rows(z, &active)?;
    let pos: Vec<Vec<usize>> = active.iter().map(|&m| sets.positives[m].clone()).collect();
    let neg: Vec<Vec<usize>> = active.iter().map(|&m| sets.negatives[m].clone()).collect();
    let pm = tape.group_mean_rows(z, &pos)?;
    let am = tape.group_mean_rows(z, &neg)?;
    let dp = tape.sub(anchors, pm)?;
    let dp2 = tape.mul(dp, dp)?;
    let dp = tape.sum_rows(dp2);
    let da = tape.sub(anchors, am)?;
    let da2 = tape.mul(da, da)?;
    let da = tape.sum_rows(da2);
    let diff = tape.sub(dp, da)?;
    let shifted = tape.add_const(diff, alpha);
    let hinge = tape.relu(shifted);
    Ok(tape.sum(hinge))
}

/// Contrastive matching of pre-fusion mention and region embeddings, with
/// `selected[m]` as the positive region of mention `m`.
pub fn itc_loss(tape: &mut Tape, region_emb: Var, mention_emb: Var, selected: &[usize]) -> Result<Var> {
    check_rows(tape, mention_emb, selected.len(), "itc")?;
    if selected.is_empty() {
        return Ok(zero(tape));
    }
    let n_reg = tape.value(region_emb).rows();
    if let Some(&r) = selected.iter().find(|&&r| r >= n_reg) {
        return Err(Error::Contract(format!("itc: region {} out of range for {} regions", r, n_reg)));
    }
    let scores = tape.matmul_t(mention_emb, region_emb)?;
    let ls = tape.log_softmax_rows(scores);
    let idx: Vec<usize> = selected.iter().enumerate().map(|(m, &r)| m * n_reg + r).collect();
    let picked = tape.gather(ls, &idx)?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0))
}

/// Mean cross-entropy of `logits` rows against `targets`.
pub fn mlm_loss(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    check_rows(tape, logits, targets.len(), "mlm")?;
    if targets.is_empty() {
        return Ok(zero(tape));
    }
    let v = tape.value(logits).cols();
    if let Some(&t) = targets.iter().find(|&&t| t >= v) {
        return Err(Error::Vocabulary { id: t, vocab_size: v });
    }
    let ls = tape.log_softmax_rows(logits);
    let idx: Vec<usize> = targets.iter().enumerate().map(|(i, &t)| i * v + t).collect();
    let picked = tape.gather(ls, &idx)?;
    let m = tape.mean(picked);
    Ok(tape.scale(m, -1.0))
}

// ----- value-level conveniences ------------------------------------------------------

fn eval_on_constant<F>(x: &Tensor, f: F) -> Result<f64>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = f(&mut tape, v)?;
    Ok(tape.value(out).item())
}

pub fn loss_cr(fused: &Tensor, labels: &CorefLabels, tau: f64) -> Result<f64> {
    eval_on_constant(fused, |t, v| cr_loss(t, v, labels, tau, CrDenominator::Negatives))
}

pub fn loss_gd(g: &GroundingMatrix, h: &GroundingMatrix) -> Result<f64> {
    let t = Tensor::new(vec![g.mentions(), g.regions()], g.values().to_vec())?;
    eval_on_constant(&t, |tape, v| gd_loss(tape, v, h))
}

pub fn loss_pgd(g: &GroundingMatrix, t: f64) -> Result<f64> {
    let x = Tensor::new(vec![g.mentions(), g.regions()], g.values().to_vec())?;
    eval_on_constant(&x, |tape, v| pgd_loss(tape, v, t))
}

pub fn loss_bbr(pred: &[f64; 4], anchor: &BBox, gold: &BBox, beta: f64) -> Result<f64> {
    let target = box_targets(anchor, gold)?;
    let x = Tensor::new(vec![1, 4], pred.to_vec())?;
    eval_on_constant(&x, |tape, v| bbr_loss(tape, v, &[(0, target)], beta))
}

pub fn loss_pcr(fused: &Tensor, sets: &PseudoCorefSets, alpha: f64) -> Result<f64> {
    eval_on_constant(fused, |t, v| pcr_loss(t, v, sets, alpha))
}

pub fn loss_itc(region_emb: &Tensor, mention_emb: &Tensor, selected: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let r = tape.constant(region_emb.clone());
    let m = tape.constant(mention_emb.clone());
    let out = itc_loss(&mut tape, r, m, selected)?;
    Ok(tape.value(out).item())
}

pub fn loss_mlm(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    eval_on_constant(logits, |t, v| mlm_loss(t, v, targets))
}

// ----- joint objective ---------------------------------------------------------------

/// Per-step values of every term, each averaged over its scope, and the weighted total.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub cr: f64,
    pub gd: f64,
    pub bbr: f64,
    pub pcr: f64,
    pub pgd: f64,
    pub itc: f64,
    pub mlm: f64,
    pub total: f64,
}

impl LossReport {
    pub fn get(&self, t: Term) -> f64 {
        match t {
            Term::Cr => self.cr,
            Term::Gd => self.gd,
            Term::Bbr => self.bbr,
            Term::Pcr => self.pcr,
            Term::Pgd => self.pgd,
            Term::Itc => self.itc,
            Term::Mlm => self.mlm,
        }
    }

    fn add(&mut self, t: Term, v: f64) {
        match t {
            Term::Cr => self.cr += v,
            Term::Gd => self.gd += v,
            Term::Bbr => self.bbr += v,
            Term::Pcr => self.pcr += v,
            Term::Pgd => self.pgd += v,
            Term::Itc => self.itc += v,
            Term::Mlm => self.mlm += v,
        }
    }
}

/// Per-sample settings that vary during training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepContext {
    /// Zero-based epoch. During epoch 0 the matching-loss positive falls back
    /// to the region whose detector class matches the mention's head noun.
    pub epoch: usize,
    /// Seed of the masking draw.
    pub mask_seed: u64,
}

impl Default for StepContext {
    fn default() -> Self {
        StepContext { epoch: 1, mask_seed: 0 }
    }
}

/// Tape handles of every term that applies to one sample.
#[derive(Clone, Debug, Default)]
pub struct SampleTerms {
    terms: [Option<Var>; 7],
}

impl SampleTerms {
    pub fn get(&self, t: Term) -> Option<Var> {
        self.terms[t.index()]
    }

    fn set(&mut self, t: Term, v: Var) {
        self.terms[t.index()] = Some(v);
    }
}

/// Positive region per mention for the matching loss.
pub fn itc_selection(sample: &Sample, g_last: &Tensor, epoch: usize) -> Vec<usize> {
    (0..sample.n_mentions())
        .map(|m| {
            let fallback = if epoch == 0 {
                sample
                    .head_classes
                    .as_ref()
                    .and_then(|h| h[m])
                    .and_then(|c| sample.regions.class_ids.iter().position(|&rc| rc == c))
            } else {
                None
            };
            fallback.unwrap_or_else(|| argmax(g_last.row(m)))
        })
        .collect()
}

/// Builds every applicable term of `sample` on `tape`. Labeled samples get the
/// supervised terms, unlabeled ones the pseudo-label terms; all get matching
/// and masked-token terms. Terms with zero weight are skipped.
pub fn sample_terms(
    tape: &mut Tape,
    binder: &mut crate::model::Binder,
    model: &Model,
    sample: &Sample,
    cfg: &LossConfig,
    ctx: StepContext,
) -> Result<SampleTerms> {
    let w = &cfg.loss_weights;
    let mut out = SampleTerms::default();
    let enc = model.forward(tape, binder, &sample.regions, &sample.narration)?;
    let g = enc.last_grounding();
    let g_val = tape.value(g).clone();
    let n = sample.n_mentions();

    match &sample.labels {
        Some(labels) => {
            if w.cr != 0.0 {
                let cl = sample.coref_labels().expect("labeled");
                out.set(Term::Cr, cr_loss(tape, enc.fused, &cl, cfg.tau, cfg.cr_denominator)?);
            }
            if w.gd != 0.0 {
                let h = gt_alignment(&labels.mention_boxes, &sample.regions.boxes)?;
                out.set(Term::Gd, gd_loss(tape, g, &h)?);
            }
            if w.bbr != 0.0 && n > 0 {
                let anchors: Vec<usize> = (0..n).map(|m| argmax(g_val.row(m))).collect();
                let targets = bbr_targets(&g_val, &sample.regions.boxes, &labels.mention_boxes)?;
                let v = bbr_loss(tape, enc.box_deltas, &targets, cfg.beta_smooth_l1)?;
                tape.note_decision_on(v, anchors.iter().map(|&r| r as u64));
                out.set(Term::Bbr, v);
            }
        }
        None => {
            if w.pcr != 0.0 {
                let sets = pseudo_coref(tape.value(enc.fused), cfg.coref_pseudo_thresh);
                let v = pcr_loss(tape, enc.fused, &sets, cfg.alpha)?;
                tape.note_decision_on(v, sets.positive_pairs().iter().map(|p| (p[0] * n + p[1]) as u64));
                out.set(Term::Pcr, v);
            }
            if w.pgd != 0.0 {
                out.set(Term::Pgd, pgd_loss(tape, g, cfg.ground_thresh)?);
            }
        }
    }

    if w.itc != 0.0 {
        let sel = itc_selection(sample, &g_val, ctx.epoch);
        let v = itc_loss(tape, enc.region_emb, enc.mention_emb, &sel)?;
        tape.note_decision_on(v, sel.iter().map(|&r| r as u64));
        out.set(Term::Itc, v);
    }
    if w.mlm != 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.mask_seed);
        let (masked, positions) = mask_tokens_with(&sample.narration.token_ids, cfg.mlm_mask_prob, &mut rng);
        let v = if positions.is_empty() {
            zero(tape)
        } else {
            let h = model.encode_text(tape, binder, &masked)?;
            let logits = model.mlm_logits(tape, binder, h, &positions)?;
            let targets: Vec<usize> = positions.iter().map(|&p| sample.narration.token_ids[p]).collect();
            mlm_loss(tape, logits, &targets)?
        };
        out.set(Term::Mlm, v);
    }
    Ok(out)
}

/// Coefficient of each term of a sample in the joint objective: the term's
/// weight divided by the size of its scope within the batch.
pub fn term_coefficients(sample: &Sample, n_labeled: usize, n_unlabeled: usize, n_all: usize, w: &LossWeights) -> [f64; 7] {
    let mut c = [0.0; 7];
    for t in Term::ALL {
        let size = match t.scope() {
            Scope::Labeled if sample.is_labeled() => n_labeled,
            Scope::Unlabeled if !sample.is_labeled() => n_unlabeled,
            Scope::All => n_all,
            _ => 0,
        };
        if size > 0 {
            c[t.index()] = w.get(t) / size as f64;
        }
    }
    c
}

/// Result of one sample's forward (and optional backward) pass.
struct SamplePass {
    report: LossReport,
    bindings: Option<(Tape, Bindings)>,
}

fn run_sample(
    model: &Model,
    sample: &Sample,
    cfg: &LossConfig,
    ctx: StepContext,
    coef: &[f64; 7],
    scope_sizes: [usize; 3],
    with_grad: bool,
) -> Result<SamplePass> {
    let mut tape = Tape::new();
    let mut binder = model.binder(with_grad);
    let terms = sample_terms(&mut tape, &mut binder, model, sample, cfg, ctx)?;
    let bindings = binder.finish();
    let mut report = LossReport::default();
    let mut weighted = Vec::new();
    for t in Term::ALL {
        let Some(v) = terms.get(t) else { continue };
        let val = tape.value(v).item();
        if !val.is_finite() {
            return Err(Error::Training(format!("{} loss is {} on sample {}", t, val, sample.id)));
        }
        let size = match t.scope() {
            Scope::Labeled => scope_sizes[0],
            Scope::Unlabeled => scope_sizes[1],
            Scope::All => scope_sizes[2],
        };
        if size > 0 {
            report.add(t, val / size as f64);
        }
        let c = coef[t.index()];
        if c != 0.0 {
            weighted.push(tape.scale(v, c));
        }
    }
    let total = tape.add_n(&weighted)?;
    report.total = tape.value(total).item();
    let bindings = if with_grad && !weighted.is_empty() {
        tape.backward(total)?;
        Some((tape, bindings))
    } else {
        None
    };
    Ok(SamplePass { report, bindings })
}

/// Joint objective over `batch` with per-sample contexts. When `grads` is
/// given, parameter gradients of the total are accumulated into it.
pub fn loss_total_with(
    model: &Model,
    batch: &[Sample],
    cfg: &LossConfig,
    ctx: &[StepContext],
    grads: Option<&mut ParamStore>,
) -> Result<LossReport> {
    loss_total_par(model, batch, cfg, ctx, grads, 1)
}

/// [`loss_total_with`] with per-sample passes spread over `threads` workers.
/// Gradients are reduced in sample order, so results do not depend on the
/// thread count.
pub fn loss_total_par(
    model: &Model,
    batch: &[Sample],
    cfg: &LossConfig,
    ctx: &[StepContext],
    mut grads: Option<&mut ParamStore>,
    threads: usize,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::Contract("the joint loss needs at least one sample".into()));
    }
    if ctx.len() != batch.len() {
        return Err(Error::Contract("one step context per sample is required".into()));
    }
    let n_l = batch.iter().filter(|s| s.is_labeled()).count();
    let n_u = batch.len() - n_l;
    let sizes = [n_l, n_u, batch.len()];
    let with_grad = grads.is_some();
    let pass = |i: usize| {
        let s = &batch[i];
        let coef = term_coefficients(s, n_l, n_u, batch.len(), &cfg.loss_weights);
        run_sample(model, s, cfg, ctx[i], &coef, sizes, with_grad)
    };
    let passes: Vec<Result<SamplePass>> = if threads <= 1 || batch.len() == 1 {
        (0..batch.len()).map(pass).collect()
    } else {
        let workers = threads.min(batch.len());
        let mut slots: Vec<Option<Result<SamplePass>>> = (0..batch.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let pass = &pass;
                    scope.spawn(move || {
                        (w..batch.len())
                            .step_by(workers)
                            .map(|i| (i, pass(i)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("loss worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots.into_iter().map(|s| s.expect("every sample evaluated")).collect()
    };
    let mut report = LossReport::default();
    for pass in passes {
        let pass = pass?;
        for t in Term::ALL {
            report.add(t, pass.report.get(t));
        }
        report.total += pass.report.total;
        if let (Some(store), Some((tape, b))) = (grads.as_deref_mut(), pass.bindings) {
            b.collect_grads(&tape, store, 1.0);
        }
    }
    Ok(report)
}

/// Joint objective with default step contexts and no gradients.
pub fn loss_total(model: &Model, batch: &[Sample], cfg: &LossConfig) -> Result<LossReport> {
    let ctx: Vec<StepContext> = (0..batch.len())
        .map(|i| StepContext {
            epoch: 1,
            mask_seed: i as u64,
        })
        .collect();
    loss_total_with(model, batch, cfg, &ctx, None)
}
