//! Gradient verification of every loss term and the joint objective against
//! finite differences on small random instances.

use std::fmt;
use std::hash::{DefaultHasher, Hash, Hasher};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{cosine_matrix, BBox};
use crate::data::{mask_tokens_with, Labels, Sample};
use crate::error::Result;
use crate::losses::{loss_total_with, sample_terms, LossConfig, LossWeights, Scope, StepContext, Term};
use crate::model::{MentionKind, MentionSpan, Model, ModelConfig, NarrationTokens, ParamStore, RegionSet};
use crate::numerics::{finite_diff_piecewise_with, rel_error, FdSteps, Probe, Tape, Tensor, Var};

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_STEPS: [f64; 3] = [1e-3, 1e-4, 1e-5];
pub const COARSE_STEPS: [f64; 3] = [1e-3, 1e-2, 1e-1];
/// Rounding-bound to estimate ratio above which coarse steps are tried.
pub const NOISE_RATIO: f64 = 1e-6;

/// Deliberate corruption of an analytic gradient, used to confirm that the
/// check can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    FlipSign(Term),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub seeds: Vec<u64>,
    /// Mention counts of the checked instances; every instance has 3 regions.
    pub mention_counts: Vec<usize>,
    pub d_embed: usize,
    pub tolerance: f64,
    pub steps: Vec<f64>,
    pub threads: usize,
    pub fault: Option<Fault>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            seeds: (0..10).collect(),
            mention_counts: vec![2, 3],
            d_embed: 8,
            tolerance: DEFAULT_TOLERANCE,
            steps: DEFAULT_STEPS.to_vec(),
            threads: 1,
            fault: None,
        }
    }
}

pub const N_REGIONS: usize = 3;
const D_REGION: usize = 6;
const VOCAB: usize = 16;
const N_TOKENS: usize = 10;

/// A labeled/unlabeled pair of random samples over one model, with the loss
/// configuration under which both are checked.
#[derive(Clone, Debug)]
pub struct Instance {
    pub model: Model,
    pub batch: Vec<Sample>,
    pub ctx: Vec<StepContext>,
    pub cfg: LossConfig,
}

fn random_sample(id: String, n_mentions: usize, labeled: bool, rng: &mut ChaCha8Rng) -> Sample {
    let mut boxes = Vec::new();
    for _ in 0..N_REGIONS {
        let w = rng.random_range(0.15..0.4);
        let h = rng.random_range(0.15..0.4);
        boxes.push(BBox::new(rng.random_range(0.0..1.0 - w), rng.random_range(0.0..1.0 - h), w, h));
    }
    let feats: Vec<f64> = (0..N_REGIONS * D_REGION).map(|_| rng.random_range(-1.0..1.0)).collect();
    let regions = RegionSet {
        features: Tensor::new(vec![N_REGIONS, D_REGION], feats).expect("shape"),
        boxes: boxes.clone(),
        class_ids: (0..N_REGIONS).collect(),
    };
    let token_ids: Vec<usize> = (0..N_TOKENS).map(|_| rng.random_range(3..VOCAB)).collect();
    let mentions: Vec<MentionSpan> = (0..n_mentions)
        .map(|m| {
            let start = 2 * m;
            let kind = if m % 2 == 0 { MentionKind::NounPhrase } else { MentionKind::Pronoun };
            MentionSpan::new(start, start + 1 + (m % 2 == 0) as usize, kind)
        })
        .collect();
    // Chains {0, 2} and {1, 3} where the mentions exist; two mentions stay
    // non-coreferent.
    let chains: Vec<Vec<usize>> = [vec![0, 2], vec![1, 3]].into_iter().filter(|c| c[1] < n_mentions).collect();
    let mention_boxes = (0..n_mentions)
        .map(|m| {
            let b = boxes[m % N_REGIONS];
            Some(BBox::new(b.x + 0.02, b.y - 0.01, b.w * 0.9, b.h * 1.05))
        })
        .collect();
    let head_classes = Some((0..n_mentions).map(|m| Some(m % N_REGIONS)).collect());
    Sample {
        id,
        regions,
        narration: NarrationTokens { token_ids, mentions },
        labels: labeled.then_some(Labels { chains, mention_boxes }),
        head_classes,
    }
}

/// Threshold halfway across the widest gap between sorted pairwise cosines,
/// so that the pseudo-coreference sets are stable under small perturbations.
fn gap_threshold(fused: &Tensor) -> f64 {
    let c = cosine_matrix(fused);
    let n = fused.rows();
    let mut v: Vec<f64> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| c[i][j]).collect();
    if v.len() < 2 {
        return 0.5;
    }
    v.sort_by(f64::total_cmp);
    let k = (1..v.len()).max_by(|&a, &b| (v[a] - v[a - 1]).total_cmp(&(v[b] - v[b - 1]))).unwrap();
    0.5 * (v[k] + v[k - 1])
}

pub fn build_instance(seed: u64, n_mentions: usize, d_embed: usize) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1000) + n_mentions as u64);
    let model = Model::new(ModelConfig {
        d_region: D_REGION,
        d_embed,
        vocab_size: VOCAB,
        n_text_layers: 1,
        n_fusion_layers: 1,
        n_visual_layers: 1,
        n_heads: 2,
        ffn_hidden: 2 * d_embed,
        init_std: 0.3,
        seed,
        ..ModelConfig::default()
    })?;
    let batch = vec![
        random_sample(format!("gc{seed}_labeled"), n_mentions, true, &mut rng),
        random_sample(format!("gc{seed}_unlabeled"), n_mentions, false, &mut rng),
    ];
    let mut cfg = LossConfig {
        // Below 1/|regions|, so every mention is pseudo-grounded.
        ground_thresh: 0.3,
        // Squared distances of unit vectors lie in [0, 4]: the hinge stays open.
        alpha: 4.0,
        ..LossConfig::default()
    };
    if n_mentions > 0 {
        let out = model.infer(&batch[1].regions, &batch[1].narration)?;
        cfg.coref_pseudo_thresh = gap_threshold(&out.fused);
    }
    // Mask draws that hide at least one token.
    let ctx = batch
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut k = 0u64;
            loop {
                let mask_seed = seed * 7919 + i as u64 * 104_729 + k;
                let mut r = ChaCha8Rng::seed_from_u64(mask_seed);
                if !mask_tokens_with(&s.narration.token_ids, cfg.mlm_mask_prob, &mut r).1.is_empty() {
                    break StepContext { epoch: 1, mask_seed };
                }
                k += 1;
            }
        })
        .collect();
    Ok(Instance { model, batch, ctx, cfg })
}

pub fn set_flat(params: &mut ParamStore, theta: &[f64]) {
    let mut off = 0;
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let d = params.get_mut(id).data_mut();
        d.copy_from_slice(&theta[off..off + d.len()]);
        off += d.len();
    }
}

fn flat_grad(store: &ParamStore) -> Vec<f64> {
    store
        .iter()
        .flat_map(|(_, t)| t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect()
}

/// Scope-averaged value of every term followed by the weighted total, computed
/// from per-sample tapes, and the combined branch signature.
pub fn probe(model: &Model, inst: &Instance) -> Probe {
    let n_l = inst.batch.iter().filter(|s| s.is_labeled()).count();
    let sizes = [n_l, inst.batch.len() - n_l, inst.batch.len()];
    let k = Term::ALL.len();
    let mut values = vec![0.0; k + 1];
    let mut hashers: Vec<DefaultHasher> = (0..=k).map(|_| DefaultHasher::new()).collect();
    for (s, ctx) in inst.batch.iter().zip(&inst.ctx) {
        let mut tape = Tape::new();
        let mut b = model.binder(false);
        let terms = sample_terms(&mut tape, &mut b, model, s, &inst.cfg, *ctx).expect("instance is valid");
        tape.branch_signature().hash(&mut hashers[k]);
        let present: Vec<(Term, Var)> = Term::ALL.iter().filter_map(|&t| terms.get(t).map(|v| (t, v))).collect();
        let sigs = tape.branch_signatures_of(&present.iter().map(|p| p.1).collect::<Vec<_>>());
        for (&(t, v), sig) in present.iter().zip(sigs) {
            let size = match t.scope() {
                Scope::Labeled => sizes[0],
                Scope::Unlabeled => sizes[1],
                Scope::All => sizes[2],
            };
            values[t.index()] += tape.value(v).item() / size as f64;
            sig.hash(&mut hashers[t.index()]);
        }
    }
    values[k] = Term::ALL.iter().map(|&t| inst.cfg.loss_weights.get(t) * values[t.index()]).sum();
    Probe {
        values,
        signatures: hashers.into_iter().map(|h| h.finish()).collect(),
    }
}

/// Analytic gradient of one term (or the total when `term` is `None`).
pub fn analytic(inst: &Instance, term: Option<Term>) -> Result<Vec<f64>> {
    let mut cfg = inst.cfg.clone();
    if let Some(t) = term {
        cfg.loss_weights = LossWeights::zeros();
        cfg.loss_weights.set(t, 1.0);
    }
    let mut grads = inst.model.params().clone();
    grads.zero_grad();
    loss_total_with(&inst.model, &inst.batch, &cfg, &inst.ctx, Some(&mut grads))?;
    Ok(flat_grad(&grads))
}

/// Worst relative error of one objective, or `None` when its gradient is
/// identically zero on the instance and there is nothing to compare.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermResult {
    pub name: String,
    pub max_rel_error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub seed: u64,
    pub n_mentions: usize,
    pub n_params: usize,
    pub terms: Vec<TermResult>,
}

pub fn check_instance(inst: &Instance, steps: &[f64], fault: Option<Fault>) -> Result<Vec<TermResult>> {
    let theta = inst.model.params().flatten();
    let mut work = inst.model.clone();
    let sched = FdSteps {
        steps: steps.to_vec(),
        coarse_steps: COARSE_STEPS.to_vec(),
        noise_ratio: NOISE_RATIO,
    };
    let numeric = finite_diff_piecewise_with(
        |x| {
            set_flat(work.params_mut(), x);
            probe(&work, inst)
        },
        &theta,
        &sched,
    );
    let mut out = Vec::new();
    let objectives = Term::ALL.iter().map(|&t| Some(t)).chain(std::iter::once(None));
    for (k, term) in objectives.enumerate() {
        let mut a = analytic(inst, term)?;
        if let (Some(Fault::FlipSign(bad)), Some(t)) = (fault, term) {
            if bad == t {
                a.iter_mut().for_each(|x| *x = -*x);
            }
        }
        if let Some(Fault::FlipSign(bad)) = fault {
            if term.is_none() {
                let b = analytic(inst, Some(bad))?;
                let w = inst.cfg.loss_weights.get(bad);
                a.iter_mut().zip(&b).for_each(|(x, g)| *x -= 2.0 * w * g);
            }
        }
        let n = &numeric[k];
        let err = if a.iter().all(|&x| x == 0.0) && n.iter().all(|&x| x.abs() < 1e-9) {
            None
        } else {
            Some(a.iter().zip(n).map(|(&x, &y)| rel_error(x, y)).fold(0.0, f64::max))
        };
        out.push(TermResult {
            name: term.map_or("total".to_string(), |t| t.name().to_string()),
            max_rel_error: err,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub instances: Vec<InstanceResult>,
}

impl GradcheckReport {
    /// Worst error per objective over all instances; `None` if never checked.
    pub fn worst(&self) -> Vec<TermResult> {
        let names: Vec<String> = self.instances.first().map(|i| i.terms.iter().map(|t| t.name.clone()).collect()).unwrap_or_default();
        names
            .into_iter()
            .enumerate()
            .map(|(k, name)| {
                let max_rel_error = self
                    .instances
                    .iter()
                    .filter_map(|i| i.terms[k].max_rel_error)
                    .fold(None, |acc: Option<f64>, e| Some(acc.map_or(e, |a| a.max(e))));
                TermResult { name, max_rel_error }
            })
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.instances
            .iter()
            .flat_map(|i| &i.terms)
            .all(|t| t.max_rel_error.is_none_or(|e| e <= self.tolerance))
    }

    /// True when every objective was compared on at least one instance.
    pub fn covers_every_term(&self) -> bool {
        self.worst().iter().all(|t| t.max_rel_error.is_some())
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut counts: Vec<usize> = self.instances.iter().map(|i| i.n_mentions).collect();
        counts.sort_unstable();
        counts.dedup();
        write!(f, "{:<8}", "loss")?;
        for c in &counts {
            write!(f, " {:>14}", format!("{c}m/{N_REGIONS}r"))?;
        }
        writeln!(f, " {:>6}", "status")?;
        let names: Vec<String> = self.worst().into_iter().map(|t| t.name).collect();
        for (k, name) in names.iter().enumerate() {
            write!(f, "{:<8}", name)?;
            let mut ok = true;
            for &c in &counts {
                let worst = self
                    .instances
                    .iter()
                    .filter(|i| i.n_mentions == c)
                    .filter_map(|i| i.terms[k].max_rel_error)
                    .fold(None, |acc: Option<f64>, e| Some(acc.map_or(e, |a| a.max(e))));
                match worst {
                    Some(e) => {
                        ok &= e <= self.tolerance;
                        write!(f, " {:>14.3e}", e)?;
                    }
                    None => write!(f, " {:>14}", "n/a")?,
                }
            }
            writeln!(f, " {:>6}", if ok { "ok" } else { "FAIL" })?;
        }
        write!(
            f,
            "{} instances, tolerance {:e}: {}",
            self.instances.len(),
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let jobs: Vec<(u64, usize)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| cfg.mention_counts.iter().map(move |&m| (s, m)))
        .collect();
    let run = |&(seed, n): &(u64, usize)| -> Result<InstanceResult> {
        let inst = build_instance(seed, n, cfg.d_embed)?;
        Ok(InstanceResult {
            seed,
            n_mentions: n,
            n_params: inst.model.params().num_scalars(),
            terms: check_instance(&inst, &cfg.steps, cfg.fault)?,
        })
    };
    let results: Vec<Result<InstanceResult>> = if cfg.threads <= 1 {
        jobs.iter().map(run).collect()
    } else {
        let workers = cfg.threads.min(jobs.len().max(1));
        let mut slots: Vec<Option<Result<InstanceResult>>> = (0..jobs.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let (run, jobs) = (&run, &jobs);
                    scope.spawn(move || (w..jobs.len()).step_by(workers).map(|i| (i, run(&jobs[i]))).collect::<Vec<_>>())
                })
                .collect();
            for h in handles {
                for (i, r) in h.join().expect("gradcheck worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots.into_iter().map(|s| s.expect("every job ran")).collect()
    };
    Ok(GradcheckReport {
        tolerance: cfg.tolerance,
        instances: results.into_iter().collect::<Result<_>>()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(fault: Option<Fault>) -> GradcheckConfig {
        GradcheckConfig {
            seeds: vec![3],
            mention_counts: vec![3],
            d_embed: 4,
            fault,
            ..GradcheckConfig::default()
        }
    }

    #[test]
    fn clean_build_passes() {
        let r = run_gradcheck(&quick(None)).unwrap();
        assert!(r.passed(), "{r}");
        assert!(r.covers_every_term(), "{r}");
    }

    #[test]
    fn sign_flip_is_detected() {
        let r = run_gradcheck(&quick(Some(Fault::FlipSign(Term::Gd)))).unwrap();
        assert!(!r.passed());
        let w = r.worst();
        assert!(w.iter().find(|t| t.name == "gd").unwrap().max_rel_error.unwrap() > 0.5);
        assert!(w.iter().find(|t| t.name == "total").unwrap().max_rel_error.unwrap() > 1e-4);
        assert!(w.iter().find(|t| t.name == "cr").unwrap().max_rel_error.unwrap() <= 1e-4);
    }

    #[test]
    fn mentionless_sample_reports_skipped_terms() {
        let cfg = GradcheckConfig {
            mention_counts: vec![0],
            ..quick(None)
        };
        let r = run_gradcheck(&cfg).unwrap();
        assert!(r.passed(), "{r}");
        let w = r.worst();
        for name in ["cr", "gd", "bbr", "pcr", "pgd", "itc"] {
            assert_eq!(w.iter().find(|t| t.name == name).unwrap().max_rel_error, None, "{name}");
        }
        assert!(w.iter().find(|t| t.name == "mlm").unwrap().max_rel_error.is_some());
        assert!(r.to_string().contains("n/a"));
    }
}
