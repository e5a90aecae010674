//! Finite-difference gradient oracles.

use super::tensor::Tensor;

/// Central difference `(f(θ+h) − f(θ−h)) / 2h` for every coordinate of `param`.
pub fn finite_diff<F: FnMut(&Tensor) -> f64>(mut loss_fn: F, param: &Tensor, step: f64) -> Tensor {
    assert!(step > 0.0, "finite_diff step must be positive");
    let mut probe = param.clone();
    let mut out = vec![0.0; param.numel()];
    for (i, o) in out.iter_mut().enumerate() {
        let orig = param.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = loss_fn(&probe);
        probe.data_mut()[i] = orig - step;
        let fm = loss_fn(&probe);
        probe.data_mut()[i] = orig;
        *o = (fp - fm) / (2.0 * step);
    }
    Tensor::new(param.shape().to_vec(), out).expect("same shape as param")
}

/// `|a − n| / max(1e-8, |a| + |n|)`.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| rel_error(*a, *n))
        .fold(0.0, f64::max)
}

/// One evaluation of a vector of objectives, each with the branch signature
/// of the computation that produced it.
#[derive(Clone, Debug)]
pub struct Probe {
    pub values: Vec<f64>,
    pub signatures: Vec<u64>,
}

impl Probe {
    /// Every objective shares one signature.
    pub fn new(values: Vec<f64>, signature: u64) -> Self {
        let signatures = vec![signature; values.len()];
        Probe { values, signatures }
    }
}

// Seven-point central stencil (sixth order): offsets in units of h.
const OFFSETS: [f64; 6] = [3.0, 2.0, 1.0, -1.0, -2.0, -3.0];

fn stencil7(p: &[Probe], j: usize, h: f64) -> f64 {
    // Pair symmetric probes before weighting to limit cancellation.
    let d3 = p[0].values[j] - p[5].values[j];
    let d2 = p[1].values[j] - p[4].values[j];
    let d1 = p[2].values[j] - p[3].values[j];
    (45.0 * d1 - 9.0 * d2 + d3) / (60.0 * h)
}

fn stable(p: &[Probe], base: &Probe, j: usize) -> bool {
    p.iter().all(|q| q.signatures[j] == base.signatures[j])
}

const MARGIN: f64 = 4.0;

/// Third-order one-sided estimate from the side of `p` that stays on the base
/// piece, with its rounding bound.
fn one_sided(p: &[Probe], base: &Probe, j: usize, h: f64) -> Option<(f64, f64)> {
    let f0 = base.values[j];
    let (side, sign) = if stable(&p[..3], base, j) {
        (&p[..3], 1.0)
    } else if stable(&p[3..], base, j) {
        (&p[3..], -1.0)
    } else {
        return None;
    };
    // side = f(±3h), f(±2h), f(±h)
    let (f3, f2, f1) = (side[0].values[j], side[1].values[j], side[2].values[j]);
    let d = sign * (18.0 * (f1 - f0) - 9.0 * (f2 - f0) + 2.0 * (f3 - f0)) / (6.0 * h);
    let scale = side.iter().map(|q| q.values[j].abs()).fold(f0.abs(), f64::max);
    Some((d, MARGIN * f64::EPSILON * 40.0 * scale / (6.0 * h)))
}

/// Bound on the rounding error of a seven-point estimate at step `h` whose
/// probe values are at most `scale` in magnitude: `margin · ε · Σ|w| · scale / 60h`.
pub fn stencil_noise(scale: f64, h: f64) -> f64 {
    MARGIN * f64::EPSILON * 110.0 * scale / (60.0 * h)
}

/// Step schedule of [`finite_diff_piecewise_with`].
#[derive(Clone, Debug, PartialEq)]
pub struct FdSteps {
    /// Central steps, largest first.
    pub steps: Vec<f64>,
    /// Larger steps, smallest first, that may replace an estimate dominated by
    /// rounding noise.
    pub coarse_steps: Vec<f64>,
    /// Coarse steps are tried when the rounding bound exceeds this fraction
    /// of the estimate.
    pub noise_ratio: f64,
}

impl FdSteps {
    pub fn new(steps: &[f64]) -> Self {
        FdSteps {
            steps: steps.to_vec(),
            coarse_steps: Vec::new(),
            noise_ratio: f64::INFINITY,
        }
    }
}

/// Derivative estimates for a piecewise-smooth function.
///
/// For each coordinate and objective the seven-point central stencil (sixth
/// order) is tried at each step (largest first) and accepted as soon as every
/// probe shares the base point's branch signature for that objective, i.e. no
/// ReLU, hinge, clamp, or argmax decision it depends on flipped. If none
/// qualifies, a second-order one-sided stencil on the side that stays on the
/// base piece is used; the plain central difference at the smallest step is
/// the last resort.
///
/// Returns `out[k][i] = d values[k] / d θ_i`.
pub fn finite_diff_piecewise<F>(eval: F, theta: &[f64], steps: &[f64]) -> Vec<Vec<f64>>
where
    F: FnMut(&[f64]) -> Probe,
{
    finite_diff_piecewise_with(eval, theta, &FdSteps::new(steps))
}

/// [`finite_diff_piecewise`] with rounding-noise refinement: an estimate whose
/// rounding bound is large relative to its value is replaced by the estimate at
/// the next larger coarse step (central, or third-order one-sided when only one
/// side stays on the base piece) if the two agree within that bound. Visible
/// truncation error or a branch change on both sides stops the refinement.
pub fn finite_diff_piecewise_with<F>(mut eval: F, theta: &[f64], sched: &FdSteps) -> Vec<Vec<f64>>
where
    F: FnMut(&[f64]) -> Probe,
{
    let steps = &sched.steps;
    assert!(!steps.is_empty() && steps.iter().chain(&sched.coarse_steps).all(|s| *s > 0.0));
    let base = eval(theta);
    let k = base.values.len();
    assert_eq!(base.signatures.len(), k, "one signature per objective");
    let mut out = vec![vec![0.0; theta.len()]; k];
    let mut x = theta.to_vec();

    for i in 0..theta.len() {
        let orig = theta[i];
        let mut at = |h: f64| -> Vec<Probe> {
            let ps = OFFSETS
                .iter()
                .map(|o| {
                    x[i] = orig + o * h;
                    eval(&x)
                })
                .collect();
            x[i] = orig;
            ps
        };
        let scale = |p: &[Probe], j: usize| p.iter().map(|q| q.values[j].abs()).fold(base.values[j].abs(), f64::max);
        let flat = |p: &[Probe], j: usize| p.iter().all(|q| q.values[j] == base.values[j]);

        // (estimate, rounding bound, step) per objective.
        let mut est: Vec<Option<(f64, f64, f64)>> = vec![None; k];
        let mut last = Vec::new();
        for &h in steps {
            let probes = at(h);
            for j in 0..k {
                if est[j].is_none() && stable(&probes, &base, j) {
                    let noise = if flat(&probes, j) { 0.0 } else { stencil_noise(scale(&probes, j), h) };
                    est[j] = Some((stencil7(&probes, j, h), noise, h));
                }
            }
            last = probes;
            if est.iter().all(Option::is_some) {
                break;
            }
        }

        let noisy = |e: &Option<(f64, f64, f64)>, h: f64| {
            e.is_some_and(|(v, n, at)| at < h && n > 0.0 && n > sched.noise_ratio * v.abs())
        };
        for &h in &sched.coarse_steps {
            let open: Vec<usize> = (0..k).filter(|&j| noisy(&est[j], h)).collect();
            if open.is_empty() {
                continue;
            }
            let probes = at(h);
            for j in open {
                let (v, n, _) = est[j].unwrap();
                let cand = if stable(&probes, &base, j) {
                    Some((stencil7(&probes, j, h), stencil_noise(scale(&probes, j), h)))
                } else {
                    one_sided(&probes, &base, j, h)
                };
                est[j] = match cand {
                    Some((c, cn)) if (c - v).abs() <= n && cn < n => Some((c, cn, h)),
                    // Keep the estimate; stop refining this objective.
                    _ => Some((v, 0.0, h)),
                };
            }
        }

        let h = *steps.last().unwrap();
        for (j, col) in out.iter_mut().enumerate() {
            col[i] = est[j].map(|(v, _, _)| v).unwrap_or_else(|| {
                // last = probes at ±h, ±2h, ±3h of the smallest step.
                let (p2, p1, m1, m2) = (&last[1], &last[2], &last[3], &last[4]);
                let same = |p: &Probe| p.signatures[j] == base.signatures[j];
                let f0 = base.values[j];
                if same(p1) && same(p2) {
                    (4.0 * (p1.values[j] - f0) - (p2.values[j] - f0)) / (2.0 * h)
                } else if same(m1) && same(m2) {
                    (4.0 * (f0 - m1.values[j]) - (f0 - m2.values[j])) / (2.0 * h)
                } else {
                    (p1.values[j] - m1.values[j]) / (2.0 * h)
                }
            });
        }
    }
    out
}
