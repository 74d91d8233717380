//! Logit-level alignment: RBF kernel, median bandwidth and the unbiased
//! squared MMD estimator.

use crate::autodiff::{Function, Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Lower bound applied to the median-heuristic bandwidth.
pub const SIGMA_FLOOR: f64 = 1e-8;

/// Source and target logits of one training step, each `rows × classes`.
#[derive(Debug, Clone)]
pub struct LogitBatchPair<'a> {
    source: &'a [f64],
    target: &'a [f64],
    classes: usize,
}

impl<'a> LogitBatchPair<'a> {
    pub fn new(source: &'a [f64], target: &'a [f64], classes: usize) -> Result<Self> {
        if classes == 0 || source.len() % classes != 0 || target.len() % classes != 0 {
            return Err(Error::invalid(
                "logit_batch_pair",
                format!("lengths {} / {} not divisible by {classes} classes", source.len(), target.len()),
            ));
        }
        Ok(Self {
            source,
            target,
            classes,
        })
    }

    pub fn from_tensors(source: &'a Tensor, target: &'a Tensor) -> Result<Self> {
        let (ss, ts) = (source.shape(), target.shape());
        if ss.len() != 2 || ts.len() != 2 || ss[1] != ts[1] {
            return Err(Error::shape("logit_batch_pair", ss, ts));
        }
        Self::new(source.data(), target.data(), ss[1])
    }

    pub fn n(&self) -> usize {
        self.source.len() / self.classes
    }

    pub fn m(&self) -> usize {
        self.target.len() / self.classes
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    fn source_row(&self, i: usize) -> &[f64] {
        &self.source[i * self.classes..][..self.classes]
    }

    fn target_row(&self, j: usize) -> &[f64] {
        &self.target[j * self.classes..][..self.classes]
    }

    fn pooled_row(&self, i: usize) -> &[f64] {
        if i < self.n() {
            self.source_row(i)
        } else {
            self.target_row(i - self.n())
        }
    }
}

/// RBF bandwidth, never below [`SIGMA_FLOOR`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bandwidth(f64);

impl Bandwidth {
    pub fn new(sigma: f64) -> Result<Self> {
        if !sigma.is_finite() || sigma <= 0.0 {
            return Err(Error::invalid("bandwidth", format!("sigma = {sigma}")));
        }
        Ok(Self(sigma.max(SIGMA_FLOOR)))
    }

    pub fn sigma(self) -> f64 {
        self.0
    }
}

fn sq_dist(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Median Euclidean distance over all unordered distinct pairs of the pooled rows.
pub fn median_bandwidth(pair: &LogitBatchPair<'_>) -> Result<Bandwidth> {
    let total = pair.n() + pair.m();
    if total < 2 {
        return Err(Error::invalid("median_bandwidth", format!("need at least 2 points, got {total}")));
    }
    let mut dists = Vec::with_capacity(total * (total - 1) / 2);
    for i in 0..total {
        for j in i + 1..total {
            dists.push(sq_dist(pair.pooled_row(i), pair.pooled_row(j)).sqrt());
        }
    }
    dists.sort_by(f64::total_cmp);
    let k = dists.len();
    let median = if k % 2 == 1 {
        dists[k / 2]
    } else {
        0.5 * (dists[k / 2 - 1] + dists[k / 2])
    };
    Ok(Bandwidth(median.max(SIGMA_FLOOR)))
}

/// `exp(-‖u − v‖² / (2σ²))`.
pub fn rbf_kernel(u: &[f64], v: &[f64], sigma: f64) -> f64 {
    (-sq_dist(u, v) / (2.0 * sigma * sigma)).exp()
}

/// Value of the unbiased squared MMD (no graph).
pub fn mmd2_value(pair: &LogitBatchPair<'_>, bw: Bandwidth) -> Result<f64> {
    let (n, m) = (pair.n(), pair.m());
    if n < 2 || m < 2 {
        return Err(Error::SkippedAlignment { n, m });
    }
    let s = bw.sigma();
    let mut kss = 0.0;
    for i in 0..n {
        for i2 in i + 1..n {
            kss += rbf_kernel(pair.source_row(i), pair.source_row(i2), s);
        }
    }
    let mut ktt = 0.0;
    for j in 0..m {
        for j2 in j + 1..m {
            ktt += rbf_kernel(pair.target_row(j), pair.target_row(j2), s);
        }
    }
    let mut kst = 0.0;
    for i in 0..n {
        for j in 0..m {
            kst += rbf_kernel(pair.source_row(i), pair.target_row(j), s);
        }
    }
    let (nf, mf) = (n as f64, m as f64);
    Ok(2.0 * kss / (nf * (nf - 1.0)) + 2.0 * ktt / (mf * (mf - 1.0)) - 2.0 * kst / (nf * mf))
}

struct Mmd2Backward {
    sigma: f64,
}

impl Function for Mmd2Backward {
    fn name(&self) -> &'static str {
        "mmd2_unbiased"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (s, t) = (inputs[0], inputs[1]);
        let c = s.shape()[1];
        let (n, m) = (s.shape()[0], t.shape()[0]);
        let (nf, mf) = (n as f64, m as f64);
        let inv_s2 = 1.0 / (self.sigma * self.sigma);
        let g0 = grad[0];
        let row = |x: &Tensor, i: usize| x.data()[i * c..(i + 1) * c].to_vec();
        let mut gs = vec![0.0; n * c];
        let mut gt = vec![0.0; m * c];

        // ∂k(u,v)/∂u = -k(u,v)·(u − v)/σ²
        let within = |x: &Tensor, rows: usize, coef: f64, out: &mut [f64]| {
            for i in 0..rows {
                let u = row(x, i);
                for i2 in i + 1..rows {
                    let v = row(x, i2);
                    let k = rbf_kernel(&u, &v, self.sigma);
                    for d in 0..c {
                        // each unordered pair appears twice in the ordered sum
                        let gval = -2.0 * coef * k * (u[d] - v[d]) * inv_s2;
                        out[i * c + d] += gval;
                        out[i2 * c + d] -= gval;
                    }
                }
            }
        };
        within(s, n, g0 / (nf * (nf - 1.0)), &mut gs);
        within(t, m, g0 / (mf * (mf - 1.0)), &mut gt);
        let cross = -2.0 * g0 / (nf * mf);
        for i in 0..n {
            let u = row(s, i);
            for j in 0..m {
                let v = row(t, j);
                let k = rbf_kernel(&u, &v, self.sigma);
                for d in 0..c {
                    let gval = -cross * k * (u[d] - v[d]) * inv_s2;
                    gs[i * c + d] += gval;
                    gt[j * c + d] -= gval;
                }
            }
        }
        vec![Some(gs), Some(gt)]
    }
}

/// Unbiased squared MMD between source logits `s` (`n×C`) and target logits `t` (`m×C`).
///
/// Differentiable in both inputs; the bandwidth is a constant of the node.
/// Returns [`Error::SkippedAlignment`] when either side has fewer than two rows.
pub fn mmd2_unbiased(g: &mut Graph, s: Var, t: Var, bw: Bandwidth) -> Result<Var> {
    let value = {
        let pair = LogitBatchPair::from_tensors(g.value(s), g.value(t))?;
        mmd2_value(&pair, bw)?
    };
    Ok(g.custom(
        &[s, t],
        Tensor::scalar(value),
        Box::new(Mmd2Backward { sigma: bw.sigma() }),
    ))
}

/// Median-heuristic bandwidth followed by the unbiased MMD².
///
/// Batches too small for the estimator yield a constant zero. With
/// `clamp_at_zero`, negative estimates are replaced by a constant zero.
pub fn alignment_penalty(g: &mut Graph, s: Var, t: Var, clamp_at_zero: bool) -> Result<Var> {
    alignment_penalty_with(g, s, t, None, clamp_at_zero)
}

/// [`alignment_penalty`] with an optional fixed bandwidth in place of the
/// median heuristic (finite-difference checks hold σ constant this way).
pub fn alignment_penalty_with(
    g: &mut Graph,
    s: Var,
    t: Var,
    bandwidth: Option<Bandwidth>,
    clamp_at_zero: bool,
) -> Result<Var> {
    let bw = {
        let pair = LogitBatchPair::from_tensors(g.value(s), g.value(t))?;
        if pair.n() < 2 || pair.m() < 2 {
            return Ok(g.constant(Tensor::scalar(0.0)));
        }
        match bandwidth {
            Some(b) => b,
            None => median_bandwidth(&pair)?,
        }
    };
    let v = mmd2_unbiased(g, s, t, bw)?;
    if clamp_at_zero && g.value(v).item() < 0.0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    Ok(v)
}
