//! Time-dependent arrival scaling profile `alpha(t)` over one cycle.
//!
//! The arrival rate during the cycle is `lambda(t) = lambda0 * alpha(t)` with
//! the normalization `integral_0^C alpha = C`. The profile is built from the
//! expected cycle arrival times of CVs: histogram, optional circular KDE
//! smoothing at low penetration, and a greedy top-down piecewise-constant fit
//! on the binned distribution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{fl, rem_euclid, Scalar};

/// Piecewise-constant arrival scaling over `[0, C]`.
///
/// Breakpoints `tau[0] = 0 < tau[1] < ... < tau[M] = C`, segment values
/// `alpha[m]` on `[tau[m], tau[m+1])`, normalized so the values integrate to
/// the cycle length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrivalProfile<F> {
    #[serde(rename = "C")]
    c: F,
    tau: Vec<F>,
    alpha: Vec<F>,
}

impl<F: Scalar> ArrivalProfile<F> {
    /// Builds a profile from raw breakpoints and values, then rescales the
    /// values so the integral equals the cycle length exactly.
    pub fn new(c: F, tau: Vec<F>, alpha: Vec<F>) -> Result<Self> {
        if c <= F::zero() {
            return Err(Error::Domain("cycle length must be positive".into()));
        }
        if tau.len() != alpha.len() + 1 || alpha.is_empty() {
            return Err(Error::Domain("breakpoint/value lengths inconsistent".into()));
        }
        if tau[0] != F::zero() || (*tau.last().unwrap() - c).abs() > fl::<F>(1e-9) * c {
            return Err(Error::Domain("breakpoints must span [0, C]".into()));
        }
        if tau.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Domain("breakpoints must be strictly increasing".into()));
        }
        if alpha.iter().any(|&a| a < F::zero()) {
            return Err(Error::Domain("profile values must be nonnegative".into()));
        }
        let mut profile = ArrivalProfile { c, tau, alpha };
        profile.renormalize()?;
        Ok(profile)
    }

    /// Uniform profile `alpha(t) = 1`, the fallback when a phase has no CVs.
    pub fn uniform(c: F) -> Self {
        ArrivalProfile { c, tau: vec![F::zero(), c], alpha: vec![F::one()] }
    }

    fn renormalize(&mut self) -> Result<()> {
        let total = self.integral();
        if total <= F::zero() {
            return Err(Error::Domain("profile integrates to zero".into()));
        }
        let scale = self.c / total;
        for a in &mut self.alpha {
            *a = *a * scale;
        }
        Ok(())
    }

    fn integral(&self) -> F {
        self.alpha
            .iter()
            .zip(self.tau.windows(2))
            .map(|(&a, w)| a * (w[1] - w[0]))
            .sum()
    }

    pub fn cycle(&self) -> F {
        self.c
    }

    /// Number of constant segments `M`.
    pub fn segments(&self) -> usize {
        self.alpha.len()
    }

    pub fn breakpoints(&self) -> &[F] {
        &self.tau
    }

    pub fn values(&self) -> &[F] {
        &self.alpha
    }

    pub fn max_value(&self) -> F {
        self.alpha.iter().fold(F::zero(), |m, &a| m.max(a))
    }

    /// Index `m` of the segment containing `t` (right-open, last segment
    /// closed at `C`).
    pub fn segment_index(&self, t: F) -> usize {
        let m = self.tau[1..self.tau.len() - 1].iter().position(|&b| t < b);
        m.unwrap_or(self.alpha.len() - 1)
    }

    pub fn value_at(&self, t: F) -> F {
        self.alpha[self.segment_index(t)]
    }

    /// Exact integral of the profile over `[0, t]`.
    pub fn cumulative(&self, t: F) -> Result<F> {
        if t < F::zero() || t > self.c {
            return Err(Error::Domain(format!(
                "cumulative query t = {t} outside [0, {}]",
                self.c
            )));
        }
        let mut acc = F::zero();
        for (m, w) in self.tau.windows(2).enumerate() {
            if t >= w[1] {
                acc = acc + self.alpha[m] * (w[1] - w[0]);
            } else {
                acc = acc + self.alpha[m] * (t - w[0]);
                break;
            }
        }
        Ok(acc)
    }
}

/// Expected cycle arrival time: folds an absolute expected arrival time into
/// cycle-relative time for cycle length `c` and reference shift `dphi`.
pub fn expected_cycle_arrival_time<F: Scalar>(t_e: F, c: F, dphi: F) -> Result<F> {
    if c <= F::zero() {
        return Err(Error::Domain("cycle length must be positive".into()));
    }
    if dphi < F::zero() || dphi >= c {
        return Err(Error::Domain(format!("reference shift {dphi} outside [0, {c})")));
    }
    Ok(rem_euclid(t_e - dphi, c))
}

/// Binned distribution of expected cycle arrival times, normalized so the
/// heights integrate to the cycle length.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleHistogram<F> {
    c: F,
    bin: F,
    heights: Vec<F>,
    samples: usize,
}

impl<F: Scalar> CycleHistogram<F> {
    pub fn cycle(&self) -> F {
        self.c
    }

    pub fn bin_width(&self) -> F {
        self.bin
    }

    pub fn heights(&self) -> &[F] {
        &self.heights
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    /// Writes the histogram as `t_s,alpha_h` rows.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t_s,alpha_h")?;
        for (i, h) in self.heights.iter().enumerate() {
            let t = self.bin * F::from_usize(i).unwrap();
            writeln!(w, "{t},{h}")?;
        }
        Ok(())
    }
}

/// Bins cycle arrival times into a normalized histogram.
///
/// Heights are scaled so `sum(heights) * bin = C`; with every sample in one
/// bin the histogram is a spike of mass `C`.
pub fn build_histogram<F: Scalar>(t_ec: &[F], c: F, bin: F) -> Result<CycleHistogram<F>> {
    if c <= F::zero() || bin <= F::zero() || bin > c {
        return Err(Error::Domain("invalid cycle length or bin width".into()));
    }
    if t_ec.is_empty() {
        return Err(Error::Domain("no arrivals to bin".into()));
    }
    let n_bins = (c / bin).to_f64().unwrap().round().max(1.0) as usize;
    let width = c / F::from_usize(n_bins).unwrap();
    let mut counts = vec![0usize; n_bins];
    for &t in t_ec {
        if t < F::zero() || t >= c {
            return Err(Error::Domain(format!("cycle arrival time {t} outside [0, {c})")));
        }
        let mut idx = (t / width).to_f64().unwrap() as usize;
        if idx >= n_bins {
            idx = n_bins - 1;
        }
        counts[idx] += 1;
    }
    let total = F::from_usize(t_ec.len()).unwrap();
    // count/(total*width) integrates to 1; times C integrates to C
    let scale = c / (total * width);
    let heights = counts.iter().map(|&k| F::from_usize(k).unwrap() * scale).collect();
    Ok(CycleHistogram { c, bin: width, heights, samples: t_ec.len() })
}

/// Circular Gaussian smoothing of the histogram, preserving total mass.
///
/// The cycle is periodic, so the kernel wraps around; recommended only at low
/// penetration where the raw distribution is sparse.
pub fn kde_smooth<F: Scalar>(hist: &CycleHistogram<F>, bandwidth: F) -> Result<CycleHistogram<F>> {
    if bandwidth <= F::zero() {
        return Err(Error::Domain("KDE bandwidth must be positive".into()));
    }
    let n = hist.heights.len();
    let width = hist.bin;
    // discretized wrapped kernel, normalized to sum 1
    let mut kernel = vec![F::zero(); n];
    let half = fl::<F>(-0.5);
    for (j, k) in kernel.iter_mut().enumerate() {
        // signed circular offset of bin j from bin 0, in seconds
        let mut off = width * F::from_usize(j).unwrap();
        if off > hist.c / fl(2.0) {
            off = off - hist.c;
        }
        let z = off / bandwidth;
        *k = (half * z * z).exp();
    }
    let ksum: F = kernel.iter().copied().sum();
    for k in &mut kernel {
        *k = *k / ksum;
    }
    let mut smoothed = vec![F::zero(); n];
    for (i, s) in smoothed.iter_mut().enumerate() {
        let mut acc = F::zero();
        for (j, &h) in hist.heights.iter().enumerate() {
            let lag = (i + n - j) % n;
            acc = acc + h * kernel[lag];
        }
        *s = acc;
    }
    // convolution with a unit-sum kernel preserves the sum; renormalize to
    // kill residual rounding
    let mass: F = smoothed.iter().copied().sum::<F>() * width;
    let scale = hist.c / mass;
    for s in &mut smoothed {
        *s = *s * scale;
    }
    Ok(CycleHistogram { c: hist.c, bin: width, heights: smoothed, samples: hist.samples })
}

/// Rule-of-thumb bandwidth from the circular spread of the samples.
pub fn silverman_bandwidth<F: Scalar>(t_ec: &[F], c: F) -> F {
    let n = t_ec.len().max(1);
    let tau = fl::<F>(std::f64::consts::TAU);
    let (mut sx, mut cx) = (F::zero(), F::zero());
    for &t in t_ec {
        let ang = tau * t / c;
        sx = sx + ang.sin();
        cx = cx + ang.cos();
    }
    let nf = F::from_usize(n).unwrap();
    let r = ((sx / nf).powi(2) + (cx / nf).powi(2)).sqrt().min(F::one());
    // circular standard deviation mapped back to seconds
    let sigma = if r > F::zero() {
        (fl::<F>(-2.0) * r.ln()).max(F::zero()).sqrt() * c / tau
    } else {
        c / fl(4.0)
    };
    let bw = fl::<F>(0.9) * sigma * nf.powf(fl(-0.2));
    bw.max(F::one()).min(c / fl(4.0))
}

/// Parameters of the greedy piecewise-constant fit.
#[derive(Debug, Clone, Copy)]
pub struct FitParams<F> {
    pub max_segments: usize,
    pub min_segment_len: F,
    /// Stop splitting when the best relative SSE reduction falls below this.
    pub sse_gain_threshold: F,
}

impl<F: Scalar> Default for FitParams<F> {
    fn default() -> Self {
        FitParams { max_segments: 9, min_segment_len: fl(10.0), sse_gain_threshold: fl(0.01) }
    }
}

struct Prefix<F> {
    sum: Vec<F>,
    sq: Vec<F>,
}

impl<F: Scalar> Prefix<F> {
    fn new(h: &[F]) -> Self {
        let mut sum = Vec::with_capacity(h.len() + 1);
        let mut sq = Vec::with_capacity(h.len() + 1);
        sum.push(F::zero());
        sq.push(F::zero());
        for &x in h {
            sum.push(*sum.last().unwrap() + x);
            sq.push(*sq.last().unwrap() + x * x);
        }
        Prefix { sum, sq }
    }

    /// SSE of bins `[a, b)` around their mean.
    fn sse(&self, a: usize, b: usize) -> F {
        if b <= a {
            return F::zero();
        }
        let n = F::from_usize(b - a).unwrap();
        let s = self.sum[b] - self.sum[a];
        let q = self.sq[b] - self.sq[a];
        (q - s * s / n).max(F::zero())
    }

    fn mean(&self, a: usize, b: usize) -> F {
        (self.sum[b] - self.sum[a]) / F::from_usize(b - a).unwrap()
    }
}

/// Greedy top-down piecewise-constant fit of the binned distribution.
///
/// Repeatedly splits the segment with the largest SSE at the bin boundary
/// that minimizes total SSE (ties go to the earliest boundary), stopping at
/// `max_segments` or when the best relative SSE gain drops below the
/// threshold. Segment values are segment means, rescaled at the end so the
/// profile integrates to the cycle length exactly.
pub fn fit_piecewise_constant<F: Scalar>(
    hist: &CycleHistogram<F>,
    params: &FitParams<F>,
) -> Result<ArrivalProfile<F>> {
    if params.max_segments < 1 {
        return Err(Error::Domain("max_segments must be at least 1".into()));
    }
    if params.min_segment_len < hist.bin {
        return Err(Error::Domain("min_segment_len must be at least the bin width".into()));
    }
    let n = hist.heights.len();
    let min_bins =
        ((params.min_segment_len / hist.bin).to_f64().unwrap().round() as usize).max(1);
    let mut max_segments = params.max_segments;
    let cap = (n / min_bins).max(1);
    if max_segments > cap {
        log::warn!(
            "max_segments {} infeasible for C with min_segment_len; reduced to {}",
            max_segments,
            cap
        );
        max_segments = cap;
    }

    let prefix = Prefix::new(&hist.heights);
    // segment boundaries in bin indices, always starts [0, n]
    let mut bounds = vec![0usize, n];
    let mut total_sse = prefix.sse(0, n);

    while bounds.len() - 1 < max_segments {
        // candidate split of each segment: (gain, split_bin, segment_start)
        let mut best: Option<(F, usize)> = None;
        // visit segments in decreasing SSE, splitting the worst splittable one
        let mut order: Vec<usize> = (0..bounds.len() - 1).collect();
        order.sort_by(|&i, &j| {
            let a = prefix.sse(bounds[i], bounds[i + 1]);
            let b = prefix.sse(bounds[j], bounds[j + 1]);
            b.partial_cmp(&a).unwrap()
        });
        for seg in order {
            let (a, b) = (bounds[seg], bounds[seg + 1]);
            if b - a < 2 * min_bins {
                continue;
            }
            let seg_sse = prefix.sse(a, b);
            let mut best_split: Option<(F, usize)> = None;
            for cut in (a + min_bins)..=(b - min_bins) {
                let sse = prefix.sse(a, cut) + prefix.sse(cut, b);
                if best_split.map_or(true, |(s, _)| sse < s) {
                    best_split = Some((sse, cut));
                }
            }
            if let Some((sse, cut)) = best_split {
                best = Some((seg_sse - sse, cut));
                break;
            }
        }
        let Some((gain, cut)) = best else { break };
        if total_sse <= F::zero() || gain / total_sse < params.sse_gain_threshold {
            break;
        }
        total_sse = total_sse - gain;
        let pos = bounds.partition_point(|&b| b < cut);
        bounds.insert(pos, cut);
    }

    let tau: Vec<F> = bounds
        .iter()
        .map(|&b| if b == n { hist.c } else { hist.bin * F::from_usize(b).unwrap() })
        .collect();
    let alpha: Vec<F> =
        bounds.windows(2).map(|w| prefix.mean(w[0], w[1]).max(F::zero())).collect();
    ArrivalProfile::new(hist.c, tau, alpha)
}
