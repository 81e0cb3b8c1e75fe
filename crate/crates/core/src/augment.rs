//! Label-preserving time-series augmentations.
//!
//! Every augmentation takes the random stream explicitly, so a fixed seed
//! reproduces the output bit for bit. Shapes are always preserved.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::TimeSeriesBatch;
use crate::error::{Error, Result};

/// How warp knots are joined into a curve.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    /// Natural cubic spline.
    #[default]
    Cubic,
    Linear,
}

fn default_warp_sigma() -> f64 {
    0.2
}
fn default_knots() -> usize {
    4
}
fn default_jitter_sigma() -> f64 {
    0.05
}
fn default_scale_sigma() -> f64 {
    0.1
}
fn default_segments() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AugmentSpec {
    /// Multiply each series by a smooth random curve around one.
    MagnitudeWarp {
        #[serde(default = "default_warp_sigma")]
        sigma: f64,
        #[serde(default = "default_knots")]
        knots: usize,
        #[serde(default)]
        interpolation: Interpolation,
    },
    /// Add i.i.d. Gaussian noise to every value.
    Jitter {
        #[serde(default = "default_jitter_sigma")]
        sigma: f64,
    },
    /// Multiply each series by one Gaussian factor around one.
    Scale {
        #[serde(default = "default_scale_sigma")]
        sigma: f64,
    },
    /// Cut the time axis into segments and shuffle them.
    Permutation {
        #[serde(default = "default_segments")]
        segments: usize,
    },
    /// Apply each step left to right.
    Compose { steps: Vec<AugmentSpec> },
    None,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec::MagnitudeWarp {
            sigma: default_warp_sigma(),
            knots: default_knots(),
            interpolation: Interpolation::Cubic,
        }
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma.is_finite() && sigma >= 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("augmentation sigma must be >= 0, got {sigma}")))
    }
}

impl AugmentSpec {
    pub fn jitter(sigma: f64) -> Self {
        Self::Jitter { sigma }
    }

    pub fn scale(sigma: f64) -> Self {
        Self::Scale { sigma }
    }

    pub fn permutation(segments: usize) -> Self {
        Self::Permutation { segments }
    }

    pub fn magnitude_warp(sigma: f64, knots: usize) -> Self {
        Self::MagnitudeWarp {
            sigma,
            knots,
            interpolation: Interpolation::Cubic,
        }
    }

    /// Checks parameters that do not depend on the input length.
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::MagnitudeWarp { sigma, knots, .. } => {
                check_sigma(*sigma)?;
                if *knots < 2 {
                    return Err(Error::Config("magnitude warp needs at least 2 knots".into()));
                }
                Ok(())
            }
            Self::Jitter { sigma } | Self::Scale { sigma } => check_sigma(*sigma),
            Self::Permutation { segments } => {
                if *segments == 0 {
                    return Err(Error::Config("permutation needs at least 1 segment".into()));
                }
                Ok(())
            }
            Self::Compose { steps } => {
                if steps.is_empty() {
                    return Err(Error::Config("compose list must not be empty".into()));
                }
                steps.iter().try_for_each(Self::validate)
            }
            Self::None => Ok(()),
        }
    }

    /// Returns an augmented copy of `x`.
    pub fn apply<R: Rng>(&self, x: &TimeSeriesBatch, rng: &mut R) -> Result<TimeSeriesBatch> {
        self.validate()?;
        match self {
            Self::MagnitudeWarp {
                sigma,
                knots,
                interpolation,
            } => magnitude_warp(x, *sigma, *knots, *interpolation, rng),
            Self::Jitter { sigma } => jitter(x, *sigma, rng),
            Self::Scale { sigma } => scale(x, *sigma, rng),
            Self::Permutation { segments } => permutation(x, *segments, rng),
            Self::Compose { steps } => {
                let mut out = x.clone();
                for s in steps {
                    out = s.apply(&out, rng)?;
                }
                Ok(out)
            }
            Self::None => Ok(x.clone()),
        }
    }
}

fn normal(mean: f64, sigma: f64) -> Result<Normal<f64>> {
    Normal::new(mean, sigma).map_err(|e| Error::Config(e.to_string()))
}

/// Values of a natural cubic spline through `(xs[i], ys[i])` at `0..len`.
/// `xs` must be strictly increasing with at least two points.
pub fn natural_cubic_spline(xs: &[f64], ys: &[f64], len: usize) -> Vec<f64> {
    let n = xs.len();
    debug_assert!(n >= 2 && ys.len() == n);
    let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
    // Second derivatives; m[0] = m[n-1] = 0. Thomas algorithm on the
    // interior system.
    let mut m = vec![0.0; n];
    if n > 2 {
        let k = n - 2;
        let mut diag = vec![0.0; k];
        let mut rhs = vec![0.0; k];
        for i in 0..k {
            diag[i] = 2.0 * (h[i] + h[i + 1]);
            rhs[i] = 6.0 * ((ys[i + 2] - ys[i + 1]) / h[i + 1] - (ys[i + 1] - ys[i]) / h[i]);
        }
        for i in 1..k {
            let w = h[i] / diag[i - 1];
            diag[i] -= w * h[i];
            rhs[i] -= w * rhs[i - 1];
        }
        m[k] = rhs[k - 1] / diag[k - 1];
        for i in (0..k - 1).rev() {
            m[i + 1] = (rhs[i] - h[i + 1] * m[i + 2]) / diag[i];
        }
    }
    let mut seg = 0;
    (0..len)
        .map(|t| {
            let t = t as f64;
            while seg + 2 < n && t > xs[seg + 1] {
                seg += 1;
            }
            let (x0, hh) = (xs[seg], h[seg]);
            let b = (t - x0) / hh;
            let a = 1.0 - b;
            // Written as y0 + b * dy so that constant knots give exact values.
            ys[seg]
                + b * (ys[seg + 1] - ys[seg])
                + ((a * a * a - a) * m[seg] + (b * b * b - b) * m[seg + 1]) * hh * hh / 6.0
        })
        .collect()
}

fn linear_interp(xs: &[f64], ys: &[f64], len: usize) -> Vec<f64> {
    let mut seg = 0;
    (0..len)
        .map(|t| {
            let t = t as f64;
            while seg + 2 < xs.len() && t > xs[seg + 1] {
                seg += 1;
            }
            let w = (t - xs[seg]) / (xs[seg + 1] - xs[seg]);
            ys[seg] + w * (ys[seg + 1] - ys[seg])
        })
        .collect()
}

/// One warp curve of length `len`: knot values drawn from N(1, sigma^2) at
/// `knots` evenly spaced positions (endpoints included), then interpolated.
pub fn warp_curve<R: Rng>(
    len: usize,
    knots: usize,
    sigma: f64,
    interpolation: Interpolation,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if knots < 2 {
        return Err(Error::Config("magnitude warp needs at least 2 knots".into()));
    }
    if len < knots {
        return Err(Error::Config(format!(
            "series length {len} is shorter than the {knots} warp knots"
        )));
    }
    check_sigma(sigma)?;
    let dist = normal(1.0, sigma)?;
    let span = (len - 1) as f64;
    let xs: Vec<f64> = (0..knots).map(|i| span * i as f64 / (knots - 1) as f64).collect();
    let ys: Vec<f64> = (0..knots).map(|_| dist.sample(rng)).collect();
    Ok(match interpolation {
        Interpolation::Cubic => natural_cubic_spline(&xs, &ys, len),
        Interpolation::Linear => linear_interp(&xs, &ys, len),
    })
}

/// Multiplies every (sample, channel) series by its own warp curve.
pub fn magnitude_warp<R: Rng>(
    x: &TimeSeriesBatch,
    sigma: f64,
    knots: usize,
    interpolation: Interpolation,
    rng: &mut R,
) -> Result<TimeSeriesBatch> {
    if x.len() < knots {
        return Err(Error::Config(format!(
            "series length {} is shorter than the {knots} warp knots",
            x.len()
        )));
    }
    let mut out = x.clone();
    for i in 0..x.batch_size() {
        for c in 0..x.channels() {
            let curve = warp_curve(x.len(), knots, sigma, interpolation, rng)?;
            for (v, w) in out.series_mut(i, c).iter_mut().zip(curve) {
                *v *= w;
            }
        }
    }
    Ok(out)
}

pub fn jitter<R: Rng>(x: &TimeSeriesBatch, sigma: f64, rng: &mut R) -> Result<TimeSeriesBatch> {
    check_sigma(sigma)?;
    let dist = normal(0.0, sigma)?;
    let mut out = x.clone();
    for i in 0..x.batch_size() {
        for c in 0..x.channels() {
            for v in out.series_mut(i, c) {
                *v += dist.sample(rng);
            }
        }
    }
    Ok(out)
}

pub fn scale<R: Rng>(x: &TimeSeriesBatch, sigma: f64, rng: &mut R) -> Result<TimeSeriesBatch> {
    check_sigma(sigma)?;
    let dist = normal(1.0, sigma)?;
    let mut out = x.clone();
    for i in 0..x.batch_size() {
        for c in 0..x.channels() {
            let k = dist.sample(rng);
            for v in out.series_mut(i, c) {
                *v *= k;
            }
        }
    }
    Ok(out)
}

/// Splits the time axis into `segments` near-equal chunks (the first
/// `len % segments` chunks are one longer) and shuffles them per sample; all
/// channels of a sample share the permutation.
pub fn permutation<R: Rng>(x: &TimeSeriesBatch, segments: usize, rng: &mut R) -> Result<TimeSeriesBatch> {
    if segments == 0 || segments > x.len() {
        return Err(Error::Config(format!(
            "cannot cut length {} into {segments} segments",
            x.len()
        )));
    }
    let (base, extra) = (x.len() / segments, x.len() % segments);
    let bounds: Vec<(usize, usize)> = (0..segments)
        .scan(0, |start, s| {
            let w = base + usize::from(s < extra);
            let b = (*start, *start + w);
            *start += w;
            Some(b)
        })
        .collect();
    let mut out = x.clone();
    let mut order: Vec<usize> = (0..segments).collect();
    for i in 0..x.batch_size() {
        order.shuffle(rng);
        for c in 0..x.channels() {
            let src = x.series(i, c);
            let dst = out.series_mut(i, c);
            let mut pos = 0;
            for &s in &order {
                let (a, b) = bounds[s];
                dst[pos..pos + (b - a)].copy_from_slice(&src[a..b]);
                pos += b - a;
            }
        }
    }
    Ok(out)
}
