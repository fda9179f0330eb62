//! Binary entropy and plug-in mutual information over discretized variables.

use thiserror::Error;

/// Absolute tolerance on the total mass of a distribution. Inputs within it
/// are renormalized exactly.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum EntropyError {
    #[error("argument {0} outside [0, 1]")]
    Domain(f64),
    #[error("distribution sums to {sum}, not 1")]
    NotNormalized { sum: f64 },
    #[error("negative or non-finite probability {value} at index {index}")]
    InvalidEntry { index: usize, value: f64 },
    #[error("profile {index} has {found} bins, expected {expected}")]
    MismatchedBins {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("{0}")]
    Shape(String),
}

/// Binary Shannon entropy in bits, with 0·log₂0 ≡ 0.
pub fn h2(x: f64) -> Result<f64, EntropyError> {
    if !(0.0..=1.0).contains(&x) {
        return Err(EntropyError::Domain(x));
    }
    Ok(h2_unchecked(x))
}

/// [`h2`] for callers that already clamped `x` into [0, 1].
pub(crate) fn h2_unchecked(x: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        return 0.0;
    }
    -x * x.log2() - (1.0 - x) * (1.0 - x).log2()
}

/// Shannon entropy of a probability vector, in bits.
pub fn shannon_entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.log2()).sum()
}

fn normalized(values: &[f64]) -> Result<Vec<f64>, EntropyError> {
    for (index, &value) in values.iter().enumerate() {
        if !value.is_finite() || value < 0.0 {
            return Err(EntropyError::InvalidEntry { index, value });
        }
    }
    let sum: f64 = values.iter().sum();
    if (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
        return Err(EntropyError::NotNormalized { sum });
    }
    Ok(values.iter().map(|v| v / sum).collect())
}

/// Joint distribution p(x, b) of a sent state `b` and a binned observable `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDistribution {
    labels: Vec<String>,
    bins: usize,
    /// Row-major, one row of `bins` entries per state label.
    p: Vec<f64>,
}

impl JointDistribution {
    pub fn new(labels: Vec<String>, bins: usize, p: Vec<f64>) -> Result<Self, EntropyError> {
        if labels.is_empty() || bins == 0 {
            return Err(EntropyError::Shape("need at least one state and one bin".into()));
        }
        if p.len() != labels.len() * bins {
            return Err(EntropyError::Shape(format!(
                "{} entries for {} states x {} bins",
                p.len(),
                labels.len(),
                bins
            )));
        }
        let p = normalized(&p)?;
        Ok(Self { labels, bins, p })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn get(&self, state: usize, bin: usize) -> f64 {
        self.p[state * self.bins + bin]
    }

    /// p(b)
    pub fn state_marginal(&self) -> Vec<f64> {
        self.p.chunks(self.bins).map(|row| row.iter().sum()).collect()
    }

    /// p(x)
    pub fn observable_marginal(&self) -> Vec<f64> {
        let mut px = vec![0.0; self.bins];
        for row in self.p.chunks(self.bins) {
            for (acc, v) in px.iter_mut().zip(row) {
                *acc += v;
            }
        }
        px
    }
}

/// I(X;B) = Σ p(x,b) log₂[p(x,b) / (p(x)p(b))] in bits.
pub fn mutual_information(j: &JointDistribution) -> f64 {
    let pb = j.state_marginal();
    let px = j.observable_marginal();
    let mut total = 0.0;
    for (row, &pb) in j.p.chunks(j.bins).zip(&pb) {
        for (&pxb, &px) in row.iter().zip(&px) {
            if pxb > 0.0 {
                total += pxb * (pxb / (px * pb)).log2();
            }
        }
    }
    // Rounding can leave a tiny negative residue for independent inputs.
    total.max(0.0)
}

/// Per-state conditional distributions p(x|b) together with the prior p(b).
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalProfiles {
    profiles: Vec<Vec<f64>>,
    prior: Vec<f64>,
}

impl ConditionalProfiles {
    pub fn new(profiles: Vec<Vec<f64>>, prior: Vec<f64>) -> Result<Self, EntropyError> {
        if profiles.is_empty() {
            return Err(EntropyError::Shape("no profiles".into()));
        }
        if prior.len() != profiles.len() {
            return Err(EntropyError::Shape(format!(
                "prior has {} entries for {} profiles",
                prior.len(),
                profiles.len()
            )));
        }
        let expected = profiles[0].len();
        if expected == 0 {
            return Err(EntropyError::Shape("profiles have no bins".into()));
        }
        for (index, p) in profiles.iter().enumerate() {
            if p.len() != expected {
                return Err(EntropyError::MismatchedBins {
                    index,
                    expected,
                    found: p.len(),
                });
            }
        }
        let profiles = profiles.iter().map(|p| normalized(p)).collect::<Result<Vec<_>, _>>()?;
        let prior = normalized(&prior)?;
        Ok(Self { profiles, prior })
    }

    pub fn profiles(&self) -> &[Vec<f64>] {
        &self.profiles
    }

    pub fn prior(&self) -> &[f64] {
        &self.prior
    }

    pub fn bins(&self) -> usize {
        self.profiles[0].len()
    }

    pub fn joint(&self) -> JointDistribution {
        let bins = self.bins();
        let p = self
            .profiles
            .iter()
            .zip(&self.prior)
            .flat_map(|(profile, &pb)| profile.iter().map(move |&v| v * pb))
            .collect();
        let labels = (0..self.profiles.len()).map(|i| i.to_string()).collect();
        JointDistribution { labels, bins, p }
    }
}

/// Mutual information between the state and the observable described by
/// `c`. Zero exactly when every profile is identical.
pub fn mi_from_profiles(c: &ConditionalProfiles) -> f64 {
    // The joint-sum form leaves rounding residue around 1e-16 here.
    if c.profiles.windows(2).all(|w| w[0] == w[1]) {
        return 0.0;
    }
    mutual_information(&c.joint())
}
