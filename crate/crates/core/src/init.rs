//! Initialization schemes and their moment profiles.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, invalid, Error, Result};
use crate::rng::Rng;

/// Entry distribution family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Uniform,
    Gaussian,
    Orthogonal,
}

/// Variance rule, evaluated at the fan-in of the layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Rule {
    /// `1/(3 d)`
    LeCun,
    /// `1/d`
    Xavier,
    /// `2/d`
    He,
    /// Fixed entry variance.
    CustomVariance(f64),
    /// Uniform on `[-tau, tau]`; only valid for the uniform family.
    CustomRange(f64),
}

/// Family plus variance rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct InitScheme {
    pub family: Family,
    pub rule: Rule,
}

/// Second and fourth moments of a single weight entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentProfile {
    pub sigma2: f64,
    pub mu4: f64,
    pub kappa: f64,
}

/// Pointwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Linear,
    Relu,
}

impl ActivationKind {
    /// Probability that a gate is open for a symmetric preactivation.
    pub fn p(self) -> f64 {
        match self {
            ActivationKind::Linear => 1.0,
            ActivationKind::Relu => 0.5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Linear => "linear",
            ActivationKind::Relu => "relu",
        }
    }

    /// Gate value for a preactivation. ReLU is open only for strictly positive input.
    #[inline]
    pub fn gate(self, x: f64) -> f64 {
        match self {
            ActivationKind::Linear => 1.0,
            ActivationKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActivationKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linear" | "identity" => Ok(ActivationKind::Linear),
            "relu" => Ok(ActivationKind::Relu),
            other => invalid(format!("unknown activation '{other}'")),
        }
    }
}

/// Kurtosis `mu4 / sigma^4` of a family.
pub fn kurtosis_of(family: Family) -> Result<f64> {
    match family {
        Family::Uniform => Ok(9.0 / 5.0),
        Family::Gaussian => Ok(3.0),
        Family::Orthogonal => Err(Error::Unsupported(
            "orthogonal init has no iid entry kurtosis".into(),
        )),
    }
}

/// Half-width of the uniform distribution with entry variance `sigma2`.
pub fn range_for_uniform(sigma2: f64) -> Result<f64> {
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return domain(format!("variance must be positive and finite, got {sigma2}"));
    }
    Ok((3.0 * sigma2).sqrt())
}

impl InitScheme {
    pub fn new(family: Family, rule: Rule) -> Result<Self> {
        let s = InitScheme { family, rule };
        s.validate()?;
        Ok(s)
    }

    pub fn uniform(rule: Rule) -> Self {
        InitScheme { family: Family::Uniform, rule }
    }

    pub fn gaussian(rule: Rule) -> Self {
        InitScheme { family: Family::Gaussian, rule }
    }

    fn validate(&self) -> Result<()> {
        match self.rule {
            Rule::CustomRange(t) => {
                if self.family != Family::Uniform {
                    return invalid("range rule requires the uniform family");
                }
                if !(t > 0.0) || !t.is_finite() {
                    return domain(format!("range must be positive, got {t}"));
                }
            }
            Rule::CustomVariance(v) => {
                if !(v > 0.0) || !v.is_finite() {
                    return domain(format!("variance must be positive, got {v}"));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Entry variance for a layer with the given fan-in.
    pub fn variance(&self, fan_in: usize) -> Result<f64> {
        variance_for(self, fan_in)
    }

    /// Moment profile at the given fan-in.
    pub fn profile(&self, fan_in: usize) -> Result<MomentProfile> {
        let sigma2 = self.variance(fan_in)?;
        let kappa = kurtosis_of(self.family)?;
        Ok(MomentProfile { sigma2, mu4: kappa * sigma2 * sigma2, kappa })
    }

    /// Draw `n` iid entries at the given fan-in.
    pub fn sample_entries(&self, fan_in: usize, n: usize, rng: &mut Rng) -> Result<Vec<f64>> {
        let sigma2 = self.variance(fan_in)?;
        match self.family {
            Family::Uniform => {
                let t = range_for_uniform(sigma2)?;
                Ok((0..n).map(|_| rng.random_range(-t..t)).collect())
            }
            Family::Gaussian => {
                let s = sigma2.sqrt();
                Ok((0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        s * z
                    })
                    .collect())
            }
            Family::Orthogonal => Err(Error::Unsupported(
                "orthogonal init cannot draw iid entries".into(),
            )),
        }
    }

    /// Draw a `rows x cols` matrix; the fan-in is `cols`.
    pub fn sample_matrix(&self, rows: usize, cols: usize, rng: &mut Rng) -> Result<DMatrix<f64>> {
        sample_matrix(self, rows, cols, rng)
    }
}

/// Entry variance of `scheme` at fan-in `d`.
pub fn variance_for(scheme: &InitScheme, d: usize) -> Result<f64> {
    scheme.validate()?;
    if d == 0 {
        return domain("fan-in must be at least 1");
    }
    let d = d as f64;
    Ok(match scheme.rule {
        Rule::LeCun => 1.0 / (3.0 * d),
        Rule::Xavier => 1.0 / d,
        Rule::He => 2.0 / d,
        Rule::CustomVariance(v) => v,
        Rule::CustomRange(t) => t * t / 3.0,
    })
}

/// Draw a `rows x cols` weight matrix (fan-in `cols`).
///
/// Orthogonal matrices come from the QR factorisation of a Gaussian matrix
/// with the signs of `diag(R)` folded into `Q`, scaled so entries carry the
/// rule's variance on average.
pub fn sample_matrix(scheme: &InitScheme, rows: usize, cols: usize, rng: &mut Rng) -> Result<DMatrix<f64>> {
    if rows == 0 || cols == 0 {
        return invalid("matrix dimensions must be positive");
    }
    match scheme.family {
        Family::Orthogonal => {
            let sigma2 = scheme.variance(cols)?;
            let tall = rows >= cols;
            let (m, n) = if tall { (rows, cols) } else { (cols, rows) };
            let g = DMatrix::from_fn(m, n, |_, _| -> f64 { StandardNormal.sample(rng) });
            let qr = g.qr();
            let r = qr.r();
            let mut q = qr.q();
            for j in 0..n {
                if r[(j, j)] < 0.0 {
                    q.column_mut(j).neg_mut();
                }
            }
            q *= (sigma2 * m as f64).sqrt();
            Ok(if tall { q } else { q.transpose() })
        }
        _ => {
            let v = scheme.sample_entries(cols, rows * cols, rng)?;
            Ok(DMatrix::from_row_slice(rows, cols, &v))
        }
    }
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let fam = match self.family {
            Family::Uniform => "uniform",
            Family::Gaussian => "gaussian",
            Family::Orthogonal => "orthogonal",
        };
        if self.family == Family::Orthogonal && self.rule == Rule::Xavier {
            return f.write_str(fam);
        }
        match self.rule {
            Rule::LeCun => write!(f, "{fam}:lecun"),
            Rule::Xavier => write!(f, "{fam}:xavier"),
            Rule::He => write!(f, "{fam}:he"),
            Rule::CustomVariance(v) => write!(f, "{fam}:var={v}"),
            Rule::CustomRange(t) => write!(f, "{fam}:range={t}"),
        }
    }
}

impl FromStr for InitScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let (fam, rule) = match s.split_once(':') {
            Some((a, b)) => (a, Some(b)),
            None => (s.as_str(), None),
        };
        let family = match fam {
            "uniform" => Family::Uniform,
            "gaussian" | "normal" => Family::Gaussian,
            "orthogonal" => Family::Orthogonal,
            other => return invalid(format!("unknown init family '{other}'")),
        };
        let rule = match rule {
            None if family == Family::Orthogonal => Rule::Xavier,
            None => return invalid(format!("init '{s}' is missing a rule")),
            Some("lecun") => Rule::LeCun,
            Some("xavier") | Some("glorot") => Rule::Xavier,
            Some("he") | Some("kaiming") => Rule::He,
            Some(r) => {
                let parse = |v: &str| {
                    v.parse::<f64>()
                        .map_err(|_| Error::InvalidArgument(format!("bad number in init '{s}'")))
                };
                if let Some(v) = r.strip_prefix("var=") {
                    Rule::CustomVariance(parse(v)?)
                } else if let Some(v) = r.strip_prefix("range=") {
                    Rule::CustomRange(parse(v)?)
                } else {
                    return invalid(format!("unknown init rule '{r}'"));
                }
            }
        };
        InitScheme::new(family, rule)
    }
}

impl TryFrom<String> for InitScheme {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<InitScheme> for String {
    fn from(s: InitScheme) -> String {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn lecun_variance() {
        let s = InitScheme::uniform(Rule::LeCun);
        assert!((s.variance(10).unwrap() - 1.0 / 30.0).abs() < 1e-15);
    }

    #[test]
    fn uniform_he_range() {
        let s = InitScheme::uniform(Rule::He);
        let t = range_for_uniform(s.variance(8).unwrap()).unwrap();
        assert!((t - (3.0f64 / 4.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn kurtoses() {
        assert_eq!(kurtosis_of(Family::Gaussian).unwrap(), 3.0);
        assert!((kurtosis_of(Family::Uniform).unwrap() - 1.8).abs() < 1e-15);
        assert!(kurtosis_of(Family::Orthogonal).is_err());
    }

    #[test]
    fn range_rule_needs_uniform() {
        assert!(InitScheme::new(Family::Gaussian, Rule::CustomRange(1.0)).is_err());
        assert!("gaussian:range=1.5".parse::<InitScheme>().is_err());
        let s: InitScheme = "uniform:range=1.5".parse().unwrap();
        assert!((s.variance(4).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn zero_fan_in_rejected() {
        assert!(InitScheme::gaussian(Rule::He).variance(0).is_err());
    }

    #[test]
    fn text_round_trip() {
        for t in ["uniform:he", "gaussian:xavier", "uniform:lecun", "uniform:range=1.5", "orthogonal", "orthogonal:he", "gaussian:var=0.25"] {
            let s: InitScheme = t.parse().unwrap();
            assert_eq!(s.to_string(), t);
            assert_eq!(s.to_string().parse::<InitScheme>().unwrap(), s);
        }
    }

    #[test]
    fn orthogonal_is_orthogonal() {
        let s: InitScheme = "orthogonal".parse().unwrap();
        let q = s.sample_matrix(6, 6, &mut stream(3)).unwrap();
        let e = &q.transpose() * &q - DMatrix::<f64>::identity(6, 6);
        assert!(e.amax() < 1e-12);
        assert!(s.profile(6).is_err());
    }

    #[test]
    fn uniform_samples_in_range() {
        let s = InitScheme::uniform(Rule::CustomRange(0.2));
        let v = s.sample_entries(1, 1000, &mut stream(1)).unwrap();
        assert!(v.iter().all(|x| x.abs() <= 0.2));
    }

    #[test]
    fn relu_gate_is_strict() {
        assert_eq!(ActivationKind::Relu.gate(0.0), 0.0);
        assert_eq!(ActivationKind::Relu.gate(1e-300), 1.0);
    }
}
