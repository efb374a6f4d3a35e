use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ServiceLawError {
    #[error("service rate must be positive and finite, got {0}")]
    BadRate(f64),
    #[error("Erlang shape must be at least 1")]
    BadShape,
    #[error("hyperexponential weights must be nonnegative and sum to 1 (sum {0})")]
    BadWeights(f64),
    #[error("hyperexponential needs matching, nonempty weight and rate lists")]
    BadBranches,
}

/// Service-time distribution of one (class, node) pair.
///
/// Every family here has a bounded hazard with a limit at infinity:
/// exponential (constant), hyperexponential (decreasing to the smallest rate)
/// and Erlang (increasing to the phase rate).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServiceLaw {
    Exponential { rate: f64 },
    HyperExponential { weights: Vec<f64>, rates: Vec<f64> },
    Erlang { k: u32, rate: f64 },
}

fn check_rate(r: f64) -> Result<(), ServiceLawError> {
    if r > 0.0 && r.is_finite() {
        Ok(())
    } else {
        Err(ServiceLawError::BadRate(r))
    }
}

impl ServiceLaw {
    pub fn exponential(rate: f64) -> Self {
        ServiceLaw::Exponential { rate }
    }

    pub fn erlang(k: u32, rate: f64) -> Self {
        ServiceLaw::Erlang { k, rate }
    }

    pub fn validate(&self) -> Result<(), ServiceLawError> {
        match self {
            ServiceLaw::Exponential { rate } => check_rate(*rate),
            ServiceLaw::Erlang { k, rate } => {
                if *k == 0 {
                    return Err(ServiceLawError::BadShape);
                }
                check_rate(*rate)
            }
            ServiceLaw::HyperExponential { weights, rates } => {
                if weights.is_empty() || weights.len() != rates.len() {
                    return Err(ServiceLawError::BadBranches);
                }
                rates.iter().try_for_each(|&r| check_rate(r))?;
                let sum: f64 = weights.iter().sum();
                if weights.iter().any(|&w| !(w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                    return Err(ServiceLawError::BadWeights(sum));
                }
                Ok(())
            }
        }
    }

    /// The constant hazard of an exponential law.
    pub fn exponential_rate(&self) -> Option<f64> {
        match self {
            ServiceLaw::Exponential { rate } => Some(*rate),
            _ => None,
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            ServiceLaw::Exponential { rate } => 1.0 / rate,
            ServiceLaw::Erlang { k, rate } => *k as f64 / rate,
            ServiceLaw::HyperExponential { weights, rates } => {
                weights.iter().zip(rates).map(|(p, r)| p / r).sum()
            }
        }
    }

    /// `P(S > t)`.
    pub fn survival(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 1.0;
        }
        match self {
            ServiceLaw::Exponential { rate } => (-rate * t).exp(),
            ServiceLaw::HyperExponential { weights, rates } => weights
                .iter()
                .zip(rates)
                .map(|(p, r)| p * (-r * t).exp())
                .sum(),
            ServiceLaw::Erlang { k, rate } => {
                let x = rate * t;
                let mut term = 1.0;
                let mut sum = 1.0;
                for n in 1..*k {
                    term *= x / n as f64;
                    sum += term;
                }
                (-x).exp() * sum
            }
        }
    }

    pub fn cdf(&self, t: f64) -> f64 {
        1.0 - self.survival(t)
    }

    /// Completion hazard `F'(t) / (1 - F(t))` at attained service `t`.
    pub fn hazard(&self, t: f64) -> f64 {
        let t = t.max(0.0);
        match self {
            ServiceLaw::Exponential { rate } => *rate,
            ServiceLaw::HyperExponential { weights, rates } => {
                let rmin = rates.iter().copied().fold(f64::INFINITY, f64::min);
                let mut num = 0.0;
                let mut den = 0.0;
                for (p, r) in weights.iter().zip(rates) {
                    let w = p * (-(r - rmin) * t).exp();
                    num += w * r;
                    den += w;
                }
                num / den
            }
            ServiceLaw::Erlang { k, rate } => {
                let x = rate * t;
                if *k == 1 {
                    return *rate;
                }
                if x == 0.0 {
                    return 0.0;
                }
                // sum_{n<k} x^n/n! divided by x^{k-1}/(k-1)!
                let mut ratio = 1.0;
                let mut sum = 1.0;
                for n in (1..*k).rev() {
                    ratio *= n as f64 / x;
                    sum += ratio;
                }
                rate / sum
            }
        }
    }

    /// Supremum of the hazard over all ages.
    pub fn hazard_bound(&self) -> f64 {
        match self {
            ServiceLaw::Exponential { rate } | ServiceLaw::Erlang { rate, .. } => *rate,
            ServiceLaw::HyperExponential { weights, rates } => {
                // decreasing hazard: the supremum is the value at zero
                weights.iter().zip(rates).map(|(p, r)| p * r).sum()
            }
        }
    }

    /// Limit of the hazard as attained service grows.
    pub fn hazard_limit(&self) -> f64 {
        match self {
            ServiceLaw::Exponential { rate } | ServiceLaw::Erlang { rate, .. } => *rate,
            ServiceLaw::HyperExponential { weights, rates } => weights
                .iter()
                .zip(rates)
                .filter(|(p, _)| **p > 0.0)
                .map(|(_, r)| *r)
                .fold(f64::INFINITY, f64::min),
        }
    }

    /// Draws a total service requirement.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.sample_residual(0.0, rng)
    }

    /// Draws a total requirement conditioned on exceeding `age`.
    pub fn sample_residual<R: Rng + ?Sized>(&self, age: f64, rng: &mut R) -> f64 {
        let age = age.max(0.0);
        let exp = |rng: &mut R, rate: f64| -> f64 {
            let e: f64 = Exp1.sample(rng);
            e / rate
        };
        match self {
            ServiceLaw::Exponential { rate } => age + exp(rng, *rate),
            ServiceLaw::HyperExponential { weights, rates } => {
                let rmin = rates.iter().copied().fold(f64::INFINITY, f64::min);
                let post: Vec<f64> = weights
                    .iter()
                    .zip(rates)
                    .map(|(p, r)| p * (-(r - rmin) * age).exp())
                    .collect();
                let total: f64 = post.iter().sum();
                let mut u = rng.random::<f64>() * total;
                let mut branch = post.len() - 1;
                for (i, w) in post.iter().enumerate() {
                    if u < *w {
                        branch = i;
                        break;
                    }
                    u -= w;
                }
                age + exp(rng, rates[branch])
            }
            ServiceLaw::Erlang { k, rate } => {
                // phases already completed given survival to `age`: P(n) ∝ x^n / n!
                let completed = if age > 0.0 {
                    let x = rate * age;
                    let mut w = Vec::with_capacity(*k as usize);
                    let mut term = 1.0;
                    w.push(term);
                    for n in 1..*k {
                        term *= x / n as f64;
                        w.push(term);
                    }
                    let total: f64 = w.iter().sum();
                    let mut u = rng.random::<f64>() * total;
                    let mut pick = w.len() - 1;
                    for (i, wi) in w.iter().enumerate() {
                        if u < *wi {
                            pick = i;
                            break;
                        }
                        u -= wi;
                    }
                    pick as u32
                } else {
                    0
                };
                let mut t = age;
                for _ in completed..*k {
                    t += exp(rng, *rate);
                }
                t
            }
        }
    }

    /// Completion time generated by thinning a Poisson clock at the hazard
    /// bound against the age-dependent hazard.
    pub fn sample_by_thinning<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let bound = self.hazard_bound();
        let mut t = 0.0;
        loop {
            let e: f64 = Exp1.sample(rng);
            t += e / bound;
            if rng.random::<f64>() * bound <= self.hazard(t) {
                return t;
            }
        }
    }
}
