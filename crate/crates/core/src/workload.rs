//! Key distributions and access traces.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DistError {
    #[error("unknown distribution `{0}` (expected uniform or zipf:THETA)")]
    Unknown(String),
    #[error("bad zipf exponent `{0}`")]
    Theta(String),
    #[error("key space must be non-empty")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KeyDist {
    Uniform,
    Zipf(f64),
}

impl FromStr for KeyDist {
    type Err = DistError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            None if s == "uniform" => Ok(KeyDist::Uniform),
            Some(("zipf", t)) => match t.parse::<f64>() {
                Ok(theta) if theta > 0.0 && theta.is_finite() => Ok(KeyDist::Zipf(theta)),
                _ => Err(DistError::Theta(t.to_string())),
            },
            _ => Err(DistError::Unknown(s.to_string())),
        }
    }
}

impl fmt::Display for KeyDist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KeyDist::Uniform => write!(f, "uniform"),
            KeyDist::Zipf(t) => write!(f, "zipf:{t}"),
        }
    }
}

/// Draws ids in `0..n`. Zipf ranks are passed through a fixed random
/// permutation so popular ids are spread over the id space rather than
/// clustered at the low end.
#[derive(Debug, Clone)]
pub struct KeySampler {
    n: u64,
    zipf: Option<Zipf<f64>>,
    perm: Vec<u32>,
}

impl KeySampler {
    pub fn new(n: u64, dist: KeyDist, seed: u64) -> Result<Self, DistError> {
        if n == 0 {
            return Err(DistError::Empty);
        }
        let zipf = match dist {
            KeyDist::Uniform => None,
            KeyDist::Zipf(theta) => {
                Some(Zipf::new(n as f64, theta).map_err(|_| DistError::Theta(theta.to_string()))?)
            }
        };
        let mut perm: Vec<u32> = (0..n as u32).collect();
        if zipf.is_some() {
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed));
        }
        Ok(Self { n, zipf, perm })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        match &self.zipf {
            None => rng.random_range(0..self.n),
            Some(z) => {
                let rank = (z.sample(rng) as u64).clamp(1, self.n) - 1;
                self.perm[rank as usize] as u64
            }
        }
    }
}

/// `len` ids drawn from `dist` over `0..ids`.
pub fn trace(ids: u64, dist: KeyDist, len: usize, seed: u64) -> Result<Vec<u64>, DistError> {
    let s = KeySampler::new(ids, dist, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..len).map(|_| s.sample(&mut rng)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse() {
        assert_eq!("uniform".parse(), Ok(KeyDist::Uniform));
        assert_eq!("zipf:0.99".parse(), Ok(KeyDist::Zipf(0.99)));
        assert!("zipf:-1".parse::<KeyDist>().is_err());
        assert!("normal".parse::<KeyDist>().is_err());
    }

    #[test]
    fn zipf_is_skewed_and_in_range() {
        let t = trace(1000, KeyDist::Zipf(0.99), 50_000, 3).unwrap();
        assert!(t.iter().all(|&x| x < 1000));
        let mut counts = vec![0u32; 1000];
        for &x in &t {
            counts[x as usize] += 1;
        }
        counts.sort_unstable_by(|a, b| b.cmp(a));
        let top10: u32 = counts[..10].iter().sum();
        assert!(top10 as usize > t.len() / 5);
    }

    #[test]
    fn deterministic() {
        assert_eq!(
            trace(100, KeyDist::Zipf(0.8), 100, 9).unwrap(),
            trace(100, KeyDist::Zipf(0.8), 100, 9).unwrap()
        );
    }
}
