use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub max_new_tokens: usize,
    pub temperature: f32,
    /// 0 disables top-k truncation.
    pub top_k: usize,
    pub top_p: f32,
    pub repeat_last_n: usize,
    pub repeat_penalty: f32,
    pub seed: u64,
    /// Generation stops after emitting this token.
    pub eos_token: Option<u32>,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            max_new_tokens: 32,
            temperature: 0.0,
            top_k: 40,
            top_p: 0.95,
            repeat_last_n: 64,
            repeat_penalty: 1.1,
            seed: 42,
            eos_token: Some(crate::textio::EOS),
        }
    }
}

impl GenerationParams {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be at least 1".into()));
        }
        if self.top_k > vocab_size {
            return Err(Error::Config(format!(
                "top_k {} exceeds vocabulary size {vocab_size}",
                self.top_k
            )));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(Error::Config("temperature must be finite and >= 0".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config("top_p must lie in (0, 1]".into()));
        }
        if !(self.repeat_penalty.is_finite() && self.repeat_penalty >= 1.0) {
            return Err(Error::Config("repeat_penalty must be >= 1".into()));
        }
        Ok(())
    }

    pub fn is_greedy(&self) -> bool {
        self.temperature == 0.0 || self.top_k == 1
    }
}

/// Lowest index among the maximal finite entries.
pub fn argmax(logits: &[f32]) -> Option<u32> {
    let mut best: Option<(usize, f32)> = None;
    for (i, &v) in logits.iter().enumerate() {
        if v == f32::NEG_INFINITY || v.is_nan() {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i as u32)
}

/// Picks the next token.
///
/// The repeat penalty always applies to the last `repeat_last_n` entries of
/// `recent`. Greedy settings return the argmax; otherwise candidates are cut
/// by top-k, then by the top-p nucleus (on unit-temperature probabilities),
/// and one is drawn from the temperature-scaled distribution.
pub fn sample<R: Rng + ?Sized>(
    logits: &[f32],
    recent: &[u32],
    params: &GenerationParams,
    rng: &mut R,
) -> Result<u32> {
    let mut logits = logits.to_vec();
    if params.repeat_penalty != 1.0 && params.repeat_last_n > 0 {
        let window = &recent[recent.len().saturating_sub(params.repeat_last_n)..];
        let mut seen = vec![false; logits.len()];
        for &tok in window {
            let i = tok as usize;
            if i < logits.len() && !seen[i] {
                seen[i] = true;
                let l = &mut logits[i];
                if *l > 0.0 {
                    *l /= params.repeat_penalty;
                } else {
                    *l *= params.repeat_penalty;
                }
            }
        }
    }

    if params.is_greedy() {
        return argmax(&logits).ok_or_else(|| Error::Sampling("all logits are -inf".into()));
    }

    let mut cands: Vec<(u32, f32)> = logits
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .map(|(i, &v)| (i as u32, v))
        .collect();
    cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    if params.top_k > 0 {
        cands.truncate(params.top_k);
    }
    if cands.is_empty() {
        return Err(Error::Sampling("no finite logits left after truncation".into()));
    }

    if params.top_p < 1.0 {
        let probs = softmax(cands.iter().map(|c| c.1), 1.0);
        let mut cum = 0.0;
        let mut keep = probs.len();
        for (i, p) in probs.iter().enumerate() {
            cum += p;
            if cum >= params.top_p as f64 {
                keep = i + 1;
                break;
            }
        }
        cands.truncate(keep);
    }

    let probs = softmax(cands.iter().map(|c| c.1), params.temperature as f64);
    let mut r = rng.random::<f64>();
    for (c, p) in cands.iter().zip(&probs) {
        if r < *p {
            return Ok(c.0);
        }
        r -= p;
    }
    Ok(cands[cands.len() - 1].0)
}

fn softmax(values: impl Iterator<Item = f32> + Clone, temperature: f64) -> Vec<f64> {
    let max = values.clone().fold(f64::NEG_INFINITY, |m, v| m.max(v as f64));
    let exps: Vec<f64> = values.map(|v| ((v as f64 - max) / temperature).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn params() -> GenerationParams {
        GenerationParams {
            repeat_penalty: 1.0,
            ..GenerationParams::default()
        }
    }

    #[test]
    fn greedy_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample(&[0.1, 2.0, 0.3], &[], &params(), &mut rng).unwrap(), 1);
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), Some(1));
    }

    #[test]
    fn top_k_one_matches_greedy() {
        let logits = [0.5, -1.0, 0.49, 2.5, 2.4];
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = GenerationParams {
                temperature: 0.9,
                top_k: 1,
                ..params()
            };
            assert_eq!(sample(&logits, &[], &p, &mut rng).unwrap(), 3);
        }
    }

    #[test]
    fn repeat_penalty_flips_tie() {
        let p = GenerationParams {
            repeat_last_n: 1,
            repeat_penalty: 2.0,
            ..params()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample(&[1.0, 1.0], &[0], &p, &mut rng).unwrap(), 1);
        // negative logits are pushed further down
        assert_eq!(sample(&[-1.0, -1.5], &[0], &p, &mut rng).unwrap(), 1);
        // outside the window: no penalty
        assert_eq!(sample(&[1.0, 1.0], &[0, 1], &p, &mut rng).unwrap(), 0);
    }

    #[test]
    fn all_neg_inf_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = [f32::NEG_INFINITY; 3];
        assert!(matches!(sample(&logits, &[], &params(), &mut rng), Err(Error::Sampling(_))));
        let p = GenerationParams {
            temperature: 1.0,
            ..params()
        };
        assert!(matches!(sample(&logits, &[], &p, &mut rng), Err(Error::Sampling(_))));
    }

    #[test]
    fn nucleus_keeps_dominant_token() {
        let p = GenerationParams {
            temperature: 1.0,
            top_k: 0,
            top_p: 0.5,
            ..params()
        };
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            assert_eq!(sample(&[5.0, 0.0, 0.0, 0.0], &[], &p, &mut rng).unwrap(), 0);
        }
    }

    #[test]
    fn seeded_draws_are_reproducible() {
        let logits: Vec<f32> = (0..50).map(|i| (i as f32 * 0.37).sin()).collect();
        let p = GenerationParams {
            temperature: 0.8,
            top_k: 20,
            top_p: 0.9,
            ..params()
        };
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..10).map(|_| sample(&logits, &[], &p, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
    }

    #[test]
    fn validation() {
        assert!(params().validate(259).is_ok());
        let bad = GenerationParams {
            top_k: 300,
            ..params()
        };
        assert!(bad.validate(259).is_err());
        let bad = GenerationParams {
            max_new_tokens: 0,
            ..params()
        };
        assert!(bad.validate(259).is_err());
    }
}
