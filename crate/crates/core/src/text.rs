//! Prompt handling and a deterministic stand-in text encoder.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Error, Result};

/// Appends a style keyword to a prompt: `"a castle" + "paprika"` → `"a castle, paprika"`.
pub fn build_prompt(base: &str, style_keyword: &str) -> Result<String> {
    if base.trim().is_empty() {
        return Err(Error::contract("prompt must not be empty"));
    }
    Ok(if style_keyword.is_empty() {
        base.to_string()
    } else {
        format!("{base}, {style_keyword}")
    })
}

/// Bag-of-words embedding: each lower-cased word seeds a Gaussian vector,
/// the vectors are averaged and scaled to unit norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyTextEncoder {
    pub dim: usize,
}

fn word_seed(word: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in word.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl ToyTextEncoder {
    pub fn encode_vec(&self, prompt: &str) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        let words: Vec<String> = prompt
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(|w| w.to_lowercase())
            .collect();
        for w in &words {
            let mut rng = ChaCha8Rng::seed_from_u64(word_seed(w));
            for a in acc.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *a += z;
            }
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            acc.iter_mut().for_each(|v| *v /= norm);
        }
        acc
    }

    pub fn encode(&self, prompt: &str, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.encode_vec(prompt), self.dim, device)?.to_dtype(dtype)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_keywords() {
        assert_eq!(build_prompt("a castle", "").unwrap(), "a castle");
        assert_eq!(
            build_prompt("a castle", "paprika").unwrap(),
            "a castle, paprika"
        );
        assert_eq!(
            build_prompt("a room", "paprika").unwrap(),
            "a room, paprika"
        );
        assert!(build_prompt("", "soft light").is_err());
    }

    #[test]
    fn embeddings_are_deterministic_and_keyword_sensitive() {
        let enc = ToyTextEncoder { dim: 8 };
        assert_eq!(enc.encode_vec("a castle"), enc.encode_vec("A  castle"));
        assert_ne!(
            enc.encode_vec("a castle"),
            enc.encode_vec("a castle, paprika")
        );
        assert!(enc.encode_vec("").iter().all(|v| *v == 0.0));
        let n: f64 = enc.encode_vec("soft light").iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }
}
