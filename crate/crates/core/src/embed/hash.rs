//! Deterministic character n-gram hashing embedder.

use super::EMBED_DIM;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashEmbedder {
    ngram_sizes: Vec<usize>,
    index_key: u64,
    sign_key: u64,
}

impl HashEmbedder {
    pub fn new(ngram_sizes: &[usize], seed: u64) -> Self {
        Self {
            ngram_sizes: ngram_sizes.to_vec(),
            index_key: mix(seed ^ 0x1D1D_1D1D_1D1D_1D1D),
            sign_key: mix(seed ^ 0x5151_5151_5151_5151),
        }
    }

    pub fn ngram_sizes(&self) -> &[usize] {
        &self.ngram_sizes
    }

    /// Unit-norm embedding of `text`; the empty string maps to e₀.
    pub fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; EMBED_DIM];
        if text.is_empty() {
            v[0] = 1.0;
            return v;
        }
        let chars: Vec<char> = std::iter::once('^')
            .chain(text.chars())
            .chain(std::iter::once('$'))
            .collect();
        let mut buf = String::new();
        for &n in &self.ngram_sizes {
            if n == 0 || n > chars.len() {
                continue;
            }
            for w in chars.windows(n) {
                buf.clear();
                buf.extend(w);
                let h = fnv1a(buf.as_bytes());
                let idx = (mix(h ^ self.index_key) % EMBED_DIM as u64) as usize;
                let sign = if mix(h ^ self.sign_key) & 1 == 0 {
                    1.0
                } else {
                    -1.0
                };
                v[idx] += sign;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // every n-gram cancelled or the text is shorter than all sizes
            v[0] = 1.0;
        } else {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}
