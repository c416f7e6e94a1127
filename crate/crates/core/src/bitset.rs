//! Fixed-width bit set over neuron indices, packed into `u64` words.

use serde::{Serialize, Serializer};

pub const WORD_BITS: usize = 64;

pub fn words_for(width: usize) -> usize {
    width.div_ceil(WORD_BITS)
}

/// Activation mask of one layer: bit `j` set means neuron `j` fired.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NeuronMask {
    width: usize,
    words: Vec<u64>,
}

impl NeuronMask {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            words: vec![0; words_for(width)],
        }
    }

    pub fn full(width: usize) -> Self {
        let mut m = Self::new(width);
        for j in 0..width {
            m.insert(j);
        }
        m
    }

    /// From raw words; bits at or beyond `width` are cleared.
    pub fn from_words(width: usize, mut words: Vec<u64>) -> Self {
        words.resize(words_for(width), 0);
        let tail = width % WORD_BITS;
        if tail != 0 {
            if let Some(last) = words.last_mut() {
                *last &= (1u64 << tail) - 1;
            }
        }
        Self { width, words }
    }

    pub fn from_indices(width: usize, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut m = Self::new(width);
        for j in indices {
            m.insert(j);
        }
        m
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn insert(&mut self, j: usize) {
        assert!(j < self.width, "bit {j} out of width {}", self.width);
        self.words[j / WORD_BITS] |= 1 << (j % WORD_BITS);
    }

    pub fn contains(&self, j: usize) -> bool {
        j < self.width && self.words[j / WORD_BITS] >> (j % WORD_BITS) & 1 == 1
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn union_with(&mut self, other: &NeuronMask) {
        assert_eq!(self.width, other.width, "width mismatch in union");
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= b;
        }
    }

    pub fn intersection_count(&self, other: &NeuronMask) -> usize {
        assert_eq!(self.width, other.width, "width mismatch in intersection");
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum()
    }

    pub fn is_subset(&self, other: &NeuronMask) -> bool {
        self.words.iter().zip(&other.words).all(|(a, b)| a & !b == 0)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut w = w;
            std::iter::from_fn(move || {
                if w == 0 {
                    return None;
                }
                let b = w.trailing_zeros() as usize;
                w &= w - 1;
                Some(wi * WORD_BITS + b)
            })
        })
    }
}

impl Serialize for NeuronMask {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(self.iter())
    }
}
