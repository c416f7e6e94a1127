//! PLTR activation-trace files.
//!
//! One file holds the per-sample activation masks of a single language:
//!
//! ```text
//! magic     "PLTR"
//! version   u32 = 1
//! n_layers  u32
//! d_inter   u32
//! n_samples u32
//! lang      u16 byte length, then UTF-8 language tag (BCP-47)
//! payload   n_samples × n_layers × ceil(d_inter/64) little-endian u64 words,
//!           sample-major, then layer, then word; bit j of the mask lives in
//!           word j/64 at bit position j%64; padding bits are zero
//! ```
//!
//! All integers are little-endian regardless of host.

use std::fmt;
use std::fs;
use std::path::Path;

use crate::bitset::{words_for, NeuronMask, WORD_BITS};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PLTR";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceFile {
    pub n_layers: u32,
    pub d_inter: u32,
    /// BCP-47 language tag.
    pub language: String,
    pub n_samples: u32,
    /// Raw mask words; see the module docs for the order.
    pub payload: Vec<u64>,
}

impl TraceFile {
    /// Builds a trace from `masks[sample][layer]`.
    pub fn from_masks(
        language: impl Into<String>,
        n_layers: usize,
        d_inter: usize,
        masks: &[Vec<NeuronMask>],
    ) -> Result<Self> {
        let mut payload = Vec::with_capacity(masks.len() * n_layers * words_for(d_inter));
        for (s, sample) in masks.iter().enumerate() {
            if sample.len() != n_layers {
                return Err(Error::DimensionMismatch(format!(
                    "sample {s} has {} layers, expected {n_layers}",
                    sample.len()
                )));
            }
            for m in sample {
                if m.width() != d_inter {
                    return Err(Error::DimensionMismatch(format!(
                        "mask width {} vs d_inter {d_inter}",
                        m.width()
                    )));
                }
                payload.extend_from_slice(m.words());
            }
        }
        Ok(Self {
            n_layers: n_layers as u32,
            d_inter: d_inter as u32,
            language: language.into(),
            n_samples: masks.len() as u32,
            payload,
        })
    }

    pub fn words_per_mask(&self) -> usize {
        words_for(self.d_inter as usize)
    }

    pub fn expected_payload_words(&self) -> usize {
        self.n_samples as usize * self.n_layers as usize * self.words_per_mask()
    }

    pub fn expected_payload_bytes(&self) -> usize {
        self.expected_payload_words() * 8
    }

    /// Mask of `sample` at 1-based `layer`.
    pub fn mask(&self, sample: usize, layer: usize) -> Result<NeuronMask> {
        if sample >= self.n_samples as usize {
            return Err(Error::DimensionMismatch(format!(
                "sample {sample} of {}",
                self.n_samples
            )));
        }
        if layer == 0 || layer > self.n_layers as usize {
            return Err(Error::LayerIndex {
                index: layer,
                n_layers: self.n_layers as usize,
            });
        }
        let wpm = self.words_per_mask();
        let start = (sample * self.n_layers as usize + layer - 1) * wpm;
        let words = self.payload.get(start..start + wpm).ok_or(Error::Truncated {
            expected: (start + wpm) * 8,
            found: self.payload.len() * 8,
        })?;
        Ok(NeuronMask::from_words(self.d_inter as usize, words.to_vec()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let lang = self.language.as_bytes();
        let lang_len = u16::try_from(lang.len())
            .map_err(|_| Error::Format("language tag longer than 65535 bytes".into()))?;
        let mut out = Vec::with_capacity(22 + lang.len() + self.payload.len() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.n_layers.to_le_bytes());
        out.extend_from_slice(&self.d_inter.to_le_bytes());
        out.extend_from_slice(&self.n_samples.to_le_bytes());
        out.extend_from_slice(&lang_len.to_le_bytes());
        out.extend_from_slice(lang);
        for w in &self.payload {
            out.extend_from_slice(&w.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = |n: usize| -> Result<&[u8]> {
            bytes.get(..n).ok_or(Error::Truncated {
                expected: n,
                found: bytes.len(),
            })
        };
        let h = header(22)?;
        if &h[..4] != MAGIC {
            return Err(Error::Format("bad trace magic (expected PLTR)".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(h[o..o + 4].try_into().expect("4 bytes"));
        let version = u32_at(4);
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let (n_layers, d_inter, n_samples) = (u32_at(8), u32_at(12), u32_at(16));
        let lang_len = u16::from_le_bytes([h[20], h[21]]) as usize;
        let lang_end = 22 + lang_len;
        let language = std::str::from_utf8(header(lang_end)?.get(22..).unwrap_or_default())
            .map_err(|e| Error::Format(format!("language tag is not UTF-8: {e}")))?
            .to_string();
        let mut trace = Self {
            n_layers,
            d_inter,
            language,
            n_samples,
            payload: Vec::new(),
        };
        let body = &bytes[lang_end..];
        let expected = trace.expected_payload_bytes();
        if body.len() < expected {
            return Err(Error::Truncated {
                expected,
                found: body.len(),
            });
        }
        if body.len() > expected {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                body.len() - expected
            )));
        }
        trace.payload = body
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(trace)
    }

    /// Structural checks; an empty list means the trace is well formed.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.language.trim().is_empty() {
            out.push(Violation::EmptyLanguage);
        }
        if self.n_samples == 0 {
            out.push(Violation::NoSamples);
        }
        if self.n_layers == 0 {
            out.push(Violation::NoLayers);
        }
        if self.d_inter == 0 {
            out.push(Violation::ZeroWidth);
        }
        let expected = self.expected_payload_words();
        if self.payload.len() != expected {
            out.push(Violation::PayloadLength {
                expected_words: expected,
                actual_words: self.payload.len(),
            });
        } else {
            let tail = self.d_inter as usize % WORD_BITS;
            let wpm = self.words_per_mask();
            if tail != 0 && wpm > 0 {
                let pad_mask = !((1u64 << tail) - 1);
                for (i, chunk) in self.payload.chunks(wpm).enumerate() {
                    if chunk[wpm - 1] & pad_mask != 0 {
                        out.push(Violation::PaddingBits {
                            sample: i / self.n_layers.max(1) as usize,
                            layer: i % self.n_layers.max(1) as usize + 1,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyLanguage,
    NoSamples,
    NoLayers,
    ZeroWidth,
    PayloadLength {
        expected_words: usize,
        actual_words: usize,
    },
    PaddingBits {
        sample: usize,
        layer: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyLanguage => write!(f, "language tag is empty"),
            Violation::NoSamples => write!(f, "n_samples is 0"),
            Violation::NoLayers => write!(f, "n_layers is 0"),
            Violation::ZeroWidth => write!(f, "d_inter is 0"),
            Violation::PayloadLength {
                expected_words,
                actual_words,
            } => write!(
                f,
                "payload length: expected {expected_words} words ({} bytes), found {actual_words} words ({} bytes)",
                expected_words * 8,
                actual_words * 8
            ),
            Violation::PaddingBits { sample, layer } => {
                write!(f, "non-zero padding bits in sample {sample}, layer {layer}")
            }
        }
    }
}

pub fn write_trace(trace: &TraceFile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, trace.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<TraceFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    TraceFile::from_bytes(&bytes)
}

/// Reads every `*.pltr` file of a directory, sorted by file name.
pub fn read_trace_dir(dir: impl AsRef<Path>) -> Result<Vec<TraceFile>> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pltr"))
        .collect();
    paths.sort();
    paths.into_iter().map(read_trace).collect()
}
