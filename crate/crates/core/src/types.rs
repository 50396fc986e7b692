//! Domain types shared by every module: embeddings, speakers, trials, and
//! the impostor bank.

use crate::error::{Error, Result};

/// A fixed-dimension real vector representing one utterance (or one
/// averaged enrollment). Components must be finite; the dimension must
/// agree across every embedding used in one operation.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "embedding components".into(),
            });
        }
        Ok(Embedding { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Unit-norm copy. Errors on a zero vector.
    pub fn normalized(&self) -> Result<Embedding> {
        let n = self.l2_norm();
        if n == 0.0 {
            return Err(Error::ZeroNorm);
        }
        Ok(Embedding {
            values: self.values.iter().map(|v| v / n).collect(),
        })
    }
}

/// Opaque speaker identifier, optionally carrying the class index this
/// speaker occupies in an impostor bank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpeakerId {
    pub name: String,
    pub class: Option<usize>,
}

impl SpeakerId {
    pub fn new(name: impl Into<String>) -> Self {
        SpeakerId {
            name: name.into(),
            class: None,
        }
    }

    pub fn with_class(name: impl Into<String>, class: usize) -> Self {
        SpeakerId {
            name: name.into(),
            class: Some(class),
        }
    }
}

/// A training-time utterance: an embedding tied to a speaker whose class
/// index is valid for the bank in use.
#[derive(Debug, Clone)]
pub struct LabeledEmbedding {
    pub embedding: Embedding,
    pub speaker: SpeakerId,
}

impl LabeledEmbedding {
    pub fn class(&self) -> Result<usize> {
        self.speaker.class.ok_or(Error::MissingClassIndex)
    }
}

/// Trial label: target (same speaker), non-target, or unlabeled (pure
/// scoring runs only; metrics refuse unlabeled trials).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrialLabel {
    Target,
    NonTarget,
    Unlabeled,
}

/// One verification question: does `test_id` belong to the speaker
/// enrolled by `enroll_ids`? Multiple enrollment utterances are averaged
/// before scoring.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub enroll_ids: Vec<String>,
    pub test_id: String,
    pub label: TrialLabel,
}

impl Trial {
    pub fn new(enroll_ids: Vec<String>, test_id: impl Into<String>, label: TrialLabel) -> Result<Self> {
        if enroll_ids.is_empty() {
            return Err(Error::EmptyInput);
        }
        Ok(Trial {
            enroll_ids,
            test_id: test_id.into(),
            label,
        })
    }

    /// Cache key for per-enrollment statistics (order-sensitive on purpose:
    /// the averaged embedding is order-invariant, but keys stay cheap).
    pub fn enroll_key(&self) -> String {
        self.enroll_ids.join(",")
    }
}

pub type TrialList = Vec<Trial>;

/// The impostor bank: `C` speakers, each with `n_sub` centers of dimension
/// `V`. With `n_sub == 1` this is exactly the classical impostor-embedding
/// set of shape `C x V`. Centers are stored row-major as
/// `centers[(c * n_sub + j) * dim ..][..dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpostorBank {
    speakers: Vec<SpeakerId>,
    centers: Vec<f64>,
    n_sub: usize,
    dim: usize,
    pub trainable: bool,
}

impl ImpostorBank {
    pub fn new(speakers: Vec<SpeakerId>, centers: Vec<f64>, n_sub: usize, dim: usize) -> Result<Self> {
        if speakers.is_empty() || n_sub == 0 || dim == 0 {
            return Err(Error::InvalidConfig(
                "bank needs C >= 1, N_sub >= 1, V >= 1".into(),
            ));
        }
        if centers.len() != speakers.len() * n_sub * dim {
            return Err(Error::InvalidConfig(format!(
                "center tensor has {} entries, expected {}",
                centers.len(),
                speakers.len() * n_sub * dim
            )));
        }
        if centers.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "bank centers".into(),
            });
        }
        for (c, s) in speakers.iter().enumerate() {
            match s.class {
                Some(cls) if cls == c => {}
                _ => {
                    return Err(Error::InvalidConfig(format!(
                        "speaker {} must carry class index {}",
                        s.name, c
                    )))
                }
            }
        }
        Ok(ImpostorBank {
            speakers,
            centers,
            n_sub,
            dim,
            trainable: false,
        })
    }

    /// Bank over plain `C x V` rows (one center per speaker); speakers are
    /// assigned class indices by position.
    pub fn from_rows(names: Vec<String>, rows: Vec<f64>, dim: usize) -> Result<Self> {
        let speakers = names
            .into_iter()
            .enumerate()
            .map(|(c, n)| SpeakerId::with_class(n, c))
            .collect();
        ImpostorBank::new(speakers, rows, 1, dim)
    }

    pub fn len(&self) -> usize {
        self.speakers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speakers.is_empty()
    }

    pub fn n_sub(&self) -> usize {
        self.n_sub
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn speakers(&self) -> &[SpeakerId] {
        &self.speakers
    }

    pub fn class_of(&self, speaker_name: &str) -> Option<usize> {
        self.speakers.iter().position(|s| s.name == speaker_name)
    }

    /// Center `(c, j)` as a slice of length `dim`.
    pub fn center(&self, c: usize, j: usize) -> &[f64] {
        let start = (c * self.n_sub + j) * self.dim;
        &self.centers[start..start + self.dim]
    }

    /// Flat center tensor (`C * n_sub` rows by `dim`, row-major).
    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    /// Mutable access for the trainer (single writer by contract).
    pub fn centers_mut(&mut self) -> &mut [f64] {
        &mut self.centers
    }
}

/// Component-wise arithmetic mean of enrollment embeddings. Averaging
/// happens on the raw vectors; cosine scoring normalizes afterwards.
pub fn average_enrollment(embs: &[Embedding]) -> Result<Embedding> {
    let first = embs.first().ok_or(Error::EmptyInput)?;
    let dim = first.dim();
    let mut acc = vec![0.0; dim];
    for e in embs {
        if e.dim() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                got: e.dim(),
            });
        }
        for (a, v) in acc.iter_mut().zip(e.values()) {
            *a += v;
        }
    }
    let n = embs.len() as f64;
    for a in acc.iter_mut() {
        *a /= n;
    }
    Embedding::new(acc)
}
