//! Seeded synthetic datasets standing in for real corpora.
//!
//! Specs use a URI-like syntax, e.g. `synthetic:blobs?classes=10&n=2000&seed=7`
//! or `synthetic:prompts?kind=rte&n=500&seed=3`.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::profiles::profile_for;
use super::prompts::{format_prompt, truncate_tokens, DatasetKind, PromptTemplate, ALPACA};
use super::{parse_query, Dataset, TaskDataError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 0x7261_696e,
            Split::Val => 0x0076_616c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "lowercase")]
pub enum GeneratorSpec {
    /// Gaussian clusters around random centers, balanced labels.
    Blobs {
        classes: usize,
        n: usize,
        dim: usize,
        spread: f64,
        seed: u64,
        split: Split,
    },
    /// Alpaca-formatted toy prompts turned into hashed bag-of-words features.
    Prompts {
        kind: DatasetKind,
        n: usize,
        dim: usize,
        max_tokens: usize,
        noise: f64,
        seed: u64,
        split: Split,
    },
}

const DEFAULT_BLOB_DIM: usize = 16;
const DEFAULT_PROMPT_DIM: usize = 256;

fn bad(msg: impl Into<String>) -> TaskDataError {
    TaskDataError::BadGeneratorParams(msg.into())
}

fn take<T: std::str::FromStr>(
    params: &mut BTreeMap<String, String>,
    key: &str,
    default: Option<T>,
) -> Result<T, TaskDataError> {
    match params.remove(key) {
        Some(v) => v.parse().map_err(|_| bad(format!("cannot parse {key}={v}"))),
        None => default.ok_or_else(|| bad(format!("missing parameter {key}"))),
    }
}

impl GeneratorSpec {
    /// Parses `synthetic:<generator>?k=v&...` (the `synthetic:` prefix is optional).
    pub fn parse(spec: &str) -> Result<Self, TaskDataError> {
        let body = spec.strip_prefix("synthetic:").unwrap_or(spec);
        let (name, query) = body.split_once('?').unwrap_or((body, ""));
        let mut params = parse_query(query)?;
        let split = match params.remove("split").as_deref() {
            None | Some("train") => Split::Train,
            Some("val") => Split::Val,
            Some(other) => return Err(bad(format!("unknown split {other}"))),
        };
        let parsed = match name {
            "blobs" => GeneratorSpec::Blobs {
                classes: take(&mut params, "classes", None)?,
                n: take(&mut params, "n", None)?,
                dim: take(&mut params, "dim", Some(DEFAULT_BLOB_DIM))?,
                spread: take(&mut params, "spread", Some(1.0))?,
                seed: take(&mut params, "seed", Some(0))?,
                split,
            },
            "prompts" => {
                let kind: DatasetKind = params
                    .remove("kind")
                    .ok_or_else(|| bad("missing parameter kind"))?
                    .parse()?;
                GeneratorSpec::Prompts {
                    kind,
                    n: take(&mut params, "n", None)?,
                    dim: take(&mut params, "dim", Some(DEFAULT_PROMPT_DIM))?,
                    max_tokens: take(&mut params, "max_tokens", Some(profile_for(kind).max_token_length))?,
                    noise: take(&mut params, "noise", Some(0.1))?,
                    seed: take(&mut params, "seed", Some(0))?,
                    split,
                }
            }
            other => return Err(bad(format!("unknown generator {other:?}"))),
        };
        if let Some(k) = params.keys().next() {
            return Err(bad(format!("unknown parameter {k}")));
        }
        parsed.validate()?;
        Ok(parsed)
    }

    pub fn validate(&self) -> Result<(), TaskDataError> {
        match *self {
            GeneratorSpec::Blobs {
                classes, n, dim, spread, ..
            } => {
                if n == 0 {
                    return Err(bad("n must be positive"));
                }
                if classes == 0 || dim == 0 {
                    return Err(bad("classes and dim must be positive"));
                }
                if !(spread >= 0.0 && spread.is_finite()) {
                    return Err(bad("spread must be finite and non-negative"));
                }
            }
            GeneratorSpec::Prompts {
                n, dim, max_tokens, noise, ..
            } => {
                if n == 0 || dim == 0 || max_tokens == 0 {
                    return Err(bad("n, dim and max_tokens must be positive"));
                }
                if !(0.0..=1.0).contains(&noise) {
                    return Err(bad("noise must lie in [0, 1]"));
                }
            }
        }
        Ok(())
    }

    pub fn with_split(&self, split: Split) -> Self {
        let mut out = self.clone();
        match &mut out {
            GeneratorSpec::Blobs { split: s, .. } | GeneratorSpec::Prompts { split: s, .. } => *s = split,
        }
        out
    }
}

/// Generates the dataset described by `spec`.
pub fn synth_dataset(spec: &GeneratorSpec) -> Result<Dataset, TaskDataError> {
    spec.validate()?;
    match *spec {
        GeneratorSpec::Blobs {
            classes,
            n,
            dim,
            spread,
            seed,
            split,
        } => Ok(blobs(classes, n, dim, spread, seed, split)),
        GeneratorSpec::Prompts {
            kind,
            n,
            dim,
            max_tokens,
            noise,
            seed,
            split,
        } => prompts(kind, n, dim, max_tokens, noise, seed, split),
    }
}

pub fn synth_from_str(spec: &str) -> Result<Dataset, TaskDataError> {
    synth_dataset(&GeneratorSpec::parse(spec)?)
}

fn blobs(classes: usize, n: usize, dim: usize, spread: f64, seed: u64, split: Split) -> Dataset {
    // Centers depend only on the seed, so train and val share them.
    let mut center_rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<f64> = (0..classes * dim)
        .map(|_| center_rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ split.stream().rotate_left(32));
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut features = Array2::<f64>::zeros((n, dim));
    for (i, &label) in labels.iter().enumerate() {
        for j in 0..dim {
            let noise: f64 = rng.sample(StandardNormal);
            features[[i, j]] = centers[label * dim + j] + spread * noise;
        }
    }
    Dataset::new(features, labels, classes).expect("generator output is consistent")
}

const FILLER_VOCAB: usize = 400;

fn prompts(
    kind: DatasetKind,
    n: usize,
    dim: usize,
    max_tokens: usize,
    noise: f64,
    seed: u64,
    split: Split,
) -> Result<Dataset, TaskDataError> {
    let template = PromptTemplate::for_kind(kind);
    let classes = template.answers.len();
    let fields = template.fields();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ split.stream().rotate_left(32));
    let mut features = Array2::<f64>::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    for row in 0..n {
        let label = row % classes;
        let mut sample = BTreeMap::new();
        for &field in &fields {
            let long = matches!(field, "passage" | "paragraph" | "text");
            let len = if long { rng.random_range(20..60) } else { rng.random_range(3..12) };
            let words: Vec<String> = (0..len)
                .map(|_| format!("w{}", rng.random_range(0..FILLER_VOCAB)))
                .collect();
            sample.insert(field.to_string(), words.join(" "));
        }
        // One class cue word, occasionally replaced by a random class's cue.
        let cue = if rng.random_bool(noise) {
            rng.random_range(0..classes)
        } else {
            label
        };
        let field = *fields.choose(&mut rng).expect("templates have fields");
        let text = sample.get_mut(field).expect("field was inserted");
        let mut words: Vec<&str> = text.split(' ').collect();
        let cue_word = format!("cue{cue}");
        let at = rng.random_range(0..=words.len());
        words.insert(at, &cue_word);
        *text = words.join(" ");

        let rendered = ALPACA.wrap(&format_prompt(kind, &sample)?);
        let tokens = truncate_tokens(&rendered, max_tokens);
        for tok in &tokens {
            features[[row, (fnv1a(tok.as_bytes()) % dim as u64) as usize]] += 1.0;
        }
        let norm = features.row(row).dot(&features.row(row)).sqrt();
        if norm > 0.0 {
            features.row_mut(row).mapv_inplace(|v| v / norm);
        }
        labels.push(label);
    }
    Dataset::new(features, labels, classes)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
