//! Text embedders used by the edit memory.
//!
//! [`ReferenceEmbedder`] is a deterministic signed feature-hashing embedder:
//! the same text yields bit-identical vectors on every platform. It stands in
//! for a sentence-embedding model in tests and desk-scale runs.
//! [`RemoteEmbedder`] talks to an embedding service over JSON/HTTP.

use std::fmt;
use std::sync::OnceLock;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::http::{self, HttpError, RetryPolicy};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Separator joining the two words of a bigram feature.
pub const BIGRAM_JOINER: char = '\u{1f}';

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EmbedError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("invalid embedder config: {0}")]
    Config(String),
    #[error(transparent)]
    Http(#[from] HttpError),
    #[error("request {request_id}: {message}")]
    Protocol { request_id: String, message: String },
}

/// A dense embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }

    /// Scales to unit L2 norm; the zero vector is left unchanged.
    pub fn normalized(mut self) -> Self {
        let norm = self.norm();
        if norm > 0.0 {
            for v in &mut self.0 {
                *v /= norm;
            }
        }
        self
    }
}

/// Inner product of two equal-length vectors.
pub fn dot(u: &Vector, v: &Vector) -> Result<f64, EmbedError> {
    if u.dim() != v.dim() {
        return Err(EmbedError::DimensionMismatch {
            left: u.dim(),
            right: v.dim(),
        });
    }
    Ok(u.0.iter().zip(&v.0).map(|(a, b)| a * b).sum())
}

/// Identifies an embedding space. Vectors from different fingerprints are
/// not comparable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderFingerprint {
    pub kind: String,
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
}

impl fmt::Display for EmbedderFingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(dim={}", self.kind, self.dim)?;
        if let Some(seed) = self.seed {
            write!(f, ", seed={seed}")?;
        }
        if let Some(model) = &self.model {
            write!(f, ", model={model}")?;
        }
        f.write_str(")")
    }
}

/// Contract shared by every embedder: deterministic per instance, fixed
/// dimension, L2-normalized output (zero only for empty text).
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    fn fingerprint(&self) -> EmbedderFingerprint;

    fn embed(&self, text: &str) -> Result<Vector, EmbedError>;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vector>, EmbedError> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReferenceEmbedderConfig {
    pub dim: usize,
    pub seed: u64,
}

impl Default for ReferenceEmbedderConfig {
    fn default() -> Self {
        Self { dim: 256, seed: 0 }
    }
}

impl ReferenceEmbedderConfig {
    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.dim < 8 {
            return Err(EmbedError::Config(format!(
                "dim must be >= 8, got {}",
                self.dim
            )));
        }
        Ok(())
    }
}

/// 64-bit FNV-1a whose offset basis is XORed with `seed`.
pub fn fnv1a_seeded(bytes: &[u8], seed: u64) -> u64 {
    let mut h = FNV_OFFSET ^ seed;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Hashing features of `text`: lowercased word unigrams, word bigrams joined
/// by U+001F, and character trigrams of the whitespace-normalized string.
pub fn reference_features(text: &str) -> Vec<String> {
    let lowered = text.to_lowercase();
    let words: Vec<&str> = lowered.split_whitespace().collect();
    let mut features: Vec<String> = words.iter().map(|w| (*w).to_string()).collect();
    features.extend(
        words
            .windows(2)
            .map(|pair| format!("{}{BIGRAM_JOINER}{}", pair[0], pair[1])),
    );
    let normalized: Vec<char> = words.join(" ").chars().collect();
    features.extend(
        normalized
            .windows(3)
            .map(|tri| tri.iter().collect::<String>()),
    );
    features
}

/// Signed feature-hashing embedding of `text`.
pub fn reference_embed(text: &str, cfg: &ReferenceEmbedderConfig) -> Vector {
    let mut acc = vec![0.0f64; cfg.dim];
    let dim = cfg.dim as u64;
    for feature in reference_features(text) {
        let h = fnv1a_seeded(feature.as_bytes(), cfg.seed);
        let bucket = (h % dim) as usize;
        if h >> 63 == 0 {
            acc[bucket] += 1.0;
        } else {
            acc[bucket] -= 1.0;
        }
    }
    Vector(acc).normalized()
}

#[derive(Debug, Clone, Default)]
pub struct ReferenceEmbedder {
    cfg: ReferenceEmbedderConfig,
}

impl ReferenceEmbedder {
    pub fn new(cfg: ReferenceEmbedderConfig) -> Result<Self, EmbedError> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &ReferenceEmbedderConfig {
        &self.cfg
    }
}

impl Embedder for ReferenceEmbedder {
    fn dim(&self) -> usize {
        self.cfg.dim
    }

    fn fingerprint(&self) -> EmbedderFingerprint {
        EmbedderFingerprint {
            kind: "reference".into(),
            dim: self.cfg.dim,
            seed: Some(self.cfg.seed),
            model: None,
        }
    }

    fn embed(&self, text: &str) -> Result<Vector, EmbedError> {
        Ok(reference_embed(text, &self.cfg))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteEmbedderConfig {
    /// Base URL; requests go to `{base_url}/embeddings`.
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    /// Expected dimension. When unset, the first response decides it.
    pub dim: Option<usize>,
}

impl Default for RemoteEmbedderConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8080/v1".into(),
            model: "multi-qa-mpnet-base-dot-v1".into(),
            api_key_env: "LTE_EMBED_API_KEY".into(),
            timeout_secs: 30.0,
            max_retries: 3,
            dim: None,
        }
    }
}

/// Client for a batched embedding service speaking
/// `{"input": [..], "model": ..}` -> `{"data": [{"index", "embedding"}]}`.
pub struct RemoteEmbedder {
    cfg: RemoteEmbedderConfig,
    agent: ureq::Agent,
    url: String,
    token: Option<String>,
    dim: OnceLock<usize>,
}

impl RemoteEmbedder {
    /// Connects and discovers the dimension with a probe request unless the
    /// config pins it.
    pub fn connect(cfg: RemoteEmbedderConfig) -> Result<Self, EmbedError> {
        let embedder = Self::unprobed(cfg)?;
        if embedder.dim.get().is_none() {
            embedder.embed_batch(&["dimension probe"])?;
        }
        Ok(embedder)
    }

    fn unprobed(cfg: RemoteEmbedderConfig) -> Result<Self, EmbedError> {
        if cfg.base_url.is_empty() {
            return Err(EmbedError::Config("base_url is empty".into()));
        }
        let agent = http::build_agent(Duration::from_secs_f64(cfg.timeout_secs));
        let url = format!("{}/embeddings", cfg.base_url.trim_end_matches('/'));
        let token = http::token_from_env(&cfg.api_key_env);
        let dim = OnceLock::new();
        if let Some(d) = cfg.dim {
            let _ = dim.set(d);
        }
        Ok(Self {
            cfg,
            agent,
            url,
            token,
            dim,
        })
    }

    fn retry(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.cfg.max_retries,
            ..RetryPolicy::default()
        }
    }
}

fn parse_embeddings(resp: &Value, n: usize) -> Result<Vec<Vec<f64>>, String> {
    let data = resp
        .get("data")
        .and_then(Value::as_array)
        .ok_or("missing `data` array")?;
    if data.len() != n {
        return Err(format!("expected {n} embeddings, got {}", data.len()));
    }
    let mut out: Vec<Option<Vec<f64>>> = vec![None; n];
    for (pos, item) in data.iter().enumerate() {
        let index = match item.get("index") {
            Some(i) => i.as_u64().ok_or("`index` is not a non-negative integer")? as usize,
            None => pos,
        };
        if index >= n {
            return Err(format!("index {index} out of range"));
        }
        let values = item
            .get("embedding")
            .and_then(Value::as_array)
            .ok_or("missing `embedding` array")?
            .iter()
            .map(|v| v.as_f64().filter(|f| f.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or("embedding contains a non-finite or non-numeric entry")?;
        if out[index].replace(values).is_some() {
            return Err(format!("duplicate index {index}"));
        }
    }
    out.into_iter()
        .map(|v| v.ok_or_else(|| "missing index".to_string()))
        .collect()
}

impl Embedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim.get().copied().unwrap_or(0)
    }

    fn fingerprint(&self) -> EmbedderFingerprint {
        EmbedderFingerprint {
            kind: "remote".into(),
            dim: self.dim(),
            seed: None,
            model: Some(self.cfg.model.clone()),
        }
    }

    fn embed(&self, text: &str) -> Result<Vector, EmbedError> {
        let mut v = self.embed_batch(&[text])?;
        Ok(v.pop().expect("one input yields one vector"))
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vector>, EmbedError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let body = json!({ "input": texts, "model": self.cfg.model });
        let (request_id, resp) = http::post_json(
            &self.agent,
            &self.url,
            self.token.as_deref(),
            &body,
            self.retry(),
        )?;
        let raw = parse_embeddings(&resp, texts.len()).map_err(|message| EmbedError::Protocol {
            request_id: request_id.clone(),
            message,
        })?;
        let mut out = Vec::with_capacity(raw.len());
        for (values, text) in raw.into_iter().zip(texts) {
            let expected = *self.dim.get_or_init(|| values.len());
            if values.len() != expected || expected == 0 {
                return Err(EmbedError::Protocol {
                    request_id,
                    message: format!(
                        "embedding dimension {} but expected {expected}",
                        values.len()
                    ),
                });
            }
            let v = if text.trim().is_empty() {
                Vector::zeros(expected)
            } else {
                Vector(values).normalized()
            };
            out.push(v);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn emb(text: &str) -> Vector {
        reference_embed(text, &ReferenceEmbedderConfig::default())
    }

    #[test]
    fn empty_text_is_zero_vector() {
        let v = emb("");
        assert_eq!(v.dim(), 256);
        assert!(v.is_zero());
        assert!(emb("   \t\n").is_zero());
    }

    #[test]
    fn repeated_embedding_is_bitwise_identical() {
        let a = emb("The current British Prime Minister is Rishi Sunak");
        let b = emb("The current British Prime Minister is Rishi Sunak");
        let bits = |v: &Vector| v.values().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn word_order_changes_vector() {
        // Hand enumeration: unigrams {alpha, beta} coincide, but the bigram
        // "alpha\x1fbeta" vs "beta\x1falpha" and the trigrams differ.
        let fa: BTreeSet<String> = reference_features("alpha beta").into_iter().collect();
        let fb: BTreeSet<String> = reference_features("beta alpha").into_iter().collect();
        assert!(fa.contains("alpha\u{1f}beta") && !fb.contains("alpha\u{1f}beta"));
        assert_ne!(emb("alpha beta"), emb("beta alpha"));
    }

    #[test]
    fn repeated_word_touches_exactly_its_feature_buckets() {
        let feats = reference_features("x x x");
        let expected: Vec<&str> = vec!["x", "x", "x", "x\u{1f}x", "x\u{1f}x", "x x", " x ", "x x"];
        assert_eq!(feats, expected);
        let cfg = ReferenceEmbedderConfig::default();
        let touched: BTreeSet<usize> = ["x", "x\u{1f}x", "x x", " x "]
            .iter()
            .map(|f| (fnv1a_seeded(f.as_bytes(), 0) % 256) as usize)
            .collect();
        let v = reference_embed("x x x", &cfg);
        let nonzero: BTreeSet<usize> = v
            .values()
            .iter()
            .enumerate()
            .filter(|(_, x)| **x != 0.0)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(nonzero, touched);
        // All unigram mass (3 hits) lands in one bucket before normalization.
        let ub = (fnv1a_seeded(b"x", 0) % 256) as usize;
        assert!(
            v.values()[ub].abs() >= v.values().iter().map(|x| x.abs()).fold(0.0, f64::max) - 1e-15
        );
    }

    #[test]
    fn fnv1a_matches_published_vectors() {
        // Unseeded FNV-1a 64 reference values.
        assert_eq!(fnv1a_seeded(b"", 0), 0xcbf29ce484222325);
        assert_eq!(fnv1a_seeded(b"a", 0), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a_seeded(b"foobar", 0), 0x85944171f73967e8);
    }

    #[test]
    fn seed_changes_vector() {
        let a = reference_embed(
            "hello world",
            &ReferenceEmbedderConfig { dim: 256, seed: 0 },
        );
        let b = reference_embed(
            "hello world",
            &ReferenceEmbedderConfig { dim: 256, seed: 99 },
        );
        assert_ne!(a, b);
    }

    #[test]
    fn nonempty_text_has_unit_norm() {
        for text in ["a", "hello world", "Rishi Sunak", "ünïcödé text here"] {
            assert!((emb(text).norm() - 1.0).abs() <= 1e-6, "{text}");
        }
    }

    #[test]
    fn dot_basics() {
        let v = emb("some statement");
        assert!((dot(&v, &v).unwrap() - 1.0).abs() <= 1e-6);
        assert_eq!(dot(&v, &Vector::zeros(256)).unwrap(), 0.0);
        assert_eq!(
            dot(&v, &Vector::zeros(8)),
            Err(EmbedError::DimensionMismatch {
                left: 256,
                right: 8
            })
        );
        let msg = dot(&v, &Vector::zeros(8)).unwrap_err().to_string();
        assert!(msg.contains("256") && msg.contains('8'));
    }

    #[test]
    fn dot_matches_naive_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let u: Vec<f64> = (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut naive = 0.0;
            for i in 0..256 {
                naive += u[i] * v[i];
            }
            let got = dot(&Vector::new(u.clone()), &Vector::new(v.clone())).unwrap();
            assert!((got - naive).abs() <= 1e-12);
            let sym = dot(&Vector::new(v), &Vector::new(u)).unwrap();
            assert_eq!(got, sym);
        }
    }

    #[test]
    fn small_dim_rejected() {
        assert!(ReferenceEmbedder::new(ReferenceEmbedderConfig { dim: 7, seed: 0 }).is_err());
        assert!(ReferenceEmbedder::new(ReferenceEmbedderConfig { dim: 8, seed: 0 }).is_ok());
    }

    #[test]
    fn parse_embeddings_reorders_by_index() {
        let resp = json!({"data": [
            {"index": 1, "embedding": [0.0, 2.0]},
            {"index": 0, "embedding": [3.0, 0.0]}
        ]});
        let got = parse_embeddings(&resp, 2).unwrap();
        assert_eq!(got, vec![vec![3.0, 0.0], vec![0.0, 2.0]]);
        assert!(parse_embeddings(&resp, 3).is_err());
        let dup =
            json!({"data": [{"index": 0, "embedding": [1.0]}, {"index": 0, "embedding": [1.0]}]});
        assert!(parse_embeddings(&dup, 2).is_err());
    }
}
