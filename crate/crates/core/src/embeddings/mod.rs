//! Text embeddings used by the semantic similarity channel.
//!
//! The default provider is a hashed bag-of-words: text is tokenized with
//! [`crate::text::tokenize`], each token is hashed with 64-bit FNV-1a (standard
//! offset basis `0xcbf29ce484222325` as the seed) into one of `d` buckets, term
//! frequencies are accumulated and the result is L2-normalized. Changing the
//! hash or seed changes every stored score; golden-vector tests pin it.

mod cache;
mod http;

use std::hash::Hasher;
use std::sync::Arc;
use std::time::Duration;

use fnv::FnvHasher;
use thiserror::Error;

use crate::config::{ConfigError, KvConfig};
use crate::text::tokenize;

pub use cache::CachedEmbedder;
pub use http::HttpEmbedder;

pub const DEFAULT_DIMENSION: usize = 1024;
pub const MIN_DIMENSION: usize = 8;
const FNV_SEED: u64 = 0xcbf2_9ce4_8422_2325;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("embedding provider error: {0}")]
    Provider(String),
    #[error("invalid embedding config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&x| x == 0.0)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self(self.0.iter().map(|x| x * factor).collect())
    }
}

/// Cosine similarity, exactly `0.0` when either vector has zero norm.
///
/// The result is clamped to `[-1, 1]` to absorb rounding.
pub fn cosine_similarity(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    if u.len() != v.len() {
        return Err(EmbeddingError::DimensionMismatch {
            left: u.len(),
            right: v.len(),
        });
    }
    let nu = u.norm();
    let nv = v.norm();
    if nu == 0.0 || nv == 0.0 {
        return Ok(0.0);
    }
    let dot: f64 = u.0.iter().zip(&v.0).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Maps text to a fixed-dimension vector. Implementations must be safe to call
/// from several threads at once.
pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError>;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

impl<E: Embedder + ?Sized> Embedder for Arc<E> {
    fn dimension(&self) -> usize {
        (**self).dimension()
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        (**self).embed(text)
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        (**self).embed_batch(texts)
    }
}

/// Deterministic hashed bag-of-words embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashedBowEmbedder {
    dimension: usize,
}

impl HashedBowEmbedder {
    pub fn new(dimension: usize) -> Result<Self, EmbeddingError> {
        if dimension < MIN_DIMENSION {
            return Err(EmbeddingError::Config(format!(
                "dimension must be at least {MIN_DIMENSION}, got {dimension}"
            )));
        }
        Ok(Self { dimension })
    }

    pub fn bucket(&self, token: &str) -> usize {
        let mut h = FnvHasher::with_key(FNV_SEED);
        h.write(token.as_bytes());
        (h.finish() % self.dimension as u64) as usize
    }
}

impl Default for HashedBowEmbedder {
    fn default() -> Self {
        Self {
            dimension: DEFAULT_DIMENSION,
        }
    }
}

impl Embedder for HashedBowEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        let mut v = vec![0.0; self.dimension];
        for tok in tokenize(text) {
            v[self.bucket(&tok)] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(EmbeddingVector(v))
    }
}

/// Tries `primary` and falls back to `fallback` on provider errors.
pub struct FallbackEmbedder<P, F> {
    primary: P,
    fallback: F,
}

impl<P: Embedder, F: Embedder> FallbackEmbedder<P, F> {
    pub fn new(primary: P, fallback: F) -> Result<Self, EmbeddingError> {
        if primary.dimension() != fallback.dimension() {
            return Err(EmbeddingError::DimensionMismatch {
                left: primary.dimension(),
                right: fallback.dimension(),
            });
        }
        Ok(Self { primary, fallback })
    }
}

impl<P: Embedder, F: Embedder> Embedder for FallbackEmbedder<P, F> {
    fn dimension(&self) -> usize {
        self.primary.dimension()
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        match self.primary.embed(text) {
            Ok(v) => Ok(v),
            Err(EmbeddingError::Provider(_)) => self.fallback.embed(text),
            Err(e) => Err(e),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProviderKind {
    BuiltinHashedBow,
    ExternalHttp,
}

impl std::str::FromStr for ProviderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "builtin" | "builtin_hashed_bow" => Ok(ProviderKind::BuiltinHashedBow),
            "external" | "external_http" => Ok(ProviderKind::ExternalHttp),
            other => Err(format!("unknown provider {other:?} (expected builtin or external)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingProviderConfig {
    pub kind: ProviderKind,
    pub dimension: usize,
    pub endpoint: Option<String>,
    pub cache_capacity: usize,
    pub timeout: Duration,
    pub retries: u32,
    pub fallback_to_builtin: bool,
}

impl Default for EmbeddingProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::BuiltinHashedBow,
            dimension: DEFAULT_DIMENSION,
            endpoint: None,
            cache_capacity: 4096,
            timeout: Duration::from_secs(10),
            retries: 2,
            fallback_to_builtin: false,
        }
    }
}

impl EmbeddingProviderConfig {
    /// Reads `provider`, `dimension`, `endpoint`, `cache_capacity`,
    /// `timeout_ms`, `retries` and `fallback_to_builtin`.
    pub fn from_kv(cfg: &KvConfig) -> Result<Self, ConfigError> {
        let d = Self::default();
        let kind = match cfg.get("provider") {
            None => d.kind,
            Some(raw) => raw.parse().map_err(|reason| ConfigError::Value {
                key: "provider".into(),
                value: raw.into(),
                reason,
            })?,
        };
        let out = Self {
            kind,
            dimension: cfg.parsed_or("dimension", d.dimension)?,
            endpoint: cfg.get("endpoint").map(str::to_string),
            cache_capacity: cfg.parsed_or("cache_capacity", d.cache_capacity)?,
            timeout: Duration::from_millis(cfg.parsed_or("timeout_ms", d.timeout.as_millis() as u64)?),
            retries: cfg.parsed_or("retries", d.retries)?,
            fallback_to_builtin: cfg.bool_or("fallback_to_builtin", d.fallback_to_builtin)?,
        };
        out.validate().map_err(|e| ConfigError::Invalid {
            key: "embedding".into(),
            message: e.to_string(),
        })?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), EmbeddingError> {
        if self.dimension < MIN_DIMENSION {
            return Err(EmbeddingError::Config(format!(
                "dimension must be at least {MIN_DIMENSION}, got {}",
                self.dimension
            )));
        }
        Ok(())
    }

    /// Builds the configured provider wrapped in the cache.
    pub fn build(&self) -> Result<Arc<dyn Embedder>, EmbeddingError> {
        self.validate()?;
        let builtin = HashedBowEmbedder::new(self.dimension)?;
        let provider: Arc<dyn Embedder> = match self.kind {
            ProviderKind::BuiltinHashedBow => {
                Arc::new(CachedEmbedder::new(builtin, self.cache_capacity))
            }
            ProviderKind::ExternalHttp => {
                let endpoint = self.endpoint.clone().ok_or_else(|| {
                    EmbeddingError::Config("external provider requires an endpoint".into())
                })?;
                let http = HttpEmbedder::new(endpoint, self.dimension, self.timeout, self.retries);
                if self.fallback_to_builtin {
                    let fb = FallbackEmbedder::new(http, builtin)?;
                    Arc::new(CachedEmbedder::new(fb, self.cache_capacity))
                } else {
                    Arc::new(CachedEmbedder::new(http, self.cache_capacity))
                }
            }
        };
        Ok(provider)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn emb() -> HashedBowEmbedder {
        HashedBowEmbedder::default()
    }

    #[test]
    fn empty_text_is_zero_vector() {
        let v = emb().embed("").unwrap();
        assert_eq!(v.len(), DEFAULT_DIMENSION);
        assert!(v.is_zero());
        assert!(emb().embed(" ,;; ").unwrap().is_zero());
    }

    #[test]
    fn embedding_is_deterministic() {
        let a = emb().embed("Please rebook flight UA123").unwrap();
        let b = emb().embed("Please rebook flight UA123").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bag_of_words_ignores_order() {
        let a = emb().embed("book flight").unwrap();
        let b = emb().embed("flight book").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unit_norm() {
        let v = emb().embed("refund the order for customer").unwrap();
        assert!((v.norm() - 1.0).abs() < 1e-12);
    }

    // Pins the hash: these buckets change if the hash function or seed does.
    #[test]
    fn golden_buckets() {
        let e = emb();
        let buckets: Vec<usize> = ["flight", "refund", "the", "a123"]
            .iter()
            .map(|t| e.bucket(t))
            .collect();
        assert_eq!(buckets, GOLDEN_BUCKETS);
        let v = e.embed("Flight flight refund").unwrap();
        let nz: Vec<(usize, f64)> = v
            .values()
            .iter()
            .enumerate()
            .filter(|(_, &x)| x != 0.0)
            .map(|(i, &x)| (i, x))
            .collect();
        let norm = 5f64.sqrt();
        let mut expected = vec![(GOLDEN_BUCKETS[0], 2.0 / norm), (GOLDEN_BUCKETS[1], 1.0 / norm)];
        expected.sort_by_key(|&(i, _)| i);
        assert_eq!(nz.len(), 2);
        for ((i, x), (j, y)) in nz.iter().zip(&expected) {
            assert_eq!(i, j);
            assert!((x - y).abs() < 1e-15);
        }
    }

    const GOLDEN_BUCKETS: [usize; 4] = [899, 831, 380, 788];

    #[test]
    fn cosine_self_similarity() {
        let v = EmbeddingVector::new(vec![0.3, -1.2, 4.0]);
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_with_zero_vector() {
        let v = EmbeddingVector::new(vec![0.3, -1.2, 4.0]);
        let z = EmbeddingVector::zeros(3);
        assert_eq!(cosine_similarity(&v, &z).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&z, &z).unwrap(), 0.0);
    }

    #[test]
    fn cosine_orthogonal() {
        let a = EmbeddingVector::new(vec![1.0, 0.0]);
        let b = EmbeddingVector::new(vec![0.0, 1.0]);
        assert_eq!(cosine_similarity(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn cosine_length_mismatch() {
        let a = EmbeddingVector::new(vec![1.0, 0.0]);
        let b = EmbeddingVector::new(vec![0.0, 1.0, 2.0]);
        assert!(matches!(
            cosine_similarity(&a, &b),
            Err(EmbeddingError::DimensionMismatch { left: 2, right: 3 })
        ));
    }

    #[test]
    fn small_dimension_rejected() {
        assert!(HashedBowEmbedder::new(4).is_err());
        let cfg = EmbeddingProviderConfig {
            dimension: 2,
            ..Default::default()
        };
        assert!(cfg.build().is_err());
    }

    #[test]
    fn config_from_kv() {
        let kv = KvConfig::parse(
            "provider = external\nendpoint = http://127.0.0.1:9/embed\ndimension = 64\nretries = 0\n",
        )
        .unwrap();
        let cfg = EmbeddingProviderConfig::from_kv(&kv).unwrap();
        assert_eq!(cfg.kind, ProviderKind::ExternalHttp);
        assert_eq!(cfg.dimension, 64);
        assert_eq!(cfg.retries, 0);
        let bad = KvConfig::parse("provider = magic").unwrap();
        assert!(EmbeddingProviderConfig::from_kv(&bad).is_err());
    }

    fn vec_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, 8)
    }

    proptest! {
        #[test]
        fn cosine_is_symmetric(a in vec_strategy(), b in vec_strategy()) {
            let (u, v) = (EmbeddingVector::new(a), EmbeddingVector::new(b));
            prop_assert_eq!(cosine_similarity(&u, &v).unwrap(), cosine_similarity(&v, &u).unwrap());
        }

        #[test]
        fn cosine_is_scale_invariant(a in vec_strategy(), b in vec_strategy(), lambda in 1e-3f64..1e3) {
            let (u, v) = (EmbeddingVector::new(a), EmbeddingVector::new(b));
            let base = cosine_similarity(&u, &v).unwrap();
            let scaled = cosine_similarity(&u.scaled(lambda), &v).unwrap();
            prop_assert!((base - scaled).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&base));
        }
    }
}
