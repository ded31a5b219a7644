use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::RwLock;

use super::{Embedder, EmbeddingError, EmbeddingVector};

/// Bounded embedding cache keyed by the exact text bytes.
///
/// Lookups take a shared lock; inserts take the exclusive lock and evict in
/// insertion order once `capacity` is reached. Capacity 0 disables caching.
pub struct CachedEmbedder<E> {
    inner: E,
    capacity: usize,
    state: RwLock<CacheState>,
    hits: AtomicU64,
    misses: AtomicU64,
}

#[derive(Default)]
struct CacheState {
    map: HashMap<String, EmbeddingVector>,
    order: VecDeque<String>,
}

impl<E: Embedder> CachedEmbedder<E> {
    pub fn new(inner: E, capacity: usize) -> Self {
        Self {
            inner,
            capacity,
            state: RwLock::new(CacheState::default()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.state.read().map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// (hits, misses) since construction.
    pub fn stats(&self) -> (u64, u64) {
        (
            self.hits.load(Ordering::Relaxed),
            self.misses.load(Ordering::Relaxed),
        )
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }
}

impl<E: Embedder> Embedder for CachedEmbedder<E> {
    fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        if self.capacity == 0 {
            return self.inner.embed(text);
        }
        let hit = self.state.read().map.get(text).cloned();
        if let Some(v) = hit {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(v);
        }
        let v = self.inner.embed(text)?;
        self.misses.fetch_add(1, Ordering::Relaxed);
        let mut s = self.state.write();
        if !s.map.contains_key(text) {
            if s.map.len() >= self.capacity {
                if let Some(old) = s.order.pop_front() {
                    s.map.remove(&old);
                }
            }
            s.map.insert(text.to_string(), v.clone());
            s.order.push_back(text.to_string());
        }
        Ok(v)
    }
}
