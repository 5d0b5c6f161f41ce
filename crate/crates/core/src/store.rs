//! In-memory vector store partitioned by user, with an optional write-ahead
//! journal.
//!
//! The first vector ever stored fixes the store's dimension. Writes go to the
//! journal before they become visible, under the same write lock, so journal
//! order equals visibility order. Reads clone the user's partition under the
//! read lock and work on that snapshot.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use crate::error::{PersistError, RetrievalError, StoreError};
use crate::model::{Embedding, MemoryItem, UserId};
use crate::retrieval::{retrieve, Scored};

pub trait Journal<T>: Send + Sync {
    /// Durably records `items` in order. Must either record all of them or
    /// leave nothing visible to readers.
    fn append(&self, items: &[T]) -> Result<(), PersistError>;
}

struct Inner<T> {
    dimension: Option<usize>,
    by_user: HashMap<UserId, Vec<Arc<T>>>,
    by_id: HashMap<String, Arc<T>>,
}

pub struct VectorStore<T: MemoryItem> {
    inner: RwLock<Inner<T>>,
    journal: Option<Arc<dyn Journal<T>>>,
}

impl<T: MemoryItem> std::fmt::Debug for VectorStore<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VectorStore")
            .field("kind", &T::KIND)
            .field("len", &self.len())
            .field("dimension", &self.dimension())
            .finish()
    }
}

impl<T: MemoryItem> Default for VectorStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub trait Validate {
    fn check(&self) -> Result<(), crate::error::ModelError>;
}

impl Validate for crate::model::Episode {
    fn check(&self) -> Result<(), crate::error::ModelError> {
        self.validate()
    }
}

impl Validate for crate::model::SemanticFact {
    fn check(&self) -> Result<(), crate::error::ModelError> {
        self.validate()
    }
}

impl<T: MemoryItem + Validate> VectorStore<T> {
    pub fn insert(&self, item: T) -> Result<Arc<T>, StoreError> {
        let mut stored = self.insert_all(vec![item])?;
        Ok(stored.pop().expect("one item inserted"))
    }

    /// Inserts every item or none of them.
    pub fn insert_all(&self, items: Vec<T>) -> Result<Vec<Arc<T>>, StoreError> {
        self.write(items, true)
    }

    /// Loads previously journaled items without re-journaling them.
    pub fn restore(&self, items: Vec<T>) -> Result<(), StoreError> {
        self.write(items, false).map(|_| ())
    }

    fn write(&self, items: Vec<T>, journaled: bool) -> Result<Vec<Arc<T>>, StoreError> {
        if items.is_empty() {
            return Ok(Vec::new());
        }
        let mut inner = self.inner.write().expect("store lock poisoned");
        let mut dimension = inner.dimension;
        let mut batch_ids = std::collections::HashSet::new();
        for item in &items {
            item.check()?;
            let dim = item.embedding().dim();
            match dimension {
                Some(expected) if expected != dim => {
                    return Err(StoreError::DimensionMismatch {
                        expected,
                        actual: dim,
                    })
                }
                None => dimension = Some(dim),
                _ => {}
            }
            if inner.by_id.contains_key(item.id()) || !batch_ids.insert(item.id().to_string()) {
                return Err(StoreError::DuplicateId(item.id().to_string()));
            }
        }
        if journaled {
            if let Some(journal) = &self.journal {
                journal.append(&items)?;
            }
        }
        inner.dimension = dimension;
        let mut stored = Vec::with_capacity(items.len());
        for item in items {
            let item = Arc::new(item);
            inner.by_id.insert(item.id().to_string(), item.clone());
            inner
                .by_user
                .entry(item.user_id().clone())
                .or_default()
                .push(item.clone());
            stored.push(item);
        }
        Ok(stored)
    }
}

impl<T: MemoryItem> VectorStore<T> {
    pub fn new() -> Self {
        Self {
            inner: RwLock::new(Inner {
                dimension: None,
                by_user: HashMap::new(),
                by_id: HashMap::new(),
            }),
            journal: None,
        }
    }

    pub fn with_journal(journal: Arc<dyn Journal<T>>) -> Self {
        Self {
            journal: Some(journal),
            ..Self::new()
        }
    }

    pub fn dimension(&self) -> Option<usize> {
        self.inner.read().expect("store lock poisoned").dimension
    }

    pub fn len(&self) -> usize {
        self.inner.read().expect("store lock poisoned").by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, id: &str) -> Option<Arc<T>> {
        self.inner
            .read()
            .expect("store lock poisoned")
            .by_id
            .get(id)
            .cloned()
    }

    /// The user's items in insertion order.
    pub fn snapshot(&self, user: &UserId) -> Vec<Arc<T>> {
        self.inner
            .read()
            .expect("store lock poisoned")
            .by_user
            .get(user)
            .cloned()
            .unwrap_or_default()
    }

    pub fn count_for(&self, user: &UserId) -> usize {
        self.inner
            .read()
            .expect("store lock poisoned")
            .by_user
            .get(user)
            .map_or(0, Vec::len)
    }

    pub fn users(&self) -> Vec<UserId> {
        let mut users: Vec<UserId> = self
            .inner
            .read()
            .expect("store lock poisoned")
            .by_user
            .keys()
            .cloned()
            .collect();
        users.sort();
        users
    }

    /// Top-`limit` items of `user` by cosine similarity to `query`, dropping
    /// those below `threshold` when given.
    pub fn search(
        &self,
        user: &UserId,
        query: &Embedding,
        limit: usize,
        threshold: Option<f64>,
    ) -> Result<Vec<Scored<T>>, RetrievalError> {
        let (dimension, items) = {
            let inner = self.inner.read().expect("store lock poisoned");
            (
                inner.dimension,
                inner.by_user.get(user).cloned().unwrap_or_default(),
            )
        };
        if let Some(dim) = dimension {
            if dim != query.dim() {
                return Err(RetrievalError::DimensionMismatch {
                    left: query.dim(),
                    right: dim,
                });
            }
        }
        retrieve(query.as_slice(), &items, limit, threshold)
    }
}
