//! Semantic key memory and the master decision.
//!
//! Every edited instance stores its L2-normalized query as a key next to the
//! id of the module that learned it. At inference the master layer finds the
//! nearest key; if its distance `d` is below `alpha` the module is activated
//! for this and every downstream edited layer, otherwise the pass stays on
//! the base weights (`d == alpha` goes to base). Rollback deletes keys only.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SolaError};
use crate::numerics::{dot, normalize};

pub const DEFAULT_ALPHA: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    /// `1 − cos(q, k)` on unit vectors.
    #[default]
    Cosine,
    /// `‖q − k‖₂` on unit vectors.
    Euclidean,
}

impl DistanceMetric {
    /// Distance between two unit vectors. Bit-identical inputs give exactly 0.
    pub fn between_unit(self, a: &[f64], b: &[f64]) -> f64 {
        if a == b {
            return 0.0;
        }
        match self {
            DistanceMetric::Cosine => (1.0 - dot(a, b)).max(0.0),
            DistanceMetric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "cosine" => Ok(DistanceMetric::Cosine),
            "euclidean" => Ok(DistanceMetric::Euclidean),
            other => Err(SolaError::Param(format!("unknown distance metric {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyEntry {
    pub key: Vec<f64>,
    pub lora_id: usize,
    pub edit_id: usize,
    pub instance_id: usize,
}

impl KeyEntry {
    pub fn content_hash(&self) -> u64 {
        let mut h = Sha256::new();
        for v in &self.key {
            h.update(v.to_le_bytes());
        }
        for id in [self.lora_id, self.edit_id, self.instance_id] {
            h.update((id as u64).to_le_bytes());
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Route {
    BaseOnly,
    Adapted {
        lora_id: usize,
        edit_id: usize,
        instance_id: usize,
    },
}

/// Outcome of the master decision for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub route: Route,
    /// Distance to the nearest key; `None` when the memory was empty.
    pub distance: Option<f64>,
}

impl Decision {
    pub fn base_only(distance: Option<f64>) -> Self {
        Decision {
            route: Route::BaseOnly,
            distance,
        }
    }

    pub fn lora_id(&self) -> Option<usize> {
        match self.route {
            Route::Adapted { lora_id, .. } => Some(lora_id),
            Route::BaseOnly => None,
        }
    }

    pub fn is_adapted(&self) -> bool {
        matches!(self.route, Route::Adapted { .. })
    }

    pub fn matched_entry(&self) -> Option<(usize, usize)> {
        match self.route {
            Route::Adapted {
                edit_id, instance_id, ..
            } => Some((edit_id, instance_id)),
            Route::BaseOnly => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyMemory {
    pub alpha: f64,
    #[serde(default)]
    pub metric: DistanceMetric,
    entries: Vec<KeyEntry>,
}

impl Default for KeyMemory {
    fn default() -> Self {
        KeyMemory::new(DEFAULT_ALPHA, DistanceMetric::Cosine)
    }
}

impl KeyMemory {
    pub fn new(alpha: f64, metric: DistanceMetric) -> Self {
        KeyMemory {
            alpha,
            metric,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[KeyEntry] {
        &self.entries
    }

    /// Stores `normalize(query)` for one edit instance.
    pub fn write_key(&mut self, query: &[f64], lora_id: usize, edit_id: usize, instance_id: usize) -> Result<()> {
        let key = normalize(query)?;
        if self
            .entries
            .iter()
            .any(|e| e.edit_id == edit_id && e.instance_id == instance_id)
        {
            return Err(SolaError::State(format!(
                "key for edit {edit_id} instance {instance_id} already stored"
            )));
        }
        self.entries.push(KeyEntry {
            key,
            lora_id,
            edit_id,
            instance_id,
        });
        Ok(())
    }

    /// Nearest stored key under the configured metric. Ties go to the lowest
    /// `(edit_id, instance_id)`. `None` for an empty memory or an
    /// unnormalizable query.
    pub fn nearest_key(&self, query: &[f64]) -> Option<(&KeyEntry, f64)> {
        let q = normalize(query).ok()?;
        let mut best: Option<(&KeyEntry, f64)> = None;
        for e in &self.entries {
            let d = self.metric.between_unit(&q, &e.key);
            best = match best {
                None => Some((e, d)),
                Some((b, bd)) => {
                    if d < bd || (d == bd && (e.edit_id, e.instance_id) < (b.edit_id, b.instance_id)) {
                        Some((e, d))
                    } else {
                        Some((b, bd))
                    }
                }
            };
        }
        best
    }

    /// Binary activate-or-base decision made once at the master layer.
    pub fn master_decide(&self, query: &[f64]) -> Decision {
        match self.nearest_key(query) {
            None => Decision::base_only(None),
            Some((e, d)) if d < self.alpha => Decision {
                route: Route::Adapted {
                    lora_id: e.lora_id,
                    edit_id: e.edit_id,
                    instance_id: e.instance_id,
                },
                distance: Some(d),
            },
            Some((_, d)) => Decision::base_only(Some(d)),
        }
    }

    /// Deletes every key of `edit_id`; returns how many were removed.
    pub fn rollback(&mut self, edit_id: usize) -> usize {
        let before = self.entries.len();
        self.entries.retain(|e| e.edit_id != edit_id);
        before - self.entries.len()
    }

    /// Queries whose routed module differs from the one assigned at edit time
    /// (routing to base counts as a mismatch).
    pub fn mismatch_count(&self, assignments: &[usize], queries: &[Vec<f64>]) -> Result<usize> {
        if assignments.len() != queries.len() {
            return Err(SolaError::Param(format!(
                "{} assignments for {} queries",
                assignments.len(),
                queries.len()
            )));
        }
        Ok(assignments
            .iter()
            .zip(queries)
            .filter(|(&a, q)| self.master_decide(q).lora_id() != Some(a))
            .count())
    }

    pub fn edit_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.entries.iter().map(|e| e.edit_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}
