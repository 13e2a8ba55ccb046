//! LoRA factor pairs, per-edit modules and the append-only module pool.
//!
//! An edited layer with frozen weight `W0 (d × k)` computes
//! `h = W0 x + B A x` with `A (r × k)` drawn from a zero-mean Gaussian and
//! `B (d × r)` starting at exactly zero. No `alpha / r` scaling is applied.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SolaError};
use crate::model::{LayerId, LoraGrads, ModelConfig};
use crate::numerics::{gaussian_init, Mat, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraFactors {
    pub a: Mat,
    pub b: Mat,
}

impl LoraFactors {
    /// `A ~ N(0, std²)`, `B = 0`, for a `d × k` base weight.
    pub fn init(rng: &mut SeededRng, d: usize, k: usize, rank: usize, std: f64) -> Result<Self> {
        if rank == 0 {
            return Err(SolaError::Param("LoRA rank must be >= 1".into()));
        }
        if rank > d.min(k) {
            return Err(SolaError::Param(format!(
                "LoRA rank {rank} exceeds min(d, k) = {}",
                d.min(k)
            )));
        }
        Ok(LoraFactors {
            a: gaussian_init(rng, rank, k, std)?,
            b: Mat::zeros(d, rank),
        })
    }

    pub fn rank(&self) -> usize {
        self.a.rows
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// `B · (A · x)` for column-major inputs `x (k × n)`.
    pub fn apply_delta(&self, x: &Mat) -> Result<Mat> {
        self.b.matmul(&self.a.matmul(x)?)
    }

    /// Dense `ΔW = B · A`.
    pub fn delta_weight(&self) -> Result<Mat> {
        self.b.matmul(&self.a)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraModule {
    lora_id: usize,
    frozen: bool,
    per_layer: BTreeMap<LayerId, LoraFactors>,
}

impl LoraModule {
    /// Fresh, unfrozen module with one factor pair per edited layer.
    pub fn new(lora_id: usize, config: &ModelConfig, rank: usize, std: f64, rng: &mut SeededRng) -> Result<Self> {
        let mut per_layer = BTreeMap::new();
        for &layer in &config.edited_layers {
            let factors = LoraFactors::init(rng, config.d_model, config.ffn_hidden, rank, std)?;
            per_layer.insert(layer, factors);
        }
        Ok(LoraModule {
            lora_id,
            frozen: false,
            per_layer,
        })
    }

    pub fn lora_id(&self) -> usize {
        self.lora_id
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn factors(&self, layer: LayerId) -> Option<&LoraFactors> {
        self.per_layer.get(&layer)
    }

    pub fn layers(&self) -> impl Iterator<Item = (&LayerId, &LoraFactors)> {
        self.per_layer.iter()
    }

    /// Σ over layers of r·(d + k).
    pub fn trainable_params(&self) -> usize {
        self.per_layer.values().map(LoraFactors::param_count).sum()
    }

    /// `param ← param − lr · grad` on every factor. Frozen modules refuse.
    pub fn sgd_step(&mut self, grads: &LoraGrads, lr: f64) -> Result<()> {
        if self.frozen {
            return Err(SolaError::Frozen(self.lora_id));
        }
        if grads.per_layer.len() != self.per_layer.len() {
            return Err(SolaError::State(format!(
                "gradient covers {} layers, module has {}",
                grads.per_layer.len(),
                self.per_layer.len()
            )));
        }
        for (layer, g) in &grads.per_layer {
            let f = self
                .per_layer
                .get(layer)
                .ok_or_else(|| SolaError::State(format!("gradient for unknown layer {layer}")))?;
            if f.a.shape() != g.a.shape() || f.b.shape() != g.b.shape() {
                return Err(SolaError::Shape {
                    op: "sgd_step",
                    left: f.a.shape(),
                    right: g.a.shape(),
                });
            }
        }
        for (layer, g) in &grads.per_layer {
            let f = self.per_layer.get_mut(layer).expect("checked above");
            f.a.sub_scaled(&g.a, lr)?;
            f.b.sub_scaled(&g.b, lr)?;
        }
        Ok(())
    }

    /// 64-bit digest of layer names, shapes and factor bytes.
    pub fn content_hash(&self) -> u64 {
        let mut h = Sha256::new();
        for (layer, f) in &self.per_layer {
            h.update(layer.to_string().as_bytes());
            for m in [&f.a, &f.b] {
                h.update((m.rows as u64).to_le_bytes());
                h.update((m.cols as u64).to_le_bytes());
                for v in &m.data {
                    h.update(v.to_le_bytes());
                }
            }
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    /// Mutable factor access for tests and tooling that need to inspect
    /// sensitivity; refuses frozen modules.
    pub fn factors_mut(&mut self, layer: LayerId) -> Result<&mut LoraFactors> {
        if self.frozen {
            return Err(SolaError::Frozen(self.lora_id));
        }
        self.per_layer
            .get_mut(&layer)
            .ok_or_else(|| SolaError::State(format!("module has no layer {layer}")))
    }
}

/// Append-only pool of modules. Ids are dense `0..len`; at most one module
/// (the one being edited) is unfrozen at a time.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
#[serde(transparent)]
pub struct LoraPool {
    modules: Vec<LoraModule>,
}

impl<'de> Deserialize<'de> for LoraPool {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let modules = Vec::<LoraModule>::deserialize(d)?;
        for (i, m) in modules.iter().enumerate() {
            if m.lora_id != i {
                return Err(serde::de::Error::custom(format!(
                    "pool ids must be dense: position {i} holds id {}",
                    m.lora_id
                )));
            }
        }
        if modules.iter().filter(|m| !m.frozen).count() > 1 {
            return Err(serde::de::Error::custom("pool has more than one unfrozen module"));
        }
        Ok(LoraPool { modules })
    }
}

impl LoraPool {
    pub fn new() -> Self {
        LoraPool::default()
    }

    pub fn len(&self) -> usize {
        self.modules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modules.is_empty()
    }

    pub fn get(&self, lora_id: usize) -> Option<&LoraModule> {
        self.modules.get(lora_id)
    }

    pub fn modules(&self) -> &[LoraModule] {
        &self.modules
    }

    pub fn unfrozen(&self) -> Option<usize> {
        self.modules.iter().position(|m| !m.frozen)
    }

    /// Appends a fresh unfrozen module and returns its id.
    pub fn new_module(&mut self, config: &ModelConfig, rank: usize, std: f64, rng: &mut SeededRng) -> Result<usize> {
        if let Some(id) = self.unfrozen() {
            return Err(SolaError::Lifecycle(format!(
                "module {id} is still being edited; freeze it before starting another"
            )));
        }
        let id = self.modules.len();
        self.modules.push(LoraModule::new(id, config, rank, std, rng)?);
        Ok(id)
    }

    /// Mutable access to the module under edit.
    pub fn editable(&mut self, lora_id: usize) -> Result<&mut LoraModule> {
        let len = self.modules.len();
        let m = self.modules.get_mut(lora_id).ok_or(SolaError::Index {
            what: "lora id",
            index: lora_id,
            limit: len,
        })?;
        if m.frozen {
            return Err(SolaError::Frozen(lora_id));
        }
        Ok(m)
    }

    pub fn freeze(&mut self, lora_id: usize) -> Result<()> {
        let len = self.modules.len();
        let m = self.modules.get_mut(lora_id).ok_or(SolaError::Index {
            what: "lora id",
            index: lora_id,
            limit: len,
        })?;
        if m.frozen {
            return Err(SolaError::Lifecycle(format!("module {lora_id} is already frozen")));
        }
        m.frozen = true;
        Ok(())
    }

    /// Drops the trailing unfrozen module after a failed edit. Ids stay dense
    /// because only the last module can be unfrozen.
    pub fn discard_unfrozen(&mut self) -> Option<usize> {
        match self.modules.last() {
            Some(m) if !m.frozen => {
                let id = m.lora_id;
                self.modules.pop();
                Some(id)
            }
            _ => None,
        }
    }

    /// `(lora_id, content_hash)` for every frozen module.
    pub fn frozen_hashes(&self) -> Vec<(usize, u64)> {
        self.modules
            .iter()
            .filter(|m| m.frozen)
            .map(|m| (m.lora_id, m.content_hash()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig::default()
    }

    #[test]
    fn ids_are_dense_and_lifecycle_enforced() {
        let mut pool = LoraPool::new();
        let mut rng = SeededRng::new(1);
        assert_eq!(pool.new_module(&cfg(), 4, 0.02, &mut rng).unwrap(), 0);
        assert!(matches!(
            pool.new_module(&cfg(), 4, 0.02, &mut rng),
            Err(SolaError::Lifecycle(_))
        ));
        pool.freeze(0).unwrap();
        assert!(matches!(pool.freeze(0), Err(SolaError::Lifecycle(_))));
        assert_eq!(pool.new_module(&cfg(), 4, 0.02, &mut rng).unwrap(), 1);
    }

    #[test]
    fn rank_bounds() {
        let mut pool = LoraPool::new();
        let mut rng = SeededRng::new(1);
        assert!(matches!(
            pool.new_module(&cfg(), 0, 0.02, &mut rng),
            Err(SolaError::Param(_))
        ));
        assert!(pool.new_module(&cfg(), 33, 0.02, &mut rng).is_err());
        assert!(pool.is_empty());
    }

    #[test]
    fn trainable_params_rank4_default() {
        let m = LoraModule::new(0, &cfg(), 4, 0.02, &mut SeededRng::new(2)).unwrap();
        let per_layer = 4 * 64 + 32 * 4;
        assert_eq!(per_layer, 384);
        assert_eq!(m.trainable_params(), 2 * per_layer);
        let f = m.factors(LayerId(2)).unwrap();
        assert_eq!(f.a.shape(), (4, 64));
        assert_eq!(f.b.shape(), (32, 4));
        assert!(f.b.data.iter().all(|&v| v == 0.0));
        assert!(f.a.data.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn apply_delta_cases() {
        let mut rng = SeededRng::new(3);
        let fresh = LoraFactors::init(&mut rng, 3, 5, 2, 0.5).unwrap();
        let x = gaussian_init(&mut rng, 5, 4, 1.0).unwrap();
        assert_eq!(fresh.apply_delta(&x).unwrap(), Mat::zeros(3, 4));

        let f = LoraFactors {
            a: Mat::from_rows(&[&[1.0, 1.0]]),
            b: Mat::from_rows(&[&[1.0], &[0.0]]),
        };
        let x = Mat::from_rows(&[&[1.0], &[1.0]]);
        assert_eq!(f.apply_delta(&x).unwrap(), Mat::from_rows(&[&[2.0], &[0.0]]));
        assert!(f.apply_delta(&Mat::zeros(3, 1)).is_err());
    }

    #[test]
    fn apply_delta_equals_dense_product() {
        let mut rng = SeededRng::new(4);
        for _ in 0..10 {
            let f = LoraFactors {
                a: gaussian_init(&mut rng, 3, 7, 1.0).unwrap(),
                b: gaussian_init(&mut rng, 5, 3, 1.0).unwrap(),
            };
            let x = gaussian_init(&mut rng, 7, 4, 1.0).unwrap();
            let low = f.apply_delta(&x).unwrap();
            let dense = f.delta_weight().unwrap().matmul(&x).unwrap();
            for (a, b) in low.data.iter().zip(&dense.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frozen_module_rejects_updates() {
        let mut pool = LoraPool::new();
        let id = pool.new_module(&cfg(), 2, 0.02, &mut SeededRng::new(5)).unwrap();
        pool.freeze(id).unwrap();
        assert!(matches!(pool.editable(id), Err(SolaError::Frozen(0))));
        let mut m = pool.get(id).unwrap().clone();
        let grads = LoraGrads {
            per_layer: m.layers().map(|(l, f)| (*l, f.clone())).collect(),
        };
        assert!(matches!(m.sgd_step(&grads, 0.1), Err(SolaError::Frozen(0))));
    }

    #[test]
    fn hash_tracks_every_bit() {
        let m = LoraModule::new(0, &cfg(), 2, 0.02, &mut SeededRng::new(6)).unwrap();
        let base = m.content_hash();
        assert_eq!(base, m.clone().content_hash());
        let layers: Vec<LayerId> = m.layers().map(|(l, _)| *l).collect();
        let mut rng = SeededRng::new(7);
        for _ in 0..200 {
            let mut probe = m.clone();
            let layer = layers[rng.below(layers.len())];
            let f = probe.factors_mut(layer).unwrap();
            let target = if rng.below(2) == 0 { &mut f.a } else { &mut f.b };
            let idx = rng.below(target.len());
            let bit = rng.below(64);
            target.data[idx] = f64::from_bits(target.data[idx].to_bits() ^ (1u64 << bit));
            assert_ne!(probe.content_hash(), base, "flip at {idx} bit {bit} not detected");
        }
    }

    #[test]
    fn pool_json_shape_and_validation() {
        let mut pool = LoraPool::new();
        pool.new_module(&cfg(), 1, 0.02, &mut SeededRng::new(8)).unwrap();
        pool.freeze(0).unwrap();
        let s = serde_json::to_string(&pool).unwrap();
        assert!(s.starts_with(r#"[{"lora_id":0,"frozen":true,"per_layer":{"blocks.2.ffn.out":{"a":"#));
        let back: LoraPool = serde_json::from_str(&s).unwrap();
        assert_eq!(back, pool);
        let bad = s.replace(r#""lora_id":0"#, r#""lora_id":3"#);
        assert!(serde_json::from_str::<LoraPool>(&bad).is_err());
    }
}
