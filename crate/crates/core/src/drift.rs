//! Cluster-router baseline with moving centers.
//!
//! Edits are assigned to the nearest cluster within `radius`; a hit moves
//! that center to the running mean of its members and fine-tunes the
//! cluster's shared module on the new edit alone. Both effects degrade
//! earlier edits: their queries may no longer retrieve the module they were
//! trained into, and the module itself has been overwritten.

use serde::{Deserialize, Serialize};

use crate::adapters::LoraModule;
use crate::editor::{module_rng, train_module, EditTask, TrainRecipe};
use crate::error::{Result, SolaError};
use crate::model::{AdapterCtx, BaseModel, Example};
use crate::numerics::{argmax, normalize};
use crate::routing::{DistanceMetric, KeyMemory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Center {
    /// Running mean of the member queries (not renormalized).
    pub sum_mean: Vec<f64>,
    /// Unit direction of `sum_mean`, the vector distances are taken to.
    pub direction: Vec<f64>,
    pub lora_id: usize,
    pub member_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRouter {
    pub centers: Vec<Center>,
    pub radius: f64,
    pub metric: DistanceMetric,
    pub update_count: usize,
    pub mismatch_count: usize,
    next_lora: usize,
}

impl ClusterRouter {
    pub fn new(radius: f64, metric: DistanceMetric) -> Result<Self> {
        if !radius.is_finite() || radius <= 0.0 {
            return Err(SolaError::Param(format!(
                "radius must be positive and finite, got {radius}"
            )));
        }
        Ok(ClusterRouter {
            centers: Vec::new(),
            radius,
            metric,
            update_count: 0,
            mismatch_count: 0,
            next_lora: 0,
        })
    }

    pub fn n_modules(&self) -> usize {
        self.next_lora
    }

    /// Nearest center strictly within the radius; ties go to the older center.
    pub fn lookup(&self, q: &[f64]) -> Result<Option<usize>> {
        let q = normalize(q)?;
        Ok(self.nearest(&q).filter(|&(_, d)| d < self.radius).map(|(i, _)| i))
    }

    pub fn route(&self, q: &[f64]) -> Result<Option<usize>> {
        Ok(self.lookup(q)?.map(|i| self.centers[i].lora_id))
    }

    fn nearest(&self, unit_q: &[f64]) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, c) in self.centers.iter().enumerate() {
            let d = self.metric.between_unit(unit_q, &c.direction);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        best
    }

    fn absorb(&mut self, idx: usize, unit_q: &[f64]) -> Result<()> {
        let c = &mut self.centers[idx];
        c.member_count += 1;
        let n = c.member_count as f64;
        for (m, x) in c.sum_mean.iter_mut().zip(unit_q) {
            *m += (x - *m) / n;
        }
        c.direction = normalize(&c.sum_mean)?;
        self.update_count += 1;
        Ok(())
    }

    fn push_center(&mut self, unit_q: Vec<f64>, lora_id: usize) {
        self.centers.push(Center {
            sum_mean: unit_q.clone(),
            direction: unit_q,
            lora_id,
            member_count: 1,
        });
    }

    /// Returns `(lora_id, is_new_center)`. A fresh center gets a fresh id.
    pub fn cluster_assign(&mut self, q: &[f64]) -> Result<(usize, bool)> {
        let q = normalize(q)?;
        match self.nearest(&q).filter(|&(_, d)| d < self.radius) {
            Some((i, _)) => {
                self.absorb(i, &q)?;
                Ok((self.centers[i].lora_id, false))
            }
            None => {
                let id = self.next_lora;
                self.next_lora += 1;
                self.push_center(q, id);
                Ok((id, true))
            }
        }
    }

    /// Adds a further instance of an edit already bound to `lora_id`: joins
    /// the nearest center if it is within the radius and carries that id,
    /// otherwise opens another center for the same module.
    pub fn attach(&mut self, q: &[f64], lora_id: usize) -> Result<()> {
        if lora_id >= self.next_lora {
            return Err(SolaError::Index {
                what: "cluster module",
                index: lora_id,
                limit: self.next_lora,
            });
        }
        let q = normalize(q)?;
        match self.nearest(&q).filter(|&(_, d)| d < self.radius) {
            Some((i, _)) if self.centers[i].lora_id == lora_id => self.absorb(i, &q),
            _ => {
                self.push_center(q, lora_id);
                Ok(())
            }
        }
    }

    /// The centers as a key memory with `alpha = radius`, for cross-checking
    /// routing against the plain nearest-key search.
    pub fn as_key_memory(&self) -> Result<KeyMemory> {
        let mut mem = KeyMemory::new(self.radius, self.metric);
        for (i, c) in self.centers.iter().enumerate() {
            mem.write_key(&c.direction, c.lora_id, i, 0)?;
        }
        Ok(mem)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftRow {
    pub radius: f64,
    pub updates: usize,
    pub mismatches: usize,
    pub err: f64,
    pub trr: f64,
    pub centers: usize,
    pub modules: usize,
}

impl DriftRow {
    pub const CSV_HEADER: &'static str = "radius,updates,mismatches,err,trr";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.radius, self.updates, self.mismatches, self.err, self.trr
        )
    }
}

pub fn drift_csv(rows: &[DriftRow]) -> String {
    let mut s = String::from(DriftRow::CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// State after running a stream through the cluster baseline.
#[derive(Debug, Clone)]
pub struct ClusterRun {
    pub router: ClusterRouter,
    pub modules: Vec<LoraModule>,
    /// `(edit_id, lora_id)` in stream order.
    pub assignments: Vec<(usize, usize)>,
}

impl ClusterRun {
    pub fn forward_logits(&self, model: &BaseModel, tokens: &[usize]) -> Result<Vec<f64>> {
        let base = model.forward(tokens, AdapterCtx::None)?;
        match self.router.route(&base.query)? {
            Some(id) => Ok(model.forward(tokens, AdapterCtx::Fixed(&self.modules[id]))?.logits),
            None => Ok(base.logits),
        }
    }
}

pub fn run_cluster_stream(
    model: &BaseModel,
    stream: &[EditTask],
    radius: f64,
    metric: DistanceMetric,
    recipe: &TrainRecipe,
    seed: u64,
) -> Result<ClusterRun> {
    if stream.is_empty() {
        return Err(SolaError::Param("edit stream is empty".into()));
    }
    let mut router = ClusterRouter::new(radius, metric)?;
    let mut modules: Vec<LoraModule> = Vec::new();
    let mut assignments = Vec::with_capacity(stream.len());
    for task in stream {
        task.validate(model.config().n_classes)?;
        let mut queries = Vec::with_capacity(task.instances.len());
        for ex in &task.instances {
            queries.push(model.forward(&ex.tokens, AdapterCtx::None)?.query);
        }
        let (lora_id, is_new) = router.cluster_assign(&queries[0])?;
        for q in &queries[1..] {
            router.attach(q, lora_id)?;
        }
        if is_new {
            debug_assert_eq!(lora_id, modules.len());
            modules.push(LoraModule::new(
                lora_id,
                model.config(),
                recipe.rank,
                recipe.lora_init_std,
                &mut module_rng(seed, lora_id),
            )?);
        }
        train_module(model, &mut modules[lora_id], &task.instances, recipe)?;
        assignments.push((task.edit_id, lora_id));
    }
    Ok(ClusterRun {
        router,
        modules,
        assignments,
    })
}

/// Runs the stream once per radius and scores each run at stream end.
pub fn drift_experiment(
    model: &BaseModel,
    stream: &[EditTask],
    holdout: &[Example],
    radius_grid: &[f64],
    metric: DistanceMetric,
    recipe: &TrainRecipe,
    seed: u64,
) -> Result<Vec<DriftRow>> {
    let mut rows = Vec::with_capacity(radius_grid.len());
    for &radius in radius_grid {
        let mut run = run_cluster_stream(model, stream, radius, metric, recipe, seed)?;
        let mut hits = 0usize;
        let mut total = 0usize;
        let mut assigned = Vec::new();
        let mut queries = Vec::new();
        for (task, &(_, lora_id)) in stream.iter().zip(&run.assignments) {
            for ex in &task.instances {
                let q = model.forward(&ex.tokens, AdapterCtx::None)?.query;
                if run.router.route(&q)? != Some(lora_id) {
                    run.router.mismatch_count += 1;
                }
                let logits = run.forward_logits(model, &ex.tokens)?;
                hits += usize::from(argmax(&logits) == ex.label);
                total += 1;
                assigned.push(lora_id);
                queries.push(q);
            }
        }
        let oracle = run.router.as_key_memory()?.mismatch_count(&assigned, &queries)?;
        if oracle != run.router.mismatch_count {
            return Err(SolaError::State(format!(
                "cluster routing disagrees with key-memory search: {} vs {oracle}",
                run.router.mismatch_count
            )));
        }
        let mut kept = 0usize;
        for ex in holdout {
            kept += usize::from(argmax(&run.forward_logits(model, &ex.tokens)?) == ex.label);
        }
        rows.push(DriftRow {
            radius,
            updates: run.router.update_count,
            mismatches: run.router.mismatch_count,
            err: hits as f64 / total as f64,
            trr: if holdout.is_empty() {
                1.0
            } else {
                kept as f64 / holdout.len() as f64
            },
            centers: run.router.centers.len(),
            modules: run.modules.len(),
        });
    }
    Ok(rows)
}
