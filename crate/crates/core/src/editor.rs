//! Sequential editing loop: allocate a module, train only that module on the
//! edit's instances, store one key per instance, freeze.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapters::{LoraModule, LoraPool};
use crate::error::{Result, SolaError};
use crate::model::{AdapterCtx, BaseModel, Example, ForwardTrace, LoraGrads};
use crate::numerics::{argmax, cross_entropy, SeededRng};
use crate::routing::{Decision, KeyMemory};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditTask {
    pub edit_id: usize,
    pub instances: Vec<Example>,
}

impl EditTask {
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if self.instances.is_empty() {
            return Err(SolaError::Param(format!("edit {} has no instances", self.edit_id)));
        }
        if let Some(ex) = self.instances.iter().find(|e| e.label >= n_classes) {
            return Err(SolaError::Index {
                what: "edit label",
                index: ex.label,
                limit: n_classes,
            });
        }
        Ok(())
    }
}

/// Plain SGD with cosine decay to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecipe {
    pub lr0: f64,
    pub epochs: usize,
    pub rank: usize,
    /// Standard deviation of the Gaussian `A` init. With no LoRA scaling
    /// and a small base model, `B`'s early steps scale with `|A g|²`, so a
    /// small value here leaves edits unconverged after 40 epochs.
    pub lora_init_std: f64,
}

impl Default for TrainRecipe {
    fn default() -> Self {
        TrainRecipe {
            lr0: 0.05,
            epochs: 40,
            rank: 4,
            lora_init_std: 4.0,
        }
    }
}

/// `lr0 · ½ · (1 + cos(π · step / total))`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64) -> Result<f64> {
    if total == 0 || step > total {
        return Err(SolaError::Param(format!(
            "cosine_lr needs 0 <= step <= total, total >= 1 (got {step}/{total})"
        )));
    }
    if step == total {
        return Ok(0.0);
    }
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos()))
}

pub fn sgd_step(module: &mut LoraModule, grads: &LoraGrads, lr: f64) -> Result<()> {
    module.sgd_step(grads, lr)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub edit_id: usize,
    pub lora_id: usize,
    /// Immediate post-edit success per instance (1 = correct).
    pub es: Vec<u8>,
    pub final_loss: f64,
    pub trainable_params: usize,
    /// Hardware dependent; kept out of the serialized record.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl EditRecord {
    pub fn es_rate(&self) -> f64 {
        self.es.iter().map(|&v| v as f64).sum::<f64>() / self.es.len() as f64
    }
}

/// Trains `module` on `instances` with the recipe: one SGD step per
/// instance, epochs visit instances in order, cosine decay over all steps.
/// Returns the mean loss after the final step.
pub fn train_module(
    model: &BaseModel,
    module: &mut LoraModule,
    instances: &[Example],
    recipe: &TrainRecipe,
) -> Result<f64> {
    let total = recipe.epochs * instances.len();
    let mut step = 0;
    for _ in 0..recipe.epochs {
        for ex in instances {
            let lr = cosine_lr(step, total, recipe.lr0)?;
            let trace = model.forward(&ex.tokens, AdapterCtx::Fixed(module))?;
            let grads = model.backward_lora(&trace, ex.label, module)?;
            sgd_step(module, &grads, lr)?;
            step += 1;
        }
    }
    let mut loss = 0.0;
    for ex in instances {
        loss += cross_entropy(&model.forward(&ex.tokens, AdapterCtx::Fixed(module))?.logits, ex.label)?;
    }
    Ok(loss / instances.len() as f64)
}

/// Stream of `SeededRng`s for module init keyed by lora id, so that two
/// systems allocating the same id draw the same `A`.
pub fn module_rng(seed: u64, lora_id: usize) -> SeededRng {
    SeededRng::derive(seed, 0x10_0000 + lora_id as u64)
}

fn snapshot(pool: &LoraPool, mem: &KeyMemory) -> (Vec<(usize, u64)>, Vec<u64>) {
    (
        pool.frozen_hashes(),
        mem.entries().iter().map(|e| e.content_hash()).collect(),
    )
}

/// One full edit. On failure the half-built module is discarded and the
/// memory is left untouched.
pub fn apply_edit(
    model: &BaseModel,
    pool: &mut LoraPool,
    mem: &mut KeyMemory,
    task: &EditTask,
    recipe: &TrainRecipe,
    seed: u64,
) -> Result<EditRecord> {
    let start = Instant::now();
    task.validate(model.config().n_classes)?;
    if mem.entries().iter().any(|e| e.edit_id == task.edit_id) {
        return Err(SolaError::State(format!("edit {} already has keys", task.edit_id)));
    }
    let before = snapshot(pool, mem);

    let lora_id = pool.new_module(
        model.config(),
        recipe.rank,
        recipe.lora_init_std,
        &mut module_rng(seed, pool.len()),
    )?;
    let trained = (|| -> Result<(f64, Vec<Vec<f64>>)> {
        let module = pool.editable(lora_id)?;
        let loss = train_module(model, module, &task.instances, recipe)?;
        let mut queries = Vec::with_capacity(task.instances.len());
        for ex in &task.instances {
            queries.push(model.forward(&ex.tokens, AdapterCtx::None)?.query);
        }
        Ok((loss, queries))
    })();
    let (final_loss, queries) = match trained {
        Ok(v) => v,
        Err(e) => {
            pool.discard_unfrozen();
            return Err(e);
        }
    };

    let mut staged = mem.clone();
    for (instance_id, q) in queries.iter().enumerate() {
        if let Err(e) = staged.write_key(q, lora_id, task.edit_id, instance_id) {
            pool.discard_unfrozen();
            return Err(e);
        }
    }
    *mem = staged;
    pool.freeze(lora_id)?;

    let after = snapshot(pool, mem);
    if after.0[..before.0.len()] != before.0[..] || after.1[..before.1.len()] != before.1[..] {
        return Err(SolaError::State("frozen module or key changed during edit".into()));
    }

    let mut es = Vec::with_capacity(task.instances.len());
    for ex in &task.instances {
        let trace = model.forward(&ex.tokens, AdapterCtx::Routed { memory: mem, pool })?;
        es.push(u8::from(argmax(&trace.logits) == ex.label));
    }
    let trainable_params = pool.get(lora_id).map_or(0, LoraModule::trainable_params);
    Ok(EditRecord {
        edit_id: task.edit_id,
        lora_id,
        es,
        final_loss,
        trainable_params,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

/// Base model plus the editing state that grows around it.
#[derive(Debug, Clone)]
pub struct Editor {
    pub model: BaseModel,
    pub pool: LoraPool,
    pub memory: KeyMemory,
    pub recipe: TrainRecipe,
    pub seed: u64,
    pub records: Vec<EditRecord>,
}

impl Editor {
    pub fn new(model: BaseModel, memory: KeyMemory, recipe: TrainRecipe, seed: u64) -> Self {
        Editor {
            model,
            pool: LoraPool::new(),
            memory,
            recipe,
            seed,
            records: Vec::new(),
        }
    }

    pub fn apply_edit(&mut self, task: &EditTask) -> Result<&EditRecord> {
        if self.records.iter().any(|r| r.edit_id == task.edit_id) {
            return Err(SolaError::State(format!("edit {} was already applied", task.edit_id)));
        }
        let rec = apply_edit(
            &self.model,
            &mut self.pool,
            &mut self.memory,
            task,
            &self.recipe,
            self.seed,
        )?;
        self.records.push(rec);
        Ok(self.records.last().expect("just pushed"))
    }

    /// Routed inference through the master decision.
    pub fn infer(&self, tokens: &[usize]) -> Result<ForwardTrace> {
        self.model.forward(
            tokens,
            AdapterCtx::Routed {
                memory: &self.memory,
                pool: &self.pool,
            },
        )
    }

    pub fn predict(&self, tokens: &[usize]) -> Result<usize> {
        Ok(self.infer(tokens)?.prediction())
    }

    pub fn decide(&self, tokens: &[usize]) -> Result<Decision> {
        let trace = self.infer(tokens)?;
        trace
            .decision
            .ok_or_else(|| SolaError::State("routed forward produced no decision".into()))
    }

    pub fn rollback(&mut self, edit_id: usize) -> usize {
        self.memory.rollback(edit_id)
    }
}
