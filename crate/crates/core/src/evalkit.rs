//! Synthetic benchmark and the ES / ERR / TRR metric suite.
//!
//! The base task labels a uniformly random token sequence with
//! `(Σ tokens) mod n_classes`. Edits take held-out test sequences and shift
//! the label by one class. The holdout set is never edited and measures
//! retention.

use std::collections::HashSet;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::editor::{EditTask, Editor};
use crate::error::{Result, SolaError};
use crate::model::{AdapterCtx, BaseModel, Example, ModelConfig};
use crate::numerics::{normalize, SeededRng};
use crate::routing::DistanceMetric;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkParams {
    pub seed: u64,
    pub n_edits: usize,
    pub instances_per_edit: usize,
    pub holdout_size: usize,
    pub train_size: usize,
    pub test_size: usize,
    /// Rephrase probes per edit for the generalization report.
    pub probes_per_edit: usize,
}

impl Default for BenchmarkParams {
    fn default() -> Self {
        BenchmarkParams {
            seed: 7,
            n_edits: 100,
            instances_per_edit: 1,
            holdout_size: 500,
            train_size: 4096,
            test_size: 1024,
            probes_per_edit: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Probe {
    pub edit_id: usize,
    pub example: Example,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BenchmarkMeta {
    params: BenchmarkParams,
    vocab: usize,
    seq_len: usize,
    n_classes: usize,
    edit_sources: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub params: BenchmarkParams,
    pub vocab: usize,
    pub seq_len: usize,
    pub n_classes: usize,
    pub base_train: Vec<Example>,
    pub base_test: Vec<Example>,
    pub holdout: Vec<Example>,
    pub edits: Vec<EditTask>,
    /// Index into `base_test` of each edit's primary instance.
    pub edit_sources: Vec<usize>,
    pub probes: Vec<Probe>,
}

pub fn task_label(tokens: &[usize], n_classes: usize) -> usize {
    tokens.iter().sum::<usize>() % n_classes
}

pub fn relabel(label: usize, n_classes: usize) -> usize {
    (label + 1) % n_classes
}

const STREAM_SETS: u64 = 0xBE7C;
const STREAM_REPHRASE: u64 = 0x2000_0000;
const STREAM_PROBE: u64 = 0x3000_0000;
const STREAM_HOLDOUT_SPARE: u64 = 0x4E5A;

struct SeqSource {
    rng: SeededRng,
    vocab: usize,
    seq_len: usize,
    n_classes: usize,
}

impl SeqSource {
    fn fresh(&mut self, seen: &mut HashSet<Vec<usize>>) -> Example {
        loop {
            let tokens: Vec<usize> = (0..self.seq_len).map(|_| self.rng.below(self.vocab)).collect();
            if seen.insert(tokens.clone()) {
                let label = task_label(&tokens, self.n_classes);
                return Example { tokens, label };
            }
        }
    }
}

/// Permutes all but the final token; the final token (and so the sum and
/// the key convention) is kept. Avoids sequences already in `seen`.
fn rephrase(tokens: &[usize], rng: &mut SeededRng, seen: &mut HashSet<Vec<usize>>) -> Option<Vec<usize>> {
    let n = tokens.len();
    for _ in 0..64 {
        let mut head = tokens[..n - 1].to_vec();
        rng.shuffle(&mut head);
        head.push(tokens[n - 1]);
        if seen.insert(head.clone()) {
            return Some(head);
        }
    }
    None
}

impl Benchmark {
    fn edit_for_source(&self, edit_id: usize, src: usize, seen: &mut HashSet<Vec<usize>>) -> (EditTask, Vec<Probe>) {
        let primary = &self.base_test[src];
        let label = relabel(primary.label, self.n_classes);
        let mut instances = vec![Example {
            tokens: primary.tokens.clone(),
            label,
        }];
        let mut rng = SeededRng::derive(self.params.seed, STREAM_REPHRASE + src as u64);
        for _ in 1..self.params.instances_per_edit {
            if let Some(tokens) = rephrase(&primary.tokens, &mut rng, seen) {
                instances.push(Example { tokens, label });
            }
        }
        let mut rng = SeededRng::derive(self.params.seed, STREAM_PROBE + src as u64);
        let probes = (0..self.params.probes_per_edit)
            .filter_map(|_| rephrase(&primary.tokens, &mut rng, seen))
            .map(|tokens| Probe {
                edit_id,
                example: Example { tokens, label },
            })
            .collect();
        (EditTask { edit_id, instances }, probes)
    }

    fn all_sequences(&self) -> HashSet<Vec<usize>> {
        let mut seen = HashSet::new();
        for ex in self.base_train.iter().chain(&self.base_test).chain(&self.holdout) {
            seen.insert(ex.tokens.clone());
        }
        for t in &self.edits {
            for ex in &t.instances {
                seen.insert(ex.tokens.clone());
            }
        }
        for p in &self.probes {
            seen.insert(p.example.tokens.clone());
        }
        seen
    }

    pub fn edited_instances(&self) -> impl Iterator<Item = (usize, &Example)> {
        self.edits
            .iter()
            .flat_map(|t| t.instances.iter().map(move |ex| (t.edit_id, ex)))
    }

    /// Writes one JSON-lines file per split plus `benchmark.json`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let meta = BenchmarkMeta {
            params: self.params.clone(),
            vocab: self.vocab,
            seq_len: self.seq_len,
            n_classes: self.n_classes,
            edit_sources: self.edit_sources.clone(),
        };
        write_json(&dir.join("benchmark.json"), &meta)?;
        write_jsonl(&dir.join("base_train.jsonl"), &self.base_train)?;
        write_jsonl(&dir.join("base_test.jsonl"), &self.base_test)?;
        write_jsonl(&dir.join("holdout.jsonl"), &self.holdout)?;
        write_jsonl(&dir.join("edits.jsonl"), &self.edits)?;
        write_jsonl(&dir.join("probes.jsonl"), &self.probes)?;
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let meta: BenchmarkMeta = read_json(&dir.join("benchmark.json"))?;
        Ok(Benchmark {
            params: meta.params,
            vocab: meta.vocab,
            seq_len: meta.seq_len,
            n_classes: meta.n_classes,
            base_train: read_jsonl(&dir.join("base_train.jsonl"))?,
            base_test: read_jsonl(&dir.join("base_test.jsonl"))?,
            holdout: read_jsonl(&dir.join("holdout.jsonl"))?,
            edits: read_jsonl(&dir.join("edits.jsonl"))?,
            edit_sources: meta.edit_sources,
            probes: read_jsonl(&dir.join("probes.jsonl"))?,
        })
    }
}

/// Deterministic synthetic benchmark. Train, test and holdout sequences are
/// pairwise distinct; edits are the first `n_edits` test items of a seeded
/// shuffle, relabeled to `(y + 1) mod n_classes`.
pub fn gen_benchmark(params: &BenchmarkParams, model: &ModelConfig) -> Result<Benchmark> {
    for (name, v) in [
        ("n_edits", params.n_edits),
        ("instances_per_edit", params.instances_per_edit),
        ("holdout_size", params.holdout_size),
        ("train_size", params.train_size),
        ("test_size", params.test_size),
    ] {
        if v == 0 {
            return Err(SolaError::Param(format!("{name} must be >= 1")));
        }
    }
    if params.n_edits > params.test_size {
        return Err(SolaError::Param(format!(
            "{} edits requested but only {} distinct test inputs",
            params.n_edits, params.test_size
        )));
    }
    let distinct = (model.vocab as f64).powi(model.seq_len as i32);
    let needed = (params.train_size + params.test_size + params.holdout_size) as f64
        * (1 + params.instances_per_edit + params.probes_per_edit) as f64;
    if distinct < 2.0 * needed {
        return Err(SolaError::Param(format!(
            "vocab^seq_len = {distinct} too small for the requested benchmark"
        )));
    }
    let mut src = SeqSource {
        rng: SeededRng::derive(params.seed, STREAM_SETS),
        vocab: model.vocab,
        seq_len: model.seq_len,
        n_classes: model.n_classes,
    };
    let mut seen = HashSet::new();
    let base_train: Vec<Example> = (0..params.train_size).map(|_| src.fresh(&mut seen)).collect();
    let base_test: Vec<Example> = (0..params.test_size).map(|_| src.fresh(&mut seen)).collect();
    let holdout: Vec<Example> = (0..params.holdout_size).map(|_| src.fresh(&mut seen)).collect();
    let mut order: Vec<usize> = (0..params.test_size).collect();
    src.rng.shuffle(&mut order);
    order.truncate(params.n_edits);

    let mut bench = Benchmark {
        params: params.clone(),
        vocab: model.vocab,
        seq_len: model.seq_len,
        n_classes: model.n_classes,
        base_train,
        base_test,
        holdout,
        edits: Vec::new(),
        edit_sources: order.clone(),
        probes: Vec::new(),
    };
    for (edit_id, &s) in order.iter().enumerate() {
        let (task, probes) = bench.edit_for_source(edit_id, s, &mut seen);
        bench.edits.push(task);
        bench.probes.extend(probes);
    }
    Ok(bench)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replacement {
    pub edit_id: usize,
    pub old_source: usize,
    pub new_source: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RectifyReport {
    pub replaced_edits: Vec<Replacement>,
    pub resampled_holdout: Vec<usize>,
    pub unresolved_edits: usize,
    pub unresolved_holdout: usize,
}

impl RectifyReport {
    pub fn is_clean(&self) -> bool {
        self.unresolved_edits == 0 && self.unresolved_holdout == 0
    }
}

fn unit_query(model: &BaseModel, tokens: &[usize]) -> Result<Vec<f64>> {
    normalize(&model.forward(tokens, AdapterCtx::None)?.query)
}

fn min_distance(metric: DistanceMetric, q: &[f64], keys: &[Vec<f64>]) -> f64 {
    keys.iter()
        .map(|k| metric.between_unit(q, k))
        .fold(f64::INFINITY, f64::min)
}

/// Makes the benchmark consistent with a trained base model:
/// every edit target differs from the base prediction, edit queries are
/// pairwise at least `alpha` apart, and every holdout query is at least
/// `alpha` from every edit query. Offending edits are swapped for the next
/// unused test item; offending holdout items are resampled. Anything that
/// cannot be fixed is counted as unresolved.
pub fn rectify(bench: &mut Benchmark, model: &BaseModel, alpha: f64, metric: DistanceMetric) -> Result<RectifyReport> {
    let mut report = RectifyReport::default();
    let mut seen = bench.all_sequences();
    let mut used: HashSet<usize> = bench.edit_sources.iter().copied().collect();
    let mut spare = (0..bench.base_test.len())
        .filter(|i| !used.contains(i))
        .collect::<Vec<_>>()
        .into_iter();
    let mut accepted: Vec<Vec<f64>> = Vec::new();
    let mut probes = Vec::new();

    for idx in 0..bench.edits.len() {
        loop {
            let task = &bench.edits[idx];
            let primary = &task.instances[0];
            let mut reason = None;
            if model.predict(&primary.tokens)? == primary.label {
                reason = Some("target equals base prediction".to_string());
            }
            let mut queries = Vec::with_capacity(task.instances.len());
            for ex in &task.instances {
                queries.push(unit_query(model, &ex.tokens)?);
            }
            if reason.is_none() {
                let d = queries
                    .iter()
                    .map(|q| min_distance(metric, q, &accepted))
                    .fold(f64::INFINITY, f64::min);
                if d < alpha {
                    reason = Some(format!("query within {d:.3e} of an earlier edit"));
                }
            }
            match reason {
                None => {
                    accepted.extend(queries);
                    break;
                }
                Some(reason) => match spare.next() {
                    Some(new_src) => {
                        let edit_id = task.edit_id;
                        let old_source = bench.edit_sources[idx];
                        used.insert(new_src);
                        let (task, _) = bench.edit_for_source(edit_id, new_src, &mut seen);
                        bench.edits[idx] = task;
                        bench.edit_sources[idx] = new_src;
                        report.replaced_edits.push(Replacement {
                            edit_id,
                            old_source,
                            new_source: new_src,
                            reason,
                        });
                    }
                    None => {
                        report.unresolved_edits += 1;
                        accepted.extend(queries);
                        break;
                    }
                },
            }
        }
    }
    // Probes follow their edit's final source.
    let replaced: HashSet<usize> = report.replaced_edits.iter().map(|r| r.edit_id).collect();
    for p in &bench.probes {
        if !replaced.contains(&p.edit_id) {
            probes.push(p.clone());
        }
    }
    for idx in 0..bench.edits.len() {
        let edit_id = bench.edits[idx].edit_id;
        if replaced.contains(&edit_id) {
            let (_, ps) = bench.edit_for_source(edit_id, bench.edit_sources[idx], &mut seen);
            probes.extend(ps);
        }
    }
    probes.sort_by_key(|p| p.edit_id);
    bench.probes = probes;

    let mut src = SeqSource {
        rng: SeededRng::derive(bench.params.seed, STREAM_HOLDOUT_SPARE),
        vocab: bench.vocab,
        seq_len: bench.seq_len,
        n_classes: bench.n_classes,
    };
    for i in 0..bench.holdout.len() {
        let q = unit_query(model, &bench.holdout[i].tokens)?;
        if min_distance(metric, &q, &accepted) >= alpha {
            continue;
        }
        let mut fixed = false;
        for _ in 0..10_000 {
            let candidate = src.fresh(&mut seen);
            let q = unit_query(model, &candidate.tokens)?;
            if min_distance(metric, &q, &accepted) >= alpha {
                bench.holdout[i] = candidate;
                fixed = true;
                break;
            }
        }
        if fixed {
            report.resampled_holdout.push(i);
        } else {
            report.unresolved_holdout += 1;
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_edits: usize,
    pub active_edits: usize,
    pub rolled_back_edits: usize,
    pub es_rate: f64,
    /// Stream-end accuracy over instances of edits that still have keys.
    pub err: f64,
    /// Set when there were no active edited instances (`err` is then 1.0).
    pub err_empty: bool,
    pub active_edits_correct: usize,
    /// Rolled-back edits whose every instance is bit-identical to base.
    pub rolled_back_restored: usize,
    pub trr: f64,
    pub trr_base: f64,
    pub holdout_bit_identical: bool,
    pub holdout_adapted: usize,
    pub mismatches: usize,
    pub trainable_params_per_edit: usize,
    pub total_memory_entries: usize,
    /// Fraction of rephrase probes routed to their edit's module.
    pub generalization: Option<f64>,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str =
        "n_edits,active_edits,es,err,trr,trr_base,mismatches,trainable_params_per_edit,memory_entries";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.n_edits,
            self.active_edits,
            self.es_rate,
            self.err,
            self.trr,
            self.trr_base,
            self.mismatches,
            self.trainable_params_per_edit,
            self.total_memory_entries
        )
    }
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

pub fn compute_metrics(editor: &Editor, bench: &Benchmark) -> Result<MetricsReport> {
    let model = &editor.model;
    let active_ids: HashSet<usize> = editor.memory.edit_ids().into_iter().collect();
    let applied: HashSet<usize> = editor.records.iter().map(|r| r.edit_id).collect();

    let es_total: usize = editor.records.iter().map(|r| r.es.len()).sum();
    let es_hits: usize = editor
        .records
        .iter()
        .map(|r| r.es.iter().map(|&v| v as usize).sum::<usize>())
        .sum();
    let es_rate = if es_total == 0 {
        1.0
    } else {
        es_hits as f64 / es_total as f64
    };

    let lora_of = |edit_id: usize| editor.records.iter().find(|r| r.edit_id == edit_id).map(|r| r.lora_id);

    let mut err_hits = 0usize;
    let mut err_total = 0usize;
    let mut assignments = Vec::new();
    let mut queries = Vec::new();
    let mut active_edits_correct = 0;
    let mut rolled_back_restored = 0;
    for task in bench.edits.iter().filter(|t| applied.contains(&t.edit_id)) {
        let active = active_ids.contains(&task.edit_id);
        let mut all_correct = true;
        let mut all_base = true;
        for ex in &task.instances {
            let routed = editor.infer(&ex.tokens)?;
            if active {
                err_total += 1;
                let ok = routed.prediction() == ex.label;
                err_hits += usize::from(ok);
                all_correct &= ok;
                assignments.push(lora_of(task.edit_id).expect("applied edit has a record"));
                queries.push(routed.query.clone());
            } else {
                let base = model.forward(&ex.tokens, AdapterCtx::None)?;
                all_base &= bits(&base.logits) == bits(&routed.logits);
            }
        }
        if active {
            active_edits_correct += usize::from(all_correct);
        } else {
            rolled_back_restored += usize::from(all_base);
        }
    }
    let mismatches = editor.memory.mismatch_count(&assignments, &queries)?;

    let mut trr_hits = 0usize;
    let mut base_hits = 0usize;
    let mut identical = true;
    let mut adapted = 0usize;
    for ex in &bench.holdout {
        let base = model.forward(&ex.tokens, AdapterCtx::None)?;
        let routed = editor.infer(&ex.tokens)?;
        base_hits += usize::from(base.prediction() == ex.label);
        trr_hits += usize::from(routed.prediction() == ex.label);
        identical &= bits(&base.logits) == bits(&routed.logits);
        adapted += usize::from(routed.decision.is_some_and(|d| d.is_adapted()));
    }
    let holdout_n = bench.holdout.len().max(1) as f64;

    let mut probe_total = 0usize;
    let mut probe_hits = 0usize;
    for p in bench.probes.iter().filter(|p| active_ids.contains(&p.edit_id)) {
        probe_total += 1;
        let dec = editor.decide(&p.example.tokens)?;
        probe_hits += usize::from(dec.lora_id().is_some() && dec.lora_id() == lora_of(p.edit_id));
    }

    let trainable_params_per_edit = editor.records.first().map_or_else(
        || {
            let c = model.config();
            c.edited_layers.len() * editor.recipe.rank * (c.d_model + c.ffn_hidden)
        },
        |r| r.trainable_params,
    );

    Ok(MetricsReport {
        n_edits: editor.records.len(),
        active_edits: editor
            .records
            .iter()
            .filter(|r| active_ids.contains(&r.edit_id))
            .count(),
        rolled_back_edits: editor
            .records
            .iter()
            .filter(|r| !active_ids.contains(&r.edit_id))
            .count(),
        es_rate,
        err: if err_total == 0 {
            1.0
        } else {
            err_hits as f64 / err_total as f64
        },
        err_empty: err_total == 0,
        active_edits_correct,
        rolled_back_restored,
        trr: trr_hits as f64 / holdout_n,
        trr_base: base_hits as f64 / holdout_n,
        holdout_bit_identical: identical,
        holdout_adapted: adapted,
        mismatches,
        trainable_params_per_edit,
        total_memory_entries: editor.memory.len(),
        generalization: (probe_total > 0).then(|| probe_hits as f64 / probe_total as f64),
    })
}

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> SolaError {
    SolaError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| io_err(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(serde_json::from_str(&s)?)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

pub fn append_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| io_err(path, e))?;
    for item in items {
        let mut line = serde_json::to_vec(item)?;
        line.push(b'\n');
        f.write_all(&line).map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let s = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    s.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(SolaError::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::editor::TrainRecipe;
    use crate::model::LayerId;
    use crate::routing::KeyMemory;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            vocab: 16,
            seq_len: 6,
            d_model: 8,
            n_blocks: 3,
            ffn_hidden: 12,
            n_classes: 4,
            edited_layers: vec![LayerId(1), LayerId(2)],
            init_std: 0.3,
            seed: 0,
        }
    }

    fn small_params() -> BenchmarkParams {
        BenchmarkParams {
            seed: 3,
            n_edits: 8,
            instances_per_edit: 2,
            holdout_size: 40,
            train_size: 64,
            test_size: 32,
            probes_per_edit: 1,
        }
    }

    #[test]
    fn labels_follow_rule() {
        assert_eq!(task_label(&[1, 2, 3, 10], 8), 0);
        assert_eq!(relabel(7, 8), 0);
        let b = gen_benchmark(&small_params(), &small_cfg()).unwrap();
        for ex in b.base_train.iter().chain(&b.base_test).chain(&b.holdout) {
            assert_eq!(ex.label, task_label(&ex.tokens, 4));
        }
        for (t, &src) in b.edits.iter().zip(&b.edit_sources) {
            let y_old = b.base_test[src].label;
            for ex in &t.instances {
                assert_eq!(ex.label, (y_old + 1) % 4);
                assert_eq!(ex.tokens.last(), b.base_test[src].tokens.last());
            }
            assert_eq!(t.instances.len(), 2);
        }
    }

    #[test]
    fn default_counts_and_determinism() {
        let cfg = ModelConfig::default();
        let p = BenchmarkParams::default();
        let a = gen_benchmark(&p, &cfg).unwrap();
        assert_eq!(a.edits.len(), 100);
        assert_eq!(a.holdout.len(), 500);
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        a.write_dir(dir_a.path()).unwrap();
        gen_benchmark(&p, &cfg).unwrap().write_dir(dir_b.path()).unwrap();
        for f in [
            "benchmark.json",
            "base_train.jsonl",
            "base_test.jsonl",
            "holdout.jsonl",
            "edits.jsonl",
            "probes.jsonl",
        ] {
            let x = fs::read(dir_a.path().join(f)).unwrap();
            let y = fs::read(dir_b.path().join(f)).unwrap();
            assert_eq!(x, y, "{f} differs");
        }
        let lines = fs::read_to_string(dir_a.path().join("edits.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), 100);
        let lines = fs::read_to_string(dir_a.path().join("holdout.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), 500);
        assert_eq!(Benchmark::read_dir(dir_a.path()).unwrap(), a);
    }

    #[test]
    fn splits_are_disjoint() {
        let b = gen_benchmark(&small_params(), &small_cfg()).unwrap();
        let edit_inputs: HashSet<&Vec<usize>> = b.edited_instances().map(|(_, e)| &e.tokens).collect();
        for ex in &b.holdout {
            assert!(!edit_inputs.contains(&ex.tokens));
        }
        let train: HashSet<&Vec<usize>> = b.base_train.iter().map(|e| &e.tokens).collect();
        assert!(b.base_test.iter().all(|e| !train.contains(&e.tokens)));
    }

    #[test]
    fn too_many_edits_rejected() {
        let mut p = small_params();
        p.n_edits = 33;
        assert!(matches!(gen_benchmark(&p, &small_cfg()), Err(SolaError::Param(_))));
        p.n_edits = 0;
        assert!(gen_benchmark(&p, &small_cfg()).is_err());
    }

    #[test]
    fn rectify_enforces_targets_and_separation() {
        let cfg = small_cfg();
        let model = BaseModel::build(cfg.clone(), &mut SeededRng::new(4)).unwrap();
        let mut b = gen_benchmark(&small_params(), &cfg).unwrap();
        let report = rectify(&mut b, &model, 0.01, DistanceMetric::Cosine).unwrap();
        assert!(report.is_clean(), "{report:?}");
        let mut keys = Vec::new();
        for t in &b.edits {
            assert_ne!(model.predict(&t.instances[0].tokens).unwrap(), t.instances[0].label);
            for ex in &t.instances {
                keys.push(unit_query(&model, &ex.tokens).unwrap());
            }
        }
        for ex in &b.holdout {
            let q = unit_query(&model, &ex.tokens).unwrap();
            assert!(min_distance(DistanceMetric::Cosine, &q, &keys) >= 0.01);
        }
        let sources: HashSet<usize> = b.edit_sources.iter().copied().collect();
        assert_eq!(sources.len(), b.edits.len());
        assert_eq!(b.probes.len(), b.edits.len());
    }

    #[test]
    fn metrics_on_empty_and_recount() {
        let cfg = small_cfg();
        let model = BaseModel::build(cfg.clone(), &mut SeededRng::new(4)).unwrap();
        let mut b = gen_benchmark(&small_params(), &cfg).unwrap();
        rectify(&mut b, &model, 0.01, DistanceMetric::Cosine).unwrap();
        let mut ed = Editor::new(model.clone(), KeyMemory::default(), TrainRecipe::default(), 9);
        let m = compute_metrics(&ed, &b).unwrap();
        assert!(m.err_empty);
        assert_eq!(m.err, 1.0);
        assert_eq!(m.trr, m.trr_base);
        assert!(m.holdout_bit_identical);

        for t in &b.edits {
            ed.apply_edit(t).unwrap();
        }
        let m = compute_metrics(&ed, &b).unwrap();
        let mut hits = 0;
        let mut total = 0;
        for (_, ex) in b.edited_instances() {
            total += 1;
            let logits = model
                .forward(
                    &ex.tokens,
                    AdapterCtx::Routed {
                        memory: &ed.memory,
                        pool: &ed.pool,
                    },
                )
                .unwrap()
                .logits;
            hits += usize::from(crate::numerics::argmax(&logits) == ex.label);
        }
        assert_eq!(m.err, hits as f64 / total as f64);
        assert_eq!(m.err, m.es_rate);
        assert_eq!(m.mismatches, 0);
        assert!(m.holdout_bit_identical);
        assert_eq!(m.trr, m.trr_base);
        assert_eq!(m.total_memory_entries, 16);
        assert!(m.generalization.is_some());
    }
}
