//! Training loop, periodic zero-shot evaluation, and the λ / embedding-size
//! ablations.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::confusion::{confusion_penalty, select_class_pairs, EcConfig};
use crate::error::{EcamlError, Result};
use crate::eval::{evaluate_clustering, recall_at_k, RetrievalReport};
use crate::losses::{LossOutput, LossRegistry, LossSpec};
use crate::net::{init_params, normalize_rows, BackwardScope, Layer, MlpConfig, MlpParams};
use crate::optim::{adam_step, AdamHyper, AdamState};
use crate::sampling::{sample_batch, BatchSpec, Dataset, Label, SplitFilter};

/// Recall cut-offs reported for the unseen split.
pub const RECALL_KS: [usize; 4] = [1, 2, 4, 8];

/// Default λ grid of the ablation.
pub const DEFAULT_LAMBDAS: [f64; 6] = [0.0, 0.01, 0.1, 0.13, 0.15, 0.5];

/// Stream ids of the per-run random generators.
const BATCH_STREAM: u64 = 0;
const PAIR_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub last_layer_lr_mult: f64,
    pub eval_every: usize,
    pub batch: BatchSpec,
    pub loss: LossSpec,
    /// `None` trains the bare metric loss.
    pub ec: Option<EcConfig>,
    pub adam: AdamHyper,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            lr: 1e-3,
            weight_decay: 2e-4,
            last_layer_lr_mult: 10.0,
            eval_every: 100,
            batch: BatchSpec::new(8, 2),
            loss: LossSpec::default(),
            ec: None,
            adam: AdamHyper::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(EcamlError::Config(format!("train.lr must be > 0, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(EcamlError::Config("train.weight_decay must be >= 0".into()));
        }
        if !(self.last_layer_lr_mult > 0.0) {
            return Err(EcamlError::Config("train.last_layer_lr_mult must be > 0".into()));
        }
        if self.eval_every == 0 {
            return Err(EcamlError::Config("train.eval_every must be >= 1".into()));
        }
        self.batch.validate()?;
        if let Some(ec) = &self.ec {
            ec.validate()?;
        }
        Ok(())
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        let mut c = self.clone();
        let mut ec = c.ec.unwrap_or_default();
        ec.lambda = lambda;
        c.ec = Some(ec);
        c
    }

    fn penalty(&self) -> Option<&EcConfig> {
        self.ec.as_ref().filter(|ec| ec.lambda > 0.0)
    }
}

/// Metrics recorded at one evaluation point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iteration: usize,
    pub seen_r1: f64,
    pub unseen_r1: f64,
    pub nmi: f64,
    pub f1: f64,
    /// Mean training objective since the previous evaluation.
    pub train_loss: Option<f64>,
    /// Mean λ-free confusion value since the previous evaluation.
    pub ec_value: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub records: Vec<EvalRecord>,
    /// Training objective at every iteration.
    pub losses: Vec<f64>,
}

impl RunHistory {
    pub fn last(&self) -> Option<&EvalRecord> {
        self.records.last()
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.17e}")).unwrap_or_default();
        let mut out = String::from("iteration,seen_r1,unseen_r1,nmi,f1,train_loss,ec_value\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{:.17e},{:.17e},{:.17e},{:.17e},{},{}\n",
                r.iteration,
                r.seen_r1,
                r.unseen_r1,
                r.nmi,
                r.f1,
                opt(r.train_loss),
                opt(r.ec_value)
            ));
        }
        out
    }
}

/// Final zero-shot metrics of a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub seen_r1: f64,
    pub unseen: RetrievalReport,
    pub nmi: f64,
    pub f1: f64,
}

impl FinalMetrics {
    pub fn unseen_r1(&self) -> f64 {
        self.unseen.recall(1).unwrap_or(f64::NAN)
    }

    /// Seen minus unseen Recall@1.
    pub fn gap(&self) -> f64 {
        self.seen_r1 - self.unseen_r1()
    }
}

#[derive(Debug)]
pub struct TrainAbort {
    pub iteration: usize,
    pub message: String,
    pub last_good: MlpParams,
    pub history: RunHistory,
}

/// Embed `inputs` and project each row onto the unit sphere.
pub fn embed_for_eval(params: &MlpParams, inputs: ArrayView2<f64>) -> Result<Array2<f64>> {
    let (out, _) = params.forward(inputs)?;
    Ok(normalize_rows(&out).0)
}

/// Zero-shot metrics: Recall@K, NMI and F1 on the unseen split plus seen R@1.
pub fn evaluate(params: &MlpParams, dataset: &Dataset, seed: u64) -> Result<FinalMetrics> {
    let (seen_x, seen_y) = dataset.subset(SplitFilter::Seen);
    let (unseen_x, unseen_y) = dataset.subset(SplitFilter::Unseen);
    evaluate_views(params, (&seen_x, &seen_y), (&unseen_x, &unseen_y), seed)
}

fn evaluate_views(
    params: &MlpParams,
    seen: (&Array2<f64>, &Vec<Label>),
    unseen: (&Array2<f64>, &Vec<Label>),
    seed: u64,
) -> Result<FinalMetrics> {
    let seen_emb = embed_for_eval(params, seen.0.view())?;
    let unseen_emb = embed_for_eval(params, unseen.0.view())?;
    let seen_r1 = recall_at_k(seen_emb.view(), seen.1, &[1])?.recall(1).unwrap_or(0.0);
    let unseen_report = recall_at_k(unseen_emb.view(), unseen.1, &RECALL_KS)?;
    let clustering = evaluate_clustering(unseen_emb.view(), unseen.1, seed)?;
    Ok(FinalMetrics {
        seen_r1,
        unseen: unseen_report,
        nmi: clustering.nmi,
        f1: clustering.f1,
    })
}

fn lr_multipliers(layers: usize, last_mult: f64) -> Vec<f64> {
    let mut m = vec![1.0; layers];
    if let Some(last) = m.last_mut() {
        *last = last_mult;
    }
    m
}

/// Train the embedding network on the seen split.
pub fn train(dataset: &Dataset, mlp_cfg: &MlpConfig, cfg: &TrainConfig) -> Result<(MlpParams, RunHistory)> {
    train_with_registry(dataset, mlp_cfg, cfg, &LossRegistry::builtin())
}

pub fn train_with_registry(
    dataset: &Dataset,
    mlp_cfg: &MlpConfig,
    cfg: &TrainConfig,
    registry: &LossRegistry,
) -> Result<(MlpParams, RunHistory)> {
    cfg.validate()?;
    mlp_cfg.validate()?;
    if mlp_cfg.input_dim != dataset.input_dim() {
        return Err(EcamlError::Config(format!(
            "mlp.input_dim is {} but the dataset has {} features",
            mlp_cfg.input_dim,
            dataset.input_dim()
        )));
    }
    let loss = registry.create(&cfg.loss)?;
    if loss.requires_unit_norm() && !mlp_cfg.normalize_output {
        return Err(EcamlError::Config(format!(
            "loss '{}' needs unit-norm embeddings; set mlp.normalize_output",
            loss.name()
        )));
    }

    let mut params = init_params(mlp_cfg)?;
    let mut adam = AdamState::new(&params, cfg.adam);
    let lr_mults = lr_multipliers(params.layers.len(), cfg.last_layer_lr_mult);

    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    batch_rng.set_stream(BATCH_STREAM);
    let mut pair_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    pair_rng.set_stream(PAIR_STREAM);

    let seen = dataset.subset(SplitFilter::Seen);
    let unseen = dataset.subset(SplitFilter::Unseen);
    let record = |params: &MlpParams, iteration: usize, train_loss, ec_value| -> Result<EvalRecord> {
        let m = evaluate_views(params, (&seen.0, &seen.1), (&unseen.0, &unseen.1), cfg.seed)?;
        Ok(EvalRecord {
            iteration,
            seen_r1: m.seen_r1,
            unseen_r1: m.unseen_r1(),
            nmi: m.nmi,
            f1: m.f1,
            train_loss,
            ec_value,
        })
    };

    let mut history = RunHistory::default();
    history.records.push(record(&params, 0, None, None)?);

    let mut loss_acc = 0.0;
    let mut ec_acc = 0.0;
    let mut since_eval = 0usize;
    for it in 1..=cfg.iterations {
        let abort = |message: String, params: &MlpParams, history: &RunHistory| {
            EcamlError::Aborted(Box::new(TrainAbort {
                iteration: it,
                message,
                last_good: params.clone(),
                history: history.clone(),
            }))
        };

        let batch = sample_batch(dataset, &cfg.batch, SplitFilter::Seen, &mut batch_rng)?;
        let (emb, trace) = params.forward(batch.features.view())?;
        let base = loss.evaluate(emb.view(), &batch, &mut batch_rng)?;

        let penalty: Option<(LossOutput, f64)> = match cfg.penalty() {
            Some(ec) => {
                let pairs = select_class_pairs(&batch.groups, ec.pair_mode, &mut pair_rng);
                let p = confusion_penalty(emb.view(), &batch.groups, &pairs, ec)?;
                let raw = p.value / ec.lambda;
                Some((p, raw))
            }
            None => None,
        };

        let total = base.value + penalty.as_ref().map_or(0.0, |(p, _)| p.value);
        if !total.is_finite() || !base.is_finite() || penalty.as_ref().is_some_and(|(p, _)| !p.is_finite()) {
            return Err(abort(
                format!("objective is {total} (base {}), batch rows {:?}", base.value, batch.source_rows),
                &params,
                &history,
            ));
        }

        let grads = match (&penalty, cfg.penalty()) {
            (Some((p, _)), Some(ec)) if ec.stop_gradient_before_last_layer => {
                let (mut g, _) = params.backward(&trace, base.grad.view())?;
                let (g_ec, _) = params.backward_scoped(&trace, p.grad.view(), BackwardScope::LastLayerOnly)?;
                g.add_assign(&g_ec);
                g
            }
            (Some((p, _)), _) => {
                let combined = &base.grad + &p.grad;
                params.backward(&trace, combined.view())?.0
            }
            _ => params.backward(&trace, base.grad.view())?.0,
        };
        if !grads.is_finite() {
            return Err(abort("non-finite parameter gradient".into(), &params, &history));
        }
        let before = params.clone();
        if let Err(e) = adam_step(&mut params, &grads, &mut adam, cfg.lr, cfg.weight_decay, &lr_mults) {
            return Err(abort(e.to_string(), &before, &history));
        }

        history.losses.push(total);
        loss_acc += total;
        if let Some((_, raw)) = &penalty {
            ec_acc += raw;
        }
        since_eval += 1;

        if it % cfg.eval_every == 0 || it == cfg.iterations {
            let n = since_eval as f64;
            let ec_value = penalty.as_ref().map(|_| ec_acc / n);
            history.records.push(record(&params, it, Some(loss_acc / n), ec_value)?);
            loss_acc = 0.0;
            ec_acc = 0.0;
            since_eval = 0;
        }
    }
    Ok((params, history))
}

/// One finished run inside an ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub lambda: f64,
    pub embedding_dim: usize,
    pub seed: u64,
    pub metrics: FinalMetrics,
}

/// An ablation row together with what is needed to write its run directory.
#[derive(Debug, Clone)]
pub struct AblationRun {
    pub row: AblationRow,
    pub mlp: MlpConfig,
    pub train: TrainConfig,
    pub params: MlpParams,
    pub history: RunHistory,
}

impl AblationRun {
    pub fn summary(&self) -> RunSummary {
        RunSummary {
            seed: self.row.seed,
            mlp: self.mlp.clone(),
            train: self.train.clone(),
            metrics: self.row.metrics.clone(),
        }
    }

    /// Directory name unique within one ablation.
    pub fn dir_name(&self) -> String {
        format!("d{}_lambda{}_seed{}", self.row.embedding_dim, self.row.lambda, self.row.seed)
    }
}

fn run_jobs<F>(jobs: usize, count: usize, f: F) -> Result<Vec<AblationRun>>
where
    F: Fn(usize) -> Result<AblationRun> + Sync + Send,
{
    if jobs <= 1 {
        return (0..count).map(&f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| EcamlError::Config(format!("cannot start {jobs} workers: {e}")))?;
    pool.install(|| (0..count).into_par_iter().map(&f).collect())
}

fn seeded_run(dataset: &Dataset, mlp_cfg: &MlpConfig, cfg: &TrainConfig, lambda: f64, seed: u64) -> Result<AblationRun> {
    let mut mlp = mlp_cfg.clone();
    mlp.seed = seed;
    let mut train_cfg = cfg.with_lambda(lambda);
    train_cfg.seed = seed;
    let (params, history) = train(dataset, &mlp, &train_cfg)?;
    let metrics = evaluate(&params, dataset, seed)?;
    Ok(AblationRun {
        row: AblationRow { lambda, embedding_dim: mlp.embedding_dim, seed, metrics },
        mlp,
        train: train_cfg,
        params,
        history,
    })
}

/// One training run per (λ, seed); rows ordered by λ, then seed.
pub fn ablate_lambda(
    dataset: &Dataset,
    mlp_cfg: &MlpConfig,
    cfg: &TrainConfig,
    lambdas: &[f64],
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<AblationRun>> {
    if lambdas.len() < 2 || !lambdas.contains(&0.0) {
        return Err(EcamlError::Config("the λ grid needs at least two values including 0".into()));
    }
    if lambdas.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
        return Err(EcamlError::Config("λ values must be finite and >= 0".into()));
    }
    if seeds.is_empty() {
        return Err(EcamlError::Config("at least one seed is required".into()));
    }
    run_jobs(jobs, lambdas.len() * seeds.len(), |idx| {
        seeded_run(dataset, mlp_cfg, cfg, lambdas[idx / seeds.len()], seeds[idx % seeds.len()])
    })
}

/// Paired baseline (λ = 0) and confusion-regularized runs per embedding size.
/// Rows are ordered by dimension, arm (baseline first), then seed.
pub fn embedding_size_sweep(
    dataset: &Dataset,
    mlp_cfg: &MlpConfig,
    cfg: &TrainConfig,
    dims: &[usize],
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<AblationRun>> {
    if dims.is_empty() || dims.contains(&0) {
        return Err(EcamlError::Config("embedding-size sweep needs at least one dimension >= 1".into()));
    }
    if seeds.is_empty() {
        return Err(EcamlError::Config("at least one seed is required".into()));
    }
    let lambda = cfg.ec.map(|e| e.lambda).unwrap_or(0.0);
    if !(lambda > 0.0) {
        return Err(EcamlError::Config("embedding-size sweep needs ec.lambda > 0 for the regularized arm".into()));
    }
    let per_dim = 2 * seeds.len();
    run_jobs(jobs, dims.len() * per_dim, |idx| {
        let mut m = mlp_cfg.clone();
        m.embedding_dim = dims[idx / per_dim];
        let arm_lambda = if (idx % per_dim) / seeds.len() == 0 { 0.0 } else { lambda };
        seeded_run(dataset, &m, cfg, arm_lambda, seeds[idx % seeds.len()])
    })
}

pub fn ablation_csv<'a>(rows: impl IntoIterator<Item = &'a AblationRow>) -> String {
    let mut out = String::from("lambda,embedding_dim,seed,seen_r1,unseen_r1,unseen_r2,unseen_r4,unseen_r8,nmi,f1\n");
    for r in rows {
        let m = &r.metrics;
        let rk = |k| m.unseen.recall(k).unwrap_or(f64::NAN);
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.lambda,
            r.embedding_dim,
            r.seed,
            m.seen_r1,
            rk(1),
            rk(2),
            rk(4),
            rk(8),
            m.nmi,
            m.f1
        ));
    }
    out
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median of `metric` over the rows matching `filter`.
pub fn median_by<'a>(
    rows: impl IntoIterator<Item = &'a AblationRow>,
    filter: impl Fn(&AblationRow) -> bool,
    metric: impl Fn(&FinalMetrics) -> f64,
) -> f64 {
    let mut v: Vec<f64> = rows.into_iter().filter(|r| filter(r)).map(|r| metric(&r.metrics)).collect();
    median(&mut v)
}

/// Per-setting medians over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedianRow {
    pub lambda: f64,
    pub embedding_dim: usize,
    pub seeds: usize,
    pub seen_r1: f64,
    pub unseen_r1: f64,
    pub gap: f64,
    pub nmi: f64,
    pub f1: f64,
}

/// Collapse rows sharing (embedding size, λ) into medians, in first-seen order.
pub fn median_table<'a>(rows: impl IntoIterator<Item = &'a AblationRow>) -> Vec<MedianRow> {
    let rows: Vec<&AblationRow> = rows.into_iter().collect();
    let mut keys: Vec<(usize, f64)> = Vec::new();
    for r in &rows {
        if !keys.iter().any(|k| *k == (r.embedding_dim, r.lambda)) {
            keys.push((r.embedding_dim, r.lambda));
        }
    }
    keys.into_iter()
        .map(|(dim, lambda)| {
            let sel = |r: &AblationRow| r.embedding_dim == dim && r.lambda == lambda;
            let med = |f: fn(&FinalMetrics) -> f64| median_by(rows.iter().copied(), sel, f);
            MedianRow {
                lambda,
                embedding_dim: dim,
                seeds: rows.iter().filter(|r| sel(r)).count(),
                seen_r1: med(|m| m.seen_r1),
                unseen_r1: med(FinalMetrics::unseen_r1),
                gap: med(FinalMetrics::gap),
                nmi: med(|m| m.nmi),
                f1: med(|m| m.f1),
            }
        })
        .collect()
}

pub fn median_csv(rows: &[MedianRow]) -> String {
    let mut out = String::from("lambda,embedding_dim,seeds,seen_r1,unseen_r1,gap,nmi,f1\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.lambda, r.embedding_dim, r.seeds, r.seen_r1, r.unseen_r1, r.gap, r.nmi, r.f1
        ));
    }
    out
}

// ---------------------------------------------------------------- run directories

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub mlp: MlpConfig,
    pub train: TrainConfig,
    pub metrics: FinalMetrics,
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| EcamlError::io(path, e))?;
    f.write_all(contents).map_err(|e| EcamlError::io(path, e))
}

/// Write `history.csv`, `summary.json` and `weights.csv` into `dir`.
pub fn write_run_dir(dir: &Path, params: &MlpParams, history: &RunHistory, summary: &RunSummary) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| EcamlError::io(dir, e))?;
    write_file(&dir.join("history.csv"), history.to_csv().as_bytes())?;
    let json = serde_json::to_string_pretty(summary).expect("summary serializes");
    write_file(&dir.join("summary.json"), json.as_bytes())?;
    write_file(&dir.join("weights.csv"), weights_csv(params).as_bytes())
}

/// Dump parameters as `layer,param,row,col,value` (param `w` or `b`).
pub fn weights_csv(params: &MlpParams) -> String {
    let mut out = String::from("layer,param,row,col,value\n");
    for (l, layer) in params.layers.iter().enumerate() {
        for ((r, c), v) in layer.weights.indexed_iter() {
            out.push_str(&format!("{l},w,{r},{c},{v:.16e}\n"));
        }
        for (c, v) in layer.bias.iter().enumerate() {
            out.push_str(&format!("{l},b,0,{c},{v:.16e}\n"));
        }
    }
    out
}

/// Inverse of [`weights_csv`] for a network of the given shape.
pub fn parse_weights_csv(text: &str, config: &MlpConfig) -> Result<MlpParams> {
    let mut layers: Vec<Layer> = config
        .layer_shapes()
        .into_iter()
        .map(|(i, o)| Layer { weights: Array2::zeros((i, o)), bias: Array1::zeros(o) })
        .collect();
    let mut seen = 0usize;
    for (n, line) in text.lines().enumerate().skip(1) {
        let lineno = n as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        let err = |m: &str| EcamlError::Parse { line: lineno, message: m.to_string() };
        if f.len() != 5 {
            return Err(err("expected 5 fields"));
        }
        let l: usize = f[0].parse().map_err(|_| err("bad layer index"))?;
        let r: usize = f[2].parse().map_err(|_| err("bad row index"))?;
        let c: usize = f[3].parse().map_err(|_| err("bad column index"))?;
        let v: f64 = f[4].parse().map_err(|_| err("bad value"))?;
        let layer = layers.get_mut(l).ok_or_else(|| err("layer out of range"))?;
        let slot = match f[1] {
            "w" => layer.weights.get_mut((r, c)),
            "b" if r == 0 => layer.bias.get_mut(c),
            _ => None,
        }
        .ok_or_else(|| err("parameter index out of range"))?;
        *slot = v;
        seen += 1;
    }
    let params = MlpParams { layers, normalize_output: config.normalize_output };
    if seen != params.num_parameters() {
        return Err(EcamlError::Parse {
            line: 0,
            message: format!("weights file has {seen} entries, network needs {}", params.num_parameters()),
        });
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    fn tiny_data() -> Dataset {
        generate(&SynthConfig {
            seen_classes: 4,
            unseen_classes: 4,
            samples_per_class: 6,
            d_general: 6,
            d_shortcut: 2,
            seed: 3,
            ..Default::default()
        })
        .unwrap()
    }

    fn tiny_cfg(iterations: usize) -> TrainConfig {
        TrainConfig {
            iterations,
            eval_every: 5,
            batch: BatchSpec::new(4, 2),
            seed: 2,
            ..Default::default()
        }
    }

    fn tiny_mlp(d: &Dataset) -> MlpConfig {
        MlpConfig { hidden_dims: vec![8], embedding_dim: 4, ..MlpConfig::desk(d.input_dim()) }
    }

    #[test]
    fn zero_iterations_records_only_initial_eval() {
        let d = tiny_data();
        let (_, h) = train(&d, &tiny_mlp(&d), &tiny_cfg(0)).unwrap();
        assert_eq!(h.records.len(), 1);
        assert_eq!(h.records[0].iteration, 0);
        assert!(h.losses.is_empty());
    }

    #[test]
    fn eval_schedule_includes_last_iteration() {
        let d = tiny_data();
        let (_, h) = train(&d, &tiny_mlp(&d), &tiny_cfg(12)).unwrap();
        let its: Vec<usize> = h.records.iter().map(|r| r.iteration).collect();
        assert_eq!(its, vec![0, 5, 10, 12]);
        assert_eq!(h.losses.len(), 12);
    }

    #[test]
    fn triplet_requires_normalized_output() {
        let d = tiny_data();
        let mut cfg = tiny_cfg(1);
        cfg.loss = LossSpec::named("triplet");
        assert!(matches!(train(&d, &tiny_mlp(&d), &cfg), Err(EcamlError::Config(_))));
        let mut m = tiny_mlp(&d);
        m.normalize_output = true;
        assert!(train(&d, &m, &cfg).is_ok());
    }

    #[test]
    fn training_is_reproducible() {
        let d = tiny_data();
        let cfg = tiny_cfg(10).with_lambda(0.1);
        let (p1, h1) = train(&d, &tiny_mlp(&d), &cfg).unwrap();
        let (p2, h2) = train(&d, &tiny_mlp(&d), &cfg).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(h1, h2);
        assert!(h1.records.last().unwrap().ec_value.is_some());
    }

    #[test]
    fn weights_roundtrip() {
        let d = tiny_data();
        let m = tiny_mlp(&d);
        let p = init_params(&m).unwrap();
        let back = parse_weights_csv(&weights_csv(&p), &m).unwrap();
        assert_eq!(back, p);
        let mut bigger = m.clone();
        bigger.embedding_dim = 5;
        assert!(parse_weights_csv(&weights_csv(&p), &bigger).is_err());
    }

    #[test]
    fn lambda_grid_needs_zero() {
        let d = tiny_data();
        let err = ablate_lambda(&d, &tiny_mlp(&d), &tiny_cfg(1), &[0.1, 1.0], &[0], 1).unwrap_err();
        assert!(matches!(err, EcamlError::Config(_)));
        let err = ablate_lambda(&d, &tiny_mlp(&d), &tiny_cfg(1), &[0.0, -1.0], &[0], 1).unwrap_err();
        assert!(matches!(err, EcamlError::Config(_)));
    }

    #[test]
    fn medians() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
