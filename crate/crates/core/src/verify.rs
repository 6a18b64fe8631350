//! Randomized property suite: the divergence inequalities, negative type and
//! kernel positivity, plus finite-difference gradient checks of every
//! objective.

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::confusion::{
    confusion_penalty, ecaml_objective, select_class_pairs, ClassGroup, EcConfig, PairMode,
};
use crate::divergences::{
    check_ec_ged, check_ec_mmd, distance_induced_kernel_gram, min_eigenvalue, negative_type_witness,
    squared_euclidean_witness_identity, Semimetric, INEQUALITY_TOL,
};
use crate::error::Result;
use crate::gradcheck::{finite_diff_check, GradCheckReport};
use crate::losses::{binomial_loss, npair_loss, triplet_loss, BinomialConfig, LossOutput, TripletConfig};
use crate::net::{init_params, normalize_rows, MlpConfig};
use crate::sampling::{build_contrastive_pairs, build_npair_tuples, build_triplets, Batch, Label, Triplet};

/// Largest accepted finite-difference relative error.
pub const GRAD_TOL: f64 = 1e-4;
const FD_EPS: f64 = 1e-5;
/// Triplet instances whose hinge sits this close to the kink are redrawn.
const KINK_CLEARANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VerifyConfig {
    /// Instances per divergence property.
    pub fuzz: usize,
    /// Instances per gradient check.
    pub grad_instances: usize,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig { fuzz: 1000, grad_instances: 20, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub violations: usize,
    /// Worst observed error statistic (meaning depends on the check).
    pub worst: f64,
    pub tolerance: f64,
    pub first_violation: Option<String>,
}

impl CheckResult {
    fn new(name: &str, tolerance: f64) -> Self {
        CheckResult {
            name: name.to_string(),
            instances: 0,
            violations: 0,
            worst: 0.0,
            tolerance,
            first_violation: None,
        }
    }

    /// Record one instance; `err` is compared against the tolerance.
    fn observe(&mut self, err: f64, describe: impl FnOnce() -> String) {
        self.instances += 1;
        let err = if err.is_nan() { f64::INFINITY } else { err };
        self.worst = self.worst.max(err);
        if err > self.tolerance {
            self.violations += 1;
            if self.first_violation.is_none() {
                self.first_violation = Some(describe());
            }
        }
    }

    pub fn passed(&self) -> bool {
        self.violations == 0 && self.instances > 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub config: VerifyConfig,
    pub checks: Vec<CheckResult>,
    pub total_violations: usize,
    pub passed: bool,
}

pub fn run_suite(cfg: &VerifyConfig) -> Result<VerifyReport> {
    let mut checks = divergence_checks(cfg.fuzz, cfg.seed)?;
    checks.extend(gradient_checks(cfg.grad_instances, cfg.seed)?);
    let total_violations = checks.iter().map(|c| c.violations).sum();
    let passed = checks.iter().all(CheckResult::passed);
    Ok(VerifyReport { config: *cfg, checks, total_violations, passed })
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || scale * rng.sample::<f64, _>(StandardNormal))
}

/// Log-uniform scale in [0.1, 10].
fn random_scale(rng: &mut ChaCha8Rng) -> f64 {
    10f64.powf(rng.random_range(-1.0..1.0))
}

/// Divergence inequalities over random set pairs (dims 2–16, sizes 1–10),
/// negative type of squared Euclidean distance, and positivity of
/// distance-induced Gram matrices.
pub fn divergence_checks(fuzz: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ec_ged = CheckResult::new("ec_ge_half_ged", INEQUALITY_TOL);
    let mut ec_mmd = CheckResult::new("ec_ge_mmd", INEQUALITY_TOL);
    let mut mmd_ged = CheckResult::new("mmd_eq_half_ged", INEQUALITY_TOL);
    for _ in 0..fuzz {
        let d = rng.random_range(2..=16);
        let (nx, ny) = (rng.random_range(1..=10), rng.random_range(1..=10));
        let s = random_scale(&mut rng);
        let x = gaussian(&mut rng, nx, d, s);
        let shift = rng.random_range(0.0..3.0) * s;
        let y = gaussian(&mut rng, ny, d, s) + shift;
        let l2 = check_ec_ged(x.view(), y.view())?;
        ec_ged.observe(l2.half_ged - l2.ec, || format!("d={d} nx={nx} ny={ny}: ec {} < half ged {}", l2.ec, l2.half_ged));
        let l3 = check_ec_mmd(x.view(), y.view())?;
        ec_mmd.observe(l3.mmd - l3.ec, || format!("d={d} nx={nx} ny={ny}: ec {} < mmd {}", l3.ec, l3.mmd));
        mmd_ged.observe(l3.equality_gap, || format!("d={d} nx={nx} ny={ny}: |mmd - half ged| = {}", l3.equality_gap));
    }

    let mut witness = CheckResult::new("negative_type_witness", INEQUALITY_TOL);
    let mut identity = CheckResult::new("witness_identity", INEQUALITY_TOL);
    let mut gram = CheckResult::new("distance_induced_gram_psd", INEQUALITY_TOL);
    let metrics = [Semimetric::SquaredEuclidean, Semimetric::Euclidean, Semimetric::Power(0.5)];
    for t in 0..fuzz {
        let d = rng.random_range(2..=16);
        let n = rng.random_range(2..=10);
        let s = random_scale(&mut rng);
        let z = gaussian(&mut rng, n, d, s);
        let raw: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let mean = raw.iter().sum::<f64>() / n as f64;
        let alphas: Vec<f64> = raw.iter().map(|a| a - mean).collect();
        let w = negative_type_witness(z.view(), &alphas, &Semimetric::SquaredEuclidean)?;
        witness.observe(w, || format!("n={n} d={d}: witness {w}"));
        let closed = squared_euclidean_witness_identity(z.view(), &alphas);
        identity.observe((w - closed).abs(), || format!("n={n} d={d}: witness {w} vs -2|sum a z|^2 = {closed}"));

        let rho = metrics[t % metrics.len()];
        let z0 = Array1::from_shape_simple_fn(d, || s * rng.sample::<f64, _>(StandardNormal));
        let k = distance_induced_kernel_gram(z.view(), &rho, z0.view())?;
        let lo = min_eigenvalue(&k)?;
        gram.observe(-lo, || format!("n={n} d={d} {rho:?}: min eigenvalue {lo}"));
    }
    Ok(vec![ec_ged, ec_mmd, mmd_ged, witness, identity, gram])
}

/// A batch of `classes` groups of two rows over random raw embeddings.
fn random_batch(rng: &mut ChaCha8Rng, classes: usize, dim: usize) -> Result<Batch> {
    let k = 2;
    let n = classes * k;
    let labels: Vec<Label> = (0..n).map(|r| (r / k) as Label).collect();
    let groups = (0..classes)
        .map(|c| ClassGroup::new(c as Label, (c * k..(c + 1) * k).collect()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch {
        features: gaussian(rng, n, dim, 1.0),
        labels,
        groups,
        source_rows: (0..n).collect(),
    })
}

fn as_matrix(flat: &[f64], shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_vec(shape, flat.to_vec()).expect("flat length matches shape")
}

/// Gradient of `f(x / ‖x‖)` given `g = ∂f/∂y` (row-wise).
fn through_normalization(x: &Array2<f64>, g: &Array2<f64>) -> Array2<f64> {
    let (y, norms) = normalize_rows(x);
    let mut out = Array2::zeros(x.dim());
    for r in 0..x.nrows() {
        let yr = y.row(r);
        let gr = g.row(r);
        let proj = yr.dot(&gr);
        let mut o = out.row_mut(r);
        o.assign(&(&gr - &(&yr * proj)));
        o /= norms[r];
    }
    out
}

fn ec_config(log_form: bool, lambda: f64) -> EcConfig {
    EcConfig {
        lambda,
        pair_mode: PairMode::AllUnordered,
        log_form,
        stop_gradient_before_last_layer: false,
    }
}

fn triplet_with_clearance(rng: &mut ChaCha8Rng, margin: f64) -> Result<(Batch, Vec<Triplet>)> {
    loop {
        let classes = rng.random_range(3..=5);
        let dim = rng.random_range(3..=8);
        let batch = random_batch(rng, classes, dim)?;
        let triplets = build_triplets(&batch, rng);
        let (y, _) = normalize_rows(&batch.features);
        let clear = triplets.iter().all(|t| {
            let d = |a: usize, b: usize| (&y.row(a) - &y.row(b)).mapv(|v| v * v).sum();
            let h = d(t.anchor, t.positive) - d(t.anchor, t.negative) + margin;
            h.abs() > KINK_CLEARANCE
        });
        if clear {
            return Ok((batch, triplets));
        }
    }
}

type Objective<'a> = Box<dyn FnMut(&Array2<f64>) -> LossOutput + 'a>;

fn check_embedding_objective(result: &mut CheckResult, x: &Array2<f64>, mut f: Objective<'_>, label: String) {
    let shape = x.dim();
    let flat: Vec<f64> = x.iter().copied().collect();
    let report = finite_diff_check(
        |p| {
            let out = f(&as_matrix(p, shape));
            (out.value, out.grad.iter().copied().collect())
        },
        &flat,
        FD_EPS,
    );
    record_grad(result, &report, label);
}

fn record_grad(result: &mut CheckResult, report: &GradCheckReport, label: String) {
    result.observe(report.max_rel_error, || {
        format!(
            "{label}: coordinate {} analytic {} numeric {} (rel {})",
            report.worst_index, report.analytic, report.numeric, report.max_rel_error
        )
    });
}

/// Finite-difference checks of every loss, both confusion forms, the three
/// regularized objectives and the network backward pass.
pub fn gradient_checks(instances: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    let names = [
        "grad_triplet",
        "grad_npair",
        "grad_binomial",
        "grad_ec",
        "grad_log_ec",
        "grad_ecaml_triplet",
        "grad_ecaml_npair",
        "grad_ecaml_binomial",
        "grad_mlp",
    ];
    let mut results: Vec<CheckResult> = names.iter().map(|n| CheckResult::new(n, GRAD_TOL)).collect();
    let tcfg = TripletConfig::default();
    let bcfg = BinomialConfig::default();

    for i in 0..instances {
        let lambda = rng.random_range(0.1..2.0);
        let ec_seed: u64 = rng.random();

        let (batch, triplets) = triplet_with_clearance(&mut rng, tcfg.margin)?;
        let x = batch.features.clone();
        let base_triplet = |x: &Array2<f64>| {
            let (y, _) = normalize_rows(x);
            let out = triplet_loss(y.view(), &triplets, &tcfg).expect("unit rows");
            (y, out)
        };
        check_embedding_objective(
            &mut results[0],
            &x,
            Box::new(|x| {
                let (_, out) = base_triplet(x);
                LossOutput { grad: through_normalization(x, &out.grad), ..out }
            }),
            format!("instance {i}"),
        );
        let groups = batch.groups.clone();
        check_embedding_objective(
            &mut results[5],
            &x,
            Box::new(|x| {
                let (y, base) = base_triplet(x);
                let mut r = ChaCha8Rng::seed_from_u64(ec_seed);
                let out = ecaml_objective(&base, y.view(), &groups, &ec_config(true, lambda), &mut r).expect("ecaml");
                LossOutput { grad: through_normalization(x, &out.grad), ..out }
            }),
            format!("instance {i}, lambda {lambda}"),
        );

        let classes = rng.random_range(3..=6);
        let dim = rng.random_range(3..=8);
        let batch = random_batch(&mut rng, classes, dim)?;
        let x = batch.features.clone();
        let tuples = build_npair_tuples(&batch)?;
        let pairs = build_contrastive_pairs(&batch);
        let groups = batch.groups.clone();
        let all_pairs = select_class_pairs(&groups, PairMode::AllUnordered, &mut rng);

        let npair = |x: &Array2<f64>| npair_loss(x.view(), &tuples).expect("npair");
        let binomial = |x: &Array2<f64>| binomial_loss(x.view(), &pairs, &bcfg).expect("binomial");
        check_embedding_objective(&mut results[1], &x, Box::new(npair), format!("instance {i}"));
        check_embedding_objective(&mut results[2], &x, Box::new(binomial), format!("instance {i}"));
        for (slot, log_form) in [(3, false), (4, true)] {
            check_embedding_objective(
                &mut results[slot],
                &x,
                Box::new(|x| confusion_penalty(x.view(), &groups, &all_pairs, &ec_config(log_form, 1.0)).expect("ec")),
                format!("instance {i}"),
            );
        }
        let ecaml = |base: LossOutput, x: &Array2<f64>| {
            let mut r = ChaCha8Rng::seed_from_u64(ec_seed);
            ecaml_objective(&base, x.view(), &groups, &ec_config(true, lambda), &mut r).expect("ecaml")
        };
        check_embedding_objective(&mut results[6], &x, Box::new(|x| ecaml(npair(x), x)), format!("instance {i}"));
        check_embedding_objective(&mut results[7], &x, Box::new(|x| ecaml(binomial(x), x)), format!("instance {i}"));

        check_mlp(&mut results[8], &mut rng, i)?;
    }
    Ok(results)
}

/// Random three-layer network against a random linear functional of its output.
fn check_mlp(result: &mut CheckResult, rng: &mut ChaCha8Rng, i: usize) -> Result<()> {
    let cfg = MlpConfig {
        input_dim: rng.random_range(3..=6),
        hidden_dims: vec![rng.random_range(3..=6), rng.random_range(3..=6)],
        embedding_dim: rng.random_range(2..=5),
        normalize_output: rng.random_bool(0.5),
        seed: rng.random(),
    };
    let mut params = init_params(&cfg)?;
    let start: Vec<f64> = (0..params.num_parameters()).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
    params.set_flat(&start)?;
    let rows = rng.random_range(2..=5);
    let inputs = gaussian(rng, rows, cfg.input_dim, 1.0);
    let weights = gaussian(rng, rows, cfg.embedding_dim, 1.0);
    let report = finite_diff_check(
        |p| {
            let mut net = params.clone();
            net.set_flat(p).expect("length");
            let (out, trace) = net.forward(inputs.view()).expect("forward");
            let value = (&out * &weights).sum();
            let (grads, _) = net.backward(&trace, weights.view()).expect("backward");
            (value, grads.to_flat())
        },
        &start,
        FD_EPS,
    );
    record_grad(result, &report, format!("instance {i}, normalize {}", cfg.normalize_output));
    Ok(())
}

/// Embedding-space objective helper used by tests: value and gradient of a
/// loss at `x`.
pub fn embedding_gradient_error<F>(x: ArrayView2<f64>, mut f: F) -> GradCheckReport
where
    F: FnMut(ArrayView2<f64>) -> LossOutput,
{
    let shape = x.dim();
    let flat: Vec<f64> = x.iter().copied().collect();
    finite_diff_check(
        |p| {
            let m = as_matrix(p, shape);
            let out = f(m.view());
            (out.value, out.grad.iter().copied().collect())
        },
        &flat,
        FD_EPS,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let report = run_suite(&VerifyConfig { fuzz: 50, grad_instances: 3, seed: 7 }).unwrap();
        for c in &report.checks {
            assert!(c.passed(), "{c:?}");
        }
        assert!(report.passed);
        assert_eq!(report.checks.len(), 15);
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = random_batch(&mut rng, 4, 5).unwrap();
        let pairs = build_contrastive_pairs(&batch);
        let report = embedding_gradient_error(batch.features.view(), |x| {
            let mut out = binomial_loss(x, &pairs, &BinomialConfig::default()).unwrap();
            out.grad *= 1.01;
            out
        });
        assert!(report.max_rel_error > GRAD_TOL);
    }

    #[test]
    fn violation_is_counted() {
        let mut c = CheckResult::new("x", 1e-9);
        c.observe(0.0, String::new);
        c.observe(1.0, || "bad".into());
        c.observe(f64::NAN, || "nan".into());
        assert_eq!(c.violations, 2);
        assert_eq!(c.first_violation.as_deref(), Some("bad"));
        assert!(!c.passed());
    }
}
