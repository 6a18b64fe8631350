//! Baseline metric-learning objectives with analytic gradients.
//!
//! Each objective is available twice: as a free function over explicit tuples
//! (`triplet_loss`, `npair_loss`, `binomial_loss`) and as a [`MetricLoss`]
//! strategy that builds its own tuples from a [`Batch`]. Strategies are
//! created by name through a [`LossRegistry`].

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::RngCore;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{EcamlError, Result};
use crate::sampling::{
    build_contrastive_pairs, build_npair_tuples, build_triplets, Batch, LabeledPair, NPairTuple,
    Triplet,
};

/// Allowed deviation of a row norm from 1 for unit-norm inputs.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// Objective value and its gradient with respect to the embedding rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Array2<f64>,
    /// Tuples dropped because they were malformed (e.g. no negatives).
    pub skipped: usize,
}

impl LossOutput {
    pub fn zeros(rows: usize, dim: usize) -> Self {
        LossOutput {
            value: 0.0,
            grad: Array2::zeros((rows, dim)),
            skipped: 0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite() && self.grad.iter().all(|g| g.is_finite())
    }
}

/// `log(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// `1 / (1 + e^{-z})` without overflow.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_index(idx: usize, n: usize) -> Result<()> {
    if idx >= n {
        Err(EcamlError::Precondition(format!(
            "row index {idx} out of range for batch of {n}"
        )))
    } else {
        Ok(())
    }
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

// ---------------------------------------------------------------- triplet

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TripletConfig {
    pub margin: f64,
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig { margin: 0.1 }
    }
}

/// Hinge triplet loss on unit-norm embeddings:
/// `Σ max(0, ‖a−p‖² − ‖a−n‖² + m)`.
pub fn triplet_loss(
    embeddings: ArrayView2<f64>,
    triplets: &[Triplet],
    cfg: &TripletConfig,
) -> Result<LossOutput> {
    if !(cfg.margin >= 0.0) {
        return Err(EcamlError::Config(format!("triplet margin must be >= 0, got {}", cfg.margin)));
    }
    let (n, d) = embeddings.dim();
    let mut out = LossOutput::zeros(n, d);
    for t in triplets {
        for idx in [t.anchor, t.positive, t.negative] {
            check_index(idx, n)?;
            let row = embeddings.row(idx);
            let norm = row.dot(&row).sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(EcamlError::Precondition(format!(
                    "triplet loss needs unit-norm rows; row {idx} has norm {norm}"
                )));
            }
        }
    }
    for t in triplets {
        let a = embeddings.row(t.anchor);
        let p = embeddings.row(t.positive);
        let neg = embeddings.row(t.negative);
        let hinge = sq_dist(a, p) - sq_dist(a, neg) + cfg.margin;
        if hinge <= 0.0 {
            continue;
        }
        out.value += hinge;
        for k in 0..d {
            out.grad[[t.anchor, k]] += 2.0 * (neg[k] - p[k]);
            out.grad[[t.positive, k]] += 2.0 * (p[k] - a[k]);
            out.grad[[t.negative, k]] += 2.0 * (a[k] - neg[k]);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------- N-pair

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NPairConfig {}

/// `Σ_i log(1 + Σ_j exp(x_iᵀx_j − x_iᵀx_{i+}))` over raw embeddings.
/// Tuples without negatives are skipped and counted in `skipped`.
pub fn npair_loss(embeddings: ArrayView2<f64>, tuples: &[NPairTuple]) -> Result<LossOutput> {
    let (n, d) = embeddings.dim();
    let mut out = LossOutput::zeros(n, d);
    let mut logits = Vec::new();
    for t in tuples {
        check_index(t.anchor, n)?;
        check_index(t.positive, n)?;
        for &j in &t.negatives {
            check_index(j, n)?;
        }
        if t.negatives.is_empty() {
            out.skipped += 1;
            continue;
        }
        let a = embeddings.row(t.anchor);
        let p = embeddings.row(t.positive);
        let pos_sim = a.dot(&p);
        logits.clear();
        logits.extend(t.negatives.iter().map(|&j| a.dot(&embeddings.row(j)) - pos_sim));

        // log-sum-exp over {0} ∪ logits
        let max = logits.iter().copied().fold(0.0_f64, f64::max);
        let value = if max == 0.0 {
            logits.iter().map(|s| s.exp()).sum::<f64>().ln_1p()
        } else {
            max + ((-max).exp() + logits.iter().map(|s| (s - max).exp()).sum::<f64>()).ln()
        };
        out.value += value;

        let mut weight_sum = 0.0;
        for (&j, &s) in t.negatives.iter().zip(&logits) {
            let w = (s - value).exp();
            weight_sum += w;
            let xj = embeddings.row(j);
            for k in 0..d {
                out.grad[[t.anchor, k]] += w * (xj[k] - p[k]);
                out.grad[[j, k]] += w * a[k];
            }
        }
        for k in 0..d {
            out.grad[[t.positive, k]] -= weight_sum * a[k];
        }
    }
    if out.skipped > 0 {
        log::warn!("N-pair loss skipped {} tuple(s) without negatives", out.skipped);
    }
    Ok(out)
}

// ---------------------------------------------------------------- binomial

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BinomialConfig {
    pub alpha: f64,
    pub beta: f64,
    pub eta_pos: f64,
    pub eta_neg: f64,
}

impl Default for BinomialConfig {
    fn default() -> Self {
        BinomialConfig {
            alpha: 2.0,
            beta: 0.5,
            eta_pos: 1.0,
            eta_neg: 25.0,
        }
    }
}

impl BinomialConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(EcamlError::Config(format!("binomial alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.eta_pos > 0.0 && self.eta_neg > 0.0) {
            return Err(EcamlError::Config("binomial eta_pos and eta_neg must be > 0".into()));
        }
        if !self.beta.is_finite() {
            return Err(EcamlError::Config("binomial beta must be finite".into()));
        }
        Ok(())
    }
}

/// Binomial deviance over cosine similarities:
/// `Σ softplus(−(2s−1)·α·(cos_ij − β)·η_ij)`.
pub fn binomial_loss(
    embeddings: ArrayView2<f64>,
    pairs: &[LabeledPair],
    cfg: &BinomialConfig,
) -> Result<LossOutput> {
    cfg.validate()?;
    let (n, d) = embeddings.dim();
    let norms: Vec<f64> = embeddings.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    for p in pairs {
        for idx in [p.i, p.j] {
            check_index(idx, n)?;
            if norms[idx] == 0.0 {
                return Err(EcamlError::Precondition(format!(
                    "binomial loss: row {idx} has zero norm, cosine undefined"
                )));
            }
        }
    }
    let mut out = LossOutput::zeros(n, d);
    for p in pairs {
        let xi = embeddings.row(p.i);
        let xj = embeddings.row(p.j);
        let (ni, nj) = (norms[p.i], norms[p.j]);
        let cos = xi.dot(&xj) / (ni * nj);
        let (sign, eta) = if p.same {
            (1.0, cfg.eta_pos)
        } else {
            (-1.0, cfg.eta_neg)
        };
        let z = -sign * cfg.alpha * (cos - cfg.beta) * eta;
        out.value += softplus(z);
        let dcos = -sign * cfg.alpha * eta * sigmoid(z);
        // ∂cos/∂x_i = x_j/(‖x_i‖‖x_j‖) − cos·x_i/‖x_i‖²
        let inv = 1.0 / (ni * nj);
        for k in 0..d {
            out.grad[[p.i, k]] += dcos * (xj[k] * inv - cos * xi[k] / (ni * ni));
            out.grad[[p.j, k]] += dcos * (xi[k] * inv - cos * xj[k] / (nj * nj));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------- strategies

/// A baseline metric objective that knows how to build its own tuples.
pub trait MetricLoss: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    /// Whether the loss is only defined on unit-norm embeddings.
    fn requires_unit_norm(&self) -> bool;

    /// Evaluate on one batch; `embeddings` row `r` belongs to batch row `r`.
    fn evaluate(
        &self,
        embeddings: ArrayView2<f64>,
        batch: &Batch,
        rng: &mut dyn RngCore,
    ) -> Result<LossOutput>;
}

#[derive(Debug, Clone, Default)]
pub struct TripletLoss {
    pub config: TripletConfig,
}

impl MetricLoss for TripletLoss {
    fn name(&self) -> &'static str {
        "triplet"
    }

    fn requires_unit_norm(&self) -> bool {
        true
    }

    fn evaluate(
        &self,
        embeddings: ArrayView2<f64>,
        batch: &Batch,
        rng: &mut dyn RngCore,
    ) -> Result<LossOutput> {
        let triplets = build_triplets(batch, rng);
        triplet_loss(embeddings, &triplets, &self.config)
    }
}

#[derive(Debug, Clone, Default)]
pub struct NPairLoss {
    pub config: NPairConfig,
}

impl MetricLoss for NPairLoss {
    fn name(&self) -> &'static str {
        "npair"
    }

    fn requires_unit_norm(&self) -> bool {
        false
    }

    fn evaluate(
        &self,
        embeddings: ArrayView2<f64>,
        batch: &Batch,
        _rng: &mut dyn RngCore,
    ) -> Result<LossOutput> {
        npair_loss(embeddings, &build_npair_tuples(batch)?)
    }
}

#[derive(Debug, Clone, Default)]
pub struct BinomialLoss {
    pub config: BinomialConfig,
}

impl MetricLoss for BinomialLoss {
    fn name(&self) -> &'static str {
        "binomial"
    }

    fn requires_unit_norm(&self) -> bool {
        false
    }

    fn evaluate(
        &self,
        embeddings: ArrayView2<f64>,
        batch: &Batch,
        _rng: &mut dyn RngCore,
    ) -> Result<LossOutput> {
        binomial_loss(embeddings, &build_contrastive_pairs(batch), &self.config)
    }
}

/// Name of a registered loss plus its strategy-specific parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: String,
    #[serde(flatten)]
    pub params: serde_json::Map<String, serde_json::Value>,
}

impl LossSpec {
    pub fn named(kind: &str) -> Self {
        LossSpec {
            kind: kind.to_string(),
            params: serde_json::Map::new(),
        }
    }
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec::named("binomial")
    }
}

pub type LossFactory = fn(&serde_json::Map<String, serde_json::Value>) -> Result<Box<dyn MetricLoss>>;

fn parse_params<T: DeserializeOwned>(
    kind: &str,
    params: &serde_json::Map<String, serde_json::Value>,
) -> Result<T> {
    serde_json::from_value(serde_json::Value::Object(params.clone()))
        .map_err(|e| EcamlError::Config(format!("loss.{kind}: {e}")))
}

fn make_triplet(p: &serde_json::Map<String, serde_json::Value>) -> Result<Box<dyn MetricLoss>> {
    let config: TripletConfig = parse_params("triplet", p)?;
    if !(config.margin >= 0.0) {
        return Err(EcamlError::Config("loss.triplet.margin must be >= 0".into()));
    }
    Ok(Box::new(TripletLoss { config }))
}

fn make_npair(p: &serde_json::Map<String, serde_json::Value>) -> Result<Box<dyn MetricLoss>> {
    let config: NPairConfig = parse_params("npair", p)?;
    Ok(Box::new(NPairLoss { config }))
}

fn make_binomial(p: &serde_json::Map<String, serde_json::Value>) -> Result<Box<dyn MetricLoss>> {
    let config: BinomialConfig = parse_params("binomial", p)?;
    config.validate()?;
    Ok(Box::new(BinomialLoss { config }))
}

/// Name → factory table for metric losses.
#[derive(Clone)]
pub struct LossRegistry {
    factories: BTreeMap<String, LossFactory>,
}

impl fmt::Debug for LossRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.factories.keys()).finish()
    }
}

impl Default for LossRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl LossRegistry {
    pub fn empty() -> Self {
        LossRegistry {
            factories: BTreeMap::new(),
        }
    }

    /// Registry holding `triplet`, `npair` and `binomial`.
    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register("triplet", make_triplet);
        r.register("npair", make_npair);
        r.register("binomial", make_binomial);
        r
    }

    /// Register (or replace) a factory under `name`.
    pub fn register(&mut self, name: &str, factory: LossFactory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn create(&self, spec: &LossSpec) -> Result<Box<dyn MetricLoss>> {
        let factory = self.factories.get(&spec.kind).ok_or_else(|| {
            EcamlError::Config(format!(
                "unknown loss '{}'; registered: {}",
                spec.kind,
                self.names().collect::<Vec<_>>().join(", ")
            ))
        })?;
        factory(&spec.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use crate::net::normalize_rows;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((n, d), || rng.sample(StandardNormal))
    }

    fn unit(rows: &[&[f64]]) -> Array2<f64> {
        let d = rows[0].len();
        Array2::from_shape_vec((rows.len(), d), rows.concat()).unwrap()
    }

    #[test]
    fn triplet_inactive_hinge() {
        let e = unit(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let t = [Triplet { anchor: 0, positive: 1, negative: 2 }];
        let out = triplet_loss(e.view(), &t, &TripletConfig::default()).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn triplet_degenerate() {
        let e = unit(&[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]]);
        let t = [Triplet { anchor: 0, positive: 1, negative: 2 }];
        let out = triplet_loss(e.view(), &t, &TripletConfig::default()).unwrap();
        assert!((out.value - 0.1).abs() < 1e-15);
        assert!(out.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn triplet_hinge_boundary_has_zero_subgradient() {
        // ‖a−p‖² = 0, ‖a−n‖² = 2, margin 2: hinge argument exactly 0.
        let e = unit(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let t = [Triplet { anchor: 0, positive: 1, negative: 2 }];
        let out = triplet_loss(e.view(), &t, &TripletConfig { margin: 2.0 }).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn triplet_rejects_unnormalized_rows() {
        let e = unit(&[&[2.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let t = [Triplet { anchor: 0, positive: 1, negative: 2 }];
        assert!(matches!(
            triplet_loss(e.view(), &t, &TripletConfig::default()),
            Err(EcamlError::Precondition(_))
        ));
        let out = triplet_loss(e.view(), &[], &TripletConfig::default()).unwrap();
        assert_eq!(out.value, 0.0);
    }

    fn brute_triplet(e: &Array2<f64>, ts: &[Triplet], m: f64) -> f64 {
        let mut total = 0.0;
        for t in ts {
            let mut dp = 0.0;
            let mut dn = 0.0;
            for k in 0..e.ncols() {
                dp += (e[[t.anchor, k]] - e[[t.positive, k]]).powi(2);
                dn += (e[[t.anchor, k]] - e[[t.negative, k]]).powi(2);
            }
            total += (dp - dn + m).max(0.0);
        }
        total
    }

    #[test]
    fn triplet_matches_direct_sum_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let raw = random_matrix(&mut rng, 20, 5);
        let (e, _) = normalize_rows(&raw);
        let ts: Vec<Triplet> = (0..30)
            .map(|_| {
                let a = rng.random_range(0..20);
                let mut p = rng.random_range(0..20);
                while p == a {
                    p = rng.random_range(0..20);
                }
                Triplet { anchor: a, positive: p, negative: rng.random_range(0..20) }
            })
            .collect();
        let cfg = TripletConfig { margin: 0.5 };
        let out = triplet_loss(e.view(), &ts, &cfg).unwrap();
        assert!((out.value - brute_triplet(&e, &ts, cfg.margin)).abs() < 1e-12);

        // perturbations leave the sphere, so differentiate through the projection
        let objective = |flat: &[f64]| {
            let x = Array2::from_shape_vec((20, 5), flat.to_vec()).unwrap();
            let (y, norms) = normalize_rows(&x);
            let out = triplet_loss(y.view(), &ts, &cfg).unwrap();
            let mut g = out.grad.clone();
            for ((mut gr, yr), n) in g.rows_mut().into_iter().zip(y.rows()).zip(norms.iter()) {
                let radial = yr.dot(&gr);
                gr.scaled_add(-radial, &yr);
                gr /= *n;
            }
            (out.value, g.into_raw_vec_and_offset().0)
        };
        let r = finite_diff_check(objective, raw.as_slice().unwrap(), 1e-5);
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }

    #[test]
    fn npair_identical_embeddings() {
        let e = Array2::from_elem((4, 3), 0.7);
        let tuples = [
            NPairTuple { anchor: 0, positive: 1, negatives: vec![3] },
            NPairTuple { anchor: 2, positive: 3, negatives: vec![1] },
        ];
        let out = npair_loss(e.view(), &tuples).unwrap();
        assert!((out.value - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!((out.value - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn npair_saturated_regimes() {
        // a·p − a·n = +40
        let e = array![[1.0, 0.0], [40.0, 0.0], [0.0, 1.0]];
        let t = [NPairTuple { anchor: 0, positive: 1, negatives: vec![2] }];
        let out = npair_loss(e.view(), &t).unwrap();
        assert!(out.value <= 1e-15 && out.value >= 0.0);
        assert!(out.is_finite());
        // a·p − a·n = −40
        let e = array![[1.0, 0.0], [0.0, 1.0], [40.0, 0.0]];
        let out = npair_loss(e.view(), &t).unwrap();
        assert!((out.value - 40.0).abs() < 1e-12);
        assert!(out.is_finite());
        let e = array![[1.0, 0.0], [0.0, 1.0], [4000.0, 0.0]];
        assert!(npair_loss(e.view(), &t).unwrap().is_finite());
    }

    #[test]
    fn npair_skips_anchor_without_negatives() {
        let e = Array2::from_elem((3, 2), 0.5);
        let t = [
            NPairTuple { anchor: 0, positive: 1, negatives: vec![] },
            NPairTuple { anchor: 1, positive: 0, negatives: vec![2] },
        ];
        let out = npair_loss(e.view(), &t).unwrap();
        assert_eq!(out.skipped, 1);
        assert!((out.value - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn npair_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let e = random_matrix(&mut rng, 16, 4) * 0.7;
        let tuples: Vec<NPairTuple> = (0..8)
            .map(|c| NPairTuple {
                anchor: 2 * c,
                positive: 2 * c + 1,
                negatives: (0..8).filter(|&o| o != c).map(|o| 2 * o + 1).collect(),
            })
            .collect();
        let objective = |flat: &[f64]| {
            let x = Array2::from_shape_vec((16, 4), flat.to_vec()).unwrap();
            let out = npair_loss(x.view(), &tuples).unwrap();
            (out.value, out.grad.into_raw_vec_and_offset().0)
        };
        let r = finite_diff_check(objective, e.as_slice().unwrap(), 1e-5);
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }

    #[test]
    fn binomial_at_translation_point() {
        // cos = 0.5 = β
        let e = array![[1.0, 0.0], [0.5, 3f64.sqrt() / 2.0]];
        let p = [LabeledPair { i: 0, j: 1, same: true }];
        let out = binomial_loss(e.view(), &p, &BinomialConfig::default()).unwrap();
        assert!((out.value - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn binomial_negative_at_identical_direction() {
        let e = array![[1.0, 1.0], [2.0, 2.0]];
        let p = [LabeledPair { i: 0, j: 1, same: false }];
        let out = binomial_loss(e.view(), &p, &BinomialConfig::default()).unwrap();
        let expected = 25.0 + (-25f64).exp().ln_1p();
        assert!((out.value - expected).abs() < 1e-10);
        assert!((out.value - 25.0).abs() < 1e-10);
    }

    #[test]
    fn binomial_rejects_zero_rows() {
        let e = array![[0.0, 0.0], [1.0, 0.0]];
        let p = [LabeledPair { i: 0, j: 1, same: true }];
        assert!(matches!(
            binomial_loss(e.view(), &p, &BinomialConfig::default()),
            Err(EcamlError::Precondition(_))
        ));
    }

    #[test]
    fn binomial_finite_differences_all_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let e = random_matrix(&mut rng, 12, 4);
        let labels: Vec<u32> = (0..12).map(|i| i / 3).collect();
        let mut pairs = Vec::new();
        for i in 0..12 {
            for j in i + 1..12 {
                pairs.push(LabeledPair { i, j, same: labels[i] == labels[j] });
            }
        }
        assert_eq!(pairs.len(), 66);
        let cfg = BinomialConfig::default();
        let objective = |flat: &[f64]| {
            let x = Array2::from_shape_vec((12, 4), flat.to_vec()).unwrap();
            let out = binomial_loss(x.view(), &pairs, &cfg).unwrap();
            (out.value, out.grad.into_raw_vec_and_offset().0)
        };
        let r = finite_diff_check(objective, e.as_slice().unwrap(), 1e-5);
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }

    #[test]
    fn softplus_is_stable() {
        for &z in &[-700.0, -40.0, -1.0, 0.0, 1e-9, 1.0, 40.0, 700.0] {
            let s: f64 = softplus(z);
            assert!(s.is_finite());
            let exact = if z > 30.0 { z + (-z as f64).exp() } else { (1.0 + z.exp()).ln() };
            assert!((s - exact).abs() <= 1e-12 * z.abs().max(1.0), "z = {z}");
        }
        assert_eq!(softplus(0.0), 2f64.ln());
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) == 1.0);
    }

    #[test]
    fn registry_creates_by_name() {
        let reg = LossRegistry::builtin();
        assert_eq!(reg.names().collect::<Vec<_>>(), ["binomial", "npair", "triplet"]);
        let l = reg.create(&LossSpec::named("triplet")).unwrap();
        assert_eq!(l.name(), "triplet");
        assert!(l.requires_unit_norm());

        let spec: LossSpec = serde_json::from_str(r#"{"kind":"binomial","eta_neg":10}"#).unwrap();
        assert_eq!(reg.create(&spec).unwrap().name(), "binomial");

        let bad: LossSpec = serde_json::from_str(r#"{"kind":"binomial","gamma":1}"#).unwrap();
        assert!(matches!(reg.create(&bad), Err(EcamlError::Config(_))));
        assert!(reg.create(&LossSpec::named("lifted")).is_err());
        let bad: LossSpec = serde_json::from_str(r#"{"kind":"triplet","margin":-1}"#).unwrap();
        assert!(reg.create(&bad).is_err());
    }
}
