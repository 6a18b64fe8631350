//! Energy Confusion: the expected squared distance between embeddings of two
//! different classes, and its combination with a baseline metric loss.

use ndarray::{Array1, ArrayView2};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EcamlError, Result};
use crate::losses::LossOutput;
use crate::sampling::Label;

/// Row indices of one class inside a batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassGroup {
    pub label: Label,
    pub rows: Vec<usize>,
}

impl ClassGroup {
    pub fn new(label: Label, rows: Vec<usize>) -> Result<Self> {
        if rows.is_empty() {
            return Err(EcamlError::Precondition(format!("class group {label} is empty")));
        }
        let mut sorted = rows.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(EcamlError::Precondition(format!(
                "class group {label} lists a row twice"
            )));
        }
        Ok(ClassGroup { label, rows })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    AllUnordered,
    SampleK(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EcConfig {
    pub lambda: f64,
    pub pair_mode: PairMode,
    pub log_form: bool,
    /// Route the confusion gradient into the output layer only.
    pub stop_gradient_before_last_layer: bool,
}

impl Default for EcConfig {
    fn default() -> Self {
        EcConfig {
            lambda: 0.0,
            pair_mode: PairMode::SampleK(8),
            log_form: true,
            stop_gradient_before_last_layer: true,
        }
    }
}

impl EcConfig {
    pub fn with_lambda(lambda: f64) -> Self {
        EcConfig {
            lambda,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(EcamlError::Config(format!(
                "ec.lambda must be a finite value >= 0, got {}",
                self.lambda
            )));
        }
        if self.pair_mode == PairMode::SampleK(0) {
            return Err(EcamlError::Config("ec.pair_mode sample_k needs k >= 1".into()));
        }
        Ok(())
    }
}

fn check_groups(n: usize, a: &ClassGroup, b: &ClassGroup) -> Result<()> {
    if a.label == b.label {
        return Err(EcamlError::Precondition(format!(
            "energy confusion needs two different classes, both are {}",
            a.label
        )));
    }
    for g in [a, b] {
        if g.rows.is_empty() {
            return Err(EcamlError::Precondition(format!("class group {} is empty", g.label)));
        }
        if let Some(&r) = g.rows.iter().find(|&&r| r >= n) {
            return Err(EcamlError::Precondition(format!(
                "row {r} of class {} out of range for {n} rows",
                g.label
            )));
        }
    }
    Ok(())
}

/// Mean squared Euclidean distance over all cross-class row pairs.
///
/// The groups are processed in label order, so swapping the arguments gives
/// a bit-identical result.
pub fn energy_confusion(
    embeddings: ArrayView2<f64>,
    group_i: &ClassGroup,
    group_j: &ClassGroup,
) -> Result<LossOutput> {
    let (n, d) = embeddings.dim();
    check_groups(n, group_i, group_j)?;
    let (first, second) = if group_i.label < group_j.label {
        (group_i, group_j)
    } else {
        (group_j, group_i)
    };
    let weight = 1.0 / (first.rows.len() * second.rows.len()) as f64;
    let mut out = LossOutput::zeros(n, d);
    let mut total = 0.0;
    for &i in &first.rows {
        let xi = embeddings.row(i);
        for &j in &second.rows {
            let xj = embeddings.row(j);
            for k in 0..d {
                let diff = xi[k] - xj[k];
                total += diff * diff;
                out.grad[[i, k]] += 2.0 * weight * diff;
                out.grad[[j, k]] -= 2.0 * weight * diff;
            }
        }
    }
    out.value = weight * total;
    Ok(out)
}

/// `log(1 + EC)`, with gradient `∇EC / (1 + EC)`.
pub fn log_energy_confusion(
    embeddings: ArrayView2<f64>,
    group_i: &ClassGroup,
    group_j: &ClassGroup,
) -> Result<LossOutput> {
    let mut ec = energy_confusion(embeddings, group_i, group_j)?;
    let scale = 1.0 / (1.0 + ec.value);
    ec.value = ec.value.ln_1p();
    ec.grad *= scale;
    Ok(ec)
}

/// Pick the class pairs the confusion term is evaluated on. Returns indices
/// into `groups`, each pair with the lower index first.
pub fn select_class_pairs<R: Rng + ?Sized>(
    groups: &[ClassGroup],
    mode: PairMode,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    if groups.len() < 2 {
        log::warn!("confusion pair selection needs >= 2 class groups, got {}", groups.len());
        return Vec::new();
    }
    let mut all = Vec::with_capacity(groups.len() * (groups.len() - 1) / 2);
    for a in 0..groups.len() {
        for b in a + 1..groups.len() {
            if groups[a].label != groups[b].label {
                all.push((a, b));
            }
        }
    }
    match mode {
        PairMode::AllUnordered => all,
        PairMode::SampleK(k) => {
            let k = k.min(all.len());
            index::sample(rng, all.len(), k).iter().map(|i| all[i]).collect()
        }
    }
}

/// `λ · mean` of the (log-)confusion over the given group pairs.
pub fn confusion_penalty(
    embeddings: ArrayView2<f64>,
    groups: &[ClassGroup],
    pairs: &[(usize, usize)],
    cfg: &EcConfig,
) -> Result<LossOutput> {
    let (n, d) = embeddings.dim();
    let mut out = LossOutput::zeros(n, d);
    if pairs.is_empty() {
        return Ok(out);
    }
    let scale = cfg.lambda / pairs.len() as f64;
    for &(a, b) in pairs {
        let (ga, gb) = (&groups[a], &groups[b]);
        let term = if cfg.log_form {
            log_energy_confusion(embeddings, ga, gb)?
        } else {
            energy_confusion(embeddings, ga, gb)?
        };
        out.value += term.value;
        out.grad.scaled_add(scale, &term.grad);
    }
    out.value *= scale;
    Ok(out)
}

/// Baseline loss plus the confusion penalty on freshly selected pairs.
/// With `λ = 0` the baseline is returned unchanged.
pub fn ecaml_objective<R: Rng + ?Sized>(
    base: &LossOutput,
    embeddings: ArrayView2<f64>,
    groups: &[ClassGroup],
    cfg: &EcConfig,
    rng: &mut R,
) -> Result<LossOutput> {
    cfg.validate()?;
    if base.grad.dim() != embeddings.dim() {
        return Err(EcamlError::Shape(format!(
            "base gradient {:?} vs embeddings {:?}",
            base.grad.dim(),
            embeddings.dim()
        )));
    }
    if cfg.lambda == 0.0 {
        return Ok(base.clone());
    }
    let pairs = select_class_pairs(groups, cfg.pair_mode, rng);
    let penalty = confusion_penalty(embeddings, groups, &pairs, cfg)?;
    Ok(combine(base, &penalty))
}

pub(crate) fn combine(base: &LossOutput, penalty: &LossOutput) -> LossOutput {
    LossOutput {
        value: base.value + penalty.value,
        grad: &base.grad + &penalty.grad,
        skipped: base.skipped,
    }
}

/// Class means of a set of rows; used by the adversarial-direction checks.
pub fn group_mean(embeddings: ArrayView2<f64>, group: &ClassGroup) -> Array1<f64> {
    let mut m = Array1::zeros(embeddings.ncols());
    for &r in &group.rows {
        m += &embeddings.row(r);
    }
    m / group.rows.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use ndarray::{array, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn g(label: Label, rows: &[usize]) -> ClassGroup {
        ClassGroup::new(label, rows.to_vec()).unwrap()
    }

    #[test]
    fn single_pair() {
        let e = array![[1.0, 0.0], [0.0, 1.0]];
        let out = energy_confusion(e.view(), &g(0, &[0]), &g(1, &[1])).unwrap();
        assert_eq!(out.value, 2.0);
        let lg = log_energy_confusion(e.view(), &g(0, &[0]), &g(1, &[1])).unwrap();
        assert!((lg.value - 3f64.ln()).abs() < 1e-15);
        assert!((lg.value - 1.098612).abs() < 1e-6);
    }

    #[test]
    fn coincident_points() {
        let e = array![[0.3, -0.7], [0.3, -0.7]];
        let out = energy_confusion(e.view(), &g(0, &[0]), &g(1, &[1])).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.grad.iter().all(|&v| v == 0.0));
        let lg = log_energy_confusion(e.view(), &g(0, &[0]), &g(1, &[1])).unwrap();
        assert_eq!(lg.value, 0.0);
    }

    #[test]
    fn two_versus_one() {
        let e = array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]];
        let out = energy_confusion(e.view(), &g(0, &[0, 1]), &g(1, &[2])).unwrap();
        assert!((out.value - 3.0).abs() < 1e-15);
    }

    #[test]
    fn preconditions() {
        let e = array![[1.0, 0.0], [0.0, 1.0]];
        assert!(matches!(
            energy_confusion(e.view(), &g(0, &[0]), &g(0, &[1])),
            Err(EcamlError::Precondition(_))
        ));
        let empty = ClassGroup { label: 3, rows: vec![] };
        assert!(energy_confusion(e.view(), &g(0, &[0]), &empty).is_err());
        assert!(ClassGroup::new(1, vec![]).is_err());
        assert!(ClassGroup::new(1, vec![2, 2]).is_err());
    }

    #[test]
    fn symmetric_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = Array2::from_shape_simple_fn((7, 3), || rng.sample::<f64, _>(StandardNormal));
        let a = g(4, &[0, 2, 5]);
        let b = g(1, &[1, 3, 4, 6]);
        let ab = energy_confusion(e.view(), &a, &b).unwrap();
        let ba = energy_confusion(e.view(), &b, &a).unwrap();
        assert_eq!(ab.value.to_bits(), ba.value.to_bits());
        assert_eq!(ab.grad, ba.grad);
    }

    #[test]
    fn log_form_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let e = Array2::from_shape_simple_fn((6, 3), || rng.sample::<f64, _>(StandardNormal));
        let a = g(0, &[0, 1, 2]);
        let b = g(1, &[3, 4]);
        let objective = |flat: &[f64]| {
            let x = Array2::from_shape_vec((6, 3), flat.to_vec()).unwrap();
            let out = log_energy_confusion(x.view(), &a, &b).unwrap();
            (out.value, out.grad.into_raw_vec_and_offset().0)
        };
        let r = finite_diff_check(objective, e.as_slice().unwrap(), 1e-5);
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }

    #[test]
    fn pair_selection_counts() {
        let groups: Vec<_> = (0..64).map(|l| g(l, &[l as usize])).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(select_class_pairs(&groups[..3], PairMode::AllUnordered, &mut rng).len(), 3);
        assert_eq!(select_class_pairs(&groups, PairMode::AllUnordered, &mut rng).len(), 2016);
        let a = select_class_pairs(&groups, PairMode::SampleK(8), &mut ChaCha8Rng::seed_from_u64(3));
        let b = select_class_pairs(&groups, PairMode::SampleK(8), &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a.len(), 8);
        assert_eq!(a, b);
        let mut uniq = a.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), 8);
        assert_eq!(select_class_pairs(&groups[..3], PairMode::SampleK(10), &mut rng).len(), 3);
        assert!(select_class_pairs(&groups[..1], PairMode::AllUnordered, &mut rng).is_empty());
    }

    #[test]
    fn lambda_zero_returns_base() {
        let e = array![[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]];
        let base = LossOutput {
            value: 0.25,
            grad: array![[0.1, -0.2], [0.3, 0.0], [-0.0, 1e-300]],
            skipped: 0,
        };
        let groups = vec![g(0, &[0]), g(1, &[1]), g(2, &[2])];
        let cfg = EcConfig::with_lambda(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = ecaml_objective(&base, e.view(), &groups, &cfg, &mut rng).unwrap();
        assert_eq!(out.value.to_bits(), base.value.to_bits());
        for (a, b) in out.grad.iter().zip(base.grad.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn additive_composition() {
        let e = array![[1.0, 0.0], [0.0, 1.0]];
        let base = LossOutput { value: 0.5, grad: Array2::zeros((2, 2)), skipped: 0 };
        let groups = vec![g(0, &[0]), g(1, &[1])];
        let cfg = EcConfig { lambda: 1.0, pair_mode: PairMode::AllUnordered, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = ecaml_objective(&base, e.view(), &groups, &cfg, &mut rng).unwrap();
        assert!((out.value - (0.5 + 3f64.ln())).abs() < 1e-15);
        assert!((out.value - 1.598612).abs() < 1e-6);
    }

    #[test]
    fn config_validation() {
        assert!(EcConfig::with_lambda(-1.0).validate().is_err());
        assert!(EcConfig { pair_mode: PairMode::SampleK(0), ..Default::default() }.validate().is_err());
        let parsed: EcConfig = serde_json::from_str(r#"{"lambda":0.1,"pair_mode":"all_unordered"}"#).unwrap();
        assert_eq!(parsed.pair_mode, PairMode::AllUnordered);
        let parsed: EcConfig = serde_json::from_str(r#"{"pair_mode":{"sample_k":3}}"#).unwrap();
        assert_eq!(parsed.pair_mode, PairMode::SampleK(3));
        assert!(serde_json::from_str::<EcConfig>(r#"{"lamda":0.1}"#).is_err());
    }
}
