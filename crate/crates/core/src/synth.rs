//! Synthetic zero-shot benchmark with a seen-class shortcut, and the CSV
//! interchange format (`label,split,f0,f1,...`).
//!
//! Every class owns a prototype on the unit sphere of the "general"
//! subspace. Seen classes additionally carry a high-gain random code in the
//! "shortcut" subspace that separates them on its own; unseen classes only
//! have noise there. A model that leans on the shortcut fits the seen classes
//! quickly and transfers poorly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{EcamlError, Result};
use crate::sampling::{Dataset, Label, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seen_classes: usize,
    pub unseen_classes: usize,
    pub samples_per_class: usize,
    pub d_general: usize,
    pub d_shortcut: usize,
    pub noise_sigma: f64,
    pub shortcut_gain: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seen_classes: 8,
            unseen_classes: 8,
            samples_per_class: 40,
            d_general: 8,
            d_shortcut: 4,
            noise_sigma: 0.3,
            shortcut_gain: 4.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn input_dim(&self) -> usize {
        self.d_general + self.d_shortcut
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(EcamlError::Config(format!("data: {m}")));
        if self.seen_classes < 2 || self.unseen_classes < 2 {
            return fail("seen_classes and unseen_classes must be >= 2");
        }
        if self.samples_per_class < 4 {
            return fail("samples_per_class must be >= 4");
        }
        if self.d_general < 2 {
            return fail("d_general must be >= 2");
        }
        if self.d_shortcut < 1 {
            return fail("d_shortcut must be >= 1");
        }
        if !(self.noise_sigma > 0.0) || !(self.shortcut_gain > 0.0) {
            return fail("noise_sigma and shortcut_gain must be > 0");
        }
        Ok(())
    }
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f64> {
    loop {
        let v = Array1::from_shape_simple_fn(dim, || rng.sample::<f64, _>(StandardNormal));
        let n = v.dot(&v).sqrt();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Build the benchmark. Classes `0..seen` are seen, the rest unseen; rows
/// are grouped by class.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let classes = cfg.seen_classes + cfg.unseen_classes;
    let prototypes: Vec<Array1<f64>> = (0..classes).map(|_| random_unit(&mut rng, cfg.d_general)).collect();
    let codes: Vec<Array1<f64>> = (0..cfg.seen_classes)
        .map(|_| random_unit(&mut rng, cfg.d_shortcut) * cfg.shortcut_gain)
        .collect();

    let rows = classes * cfg.samples_per_class;
    let dim = cfg.input_dim();
    let mut features = Array2::zeros((rows, dim));
    let mut labels = Vec::with_capacity(rows);
    let mut split = BTreeMap::new();
    for c in 0..classes {
        let seen = c < cfg.seen_classes;
        split.insert(c as Label, if seen { Split::Seen } else { Split::Unseen });
        for s in 0..cfg.samples_per_class {
            let r = c * cfg.samples_per_class + s;
            let mut row = features.row_mut(r);
            for k in 0..cfg.d_general {
                row[k] = prototypes[c][k] + cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal);
            }
            for k in 0..cfg.d_shortcut {
                let base = if seen { codes[c][k] } else { 0.0 };
                row[cfg.d_general + k] = base + cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal);
            }
            labels.push(c as Label);
        }
    }
    Dataset::new(features, labels, split)
}

/// Write `label,split,f0,...` with 17 significant digits per feature.
pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| EcamlError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_csv(dataset, &mut w).map_err(|e| EcamlError::io(path, e))?;
    w.flush().map_err(|e| EcamlError::io(path, e))
}

pub fn write_csv<W: Write>(dataset: &Dataset, w: &mut W) -> std::io::Result<()> {
    write!(w, "label,split")?;
    for k in 0..dataset.input_dim() {
        write!(w, ",f{k}")?;
    }
    writeln!(w)?;
    for (i, &label) in dataset.labels().iter().enumerate() {
        let split = dataset.split_of(label).expect("every label has a split");
        write!(w, "{label},{split}")?;
        for v in dataset.row(i) {
            write!(w, ",{v:.16e}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

fn parse_err(line: u64, message: impl Into<String>) -> EcamlError {
    EcamlError::Parse {
        line,
        message: message.into(),
    }
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| EcamlError::io(path, e))?;
    read_csv(file)
}

pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = rdr.records();

    let header = match records.next() {
        None => return Err(parse_err(1, "empty file: expected header `label,split,f0,...`")),
        Some(r) => r.map_err(|e| parse_err(1, e.to_string()))?,
    };
    if header.len() < 3 || &header[0] != "label" || &header[1] != "split" {
        return Err(parse_err(1, "header must start with `label,split,f0`"));
    }
    for (k, name) in header.iter().skip(2).enumerate() {
        if name != format!("f{k}") {
            return Err(parse_err(1, format!("expected column f{k}, found `{name}`")));
        }
    }
    let dim = header.len() - 2;

    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut split: BTreeMap<Label, (Split, u64)> = BTreeMap::new();
    for rec in records {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != dim + 2 {
            return Err(parse_err(line, format!("expected {} fields, found {}", dim + 2, rec.len())));
        }
        let label: Label = rec[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, format!("invalid label `{}`", &rec[0])))?;
        let s = Split::parse(rec[1].trim())
            .ok_or_else(|| parse_err(line, format!("unknown split `{}` (expected seen or unseen)", &rec[1])))?;
        match split.get(&label) {
            Some(&(prev, first_line)) if prev != s => {
                return Err(parse_err(
                    line,
                    format!("class {label} is {s} here but {prev} on line {first_line}"),
                ));
            }
            Some(_) => {}
            None => {
                split.insert(label, (s, line));
            }
        }
        for (k, field) in rec.iter().skip(2).enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| parse_err(line, format!("invalid number `{field}` in column f{k}")))?;
            values.push(v);
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(parse_err(2, "no data rows"));
    }
    let features = Array2::from_shape_vec((labels.len(), dim), values)
        .map_err(|e| EcamlError::Shape(e.to_string()))?;
    Dataset::new(features, labels, split.into_iter().map(|(l, (s, _))| (l, s)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::SplitFilter;

    fn small() -> SynthConfig {
        SynthConfig {
            seen_classes: 8,
            unseen_classes: 8,
            samples_per_class: 16,
            d_general: 16,
            d_shortcut: 4,
            ..Default::default()
        }
    }

    #[test]
    fn shape() {
        let d = generate(&small()).unwrap();
        assert_eq!(d.len(), 256);
        assert_eq!(d.input_dim(), 20);
        assert_eq!(d.classes(SplitFilter::Seen).len(), 8);
        assert_eq!(d.classes(SplitFilter::Unseen).len(), 8);
    }

    #[test]
    fn deterministic_bytes() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        write_csv(&a, &mut ba).unwrap();
        write_csv(&b, &mut bb).unwrap();
        assert_eq!(ba, bb);
        let header = String::from_utf8(ba[..40].to_vec()).unwrap();
        assert!(header.starts_with("label,split,f0,f1,f2,"));
    }

    #[test]
    fn roundtrip() {
        let d = generate(&small()).unwrap();
        let mut buf = Vec::new();
        write_csv(&d, &mut buf).unwrap();
        let back = read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn rejects_straddling_class() {
        let text = "label,split,f0\n0,seen,1\n0,seen,2\n1,unseen,3\n1,seen,4\n";
        let err = read_csv(text.as_bytes()).unwrap_err();
        assert!(matches!(err, EcamlError::Parse { line: 5, ref message } if message.contains("class 1")), "{err}");
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(matches!(read_csv("".as_bytes()), Err(EcamlError::Parse { line: 1, .. })));
        let ragged = "label,split,f0,f1\n0,seen,1,2\n0,seen,1\n";
        assert!(matches!(read_csv(ragged.as_bytes()), Err(EcamlError::Parse { line: 3, .. })));
        let bad_split = "label,split,f0\n0,train,1\n";
        assert!(matches!(read_csv(bad_split.as_bytes()), Err(EcamlError::Parse { line: 2, .. })));
        let bad_header = "class,split,f0\n";
        assert!(read_csv(bad_header.as_bytes()).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = small();
        c.samples_per_class = 3;
        assert!(generate(&c).is_err());
        let c: std::result::Result<SynthConfig, _> = serde_json::from_str(r#"{"seen":3}"#);
        assert!(c.is_err());
    }
}
