//! Linear probes on the shortcut coordinates of the generated benchmark.

use ecaml::sampling::{Dataset, SplitFilter};
use ecaml::synth::{generate, SynthConfig};
use ndarray::{s, Array1, Array2, Axis};

/// Multinomial logistic regression by full-batch gradient descent.
fn fit_softmax(x: &Array2<f64>, y: &[usize], classes: usize) -> Array2<f64> {
    let xb = with_bias(x);
    let mut w = Array2::<f64>::zeros((xb.ncols(), classes));
    for _ in 0..800 {
        let mut p = xb.dot(&w);
        for mut row in p.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|v| (v - m).exp());
            let z = row.sum();
            row /= z;
        }
        for (i, &c) in y.iter().enumerate() {
            p[[i, c]] -= 1.0;
        }
        w -= &(xb.t().dot(&p) * (0.5 / y.len() as f64));
    }
    w
}

fn with_bias(x: &Array2<f64>) -> Array2<f64> {
    let mut xb = Array2::ones((x.nrows(), x.ncols() + 1));
    xb.slice_mut(s![.., ..x.ncols()]).assign(x);
    xb
}

fn accuracy(w: &Array2<f64>, x: &Array2<f64>, y: &[usize]) -> f64 {
    let scores = with_bias(x).dot(w);
    let hits = scores
        .axis_iter(Axis(0))
        .zip(y)
        .filter(|(row, &c)| {
            let best = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            best == c
        })
        .count();
    hits as f64 / y.len() as f64
}

/// Shortcut columns, split into even (train) and odd (test) rows per class.
fn probe(data: &Dataset, cfg: &SynthConfig, filter: SplitFilter) -> (f64, usize) {
    let classes = data.classes(filter);
    let (mut train, mut test) = ((Vec::new(), Vec::new()), (Vec::new(), Vec::new()));
    for (k, rows) in data.rows_by_class(filter).values().enumerate() {
        for (n, &r) in rows.iter().enumerate() {
            let v: Vec<f64> = data.row(r).slice(s![cfg.d_general..]).to_vec();
            let side = if n % 2 == 0 { &mut train } else { &mut test };
            side.0.push(v);
            side.1.push(k);
        }
    }
    let stack = |rows: &[Vec<f64>]| {
        Array2::from_shape_vec((rows.len(), cfg.d_shortcut), rows.concat()).unwrap()
    };
    let w = fit_softmax(&stack(&train.0), &train.1, classes.len());
    (accuracy(&w, &stack(&test.0), &test.1), classes.len())
}

#[test]
fn shortcut_separates_seen_classes_only() {
    for seed in 0..3 {
        let cfg = SynthConfig { seed, ..SynthConfig::default() };
        let data = generate(&cfg).unwrap();
        let (seen_acc, seen_classes) = probe(&data, &cfg, SplitFilter::Seen);
        let (unseen_acc, unseen_classes) = probe(&data, &cfg, SplitFilter::Unseen);
        assert!(seen_acc >= 0.95, "seed {seed}: seen shortcut probe {seen_acc}");
        let chance = 1.0 / unseen_classes as f64;
        assert!(unseen_acc <= 2.0 * chance, "seed {seed}: unseen shortcut probe {unseen_acc}");
        assert_eq!(seen_classes, cfg.seen_classes);
    }
}

#[test]
fn general_prototypes_are_unit_norm_in_expectation() {
    let cfg = SynthConfig { samples_per_class: 2000, noise_sigma: 0.1, ..SynthConfig::default() };
    let data = generate(&cfg).unwrap();
    for rows in data.rows_by_class(SplitFilter::All).values() {
        let mut mean = Array1::<f64>::zeros(cfg.d_general);
        for &r in rows {
            mean += &data.row(r).slice(s![..cfg.d_general]);
        }
        mean /= rows.len() as f64;
        assert!((mean.dot(&mean).sqrt() - 1.0).abs() < 0.02);
    }
}
