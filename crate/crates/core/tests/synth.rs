//! Calibration of the synthetic interaction task against two independent
//! reference classifiers: a linear probe on clip-averaged features (should
//! fail) and a hand-coded trajectory oracle (should succeed).

use groupformer::config::{DataConfig, RunConfig};
use groupformer::synth::{generate_clip, Dataset, GeneratorConfig, Split, SyntheticSample, TaskFamily};

fn default_generator() -> GeneratorConfig {
    RunConfig::new(7, DataConfig::with_clips(2000)).generator()
}

/// Feature row `(t, i)` of a clip.
fn row(s: &SyntheticSample, t: usize, i: usize) -> &[f64] {
    let (n, d) = (s.individuals.shape()[1], s.individuals.shape()[2]);
    &s.individuals.data()[(t * n + i) * d..(t * n + i + 1) * d]
}

/// Nearest archetype code to an agent's time-averaged code features.
fn decode_archetype(s: &SyntheticSample, i: usize, codes: &[Vec<f64>]) -> usize {
    let frames = s.individuals.shape()[0];
    let width = codes[0].len();
    let mut mean = vec![0.0; width];
    for t in 0..frames {
        for (m, x) in mean.iter_mut().zip(&row(s, t, i)[4..]) {
            *m += x / frames as f64;
        }
    }
    let dist = |c: &Vec<f64>| c.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    (0..codes.len())
        .min_by(|&a, &b| dist(&codes[a]).total_cmp(&dist(&codes[b])))
        .unwrap()
}

/// Closing speed of agents `i` and `j` at frame `t` from the noisy
/// position and velocity features.
fn closing_rate(s: &SyntheticSample, t: usize, i: usize, j: usize) -> f64 {
    let (a, b) = (row(s, t, i), row(s, t, j));
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let norm = (dx * dx + dy * dy).sqrt().max(1e-9);
    let (rvx, rvy) = (b[2] - a[2], b[3] - a[3]);
    -(dx * rvx + dy * rvy) / norm
}

/// Pick the same-archetype pair and half with the largest mean closing rate.
fn trajectory_oracle(s: &SyntheticSample, cfg: &GeneratorConfig, codes: &[Vec<f64>]) -> usize {
    let (frames, n) = (cfg.frames, cfg.individuals);
    let split = cfg.half_split();
    let types: Vec<usize> = (0..n).map(|i| decode_archetype(s, i, codes)).collect();
    let mut best = (f64::NEG_INFINITY, 0);
    for i in 0..n {
        for j in i + 1..n {
            if types[i] != types[j] || types[i] >= cfg.patterns() {
                continue;
            }
            for (h, range) in [(0, 0..split), (1, split..frames)] {
                let len = range.len() as f64;
                let score = range.map(|t| closing_rate(s, t, i, j)).sum::<f64>() / len;
                if score > best.0 {
                    best = (score, 2 * types[i] + h);
                }
            }
        }
    }
    best.1
}

fn codes(cfg: &GeneratorConfig) -> Vec<Vec<f64>> {
    let c = cfg.archetype_codes();
    c.data().chunks(c.shape()[1]).map(|r| r.to_vec()).collect()
}

/// Multinomial logistic regression by full-batch gradient descent on
/// standardized inputs; returns held-out accuracy.
fn probe_accuracy(train: &[(Vec<f64>, usize)], test: &[(Vec<f64>, usize)], classes: usize) -> f64 {
    let d = train[0].0.len();
    let mean: Vec<f64> = (0..d).map(|k| train.iter().map(|(x, _)| x[k]).sum::<f64>() / train.len() as f64).collect();
    let std: Vec<f64> = (0..d)
        .map(|k| {
            let v = train.iter().map(|(x, _)| (x[k] - mean[k]).powi(2)).sum::<f64>() / train.len() as f64;
            v.sqrt().max(1e-9)
        })
        .collect();
    let z = |x: &[f64]| -> Vec<f64> { (0..d).map(|k| (x[k] - mean[k]) / std[k]).chain([1.0]).collect() };
    let mut w = vec![vec![0.0; d + 1]; classes];
    let xs: Vec<(Vec<f64>, usize)> = train.iter().map(|(x, y)| (z(x), *y)).collect();
    for _ in 0..500 {
        let mut grad = vec![vec![0.0; d + 1]; classes];
        for (x, y) in &xs {
            let logits: Vec<f64> = w.iter().map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum()).collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let sum: f64 = e.iter().sum();
            for c in 0..classes {
                let p = e[c] / sum - if c == *y { 1.0 } else { 0.0 };
                for k in 0..=d {
                    grad[c][k] += p * x[k] / xs.len() as f64;
                }
            }
        }
        for c in 0..classes {
            for k in 0..=d {
                w[c][k] -= 0.5 * grad[c][k];
            }
        }
    }
    let hits = test
        .iter()
        .filter(|(x, y)| {
            let x = z(x);
            let scores: Vec<f64> = w.iter().map(|r| r.iter().zip(&x).map(|(a, b)| a * b).sum()).collect();
            let best = (0..classes).max_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a))).unwrap();
            best == *y
        })
        .count();
    hits as f64 / test.len() as f64
}

/// Features averaged over agents and frames.
fn pooled(s: &SyntheticSample) -> Vec<f64> {
    let shape = s.individuals.shape();
    let (rows, d) = (shape[0] * shape[1], shape[2]);
    (0..d)
        .map(|k| s.individuals.data().iter().skip(k).step_by(d).sum::<f64>() / rows as f64)
        .collect()
}

#[test]
fn pooled_probe_fails_and_trajectory_oracle_succeeds() {
    let cfg = default_generator();
    let data = Dataset::generate(&cfg, 2000).unwrap();
    let to_xy = |split| data.split(split).iter().map(|s| (pooled(s), s.group_label)).collect::<Vec<_>>();
    let probe = probe_accuracy(&to_xy(Split::Train), &to_xy(Split::Val), cfg.group_classes);
    let codes = codes(&cfg);
    let hits = data
        .samples
        .iter()
        .filter(|s| trajectory_oracle(s, &cfg, &codes) == s.group_label)
        .count();
    let oracle = hits as f64 / data.len() as f64;
    println!("probe {probe:.4} oracle {oracle:.4}");
    assert!(probe <= 0.60, "pooled probe reached {probe}");
    assert!(oracle >= 0.99, "trajectory oracle reached only {oracle}");
}

#[test]
fn noiseless_labels_are_recovered_exactly() {
    let cfg = GeneratorConfig {
        noise_sigma: 0.0,
        ..default_generator()
    };
    let codes = codes(&cfg);
    for i in 0..300 {
        let s = generate_clip(&cfg, i);
        assert_eq!(trajectory_oracle(&s, &cfg, &codes), s.group_label, "clip {i}");
    }
}

#[test]
fn frame_shuffling_breaks_the_oracle() {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let cfg = default_generator();
    let codes = codes(&cfg);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let (mut intact, mut shuffled) = (0, 0);
    let clips = 400;
    for i in 0..clips {
        let mut s = generate_clip(&cfg, i);
        intact += usize::from(trajectory_oracle(&s, &cfg, &codes) == s.group_label);
        let mut order: Vec<usize> = (0..cfg.frames).collect();
        order.shuffle(&mut rng);
        let width = cfg.individuals * cfg.input_dim;
        let src = s.individuals.data().to_vec();
        for (t, &from) in order.iter().enumerate() {
            s.individuals.data_mut()[t * width..(t + 1) * width].copy_from_slice(&src[from * width..(from + 1) * width]);
        }
        shuffled += usize::from(trajectory_oracle(&s, &cfg, &codes) == s.group_label);
    }
    let (intact, shuffled) = (intact as f64 / clips as f64, shuffled as f64 / clips as f64);
    assert!(shuffled < intact - 0.2, "intact {intact} shuffled {shuffled}");
}

#[test]
fn group_labels_are_near_uniform() {
    let cfg = default_generator();
    let data = Dataset::generate(&cfg, 2000).unwrap();
    let mut counts = vec![0usize; cfg.group_classes];
    for s in &data.samples {
        counts[s.group_label] += 1;
    }
    let expected = data.len() as f64 / cfg.group_classes as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 7 degrees of freedom; 24.32 is the 0.999 quantile.
    assert!(chi2 < 24.32, "chi-square {chi2} for counts {counts:?}");
}

#[test]
fn majority_labels_follow_the_modal_archetype() {
    let cfg = GeneratorConfig {
        family: TaskFamily::Majority,
        ..default_generator()
    };
    for i in 0..200 {
        let s = generate_clip(&cfg, i);
        let mut counts = vec![0; cfg.action_classes];
        s.action_labels.iter().for_each(|&a| counts[a] += 1);
        assert!(counts[s.group_label] > cfg.individuals / 2);
    }
}
