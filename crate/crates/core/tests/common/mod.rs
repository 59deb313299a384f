#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use capsule_classify::data_io::save_image;
use capsule_classify::{ClassCatalog, ImageBuffer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const BLOB_CLASSES: [&str; 3] = ["red", "green", "blue"];

pub fn blob_catalog() -> ClassCatalog {
    ClassCatalog::new(BLOB_CLASSES).unwrap()
}

/// Noisy image whose channel means identify its class.
pub fn blob_image(class: usize, size: usize, rng: &mut ChaCha8Rng) -> ImageBuffer {
    let mut base = [0.3; 3];
    base[class] = 0.7;
    let shift = rng.random_range(-0.1..0.1);
    let mut rgb = Vec::with_capacity(size * size * 3);
    for _ in 0..size * size {
        for b in base {
            let v: f64 = b + shift + rng.random_range(-0.15..0.15);
            rgb.push(v.clamp(0.0, 1.0));
        }
    }
    ImageBuffer::from_interleaved(size, size, &rgb).unwrap()
}

/// Writes PNGs under `dir/<name>/` and a manifest `dir/<name>.csv`.
pub fn write_blob_split(dir: &Path, name: &str, per_class: &[usize], size: usize, seed: u64) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fs::create_dir_all(dir.join(name)).unwrap();
    let mut manifest = String::from("image_path,label\n");
    let mut labels: Vec<usize> = per_class
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
        .collect();
    // interleave classes deterministically
    for i in (1..labels.len()).rev() {
        let j = rng.random_range(0..=i);
        labels.swap(i, j);
    }
    for (i, &c) in labels.iter().enumerate() {
        let rel = format!("{name}/img_{i:04}.png");
        save_image(&dir.join(&rel), &blob_image(c, size, &mut rng)).unwrap();
        manifest.push_str(&format!("{rel},{}\n", BLOB_CLASSES[c]));
    }
    let path = dir.join(format!("{name}.csv"));
    fs::write(&path, manifest).unwrap();
    path
}

/// Pair-counting AUC: P(pos > neg) + P(pos == neg) / 2.
pub fn brute_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut wins = 0.0;
    let mut pairs = 0u64;
    for (i, &si) in scores.iter().enumerate() {
        if !positive[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if positive[j] {
                continue;
            }
            pairs += 1;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NaiveClass {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub specificity: f64,
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NaiveReport {
    pub per_class: Vec<NaiveClass>,
    pub balanced_accuracy: f64,
    pub mean_auc: f64,
    pub combined: f64,
    pub macro_precision: f64,
    pub macro_f1: f64,
    pub macro_specificity: f64,
}

fn div(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

/// Straight-line reimplementation of the metrics report from raw rows.
pub fn naive_report(probs: &[Vec<f64>], truth: &[usize], k: usize) -> NaiveReport {
    let pred: Vec<usize> = probs
        .iter()
        .map(|row| {
            let mut best = 0;
            for c in 1..k {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect();
    let mut per_class = Vec::new();
    let mut recalls = Vec::new();
    let mut active = Vec::new();
    for c in 0..k {
        let (mut tp, mut fp, mut fn_, mut tn) = (0.0, 0.0, 0.0, 0.0);
        for (&p, &t) in pred.iter().zip(truth) {
            match (p == c, t == c) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                (false, false) => tn += 1.0,
            }
        }
        let precision = div(tp, tp + fp);
        let recall = div(tp, tp + fn_);
        let f1 = div(2.0 * precision * recall, precision + recall);
        if tp + fn_ > 0.0 {
            recalls.push(recall);
        }
        if tp + fn_ + fp > 0.0 {
            active.push(c);
        }
        let scores: Vec<f64> = probs.iter().map(|r| r[c]).collect();
        let positive: Vec<bool> = truth.iter().map(|&t| t == c).collect();
        per_class.push(NaiveClass {
            precision,
            recall,
            f1,
            specificity: div(tn, tn + fp),
            auc: brute_auc(&scores, &positive),
        });
    }
    let balanced_accuracy = recalls.iter().sum::<f64>() / recalls.len() as f64;
    let aucs: Vec<f64> = per_class.iter().filter_map(|c| c.auc).collect();
    let mean_auc = aucs.iter().sum::<f64>() / aucs.len() as f64;
    let macro_of =
        |f: fn(&NaiveClass) -> f64| active.iter().map(|&c| f(&per_class[c])).sum::<f64>() / active.len() as f64;
    NaiveReport {
        balanced_accuracy,
        mean_auc,
        combined: (balanced_accuracy + mean_auc) / 2.0,
        macro_precision: macro_of(|c| c.precision),
        macro_f1: macro_of(|c| c.f1),
        macro_specificity: macro_of(|c| c.specificity),
        per_class,
    }
}

/// Textbook Adam followed by an explicit decoupled decay term.
pub struct ReferenceAdam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl ReferenceAdam {
    pub fn new(n: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, theta: &mut [f64], g: &[f64]) {
        self.t += 1;
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let m_hat = self.m[i] / (1.0 - self.beta1.powi(self.t));
            let v_hat = self.v[i] / (1.0 - self.beta2.powi(self.t));
            let decay = self.lr * self.weight_decay * theta[i];
            theta[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps) + decay;
        }
    }
}

pub fn random_prob_rows(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| v / s).collect()
        })
        .collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}
