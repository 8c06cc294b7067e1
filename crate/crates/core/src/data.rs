//! Synthetic classification corpus with difficulty buckets. Easy labels are
//! recoverable from surface token counts; medium labels need one hop of
//! order information (which marker comes first); hard labels require a
//! pointer chase through a repeated bridge token, invisible to any
//! bag-of-tokens model because every hard sample contains the same marker
//! and key counts. A generation-time linear probe verifies the separation
//! and is stamped into the file header.

use crate::error::{CoreError, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;
/// Tokens 0..4 are class markers; the rest is filler.
pub const N_MARKERS: usize = 4;
/// Reserved token that appears exactly once in hard samples and never in
/// easy or medium ones; it anchors the hard bucket's pointer chase.
pub const KEY_TOKEN: usize = N_MARKERS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub tokens: Vec<usize>,
    pub label: usize,
    pub difficulty: Difficulty,
    pub oracle_depth: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub n: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub seq_len: usize,
    pub easy_fraction: f64,
    pub seed: u64,
    pub probe_easy_accuracy: f64,
    pub probe_medium_accuracy: f64,
    pub probe_hard_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub records: Vec<DatasetRecord>,
}

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub n: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub seq_len: usize,
    pub easy_fraction: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n: 5000,
            vocab_size: 32,
            num_classes: 4,
            seq_len: 16,
            easy_fraction: 0.6,
            seed: 0,
        }
    }
}

impl GenConfig {
    fn validate(&self) -> Result<()> {
        if self.n < 100 {
            return Err(CoreError::Parameter(format!(
                "need at least 100 samples, got {}",
                self.n
            )));
        }
        if !(0.0..=1.0).contains(&self.easy_fraction) {
            return Err(CoreError::Parameter(format!(
                "easy fraction {} outside [0,1]",
                self.easy_fraction
            )));
        }
        if self.num_classes != N_MARKERS {
            return Err(CoreError::Parameter(format!(
                "generator supports exactly {N_MARKERS} classes, got {}",
                self.num_classes
            )));
        }
        if self.vocab_size < 2 * N_MARKERS || self.seq_len < 2 * N_MARKERS {
            return Err(CoreError::Parameter(
                "vocab and sequence length must leave room for markers and filler".into(),
            ));
        }
        Ok(())
    }
}

fn filler(rng: &mut ChaCha8Rng, cfg: &GenConfig) -> usize {
    rng.gen_range(KEY_TOKEN + 1..cfg.vocab_size)
}

/// Easy: marker `label` dominates the token counts (5 copies, others absent).
fn gen_easy(rng: &mut ChaCha8Rng, cfg: &GenConfig, label: usize) -> Vec<usize> {
    let mut tokens: Vec<usize> = (0..cfg.seq_len).map(|_| filler(rng, cfg)).collect();
    let mut positions: Vec<usize> = (0..cfg.seq_len).collect();
    positions.shuffle(rng);
    for &p in positions.iter().take(5) {
        tokens[p] = label;
    }
    tokens
}

/// Medium: every marker appears exactly once; the label is the marker that
/// occurs first. Counts are label-independent by construction.
fn gen_medium(rng: &mut ChaCha8Rng, cfg: &GenConfig, label: usize) -> Vec<usize> {
    loop {
        let mut tokens: Vec<usize> = (0..cfg.seq_len).map(|_| filler(rng, cfg)).collect();
        let mut positions: Vec<usize> = (0..cfg.seq_len).collect();
        positions.shuffle(rng);
        let slots = &positions[..N_MARKERS];
        let first_slot = *slots.iter().min().unwrap();
        let mut markers: Vec<usize> = (0..N_MARKERS).collect();
        markers.shuffle(rng);
        // force the labeled marker into the earliest slot
        let li = markers.iter().position(|&m| m == label).unwrap();
        let fi = slots.iter().position(|&s| s == first_slot).unwrap();
        markers.swap(li, fi);
        for (m, &s) in markers.iter().zip(slots) {
            tokens[s] = *m;
        }
        if tokens[first_slot] == label {
            return tokens;
        }
    }
}

/// Hard: a pointer chase. The unique key token is immediately preceded by a
/// bridge token that occurs exactly twice in the sequence; the label is the
/// marker immediately preceding the bridge's other occurrence. Every marker
/// appears exactly once, so token counts are identical across labels and
/// the class is only recoverable by composing two order-sensitive lookups.
fn gen_hard(rng: &mut ChaCha8Rng, cfg: &GenConfig, label: usize) -> Vec<usize> {
    let bridge = filler(rng, cfg);
    let mut tokens: Vec<usize> = (0..cfg.seq_len)
        .map(|_| loop {
            let t = filler(rng, cfg);
            if t != bridge {
                break t;
            }
        })
        .collect();
    let (p, q) = loop {
        let p = rng.gen_range(1..cfg.seq_len);
        let q = rng.gen_range(1..cfg.seq_len);
        if q + 1 < p || q > p + 1 {
            break (p, q);
        }
    };
    tokens[p] = KEY_TOKEN;
    tokens[p - 1] = bridge;
    tokens[q] = bridge;
    tokens[q - 1] = label;
    let used = [p, p - 1, q, q - 1];
    let mut free: Vec<usize> = (0..cfg.seq_len).filter(|i| !used.contains(i)).collect();
    free.shuffle(rng);
    let mut others: Vec<usize> = (0..N_MARKERS).filter(|&m| m != label).collect();
    others.shuffle(rng);
    for (m, &s) in others.iter().zip(&free) {
        tokens[s] = *m;
    }
    tokens
}

pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_easy = (cfg.n as f64 * cfg.easy_fraction).round() as usize;
    let n_medium = (cfg.n - n_easy) / 2;
    let n_hard = cfg.n - n_easy - n_medium;
    let mut records = Vec::with_capacity(cfg.n);
    for i in 0..n_easy {
        let label = i % cfg.num_classes;
        records.push(DatasetRecord {
            tokens: gen_easy(&mut rng, cfg, label),
            label,
            difficulty: Difficulty::Easy,
            oracle_depth: None,
        });
    }
    for i in 0..n_medium {
        let label = i % cfg.num_classes;
        records.push(DatasetRecord {
            tokens: gen_medium(&mut rng, cfg, label),
            label,
            difficulty: Difficulty::Medium,
            oracle_depth: None,
        });
    }
    for i in 0..n_hard {
        let label = i % cfg.num_classes;
        records.push(DatasetRecord {
            tokens: gen_hard(&mut rng, cfg, label),
            label,
            difficulty: Difficulty::Hard,
            oracle_depth: None,
        });
    }
    records.shuffle(&mut rng);
    let probe_easy = probe_accuracy(&records, cfg, Difficulty::Easy);
    let probe_medium = probe_accuracy(&records, cfg, Difficulty::Medium);
    let probe_hard = probe_accuracy(&records, cfg, Difficulty::Hard);
    Ok(Dataset {
        header: DatasetHeader {
            format_version: FORMAT_VERSION,
            n: cfg.n,
            vocab_size: cfg.vocab_size,
            num_classes: cfg.num_classes,
            seq_len: cfg.seq_len,
            easy_fraction: cfg.easy_fraction,
            seed: cfg.seed,
            probe_easy_accuracy: probe_easy,
            probe_medium_accuracy: probe_medium,
            probe_hard_accuracy: probe_hard,
        },
        records,
    })
}

/// Multinomial logistic regression on bag-of-token counts, trained on the
/// bucket itself. High accuracy means the labels are surface-recoverable.
fn probe_accuracy(records: &[DatasetRecord], cfg: &GenConfig, bucket: Difficulty) -> f64 {
    let subset: Vec<&DatasetRecord> = records.iter().filter(|r| r.difficulty == bucket).collect();
    if subset.is_empty() {
        return 0.0;
    }
    let v = cfg.vocab_size;
    let k = cfg.num_classes;
    let feats: Vec<Vec<f64>> = subset
        .iter()
        .map(|r| {
            let mut counts = vec![0.0; v];
            for &t in &r.tokens {
                counts[t] += 1.0;
            }
            counts
        })
        .collect();
    let mut w = vec![0.0; v * k];
    let mut b = vec![0.0; k];
    let n = subset.len() as f64;
    let lr = 0.5;
    for _ in 0..200 {
        let mut gw = vec![0.0; v * k];
        let mut gb = vec![0.0; k];
        for (x, r) in feats.iter().zip(&subset) {
            let mut logits = b.clone();
            for j in 0..v {
                if x[j] == 0.0 {
                    continue;
                }
                for c in 0..k {
                    logits[c] += x[j] * w[j * k + c];
                }
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            let probs: Vec<f64> = logits.iter().map(|l| (l - m).exp() / z).collect();
            for c in 0..k {
                let g = probs[c] - if c == r.label { 1.0 } else { 0.0 };
                gb[c] += g / n;
                for j in 0..v {
                    if x[j] != 0.0 {
                        gw[j * k + c] += x[j] * g / n;
                    }
                }
            }
        }
        for (wi, gi) in w.iter_mut().zip(&gw) {
            *wi -= lr * gi;
        }
        for (bi, gi) in b.iter_mut().zip(&gb) {
            *bi -= lr * gi;
        }
    }
    let mut correct = 0usize;
    for (x, r) in feats.iter().zip(&subset) {
        let mut logits = b.clone();
        for j in 0..v {
            for c in 0..k {
                logits[c] += x[j] * w[j * k + c];
            }
        }
        let mut best = 0;
        for c in 1..k {
            if logits[c] > logits[best] {
                best = c;
            }
        }
        if best == r.label {
            correct += 1;
        }
    }
    correct as f64 / subset.len() as f64
}

pub fn save(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    let header = serde_json::to_string(&dataset.header)
        .map_err(|e| CoreError::Format(e.to_string()))?;
    writeln!(out, "{header}").unwrap();
    for r in &dataset.records {
        let line = serde_json::to_string(r).map_err(|e| CoreError::Format(e.to_string()))?;
        writeln!(out, "{line}").unwrap();
    }
    std::fs::write(path, out).map_err(|e| CoreError::io(path.display().to_string(), e))
}

pub fn load(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| CoreError::Format("empty dataset file".into()))?
        .map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let header: DatasetHeader = serde_json::from_str(&header_line)
        .map_err(|e| CoreError::Format(format!("bad dataset header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(CoreError::Format(format!(
            "dataset format version {} is not the supported {}",
            header.format_version, FORMAT_VERSION
        )));
    }
    let mut records = Vec::with_capacity(header.n);
    for line in lines {
        let line = line.map_err(|e| CoreError::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: DatasetRecord = serde_json::from_str(&line)
            .map_err(|e| CoreError::Format(format!("bad dataset record: {e}")))?;
        if r.label >= header.num_classes || r.tokens.iter().any(|&t| t >= header.vocab_size) {
            return Err(CoreError::Format("record outside declared vocab/classes".into()));
        }
        records.push(r);
    }
    if records.len() != header.n {
        return Err(CoreError::Format(format!(
            "header declares {} records, file holds {}",
            header.n,
            records.len()
        )));
    }
    Ok(Dataset { header, records })
}

impl Dataset {
    /// Deterministic train/validation split; records were shuffled at
    /// generation time.
    pub fn split(&self, train_fraction: f64) -> (Vec<DatasetRecord>, Vec<DatasetRecord>) {
        let cut = (self.records.len() as f64 * train_fraction).round() as usize;
        (
            self.records[..cut].to_vec(),
            self.records[cut..].to_vec(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_cfg(n: usize, seed: u64) -> GenConfig {
        GenConfig {
            n,
            seed,
            ..GenConfig::default()
        }
    }

    #[test]
    fn exact_bucket_counts() {
        let ds = generate(&quick_cfg(1000, 1)).unwrap();
        let easy = ds.records.iter().filter(|r| r.difficulty == Difficulty::Easy).count();
        let medium = ds.records.iter().filter(|r| r.difficulty == Difficulty::Medium).count();
        let hard = ds.records.iter().filter(|r| r.difficulty == Difficulty::Hard).count();
        assert_eq!(easy, 600);
        assert_eq!(medium, 200);
        assert_eq!(hard, 200);
    }

    #[test]
    fn tokens_within_vocab_and_fixed_length() {
        let ds = generate(&quick_cfg(400, 2)).unwrap();
        for r in &ds.records {
            assert_eq!(r.tokens.len(), 16);
            assert!(r.tokens.iter().all(|&t| t < 32));
            assert!(r.label < 4);
        }
    }

    #[test]
    fn labels_match_their_construction() {
        let ds = generate(&quick_cfg(600, 3)).unwrap();
        for r in &ds.records {
            let marker_positions: Vec<(usize, usize)> = r
                .tokens
                .iter()
                .enumerate()
                .filter(|(_, &t)| t < N_MARKERS)
                .map(|(i, &t)| (i, t))
                .collect();
            match r.difficulty {
                Difficulty::Easy => {
                    let count = r.tokens.iter().filter(|&&t| t == r.label).count();
                    assert_eq!(count, 5);
                }
                Difficulty::Medium => {
                    assert_eq!(marker_positions.len(), N_MARKERS);
                    assert_eq!(marker_positions[0].1, r.label);
                }
                Difficulty::Hard => {
                    assert_eq!(marker_positions.len(), N_MARKERS);
                    let keys: Vec<usize> = r
                        .tokens
                        .iter()
                        .enumerate()
                        .filter(|(_, &t)| t == KEY_TOKEN)
                        .map(|(i, _)| i)
                        .collect();
                    assert_eq!(keys.len(), 1);
                    let bridge = r.tokens[keys[0] - 1];
                    let occ: Vec<usize> = r
                        .tokens
                        .iter()
                        .enumerate()
                        .filter(|(_, &t)| t == bridge)
                        .map(|(i, _)| i)
                        .collect();
                    assert_eq!(occ.len(), 2);
                    let other = *occ.iter().find(|&&i| i != keys[0] - 1).unwrap();
                    assert_eq!(r.tokens[other - 1], r.label);
                }
            }
        }
    }

    #[test]
    fn probe_separates_easy_from_hard() {
        let ds = generate(&quick_cfg(2000, 4)).unwrap();
        assert!(
            ds.header.probe_easy_accuracy >= 0.95,
            "easy probe {}",
            ds.header.probe_easy_accuracy
        );
        assert!(
            ds.header.probe_hard_accuracy <= 0.60,
            "hard probe {}",
            ds.header.probe_hard_accuracy
        );
        assert!(ds.header.probe_medium_accuracy <= 0.60);
    }

    #[test]
    fn same_seed_gives_byte_identical_files() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        save(&generate(&quick_cfg(300, 7)).unwrap(), &a).unwrap();
        save(&generate(&quick_cfg(300, 7)).unwrap(), &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let c = dir.path().join("c.jsonl");
        save(&generate(&quick_cfg(300, 8)).unwrap(), &c).unwrap();
        assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
    }

    #[test]
    fn round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let ds = generate(&quick_cfg(250, 9)).unwrap();
        save(&ds, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.records.len(), ds.records.len());
        for (a, b) in ds.records.iter().zip(&back.records) {
            assert_eq!(a.tokens, b.tokens);
            assert_eq!(a.label, b.label);
            assert_eq!(a.difficulty, b.difficulty);
        }
    }

    #[test]
    fn version_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.jsonl");
        let mut ds = generate(&quick_cfg(150, 10)).unwrap();
        ds.header.format_version = 99;
        save(&ds, &path).unwrap();
        assert!(matches!(load(&path), Err(CoreError::Format(_))));
    }

    #[test]
    fn bad_parameters_rejected() {
        assert!(generate(&quick_cfg(50, 0)).is_err());
        let mut cfg = quick_cfg(200, 0);
        cfg.easy_fraction = 1.5;
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn split_is_deterministic_and_complete() {
        let ds = generate(&quick_cfg(200, 11)).unwrap();
        let (train, val) = ds.split(0.8);
        assert_eq!(train.len(), 160);
        assert_eq!(val.len(), 40);
    }
}
