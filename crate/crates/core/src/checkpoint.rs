//! Checkpoint format: a text manifest (version, config JSON, one line per
//! tensor with offset and shape) next to a flat little-endian f64 blob.
//! Round trips are bit-exact.

use crate::backbone::{BackboneConfig, BackboneParams, Weight};
use crate::controller::PolicyParams;
use crate::engine::DepthDistribution;
use crate::error::{CoreError, Result};
use crate::features::{ExtractorConfig, ExtractorParams};
use crate::predictor::{GbtModel, RegressionTree, RidgeTeacher, TreeNode};
use crate::svd::LowRankFactors;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "manifest.txt";
const BLOB_FILE: &str = "weights.blob";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub backbone: BackboneParams,
    pub extractor: ExtractorParams,
    pub gbt: GbtModel,
    pub teacher: RidgeTeacher,
    pub policy: PolicyParams,
    pub depth_dist: DepthDistribution,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FoldedInfo {
    name: String,
    rank: usize,
    energy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    backbone: BackboneConfig,
    extractor: ExtractorConfig,
    gbt_learning_rate: f64,
    gbt_base_prediction: f64,
    gbt_n_features: usize,
    gbt_n_trees: usize,
    policy_input_dim: usize,
    dist_ema_weight: f64,
    dist_updates: u64,
    folded: Vec<FoldedInfo>,
}

fn tree_to_tensor(tree: &RegressionTree) -> Tensor {
    let mut data = Vec::with_capacity(tree.nodes.len() * 5);
    for n in &tree.nodes {
        data.push(n.feature as f64);
        data.push(n.threshold);
        data.push(n.left as f64);
        data.push(n.right as f64);
        data.push(n.value);
    }
    Tensor {
        shape: vec![tree.nodes.len(), 5],
        data,
    }
}

fn tree_from_tensor(t: &Tensor) -> Result<RegressionTree> {
    if t.shape.len() != 2 || t.shape[1] != 5 {
        return Err(CoreError::Format("malformed tree tensor".into()));
    }
    let nodes = t
        .data
        .chunks(5)
        .map(|c| TreeNode {
            feature: c[0] as usize,
            threshold: c[1],
            left: c[2] as i64,
            right: c[3] as i64,
            value: c[4],
        })
        .collect();
    Ok(RegressionTree { nodes })
}

/// Stable name → tensor listing for every parameter group in the checkpoint.
fn collect_tensors(ck: &Checkpoint) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = Vec::new();
    ck.backbone
        .visit_tensors(&mut |name, t| out.push((format!("backbone.{name}"), t.clone())));
    out.push(("extractor.embedding".into(), ck.extractor.embedding.clone()));
    for (i, c) in ck.extractor.conv.iter().enumerate() {
        out.push((format!("extractor.conv{i}"), c.clone()));
    }
    ck.policy
        .visit_tensors(&mut |name, t| out.push((name, t.clone())));
    for (i, tree) in ck.gbt.trees.iter().enumerate() {
        out.push((format!("gbt.tree{i}"), tree_to_tensor(tree)));
    }
    out.push((
        "teacher.weights".into(),
        Tensor {
            shape: vec![ck.teacher.weights.len()],
            data: ck.teacher.weights.clone(),
        },
    ));
    out.push((
        "teacher.intercept".into(),
        Tensor::scalar(ck.teacher.intercept),
    ));
    out.push((
        "depth_dist.probs".into(),
        Tensor {
            shape: vec![ck.depth_dist.probs.len()],
            data: ck.depth_dist.probs.clone(),
        },
    ));
    out
}

pub fn save(ck: &Checkpoint, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir.display().to_string(), e))?;
    let folded_info: Vec<FoldedInfo> = {
        let mut infos = Vec::new();
        for (li, layer) in ck.backbone.layers.iter().enumerate() {
            for (wname, w) in [
                ("wq", &layer.wq),
                ("wk", &layer.wk),
                ("wv", &layer.wv),
                ("wo", &layer.wo),
                ("w1", &layer.w1),
                ("w2", &layer.w2),
            ] {
                if let Weight::Folded(f) = w {
                    infos.push(FoldedInfo {
                        name: format!("layer{li}.{wname}"),
                        rank: f.rank,
                        energy: f.energy_retained,
                    });
                }
            }
        }
        infos
    };
    let meta = Meta {
        backbone: ck.backbone.config.clone(),
        extractor: ck.extractor.config.clone(),
        gbt_learning_rate: ck.gbt.learning_rate,
        gbt_base_prediction: ck.gbt.base_prediction,
        gbt_n_features: ck.gbt.n_features,
        gbt_n_trees: ck.gbt.trees.len(),
        policy_input_dim: ck.policy.input_dim,
        dist_ema_weight: ck.depth_dist.ema_weight,
        dist_updates: ck.depth_dist.updates,
        folded: folded_info,
    };
    let meta_json = serde_json::to_string(&meta).map_err(|e| CoreError::Format(e.to_string()))?;

    let tensors = collect_tensors(ck);
    let mut manifest = String::new();
    writeln!(manifest, "format-version {FORMAT_VERSION}").unwrap();
    writeln!(manifest, "meta {meta_json}").unwrap();
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for (name, t) in &tensors {
        let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
        writeln!(manifest, "tensor {name} {offset} {} {}", t.len(), dims.join(",")).unwrap();
        for v in &t.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += t.len();
    }
    let mpath = dir.join(MANIFEST_FILE);
    std::fs::write(&mpath, manifest).map_err(|e| CoreError::io(mpath.display().to_string(), e))?;
    let bpath = dir.join(BLOB_FILE);
    std::fs::write(&bpath, blob).map_err(|e| CoreError::io(bpath.display().to_string(), e))?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let mpath = dir.join(MANIFEST_FILE);
    let manifest = std::fs::read_to_string(&mpath)
        .map_err(|e| CoreError::io(mpath.display().to_string(), e))?;
    let bpath = dir.join(BLOB_FILE);
    let blob = std::fs::read(&bpath).map_err(|e| CoreError::io(bpath.display().to_string(), e))?;
    if blob.len() % 8 != 0 {
        return Err(CoreError::Format("blob length is not a multiple of 8".into()));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let mut lines = manifest.lines();
    let version_line = lines
        .next()
        .ok_or_else(|| CoreError::Format("empty manifest".into()))?;
    let version: u32 = version_line
        .strip_prefix("format-version ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| CoreError::Format("manifest missing format-version".into()))?;
    if version != FORMAT_VERSION {
        return Err(CoreError::Format(format!(
            "checkpoint format version {version} is not the supported {FORMAT_VERSION}"
        )));
    }
    let meta_line = lines
        .next()
        .and_then(|l| l.strip_prefix("meta "))
        .ok_or_else(|| CoreError::Format("manifest missing meta line".into()))?;
    let meta: Meta =
        serde_json::from_str(meta_line).map_err(|e| CoreError::Format(format!("bad meta: {e}")))?;

    let mut table: BTreeMap<String, Tensor> = BTreeMap::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 5 || parts[0] != "tensor" {
            return Err(CoreError::Format(format!("bad manifest line: {line}")));
        }
        let name = parts[1].to_string();
        let offset: usize = parts[2]
            .parse()
            .map_err(|_| CoreError::Format("bad offset".into()))?;
        let len: usize = parts[3]
            .parse()
            .map_err(|_| CoreError::Format("bad length".into()))?;
        let shape: Vec<usize> = parts[4]
            .split(',')
            .map(|d| d.parse().map_err(|_| CoreError::Format("bad shape".into())))
            .collect::<Result<_>>()?;
        if shape.iter().product::<usize>() != len || offset + len > values.len() {
            return Err(CoreError::Format(format!("tensor {name} outside blob bounds")));
        }
        table.insert(
            name,
            Tensor {
                shape,
                data: values[offset..offset + len].to_vec(),
            },
        );
    }

    let take = |table: &BTreeMap<String, Tensor>, name: &str| -> Result<Tensor> {
        table
            .get(name)
            .cloned()
            .ok_or_else(|| CoreError::Format(format!("checkpoint is missing tensor {name}")))
    };

    // backbone skeleton, then fill folded structure and tensor contents
    let mut backbone = BackboneParams::zeros(meta.backbone.clone())?;
    for info in &meta.folded {
        let (li, wname) = info
            .name
            .strip_prefix("layer")
            .and_then(|s| s.split_once('.'))
            .ok_or_else(|| CoreError::Format(format!("bad folded name {}", info.name)))?;
        let li: usize = li
            .parse()
            .map_err(|_| CoreError::Format("bad folded layer index".into()))?;
        let layer = backbone
            .layers
            .get_mut(li)
            .ok_or_else(|| CoreError::Format("folded layer out of range".into()))?;
        let slot = match wname {
            "wq" => &mut layer.wq,
            "wk" => &mut layer.wk,
            "wv" => &mut layer.wv,
            "wo" => &mut layer.wo,
            "w1" => &mut layer.w1,
            "w2" => &mut layer.w2,
            other => return Err(CoreError::Format(format!("unknown folded slot {other}"))),
        };
        let (m, n) = match slot {
            Weight::Dense(t) => (t.rows(), t.cols()),
            Weight::Folded(_) => return Err(CoreError::Format("duplicate folded entry".into())),
        };
        *slot = Weight::Folded(LowRankFactors {
            left: Tensor::zeros(&[m, info.rank]),
            right: Tensor::zeros(&[info.rank, n]),
            rank: info.rank,
            energy_retained: info.energy,
        });
    }
    let mut missing = Vec::new();
    backbone.visit_tensors_mut(&mut |name, t| {
        match table.get(&format!("backbone.{name}")) {
            Some(src) if src.shape == t.shape => *t = src.clone(),
            Some(_) => missing.push(format!("{name} (shape mismatch)")),
            None => missing.push(name),
        }
    });
    if !missing.is_empty() {
        return Err(CoreError::Format(format!(
            "checkpoint is missing backbone tensors: {}",
            missing.join(", ")
        )));
    }

    let extractor = ExtractorParams {
        config: meta.extractor.clone(),
        embedding: take(&table, "extractor.embedding")?,
        conv: [
            take(&table, "extractor.conv0")?,
            take(&table, "extractor.conv1")?,
            take(&table, "extractor.conv2")?,
        ],
    };

    let mut policy = PolicyParams::init(meta.policy_input_dim - 2, 0);
    let mut missing = Vec::new();
    policy.visit_tensors_mut(&mut |name, t| match table.get(&name) {
        Some(src) if src.shape == t.shape => *t = src.clone(),
        _ => missing.push(name),
    });
    if !missing.is_empty() {
        return Err(CoreError::Format(format!(
            "checkpoint is missing policy tensors: {}",
            missing.join(", ")
        )));
    }
    debug_assert_eq!(policy.input_dim, meta.policy_input_dim);

    let mut trees = Vec::with_capacity(meta.gbt_n_trees);
    for i in 0..meta.gbt_n_trees {
        trees.push(tree_from_tensor(&take(&table, &format!("gbt.tree{i}"))?)?);
    }
    let gbt = GbtModel {
        trees,
        learning_rate: meta.gbt_learning_rate,
        base_prediction: meta.gbt_base_prediction,
        n_features: meta.gbt_n_features,
    };

    let teacher = RidgeTeacher {
        weights: take(&table, "teacher.weights")?.data,
        intercept: take(&table, "teacher.intercept")?.data[0],
    };

    let depth_dist = DepthDistribution {
        probs: take(&table, "depth_dist.probs")?.data,
        ema_weight: meta.dist_ema_weight,
        updates: meta.dist_updates,
    };
    depth_dist.check_simplex()?;

    Ok(Checkpoint {
        backbone,
        extractor,
        gbt,
        teacher,
        policy,
        depth_dist,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::fold_layers;
    use crate::predictor::{train_predictor, DepthLabel, GbtConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_checkpoint(seed: u64) -> Checkpoint {
        let backbone = BackboneParams::init(
            BackboneConfig {
                num_layers: 3,
                hidden_dim: 16,
                heads: 2,
                ffn_mult: 4,
                num_classes: 4,
                vocab_size: 12,
                max_len: 8,
            },
            seed,
        )
        .unwrap();
        let extractor = ExtractorParams::init(
            ExtractorConfig {
                vocab_size: 12,
                max_len: 8,
            },
            seed + 1,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
        let features: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let labels: Vec<DepthLabel> = (0..40).map(|i| DepthLabel(1 + i % 3)).collect();
        let teacher_t: Vec<f64> = labels.iter().map(|l| l.0 as f64).collect();
        let cfg = GbtConfig {
            n_trees: 5,
            ..GbtConfig::default()
        };
        let (gbt, _) = train_predictor(&features, &labels, &teacher_t, &cfg).unwrap();
        let teacher = RidgeTeacher {
            weights: vec![0.25, -0.5, 1.0],
            intercept: 2.5,
        };
        let mut depth_dist = DepthDistribution::uniform(3);
        depth_dist.update(2).unwrap();
        Checkpoint {
            backbone,
            extractor,
            gbt,
            teacher,
            policy: PolicyParams::init(4, seed + 3),
            depth_dist,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ck = sample_checkpoint(1);
        save(&ck, dir.path()).unwrap();
        let back = load(dir.path()).unwrap();
        assert_eq!(ck.backbone.content_hash(), back.backbone.content_hash());
        assert_eq!(ck.policy.content_hash(), back.policy.content_hash());
        assert_eq!(ck.extractor.embedding.data, back.extractor.embedding.data);
        for (a, b) in ck.extractor.conv.iter().zip(&back.extractor.conv) {
            assert_eq!(a.data, b.data);
        }
        assert_eq!(ck.gbt.trees.len(), back.gbt.trees.len());
        let x = vec![0.3; 6];
        assert_eq!(ck.gbt.raw_predict(&x).to_bits(), back.gbt.raw_predict(&x).to_bits());
        assert_eq!(ck.teacher.weights, back.teacher.weights);
        assert_eq!(ck.teacher.intercept.to_bits(), back.teacher.intercept.to_bits());
        assert_eq!(ck.depth_dist.probs, back.depth_dist.probs);
        assert_eq!(ck.depth_dist.updates, back.depth_dist.updates);
    }

    #[test]
    fn save_load_save_produces_identical_files() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let ck = sample_checkpoint(2);
        save(&ck, d1.path()).unwrap();
        let back = load(d1.path()).unwrap();
        save(&back, d2.path()).unwrap();
        for f in [MANIFEST_FILE, BLOB_FILE] {
            assert_eq!(
                std::fs::read(d1.path().join(f)).unwrap(),
                std::fs::read(d2.path().join(f)).unwrap(),
                "{f} differs"
            );
        }
    }

    #[test]
    fn folded_backbone_survives_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut ck = sample_checkpoint(3);
        ck.backbone = fold_layers(&ck.backbone, 0.9).unwrap();
        save(&ck, dir.path()).unwrap();
        let back = load(dir.path()).unwrap();
        assert!(back.backbone.is_folded());
        assert_eq!(ck.backbone.content_hash(), back.backbone.content_hash());
        // energy metadata survives too
        match (&ck.backbone.layers[0].wq, &back.backbone.layers[0].wq) {
            (Weight::Folded(a), Weight::Folded(b)) => {
                assert_eq!(a.rank, b.rank);
                assert_eq!(a.energy_retained.to_bits(), b.energy_retained.to_bits());
            }
            _ => panic!("expected folded weights"),
        }
    }

    #[test]
    fn version_mismatch_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let ck = sample_checkpoint(4);
        save(&ck, dir.path()).unwrap();
        let mpath = dir.path().join(MANIFEST_FILE);
        let manifest = std::fs::read_to_string(&mpath).unwrap();
        let bumped = manifest.replacen("format-version 1", "format-version 2", 1);
        std::fs::write(&mpath, bumped).unwrap();
        match load(dir.path()) {
            Err(CoreError::Format(msg)) => assert!(msg.contains("version")),
            other => panic!("expected version error, got {other:?}"),
        }
    }

    #[test]
    fn missing_tensor_is_reported_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let ck = sample_checkpoint(5);
        save(&ck, dir.path()).unwrap();
        let mpath = dir.path().join(MANIFEST_FILE);
        let manifest = std::fs::read_to_string(&mpath).unwrap();
        let filtered: String = manifest
            .lines()
            .filter(|l| !l.contains("teacher.intercept"))
            .map(|l| format!("{l}\n"))
            .collect();
        std::fs::write(&mpath, filtered).unwrap();
        match load(dir.path()) {
            Err(CoreError::Format(msg)) => assert!(msg.contains("teacher.intercept")),
            other => panic!("expected missing-tensor error, got {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_an_io_error_with_path() {
        let dir = tempfile::tempdir().unwrap();
        match load(&dir.path().join("nope")) {
            Err(CoreError::Io { path, .. }) => assert!(path.contains("nope")),
            other => panic!("expected io error, got {other:?}"),
        }
    }
}
