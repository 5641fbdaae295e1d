//! Experiment configuration and the protocol dry run.
//!
//! A config is one JSON document. Files and `key=value` overrides are merged
//! onto the defaults key by key, so a file only needs the fields it changes
//! and a misspelled key is an error rather than a silent no-op.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{
    partition_by_sites, split_dataset, Manifest, Normalization, SitePairing, SliceRecord, SplitRatios, SynthConfig,
};
use crate::error::{Error, Result};
use crate::eval;
use crate::models::{build_reference_student, build_reference_teacher, ReferenceNetConfig, SegmentationModel};
use crate::train::TrainConfig;

/// Slices in the published multi-site dataset.
pub const PUBLISHED_SLICES: usize = 1740;
/// Patient cases in the published multi-site dataset.
pub const PUBLISHED_PATIENTS: usize = 116;
/// Slice-level 80/5/15 split of [`PUBLISHED_SLICES`].
pub const PUBLISHED_SPLIT: (usize, usize, usize) = (1392, 87, 261);
pub const PUBLISHED_INPUT: (usize, usize, usize) = (1, 384, 384);
pub const PUBLISHED_EPOCHS: usize = 100;
pub const PUBLISHED_SITE_PAIRS: [(u32, u32); 3] = [(1, 2), (3, 4), (5, 6)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Dataset root in the `site<k>/<patient>/img_<i>.png` layout.
    pub root: Option<PathBuf>,
    /// Manifest covering the whole dataset.
    pub manifest: Option<PathBuf>,
    /// Network input `[H, W]`.
    pub input_hw: (usize, usize),
    pub normalization: Normalization,
    pub split: SplitRatios,
    pub split_seed: u64,
    pub by_patient: bool,
    pub site_pairs: SitePairing,
    pub synth: SynthConfig,
    pub synth_sites: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            manifest: None,
            input_hw: (PUBLISHED_INPUT.1, PUBLISHED_INPUT.2),
            normalization: Normalization::Minmax,
            split: SplitRatios::default(),
            split_seed: 0,
            by_patient: true,
            site_pairs: SitePairing::default(),
            synth: SynthConfig::default(),
            synth_sites: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Run directory name under the output root.
    pub name: String,
    pub data: DataConfig,
    pub teacher: ReferenceNetConfig,
    pub student: ReferenceNetConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            data: DataConfig::default(),
            teacher: ReferenceNetConfig::default_teacher(),
            student: ReferenceNetConfig::default_student(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// The published protocol: six sites paired (1,2)/(3,4)/(5,6),
    /// slice-level 80/5/15 split, 384×384 input, 100 epochs under the
    /// cyclic schedule.
    pub fn published_protocol() -> Self {
        let mut cfg = Self {
            name: "published_protocol".into(),
            ..Self::default()
        };
        cfg.data.by_patient = false;
        cfg
    }

    /// Defaults merged with a JSON document.
    pub fn from_json(text: &str) -> Result<Self> {
        let patch: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut base = serde_json::to_value(Self::default())?;
        merge(&mut base, patch, "")?;
        Self::from_value(base)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Applies `key.path=value`. The value is parsed as JSON when possible
    /// and taken as a string otherwise; the key must already exist.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Config(format!("override {assignment:?} has an empty key")));
        }
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut root = serde_json::to_value(&*self)?;
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        }
        if slot.is_object() && value.is_object() {
            merge(slot, value, key)?;
        } else {
            *slot = value;
        }
        *self = Self::from_value(root)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!(
                "run name {:?} must be a plain directory name",
                self.name
            )));
        }
        let (h, w) = self.data.input_hw;
        if h == 0 || w == 0 {
            return Err(Error::Config(format!("input_hw {h}x{w}")));
        }
        self.data.split.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.data
            .site_pairs
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.teacher.validate()?;
        self.student.validate()?;
        self.train.validate()
    }

    fn from_value(v: Value) -> Result<Self> {
        let cfg: Self = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Recursive merge that only accepts keys present in `base`. A `null` in
/// the base (an unset optional) accepts any value.
fn merge(base: &mut Value, patch: Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let sub = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                let slot = b
                    .get_mut(&k)
                    .ok_or_else(|| Error::Config(format!("unknown config key {sub:?}")))?;
                if slot.is_object() && v.is_object() {
                    merge(slot, v, &sub)?;
                } else {
                    *slot = v;
                }
            }
            Ok(())
        }
        (b, p) => {
            *b = p;
            Ok(())
        }
    }
}

/// Records-only stand-in for the published dataset: 116 patients with 15
/// slices each spread over six sites. No image files exist behind it, so it
/// only serves the dry run.
pub fn placeholder_manifest() -> Manifest {
    let per_patient = PUBLISHED_SLICES / PUBLISHED_PATIENTS;
    let records = (0..PUBLISHED_PATIENTS)
        .flat_map(|p| {
            let site = (p % 6) as u32 + 1;
            (0..per_patient).map(move |s| {
                let dir = format!("site{site}/case{p:03}");
                SliceRecord {
                    site,
                    patient_id: format!("case{p:03}"),
                    slice_index: s as u32,
                    image_path: format!("{dir}/img_{s}.png"),
                    mask_path: format!("{dir}/mask_{s}.png"),
                }
            })
        })
        .collect();
    Manifest::new(records, "placeholder for the 6-site prostate dataset (no files)").expect("unique keys")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShardSummary {
    pub sites: (u32, u32),
    pub slices: usize,
    pub patients: usize,
    /// Sites actually present in the shard.
    pub present_sites: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelSummary {
    pub name: String,
    pub params: usize,
    pub flops: u64,
    pub logits_shape: (usize, usize, usize),
}

/// Everything the dry run derives from a config and a manifest.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DryRunReport {
    pub total_slices: usize,
    pub total_patients: usize,
    pub shards: Vec<ShardSummary>,
    pub excluded_sites: Vec<u32>,
    /// Records found in more than one shard (must be 0).
    pub shard_overlap: usize,
    pub by_patient: bool,
    pub split_sizes: (usize, usize, usize),
    pub input_shape: (usize, usize, usize),
    pub epochs: usize,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    pub total_steps: usize,
    pub lr: (f64, f64, u64),
    pub teacher: ModelSummary,
    pub student: ModelSummary,
}

fn model_summary(model: &dyn SegmentationModel, input: (usize, usize, usize)) -> Result<ModelSummary> {
    let specs = model.layer_specs(input)?;
    let logits_shape = specs.last().map(|l| l.output).ok_or(Error::Empty("layer list"))?;
    Ok(ModelSummary {
        name: model.name().to_string(),
        params: eval::count_params(model),
        flops: eval::estimate_flops(model, input)?,
        logits_shape,
    })
}

/// Wires the configured protocol without training: partitions and splits
/// the manifest, builds both networks and sizes them at the input shape.
pub fn dry_run(cfg: &ExperimentConfig, manifest: &Manifest) -> Result<DryRunReport> {
    cfg.validate()?;
    let part = partition_by_sites(manifest, &cfg.data.site_pairs)?;
    let shards: Vec<ShardSummary> = cfg
        .data
        .site_pairs
        .pairs
        .iter()
        .zip(&part.shards)
        .map(|(&sites, m)| ShardSummary {
            sites,
            slices: m.len(),
            patients: m.patients().len(),
            present_sites: m.sites().into_iter().collect(),
        })
        .collect();
    let mut seen = std::collections::HashSet::new();
    let shard_overlap = part
        .shards
        .iter()
        .flat_map(|m| &m.records)
        .filter(|r| !seen.insert(r.key()))
        .count();
    let (train, val, test) = split_dataset(manifest, cfg.data.split, cfg.data.split_seed, cfg.data.by_patient)?;
    let input = (1, cfg.data.input_hw.0, cfg.data.input_hw.1);
    let teacher = build_reference_teacher(&cfg.teacher)?;
    let student = build_reference_student(&cfg.student)?;
    let steps_per_epoch = train.len().div_ceil(cfg.train.batch_size);
    Ok(DryRunReport {
        total_slices: manifest.len(),
        total_patients: manifest.patients().len(),
        shards,
        excluded_sites: part.excluded_sites,
        shard_overlap,
        by_patient: cfg.data.by_patient,
        split_sizes: (train.len(), val.len(), test.len()),
        input_shape: input,
        epochs: cfg.train.epochs,
        batch_size: cfg.train.batch_size,
        steps_per_epoch,
        total_steps: steps_per_epoch * cfg.train.epochs,
        lr: (cfg.train.lr_min, cfg.train.lr_max, cfg.train.cyclic_step_size),
        teacher: model_summary(&teacher, input)?,
        student: model_summary(&student, input)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProtocolCheck {
    pub name: &'static str,
    pub expected: String,
    pub actual: String,
    pub ok: bool,
}

fn check(name: &'static str, expected: impl std::fmt::Debug, actual: impl std::fmt::Debug) -> ProtocolCheck {
    let (expected, actual) = (format!("{expected:?}"), format!("{actual:?}"));
    ProtocolCheck {
        name,
        ok: expected == actual,
        expected,
        actual,
    }
}

/// Compares a dry run against the published protocol.
pub fn published_protocol_checks(r: &DryRunReport) -> Vec<ProtocolCheck> {
    let pairs: Vec<(u32, u32)> = r.shards.iter().map(|s| s.sites).collect();
    let shard_sites_ok = r.shards.iter().all(|s| s.present_sites == [s.sites.0, s.sites.1]);
    let covered: usize = r.shards.iter().map(|s| s.slices).sum();
    vec![
        check("site pairs", PUBLISHED_SITE_PAIRS.to_vec(), pairs),
        check("shards hold exactly their own sites", true, shard_sites_ok),
        check("shards disjoint", 0, r.shard_overlap),
        check("shards cover every slice", r.total_slices, covered),
        check("excluded sites", Vec::<u32>::new(), r.excluded_sites.clone()),
        check("total slices", PUBLISHED_SLICES, r.total_slices),
        check("split by patient", false, r.by_patient),
        check("split sizes train/val/test", PUBLISHED_SPLIT, r.split_sizes),
        check("input shape", PUBLISHED_INPUT, r.input_shape),
        check(
            "student logits shape",
            (2, PUBLISHED_INPUT.1, PUBLISHED_INPUT.2),
            r.student.logits_shape,
        ),
        check(
            "teacher logits shape",
            (2, PUBLISHED_INPUT.1, PUBLISHED_INPUT.2),
            r.teacher.logits_shape,
        ),
        check("epochs", PUBLISHED_EPOCHS, r.epochs),
        check("lr min/max/step", (1e-6, 0.01, 2000u64), r.lr),
    ]
}
