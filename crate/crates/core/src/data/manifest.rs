use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

/// One 2-D slice with its mask and provenance.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SliceRecord {
    pub site: u32,
    pub patient_id: String,
    pub slice_index: u32,
    pub image_path: String,
    pub mask_path: String,
}

impl SliceRecord {
    pub fn key(&self) -> (u32, &str, u32) {
        (self.site, &self.patient_id, self.slice_index)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub records: Vec<SliceRecord>,
    pub provenance: String,
}

impl Manifest {
    /// Builds a manifest, rejecting duplicate `(site, patient, slice)` keys.
    pub fn new(records: Vec<SliceRecord>, provenance: impl Into<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.key()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate slice site{} / {} / {}",
                    r.site, r.patient_id, r.slice_index
                )));
            }
        }
        Ok(Self {
            records,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn sites(&self) -> BTreeSet<u32> {
        self.records.iter().map(|r| r.site).collect()
    }

    pub fn patients(&self) -> BTreeSet<(u32, String)> {
        self.records.iter().map(|r| (r.site, r.patient_id.clone())).collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        Manifest::new(m.records, m.provenance)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

fn parse_suffix(name: &str, prefix: &str, ext: &str) -> Option<u32> {
    name.strip_prefix(prefix)?.strip_suffix(ext)?.parse().ok()
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

/// Enumerates `root/site<k>/<patient_id>/img_<idx>.png` with matching
/// `mask_<idx>.png`. Regular files directly under `root` are ignored.
pub fn ingest_slices(root: impl AsRef<Path>) -> Result<Manifest> {
    let root = root.as_ref();
    let mut records = Vec::new();
    for site_dir in sorted_entries(root)? {
        if !site_dir.is_dir() {
            continue;
        }
        let name = file_name(&site_dir);
        let site = name
            .strip_prefix("site")
            .and_then(|s| s.parse::<u32>().ok())
            .filter(|s| (1..=6).contains(s))
            .ok_or_else(|| Error::Layout(format!("expected site<1..6> directory, found {}", site_dir.display())))?;
        for patient_dir in sorted_entries(&site_dir)? {
            if !patient_dir.is_dir() {
                return Err(Error::Layout(format!(
                    "expected patient directory, found file {}",
                    patient_dir.display()
                )));
            }
            let patient_id = file_name(&patient_dir);
            let mut images = BTreeMap::new();
            let mut masks = BTreeMap::new();
            for file in sorted_entries(&patient_dir)? {
                let fname = file_name(&file);
                if let Some(idx) = parse_suffix(&fname, "img_", ".png") {
                    images.insert(idx, file);
                } else if let Some(idx) = parse_suffix(&fname, "mask_", ".png") {
                    masks.insert(idx, file);
                } else {
                    return Err(Error::Layout(format!("unexpected file {}", file.display())));
                }
            }
            for (idx, image) in &images {
                let mask = masks.remove(idx).ok_or_else(|| Error::MissingMask(image.clone()))?;
                records.push(SliceRecord {
                    site,
                    patient_id: patient_id.clone(),
                    slice_index: *idx,
                    image_path: image.to_string_lossy().into_owned(),
                    mask_path: mask.to_string_lossy().into_owned(),
                });
            }
            if let Some((_, orphan)) = masks.into_iter().next() {
                return Err(Error::Layout(format!("mask without image: {}", orphan.display())));
            }
        }
    }
    records.sort_by(|a, b| (a.site, &a.patient_id, a.slice_index).cmp(&(b.site, &b.patient_id, b.slice_index)));
    Manifest::new(records, format!("ingested from {}", root.display()))
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Train/validation/test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.05,
            test: 0.15,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let r = [self.train, self.val, self.test];
        if r.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidArgument(format!("split ratios must be positive: {r:?}")));
        }
        let sum: f64 = r.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("split ratios sum to {sum}")));
        }
        Ok(())
    }

    /// Unit counts `(train, val, test)` for `n` units.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let train = ((self.train * n as f64).round() as usize).min(n);
        let val = ((self.val * n as f64).round() as usize).min(n - train);
        (train, val, n - train - val)
    }
}

/// Seeded random split into train/val/test. Units are patients when
/// `by_patient`, slices otherwise. Each output keeps the input record order.
pub fn split_dataset(
    m: &Manifest,
    ratios: SplitRatios,
    seed: u64,
    by_patient: bool,
) -> Result<(Manifest, Manifest, Manifest)> {
    ratios.validate()?;
    let unit_of: Vec<usize> = if by_patient {
        let mut ids = BTreeMap::new();
        m.records
            .iter()
            .map(|r| {
                let next = ids.len();
                *ids.entry((r.site, r.patient_id.clone())).or_insert(next)
            })
            .collect()
    } else {
        (0..m.len()).collect()
    };
    let n_units = unit_of.iter().max().map_or(0, |&u| u + 1);
    let mut order: Vec<usize> = (0..n_units).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (n_train, n_val, _) = ratios.sizes(n_units);
    let mut part = vec![0u8; n_units];
    for (rank, &u) in order.iter().enumerate() {
        part[u] = if rank < n_train {
            0
        } else if rank < n_train + n_val {
            1
        } else {
            2
        };
    }
    let mut out = [Vec::new(), Vec::new(), Vec::new()];
    for (r, &u) in m.records.iter().zip(&unit_of) {
        out[part[u] as usize].push(r.clone());
    }
    let [train, val, test] = out;
    let tag = |name: &str| format!("{} | {name} split (seed {seed}, by_patient {by_patient})", m.provenance);
    Ok((
        Manifest::new(train, tag("train"))?,
        Manifest::new(val, tag("val"))?,
        Manifest::new(test, tag("test"))?,
    ))
}

/// Site pairs, one per teacher shard.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SitePairing {
    pub pairs: Vec<(u32, u32)>,
}

impl Default for SitePairing {
    fn default() -> Self {
        Self {
            pairs: vec![(1, 2), (3, 4), (5, 6)],
        }
    }
}

impl SitePairing {
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for &(a, b) in &self.pairs {
            for s in [a, b] {
                if !seen.insert(s) {
                    return Err(Error::InvalidArgument(format!(
                        "site {s} appears in more than one pair slot"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SitePartition {
    pub shards: Vec<Manifest>,
    /// Sites present in the manifest but not covered by any pair.
    pub excluded_sites: Vec<u32>,
}

pub fn partition_by_sites(m: &Manifest, pairing: &SitePairing) -> Result<SitePartition> {
    pairing.validate()?;
    let shards = pairing
        .pairs
        .iter()
        .map(|&(a, b)| {
            let records = m
                .records
                .iter()
                .filter(|r| r.site == a || r.site == b)
                .cloned()
                .collect();
            Manifest::new(records, format!("{} | sites ({a},{b})", m.provenance))
        })
        .collect::<Result<Vec<_>>>()?;
    let covered: BTreeSet<u32> = pairing.pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
    let excluded_sites = m.sites().into_iter().filter(|s| !covered.contains(s)).collect();
    Ok(SitePartition { shards, excluded_sites })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(site: u32, patient: &str, idx: u32) -> SliceRecord {
        SliceRecord {
            site,
            patient_id: patient.into(),
            slice_index: idx,
            image_path: format!("site{site}/{patient}/img_{idx}.png"),
            mask_path: format!("site{site}/{patient}/mask_{idx}.png"),
        }
    }

    #[test]
    fn duplicate_keys_rejected() {
        assert!(Manifest::new(vec![record(1, "a", 0), record(1, "a", 0)], "").is_err());
    }

    #[test]
    fn ratio_validation() {
        assert!(SplitRatios {
            train: 0.8,
            val: 0.1,
            test: 0.2
        }
        .validate()
        .is_err());
        assert!(SplitRatios {
            train: 0.0,
            val: 0.5,
            test: 0.5
        }
        .validate()
        .is_err());
        assert_eq!(SplitRatios::default().sizes(1740), (1392, 87, 261));
    }

    #[test]
    fn partition_rejects_overlap() {
        let m = Manifest::new(vec![record(1, "a", 0)], "").unwrap();
        let bad = SitePairing {
            pairs: vec![(1, 2), (2, 3)],
        };
        assert!(partition_by_sites(&m, &bad).is_err());
        let p = partition_by_sites(&m, &SitePairing { pairs: vec![(1, 2)] }).unwrap();
        assert_eq!(p.shards[0].len(), 1);
    }
}
