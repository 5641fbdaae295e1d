//! Dataset ingestion, splitting, site sharding, phantom synthesis and batch
//! loading.
//!
//! On-disk layout: `root/site<k>/<patient_id>/img_<idx>.png` (8- or 16-bit
//! grayscale) with `mask_<idx>.png` next to it, a `manifest.json` listing
//! every [`SliceRecord`], and for synthetic sets a `phantom_meta.json`
//! sidecar holding the generating ellipses.

mod loader;
mod manifest;
mod synth;

pub use loader::{load_batch, load_slice, normalize, read_gray, read_mask, Normalization, SliceSet};
pub use manifest::{
    ingest_slices, partition_by_sites, split_dataset, Manifest, SitePairing, SitePartition, SliceRecord, SplitRatios,
    MANIFEST_FILE,
};
pub use synth::{
    render_phantom, synthesize_dataset, Ellipse, PhantomMeta, PhantomRecord, SiteProfile, SynthConfig,
    PHANTOM_META_FILE,
};
