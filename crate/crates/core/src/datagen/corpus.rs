//! Corpus assembly, object-level splitting and on-disk layout.
//!
//! ```text
//! <dir>/corpus.jsonl     one DatasetRecord per line
//! <dir>/objects.jsonl    one ObjectMetadata per line
//! <dir>/manifest.json    SplitManifest
//! <dir>/clouds/<id>.pts  normalized point cloud
//! <dir>/views/<id>.npy   8-view splat images
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{generate_object, generate_qa, Family, ObjectMetadata, DEFAULT_POINTS};
use crate::encoders::{render_splat_views, write_views};
use crate::error::{Error, Result};
use crate::geometry::{build_spherical_rig, read_cloud, write_cloud, CameraRig, PointCloud};
use crate::numerics::{splitmix64, Rng};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub object_id: String,
    pub level: u8,
    pub question: String,
    pub rationale: String,
    pub answer: String,
    pub points_path: String,
    pub views_path: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn split_of(&self, id: &str) -> Option<Split> {
        [Split::Train, Split::Val, Split::Test].into_iter().find(|s| self.ids(*s).iter().any(|x| x == id))
    }
}

pub const DEFAULT_RATIOS: [f64; 3] = [0.795, 0.102, 0.103];

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
}

/// Keyed 64-bit hash of an object id.
pub fn split_key(id: &str, seed: u64) -> u64 {
    splitmix64(fnv1a(id) ^ splitmix64(seed))
}

/// Partition ids by object. Ids are ranked by their keyed hash and the
/// ranked list is cut at the rounded ratio quotas, so every object lands in
/// exactly one split and sizes match the ratios to within one object.
pub fn split_objects(ids: &[String], ratios: [f64; 3], seed: u64) -> Result<SplitManifest> {
    if ids.is_empty() {
        return Err(Error::InvalidArgument("empty object id list".into()));
    }
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!("split ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    let mut uniq = ids.to_vec();
    uniq.sort();
    uniq.dedup();
    let mut ranked: Vec<(u64, String)> = uniq.into_iter().map(|id| (split_key(&id, seed), id)).collect();
    ranked.sort();
    let n = ranked.len();
    let n_train = ((ratios[0] * n as f64).round() as usize).min(n);
    let n_val = ((ratios[1] * n as f64).round() as usize).min(n - n_train);
    let mut ids: Vec<String> = ranked.into_iter().map(|(_, id)| id).collect();
    let mut test = ids.split_off(n_train + n_val);
    let mut val = ids.split_off(n_train);
    let mut train = ids;
    train.sort();
    val.sort();
    test.sort();
    Ok(SplitManifest { seed, ratios, train, val, test })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub objects: usize,
    pub seed: u64,
    pub n_points: usize,
    pub ratios: [f64; 3],
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            objects: 512,
            seed: 0,
            n_points: DEFAULT_POINTS,
            ratios: DEFAULT_RATIOS,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub clouds: Vec<PointCloud>,
    pub metas: Vec<ObjectMetadata>,
    pub records: Vec<DatasetRecord>,
    pub manifest: SplitManifest,
}

impl Corpus {
    pub fn meta(&self, id: &str) -> Option<&ObjectMetadata> {
        self.metas.iter().find(|m| m.object_id == id)
    }

    pub fn records_in(&self, split: Split) -> Vec<&DatasetRecord> {
        self.records.iter().filter(|r| self.manifest.split_of(&r.object_id) == Some(split)).collect()
    }
}

pub fn object_id(index: usize) -> String {
    format!("obj-{index:05}")
}

/// One record per level per object; a pure function of the config.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    let root = Rng::new(cfg.seed);
    let mut clouds = Vec::with_capacity(cfg.objects);
    let mut metas = Vec::with_capacity(cfg.objects);
    let mut records = Vec::with_capacity(3 * cfg.objects);
    for i in 0..cfg.objects {
        let mut rng = root.fork(i as u64);
        let id = object_id(i);
        let family = *rng.choose(&Family::ALL);
        let (cloud, meta) = generate_object(&id, family, cfg.n_points, &mut rng)?;
        for level in 1..=3u8 {
            let mut qa_rng = rng.fork(1000 + u64::from(level));
            let rec = (0..64)
                .find_map(|_| match generate_qa(&meta, level, &mut qa_rng) {
                    Err(Error::Unsatisfiable(_)) => None,
                    other => Some(other),
                })
                .unwrap_or_else(|| Err(Error::Unsatisfiable(format!("level {level} for {id}"))))?;
            records.push(rec);
        }
        clouds.push(cloud);
        metas.push(meta);
    }
    let ids: Vec<String> = metas.iter().map(|m| m.object_id.clone()).collect();
    let manifest = split_objects(&ids, cfg.ratios, cfg.seed)?;
    Ok(Corpus { clouds, metas, records, manifest })
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for it in items {
        serde_json::to_writer(&mut buf, it)?;
        buf.push(b'\n');
    }
    fs::File::create(path).and_then(|mut f| f.write_all(&buf)).map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    s.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

pub fn write_corpus(dir: &Path, corpus: &Corpus, rig: &CameraRig) -> Result<()> {
    for sub in ["clouds", "views"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for cloud in &corpus.clouds {
        write_cloud(&dir.join("clouds").join(format!("{}.pts", cloud.object_id)), cloud)?;
        write_views(&dir.join("views").join(format!("{}.npy", cloud.object_id)), &render_splat_views(cloud, rig))?;
    }
    write_jsonl(&dir.join("corpus.jsonl"), &corpus.records)?;
    write_jsonl(&dir.join("objects.jsonl"), &corpus.metas)?;
    let mp = dir.join("manifest.json");
    fs::write(&mp, serde_json::to_string_pretty(&corpus.manifest)?).map_err(|e| Error::io(&mp, e))
}

pub fn read_manifest(dir: &Path) -> Result<SplitManifest> {
    let p = dir.join("manifest.json");
    let s = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(serde_json::from_str(&s)?)
}

/// Load records, metadata, clouds and the manifest (views stay on disk).
pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let records: Vec<DatasetRecord> = read_jsonl(&dir.join("corpus.jsonl"))?;
    let metas: Vec<ObjectMetadata> = read_jsonl(&dir.join("objects.jsonl"))?;
    let clouds = metas
        .iter()
        .map(|m| read_cloud(&dir.join("clouds").join(format!("{}.pts", m.object_id))))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        clouds,
        metas,
        records,
        manifest: read_manifest(dir)?,
    })
}

/// Default rig used when writing corpus views.
pub fn default_rig() -> CameraRig {
    build_spherical_rig(crate::geometry::DEFAULT_RADIUS, crate::geometry::DEFAULT_FOV_DEG, crate::geometry::DEFAULT_IMAGE_SIZE).expect("default rig is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_at_one_thousand() {
        let ids: Vec<String> = (0..1000).map(object_id).collect();
        let m = split_objects(&ids, DEFAULT_RATIOS, 7).unwrap();
        assert_eq!((m.train.len(), m.val.len(), m.test.len()), (795, 102, 103));
    }

    #[test]
    fn split_rejects_empty_and_bad_ratios() {
        assert!(split_objects(&[], DEFAULT_RATIOS, 0).is_err());
        assert!(split_objects(&["a".into()], [0.5, 0.5, 0.5], 0).is_err());
    }

    #[test]
    fn records_of_one_object_share_a_split() {
        let c = generate_corpus(&CorpusConfig {
            objects: 12,
            n_points: 64,
            ..CorpusConfig::default()
        })
        .unwrap();
        assert_eq!(c.records.len(), 36);
        for r in &c.records {
            let s = c.manifest.split_of(&r.object_id).unwrap();
            assert!(c.records.iter().filter(|o| o.object_id == r.object_id).all(|o| c.manifest.split_of(&o.object_id) == Some(s)));
        }
    }
}
