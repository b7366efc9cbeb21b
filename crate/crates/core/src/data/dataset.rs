use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::sequence::FeatureSequence;
use super::tensor_file::{load_tensor, save_tensor};
use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct PairRecord {
    pub pair_id: u64,
    pub category: u32,
    pub video: FeatureSequence,
    pub music: FeatureSequence,
}

/// Aligned video/music pairs sharing one feature dimension per modality.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    records: Vec<PairRecord>,
    video_dim: usize,
    music_dim: usize,
}

impl Dataset {
    pub fn new(records: Vec<PairRecord>, video_dim: usize, music_dim: usize) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if r.video.dim() != video_dim {
                return Err(Error::DimMismatch(format!(
                    "pair {} video dim {} (expected {video_dim})",
                    r.pair_id,
                    r.video.dim()
                )));
            }
            if r.music.dim() != music_dim {
                return Err(Error::DimMismatch(format!(
                    "pair {} music dim {} (expected {music_dim})",
                    r.pair_id,
                    r.music.dim()
                )));
            }
            if !seen.insert(r.pair_id) {
                return Err(Error::DuplicatePairId(r.pair_id));
            }
        }
        Ok(Dataset {
            records,
            video_dim,
            music_dim,
        })
    }

    pub fn records(&self) -> &[PairRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn video_dim(&self) -> usize {
        self.video_dim
    }

    pub fn music_dim(&self) -> usize {
        self.music_dim
    }

    /// Record indices grouped by category, in ascending category order.
    pub fn by_category(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            groups.entry(r.category).or_default().push(i);
        }
        groups
    }

    fn subset(&self, mut idx: Vec<usize>) -> Dataset {
        idx.sort_by_key(|&i| self.records[i].pair_id);
        Dataset {
            records: idx.into_iter().map(|i| self.records[i].clone()).collect(),
            video_dim: self.video_dim,
            music_dim: self.music_dim,
        }
    }
}

/// Holds out `test_per_category` random records of every category.
/// Both halves come back sorted by pair id.
pub fn split_train_test(ds: &Dataset, test_per_category: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (category, mut idx) in ds.by_category() {
        if idx.len() <= test_per_category {
            return Err(Error::Insufficient {
                category,
                available: idx.len(),
                requested: test_per_category,
            });
        }
        idx.shuffle(&mut rng);
        test.extend_from_slice(&idx[..test_per_category]);
        train.extend_from_slice(&idx[test_per_category..]);
    }
    Ok((ds.subset(train), ds.subset(test)))
}

/// Writes one tensor file per sequence under `dir/tensors/` and a manifest
/// at `dir/manifest.csv` with paths relative to `dir`.
pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let tensors = dir.join("tensors");
    fs::create_dir_all(&tensors).map_err(|e| Error::io(&tensors, e))?;
    let mut manifest = String::from("# pair_id,category,video_tensor_path,music_tensor_path\n");
    for r in ds.records() {
        let v = format!("tensors/{:06}_video.iit", r.pair_id);
        let m = format!("tensors/{:06}_music.iit", r.pair_id);
        save_tensor(dir.join(&v), r.video.frames())?;
        save_tensor(dir.join(&m), r.music.frames())?;
        manifest.push_str(&format!("{},{},{v},{m}\n", r.pair_id, r.category));
    }
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Reads `pair_id,category,video_tensor_path,music_tensor_path` lines.
/// Relative tensor paths resolve against the manifest's directory.
pub fn load_dataset(manifest: impl AsRef<Path>) -> Result<Dataset> {
    let manifest = manifest.as_ref();
    let base = manifest.parent().unwrap_or(Path::new("."));
    let file = fs::File::open(manifest).map_err(|e| Error::io(manifest, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(file);

    let mut records = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    for row in reader.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line() as usize);
        if row.iter().all(str::is_empty) {
            continue;
        }
        if row.len() != 4 {
            return Err(Error::Manifest {
                line,
                msg: format!("expected 4 fields, found {}", row.len()),
            });
        }
        let parse_err = |what: &str| Error::Manifest {
            line,
            msg: format!("invalid {what}"),
        };
        let pair_id: u64 = row[0].parse().map_err(|_| parse_err("pair_id"))?;
        let category: u32 = row[1].parse().map_err(|_| parse_err("category"))?;
        let video = FeatureSequence::new(load_tensor(base.join(&row[2]))?)?;
        let music = FeatureSequence::new(load_tensor(base.join(&row[3]))?)?;
        let (vd, md) = *dims.get_or_insert((video.dim(), music.dim()));
        if video.dim() != vd || music.dim() != md {
            return Err(Error::DimMismatch(format!(
                "line {line}: pair {pair_id} has dims ({}, {}), expected ({vd}, {md})",
                video.dim(),
                music.dim()
            )));
        }
        records.push(PairRecord {
            pair_id,
            category,
            video,
            music,
        });
    }
    let (vd, md) = dims.ok_or(Error::EmptyDataset)?;
    Dataset::new(records, vd, md)
}
