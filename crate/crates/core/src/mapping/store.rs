use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LocalMap, MappingError};
use crate::features::FeatureSet;
use crate::geometry::Pose;
use crate::odometry::Keyframe;
use crate::raster::RasterImage;

const MAGIC: &[u8; 4] = b"LMZ1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveEntry {
    pub id: u64,
    pub stamp: f64,
    pub file: String,
    pub keyframe_ids: Vec<u64>,
    pub bytes: u64,
}

#[derive(Serialize, Deserialize)]
struct KeyframeHeader {
    id: u64,
    frame_id: u64,
    pose: Pose,
    stamp: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    id: u64,
    stamp: f64,
    keyframe_ids: Vec<u64>,
    anchor_pose: Pose,
    keyframes: Vec<KeyframeHeader>,
}

/// Serializes a finalized map as `LMZ1`, four little-endian `u64` section
/// lengths, then the PGM image, depth sidecar, feature blobs and JSON
/// header. The feature section holds the image features followed by each
/// member keyframe's features, every blob prefixed with its `u64` length.
pub fn encode_local_map(map: &LocalMap) -> Result<Vec<u8>, MappingError> {
    let image = map.image.as_ref().ok_or(MappingError::NotFinalized(map.id))?;
    let pgm = image.to_pgm_bytes();
    let depth = image.to_depth_bytes();
    let mut feats = Vec::new();
    feats.extend_from_slice(&(1 + map.keyframes.len() as u32).to_le_bytes());
    for fs in std::iter::once(&map.image_features).chain(map.keyframes.iter().map(|k| &k.features)) {
        let blob = fs.to_blob();
        feats.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        feats.extend_from_slice(&blob);
    }
    let header = Header {
        id: map.id,
        stamp: map.stamp,
        keyframe_ids: map.keyframe_ids.clone(),
        anchor_pose: map.anchor_pose,
        keyframes: map
            .keyframes
            .iter()
            .map(|k| KeyframeHeader {
                id: k.id,
                frame_id: k.frame_id,
                pose: k.pose,
                stamp: k.stamp,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| MappingError::Store(e.to_string()))?;
    let mut out = Vec::with_capacity(36 + pgm.len() + depth.len() + feats.len() + json.len());
    out.extend_from_slice(MAGIC);
    for s in [&pgm, &depth, &feats, &json] {
        out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    }
    for s in [pgm, depth, feats, json] {
        out.extend_from_slice(&s);
    }
    Ok(out)
}

/// Inverse of [`encode_local_map`]. Map points and dense scans are not
/// archived, so they come back empty.
pub fn decode_local_map(bytes: &[u8]) -> Result<LocalMap, MappingError> {
    let bad = |m: &str| MappingError::Store(m.to_string());
    if bytes.len() < 36 || &bytes[..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let mut lens = [0usize; 4];
    for (i, l) in lens.iter_mut().enumerate() {
        *l = u64::from_le_bytes(bytes[4 + 8 * i..12 + 8 * i].try_into().unwrap()) as usize;
    }
    if 36 + lens.iter().sum::<usize>() != bytes.len() {
        return Err(bad("section lengths do not match file size"));
    }
    let mut sections = Vec::new();
    let mut pos = 36;
    for l in lens {
        sections.push(&bytes[pos..pos + l]);
        pos += l;
    }
    let header: Header = serde_json::from_slice(sections[3]).map_err(|e| MappingError::Store(e.to_string()))?;
    let image = RasterImage::from_parts(sections[0], sections[1], header.id).map_err(|e| MappingError::Store(e.to_string()))?;
    let feats = sections[2];
    if feats.len() < 4 {
        return Err(bad("truncated feature section"));
    }
    let n = u32::from_le_bytes(feats[..4].try_into().unwrap()) as usize;
    let mut sets = Vec::with_capacity(n);
    let mut pos = 4;
    for _ in 0..n {
        let len = feats
            .get(pos..pos + 8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()) as usize)
            .ok_or_else(|| bad("truncated feature section"))?;
        let blob = feats.get(pos + 8..pos + 8 + len).ok_or_else(|| bad("truncated feature blob"))?;
        sets.push(FeatureSet::from_blob(blob).map_err(|e| MappingError::Store(e.to_string()))?);
        pos += 8 + len;
    }
    if sets.len() != header.keyframes.len() + 1 {
        return Err(bad("feature set count does not match keyframes"));
    }
    let mut sets = sets.into_iter();
    let image_features = sets.next().unwrap();
    let keyframes = header
        .keyframes
        .into_iter()
        .zip(sets)
        .map(|(h, features)| Keyframe {
            id: h.id,
            frame_id: h.frame_id,
            pose: h.pose,
            features,
            dense: Vec::new(),
            stamp: h.stamp,
            local_map_id: Some(header.id),
        })
        .collect();
    Ok(LocalMap {
        id: header.id,
        keyframe_ids: header.keyframe_ids,
        keyframes,
        map_points: Vec::new(),
        image: Some(image),
        image_features,
        stamp: header.stamp,
        anchor_pose: header.anchor_pose,
    })
}

/// Append-only directory archive: `<root>/maps/<id>_<stamp>.lmz` plus
/// `<root>/manifest.json`. Files are written to a temporary name and
/// renamed into place.
#[derive(Debug)]
pub struct OfflineStore {
    root: PathBuf,
    entries: Vec<ArchiveEntry>,
    latest: BTreeMap<u64, usize>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

impl OfflineStore {
    pub fn open(root: impl AsRef<Path>) -> Result<Self, MappingError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(root.join("maps"))?;
        let manifest = root.join("manifest.json");
        let entries: Vec<ArchiveEntry> = if manifest.exists() {
            serde_json::from_slice(&fs::read(&manifest)?).map_err(|e| MappingError::Store(e.to_string()))?
        } else {
            Vec::new()
        };
        let latest = entries.iter().enumerate().map(|(i, e)| (e.id, i)).collect();
        Ok(Self { root, entries, latest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ArchiveEntry] {
        &self.entries
    }

    pub fn contains(&self, id: u64) -> bool {
        self.latest.contains_key(&id)
    }

    pub fn entry(&self, id: u64) -> Option<&ArchiveEntry> {
        self.latest.get(&id).map(|&i| &self.entries[i])
    }

    pub fn archive(&mut self, map: &LocalMap) -> Result<ArchiveEntry, MappingError> {
        let file = format!("{}_{:.6}.lmz", map.id, map.stamp);
        if self.entries.iter().any(|e| e.file == file) {
            return Err(MappingError::Store(format!("{file} already archived")));
        }
        let bytes = encode_local_map(map)?;
        write_atomic(&self.root.join("maps").join(&file), &bytes)?;
        let entry = ArchiveEntry {
            id: map.id,
            stamp: map.stamp,
            file,
            keyframe_ids: map.keyframe_ids.clone(),
            bytes: bytes.len() as u64,
        };
        self.entries.push(entry.clone());
        self.latest.insert(map.id, self.entries.len() - 1);
        let manifest = serde_json::to_vec_pretty(&self.entries).map_err(|e| MappingError::Store(e.to_string()))?;
        write_atomic(&self.root.join("manifest.json"), &manifest)?;
        Ok(entry)
    }

    pub fn load_bytes(&self, id: u64) -> Result<Vec<u8>, MappingError> {
        let e = self.entry(id).ok_or_else(|| MappingError::Store(format!("map {id} not archived")))?;
        Ok(fs::read(self.root.join("maps").join(&e.file))?)
    }

    pub fn load(&self, id: u64) -> Result<LocalMap, MappingError> {
        decode_local_map(&self.load_bytes(id)?)
    }
}
