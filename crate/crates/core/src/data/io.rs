//! Dataset directory format.
//!
//! ```text
//! DIR/manifest.json
//! DIR/<subject>.f32      little-endian f32, row-major N×C×B
//! DIR/<subject>.labels   one byte per sample
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use face_diffcore::Tensor;
use serde::{Deserialize, Serialize};

use super::electrode::ElectrodeMap;
use super::features::FeatureSet;
use crate::error::{FaceError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    pub samples: usize,
    pub features: String,
    pub labels: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub num_classes: usize,
    pub bands: usize,
    /// Channel names in storage order.
    pub channels: Vec<String>,
    /// Optional electrode-map JSON, relative to the dataset directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub electrode_map: Option<String>,
    pub subjects: Vec<SubjectEntry>,
}

/// A loaded dataset: subjects plus the electrode layout of its channels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub subjects: Vec<FeatureSet>,
    pub electrodes: ElectrodeMap,
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| FaceError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| FaceError::json(&path, e))
}

/// Loads every subject listed in `DIR/manifest.json`.
pub fn load_features(dir: &Path) -> Result<Vec<FeatureSet>> {
    Ok(load_dataset(dir)?.subjects)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let m = read_manifest(dir)?;
    let (c, b) = (m.channels.len(), m.bands);
    if c == 0 || b == 0 || m.num_classes == 0 {
        return Err(FaceError::Load(format!(
            "manifest declares {c} channels, {b} bands, {} classes",
            m.num_classes
        )));
    }
    let base_map = match &m.electrode_map {
        Some(p) => ElectrodeMap::from_json_file(&dir.join(p))?,
        None if c == 62 => ElectrodeMap::standard_62(),
        None => ElectrodeMap::default_for(c)?,
    };
    let electrodes = base_map.for_channels(&m.channels)?;

    let mut subjects = Vec::with_capacity(m.subjects.len());
    for s in &m.subjects {
        let fpath = dir.join(&s.features);
        let raw = fs::read(&fpath).map_err(|e| FaceError::io(&fpath, e))?;
        let expect = s.samples * c * b * 4;
        if s.samples == 0 || raw.len() != expect {
            return Err(FaceError::Load(format!(
                "subject `{}`: {} holds {} bytes, manifest implies {expect}",
                s.id,
                fpath.display(),
                raw.len()
            )));
        }
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|ch| f32::from_le_bytes([ch[0], ch[1], ch[2], ch[3]]))
            .collect();
        let lpath = dir.join(&s.labels);
        let labels = fs::read(&lpath).map_err(|e| FaceError::io(&lpath, e))?;
        if labels.len() != s.samples {
            return Err(FaceError::Load(format!(
                "subject `{}`: {} labels for {} samples",
                s.id,
                labels.len(),
                s.samples
            )));
        }
        let tensor = Tensor::new(vec![s.samples, c, b], values)
            .map_err(|e| FaceError::Load(format!("subject `{}`: {e}", s.id)))?;
        subjects.push(FeatureSet::new(
            s.id.clone(),
            m.num_classes,
            tensor,
            labels.into_iter().map(usize::from).collect(),
        )?);
    }
    Ok(Dataset {
        subjects,
        electrodes,
    })
}

/// Writes subjects in the directory format read by [`load_dataset`].
pub fn save_dataset(dir: &Path, subjects: &[FeatureSet], electrodes: &ElectrodeMap) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| FaceError::io(dir, e))?;
    let first = subjects
        .first()
        .ok_or_else(|| FaceError::Precondition("no subjects to save".into()))?;
    if first.num_classes > 256 {
        return Err(FaceError::Precondition(
            "labels are stored as bytes; at most 256 classes".into(),
        ));
    }
    let mut entries = Vec::new();
    for s in subjects {
        if s.channels() != electrodes.len() || s.bands() != first.bands() {
            return Err(FaceError::Precondition(format!(
                "subject `{}` has {}×{} features, expected {}×{}",
                s.subject,
                s.channels(),
                s.bands(),
                electrodes.len(),
                first.bands()
            )));
        }
        let features = format!("{}.f32", s.subject);
        let labels = format!("{}.labels", s.subject);
        let bytes: Vec<u8> = s
            .features()
            .data()
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        write(&dir.join(&features), &bytes)?;
        let lb: Vec<u8> = s.labels().iter().map(|&l| l as u8).collect();
        write(&dir.join(&labels), &lb)?;
        entries.push(SubjectEntry {
            id: s.subject.clone(),
            samples: s.len(),
            features,
            labels,
        });
    }
    write(
        &dir.join("electrodes.json"),
        serde_json::to_string_pretty(electrodes)
            .expect("electrode map serializes")
            .as_bytes(),
    )?;
    let manifest = Manifest {
        num_classes: first.num_classes,
        bands: first.bands(),
        channels: electrodes.names(),
        electrode_map: Some("electrodes.json".into()),
        subjects: entries,
    };
    write(
        &dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)
            .expect("manifest serializes")
            .as_bytes(),
    )
}

fn write(path: &PathBuf, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| FaceError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_subject(dir: &Path, id: &str, n: usize, c: usize, b: usize, values: &[f32]) {
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.join(format!("{id}.f32")), bytes).unwrap();
        let labels: Vec<u8> = (0..n).map(|i| (i % 3) as u8).collect();
        fs::write(dir.join(format!("{id}.labels")), labels).unwrap();
        let _ = (c, b);
    }

    fn manifest(ids: &[&str], n: usize, channels: Vec<String>) -> Manifest {
        Manifest {
            num_classes: 3,
            bands: 5,
            channels,
            electrode_map: None,
            subjects: ids
                .iter()
                .map(|id| SubjectEntry {
                    id: id.to_string(),
                    samples: n,
                    features: format!("{id}.f32"),
                    labels: format!("{id}.labels"),
                })
                .collect(),
        }
    }

    #[test]
    fn loads_two_62_channel_subjects() {
        let dir = tempfile::tempdir().unwrap();
        let names = ElectrodeMap::standard_62().names();
        for id in ["a", "b"] {
            let values: Vec<f32> = (0..10 * 62 * 5).map(|i| i as f32 * 0.01).collect();
            write_subject(dir.path(), id, 10, 62, 5, &values);
        }
        let m = manifest(&["a", "b"], 10, names);
        fs::write(dir.path().join("manifest.json"), serde_json::to_string(&m).unwrap()).unwrap();
        let subjects = load_features(dir.path()).unwrap();
        assert_eq!(subjects.len(), 2);
        for s in &subjects {
            assert_eq!((s.len(), s.channels(), s.bands()), (10, 62, 5));
        }
        assert_eq!(subjects[1].sample(0)[3], 0.03);
    }

    #[test]
    fn empty_subject_list_is_not_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest(&[], 10, ElectrodeMap::standard_62().names());
        fs::write(dir.path().join("manifest.json"), serde_json::to_string(&m).unwrap()).unwrap();
        assert!(load_features(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn nan_is_reported_with_subject_and_offset() {
        let dir = tempfile::tempdir().unwrap();
        let mut values = vec![0.5f32; 4 * 62 * 5];
        values[77] = f32::NAN;
        write_subject(dir.path(), "s3", 4, 62, 5, &values);
        let m = manifest(&["s3"], 4, ElectrodeMap::standard_62().names());
        fs::write(dir.path().join("manifest.json"), serde_json::to_string(&m).unwrap()).unwrap();
        match load_features(dir.path()) {
            Err(FaceError::NonFinite { subject, offset }) => {
                assert_eq!(subject, "s3");
                assert_eq!(offset, 77);
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn size_mismatch_and_unknown_channels_fail() {
        let dir = tempfile::tempdir().unwrap();
        write_subject(dir.path(), "a", 4, 62, 5, &vec![0.0; 3 * 62 * 5]);
        let m = manifest(&["a"], 4, ElectrodeMap::standard_62().names());
        fs::write(dir.path().join("manifest.json"), serde_json::to_string(&m).unwrap()).unwrap();
        assert!(matches!(load_features(dir.path()), Err(FaceError::Load(_))));

        let mut names = ElectrodeMap::standard_62().names();
        names[5] = "NOPE".into();
        let m = manifest(&[], 4, names);
        fs::write(dir.path().join("manifest.json"), serde_json::to_string(&m).unwrap()).unwrap();
        assert!(matches!(load_features(dir.path()), Err(FaceError::Load(_))));
    }

    #[test]
    fn save_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let map = ElectrodeMap::default_for(4).unwrap();
        let t = Tensor::new(vec![3, 4, 2], (0..24).map(|i| i as f32 - 3.5).collect()).unwrap();
        let s = FeatureSet::new("x1", 2, t, vec![0, 1, 1]).unwrap();
        save_dataset(dir.path(), std::slice::from_ref(&s), &map).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.subjects, vec![s]);
        assert_eq!(ds.electrodes, map);
    }
}
