use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{Label, Modality, PatientStudy};
use crate::error::{Error, Result};
use crate::image::{read_pgm, write_pgm};

/// `tag → relative path` pairs in file order; duplicates are kept so they
/// can be reported.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ImagePaths(pub Vec<(String, String)>);

impl Serialize for ImagePaths {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.0.len()))?;
        for (k, v) in &self.0 {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for ImagePaths {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = ImagePaths;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map from modality tag to image path")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<ImagePaths, A::Error> {
                let mut out = Vec::new();
                while let Some(entry) = map.next_entry::<String, String>()? {
                    out.push(entry);
                }
                Ok(ImagePaths(out))
            }
        }
        d.deserialize_map(V)
    }
}

/// One study record of the manifest file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub patient_id: String,
    pub group_marker: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age: Option<u32>,
    pub images: ImagePaths,
}

fn study_error(patient_id: &str, reason: impl Into<String>) -> Error {
    Error::Study {
        patient_id: patient_id.to_string(),
        reason: reason.into(),
    }
}

fn load_entry(entry: &ManifestEntry, base: &Path) -> Result<PatientStudy> {
    let id = &entry.patient_id;
    let label = Label::parse(&entry.label)
        .ok_or_else(|| study_error(id, format!("label `{}` is neither `ldh` nor `healthy`", entry.label)))?;
    let mut paths: [Option<&str>; 3] = [None; 3];
    for (tag, path) in &entry.images.0 {
        let m = Modality::from_tag(tag).ok_or_else(|| study_error(id, format!("unknown modality `{tag}`")))?;
        if paths[m as usize].replace(path).is_some() {
            return Err(study_error(id, format!("duplicate modality `{tag}`")));
        }
    }
    let mut images = Vec::with_capacity(3);
    for m in Modality::ALL {
        let rel = paths[m as usize].ok_or_else(|| study_error(id, format!("missing modality `{}`", m.tag())))?;
        let img = read_pgm(&base.join(rel)).map_err(|e| study_error(id, e.to_string()))?;
        images.push(img);
    }
    let study = PatientStudy {
        patient_id: id.clone(),
        group_marker: entry.group_marker.clone(),
        images: images.try_into().expect("three modalities"),
        label,
        age: entry.age,
    };
    study.size()?;
    Ok(study)
}

/// Reads a manifest and every image it references (paths relative to the
/// manifest's directory).
pub fn load_manifest(path: &Path) -> Result<Vec<PatientStudy>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut markers: HashMap<&str, &str> = HashMap::new();
    for e in &entries {
        if let Some(prev) = markers.insert(&e.patient_id, &e.group_marker) {
            if prev != e.group_marker {
                return Err(study_error(
                    &e.patient_id,
                    format!("group marker `{}` conflicts with `{prev}`", e.group_marker),
                ));
            }
        }
    }
    entries.iter().map(|e| load_entry(e, base)).collect()
}

/// Writes `manifest.json` plus one PGM per image under `dir/images/`.
pub fn write_manifest(dir: &Path, studies: &[PatientStudy], maxval: u16) -> Result<Vec<ManifestEntry>> {
    let images_dir = dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    let mut entries = Vec::with_capacity(studies.len());
    for (i, s) in studies.iter().enumerate() {
        let mut paths = Vec::with_capacity(3);
        for m in Modality::ALL {
            let rel = format!("images/{i:05}_{}.pgm", m.tag());
            write_pgm(&dir.join(&rel), s.image(m), maxval)?;
            paths.push((m.tag().to_string(), rel));
        }
        entries.push(ManifestEntry {
            patient_id: s.patient_id.clone(),
            group_marker: s.group_marker.clone(),
            label: s.label.as_str().to_string(),
            age: s.age,
            images: ImagePaths(paths),
        });
    }
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&entries)?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_phantom_sized;
    use crate::image::{encode_pgm, GrayImage};

    fn quantized(studies: &[PatientStudy]) -> Vec<PatientStudy> {
        let mut out = studies.to_vec();
        for s in &mut out {
            for img in &mut s.images {
                for p in &mut img.pixels {
                    *p = (*p * 255.0).round() / 255.0;
                }
            }
        }
        out
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let studies = generate_phantom_sized(4, 0.5, 3, 16).unwrap()[..2].to_vec();
        write_manifest(dir.path(), &studies, 255).unwrap();
        let loaded = load_manifest(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded, quantized(&studies));
        let again = tempfile::tempdir().unwrap();
        write_manifest(again.path(), &loaded, 255).unwrap();
        assert_eq!(load_manifest(&again.path().join("manifest.json")).unwrap(), loaded);
    }

    fn write_case(dir: &Path, images: &str, label: &str) -> std::path::PathBuf {
        let img = GrayImage::filled(2, 2, 0.5);
        fs::write(dir.join("a.pgm"), encode_pgm(&img, 255)).unwrap();
        let json = format!(
            r#"[{{"patient_id": "p7", "group_marker": "g7", "label": "{label}", "images": {{{images}}}}}]"#
        );
        let path = dir.join("m.json");
        fs::write(&path, json).unwrap();
        path
    }

    fn reason(path: &Path) -> String {
        match load_manifest(path) {
            Err(Error::Study { patient_id, reason }) => {
                assert_eq!(patient_id, "p7");
                reason
            }
            other => panic!("expected study error, got {other:?}"),
        }
    }

    #[test]
    fn rejects_invalid_studies() {
        let dir = tempfile::tempdir().unwrap();
        let all = r#""t1_sag": "a.pgm", "t2_sag": "a.pgm", "t2_ax": "a.pgm""#;
        assert_eq!(load_manifest(&write_case(dir.path(), all, "ldh")).unwrap().len(), 1);
        let p = write_case(dir.path(), r#""t1_sag": "a.pgm", "t2_sag": "a.pgm""#, "ldh");
        assert!(reason(&p).contains("t2_ax"));
        let p = write_case(dir.path(), &format!(r#"{all}, "t1_sag": "a.pgm""#), "ldh");
        assert!(reason(&p).contains("duplicate"));
        let p = write_case(dir.path(), all, "maybe");
        assert!(reason(&p).contains("maybe"));
        let p = write_case(dir.path(), r#""t1_sag": "a.pgm", "t2_sag": "a.pgm", "t2_ax": "nope.pgm""#, "ldh");
        reason(&p);
    }

    #[test]
    fn conflicting_markers_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let studies = generate_phantom_sized(4, 0.5, 3, 8).unwrap();
        let mut entries = write_manifest(dir.path(), &studies, 255).unwrap();
        entries[1].patient_id = entries[0].patient_id.clone();
        fs::write(dir.path().join("manifest.json"), serde_json::to_string(&entries).unwrap()).unwrap();
        assert!(matches!(load_manifest(&dir.path().join("manifest.json")), Err(Error::Study { .. })));
    }
}
