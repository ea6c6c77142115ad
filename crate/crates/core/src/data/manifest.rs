//! JSON-lines dataset manifests and dense label re-indexing.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One manifest line. `path` is resolved relative to the manifest file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub id: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera: Option<i64>,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Source,
    Target,
}

/// A record after loading: dense identity/camera labels plus provenance.
#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub path: PathBuf,
    pub raw_id: i64,
    pub identity: usize,
    pub camera: Option<usize>,
    /// Original camera label, kept for cross-manifest comparisons at eval.
    pub raw_camera: Option<i64>,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<ImageRecord>,
    pub num_ids: usize,
    pub num_cameras: usize,
}

impl Dataset {
    /// Indices of records grouped per dense identity.
    pub fn by_identity(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_ids];
        for (i, r) in self.records.iter().enumerate() {
            groups[r.identity].push(i);
        }
        groups
    }
}

/// Loads a manifest, re-indexing identities (and cameras, when present) to
/// dense ranges. Source records must carry a camera label.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        if entry.split == Split::Source && entry.camera.is_none() {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                line: lineno + 1,
                msg: "source record missing camera field".into(),
            });
        }
        entries.push((lineno + 1, entry));
    }
    if entries.is_empty() {
        return Err(Error::validation(format!(
            "manifest {} has no records",
            path.display()
        )));
    }
    let mut seen_paths = BTreeSet::new();
    for (lineno, e) in &entries {
        if !seen_paths.insert(e.path.clone()) {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                line: *lineno,
                msg: format!("duplicate path entry {}", e.path),
            });
        }
    }
    // Dense re-indexing over sorted raw labels: a bijection, stable across runs.
    let ids: BTreeSet<i64> = entries.iter().map(|(_, e)| e.id).collect();
    let id_map: BTreeMap<i64, usize> = ids.iter().enumerate().map(|(i, &r)| (r, i)).collect();
    let cams: BTreeSet<i64> = entries.iter().filter_map(|(_, e)| e.camera).collect();
    let cam_map: BTreeMap<i64, usize> = cams.iter().enumerate().map(|(i, &r)| (r, i)).collect();
    let records = entries
        .into_iter()
        .map(|(_, e)| ImageRecord {
            path: base.join(&e.path),
            raw_id: e.id,
            identity: id_map[&e.id],
            camera: e.camera.map(|c| cam_map[&c]),
            raw_camera: e.camera,
            split: e.split,
        })
        .collect();
    Ok(Dataset {
        records,
        num_ids: id_map.len(),
        num_cameras: cam_map.len(),
    })
}

/// Writes entries as JSON lines.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e).expect("manifest entry serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Walks `<root>/<id>/<camera>_<seq>.<ext>` and builds manifest entries.
/// Returns the entries plus the filenames that did not match the layout.
pub fn scan_tree(root: &Path, split: Split) -> Result<(Vec<ManifestEntry>, Vec<PathBuf>)> {
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    let mut id_dirs: Vec<_> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|d| d.ok())
        .map(|d| d.path())
        .filter(|p| p.is_dir())
        .collect();
    id_dirs.sort();
    for dir in id_dirs {
        let Some(id) = dir
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.parse::<i64>().ok())
        else {
            skipped.push(dir.clone());
            continue;
        };
        let mut files: Vec<_> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|d| d.ok())
            .map(|d| d.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for file in files {
            let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or("");
            let camera = stem
                .split_once('_')
                .and_then(|(cam, _)| cam.parse::<i64>().ok());
            match camera {
                Some(camera) => entries.push(ManifestEntry {
                    path: file
                        .strip_prefix(root)
                        .unwrap_or(&file)
                        .to_string_lossy()
                        .into_owned(),
                    id,
                    camera: Some(camera),
                    split,
                }),
                None => skipped.push(file),
            }
        }
    }
    Ok((entries, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;
    use tempfile::tempdir;

    fn write_lines(dir: &Path, name: &str, lines: &[&str]) -> PathBuf {
        let p = dir.join(name);
        let mut f = fs::File::create(&p).unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        p
    }

    #[test]
    fn dense_reindexing() {
        let dir = tempdir().unwrap();
        let p = write_lines(
            dir.path(),
            "m.jsonl",
            &[
                r#"{"path":"a.png","id":7,"camera":1,"split":"source"}"#,
                r#"{"path":"b.png","id":7,"camera":2,"split":"source"}"#,
                r#"{"path":"c.png","id":42,"camera":1,"split":"source"}"#,
            ],
        );
        let ds = load_manifest(&p).unwrap();
        assert_eq!(ds.num_ids, 2);
        let ids: Vec<usize> = ds.records.iter().map(|r| r.identity).collect();
        assert_eq!(ids, vec![0, 0, 1]);
        assert_eq!(ds.num_cameras, 2);
    }

    #[test]
    fn empty_manifest_rejected() {
        let dir = tempdir().unwrap();
        let p = write_lines(dir.path(), "m.jsonl", &[]);
        let err = load_manifest(&p).unwrap_err();
        assert!(err.to_string().contains("no records"));
    }

    #[test]
    fn source_without_camera_names_the_line() {
        let dir = tempdir().unwrap();
        let p = write_lines(
            dir.path(),
            "m.jsonl",
            &[
                r#"{"path":"a.png","id":1,"camera":0,"split":"source"}"#,
                r#"{"path":"b.png","id":1,"split":"source"}"#,
            ],
        );
        let err = load_manifest(&p).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn target_may_omit_camera() {
        let dir = tempdir().unwrap();
        let p = write_lines(
            dir.path(),
            "m.jsonl",
            &[r#"{"path":"a.png","id":1,"split":"target"}"#],
        );
        let ds = load_manifest(&p).unwrap();
        assert_eq!(ds.records[0].camera, None);
    }

    #[test]
    fn duplicate_paths_rejected() {
        let dir = tempdir().unwrap();
        let p = write_lines(
            dir.path(),
            "m.jsonl",
            &[
                r#"{"path":"a.png","id":1,"camera":0,"split":"source"}"#,
                r#"{"path":"a.png","id":2,"camera":0,"split":"source"}"#,
            ],
        );
        assert!(load_manifest(&p).is_err());
    }

    #[test]
    fn scan_tree_layout() {
        let dir = tempdir().unwrap();
        fs::create_dir_all(dir.path().join("3")).unwrap();
        fs::create_dir_all(dir.path().join("11")).unwrap();
        fs::write(dir.path().join("3/0_000.png"), b"x").unwrap();
        fs::write(dir.path().join("3/1_000.png"), b"x").unwrap();
        fs::write(dir.path().join("11/0_002.png"), b"x").unwrap();
        fs::write(dir.path().join("11/readme.txt"), b"x").unwrap();
        let (entries, skipped) = scan_tree(dir.path(), Split::Source).unwrap();
        assert_eq!(entries.len(), 3);
        assert_eq!(skipped.len(), 1);
        assert!(entries.iter().any(|e| e.id == 11 && e.camera == Some(0)));
    }
}
