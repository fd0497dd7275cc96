use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image::Image;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub path: PathBuf,
    pub label: usize,
    pub split: Split,
    pub image: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub class_names: Vec<String>,
    pub items: Vec<Item>,
}

/// Explicit split listing that overrides directory inference.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub class_names: Vec<String>,
    pub train: Vec<ManifestEntry>,
    pub val: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Relative to the dataset root.
    pub path: PathBuf,
    pub label: usize,
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
        Some(ref e) if e == "ppm" || e == "png"
    )
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

impl Dataset {
    /// Load every image below `root`. Without a manifest, `root/{train,val,test}`
    /// must each hold one subdirectory per class; labels follow the sorted
    /// class-directory names of `train/`.
    pub fn load(root: &Path, manifest: Option<&Path>) -> Result<Self> {
        match manifest {
            Some(m) => Self::load_manifest(root, m),
            None => Self::load_dirs(root),
        }
    }

    fn load_dirs(root: &Path) -> Result<Self> {
        for split in Split::ALL {
            let dir = root.join(split.dir_name());
            if !dir.is_dir() {
                return Err(Error::MissingSplit(dir));
            }
        }
        let class_names: Vec<String> = sorted_entries(&root.join("train"))?
            .into_iter()
            .filter(|p| p.is_dir())
            .filter_map(|p| p.file_name().and_then(|n| n.to_str()).map(String::from))
            .collect();
        if class_names.is_empty() {
            return Err(Error::EmptyClass(root.join("train")));
        }
        let mut items = Vec::new();
        for split in Split::ALL {
            let split_dir = root.join(split.dir_name());
            for (label, class) in class_names.iter().enumerate() {
                let dir = split_dir.join(class);
                if !dir.is_dir() {
                    return Err(Error::EmptyClass(dir));
                }
                let files: Vec<PathBuf> = sorted_entries(&dir)?
                    .into_iter()
                    .filter(|p| p.is_file() && is_image(p))
                    .collect();
                if files.is_empty() {
                    return Err(Error::EmptyClass(dir));
                }
                for path in files {
                    let image = Image::load(&path)?;
                    items.push(Item {
                        path,
                        label,
                        split,
                        image,
                    });
                }
            }
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            class_names,
            items,
        })
    }

    fn load_manifest(root: &Path, manifest: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        let classes = m.class_names.len();
        let mut items = Vec::new();
        for (split, entries) in [(Split::Train, &m.train), (Split::Val, &m.val), (Split::Test, &m.test)] {
            if entries.is_empty() {
                return Err(Error::MissingSplit(root.join(split.dir_name())));
            }
            for e in entries {
                if e.label >= classes {
                    return Err(Error::InvalidParameter(format!(
                        "manifest label {} for {} exceeds {classes} classes",
                        e.label,
                        e.path.display()
                    )));
                }
                let path = root.join(&e.path);
                let image = Image::load(&path)?;
                items.push(Item {
                    path,
                    label: e.label,
                    split,
                    image,
                });
            }
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            class_names: m.class_names,
            items,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn split(&self, split: Split) -> Vec<&Item> {
        self.items.iter().filter(|i| i.split == split).collect()
    }

    pub fn count(&self, split: Split, label: usize) -> usize {
        self.items
            .iter()
            .filter(|i| i.split == split && i.label == label)
            .count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{gen_synthetic, SplitCounts};

    #[test]
    fn synthetic_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let counts = SplitCounts { train: 6, val: 4, test: 2 };
        gen_synthetic(dir.path(), counts, 16, 1).unwrap();
        let ds = Dataset::load(dir.path(), None).unwrap();
        assert_eq!(ds.class_names, vec!["0_mouth", "1_eye"]);
        assert_eq!(ds.split(Split::Train).len(), 6);
        assert_eq!(ds.count(Split::Val, 0), 2);
        assert_eq!(ds.count(Split::Test, 1), 1);
        let paths: Vec<_> = ds.items.iter().map(|i| &i.path).collect();
        let mut sorted_within = paths.clone();
        sorted_within.dedup();
        assert_eq!(paths.len(), sorted_within.len());
    }

    #[test]
    fn missing_split() {
        let dir = tempfile::tempdir().unwrap();
        gen_synthetic(dir.path(), SplitCounts { train: 2, val: 2, test: 2 }, 8, 1).unwrap();
        std::fs::remove_dir_all(dir.path().join("test")).unwrap();
        match Dataset::load(dir.path(), None) {
            Err(Error::MissingSplit(p)) => assert!(p.ends_with("test")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_class() {
        let dir = tempfile::tempdir().unwrap();
        gen_synthetic(dir.path(), SplitCounts { train: 2, val: 2, test: 2 }, 8, 1).unwrap();
        let class_dir = dir.path().join("val").join("1_eye");
        for f in std::fs::read_dir(&class_dir).unwrap() {
            std::fs::remove_file(f.unwrap().path()).unwrap();
        }
        assert!(matches!(Dataset::load(dir.path(), None), Err(Error::EmptyClass(_))));
    }

    #[test]
    fn manifest_overrides_directories() {
        let dir = tempfile::tempdir().unwrap();
        gen_synthetic(dir.path(), SplitCounts { train: 2, val: 2, test: 2 }, 8, 1).unwrap();
        let manifest = serde_json::json!({
            "class_names": ["a", "b"],
            "train": [{"path": "train/0_mouth/img_00000.ppm", "label": 1}],
            "val": [{"path": "val/0_mouth/img_00000.ppm", "label": 0}],
            "test": [{"path": "test/1_eye/img_00001.ppm", "label": 0}],
        });
        let mpath = dir.path().join("manifest.json");
        std::fs::write(&mpath, manifest.to_string()).unwrap();
        let ds = Dataset::load(dir.path(), Some(&mpath)).unwrap();
        assert_eq!(ds.items.len(), 3);
        assert_eq!(ds.items[0].label, 1);
        assert_eq!(ds.class_names, vec!["a", "b"]);
    }
}
