//! Dataset ingestion: manifests, attributes, zero-shot splits, image
//! transforms, and the synthetic compositional benchmark.
//!
//! All on-disk formats are line-oriented UTF-8 with a leading `format=1`
//! line:
//!
//! * manifest — `key=value` header (`name`, `class_count`, `attribute_file`,
//!   `split_file`), then one `path<TAB>class_id` line per image;
//! * attribute table — `class_count` rows of whitespace-separated numbers;
//! * split — `train:` and `test:` lines of space-separated class ids.

mod attributes;
mod split;
mod synthetic;
mod transform;

pub use attributes::{normalize_attributes, AttributeMatrix};
pub use split::{apply_split, bundled_split, ClassView, SplitSpec, SplitViews};
pub use synthetic::{generate_synthetic, SyntheticOutput, SyntheticSpec};
pub use transform::{transform_image, ImageTensor, TransformMode, CROP_SIDE, RESIZE_SIDE};

use crate::error::{io_ingest, Result, ZfsError};
use ndarray::Array2;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

pub const FORMAT_LINE: &str = "format=1";

/// Known benchmark cardinalities: (classes, attribute dim).
pub fn known_dataset_dims(name: &str) -> Option<(usize, usize)> {
    match name {
        "cub" => Some((200, 312)),
        "awa2" => Some((50, 85)),
        "sun" => Some((717, 102)),
        _ => None,
    }
}

#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub name: String,
    pub class_count: usize,
    pub attribute_file: PathBuf,
    pub split_file: PathBuf,
    /// (relative image path, class id)
    pub image_index: Vec<(PathBuf, usize)>,
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<DatasetManifest> {
        let text = std::fs::read_to_string(path).map_err(|e| io_ingest(path, e))?;
        let root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let mut lines = text.lines();
        expect_format_line(lines.next(), path)?;

        let mut name = None;
        let mut class_count = None;
        let mut attribute_file = None;
        let mut split_file = None;
        let mut image_index = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            if let Some((p, c)) = line.split_once('\t') {
                let class_id: usize = c.trim().parse().map_err(|_| {
                    ZfsError::Schema(format!(
                        "{}:{}: bad class id '{c}'",
                        path.display(),
                        lineno + 2
                    ))
                })?;
                image_index.push((PathBuf::from(p), class_id));
            } else if let Some((k, v)) = line.split_once('=') {
                match k.trim() {
                    "name" => name = Some(v.trim().to_string()),
                    "class_count" => {
                        class_count = Some(v.trim().parse::<usize>().map_err(|_| {
                            ZfsError::Schema(format!("bad class_count '{v}'"))
                        })?)
                    }
                    "attribute_file" => attribute_file = Some(PathBuf::from(v.trim())),
                    "split_file" => split_file = Some(PathBuf::from(v.trim())),
                    other => {
                        return Err(ZfsError::Schema(format!(
                            "{}: unknown manifest key '{other}'",
                            path.display()
                        )))
                    }
                }
            } else {
                return Err(ZfsError::Schema(format!(
                    "{}:{}: expected key=value or path<TAB>class_id",
                    path.display(),
                    lineno + 2
                )));
            }
        }

        let missing = |what: &str| ZfsError::Schema(format!("{}: missing {what}", path.display()));
        Ok(DatasetManifest {
            name: name.ok_or_else(|| missing("name"))?,
            class_count: class_count.ok_or_else(|| missing("class_count"))?,
            attribute_file: attribute_file.ok_or_else(|| missing("attribute_file"))?,
            split_file: split_file.ok_or_else(|| missing("split_file"))?,
            image_index,
            root,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(FORMAT_LINE);
        out.push('\n');
        out.push_str(&format!("name={}\n", self.name));
        out.push_str(&format!("class_count={}\n", self.class_count));
        out.push_str(&format!(
            "attribute_file={}\n",
            self.attribute_file.display()
        ));
        out.push_str(&format!("split_file={}\n", self.split_file.display()));
        for (p, c) in &self.image_index {
            out.push_str(&format!("{}\t{}\n", p.display(), c));
        }
        std::fs::write(path, out).map_err(|e| io_ingest(path, e))
    }
}

pub(crate) fn expect_format_line(line: Option<&str>, path: &Path) -> Result<()> {
    match line {
        Some(l) if l.trim() == FORMAT_LINE => Ok(()),
        other => Err(ZfsError::Schema(format!(
            "{}: expected '{FORMAT_LINE}' header, got {:?}",
            path.display(),
            other
        ))),
    }
}

type CachedImage = Arc<Vec<u8>>; // RGB, RESIZE_SIDE x RESIZE_SIDE

/// Loaded dataset: image paths resolved, attribute table in memory, decoded
/// images cached lazily at the resize resolution.
pub struct DatasetHandle {
    pub name: String,
    pub class_count: usize,
    /// Absolute image paths with class labels.
    pub entries: Vec<(PathBuf, usize)>,
    pub raw_attributes: Array2<f32>,
    pub split_file: PathBuf,
    cache: RwLock<Vec<Option<CachedImage>>>,
}

/// Validate a manifest and open the dataset behind it. Images stay on disk
/// until first use.
pub fn load_dataset(manifest: &DatasetManifest) -> Result<DatasetHandle> {
    if manifest.image_index.is_empty() {
        return Err(ZfsError::Ingest(format!(
            "dataset '{}' lists no images",
            manifest.name
        )));
    }
    if manifest.class_count == 0 {
        return Err(ZfsError::Schema("class_count must be positive".into()));
    }
    for (p, c) in &manifest.image_index {
        if *c >= manifest.class_count {
            return Err(ZfsError::Schema(format!(
                "class id {c} out of range [0, {}) for image {}",
                manifest.class_count,
                p.display()
            )));
        }
    }

    let resolve = |p: &Path| -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            manifest.root.join(p)
        }
    };

    let entries: Vec<(PathBuf, usize)> = manifest
        .image_index
        .iter()
        .map(|(p, c)| (resolve(p), *c))
        .collect();
    for (p, _) in &entries {
        if !p.exists() {
            return Err(ZfsError::Ingest(format!(
                "image file missing: {}",
                p.display()
            )));
        }
    }

    let attr_path = resolve(&manifest.attribute_file);
    let raw_attributes = attributes::read_attribute_file(&attr_path)?;
    if raw_attributes.nrows() != manifest.class_count {
        return Err(ZfsError::Schema(format!(
            "attribute table has {} rows, expected class_count {}",
            raw_attributes.nrows(),
            manifest.class_count
        )));
    }
    if let Some((classes, dim)) = known_dataset_dims(&manifest.name) {
        if manifest.class_count != classes {
            return Err(ZfsError::Schema(format!(
                "dataset '{}' must have {classes} classes, manifest says {}",
                manifest.name, manifest.class_count
            )));
        }
        if raw_attributes.ncols() != dim {
            return Err(ZfsError::Schema(format!(
                "dataset '{}' attributes must be {dim}-dimensional, got {}",
                manifest.name,
                raw_attributes.ncols()
            )));
        }
    }

    let n = entries.len();
    Ok(DatasetHandle {
        name: manifest.name.clone(),
        class_count: manifest.class_count,
        entries,
        raw_attributes,
        split_file: resolve(&manifest.split_file),
        cache: RwLock::new(vec![None; n]),
    })
}

impl DatasetHandle {
    pub fn image_count(&self) -> usize {
        self.entries.len()
    }

    pub fn attribute_dim(&self) -> usize {
        self.raw_attributes.ncols()
    }

    pub fn label(&self, index: usize) -> usize {
        self.entries[index].1
    }

    /// Decoded image at the resize resolution, cached after first decode.
    pub fn image_resized(&self, index: usize) -> Result<CachedImage> {
        if let Some(img) = &self.cache.read().unwrap()[index] {
            return Ok(Arc::clone(img));
        }
        let path = &self.entries[index].0;
        let decoded = image::open(path)
            .map_err(|e| ZfsError::Ingest(format!("{}: {e}", path.display())))?;
        let rgb = transform::resize_to_grid(&decoded);
        let arc = Arc::new(rgb);
        self.cache.write().unwrap()[index] = Some(Arc::clone(&arc));
        Ok(arc)
    }

    /// Resolve, decode, resize, and crop one image.
    pub fn tensor(
        &self,
        index: usize,
        mode: transform::TransformMode,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<ImageTensor> {
        let img = self.image_resized(index)?;
        Ok(transform::crop_to_tensor(&img, mode, rng))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    pub(crate) fn write_png(path: &Path, side: u32, tint: u8) {
        let img = image::RgbImage::from_fn(side, side, |x, y| {
            image::Rgb([tint, (x % 256) as u8, (y % 256) as u8])
        });
        img.save(path).unwrap();
    }

    /// Fabricated dataset directory with the real file formats.
    pub(crate) fn fake_dataset(
        dir: &Path,
        name: &str,
        classes: usize,
        attr_dim: usize,
        images_per_class: usize,
    ) -> PathBuf {
        fs::create_dir_all(dir.join("images")).unwrap();
        // A handful of physical files shared across entries keeps the fake
        // dataset small while every path still resolves.
        for i in 0..4u8 {
            write_png(&dir.join(format!("images/{i}.png")), 16, i * 60);
        }
        let mut attr = String::from("format=1\n");
        for c in 0..classes {
            let row: Vec<String> = (0..attr_dim)
                .map(|j| format!("{:.4}", ((c * 31 + j * 7) % 23) as f32 / 23.0 + 0.01))
                .collect();
            attr.push_str(&row.join(" "));
            attr.push('\n');
        }
        fs::write(dir.join("attributes.txt"), attr).unwrap();

        let train: Vec<String> = (0..classes / 2).map(|c| c.to_string()).collect();
        let test: Vec<String> = (classes / 2..classes).map(|c| c.to_string()).collect();
        fs::write(
            dir.join("split.txt"),
            format!("format=1\ntrain: {}\ntest: {}\n", train.join(" "), test.join(" ")),
        )
        .unwrap();

        let mut man = format!(
            "format=1\nname={name}\nclass_count={classes}\nattribute_file=attributes.txt\nsplit_file=split.txt\n"
        );
        for c in 0..classes {
            for i in 0..images_per_class {
                man.push_str(&format!("images/{}.png\t{c}\n", (c + i) % 4));
            }
        }
        let mpath = dir.join("manifest.txt");
        fs::write(&mpath, man).unwrap();
        mpath
    }

    #[test]
    fn cub_shaped_dataset_loads_with_expected_counts() {
        let tmp = tempfile::tempdir().unwrap();
        // CUB cardinalities: 200 classes, 312-d attributes, 11,788 images.
        let dir = tmp.path();
        fs::create_dir_all(dir.join("images")).unwrap();
        for i in 0..4u8 {
            write_png(&dir.join(format!("images/{i}.png")), 16, i * 60);
        }
        let mut attr = String::from("format=1\n");
        for c in 0..200 {
            let row: Vec<String> = (0..312)
                .map(|j| format!("{}", ((c + j) % 10) as f32 / 10.0 + 0.05))
                .collect();
            attr.push_str(&row.join(" "));
            attr.push('\n');
        }
        fs::write(dir.join("attributes.txt"), attr).unwrap();
        fs::write(dir.join("split.txt"), "format=1\ntrain: 0\ntest: 1\n").unwrap();
        let mut man = String::from(
            "format=1\nname=cub\nclass_count=200\nattribute_file=attributes.txt\nsplit_file=split.txt\n",
        );
        for i in 0..11_788usize {
            man.push_str(&format!("images/{}.png\t{}\n", i % 4, i % 200));
        }
        let mpath = dir.join("manifest.txt");
        fs::write(&mpath, man).unwrap();

        let manifest = DatasetManifest::read(&mpath).unwrap();
        let handle = load_dataset(&manifest).unwrap();
        assert_eq!(handle.image_count(), 11_788);
        assert_eq!(handle.class_count, 200);
        assert_eq!(handle.attribute_dim(), 312);
    }

    #[test]
    fn empty_manifest_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let mpath = tmp.path().join("manifest.txt");
        fs::write(
            &mpath,
            "format=1\nname=x\nclass_count=3\nattribute_file=a\nsplit_file=s\n",
        )
        .unwrap();
        let manifest = DatasetManifest::read(&mpath).unwrap();
        assert!(matches!(
            load_dataset(&manifest).err(),
            Some(ZfsError::Ingest(_))
        ));
    }

    #[test]
    fn wrong_attribute_row_count_is_schema_error() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path();
        let mpath = fake_dataset(dir, "custom", 6, 10, 2);
        // Truncate the attribute file to 5 rows.
        let attrs = fs::read_to_string(dir.join("attributes.txt")).unwrap();
        let keep: Vec<&str> = attrs.lines().take(6).collect();
        fs::write(dir.join("attributes.txt"), keep.join("\n") + "\n").unwrap();
        let manifest = DatasetManifest::read(&mpath).unwrap();
        assert!(matches!(
            load_dataset(&manifest).err(),
            Some(ZfsError::Schema(_))
        ));
    }

    #[test]
    fn missing_image_file_is_ingest_error() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path();
        let mpath = fake_dataset(dir, "custom", 4, 6, 1);
        fs::remove_file(dir.join("images/1.png")).unwrap();
        let manifest = DatasetManifest::read(&mpath).unwrap();
        assert!(matches!(
            load_dataset(&manifest).err(),
            Some(ZfsError::Ingest(_))
        ));
    }

    #[test]
    fn manifest_roundtrip_is_byte_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path();
        let mpath = fake_dataset(dir, "custom", 4, 6, 2);
        let manifest = DatasetManifest::read(&mpath).unwrap();
        let copy = dir.join("copy.txt");
        manifest.write(&copy).unwrap();
        assert_eq!(
            fs::read_to_string(&mpath).unwrap(),
            fs::read_to_string(&copy).unwrap()
        );
    }
}
