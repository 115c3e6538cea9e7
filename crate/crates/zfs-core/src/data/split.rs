//! Disjoint zero-shot class splits.

use super::DatasetHandle;
use crate::error::{io_ingest, Result, ZfsError};
use std::collections::HashSet;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub train_classes: Vec<usize>,
    pub test_classes: Vec<usize>,
}

impl SplitSpec {
    pub fn new(mut train: Vec<usize>, mut test: Vec<usize>) -> Result<SplitSpec> {
        train.sort_unstable();
        train.dedup();
        test.sort_unstable();
        test.dedup();
        let train_set: HashSet<usize> = train.iter().copied().collect();
        if let Some(shared) = test.iter().find(|c| train_set.contains(c)) {
            return Err(ZfsError::SplitOverlap(format!(
                "class {shared} appears in both train and test"
            )));
        }
        Ok(SplitSpec {
            train_classes: train,
            test_classes: test,
        })
    }

    pub fn read(path: &Path) -> Result<SplitSpec> {
        let text = std::fs::read_to_string(path).map_err(|e| io_ingest(path, e))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<SplitSpec> {
        let mut lines = text.lines();
        super::expect_format_line(lines.next(), origin)?;
        let mut train = None;
        let mut test = None;
        for line in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, rest) = line.split_once(':').ok_or_else(|| {
                ZfsError::Schema(format!("{}: expected 'train:' or 'test:' lines", origin.display()))
            })?;
            let ids: std::result::Result<Vec<usize>, _> =
                rest.split_whitespace().map(str::parse::<usize>).collect();
            let ids = ids.map_err(|e| {
                ZfsError::Schema(format!("{}: bad class id ({e})", origin.display()))
            })?;
            match key.trim() {
                "train" => train = Some(ids),
                "test" => test = Some(ids),
                other => {
                    return Err(ZfsError::Schema(format!(
                        "{}: unknown split section '{other}'",
                        origin.display()
                    )))
                }
            }
        }
        let train = train
            .ok_or_else(|| ZfsError::Schema(format!("{}: missing train line", origin.display())))?;
        let test = test
            .ok_or_else(|| ZfsError::Schema(format!("{}: missing test line", origin.display())))?;
        SplitSpec::new(train, test)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| io_ingest(path, e))
    }

    pub fn to_text(&self) -> String {
        let join = |ids: &[usize]| {
            ids.iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        format!(
            "{}\ntrain: {}\ntest: {}\n",
            super::FORMAT_LINE,
            join(&self.train_classes),
            join(&self.test_classes)
        )
    }
}

/// Bundled reference splits carrying the Proposed Split class counts
/// (CUB 150/50, AwA2 40/10, SUN 645/72). Class membership is a fixed,
/// arbitrary assignment; substitute the official split files to reproduce
/// published numbers.
pub fn bundled_split(dataset: &str) -> Option<SplitSpec> {
    let text = match dataset {
        "cub" => include_str!("../../assets/splits/cub_ps.split"),
        "awa2" => include_str!("../../assets/splits/awa2_ps.split"),
        "sun" => include_str!("../../assets/splits/sun_ps.split"),
        _ => return None,
    };
    Some(SplitSpec::parse(text, Path::new("<bundled>")).expect("bundled split parses"))
}

/// Index of one side of a split: which images are visible and how global
/// class ids map to candidate-local labels.
#[derive(Clone, Debug)]
pub struct ClassView {
    /// Indices into the dataset's image list.
    pub image_indices: Vec<usize>,
    /// Sorted global class ids; position = local label.
    pub classes: Vec<usize>,
}

impl ClassView {
    pub fn local_label(&self, class_id: usize) -> Option<usize> {
        self.classes.binary_search(&class_id).ok()
    }

    pub fn contains_class(&self, class_id: usize) -> bool {
        self.local_label(class_id).is_some()
    }
}

#[derive(Clone, Debug)]
pub struct SplitViews {
    pub train: ClassView,
    pub test: ClassView,
}

/// Partition a dataset's images by split class membership.
pub fn apply_split(dataset: &DatasetHandle, split: &SplitSpec) -> Result<SplitViews> {
    for &c in split.train_classes.iter().chain(&split.test_classes) {
        if c >= dataset.class_count {
            return Err(ZfsError::Schema(format!(
                "split class {c} out of range [0, {})",
                dataset.class_count
            )));
        }
    }
    // SplitSpec construction guarantees disjointness; re-check here so views
    // built from hand-rolled specs cannot leak either.
    let train_set: HashSet<usize> = split.train_classes.iter().copied().collect();
    if let Some(shared) = split.test_classes.iter().find(|c| train_set.contains(c)) {
        return Err(ZfsError::SplitOverlap(format!(
            "class {shared} appears in both train and test"
        )));
    }

    let view_for = |classes: &[usize]| -> ClassView {
        let set: HashSet<usize> = classes.iter().copied().collect();
        let image_indices = dataset
            .entries
            .iter()
            .enumerate()
            .filter(|(_, (_, c))| set.contains(c))
            .map(|(i, _)| i)
            .collect();
        ClassView {
            image_indices,
            classes: classes.to_vec(),
        }
    };
    Ok(SplitViews {
        train: view_for(&split.train_classes),
        test: view_for(&split.test_classes),
    })
}
