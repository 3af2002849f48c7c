use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use super::tensor_file::read_tensor_file;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub(super) const TENSOR_EXT: &str = "dcnt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Base,
    Val,
    Novel,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Base, Split::Val, Split::Novel];

    pub fn name(self) -> &'static str {
        match self {
            Split::Base => "base",
            Split::Val => "val",
            Split::Novel => "novel",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Split::ALL.into_iter().find(|x| x.name() == s)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassEntry {
    pub name: String,
    pub split: Split,
    pub files: Vec<PathBuf>,
}

/// A validated dataset: classes sorted by name, files sorted per class.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub classes: Vec<ClassEntry>,
    pub image_shape: [usize; 3],
}

impl DatasetManifest {
    pub fn classes_in(&self, split: Split) -> impl Iterator<Item = &ClassEntry> {
        self.classes.iter().filter(move |c| c.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.classes_in(split).count()
    }
}

/// Images of some classes with labels `0..num_classes` in manifest order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledImages {
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Indices of the samples of each class.
    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes()];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }
}

fn data_err(path: &Path, line: usize, msg: impl fmt::Display) -> Error {
    Error::Data(format!("{}:{line}: {msg}", path.display()))
}

fn parse_shape(fields: &[&str], path: &Path, line: usize) -> Result<[usize; 3]> {
    let dims: Vec<usize> = fields
        .iter()
        .map(|f| f.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| data_err(path, line, format!("bad #shape directive: {e}")))?;
    match dims[..] {
        [h, w, c] if h > 0 && w > 0 && c > 0 => Ok([h, w, c]),
        _ => Err(data_err(path, line, "#shape needs three positive sizes")),
    }
}

/// Reads `root/manifest.tsv` (`class<TAB>split` per line, `#` comments, an
/// optional `#shape<TAB>H<TAB>W<TAB>C` directive) and the class directories
/// of tensor files it names. Every file is parsed and shape-checked.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<DatasetManifest> {
    let root = root.as_ref();
    let path = root.join(MANIFEST_FILE);
    if !root.is_dir() {
        return Err(Error::Data(format!(
            "dataset root {} does not exist",
            root.display()
        )));
    }
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            Error::Data(format!("no manifest: {} is missing", path.display()))
        }
        _ => Error::io(&path, e),
    })?;
    let mut declared = None;
    let mut splits: BTreeMap<String, Split> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if let Some(rest) = raw.strip_prefix("#shape") {
            let fields: Vec<&str> = rest.split('\t').filter(|f| !f.is_empty()).collect();
            declared = Some(parse_shape(&fields, &path, line)?);
            continue;
        }
        let content = raw.trim();
        if content.is_empty() || content.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = raw.split('\t').collect();
        let [name, split] = fields[..] else {
            return Err(data_err(&path, line, "expected `class<TAB>split`"));
        };
        let (name, split_name) = (name.trim(), split.trim());
        let split = Split::parse(split_name).ok_or_else(|| {
            data_err(
                &path,
                line,
                format!("unknown split `{split_name}` for class `{name}`"),
            )
        })?;
        if name.is_empty() || name.contains(['/', '\\']) || name == "." || name == ".." {
            return Err(data_err(&path, line, format!("bad class name `{name}`")));
        }
        if let Some(prev) = splits.insert(name.to_string(), split) {
            return Err(if prev == split {
                data_err(&path, line, format!("class `{name}` listed twice"))
            } else {
                data_err(
                    &path,
                    line,
                    format!("class `{name}` overlaps splits {prev} and {split}"),
                )
            });
        }
    }
    if splits.is_empty() {
        return Err(Error::Data(format!("{} lists no classes", path.display())));
    }

    let mut shape = declared;
    let mut classes = Vec::with_capacity(splits.len());
    for (name, split) in splits {
        let dir = root.join(&name);
        let entries = fs::read_dir(&dir).map_err(|e| {
            Error::Data(format!(
                "class `{name}`: cannot read {}: {e}",
                dir.display()
            ))
        })?;
        let mut files = Vec::new();
        for entry in entries {
            let p = entry.map_err(|e| Error::io(&dir, e))?.path();
            if p.extension().is_some_and(|x| x == TENSOR_EXT) {
                files.push(p);
            }
        }
        files.sort();
        if files.is_empty() {
            return Err(Error::Data(format!(
                "class `{name}` has no .{TENSOR_EXT} files"
            )));
        }
        for f in &files {
            let t = read_tensor_file(f).map_err(|e| Error::Data(format!("class `{name}`: {e}")))?;
            let [h, w, c] = t.shape()[..] else {
                return Err(Error::Data(format!(
                    "{}: expected an h x w x c image, got {:?}",
                    f.display(),
                    t.shape()
                )));
            };
            match shape {
                None => shape = Some([h, w, c]),
                Some(s) if s != [h, w, c] => {
                    return Err(Error::Data(format!(
                        "{}: shape {:?} does not match dataset shape {s:?}",
                        f.display(),
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        classes.push(ClassEntry { name, split, files });
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        classes,
        image_shape: shape.expect("at least one file"),
    })
}

/// Loads every image of the classes in `splits`, labelled in manifest order.
pub fn load_split(manifest: &DatasetManifest, splits: &[Split]) -> Result<LabeledImages> {
    let mut out = LabeledImages::default();
    for class in manifest
        .classes
        .iter()
        .filter(|c| splits.contains(&c.split))
    {
        let label = out.class_names.len();
        out.class_names.push(class.name.clone());
        for f in &class.files {
            out.images.push(read_tensor_file(f)?);
            out.labels.push(label);
        }
    }
    Ok(out)
}
