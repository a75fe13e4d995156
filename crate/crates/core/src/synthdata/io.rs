//! Dataset directory layout.
//!
//! ```text
//! manifest.tsv          index  label  bg_id  split_tag  has_mask
//! img/{index:06}.pwt    tensor "image", H×W×3
//! mask/{index:06}.pwt   tensors "fg" and "bg", H×W
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use super::{Sample, SplitTag};
use crate::error::{Error, Result};
use crate::mixture::MaskPair;
use crate::numerics::{read_tensor_file, write_tensor_file, Tensor};

pub const MANIFEST: &str = "manifest.tsv";
const HEADER: &str = "index\tlabel\tbg_id\tsplit_tag\thas_mask";

/// Samples of a dataset directory grouped by split, each in index order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetDir {
    pub train: Vec<Sample>,
    pub original: Vec<Sample>,
    pub m_same: Vec<Sample>,
    pub m_rand: Vec<Sample>,
}

impl DatasetDir {
    pub fn split(&self, tag: SplitTag) -> &[Sample] {
        match tag {
            SplitTag::Train => &self.train,
            SplitTag::Original => &self.original,
            SplitTag::MSame => &self.m_same,
            SplitTag::MRand => &self.m_rand,
        }
    }

    fn split_mut(&mut self, tag: SplitTag) -> &mut Vec<Sample> {
        match tag {
            SplitTag::Train => &mut self.train,
            SplitTag::Original => &mut self.original,
            SplitTag::MSame => &mut self.m_same,
            SplitTag::MRand => &mut self.m_rand,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.original.len() + self.m_same.len() + self.m_rand.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn file_name(index: usize) -> String {
    format!("{index:06}.pwt")
}

/// Writes samples in the given order, numbering them from 0.
pub fn write_dataset<'a>(dir: &Path, samples: impl IntoIterator<Item = &'a Sample>) -> Result<usize> {
    let img_dir = dir.join("img");
    let mask_dir = dir.join("mask");
    fs::create_dir_all(&img_dir)?;
    fs::create_dir_all(&mask_dir)?;
    let mut manifest = String::from(HEADER);
    manifest.push('\n');
    let mut count = 0;
    for (i, s) in samples.into_iter().enumerate() {
        manifest.push_str(&format!(
            "{i}\t{}\t{}\t{}\t{}\n",
            s.label,
            s.bg_id,
            s.split.name(),
            s.masks.is_some() as u8
        ));
        write_tensor_file(&img_dir.join(file_name(i)), &[("image", &s.image)])?;
        if let Some(m) = &s.masks {
            write_tensor_file(&mask_dir.join(file_name(i)), &[("fg", &m.fg), ("bg", &m.bg)])?;
        }
        count += 1;
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(count)
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn take(path: &Path, items: Vec<(String, Tensor)>, name: &str) -> Result<Tensor> {
    items
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| bad(path, format!("missing tensor `{name}`")))
}

pub fn read_dataset(dir: &Path) -> Result<DatasetDir> {
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path)?;
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(bad(&manifest_path, "unexpected header"));
    }
    let mut out = DatasetDir::default();
    for (lineno, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split('\t').collect();
        let field = |i: usize| -> Result<usize> {
            cols.get(i)
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| bad(&manifest_path, format!("line {}: bad column {i}", lineno + 2)))
        };
        if cols.len() != 5 {
            return Err(bad(&manifest_path, format!("line {}: expected 5 columns", lineno + 2)));
        }
        let index = field(0)?;
        let split = SplitTag::parse(cols[3])
            .ok_or_else(|| bad(&manifest_path, format!("line {}: unknown split", lineno + 2)))?;
        let img_path: PathBuf = dir.join("img").join(file_name(index));
        let image = take(&img_path, read_tensor_file(&img_path)?, "image")?;
        let masks = match field(4)? {
            0 => None,
            _ => {
                let p = dir.join("mask").join(file_name(index));
                let items = read_tensor_file(&p)?;
                let bg = take(&p, items.clone(), "bg")?;
                Some(MaskPair {
                    fg: take(&p, items, "fg")?,
                    bg,
                })
            }
        };
        out.split_mut(split).push(Sample {
            image,
            label: field(1)?,
            masks,
            bg_id: field(2)?,
            split,
            instance: index as u64,
        });
    }
    Ok(out)
}
