//! On-disk dataset layout:
//!
//! ```text
//! DIR/manifest.txt        key=value lines
//! DIR/images/NNNN.ppm
//! DIR/labels/NNNN.pgm
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::netpbm::{read_image, read_label, write_image, write_label};
use super::{generate_cells, Sample, CLASSES};
use crate::error::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.txt";
const FORMAT: &str = "tvseg-dataset-1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetConfig {
    pub train: usize,
    pub test: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            train: 60,
            test: 40,
            size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    /// Samples `0..train` form the training split, the rest the test split.
    pub fn generate(config: DatasetConfig) -> Result<Dataset> {
        if config.train == 0 || config.test == 0 {
            return Err(Error::InvalidConfig("both splits must be nonempty".into()));
        }
        let mut all = generate_cells(config.train + config.test, config.size, config.seed)?;
        let test = all.split_off(config.train);
        Ok(Dataset {
            config,
            train: all,
            test,
        })
    }
}

fn index_list(range: std::ops::Range<usize>) -> String {
    range
        .map(|k| format!("{k:04}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn manifest_text(cfg: &DatasetConfig) -> String {
    let mut s = String::new();
    let n = cfg.train + cfg.test;
    writeln!(s, "format={FORMAT}").unwrap();
    writeln!(s, "generator_seed={}", cfg.seed).unwrap();
    writeln!(s, "size={}", cfg.size).unwrap();
    writeln!(s, "classes={CLASSES}").unwrap();
    writeln!(s, "train={}", index_list(0..cfg.train)).unwrap();
    writeln!(s, "test={}", index_list(cfg.train..n)).unwrap();
    s
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    for sub in ["images", "labels"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for (k, s) in ds.train.iter().chain(&ds.test).enumerate() {
        write_image(&dir.join(format!("images/{k:04}.ppm")), &s.image)?;
        write_label(&dir.join(format!("labels/{k:04}.pgm")), &s.label)?;
    }
    let m = dir.join(MANIFEST_NAME);
    std::fs::write(&m, manifest_text(&ds.config)).map_err(|e| Error::io(&m, e))
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Manifest(format!("line {}: expected key=value", n + 1)))?;
        if map
            .insert(k.trim().to_string(), v.trim().to_string())
            .is_some()
        {
            return Err(Error::Manifest(format!(
                "line {}: duplicate key {k}",
                n + 1
            )));
        }
    }
    Ok(map)
}

fn get<'a>(m: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    m.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Manifest(format!("missing key {key}")))
}

fn parse_num<T: std::str::FromStr>(m: &BTreeMap<String, String>, key: &str) -> Result<T> {
    get(m, key)?
        .parse()
        .map_err(|_| Error::Manifest(format!("bad value for {key}")))
}

fn parse_indices(m: &BTreeMap<String, String>, key: &str) -> Result<Vec<usize>> {
    let v = get(m, key)?;
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::Manifest(format!("bad index {t:?} in {key}")))
        })
        .collect()
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m = parse_key_values(&text)?;
    if get(&m, "format")? != FORMAT {
        return Err(Error::Manifest(format!(
            "unknown format {}",
            get(&m, "format")?
        )));
    }
    let size: usize = parse_num(&m, "size")?;
    let classes: usize = parse_num(&m, "classes")?;
    let load = |idx: Vec<usize>| -> Result<Vec<Sample>> {
        idx.into_iter()
            .map(|k| {
                let image = read_image(&dir.join(format!("images/{k:04}.ppm")))?;
                let label = read_label(&dir.join(format!("labels/{k:04}.pgm")))?;
                if image.height() != size
                    || image.width() != size
                    || label.height() != size
                    || label.width() != size
                {
                    return Err(Error::Manifest(format!(
                        "sample {k:04} is not {size}x{size}"
                    )));
                }
                if label.max_label() as usize >= classes {
                    return Err(Error::Manifest(format!(
                        "sample {k:04} has label >= {classes}"
                    )));
                }
                Ok(Sample { image, label })
            })
            .collect()
    };
    let train = load(parse_indices(&m, "train")?)?;
    let test = load(parse_indices(&m, "test")?)?;
    Ok(Dataset {
        config: DatasetConfig {
            train: train.len(),
            test: test.len(),
            size,
            seed: parse_num(&m, "generator_seed")?,
        },
        train,
        test,
    })
}
