//! File formats.
//!
//! * Study CSV: header `y,x1..xp,z1..zq`, one subject per row.
//! * Manifest (JSON): the study CSV files of one collection, paths relative
//!   to the manifest.
//! * Everything else (truth, fitted models, configs) is JSON via serde.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::{Study, StudyCollection};
use crate::error::{PsmError, Result, ResultExt};

pub const MANIFEST_VERSION: u32 = 1;

pub fn write_study_csv(path: &Path, study: &Study) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let header: Vec<String> = std::iter::once("y".to_string())
        .chain((1..=study.p()).map(|j| format!("x{j}")))
        .chain((1..=study.q()).map(|j| format!("z{j}")))
        .collect();
    w.write_record(&header)?;
    for i in 0..study.n() {
        let rec: Vec<String> = std::iter::once(study.y[i])
            .chain(study.x.row(i).iter().copied())
            .chain(study.z.row(i).iter().copied())
            .map(|v| v.to_string())
            .collect();
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn column_index(name: &str, prefix: char) -> Option<usize> {
    name.strip_prefix(prefix)?.parse().ok()
}

/// Reads a study CSV. Columns must be `y`, then `x1..xp`, then `z1..zq`
/// (`q` may be zero).
pub fn read_study_csv(path: &Path, study_id: usize) -> Result<Study> {
    let ctx = || format!("reading {}", path.display());
    let mut rdr = csv::Reader::from_path(path).with_context(ctx)?;
    let header = rdr.headers().with_context(ctx)?.clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    if names.first() != Some(&"y") {
        return Err(PsmError::Format(format!("{}: first column must be y", path.display())));
    }
    let p = names[1..].iter().take_while(|n| n.starts_with('x')).count();
    let q = names.len() - 1 - p;
    for (j, n) in names[1..=p].iter().enumerate() {
        if column_index(n, 'x') != Some(j + 1) {
            return Err(PsmError::Format(format!(
                "{}: expected column x{}, found {n}",
                path.display(),
                j + 1
            )));
        }
    }
    for (j, n) in names[p + 1..].iter().enumerate() {
        if column_index(n, 'z') != Some(j + 1) {
            return Err(PsmError::Format(format!(
                "{}: expected column z{}, found {n}",
                path.display(),
                j + 1
            )));
        }
    }
    let mut values = Vec::new();
    let mut n = 0;
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.with_context(ctx)?;
        for field in rec.iter() {
            let v: f64 = field.trim().parse().map_err(|_| {
                PsmError::Format(format!("{}: row {}: cannot parse {field:?}", path.display(), line + 2))
            })?;
            values.push(v);
        }
        n += 1;
    }
    let width = 1 + p + q;
    let all = DMatrix::from_row_slice(n, width, &values);
    let y = DVector::from_iterator(n, all.column(0).iter().copied());
    let x = all.columns(1, p).into_owned();
    let z = all.columns(1 + p, q).into_owned();
    Study::new(study_id, y, x, z).with_context(ctx)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub target: PathBuf,
    #[serde(default)]
    pub sources: Vec<PathBuf>,
    /// Ground-truth sidecar, when the data are simulated.
    #[serde(default)]
    pub truth: Option<PathBuf>,
}

impl Manifest {
    pub fn new(target: PathBuf, sources: Vec<PathBuf>, truth: Option<PathBuf>) -> Self {
        Manifest {
            version: MANIFEST_VERSION,
            target,
            sources,
            truth,
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let m: Manifest = read_json(path)?;
        if m.version != MANIFEST_VERSION {
            return Err(PsmError::Format(format!(
                "{}: manifest version {} is not supported (expected {MANIFEST_VERSION})",
                path.display(),
                m.version
            )));
        }
        Ok(m)
    }

    fn resolve(base: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }

    /// Loads the collection; relative paths are taken from `manifest_dir`.
    pub fn load(&self, manifest_dir: &Path) -> Result<StudyCollection> {
        let target = read_study_csv(&Self::resolve(manifest_dir, &self.target), 0)?;
        let sources = self
            .sources
            .iter()
            .enumerate()
            .map(|(k, p)| read_study_csv(&Self::resolve(manifest_dir, p), k + 1))
            .collect::<Result<Vec<_>>>()?;
        StudyCollection::new(target, sources)
    }

    pub fn truth_path(&self, manifest_dir: &Path) -> Option<PathBuf> {
        self.truth.as_ref().map(|p| Self::resolve(manifest_dir, p))
    }
}

/// Reads a manifest file and the collection it lists.
pub fn load_collection(manifest_path: &Path) -> Result<StudyCollection> {
    let m = Manifest::read(manifest_path)?;
    m.load(manifest_path.parent().unwrap_or(Path::new(".")))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let r = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    serde_json::from_reader(r).map_err(|e| PsmError::Format(format!("{}: {e}", path.display())))
}
