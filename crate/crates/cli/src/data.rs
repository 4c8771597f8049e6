//! Dataset ingestion: synthetic mixtures, CSV tables and IDX image files.

use std::path::Path;

use gradcal::gaussbench::{GaussianMixtureSpec, ToyDataset};
use gradcal::numkit::{LabeledBatch, Matrix, RngStream};

use crate::config::{CsvData, DataSource, IdxData, SyntheticData};
use crate::error::{CliError, Result};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Train/test pair plus the mixture it came from, when known.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: LabeledBatch,
    pub test: LabeledBatch,
    pub mixture: Option<GaussianMixtureSpec>,
}

pub fn load_dataset(source: &DataSource, seed: u64) -> Result<Dataset> {
    match source {
        DataSource::Synthetic(s) => synthetic(s, seed),
        DataSource::Csv(c) => load_csv_pair(c),
        DataSource::Idx(i) => load_idx_pair(i),
    }
}

/// Mixture means from fork 10 of the data seed, samples from fork 11.
pub fn synthetic(cfg: &SyntheticData, seed: u64) -> Result<Dataset> {
    let rng = RngStream::new(cfg.data_seed.unwrap_or(seed));
    let spec = match &cfg.means {
        Some(means) => GaussianMixtureSpec::isotropic(means.iter().map(|m| m.to_vec()).collect()),
        None => GaussianMixtureSpec::random(cfg.num_classes, &mut rng.fork(10)),
    }
    .map_err(|e| CliError::Config(e.to_string()))?;
    let toy = ToyDataset::generate(spec, cfg.train_per_class, cfg.test_per_class, &mut rng.fork(11))?;
    Ok(Dataset { train: toy.train, test: toy.test, mixture: Some(toy.spec) })
}

fn with_classes(rows: (Matrix, Vec<usize>), num_classes: usize, path: &Path) -> Result<LabeledBatch> {
    LabeledBatch::new(rows.0, rows.1, num_classes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn resolve_classes(explicit: Option<usize>, a: &[usize], b: &[usize]) -> usize {
    explicit.unwrap_or_else(|| a.iter().chain(b).max().map_or(0, |m| m + 1).max(2))
}

fn load_csv_pair(c: &CsvData) -> Result<Dataset> {
    let train = read_csv_rows(&c.train)?;
    let test = read_csv_rows(&c.test)?;
    if train.0.cols() != test.0.cols() {
        return Err(CliError::Data(format!(
            "{} has {} features but {} has {}",
            c.train.display(),
            train.0.cols(),
            c.test.display(),
            test.0.cols()
        )));
    }
    let k = resolve_classes(c.num_classes, &train.1, &test.1);
    Ok(Dataset { train: with_classes(train, k, &c.train)?, test: with_classes(test, k, &c.test)?, mixture: None })
}

fn load_idx_pair(i: &IdxData) -> Result<Dataset> {
    let train = read_idx_rows(&i.train_images, &i.train_labels)?;
    let test = read_idx_rows(&i.test_images, &i.test_labels)?;
    if train.0.cols() != test.0.cols() {
        return Err(CliError::Data("train and test images differ in size".into()));
    }
    let k = resolve_classes(i.num_classes, &train.1, &test.1);
    Ok(Dataset {
        train: with_classes(train, k, &i.train_images)?,
        test: with_classes(test, k, &i.test_images)?,
        mixture: None,
    })
}

/// Reads `f0,f1,…,label` rows; the class count is one past the largest label.
pub fn load_csv(path: &Path) -> Result<LabeledBatch> {
    let rows = read_csv_rows(path)?;
    let k = resolve_classes(None, &rows.1, &[]);
    with_classes(rows, k, path)
}

fn read_csv_rows(path: &Path) -> Result<(Matrix, Vec<usize>)> {
    let table = read_table(path)?;
    let d = table.header.len() - 1;
    for (j, name) in table.header.iter().enumerate() {
        let expected = if j == d { "label".to_string() } else { format!("f{j}") };
        if name.trim() != expected {
            return Err(CliError::Data(format!(
                "{}: header column {} is {name:?}, expected {expected:?}",
                path.display(),
                j + 1
            )));
        }
    }
    let mut data = Vec::with_capacity(table.rows.len() * d);
    let mut labels = Vec::with_capacity(table.rows.len());
    for (r, row) in table.rows.iter().enumerate() {
        for (j, cell) in row[..d].iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| cell_error(path, r, j, cell, "is not a number"))?;
            if !v.is_finite() {
                return Err(cell_error(path, r, j, cell, "is not finite"));
            }
            data.push(v);
        }
        let cell = &row[d];
        let label: usize =
            cell.trim().parse().map_err(|_| cell_error(path, r, d, cell, "is not a non-negative integer label"))?;
        labels.push(label);
    }
    Ok((Matrix::from_vec(labels.len(), d, data)?, labels))
}

fn cell_error(path: &Path, row: usize, col: usize, cell: &str, what: &str) -> CliError {
    CliError::Data(format!("{}: row {}, column {}: {cell:?} {what}", path.display(), row + 1, col + 1))
}

/// A parsed CSV: header plus rectangular string rows. Rows are numbered
/// from 1 after the header in error messages.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Values of a numeric column.
    pub fn numbers(&self, name: &str) -> Result<Vec<f64>> {
        let j = self.column(name).ok_or_else(|| CliError::Data(format!("no column {name:?}")))?;
        self.rows
            .iter()
            .enumerate()
            .map(|(r, row)| {
                row[j].parse().map_err(|_| CliError::Data(format!("row {}, column {name}: {:?} is not a number", r + 1, row[j])))
            })
            .collect()
    }
}

/// Header row, at least one data row, every row as wide as the header.
pub fn read_table(path: &Path) -> Result<Table> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    parse_table(file, &path.display().to_string())
}

pub fn parse_table(input: impl std::io::Read, name: &str) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(input);
    let mut records = reader.records();
    let header: Vec<String> = match records.next() {
        None => return Err(CliError::Data(format!("{name}: no data rows"))),
        Some(h) => h.map_err(|e| CliError::Data(format!("{name}: {e}")))?.iter().map(str::to_string).collect(),
    };
    if header.iter().all(|h| h.trim().is_empty()) {
        return Err(CliError::Data(format!("{name}: no data rows")));
    }
    let mut rows = Vec::new();
    for (r, record) in records.enumerate() {
        let record = record.map_err(|e| CliError::Data(format!("{name}: row {}: {e}", r + 1)))?;
        if record.len() == 1 && record[0].trim().is_empty() {
            continue;
        }
        if record.len() != header.len() {
            let col = record.len().min(header.len()) + 1;
            return Err(CliError::Data(format!(
                "{name}: row {}, column {col}: row has {} fields, header has {}",
                r + 1,
                record.len(),
                header.len()
            )));
        }
        rows.push(record.iter().map(str::to_string).collect());
    }
    if rows.is_empty() {
        return Err(CliError::Data(format!("{name}: no data rows")));
    }
    if header.len() < 2 {
        return Err(CliError::Data(format!("{name}: need at least one feature column and a label column")));
    }
    Ok(Table { header, rows })
}

/// Writes a batch in the format [`load_csv`] reads.
pub fn write_csv(batch: &LabeledBatch, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    let mut header: Vec<String> = (0..batch.input_dim()).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(|e| csv_io(path, e))?;
    for (r, &label) in batch.labels().iter().enumerate() {
        let mut record: Vec<String> = batch.features().row(r).iter().map(|v| format!("{v:?}")).collect();
        record.push(label.to_string());
        w.write_record(&record).map_err(|e| csv_io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub(crate) fn csv_io(path: &Path, e: csv::Error) -> CliError {
    CliError::io(path, std::io::Error::other(e.to_string()))
}

fn read_u32_be(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| {
            CliError::Data(format!("{}: truncated header at byte offset {offset} (file is {} bytes)", path.display(), bytes.len()))
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let magic = read_u32_be(bytes, 0, path)?;
    if magic != expected {
        return Err(CliError::Data(format!(
            "{}: bad magic 0x{magic:08x} at byte offset 0, expected 0x{expected:08x}",
            path.display()
        )));
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], offset: usize, len: usize, path: &Path) -> Result<&'a [u8]> {
    bytes.get(offset..offset + len).ok_or_else(|| {
        CliError::Data(format!(
            "{}: truncated payload: expected {len} bytes from byte offset {offset}, file ends at byte offset {}",
            path.display(),
            bytes.len()
        ))
    })
}

/// Parses an IDX image file (`0x803`, `n × rows × cols` unsigned bytes) and its
/// label file (`0x801`). Pixels are scaled to `[0, 1]` and flattened row-major.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledBatch> {
    let rows = read_idx_rows(images_path, labels_path)?;
    let k = resolve_classes(None, &rows.1, &[]);
    with_classes(rows, k, images_path)
}

fn read_idx_rows(images_path: &Path, labels_path: &Path) -> Result<(Matrix, Vec<usize>)> {
    let images = std::fs::read(images_path).map_err(|e| CliError::io(images_path, e))?;
    let labels = std::fs::read(labels_path).map_err(|e| CliError::io(labels_path, e))?;
    parse_idx(&images, images_path, &labels, labels_path)
}

pub fn parse_idx(images: &[u8], images_path: &Path, labels: &[u8], labels_path: &Path) -> Result<(Matrix, Vec<usize>)> {
    check_magic(images, IDX_IMAGES_MAGIC, images_path)?;
    let n = read_u32_be(images, 4, images_path)? as usize;
    let h = read_u32_be(images, 8, images_path)? as usize;
    let w = read_u32_be(images, 12, images_path)? as usize;
    check_magic(labels, IDX_LABELS_MAGIC, labels_path)?;
    let n_labels = read_u32_be(labels, 4, labels_path)? as usize;
    if n_labels != n {
        return Err(CliError::Data(format!(
            "{}: count {n_labels} at byte offset 4 does not match {n} images in {}",
            labels_path.display(),
            images_path.display()
        )));
    }
    if n == 0 {
        return Err(CliError::Data(format!("{}: no data rows", images_path.display())));
    }
    let d = h * w;
    let pixels = payload(images, 16, n * d, images_path)?;
    let label_bytes = payload(labels, 8, n, labels_path)?;
    let data = pixels.iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok((Matrix::from_vec(n, d, data)?, label_bytes.iter().map(|&b| usize::from(b)).collect()))
}
