use std::path::{Path, PathBuf};

use gradcal_cli::data::{load_csv, load_idx, write_csv};
use gradcal_cli::CliError;

fn idx_images(n: u32, h: u32, w: u32, pixels: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 8, 3];
    for v in [n, h, w] {
        b.extend_from_slice(&v.to_be_bytes());
    }
    b.extend_from_slice(pixels);
    b
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 8, 1];
    b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    b.extend_from_slice(labels);
    b
}

fn write(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, bytes).unwrap();
    p
}

fn data_err(e: CliError) -> String {
    assert_eq!(e.exit_code(), 2, "{e}");
    e.to_string()
}

#[test]
fn idx_fixture_is_scaled_and_flattened() {
    let dir = tempfile::tempdir().unwrap();
    let pixels: Vec<u8> = vec![0, 255, 51, 102, 0, 0, 0, 0, 255, 1, 2, 3, 4, 5, 6, 7, 8, 9];
    let images = write(dir.path(), "img", &idx_images(2, 3, 3, &pixels));
    let labels = write(dir.path(), "lbl", &idx_labels(&[1, 0]));
    let batch = load_idx(&images, &labels).unwrap();
    assert_eq!((batch.len(), batch.input_dim()), (2, 9));
    assert_eq!(batch.labels(), &[1, 0]);
    assert_eq!(batch.features().row(0)[..4], [0.0, 1.0, 0.2, 0.4]);
    assert_eq!(batch.features().get(1, 8), 9.0 / 255.0);
    assert!(batch.features().data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn idx_wrong_magic_points_at_offset_zero() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = idx_images(1, 1, 1, &[0]);
    bytes[3] = 0x02;
    let images = write(dir.path(), "img", &bytes);
    let labels = write(dir.path(), "lbl", &idx_labels(&[0]));
    let msg = data_err(load_idx(&images, &labels).unwrap_err());
    assert!(msg.contains("byte offset 0") && msg.contains("0x00000802"), "{msg}");
    // labels in the images slot
    let msg = data_err(load_idx(&labels, &labels).unwrap_err());
    assert!(msg.contains("byte offset 0"), "{msg}");
}

#[test]
fn idx_count_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let images = write(dir.path(), "img", &idx_images(2, 1, 2, &[1, 2, 3, 4]));
    let labels = write(dir.path(), "lbl", &idx_labels(&[0, 1, 1]));
    let msg = data_err(load_idx(&images, &labels).unwrap_err());
    assert!(msg.contains("byte offset 4") && msg.contains("does not match"), "{msg}");
}

#[test]
fn idx_truncation_names_the_offset() {
    let dir = tempfile::tempdir().unwrap();
    let images = write(dir.path(), "img", &idx_images(2, 2, 2, &[1, 2, 3, 4, 5]));
    let labels = write(dir.path(), "lbl", &idx_labels(&[0, 1]));
    let msg = data_err(load_idx(&images, &labels).unwrap_err());
    assert!(msg.contains("byte offset 16") && msg.contains("byte offset 21"), "{msg}");
    let short = write(dir.path(), "short", &[0, 0, 8, 3, 0, 0]);
    let msg = data_err(load_idx(&short, &labels).unwrap_err());
    assert!(msg.contains("byte offset 4"), "{msg}");
}

#[test]
fn csv_fixture_loads() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "d.csv", b"f0,f1,label\n0.5,-1,0\n2,3e-2,2\n1.25,0,1\n");
    let batch = load_csv(&p).unwrap();
    assert_eq!((batch.len(), batch.input_dim(), batch.num_classes()), (3, 2, 3));
    assert_eq!(batch.features().row(1), &[2.0, 0.03]);
    assert_eq!(batch.labels(), &[0, 2, 1]);
}

#[test]
fn csv_missing_label_reports_row_two() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "d.csv", b"f0,f1,label\n0.5,-1,0\n2,3\n1.25,0,1\n");
    let msg = data_err(load_csv(&p).unwrap_err());
    assert!(msg.contains("row 2") && msg.contains("column 3"), "{msg}");
}

#[test]
fn csv_bad_cells_report_row_and_column() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "a.csv", b"f0,f1,label\n0.5,x,0\n");
    let msg = data_err(load_csv(&p).unwrap_err());
    assert!(msg.contains("row 1, column 2"), "{msg}");
    let p = write(dir.path(), "b.csv", b"f0,f1,label\n0.5,1,0\n0.5,1,-1\n");
    let msg = data_err(load_csv(&p).unwrap_err());
    assert!(msg.contains("row 2, column 3"), "{msg}");
    let p = write(dir.path(), "c.csv", b"f0,f1,label\n0.5,1,0,9\n");
    assert!(data_err(load_csv(&p).unwrap_err()).contains("row 1"));
    let p = write(dir.path(), "d.csv", b"x,y,label\n0.5,1,0\n");
    assert!(data_err(load_csv(&p).unwrap_err()).contains("header"));
}

#[test]
fn empty_csv_has_no_data_rows() {
    let dir = tempfile::tempdir().unwrap();
    for (name, body) in [("e.csv", &b""[..]), ("h.csv", &b"f0,label\n"[..])] {
        let p = write(dir.path(), name, body);
        assert!(data_err(load_csv(&p).unwrap_err()).contains("no data rows"));
    }
}

#[test]
fn written_csv_reads_back_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "d.csv", b"f0,f1,label\n0.1,-1e-300,0\n0.30000000000000004,7,1\n");
    let batch = load_csv(&p).unwrap();
    let q = dir.path().join("e.csv");
    write_csv(&batch, &q).unwrap();
    assert_eq!(load_csv(&q).unwrap(), batch);
}
