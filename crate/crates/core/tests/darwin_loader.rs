use std::path::PathBuf;

use loramoe::data::{full_column_names, load_darwin, prepare, read_darwin, split_subjects, FULL_DIM};
use loramoe::Error;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn fixture_text(name: &str) -> String {
    std::fs::read_to_string(fixture(name)).unwrap()
}

#[test]
fn columns_are_put_in_canonical_order() {
    // the file lists features alphabetically within each task; every cell
    // encodes its row and canonical column as `row * 1000 + column + 0.5`
    let data = load_darwin(fixture("darwin_fixture.csv")).unwrap();
    assert_eq!(data.len(), 6);
    assert_eq!(data.dim(), FULL_DIM);
    assert_eq!(data.feature_names, full_column_names());
    assert_eq!(data.labels, vec![1, 0, 1, 0, 1, 0]);
    assert_eq!(data.subject_ids[2], "id_3");
    for r in 0..6 {
        for c in 0..FULL_DIM {
            assert_eq!(
                data.features.get(r, c),
                ((r + 1) * 1000 + c) as f64 + 0.5,
                "row {r} col {c}"
            );
        }
    }
}

#[test]
fn two_row_file() {
    let data = load_darwin(fixture("darwin_two_rows.csv")).unwrap();
    assert_eq!(data.labels, vec![1, 0]);
    assert_eq!(data.positives(), 1);
}

#[test]
fn bad_cell_reports_row_and_column() {
    let text = fixture_text("darwin_fixture.csv");
    let broken = text.replacen("3001.5", "abc", 1);
    match read_darwin(broken.as_bytes()) {
        Err(Error::Parse { row, column, .. }) => {
            assert_eq!(row, 3);
            assert_eq!(column, "air_time1");
        }
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn unknown_class_is_rejected() {
    let text = fixture_text("darwin_two_rows.csv");
    let broken = format!("{}X\n", text.trim_end().strip_suffix('H').unwrap());
    assert!(matches!(
        read_darwin(broken.as_bytes()),
        Err(Error::Parse { row: 2, .. })
    ));
}

#[test]
fn missing_column_is_named() {
    let text = fixture_text("darwin_two_rows.csv");
    let mut lines: Vec<Vec<&str>> = text.lines().map(|l| l.split(',').collect()).collect();
    let col = lines[0].iter().position(|&h| h == "pressure_var7").unwrap();
    for l in &mut lines {
        l.remove(col);
    }
    let cut = lines.iter().map(|l| l.join(",")).collect::<Vec<_>>().join("\n");
    match read_darwin(cut.as_bytes()) {
        Err(Error::MissingColumn(c)) => assert_eq!(c, "pressure_var7"),
        other => panic!("expected a missing column, got {other:?}"),
    }
}

#[test]
fn fixture_split_and_standardize() {
    let data = load_darwin(fixture("darwin_fixture.csv")).unwrap();
    let split = split_subjects(data.len(), 1).unwrap();
    assert_eq!((split.train.len(), split.test.len()), (5, 1));
    let tt = prepare(&data, &split).unwrap();
    for c in 0..FULL_DIM {
        let col: Vec<f64> = (0..5).map(|r| tt.train.features.get(r, c)).collect();
        let mean = col.iter().sum::<f64>() / 5.0;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }
}
