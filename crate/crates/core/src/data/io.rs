use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::PointCloud;
use crate::error::{Error, Result};

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn rows_to_cloud(path: &Path, rows: Vec<Vec<f64>>) -> Result<PointCloud> {
    let d = rows.first().map(|r| r.len()).ok_or_else(|| parse_err(path, 0, "no points"))?;
    let n = rows.len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let arr = Array2::from_shape_vec((n, d), flat).map_err(|e| Error::contract(e.to_string()))?;
    PointCloud::new(arr)
}

/// One point per line, coordinates separated by single spaces, 17
/// significant digits so that every value round-trips exactly.
pub fn save_xyz(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::with_capacity(cloud.len() * cloud.dim() * 25);
    for row in cloud.points().rows() {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(' ');
            }
            write!(out, "{v:.16e}").expect("writing to a string");
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Whitespace-separated coordinates, one point per line; blank lines and
/// lines starting with `#` are skipped.
pub fn load_xyz(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|_| parse_err(path, i + 1, format!("not a number: {tok:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if !(2..=3).contains(&row.len()) {
            return Err(parse_err(path, i + 1, format!("expected 2 or 3 coordinates, found {}", row.len())));
        }
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(parse_err(
                    path,
                    i + 1,
                    format!("expected {} coordinates like earlier lines, found {}", first.len(), row.len()),
                ));
            }
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(path, i + 1, "non-finite coordinate"));
        }
        rows.push(row);
    }
    rows_to_cloud(path, rows)
}

/// ASCII PLY with a single `vertex` element of `double` x/y(/z) properties.
pub fn save_ply(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    writeln!(out, "element vertex {}", cloud.len()).expect("writing to a string");
    for name in ["x", "y", "z"].iter().take(cloud.dim()) {
        writeln!(out, "property double {name}").expect("writing to a string");
    }
    out.push_str("end_header\n");
    for row in cloud.points().rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads ASCII PLY files whose only element is `vertex` with properties
/// `x`, `y` and optionally `z`, in that order.
pub fn load_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(parse_err(path, 1, "missing 'ply' magic")),
    }
    let mut count: Option<usize> = None;
    let mut props: Vec<String> = Vec::new();
    let mut header_done = false;
    for (i, line) in lines.by_ref() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "ascii", "1.0"] => {}
            ["format", ..] => return Err(parse_err(path, i + 1, "only 'format ascii 1.0' is supported")),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", "vertex", n] => {
                if count.is_some() {
                    return Err(parse_err(path, i + 1, "duplicate vertex element"));
                }
                count = Some(n.parse().map_err(|_| parse_err(path, i + 1, "bad vertex count"))?);
            }
            ["element", other, ..] => {
                return Err(parse_err(path, i + 1, format!("unsupported element '{other}'")));
            }
            ["property", ty, name] => {
                if !matches!(*ty, "float" | "double" | "float32" | "float64") {
                    return Err(parse_err(path, i + 1, format!("unsupported property type '{ty}'")));
                }
                props.push(name.to_string());
            }
            ["end_header"] => {
                header_done = true;
                break;
            }
            _ => return Err(parse_err(path, i + 1, format!("unrecognized header line: {line:?}"))),
        }
    }
    if !header_done {
        return Err(parse_err(path, 0, "missing end_header"));
    }
    let n = count.ok_or_else(|| parse_err(path, 0, "missing vertex element"))?;
    let d = props.len();
    let expected: Vec<&str> = ["x", "y", "z"].into_iter().take(d).collect();
    if !(2..=3).contains(&d) || props != expected {
        return Err(parse_err(path, 0, format!("vertex properties must be x, y[, z]; found {props:?}")));
    }
    let mut rows = Vec::with_capacity(n);
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        if rows.len() == n {
            return Err(parse_err(path, i + 1, "more vertex lines than declared"));
        }
        let row = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| parse_err(path, i + 1, format!("not a number: {t:?}"))))
            .collect::<Result<Vec<f64>>>()?;
        if row.len() != d {
            return Err(parse_err(path, i + 1, format!("expected {d} values, found {}", row.len())));
        }
        rows.push(row);
    }
    if rows.len() != n {
        return Err(parse_err(path, 0, format!("declared {n} vertices, found {}", rows.len())));
    }
    rows_to_cloud(path, rows)
}

/// Load by extension: `.ply` as PLY, anything else as XYZ.
pub fn load_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("ply") => load_ply(path),
        _ => load_xyz(path),
    }
}

/// Every `.xyz` file of a directory, sorted by file name.
pub fn load_xyz_dir(dir: impl AsRef<Path>) -> Result<Vec<(PathBuf, PointCloud)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("xyz"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let c = load_xyz(&p)?;
            Ok((p, c))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn xyz_round_trip_is_bit_exact() {
        let dir = tmp();
        let p = dir.path().join("a.xyz");
        let pts = ndarray::array![[0.1, -2.5e-300, 1.0 / 3.0], [f64::MAX, f64::MIN_POSITIVE, -0.0]];
        let c = PointCloud::new(pts).unwrap();
        save_xyz(&c, &p).unwrap();
        let back = load_xyz(&p).unwrap();
        for (a, b) in c.points().iter().zip(back.points().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn xyz_comments_and_blank_lines() {
        let dir = tmp();
        let p = dir.path().join("c.xyz");
        fs::write(&p, "# header\n\n1 2 3\n  # indented comment\n4.5 -6 7e-1\n\n").unwrap();
        let c = load_xyz(&p).unwrap();
        assert_eq!(c.points(), &ndarray::array![[1.0, 2.0, 3.0], [4.5, -6.0, 0.7]]);
    }

    #[test]
    fn xyz_errors_carry_line_numbers() {
        let dir = tmp();
        let p = dir.path().join("bad.xyz");
        fs::write(&p, "1 2 3\n# fine\n4 five 6\n").unwrap();
        match load_xyz(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        fs::write(&p, "1 2 3\n4 5\n").unwrap();
        assert!(matches!(load_xyz(&p), Err(Error::Parse { line: 2, .. })));
        fs::write(&p, "").unwrap();
        assert!(load_xyz(&p).is_err());
        fs::write(&p, "# only comments\n").unwrap();
        assert!(load_xyz(&p).is_err());
    }

    #[test]
    fn ply_round_trip() {
        let dir = tmp();
        let p = dir.path().join("a.ply");
        let c = PointCloud::new(ndarray::array![[0.25, 1.0 / 7.0], [-3.0, 1e-9]]).unwrap();
        save_ply(&c, &p).unwrap();
        let back = load_cloud(&p).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn ply_rejects_unsupported_content() {
        let dir = tmp();
        let p = dir.path().join("f.ply");
        fs::write(&p, "ply\nformat binary_little_endian 1.0\nend_header\n").unwrap();
        assert!(load_ply(&p).is_err());
        fs::write(
            &p,
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nelement face 0\nend_header\n0 0\n",
        )
        .unwrap();
        assert!(load_ply(&p).is_err());
        fs::write(&p, "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nend_header\n0 0\n").unwrap();
        assert!(load_ply(&p).is_err());
    }

    #[test]
    fn directory_listing_is_sorted() {
        let dir = tmp();
        for name in ["b.xyz", "a.xyz", "skip.txt"] {
            fs::write(dir.path().join(name), "1 2\n").unwrap();
        }
        let all = load_xyz_dir(dir.path()).unwrap();
        let names: Vec<_> = all.iter().map(|(p, _)| p.file_name().unwrap().to_str().unwrap().to_string()).collect();
        assert_eq!(names, ["a.xyz", "b.xyz"]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn xyz_round_trip_any_finite(vals in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO, 2..60)) {
            let n = vals.len() / 2;
            let pts = Array2::from_shape_vec((n, 2), vals[..2 * n].to_vec()).unwrap();
            let c = PointCloud::new(pts).unwrap();
            let dir = tmp();
            let p = dir.path().join("p.xyz");
            save_xyz(&c, &p).unwrap();
            let back = load_xyz(&p).unwrap();
            for (a, b) in c.points().iter().zip(back.points().iter()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
