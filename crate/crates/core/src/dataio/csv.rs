//! Directory format: `manifest.txt` naming one CSV per demonstration.
//!
//! Each CSV starts with `dim=<n>,dt=<dt>` followed by one row per sample with
//! `n` state fields and `n` velocity fields.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::diffcore::Matrix;
use crate::error::{Error, Result};

use super::{Dataset, Demonstration, DEFAULT_DT};

pub const MANIFEST: &str = "manifest.txt";

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, message: message.into() }
}

fn parse_header(path: &Path, line: &str) -> Result<(usize, f64)> {
    let mut dim = None;
    let mut dt = None;
    for field in line.split(',') {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| parse_err(path, 1, format!("expected key=value in header, got {field:?}")))?;
        match key.trim() {
            "dim" => {
                dim = Some(value.trim().parse::<usize>().map_err(|e| parse_err(path, 1, format!("dim: {e}")))?)
            }
            "dt" => dt = Some(value.trim().parse::<f64>().map_err(|e| parse_err(path, 1, format!("dt: {e}")))?),
            other => return Err(parse_err(path, 1, format!("unknown header key {other:?}"))),
        }
    }
    let dim = dim.ok_or_else(|| parse_err(path, 1, "header is missing dim"))?;
    if dim == 0 {
        return Err(parse_err(path, 1, "dim must be positive"));
    }
    Ok((dim, dt.unwrap_or(DEFAULT_DT)))
}

pub fn read_demonstration(path: &Path) -> Result<Demonstration> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let (n, dt) = parse_header(path, header)?;
    let mut states = Vec::new();
    let mut velocities = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 2 * n {
            return Err(parse_err(
                path,
                lineno,
                format!("expected {} fields, got {}", 2 * n, fields.len()),
            ));
        }
        for (k, f) in fields.iter().enumerate() {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|e| parse_err(path, lineno, format!("field {}: {e}", k + 1)))?;
            if k < n {
                states.push(v);
            } else {
                velocities.push(v);
            }
        }
    }
    let rows = states.len() / n;
    let states = Matrix::from_shape_vec((rows, n), states).expect("row-major samples");
    let velocities = Matrix::from_shape_vec((rows, n), velocities).expect("row-major samples");
    Demonstration::new(states, velocities, dt).map_err(|e| match e {
        Error::Dataset(msg) => parse_err(path, 0, msg),
        other => other,
    })
}

/// Writes every value with 17 significant digits so reading it back is exact.
pub fn write_demonstration(demo: &Demonstration, path: &Path) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "dim={},dt={:.16e}", demo.dim(), demo.dt).unwrap();
    for (x, v) in demo.states.rows().into_iter().zip(demo.velocities.rows()) {
        let fields: Vec<String> = x.iter().chain(v.iter()).map(|f| format!("{f:.16e}")).collect();
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let demos = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|name| read_demonstration(&dir.join(name)))
        .collect::<Result<Vec<_>>>()?;
    if demos.is_empty() {
        return Err(Error::Dataset(format!("{} lists no demonstrations", manifest.display())));
    }
    Dataset::new(demos)
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (d, demo) in ds.demos.iter().enumerate() {
        let name = format!("demo_{d:03}.csv");
        write_demonstration(demo, &dir.join(&name))?;
        manifest.push_str(&name);
        manifest.push('\n');
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic, SyntheticShape};

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(SyntheticShape::Spiral, 3, 57, 0.01, 11).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn thousand_sample_planar_demos() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(SyntheticShape::Sine, 2, 1000, 0.0, 1).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!((back.dim(), back.len()), (2, 2));
        assert!(back.demos.iter().all(|d| d.states.dim() == (1000, 2)));
    }

    #[test]
    fn mismatched_endpoints_fail() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.csv"), "dim=1,dt=0.1\n1,-1\n0,0\n").unwrap();
        fs::write(dir.path().join("b.csv"), "dim=1,dt=0.1\n1,-1\n0.5,0\n").unwrap();
        fs::write(dir.path().join(MANIFEST), "a.csv\nb.csv\n").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Dataset(_))));
    }

    #[test]
    fn empty_directory_fails() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dataset(dir.path()).is_err());
        fs::write(dir.path().join(MANIFEST), "\n").unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }

    #[test]
    fn malformed_rows_report_location() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.csv"), "dim=1,dt=0.1\n1,-1\n0,zero\n").unwrap();
        fs::write(dir.path().join(MANIFEST), "a.csv\n").unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Parse { path, line, .. }) => {
                assert!(path.ends_with("a.csv"));
                assert_eq!(line, 3);
            }
            other => panic!("unexpected {other:?}"),
        }
        fs::write(dir.path().join("a.csv"), "dim=2,dt=0.1\n1,-1\n").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn dt_defaults_when_absent() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        fs::write(&p, "dim=1\n1,-1\n0,0\n").unwrap();
        assert_eq!(read_demonstration(&p).unwrap().dt, DEFAULT_DT);
    }
}
