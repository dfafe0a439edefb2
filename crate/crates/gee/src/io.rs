//! Long-format CSV datasets with a JSON metadata sidecar.
//!
//! One row per observation, header `cluster,obs,y,x1,...,xp`; clusters in
//! filtration order with indices `1..n` and observations `1..m_i`. Lines
//! starting with `#` are comments and carry the run provenance.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use gee_core::linalg::Matrix;
use gee_core::model::{Cluster, Dataset, Link};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Sidecar metadata. Extra keys are ignored on read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n: usize,
    pub p: usize,
    pub m_max: usize,
    pub link: Link,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta0: Option<Vec<f64>>,
}

/// Sidecar path for a dataset: same stem, `.json` extension.
pub fn meta_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

pub fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `comments` as `# ` lines followed by the dataset rows.
pub fn write_dataset(path: &Path, dataset: &Dataset, comments: &[String]) -> Result<()> {
    let mut out = String::new();
    for c in comments {
        for line in c.lines() {
            out.push_str("# ");
            out.push_str(line);
            out.push('\n');
        }
    }
    out.push_str("cluster,obs,y");
    for k in 1..=dataset.p() {
        out.push_str(&format!(",x{k}"));
    }
    out.push('\n');
    for c in dataset.clusters() {
        for j in 0..c.size() {
            out.push_str(&format!("{},{},{}", c.index, j + 1, format_value(c.response[j])));
            for x in c.regressors.row(j) {
                out.push(',');
                out.push_str(&format_value(*x));
            }
            out.push('\n');
        }
    }
    write_file(path, out.as_bytes())
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let wrap = |source| CliError::Write {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(wrap)?;
    }
    let mut f = fs::File::create(path).map_err(wrap)?;
    f.write_all(bytes).map_err(wrap)
}

pub fn read_meta(path: &Path) -> Result<DatasetMeta> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::Parse {
        path: path.to_path_buf(),
        line: e.line() as u64,
        reason: e.to_string(),
    })
}

/// Reads a dataset and checks it against its metadata.
pub fn read_dataset(path: &Path, meta: &DatasetMeta) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|source| CliError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let parse_err = |line: u64, reason: String| CliError::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file);
    let header = reader
        .headers()
        .map_err(|e| parse_err(e.position().map_or(1, |p| p.line()), e.to_string()))?
        .clone();
    let header_line = reader.position().line().saturating_sub(1).max(1);
    let mut expected: Vec<String> = ["cluster", "obs", "y"].iter().map(|s| s.to_string()).collect();
    expected.extend((1..=meta.p).map(|k| format!("x{k}")));
    if header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(parse_err(
            header_line,
            format!("header must be `{}`", expected.join(",")),
        ));
    }

    let p = meta.p;
    let mut clusters: Vec<Cluster> = Vec::new();
    let mut y: Vec<f64> = Vec::new();
    let mut x: Vec<f64> = Vec::new();
    let mut current = 0usize;
    let mut current_line = 0u64;
    let finish = |index: usize, y: &mut Vec<f64>, x: &mut Vec<f64>, line: u64| -> Result<Cluster> {
        let m = y.len();
        let regs = Matrix::new(m, p, std::mem::take(x)).map_err(|e| parse_err(line, e.to_string()))?;
        Cluster::new(index, std::mem::take(y), regs).map_err(|e| parse_err(line, e.to_string()))
    };
    for record in reader.records() {
        let record =
            record.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 3 + p {
            return Err(parse_err(line, format!("expected {} fields, found {}", 3 + p, record.len())));
        }
        let int = |k: usize, name: &str| -> Result<usize> {
            record[k]
                .parse::<usize>()
                .map_err(|_| parse_err(line, format!("`{name}` must be a positive integer, got `{}`", &record[k])))
        };
        let num = |k: usize, name: &str| -> Result<f64> {
            let v = record[k]
                .parse::<f64>()
                .map_err(|_| parse_err(line, format!("`{name}` is not a number: `{}`", &record[k])))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(parse_err(line, format!("`{name}` is not finite")))
            }
        };
        let cluster = int(0, "cluster")?;
        let obs = int(1, "obs")?;
        if cluster != current {
            if cluster != current + 1 {
                return Err(parse_err(
                    line,
                    format!("cluster {cluster} follows {current}; indices must be consecutive from 1"),
                ));
            }
            if current > 0 {
                clusters.push(finish(current, &mut y, &mut x, current_line)?);
            }
            current = cluster;
        }
        if obs != y.len() + 1 {
            return Err(parse_err(
                line,
                format!("observation {obs} in cluster {cluster}; expected {}", y.len() + 1),
            ));
        }
        if obs > meta.m_max {
            return Err(parse_err(line, format!("cluster {cluster} exceeds m_max {}", meta.m_max)));
        }
        y.push(num(2, "y")?);
        for k in 0..p {
            x.push(num(3 + k, &format!("x{}", k + 1))?);
        }
        current_line = line;
    }
    if current > 0 {
        clusters.push(finish(current, &mut y, &mut x, current_line)?);
    }
    if clusters.len() != meta.n {
        return Err(CliError::config(
            "n",
            format!("metadata declares {} clusters, file has {}", meta.n, clusters.len()),
        ));
    }
    Dataset::new(clusters, p, meta.m_max).map_err(CliError::from)
}

#[cfg(test)]
mod tests {
    use super::*;
    use gee_core::simulation::{simulate_scenario, ScenarioConfig, SizeSchedule};

    fn meta_for(d: &Dataset) -> DatasetMeta {
        DatasetMeta {
            n: d.n(),
            p: d.p(),
            m_max: d.m_max(),
            link: Link::Log,
            beta0: None,
        }
    }

    #[test]
    fn round_trip() {
        let cfg = ScenarioConfig {
            n: 25,
            sizes: SizeSchedule::RandomInRange { min: 1, max: 3 },
            m_max: 3,
            ..ScenarioConfig::default()
        };
        let d = simulate_scenario(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write_dataset(&path, &d, &["a comment".into(), "two\nlines".into()]).unwrap();
        let back = read_dataset(&path, &meta_for(&d)).unwrap();
        assert_eq!(back, d);
    }

    fn parse(text: &str, meta: &DatasetMeta) -> Result<Dataset> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        fs::write(&path, text).unwrap();
        read_dataset(&path, meta)
    }

    #[test]
    fn errors_carry_line_numbers() {
        let meta = DatasetMeta {
            n: 2,
            p: 1,
            m_max: 2,
            link: Link::Identity,
            beta0: None,
        };
        let ok = "# c\ncluster,obs,y,x1\n1,1,0.5,1\n1,2,0.1,2\n2,1,3,4\n";
        assert_eq!(parse(ok, &meta).unwrap().n(), 2);
        let bad_num = "# c\ncluster,obs,y,x1\n1,1,0.5,1\n1,2,abc,2\n2,1,3,4\n";
        match parse(bad_num, &meta) {
            Err(CliError::Parse { line, reason, .. }) => {
                assert_eq!(line, 4);
                assert!(reason.contains("`y`"));
            }
            other => panic!("{other:?}"),
        }
        let gap = "cluster,obs,y,x1\n1,1,0.5,1\n3,1,3,4\n";
        assert!(matches!(parse(gap, &meta), Err(CliError::Parse { line: 3, .. })));
        let header = "cluster,obs,y,z\n1,1,0.5,1\n";
        assert!(matches!(parse(header, &meta), Err(CliError::Parse { line: 1, .. })));
        let too_big = "cluster,obs,y,x1\n1,1,0,1\n1,2,0,1\n1,3,0,1\n";
        assert!(matches!(parse(too_big, &meta), Err(CliError::Parse { line: 4, .. })));
        let short = "cluster,obs,y,x1\n1,1,0.5,1\n";
        assert!(matches!(parse(short, &meta), Err(CliError::Config { .. })));
    }
}
