//! File formats of the pipeline: dataset CSVs with a manifest, the model
//! document, and the aggregate run report.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use koopman_ptc::analysis::StabilityReport;
use koopman_ptc::sysid::{CompanionRealization, KoopmanModel, SnapshotDataset, SplitTag};

/// Writes a dataset as `t,x1..xn,u` rows. The final state has no input, so
/// its `u` cell is a zero placeholder that readers ignore.
pub fn write_dataset_csv(path: &Path, ds: &SnapshotDataset, t0: f64) -> anyhow::Result<()> {
    let n = ds.state_dim();
    let mut out = String::new();
    out.push('t');
    for i in 1..=n {
        out.push_str(&format!(",x{i}"));
    }
    out.push_str(",u\n");
    for (k, x) in ds.states.iter().enumerate() {
        out.push_str(&format!("{}", t0 + k as f64 * ds.dt));
        for v in x.iter() {
            out.push_str(&format!(",{v}"));
        }
        let u = ds.inputs.get(k).copied().unwrap_or(0.0);
        out.push_str(&format!(",{u}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Parses a dataset CSV, reporting the offending line on malformed input.
pub fn read_dataset_csv(path: &Path, dt: f64, tag: SplitTag) -> anyhow::Result<SnapshotDataset> {
    let text = fs::read_to_string(path)
        .map_err(|e| anyhow::anyhow!("cannot read {}: {e}", path.display()))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| anyhow::anyhow!("{}: empty file", path.display()))?;
    let columns: Vec<&str> = header.split(',').collect();
    if columns.len() < 3 || columns[0] != "t" || columns[columns.len() - 1] != "u" {
        anyhow::bail!("{}:1: expected header t,x1..xn,u, got '{header}'", path.display());
    }
    let n = columns.len() - 2;

    let mut states = Vec::new();
    let mut inputs = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != n + 2 {
            anyhow::bail!(
                "{}:{line_no}: expected {} fields, found {}",
                path.display(),
                n + 2,
                cells.len()
            );
        }
        let parse = |cell: &str, what: &str| -> anyhow::Result<f64> {
            cell.trim().parse::<f64>().map_err(|_| {
                anyhow::anyhow!("{}:{line_no}: malformed {what} value '{cell}'", path.display())
            })
        };
        parse(cells[0], "time")?;
        let mut x = DVector::zeros(n);
        for i in 0..n {
            x[i] = parse(cells[1 + i], "state")?;
        }
        states.push(x);
        inputs.push(parse(cells[n + 1], "input")?);
    }
    if states.len() < 2 {
        anyhow::bail!("{}: needs at least two state rows", path.display());
    }
    inputs.pop(); // the last row's input cell is a placeholder
    Ok(SnapshotDataset::new(states, inputs, dt, tag)?)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub dt: f64,
    pub seed: u64,
    pub split_fraction: f64,
    pub state_dim: usize,
    pub train_states: usize,
    pub train_pairs: usize,
    pub validation_states: usize,
    pub validation_pairs: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelFile {
    pub koopman: KoopmanModel,
    pub companion: CompanionRealization,
}

/// Per-run entry of the aggregate report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub tag: String,
    pub initial_condition: Vec<f64>,
    pub aborted: Option<String>,
    pub stability: StabilityReport,
    pub max_abs_u: f64,
    pub max_theta_norm: f64,
    pub max_x_norm: f64,
    pub clamped_from: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AggregateReport {
    pub seed: u64,
    pub prescribed_time: f64,
    pub dt: f64,
    pub radius: f64,
    pub all_stayed: bool,
    pub any_aborted: bool,
    pub runs: Vec<RunReport>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut file = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut file, value)?;
    file.write_all(b"\n")?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| anyhow::anyhow!("cannot read {}: {e}", path.display()))?;
    serde_json::from_str(&text)
        .map_err(|e| anyhow::anyhow!("invalid JSON in {}: {e}", path.display()))
}
