//! Artifact writers and readers. CSV files start with `#` comment lines
//! carrying the config hash and seed, followed by a header row.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vbsens::models::{Site, SiteData};
use vbsens::sampling::SampleSet;

use crate::error::CliError;

/// Identifies the config and root seed an artifact came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

pub fn write_csv<I>(path: &Path, prov: &Provenance, header: &[&str], rows: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut file = File::create(path)?;
    writeln!(file, "# config_hash={}", prov.config_hash)?;
    writeln!(file, "# seed={}", prov.seed)?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn csv_reader(path: &Path) -> Result<csv::Reader<File>, CliError> {
    let file = File::open(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    Ok(csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Shortest round-trip decimal; `NaN` for missing values.
pub fn num(x: f64) -> String {
    format!("{x}")
}

#[derive(Debug, Serialize, Deserialize)]
struct SiteRow {
    site: usize,
    #[serde(rename = "T")]
    treated: u8,
    y: f64,
}

/// One row per unit: 1-based site index, treatment indicator, outcome.
pub fn write_site_data(path: &Path, prov: &Provenance, data: &SiteData) -> Result<(), CliError> {
    let rows = data.sites.iter().enumerate().flat_map(|(k, s)| {
        s.treatment
            .iter()
            .zip(&s.profit)
            .map(move |(&t, &y)| vec![(k + 1).to_string(), u8::from(t).to_string(), num(y)])
    });
    write_csv(path, prov, &["site", "T", "y"], rows)
}

pub fn read_site_data(path: &Path) -> Result<SiteData, CliError> {
    let mut sites: Vec<Site> = Vec::new();
    for row in csv_reader(path)?.deserialize() {
        let row: SiteRow = row?;
        if row.site == 0 || row.treated > 1 {
            return Err(CliError::Config(format!("bad site row {row:?} in {}", path.display())));
        }
        if sites.len() < row.site {
            sites.resize_with(row.site, || Site { treatment: Vec::new(), profit: Vec::new() });
        }
        sites[row.site - 1].treatment.push(row.treated == 1);
        sites[row.site - 1].profit.push(row.y);
    }
    if sites.iter().any(|s| s.is_empty()) {
        return Err(CliError::Config(format!("site indices in {} are not contiguous", path.display())));
    }
    Ok(SiteData { sites })
}

/// JSON sidecar written next to a sample CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSidecar {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub sampler_seed: u64,
    pub acceptance_rate: f64,
    pub draws: usize,
    pub columns: Vec<String>,
    pub prior_coords: Vec<usize>,
}

/// Columnar CSV (one θ component per column, then the log posterior) plus sidecar.
pub fn write_sample_set(
    csv_path: &Path,
    sidecar_path: &Path,
    prov: &Provenance,
    names: &[String],
    samples: &SampleSet,
) -> Result<(), CliError> {
    let mut header: Vec<&str> = names.iter().map(String::as_str).collect();
    header.push("log_posterior");
    let rows = samples.draws.iter().zip(&samples.log_posterior_values).map(|(t, lp)| {
        let mut row: Vec<String> = t.iter().map(|&v| num(v)).collect();
        row.push(num(*lp));
        row
    });
    write_csv(csv_path, prov, &header, rows)?;
    write_json(
        sidecar_path,
        &SampleSidecar {
            provenance: prov.clone(),
            sampler_seed: samples.seed,
            acceptance_rate: samples.acceptance_rate,
            draws: samples.len(),
            columns: names.to_vec(),
            prior_coords: samples.prior_coords.clone(),
        },
    )
}

pub fn read_sample_set(csv_path: &Path, sidecar_path: &Path) -> Result<SampleSet, CliError> {
    let sidecar: SampleSidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path)?)?;
    let mut draws = Vec::new();
    let mut log_posterior_values = Vec::new();
    for record in csv_reader(csv_path)?.records() {
        let record = record?;
        let values: Vec<f64> = record
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| CliError::Config(format!("bad number {s:?}: {e}"))))
            .collect::<Result<_, _>>()?;
        let (theta, lp) = values.split_at(values.len() - 1);
        draws.push(theta.to_vec());
        log_posterior_values.push(lp[0]);
    }
    if draws.len() != sidecar.draws {
        return Err(CliError::Config(format!("sidecar lists {} draws, CSV has {}", sidecar.draws, draws.len())));
    }
    Ok(SampleSet {
        draws,
        log_posterior_values,
        seed: sidecar.sampler_seed,
        acceptance_rate: sidecar.acceptance_rate,
        prior_coords: sidecar.prior_coords,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prov() -> Provenance {
        Provenance { config_hash: "ab".repeat(32), seed: 9 }
    }

    #[test]
    fn site_data_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let data = SiteData {
            sites: vec![
                Site { treatment: vec![true, false], profit: vec![1.5, -0.25] },
                Site { treatment: vec![false, true, true], profit: vec![0.1, 2.0, 1e-300] },
            ],
        };
        let path = dir.path().join("sites.csv");
        write_site_data(&path, &prov(), &data).unwrap();
        assert_eq!(read_site_data(&path).unwrap(), data);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(&format!("# config_hash={}\n# seed=9\nsite,T,y\n", "ab".repeat(32))));
    }

    #[test]
    fn sample_set_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let samples = SampleSet {
            draws: vec![vec![0.5, -1.0], vec![1.0 / 3.0, 2.0]],
            log_posterior_values: vec![-1.25, -3.5],
            seed: 11,
            acceptance_rate: 0.25,
            prior_coords: vec![0, 1],
        };
        let (csv_path, json_path) = (dir.path().join("s.csv"), dir.path().join("s.json"));
        write_sample_set(&csv_path, &json_path, &prov(), &["a".into(), "b".into()], &samples).unwrap();
        let back = read_sample_set(&csv_path, &json_path).unwrap();
        assert_eq!(back.draws, samples.draws);
        assert_eq!(back.log_posterior_values, samples.log_posterior_values);
        assert_eq!((back.seed, back.acceptance_rate, back.prior_coords), (11, 0.25, vec![0, 1]));
    }

    #[test]
    fn numbers_use_plain_decimal_notation() {
        assert_eq!(num(1234567.5), "1234567.5");
        assert_eq!(num(f64::NAN), "NaN");
    }
}
