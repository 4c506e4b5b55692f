//! File formats: data CSV, parameter and report JSON, coefficient and BIC
//! tables.
//!
//! Floats are written in the shortest decimal form that parses back to the
//! same `f64`, so a write/read round trip is bit-exact for finite values.
//! Every JSON document carries a `schema_version` field.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{MoeError, Result};
use crate::metrics::{coefficient_blocks, Metric, MseReport, SupportReport};
use crate::model::{Dataset, ExpertParams, Family, GatingParams, LinearCoef, MoEParameters, PenaltyConfig, Prediction, Response};
use crate::selection::BicRow;

/// Version of every JSON document written by this module.
pub const SCHEMA_VERSION: u32 = 1;

/// Shortest round-trip decimal form; both zeros are written as `0`.
pub fn format_f64(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else {
        format!("{v}")
    }
}

/// A data file: the dataset plus the optional zero-based true labels.
#[derive(Clone, Debug)]
pub struct DataFile {
    pub data: Dataset,
    pub z_true: Option<Vec<usize>>,
}

fn parse_cell(raw: &str, row: usize, column: &str) -> Result<f64> {
    raw.trim().parse::<f64>().map_err(|_| {
        MoeError::InvalidData(format!("row {row}, column '{column}': cannot parse '{raw}' as a number"))
    })
}

fn parse_integer(v: f64, row: usize, column: &str, min: i64) -> Result<i64> {
    if v.fract() != 0.0 || v < min as f64 || v > i64::MAX as f64 {
        return Err(MoeError::InvalidData(format!(
            "row {row}, column '{column}': expected an integer >= {min}, found {v}"
        )));
    }
    Ok(v as i64)
}

/// Reads a comma-separated file with a header. The response column is `y`;
/// an optional `z_true` column holds 1-based component labels; every other
/// column is a covariate. Counts must be non-negative integers and class
/// labels integers in `1..=R`.
pub fn read_data_csv<R: Read>(reader: R, family: Family) -> Result<DataFile> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let y_col = headers
        .iter()
        .position(|h| h == "y")
        .ok_or_else(|| MoeError::InvalidData("header has no 'y' column".into()))?;
    let z_col = headers.iter().position(|h| h == "z_true");
    let x_cols: Vec<usize> = (0..headers.len()).filter(|&c| c != y_col && Some(c) != z_col).collect();
    if x_cols.is_empty() {
        return Err(MoeError::InvalidData("no covariate columns".into()));
    }

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut zs = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let row = r + 1;
        if record.len() != headers.len() {
            return Err(MoeError::InvalidData(format!(
                "row {row} has {} fields, header has {}",
                record.len(),
                headers.len()
            )));
        }
        for &c in &x_cols {
            xs.push(parse_cell(&record[c], row, &headers[c])?);
        }
        ys.push(parse_cell(&record[y_col], row, "y")?);
        if let Some(c) = z_col {
            let z = parse_integer(parse_cell(&record[c], row, "z_true")?, row, "z_true", 1)?;
            zs.push(z as usize - 1);
        }
    }
    let n = ys.len();
    if n == 0 {
        return Err(MoeError::InvalidData("file has no data rows".into()));
    }
    let x = DMatrix::from_row_slice(n, x_cols.len(), &xs);
    let y = match family {
        Family::Gaussian => Response::Real(ys),
        Family::Poisson => Response::Count(
            ys.iter()
                .enumerate()
                .map(|(i, &v)| parse_integer(v, i + 1, "y", 0).map(|c| c as u64))
                .collect::<Result<_>>()?,
        ),
        Family::Multinomial => {
            let labels: Vec<i64> =
                ys.iter().enumerate().map(|(i, &v)| parse_integer(v, i + 1, "y", 1)).collect::<Result<_>>()?;
            Response::categorical_one_based(&labels)?
        }
    };
    let names = x_cols.iter().map(|&c| headers[c].clone()).collect();
    let data = Dataset::new(x, y)?.with_feature_names(names)?;
    Ok(DataFile { data, z_true: z_col.map(|_| zs) })
}

/// Reads only the covariates of a data file; `y` and `z_true` columns, if
/// present, are ignored. Returns the matrix and the column names.
pub fn read_covariates_csv<R: Read>(reader: R) -> Result<(DMatrix<f64>, Vec<String>)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let x_cols: Vec<usize> = (0..headers.len()).filter(|&c| headers[c] != "y" && headers[c] != "z_true").collect();
    if x_cols.is_empty() {
        return Err(MoeError::InvalidData("no covariate columns".into()));
    }
    let mut xs = Vec::new();
    let mut n = 0;
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        for &c in &x_cols {
            let raw = record.get(c).ok_or_else(|| MoeError::InvalidData(format!("row {} is too short", r + 1)))?;
            let v = parse_cell(raw, r + 1, &headers[c])?;
            if !v.is_finite() {
                return Err(MoeError::InvalidData(format!("row {}, column '{}': non-finite value", r + 1, headers[c])));
            }
            xs.push(v);
        }
        n += 1;
    }
    if n == 0 {
        return Err(MoeError::InvalidData("file has no data rows".into()));
    }
    Ok((DMatrix::from_row_slice(n, x_cols.len(), &xs), x_cols.iter().map(|&c| headers[c].clone()).collect()))
}

pub fn read_data_csv_path(path: &Path, family: Family) -> Result<DataFile> {
    read_data_csv(File::open(path)?, family)
}

/// Writes covariates (named `x1..xp` unless the dataset carries names), the
/// response `y` (class labels 1-based) and, when given, `z_true` (1-based).
pub fn write_data_csv<W: Write>(writer: W, data: &Dataset, z_true: Option<&[usize]>) -> Result<()> {
    if let Some(z) = z_true {
        if z.len() != data.n() {
            return Err(MoeError::Dimension(format!("{} labels for {} rows", z.len(), data.n())));
        }
    }
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = match data.feature_names() {
        Some(names) => names.to_vec(),
        None => (1..=data.p()).map(|j| format!("x{j}")).collect(),
    };
    header.push("y".into());
    if z_true.is_some() {
        header.push("z_true".into());
    }
    w.write_record(&header)?;
    let y = data.y().as_f64();
    let x = data.x();
    for i in 0..data.n() {
        let mut rec: Vec<String> = (0..data.p()).map(|j| format_f64(x[(i, j)])).collect();
        rec.push(format_f64(y[i]));
        if let Some(z) = z_true {
            rec.push((z[i] + 1).to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Serializable form of [`MoEParameters`]. Coefficient vectors list the
/// intercept first. `experts[k]` holds one vector for Gaussian and Poisson
/// experts and `R − 1` vectors for multinomial experts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamsJson {
    pub family: Family,
    pub k: usize,
    pub p: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<usize>,
    /// Rows `1..K−1`; the last component's row is zero.
    pub gating: Vec<Vec<f64>>,
    pub experts: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Vec<f64>>,
}

impl From<&MoEParameters> for ParamsJson {
    fn from(params: &MoEParameters) -> Self {
        Self {
            family: params.family(),
            k: params.k(),
            p: params.p(),
            levels: params.levels(),
            gating: params.gating.rows().iter().map(LinearCoef::to_vec).collect(),
            experts: (0..params.k()).map(|c| params.experts.blocks(c).iter().map(|b| b.to_vec()).collect()).collect(),
            sigma: params.experts.sigma().map(<[f64]>::to_vec),
        }
    }
}

impl ParamsJson {
    pub fn to_params(&self) -> Result<MoEParameters> {
        let coef = |v: &Vec<f64>| -> Result<LinearCoef> {
            if v.len() != self.p + 1 {
                return Err(MoeError::Dimension(format!("coefficient vector of length {}, expected {}", v.len(), self.p + 1)));
            }
            Ok(LinearCoef::from_slice(v))
        };
        if self.experts.len() != self.k {
            return Err(MoeError::Dimension(format!("{} expert blocks for K = {}", self.experts.len(), self.k)));
        }
        let gating = GatingParams::new(self.p, self.gating.iter().map(coef).collect::<Result<_>>()?)?;
        let single = |c: &Vec<Vec<f64>>| -> Result<LinearCoef> {
            match c.as_slice() {
                [v] => coef(v),
                _ => Err(MoeError::Dimension(format!("expected one coefficient vector per expert, found {}", c.len()))),
            }
        };
        let experts = match self.family {
            Family::Gaussian => ExpertParams::Gaussian {
                coefs: self.experts.iter().map(single).collect::<Result<_>>()?,
                sigma: self.sigma.clone().ok_or_else(|| MoeError::InvalidData("Gaussian parameters need 'sigma'".into()))?,
            },
            Family::Poisson => ExpertParams::Poisson { coefs: self.experts.iter().map(single).collect::<Result<_>>()? },
            Family::Multinomial => {
                let levels = self.levels.unwrap_or(2);
                let coefs: Vec<Vec<LinearCoef>> = self
                    .experts
                    .iter()
                    .map(|c| c.iter().map(coef).collect::<Result<Vec<_>>>())
                    .collect::<Result<_>>()?;
                if coefs.iter().any(|c| c.len() + 1 != levels) {
                    return Err(MoeError::Dimension(format!("each expert needs {} coefficient vectors", levels - 1)));
                }
                ExpertParams::Multinomial { coefs }
            }
        };
        if let ExpertParams::Gaussian { sigma, .. } = &experts {
            if sigma.len() != self.k || sigma.iter().any(|s| !(*s > 0.0)) {
                return Err(MoeError::InvalidData(format!("'sigma' must hold {} positive values", self.k)));
            }
        }
        MoEParameters::new(gating, experts)
    }
}

/// Contents of `truth.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub schema_version: u32,
    pub n: usize,
    pub rho: f64,
    pub seed: u64,
    pub params: ParamsJson,
}

/// Per-column centering and scaling applied before a fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl Standardization {
    /// Column means and population standard deviations of `x`.
    pub fn from_data(x: &DMatrix<f64>) -> Result<Self> {
        let n = x.nrows() as f64;
        let mut means = Vec::with_capacity(x.ncols());
        let mut sds = Vec::with_capacity(x.ncols());
        for (j, col) in x.column_iter().enumerate() {
            let m = col.sum() / n;
            let sd = (col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
            if !(sd > 0.0) {
                return Err(MoeError::InvalidData(format!("covariate column {} is constant", j + 1)));
            }
            means.push(m);
            sds.push(sd);
        }
        Ok(Self { means, sds })
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.means.len() {
            return Err(MoeError::Dimension(format!("{} columns, standardization has {}", x.ncols(), self.means.len())));
        }
        let mut out = x.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            col.apply(|v| *v = (*v - self.means[j]) / self.sds[j]);
        }
        Ok(out)
    }

    fn back(&self, c: &LinearCoef) -> LinearCoef {
        let slopes: Vec<f64> = c.slopes.iter().zip(&self.sds).map(|(b, s)| b / s).collect();
        let shift: f64 = slopes.iter().zip(&self.means).map(|(b, m)| b * m).sum();
        LinearCoef::new(c.intercept - shift, slopes)
    }

    /// The same model expressed on the original covariate scale.
    pub fn to_original_scale(&self, params: &MoEParameters) -> MoEParameters {
        let gating = GatingParams::new(params.p(), params.gating.rows().iter().map(|r| self.back(r)).collect())
            .expect("shape is preserved");
        let experts = match &params.experts {
            ExpertParams::Gaussian { coefs, sigma } => {
                ExpertParams::Gaussian { coefs: coefs.iter().map(|c| self.back(c)).collect(), sigma: sigma.clone() }
            }
            ExpertParams::Poisson { coefs } => ExpertParams::Poisson { coefs: coefs.iter().map(|c| self.back(c)).collect() },
            ExpertParams::Multinomial { coefs } => ExpertParams::Multinomial {
                coefs: coefs.iter().map(|c| c.iter().map(|b| self.back(b)).collect()).collect(),
            },
        };
        MoEParameters::new(gating, experts).expect("shape is preserved")
    }
}

/// Returns the dataset with standardized covariates and the transform used.
pub fn standardize(data: &Dataset) -> Result<(Dataset, Standardization)> {
    let s = Standardization::from_data(data.x())?;
    let mut out = Dataset::new(s.apply(data.x())?, data.y().clone())?;
    if let Some(names) = data.feature_names() {
        out = out.with_feature_names(names.to_vec())?;
    }
    Ok((out, s))
}

/// Contents of `fit.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub schema_version: u32,
    pub family: Family,
    pub n: usize,
    pub p: usize,
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_names: Option<Vec<String>>,
    pub penalty: PenaltyConfig,
    pub seed: u64,
    /// Parameters on the scale the model was fitted on.
    pub params: ParamsJson,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standardization: Option<Standardization>,
    /// Back-transformed parameters when covariates were standardized.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_scale: Option<ParamsJson>,
    pub pl_trace: Vec<f64>,
    pub loglik: f64,
    pub penalized_loglik: f64,
    pub df: usize,
    pub bic: f64,
    pub n_iters: usize,
    pub converged: bool,
    /// 1-based indices of degenerate components.
    pub degenerate_components: Vec<usize>,
    /// Column sums of the responsibilities.
    pub component_mass: Vec<f64>,
    /// Row counts of the hard (maximum-responsibility) assignment.
    pub cluster_sizes: Vec<usize>,
}

/// Contents of `metrics.json`. Absent entries had no truth to compare with.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub support: Option<SupportReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<MseReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classification_rate: Option<Metric>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ari: Option<Metric>,
    pub notes: Vec<String>,
}

/// Pretty JSON followed by a newline.
pub fn write_json<W: Write, T: Serialize>(mut writer: W, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(&mut writer, value)?;
    writer.write_all(b"\n")?;
    writer.flush()?;
    Ok(())
}

pub fn write_json_path<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_json(BufWriter::new(File::create(path)?), value)
}

/// Reads any JSON document written here and checks its `schema_version`.
pub fn read_json_path<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    match raw.get("schema_version").and_then(serde_json::Value::as_u64) {
        Some(v) if v == u64::from(SCHEMA_VERSION) => Ok(serde_json::from_value(raw)?),
        Some(v) => Err(MoeError::InvalidData(format!("{}: unsupported schema_version {v}", path.display()))),
        None => Err(MoeError::InvalidData(format!("{}: missing schema_version", path.display()))),
    }
}

/// `block,index,value` rows; index 0 is the intercept (or `σ`).
pub fn write_coefficients_csv<W: Write>(writer: W, params: &MoEParameters) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["block", "index", "value"])?;
    for (block, values) in coefficient_blocks(params) {
        for (j, v) in values.iter().enumerate() {
            w.write_record([block.as_str(), &j.to_string(), &format_f64(*v)])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a coefficient table back into `block → values`.
pub fn read_coefficients_csv<R: Read>(reader: R) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut rdr = csv::Reader::from_reader(reader);
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let index = parse_integer(parse_cell(&rec[1], r + 1, "index")?, r + 1, "index", 0)? as usize;
        let values = out.entry(rec[0].to_string()).or_default();
        if values.len() != index {
            return Err(MoeError::InvalidData(format!("row {}: index {index} out of order", r + 1)));
        }
        values.push(parse_cell(&rec[2], r + 1, "value")?);
    }
    Ok(out)
}

/// `K,lambda,gamma,loglik,df,bic,converged` rows; cells of failed fits are
/// left empty.
pub fn write_bic_table<W: Write>(writer: W, rows: &[BicRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["K", "lambda", "gamma", "loglik", "df", "bic", "converged"])?;
    for r in rows {
        let failed = r.error.is_some();
        let num = |v: f64| if failed { String::new() } else { format_f64(v) };
        w.write_record([
            r.k.to_string(),
            format_f64(r.lambda),
            format_f64(r.gamma),
            num(r.loglik),
            if failed { String::new() } else { r.df.to_string() },
            num(r.bic),
            r.converged.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `row,component,prediction` rows, all 1-based; class predictions are
/// 1-based labels.
pub fn write_predictions_csv<W: Write>(writer: W, rows: &[(usize, Prediction)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["row", "component", "prediction"])?;
    for (i, (k, pred)) in rows.iter().enumerate() {
        w.write_record([(i + 1).to_string(), (k + 1).to_string(), format_f64(pred.as_f64())])?;
    }
    w.flush()?;
    Ok(())
}
