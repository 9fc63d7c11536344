//! Two-level dataset: treatment cycles and the embryos nested in them.
//!
//! Handles CSV ingestion with validation, covariate standardization, and
//! construction of the per-submodel design matrices for the pre-treatment
//! and dynamic covariate settings.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math;

/// Attempt number with the 4th and 5th attempts pooled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Attempt {
    First,
    Second,
    Third,
    FourthOrFifth,
}

impl Attempt {
    pub fn from_number(n: u32) -> Option<Attempt> {
        match n {
            1 => Some(Attempt::First),
            2 => Some(Attempt::Second),
            3 => Some(Attempt::Third),
            4 | 5 => Some(Attempt::FourthOrFifth),
            _ => None,
        }
    }

    /// Dummy coding with first attempt as the reference level.
    pub fn dummies(self) -> [f64; 3] {
        match self {
            Attempt::First => [0.0, 0.0, 0.0],
            Attempt::Second => [1.0, 0.0, 0.0],
            Attempt::Third => [0.0, 1.0, 0.0],
            Attempt::FourthOrFifth => [0.0, 0.0, 1.0],
        }
    }

    pub fn as_number(self) -> u32 {
        match self {
            Attempt::First => 1,
            Attempt::Second => 2,
            Attempt::Third => 3,
            Attempt::FourthOrFifth => 4,
        }
    }
}

/// One initiated treatment cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleRecord {
    pub cycle_id: String,
    pub age: f64,
    pub partner_age: f64,
    pub attempt: Attempt,
    pub n_oocytes: Option<u32>,
    pub oocytes_mixed: bool,
    pub n_embryos: Option<u32>,
    pub transfer_done: bool,
    pub det: Option<bool>,
    pub lbe: Option<bool>,
}

/// One graded embryo, nested in a cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbryoRecord {
    pub cycle_id: String,
    /// Cell evenness grade, 1..=4.
    pub evenness: u8,
    /// Fragmentation degree grade, 1..=4.
    pub fragmentation: u8,
    /// Sperm injected into the egg rather than mixed in vitro.
    pub icsi: bool,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{file}: I/O error: {source}")]
    Io {
        file: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: expected header {expected:?}, found {found:?}")]
    Header {
        file: String,
        expected: Vec<String>,
        found: Vec<String>,
    },
    #[error("{file} row {row}: {message}")]
    Row {
        file: String,
        row: usize,
        message: String,
    },
    #[error("cycle {cycle_id}: {message}")]
    Invariant { cycle_id: String, message: String },
    #[error("embryo row references unknown cycle_id {0}")]
    UnknownCycle(String),
    #[error("covariate {0} has zero variance")]
    ZeroVariance(String),
    #[error("unknown covariate {0}")]
    UnknownCovariate(String),
    #[error("dynamic design: {0}")]
    DynamicDesign(String),
}

/// Validated cycle + embryo tables with the embryos grouped by cycle.
#[derive(Debug, Clone)]
pub struct Dataset {
    cycles: Vec<CycleRecord>,
    embryos: Vec<EmbryoRecord>,
    /// Per cycle: (start, len) into `embryos`.
    embryo_range: Vec<(usize, usize)>,
}

const CYCLE_HEADER: [&str; 10] = [
    "cycle_id",
    "age",
    "partner_age",
    "attempt",
    "n_oocytes",
    "oocytes_mixed",
    "n_embryos",
    "transfer_done",
    "det",
    "lbe",
];
const EMBRYO_HEADER: [&str; 4] = ["cycle_id", "evenness", "fragmentation", "icsi"];

impl Dataset {
    /// Validate records and group embryos by cycle.
    pub fn from_records(
        cycles: Vec<CycleRecord>,
        mut embryos: Vec<EmbryoRecord>,
    ) -> Result<Dataset, DataError> {
        let mut index: BTreeMap<&str, usize> = BTreeMap::new();
        for (i, c) in cycles.iter().enumerate() {
            if index.insert(c.cycle_id.as_str(), i).is_some() {
                return Err(DataError::Invariant {
                    cycle_id: c.cycle_id.clone(),
                    message: "duplicate cycle_id".into(),
                });
            }
        }
        for c in &cycles {
            let fail = |message: &str| DataError::Invariant {
                cycle_id: c.cycle_id.clone(),
                message: message.into(),
            };
            if !c.oocytes_mixed {
                if c.n_embryos.is_some() || c.det.is_some() || c.lbe.is_some() {
                    return Err(fail("n_embryos, det, lbe must be absent when oocytes not mixed"));
                }
                if c.transfer_done {
                    return Err(fail("transfer recorded without oocytes mixed"));
                }
            } else {
                match c.n_oocytes {
                    None => return Err(fail("oocytes mixed but n_oocytes missing")),
                    Some(0) => return Err(fail("oocytes mixed but n_oocytes = 0")),
                    Some(_) => {}
                }
                if c.n_embryos.is_none() {
                    return Err(fail("oocytes mixed but n_embryos missing"));
                }
                if let (Some(e), Some(o)) = (c.n_embryos, c.n_oocytes) {
                    if e > o {
                        return Err(fail("n_embryos exceeds n_oocytes"));
                    }
                }
            }
            if !c.transfer_done && (c.det.is_some() || c.lbe.is_some()) {
                return Err(fail("det/lbe must be absent without transfer"));
            }
            if c.transfer_done {
                if c.n_embryos.unwrap_or(0) == 0 {
                    return Err(fail("transfer recorded without embryos"));
                }
                if c.det.is_none() || c.lbe.is_none() {
                    return Err(fail("transfer recorded but det/lbe missing"));
                }
            }
        }

        // group embryos by cycle order, preserving within-cycle order
        let order: BTreeMap<&str, usize> = index.clone();
        for e in &embryos {
            if !order.contains_key(e.cycle_id.as_str()) {
                return Err(DataError::UnknownCycle(e.cycle_id.clone()));
            }
            if !(1..=4).contains(&e.evenness) || !(1..=4).contains(&e.fragmentation) {
                return Err(DataError::Invariant {
                    cycle_id: e.cycle_id.clone(),
                    message: format!(
                        "embryo grades out of range 1..=4: evenness {}, fragmentation {}",
                        e.evenness, e.fragmentation
                    ),
                });
            }
        }
        embryos.sort_by_key(|e| order[e.cycle_id.as_str()]);

        let mut embryo_range = vec![(0usize, 0usize); cycles.len()];
        let mut pos = 0usize;
        while pos < embryos.len() {
            let ci = order[embryos[pos].cycle_id.as_str()];
            let start = pos;
            while pos < embryos.len() && order[embryos[pos].cycle_id.as_str()] == ci {
                pos += 1;
            }
            embryo_range[ci] = (start, pos - start);
        }

        for (i, c) in cycles.iter().enumerate() {
            let expected = c.n_embryos.unwrap_or(0) as usize;
            let (_, len) = embryo_range[i];
            if len != expected {
                return Err(DataError::Invariant {
                    cycle_id: c.cycle_id.clone(),
                    message: format!("expected {expected} embryo rows, found {len}"),
                });
            }
        }

        Ok(Dataset {
            cycles,
            embryos,
            embryo_range,
        })
    }

    pub fn n_cycles(&self) -> usize {
        self.cycles.len()
    }

    pub fn n_embryos(&self) -> usize {
        self.embryos.len()
    }

    pub fn cycles(&self) -> &[CycleRecord] {
        &self.cycles
    }

    pub fn embryos(&self) -> &[EmbryoRecord] {
        &self.embryos
    }

    pub fn embryos_of(&self, cycle: usize) -> &[EmbryoRecord] {
        let (start, len) = self.embryo_range[cycle];
        &self.embryos[start..start + len]
    }

    /// (start, len) of the cycle's embryos within the global embryo table.
    pub fn embryo_range(&self, cycle: usize) -> (usize, usize) {
        self.embryo_range[cycle]
    }

    /// Cycle index of a global embryo index.
    pub fn cycle_of_embryo(&self, embryo: usize) -> usize {
        // ranges are contiguous and ordered; binary search on start
        match self
            .embryo_range
            .binary_search_by(|&(start, _)| start.cmp(&embryo))
        {
            Ok(mut i) => {
                // zero-length ranges share starts; find the one that contains it
                while self.embryo_range[i].1 == 0 {
                    i += 1;
                }
                i
            }
            Err(i) => {
                let mut i = i - 1;
                while self.embryo_range[i].1 == 0 {
                    i -= 1;
                }
                i
            }
        }
    }

    /// Summary counts mirroring the cohort-descriptor table.
    pub fn summary(&self) -> CohortSummary {
        let started = self.cycles.len();
        let mixed = self.cycles.iter().filter(|c| c.oocytes_mixed).count();
        let embryos = self.embryos.len();
        let transfers = self.cycles.iter().filter(|c| c.transfer_done).count();
        let det = self
            .cycles
            .iter()
            .filter(|c| c.det == Some(true))
            .count();
        let lbe = self
            .cycles
            .iter()
            .filter(|c| c.lbe == Some(true))
            .count();
        CohortSummary {
            started,
            mixed,
            embryos,
            transfers,
            det_events: det,
            lbe_events: lbe,
        }
    }
}

/// Cohort descriptor counts, in the order they are conventionally reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CohortSummary {
    pub started: usize,
    pub mixed: usize,
    pub embryos: usize,
    pub transfers: usize,
    pub det_events: usize,
    pub lbe_events: usize,
}

impl fmt::Display for CohortSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "cycles started            {}", self.started)?;
        writeln!(f, "cycles with eggs mixed    {}", self.mixed)?;
        writeln!(f, "gradable embryos          {}", self.embryos)?;
        writeln!(f, "embryo transfer procedures {}", self.transfers)?;
        writeln!(f, "double embryo transfers   {}", self.det_events)?;
        write!(f, "live birth events         {}", self.lbe_events)
    }
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "0" => Some(false),
        "1" => Some(true),
        _ => None,
    }
}

fn parse_opt_bool(s: &str) -> Result<Option<bool>, String> {
    if s.is_empty() {
        Ok(None)
    } else {
        parse_bool(s)
            .map(Some)
            .ok_or_else(|| format!("expected 0/1 or empty, found {s:?}"))
    }
}

fn parse_opt_count(s: &str) -> Result<Option<u32>, String> {
    if s.is_empty() {
        Ok(None)
    } else {
        s.parse::<u32>()
            .map(Some)
            .map_err(|_| format!("expected nonnegative count or empty, found {s:?}"))
    }
}

/// Load and validate the cycle and embryo CSV files.
pub fn load_dataset(
    cycles_file: impl AsRef<Path>,
    embryos_file: impl AsRef<Path>,
) -> Result<Dataset, DataError> {
    let cycles = read_cycles_csv(cycles_file.as_ref())?;
    let embryos = read_embryos_csv(embryos_file.as_ref())?;
    Dataset::from_records(cycles, embryos)
}

fn check_header(file: &str, found: &csv::StringRecord, expected: &[&str]) -> Result<(), DataError> {
    let found: Vec<String> = found.iter().map(|s| s.to_string()).collect();
    if found != expected {
        return Err(DataError::Header {
            file: file.into(),
            expected: expected.iter().map(|s| s.to_string()).collect(),
            found,
        });
    }
    Ok(())
}

fn read_cycles_csv(path: &Path) -> Result<Vec<CycleRecord>, DataError> {
    let file = path.display().to_string();
    let io_err = |source| DataError::Io {
        file: file.clone(),
        source,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => io_err(source),
            other => DataError::Row {
                file: file.clone(),
                row: 0,
                message: format!("{other:?}"),
            },
        })?;
    check_header(
        &file,
        reader.headers().map_err(|e| DataError::Row {
            file: file.clone(),
            row: 0,
            message: e.to_string(),
        })?,
        &CYCLE_HEADER,
    )?;

    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let fail = |message: String| DataError::Row {
            file: file.clone(),
            row,
            message,
        };
        let rec = rec.map_err(|e| fail(e.to_string()))?;
        if rec.len() != CYCLE_HEADER.len() {
            return Err(fail(format!(
                "expected {} fields, found {}",
                CYCLE_HEADER.len(),
                rec.len()
            )));
        }
        let field = |k: usize| rec.get(k).unwrap_or("");
        let age: f64 = field(1)
            .parse()
            .map_err(|_| fail(format!("bad age {:?}", field(1))))?;
        let partner_age: f64 = field(2)
            .parse()
            .map_err(|_| fail(format!("bad partner_age {:?}", field(2))))?;
        let attempt_raw: u32 = field(3)
            .parse()
            .map_err(|_| fail(format!("bad attempt {:?}", field(3))))?;
        let attempt = Attempt::from_number(attempt_raw)
            .ok_or_else(|| fail(format!("attempt must be 1..=5, found {attempt_raw}")))?;
        out.push(CycleRecord {
            cycle_id: field(0).to_string(),
            age,
            partner_age,
            attempt,
            n_oocytes: parse_opt_count(field(4)).map_err(&fail)?,
            oocytes_mixed: parse_bool(field(5))
                .ok_or_else(|| fail(format!("bad oocytes_mixed {:?}", field(5))))?,
            n_embryos: parse_opt_count(field(6)).map_err(&fail)?,
            transfer_done: parse_bool(field(7))
                .ok_or_else(|| fail(format!("bad transfer_done {:?}", field(7))))?,
            det: parse_opt_bool(field(8)).map_err(&fail)?,
            lbe: parse_opt_bool(field(9)).map_err(&fail)?,
        });
    }
    Ok(out)
}

fn read_embryos_csv(path: &Path) -> Result<Vec<EmbryoRecord>, DataError> {
    let file = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => DataError::Io {
                file: file.clone(),
                source,
            },
            other => DataError::Row {
                file: file.clone(),
                row: 0,
                message: format!("{other:?}"),
            },
        })?;
    check_header(
        &file,
        reader.headers().map_err(|e| DataError::Row {
            file: file.clone(),
            row: 0,
            message: e.to_string(),
        })?,
        &EMBRYO_HEADER,
    )?;

    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let fail = |message: String| DataError::Row {
            file: file.clone(),
            row,
            message,
        };
        let rec = rec.map_err(|e| fail(e.to_string()))?;
        if rec.len() != EMBRYO_HEADER.len() {
            return Err(fail(format!(
                "expected {} fields, found {}",
                EMBRYO_HEADER.len(),
                rec.len()
            )));
        }
        let field = |k: usize| rec.get(k).unwrap_or("");
        let grade = |k: usize, name: &str| -> Result<u8, DataError> {
            field(k)
                .parse::<u8>()
                .ok()
                .filter(|g| (1..=4).contains(g))
                .ok_or_else(|| fail(format!("bad {name} grade {:?}", field(k))))
        };
        out.push(EmbryoRecord {
            cycle_id: field(0).to_string(),
            evenness: grade(1, "evenness")?,
            fragmentation: grade(2, "fragmentation")?,
            icsi: parse_bool(field(3)).ok_or_else(|| fail(format!("bad icsi {:?}", field(3))))?,
        });
    }
    Ok(out)
}

/// Write the dataset back out in the canonical CSV schemas.
pub fn write_dataset(
    dataset: &Dataset,
    cycles_file: impl AsRef<Path>,
    embryos_file: impl AsRef<Path>,
) -> Result<(), DataError> {
    let fmt_opt_count = |c: Option<u32>| c.map(|v| v.to_string()).unwrap_or_default();
    let fmt_opt_bool =
        |b: Option<bool>| b.map(|v| if v { "1" } else { "0" }.to_string()).unwrap_or_default();

    let mut w = csv::Writer::from_path(cycles_file.as_ref()).map_err(|e| DataError::Io {
        file: cycles_file.as_ref().display().to_string(),
        source: std::io::Error::other(e),
    })?;
    w.write_record(CYCLE_HEADER).map_err(io_write_err)?;
    for c in dataset.cycles() {
        w.write_record([
            c.cycle_id.clone(),
            format!("{}", c.age),
            format!("{}", c.partner_age),
            c.attempt.as_number().to_string(),
            fmt_opt_count(c.n_oocytes),
            if c.oocytes_mixed { "1" } else { "0" }.into(),
            fmt_opt_count(c.n_embryos),
            if c.transfer_done { "1" } else { "0" }.into(),
            fmt_opt_bool(c.det),
            fmt_opt_bool(c.lbe),
        ])
        .map_err(io_write_err)?;
    }
    w.flush().map_err(|e| DataError::Io {
        file: cycles_file.as_ref().display().to_string(),
        source: e,
    })?;

    let mut w = csv::Writer::from_path(embryos_file.as_ref()).map_err(|e| DataError::Io {
        file: embryos_file.as_ref().display().to_string(),
        source: std::io::Error::other(e),
    })?;
    w.write_record(EMBRYO_HEADER).map_err(io_write_err)?;
    for e in dataset.embryos() {
        w.write_record([
            e.cycle_id.clone(),
            e.evenness.to_string(),
            e.fragmentation.to_string(),
            if e.icsi { "1" } else { "0" }.into(),
        ])
        .map_err(io_write_err)?;
    }
    w.flush().map_err(|e| DataError::Io {
        file: embryos_file.as_ref().display().to_string(),
        source: e,
    })?;
    Ok(())
}

fn io_write_err(e: csv::Error) -> DataError {
    DataError::Io {
        file: String::new(),
        source: std::io::Error::other(e),
    }
}

/// Centering/scaling constants, kept for back-conversion of coefficients.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StandardizationParams {
    moments: BTreeMap<String, (f64, f64)>,
}

impl StandardizationParams {
    pub fn insert(&mut self, name: &str, mean: f64, sd: f64) {
        self.moments.insert(name.to_string(), (mean, sd));
    }

    pub fn get(&self, name: &str) -> Option<(f64, f64)> {
        self.moments.get(name).copied()
    }

    pub fn standardize(&self, name: &str, x: f64) -> f64 {
        match self.get(name) {
            Some((m, s)) => (x - m) / s,
            None => x,
        }
    }

    pub fn unstandardize(&self, name: &str, z: f64) -> f64 {
        match self.get(name) {
            Some((m, s)) => z * s + m,
            None => z,
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(|s| s.as_str())
    }

    pub fn merged(&self, other: &StandardizationParams) -> StandardizationParams {
        let mut moments = self.moments.clone();
        moments.extend(other.moments.clone());
        StandardizationParams { moments }
    }
}

fn covariate_value(c: &CycleRecord, name: &str) -> Option<f64> {
    match name {
        "age" => Some(c.age),
        "partner_age" => Some(c.partner_age),
        _ => None,
    }
}

/// Center and scale the named cycle covariates to sample mean 0, SD 1
/// (n-1 denominator). Returns the transformed dataset and the moments.
pub fn standardize(
    dataset: &Dataset,
    covariates: &[&str],
) -> Result<(Dataset, StandardizationParams), DataError> {
    let mut params = StandardizationParams::default();
    for &name in covariates {
        let values: Vec<f64> = dataset
            .cycles()
            .iter()
            .map(|c| covariate_value(c, name).ok_or_else(|| DataError::UnknownCovariate(name.into())))
            .collect::<Result<_, _>>()?;
        let m = math::mean(&values);
        let sd = if values.len() > 1 {
            math::sample_variance(&values).sqrt()
        } else {
            0.0
        };
        if sd <= 0.0 {
            return Err(DataError::ZeroVariance(name.into()));
        }
        params.insert(name, m, sd);
    }
    let mut out = dataset.clone();
    for c in &mut out.cycles {
        if params.get("age").is_some() {
            c.age = params.standardize("age", c.age);
        }
        if params.get("partner_age").is_some() {
            c.partner_age = params.standardize("partner_age", c.partner_age);
        }
    }
    Ok((out, params))
}

/// Covariate configuration: baseline-only or conditioning on upstream
/// stage outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Pretreatment,
    Dynamic,
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Setting::Pretreatment => write!(f, "pretreatment"),
            Setting::Dynamic => write!(f, "dynamic"),
        }
    }
}

/// The six linked response stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Submodel {
    Oocytes,
    Fertilisation,
    Evenness,
    Fragmentation,
    Det,
    Lbe,
}

impl Submodel {
    pub const ALL: [Submodel; 6] = [
        Submodel::Oocytes,
        Submodel::Fertilisation,
        Submodel::Evenness,
        Submodel::Fragmentation,
        Submodel::Det,
        Submodel::Lbe,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Submodel::Oocytes => "oocytes",
            Submodel::Fertilisation => "fertilisation",
            Submodel::Evenness => "evenness",
            Submodel::Fragmentation => "fragmentation",
            Submodel::Det => "det",
            Submodel::Lbe => "lbe",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Submodel::Oocytes => "Number of oocytes submodel",
            Submodel::Fertilisation => "Fertilisation rate submodel",
            Submodel::Evenness => "Embryo evenness submodel",
            Submodel::Fragmentation => "Embryo fragmentation submodel",
            Submodel::Det => "Double embryo transfer submodel",
            Submodel::Lbe => "Live birth event submodel",
        }
    }

    /// Short tag used in parameter names (beta_O[1], ...).
    pub fn tag(self) -> &'static str {
        match self {
            Submodel::Oocytes => "O",
            Submodel::Fertilisation => "M",
            Submodel::Evenness => "E",
            Submodel::Fragmentation => "F",
            Submodel::Det => "D",
            Submodel::Lbe => "L",
        }
    }
}

/// Design matrix for one submodel: covariate rows restricted to the
/// included units plus the index set itself.
#[derive(Debug, Clone)]
pub struct Design {
    /// Cycle indices, or global embryo indices for the embryo submodels.
    pub units: Vec<usize>,
    pub x: Array2<f64>,
    pub columns: Vec<String>,
}

impl Design {
    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn n_cols(&self) -> usize {
        self.x.ncols()
    }
}

/// Per-submodel design matrices, outcomes and unit bookkeeping.
#[derive(Debug, Clone)]
pub struct DesignMatrices {
    pub setting: Setting,
    pub o: Design,
    pub m: Design,
    pub e: Design,
    pub f: Design,
    pub d: Design,
    pub l: Design,
    /// Oocyte counts aligned with `o.units`.
    pub y_o: Vec<u32>,
    /// Embryo counts aligned with `m.units`.
    pub y_m: Vec<u32>,
    /// log(oocyte count) offsets aligned with `m.units`.
    pub offset_m: Vec<f64>,
    /// Evenness grades aligned with `e.units`.
    pub grade_e: Vec<u8>,
    /// Fragmentation grades aligned with `f.units`.
    pub grade_f: Vec<u8>,
    /// Cycle index of each embryo row.
    pub cycle_of_embryo: Vec<usize>,
    /// DET outcomes aligned with `d.units`.
    pub y_d: Vec<bool>,
    /// LBE outcomes aligned with `l.units`.
    pub y_l: Vec<bool>,
    /// Row in `m` for each cycle, if included.
    pub m_row_of: Vec<Option<usize>>,
    /// Row in `d`/`l` for each cycle, if included.
    pub dl_row_of: Vec<Option<usize>>,
    /// (start, len) of each cycle's embryo rows.
    pub embryo_range: Vec<(usize, usize)>,
    /// Moments used to standardize the dynamic outcome covariates.
    pub derived_params: StandardizationParams,
}

impl DesignMatrices {
    pub fn design(&self, s: Submodel) -> &Design {
        match s {
            Submodel::Oocytes => &self.o,
            Submodel::Fertilisation => &self.m,
            Submodel::Evenness => &self.e,
            Submodel::Fragmentation => &self.f,
            Submodel::Det => &self.d,
            Submodel::Lbe => &self.l,
        }
    }

    pub fn n_cycles(&self) -> usize {
        self.o.n_units()
    }
}

fn baseline_columns(c: &CycleRecord, with_attempt: bool, intercept: bool) -> Vec<f64> {
    let mut row = Vec::with_capacity(6);
    if intercept {
        row.push(1.0);
    }
    row.push(c.age);
    row.push(c.partner_age);
    if with_attempt {
        row.extend(c.attempt.dummies());
    }
    row
}

fn column_names(with_attempt: bool, intercept: bool) -> Vec<String> {
    let mut names = Vec::new();
    if intercept {
        names.push("intercept".into());
    }
    names.push("age".into());
    names.push("partner_age".into());
    if with_attempt {
        names.push("attempt_2".into());
        names.push("attempt_3".into());
        names.push("attempt_4_5".into());
    }
    names
}

fn to_matrix(rows: Vec<Vec<f64>>, ncols: usize) -> Array2<f64> {
    let nrows = rows.len();
    let mut flat = Vec::with_capacity(nrows * ncols);
    for r in rows {
        debug_assert_eq!(r.len(), ncols);
        flat.extend(r);
    }
    Array2::from_shape_vec((nrows, ncols), flat).expect("ragged design rows")
}

/// Raw per-cycle derived outcome covariates, before standardization.
fn derived_raw(c: &CycleRecord, dataset: &Dataset, cycle: usize) -> (f64, f64, Option<(f64, f64)>) {
    let n_ooc = c.n_oocytes.unwrap_or(0) as f64;
    let n_emb = c.n_embryos.unwrap_or(0) as f64;
    let fert = if n_ooc >= 1.0 { n_emb / n_ooc } else { 0.0 };
    let embryos = dataset.embryos_of(cycle);
    let grades = if embryos.is_empty() {
        None
    } else {
        let me = embryos.iter().map(|e| e.evenness as f64).sum::<f64>() / embryos.len() as f64;
        let mf =
            embryos.iter().map(|e| e.fragmentation as f64).sum::<f64>() / embryos.len() as f64;
        Some((me, mf))
    };
    (n_ooc, fert, grades)
}

/// Build the six design matrices for the requested covariate setting.
///
/// Baseline covariates are expected to be standardized already; the
/// dynamic outcome covariates are standardized here with moments computed
/// over the cycles where each is defined.
pub fn build_design(dataset: &Dataset, setting: Setting) -> Result<DesignMatrices, DataError> {
    let n = dataset.n_cycles();
    let cycles = dataset.cycles();

    // inclusion sets
    let o_units: Vec<usize> = (0..n).collect();
    let m_units: Vec<usize> = (0..n).filter(|&i| cycles[i].oocytes_mixed).collect();
    let dl_units: Vec<usize> = (0..n).filter(|&i| cycles[i].transfer_done).collect();

    let mut m_row_of = vec![None; n];
    for (r, &i) in m_units.iter().enumerate() {
        m_row_of[i] = Some(r);
    }
    let mut dl_row_of = vec![None; n];
    for (r, &i) in dl_units.iter().enumerate() {
        dl_row_of[i] = Some(r);
    }

    // moments of the dynamic outcome covariates
    let mut derived_params = StandardizationParams::default();
    if setting == Setting::Dynamic {
        let mut oocs = Vec::new();
        let mut ferts = Vec::new();
        let mut mes = Vec::new();
        let mut mfs = Vec::new();
        for &i in &m_units {
            let (o, f, g) = derived_raw(&cycles[i], dataset, i);
            oocs.push(o);
            ferts.push(f);
            if let Some((me, mf)) = g {
                mes.push(me);
                mfs.push(mf);
            }
        }
        for (name, values) in [
            ("n_oocytes", &oocs),
            ("fert_rate", &ferts),
            ("mean_evenness", &mes),
            ("mean_fragmentation", &mfs),
        ] {
            if values.len() < 2 {
                return Err(DataError::DynamicDesign(format!(
                    "not enough units to standardize derived covariate {name}"
                )));
            }
            let m = math::mean(values);
            let sd = math::sample_variance(values).sqrt();
            if sd <= 0.0 {
                return Err(DataError::ZeroVariance(name.into()));
            }
            derived_params.insert(name, m, sd);
        }
    }

    let std_derived = |name: &str, x: f64| derived_params.standardize(name, x);

    // O: intercept, age, partner age, attempt dummies
    let o = Design {
        units: o_units.clone(),
        x: to_matrix(
            o_units
                .iter()
                .map(|&i| baseline_columns(&cycles[i], true, true))
                .collect(),
            6,
        ),
        columns: column_names(true, true),
    };
    let y_o: Vec<u32> = o_units
        .iter()
        .map(|&i| cycles[i].n_oocytes.unwrap_or(0))
        .collect();

    // M: intercept, age, partner age
    let m = Design {
        units: m_units.clone(),
        x: to_matrix(
            m_units
                .iter()
                .map(|&i| baseline_columns(&cycles[i], false, true))
                .collect(),
            3,
        ),
        columns: column_names(false, true),
    };
    let y_m: Vec<u32> = m_units
        .iter()
        .map(|&i| cycles[i].n_embryos.unwrap_or(0))
        .collect();
    let offset_m: Vec<f64> = m_units
        .iter()
        .map(|&i| (cycles[i].n_oocytes.unwrap_or(0) as f64).ln())
        .collect();

    // E, F: age, partner age, icsi (no intercept; the thresholds play
    // that role), plus oocyte count and fertilisation rate when dynamic
    let n_emb = dataset.n_embryos();
    let mut e_rows = Vec::with_capacity(n_emb);
    let mut cycle_of_embryo = Vec::with_capacity(n_emb);
    let mut grade_e = Vec::with_capacity(n_emb);
    let mut grade_f = Vec::with_capacity(n_emb);
    let mut embryo_range = vec![(0usize, 0usize); n];
    for i in 0..n {
        embryo_range[i] = dataset.embryo_range(i);
        let (ooc, fert, _) = derived_raw(&cycles[i], dataset, i);
        for emb in dataset.embryos_of(i) {
            let mut row = vec![cycles[i].age, cycles[i].partner_age, f64::from(emb.icsi as u8)];
            if setting == Setting::Dynamic {
                row.push(std_derived("n_oocytes", ooc));
                row.push(std_derived("fert_rate", fert));
            }
            e_rows.push(row);
            cycle_of_embryo.push(i);
            grade_e.push(emb.evenness);
            grade_f.push(emb.fragmentation);
        }
    }
    let mut ef_columns: Vec<String> = vec!["age".into(), "partner_age".into(), "icsi".into()];
    if setting == Setting::Dynamic {
        ef_columns.push("n_oocytes".into());
        ef_columns.push("fert_rate".into());
    }
    let ef_ncols = ef_columns.len();
    let e = Design {
        units: (0..n_emb).collect(),
        x: to_matrix(e_rows, ef_ncols),
        columns: ef_columns.clone(),
    };
    let f = Design {
        units: e.units.clone(),
        x: e.x.clone(),
        columns: ef_columns,
    };

    // D: intercept, age, partner age, attempt dummies (+ dynamic extras)
    // L: intercept, age, partner age (+ dynamic extras + DET)
    let mut d_rows = Vec::with_capacity(dl_units.len());
    let mut l_rows = Vec::with_capacity(dl_units.len());
    for &i in &dl_units {
        let c = &cycles[i];
        let (ooc, fert, grades) = derived_raw(c, dataset, i);
        let mut d_row = baseline_columns(c, true, true);
        let mut l_row = baseline_columns(c, false, true);
        if setting == Setting::Dynamic {
            let (me, mf) = grades.ok_or_else(|| {
                DataError::DynamicDesign(format!(
                    "cycle {} reached transfer without graded embryos",
                    c.cycle_id
                ))
            })?;
            let extras = [
                std_derived("n_oocytes", ooc),
                std_derived("fert_rate", fert),
                std_derived("mean_evenness", me),
                std_derived("mean_fragmentation", mf),
            ];
            d_row.extend(extras);
            l_row.extend(extras);
            l_row.push(f64::from(c.det.unwrap_or(false) as u8));
        }
        d_rows.push(d_row);
        l_rows.push(l_row);
    }
    let mut d_columns = column_names(true, true);
    let mut l_columns = column_names(false, true);
    if setting == Setting::Dynamic {
        for name in ["n_oocytes", "fert_rate", "mean_evenness", "mean_fragmentation"] {
            d_columns.push(name.into());
            l_columns.push(name.into());
        }
        l_columns.push("det".into());
    }
    let d_ncols = d_columns.len();
    let l_ncols = l_columns.len();
    let d = Design {
        units: dl_units.clone(),
        x: to_matrix(d_rows, d_ncols),
        columns: d_columns,
    };
    let l = Design {
        units: dl_units.clone(),
        x: to_matrix(l_rows, l_ncols),
        columns: l_columns,
    };
    let y_d: Vec<bool> = dl_units
        .iter()
        .map(|&i| cycles[i].det.unwrap_or(false))
        .collect();
    let y_l: Vec<bool> = dl_units
        .iter()
        .map(|&i| cycles[i].lbe.unwrap_or(false))
        .collect();

    Ok(DesignMatrices {
        setting,
        o,
        m,
        e,
        f,
        d,
        l,
        y_o,
        y_m,
        offset_m,
        grade_e,
        grade_f,
        cycle_of_embryo,
        y_d,
        y_l,
        m_row_of,
        dl_row_of,
        embryo_range,
        derived_params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cycle(id: &str) -> CycleRecord {
        CycleRecord {
            cycle_id: id.into(),
            age: 33.0,
            partner_age: 35.0,
            attempt: Attempt::First,
            n_oocytes: Some(10),
            oocytes_mixed: true,
            n_embryos: Some(4),
            transfer_done: true,
            det: Some(true),
            lbe: Some(false),
        }
    }

    fn embryo(id: &str) -> EmbryoRecord {
        EmbryoRecord {
            cycle_id: id.into(),
            evenness: 3,
            fragmentation: 2,
            icsi: false,
        }
    }

    fn small_dataset() -> Dataset {
        let mut c1 = cycle("c1");
        c1.n_oocytes = Some(0);
        c1.oocytes_mixed = false;
        c1.n_embryos = None;
        c1.transfer_done = false;
        c1.det = None;
        c1.lbe = None;
        let mut c2 = cycle("c2");
        c2.age = 30.0;
        c2.n_embryos = Some(2);
        let mut c3 = cycle("c3");
        c3.age = 36.0;
        c3.attempt = Attempt::Second;
        c3.n_embryos = Some(0);
        c3.transfer_done = false;
        c3.det = None;
        c3.lbe = None;
        let mut c4 = cycle("c4");
        c4.age = 34.0;
        c4.attempt = Attempt::Third;
        c4.n_oocytes = Some(8);
        c4.n_embryos = Some(3);
        c4.det = Some(false);
        c4.lbe = Some(true);
        let mut e4 = embryo("c4");
        e4.evenness = 2;
        e4.fragmentation = 4;
        e4.icsi = true;
        let embryos = vec![embryo("c2"), embryo("c2"), e4.clone(), e4.clone(), e4];
        Dataset::from_records(vec![c1, c2, c3, c4], embryos).unwrap()
    }

    #[test]
    fn single_zero_oocyte_cycle_has_empty_downstream_sets() {
        let mut c = cycle("only");
        c.n_oocytes = Some(0);
        c.oocytes_mixed = false;
        c.n_embryos = None;
        c.transfer_done = false;
        c.det = None;
        c.lbe = None;
        let ds = Dataset::from_records(vec![c], vec![]).unwrap();
        let design = build_design(&ds, Setting::Pretreatment).unwrap();
        assert_eq!(design.o.n_units(), 1);
        assert_eq!(design.m.n_units(), 0);
        assert_eq!(design.e.n_units(), 0);
        assert_eq!(design.f.n_units(), 0);
        assert_eq!(design.d.n_units(), 0);
        assert_eq!(design.l.n_units(), 0);
    }

    #[test]
    fn embryo_with_unknown_cycle_is_rejected_by_id() {
        let err = Dataset::from_records(vec![cycle("c1")], vec![embryo("ghost")]).unwrap_err();
        match err {
            DataError::UnknownCycle(id) => assert_eq!(id, "ghost"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn embryo_count_must_match_n_embryos() {
        let err = Dataset::from_records(vec![cycle("c1")], vec![embryo("c1")]).unwrap_err();
        assert!(matches!(err, DataError::Invariant { .. }));
    }

    #[test]
    fn inclusion_sets_are_monotone() {
        let ds = small_dataset();
        let design = build_design(&ds, Setting::Pretreatment).unwrap();
        assert_eq!(design.o.units, vec![0, 1, 2, 3]);
        assert_eq!(design.m.units, vec![1, 2, 3]);
        assert_eq!(design.d.units, vec![1, 3]);
        assert_eq!(design.l.units, design.d.units);
        for &u in &design.l.units {
            assert!(design.m.units.contains(&u));
        }
        // embryo rows only for mixed cycles with embryos
        assert_eq!(design.cycle_of_embryo, vec![1, 1, 3, 3, 3]);
    }

    #[test]
    fn standardize_two_ages() {
        // ages [30, 36]: mean 33, sample SD sqrt(18) = 4.2426...
        let mut c1 = cycle("a");
        c1.age = 30.0;
        let mut c2 = cycle("b");
        c2.age = 36.0;
        let embryos = vec![embryo("a"); 4]
            .into_iter()
            .chain(vec![embryo("b"); 4])
            .collect();
        let ds = Dataset::from_records(vec![c1, c2], embryos).unwrap();
        let (out, params) = standardize(&ds, &["age"]).unwrap();
        let (m, sd) = params.get("age").unwrap();
        assert_relative_eq!(m, 33.0);
        assert_relative_eq!(sd, 18f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(out.cycles()[0].age, -std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-12);
        assert_relative_eq!(out.cycles()[1].age, std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-12);
    }

    #[test]
    fn standardize_is_idempotent_on_standardized_input() {
        let mut c1 = cycle("a");
        c1.age = -std::f64::consts::FRAC_1_SQRT_2;
        let mut c2 = cycle("b");
        c2.age = std::f64::consts::FRAC_1_SQRT_2;
        let embryos: Vec<_> = vec![embryo("a"); 4]
            .into_iter()
            .chain(vec![embryo("b"); 4])
            .collect();
        let ds = Dataset::from_records(vec![c1, c2], embryos).unwrap();
        let (out, params) = standardize(&ds, &["age"]).unwrap();
        let (m, sd) = params.get("age").unwrap();
        assert_relative_eq!(m, 0.0, epsilon = 1e-15);
        assert_relative_eq!(sd, 1.0, epsilon = 1e-12);
        assert_relative_eq!(out.cycles()[0].age, -std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-12);
    }

    #[test]
    fn standardize_rejects_constant_column() {
        let ds = small_dataset();
        // partner_age is constant 35 in the fixture
        assert!(matches!(
            standardize(&ds, &["partner_age"]),
            Err(DataError::ZeroVariance(_))
        ));
    }

    #[test]
    fn round_trip_unstandardize() {
        let mut params = StandardizationParams::default();
        params.insert("age", 33.25, 4.7);
        for &x in &[21.0, 33.0, 42.5] {
            let z = params.standardize("age", x);
            let back = params.unstandardize("age", z);
            assert_relative_eq!(back, x, max_relative = 1e-12);
        }
    }

    #[test]
    fn pretreatment_l_design_has_three_columns() {
        let ds = small_dataset();
        let design = build_design(&ds, Setting::Pretreatment).unwrap();
        assert_eq!(design.l.columns, vec!["intercept", "age", "partner_age"]);
        assert_eq!(design.l.n_cols(), 3);
    }

    #[test]
    fn dynamic_l_design_has_eight_columns() {
        let ds = small_dataset();
        let design = build_design(&ds, Setting::Dynamic).unwrap();
        assert_eq!(design.l.n_cols(), 8);
        assert_eq!(
            design.l.columns,
            vec![
                "intercept",
                "age",
                "partner_age",
                "n_oocytes",
                "fert_rate",
                "mean_evenness",
                "mean_fragmentation",
                "det"
            ]
        );
        // DET indicator is not standardized
        assert_eq!(design.l.x[[0, 7]], 1.0);
    }

    #[test]
    fn fertilisation_rate_is_embryos_over_oocytes() {
        let ds = small_dataset();
        let design = build_design(&ds, Setting::Dynamic).unwrap();
        // raw rates over mixed cycles: c2 2/10 = 0.2, c3 0/10 = 0, c4 3/8
        let (mean, sd) = design.derived_params.get("fert_rate").unwrap();
        assert_relative_eq!(mean, (0.2 + 0.0 + 0.375) / 3.0, epsilon = 1e-12);
        let expected_std = (0.2 - mean) / sd;
        // first embryo row belongs to c2
        assert_relative_eq!(design.e.x[[0, 4]], expected_std, epsilon = 1e-12);
    }

    #[test]
    fn build_design_is_deterministic() {
        let ds = small_dataset();
        let a = build_design(&ds, Setting::Dynamic).unwrap();
        let b = build_design(&ds, Setting::Dynamic).unwrap();
        assert_eq!(a.o.x, b.o.x);
        assert_eq!(a.l.x, b.l.x);
        assert_eq!(a.e.x, b.e.x);
    }

    #[test]
    fn csv_round_trip_preserves_records() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_dataset();
        let cycles = dir.path().join("cycles.csv");
        let embryos = dir.path().join("embryos.csv");
        write_dataset(&ds, &cycles, &embryos).unwrap();
        let back = load_dataset(&cycles, &embryos).unwrap();
        assert_eq!(back.cycles(), ds.cycles());
        assert_eq!(back.embryos(), ds.embryos());
    }

    #[test]
    fn loader_reports_row_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let cycles = dir.path().join("cycles.csv");
        std::fs::write(
            &cycles,
            "cycle_id,age,partner_age,attempt,n_oocytes,oocytes_mixed,n_embryos,transfer_done,det,lbe\n\
             c1,33,35,1,5,1,2,0,,\n\
             c2,oops,35,1,5,0,,0,,\n",
        )
        .unwrap();
        let embryos = dir.path().join("embryos.csv");
        std::fs::write(&embryos, "cycle_id,evenness,fragmentation,icsi\n").unwrap();
        let err = load_dataset(&cycles, &embryos).unwrap_err();
        match err {
            DataError::Row { row, message, .. } => {
                assert_eq!(row, 2);
                assert!(message.contains("age"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
