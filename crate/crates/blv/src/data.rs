//! Mortality panel data: loading, validation and exploratory summaries.
//!
//! A panel holds, for each country, a contiguous block of time periods with
//! one probability per age group and period. Countries may enter the panel
//! at different times (ragged start), but within a country the series has
//! no gaps and every period carries the full set of age groups. All
//! probabilities live in the open interval (0, 1).

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Standard abridged age-group lower bounds: 0, 1, then 5-year steps to 105.
pub const AGE_LOWER_BOUNDS: [u32; 23] = [
    0, 1, 5, 10, 15, 20, 25, 30, 35, 40, 45, 50, 55, 60, 65, 70, 75, 80, 85, 90, 95, 100, 105,
];

/// One abridged age group, identified by its lower bound in years.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AgeGroup(u32);

impl AgeGroup {
    /// Builds an age group, rejecting lower bounds outside the standard set.
    pub fn new(lower_bound: u32) -> Result<Self> {
        if AGE_LOWER_BOUNDS.contains(&lower_bound) {
            Ok(Self(lower_bound))
        } else {
            Err(Error::InvalidInput(format!(
                "age group lower bound {lower_bound} is not one of the standard abridged bounds"
            )))
        }
    }

    pub fn lower_bound(&self) -> u32 {
        self.0
    }
}

impl fmt::Display for AgeGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Contiguous observation block for one country.
#[derive(Debug, Clone, PartialEq)]
pub struct CountrySeries {
    country: String,
    first_time: u32,
    /// `N_i x J` matrix: rows are consecutive periods starting at
    /// `first_time`, columns follow the panel's age-group order.
    values: DMatrix<f64>,
}

impl CountrySeries {
    pub fn country(&self) -> &str {
        &self.country
    }

    pub fn first_time(&self) -> u32 {
        self.first_time
    }

    pub fn last_time(&self) -> u32 {
        self.first_time + self.values.nrows() as u32 - 1
    }

    /// Number of observed periods `N_i`.
    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Probability for period offset `t` (0-based) and age column `x`.
    pub fn value(&self, t: usize, x: usize) -> f64 {
        self.values[(t, x)]
    }

    /// Time series for one age column, in period order.
    pub fn age_series(&self, x: usize) -> Vec<f64> {
        self.values.column(x).iter().copied().collect()
    }
}

/// Validated mortality panel.
#[derive(Debug, Clone, PartialEq)]
pub struct MortalityPanel {
    age_groups: Vec<AgeGroup>,
    series: Vec<CountrySeries>,
}

impl MortalityPanel {
    /// Assembles a panel from per-country blocks, enforcing the invariants:
    /// at least one country, at least one age group, series sorted and
    /// unique by country, every value in (0, 1) and `N_i >= 2` throughout.
    pub fn new(age_groups: Vec<AgeGroup>, mut series: Vec<CountrySeries>) -> Result<Self> {
        if age_groups.is_empty() {
            return Err(Error::InvalidInput("panel has no age groups".into()));
        }
        if age_groups.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput(
                "age groups must be strictly increasing".into(),
            ));
        }
        if series.is_empty() {
            return Err(Error::InvalidInput("panel has no countries".into()));
        }
        series.sort_by(|a, b| a.country.cmp(&b.country));
        for w in series.windows(2) {
            if w[0].country == w[1].country {
                return Err(Error::InvalidInput(format!(
                    "country {} appears more than once",
                    w[0].country
                )));
            }
        }
        let j = age_groups.len();
        for s in &series {
            if s.values.ncols() != j {
                return Err(Error::InvalidInput(format!(
                    "country {} has {} age columns, panel has {j}",
                    s.country,
                    s.values.ncols()
                )));
            }
            if s.len() < 2 {
                return Err(Error::Series {
                    country: s.country.clone(),
                    message: format!("needs at least 2 periods, has {}", s.len()),
                });
            }
            for t in 0..s.len() {
                for x in 0..j {
                    let q = s.values[(t, x)];
                    if !(q > 0.0 && q < 1.0) {
                        return Err(Error::Domain {
                            country: s.country.clone(),
                            time: s.first_time + t as u32,
                            age: age_groups[x].lower_bound(),
                            value: q,
                        });
                    }
                }
            }
        }
        Ok(Self { age_groups, series })
    }

    /// Builds one country block from a dense value matrix.
    pub fn series_from_matrix(
        country: impl Into<String>,
        first_time: u32,
        values: DMatrix<f64>,
    ) -> CountrySeries {
        CountrySeries {
            country: country.into(),
            first_time,
            values,
        }
    }

    pub fn age_groups(&self) -> &[AgeGroup] {
        &self.age_groups
    }

    pub fn series(&self) -> &[CountrySeries] {
        &self.series
    }

    /// Number of countries `n`.
    pub fn n_countries(&self) -> usize {
        self.series.len()
    }

    /// Number of age groups `J`.
    pub fn n_ages(&self) -> usize {
        self.age_groups.len()
    }

    /// Periods per country, `N_i`.
    pub fn counts(&self) -> Vec<usize> {
        self.series.iter().map(|s| s.len()).collect()
    }

    pub fn first_times(&self) -> Vec<u32> {
        self.series.iter().map(|s| s.first_time).collect()
    }

    /// Total number of country-period rows, `sum_i N_i`.
    pub fn total_rows(&self) -> usize {
        self.series.iter().map(|s| s.len()).sum()
    }

    /// Total number of scalar observations, `J * sum_i N_i`.
    pub fn n_obs(&self) -> usize {
        self.total_rows() * self.n_ages()
    }

    pub fn country_index(&self, country: &str) -> Option<usize> {
        self.series.iter().position(|s| s.country == country)
    }

    /// Stacks all country blocks into one `total_rows x J` matrix, country
    /// blocks in panel order, periods in time order within each block.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        let rows = self.total_rows();
        let j = self.n_ages();
        let mut out = DMatrix::zeros(rows, j);
        let mut r = 0;
        for s in &self.series {
            for t in 0..s.len() {
                for x in 0..j {
                    out[(r, x)] = s.values[(t, x)];
                }
                r += 1;
            }
        }
        out
    }

    /// Logit-transformed observation matrix, optionally centring each age
    /// column at zero mean.
    pub fn logit_matrix(&self, centred: bool) -> DMatrix<f64> {
        let mut m = self.to_matrix();
        for v in m.iter_mut() {
            *v = logit(*v);
        }
        if centred {
            for x in 0..m.ncols() {
                let mean = m.column(x).mean();
                for r in 0..m.nrows() {
                    m[(r, x)] -= mean;
                }
            }
        }
        m
    }

    /// Per-age-column means of the logit-transformed observations.
    pub fn logit_column_means(&self) -> Vec<f64> {
        let mut m = self.to_matrix();
        for v in m.iter_mut() {
            *v = logit(*v);
        }
        (0..m.ncols()).map(|x| m.column(x).mean()).collect()
    }

    /// Pearson correlation matrix across age columns, on the raw or logit
    /// scale. A (near-)constant column is a degeneracy error naming the
    /// offending age group.
    pub fn correlation_matrix(&self, scale: Scale) -> Result<DMatrix<f64>> {
        let m = match scale {
            Scale::Raw => self.to_matrix(),
            Scale::Logit => self.logit_matrix(false),
        };
        correlation_of_columns(&m, |x| format!("age group {}", self.age_groups[x]))
    }
}

/// Observation scale for exploratory summaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Raw,
    Logit,
}

/// Natural log-odds transform.
pub fn logit(q: f64) -> f64 {
    (q / (1.0 - q)).ln()
}

/// Inverse logit, evaluated stably on both tails.
pub fn inv_logit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// Kendall rank correlation of a series against time.
///
/// Counts the sign of every forward difference over all ordered pairs
/// `t < t'`: a monotonically increasing series scores +1, a decreasing one
/// -1, and ties contribute zero. Needs at least two points.
pub fn kendall_tau(series: &[f64]) -> Result<f64> {
    let t = series.len();
    if t < 2 {
        return Err(Error::InvalidInput(format!(
            "kendall tau needs at least 2 observations, got {t}"
        )));
    }
    let mut s = 0i64;
    for i in 0..t {
        for j in (i + 1)..t {
            let d = series[j] - series[i];
            if d > 0.0 {
                s += 1;
            } else if d < 0.0 {
                s -= 1;
            }
        }
    }
    Ok(2.0 * s as f64 / (t as f64 * (t as f64 - 1.0)))
}

/// One row of the exploratory trend table.
#[derive(Debug, Clone, PartialEq)]
pub struct TrendRow {
    pub country: String,
    pub age: u32,
    pub tau: f64,
}

/// Kendall trend of each country-age series against time.
pub fn trend_table(panel: &MortalityPanel) -> Result<Vec<TrendRow>> {
    let mut rows = Vec::with_capacity(panel.n_countries() * panel.n_ages());
    for s in panel.series() {
        for x in 0..panel.n_ages() {
            let tau = kendall_tau(&s.age_series(x))?;
            rows.push(TrendRow {
                country: s.country().to_string(),
                age: panel.age_groups()[x].lower_bound(),
                tau,
            });
        }
    }
    Ok(rows)
}

fn correlation_of_columns(
    m: &DMatrix<f64>,
    label: impl Fn(usize) -> String,
) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let j = m.ncols();
    if n < 2 {
        return Err(Error::InvalidInput(
            "correlation needs at least 2 rows".into(),
        ));
    }
    let means: Vec<f64> = (0..j).map(|x| m.column(x).mean()).collect();
    let mut sds = Vec::with_capacity(j);
    for x in 0..j {
        let var: f64 = m
            .column(x)
            .iter()
            .map(|v| (v - means[x]).powi(2))
            .sum::<f64>()
            / (n as f64 - 1.0);
        let sd = var.sqrt();
        if sd <= 1e-8 * (1.0 + means[x].abs()) {
            return Err(Error::Degenerate(format!(
                "{} is (near-)constant; correlation is undefined",
                label(x)
            )));
        }
        sds.push(sd);
    }
    let mut out = DMatrix::zeros(j, j);
    for a in 0..j {
        for b in a..j {
            let mut cov = 0.0;
            for r in 0..n {
                cov += (m[(r, a)] - means[a]) * (m[(r, b)] - means[b]);
            }
            cov /= n as f64 - 1.0;
            let c = cov / (sds[a] * sds[b]);
            out[(a, b)] = c;
            out[(b, a)] = c;
        }
    }
    for a in 0..j {
        out[(a, a)] = 1.0;
    }
    Ok(out)
}

/// Reads a panel from CSV with columns `country,time,age,qx`.
///
/// Row order in the file is free; the panel is assembled per country in
/// time order. Errors carry the 1-based line number for malformed rows and
/// name the country and period for structural problems.
pub fn load_panel(path: impl AsRef<Path>) -> Result<MortalityPanel> {
    let file = std::fs::File::open(path.as_ref())?;
    read_panel(file)
}

/// Reads a panel from any CSV byte stream; see [`load_panel`].
pub fn read_panel<R: std::io::Read>(reader: R) -> Result<MortalityPanel> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    {
        let headers = rdr.headers()?;
        let want = ["country", "time", "age", "qx"];
        let got: Vec<&str> = headers.iter().map(str::trim).collect();
        if got != want {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header country,time,age,qx, got {}", got.join(",")),
            });
        }
    }
    // country -> time -> age lower bound -> value
    let mut cells: BTreeMap<String, BTreeMap<u32, BTreeMap<u32, f64>>> = BTreeMap::new();
    let mut ages: std::collections::BTreeSet<u32> = std::collections::BTreeSet::new();
    for (idx, record) in rdr.records().enumerate() {
        let line = idx + 2; // header is line 1
        let record = record?;
        if record.len() != 4 {
            return Err(Error::Parse {
                line,
                message: format!("expected 4 fields, got {}", record.len()),
            });
        }
        let country = record[0].trim();
        if country.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty country identifier".into(),
            });
        }
        let time: u32 = record[1].trim().parse().map_err(|_| Error::Parse {
            line,
            message: format!("invalid time {:?}", &record[1]),
        })?;
        let age: u32 = record[2].trim().parse().map_err(|_| Error::Parse {
            line,
            message: format!("invalid age {:?}", &record[2]),
        })?;
        AgeGroup::new(age).map_err(|_| Error::Parse {
            line,
            message: format!("age {age} is not a standard abridged lower bound"),
        })?;
        let q: f64 = record[3].trim().parse().map_err(|_| Error::Parse {
            line,
            message: format!("invalid probability {:?}", &record[3]),
        })?;
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::Domain {
                country: country.to_string(),
                time,
                age,
                value: q,
            });
        }
        ages.insert(age);
        let prev = cells
            .entry(country.to_string())
            .or_default()
            .entry(time)
            .or_default()
            .insert(age, q);
        if prev.is_some() {
            return Err(Error::Parse {
                line,
                message: format!("duplicate cell for country {country}, time {time}, age {age}"),
            });
        }
    }
    if cells.is_empty() {
        return Err(Error::InvalidInput("panel file has no data rows".into()));
    }
    let age_list: Vec<u32> = ages.iter().copied().collect();
    let age_groups: Vec<AgeGroup> = age_list
        .iter()
        .map(|&a| AgeGroup::new(a))
        .collect::<Result<_>>()?;
    let j = age_groups.len();
    let mut series = Vec::with_capacity(cells.len());
    for (country, times) in cells {
        let first = *times.keys().next().expect("non-empty by construction");
        let last = *times.keys().last().expect("non-empty by construction");
        let span = (last - first + 1) as usize;
        if times.len() != span {
            let mut expected = first;
            for &t in times.keys() {
                if t != expected {
                    return Err(Error::Series {
                        country,
                        message: format!("gap in time series: have {}, next is {t}", expected - 1),
                    });
                }
                expected += 1;
            }
        }
        let mut values = DMatrix::zeros(span, j);
        for (&time, by_age) in &times {
            for (x, &age) in age_list.iter().enumerate() {
                match by_age.get(&age) {
                    Some(&q) => values[((time - first) as usize, x)] = q,
                    None => {
                        return Err(Error::Series {
                            country,
                            message: format!("time {time} is missing age group {age}"),
                        })
                    }
                }
            }
            if by_age.len() != j {
                return Err(Error::Series {
                    country,
                    message: format!(
                        "time {time} has {} age groups, panel has {j}",
                        by_age.len()
                    ),
                });
            }
        }
        series.push(CountrySeries {
            country,
            first_time: first,
            values,
        });
    }
    MortalityPanel::new(age_groups, series)
}

/// Writes a panel as CSV, rows sorted by country, time, then age.
///
/// Values are written in shortest round-trip form, so a load/save cycle
/// reproduces the file byte for byte.
pub fn save_panel(panel: &MortalityPanel, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("country,time,age,qx\n");
    for s in panel.series() {
        for t in 0..s.len() {
            for (x, age) in panel.age_groups().iter().enumerate() {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    s.country(),
                    s.first_time() + t as u32,
                    age.lower_bound(),
                    s.value(t, x)
                ));
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}
