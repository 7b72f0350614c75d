//! Observed choice data and its CSV encoding.
//!
//! The header for two-payoff menus is
//! `z0_1,z0_2,p0_1,p0_2,z1_1,z1_2,p1_1,p1_2,outcome,outcome_kind`, with an
//! optional trailing `weight` column. Wider menus extend each block. Lines
//! starting with `#` are skipped.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lottery::{Lottery, Menu};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeKind {
    Binary,
    Rate,
}

impl OutcomeKind {
    fn as_str(self) -> &'static str {
        match self {
            OutcomeKind::Binary => "binary",
            OutcomeKind::Rate => "rate",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChoiceRow {
    pub menu: Menu,
    /// Observed fraction choosing lottery 1.
    pub outcome: f64,
    pub outcome_kind: OutcomeKind,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChoiceDataset {
    pub rows: Vec<ChoiceRow>,
}

impl ChoiceDataset {
    pub fn new(rows: Vec<ChoiceRow>) -> Result<Self> {
        if let Some(first) = rows.first() {
            let j = first.menu.payoff_count();
            for (i, r) in rows.iter().enumerate() {
                if r.menu.payoff_count() != j {
                    return Err(Error::DatasetRow {
                        row: i,
                        reason: format!("menu has {} payoffs, expected {j}", r.menu.payoff_count()),
                    });
                }
                if !(0.0..=1.0).contains(&r.outcome) {
                    return Err(Error::DatasetRow {
                        row: i,
                        reason: format!("outcome {} outside [0, 1]", r.outcome),
                    });
                }
                if !(r.weight > 0.0 && r.weight.is_finite()) {
                    return Err(Error::DatasetRow {
                        row: i,
                        reason: format!("weight {} must be positive", r.weight),
                    });
                }
            }
        }
        Ok(Self { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Payoffs per lottery, or `None` for an empty dataset.
    pub fn payoff_count(&self) -> Option<usize> {
        self.rows.first().map(|r| r.menu.payoff_count())
    }

    pub fn menus(&self) -> Vec<Menu> {
        self.rows.iter().map(|r| r.menu.clone()).collect()
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        let j = headers.iter().filter(|h| h.starts_with("z0_")).count();
        if j == 0 {
            return Err(Error::MissingColumn("z0_1".into()));
        }
        let col = |name: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::MissingColumn(name.to_string()))
        };
        let mut blocks = Vec::new();
        for l in 0..2 {
            for prefix in ["z", "p"] {
                let idx = (1..=j)
                    .map(|k| col(&format!("{prefix}{l}_{k}")))
                    .collect::<Result<Vec<_>>>()?;
                blocks.push(idx);
            }
        }
        let outcome_col = col("outcome")?;
        let kind_col = col("outcome_kind")?;
        let weight_col = headers.iter().position(|h| h == "weight");

        let mut rows = Vec::new();
        for (i, record) in rdr.records().enumerate() {
            let record = record?;
            let bad = |reason: String| Error::DatasetRow { row: i, reason };
            let num = |c: usize| -> Result<f64> {
                let s = record.get(c).unwrap_or("");
                s.parse::<f64>()
                    .map_err(|_| bad(format!("cannot parse `{s}` as a number")))
            };
            let block = |b: usize| -> Result<Vec<f64>> { blocks[b].iter().map(|&c| num(c)).collect() };
            let lottery = |b: usize| -> Result<Lottery> {
                Lottery::new(block(b)?, block(b + 1)?).map_err(|e| bad(e.to_string()))
            };
            let menu = Menu::new(lottery(0)?, lottery(2)?).map_err(|e| bad(e.to_string()))?;
            let outcome = num(outcome_col)?;
            let outcome_kind = match record.get(kind_col).unwrap_or("") {
                "binary" => OutcomeKind::Binary,
                "rate" => OutcomeKind::Rate,
                other => return Err(bad(format!("unknown outcome_kind `{other}`"))),
            };
            let weight = match weight_col {
                Some(c) => num(c)?,
                None => 1.0,
            };
            rows.push(ChoiceRow {
                menu,
                outcome,
                outcome_kind,
                weight,
            });
        }
        Self::new(rows)
    }

    pub fn to_writer<W: Write>(&self, writer: W) -> Result<()> {
        let j = self.payoff_count().unwrap_or(2);
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = Vec::new();
        for l in 0..2 {
            for prefix in ["z", "p"] {
                header.extend((1..=j).map(|k| format!("{prefix}{l}_{k}")));
            }
        }
        header.extend(["outcome", "outcome_kind", "weight"].map(String::from));
        wtr.write_record(&header)?;
        for r in &self.rows {
            // `Display` on f64 prints the shortest string that round-trips.
            let mut rec: Vec<String> = r.menu.to_features().iter().map(|v| v.to_string()).collect();
            rec.push(r.outcome.to_string());
            rec.push(r.outcome_kind.as_str().to_string());
            rec.push(r.weight.to_string());
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<ChoiceDataset> {
    ChoiceDataset::from_reader(std::fs::File::open(path)?)
}

pub fn save_dataset(ds: &ChoiceDataset, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    ds.to_writer(std::io::BufWriter::new(file))
}

/// Seeded random split into `(train, test)` with `round(n · holdout_fraction)`
/// test rows, kept between 1 and `n - 1`.
pub fn split_dataset(
    ds: &ChoiceDataset,
    holdout_fraction: f64,
    seed: u64,
) -> Result<(ChoiceDataset, ChoiceDataset)> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "holdout fraction {holdout_fraction} must lie in (0, 1)"
        )));
    }
    let n = ds.len();
    if n < 2 {
        return Err(Error::invalid("need at least two rows to split"));
    }
    let n_test = ((n as f64 * holdout_fraction).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (test_idx, train_idx) = idx.split_at(n_test);
    let pick = |ix: &[usize]| {
        let mut ix = ix.to_vec();
        ix.sort_unstable();
        ChoiceDataset {
            rows: ix.iter().map(|&i| ds.rows[i].clone()).collect(),
        }
    };
    Ok((pick(train_idx), pick(test_idx)))
}
