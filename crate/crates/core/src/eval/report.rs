use std::io::Write;

use super::{AttackReport, Metrics};
use crate::tasks::DataError;
use crate::{Error, Result};

/// A rendered comparison: header row plus string cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

/// `0.5787 -> "57.87%"`.
pub fn fmt_percent(v: f64) -> String {
    format!("{:.2}%", 100.0 * v)
}

impl Table {
    fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, name: &str, values: &[f64]) {
        let mut row = vec![name.to_string()];
        row.extend(values.iter().map(|&v| fmt_percent(v)));
        self.rows.push(row);
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.columns).map_err(DataError::from)?;
        for r in &self.rows {
            w.write_record(r).map_err(DataError::from)?;
        }
        w.flush().map_err(DataError::from)?;
        Ok(())
    }

    /// Pipe-separated rendering for terminals and markdown.
    pub fn to_markdown(&self) -> String {
        let line = |cells: &[String]| format!("| {} |\n", cells.join(" | "));
        let mut s = line(&self.columns);
        s.push_str(&line(&vec!["---".to_string(); self.columns.len()]));
        for r in &self.rows {
            s.push_str(&line(r));
        }
        s
    }
}

/// `Model | A_nat | A_adv`.
pub fn table_natural(rows: &[(String, Metrics)]) -> Table {
    let mut t = Table::new(&["Model", "A_nat", "A_adv"]);
    for (name, m) in rows {
        t.push(name, &[m.a_nat, m.a_adv]);
    }
    t
}

/// `Model | A_nat Transfer | A_adv Transfer | A_nat Meta | A_adv Meta`, one row
/// per head: `(name, transfer backbone, meta-learned backbone)`.
pub fn table_transfer_vs_meta(rows: &[(String, Metrics, Metrics)]) -> Table {
    let mut t = Table::new(&["Model", "A_nat Transfer", "A_adv Transfer", "A_nat Meta", "A_adv Meta"]);
    for (name, transfer, meta) in rows {
        t.push(name, &[transfer.a_nat, transfer.a_adv, meta.a_nat, meta.a_adv]);
    }
    t
}

/// `<first> | A_nat | A_adv | A_nat(AT) | A_adv(AT)`. Every row must carry
/// adversarial fine-tuning results.
pub fn table_at(first: &str, rows: &[(String, Metrics)]) -> Result<Table> {
    let mut t = Table::new(&[first, "A_nat", "A_adv", "A_nat(AT)", "A_adv(AT)"]);
    for (name, m) in rows {
        let (Some(nat_at), Some(adv_at)) = (m.a_nat_at, m.a_adv_at) else {
            return Err(Error::InvalidConfig(format!(
                "row '{name}' was evaluated without adversarial fine-tuning"
            )));
        };
        t.push(name, &[m.a_nat, m.a_adv, nat_at, adv_at]);
    }
    Ok(t)
}

/// `Model | A_adv`: robust accuracy of several heads on one backbone.
pub fn table_heads(rows: &[(String, Metrics)]) -> Table {
    let mut t = Table::new(&["Model", "A_adv"]);
    for (name, m) in rows {
        t.push(name, &[m.a_adv]);
    }
    t
}

/// `Model | A_DF | A_MI | A_20-PGD`, with `A_transfer` appended when any row has it.
pub fn table_attacks(rows: &[(String, AttackReport)]) -> Table {
    let with_transfer = rows.iter().any(|(_, r)| r.transfer.is_some());
    let mut cols = vec!["Model", "A_DF", "A_MI", "A_20-PGD"];
    if with_transfer {
        cols.push("A_transfer");
    }
    let mut t = Table::new(&cols);
    for (name, r) in rows {
        let mut row = vec![
            name.clone(),
            fmt_percent(r.deepfool),
            fmt_percent(r.mi_fgsm),
            fmt_percent(r.pgd_restarts),
        ];
        if with_transfer {
            row.push(r.transfer.map(fmt_percent).unwrap_or_default());
        }
        t.rows.push(row);
    }
    t
}
