use std::io::Write;

use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's tasks (or minibatches).
    pub loss: f64,
    /// Clean query accuracy of the adapted models.
    pub clean_acc: f64,
    /// Fraction of clean-correct queries the training attack flipped.
    pub attack_success: f64,
    pub seconds: Option<f64>,
    pub lr: f64,
    pub attack_invocations: usize,
    pub max_perturbation: f64,
}

/// One record per epoch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

pub const TRAIN_LOG_COLUMNS: [&str; 5] = ["epoch", "loss", "clean_acc", "attack_success", "seconds"];

impl TrainLog {
    pub fn total_attack_invocations(&self) -> usize {
        self.records.iter().map(|r| r.attack_invocations).sum()
    }

    /// CSV with the standard columns followed by `trailing` constant columns
    /// (e.g. config hash and seed). `seconds` is empty when not recorded.
    pub fn write_csv<W: Write>(&self, out: W, trailing: &[(&str, String)]) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<&str> = TRAIN_LOG_COLUMNS.to_vec();
        header.extend(trailing.iter().map(|(k, _)| *k));
        w.write_record(&header).map_err(crate::tasks::DataError::from)?;
        for r in &self.records {
            let mut row = vec![
                r.epoch.to_string(),
                r.loss.to_string(),
                r.clean_acc.to_string(),
                r.attack_success.to_string(),
                r.seconds.map(|s| s.to_string()).unwrap_or_default(),
            ];
            row.extend(trailing.iter().map(|(_, v)| v.clone()));
            w.write_record(&row).map_err(crate::tasks::DataError::from)?;
        }
        w.flush().map_err(crate::tasks::DataError::from)?;
        Ok(())
    }
}
