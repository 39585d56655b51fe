use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};

use indistill_core::metrics::EvalReport;
use indistill_core::train::DistillConfig;

pub const LEDGER_FILE: &str = "ledger.csv";

pub const HEADER: &str = "version,command,config_hash,seed,method,scheduler,task_loss,a,b,q,epochs,status,\
map,precision_at_k,k,accuracy,mi_divergence,parameters,latency_ms,artifact";

/// One append-only experiment record.
pub struct Row<'a> {
    pub command: &'a str,
    pub config_hash: &'a str,
    pub config: &'a DistillConfig,
    pub status: &'a str,
    pub report: Option<&'a EvalReport>,
    pub artifact: &'a str,
}

impl Row<'_> {
    pub fn to_csv(&self) -> String {
        let c = self.config;
        let metrics = match self.report {
            Some(r) => r.csv_row_metrics(),
            None => ",,,,,,".to_string(),
        };
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            indistill_core::VERSION,
            self.command,
            self.config_hash,
            c.seed,
            c.method,
            c.scheduler,
            c.task_loss,
            c.a,
            c.b,
            c.q,
            c.epochs,
            self.status,
            metrics,
            self.artifact
        )
    }
}

trait ReportColumns {
    fn csv_row_metrics(&self) -> String;
}

impl ReportColumns for EvalReport {
    fn csv_row_metrics(&self) -> String {
        format!(
            "{:.6},{:.6},{},{:.6},{},{},{:.6}",
            self.map,
            self.precision_at_k,
            self.k,
            self.accuracy,
            self.mi_divergence.map(|v| format!("{v:.6}")).unwrap_or_default(),
            self.parameters,
            self.latency_ms
        )
    }
}

/// Appends `row` to `<dir>/ledger.csv`, writing the header for a new file.
pub fn append(dir: &Path, row: &Row<'_>) -> Result<()> {
    let path = dir.join(LEDGER_FILE);
    let fresh = !path.exists();
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .with_context(|| format!("opening ledger {}", path.display()))?;
    if fresh {
        writeln!(file, "{HEADER}")?;
    }
    writeln!(file, "{}", row.to_csv())?;
    Ok(())
}
