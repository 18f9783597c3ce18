//! Per-level records of an adaptive run (fitting or Poisson solve).

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LevelRecord {
    pub level: u32,
    /// Space dimension at this level.
    pub dof: usize,
    /// Functions added when entering this level (`4 V_k`); the full
    /// dimension at level 0.
    pub new_functions: usize,
    /// Old functions whose patches changed when entering this level.
    pub modified_functions: usize,
    /// Cells marked at this level (driving the next one).
    pub marked: usize,
    /// Final H, V, C label counts after resolution.
    pub labels: [usize; 3],
    pub max_error: Option<f64>,
    pub mean_error: Option<f64>,
    pub eta_total: Option<f64>,
    pub l2: Option<f64>,
    pub h1: Option<f64>,
    /// Wall time in seconds per phase.
    pub timings: Vec<(String, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveReport {
    pub levels: Vec<LevelRecord>,
    pub converged: bool,
    pub warnings: Vec<String>,
}

impl AdaptiveReport {
    pub fn last(&self) -> Option<&LevelRecord> {
        self.levels.last()
    }

    pub fn final_dof(&self) -> usize {
        self.last().map(|l| l.dof).unwrap_or(0)
    }

    /// `dof_k = dof_{k-1} + new_k` for every level after the first.
    pub fn dof_accounting_holds(&self) -> bool {
        self.levels.windows(2).all(|w| w[1].dof == w[0].dof + w[1].new_functions)
    }

    /// CSV `level,dof,max_error,mean_error`.
    pub fn fit_csv(&self) -> String {
        let mut out = String::from("level,dof,max_error,mean_error\n");
        for l in &self.levels {
            out.push_str(&format!(
                "{},{},{},{}\n",
                l.level,
                l.dof,
                fmt_opt(l.max_error),
                fmt_opt(l.mean_error)
            ));
        }
        out
    }

    /// CSV `level,dof,eta_total,L2,H1`.
    pub fn convergence_csv(&self) -> String {
        let mut out = String::from("level,dof,eta_total,L2,H1\n");
        for l in &self.levels {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                l.level,
                l.dof,
                fmt_opt(l.eta_total),
                fmt_opt(l.l2),
                fmt_opt(l.h1)
            ));
        }
        out
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    match x {
        Some(v) => format!("{v:e}"),
        None => String::new(),
    }
}

/// Parse a CSV written by [`AdaptiveReport::fit_csv`] or
/// [`AdaptiveReport::convergence_csv`] back into header and rows.
pub fn parse_report_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<Option<f64>>>), String> {
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or("empty CSV")?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != header.len() {
            return Err(format!("line {}: expected {} columns, got {}", n + 2, header.len(), cols.len()));
        }
        let mut row = Vec::new();
        for (k, c) in cols.iter().enumerate() {
            let c = c.trim();
            if c.is_empty() {
                row.push(None);
            } else {
                row.push(Some(c.parse::<f64>().map_err(|e| format!("line {} column {}: {e}", n + 2, k + 1))?));
            }
        }
        rows.push(row);
    }
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_lossless() {
        let rep = AdaptiveReport {
            levels: vec![
                LevelRecord { level: 0, dof: 16, new_functions: 16, max_error: Some(0.1 / 3.0), mean_error: Some(1e-17), ..Default::default() },
                LevelRecord { level: 1, dof: 36, new_functions: 20, max_error: Some(2.5e-4), mean_error: None, ..Default::default() },
            ],
            converged: true,
            warnings: vec![],
        };
        assert!(rep.dof_accounting_holds());
        let (h, rows) = parse_report_csv(&rep.fit_csv()).unwrap();
        assert_eq!(h, ["level", "dof", "max_error", "mean_error"]);
        assert_eq!(rows[0][2], Some(0.1 / 3.0));
        assert_eq!(rows[0][3], Some(1e-17));
        assert_eq!(rows[1][3], None);
        let (h, _) = parse_report_csv(&rep.convergence_csv()).unwrap();
        assert_eq!(h, ["level", "dof", "eta_total", "L2", "H1"]);
        assert!(parse_report_csv("a,b\n1\n").is_err());
    }
}
