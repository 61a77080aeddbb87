use metaquant::policy_search::{normalized_bitwidth_csv, SearchReport};

use crate::error::{CliError, Result};

/// Per-layer table and normalized-bitwidth CSV for a search report.
/// Bitwidths are divided by `q_max`, or the report's range maximum.
pub fn report_policy(json: &str, q_max: Option<u8>) -> Result<(String, String)> {
    let report: SearchReport =
        serde_json::from_str(json).map_err(|e| CliError::format("search report", e.to_string()))?;
    let q_max = q_max.unwrap_or(report.bit_range.max());
    if q_max == 0 {
        return Err(CliError::Config("q_max must be positive".into()));
    }
    let policy = &report.best_policy;
    let mut table = String::from("layer  bits  q/q_max\n");
    for (i, (&b, n)) in policy.bits().iter().zip(policy.normalized(q_max)).enumerate() {
        table.push_str(&format!("{i:>5}  {b:>4}  {n:>7.3}\n"));
    }
    table.push_str(&format!(
        "ratio {:.2}x (target {}x), accuracy {:.4}\n",
        report.best_ratio, report.target_ratio, report.best_accuracy
    ));
    Ok((table, normalized_bitwidth_csv(policy, q_max)))
}
