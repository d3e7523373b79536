use std::fmt::Write as _;

use crate::model::{ExecOutcome, ExecutionResponse};

/// Version of the shipped template set. Scripted fixtures are keyed by prompt
/// digest, so any template edit must bump this.
pub const TEMPLATE_VERSION: &str = "v1";

pub const PLANNER: &str = include_str!("../../assets/templates/planner.txt");
pub const VALIDATOR_SELECTION: &str =
    include_str!("../../assets/templates/validator_selection.txt");
pub const VALIDATOR_CONDITION: &str =
    include_str!("../../assets/templates/validator_condition.txt");
pub const FIX: &str = include_str!("../../assets/templates/fix.txt");
pub const SELECTION: &str = include_str!("../../assets/templates/selection.txt");
pub const FEEDBACK_EDITOR: &str = include_str!("../../assets/templates/feedback_editor.txt");

/// Substitutes `{{name}}` placeholders.
pub fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (name, value) in vars {
        out = out.replace(&format!("{{{{{name}}}}}"), value);
    }
    out
}

pub const MAX_PROMPT_ROWS: usize = 20;
pub const MAX_PROMPT_COLUMNS: usize = 10;

/// Execution response as shown to agents, cut to 20 rows by 10 columns.
pub fn render_response(resp: &ExecutionResponse) -> String {
    match &resp.outcome {
        ExecOutcome::SyntaxError { error_text } => format!("Execution error: {error_text}"),
        ExecOutcome::Timeout => "Execution error: the query timed out".to_string(),
        ExecOutcome::Ok { rows } if rows.rows.is_empty() => {
            "Execution result: empty set".to_string()
        }
        ExecOutcome::Ok { rows } => {
            let total = rows.rows.len();
            let mut out = format!(
                "Execution result ({total} row{}):\n",
                if total == 1 { "" } else { "s" }
            );
            for row in rows.rows.iter().take(MAX_PROMPT_ROWS) {
                let mut cells: Vec<String> = row
                    .iter()
                    .take(MAX_PROMPT_COLUMNS)
                    .map(|c| c.to_string())
                    .collect();
                if row.len() > MAX_PROMPT_COLUMNS {
                    cells.push("...".into());
                }
                let _ = writeln!(out, "({})", cells.join(", "));
            }
            if total > MAX_PROMPT_ROWS {
                let _ = writeln!(out, "... ({} more rows)", total - MAX_PROMPT_ROWS);
            }
            out.truncate(out.trim_end().len());
            out
        }
    }
}
