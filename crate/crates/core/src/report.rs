//! Plot-ready run outputs.
//!
//! | file                 | layout                                                    |
//! |----------------------|-----------------------------------------------------------|
//! | `gains.csv`          | `step` then one column per skill: expected gain (nats)    |
//! | `belief.csv`         | `step` then one column per function; step 0 is the prior  |
//! | `trace.json`         | the full loop trace                                       |
//! | `mom_likelihood.csv` | `sequence` then one column per timestep                   |
//! | `summary.json`       | top blamed functions, termination, entropy                |

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blame::entropy;
use crate::error::{Error, Result};
use crate::planner::{LoopTrace, Termination};

pub const TOP_K: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Blamed {
    pub function: String,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub top: Vec<Blamed>,
    pub steps: usize,
    pub termination: Termination,
    pub final_entropy: f64,
    /// Skill executed at each step.
    pub choices: Vec<String>,
}

impl Summary {
    pub fn from_trace(trace: &LoopTrace) -> Result<Self> {
        let belief = trace.final_belief()?;
        let top = belief
            .top_k(TOP_K)
            .into_iter()
            .map(|(f, p)| Blamed {
                function: trace.functions[f.0].clone(),
                probability: p,
            })
            .collect();
        Ok(Self {
            top,
            steps: trace.steps.len(),
            termination: trace.termination.clone(),
            final_entropy: entropy(&belief),
            choices: trace.steps.iter().map(|s| s.skill_name.clone()).collect(),
        })
    }
}

/// Every report file of one run, rendered in memory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportBundle {
    pub gains_csv: String,
    pub belief_csv: String,
    pub trace_json: String,
    pub mom_likelihood_csv: String,
    pub summary_json: String,
}

fn csv_line(fields: impl IntoIterator<Item = String>) -> String {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(fields).expect("in-memory csv write");
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("utf-8 csv")
}

fn json(value: &impl Serialize) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::format("<report>", e))?;
    s.push('\n');
    Ok(s)
}

/// Wide CSV of per-timestep likelihoods, one row per labelled sequence.
pub fn likelihood_csv(rows: &[(String, Vec<f64>)]) -> String {
    let t = rows.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
    let mut out = csv_line(std::iter::once("sequence".to_string()).chain((0..t).map(|i| i.to_string())));
    for (label, values) in rows {
        out += &csv_line(
            std::iter::once(label.clone())
                .chain(values.iter().map(|v| v.to_string()))
                .chain((values.len()..t).map(|_| String::new())),
        );
    }
    out
}

impl ReportBundle {
    /// Renders the bundle for a loop trace; `mom_rows` adds detector
    /// likelihoods beyond those recorded in the trace itself.
    pub fn from_trace(trace: &LoopTrace, mom_rows: &[(String, Vec<f64>)]) -> Result<Self> {
        let mut gains = csv_line(std::iter::once("step".to_string()).chain(trace.skills.iter().cloned()));
        let mut belief = csv_line(std::iter::once("step".to_string()).chain(trace.functions.iter().cloned()));
        belief += &csv_line(std::iter::once("0".to_string()).chain(trace.initial_belief.iter().map(|p| p.to_string())));
        let mut steps: Vec<_> = trace.steps.iter().collect();
        steps.sort_by_key(|s| s.step);
        let mut mom: Vec<(String, Vec<f64>)> = Vec::new();
        for s in steps {
            gains += &csv_line(std::iter::once(s.step.to_string()).chain(s.gains.iter().map(|g| g.to_string())));
            belief += &csv_line(std::iter::once(s.step.to_string()).chain(s.posterior.iter().map(|p| p.to_string())));
            if let Some(l) = &s.mom_likelihood {
                mom.push((format!("step_{}", s.step), l.clone()));
            }
        }
        mom.extend(mom_rows.iter().cloned());
        Ok(Self {
            gains_csv: gains,
            belief_csv: belief,
            trace_json: json(trace)?,
            mom_likelihood_csv: likelihood_csv(&mom),
            summary_json: json(&Summary::from_trace(trace)?)?,
        })
    }

    pub fn files(&self) -> [(&'static str, &str); 5] {
        [
            ("gains.csv", &self.gains_csv),
            ("belief.csv", &self.belief_csv),
            ("trace.json", &self.trace_json),
            ("mom_likelihood.csv", &self.mom_likelihood_csv),
            ("summary.json", &self.summary_json),
        ]
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in self.files() {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Reads a `trace.json` written by [`ReportBundle::write`].
pub fn read_trace(path: &Path) -> Result<LoopTrace> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let trace: LoopTrace = serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
    let f = trace.functions.len();
    let k = trace.skills.len();
    if trace.initial_belief.len() != f
        || trace
            .steps
            .iter()
            .any(|s| s.posterior.len() != f || s.gains.len() != k || s.skill >= k)
    {
        return Err(Error::format(
            path,
            "trace rows do not match its skill and function lists",
        ));
    }
    trace.final_belief().map_err(|e| Error::in_file(path, e))?;
    Ok(trace)
}
