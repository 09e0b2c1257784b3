//! Request sizes from a CSV trace such as BurstGPT.

use std::io::Read;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::BenchError;
use crate::workload::RequestSample;

/// Header names of the token-count columns.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceColumns {
    pub request_tokens: String,
    pub response_tokens: String,
}

impl Default for TraceColumns {
    fn default() -> Self {
        Self {
            request_tokens: "Request tokens".into(),
            response_tokens: "Response tokens".into(),
        }
    }
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize, BenchError> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| BenchError::MalformedTrace(format!("missing column {name:?}")))
}

fn number(record: &csv::StringRecord, idx: usize, name: &str, line: u64) -> Result<u32, BenchError> {
    let raw = record.get(idx).unwrap_or("").trim();
    raw.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite() && *v >= 0.0)
        .map(|v| v.round() as u32)
        .ok_or_else(|| BenchError::MalformedTrace(format!("line {line}: {name} is not a count: {raw:?}")))
}

/// Reads every row, then picks `total` of them with a seeded sampler. With
/// `total` at most the row count, rows are drawn without replacement; beyond
/// that, seeded permutations of all rows are concatenated.
pub fn load_trace(
    reader: impl Read,
    columns: &TraceColumns,
    total: u64,
    seed: u64,
) -> Result<Vec<RequestSample>, BenchError> {
    let mut csv = csv::Reader::from_reader(reader);
    let headers = csv
        .headers()
        .map_err(|e| BenchError::MalformedTrace(e.to_string()))?
        .clone();
    let req = column(&headers, &columns.request_tokens)?;
    let resp = column(&headers, &columns.response_tokens)?;
    let mut rows = Vec::new();
    for (i, record) in csv.records().enumerate() {
        let record = record.map_err(|e| BenchError::MalformedTrace(e.to_string()))?;
        let line = i as u64 + 2;
        rows.push(RequestSample {
            input_tokens: number(&record, req, &columns.request_tokens, line)?,
            max_tokens: number(&record, resp, &columns.response_tokens, line)?.max(1),
        });
    }
    if total == 0 {
        return Ok(Vec::new());
    }
    if rows.is_empty() {
        return Err(BenchError::MalformedTrace("trace has no rows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = total as usize;
    if total <= rows.len() {
        return Ok(index::sample(&mut rng, rows.len(), total)
            .into_iter()
            .map(|i| rows[i].clone())
            .collect());
    }
    let mut out = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    while out.len() < total {
        order.shuffle(&mut rng);
        out.extend(order.iter().take(total - out.len()).map(|&i| rows[i].clone()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use proptest::prelude::*;

    use super::*;

    const FIXTURE: &str = "Timestamp,Model,Request tokens,Response tokens,Total tokens,Log Type\n\
        5,ChatGPT,472,18,490,Conversation log\n\
        45,ChatGPT,1087,230,1317,Conversation log\n\
        118,GPT-4,417,276,693,Conversation log\n";

    fn load(text: &str, total: u64, seed: u64) -> Result<Vec<RequestSample>, BenchError> {
        load_trace(text.as_bytes(), &TraceColumns::default(), total, seed)
    }

    #[test]
    fn all_rows_in_seeded_order() {
        let a = load(FIXTURE, 3, 0).unwrap();
        assert_eq!(a, load(FIXTURE, 3, 0).unwrap());
        let inputs: BTreeSet<u32> = a.iter().map(|s| s.input_tokens).collect();
        assert_eq!(inputs, BTreeSet::from([472, 1087, 417]));
    }

    #[test]
    fn missing_response_column_is_malformed() {
        let text = "Timestamp,Request tokens\n1,5\n";
        assert!(matches!(load(text, 1, 0), Err(BenchError::MalformedTrace(m)) if m.contains("Response tokens")));
    }

    #[test]
    fn non_numeric_cell_is_malformed() {
        let text = "Request tokens,Response tokens\n12,many\n";
        assert!(matches!(load(text, 1, 0), Err(BenchError::MalformedTrace(m)) if m.contains("line 2")));
    }

    #[test]
    fn custom_column_names() {
        let cols = TraceColumns {
            request_tokens: "in".into(),
            response_tokens: "out".into(),
        };
        let s = load_trace("in,out\n3,4\n".as_bytes(), &cols, 1, 0).unwrap();
        assert_eq!(s, vec![RequestSample { input_tokens: 3, max_tokens: 4 }]);
    }

    #[test]
    fn oversampling_cycles_through_all_rows() {
        let s = load(FIXTURE, 7, 1).unwrap();
        assert_eq!(s.len(), 7);
        let first_pass: BTreeSet<u32> = s[..3].iter().map(|x| x.input_tokens).collect();
        assert_eq!(first_pass.len(), 3);
    }

    proptest! {
        #[test]
        fn sampling_is_without_replacement(rows in 1usize..60, pick in 0usize..60, seed in any::<u64>()) {
            let pick = pick.min(rows);
            let mut text = String::from("Request tokens,Response tokens\n");
            for i in 0..rows {
                text.push_str(&format!("{i},{}\n", i + 1));
            }
            let s = load(&text, pick as u64, seed).unwrap();
            prop_assert_eq!(s.len(), pick);
            let distinct: BTreeSet<u32> = s.iter().map(|x| x.input_tokens).collect();
            prop_assert_eq!(distinct.len(), pick);
            prop_assert_eq!(s, load(&text, pick as u64, seed).unwrap());
        }
    }
}
