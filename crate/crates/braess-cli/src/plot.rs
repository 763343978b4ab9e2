// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reshape a sweep CSV into gnuplot data blocks.
//!
//! Columns are looked up by header name, so the column order of the input
//! does not affect the output. Each metric gets one block of `theta value`
//! lines introduced by `#` comments; blocks are separated by two blank lines
//! so gnuplot can address them with `index`.

use braess::metrics::fmt_g12;
use braess::{Error, Result};

/// Metrics emitted, one block each, in this order.
pub const PLOT_METRICS: [&str; 3] = ["phi_t", "phi_p", "phi_c"];

/// Render the sweep CSV `text` as whitespace-separated data blocks.
///
/// Errors with `MALFORMED_CSV` when the text is empty, lacks one of the
/// `theta`/`phi_*` columns, has ragged rows, has no data rows, or holds a
/// non-numeric value in a required column.
pub fn render_plot_data(text: &str) -> Result<String> {
    let malformed = |msg: String| Error::MalformedCsv(msg);
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| malformed(format!("cannot read header: {e}")))?
        .clone();
    if headers.iter().all(str::is_empty) {
        return Err(malformed("empty CSV: no header line".into()));
    }
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| malformed(format!("missing column `{name}`")))
    };
    let theta_col = column("theta")?;
    let metric_cols = PLOT_METRICS.map(column);
    let metric_cols: Vec<usize> = metric_cols.into_iter().collect::<Result<_>>()?;
    let param = headers.iter().position(|h| h == "param");

    let mut param_name: Option<String> = None;
    let mut rows: Vec<(f64, [f64; 3])> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| malformed(format!("line {line}: {e}")))?;
        let number = |col: usize| -> Result<f64> {
            let raw = record.get(col).unwrap_or("");
            raw.parse::<f64>().map_err(|_| {
                malformed(format!("line {line}: column `{}` is not a number: `{raw}`", &headers[col]))
            })
        };
        let theta = number(theta_col)?;
        let mut values = [0.0; 3];
        for (v, &col) in values.iter_mut().zip(&metric_cols) {
            *v = number(col)?;
        }
        if param_name.is_none() {
            param_name = param.and_then(|c| record.get(c)).map(str::to_owned);
        }
        rows.push((theta, values));
    }
    if rows.is_empty() {
        return Err(malformed("no data rows".into()));
    }

    let mut out = String::new();
    for (k, metric) in PLOT_METRICS.iter().enumerate() {
        if k > 0 {
            out.push_str("\n\n");
        }
        match &param_name {
            Some(p) if !p.is_empty() => out.push_str(&format!("# {metric} vs {p}\n")),
            _ => out.push_str(&format!("# {metric}\n")),
        }
        out.push_str(&format!("# theta {metric}\n"));
        for (theta, values) in &rows {
            out.push_str(&format!("{} {}\n", fmt_g12(*theta), fmt_g12(values[k])));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "param,theta,phi_t,phi_p,phi_c,dphi_t,dphi_p,dphi_c,method,boundary,verdicts\n\
        fbar:0,0.5,1,2,3,,,,,false,\n\
        fbar:0,1,1.5,2.5,4,0.1,0.2,0.3,kkt,false,PT\n";

    #[test]
    fn three_blocks_in_metric_order() {
        let out = render_plot_data(SAMPLE).unwrap();
        let blocks: Vec<&str> = out.split("\n\n\n").collect();
        assert_eq!(blocks.len(), 3);
        assert!(blocks[0].starts_with("# phi_t vs fbar:0\n# theta phi_t\n0.5 1\n1 1.5"));
        assert!(blocks[1].contains("0.5 2\n1 2.5"));
        assert!(blocks[2].contains("0.5 3\n1 4"));
    }

    #[test]
    fn reordered_columns_give_identical_output() {
        let reordered = "phi_c,verdicts,theta,phi_p,param,phi_t\n3,,0.5,2,fbar:0,1\n4,PT,1,2.5,fbar:0,1.5\n";
        assert_eq!(render_plot_data(SAMPLE).unwrap(), render_plot_data(reordered).unwrap());
    }

    #[test]
    fn malformed_inputs() {
        for bad in [
            "",
            "\n",
            "theta,phi_t,phi_p\n1,2,3\n",
            "theta,phi_t,phi_p,phi_c\n",
            "theta,phi_t,phi_p,phi_c\n1,2,x,4\n",
            "theta,phi_t,phi_p,phi_c\n1,2,3\n",
        ] {
            let err = render_plot_data(bad).unwrap_err();
            assert_eq!(err.code(), "MALFORMED_CSV", "input {bad:?}");
        }
    }
}
