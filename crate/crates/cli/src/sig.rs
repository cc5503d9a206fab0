//! `sigdim` and `sig`: signature utilities that need no model.

use std::io::{Read, Write};

use ste_core::signature::{coefficient_labels, signature, stream_signature, PiecewiseLinearPath};
use ste_core::{sig_dim, Tensor};

use crate::Failure;

/// Rows of the reference dimension table, as printed.
pub const REFERENCE_DIMS: [(usize, usize, &str); 20] = [
    (512, 1, "512"),
    (512, 2, "262K"),
    (256, 2, "66K"),
    (128, 2, "16K"),
    (128, 3, "2M"),
    (64, 2, "4K"),
    (64, 3, "266K"),
    (32, 2, "1057"),
    (32, 3, "34K"),
    (16, 2, "272"),
    (16, 3, "4K"),
    (8, 2, "72"),
    (8, 3, "584"),
    (8, 4, "5K"),
    (4, 4, "340"),
    (4, 5, "1365"),
    (4, 6, "5K"),
    (2, 9, "1022"),
    (2, 10, "2K"),
    (2, 12, "8K"),
];

/// Whether `computed` agrees with a printed value. Abbreviated values are
/// sometimes rounded and sometimes truncated, so they only need to lie within one unit.
pub fn agrees(computed: usize, printed: &str) -> bool {
    let (digits, unit) = match printed.as_bytes().last() {
        Some(b'K') => (&printed[..printed.len() - 1], 1e3),
        Some(b'M') => (&printed[..printed.len() - 1], 1e6),
        _ => (printed, 1.0),
    };
    let Ok(value) = digits.parse::<f64>() else {
        return false;
    };
    if unit == 1.0 {
        return computed as f64 == value;
    }
    (computed as f64 / unit - value).abs() < 1.0
}

pub fn dims_table() -> Result<String, Failure> {
    let mut out = format!("{:>8}  {:>5}  {:>9}  {:>9}\n", "d_presig", "order", "d_sig", "printed");
    let mut flagged = 0;
    for (d, n, printed) in REFERENCE_DIMS {
        let computed = sig_dim(d, n)?;
        let mark = if agrees(computed, printed) {
            " "
        } else {
            flagged += 1;
            "*"
        };
        out.push_str(&format!("{d:>8}  {n:>5}  {computed:>9}  {printed:>9}{mark}\n"));
    }
    if flagged > 0 {
        out.push_str(
            "\n* printed value includes the constant level-0 term, (d^(N+1) - 1)/(d - 1);\n  \
             d_sig here is sum_{k=1..N} d^k, which every other printed row follows.\n",
        );
    }
    Ok(out)
}

/// Parse a headerless or headed numeric CSV into path rows.
pub fn read_path_csv<R: Read>(reader: R) -> Result<PiecewiseLinearPath, Failure> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 1;
        let rec = rec.map_err(|e| Failure::data(format!("row {line}: {e}")))?;
        if rec.iter().all(str::is_empty) {
            continue;
        }
        let parsed: Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        let values = match parsed {
            Ok(v) => v,
            Err(_) if i == 0 => continue,
            Err(e) => return Err(Failure::data(format!("row {line}: {e}"))),
        };
        if let Some(first) = rows.first() {
            if first.len() != values.len() {
                return Err(Failure::data(format!(
                    "row {line}: expected {} columns, found {}",
                    first.len(),
                    values.len()
                )));
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Failure::data(format!("row {line}: non-finite value")));
        }
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(Failure::data("path file has no numeric rows"));
    }
    Ok(PiecewiseLinearPath::from_rows(&rows)?)
}

pub fn write_signature_csv<W: Write>(
    path: &PiecewiseLinearPath,
    order: usize,
    stream: bool,
    out: W,
) -> Result<(), Failure> {
    let labels = coefficient_labels(path.channels(), order);
    let rows: Tensor = if stream {
        stream_signature(path, order)?
    } else {
        let coeffs = signature(path, order)?.into_coeffs();
        Tensor::matrix(1, coeffs.len(), coeffs)?
    };
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Failure::data(format!("writing CSV: {e}"));
    w.write_record(&labels).map_err(io)?;
    let (n_rows, _) = rows.dims2()?;
    for r in 0..n_rows {
        w.write_record(rows.row(r).iter().map(|v| v.to_string())).map_err(io)?;
    }
    w.flush().map_err(|e| Failure::data(format!("writing CSV: {e}")))?;
    Ok(())
}
