//! Number and matrix formatting for reports.

use nalgebra::DMatrix;

const SIGNIFICANT: i32 = 12;

/// `v` with 12 significant digits, trailing zeros trimmed (like `%.12g`).
pub fn num(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let exp = v.abs().log10().floor() as i32;
    if (-5..SIGNIFICANT).contains(&exp) {
        let decimals = (SIGNIFICANT - 1 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        let s = if s.contains('.') { s.trim_end_matches('0').trim_end_matches('.').to_string() } else { s };
        if s == "-0" {
            "0".into()
        } else {
            s
        }
    } else {
        let s = format!("{:.*e}", (SIGNIFICANT - 1) as usize, v);
        match s.split_once('e') {
            Some((mantissa, e)) if mantissa.contains('.') => {
                format!("{}e{e}", mantissa.trim_end_matches('0').trim_end_matches('.'))
            }
            _ => s,
        }
    }
}

/// `[a, b; c, d]`, or the bare number for 1x1.
pub fn matrix(m: &DMatrix<f64>) -> String {
    if m.len() == 1 {
        return num(m[(0, 0)]);
    }
    let rows: Vec<String> = m.row_iter().map(|r| r.iter().map(|&v| num(v)).collect::<Vec<_>>().join(", ")).collect();
    format!("[{}]", rows.join("; "))
}

pub fn tuple(ms: &[DMatrix<f64>]) -> String {
    ms.iter().map(matrix).collect::<Vec<_>>().join(", ")
}

/// Row-major entries, for machine-readable output.
pub fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}
