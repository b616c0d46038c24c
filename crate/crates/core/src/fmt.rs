//! Number formatting shared by every CSV writer.

/// Formats a real with 17 significant digits, which round-trips any `f64`.
pub fn real(x: f64) -> String {
    if x.is_nan() {
        "NaN".to_string()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{x:.16e}")
    }
}

/// Formats an optional real; `None` becomes an empty cell.
pub fn opt_real(x: Option<f64>) -> String {
    x.map(real).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE] {
            let s = real(x);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), x.to_bits(), "{s}");
        }
        assert_eq!(real(f64::INFINITY), "inf");
        assert_eq!(opt_real(None), "");
    }
}
