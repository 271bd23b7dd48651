//! Small helpers for the line-oriented on-disk formats.

/// Decimal rendering that round-trips exactly through `str::parse::<f64>` and
/// always carries at least six significant digits.
pub fn fmt_f64(v: f64) -> String {
    if !v.is_finite() {
        return if v.is_nan() {
            "nan".into()
        } else if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    let mut s = format!("{v:?}");
    if s.contains('e') || s.contains('E') {
        return s;
    }
    if !s.contains('.') {
        s.push_str(".0");
    }
    let digits = s
        .chars()
        .filter(|c| c.is_ascii_digit())
        .collect::<String>();
    let significant = if v == 0.0 {
        digits.len() - 1
    } else {
        digits.trim_start_matches('0').len()
    };
    for _ in significant..6 {
        s.push('0');
    }
    s
}

pub fn parse_f64(token: &str) -> Option<f64> {
    let v: f64 = token.trim().parse().ok()?;
    Some(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pads_short_values() {
        assert_eq!(fmt_f64(100.0), "100.000");
        assert_eq!(fmt_f64(0.5), "0.500000");
        assert_eq!(fmt_f64(-3.25), "-3.25000");
        assert_eq!(fmt_f64(0.0), "0.000000");
    }

    proptest! {
        #[test]
        fn roundtrips(v in proptest::num::f64::NORMAL | proptest::num::f64::ZERO) {
            let s = fmt_f64(v);
            prop_assert_eq!(parse_f64(&s).unwrap().to_bits(), v.to_bits());
        }
    }
}
