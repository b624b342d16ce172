//! Number formatting shared by the CSV exports.

/// Formats `x` with 9 significant digits, fixed notation for moderate
/// magnitudes and scientific notation otherwise.
pub fn sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let exp = x.abs().log10().floor() as i32;
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        // The rounding above may carry into a new digit (9.99999999996 -> 10.00000000);
        // trimming zeros handles both cases.
        trim_zeros(s)
    } else {
        let s = format!("{x:.8e}");
        match s.split_once('e') {
            Some((mantissa, e)) => format!("{}e{}", trim_zeros(mantissa.to_string()), e),
            None => s,
        }
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// Quotes a CSV field if it contains separators or quotes.
pub fn field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(sig9(0.0), "0");
        assert_eq!(sig9(1.0), "1");
        assert_eq!(sig9(-0.5), "-0.5");
        assert_eq!(sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(sig9(2.0 / 3.0), "0.666666667");
        assert_eq!(sig9(123456.7891234), "123456.789");
        assert_eq!(sig9(1.0e-7), "1e-7");
        assert_eq!(sig9(6.02214076e23), "6.02214076e23");
        let back: f64 = sig9(0.123456789123).parse().unwrap();
        assert!((back - 0.123456789).abs() < 1e-12);
    }

    #[test]
    fn quoting() {
        assert_eq!(field("v01"), "v01");
        assert_eq!(field("a,b"), "\"a,b\"");
    }
}
