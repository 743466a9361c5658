//! Fixed-precision number formatting shared by all CSV/JSON artifacts.

/// Formats `x` with 12 significant digits, `%g` style: plain decimal for
/// exponents in `[-5, 12)`, scientific otherwise, trailing zeros trimmed.
///
/// Parsing the output and formatting again reproduces the same string.
pub fn sig12(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{:.11e}", x);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..12).contains(&exp) {
        let decimals = (11 - exp).max(0) as usize;
        trim_zeros(format!("{:.*}", decimals, x))
    } else {
        format!("{}e{}", trim_zeros(mantissa.to_string()), exp)
    }
}

fn trim_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    let t = s.trim_end_matches('0').trim_end_matches('.');
    t.to_string()
}

/// Rounds `x` to the value `sig12` prints.
pub fn round12(x: f64) -> f64 {
    sig12(x).parse().unwrap_or(x)
}
