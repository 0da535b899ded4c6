//! Long-form metric tables.

use std::fmt::Write as _;

/// One measurement: `(metric, subject_id, region, step, value)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub metric: String,
    pub subject_id: String,
    pub region: String,
    pub step: Option<i64>,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    rows: Vec<ReportRow>,
}

pub const REPORT_HEADER: &str = "metric,subject_id,region,step,value";

impl MetricsReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(
        &mut self,
        metric: impl Into<String>,
        subject_id: impl Into<String>,
        region: impl Into<String>,
        step: Option<i64>,
        value: f64,
    ) {
        self.rows.push(ReportRow {
            metric: metric.into(),
            subject_id: subject_id.into(),
            region: region.into(),
            step,
            value,
        });
    }

    pub fn extend(&mut self, other: MetricsReport) {
        self.rows.extend(other.rows);
    }

    pub fn rows(&self) -> &[ReportRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// CSV text with LF endings. An empty step is written as an empty field.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(32 * (self.rows.len() + 1));
        out.push_str(REPORT_HEADER);
        out.push('\n');
        for r in &self.rows {
            let step = r.step.map(|s| s.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                csv_field(&r.metric),
                csv_field(&r.subject_id),
                csv_field(&r.region),
                step,
                format_g17(r.value)
            );
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// C-style `%.17g`: 17 significant digits, trailing zeros trimmed, positional
/// notation for decimal exponents in `[-4, 17)`.
pub fn format_g17(v: f64) -> String {
    const PRECISION: i32 = 17;
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return if v.is_sign_negative() {
            "-0".into()
        } else {
            "0".into()
        };
    }
    let sci = format!("{:.*e}", (PRECISION - 1) as usize, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent notation");
    let exp: i32 = exp.parse().expect("integer exponent");
    let negative = mantissa.starts_with('-');
    let digits: String = mantissa.chars().filter(char::is_ascii_digit).collect();
    let sign = if negative { "-" } else { "" };

    if !(-4..PRECISION).contains(&exp) {
        let (head, tail) = digits.split_at(1);
        let tail = tail.trim_end_matches('0');
        let mut s = format!("{sign}{head}");
        if !tail.is_empty() {
            s.push('.');
            s.push_str(tail);
        }
        let _ = write!(s, "e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs());
        return s;
    }

    let mut s = String::from(sign);
    if exp < 0 {
        s.push_str("0.");
        for _ in 0..(-exp - 1) {
            s.push('0');
        }
        s.push_str(digits.trim_end_matches('0'));
    } else {
        let split = (exp + 1) as usize;
        let (int_part, frac) = digits.split_at(split);
        s.push_str(int_part);
        let frac = frac.trim_end_matches('0');
        if !frac.is_empty() {
            s.push('.');
            s.push_str(frac);
        }
    }
    s
}
