//! Extraction of bracketed answers from completions.

use super::JudgementFormat;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParsedValue {
    /// One of 0.0, 0.1, ..., 1.0.
    Absolute(f64),
    /// 1 means the first task was judged harder.
    Pairwise(u8),
}

impl ParsedValue {
    pub fn as_f64(&self) -> f64 {
        match self {
            ParsedValue::Absolute(v) => *v,
            ParsedValue::Pairwise(d) => f64::from(*d),
        }
    }
}

/// Span of the first `[[...]]` group, as (inner start, inner end) byte
/// offsets into `raw`.
pub fn first_bracket_span(raw: &str) -> Option<(usize, usize)> {
    let open = raw.find("[[")?;
    let inner_start = open + 2;
    let close = raw[inner_start..].find("]]")?;
    Some((inner_start, inner_start + close))
}

/// Parses the first double-bracket group. Absolute mode accepts 0, 1, 0.d
/// and 1.0; pairwise mode accepts 1 or 0. Anything else is a parse failure.
pub fn parse_bracket_output(raw: &str, mode: JudgementFormat) -> Option<ParsedValue> {
    let (start, end) = first_bracket_span(raw)?;
    let inner = raw[start..end].trim();
    match mode {
        JudgementFormat::Pairwise => match inner {
            "1" => Some(ParsedValue::Pairwise(1)),
            "0" => Some(ParsedValue::Pairwise(0)),
            _ => None,
        },
        JudgementFormat::Absolute => {
            let bytes = inner.as_bytes();
            match bytes {
                b"0" => Some(ParsedValue::Absolute(0.0)),
                b"1" => Some(ParsedValue::Absolute(1.0)),
                b"1.0" => Some(ParsedValue::Absolute(1.0)),
                [b'0', b'.', d] if d.is_ascii_digit() => {
                    Some(ParsedValue::Absolute(f64::from(d - b'0') / 10.0))
                }
                _ => None,
            }
        }
    }
}
