//! Scalars printed by generated scripts as `name = value` or `name: value`.

use std::collections::BTreeMap;

/// Lowercase, with every run of non-alphanumerics collapsed to one underscore.
pub fn normalize_name(name: &str) -> String {
    let mut out = String::new();
    for c in name.trim().chars() {
        if c.is_alphanumeric() {
            out.extend(c.to_lowercase());
        } else if !out.ends_with('_') {
            out.push('_');
        }
    }
    out.trim_matches('_').to_string()
}

/// Leading floating-point number of `s` (after optional whitespace), e.g. `1.2e-3 m/s` gives 0.0012.
pub fn leading_number(s: &str) -> Option<f64> {
    let s = s.trim_start();
    let end = s
        .char_indices()
        .take_while(|&(i, c)| {
            c.is_ascii_digit()
                || c == '.'
                || ((c == '-' || c == '+') && (i == 0 || matches!(s.as_bytes()[i - 1], b'e' | b'E')))
                || ((c == 'e' || c == 'E') && i > 0)
        })
        .last()
        .map_or(0, |(i, c)| i + c.len_utf8());
    // back off until the prefix parses, so "3.5e" or "2." trailing junk is tolerated
    (1..=end).rev().find_map(|n| s[..n].parse::<f64>().ok()).filter(|v| v.is_finite())
}

/// Every `name = number` / `name: number` line, keyed by normalized name. Later lines win.
pub fn parse_scalars(stdout: &str) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for line in stdout.lines() {
        let Some(pos) = line.find(['=', ':']) else { continue };
        let name = normalize_name(&line[..pos]);
        if name.is_empty() {
            continue;
        }
        if let Some(v) = leading_number(&line[pos + 1..]) {
            out.insert(name, v);
        }
    }
    out
}
