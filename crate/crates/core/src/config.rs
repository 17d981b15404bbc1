//! `key = value` configuration text with `#` comments.

use std::str::FromStr;

use crate::error::{Error, Result};

/// Parses lines into ordered `(key, value)` pairs. Later keys override earlier ones
/// when applied in order.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "line {}: expected `key = value`, got `{line}`",
                n + 1
            ))
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn parse_value<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean `{value}` for `{key}`"))),
    }
}

pub fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|p| parse_value(key, p.trim()))
        .collect()
}

pub fn format_list(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_blanks() {
        let kv = parse_kv("# header\n a = 1 \n\nb=x,y # trailing\n").unwrap();
        assert_eq!(
            kv,
            vec![("a".into(), "1".into()), ("b".into(), "x,y".into())]
        );
        assert!(parse_kv("novalue\n").is_err());
        assert!(parse_kv(" = 3\n").is_err());
    }

    #[test]
    fn typed_values() {
        assert!(parse_bool("k", "on").unwrap());
        assert!(parse_bool("k", "maybe").is_err());
        assert_eq!(parse_list("k", "1, 2,3").unwrap(), vec![1, 2, 3]);
        assert_eq!(format_list(&[4, 5]), "4,5");
        assert!(parse_value::<usize>("k", "-1").is_err());
    }
}
