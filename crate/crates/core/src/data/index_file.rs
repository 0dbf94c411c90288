//! Plain-text record index files: one non-negative integer per line,
//! `#` starts a comment, blank lines ignored.

use crate::error::{Error, Result};

pub fn parse(text: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let idx = line.parse::<usize>().map_err(|e| {
            Error::malformed("index file", format!("line {}: {e}", lineno + 1))
        })?;
        out.push(idx);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_with_comments() {
        let text = "# private records\n3\n\n 10 # trailing\n0\n";
        assert_eq!(parse(text).unwrap(), vec![3, 10, 0]);
        assert!(parse("1\n-2\n").is_err());
    }
}
