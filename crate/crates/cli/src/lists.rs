//! Comma/range list flags such as `--dt 1-10` or `--t 5,10,15`.

use crate::UsageError;

pub fn parse_usize_list(flag: &str, text: &str) -> Result<Vec<usize>, UsageError> {
    let bad = || UsageError(format!("--{flag}: expected values like `1-10` or `1,5,10`, got `{text}`"));
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => out.push(part.parse().map_err(|_| bad())?),
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_and_lists() {
        assert_eq!(parse_usize_list("dt", "1-4").unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(parse_usize_list("t", "10, 5,5,1-2").unwrap(), vec![1, 2, 5, 10]);
        assert!(parse_usize_list("t", "").is_err());
        assert!(parse_usize_list("t", "4-2").is_err());
        assert!(parse_usize_list("t", "x").is_err());
    }
}
