use alloc::string::String;
use alloc::vec::Vec;

/// Splits on whitespace and makes every punctuation character its own token.
pub fn tokenize(line: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in line.split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if ch.is_alphanumeric() {
                cur.push(ch);
            } else {
                if !cur.is_empty() {
                    out.push(core::mem::take(&mut cur));
                }
                out.push(String::from(ch));
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_punctuation() {
        assert_eq!(tokenize("  a red mark, on the left. "), ["a", "red", "mark", ",", "on", "the", "left", "."]);
        assert_eq!(tokenize("don't"), ["don", "'", "t"]);
        assert!(tokenize(" \t").is_empty());
        assert_eq!(tokenize("grün über"), ["grün", "über"]);
    }
}
