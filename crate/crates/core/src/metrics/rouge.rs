/// Lowercased tokens split on whitespace and punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 between a candidate and a reference. Two empty token
/// sequences are identical and score 1.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    let c = tokenize(candidate);
    let r = tokenize(reference);
    if c.is_empty() && r.is_empty() {
        return 1.0;
    }
    let lcs = lcs_len(&c, &r);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / c.len() as f64;
    let rec = lcs as f64 / r.len() as f64;
    2.0 * p * rec / (p + rec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tokenization() {
        assert_eq!(
            tokenize("The cat, sat!  On-it"),
            vec!["the", "cat", "sat", "on", "it"]
        );
    }

    #[test]
    fn examples() {
        assert_eq!(rouge_l("the cat sat", "the cat sat"), 1.0);
        assert!((rouge_l("the cat sat", "the cat ran") - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(rouge_l("alpha beta", "gamma delta"), 0.0);
        assert_eq!(rouge_l("THE Cat", "the cat"), 1.0);
        assert_eq!(rouge_l("", "x"), 0.0);
    }

    #[test]
    fn lcs_small_cases() {
        let a: Vec<char> = "ABCBDAB".chars().collect();
        let b: Vec<char> = "BDCABA".chars().collect();
        assert_eq!(lcs_len(&a, &b), 4);
    }

    proptest! {
        #[test]
        fn symmetric_for_equal_lengths(
            a in prop::collection::vec(0u8..4, 1..12),
            b in prop::collection::vec(0u8..4, 1..12),
        ) {
            let n = a.len().min(b.len());
            let sa: Vec<String> = a[..n].iter().map(|t| format!("w{t}")).collect();
            let sb: Vec<String> = b[..n].iter().map(|t| format!("w{t}")).collect();
            let (x, y) = (sa.join(" "), sb.join(" "));
            prop_assert_eq!(rouge_l(&x, &y), rouge_l(&y, &x));
            prop_assert_eq!(rouge_l(&x, &y) == 1.0, sa == sb);
        }
    }
}
