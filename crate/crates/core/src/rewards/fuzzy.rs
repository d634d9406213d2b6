//! Ratcliff/Obershelp "gestalt" similarity, computed the same way as
//! Python's `difflib.SequenceMatcher(None, a, b).ratio()`.
//!
//! Matching works on Unicode scalar values. Elements of `b` that occur more
//! than `len(b) / 100 + 1` times are treated as popular (and skipped when
//! seeding matches) once `b` has at least 200 elements.

use std::collections::HashMap;

/// `2 * M / T`, where `M` is the number of matched characters and `T` the
/// combined length. Two empty strings are identical (1.0).
pub fn fuzzy_ratio(a: &str, b: &str) -> f64 {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let total = a.len() + b.len();
    if total == 0 {
        return 1.0;
    }
    2.0 * matching_characters(&a, &b) as f64 / total as f64
}

/// Sum of the sizes of all matching blocks.
pub fn matching_characters<T: Eq + std::hash::Hash + Copy>(a: &[T], b: &[T]) -> usize {
    let b2j = index_b(b);
    let mut total = 0;
    let mut queue = vec![(0, a.len(), 0, b.len())];
    while let Some((alo, ahi, blo, bhi)) = queue.pop() {
        let (i, j, k) = longest_match(a, b, &b2j, alo, ahi, blo, bhi);
        if k == 0 {
            continue;
        }
        total += k;
        if alo < i && blo < j {
            queue.push((alo, i, blo, j));
        }
        if i + k < ahi && j + k < bhi {
            queue.push((i + k, ahi, j + k, bhi));
        }
    }
    total
}

fn index_b<T: Eq + std::hash::Hash + Copy>(b: &[T]) -> HashMap<T, Vec<usize>> {
    let mut b2j: HashMap<T, Vec<usize>> = HashMap::new();
    for (j, &c) in b.iter().enumerate() {
        b2j.entry(c).or_default().push(j);
    }
    if b.len() >= 200 {
        let ntest = b.len() / 100 + 1;
        b2j.retain(|_, idxs| idxs.len() <= ntest);
    }
    b2j
}

/// Longest block `a[i..i+k] == b[j..j+k]` inside the given ranges. Among
/// equally long blocks the one starting earliest in `a`, then in `b`, wins.
fn longest_match<T: Eq + std::hash::Hash + Copy>(
    a: &[T],
    b: &[T],
    b2j: &HashMap<T, Vec<usize>>,
    alo: usize,
    ahi: usize,
    blo: usize,
    bhi: usize,
) -> (usize, usize, usize) {
    let (mut besti, mut bestj, mut bestsize) = (alo, blo, 0);
    let mut j2len: HashMap<usize, usize> = HashMap::new();
    for i in alo..ahi {
        let mut next: HashMap<usize, usize> = HashMap::new();
        if let Some(js) = b2j.get(&a[i]) {
            for &j in js {
                if j < blo {
                    continue;
                }
                if j >= bhi {
                    break;
                }
                let k = j.checked_sub(1).and_then(|p| j2len.get(&p)).copied().unwrap_or(0) + 1;
                next.insert(j, k);
                if k > bestsize {
                    besti = i + 1 - k;
                    bestj = j + 1 - k;
                    bestsize = k;
                }
            }
        }
        j2len = next;
    }
    // Popular elements never seed a match but may extend one.
    while besti > alo && bestj > blo && a[besti - 1] == b[bestj - 1] {
        besti -= 1;
        bestj -= 1;
        bestsize += 1;
    }
    while besti + bestsize < ahi && bestj + bestsize < bhi && a[besti + bestsize] == b[bestj + bestsize] {
        bestsize += 1;
    }
    (besti, bestj, bestsize)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(fuzzy_ratio("abc", "abc"), 1.0);
        assert_eq!(fuzzy_ratio("", "x"), 0.0);
        assert_eq!(fuzzy_ratio("", ""), 1.0);
        assert_eq!(fuzzy_ratio("abc", "xyz"), 0.0);
        assert_eq!(fuzzy_ratio("apple", "applet"), 10.0 / 11.0);
        assert_eq!(fuzzy_ratio("blue truck", "a blue truck"), 20.0 / 22.0);
    }

    #[test]
    fn tie_break_follows_earliest_block() {
        // "abxcd" vs "abcd": "ab" then "cd" -> 4 matches
        assert_eq!(matching_characters(&['a', 'b', 'x', 'c', 'd'], &['a', 'b', 'c', 'd']), 4);
        // Not symmetric: the block search favors positions in `a`.
        assert_eq!(fuzzy_ratio("tide", "diet"), 0.25);
        assert_eq!(fuzzy_ratio("diet", "tide"), 0.5);
    }
}
