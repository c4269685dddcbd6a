//! Top-word labels for clusters.

use std::collections::{BTreeMap, HashSet};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::PostRecord;

pub const TOP_WORDS: usize = 5;

const STOPWORDS: &str = include_str!("stopwords.txt");

/// The shipped English stopword list.
pub fn stopwords() -> &'static HashSet<String> {
    static SET: OnceLock<HashSet<String>> = OnceLock::new();
    SET.get_or_init(|| {
        STOPWORDS
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterLabel {
    pub id: i32,
    /// Number of member posts.
    pub frequency: usize,
    pub top_words: Vec<String>,
}

/// Most frequent non-stopword tokens per cluster (count descending, ties
/// alphabetical). Noise posts are skipped; labels come out in id order.
pub fn label_clusters(labels: &[i32], posts: &[PostRecord], stop: &HashSet<String>) -> Result<Vec<ClusterLabel>> {
    if labels.len() != posts.len() {
        return Err(Error::dim(posts.len(), labels.len()));
    }
    let mut members: BTreeMap<i32, (usize, BTreeMap<&str, usize>)> = BTreeMap::new();
    for (&l, post) in labels.iter().zip(posts) {
        if l < 0 {
            continue;
        }
        let entry = members.entry(l).or_default();
        entry.0 += 1;
        for tok in &post.tokens {
            if !stop.contains(tok) {
                *entry.1.entry(tok.as_str()).or_insert(0) += 1;
            }
        }
    }
    Ok(members
        .into_iter()
        .map(|(id, (frequency, counts))| {
            let mut words: Vec<(&str, usize)> = counts.into_iter().collect();
            words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
            ClusterLabel {
                id,
                frequency,
                top_words: words.into_iter().take(TOP_WORDS).map(|(w, _)| w.to_string()).collect(),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn post(id: &str, tokens: &[&str]) -> PostRecord {
        PostRecord {
            id: id.into(),
            day: NaiveDate::from_ymd_opt(2020, 5, 1).unwrap(),
            region: "WA".into(),
            tokens: tokens.iter().map(|t| t.to_string()).collect(),
        }
    }

    #[test]
    fn stopword_list_loads() {
        let s = stopwords();
        assert!(s.contains("the") && s.contains("you're"));
        assert!(!s.contains("mask"));
        assert!(!s.iter().any(|w| w.starts_with('#')));
    }

    #[test]
    fn three_identical_posts() {
        let posts: Vec<_> = (0..3).map(|i| post(&i.to_string(), &["mask", "wear"])).collect();
        let out = label_clusters(&[0, 0, 0], &posts, stopwords()).unwrap();
        assert_eq!(out, vec![ClusterLabel { id: 0, frequency: 3, top_words: vec!["mask".into(), "wear".into()] }]);
    }

    #[test]
    fn only_stopwords_leaves_words_empty() {
        let posts = vec![post("a", &["the", "and"]), post("b", &["of"])];
        let out = label_clusters(&[2, 2], &posts, stopwords()).unwrap();
        assert_eq!(out[0].frequency, 2);
        assert!(out[0].top_words.is_empty());
    }

    #[test]
    fn ties_break_alphabetically_and_noise_is_skipped() {
        let posts = vec![post("a", &["zeta", "alpha", "beta"]), post("b", &["zeta"]), post("c", &["noise"])];
        let out = label_clusters(&[1, 1, -1], &posts, stopwords()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].top_words, vec!["zeta", "alpha", "beta"]);
    }
}
