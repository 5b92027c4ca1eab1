//! Behavior-log data model: records, vocabularies, windowing, splits and
//! the seeded long-tail generator.

mod ingest;
mod split;
mod synth;
mod vocab;
mod window;

pub use ingest::{ingest_logs, write_csv, write_jsonl, LogFormat};
pub use split::{split_dataset, split_indices, SplitPolicy, Splits};
pub use synth::{generate_synthetic, SyntheticSpec};
pub use vocab::{build_vocabulary, VocabSizes, Vocabulary};
pub use window::{make_windows, window_count, SampleSource, SkipReport, WindowIndex, WindowedSample};

use serde::{Deserialize, Serialize};

/// One log entry: event `event` at `location` during `slot` on weekday `day`,
/// labeled with `behavior`. `date` is an optional absolute day index used by
/// time-based splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorRecord {
    #[serde(rename = "user")]
    pub user_id: u64,
    pub day: u32,
    pub slot: u32,
    #[serde(rename = "loc")]
    pub location: u32,
    pub event: u32,
    pub behavior: u32,
    #[serde(rename = "pos")]
    pub seq_pos: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date: Option<u32>,
}

impl BehaviorRecord {
    /// Model input columns in the order (day, slot, location, event).
    pub fn features(&self) -> [u32; 4] {
        [self.day, self.slot, self.location, self.event]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserStream {
    pub user_id: u64,
    pub records: Vec<BehaviorRecord>,
}

/// Records grouped by user, each stream strictly ordered by `seq_pos`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub users: Vec<UserStream>,
}

impl Corpus {
    /// Groups arbitrary records by user and sorts each stream by position.
    /// Duplicate `(user, seq_pos)` pairs are rejected.
    pub fn from_records(records: Vec<BehaviorRecord>) -> crate::Result<Self> {
        Self::from_numbered(records.into_iter().enumerate().map(|(i, r)| (i + 1, r)))
    }

    pub(crate) fn from_numbered(
        records: impl IntoIterator<Item = (usize, BehaviorRecord)>,
    ) -> crate::Result<Self> {
        let mut by_user: std::collections::BTreeMap<u64, Vec<(usize, BehaviorRecord)>> =
            Default::default();
        for (line, rec) in records {
            by_user.entry(rec.user_id).or_default().push((line, rec));
        }
        let mut users = Vec::with_capacity(by_user.len());
        for (user_id, mut recs) in by_user {
            recs.sort_by_key(|(line, r)| (r.seq_pos, *line));
            for pair in recs.windows(2) {
                if pair[0].1.seq_pos == pair[1].1.seq_pos {
                    return Err(crate::Error::DuplicateRecord {
                        line: pair[1].0,
                        user: user_id,
                        pos: pair[1].1.seq_pos,
                    });
                }
            }
            users.push(UserStream {
                user_id,
                records: recs.into_iter().map(|(_, r)| r).collect(),
            });
        }
        Ok(Self { users })
    }

    pub fn len(&self) -> usize {
        self.users.iter().map(|u| u.records.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn records(&self) -> impl Iterator<Item = &BehaviorRecord> {
        self.users.iter().flat_map(|u| u.records.iter())
    }

    /// Behavior occurrence counts over all records.
    pub fn behavior_counts(&self, n_behaviors: usize) -> Vec<u64> {
        let mut counts = vec![0u64; n_behaviors];
        for r in self.records() {
            counts[r.behavior as usize] += 1;
        }
        counts
    }

    /// Checks every index against `sizes`, reporting the 1-based position of
    /// the offending record in iteration order.
    pub fn validate(&self, sizes: &VocabSizes) -> crate::Result<()> {
        for (i, r) in self.records().enumerate() {
            sizes.check_record(r, i + 1)?;
        }
        Ok(())
    }

    /// Splits users (not records) into consecutive groups by fraction.
    pub fn split_users(&self, fractions: &[f64]) -> Vec<Corpus> {
        let n = self.users.len();
        let mut out = Vec::with_capacity(fractions.len());
        let mut start = 0usize;
        let mut acc = 0.0;
        for (i, f) in fractions.iter().enumerate() {
            acc += f;
            let end = if i + 1 == fractions.len() {
                n
            } else {
                ((acc * n as f64).round() as usize).min(n)
            };
            out.push(Corpus {
                users: self.users[start..end.max(start)].to_vec(),
            });
            start = end.max(start);
        }
        out
    }

    /// Keeps only the first `n` records of every user.
    pub fn truncate_users(&self, n: usize) -> Corpus {
        Corpus {
            users: self
                .users
                .iter()
                .map(|u| UserStream {
                    user_id: u.user_id,
                    records: u.records[..n.min(u.records.len())].to_vec(),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(user: u64, pos: u64, behavior: u32) -> BehaviorRecord {
        BehaviorRecord {
            user_id: user,
            day: 0,
            slot: 0,
            location: 0,
            event: behavior,
            behavior,
            seq_pos: pos,
            date: None,
        }
    }

    #[test]
    fn from_records_groups_and_orders() {
        let c = Corpus::from_records(vec![rec(2, 5, 0), rec(1, 3, 1), rec(2, 1, 1), rec(1, 0, 0)])
            .unwrap();
        assert_eq!(c.users.len(), 2);
        assert_eq!(c.users[0].user_id, 1);
        assert_eq!(
            c.users[1].records.iter().map(|r| r.seq_pos).collect::<Vec<_>>(),
            vec![1, 5]
        );
    }

    #[test]
    fn duplicate_position_rejected() {
        let err = Corpus::from_records(vec![rec(1, 3, 0), rec(1, 3, 1)]).unwrap_err();
        assert!(matches!(err, crate::Error::DuplicateRecord { user: 1, pos: 3, .. }));
    }

    #[test]
    fn split_users_covers_everything() {
        let recs = (0..10).map(|u| rec(u, 0, 0)).collect();
        let c = Corpus::from_records(recs).unwrap();
        let parts = c.split_users(&[0.6, 0.1, 0.3]);
        assert_eq!(parts.iter().map(|p| p.users.len()).collect::<Vec<_>>(), vec![6, 1, 3]);
    }
}
