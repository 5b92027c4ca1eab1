use serde::{Deserialize, Serialize};

use super::WindowedSample;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPolicy {
    /// Consecutive fractions of the sample order.
    ByFraction { train: f64, val: f64, test: f64 },
    /// Calendar split on the absolute date of each window's final position,
    /// counted from the earliest date present.
    ByTime {
        train_days: u32,
        val_days: u32,
        test_days: u32,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits<T> {
    pub train: T,
    pub val: T,
    pub test: T,
}

/// Index-level split shared by materialized and lazy window sets.
pub fn split_indices(n: usize, end_dates: &[Option<u32>], policy: SplitPolicy) -> Result<Splits<Vec<usize>>> {
    let mut out = Splits {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    match policy {
        SplitPolicy::ByFraction { train, val, test } => {
            if [train, val, test].iter().any(|f| !(0.0..=1.0).contains(f)) || ((train + val + test) - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidConfig(format!(
                    "split fractions ({train}, {val}, {test}) must be in [0,1] and sum to 1"
                )));
            }
            let n_train = (train * n as f64).round() as usize;
            let n_val = ((val * n as f64).round() as usize).min(n - n_train.min(n));
            let n_train = n_train.min(n);
            out.train = (0..n_train).collect();
            out.val = (n_train..n_train + n_val).collect();
            out.test = (n_train + n_val..n).collect();
        }
        SplitPolicy::ByTime {
            train_days,
            val_days,
            test_days,
        } => {
            assert_eq!(end_dates.len(), n);
            let dates = end_dates
                .iter()
                .map(|d| d.ok_or_else(|| Error::InvalidConfig("time split needs dated records".into())))
                .collect::<Result<Vec<u32>>>()?;
            let Some(&first) = dates.iter().min() else {
                return Err(Error::EmptySplit("train"));
            };
            let span = dates.iter().max().unwrap() - first + 1;
            let total = train_days + val_days + test_days;
            if total < span {
                return Err(Error::InvalidConfig(format!(
                    "day counts cover {total} days but the corpus spans {span}"
                )));
            }
            for (i, d) in dates.into_iter().enumerate() {
                let rel = d - first;
                if rel < train_days {
                    out.train.push(i);
                } else if rel < train_days + val_days {
                    out.val.push(i);
                } else {
                    out.test.push(i);
                }
            }
        }
    }
    for (name, part) in [("train", &out.train), ("val", &out.val), ("test", &out.test)] {
        if part.is_empty() {
            return Err(Error::EmptySplit(name));
        }
    }
    Ok(out)
}

pub fn split_dataset(samples: Vec<WindowedSample>, policy: SplitPolicy) -> Result<Splits<Vec<WindowedSample>>> {
    let dates: Vec<Option<u32>> = samples.iter().map(|s| s.end_date).collect();
    let idx = split_indices(samples.len(), &dates, policy)?;
    let mut slots: Vec<Option<WindowedSample>> = samples.into_iter().map(Some).collect();
    let mut take = |ids: &[usize]| ids.iter().map(|&i| slots[i].take().expect("disjoint")).collect::<Vec<_>>();
    Ok(Splits {
        train: take(&idx.train),
        val: take(&idx.val),
        test: take(&idx.test),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn samples(n: usize, day_of: impl Fn(usize) -> u32) -> Vec<WindowedSample> {
        (0..n)
            .map(|i| WindowedSample {
                features: vec![[0, 0, 0, 0]],
                targets: vec![i as u32],
                user_id: i as u64,
                end_date: Some(day_of(i)),
            })
            .collect()
    }

    #[test]
    fn fraction_sizes() {
        let s = split_dataset(samples(1000, |_| 0), SplitPolicy::ByFraction { train: 0.6, val: 0.1, test: 0.3 }).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (600, 100, 300));
    }

    #[test]
    fn degenerate_fraction_is_empty_split() {
        let err = split_dataset(samples(10, |_| 0), SplitPolicy::ByFraction { train: 1.0, val: 0.0, test: 0.0 }).unwrap_err();
        assert!(matches!(err, Error::EmptySplit("val")));
    }

    #[test]
    fn time_split_by_final_day() {
        let s = split_dataset(
            samples(1000, |i| (i / 10) as u32),
            SplitPolicy::ByTime { train_days: 70, val_days: 15, test_days: 15 },
        )
        .unwrap();
        assert!(s.train.iter().all(|x| x.end_date.unwrap() < 70));
        assert!(s.val.iter().all(|x| (70..85).contains(&x.end_date.unwrap())));
        assert!(s.test.iter().all(|x| x.end_date.unwrap() >= 85));
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (700, 150, 150));
    }

    #[test]
    fn time_split_must_cover_span() {
        let err = split_dataset(
            samples(100, |i| i as u32),
            SplitPolicy::ByTime { train_days: 10, val_days: 10, test_days: 10 },
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)));
    }

    proptest! {
        #[test]
        fn splits_are_disjoint_and_cover(n in 3usize..300, a in 0.1f64..0.8, b in 0.05f64..0.15, days in proptest::collection::vec(0u32..30, 3..300)) {
            let c = 1.0 - a - b;
            if let Ok(idx) = split_indices(n, &vec![None; n], SplitPolicy::ByFraction { train: a, val: b, test: c }) {
                let mut all: Vec<usize> = idx.train.iter().chain(&idx.val).chain(&idx.test).copied().collect();
                all.sort();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            }
            let dates: Vec<Option<u32>> = days.iter().map(|&d| Some(d)).collect();
            if let Ok(idx) = split_indices(dates.len(), &dates, SplitPolicy::ByTime { train_days: 10, val_days: 10, test_days: 10 }) {
                let mut all: Vec<usize> = idx.train.iter().chain(&idx.val).chain(&idx.test).copied().collect();
                all.sort();
                prop_assert_eq!(all, (0..dates.len()).collect::<Vec<_>>());
            }
        }
    }
}
