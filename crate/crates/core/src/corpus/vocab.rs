use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::BehaviorRecord;
use crate::{Error, Result};

/// Vocabulary sizes (N_D, N_T, N_L, N_E, N_B).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSizes {
    pub n_d: usize,
    pub n_t: usize,
    pub n_l: usize,
    pub n_e: usize,
    pub n_b: usize,
}

impl VocabSizes {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("n_d", self.n_d),
            ("n_t", self.n_t),
            ("n_l", self.n_l),
            ("n_e", self.n_e),
            ("n_b", self.n_b),
        ];
        for (name, v) in all {
            if v == 0 {
                return Err(Error::InvalidVocabulary(format!("{name} must be positive")));
            }
        }
        if self.n_b > self.n_e {
            return Err(Error::InvalidVocabulary(format!(
                "n_b = {} exceeds n_e = {}",
                self.n_b, self.n_e
            )));
        }
        Ok(())
    }

    pub(crate) fn check_record(&self, r: &BehaviorRecord, line: usize) -> Result<()> {
        let fields: [(&'static str, u32, usize); 5] = [
            ("day", r.day, self.n_d),
            ("slot", r.slot, self.n_t),
            ("loc", r.location, self.n_l),
            ("event", r.event, self.n_e),
            ("behavior", r.behavior, self.n_b),
        ];
        for (field, value, size) in fields {
            if value as usize >= size {
                return Err(Error::OutOfRange {
                    line,
                    field,
                    value: value as u64,
                    size,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    pub sizes: VocabSizes,
    pub event_to_behavior: Vec<u32>,
    pub behavior_canonical_event: Vec<u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from an explicit event→behavior map and per-event
    /// frequencies used to pick canonical events.
    pub fn from_map(sizes: VocabSizes, event_to_behavior: Vec<u32>, event_counts: &[u64]) -> Result<Self> {
        sizes.validate()?;
        if event_to_behavior.len() != sizes.n_e {
            return Err(Error::InvalidVocabulary(format!(
                "event map has {} entries, expected {}",
                event_to_behavior.len(),
                sizes.n_e
            )));
        }
        let mut best: Vec<Option<(u64, u32)>> = vec![None; sizes.n_b];
        for (e, &b) in event_to_behavior.iter().enumerate() {
            if b as usize >= sizes.n_b {
                return Err(Error::InvalidVocabulary(format!(
                    "event {e} maps to behavior {b} >= n_b"
                )));
            }
            let c = event_counts.get(e).copied().unwrap_or(0);
            // strictly greater keeps the lower event index on ties
            match best[b as usize] {
                Some((bc, _)) if bc >= c => {}
                _ => best[b as usize] = Some((c, e as u32)),
            }
        }
        let mut canonical = Vec::with_capacity(sizes.n_b);
        for (b, slot) in best.into_iter().enumerate() {
            match slot {
                Some((_, e)) => canonical.push(e),
                None => {
                    return Err(Error::InvalidVocabulary(format!("behavior {b} owns no event")))
                }
            }
        }
        Ok(Self {
            sizes,
            event_to_behavior,
            behavior_canonical_event: canonical,
        })
    }

    pub fn canonical_event(&self, behavior: u32) -> u32 {
        self.behavior_canonical_event[behavior as usize]
    }

    /// Sidecar text: the five sizes followed by `event_id=behavior_id` lines.
    pub fn to_sidecar(&self) -> String {
        let mut s = String::new();
        let z = &self.sizes;
        let _ = writeln!(s, "n_d={}\nn_t={}\nn_l={}\nn_e={}\nn_b={}", z.n_d, z.n_t, z.n_l, z.n_e, z.n_b);
        for (e, b) in self.event_to_behavior.iter().enumerate() {
            let _ = writeln!(s, "{e}={b}");
        }
        // canonical choices are data-dependent, so they travel with the map
        for (b, e) in self.behavior_canonical_event.iter().enumerate() {
            let _ = writeln!(s, "canonical.{b}={e}");
        }
        s
    }

    pub fn from_sidecar(text: &str) -> Result<Self> {
        let mut sizes = [None::<usize>; 5];
        let mut map: Vec<(usize, u32)> = Vec::new();
        let mut canonical: Vec<(usize, u32)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("vocabulary line {}: expected key=value", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| -> Result<u64> {
                v.parse::<u64>()
                    .map_err(|_| Error::Parse(format!("vocabulary line {}: bad integer `{v}`", i + 1)))
            };
            let idx = ["n_d", "n_t", "n_l", "n_e", "n_b"].iter().position(|n| *n == k);
            if let Some(j) = idx {
                sizes[j] = Some(num(v)? as usize);
            } else if let Some(b) = k.strip_prefix("canonical.") {
                canonical.push((num(b)? as usize, num(v)? as u32));
            } else {
                map.push((num(k)? as usize, num(v)? as u32));
            }
        }
        let get = |j: usize, name: &str| {
            sizes[j].ok_or_else(|| Error::Parse(format!("vocabulary sidecar missing `{name}`")))
        };
        let sizes = VocabSizes {
            n_d: get(0, "n_d")?,
            n_t: get(1, "n_t")?,
            n_l: get(2, "n_l")?,
            n_e: get(3, "n_e")?,
            n_b: get(4, "n_b")?,
        };
        sizes.validate()?;
        let mut e2b = vec![u32::MAX; sizes.n_e];
        for (e, b) in map {
            if e >= sizes.n_e {
                return Err(Error::InvalidVocabulary(format!("event {e} >= n_e")));
            }
            e2b[e] = b;
        }
        if let Some(e) = e2b.iter().position(|&b| b == u32::MAX) {
            return Err(Error::InvalidVocabulary(format!("event {e} has no behavior")));
        }
        // rebuild to validate ranges, then restore recorded canonical events
        let mut vocab = Self::from_map(sizes, e2b, &[])?;
        for (b, e) in canonical {
            if b >= sizes.n_b || e as usize >= sizes.n_e || vocab.event_to_behavior[e as usize] != b as u32 {
                return Err(Error::InvalidVocabulary(format!(
                    "canonical event {e} does not map back to behavior {b}"
                )));
            }
            vocab.behavior_canonical_event[b] = e;
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_sidecar()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_sidecar(&text)
    }
}

/// Derives the event→behavior map from observed pairs. Every declared event
/// and behavior must be observed; an event seen with two labels is an error.
pub fn build_vocabulary<'a>(
    records: impl IntoIterator<Item = &'a BehaviorRecord>,
    declared: VocabSizes,
) -> Result<Vocabulary> {
    declared.validate()?;
    let mut e2b: Vec<Option<u32>> = vec![None; declared.n_e];
    let mut counts = vec![0u64; declared.n_e];
    let mut any = false;
    for (i, r) in records.into_iter().enumerate() {
        any = true;
        declared.check_record(r, i + 1)?;
        let slot = &mut e2b[r.event as usize];
        match *slot {
            Some(b) if b != r.behavior => {
                return Err(Error::InconsistentEvent {
                    event: r.event,
                    first: b,
                    second: r.behavior,
                })
            }
            _ => *slot = Some(r.behavior),
        }
        counts[r.event as usize] += 1;
    }
    if !any {
        return Err(Error::InvalidVocabulary("no records".into()));
    }
    let map = e2b
        .into_iter()
        .enumerate()
        .map(|(e, b)| b.ok_or_else(|| Error::InvalidVocabulary(format!("event {e} never observed"))))
        .collect::<Result<Vec<_>>>()?;
    Vocabulary::from_map(declared, map, &counts)
}
