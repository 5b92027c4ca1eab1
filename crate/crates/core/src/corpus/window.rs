use super::Corpus;

/// An input window of `I` records (columns day, slot, location, event) and
/// the behavior of the record following each position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowedSample {
    pub features: Vec<[u32; 4]>,
    pub targets: Vec<u32>,
    pub user_id: u64,
    /// Absolute date of the final input position, when the log carries one.
    pub end_date: Option<u32>,
}

impl WindowedSample {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SkipReport {
    /// Users with at most `I` records.
    pub skipped_users: usize,
    pub skipped_records: usize,
}

/// Window count for one stream of length `len`: ⌈(len − I) / stride⌉ when
/// `len > I`, else zero.
pub fn window_count(len: usize, window: usize, stride: usize) -> usize {
    if len <= window {
        0
    } else {
        (len - window).div_ceil(stride)
    }
}

fn starts(corpus: &Corpus, window: usize, stride: usize) -> (Vec<(u32, u32)>, SkipReport) {
    assert!(window >= 1 && stride >= 1, "window and stride must be positive");
    let mut out = Vec::new();
    let mut report = SkipReport::default();
    for (u, stream) in corpus.users.iter().enumerate() {
        let n = window_count(stream.records.len(), window, stride);
        if n == 0 {
            report.skipped_users += 1;
            report.skipped_records += stream.records.len();
        }
        out.extend((0..n).map(|i| (u as u32, (i * stride) as u32)));
    }
    (out, report)
}

/// Materializes every window of length `window` taken every `stride`
/// records of each user stream.
pub fn make_windows(corpus: &Corpus, window: usize, stride: usize) -> (Vec<WindowedSample>, SkipReport) {
    let index = WindowIndex::new(corpus, window, stride);
    let samples = (0..index.len()).map(|i| index.get(i)).collect();
    (samples, index.report.clone())
}

/// Random access to windowed samples.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;
    fn window_len(&self) -> usize;
    fn get(&self, idx: usize) -> WindowedSample;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for [WindowedSample] {
    fn len(&self) -> usize {
        <[WindowedSample]>::len(self)
    }

    fn window_len(&self) -> usize {
        self.first().map_or(0, WindowedSample::len)
    }

    fn get(&self, idx: usize) -> WindowedSample {
        self[idx].clone()
    }
}

impl SampleSource for Vec<WindowedSample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn window_len(&self) -> usize {
        self.as_slice().window_len()
    }

    fn get(&self, idx: usize) -> WindowedSample {
        self[idx].clone()
    }
}

/// Lazy window view over a corpus; windows are built on access.
#[derive(Debug, Clone)]
pub struct WindowIndex<'a> {
    corpus: &'a Corpus,
    window: usize,
    starts: Vec<(u32, u32)>,
    pub report: SkipReport,
}

impl<'a> WindowIndex<'a> {
    pub fn new(corpus: &'a Corpus, window: usize, stride: usize) -> Self {
        let (starts, report) = starts(corpus, window, stride);
        Self {
            corpus,
            window,
            starts,
            report,
        }
    }

    /// Restricts the view to the given window indices, in order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            corpus: self.corpus,
            window: self.window,
            starts: indices.iter().map(|&i| self.starts[i]).collect(),
            report: self.report.clone(),
        }
    }

    /// Keeps the first `n` windows.
    pub fn prefix(&self, n: usize) -> Self {
        let n = n.min(self.starts.len());
        self.subset(&(0..n).collect::<Vec<_>>())
    }

    pub fn end_dates(&self) -> Vec<Option<u32>> {
        self.starts
            .iter()
            .map(|&(u, o)| self.corpus.users[u as usize].records[o as usize + self.window - 1].date)
            .collect()
    }
}

impl SampleSource for WindowIndex<'_> {
    fn len(&self) -> usize {
        self.starts.len()
    }

    fn window_len(&self) -> usize {
        self.window
    }

    fn get(&self, idx: usize) -> WindowedSample {
        let (u, o) = self.starts[idx];
        let stream = &self.corpus.users[u as usize];
        let o = o as usize;
        let recs = &stream.records[o..o + self.window + 1];
        WindowedSample {
            features: recs[..self.window].iter().map(|r| r.features()).collect(),
            targets: recs[1..].iter().map(|r| r.behavior).collect(),
            user_id: stream.user_id,
            end_date: recs[self.window - 1].date,
        }
    }
}
