//! Year-based splits and (input, target, lead) sample assembly.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::dataset::ChannelStack;
use crate::time::Timestamp;

/// Inclusive year range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct YearRange {
    pub first: i32,
    pub last: i32,
}

impl YearRange {
    pub const fn new(first: i32, last: i32) -> Self {
        Self { first, last }
    }

    pub fn contains(&self, t: Timestamp) -> bool {
        let y = t.year();
        y >= self.first && y <= self.last
    }

    /// `2003-2015` or `2016`.
    pub fn parse(s: &str) -> crate::error::Result<Self> {
        let bad = || crate::error::Error::Usage(format!("bad year range `{s}`"));
        let (a, b) = match s.split_once('-') {
            Some((a, b)) => (a, b),
            None => (s, s),
        };
        let first = a.trim().parse().map_err(|_| bad())?;
        let last = b.trim().parse().map_err(|_| bad())?;
        if first > last {
            return Err(bad());
        }
        Ok(Self { first, last })
    }
}

impl std::fmt::Display for YearRange {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.first == self.last {
            write!(f, "{}", self.first)
        } else {
            write!(f, "{}-{}", self.first, self.last)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train: YearRange,
    pub val: YearRange,
    pub test: YearRange,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: YearRange::new(2003, 2015),
            val: YearRange::new(2016, 2016),
            test: YearRange::new(2017, 2018),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> crate::error::Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(crate::error::Error::Usage(format!("unknown split `{s}`"))),
        }
    }
}

impl SplitConfig {
    pub fn range(&self, split: Split) -> YearRange {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn classify(&self, t: Timestamp) -> Option<Split> {
        [Split::Train, Split::Val, Split::Test]
            .into_iter()
            .find(|s| self.range(*s).contains(t))
    }
}

/// Time indices per split.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// Names of splits that came out empty.
    pub empty: Vec<Split>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

pub fn split_by_years(timestamps: &[Timestamp], cfg: &SplitConfig) -> Splits {
    let mut out = Splits::default();
    for (i, &t) in timestamps.iter().enumerate() {
        match cfg.classify(t) {
            Some(Split::Train) => out.train.push(i),
            Some(Split::Val) => out.val.push(i),
            Some(Split::Test) => out.test.push(i),
            None => {}
        }
    }
    for s in [Split::Train, Split::Val, Split::Test] {
        if out.get(s).is_empty() {
            out.empty.push(s);
        }
    }
    out
}

/// Indices of one sample inside a [`ChannelStack`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SampleRef {
    pub input: usize,
    pub target: usize,
    pub lead_time_hours: u32,
    pub timestamp: Timestamp,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SampleSet {
    pub samples: Vec<SampleRef>,
    /// (anchor, lead) pairs whose target was missing or outside the year range.
    pub skipped: usize,
}

/// One sample per (anchor, lead) whose target exists in `stack` and lies in
/// `years`. Output is ordered by timestamp, then lead.
pub fn build_samples(stack: &ChannelStack, anchors: &[usize], lead_times: &[u32], years: YearRange) -> SampleSet {
    let mut leads = lead_times.to_vec();
    leads.sort_unstable();
    leads.dedup();
    let mut set = SampleSet::default();
    for &a in anchors {
        let t = stack.timestamps[a];
        for &lead in &leads {
            let target_time = t.add_hours(lead as i64);
            match stack.time_index(target_time) {
                Some(target) if years.contains(target_time) => set.samples.push(SampleRef {
                    input: a,
                    target,
                    lead_time_hours: lead,
                    timestamp: t,
                }),
                _ => set.skipped += 1,
            }
        }
    }
    set
}

/// Materialized training/evaluation unit.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedSample {
    /// `[C, H, W]` at `timestamp`.
    pub input: Array3<f64>,
    /// `[C, H, W]` at `timestamp + lead_time_hours`.
    pub target: Array3<f64>,
    pub lead_time_hours: u32,
    pub timestamp: Timestamp,
    pub channel_index: Vec<String>,
}

impl AlignedSample {
    pub fn from_ref(stack: &ChannelStack, r: &SampleRef) -> Self {
        Self {
            input: stack.frame(r.input),
            target: stack.frame(r.target),
            lead_time_hours: r.lead_time_hours,
            timestamp: r.timestamp,
            channel_index: stack.channel_names(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::catalog::VariableCatalog;
    use crate::grid::LatLonGrid;

    fn stack(ts: Vec<Timestamp>) -> ChannelStack {
        let grid = LatLonGrid::new(vec![0.0], vec![0.0], 1.0).unwrap();
        let chan = VariableCatalog::builtin().channel("pm2p5").unwrap();
        let data = (0..ts.len()).map(|i| i as f32).collect();
        ChannelStack::new(grid, ts, vec![chan], data).unwrap()
    }

    #[test]
    fn split_membership() {
        let cfg = SplitConfig::default();
        assert_eq!(cfg.classify(Timestamp::from_ymdh(2016, 6, 1, 0).unwrap()), Some(Split::Val));
        assert_eq!(cfg.classify(Timestamp::from_ymdh(2003, 1, 1, 0).unwrap()), Some(Split::Train));
        assert_eq!(cfg.classify(Timestamp::from_ymdh(2015, 12, 31, 23).unwrap()), Some(Split::Train));
        assert_eq!(cfg.classify(Timestamp::from_ymdh(2018, 12, 31, 23).unwrap()), Some(Split::Test));
        assert_eq!(cfg.classify(Timestamp::from_ymdh(2019, 1, 1, 0).unwrap()), None);
    }

    #[test]
    fn ten_hours_lead_six() {
        let s = stack((0..10).map(Timestamp).collect());
        let anchors: Vec<usize> = (0..10).collect();
        let set = build_samples(&s, &anchors, &[6], YearRange::new(1970, 1970));
        assert_eq!(set.samples.len(), 4);
        assert_eq!(set.skipped, 6);
        assert_eq!(set.samples[3].target, 9);
        assert!(build_samples(&s, &anchors, &[], YearRange::new(1970, 1970)).samples.is_empty());
    }

    #[test]
    fn targets_do_not_cross_split_boundary() {
        let start = Timestamp::from_ymdh(2015, 12, 31, 0).unwrap();
        let s = stack((0..48).map(|k| start.add_hours(k)).collect());
        let splits = split_by_years(&s.timestamps, &SplitConfig::default());
        assert_eq!(splits.train.len(), 24);
        assert_eq!(splits.val.len(), 24);
        assert!(splits.empty.contains(&Split::Test));
        let set = build_samples(&s, &splits.train, &[6], YearRange::new(2003, 2015));
        assert_eq!(set.samples.len(), 18);
    }

    #[test]
    fn ordering_is_timestamp_then_lead() {
        let s = stack((0..30).map(Timestamp).collect());
        let anchors: Vec<usize> = (0..30).collect();
        let set = build_samples(&s, &anchors, &[12, 6], YearRange::new(1970, 1970));
        let keys: Vec<(i64, u32)> = set.samples.iter().map(|r| (r.timestamp.0, r.lead_time_hours)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert_eq!(keys[0], (0, 6));
        assert_eq!(keys[1], (0, 12));
    }

    #[test]
    fn year_range_parse() {
        assert_eq!(YearRange::parse("2003-2015").unwrap(), YearRange::new(2003, 2015));
        assert_eq!(YearRange::parse("2016").unwrap(), YearRange::new(2016, 2016));
        assert!(YearRange::parse("2018-2017").is_err());
    }
}
