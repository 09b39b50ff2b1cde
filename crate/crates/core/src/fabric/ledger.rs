use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LinkStats {
    pub bytes: u64,
    pub messages: u64,
}

/// Byte and message counters for every ordered link of a fabric.
#[derive(Clone, PartialEq, Eq)]
pub struct CommLedger {
    workers: usize,
    links: Vec<LinkStats>,
}

impl fmt::Debug for CommLedger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut m = f.debug_map();
        for (src, dst, s) in self.links() {
            if s.messages > 0 {
                m.entry(&(src, dst), &s);
            }
        }
        m.finish()
    }
}

impl CommLedger {
    pub fn new(workers: usize) -> Self {
        Self {
            workers,
            links: vec![LinkStats::default(); workers * workers],
        }
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub(crate) fn record(&mut self, src: usize, dst: usize, bytes: u64) {
        let l = &mut self.links[src * self.workers + dst];
        l.bytes += bytes;
        l.messages += 1;
    }

    pub fn add(&mut self, src: usize, dst: usize, stats: LinkStats) {
        let l = &mut self.links[src * self.workers + dst];
        l.bytes += stats.bytes;
        l.messages += stats.messages;
    }

    pub fn link(&self, src: usize, dst: usize) -> LinkStats {
        self.links[src * self.workers + dst]
    }

    /// Every directed link `(src, dst)` with `src != dst`.
    pub fn links(&self) -> impl Iterator<Item = (usize, usize, LinkStats)> + '_ {
        let n = self.workers;
        (0..n)
            .flat_map(move |s| (0..n).map(move |d| (s, d)))
            .filter(|(s, d)| s != d)
            .map(move |(s, d)| (s, d, self.link(s, d)))
    }

    pub fn total_bytes(&self) -> u64 {
        self.links.iter().map(|l| l.bytes).sum()
    }

    pub fn total_messages(&self) -> u64 {
        self.links.iter().map(|l| l.messages).sum()
    }

    /// Traffic sent plus received by one worker.
    pub fn through(&self, worker: usize) -> LinkStats {
        let mut s = LinkStats::default();
        for other in 0..self.workers {
            if other == worker {
                continue;
            }
            for l in [self.link(worker, other), self.link(other, worker)] {
                s.bytes += l.bytes;
                s.messages += l.messages;
            }
        }
        s
    }

    /// Counters accumulated since `earlier`.
    pub fn since(&self, earlier: &CommLedger) -> CommLedger {
        assert_eq!(self.workers, earlier.workers, "ledgers of different fabrics");
        CommLedger {
            workers: self.workers,
            links: self
                .links
                .iter()
                .zip(&earlier.links)
                .map(|(a, b)| LinkStats {
                    bytes: a.bytes - b.bytes,
                    messages: a.messages - b.messages,
                })
                .collect(),
        }
    }
}
