use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Poisson};

use super::DataError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NewsStreamSpec {
    pub num_sources: usize,
    /// Desk-scaled tick period.
    pub tick_period_ms: u64,
    pub seed: u64,
    /// Live counts come from here when set.
    pub endpoint: Option<String>,
}

impl Default for NewsStreamSpec {
    fn default() -> Self {
        NewsStreamSpec { num_sources: 28, tick_period_ms: 1000, seed: 0, endpoint: None }
    }
}

/// Counts of one tick, one per source.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NewsTick {
    pub tick: u64,
    pub counts: Vec<u64>,
    /// Set when the endpoint failed and the previous counts were reused.
    pub fallback: Option<String>,
}

/// Seeded bursty counts: a log-normal base rate per source, modulated by
/// hour of day (ticks are 15 minutes apart) with occasional bursts.
#[derive(Debug, Clone)]
pub struct SyntheticNews {
    rng: ChaCha8Rng,
    base: Vec<f64>,
    tick: u64,
}

impl SyntheticNews {
    pub fn new(num_sources: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = LogNormal::new(3.0, 0.8).expect("valid parameters");
        let base = (0..num_sources).map(|_| dist.sample(&mut rng)).collect();
        SyntheticNews { rng, base, tick: 0 }
    }

    pub fn next_tick(&mut self) -> NewsTick {
        let hour = (self.tick * 15 / 60) % 24;
        let phase = (hour as f64 - 6.0) / 24.0 * std::f64::consts::TAU;
        let modulation = 1.0 + 0.6 * phase.sin();
        let counts = self
            .base
            .iter()
            .map(|b| {
                let burst = if self.rng.random_bool(0.05) { 3.0 } else { 1.0 };
                let lambda = (b * modulation * burst).max(0.1);
                Poisson::new(lambda).expect("positive rate").sample(&mut self.rng) as u64
            })
            .collect();
        let t = NewsTick { tick: self.tick, counts, fallback: None };
        self.tick += 1;
        t
    }
}

/// Synthetic or HTTP-backed per-source counts.
pub enum NewsSource {
    Synthetic(SyntheticNews),
    Http { url: String, num_sources: usize, agent: ureq::Agent, last: Option<Vec<u64>>, tick: u64 },
}

impl NewsSource {
    pub fn new(spec: &NewsStreamSpec) -> Result<NewsSource, DataError> {
        if spec.num_sources == 0 {
            return Err(DataError::InvalidSpec("num_sources must be at least 1".into()));
        }
        Ok(match &spec.endpoint {
            None => NewsSource::Synthetic(SyntheticNews::new(spec.num_sources, spec.seed)),
            Some(url) => {
                let agent: ureq::Agent = ureq::Agent::config_builder().timeout_global(Some(Duration::from_secs(5))).build().into();
                NewsSource::Http { url: url.clone(), num_sources: spec.num_sources, agent, last: None, tick: 0 }
            }
        })
    }

    /// Next tick. For an endpoint, a failed fetch reuses the last counts;
    /// with none available the tick is skipped with an error.
    pub fn next_tick(&mut self) -> Result<NewsTick, DataError> {
        match self {
            NewsSource::Synthetic(s) => Ok(s.next_tick()),
            NewsSource::Http { url, num_sources, agent, last, tick } => {
                let t = *tick;
                *tick += 1;
                match fetch(agent, url, *num_sources) {
                    Ok(counts) => {
                        *last = Some(counts.clone());
                        Ok(NewsTick { tick: t, counts, fallback: None })
                    }
                    Err(reason) => match last {
                        Some(prev) => {
                            log::warn!("news endpoint failed, reusing previous counts: {reason}");
                            Ok(NewsTick { tick: t, counts: prev.clone(), fallback: Some(reason) })
                        }
                        None => Err(DataError::Skipped(reason)),
                    },
                }
            }
        }
    }
}

fn fetch(agent: &ureq::Agent, url: &str, n: usize) -> Result<Vec<u64>, String> {
    let mut resp = agent.get(url).call().map_err(|e| e.to_string())?;
    let body = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
    parse_counts(&body, n)
}

/// Parses `source_id,count` lines; sources missing from the body count 0.
pub(crate) fn parse_counts(body: &str, n: usize) -> Result<Vec<u64>, String> {
    let mut counts = vec![0; n];
    for line in body.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (id, c) = line.split_once(',').ok_or_else(|| format!("bad line {line:?}"))?;
        let id: usize = id.trim().parse().map_err(|_| format!("bad source id {id:?}"))?;
        let c: u64 = c.trim().parse().map_err(|_| format!("bad count {c:?}"))?;
        *counts.get_mut(id).ok_or_else(|| format!("source {id} out of range"))? = c;
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Write};
    use std::net::TcpListener;
    use std::thread;

    /// Serves the given (status, body) pairs, one per connection.
    fn serve(responses: Vec<(u16, &'static str)>) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/counts", listener.local_addr().unwrap());
        thread::spawn(move || {
            for (status, body) in responses {
                let (mut s, _) = listener.accept().unwrap();
                let mut r = BufReader::new(s.try_clone().unwrap());
                let mut line = String::new();
                while r.read_line(&mut line).unwrap() > 0 && line != "\r\n" {
                    line.clear();
                }
                let _ = write!(s, "HTTP/1.1 {status} X\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}", body.len());
            }
        });
        url
    }

    #[test]
    fn synthetic_shape_and_reproducibility() {
        let spec = NewsStreamSpec { seed: 5, ..Default::default() };
        let mut a = NewsSource::new(&spec).unwrap();
        let mut b = NewsSource::new(&spec).unwrap();
        for _ in 0..10 {
            let x = a.next_tick().unwrap();
            assert_eq!(x.counts.len(), 28);
            assert_eq!(x, b.next_tick().unwrap());
        }
        assert!(NewsSource::new(&NewsStreamSpec { num_sources: 0, ..spec }).is_err());
    }

    #[test]
    fn endpoint_failure_reuses_last_counts() {
        let url = serve(vec![(200, "0,4\n1,7\n"), (500, "boom")]);
        let mut src = NewsSource::new(&NewsStreamSpec { num_sources: 2, endpoint: Some(url), ..Default::default() }).unwrap();
        let first = src.next_tick().unwrap();
        assert_eq!(first.counts, vec![4, 7]);
        let second = src.next_tick().unwrap();
        assert_eq!(second.counts, vec![4, 7]);
        assert!(second.fallback.is_some());
    }

    #[test]
    fn endpoint_failure_without_history_skips() {
        let url = serve(vec![(500, "")]);
        let mut src = NewsSource::new(&NewsStreamSpec { num_sources: 2, endpoint: Some(url), ..Default::default() }).unwrap();
        assert!(matches!(src.next_tick(), Err(DataError::Skipped(_))));
    }

    #[test]
    fn count_lines() {
        assert_eq!(parse_counts("1,3\n", 3).unwrap(), vec![0, 3, 0]);
        assert!(parse_counts("5,1", 3).is_err());
        assert!(parse_counts("x", 3).is_err());
    }
}
