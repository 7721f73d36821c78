//! Synthetic cross-domain interaction logs with known interest structure.
//!
//! Items of each domain are partitioned into contiguous clusters: the first
//! `n_shared_interests` clusters are topics that exist in both domains (cluster
//! `k` of X pairs with cluster `k` of Y), the remaining `n_specific_interests`
//! clusters exist in one domain only. Every user follows one shared topic in
//! both domains, may additionally hold one domain-specific interest, and emits
//! a `noise_rate` fraction of items drawn from outside all their clusters.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Domain, InteractionEvent};
use crate::error::{DpgError, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub n_items_x: usize,
    pub n_items_y: usize,
    pub n_shared_interests: usize,
    pub n_specific_interests: usize,
    pub noise_rate: f64,
    /// Probability that a user carries a domain-specific interest.
    pub specific_prob: f64,
    /// Share of non-noise items in the specific domain drawn from the
    /// specific interest instead of the shared topic.
    pub specific_share: f64,
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    pub rng_seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_users: 200,
            n_items_x: 150,
            n_items_y: 150,
            n_shared_interests: 10,
            n_specific_interests: 5,
            noise_rate: 0.2,
            specific_prob: 0.5,
            specific_share: 0.5,
            seq_len_min: 10,
            seq_len_max: 15,
            rng_seed: 0,
        }
    }
}

impl SyntheticConfig {
    /// The desk-scale benchmark: every user holds a domain-specific interest
    /// that dominates its domain.
    pub fn benchmark(rng_seed: u64) -> Self {
        SyntheticConfig {
            specific_prob: 1.0,
            specific_share: 0.7,
            rng_seed,
            ..SyntheticConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DpgError::InvalidArgument(m.to_string()));
        if self.n_users == 0 || self.n_items_x == 0 || self.n_items_y == 0 || self.n_shared_interests == 0 {
            return bad("synthetic counts must be positive");
        }
        let clusters = self.n_shared_interests + self.n_specific_interests;
        if self.n_items_x < clusters || self.n_items_y < clusters {
            return bad("each domain needs at least one item per interest cluster");
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return bad("noise_rate must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.specific_prob) || !(0.0..=1.0).contains(&self.specific_share) {
            return bad("specific_prob and specific_share must lie in [0, 1]");
        }
        if self.seq_len_min == 0 || self.seq_len_min > self.seq_len_max || self.seq_len_max > 15 {
            return bad("sequence length range must satisfy 1 <= min <= max <= 15");
        }
        Ok(())
    }

    fn n_items(&self, d: Domain) -> usize {
        match d {
            Domain::X => self.n_items_x,
            Domain::Y => self.n_items_y,
        }
    }

    fn n_clusters(&self) -> usize {
        self.n_shared_interests + self.n_specific_interests
    }

    /// Item range `[lo, hi)` of cluster `c` in domain `d`.
    pub fn cluster_range(&self, d: Domain, c: usize) -> (usize, usize) {
        let n = self.n_items(d);
        let k = self.n_clusters();
        (c * n / k, (c + 1) * n / k)
    }

    /// Cluster of item number `item` in domain `d`.
    pub fn cluster_of(&self, d: Domain, item: usize) -> usize {
        (0..self.n_clusters())
            .find(|&c| {
                let (lo, hi) = self.cluster_range(d, c);
                (lo..hi).contains(&item)
            })
            .expect("item inside the domain")
    }
}

pub fn item_id(d: Domain, item: usize) -> String {
    format!("{}{item:05}", d.tag())
}

pub fn parse_item_id(id: &str) -> Option<(Domain, usize)> {
    let (head, num) = id.split_at(1);
    Some((head.parse().ok()?, num.parse().ok()?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventSource {
    Shared,
    Specific,
    Noise,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserTruth {
    pub user_id: String,
    pub shared: usize,
    /// Domain and cluster index (offset past the shared clusters).
    pub specific: Option<(Domain, usize)>,
}

impl UserTruth {
    pub fn owns(&self, cfg: &SyntheticConfig, d: Domain, item: usize) -> bool {
        let c = cfg.cluster_of(d, item);
        c == self.shared || self.specific == Some((d, c))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub users: Vec<UserTruth>,
    /// Source of each generated event, aligned with the event list.
    pub sources: Vec<EventSource>,
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<(Vec<InteractionEvent>, GroundTruth)> {
    cfg.validate()?;
    let mut events = Vec::new();
    let mut truth = GroundTruth {
        users: Vec::with_capacity(cfg.n_users),
        sources: Vec::new(),
    };
    for u in 0..cfg.n_users {
        let mut r = rng::stream(cfg.rng_seed, "synthetic-user", u as u64);
        let user_id = format!("u{u:05}");
        let shared = r.random_range(0..cfg.n_shared_interests);
        let specific = if cfg.n_specific_interests > 0 && r.random_bool(cfg.specific_prob) {
            let d = if r.random_bool(0.5) { Domain::X } else { Domain::Y };
            Some((d, cfg.n_shared_interests + r.random_range(0..cfg.n_specific_interests)))
        } else {
            None
        };
        let ut = UserTruth {
            user_id: user_id.clone(),
            shared,
            specific,
        };

        let len = r.random_range(cfg.seq_len_min..=cfg.seq_len_max);
        // At least three items per domain whenever the length allows it.
        let floor = (len / 2).min(3);
        let n_x = floor + (0..len - 2 * floor).filter(|_| r.random_bool(0.5)).count();
        let mut domains: Vec<Domain> = (0..len)
            .map(|i| if i < n_x { Domain::X } else { Domain::Y })
            .collect();
        domains.shuffle(&mut r);

        for (pos, d) in domains.into_iter().enumerate() {
            let (source, item) = if r.random::<f64>() < cfg.noise_rate {
                let outside: Vec<usize> = (0..cfg.n_items(d)).filter(|&i| !ut.owns(cfg, d, i)).collect();
                if outside.is_empty() {
                    (EventSource::Shared, sample_cluster(&mut r, cfg, d, shared))
                } else {
                    (EventSource::Noise, outside[r.random_range(0..outside.len())])
                }
            } else {
                match specific {
                    Some((sd, c)) if sd == d && r.random_bool(cfg.specific_share) => {
                        (EventSource::Specific, sample_cluster(&mut r, cfg, d, c))
                    }
                    _ => (EventSource::Shared, sample_cluster(&mut r, cfg, d, shared)),
                }
            };
            events.push(InteractionEvent {
                user_id: user_id.clone(),
                item_id: item_id(d, item),
                domain: d,
                timestamp: 1_600_000_000 + (u as u64) * 10_000 + pos as u64 * 60,
            });
            truth.sources.push(source);
        }
        truth.users.push(ut);
    }
    Ok((events, truth))
}

fn sample_cluster(r: &mut rng::StreamRng, cfg: &SyntheticConfig, d: Domain, c: usize) -> usize {
    let (lo, hi) = cfg.cluster_range(d, c);
    r.random_range(lo..hi)
}

pub fn write_ground_truth(path: &Path, truth: &GroundTruth) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| DpgError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| DpgError::io(path, e);
    writeln!(w, "user_id\tshared_interest\tspecific_domain\tspecific_interest").map_err(io)?;
    for u in &truth.users {
        let (sd, sc) = match u.specific {
            Some((d, c)) => (d.tag().to_string(), c.to_string()),
            None => ("-".into(), "-".into()),
        };
        writeln!(w, "{}\t{}\t{sd}\t{sc}", u.user_id, u.shared).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SyntheticConfig {
        SyntheticConfig {
            n_users: 300,
            ..SyntheticConfig::default()
        }
    }

    fn item_of(e: &InteractionEvent) -> usize {
        parse_item_id(&e.item_id).unwrap().1
    }

    fn owner(truth: &GroundTruth, e: &InteractionEvent) -> usize {
        e.user_id[1..].parse::<usize>().inspect(|&u| {
            assert_eq!(truth.users[u].user_id, e.user_id);
        }).unwrap()
    }

    #[test]
    fn zero_noise_stays_in_clusters() {
        let c = SyntheticConfig { noise_rate: 0.0, ..cfg() };
        let (events, truth) = generate_synthetic(&c).unwrap();
        for e in &events {
            let u = &truth.users[owner(&truth, e)];
            assert!(u.owns(&c, e.domain, item_of(e)), "{e:?}");
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let a = generate_synthetic(&cfg()).unwrap();
        let b = generate_synthetic(&cfg()).unwrap();
        assert_eq!(a, b);
        let other = generate_synthetic(&SyntheticConfig { rng_seed: 1, ..cfg() }).unwrap();
        assert_ne!(a.0, other.0);
    }

    #[test]
    fn noise_fraction_matches_rate() {
        let c = SyntheticConfig {
            n_users: 900,
            noise_rate: 0.3,
            ..cfg()
        };
        let (events, truth) = generate_synthetic(&c).unwrap();
        assert!(events.len() >= 10_000);
        let off = events
            .iter()
            .filter(|e| !truth.users[owner(&truth, e)].owns(&c, e.domain, item_of(e)))
            .count();
        let frac = off as f64 / events.len() as f64;
        assert!((frac - 0.3).abs() <= 0.05, "off-cluster fraction {frac}");
    }

    #[test]
    fn every_user_has_three_per_domain() {
        let (events, _) = generate_synthetic(&cfg()).unwrap();
        let mut counts = std::collections::HashMap::<&str, [usize; 2]>::new();
        for e in &events {
            counts.entry(&e.user_id).or_default()[e.domain as usize] += 1;
        }
        assert!(counts.values().all(|c| c[0] >= 3 && c[1] >= 3));
    }

    #[test]
    fn cross_domain_interest_is_predictive() {
        // Predict the cluster of each Y item from the majority shared-cluster
        // vote of the same user's X items; accuracy must beat chance.
        let c = SyntheticConfig { noise_rate: 0.4, ..cfg() };
        let (events, truth) = generate_synthetic(&c).unwrap();
        let mut hits = 0usize;
        let mut total = 0usize;
        for u in 0..c.n_users {
            let mine: Vec<&InteractionEvent> = events.iter().filter(|e| owner(&truth, e) == u).collect();
            let mut votes = vec![0usize; c.n_shared_interests + c.n_specific_interests];
            for e in mine.iter().filter(|e| e.domain == Domain::X) {
                votes[c.cluster_of(Domain::X, item_of(e))] += 1;
            }
            let guess = (0..c.n_shared_interests).max_by_key(|&k| (votes[k], usize::MAX - k)).unwrap();
            for e in mine.iter().filter(|e| e.domain == Domain::Y) {
                total += 1;
                if c.cluster_of(Domain::Y, item_of(e)) == guess {
                    hits += 1;
                }
            }
        }
        let acc = hits as f64 / total as f64;
        let chance = 1.0 / (c.n_shared_interests + c.n_specific_interests) as f64;
        assert!(acc > 2.0 * chance, "accuracy {acc} vs chance {chance}");
    }

    #[test]
    fn rejects_bad_configs() {
        let c = SyntheticConfig { n_items_x: 3, ..cfg() };
        assert!(generate_synthetic(&c).is_err());
        let c = SyntheticConfig { seq_len_max: 16, ..cfg() };
        assert!(generate_synthetic(&c).is_err());
    }
}
