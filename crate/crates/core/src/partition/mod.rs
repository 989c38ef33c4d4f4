//! Dual-Dirichlet non-IID partitioning and per-client label reports.
//!
//! Client sizes come from `Dirichlet(alpha2 · 1)` and each client's class
//! mixture from `Dirichlet(alpha1 · 1)` over the observed classes. Integer
//! quotas use largest-remainder rounding; samples a class cannot supply are
//! made up from other classes' leftovers, so every plan is an exact cover
//! and client sizes follow the size draw exactly.

mod dirichlet;

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dirichlet::{sample_dirichlet, sample_gamma, sample_log_gamma};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PartitionError {
    #[error("concentration parameters must be positive and finite, got {0}")]
    NonPositiveAlpha(f64),
    #[error("no concentration parameters given")]
    EmptyAlphas,
    #[error("no labels to partition")]
    EmptyLabels,
    #[error("{samples} samples cannot cover {clients} clients")]
    TooFewSamples { samples: usize, clients: usize },
    #[error("n_clients must be at least 1")]
    NoClients,
    #[error("plan does not match labels: {0}")]
    PlanLabelMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PartitionConfig {
    pub n_clients: usize,
    /// Class concentration within a client; small values give skewed shards.
    pub alpha1: f64,
    /// Size concentration across clients; small values give unequal shards.
    pub alpha2: f64,
    pub seed: u64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            n_clients: 4,
            alpha1: 2.0,
            alpha2: 8.0,
            seed: 0,
        }
    }
}

impl PartitionConfig {
    pub fn new(n_clients: usize, alpha1: f64, alpha2: f64, seed: u64) -> Self {
        Self {
            n_clients,
            alpha1,
            alpha2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), PartitionError> {
        if self.n_clients == 0 {
            return Err(PartitionError::NoClients);
        }
        for a in [self.alpha1, self.alpha2] {
            if !(a > 0.0 && a.is_finite()) {
                return Err(PartitionError::NonPositiveAlpha(a));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub config: PartitionConfig,
    /// Sorted sample indices per client.
    pub assignments: Vec<Vec<usize>>,
    /// Global count per label value, for checking the plan against its labels.
    pub label_counts: Vec<usize>,
}

fn label_counts(labels: &[usize]) -> Vec<usize> {
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut counts = vec![0; classes];
    for &l in labels {
        counts[l] += 1;
    }
    counts
}

impl PartitionPlan {
    pub fn n_clients(&self) -> usize {
        self.assignments.len()
    }

    pub fn client_sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }

    pub fn n_samples(&self) -> usize {
        self.assignments.iter().map(Vec::len).sum()
    }

    /// Checks the plan is a disjoint, exhaustive cover of `labels` with a
    /// non-empty shard per client and matching label counts.
    pub fn check(&self, labels: &[usize]) -> Result<(), PartitionError> {
        let mismatch = |m: String| Err(PartitionError::PlanLabelMismatch(m));
        if self.assignments.len() != self.config.n_clients {
            return mismatch(format!(
                "{} shards for {} clients",
                self.assignments.len(),
                self.config.n_clients
            ));
        }
        if label_counts(labels) != self.label_counts {
            return mismatch("label counts differ from those the plan was built on".into());
        }
        let mut seen = vec![false; labels.len()];
        for (c, shard) in self.assignments.iter().enumerate() {
            if shard.is_empty() {
                return mismatch(format!("client {c} has no samples"));
            }
            for &i in shard {
                match seen.get_mut(i) {
                    None => return mismatch(format!("index {i} out of range for {} labels", labels.len())),
                    Some(true) => return mismatch(format!("index {i} assigned twice")),
                    Some(s) => *s = true,
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return mismatch(format!("index {missing} is unassigned"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Splits `total` proportionally to `weights` (which need not be
/// normalized) so the parts sum to `total` exactly. Leftover units go to the
/// largest fractional parts, ties to the lowest index.
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() {
        return Vec::new();
    }
    if sum.is_nan() || sum <= 0.0 {
        let mut out = vec![0; weights.len()];
        out[0] = total;
        return out;
    }
    let raw: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut parts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = parts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    if assigned <= total {
        order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
        for &i in order.iter().cycle().take(total - assigned) {
            parts[i] += 1;
        }
    } else {
        // Only reachable through rounding noise in `raw`.
        order.sort_by(|&a, &b| parts[b].cmp(&parts[a]).then(a.cmp(&b)));
        for &i in order.iter().cycle().take(assigned - total) {
            parts[i] -= 1;
        }
    }
    parts
}

/// Client sizes from a size draw: largest remainder, then every empty client
/// takes one sample from the currently largest client.
fn client_sizes(props: &[f64], n: usize) -> Vec<usize> {
    let mut sizes = largest_remainder(props, n);
    for c in 0..sizes.len() {
        if sizes[c] == 0 {
            let donor = (0..sizes.len())
                .max_by(|&a, &b| sizes[a].cmp(&sizes[b]).then(b.cmp(&a)))
                .expect("at least one client");
            sizes[donor] -= 1;
            sizes[c] = 1;
        }
    }
    sizes
}

pub fn dual_dirichlet_partition(labels: &[usize], config: &PartitionConfig) -> Result<PartitionPlan, PartitionError> {
    config.validate()?;
    if labels.is_empty() {
        return Err(PartitionError::EmptyLabels);
    }
    let n = labels.len();
    let k = config.n_clients;
    if n < k {
        return Err(PartitionError::TooFewSamples { samples: n, clients: k });
    }
    let counts = label_counts(labels);
    let classes: Vec<usize> = (0..counts.len()).filter(|&c| counts[c] > 0).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let sizes = client_sizes(&sample_dirichlet(&vec![config.alpha2; k], &mut rng)?, n);

    // demand[c][j]: samples client c wants from observed class j.
    let mut demand = Vec::with_capacity(k);
    for &size in &sizes {
        let mix = sample_dirichlet(&vec![config.alpha1; classes.len()], &mut rng)?;
        demand.push(largest_remainder(&mix, size));
    }

    let mut assignments: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut leftovers: Vec<usize> = Vec::new();
    for (j, &class) in classes.iter().enumerate() {
        let mut pool: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
        pool.shuffle(&mut rng);
        let wanted: Vec<usize> = demand.iter().map(|d| d[j]).collect();
        let total_wanted: usize = wanted.iter().sum();
        let grant = if total_wanted <= pool.len() {
            wanted
        } else {
            let w: Vec<f64> = wanted.iter().map(|&x| x as f64).collect();
            largest_remainder(&w, pool.len())
        };
        let mut cursor = 0;
        for (c, &g) in grant.iter().enumerate() {
            assignments[c].extend_from_slice(&pool[cursor..cursor + g]);
            cursor += g;
        }
        leftovers.extend_from_slice(&pool[cursor..]);
    }

    // Class shortfalls and leftovers balance exactly, since both the quotas
    // and the pool sizes sum to n.
    for i in leftovers {
        let c = (0..k)
            .max_by(|&a, &b| {
                let ua = sizes[a] - assignments[a].len();
                let ub = sizes[b] - assignments[b].len();
                ua.cmp(&ub).then(b.cmp(&a))
            })
            .expect("at least one client");
        debug_assert!(assignments[c].len() < sizes[c]);
        assignments[c].push(i);
    }
    for shard in &mut assignments {
        shard.sort_unstable();
    }
    let plan = PartitionPlan {
        config: config.clone(),
        assignments,
        label_counts: counts,
    };
    debug_assert!(plan.check(labels).is_ok());
    Ok(plan)
}

/// One client's share of the data: that client's rows under the plan for
/// `labels` and `config`.
pub fn client_shard(labels: &[usize], config: &PartitionConfig, client: usize) -> Result<Vec<usize>, PartitionError> {
    if client >= config.n_clients {
        return Err(PartitionError::PlanLabelMismatch(format!(
            "client {client} outside 0..{}",
            config.n_clients
        )));
    }
    let mut plan = dual_dirichlet_partition(labels, config)?;
    Ok(plan.assignments.swap_remove(client))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub client: usize,
    pub class: usize,
    pub count: usize,
    /// Share of the client's shard.
    pub fraction: f64,
}

/// Per-client label histogram, one row per (client, observed class).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub rows: Vec<ReportRow>,
}

pub fn partition_report(plan: &PartitionPlan, labels: &[usize]) -> Result<PartitionReport, PartitionError> {
    plan.check(labels)?;
    let classes: BTreeSet<usize> = labels.iter().copied().collect();
    let mut rows = Vec::new();
    for (client, shard) in plan.assignments.iter().enumerate() {
        let hist = label_counts(&shard.iter().map(|&i| labels[i]).collect::<Vec<_>>());
        for &class in &classes {
            let count = hist.get(class).copied().unwrap_or(0);
            rows.push(ReportRow {
                client,
                class,
                count,
                fraction: count as f64 / shard.len() as f64,
            });
        }
    }
    Ok(PartitionReport { rows })
}

impl PartitionReport {
    pub fn client_sizes(&self) -> Vec<usize> {
        let clients = self.rows.iter().map(|r| r.client + 1).max().unwrap_or(0);
        let mut sizes = vec![0; clients];
        for r in &self.rows {
            sizes[r.client] += r.count;
        }
        sizes
    }

    /// Largest class fraction within each client.
    pub fn max_class_shares(&self) -> Vec<f64> {
        let clients = self.client_sizes().len();
        let mut shares = vec![0.0f64; clients];
        for r in &self.rows {
            shares[r.client] = shares[r.client].max(r.fraction);
        }
        shares
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["client", "class", "count", "fraction"]).expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.client.to_string(),
                r.class.to_string(),
                r.count.to_string(),
                format!("{:.6}", r.fraction),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv output is utf-8")
    }

    /// Plain-text table: one line per client with its class counts.
    pub fn to_table(&self) -> String {
        let classes: BTreeSet<usize> = self.rows.iter().map(|r| r.class).collect();
        let mut out = String::from("client");
        for c in &classes {
            out.push_str(&format!("\t{c}"));
        }
        out.push_str("\ttotal\n");
        for (client, size) in self.client_sizes().iter().enumerate() {
            out.push_str(&client.to_string());
            for r in self.rows.iter().filter(|r| r.client == client) {
                out.push_str(&format!("\t{}", r.count));
            }
            out.push_str(&format!("\t{size}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balanced(n: usize, classes: usize) -> Vec<usize> {
        (0..n).map(|i| i % classes).collect()
    }

    #[test]
    fn largest_remainder_sums_exactly() {
        assert_eq!(largest_remainder(&[1.0, 1.0, 1.0], 10), vec![4, 3, 3]);
        assert_eq!(largest_remainder(&[0.5, 0.25, 0.25], 3), vec![1, 1, 1]);
        assert_eq!(largest_remainder(&[0.6, 0.25, 0.15], 3), vec![2, 1, 0]);
        assert_eq!(largest_remainder(&[0.0, 0.0], 5), vec![5, 0]);
        assert_eq!(largest_remainder(&[0.2, 0.8], 0), vec![0, 0]);
    }

    #[test]
    fn single_client_owns_everything() {
        let labels = balanced(50, 3);
        for alpha in [0.05, 1.0, 50.0] {
            let plan = dual_dirichlet_partition(&labels, &PartitionConfig::new(1, alpha, alpha, 9)).unwrap();
            assert_eq!(plan.assignments, vec![(0..50).collect::<Vec<_>>()]);
        }
    }

    #[test]
    fn errors() {
        let cfg = PartitionConfig::default();
        assert_eq!(dual_dirichlet_partition(&[], &cfg).unwrap_err(), PartitionError::EmptyLabels);
        assert_eq!(
            dual_dirichlet_partition(&[0, 1, 0], &cfg).unwrap_err(),
            PartitionError::TooFewSamples { samples: 3, clients: 4 }
        );
        let bad = PartitionConfig {
            alpha1: 0.0,
            ..cfg.clone()
        };
        assert_eq!(
            dual_dirichlet_partition(&balanced(10, 2), &bad).unwrap_err(),
            PartitionError::NonPositiveAlpha(0.0)
        );
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let labels = balanced(500, 10);
        let a = dual_dirichlet_partition(&labels, &PartitionConfig::new(4, 2.0, 8.0, 3)).unwrap();
        let b = dual_dirichlet_partition(&labels, &PartitionConfig::new(4, 2.0, 8.0, 3)).unwrap();
        let c = dual_dirichlet_partition(&labels, &PartitionConfig::new(4, 2.0, 8.0, 4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.assignments, c.assignments);
    }

    #[test]
    fn exact_cover_when_every_sample_is_needed() {
        // N == n_clients: every client gets exactly one sample.
        let labels = vec![0, 0, 0, 1];
        let plan = dual_dirichlet_partition(&labels, &PartitionConfig::new(4, 0.1, 0.1, 1)).unwrap();
        assert_eq!(plan.client_sizes(), vec![1; 4]);
        plan.check(&labels).unwrap();
    }

    #[test]
    fn report_counts() {
        let labels = vec![0, 0, 1];
        let plan = dual_dirichlet_partition(&labels, &PartitionConfig::new(1, 1.0, 1.0, 0)).unwrap();
        let report = partition_report(&plan, &labels).unwrap();
        assert_eq!(
            report.rows,
            vec![
                ReportRow {
                    client: 0,
                    class: 0,
                    count: 2,
                    fraction: 2.0 / 3.0
                },
                ReportRow {
                    client: 0,
                    class: 1,
                    count: 1,
                    fraction: 1.0 / 3.0
                },
            ]
        );
        assert_eq!(
            report.to_csv(),
            "client,class,count,fraction\n0,0,2,0.666667\n0,1,1,0.333333\n"
        );
    }

    #[test]
    fn report_rejects_foreign_plan() {
        let labels = balanced(40, 4);
        let plan = dual_dirichlet_partition(&labels, &PartitionConfig::default()).unwrap();
        assert!(matches!(
            partition_report(&plan, &balanced(41, 4)),
            Err(PartitionError::PlanLabelMismatch(_))
        ));
        let mut broken = plan.clone();
        let moved = broken.assignments[0][0];
        broken.assignments[1].push(moved);
        assert!(matches!(
            partition_report(&broken, &labels),
            Err(PartitionError::PlanLabelMismatch(_))
        ));
    }

    #[test]
    fn json_round_trip() {
        let labels = balanced(60, 3);
        let plan = dual_dirichlet_partition(&labels, &PartitionConfig::default()).unwrap();
        assert_eq!(PartitionPlan::from_json(&plan.to_json()).unwrap(), plan);
    }

    #[test]
    fn client_shard_matches_plan() {
        let labels = balanced(100, 5);
        let cfg = PartitionConfig::new(3, 1.0, 4.0, 12);
        let plan = dual_dirichlet_partition(&labels, &cfg).unwrap();
        for c in 0..3 {
            assert_eq!(client_shard(&labels, &cfg, c).unwrap(), plan.assignments[c]);
        }
        assert!(client_shard(&labels, &cfg, 3).is_err());
    }
}
