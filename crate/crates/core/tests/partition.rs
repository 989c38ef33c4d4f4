use fedsilo_core::partition::{dual_dirichlet_partition, partition_report, PartitionConfig};
use proptest::prelude::*;

fn balanced(n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|i| i % classes).collect()
}

fn max_share_uniform(labels: &[usize], clients: usize) -> f64 {
    // Round-robin split: the least skewed partition a client can get.
    let mut worst: f64 = 0.0;
    for c in 0..clients {
        let shard: Vec<usize> = labels.iter().copied().skip(c).step_by(clients).collect();
        let mut hist = [0usize; 64];
        for &l in &shard {
            hist[l] += 1;
        }
        worst = worst.max(*hist.iter().max().unwrap() as f64 / shard.len() as f64);
    }
    worst
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn plans_are_exact_covers(
        labels in prop::collection::vec(0usize..12, 1..300),
        clients in 1usize..8,
        alpha1 in 0.01f64..100.0,
        alpha2 in 0.01f64..100.0,
        seed in any::<u64>(),
    ) {
        prop_assume!(labels.len() >= clients);
        let plan = dual_dirichlet_partition(&labels, &PartitionConfig::new(clients, alpha1, alpha2, seed)).unwrap();
        prop_assert!(plan.check(&labels).is_ok());
        let report = partition_report(&plan, &labels).unwrap();
        prop_assert_eq!(report.client_sizes(), plan.client_sizes());
        prop_assert_eq!(report.rows.iter().map(|r| r.count).sum::<usize>(), labels.len());
    }
}

#[test]
fn client_size_moments_follow_size_concentration() {
    let labels = balanced(10_000, 10);
    let mut fractions = Vec::new();
    for seed in 0..1000 {
        let plan = dual_dirichlet_partition(&labels, &PartitionConfig::new(4, 2.0, 8.0, seed)).unwrap();
        fractions.extend(plan.client_sizes().iter().map(|&s| s as f64 / 10_000.0));
    }
    let n = fractions.len() as f64;
    let mean = fractions.iter().sum::<f64>() / n;
    let var = fractions.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let expected = (3.0 / 16.0) / 33.0;
    assert!((mean - 0.25).abs() < 0.02, "mean {mean}");
    assert!((var / expected - 1.0).abs() < 0.2, "variance {var} vs {expected}");
}

#[test]
fn small_class_concentration_skews_clients() {
    let labels = balanced(2_000, 10);
    let baseline = max_share_uniform(&labels, 4);
    let mut skewed = 0;
    let mut total = 0;
    for seed in 0..200 {
        let plan = dual_dirichlet_partition(&labels, &PartitionConfig::new(4, 0.1, 8.0, seed)).unwrap();
        for share in partition_report(&plan, &labels).unwrap().max_class_shares() {
            total += 1;
            skewed += usize::from(share > baseline);
        }
    }
    assert!(skewed as f64 >= 0.95 * total as f64, "{skewed}/{total}");
}

#[test]
fn skew_decreases_with_class_concentration() {
    let labels = balanced(2_000, 10);
    let mean_max_share = |alpha1: f64| {
        let mut sum = 0.0;
        let mut count = 0.0;
        for seed in 0..200 {
            let plan = dual_dirichlet_partition(&labels, &PartitionConfig::new(4, alpha1, 8.0, seed)).unwrap();
            for s in partition_report(&plan, &labels).unwrap().max_class_shares() {
                sum += s;
                count += 1.0;
            }
        }
        sum / count
    };
    let shares: Vec<f64> = [0.1, 2.0, 100.0].into_iter().map(mean_max_share).collect();
    assert!(shares[0] > shares[1] && shares[1] > shares[2], "{shares:?}");
}

#[test]
fn near_iid_report_tracks_global_fractions() {
    // Huge alpha1 makes every client's mix almost uniform over classes.
    let labels: Vec<usize> = (0..20_000).map(|i| [0, 0, 1, 2][i % 4]).collect();
    let plan = dual_dirichlet_partition(&labels, &PartitionConfig::new(4, 1e6, 1e6, 5)).unwrap();
    let global = [0.5, 0.25, 0.25];
    for row in partition_report(&plan, &labels).unwrap().rows {
        assert!(
            (row.fraction - global[row.class]).abs() < 0.05,
            "client {} class {}: {}",
            row.client,
            row.class,
            row.fraction
        );
    }
}
