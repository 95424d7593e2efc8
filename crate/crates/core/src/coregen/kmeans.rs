//! Lloyd k-means with k-means++ seeding, and the binary-splitting
//! hierarchical variant used to partition core samples.
//!
//! Samples are the columns of a `DMatrix`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Error, Result};

const MAX_LLOYD_ITERS: usize = 100;

/// Result of a flat k-means run over a subset of columns.
#[derive(Debug, Clone)]
pub struct KMeans {
    pub centroids: DMatrix<f64>,
    /// Label per member, in member order.
    pub labels: Vec<usize>,
    pub inertia: f64,
}

fn sq_dist(samples: &DMatrix<f64>, col: usize, centroid: &DVector<f64>) -> f64 {
    samples
        .column(col)
        .iter()
        .zip(centroid.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

/// Flat k-means over the columns listed in `members`.
pub fn kmeans(samples: &DMatrix<f64>, members: &[usize], k: usize, rng: &mut impl Rng) -> Result<KMeans> {
    ensure!(k >= 1, Argument, "k-means needs k >= 1");
    ensure!(
        members.len() >= k,
        Argument,
        "k-means with k={k} needs at least {k} samples, got {}",
        members.len()
    );
    let d = samples.nrows();

    // k-means++ seeding.
    let mut centroids: Vec<DVector<f64>> = Vec::with_capacity(k);
    let first = members[rng.random_range(0..members.len())];
    centroids.push(samples.column(first).into_owned());
    let mut nearest: Vec<f64> = members.iter().map(|&m| sq_dist(samples, m, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = members.len() - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..members.len())
        };
        let c = samples.column(members[pick]).into_owned();
        for (n, &m) in nearest.iter_mut().zip(members) {
            *n = n.min(sq_dist(samples, m, &c));
        }
        centroids.push(c);
    }

    let mut labels = vec![usize::MAX; members.len()];
    let mut inertia = 0.0;
    for _ in 0..MAX_LLOYD_ITERS {
        let mut changed = false;
        inertia = 0.0;
        for (label, &m) in labels.iter_mut().zip(members) {
            let (best, dist) = centroids
                .iter()
                .enumerate()
                .map(|(j, c)| (j, sq_dist(samples, m, c)))
                .fold((0, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc });
            inertia += dist;
            if *label != best {
                *label = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![DVector::<f64>::zeros(d); k];
        let mut counts = vec![0usize; k];
        for (&label, &m) in labels.iter().zip(members) {
            sums[label] += samples.column(m);
            counts[label] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = &sums[j] / counts[j] as f64;
            }
        }
    }

    let mut matrix = DMatrix::zeros(d, k);
    for (j, c) in centroids.iter().enumerate() {
        matrix.set_column(j, c);
    }
    Ok(KMeans {
        centroids: matrix,
        labels,
        inertia,
    })
}

fn inertia_of(samples: &DMatrix<f64>, members: &[usize]) -> f64 {
    let d = samples.nrows();
    let mut mean = DVector::<f64>::zeros(d);
    for &m in members {
        mean += samples.column(m);
    }
    mean /= members.len() as f64;
    members.iter().map(|&m| sq_dist(samples, m, &mean)).sum()
}

struct Leaf {
    members: Vec<usize>,
    inertia: f64,
    splittable: bool,
}

/// Binary-splitting tree: repeatedly 2-means-splits the leaf with the
/// largest inertia until `leaves` leaves exist or no leaf can be split
/// without producing a child smaller than `min_size`. Returns the label of
/// every column and the number of leaves reached.
pub(crate) fn split_tree(samples: &DMatrix<f64>, leaves: usize, min_size: usize, seed: u64) -> Result<(Vec<usize>, usize)> {
    let m = samples.ncols();
    ensure!(leaves >= 1, Argument, "cluster count must be at least 1");
    ensure!(leaves <= m, Argument, "cannot form {leaves} clusters from {m} samples");
    let min_size = min_size.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<usize> = (0..m).collect();
    let mut tree = vec![Leaf {
        inertia: inertia_of(samples, &all),
        members: all,
        splittable: true,
    }];
    while tree.len() < leaves {
        let target = tree
            .iter()
            .enumerate()
            .filter(|(_, l)| l.splittable && l.inertia > 0.0 && l.members.len() >= 2 * min_size)
            .max_by(|a, b| a.1.inertia.total_cmp(&b.1.inertia).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i);
        let Some(i) = target else { break };
        let split = kmeans(samples, &tree[i].members, 2, &mut rng)?;
        let (mut left, mut right) = (Vec::new(), Vec::new());
        for (&label, &member) in split.labels.iter().zip(&tree[i].members) {
            if label == 0 { left.push(member) } else { right.push(member) }
        }
        if left.len() < min_size || right.len() < min_size {
            tree[i].splittable = false;
            continue;
        }
        let right_leaf = Leaf {
            inertia: inertia_of(samples, &right),
            members: right,
            splittable: true,
        };
        tree[i] = Leaf {
            inertia: inertia_of(samples, &left),
            members: left,
            splittable: true,
        };
        tree.push(right_leaf);
    }
    let mut labels = vec![0; m];
    for (label, leaf) in tree.iter().enumerate() {
        for &member in &leaf.members {
            labels[member] = label;
        }
    }
    Ok((labels, tree.len()))
}

/// Partitions the columns of `samples` into exactly `leaves` clusters by
/// greedy binary splitting of the largest-inertia cluster.
pub fn hierarchical_kmeans(samples: &DMatrix<f64>, leaves: usize, seed: u64) -> Result<Vec<usize>> {
    let (labels, reached) = split_tree(samples, leaves, 1, seed)?;
    if reached < leaves {
        return Err(Error::Fit(format!(
            "only {reached} distinct clusters could be formed, {leaves} requested"
        )));
    }
    Ok(labels)
}
