use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::seed::{rng_from, stream};

/// Assignment of dataset indices to clients.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    /// Per-client indices into the partitioned dataset, ascending.
    pub assignments: Vec<Vec<usize>>,
    /// Per-client owned classes, ascending.
    pub class_sets: Vec<Vec<usize>>,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.assignments.len()
    }

    pub fn client_data<T: Scalar>(&self, dataset: &Dataset<T>, client: usize) -> Dataset<T> {
        dataset.subset(&self.assignments[client])
    }

    pub fn client_sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }
}

/// Shuffles all indices and deals them round-robin.
pub fn partition_iid<T: Scalar>(dataset: &Dataset<T>, m: usize, seed: u64) -> Result<Partition> {
    if m == 0 {
        return Err(invalid("number of clients must be at least 1"));
    }
    if m > dataset.len() {
        return Err(invalid(format!(
            "cannot spread {} points over {m} clients",
            dataset.len()
        )));
    }
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    idx.shuffle(&mut rng_from(seed, &[stream::PARTITION]));
    let mut assignments = vec![Vec::new(); m];
    for (pos, i) in idx.into_iter().enumerate() {
        assignments[pos % m].push(i);
    }
    for a in &mut assignments {
        a.sort_unstable();
    }
    let class_sets = assignments
        .iter()
        .map(|a| dataset.subset(a).present_classes())
        .collect();
    Ok(Partition {
        assignments,
        class_sets,
    })
}

/// Pathological Non-IID split where every client owns exactly `c_k` classes.
///
/// Indices are grouped by class and each class is cut into class-pure shards;
/// `m·c_k` shards exist in total, allocated to classes in proportion to class
/// size (largest remainder, ties to the lower class id, at least one each).
/// Within a class, later shards absorb the remainder points. Shards are then
/// laid out class by class in a seeded class order and client `j` takes
/// shards `j, j+m, j+2m, ...`; since no class owns more than `m` consecutive
/// shards, the `c_k` shards of a client always belong to distinct classes.
/// Finally the client ids are permuted by the seed.
pub fn partition_pathological<T: Scalar>(
    dataset: &Dataset<T>,
    m: usize,
    c_k: usize,
    seed: u64,
) -> Result<Partition> {
    let s = dataset.num_classes();
    if m == 0 || c_k == 0 {
        return Err(invalid("clients and classes per client must be at least 1"));
    }
    if c_k > s {
        return Err(invalid(format!(
            "classes per client ({c_k}) exceeds the number of classes ({s})"
        )));
    }
    let total = m * c_k;
    if total < s {
        return Err(invalid(format!(
            "insufficient shards: {m} clients x {c_k} classes = {total} shards cannot cover {s} classes"
        )));
    }
    let counts = dataset.class_counts();
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(invalid(format!("class {empty} has zero points")));
    }

    let shards_per_class = allocate_shards(&counts, total, m);
    for (class, (&shards, &count)) in shards_per_class.iter().zip(&counts).enumerate() {
        if shards > count {
            return Err(invalid(format!(
                "insufficient shards: class {class} has {count} points but needs {shards} shards"
            )));
        }
    }

    let mut rng = rng_from(seed, &[stream::PARTITION]);
    let mut class_order: Vec<usize> = (0..s).collect();
    class_order.shuffle(&mut rng);

    // (class, indices) per shard, laid out class by class
    let mut shards: Vec<(usize, Vec<usize>)> = Vec::with_capacity(total);
    for &class in &class_order {
        let mut idx = dataset.indices_of_class(class);
        idx.shuffle(&mut rng);
        let k = shards_per_class[class];
        let base = idx.len() / k;
        let extra = idx.len() % k;
        let mut start = 0;
        for j in 0..k {
            // the last `extra` shards take one more point
            let len = base + usize::from(j >= k - extra);
            shards.push((class, idx[start..start + len].to_vec()));
            start += len;
        }
    }

    let mut client_ids: Vec<usize> = (0..m).collect();
    client_ids.shuffle(&mut rng);

    let mut assignments = vec![Vec::new(); m];
    let mut class_sets = vec![Vec::new(); m];
    for (pos, (class, idx)) in shards.into_iter().enumerate() {
        let client = client_ids[pos % m];
        assignments[client].extend(idx);
        class_sets[client].push(class);
    }
    for (a, c) in assignments.iter_mut().zip(&mut class_sets) {
        a.sort_unstable();
        c.sort_unstable();
    }
    Ok(Partition {
        assignments,
        class_sets,
    })
}

fn allocate_shards(counts: &[usize], total: usize, cap: usize) -> Vec<usize> {
    let n: usize = counts.iter().sum();
    let s = counts.len();
    let mut alloc: Vec<usize> = counts
        .iter()
        .map(|&c| (c * total / n).clamp(1, cap))
        .collect();
    let mut assigned: usize = alloc.iter().sum();
    // largest remainder first; stable order breaks ties by class id
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by_key(|&c| std::cmp::Reverse((counts[c] * total) % n));
    while assigned < total {
        let mut progressed = false;
        for &c in &order {
            if assigned == total {
                break;
            }
            if alloc[c] < cap {
                alloc[c] += 1;
                assigned += 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    while assigned > total {
        // only reachable through the floor of one shard per class
        let c = (0..s)
            .filter(|&c| alloc[c] > 1)
            .max_by_key(|&c| alloc[c])
            .expect("total >= number of classes");
        alloc[c] -= 1;
        assigned -= 1;
    }
    alloc
}
