//! N-way K-shot episode sampling.

use rand::seq::index;
use rand::Rng;

use crate::dataset::SplitView;
use crate::error::{Error, Result};

/// One task. Items are `(image index, episode-local class)`, grouped by
/// class in ascending order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    pub u_query: usize,
    pub support: Vec<(usize, usize)>,
    pub query: Vec<(usize, usize)>,
}

impl Episode {
    /// Supports first, then queries: the row order of the episode batch.
    pub fn image_indices(&self) -> Vec<usize> {
        self.support.iter().chain(&self.query).map(|p| p.0).collect()
    }

    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|p| p.1).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|p| p.1).collect()
    }
}

/// Uniform class choice without replacement among classes holding at least
/// `k_shot + u_query` images, then uniform image choice without replacement.
pub fn sample_episode(
    split: &SplitView,
    n_way: usize,
    k_shot: usize,
    u_query: usize,
    rng: &mut impl Rng,
) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 || u_query == 0 {
        return Err(Error::invalid("sample_episode", "n_way, k_shot and u_query must be positive"));
    }
    let need = k_shot + u_query;
    let eligible: Vec<usize> = (0..split.classes.len())
        .filter(|&c| split.members[c].len() >= need)
        .collect();
    if eligible.len() < n_way {
        return Err(Error::Capacity(format!(
            "{n_way}-way episode needs {n_way} classes with >= {need} images; split `{}` has {}",
            split.split,
            eligible.len()
        )));
    }
    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut query = Vec::with_capacity(n_way * u_query);
    let chosen = index::sample(rng, eligible.len(), n_way).into_vec();
    for (local, &ci) in chosen.iter().enumerate() {
        let members = &split.members[eligible[ci]];
        let picks = index::sample(rng, members.len(), need).into_vec();
        for (j, &p) in picks.iter().enumerate() {
            let item = (members[p], local);
            if j < k_shot {
                support.push(item);
            } else {
                query.push(item);
            }
        }
    }
    Ok(Episode {
        n_way,
        k_shot,
        u_query,
        support,
        query,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::Split;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn view(classes: usize, per: usize) -> SplitView {
        SplitView {
            split: Split::Novel,
            classes: (0..classes).collect(),
            members: (0..classes).map(|c| (c * per..(c + 1) * per).collect()).collect(),
        }
    }

    #[test]
    fn five_way_one_shot_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = sample_episode(&view(10, 20), 5, 1, 15, &mut rng).unwrap();
        assert_eq!((e.support.len(), e.query.len()), (5, 75));
    }

    #[test]
    fn capacity_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_episode(&view(4, 20), 5, 1, 15, &mut rng), Err(Error::Capacity(_))));
        assert!(matches!(sample_episode(&view(10, 15), 5, 1, 15, &mut rng), Err(Error::Capacity(_))));
    }
}
