//! Epoch batch composition.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha20Rng;

use crate::dataset::Label;
use crate::error::{Error, Result};

/// Shuffle sample indices into batches of roughly `batch_size`.
///
/// With `stratified` set (required whenever the GE2E term is active), each
/// class's shuffled indices are dealt round-robin across the batches and the
/// batch count is capped so every batch carries at least two coughs of each
/// class.
pub fn epoch_batches(
    labels: &[Label],
    batch_size: usize,
    stratified: bool,
    rng: &mut ChaCha20Rng,
) -> Result<Vec<Vec<usize>>> {
    if labels.is_empty() || batch_size == 0 {
        return Err(Error::Model("empty epoch or zero batch size".into()));
    }
    if !stratified {
        let mut idx: Vec<usize> = (0..labels.len()).collect();
        idx.shuffle(rng);
        return Ok(idx.chunks(batch_size).map(|c| c.to_vec()).collect());
    }

    let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, l) in labels.iter().enumerate() {
        by_class[l.index()].push(i);
    }
    let min_class = by_class[0].len().min(by_class[1].len());
    if min_class < 2 {
        return Err(Error::Model(format!(
            "stratified batching needs at least 2 coughs per class, got {} / {}",
            by_class[0].len(),
            by_class[1].len()
        )));
    }
    let k = labels.len().div_ceil(batch_size).clamp(1, min_class / 2);

    let mut batches: Vec<Vec<usize>> = vec![Vec::new(); k];
    for class in &mut by_class {
        class.shuffle(rng);
        for (i, &idx) in class.iter().enumerate() {
            batches[i % k].push(idx);
        }
    }
    for batch in &mut batches {
        batch.shuffle(rng);
    }
    Ok(batches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn labels(n_tb: usize, n_not: usize) -> Vec<Label> {
        let mut l = vec![Label::Tb; n_tb];
        l.extend(vec![Label::NotTb; n_not]);
        l
    }

    #[test]
    fn plain_batches_cover_every_index_once() {
        let l = labels(13, 17);
        let mut r = rng::stream(1, "batch", 0);
        let batches = epoch_batches(&l, 8, false, &mut r).unwrap();
        let mut seen: Vec<usize> = batches.into_iter().flatten().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..30).collect::<Vec<_>>());
    }

    #[test]
    fn stratified_batches_have_two_of_each_class() {
        let l = labels(9, 40);
        let mut r = rng::stream(2, "batch", 0);
        let batches = epoch_batches(&l, 16, true, &mut r).unwrap();
        for batch in &batches {
            let tb = batch.iter().filter(|&&i| l[i] == Label::Tb).count();
            let not = batch.len() - tb;
            assert!(tb >= 2 && not >= 2, "batch composition {tb}/{not}");
        }
        let mut seen: Vec<usize> = batches.into_iter().flatten().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..49).collect::<Vec<_>>());
    }

    #[test]
    fn stratified_needs_two_per_class() {
        let l = labels(1, 20);
        let mut r = rng::stream(3, "batch", 0);
        assert!(epoch_batches(&l, 8, true, &mut r).is_err());
    }

    #[test]
    fn batching_is_deterministic_per_stream() {
        let l = labels(20, 20);
        let a = epoch_batches(&l, 8, true, &mut rng::stream(4, "b", 7)).unwrap();
        let b = epoch_batches(&l, 8, true, &mut rng::stream(4, "b", 7)).unwrap();
        assert_eq!(a, b);
    }
}
