//! Synthetic traces assembled from library blocks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::isa::ExecutionPath;
use crate::library::{pairs_of, sample_block, BlockLibrary};
use crate::sim::{Origin, Trace};

/// Concatenates one randomly drawn block per instruction pair of `path`.
///
/// Fails with a coverage error listing every pair the library lacks.
pub fn synthesize<R: rand::Rng + ?Sized>(
    path: &ExecutionPath,
    library: &BlockLibrary,
    rng: &mut R,
) -> Result<Trace> {
    if path.is_empty() {
        return Err(Error::Parameter("cannot synthesize an empty path".into()));
    }
    let pairs = pairs_of(path);
    let missing = library.missing(&pairs);
    if !missing.is_empty() {
        return Err(Error::Coverage(missing));
    }
    let spc = library.samples_per_cycle;
    let mut samples = Vec::with_capacity(path.cycles() as usize * spc);
    for (key, ins) in pairs.iter().zip(&path.instructions) {
        let block = sample_block(library, key, rng)?;
        let expected = ins.cycles as usize * spc;
        if block.samples.len() != expected {
            return Err(Error::Segmentation(format!(
                "{key}: library block has {} samples, path needs {expected}",
                block.samples.len()
            )));
        }
        samples.extend_from_slice(&block.samples);
    }
    Ok(Trace {
        samples,
        samples_per_cycle: spc,
        origin: Origin::Synthetic,
        path_id: Some(path.path_id),
        alignment: Some(0),
    })
}

/// `n` synthetic traces from a ChaCha stream seeded with `seed`.
pub fn synthesize_set(
    path: &ExecutionPath,
    library: &BlockLibrary,
    n: usize,
    seed: u64,
) -> Result<Vec<Trace>> {
    if n == 0 {
        return Err(Error::Parameter("trace count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| synthesize(path, library, &mut rng))
        .collect()
}
