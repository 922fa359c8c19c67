use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{gen_motion_clip, gen_shape_image, SourceSpec};
use crate::error::{Error, Result};
use crate::nn::Modality;
use crate::tensor::{Real, Tensor};

/// Examples of one source within a mixed batch.
#[derive(Clone, Debug, PartialEq)]
pub struct SubBatch<T> {
    /// Position of the source in the stream's source list.
    pub source: usize,
    pub source_id: usize,
    pub modality: Modality,
    /// `N×C×L×H×W`.
    pub pixels: Tensor<T>,
    pub labels: Vec<usize>,
    /// Per-source example indices, in draw order.
    pub indices: Vec<u64>,
}

/// A batch split into per-source sub-batches, in source order; sources that
/// drew no example are absent.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedBatch<T> {
    pub parts: Vec<SubBatch<T>>,
}

impl<T> MixedBatch<T> {
    pub fn len(&self) -> usize {
        self.parts.iter().map(|p| p.labels.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn part(&self, modality: Modality) -> impl Iterator<Item = &SubBatch<T>> {
        self.parts.iter().filter(move |p| p.modality == modality)
    }
}

/// Draws each example's source from the categorical distribution of the
/// normalized source weights, then generates the next example of that
/// source. The sequence depends only on the seed.
#[derive(Clone, Debug)]
pub struct MixedStream {
    sources: Vec<SourceSpec>,
    sampler: WeightedIndex<f64>,
    rng: ChaCha8Rng,
    next_index: Vec<u64>,
    batch_size: usize,
    seed: u64,
}

impl MixedStream {
    pub fn new(sources: Vec<SourceSpec>, batch_size: usize, seed: u64) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::Config("a mixed stream needs at least one source".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        for s in &sources {
            s.validate()?;
        }
        let sampler = WeightedIndex::new(sources.iter().map(|s| s.weight))
            .map_err(|e| Error::Config(format!("source weights {:?}: {e}", sources.iter().map(|s| s.weight).collect::<Vec<_>>())))?;
        Ok(MixedStream {
            next_index: vec![0; sources.len()],
            sources,
            sampler,
            rng: ChaCha8Rng::seed_from_u64(seed),
            batch_size,
            seed,
        })
    }

    pub fn sources(&self) -> &[SourceSpec] {
        &self.sources
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Draws the source position of the next example and its per-source index.
    pub fn draw(&mut self) -> (usize, u64) {
        let s = self.sampler.sample(&mut self.rng);
        let index = self.next_index[s];
        self.next_index[s] += 1;
        (s, index)
    }

    pub fn next_batch<T: Real>(&mut self) -> MixedBatch<T> {
        let draws: Vec<(usize, u64)> = (0..self.batch_size).map(|_| self.draw()).collect();
        let mut parts = Vec::new();
        for (pos, spec) in self.sources.iter().enumerate() {
            let indices: Vec<u64> = draws.iter().filter(|d| d.0 == pos).map(|d| d.1).collect();
            if indices.is_empty() {
                continue;
            }
            let mut labels = Vec::with_capacity(indices.len());
            let mut data = Vec::new();
            for &i in &indices {
                let (pixels, label) = match spec.modality {
                    Modality::Image => {
                        let e = gen_shape_image::<T>(spec, self.seed, i);
                        (e.pixels, e.label)
                    }
                    Modality::Video => {
                        let e = gen_motion_clip::<T>(spec, self.seed, i);
                        (e.pixels, e.label)
                    }
                };
                labels.push(label);
                data.extend(pixels.into_data());
            }
            let [c, l, h, w] = spec.example_shape();
            parts.push(SubBatch {
                source: pos,
                source_id: spec.source_id,
                modality: spec.modality,
                pixels: Tensor::new(vec![indices.len(), c, l, h, w], data).expect("stacked examples"),
                labels,
                indices,
            });
        }
        MixedBatch { parts }
    }
}
