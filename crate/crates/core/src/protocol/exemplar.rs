use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ImageBank, Instance, LabeledImage};
use crate::error::{Error, Result};

/// A stored image id with the instances of the class it was kept for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub image_id: u64,
    pub instances: Vec<Instance>,
}

/// Balanced replay memory: up to `cap` exemplars per known class.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExemplarStore {
    pub per_class: BTreeMap<u32, Vec<Exemplar>>,
}

impl ExemplarStore {
    pub fn is_empty(&self) -> bool {
        self.per_class.values().all(Vec::is_empty)
    }

    pub fn len(&self) -> usize {
        self.per_class.values().map(Vec::len).sum()
    }

    /// Adds or replaces the classes of `other`.
    pub fn merge(&mut self, other: ExemplarStore) {
        self.per_class.extend(other.per_class);
    }

    /// One training image per stored image id, with the instances of every class it was kept for.
    pub fn training_images(&self, bank: &ImageBank) -> Result<Vec<LabeledImage>> {
        let mut by_id: BTreeMap<u64, Vec<Instance>> = BTreeMap::new();
        for ex in self.per_class.values().flatten() {
            let inst = by_id.entry(ex.image_id).or_default();
            for i in &ex.instances {
                if !inst.contains(i) {
                    inst.push(*i);
                }
            }
        }
        by_id
            .into_iter()
            .map(|(id, instances)| {
                let pixels = bank
                    .get(id)
                    .ok_or_else(|| Error::contract(format!("no pixels for exemplar image {id}")))?;
                Ok(LabeledImage {
                    image_id: id,
                    pixels,
                    instances,
                })
            })
            .collect()
    }
}

/// Uniformly samples up to `cap` images per class among those containing it.
pub fn build_exemplar_store(images: &[LabeledImage], classes: &[u32], cap: usize, seed: u64) -> Result<ExemplarStore> {
    if cap == 0 {
        return Err(Error::config("exemplar_cap", "must be at least 1"));
    }
    let mut store = ExemplarStore::default();
    for &c in classes {
        let having: Vec<&LabeledImage> = images
            .iter()
            .filter(|img| img.instances.iter().any(|i| i.label == c))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::from(c));
        let mut picks = sample(&mut rng, having.len(), cap.min(having.len())).into_vec();
        picks.sort_unstable();
        let chosen = picks
            .into_iter()
            .map(|k| Exemplar {
                image_id: having[k].image_id,
                instances: having[k].instances.iter().filter(|i| i.label == c).copied().collect(),
            })
            .collect();
        store.per_class.insert(c, chosen);
    }
    Ok(store)
}
