use kerag_core::baserec::{train_cf, CfConfig, CfModel};
use kerag_core::corpus::{leave_one_out_split, Dataset, DatasetSplit, KnowledgeGraph};
use kerag_core::gat::{self, EmbeddingStore, GatParams, GatTrainConfig};
use kerag_core::promptgen::{Artifacts, SentenceTemplates};
use kerag_core::retriever::{score_edges, TripleIndex};
use kerag_core::synth::{generate, SynthConfig};

/// A synthetic world with every upstream artifact trained at small scale.
pub struct World {
    pub dataset: Dataset,
    pub kg: KnowledgeGraph,
    pub split: DatasetSplit,
    pub cf: CfModel,
    pub store: EmbeddingStore,
    pub params: GatParams,
    pub index: TripleIndex,
    pub templates: SentenceTemplates,
}

impl World {
    pub fn artifacts(&self) -> Artifacts<'_> {
        Artifacts {
            catalog: &self.dataset.catalog,
            kg: &self.kg,
            split: &self.split,
            cf: &self.cf,
            index: &self.index,
            templates: &self.templates,
        }
    }
}

pub fn build_world(users: usize, items: usize, seed: u64) -> World {
    let synth = generate(&SynthConfig {
        users,
        items,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    let split = leave_one_out_split(&synth.dataset.interactions).unwrap();
    let cf = train_cf(
        &split,
        items,
        &CfConfig {
            dim: 16,
            epochs: 8,
            batch_size: 1024,
            seed,
            ..CfConfig::default()
        },
    )
    .unwrap()
    .model;
    let trained = gat::train(
        &synth.kg,
        &GatTrainConfig {
            dim: 8,
            epochs: 2,
            seed,
            ..GatTrainConfig::default()
        },
    )
    .unwrap();
    let index = score_edges(&trained.store, &synth.kg).unwrap();
    World {
        dataset: synth.dataset,
        kg: synth.kg,
        split,
        cf,
        store: trained.store,
        params: trained.params,
        index,
        templates: SentenceTemplates::builtin(),
    }
}
