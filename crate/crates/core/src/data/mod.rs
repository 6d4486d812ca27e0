//! Seeded synthetic families, the fold protocol and the on-disk layout.

mod protocol;
mod store;
mod synth;

pub use protocol::{make_protocol, negative_pairs, positive_pairs, KinPair, Protocol, Relation, Split, NUM_FOLDS};
pub use store::{read_dataset, write_dataset, Dataset};
pub use synth::{
    generate_aging_corpus, generate_family_dataset, FaceSample, Gender, Generation, SampleInfo, SynthConfig, World,
};
