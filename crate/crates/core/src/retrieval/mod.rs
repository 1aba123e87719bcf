//! Orientation descriptors over joint pairs, a brute-force pose index and
//! the vote log that judges its rankings.

mod descriptor;
mod index;
mod votes;

pub use descriptor::{compute_descriptor, pair_table, PoseDescriptor, DESCRIPTOR_DIM, DESCRIPTOR_VERSION, NUM_PAIRS};
pub use index::{IndexEntry, QueryPose, RetrievalIndex, SearchHit};
pub use votes::{ndcg_from_votes, NdcgReport, Vote, VoteRecord, VoteStore};
