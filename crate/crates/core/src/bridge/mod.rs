//! Unpaired Schrödinger-bridge translation from MRI to CT.

mod discriminator;
mod generator;
mod loss;
mod schedule;
mod translate;

pub use discriminator::{discriminator_graph, Discriminator, DiscriminatorConfig, DOWNSAMPLING};
pub use generator::{generator_graph, Generator, GeneratorConfig, GeneratorOutput};
pub use loss::{discriminator_loss, unsb_loss, BridgeContext, LossComponents, UnsbTerms, NCE_PATCHES, NCE_TEMPERATURE};
pub use schedule::{make_schedule, sample_bridge, SBLossWeights, TimeSchedule, DEFAULT_STEPS, DEFAULT_TAU};
pub use translate::{run_chain, translate};
