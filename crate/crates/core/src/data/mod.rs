//! Dataset ingestion, the synthetic two-class corpus, and augmentation.

pub mod augment;
pub mod dataset;
pub mod image;
pub mod synthetic;

pub use augment::AugmentConfig;
pub use dataset::{Dataset, Item, Split};
pub use image::{batch_tensor, Image};
pub use synthetic::{gen_synthetic, BandLayout, SplitCounts};
