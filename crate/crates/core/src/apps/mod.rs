//! Body part examined outputs, known-region cropping, sanity checks and the
//! metadata record.

pub mod bpe;
pub mod known_region;
pub mod metadata;
pub mod sanity;

pub use bpe::{body_part_examined_dict, body_part_examined_tag, BodyPartBoundaries};
pub use known_region::{crop_mask, crop_volume, estimate_known_region, CropReport, KnownRegion};
pub use metadata::{build_metadata, MetadataConfig, MetadataRecord};
pub use sanity::{data_sanity_check, SanityReport};
