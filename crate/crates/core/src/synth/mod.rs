//! Synthetic domain-shift corpus: deterministic scene generation, weather
//! corruptions, and the on-disk corpus builder/loader.

pub mod corpus;
pub mod scene;
pub mod shift;

pub use corpus::{
    build_corpus, corpus_digest, image_to_png_bytes, load_split, open_manifest,
    png_bytes_to_image, split_annotation_path, AnnRecord, CorpusConfig, CorpusManifest,
    LoadedSample, ManifestEntry,
};
pub use scene::{
    generate_scene, generate_scene_with_shapes, shape_mask, ImageSample, SceneSpec, ShapeKind,
    ShapeParams, CLASS_NAMES, NUM_CLASSES,
};
pub use shift::{apply_compound_member, apply_domain_shift, CompoundMember, DomainShift, ShiftKind};
