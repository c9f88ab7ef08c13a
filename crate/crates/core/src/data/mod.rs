//! Folds, episodic sampling, the synthetic shapes generator and the
//! on-disk `images/ masks/ classes.txt` layout.

mod episode;
mod folds;
mod index;
mod layout;
mod sample;
pub mod synth;

pub use episode::{sample_episode, Episode, Mode};
pub use folds::{make_folds, FoldSplit, PASCAL_VOC_CLASSES};
pub use index::{DatasetIndex, IndexedImage};
pub use layout::{load_layout, load_pascal_style, read_class_table, write_layout, CLASSES_FILE, IMAGES_DIR, MASKS_DIR};
pub use sample::{ClassId, ImageSample, LabelMap};
pub use synth::{generate_synthetic, ShapeKind, SynthConfig};
