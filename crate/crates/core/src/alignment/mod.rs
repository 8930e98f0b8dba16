//! Chroma DTW between a piano performance and a song, the resulting
//! piano-to-song time map, and the note-remapping (strong alignment) baseline.

mod dtw;
mod remap;
mod time_map;

pub use dtw::{cosine_distance, cost_matrix, dtw_path, path_cost, WarpPath, STEPS};
pub use remap::remap_notes;
pub use time_map::{time_map_from_path, TimeMap};
