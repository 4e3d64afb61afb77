//! Configuration, checkpoint and media serialization.

mod checkpoint;
mod config;
mod video;

pub use checkpoint::{
    checkpoint_bytes, crc32, decode, encode, load_checkpoint, load_params, save_checkpoint, Record,
};
pub use config::RunConfig;
pub use video::{load_video_raw, save_ppm_frames, save_video_raw};
