//! Command line tools and the HTTP inference service.

pub mod api;
pub mod cli;
pub mod jobs;

use facefill_core::completion::{complete, CompletionRequest};
use facefill_core::imaging::{decode_image, encode_png};
use facefill_core::masking::decode_user_mask;
use facefill_core::networks::Parser;
use facefill_core::checkpoint::Model;
use facefill_core::Result;

/// Largest seed drawn when a request leaves it out. Seeds stay below 2^53 so
/// they survive a round trip through a JavaScript number.
pub const MAX_RANDOM_SEED: u64 = (1 << 53) - 1;

pub fn random_seed() -> u64 {
    rand::random_range(0..=MAX_RANDOM_SEED)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletedPng {
    pub png: Vec<u8>,
    pub seed_used: u64,
    pub mask_area: usize,
    pub warnings: Vec<String>,
}

/// The one completion path shared by the CLI and the service, from encoded
/// image and mask bytes to an encoded PNG.
pub fn complete_encoded(model: &Model, image: &[u8], mask: &[u8], seed: u64, blend: bool) -> Result<CompletedPng> {
    let image = decode_image(image)?;
    let mask = decode_user_mask(mask)?;
    let done = complete(
        &CompletionRequest {
            image,
            mask: mask.clone(),
            seed,
            blend,
        },
        &model.generator,
    )?;
    Ok(CompletedPng {
        png: encode_png(&done.image)?,
        seed_used: seed,
        mask_area: mask.area(),
        warnings: done.warnings,
    })
}

/// Colour-coded label map of an encoded face.
pub fn parse_encoded(parser: &Parser, image: &[u8]) -> Result<Vec<u8>> {
    let labels = parser.parse(&decode_image(image)?)?;
    encode_png(&labels.colorize())
}
